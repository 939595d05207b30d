"""Command-line entry point: gen, train, sweep, ablate, report.

Runs are driven by a single INI-style config file with flat sections
([domain], [noise], [train], plus [sweep] and [ablation] for the
batteries). Every command resolves all defaults, writes its outputs
atomically, and drops a manifest with config, dataset digests, timings
and the output inventory.

Exit codes: 0 success, 2 config error, 3 IO error, 4 numeric abort,
5 partial sweep/ablation failure.
"""

from __future__ import annotations

import argparse
import configparser
import dataclasses
import json
import sys
import time
from importlib.metadata import PackageNotFoundError, version
from pathlib import Path

from . import datagen, evaluation, trainer
from .errors import ConfigError, FormatError, VersionError
from .fileio import atomic_write_text, file_digest
from .model import save_model

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_NUMERIC = 4
EXIT_PARTIAL = 5

_KIND_ALIASES = {
    "label": datagen.LABEL_ONLY,
    "feature": datagen.FEATURE_ONLY,
    "mixed": datagen.MIXED,
}


def _tool_version() -> str:
    try:
        return f"dualcan {version('dualcan')}"
    except PackageNotFoundError:
        return "dualcan (uninstalled)"


# ---------------------------------------------------------------------------
# Config parsing
# ---------------------------------------------------------------------------

class _Section:
    def __init__(self, parser: configparser.ConfigParser, name: str):
        self.name = name
        self.section = parser[name] if parser.has_section(name) else {}

    def _fetch(self, field: str, cast, required: bool, default):
        if field not in self.section:
            if required:
                raise ConfigError(f"missing required field [{self.name}] {field}")
            return default
        raw = str(self.section[field]).strip()
        try:
            return cast(raw)
        except (ValueError, KeyError) as exc:
            raise ConfigError(f"bad value for [{self.name}] {field}: {raw!r}") from exc

    def get_int(self, field, default=None, required=False):
        return self._fetch(field, int, required, default)

    def get_float(self, field, default=None, required=False):
        return self._fetch(field, float, required, default)

    def get_bool(self, field, default=None, required=False):
        def cast(raw: str) -> bool:
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)

        return self._fetch(field, cast, required, default)

    def get_str(self, field, default=None, required=False):
        return self._fetch(field, str, required, default)

    def get_floats(self, field, default=None, required=False):
        return self._fetch(field, lambda raw: tuple(float(t) for t in raw.split()), required, default)

    def get_ints(self, field, default=None, required=False):
        return self._fetch(field, lambda raw: tuple(int(t) for t in raw.split()), required, default)

    def get_strs(self, field, default=None, required=False):
        return self._fetch(field, lambda raw: tuple(raw.split()), required, default)


def _read_ini(path) -> configparser.ConfigParser:
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        with open(path) as handle:
            parser.read_file(handle)
    except configparser.Error as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    return parser


def load_config(path, seed_override: int | None = None) -> evaluation.ExperimentConfig:
    parser = _read_ini(path)
    dom = _Section(parser, "domain")
    noi = _Section(parser, "noise")
    trn = _Section(parser, "train")

    feature_dim = dom.get_int("feature_dim", required=True)
    domain = datagen.DomainSpec(
        num_classes=dom.get_int("num_classes", required=True),
        feature_dim=feature_dim,
        samples_per_class=dom.get_int("samples_per_class", required=True),
        class_center_scale=dom.get_float("class_center_scale", 2.0),
        class_spread=dom.get_float("class_spread", 0.5),
        shift_rotation=dom.get_float("shift_rotation", 0.0),
        shift_translation=dom.get_floats("shift_translation", tuple([0.0] * feature_dim)),
        seed=dom.get_int("seed", 0),
    )

    kind_raw = noi.get_str("kind", required=True).lower()
    if kind_raw not in _KIND_ALIASES:
        raise ConfigError(f"bad value for [noise] kind: {kind_raw!r}")
    noise = datagen.NoiseSpec(
        p_noise=noi.get_float("p_noise", required=True),
        kind=_KIND_ALIASES[kind_raw],
        feature_noise_sigma=noi.get_float("feature_noise_sigma", 0.0),
        feature_mask_fraction=noi.get_float("feature_mask_fraction", 0.0),
        seed=noi.get_int("seed", 0),
    )

    defaults = trainer.TrainConfig()
    ablation = trainer.AblationFlags(
        feature_correction=trn.get_bool("feature_correction", True),
        label_correction=trn.get_bool("label_correction", True),
        source_correction=trn.get_bool("source_correction", True),
        target_correction=trn.get_bool("target_correction", True),
    )
    radius_pct = trn.get_float("radius_percentile", None)
    train = trainer.TrainConfig(
        max_epochs=trn.get_int("max_epochs", defaults.max_epochs),
        warmup_epochs=trn.get_int("warmup_epochs", defaults.warmup_epochs),
        lr=trn.get_float("lr", defaults.lr),
        lr_decay_factor=trn.get_float("lr_decay_factor", defaults.lr_decay_factor),
        momentum=trn.get_float("momentum", defaults.momentum),
        batch_size=trn.get_int("batch_size", defaults.batch_size),
        separation_ratio=trn.get_float("separation_ratio", defaults.separation_ratio),
        eta0=trn.get_float("eta0", defaults.eta0),
        hidden_dims=trn.get_ints("hidden_dims", defaults.hidden_dims),
        feature_dim=trn.get_int("feature_dim", defaults.feature_dim),
        init_scale=trn.get_float("init_scale", defaults.init_scale),
        consistency_weight=trn.get_float("consistency_weight", defaults.consistency_weight),
        weak_sigma_scale=trn.get_float("weak_sigma_scale", defaults.weak_sigma_scale),
        strong_sigma_scale=trn.get_float("strong_sigma_scale", defaults.strong_sigma_scale),
        strong_mask_prob=trn.get_float("strong_mask_prob", defaults.strong_mask_prob),
        radius_percentile=radius_pct,
        reuse_source_clusters=trn.get_bool("reuse_source_clusters", False),
        ablation=ablation,
        seed=trn.get_int("seed", 0),
    )

    config = evaluation.ExperimentConfig(
        domain=domain,
        noise=noise,
        train=train,
        corrupt_target=noi.get_bool("corrupt_target", False),
    )
    if seed_override is not None:
        config = evaluation.ExperimentConfig(
            domain=dataclasses.replace(domain, seed=seed_override),
            noise=dataclasses.replace(noise, seed=seed_override),
            train=dataclasses.replace(train, seed=seed_override),
            corrupt_target=config.corrupt_target,
        )
    try:
        config.domain.validate()
        config.noise.validate()
        config.train.validate()
    except Exception as exc:
        raise ConfigError(str(exc)) from exc
    return config


def load_sweep_section(path) -> dict:
    parser = _read_ini(path)
    sec = _Section(parser, "sweep")
    return {
        "levels": list(sec.get_floats("levels", (0.0, 0.4, 0.8, 1.2, 1.6))),
        "methods": list(sec.get_strs("methods", ("full", "no_correction"))),
        "seeds": list(sec.get_ints("seeds", (0, 1, 2, 3, 4))),
    }


def load_ablation_section(path) -> dict:
    parser = _read_ini(path)
    sec = _Section(parser, "ablation")
    return {"seeds": list(sec.get_ints("seeds", (0, 1, 2, 3, 4)))}


def _config_dict(config: evaluation.ExperimentConfig) -> dict:
    return {
        "domain": dataclasses.asdict(config.domain),
        "noise": dataclasses.asdict(config.noise),
        "train": dataclasses.asdict(config.train),
        "corrupt_target": config.corrupt_target,
    }


def _write_manifest(out_dir: Path, payload: dict) -> None:
    payload = {"tool": _tool_version(), **payload}
    atomic_write_text(out_dir / "manifest.json", json.dumps(payload, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_gen(config_path, out_dir, seed_override=None) -> int:
    started = time.time()
    config = load_config(config_path, seed_override)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    source, target = datagen.make_domain_pair(config.domain)
    source = datagen.corrupt(source, config.noise)
    if config.corrupt_target:
        feature_only = dataclasses.replace(
            config.noise,
            kind=datagen.FEATURE_ONLY,
            p_noise=min(config.noise.p_noise / 2.0, 1.0),
            seed=evaluation.derive_seed(config.noise.seed, 1),
        )
        target = datagen.corrupt(target, feature_only)

    paths = {"source": out / "source.dset", "target": out / "target.dset"}
    datagen.save_dataset(source, paths["source"])
    datagen.save_dataset(target, paths["target"])
    datagen.export_csv(source, out / "source.csv")
    datagen.export_csv(target, out / "target.csv")
    digests = {name: file_digest(p) for name, p in paths.items()}
    for name, digest in digests.items():
        print(f"{name}: {digest}")
    _write_manifest(
        out,
        {
            "command": "gen",
            "config": _config_dict(config),
            "dataset_digests": digests,
            "timings_s": {"total": round(time.time() - started, 3)},
            "outputs": sorted(str(p.name) for p in out.iterdir() if p.suffix != ".tmp"),
        },
    )
    return EXIT_OK


def cmd_train(config_path, data_dir, out_dir, seed_override=None) -> int:
    started = time.time()
    config = load_config(config_path, seed_override)
    data = Path(data_dir)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    source = datagen.load_dataset(data / "source.dset")
    target = datagen.load_dataset(data / "target.dset")
    digests = {
        "source": file_digest(data / "source.dset"),
        "target": file_digest(data / "target.dset"),
    }

    train_started = time.time()
    result = trainer.run(config.train, source, target)
    train_elapsed = time.time() - train_started

    trainer.write_metrics_csv(result.history, out / "metrics.csv")
    trainer.write_nic_report_csv(result.nic_history, out / "nic_report.csv")
    save_model(result.model, out / "model.ckpt")
    _write_manifest(
        out,
        {
            "command": "train",
            "config": _config_dict(config),
            "dataset_digests": digests,
            "aborted": result.aborted,
            "abort_reason": result.abort_reason,
            "epochs_completed": len(result.history),
            "metrics": [dataclasses.asdict(m) for m in result.history],
            "timings_s": {
                "train": round(train_elapsed, 3),
                "total": round(time.time() - started, 3),
            },
            "outputs": ["metrics.csv", "nic_report.csv", "model.ckpt", "manifest.json"],
        },
    )
    if result.aborted:
        print(f"numeric abort: {result.abort_reason}", file=sys.stderr)
        return EXIT_NUMERIC
    final = result.history[-1]
    print(
        f"done: {len(result.history)} epochs, "
        f"source_acc={final.source_acc:.3f}, target_acc={final.target_acc:.3f}"
    )
    return EXIT_OK


def cmd_sweep(config_path, out_dir, seed_override=None, jobs: int = 1) -> int:
    started = time.time()
    config = load_config(config_path, seed_override)
    plan = load_sweep_section(config_path)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    sweep = evaluation.noise_sweep(
        config, plan["levels"], plan["methods"], plan["seeds"], jobs=jobs
    )
    atomic_write_text(out / "sweep_cells.csv", sweep.cells_csv_text())
    atomic_write_text(out / "sweep_summary.csv", sweep.summary_csv_text())
    outcomes = evaluation.sweep_assertions(sweep)
    evaluation.write_assertion_report(outcomes, out / "sweep_assertions.txt")
    print(evaluation.assertion_report_text(outcomes), end="")
    _write_manifest(
        out,
        {
            "command": "sweep",
            "config": _config_dict(config),
            "sweep": plan,
            "n_cells": len(sweep.cells),
            "n_failed": sum(c.failed for c in sweep.cells),
            "timings_s": {"total": round(time.time() - started, 3)},
            "outputs": ["sweep_cells.csv", "sweep_summary.csv", "sweep_assertions.txt", "manifest.json"],
        },
    )
    return EXIT_PARTIAL if sweep.any_failed else EXIT_OK


def cmd_ablate(config_path, out_dir, seed_override=None, jobs: int = 1) -> int:
    started = time.time()
    config = load_config(config_path, seed_override)
    plan = load_ablation_section(config_path)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    result = evaluation.ablation_battery(config, plan["seeds"], jobs=jobs)
    atomic_write_text(out / "ablation_table.csv", result.table_csv_text())
    outcomes = evaluation.ablation_assertions(result)
    evaluation.write_assertion_report(outcomes, out / "ablation_assertions.txt")
    print(result.table_csv_text(), end="")
    print(evaluation.assertion_report_text(outcomes), end="")
    _write_manifest(
        out,
        {
            "command": "ablate",
            "config": _config_dict(config),
            "ablation": plan,
            "timings_s": {"total": round(time.time() - started, 3)},
            "outputs": ["ablation_table.csv", "ablation_assertions.txt", "manifest.json"],
        },
    )
    return EXIT_PARTIAL if result.any_failed else EXIT_OK


def _read_metrics_csv(path: Path) -> list[trainer.EpochMetrics]:
    lines = path.read_text().strip().splitlines()
    header = lines[0].split(",")
    rows = []
    for line in lines[1:]:
        values = dict(zip(header, line.split(",")))
        rows.append(
            trainer.EpochMetrics(
                epoch=int(values["epoch"]),
                source_acc=float(values["source_acc"]),
                target_acc=float(values["target_acc"]),
                src_noise_ratio=float(values["src_noise_ratio"]),
                pl_error=float(values["pl_error"]),
                eta=float(values["eta"]),
                lr=float(values["lr"]),
                source_train_loss=float(values["source_train_loss"]),
                src_detected_noise_ratio=float(values["src_detected_noise_ratio"]),
                nic_src_clean=int(values["nic_src_clean"]),
                nic_src_feature=int(values["nic_src_feature"]),
                nic_src_label=int(values["nic_src_label"]),
                nic_tgt_label=int(values["nic_tgt_label"]),
            )
        )
    return rows


def cmd_report(data_dir, out_dir) -> int:
    """Assemble curves and the assertion summary from existing run outputs."""
    data = Path(data_dir)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    outcomes: list[evaluation.AssertionOutcome] = []
    found = []

    metrics_path = data / "metrics.csv"
    if metrics_path.exists():
        history = _read_metrics_csv(metrics_path)
        curves = evaluation.correction_curves(history)
        curves.write_csv(out / "correction_curves.csv")
        outcomes.extend(evaluation.curve_assertions(curves))
        found.append("metrics.csv")

    sweep_assert = data / "sweep_assertions.txt"
    if sweep_assert.exists():
        found.append("sweep_assertions.txt")
    ablate_assert = data / "ablation_assertions.txt"
    if ablate_assert.exists():
        found.append("ablation_assertions.txt")

    if not found:
        print(f"no run artifacts found under {data}", file=sys.stderr)
        return EXIT_IO

    report_lines = [f"artifacts: {', '.join(found)}", ""]
    report_lines.append(evaluation.assertion_report_text(outcomes).rstrip("\n") if outcomes else "(no assertions evaluated)")
    for extra in (sweep_assert, ablate_assert):
        if extra.exists():
            report_lines.append("")
            report_lines.append(f"--- {extra.name} ---")
            report_lines.append(extra.read_text().rstrip("\n"))
    text = "\n".join(report_lines) + "\n"
    atomic_write_text(out / "report.txt", text)
    print(text, end="")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dualcan", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config=True, data=False):
        if config:
            p.add_argument("--config", required=True, help="INI config file")
        if data:
            p.add_argument("--data-dir", required=True, help="directory with dataset files")
        p.add_argument("--out-dir", required=True, help="output directory")
        p.add_argument("--seed", type=int, default=None, help="override all section seeds")

    p_gen = sub.add_parser("gen", help="generate and corrupt a source/target pair")
    common(p_gen)

    p_train = sub.add_parser("train", help="run the dual adaptation loop")
    common(p_train, data=True)

    p_sweep = sub.add_parser("sweep", help="noise-level sweep over ablation presets")
    common(p_sweep)
    p_sweep.add_argument("--jobs", type=int, default=1, help="parallel sweep cells")

    p_ablate = sub.add_parser("ablate", help="ablation battery at the configured noise level")
    common(p_ablate)
    p_ablate.add_argument("--jobs", type=int, default=1, help="parallel cells")

    p_report = sub.add_parser("report", help="assemble curves and assertion summaries")
    p_report.add_argument("--data-dir", required=True, help="directory with run outputs")
    p_report.add_argument("--out-dir", required=True, help="output directory")

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "gen":
            return cmd_gen(args.config, args.out_dir, args.seed)
        if args.command == "train":
            return cmd_train(args.config, args.data_dir, args.out_dir, args.seed)
        if args.command == "sweep":
            return cmd_sweep(args.config, args.out_dir, args.seed, jobs=args.jobs)
        if args.command == "ablate":
            return cmd_ablate(args.config, args.out_dir, args.seed, jobs=args.jobs)
        if args.command == "report":
            return cmd_report(args.data_dir, args.out_dir)
        raise AssertionError(args.command)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (FormatError, VersionError) as exc:
        print(f"input file error: {exc}", file=sys.stderr)
        return EXIT_IO
    except OSError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
