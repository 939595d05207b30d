"""Ground-truth-aware measurement and multi-seed experiment batteries.

This is the only module allowed to read a dataset's hidden clean labels
and corruption flags. Besides plain accuracy it scores correction
verdicts against ground truth, exports correction-quality curves and
distance histograms, and runs noise-level sweeps and ablation batteries
on top of the training loop. Nothing here mutates models or datasets.
"""

from __future__ import annotations

import concurrent.futures
from dataclasses import dataclass, replace

import numpy as np

from . import model as model_mod
from . import nic
from . import trainer
from .datagen import (
    FEATURE_ONLY,
    MIXED,
    DomainSpec,
    NoiseFlags,
    NoiseSpec,
    NoisyDataset,
    corrupt,
    make_domain_pair,
)
from .errors import ParameterError
from .fileio import atomic_write_text, fmt_float
from .model import Model
from .nic import ClusterModel, CorrectionRecord, NoiseVerdict
from .trainer import ABLATION_PRESETS, ABLATION_TABLE_ROWS, EpochMetrics, TrainConfig

VERDICT_ORDER = (NoiseVerdict.CLEAN, NoiseVerdict.FEATURE_NOISE, NoiseVerdict.LABEL_NOISE)


# ---------------------------------------------------------------------------
# Hidden-ground-truth accessors. Training code calls these instead of
# touching clean labels or flags itself.
# ---------------------------------------------------------------------------

def accuracy(model: Model, head: str, features, clean_labels) -> float:
    """Fraction of argmax predictions matching the clean labels."""
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2 or features.shape[0] == 0:
        raise ParameterError("need a non-empty feature matrix")
    clean_labels = np.asarray(clean_labels)
    if clean_labels.shape[0] != features.shape[0]:
        raise ParameterError("labels length differs from feature rows")
    probs = model_mod.predict(model, head, features)
    return float(np.mean(np.argmax(probs, axis=1) == clean_labels))


def dataset_accuracy(model: Model, head: str, dataset: NoisyDataset) -> float:
    return accuracy(model, head, dataset.features, dataset.clean_labels)


def label_disagreement(labels, dataset: NoisyDataset) -> float:
    """Fraction of the given labels that differ from the hidden clean labels."""
    labels = np.asarray(labels)
    if labels.shape[0] != len(dataset):
        raise ParameterError("labels length differs from dataset size")
    return float(np.mean(labels != dataset.clean_labels))


def injected_label_noise_ratio(dataset: NoisyDataset) -> float:
    return float(np.mean(dataset.noise_flags.label_corrupted))


def ground_truth_verdicts(flags: NoiseFlags) -> np.ndarray:
    """Per-instance ground-truth class: label wrongness dominates, so an
    instance corrupted in both channels scores as label noise."""
    out = np.full(len(flags.label_corrupted), NoiseVerdict.CLEAN, dtype=object)
    out[flags.feature_corrupted] = NoiseVerdict.FEATURE_NOISE
    out[flags.label_corrupted] = NoiseVerdict.LABEL_NOISE
    return out


# ---------------------------------------------------------------------------
# Verdict quality
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class VerdictQuality:
    confusion: np.ndarray  # rows: ground truth, cols: verdict, order VERDICT_ORDER
    precision: dict[NoiseVerdict, float | None]
    recall: dict[NoiseVerdict, float | None]
    counts: dict[NoiseVerdict, int]  # predicted counts


def verdict_quality(records: list[CorrectionRecord], flags: NoiseFlags) -> VerdictQuality:
    """Score verdicts against ground-truth flags; undefined cells stay None."""
    n = len(flags.label_corrupted)
    truth = ground_truth_verdicts(flags)
    confusion = np.zeros((3, 3), dtype=np.int64)
    index_of = {v: i for i, v in enumerate(VERDICT_ORDER)}
    for r in records:
        if not 0 <= r.index < n:
            raise ParameterError(f"record index {r.index} outside dataset")
        confusion[index_of[truth[r.index]], index_of[r.verdict]] += 1
    precision: dict[NoiseVerdict, float | None] = {}
    recall: dict[NoiseVerdict, float | None] = {}
    counts: dict[NoiseVerdict, int] = {}
    for i, v in enumerate(VERDICT_ORDER):
        pred_total = int(confusion[:, i].sum())
        truth_total = int(confusion[i, :].sum())
        counts[v] = pred_total
        precision[v] = confusion[i, i] / pred_total if pred_total else None
        recall[v] = confusion[i, i] / truth_total if truth_total else None
    return VerdictQuality(confusion, precision, recall, counts)


# ---------------------------------------------------------------------------
# Correction-quality curves
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class CorrectionCurves:
    epochs: list[int]
    src_noise_ratio: list[float]
    pl_error: list[float]
    delta_src_noise: float
    delta_pl_error: float

    def csv_text(self) -> str:
        lines = ["epoch,src_noise_ratio,pl_error"]
        for e, s, p in zip(self.epochs, self.src_noise_ratio, self.pl_error):
            lines.append(f"{e},{fmt_float(s)},{fmt_float(p)}")
        return "\n".join(lines) + "\n"

    def write_csv(self, path) -> None:
        atomic_write_text(path, self.csv_text())


def correction_curves(history: list[EpochMetrics]) -> CorrectionCurves:
    if not history:
        raise ParameterError("empty history")
    src = [m.src_noise_ratio for m in history]
    pl = [m.pl_error for m in history]
    return CorrectionCurves(
        epochs=[m.epoch for m in history],
        src_noise_ratio=src,
        pl_error=pl,
        delta_src_noise=src[-1] - src[0],
        delta_pl_error=pl[-1] - pl[0],
    )


# ---------------------------------------------------------------------------
# Distance histograms
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class DistanceHistogram:
    bin_edges: np.ndarray
    counts: dict[NoiseVerdict, np.ndarray]
    mean_distance: dict[NoiseVerdict, float | None]

    def csv_text(self) -> str:
        lines = ["bin_lo,bin_hi,clean,feature_noise,label_noise"]
        for i in range(len(self.bin_edges) - 1):
            lines.append(
                ",".join(
                    [fmt_float(self.bin_edges[i]), fmt_float(self.bin_edges[i + 1])]
                    + [str(int(self.counts[v][i])) for v in VERDICT_ORDER]
                )
            )
        return "\n".join(lines) + "\n"

    def write_csv(self, path) -> None:
        atomic_write_text(path, self.csv_text())


def distance_histogram(
    dataset: NoisyDataset,
    model: Model,
    clusters: ClusterModel,
    flags: NoiseFlags,
    num_bins: int = 20,
) -> DistanceHistogram:
    """Distance-to-nearest-centroid histograms per ground-truth group.

    All groups share one set of bin edges spanning [0, max distance], so
    counts across groups sum to the dataset size.
    """
    feats = model_mod.features(model, dataset.features)
    dists = nic.distances_to_centroids(feats, clusters).min(axis=1)
    truth = ground_truth_verdicts(flags)
    top = float(dists.max())
    edges = np.linspace(0.0, top if top > 0 else 1.0, num_bins + 1)
    counts = {}
    means: dict[NoiseVerdict, float | None] = {}
    for v in VERDICT_ORDER:
        group = dists[truth == v]
        counts[v], _ = np.histogram(group, bins=edges)
        means[v] = float(group.mean()) if group.size else None
    return DistanceHistogram(edges, counts, means)


# ---------------------------------------------------------------------------
# Sweeps and ablations
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ExperimentConfig:
    """A full experiment: task geometry, corruption plan, training plan."""

    domain: DomainSpec
    noise: NoiseSpec
    train: TrainConfig
    corrupt_target: bool = False


@dataclass(eq=False)
class SweepCell:
    level: float
    method: str
    seed: int
    final_target_acc: float
    failed: bool = False
    error: str | None = None


@dataclass(eq=False)
class SweepResult:
    levels: list[float]
    methods: list[str]
    seeds: list[int]
    cells: list[SweepCell]

    def cell(self, level: float, method: str, seed: int) -> SweepCell:
        for c in self.cells:
            if c.level == level and c.method == method and c.seed == seed:
                return c
        raise KeyError((level, method, seed))

    def aggregate(self) -> list[dict]:
        rows = []
        for level in self.levels:
            for method in self.methods:
                accs = [
                    c.final_target_acc
                    for c in self.cells
                    if c.level == level and c.method == method and not c.failed
                ]
                failed = sum(
                    1 for c in self.cells
                    if c.level == level and c.method == method and c.failed
                )
                rows.append(
                    {
                        "level": level,
                        "method": method,
                        "mean_acc": float(np.mean(accs)) if accs else float("nan"),
                        "std_acc": float(np.std(accs, ddof=1)) if len(accs) > 1 else 0.0,
                        "n_seeds": len(accs),
                        "n_failed": failed,
                    }
                )
        return rows

    @property
    def any_failed(self) -> bool:
        return any(c.failed for c in self.cells)

    def cells_csv_text(self) -> str:
        lines = ["level,method,seed,final_target_acc,failed,error"]
        for c in self.cells:
            lines.append(
                f"{fmt_float(c.level)},{c.method},{c.seed},"
                f"{fmt_float(c.final_target_acc)},{int(c.failed)},{c.error or ''}"
            )
        return "\n".join(lines) + "\n"

    def summary_csv_text(self) -> str:
        lines = ["level,method,mean_acc,std_acc,n_seeds,n_failed"]
        for row in self.aggregate():
            lines.append(
                f"{fmt_float(row['level'])},{row['method']},{fmt_float(row['mean_acc'])},"
                f"{fmt_float(row['std_acc'])},{row['n_seeds']},{row['n_failed']}"
            )
        return "\n".join(lines) + "\n"


def derive_seed(base: int, *parts: int) -> int:
    """Stable per-cell seed derivation."""
    return int(np.random.SeedSequence((base, *parts)).generate_state(1, np.uint64)[0])


def make_cell_task(
    base: ExperimentConfig, level: float, seed: int
) -> tuple[NoisyDataset, NoisyDataset]:
    """Freshly corrupted datasets for one (level, seed) cell.

    The same (level, seed) always yields the same data, so every method in
    a sweep sees identical inputs at a given cell coordinate.
    """
    dspec = replace(base.domain, seed=derive_seed(base.domain.seed, seed))
    nspec = replace(
        base.noise, p_noise=level, kind=MIXED, seed=derive_seed(base.noise.seed, seed)
    )
    source, target = make_domain_pair(dspec)
    source = corrupt(source, nspec)
    if base.corrupt_target:
        feature_only = replace(
            nspec, kind=FEATURE_ONLY, p_noise=min(level / 2.0, 1.0),
            seed=derive_seed(nspec.seed, 1),
        )
        target = corrupt(target, feature_only)
    return source, target


def _run_sweep_cell(args) -> SweepCell:
    base, level, method, seed = args
    try:
        source, target = make_cell_task(base, level, seed)
        cfg = replace(
            base.train,
            ablation=ABLATION_PRESETS[method],
            seed=derive_seed(base.train.seed, seed),
        )
        result = trainer.run(cfg, source, target)
        if result.aborted:
            return SweepCell(level, method, seed, float("nan"), True, result.abort_reason)
        return SweepCell(level, method, seed, result.history[-1].target_acc)
    except Exception as exc:  # a failed cell is recorded, never dropped
        return SweepCell(level, method, seed, float("nan"), True, repr(exc))


def noise_sweep(
    base: ExperimentConfig,
    levels: list[float],
    methods: list[str],
    seeds: list[int],
    jobs: int = 1,
) -> SweepResult:
    """Full factorial (level x method x seed) of the training loop."""
    for level in levels:
        if not 0.0 <= level <= 2.0:
            raise ParameterError(f"noise level {level} outside [0, 2]")
    for method in methods:
        if method not in ABLATION_PRESETS:
            raise ParameterError(f"unknown ablation preset {method!r}")
    tasks = [
        (base, level, method, seed)
        for level in levels
        for method in methods
        for seed in seeds
    ]
    if jobs > 1:
        with concurrent.futures.ProcessPoolExecutor(max_workers=jobs) as pool:
            cells = list(pool.map(_run_sweep_cell, tasks))
    else:
        cells = [_run_sweep_cell(t) for t in tasks]
    return SweepResult(list(levels), list(methods), list(seeds), cells)


@dataclass(eq=False)
class AblationResult:
    rows: list[dict]  # method, mean_acc, std_acc, accs, n_failed
    seeds: list[int]

    def table_csv_text(self) -> str:
        lines = ["method,mean_acc,std_acc,n_seeds,n_failed"]
        for row in self.rows:
            lines.append(
                f"{row['method']},{fmt_float(row['mean_acc'])},{fmt_float(row['std_acc'])},"
                f"{row['n_seeds']},{row['n_failed']}"
            )
        return "\n".join(lines) + "\n"

    def mean(self, method: str) -> float:
        for row in self.rows:
            if row["method"] == method:
                return row["mean_acc"]
        raise KeyError(method)

    @property
    def any_failed(self) -> bool:
        return any(row["n_failed"] for row in self.rows)


def ablation_battery(base: ExperimentConfig, seeds: list[int], jobs: int = 1) -> AblationResult:
    """The five ablation rows at the base task's corruption level."""
    sweep = noise_sweep(
        base, [base.noise.p_noise], list(ABLATION_TABLE_ROWS), seeds, jobs=jobs
    )
    rows = []
    for agg in sweep.aggregate():
        accs = [
            c.final_target_acc
            for c in sweep.cells
            if c.method == agg["method"] and not c.failed
        ]
        rows.append(
            {
                "method": agg["method"],
                "mean_acc": agg["mean_acc"],
                "std_acc": agg["std_acc"],
                "accs": accs,
                "n_seeds": agg["n_seeds"],
                "n_failed": agg["n_failed"],
            }
        )
    return AblationResult(rows, list(seeds))


# ---------------------------------------------------------------------------
# Directional assertions and the summary report
# ---------------------------------------------------------------------------

@dataclass
class AssertionOutcome:
    name: str
    passed: bool
    detail: str


def curve_assertions(curves: CorrectionCurves) -> list[AssertionOutcome]:
    return [
        AssertionOutcome(
            "source noise ratio decreases over training",
            curves.delta_src_noise < 0,
            f"delta={curves.delta_src_noise:+.4f}",
        ),
        AssertionOutcome(
            "pseudo-label error decreases over training",
            curves.delta_pl_error < 0,
            f"delta={curves.delta_pl_error:+.4f}",
        ),
    ]


def sweep_assertions(sweep: SweepResult) -> list[AssertionOutcome]:
    """Monotone-by-level accuracy (within one pooled std) per method, plus
    the full-vs-baseline comparison at level 0.4 when both are present."""
    outcomes = []
    agg = {(r["level"], r["method"]): r for r in sweep.aggregate()}
    levels = sorted(sweep.levels)
    for method in sweep.methods:
        ok = True
        detail_parts = []
        for lo, hi in zip(levels[:-1], levels[1:]):
            a, b = agg[(lo, method)], agg[(hi, method)]
            pooled = float(np.sqrt((a["std_acc"] ** 2 + b["std_acc"] ** 2) / 2.0))
            if b["mean_acc"] > a["mean_acc"] + pooled:
                ok = False
            detail_parts.append(f"{lo:g}->{hi:g}: {a['mean_acc']:.3f}->{b['mean_acc']:.3f}")
        outcomes.append(
            AssertionOutcome(
                f"accuracy non-increasing with noise level ({method})",
                ok,
                "; ".join(detail_parts),
            )
        )
    if "full" in sweep.methods and "no_correction" in sweep.methods and 0.4 in sweep.levels:
        full = agg[(0.4, "full")]["mean_acc"]
        none = agg[(0.4, "no_correction")]["mean_acc"]
        outcomes.append(
            AssertionOutcome(
                "full method beats no-correction baseline at level 0.4",
                full > none,
                f"full={full:.3f} vs no_correction={none:.3f}",
            )
        )
    return outcomes


def ablation_assertions(result: AblationResult) -> list[AssertionOutcome]:
    full = result.mean("full")
    no_src = result.mean("no_source_correction")
    no_label = result.mean("no_label_correction")
    no_feature = result.mean("no_feature_correction")
    return [
        AssertionOutcome(
            "full method >= without source correction",
            full >= no_src,
            f"full={full:.3f} vs no_source={no_src:.3f}",
        ),
        AssertionOutcome(
            "dropping label correction hurts at least as much as dropping feature correction",
            no_label <= no_feature,
            f"no_label={no_label:.3f} vs no_feature={no_feature:.3f}",
        ),
    ]


def assertion_report_text(outcomes: list[AssertionOutcome]) -> str:
    lines = []
    for o in outcomes:
        status = "PASS" if o.passed else "FAIL"
        lines.append(f"[{status}] {o.name}: {o.detail}")
    lines.append(f"{sum(o.passed for o in outcomes)}/{len(outcomes)} assertions passed")
    return "\n".join(lines) + "\n"


def write_assertion_report(outcomes: list[AssertionOutcome], path) -> None:
    atomic_write_text(path, assertion_report_text(outcomes))
