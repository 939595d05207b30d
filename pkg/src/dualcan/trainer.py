"""Dual adaptation loop: warm-up, then alternating forward and backward steps.

Epochs are global. The first ``warmup_epochs`` train the generator and
source head with plain cross-entropy on the (possibly noisy) observed
source labels; the target head is then initialized as a copy of the source
head. Every remaining epoch runs:

* a forward step: pseudo-label the target with the source head, correct
  the pseudo-labels, then train the target head for one pass of
  mini-batches under the consistency objective (generator and source head
  untouched);
* a backward step: correct source features and labels, then train the
  generator and source head for one pass under the reverse objective (the
  target head contributes loss but stays fixed).

The learning rate decays by ``lr_decay_factor`` at every
floor(max_epochs / 3) boundary; the feature-correction weight eta decays
linearly over ``max_epochs``. Metrics are computed against hidden clean
labels through the evaluation module only; the trainer itself never reads
hidden dataset fields.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import model as model_mod
from . import nic
from .datagen import NoisyDataset
from .errors import NumericError, ParameterError, StateError
from .fileio import atomic_write_bytes, fmt_float
from .model import AugmentSpec, Model, ModelConfig, SgdState


@dataclass(frozen=True)
class AblationFlags:
    feature_correction: bool = True
    label_correction: bool = True
    source_correction: bool = True
    target_correction: bool = True


#: The ablation table rows: the full method plus single-component removals,
#: and the everything-off baseline used by noise-level sweeps.
ABLATION_PRESETS: dict[str, AblationFlags] = {
    "full": AblationFlags(),
    "no_feature_correction": AblationFlags(feature_correction=False),
    "no_label_correction": AblationFlags(label_correction=False),
    "no_source_correction": AblationFlags(source_correction=False),
    "no_target_correction": AblationFlags(target_correction=False),
    "no_correction": AblationFlags(False, False, False, False),
}

ABLATION_TABLE_ROWS = (
    "full",
    "no_feature_correction",
    "no_label_correction",
    "no_source_correction",
    "no_target_correction",
)


@dataclass(frozen=True)
class TrainConfig:
    max_epochs: int = 90
    warmup_epochs: int = 10
    lr: float = 2e-3
    lr_decay_factor: float = 0.1
    momentum: float = 0.9
    batch_size: int = 64
    separation_ratio: float = 0.08
    eta0: float = 0.5
    hidden_dims: tuple[int, ...] = (32, 16)
    feature_dim: int = 16
    init_scale: float = 1.0
    consistency_weight: float = 1.0
    weak_sigma_scale: float = 0.05
    strong_sigma_scale: float = 0.2
    strong_mask_prob: float = 0.1
    radius_percentile: float | None = None
    reuse_source_clusters: bool = False
    ablation: AblationFlags = field(default=AblationFlags())
    seed: int = 0

    def validate(self) -> None:
        if self.max_epochs < 1:
            raise ParameterError("max_epochs must be >= 1")
        if not 0 <= self.warmup_epochs < self.max_epochs:
            raise ParameterError("need 0 <= warmup_epochs < max_epochs")
        if not 0.0 < self.separation_ratio < 1.0:
            raise ParameterError("separation_ratio must be in (0, 1)")
        if not 0.0 <= self.eta0 <= 1.0:
            raise ParameterError("eta0 must be in [0, 1]")
        if self.lr <= 0:
            raise ParameterError("lr must be > 0")
        if not 0.0 <= self.momentum < 1.0:
            raise ParameterError("momentum must be in [0, 1)")
        if self.batch_size < 1:
            raise ParameterError("batch_size must be >= 1")


@dataclass
class EpochMetrics:
    epoch: int
    source_acc: float
    target_acc: float
    src_noise_ratio: float
    pl_error: float
    eta: float
    lr: float
    source_train_loss: float
    src_detected_noise_ratio: float
    nic_src_clean: int
    nic_src_feature: int
    nic_src_label: int
    nic_tgt_label: int


@dataclass(eq=False)
class StepResult:
    model: Model
    records: list[nic.CorrectionRecord]
    opt_state: SgdState
    mean_loss: float
    corrected_labels: np.ndarray


@dataclass(eq=False)
class EpochRecords:
    epoch: int
    source: list[nic.CorrectionRecord]
    target: list[nic.CorrectionRecord]


@dataclass(eq=False)
class RunResult:
    model: Model
    history: list[EpochMetrics]
    nic_history: list[EpochRecords]
    aborted: bool = False
    abort_reason: str | None = None


def learning_rate(config: TrainConfig, epoch: int) -> float:
    boundary = max(1, config.max_epochs // 3)
    return config.lr * config.lr_decay_factor ** (epoch // boundary)


def pseudo_label(model: Model, x) -> np.ndarray:
    """Argmax of the source head's prediction; ties break to the smaller class."""
    probs = model_mod.predict(model, model_mod.HEAD_SOURCE, x)
    if probs.ndim == 1:
        probs = probs[None, :]
    return np.argmax(probs, axis=1).astype(np.int64)


def _epoch_rng(config: TrainConfig, epoch: int, stream: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence((config.seed, epoch, stream)))


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start : start + batch_size]


def _augment_spec(config: TrainConfig, x: np.ndarray) -> AugmentSpec:
    scale = float(np.std(x))
    return AugmentSpec(
        weak_sigma=config.weak_sigma_scale * scale,
        strong_sigma=config.strong_sigma_scale * scale,
        strong_mask_prob=config.strong_mask_prob,
    )


def _warmup_epoch(
    model: Model,
    source: NoisyDataset,
    config: TrainConfig,
    epoch: int,
    opt_state: SgdState | None,
) -> tuple[Model, SgdState, float]:
    x, y = source.features, source.observed_labels
    lr = learning_rate(config, epoch)
    rng = _epoch_rng(config, epoch, stream=0)
    state = opt_state
    losses = []
    for idx in _batches(len(x), config.batch_size, rng):
        loss, grads = model_mod.loss_grad_supervised(model, x[idx], y[idx])
        model, state = model_mod.sgd_step(model, grads, lr, config.momentum, state)
        losses.append(loss)
    return model, state, float(np.mean(losses))


def warmup(model: Model, source_dataset: NoisyDataset, config: TrainConfig) -> Model:
    """Source-only pre-training; ends with the target head copied from the source head."""
    if source_dataset.observed_labels is None:
        raise StateError("warm-up requires observed source labels")
    state: SgdState | None = None
    for epoch in range(config.warmup_epochs):
        model, state, loss = _warmup_epoch(model, source_dataset, config, epoch, state)
        if not np.isfinite(loss) or not model_mod.all_finite(model):
            raise NumericError("non-finite warm-up loss", model=model)
    return model_mod.copy_source_head_to_target(model)


def _source_clusters(
    model: Model, source: NoisyDataset, config: TrainConfig
) -> nic.ClusterModel:
    """Source-side trust split and clusters, for the cluster-reuse switch."""
    losses = model_mod.instance_losses(
        model, model_mod.HEAD_SOURCE, source.features, source.observed_labels
    )
    split = nic.split_small_loss(losses, config.separation_ratio)
    feats = model_mod.features(model, source.features)
    return nic.clusters_from_split(
        feats, source.observed_labels, losses, split,
        source.num_classes, config.radius_percentile,
    )


def st_step(
    model: Model,
    target_dataset: NoisyDataset,
    config: TrainConfig,
    epoch: int,
    *,
    opt_state: SgdState | None = None,
    source_dataset: NoisyDataset | None = None,
) -> StepResult:
    """Forward step: pseudo-label, correct, train the target head one epoch.

    Only the target head changes; the generator and source head are
    bit-identical afterwards.
    """
    x = target_dataset.features
    labels = pseudo_label(model, x)
    records: list[nic.CorrectionRecord] = []
    if config.ablation.target_correction:
        clusters = None
        if config.reuse_source_clusters and source_dataset is not None:
            clusters = _source_clusters(model, source_dataset, config)
        labels, records = nic.nic_target(
            x, labels, model, config.separation_ratio,
            clusters=clusters, radius_percentile=config.radius_percentile,
        )

    lr = learning_rate(config, epoch)
    aug = _augment_spec(config, x)
    rng = _epoch_rng(config, epoch, stream=1)
    state = opt_state
    losses = []
    for idx in _batches(len(x), config.batch_size, rng):
        batch_aug = replace(aug, seed=int(rng.integers(0, 2**63)))
        loss, grads = model_mod.loss_grad_target(
            model, x[idx], labels[idx], batch_aug, config.consistency_weight
        )
        model, state = model_mod.sgd_step(model, grads, lr, config.momentum, state)
        losses.append(loss)
    return StepResult(model, records, state, float(np.mean(losses)), labels)


def ts_step(
    model: Model,
    source_dataset: NoisyDataset,
    config: TrainConfig,
    epoch: int,
    *,
    opt_state: SgdState | None = None,
) -> StepResult:
    """Backward step: correct the source, train generator + source head one epoch.

    The target head stays bit-identical; with source correction disabled
    the raw observed labels are used and no records are produced.
    """
    if source_dataset.observed_labels is None:
        raise StateError("backward step requires observed source labels")
    x = source_dataset.features
    labels = source_dataset.observed_labels
    records: list[nic.CorrectionRecord] = []
    mix_eta = None
    mix_targets = None
    if config.ablation.source_correction:
        eta = (
            nic.eta_schedule(epoch, config.max_epochs, config.eta0)
            if config.ablation.feature_correction
            else 0.0
        )
        corrected, records, _ = nic.nic_source(
            source_dataset,
            model,
            config.separation_ratio,
            eta,
            feature_correction=config.ablation.feature_correction,
            label_correction=config.ablation.label_correction,
            radius_percentile=config.radius_percentile,
        )
        labels = corrected.labels
        mix_eta = corrected.mix_eta
        mix_targets = corrected.mix_targets

    lr = learning_rate(config, epoch)
    rng = _epoch_rng(config, epoch, stream=2)
    state = opt_state
    losses = []
    for idx in _batches(len(x), config.batch_size, rng):
        me = None if mix_eta is None else mix_eta[idx]
        mt = None if mix_targets is None else mix_targets[idx]
        loss, grads = model_mod.loss_grad_source(model, x[idx], labels[idx], me, mt)
        model, state = model_mod.sgd_step(model, grads, lr, config.momentum, state)
        losses.append(loss)
    return StepResult(model, records, state, float(np.mean(losses)), labels)


def run(config: TrainConfig, source: NoisyDataset, target: NoisyDataset) -> RunResult:
    """Full training run; a pure function of (config, datasets).

    On a non-finite loss or parameter the run stops and returns the last
    finite model together with the history collected so far.
    """
    config.validate()
    if source.feature_dim != target.feature_dim:
        raise ParameterError("source/target feature dims differ")
    if source.num_classes != target.num_classes:
        raise ParameterError("source/target class counts differ")
    if source.observed_labels is None:
        raise StateError("source dataset must be labeled")

    from . import evaluation as ev  # runtime import; evaluation depends on this module

    mcfg = ModelConfig(
        input_dim=source.feature_dim,
        num_classes=source.num_classes,
        hidden_dims=config.hidden_dims,
        feature_dim=config.feature_dim,
        init_scale=config.init_scale,
        seed=config.seed,
    )
    model = model_mod.init_model(mcfg)
    history: list[EpochMetrics] = []
    nic_history: list[EpochRecords] = []
    warm_state: SgdState | None = None
    st_state: SgdState | None = None
    ts_state: SgdState | None = None

    def metrics_for(
        epoch: int,
        model: Model,
        src_labels: np.ndarray,
        tgt_labels: np.ndarray,
        src_records: list[nic.CorrectionRecord],
        tgt_records: list[nic.CorrectionRecord],
        eta: float,
        train_loss: float,
    ) -> EpochMetrics:
        counts = {v: 0 for v in nic.NoiseVerdict}
        for r in src_records:
            counts[r.verdict] += 1
        detected = counts[nic.NoiseVerdict.FEATURE_NOISE] + counts[nic.NoiseVerdict.LABEL_NOISE]
        return EpochMetrics(
            epoch=epoch,
            source_acc=ev.dataset_accuracy(model, model_mod.HEAD_SOURCE, source),
            target_acc=ev.dataset_accuracy(model, model_mod.HEAD_TARGET, target),
            src_noise_ratio=ev.label_disagreement(src_labels, source),
            pl_error=ev.label_disagreement(tgt_labels, target),
            eta=eta,
            lr=learning_rate(config, epoch),
            source_train_loss=train_loss,
            src_detected_noise_ratio=detected / len(source),
            nic_src_clean=counts[nic.NoiseVerdict.CLEAN],
            nic_src_feature=counts[nic.NoiseVerdict.FEATURE_NOISE],
            nic_src_label=counts[nic.NoiseVerdict.LABEL_NOISE],
            nic_tgt_label=len(tgt_records),
        )

    def finite(model: Model, *vals: float) -> bool:
        return all(np.isfinite(v) for v in vals) and model_mod.all_finite(model)

    for epoch in range(config.warmup_epochs):
        try:
            new_model, warm_state, loss = _warmup_epoch(model, source, config, epoch, warm_state)
        except NumericError:
            return RunResult(model, history, nic_history, True, f"warm-up diverged at epoch {epoch}")
        if not finite(new_model, loss):
            return RunResult(model, history, nic_history, True, f"warm-up loss diverged at epoch {epoch}")
        model = new_model
        history.append(
            metrics_for(
                epoch, model, source.observed_labels, pseudo_label(model, target.features),
                [], [], 0.0, loss,
            )
        )
        nic_history.append(EpochRecords(epoch, [], []))

    model = model_mod.copy_source_head_to_target(model)

    for epoch in range(config.warmup_epochs, config.max_epochs):
        try:
            st = st_step(
                model, target, config, epoch, opt_state=st_state, source_dataset=source
            )
            ts = ts_step(st.model, source, config, epoch, opt_state=ts_state)
        except NumericError:
            return RunResult(model, history, nic_history, True, f"numeric error at epoch {epoch}")
        if not finite(ts.model, st.mean_loss, ts.mean_loss):
            return RunResult(model, history, nic_history, True, f"loss diverged at epoch {epoch}")
        model, st_state, ts_state = ts.model, st.opt_state, ts.opt_state
        eta_used = 0.0
        if config.ablation.source_correction and config.ablation.feature_correction:
            eta_used = nic.eta_schedule(epoch, config.max_epochs, config.eta0)
        history.append(
            metrics_for(
                epoch, model, ts.corrected_labels, st.corrected_labels,
                ts.records, st.records, eta_used, ts.mean_loss,
            )
        )
        nic_history.append(EpochRecords(epoch, ts.records, st.records))

    return RunResult(model, history, nic_history)


METRICS_COLUMNS = (
    "epoch", "source_acc", "target_acc", "src_noise_ratio", "pl_error", "eta", "lr",
    "source_train_loss", "src_detected_noise_ratio",
    "nic_src_clean", "nic_src_feature", "nic_src_label", "nic_tgt_label",
)


def metrics_csv_text(history: list[EpochMetrics]) -> str:
    lines = [",".join(METRICS_COLUMNS)]
    for m in history:
        lines.append(
            ",".join(
                [
                    str(m.epoch),
                    fmt_float(m.source_acc),
                    fmt_float(m.target_acc),
                    fmt_float(m.src_noise_ratio),
                    fmt_float(m.pl_error),
                    fmt_float(m.eta),
                    fmt_float(m.lr),
                    fmt_float(m.source_train_loss),
                    fmt_float(m.src_detected_noise_ratio),
                    str(m.nic_src_clean),
                    str(m.nic_src_feature),
                    str(m.nic_src_label),
                    str(m.nic_tgt_label),
                ]
            )
        )
    return "\n".join(lines) + "\n"


def write_metrics_csv(history: list[EpochMetrics], path) -> None:
    atomic_write_bytes(path, metrics_csv_text(history).encode("utf-8"))


def nic_report_csv_text(nic_history: list[EpochRecords]) -> str:
    lines = ["epoch,domain,index,verdict,k_star,dist,radius,corrected_label,eta"]
    for entry in nic_history:
        for domain, records in (("source", entry.source), ("target", entry.target)):
            for r in records:
                lines.append(
                    ",".join(
                        [
                            str(entry.epoch),
                            domain,
                            str(r.index),
                            r.verdict.value,
                            str(r.assigned_cluster),
                            fmt_float(r.distance_to_centroid),
                            fmt_float(r.radius),
                            str(r.corrected_label),
                            fmt_float(r.eta_used),
                        ]
                    )
                )
    return "\n".join(lines) + "\n"


def write_nic_report_csv(nic_history: list[EpochRecords], path) -> None:
    atomic_write_bytes(path, nic_report_csv_text(nic_history).encode("utf-8"))
