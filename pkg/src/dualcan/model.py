"""Shared feature generator with twin classifier heads, trained by hand-rolled backprop.

The generator is a small tanh MLP mapping inputs to an m-dimensional
feature space (tanh between layers, linear feature output); each head is
an affine map from features to class logits. Two loss surfaces are
implemented with analytic gradients:

* target objective: cross-entropy of the target head on corrected
  pseudo-labels plus a consistency term between a weakly and a strongly
  augmented view, with the weak prediction treated as a frozen soft target
  (gradient flows only through the strong branch). Gradients reach the
  target head only.
* reverse objective: cross-entropy of both heads on corrected source data,
  with the target head frozen. Gradients reach the generator and source
  head; instances carrying a feature-space correction contribute through
  their generator output scaled by (1 - eta), the correction centroid
  being a constant.

Models are immutable snapshots: an update step consumes a model and
returns a new one.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import FormatError, NumericError, ParameterError, ShapeError, VersionError
from .fileio import atomic_write_bytes

HEAD_SOURCE = "source"
HEAD_TARGET = "target"

WEAK = "weak"
STRONG = "strong"

_PROB_FLOOR = 1e-12

Layer = tuple[np.ndarray, np.ndarray]  # (W with shape (out, in), b with shape (out,))


@dataclass(frozen=True)
class ModelConfig:
    input_dim: int
    num_classes: int
    hidden_dims: tuple[int, ...] = (32, 16)
    feature_dim: int = 16
    init_scale: float = 1.0
    seed: int = 0

    def validate(self) -> None:
        if self.input_dim < 1 or self.feature_dim < 1 or self.num_classes < 2:
            raise ParameterError("input_dim/feature_dim >= 1 and num_classes >= 2 required")
        if any(h < 1 for h in self.hidden_dims):
            raise ParameterError("hidden dims must be positive")
        if self.init_scale <= 0:
            raise ParameterError("init_scale must be > 0")

    def layer_dims(self) -> list[tuple[int, int]]:
        """(fan_in, fan_out) for each generator layer, input to feature."""
        widths = [self.input_dim, *self.hidden_dims, self.feature_dim]
        return list(zip(widths[:-1], widths[1:]))


@dataclass(eq=False)
class Model:
    config: ModelConfig
    generator: list[Layer]
    head_s: Layer
    head_t: Layer


@dataclass(eq=False)
class Grads:
    """Gradient slots mirroring the model; None means the subset is frozen."""

    generator: list[Layer] | None = None
    head_s: Layer | None = None
    head_t: Layer | None = None


@dataclass(eq=False)
class SgdState:
    """Momentum velocity buffers, one per parameter array."""

    generator: list[Layer]
    head_s: Layer
    head_t: Layer


@dataclass(frozen=True)
class AugmentSpec:
    """Input-space augmentation: weak = small jitter, strong = jitter + dropout mask."""

    weak_sigma: float = 0.05
    strong_sigma: float = 0.2
    strong_mask_prob: float = 0.1
    seed: int = 0

    def validate(self) -> None:
        if self.weak_sigma < 0 or self.strong_sigma < 0:
            raise ParameterError("augmentation sigmas must be >= 0")
        if self.weak_sigma > self.strong_sigma:
            raise ParameterError("weak_sigma must not exceed strong_sigma")
        if not 0.0 <= self.strong_mask_prob <= 1.0:
            raise ParameterError("strong_mask_prob must be in [0, 1]")


def init_model(config: ModelConfig) -> Model:
    """Zero-mean weights scaled by init_scale/sqrt(fan_in); biases zero.

    Draw order is fixed (generator layers, then source head, then target
    head) so a seed pins every parameter.
    """
    config.validate()
    rng = np.random.default_rng(config.seed)

    def affine(fan_in: int, fan_out: int) -> Layer:
        w = rng.normal(size=(fan_out, fan_in)) * (config.init_scale / np.sqrt(fan_in))
        return w, np.zeros(fan_out)

    generator = [affine(fi, fo) for fi, fo in config.layer_dims()]
    head_s = affine(config.feature_dim, config.num_classes)
    head_t = affine(config.feature_dim, config.num_classes)
    return Model(config=config, generator=generator, head_s=head_s, head_t=head_t)


def parameter_count(config: ModelConfig) -> int:
    dims = config.layer_dims() + [(config.feature_dim, config.num_classes)] * 2
    return sum((fi + 1) * fo for fi, fo in dims)


def _as_batch(x, width: int) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != width:
        raise ShapeError(f"expected rows of width {width}, got array of shape {x.shape}")
    return x, single


def _generator_forward(model: Model, x: np.ndarray) -> list[np.ndarray]:
    """Per-layer activations; the last entry is the (linear) feature output."""
    acts = [x]
    h = x
    last = len(model.generator) - 1
    for i, (w, b) in enumerate(model.generator):
        z = h @ w.T + b
        h = z if i == last else np.tanh(z)
        acts.append(h)
    return acts


def features(model: Model, x) -> np.ndarray:
    """Generator output; a batch call equals stacking per-row calls."""
    batch, single = _as_batch(x, model.config.input_dim)
    out = _generator_forward(model, batch)[-1]
    return out[0] if single else out


def _head(model: Model, head: str) -> Layer:
    if head == HEAD_SOURCE:
        return model.head_s
    if head == HEAD_TARGET:
        return model.head_t
    raise ParameterError(f"head must be {HEAD_SOURCE!r} or {HEAD_TARGET!r}, got {head!r}")


def _softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def predict(model: Model, head: str, x) -> np.ndarray:
    """Class probabilities of the selected head over generator features."""
    w, b = _head(model, head)
    feat = features(model, x)
    single = feat.ndim == 1
    logits = np.atleast_2d(feat) @ w.T + b
    probs = _softmax(logits)
    return probs[0] if single else probs


def _check_distribution(p: np.ndarray, what: str) -> None:
    if p.ndim != 1:
        raise ParameterError(f"{what} must be a 1-D probability vector")
    if np.any(p < 0) or not np.isclose(p.sum(), 1.0, atol=1e-6):
        raise ParameterError(f"{what} is not a probability distribution")


def cross_entropy(pred, target) -> float:
    """CE against a class id (hard) or a distribution (soft); probs floored at 1e-12."""
    pred = np.asarray(pred, dtype=np.float64)
    _check_distribution(pred, "pred")
    if np.ndim(target) == 0:
        y = int(target)
        if not 0 <= y < pred.shape[0]:
            raise ParameterError(f"target class {y} out of range")
        return float(-np.log(max(pred[y], _PROB_FLOOR)))
    t = np.asarray(target, dtype=np.float64)
    _check_distribution(t, "target")
    if t.shape != pred.shape:
        raise ParameterError("soft target width differs from pred")
    return float(-np.sum(t * np.log(np.clip(pred, _PROB_FLOOR, None))))


def _hard_ce(probs: np.ndarray, labels: np.ndarray) -> np.ndarray:
    picked = probs[np.arange(len(labels)), labels]
    return -np.log(np.clip(picked, _PROB_FLOOR, None))


def instance_losses(model: Model, head: str, x, labels) -> np.ndarray:
    """Per-instance cross-entropy of ``head`` against ``labels``, batched."""
    labels = _check_labels(labels, model.config.num_classes)
    probs = predict(model, head, x)
    if probs.ndim == 1:
        probs = probs[None, :]
    if len(labels) != probs.shape[0]:
        raise ParameterError("labels length differs from batch size")
    return _hard_ce(probs, labels)


def _check_labels(labels, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise ParameterError("label out of range")
    return labels.astype(np.int64)


def augment(x, aug: AugmentSpec, strength: str, seed: int) -> np.ndarray:
    """Jitter (and for strong, randomly zero coordinates); deterministic per seed."""
    aug.validate()
    x = np.asarray(x, dtype=np.float64)
    rng = np.random.default_rng(seed)
    if strength == WEAK:
        sigma = aug.weak_sigma
        out = x + rng.normal(size=x.shape) * sigma if sigma > 0 else x.copy()
        return out
    if strength != STRONG:
        raise ParameterError(f"strength must be {WEAK!r} or {STRONG!r}, got {strength!r}")
    out = x + rng.normal(size=x.shape) * aug.strong_sigma if aug.strong_sigma > 0 else x.copy()
    if aug.strong_mask_prob > 0:
        keep = rng.random(x.shape) >= aug.strong_mask_prob
        out = np.where(keep, out, 0.0)
    return out


def _onehot(labels: np.ndarray, num_classes: int) -> np.ndarray:
    out = np.zeros((len(labels), num_classes))
    out[np.arange(len(labels)), labels] = 1.0
    return out


def _generator_backward(model: Model, acts: list[np.ndarray], dfeat: np.ndarray) -> list[Layer]:
    """Backprop dL/dfeatures through the generator; returns per-layer (dW, db)."""
    grads: list[Layer] = [None] * len(model.generator)  # type: ignore[list-item]
    delta = dfeat
    for i in reversed(range(len(model.generator))):
        w, _ = model.generator[i]
        grads[i] = (delta.T @ acts[i], delta.sum(axis=0))
        if i > 0:
            # acts[i] is the tanh output of layer i-1's successor input.
            delta = (delta @ w) * (1.0 - acts[i] ** 2)
    return grads


def loss_grad_supervised(model: Model, x, labels) -> tuple[float, Grads]:
    """Plain source-head cross-entropy; gradients for the generator and source head.

    This is the warm-up objective.
    """
    batch, _ = _as_batch(x, model.config.input_dim)
    labels = _check_labels(labels, model.config.num_classes)
    if batch.shape[0] == 0:
        raise ParameterError("empty batch")
    n = batch.shape[0]
    acts = _generator_forward(model, batch)
    feat = acts[-1]
    ws, bs = model.head_s
    probs = _softmax(feat @ ws.T + bs)
    loss = float(np.mean(_hard_ce(probs, labels)))
    dlogits = (probs - _onehot(labels, model.config.num_classes)) / n
    dws = dlogits.T @ feat
    dbs = dlogits.sum(axis=0)
    dfeat = dlogits @ ws
    return loss, Grads(generator=_generator_backward(model, acts, dfeat), head_s=(dws, dbs))


def loss_grad_target(
    model: Model, x, labels, aug: AugmentSpec, consistency_weight: float = 1.0
) -> tuple[float, Grads]:
    """Target objective: supervised CE plus weak-to-strong consistency.

    The weak view is augmented with seed ``aug.seed`` and the strong view
    with ``aug.seed + 1``. The weak prediction is a frozen soft target, so
    the returned gradients are those of the stop-gradient objective (the
    consistency term only back-propagates through the strong branch).
    Gradients cover the target head only; the generator is frozen here.
    """
    batch, _ = _as_batch(x, model.config.input_dim)
    labels = _check_labels(labels, model.config.num_classes)
    if batch.shape[0] == 0:
        raise ParameterError("empty batch")
    n = batch.shape[0]
    wt, bt = model.head_t

    x_weak = augment(batch, aug, WEAK, seed=aug.seed)
    x_strong = augment(batch, aug, STRONG, seed=aug.seed + 1)

    feat = features(model, batch)
    feat_strong = features(model, x_strong)
    probs = _softmax(feat @ wt.T + bt)
    soft_target = _softmax(features(model, x_weak) @ wt.T + bt)  # frozen
    probs_strong = _softmax(feat_strong @ wt.T + bt)

    sup = float(np.mean(_hard_ce(probs, labels)))
    cons = float(
        np.mean(-np.sum(soft_target * np.log(np.clip(probs_strong, _PROB_FLOOR, None)), axis=1))
    )
    loss = sup + consistency_weight * cons

    dlogits_sup = (probs - _onehot(labels, model.config.num_classes)) / n
    dlogits_cons = consistency_weight * (probs_strong - soft_target) / n
    dwt = dlogits_sup.T @ feat + dlogits_cons.T @ feat_strong
    dbt = dlogits_sup.sum(axis=0) + dlogits_cons.sum(axis=0)
    return loss, Grads(head_t=(dwt, dbt))


def loss_grad_source(
    model: Model, x, labels, mix_eta=None, mix_targets=None
) -> tuple[float, Grads]:
    """Reverse objective: both heads classify corrected source data.

    ``mix_eta``/``mix_targets`` describe per-instance feature-space
    corrections: the representation becomes (1 - eta) * G(x) + eta * target
    with the target treated as a constant, so the generator gradient of
    such rows is scaled by (1 - eta). Rows with eta 0 pass through
    untouched. The target head contributes loss but receives no gradient.
    """
    batch, _ = _as_batch(x, model.config.input_dim)
    labels = _check_labels(labels, model.config.num_classes)
    if batch.shape[0] == 0:
        raise ParameterError("empty batch")
    n = batch.shape[0]
    acts = _generator_forward(model, batch)
    feat = acts[-1]

    if mix_eta is not None:
        eta = np.asarray(mix_eta, dtype=np.float64)
        targets = np.asarray(mix_targets, dtype=np.float64)
        if eta.shape != (n,) or targets.shape != feat.shape:
            raise ShapeError("mix_eta must be (n,), mix_targets must match feature shape")
        zhat = (1.0 - eta)[:, None] * feat + eta[:, None] * targets
    else:
        eta = None
        zhat = feat

    ws, bs = model.head_s
    wt, bt = model.head_t
    probs_s = _softmax(zhat @ ws.T + bs)
    probs_t = _softmax(zhat @ wt.T + bt)
    loss = float(np.mean(_hard_ce(probs_s, labels)) + np.mean(_hard_ce(probs_t, labels)))

    onehot = _onehot(labels, model.config.num_classes)
    dlogits_s = (probs_s - onehot) / n
    dlogits_t = (probs_t - onehot) / n
    dws = dlogits_s.T @ zhat
    dbs = dlogits_s.sum(axis=0)
    dzhat = dlogits_s @ ws + dlogits_t @ wt
    dfeat = dzhat if eta is None else dzhat * (1.0 - eta)[:, None]
    return loss, Grads(
        generator=_generator_backward(model, acts, dfeat), head_s=(dws, dbs)
    )


def zero_state(model: Model) -> SgdState:
    return SgdState(
        generator=[(np.zeros_like(w), np.zeros_like(b)) for w, b in model.generator],
        head_s=(np.zeros_like(model.head_s[0]), np.zeros_like(model.head_s[1])),
        head_t=(np.zeros_like(model.head_t[0]), np.zeros_like(model.head_t[1])),
    )


def _grad_arrays(grads: Grads):
    if grads.generator is not None:
        for w, b in grads.generator:
            yield w
            yield b
    for layer in (grads.head_s, grads.head_t):
        if layer is not None:
            yield layer[0]
            yield layer[1]


def sgd_step(
    model: Model, grads: Grads, lr: float, momentum: float = 0.0, state: SgdState | None = None
) -> tuple[Model, SgdState]:
    """Momentum SGD on exactly the parameter subsets present in ``grads``.

    Velocity buffers of absent subsets are untouched, so frozen parameters
    stay bit-identical. Returns the updated model and the updated state.
    """
    if lr < 0:
        raise ParameterError("lr must be >= 0")
    if not 0.0 <= momentum < 1.0:
        raise ParameterError("momentum must be in [0, 1)")
    for g in _grad_arrays(grads):
        if not np.all(np.isfinite(g)):
            raise NumericError("non-finite gradient", model=model)
    state = state if state is not None else zero_state(model)

    def step(layer: Layer, grad: Layer | None, vel: Layer) -> tuple[Layer, Layer]:
        if grad is None:
            return layer, vel
        (w, b), (gw, gb), (vw, vb) = layer, grad, vel
        nvw = momentum * vw + gw
        nvb = momentum * vb + gb
        return (w - lr * nvw, b - lr * nvb), (nvw, nvb)

    if grads.generator is not None:
        gen_pairs = [
            step(layer, grad, vel)
            for layer, grad, vel in zip(model.generator, grads.generator, state.generator)
        ]
        new_gen = [p[0] for p in gen_pairs]
        new_gen_vel = [p[1] for p in gen_pairs]
    else:
        new_gen, new_gen_vel = model.generator, state.generator

    new_hs, new_vs = step(model.head_s, grads.head_s, state.head_s)
    new_ht, new_vt = step(model.head_t, grads.head_t, state.head_t)
    new_model = Model(config=model.config, generator=new_gen, head_s=new_hs, head_t=new_ht)
    return new_model, SgdState(generator=new_gen_vel, head_s=new_vs, head_t=new_vt)


def copy_source_head_to_target(model: Model) -> Model:
    """Snapshot with the target head initialized to the source head."""
    ws, bs = model.head_s
    return Model(
        config=model.config,
        generator=model.generator,
        head_s=model.head_s,
        head_t=(ws.copy(), bs.copy()),
    )


def models_equal(a: Model, b: Model) -> bool:
    if a.config != b.config or len(a.generator) != len(b.generator):
        return False
    pairs = list(zip(a.generator, b.generator)) + [(a.head_s, b.head_s), (a.head_t, b.head_t)]
    return all(
        np.array_equal(wa, wb) and np.array_equal(ba, bb) for (wa, ba), (wb, bb) in pairs
    )


def all_finite(model: Model) -> bool:
    layers = list(model.generator) + [model.head_s, model.head_t]
    return all(np.all(np.isfinite(w)) and np.all(np.isfinite(b)) for w, b in layers)


# ---------------------------------------------------------------------------
# Checkpoint format
#
# Little-endian:
#   magic "DCM1" (4s) | format_version (u32)
#   input_dim (u32) | feature_dim (u32) | num_classes (u32) | n_hidden (u32)
#   hidden dims (u32 each) | init_scale (f64) | seed (u64)
#   parameter blocks, float64, in order: generator layers (W then b, input
#   to feature), source head W, b, target head W, b.
# ---------------------------------------------------------------------------

_CKPT_MAGIC = b"DCM1"
CHECKPOINT_VERSION = 1


def save_model(model: Model, path) -> None:
    cfg = model.config
    buf = bytearray()
    buf += struct.pack("<4sI", _CKPT_MAGIC, CHECKPOINT_VERSION)
    buf += struct.pack(
        "<IIII", cfg.input_dim, cfg.feature_dim, cfg.num_classes, len(cfg.hidden_dims)
    )
    for h in cfg.hidden_dims:
        buf += struct.pack("<I", h)
    buf += struct.pack("<dQ", cfg.init_scale, cfg.seed)
    for w, b in list(model.generator) + [model.head_s, model.head_t]:
        buf += np.ascontiguousarray(w, dtype="<f8").tobytes()
        buf += np.ascontiguousarray(b, dtype="<f8").tobytes()
    atomic_write_bytes(path, bytes(buf))


def load_model(path) -> Model:
    raw = Path(path).read_bytes()
    offset = 0

    def take(count: int, what: str) -> bytes:
        nonlocal offset
        if offset + count > len(raw):
            raise FormatError(f"truncated while reading {what}", offset)
        chunk = raw[offset : offset + count]
        offset += count
        return chunk

    magic, version = struct.unpack("<4sI", take(8, "checkpoint header"))
    if magic != _CKPT_MAGIC:
        raise FormatError(f"bad magic {magic!r}", 0)
    if version != CHECKPOINT_VERSION:
        raise VersionError(f"unsupported checkpoint version {version}")
    input_dim, feature_dim, num_classes, n_hidden = struct.unpack("<IIII", take(16, "dims"))
    hidden = tuple(
        struct.unpack("<I", take(4, "hidden dim"))[0] for _ in range(n_hidden)
    )
    init_scale, seed = struct.unpack("<dQ", take(16, "config tail"))
    cfg = ModelConfig(
        input_dim=input_dim,
        num_classes=num_classes,
        hidden_dims=hidden,
        feature_dim=feature_dim,
        init_scale=init_scale,
        seed=int(seed),
    )

    def block(fan_in: int, fan_out: int) -> Layer:
        w = np.frombuffer(take(fan_in * fan_out * 8, "weights"), dtype="<f8")
        b = np.frombuffer(take(fan_out * 8, "biases"), dtype="<f8")
        return w.reshape(fan_out, fan_in).copy(), b.copy()

    generator = [block(fi, fo) for fi, fo in cfg.layer_dims()]
    head_s = block(feature_dim, num_classes)
    head_t = block(feature_dim, num_classes)
    if offset != len(raw):
        raise FormatError(f"{len(raw) - offset} trailing bytes", offset)
    return Model(config=cfg, generator=generator, head_s=head_s, head_t=head_t)
