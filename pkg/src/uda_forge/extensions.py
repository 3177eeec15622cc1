"""FixMatch consistency add-on and partial-set (PDA) class masking."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DomainError, ShapeError
from .model import Params, StudentModel, backward, forward, zero_grads
from .numerics import Rng

FIXMATCH_PRESETS = {
    "default": {"lambda_fm": 0.5, "tau_fm": 0.95},
    "visda": {"lambda_fm": 2.0, "tau_fm": 0.80},
    "domainnet": {"lambda_fm": 0.1, "tau_fm": 0.95},
}


@dataclass
class FixMatchConfig:
    lambda_fm: float = 0.5
    tau_fm: float = 0.95
    weak_noise: float = 0.1
    strong_noise: float = 0.5
    strong_dropout: float = 0.1

    def __post_init__(self) -> None:
        if self.lambda_fm < 0:
            raise ConfigError("lambda_fm must be non-negative")
        if not 0.0 < self.tau_fm < 1.0:
            raise ConfigError("tau_fm must lie in (0, 1)")
        if not self.strong_noise >= self.weak_noise >= 0.0:
            raise ConfigError("need strong_noise >= weak_noise >= 0")
        if not 0.0 <= self.strong_dropout <= 1.0:
            raise ConfigError("strong_dropout must lie in [0, 1]")

    @classmethod
    def preset(cls, name: str, **overrides) -> FixMatchConfig:
        try:
            base = dict(FIXMATCH_PRESETS[name])
        except KeyError:
            raise ConfigError(f"unknown FixMatch preset {name!r}") from None
        base.update(overrides)
        return cls(**base)


def augment_weak(x: np.ndarray, rng: Rng, cfg: FixMatchConfig) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if cfg.weak_noise == 0:
        return x.copy()
    return x + cfg.weak_noise * rng.normal(x.size).reshape(x.shape)


def augment_strong(x: np.ndarray, rng: Rng, cfg: FixMatchConfig) -> np.ndarray:
    """Coordinate dropout first, then additive Gaussian noise."""
    x = np.asarray(x, dtype=np.float64)
    keep = rng.uniform(x.size).reshape(x.shape) >= cfg.strong_dropout
    out = np.where(keep, x, 0.0)
    if cfg.strong_noise:
        out = out + cfg.strong_noise * rng.normal(x.size).reshape(x.shape)
    return out


def fixmatch_loss(p_w, p_s, cfg: FixMatchConfig):
    """Confidence-gated pseudo-label cross-entropy.

    Per sample: ``-lambda_fm * ln p_s[argmax p_w]`` when ``max p_w > tau_fm``
    and 0 otherwise.  Returns per-sample values and the gradient w.r.t. ``p_s``.
    """
    p_w = np.asarray(p_w, dtype=np.float64)
    p_s = np.asarray(p_s, dtype=np.float64)
    if p_w.shape != p_s.shape:
        raise ShapeError("weak and strong predictions differ in shape")
    p_w2, p_s2 = np.atleast_2d(p_w), np.atleast_2d(p_s)
    rows = np.arange(p_w2.shape[0])
    label = np.argmax(p_w2, axis=1)
    gate = p_w2.max(axis=1) > cfg.tau_fm
    picked = p_s2[rows, label]
    value = np.where(gate, -cfg.lambda_fm * np.log(np.maximum(picked, 1e-12)), 0.0)
    grad = np.zeros_like(p_s2)
    on = gate & (picked > 1e-12)
    grad[rows[on], label[on]] = -cfg.lambda_fm / picked[on]
    if p_w.ndim == 1:
        return float(value[0]), grad[0]
    return value, grad


def fixmatch_gradients(model: StudentModel, xt: np.ndarray, cfg: FixMatchConfig, rng: Rng) -> tuple[float, Params]:
    """Batch-mean FixMatch loss on ``xt`` and its parameter gradients.

    Pseudo-labels come from the weak view of the current model and receive no
    gradient; the loss is back-propagated through the strong view only.
    """
    weak = augment_weak(xt, rng, cfg)
    strong = augment_strong(xt, rng, cfg)
    p_w = forward(model, None, weak).p_h
    tr_s = forward(model, None, strong)
    value, grad = fixmatch_loss(p_w, tr_s.p_h, cfg)
    n = tr_s.batch_size
    if not np.any(grad):
        return float(np.mean(value)), zero_grads(model)
    return float(np.mean(value)), backward(model, tr_s, grad / n)


# --------------------------------------------------------------------------
# partial-set adaptation


def pda_count(predictions, c: int) -> np.ndarray:
    preds = np.asarray(predictions, dtype=np.int64).reshape(-1)
    if preds.size and (preds.min() < 0 or preds.max() >= c):
        raise IndexError(f"prediction out of range for {c} classes")
    return np.bincount(preds, minlength=c).astype(np.int64)


def pda_mask(p_h, counts, threshold: int = 14, renormalize: bool = True) -> np.ndarray:
    """Zero the probability of classes predicted fewer than ``threshold`` times."""
    p = np.asarray(p_h, dtype=np.float64)
    counts = np.asarray(counts)
    if counts.shape != (p.shape[-1],):
        raise ShapeError("counts length must equal the class count")
    keep = counts >= threshold
    if not keep.any():
        raise DomainError("every class is masked; fall back to the unmasked distribution")
    out = p * keep
    if renormalize:
        s = out.sum(axis=-1, keepdims=True)
        out = np.divide(out, s, out=np.zeros_like(out), where=s > 0)
    return out


@dataclass
class PdaState:
    threshold: int = 14
    counts: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    @property
    def keep(self) -> np.ndarray:
        return self.counts >= self.threshold

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def refresh(self, model: StudentModel, X: np.ndarray) -> np.ndarray | None:
        """Recount predictions on the full target set; returns the keep mask or
        ``None`` when every class would be masked."""
        preds = np.argmax(model.predict_proba(X), axis=1)
        self.counts = pda_count(preds, model.n_classes)
        keep = self.keep
        return keep if keep.any() else None
