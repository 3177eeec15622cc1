"""Residual sparse training, residual files, DSP accounting and PEFT baselines.

During training every weight whose drift from the base satisfies
``|w_base - w| <= tau`` is reset bitwise to ``w_base`` (or, in top-fraction
mode, only the ``ceil(r% * N)`` entries with the largest drift survive).  The
task is then stored as the sparse residual ``w - w_base``.

RST1 residual file, all integers little-endian::

    magic 'RST1' | u8 version=1 | u8 dtype (0=f32, 1=f64) | u16 reserved=0
    u32 tensor_count | u64 base_checksum | f64 tau_used (NaN in top-fraction mode)
    per tensor: u16 name_len | name (UTF-8) | u8 ndim | u32 dims[ndim]
                u64 nnz | u64 indices[nnz] (ascending, row-major) | values[nnz]

``base_checksum`` is 64-bit FNV-1a over the base tensors' float64
little-endian bytes concatenated in registry order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .binio import DTYPE_CODES, Reader, Writer, dtype_code
from .errors import ChecksumError, ConfigError, FormatError, ShapeError
from .model import BIAS_NAMES, ENCODER_NAMES, HEAD_NAMES, PARAM_NAMES, StudentModel, count_params
from .numerics import Rng

RST_MAGIC = b"RST1"
RST_VERSION = 1
RST_MODES = ("constant_tau", "ramp_tau", "top_fraction")

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3

ParamsLike = Mapping[str, np.ndarray]


def _as_params(p) -> dict[str, np.ndarray]:
    if isinstance(p, StudentModel):
        return p.params()
    return dict(p)


# --------------------------------------------------------------------------
# configuration and schedules


@dataclass
class RstConfig:
    mode: str = "constant_tau"
    tau: float = 1e-6
    tau_start: float = 5e-4
    tau_end: float = 3.5e-2
    r_start: float = 100.0
    r_end: float = 0.2
    apply_every: int = 1
    include_head: bool = False

    def __post_init__(self) -> None:
        if self.mode not in RST_MODES:
            raise ConfigError(f"RST mode must be one of {RST_MODES}")
        if self.tau < 0:
            raise ConfigError("tau must be non-negative")
        if self.mode == "ramp_tau" and (self.tau_start <= 0 or self.tau_end <= 0):
            raise ConfigError("ramp thresholds must be positive")
        if self.mode == "top_fraction" and not (0 < self.r_start <= 100 and 0 < self.r_end <= 100):
            raise ConfigError("top fractions must lie in (0, 100]")
        if self.apply_every < 1:
            raise ConfigError("apply_every must be >= 1")

    @property
    def subject_names(self) -> tuple[str, ...]:
        return PARAM_NAMES if self.include_head else ENCODER_NAMES


def current_threshold(cfg: RstConfig, mu: float) -> float:
    """Effective tau (constant / ramp modes) or r in percent (top-fraction)."""
    mu = min(max(mu, 0.0), 1.0)
    if cfg.mode == "constant_tau":
        return cfg.tau
    if cfg.mode == "ramp_tau":
        if cfg.tau_start <= 0 or cfg.tau_end <= 0:
            raise ConfigError("ramp thresholds must be positive")
        if mu == 0.0:
            return cfg.tau_start
        if mu == 1.0:
            return cfg.tau_end
        return math.exp((1.0 - mu) * math.log(cfg.tau_start) + mu * math.log(cfg.tau_end))
    return cfg.r_start + mu * (cfg.r_end - cfg.r_start)


# --------------------------------------------------------------------------
# resets


def _check_registry(current: dict, base: dict, names: Iterable[str]) -> None:
    if list(current) != list(base):
        raise FormatError(f"registry mismatch: {list(current)} vs {list(base)}")
    for n in names:
        if n not in base:
            raise FormatError(f"tensor {n!r} missing from registry")
        if np.shape(current[n]) != np.shape(base[n]):
            raise FormatError(f"{n}: shape {np.shape(current[n])} != {np.shape(base[n])}")


def threshold_reset(current, base, tau: float, names: Iterable[str] | None = None):
    """Reset entries with ``|base - current| <= tau``.

    Returns ``(params, reset_count, reset_masks)``; ``params`` are new arrays.
    """
    cur, b = _as_params(current), _as_params(base)
    names = tuple(cur) if names is None else tuple(names)
    _check_registry(cur, b, names)
    out = {n: np.array(a, dtype=np.float64) for n, a in cur.items()}
    masks = {}
    count = 0
    for n in names:
        reset = np.abs(b[n] - out[n]) <= tau
        out[n][reset] = b[n][reset]
        masks[n] = reset
        count += int(reset.sum())
    return out, count, masks


def keep_count(r: float, total: int) -> int:
    """``ceil(r% * total)``, guarded against float noise, at least 1."""
    if not 0 < r <= 100:
        raise ConfigError("r must lie in (0, 100]")
    k = math.ceil(round(r * total / 100.0, 9))
    return min(max(k, 1), total)


def top_fraction_reset(current, base, r: float, names: Iterable[str] | None = None):
    """Keep the ``ceil(r% * N)`` largest drifts over ``names``; reset the rest.

    Ties go to the lower flat index, then to the earlier registry tensor.
    """
    cur, b = _as_params(current), _as_params(base)
    names = tuple(cur) if names is None else tuple(names)
    _check_registry(cur, b, names)
    out = {n: np.array(a, dtype=np.float64) for n, a in cur.items()}
    drift = [np.abs(b[n] - out[n]).reshape(-1) for n in names]
    sizes = [d.size for d in drift]
    total = sum(sizes)
    masks = {n: np.zeros(np.shape(out[n]), dtype=bool) for n in names}
    if total == 0:
        return out, 0, masks
    k = keep_count(r, total)
    delta = np.concatenate(drift)
    flat_idx = np.concatenate([np.arange(s) for s in sizes])
    tensor_idx = np.concatenate([np.full(s, i) for i, s in enumerate(sizes)])
    # lexsort: last key is primary
    order = np.lexsort((tensor_idx, flat_idx, -delta))
    reset = np.ones(total, dtype=bool)
    reset[order[:k]] = False
    count = 0
    start = 0
    for n, s in zip(names, sizes):
        m = reset[start : start + s].reshape(np.shape(out[n]))
        out[n][m] = b[n][m]
        masks[n] = m
        count += int(m.sum())
        start += s
    return out, count, masks


class RstController:
    """Applies the configured reset rule to a model during training."""

    def __init__(self, cfg: RstConfig, base: ParamsLike, optimizer=None) -> None:
        self.cfg = cfg
        self.base = {n: np.array(a, dtype=np.float64) for n, a in _as_params(base).items()}
        self.optimizer = optimizer
        self.steps = 0
        self.last_threshold = float("nan")

    def apply(self, model: StudentModel, mu: float) -> int:
        thr = current_threshold(self.cfg, mu)
        self.last_threshold = thr
        names = self.cfg.subject_names
        if self.cfg.mode == "top_fraction":
            params, count, masks = top_fraction_reset(model.params(), self.base, thr, names)
        else:
            params, count, masks = threshold_reset(model.params(), self.base, thr, names)
        for n in names:
            setattr(model, n, params[n])
            if self.optimizer is not None:
                self.optimizer.zero_velocity(n, masks[n])
        # keep every tensor exactly expressible as base + stored residual
        for n in PARAM_NAMES:
            setattr(model, n, snap_to_base(getattr(model, n), self.base[n]))
        return count

    def after_step(self, model: StudentModel, mu: float) -> int | None:
        self.steps += 1
        if self.steps % self.cfg.apply_every == 0:
            return self.apply(model, mu)
        return None

    def finalize(self, model: StudentModel) -> int:
        return self.apply(model, 1.0)

    @property
    def tau_used(self) -> float:
        return float("nan") if self.cfg.mode == "top_fraction" else self.last_threshold


# --------------------------------------------------------------------------
# residuals


def weights_checksum(params) -> int:
    """64-bit FNV-1a over float64 little-endian bytes in registry order."""
    h = FNV_OFFSET
    for a in _as_params(params).values():
        for byte in np.ascontiguousarray(a, dtype="<f8").tobytes():
            h ^= byte
            h = (h * FNV_PRIME) & 0xFFFFFFFFFFFFFFFF
    return h


def fnv1a64(data: bytes) -> int:
    h = FNV_OFFSET
    for byte in data:
        h ^= byte
        h = (h * FNV_PRIME) & 0xFFFFFFFFFFFFFFFF
    return h


@dataclass
class ResidualTensor:
    name: str
    shape: tuple[int, ...]
    indices: np.ndarray
    values: np.ndarray

    def __post_init__(self) -> None:
        self.shape = tuple(int(d) for d in self.shape)
        self.indices = np.asarray(self.indices, dtype=np.uint64).reshape(-1)
        self.values = np.asarray(self.values, dtype=np.float64).reshape(-1)
        if self.indices.size != self.values.size:
            raise FormatError(f"{self.name}: {self.indices.size} indices but {self.values.size} values")

    @property
    def nnz(self) -> int:
        return int(self.indices.size)

    @property
    def size(self) -> int:
        return int(np.prod(self.shape)) if self.shape else 1


@dataclass
class SparseResidual:
    tensors: list[ResidualTensor]
    base_checksum: int
    tau_used: float = float("nan")
    dtype: str = "f64"

    def __eq__(self, other) -> bool:
        if not isinstance(other, SparseResidual):
            return NotImplemented
        if (self.base_checksum, self.dtype, len(self.tensors)) != (other.base_checksum, other.dtype, len(other.tensors)):
            return False
        same_tau = (math.isnan(self.tau_used) and math.isnan(other.tau_used)) or self.tau_used == other.tau_used
        if not same_tau:
            return False
        for a, b in zip(self.tensors, other.tensors):
            if a.name != b.name or a.shape != b.shape:
                return False
            if not np.array_equal(a.indices, b.indices):
                return False
            if a.values.tobytes() != b.values.tobytes():
                return False
        return True

    def tensor(self, name: str) -> ResidualTensor:
        for t in self.tensors:
            if t.name == name:
                return t
        raise KeyError(name)

    @property
    def names(self) -> list[str]:
        return [t.name for t in self.tensors]

    def nnz(self, exclude: Iterable[str] = ()) -> int:
        skip = set(exclude)
        return sum(t.nnz for t in self.tensors if t.name not in skip)

    def density(self, names: Iterable[str] = ENCODER_NAMES) -> float:
        chosen = [t for t in self.tensors if t.name in set(names)]
        size = sum(t.size for t in chosen)
        return sum(t.nnz for t in chosen) / size if size else 0.0

    def head_params(self) -> int:
        return sum(t.size for t in self.tensors if t.name in HEAD_NAMES)


def _bits(a) -> np.ndarray:
    return np.asarray(a, dtype=np.float64).view(np.uint64)


def _exact_delta(t: np.ndarray, b: np.ndarray, search: int = 8) -> np.ndarray:
    """Deltas ``v`` with ``b + v == t`` bitwise, nudged by ulps when needed.

    Not every float64 ``t`` is reachable as ``fl(b + v)`` (when ``|t|`` is well
    below ``|b|`` the sums are coarser than ``t``'s grid); such entries raise.
    Weights passed through :func:`snap_to_base` are always reachable.
    """
    v = t - b
    bad = np.nonzero(_bits(b + v) != _bits(t))[0]
    for j in bad:
        found = False
        for direction in (np.inf, -np.inf):
            cand = v[j]
            for _ in range(search):
                cand = np.nextafter(cand, direction)
                if _bits(b[j] + cand) == _bits(t[j]):
                    v[j] = cand
                    found = True
                    break
            if found:
                break
        if not found:
            raise FormatError(f"weight {t[j]!r} is not reachable from base {b[j]!r} by one float64 addition")
    return v


def snap_to_base(w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """``fl(b + fl(w - b))``: the nearest weight a stored residual can reproduce."""
    return b + (w - b)


def extract_residual(
    tuned,
    base,
    tau_used: float = float("nan"),
    names: Iterable[str] | None = None,
    dtype: str = "f64",
) -> SparseResidual:
    """Sparse ``tuned - base`` over ``names`` (default: every tensor).

    With the default float64 payload ``apply_residual`` reproduces ``tuned``
    bitwise; a float32 payload is lossy.
    """
    t_params, b_params = _as_params(tuned), _as_params(base)
    names = tuple(t_params) if names is None else tuple(names)
    _check_registry(t_params, b_params, names)
    dtype_code(dtype)
    tensors = []
    for n in names:
        t = np.asarray(t_params[n], dtype=np.float64).reshape(-1)
        b = np.asarray(b_params[n], dtype=np.float64).reshape(-1)
        idx = np.nonzero(_bits(t) != _bits(b))[0]
        vals = _exact_delta(t[idx], b[idx]) if dtype == "f64" else (t[idx] - b[idx]).astype(np.float32).astype(np.float64)
        tensors.append(ResidualTensor(n, np.shape(t_params[n]), idx.astype(np.uint64), vals))
    return SparseResidual(tensors, weights_checksum(b_params), float(tau_used), dtype)


def apply_residual(base, residual: SparseResidual) -> dict[str, np.ndarray]:
    b_params = _as_params(base)
    if weights_checksum(b_params) != residual.base_checksum:
        raise ChecksumError("base model mismatch: checksum differs from the one recorded in the residual")
    out = {n: np.array(a, dtype=np.float64) for n, a in b_params.items()}
    for t in residual.tensors:
        if t.name not in out:
            raise FormatError(f"residual tensor {t.name!r} not present in the base model")
        if tuple(np.shape(out[t.name])) != t.shape:
            raise FormatError(f"{t.name}: residual shape {t.shape} != base shape {np.shape(out[t.name])}")
        flat = out[t.name].reshape(-1)
        if t.nnz:
            if int(t.indices.max()) >= flat.size:
                raise FormatError(f"{t.name}: index {int(t.indices.max())} out of range {flat.size}")
            idx = t.indices.astype(np.int64)
            flat[idx] = flat[idx] + t.values
    return out


def apply_to_model(base: StudentModel, residual: SparseResidual) -> StudentModel:
    merged = base.copy()
    merged.set_params(apply_residual(base.params(), residual))
    return merged


def pack_residual(residual: SparseResidual) -> bytes:
    code = dtype_code(residual.dtype)
    vdtype = DTYPE_CODES[code]
    w = Writer()
    w.raw(RST_MAGIC)
    w.pack("BBH", RST_VERSION, code, 0)
    w.pack("I", len(residual.tensors))
    w.pack("Q", residual.base_checksum)
    w.pack("d", residual.tau_used)
    for t in residual.tensors:
        if t.nnz > 1 and np.any(np.diff(t.indices.astype(np.int64)) <= 0):
            raise FormatError(f"{t.name}: indices must be strictly increasing")
        if t.nnz and int(t.indices.max()) >= t.size:
            raise FormatError(f"{t.name}: index out of range")
        w.name(t.name)
        w.pack("B", len(t.shape))
        for d in t.shape:
            w.pack("I", d)
        w.pack("Q", t.nnz)
        w.array(t.indices, np.dtype("<u8"))
        w.array(t.values, vdtype)
    return w.getvalue()


def unpack_residual(data: bytes) -> SparseResidual:
    r = Reader(data)
    r.magic(RST_MAGIC)
    version = r.unpack("B", "version")
    if version != RST_VERSION:
        raise FormatError(f"unsupported RST version {version}", 4)
    code = r.unpack("B", "dtype")
    if code not in DTYPE_CODES:
        raise FormatError(f"unknown dtype code {code}", 5)
    reserved = r.unpack("H", "reserved")
    if reserved != 0:
        raise FormatError("reserved field must be zero", 6)
    count = r.unpack("I", "tensor count")
    checksum = r.unpack("Q", "base checksum")
    tau = r.unpack("d", "tau")
    tensors = []
    for _ in range(count):
        name = r.name()
        ndim = r.unpack("B", "ndim")
        shape = tuple(r.unpack("I", "dim") for _ in range(ndim))
        at = r.offset
        nnz = r.unpack("Q", "nnz")
        size = int(np.prod(shape)) if shape else 1
        if nnz > size:
            raise FormatError(f"{name}: nnz {nnz} exceeds tensor size {size}", at)
        at = r.offset
        idx = r.array(nnz, np.dtype("<u8"), f"indices of {name}")
        if nnz and (np.any(np.diff(idx.astype(np.int64)) <= 0) or int(idx.max()) >= size):
            raise FormatError(f"{name}: indices not strictly increasing or out of range", at)
        vals = r.array(nnz, DTYPE_CODES[code], f"values of {name}").astype(np.float64)
        tensors.append(ResidualTensor(name, shape, idx, vals))
    r.expect_end()
    return SparseResidual(tensors, checksum, tau, "f64" if code == 1 else "f32")


def save_residual(path, residual: SparseResidual) -> None:
    with open(path, "wb") as fh:
        fh.write(pack_residual(residual))


def load_residual(path) -> SparseResidual:
    with open(path, "rb") as fh:
        return unpack_residual(fh.read())


# --------------------------------------------------------------------------
# downstream-parameter accounting


@dataclass
class DspEntry:
    kind: str
    nnz: int
    head_params: int

    @property
    def total(self) -> int:
        return self.nnz + self.head_params


@dataclass
class DspReport:
    tasks: list[DspEntry] = field(default_factory=list)

    @property
    def total(self) -> int:
        return sum(t.total for t in self.tasks)

    def total_millions(self, decimals: int | None = None) -> float:
        m = self.total / 1e6
        return round(m, decimals) if decimals is not None else m

    def as_dict(self) -> dict:
        return {
            "total": self.total,
            "tasks": [{"kind": t.kind, "nnz": t.nnz, "head_params": t.head_params, "total": t.total} for t in self.tasks],
        }


def dsp(runs: Sequence, head_params: Sequence[int | None] | int | None = None) -> DspReport:
    """Downstream parameters summed over tasks.

    Each run is a :class:`SparseResidual` (encoder nnz + head params), a
    :class:`StudentModel` or an int (full fine-tuning: every stored
    parameter), or ``None`` (zero-shot: nothing stored).
    """
    if head_params is None or isinstance(head_params, int):
        head_params = [head_params] * len(runs)
    report = DspReport()
    for run, hp in zip(runs, head_params):
        if run is None:
            report.tasks.append(DspEntry("zero_shot", 0, 0))
        elif isinstance(run, SparseResidual):
            h = run.head_params() if hp is None else hp
            report.tasks.append(DspEntry("residual", run.nnz(exclude=HEAD_NAMES), h))
        elif isinstance(run, StudentModel):
            report.tasks.append(DspEntry("full", count_params(run, include_head=False), count_params(run) - count_params(run, False)))
        elif isinstance(run, (int, np.integer)) and not isinstance(run, bool) and run >= 0:
            report.tasks.append(DspEntry("full", int(run), 0 if hp is None else int(hp)))
        else:
            raise ConfigError(f"parameter counts must be non-negative integers, got {run!r}")
    return report


# --------------------------------------------------------------------------
# PEFT baselines


def bitfit_mask(model: StudentModel | None = None) -> dict[str, bool]:
    """Trainable-tensor mask that leaves only bias vectors free."""
    return {n: n in BIAS_NAMES for n in PARAM_NAMES}


def linear_probe_mask(model: StudentModel | None = None) -> dict[str, bool]:
    return {n: n in HEAD_NAMES for n in PARAM_NAMES}


def _check_lora_shapes(w0: np.ndarray, A: np.ndarray, B: np.ndarray) -> int:
    d, k = w0.shape
    r = A.shape[0]
    if A.shape != (r, k) or B.shape != (d, r):
        raise ShapeError(f"LoRA shapes w0 {w0.shape}, A {A.shape}, B {B.shape} are inconsistent")
    if not 1 <= r <= min(d, k):
        raise ConfigError(f"LoRA rank {r} must satisfy 1 <= r <= min(d, k) = {min(d, k)}")
    return r


def lora_merge(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    """Deployed weight update ``B @ A``."""
    return np.asarray(B, dtype=np.float64) @ np.asarray(A, dtype=np.float64)


def lora_forward(w0, A, B, x) -> np.ndarray:
    """``w0 x + B A x`` for a vector ``x`` (shape ``(k,)``) or rows ``(n, k)``."""
    w0, A, B = (np.asarray(a, dtype=np.float64) for a in (w0, A, B))
    _check_lora_shapes(w0, A, B)
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        return w0 @ x + B @ (A @ x)
    return x @ w0.T + (x @ A.T) @ B.T


@dataclass
class LoraAdapter:
    """Low-rank adapter on one encoder weight (stored input-major as ``X @ W``)."""

    name: str
    A: np.ndarray
    B: np.ndarray
    vA: np.ndarray | None = None
    vB: np.ndarray | None = None

    @property
    def n_params(self) -> int:
        return self.A.size + self.B.size

    def delta(self) -> np.ndarray:
        # the model multiplies X @ W, so W = w0^T and the update is (B A)^T
        return lora_merge(self.A, self.B).T


def init_lora(rng: Rng, model: StudentModel, rank: int, names: Sequence[str] = ("W1", "W2")) -> list[LoraAdapter]:
    adapters = []
    for n in names:
        k, d = getattr(model, n).shape
        if not 1 <= rank <= min(d, k):
            raise ConfigError(f"LoRA rank {rank} too large for {n} of shape {(k, d)}")
        A = rng.normal(rank * k).reshape(rank, k) / math.sqrt(k)
        adapters.append(LoraAdapter(n, A, np.zeros((d, rank))))
    return adapters


def lora_step(adapters: Sequence[LoraAdapter], grads: Mapping[str, np.ndarray], lr: float, momentum: float, weight_decay: float) -> None:
    """Momentum SGD on adapter factors from gradients w.r.t. the merged weight."""
    for ad in adapters:
        g_delta = np.asarray(grads[ad.name]).T  # d x k
        gA = ad.B.T @ g_delta + weight_decay * ad.A
        gB = g_delta @ ad.A.T + weight_decay * ad.B
        ad.vA = gA if ad.vA is None else momentum * ad.vA + gA
        ad.vB = gB if ad.vB is None else momentum * ad.vB + gB
        ad.A = ad.A - lr * ad.vA
        ad.B = ad.B - lr * ad.vB
