"""Student network, frozen teachers, manual backprop and the parameter registry.

The student is ``h(f(x))`` with a two-layer tanh encoder

    f(x) = tanh(x W1 + b1) W2 + b2

and a linear softmax head ``p_h = softmax(f(x) Wh + bh)``.  Parameters live in
a fixed registry order ``W1, b1, W2, b2, Wh, bh``; residuals, checksums and
weight files all rely on it.

Two teacher kinds produce ``p_g`` from the student's features:

* :class:`AnchorTeacher` -- ``p_g = softmax(s * cos(f(x), G_k))`` over frozen
  unit-norm class anchors ``G``.
* :class:`PrototypeTeacher` -- ``p_g = softmax(-KL(M_k || r(x)))`` where
  ``r(x)`` is the output of a frozen reference head on ``f(x)``.

Gradients flowing into ``p_g`` reach the encoder; teacher tensors never change.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping

import numpy as np

from .binio import DTYPE_CODES, Reader, Writer, dtype_code
from .errors import DomainError, FormatError, NumericError, ShapeError
from .numerics import Rng, softmax

PARAM_NAMES = ("W1", "b1", "W2", "b2", "Wh", "bh")
HEAD_NAMES = ("Wh", "bh")
ENCODER_NAMES = ("W1", "b1", "W2", "b2")
BIAS_NAMES = ("b1", "b2", "bh")

Params = dict[str, np.ndarray]


@dataclass
class StudentModel:
    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray
    Wh: np.ndarray
    bh: np.ndarray
    activation: str = "tanh"

    def __post_init__(self) -> None:
        for name in PARAM_NAMES:
            setattr(self, name, np.array(getattr(self, name), dtype=np.float64))
        d_in, d_hid = self.W1.shape
        if self.b1.shape != (d_hid,) or self.W2.shape[0] != d_hid:
            raise ShapeError("encoder layer 1/2 dimensions are inconsistent")
        d_feat = self.W2.shape[1]
        if self.b2.shape != (d_feat,) or self.Wh.shape[0] != d_feat:
            raise ShapeError("encoder/head dimensions are inconsistent")
        if self.bh.shape != (self.Wh.shape[1],):
            raise ShapeError("head bias does not match head width")
        if self.activation != "tanh":
            raise ShapeError(f"unsupported activation {self.activation!r}")

    @property
    def d_in(self) -> int:
        return self.W1.shape[0]

    @property
    def d_hid(self) -> int:
        return self.W1.shape[1]

    @property
    def d_feat(self) -> int:
        return self.W2.shape[1]

    @property
    def n_classes(self) -> int:
        return self.Wh.shape[1]

    def params(self) -> Params:
        """Registry-ordered mapping of the live parameter arrays (not copies)."""
        return {name: getattr(self, name) for name in PARAM_NAMES}

    def set_params(self, params: Mapping[str, np.ndarray]) -> None:
        for name in PARAM_NAMES:
            new = np.asarray(params[name], dtype=np.float64)
            if new.shape != getattr(self, name).shape:
                raise ShapeError(f"{name}: shape {new.shape} != {getattr(self, name).shape}")
            setattr(self, name, new.copy())

    def copy(self) -> StudentModel:
        return StudentModel(**{n: getattr(self, n).copy() for n in PARAM_NAMES}, activation=self.activation)

    def features(self, X: np.ndarray) -> np.ndarray:
        return np.tanh(X @ self.W1 + self.b1) @ self.W2 + self.b2

    def predict_proba(self, X: np.ndarray) -> np.ndarray:
        return softmax(self.features(X) @ self.Wh + self.bh)


def init_model(rng: Rng, d_in: int, d_hid: int, d_feat: int, n_classes: int) -> StudentModel:
    """Weights ~ N(0, 1/fan_in), biases zero."""

    def w(fan_in: int, fan_out: int) -> np.ndarray:
        return rng.normal(fan_in * fan_out).reshape(fan_in, fan_out) / math.sqrt(fan_in)

    return StudentModel(
        W1=w(d_in, d_hid),
        b1=np.zeros(d_hid),
        W2=w(d_hid, d_feat),
        b2=np.zeros(d_feat),
        Wh=w(d_feat, n_classes),
        bh=np.zeros(n_classes),
    )


def count_params(model: StudentModel, include_head: bool = True) -> int:
    names = PARAM_NAMES if include_head else ENCODER_NAMES
    return int(sum(getattr(model, n).size for n in names))


# --------------------------------------------------------------------------
# teachers


def _frozen(a) -> np.ndarray:
    a = np.array(a, dtype=np.float64)
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class AnchorTeacher:
    G: np.ndarray
    scale: float = 5.0

    def __post_init__(self) -> None:
        G = _frozen(self.G)
        if G.ndim != 2:
            raise ShapeError("anchors must be a (c, d_feat) matrix")
        if not np.allclose(np.linalg.norm(G, axis=1), 1.0, atol=1e-12):
            raise DomainError("anchor rows must have unit L2 norm")
        if not self.scale > 0:
            raise DomainError("teacher scale must be positive")
        object.__setattr__(self, "G", G)

    @classmethod
    def from_directions(cls, directions, scale: float = 5.0) -> AnchorTeacher:
        D = np.asarray(directions, dtype=np.float64)
        norms = np.linalg.norm(D, axis=1, keepdims=True)
        if np.any(norms == 0):
            raise DomainError("zero-norm anchor direction")
        return cls(D / norms, scale)

    @property
    def n_classes(self) -> int:
        return self.G.shape[0]


@dataclass(frozen=True)
class PrototypeTeacher:
    M: np.ndarray
    ref_W: np.ndarray
    ref_b: np.ndarray

    def __post_init__(self) -> None:
        M = _frozen(self.M)
        if M.ndim != 2 or M.shape[0] != M.shape[1]:
            raise ShapeError("prototypes must be a (c, c) matrix")
        if np.any(M < 0) or not np.allclose(M.sum(axis=1), 1.0, atol=1e-9):
            raise DomainError("each prototype row must be a probability distribution")
        ref_W = _frozen(self.ref_W)
        ref_b = _frozen(self.ref_b)
        if ref_W.shape[1] != M.shape[1] or ref_b.shape != (M.shape[1],):
            raise ShapeError("reference head width must equal the class count")
        object.__setattr__(self, "M", M)
        object.__setattr__(self, "ref_W", ref_W)
        object.__setattr__(self, "ref_b", ref_b)
        # sum_i M_ki ln M_ki, constant part of -KL(M_k || r)
        logs = np.zeros_like(M)
        np.log(M, out=logs, where=M > 0)
        object.__setattr__(self, "_neg_entropy", _frozen((M * logs).sum(axis=1)))

    @property
    def n_classes(self) -> int:
        return self.M.shape[0]


def build_prototype_teacher(model: StudentModel, X: np.ndarray, y: np.ndarray) -> PrototypeTeacher:
    """Prototypes = class-wise mean output of a frozen snapshot of ``model``'s head."""
    c = model.n_classes
    ref = model.predict_proba(X)
    M = np.empty((c, c))
    for k in range(c):
        rows = ref[y == k]
        if rows.shape[0] == 0:
            raise DomainError(f"no samples of class {k} to build its prototype")
        M[k] = rows.mean(axis=0)
    M /= M.sum(axis=1, keepdims=True)
    return PrototypeTeacher(M, model.Wh.copy(), model.bh.copy())


Teacher = AnchorTeacher | PrototypeTeacher


# --------------------------------------------------------------------------
# forward / backward


@dataclass
class ForwardTrace:
    X: np.ndarray
    a1: np.ndarray
    feat: np.ndarray
    logits: np.ndarray
    p_h: np.ndarray
    teacher: Teacher | None = None
    t_logits: np.ndarray | None = None
    p_g: np.ndarray | None = None
    # anchor teacher cache
    fnorm: np.ndarray | None = None
    cos: np.ndarray | None = None
    # prototype teacher cache
    ref_p: np.ndarray | None = None

    @property
    def batch_size(self) -> int:
        return self.X.shape[0]


def forward(model: StudentModel, teacher: Teacher | None, X: np.ndarray) -> ForwardTrace:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != model.d_in:
        raise ShapeError(f"input has shape {X.shape}, model expects (n, {model.d_in})")
    with np.errstate(over="ignore", invalid="ignore"):
        a1 = np.tanh(X @ model.W1 + model.b1)
        feat = a1 @ model.W2 + model.b2
        logits = feat @ model.Wh + model.bh
    if not np.all(np.isfinite(logits)):
        raise NumericError("student logits are not finite", term="logits")
    tr = ForwardTrace(X=X, a1=a1, feat=feat, logits=logits, p_h=softmax(logits), teacher=teacher)
    if teacher is None:
        return tr
    if teacher.n_classes != model.n_classes:
        raise ShapeError("teacher and student class counts differ")
    if isinstance(teacher, AnchorTeacher):
        if teacher.G.shape[1] != model.d_feat:
            raise ShapeError("anchor dimension does not match the feature dimension")
        with np.errstate(over="ignore"):
            fnorm = np.sqrt(np.sum(feat * feat, axis=1))
        if not np.all(np.isfinite(fnorm)):
            raise NumericError("feature norm overflowed", term="features")
        if np.any(fnorm == 0):
            raise DomainError("zero-norm feature vector; cosine teacher undefined")
        cos = (feat @ teacher.G.T) / fnorm[:, None]
        tr.fnorm, tr.cos = fnorm, cos
        tr.t_logits = teacher.scale * cos
    else:
        ref_logits = feat @ teacher.ref_W + teacher.ref_b
        shifted = ref_logits - ref_logits.max(axis=1, keepdims=True)
        log_r = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
        tr.ref_p = np.exp(log_r)
        tr.t_logits = log_r @ teacher.M.T - teacher._neg_entropy
    if not np.all(np.isfinite(tr.t_logits)):
        raise NumericError("teacher logits are not finite", term="teacher_logits")
    tr.p_g = softmax(tr.t_logits)
    return tr


def softmax_backward(p: np.ndarray, dp: np.ndarray) -> np.ndarray:
    """Pull ``dL/dp`` back through ``p = softmax(z)``."""
    return p * (dp - np.sum(dp * p, axis=-1, keepdims=True))


def _check_grad_shape(name: str, g: np.ndarray, like: np.ndarray) -> None:
    if g.shape != like.shape:
        raise ShapeError(f"{name} has shape {g.shape}, expected {like.shape}")


def backward(model: StudentModel, trace: ForwardTrace, dL_dph, dL_dpg=None) -> Params:
    """Parameter gradients for upstream gradients w.r.t. ``p_h`` and ``p_g``."""
    dL_dph = np.asarray(dL_dph, dtype=np.float64)
    _check_grad_shape("dL_dph", dL_dph, trace.p_h)
    dz = softmax_backward(trace.p_h, dL_dph)
    grads: Params = {"Wh": trace.feat.T @ dz, "bh": dz.sum(axis=0)}
    dfeat = dz @ model.Wh.T
    if dL_dpg is not None:
        if trace.p_g is None:
            raise ShapeError("trace has no teacher output to back-propagate through")
        dL_dpg = np.asarray(dL_dpg, dtype=np.float64)
        _check_grad_shape("dL_dpg", dL_dpg, trace.p_g)
        dt = softmax_backward(trace.p_g, dL_dpg)
        teacher = trace.teacher
        if isinstance(teacher, AnchorTeacher):
            s = teacher.scale
            inv = 1.0 / trace.fnorm
            dfeat = dfeat + s * (
                (dt @ teacher.G) * inv[:, None]
                - (np.sum(dt * trace.cos, axis=1) * inv * inv)[:, None] * trace.feat
            )
        else:
            u = dt @ teacher.M
            dref = u - trace.ref_p * u.sum(axis=1, keepdims=True)
            dfeat = dfeat + dref @ teacher.ref_W.T
    grads["W2"] = trace.a1.T @ dfeat
    grads["b2"] = dfeat.sum(axis=0)
    dz1 = (dfeat @ model.W2.T) * (1.0 - trace.a1 * trace.a1)
    grads["W1"] = trace.X.T @ dz1
    grads["b1"] = dz1.sum(axis=0)
    return {n: grads[n] for n in PARAM_NAMES}


def add_grads(a: Params, b: Params) -> Params:
    return {n: a[n] + b[n] for n in PARAM_NAMES}


def zero_grads(model: StudentModel) -> Params:
    return {n: np.zeros_like(getattr(model, n)) for n in PARAM_NAMES}


# --------------------------------------------------------------------------
# optimiser


class SGD:
    """Momentum SGD (heavy-ball, coupled weight decay) with separate head lr.

    ``mask`` freezes whole tensors: a frozen tensor receives neither gradient
    nor weight decay and its velocity stays zero.
    """

    def __init__(
        self,
        lr_encoder: float,
        lr_head: float,
        momentum: float = 0.9,
        weight_decay: float = 5e-4,
        mask: Mapping[str, bool] | None = None,
    ) -> None:
        if lr_encoder < 0 or lr_head < 0:
            raise DomainError("learning rates must be non-negative")
        self.lr_encoder = lr_encoder
        self.lr_head = lr_head
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.mask = dict(mask) if mask is not None else {n: True for n in PARAM_NAMES}
        self.velocity: Params = {}

    def lr_for(self, name: str) -> float:
        return self.lr_head if name in HEAD_NAMES else self.lr_encoder

    def step(self, model: StudentModel, grads: Mapping[str, np.ndarray]) -> StudentModel:
        for name in PARAM_NAMES:
            if not self.mask.get(name, False):
                continue
            w = getattr(model, name)
            g = grads[name] + self.weight_decay * w if self.weight_decay else grads[name]
            v = self.velocity.get(name)
            v = g.copy() if v is None else self.momentum * v + g
            self.velocity[name] = v
            setattr(model, name, w - self.lr_for(name) * v)
        return model

    def zero_velocity(self, name: str, where: np.ndarray) -> None:
        v = self.velocity.get(name)
        if v is not None:
            v[where] = 0.0


def sgd_step(model, grads, lr_encoder, lr_head, momentum=0.0, weight_decay=0.0, state: SGD | None = None):
    """Functional wrapper around :class:`SGD`; pass ``state`` to keep momentum."""
    opt = state or SGD(lr_encoder, lr_head, momentum, weight_decay)
    return opt.step(model, grads)


# --------------------------------------------------------------------------
# registry views


def flatten_params(model: StudentModel) -> list[tuple[str, np.ndarray]]:
    return [(n, getattr(model, n).reshape(-1).copy()) for n in PARAM_NAMES]


def unflatten_params(named: Iterable[tuple[str, np.ndarray]]) -> StudentModel:
    named = list(named)
    names = tuple(n for n, _ in named)
    if names != PARAM_NAMES:
        raise FormatError(f"expected tensors {PARAM_NAMES} in registry order, got {names}")
    v = {n: np.asarray(a, dtype=np.float64).reshape(-1) for n, a in named}
    d_hid, d_feat, c = v["b1"].size, v["b2"].size, v["bh"].size
    if d_hid == 0 or d_feat == 0 or c == 0:
        raise FormatError("empty bias vector")
    if v["W1"].size % d_hid or v["W2"].size != d_hid * d_feat or v["Wh"].size != d_feat * c:
        raise FormatError("flat tensor lengths are inconsistent")
    d_in = v["W1"].size // d_hid
    return StudentModel(
        W1=v["W1"].reshape(d_in, d_hid),
        b1=v["b1"],
        W2=v["W2"].reshape(d_hid, d_feat),
        b2=v["b2"],
        Wh=v["Wh"].reshape(d_feat, c),
        bh=v["bh"],
    )


# --------------------------------------------------------------------------
# gradient check


@dataclass
class GradCheckResult:
    max_rel_err: float
    worst_param: str
    worst_index: int
    tolerance: float
    per_param: dict[str, float] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tolerance

    def __str__(self) -> str:
        status = "ok" if self.passed else "FAILED"
        return f"gradcheck {status}: max rel err {self.max_rel_err:.3e} at {self.worst_param}[{self.worst_index}]"


LossFn = Callable[[StudentModel], tuple[float, Mapping[str, np.ndarray]]]


def grad_check(
    model: StudentModel,
    loss_fn: LossFn,
    tolerance: float = 1e-4,
    h: float = 1e-5,
    names: Iterable[str] = PARAM_NAMES,
) -> GradCheckResult:
    """Compare analytic gradients against central differences on every entry.

    ``loss_fn(model)`` returns ``(loss, grads)``; it is re-evaluated on a
    perturbed copy so the caller's model is left untouched.
    """
    work = model.copy()
    loss, analytic = loss_fn(work)
    if not math.isfinite(loss):
        raise NumericError("loss is not finite at the unperturbed point")
    worst = (0.0, "", -1)
    per_param: dict[str, float] = {}
    for name in names:
        arr = getattr(work, name)
        flat = arr.reshape(-1)
        a = np.asarray(analytic[name]).reshape(-1)
        err_max = 0.0
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            lp = loss_fn(work)[0]
            flat[i] = orig - h
            lm = loss_fn(work)[0]
            flat[i] = orig
            if not (math.isfinite(lp) and math.isfinite(lm)):
                raise NumericError(f"loss became non-finite perturbing {name}[{i}]", term=name)
            fd = (lp - lm) / (2.0 * h)
            err = abs(a[i] - fd) / max(abs(a[i]), abs(fd), 1e-8)
            if err > err_max:
                err_max = err
            if err > worst[0]:
                worst = (err, name, i)
        per_param[name] = err_max
    return GradCheckResult(worst[0], worst[1], worst[2], tolerance, per_param)


# --------------------------------------------------------------------------
# WGT1 weight snapshots

WGT_MAGIC = b"WGT1"
WGT_VERSION = 1


def pack_tensors(tensors: Iterable[tuple[str, np.ndarray]], dtype: str | int = "f64") -> bytes:
    code = dtype_code(dtype)
    tensors = list(tensors)
    w = Writer()
    w.raw(WGT_MAGIC)
    w.pack("BBI", WGT_VERSION, code, len(tensors))
    for name, a in tensors:
        a = np.asarray(a)
        w.name(name)
        w.pack("B", a.ndim)
        for d in a.shape:
            w.pack("I", d)
        w.array(a, DTYPE_CODES[code])
    return w.getvalue()


def unpack_tensors(data: bytes) -> tuple[list[tuple[str, np.ndarray]], str]:
    r = Reader(data)
    r.magic(WGT_MAGIC)
    version = r.unpack("B", "version")
    if version != WGT_VERSION:
        raise FormatError(f"unsupported WGT version {version}", 4)
    code = r.unpack("B", "dtype")
    if code not in DTYPE_CODES:
        raise FormatError(f"unknown dtype code {code}", 5)
    count = r.unpack("I", "tensor count")
    out = []
    for _ in range(count):
        name = r.name()
        ndim = r.unpack("B", "ndim")
        dims = [r.unpack("I", "dim") for _ in range(ndim)]
        n = int(np.prod(dims)) if dims else 1
        a = r.array(n, DTYPE_CODES[code], f"values of {name}").astype(np.float64).reshape(dims)
        out.append((name, a))
    r.expect_end()
    return out, "f64" if code == 1 else "f32"


def model_to_bytes(model: StudentModel, dtype: str = "f64") -> bytes:
    return pack_tensors(((n, getattr(model, n)) for n in PARAM_NAMES), dtype)


def model_from_bytes(data: bytes) -> StudentModel:
    tensors, _ = unpack_tensors(data)
    names = tuple(n for n, _ in tensors)
    if names != PARAM_NAMES:
        raise FormatError(f"WGT1 tensors must be {PARAM_NAMES} in order, got {names}")
    return StudentModel(**dict(tensors))


def save_model(path, model: StudentModel, dtype: str = "f64") -> None:
    with open(path, "wb") as fh:
        fh.write(model_to_bytes(model, dtype))


def load_model(path) -> StudentModel:
    with open(path, "rb") as fh:
        return model_from_bytes(fh.read())
