"""Cross-modal knowledge distillation objective and one training step.

Per target sample ``j`` with student ``p_h`` and teacher ``p_g``::

    alpha_j   = sg(exp(-KL(p_h || p_g)))                 (or exp(-GE(p_h)), or a constant)
    task_j    = GI(p_h)
    distill_j = GI(0.5 * (p_h + sg(p_g)))                (or KL(sg(p_g) || p_h))

    L_cmkd = lambda1 * mean_j(alpha_j * task_j + (1 - alpha_j) * distill_j)
           + lambda2 * mean_s KL(y_s || p_g^s) + lambda3 * mean_j GI(p_g^t)
    L_total = mean_s CE(y_s, p_h^s) + L_cmkd

``lambda1`` and ``lambda3`` ramp up with training progress; ``lambda2`` is
constant.  The regulariser terms back-propagate through ``p_g`` into the
encoder, the distillation term does not.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import divergences as dv
from .errors import ConfigError, NumericError, ShapeError
from .model import SGD, ForwardTrace, Params, StudentModel, Teacher, add_grads, backward, forward

ALPHA_MODES = ("kl", "ge", "fixed")
DISTILL_MODES = ("gini_mixed", "vanilla_kl")
TERMS = ("cls", "task", "distill", "reg_source", "reg_target")


@dataclass
class CmkdConfig:
    beta1: float = 0.25
    lambda2: float = 0.1
    beta3: float = 0.025
    alpha_mode: str = "kl"
    alpha_fixed: float = 0.5
    distill_mode: str = "gini_mixed"
    label_smoothing: float = 0.1
    max_iters: int = 2000

    def __post_init__(self) -> None:
        for name in ("beta1", "lambda2", "beta3"):
            v = getattr(self, name)
            if not (isinstance(v, (int, float)) and math.isfinite(v) and v >= 0):
                raise ConfigError(f"{name} must be a non-negative number, got {v!r}")
        if self.alpha_mode not in ALPHA_MODES:
            raise ConfigError(f"alpha_mode must be one of {ALPHA_MODES}")
        if not 0.0 <= self.alpha_fixed <= 1.0:
            raise ConfigError("alpha_fixed must lie in [0, 1]")
        if self.distill_mode not in DISTILL_MODES:
            raise ConfigError(f"distill_mode must be one of {DISTILL_MODES}")
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ConfigError("label_smoothing must lie in [0, 1)")
        if self.max_iters < 1:
            raise ConfigError("max_iters must be >= 1")

    @property
    def enabled(self) -> bool:
        return self.beta1 > 0 or self.lambda2 > 0 or self.beta3 > 0


@dataclass
class ScheduleState:
    iter: int = 0
    max_iters: int = 1

    @property
    def mu(self) -> float:
        return min(self.iter / self.max_iters, 1.0)

    def advance(self) -> None:
        self.iter += 1


# --------------------------------------------------------------------------
# per-sample terms; each returns (value, d value / d p_h)


def task_loss(p_h):
    return dv.gini(p_h), dv.gini_grad(p_h)


def mix(p_h, p_g) -> np.ndarray:
    p_h = np.asarray(p_h, dtype=np.float64)
    p_g = np.asarray(p_g, dtype=np.float64)
    if p_h.shape != p_g.shape:
        raise ShapeError(f"cannot mix distributions of shape {p_h.shape} and {p_g.shape}")
    return 0.5 * (p_h + p_g)


def distill_loss(p_h, p_g, mode: str = "gini_mixed"):
    """Distillation value and gradient w.r.t. ``p_h``; ``p_g`` is held constant."""
    if mode == "gini_mixed":
        p_m = mix(p_h, p_g)
        # d GI(p_m) / d p_h = -2 p_m * 0.5
        return dv.gini(p_m), -p_m
    if mode == "vanilla_kl":
        return dv.kl(p_g, p_h), dv.kl_grad_q(p_g, p_h)
    raise ConfigError(f"unknown distill mode {mode!r}")


def alpha(p_h, p_g, mode: str = "kl", fixed: float = 0.5):
    if mode == "kl":
        return np.exp(-dv.kl(p_h, p_g))
    if mode == "ge":
        return np.exp(-dv.gibbs_entropy(p_h))
    if mode == "fixed":
        p_h = np.asarray(p_h)
        return np.full(p_h.shape[:-1], float(fixed)) if p_h.ndim > 1 else float(fixed)
    raise ConfigError(f"unknown alpha mode {mode!r}")


def reg_loss(y_source, p_g_source, p_g_target, lambda2: float, lambda3: float, eps: float = 0.1):
    """Teacher regulariser; returns (value, d/dp_g^s, d/dp_g^t), batch-mean aggregated."""
    p_s = np.atleast_2d(np.asarray(p_g_source, dtype=np.float64))
    p_t = np.atleast_2d(np.asarray(p_g_target, dtype=np.float64))
    value = 0.0
    g_s = np.zeros_like(p_s)
    g_t = np.zeros_like(p_t)
    n_s, n_t = p_s.shape[0], p_t.shape[0]
    if n_s and lambda2:
        y = dv.smooth_labels(y_source, p_s.shape[1], eps)
        value += lambda2 * float(np.mean(dv.kl(y, p_s)))
        g_s = (lambda2 / n_s) * dv.kl_grad_q(y, p_s)
    if n_t and lambda3:
        value += lambda3 * float(np.mean(dv.gini(p_t)))
        g_t = (lambda3 / n_t) * dv.gini_grad(p_t)
    return value, g_s, g_t


def lambda_schedule(mu: float, beta: float) -> float:
    """Saturating ramp ``beta * (2 / (1 + exp(-10 mu)) - 1)`` from 0 towards beta."""
    return beta * (2.0 / (1.0 + math.exp(-10.0 * mu)) - 1.0)


def logit_coefficients(p_h, p_g, a):
    """Split the assembled ``dL/dp_h`` of ``a*task + (1-a)*distill`` into parts.

    Returns ``(student, teacher)`` with ``dL/dp_h = -(student + teacher)``:
    ``student = (2a + (1-a)/2) p_h`` and ``teacher = (1-a)/2 p_g``.
    """
    a = np.asarray(a, dtype=np.float64)[..., None] if np.ndim(a) else float(a)
    p_h = np.asarray(p_h, dtype=np.float64)
    p_g = np.asarray(p_g, dtype=np.float64)
    return (2.0 * a + 0.5 * (1.0 - a)) * p_h, 0.5 * (1.0 - a) * p_g


# --------------------------------------------------------------------------
# assembled objective


@dataclass
class Frozen:
    """Stop-gradient quantities captured at the evaluation point."""

    alpha: np.ndarray
    p_g_target: np.ndarray


@dataclass
class Objective:
    loss: float
    grads: Params
    terms: dict[str, float]
    alpha: np.ndarray
    frozen: Frozen | None
    source_trace: ForwardTrace
    target_trace: ForwardTrace | None


def pda_adjust(p_h: np.ndarray, keep: np.ndarray | None):
    """Apply a class keep-mask with renormalisation; returns (p_hat, backward_fn)."""
    if keep is None:
        return p_h, lambda g: g
    m = keep.astype(np.float64)
    raw = p_h * m
    s = raw.sum(axis=1, keepdims=True)
    p_hat = raw / s

    def back(g: np.ndarray) -> np.ndarray:
        return (m / s) * (g - np.sum(g * p_hat, axis=1, keepdims=True))

    return p_hat, back


def objective(
    model: StudentModel,
    teacher: Teacher | None,
    xs: np.ndarray,
    ys: np.ndarray,
    xt: np.ndarray | None,
    cfg: CmkdConfig,
    state: ScheduleState,
    *,
    terms=TERMS,
    frozen: Frozen | None = None,
    keep: np.ndarray | None = None,
) -> Objective:
    """Total loss and parameter gradients for one source/target minibatch.

    Passing ``frozen`` pins the stop-gradient quantities (alpha, teacher output
    inside the distillation term) so that finite differences of the returned
    loss see exactly the function whose gradient is reported.
    """
    terms = set(terms)
    mu = state.mu
    lam1 = lambda_schedule(mu, cfg.beta1)
    lam3 = lambda_schedule(mu, cfg.beta3)
    lam2 = cfg.lambda2
    eps = cfg.label_smoothing
    need_teacher = teacher is not None and cfg.enabled
    ys = np.asarray(ys)

    tr_s = forward(model, teacher if need_teacher else None, xs)
    n_s = tr_s.batch_size
    values = {t: 0.0 for t in ("cls", "task", "distill", "reg", "alpha_mean")}
    loss = 0.0

    dph_s = np.zeros_like(tr_s.p_h)
    ce = dv.cross_entropy_smoothed(ys, tr_s.p_h, eps)
    values["cls"] = float(np.mean(ce)) if n_s else 0.0
    if "cls" in terms and n_s:
        loss += values["cls"]
        dph_s = dv.cross_entropy_smoothed_grad(ys, tr_s.p_h, eps) / n_s

    dpg_s = None
    tr_t = None
    a = np.zeros(0)
    new_frozen = None
    grads_t = None
    if need_teacher:
        p_g_t = np.zeros((0, model.n_classes))
        if xt is not None and len(xt):
            tr_t = forward(model, teacher, xt)
            p_g_t = tr_t.p_g
        reg_t_on = "reg_target" in terms and tr_t is not None
        value_r, dpg_s, dpg_t = reg_loss(
            ys, tr_s.p_g, p_g_t, lam2 if "reg_source" in terms else 0.0, lam3 if reg_t_on else 0.0, eps
        )
        values["reg"] = value_r
        loss += value_r
        if tr_t is not None:
            n_t = tr_t.batch_size
            p_hat, pda_back = pda_adjust(tr_t.p_h, keep)
            if frozen is None:
                a = np.asarray(alpha(p_hat, tr_t.p_g, cfg.alpha_mode, cfg.alpha_fixed), dtype=np.float64)
                new_frozen = Frozen(a.copy(), tr_t.p_g.copy())
            else:
                a = frozen.alpha
                new_frozen = frozen
            p_g_sg = new_frozen.p_g_target
            v_task, g_task = task_loss(p_hat)
            v_dist, g_dist = distill_loss(p_hat, p_g_sg, cfg.distill_mode)
            values["task"] = float(np.mean(v_task))
            values["distill"] = float(np.mean(v_dist))
            values["alpha_mean"] = float(np.mean(a))
            w_task = a if "task" in terms else np.zeros_like(a)
            w_dist = (1.0 - a) if "distill" in terms else np.zeros_like(a)
            loss += lam1 * float(np.mean(w_task * v_task + w_dist * v_dist))
            dph_t = (lam1 / n_t) * (w_task[:, None] * g_task + w_dist[:, None] * g_dist)
            grads_t = backward(model, tr_t, pda_back(dph_t), dpg_t)

    grads = backward(model, tr_s, dph_s, dpg_s)
    if grads_t is not None:
        grads = add_grads(grads, grads_t)
    values["total"] = loss
    values["lambda1"] = lam1
    values["lambda3"] = lam3
    for name, v in values.items():
        if not math.isfinite(v):
            raise NumericError(f"loss term {name!r} is not finite", term=name)
    return Objective(loss, grads, values, a, new_frozen, tr_s, tr_t)


@dataclass
class StepMetrics:
    iter: int
    loss_total: float
    l_cls: float
    l_task: float
    l_distill: float
    l_reg: float
    l_fixmatch: float
    alpha_mean: float
    lambda1: float
    lambda3: float
    extra: dict = field(default_factory=dict)

    def as_dict(self) -> dict:
        return asdict(self)


def total_loss_step(
    model: StudentModel,
    teacher: Teacher | None,
    xs: np.ndarray,
    ys: np.ndarray,
    xt: np.ndarray | None,
    cfg: CmkdConfig,
    state: ScheduleState,
    opt: SGD,
    *,
    keep: np.ndarray | None = None,
    fixmatch=None,
) -> StepMetrics:
    """Compute ``L_cls + L_cmkd`` (+ optional FixMatch), back-propagate, update.

    ``fixmatch`` is ``(FixMatchConfig, Rng)``; the pseudo-label view and the
    strong view are both derived from ``xt``.
    """
    obj = objective(model, teacher, xs, ys, xt, cfg, state, keep=keep)
    grads = obj.grads
    l_fm = 0.0
    if fixmatch is not None and xt is not None and len(xt):
        from .extensions import fixmatch_gradients

        fm_cfg, fm_rng = fixmatch
        l_fm, g_fm = fixmatch_gradients(model, xt, fm_cfg, fm_rng)
        if not math.isfinite(l_fm):
            raise NumericError("loss term 'fixmatch' is not finite", term="fixmatch")
        grads = add_grads(grads, g_fm)
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"gradient of {name} is not finite", term=name)
    opt.step(model, grads)
    t = obj.terms
    metrics = StepMetrics(
        iter=state.iter,
        loss_total=t["total"] + l_fm,
        l_cls=t["cls"],
        l_task=t["task"],
        l_distill=t["distill"],
        l_reg=t["reg"],
        l_fixmatch=l_fm,
        alpha_mean=t["alpha_mean"],
        lambda1=t["lambda1"],
        lambda3=t["lambda3"],
    )
    state.advance()
    return metrics


def source_only_step(model: StudentModel, xs, ys, eps: float, opt: SGD) -> float:
    """Plain supervised step on the source batch (the "Baseline" row)."""
    tr = forward(model, None, xs)
    n = tr.batch_size
    value = float(np.mean(dv.cross_entropy_smoothed(ys, tr.p_h, eps)))
    if not math.isfinite(value):
        raise NumericError("loss term 'cls' is not finite", term="cls")
    grads = backward(model, tr, dv.cross_entropy_smoothed_grad(ys, tr.p_h, eps) / n)
    opt.step(model, grads)
    return value


# --------------------------------------------------------------------------
# gradient-check suite

GRADCHECK_CASES = {
    "cls": dict(terms=("cls",)),
    "task": dict(terms=("task",)),
    "distill_gini_mixed": dict(terms=("distill",), distill_mode="gini_mixed"),
    "distill_vanilla_kl": dict(terms=("distill",), distill_mode="vanilla_kl"),
    "reg": dict(terms=("reg_source", "reg_target")),
    "total": dict(terms=TERMS),
    "total_vanilla_kl": dict(terms=TERMS, distill_mode="vanilla_kl"),
    "total_prototype": dict(terms=TERMS, teacher="prototype"),
    "total_pda_masked": dict(terms=TERMS, keep=(True, False, True)),
}


@dataclass
class GradCheckCase:
    name: str
    batches: int
    max_rel_err: float
    worst: str
    passed: bool


def gradcheck_suite(
    batches: int = 20,
    seed: int = 0,
    tolerance: float = 1e-4,
    h: float = 1e-5,
    dims: tuple[int, int, int, int] = (5, 6, 4, 3),
    batch_size: int = 6,
    cases=None,
) -> list[GradCheckCase]:
    """Central-difference checks of every loss term on seeded random batches."""
    from .model import AnchorTeacher, build_prototype_teacher, grad_check, init_model
    from .numerics import Rng

    d_in, d_hid, d_feat, c = dims
    out = []
    for ci, (name, spec) in enumerate((cases or GRADCHECK_CASES).items()):
        cfg = CmkdConfig(distill_mode=spec.get("distill_mode", "gini_mixed"), max_iters=10)
        state = ScheduleState(5, 10)
        worst_err, worst_at = 0.0, ""
        for b in range(batches):
            rng = Rng(seed).spawn(1000 * ci + b)
            model = init_model(rng, d_in, d_hid, d_feat, c)
            model.b1 = 0.1 * rng.normal(d_hid)
            model.b2 = 0.1 * rng.normal(d_feat)
            model.bh = 0.1 * rng.normal(c)
            xs = rng.normal(batch_size * d_in).reshape(batch_size, d_in)
            ys = rng.integers(batch_size, c)
            xt = rng.normal(batch_size * d_in).reshape(batch_size, d_in)
            if spec.get("teacher") == "prototype":
                ref = init_model(rng, d_in, d_hid, d_feat, c)
                ref.W1, ref.b1, ref.W2, ref.b2 = model.W1, model.b1, model.W2, model.b2
                teacher = build_prototype_teacher(ref, xs, np.arange(batch_size) % c)
            else:
                teacher = AnchorTeacher.from_directions(rng.normal(c * d_feat).reshape(c, d_feat), 5.0)
            keep = np.asarray(spec["keep"][:c]) if "keep" in spec else None
            frozen = objective(model, teacher, xs, ys, xt, cfg, state, keep=keep).frozen

            def loss_fn(m, teacher=teacher, xs=xs, ys=ys, xt=xt, frozen=frozen, keep=keep):
                o = objective(m, teacher, xs, ys, xt, cfg, state, terms=spec["terms"], frozen=frozen, keep=keep)
                return o.loss, o.grads

            res = grad_check(model, loss_fn, tolerance, h)
            if res.max_rel_err > worst_err or not worst_at:
                worst_err, worst_at = res.max_rel_err, f"batch {b} {res.worst_param}[{res.worst_index}]"
        out.append(GradCheckCase(name, batches, float(worst_err), worst_at, bool(worst_err < tolerance)))
    return out
