import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from uda_forge import divergences as dv
from uda_forge.cmkd import (
    GRADCHECK_CASES,
    CmkdConfig,
    ScheduleState,
    alpha,
    distill_loss,
    gradcheck_suite,
    lambda_schedule,
    logit_coefficients,
    mix,
    objective,
    reg_loss,
    source_only_step,
    task_loss,
    total_loss_step,
)
from uda_forge.errors import ConfigError, NumericError, ShapeError
from uda_forge.model import PARAM_NAMES, SGD, AnchorTeacher, backward, forward, init_model
from uda_forge.numerics import Rng, softmax


def setup(seed=0, n=8, dims=(5, 6, 4, 3)):
    r = Rng(seed)
    d_in, d_hid, d_feat, c = dims
    m = init_model(r, d_in, d_hid, d_feat, c)
    t = AnchorTeacher.from_directions(r.normal(c * d_feat).reshape(c, d_feat), 5.0)
    xs = r.normal(n * d_in).reshape(n, d_in)
    ys = r.integers(n, c)
    xt = r.normal(n * d_in).reshape(n, d_in)
    return m, t, xs, ys, xt


def test_task_loss_examples():
    v, g = task_loss(np.array([0.5, 0.5]))
    assert v == 0.5 and g.tolist() == [-1.0, -1.0]
    v, g = task_loss(np.array([1.0, 0.0, 0.0]))
    assert v == 0.0 and g.tolist() == [-2.0, 0.0, 0.0]


def test_mix_examples():
    assert mix([1.0, 0.0], [0.0, 1.0]).tolist() == [0.5, 0.5]
    p = np.array([0.2, 0.8])
    assert mix(p, p).tolist() == p.tolist()
    np.testing.assert_allclose(mix([0.6, 0.4], [0.2, 0.8]), [0.4, 0.6], atol=1e-15)
    with pytest.raises(ShapeError):
        mix([0.5, 0.5], [1.0, 0.0, 0.0])


def test_distill_examples():
    v, g = distill_loss(np.array([1.0, 0.0]), np.array([0.0, 1.0]), "gini_mixed")
    assert v == 0.5 and g.tolist() == [-0.5, -0.5]
    p = np.array([0.3, 0.7])
    v, _ = distill_loss(p, p, "vanilla_kl")
    assert v == 0.0
    v, g = distill_loss(np.array([1.0, 0.0, 0.0]), np.array([1.0, 0.0, 0.0]), "gini_mixed")
    assert v == 0.0 and g.tolist() == [-1.0, 0.0, 0.0]
    with pytest.raises(ConfigError):
        distill_loss(p, p, "nope")


def test_distill_gradients_fd():
    r = Rng(4)
    h = 1e-6
    for _ in range(20):
        ph, pg = softmax(r.normal(3)), softmax(r.normal(3))
        for mode, f in (
            ("gini_mixed", lambda q: 1 - np.sum((0.5 * (q + pg)) ** 2)),
            ("vanilla_kl", lambda q: np.sum(pg * np.log(pg / q))),
        ):
            _, g = distill_loss(ph, pg, mode)
            fd = np.array([(f(ph + h * e) - f(ph - h * e)) / (2 * h) for e in np.eye(3)])
            assert np.max(np.abs(g - fd) / np.maximum(np.abs(fd), 1e-8)) < 1e-6


def test_alpha_examples():
    p = np.array([0.1, 0.6, 0.3])
    assert alpha(p, p) == 1.0
    assert alpha([1.0, 0.0], [0.5, 0.5]) == pytest.approx(0.5, abs=1e-15)
    assert alpha([0.9, 0.1], [0.1, 0.9], "fixed", 0.5) == 0.5
    assert alpha([0.5, 0.5], [0.9, 0.1], "ge") == pytest.approx(0.5, abs=1e-15)


def _pair(seed, c):
    r = Rng(seed)
    return softmax(1.5 * r.normal(c)), softmax(1.5 * r.normal(c))


def test_alpha_contract_on_random_pairs():
    for seed in range(100):
        ph, pg = _pair(seed, 2 + seed % 5)
        a = alpha(ph, pg)
        assert 0.0 < a < 1.0
        assert alpha(pg, pg) == 1.0
        seg = [alpha((1 - t) * ph + t * pg, pg) for t in np.linspace(0.0, 1.0, 10)]
        assert all(b > a_ for a_, b in zip(seg, seg[1:]))
        assert seg[-1] == 1.0


def test_reg_examples():
    ys = np.array([0, 1])
    pgs = softmax(Rng(1).normal(6).reshape(2, 3))
    v, gs, gt = reg_loss(ys, pgs, pgs, 0.0, 0.0)
    assert v == 0.0 and not gs.any() and not gt.any()
    y = dv.smooth_labels(ys, 3, 0.1)
    onehot = np.eye(3)[[2, 0]]
    v, _, _ = reg_loss(ys, y, onehot, 0.1, 0.025)
    assert v == pytest.approx(0.0, abs=1e-15)


def test_lambda_schedule_examples():
    assert lambda_schedule(0.0, 0.25) == 0.0
    assert lambda_schedule(50.0, 0.25) == pytest.approx(0.25, abs=1e-15)
    assert lambda_schedule(1.0, 0.25) == pytest.approx(0.25 * (2 / (1 + math.exp(-10)) - 1), abs=1e-16)
    assert lambda_schedule(1.0, 0.25) == pytest.approx(0.249977, abs=1e-6)
    mus = np.linspace(0, 1, 50)
    vals = [lambda_schedule(m, 0.25) for m in mus]
    assert all(b > a for a, b in zip(vals, vals[1:]))


def test_schedule_state_progress():
    s = ScheduleState(0, 4)
    seen = []
    for _ in range(6):
        seen.append(s.mu)
        s.advance()
    assert seen == [0.0, 0.25, 0.5, 0.75, 1.0, 1.0]


def test_config_validation():
    for bad in ({"beta1": -0.1}, {"lambda2": -1}, {"beta3": float("nan")}, {"alpha_mode": "x"}, {"alpha_fixed": 2}):
        with pytest.raises(ConfigError):
            CmkdConfig(**bad)
    assert not CmkdConfig(beta1=0, lambda2=0, beta3=0).enabled


def test_combined_gradient_structure():
    # d/dp_h [a GI(p_h) + (1-a) GI(p_m)] = -0.5 [(1 + 3a) p_h + (1 - a) p_g]
    for seed in range(50):
        ph, pg = _pair(seed, 4)
        a = float(alpha(ph, pg))
        _, gt = task_loss(ph)
        _, gd = distill_loss(ph, pg)
        assembled = a * gt + (1 - a) * gd
        np.testing.assert_allclose(assembled, -0.5 * ((1 + 3 * a) * ph + (1 - a) * pg), atol=1e-15)
        stu, tea = logit_coefficients(ph, pg, a)
        np.testing.assert_allclose(-(stu + tea), assembled, atol=1e-15)


def test_student_dominance():
    for seed in range(200):
        ph, pg = _pair(seed, 5)
        a = float(alpha(ph, pg))
        stu, tea = logit_coefficients(ph, pg, a)
        # the simplified (1 + a) p_h form and the exact coefficients both dominate
        on = ph >= pg
        assert np.all(stu[on] >= tea[on])
        assert np.all(((1 + a) * ph)[on] >= ((1 - a) * pg)[on])


def test_zero_schedule_and_no_reg_gives_zero():
    m, t, xs, ys, xt = setup()
    cfg = CmkdConfig(lambda2=0.0, max_iters=10)
    o = objective(m, t, xs, ys, xt, cfg, ScheduleState(0, 10), terms=("task", "distill", "reg_source", "reg_target"))
    assert o.loss == 0.0
    assert all(not g.any() for g in o.grads.values())


def test_alpha_one_reduces_to_task_plus_reg():
    m, t, xs, ys, xt = setup(1)
    state = ScheduleState(3, 10)
    cfg = CmkdConfig(alpha_mode="fixed", alpha_fixed=1.0, max_iters=10)
    o = objective(m, t, xs, ys, xt, cfg, state, terms=("task", "distill", "reg_source", "reg_target"))
    lam1 = lambda_schedule(state.mu, cfg.beta1)
    o_task = objective(m, t, xs, ys, xt, cfg, state, terms=("task", "reg_source", "reg_target"))
    assert o.loss == pytest.approx(lam1 * o.terms["task"] + o.terms["reg"], abs=1e-15)
    for n in PARAM_NAMES:
        np.testing.assert_allclose(o.grads[n], o_task.grads[n], atol=1e-15)


def test_distill_stop_gradient_through_teacher():
    m, t, xs, ys, xt = setup(2)
    cfg = CmkdConfig(max_iters=10)
    state = ScheduleState(5, 10)
    o = objective(m, t, xs, ys, xt, cfg, state, terms=("distill",))
    tr = forward(m, t, xt)
    lam1 = lambda_schedule(state.mu, cfg.beta1)
    _, g = distill_loss(tr.p_h, tr.p_g)
    manual = backward(m, tr, (lam1 / len(xt)) * (1 - o.alpha)[:, None] * g, None)
    for n in PARAM_NAMES:
        np.testing.assert_allclose(o.grads[n], manual[n], atol=1e-15)
    # another teacher changes the value of the term, anchors themselves never move
    G_before = t.G.copy()
    t2 = AnchorTeacher.from_directions(t.G + 0.3 * Rng(9).normal(t.G.size).reshape(t.G.shape))
    o2 = objective(m, t2, xs, ys, xt, cfg, state, terms=("distill",))
    assert o2.terms["distill"] != o.terms["distill"]
    assert t.G.tobytes() == G_before.tobytes()


def test_vanilla_kd_pulls_student_toward_teacher():
    m, t, xs, ys, xt = setup(3, n=32)
    cfg = CmkdConfig(alpha_mode="fixed", alpha_fixed=0.0, distill_mode="vanilla_kl", lambda2=0.0, beta3=0.0, max_iters=1)
    state = ScheduleState(1, 1)
    opt = SGD(0.05, 0.5, momentum=0.0, weight_decay=0.0)

    def gap():
        tr = forward(m, t, xt)
        return float(np.mean(dv.kl(tr.p_g, tr.p_h)))

    start = gap()
    for _ in range(200):
        o = objective(m, t, xs, ys, xt, cfg, state, terms=("distill",))
        opt.step(m, o.grads)
    assert gap() < 0.5 * start


def test_degenerate_config_matches_source_only():
    m1, t, xs, ys, xt = setup(4)
    m2 = m1.copy()
    cfg = CmkdConfig(beta1=0.0, lambda2=0.0, beta3=0.0, max_iters=20)
    s = ScheduleState(0, 20)
    o1, o2 = SGD(0.01, 0.1), SGD(0.01, 0.1)
    for _ in range(20):
        total_loss_step(m1, t, xs, ys, xt, cfg, s, o1)
        source_only_step(m2, xs, ys, 0.1, o2)
    for n in PARAM_NAMES:
        assert getattr(m1, n).tobytes() == getattr(m2, n).tobytes()


def test_step_metrics_deterministic():
    runs = []
    for _ in range(2):
        m, t, xs, ys, xt = setup(5)
        s = ScheduleState(0, 30)
        opt = SGD(0.01, 0.1)
        runs.append([total_loss_step(m, t, xs, ys, xt, CmkdConfig(max_iters=30), s, opt).as_dict() for _ in range(30)])
    assert runs[0] == runs[1]


def test_full_batch_cls_non_increasing_on_separable_source():
    r = Rng(6)
    n = 60
    ys = np.arange(n) % 3
    means = 3.0 * np.eye(3, 5)
    xs = means[ys] + 0.3 * r.normal(n * 5).reshape(n, 5)
    m = init_model(r, 5, 6, 4, 3)
    t = AnchorTeacher.from_directions(r.normal(12).reshape(3, 4))
    cfg = CmkdConfig(max_iters=200)
    s = ScheduleState(0, 200)
    opt = SGD(0.02, 0.05, momentum=0.0, weight_decay=0.0)
    cls = []
    for _ in range(200):
        met = total_loss_step(m, t, xs, ys, xs, cfg, s, opt)
        assert math.isfinite(met.loss_total)
        cls.append(met.l_cls)
    assert all(b <= a + 1e-12 for a, b in zip(cls, cls[1:]))
    assert cls[-1] < 0.5 * cls[0]


def test_empty_target_batch_keeps_source_reg():
    m, t, xs, ys, _ = setup(7)
    o = objective(m, t, xs, ys, np.zeros((0, 5)), CmkdConfig(max_iters=4), ScheduleState(2, 4))
    assert o.terms["task"] == 0.0 and o.terms["reg"] > 0.0


def test_non_finite_update_aborts_with_term():
    m, t, xs, ys, xt = setup(8)
    m.W2[0, 0] = float("inf")
    with pytest.raises(NumericError) as exc:
        total_loss_step(m, t, xs, ys, xt, CmkdConfig(max_iters=2), ScheduleState(0, 2), SGD(0.1, 0.1))
    assert exc.value.term


@pytest.mark.parametrize("mode", ["kl", "ge", "fixed"])
def test_alpha_modes_in_objective(mode):
    m, t, xs, ys, xt = setup(9)
    o = objective(m, t, xs, ys, xt, CmkdConfig(alpha_mode=mode, max_iters=4), ScheduleState(2, 4))
    assert np.all((o.alpha > 0) & (o.alpha <= 1))


def test_gradcheck_suite_small():
    cases = gradcheck_suite(batches=2, cases={k: GRADCHECK_CASES[k] for k in ("total", "total_prototype")})
    assert all(c.passed for c in cases)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.0, 1.0))
def test_alpha_kl_mode_bounds(seed, t):
    ph, pg = _pair(seed, 3)
    q = (1 - t) * ph + t * pg
    a = alpha(q, pg)
    assert 0.0 < a <= 1.0
