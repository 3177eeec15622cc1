"""Acceptance suite; one PASS/FAIL line per criterion is printed at the end."""

import json
import math
import time
from pathlib import Path

import numpy as np
import pytest

from uda_forge import divergences as dv
from uda_forge.bench import REFERENCE_TAU, emit_report, generate_task, reference_config, run_experiment
from uda_forge.cmkd import GRADCHECK_CASES, alpha, gradcheck_suite
from uda_forge.errors import ChecksumError
from uda_forge.extensions import FixMatchConfig, PdaState, fixmatch_gradients, pda_count, pda_mask
from uda_forge.model import ENCODER_NAMES, HEAD_NAMES, PARAM_NAMES, init_model
from uda_forge.numerics import Rng, softmax
from uda_forge.rst import (
    ResidualTensor,
    SparseResidual,
    apply_residual,
    dsp,
    extract_residual,
    pack_residual,
    unpack_residual,
)

SEEDS = (0, 1, 2, 3, 4)
FIXTURES = Path(__file__).parent / "fixtures"


class ReferenceRuns:
    """Lazily trained reference-suite runs, shared across criteria."""

    def __init__(self):
        self.runs = {}
        self.seconds = {}

    def get(self, method, variant="reference"):
        key = (method, variant)
        if key not in self.runs:
            cfg = reference_config(method, variant)
            t0 = time.perf_counter()
            self.runs[key] = [run_experiment(cfg, s) for s in SEEDS]
            self.seconds[key] = time.perf_counter() - t0
        return self.runs[key]

    def acc(self, method, variant="reference"):
        return np.array([r.target_acc for r in self.get(method, variant)])


@pytest.fixture(scope="session")
def ref():
    return ReferenceRuns()


def same_bits(a, b):
    return all(np.asarray(a[n]).tobytes() == np.asarray(b[n]).tobytes() for n in PARAM_NAMES)


def report(msg):
    print(f"\n  {msg}")


# -- 1


@pytest.mark.criterion(1)
def test_gradient_truth():
    t0 = time.perf_counter()
    cases = gradcheck_suite(batches=20, seed=0, tolerance=1e-4, h=1e-5)
    elapsed = time.perf_counter() - t0
    names = {c.name for c in cases}
    assert {"cls", "task", "distill_gini_mixed", "distill_vanilla_kl", "reg", "total", "total_vanilla_kl"} <= names
    assert names == set(GRADCHECK_CASES)
    for c in cases:
        report(f"{c.name:22s} batches={c.batches} max rel err {c.max_rel_err:.2e}")
        assert c.batches >= 20
        assert c.max_rel_err < 1e-4, c.worst
    assert elapsed < 30.0, f"{elapsed:.1f}s"


# -- 2


def _ulps(x, n=4):
    return n * math.ulp(abs(x))


@pytest.mark.criterion(2)
def test_divergence_identities():
    for c in range(2, 33):
        for k in range(c):
            e = np.zeros(c)
            e[k] = 1.0
            assert dv.gini(e) == 0.0
            assert dv.gibbs_entropy(e) == 0.0
        u = np.full(c, 1.0 / c)
        # 1 - 1/c and ln c are not representable; evaluation is exact to rounding
        assert abs(dv.gini(u) - (1.0 - 1.0 / c)) <= _ulps(1.0 - 1.0 / c)
        assert abs(dv.gibbs_entropy(u) - math.log(c)) <= _ulps(math.log(c))
        assert dv.kl(u, u) < 1e-12
    r = Rng(2)
    for _ in range(2000):
        c = 2 + int(r.integers(1, 9)[0])
        p = softmax(2.0 * r.normal(c))
        q = softmax(2.0 * r.normal(c))
        assert dv.kl(p, q) >= 0.0
        assert dv.kl(p, p) < 1e-12
        assert dv.gini(p) <= (1.0 - 1.0 / c) + _ulps(1.0)
        assert dv.gibbs_entropy(p) <= math.log(c) + _ulps(math.log(c))


# -- 3


@pytest.mark.criterion(3)
def test_alpha_contract():
    r = Rng(3)
    grid = np.linspace(0.0, 1.0, 10)
    for _ in range(100):
        c = 2 + int(r.integers(1, 7)[0])
        p_h = softmax(2.0 * r.normal(c))
        p_g = softmax(2.0 * r.normal(c))
        a_seg = [alpha((1 - t) * p_h + t * p_g, p_g) for t in grid]
        assert all(0.0 < a <= 1.0 for a in a_seg)
        assert all(b > a for a, b in zip(a_seg, a_seg[1:]))
        assert a_seg[-1] == 1.0
        assert alpha(p_h, p_g) < 1.0
        assert alpha(p_g, p_g) == 1.0


# -- 4


@pytest.mark.criterion(4)
def test_rst_bit_exactness_on_trained_runs(ref):
    checked = 0
    for key in (("cmkd_rst", "reference"), ("cmkd", "reference"), ("baseline", "reference")):
        for r in ref.get(*key):
            tuned, base = r.model.params(), r.base.params()
            res = r.residual if r.residual is not None else extract_residual(tuned, base)
            back = apply_residual(base, unpack_residual(pack_residual(res)))
            assert same_bits(back, tuned), key
            checked += 1
            if key[0] == "cmkd_rst":
                assert r.tau_used == REFERENCE_TAU
                for t in res.tensors:
                    if t.name in ENCODER_NAMES:
                        assert np.all(np.abs(t.values) > r.tau_used)
                wrong = {n: a.copy() for n, a in base.items()}
                wrong["W1"].flat[0] = np.nextafter(wrong["W1"].flat[0], np.inf)
                with pytest.raises(ChecksumError, match="base model mismatch"):
                    apply_residual(wrong, res)
    report(f"{checked} trained runs round-tripped bitwise")


@pytest.mark.criterion(4)
def test_golden_rst1_fixtures():
    for name in ("golden_f64.rst", "golden_f32.rst"):
        data = (FIXTURES / name).read_bytes()
        assert pack_residual(unpack_residual(data)) == data
    built = SparseResidual(
        [ResidualTensor("W1", (2, 3), [1, 4], [0.5, -0.25]), ResidualTensor("bh", (2,), [], [])], 0x0123456789ABCDEF, 1e-6
    )
    assert pack_residual(built) == (FIXTURES / "golden_f64.rst").read_bytes()


# -- 5


@pytest.mark.criterion(5)
def test_rst_fidelity_vs_density(ref):
    full = ref.acc("cmkd")
    sparse = ref.acc("cmkd_rst")
    dens = [r.density for r in ref.get("cmkd_rst")]
    seconds = ref.seconds[("cmkd", "reference")] + ref.seconds[("cmkd_rst", "reference")]
    report(f"full {full.mean():.4f} rst {sparse.mean():.4f} gap {100 * (full.mean() - sparse.mean()):.2f} pts")
    report(f"densities {', '.join(f'{d:.4f}' for d in dens)} in {seconds:.1f}s")
    assert max(dens) <= 0.05
    assert full.mean() - sparse.mean() <= 0.02
    assert seconds < 180.0


# -- 6


@pytest.mark.criterion(6)
def test_cmkd_improves_on_source_only(ref):
    diff = ref.acc("cmkd") - ref.acc("baseline")
    report(f"per-seed gains {np.round(diff, 4).tolist()} mean {diff.mean():.4f}")
    assert diff.mean() > 0


@pytest.mark.criterion(6)
def test_cmkd_beats_strong_teacher(ref):
    runs = ref.get("cmkd", "strong_teacher")
    student = np.array([r.target_acc for r in runs])
    teacher = np.array([r.teacher_acc for r in runs])
    report(f"strong teacher {teacher.mean():.4f} student {student.mean():.4f}")
    assert np.all(student >= teacher)


# -- 7


@pytest.mark.criterion(7)
def test_bad_teacher_robustness(ref):
    runs = ref.get("cmkd", "bad_teacher")
    cmkd = np.array([r.target_acc for r in runs])
    teacher = np.array([r.teacher_acc for r in runs])
    source_only = ref.acc("baseline", "bad_teacher")
    report(f"permuted teacher {teacher.mean():.4f} cmkd {cmkd.mean():.4f} source-only {source_only.mean():.4f}")
    assert teacher.mean() <= 1.0 / 3 + 0.05
    assert np.all(cmkd >= source_only - 0.01)


# -- 8


@pytest.mark.criterion(8)
def test_fixmatch_gate_zero_gradient():
    for seed in range(10):
        m = init_model(Rng(seed), 6, 8, 4, 3)
        m.Wh *= 20.0
        X = 2.5 * Rng(seed + 100).normal(24 * 6).reshape(24, 6)
        conf = m.predict_proba(X).max(axis=1)
        # threshold at the median confidence so both sides of the gate are populated
        cfg = FixMatchConfig(tau_fm=float(np.median(conf)), weak_noise=0.0, strong_noise=0.0, strong_dropout=0.0)
        gate = conf > cfg.tau_fm
        assert 0 < gate.sum() < len(X)
        _, g_full = fixmatch_gradients(m, X, cfg, Rng(0))
        # moving the gated-out rows changes nothing as long as they stay gated out
        X2 = X.copy()
        X2[~gate] *= 0.0
        assert np.all(m.predict_proba(X2[~gate]).max(axis=1) <= cfg.tau_fm)
        _, g_swap = fixmatch_gradients(m, X2, cfg, Rng(0))
        for n in PARAM_NAMES:
            assert np.array_equal(g_full[n], g_swap[n])
        _, g_out = fixmatch_gradients(m, X[~gate], cfg, Rng(0))
        assert all(not g_out[n].any() for n in PARAM_NAMES)


@pytest.mark.criterion(8)
def test_fixmatch_lambda_zero_bitwise(ref):
    r_fm = run_experiment(reference_config("cmkd_fixmatch", fixmatch__lambda_fm=0.0), 0)
    r_cm = ref.get("cmkd")[0]
    assert same_bits(r_fm.model.params(), r_cm.model.params())
    a, b = r_fm.to_record(), r_cm.to_record()
    for k in ("digest", "method"):
        del a[k], b[k]
    assert json.dumps(a, sort_keys=True) == json.dumps(b, sort_keys=True)


# -- 9


@pytest.mark.criterion(9)
def test_pda_worked_example():
    counts = pda_count([0, 0, 1, 2, 2, 2], 4)
    assert counts.tolist() == [2, 1, 3, 0]
    p = np.array([[0.1, 0.6, 0.2, 0.1], [0.25, 0.25, 0.25, 0.25]])
    out = pda_mask(p, counts, threshold=2)
    assert np.all(out[:, [1, 3]] == 0.0)
    np.testing.assert_allclose(out.sum(axis=1), 1.0, rtol=0, atol=1e-15)
    assert set(np.argmax(out, axis=1).tolist()) <= {0, 2}


@pytest.mark.criterion(9)
def test_pda_masked_classes_never_predicted():
    cfg = reference_config("cmkd", task__target_classes=[0, 2], pda__enabled=True, pda__threshold=14, training__iters=400)
    r = run_experiment(cfg, 0)
    task = generate_task(cfg.task, 0)
    state = PdaState(cfg.pda.threshold)
    keep = state.refresh(r.model, task.target.X)
    probs = pda_mask(r.model.predict_proba(task.target.X), state.counts, cfg.pda.threshold)
    masked = ~keep
    report(f"counts {state.counts.tolist()} keep {keep.tolist()}")
    assert np.all(probs[:, masked] == 0.0)
    assert not np.isin(np.argmax(probs, axis=1), np.nonzero(masked)[0]).any()


# -- 10


@pytest.mark.criterion(10)
def test_dsp_arithmetic():
    counts = dsp([86_230_000] * 12)
    assert counts.total == 1_034_760_000 and f"{counts.total_millions(1):.2f}" == "1034.80"

    def res(nnz):
        return SparseResidual(
            [
                ResidualTensor("W1", (16, 32), np.arange(nnz), np.full(nnz, 0.5)),
                ResidualTensor("Wh", (8, 3), [], []),
                ResidualTensor("bh", (3,), [], []),
            ],
            0,
        )

    assert dsp([res(10), res(20)], head_params=6).total == 42
    assert dsp([res(10), res(20)]).total == (10 + 27) + (20 + 27)


# -- 11


@pytest.mark.criterion(11)
def test_byte_identical_reruns(ref, tmp_path):
    for method in ("cmkd_rst", "cmkd_fixmatch", "baseline"):
        cfg = reference_config(method, training__iters=500)
        blobs = []
        for k in range(2):
            out = tmp_path / f"{method}{k}"
            emit_report([run_experiment(cfg, s) for s in (0, 3)], out)
            blobs.append(((out / "results.jsonl").read_bytes(), (out / "curves.csv").read_bytes()))
        assert blobs[0] == blobs[1]
    # the cached reference runs reproduce too
    again = run_experiment(reference_config("cmkd"), 2)
    assert json.dumps(again.to_record(), sort_keys=True) == json.dumps(ref.get("cmkd")[2].to_record(), sort_keys=True)


# -- 12


@pytest.mark.criterion(12)
def test_suite_wall_time(acceptance_clock):
    elapsed = time.perf_counter() - acceptance_clock["start"]
    report(f"acceptance suite so far: {elapsed:.1f}s")
    assert elapsed < 300.0
