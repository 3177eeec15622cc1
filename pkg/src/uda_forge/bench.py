"""Synthetic domain-shift tasks, the experiment runner and report emission.

A task has ``c`` Gaussian classes whose means sit on a centred simplex with
pairwise distance ``class_sep``.  The target domain applies a rotation in the
``(e0, e1)`` plane, then a scale, then a translation to those means.  The
teacher is an anchor classifier on the *base* encoder's features: one
unit anchor per class built from source data only, optionally perturbed by a
``kappa``-weighted random rotation or cyclically label-permuted.

Experiment configs are JSON documents::

    {"method": ..., "task": {...}, "model": {...}, "cmkd": {...}, "rst": {...},
     "fixmatch": {...}, "pda": {...}, "lora": {...}, "optimizer": {...},
     "training": {...}, "seeds": [...]}

Missing sections take their defaults; unknown keys are rejected.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import rst as rst_mod
from .cmkd import CmkdConfig, ScheduleState, objective, source_only_step, total_loss_step
from .errors import ConfigError, DivergenceError, DomainError, NumericError
from .extensions import FixMatchConfig, PdaState
from .model import (
    BIAS_NAMES,
    ENCODER_NAMES,
    HEAD_NAMES,
    PARAM_NAMES,
    SGD,
    AnchorTeacher,
    StudentModel,
    Teacher,
    build_prototype_teacher,
    count_params,
    forward,
    init_model,
    pack_tensors,
)
from .numerics import Rng

METHODS = ("teacher", "baseline", "cmkd", "cmkd_rst", "cmkd_fixmatch", "linear_probe", "bitfit", "lora")

# spawn keys; each consumer owns its stream
_DATA, _INIT, _SRC_BATCH, _TGT_BATCH, _AUG, _TEACHER, _LORA = 1, 2, 3, 4, 5, 6, 7

RESULT_COLUMNS = (
    "digest",
    "name",
    "method",
    "seed",
    "source_acc",
    "target_acc",
    "teacher_acc",
    "dsp",
    "density",
    "tau_used",
    "iters",
)
CURVE_COLUMNS = ("digest", "name", "method", "seed", "iter", "metric", "value")
CURVE_METRICS = ("l_cls", "l_task", "l_distill", "l_reg", "alpha_mean", "target_acc")


# --------------------------------------------------------------------------
# tasks


@dataclass
class SyntheticTaskSpec:
    c: int = 3
    d_in: int = 16
    n_s: int = 600
    n_t: int = 600
    class_sep: float = 4.0
    rotation_deg: float = 30.0
    scale: float = 1.2
    translation_norm: float = 1.0
    noise_source: float = 1.0
    noise_target: float = 1.0
    kappa: float = 0.5
    permuted: bool = False
    target_classes: list[int] | None = None
    seed: int = 0

    def __post_init__(self) -> None:
        if self.c < 2:
            raise ConfigError("need at least two classes")
        if self.d_in < max(2, self.c):
            raise ConfigError("d_in must be >= max(2, c)")
        if self.n_s < self.c or self.n_t < self.c:
            raise ConfigError("each domain needs at least c samples")
        if not 0.0 <= self.kappa <= 1.0:
            raise ConfigError("kappa must lie in [0, 1]")
        if self.class_sep < 0 or self.noise_source < 0 or self.noise_target < 0:
            raise ConfigError("class_sep and noise levels must be non-negative")
        if self.scale <= 0:
            raise ConfigError("scale must be positive")
        if self.target_classes is not None:
            tc = sorted(set(int(k) for k in self.target_classes))
            if not tc or tc[0] < 0 or tc[-1] >= self.c or len(tc) != len(self.target_classes):
                raise ConfigError("target_classes must be distinct class indices")
            self.target_classes = tc


@dataclass
class Dataset:
    X: np.ndarray
    y: np.ndarray
    domain: str = ""

    def __len__(self) -> int:
        return int(self.X.shape[0])


@dataclass
class Task:
    source: Dataset
    target: Dataset
    teacher: Teacher
    base: StudentModel
    spec: SyntheticTaskSpec


def class_means(c: int, d: int, sep: float) -> np.ndarray:
    """Centred simplex vertices in the first ``c`` coordinates, pairwise distance ``sep``."""
    E = np.zeros((c, d))
    E[:, :c] = np.eye(c)
    E -= E.mean(axis=0, keepdims=True)
    return E * (sep / math.sqrt(2.0))


def shift_means(means: np.ndarray, rotation_deg: float, scale: float, translation: np.ndarray) -> np.ndarray:
    th = math.radians(rotation_deg)
    R = np.eye(means.shape[1])
    R[0, 0], R[0, 1], R[1, 0], R[1, 1] = math.cos(th), -math.sin(th), math.sin(th), math.cos(th)
    return scale * (means @ R.T) + translation


def _balanced_labels(n: int, classes: Sequence[int], rng: Rng) -> np.ndarray:
    y = np.asarray([classes[i % len(classes)] for i in range(n)], dtype=np.int64)
    return y[rng.permutation(n)]


def random_orthogonal(rng: Rng, d: int) -> np.ndarray:
    Q, R = np.linalg.qr(rng.normal(d * d).reshape(d, d))
    return Q * np.sign(np.diag(R))[None, :]


def build_anchor_teacher(
    base: StudentModel, source: Dataset, kappa: float, permuted: bool, rng: Rng, scale: float = 5.0
) -> AnchorTeacher:
    """Anchors from source class means of base features; never sees target data."""
    feats = base.features(source.X)
    c = base.n_classes
    G = np.stack([feats[source.y == k].mean(axis=0) for k in range(c)])
    G /= np.linalg.norm(G, axis=1, keepdims=True)
    if kappa > 0:
        Q = random_orthogonal(rng, G.shape[1])
        G = (1.0 - kappa) * G + kappa * (G @ Q)
    if permuted:
        G = np.roll(G, -1, axis=0)
    return AnchorTeacher.from_directions(G, scale)


def generate_task(
    spec: SyntheticTaskSpec,
    seed: int | None = None,
    d_hid: int = 32,
    d_feat: int = 8,
    teacher_kind: str = "anchor",
    teacher_scale: float = 5.0,
) -> Task:
    """Source/target datasets, the base model and the frozen teacher.

    A pure function of ``(spec, seed)``; ``seed`` defaults to ``spec.seed``.
    """
    root = Rng(spec.seed if seed is None else seed)
    data = root.spawn(_DATA)
    means = class_means(spec.c, spec.d_in, spec.class_sep)
    direction = data.normal(spec.d_in)
    translation = direction / np.linalg.norm(direction) * spec.translation_norm
    t_means = shift_means(means, spec.rotation_deg, spec.scale, translation)

    ys = _balanced_labels(spec.n_s, list(range(spec.c)), data)
    Xs = means[ys] + spec.noise_source * data.normal(spec.n_s * spec.d_in).reshape(spec.n_s, spec.d_in)
    t_classes = spec.target_classes or list(range(spec.c))
    yt = _balanced_labels(spec.n_t, t_classes, data)
    Xt = t_means[yt] + spec.noise_target * data.normal(spec.n_t * spec.d_in).reshape(spec.n_t, spec.d_in)
    source, target = Dataset(Xs, ys, "source"), Dataset(Xt, yt, "target")

    base = init_model(root.spawn(_INIT), spec.d_in, d_hid, d_feat, spec.c)
    if teacher_kind == "anchor":
        teacher = build_anchor_teacher(base, source, spec.kappa, spec.permuted, root.spawn(_TEACHER), teacher_scale)
    elif teacher_kind == "prototype":
        teacher = build_prototype_teacher(base, source.X, source.y)
    else:
        raise ConfigError(f"unknown teacher kind {teacher_kind!r}")
    return Task(source, target, teacher, base, spec)


def evaluate(model: StudentModel, dataset: Dataset) -> float:
    """Accuracy of ``argmax p_h`` (ties go to the lowest class index)."""
    if len(dataset) == 0:
        raise DomainError("cannot evaluate on an empty dataset")
    pred = np.argmax(model.predict_proba(dataset.X), axis=1)
    return float(np.mean(pred == dataset.y))


def teacher_accuracy(teacher: Teacher, base: StudentModel, dataset: Dataset) -> float:
    """Zero-shot accuracy of the frozen teacher on the base encoder's features."""
    if len(dataset) == 0:
        raise DomainError("cannot evaluate on an empty dataset")
    p_g = forward(base, teacher, dataset.X).p_g
    return float(np.mean(np.argmax(p_g, axis=1) == dataset.y))


def _dataset_csv(ds: Dataset) -> str:
    d = ds.X.shape[1]
    lines = [",".join([f"x{i}" for i in range(d)] + ["label"])]
    for row, lab in zip(ds.X, ds.y):
        lines.append(",".join(repr(float(v)) for v in row) + f",{int(lab)}")
    return "\n".join(lines) + "\n"


def read_dataset_csv(path, domain: str = "") -> Dataset:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    body = rows[1:]
    X = np.array([[float(v) for v in r[:-1]] for r in body], dtype=np.float64)
    y = np.array([int(r[-1]) for r in body], dtype=np.int64)
    return Dataset(X.reshape(len(body), len(rows[0]) - 1), y, domain)


def write_task(task: Task, out_dir) -> list[Path]:
    """``source.csv``, ``target.csv`` (features then label), ``base.wgt`` and
    ``teacher.wgt`` (WGT1 with tensors ``G`` and ``scale``, or ``M``/``ref_W``/``ref_b``)."""
    from .model import save_model

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = [out / "source.csv", out / "target.csv", out / "base.wgt", out / "teacher.wgt"]
    paths[0].write_text(_dataset_csv(task.source))
    paths[1].write_text(_dataset_csv(task.target))
    save_model(paths[2], task.base)
    t = task.teacher
    if isinstance(t, AnchorTeacher):
        tensors = [("G", t.G), ("scale", np.array([t.scale]))]
    else:
        tensors = [("M", t.M), ("ref_W", t.ref_W), ("ref_b", t.ref_b)]
    paths[3].write_bytes(pack_tensors(tensors))
    return paths


# --------------------------------------------------------------------------
# experiment config


@dataclass
class ModelConfig:
    d_hid: int = 32
    d_feat: int = 8
    teacher: str = "anchor"
    teacher_scale: float = 5.0


@dataclass
class OptimizerConfig:
    lr_encoder: float = 0.01
    lr_head: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4

    def __post_init__(self) -> None:
        if self.lr_encoder < 0 or self.lr_head < 0:
            raise ConfigError("learning rates must be non-negative")
        if not 0 <= self.momentum < 1:
            raise ConfigError("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be non-negative")


@dataclass
class TrainingConfig:
    iters: int = 2000
    eval_every: int = 50
    batch_size: int = 32

    def __post_init__(self) -> None:
        if self.iters < 1 or self.eval_every < 1 or self.batch_size < 1:
            raise ConfigError("iters, eval_every and batch_size must be >= 1")


@dataclass
class PdaConfig:
    enabled: bool = False
    threshold: int = 14

    def __post_init__(self) -> None:
        if self.threshold < 0:
            raise ConfigError("PDA threshold must be non-negative")


@dataclass
class LoraConfig:
    rank: int = 1
    targets: list[str] = field(default_factory=lambda: ["W1", "W2"])

    def __post_init__(self) -> None:
        if self.rank < 1:
            raise ConfigError("LoRA rank must be >= 1")
        bad = [t for t in self.targets if t not in ("W1", "W2")]
        if bad:
            raise ConfigError(f"LoRA can only adapt W1/W2, got {bad}")


def _build(cls, data, section: str):
    if data is None:
        return cls()
    if isinstance(data, cls):
        return data
    if not isinstance(data, dict):
        raise ConfigError(f"section {section!r} must be an object")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"unknown key(s) in {section!r}: {unknown}")
    try:
        return cls(**data)
    except TypeError as exc:
        raise ConfigError(f"bad {section!r} section: {exc}") from None


@dataclass
class ExperimentConfig:
    method: str = "cmkd"
    name: str = "run"
    task: SyntheticTaskSpec = field(default_factory=SyntheticTaskSpec)
    model: ModelConfig = field(default_factory=ModelConfig)
    cmkd: CmkdConfig = field(default_factory=CmkdConfig)
    rst: rst_mod.RstConfig = field(default_factory=rst_mod.RstConfig)
    fixmatch: FixMatchConfig = field(default_factory=FixMatchConfig)
    pda: PdaConfig = field(default_factory=PdaConfig)
    lora: LoraConfig = field(default_factory=LoraConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    seeds: list[int] = field(default_factory=lambda: [0])

    SECTIONS = {
        "task": SyntheticTaskSpec,
        "model": ModelConfig,
        "cmkd": CmkdConfig,
        "rst": rst_mod.RstConfig,
        "fixmatch": FixMatchConfig,
        "pda": PdaConfig,
        "lora": LoraConfig,
        "optimizer": OptimizerConfig,
        "training": TrainingConfig,
    }

    def __post_init__(self) -> None:
        if self.method not in METHODS:
            raise ConfigError(f"method must be one of {METHODS}, got {self.method!r}")
        for key, cls in self.SECTIONS.items():
            setattr(self, key, _build(cls, getattr(self, key), key))
        if not self.seeds or not all(isinstance(s, int) and s >= 0 for s in self.seeds):
            raise ConfigError("seeds must be a non-empty list of non-negative integers")

    @classmethod
    def from_dict(cls, data: dict) -> ExperimentConfig:
        if not isinstance(data, dict):
            raise ConfigError("config must be a JSON object")
        known = {"method", "name", "seeds", *cls.SECTIONS}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown top-level key(s): {unknown}")
        return cls(**data)

    @classmethod
    def from_json(cls, text: str) -> ExperimentConfig:
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from None
        return cls.from_dict(data)

    def to_dict(self) -> dict:
        out = {"method": self.method, "name": self.name, "seeds": list(self.seeds)}
        for key in self.SECTIONS:
            out[key] = asdict(getattr(self, key))
        return out

    def digest(self) -> str:
        canon = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode()).hexdigest()[:16]

    def replace(self, **changes) -> ExperimentConfig:
        """Copy with top-level or ``section__key`` overrides."""
        d = self.to_dict()
        for k, v in changes.items():
            if "__" in k:
                sec, key = k.split("__", 1)
                d[sec][key] = v
            else:
                d[k] = v
        return ExperimentConfig.from_dict(d)


# --------------------------------------------------------------------------
# runs


@dataclass
class CurvePoint:
    iter: int
    l_cls: float
    l_task: float
    l_distill: float
    l_reg: float
    alpha_mean: float
    target_acc: float


@dataclass
class RunResult:
    digest: str
    name: str
    method: str
    seed: int
    source_acc: float
    target_acc: float
    teacher_acc: float
    dsp: int
    density: float
    tau_used: float
    iters: int
    curve: list[CurvePoint] = field(default_factory=list)
    wall_time: float = 0.0
    # in-memory artefacts, never serialised
    model: StudentModel | None = field(default=None, repr=False, compare=False)
    base: StudentModel | None = field(default=None, repr=False, compare=False)
    residual: rst_mod.SparseResidual | None = field(default=None, repr=False, compare=False)

    def to_record(self) -> dict:
        """Deterministic part of the result (wall time excluded)."""
        rec = {k: getattr(self, k) for k in RESULT_COLUMNS}
        rec["curve"] = [asdict(p) for p in self.curve]
        return rec

    @classmethod
    def from_record(cls, rec: dict) -> RunResult:
        curve = [CurvePoint(**p) for p in rec.get("curve", [])]
        return cls(**{k: rec[k] for k in RESULT_COLUMNS}, curve=curve)


def _json_float(v):
    if isinstance(v, float) and not math.isfinite(v):
        return None
    return v


def _sanitize(obj):
    if isinstance(obj, dict):
        return {k: _sanitize(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_sanitize(v) for v in obj]
    return _json_float(obj)


def _curve_point(model, teacher, task, cfg_cmkd, state, keep) -> CurvePoint:
    obj = objective(model, teacher, task.source.X, task.source.y, task.target.X, cfg_cmkd, state, keep=keep)
    t = obj.terms
    return CurvePoint(state.iter, t["cls"], t["task"], t["distill"], t["reg"], t["alpha_mean"], evaluate(model, task.target))


def _method_mask(method: str) -> dict[str, bool] | None:
    if method == "linear_probe":
        return rst_mod.linear_probe_mask()
    if method == "bitfit":
        return rst_mod.bitfit_mask()
    if method == "lora":
        return rst_mod.linear_probe_mask()
    return None


def run_experiment(config: ExperimentConfig, seed: int | None = None, task: Task | None = None) -> RunResult:
    """Train one method on one seed and evaluate it."""
    seed = config.seeds[0] if seed is None else seed
    t0 = time.perf_counter()
    if task is None:
        task = generate_task(config.task, seed, config.model.d_hid, config.model.d_feat, config.model.teacher, config.model.teacher_scale)
    base = task.base
    model = base.copy()
    teacher = task.teacher
    method = config.method
    tcfg = config.training
    teacher_acc = teacher_accuracy(teacher, base, task.target)

    root = Rng(seed)
    src_rng, tgt_rng, aug_rng = root.spawn(_SRC_BATCH), root.spawn(_TGT_BATCH), root.spawn(_AUG)
    cfg_cmkd = CmkdConfig(**{**asdict(config.cmkd), "max_iters": tcfg.iters})
    if method == "baseline":
        cfg_cmkd = CmkdConfig(beta1=0.0, lambda2=0.0, beta3=0.0, label_smoothing=cfg_cmkd.label_smoothing, max_iters=tcfg.iters)
    state = ScheduleState(0, tcfg.iters)
    oc = config.optimizer
    opt = SGD(oc.lr_encoder, oc.lr_head, oc.momentum, oc.weight_decay, mask=_method_mask(method))
    controller = rst_mod.RstController(config.rst, base.params(), opt) if method == "cmkd_rst" else None
    fixmatch = (config.fixmatch, aug_rng) if method == "cmkd_fixmatch" else None
    adapters = []
    if method == "lora":
        adapters = rst_mod.init_lora(root.spawn(_LORA), base, config.lora.rank, config.lora.targets)

    pda = PdaState(config.pda.threshold) if config.pda.enabled else None
    epoch = max(1, math.ceil(len(task.target) / tcfg.batch_size))
    keep = None

    curve: list[CurvePoint] = []
    last: dict = {}
    iters = 0 if method == "teacher" else tcfg.iters
    if iters:
        curve.append(_curve_point(model, teacher, task, cfg_cmkd, state, keep))
    try:
        for it in range(iters):
            if pda is not None and it % epoch == 0:
                keep = pda.refresh(model, task.target.X)
            si = src_rng.integers(tcfg.batch_size, len(task.source))
            ti = tgt_rng.integers(tcfg.batch_size, len(task.target))
            xs, ys, xt = task.source.X[si], task.source.y[si], task.target.X[ti]
            if method == "baseline":
                l_cls = source_only_step(model, xs, ys, cfg_cmkd.label_smoothing, opt)
                state.advance()
                last = {"iter": it, "l_cls": l_cls}
            else:
                if adapters:
                    # grads w.r.t. the merged weights drive both the head and the factors
                    obj = objective(model, teacher, xs, ys, xt, cfg_cmkd, state, keep=keep)
                    for name, g in obj.grads.items():
                        if not np.all(np.isfinite(g)):
                            raise NumericError(f"gradient of {name} is not finite", term=name)
                    opt.step(model, obj.grads)
                    rst_mod.lora_step(adapters, obj.grads, oc.lr_encoder, oc.momentum, oc.weight_decay)
                    for ad in adapters:
                        setattr(model, ad.name, getattr(base, ad.name) + ad.delta())
                    state.advance()
                    last = dict(obj.terms, iter=it)
                else:
                    m = total_loss_step(model, teacher, xs, ys, xt, cfg_cmkd, state, opt, keep=keep, fixmatch=fixmatch)
                    last = m.as_dict()
                if controller is not None:
                    controller.after_step(model, state.mu)
            if (it + 1) % tcfg.eval_every == 0 or it + 1 == iters:
                curve.append(_curve_point(model, teacher, task, cfg_cmkd, state, keep))
    except NumericError as exc:
        raise DivergenceError(f"training diverged at iteration {state.iter}: {exc}", exc.term, last) from exc

    if iters:
        # land on weights a float64 residual over ``base`` reproduces exactly
        for n in PARAM_NAMES:
            setattr(model, n, rst_mod.snap_to_base(getattr(model, n), getattr(base, n)))
    residual = None
    density = float("nan")
    tau_used = float("nan")
    if controller is not None:
        controller.finalize(model)
        tau_used = controller.tau_used
        residual = rst_mod.extract_residual(model.params(), base.params(), tau_used)
        deployed = rst_mod.apply_to_model(base, residual)
        if any(getattr(deployed, n).tobytes() != getattr(model, n).tobytes() for n in PARAM_NAMES):
            raise NumericError("residual round trip is not bit-exact", term="rst")
        model = deployed
        density = residual.density(ENCODER_NAMES)
    if curve:
        curve[-1] = _curve_point(model, teacher, task, cfg_cmkd, state, keep)

    head = count_params(model) - count_params(model, include_head=False)
    if method == "teacher":
        dsp_value = 0
    elif method == "cmkd_rst":
        dsp_value = rst_mod.dsp([residual]).total
    elif method == "linear_probe":
        dsp_value = head
    elif method == "bitfit":
        dsp_value = sum(getattr(model, n).size for n in BIAS_NAMES if n not in HEAD_NAMES) + head
    elif method == "lora":
        dsp_value = sum(ad.n_params for ad in adapters) + head
    else:
        dsp_value = count_params(model)

    src_acc = evaluate(model, task.source)
    tgt_acc = teacher_acc if method == "teacher" else evaluate(model, task.target)
    return RunResult(
        digest=config.digest(),
        name=config.name,
        method=method,
        seed=int(seed),
        source_acc=src_acc,
        target_acc=tgt_acc,
        teacher_acc=teacher_acc,
        dsp=int(dsp_value),
        density=float(density),
        tau_used=float(tau_used),
        iters=iters,
        curve=curve,
        wall_time=time.perf_counter() - t0,
        model=model,
        base=base,
        residual=residual,
    )


def _run_one(args) -> RunResult:
    config, seed = args
    r = run_experiment(config, seed)
    # keep the pickled payload small; artefacts stay in the worker
    r.model = r.base = None
    return r


def thread_cap() -> int:
    raw = os.environ.get("UDA_FORGE_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"UDA_FORGE_THREADS must be an integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError("UDA_FORGE_THREADS must be >= 1")
    return n


def run_suite(configs: Iterable[ExperimentConfig], workers: int | None = None) -> list[RunResult]:
    """Run every (config, seed) pair; results sorted by (digest, seed)."""
    jobs = [(cfg, s) for cfg in configs for s in cfg.seeds]
    workers = thread_cap() if workers is None else workers
    if workers <= 1 or len(jobs) <= 1:
        results = [run_experiment(cfg, s) for cfg, s in jobs]
    else:
        with ProcessPoolExecutor(max_workers=min(workers, len(jobs))) as pool:
            results = list(pool.map(_run_one, jobs))
    return sorted(results, key=lambda r: (r.digest, r.seed))


# --------------------------------------------------------------------------
# reporting


def _csv_value(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def emit_report(results: Sequence[RunResult], out_dir, formats: Sequence[str] = ("csv", "jsonl")) -> list[Path]:
    """Write ``results.csv`` / ``results.jsonl`` and the long-format ``curves.csv``."""
    if not results:
        raise DomainError("no results to report")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ordered = sorted(results, key=lambda r: (r.digest, r.seed))
    written = []
    for fmt in formats:
        if fmt == "csv":
            lines = [",".join(RESULT_COLUMNS)]
            for r in ordered:
                rec = r.to_record()
                lines.append(",".join(_csv_value(rec[k]) for k in RESULT_COLUMNS))
            p = out / "results.csv"
            p.write_text("\n".join(lines) + "\n")
            written.append(p)
            clines = [",".join(CURVE_COLUMNS)]
            for r in ordered:
                for pt in r.curve:
                    for m in CURVE_METRICS:
                        clines.append(f"{r.digest},{r.name},{r.method},{r.seed},{pt.iter},{m},{_csv_value(getattr(pt, m))}")
            p = out / "curves.csv"
            p.write_text("\n".join(clines) + "\n")
            written.append(p)
        elif fmt == "jsonl":
            p = out / "results.jsonl"
            p.write_text("".join(json.dumps(_sanitize(r.to_record()), sort_keys=True) + "\n" for r in ordered))
            written.append(p)
        else:
            raise ConfigError(f"unknown report format {fmt!r}")
    return written


def _parse_csv_value(key: str, v: str):
    if key in ("digest", "name", "method"):
        return v
    if key in ("seed", "dsp", "iters"):
        return int(v)
    return float(v)


def read_results_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [{k: _parse_csv_value(k, v) for k, v in row.items()} for row in rows]


def read_results_jsonl(path) -> list[RunResult]:
    out = []
    with open(path) as fh:
        for line in fh:
            rec = json.loads(line)
            for k in ("density", "tau_used"):
                if rec.get(k) is None:
                    rec[k] = float("nan")
            out.append(RunResult.from_record(rec))
    return out


# --------------------------------------------------------------------------
# reference suite


# constant tau that keeps encoder residual density under 5% on every reference seed
REFERENCE_TAU = 2e-3


def reference_config(method: str = "cmkd", variant: str = "reference", **overrides) -> ExperimentConfig:
    """The desk-scale reference suite; ``variant`` is reference, strong_teacher or bad_teacher."""
    task = {}
    if variant == "strong_teacher":
        task = {"kappa": 0.0}
    elif variant == "bad_teacher":
        task = {"permuted": True}
    elif variant != "reference":
        raise ConfigError(f"unknown variant {variant!r}")
    cfg = ExperimentConfig(
        method=method,
        name=variant,
        task=SyntheticTaskSpec(**task),
        rst=rst_mod.RstConfig(tau=REFERENCE_TAU),
        seeds=[0, 1, 2, 3, 4],
    )
    return cfg.replace(**overrides) if overrides else cfg
