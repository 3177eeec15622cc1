"""``uda-forge`` command line.

Exit codes: 0 success, 1 validation error (bad flags, config, file format,
checksum mismatch), 2 numeric failure (divergence, failed gradient check).
Machine-readable summaries go to stdout as JSON; diagnostics go to stderr.
"""

from __future__ import annotations

import argparse
import json
import math
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import bench
from . import rst as rst_mod
from .cmkd import gradcheck_suite
from .errors import DivergenceError, NumericError, UdaForgeError
from .model import ENCODER_NAMES, HEAD_NAMES, load_model, save_model

EXIT_OK, EXIT_INVALID, EXIT_NUMERIC = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _emit(obj) -> None:
    print(json.dumps(obj, sort_keys=True, default=_jsonable))


def _jsonable(v):
    if isinstance(v, (np.integer,)):
        return int(v)
    if isinstance(v, (np.floating,)):
        return float(v)
    raise TypeError(f"cannot serialise {type(v).__name__}")


def _nan_to_none(v: float):
    return None if isinstance(v, float) and math.isnan(v) else v


def _read_json(path: str) -> dict:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise UsageError(f"cannot read {path}: {exc.strerror}") from None
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise UsageError(f"{path} is not valid JSON: {exc}") from None


# --------------------------------------------------------------------------
# subcommands


def cmd_gen_data(args) -> int:
    raw = _read_json(args.spec)
    if not isinstance(raw, dict):
        raise UsageError("spec must be a JSON object")
    # a full experiment config is accepted too; its task/model sections are used
    if "task" in raw:
        cfg = bench.ExperimentConfig.from_dict(raw)
        spec, model = cfg.task, cfg.model
    else:
        spec, model = bench._build(bench.SyntheticTaskSpec, raw, "task"), bench.ModelConfig()
    task = bench.generate_task(spec, args.seed, model.d_hid, model.d_feat, model.teacher, model.teacher_scale)
    paths = bench.write_task(task, args.out)
    _emit(
        {
            "files": {p.name: p.stat().st_size for p in paths},
            "n_source": len(task.source),
            "n_target": len(task.target),
            "teacher_acc": bench.teacher_accuracy(task.teacher, task.base, task.target),
        }
    )
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = bench.ExperimentConfig.from_dict(_read_json(args.config))
    seeds = [args.seed] if args.seed is not None else cfg.seeds
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    results = []
    for seed in seeds:
        try:
            r = bench.run_experiment(cfg, seed)
        except DivergenceError as exc:
            print(f"diverged in term {exc.term!r}: {exc}", file=sys.stderr)
            print(f"last metrics: {json.dumps(exc.last_metrics, default=_jsonable)}", file=sys.stderr)
            return EXIT_NUMERIC
        run_dir = out / f"{cfg.method}_seed{seed}"
        run_dir.mkdir(exist_ok=True)
        save_model(run_dir / "base.wgt", r.base)
        save_model(run_dir / "tuned.wgt", r.model)
        if r.residual is not None:
            rst_mod.save_residual(run_dir / "task.rst", r.residual)
        print(f"{cfg.method} seed {seed}: target acc {r.target_acc:.4f} ({r.wall_time:.2f}s)", file=sys.stderr)
        results.append(r)
    bench.emit_report(results, out)
    _emit({"runs": len(results), "out": str(out), "mean_target_acc": float(np.mean([r.target_acc for r in results]))})
    return EXIT_OK


def cmd_rst_pack(args) -> int:
    base = load_model(args.base)
    tuned = load_model(args.tuned)
    names = rst_mod.PARAM_NAMES if args.include_head else ENCODER_NAMES
    params = tuned.params()
    tau = float("nan")
    if args.tau is not None:
        if args.tau < 0:
            raise UsageError("--tau must be non-negative")
        params, _, _ = rst_mod.threshold_reset(params, base.params(), args.tau, names)
        tau = args.tau
    residual = rst_mod.extract_residual(params, base.params(), tau, dtype=args.dtype)
    rst_mod.save_residual(args.out, residual)
    _emit(
        {
            "out": args.out,
            "nnz": residual.nnz(exclude=HEAD_NAMES),
            "head_params": residual.head_params(),
            "density": residual.density(ENCODER_NAMES),
            "base_checksum": f"{residual.base_checksum:016x}",
            "tau_used": _nan_to_none(residual.tau_used),
        }
    )
    return EXIT_OK


def cmd_rst_apply(args) -> int:
    base = load_model(args.base)
    residual = rst_mod.load_residual(args.residual)
    merged = rst_mod.apply_to_model(base, residual)
    save_model(args.out, merged)
    _emit({"out": args.out, "nnz": residual.nnz(), "base_checksum": f"{residual.base_checksum:016x}"})
    return EXIT_OK


def cmd_dsp(args) -> int:
    root = Path(args.runs)
    if not root.is_dir():
        raise UsageError(f"{root} is not a directory")
    files = sorted(root.rglob("*.rst"))
    residuals = [rst_mod.load_residual(p) for p in files]
    report = rst_mod.dsp(residuals, args.head_params)
    d = report.as_dict()
    for entry, p in zip(d["tasks"], files):
        entry["file"] = str(p.relative_to(root))
    _emit(d)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    cases = gradcheck_suite(batches=args.batches, seed=args.seed, tolerance=args.tolerance)
    worst = max(c.max_rel_err for c in cases)
    for c in cases:
        print(f"{c.name:22s} max rel err {c.max_rel_err:.3e} ({c.worst})", file=sys.stderr)
    _emit(
        {
            "max_rel_err": worst,
            "tolerance": args.tolerance,
            "passed": all(c.passed for c in cases),
            "cases": [asdict(c) for c in cases],
        }
    )
    return EXIT_OK if all(c.passed for c in cases) else EXIT_NUMERIC


def cmd_report(args) -> int:
    root = Path(args.runs)
    if not root.is_dir():
        raise UsageError(f"{root} is not a directory")
    results = []
    for p in sorted(root.rglob("results.jsonl")):
        results.extend(bench.read_results_jsonl(p))
    if not results:
        raise UsageError(f"no results.jsonl under {root}")
    results.sort(key=lambda r: (r.digest, r.seed))
    if args.format == "jsonl":
        for r in results:
            sys.stdout.write(json.dumps(bench._sanitize(r.to_record()), sort_keys=True) + "\n")
    else:
        sys.stdout.write(",".join(bench.RESULT_COLUMNS) + "\n")
        for r in results:
            rec = r.to_record()
            sys.stdout.write(",".join(bench._csv_value(rec[k]) for k in bench.RESULT_COLUMNS) + "\n")
    return EXIT_OK


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(
        prog="uda-forge",
        description="Cross-modal distillation for domain adaptation with sparse residual deployment.",
        epilog="exit codes: 0 ok, 1 validation error, 2 numeric failure. "
        "UDA_FORGE_THREADS caps the experiment harness parallelism.",
    )
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("gen-data", help="generate a synthetic source/target task")
    s.add_argument("--spec", required=True, help="JSON task spec (or full experiment config)")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_gen_data)

    s = sub.add_parser("train", help="train a configured method and write snapshots and results")
    s.add_argument("--config", required=True)
    s.add_argument("--seed", type=int, default=None, help="single seed (default: every seed in the config)")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("rst-pack", help="extract a sparse residual file from base and tuned weights")
    s.add_argument("--base", required=True)
    s.add_argument("--tuned", required=True)
    s.add_argument("--tau", type=float, default=None, help="reset drifts <= tau before extraction")
    s.add_argument("--include-head", action="store_true", help="threshold head tensors too")
    s.add_argument("--dtype", choices=("f64", "f32"), default="f64", help="value payload (f32 is lossy)")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_rst_pack)

    s = sub.add_parser("rst-apply", help="rebuild task weights from base weights and a residual")
    s.add_argument("--base", required=True)
    s.add_argument("--residual", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_rst_apply)

    s = sub.add_parser("dsp", help="sum downstream parameters over residual files")
    s.add_argument("--runs", required=True)
    s.add_argument("--head-params", type=int, default=None, help="head size per task (default: from residual)")
    s.set_defaults(func=cmd_dsp)

    s = sub.add_parser("gradcheck", help="finite-difference check of every loss term")
    s.add_argument("--batches", type=int, default=20)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--tolerance", type=float, default=1e-4)
    s.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("report", help="merge results.jsonl files under a directory")
    s.add_argument("--runs", required=True)
    s.add_argument("--format", choices=("csv", "jsonl"), default="csv")
    s.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_INVALID
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except rst_mod.ChecksumError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (UdaForgeError, ValueError, KeyError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
