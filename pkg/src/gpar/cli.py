"""Command-line front end.

Verbs: train, predict, sample, synth, benchmark, verify. Every command
is deterministic given its full flag set including ``--seed``; reports
are JSON-first (sorted keys) with wall-clock measurements isolated
under a ``"timing"`` key, which is the only non-reproducible content.

Exit codes: 0 success, 1 verification checks failed, 2 configuration or
parse errors, 3 data errors (including closed-downwards violations),
4 numerical failures.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time

import numpy as np

from . import __version__, model as model_mod, oracle
from .benchmarks import DEFAULT_VARIANTS, run_benchmark
from .data import (checksum_file, is_closed_downwards, load_csv,
                   OutputOrdering, save_csv)
from .errors import (DataError, GparError, ModelFormatError, NumericalError,
                     SpecError)
from .kernels import LAYER_SPEC_BUILDERS, layer_specs_for_variant
from .model import TrainOptions
from .oracle import GridFunction, OperatorA, theorem1_trials, \
    verify_fixed_point, verify_linear_series
from .synth import SynthConfig, generate

EXIT_CHECK_FAILED = 1
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERICAL = 4


def _write_report(report: dict, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _base_report(args, seed) -> dict:
    return {"tool_version": __version__, "seed": seed,
            "command": args.command, "fingerprints": {}, "timing": {}}


def _csv_float(value: float) -> str:
    return repr(float(value))


def _split_names(text: str) -> list[str]:
    names = [part.strip() for part in text.split(",") if part.strip()]
    if not names:
        raise SpecError(f"no column names in {text!r}")
    return names


def _parse_ordering(text: str | None, m: int) -> OutputOrdering:
    if text is None:
        return OutputOrdering.identity(m)
    try:
        perm = tuple(int(p) for p in text.split(","))
    except ValueError:
        raise SpecError(f"ordering must be comma-separated integers, "
                        f"got {text!r}") from None
    try:
        return OutputOrdering(perm)
    except DataError as err:
        raise SpecError(str(err)) from None


def _load_specs(args, n_inputs, n_outputs) -> list[dict]:
    if (args.kernels is None) == (args.variant is None):
        raise SpecError("give exactly one of --kernels or --variant")
    if args.variant is not None:
        return layer_specs_for_variant(args.variant, n_inputs, n_outputs,
                                       base=args.base)
    try:
        with open(args.kernels, encoding="utf-8") as fh:
            doc = json.load(fh)
    except OSError as err:
        raise SpecError(f"cannot read kernel specs: {err}") from None
    except json.JSONDecodeError as err:
        raise SpecError(f"{args.kernels}: invalid JSON: {err}") from None
    layers = doc.get("layers") if isinstance(doc, dict) else None
    if not isinstance(layers, list) or len(layers) != n_outputs:
        raise SpecError(f"{args.kernels}: expected an object with a "
                        f"'layers' list of {n_outputs} kernel specs")
    return layers


# ---------------------------------------------------------------------------
# Commands


def _cmd_train(args) -> int:
    ds = load_csv(args.data, _split_names(args.inputs),
                  _split_names(args.outputs))
    ordering = _parse_ordering(args.ordering, ds.n_outputs)
    specs = _load_specs(args, ds.n_inputs, ds.n_outputs)
    options = TrainOptions(restarts=args.restarts, budget=args.budget,
                           seed=args.seed,
                           repair=args.repair_closed_downwards)
    trainer = model_mod.train_denoising if args.denoising else model_mod.train
    start = time.perf_counter()
    model = trainer(ds, ordering=ordering, specs=specs, options=options)
    seconds = time.perf_counter() - start
    model_mod.save(model, args.model)

    report = _base_report(args, args.seed)
    report["fingerprints"]["data"] = checksum_file(args.data)
    if args.kernels:
        report["fingerprints"]["kernels"] = checksum_file(args.kernels)
    report["data"] = args.data
    report["model_path"] = args.model
    report["ordering"] = list(ordering.perm)
    report["denoising"] = bool(args.denoising)
    report["restarts"] = args.restarts
    report["budget"] = args.budget
    report["layers"] = [
        {"position": layer.position,
         "output": model.output_names[layer.output],
         "lml": layer.lml,
         "noise_variance": layer.noise_variance,
         "kernel_params": layer.kernel.params()}
        for layer in model.layers
    ]
    report["total_lml"] = model.total_lml()
    report["timing"]["train_seconds"] = seconds
    if args.report:
        _write_report(report, args.report)
    print(f"trained {len(model.layers)} layers; total log evidence "
          f"{report['total_lml']:.4f}; model written to {args.model}")
    return 0


def _load_test_inputs(args, model):
    inputs = _split_names(args.inputs) if args.inputs else \
        list(model.input_names)
    known = None
    if args.outputs:
        ds = load_csv(args.data, inputs, _split_names(args.outputs),
                      require_observed=False)
        if ds.output_names != model.output_names:
            raise DataError(
                f"--outputs {list(ds.output_names)} must match the model's "
                f"outputs {list(model.output_names)} (order included)")
        known = (ds.y, ds.mask)
        xs = ds.x
    else:
        ds = load_csv(args.data, inputs, [], require_observed=False)
        xs = ds.x
    return xs, known


def _cmd_predict(args) -> int:
    model = model_mod.load(args.model)
    xs, known = _load_test_inputs(args, model)
    if args.mode == "plugin":
        pred = model_mod.predict_plugin(model, xs, known_outputs=known)
    else:
        pred = model_mod.predict_mc(model, xs, args.mc_samples,
                                    seed=args.seed, known_outputs=known)
    with open(args.out, "w", encoding="utf-8") as fh:
        cols = list(model.input_names)
        fh.write(",".join(["row"] + cols
                          + ["output", "mean", "variance_latent",
                             "variance_noisy"]) + "\n")
        for r in range(xs.shape[0]):
            xvals = [_csv_float(v) for v in xs[r]]
            for c, name in enumerate(model.output_names):
                fh.write(",".join(
                    [str(r)] + xvals
                    + [name, _csv_float(pred.mean[r, c]),
                       _csv_float(pred.latent_var[r, c]),
                       _csv_float(pred.noisy_var[r, c])]) + "\n")
    print(f"wrote {xs.shape[0]} x {len(model.output_names)} predictions "
          f"({pred.mode}) to {args.out}")
    return 0


def _cmd_sample(args) -> int:
    if args.samples < 1:
        raise SpecError(f"--samples must be >= 1, got {args.samples}")
    model = model_mod.load(args.model)
    xs, known = _load_test_inputs(args, model)
    pred = model_mod.predict_mc(model, xs, args.samples, seed=args.seed,
                                known_outputs=known)
    with open(args.out, "w", encoding="utf-8") as fh:
        cols = list(model.input_names)
        fh.write(",".join(["row"] + cols + ["output", "sample", "value"])
                 + "\n")
        for r in range(xs.shape[0]):
            xvals = [_csv_float(v) for v in xs[r]]
            for c, name in enumerate(model.output_names):
                for s in range(args.samples):
                    fh.write(",".join(
                        [str(r)] + xvals
                        + [name, str(s),
                           _csv_float(pred.samples[s, r, c])]) + "\n")
    print(f"wrote {args.samples} samples at {xs.shape[0]} points "
          f"to {args.out}")
    return 0


def _cmd_synth(args) -> int:
    cfg = SynthConfig(task=args.task, n=args.n, lo=args.range[0],
                      hi=args.range[1], seed=args.seed,
                      theta=tuple(args.theta))
    ds, truth = generate(cfg)
    save_csv(ds, args.out_data)
    save_csv(truth, args.out_truth)
    print(f"wrote {ds.n} rows to {args.out_data} (+ truth to "
          f"{args.out_truth})")
    return 0


def _cmd_benchmark(args) -> int:
    options = TrainOptions(restarts=args.restarts, budget=args.budget,
                           seed=args.seed)
    start = time.perf_counter()
    result = run_benchmark(args.task, args.data_dir, variant=args.variant,
                           denoising=args.denoising,
                           log_transform=args.log_transform,
                           options=options, mc_samples=args.mc_samples)
    seconds = time.perf_counter() - start
    report = _base_report(args, args.seed)
    report["fingerprints"]["data"] = result.pop("file_checksum")
    report.update(result)
    # wall times live under timing only
    for label, scores in report["models"].items():
        report["timing"][f"{label}_train_seconds"] = \
            scores.pop("train_seconds")
    report["timing"]["total_seconds"] = seconds
    if args.report:
        _write_report(report, args.report)

    print(f"benchmark {args.task} ({report['variant']}"
          f"{', denoising' if args.denoising else ''})")
    for label, scores in report["models"].items():
        agg = " ".join(f"{k}={v:.4f}" for k, v in
                       sorted(scores["aggregate"].items()))
        tt = report["timing"][f"{label}_train_seconds"]
        print(f"  {label:>12s}: {agg}  (train {tt:.1f}s)")
    return 0


def _cmd_verify(args) -> int:
    rng = np.random.default_rng(args.seed)
    report = _base_report(args, args.seed)
    checks = []

    t_checks = theorem1_trials(args.trials_theorem, seed=args.seed)
    worst = max(max(c.mean_diff, c.var_diff) for c in t_checks)
    checks.append(("conditional-independence",
                   worst, 1e-10, worst <= 1e-10))

    worst_fp = 0.0
    for t in range(args.trials_operators):
        m = int(rng.integers(2, 6))
        g = int(rng.integers(4, 17))
        a = OperatorA.random_nonlinear(m, g, seed=args.seed * 7919 + t)
        u = GridFunction(np.linspace(0.0, 1.0, g),
                         rng.standard_normal((g, m)))
        worst_fp = max(worst_fp, verify_fixed_point(a, u))
    checks.append(("fixed-point", worst_fp, 1e-10, worst_fp <= 1e-10))

    worst_lin = 0.0
    for t in range(args.trials_operators):
        m = int(rng.integers(2, 6))
        g = int(rng.integers(4, 17))
        a = OperatorA.random_linear(m, g, seed=args.seed * 104729 + t)
        u = GridFunction(np.linspace(0.0, 1.0, g),
                         rng.standard_normal((g, m)))
        worst_lin = max(worst_lin, verify_linear_series(a, u))
    checks.append(("linear-series", worst_lin, 1e-10, worst_lin <= 1e-10))

    a_bad = OperatorA.random_nonlinear(4, 8, seed=args.seed,
                                       break_triangularity=True)
    u = GridFunction(np.linspace(0.0, 1.0, 8),
                     np.random.default_rng(args.seed).standard_normal((8, 4)))
    residual = verify_fixed_point(a_bad, u)
    checks.append(("negative-control (non-triangular)",
                   residual, "> 1e-3", residual > 1e-3))

    report["checks"] = [
        {"name": name, "residual": value, "threshold": str(threshold),
         "passed": bool(passed)}
        for name, value, threshold, passed in checks
    ]
    all_green = all(c["passed"] for c in report["checks"])
    report["passed"] = all_green
    if args.report:
        _write_report(report, args.report)
    for c in report["checks"]:
        state = "PASS" if c["passed"] else "FAIL"
        print(f"[{state}] {c['name']}: residual {c['residual']:.3e} "
              f"(threshold {c['threshold']})")
    return 0 if all_green else EXIT_CHECK_FAILED


# ---------------------------------------------------------------------------
# Argument parsing


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="gpar",
        description="Multi-output GP regression via autoregressive chaining")
    parser.add_argument("--version", action="version",
                        version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p, seed=True):
        if seed:
            p.add_argument("--seed", type=int, default=0)
        p.add_argument("--threads", type=int,
                       default=int(os.environ.get("GPAR_THREADS", "1")),
                       help="cap on internal parallelism (computation is "
                            "currently single-threaded)")

    p = sub.add_parser("train", help="fit a chained model to a CSV dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--inputs", required=True,
                   help="comma-separated input column names")
    p.add_argument("--outputs", required=True,
                   help="comma-separated output column names, in model order")
    p.add_argument("--ordering", default=None,
                   help="permutation of output positions, e.g. 2,0,1")
    p.add_argument("--variant", choices=sorted(LAYER_SPEC_BUILDERS),
                   default=None)
    p.add_argument("--base", choices=["eq", "rq"], default="eq",
                   help="leaf kernel used by --variant")
    p.add_argument("--kernels", default=None,
                   help="JSON file with a 'layers' list of kernel specs")
    p.add_argument("--repair-closed-downwards", action="store_true",
                   help="drop observations breaking the closed-downwards "
                        "pattern instead of failing")
    p.add_argument("--denoising", action="store_true")
    p.add_argument("--restarts", type=int, default=5)
    p.add_argument("--budget", type=int, default=200)
    p.add_argument("--model", required=True, help="output model path")
    p.add_argument("--report", default=None, help="output report JSON path")
    add_common(p)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("predict", help="predict at test inputs from a CSV")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--inputs", default=None,
                   help="input columns (default: the model's)")
    p.add_argument("--outputs", default=None,
                   help="output columns holding known values at test rows")
    p.add_argument("--mode", choices=["plugin", "mc"], default="plugin")
    p.add_argument("--mc-samples", type=int, default=200)
    p.add_argument("--out", required=True)
    add_common(p)
    p.set_defaults(func=_cmd_predict)

    p = sub.add_parser("sample", help="draw joint posterior samples")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--inputs", default=None)
    p.add_argument("--outputs", default=None)
    p.add_argument("--samples", type=int, required=True)
    p.add_argument("--out", required=True)
    add_common(p)
    p.set_defaults(func=_cmd_sample)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--task",
                   choices=["functional", "noise1", "noise2", "noise3"],
                   required=True)
    p.add_argument("--n", type=int, default=40)
    p.add_argument("--range", type=float, nargs=2, default=[0.0, 1.0],
                   metavar=("LO", "HI"))
    p.add_argument("--theta", type=float, nargs=4,
                   default=[1.0, 5.0, 1.0, 3.0])
    p.add_argument("--out-data", required=True)
    p.add_argument("--out-truth", required=True)
    add_common(p)
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("benchmark", help="run a documented benchmark protocol")
    p.add_argument("--task", choices=sorted(DEFAULT_VARIANTS), required=True)
    p.add_argument("--data-dir", required=True)
    p.add_argument("--variant", choices=sorted(LAYER_SPEC_BUILDERS),
                   default=None, help="default depends on the task")
    p.add_argument("--denoising", action="store_true")
    p.add_argument("--log-transform", action="store_true")
    p.add_argument("--restarts", type=int, default=5)
    p.add_argument("--budget", type=int, default=150)
    p.add_argument("--mc-samples", type=int, default=200)
    p.add_argument("--report", default=None)
    add_common(p)
    p.set_defaults(func=_cmd_benchmark)

    p = sub.add_parser("verify", help="run the numerical verification suites")
    p.add_argument("--trials-theorem", type=int, default=50)
    p.add_argument("--trials-operators", type=int, default=100)
    p.add_argument("--report", default=None)
    add_common(p)
    p.set_defaults(func=_cmd_verify)

    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (SpecError, ModelFormatError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_NUMERICAL
    except GparError as err:  # anything uncategorised
        print(f"error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
