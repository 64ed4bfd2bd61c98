"""Command-line entry point: ``surgmamba <command> ...``.

Every command exits 0 on success. On failure it exits nonzero and writes a
single JSON object to stderr, ``{"command": ..., "status": "fail", "failures": [...]}``.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path

import torch

from .io import FormatError, coerce_dataclass, load_model, read_features, read_kv, save_model
from .model import ModelConfig
from .ssm import ContractError

log = logging.getLogger("surgmamba")

EXIT_FAIL = 1  # a check ran and did not pass
EXIT_ERROR = 2  # bad input, unreadable file, contract violation


class CommandFailed(Exception):
    def __init__(self, failures: list[dict], code: int = EXIT_FAIL):
        super().__init__(failures)
        self.failures = failures
        self.code = code


def _write_rows(path: Path, rows: list[dict]) -> Path:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    return path


def split_config(values: dict[str, str]):
    """Route flat ``key = value`` pairs to the model and training configs."""
    from .train import TrainConfig

    model_keys = {f.name for f in fields(ModelConfig)}
    train_keys = {f.name for f in fields(TrainConfig)}
    unknown = sorted(set(values) - model_keys - train_keys)
    if unknown:
        raise FormatError(f"unknown config keys: {', '.join(unknown)}")
    model_cfg = coerce_dataclass(ModelConfig, {k: v for k, v in values.items() if k in model_keys})
    train_cfg = coerce_dataclass(TrainConfig, {k: v for k, v in values.items() if k in train_keys})
    return model_cfg, train_cfg


# --- commands -----------------------------------------------------------------

def cmd_gen_data(args) -> dict:
    from .data import SyntheticConfig, gen_synthetic, nearest_mean_accuracy, save_dataset

    values = read_kv(args.config) if args.config else {}
    cfg = coerce_dataclass(SyntheticConfig, values)
    train, test, means = gen_synthetic(cfg)
    save_dataset(args.out, cfg, train, test)
    return {"train": len(train), "test": len(test), "nearest_mean_acc": nearest_mean_accuracy(test, means)}


def cmd_train(args) -> dict:
    from .data import load_split
    from .plotting import training_figure
    from .train import train

    model_cfg, train_cfg = split_config(read_kv(args.config) if args.config else {})
    train_videos = load_split(args.data, "train")
    test_dir = Path(args.data) / "test"
    test_videos = load_split(args.data, "test") if test_dir.is_dir() else []
    model_cfg.d_feature = train_videos[0].features.shape[1]
    model_cfg.n_classes = train_videos[0].n_classes

    result = train(model_cfg, train_cfg, train_videos, test_videos)
    ckpt = Path(args.out)
    ckpt.parent.mkdir(parents=True, exist_ok=True)
    save_model(ckpt, result.model)
    metrics_csv = _write_rows(ckpt.with_suffix(".metrics.csv"), result.history)
    training_figure(result.history, ckpt.with_suffix(".metrics.png"))
    return {"checkpoint": str(ckpt), "metrics": str(metrics_csv), "final": result.final}


def cmd_infer(args) -> dict:
    from .stream import StreamEngine, trace_export

    model, _ = load_model(args.ckpt, torch.float64 if args.precision == "double" else torch.float32)
    clip = read_features(args.input)
    if clip.features.shape[1] != model.cfg.d_feature:
        raise ContractError(f"input has {clip.features.shape[1]} features, model expects {model.cfg.d_feature}")
    engine = StreamEngine(model)
    paths = trace_export(engine, clip.features, args.trace, max_prior=args.max_prior,
                         state_every=args.state_every, figures=not args.no_figures)
    summary = {"frames": clip.T, "files": {k: str(v) for k, v in paths.items()}}
    if clip.labels is not None:
        import numpy as np

        preds = np.loadtxt(paths["frames"], delimiter=",", skiprows=1, usecols=1, ndmin=1).astype(int)
        summary["acc"] = float(100.0 * (preds == clip.labels).mean())
    return summary


def cmd_verify(args) -> dict:
    from .verify import run_suite

    results = run_suite(seeds=args.seeds, precision=args.precision)
    for r in results:
        print(r.line(), flush=True)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        _write_rows(out / "verify.csv", [
            {"check": r.name, "passed": int(r.passed), "value": r.value, "tolerance": r.tolerance,
             "seconds": r.seconds} for r in results
        ])
    failed = [{"check": r.name, "value": r.value, "tolerance": r.tolerance, **_jsonable(r.detail)}
              for r in results if not r.passed]
    if failed:
        raise CommandFailed(failed)
    return {"checks": len(results)}


def bench_verdict(report, latency_tol: float = 0.2) -> list[dict]:
    """Constant-cost criteria: flat latency, slope CI covering zero, fixed state size."""
    failures = []
    first, last = report.median_latency_s[0], report.median_latency_s[-1]
    ratio = last / first
    if abs(ratio - 1) > latency_tol:
        failures.append({"check": "latency_ratio", "value": ratio, "tolerance": latency_tol})
    lo, hi = report.slope_ci95
    if not lo <= 0.0 <= hi:
        failures.append({"check": "latency_slope", "value": report.slope_s_per_frame, "ci95": [lo, hi]})
    if len(set(report.state_bytes)) != 1:
        failures.append({"check": "state_bytes", "value": report.state_bytes})
    return failures


def cmd_bench(args) -> dict:
    from .plotting import bench_figure
    from .stream import StreamEngine, bench

    torch.set_num_threads(1)
    model, _ = load_model(args.ckpt, torch.float32)
    points = [p for p in (100, 1000, 10000, 100000) if p + 100 <= args.frames]
    if len(points) < 2:
        raise ContractError("--frames must be at least 1100 to compare two report points")
    report = bench(StreamEngine(model), args.frames, points, seed=args.seed)
    out = Path(args.out) if args.out else Path(args.ckpt).with_suffix(".bench")
    out.mkdir(parents=True, exist_ok=True)
    _write_rows(out / "bench.csv", report.rows())
    bench_figure(report, out / "bench.png")
    for row in report.rows():
        print(f"frame {row['frame']:>6}: {1e3 * row['median_latency_s']:.3f} ms, {row['state_bytes']} state bytes")
    print(f"slope {report.slope_s_per_frame:.3e} s/frame, 95% CI {report.slope_ci95}")
    failures = bench_verdict(report)
    if failures:
        raise CommandFailed(failures)
    return {"out": str(out), "median_latency_s": report.median_latency_s}


def cmd_grad_check(args) -> dict:
    from .train import grad_check, tiny_gradcheck_setup

    model, loss_fn = tiny_gradcheck_setup(seed=args.seed)
    rep = grad_check(model, loss_fn, eps=args.eps, per_tensor=args.per_tensor, seed=args.seed)
    for g, v in rep.per_group.items():
        print(f"{g:>10}: {v:.3e}")
    print(f"max relative error {rep.max_rel_error:.3e} over {rep.checked} entries")
    if rep.max_rel_error >= args.tol:
        worst = sorted(rep.per_param.items(), key=lambda kv: -kv[1])[:5]
        raise CommandFailed([{"check": "grad_check", "value": rep.max_rel_error, "tolerance": args.tol,
                              "worst": dict(worst)}])
    return {"max_rel_error": rep.max_rel_error, "checked": rep.checked}


def _jsonable(d: dict) -> dict:
    return json.loads(json.dumps(d, default=str))


# --- parser -------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="surgmamba", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("gen-data", help="write a synthetic train/test feature corpus")
    s.add_argument("--config", help="key = value file of generator settings")
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_gen_data)

    s = sub.add_parser("train", help="train a model and write a checkpoint")
    s.add_argument("--config", help="key = value file of model and training settings")
    s.add_argument("--data", required=True, help="directory holding train/ and test/")
    s.add_argument("--out", required=True, help="checkpoint path")
    s.set_defaults(fn=cmd_train)

    s = sub.add_parser("infer", help="stream one feature file and export traces")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--input", required=True)
    s.add_argument("--trace", required=True, help="output directory")
    s.add_argument("--max-prior", type=int, default=None, help="limit plane-cosine pairs per chunk")
    s.add_argument("--state-every", type=int, default=0, help="dump slow state every n frames")
    s.add_argument("--precision", choices=("single", "double"), default="single")
    s.add_argument("--no-figures", action="store_true")
    s.set_defaults(fn=cmd_infer)

    s = sub.add_parser("verify", help="randomized algebraic checks")
    s.add_argument("--seeds", type=int, default=100)
    s.add_argument("--precision", choices=("single", "double"), default="double")
    s.add_argument("--out", help="directory for verify.csv")
    s.set_defaults(fn=cmd_verify)

    s = sub.add_parser("bench", help="per-frame streaming latency and state size")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--frames", type=int, default=20000)
    s.add_argument("--out", help="output directory (default: next to the checkpoint)")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(fn=cmd_bench)

    s = sub.add_parser("grad-check", help="finite-difference check of the full model")
    s.add_argument("--eps", type=float, default=1e-5)
    s.add_argument("--per-tensor", type=int, default=6)
    s.add_argument("--tol", type=float, default=1e-4)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(fn=cmd_grad_check)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        summary = args.fn(args)
    except CommandFailed as exc:
        print(json.dumps({"command": args.command, "status": "fail", "failures": exc.failures},
                         default=str), file=sys.stderr)
        return exc.code
    except (ContractError, FormatError, FileNotFoundError, OSError, ValueError) as exc:
        print(json.dumps({"command": args.command, "status": "error",
                          "failures": [{"error": type(exc).__name__, "message": str(exc)}]}), file=sys.stderr)
        return EXIT_ERROR
    print(json.dumps({"command": args.command, "status": "ok", **_jsonable(summary)}))
    return 0


if __name__ == "__main__":
    sys.exit(main())
