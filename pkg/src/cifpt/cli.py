"""Command-line entry point: ``cifpt <command> [options]``.

Exit codes: 0 success, 1 validation error, 2 numeric failure.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import pipeline, verify
from .checkpoint import CheckpointError, average_checkpoints, load_checkpoint, save_checkpoint
from .config import ConfigError, RunConfig, from_dict, load_run_config
from .data import write_cifd, write_jsonl

EXIT_OK, EXIT_INVALID, EXIT_NUMERIC = 0, 1, 2


class NumericFailure(Exception):
    pass


def _emit(obj) -> None:
    print(json.dumps(obj, indent=2, sort_keys=True))


def _config(args) -> RunConfig:
    return load_run_config(args.config, args.set or (), args.seed)


def _out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_gen_data(args) -> int:
    cfg = _config(args)
    splits = pipeline.make_splits(cfg)
    out = _out(args)
    manifest = {"config": cfg.to_dict(), "splits": {}}
    for name in ("train", "dev", "test"):
        utts = getattr(splits, name)
        write_jsonl(out / f"{name}.jsonl", utts)
        if args.cifd:
            write_cifd(out / f"{name}.cifd", utts)
        manifest["splits"][name] = len(utts)
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    _emit(manifest["splits"])
    return EXIT_OK


def _save_final(out: Path, result, k: int) -> dict:
    final = save_checkpoint(out / "final.cifc", result.final)
    avg = save_checkpoint(out / "averaged.cifc", result.averaged(k))
    return {"final": str(final), "averaged": str(avg), "log": [r for r in result.log[-1:]]}


def cmd_pretrain(args) -> int:
    cfg = _config(args)
    splits = pipeline.make_splits(cfg, args.data)
    out = _out(args)
    _, result = pipeline.pretrain(cfg, splits.train, out)
    _emit(_save_final(out, result, cfg.pretrain.keep_checkpoints))
    return EXIT_OK


def cmd_finetune(args) -> int:
    cfg = _config(args)
    splits = pipeline.make_splits(cfg, args.data)
    out = _out(args)
    init = load_checkpoint(args.init) if args.init else None
    _, result = pipeline.finetune(cfg, splits.train, init, out)
    _emit(_save_final(out, result, cfg.finetune.keep_checkpoints))
    return EXIT_OK


def cmd_evaluate(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    cfg = from_dict(ckpt.config) if ckpt.config else RunConfig()
    if args.config or args.set:
        cfg = _config(args)
    if args.workers is not None:
        cfg.eval.workers = args.workers
    cfg.validate()
    splits = pipeline.make_splits(cfg, args.data)
    model = pipeline.model_from_checkpoint(ckpt, cfg)
    tasks = tuple(args.tasks.split(","))
    report = pipeline.evaluate(cfg, model, getattr(splits, args.split), tasks)
    report["checkpoint"] = {"path": str(args.ckpt), "step": ckpt.step, "fingerprint": ckpt.fingerprint}
    if args.out:
        out = _out(args)
        (out / f"report_{args.split}.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    _emit({k: v for k, v in report.items() if k != "config"})
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    cases = args.cases.split(",") if args.cases else None
    if cases:
        unknown = [c for c in cases if c not in verify.CASES]
        if unknown:
            raise ConfigError(f"unknown gradcheck case(s): {', '.join(unknown)}")
    seeds = range(args.seed or 0, (args.seed or 0) + args.seeds)

    def show(r):
        status = "ok" if r.passed else "FAIL"
        print(f"{status:4s} {r.name:24s} seed={r.seed} max_rel_err={r.max_error:.3e} "
              f"coords={r.coordinates} {r.seconds:.1f}s", flush=True)

    results = verify.run_suite(seeds, cases, show)
    failed = [r for r in results if not r.passed]
    summary = {"cases": len(results), "failed": len(failed),
               "max_error": max(r.max_error for r in results), "tolerance": verify.TOLERANCE}
    _emit(summary)
    if failed:
        raise NumericFailure(f"{len(failed)} gradient check(s) exceeded {verify.TOLERANCE}")
    return EXIT_OK


def cmd_avg_ckpt(args) -> int:
    ckpt = average_checkpoints(args.paths, args.k)
    path = Path(args.out)
    path.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(path, ckpt)
    _emit({"out": str(path), "step": ckpt.step, "averaged": min(args.k, len(args.paths))})
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cifpt", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_required=True):
        p.add_argument("--config", type=Path, help="YAML run configuration")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="dotted override (repeatable)")
        p.add_argument("--seed", type=int, help="override every seed in the configuration")
        p.add_argument("--out", required=out_required, help="output directory")

    p = sub.add_parser("gen-data", help="write train/dev/test splits")
    common(p)
    p.add_argument("--cifd", action="store_true", help="also write binary frame files")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("pretrain", help="CIF pre-training")
    common(p)
    p.add_argument("--data", help="directory with train/dev/test JSONL (default: generate)")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("finetune", help="SLU fine-tuning")
    common(p)
    p.add_argument("--data")
    p.add_argument("--init", help="pre-trained checkpoint")
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("evaluate", help="score a checkpoint")
    common(p, out_required=False)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data")
    p.add_argument("--split", choices=("dev", "test"), default="dev")
    p.add_argument("--tasks", default="ic,sf")
    p.add_argument("--workers", type=int, help="parallel evaluation threads")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    p.add_argument("--seeds", type=int, default=5)
    p.add_argument("--seed", type=int, help="first seed")
    p.add_argument("--cases", help="comma-separated subset of cases")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("avg-ckpt", help="average the last k checkpoints")
    p.add_argument("paths", nargs="+")
    p.add_argument("-k", type=int, default=10)
    p.add_argument("--out", required=True, help="output checkpoint path")
    p.set_defaults(func=cmd_avg_ckpt)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (NumericFailure, FloatingPointError) as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, CheckpointError, ValueError, FileNotFoundError, OSError) as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
