"""graphpit command line.

Exit codes: 0 success, 1 usage or configuration error, 2 numerical failure
(non-finite loss, gradient check breach).
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import harness
from .checkpoint import CheckpointError
from .config import ConfigError, load_config
from .tensor import NumericalError, ShapeError

EXIT_OK, EXIT_USAGE, EXIT_NUMERICAL = 0, 1, 2
GRADCHECK_TOL = 1e-3


def _err(msg: str) -> None:
    print(f"error: {msg}", file=sys.stderr)


def _log(msg: str) -> None:
    print(msg, file=sys.stderr, flush=True)


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    out = Path(args.out or cfg.out_dir)
    try:
        res = harness.train(cfg, out_dir=out, log=_log)
    except harness.TrainingAborted as exc:
        _err(str(exc))
        return EXIT_NUMERICAL
    print(json.dumps({"checkpoint": str(res.checkpoints[-1]), "metrics": str(res.log_path),
                      "dataset_hash": res.dataset_hash, "wall_time": round(res.wall_time, 3)}))
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = load_config(args.config)
    model = harness.load_checkpoint(args.ckpt, cfg)
    report = harness.evaluate(model, cfg, harness.eval_dataset(cfg), seed=args.seed,
                              shuffled=args.shuffled)
    print(json.dumps(report, sort_keys=True))
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = load_config(args.config)
    try:
        result = harness.ablate(cfg, out_dir=args.out, log=_log)
    except harness.TrainingAborted as exc:
        _err(str(exc))
        return EXIT_NUMERICAL
    hashes = {r.dataset_hash for r in result.runs}
    print(f"dataset hash: {', '.join(sorted(hashes))}")
    print(result.table())
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    cfg = load_config(args.config) if args.config else None
    seed = cfg.seed if cfg is not None else args.seed
    errors = harness.gradcheck(seed=seed)
    worst = 0.0
    for group, err in errors.items():
        status = "ok" if err < GRADCHECK_TOL else "FAIL"
        print(f"{group:<12} max rel err {err:.3e}  {status}")
        worst = max(worst, err)
    return EXIT_OK if worst < GRADCHECK_TOL else EXIT_NUMERICAL


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="graphpit", description="Graph-conditioned part-layout prior")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train one model and write checkpoints + metrics log")
    t.add_argument("--config", required=True)
    t.add_argument("--out", help="output directory (default: config out_dir)")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="edge-accuracy and held-out losses of a checkpoint")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--config", required=True)
    e.add_argument("--seed", type=int, default=0, help="sampling seed")
    e.add_argument("--shuffled", action="store_true",
                   help="also score samples drawn under mismatched graphs")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", help="full / w/o Laplacian / w/o EdgeLoss comparison")
    a.add_argument("--config", required=True)
    a.add_argument("--out", help="output directory (default: config out_dir)")
    a.set_defaults(func=cmd_ablate)

    g = sub.add_parser("gradcheck", help="finite-difference check on a tiny model")
    g.add_argument("--config", help="only the seed is read from it")
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_gradcheck)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    try:
        return args.func(args)
    except (ConfigError, CheckpointError, ShapeError, FileNotFoundError) as exc:
        _err(str(exc))
        return EXIT_USAGE
    except NumericalError as exc:
        _err(str(exc))
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
