"""Command-line front end.

Subcommands compose through the filesystem with no hidden state:

    boostdet gen    --config cfg.json --out data/
    boostdet train  --config cfg.json --data data/ --out run/ [--resume]
    boostdet select --run run/ [--out ensemble.json]
    boostdet infer  --ensemble run/ensemble.json --images data/test --out dets.json
    boostdet eval   --detections dets.json --annotations anns.json --out report/

Exit codes: 0 success, 1 user error (bad config / missing input), 2 internal
error. Progress logs are JSON lines on stderr. BOOSTDET_THREADS caps the
numeric thread count (default 1, which also makes runs bit-reproducible).
"""
from __future__ import annotations

import argparse
import json
import os
import sys
import traceback

EXIT_OK = 0
EXIT_USER = 1
EXIT_INTERNAL = 2


class UserError(Exception):
    """Problem the user can fix: bad flags, missing files, invalid config."""


def _setup_threads() -> None:
    threads = os.environ.get("BOOSTDET_THREADS", "1")
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(var, threads)


def log_event(event: str, **fields) -> None:
    print(json.dumps({"event": event, **fields}, sort_keys=True), file=sys.stderr)


def _load_config(path, seed_override):
    from .config import ConfigError, RunConfig, load_config
    import dataclasses

    try:
        cfg = load_config(path) if path else RunConfig()
    except FileNotFoundError as exc:
        raise UserError(str(exc)) from exc
    except ConfigError as exc:
        raise UserError(f"config error: {exc}") from exc
    if seed_override is not None:
        cfg = dataclasses.replace(cfg, seed=seed_override)
    return cfg


def cmd_gen(args) -> int:
    from .pipeline import write_dataset

    cfg = _load_config(args.config, args.seed)
    manifest = write_dataset(cfg, args.out)
    log_event("dataset_written", manifest=str(manifest))
    return EXIT_OK


def cmd_train(args) -> int:
    from .pipeline import train_run

    cfg = _load_config(args.config, args.seed)
    if not os.path.exists(os.path.join(args.data, "manifest.json")):
        raise UserError(f"{args.data}: no dataset manifest found")
    records = train_run(cfg, args.data, args.out, resume=args.resume)
    for r in records:
        log_event(
            "iteration_done",
            iteration=r.iteration,
            stage=r.stage,
            error_rate=r.error_rate,
            alpha=r.alpha,
            val_map=r.val_map,
        )
    return EXIT_OK


def cmd_select(args) -> int:
    from .pipeline import select_run

    if not os.path.exists(os.path.join(args.run, "run.json")):
        raise UserError(f"{args.run}: not a run directory")
    try:
        out = select_run(args.run, args.out)
    except ValueError as exc:
        raise UserError(str(exc)) from exc
    log_event("ensemble_selected", manifest=str(out))
    return EXIT_OK


def cmd_infer(args) -> int:
    from .pipeline import infer_run

    if not os.path.exists(args.ensemble):
        raise UserError(f"{args.ensemble}: no such ensemble manifest")
    if not os.path.isdir(args.images):
        raise UserError(f"{args.images}: not a directory")
    out = infer_run(args.ensemble, args.images, args.out)
    log_event("inference_done", detections=str(out))
    return EXIT_OK


def cmd_eval(args) -> int:
    from .pipeline import eval_run

    cfg = _load_config(args.config, None) if args.config else None
    for p in (args.detections, args.annotations):
        if not os.path.exists(p):
            raise UserError(f"{p}: no such file")
    doc = eval_run(args.detections, args.annotations, args.out, cfg)
    log_event("eval_done", map=doc["map"], report_dir=args.out)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="boostdet", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic dataset")
    p.add_argument("--config", help="run config JSON (defaults apply if omitted)")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--out", required=True, help="dataset output directory")
    p.set_defaults(fn=cmd_gen)

    p = sub.add_parser("train", help="run the boosted training loop")
    p.add_argument("--config", help="run config JSON")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--data", required=True, help="dataset directory from gen")
    p.add_argument("--out", required=True, help="run output directory")
    p.add_argument("--resume", action="store_true",
                   help="continue from the last completed iteration")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("select", help="pick the diverse ensemble from a run")
    p.add_argument("--run", required=True, help="run directory from train")
    p.add_argument("--out", help="manifest path (default: <run>/ensemble.json)")
    p.set_defaults(fn=cmd_select)

    p = sub.add_parser("infer", help="fused ensemble inference over PGM images")
    p.add_argument("--ensemble", required=True, help="ensemble manifest JSON")
    p.add_argument("--images", required=True, help="directory of .pgm images")
    p.add_argument("--out", required=True, help="detections JSON output path")
    p.set_defaults(fn=cmd_infer)

    p = sub.add_parser("eval", help="score detections and emit reports")
    p.add_argument("--detections", required=True, help="detections JSON")
    p.add_argument("--annotations", required=True, help="annotations JSON")
    p.add_argument("--config", help="run config JSON (for thresholds + digest)")
    p.add_argument("--out", required=True, help="report output directory")
    p.set_defaults(fn=cmd_eval)
    return parser


def main(argv=None) -> int:
    _setup_threads()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except UserError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USER
    except Exception:
        traceback.print_exc()
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
