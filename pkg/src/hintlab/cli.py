"""Command-line entry point: ``hintlab {train,eval,metrics,compare}``.

Environment:
  HINTLAB_OUTPUT_ROOT  directory under which relative ``--out`` paths are created
  HINTLAB_THREADS      number of seeds trained in parallel (default 1)
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import harness
from . import metrics as M
from . import policy as pol
from .errors import ConfigError, DivergenceError, InputError
from .tasks import load_tasks, split_tasks

log = logging.getLogger("hintlab")


def _parse_seeds(text: str) -> list[int]:
    """``0,1,2`` or ``0-4`` (inclusive) or a mix such as ``0-2,7``."""
    seeds: list[int] = []
    try:
        for part in text.split(","):
            part = part.strip()
            if not part:
                continue
            if "-" in part:
                lo, hi = part.split("-", 1)
                seeds.extend(range(int(lo), int(hi) + 1))
            else:
                seeds.append(int(part))
    except ValueError as e:
        raise argparse.ArgumentTypeError(f"bad seed list {text!r}") from e
    if not seeds:
        raise argparse.ArgumentTypeError("empty seed list")
    return seeds


def _mode(text: str) -> str:
    try:
        return harness.normalize_mode(text)
    except ConfigError as e:
        raise argparse.ArgumentTypeError(str(e)) from e


def cmd_train(args) -> int:
    cfg = harness.load_config(args.config)
    out = harness.resolve_out(args.out, args.mode)
    workers = args.workers if args.workers is not None else harness.env_workers()
    log.info("training mode=%s seeds=%s -> %s", args.mode, args.seeds, out)
    harness.run(cfg, args.mode, args.seeds, out, workers=workers)
    print((out / "summary.csv").read_text(), end="")
    return 0


def cmd_eval(args) -> int:
    params, meta = pol.load_checkpoint(args.checkpoint)
    tasks = load_tasks(args.tasks)
    if args.split != "all":
        tasks = split_tasks(tasks, args.split)
    acc = harness.evaluate(params, tasks)
    print(f"accuracy={acc:.6f} n_tasks={len(tasks)} split={args.split}")
    return 0


def cmd_metrics(args) -> int:
    records = M.metrics_from_trace(args.trace)
    lines = "".join(r.to_json() + "\n" for r in records)
    if args.out:
        Path(args.out).write_text(lines)
    else:
        sys.stdout.write(lines)
    return 0


def cmd_compare(args) -> int:
    rows = harness.compare(args.runs)
    sys.stdout.write(harness.format_comparison(rows))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hintlab", description=__doc__,
                                formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train one guidance mode over a list of seeds")
    t.add_argument("--config", required=True, help="YAML experiment config")
    t.add_argument("--mode", required=True, type=_mode,
                   help="grpo | hint | answer-prefix | inject")
    t.add_argument("--seeds", required=True, type=_parse_seeds, help="e.g. 0,1,2 or 0-4")
    t.add_argument("--out", default=None, help="run directory")
    t.add_argument("--workers", type=int, default=None, help="parallel seeds (overrides HINTLAB_THREADS)")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="greedy hint-free accuracy of a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--tasks", required=True, help="task file (tasks.jsonl)")
    e.add_argument("--split", default="test", choices=["train", "test", "all"])
    e.set_defaults(func=cmd_eval)

    m = sub.add_parser("metrics", help="recompute the per-step metrics log from a trace")
    m.add_argument("--trace", required=True)
    m.add_argument("--out", default=None, help="write here instead of stdout")
    m.set_defaults(func=cmd_metrics)

    c = sub.add_parser("compare", help="seed mean/std table across run directories")
    c.add_argument("runs", nargs="+")
    c.set_defaults(func=cmd_compare)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except DivergenceError as e:
        print(f"error: training diverged: {e}\n{e.dump}", file=sys.stderr)
        return 3
    except (ConfigError, InputError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
