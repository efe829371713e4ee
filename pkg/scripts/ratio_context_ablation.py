"""HINT under both importance-ratio contexts: hint-free prompt vs sampling prompt.

    python scripts/ratio_context_ablation.py --config configs/desk.yaml --seeds 0-4
"""

from __future__ import annotations

import argparse
import dataclasses
from pathlib import Path

from hintlab import harness
from hintlab.cli import _parse_seeds


def main() -> None:
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--config", default="configs/desk.yaml")
    p.add_argument("--seeds", type=_parse_seeds, default=[0, 1, 2, 3, 4])
    p.add_argument("--out", default="runs/ratio_context")
    args = p.parse_args()

    base = harness.load_config(args.config)
    dirs = []
    for ratio_context in ("decoupled", "literal_qstar"):
        trainer = dataclasses.replace(base.trainer, ratio_context=ratio_context)
        cfg = dataclasses.replace(base, trainer=trainer)
        dirs.append(harness.run(cfg, "hint", args.seeds, Path(args.out) / ratio_context,
                                workers=harness.env_workers()))
    print(harness.format_comparison(harness.compare(dirs)), end="")


if __name__ == "__main__":
    main()
