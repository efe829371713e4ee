"""Run all four guidance modes on the desk config and write a comparison.

    python scripts/desk_experiment.py --config configs/desk.yaml --seeds 0-4 --out runs/desk

Outputs, under ``--out``: one run directory per mode, ``comparison.csv``,
and ``curves_<mode>.csv`` (windowed seed-mean time series, plot-ready).
"""

from __future__ import annotations

import argparse
import csv
import time
from pathlib import Path

import numpy as np

from hintlab import harness
from hintlab import metrics as M
from hintlab.cli import _parse_seeds

CURVE_FIELDS = ("mean_reward", "valid_fraction", "eur", "uc", "affinity",
                "mean_entropy", "mean_entropy_hinted", "mean_entropy_unhinted")


def write_curves(run_dir: Path, seeds, window: int, path: Path) -> None:
    per_seed = []
    for s in seeds:
        records = M.read_metrics(run_dir / f"seed_{s}" / "metrics.jsonl")
        per_seed.append(M.aggregate_records(records, window, CURVE_FIELDS))
    n = len(per_seed[0][CURVE_FIELDS[0]])
    with path.open("w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["window_end_step", *CURVE_FIELDS])
        for i in range(n):
            row = [i + window - 1]
            for k in CURVE_FIELDS:
                vals = np.array([d[k][i] for d in per_seed])
                row.append(f"{np.nanmean(vals):.6g}" if np.any(~np.isnan(vals)) else "")
            w.writerow(row)


def main() -> None:
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--config", default="configs/desk.yaml")
    p.add_argument("--seeds", type=_parse_seeds, default=[0, 1, 2, 3, 4])
    p.add_argument("--out", default="runs/desk")
    p.add_argument("--modes", nargs="+", default=list(harness.GUIDANCE_MODES))
    p.add_argument("--curve-window", type=int, default=20)
    args = p.parse_args()

    cfg = harness.load_config(args.config)
    out = Path(args.out)
    workers = harness.env_workers()
    dirs = []
    for mode in args.modes:
        t0 = time.perf_counter()
        run_dir = harness.run(cfg, mode, args.seeds, out / harness.normalize_mode(mode), workers=workers)
        write_curves(run_dir, args.seeds, args.curve_window, out / f"curves_{harness.normalize_mode(mode)}.csv")
        print(f"{mode}: {time.perf_counter() - t0:.1f}s", flush=True)
        dirs.append(run_dir)

    table = harness.format_comparison(harness.compare(dirs))
    (out / "comparison.csv").write_text(table)
    rows = list(csv.DictReader(table.splitlines()))
    cols = ["final_test_accuracy", "early_train_reward", "final_valid_fraction",
            "mean_affinity", "mean_uc", "mean_entropy_hinted", "mean_entropy_unhinted"]
    print(f"{'mode':<14}" + "".join(f"{c:>24}" for c in cols))
    for r in rows:
        cells = "".join(f"{float(r[c + '_mean']):>15.4f} ±{float(r[c + '_std']):<7.4f}" for c in cols)
        print(f"{r['mode']:<14}{cells}")


if __name__ == "__main__":
    main()
