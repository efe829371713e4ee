"""Trust-region training-quality metrics: EUR, UC and Affinity.

Every update sample carries a log-ratio ``ell`` (new vs. old policy on the
token it was sampled for) and a weight ``|A|``.  With trust region
``|ell| <= delta``:

* EUR is the weight share of samples inside the region;
* UC is the weighted population std of ``ell`` over in-region samples;
* Affinity is ``EUR * exp(-UC / tau)`` with ``tau = delta / 2``.

A batch with zero total weight carried no update; it reports EUR = 1, UC = 0
and is flagged degenerate.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import policy as pol
from .errors import ConfigError, InputError
from .policy import PolicyParams

METRICS_SCHEMA_VERSION = 1
TRACE_SCHEMA_VERSION = 1


def _arrays(samples) -> tuple[np.ndarray, np.ndarray]:
    if hasattr(samples, "ell") and hasattr(samples, "weight") and not isinstance(samples, tuple):
        return np.asarray(samples.ell, dtype=float), np.asarray(samples.weight, dtype=float)
    if isinstance(samples, tuple) and len(samples) == 2:
        return np.asarray(samples[0], dtype=float), np.asarray(samples[1], dtype=float)
    samples = list(samples)
    ell = np.array([s.ell for s in samples], dtype=float)
    w = np.array([s.weight for s in samples], dtype=float)
    return ell, w


def _check_delta(delta: float) -> None:
    if not delta > 0:
        raise ConfigError(f"delta must be > 0, got {delta}")


@dataclass(frozen=True)
class TrustRegionStats:
    eur: float
    uc: float
    affinity: float
    degenerate: bool


def trust_region_stats(samples, delta: float) -> TrustRegionStats:
    """EUR, UC and Affinity in one pass.

    ``samples`` is an UpdateBatch, an iterable of UpdateSample, or an
    ``(ell, weight)`` pair of arrays.
    """
    _check_delta(delta)
    ell, w = _arrays(samples)
    if np.any(w < 0):
        raise InputError("weights must be non-negative")
    total = w.sum()
    inside = np.abs(ell) <= delta
    if total == 0:
        return TrustRegionStats(1.0, 0.0, 1.0, True)
    # Summing over the full array with out-of-region weights zeroed keeps the
    # summation order fixed, so moving a sample out of the region can never
    # raise EUR through rounding.  The clamp absorbs the last-ulp overshoot.
    e = float(min(np.where(inside, w, 0.0).sum() / total, 1.0))
    u, empty = _weighted_std(ell[inside], w[inside])
    return TrustRegionStats(e, u, affinity(e, u, delta), empty)


def _weighted_std(ell: np.ndarray, w: np.ndarray) -> tuple[float, bool]:
    wsum = w.sum()
    if ell.size == 0 or wsum == 0:
        return 0.0, True
    if ell.size == 1 or np.all(ell == ell[0]):
        return 0.0, False
    mean = (w * ell).sum() / wsum
    var = (w * (ell - mean) ** 2).sum() / wsum
    return float(math.sqrt(max(var, 0.0))), False


def eur(samples, delta: float) -> float:
    return trust_region_stats(samples, delta).eur


def uc(samples, delta: float) -> float:
    return trust_region_stats(samples, delta).uc


def affinity(eur_val: float, uc_val: float, delta: float) -> float:
    _check_delta(delta)
    return float(eur_val * math.exp(-uc_val / (delta / 2.0)))


# --- entropy -----------------------------------------------------------------


def visited_entropies(params: PolicyParams, group) -> list[float]:
    """Policy entropy at every sampled state of a group.

    Entropy is taken under the group's policy context (the hint-free prompt
    when prompts are decoupled), at the positions that were actually sampled:
    forced answer-prefix positions are skipped.
    """
    h = pol.entropies(params, group.policy_context)
    return [float(x) for x in h[len(group.rollout_context.forced_prefix):]]


@dataclass(frozen=True)
class EntropyReport:
    mean_all: float | None
    mean_hinted: float | None
    mean_unhinted: float | None


def _mean_or_none(xs: Sequence[float]) -> float | None:
    return float(np.mean(xs)) if len(xs) else None


def entropy_report_from_values(per_group: Iterable[tuple[bool, Sequence[float]]]) -> EntropyReport:
    hinted, unhinted = [], []
    for used_hint, values in per_group:
        (hinted if used_hint else unhinted).extend(values)
    return EntropyReport(_mean_or_none(hinted + unhinted), _mean_or_none(hinted), _mean_or_none(unhinted))


def entropy_report(params: PolicyParams, groups) -> EntropyReport:
    """Mean entropy over visited states, split by whether the group was rescued.

    An empty partition is reported as ``None``, never 0.
    """
    return entropy_report_from_values((g.used_hint, visited_entropies(params, g)) for g in groups)


# --- per-step records ----------------------------------------------------------


@dataclass
class MetricsRecord:
    step: int
    eur: float
    uc: float
    affinity: float
    degenerate: bool
    mean_entropy: float | None
    mean_entropy_hinted: float | None
    mean_entropy_unhinted: float | None
    valid_fraction: float
    mean_reward: float
    stage1_valid_fraction: float
    hint_fraction: float
    clip_fraction: float
    n_samples: int

    def to_json(self) -> str:
        return json.dumps({"schema": METRICS_SCHEMA_VERSION, **asdict(self)})

    @classmethod
    def from_json(cls, line: str) -> "MetricsRecord":
        d = json.loads(line)
        if d.pop("schema", None) != METRICS_SCHEMA_VERSION:
            raise InputError("metrics record schema mismatch")
        return cls(**d)


def group_summary(params: PolicyParams, group) -> dict:
    """Rollout-trace entry for one group (entropies taken under the sampling params)."""
    return {
        "task_id": int(group.task_id),
        "used_hint": bool(group.used_hint),
        "rewards": [float(r) for r in group.rewards],
        "stage1_rewards": [float(r) for r in group.stage1_rewards],
        "entropies": visited_entropies(params, group),
    }


def step_record(step: int, groups: Sequence[dict], ell, weight, clipped, delta: float) -> MetricsRecord:
    """Build a MetricsRecord from group summaries and the step's update samples.

    Online logging and offline trace replay both go through here.
    """
    ell = np.asarray(ell, dtype=float)
    weight = np.asarray(weight, dtype=float)
    clipped = np.asarray(clipped, dtype=bool)
    tr = trust_region_stats((ell, weight), delta)
    ent = entropy_report_from_values((g["used_hint"], g["entropies"]) for g in groups)
    n = len(groups)
    active = weight > 0
    n_active = int(active.sum())
    return MetricsRecord(
        step=int(step),
        eur=tr.eur,
        uc=tr.uc,
        affinity=tr.affinity,
        degenerate=tr.degenerate,
        mean_entropy=ent.mean_all,
        mean_entropy_hinted=ent.mean_hinted,
        mean_entropy_unhinted=ent.mean_unhinted,
        valid_fraction=sum(max(g["rewards"]) >= 1 for g in groups) / n if n else 0.0,
        mean_reward=float(np.mean([np.mean(g["rewards"]) for g in groups])) if n else 0.0,
        stage1_valid_fraction=sum(max(g["stage1_rewards"]) >= 1 for g in groups) / n if n else 0.0,
        hint_fraction=sum(g["used_hint"] for g in groups) / n if n else 0.0,
        clip_fraction=float(clipped[active].sum() / n_active) if n_active else 0.0,
        n_samples=int(ell.size),
    )


# --- trace I/O -------------------------------------------------------------------
# One JSON object per line.  Per step: one "rollout" record per group, then one
# "update" record carrying the step's update samples as parallel arrays.
#   {"kind": "rollout", "schema": 1, "step": s, "task_id": .., "used_hint": ..,
#    "rewards": [..], "stage1_rewards": [..], "entropies": [..]}
#   {"kind": "update", "schema": 1, "step": s, "delta": d,
#    "ell": [..], "weight": [..], "clipped": [..], "iteration": [..]}


def trace_lines(step: int, groups: Sequence[dict], batch, delta: float) -> list[str]:
    lines = [
        json.dumps({"kind": "rollout", "schema": TRACE_SCHEMA_VERSION, "step": int(step), **g})
        for g in groups
    ]
    lines.append(json.dumps({
        "kind": "update",
        "schema": TRACE_SCHEMA_VERSION,
        "step": int(step),
        "delta": float(delta),
        "ell": [float(x) for x in batch.ell],
        "weight": [float(x) for x in batch.weight],
        "clipped": [bool(x) for x in batch.clipped],
        "iteration": [int(x) for x in batch.iteration],
    }))
    return lines


def metrics_from_trace(path: str | Path) -> list[MetricsRecord]:
    """Offline recomputation of the per-step metrics log from a trace file."""
    records = []
    pending: list[dict] = []
    with Path(path).open() as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            d = json.loads(line)
            if d.get("schema") != TRACE_SCHEMA_VERSION:
                raise InputError(f"{path}:{lineno}: trace schema mismatch")
            if d["kind"] == "rollout":
                pending.append(d)
            elif d["kind"] == "update":
                if any(g["step"] != d["step"] for g in pending):
                    raise InputError(f"{path}:{lineno}: rollout records from another step")
                records.append(step_record(d["step"], pending, d["ell"], d["weight"], d["clipped"], d["delta"]))
                pending = []
            else:
                raise InputError(f"{path}:{lineno}: unknown record kind {d['kind']!r}")
    if pending:
        raise InputError(f"{path}: trailing rollout records without an update record")
    return records


def read_metrics(path: str | Path) -> list[MetricsRecord]:
    with Path(path).open() as f:
        return [MetricsRecord.from_json(line) for line in f if line.strip()]


# --- time series -------------------------------------------------------------------


def aggregate(values: Sequence[float | None], window: int) -> np.ndarray:
    """Sliding-window means (valid mode: ``len(values) - window + 1`` outputs).

    ``None`` entries are treated as missing; a window with no values is NaN.
    Means are taken about the window's first present value, so a constant
    series comes back exactly constant.
    """
    if window < 1:
        raise ConfigError("window must be >= 1")
    x = np.array([np.nan if v is None else v for v in values], dtype=float)
    if x.size < window:
        return np.zeros(0)
    windows = np.lib.stride_tricks.sliding_window_view(x, window)
    present = ~np.isnan(windows)
    counts = present.sum(axis=1)
    first = np.where(counts > 0, windows[np.arange(len(windows)), present.argmax(axis=1)], 0.0)
    sums = np.where(present, windows - first[:, None], 0.0).sum(axis=1)
    out = np.full(counts.shape, np.nan)
    np.divide(sums, counts, out=out, where=counts > 0)
    return np.where(counts > 0, first + out, np.nan)


def aggregate_records(records: Sequence[MetricsRecord], window: int, fields: Sequence[str]) -> dict[str, np.ndarray]:
    return {name: aggregate([getattr(r, name) for r in records], window) for name in fields}
