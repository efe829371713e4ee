"""Experiment runner: guidance modes, training runs, evaluation, comparison.

A run directory looks like::

    <out>/
      manifest.json          written before step 0
      config.yaml            experiment config snapshot
      tasks.jsonl            the task set (train and test splits)
      summary.csv            one row per seed
      seed_<s>/
        metrics.jsonl        one MetricsRecord per step
        trace.jsonl          rollout/update trace (offline metrics input)
        eval.jsonl           held-out accuracy every eval_interval steps
        checkpoints/step_<n>.npz, final.npz
"""

from __future__ import annotations

import csv
import dataclasses
import io
import json
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Literal, Sequence

import numpy as np
import yaml

from . import __version__
from . import metrics as M
from . import policy as pol
from .config import TrainerConfig
from .errors import ConfigError, InputError
from .optim import TrainState, train_step
from .tasks import Context, HintSpec, Task, generate_task_set, load_tasks, save_tasks, split_tasks, verify

GuidanceMode = Literal["grpo", "hint", "answer_prefix", "inject"]
GUIDANCE_MODES: tuple[str, ...] = ("grpo", "hint", "answer_prefix", "inject")

SUMMARY_FIELDS = (
    "final_test_accuracy",
    "early_train_reward",
    "final_train_reward",
    "illusion_gap",
    "final_valid_fraction",
    "mean_valid_fraction",
    "mean_affinity",
    "mean_eur",
    "mean_uc",
    "mean_entropy",
    "mean_entropy_hinted",
    "mean_entropy_unhinted",
    "hint_fraction",
    "degenerate_fraction",
)


def normalize_mode(mode: str) -> str:
    """Accept the CLI spelling ``answer-prefix`` as well as ``answer_prefix``."""
    m = mode.replace("-", "_")
    if m not in GUIDANCE_MODES:
        raise ConfigError(f"unknown guidance mode {mode!r}; choose from {', '.join(GUIDANCE_MODES)}")
    return m


@dataclass(frozen=True)
class TaskConfig:
    seed: int = 0
    n_train: int = 200
    n_test: int = 50
    length: int = 4
    vocab: int = 8
    narrowing_factor: float = 0.25

    def generate(self) -> list[Task]:
        count = self.n_train + self.n_test
        return generate_task_set(
            self.seed, count, (self.length, self.vocab), self.narrowing_factor,
            test_fraction=self.n_test / count,
        )


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything a run needs besides the guidance mode and the seed list.

    ``trainer.hint`` is ignored: the guidance mode decides the hint.
    ``mode_overrides`` patches trainer fields for one mode only; by default
    the answer-prefix baseline trains on its hinted prompt (no decoupling).
    """

    tasks: TaskConfig = field(default_factory=TaskConfig)
    trainer: TrainerConfig = field(default_factory=lambda: TrainerConfig(learning_rate=1.0, mu=4))
    steps: int = 500
    eval_interval: int = 50
    checkpoint_interval: int = 100
    prefix_len: int = 3
    sharing: pol.HintSharing = "separate"
    window: int = 100
    mode_overrides: dict = field(default_factory=lambda: {
        "answer_prefix": {"decoupled_prompts": False, "ratio_context": "literal_qstar"},
    })

    def __post_init__(self):
        if self.steps < 1:
            raise ConfigError("steps must be >= 1")
        if self.eval_interval < 1 or self.checkpoint_interval < 1 or self.window < 1:
            raise ConfigError("eval_interval, checkpoint_interval and window must be >= 1")
        if self.sharing not in ("separate", "offset", "shared"):
            raise ConfigError(f"unknown sharing {self.sharing!r}")
        for mode, patch in self.mode_overrides.items():
            normalize_mode(mode)
            if "hint" in patch:
                raise ConfigError("mode_overrides may not set the hint; the mode decides it")

    def trainer_for(self, mode: str) -> TrainerConfig:
        mode = normalize_mode(mode)
        hint = {
            "grpo": HintSpec(),
            "hint": HintSpec("heuristic"),
            "answer_prefix": HintSpec("answer_prefix", self.prefix_len),
            "inject": HintSpec("inject"),
        }[mode]
        d = self.trainer.to_dict()
        d.update(self.mode_overrides.get(mode, {}))
        d["hint"] = hint
        return TrainerConfig.from_dict(d)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["trainer"] = self.trainer.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown experiment config keys: {sorted(unknown)}")
        if "tasks" in d:
            d["tasks"] = TaskConfig(**d["tasks"])
        if "trainer" in d:
            t = dict(d["trainer"])
            t.pop("hint", None)
            d["trainer"] = TrainerConfig.from_dict(t)
        if "mode_overrides" in d:
            d["mode_overrides"] = {normalize_mode(k): dict(v) for k, v in (d["mode_overrides"] or {}).items()}
        return cls(**d)


def load_config(path: str | Path) -> ExperimentConfig:
    """Read a YAML (or JSON) experiment config."""
    try:
        raw = yaml.safe_load(Path(path).read_text())
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    except yaml.YAMLError as e:
        raise ConfigError(f"cannot parse config {path}: {e}") from e
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: config must be a mapping")
    try:
        return ExperimentConfig.from_dict(raw)
    except TypeError as e:
        raise ConfigError(f"{path}: {e}") from e


def dump_config(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=False)


# --- evaluation ---------------------------------------------------------------


def evaluate(
    params: pol.PolicyParams,
    tasks: Sequence[Task],
    samples_per_task: int = 0,
    rng: np.random.Generator | None = None,
) -> float:
    """Held-out accuracy under the hint-free prompt.

    ``samples_per_task = 0`` decodes greedily (argmax at every position).
    A positive value instead averages the verifier over that many untempered
    samples per task, which needs ``rng``.  Only the task's question is read.
    """
    if not tasks:
        raise InputError("cannot evaluate on an empty task set")
    if samples_per_task < 0:
        raise ConfigError("samples_per_task must be >= 0")
    if samples_per_task and rng is None:
        raise ConfigError("sampled evaluation needs an rng")
    correct = 0.0
    for task in tasks:
        ctx = Context(task_id=task.task_id, question=task.question)
        if samples_per_task == 0:
            greedy = pol.context_logprobs(params, ctx).argmax(axis=-1)
            correct += verify(task, greedy)
        else:
            draws = pol.sample_tokens(params, ctx, 1.0, rng, samples_per_task)
            correct += np.mean([verify(task, d) for d in draws])
    return float(correct / len(tasks))


# --- training -------------------------------------------------------------------


def _seed_dir(out: Path, seed: int) -> Path:
    return out / f"seed_{seed}"


def _select_batch(train: Sequence[Task], batch_size: int, rng: np.random.Generator) -> list[Task]:
    idx = rng.choice(len(train), size=min(batch_size, len(train)), replace=False)
    return [train[i] for i in idx]


def train_seed(cfg: ExperimentConfig, mode: str, seed: int, tasks: Sequence[Task], out: Path) -> dict:
    """Train one seed; write its logs and checkpoints and return its summary row."""
    mode = normalize_mode(mode)
    tcfg = cfg.trainer_for(mode)
    train, test = split_tasks(tasks, "train"), split_tasks(tasks, "test")
    if not train:
        raise ConfigError("task set has no training split")
    sdir = _seed_dir(out, seed)
    (sdir / "checkpoints").mkdir(parents=True, exist_ok=True)

    n_questions = max(t.vocab for t in tasks)
    state = TrainState.initial(n_questions, tasks[0].length, n_questions, cfg.sharing)
    delta = tcfg.trust_delta
    records: list[M.MetricsRecord] = []
    evals: list[dict] = []
    with (sdir / "metrics.jsonl").open("w") as mlog, (sdir / "trace.jsonl").open("w") as tlog, \
            (sdir / "eval.jsonl").open("w") as elog:
        for step in range(cfg.steps):
            if step % cfg.eval_interval == 0:
                evals.append(_eval_line(elog, step, state.params, test))
            rng = np.random.default_rng([seed, step])
            batch_tasks = _select_batch(train, tcfg.batch_size, rng)
            params_old = state.params
            state, batch, diag = train_step(state, batch_tasks, tcfg, rng)
            summaries = [M.group_summary(params_old, g) for g in diag.groups]
            for line in M.trace_lines(step, summaries, batch, delta):
                tlog.write(line + "\n")
            rec = M.step_record(step, summaries, batch.ell, batch.weight, batch.clipped, delta)
            mlog.write(rec.to_json() + "\n")
            records.append(rec)
            if (step + 1) % cfg.checkpoint_interval == 0:
                pol.save_checkpoint(state.params, sdir / "checkpoints" / f"step_{step + 1}.npz",
                                    {"step": step + 1, "seed": seed, "mode": mode})
        evals.append(_eval_line(elog, cfg.steps, state.params, test))
    pol.save_checkpoint(state.params, sdir / "final.npz", {"step": cfg.steps, "seed": seed, "mode": mode})
    return summarize_seed(records, evals, cfg.window) | {"seed": seed}


def _eval_line(f, step: int, params: pol.PolicyParams, test: Sequence[Task]) -> dict:
    row = {"step": step, "test_accuracy": evaluate(params, test) if test else None}
    f.write(json.dumps(row) + "\n")
    return row


def _nanmean(xs) -> float:
    arr = np.array([np.nan if x is None else x for x in xs], dtype=float)
    return float(np.nanmean(arr)) if np.any(~np.isnan(arr)) else float("nan")


def summarize_seed(records: Sequence[M.MetricsRecord], evals: Sequence[dict], window: int) -> dict:
    """Per-seed summary row.

    Run means of EUR/UC/Affinity skip degenerate steps (no update weight),
    whose sentinel values carry no measurement.  "Early" is the first
    quarter of steps; "final" is the last ``window`` steps.
    """
    n = len(records)
    if n == 0:
        raise InputError("no metrics records to summarize")
    w = min(window, n)
    q = max(1, n // 4)
    live = [r for r in records if not r.degenerate]
    final_acc = evals[-1]["test_accuracy"] if evals else None
    final_reward = _nanmean(r.mean_reward for r in records[-w:])
    return {
        "final_test_accuracy": float("nan") if final_acc is None else float(final_acc),
        "early_train_reward": _nanmean(r.mean_reward for r in records[:q]),
        "final_train_reward": final_reward,
        "illusion_gap": final_reward - (float("nan") if final_acc is None else final_acc),
        "final_valid_fraction": _nanmean(r.valid_fraction for r in records[-w:]),
        "mean_valid_fraction": _nanmean(r.valid_fraction for r in records),
        "mean_affinity": _nanmean(r.affinity for r in live),
        "mean_eur": _nanmean(r.eur for r in live),
        "mean_uc": _nanmean(r.uc for r in live),
        "mean_entropy": _nanmean(r.mean_entropy for r in records),
        "mean_entropy_hinted": _nanmean(r.mean_entropy_hinted for r in records),
        "mean_entropy_unhinted": _nanmean(r.mean_entropy_unhinted for r in records),
        "hint_fraction": _nanmean(r.hint_fraction for r in records),
        "degenerate_fraction": (n - len(live)) / n,
    }


def _train_seed_job(args):
    cfg_dict, mode, seed, out = args
    cfg = ExperimentConfig.from_dict(cfg_dict)
    tasks = load_tasks(Path(out) / "tasks.jsonl")
    return train_seed(cfg, mode, seed, tasks, Path(out))


def run(
    cfg: ExperimentConfig,
    mode: str,
    seeds: Sequence[int],
    out: str | Path,
    workers: int = 1,
) -> Path:
    """Train every seed of one guidance mode into ``out`` and write the summary."""
    mode = normalize_mode(mode)
    seeds = [int(s) for s in seeds]
    if not seeds:
        raise ConfigError("at least one seed is required")
    if len(set(seeds)) != len(seeds):
        raise ConfigError("duplicate seeds")
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    tasks = cfg.tasks.generate()
    save_tasks(tasks, out / "tasks.jsonl")
    (out / "config.yaml").write_text(dump_config(cfg))
    manifest = {
        "run_id": f"{mode}-{'_'.join(map(str, seeds))}",
        "mode": mode,
        "seeds": seeds,
        "version": __version__,
        "git": _git_stamp(),
        "config": cfg.to_dict(),
        "trainer": cfg.trainer_for(mode).to_dict(),
        "created": time.strftime("%Y-%m-%dT%H:%M:%S"),
        "outputs": {str(s): str(_seed_dir(out, s).relative_to(out)) for s in seeds},
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")

    if workers > 1 and len(seeds) > 1:
        jobs = [(cfg.to_dict(), mode, s, str(out)) for s in seeds]
        with ProcessPoolExecutor(max_workers=min(workers, len(seeds))) as ex:
            rows = list(ex.map(_train_seed_job, jobs))
    else:
        rows = [train_seed(cfg, mode, s, tasks, out) for s in seeds]
    write_summary(out / "summary.csv", rows)
    return out


def _git_stamp() -> str | None:
    head = Path(__file__).resolve().parents[2] / ".git" / "HEAD"
    try:
        ref = head.read_text().strip()
        if ref.startswith("ref: "):
            return (head.parent / ref[5:]).read_text().strip()
        return ref
    except OSError:
        return None


def write_summary(path: Path, rows: Sequence[dict]) -> None:
    with path.open("w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=["seed", *SUMMARY_FIELDS])
        w.writeheader()
        for row in rows:
            w.writerow({k: row[k] for k in ["seed", *SUMMARY_FIELDS]})


def read_summary(path: Path) -> list[dict]:
    with path.open() as f:
        rows = list(csv.DictReader(f))
    if rows and set(rows[0]) != {"seed", *SUMMARY_FIELDS}:
        raise InputError(f"{path}: summary schema mismatch")
    return [{k: (int(v) if k == "seed" else float(v)) for k, v in r.items()} for r in rows]


def resummarize(run_dir: str | Path) -> list[dict]:
    """Rebuild a run's per-seed summary from its own logs."""
    run_dir = Path(run_dir)
    manifest = json.loads((run_dir / "manifest.json").read_text())
    window = manifest["config"]["window"]
    rows = []
    for seed in manifest["seeds"]:
        sdir = _seed_dir(run_dir, seed)
        records = M.read_metrics(sdir / "metrics.jsonl")
        evals = [json.loads(l) for l in (sdir / "eval.jsonl").read_text().splitlines() if l.strip()]
        rows.append(summarize_seed(records, evals, window) | {"seed": seed})
    return rows


# --- comparison -------------------------------------------------------------------


@dataclass(frozen=True)
class ComparisonRow:
    run: str
    mode: str
    n_seeds: int
    stats: dict  # metric -> (mean, population std)
    delta: dict  # metric -> mean minus the first run's mean


def compare(run_dirs: Sequence[str | Path]) -> list[ComparisonRow]:
    """Seed mean and population std per summary metric, for each run.

    Summaries are rebuilt from each run's logs, so a run directory alone
    reproduces its own row.
    """
    if not run_dirs:
        raise InputError("compare needs at least one run directory")
    rows = []
    for d in run_dirs:
        d = Path(d)
        if not (d / "manifest.json").exists():
            raise InputError(f"{d}: not a run directory (no manifest.json)")
        manifest = json.loads((d / "manifest.json").read_text())
        seeds = resummarize(d)
        stats = {}
        for k in SUMMARY_FIELDS:
            vals = np.array([s[k] for s in seeds], dtype=float)
            stats[k] = (float(np.mean(vals)), float(np.std(vals)))
        rows.append(ComparisonRow(str(d), manifest["mode"], len(seeds), stats, {}))
    base = rows[0].stats
    for r in rows:
        r.delta.update({k: r.stats[k][0] - base[k][0] for k in SUMMARY_FIELDS})
    return rows


def format_comparison(rows: Sequence[ComparisonRow]) -> str:
    """Comma-separated table: one line per run, ``mean``/``std``/``delta`` per metric."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    header = ["run", "mode", "n_seeds"]
    for k in SUMMARY_FIELDS:
        header += [f"{k}_mean", f"{k}_std", f"{k}_delta"]
    w.writerow(header)
    for r in rows:
        line = [r.run, r.mode, r.n_seeds]
        for k in SUMMARY_FIELDS:
            m, s = r.stats[k]
            line += [f"{m:.6g}", f"{s:.6g}", f"{r.delta[k]:.6g}"]
        w.writerow(line)
    return buf.getvalue()


def env_workers(default: int = 1) -> int:
    raw = os.environ.get("HINTLAB_THREADS")
    if raw is None or raw == "":
        return default
    try:
        n = int(raw)
    except ValueError as e:
        raise ConfigError(f"HINTLAB_THREADS must be an integer, got {raw!r}") from e
    if n < 1:
        raise ConfigError("HINTLAB_THREADS must be >= 1")
    return n


def resolve_out(out: str | Path | None, mode: str) -> Path:
    """Output directory for a run.

    With ``$HINTLAB_OUTPUT_ROOT`` set, relative paths are taken under it;
    otherwise they are relative to the working directory.  No ``out`` means
    ``<root>/<mode>`` with root defaulting to ``runs``.
    """
    env_root = os.environ.get("HINTLAB_OUTPUT_ROOT") or None
    if out is None:
        return Path(env_root or "runs") / normalize_mode(mode)
    out = Path(out)
    if out.is_absolute() or env_root is None:
        return out
    return Path(env_root) / out
