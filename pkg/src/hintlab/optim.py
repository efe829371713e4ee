"""Clipped-surrogate policy update over rollout groups."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import policy as pol
from .config import TrainerConfig
from .errors import DivergenceError, InternalError
from .policy import PolicyParams
from .rollout import RolloutGroup, is_valid_group, rollout_group
from .tasks import Context, Task

__all__ = [
    "TrainerConfig",
    "UpdateSample",
    "UpdateBatch",
    "LossResult",
    "TrainState",
    "StepDiagnostics",
    "importance_ratios",
    "hint_loss",
    "train_step",
]


@dataclass(frozen=True)
class UpdateSample:
    ell: float
    weight: float
    step: int
    iteration: int
    task_id: int
    trajectory: int
    position: int


@dataclass
class UpdateBatch:
    """Columnar UpdateSamples for one training step."""

    step: int
    ell: np.ndarray
    weight: np.ndarray
    iteration: np.ndarray
    task_id: np.ndarray
    trajectory: np.ndarray
    position: np.ndarray
    clipped: np.ndarray

    @classmethod
    def empty(cls, step: int) -> "UpdateBatch":
        z = np.zeros(0)
        zi = np.zeros(0, dtype=np.int64)
        return cls(step, z, z, zi, zi, zi, zi, np.zeros(0, dtype=bool))

    @classmethod
    def concat(cls, step: int, parts: list["UpdateBatch"]) -> "UpdateBatch":
        if not parts:
            return cls.empty(step)
        cat = lambda name: np.concatenate([getattr(p, name) for p in parts])
        return cls(step, cat("ell"), cat("weight"), cat("iteration"), cat("task_id"),
                   cat("trajectory"), cat("position"), cat("clipped"))

    def __len__(self) -> int:
        return len(self.ell)

    def __iter__(self):
        for i in range(len(self.ell)):
            yield UpdateSample(
                float(self.ell[i]), float(self.weight[i]), self.step, int(self.iteration[i]),
                int(self.task_id[i]), int(self.trajectory[i]), int(self.position[i]),
            )


def _ratio_context(group: RolloutGroup, cfg: TrainerConfig) -> Context:
    return group.rollout_context if cfg.ratio_context == "literal_qstar" else group.policy_context


def _check_group(group: RolloutGroup) -> None:
    L = group.rollout_context.length
    for t in group.trajectories:
        if t.sampling_context.task_id != group.task_id or len(t.tokens) != L:
            raise InternalError(f"trajectory does not belong to group of task {group.task_id}")


def importance_ratios(
    params: PolicyParams, params_old: PolicyParams, group: RolloutGroup, cfg: TrainerConfig
) -> tuple[np.ndarray, np.ndarray]:
    """Per-token ratios and log-ratios, shape (G, L).

    Numerator and denominator are both evaluated under the ratio context.  An
    off-policy trajectory (one carrying ``behavior_logprobs``) takes its
    denominator from the behaviour policy that produced it instead.
    """
    _check_group(group)
    ctx = _ratio_context(group, cfg)
    tokens = group.tokens
    denom = pol.logprob(params_old, tokens, ctx)
    for i, t in enumerate(group.trajectories):
        if t.off_policy:
            denom[i] = t.behavior_logprobs
    ell = pol.logprob(params, tokens, ctx) - denom
    return np.exp(ell), ell


def _loss_mask(group: RolloutGroup, cfg: TrainerConfig) -> np.ndarray:
    G, L = group.group_size, group.rollout_context.length
    m = np.ones((G, L), dtype=bool)
    if not cfg.train_forced_tokens:
        for i, t in enumerate(group.trajectories):
            m[i, : t.n_forced] = False
    return m


@dataclass
class LossResult:
    objective: float
    grad: np.ndarray
    ell: list[np.ndarray]
    masks: list[np.ndarray]
    clipped: list[np.ndarray]
    kl: float = 0.0

    @property
    def clip_fraction(self) -> float:
        n = sum(int(c.sum()) for c in self.clipped)
        d = sum(int(m.sum()) for m in self.masks)
        return n / d if d else 0.0


def hint_loss(
    params: PolicyParams,
    params_old: PolicyParams,
    params_ref: PolicyParams,
    groups: list[RolloutGroup],
    cfg: TrainerConfig,
) -> LossResult:
    """Batch surrogate objective (to be maximised) and its exact gradient.

    Per token: ``min(r * A, clip(r, 1 - eps, 1 + eps) * A)``; tokens are
    averaged within a trajectory, trajectories within a group, groups within
    the batch.  ``beta * KL(pi || pi_ref)`` on each group's ratio context is
    subtracted.  The min/clip selector is held fixed when differentiating, so
    a token on the clipped branch contributes no gradient.
    """
    B = len(groups)
    eps = cfg.eps_clip
    objective = 0.0
    kl_total = 0.0
    grad = np.zeros_like(params.logits)
    ells, masks, clipped = [], [], []
    for g in groups:
        ratio, ell = importance_ratios(params, params_old, g, cfg)
        G = g.group_size
        A = g.advantages[:, None]
        m = _loss_mask(g, cfg)
        per_traj = np.maximum(m.sum(axis=1, keepdims=True), 1)
        scale = m / per_traj / G / B
        unclipped = ratio * A
        clipped_val = np.clip(ratio, 1.0 - eps, 1.0 + eps) * A
        active = unclipped <= clipped_val
        objective += float((scale * np.minimum(unclipped, clipped_val)).sum())
        ctx = _ratio_context(g, cfg)
        w = scale * A * ratio * active
        if np.any(w):
            grad += pol.grad_logprob(params, g.tokens, ctx, w)
        if cfg.beta > 0:
            k = pol.kl(params, params_ref, ctx)
            kl_total += k / B
            objective -= cfg.beta * k / B
            grad -= (cfg.beta / B) * pol.grad_kl(params, params_ref, ctx)
        nonzero = m & (A != 0)
        ells.append(ell)
        masks.append(nonzero)
        clipped.append(nonzero & ~active)

    if not np.isfinite(objective) or not np.all(np.isfinite(grad)):
        raise DivergenceError(
            "non-finite surrogate objective",
            dump={
                "objective": objective,
                "max_abs_logit": float(np.max(np.abs(params.logits))),
                "task_ids": [g.task_id for g in groups],
                "advantages": [g.advantages.tolist() for g in groups],
            },
        )
    return LossResult(objective, grad, ells, masks, clipped, kl_total)


@dataclass
class TrainState:
    params: PolicyParams
    ref_params: PolicyParams
    step: int = 0
    adam_m: np.ndarray | None = None
    adam_v: np.ndarray | None = None
    adam_t: int = 0

    @classmethod
    def initial(cls, n_questions: int, length: int, vocab: int, sharing: str = "separate") -> "TrainState":
        params = PolicyParams.zeros(n_questions, length, vocab, sharing)
        return cls(params=params, ref_params=params)


@dataclass
class StepDiagnostics:
    step: int
    mean_reward: float
    valid_fraction: float
    stage1_valid_fraction: float
    hint_fraction: float
    clip_fraction: float
    objective: float
    groups: list[RolloutGroup] = field(repr=False, default_factory=list)


def _ascend(state: TrainState, grad: np.ndarray, cfg: TrainerConfig) -> np.ndarray:
    logits = state.params.logits
    if cfg.optimizer == "sgd":
        return logits + cfg.learning_rate * grad
    b1, b2 = cfg.adam_betas
    if state.adam_m is None:
        state.adam_m = np.zeros_like(logits)
        state.adam_v = np.zeros_like(logits)
    state.adam_t += 1
    state.adam_m = b1 * state.adam_m + (1 - b1) * grad
    state.adam_v = b2 * state.adam_v + (1 - b2) * grad * grad
    m_hat = state.adam_m / (1 - b1**state.adam_t)
    v_hat = state.adam_v / (1 - b2**state.adam_t)
    return logits + cfg.learning_rate * m_hat / (np.sqrt(v_hat) + cfg.adam_eps)


def train_step(
    state: TrainState, tasks: list[Task], cfg: TrainerConfig, rng: np.random.Generator
) -> tuple[TrainState, UpdateBatch, StepDiagnostics]:
    """One outer step: rollouts for every task, then ``mu`` ascent iterations.

    Log-ratios in the returned UpdateBatch are measured at the start of each
    inner iteration, against the params the rollouts were sampled from.
    """
    if state.step % cfg.ref_refresh_interval == 0:
        state.ref_params = state.params
    params_old = state.params
    streams = rng.spawn(len(tasks))
    groups = [rollout_group(params_old, t, cfg.hint, cfg, s) for t, s in zip(tasks, streams)]

    parts = []
    clip_num = clip_den = 0
    first_objective = None
    params = params_old
    for it in range(cfg.mu):
        res = hint_loss(params, params_old, state.ref_params, groups, cfg)
        if first_objective is None:
            first_objective = res.objective
        for g, ell, m, c in zip(groups, res.ell, res.masks, res.clipped):
            keep = _loss_mask(g, cfg)
            gi, pi = np.nonzero(keep)
            parts.append(UpdateBatch(
                step=state.step,
                ell=ell[gi, pi],
                weight=np.abs(g.advantages)[gi],
                iteration=np.full(gi.shape, it, dtype=np.int64),
                task_id=np.full(gi.shape, g.task_id, dtype=np.int64),
                trajectory=gi.astype(np.int64),
                position=pi.astype(np.int64),
                clipped=c[gi, pi],
            ))
        clip_num += sum(int(c.sum()) for c in res.clipped)
        clip_den += sum(int(m.sum()) for m in res.masks)
        if not np.any(res.grad):
            continue
        new_logits = _ascend(state, res.grad, cfg)
        if not np.all(np.isfinite(new_logits)):
            raise DivergenceError("non-finite parameters after update", dump={"step": state.step})
        params = state.params.replace(new_logits)
        if params.normalization_error() > 1e-9:
            raise DivergenceError("softmax rows no longer normalised", dump={"step": state.step})
        state.params = params

    n = len(groups)
    diag = StepDiagnostics(
        step=state.step,
        mean_reward=float(np.mean([g.rewards.mean() for g in groups])) if n else 0.0,
        valid_fraction=sum(is_valid_group(g) for g in groups) / n if n else 0.0,
        stage1_valid_fraction=sum(g.stage1_rewards.max() >= 1 for g in groups) / n if n else 0.0,
        hint_fraction=sum(g.used_hint for g in groups) / n if n else 0.0,
        clip_fraction=clip_num / clip_den if clip_den else 0.0,
        objective=float(first_objective if first_objective is not None else 0.0),
        groups=groups,
    )
    state.step += 1
    return state, UpdateBatch.concat(diag.step, parts), diag
