"""Two-stage group rollout with an adaptive rescue stage."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import policy as pol
from .config import TrainerConfig
from .errors import ConfigError
from .policy import PolicyParams, Trajectory
from .tasks import Context, HintSpec, Task, render_context, verify


@dataclass(eq=False)
class RolloutGroup:
    task_id: int
    trajectories: list[Trajectory]
    rewards: np.ndarray
    advantages: np.ndarray
    used_hint: bool
    stage1_rewards: np.ndarray
    rollout_context: Context
    policy_context: Context

    @property
    def tokens(self) -> np.ndarray:
        return np.array([t.tokens for t in self.trajectories], dtype=np.int64)

    @property
    def old_logprobs(self) -> np.ndarray:
        return np.stack([t.old_logprobs for t in self.trajectories])

    @property
    def group_size(self) -> int:
        return len(self.trajectories)


def compute_advantages(rewards, eps_std: float = 1e-6) -> np.ndarray:
    """Group-normalised advantages ``(r - mean) / (std + eps_std)``.

    Population std.  A group whose rewards are all equal carries no signal and
    gets an exact zero vector.
    """
    r = np.asarray(rewards, dtype=float)
    if r.size < 2:
        raise ConfigError("advantages need a group of at least 2 rewards")
    if np.all(r == r[0]):
        return np.zeros_like(r)
    return (r - r.mean()) / (r.std() + eps_std)


def is_valid_group(group: RolloutGroup) -> bool:
    return bool(np.max(group.rewards) >= 1)


def _score(task: Task, trajectories: list[Trajectory]) -> np.ndarray:
    for t in trajectories:
        t.reward = verify(task, t.tokens)
    return np.array([t.reward for t in trajectories], dtype=float)


def rollout_group(
    params_old: PolicyParams,
    task: Task,
    hint: HintSpec,
    cfg: TrainerConfig,
    rng: np.random.Generator,
) -> RolloutGroup:
    G = cfg.group_size
    if G < 2:
        raise ConfigError("group_size must be >= 2")
    hint.check(task.length)
    if cfg.max_response is not None and task.length > cfg.max_response:
        raise ConfigError(f"answer length {task.length} exceeds max_response {cfg.max_response}")

    plain = render_context(task, HintSpec(), cfg.decoupled_prompts, "rollout")
    trajs = pol.sample_group(params_old, plain, cfg.temperature, rng, G)
    stage1 = _score(task, trajs)
    policy_ctx = render_context(task, hint, cfg.decoupled_prompts, "policy")

    if stage1.sum() > 0 or hint.mode == "none":
        return RolloutGroup(
            task.task_id, trajs, stage1, compute_advantages(stage1, cfg.eps_std),
            used_hint=False, stage1_rewards=stage1.copy(),
            rollout_context=plain, policy_context=plain,
        )

    if hint.mode == "inject":
        # Off-policy rescue: the last failed sample is swapped for the ground
        # truth, emitted by a deterministic expert (behaviour log-prob 0).
        gt = Trajectory(
            task.answer, pol.logprob(params_old, task.answer, plain), plain,
            reward=1, hinted=True, meta={"injected": True},
            behavior_logprobs=np.zeros(task.length),
        )
        trajs = trajs[:-1] + [gt]
        rewards = np.array([t.reward for t in trajs], dtype=float)
        return RolloutGroup(
            task.task_id, trajs, rewards, compute_advantages(rewards, cfg.eps_std),
            used_hint=True, stage1_rewards=stage1,
            rollout_context=plain, policy_context=plain,
        )

    hinted_ctx = render_context(task, hint, cfg.decoupled_prompts, "rollout")
    hinted = pol.sample_group(params_old, hinted_ctx, cfg.temperature, rng, G)
    rewards = _score(task, hinted)
    return RolloutGroup(
        task.task_id, hinted, rewards, compute_advantages(rewards, cfg.eps_std),
        used_hint=True, stage1_rewards=stage1,
        rollout_context=hinted_ctx, policy_context=policy_ctx,
    )
