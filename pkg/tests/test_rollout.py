import numpy as np
import pytest
from hypothesis import given, strategies as st

from hintlab import policy as pol
from hintlab.config import TrainerConfig
from hintlab.errors import ConfigError
from hintlab.policy import PolicyParams
from hintlab.rollout import compute_advantages, is_valid_group, rollout_group
from hintlab.tasks import HintSpec, Task, generate_task_set, render_context


def test_advantages_examples():
    assert np.all(compute_advantages([1, 1, 1, 1]) == 0)
    assert np.all(compute_advantages([0, 0, 0, 0]) == 0)
    # Oracle: population mean/std by hand: mean 0.25, std sqrt(3)/4.
    r = np.array([1.0, 0, 0, 0])
    expected = (r - 0.25) / (np.sqrt(3) / 4 + 1e-6)
    a = compute_advantages(r, 1e-6)
    assert np.allclose(a, [1.7320, -0.5773, -0.5773, -0.5773], atol=1e-3)
    assert np.allclose(a, expected, rtol=0, atol=1e-15)
    with pytest.raises(ConfigError):
        compute_advantages([1])


@given(st.lists(st.sampled_from([0.0, 1.0]), min_size=2, max_size=16))
def test_advantage_moments(rewards):
    a = compute_advantages(rewards)
    assert np.all(np.isfinite(a))
    if np.std(rewards) > 0:
        assert abs(a.mean()) <= 1e-9
        # The eps_std guard keeps the variance a hair below 1 (relative 2e-6 at most here).
        assert abs(a.var() - 1.0) <= 1e-5
    else:
        assert np.all(a == 0)


def test_advantages_unit_variance_without_eps():
    a = compute_advantages([1, 0, 0, 1, 0, 0, 0, 0], eps_std=0.0)
    assert abs(a.mean()) <= 1e-9 and abs(a.var() - 1) <= 1e-9


def _solved_params(task: Task, n_questions=4, strength=30.0):
    p = PolicyParams.zeros(n_questions, task.length, task.vocab)
    for pos, (q, a) in enumerate(zip(task.question, task.answer)):
        p.logits[q, pos, a] = strength
    return p


@pytest.fixture
def task():
    return generate_task_set(0, 8, (3, 4), 0.5)[0]


def test_stage1_success_skips_hint(task):
    p = _solved_params(task)
    cfg = TrainerConfig(hint=HintSpec("heuristic"))
    g = rollout_group(p, task, cfg.hint, cfg, np.random.default_rng(0))
    assert not g.used_hint and is_valid_group(g)
    assert g.rollout_context == g.policy_context and not g.rollout_context.hinted
    assert g.group_size == 8


def _failing_params(task: Task, n_questions=4):
    # Confidently wrong everywhere outside the heuristic candidate sets.
    p = PolicyParams.zeros(n_questions, task.length, task.vocab)
    for pos, (q, cand) in enumerate(zip(task.question, task.candidates)):
        wrong = [v for v in range(task.vocab) if v not in cand][0]
        p.logits[q, pos, wrong] = 40.0
    return p


def test_heuristic_rescue(task):
    p = _failing_params(task)
    cfg = TrainerConfig(hint=HintSpec("heuristic"))
    g = rollout_group(p, task, cfg.hint, cfg, np.random.default_rng(0))
    assert g.used_hint and np.all(g.stage1_rewards == 0)
    assert g.rollout_context.candidates == task.candidates
    assert not g.policy_context.hinted
    for t in g.trajectories:
        assert t.hinted and t.sampling_context == g.rollout_context
        assert all(tok in c for tok, c in zip(t.tokens, task.candidates))


def test_no_hint_keeps_failed_group(task):
    p = _failing_params(task)
    cfg = TrainerConfig()
    g = rollout_group(p, task, cfg.hint, cfg, np.random.default_rng(0))
    assert not g.used_hint and not is_valid_group(g)
    assert np.all(g.advantages == 0)


def test_answer_prefix_rescue(task):
    p = _failing_params(task)
    hint = HintSpec("answer_prefix", 2)
    cfg = TrainerConfig(hint=hint, decoupled_prompts=False)
    g = rollout_group(p, task, hint, cfg, np.random.default_rng(1))
    assert g.used_hint
    assert g.rollout_context == g.policy_context
    assert all(t.tokens[:2] == task.answer[:2] for t in g.trajectories)


def test_inject_rescue(task):
    p = _failing_params(task)
    cfg = TrainerConfig(hint=HintSpec("inject"))
    g = rollout_group(p, task, cfg.hint, cfg, np.random.default_rng(2))
    assert g.used_hint and g.rewards.tolist() == [0] * 7 + [1]
    gt = g.trajectories[-1]
    assert gt.tokens == task.answer and gt.off_policy and gt.meta["injected"]
    assert np.allclose(gt.old_logprobs, pol.logprob(p, task.answer, g.policy_context))
    assert np.all(gt.behavior_logprobs == 0)
    assert g.advantages[-1] > 0


def test_rollout_validation(task):
    with pytest.raises(ConfigError):
        TrainerConfig(group_size=1)
    cfg = TrainerConfig(max_response=2)
    with pytest.raises(ConfigError):
        rollout_group(PolicyParams.zeros(4, 3, 4), task, cfg.hint, cfg, np.random.default_rng(0))
    cfg = TrainerConfig()
    with pytest.raises(ConfigError):
        rollout_group(PolicyParams.zeros(4, 3, 4), task, HintSpec("answer_prefix", 3), cfg, np.random.default_rng(0))


@given(seed=st.integers(0, 5000), mode=st.sampled_from(["heuristic", "answer_prefix", "inject"]))
def test_used_hint_implies_stage1_failure(seed, mode):
    tasks = generate_task_set(1, 6, (2, 3), 0.5)
    hint = HintSpec(mode, 1 if mode == "answer_prefix" else 0)
    cfg = TrainerConfig(hint=hint, group_size=4)
    rng = np.random.default_rng(seed)
    p = PolicyParams(rng.normal(0, 1, (9, 2, 3)))
    for t in tasks:
        g = rollout_group(p, t, hint, cfg, rng)
        if g.used_hint:
            assert g.stage1_rewards.max() == 0
        else:
            assert np.array_equal(g.rewards, g.stage1_rewards)
        assert g.group_size == 4 and np.all(np.isfinite(g.advantages))


def test_none_mode_matches_plain_group_sampling(task):
    # With no hint the group is exactly G plain-context samples from the same stream.
    rng_a, rng_b = np.random.default_rng(9), np.random.default_rng(9)
    p = PolicyParams(np.random.default_rng(0).normal(0, 1, (12, 3, 4)))
    cfg = TrainerConfig()
    g = rollout_group(p, task, cfg.hint, cfg, rng_a)
    plain = render_context(task, HintSpec(), True, "rollout")
    ref = pol.sample_tokens(p, plain, cfg.temperature, rng_b, cfg.group_size)
    assert g.tokens.tobytes() == ref.tobytes()
