import dataclasses
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from hintlab import policy as pol
from hintlab.config import TrainerConfig
from hintlab.errors import ConfigError, DivergenceError, InternalError
from hintlab.optim import TrainState, UpdateBatch, hint_loss, importance_ratios, train_step
from hintlab.policy import PolicyParams, Trajectory
from hintlab.rollout import RolloutGroup, compute_advantages, rollout_group
from hintlab.tasks import Context, HintSpec, generate_task_set, render_context


def make_group(tokens, advantages, context, policy_context=None, params=None):
    tokens = np.asarray(tokens)
    trajs = [
        Trajectory(tuple(int(x) for x in t), np.zeros(len(t)), context)
        for t in tokens
    ]
    if params is not None:
        for t in trajs:
            t.old_logprobs = pol.logprob(params, t.tokens, context)
    adv = np.asarray(advantages, dtype=float)
    return RolloutGroup(
        task_id=context.task_id, trajectories=trajs, rewards=(adv > 0).astype(float),
        advantages=adv, used_hint=context.hinted, stage1_rewards=np.zeros(len(adv)),
        rollout_context=context, policy_context=policy_context or context,
    )


def fd_grad(f, logits, h=1e-6):
    g = np.zeros_like(logits)
    for i in np.ndindex(logits.shape):
        up, dn = logits.copy(), logits.copy()
        up[i] += h
        dn[i] -= h
        g[i] = (f(up) - f(dn)) / (2 * h)
    return g


def rel_err(a, b):
    return np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)


# --- importance ratios ------------------------------------------------------------


@pytest.mark.parametrize("ratio_context", ["literal_qstar", "decoupled"])
def test_identity_ratios_hinted_group(ratio_context):
    task = generate_task_set(0, 4, (3, 4), 0.5)[0]
    p = PolicyParams(np.random.default_rng(0).normal(0, 1, (12, 3, 4)))
    hinted = render_context(task, HintSpec("heuristic"), True, "rollout")
    plain = render_context(task, HintSpec("heuristic"), True, "policy")
    toks = pol.sample_tokens(p, hinted, 0.9, np.random.default_rng(1), 4)
    g = make_group(toks, [1.0, -1.0, 0.5, -0.5], hinted, plain, params=p)
    cfg = TrainerConfig(ratio_context=ratio_context)
    r, ell = importance_ratios(p, p, g, cfg)
    assert np.all(r == 1.0) and np.all(ell == 0.0)


def test_ratio_closed_form():
    # Two tokens, logits (0, 0); +0.1 on the observed token 0.
    c = Context(0, (0,))
    old = PolicyParams.zeros(1, 1, 2)
    new = old.replace(old.logits.copy())
    new.logits[0, 0, 0] += 0.1
    g = make_group([[0], [1]], [1.0, -1.0], c, params=old)
    r, _ = importance_ratios(new, old, g, TrainerConfig())
    expected0 = (math.exp(0.1) / (math.exp(0.1) + 1)) / 0.5
    expected1 = (1 / (math.exp(0.1) + 1)) / 0.5
    assert r[0, 0] == pytest.approx(expected0, abs=1e-14)
    assert r[1, 0] == pytest.approx(expected1, abs=1e-14)


def test_ratio_context_mismatch():
    c = Context(0, (0, 1, 2))
    g = make_group([[0, 1, 2], [1, 1, 1]], [1.0, -1.0], c)
    g.trajectories[0].sampling_context = Context(5, (0, 1, 2))
    with pytest.raises(InternalError):
        importance_ratios(PolicyParams.zeros(4, 3, 4), PolicyParams.zeros(4, 3, 4), g, TrainerConfig())


def test_off_policy_ratio_uses_behavior_logprobs():
    c = Context(0, (0, 1, 2))
    p = PolicyParams.zeros(4, 3, 4)
    g = make_group([[0, 1, 2], [1, 1, 1]], [1.0, -1.0], c, params=p)
    g.trajectories[0].behavior_logprobs = np.zeros(3)
    _, ell = importance_ratios(p, p, g, TrainerConfig())
    assert np.allclose(ell[0], math.log(0.25)) and np.all(ell[1] == 0)


# --- loss --------------------------------------------------------------------------


def test_loss_at_identity_is_mean_advantage():
    c = Context(0, (0, 1, 2))
    p = PolicyParams.zeros(4, 3, 4)
    adv = [1.5, -0.5, 0.25, 0.0]
    g = make_group(np.zeros((4, 3), dtype=int), adv, c, params=p)
    res = hint_loss(p, p, p, [g], TrainerConfig())
    assert res.objective == pytest.approx(np.mean(adv), abs=1e-15)
    assert res.clip_fraction == 0.0


def test_clipped_token_value_and_zero_gradient():
    # A single token with ratio 1.5 and A = 1: contribution 1.2, no gradient.
    c = Context(0, (0,))
    old = PolicyParams.zeros(1, 1, 2)
    new = old.replace(old.logits.copy())
    # p_new(0) = 0.75 -> ratio 1.5 against p_old(0) = 0.5.
    new.logits[0, 0, 0] = math.log(3.0)
    g = make_group([[0], [1]], [1.0, 0.0], c, params=old)
    res = hint_loss(new, old, old, [g], TrainerConfig())
    assert res.objective == pytest.approx(1.2 / 2, abs=1e-14)
    assert np.all(res.grad == 0)
    assert res.clipped[0][0, 0]


def test_kl_term_vanishes_at_reference():
    c = Context(0, (0, 1, 2))
    rng = np.random.default_rng(1)
    p = PolicyParams(rng.normal(0, 1, (12, 3, 4)))
    g = make_group([[0, 1, 2], [3, 2, 1]], [1.0, -1.0], c, params=p)
    a = hint_loss(p, p, p, [g], TrainerConfig(beta=0.0))
    b = hint_loss(p, p, p, [g], TrainerConfig(beta=0.5))
    assert a.objective == b.objective
    assert np.array_equal(a.grad, b.grad)


def _random_loss_case(seed):
    rng = np.random.default_rng(seed)
    beta = [0.0, 0.5][seed % 2]
    eps = 0.2
    old = PolicyParams(rng.normal(0, 1, (12, 3, 4)))
    ref = PolicyParams(rng.normal(0, 1, (12, 3, 4)))
    # Move far enough from old that many tokens sit on the clipped branch.
    new = old.replace(old.logits + rng.normal(0, 0.4, old.shape))
    groups = []
    for k in range(2):
        q = tuple(int(x) for x in rng.integers(0, 4, 3))
        cand = ((0, 1), (1, 2), (2, 3)) if k else None
        ctx = Context(k, q, candidates=cand)
        toks = pol.sample_tokens(old, ctx, 1.0, rng, 4)
        adv = compute_advantages(rng.integers(0, 2, 4).astype(float))
        if not np.any(adv):
            adv = np.array([1.5, -0.5, -0.5, -0.5])
        groups.append(make_group(toks, adv, ctx, params=old))
    cfg = TrainerConfig(beta=beta, eps_clip=eps, ratio_context="literal_qstar")
    return new, old, ref, groups, cfg


def test_hint_loss_finite_difference_100_points():
    worst, n_clipped, n_beta = 0.0, 0, 0
    for seed in range(100):
        new, old, ref, groups, cfg = _random_loss_case(seed)
        res = hint_loss(new, old, ref, groups, cfg)
        n_clipped += sum(int(c.sum()) for c in res.clipped) > 0
        n_beta += cfg.beta > 0
        f = lambda z: hint_loss(new.replace(z), old, ref, groups, cfg).objective
        worst = max(worst, rel_err(res.grad, fd_grad(f, new.logits)))
    assert n_clipped >= 50 and n_beta == 50
    assert worst < 1e-4


def test_clipped_tokens_carry_no_gradient():
    new, old, ref, groups, cfg = _random_loss_case(4)
    res = hint_loss(new, old, ref, groups, cfg)
    # Rebuild the gradient from unclipped tokens only: it must match.
    manual = np.zeros_like(new.logits)
    for g, clipped in zip(groups, res.clipped):
        r, _ = importance_ratios(new, old, g, cfg)
        w = (1 / 3) / g.group_size / len(groups) * g.advantages[:, None] * r
        w = np.where(clipped, 0.0, w)
        manual += pol.grad_logprob(new, g.tokens, g.rollout_context, w)
    if cfg.beta:
        for g in groups:
            manual -= cfg.beta / len(groups) * pol.grad_kl(new, ref, g.rollout_context)
    assert np.allclose(manual, res.grad, atol=1e-14)


def test_divergence_error():
    c = Context(0, (0,))
    old = PolicyParams.zeros(1, 1, 2)
    bad = old.replace(np.full(old.shape, np.nan))
    g = make_group([[0], [1]], [1.0, -1.0], c, params=old)
    with pytest.raises(DivergenceError) as e:
        hint_loss(bad, old, old, [g], TrainerConfig())
    assert "advantages" in e.value.dump


# --- train_step ----------------------------------------------------------------------


def _tasks():
    return generate_task_set(4, 9, (2, 3), 0.5)


def test_zero_variance_batch_leaves_params():
    tasks = generate_task_set(0, 6, (3, 6), 0.5)
    # Confidently wrong: every group scores all zeros and there is no hint.
    state = TrainState.initial(6, 3, 6)
    logits = state.params.logits.copy()
    for t in tasks:
        for pos, q in enumerate(t.question):
            logits[q, pos, (t.answer[pos] + 1) % 6] = 50.0
    state.params = state.params.replace(logits)
    before = state.params.logits.copy()
    state, batch, diag = train_step(state, tasks, TrainerConfig(mu=3), np.random.default_rng(0))
    assert np.array_equal(state.params.logits, before)
    assert np.all(batch.weight == 0) and diag.valid_fraction == 0.0


def test_first_iteration_log_ratios_zero_literal():
    tasks = _tasks()
    cfg = TrainerConfig(mu=3, ratio_context="literal_qstar", learning_rate=1.0)
    state = TrainState.initial(3, 2, 3)
    for step in range(5):
        state, batch, _ = train_step(state, tasks[:8], cfg, np.random.default_rng([1, step]))
        assert np.all(batch.ell[batch.iteration == 0] == 0.0)
        assert len(batch) == 3 * 8 * cfg.group_size * 2


def test_train_step_deterministic():
    tasks = _tasks()
    cfg = TrainerConfig(mu=2, hint=HintSpec("heuristic"), learning_rate=0.5)
    runs = []
    for _ in range(2):
        state = TrainState.initial(3, 2, 3)
        history = []
        for step in range(30):
            state, batch, _ = train_step(state, tasks[:8], cfg, np.random.default_rng([7, step]))
            history.append(state.params.logits.tobytes() + batch.ell.tobytes())
        runs.append(history)
    assert runs[0] == runs[1]


def test_update_batch_iteration_and_concat():
    b = UpdateBatch.empty(3)
    assert len(b) == 0 and UpdateBatch.concat(3, []).step == 3
    tasks = _tasks()
    state = TrainState.initial(3, 2, 3)
    _, batch, _ = train_step(state, tasks[:2], TrainerConfig(mu=2), np.random.default_rng(0))
    samples = list(batch)
    assert len(samples) == len(batch)
    assert {s.iteration for s in samples} == {0, 1}
    assert all(s.weight >= 0 and math.isfinite(s.ell) for s in samples)


def test_ref_refresh():
    tasks = _tasks()
    cfg = TrainerConfig(beta=0.1, ref_refresh_interval=3, learning_rate=1.0)
    state = TrainState.initial(3, 2, 3)
    refs = []
    for step in range(7):
        state, _, _ = train_step(state, tasks[:4], cfg, np.random.default_rng(step))
        refs.append(state.ref_params)
    assert refs[0] is refs[1] is refs[2]
    assert refs[3] is not refs[2] and refs[3] is refs[4] is refs[5]


def test_adam_option_runs():
    tasks = _tasks()
    cfg = TrainerConfig(optimizer="adam", learning_rate=0.1)
    state = TrainState.initial(3, 2, 3)
    for step in range(5):
        state, _, _ = train_step(state, tasks[:4], cfg, np.random.default_rng(step))
    assert state.adam_t > 0 and np.all(np.isfinite(state.params.logits))


def test_config_validation_and_roundtrip():
    for bad in [dict(eps_clip=0.0), dict(eps_clip=1.0), dict(mu=0), dict(group_size=1),
                dict(learning_rate=0.0), dict(temperature=0.0), dict(beta=-1.0),
                dict(ratio_context="x"), dict(optimizer="x"), dict(delta=0.0)]:
        with pytest.raises(ConfigError):
            TrainerConfig(**bad)
    cfg = TrainerConfig(hint=HintSpec("answer_prefix", 2), mu=3)
    assert TrainerConfig.from_dict(cfg.to_dict()) == cfg
    assert cfg.trust_delta == pytest.approx(math.log(1.2))
    with pytest.raises(ConfigError):
        TrainerConfig.from_dict({"nope": 1})


# --- reference plain GRPO ---------------------------------------------------------------


def _ref_log_softmax(z):
    shifted = z - z.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def reference_grpo_step(logits, tasks, G, T, lr, rng):
    """Plain GRPO (mu = 1, no KL) written directly against the logits array."""
    L = logits.shape[1]
    pos = np.arange(L)
    streams = rng.spawn(len(tasks))
    grad = np.zeros_like(logits)
    out = []
    for task, s in zip(tasks, streams):
        q = np.array(task.question)
        z = logits[q, pos, :]
        cdf = np.cumsum(np.exp(_ref_log_softmax(z / T)), axis=-1)
        cdf /= cdf[:, -1:]
        u = s.random((G, L))
        tokens = (u[:, :, None] >= cdf[None, :, :]).sum(axis=-1)
        rewards = np.array([float(tuple(t) == task.answer) for t in tokens])
        if np.all(rewards == rewards[0]):
            adv = np.zeros(G)
        else:
            adv = (rewards - rewards.mean()) / (rewards.std() + 1e-6)
        w = np.ones((G, L)) / np.full((G, 1), L) / G / len(tasks) * adv[:, None] * 1.0
        probs = np.exp(_ref_log_softmax(z))
        g = -w.sum(axis=0)[:, None] * probs
        np.add.at(g, (np.broadcast_to(pos, (G, L)), tokens), w)
        if np.any(w):
            full = np.zeros_like(logits)
            full[q, pos, :] += g
            grad += full
        out.append((tokens, rewards))
    new = logits + lr * grad if np.any(grad) else logits
    return new, out


def test_matches_reference_grpo_bitwise():
    tasks = _tasks()
    cfg = TrainerConfig(learning_rate=2.0)
    state = TrainState.initial(3, 2, 3)
    logits = state.params.logits.copy()
    for step in range(40):
        batch = tasks[(step % 3): (step % 3) + 6]
        state, _, diag = train_step(state, batch, cfg, np.random.default_rng([3, step]))
        logits, ref = reference_grpo_step(logits, batch, cfg.group_size, cfg.temperature,
                                          cfg.learning_rate, np.random.default_rng([3, step]))
        for g, (tokens, rewards) in zip(diag.groups, ref):
            assert g.tokens.tobytes() == tokens.astype(np.int64).tobytes()
            assert g.rewards.tobytes() == rewards.tobytes()
        assert state.params.logits.tobytes() == logits.tobytes()


def test_none_mode_ignores_decoupling():
    tasks = _tasks()
    out = []
    for decoupled in (True, False):
        cfg = TrainerConfig(decoupled_prompts=decoupled, learning_rate=1.0, mu=2)
        state = TrainState.initial(3, 2, 3)
        for step in range(20):
            state, _, _ = train_step(state, tasks[:6], cfg, np.random.default_rng(step))
        out.append(state.params.logits.tobytes())
    assert out[0] == out[1]


def test_reward_trends_up_when_stage1_succeeds():
    # Smoke test: L=2, V=3 gives frequent stage-1 successes.
    ups = 0
    for seed in range(5):
        tasks = generate_task_set(seed, 9, (2, 3), 0.5)
        cfg = TrainerConfig(learning_rate=0.5)
        state = TrainState.initial(3, 2, 3)
        rewards = []
        for step in range(200):
            rng = np.random.default_rng([seed, step])
            batch = [tasks[i] for i in rng.choice(len(tasks), 4, replace=False)]
            state, _, diag = train_step(state, batch, cfg, rng)
            rewards.append(diag.mean_reward)
        ups += np.mean(rewards[-50:]) >= np.mean(rewards[:50])
    assert ups >= 4


@given(seed=st.integers(0, 1000), mode=st.sampled_from(["none", "heuristic", "answer_prefix", "inject"]))
def test_step_invariants(seed, mode):
    tasks = generate_task_set(seed, 6, (3, 4), 0.5)
    hint = HintSpec(mode, 1 if mode == "answer_prefix" else 0)
    cfg = TrainerConfig(hint=hint, mu=2, learning_rate=1.0, decoupled_prompts=mode != "answer_prefix")
    state = TrainState.initial(4, 3, 4)
    state, batch, diag = train_step(state, tasks, cfg, np.random.default_rng(seed))
    assert state.params.normalization_error() <= 1e-9
    assert np.all(np.isfinite(batch.ell)) and np.all(batch.weight >= 0)
    assert 0 <= diag.valid_fraction <= 1 and 0 <= diag.clip_fraction <= 1
    for g in diag.groups:
        assert not g.used_hint or g.stage1_rewards.max() == 0
