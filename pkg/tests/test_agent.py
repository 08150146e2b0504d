import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

import oracles
from patchzoom.core import (
    DTYPE,
    ExhaustedActionError,
    OptimizerConfig,
    clip_grad_norm,
    finite_difference_check,
    seeded_generator,
)
from patchzoom.hafed import Hafed, HafedConfig
from patchzoom.tsu import Tsu
from patchzoom.agent import (
    ActorCritic,
    Environment,
    PolicyConfigError,
    PpoConfig,
    PreparedSlide,
    SlideBatch,
    agent_from_checkpoint,
    compute_gae,
    episode_length,
    evaluate_policy,
    gae_batch,
    policy_forward,
    ppo_losses,
    replay,
    restrict_distribution,
    reward,
    rollout,
    rollout_episode,
    sample_action,
    selection_score,
    train_agent,
)

D = 6


def _env(seed=0, mode="targeted", tau=0.5):
    hafed = Hafed(HafedConfig(d=D, k=4, hidden=5, M=2), seed=seed)
    with torch.no_grad():
        hafed.head.weight.copy_(torch.randn(2, D, generator=seeded_generator(seed + 9), dtype=DTYPE))
    hafed.ready = True
    return Environment(hafed, Tsu(D, seed=seed), tau, mode)


def _slide(N, seed, y=None):
    g = seeded_generator(seed)
    Z = torch.randn(N, D, generator=g, dtype=DTYPE)
    V = Z + 0.3 * torch.randn(N, D, generator=g, dtype=DTYPE)
    y = seed % 2 if y is None else y
    mask = np.zeros(N, bool)
    if y:
        mask[: max(1, N // 5)] = True
    return PreparedSlide(f"s{seed}", Z, V, y, mask)


# --- policy ------------------------------------------------------------------

def test_policy_forward_examples():
    ac = ActorCritic(D, 8, seed=1)
    S = torch.randn(5, D, dtype=DTYPE)
    visited = torch.tensor([True, True, False, True, True])
    assert torch.equal(policy_forward(S, visited, ac), torch.tensor([0, 0, 1.0, 0, 0], dtype=DTYPE))
    probs = policy_forward(S, torch.zeros(5, dtype=torch.bool), ac)
    top2 = torch.argsort(probs, descending=True)[:2]
    masked = torch.zeros(5, dtype=torch.bool)
    masked[top2[0]] = True
    assert int(torch.argmax(policy_forward(S, masked, ac))) == int(top2[1])
    perm = torch.tensor([3, 1, 4, 0, 2])
    with torch.no_grad():
        assert torch.allclose(policy_forward(S[perm], masked[perm], ac), policy_forward(S, masked, ac)[perm], atol=1e-15)
    with pytest.raises(ExhaustedActionError):
        policy_forward(S, torch.ones(5, dtype=torch.bool), ac)


def test_actor_critic_disjoint_and_gradients():
    ac = ActorCritic(D, 5, seed=2)
    a, c = ac.actor_params(), ac.critic_params()
    assert not set(a) & set(c)
    assert len(a) + len(c) == len(list(ac.parameters()))
    S = torch.randn(7, D, generator=seeded_generator(3), dtype=DTYPE)
    visited = torch.tensor([False, True, False, False, True, False, False])
    assert finite_difference_check(lambda: -torch.log(policy_forward(S, visited, ac)[2]), a) < 1e-4
    assert finite_difference_check(lambda: (ac.value(S) - 0.7) ** 2, c) < 1e-4


# --- reward --------------------------------------------------------------------

def test_reward_examples():
    assert abs(float(reward(1.0, 1))) < 1e-6
    assert abs(float(reward(0.5, 1)) + math.log(2)) < 1e-15
    assert abs(float(reward(0.9, 0)) - math.log(0.1)) < 1e-12
    assert float(reward(0.0, 1)) == pytest.approx(math.log(1e-7))


@given(st.floats(1e-6, 1 - 1e-6), st.floats(1e-6, 1 - 1e-6), st.integers(0, 1))
def test_reward_monotone(p, q, y):
    lo, hi = sorted((p, q))
    if hi - lo < 1e-9:
        return
    r_lo, r_hi = float(reward(lo, y)), float(reward(hi, y))
    assert r_lo <= 0 and r_hi <= 0
    assert (r_hi > r_lo) if y == 1 else (r_lo > r_hi)


# --- action selection ----------------------------------------------------------

def test_sample_action_examples():
    one_hot = torch.tensor([0.0, 0.0, 1.0, 0.0], dtype=DTYPE)
    g = seeded_generator(0)
    for mode, kw in (("deterministic", {}), ("full", {}), ("top-k", {"k": 2}), ("top-p", {"p": 0.5})):
        assert sample_action(one_hot, mode, g, **kw) == 2
    dist = torch.tensor([0.5, 0.3, 0.2], dtype=DTYPE)
    assert torch.allclose(restrict_distribution(dist, "top-p", p=0.8), torch.tensor([0.625, 0.375, 0.0], dtype=DTYPE))
    assert torch.equal(restrict_distribution(dist, "top-k", k=3), dist)
    a = [sample_action(dist, "top-k", seeded_generator(5), k=3) for _ in range(3)]
    b = [sample_action(dist, "full", seeded_generator(5)) for _ in range(3)]
    assert a == b
    assert sample_action(torch.tensor([0.4, 0.4, 0.2], dtype=DTYPE)) == 0
    with pytest.raises(PolicyConfigError):
        sample_action(dist, "top-k", g, k=0)
    with pytest.raises(PolicyConfigError):
        sample_action(dist, "top-p", g, p=1.5)


# --- rollouts ------------------------------------------------------------------

def test_episode_length():
    assert episode_length(0.2, 60) == 12
    assert episode_length(0.1, 48) == 5
    assert episode_length(1.0, 7) == 7


def test_budget_and_distinct_actions():
    env, ac = _env(), ActorCritic(D, 5)
    trace, _ = rollout_episode(_slide(60, 1), env, ac, 0.2, "full", seeded_generator(0))
    assert len(trace.actions) == 12 and len(set(trace.actions)) == 12


def test_full_traversal_matches_hafed():
    env, ac = _env(), ActorCritic(D, 5)
    slide = _slide(15, 3)
    trace, S = rollout_episode(slide, env, ac, 1.0)
    assert sorted(trace.actions) == list(range(15))
    assert torch.equal(S, slide.V)
    assert trace.y_hat == float(env.hafed.predict(slide.V))


def test_eval_deterministic_and_replay():
    env, ac = _env(), ActorCritic(D, 5, seed=4)
    slide = _slide(20, 5)
    t1, S1 = rollout_episode(slide, env, ac, 0.3)
    t2, S2 = rollout_episode(slide, env, ac, 0.3)
    assert t1.actions == t2.actions and torch.equal(S1, S2)
    assert [s.state_sha for s in t1.steps] == [s.state_sha for s in t2.steps]
    assert torch.equal(replay(slide, env, t1.actions), S1)


def test_batched_rollout_equals_single():
    env, ac = _env(), ActorCritic(D, 5, seed=6)
    slides = [_slide(n, s) for n, s in ((12, 0), (19, 1), (15, 2))]
    batched = rollout(env, SlideBatch.collate(slides), ac, 0.25)
    for b, slide in enumerate(slides):
        single, S = rollout_episode(slide, env, ac, 0.25)
        assert batched.traces[b].actions == single.actions
        assert abs(batched.traces[b].y_hat - single.y_hat) < 1e-12
        assert torch.allclose(batched.final_state[b, : slide.N], S, atol=1e-12)


def test_random_policy_and_update_modes():
    slide = _slide(20, 7)
    for mode in ("targeted", "global", "local"):
        trace, S = rollout_episode(slide, _env(mode=mode), None, 0.5, "random", seeded_generator(1))
        assert len(set(trace.actions)) == 10
        untouched = [i for i in range(20) if i not in trace.actions]
        if mode == "local":
            assert torch.equal(S[untouched], slide.Z[untouched])
        if mode == "global":
            assert not torch.equal(S[untouched], slide.Z[untouched])


def test_terminal_reward_schedule():
    env, ac = _env(), ActorCritic(D, 5)
    batch = SlideBatch.collate([_slide(20, 1)])
    step = rollout(env, batch, ac, 0.3, reward_schedule="step")
    term = rollout(env, batch, ac, 0.3, reward_schedule="terminal")
    T = int(step.T[0])
    assert torch.equal(term.rewards[0, : T - 1], torch.zeros(T - 1, dtype=DTYPE))
    assert term.rewards[0, T - 1] == step.rewards[0, T - 1]


# --- GAE -----------------------------------------------------------------------

def test_gae_examples():
    r, v = [-1.0, -0.5, -0.1], [-1.5, -0.8, -0.2]
    adv, ret = compute_gae(r, v, 1.0, 0.95)
    ref_adv, ref_ret = oracles.gae(r, v, 1.0, 0.95)
    assert np.max(np.abs(adv - ref_adv)) <= 1e-12 and np.max(np.abs(ret - ref_ret)) <= 1e-12
    adv, _ = compute_gae(r, v, 1.0, 1.0)
    assert np.allclose(adv, [sum(r[t:]) - v[t] for t in range(3)], atol=1e-15)
    adv, _ = compute_gae(r, v, 0.9, 0.0)
    assert np.allclose(adv, [r[0] + 0.9 * v[1] - v[0], r[1] + 0.9 * v[2] - v[1], r[2] - v[2]], atol=1e-15)


@given(
    st.lists(st.tuples(st.floats(-5, 0), st.floats(-5, 5)), min_size=1, max_size=10),
    st.floats(0.01, 1.0),
    st.floats(0.0, 1.0),
)
@settings(max_examples=150)
def test_gae_matches_oracle(steps, gamma, lam):
    r, v = map(list, zip(*steps))
    adv, ret = compute_gae(r, v, gamma, lam)
    ref_adv, ref_ret = oracles.gae(r, v, gamma, lam)
    assert np.max(np.abs(adv - np.asarray(ref_adv))) <= 1e-10
    assert np.max(np.abs(ret - np.asarray(ref_ret))) <= 1e-10


def test_gae_batch_matches_per_episode():
    g = seeded_generator(0)
    rewards = -torch.rand(3, 5, generator=g, dtype=DTYPE)
    values = torch.randn(3, 5, generator=g, dtype=DTYPE)
    lengths = [5, 2, 4]
    valid = torch.arange(5).unsqueeze(0) < torch.tensor(lengths).unsqueeze(1)
    adv, ret = gae_batch(rewards * valid, values * valid, valid, 1.0, 0.95)
    for b, T in enumerate(lengths):
        a, r = compute_gae(rewards[b, :T].numpy(), values[b, :T].numpy(), 1.0, 0.95)
        assert np.allclose(adv[b, :T].numpy(), a, atol=1e-12)
        assert np.allclose(ret[b, :T].numpy(), r, atol=1e-12)
        assert torch.equal(adv[b, T:], torch.zeros(5 - T, dtype=DTYPE))


# --- PPO -----------------------------------------------------------------------

def _one_step(ratio, advantage, entropy_coef=0.0):
    ac = ActorCritic(D, 5, seed=8)
    S = torch.randn(1, 1, 4, D, generator=seeded_generator(9), dtype=DTYPE)
    blocked = torch.zeros(1, 1, 4, dtype=torch.bool)
    pad = torch.zeros(1, 4, dtype=torch.bool)
    action = torch.tensor([[2]])
    with torch.no_grad():
        logp = torch.log(policy_forward(S[0, 0], blocked[0, 0], ac)[2])
    old = (logp - math.log(ratio)).reshape(1, 1)
    cfg = PpoConfig(entropy_coef=entropy_coef)
    args = (S, blocked, pad, action, old, torch.tensor([[advantage]], dtype=DTYPE),
            torch.zeros(1, 1, dtype=DTYPE), torch.ones(1, 1, dtype=torch.bool), cfg)
    return ac, args, logp


def _actor_grad(ac, args):
    loss, _, _ = ppo_losses(ac, *args)
    params = ac.actor_params()
    return torch.cat([g.flatten() for g in torch.autograd.grad(loss, list(params.values()))])


def test_zero_advantage_gives_zero_actor_gradient():
    ac, args, _ = _one_step(1.0, 0.0)
    assert torch.count_nonzero(_actor_grad(ac, args)) == 0


def test_clip_branches():
    ac, args, _ = _one_step(1.5, 1.0)
    assert torch.count_nonzero(_actor_grad(ac, args)) == 0
    ac, args, logp = _one_step(0.5, 2.0)
    g = _actor_grad(ac, args)
    params = ac.actor_params()
    S, blocked = args[0][0, 0], args[1][0, 0]
    p = policy_forward(S, blocked, ac)[2]
    unclipped = -(torch.exp(torch.log(p) - args[4][0, 0]) * 2.0)
    ref = torch.cat([x.flatten() for x in torch.autograd.grad(unclipped, list(params.values()))])
    assert torch.allclose(g, ref, atol=1e-12)


def test_grad_clip_threshold():
    ac, args, _ = _one_step(0.5, 50.0)
    loss, _, _ = ppo_losses(ac, *args)
    params = ac.actor_params()
    grads = dict(zip(params, torch.autograd.grad(loss, list(params.values()))))
    assert clip_grad_norm(grads, 0.5) > 0.5
    norm = math.sqrt(sum(float((g ** 2).sum()) for g in grads.values()))
    assert abs(norm - 0.5) <= 1e-9


# --- training ------------------------------------------------------------------

def test_selection_score_bound():
    assert selection_score(0.0, 1.0, 1.0) == 0.0
    assert selection_score(0.3, 0.9, 0.8) > 0.0


def test_train_agent_deterministic(tmp_path):
    env = _env()
    train = [_slide(12 + i % 5, i) for i in range(8)]
    val = [_slide(14, 100 + i) for i in range(4)]
    cfg = PpoConfig(epochs=2, rollout_episodes=4, hidden=5, budget=0.25)
    ac1, c1, hist = train_agent(train, val, env, cfg)
    _, c2, _ = train_agent(train, val, env, cfg)
    assert c1.to_bytes() == c2.to_bytes()
    assert len(hist) == 2 and c1.metadata["epoch"] in (-1, 0, 1)
    ac3, cfg3 = agent_from_checkpoint(c1)
    assert cfg3.budget == 0.25
    r1 = evaluate_policy(env, val, ac1, 0.25)
    r3 = evaluate_policy(env, val, ac3, 0.25)
    assert [t.actions for t in r1.traces] == [t.actions for t in r3.traces]


def test_ppo_config_validation():
    with pytest.raises(ValueError):
        PpoConfig(clip_eps=0)
    with pytest.raises(ValueError):
        PpoConfig(gamma=0)
    with pytest.raises(ValueError):
        PpoConfig(budget=1.5)
    assert PpoConfig(optimizer={"lr0": 1e-5}).optimizer == OptimizerConfig(lr0=1e-5)


@pytest.mark.slow
def test_full_budget_prediction_equals_hafed(components):
    env = components.env("targeted")
    ac = ActorCritic(32, 8)
    for slide, bag in list(zip(components.slides["test"], components.bags["test"]))[:5]:
        trace, S = rollout_episode(slide, env, ac, 1.0)
        assert torch.equal(S, slide.V)
        with torch.no_grad():
            full = float(components.hafed(torch.as_tensor(bag.U, dtype=DTYPE)).y_hat)
        assert abs(trace.y_hat - full) < 1e-12
