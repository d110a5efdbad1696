import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from sgpo.chain_env import ChainTask, brute_force_expected_gradient
from sgpo.dynamics import DynamicsState, Method, run_dynamics
from sgpo.group_opt import (
    DivergenceError,
    Gating,
    GroupSample,
    RewardMode,
    TrainerConfig,
    clipped_surrogate_gradient,
    compute_advantages,
    estimate_gradient,
    group_rewards,
    run_training,
    sample_groups,
    surrogate_objective,
)
from sgpo.judge import JudgeConfig, NoiseModel
from sgpo.policy import PolicyParams, correct_path_probs, score_sum
from sgpo.reward import ShapingConfig, ShapingMode

STYLIZED = ChainTask.stylized()
CHAIN4 = ChainTask(horizon=4, actions_per_step=3, name="chain4")
LINEAR = ShapingConfig(mode=ShapingMode.LINEAR_RTS)


def stylized_config(method, n, G=2, **kw):
    return TrainerConfig(group_size=G, prompts_per_batch=n, reward_mode=method, shaping=LINEAR, gating=Gating.ALWAYS, **kw)


# -- advantages ----------------------------------------------------------------------


def test_two_distinct_rewards_give_plus_minus_one():
    np.testing.assert_array_equal(compute_advantages([1, 0]), [1.0, -1.0])
    np.testing.assert_array_equal(compute_advantages([0.25, 0.75]), [-1.0, 1.0])


def test_constant_rewards_give_exact_zeros():
    adv = compute_advantages([1, 1, 1, 1])
    assert adv.tolist() == [0.0, 0.0, 0.0, 0.0]


def test_three_level_rewards():
    # population std of (1, 1/2, 0) is sqrt(1/6), so the outer advantages are sqrt(3/2)
    np.testing.assert_allclose(compute_advantages([1, 0.5, 0]), [1.224744871391589, 0.0, -1.224744871391589], atol=1e-15)


def test_advantages_need_two_rewards():
    with pytest.raises(ValueError):
        compute_advantages([1.0])


rewards_strategy = st.lists(st.floats(-5, 5, allow_nan=False), min_size=2, max_size=16)


@given(rewards_strategy)
def test_advantages_centred(rewards):
    adv = compute_advantages(rewards)
    if np.std(rewards) >= 1e-12:
        assert abs(adv.sum()) <= 1e-9
    else:
        assert not adv.any()


@given(rewards_strategy, st.floats(-10, 10))
def test_advantages_shift_invariant(rewards, c):
    r = np.asarray(rewards)
    if np.std(r) < 1e-6:
        return
    np.testing.assert_allclose(compute_advantages(r + c), compute_advantages(r), atol=1e-12)


# -- config --------------------------------------------------------------------------


def test_clip_requires_importance_sampling():
    with pytest.raises(ValueError, match="importance_sampling"):
        TrainerConfig(clip_epsilon=0.2)
    TrainerConfig(clip_epsilon=0.2, importance_sampling=True)


@pytest.mark.parametrize("kwargs", [{"group_size": 1}, {"prompts_per_batch": 0}, {"step_size": -1.0}, {"clip_epsilon": 1.5, "importance_sampling": True}])
def test_config_rejects_invalid(kwargs):
    with pytest.raises(ValueError):
        TrainerConfig(**kwargs)


def test_config_defaults_and_dict_inputs():
    cfg = TrainerConfig(shaping={"beta": 5.0, "gamma": 0.3}, judge={"noise": {"flip_prob": 0.1}, "vote_count": 3})
    assert cfg.group_size == 8 and cfg.step_size == 1.0
    assert cfg.gating is Gating.ALL_NEGATIVE_ONLY and cfg.reward_mode is RewardMode.SGPO
    assert cfg.shaping.beta == 5.0 and cfg.judge.vote_count == 3
    assert TrainerConfig(**{**cfg.to_dict(), "shaping": cfg.to_dict()["shaping"]}).to_dict() == cfg.to_dict()


# -- gating ----------------------------------------------------------------------------


def _group(task, *actions):
    return [task.trajectory(a) for a in actions]


def test_all_negative_only_uses_outcomes_when_a_correct_response_exists():
    cfg = TrainerConfig()
    trajs = _group(CHAIN4, (3, 3, 3, 3), (3, 1, 1, 1), (1, 1, 1, 1))
    assert group_rewards(trajs, CHAIN4, cfg) == [1.0, 0.0, 0.0]


def test_all_negative_only_shapes_all_negative_groups():
    cfg = TrainerConfig()
    trajs = _group(CHAIN4, (3, 3, 1, 1), (1, 1, 1, 1))
    r = group_rewards(trajs, CHAIN4, cfg)
    assert r[0] == pytest.approx(0.5) and 0 < r[1] < 0.01


def test_always_gating_shapes_mixed_groups():
    cfg = TrainerConfig(gating=Gating.ALWAYS)
    r = group_rewards(_group(CHAIN4, (3, 3, 3, 3), (3, 3, 1, 1)), CHAIN4, cfg)
    assert r[0] == 1.0 and r[1] == pytest.approx(0.5)


def test_first_epochs_gating_turns_off():
    cfg = TrainerConfig(gating=Gating.FIRST_EPOCHS, gating_epochs=3)
    trajs = _group(CHAIN4, (3, 3, 1, 1), (1, 1, 1, 1))
    assert group_rewards(trajs, CHAIN4, cfg, iteration=2)[0] == pytest.approx(0.5)
    assert group_rewards(trajs, CHAIN4, cfg, iteration=3) == [0.0, 0.0]


def test_grpo_never_shapes():
    cfg = TrainerConfig(reward_mode="grpo", gating=Gating.ALWAYS)
    assert group_rewards(_group(CHAIN4, (3, 3, 1, 1), (1, 1, 1, 1)), CHAIN4, cfg) == [0.0, 0.0]


def test_groups_respect_gating_per_group():
    params = PolicyParams.init(CHAIN4).with_vector(np.tile([0.0, 0.0, 1.5], 40))
    cfg = TrainerConfig(group_size=4, prompts_per_batch=300)
    batch = sample_groups(params, CHAIN4, cfg, np.random.default_rng(0))
    groups = batch.groups()
    assert 0 < sum(g.all_negative for g in groups) < len(groups)
    for g in groups:
        outcomes = [float(t.correct) for t in g.trajectories]
        assert g.all_negative == (max(outcomes) == 0.0)
        if not g.all_negative:
            assert g.rewards.tolist() == outcomes
        if g.rewards.std() >= 1e-12:
            assert abs(g.advantages.sum()) <= 1e-9


# -- estimator -------------------------------------------------------------------------


@pytest.mark.parametrize(
    "method, expected",
    [("sgpo", [-0.125, 0.125, -0.03125, 0.03125]), ("grpo", [-0.0625, 0.0625, -0.0625, 0.0625])],
)
def test_monte_carlo_estimate_at_half(method, expected):
    g = estimate_gradient(PolicyParams.stylized(0.5, 0.5), STYLIZED, stylized_config(method, 10**6), 0)
    np.testing.assert_allclose(g, expected, atol=3e-3, rtol=0)


def test_estimator_error_shrinks_with_samples():
    # A 4-sigma band per coordinate, where sigma^2 is the per-group variance over M.
    params = PolicyParams.stylized(0.6, 0.4)
    oracle = brute_force_expected_gradient(STYLIZED, params, "sgpo", 2)
    errs = []
    for m in (10**4, 10**5, 10**6):
        g = estimate_gradient(params, STYLIZED, stylized_config("sgpo", m), m)
        err = np.abs(g - oracle).max()
        assert err <= 4 * 0.5 / math.sqrt(m)
        errs.append(err)
    assert errs[-1] < errs[0]


def test_estimator_matches_oracle_on_unrestricted_chain():
    task = ChainTask(horizon=2, actions_per_step=3, name="c")
    base = PolicyParams.init(task)
    params = base.with_vector(np.random.default_rng(1).normal(size=base.size))
    cfg = TrainerConfig(group_size=2, prompts_per_batch=4 * 10**5, gating=Gating.ALWAYS)
    oracle = brute_force_expected_gradient(task, params, "sgpo", 2, config=cfg)
    g = estimate_gradient(params, task, cfg, 3)
    np.testing.assert_allclose(g, oracle, atol=3e-3)


def test_identical_rewards_give_zero_gradient():
    # Every response is wrong at step 1 with near-certainty, so all rewards coincide.
    params = PolicyParams.init(CHAIN4).with_vector(np.tile([30.0, 0.0, 0.0], 40))
    cfg = TrainerConfig(group_size=8, prompts_per_batch=16, reward_mode="grpo")
    g = estimate_gradient(params, CHAIN4, cfg, 0)
    assert np.array_equal(g, np.zeros(params.size))


def test_estimate_is_seed_deterministic():
    cfg = TrainerConfig(group_size=8, prompts_per_batch=16)
    params = PolicyParams.init(CHAIN4)
    a = estimate_gradient(params, CHAIN4, cfg, 9)
    b = estimate_gradient(params, CHAIN4, cfg, 9)
    assert np.array_equal(a, b)


def test_batch_gradient_matches_per_group_sum():
    params = PolicyParams.init(CHAIN4).with_vector(np.random.default_rng(2).normal(size=120))
    cfg = TrainerConfig(group_size=4, prompts_per_batch=25)
    g, batch = estimate_gradient(params, CHAIN4, cfg, 4, return_batch=True)
    manual = np.zeros(params.size)
    for grp in batch.groups():
        for t, a in zip(grp.trajectories, grp.advantages):
            manual += a * score_sum(params, CHAIN4, t.actions)
    manual /= 25 * 4 * CHAIN4.horizon
    np.testing.assert_allclose(g, manual, atol=1e-14)


def test_multi_task_prompts_are_spread():
    other = ChainTask(horizon=2, name="short")
    params = PolicyParams.init([CHAIN4, other])
    cfg = TrainerConfig(group_size=4, prompts_per_batch=200)
    batch = sample_groups(params, [CHAIN4, other], cfg, np.random.default_rng(0))
    counts = {p.task.name: p.n_groups for p in batch.parts}
    assert sum(counts.values()) == 200 and min(counts.values()) > 60


def test_noisy_judge_batches_are_deterministic():
    cfg = TrainerConfig(group_size=4, prompts_per_batch=32, judge=JudgeConfig(NoiseModel(0.2), 3))
    params = PolicyParams.init(CHAIN4)
    a = estimate_gradient(params, CHAIN4, cfg, 5)
    b = estimate_gradient(params, CHAIN4, cfg, 5)
    assert np.array_equal(a, b) and np.abs(a).sum() > 0


# -- clipped surrogate -------------------------------------------------------------


def _group_sample(params, seed, G=6):
    cfg = TrainerConfig(group_size=G, prompts_per_batch=1, gating=Gating.ALWAYS)
    for s in range(seed, seed + 100):
        grp = sample_groups(params, CHAIN4, cfg, np.random.default_rng(s)).groups()[0]
        if grp.advantages.any():
            return grp
    raise RuntimeError("no informative group found")


def test_surrogate_gradient_equals_reinforce_at_old_params():
    params = PolicyParams.init(CHAIN4).with_vector(np.random.default_rng(3).normal(size=120))
    grp = _group_sample(params, 0)
    reinforce = sum(a * score_sum(params, CHAIN4, t.actions) for t, a in zip(grp.trajectories, grp.advantages))
    reinforce = reinforce / (len(grp.trajectories) * CHAIN4.horizon)
    for eps in (None, 0.2):
        np.testing.assert_allclose(clipped_surrogate_gradient(params, params, grp, eps), reinforce, atol=1e-12)


def test_clipped_sample_contributes_nothing():
    old = PolicyParams.init(STYLIZED)
    traj = STYLIZED.trajectory((2, 2))
    new = PolicyParams.stylized(0.75, 0.75)  # ratio 2.25 for (2, 2)
    grp = GroupSample(STYLIZED, (traj,), np.array([1.0]), np.array([1.0]), False)
    assert not clipped_surrogate_gradient(new, old, grp, 0.2).any()
    neg = GroupSample(STYLIZED, (traj,), np.array([0.0]), np.array([-1.0]), False)
    assert clipped_surrogate_gradient(new, old, neg, 0.2).any()


@given(st.integers(0, 2**31), st.sampled_from([None, 0.1, 0.3]))
def test_surrogate_gradient_finite_differences(seed, eps):
    rng = np.random.default_rng(seed)
    old = PolicyParams.init(CHAIN4).with_vector(rng.normal(size=120))
    params = old.with_vector(old.vector + rng.normal(scale=0.05, size=120))
    grp = _group_sample(old, seed % 1000)
    analytic = clipped_surrogate_gradient(params, old, grp, eps)
    h = 1e-6
    numeric = np.zeros(params.size)
    for i in range(params.size):
        up, dn = params.vector.copy(), params.vector.copy()
        up[i] += h
        dn[i] -= h
        numeric[i] = (
            surrogate_objective(params.with_vector(up), old, grp, eps) - surrogate_objective(params.with_vector(dn), old, grp, eps)
        ) / (2 * h)
    np.testing.assert_allclose(numeric, analytic, atol=1e-5)


def test_importance_sampling_single_inner_step_matches_plain_training():
    base = dict(group_size=8, prompts_per_batch=4, iterations=10)
    plain = run_training(PolicyParams.init(CHAIN4), CHAIN4, TrainerConfig(**base), 3)
    is_ = run_training(PolicyParams.init(CHAIN4), CHAIN4, TrainerConfig(**base, importance_sampling=True), 3)
    np.testing.assert_allclose(is_.success_prob, plain.success_prob, atol=1e-12)


def test_clipped_training_runs_multiple_inner_steps():
    cfg = TrainerConfig(group_size=8, prompts_per_batch=4, iterations=30, importance_sampling=True, clip_epsilon=0.2, inner_steps=3)
    trace = run_training(PolicyParams.init(CHAIN4), CHAIN4, cfg, 1)
    assert trace.success_prob[-1] > trace.success_prob[0]


# -- training loop -------------------------------------------------------------------


def test_zero_step_size_leaves_parameters_constant():
    cfg = TrainerConfig(group_size=8, prompts_per_batch=2, step_size=0.0, iterations=15)
    init = PolicyParams.init(CHAIN4)
    trace = run_training(init, CHAIN4, cfg, 0)
    assert np.array_equal(trace.final_params.vector, init.vector)
    assert len(set(trace.success_prob)) == 1


def test_trace_shape_and_columns():
    cfg = TrainerConfig(group_size=4, prompts_per_batch=2, iterations=5)
    trace = run_training(PolicyParams.init(CHAIN4), CHAIN4, cfg, 0, keep_params=True)
    assert len(trace) == 6 and len(trace.params) == 6
    assert trace.columns()[:5] == ["iter", "success_prob", "mean_reward", "frac_all_negative", "grad_norm"]
    assert "entropy_state_3" in trace.columns() and "wall_ms" in trace.columns(include_timing=True)
    assert all(len(r) == len(trace.columns()) for r in trace.rows())
    assert math.isnan(trace.grad_norm[-1])


def test_training_is_seed_deterministic():
    cfg = TrainerConfig(group_size=8, prompts_per_batch=4, iterations=20)
    a = run_training(PolicyParams.init(CHAIN4), CHAIN4, cfg, 17)
    b = run_training(PolicyParams.init(CHAIN4), CHAIN4, cfg, 17)
    np.testing.assert_array_equal(np.array(a.rows(), float), np.array(b.rows(), float))


def test_divergence_guard():
    cfg = TrainerConfig(group_size=8, prompts_per_batch=4, step_size=500.0, iterations=50, logit_cap=20.0)
    with pytest.raises(DivergenceError):
        run_training(PolicyParams.init(CHAIN4), CHAIN4, cfg, 0)


def test_large_group_training_tracks_closed_form_first_iterations():
    # G=2 groups (the estimator the closed form describes), many prompts per step.
    cfg = stylized_config("sgpo", 2048, iterations=20)
    closed = run_dynamics(DynamicsState(0.5, 0.5, Method.SGPO), 20)
    for seed in range(3):
        trace = run_training(PolicyParams.init(STYLIZED), STYLIZED, cfg, seed)
        p = [c[0] for c in trace.correct_prob]
        assert np.max(np.abs(np.array(p) - closed.p)) <= 0.02


def test_population_step_equals_closed_form():
    for p, q in [(0.5, 0.5), (0.3, 0.8), (0.9, 0.2)]:
        for method in ("sgpo", "grpo"):
            params = PolicyParams.stylized(p, q)
            g = brute_force_expected_gradient(STYLIZED, params, method, 2)
            stepped = correct_path_probs(params.with_vector(params.vector + g), STYLIZED)
            closed = run_dynamics(DynamicsState(p, q, method), 1)
            assert stepped == pytest.approx([closed.p[1], closed.q[1]], abs=1e-12)
