import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from sgpo.chain_env import ChainTask, enumerate_trajectories
from sgpo.judge import (
    AuditLog,
    JudgeConfig,
    NoiseModel,
    NoisyJudge,
    OracleJudge,
    judge_trajectory,
    judged_rts,
    majority_vote,
    noisy_judgment,
    oracle_first_error,
    verdict_record,
)
from sgpo.reward import rts

STYLIZED = ChainTask.stylized()
FIVE = ChainTask(horizon=5)


def majority_accuracy(flip, votes, trials, seed, traj=None):
    """Fraction of trials whose voted error matches the truth, and its standard error."""
    rng = np.random.default_rng(seed)
    space = enumerate_trajectories(FIVE)
    cfg = JudgeConfig(NoiseModel(flip), votes)
    hits = 0
    for _ in range(trials):
        t = traj or space[int(rng.integers(len(space)))]
        hits += judge_trajectory(t, FIVE, cfg, rng).first_error == t.first_error
    acc = hits / trials
    return acc, math.sqrt(max(acc * (1 - acc), 1e-12) / trials)


def test_oracle_stylized_verdicts():
    assert oracle_first_error(STYLIZED.trajectory((2, 1)), STYLIZED) == 2
    assert oracle_first_error(STYLIZED.trajectory((2, 2)), STYLIZED) is None
    assert oracle_first_error(STYLIZED.trajectory((1, 1)), STYLIZED) == 1


@pytest.mark.parametrize(
    "votes, expected",
    [([3, 3, 4], 3), ([2, 4, 4, 2, 5], 2), ([None, None, None], None), ([None, 2, None], None), ([None, 3, 3], 3)],
)
def test_majority_vote_examples(votes, expected):
    assert majority_vote(votes) == expected


def test_majority_vote_none_needs_strict_majority():
    assert majority_vote([None, None, 1, 2]) == 1
    assert majority_vote([None]) is None


def test_majority_vote_empty_rejected():
    with pytest.raises(ValueError):
        majority_vote([])


@given(st.lists(st.one_of(st.none(), st.integers(1, 6)), min_size=1, max_size=15), st.randoms())
def test_majority_vote_order_independent(votes, rnd):
    shuffled = list(votes)
    rnd.shuffle(shuffled)
    assert majority_vote(shuffled) == majority_vote(votes)


@given(st.lists(st.one_of(st.none(), st.integers(1, 6)), min_size=1, max_size=15))
def test_majority_vote_returns_a_cast_vote(votes):
    assert majority_vote(votes) in votes


def test_zero_flip_matches_oracle(rng):
    noise = NoiseModel(0.0)
    for t in enumerate_trajectories(FIVE):
        assert noisy_judgment(t, FIVE, noise, rng) == t.first_error


def test_single_call_agreement_rate():
    rng = np.random.default_rng(7)
    noise = NoiseModel(0.3)
    traj = FIVE.trajectory((2, 2, 1, 2, 2))
    hits = sum(noisy_judgment(traj, FIVE, noise, rng) == 3 for _ in range(10**5))
    assert abs(hits / 10**5 - 0.7) <= 0.01


def test_uniform_wrong_never_returns_truth(rng):
    noise = NoiseModel(0.45)
    traj = FIVE.trajectory((2, 1, 2, 2, 2))
    seen = set()
    for _ in range(2000):
        v = noisy_judgment(traj, FIVE, noise, rng)
        if v != 2:
            seen.add(v)
    assert seen == {1, 3, 4, 5, None}


def test_offset_displacement_clamped(rng):
    noise = NoiseModel(0.4, {-10: 1.0})
    traj = FIVE.trajectory((2, 2, 2, 1, 2))
    votes = {noisy_judgment(traj, FIVE, noise, rng) for _ in range(500)}
    assert votes == {1, 4}
    # "no error" sits at H + 1 for offsets, so +1 clamps back to H.
    noise = NoiseModel(0.4, {1: 1.0})
    votes = {noisy_judgment(FIVE.correct_trajectory, FIVE, noise, rng) for _ in range(500)}
    assert votes == {None, 5}


def test_condorcet_direction_near_half():
    traj = FIVE.trajectory((2, 2, 1, 2, 2))
    rng = np.random.default_rng(11)
    noise = NoiseModel(0.49)
    trials = 10**5
    single = sum(noisy_judgment(traj, FIVE, noise, rng) == 3 for _ in range(trials)) / trials
    hits = 0
    for _ in range(trials):
        votes = [noisy_judgment(traj, FIVE, noise, rng) for _ in range(11)]
        hits += majority_vote(votes) == 3
    assert hits / trials > single


def test_nine_votes_at_flip_point_two():
    rng = np.random.default_rng(2024)
    space = enumerate_trajectories(FIVE)
    cfg = JudgeConfig(NoiseModel(0.2), 9)
    trials = 10**4
    hits = 0
    for _ in range(trials):
        t = space[int(rng.integers(len(space)))]
        hits += judged_rts(t, FIVE, cfg, rng) == rts(t)
    assert hits / trials >= 0.95


def test_accuracy_monotone_in_vote_count():
    results = [majority_accuracy(0.3, v, 10**4, 100 + v) for v in (1, 3, 5, 7, 9)]
    for (a, sa), (b, sb) in zip(results, results[1:]):
        assert b >= a - 2 * math.hypot(sa, sb)


def test_accuracy_monotone_in_flip_prob():
    results = [majority_accuracy(f, 5, 10**4, 200 + i) for i, f in enumerate((0.0, 0.1, 0.2, 0.3, 0.4))]
    for (a, sa), (b, sb) in zip(results, results[1:]):
        assert b <= a + 2 * math.hypot(sa, sb)


def test_verdict_deterministic_given_seed():
    cfg = JudgeConfig(NoiseModel(0.3), 7)
    traj = FIVE.trajectory((2, 1, 1, 1, 1))
    a = judge_trajectory(traj, FIVE, cfg, np.random.default_rng(5))
    b = judge_trajectory(traj, FIVE, cfg, np.random.default_rng(5))
    assert a == b and a.vote_count == 7


def test_oracle_path_ignores_vote_count():
    traj = FIVE.trajectory((2, 2, 2, 1, 1))
    verdicts = {judge_trajectory(traj, FIVE, JudgeConfig(NoiseModel(0.0), v)).first_error for v in (1, 3, 9)}
    assert verdicts == {4}


def test_oracle_judged_rts_exact_on_full_enumeration():
    for t in enumerate_trajectories(FIVE):
        assert judged_rts(t, FIVE) == rts(t)


def test_judged_rts_from_voted_error():
    traj = FIVE.trajectory((2, 2, 2, 2, 1))
    verdict = judge_trajectory(traj, FIVE, judge=OracleJudge())
    assert judged_rts(traj, FIVE, verdict=verdict.__class__(4, (4, 4, 3))) == Fraction(3, 5)
    assert verdict.first_error == 5


def test_noisy_judge_requires_rng():
    with pytest.raises(ValueError):
        judge_trajectory(FIVE.correct_trajectory, FIVE, JudgeConfig(NoiseModel(0.1), 3))


def test_custom_judge_backend_is_pluggable(rng):
    class AlwaysFirst:
        def first_error(self, traj, task, rng):
            return 1

    verdict = judge_trajectory(FIVE.correct_trajectory, FIVE, JudgeConfig(vote_count=3), rng, judge=AlwaysFirst())
    assert verdict.first_error == 1 and verdict.votes == (1, 1, 1)
    assert isinstance(NoisyJudge(NoiseModel(0.1)).first_error(FIVE.correct_trajectory, FIVE, rng), (int, type(None)))


@pytest.mark.parametrize("votes", [0, 2, 4])
def test_even_or_zero_vote_counts_rejected(votes):
    with pytest.raises(ValueError):
        JudgeConfig(vote_count=votes)


def test_flip_prob_bounds():
    with pytest.raises(ValueError):
        NoiseModel(0.5)
    with pytest.raises(ValueError):
        NoiseModel(-0.1)


def test_audit_log_round_trip(tmp_path, rng):
    log = AuditLog(tmp_path / "audit" / "verdicts.jsonl")
    cfg = JudgeConfig(NoiseModel(0.2), 3)
    trajs = [FIVE.trajectory((2, 2, 1, 1, 1)), FIVE.correct_trajectory]
    for t in trajs:
        log.append(t, FIVE, judge_trajectory(t, FIVE, cfg, rng), iteration=0)
    records = log.read()
    assert len(records) == 2
    assert set(records[0]) == {"trajectory", "reference", "votes", "first_error", "rts", "iteration"}
    assert records[1]["reference"] == [2, 2, 2, 2, 2]
    first = verdict_record(trajs[0], FIVE, judge_trajectory(trajs[0], FIVE))
    assert first["rts"] == "2/5"
