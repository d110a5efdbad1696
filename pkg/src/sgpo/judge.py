"""Step-wise judges: exact first-error oracle, noisy mock judge, majority voting."""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Mapping, Optional, Protocol, Sequence

import numpy as np

from sgpo._rng import named_stream
from sgpo.chain_env import ChainTask, Trajectory
from sgpo.reward import rts

UNIFORM_WRONG = "uniform_wrong"


@dataclass(frozen=True)
class NoiseModel:
    """Per-call corruption of the judged error index.

    With probability ``flip_prob`` the answer is wrong. ``displacement`` is
    either ``"uniform_wrong"`` (uniform over every other answer, including
    "no error") or a mapping ``offset -> weight`` applied to the true index,
    with "no error" treated as index ``H + 1`` and the result clamped to
    ``[1, H]``.
    """

    flip_prob: float = 0.0
    displacement: str | Mapping[int, float] = UNIFORM_WRONG

    def __post_init__(self):
        if not 0.0 <= self.flip_prob < 0.5:
            raise ValueError("flip_prob must lie in [0, 0.5)")
        if isinstance(self.displacement, str):
            if self.displacement != UNIFORM_WRONG:
                raise ValueError(f"unknown displacement {self.displacement!r}")
        else:
            disp = {int(k): float(v) for k, v in dict(self.displacement).items()}
            if not disp or any(v < 0 for v in disp.values()) or sum(disp.values()) <= 0:
                raise ValueError("displacement weights must be nonnegative with positive total")
            object.__setattr__(self, "displacement", disp)

    def to_dict(self) -> dict:
        disp = self.displacement
        return {
            "flip_prob": self.flip_prob,
            "displacement": disp if isinstance(disp, str) else {str(k): v for k, v in disp.items()},
        }


@dataclass(frozen=True)
class JudgeConfig:
    noise: NoiseModel = field(default_factory=NoiseModel)
    vote_count: int = 1

    def __post_init__(self):
        if isinstance(self.noise, dict):
            object.__setattr__(self, "noise", NoiseModel(**self.noise))
        if self.vote_count < 1 or self.vote_count % 2 == 0:
            raise ValueError("vote_count must be an odd positive integer")

    @property
    def is_oracle(self) -> bool:
        return self.noise.flip_prob == 0.0

    def to_dict(self) -> dict:
        return {"noise": self.noise.to_dict(), "vote_count": self.vote_count}


@dataclass(frozen=True)
class JudgeVerdict:
    first_error: Optional[int]
    votes: tuple[Optional[int], ...]

    @property
    def vote_count(self) -> int:
        return len(self.votes)


class StepJudge(Protocol):
    """Anything that can locate the first incorrect step of a trajectory."""

    def first_error(self, traj: Trajectory, task: ChainTask, rng: np.random.Generator) -> Optional[int]:
        ...


def oracle_first_error(traj: Trajectory, task: ChainTask) -> Optional[int]:
    return task.first_error(traj.actions)


def noisy_judgment(
    traj: Trajectory, task: ChainTask, noise: NoiseModel, rng: np.random.Generator
) -> Optional[int]:
    truth = oracle_first_error(traj, task)
    if noise.flip_prob == 0.0 or rng.random() >= noise.flip_prob:
        return truth
    H = task.horizon
    if isinstance(noise.displacement, str):
        options = [h for h in range(1, H + 1) if h != truth]
        if truth is not None:
            options.append(None)
        return options[int(rng.integers(len(options)))]
    offsets = sorted(noise.displacement)
    weights = np.array([noise.displacement[o] for o in offsets])
    off = offsets[int(rng.choice(len(offsets), p=weights / weights.sum()))]
    position = (H + 1 if truth is None else truth) + off
    return int(min(max(position, 1), H))


class OracleJudge:
    def first_error(self, traj, task, rng=None):
        return oracle_first_error(traj, task)


class NoisyJudge:
    def __init__(self, noise: NoiseModel):
        self.noise = noise

    def first_error(self, traj, task, rng):
        return noisy_judgment(traj, task, self.noise, rng)


def majority_vote(votes: Sequence[Optional[int]]) -> Optional[int]:
    """Most frequent error index; ties go to the smaller index.

    "No error" (``None``) wins only with a strict majority of all votes.
    """
    if len(votes) == 0:
        raise ValueError("majority_vote needs at least one vote")
    counts = Counter(votes)
    if counts.get(None, 0) * 2 > len(votes):
        return None
    indexed = [(c, v) for v, c in counts.items() if v is not None]
    if not indexed:
        return None
    best = max(c for c, _ in indexed)
    return min(v for c, v in indexed if c == best)


def judge_trajectory(
    traj: Trajectory,
    task: ChainTask,
    config: JudgeConfig = JudgeConfig(),
    rng: np.random.Generator | None = None,
    judge: StepJudge | None = None,
) -> JudgeVerdict:
    """Collect ``vote_count`` independent judgments and aggregate them.

    Each vote draws from its own named substream of one seed taken from
    ``rng``, so votes may be computed in any order.
    """
    if judge is None:
        judge = OracleJudge() if config.is_oracle else NoisyJudge(config.noise)
    if isinstance(judge, OracleJudge):
        truth = judge.first_error(traj, task)
        return JudgeVerdict(truth, (truth,) * config.vote_count)
    if rng is None:
        raise ValueError("a noisy judge needs an explicit rng")
    seed = int(rng.integers(0, 2**63 - 1))
    votes = tuple(
        judge.first_error(traj, task, named_stream(seed, "vote", i)) for i in range(config.vote_count)
    )
    return JudgeVerdict(majority_vote(votes), votes)


def judged_rts(
    traj: Trajectory,
    task: ChainTask,
    config: JudgeConfig = JudgeConfig(),
    rng: np.random.Generator | None = None,
    verdict: JudgeVerdict | None = None,
) -> Fraction:
    if verdict is None:
        verdict = judge_trajectory(traj, task, config, rng)
    return rts(traj, task.horizon, first_error=verdict.first_error)


def verdict_record(traj: Trajectory, task: ChainTask, verdict: JudgeVerdict) -> dict:
    score = rts(traj, task.horizon, first_error=verdict.first_error)
    return {
        "trajectory": list(traj.actions),
        "reference": list(task.correct_actions),
        "votes": list(verdict.votes),
        "first_error": verdict.first_error,
        "rts": str(score),
    }


class AuditLog:
    """Append-only JSON-lines log of judge verdicts."""

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)

    def append(self, traj: Trajectory, task: ChainTask, verdict: JudgeVerdict, **extra) -> None:
        record = verdict_record(traj, task, verdict)
        record.update(extra)
        with self.path.open("a", encoding="utf-8") as fh:
            fh.write(json.dumps(record, sort_keys=True) + "\n")

    def read(self) -> list[dict]:
        if not self.path.exists():
            return []
        with self.path.open(encoding="utf-8") as fh:
            return [json.loads(line) for line in fh if line.strip()]
