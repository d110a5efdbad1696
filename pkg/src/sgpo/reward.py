"""Outcome reward, reasoning trajectory score and the shaped SGPO reward."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Optional

from sgpo.chain_env import ChainTask, Trajectory

_GROUND_TRUTH = object()


class ShapingMode(str, enum.Enum):
    ALL_INCORRECT = "all_incorrect"
    # Sigmoid shaping that the trainer only applies inside all-negative groups.
    ALL_NEGATIVE_GROUPS_ONLY = "all_negative_groups_only"
    LINEAR_RTS = "linear_rts"


@dataclass(frozen=True)
class ShapingConfig:
    """``beta`` is the sigmoid intensity, ``gamma`` its threshold on RTS."""

    beta: float = 10.0
    gamma: float = 0.5
    mode: ShapingMode = ShapingMode.ALL_INCORRECT

    def __post_init__(self):
        object.__setattr__(self, "mode", ShapingMode(self.mode))
        if not self.beta > 0:
            raise ValueError("beta must be positive")
        if not self.gamma > 0:
            raise ValueError("gamma must be positive")

    def to_dict(self) -> dict:
        return {"beta": self.beta, "gamma": self.gamma, "mode": self.mode.value}


def outcome_reward(traj: Trajectory, task: ChainTask | None = None) -> int:
    """Binary verifiable reward: 1 iff the full correct sequence was emitted."""
    if task is not None and traj.horizon != task.horizon:
        raise ValueError("trajectory horizon does not match task")
    return int(traj.correct)


def rts(traj: Trajectory, horizon: Optional[int] = None, first_error=_GROUND_TRUTH) -> Fraction:
    """Fraction of steps that are correct before the first error.

    ``first_error`` overrides the trajectory's own error index (used by
    judged scores); pass ``None`` to declare the trajectory error-free.
    """
    H = horizon if horizon is not None else traj.horizon
    err = traj.first_error if first_error is _GROUND_TRUTH else first_error
    if err is not None:
        return Fraction(err - 1, H)
    if traj.emitted_steps < H:
        return Fraction(traj.emitted_steps, H)
    return Fraction(1)


def shape(score: Fraction | float, cfg: ShapingConfig) -> float:
    """Map an incorrect response's RTS to its shaped reward."""
    if cfg.mode is ShapingMode.LINEAR_RTS:
        return float(score)
    z = -cfg.beta * (float(score) - cfg.gamma)
    # 1 / (1 + e^z) without overflow for large |z|.
    if z >= 0:
        ez = math.exp(-z)
        return ez / (1.0 + ez)
    return 1.0 / (1.0 + math.exp(z))


def sgpo_reward(traj: Trajectory, task: ChainTask, cfg: ShapingConfig = ShapingConfig(), score=None) -> float:
    """1 for correct responses, the shaped RTS otherwise.

    ``score`` lets a judged RTS replace the ground-truth one.
    """
    if outcome_reward(traj, task):
        return 1.0
    return shape(rts(traj, task.horizon) if score is None else score, cfg)
