"""Synthetic multi-step chain tasks and exact enumeration oracles."""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

MAX_ENUMERATION = 10**6


class EnumerationTooLarge(ValueError):
    """Raised when an exhaustive enumeration would exceed ``MAX_ENUMERATION``."""


@dataclass(frozen=True)
class Trajectory:
    """An emitted action sequence together with its first-error position.

    ``first_error`` is 1-based; ``None`` means every emitted step is correct.
    A trajectory with ``emitted_steps < horizon`` models a truncated rollout.
    """

    actions: tuple[int, ...]
    horizon: int
    first_error: Optional[int]

    @property
    def emitted_steps(self) -> int:
        return len(self.actions)

    @property
    def truncated(self) -> bool:
        return self.emitted_steps < self.horizon

    @property
    def correct(self) -> bool:
        return not self.truncated and self.first_error is None


@dataclass(frozen=True)
class ChainTask:
    """A deterministic-transition task with one correct action per step.

    Actions are 1-based. By default the correct action at every step is the
    highest index, so the two-step, two-action task has ground truth (2, 2).
    ``restricted_space`` (two-step tasks only) forbids a correct second step
    after an incorrect first step.
    """

    horizon: int
    actions_per_step: int = 2
    correct_actions: tuple[int, ...] = field(default=())
    restricted_space: bool = False
    name: str = "x"

    def __post_init__(self):
        if int(self.horizon) != self.horizon or self.horizon < 1:
            raise ValueError("horizon must be a positive integer")
        if int(self.actions_per_step) != self.actions_per_step or self.actions_per_step < 2:
            raise ValueError("actions_per_step must be an integer >= 2")
        correct = tuple(int(a) for a in self.correct_actions)
        if not correct:
            correct = (self.actions_per_step,) * self.horizon
        if len(correct) != self.horizon:
            raise ValueError(
                f"correct_actions has length {len(correct)}, expected horizon={self.horizon}"
            )
        for h, a in enumerate(correct, start=1):
            if not 1 <= a <= self.actions_per_step:
                raise ValueError(f"correct action {a} at step {h} outside [1, {self.actions_per_step}]")
        object.__setattr__(self, "correct_actions", correct)
        if self.restricted_space and self.horizon != 2:
            # The exclusion rule is only defined for two-step tasks.
            raise ValueError("restricted_space is only supported for horizon=2")
        if "/" in self.name:
            raise ValueError("task name may not contain '/'")

    @classmethod
    def stylized(cls) -> "ChainTask":
        """The two-step, two-action task over {(1,1), (2,1), (2,2)}."""
        return cls(horizon=2, actions_per_step=2, restricted_space=True)

    # -- structure -----------------------------------------------------------

    def allowed_actions(self, prefix: Sequence[int]) -> tuple[int, ...]:
        prefix = tuple(prefix)
        if len(prefix) >= self.horizon:
            raise ValueError(f"prefix {prefix} has no successor (horizon={self.horizon})")
        allowed = tuple(range(1, self.actions_per_step + 1))
        if self.restricted_space and len(prefix) == 1 and prefix[0] != self.correct_actions[0]:
            allowed = tuple(a for a in allowed if a != self.correct_actions[1])
        return allowed

    def prefixes(self) -> list[tuple[int, ...]]:
        """Every reachable prefix of length < horizon, breadth-first."""
        out: list[tuple[int, ...]] = [()]
        frontier: list[tuple[int, ...]] = [()]
        for _ in range(self.horizon - 1):
            frontier = [p + (a,) for p in frontier for a in self.allowed_actions(p)]
            out.extend(frontier)
        return out

    def state_key(self, prefix: Sequence[int]) -> tuple:
        return (self.name, *prefix)

    def first_error(self, actions: Sequence[int]) -> Optional[int]:
        for h, (a, c) in enumerate(zip(actions, self.correct_actions), start=1):
            if a != c:
                return h
        return None

    def trajectory(self, actions: Sequence[int]) -> Trajectory:
        actions = tuple(int(a) for a in actions)
        if len(actions) > self.horizon:
            raise ValueError(f"trajectory of length {len(actions)} exceeds horizon {self.horizon}")
        return Trajectory(actions, self.horizon, self.first_error(actions))

    def contains(self, actions: Sequence[int]) -> bool:
        actions = tuple(actions)
        if len(actions) != self.horizon:
            return False
        return all(a in self.allowed_actions(actions[:h]) for h, a in enumerate(actions))

    @property
    def correct_trajectory(self) -> Trajectory:
        return self.trajectory(self.correct_actions)

    # -- serialization -------------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "horizon": self.horizon,
            "actions_per_step": self.actions_per_step,
            "correct_actions": list(self.correct_actions),
            "restricted_space": self.restricted_space,
            "name": self.name,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "ChainTask":
        return cls(
            horizon=doc["horizon"],
            actions_per_step=doc.get("actions_per_step", 2),
            correct_actions=tuple(doc.get("correct_actions") or ()),
            restricted_space=bool(doc.get("restricted_space", False)),
            name=doc.get("name", "x"),
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ChainTask":
        return cls.from_dict(json.loads(text))


def space_size(task: ChainTask) -> int:
    if task.restricted_space:
        return sum(len(task.allowed_actions((a,))) for a in task.allowed_actions(()))
    return task.actions_per_step**task.horizon


def enumerate_trajectories(task: ChainTask) -> list[Trajectory]:
    """All complete trajectories in the task's (possibly restricted) space."""
    n = space_size(task)
    if n > MAX_ENUMERATION:
        raise EnumerationTooLarge(f"{n} trajectories exceeds the limit of {MAX_ENUMERATION}")
    out = [[]]
    for _ in range(task.horizon):
        out = [p + [a] for p in out for a in task.allowed_actions(p)]
    return [task.trajectory(p) for p in out]


def trajectory_probability(task: ChainTask, params, traj: Trajectory | Sequence[int]) -> float:
    """Probability of a complete trajectory under the autoregressive policy."""
    from sgpo.policy import action_probs

    actions = traj.actions if isinstance(traj, Trajectory) else tuple(traj)
    if not task.contains(actions):
        raise ValueError(f"trajectory {actions} is outside the task's space")
    prob = 1.0
    for h, a in enumerate(actions):
        prefix = actions[:h]
        allowed = task.allowed_actions(prefix)
        if len(allowed) == 1:
            continue
        prob *= float(action_probs(params, task.state_key(prefix))[allowed.index(a)])
    return prob


def brute_force_expected_gradient(
    task: ChainTask,
    params,
    reward_mode: str | Callable = "sgpo",
    G: int = 2,
    *,
    config=None,
) -> np.ndarray:
    """Exact expectation of the single-prompt group gradient estimator.

    Sums over every ordered G-tuple of trajectories, weighting by the joint
    probability and applying the same reward gating and advantage rule the
    trainer uses. ``reward_mode`` is ``"grpo"``, ``"sgpo"`` (linear RTS credit
    unless ``config`` says otherwise) or a callable mapping a list of
    trajectories to a list of rewards.
    """
    from sgpo.group_opt import TrainerConfig, compute_advantages, group_rewards
    from sgpo.policy import score_sum
    from sgpo.reward import ShapingConfig, ShapingMode

    if G < 2:
        raise ValueError("G must be at least 2")
    space = enumerate_trajectories(task)
    if len(space) ** G > MAX_ENUMERATION:
        raise EnumerationTooLarge(
            f"{len(space)}^{G} ordered groups exceeds the limit of {MAX_ENUMERATION}"
        )

    if callable(reward_mode):
        rewarder = reward_mode
    else:
        if config is None:
            config = TrainerConfig(
                group_size=G,
                reward_mode=reward_mode,
                shaping=ShapingConfig(mode=ShapingMode.LINEAR_RTS),
            )

        def rewarder(trajs):
            return group_rewards(trajs, task, config)

    probs = np.array([trajectory_probability(task, params, t) for t in space])
    scores = np.array([score_sum(params, task, t.actions) for t in space])
    grad = np.zeros(params.size)
    for idx in itertools.product(range(len(space)), repeat=G):
        weight = float(np.prod(probs[list(idx)]))
        if weight == 0.0:
            continue
        adv = compute_advantages(rewarder([space[i] for i in idx]))
        for i, a in zip(idx, adv):
            if a != 0.0:
                grad += weight * a * scores[i]
    return grad / (G * task.horizon)
