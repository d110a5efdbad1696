"""Tabular softmax policies over chain-task prefixes."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from sgpo.chain_env import ChainTask, Trajectory

LOGIT_CAP = 50.0


class LogitSaturationWarning(RuntimeWarning):
    pass


def _key_to_str(key: tuple) -> str:
    return "/".join(str(k) for k in key)


def _str_to_key(text: str) -> tuple:
    name, *rest = text.split("/")
    return (name, *(int(a) for a in rest))


def softmax(logits: np.ndarray) -> np.ndarray:
    z = np.asarray(logits, dtype=float)
    z = np.exp(z - z.max(axis=-1, keepdims=True))
    return z / z.sum(axis=-1, keepdims=True)


@dataclass(frozen=True, eq=False)
class PolicyParams:
    """Logit table, one row per branching state, stored as a flat vector.

    A state key is ``(task_name, a_1, ..., a_h)``. States with a single
    allowed action are deterministic and carry no logits. Rows are laid out
    breadth-first, so the stylized task's vector is
    ``(theta_1^{x,1}, theta_1^{x,2}, theta_2^{x,2,1}, theta_2^{x,2,2})``.
    """

    keys: tuple[tuple, ...]
    actions: tuple[tuple[int, ...], ...]
    vector: np.ndarray

    def __post_init__(self):
        v = np.array(self.vector, dtype=float)
        if v.ndim != 1 or v.size != sum(len(a) for a in self.actions):
            raise ValueError("logit vector does not match the state layout")
        if not np.all(np.isfinite(v)):
            raise ValueError("logits must be finite")
        v.setflags(write=False)
        object.__setattr__(self, "vector", v)
        offsets = np.cumsum([0] + [len(a) for a in self.actions])
        object.__setattr__(self, "_offsets", offsets)
        object.__setattr__(self, "_index", {k: i for i, k in enumerate(self.keys)})

    # -- construction ----------------------------------------------------------

    @classmethod
    def init(cls, tasks: ChainTask | Iterable[ChainTask], value: float = 0.0) -> "PolicyParams":
        if isinstance(tasks, ChainTask):
            tasks = [tasks]
        keys, actions = [], []
        for task in tasks:
            for prefix in task.prefixes():
                allowed = task.allowed_actions(prefix)
                if len(allowed) > 1:
                    key = task.state_key(prefix)
                    if key in keys:
                        raise ValueError(f"duplicate state {key}; task names must be unique")
                    keys.append(key)
                    actions.append(allowed)
        vec = np.full(sum(len(a) for a in actions), float(value))
        return cls(tuple(keys), tuple(actions), vec)

    @classmethod
    def stylized(cls, p: float, q: float, task: ChainTask | None = None) -> "PolicyParams":
        """Stylized-task logits realising step-1 and step-2 likelihoods p, q."""
        task = task or ChainTask.stylized()
        base = cls.init(task)
        vec = np.zeros(base.size)
        for prob, key in ((p, task.state_key(())), (q, task.state_key(task.correct_actions[:1]))):
            if not 0.0 < prob < 1.0:
                raise ValueError("likelihoods must lie in (0, 1)")
            start, stop = base.slice(key)
            vec[stop - 1] = math.log(prob) - math.log1p(-prob)
        return base.with_vector(vec)

    def with_vector(self, vector: np.ndarray) -> "PolicyParams":
        return PolicyParams(self.keys, self.actions, vector)

    # -- access ----------------------------------------------------------------

    @property
    def size(self) -> int:
        return int(self.vector.size)

    def __contains__(self, key) -> bool:
        return tuple(key) in self._index

    def slice(self, key) -> tuple[int, int]:
        try:
            i = self._index[tuple(key)]
        except KeyError:
            raise KeyError(f"unknown state {key!r}") from None
        return int(self._offsets[i]), int(self._offsets[i + 1])

    def row(self, key) -> np.ndarray:
        start, stop = self.slice(key)
        return self.vector[start:stop]

    def actions_at(self, key) -> tuple[int, ...]:
        return self.actions[self._index[tuple(key)]] if tuple(key) in self._index else ()

    def max_abs_logit(self) -> float:
        return float(np.max(np.abs(self.vector))) if self.size else 0.0

    # -- serialization -----------------------------------------------------------

    def to_dict(self) -> dict:
        return {_key_to_str(k): self.row(k).tolist() for k in self.keys}

    @classmethod
    def from_dict(cls, doc: dict, tasks: ChainTask | Iterable[ChainTask] | None = None) -> "PolicyParams":
        if tasks is not None:
            base = cls.init(tasks)
            vec = np.zeros(base.size)
            for text, row in doc.items():
                start, stop = base.slice(_str_to_key(text))
                if len(row) != stop - start:
                    raise ValueError(f"state {text} expects {stop - start} logits, got {len(row)}")
                vec[start:stop] = row
            return base.with_vector(vec)
        keys = tuple(_str_to_key(t) for t in doc)
        actions = tuple(tuple(range(1, len(r) + 1)) for r in doc.values())
        return cls(keys, actions, np.concatenate([np.asarray(r, float) for r in doc.values()]))


def check_saturation(params: PolicyParams, cap: float = LOGIT_CAP) -> bool:
    """Warn and return True when any logit magnitude exceeds ``cap``."""
    if params.max_abs_logit() > cap:
        warnings.warn(
            f"logit magnitude {params.max_abs_logit():.3g} exceeds cap {cap}",
            LogitSaturationWarning,
            stacklevel=2,
        )
        return True
    return False


def action_probs(params: PolicyParams, state) -> np.ndarray:
    return softmax(params.row(state))


def score(params: PolicyParams, state, action: int) -> np.ndarray:
    """Gradient of ``log pi(action | state)`` with respect to every logit."""
    start, stop = params.slice(state)
    allowed = params.actions_at(state)
    if action not in allowed:
        raise ValueError(f"action {action} is not allowed at state {state!r}")
    out = np.zeros(params.size)
    out[start:stop] = -softmax(params.vector[start:stop])
    out[start + allowed.index(action)] += 1.0
    return out


def step_entropy(params: PolicyParams, state) -> float:
    """Shannon entropy (nats) of the action distribution at ``state``."""
    pr = action_probs(params, state)
    pr = pr[pr > 0]
    return float(-(pr * np.log(pr)).sum())


def _branching_steps(params: PolicyParams, task: ChainTask, actions: Sequence[int]):
    for h, a in enumerate(actions):
        key = task.state_key(actions[:h])
        if key in params:
            yield key, a


def log_prob(params: PolicyParams, task: ChainTask, actions: Sequence[int]) -> float:
    actions = tuple(actions)
    total = 0.0
    for key, a in _branching_steps(params, task, actions):
        row = params.row(key)
        m = row.max()
        lse = m + math.log(np.exp(row - m).sum())
        total += row[params.actions_at(key).index(a)] - lse
    return float(total)


def score_sum(params: PolicyParams, task: ChainTask, actions: Sequence[int]) -> np.ndarray:
    """Sum over steps of the per-step score functions of one trajectory."""
    actions = tuple(actions)
    out = np.zeros(params.size)
    for key, a in _branching_steps(params, task, actions):
        start, stop = params.slice(key)
        out[start:stop] -= softmax(params.vector[start:stop])
        out[start + params.actions_at(key).index(a)] += 1.0
    return out


def correct_path_probs(params: PolicyParams, task: ChainTask) -> list[float]:
    """Probability of the correct action at each state along the correct prefix."""
    out = []
    for h, a in enumerate(task.correct_actions):
        key = task.state_key(task.correct_actions[:h])
        if key in params:
            out.append(float(action_probs(params, key)[params.actions_at(key).index(a)]))
        else:
            out.append(1.0)
    return out


def success_probability(params: PolicyParams, task: ChainTask) -> float:
    return float(np.prod(correct_path_probs(params, task)))


def correct_path_entropies(params: PolicyParams, task: ChainTask) -> list[float]:
    out = []
    for h in range(task.horizon):
        key = task.state_key(task.correct_actions[:h])
        out.append(step_entropy(params, key) if key in params else 0.0)
    return out


def greedy_actions(params: PolicyParams, task: ChainTask) -> tuple[int, ...]:
    actions: list[int] = []
    for _ in range(task.horizon):
        key = task.state_key(actions)
        allowed = task.allowed_actions(actions)
        if key in params:
            actions.append(allowed[int(np.argmax(params.row(key)))])
        else:
            actions.append(allowed[0])
    return tuple(actions)


def sample_batch(params: PolicyParams, task: ChainTask, rng: np.random.Generator, n: int) -> np.ndarray:
    """Draw ``n`` trajectories autoregressively; returns an ``(n, H)`` int array.

    Rows sharing a prefix are sampled together by inverse-CDF on a single
    uniform draw per row and step.
    """
    out = np.zeros((n, task.horizon), dtype=np.int64)
    groups: dict[tuple, np.ndarray] = {(): np.arange(n)}
    for h in range(task.horizon):
        u = rng.random(n)
        nxt: dict[tuple, np.ndarray] = {}
        for prefix in sorted(groups):
            rows = groups[prefix]
            allowed = task.allowed_actions(prefix)
            key = task.state_key(prefix)
            if key in params:
                cdf = np.cumsum(action_probs(params, key))
                pick = np.minimum(np.searchsorted(cdf, u[rows], side="right"), len(allowed) - 1)
            else:
                pick = np.zeros(rows.size, dtype=np.int64)
            chosen = np.asarray(allowed)[pick]
            out[rows, h] = chosen
            if h + 1 < task.horizon:
                for j, a in enumerate(allowed):
                    sel = rows[pick == j]
                    if sel.size:
                        nxt[prefix + (a,)] = sel
        groups = nxt
    return out


def sample_trajectory(params: PolicyParams, task: ChainTask, rng: np.random.Generator) -> Trajectory:
    return task.trajectory(sample_batch(params, task, rng, 1)[0])
