"""Input validation helpers shared by the estimator and the harness."""

from __future__ import annotations

from collections.abc import Iterable, Mapping

from sgpo.chain_env import ChainTask


def check_tasks(X) -> list[ChainTask]:
    """Coerce ``X`` (a task, a task dict, or an iterable of either) to a task list."""
    if isinstance(X, (ChainTask, Mapping)):
        X = [X]
    if not isinstance(X, Iterable) or isinstance(X, (str, bytes)):
        raise TypeError(f"expected ChainTask(s), got {type(X).__name__}")
    tasks = [t if isinstance(t, ChainTask) else ChainTask.from_dict(t) for t in X]
    if not tasks:
        raise ValueError("at least one task is required")
    names = [t.name for t in tasks]
    if len(set(names)) != len(names):
        raise ValueError(f"task names must be unique, got {names}")
    return tasks


def check_probability(name: str, value, open_interval: bool = True) -> float:
    value = float(value)
    ok = 0.0 < value < 1.0 if open_interval else 0.0 <= value <= 1.0
    if not ok:
        raise ValueError(f"{name} must lie in {'(0, 1)' if open_interval else '[0, 1]'}")
    return value
