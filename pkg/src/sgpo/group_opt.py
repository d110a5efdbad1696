"""Group-relative policy optimization with outcome (GRPO) or shaped (SGPO) rewards."""

from __future__ import annotations

import enum
import time
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from sgpo._rng import as_generator, named_stream
from sgpo.chain_env import ChainTask, Trajectory
from sgpo.judge import JudgeConfig, judged_rts
from sgpo.policy import (
    PolicyParams,
    correct_path_entropies,
    correct_path_probs,
    log_prob,
    sample_batch,
    score_sum,
    success_probability,
)
from sgpo.reward import ShapingConfig, ShapingMode, sgpo_reward

STD_EPS = 1e-12


class RewardMode(str, enum.Enum):
    GRPO = "grpo"
    SGPO = "sgpo"


class Gating(str, enum.Enum):
    ALWAYS = "always"
    ALL_NEGATIVE_ONLY = "all_negative_only"
    FIRST_EPOCHS = "first_epochs"


class DivergenceError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainerConfig:
    """Hyperparameters of the group policy-gradient trainer.

    ``gating`` decides which groups receive shaped rewards under SGPO:
    every group, only all-negative groups, or only all-negative groups during
    the first ``gating_epochs`` iterations.
    """

    group_size: int = 8
    prompts_per_batch: int = 1
    step_size: float = 1.0
    iterations: int = 100
    reward_mode: RewardMode = RewardMode.SGPO
    shaping: ShapingConfig = field(default_factory=ShapingConfig)
    gating: Gating = Gating.ALL_NEGATIVE_ONLY
    gating_epochs: int = 3
    clip_epsilon: Optional[float] = None
    importance_sampling: bool = False
    inner_steps: int = 1
    judge: JudgeConfig = field(default_factory=JudgeConfig)
    logit_cap: float = 50.0

    def __post_init__(self):
        object.__setattr__(self, "reward_mode", RewardMode(self.reward_mode))
        object.__setattr__(self, "gating", Gating(self.gating))
        if isinstance(self.shaping, dict):
            object.__setattr__(self, "shaping", ShapingConfig(**self.shaping))
        if isinstance(self.judge, dict):
            object.__setattr__(self, "judge", JudgeConfig(**self.judge))
        if self.group_size < 2:
            raise ValueError("group_size must be at least 2")
        if self.prompts_per_batch < 1:
            raise ValueError("prompts_per_batch must be at least 1")
        if self.step_size < 0:
            raise ValueError("step_size must be nonnegative")
        if self.iterations < 0:
            raise ValueError("iterations must be nonnegative")
        if self.gating_epochs < 0:
            raise ValueError("gating_epochs must be nonnegative")
        if self.inner_steps < 1:
            raise ValueError("inner_steps must be at least 1")
        if self.clip_epsilon is not None:
            if not 0.0 < self.clip_epsilon < 1.0:
                raise ValueError("clip_epsilon must lie in (0, 1)")
            if not self.importance_sampling:
                raise ValueError("clip_epsilon requires importance_sampling=True")

    def to_dict(self) -> dict:
        return {
            "group_size": self.group_size,
            "prompts_per_batch": self.prompts_per_batch,
            "step_size": self.step_size,
            "iterations": self.iterations,
            "reward_mode": self.reward_mode.value,
            "shaping": self.shaping.to_dict(),
            "gating": self.gating.value,
            "gating_epochs": self.gating_epochs,
            "clip_epsilon": self.clip_epsilon,
            "importance_sampling": self.importance_sampling,
            "inner_steps": self.inner_steps,
            "judge": self.judge.to_dict(),
            "logit_cap": self.logit_cap,
        }


# -- rewards and advantages ----------------------------------------------------


def shaping_active(config: TrainerConfig, all_negative, iteration: int = 0):
    """Whether a group's incorrect responses get shaped rewards (array-friendly)."""
    all_negative = np.asarray(all_negative, dtype=bool)
    if config.reward_mode is RewardMode.GRPO:
        return np.zeros_like(all_negative)
    if config.gating is Gating.FIRST_EPOCHS:
        return all_negative & (iteration < config.gating_epochs)
    if config.gating is Gating.ALL_NEGATIVE_ONLY or config.shaping.mode is ShapingMode.ALL_NEGATIVE_GROUPS_ONLY:
        return all_negative
    return np.ones_like(all_negative)


def group_rewards(
    trajs: Sequence[Trajectory],
    task: ChainTask,
    config: TrainerConfig,
    iteration: int = 0,
    scores: Sequence | None = None,
) -> list[float]:
    """Rewards used for one group's advantages, after gating.

    ``scores`` optionally supplies judged RTS values per trajectory.
    """
    outcomes = [float(t.correct) for t in trajs]
    if not shaping_active(config, not any(outcomes), iteration):
        return outcomes
    if scores is None:
        scores = [None] * len(trajs)
    return [sgpo_reward(t, task, config.shaping, score=s) for t, s in zip(trajs, scores)]


def _standardize(rewards: np.ndarray) -> np.ndarray:
    """Row-wise ``(r - mean) / std`` with population std; constant rows map to 0."""
    r = np.asarray(rewards, dtype=float)
    mean = r.mean(axis=-1, keepdims=True)
    std = r.std(axis=-1, keepdims=True)
    flat = std < STD_EPS
    out = (r - mean) / np.where(flat, 1.0, std)
    return np.where(flat, 0.0, out)


def compute_advantages(rewards: Sequence[float]) -> np.ndarray:
    r = np.asarray(rewards, dtype=float)
    if r.ndim != 1 or r.size < 2:
        raise ValueError("compute_advantages needs a group of at least 2 rewards")
    return _standardize(r[None, :])[0]


# -- batches ---------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class GroupSample:
    task: ChainTask
    trajectories: tuple[Trajectory, ...]
    rewards: np.ndarray
    advantages: np.ndarray
    all_negative: bool

    @property
    def task_id(self) -> str:
        return self.task.name


@dataclass(eq=False)
class _TaskBatch:
    """All groups drawn for one task, deduplicated by trajectory."""

    task: ChainTask
    actions: np.ndarray  # (n_groups, G, H)
    unique: np.ndarray  # (U, H)
    inverse: np.ndarray  # (n_groups * G,)
    rewards: np.ndarray  # (n_groups, G), after gating
    outcomes: np.ndarray  # (n_groups, G)
    advantages: np.ndarray  # (n_groups, G)
    all_negative: np.ndarray  # (n_groups,)

    @property
    def n_groups(self) -> int:
        return self.actions.shape[0]


@dataclass(eq=False)
class Batch:
    parts: list[_TaskBatch]
    group_size: int

    @property
    def n_groups(self) -> int:
        return sum(p.n_groups for p in self.parts)

    @property
    def frac_all_negative(self) -> float:
        n = self.n_groups
        return float(sum(p.all_negative.sum() for p in self.parts) / n) if n else float("nan")

    @property
    def mean_outcome(self) -> float:
        n = self.n_groups
        return float(sum(p.outcomes.sum() for p in self.parts) / (n * self.group_size)) if n else float("nan")

    def groups(self) -> list[GroupSample]:
        out = []
        for part in self.parts:
            for i in range(part.n_groups):
                trajs = tuple(part.task.trajectory(a) for a in part.actions[i])
                out.append(
                    GroupSample(part.task, trajs, part.rewards[i].copy(), part.advantages[i].copy(), bool(part.all_negative[i]))
                )
        return out


def _task_batch(
    params: PolicyParams,
    task: ChainTask,
    n_groups: int,
    config: TrainerConfig,
    rng: np.random.Generator,
    iteration: int,
) -> _TaskBatch:
    G, H = config.group_size, task.horizon
    flat = sample_batch(params, task, rng, n_groups * G)
    unique, inverse = np.unique(flat, axis=0, return_inverse=True)
    inverse = inverse.reshape(-1)
    trajs = [task.trajectory(u) for u in unique]
    out_u = np.array([float(t.correct) for t in trajs])
    outcomes = out_u[inverse].reshape(n_groups, G)
    all_negative = outcomes.max(axis=1) == 0.0
    active = shaping_active(config, all_negative, iteration)
    rewards = outcomes.copy()
    if active.any():
        if config.judge.is_oracle:
            shaped_u = np.array([sgpo_reward(t, task, config.shaping) for t in trajs])
            shaped = shaped_u[inverse].reshape(n_groups, G)
            rewards[active] = shaped[active]
        else:
            inv = inverse.reshape(n_groups, G)
            for i in np.flatnonzero(active):
                for k in range(G):
                    t = trajs[inv[i, k]]
                    if not t.correct:
                        score = judged_rts(t, task, config.judge, rng)
                        rewards[i, k] = sgpo_reward(t, task, config.shaping, score=score)
    advantages = _standardize(rewards)
    return _TaskBatch(
        task, flat.reshape(n_groups, G, H), unique, inverse, rewards, outcomes, advantages, all_negative
    )


def sample_groups(
    params: PolicyParams,
    tasks: ChainTask | Sequence[ChainTask],
    config: TrainerConfig,
    rng,
    iteration: int = 0,
) -> Batch:
    """Draw ``prompts_per_batch`` prompts uniformly from ``tasks`` and a group for each.

    Each task samples from its own named stream keyed by task name and
    iteration, derived from one seed drawn from ``rng``.
    """
    if isinstance(tasks, ChainTask):
        tasks = [tasks]
    rng = as_generator(rng)
    seed = int(rng.integers(0, 2**63 - 1))
    if len(tasks) == 1:
        counts = np.array([config.prompts_per_batch])
    else:
        picks = named_stream(seed, "prompts", iteration).integers(len(tasks), size=config.prompts_per_batch)
        counts = np.bincount(picks, minlength=len(tasks))
    parts = []
    for task, n in zip(tasks, counts):
        if n:
            parts.append(_task_batch(params, task, int(n), config, named_stream(seed, task.name, iteration), iteration))
    return Batch(parts, config.group_size)


def batch_gradient(params: PolicyParams, batch: Batch) -> np.ndarray:
    """REINFORCE-style group estimator ``(1/NGH) sum s_theta * A``."""
    grad = np.zeros(params.size)
    for part in batch.parts:
        w_u = np.bincount(part.inverse, weights=part.advantages.reshape(-1), minlength=part.unique.shape[0])
        g = np.zeros(params.size)
        for u in np.flatnonzero(w_u):
            g += w_u[u] * score_sum(params, part.task, part.unique[u])
        grad += g / part.task.horizon
    return grad / (batch.n_groups * batch.group_size)


def _active_ratio_weights(ratio: np.ndarray, adv: np.ndarray, clip_epsilon: Optional[float]) -> np.ndarray:
    """Per-sample weight ``ratio * A`` where the unclipped surrogate term is selected."""
    if clip_epsilon is None:
        return ratio * adv
    active = np.where(adv > 0, ratio <= 1.0 + clip_epsilon, ratio >= 1.0 - clip_epsilon)
    return np.where(active & (adv != 0), ratio * adv, 0.0)


def batch_surrogate_gradient(
    params: PolicyParams, old_params: PolicyParams, batch: Batch, clip_epsilon: Optional[float]
) -> np.ndarray:
    grad = np.zeros(params.size)
    for part in batch.parts:
        task = part.task
        ratio_u = np.array(
            [np.exp(log_prob(params, task, u) - log_prob(old_params, task, u)) for u in part.unique]
        )
        ratio = ratio_u[part.inverse].reshape(part.advantages.shape)
        w = _active_ratio_weights(ratio, part.advantages, clip_epsilon)
        w_u = np.bincount(part.inverse, weights=w.reshape(-1), minlength=part.unique.shape[0])
        g = np.zeros(params.size)
        for u in np.flatnonzero(w_u):
            g += w_u[u] * score_sum(params, task, part.unique[u])
        grad += g / task.horizon
    return grad / (batch.n_groups * batch.group_size)


def estimate_gradient(
    params: PolicyParams,
    tasks: ChainTask | Sequence[ChainTask],
    config: TrainerConfig,
    rng,
    iteration: int = 0,
    return_batch: bool = False,
):
    """Sample one batch of groups and return the group policy-gradient estimate."""
    batch = sample_groups(params, tasks, config, rng, iteration)
    grad = batch_gradient(params, batch)
    return (grad, batch) if return_batch else grad


def surrogate_objective(
    params: PolicyParams, old_params: PolicyParams, group: GroupSample, clip_epsilon: Optional[float]
) -> float:
    """``(1/GH) sum_k min(rho_k A_k, clip(rho_k, 1-eps, 1+eps) A_k)``."""
    task = group.task
    total = 0.0
    for traj, adv in zip(group.trajectories, group.advantages):
        rho = np.exp(log_prob(params, task, traj.actions) - log_prob(old_params, task, traj.actions))
        if clip_epsilon is None:
            total += rho * adv
        else:
            total += min(rho * adv, float(np.clip(rho, 1 - clip_epsilon, 1 + clip_epsilon)) * adv)
    return float(total / (len(group.trajectories) * task.horizon))


def clipped_surrogate_gradient(
    params: PolicyParams, old_params: PolicyParams, group: GroupSample, clip_epsilon: Optional[float]
) -> np.ndarray:
    """Gradient of :func:`surrogate_objective` with respect to ``params``."""
    task = group.task
    G = len(group.trajectories)
    grad = np.zeros(params.size)
    for traj, adv in zip(group.trajectories, group.advantages):
        if adv == 0.0:
            continue
        rho = np.exp(log_prob(params, task, traj.actions) - log_prob(old_params, task, traj.actions))
        w = _active_ratio_weights(np.array(rho), np.array(adv), clip_epsilon)
        if w != 0.0:
            grad += float(w) * score_sum(params, task, traj.actions)
    return grad / (G * task.horizon)


# -- training loop -------------------------------------------------------------------


@dataclass
class TrainingTrace:
    """Per-iteration training record; row ``k`` describes the policy at iteration ``k``.

    Batch statistics in row ``k`` come from the batch that produced the
    update out of iteration ``k`` (NaN on the final row).
    """

    horizon: int
    iters: list[int] = field(default_factory=list)
    success_prob: list[float] = field(default_factory=list)
    mean_reward: list[float] = field(default_factory=list)
    frac_all_negative: list[float] = field(default_factory=list)
    grad_norm: list[float] = field(default_factory=list)
    correct_prob: list[list[float]] = field(default_factory=list)
    entropy: list[list[float]] = field(default_factory=list)
    wall_ms: list[float] = field(default_factory=list)
    params: list[PolicyParams] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.iters)

    @property
    def final_params(self) -> PolicyParams:
        return self.params[-1]

    def columns(self, include_timing: bool = False) -> list[str]:
        cols = ["iter", "success_prob", "mean_reward", "frac_all_negative", "grad_norm"]
        cols += [f"correct_prob_state_{h}" for h in range(self.horizon)]
        cols += [f"entropy_state_{h}" for h in range(self.horizon)]
        if include_timing:
            cols.append("wall_ms")
        return cols

    def rows(self, include_timing: bool = False) -> list[list]:
        out = []
        for i in range(len(self)):
            row = [self.iters[i], self.success_prob[i], self.mean_reward[i], self.frac_all_negative[i], self.grad_norm[i]]
            row += list(self.correct_prob[i]) + list(self.entropy[i])
            if include_timing:
                row.append(self.wall_ms[i])
            out.append(row)
        return out

    def iterations_to(self, threshold: float) -> Optional[int]:
        """First iteration whose success probability reaches ``threshold``."""
        for k, s in zip(self.iters, self.success_prob):
            if s >= threshold:
                return k
        return None


def _mean_over_tasks(values: list[list[float]], horizon: int) -> list[float]:
    out = []
    for h in range(horizon):
        col = [v[h] for v in values if h < len(v)]
        out.append(float(np.mean(col)) if col else float("nan"))
    return out


def _record(trace: TrainingTrace, k: int, params: PolicyParams, tasks: Sequence[ChainTask], keep_params: bool):
    trace.iters.append(k)
    trace.success_prob.append(float(np.mean([success_probability(params, t) for t in tasks])))
    trace.correct_prob.append(_mean_over_tasks([correct_path_probs(params, t) for t in tasks], trace.horizon))
    trace.entropy.append(_mean_over_tasks([correct_path_entropies(params, t) for t in tasks], trace.horizon))
    if keep_params or not trace.params:
        trace.params.append(params)
    else:
        trace.params[-1] = params


def run_training(
    initial: PolicyParams,
    tasks: ChainTask | Sequence[ChainTask],
    config: TrainerConfig,
    rng=0,
    keep_params: bool = False,
) -> TrainingTrace:
    """Run ``config.iterations`` steps of gradient ascent.

    ``rng`` is a seed or a Generator; iteration ``k`` samples from the named
    stream ``(seed, "iteration", k)``.
    """
    if isinstance(tasks, ChainTask):
        tasks = [tasks]
    tasks = list(tasks)
    if isinstance(rng, np.random.Generator):
        base_seed = int(rng.integers(0, 2**63 - 1))
    else:
        base_seed = int(rng)
    trace = TrainingTrace(horizon=max(t.horizon for t in tasks))
    params = initial
    t0 = time.perf_counter()
    for k in range(config.iterations):
        _record(trace, k, params, tasks, keep_params)
        batch = sample_groups(params, tasks, config, named_stream(base_seed, "iteration", k), iteration=k)
        if config.importance_sampling:
            old = params
            grad = batch_surrogate_gradient(params, old, batch, config.clip_epsilon)
            first = grad
            params = params.with_vector(params.vector + config.step_size * grad)
            for _ in range(config.inner_steps - 1):
                grad = batch_surrogate_gradient(params, old, batch, config.clip_epsilon)
                params = params.with_vector(params.vector + config.step_size * grad)
            grad = first
        else:
            grad = batch_gradient(params, batch)
            params = params.with_vector(params.vector + config.step_size * grad)
        trace.mean_reward.append(batch.mean_outcome)
        trace.frac_all_negative.append(batch.frac_all_negative)
        trace.grad_norm.append(float(np.linalg.norm(grad)))
        trace.wall_ms.append((time.perf_counter() - t0) * 1e3)
        if params.max_abs_logit() > config.logit_cap:
            raise DivergenceError(
                f"logit magnitude {params.max_abs_logit():.3g} exceeds cap {config.logit_cap} at iteration {k + 1}"
            )
    _record(trace, config.iterations, params, tasks, keep_params)
    trace.mean_reward.append(float("nan"))
    trace.frac_all_negative.append(float("nan"))
    trace.grad_norm.append(float("nan"))
    trace.wall_ms.append((time.perf_counter() - t0) * 1e3)
    return trace
