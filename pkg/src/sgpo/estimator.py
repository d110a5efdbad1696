"""scikit-learn style estimator wrapper around the group trainer."""

from __future__ import annotations

from typing import Optional

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from sgpo._validation import check_tasks
from sgpo.group_opt import TrainerConfig, run_training
from sgpo.judge import JudgeConfig, NoiseModel
from sgpo.policy import PolicyParams, greedy_actions, success_probability
from sgpo.reward import ShapingConfig


class GroupPolicyOptimizer(BaseEstimator):
    """Fit a tabular softmax policy to chain tasks with GRPO or SGPO.

    ``fit`` takes a task or list of tasks (``ChainTask`` or dicts in the task
    JSON schema); ``predict`` returns the greedy action sequence per task and
    ``predict_proba`` the probability of emitting the correct sequence.

    Parameters
    ----------
    method : {"sgpo", "grpo"}
    group_size, prompts_per_batch, step_size, n_iter :
        Sampling and ascent schedule.
    beta, gamma, shaping_mode :
        Sigmoid shaping of incorrect responses (``"linear_rts"`` uses the
        raw score).
    gating : {"all_negative_only", "always", "first_epochs"}
    judge_flip_prob, judge_votes :
        Mock step-wise judge noise and majority-vote size.
    random_state : int or None
    """

    def __init__(
        self,
        method: str = "sgpo",
        group_size: int = 8,
        prompts_per_batch: int = 1,
        step_size: float = 1.0,
        n_iter: int = 100,
        beta: float = 10.0,
        gamma: float = 0.5,
        shaping_mode: str = "all_incorrect",
        gating: str = "all_negative_only",
        gating_epochs: int = 3,
        clip_epsilon: Optional[float] = None,
        importance_sampling: bool = False,
        inner_steps: int = 1,
        judge_flip_prob: float = 0.0,
        judge_votes: int = 1,
        logit_cap: float = 50.0,
        keep_params: bool = False,
        random_state: Optional[int] = None,
    ):
        self.method = method
        self.group_size = group_size
        self.prompts_per_batch = prompts_per_batch
        self.step_size = step_size
        self.n_iter = n_iter
        self.beta = beta
        self.gamma = gamma
        self.shaping_mode = shaping_mode
        self.gating = gating
        self.gating_epochs = gating_epochs
        self.clip_epsilon = clip_epsilon
        self.importance_sampling = importance_sampling
        self.inner_steps = inner_steps
        self.judge_flip_prob = judge_flip_prob
        self.judge_votes = judge_votes
        self.logit_cap = logit_cap
        self.keep_params = keep_params
        self.random_state = random_state

    def _config(self) -> TrainerConfig:
        return TrainerConfig(
            group_size=self.group_size,
            prompts_per_batch=self.prompts_per_batch,
            step_size=self.step_size,
            iterations=self.n_iter,
            reward_mode=self.method,
            shaping=ShapingConfig(self.beta, self.gamma, self.shaping_mode),
            gating=self.gating,
            gating_epochs=self.gating_epochs,
            clip_epsilon=self.clip_epsilon,
            importance_sampling=self.importance_sampling,
            inner_steps=self.inner_steps,
            judge=JudgeConfig(NoiseModel(self.judge_flip_prob), self.judge_votes),
            logit_cap=self.logit_cap,
        )

    def fit(self, X, y=None, init_params: PolicyParams | None = None):
        tasks = check_tasks(X)
        config = self._config()
        if self.random_state is None:
            seed = int(np.random.SeedSequence().generate_state(1)[0])
        else:
            seed = int(self.random_state)
        init = init_params if init_params is not None else PolicyParams.init(tasks)
        self.config_ = config
        self.tasks_ = tasks
        self.trace_ = run_training(init, tasks, config, seed, keep_params=self.keep_params)
        self.params_ = self.trace_.final_params
        self.n_iter_ = config.iterations
        return self

    def _fitted_tasks(self, X):
        check_is_fitted(self, "params_")
        tasks = self.tasks_ if X is None else check_tasks(X)
        for t in tasks:
            if t.state_key(()) not in self.params_:
                raise ValueError(f"task {t.name!r} was not seen during fit")
        return tasks

    def predict(self, X=None) -> list[tuple[int, ...]]:
        return [greedy_actions(self.params_, t) for t in self._fitted_tasks(X)]

    def predict_proba(self, X=None) -> np.ndarray:
        return np.array([success_probability(self.params_, t) for t in self._fitted_tasks(X)])

    def score(self, X=None, y=None) -> float:
        """Mean probability of sampling the correct sequence."""
        return float(self.predict_proba(X).mean())
