"""Group-relative policy optimization with step-wise guided rewards on chain tasks."""

from sgpo.chain_env import ChainTask, Trajectory, brute_force_expected_gradient, enumerate_trajectories, trajectory_probability
from sgpo.estimator import GroupPolicyOptimizer
from sgpo.dynamics import DynamicsState, DynamicsTrace, Method, check_sgpo_dominance, run_dynamics, paired_traces
from sgpo.group_opt import Gating, RewardMode, TrainerConfig, compute_advantages, estimate_gradient, run_training
from sgpo.policy import PolicyParams
from sgpo.reward import ShapingConfig, ShapingMode, outcome_reward, rts, sgpo_reward

__version__ = "0.1.0"

__all__ = [
    "ChainTask",
    "DynamicsState",
    "DynamicsTrace",
    "Gating",
    "GroupPolicyOptimizer",
    "Method",
    "PolicyParams",
    "RewardMode",
    "ShapingConfig",
    "ShapingMode",
    "TrainerConfig",
    "Trajectory",
    "brute_force_expected_gradient",
    "check_sgpo_dominance",
    "compute_advantages",
    "enumerate_trajectories",
    "estimate_gradient",
    "outcome_reward",
    "rts",
    "run_dynamics",
    "run_training",
    "sgpo_reward",
    "paired_traces",
    "trajectory_probability",
]
