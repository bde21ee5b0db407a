"""Offline safe imitation learning from non-preferred and unlabeled demonstrations."""

from .cmdp import (
    Policy,
    TabularCmdp,
    Trajectory,
    build_hazard_grid,
    build_speed_chain,
    exact_policy_eval,
    rollout,
    solve_constrained,
    solve_unconstrained,
)
from .data import TrajectoryDataset, assemble_datasets, generate_raw_pool, label_pool
from .evaluation import EvalReport, bootstrap_ci, cvar_cost, evaluate_policy, normalize
from .mil import CostModelConfig, bag_score, bt_loss, lemma1_probability, sample_bag, train_cost_model
from .nn import MlpModel, adam_step, grad_check
from .policy import PolicyLearnConfig, train_bc, train_dwbc_nu, train_safemil_policy, train_trex_wbc

__version__ = "0.1.0"

__all__ = [
    "CostModelConfig",
    "EvalReport",
    "MlpModel",
    "Policy",
    "PolicyLearnConfig",
    "TabularCmdp",
    "Trajectory",
    "TrajectoryDataset",
    "adam_step",
    "assemble_datasets",
    "bag_score",
    "bootstrap_ci",
    "bt_loss",
    "build_hazard_grid",
    "build_speed_chain",
    "cvar_cost",
    "evaluate_policy",
    "exact_policy_eval",
    "generate_raw_pool",
    "grad_check",
    "label_pool",
    "lemma1_probability",
    "normalize",
    "rollout",
    "sample_bag",
    "solve_constrained",
    "solve_unconstrained",
    "train_bc",
    "train_cost_model",
    "train_dwbc_nu",
    "train_safemil_policy",
    "train_trex_wbc",
]
