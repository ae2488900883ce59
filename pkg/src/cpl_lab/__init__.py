"""Contrastive preference learning on tabular MDPs.

Exact MaxEnt oracles, synthetic preference datasets, the CPL loss family
with analytic gradients, first-order trainers, baselines and a seeded
experiment pipeline.
"""
from .baselines import naive_advantage_mle, percent_bc, select_top_trajectories, sft
from .estimators import BehaviorCloning, CPLPolicy, NaiveAdvantageMLE, PercentBC, SupervisedFineTuning
from .exceptions import (ConfigError, ConsistencyError, ContractError, DivergenceError, ParameterError,
                         SizeError, SolverError, StageError)
from .experiment import ResultRecord, evaluate, run, sweep
from .mdp import (Segment, TabularMDP, Trajectory, build_gridworld, build_random_mdp,
                  build_single_state_bandit, sample_rollout)
from .objectives import (LossConfig, PreferenceObjective, Variant, comparison_matrix, compute_loss,
                         cpl_bc_loss, cpl_kl_loss, cpl_lambda_loss, cpl_loss, cpl_ranking_loss,
                         dense_batch_loss, hessian_psd_check, null_space_shift, ood_renormalizer)
from .oracle import SoftSolution, policy_from_advantage, soft_value_iteration, verify_consistency
from .preferences import (LabelMode, PreferenceDataset, PreferenceModel, PreferencePair, RankingGroup,
                          build_dense_dataset, build_rankings, build_sparse_dataset, load_dataset,
                          save_dataset)
from .trainer import OptimizerConfig, TrainTrace, bc_pretrain, gradient_check, train

__version__ = "0.1.0"
