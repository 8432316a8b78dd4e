"""Offline reinforcement learning for ventilator weaning and sedation.

The pipeline runs cohort -> GP imputation -> MDP transitions -> fitted
Q-iteration -> distilled tree policy -> deviation-group evaluation. Every
stage is also reachable from the ``ventwean`` command line.
"""

from .cohort import (
    PatientEpisode, SedationEvent, VentilationInterval, VitalsSample, export_episodes,
    filter_admissions, ingest_episodes, split_train_test,
)
from .errors import (
    ArtifactError, ConfigError, DivergenceError, NumericalError, ParseError, TrainingError,
    ValidationError, VentweanError,
)
from .evaluation import (
    accumulated_reward, action_accuracy, agreement_fraction, build_report, count_reintubations,
    deviation_groups,
)
from .fqi import FqiConfig, QFunction, bellman_targets, fqi_train, greedy_action, q_learning_train
from .gp_impute import (
    GPModel, GPOptConfig, SpectralBasisParams, basis_kernel, fit_gp, impute_cohort, impute_episode,
    lmc_covariance, posterior_mean,
)
from .mdp import Action, RewardConfig, TransitionSet, build_state, build_transitions, extract_action, map_sedation_level, reward
from .policy import PolicyModel, extract_policy, feature_importances, recommend
from .regressors import (
    MLPModel, TreeEnsemble, TreeEnsembleParams, et_fit, et_predict, gini_importance, mlp_fit_epoch,
    mlp_predict,
)
from .simulate import SimConfig, simulate_cohort

__version__ = "0.1.0"
