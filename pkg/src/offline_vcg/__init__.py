"""Offline learning of dynamic VCG mechanisms on tabular episodic MDPs."""
from .data import (
    DataDistribution,
    DatasetParseError,
    EmptyDatasetError,
    Exclude,
    OfflineDataset,
    SinglePlus,
    Total,
    aggregate_rewards,
    load_dataset,
    sample_dataset,
    save_dataset,
)
from .diagnostics import (
    ErrorBudget,
    empirical_vs_bound,
    err_opt,
    err_stat_unit,
    shift_coefficient,
    theorem_bound,
)
from .kernels import BACKEND
from .learner import (
    EvalConfig,
    Mode,
    SpiConfig,
    VcgLearnConfig,
    compute_lambda_eta,
    covering_log_bounds,
    epsilon_s,
    evaluate_policy,
    mirror_descent_update,
    offline_vcg_learn,
    soft_policy_iteration,
)
from .mdp import (
    InputError,
    MixturePolicy,
    QTable,
    RewardProfile,
    StagePolicy,
    TabularMdp,
    VisitationMeasure,
    exact_optimal,
    m2_mdp,
    m2_profile,
    policy_value,
    random_instance,
    visitation,
)
from .mechanism import (
    GridFamily,
    MechanismOutcome,
    check_desiderata,
    exact_vcg,
    subopt_agent,
    subopt_seller,
    subopt_welfare,
    vcg_price,
)

__version__ = "0.1.0"
