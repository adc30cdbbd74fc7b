from .evaluation import (
    EmpiricalModel,
    EvalConfig,
    EvalResult,
    Mode,
    empirical_backup,
    empirical_bellman_error,
    empirical_loss,
    evaluate_on_model,
    evaluate_policy,
)
from .hyper import compute_eta, compute_lambda_eta, covering_log_bounds, epsilon_s, theory_epsilon_s
from .spi import (
    SpiConfig,
    SpiOutput,
    SpiSide,
    evaluate_mixture,
    mirror_descent_update,
    soft_policy_iteration,
    soft_policy_iteration_on_model,
)
from .vcg_learn import LearnDiagnostics, VcgLearnConfig, offline_vcg_learn
