"""Monte Carlo estimators, regression and the identity/inequality checkers."""

from .checks import (CheckError, check_logsob_path, check_poincare_path, check_state_inequalities,
                     clark_ocone_check, factorization_sweep, intertwine_check, projected_martingale_check,
                     run_paths)
from .core import (InequalityReport, McResult, NonFiniteSampleError, VectorMcResult, mc,
                   summarize, to_json, verdict)
from .diagnostics import (representation_sweep, chaos_check, cond_exp_check, dyson_suite, ibp_check,
                          jk_inverse_sweep, lipschitz_shift_check, wick_check)
from .heisenberg import heisenberg_suite, left_right_residual, martingale_drift
from .regression import RankDeficiencyWarning, RegressionModel, cond_exp_regression
from .semigroups import m_semigroup, q_semigroup

__all__ = [
    "CheckError", "InequalityReport", "McResult", "NonFiniteSampleError", "RankDeficiencyWarning",
    "RegressionModel", "VectorMcResult", "representation_sweep", "chaos_check", "check_logsob_path",
    "check_poincare_path", "check_state_inequalities", "clark_ocone_check", "cond_exp_check",
    "cond_exp_regression", "dyson_suite", "factorization_sweep", "heisenberg_suite", "ibp_check",
    "intertwine_check", "jk_inverse_sweep", "left_right_residual", "lipschitz_shift_check",
    "m_semigroup", "projected_martingale_check", "martingale_drift", "mc", "q_semigroup", "run_paths",
    "summarize", "to_json", "verdict", "wick_check",
]
