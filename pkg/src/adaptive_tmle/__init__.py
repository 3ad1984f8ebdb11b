"""TMLE for two-arm trials with cross-validated selection of the adjustment strategy."""

from importlib.metadata import PackageNotFoundError, version

try:
    __version__ = version("adaptive-tmle")
except PackageNotFoundError:
    # running from a source tree without an install
    __version__ = "0+unknown"

from adaptive_tmle.data import TrialDataset, load_csv, bound_outcome, make_folds, subgroup
from adaptive_tmle.errors import AdaptiveTmleError, ConfigError, DataError, NumericError
from adaptive_tmle.tmle import Estimand, TmleFit, run_tmle
from adaptive_tmle.aps import (
    ApsConfig,
    CvRiskLedger,
    cv_risk_stage1,
    cv_risk_stage2,
    fit_aps_tmle,
    select_outcome_learner,
)

__all__ = [
    "__version__",
    "AdaptiveTmleError",
    "ConfigError",
    "DataError",
    "NumericError",
    "TrialDataset",
    "load_csv",
    "bound_outcome",
    "make_folds",
    "subgroup",
    "Estimand",
    "TmleFit",
    "run_tmle",
    "ApsConfig",
    "CvRiskLedger",
    "cv_risk_stage1",
    "cv_risk_stage2",
    "select_outcome_learner",
    "fit_aps_tmle",
]
