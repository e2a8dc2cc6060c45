"""Hierarchical transfer forecasting toolkit.

Penalized-spline additive models, bagged quantile-forest correctors
stacked on top of them, and ML-Poly online aggregation of multi-zone
quantile experts, with pipelines gluing the pieces into end-to-end
experiments.
"""

__version__ = "0.1.0"

from .additive import AdditiveModel, EffectFunction, TermSpec, extract_effects, parse_formula
from .aggregation import (
    MlPolyState,
    StrategyConfig,
    StrategyResult,
    mlpoly_step,
    mlpoly_vector_step,
    replay_forecast,
    run_strategy,
)
from .errors import ConfigError, DataError, HierforecastError, NumericalError
from .forest import ForestConfig, ImportanceReport, QuantileForest, fit_forest, permutation_importance
from .metrics import AleCurve, MetricReport, ale, lasso_select, mape, pinball, rmse
from .series import (
    CalendarSpec,
    NormalizationTable,
    SeriesFrame,
    TrendModel,
    add_calendar,
    add_lags,
    apply_detrend,
    denormalize,
    exp_smooth,
    fit_detrend,
    fit_normalizer,
    make_frame,
    normalize,
    station_weighted_average,
)
from .stacking import (
    ExpertConfig,
    ExpertPanel,
    StackedModel,
    StackingConfig,
    build_expert_panel,
    fit_stacked,
    stacking_residuals,
    transfer_features,
)
from .synthetic import SyntheticSpec, generate_synthetic

__all__ = [
    "__version__",
    "AdditiveModel", "EffectFunction", "TermSpec", "extract_effects", "parse_formula",
    "MlPolyState", "StrategyConfig", "StrategyResult", "mlpoly_step", "mlpoly_vector_step",
    "replay_forecast", "run_strategy",
    "ConfigError", "DataError", "HierforecastError", "NumericalError",
    "ForestConfig", "ImportanceReport", "QuantileForest", "fit_forest", "permutation_importance",
    "AleCurve", "MetricReport", "ale", "lasso_select", "mape", "pinball", "rmse",
    "CalendarSpec", "NormalizationTable", "SeriesFrame", "TrendModel",
    "add_calendar", "add_lags", "apply_detrend", "denormalize", "exp_smooth",
    "fit_detrend", "fit_normalizer", "make_frame", "normalize", "station_weighted_average",
    "ExpertConfig", "ExpertPanel", "StackedModel", "StackingConfig",
    "build_expert_panel", "fit_stacked", "stacking_residuals", "transfer_features",
    "SyntheticSpec", "generate_synthetic",
]
