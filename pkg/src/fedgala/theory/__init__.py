from fedgala.theory.claims import (
    DiscardCheckResult,
    DiscardMonteCarlo,
    SignCheckResult,
    claim1_sign_check,
    constructed_discard_example,
    identity_sign_check,
    proposition1_check,
    proposition1_monte_carlo,
    sign_check_over_augmentations,
)
from fedgala.theory.covariance import (
    GradientSample,
    LinearTaylorReport,
    MutualInfoReport,
    empirical_grad_cov,
    lemma1_vs_estimator,
    linear_taylor_check,
    summarize,
    taylor_cov_estimate,
    taylor_var_estimate,
)
from fedgala.theory.trends import (
    CorollaryTrend,
    TheoremTrend,
    TrendPoint,
    TrendProtocol,
    collect_trend_points,
    corollary1_check,
    theorem1_experiment,
)

__all__ = [
    "CorollaryTrend",
    "DiscardCheckResult",
    "DiscardMonteCarlo",
    "GradientSample",
    "LinearTaylorReport",
    "MutualInfoReport",
    "SignCheckResult",
    "TheoremTrend",
    "TrendPoint",
    "TrendProtocol",
    "claim1_sign_check",
    "collect_trend_points",
    "constructed_discard_example",
    "corollary1_check",
    "empirical_grad_cov",
    "identity_sign_check",
    "lemma1_vs_estimator",
    "linear_taylor_check",
    "proposition1_check",
    "proposition1_monte_carlo",
    "sign_check_over_augmentations",
    "summarize",
    "taylor_cov_estimate",
    "taylor_var_estimate",
    "theorem1_experiment",
]
