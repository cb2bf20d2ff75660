from metaexp.analyze.ks import KSResult, ks_statistic, ks_test
from metaexp.analyze.power import PowerReport, mde, normal_ppf, power_report, required_sample_scale
from metaexp.analyze.regression import (
    BiasDecomposition,
    RegressionFit,
    bias_share,
    cluster_robust_vcov,
    fit_wls,
    joint_bias_decomposition,
    ols_fit,
)
from metaexp.analyze.variants import cluster_aggregated_fit, constrained_subset, mixed_unit_fit

__all__ = [
    "BiasDecomposition",
    "KSResult",
    "PowerReport",
    "RegressionFit",
    "bias_share",
    "cluster_aggregated_fit",
    "cluster_robust_vcov",
    "constrained_subset",
    "fit_wls",
    "joint_bias_decomposition",
    "ks_statistic",
    "ks_test",
    "mde",
    "mixed_unit_fit",
    "normal_ppf",
    "ols_fit",
    "power_report",
    "required_sample_scale",
]
