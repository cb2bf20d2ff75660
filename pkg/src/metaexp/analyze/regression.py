"""Least-squares treatment-effect regressions with stratum fixed effects.

Two model forms are supported:

* ``arm_level``: ``Y ~ treatment + covariates + stratum FE`` within one
  meta-arm.
* ``joint``: ``Y ~ treatment + bernoulli + bernoulli_x_treatment +
  covariates + stratum FE`` over both meta-arms. ``treatment`` is then the
  cluster-randomized effect and ``bernoulli_x_treatment`` the extra effect
  measured under Bernoulli randomization.

Stratum effects are absorbed by weighted within-stratum demeaning. The
covariance is HC1 by default and CR1 when cluster ids are given; both use
``K`` = slopes + intercept + (strata - 1) absorbed dummies.
"""

from __future__ import annotations

import math
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field

import numpy as np

from metaexp.analyze.power import normal_cdf
from metaexp.datamodel import DesignAssignment, ListingRecord, MetaArm, Outcome
from metaexp.errors import (
    DegenerateDenominator,
    DimensionMismatch,
    DomainError,
    EmptyGroup,
    RankDeficient,
    TooFewClusters,
    UnknownListing,
)

COVARIATES = ("pre_bookings", "pre_nights", "pre_booking_value", "pre_gross_spend")
PRICING_COVARIATES = COVARIATES + ("smart_pricing_on",)
OUTCOMES = ("bookings", "nights", "gross_spend")
RANK_TOL = 1e-10


@dataclass
class RegressionFit:
    names: tuple[str, ...]
    params: np.ndarray
    vcov: np.ndarray
    n_obs: int
    n_clusters: int | None
    r2: float
    adj_r2: float
    cov_type: str
    df_model: int
    weights: np.ndarray | None = None
    fixed_effects: dict[str, float] = field(default_factory=dict)
    # weighted, demeaned design and residuals; the sandwich is built from these
    design: np.ndarray | None = field(default=None, repr=False)
    resid: np.ndarray | None = field(default=None, repr=False)
    spec: str = ""

    def index(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise KeyError(f"term {name!r} not in fit") from None

    def coef(self, name: str) -> float:
        return float(self.params[self.index(name)])

    def se(self, name: str) -> float:
        i = self.index(name)
        return float(math.sqrt(max(self.vcov[i, i], 0.0)))

    @property
    def bse(self) -> np.ndarray:
        return np.sqrt(np.clip(np.diag(self.vcov), 0.0, None))

    def pvalue(self, name: str) -> float:
        """Two-sided normal-approximation p-value."""
        se = self.se(name)
        if se == 0:
            return 0.0 if self.coef(name) != 0 else 1.0
        return 2 * (1 - normal_cdf(abs(self.coef(name)) / se))

    def to_dict(self) -> dict:
        return {
            "spec": self.spec,
            "terms": {n: {"coef": float(b), "se": float(s)} for n, b, s in
                      zip(self.names, self.params, self.bse)},
            "names": list(self.names),
            "vcov": self.vcov.tolist(),
            "n_obs": self.n_obs,
            "n_clusters": self.n_clusters,
            "r2": self.r2,
            "adj_r2": self.adj_r2,
            "cov_type": self.cov_type,
            "df_model": self.df_model,
            "fixed_effects": dict(self.fixed_effects),
            "weighted": self.weights is not None,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> RegressionFit:
        return cls(
            names=tuple(d["names"]),
            params=np.array([d["terms"][n]["coef"] for n in d["names"]], dtype=float),
            vcov=np.array(d["vcov"], dtype=float).reshape(len(d["names"]), len(d["names"])),
            n_obs=d["n_obs"],
            n_clusters=d.get("n_clusters"),
            r2=d["r2"],
            adj_r2=d["adj_r2"],
            cov_type=d["cov_type"],
            df_model=d["df_model"],
            fixed_effects=dict(d.get("fixed_effects", {})),
            spec=d.get("spec", ""),
        )


def _group_codes(labels: Sequence) -> tuple[np.ndarray, list]:
    levels = sorted(set(labels))
    lookup = {v: i for i, v in enumerate(levels)}
    return np.array([lookup[v] for v in labels], dtype=np.int64), levels


def _weighted_group_means(x: np.ndarray, codes: np.ndarray, w: np.ndarray, n_groups: int) -> np.ndarray:
    wsum = np.bincount(codes, weights=w, minlength=n_groups)
    if x.ndim == 1:
        return np.bincount(codes, weights=w * x, minlength=n_groups) / wsum
    return np.stack(
        [np.bincount(codes, weights=w * x[:, j], minlength=n_groups) for j in range(x.shape[1])],
        axis=1,
    ) / wsum[:, None]


def _check_rank(X: np.ndarray, names: Sequence[str]) -> None:
    """Raise RankDeficient naming the first column that adds no new direction."""
    scale = np.linalg.norm(X, axis=0)
    kept = []
    for j, name in enumerate(names):
        if scale[j] == 0:
            raise RankDeficient(name)
        cols = X[:, kept + [j]] / scale[kept + [j]]
        s = np.linalg.svd(cols, compute_uv=False)
        if s[-1] <= RANK_TOL * s[0] * max(X.shape):
            raise RankDeficient(name)
        kept.append(j)


def sandwich(design: np.ndarray, resid: np.ndarray, groups: np.ndarray | None, df_model: int) -> np.ndarray:
    """HC1 (``groups=None``) or CR1 covariance from weighted design/residuals."""
    n = design.shape[0]
    if n <= df_model:
        raise DomainError(f"{n} observations cannot support {df_model} parameters")
    bread = np.linalg.inv(design.T @ design)
    scores = design * resid[:, None]
    if groups is None:
        meat = scores.T @ scores
        factor = n / (n - df_model)
    else:
        codes, levels = _group_codes(groups)
        g = len(levels)
        if g < 2:
            raise TooFewClusters("cluster-robust covariance needs at least two clusters")
        summed = np.zeros((g, design.shape[1]))
        np.add.at(summed, codes, scores)
        meat = summed.T @ summed
        factor = g / (g - 1) * (n - 1) / (n - df_model)
    cov = factor * bread @ meat @ bread
    return (cov + cov.T) / 2


def cluster_robust_vcov(fit: RegressionFit, cluster_ids: Sequence) -> np.ndarray:
    """CR1 covariance of an existing fit for a (new) set of cluster ids."""
    if fit.design is None or fit.resid is None:
        raise ValueError("fit does not carry its design matrix and residuals")
    if len(cluster_ids) != fit.n_obs:
        raise DimensionMismatch("one cluster id per observation is required")
    return sandwich(fit.design, fit.resid, np.asarray(cluster_ids), fit.df_model)


def fit_wls(y, X, names: Sequence[str], strata: Sequence | None = None,
            weights=None, clusters: Sequence | None = None,
            fe: str = "absorb", spec: str = "") -> RegressionFit:
    """Weighted least squares with optional stratum fixed effects.

    ``X`` holds only slope regressors (no constant). With ``fe="absorb"`` the
    stratum effects are swept out by weighted demeaning and reported in
    ``fixed_effects``; with ``fe="dummies"`` an intercept and ``strata - 1``
    dummy columns (first sorted stratum as reference) enter the design.
    """
    y = np.asarray(y, dtype=float)
    X = np.asarray(X, dtype=float).reshape(len(y), -1)
    names = list(names)
    n = len(y)
    if X.shape[1] != len(names):
        raise DimensionMismatch("one name per regressor column is required")
    for arr, what in ((strata, "strata"), (clusters, "clusters")):
        if arr is not None and len(arr) != n:
            raise DimensionMismatch(f"{what} length does not match the outcome")
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=float)
    if w.shape != (n,) or np.any(w <= 0) or not np.all(np.isfinite(w)):
        raise DomainError("weights must be positive and finite, one per observation")
    if not (np.all(np.isfinite(y)) and np.all(np.isfinite(X))):
        raise DomainError("outcome and regressors must be finite")

    fixed_effects: dict[str, float] = {}
    if strata is not None and fe == "absorb":
        codes, levels = _group_codes(strata)
        ym = _weighted_group_means(y, codes, w, len(levels))
        Xm = _weighted_group_means(X, codes, w, len(levels)) if X.shape[1] else np.zeros((len(levels), 0))
        yt, Xt = y - ym[codes], X - Xm[codes]
        df_model = len(names) + len(levels)
    elif strata is not None and fe == "dummies":
        codes, levels = _group_codes(strata)
        dummies = (codes[:, None] == np.arange(1, len(levels))[None, :]).astype(float)
        Xt = np.column_stack([np.ones(n), dummies, X])
        names = ["intercept"] + [f"stratum[{lv}]" for lv in levels[1:]] + names
        yt = y
        df_model = len(names)
    elif strata is None:
        Xt = np.column_stack([np.ones(n), X])
        names = ["intercept"] + names
        yt = y
        df_model = len(names)
    else:
        raise ValueError(f"unknown fixed-effect method {fe!r}")

    sw = np.sqrt(w)
    Xw, yw = Xt * sw[:, None], yt * sw
    if Xw.shape[1]:
        _check_rank(Xw, names)
        beta = np.linalg.lstsq(Xw, yw, rcond=None)[0]
    else:
        beta = np.zeros(0)
    resid_w = yw - Xw @ beta

    ybar = np.sum(w * y) / np.sum(w)
    tss = float(np.sum(w * (y - ybar) ** 2))
    ssr = float(np.sum(resid_w**2))
    # constant outcome: R^2 is reported as 0 by convention
    r2 = 0.0 if np.ptp(y) == 0 else 1.0 - ssr / tss
    adj = 1.0 - (1.0 - r2) * (n - 1) / (n - df_model) if n > df_model else float("nan")

    if strata is not None and fe == "absorb":
        level_effects = ym - (Xm @ beta if X.shape[1] else 0.0)
        fixed_effects["intercept"] = float(level_effects[0])
        for lv, a in zip(levels[1:], level_effects[1:]):
            fixed_effects[f"stratum[{lv}]"] = float(a - level_effects[0])

    if Xw.shape[1]:
        vcov = sandwich(Xw, resid_w, None if clusters is None else np.asarray(clusters), df_model)
    else:
        vcov = np.zeros((0, 0))
    n_clusters = None if clusters is None else len(set(clusters))
    return RegressionFit(
        names=tuple(names), params=beta, vcov=vcov, n_obs=n, n_clusters=n_clusters,
        r2=r2, adj_r2=adj, cov_type="HC1" if clusters is None else "CR1", df_model=df_model,
        weights=None if weights is None else w, fixed_effects=fixed_effects,
        design=Xw, resid=resid_w, spec=spec,
    )


# ---------------------------------------------------------------- listing-level data

@dataclass
class AnalysisFrame:
    """Column arrays of one analysis sample, aligned by row."""

    listing_ids: list[str]
    y: np.ndarray
    treatment: np.ndarray
    bernoulli: np.ndarray
    covariates: np.ndarray
    covariate_names: tuple[str, ...]
    strata: list[str]
    clusters: list[str]

    def subset(self, mask: np.ndarray) -> AnalysisFrame:
        idx = np.flatnonzero(mask)
        return AnalysisFrame(
            [self.listing_ids[i] for i in idx], self.y[idx], self.treatment[idx],
            self.bernoulli[idx], self.covariates[idx], self.covariate_names,
            [self.strata[i] for i in idx], [self.clusters[i] for i in idx],
        )


def build_frame(outcomes: Mapping[str, Outcome], assignment: DesignAssignment,
                listings: Sequence[ListingRecord], outcome: str = "bookings",
                covariates: Sequence[str] = COVARIATES) -> AnalysisFrame:
    """Join outcomes, design roles and pre-treatment covariates by listing."""
    if outcome not in OUTCOMES:
        raise DomainError(f"unknown outcome {outcome!r}; expected one of {OUTCOMES}")
    by_id = {r.listing_id: r for r in listings}
    ids = [lid for lid in sorted(assignment.units)]
    for lid in ids:
        if lid not in outcomes:
            raise UnknownListing(f"no outcome for assigned listing {lid!r}")
        if lid not in by_id:
            raise UnknownListing(f"no listing record for assigned listing {lid!r}")
    units = [assignment.units[lid] for lid in ids]
    return AnalysisFrame(
        listing_ids=ids,
        y=np.array([float(getattr(outcomes[lid], outcome)) for lid in ids]),
        treatment=np.array([float(u.treatment) for u in units]),
        bernoulli=np.array([float(u.meta_arm is MetaArm.BERNOULLI) for u in units]),
        covariates=np.array(
            [[float(getattr(by_id[lid], c)) for c in covariates] for lid in ids], dtype=float
        ).reshape(len(ids), len(covariates)),
        covariate_names=tuple(covariates),
        strata=[u.stratum_id for u in units],
        clusters=[u.cluster_id for u in units],
    )


def fit_frame(frame: AnalysisFrame, spec: str = "arm_level", cluster_se: bool = True,
              weights=None, fe: str = "absorb", clusters: Sequence | None = None) -> RegressionFit:
    if frame.y.size == 0:
        raise EmptyGroup("analysis sample is empty")
    if spec == "arm_level":
        X = np.column_stack([frame.treatment, frame.covariates])
        names = ["treatment", *frame.covariate_names]
    elif spec == "joint":
        X = np.column_stack([frame.treatment, frame.bernoulli,
                             frame.bernoulli * frame.treatment, frame.covariates])
        names = ["treatment", "bernoulli", "bernoulli_x_treatment", *frame.covariate_names]
    else:
        raise DomainError(f"unknown regression spec {spec!r}")
    if clusters is None and cluster_se:
        clusters = frame.clusters
    return fit_wls(frame.y, X, names, strata=frame.strata, weights=weights,
                   clusters=clusters if cluster_se else None, fe=fe, spec=spec)


def ols_fit(outcomes: Mapping[str, Outcome], assignment: DesignAssignment,
            listings: Sequence[ListingRecord], spec: str = "arm_level",
            arm: MetaArm | str | None = None, outcome: str = "bookings",
            covariates: Sequence[str] = COVARIATES, cluster_se: bool = True,
            weights=None, fe: str = "absorb") -> RegressionFit:
    """Listing-level treatment regression.

    ``spec="arm_level"`` requires ``arm``; ``spec="joint"`` uses both arms.
    Standard errors are clustered on listing cluster unless ``cluster_se`` is
    false, in which case HC1 is used.
    """
    frame = build_frame(outcomes, assignment, listings, outcome, covariates)
    if spec == "arm_level":
        if arm is None:
            raise DomainError("arm-level fits need an arm")
        arm = MetaArm(arm)
        frame = frame.subset(frame.bernoulli == (1.0 if arm is MetaArm.BERNOULLI else 0.0))
    elif arm is not None:
        raise DomainError("joint fits use both arms; do not pass an arm")
    return fit_frame(frame, spec, cluster_se, weights, fe)


@dataclass(frozen=True)
class BiasDecomposition:
    beta_true: float
    nu_bias: float
    xi_baseline: float
    bias_share: float
    bias_share_se: float

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in
                ("beta_true", "nu_bias", "xi_baseline", "bias_share", "bias_share_se")}


def bias_share(beta: float, nu: float) -> float:
    """Share of the Bernoulli-arm effect ``beta + nu`` attributable to ``nu``."""
    if abs(beta + nu) < 1e-12:
        raise DegenerateDenominator("beta + nu is zero; the Bernoulli effect vanishes")
    return nu / (beta + nu)


def joint_bias_decomposition(fit: RegressionFit) -> BiasDecomposition:
    """Split the Bernoulli-arm effect into the true effect and interference bias.

    The share's standard error is the delta-method approximation from the
    joint covariance of ``treatment`` and ``bernoulli_x_treatment``.
    """
    beta = fit.coef("treatment")
    nu = fit.coef("bernoulli_x_treatment")
    xi = fit.coef("bernoulli")
    share = bias_share(beta, nu)
    denom = (beta + nu) ** 2
    grad = np.array([-nu / denom, beta / denom])
    idx = [fit.index("treatment"), fit.index("bernoulli_x_treatment")]
    cov = fit.vcov[np.ix_(idx, idx)]
    se = float(math.sqrt(max(grad @ cov @ grad, 0.0)))
    return BiasDecomposition(beta, nu, xi, share, se)
