"""Alternative units of analysis and market-condition subsets."""

from __future__ import annotations

import math
from collections.abc import Mapping, Sequence

import numpy as np

from metaexp.analyze.regression import (
    COVARIATES,
    AnalysisFrame,
    RegressionFit,
    build_frame,
    fit_wls,
)
from metaexp.datamodel import DesignAssignment, ListingRecord, Outcome
from metaexp.errors import DomainError, EmptyGroup, MissingIndex


def aggregate_by_cluster(frame: AnalysisFrame) -> tuple[AnalysisFrame, np.ndarray]:
    """Cluster means of outcome and covariates, with listing-count weights."""
    order = sorted(set(frame.clusters))
    code = {c: i for i, c in enumerate(order)}
    codes = np.array([code[c] for c in frame.clusters])
    counts = np.bincount(codes, minlength=len(order)).astype(float)

    def means(x):
        return np.bincount(codes, weights=x, minlength=len(order)) / counts

    first = {}
    for i, c in enumerate(frame.clusters):
        first.setdefault(c, i)
    rows = [first[c] for c in order]
    for arr, what in ((frame.treatment, "treatment"), (frame.bernoulli, "meta-arm")):
        if np.any(means(arr) != arr[rows]):
            raise DomainError(f"{what} varies within a cluster; cannot aggregate")
    cov = np.column_stack([means(frame.covariates[:, j]) for j in range(frame.covariates.shape[1])]) \
        if frame.covariates.shape[1] else np.zeros((len(order), 0))
    agg = AnalysisFrame(
        listing_ids=order,
        y=means(frame.y),
        treatment=frame.treatment[rows],
        bernoulli=frame.bernoulli[rows],
        covariates=cov,
        covariate_names=frame.covariate_names,
        strata=[frame.strata[i] for i in rows],
        clusters=order,
    )
    return agg, counts


def _stack(a: AnalysisFrame, b: AnalysisFrame) -> AnalysisFrame:
    return AnalysisFrame(
        a.listing_ids + b.listing_ids,
        np.concatenate([a.y, b.y]),
        np.concatenate([a.treatment, b.treatment]),
        np.concatenate([a.bernoulli, b.bernoulli]),
        np.vstack([a.covariates, b.covariates]),
        a.covariate_names,
        a.strata + b.strata,
        a.clusters + b.clusters,
    )


def _regressors(frame: AnalysisFrame, spec: str):
    if spec == "arm_level":
        return (np.column_stack([frame.treatment, frame.covariates]),
                ["treatment", *frame.covariate_names])
    return (np.column_stack([frame.treatment, frame.bernoulli,
                             frame.bernoulli * frame.treatment, frame.covariates]),
            ["treatment", "bernoulli", "bernoulli_x_treatment", *frame.covariate_names])


def cluster_aggregated_fit(outcomes: Mapping[str, Outcome], assignment: DesignAssignment,
                           listings: Sequence[ListingRecord], outcome: str = "bookings",
                           covariates: Sequence[str] = COVARIATES) -> RegressionFit:
    """Cluster-arm regression on cluster means weighted by eligible listing count.

    Each cluster is one observation, so the robust covariance is HC1 over
    clusters.
    """
    frame = build_frame(outcomes, assignment, listings, outcome, covariates)
    frame = frame.subset(frame.bernoulli == 0.0)
    if frame.y.size == 0:
        raise EmptyGroup("no cluster-randomized listings to aggregate")
    agg, counts = aggregate_by_cluster(frame)
    X, names = _regressors(agg, "arm_level")
    return fit_wls(agg.y, X, names, strata=agg.strata, weights=counts,
                   clusters=agg.clusters, spec="cluster_aggregated")


def mixed_unit_fit(outcomes: Mapping[str, Outcome], assignment: DesignAssignment,
                   listings: Sequence[ListingRecord], outcome: str = "bookings",
                   covariates: Sequence[str] = COVARIATES) -> RegressionFit:
    """Joint regression on Bernoulli-arm listings (weight 1) stacked with
    cluster-arm cluster means (weight = listings in the cluster)."""
    frame = build_frame(outcomes, assignment, listings, outcome, covariates)
    bern = frame.subset(frame.bernoulli == 1.0)
    clus = frame.subset(frame.bernoulli == 0.0)
    if bern.y.size == 0 or clus.y.size == 0:
        raise EmptyGroup("mixed-unit analysis needs both meta-arms")
    agg, counts = aggregate_by_cluster(clus)
    stacked = _stack(bern, agg)
    weights = np.concatenate([np.ones(bern.y.size), counts])
    X, names = _regressors(stacked, "joint")
    return fit_wls(stacked.y, X, names, strata=stacked.strata, weights=weights,
                   clusters=stacked.clusters, spec="mixed_unit")


def lower_quantile(values: Sequence[float], q: float) -> float:
    """Smallest observed value with at least a ``q`` share of values at or below it."""
    ordered = sorted(values)
    return ordered[max(math.ceil(q * len(ordered)) - 1, 0)]


def constrained_subset(listings: Sequence[ListingRecord], which: str) -> list[ListingRecord]:
    """Listings in supply- or demand-constrained markets.

    Keeps listings whose market size is at or above the listing-level median
    market size, then those whose elasticity index is at or above the
    listing-level 75th percentile among the kept listings.
    """
    if which not in ("supply", "demand"):
        raise DomainError(f"which must be 'supply' or 'demand', got {which!r}")
    attr = f"{which}_elasticity_index"
    if not listings:
        return []
    market_size: dict[str, int] = {}
    for r in listings:
        market_size[r.market_id] = market_size.get(r.market_id, 0) + 1
    median_size = lower_quantile([market_size[r.market_id] for r in listings], 0.5)
    large = [r for r in listings if market_size[r.market_id] >= median_size]
    missing = [r.listing_id for r in large if getattr(r, attr) is None]
    if missing:
        raise MissingIndex(f"{attr} missing for listing {missing[0]!r}")
    cut = lower_quantile([getattr(r, attr) for r in large], 0.75)
    return [r for r in large if getattr(r, attr) >= cut]
