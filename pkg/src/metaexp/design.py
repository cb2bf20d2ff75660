"""Stratified meta-experiment design over listing clusters.

Clusters are described by pre-treatment covariates, blocked into strata of
eight by a greedy nearest-pair procedure on Mahalanobis distances, and then
randomized: per stratum two clusters go to the Bernoulli arm (listing-level
coin flips) and the remaining six to the cluster-randomized arm, where half
of them are treated as whole clusters.
"""

from __future__ import annotations

import enum
import logging
import warnings
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass

import numpy as np

from metaexp.analyze.ks import KSResult, ks_test
from metaexp.cluster import ClusterAssignment
from metaexp.datamodel import DesignAssignment, ListingRecord, MetaArm, Unit
from metaexp.errors import DomainError, EmptyCluster, EmptyGroup, TooFewClusters, UnknownListing

logger = logging.getLogger(__name__)

RIDGE = 1e-8
BASE_COVARIATES = (
    "avg_nights_per_listing",
    "avg_bookings_per_listing",
    "avg_booking_value_per_listing",
    "n_eligible_listings",
)
PRICING_COVARIATES = ("pct_smart_pricing_on",)


@dataclass(frozen=True)
class ClusterCovariates:
    cluster_ids: tuple[str, ...]
    names: tuple[str, ...]
    values: np.ndarray  # clusters x covariates

    def column(self, name: str) -> np.ndarray:
        return self.values[:, self.names.index(name)]

    def as_dict(self) -> dict[str, dict[str, float]]:
        return {
            c: {n: float(v) for n, v in zip(self.names, row)}
            for c, row in zip(self.cluster_ids, self.values)
        }


def compute_cluster_covariates(listings: Sequence[ListingRecord], clusters: ClusterAssignment,
                               pricing_design: bool = False) -> ClusterCovariates:
    """Per-cluster means over eligible listings, plus the eligible count."""
    groups: dict[str, list[ListingRecord]] = {c: [] for c in clusters.sizes}
    for rec in listings:
        if not rec.eligible:
            continue
        try:
            groups[clusters.labels[rec.listing_id]].append(rec)
        except KeyError:
            raise UnknownListing(f"eligible listing {rec.listing_id!r} has no cluster") from None
    names = BASE_COVARIATES + (PRICING_COVARIATES if pricing_design else ())
    rows = []
    for cid, members in groups.items():
        if not members:
            raise EmptyCluster(f"cluster {cid} has no eligible listings")
        n = len(members)
        row = [
            sum(r.pre_nights for r in members) / n,
            sum(r.pre_bookings for r in members) / n,
            sum(r.pre_booking_value for r in members) / n,
            float(n),
        ]
        if pricing_design:
            row.append(sum(r.smart_pricing_on for r in members) / n)
        rows.append(row)
    return ClusterCovariates(tuple(groups), names, np.array(rows, dtype=float))


def mahalanobis_matrix(covariates: ClusterCovariates | np.ndarray) -> np.ndarray:
    """Pairwise Mahalanobis distances between clusters.

    Each covariate is centred and scaled to unit sample variance first;
    constant columns are set to zero. The inverse uses the sample covariance
    of the standardized covariates with a ``1e-8`` ridge.
    """
    x = np.asarray(getattr(covariates, "values", covariates), dtype=float)
    if x.ndim != 2 or x.shape[0] < 2:
        raise TooFewClusters("need at least two clusters for distances")
    sd = x.std(axis=0, ddof=1)
    z = np.where(sd > 0, (x - x.mean(axis=0)) / np.where(sd > 0, sd, 1.0), 0.0)
    s = np.atleast_2d(np.cov(z, rowvar=False)) + RIDGE * np.eye(z.shape[1])
    s_inv = np.linalg.inv(s)
    diff = z[:, None, :] - z[None, :, :]
    d2 = np.einsum("ijk,kl,ijl->ij", diff, s_inv, diff)
    d = np.sqrt(np.clip(d2, 0.0, None))
    d = (d + d.T) / 2
    np.fill_diagonal(d, 0.0)
    return d


@dataclass(frozen=True)
class StratifiedDesign:
    strata: tuple[tuple[str, ...], ...]
    excluded: tuple[str, ...] = ()

    @property
    def stratum_ids(self) -> list[str]:
        return [f"S{k:04d}" for k in range(len(self.strata))]


def build_strata(distances: np.ndarray, stratum_size: int = 8,
                 cluster_ids: Sequence[str] | None = None) -> StratifiedDesign:
    """Greedy blocking.

    Each stratum opens with the closest pair of still-unassigned clusters and
    grows by adding the unassigned cluster with the smallest mean distance to
    the current members. Ties resolve to the lowest index. Clusters left over
    once fewer than ``stratum_size`` remain are excluded, with a warning.
    """
    d = np.asarray(distances, dtype=float)
    n = d.shape[0]
    if d.shape != (n, n):
        raise ValueError("distance matrix must be square")
    if stratum_size < 2:
        raise DomainError("stratum_size must be at least 2")
    if n < stratum_size:
        raise TooFewClusters(f"{n} clusters cannot fill a stratum of {stratum_size}")
    ids = list(cluster_ids) if cluster_ids is not None else [str(i) for i in range(n)]
    if len(ids) != n:
        raise ValueError("cluster_ids length does not match the distance matrix")

    avail = np.ones(n, dtype=bool)
    upper = np.triu(np.ones((n, n), dtype=bool), k=1)
    strata = []
    while avail.sum() >= stratum_size:
        mask = upper & avail[:, None] & avail[None, :]
        flat = np.where(mask, d, np.inf).argmin()
        i, j = divmod(int(flat), n)
        members = [i, j]
        avail[[i, j]] = False
        total = d[i] + d[j]
        while len(members) < stratum_size:
            k = int(np.where(avail, total, np.inf).argmin())
            members.append(k)
            avail[k] = False
            total = total + d[k]
        strata.append(tuple(ids[m] for m in members))
    excluded = tuple(ids[m] for m in np.flatnonzero(avail))
    if excluded:
        msg = f"{len(excluded)} cluster(s) do not fill a stratum of {stratum_size} and are excluded"
        warnings.warn(msg, RuntimeWarning)
        logger.warning(msg)
    return StratifiedDesign(tuple(strata), excluded)


def assign_design(strata: StratifiedDesign, clusters: ClusterAssignment, seed: int,
                  bernoulli_clusters_per_stratum: int = 2, treated_share: float = 0.5,
                  eligible: Iterable[str] | None = None,
                  metadata: Mapping | None = None) -> DesignAssignment:
    """Randomize meta-arms and treatments within each stratum.

    Per stratum, a uniformly random permutation puts the first
    ``bernoulli_clusters_per_stratum`` clusters in the Bernoulli arm; of the
    rest, ``treated_share`` are treated as whole clusters (complete random
    assignment). Bernoulli-arm listings each get an independent coin with
    probability ``treated_share``.
    """
    if not 0 < treated_share < 1:
        raise DomainError("treated_share must lie in (0, 1)")
    members = clusters.members()
    if eligible is not None:
        keep = set(eligible)
        members = {c: [l for l in ids if l in keep] for c, ids in members.items()}
    rng = np.random.Generator(np.random.PCG64(seed))
    units: dict[str, Unit] = {}
    for sid, stratum in zip(strata.stratum_ids, strata.strata):
        n_cluster_arm = len(stratum) - bernoulli_clusters_per_stratum
        n_treated = treated_share * n_cluster_arm
        if n_cluster_arm < 2 or bernoulli_clusters_per_stratum < 1 or n_treated != int(n_treated):
            raise DomainError(
                f"stratum of {len(stratum)} cannot be split into {bernoulli_clusters_per_stratum} "
                f"Bernoulli clusters and an integer treated share {treated_share}"
            )
        order = rng.permutation(len(stratum))
        for rank, pos in enumerate(order):
            cid = stratum[pos]
            if cid not in members:
                raise UnknownListing(f"cluster {cid} has no listings")
            ids = members[cid]
            if rank < bernoulli_clusters_per_stratum:
                coins = rng.random(len(ids)) < treated_share
                for lid, t in zip(ids, coins):
                    units[lid] = Unit(cid, sid, MetaArm.BERNOULLI, bool(t))
            else:
                treated = rank - bernoulli_clusters_per_stratum < n_treated
                for lid in ids:
                    units[lid] = Unit(cid, sid, MetaArm.CLUSTER_RANDOMIZED, treated)
    meta = {
        "stratum_size": max((len(s) for s in strata.strata), default=0),
        "n_strata": len(strata.strata),
        "bernoulli_clusters_per_stratum": bernoulli_clusters_per_stratum,
        "treated_share": treated_share,
    }
    meta.update(metadata or {})
    return DesignAssignment(
        units=units,
        seed=seed,
        metadata=meta,
        excluded={c: tuple(members.get(c, ())) for c in strata.excluded},
    )


class BalanceGrouping(str, enum.Enum):
    META_ARM = "meta_arm"
    TREATMENT_WITHIN_BERNOULLI = "treatment_within_bernoulli"
    TREATMENT_WITHIN_CLUSTER_ARM = "treatment_within_cluster_arm"


BALANCE_METRICS = {
    "bookings": "pre_bookings",
    "nights": "pre_nights",
    "booking_value": "pre_booking_value",
}


def balance_check(listings: Sequence[ListingRecord], assignment: DesignAssignment,
                  grouping: BalanceGrouping | str) -> dict[str, KSResult]:
    """Two-sample KS test of each pre-treatment metric across the grouping."""
    grouping = BalanceGrouping(grouping)
    by_id = {r.listing_id: r for r in listings}
    a_ids, b_ids = [], []
    for lid, u in sorted(assignment.units.items()):
        if grouping is BalanceGrouping.META_ARM:
            (a_ids if u.meta_arm is MetaArm.BERNOULLI else b_ids).append(lid)
        elif grouping is BalanceGrouping.TREATMENT_WITHIN_BERNOULLI:
            if u.meta_arm is MetaArm.BERNOULLI:
                (a_ids if u.treatment else b_ids).append(lid)
        elif u.meta_arm is MetaArm.CLUSTER_RANDOMIZED:
            (a_ids if u.treatment else b_ids).append(lid)
    if not a_ids or not b_ids:
        raise EmptyGroup(f"grouping {grouping.value} leaves an empty comparison group")
    missing = [l for l in a_ids + b_ids if l not in by_id]
    if missing:
        raise UnknownListing(f"assignment references unknown listing {missing[0]!r}")
    out = {}
    for metric, attr in BALANCE_METRICS.items():
        a = np.array([getattr(by_id[l], attr) for l in a_ids], dtype=float)
        b = np.array([getattr(by_id[l], attr) for l in b_ids], dtype=float)
        out[metric] = ks_test(a, b)
    return out
