import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import make_listings
from metaexp.cluster import ClusterAssignment
from metaexp.datamodel import MetaArm
from metaexp.design import (
    BALANCE_METRICS,
    BalanceGrouping,
    ClusterCovariates,
    assign_design,
    balance_check,
    build_strata,
    compute_cluster_covariates,
    mahalanobis_matrix,
)
from metaexp.errors import DomainError, EmptyCluster, TooFewClusters


def cluster_setup(n_clusters=24, per_cluster=5, seed=0):
    listings = make_listings(n_clusters * per_cluster, markets=2, rng=np.random.default_rng(seed))
    labels = {r.listing_id: f"C{i // per_cluster:03d}" for i, r in enumerate(listings)}
    return listings, ClusterAssignment(labels, 1)


def test_covariates_are_eligible_means():
    listings, clusters = cluster_setup(3, 4)
    listings[0] = type(listings[0])(**{**listings[0].__dict__, "eligible": False})
    cov = compute_cluster_covariates(listings, clusters, pricing_design=True)
    first = listings[1:4]
    assert cov.column("n_eligible_listings")[0] == 3
    assert cov.column("avg_nights_per_listing")[0] == pytest.approx(np.mean([r.pre_nights for r in first]))
    assert cov.column("avg_booking_value_per_listing")[0] == pytest.approx(
        np.mean([r.pre_booking_value for r in first]))
    assert cov.column("pct_smart_pricing_on")[0] == pytest.approx(np.mean([r.smart_pricing_on for r in first]))


def test_cluster_without_eligible_listings():
    listings, clusters = cluster_setup(2, 2)
    listings = [type(r)(**{**r.__dict__, "eligible": i >= 2}) for i, r in enumerate(listings)]
    with pytest.raises(EmptyCluster):
        compute_cluster_covariates(listings, clusters)


def dense_mahalanobis(x):
    """Explicit loop over pairs using the standardized sample covariance."""
    x = np.asarray(x, float)
    sd = x.std(axis=0, ddof=1)
    keep = sd > 0
    z = (x[:, keep] - x[:, keep].mean(axis=0)) / sd[keep]
    s_inv = np.linalg.inv(np.cov(z, rowvar=False).reshape(z.shape[1], z.shape[1]) + 1e-8 * np.eye(z.shape[1]))
    n = len(x)
    out = np.zeros((n, n))
    for i in range(n):
        for j in range(n):
            d = z[i] - z[j]
            out[i, j] = np.sqrt(max(d @ s_inv @ d, 0.0))
    return out


def test_mahalanobis_matches_dense_oracle():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(15, 4)) @ rng.normal(size=(4, 4))
    x = np.column_stack([x, np.full(15, 7.0)])  # constant column carries no distance
    assert np.allclose(mahalanobis_matrix(x), dense_mahalanobis(x), atol=1e-7)


def test_mahalanobis_affine_invariance():
    rng = np.random.default_rng(4)
    x = rng.normal(size=(20, 3))
    a = rng.normal(size=(3, 3)) + 3 * np.eye(3)
    assert np.allclose(mahalanobis_matrix(x), mahalanobis_matrix(x @ a.T + 5.0), atol=1e-5)


def test_mahalanobis_identity_covariance_is_euclidean():
    # orthogonal, equal-variance standardized columns -> plain Euclidean distance on z
    x = np.array([[1, 1], [1, -1], [-1, 1], [-1, -1]], float)
    z = x / x.std(axis=0, ddof=1)
    expected = np.linalg.norm(z[:, None] - z[None], axis=2)
    assert np.allclose(mahalanobis_matrix(x), expected, atol=1e-7)
    with pytest.raises(TooFewClusters):
        mahalanobis_matrix(x[:1])


def test_strata_on_a_line():
    pos = np.array([0.0, 10.0, 1.0, 11.0])
    d = np.abs(pos[:, None] - pos[None])
    s = build_strata(d, 2, ["a", "b", "c", "d"])
    assert s.strata == (("a", "c"), ("b", "d"))
    assert s.excluded == ()


def test_leftover_clusters_are_excluded_with_warning():
    d = np.abs(np.arange(17.0)[:, None] - np.arange(17.0)[None])
    with pytest.warns(RuntimeWarning):
        s = build_strata(d, 8)
    assert len(s.strata) == 2 and len(s.excluded) == 1
    assert sorted(sum(map(list, s.strata), []) + list(s.excluded), key=int) == [str(i) for i in range(17)]
    with pytest.raises(TooFewClusters):
        build_strata(d[:5, :5], 8)


@settings(max_examples=30, deadline=None)
@given(n=st.integers(8, 40), size=st.sampled_from([2, 4, 8]), seed=st.integers(0, 10**6))
def test_strata_partition_property(n, size, seed):
    d = mahalanobis_matrix(np.random.default_rng(seed).normal(size=(n, 3)))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        s = build_strata(d, size)
    flat = [c for stratum in s.strata for c in stratum] + list(s.excluded)
    assert sorted(flat) == sorted(str(i) for i in range(n))
    assert all(len(x) == size for x in s.strata) and len(s.excluded) == n % size


def design_fixture(seed, n_clusters=24):
    listings, clusters = cluster_setup(n_clusters)
    cov = compute_cluster_covariates(listings, clusters)
    strata = build_strata(mahalanobis_matrix(cov), 8, cov.cluster_ids)
    return listings, clusters, strata, assign_design(strata, clusters, seed)


def test_design_splits_and_determinism():
    listings, clusters, strata, a = design_fixture(11)
    for sid, stratum in zip(strata.stratum_ids, strata.strata):
        roles = []
        for cid in stratum:
            units = {a.units[l] for l in clusters.members()[cid]}
            arms = {u.meta_arm for u in units}
            assert len(arms) == 1 and all(u.stratum_id == sid for u in units)
            if MetaArm.CLUSTER_RANDOMIZED in arms:
                assert len({u.treatment for u in units}) == 1
                roles.append("t" if units.pop().treatment else "c")
            else:
                roles.append("b")
        assert sorted(roles) == ["b", "b", "c", "c", "c", "t", "t", "t"]
    assert assign_design(strata, clusters, 11) == a
    assert assign_design(strata, clusters, 12) != a


def test_design_rejects_unsplittable_strata():
    listings, clusters, strata, _ = design_fixture(0)
    with pytest.raises(DomainError):
        assign_design(strata, clusters, 0, bernoulli_clusters_per_stratum=3)
    with pytest.raises(DomainError):
        assign_design(strata, clusters, 0, treated_share=1.0)


def test_balance_detects_shift():
    listings, clusters, strata, a = design_fixture(1)
    shifted = [type(r)(**{**r.__dict__, "pre_bookings": r.pre_bookings + 10 * (a.units[r.listing_id].meta_arm
                                                                             is MetaArm.BERNOULLI)})
               for r in listings]
    res = balance_check(shifted, a, BalanceGrouping.META_ARM)
    assert set(res) == set(BALANCE_METRICS)
    assert res["bookings"].p_value < 0.01
    for g in BalanceGrouping:
        assert set(balance_check(listings, a, g)) == {"bookings", "nights", "booking_value"}


def test_covariates_as_dict():
    cov = ClusterCovariates(("a",), ("x",), np.array([[1.5]]))
    assert cov.as_dict() == {"a": {"x": 1.5}}
