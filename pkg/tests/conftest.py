import numpy as np
import pytest

from metaexp.datamodel import DesignAssignment, ListingRecord, MetaArm, Outcome, Unit


def make_listings(n, markets=1, rng=None, **overrides):
    rng = rng or np.random.default_rng(0)
    out = []
    for i in range(n):
        bookings = int(rng.poisson(4))
        nights = bookings + int(rng.poisson(2 * bookings)) if bookings else 0
        kwargs = dict(
            listing_id=f"L{i:04d}",
            market_id=f"M{i % markets}",
            pre_bookings=bookings,
            pre_nights=nights,
            pre_booking_value=float(round(rng.uniform(50, 150) * nights, 2)),
            pre_gross_spend=float(round(rng.uniform(60, 200) * nights + 10 * bookings, 2)),
            smart_pricing_on=bool(rng.random() < 0.3),
        )
        kwargs.update(overrides)
        out.append(ListingRecord(**kwargs))
    return out


def synthetic_experiment(n_strata=4, clusters_per_stratum=8, cluster_size=6, seed=0,
                         effect=-0.5, interaction=-0.3, singleton=False):
    """Listings, a valid 2/3/3 design and outcomes with known effects."""
    rng = np.random.default_rng(seed)
    if singleton:
        cluster_size = 1
    n = n_strata * clusters_per_stratum * cluster_size
    listings = make_listings(n, markets=3, rng=rng)
    units, outcomes = {}, {}
    k = 0
    for s in range(n_strata):
        roles = rng.permutation(["b", "b", "t", "t", "t", "c", "c", "c"])
        for c, role in enumerate(roles):
            cid = f"C{s}{c}"
            for _ in range(cluster_size):
                rec = listings[k]
                if role == "b":
                    arm, treated = MetaArm.BERNOULLI, bool(rng.random() < 0.5)
                else:
                    arm, treated = MetaArm.CLUSTER_RANDOMIZED, role == "t"
                units[rec.listing_id] = Unit(cid, f"S{s:04d}", arm, treated)
                mean = 2 + 0.3 * rec.pre_bookings + 0.2 * s + effect * treated \
                    + interaction * treated * (arm is MetaArm.BERNOULLI)
                y = max(0, int(round(mean + rng.normal(0, 1))))
                outcomes[rec.listing_id] = Outcome(y, 2 * y, 100.0 * y)
                k += 1
    return listings, DesignAssignment(units, seed), outcomes


@pytest.fixture
def experiment():
    return synthetic_experiment()


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def verdict():
    """Record one PASS/FAIL line per acceptance criterion, then assert it."""
    def record(number, title, ok, detail):
        line = f"[{'PASS' if ok else 'FAIL'}] {number:>2}. {title}: {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        assert ok, line
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
