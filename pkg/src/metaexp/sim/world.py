"""Marketplace simulator with buyer-side substitution.

Listings sit in a latent space, clustered around market centroids. Guests
arrive one at a time with a query point, consider the ``k`` nearest listings
that still have capacity, and pick one of them or the outside option by
maximizing ``base_utility - price_sensitivity * price + shock``. The Gumbel
shocks come from a counter-based hash of (world key, guest, listing), so every
counterfactual run of the same world sees the same shocks and arrival order.
"""

from __future__ import annotations

import enum
import math
from collections.abc import Mapping
from dataclasses import dataclass, fields

import numba
import numpy as np

from metaexp.datamodel import DesignAssignment, ListingRecord, Outcome, SearchSession
from metaexp.errors import ConfigError
from metaexp.seeding import derive_seed, make_rng

UNLIMITED = -1
_GOLDEN = 0x9E3779B97F4A7C15
_LISTING_SALT = 0xD1B54A32D192ED03
_TWO_POW_53 = 2.0 ** -53


@dataclass(frozen=True)
class SimConfig:
    n_listings: int = 2000
    n_markets: int = 20
    latent_dim: int = 2
    market_spread: float = 6.0
    n_guests: int = 20000
    consideration_k: int = 10
    base_utility: float = 0.5
    price_sensitivity: float = 2.0
    treatment_price_multiplier: float = 1.2
    base_price_log_mean: float = 0.0
    base_price_log_sd: float = 0.2
    cleaning_fee_mean: float = 0.5
    capacity_per_listing: int | None = 10
    mean_extra_nights: float = 2.0
    horizon_days: int = 30
    seed: int = 0

    def __post_init__(self):
        for name in ("n_listings", "n_markets", "latent_dim", "n_guests",
                     "consideration_k", "horizon_days"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.consideration_k > self.n_listings:
            raise ConfigError("consideration_k cannot exceed n_listings")
        if self.n_markets > self.n_listings:
            raise ConfigError("n_markets cannot exceed n_listings")
        if self.capacity_per_listing is not None and self.capacity_per_listing < 1:
            raise ConfigError("capacity_per_listing must be >= 1 (or None for unlimited)")
        if self.price_sensitivity < 0:
            raise ConfigError("price_sensitivity must be >= 0")
        if not self.treatment_price_multiplier > 0:
            raise ConfigError("treatment_price_multiplier must be positive")
        for name in ("market_spread", "base_price_log_sd", "cleaning_fee_mean", "mean_extra_nights"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")

    @classmethod
    def from_mapping(cls, values: Mapping) -> SimConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(values) - known
        if unknown:
            raise ConfigError(f"unknown simulator keys: {sorted(unknown)}")
        return cls(**values)


@dataclass(frozen=True)
class GuestStream:
    queries: np.ndarray  # guests x dim
    nights: np.ndarray   # nights each guest would book
    shock_key: int


@dataclass(frozen=True)
class SimWorld:
    config: SimConfig
    listing_ids: tuple[str, ...]
    market_ids: tuple[str, ...]
    market_of: np.ndarray
    centroids: np.ndarray
    positions: np.ndarray
    base_price: np.ndarray
    cleaning_fee: np.ndarray
    capacity: np.ndarray  # UNLIMITED (-1) for no limit
    guests: GuestStream
    pre_guests: GuestStream
    listings: tuple[ListingRecord, ...]
    sessions: tuple[SearchSession, ...]

    @property
    def n_listings(self) -> int:
        return len(self.listing_ids)


@dataclass(frozen=True)
class OutcomePanel:
    listing_ids: tuple[str, ...]
    bookings: np.ndarray
    nights: np.ndarray
    gross_spend: np.ndarray
    choices: np.ndarray  # per guest: listing index, or -1 for the outside option

    @property
    def total_bookings(self) -> int:
        return int(self.bookings.sum())

    def to_outcomes(self) -> dict[str, Outcome]:
        return {
            lid: Outcome(int(b), int(n), float(s))
            for lid, b, n, s in zip(self.listing_ids, self.bookings, self.nights, self.gross_spend)
        }


class GlobalFlag(str, enum.Enum):
    AS_ASSIGNED = "as_assigned"
    ALL_TREATED = "all_treated"
    ALL_CONTROL = "all_control"


# ---------------------------------------------------------------- shocks

@numba.njit(cache=True)
def _mix64(z):
    z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return z ^ (z >> np.uint64(31))


@numba.njit(cache=True)
def _gumbel(key, guest, item):
    z = _mix64(np.uint64(key) + np.uint64(guest + 1) * np.uint64(_GOLDEN))
    z = _mix64(z ^ (np.uint64(item + 1) * np.uint64(_LISTING_SALT)))
    u = (np.float64(z >> np.uint64(11)) + 0.5) * _TWO_POW_53
    return -np.log(-np.log(u))


def gumbel_shocks(key: int, guests: np.ndarray, items: np.ndarray) -> np.ndarray:
    """Vectorized twin of the kernel's shock hash, broadcasting guests x items."""
    def mix(z):
        z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
        return z ^ (z >> np.uint64(31))

    g = np.asarray(guests, dtype=np.uint64)
    j = np.asarray(items, dtype=np.uint64)
    with np.errstate(over="ignore"):
        z = mix(np.uint64(key) + (g + np.uint64(1)) * np.uint64(_GOLDEN))
        z = mix(z ^ ((j + np.uint64(1)) * np.uint64(_LISTING_SALT)))
    u = ((z >> np.uint64(11)).astype(np.float64) + 0.5) * _TWO_POW_53
    return -np.log(-np.log(u))


# ---------------------------------------------------------------- choice kernel

@numba.njit(cache=True, nogil=True)
def _nearest_available(query, positions, remaining, k, out, out_dist):
    """Fill ``out`` with up to k nearest listings that have capacity left.

    Closest first; equal distances keep the lower index first.
    """
    n, dim = positions.shape
    found = 0
    for j in range(n):
        if remaining[j] == 0:
            continue
        s = 0.0
        for d in range(dim):
            diff = positions[j, d] - query[d]
            s += diff * diff
        if found == k and s >= out_dist[k - 1]:
            continue
        pos = found if found < k else k - 1
        while pos > 0 and out_dist[pos - 1] > s:
            if pos < k:
                out[pos] = out[pos - 1]
                out_dist[pos] = out_dist[pos - 1]
            pos -= 1
        out[pos] = j
        out_dist[pos] = s
        if found < k:
            found += 1
    return found


@numba.njit(cache=True, nogil=True)
def _simulate_kernel(queries, positions, price, utility_base, sensitivity,
                     capacity, k, key, views, n_views, choices):
    n_guests = queries.shape[0]
    n = positions.shape[0]
    remaining = capacity.copy()
    considered = np.empty(k, dtype=np.int64)
    dist = np.empty(k)
    for g in range(n_guests):
        found = _nearest_available(queries[g], positions, remaining, k, considered, dist)
        best = -1
        best_u = _gumbel(key, g, n)  # outside option, utility 0
        for c in range(found):
            j = considered[c]
            views[g, c] = j
            u = utility_base - sensitivity * price[j] + _gumbel(key, g, j)
            if u > best_u:
                best_u = u
                best = j
        n_views[g] = found
        choices[g] = best
        if best >= 0 and remaining[best] > 0:
            remaining[best] -= 1


def _draw_guests(config: SimConfig, centroids, market_weights, label) -> GuestStream:
    rng = make_rng(config.seed, label)
    markets = rng.choice(len(centroids), size=config.n_guests, p=market_weights)
    queries = centroids[markets] + rng.standard_normal((config.n_guests, config.latent_dim))
    nights = np.minimum(1 + rng.poisson(config.mean_extra_nights, size=config.n_guests),
                        config.horizon_days).astype(np.int64)
    return GuestStream(queries, nights, derive_seed(config.seed, label, "shocks"))


def _run(world: SimWorld, stream: GuestStream, price: np.ndarray):
    cfg = world.config
    n_guests = len(stream.queries)
    views = np.full((n_guests, cfg.consideration_k), -1, dtype=np.int64)
    n_views = np.zeros(n_guests, dtype=np.int64)
    choices = np.empty(n_guests, dtype=np.int64)
    _simulate_kernel(stream.queries, world.positions, price,
                     cfg.base_utility, cfg.price_sensitivity, world.capacity,
                     cfg.consideration_k, np.uint64(stream.shock_key), views, n_views, choices)
    return views, n_views, choices


def _aggregate(world: SimWorld, stream: GuestStream, price, choices) -> OutcomePanel:
    n = world.n_listings
    booked = choices >= 0
    idx = choices[booked]
    nights = stream.nights[booked]
    bookings = np.bincount(idx, minlength=n).astype(np.int64)
    total_nights = np.bincount(idx, weights=nights, minlength=n).astype(np.int64)
    spend = np.bincount(idx, weights=price[idx] * nights + world.cleaning_fee[idx], minlength=n)
    return OutcomePanel(world.listing_ids, bookings, total_nights, spend, choices)


def generate_world(config: SimConfig) -> SimWorld:
    """Draw listings, markets, prices and two guest streams from ``config.seed``.

    The pre-period stream runs once with every listing at base price to
    produce pre-treatment listing metrics and browsing sessions.
    """
    rng = make_rng(config.seed, "listings")
    dim, n = config.latent_dim, config.n_listings
    centroids = rng.normal(0.0, config.market_spread, size=(config.n_markets, dim))
    # every market gets at least one listing; the rest are spread uniformly
    market_of = np.concatenate([
        np.arange(config.n_markets),
        rng.integers(config.n_markets, size=n - config.n_markets),
    ])
    market_of = np.sort(market_of)
    positions = centroids[market_of] + rng.standard_normal((n, dim))
    base_price = np.exp(rng.normal(config.base_price_log_mean, config.base_price_log_sd, size=n))
    cleaning_fee = rng.exponential(config.cleaning_fee_mean, size=n) if config.cleaning_fee_mean \
        else np.zeros(n)
    cap = UNLIMITED if config.capacity_per_listing is None else config.capacity_per_listing
    capacity = np.full(n, cap, dtype=np.int64)
    weights = np.bincount(market_of, minlength=config.n_markets) / n

    width = len(str(n - 1))
    listing_ids = tuple(f"L{i:0{width}d}" for i in range(n))
    market_ids = tuple(f"M{m:0{len(str(config.n_markets - 1))}d}" for m in range(config.n_markets))

    guests = _draw_guests(config, centroids, weights, "guests")
    pre_guests = _draw_guests(config, centroids, weights, "pre_guests")
    world = SimWorld(config, listing_ids, market_ids, market_of, centroids, positions,
                     base_price, cleaning_fee, capacity, guests, pre_guests, (), ())
    return _attach_pre_period(world)


def _attach_pre_period(world: SimWorld) -> SimWorld:
    views, n_views, choices = _run(world, world.pre_guests, world.base_price)
    pre = _aggregate(world, world.pre_guests, world.base_price, choices)
    booking_value = np.bincount(
        choices[choices >= 0],
        weights=world.base_price[choices[choices >= 0]] * world.pre_guests.nights[choices >= 0],
        minlength=world.n_listings,
    )
    view_counts = np.bincount(views[views >= 0], minlength=world.n_listings)
    mean_views = max(view_counts.mean(), 1e-12)
    cap = world.capacity
    occupancy = np.where(cap > 0, pre.bookings / np.where(cap > 0, cap, 1), 0.0)
    listings = tuple(
        ListingRecord(
            listing_id=lid,
            market_id=world.market_ids[world.market_of[i]],
            pre_bookings=int(pre.bookings[i]),
            pre_nights=int(pre.nights[i]),
            pre_booking_value=float(booking_value[i]),
            pre_gross_spend=float(pre.gross_spend[i]),
            supply_elasticity_index=float(occupancy[i]),
            demand_elasticity_index=float(view_counts[i] / mean_views),
        )
        for i, lid in enumerate(world.listing_ids)
    )
    ids = world.listing_ids
    sessions = tuple(
        SearchSession(f"G{g}", tuple(ids[j] for j in views[g, :n_views[g]]), bool(choices[g] >= 0))
        for g in range(len(choices)) if n_views[g] > 0
    )
    return SimWorld(**{**{f.name: getattr(world, f.name) for f in fields(SimWorld)},
                       "listings": listings, "sessions": sessions})


def treatment_mask(world: SimWorld, assignment: DesignAssignment | None,
                   mode: GlobalFlag | str = GlobalFlag.AS_ASSIGNED,
                   uncovered_as_control: bool = False) -> np.ndarray:
    """Per-listing treatment flags; uncovered listings raise unless allowed as control."""
    mode = GlobalFlag(mode)
    if mode is GlobalFlag.ALL_TREATED:
        return np.ones(world.n_listings, dtype=bool)
    if mode is GlobalFlag.ALL_CONTROL:
        return np.zeros(world.n_listings, dtype=bool)
    if assignment is None:
        raise ConfigError("as_assigned simulation needs an assignment")
    flags = np.zeros(world.n_listings, dtype=bool)
    for i, lid in enumerate(world.listing_ids):
        try:
            flags[i] = assignment.treatment_of(lid)
        except KeyError:
            if not uncovered_as_control:
                raise ConfigError(f"assignment does not cover listing {lid!r}") from None
    return flags


def guest_prices(world: SimWorld, treated: np.ndarray) -> np.ndarray:
    return np.where(treated, world.base_price * world.config.treatment_price_multiplier,
                    world.base_price)


def simulate_outcomes(world: SimWorld, assignment: DesignAssignment | None = None,
                      mode: GlobalFlag | str = GlobalFlag.AS_ASSIGNED,
                      uncovered_as_control: bool = False) -> OutcomePanel:
    """Run the experiment-period guest stream under an assignment or a global flag."""
    price = guest_prices(world, treatment_mask(world, assignment, mode, uncovered_as_control))
    _, _, choices = _run(world, world.guests, price)
    return _aggregate(world, world.guests, price, choices)


@dataclass(frozen=True)
class TATE:
    per_listing: np.ndarray
    average: float
    outcome: str


def ground_truth_tate(world: SimWorld, outcome: str = "bookings") -> TATE:
    """Mean per-listing difference between the all-treated and all-control runs."""
    if outcome not in ("bookings", "nights", "gross_spend"):
        raise ConfigError(f"unknown outcome {outcome!r}")
    treated = getattr(simulate_outcomes(world, mode=GlobalFlag.ALL_TREATED), outcome)
    control = getattr(simulate_outcomes(world, mode=GlobalFlag.ALL_CONTROL), outcome)
    diff = treated.astype(float) - control.astype(float)
    return TATE(diff, math.fsum(diff) / len(diff), outcome)
