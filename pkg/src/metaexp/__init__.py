"""Meta-experiment design and analysis for two-sided marketplaces.

Listings are embedded from search sessions, partitioned into clusters,
blocked into strata and randomized into a Bernoulli arm and a
cluster-randomized arm so that interference bias can be measured.
"""

from metaexp.seeding import derive_seed, make_rng

__version__ = "0.1.0"
__all__ = ["derive_seed", "make_rng", "__version__"]
