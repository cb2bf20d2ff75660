"""Monte-Carlo replication of the meta-experiment on simulated marketplaces.

Each replication draws a fresh world from a seed derived from the master seed
and the replication index, clusters its listings, blocks clusters into strata,
randomizes the two designs, runs the experiment period and compares each
arm's treatment estimate with the exact total treatment effect.
"""

from __future__ import annotations

import json
import math
import warnings
from collections.abc import Iterable, Mapping, Sequence
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, fields, replace

import numpy as np
from scipy import stats

from metaexp.analyze.regression import COVARIATES, OUTCOMES, ols_fit
from metaexp.cluster import assign_clusters, build_partition_tree
from metaexp.datamodel import MetaArm
from metaexp.design import assign_design, build_strata, compute_cluster_covariates, mahalanobis_matrix
from metaexp.embed import EmbedConfig, EmbeddingMatrix, train_embeddings
from metaexp.errors import ConfigError
from metaexp.seeding import derive_seed
from metaexp.sim.world import SimConfig, generate_world, ground_truth_tate, simulate_outcomes

CLUSTER_INPUTS = ("latent", "embedding")


@dataclass(frozen=True)
class DesignPipelineConfig:
    cluster_input: str = "latent"
    cluster_threshold: int = 50
    max_depth: int = 20
    min_leaf: int = 10
    stratum_size: int = 8
    bernoulli_clusters_per_stratum: int = 2
    treated_share: float = 0.5
    outcome: str = "bookings"
    covariates: tuple[str, ...] = COVARIATES
    cluster_se: bool = True
    embed_dim: int = 16
    embed_window_k: int = 5
    embed_negatives_m: int = 5
    embed_epochs: int = 5
    embed_learning_rate: float = 0.05

    def __post_init__(self):
        object.__setattr__(self, "covariates", tuple(self.covariates))
        if self.cluster_input not in CLUSTER_INPUTS:
            raise ConfigError(f"cluster_input must be one of {CLUSTER_INPUTS}")
        if self.outcome not in OUTCOMES:
            raise ConfigError(f"outcome must be one of {OUTCOMES}")
        if self.cluster_threshold < 1 or self.min_leaf < 1:
            raise ConfigError("cluster_threshold and min_leaf must be >= 1")

    @classmethod
    def from_mapping(cls, values: Mapping) -> DesignPipelineConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(values) - known
        if unknown:
            raise ConfigError(f"unknown pipeline keys: {sorted(unknown)}")
        return cls(**values)

    def embed_config(self, seed: int) -> EmbedConfig:
        return EmbedConfig(dim=self.embed_dim, window_k=self.embed_window_k,
                           negatives_m=self.embed_negatives_m, epochs=self.embed_epochs,
                           learning_rate=self.embed_learning_rate, seed=seed)


def replication_seed(master_seed: int, index: int) -> int:
    return derive_seed(master_seed, "replication", index)


def run_replication(sim_config: SimConfig, pipeline: DesignPipelineConfig, index: int,
                    master_seed: int) -> dict:
    seed = replication_seed(master_seed, index)
    world = generate_world(replace(sim_config, seed=seed))
    listings = list(world.listings)

    if pipeline.cluster_input == "latent":
        points = EmbeddingMatrix(world.listing_ids, world.positions, np.zeros_like(world.positions))
    else:
        points = train_embeddings(world.sessions, listings,
                                  pipeline.embed_config(derive_seed(seed, "embed")), workers=1)
        # listings never browsed have no vector and stay outside the experiment
        covered = set(points.vocab)
        listings = [r if r.listing_id in covered else replace(r, eligible=False) for r in listings]

    tree = build_partition_tree(points, pipeline.max_depth, pipeline.min_leaf,
                                seed=derive_seed(seed, "tree"))
    clusters = assign_clusters(tree, pipeline.cluster_threshold)
    covariates = compute_cluster_covariates(listings, clusters)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        strata = build_strata(mahalanobis_matrix(covariates), pipeline.stratum_size,
                              covariates.cluster_ids)
    design = assign_design(
        strata, clusters, derive_seed(seed, "design"),
        bernoulli_clusters_per_stratum=pipeline.bernoulli_clusters_per_stratum,
        treated_share=pipeline.treated_share,
        eligible=[r.listing_id for r in listings if r.eligible],
    )
    outcomes = simulate_outcomes(world, design, uncovered_as_control=True).to_outcomes()
    truth = ground_truth_tate(world, pipeline.outcome).average

    estimates = {}
    for label, arm in (("bernoulli", MetaArm.BERNOULLI), ("cluster", MetaArm.CLUSTER_RANDOMIZED)):
        fit = ols_fit(outcomes, design, listings, spec="arm_level", arm=arm,
                      outcome=pipeline.outcome, covariates=pipeline.covariates,
                      cluster_se=pipeline.cluster_se)
        estimates[label] = (fit.coef("treatment"), fit.se("treatment"))
    return {
        "replication": index,
        "seed": seed,
        "n_clusters": len(clusters.sizes),
        "n_strata": len(strata.strata),
        "ground_truth": truth,
        "bernoulli_estimate": estimates["bernoulli"][0],
        "bernoulli_se": estimates["bernoulli"][1],
        "cluster_estimate": estimates["cluster"][0],
        "cluster_se": estimates["cluster"][1],
        "bias_bernoulli": estimates["bernoulli"][0] - truth,
        "bias_cluster": estimates["cluster"][0] - truth,
    }


def _replication_task(args):
    return run_replication(*args)


@dataclass(frozen=True)
class MetaStudySummary:
    n_replications: int
    mean_ground_truth: float
    mean_bias_bernoulli: float
    mc_se_bias_bernoulli: float
    mean_bias_cluster: float
    mc_se_bias_cluster: float
    mean_abs_bias_bernoulli: float
    mean_abs_bias_cluster: float
    abs_bias_reduction: float
    paired_t: float
    paired_p_value: float

    def to_dict(self) -> dict:
        # NaN (undefined with one replication) is written as JSON null
        return {k: None if isinstance(v, float) and math.isnan(v) else v
                for k, v in asdict(self).items()}


def _mc_se(x: np.ndarray) -> float:
    return float(x.std(ddof=1) / math.sqrt(len(x))) if len(x) > 1 else math.nan


def summarize(records: Sequence[Mapping]) -> MetaStudySummary:
    """Mean biases with Monte-Carlo standard errors and a one-sided paired
    t-test of ``|bias_bernoulli| > |bias_cluster|``."""
    bb = np.array([r["bias_bernoulli"] for r in records], dtype=float)
    bc = np.array([r["bias_cluster"] for r in records], dtype=float)
    truth = np.array([r["ground_truth"] for r in records], dtype=float)
    ab, ac = np.abs(bb), np.abs(bc)
    if len(records) > 1 and np.any(ab != ac):
        test = stats.ttest_rel(ab, ac, alternative="greater")
        t, p = float(test.statistic), float(test.pvalue)
    else:
        t, p = math.nan, math.nan
    mean_ab = float(ab.mean())
    return MetaStudySummary(
        n_replications=len(records),
        mean_ground_truth=float(truth.mean()),
        mean_bias_bernoulli=float(bb.mean()),
        mc_se_bias_bernoulli=_mc_se(bb),
        mean_bias_cluster=float(bc.mean()),
        mc_se_bias_cluster=_mc_se(bc),
        mean_abs_bias_bernoulli=mean_ab,
        mean_abs_bias_cluster=float(ac.mean()),
        abs_bias_reduction=1.0 - float(ac.mean()) / mean_ab if mean_ab > 0 else math.nan,
        paired_t=t,
        paired_p_value=p,
    )


def run_meta_study(sim_config: SimConfig, pipeline: DesignPipelineConfig, n_replications: int,
                   master_seed: int = 0, workers: int = 1) -> tuple[list[dict], MetaStudySummary]:
    """Run replications (in parallel processes if ``workers > 1``).

    Each replication depends only on its derived seed, so the records do not
    depend on the worker count.
    """
    if n_replications < 1:
        raise ConfigError("n_replications must be >= 1")
    if workers < 1:
        raise ConfigError("workers must be >= 1")
    tasks = [(sim_config, pipeline, i, master_seed) for i in range(n_replications)]
    if workers == 1:
        records = [_replication_task(t) for t in tasks]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            records = list(pool.map(_replication_task, tasks))
    return records, summarize(records)


def write_records(records: Iterable[Mapping], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def write_summary(summary: MetaStudySummary, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(summary.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
