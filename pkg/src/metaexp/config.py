"""Flat ``key = value`` pipeline configuration.

Blank lines and lines starting with ``#`` are ignored. Unknown or repeated
keys are errors. Relative paths resolve against the config file's directory.
"""

from __future__ import annotations

import dataclasses
import os
import types
import typing
from dataclasses import dataclass, fields
from datetime import datetime, timezone
from pathlib import Path

from metaexp.analyze.regression import COVARIATES
from metaexp.errors import ConfigError
from metaexp.sim.metastudy import DesignPipelineConfig
from metaexp.sim.world import SimConfig

PATH_KEYS = (
    "listings", "sessions", "embeddings", "clusters", "assignment",
    "outcomes", "analysis_dir", "out_dir",
)
SNAPSHOT_STAMP = "# created_at: "


@dataclass(frozen=True)
class PipelineConfig:
    seed: int = 0
    workers: int = 1
    out_dir: str | None = None

    # inputs
    listings: str | None = None
    sessions: str | None = None
    embeddings: str | None = None
    clusters: str | None = None
    assignment: str | None = None
    outcomes: str | None = None
    analysis_dir: str | None = None

    # embedding
    embed_dim: int = 16
    embed_window_k: int = 5
    embed_negatives_m: int = 5
    embed_epochs: int = 5
    embed_learning_rate: float = 0.05
    embed_min_count: int = 1

    # clustering
    cluster_max_depth: int = 20
    cluster_min_leaf: int = 20
    cluster_threshold: int = 50
    capture_compare_threshold: int | None = None

    # design
    stratum_size: int = 8
    bernoulli_clusters_per_stratum: int = 2
    treated_share: float = 0.5
    pricing_design: bool = False

    # analysis
    outcome: str = "bookings"
    covariates: tuple[str, ...] = COVARIATES
    cluster_se: bool = True
    fixed_effects: str = "absorb"
    power: float = 0.80
    confidence: float = 0.95
    analysis_variants: bool = False

    # simulation and meta-study
    sim_n_listings: int = SimConfig.n_listings
    sim_n_markets: int = SimConfig.n_markets
    sim_latent_dim: int = SimConfig.latent_dim
    sim_market_spread: float = SimConfig.market_spread
    sim_n_guests: int = SimConfig.n_guests
    sim_consideration_k: int = SimConfig.consideration_k
    sim_base_utility: float = SimConfig.base_utility
    sim_price_sensitivity: float = SimConfig.price_sensitivity
    sim_treatment_price_multiplier: float = SimConfig.treatment_price_multiplier
    sim_base_price_log_mean: float = SimConfig.base_price_log_mean
    sim_base_price_log_sd: float = SimConfig.base_price_log_sd
    sim_cleaning_fee_mean: float = SimConfig.cleaning_fee_mean
    sim_capacity_per_listing: int | None = SimConfig.capacity_per_listing
    sim_mean_extra_nights: float = SimConfig.mean_extra_nights
    sim_horizon_days: int = SimConfig.horizon_days
    cluster_input: str = "latent"
    n_replications: int = 200

    def sim_config(self, seed: int) -> SimConfig:
        values = {f.name[4:]: getattr(self, f.name) for f in fields(self) if f.name.startswith("sim_")}
        return SimConfig(**values, seed=seed)

    def design_pipeline(self) -> DesignPipelineConfig:
        return DesignPipelineConfig(
            cluster_input=self.cluster_input,
            cluster_threshold=self.cluster_threshold,
            max_depth=self.cluster_max_depth,
            min_leaf=self.cluster_min_leaf,
            stratum_size=self.stratum_size,
            bernoulli_clusters_per_stratum=self.bernoulli_clusters_per_stratum,
            treated_share=self.treated_share,
            outcome=self.outcome,
            covariates=self.covariates,
            cluster_se=self.cluster_se,
            embed_dim=self.embed_dim,
            embed_window_k=self.embed_window_k,
            embed_negatives_m=self.embed_negatives_m,
            embed_epochs=self.embed_epochs,
            embed_learning_rate=self.embed_learning_rate,
        )

    def require(self, key: str) -> Path:
        value = getattr(self, key)
        if value is None:
            raise ConfigError(f"config key {key!r} is required for this command")
        return Path(value)


_FIELD_TYPES = typing.get_type_hints(PipelineConfig)


def _parse_value(key: str, raw: str):
    kind = _FIELD_TYPES[key]
    optional = False
    if isinstance(kind, types.UnionType) or typing.get_origin(kind) is typing.Union:
        args = [a for a in typing.get_args(kind) if a is not type(None)]
        kind, optional = args[0], True
    if optional and raw.lower() in ("none", ""):
        return None
    try:
        if kind is bool:
            if raw.lower() not in ("true", "false"):
                raise ValueError(raw)
            return raw.lower() == "true"
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
        if typing.get_origin(kind) is tuple:
            return tuple(p.strip() for p in raw.split(",") if p.strip())
        return raw
    except ValueError:
        raise ConfigError(f"config key {key!r}: cannot parse {raw!r}") from None


def _format_value(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(value)
    return str(value)


def parse_config(text: str, base_dir: str | os.PathLike = ".") -> PipelineConfig:
    values: dict = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, raw = line.partition("=")
        key, raw = key.strip(), raw.strip()
        if not sep or not key:
            raise ConfigError(f"config line {lineno}: expected key = value")
        if key not in _FIELD_TYPES:
            raise ConfigError(f"config line {lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"config line {lineno}: duplicate key {key!r}")
        values[key] = _parse_value(key, raw)
    for key in PATH_KEYS:
        if values.get(key) is not None:
            values[key] = str((Path(base_dir) / values[key]).resolve())
    try:
        return PipelineConfig(**values)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


def load_config(path: str | os.PathLike) -> PipelineConfig:
    path = Path(path)
    return parse_config(path.read_text(encoding="utf-8"), path.parent)


def render_config(config: PipelineConfig) -> str:
    return "".join(f"{f.name} = {_format_value(getattr(config, f.name))}\n" for f in fields(config))


def write_snapshot(config: PipelineConfig, path: str | os.PathLike) -> None:
    """Write the resolved config; the timestamp line is the only varying content."""
    stamp = datetime.now(timezone.utc).isoformat(timespec="seconds")
    Path(path).write_text(f"{SNAPSHOT_STAMP}{stamp}\n" + render_config(config), encoding="utf-8")


def with_overrides(config: PipelineConfig, **overrides) -> PipelineConfig:
    return dataclasses.replace(config, **{k: v for k, v in overrides.items() if v is not None})
