from metaexp.sim.metastudy import DesignPipelineConfig, MetaStudySummary, run_meta_study, summarize
from metaexp.sim.world import (
    GlobalFlag,
    OutcomePanel,
    SimConfig,
    SimWorld,
    generate_world,
    ground_truth_tate,
    simulate_outcomes,
)

__all__ = [
    "DesignPipelineConfig",
    "GlobalFlag",
    "MetaStudySummary",
    "OutcomePanel",
    "SimConfig",
    "SimWorld",
    "generate_world",
    "ground_truth_tate",
    "run_meta_study",
    "simulate_outcomes",
    "summarize",
]
