"""Command-line pipeline: ``metaexp <cmd> --config PATH [--seed N] [--workers N] [--out DIR]``.

Exit codes: 0 success, 2 validation error, 64 usage error, 74 I/O error.
Validation and I/O errors print one JSON line to standard error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import warnings
from pathlib import Path

from metaexp import cluster as clustering
from metaexp import datamodel as dm
from metaexp import design, embed
from metaexp.analyze import report as fmt
from metaexp.analyze.power import PowerReport, power_report
from metaexp.analyze.regression import (
    BiasDecomposition,
    RegressionFit,
    joint_bias_decomposition,
    ols_fit,
)
from metaexp.analyze.variants import cluster_aggregated_fit, mixed_unit_fit
from metaexp.config import PipelineConfig, load_config, with_overrides, write_snapshot
from metaexp.errors import MetaExpError, MissingArtifact
from metaexp.seeding import derive_seed
from metaexp.sim import metastudy
from metaexp.sim.world import GlobalFlag, generate_world, ground_truth_tate, simulate_outcomes

EXIT_OK, EXIT_INVALID, EXIT_USAGE, EXIT_IO = 0, 2, 64, 74
COMMANDS = ("embed", "cluster", "design", "simulate", "analyze", "metastudy", "report")

logger = logging.getLogger("metaexp")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _read_json(path: Path):
    if not path.is_file():
        raise MissingArtifact(f"missing artifact {path}")
    return json.loads(path.read_text(encoding="utf-8"))


def _listings_format(path: Path) -> str:
    return "jsonl" if path.suffix in (".jsonl", ".json") else "csv"


def _load_listings(cfg: PipelineConfig):
    path = cfg.require("listings")
    return dm.load_listings(path, _listings_format(path))


# ---------------------------------------------------------------- commands

def cmd_embed(cfg: PipelineConfig, out: Path) -> None:
    sessions = dm.load_sessions(cfg.require("sessions"))
    listings = _load_listings(cfg)
    config = embed.EmbedConfig(
        dim=cfg.embed_dim, window_k=cfg.embed_window_k, negatives_m=cfg.embed_negatives_m,
        epochs=cfg.embed_epochs, learning_rate=cfg.embed_learning_rate,
        seed=derive_seed(cfg.seed, "embed"), min_count=cfg.embed_min_count,
    )
    emb = embed.train_embeddings(sessions, listings, config, workers=cfg.workers)
    embed.save_embeddings(emb, out / "embeddings.bin")
    _write_json(out / "embed_stats.json", {"epoch_losses": emb.epoch_losses, **emb.stats})


def cmd_cluster(cfg: PipelineConfig, out: Path) -> None:
    emb = embed.load_embeddings(cfg.require("embeddings"))
    tree = clustering.build_partition_tree(emb, cfg.cluster_max_depth, cfg.cluster_min_leaf,
                                           seed=derive_seed(cfg.seed, "tree"))
    clusters = clustering.assign_clusters(tree, cfg.cluster_threshold)
    clustering.save_clusters(clusters, out / "clusters.csv")
    if cfg.sessions is None:
        return
    sessions = dm.load_sessions(cfg.sessions)
    reports = [
        clustering.demand_capture_report(sessions, clusters, single, bookers).to_dict()
        for single, bookers in clustering.POPULATION_FILTERS
    ]
    _write_json(out / "capture.json", {"threshold": cfg.cluster_threshold, "reports": reports})
    if cfg.capture_compare_threshold is not None:
        larger = clustering.assign_clusters(tree, cfg.capture_compare_threshold)
        clustering.save_clusters(larger, out / "clusters_compare.csv")
        _write_json(out / "capture_ratios.json", {
            "small_threshold": cfg.cluster_threshold,
            "large_threshold": cfg.capture_compare_threshold,
            "rows": clustering.capture_ratio_table(sessions, clusters, larger),
        })


def cmd_design(cfg: PipelineConfig, out: Path) -> None:
    listings = _load_listings(cfg)
    clusters = clustering.load_clusters(cfg.require("clusters"))
    covariates = design.compute_cluster_covariates(listings, clusters, cfg.pricing_design)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)  # also logged
        strata = design.build_strata(design.mahalanobis_matrix(covariates), cfg.stratum_size,
                                     covariates.cluster_ids)
    assignment = design.assign_design(
        strata, clusters, derive_seed(cfg.seed, "design"),
        bernoulli_clusters_per_stratum=cfg.bernoulli_clusters_per_stratum,
        treated_share=cfg.treated_share,
        eligible=[r.listing_id for r in listings if r.eligible],
    )
    dm.save_assignment(assignment, out / "assignment.jsonl")
    _write_json(out / "strata.json", {
        "strata": dict(zip(strata.stratum_ids, map(list, strata.strata))),
        "excluded": list(strata.excluded),
        "covariates": covariates.as_dict(),
    })
    balance = {
        g.value: {m: r.to_dict() for m, r in design.balance_check(listings, assignment, g).items()}
        for g in design.BalanceGrouping
    }
    _write_json(out / "balance.json", balance)


def cmd_simulate(cfg: PipelineConfig, out: Path) -> None:
    world = generate_world(cfg.sim_config(derive_seed(cfg.seed, "world")))
    dm.save_listings(world.listings, out / "listings.csv")
    dm.save_sessions(world.sessions, out / "sessions.jsonl")
    if cfg.assignment is None:
        return
    assignment = dm.load_assignment(cfg.assignment)
    panel = simulate_outcomes(world, assignment, uncovered_as_control=True)
    dm.save_outcomes(panel.to_outcomes(), out / "outcomes.csv")
    truth = {o: ground_truth_tate(world, o).average for o in ("bookings", "nights", "gross_spend")}
    _write_json(out / "ground_truth.json", {
        "tate": truth,
        "total_bookings": {
            "as_assigned": panel.total_bookings,
            "all_treated": simulate_outcomes(world, mode=GlobalFlag.ALL_TREATED).total_bookings,
            "all_control": simulate_outcomes(world, mode=GlobalFlag.ALL_CONTROL).total_bookings,
        },
    })


def cmd_analyze(cfg: PipelineConfig, out: Path) -> None:
    listings = _load_listings(cfg)
    assignment = dm.load_assignment(cfg.require("assignment"))
    outcomes = dm.load_outcomes(cfg.require("outcomes"))
    common = dict(outcome=cfg.outcome, covariates=cfg.covariates, cluster_se=cfg.cluster_se,
                  fe=cfg.fixed_effects)
    fits = {
        arm.value: ols_fit(outcomes, assignment, listings, "arm_level", arm=arm, **common)
        for arm in dm.MetaArm
    }
    fits["joint"] = ols_fit(outcomes, assignment, listings, "joint", **common)
    joint = fits["joint"]
    power = power_report({
        "treatment": joint.se("treatment"),
        "bernoulli_x_treatment": joint.se("bernoulli_x_treatment"),
        "bernoulli_arm_treatment": fits[dm.MetaArm.BERNOULLI.value].se("treatment"),
    }, cfg.power, cfg.confidence)
    result = {
        "outcome": cfg.outcome,
        "fits": {k: f.to_dict() for k, f in fits.items()},
        "bias": joint_bias_decomposition(joint).to_dict(),
        "power": power.to_dict(),
    }
    if cfg.analysis_variants:
        result["variants"] = {
            "cluster_aggregated": cluster_aggregated_fit(
                outcomes, assignment, listings, cfg.outcome, cfg.covariates).to_dict(),
            "mixed_unit": mixed_unit_fit(
                outcomes, assignment, listings, cfg.outcome, cfg.covariates).to_dict(),
        }
    _write_json(out / "analysis.json", result)


def cmd_metastudy(cfg: PipelineConfig, out: Path) -> None:
    records, summary = metastudy.run_meta_study(
        cfg.sim_config(cfg.seed), cfg.design_pipeline(), cfg.n_replications,
        master_seed=cfg.seed, workers=cfg.workers,
    )
    metastudy.write_records(records, out / "replications.jsonl")
    metastudy.write_summary(summary, out / "metastudy_summary.json")


def build_report(source: Path) -> tuple[str, dict]:
    """Render text tables from the artifacts found in ``source``."""
    analysis = _read_json(source / "analysis.json")
    fits = {name: RegressionFit.from_dict(d) for name, d in analysis["fits"].items()}
    labels = {"bernoulli": "Bernoulli arm", "cluster_randomized": "Cluster arm", "joint": "Joint"}
    sections = [
        f"Outcome: {analysis['outcome']}",
        fmt.coefficient_table({labels.get(k, k): f for k, f in fits.items()}),
        fmt.bias_share_line(BiasDecomposition(**analysis["bias"])),
        fmt.mde_table(PowerReport(**analysis["power"])),
    ]
    if "variants" in analysis:
        variants = {k: RegressionFit.from_dict(d) for k, d in analysis["variants"].items()}
        sections.append(fmt.coefficient_table(variants))
    payload = dict(analysis)
    capture = source / "capture_ratios.json"
    if capture.is_file():
        rows = _read_json(capture)["rows"]
        sections.append(fmt.capture_table(rows))
        payload["capture_ratios"] = rows
    summary = source / "metastudy_summary.json"
    if summary.is_file():
        payload["metastudy"] = _read_json(summary)
    return "\n\n".join(sections) + "\n", payload


def cmd_report(cfg: PipelineConfig, out: Path) -> None:
    source = Path(cfg.analysis_dir) if cfg.analysis_dir else out
    text, payload = build_report(source)
    (out / "report.txt").write_text(text, encoding="utf-8")
    _write_json(out / "report.json", payload)
    sys.stdout.write(text)


HANDLERS = {
    "embed": cmd_embed,
    "cluster": cmd_cluster,
    "design": cmd_design,
    "simulate": cmd_simulate,
    "analyze": cmd_analyze,
    "metastudy": cmd_metastudy,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="metaexp", description="Meta-experiment design and analysis pipeline.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in COMMANDS:
        p = sub.add_parser(name, help=HANDLERS[name].__name__.removeprefix("cmd_"))
        p.add_argument("--config", required=True, help="flat key = value config file")
        p.add_argument("--seed", type=int, help="master seed (overrides the config)")
        p.add_argument("--workers", type=int, help="parallel workers (default 1)")
        p.add_argument("--out", help="output directory (overrides out_dir)")
    return parser


def run(argv: list[str]) -> int:
    args = build_parser().parse_args(argv)
    cfg = load_config(args.config)
    cfg = with_overrides(cfg, seed=args.seed, workers=args.workers,
                         out_dir=str(Path(args.out).resolve()) if args.out else None)
    out = Path(cfg.out_dir or Path.cwd())
    out.mkdir(parents=True, exist_ok=True)
    write_snapshot(cfg, out / f"{args.command}.resolved.conf")
    HANDLERS[args.command](cfg, out)
    return EXIT_OK


def _fail(code: int, kind: str, message: str) -> int:
    sys.stderr.write(json.dumps({"error": kind, "message": message, "exit_code": code}) + "\n")
    return code


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return run(sys.argv[1:] if argv is None else argv)
    except UsageError as exc:
        return _fail(EXIT_USAGE, "UsageError", str(exc))
    except (MetaExpError, ValueError) as exc:
        return _fail(EXIT_INVALID, type(exc).__name__, str(exc))
    except OSError as exc:
        return _fail(EXIT_IO, type(exc).__name__, str(exc))


if __name__ == "__main__":
    sys.exit(main())
