import json
from collections import Counter
from pathlib import Path

import pytest

from metaexp.cli import main
from metaexp.data import FIXTURE_CONFIG
from metaexp.datamodel import MetaArm, load_assignment

SIM = """seed = 4
sim_n_listings = 400
sim_n_markets = 5
sim_n_guests = 4000
embed_dim = 4
embed_epochs = 1
cluster_min_leaf = 5
cluster_threshold = 20
capture_compare_threshold = 60
n_replications = 2
analysis_variants = true
covariates = pre_bookings
"""


def run(capsys, *argv):
    code = main(list(argv))
    captured = capsys.readouterr()
    return code, captured.out, captured.err


def write_conf(path: Path, extra: str = "") -> Path:
    path.write_text(SIM + extra)
    return path


def snapshot_body(path: Path) -> str:
    return "".join(path.read_text().splitlines(keepends=True)[1:])


def test_usage_and_io_exit_codes(capsys, tmp_path):
    assert run(capsys)[0] == 64
    assert run(capsys, "design")[0] == 64
    assert run(capsys, "bogus", "--config", "x")[0] == 64
    code, _, err = run(capsys, "design", "--config", str(tmp_path / "absent.conf"))
    assert code == 74 and json.loads(err)["exit_code"] == 74


def test_validation_exit_code(capsys, tmp_path):
    (tmp_path / "bad.conf").write_text("unknown_key = 1\n")
    code, _, err = run(capsys, "design", "--config", str(tmp_path / "bad.conf"))
    assert code == 2 and json.loads(err)["error"] == "ConfigError"
    conf = write_conf(tmp_path / "c.conf")
    assert run(capsys, "design", "--config", str(conf), "--out", str(tmp_path / "o"))[0] == 2


def test_report_on_empty_directory(capsys, tmp_path):
    conf = write_conf(tmp_path / "c.conf")
    code, _, err = run(capsys, "report", "--config", str(conf), "--out", str(tmp_path / "empty"))
    assert code == 2 and json.loads(err)["error"] == "MissingArtifact"


def test_fixture_design(capsys, tmp_path):
    out = tmp_path / "fx"
    assert run(capsys, "design", "--config", str(FIXTURE_CONFIG), "--out", str(out), "--seed", "1")[0] == 0
    assignment = load_assignment(out / "assignment.jsonl")
    strata = json.loads((out / "strata.json").read_text())["strata"]
    assert len(strata) == 20
    by_cluster = {u.cluster_id: u for u in assignment.units.values()}
    for sid in strata:
        roles = Counter(
            "b" if by_cluster[c].meta_arm is MetaArm.BERNOULLI else "t" if by_cluster[c].treatment else "c"
            for c in strata[sid]
        )
        assert roles == {"b": 2, "t": 3, "c": 3}
    balance = json.loads((out / "balance.json").read_text())
    assert set(balance) == {"meta_arm", "treatment_within_bernoulli", "treatment_within_cluster_arm"}

    first = {p.name: p.read_bytes() for p in out.iterdir() if not p.name.endswith(".resolved.conf")}
    snap = snapshot_body(out / "design.resolved.conf")
    assert run(capsys, "design", "--config", str(FIXTURE_CONFIG), "--out", str(out), "--seed", "1")[0] == 0
    assert first == {p.name: p.read_bytes() for p in out.iterdir() if not p.name.endswith(".resolved.conf")}
    assert snapshot_body(out / "design.resolved.conf") == snap

    # rerunning from the snapshot reproduces the artifacts
    rerun = tmp_path / "rerun"
    (tmp_path / "snap.conf").write_text((out / "design.resolved.conf").read_text())
    assert run(capsys, "design", "--config", str(tmp_path / "snap.conf"), "--out", str(rerun))[0] == 0
    assert (rerun / "assignment.jsonl").read_bytes() == first["assignment.jsonl"]


@pytest.mark.slow
def test_full_pipeline(capsys, tmp_path):
    out = tmp_path / "run"
    base = write_conf(tmp_path / "base.conf")
    assert run(capsys, "simulate", "--config", str(base), "--out", str(out))[0] == 0
    stage = write_conf(tmp_path / "stage.conf",
                       f"listings = {out}/listings.csv\nsessions = {out}/sessions.jsonl\n"
                       f"embeddings = {out}/embeddings.bin\n")
    for cmd in ("embed", "cluster"):
        assert run(capsys, cmd, "--config", str(stage), "--out", str(out))[0] == 0
    assert json.loads((out / "capture_ratios.json").read_text())["large_threshold"] == 60
    design = write_conf(tmp_path / "design.conf",
                        f"listings = {out}/listings.csv\nclusters = {out}/clusters.csv\n")
    assert run(capsys, "design", "--config", str(design), "--out", str(out))[0] == 0
    full = write_conf(tmp_path / "full.conf",
                      f"listings = {out}/listings.csv\nassignment = {out}/assignment.jsonl\n"
                      f"outcomes = {out}/outcomes.csv\n")
    for cmd in ("simulate", "analyze", "metastudy"):
        assert run(capsys, cmd, "--config", str(full), "--out", str(out))[0] == 0
    code, text, _ = run(capsys, "report", "--config", str(full), "--out", str(out))
    assert code == 0
    for row in ("Treatment", "Bernoulli × Treatment", "Observations", "Bernoulli randomized"):
        assert row in text
    report = json.loads((out / "report.json").read_text())
    assert {"fits", "bias", "power", "variants", "capture_ratios", "metastudy"} <= set(report)
    assert len((out / "replications.jsonl").read_text().splitlines()) == 2
    truth = json.loads((out / "ground_truth.json").read_text())
    assert truth["tate"]["bookings"] < 0
