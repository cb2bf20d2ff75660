"""Bundled example inputs."""

from pathlib import Path

DATA_DIR = Path(__file__).parent
FIXTURE_CONFIG = DATA_DIR / "fixture.conf"
FIXTURE_LISTINGS = DATA_DIR / "fixture_listings.csv"
FIXTURE_CLUSTERS = DATA_DIR / "fixture_clusters.csv"
