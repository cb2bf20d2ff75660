"""Core record types plus file ingestion and persistence.

Listings and outcomes are flat CSV tables; sessions and design assignments are
JSON Lines because they carry nested lists. Row numbers in error messages are
1-based data rows (the CSV header is not counted).
"""

from __future__ import annotations

import csv
import enum
import json
import math
import os
from collections.abc import Iterable, Mapping
from dataclasses import dataclass, field, fields
from types import MappingProxyType
from typing import Any

from metaexp.errors import SchemaError

ASSIGNMENT_SCHEMA_VERSION = 1


class TenureClass(str, enum.Enum):
    LONG_TENURED = "long_tenured"
    LESS_TENURED = "less_tenured"


class MetaArm(str, enum.Enum):
    BERNOULLI = "bernoulli"
    CLUSTER_RANDOMIZED = "cluster_randomized"


@dataclass(frozen=True)
class ListingRecord:
    listing_id: str
    market_id: str
    eligible: bool = True
    tenure_class: TenureClass = TenureClass.LONG_TENURED
    pre_bookings: int = 0
    pre_nights: int = 0
    pre_booking_value: float = 0.0
    pre_gross_spend: float = 0.0
    smart_pricing_on: bool = False
    supply_elasticity_index: float | None = None
    demand_elasticity_index: float | None = None

    def __post_init__(self):
        if not self.listing_id:
            raise SchemaError("empty listing_id")
        if not self.market_id:
            raise SchemaError(f"listing {self.listing_id}: empty market_id")
        object.__setattr__(self, "tenure_class", TenureClass(self.tenure_class))
        for name in ("pre_bookings", "pre_nights", "pre_booking_value", "pre_gross_spend"):
            value = getattr(self, name)
            if not math.isfinite(value):
                raise SchemaError(f"listing {self.listing_id}: non-finite metric {name}")
            if value < 0:
                raise SchemaError(f"listing {self.listing_id}: negative metric {name}={value}")
        for name in ("supply_elasticity_index", "demand_elasticity_index"):
            value = getattr(self, name)
            if value is not None and not math.isfinite(value):
                raise SchemaError(f"listing {self.listing_id}: non-finite {name}")


LISTING_COLUMNS = tuple(f.name for f in fields(ListingRecord))
_REQUIRED_LISTING_COLUMNS = LISTING_COLUMNS[:9]


@dataclass(frozen=True)
class SearchSession:
    user_id: str
    listings_viewed: tuple[str, ...]
    booked: bool = False

    def __post_init__(self):
        object.__setattr__(self, "listings_viewed", tuple(self.listings_viewed))
        if not self.listings_viewed:
            raise SchemaError(f"session of user {self.user_id!r} has no viewed listings")


@dataclass(frozen=True)
class Outcome:
    bookings: int
    nights: int
    gross_spend: float

    def __post_init__(self):
        for name in ("bookings", "nights", "gross_spend"):
            value = getattr(self, name)
            if not math.isfinite(value) or value < 0:
                raise SchemaError(f"invalid outcome {name}={value}")


OUTCOME_COLUMNS = ("listing_id", "bookings", "nights", "gross_spend")


@dataclass(frozen=True)
class Unit:
    """Design roles of one listing."""

    cluster_id: str
    stratum_id: str
    meta_arm: MetaArm
    treatment: bool

    def __post_init__(self):
        object.__setattr__(self, "meta_arm", MetaArm(self.meta_arm))


@dataclass(frozen=True)
class DesignAssignment:
    """Per-listing cluster, stratum, meta-arm and treatment.

    ``excluded`` maps remainder clusters (those that did not fit into a full
    stratum) to their listings; those listings are outside the experiment and
    run at the status quo.
    """

    units: Mapping[str, Unit]
    seed: int
    metadata: Mapping[str, Any] = field(default_factory=dict)
    excluded: Mapping[str, tuple[str, ...]] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "units", MappingProxyType(dict(self.units)))
        object.__setattr__(self, "metadata", MappingProxyType(dict(self.metadata)))
        object.__setattr__(
            self, "excluded",
            MappingProxyType({c: tuple(ids) for c, ids in self.excluded.items()}),
        )
        validate_assignment(self)

    def __eq__(self, other):
        if not isinstance(other, DesignAssignment):
            return NotImplemented
        return (
            dict(self.units) == dict(other.units)
            and self.seed == other.seed
            and dict(self.metadata) == dict(other.metadata)
            and dict(self.excluded) == dict(other.excluded)
        )

    def listing_ids(self, meta_arm: MetaArm | None = None) -> list[str]:
        return sorted(
            lid for lid, u in self.units.items() if meta_arm is None or u.meta_arm == meta_arm
        )

    def treatment_of(self, listing_id: str) -> bool:
        """Treatment status; excluded listings run as control."""
        unit = self.units.get(listing_id)
        if unit is not None:
            return unit.treatment
        for members in self.excluded.values():
            if listing_id in members:
                return False
        raise KeyError(listing_id)


def validate_assignment(assignment: DesignAssignment) -> None:
    cluster_arm: dict[str, MetaArm] = {}
    cluster_stratum: dict[str, str] = {}
    cluster_treat: dict[str, bool] = {}
    for lid, unit in assignment.units.items():
        c = unit.cluster_id
        if c in assignment.excluded:
            raise SchemaError(f"listing {lid} belongs to excluded cluster {c}")
        if cluster_arm.setdefault(c, unit.meta_arm) != unit.meta_arm:
            raise SchemaError(f"cluster {c} has listings in both meta-arms")
        if cluster_stratum.setdefault(c, unit.stratum_id) != unit.stratum_id:
            raise SchemaError(f"cluster {c} spans several strata")
        if unit.meta_arm == MetaArm.CLUSTER_RANDOMIZED:
            if cluster_treat.setdefault(c, unit.treatment) != unit.treatment:
                raise SchemaError(f"cluster-randomized cluster {c} has mixed treatments")
    seen = set(assignment.units)
    for c, members in assignment.excluded.items():
        for lid in members:
            if lid in seen:
                raise SchemaError(f"listing {lid} assigned more than once")
            seen.add(lid)


# ---------------------------------------------------------------- parsing helpers

def _parse_bool(value: Any, name: str, row: int) -> bool:
    if isinstance(value, bool):
        return value
    if isinstance(value, str):
        v = value.strip().lower()
        if v in ("true", "1", "yes"):
            return True
        if v in ("false", "0", "no"):
            return False
    raise SchemaError(f"column {name}: expected boolean, got {value!r}", row)


def _parse_count(value: Any, name: str, row: int) -> int:
    if isinstance(value, bool):
        raise SchemaError(f"column {name}: expected count, got {value!r}", row)
    if isinstance(value, int):
        out = value
    else:
        try:
            out = int(str(value).strip())
        except ValueError:
            raise SchemaError(f"column {name}: expected count, got {value!r}", row) from None
    if out < 0:
        raise SchemaError(f"negative metric {name}={out}", row)
    return out


def _parse_real(value: Any, name: str, row: int, optional: bool = False) -> float | None:
    if value is None or (isinstance(value, str) and value.strip() == ""):
        if optional:
            return None
        raise SchemaError(f"column {name}: missing value", row)
    if isinstance(value, bool):
        raise SchemaError(f"column {name}: expected number, got {value!r}", row)
    try:
        out = float(value)
    except (TypeError, ValueError):
        raise SchemaError(f"column {name}: expected number, got {value!r}", row) from None
    if not math.isfinite(out):
        raise SchemaError(f"column {name}: non-finite value", row)
    if not optional and out < 0:
        raise SchemaError(f"negative metric {name}={out}", row)
    return out


def _listing_from_row(raw: Mapping[str, Any], row: int) -> ListingRecord:
    missing = [c for c in _REQUIRED_LISTING_COLUMNS if c not in raw]
    if missing:
        raise SchemaError(f"missing column(s) {', '.join(missing)}", row)
    try:
        tenure = TenureClass(str(raw["tenure_class"]).strip())
    except ValueError:
        raise SchemaError(f"column tenure_class: unknown value {raw['tenure_class']!r}", row) from None
    try:
        return ListingRecord(
            listing_id=str(raw["listing_id"]).strip(),
            market_id=str(raw["market_id"]).strip(),
            eligible=_parse_bool(raw["eligible"], "eligible", row),
            tenure_class=tenure,
            pre_bookings=_parse_count(raw["pre_bookings"], "pre_bookings", row),
            pre_nights=_parse_count(raw["pre_nights"], "pre_nights", row),
            pre_booking_value=_parse_real(raw["pre_booking_value"], "pre_booking_value", row),
            pre_gross_spend=_parse_real(raw["pre_gross_spend"], "pre_gross_spend", row),
            smart_pricing_on=_parse_bool(raw["smart_pricing_on"], "smart_pricing_on", row),
            supply_elasticity_index=_parse_real(
                raw.get("supply_elasticity_index"), "supply_elasticity_index", row, optional=True
            ),
            demand_elasticity_index=_parse_real(
                raw.get("demand_elasticity_index"), "demand_elasticity_index", row, optional=True
            ),
        )
    except SchemaError as exc:
        if exc.row is None:
            raise SchemaError(str(exc), row) from None
        raise


def _iter_jsonl(path: str | os.PathLike) -> Iterable[tuple[int, Any]]:
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                yield lineno, json.loads(line)
            except json.JSONDecodeError as exc:
                raise SchemaError(f"invalid JSON: {exc.msg}", lineno) from None


# ---------------------------------------------------------------- listings

def load_listings(path: str | os.PathLike, format: str = "csv") -> list[ListingRecord]:
    """Read and validate listing records from CSV (with header) or JSONL."""
    if format == "csv":
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames is None:
                raise SchemaError("empty file (no header)")
            rows = list(enumerate(reader, start=1))
    elif format == "jsonl":
        rows = []
        for lineno, obj in _iter_jsonl(path):
            if not isinstance(obj, dict):
                raise SchemaError("expected a JSON object", lineno)
            rows.append((lineno, obj))
    else:
        raise SchemaError(f"unknown listings format {format!r}")

    records = []
    seen: set[str] = set()
    for row, raw in rows:
        rec = _listing_from_row(raw, row)
        if rec.listing_id in seen:
            raise SchemaError(f"duplicate listing_id {rec.listing_id!r}", row)
        seen.add(rec.listing_id)
        records.append(rec)
    return records


def _listing_to_row(rec: ListingRecord) -> dict[str, Any]:
    row = {name: getattr(rec, name) for name in LISTING_COLUMNS}
    row["tenure_class"] = rec.tenure_class.value
    return row


def _csv_cell(value: Any) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def save_listings(records: Iterable[ListingRecord], path: str | os.PathLike, format: str = "csv") -> None:
    records = list(records)
    if format == "csv":
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(LISTING_COLUMNS)
            for rec in records:
                row = _listing_to_row(rec)
                writer.writerow(_csv_cell(row[c]) for c in LISTING_COLUMNS)
    elif format == "jsonl":
        with open(path, "w", encoding="utf-8") as fh:
            for rec in records:
                fh.write(json.dumps(_listing_to_row(rec)) + "\n")
    else:
        raise SchemaError(f"unknown listings format {format!r}")


# ---------------------------------------------------------------- sessions

def load_sessions(path: str | os.PathLike) -> list[SearchSession]:
    """One JSON object per line: ``user_id``, ``listings_viewed``, ``booked``."""
    sessions = []
    for lineno, obj in _iter_jsonl(path):
        if not isinstance(obj, dict):
            raise SchemaError("expected a JSON object", lineno)
        for key in ("user_id", "listings_viewed"):
            if key not in obj:
                raise SchemaError(f"missing field {key}", lineno)
        viewed = obj["listings_viewed"]
        if not isinstance(viewed, list):
            raise SchemaError("listings_viewed must be a list", lineno)
        if not viewed:
            raise SchemaError("empty session (no listings viewed)", lineno)
        sessions.append(
            SearchSession(
                user_id=str(obj["user_id"]),
                listings_viewed=tuple(str(v) for v in viewed),
                booked=_parse_bool(obj.get("booked", False), "booked", lineno),
            )
        )
    return sessions


def save_sessions(sessions: Iterable[SearchSession], path: str | os.PathLike) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for s in sessions:
            fh.write(json.dumps(
                {"user_id": s.user_id, "listings_viewed": list(s.listings_viewed), "booked": s.booked}
            ) + "\n")


# ---------------------------------------------------------------- outcomes

def validate_outcomes(outcomes: Mapping[str, Outcome], listings: Iterable[ListingRecord]) -> None:
    eligible = {r.listing_id for r in listings if r.eligible}
    keys = set(outcomes)
    if keys != eligible:
        extra, missing = sorted(keys - eligible), sorted(eligible - keys)
        raise SchemaError(
            f"outcome panel does not match eligible listings "
            f"(missing {missing[:5]}, unexpected {extra[:5]})"
        )


def load_outcomes(path: str | os.PathLike) -> dict[str, Outcome]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise SchemaError("empty file (no header)")
        missing = [c for c in OUTCOME_COLUMNS if c not in reader.fieldnames]
        if missing:
            raise SchemaError(f"missing column(s) {', '.join(missing)}")
        panel: dict[str, Outcome] = {}
        for row, raw in enumerate(reader, start=1):
            lid = raw["listing_id"].strip()
            if lid in panel:
                raise SchemaError(f"duplicate listing_id {lid!r}", row)
            panel[lid] = Outcome(
                bookings=_parse_count(raw["bookings"], "bookings", row),
                nights=_parse_count(raw["nights"], "nights", row),
                gross_spend=_parse_real(raw["gross_spend"], "gross_spend", row),
            )
    return panel


def save_outcomes(outcomes: Mapping[str, Outcome], path: str | os.PathLike) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(OUTCOME_COLUMNS)
        for lid in sorted(outcomes):
            o = outcomes[lid]
            writer.writerow([lid, o.bookings, o.nights, repr(float(o.gross_spend))])


# ---------------------------------------------------------------- assignments

def save_assignment(assignment: DesignAssignment, path: str | os.PathLike) -> None:
    """Header line with seed and metadata, then one line per listing."""
    header = {
        "schema_version": ASSIGNMENT_SCHEMA_VERSION,
        "kind": "design_assignment",
        "seed": assignment.seed,
        "metadata": dict(assignment.metadata),
        "excluded": {c: list(ids) for c, ids in sorted(assignment.excluded.items())},
    }
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for lid in sorted(assignment.units):
            u = assignment.units[lid]
            fh.write(json.dumps({
                "listing_id": lid,
                "cluster_id": u.cluster_id,
                "stratum_id": u.stratum_id,
                "meta_arm": u.meta_arm.value,
                "treatment": u.treatment,
            }) + "\n")


def load_assignment(path: str | os.PathLike) -> DesignAssignment:
    lines = list(_iter_jsonl(path))
    if not lines:
        raise SchemaError("empty assignment file")
    lineno, header = lines[0]
    if not isinstance(header, dict) or header.get("kind") != "design_assignment":
        raise SchemaError("missing design_assignment header", lineno)
    if header.get("schema_version") != ASSIGNMENT_SCHEMA_VERSION:
        raise SchemaError(f"unsupported schema_version {header.get('schema_version')!r}", lineno)
    if not isinstance(header.get("seed"), int):
        raise SchemaError("header seed must be an integer", lineno)

    units: dict[str, Unit] = {}
    for lineno, obj in lines[1:]:
        if not isinstance(obj, dict):
            raise SchemaError("expected a JSON object", lineno)
        for key in ("listing_id", "cluster_id", "stratum_id", "meta_arm", "treatment"):
            if obj.get(key) is None:
                raise SchemaError(f"missing field {key}", lineno)
        lid = str(obj["listing_id"])
        if lid in units:
            raise SchemaError(f"duplicate listing_id {lid!r}", lineno)
        try:
            arm = MetaArm(obj["meta_arm"])
        except ValueError:
            raise SchemaError(f"unknown meta_arm {obj['meta_arm']!r}", lineno) from None
        units[lid] = Unit(
            cluster_id=str(obj["cluster_id"]),
            stratum_id=str(obj["stratum_id"]),
            meta_arm=arm,
            treatment=_parse_bool(obj["treatment"], "treatment", lineno),
        )
    return DesignAssignment(
        units=units,
        seed=header["seed"],
        metadata=header.get("metadata", {}),
        excluded={c: tuple(ids) for c, ids in header.get("excluded", {}).items()},
    )
