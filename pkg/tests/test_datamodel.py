import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from metaexp.datamodel import (
    DesignAssignment,
    ListingRecord,
    MetaArm,
    Outcome,
    SearchSession,
    Unit,
    load_assignment,
    load_listings,
    load_outcomes,
    load_sessions,
    save_assignment,
    save_listings,
    save_outcomes,
    save_sessions,
    validate_outcomes,
)
from metaexp.errors import SchemaError
from metaexp.seeding import derive_seed, make_rng

HEADER = ("listing_id,market_id,eligible,tenure_class,pre_bookings,pre_nights,"
          "pre_booking_value,pre_gross_spend,smart_pricing_on\n")


def test_three_row_csv(tmp_path):
    p = tmp_path / "l.csv"
    p.write_text(HEADER
                 + "a,M1,true,long_tenured,1,2,100.0,120.0,false\n"
                 + "b,M1,false,less_tenured,0,0,0,0,true\n"
                 + 'c,"M,2",true,long_tenured,3,5,250.5,300,false\n')
    recs = load_listings(p)
    assert [r.listing_id for r in recs] == ["a", "b", "c"]
    assert recs[2].market_id == "M,2"
    assert recs[1].eligible is False and recs[1].smart_pricing_on is True
    assert recs[0].supply_elasticity_index is None


def test_duplicate_id_names_row(tmp_path):
    p = tmp_path / "l.csv"
    p.write_text(HEADER + "a,M,true,long_tenured,1,1,1,1,false\n" + "a,M,true,long_tenured,1,1,1,1,false\n")
    with pytest.raises(SchemaError, match="row 2"):
        load_listings(p)


def test_negative_metric_jsonl(tmp_path):
    p = tmp_path / "l.jsonl"
    row = dict(listing_id="a", market_id="M", eligible=True, tenure_class="long_tenured",
               pre_bookings=-1, pre_nights=0, pre_booking_value=0, pre_gross_spend=0,
               smart_pricing_on=False)
    p.write_text(json.dumps(row) + "\n")
    with pytest.raises(SchemaError, match="negative metric"):
        load_listings(p, "jsonl")


def test_missing_column_and_missing_file(tmp_path):
    p = tmp_path / "l.csv"
    p.write_text("listing_id,market_id\na,M\n")
    with pytest.raises(SchemaError, match="missing column"):
        load_listings(p)
    with pytest.raises(OSError):
        load_listings(tmp_path / "absent.csv")


def test_record_rejects_non_finite():
    with pytest.raises(SchemaError):
        ListingRecord("a", "M", pre_booking_value=float("nan"))


def test_sessions_order_and_flags(tmp_path):
    p = tmp_path / "s.jsonl"
    p.write_text('{"user_id": "u1", "listings_viewed": ["c", "a", "b"], "booked": true}\n'
                 '{"user_id": "u2", "listings_viewed": ["a"], "booked": false}\n')
    s = load_sessions(p)
    assert s[0].listings_viewed == ("c", "a", "b")
    assert [x.booked for x in s] == [True, False]


def test_empty_session_rejected(tmp_path):
    p = tmp_path / "s.jsonl"
    p.write_text('{"user_id": "u1", "listings_viewed": []}\n')
    with pytest.raises(SchemaError):
        load_sessions(p)


def _assignment():
    units = {
        "a": Unit("C1", "S0", MetaArm.BERNOULLI, True),
        "b": Unit("C1", "S0", MetaArm.BERNOULLI, False),
        "c": Unit("C2", "S0", MetaArm.CLUSTER_RANDOMIZED, True),
        "d": Unit("C2", "S0", MetaArm.CLUSTER_RANDOMIZED, True),
    }
    return DesignAssignment(units, 42, {"note": "x"}, {"C9": ("z",)})


def test_assignment_round_trip(tmp_path):
    a = _assignment()
    save_assignment(a, tmp_path / "a.jsonl")
    b = load_assignment(tmp_path / "a.jsonl")
    assert a == b and b.seed == 42 and b.metadata["note"] == "x"
    assert b.treatment_of("z") is False


def test_tampered_assignment_missing_stratum(tmp_path):
    save_assignment(_assignment(), tmp_path / "a.jsonl")
    lines = (tmp_path / "a.jsonl").read_text().splitlines()
    row = json.loads(lines[1])
    del row["stratum_id"]
    lines[1] = json.dumps(row)
    (tmp_path / "a.jsonl").write_text("\n".join(lines) + "\n")
    with pytest.raises(SchemaError, match="stratum_id"):
        load_assignment(tmp_path / "a.jsonl")


def test_tampered_assignment_mixed_cluster_treatment(tmp_path):
    save_assignment(_assignment(), tmp_path / "a.jsonl")
    text = (tmp_path / "a.jsonl").read_text()
    lines = text.splitlines()
    row = json.loads(lines[4])
    assert row["listing_id"] == "d"
    row["treatment"] = False
    lines[4] = json.dumps(row)
    (tmp_path / "a.jsonl").write_text("\n".join(lines) + "\n")
    with pytest.raises(SchemaError, match="mixed treatments"):
        load_assignment(tmp_path / "a.jsonl")


def test_assignment_invariants_in_constructor():
    with pytest.raises(SchemaError):
        DesignAssignment({
            "a": Unit("C1", "S0", MetaArm.BERNOULLI, True),
            "b": Unit("C1", "S0", MetaArm.CLUSTER_RANDOMIZED, True),
        }, 0)


def test_outcomes_round_trip_and_key_set(tmp_path):
    panel = {"a": Outcome(1, 3, 120.5), "b": Outcome(0, 0, 0.0)}
    save_outcomes(panel, tmp_path / "o.csv")
    assert load_outcomes(tmp_path / "o.csv") == panel
    listings = [ListingRecord("a", "M"), ListingRecord("b", "M"), ListingRecord("c", "M", eligible=False)]
    validate_outcomes(panel, listings)
    with pytest.raises(SchemaError):
        validate_outcomes({"a": panel["a"]}, listings)


ids = st.text(alphabet="abcdefgh0123456789_-", min_size=1, max_size=8)
reals = st.floats(min_value=0, max_value=1e9, allow_nan=False, allow_infinity=False)
records = st.builds(
    ListingRecord,
    listing_id=ids, market_id=ids, eligible=st.booleans(),
    tenure_class=st.sampled_from(["long_tenured", "less_tenured"]),
    pre_bookings=st.integers(0, 10**6), pre_nights=st.integers(0, 10**6),
    pre_booking_value=reals, pre_gross_spend=reals, smart_pricing_on=st.booleans(),
    supply_elasticity_index=st.none() | st.floats(-1e6, 1e6),
    demand_elasticity_index=st.none() | st.floats(-1e6, 1e6),
)


@settings(max_examples=50, deadline=None)
@given(st.lists(records, max_size=6, unique_by=lambda r: r.listing_id), st.sampled_from(["csv", "jsonl"]))
def test_listing_round_trip(tmp_path_factory, recs, fmt):
    p = tmp_path_factory.mktemp("rt") / f"l.{fmt}"
    save_listings(recs, p, fmt)
    assert load_listings(p, fmt) == recs


@settings(max_examples=50, deadline=None)
@given(st.lists(st.builds(SearchSession, user_id=ids,
                          listings_viewed=st.lists(ids, min_size=1, max_size=5).map(tuple),
                          booked=st.booleans()), max_size=5))
def test_session_round_trip(tmp_path_factory, sessions):
    p = tmp_path_factory.mktemp("rt") / "s.jsonl"
    save_sessions(sessions, p)
    assert load_sessions(p) == sessions


def test_seed_derivation_is_labelled_and_stable():
    assert derive_seed(1, "a") == derive_seed(1, "a")
    assert derive_seed(1, "a") != derive_seed(1, "b")
    assert derive_seed(1, "a") != derive_seed(2, "a")
    assert derive_seed(1, "a", 1) != derive_seed(1, "a1")
    assert make_rng(5, "x").random() == make_rng(5, "x").random()
