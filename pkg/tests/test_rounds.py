import random

import pytest
from hypothesis import given
from hypothesis import strategies as st

from unisuf.materials import Kind
from unisuf.rounds import (
    Acceptance,
    DedupLog,
    Liveness,
    LogicalClock,
    MissingStartingMaterial,
    RoundContext,
    RoundExpired,
    Trace,
    UpdateRoundId,
    check_expiry,
    emit_event,
    new_round,
    pass_context,
)


class TestRoundId:
    def test_new_round_sets_expiry(self):
        rid = new_round("VIN1", 10, 50, random.Random(0))
        assert rid.expiry == 60 and rid.vin == "VIN1" and not rid.is_preparation

    def test_preparation_round_has_no_vin(self):
        assert new_round(None, 0, 5, random.Random(0)).is_preparation

    def test_rejects_non_positive_ttl(self):
        with pytest.raises(ValueError):
            new_round("V", 0, 0, random.Random(0))

    def test_same_instant_rounds_differ(self):
        rng = random.Random(3)
        assert new_round("V", 0, 10, rng) != new_round("V", 0, 10, rng)

    @given(st.one_of(st.none(), st.text(alphabet="ABC0123", min_size=1, max_size=8)), st.integers(0, 10**6), st.integers(0, 2**64 - 1))
    def test_key_and_tag_round_trip(self, vin, expiry, nonce):
        rid = UpdateRoundId(vin, expiry, nonce)
        assert UpdateRoundId.from_key(rid.key) == rid
        assert UpdateRoundId.from_tag(rid.tag()) == rid


class TestExpiry:
    def test_boundary_is_closed(self):
        rid = UpdateRoundId("V", 100, 0)
        assert check_expiry(rid, 99) is Liveness.LIVE
        assert check_expiry(rid, 100) is Liveness.EXPIRED
        assert check_expiry(rid, 101) is Liveness.EXPIRED

    def test_emit_refuses_at_expiry(self):
        rid = UpdateRoundId("V", 3, 0)
        trace, clock = Trace(), LogicalClock(1)
        ctx = RoundContext(rid, "ECU@V")
        emit_event(trace, clock, ctx, "STU.l1", [])
        assert clock.now == 2
        with pytest.raises(RoundExpired):
            emit_event(trace, clock, ctx, "STU.l2", [])
        assert len(trace.events()) == 1


class TestDedup:
    def test_second_copy_is_duplicate(self):
        log, rid = DedupLog(), UpdateRoundId("V", 9, 1)
        assert log.accept(rid, b"m") is Acceptance.FRESH
        assert log.accept(rid, b"m") is Acceptance.DUPLICATE
        assert len(log) == 1

    def test_same_payload_other_round_is_fresh(self):
        log = DedupLog()
        log.accept(UpdateRoundId("V", 9, 1), b"m")
        assert log.accept(UpdateRoundId("V", 9, 2), b"m") is Acceptance.FRESH

    @given(st.lists(st.binary(max_size=4), max_size=30))
    def test_fresh_count_equals_distinct(self, payloads):
        log, rid = DedupLog(), UpdateRoundId("V", 1, 1)
        fresh = sum(log.accept(rid, p) is Acceptance.FRESH for p in payloads)
        assert fresh == len(set(payloads))


class TestContext:
    def test_missing_material_names_kind(self):
        ctx = RoundContext(UpdateRoundId("V", 1, 1), "CIA@V")
        with pytest.raises(MissingStartingMaterial) as exc:
            ctx.get(Kind.SKA)
        assert exc.value.kind is Kind.SKA and "CIA@V" in str(exc.value)

    def test_pass_context_projects(self):
        ctx = RoundContext(UpdateRoundId("V", 1, 1), "CIA@V")
        ctx.put(Kind.SKA, "ska")
        ctx.put(Kind.VIN_DATA, "vin")
        out = pass_context(ctx, [Kind.SKA])
        assert out.materials == {Kind.SKA: "ska"} and out.round == ctx.round

    def test_pass_context_requires_all(self):
        ctx = RoundContext(UpdateRoundId("V", 1, 1), "CIA@V")
        with pytest.raises(MissingStartingMaterial):
            pass_context(ctx, [Kind.SKA])


class TestClockAndTrace:
    def test_clock_never_goes_back(self):
        c = LogicalClock()
        c.advance_to(5)
        c.advance_to(3)
        assert c.now == 5 and c.tick() == 6

    def test_event_record_shape(self):
        rid = UpdateRoundId("V", 50, 1)
        trace = Trace()
        emit_event(trace, LogicalClock(), RoundContext(rid, "CDA@V"), "DSF.l2", [(Kind.SKA, b"x")])
        (rec,) = trace.records
        assert rec["record"] == "event" and rec["round"] == rid.key and rec["label"] == "DSF.l2"
        assert rec["digests"][0][0] == Kind.SKA.value and len(rec["digests"][0][1]) == 64
