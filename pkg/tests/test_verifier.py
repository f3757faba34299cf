import json

import pytest

from unisuf.protocol import SPECS, SUB_PROBLEMS, write_artifacts
from unisuf.verifier import REQUIREMENTS, Artifacts, MalformedTrace, all_pass, verdict_records, verify

from conftest import clone, splice_event, vehicle_rounds


def verdict(art, req, sp):
    (v,) = [v for v in verify(art, (sp,)) if v.requirement == req]
    return v


def events(art, label=None, round_key=None):
    return [
        (i, r)
        for i, r in enumerate(art.trace)
        if r["record"] == "event" and (label is None or r["label"] == label) and (round_key is None or r["round"] == round_key)
    ]


class TestHonestReport:
    def test_all_pass(self, honest_artifacts):
        vs = verify(honest_artifacts)
        assert len(vs) == len(SUB_PROBLEMS) * len(REQUIREMENTS) == 84
        assert all_pass(vs)

    def test_record_shape(self, honest_artifacts):
        rec = verdict_records(verify(honest_artifacts))[0]
        assert set(rec) == {"requirement", "name", "sub_problem", "status", "detail", "witness"}
        assert rec["status"] == "Pass"

    def test_pure(self, honest_artifacts):
        before = json.dumps(honest_artifacts.trace)
        assert verdict_records(verify(honest_artifacts)) == verdict_records(verify(honest_artifacts))
        assert json.dumps(honest_artifacts.trace) == before

    def test_timely_detail(self, honest_artifacts):
        assert verdict(honest_artifacts, "R6", "STU").detail.startswith("timely:")


class TestR1Confidentiality:
    def test_leaked_secret(self, honest_artifacts):
        art = clone(honest_artifacts)
        secret = next(s for s in art.secrets if s["kind"] == "SecurityAccess_Key")
        rnd = vehicle_rounds(art)[0]
        snap = next(s for s in art.knowledge["snapshots"] if s["sub_problem"] == "STU" and s["round"] == rnd)
        snap["digests"].append(secret["digest"])
        v = verdict(art, "R1", "STU")
        assert not v.passed and v.witness["secret"] == secret["digest"] and v.witness["round"] == rnd

    def test_leaf_derivation_counts(self, honest_artifacts):
        art = clone(honest_artifacts)
        secret = next(s for s in art.secrets if s["kind"] == "Software_Key")
        art.knowledge["snapshots"][-1]["digests"].extend(secret["leaves"])
        assert not verdict(art, "R1", "STU").passed

    def test_disclosed_secret_exempt(self, honest_artifacts):
        art = clone(honest_artifacts)
        sw = next(s for s in art.secrets if s["kind"] == "Software")
        assert sw["disclosed"] is not None
        for snap in art.knowledge["snapshots"]:
            if snap["time"] >= sw["disclosed"]:
                snap["digests"].append(sw["digest"])
        assert verdict(art, "R1", "SSF").passed

    def test_missing_snapshot(self, honest_artifacts):
        art = clone(honest_artifacts)
        art.knowledge["snapshots"] = [s for s in art.knowledge["snapshots"] if s["sub_problem"] != "OI"]
        assert not verdict(art, "R1", "OI").passed


class TestR2Authenticity:
    def test_adversary_origin(self, honest_artifacts):
        art = clone(honest_artifacts)
        _, ev = events(art, "STU.l9")[0]
        sw_digest = next(d for k, d in ev["digests"] if k == "Software")
        for m in art.materials:
            if m["digest"] == sw_digest:
                m["origin"] = "Adversary"
        v = verdict(art, "R2", "STU")
        assert not v.passed and v.witness["digest"] == sw_digest

    def test_unregistered_digest(self, honest_artifacts):
        art = clone(honest_artifacts)
        _, ev = events(art, "STU.l1")[0]
        ev["digests"].append(["Software", "ab" * 32])
        assert "unregistered" in verdict(art, "R2", "STU").detail

    def test_material_changes_within_round(self, honest_artifacts):
        art = clone(honest_artifacts)
        r1, r2 = vehicle_rounds(art)
        sw1 = next(d for _, e in events(art, round_key=r1) for k, d in e["digests"] if k == "Software")
        sw2 = next(d for _, e in events(art, round_key=r2) for k, d in e["digests"] if k == "Software")
        _, last = events(art, "STU.l9", r1)[0]
        last["digests"] = [[k, sw2 if d == sw1 else d] for k, d in last["digests"]]
        v = verdict(art, "R2", "STU")
        assert not v.passed and "changed within the round" in v.detail


class TestR3Freshness:
    def test_cross_round_splice(self, honest_artifacts):
        r1, r2 = vehicle_rounds(honest_artifacts)
        _, ev = events(honest_artifacts, "DII.l3", r1)[0]
        art = splice_event(honest_artifacts, ev, r2)
        v = verdict(art, "R3", "DII")
        assert not v.passed
        assert v.witness["label"] == "DII.l3" and v.witness["round"] == r2 and v.witness["earlier_round"] == r1

    def test_other_vehicle_may_share_release(self, honest_artifacts):
        r1, _ = vehicle_rounds(honest_artifacts)
        _, ev = events(honest_artifacts, "DSF.l4", r1)[0]
        art = clone(honest_artifacts)
        other = dict(ev, round="VIN9999/5000/0000000000000001", round_vin="VIN9999")
        art.trace.append(other)
        assert verdict(art, "R3", "DSF").passed


class TestR4Uniqueness:
    def test_duplicate_splice(self, honest_artifacts):
        art = clone(honest_artifacts)
        i, ev = events(art, "CSL.l3")[0]
        art.trace.insert(i + 1, dict(ev))
        v = verdict(art, "R4", "CSL")
        assert not v.passed and v.witness["label"] == "CSL.l3"


class TestR5Ordering:
    def test_swapped_order(self, honest_artifacts):
        art = clone(honest_artifacts)
        a, b = SPECS["NOR"].order_labels()[0]
        rnd = vehicle_rounds(art)[0]
        (ia, ea), (ib, eb) = events(art, a, rnd)[0], events(art, b, rnd)[0]
        art.trace[ia], art.trace[ib] = eb, ea
        v = verdict(art, "R5", "NOR")
        assert not v.passed and v.witness["label"] == b and v.witness["needs"] == a

    def test_deleted_label(self, honest_artifacts):
        art = clone(honest_artifacts)
        last = SPECS["GIM"].labels[-1]
        i, _ = events(art, last)[0]
        del art.trace[i]
        v = verdict(art, "R5", "GIM")
        assert not v.passed and last in v.witness["missing"]

    def test_unknown_label(self, honest_artifacts):
        art = clone(honest_artifacts)
        _, ev = events(art, "OI.l1")[0]
        ev["label"] = "OI.l99"
        assert "unknown label" in verdict(art, "R5", "OI").detail

    def test_no_completed_segment(self, honest_artifacts):
        art = clone(honest_artifacts)
        for r in art.trace:
            if r["record"] == "segment" and r["sub_problem"] == "PTI":
                r["status"] = "failed"
        assert not verdict(art, "R5", "PTI").passed


class TestR6Termination:
    def test_event_after_expiry(self, honest_artifacts):
        art = clone(honest_artifacts)
        _, ev = events(art, "STU.l9")[0]
        ev["time"] = ev["round_expiry"]
        assert "after expiry" in verdict(art, "R6", "STU").detail

    def test_missing_halt(self, honest_artifacts):
        art = clone(honest_artifacts)
        _, ev = events(art, "STU.l9")[0]
        art.trace = [r for r in art.trace if not (r["record"] == "halt" and r["entity"] == ev["entity"] and r["round"] == ev["round"])]
        assert "never halts" in verdict(art, "R6", "STU").detail

    def test_act_after_halt(self, honest_artifacts):
        art = clone(honest_artifacts)
        _, ev = events(art, "STU.l9")[0]
        for r in art.trace:
            if r["record"] == "halt" and r["entity"] == ev["entity"] and r["round"] == ev["round"]:
                r["time"] = ev["time"] - 1
        assert "after halting" in verdict(art, "R6", "STU").detail

    def test_late_halt_is_late_pass(self, honest_artifacts):
        art = clone(honest_artifacts)
        rnd = vehicle_rounds(art)[0]
        for r in art.trace:
            if r["record"] == "halt" and r["round"] == rnd:
                r["mode"], r["time"] = "late", int(rnd.split("/")[1])
        v = verdict(art, "R6", "STU")
        assert v.passed and v.detail.startswith("late:")

    def test_unexercised_is_vacuous(self, honest_artifacts):
        art = clone(honest_artifacts)
        art.trace = [r for r in art.trace if not (r["record"] == "segment" and r["sub_problem"] == "SIE")]
        v = verdict(art, "R6", "SIE")
        assert v.passed and "vacuous" in v.detail


class TestLoading:
    def test_file_round_trip(self, honest, tmp_path):
        write_artifacts(honest.world, tmp_path, verdict_records(honest.verdicts))
        art = Artifacts.load(tmp_path / "trace.jsonl")
        assert verdict_records(verify(art)) == verdict_records(honest.verdicts)

    def test_missing_sibling(self, honest, tmp_path):
        write_artifacts(honest.world, tmp_path, [])
        (tmp_path / "secrets.jsonl").unlink()
        with pytest.raises(MalformedTrace):
            Artifacts.load(tmp_path / "trace.jsonl")

    def test_bad_json(self, honest, tmp_path):
        write_artifacts(honest.world, tmp_path, [])
        (tmp_path / "trace.jsonl").write_text("{not json\n")
        with pytest.raises(MalformedTrace):
            Artifacts.load(tmp_path / "trace.jsonl")

    @pytest.mark.parametrize("record", [[1, 2], {"no_record": 1}, {"record": "event", "time": 1}])
    def test_bad_shape(self, honest, tmp_path, record):
        write_artifacts(honest.world, tmp_path, [])
        (tmp_path / "trace.jsonl").write_text(json.dumps(record) + "\n")
        with pytest.raises(MalformedTrace):
            Artifacts.load(tmp_path / "trace.jsonl")
