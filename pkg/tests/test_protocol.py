from collections import defaultdict

import pytest

from unisuf.entities import VEHICLE_ROLES
from unisuf.materials import Kind
from unisuf.scenarios import bundled, run_scenario
from unisuf.protocol import PREPARATION, SPECS, SUB_PROBLEMS, VEHICLE, World, WorldConfig, chain
from unisuf.verifier import Artifacts, all_pass, verify


def labels_by_segment(world):
    out = defaultdict(list)
    for r in world.trace.records:
        if r["record"] == "event":
            out[(r["round"], r["label"].split(".")[0])].append(r["label"])
    return out


class TestSpecs:
    def test_fourteen_sub_problems(self):
        assert len(SUB_PROBLEMS) == 14 and set(SPECS) == set(SUB_PROBLEMS)
        assert PREPARATION == ("SSF", "USF") and VEHICLE[-1] == "STU"

    def test_chain(self):
        assert chain(3) == frozenset({(1, 2), (2, 3)})

    def test_order_is_acyclic_and_on_labels(self):
        for spec in SPECS.values():
            labels = set(spec.labels)
            pairs = spec.order_labels()
            assert all(a in labels and b in labels for a, b in pairs)
            # topological sort must consume every label
            remaining, edges = set(labels), set(pairs)
            while remaining:
                free = {x for x in remaining if not any(b == x and a in remaining for a, b in edges)}
                assert free, f"cycle in {spec.code}"
                remaining -= free

    def test_spec_json(self):
        js = SPECS["STU"].to_json()
        assert js["code"] == "STU" and len(js["labels"]) == SPECS["STU"].n_labels


class TestHonestWorld:
    def test_every_segment_completes(self, honest):
        assert [r.completed for r in honest.world.rounds] == [True] * 4
        for r in honest.world.rounds:
            assert set(r.statuses.values()) == {"completed"}

    def test_exact_label_sets(self, honest):
        segs = labels_by_segment(honest.world)
        assert len(segs) == 2 * len(SUB_PROBLEMS)
        for (_, sp), got in segs.items():
            assert sorted(got) == sorted(SPECS[sp].labels), sp

    def test_order_holds(self, honest):
        segs = labels_by_segment(honest.world)
        for (_, sp), got in segs.items():
            pos = {lbl: i for i, lbl in enumerate(got)}
            for a, b in SPECS[sp].order_labels():
                assert pos[a] < pos[b], (sp, a, b)

    def test_software_installed_in_order(self, honest):
        ecu = [r for r in honest.world.trace.records if r["record"] == "ecu"]
        assert [(r["action"], r["result"]) for r in ecu] == [("unlock", "Unlocked"), ("install", "Installed")] * 2
        assert [r["installed_version"] for r in ecu if r["action"] == "install"] == [2, 3]
        assert honest.world.installed_versions() == {"VIN0001": 3}

    def test_no_duplicates_or_leaks(self, honest):
        c = honest.world.counters()
        assert c["duplicates"] == 0 and c["ignored"] == 0
        assert c["task_deliveries"] == c["delivered"]
        assert honest.world.csa_key_leaks() == []

    def test_every_participant_halts_timely(self, honest):
        halts = [r for r in honest.world.trace.records if r["record"] == "halt"]
        assert halts and all(h["mode"] == "timely" for h in halts)

    def test_software_disclosed_on_link(self, honest):
        sw = [s for s in honest.world.secrets.values() if s["kind"] == Kind.SOFTWARE.value]
        assert sw and all(s["disclosed"] is not None for s in sw)
        keys = [s for s in honest.world.secrets.values() if s["kind"] != Kind.SOFTWARE.value and "Software" not in s["kind"]]
        assert all(s["disclosed"] is None for s in keys)

    def test_software_registered_by_supplier(self, honest):
        origins = {r.origin for r in honest.world.registry.values() if r.kind is Kind.SOFTWARE}
        assert origins == {"Supplier"}

    def test_snapshot_per_segment_plus_final(self, honest):
        snaps = honest.world.snapshots
        assert len(snaps) == 2 * len(SUB_PROBLEMS) + 1 and snaps[-1]["sub_problem"] == "final"

    def test_vehicle_entities_named_by_vin(self, honest):
        names = set(honest.world.entities)
        assert {f"{r}@VIN0001" for r in VEHICLE_ROLES} <= names


@pytest.mark.parametrize("backend", ["real", "mock"])
def test_backends_pass_everything(backend):
    world = World(WorldConfig(backend=backend, seed=21))
    world.run_e2e()
    assert all_pass(verify(Artifacts.from_world(world)))


def test_two_vehicles_each_get_a_round():
    world = World(WorldConfig(backend="mock", seed=4, vehicles={"VA": 1, "VB": 0}, releases=(5,)))
    world.run_stages(["preparation", "vehicle"])
    assert world.installed_versions() == {"VA": 5, "VB": 5}
    assert sorted(r.round.vin for r in world.rounds if r.round.vin) == ["VA", "VB"]
    assert all_pass(verify(Artifacts.from_world(world)))


def test_up_to_date_vehicle_gets_empty_list():
    world = World(WorldConfig(backend="mock", seed=4, vehicles={"VA": 9}, releases=(5,)))
    world.run_stages(["preparation", "vehicle"])
    assert world.installed_versions() == {"VA": 9}


def test_tight_ttl_expires_and_halts_late():
    world = World(WorldConfig(backend="mock", seed=2, round_ttl=150, releases=(2,)))
    outcomes = world.run_stages(["preparation", "vehicle"])
    assert not outcomes[-1].completed
    statuses = set(outcomes[-1].statuses.values())
    assert "expired" in statuses
    rid = outcomes[-1].round
    expire = [r for r in world.trace.records if r["record"] == "expire" and r["round"] == rid.key]
    assert expire and expire[0]["time"] == rid.expiry
    events = [r for r in world.trace.records if r["record"] == "event" and r["round"] == rid.key]
    assert max(e["time"] for e in events) < rid.expiry
    halts = [h for h in world.trace.records if h["record"] == "halt" and h["round"] == rid.key]
    assert any(h["mode"] != "timely" for h in halts)
    assert all(h["time"] <= rid.expiry for h in halts)


def test_delayed_delivery_past_expiry_fires_timer_first():
    cfg = bundled("delay-step17")
    cfg.round_ttl = 426  # expiry lands while step-17 messages are held back
    world = run_scenario(cfg).world
    rid = world.rounds[1].round
    assert not world.rounds[1].completed
    halts = [h for h in world.trace.records if h["record"] == "halt" and h["round"] == rid.key]
    assert halts and {h["time"] for h in halts} <= {rid.expiry}


@pytest.mark.parametrize(
    "kwargs", [{"vehicles": {}}, {"releases": ()}, {"round_ttl": 0}, {"eta": 0}, {"backend": "rot13"}]
)
def test_world_config_validation(kwargs):
    with pytest.raises(ValueError):
        World(WorldConfig(**kwargs))


def test_same_seed_same_trace():
    a = World(WorldConfig(backend="mock", seed=5))
    b = World(WorldConfig(backend="mock", seed=5))
    a.run_e2e()
    b.run_e2e()
    assert a.trace.records == b.trace.records
    c = World(WorldConfig(backend="mock", seed=6))
    c.run_e2e()
    assert c.trace.records != a.trace.records
