"""Exhaustive enumeration of short attack scripts against the insecure link.

The world is run up to the last segment that uses the CIA-ECU link (stream
update, in the second update round, so earlier rounds supply replayable
terms) and pickled.  Every script of up to ``max_actions`` actions on distinct
link messages is then replayed from that snapshot, and the attacker's
closure is checked against every undisclosed secret.

A script whose action targets a link message that never appears once the
action is removed behaves exactly like the shorter script (an unfired
action only advances match counters), so such scripts are counted as
covered without being replayed.
"""

from __future__ import annotations

import itertools
import pickle
import time
from dataclasses import dataclass, field
from typing import Iterator

from .adversary import known_from_digests
from .network import ScriptAction, ScriptError
from .protocol import SECRET_KINDS, SPECS, VEHICLE, World, WorldConfig

LINK_STEPS = ("17.1", "17.3", "17.8", "17.9", "17.17", "17.21")
FORGERIES = {"17.3": "adv-challenge", "17.8": "adv-response", "17.17": "adv-software"}


@dataclass(frozen=True)
class AtomicAction:
    """One attacker move aimed at one link message; Observe is the implicit default."""

    step: str
    kind: str  # drop | delay-1 | delay-max | modify-replay | modify-forge | inject-replay

    def script_line(self, at: int, eta: int) -> ScriptAction:
        match = f"step:{self.step}"
        if self.kind == "drop":
            return ScriptAction(at, "drop", "CIA|ECU", match)
        if self.kind.startswith("delay"):
            return ScriptAction(at, "delay", "CIA|ECU", match, {"d": 1 if self.kind == "delay-1" else eta})
        if self.kind == "modify-replay":
            return ScriptAction(at, "modify", "CIA|ECU", match, {"payload": "replay", "step": self.step})
        if self.kind == "modify-forge":
            return ScriptAction(at, "modify", "CIA|ECU", match, {"payload": "forge", "what": FORGERIES[self.step]})
        if self.kind == "inject-replay":
            return ScriptAction(at, "inject", "CIA|ECU", match, {"payload": "replay", "step": self.step})
        raise ScriptError(f"unknown atomic action {self.kind!r}")


def alphabet(steps: tuple = LINK_STEPS) -> dict[str, list[AtomicAction]]:
    out = {}
    for step in steps:
        kinds = ["drop", "delay-1", "delay-max", "modify-replay", "inject-replay"]
        if step in FORGERIES:
            kinds.append("modify-forge")
        out[step] = [AtomicAction(step, k) for k in kinds]
    return out


def scripts(max_actions: int, steps: tuple = LINK_STEPS) -> Iterator[tuple[AtomicAction, ...]]:
    """All scripts of 0..max_actions actions, at most one action per link message."""
    alpha = alphabet(steps)
    for n in range(max_actions + 1):
        for chosen in itertools.combinations(steps, n):
            yield from itertools.product(*(alpha[s] for s in chosen))


def count_scripts(max_actions: int, steps: tuple = LINK_STEPS) -> int:
    alpha = alphabet(steps)
    total = 0
    for n in range(max_actions + 1):
        for chosen in itertools.combinations(steps, n):
            prod = 1
            for s in chosen:
                prod *= len(alpha[s])
            total += prod
    return total


@dataclass
class Snapshot:
    blob: bytes
    at: int
    eta: int


def prepare_snapshot(config: WorldConfig | None = None) -> Snapshot:
    """Run to the start of the second vehicle round's stream-update segment."""
    world = World(config or WorldConfig(backend="mock", seed=11))
    world.run_stages(["preparation", "vehicle", "preparation"])
    (vin,) = sorted(world.config.vehicles)[:1]
    outcome = world.run_round(vin, VEHICLE, stop_before="STU")
    return Snapshot(pickle.dumps((world, outcome), protocol=pickle.HIGHEST_PROTOCOL), world.clock.now, world.config.eta)


_S_KINDS = frozenset(k.value for spec in SPECS.values() for k in spec.secrets) & {k.value for k in SECRET_KINDS}


@dataclass
class ScriptResult:
    actions: tuple
    leaked: list  # secret kinds derived by the attacker
    ecu: list  # (action, result, reason)
    foreign_install: bool
    observed: frozenset = frozenset()  # link steps intercepted after the snapshot


def run_script(snap: Snapshot, actions: tuple[AtomicAction, ...]) -> ScriptResult:
    world, outcome = pickle.loads(snap.blob)
    mark = len(world.adversary.history)
    world.adversary.script = [a.script_line(snap.at, snap.eta) for a in actions]
    world.resume_round(outcome.round, list(VEHICLE), dict(outcome.statuses))
    known = set(world.knowledge.digests())
    leaked = [
        s["kind"]
        for s in world.secrets.values()
        if s["kind"] in _S_KINDS and s["disclosed"] is None and known_from_digests(known, s["digest"], s["leaves"])
    ]
    ecu = [(r["action"], r["result"], r["reason"]) for r in world.trace.records if r["record"] == "ecu" and r["time"] >= snap.at]
    foreign = False
    for r in world.trace.records:
        if r["record"] == "event" and r["label"] == "STU.l9":
            for kind, digest in r["digests"]:
                rec = world.registry.get(digest)
                foreign |= rec is None or rec.origin != "Supplier"
    observed = frozenset(e.step() for e in world.adversary.history[mark:])
    return ScriptResult(actions, leaked, ecu, foreign, observed)


@dataclass
class EnumerationReport:
    max_actions: int
    scripts: int = 0
    replayed: int = 0
    leaks: list = field(default_factory=list)
    foreign_installs: list = field(default_factory=list)
    outcomes: dict = field(default_factory=dict)  # ECU outcome summary -> count
    seconds: float = 0.0

    @property
    def ok(self) -> bool:
        return not self.leaks and not self.foreign_installs

    def to_json(self) -> dict:
        return {
            "max_actions": self.max_actions,
            "scripts": self.scripts,
            "replayed": self.replayed,
            "leaks": self.leaks,
            "foreign_installs": self.foreign_installs,
            "outcomes": self.outcomes,
            "seconds": round(self.seconds, 3),
        }


def enumerate_attacks(max_actions: int = 4, config: WorldConfig | None = None) -> EnumerationReport:
    start = time.perf_counter()
    snap = prepare_snapshot(config)
    report = EnumerationReport(max_actions)
    memo: dict[tuple, ScriptResult] = {}
    for actions in scripts(max_actions):
        report.scripts += 1
        res = None
        for i, a in enumerate(actions):
            shorter = memo[actions[:i] + actions[i + 1 :]]
            if a.step not in shorter.observed:
                res = shorter
                break
        if res is not None:
            memo[actions] = res
            continue
        res = memo[actions] = run_script(snap, actions)
        report.replayed += 1
        label = " ".join(f"{a}:{r}" + (f"({why})" if why else "") for a, r, why in res.ecu) or "no ECU action"
        report.outcomes[label] = report.outcomes.get(label, 0) + 1
        desc = [f"{a.kind}@{a.step}" for a in actions]
        if res.leaked:
            report.leaks.append({"script": desc, "secrets": sorted(set(res.leaked))})
        if res.foreign_install:
            report.foreign_installs.append({"script": desc})
    report.seconds = time.perf_counter() - start
    return report
