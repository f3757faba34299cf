"""Offline checks of a recorded run against the six per-sub-problem requirements.

The verifier only reads JSON records (trace, material registry, secret
registry and knowledge snapshots), so verdicts computed during a run and
verdicts recomputed later from the written files are identical.

    R1 confidentiality   secrets of the sub-problem never enter the attacker's closure
    R2 authenticity      guaranteed materials come from their declared origin, unchanged
    R3 freshness         no handling event is a replay of one from another round
    R4 non-duplication   no handling event repeats within a round
    R5 ordering          events respect the partial order; completed segments show every label
    R6 termination       participants halt; nothing happens at or after expiry
"""

from __future__ import annotations

import json
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Any

from .adversary import known_from_digests
from .materials import PERSISTENT_KINDS
from .protocol import SPECS, SUB_PROBLEMS, SubProblemSpec, load_jsonl

REQUIREMENTS = {
    "R1": "confidentiality",
    "R2": "authenticity",
    "R3": "freshness",
    "R4": "non-duplication",
    "R5": "ordering",
    "R6": "termination",
}

_PERSISTENT = frozenset(k.value for k in PERSISTENT_KINDS)


class MalformedTrace(ValueError):
    """Trace or sibling artifact files cannot be parsed."""


@dataclass(frozen=True)
class Verdict:
    requirement: str
    sub_problem: str
    passed: bool
    detail: str = ""
    witness: Any = None

    @property
    def status(self) -> str:
        return "Pass" if self.passed else "Fail"

    def to_json(self) -> dict:
        return {
            "requirement": self.requirement,
            "name": REQUIREMENTS[self.requirement],
            "sub_problem": self.sub_problem,
            "status": self.status,
            "detail": self.detail,
            "witness": self.witness,
        }


@dataclass
class Artifacts:
    trace: list
    materials: list
    secrets: list
    knowledge: dict

    @classmethod
    def load(cls, trace_path: str | Path) -> "Artifacts":
        """Load ``trace.jsonl`` and its sibling files from the same directory."""
        trace_path = Path(trace_path)
        base = trace_path.parent
        try:
            with open(base / "knowledge.json") as fh:
                knowledge = json.load(fh)
            art = cls(
                load_jsonl(trace_path),
                load_jsonl(base / "materials.jsonl"),
                load_jsonl(base / "secrets.jsonl"),
                knowledge,
            )
        except (OSError, json.JSONDecodeError) as exc:
            raise MalformedTrace(str(exc)) from exc
        art.check_shape()
        return art

    def check_shape(self) -> None:
        need = {
            "event": ("time", "round", "entity", "label", "digests"),
            "halt": ("time", "round", "entity", "mode"),
            "segment": ("sub_problem", "round", "status"),
            "round": ("round", "expiry"),
        }
        for n, rec in enumerate(self.trace, 1):
            if not isinstance(rec, dict) or "record" not in rec:
                raise MalformedTrace(f"trace line {n}: not a record")
            missing = [k for k in need.get(rec["record"], ()) if k not in rec]
            if missing:
                raise MalformedTrace(f"trace line {n}: missing {missing}")
        for rec in self.materials:
            if not isinstance(rec, dict) or "digest" not in rec or "origin" not in rec:
                raise MalformedTrace("material record lacks digest/origin")
        for rec in self.secrets:
            if not isinstance(rec, dict) or not {"digest", "kind", "created", "disclosed", "leaves"} <= set(rec):
                raise MalformedTrace("secret record incomplete")
        if not isinstance(self.knowledge, dict) or not isinstance(self.knowledge.get("snapshots", []), list):
            raise MalformedTrace("knowledge dump must hold a snapshot list")

    @classmethod
    def from_world(cls, world: Any) -> "Artifacts":
        # round-trip through JSON so in-run and offline verdicts agree exactly
        art = json.loads(json.dumps(world.artifacts(), sort_keys=True))
        return cls(art["trace"], art["materials"], art["secrets"], art["knowledge"])


class _Index:
    """Pre-grouped views of the artifacts."""

    def __init__(self, art: Artifacts):
        self.registry = {m["digest"]: m for m in art.materials}
        self.secrets = art.secrets
        self.events: dict[str, list] = defaultdict(list)  # sub-problem -> [(index, event)]
        self.segments: dict[str, list] = defaultdict(list)
        self.halts: dict[str, dict] = defaultdict(dict)  # round -> entity -> halt record
        self.rounds = {}
        for i, rec in enumerate(art.trace):
            kind = rec.get("record")
            if kind == "event":
                self.events[rec["label"].split(".")[0]].append((i, rec))
            elif kind == "segment":
                self.segments[rec["sub_problem"]].append(rec)
            elif kind == "halt":
                self.halts[rec["round"]].setdefault(rec["entity"], rec)
            elif kind == "round":
                self.rounds[rec["round"]] = rec
        self.snapshots = {}
        self.final = None
        for snap in art.knowledge.get("snapshots", []):
            digests = frozenset(snap["digests"])
            if snap["sub_problem"] == "final":
                self.final = (snap["time"], digests)
            else:
                self.snapshots[(snap["sub_problem"], snap["round"])] = (snap["time"], digests)
        if self.final is None and art.knowledge.get("snapshots"):
            last = art.knowledge["snapshots"][-1]
            self.final = (last["time"], frozenset(last["digests"]))

    def expiry(self, round_key: str) -> int:
        rec = self.rounds.get(round_key)
        return rec["expiry"] if rec else int(round_key.split("/")[1])


def _role(entity: str) -> str:
    return entity.split("@")[0]


def check_r1(spec: SubProblemSpec, ix: _Index) -> Verdict:
    kinds = {k.value for k in spec.secrets}
    secrets = [s for s in ix.secrets if s["kind"] in kinds]
    segments = ix.segments.get(spec.code, [])
    checks = 0
    for seg in segments:
        snap = ix.snapshots.get((spec.code, seg["round"]))
        if snap is None:
            return Verdict("R1", spec.code, False, "missing knowledge snapshot", {"round": seg["round"]})
        t, known = snap
        for s in secrets:
            if s["created"] > t or (s["disclosed"] is not None and s["disclosed"] <= t):
                continue
            checks += 1
            if known_from_digests(known, s["digest"], s["leaves"]):
                return Verdict(
                    "R1",
                    spec.code,
                    False,
                    f"attacker derives {s['kind']}",
                    {"secret": s["digest"], "kind": s["kind"], "round": seg["round"], "time": t},
                )
    if not segments:
        return Verdict("R1", spec.code, True, "vacuous: sub-problem not exercised")
    if ix.final is not None:
        t, known = ix.final
        for s in secrets:
            if s["disclosed"] is not None:
                continue
            checks += 1
            if known_from_digests(known, s["digest"], s["leaves"]):
                return Verdict(
                    "R1", spec.code, False, f"attacker derives {s['kind']} by the end", {"secret": s["digest"], "kind": s["kind"]}
                )
    return Verdict("R1", spec.code, True, f"{checks} secret checks")


def check_r2(spec: SubProblemSpec, ix: _Index) -> Verdict:
    guaranteed = {k.value: origin for k, origin in spec.guarantees}
    seen: dict[tuple[str, str], str] = {}
    for _, ev in ix.events.get(spec.code, []):
        for kind, digest in ev["digests"]:
            rec = ix.registry.get(digest)
            if rec is None:
                return Verdict("R2", spec.code, False, "unregistered material", {"label": ev["label"], "digest": digest})
            if kind not in guaranteed:
                continue
            if rec["origin"] != guaranteed[kind]:
                return Verdict(
                    "R2",
                    spec.code,
                    False,
                    f"{kind} originates from {rec['origin']}, not {guaranteed[kind]}",
                    {"label": ev["label"], "round": ev["round"], "digest": digest},
                )
            first = seen.setdefault((ev["round"], kind), digest)
            if first != digest:
                return Verdict(
                    "R2",
                    spec.code,
                    False,
                    f"{kind} changed within the round",
                    {"label": ev["label"], "round": ev["round"], "digests": [first, digest]},
                )
    return Verdict("R2", spec.code, True, f"{len(seen)} guaranteed materials stable")


def _fresh_part(ev: dict) -> frozenset:
    return frozenset(d for k, d in ev["digests"] if k not in _PERSISTENT)


def check_r3(spec: SubProblemSpec, ix: _Index) -> Verdict:
    first_round: dict[tuple, str] = {}
    for _, ev in ix.events.get(spec.code, []):
        # keyed per vehicle: release material is legitimately shared by different VINs
        key = (ev["label"], ev.get("round_vin"), _fresh_part(ev))
        prev = first_round.setdefault(key, ev["round"])
        if prev != ev["round"]:
            return Verdict(
                "R3",
                spec.code,
                False,
                f"{ev['label']} replays round {prev}",
                {"label": ev["label"], "round": ev["round"], "earlier_round": prev, "digests": sorted(key[2])},
            )
    return Verdict("R3", spec.code, True, f"{len(first_round)} distinct events")


def check_r4(spec: SubProblemSpec, ix: _Index) -> Verdict:
    seen = set()
    for _, ev in ix.events.get(spec.code, []):
        key = (ev["round"], ev["label"], tuple(sorted(d for _, d in ev["digests"])))
        if key in seen:
            return Verdict(
                "R4", spec.code, False, f"{ev['label']} handled twice", {"label": ev["label"], "round": ev["round"], "time": ev["time"]}
            )
        seen.add(key)
    return Verdict("R4", spec.code, True, f"{len(seen)} events unique")


def check_r5(spec: SubProblemSpec, ix: _Index) -> Verdict:
    allowed = set(spec.labels)
    by_round: dict[str, list] = defaultdict(list)
    for idx, ev in ix.events.get(spec.code, []):
        if ev["label"] not in allowed:
            return Verdict("R5", spec.code, False, f"unknown label {ev['label']}", {"label": ev["label"]})
        by_round[ev["round"]].append((idx, ev["label"]))
    for rnd, items in by_round.items():
        first_at = {}
        for idx, lbl in items:
            first_at.setdefault(lbl, idx)
        for a, b in spec.order_labels():
            for idx, lbl in items:
                if lbl == b and not (a in first_at and first_at[a] < idx):
                    return Verdict("R5", spec.code, False, f"{b} without an earlier {a}", {"round": rnd, "label": b, "needs": a})
    completed = [s for s in ix.segments.get(spec.code, []) if s["status"] == "completed"]
    for seg in completed:
        got = {lbl for _, lbl in by_round.get(seg["round"], [])}
        missing = sorted(allowed - got)
        if missing:
            return Verdict("R5", spec.code, False, "completed segment lacks labels", {"round": seg["round"], "missing": missing})
    if not completed:
        return Verdict("R5", spec.code, False, "no segment of this sub-problem completed", None)
    return Verdict("R5", spec.code, True, f"{len(completed)} completed segments in order")


def check_r6(spec: SubProblemSpec, ix: _Index) -> Verdict:
    segments = ix.segments.get(spec.code, [])
    if not segments:
        return Verdict("R6", spec.code, True, "vacuous: sub-problem not exercised")
    roles = set(spec.roles)
    late = 0
    halted = 0
    for seg in segments:
        rnd = seg["round"]
        expiry = ix.expiry(rnd)
        last_event: dict[str, int] = {}
        for _, ev in ix.events.get(spec.code, []):
            if ev["round"] != rnd:
                continue
            if ev["time"] >= expiry:
                return Verdict("R6", spec.code, False, "event at or after expiry", {"round": rnd, "label": ev["label"], "time": ev["time"]})
            last_event[ev["entity"]] = max(last_event.get(ev["entity"], 0), ev["time"])
        participants = {e for e in last_event if _role(e) in roles}
        for entity in sorted(participants):
            halt = ix.halts.get(rnd, {}).get(entity)
            if halt is None:
                return Verdict("R6", spec.code, False, f"{entity} never halts", {"round": rnd, "entity": entity})
            if halt["time"] < last_event[entity]:
                return Verdict("R6", spec.code, False, f"{entity} acts after halting", {"round": rnd, "entity": entity})
            halted += 1
            if halt["mode"] != "timely" or halt["time"] >= expiry:
                late += 1
    if late:
        return Verdict("R6", spec.code, True, f"late: {late} of {halted} halts after expiry")
    return Verdict("R6", spec.code, True, f"timely: {halted} halts before expiry")


CHECKS = {"R1": check_r1, "R2": check_r2, "R3": check_r3, "R4": check_r4, "R5": check_r5, "R6": check_r6}


def verify(art: Artifacts, sub_problems: tuple = SUB_PROBLEMS) -> list[Verdict]:
    ix = _Index(art)
    return [CHECKS[r](SPECS[sp], ix) for sp in sub_problems for r in REQUIREMENTS]


def verdict_records(verdicts: list[Verdict]) -> list[dict]:
    return [v.to_json() for v in verdicts]


def all_pass(verdicts: list[Verdict]) -> bool:
    return all(v.passed for v in verdicts)
