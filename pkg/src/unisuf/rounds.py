"""Update-round lifecycle: identifiers, contexts, dedup log, expiry and trace records."""

from __future__ import annotations

import enum
import random
from dataclasses import dataclass, field
from typing import Any, Iterable

from .codec import digest_of
from .materials import Kind, RoundTag


class RoundExpired(Exception):
    """Raised when an entity tries to act in a round whose expiry has passed."""


class MissingStartingMaterial(Exception):
    def __init__(self, kind: Kind, owner: str = ""):
        super().__init__(f"{owner or 'context'} lacks starting material {kind.value}")
        self.kind = kind
        self.owner = owner


@dataclass(frozen=True, order=True)
class UpdateRoundId:
    """(VIN, expiry) plus a nonce that keeps same-instant rounds distinct."""

    vin: str | None
    expiry: int
    nonce: int

    @property
    def key(self) -> str:
        return f"{self.vin or '-'}/{self.expiry}/{self.nonce:016x}"

    @property
    def is_preparation(self) -> bool:
        return self.vin is None

    def tag(self) -> RoundTag:
        return RoundTag(self.vin, self.expiry, self.nonce)

    @classmethod
    def from_tag(cls, tag: RoundTag) -> "UpdateRoundId":
        return cls(tag.vin, tag.expiry, tag.nonce)

    @classmethod
    def from_key(cls, key: str) -> "UpdateRoundId":
        vin, expiry, nonce = key.split("/")
        return cls(None if vin == "-" else vin, int(expiry), int(nonce, 16))


def new_round(vin: str | None, now: int, ttl: int, rng: random.Random) -> UpdateRoundId:
    if ttl <= 0:
        raise ValueError("ttl must be positive")
    return UpdateRoundId(vin, now + ttl, rng.getrandbits(64))


class Liveness(enum.Enum):
    LIVE = "Live"
    EXPIRED = "Expired"


def check_expiry(round_id: UpdateRoundId, now: int) -> Liveness:
    # closed boundary: a round is already expired at t_e
    return Liveness.EXPIRED if now >= round_id.expiry else Liveness.LIVE


class Acceptance(enum.Enum):
    FRESH = "Fresh"
    DUPLICATE = "Duplicate"


@dataclass
class DedupLog:
    """Persistent log of (round, payload digest) pairs an entity has processed."""

    seen: set = field(default_factory=set)

    def accept(self, round_id: UpdateRoundId, payload: bytes) -> Acceptance:
        entry = (round_id, digest_of(payload))
        if entry in self.seen:
            return Acceptance.DUPLICATE
        self.seen.add(entry)
        return Acceptance.FRESH

    def __len__(self) -> int:
        return len(self.seen)


def accept_message(log: DedupLog, env: Any) -> Acceptance:
    return log.accept(env.round, env.payload)


@dataclass
class RoundContext:
    round: UpdateRoundId
    owner: str
    materials: dict = field(default_factory=dict)

    def put(self, kind: Kind, value: Any) -> None:
        self.materials[kind] = value

    def get(self, kind: Kind) -> Any:
        try:
            return self.materials[kind]
        except KeyError:
            raise MissingStartingMaterial(kind, self.owner) from None

    def has(self, kind: Kind) -> bool:
        return kind in self.materials


def pass_context(ctx: RoundContext, required: Iterable[Kind]) -> RoundContext:
    """Project ``ctx`` onto the starting materials the next segment declares."""
    out = RoundContext(ctx.round, ctx.owner)
    for kind in required:
        out.put(kind, ctx.get(kind))
    return out


@dataclass
class LogicalClock:
    now: int = 0

    def tick(self) -> int:
        self.now += 1
        return self.now

    def advance_to(self, t: int) -> None:
        self.now = max(self.now, t)


@dataclass(frozen=True)
class HandlingEvent:
    time: int
    round: UpdateRoundId
    label: str
    entity: str
    digests: tuple  # of (kind value, hex digest)

    @property
    def sub_problem(self) -> str:
        return self.label.split(".")[0]

    def to_json(self) -> dict:
        return {
            "record": "event",
            "time": self.time,
            "round": self.round.key,
            "round_vin": self.round.vin,
            "round_expiry": self.round.expiry,
            "entity": self.entity,
            "label": self.label,
            "digests": [list(d) for d in self.digests],
        }


@dataclass
class Trace:
    """Append-only record list; events, halts, segments and round headers."""

    records: list = field(default_factory=list)

    def append(self, record: dict) -> None:
        self.records.append(record)

    def events(self) -> list[dict]:
        return [r for r in self.records if r["record"] == "event"]


def material_digests(materials: Iterable[tuple[Kind, Any]]) -> tuple:
    return tuple((kind.value, digest_of(value)) for kind, value in materials)


def emit_event(
    trace: Trace,
    clock: LogicalClock,
    ctx: RoundContext,
    label: str,
    materials: Iterable[tuple[Kind, Any]],
) -> HandlingEvent:
    if check_expiry(ctx.round, clock.now + 1) is Liveness.EXPIRED:
        raise RoundExpired(f"round {ctx.round.key} expired")
    event = HandlingEvent(clock.tick(), ctx.round, label, ctx.owner, material_digests(materials))
    trace.append(event.to_json())
    return event
