"""Deterministic discrete-event network.

Channels are reliable and non-FIFO.  Every channel is private except the one
between the vehicle's installation agent and its ECU, where a scripted
Dolev-Yao adversary observes all traffic and may drop, delay, modify or inject.
"""

from __future__ import annotations

import enum
import heapq
import json
import logging
import random
from dataclasses import dataclass, field, replace
from typing import Any, Callable, Iterable

from .adversary import Knowledge
from .codec import MalformedEncoding, bytes_spans, decode, digest_of, encode
from .rounds import LogicalClock, UpdateRoundId

log = logging.getLogger(__name__)

DEFAULT_ETA = 8


class Security(enum.Enum):
    SECURE = "SecureReliable"
    INSECURE = "InsecureReliable"


class Origin(enum.Enum):
    HONEST = "Honest"
    ADVERSARY = "Adversary"


class NetworkError(Exception):
    pass


class UnknownChannel(NetworkError):
    pass


class SecureChannelViolation(NetworkError):
    pass


class DelayBoundExceeded(NetworkError):
    pass


class ScriptError(NetworkError):
    pass


def role_of(entity: str) -> str:
    return entity.split("@", 1)[0]


# Role pairs that talk to each other in the communication tables.
ROLE_LINKS = frozenset(
    frozenset(p)
    for p in [
        ("Supplier", "ProducerLocalStorage"),
        ("VCM", "ProducerLocalStorage"),
        ("VCM", "PSA"),
        ("VCM", "PSS"),
        ("VCM", "SoftwareRepository"),
        ("VCM", "VinDatabase"),
        ("VCM", "CMS"),
        ("VCM", "OrderAgent"),
        ("VCM", "PDA"),
        ("VCM", "PIA"),
        ("VCM", "VehicleCloudService"),
        ("CDA", "OrderCloudService"),
        ("OrderAgent", "OrderCloudService"),
        ("PDA", "PSA"),
        ("PDA", "CMS"),
        ("PDA", "PSS"),
        ("PSA", "CMS"),
        ("PSA", "PSS"),
        ("PIA", "PSA"),
        ("PIA", "CMS"),
        ("PIA", "PSS"),
        ("CDA", "VehicleCloudService"),
        ("CDA", "ConsumerLocalStorage"),
        ("CDA", "CSA"),
        ("CDA", "SoftwareRepository"),
        ("CDA", "CIA"),
        ("CIA", "CSA"),
        ("CIA", "ECU"),
        ("CIA", "ConsumerLocalStorage"),
    ]
)

INSECURE_LINKS = frozenset({frozenset(("CIA", "ECU"))})


@dataclass(frozen=True)
class ChannelId:
    endpoints: tuple  # sorted pair of entity names
    security: Security

    @property
    def name(self) -> str:
        return "|".join(self.endpoints)

    def other(self, entity: str) -> str:
        a, b = self.endpoints
        return b if entity == a else a


def channel_between(a: str, b: str) -> ChannelId:
    roles = frozenset((role_of(a), role_of(b)))
    if roles not in ROLE_LINKS:
        raise UnknownChannel(f"no channel between {a} and {b}")
    vins = {e.split("@", 1)[1] for e in (a, b) if "@" in e}
    if len(vins) > 1:
        raise UnknownChannel(f"{a} and {b} belong to different vehicles")
    security = Security.INSECURE if roles in INSECURE_LINKS else Security.SECURE
    return ChannelId(tuple(sorted((a, b))), security)


@dataclass(frozen=True)
class Envelope:
    channel: ChannelId
    round: UpdateRoundId
    seq: int
    payload: bytes
    inject_origin: Origin
    sender: str
    receiver: str
    sent_at: int

    @property
    def digest(self) -> str:
        return digest_of(self.payload)

    def step(self) -> str | None:
        try:
            msg = decode(self.payload)
        except MalformedEncoding:
            return None
        return getattr(msg, "step", None)


@dataclass(order=True)
class _Pending:
    delivery_time: int
    tiebreak: int
    counter: int
    env: Envelope = field(compare=False)


class Schedule:
    """Priority queue of pending deliveries; ties broken by a seeded draw."""

    def __init__(self, rng: random.Random):
        self.rng = rng
        self._heap: list[_Pending] = []
        self._counter = 0

    def push(self, env: Envelope, delivery_time: int) -> None:
        self._counter += 1
        heapq.heappush(self._heap, _Pending(delivery_time, self.rng.getrandbits(32), self._counter, env))

    def pop(self) -> tuple[int, Envelope] | None:
        if not self._heap:
            return None
        item = heapq.heappop(self._heap)
        return item.delivery_time, item.env

    def next_time(self) -> int | None:
        return self._heap[0].delivery_time if self._heap else None

    def remove(self, env: Envelope) -> int | None:
        for i, item in enumerate(self._heap):
            if item.env is env:
                self._heap.pop(i)
                heapq.heapify(self._heap)
                return item.delivery_time
        return None

    def pending(self) -> list[tuple[int, Envelope]]:
        return [(p.delivery_time, p.env) for p in sorted(self._heap)]

    def __len__(self) -> int:
        return len(self._heap)


# ---------------------------------------------------------------------------
# adversary actions


@dataclass(frozen=True)
class Observe:
    env: Envelope


@dataclass(frozen=True)
class Drop:
    env: Envelope


@dataclass(frozen=True)
class Modify:
    env: Envelope
    new_payload: bytes


@dataclass(frozen=True)
class Inject:
    channel: ChannelId
    env: Envelope


@dataclass(frozen=True)
class Delay:
    env: Envelope
    d: int


@dataclass
class ScriptAction:
    """One line of an attack script.

    ``match`` selects the envelope: ``step:<id>``, ``seq:<n>``,
    ``digest:<hex prefix>`` or ``slot:<k>`` (the k-th honest insecure envelope
    sent at or after ``at``).  ``arg`` parameterises the action; ``arg["skip"]``
    lets the first n matching envelopes pass untouched.
    """

    at: int
    action: str
    channel: str
    match: str
    arg: dict = field(default_factory=dict)
    used: bool = False
    seen: int = 0

    def to_json(self) -> dict:
        return {"at": self.at, "action": self.action, "channel": self.channel, "match": self.match, "arg": self.arg}


ACTIONS = ("observe", "drop", "delay", "modify", "inject")


def parse_script(lines: Iterable[str] | Iterable[dict]) -> list[ScriptAction]:
    out = []
    for n, raw in enumerate(lines, 1):
        if isinstance(raw, str):
            raw = raw.strip()
            if not raw or raw.startswith("#"):
                continue
            try:
                raw = json.loads(raw)
            except json.JSONDecodeError as exc:
                raise ScriptError(f"line {n}: {exc}") from exc
        try:
            act = ScriptAction(
                at=int(raw.get("at", 0)),
                action=str(raw["action"]),
                channel=str(raw.get("channel", "CIA|ECU")),
                match=str(raw["match"]),
                arg=dict(raw.get("arg", {})),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ScriptError(f"line {n}: {exc}") from exc
        if act.action not in ACTIONS:
            raise ScriptError(f"line {n}: unknown action {act.action!r}")
        roles = frozenset(role_of(e) for e in act.channel.split("|"))
        if roles not in INSECURE_LINKS:
            raise SecureChannelViolation(f"line {n}: channel {act.channel} is not attackable")
        kind, _, _ = act.match.partition(":")
        if kind not in ("step", "seq", "digest", "slot"):
            raise ScriptError(f"line {n}: bad match {act.match!r}")
        out.append(act)
    return out


def flip_byte(payload: bytes, index: int, mask: int = 0x01) -> bytes:
    """Flip one byte inside a raw ``bytes`` field so the payload still decodes."""
    positions = [p for start, end in bytes_spans(payload) for p in range(start, end)]
    if not positions:
        raise ScriptError("payload has no byte fields to tamper with")
    pos = positions[index % len(positions)]
    out = bytearray(payload)
    out[pos] ^= mask or 0x01
    return bytes(out)


class Adversary:
    """Dolev-Yao controller for the insecure link."""

    def __init__(self, knowledge: Knowledge, script: list[ScriptAction] | None = None):
        self.knowledge = knowledge
        self.script = list(script or [])
        self.log: list[dict] = []
        self.history: list[Envelope] = []  # every envelope seen on an insecure link
        self.forger: Callable[[str, "Adversary", Envelope], bytes] | None = None

    def record(self, time: int, action: str, env: Envelope | None, **detail: Any) -> None:
        entry = {"time": time, "action": action}
        if env is not None:
            entry.update(
                {
                    "channel": env.channel.name,
                    "round": env.round.key,
                    "seq": env.seq,
                    "step": env.step(),
                    "digest": env.digest,
                }
            )
        entry.update(detail)
        self.log.append(entry)

    def observe(self, env: Envelope) -> None:
        self.history.append(env)
        self.knowledge.observe(env.payload)
        self.knowledge.add(env.round.tag())
        self.knowledge.add(env.seq)

    def _slot_of(self, env: Envelope, at: int) -> int:
        honest = [e for e in self.history if e.inject_origin is Origin.HONEST and e.sent_at >= at]
        return next(i for i, e in enumerate(honest) if e is env)

    def _matches(self, act: ScriptAction, env: Envelope) -> bool:
        if act.used or env.sent_at < act.at or env.channel.name != act.channel and not _same_roles(act.channel, env):
            return False
        kind, _, value = act.match.partition(":")
        if kind == "step":
            hit = env.step() == value
        elif kind == "seq":
            hit = env.seq == int(value)
        elif kind == "digest":
            hit = env.digest.startswith(value)
        else:
            hit = env.inject_origin is Origin.HONEST and self._slot_of(env, act.at) == int(value)
        if hit and act.seen < int(act.arg.get("skip", 0)):
            act.seen += 1
            return False
        return hit

    def payload_for(self, arg: dict, env: Envelope) -> bytes:
        mode = arg.get("payload", "same")
        if mode == "same":
            return env.payload
        if mode == "flip":
            return flip_byte(env.payload, int(arg.get("index", 0)), int(arg.get("mask", 1)))
        if mode == "hex":
            return bytes.fromhex(arg["data"])
        if mode == "replay":
            return self.replay_payload(arg, env)
        if mode == "forge":
            if self.forger is None:
                raise ScriptError("no forger configured")
            return self.forger(str(arg["what"]), self, env)
        raise ScriptError(f"unknown payload mode {mode!r}")

    def replay_payload(self, arg: dict, env: Envelope) -> bytes:
        step = arg.get("step")
        prefix = arg.get("digest")
        other_round = arg.get("round", "previous") == "previous"
        for old in reversed(self.history):
            if old is env:
                continue
            if step is not None and old.step() != step:
                continue
            if prefix is not None and not old.digest.startswith(prefix):
                continue
            if other_round and old.round == env.round:
                continue
            return old.payload
        raise ScriptError(f"nothing recorded to replay for {arg}")


def _same_roles(name: str, env: Envelope) -> bool:
    roles = sorted(role_of(e) for e in name.split("|"))
    return roles == sorted(role_of(e) for e in env.channel.endpoints)


class Network:
    def __init__(self, rng: random.Random, clock: LogicalClock, adversary: Adversary, eta: int = DEFAULT_ETA):
        if eta < 1:
            raise ValueError("eta must be at least 1")
        self.rng = rng
        self.clock = clock
        self.eta = eta
        self.schedule = Schedule(rng)
        self.adversary = adversary
        self._seq: dict[tuple, int] = {}
        self.delivered = 0
        self.sent_payloads: list[tuple[str, bytes]] = []  # (sender, payload), secure links included

    def _next_seq(self, channel: ChannelId, round_id: UpdateRoundId, sender: str) -> int:
        key = (channel.name, round_id, sender)
        self._seq[key] = self._seq.get(key, 0) + 1
        return self._seq[key]

    def _delay(self) -> int:
        return self.rng.randint(1, self.eta)

    def send(self, sender: str, receiver: str, round_id: UpdateRoundId, payload: bytes) -> Envelope:
        ch = channel_between(sender, receiver)
        now = self.clock.now
        env = Envelope(ch, round_id, self._next_seq(ch, round_id, sender), payload, Origin.HONEST, sender, receiver, now)
        self.sent_payloads.append((sender, payload))
        if ch.security is Security.INSECURE:
            self._intercept(env)
        else:
            self.schedule.push(env, now + self._delay())
        return env

    # -- adversary ---------------------------------------------------------
    def _intercept(self, env: Envelope) -> None:
        adv = self.adversary
        adv.observe(env)
        hits = [a for a in adv.script if adv._matches(a, env)]  # every action counts skips
        act = hits[0] if hits else None
        now = self.clock.now
        if act is None or act.action == "observe":
            if act is not None:
                act.used = True
                adv.record(now, "observe", env)
            self.schedule.push(env, now + self._delay())
            return
        act.used = True
        if act.action == "drop":
            adv.record(now, "drop", env, note="reliability exception")
        elif act.action == "delay":
            d = int(act.arg.get("d", self.eta))
            if not 1 <= d <= self.eta:
                raise DelayBoundExceeded(f"delay {d} outside [1, {self.eta}]")
            self.schedule.push(env, env.sent_at + d)
            adv.record(now, "delay", env, d=d)
        elif act.action == "modify":
            new = adv.payload_for(act.arg, env)
            forged = replace(env, payload=new, inject_origin=Origin.ADVERSARY)
            self.schedule.push(forged, now + self._delay())
            adv.record(now, "modify", env, new_digest=digest_of(new), mode=act.arg.get("payload", "same"))
        elif act.action == "inject":
            self.schedule.push(env, now + self._delay())
            new = adv.payload_for(act.arg, env)
            reflect = bool(act.arg.get("reflect", False))
            sender, receiver = (env.receiver, env.sender) if reflect else (env.sender, env.receiver)
            extra = Envelope(env.channel, env.round, env.seq, new, Origin.ADVERSARY, sender, receiver, now)
            self.schedule.push(extra, now + int(act.arg.get("d", 1)))
            adv.record(now, "inject", env, new_digest=digest_of(new), reflect=reflect, mode=act.arg.get("payload", "same"))

    def adversary_act(self, action: Any) -> None:
        """Apply one action directly to a pending or captured envelope."""
        adv = self.adversary
        now = self.clock.now
        env = getattr(action, "env", None)
        if env is not None and env.channel.security is not Security.INSECURE and not isinstance(action, Observe):
            raise SecureChannelViolation(f"{type(action).__name__} on secure channel {env.channel.name}")
        if isinstance(action, Observe):
            if env.channel.security is not Security.INSECURE and env not in adv.history:
                raise SecureChannelViolation("only insecure-link traffic can be observed")
            adv.knowledge.observe(env.payload)
            adv.record(now, "observe", env)
        elif isinstance(action, Drop):
            self.schedule.remove(env)
            adv.record(now, "drop", env, note="reliability exception")
        elif isinstance(action, Modify):
            self.schedule.remove(env)
            self.schedule.push(replace(env, payload=action.new_payload, inject_origin=Origin.ADVERSARY), now + self._delay())
            adv.record(now, "modify", env, new_digest=digest_of(action.new_payload))
        elif isinstance(action, Inject):
            if action.channel.security is not Security.INSECURE:
                raise SecureChannelViolation(f"inject on secure channel {action.channel.name}")
            self.schedule.push(replace(action.env, inject_origin=Origin.ADVERSARY, sent_at=now), now + 1)
            adv.record(now, "inject", action.env)
        elif isinstance(action, Delay):
            if not 1 <= action.d <= self.eta:
                raise DelayBoundExceeded(f"delay {action.d} outside [1, {self.eta}]")
            if self.schedule.remove(env) is not None:
                self.schedule.push(env, env.sent_at + action.d)
            adv.record(now, "delay", env, d=action.d)
        else:
            raise TypeError(f"unknown adversary action {action!r}")

    def step(self) -> Envelope | None:
        item = self.schedule.pop()
        if item is None:
            return None
        t, env = item
        self.clock.advance_to(t)
        self.delivered += 1
        return env


def encode_message(step: str, items: tuple) -> bytes:
    from .materials import Message

    return encode(Message(step, tuple(items)))
