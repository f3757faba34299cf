"""Sub-problem table, world setup and the orchestrator that runs update rounds.

A *world* owns every entity, the shared clock, the network with its attacker,
the material registry and the trace.  Each update round is run as a sequence
of sub-problem segments; a segment starts one or more initiator tasks and then
delivers envelopes until the network is quiet.
"""

from __future__ import annotations

import json
import logging
import random
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable

from .adversary import Knowledge, secret_leaves
from .codec import MalformedEncoding, decode, digest_of, encode
from .crypto import Certificate, CryptoConfig, CryptoSuite, KeyKind, Signed, SymKey, make_backend
from .entities import (
    CMS,
    CSA,
    ECU,
    ENTITY_CLASSES,
    PSS,
    VCM,
    CDA,
    Entity,
    Supplier,
    VinDatabase,
    address,
    label,
    scan_key_containment,
)
from .materials import (
    EcuChallenge,
    EcuResponse,
    Kind,
    MaterialRecord,
    Message,
    Software,
    VinData,
)
from .network import DEFAULT_ETA, Adversary, Network, Origin, ScriptAction, ScriptError
from .rounds import (
    LogicalClock,
    MissingStartingMaterial,
    Trace,
    UpdateRoundId,
    emit_event,
    new_round,
    pass_context,
)

log = logging.getLogger(__name__)

DEFAULT_TTL = 2000
ADVERSARY = "Adversary"
ROOT = "Root"


# ---------------------------------------------------------------------------
# sub-problem table


def chain(n: int) -> frozenset:
    return frozenset((i, i + 1) for i in range(1, n))


@dataclass(frozen=True)
class SubProblemSpec:
    code: str
    title: str
    stage: str  # "preparation" or "vehicle"
    n_labels: int
    order: frozenset  # pairs (a, b): every l_b needs an earlier l_a
    secrets: frozenset  # kinds that must stay unknown to the attacker
    guarantees: tuple  # (kind, origin) pairs for authenticity
    roles: tuple
    starting: tuple  # (role, kinds) the context must hold before kickoff
    kickoffs: tuple  # (role, task)

    @property
    def labels(self) -> tuple:
        return tuple(label(self.code, i) for i in range(1, self.n_labels + 1))

    def order_labels(self) -> list[tuple[str, str]]:
        return sorted((label(self.code, a), label(self.code, b)) for a, b in self.order)

    def to_json(self) -> dict:
        return {
            "code": self.code,
            "title": self.title,
            "stage": self.stage,
            "labels": list(self.labels),
            "order": [list(p) for p in self.order_labels()],
            "secrets": sorted(k.value for k in self.secrets),
            "guarantees": [[k.value, o] for k, o in self.guarantees],
            "roles": list(self.roles),
        }


K = Kind
_MKM_KEYS = {K.MKM_SA_KEY, K.MKM_SW_KEY}
_SKA_KEYS = {K.SOFTWARE_KEY, K.SECURITY_ACCESS_KEY}
_DI = ((K.DOWNLOAD_INSTRUCTIONS, "PDA"), (K.ENC_DOWNLOAD_INSTRUCTIONS, "PDA"))
_II = ((K.INSTALLATION_INSTRUCTIONS, "PIA"), (K.ENC_INSTALLATION_INSTRUCTIONS, "PIA"))


def _spec(code, title, stage, n, secrets, guarantees, roles, starting=(), kickoffs=(), order=None):
    return SubProblemSpec(
        code,
        title,
        stage,
        n,
        frozenset(order if order is not None else chain(n)),
        frozenset(secrets),
        tuple(guarantees),
        tuple(roles),
        tuple((r, tuple(ks)) for r, ks in starting),
        tuple(kickoffs),
    )


SPECS: dict[str, SubProblemSpec] = {
    s.code: s
    for s in (
        _spec(
            "SSF",
            "Secure software files",
            "preparation",
            5,
            {K.SOFTWARE, K.SOFTWARE_KEY, K.SUPPLIER_PRIVATE_KEY, K.VCM_PRIVATE_KEY},
            [(K.SOFTWARE, "Supplier"), (K.SOFTWARE_KEY, "PSA"), (K.SOFTWARE_HASH, "VCM"), (K.SIGNED_SOFTWARE_HASH, "PSS")],
            ["Supplier", "ProducerLocalStorage", "VCM", "PSA", "PSS"],
            kickoffs=[("Supplier", "upload"), ("VCM", "fetch_software")],
        ),
        _spec(
            "USF",
            "Upload software files",
            "preparation",
            4,
            {K.SOFTWARE, K.SOFTWARE_KEY, K.SUPPLIER_PRIVATE_KEY, K.VCM_PRIVATE_KEY},
            [(K.SOFTWARE_ENCASED, "VCM"), (K.SOFTWARE_KEY, "PSA"), (K.SOFTWARE_URL, "SoftwareRepository")],
            ["VCM", "SoftwareRepository", "VinDatabase", "CMS"],
            starting=[("VCM", [K.SOFTWARE_ENCASED, K.SOFTWARE_KEY])],
            kickoffs=[("VCM", "upload")],
        ),
        _spec(
            "OI",
            "Order initiation",
            "vehicle",
            5,
            {K.CDA_PRIVATE_KEY},
            [(K.VSO, "CDA")],
            ["CDA", "OrderCloudService", "OrderAgent", "VCM"],
            kickoffs=[("CDA", "order"), ("OrderAgent", "pull")],
        ),
        _spec(
            "CSL",
            "Create software list",
            "vehicle",
            6,
            {K.CDA_PRIVATE_KEY, K.VCM_PRIVATE_KEY},
            [(K.VSO, "CDA"), (K.SOFTWARE_LIST, "VCM"), (K.VIN_DATA, "VinDatabase"), (K.SOFTWARE_VERSIONS, "VinDatabase")],
            ["VCM", "VinDatabase", "PDA", "PIA", "PSA"],
            starting=[("VCM", [K.VSO])],
            kickoffs=[("VCM", "create_list")],
            order=[(1, 2), (2, 3), (2, 4), (2, 5), (3, 6), (4, 6), (5, 6)],
        ),
        _spec(
            "CDI",
            "Create download instructions",
            "vehicle",
            10,
            {K.SOFTWARE_LIST, K.DOWNLOAD_INSTRUCTIONS, K.DKM_KEY, K.ROOT_PRIVATE_KEY, K.PDA_PRIVATE_KEY, K.VCM_PRIVATE_KEY},
            [(K.SOFTWARE_LIST, "VCM"), *_DI, (K.DKM_KEY, "PSA"), (K.VEHICLE_CERT, ROOT), (K.PDA_CERT, ROOT), (K.DKM, "PDA")],
            ["PDA", "PSA", "CMS", "PSS"],
            starting=[("PDA", [K.SOFTWARE_LIST, K.VCM_CERT])],
            kickoffs=[("PDA", "create_instructions")],
        ),
        _spec(
            "GIM",
            "Generate installation materials",
            "vehicle",
            9,
            {K.SOFTWARE_LIST, *_MKM_KEYS, *_SKA_KEYS, K.ROOT_PRIVATE_KEY, K.PSA_PRIVATE_KEY, K.VCM_PRIVATE_KEY},
            [(K.SOFTWARE_LIST, "VCM"), (K.VEHICLE_CERT, ROOT), (K.PSA_CERT, ROOT), (K.MKM, "PSA"), (K.SKA, "PSA")],
            ["PSA", "CMS", "PSS"],
            starting=[("PSA", [K.SOFTWARE_LIST, K.VCM_CERT])],
            kickoffs=[("PSA", "generate_materials")],
        ),
        _spec(
            "CII",
            "Create installation instructions",
            "vehicle",
            11,
            {K.SOFTWARE_LIST, K.INSTALLATION_INSTRUCTIONS, K.IKM_KEY, K.ROOT_PRIVATE_KEY, K.PIA_PRIVATE_KEY, K.VCM_PRIVATE_KEY},
            [
                (K.SOFTWARE_LIST, "VCM"),
                *_II,
                (K.IKM_KEY, "PSA"),
                (K.VEHICLE_CERT, ROOT),
                (K.PIA_CERT, ROOT),
                (K.MKM, "PSA"),
                (K.SKA, "PSA"),
            ],
            ["PIA", "PSA", "CMS", "PSS"],
            starting=[("PIA", [K.SOFTWARE_LIST, K.VCM_CERT])],
            kickoffs=[("PIA", "create_instructions")],
        ),
        _spec(
            "PTI",
            "Package the instructions",
            "vehicle",
            7,
            {
                K.VEHICLE_PRIVATE_KEY,
                K.ROOT_PRIVATE_KEY,
                K.PDA_PRIVATE_KEY,
                K.PIA_PRIVATE_KEY,
                K.PSA_PRIVATE_KEY,
                K.VCM_PRIVATE_KEY,
                K.DKM_KEY,
                K.IKM_KEY,
            },
            [
                (K.VUUP_URL, "VehicleCloudService"),
                (K.VUUP, "VCM"),
                *_DI,
                *_II,
                (K.PDA_CERT, ROOT),
                (K.PIA_CERT, ROOT),
                (K.VCM_CERT, ROOT),
            ],
            ["VCM", "PDA", "PIA", "CMS", "PSS", "VehicleCloudService"],
            starting=[("PDA", [K.ENC_DOWNLOAD_INSTRUCTIONS, K.DKM]), ("PIA", [K.ENC_INSTALLATION_INSTRUCTIONS, K.IKM])],
            kickoffs=[("VCM", "package")],
            order=[(1, 3), (2, 3), (3, 4), (4, 5), (5, 6), (6, 7)],
        ),
        _spec(
            "NOR",
            "Notify order ready",
            "vehicle",
            4,
            {K.VCM_PRIVATE_KEY},
            [(K.VUUP_URL, "VehicleCloudService"), (K.VCM_CERT, ROOT)],
            ["VCM", "OrderAgent", "OrderCloudService", "CDA"],
            starting=[("VCM", [K.VUUP_URL]), ("CDA", [K.VSO])],
            kickoffs=[("VCM", "notify"), ("CDA", "pull_url")],
        ),
        _spec(
            "DV",
            "Download VUUP",
            "vehicle",
            5,
            {
                K.VUUP_URL,
                K.DOWNLOAD_INSTRUCTIONS,
                K.INSTALLATION_INSTRUCTIONS,
                K.DKM_KEY,
                K.IKM_KEY,
                *_MKM_KEYS,
                *_SKA_KEYS,
                K.VCM_PRIVATE_KEY,
                K.VEHICLE_PRIVATE_KEY,
                K.PDA_PRIVATE_KEY,
                K.PIA_PRIVATE_KEY,
                K.PSA_PRIVATE_KEY,
                K.ROOT_PRIVATE_KEY,
            },
            [
                (K.VUUP_URL, "VehicleCloudService"),
                (K.VUUP, "VCM"),
                *_DI,
                *_II,
                (K.DKM, "PDA"),
                (K.IKM, "PIA"),
                (K.VCM_CERT, ROOT),
                (K.PDA_CERT, ROOT),
                (K.PIA_CERT, ROOT),
                (K.ROOT_CERT, ROOT),
            ],
            ["CDA", "OrderCloudService", "VehicleCloudService", "ConsumerLocalStorage"],
            kickoffs=[("CDA", "fetch_vuup")],
        ),
        _spec(
            "DSF",
            "Download software files",
            "vehicle",
            6,
            {
                K.SOFTWARE,
                K.DOWNLOAD_INSTRUCTIONS,
                K.DKM_KEY,
                K.SOFTWARE_KEY,
                K.VCM_PRIVATE_KEY,
                K.VEHICLE_PRIVATE_KEY,
                K.PDA_PRIVATE_KEY,
                K.SUPPLIER_PRIVATE_KEY,
                K.ROOT_PRIVATE_KEY,
            },
            [
                (K.SOFTWARE, "Supplier"),
                *_DI,
                (K.DKM, "PDA"),
                (K.VCM_CERT, ROOT),
                (K.VEHICLE_CERT, ROOT),
                (K.PDA_CERT, ROOT),
                (K.ROOT_CERT, ROOT),
            ],
            ["CDA", "CSA", "SoftwareRepository", "ConsumerLocalStorage"],
            starting=[("CDA", [K.DKM, K.PDA_CERT, K.VCM_CERT, K.ENC_DOWNLOAD_INSTRUCTIONS])],
            kickoffs=[("CDA", "download")],
        ),
        _spec(
            "DII",
            "Decrypt installation instructions",
            "vehicle",
            4,
            {K.INSTALLATION_INSTRUCTIONS, K.IKM_KEY, *_MKM_KEYS, *_SKA_KEYS, K.PIA_PRIVATE_KEY, K.PSA_PRIVATE_KEY, K.ROOT_PRIVATE_KEY},
            [*_II, (K.IKM, "PIA"), (K.PIA_CERT, ROOT), (K.ROOT_CERT, ROOT)],
            ["CDA", "CIA", "CSA"],
            starting=[("CDA", [K.ENC_INSTALLATION_INSTRUCTIONS, K.IKM, K.PIA_CERT])],
            kickoffs=[("CDA", "forward_instructions")],
        ),
        _spec(
            "SIE",
            "Setup installation environment",
            "vehicle",
            3,
            {K.INSTALLATION_INSTRUCTIONS, *_MKM_KEYS, *_SKA_KEYS, K.PSA_PRIVATE_KEY, K.ROOT_PRIVATE_KEY},
            [*_II, (K.SKA, "PSA"), (K.MKM, "PSA"), (K.PSA_CERT, ROOT), (K.ROOT_CERT, ROOT)],
            ["CIA", "CSA"],
            starting=[("CIA", [K.INSTALLATION_INSTRUCTIONS])],
            kickoffs=[("CIA", "setup_environment")],
        ),
        _spec(
            "STU",
            "Stream update to ECU",
            "vehicle",
            9,
            {
                K.SOFTWARE_KEY,
                K.SECURITY_ACCESS_KEY,
                *_MKM_KEYS,
                K.VEHICLE_PRIVATE_KEY,
                K.SUPPLIER_PRIVATE_KEY,
                K.VCM_PRIVATE_KEY,
                K.ROOT_PRIVATE_KEY,
            },
            [
                (K.SOFTWARE, "Supplier"),
                (K.SKA_SW_ENTRY, "PSA"),
                (K.SKA_SA_ENTRY, "PSA"),
                (K.MKM_SW_KEY, "PSA"),
                (K.MKM_SA_KEY, "PSA"),
                (K.SUPPLIER_CERT, ROOT),
                (K.VCM_CERT, ROOT),
                (K.ROOT_CERT, ROOT),
            ],
            ["CIA", "CSA", "ECU", "ConsumerLocalStorage"],
            starting=[
                ("CIA", [K.SKA, K.MKM]),
                ("CSA", [K.MKM_SA_KEY, K.MKM_SW_KEY, K.VCM_CERT]),
                ("ConsumerLocalStorage", [K.SOFTWARE_ENCASED]),
            ],
            kickoffs=[("CIA", "stream")],
            order=[(1, 2), (2, 3), (3, 4), (5, 6), (6, 7), (7, 8), (4, 9), (8, 9)],
        ),
    )
}

PREPARATION = ("SSF", "USF")
VEHICLE = ("OI", "CSL", "CDI", "GIM", "CII", "PTI", "NOR", "DV", "DSF", "DII", "SIE", "STU")
SUB_PROBLEMS = PREPARATION + VEHICLE

SECRET_KINDS = frozenset(
    {
        K.SOFTWARE,
        K.SOFTWARE_KEY,
        K.SOFTWARE_LIST,
        K.DOWNLOAD_INSTRUCTIONS,
        K.INSTALLATION_INSTRUCTIONS,
        K.DKM_KEY,
        K.IKM_KEY,
        K.MKM_SA_KEY,
        K.MKM_SW_KEY,
        K.SECURITY_ACCESS_KEY,
        K.VUUP_URL,
        K.ROOT_PRIVATE_KEY,
        K.SUPPLIER_PRIVATE_KEY,
        K.VCM_PRIVATE_KEY,
        K.PDA_PRIVATE_KEY,
        K.PIA_PRIVATE_KEY,
        K.PSA_PRIVATE_KEY,
        K.CDA_PRIVATE_KEY,
        K.VEHICLE_PRIVATE_KEY,
    }
)


# ---------------------------------------------------------------------------
# world


@dataclass
class WorldConfig:
    seed: int = 0
    backend: str = "real"
    vehicles: dict = field(default_factory=lambda: {"VIN0001": 1})  # VIN -> onboard version
    software_id: str = "ecu-fw"
    releases: tuple = (2, 3)  # supplier version uploaded in each update round
    round_ttl: int = DEFAULT_TTL
    eta: int = DEFAULT_ETA
    script: list = field(default_factory=list)  # of ScriptAction

    def __post_init__(self) -> None:
        if not self.vehicles:
            raise ValueError("at least one vehicle is needed")
        if not self.releases:
            raise ValueError("at least one release is needed")
        if self.round_ttl <= 0 or self.eta < 1:
            raise ValueError("round_ttl and eta must be positive")


@dataclass
class RoundOutcome:
    round: UpdateRoundId
    statuses: dict  # sub-problem -> status
    completed: bool


class World:
    def __init__(self, config: WorldConfig | None = None):
        cfg = self.config = config or WorldConfig()
        self.rng = random.Random(cfg.seed)
        self.suite = CryptoSuite(make_backend(CryptoConfig(backend=cfg.backend)), self.rng)
        self.clock = LogicalClock()
        self.trace = Trace()
        self.registry: dict[str, MaterialRecord] = {}
        self.secrets: dict[str, dict] = {}
        self.knowledge = Knowledge(self.suite.backend)
        self.adversary = Adversary(self.knowledge, [*cfg.script])
        self.adversary.forger = self.forge
        self.network = Network(self.rng, self.clock, self.adversary, cfg.eta)
        self.entities: dict[str, Entity] = {}
        self.certs: dict[str, Certificate] = {}
        self.failures: dict[UpdateRoundId, list[tuple[str, str]]] = {}
        self.snapshots: list[dict] = []
        self.rounds: list[RoundOutcome] = []
        self._labels: dict[tuple[UpdateRoundId, str], set] = {}
        self._expired: set = set()  # rounds in which some entity hit the expiry
        self._open: dict = {}  # started rounds whose expiry timer has not fired
        self._fired: set = set()
        self._release = 0
        self._setup()

    # -- setup -------------------------------------------------------------
    def _private(self, kind: Kind, value: bytes, origin: str) -> bytes:
        self.add_secret(kind, value, origin=origin)
        return value

    def _cert(self, holder: str, public: bytes, kind: Kind) -> Certificate:
        cert = self.suite.issue_certificate(holder, public, self._root.private)
        self.certs[holder] = cert
        self.register(cert, kind, ROOT, None)
        return cert

    def _setup(self) -> None:
        suite, cfg = self.suite, self.config
        self._root = suite.signing_keypair()
        self.root_pk = self._root.public
        self._private(K.ROOT_PRIVATE_KEY, self._root.private, ROOT)
        self._cert(ROOT, self.root_pk, K.ROOT_CERT)
        pairs = {}
        for role, sk_kind, cert_kind in (
            ("Supplier", K.SUPPLIER_PRIVATE_KEY, K.SUPPLIER_CERT),
            ("VCM", K.VCM_PRIVATE_KEY, K.VCM_CERT),
            ("PDA", K.PDA_PRIVATE_KEY, K.PDA_CERT),
            ("PIA", K.PIA_PRIVATE_KEY, K.PIA_CERT),
            ("PSA", K.PSA_PRIVATE_KEY, K.PSA_CERT),
        ):
            kp = pairs[role] = suite.signing_keypair()
            self._private(sk_kind, kp.private, role)
            self._cert(role, kp.public, cert_kind)

        def add(entity: Entity) -> Entity:
            self.entities[entity.name] = entity
            return entity

        add(Supplier("Supplier", self, pairs["Supplier"].private))
        add(VCM("VCM", self, pairs["VCM"].private))
        add(PSS("PSS", self, {r: pairs[r].private for r in ("VCM", "PDA", "PIA", "PSA")}))
        for role in (
            "ProducerLocalStorage",
            "PSA",
            "Database",
            "OrderCloudService",
            "OrderAgent",
            "PDA",
            "PIA",
            "VehicleCloudService",
            "SoftwareRepository",
        ):
            add(ENTITY_CLASSES[role](role, self))
        cms = add(CMS("CMS", self))
        vin_data = {}
        self._onboard: dict[str, dict] = {}
        for vin, version in sorted(cfg.vehicles.items()):
            vin_data[vin] = VinData(vin, cfg.software_id)
            self._onboard[vin] = {cfg.software_id: int(version)}
            cda = suite.signing_keypair()
            self._private(K.CDA_PRIVATE_KEY, cda.private, "CDA")
            self._cert(f"CDA@{vin}", cda.public, K.CDA_CERT)
            vehicle = suite.encryption_keypair()
            self._private(K.VEHICLE_PRIVATE_KEY, vehicle.private, "Vehicle")
            self._cert(f"Vehicle@{vin}", vehicle.public, K.VEHICLE_CERT)
            sa = suite.new_sym_key(KeyKind.SECURITY_ACCESS)
            self.register(sa, K.SECURITY_ACCESS_KEY, "CMS", None)
            cms.security_access_keys[vin] = sa
            add(CDA(address("CDA", vin), self, cda.private))
            add(ENTITY_CLASSES["ConsumerLocalStorage"](address("ConsumerLocalStorage", vin), self))
            add(CSA(address("CSA", vin), self, vehicle.private))
            add(ENTITY_CLASSES["CIA"](address("CIA", vin), self))
            add(ECU(address("ECU", vin), self, int(version), sa))
        add(VinDatabase("VinDatabase", self, vin_data))
        # public knowledge: certificates, identifiers and the attacker's own keys
        self._adv_keys = suite.signing_keypair()
        for cert in self.certs.values():
            self.knowledge.add(cert)
        for vin in cfg.vehicles:
            self.knowledge.add(vin)
        self.knowledge.add(cfg.software_id)
        self.knowledge.add(self._adv_keys.private)
        self.knowledge.add(self._adv_keys.public)
        self.knowledge.derive_closure()

    # -- registry ------------------------------------------------------------
    def register(self, value: Any, kind: Kind | None, origin: str, round_id: UpdateRoundId | None) -> Any:
        d = digest_of(value)
        if d not in self.registry:
            self.registry[d] = MaterialRecord(d, origin, kind, round_id.key if round_id else None)
            if kind in SECRET_KINDS:
                self.add_secret(kind, value, origin=origin, round_id=round_id, digest=d)
        return value

    def add_secret(self, kind: Kind, value: Any, origin: str = "", round_id=None, digest: str | None = None) -> None:
        d = digest or digest_of(value)
        if d in self.secrets:
            return
        leaves = secret_leaves(value)
        if isinstance(value, bytes):
            leaves = {d}
        self.secrets[d] = {
            "digest": d,
            "kind": kind.value,
            "origin": origin,
            "round": round_id.key if round_id else None,
            "created": self.clock.now,
            "disclosed": None,
            "leaves": sorted(leaves),
        }

    def disclose(self, signed: Signed) -> None:
        """Mark the software handed to the ECU as intentionally public from now on."""
        for value in (signed, signed.payload):
            rec = self.secrets.get(digest_of(value))
            if rec is not None and rec["disclosed"] is None:
                rec["disclosed"] = self.clock.now

    def _register_adversary(self, payload: bytes) -> None:
        try:
            msg = decode(payload, Message)
        except MalformedEncoding:
            return
        for item in msg.items:
            self.register(item, None, ADVERSARY, None)

    # -- entity callbacks -------------------------------------------------------
    def onboard(self, vin: str) -> dict:
        return dict(self._onboard[vin])

    def pending_release(self) -> tuple[str, int]:
        releases = self.config.releases
        return self.config.software_id, int(releases[min(self._release, len(releases) - 1)])

    def emit(self, entity: Entity, ctx, lbl: str, pairs: Iterable) -> None:
        emit_event(self.trace, self.clock, ctx, lbl, pairs)
        self._labels.setdefault((ctx.round, lbl.split(".")[0]), set()).add(lbl)

    def send(self, sender: str, receiver: str, round_id: UpdateRoundId, payload: bytes) -> None:
        self.network.send(sender, receiver, round_id, payload)

    def _halt(self, entity: Entity, round_id: UpdateRoundId, mode: str, reason: str) -> None:
        if round_id in entity.closed:
            return
        entity.halt(round_id, mode)
        self.trace.append(
            {
                "record": "halt",
                "time": self.clock.now,
                "round": round_id.key,
                "entity": entity.name,
                "mode": mode,
                "reason": reason,
            }
        )

    def validation_failed(self, entity: Entity, round_id: UpdateRoundId, reason: str) -> None:
        log.info("%s stops in round %s: %s", entity.name, round_id.key, reason)
        self.failures.setdefault(round_id, []).append((entity.name, reason))
        mode = "timely" if self.clock.now < round_id.expiry else "late"
        self._halt(entity, round_id, mode, reason)

    def entity_expired(self, entity: Entity, round_id: UpdateRoundId) -> None:
        self._expired.add(round_id)
        self._halt(entity, round_id, "late", "round expired")

    def ecu_record(self, entity, round_id, action, result, reason, installed_version) -> None:
        self.trace.append(
            {
                "record": "ecu",
                "time": self.clock.now,
                "round": round_id.key,
                "entity": entity.name,
                "action": action,
                "result": result,
                "reason": reason,
                "installed_version": installed_version,
            }
        )

    def forge(self, what: str, adv: Adversary, env) -> bytes:
        """Attacker-built payloads for scripts; only the attacker's own keys are used."""
        rng = self.rng
        if what == "adv-software":
            sw = Software(10_000, rng.randbytes(48))
            return encode(Message("17.17", (self.suite.sign(sw, self._adv_keys.private),)))
        if what == "unsigned-software":
            return encode(Message("17.17", (Signed(Software(10_000, rng.randbytes(48)), b""),)))
        if what == "adv-response":
            return encode(Message("17.8", (EcuResponse(rng.randbytes(32)),)))
        if what == "adv-challenge":
            return encode(Message("17.3", (EcuChallenge(rng.randbytes(16)),)))
        raise ScriptError(f"unknown forgery {what!r}")

    # -- orchestration ----------------------------------------------------
    def entity(self, role: str, round_id: UpdateRoundId) -> Entity:
        return self.entities[address(role, round_id.vin)]

    def drain(self, limit: int = 200_000) -> int:
        n = 0
        while n < limit:
            due = self.network.schedule.next_time()
            for rid in [r for r in self._open if due is not None and due > r.expiry]:
                self._fire_expiry(rid)
            env = self.network.step()
            if env is None:
                return n
            n += 1
            if env.inject_origin is Origin.ADVERSARY:
                self._register_adversary(env.payload)
            target = self.entities.get(env.receiver)
            if target is not None:
                target.receive(env)
        raise RuntimeError("delivery limit reached; the run does not quiesce")

    def labels_seen(self, round_id: UpdateRoundId, sp: str) -> set:
        return set(self._labels.get((round_id, sp), ()))

    def run_segment(self, sp: str, round_id: UpdateRoundId) -> str:
        spec = SPECS[sp]
        try:
            for role, kinds in spec.starting:
                pass_context(self.entity(role, round_id).context(round_id), kinds)
        except MissingStartingMaterial as exc:
            log.info("segment %s cannot start: %s", sp, exc)
            return "failed"
        for role, task in spec.kickoffs:
            self.entity(role, round_id).kickoff(task, round_id)
            self.drain()
        if self.failures.get(round_id):
            return "failed"
        if self.labels_seen(round_id, sp) >= set(spec.labels):
            return "completed"
        if self.clock.now >= round_id.expiry or round_id in self._expired:
            return "expired"
        return "stalled"

    def snapshot(self, sp: str, round_id: UpdateRoundId | None) -> None:
        self.snapshots.append(
            {
                "sub_problem": sp,
                "round": round_id.key if round_id else None,
                "time": self.clock.now,
                "digests": self.knowledge.digests(),
            }
        )

    def start_round(self, vin: str | None, sps: Iterable[str]) -> UpdateRoundId:
        rid = new_round(vin, self.clock.now, self.config.round_ttl, self.rng)
        self.register(rid.tag(), K.ROUND_TAG, "Round", rid)
        self._open[rid] = None
        self.trace.append(
            {
                "record": "round",
                "round": rid.key,
                "vin": vin,
                "expiry": rid.expiry,
                "start": self.clock.now,
                "sub_problems": list(sps),
            }
        )
        return rid

    def run_round(self, vin: str | None, sps: Iterable[str], stop_before: str | None = None) -> RoundOutcome:
        sps = list(sps)
        rid = self.start_round(vin, sps)
        statuses = {}
        for sp in sps:
            if sp == stop_before:
                return RoundOutcome(rid, statuses, False)
            statuses[sp] = self._segment(sp, rid)
            if statuses[sp] != "completed":
                break
        return self.finish_round(rid, sps, statuses)

    def _segment(self, sp: str, rid: UpdateRoundId) -> str:
        start = self.clock.now
        status = self.run_segment(sp, rid)
        self.trace.append(
            {"record": "segment", "sub_problem": sp, "round": rid.key, "status": status, "start": start, "end": self.clock.now}
        )
        self.snapshot(sp, rid)
        return status

    def resume_round(self, rid: UpdateRoundId, sps: list[str], statuses: dict) -> RoundOutcome:
        for sp in sps:
            if sp in statuses:
                continue
            statuses[sp] = self._segment(sp, rid)
            if statuses[sp] != "completed":
                break
        return self.finish_round(rid, sps, statuses)

    def finish_round(self, rid: UpdateRoundId, sps: list[str], statuses: dict) -> RoundOutcome:
        completed = len(statuses) == len(sps) and all(s == "completed" for s in statuses.values())
        participants = [e for e in self.entities.values() if rid in e.contexts]
        if completed and self.clock.now < rid.expiry:
            for e in participants:
                self._halt(e, rid, "timely", "round complete")
        else:
            self._fire_expiry(rid)
            self.drain()  # stragglers reach closed contexts and are ignored
        self._open.pop(rid, None)
        outcome = RoundOutcome(rid, statuses, completed)
        self.rounds.append(outcome)
        return outcome

    def _fire_expiry(self, rid: UpdateRoundId) -> None:
        """The expiry timer: every participant halts at exactly t_e."""
        if rid in self._fired:
            return
        self._fired.add(rid)
        self._open.pop(rid, None)
        self._expired.add(rid)
        self.clock.advance_to(rid.expiry)
        self.trace.append({"record": "expire", "round": rid.key, "time": self.clock.now})
        for e in self.entities.values():
            if rid in e.contexts:
                self._halt(e, rid, "late", "round expired")

    def run_stages(self, stages: Iterable[str]) -> list[RoundOutcome]:
        """``preparation`` uploads the next release; ``vehicle`` updates every VIN once."""
        out = []
        prepared = 0
        for stage in stages:
            if stage == "preparation":
                self._release = prepared
                prepared += 1
                out.append(self.run_round(None, PREPARATION))
            elif stage == "vehicle":
                for vin in sorted(self.config.vehicles):
                    out.append(self.run_round(vin, VEHICLE))
            else:
                raise ValueError(f"unknown stage {stage!r}")
        self.snapshot("final", None)
        return out

    def run_e2e(self) -> list[RoundOutcome]:
        """One preparation and one vehicle stage per configured release."""
        return self.run_stages(["preparation", "vehicle"] * len(self.config.releases))

    # -- results -----------------------------------------------------------
    def counters(self) -> dict:
        ents = self.entities.values()
        return {
            "task_deliveries": sum(e.task_deliveries for e in ents),
            "duplicates": sum(e.duplicates for e in ents),
            "ignored": sum(e.ignored for e in ents),
            "delivered": self.network.delivered,
        }

    def csa_key_leaks(self) -> list[str]:
        """Unwrapped CSA keys found in anything a vehicle-side entity sent."""
        keys = [k for e in self.entities.values() if isinstance(e, CSA) for k in e.associated]
        sent = [p for sender, p in self.network.sent_payloads if "@" in sender]
        return scan_key_containment(sent, keys)

    def installed_versions(self) -> dict:
        return {e.vin: e.state.installed_version for e in self.entities.values() if isinstance(e, ECU)}

    def artifacts(self) -> dict:
        """JSON-ready records consumed by the verifier."""
        return {
            "trace": list(self.trace.records),
            "materials": [r.to_json() for r in self.registry.values()],
            "secrets": list(self.secrets.values()),
            "knowledge": {"snapshots": list(self.snapshots)},
            "attack_log": list(self.adversary.log),
        }


def dump_jsonl(path: Path, records: Iterable[dict]) -> None:
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def load_jsonl(path: Path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def write_artifacts(world: World, out_dir: Path, verdicts: list[dict]) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    art = world.artifacts()
    dump_jsonl(out_dir / "trace.jsonl", art["trace"])
    dump_jsonl(out_dir / "materials.jsonl", art["materials"])
    dump_jsonl(out_dir / "secrets.jsonl", art["secrets"])
    dump_jsonl(out_dir / "attack_log.jsonl", art["attack_log"])
    dump_jsonl(out_dir / "verdicts.jsonl", verdicts)
    with open(out_dir / "knowledge.json", "w") as fh:
        json.dump(art["knowledge"], fh, sort_keys=True)
    summary = {
        "counters": world.counters(),
        "installed_versions": world.installed_versions(),
        "rounds": [
            {"round": r.round.key, "vin": r.round.vin, "completed": r.completed, "statuses": r.statuses}
            for r in world.rounds
        ],
        "csa_key_leaks": world.csa_key_leaks(),
    }
    with open(out_dir / "summary.json", "w") as fh:
        json.dump(summary, fh, sort_keys=True, indent=2)
