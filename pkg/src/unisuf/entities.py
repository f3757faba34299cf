"""Entity state machines.

Every participant follows the initiator/listener pattern: initiators run a
task invoked by the orchestrator (``kickoff``), listeners react to delivered
envelopes.  Handlers are looked up by table step (``on_17_3`` handles step
17.3) and run against the per-round context of the receiving entity.

Sends are buffered while a handler runs and only released when it returns
normally, so a :class:`ValidationFailure` discards the handler's pending
messages and ends the entity's participation in the round.
"""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass
from typing import TYPE_CHECKING, Any, Callable, Iterable

from .codec import MalformedEncoding, decode, encode
from .crypto import (
    Certificate,
    CipherText,
    CryptoError,
    CryptoSuite,
    KeyKind,
    Signed,
    SymKey,
)
from .materials import (
    KEY_KIND_FOR,
    POLICY_DOWNLOAD,
    POLICY_INSTALLATION,
    POLICY_SECURITY_ACCESS,
    POLICY_SOFTWARE,
    CertificatePackage,
    DownloadInstructions,
    EcuChallenge,
    EcuResponse,
    EcuStatus,
    Flag,
    HashMessage,
    InstallationInstructions,
    InstallationPlan,
    KeyManifest,
    Kind,
    MasterKeyManifest,
    MaterialError,
    Message,
    SecureKeyArray,
    SignatureMessage,
    SkaKeys,
    Software,
    SoftwareEncased,
    SoftwareList,
    SoftwareUrl,
    SoftwareVersions,
    VinData,
    Vso,
    VuupUrl,
    Vuup,
    assemble_encased,
    build_key_manifest,
    build_mkm,
    build_ska,
    check_vuup_parts,
    create_software_list,
    encrypt_software,
    onboard_versions,
    open_encased_signed,
    open_ska_entry,
    request,
    success,
    unwrap_key_manifest,
    validate_vuup,
    verify_encased_outer,
)
from .rounds import (
    Acceptance,
    DedupLog,
    Liveness,
    MissingStartingMaterial,
    RoundContext,
    RoundExpired,
    UpdateRoundId,
    check_expiry,
)

if TYPE_CHECKING:  # pragma: no cover
    from .protocol import World

log = logging.getLogger(__name__)


class ValidationFailure(Exception):
    """A check failed; the entity stops participating in the round."""


class UnexpectedMessage(Exception):
    """Message does not fit the entity's state; it is ignored."""


class PolicyViolation(ValidationFailure):
    """A CSA key was requested for an operation its policy does not name."""


PRODUCER_ROLES = (
    "ProducerLocalStorage",
    "VCM",
    "PSS",
    "CMS",
    "PSA",
    "Database",
    "OrderCloudService",
    "OrderAgent",
    "PDA",
    "PIA",
    "VinDatabase",
    "VehicleCloudService",
)
CONSUMER_ROLES = ("CDA", "CSA", "CIA", "ConsumerLocalStorage")
VEHICLE_ROLES = CONSUMER_ROLES + ("ECU",)
ALL_ROLES = ("Supplier",) + PRODUCER_ROLES + ("SoftwareRepository",) + VEHICLE_ROLES


def address(role: str, vin: str | None) -> str:
    if role in VEHICLE_ROLES:
        if vin is None:
            raise ValueError(f"{role} needs a VIN")
        return f"{role}@{vin}"
    return role


def label(sp: str, n: int) -> str:
    return f"{sp}.l{n}"


def _expect(items: tuple, *types: type) -> tuple:
    if len(items) != len(types) or not all(isinstance(i, t) for i, t in zip(items, types)):
        raise UnexpectedMessage(f"expected {[t.__name__ for t in types]}")
    return items


_FAILURES = (CryptoError, MaterialError, MalformedEncoding, MissingStartingMaterial)


class Entity:
    role = "Entity"

    def __init__(self, name: str, world: "World"):
        self.name = name
        self.world = world
        self.vin = name.split("@", 1)[1] if "@" in name else None
        self.contexts: dict[UpdateRoundId, RoundContext] = {}
        self.closed: dict[UpdateRoundId, str] = {}
        self.dedup = DedupLog()
        self.task_deliveries = 0
        self.duplicates = 0
        self.ignored = 0
        self._outbox: list[tuple[str, UpdateRoundId, bytes]] = []

    def __repr__(self) -> str:
        return f"<{type(self).__name__} {self.name}>"

    # -- plumbing -------------------------------------------------------
    def context(self, round_id: UpdateRoundId) -> RoundContext:
        ctx = self.contexts.get(round_id)
        if ctx is None:
            ctx = self.contexts[round_id] = RoundContext(round_id, self.name)
        return ctx

    def suite(self) -> CryptoSuite:
        return self.world.suite

    def send(self, ctx: RoundContext, role: str, step: str, *items: Any) -> None:
        receiver = address(role, ctx.round.vin or self.vin)
        self._outbox.append((receiver, ctx.round, encode(Message(step, tuple(items)))))

    def make(self, ctx: RoundContext, kind: Kind, value: Any) -> Any:
        return self.world.register(value, kind, self.role, ctx.round)

    def emit(self, ctx: RoundContext, lbl: str, *pairs: tuple[Kind, Any]) -> None:
        self.world.emit(self, ctx, lbl, pairs)

    def _run(self, round_id: UpdateRoundId, fn: Callable[[RoundContext], None]) -> bool:
        ctx = self.context(round_id)
        self._outbox = []
        try:
            fn(ctx)
        except UnexpectedMessage as exc:
            self.ignored += 1
            log.debug("%s ignored message: %s", self.name, exc)
            self._outbox = []
            return False
        except RoundExpired:
            self._outbox = []
            self.world.entity_expired(self, round_id)
            return False
        except (ValidationFailure, *_FAILURES) as exc:
            self._outbox = []
            self.world.validation_failed(self, round_id, f"{type(exc).__name__}: {exc}")
            return False
        out, self._outbox = self._outbox, []
        for receiver, rid, payload in out:
            self.world.send(self.name, receiver, rid, payload)
        return True

    def kickoff(self, task: str, round_id: UpdateRoundId) -> bool:
        if round_id in self.closed:
            return False
        return self._run(round_id, getattr(self, task))

    def receive(self, env: Any) -> bool:
        """Deliver one envelope; returns True when a task handled it."""
        if env.round in self.closed:
            self.ignored += 1
            return False
        if check_expiry(env.round, self.world.clock.now) is Liveness.EXPIRED:
            self.ignored += 1
            self.world.entity_expired(self, env.round)
            return False
        if self.dedup.accept(env.round, env.payload) is Acceptance.DUPLICATE:
            self.duplicates += 1
            return False
        try:
            msg = decode(env.payload, Message)
        except MalformedEncoding:
            self.ignored += 1
            return False
        handler = getattr(self, "on_" + str(msg.step).replace(".", "_"), None)
        if handler is None:
            self.ignored += 1
            return False
        self.task_deliveries += 1
        return self._run(env.round, lambda ctx: handler(ctx, msg.items, env))

    def halt(self, round_id: UpdateRoundId, mode: str) -> None:
        self.closed.setdefault(round_id, mode)

    # -- shared checks --------------------------------------------------
    def cert_key(self, cert: Any, holder: str) -> bytes:
        if not isinstance(cert, Certificate) or cert.holder_id != holder:
            raise ValidationFailure(f"expected certificate of {holder}")
        return self.suite().validate_certificate(cert, self.world.root_pk)

    def verified(self, signed: Any, holder: str, expected: type | None = None, cert: Any = None) -> Any:
        cert = cert if cert is not None else self.world.certs[holder]
        payload = self.suite().verify_signed(signed, self.cert_key(cert, holder))
        if expected is not None and not isinstance(payload, expected):
            raise ValidationFailure(f"signed payload is not {expected.__name__}")
        return payload

    def assemble(self, payload: Any, sig: Any, holder: str) -> Signed:
        _expect((sig,), SignatureMessage)
        signed = CryptoSuite.assemble_signed(payload, sig.signature)
        self.verified(signed, holder)
        return signed

    def request_signature(self, ctx: RoundContext, step: str, purpose: str, payload: Any) -> None:
        hm = self.make(ctx, Kind.DIGEST, HashMessage(purpose, self.suite().hash_of(payload)))
        self.send(ctx, "PSS", step, hm)


# ---------------------------------------------------------------------------
# Preparation stage


class Supplier(Entity):
    role = "Supplier"

    def __init__(self, name, world, private_key: bytes):
        super().__init__(name, world)
        self._sk = private_key

    def upload(self, ctx: RoundContext) -> None:
        sw_id, version = self.world.pending_release()
        sw = Software(version, self.suite().rng.randbytes(48))
        signed = self.make(ctx, Kind.SOFTWARE, self.suite().sign(sw, self._sk))
        self.world.add_secret(Kind.SOFTWARE, sw)
        self.send(ctx, "ProducerLocalStorage", "1.2", signed, sw_id)


class ProducerLocalStorage(Entity):
    role = "ProducerLocalStorage"

    def on_1_2(self, ctx, items, env):
        signed, sw_id = _expect(items, Signed, str)
        ctx.put(Kind.SOFTWARE, signed)
        ctx.materials["sw_id"] = sw_id
        self.emit(ctx, label("SSF", 1), (Kind.SOFTWARE, signed))

    def on_2_1(self, ctx, items, env):
        if not ctx.has(Kind.SOFTWARE):
            raise UnexpectedMessage("nothing stored yet")
        self.send(ctx, "VCM", "2.2", ctx.get(Kind.SOFTWARE), ctx.materials["sw_id"])


class VCM(Entity):
    role = "VCM"

    def __init__(self, name, world, private_key: bytes):
        super().__init__(name, world)
        self._sk = private_key

    # secure software files
    def fetch_software(self, ctx):
        self.send(ctx, "ProducerLocalStorage", "2.1", request("Software"))

    def on_2_2(self, ctx, items, env):
        signed, sw_id = _expect(items, Signed, str)
        self.verified(signed, "Supplier", Software)
        ctx.put(Kind.SOFTWARE, signed)
        ctx.materials["sw_id"] = sw_id
        self.send(ctx, "PSA", "3.1", request("Software_Key"))

    def on_3_2(self, ctx, items, env):
        (key,) = _expect(items, SymKey)
        if key.kind is not KeyKind.SOFTWARE:
            raise ValidationFailure("not a Software key")
        ctx.put(Kind.SOFTWARE_KEY, key)
        supplier_pk = self.cert_key(self.world.certs["Supplier"], "Supplier")
        ct = encrypt_software(self.suite(), ctx.get(Kind.SOFTWARE), key, supplier_pk)
        ctx.materials["ct"] = ct
        hm = self.make(ctx, Kind.SOFTWARE_HASH, HashMessage("software", self.suite().hash_of(ct)))
        ctx.materials["hm"] = hm
        self.emit(ctx, label("SSF", 3), (Kind.SOFTWARE_HASH, hm))
        self.send(ctx, "PSS", "4.2", hm)

    def on_4_4(self, ctx, items, env):
        (sig,) = _expect(items, SignatureMessage)
        enc = assemble_encased(ctx.materials["ct"], sig.signature)
        verify_encased_outer(self.suite(), enc, self.cert_key(self.world.certs["VCM"], "VCM"))
        self.make(ctx, Kind.SOFTWARE_ENCASED, enc)
        ctx.put(Kind.SOFTWARE_ENCASED, enc)
        self.emit(ctx, label("SSF", 5), (Kind.SIGNED_SOFTWARE_HASH, sig), (Kind.SOFTWARE_ENCASED, enc))

    # upload software files
    def upload(self, ctx):
        sw = ctx.get(Kind.SOFTWARE).payload
        self.send(ctx, "SoftwareRepository", "5.1", ctx.get(Kind.SOFTWARE_ENCASED), ctx.materials["sw_id"], sw.version)

    def on_5_2(self, ctx, items, env):
        (url,) = _expect(items, SoftwareUrl)
        ctx.put(Kind.SOFTWARE_URL, url)
        self.send(ctx, "VinDatabase", "5.3", url)

    def on_5_4(self, ctx, items, env):
        _expect(items, Flag)
        self.send(ctx, "CMS", "6.1", ctx.get(Kind.SOFTWARE_KEY), ctx.get(Kind.SOFTWARE_URL))

    def on_6_2(self, ctx, items, env):
        _expect(items, Flag)
        self.emit(ctx, label("USF", 4), (Kind.SOFTWARE_KEY, ctx.get(Kind.SOFTWARE_KEY)))

    # order initiation
    def on_2_4(self, ctx, items, env):
        (svso,) = _expect(items, Signed)
        vso = self.verified(svso, f"CDA@{ctx.round.vin}", Vso)
        if vso.vin != ctx.round.vin or vso.round != ctx.round.tag():
            raise ValidationFailure("VSO is bound to another vehicle or round")
        ctx.put(Kind.VSO, svso)
        self.emit(ctx, label("OI", 5), (Kind.VSO, svso))

    # create software list
    def create_list(self, ctx):
        ctx.get(Kind.VSO)
        self.send(ctx, "VinDatabase", "3.2", ctx.round.vin)

    def on_3_3(self, ctx, items, env):
        vin_data, versions = _expect(items, VinData, SoftwareVersions)
        svso = ctx.get(Kind.VSO)
        self.emit(
            ctx,
            label("CSL", 1),
            (Kind.VSO, svso),
            (Kind.VIN_DATA, vin_data),
            (Kind.SOFTWARE_VERSIONS, versions),
        )
        sl = create_software_list(svso.payload, vin_data, versions, ctx.round.tag())
        if not sl.entries:
            raise ValidationFailure("no newer software for this vehicle")
        signed = self.make(ctx, Kind.SOFTWARE_LIST, self.suite().sign(sl, self._sk))
        ctx.put(Kind.SOFTWARE_LIST, signed)
        ctx.put(Kind.VIN_DATA, vin_data)
        self.emit(ctx, label("CSL", 2), (Kind.SOFTWARE_LIST, signed))
        ctx.materials["acks"] = set()
        for n, role in ((3, "PDA"), (4, "PIA"), (5, "PSA")):
            self.emit(ctx, label("CSL", n), (Kind.SOFTWARE_LIST, signed))
            self.send(ctx, role, "3.6", signed)

    def on_3_7(self, ctx, items, env):
        (flag,) = _expect(items, Flag)
        acks = ctx.materials.get("acks")
        if acks is None or flag.detail not in ("PDA", "PIA", "PSA"):
            raise UnexpectedMessage("unexpected acknowledgement")
        acks.add(flag.detail)
        if acks == {"PDA", "PIA", "PSA"}:
            self.emit(ctx, label("CSL", 6), (Kind.SOFTWARE_LIST, ctx.get(Kind.SOFTWARE_LIST)))

    # package the instructions
    def package(self, ctx):
        ctx.materials["parts"] = {}
        self.send(ctx, "PDA", "8.1", request("Download_Instructions"), request("DKM"), request("PDA_Cert"))
        self.send(ctx, "PIA", "8.1", request("Installation_Instructions"), request("IKM"), request("PIA_Cert"))

    def on_8_2(self, ctx, items, env):
        enc, manifest, cert = _expect(items, Signed, Signed, Certificate)
        parts = ctx.materials.get("parts")
        if parts is None:
            raise UnexpectedMessage("not packaging")
        sender = env.sender.split("@")[0]
        if sender == "PDA":
            parts["download"] = (enc, manifest)
            self.emit(ctx, label("PTI", 1), (Kind.ENC_DOWNLOAD_INSTRUCTIONS, enc), (Kind.DKM, manifest))
        elif sender == "PIA":
            parts["installation"] = (enc, manifest)
            self.emit(ctx, label("PTI", 2), (Kind.ENC_INSTALLATION_INSTRUCTIONS, enc), (Kind.IKM, manifest))
        else:
            raise UnexpectedMessage("parts from unknown sender")
        if "download" in parts and "installation" in parts and "requested" not in parts:
            parts["requested"] = True
            self.send(ctx, "CMS", "8.3", request("PDA_Cert"), request("PIA_Cert"))

    def on_8_4(self, ctx, items, env):
        pda_cert, pia_cert = _expect(items, Certificate, Certificate)
        parts = ctx.materials.get("parts") or {}
        if "requested" not in parts:
            raise UnexpectedMessage("certificates not requested")
        self.emit(
            ctx,
            label("PTI", 3),
            (Kind.PDA_CERT, pda_cert),
            (Kind.PIA_CERT, pia_cert),
            (Kind.ROUND_TAG, ctx.round.tag()),
        )
        di, dkm = parts["download"]
        ii, ikm = parts["installation"]
        try:
            content = check_vuup_parts(
                self.suite(), CertificatePackage(pda_cert, pia_cert), di, dkm, ii, ikm, self.world.root_pk
            )
        except MaterialError as exc:
            raise ValidationFailure(str(exc)) from exc
        self.make(ctx, Kind.VUUP_CONTENT, content)
        ctx.put(Kind.VUUP_CONTENT, content)
        self.emit(ctx, label("PTI", 4), (Kind.VUUP_CONTENT, content))
        self.request_signature(ctx, "8.10", "vuup-content", content)

    def on_8_12(self, ctx, items, env):
        content = ctx.get(Kind.VUUP_CONTENT)
        signed = self.assemble(content, items[0] if items else None, "VCM")
        vuup = self.make(ctx, Kind.VUUP, Vuup(self.world.certs["VCM"], signed))
        ctx.put(Kind.VUUP, vuup)
        self.emit(ctx, label("PTI", 6), (Kind.VUUP, vuup))
        self.send(ctx, "VehicleCloudService", "8.13", vuup)

    def on_8_14(self, ctx, items, env):
        _, url = _expect(items, Flag, VuupUrl)
        if not ctx.has(Kind.VUUP) or url.vin != ctx.round.vin:
            raise UnexpectedMessage("no VUUP uploaded for this vehicle")
        ctx.put(Kind.VUUP_URL, url)
        self.emit(ctx, label("PTI", 7), (Kind.VUUP_URL, url))

    # notify order ready
    def notify(self, ctx):
        url = ctx.get(Kind.VUUP_URL)
        self.emit(ctx, label("NOR", 1), (Kind.VUUP_URL, url))
        self.send(ctx, "OrderAgent", "9", self.suite().sign(url, self._sk))


class PSS(Entity):
    """Producer Signing Service: signs hashes on behalf of VCM, PDA, PIA and PSA."""

    role = "PSS"

    # step -> (sub-problem, labels emitted, reply step)
    STEPS = {
        "4.2": ("SSF", (4,), "4.4"),
        "4.12": ("CDI", (7, 8), "4.13"),
        "4.15": ("CDI", (9, 10), "4.16"),
        "6.10": ("GIM", (6, 7), "6.11"),
        "6.13": ("GIM", (8, 9), "6.14"),
        "7.13": ("CII", (8, 9), "7.14"),
        "7.16": ("CII", (10, 11), "7.17"),
        "8.10": ("PTI", (5,), "8.12"),
    }

    def __init__(self, name, world, keys: dict[str, bytes]):
        super().__init__(name, world)
        self._keys = dict(keys)

    def __getattr__(self, attr: str):
        if attr.startswith("on_"):
            step = attr[3:].replace("_", ".")
            if step in PSS.STEPS:
                return lambda ctx, items, env: self._sign(step, ctx, items, env)
        raise AttributeError(attr)

    def _sign(self, step, ctx, items, env):
        (hm,) = _expect(items, HashMessage)
        sender = env.sender.split("@")[0]
        sk = self._keys.get(sender)
        if sk is None:
            raise ValidationFailure(f"no signing key on behalf of {sender}")
        sp, labels, reply = PSS.STEPS[step]
        kind_in = Kind.SOFTWARE_HASH if step == "4.2" else Kind.DIGEST
        kind_out = Kind.SIGNED_SOFTWARE_HASH if step == "4.2" else Kind.SIGNATURE
        sig = self.make(ctx, kind_out, SignatureMessage(hm.purpose, self.suite().sign_hash(hm.digest, sk)))
        for n in labels:
            self.emit(ctx, label(sp, n), (kind_in, hm), (kind_out, sig))
        self.send(ctx, sender, reply, sig)


class CMS(Entity):
    """Certificate and key store."""

    role = "CMS"

    def __init__(self, name, world):
        super().__init__(name, world)
        self.software_keys: dict[tuple[str, int], SymKey] = {}
        self.security_access_keys: dict[str, SymKey] = {}

    def on_6_1(self, ctx, items, env):
        key, url = _expect(items, SymKey, SoftwareUrl)
        self.software_keys[(url.sw_id, url.version)] = key
        self.emit(ctx, label("USF", 3), (Kind.SOFTWARE_KEY, key))
        self.send(ctx, "VCM", "6.2", success("Software_Key", url.url))

    def _vehicle_cert(self, ctx) -> Certificate:
        cert = self.world.certs.get(f"Vehicle@{ctx.round.vin}")
        if cert is None:
            raise ValidationFailure("unknown vehicle")
        return cert

    def on_4_6(self, ctx, items, env):
        _expect(items, Flag)
        cert = self._vehicle_cert(ctx)
        self.emit(ctx, label("CDI", 5), (Kind.VEHICLE_CERT, cert), (Kind.ROUND_TAG, ctx.round.tag()))
        self.send(ctx, "PDA", "4.7", cert)

    def on_6_2(self, ctx, items, env):
        (signed,) = _expect(items, Signed)
        sl = self.verified(signed, "VCM", SoftwareList)
        sa = self.security_access_keys.get(ctx.round.vin)
        sw = []
        for entry in sl.entries:
            key = self.software_keys.get((entry.sw_id, entry.version))
            if key is None:
                raise ValidationFailure(f"no key for {entry.sw_id} v{entry.version}")
            sw.append(key)
        if sa is None:
            raise ValidationFailure("no SecurityAccess key for this vehicle")
        cert = self._vehicle_cert(ctx)
        keys = self.make(ctx, Kind.SKA_KEYS, SkaKeys((sa,), tuple(sw)))
        self.emit(ctx, label("GIM", 2), (Kind.VEHICLE_CERT, cert), (Kind.SKA_KEYS, keys))
        self.send(ctx, "PSA", "6.3", cert, keys)

    def on_7_7(self, ctx, items, env):
        _expect(items, Flag)
        cert = self._vehicle_cert(ctx)
        self.emit(ctx, label("CII", 6), (Kind.VEHICLE_CERT, cert), (Kind.ROUND_TAG, ctx.round.tag()))
        self.send(ctx, "PIA", "7.8", cert)

    def on_8_3(self, ctx, items, env):
        _expect(items, Flag, Flag)
        self.send(ctx, "VCM", "8.4", self.world.certs["PDA"], self.world.certs["PIA"])


class PSA(Entity):
    """Producer Security Agent: generates session and master keys."""

    role = "PSA"

    def _new_key(self, ctx, kind: KeyKind) -> SymKey:
        return self.make(ctx, KEY_KIND_FOR[kind], self.suite().new_sym_key(kind))

    def on_3_1(self, ctx, items, env):
        _expect(items, Flag)
        key = self._new_key(ctx, KeyKind.SOFTWARE)
        self.emit(ctx, label("SSF", 2), (Kind.SOFTWARE_KEY, key))
        self.send(ctx, "VCM", "3.2", key)

    def on_3_6(self, ctx, items, env):
        (signed,) = _expect(items, Signed)
        ctx.put(Kind.SOFTWARE_LIST, signed)
        ctx.put(Kind.VCM_CERT, self.world.certs["VCM"])
        self.send(ctx, "VCM", "3.7", success("Software_List", "PSA"))

    def on_4_3(self, ctx, items, env):
        _expect(items, Flag)
        key = self._new_key(ctx, KeyKind.DKM)
        self.emit(ctx, label("CDI", 3), (Kind.DKM_KEY, key))
        self.emit(ctx, label("CDI", 4), (Kind.DKM_KEY, key))
        self.send(ctx, env.sender, "4.4", key)

    # generate installation materials
    def generate_materials(self, ctx):
        signed = ctx.get(Kind.SOFTWARE_LIST)
        self.verified(signed, "VCM", SoftwareList, ctx.get(Kind.VCM_CERT))
        self.emit(ctx, label("GIM", 1), (Kind.SOFTWARE_LIST, signed))
        self.send(ctx, "CMS", "6.2", signed)

    def on_6_3(self, ctx, items, env):
        cert, keys = _expect(items, Certificate, SkaKeys)
        vehicle_pk = self.cert_key(cert, f"Vehicle@{ctx.round.vin}")
        mkm_sa = self._new_key(ctx, KeyKind.MKM_SECURITY_ACCESS)
        mkm_sw = self._new_key(ctx, KeyKind.MKM_SOFTWARE)
        ctx.put(Kind.MKM_SA_KEY, mkm_sa)
        ctx.put(Kind.MKM_SW_KEY, mkm_sw)
        self.emit(ctx, label("GIM", 3), (Kind.MKM_SA_KEY, mkm_sa), (Kind.MKM_SW_KEY, mkm_sw))
        mkm = self.make(ctx, Kind.MKM, build_mkm(self.suite(), mkm_sa, mkm_sw, vehicle_pk))
        self.emit(ctx, label("GIM", 4), (Kind.MKM, mkm))
        ska = self.make(ctx, Kind.SKA, build_ska(self.suite(), keys.security_access, keys.software, mkm_sa, mkm_sw))
        for entry in ska.security_access_entries:
            self.make(ctx, Kind.SKA_SA_ENTRY, entry)
        for entry in ska.software_entries:
            self.make(ctx, Kind.SKA_SW_ENTRY, entry)
        ctx.materials["mkm"], ctx.materials["ska"] = mkm, ska
        self.emit(ctx, label("GIM", 5), (Kind.SKA, ska))
        self.request_signature(ctx, "6.10", "ska", ska)

    def on_6_11(self, ctx, items, env):
        signed = self.assemble(ctx.materials["ska"], items[0] if items else None, "PSA")
        ctx.put(Kind.SKA, self.make(ctx, Kind.SKA, signed))
        self.request_signature(ctx, "6.13", "mkm", ctx.materials["mkm"])

    def on_6_14(self, ctx, items, env):
        signed = self.assemble(ctx.materials["mkm"], items[0] if items else None, "PSA")
        ctx.put(Kind.MKM, self.make(ctx, Kind.MKM, signed))

    # create installation instructions
    def on_7_1(self, ctx, items, env):
        _expect(items, Flag, Flag)
        mkm, ska, cert = ctx.get(Kind.MKM), ctx.get(Kind.SKA), self.world.certs["PSA"]
        self.emit(ctx, label("CII", 3), (Kind.MKM, mkm), (Kind.SKA, ska), (Kind.PSA_CERT, cert))
        self.send(ctx, "PIA", "7.2", mkm, ska, cert)

    def on_7_4(self, ctx, items, env):
        _expect(items, Flag)
        key = self._new_key(ctx, KeyKind.IKM)
        self.emit(ctx, label("CII", 4), (Kind.IKM_KEY, key))
        self.emit(ctx, label("CII", 5), (Kind.IKM_KEY, key))
        self.send(ctx, "PIA", "7.5", key)


class _InstructionAgent(Entity):
    """Shared behaviour of PDA and PIA."""

    def on_3_6(self, ctx, items, env):
        (signed,) = _expect(items, Signed)
        ctx.put(Kind.SOFTWARE_LIST, signed)
        ctx.put(Kind.VCM_CERT, self.world.certs["VCM"])
        self.send(ctx, "VCM", "3.7", success("Software_List", self.role))

    def verify_list(self, ctx, sp: str) -> SoftwareList:
        signed = ctx.get(Kind.SOFTWARE_LIST)
        sl = self.verified(signed, "VCM", SoftwareList, ctx.get(Kind.VCM_CERT))
        if sl.vin != ctx.round.vin or sl.round != ctx.round.tag():
            raise ValidationFailure("software list bound to another round")
        self.emit(ctx, label(sp, 1), (Kind.SOFTWARE_LIST, signed))
        return sl


class PDA(_InstructionAgent):
    role = "PDA"

    def create_instructions(self, ctx):
        sl = self.verify_list(ctx, "CDI")
        urls = tuple(SoftwareUrl(e.sw_id, e.version, e.url) for e in sl.entries)
        di = self.make(ctx, Kind.DOWNLOAD_INSTRUCTIONS, DownloadInstructions(ctx.get(Kind.SOFTWARE_LIST), urls))
        ctx.put(Kind.DOWNLOAD_INSTRUCTIONS, di)
        self.emit(ctx, label("CDI", 2), (Kind.DOWNLOAD_INSTRUCTIONS, di))
        self.send(ctx, "PSA", "4.3", request("DKM_Key"))

    def on_4_4(self, ctx, items, env):
        (key,) = _expect(items, SymKey)
        if key.kind is not KeyKind.DKM:
            raise ValidationFailure("not a DKM key")
        ctx.put(Kind.DKM_KEY, key)
        self.send(ctx, "CMS", "4.6", request("Vehicle_Cert"))

    def on_4_7(self, ctx, items, env):
        (cert,) = _expect(items, Certificate)
        vehicle_pk = self.cert_key(cert, f"Vehicle@{ctx.round.vin}")
        key = ctx.get(Kind.DKM_KEY)
        dkm = self.make(ctx, Kind.DKM, build_key_manifest(self.suite(), key, vehicle_pk, POLICY_DOWNLOAD, KeyKind.DKM))
        ct = self.make(
            ctx, Kind.ENC_DOWNLOAD_INSTRUCTIONS, self.suite().sym_encrypt(encode(ctx.get(Kind.DOWNLOAD_INSTRUCTIONS)), key)
        )
        ctx.materials["dkm"], ctx.materials["ct"] = dkm, ct
        self.emit(ctx, label("CDI", 6), (Kind.DKM, dkm), (Kind.ENC_DOWNLOAD_INSTRUCTIONS, ct))
        self.request_signature(ctx, "4.12", "download-instructions", ct)

    def on_4_13(self, ctx, items, env):
        signed = self.assemble(ctx.materials["ct"], items[0] if items else None, "PDA")
        ctx.put(Kind.ENC_DOWNLOAD_INSTRUCTIONS, self.make(ctx, Kind.ENC_DOWNLOAD_INSTRUCTIONS, signed))
        self.request_signature(ctx, "4.15", "dkm", ctx.materials["dkm"])

    def on_4_16(self, ctx, items, env):
        signed = self.assemble(ctx.materials["dkm"], items[0] if items else None, "PDA")
        ctx.put(Kind.DKM, self.make(ctx, Kind.DKM, signed))

    def on_8_1(self, ctx, items, env):
        _expect(items, Flag, Flag, Flag)
        self.send(ctx, "VCM", "8.2", ctx.get(Kind.ENC_DOWNLOAD_INSTRUCTIONS), ctx.get(Kind.DKM), self.world.certs["PDA"])


class PIA(_InstructionAgent):
    role = "PIA"

    def create_instructions(self, ctx):
        sl = self.verify_list(ctx, "CII")
        steps = tuple(("install", e.sw_id, e.version) for e in sl.entries)
        plan = self.make(ctx, Kind.INSTALLATION_PLAN, InstallationPlan(ctx.round.tag(), steps))
        ctx.put(Kind.INSTALLATION_PLAN, plan)
        self.emit(ctx, label("CII", 2), (Kind.INSTALLATION_PLAN, plan))
        self.send(ctx, "PSA", "7.1", request("MKM"), request("SKA"))

    def on_7_2(self, ctx, items, env):
        mkm, ska, cert = _expect(items, Signed, Signed, Certificate)
        self.verified(mkm, "PSA", MasterKeyManifest, cert)
        self.verified(ska, "PSA", SecureKeyArray, cert)
        ctx.put(Kind.MKM, mkm)
        ctx.put(Kind.SKA, ska)
        ctx.put(Kind.PSA_CERT, cert)
        self.send(ctx, "PSA", "7.4", request("IKM_Key"))

    def on_7_5(self, ctx, items, env):
        (key,) = _expect(items, SymKey)
        if key.kind is not KeyKind.IKM:
            raise ValidationFailure("not an IKM key")
        ctx.put(Kind.IKM_KEY, key)
        self.send(ctx, "CMS", "7.7", request("Vehicle_Cert"))

    def on_7_8(self, ctx, items, env):
        (cert,) = _expect(items, Certificate)
        vehicle_pk = self.cert_key(cert, f"Vehicle@{ctx.round.vin}")
        key = ctx.get(Kind.IKM_KEY)
        ii = InstallationInstructions(
            ctx.get(Kind.SOFTWARE_LIST),
            ctx.get(Kind.SKA),
            ctx.get(Kind.MKM),
            ctx.get(Kind.PSA_CERT),
            ctx.get(Kind.INSTALLATION_PLAN),
        )
        ii = self.make(ctx, Kind.INSTALLATION_INSTRUCTIONS, ii)
        ikm = self.make(ctx, Kind.IKM, build_key_manifest(self.suite(), key, vehicle_pk, POLICY_INSTALLATION, KeyKind.IKM))
        ct = self.make(ctx, Kind.ENC_INSTALLATION_INSTRUCTIONS, self.suite().sym_encrypt(encode(ii), key))
        ctx.materials["ikm"], ctx.materials["ct"] = ikm, ct
        self.emit(
            ctx,
            label("CII", 7),
            (Kind.INSTALLATION_INSTRUCTIONS, ii),
            (Kind.IKM, ikm),
            (Kind.ENC_INSTALLATION_INSTRUCTIONS, ct),
        )
        self.request_signature(ctx, "7.13", "installation-instructions", ct)

    def on_7_14(self, ctx, items, env):
        signed = self.assemble(ctx.materials["ct"], items[0] if items else None, "PIA")
        ctx.put(Kind.ENC_INSTALLATION_INSTRUCTIONS, self.make(ctx, Kind.ENC_INSTALLATION_INSTRUCTIONS, signed))
        self.request_signature(ctx, "7.16", "ikm", ctx.materials["ikm"])

    def on_7_17(self, ctx, items, env):
        signed = self.assemble(ctx.materials["ikm"], items[0] if items else None, "PIA")
        ctx.put(Kind.IKM, self.make(ctx, Kind.IKM, signed))

    def on_8_1(self, ctx, items, env):
        _expect(items, Flag, Flag, Flag)
        self.send(
            ctx, "VCM", "8.2", ctx.get(Kind.ENC_INSTALLATION_INSTRUCTIONS), ctx.get(Kind.IKM), self.world.certs["PIA"]
        )


class SoftwareRepository(Entity):
    role = "SoftwareRepository"

    def __init__(self, name, world):
        super().__init__(name, world)
        self.store: dict[str, SoftwareEncased] = {}

    def on_5_1(self, ctx, items, env):
        enc, sw_id, version = _expect(items, SoftwareEncased, str, int)
        token = self.suite().rng.randbytes(8).hex()
        url = self.make(ctx, Kind.SOFTWARE_URL, SoftwareUrl(sw_id, version, f"repo://{sw_id}/{version}/{token}"))
        self.store[url.url] = enc
        self.emit(ctx, label("USF", 1), (Kind.SOFTWARE_ENCASED, enc), (Kind.SOFTWARE_URL, url))
        self.send(ctx, "VCM", "5.2", url)

    def on_9_1(self, ctx, items, env):
        (url,) = _expect(items, SoftwareUrl)
        enc = self.store.get(url.url)
        if enc is None:
            raise ValidationFailure(f"repository has no {url.url}")
        self.emit(ctx, label("DSF", 4), (Kind.SOFTWARE_ENCASED, enc))
        self.send(ctx, env.sender.split("@")[0], "9.2", enc)


class VinDatabase(Entity):
    role = "VinDatabase"

    def __init__(self, name, world, vehicles: dict[str, VinData]):
        super().__init__(name, world)
        self.vehicles = dict(vehicles)
        self.versions: list[SoftwareUrl] = []

    def on_5_3(self, ctx, items, env):
        (url,) = _expect(items, SoftwareUrl)
        self.versions.append(url)
        self.emit(ctx, label("USF", 2), (Kind.SOFTWARE_URL, url))
        self.send(ctx, "VCM", "5.4", success("Software_URL", url.url))

    def on_3_2(self, ctx, items, env):
        (vin,) = _expect(items, str)
        data = self.vehicles.get(vin)
        if data is None or vin != ctx.round.vin:
            raise ValidationFailure(f"unknown VIN {vin}")
        data = self.make(ctx, Kind.VIN_DATA, data)
        versions = self.make(ctx, Kind.SOFTWARE_VERSIONS, SoftwareVersions(tuple(self.versions)))
        self.send(ctx, "VCM", "3.3", data, versions)


class Database(Entity):
    """Producer database; present in the architecture but idle in every table."""

    role = "Database"


# ---------------------------------------------------------------------------
# Encapsulation cloud services


class OrderCloudService(Entity):
    role = "OrderCloudService"

    def __init__(self, name, world):
        super().__init__(name, world)
        self.queues: dict[str, list[Signed]] = {}
        self.urls: dict[str, tuple[Signed, Certificate]] = {}

    def on_1_3(self, ctx, items, env):
        (svso,) = _expect(items, Signed)
        if not isinstance(svso.payload, Vso):
            raise UnexpectedMessage("not a VSO")
        self.queues.setdefault(svso.payload.vin, []).append(svso)
        self.emit(ctx, label("OI", 2), (Kind.VSO, svso))

    def on_2_1(self, ctx, items, env):
        _expect(items, Flag)
        queue = self.queues.get(ctx.round.vin) or []
        if not queue:
            raise UnexpectedMessage("no queued order")
        self.send(ctx, "OrderAgent", "2.2", queue.pop(0))

    def on_10_2(self, ctx, items, env):
        (signed,) = _expect(items, Signed)
        if not isinstance(signed.payload, VuupUrl):
            raise UnexpectedMessage("not a VUUP URL")
        self.urls[signed.payload.vin] = (signed, self.world.certs["VCM"])
        self.send(ctx, "OrderAgent", "10.3", success("VUUP_URL", signed.payload.url))

    def _reply_url(self, ctx, sp: str, n: int, step: str):
        _entry = self.urls.get(ctx.round.vin)
        if _entry is None:
            raise UnexpectedMessage("no URL for this vehicle")
        signed, cert = _entry
        self.emit(ctx, label(sp, n), (Kind.VUUP_URL, signed.payload), (Kind.VCM_CERT, cert))
        self.send(ctx, "CDA", step, signed, cert)

    def on_11_1(self, ctx, items, env):
        _expect(items, Flag)
        self._reply_url(ctx, "NOR", 4, "11.2")

    def on_1_1(self, ctx, items, env):
        _expect(items, Flag)
        self._reply_url(ctx, "DV", 1, "1.2")


class OrderAgent(Entity):
    role = "OrderAgent"

    def pull(self, ctx):
        self.send(ctx, "OrderCloudService", "2.1", request("VSO"))

    def on_2_2(self, ctx, items, env):
        (svso,) = _expect(items, Signed)
        if not isinstance(svso.payload, Vso):
            raise ValidationFailure("not a VSO")
        vso = self.verified(svso, f"CDA@{svso.payload.vin}", Vso)
        if vso.vin != ctx.round.vin:
            raise ValidationFailure("VSO for another vehicle")
        self.emit(ctx, label("OI", 3), (Kind.VSO, svso))
        self.emit(ctx, label("OI", 4), (Kind.VSO, svso))
        self.send(ctx, "VCM", "2.4", svso)

    def on_9(self, ctx, items, env):
        (signed,) = _expect(items, Signed)
        url = self.verified(signed, "VCM", VuupUrl)
        self.emit(ctx, label("NOR", 2), (Kind.VUUP_URL, url))
        self.send(ctx, "OrderCloudService", "10.2", signed)

    def on_10_3(self, ctx, items, env):
        _expect(items, Flag)


class VehicleCloudService(Entity):
    role = "VehicleCloudService"

    def __init__(self, name, world):
        super().__init__(name, world)
        self.store: dict[str, Vuup] = {}

    def on_8_13(self, ctx, items, env):
        (vuup,) = _expect(items, Vuup)
        token = self.suite().rng.randbytes(8).hex()
        url = self.make(ctx, Kind.VUUP_URL, VuupUrl(ctx.round.vin, f"vuup://{ctx.round.vin}/{token}"))
        self.store[url.url] = vuup
        self.send(ctx, "VCM", "8.14", success("VUUP", url.url), url)

    def on_2_1(self, ctx, items, env):
        (url,) = _expect(items, VuupUrl)
        vuup = self.store.get(url.url)
        if vuup is None or url.vin != ctx.round.vin:
            raise ValidationFailure("unknown VUUP URL")
        self.emit(ctx, label("DV", 3), (Kind.VUUP, vuup))
        self.send(ctx, "CDA", "2.2", vuup)


# ---------------------------------------------------------------------------
# Consumer (vehicle) side


class CDA(Entity):
    """Consumer Download Agent."""

    role = "CDA"

    def __init__(self, name, world, private_key: bytes):
        super().__init__(name, world)
        self._sk = private_key

    def order(self, ctx):
        versions = onboard_versions(self.world.onboard(self.vin))
        vso = Vso(self.vin, versions, ctx.round.tag())
        svso = self.make(ctx, Kind.VSO, self.suite().sign(vso, self._sk))
        ctx.put(Kind.VSO, svso)
        self.emit(ctx, label("OI", 1), (Kind.VSO, svso))
        self.send(ctx, "OrderCloudService", "1.3", svso)

    def pull_url(self, ctx):
        self.emit(ctx, label("NOR", 3), (Kind.VSO, ctx.get(Kind.VSO)))
        self.send(ctx, "OrderCloudService", "11.1", request("VUUP_URL"))

    def on_11_2(self, ctx, items, env):
        signed, cert = _expect(items, Signed, Certificate)
        ctx.materials["notified"] = (signed, cert)

    # download VUUP
    def fetch_vuup(self, ctx):
        self.send(ctx, "OrderCloudService", "1.1", request("VUUP_URL"))

    def on_1_2(self, ctx, items, env):
        signed, cert = _expect(items, Signed, Certificate)
        url = self.verified(signed, "VCM", VuupUrl, cert)
        if url.vin != self.vin:
            raise ValidationFailure("URL for another vehicle")
        ctx.put(Kind.VCM_CERT, cert)
        ctx.put(Kind.VUUP_URL, url)
        self.emit(ctx, label("DV", 2), (Kind.VUUP_URL, url))
        self.send(ctx, "VehicleCloudService", "2.1", url)

    def on_2_2(self, ctx, items, env):
        (vuup,) = _expect(items, Vuup)
        if not ctx.has(Kind.VUUP_URL):
            raise UnexpectedMessage("VUUP not requested")
        ctx.materials["vuup"] = vuup
        self.send(ctx, "ConsumerLocalStorage", "2.3", vuup)

    def on_2_4(self, ctx, items, env):
        _expect(items, Flag)
        vuup = ctx.materials.get("vuup")
        if vuup is None:
            raise UnexpectedMessage("nothing stored")
        try:
            content = validate_vuup(self.suite(), vuup, self.world.root_pk)
        except MaterialError as exc:
            raise ValidationFailure(str(exc)) from exc
        if vuup.vcm_cert != ctx.get(Kind.VCM_CERT):
            raise ValidationFailure("VUUP signed under an unexpected VCM certificate")
        ctx.put(Kind.VUUP, vuup)
        ctx.put(Kind.DKM, content.dkm)
        ctx.put(Kind.PDA_CERT, content.certificates.pda_cert)
        ctx.put(Kind.ENC_DOWNLOAD_INSTRUCTIONS, content.download_instructions)
        ctx.put(Kind.IKM, content.ikm)
        ctx.put(Kind.PIA_CERT, content.certificates.pia_cert)
        ctx.put(Kind.ENC_INSTALLATION_INSTRUCTIONS, content.installation_instructions)
        self.emit(
            ctx,
            label("DV", 5),
            (Kind.VUUP, vuup),
            (Kind.ENC_DOWNLOAD_INSTRUCTIONS, content.download_instructions),
            (Kind.DKM, content.dkm),
            (Kind.ENC_INSTALLATION_INSTRUCTIONS, content.installation_instructions),
            (Kind.IKM, content.ikm),
        )

    # download software files
    def download(self, ctx):
        self.send(ctx, "CSA", "5", ctx.get(Kind.DKM), ctx.get(Kind.PDA_CERT), ctx.get(Kind.VCM_CERT))

    def on_6_4(self, ctx, items, env):
        _expect(items, Flag)
        self.send(ctx, "CSA", "7", ctx.get(Kind.ENC_DOWNLOAD_INSTRUCTIONS))

    def on_8_3(self, ctx, items, env):
        (di,) = _expect(items, DownloadInstructions)
        sl = self.verified(di.software_list, "VCM", SoftwareList, ctx.get(Kind.VCM_CERT))
        if sl.vin != self.vin or sl.round != ctx.round.tag():
            raise ValidationFailure("download instructions for another round")
        ctx.put(Kind.DOWNLOAD_INSTRUCTIONS, di)
        self.emit(ctx, label("DSF", 3), (Kind.DOWNLOAD_INSTRUCTIONS, di))
        ctx.materials["pending"] = len(di.urls)
        for url in di.urls:
            self.send(ctx, "SoftwareRepository", "9.1", url)

    def on_9_2(self, ctx, items, env):
        (enc,) = _expect(items, SoftwareEncased)
        if not ctx.has(Kind.DOWNLOAD_INSTRUCTIONS):
            raise UnexpectedMessage("no download in progress")
        ctx.materials["encased"] = enc
        self.send(ctx, "ConsumerLocalStorage", "9.3", enc)

    def on_9_4(self, ctx, items, env):
        _expect(items, Flag)
        enc = ctx.materials.get("encased")
        if enc is None:
            raise UnexpectedMessage("nothing stored")
        try:
            verify_encased_outer(self.suite(), enc, self.cert_key(ctx.get(Kind.VCM_CERT), "VCM"))
        except MaterialError as exc:
            raise ValidationFailure(str(exc)) from exc
        ctx.put(Kind.SOFTWARE_ENCASED, enc)
        self.emit(ctx, label("DSF", 6), (Kind.SOFTWARE_ENCASED, enc), (Kind.VCM_CERT, ctx.get(Kind.VCM_CERT)))

    # decrypt installation instructions
    def forward_instructions(self, ctx):
        self.send(ctx, "CIA", "10", ctx.get(Kind.ENC_INSTALLATION_INSTRUCTIONS), ctx.get(Kind.IKM), ctx.get(Kind.PIA_CERT))


class ConsumerLocalStorage(Entity):
    role = "ConsumerLocalStorage"

    def on_2_3(self, ctx, items, env):
        (vuup,) = _expect(items, Vuup)
        ctx.put(Kind.VUUP, vuup)
        self.emit(ctx, label("DV", 4), (Kind.VUUP, vuup))
        self.send(ctx, "CDA", "2.4", success("VUUP"))

    def on_9_3(self, ctx, items, env):
        (enc,) = _expect(items, SoftwareEncased)
        ctx.put(Kind.SOFTWARE_ENCASED, enc)
        self.emit(ctx, label("DSF", 5), (Kind.SOFTWARE_ENCASED, enc))
        self.send(ctx, "CDA", "9.4", success("Software"))

    def on_17_10(self, ctx, items, env):
        _expect(items, Flag)
        enc = ctx.get(Kind.SOFTWARE_ENCASED)
        self.emit(ctx, label("STU", 5), (Kind.SOFTWARE_ENCASED, enc))
        self.send(ctx, "CIA", "17.11", enc)


@dataclass
class KeySlot:
    key: SymKey
    policy: bytes


class CSA(Entity):
    """Consumer Security Agent: the only holder of unwrapped keys."""

    role = "CSA"

    def __init__(self, name, world, vehicle_private_key: bytes):
        super().__init__(name, world)
        self._sk = vehicle_private_key
        self.associated: list[SymKey] = []  # every key ever unwrapped, for containment scans

    def _slots(self, ctx) -> dict[KeyKind, KeySlot]:
        return ctx.materials.setdefault("keys", {})

    def csa_associate(self, ctx, manifest: KeyManifest) -> SymKey:
        try:
            key = unwrap_key_manifest(self.suite(), manifest, self._sk)
        except (CryptoError, MaterialError) as exc:
            raise ValidationFailure(f"{type(exc).__name__}: {exc}") from exc
        self._slots(ctx)[manifest.kind] = KeySlot(key, manifest.policy)
        self.associated.append(key)
        return key

    def csa_use(self, ctx, kind: KeyKind, operation: bytes, payload: Any) -> Any:
        slot = self._slots(ctx).get(kind)
        if slot is None:
            raise ValidationFailure(f"no {kind.value} key associated")
        if slot.policy != operation:
            raise PolicyViolation(f"{kind.value} key may only {slot.policy.decode()}")
        suite = self.suite()
        if operation in (POLICY_DOWNLOAD, POLICY_INSTALLATION):
            return decode(suite.sym_decrypt(payload, slot.key))
        inner = open_ska_entry(suite, payload, slot.key)
        self.associated.append(inner)
        return inner

    # download software files
    def on_5(self, ctx, items, env):
        sdkm, pda_cert, vcm_cert = _expect(items, Signed, Certificate, Certificate)
        manifest = self.verified(sdkm, "PDA", KeyManifest, pda_cert)
        self.cert_key(vcm_cert, "VCM")
        if manifest.kind is not KeyKind.DKM:
            raise ValidationFailure("manifest is not a DKM")
        self.csa_associate(ctx, manifest)
        ctx.put(Kind.PDA_CERT, pda_cert)
        ctx.put(Kind.VCM_CERT, vcm_cert)
        self.emit(ctx, label("DSF", 1), (Kind.DKM, sdkm), (Kind.PDA_CERT, pda_cert))
        self.send(ctx, "CDA", "6.4", success("DKM"))

    def on_7(self, ctx, items, env):
        (signed,) = _expect(items, Signed)
        ct = self.verified(signed, "PDA", CipherText, ctx.get(Kind.PDA_CERT))
        try:
            di = self.csa_use(ctx, KeyKind.DKM, POLICY_DOWNLOAD, ct)
        except MalformedEncoding as exc:
            raise ValidationFailure("download instructions did not decrypt") from exc
        if not isinstance(di, DownloadInstructions):
            raise ValidationFailure("not download instructions")
        self.emit(ctx, label("DSF", 2), (Kind.ENC_DOWNLOAD_INSTRUCTIONS, signed), (Kind.DOWNLOAD_INSTRUCTIONS, di))
        self.send(ctx, "CDA", "8.3", di)

    # decrypt installation instructions
    def on_11_6(self, ctx, items, env):
        sikm, pia_cert = _expect(items, Signed, Certificate)
        manifest = self.verified(sikm, "PIA", KeyManifest, pia_cert)
        if manifest.kind is not KeyKind.IKM:
            raise ValidationFailure("manifest is not an IKM")
        self.csa_associate(ctx, manifest)
        ctx.put(Kind.PIA_CERT, pia_cert)
        self.emit(ctx, label("DII", 2), (Kind.IKM, sikm))
        self.send(ctx, "CIA", "12.5", success("IKM"))

    def on_13_1(self, ctx, items, env):
        (signed,) = _expect(items, Signed)
        ct = self.verified(signed, "PIA", CipherText, ctx.get(Kind.PIA_CERT))
        try:
            ii = self.csa_use(ctx, KeyKind.IKM, POLICY_INSTALLATION, ct)
        except MalformedEncoding as exc:
            raise ValidationFailure("installation instructions did not decrypt") from exc
        if not isinstance(ii, InstallationInstructions):
            raise ValidationFailure("not installation instructions")
        self.emit(
            ctx, label("DII", 3), (Kind.ENC_INSTALLATION_INSTRUCTIONS, signed), (Kind.INSTALLATION_INSTRUCTIONS, ii)
        )
        self.send(ctx, "CIA", "14.3", ii)

    # setup installation environment
    def on_15_4(self, ctx, items, env):
        smkm, psa_cert = _expect(items, Signed, Certificate)
        mkm = self.verified(smkm, "PSA", MasterKeyManifest, psa_cert)
        if (mkm.security_access.kind, mkm.software.kind) != (KeyKind.MKM_SECURITY_ACCESS, KeyKind.MKM_SOFTWARE):
            raise ValidationFailure("MKM categories out of place")
        ctx.put(Kind.MKM_SA_KEY, self.csa_associate(ctx, mkm.security_access))
        ctx.put(Kind.MKM_SW_KEY, self.csa_associate(ctx, mkm.software))
        self.emit(ctx, label("SIE", 2), (Kind.MKM, smkm))
        self.send(ctx, "CIA", "16.4", success("MKM"))

    # stream update to ECU
    def on_17_4(self, ctx, items, env):
        challenge, entry = _expect(items, EcuChallenge, CipherText)
        sa_key = self.csa_use(ctx, KeyKind.MKM_SECURITY_ACCESS, POLICY_SECURITY_ACCESS, entry)
        if sa_key.kind is not KeyKind.SECURITY_ACCESS:
            raise ValidationFailure("entry is not a SecurityAccess key")
        response = self.make(ctx, Kind.RESPONSE, EcuResponse(self.suite().challenge_response(challenge.nonce, sa_key)))
        self.emit(ctx, label("STU", 3), (Kind.CHALLENGE, challenge), (Kind.RESPONSE, response))
        self.send(ctx, "CIA", "17.7", response)

    def on_17_12(self, ctx, items, env):
        enc, entry = _expect(items, SoftwareEncased, CipherText)
        sw_key = self.csa_use(ctx, KeyKind.MKM_SOFTWARE, POLICY_SOFTWARE, entry)
        if sw_key.kind is not KeyKind.SOFTWARE:
            raise ValidationFailure("entry is not a Software key")
        vcm_pk = self.cert_key(ctx.get(Kind.VCM_CERT), "VCM")
        supplier_pk = self.cert_key(self.world.certs["Supplier"], "Supplier")
        signed = open_encased_signed(self.suite(), enc, sw_key, vcm_pk, supplier_pk)
        self.emit(ctx, label("STU", 8), (Kind.SOFTWARE, signed))
        self.send(ctx, "CIA", "17.16", signed)


class CIA(Entity):
    """Consumer Installation Agent; its link to the ECU is the insecure one."""

    role = "CIA"

    def on_10(self, ctx, items, env):
        sii, sikm, pia_cert = _expect(items, Signed, Signed, Certificate)
        ctx.put(Kind.ENC_INSTALLATION_INSTRUCTIONS, sii)
        ctx.put(Kind.IKM, sikm)
        ctx.put(Kind.PIA_CERT, pia_cert)
        ctx.materials["offline"] = True
        self.emit(ctx, label("DII", 1), (Kind.ENC_INSTALLATION_INSTRUCTIONS, sii), (Kind.IKM, sikm))
        self.send(ctx, "CSA", "11.6", sikm, pia_cert)

    def on_12_5(self, ctx, items, env):
        _expect(items, Flag)
        self.send(ctx, "CSA", "13.1", ctx.get(Kind.ENC_INSTALLATION_INSTRUCTIONS))

    def on_14_3(self, ctx, items, env):
        (ii,) = _expect(items, InstallationInstructions)
        ctx.put(Kind.INSTALLATION_INSTRUCTIONS, ii)
        self.emit(ctx, label("DII", 4), (Kind.INSTALLATION_INSTRUCTIONS, ii))

    def setup_environment(self, ctx):
        ii = ctx.get(Kind.INSTALLATION_INSTRUCTIONS)
        self.verified(ii.mkm, "PSA", MasterKeyManifest, ii.psa_cert)
        self.verified(ii.ska, "PSA", SecureKeyArray, ii.psa_cert)
        ctx.put(Kind.MKM, ii.mkm)
        ctx.put(Kind.SKA, ii.ska)
        self.emit(ctx, label("SIE", 1), (Kind.MKM, ii.mkm), (Kind.SKA, ii.ska), (Kind.PSA_CERT, ii.psa_cert))
        self.send(ctx, "CSA", "15.4", ii.mkm, ii.psa_cert)

    def on_16_4(self, ctx, items, env):
        _expect(items, Flag)
        self.emit(ctx, label("SIE", 3), (Kind.MKM, ctx.get(Kind.MKM)))

    # stream update to ECU
    def stream(self, ctx):
        ctx.get(Kind.SKA)
        ctx.materials.update(unlocked=False, software=None, sent=False)
        self.send(ctx, "ECU", "17.1", request("ECU"))
        self.send(ctx, "ConsumerLocalStorage", "17.10", request("Software"))

    def on_17_3(self, ctx, items, env):
        (challenge,) = _expect(items, EcuChallenge)
        entry = ctx.get(Kind.SKA).payload.security_access_entries[0]
        self.emit(ctx, label("STU", 2), (Kind.CHALLENGE, challenge), (Kind.SKA_SA_ENTRY, entry))
        self.send(ctx, "CSA", "17.4", challenge, entry)

    def on_17_7(self, ctx, items, env):
        (response,) = _expect(items, EcuResponse)
        self.send(ctx, "ECU", "17.8", response)

    def on_17_9(self, ctx, items, env):
        (status,) = _expect(items, EcuStatus)
        if status.state == "rejected":
            raise ValidationFailure(f"ECU refused unlock: {status.detail}")
        if status.state != "unlocked" or "unlocked" not in ctx.materials:
            raise UnexpectedMessage("unexpected ECU status")
        ctx.materials["unlocked"] = True
        self._maybe_install(ctx)

    def on_17_11(self, ctx, items, env):
        (enc,) = _expect(items, SoftwareEncased)
        entry = ctx.get(Kind.SKA).payload.software_entries[0]
        self.emit(ctx, label("STU", 6), (Kind.SOFTWARE_ENCASED, enc))
        self.emit(ctx, label("STU", 7), (Kind.SOFTWARE_ENCASED, enc), (Kind.SKA_SW_ENTRY, entry))
        self.send(ctx, "CSA", "17.12", enc, entry)

    def on_17_16(self, ctx, items, env):
        (signed,) = _expect(items, Signed)
        ctx.materials["software"] = signed
        self._maybe_install(ctx)

    def _maybe_install(self, ctx):
        m = ctx.materials
        if m.get("unlocked") and m.get("software") is not None and not m.get("sent"):
            m["sent"] = True
            self.world.disclose(m["software"])
            self.send(ctx, "ECU", "17.17", m["software"])

    def on_17_21(self, ctx, items, env):
        (status,) = _expect(items, EcuStatus)
        if status.state == "install-rejected":
            raise ValidationFailure(f"ECU rejected the software: {status.detail}")
        if status.state != "installed" or not ctx.materials.get("sent"):
            raise UnexpectedMessage("unexpected ECU status")
        ctx.materials["installed"] = status.detail


# ---------------------------------------------------------------------------
# ECU


class UnlockResult(enum.Enum):
    UNLOCKED = "Unlocked"
    REJECTED = "Rejected"


class InstallResult(enum.Enum):
    INSTALLED = "Installed"
    REJECTED = "Rejected"


class RejectReason(str, enum.Enum):
    LOCKED = "Locked"
    BAD_SIGNATURE = "BadSignature"
    STALE_VERSION = "StaleVersion"
    BAD_RESPONSE = "BadResponse"
    NO_CHALLENGE = "NoChallenge"


@dataclass
class EcuState:
    installed_version: int
    locked: bool = True
    pending_challenge: bytes | None = None


def ecu_challenge(state: EcuState, suite: CryptoSuite) -> bytes:
    """Fresh nonce per unlock attempt; any older challenge is forgotten."""
    state.pending_challenge = suite.challenge()
    return state.pending_challenge


def ecu_verify_response(
    state: EcuState, response: bytes, key: SymKey, suite: CryptoSuite
) -> tuple[UnlockResult, RejectReason | None]:
    challenge, state.pending_challenge = state.pending_challenge, None  # single use
    if challenge is None:
        return UnlockResult.REJECTED, RejectReason.NO_CHALLENGE
    if response != suite.challenge_response(challenge, key):
        return UnlockResult.REJECTED, RejectReason.BAD_RESPONSE
    state.locked = False
    return UnlockResult.UNLOCKED, None


def ecu_install(
    state: EcuState, signed: Any, supplier_pk: bytes, suite: CryptoSuite
) -> tuple[InstallResult, RejectReason | None]:
    try:
        if state.locked:
            return InstallResult.REJECTED, RejectReason.LOCKED
        try:
            sw = suite.verify_signed(signed, supplier_pk)
        except CryptoError:
            return InstallResult.REJECTED, RejectReason.BAD_SIGNATURE
        if not isinstance(sw, Software):
            return InstallResult.REJECTED, RejectReason.BAD_SIGNATURE
        if sw.version <= state.installed_version:
            return InstallResult.REJECTED, RejectReason.STALE_VERSION
        state.installed_version = sw.version
        return InstallResult.INSTALLED, None
    finally:
        state.locked = True  # back to locked after every attempt


class ECU(Entity):
    role = "ECU"

    def __init__(self, name, world, installed_version: int, security_access_key: SymKey):
        super().__init__(name, world)
        self.state = EcuState(installed_version)
        self._key = security_access_key

    def _record(self, ctx, action: str, result: str, reason: RejectReason | None) -> None:
        self.world.ecu_record(self, ctx.round, action, result, reason.value if reason else None, self.state.installed_version)

    def on_17_1(self, ctx, items, env):
        _expect(items, Flag)
        challenge = self.make(ctx, Kind.CHALLENGE, EcuChallenge(ecu_challenge(self.state, self.suite())))
        ctx.materials["challenge"] = challenge
        self.emit(ctx, label("STU", 1), (Kind.CHALLENGE, challenge))
        self.send(ctx, "CIA", "17.3", challenge)

    def on_17_8(self, ctx, items, env):
        (response,) = _expect(items, EcuResponse)
        challenge = ctx.materials.get("challenge")
        result, reason = ecu_verify_response(self.state, response.value, self._key, self.suite())
        self._record(ctx, "unlock", result.value, reason)
        if result is UnlockResult.UNLOCKED:
            self.emit(ctx, label("STU", 4), (Kind.CHALLENGE, challenge), (Kind.RESPONSE, response))
            self.send(ctx, "CIA", "17.9", EcuStatus("unlocked", challenge.nonce.hex()))
        else:
            self.send(ctx, "CIA", "17.9", EcuStatus("rejected", reason.value))

    def on_17_17(self, ctx, items, env):
        (signed,) = _expect(items, Signed)
        supplier_pk = self.cert_key(self.world.certs["Supplier"], "Supplier")
        result, reason = ecu_install(self.state, signed, supplier_pk, self.suite())
        self._record(ctx, "install", result.value, reason)
        if result is InstallResult.INSTALLED:
            self.emit(ctx, label("STU", 9), (Kind.SOFTWARE, signed))
            self.send(ctx, "CIA", "17.21", EcuStatus("installed", str(self.state.installed_version)))
        else:
            self.send(ctx, "CIA", "17.21", EcuStatus("install-rejected", reason.value))


ENTITY_CLASSES = {
    cls.role: cls
    for cls in (
        Supplier,
        ProducerLocalStorage,
        VCM,
        PSS,
        CMS,
        PSA,
        Database,
        OrderCloudService,
        OrderAgent,
        PDA,
        PIA,
        VinDatabase,
        VehicleCloudService,
        SoftwareRepository,
        ConsumerLocalStorage,
        CDA,
        CSA,
        CIA,
        ECU,
    )
}


def scan_key_containment(payloads: Iterable[bytes], keys: Iterable[SymKey]) -> list[str]:
    """Return hex prefixes of keys whose plaintext encoding or raw bytes appear in a payload."""
    needles = {}
    for key in keys:
        needles[encode(key)] = key
        needles[key.key] = key
    leaks = []
    for payload in payloads:
        for needle, key in needles.items():
            if needle in payload:
                leaks.append(key.key.hex()[:16])
    return sorted(set(leaks))
