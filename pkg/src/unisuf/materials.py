"""Material formats, builders and validators.

Every artifact that entities exchange is a frozen dataclass registered with
the canonical codec, so its digest is stable and can be referenced from trace
records.  Builders are pure given a :class:`CryptoSuite` (which owns the RNG).
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Iterable, Mapping

from .codec import MalformedEncoding, decode, encode, register, register_enum
from .crypto import (
    BadSignature,
    Certificate,
    CipherText,
    CryptoError,
    CryptoSuite,
    DecryptFailure,
    KeyKind,
    SchemeMismatch,
    Signed,
    SymKey,
)


@register_enum(3)
class Kind(str, enum.Enum):
    """Material kinds referenced by events, contexts, secrets and origins."""

    SOFTWARE = "Software"
    SOFTWARE_KEY = "Software_Key"
    SOFTWARE_HASH = "SoftwareHash"
    SIGNED_SOFTWARE_HASH = "SignedSoftwareHash"
    SOFTWARE_ENCASED = "Software_Encased"
    SOFTWARE_URL = "Software_URL"
    VSO = "VSO"
    VIN_DATA = "VIN_Data"
    SOFTWARE_VERSIONS = "Software_Versions"
    SOFTWARE_LIST = "Software_List"
    DOWNLOAD_INSTRUCTIONS = "Download_Instructions"
    ENC_DOWNLOAD_INSTRUCTIONS = "Encrypted_Download_Instructions"
    DKM_KEY = "DKM_Key"
    DKM = "DKM"
    IKM_KEY = "IKM_Key"
    IKM = "IKM"
    INSTALLATION_PLAN = "Installation_Plan"
    INSTALLATION_INSTRUCTIONS = "Installation_Instructions"
    ENC_INSTALLATION_INSTRUCTIONS = "Encrypted_Installation_Instructions"
    MKM_SA_KEY = "MKM_SecurityAccess_Key"
    MKM_SW_KEY = "MKM_Software_Key"
    MKM = "MKM"
    SKA = "SKA"
    SKA_KEYS = "SKA_Keys"
    SKA_SA_ENTRY = "SKA_SecurityAccess_Key"
    SKA_SW_ENTRY = "SKA_Software_Key"
    SECURITY_ACCESS_KEY = "SecurityAccess_Key"
    VUUP_CONTENT = "VUUP_Content"
    VUUP = "VUUP"
    VUUP_URL = "VUUP_URL"
    DIGEST = "Digest"
    SIGNATURE = "Signature"
    CHALLENGE = "ECU_Challenge"
    RESPONSE = "ECU_Challenge_Response"
    ECU_STATUS = "ECU_Status"
    ROUND_TAG = "Round_Tag"
    ROOT_CERT = "Root_Cert"
    SUPPLIER_CERT = "Supplier_Cert"
    VCM_CERT = "VCM_Cert"
    PDA_CERT = "PDA_Cert"
    PIA_CERT = "PIA_Cert"
    PSA_CERT = "PSA_Cert"
    CDA_CERT = "CDA_Cert"
    VEHICLE_CERT = "Vehicle_Cert"
    ROOT_PRIVATE_KEY = "Root_PrivateKey"
    SUPPLIER_PRIVATE_KEY = "Supplier_PrivateKey"
    VCM_PRIVATE_KEY = "VCM_PrivateKey"
    PDA_PRIVATE_KEY = "PDA_PrivateKey"
    PIA_PRIVATE_KEY = "PIA_PrivateKey"
    PSA_PRIVATE_KEY = "PSA_PrivateKey"
    CDA_PRIVATE_KEY = "CDA_PrivateKey"
    VEHICLE_PRIVATE_KEY = "Vehicle_PrivateKey"


CERT_KINDS = frozenset(
    {
        Kind.ROOT_CERT,
        Kind.SUPPLIER_CERT,
        Kind.VCM_CERT,
        Kind.PDA_CERT,
        Kind.PIA_CERT,
        Kind.PSA_CERT,
        Kind.CDA_CERT,
        Kind.VEHICLE_CERT,
    }
)

# Long-lived materials that may legitimately recur across update rounds.
PERSISTENT_KINDS = CERT_KINDS | {Kind.VIN_DATA, Kind.SECURITY_ACCESS_KEY}

KEY_KIND_FOR = {
    KeyKind.SOFTWARE: Kind.SOFTWARE_KEY,
    KeyKind.DKM: Kind.DKM_KEY,
    KeyKind.IKM: Kind.IKM_KEY,
    KeyKind.MKM_SECURITY_ACCESS: Kind.MKM_SA_KEY,
    KeyKind.MKM_SOFTWARE: Kind.MKM_SW_KEY,
    KeyKind.SECURITY_ACCESS: Kind.SECURITY_ACCESS_KEY,
}

# Policy tokens: a key associated with the CSA may only be used for its named operation.
POLICY_DOWNLOAD = b"decrypt-download-instructions"
POLICY_INSTALLATION = b"decrypt-installation-instructions"
POLICY_SECURITY_ACCESS = b"unwrap-security-access"
POLICY_SOFTWARE = b"unwrap-software"


class MaterialError(Exception):
    pass


class KindMismatch(MaterialError):
    pass


class EmptyKeyList(MaterialError):
    pass


class MissingPart(MaterialError):
    pass


class PartSignatureInvalid(MaterialError):
    def __init__(self, part: str):
        super().__init__(f"signature on part {part!r} is invalid")
        self.part = part


class OuterSignatureInvalid(MaterialError):
    pass


class InnerSignatureInvalid(MaterialError):
    pass


# --------------------------------------------------------------------------
# material types


@register(10)
@dataclass(frozen=True)
class Software:
    version: int
    content: bytes

    def serialized(self) -> bytes:
        return self.version.to_bytes(8, "big") + self.content


@register(11)
@dataclass(frozen=True)
class SoftwareEncased:
    outer: Signed


@register(12)
@dataclass(frozen=True)
class KeyManifest:
    kind: KeyKind
    wrapped_key: CipherText
    policy: bytes


@register(13)
@dataclass(frozen=True)
class MasterKeyManifest:
    security_access: KeyManifest
    software: KeyManifest


@register(14)
@dataclass(frozen=True)
class SecureKeyArray:
    security_access_entries: tuple
    software_entries: tuple


@register(15)
@dataclass(frozen=True)
class RoundTag:
    vin: object
    expiry: int
    nonce: int


@register(16)
@dataclass(frozen=True)
class SoftwareUrl:
    sw_id: str
    version: int
    url: str


@register(17)
@dataclass(frozen=True)
class VinData:
    vin: str
    ecu: str


@register(18)
@dataclass(frozen=True)
class SoftwareVersions:
    entries: tuple  # of SoftwareUrl


@register(19)
@dataclass(frozen=True)
class Vso:
    vin: str
    onboard_versions: tuple  # of (sw_id, version) pairs, sorted
    round: RoundTag


@register(20)
@dataclass(frozen=True)
class SoftwareListEntry:
    sw_id: str
    version: int
    url: str


@register(21)
@dataclass(frozen=True)
class SoftwareList:
    vin: str
    round: RoundTag
    entries: tuple


@register(22)
@dataclass(frozen=True)
class DownloadInstructions:
    software_list: Signed
    urls: tuple  # of SoftwareUrl


@register(23)
@dataclass(frozen=True)
class InstallationPlan:
    round: RoundTag
    steps: tuple


@register(24)
@dataclass(frozen=True)
class InstallationInstructions:
    software_list: Signed
    ska: Signed
    mkm: Signed
    psa_cert: Certificate
    plan: InstallationPlan


@register(25)
@dataclass(frozen=True)
class CertificatePackage:
    pda_cert: Certificate
    pia_cert: Certificate


@register(26)
@dataclass(frozen=True)
class VuupContent:
    certificates: CertificatePackage
    download_instructions: Signed  # [SymEnc(DI, DKM_Key)]_PDA
    dkm: Signed  # [DKM]_PDA
    installation_instructions: Signed  # [SymEnc(II, IKM_Key)]_PIA
    ikm: Signed  # [IKM]_PIA


@register(27)
@dataclass(frozen=True)
class Vuup:
    vcm_cert: Certificate
    content: Signed


@register(28)
@dataclass(frozen=True)
class VuupUrl:
    vin: str
    url: str


@register(29)
@dataclass(frozen=True)
class SkaKeys:
    security_access: tuple  # of SymKey
    software: tuple  # of SymKey


@register(30)
@dataclass(frozen=True)
class EcuChallenge:
    nonce: bytes


@register(31)
@dataclass(frozen=True)
class EcuResponse:
    value: bytes


@register(32)
@dataclass(frozen=True)
class EcuStatus:
    state: str  # unlocked | rejected | installed | install-rejected
    detail: str


@register(33)
@dataclass(frozen=True)
class Flag:
    """Request/Success flag; ``detail`` disambiguates otherwise equal flags."""

    flag: str  # request | success
    item: str
    detail: str = ""


@register(34)
@dataclass(frozen=True)
class HashMessage:
    purpose: str
    digest: bytes


@register(35)
@dataclass(frozen=True)
class SignatureMessage:
    purpose: str
    signature: bytes


@register(36)
@dataclass(frozen=True)
class Message:
    """Envelope payload: the table step id and the transmitted items."""

    step: str
    items: tuple


@dataclass(frozen=True)
class MaterialRecord:
    digest: str
    origin: str
    kind: Kind | None  # None for adversary-made values of unknown role
    round: str | None  # key of the creating round, None for long-lived material

    def to_json(self) -> dict:
        return {
            "digest": self.digest,
            "origin": self.origin,
            "kind": self.kind.value if self.kind else None,
            "round": self.round,
        }


def request(item: str, detail: str = "") -> Flag:
    return Flag("request", item, detail)


def success(item: str, detail: str = "") -> Flag:
    return Flag("success", item, detail)


# --------------------------------------------------------------------------
# builders


def encrypt_software(suite: CryptoSuite, sw_signed: Signed, key: SymKey, supplier_pk: bytes) -> CipherText:
    """Validate the supplier signature, then SymEnc the signed software."""
    suite.verify_signed(sw_signed, supplier_pk)
    if not isinstance(sw_signed.payload, Software):
        raise BadSignature("signed payload is not software")
    if key.kind is not KeyKind.SOFTWARE:
        raise KindMismatch(f"software must be encrypted with a Software key, got {key.kind.value}")
    return suite.sym_encrypt(encode(sw_signed), key)


def assemble_encased(ct: CipherText, vcm_signature: bytes) -> SoftwareEncased:
    return SoftwareEncased(CryptoSuite.assemble_signed(ct, vcm_signature))


def encase_software(
    suite: CryptoSuite, sw_signed: Signed, key: SymKey, vcm_sk: bytes, supplier_pk: bytes
) -> SoftwareEncased:
    """sign(Supplier) -> encrypt -> sign(VCM); the one-shot form of the two-step flow."""
    ct = encrypt_software(suite, sw_signed, key, supplier_pk)
    return assemble_encased(ct, suite.sign_hash(suite.hash_of(ct), vcm_sk))


def verify_encased_outer(suite: CryptoSuite, enc: SoftwareEncased, vcm_pk: bytes) -> CipherText:
    if not isinstance(enc, SoftwareEncased):
        raise OuterSignatureInvalid("not encased software")
    try:
        ct = suite.verify_signed(enc.outer, vcm_pk)
    except BadSignature as exc:
        raise OuterSignatureInvalid(str(exc)) from exc
    if not isinstance(ct, CipherText):
        raise OuterSignatureInvalid("outer payload is not a ciphertext")
    return ct


def open_encased_signed(
    suite: CryptoSuite, enc: SoftwareEncased, key: SymKey, vcm_pk: bytes, supplier_pk: bytes
) -> Signed:
    """Reverse the encasing layers, failing at the first bad layer."""
    ct = verify_encased_outer(suite, enc, vcm_pk)
    try:
        inner = decode(suite.sym_decrypt(ct, key), Signed)
    except (MalformedEncoding, SchemeMismatch) as exc:
        raise DecryptFailure("software ciphertext did not decrypt under the given key") from exc
    try:
        suite.verify_signed(inner, supplier_pk)
    except BadSignature as exc:
        raise InnerSignatureInvalid(str(exc)) from exc
    if not isinstance(inner.payload, Software):
        raise InnerSignatureInvalid("inner payload is not software")
    return inner


def open_encased(suite: CryptoSuite, enc: SoftwareEncased, key: SymKey, vcm_pk: bytes, supplier_pk: bytes) -> Software:
    return open_encased_signed(suite, enc, key, vcm_pk, supplier_pk).payload


def build_key_manifest(suite: CryptoSuite, key: SymKey, vehicle_pk: bytes, policy: bytes, kind: KeyKind) -> KeyManifest:
    if kind not in (KeyKind.DKM, KeyKind.IKM, KeyKind.MKM_SECURITY_ACCESS, KeyKind.MKM_SOFTWARE):
        raise KindMismatch(f"{kind.value} keys are not shipped in manifests")
    if key.kind is not kind:
        raise KindMismatch(f"key of kind {key.kind.value} cannot be tagged {kind.value}")
    return KeyManifest(kind, suite.asym_encrypt(encode(key), vehicle_pk), policy)


def unwrap_key_manifest(suite: CryptoSuite, manifest: KeyManifest, vehicle_sk: bytes) -> SymKey:
    try:
        key = decode(suite.asym_decrypt(manifest.wrapped_key, vehicle_sk), SymKey)
    except (MalformedEncoding, SchemeMismatch) as exc:
        raise DecryptFailure("manifest did not unwrap to a key") from exc
    if key.kind is not manifest.kind:
        raise KindMismatch("wrapped key kind differs from the manifest kind")
    return key


def build_mkm(suite: CryptoSuite, sa_key: SymKey, sw_key: SymKey, vehicle_pk: bytes) -> MasterKeyManifest:
    return MasterKeyManifest(
        build_key_manifest(suite, sa_key, vehicle_pk, POLICY_SECURITY_ACCESS, KeyKind.MKM_SECURITY_ACCESS),
        build_key_manifest(suite, sw_key, vehicle_pk, POLICY_SOFTWARE, KeyKind.MKM_SOFTWARE),
    )


def build_ska(
    suite: CryptoSuite,
    sa_keys: Iterable[SymKey],
    sw_keys: Iterable[SymKey],
    mkm_sa_key: SymKey,
    mkm_sw_key: SymKey,
) -> SecureKeyArray:
    sa_keys, sw_keys = list(sa_keys), list(sw_keys)
    if not sa_keys or not sw_keys:
        raise EmptyKeyList("both key lists must be non-empty")
    for k in sa_keys:
        if k.kind is not KeyKind.SECURITY_ACCESS:
            raise KindMismatch("security-access entries need SecurityAccess keys")
    for k in sw_keys:
        if k.kind is not KeyKind.SOFTWARE:
            raise KindMismatch("software entries need Software keys")
    return SecureKeyArray(
        tuple(suite.auth_encrypt(encode(k), mkm_sa_key) for k in sa_keys),
        tuple(suite.auth_encrypt(encode(k), mkm_sw_key) for k in sw_keys),
    )


def open_ska_entry(suite: CryptoSuite, entry: CipherText, master: SymKey) -> SymKey:
    return decode(suite.auth_decrypt(entry, master), SymKey)


def create_software_list(
    vso: Vso, vin_data: VinData, versions: SoftwareVersions, round_tag: RoundTag
) -> SoftwareList:
    """Pair each software id with its newest version when it beats the onboard one."""
    onboard = dict(vso.onboard_versions)
    best: dict[str, SoftwareUrl] = {}
    for entry in versions.entries:
        current = best.get(entry.sw_id)
        if current is None or entry.version > current.version:
            best[entry.sw_id] = entry
    entries = tuple(
        SoftwareListEntry(sw_id, e.version, e.url)
        for sw_id, e in sorted(best.items())
        if e.version > onboard.get(sw_id, -1)
    )
    return SoftwareList(vin_data.vin, round_tag, entries)


def build_software_list(
    suite: CryptoSuite,
    vso: Vso,
    vin_data: VinData,
    latest_versions: SoftwareVersions,
    round_tag: RoundTag,
    vcm_sk: bytes,
) -> Signed:
    return suite.sign(create_software_list(vso, vin_data, latest_versions, round_tag), vcm_sk)


def build_vuup(
    suite: CryptoSuite,
    certificates: CertificatePackage | None,
    download_instructions: Signed | None,
    dkm: Signed | None,
    installation_instructions: Signed | None,
    ikm: Signed | None,
    vcm_sk: bytes,
    vcm_cert: Certificate,
    root_pk: bytes,
) -> Vuup:
    content = check_vuup_parts(suite, certificates, download_instructions, dkm, installation_instructions, ikm, root_pk)
    return Vuup(vcm_cert, suite.sign(content, vcm_sk))


def check_vuup_parts(
    suite: CryptoSuite,
    certificates: CertificatePackage | None,
    download_instructions: Signed | None,
    dkm: Signed | None,
    installation_instructions: Signed | None,
    ikm: Signed | None,
    root_pk: bytes,
) -> VuupContent:
    """Validate the five parts against the root-anchored PDA/PIA certificates."""
    parts = {
        "certificates": certificates,
        "download_instructions": download_instructions,
        "dkm": dkm,
        "installation_instructions": installation_instructions,
        "ikm": ikm,
    }
    for name, part in parts.items():
        if part is None:
            raise MissingPart(name)
    pda_pk = suite.validate_certificate(certificates.pda_cert, root_pk)
    pia_pk = suite.validate_certificate(certificates.pia_cert, root_pk)
    for name, pk, expected in (
        ("download_instructions", pda_pk, CipherText),
        ("dkm", pda_pk, KeyManifest),
        ("installation_instructions", pia_pk, CipherText),
        ("ikm", pia_pk, KeyManifest),
    ):
        try:
            payload = suite.verify_signed(parts[name], pk)
        except BadSignature as exc:
            raise PartSignatureInvalid(name) from exc
        if not isinstance(payload, expected):
            raise PartSignatureInvalid(name)
    return VuupContent(certificates, download_instructions, dkm, installation_instructions, ikm)


def validate_vuup(suite: CryptoSuite, vuup: Vuup, root_pk: bytes) -> VuupContent:
    if not isinstance(vuup, Vuup):
        raise MissingPart("vuup")
    vcm_pk = suite.validate_certificate(vuup.vcm_cert, root_pk)
    if vuup.vcm_cert.holder_id != "VCM":
        raise CryptoError("VUUP certificate is not the VCM certificate")
    try:
        content = suite.verify_signed(vuup.content, vcm_pk)
    except BadSignature as exc:
        raise PartSignatureInvalid("content") from exc
    if not isinstance(content, VuupContent):
        raise MissingPart("content")
    return check_vuup_parts(
        suite,
        content.certificates,
        content.download_instructions,
        content.dkm,
        content.installation_instructions,
        content.ikm,
        root_pk,
    )


def onboard_versions(mapping: Mapping[str, int]) -> tuple:
    return tuple(sorted((str(k), int(v)) for k, v in mapping.items()))

