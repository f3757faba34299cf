"""Cryptographic primitives used by every protocol participant.

Two interchangeable backends implement the same interface:

* ``RealBackend`` uses AES-CTR, AES-GCM, Ed25519, an X25519 sealed box and
  HMAC-SHA256 from the ``cryptography`` package.
* ``MockBackend`` uses hash-derived keystreams and keyed digests.  It is fast
  and fully reproducible but offers no computational security; it only keeps
  the algebraic contracts (round trips, tag checks, key matching).

All randomness comes from an explicit ``random.Random`` handle so that a fixed
seed reproduces every ciphertext and key bit for bit.
"""

from __future__ import annotations

import enum
import hashlib
import hmac
import random
from dataclasses import dataclass

from cryptography.exceptions import InvalidSignature, InvalidTag
from cryptography.hazmat.primitives import hashes, serialization
from cryptography.hazmat.primitives.asymmetric.ed25519 import (
    Ed25519PrivateKey,
    Ed25519PublicKey,
)
from cryptography.hazmat.primitives.asymmetric.x25519 import (
    X25519PrivateKey,
    X25519PublicKey,
)
from cryptography.hazmat.primitives.ciphers import Cipher, algorithms, modes
from cryptography.hazmat.primitives.ciphers.aead import AESGCM, ChaCha20Poly1305
from cryptography.hazmat.primitives.kdf.hkdf import HKDF

from .codec import encode, register, register_enum


class CryptoError(Exception):
    """Base class for detectable cryptographic failures."""


class AuthFailure(CryptoError):
    """Authenticated decryption rejected the ciphertext or key."""


class DecryptFailure(CryptoError):
    """Asymmetric decryption failed (wrong private key or corrupted bytes)."""


class BadSignature(CryptoError):
    """A signed wrapper did not verify under the given public key."""


class InvalidCertificate(CryptoError):
    """Certificate was not issued by the root key."""


class SchemeMismatch(CryptoError):
    """Ciphertext was handed to the decryption routine of another scheme."""


@register_enum(1)
class Scheme(str, enum.Enum):
    SYM = "Sym"
    AUTH_SYM = "AuthSym"
    ASYM = "Asym"


@register_enum(2)
class KeyKind(str, enum.Enum):
    SOFTWARE = "Software"
    DKM = "DKM"
    IKM = "IKM"
    MKM_SECURITY_ACCESS = "MkmSecurityAccess"
    MKM_SOFTWARE = "MkmSoftware"
    SECURITY_ACCESS = "SecurityAccess"


@register(1)
@dataclass(frozen=True)
class SymKey:
    kind: KeyKind
    key: bytes

    def __post_init__(self) -> None:
        if not isinstance(self.kind, KeyKind) or not isinstance(self.key, bytes):
            raise TypeError("SymKey needs a KeyKind and raw key bytes")

    def __repr__(self) -> str:
        return f"SymKey({self.kind.value}, ...)"


@register(2)
@dataclass(frozen=True)
class CipherText:
    scheme: Scheme
    data: bytes

    def __post_init__(self) -> None:
        if not isinstance(self.scheme, Scheme) or not isinstance(self.data, bytes):
            raise TypeError("CipherText needs a Scheme and bytes")


@register(3)
@dataclass(frozen=True)
class Signed:
    """A payload together with a signature over ``Hash(encode(payload))``."""

    payload: object
    signature: bytes


@register(4)
@dataclass(frozen=True)
class Certificate:
    holder_id: str
    holder_public: bytes
    issuer_signature: bytes


@dataclass(frozen=True)
class KeyPair:
    private: bytes
    public: bytes

    def __repr__(self) -> str:  # never print private material
        return f"KeyPair(public={self.public.hex()[:16]}...)"


_HASHES = {
    "sha256": hashlib.sha256,
    "sha384": hashlib.sha384,
    "sha512": hashlib.sha512,
    "blake2b": hashlib.blake2b,
}


@dataclass(frozen=True)
class CryptoConfig:
    """Tunable parameters; defaults are what every bundled scenario uses."""

    backend: str = "real"
    sym_key_size: int = 32
    hash_name: str = "sha256"
    challenge_size: int = 16

    def __post_init__(self) -> None:
        if self.backend not in ("real", "mock"):
            raise ValueError(f"unknown crypto backend {self.backend!r}")
        if self.hash_name not in _HASHES:
            raise ValueError(f"unsupported hash {self.hash_name!r}")
        if self.backend == "real" and self.sym_key_size not in (16, 24, 32):
            raise ValueError("AES keys must be 16, 24 or 32 bytes")
        if self.sym_key_size < 16:
            raise ValueError("symmetric keys shorter than 16 bytes are not allowed")
        if self.challenge_size < 8:
            raise ValueError("challenge_size must be at least 8 bytes")

    @property
    def digest_size(self) -> int:
        return _HASHES[self.hash_name]().digest_size


class CryptoBackend:
    """Interface shared by both backends."""

    name = "abstract"
    signatures_deterministic = True

    def __init__(self, config: CryptoConfig | None = None):
        self.config = config or CryptoConfig(backend=self.name)

    # -- hashing ---------------------------------------------------------
    def hash(self, message: bytes) -> bytes:
        return _HASHES[self.config.hash_name](message).digest()

    # -- key generation --------------------------------------------------
    def generate_sym_key(self, rng: random.Random) -> bytes:
        return rng.randbytes(self.config.sym_key_size)

    def generate_signing_keypair(self, rng: random.Random) -> KeyPair:
        raise NotImplementedError

    def generate_encryption_keypair(self, rng: random.Random) -> KeyPair:
        raise NotImplementedError

    def challenge(self, rng: random.Random) -> bytes:
        return rng.randbytes(self.config.challenge_size)

    # -- primitives ------------------------------------------------------
    def sym_encrypt(self, message: bytes, key: bytes, rng: random.Random) -> bytes:
        raise NotImplementedError

    def sym_decrypt(self, data: bytes, key: bytes) -> bytes:
        raise NotImplementedError

    def auth_encrypt(self, message: bytes, key: bytes, rng: random.Random) -> bytes:
        raise NotImplementedError

    def auth_decrypt(self, data: bytes, key: bytes) -> bytes:
        raise NotImplementedError

    def asym_encrypt(self, message: bytes, public: bytes, rng: random.Random) -> bytes:
        raise NotImplementedError

    def asym_decrypt(self, data: bytes, private: bytes) -> bytes:
        raise NotImplementedError

    def sign_hash(self, digest: bytes, private: bytes) -> bytes:
        raise NotImplementedError

    def verify_hash(self, digest: bytes, signature: bytes, public: bytes) -> bool:
        raise NotImplementedError

    def challenge_response(self, challenge: bytes, key: bytes) -> bytes:
        raise NotImplementedError


class RealBackend(CryptoBackend):
    name = "real"

    _AES_NONCE = 16
    _GCM_NONCE = 12

    def generate_signing_keypair(self, rng: random.Random) -> KeyPair:
        seed = rng.randbytes(32)
        public = Ed25519PrivateKey.from_private_bytes(seed).public_key()
        return KeyPair(seed, public.public_bytes(serialization.Encoding.Raw, serialization.PublicFormat.Raw))

    def generate_encryption_keypair(self, rng: random.Random) -> KeyPair:
        raw = rng.randbytes(32)
        public = X25519PrivateKey.from_private_bytes(raw).public_key()
        return KeyPair(raw, public.public_bytes(serialization.Encoding.Raw, serialization.PublicFormat.Raw))

    def sym_encrypt(self, message: bytes, key: bytes, rng: random.Random) -> bytes:
        nonce = rng.randbytes(self._AES_NONCE)
        enc = Cipher(algorithms.AES(key), modes.CTR(nonce)).encryptor()
        return nonce + enc.update(message) + enc.finalize()

    def sym_decrypt(self, data: bytes, key: bytes) -> bytes:
        if len(data) < self._AES_NONCE or len(key) not in (16, 24, 32):
            # unauthenticated mode: no promise beyond "not the plaintext"
            return b""
        nonce, body = data[: self._AES_NONCE], data[self._AES_NONCE :]
        dec = Cipher(algorithms.AES(key), modes.CTR(nonce)).decryptor()
        return dec.update(body) + dec.finalize()

    def auth_encrypt(self, message: bytes, key: bytes, rng: random.Random) -> bytes:
        nonce = rng.randbytes(self._GCM_NONCE)
        return nonce + AESGCM(key).encrypt(nonce, message, None)

    def auth_decrypt(self, data: bytes, key: bytes) -> bytes:
        if len(key) not in (16, 24, 32):
            raise AuthFailure("invalid key length")
        nonce, body = data[: self._GCM_NONCE], data[self._GCM_NONCE :]
        try:
            return AESGCM(key).decrypt(nonce, body, None)
        except (InvalidTag, ValueError) as exc:
            raise AuthFailure("authentication tag mismatch") from exc

    @staticmethod
    def _box_key(shared: bytes, eph_public: bytes, public: bytes) -> bytes:
        return HKDF(hashes.SHA256(), 32, None, b"unisuf-box" + eph_public + public).derive(shared)

    def asym_encrypt(self, message: bytes, public: bytes, rng: random.Random) -> bytes:
        eph = X25519PrivateKey.from_private_bytes(rng.randbytes(32))
        eph_public = eph.public_key().public_bytes(serialization.Encoding.Raw, serialization.PublicFormat.Raw)
        shared = eph.exchange(X25519PublicKey.from_public_bytes(public))
        box = ChaCha20Poly1305(self._box_key(shared, eph_public, public))
        return eph_public + box.encrypt(b"\x00" * 12, message, None)

    def asym_decrypt(self, data: bytes, private: bytes) -> bytes:
        if len(data) < 32 + 16 or len(private) != 32:
            raise DecryptFailure("malformed sealed box")
        try:
            sk = X25519PrivateKey.from_private_bytes(private)
            public = sk.public_key().public_bytes(serialization.Encoding.Raw, serialization.PublicFormat.Raw)
            eph_public = data[:32]
            shared = sk.exchange(X25519PublicKey.from_public_bytes(eph_public))
            box = ChaCha20Poly1305(self._box_key(shared, eph_public, public))
            return box.decrypt(b"\x00" * 12, data[32:], None)
        except (InvalidTag, ValueError) as exc:
            raise DecryptFailure("sealed box rejected") from exc

    def sign_hash(self, digest: bytes, private: bytes) -> bytes:
        return Ed25519PrivateKey.from_private_bytes(private).sign(digest)

    def verify_hash(self, digest: bytes, signature: bytes, public: bytes) -> bool:
        if len(public) != 32:
            return False
        try:
            Ed25519PublicKey.from_public_bytes(public).verify(signature, digest)
        except (InvalidSignature, ValueError):
            return False
        return True

    def challenge_response(self, challenge: bytes, key: bytes) -> bytes:
        return hmac.new(key, challenge, hashlib.sha256).digest()


class MockBackend(CryptoBackend):
    """Keyed-permutation stand-in for the real primitives."""

    name = "mock"

    _NONCE = 8
    _TAG = 16

    @staticmethod
    def _stream(key: bytes, nonce: bytes, length: int) -> bytes:
        out = bytearray()
        counter = 0
        while len(out) < length:
            out += hashlib.sha256(b"ks" + key + nonce + counter.to_bytes(4, "big")).digest()
            counter += 1
        return bytes(out[:length])

    @staticmethod
    def _xor(a: bytes, b: bytes) -> bytes:
        return bytes(x ^ y for x, y in zip(a, b))

    @staticmethod
    def _public_of(private: bytes) -> bytes:
        return hashlib.sha256(b"mock-public" + private).digest()

    def _tag(self, key: bytes, nonce: bytes, body: bytes) -> bytes:
        return hashlib.sha256(b"tag" + key + nonce + body).digest()[: self._TAG]

    def generate_signing_keypair(self, rng: random.Random) -> KeyPair:
        private = rng.randbytes(32)
        return KeyPair(private, self._public_of(private))

    generate_encryption_keypair = generate_signing_keypair

    def sym_encrypt(self, message: bytes, key: bytes, rng: random.Random) -> bytes:
        nonce = rng.randbytes(self._NONCE)
        return nonce + self._xor(message, self._stream(key, nonce, len(message)))

    def sym_decrypt(self, data: bytes, key: bytes) -> bytes:
        nonce, body = data[: self._NONCE], data[self._NONCE :]
        return self._xor(body, self._stream(key, nonce, len(body)))

    def auth_encrypt(self, message: bytes, key: bytes, rng: random.Random) -> bytes:
        nonce = rng.randbytes(self._NONCE)
        body = self._xor(message, self._stream(key, nonce, len(message)))
        return nonce + body + self._tag(key, nonce, body)

    def auth_decrypt(self, data: bytes, key: bytes) -> bytes:
        if len(data) < self._NONCE + self._TAG:
            raise AuthFailure("ciphertext too short")
        nonce, body, tag = data[: self._NONCE], data[self._NONCE : -self._TAG], data[-self._TAG :]
        if not hmac.compare_digest(tag, self._tag(key, nonce, body)):
            raise AuthFailure("authentication tag mismatch")
        return self._xor(body, self._stream(key, nonce, len(body)))

    def asym_encrypt(self, message: bytes, public: bytes, rng: random.Random) -> bytes:
        return self.auth_encrypt(message, b"asym" + public, rng)

    def asym_decrypt(self, data: bytes, private: bytes) -> bytes:
        try:
            return self.auth_decrypt(data, b"asym" + self._public_of(private))
        except AuthFailure as exc:
            raise DecryptFailure("wrong private key or corrupted ciphertext") from exc

    def sign_hash(self, digest: bytes, private: bytes) -> bytes:
        return hashlib.sha256(b"sig" + self._public_of(private) + digest).digest()

    def verify_hash(self, digest: bytes, signature: bytes, public: bytes) -> bool:
        expected = hashlib.sha256(b"sig" + public + digest).digest()
        return hmac.compare_digest(expected, signature)

    def challenge_response(self, challenge: bytes, key: bytes) -> bytes:
        return self.hash(challenge + key)


def make_backend(config: CryptoConfig | None = None) -> CryptoBackend:
    config = config or CryptoConfig()
    cls = RealBackend if config.backend == "real" else MockBackend
    return cls(config)


def _cert_body(holder_id: str, holder_public: bytes) -> bytes:
    return encode(("certificate", holder_id, holder_public))


class CryptoSuite:
    """Typed operations over a backend plus the RNG handle that feeds it."""

    def __init__(self, backend: CryptoBackend, rng: random.Random):
        self.backend = backend
        self.rng = rng

    @property
    def key_size(self) -> int:
        return self.backend.config.sym_key_size

    def hash(self, message: bytes) -> bytes:
        return self.backend.hash(message)

    def hash_of(self, value: object) -> bytes:
        return self.backend.hash(encode(value))

    # keys
    def new_sym_key(self, kind: KeyKind) -> SymKey:
        return SymKey(kind, self.backend.generate_sym_key(self.rng))

    def signing_keypair(self) -> KeyPair:
        return self.backend.generate_signing_keypair(self.rng)

    def encryption_keypair(self) -> KeyPair:
        return self.backend.generate_encryption_keypair(self.rng)

    def challenge(self) -> bytes:
        return self.backend.challenge(self.rng)

    def challenge_response(self, challenge: bytes, key: SymKey) -> bytes:
        return self.backend.challenge_response(challenge, key.key)

    # symmetric
    def sym_encrypt(self, message: bytes, key: SymKey) -> CipherText:
        return CipherText(Scheme.SYM, self.backend.sym_encrypt(message, key.key, self.rng))

    def sym_decrypt(self, ct: CipherText, key: SymKey) -> bytes:
        if ct.scheme is not Scheme.SYM:
            raise SchemeMismatch(f"expected Sym, got {ct.scheme.value}")
        return self.backend.sym_decrypt(ct.data, key.key)

    def auth_encrypt(self, message: bytes, key: SymKey) -> CipherText:
        return CipherText(Scheme.AUTH_SYM, self.backend.auth_encrypt(message, key.key, self.rng))

    def auth_decrypt(self, ct: CipherText, key: SymKey) -> bytes:
        if ct.scheme is not Scheme.AUTH_SYM:
            raise SchemeMismatch(f"expected AuthSym, got {ct.scheme.value}")
        return self.backend.auth_decrypt(ct.data, key.key)

    # asymmetric
    def asym_encrypt(self, message: bytes, public: bytes) -> CipherText:
        return CipherText(Scheme.ASYM, self.backend.asym_encrypt(message, public, self.rng))

    def asym_decrypt(self, ct: CipherText, private: bytes) -> bytes:
        if ct.scheme is not Scheme.ASYM:
            raise SchemeMismatch(f"expected Asym, got {ct.scheme.value}")
        return self.backend.asym_decrypt(ct.data, private)

    # signatures
    def sign_hash(self, digest: bytes, private: bytes) -> bytes:
        return self.backend.sign_hash(digest, private)

    def verify_hash(self, digest: bytes, signature: bytes, public: bytes) -> bool:
        return self.backend.verify_hash(digest, signature, public)

    @staticmethod
    def assemble_signed(payload: object, signature: bytes) -> Signed:
        return Signed(payload, signature)

    def sign(self, payload: object, private: bytes) -> Signed:
        return Signed(payload, self.sign_hash(self.hash_of(payload), private))

    def verify_signed(self, signed: Signed, public: bytes) -> object:
        if not isinstance(signed, Signed) or not isinstance(signed.signature, bytes):
            raise BadSignature("not a signed value")
        if not self.verify_hash(self.hash_of(signed.payload), signed.signature, public):
            raise BadSignature("signature does not match payload and key")
        return signed.payload

    # certificates
    def issue_certificate(self, holder_id: str, holder_public: bytes, root_private: bytes) -> Certificate:
        sig = self.sign_hash(self.hash(_cert_body(holder_id, holder_public)), root_private)
        return Certificate(holder_id, holder_public, sig)

    def validate_certificate(self, cert: Certificate, root_public: bytes) -> bytes:
        if not isinstance(cert, Certificate):
            raise InvalidCertificate("not a certificate")
        body = self.hash(_cert_body(cert.holder_id, cert.holder_public))
        if not self.verify_hash(body, cert.issuer_signature, root_public):
            raise InvalidCertificate(f"certificate for {cert.holder_id!r} not issued by root")
        return cert.holder_public
