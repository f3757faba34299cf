import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from unisuf.codec import encode
from unisuf.crypto import (
    AuthFailure,
    BadSignature,
    CipherText,
    CryptoConfig,
    DecryptFailure,
    InvalidCertificate,
    KeyKind,
    Scheme,
    SchemeMismatch,
    Signed,
    SymKey,
    make_backend,
)

from conftest import make_suite


class TestConfig:
    def test_defaults(self):
        cfg = CryptoConfig()
        assert cfg.backend == "real" and cfg.sym_key_size == 32 and cfg.digest_size == 32

    @pytest.mark.parametrize(
        "kwargs",
        [{"backend": "rot13"}, {"hash_name": "md5"}, {"sym_key_size": 20}, {"backend": "mock", "sym_key_size": 8}, {"challenge_size": 4}],
    )
    def test_rejects_bad_parameters(self, kwargs):
        with pytest.raises(ValueError):
            CryptoConfig(**kwargs)

    def test_backend_selection(self):
        assert make_backend(CryptoConfig(backend="mock")).name == "mock"
        assert make_backend().name == "real"

    def test_keypair_repr_hides_private(self, suite):
        kp = suite.signing_keypair()
        assert kp.private.hex()[:8] not in repr(kp)

    def test_symkey_type_checks(self):
        with pytest.raises(TypeError):
            SymKey("DKM", b"x")


class TestSymmetric:
    @given(st.binary(max_size=300))
    @settings(max_examples=40)
    def test_sym_round_trip(self, msg):
        s = make_suite("real", 1)
        k = s.new_sym_key(KeyKind.SOFTWARE)
        assert s.sym_decrypt(s.sym_encrypt(msg, k), k) == msg

    @given(st.binary(max_size=300))
    @settings(max_examples=40)
    def test_auth_round_trip(self, msg):
        s = make_suite("mock", 1)
        k = s.new_sym_key(KeyKind.MKM_SOFTWARE)
        assert s.auth_decrypt(s.auth_encrypt(msg, k), k) == msg

    def test_sym_is_randomised(self, suite):
        k = suite.new_sym_key(KeyKind.DKM)
        assert suite.sym_encrypt(b"m", k) != suite.sym_encrypt(b"m", k)

    def test_auth_rejects_wrong_key(self, suite):
        k1, k2 = suite.new_sym_key(KeyKind.IKM), suite.new_sym_key(KeyKind.IKM)
        with pytest.raises(AuthFailure):
            suite.auth_decrypt(suite.auth_encrypt(b"secret", k1), k2)

    def test_auth_rejects_every_single_byte_mutation(self, suite):
        k = suite.new_sym_key(KeyKind.IKM)
        ct = suite.auth_encrypt(b"installation instructions", k)
        for i in range(len(ct.data)):
            data = bytearray(ct.data)
            data[i] ^= 0x80
            with pytest.raises(AuthFailure):
                suite.auth_decrypt(CipherText(Scheme.AUTH_SYM, bytes(data)), k)

    def test_auth_rejects_truncation(self, suite):
        k = suite.new_sym_key(KeyKind.IKM)
        ct = suite.auth_encrypt(b"abc", k)
        with pytest.raises(AuthFailure):
            suite.auth_decrypt(CipherText(Scheme.AUTH_SYM, ct.data[:5]), k)

    def test_sym_wrong_key_gives_garbage(self, suite):
        k1, k2 = suite.new_sym_key(KeyKind.DKM), suite.new_sym_key(KeyKind.DKM)
        msg = encode(("download", b"x" * 40))
        assert suite.sym_decrypt(suite.sym_encrypt(msg, k1), k2) != msg

    def test_scheme_mismatch(self, suite):
        k = suite.new_sym_key(KeyKind.DKM)
        with pytest.raises(SchemeMismatch):
            suite.auth_decrypt(suite.sym_encrypt(b"m", k), k)
        with pytest.raises(SchemeMismatch):
            suite.sym_decrypt(suite.auth_encrypt(b"m", k), k)


class TestAsymmetric:
    def test_round_trip(self, suite):
        kp = suite.encryption_keypair()
        assert suite.asym_decrypt(suite.asym_encrypt(b"wrapped key", kp.public), kp.private) == b"wrapped key"

    def test_wrong_private_key(self, suite):
        a, b = suite.encryption_keypair(), suite.encryption_keypair()
        with pytest.raises(DecryptFailure):
            suite.asym_decrypt(suite.asym_encrypt(b"k", a.public), b.private)

    def test_mutation_detected(self, suite):
        kp = suite.encryption_keypair()
        ct = suite.asym_encrypt(b"k" * 32, kp.public)
        data = bytearray(ct.data)
        data[-1] ^= 1
        with pytest.raises(DecryptFailure):
            suite.asym_decrypt(CipherText(Scheme.ASYM, bytes(data)), kp.private)


class TestSignatures:
    def test_sign_verify(self, suite):
        kp = suite.signing_keypair()
        signed = suite.sign({"a": 1}.__repr__(), kp.private)
        assert suite.verify_signed(signed, kp.public) == signed.payload

    def test_wrong_key(self, suite):
        a, b = suite.signing_keypair(), suite.signing_keypair()
        with pytest.raises(BadSignature):
            suite.verify_signed(suite.sign(b"payload", a.private), b.public)

    def test_modified_payload(self, suite):
        kp = suite.signing_keypair()
        signed = suite.sign(b"payload", kp.private)
        with pytest.raises(BadSignature):
            suite.verify_signed(Signed(b"payloaD", signed.signature), kp.public)

    def test_sign_hash_layer(self, suite):
        kp = suite.signing_keypair()
        h = suite.hash(b"m")
        sig = suite.sign_hash(h, kp.private)
        assert suite.verify_hash(h, sig, kp.public)
        assert not suite.verify_hash(suite.hash(b"m'"), sig, kp.public)

    def test_assemble_matches_sign(self, suite):
        kp = suite.signing_keypair()
        sig = suite.sign_hash(suite.hash_of(b"p"), kp.private)
        assert suite.verify_signed(suite.assemble_signed(b"p", sig), kp.public) == b"p"

    def test_not_signed_rejected(self, suite):
        with pytest.raises(BadSignature):
            suite.verify_signed(b"raw", suite.signing_keypair().public)


class TestCertificates:
    def test_issue_and_validate(self, suite):
        root, holder = suite.signing_keypair(), suite.signing_keypair()
        cert = suite.issue_certificate("VCM", holder.public, root.private)
        assert suite.validate_certificate(cert, root.public) == holder.public

    def test_foreign_root(self, suite):
        root, other, holder = suite.signing_keypair(), suite.signing_keypair(), suite.signing_keypair()
        cert = suite.issue_certificate("VCM", holder.public, other.private)
        with pytest.raises(InvalidCertificate):
            suite.validate_certificate(cert, root.public)

    def test_renamed_holder(self, suite):
        from dataclasses import replace

        root, holder = suite.signing_keypair(), suite.signing_keypair()
        cert = suite.issue_certificate("VCM", holder.public, root.private)
        with pytest.raises(InvalidCertificate):
            suite.validate_certificate(replace(cert, holder_id="PDA"), root.public)


class TestChallenge:
    def test_response_depends_on_key_and_challenge(self, suite):
        k1, k2 = suite.new_sym_key(KeyKind.SECURITY_ACCESS), suite.new_sym_key(KeyKind.SECURITY_ACCESS)
        c = suite.challenge()
        assert len(c) == 16
        assert suite.challenge_response(c, k1) == suite.challenge_response(c, k1)
        assert suite.challenge_response(c, k1) != suite.challenge_response(c, k2)
        assert suite.challenge_response(c, k1) != suite.challenge_response(suite.challenge(), k1)


def test_same_seed_same_keys():
    a, b = make_suite("real", 5), make_suite("real", 5)
    assert a.signing_keypair().public == b.signing_keypair().public
    assert a.new_sym_key(KeyKind.DKM) == b.new_sym_key(KeyKind.DKM)
