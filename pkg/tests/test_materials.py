from dataclasses import replace

import pytest

from unisuf.codec import decode, encode
from unisuf.crypto import BadSignature, CipherText, CryptoError, DecryptFailure, KeyKind, Scheme
from unisuf.materials import (
    POLICY_DOWNLOAD,
    CertificatePackage,
    EmptyKeyList,
    InnerSignatureInvalid,
    KindMismatch,
    MissingPart,
    OuterSignatureInvalid,
    PartSignatureInvalid,
    RoundTag,
    Software,
    SoftwareUrl,
    SoftwareVersions,
    VinData,
    Vso,
    build_key_manifest,
    build_mkm,
    build_ska,
    build_software_list,
    build_vuup,
    create_software_list,
    encase_software,
    onboard_versions,
    open_encased,
    open_ska_entry,
    unwrap_key_manifest,
    validate_vuup,
)


@pytest.fixture
def parties(suite):
    names = ("root", "supplier", "vcm", "pda", "pia", "adv")
    keys = {n: suite.signing_keypair() for n in names}
    keys["vehicle"] = suite.encryption_keypair()
    return keys


class TestEncasedSoftware:
    def test_round_trip(self, suite, parties):
        sw = Software(3, b"firmware image")
        key = suite.new_sym_key(KeyKind.SOFTWARE)
        enc = encase_software(suite, suite.sign(sw, parties["supplier"].private), key, parties["vcm"].private, parties["supplier"].public)
        assert open_encased(suite, enc, key, parties["vcm"].public, parties["supplier"].public) == sw

    def test_requires_supplier_signature(self, suite, parties):
        key = suite.new_sym_key(KeyKind.SOFTWARE)
        forged = suite.sign(Software(3, b"x"), parties["adv"].private)
        with pytest.raises(BadSignature):
            encase_software(suite, forged, key, parties["vcm"].private, parties["supplier"].public)

    def test_requires_software_key(self, suite, parties):
        key = suite.new_sym_key(KeyKind.DKM)
        signed = suite.sign(Software(3, b"x"), parties["supplier"].private)
        with pytest.raises(KindMismatch):
            encase_software(suite, signed, key, parties["vcm"].private, parties["supplier"].public)

    def test_layers_checked_in_order(self, suite, parties):
        key = suite.new_sym_key(KeyKind.SOFTWARE)
        signed = suite.sign(Software(3, b"x"), parties["supplier"].private)
        enc = encase_software(suite, signed, key, parties["vcm"].private, parties["supplier"].public)
        with pytest.raises(OuterSignatureInvalid):
            open_encased(suite, enc, key, parties["adv"].public, parties["supplier"].public)
        with pytest.raises(DecryptFailure):
            open_encased(suite, enc, suite.new_sym_key(KeyKind.SOFTWARE), parties["vcm"].public, parties["supplier"].public)
        with pytest.raises(InnerSignatureInvalid):
            open_encased(suite, enc, key, parties["vcm"].public, parties["adv"].public)


class TestManifests:
    def test_wrap_unwrap(self, suite, parties):
        key = suite.new_sym_key(KeyKind.DKM)
        m = build_key_manifest(suite, key, parties["vehicle"].public, POLICY_DOWNLOAD, KeyKind.DKM)
        assert m.policy == POLICY_DOWNLOAD
        assert unwrap_key_manifest(suite, m, parties["vehicle"].private) == key

    def test_key_bytes_not_visible(self, suite, parties):
        key = suite.new_sym_key(KeyKind.IKM)
        m = build_key_manifest(suite, key, parties["vehicle"].public, b"p", KeyKind.IKM)
        assert key.key not in encode(m)

    def test_kind_mismatch(self, suite, parties):
        with pytest.raises(KindMismatch):
            build_key_manifest(suite, suite.new_sym_key(KeyKind.DKM), parties["vehicle"].public, b"p", KeyKind.IKM)
        with pytest.raises(KindMismatch):
            build_key_manifest(suite, suite.new_sym_key(KeyKind.SOFTWARE), parties["vehicle"].public, b"p", KeyKind.SOFTWARE)

    def test_relabelled_manifest_rejected(self, suite, parties):
        m = build_key_manifest(suite, suite.new_sym_key(KeyKind.DKM), parties["vehicle"].public, b"p", KeyKind.DKM)
        with pytest.raises(KindMismatch):
            unwrap_key_manifest(suite, replace(m, kind=KeyKind.IKM), parties["vehicle"].private)

    def test_mkm_and_ska(self, suite, parties):
        sa_master = suite.new_sym_key(KeyKind.MKM_SECURITY_ACCESS)
        sw_master = suite.new_sym_key(KeyKind.MKM_SOFTWARE)
        mkm = build_mkm(suite, sa_master, sw_master, parties["vehicle"].public)
        assert unwrap_key_manifest(suite, mkm.security_access, parties["vehicle"].private) == sa_master
        sa, sw = suite.new_sym_key(KeyKind.SECURITY_ACCESS), suite.new_sym_key(KeyKind.SOFTWARE)
        ska = build_ska(suite, [sa], [sw], sa_master, sw_master)
        assert open_ska_entry(suite, ska.security_access_entries[0], sa_master) == sa
        assert open_ska_entry(suite, ska.software_entries[0], sw_master) == sw
        with pytest.raises(CryptoError):
            open_ska_entry(suite, ska.software_entries[0], sa_master)

    def test_ska_validation(self, suite):
        sa_master = suite.new_sym_key(KeyKind.MKM_SECURITY_ACCESS)
        sw_master = suite.new_sym_key(KeyKind.MKM_SOFTWARE)
        sw = suite.new_sym_key(KeyKind.SOFTWARE)
        with pytest.raises(EmptyKeyList):
            build_ska(suite, [], [sw], sa_master, sw_master)
        with pytest.raises(KindMismatch):
            build_ska(suite, [sw], [sw], sa_master, sw_master)


class TestSoftwareList:
    def tag(self):
        return RoundTag("VIN1", 100, 7)

    def test_picks_newest_above_onboard(self):
        vso = Vso("VIN1", onboard_versions({"ecu-fw": 2, "radio": 9}), self.tag())
        versions = SoftwareVersions(
            (SoftwareUrl("ecu-fw", 2, "u2"), SoftwareUrl("ecu-fw", 4, "u4"), SoftwareUrl("ecu-fw", 3, "u3"), SoftwareUrl("radio", 9, "r9"))
        )
        sl = create_software_list(vso, VinData("VIN1", "ecu-fw"), versions, self.tag())
        assert [(e.sw_id, e.version, e.url) for e in sl.entries] == [("ecu-fw", 4, "u4")]
        assert sl.round == self.tag()

    def test_nothing_newer(self):
        vso = Vso("VIN1", onboard_versions({"ecu-fw": 5}), self.tag())
        sl = create_software_list(vso, VinData("VIN1", "ecu-fw"), SoftwareVersions((SoftwareUrl("ecu-fw", 5, "u"),)), self.tag())
        assert sl.entries == ()

    def test_signed_list(self, suite, parties):
        vso = Vso("VIN1", onboard_versions({"ecu-fw": 1}), self.tag())
        signed = build_software_list(
            suite, vso, VinData("VIN1", "ecu-fw"), SoftwareVersions((SoftwareUrl("ecu-fw", 2, "u"),)), self.tag(), parties["vcm"].private
        )
        assert suite.verify_signed(signed, parties["vcm"].public).entries[0].version == 2


class TestVuup:
    def build(self, suite, parties, **override):
        root = parties["root"]
        certs = CertificatePackage(
            suite.issue_certificate("PDA", parties["pda"].public, root.private),
            suite.issue_certificate("PIA", parties["pia"].public, root.private),
        )
        vcm_cert = suite.issue_certificate("VCM", parties["vcm"].public, root.private)
        dkm = build_key_manifest(suite, suite.new_sym_key(KeyKind.DKM), parties["vehicle"].public, b"d", KeyKind.DKM)
        ikm = build_key_manifest(suite, suite.new_sym_key(KeyKind.IKM), parties["vehicle"].public, b"i", KeyKind.IKM)
        parts = dict(
            certificates=certs,
            download_instructions=suite.sign(CipherText(Scheme.SYM, b"di"), parties["pda"].private),
            dkm=suite.sign(dkm, parties["pda"].private),
            installation_instructions=suite.sign(CipherText(Scheme.SYM, b"ii"), parties["pia"].private),
            ikm=suite.sign(ikm, parties["pia"].private),
        )
        parts.update(override)
        return build_vuup(suite, vcm_sk=parties["vcm"].private, vcm_cert=vcm_cert, root_pk=root.public, **parts)

    def test_valid(self, suite, parties):
        vuup = self.build(suite, parties)
        content = validate_vuup(suite, vuup, parties["root"].public)
        assert decode(encode(content)) == content

    def test_missing_part(self, suite, parties):
        with pytest.raises(MissingPart):
            self.build(suite, parties, ikm=None)

    def test_part_signed_by_wrong_agent(self, suite, parties):
        bad = suite.sign(CipherText(Scheme.SYM, b"di"), parties["pia"].private)
        with pytest.raises(PartSignatureInvalid):
            self.build(suite, parties, download_instructions=bad)

    def test_content_tampered_after_signing(self, suite, parties):
        vuup = self.build(suite, parties)
        other = self.build(suite, parties)
        spliced = replace(vuup, content=replace(vuup.content, payload=other.content.payload))
        with pytest.raises(PartSignatureInvalid):
            validate_vuup(suite, spliced, parties["root"].public)

    def test_foreign_root(self, suite, parties):
        vuup = self.build(suite, parties)
        with pytest.raises(CryptoError):
            validate_vuup(suite, vuup, parties["adv"].public)
