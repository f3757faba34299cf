import copy
import json
import random

import pytest

from unisuf.rounds import UpdateRoundId
from unisuf.crypto import CryptoConfig, CryptoSuite, make_backend
from unisuf.scenarios import bundled, run_scenario
from unisuf.verifier import Artifacts


def make_suite(backend="real", seed=0):
    return CryptoSuite(make_backend(CryptoConfig(backend=backend)), random.Random(seed))


@pytest.fixture(params=["real", "mock"])
def suite(request):
    return make_suite(request.param, seed=1234)


@pytest.fixture
def real_suite():
    return make_suite("real", seed=99)


@pytest.fixture(scope="session")
def honest():
    """One honest two-round run shared by read-only tests."""
    return run_scenario(bundled("honest-e2e"))


@pytest.fixture
def honest_artifacts(honest):
    return Artifacts.from_world(honest.world)


def clone(art):
    return Artifacts(copy.deepcopy(art.trace), copy.deepcopy(art.materials), copy.deepcopy(art.secrets), copy.deepcopy(art.knowledge))


def vehicle_rounds(art):
    """Round keys of vehicle rounds in start order."""
    return [r["round"] for r in art.trace if r["record"] == "round" and not r["round"].startswith("-/")]


def splice_event(art, event, round_key):
    """Copy ``event`` into ``round_key`` right after that round's last event of the same sub-problem."""
    out = clone(art)
    rid = UpdateRoundId.from_key(round_key)
    new = dict(copy.deepcopy(event), round=round_key, round_vin=rid.vin, round_expiry=rid.expiry)
    sp = event["label"].split(".")[0]
    idx = max(i for i, r in enumerate(out.trace) if r["record"] == "event" and r["round"] == round_key and r["label"].startswith(sp + "."))
    new["time"] = out.trace[idx]["time"]
    out.trace.insert(idx + 1, new)
    return out


def dump(records):
    return "".join(json.dumps(r, sort_keys=True) + "\n" for r in records)


def term_pool(suite, rng, n_keys=5):
    """Keys, nested ciphertexts, pairs and signatures for closure checks."""
    from unisuf.codec import encode
    from unisuf.crypto import KeyKind, SymKey

    keys = [suite.backend.generate_sym_key(rng) for _ in range(n_keys)]
    kp = suite.encryption_keypair()

    def sk(b):
        return SymKey(KeyKind.SOFTWARE, b)

    pool = list(keys) + [kp.private, b"public-noise", "vin-text", 7]
    for i in range(n_keys):
        for j in range(n_keys):
            if i != j:
                pool.append(suite.sym_encrypt(encode(sk(keys[j])), sk(keys[i])))
                pool.append(suite.auth_encrypt(encode((b"secret-%d" % j, keys[j])), sk(keys[i])))
        pool.append(suite.asym_encrypt(encode(sk(keys[i])), kp.public))
        pool.append((suite.auth_encrypt(encode(b"deep-%d" % i), sk(keys[(i + 1) % n_keys])), sk(keys[i])))
        pool.append(suite.sign(keys[i], kp.private))
    return pool


ACCEPTANCE: dict = {}


@pytest.fixture
def criterion(request):
    """Record and print one pass/fail line for an acceptance criterion."""

    def report(number, title, ok, detail=""):
        line = f"[{'PASS' if ok else 'FAIL'}] criterion {number}: {title}" + (f" ({detail})" if detail else "")
        ACCEPTANCE[number] = line
        print(line)
        assert ok, line

    return report


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
