"""Dolev-Yao knowledge base.

Terms are the decoded material values (dataclasses, tuples, bytes and scalar
atoms).  Analysis runs eagerly to a fixpoint in :meth:`Knowledge.derive_closure`;
synthesis (pairing, re-encryption, signing) is decided lazily in
:meth:`Knowledge.knows` by asking whether every non-public leaf of a term is
already known.
"""

from __future__ import annotations

import dataclasses
import enum
from collections import deque
from typing import Any, Iterable

from .codec import MalformedEncoding, children, decode, digest_of
from .crypto import CipherText, CryptoBackend, CryptoError, Scheme


def _is_structured(term: Any) -> bool:
    return isinstance(term, tuple) or (dataclasses.is_dataclass(term) and not isinstance(term, type))


def try_decrypt(backend: CryptoBackend, ct: CipherText, key: bytes) -> Any | None:
    """Return the decoded plaintext term if ``key`` opens ``ct``, else None.

    Unauthenticated ciphertexts only count as opened when the plaintext is a
    well-formed canonical encoding, since a wrong key yields garbage there.
    """
    try:
        if ct.scheme is Scheme.AUTH_SYM:
            plain = backend.auth_decrypt(ct.data, key)
        elif ct.scheme is Scheme.ASYM:
            plain = backend.asym_decrypt(ct.data, key)
        else:
            plain = backend.sym_decrypt(ct.data, key)
    except (CryptoError, ValueError):
        return None
    try:
        return decode(plain)
    except MalformedEncoding:
        if ct.scheme is Scheme.SYM:
            return None
        return plain


def secret_leaves(term: Any) -> set[str]:
    """Digests of the parts an attacker cannot synthesise from public data.

    Byte strings, text (URLs and identifiers are fresh names) and ciphertexts
    are leaves; integers, booleans and enums are guessable.
    """
    out: set[str] = set()
    stack = [term]
    while stack:
        t = stack.pop()
        if isinstance(t, enum.Enum):  # str-valued enums are still guessable
            continue
        if isinstance(t, (bytes, str, CipherText)):
            out.add(digest_of(t))
        elif _is_structured(t):
            stack.extend(children(t))
    return out


class Knowledge:
    """Monotone set of terms plus the bookkeeping needed for closure."""

    def __init__(self, backend: CryptoBackend):
        self.backend = backend
        self.terms: dict[str, Any] = {}
        self._atoms: dict[str, bytes] = {}
        self._sealed: dict[str, CipherText] = {}  # ciphertexts not yet opened
        self._pending: deque = deque()

    # -- input -------------------------------------------------------------
    def add(self, term: Any) -> "Knowledge":
        self._pending.append(term)
        return self

    def observe(self, payload: bytes) -> "Knowledge":
        try:
            self.add(decode(payload))
        except MalformedEncoding:
            self.add(bytes(payload))
        return self

    # -- closure -----------------------------------------------------------
    def _try_open(self, ct_digest: str, ct: CipherText, keys: Iterable[bytes]) -> None:
        for key in keys:
            plain = try_decrypt(self.backend, ct, key)
            if plain is not None:
                self._sealed.pop(ct_digest, None)
                self._pending.append(plain)
                return

    def derive_closure(self) -> "Knowledge":
        while self._pending:
            term = self._pending.popleft()
            d = digest_of(term)
            if d in self.terms:
                continue
            self.terms[d] = term
            if isinstance(term, bytes):
                self._atoms[d] = term
                for cd, ct in list(self._sealed.items()):
                    self._try_open(cd, ct, (term,))
            elif isinstance(term, CipherText):
                self._sealed[d] = term
                self._try_open(d, term, list(self._atoms.values()))
            elif _is_structured(term):
                self._pending.extend(children(term))
        return self

    # -- queries -----------------------------------------------------------
    def knows(self, secret: Any) -> bool:
        self.derive_closure()
        if digest_of(secret) in self.terms:
            return True
        leaves = secret_leaves(secret)
        return bool(leaves) and all(leaf in self.terms for leaf in leaves)

    def digests(self) -> list[str]:
        self.derive_closure()
        return sorted(self.terms)

    def __contains__(self, digest: str) -> bool:
        return digest in self.terms

    def __len__(self) -> int:
        return len(self.terms)


def observe(k: Knowledge, payload: bytes) -> Knowledge:
    return k.observe(payload)


def derive_closure(k: Knowledge) -> Knowledge:
    return k.derive_closure()


def knows(k: Knowledge, secret: Any) -> bool:
    return k.knows(secret)


def known_from_digests(digests: set[str], secret_digest: str, leaves: Iterable[str]) -> bool:
    """Replay of :meth:`Knowledge.knows` over a stored closure snapshot."""
    if secret_digest in digests:
        return True
    leaves = list(leaves)
    return bool(leaves) and all(leaf in digests for leaf in leaves)


def naive_closure(backend: CryptoBackend, initial: Iterable[Any]) -> set[str]:
    """Reference fixpoint: re-apply every rule to every term (pair) until stable."""
    known: dict[str, Any] = {}
    for t in initial:
        known[digest_of(t)] = t
    changed = True
    while changed:
        changed = False
        current = list(known.values())
        derived: list[Any] = []
        for t in current:
            if not isinstance(t, CipherText):
                derived.extend(children(t))
            else:  # ciphertexts open only by decryption, never by projection
                for k in current:
                    if isinstance(k, bytes):
                        plain = try_decrypt(backend, t, k)
                        if plain is not None:
                            derived.append(plain)
        for t in derived:
            d = digest_of(t)
            if d not in known:
                known[d] = t
                changed = True
    return set(known)
