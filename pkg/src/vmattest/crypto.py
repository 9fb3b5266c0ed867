"""Hashes, Ed25519 signatures, MACs and a minimal certificate format.

Everything above this module treats signatures as opaque byte strings. Keys
come from a seedable randomness source so a scenario replays bit-for-bit.

Canonical encoding: every structured value is a sequence of fields, each
written as a 4-byte big-endian length followed by the raw bytes.
"""

from __future__ import annotations

import enum
import hashlib
import hmac
import random
import struct
from dataclasses import dataclass
from typing import Iterable, Sequence

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives.asymmetric.ed25519 import (
    Ed25519PrivateKey,
    Ed25519PublicKey,
)
from cryptography.hazmat.primitives.ciphers.aead import AESGCM
from cryptography.hazmat.primitives.serialization import Encoding, PublicFormat

from .errors import ChainCycleError, KeyFormatError


class HashAlg(enum.Enum):
    SHA1 = "sha1"
    SHA256 = "sha256"
    SHA512 = "sha512"

    @property
    def size(self) -> int:
        return _SIZES[self]

    @classmethod
    def parse(cls, name: str) -> "HashAlg":
        try:
            return cls(name.lower())
        except ValueError:
            raise ValueError(f"unknown hash algorithm {name!r}") from None


_SIZES = {HashAlg.SHA1: 20, HashAlg.SHA256: 32, HashAlg.SHA512: 64}
BANKS = (HashAlg.SHA1, HashAlg.SHA256, HashAlg.SHA512)


@dataclass(frozen=True)
class Digest:
    algorithm: HashAlg
    value: bytes

    def __post_init__(self):
        if len(self.value) != self.algorithm.size:
            raise ValueError(
                f"{self.algorithm.value} digest must be {self.algorithm.size} bytes, got {len(self.value)}"
            )

    @classmethod
    def zero(cls, algorithm: HashAlg) -> "Digest":
        return cls(algorithm, bytes(algorithm.size))

    @classmethod
    def fromhex(cls, algorithm: HashAlg, text: str) -> "Digest":
        return cls(algorithm, bytes.fromhex(text))

    def hex(self) -> str:
        return self.value.hex()

    def __str__(self) -> str:
        return f"{self.algorithm.value}:{self.value.hex()}"


def hash_data(algorithm: HashAlg, data: bytes) -> Digest:
    return Digest(algorithm, hashlib.new(algorithm.value, data).digest())


# -- canonical encoding ------------------------------------------------------

def encode_fields(*fields: bytes) -> bytes:
    out = bytearray()
    for f in fields:
        out += struct.pack(">I", len(f))
        out += f
    return bytes(out)


def decode_fields(data: bytes, count: int | None = None) -> list[bytes]:
    """Inverse of :func:`encode_fields`; ``count`` enforces an exact arity."""
    fields = []
    pos = 0
    while pos < len(data):
        if pos + 4 > len(data):
            raise ValueError("truncated length prefix")
        (n,) = struct.unpack_from(">I", data, pos)
        pos += 4
        if pos + n > len(data):
            raise ValueError("truncated field")
        fields.append(bytes(data[pos:pos + n]))
        pos += n
    if count is not None and len(fields) != count:
        raise ValueError(f"expected {count} fields, got {len(fields)}")
    return fields


# -- randomness --------------------------------------------------------------

class Rng:
    """Seeded byte source. ``child(label)`` derives an independent stream so
    that components do not perturb each other's draws."""

    def __init__(self, seed: int | str, label: str = "root"):
        self._name = f"{seed}/{label}"
        self._seed = seed
        self._rand = random.Random(self._name)

    def child(self, label: str) -> "Rng":
        return Rng(self._seed, f"{self._name}/{label}")

    def bytes(self, n: int) -> bytes:
        return self._rand.randbytes(n)

    def randrange(self, *args) -> int:
        return self._rand.randrange(*args)

    def choice(self, seq: Sequence):
        return self._rand.choice(seq)

    def shuffle(self, seq: list) -> None:
        self._rand.shuffle(seq)


# -- signatures --------------------------------------------------------------

SIGNATURE_SIZE = 64
KEY_SIZE = 32


@dataclass(frozen=True)
class SigningKeyPair:
    public: bytes
    private: bytes

    @classmethod
    def generate(cls, rng: Rng) -> "SigningKeyPair":
        return cls.from_private(rng.bytes(KEY_SIZE))

    @classmethod
    def from_private(cls, private: bytes) -> "SigningKeyPair":
        if len(private) != KEY_SIZE:
            raise KeyFormatError("private key must be 32 bytes")
        key = Ed25519PrivateKey.from_private_bytes(private)
        public = key.public_key().public_bytes(Encoding.Raw, PublicFormat.Raw)
        return cls(public=public, private=private)

    def sign(self, message: bytes) -> bytes:
        return sign(self.private, message)

    def __repr__(self) -> str:
        return f"SigningKeyPair(public={self.public.hex()[:16]}...)"


def sign(private: bytes, message: bytes) -> bytes:
    if not isinstance(private, (bytes, bytearray)) or len(private) != KEY_SIZE:
        raise KeyFormatError("private key must be 32 bytes")
    return Ed25519PrivateKey.from_private_bytes(bytes(private)).sign(message)


def verify(public: bytes, message: bytes, signature: bytes) -> bool:
    """Return whether ``signature`` is valid. A malformed *key* raises."""
    if not isinstance(public, (bytes, bytearray)) or len(public) != KEY_SIZE:
        raise KeyFormatError("public key must be 32 bytes")
    try:
        key = Ed25519PublicKey.from_public_bytes(bytes(public))
    except ValueError as exc:
        raise KeyFormatError(str(exc)) from exc
    if len(signature) != SIGNATURE_SIZE:
        return False
    try:
        key.verify(bytes(signature), message)
    except InvalidSignature:
        return False
    return True


def mac(key: bytes, *parts: bytes) -> bytes:
    return hmac.new(key, encode_fields(*parts), hashlib.sha256).digest()


def mac_equal(a: bytes, b: bytes) -> bool:
    return hmac.compare_digest(a, b)


# -- authenticated encryption (sealing) -------------------------------------

def aead_encrypt(key: bytes, nonce: bytes, plaintext: bytes, aad: bytes = b"") -> bytes:
    return nonce + AESGCM(key).encrypt(nonce, plaintext, aad)


def aead_decrypt(key: bytes, blob: bytes, aad: bytes = b"") -> bytes:
    """Raises ``cryptography.exceptions.InvalidTag`` on any mismatch."""
    return AESGCM(key).decrypt(blob[:12], blob[12:], aad)


# -- certificates ------------------------------------------------------------

@dataclass(frozen=True)
class Certificate:
    subject: str
    public_key: bytes
    issuer: str
    signature: bytes

    def tbs(self) -> bytes:
        return encode_fields(self.subject.encode(), self.public_key, self.issuer.encode())

    def to_bytes(self) -> bytes:
        return encode_fields(self.subject.encode(), self.public_key, self.issuer.encode(), self.signature)

    @classmethod
    def from_bytes(cls, data: bytes) -> "Certificate":
        subject, public_key, issuer, signature = decode_fields(data, 4)
        return cls(subject.decode(), public_key, issuer.decode(), signature)

    def signed_by(self, issuer: "Certificate") -> bool:
        return self.issuer == issuer.subject and verify(issuer.public_key, self.tbs(), self.signature)

    @property
    def self_signed(self) -> bool:
        return self.subject == self.issuer and verify(self.public_key, self.tbs(), self.signature)


def issue_certificate(subject: str, subject_public: bytes, issuer: str, issuer_key: SigningKeyPair) -> Certificate:
    unsigned = Certificate(subject, subject_public, issuer, b"")
    return Certificate(subject, subject_public, issuer, issuer_key.sign(unsigned.tbs()))


def self_signed(subject: str, key: SigningKeyPair) -> Certificate:
    return issue_certificate(subject, key.public, subject, key)


def verify_chain(
    leaf: Certificate,
    roots: Iterable[Certificate],
    intermediates: Iterable[Certificate] = (),
) -> bool:
    """True iff an unbroken signature path leads from ``leaf`` to a root.

    Roots are always tried before intermediates at every hop, so enlarging
    ``roots`` can only shorten a successful path. A certificate reappearing on
    the path under exploration raises :class:`ChainCycleError`.
    """
    roots = list(roots)
    pool = list(intermediates)

    def walk(cert: Certificate, path: tuple[Certificate, ...]) -> bool:
        if cert in roots and cert.self_signed:
            return True
        for root in roots:
            if cert.signed_by(root):
                return True
        for parent in pool:
            if parent.subject != cert.issuer:
                continue
            if parent in path:
                raise ChainCycleError(f"issuer cycle through {parent.subject!r}")
            if cert.signed_by(parent) and walk(parent, path + (parent,)):
                return True
        return False

    return walk(leaf, (leaf,))
