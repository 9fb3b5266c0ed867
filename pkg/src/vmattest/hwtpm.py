"""Simulated hardware TPM.

Only the behaviour the protocol depends on is modelled: extend-only PCR
banks, an endorsement identity certified by the manufacturer, an attestation
key certified by the endorsement key, quotes, platform-bound sealing and
NV monotonic counters. Commands on one instance are serialized by a lock.
"""

from __future__ import annotations

import struct
import threading
from dataclasses import dataclass, field
from typing import Iterable, Sequence

from cryptography.exceptions import InvalidTag

from .crypto import (
    BANKS,
    Certificate,
    Digest,
    HashAlg,
    Rng,
    SigningKeyPair,
    aead_decrypt,
    aead_encrypt,
    encode_fields,
    hash_data,
    issue_certificate,
    self_signed,
    verify,
    verify_chain,
)
from .errors import LocalityViolation, NotProvisioned, TpmError, UndefinedCounter

PCR_COUNT = 24
NONCE_SIZE = 32


class PcrState:
    """24 slots in each of the SHA-1, SHA-256 and SHA-512 banks."""

    def __init__(self):
        self.reset()

    def reset(self) -> None:
        self._banks = {alg: [bytes(alg.size)] * PCR_COUNT for alg in BANKS}

    @staticmethod
    def _check_index(index: int) -> None:
        if not isinstance(index, int) or not 0 <= index < PCR_COUNT:
            raise TpmError(f"PCR index {index!r} out of range 0..{PCR_COUNT - 1}")

    def read(self, bank: HashAlg, index: int) -> Digest:
        self._check_index(index)
        return Digest(bank, self._banks[bank][index])

    def extend(self, bank: HashAlg, index: int, data: Digest | bytes) -> Digest:
        self._check_index(index)
        raw = data.value if isinstance(data, Digest) else bytes(data)
        if isinstance(data, Digest) and data.algorithm is not bank:
            raise TpmError(f"{data.algorithm.value} digest extended into {bank.value} bank")
        if len(raw) != bank.size:
            raise TpmError(f"{bank.value} bank expects {bank.size}-byte data, got {len(raw)}")
        new = hash_data(bank, self._banks[bank][index] + raw)
        self._banks[bank][index] = new.value
        return new

    def snapshot(self) -> dict[tuple[HashAlg, int], bytes]:
        return {(alg, i): v for alg, slots in self._banks.items() for i, v in enumerate(slots)}

    def to_bytes(self) -> bytes:
        return b"".join(b"".join(self._banks[alg]) for alg in BANKS)

    @classmethod
    def from_bytes(cls, data: bytes) -> "PcrState":
        state = cls()
        pos = 0
        for alg in BANKS:
            slots = []
            for _ in range(PCR_COUNT):
                slots.append(bytes(data[pos:pos + alg.size]))
                pos += alg.size
            state._banks[alg] = slots
        if pos != len(data):
            raise ValueError("PCR state has wrong length")
        return state


def fold(bank: HashAlg, items: Iterable[Digest | bytes]) -> Digest:
    """Value of a PCR in ``bank`` after extending ``items`` from reset."""
    value = bytes(bank.size)
    for item in items:
        raw = item.value if isinstance(item, Digest) else item
        value = hash_data(bank, value + raw).value
    return Digest(bank, value)


@dataclass(frozen=True)
class TpmQuote:
    selected_pcrs: tuple[tuple[HashAlg, int, Digest], ...]
    nonce: bytes
    signature: bytes
    # AK certificate first, then its issuers (EK certificate)
    signer_chain: tuple[Certificate, ...] = ()

    def body(self) -> bytes:
        return quote_body(self.nonce, self.selected_pcrs)

    def value(self, bank: HashAlg, index: int) -> Digest | None:
        for b, i, v in self.selected_pcrs:
            if b is bank and i == index:
                return v
        return None

    def signature_valid(self) -> bool:
        if not self.signer_chain:
            return False
        return verify(self.signer_chain[0].public_key, self.body(), self.signature)

    def chains_to(self, roots: Iterable[Certificate]) -> bool:
        if not self.signer_chain:
            return False
        return verify_chain(self.signer_chain[0], roots, self.signer_chain[1:])


def quote_body(nonce: bytes, selected) -> bytes:
    parts = [b"QUOT", nonce]
    for bank, index, value in selected:
        parts.append(bank.value.encode() + struct.pack(">B", index) + value.value)
    return encode_fields(*parts)


@dataclass(frozen=True)
class SealedBlob:
    ciphertext: bytes
    platform_binding: str


@dataclass
class NvCounter:
    id: int
    value: int = 0


@dataclass
class Manufacturer:
    """TPM vendor CA: a self-signed root that certifies endorsement keys."""

    name: str
    key: SigningKeyPair
    root: Certificate

    @classmethod
    def create(cls, name: str, rng: Rng) -> "Manufacturer":
        key = SigningKeyPair.generate(rng)
        return cls(name, key, self_signed(name, key))


class HardwareTpm:
    def __init__(self, name: str, manufacturer: Manufacturer, rng: Rng):
        self.name = name
        self._rng = rng
        self._lock = threading.RLock()
        self.pcrs = PcrState()
        self._ek = SigningKeyPair.generate(rng.child("ek"))
        self.ek_certificate = issue_certificate(f"ek:{name}", self._ek.public, manufacturer.name, manufacturer.key)
        self._ak: SigningKeyPair | None = None
        self.ak_certificate: Certificate | None = None
        self._seal_key = rng.child("seal").bytes(32)
        self._counters: dict[int, NvCounter] = {}
        self._next_counter = 1

    # -- PCRs ---------------------------------------------------------------

    def reset(self) -> None:
        """Platform reboot: PCRs return to zero, NV storage survives."""
        with self._lock:
            self.pcrs.reset()

    def pcr_extend(self, bank: HashAlg, index: int, data: Digest | bytes) -> Digest:
        with self._lock:
            return self.pcrs.extend(bank, index, data)

    def pcr_read(self, bank: HashAlg, index: int) -> Digest:
        with self._lock:
            return self.pcrs.read(bank, index)

    # -- attestation ----------------------------------------------------------

    def provision_attestation_key(self) -> Certificate:
        """Create the AK and certify it with the EK.

        Stands in for the activation-of-credential exchange; the resulting
        chain is manufacturer root -> EK certificate -> AK certificate.
        """
        with self._lock:
            self._ak = SigningKeyPair.generate(self._rng.child("ak"))
            self.ak_certificate = issue_certificate(f"ak:{self.name}", self._ak.public, f"ek:{self.name}", self._ek)
            return self.ak_certificate

    def quote(self, nonce: bytes, selection: Sequence[tuple[HashAlg, int]]) -> TpmQuote:
        if len(nonce) != NONCE_SIZE:
            raise TpmError(f"quote nonce must be {NONCE_SIZE} bytes")
        if not selection:
            raise TpmError("empty PCR selection")
        with self._lock:
            if self._ak is None:
                raise NotProvisioned("attestation key not provisioned")
            selected = tuple((bank, index, self.pcrs.read(bank, index)) for bank, index in selection)
            sig = self._ak.sign(quote_body(nonce, selected))
            return TpmQuote(selected, bytes(nonce), sig, (self.ak_certificate, self.ek_certificate))

    # -- sealing --------------------------------------------------------------

    @property
    def identity(self) -> str:
        return self.ek_certificate.public_key.hex()

    def seal(self, data: bytes) -> SealedBlob:
        with self._lock:
            nonce = self._rng.bytes(12)
        return SealedBlob(aead_encrypt(self._seal_key, nonce, data, self.identity.encode()), self.identity)

    def unseal(self, blob: SealedBlob) -> bytes:
        if blob.platform_binding != self.identity:
            raise LocalityViolation(f"blob sealed to another TPM, not {self.name}")
        try:
            return aead_decrypt(self._seal_key, blob.ciphertext, self.identity.encode())
        except InvalidTag:
            raise LocalityViolation("blob does not unseal on this TPM") from None

    # -- NV counters ----------------------------------------------------------

    def nv_define(self) -> int:
        with self._lock:
            cid = self._next_counter
            self._next_counter += 1
            self._counters[cid] = NvCounter(cid)
            return cid

    def _counter(self, cid: int) -> NvCounter:
        try:
            return self._counters[cid]
        except KeyError:
            raise UndefinedCounter(f"NV counter {cid} not defined") from None

    def nv_increment(self, cid: int) -> int:
        with self._lock:
            c = self._counter(cid)
            c.value += 1
            return c.value

    def nv_read(self, cid: int) -> int:
        with self._lock:
            return self._counter(cid).value
