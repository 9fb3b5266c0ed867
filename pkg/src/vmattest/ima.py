"""Simulated Integrity Measurement Architecture (host and guest).

Files are measured on first open. Each new measurement is appended to the
log and sent to the TPM as one three-bank extend: SHA-1 carries the template
digest, SHA-256 the file digest and SHA-512 a digest of the file signature.
The log's SHA-1 fold anchors tamper evidence.
"""

from __future__ import annotations

import enum
import struct
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable

from .crypto import Certificate, Digest, HashAlg, SigningKeyPair, hash_data, verify
from .errors import SimulationError
from .hwtpm import fold
from .policy import Decision
from .wire import ExtendPayload

IMA_PCR = 10


@dataclass(frozen=True)
class SimFile:
    path: str
    content: bytes
    xattr_signature: bytes | None = None

    @property
    def digest(self) -> Digest:
        return hash_data(HashAlg.SHA256, self.content)

    def signed(self, key: SigningKeyPair) -> "SimFile":
        return SimFile(self.path, self.content, key.sign(self.digest.value))


def template_digest(path: str, file_digest: Digest) -> Digest:
    encoded = path.encode()
    return hash_data(HashAlg.SHA1, struct.pack(">I", len(encoded)) + encoded + file_digest.value)


def signature_digest(signature: bytes | None) -> Digest:
    if not signature:
        return Digest.zero(HashAlg.SHA512)
    return hash_data(HashAlg.SHA512, signature)


@dataclass(frozen=True)
class ImaLogEntry:
    path: str
    file_digest: Digest
    integrity_digest: Digest
    signature: bytes | None = None

    @classmethod
    def from_file(cls, f: SimFile) -> "ImaLogEntry":
        d = f.digest
        return cls(f.path, d, template_digest(f.path, d), f.xattr_signature)

    def consistent(self) -> bool:
        return self.integrity_digest == template_digest(self.path, self.file_digest)

    def payload(self, pcr_index: int = IMA_PCR) -> ExtendPayload:
        return ExtendPayload(
            pcr_index,
            self.integrity_digest.value,
            self.file_digest.value,
            signature_digest(self.signature).value,
            self.signature or b"",
        )

    def to_line(self, pcr_index: int = IMA_PCR) -> str:
        parts = [str(pcr_index), self.integrity_digest.hex(), self.file_digest.hex(), self.path]
        if self.signature:
            parts.append(self.signature.hex())
        return " ".join(parts)

    @classmethod
    def from_line(cls, line: str) -> tuple[int, "ImaLogEntry"]:
        parts = line.split()
        if len(parts) not in (4, 5):
            raise ValueError(f"malformed IMA log line: {line!r}")
        sig = bytes.fromhex(parts[4]) if len(parts) == 5 else None
        return int(parts[0]), cls(
            parts[3],
            Digest.fromhex(HashAlg.SHA256, parts[2]),
            Digest.fromhex(HashAlg.SHA1, parts[1]),
            sig,
        )


@dataclass
class ImaLog:
    entries: list[ImaLogEntry] = field(default_factory=list)
    pcr_index: int = IMA_PCR

    def fold(self) -> Digest:
        return fold(HashAlg.SHA1, (e.integrity_digest for e in self.entries))

    def export(self) -> str:
        return "".join(e.to_line(self.pcr_index) + "\n" for e in self.entries)

    @classmethod
    def parse(cls, text: str) -> "ImaLog":
        log = cls()
        for line in text.splitlines():
            if not line.strip():
                continue
            pcr, entry = ImaLogEntry.from_line(line)
            log.pcr_index = pcr
            log.entries.append(entry)
        return log

    def __len__(self):
        return len(self.entries)


def verify_log(log: ImaLog, pcr_value: Digest) -> bool:
    # a relabelled entry (path/digest edited) no longer matches its template
    if not all(e.consistent() for e in log.entries):
        return False
    return log.fold() == pcr_value


def host_appraise(f: SimFile, host_signer_certs: Iterable[Certificate]) -> Decision:
    if not f.xattr_signature:
        return Decision.DENY
    for cert in host_signer_certs:
        if verify(cert.public_key, f.digest.value, f.xattr_signature):
            return Decision.ALLOW
    return Decision.DENY


class OpenResult(enum.Enum):
    LOADED = "Loaded"
    DENIED = "Denied"
    CACHED_HIT = "CachedHit"


# extend target: returns True when the TPM accepted the measurement
ExtendTarget = Callable[[ExtendPayload], bool]


class ImaEngine:
    """One engine per simulated OS. ``appraisal_certs`` switches on local
    signature appraisal (host mode); otherwise admission is decided entirely
    by the extend target (guest mode, enforced by the emulated TPM)."""

    def __init__(self, extend: ExtendTarget, *, pcr_index: int = IMA_PCR,
                 appraisal_certs: Iterable[Certificate] | None = None):
        self._extend = extend
        self.log = ImaLog(pcr_index=pcr_index)
        self.appraisal_certs = None if appraisal_certs is None else tuple(appraisal_certs)
        self._measured: set[tuple[str, bytes]] = set()
        self._lock = threading.Lock()
        self.extends = 0

    def measure_open(self, f: SimFile) -> OpenResult:
        with self._lock:
            entry = ImaLogEntry.from_file(f)
            key = (f.path, entry.file_digest.value)
            if key in self._measured:
                return OpenResult.CACHED_HIT
            if self.appraisal_certs is not None and host_appraise(f, self.appraisal_certs) is Decision.DENY:
                return OpenResult.DENIED
            self.extends += 1
            try:
                accepted = self._extend(entry.payload(self.log.pcr_index))
            except SimulationError:
                accepted = False
            if not accepted:
                return OpenResult.DENIED
            self.log.entries.append(entry)
            self._measured.add(key)
            return OpenResult.LOADED
