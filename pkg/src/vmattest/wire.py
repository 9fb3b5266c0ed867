"""Byte-exact framing for emulated-TPM commands and responses.

Command frame::

    +----------------+--------+-----------------+
    | length (u32 BE)| kind u8| body            |
    +----------------+--------+-----------------+

``length`` counts the kind byte plus the body. Responses use the same layout
with a status byte in place of the kind. In legacy-prefix routing mode the
hypervisor additionally prepends a 4-byte big-endian vTPM identifier.
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass

from .crypto import BANKS, Digest, HashAlg

HEADER = struct.Struct(">IB")


class Kind(enum.IntEnum):
    EXTEND = 1
    QUOTE = 2
    CREATE_KEY = 3
    SIGN_CHALLENGE = 4
    READ_PCR = 5
    SHUTDOWN = 6
    # control-channel reinitialisation (VM reboot), never issued by a guest
    RESET = 7


class Status(enum.IntEnum):
    OK = 0
    DENIED = 1
    REFUSED = 2
    ERROR = 3
    POLICY_VIOLATION = 4
    NOT_PROVISIONED = 5


NON_IDEMPOTENT = frozenset({Kind.EXTEND, Kind.CREATE_KEY, Kind.RESET})
GUEST_KINDS = frozenset({Kind.EXTEND, Kind.QUOTE, Kind.SIGN_CHALLENGE, Kind.READ_PCR})

BANK_IDS = {HashAlg.SHA1: 1, HashAlg.SHA256: 2, HashAlg.SHA512: 3}
BANK_BY_ID = {v: k for k, v in BANK_IDS.items()}


class FrameError(ValueError):
    pass


@dataclass(frozen=True)
class TpmCommand:
    kind: Kind
    body: bytes = b""

    def encode(self) -> bytes:
        return HEADER.pack(1 + len(self.body), self.kind) + self.body

    @classmethod
    def decode(cls, frame: bytes) -> "TpmCommand":
        kind, body = _split(frame)
        try:
            return cls(Kind(kind), body)
        except ValueError:
            raise FrameError(f"unknown command kind {kind}") from None


@dataclass(frozen=True)
class TpmResponse:
    status: Status
    body: bytes = b""

    @property
    def ok(self) -> bool:
        return self.status is Status.OK

    def encode(self) -> bytes:
        return HEADER.pack(1 + len(self.body), self.status) + self.body

    @classmethod
    def decode(cls, frame: bytes) -> "TpmResponse":
        status, body = _split(frame)
        try:
            return cls(Status(status), body)
        except ValueError:
            raise FrameError(f"unknown status {status}") from None

    @classmethod
    def error(cls, status: Status, message: str) -> "TpmResponse":
        return cls(status, message.encode())


def _split(frame: bytes) -> tuple[int, bytes]:
    if len(frame) < HEADER.size:
        raise FrameError("frame shorter than header")
    length, code = HEADER.unpack_from(frame)
    if length != len(frame) - 4:
        raise FrameError(f"length prefix {length} does not match frame size {len(frame) - 4}")
    return code, bytes(frame[HEADER.size:])


# -- command bodies -----------------------------------------------------------

@dataclass(frozen=True)
class ExtendPayload:
    """One PCR_Extend carrying a digest per bank plus the raw file signature.

    For IMA the banks carry, in order: the template (integrity) digest, the
    file content digest, and a digest of the signature.
    """

    index: int
    sha1: bytes
    sha256: bytes
    sha512: bytes
    signature: bytes = b""

    def digests(self) -> dict[HashAlg, Digest]:
        return {
            HashAlg.SHA1: Digest(HashAlg.SHA1, self.sha1),
            HashAlg.SHA256: Digest(HashAlg.SHA256, self.sha256),
            HashAlg.SHA512: Digest(HashAlg.SHA512, self.sha512),
        }

    def encode(self) -> bytes:
        return (
            struct.pack(">B", self.index) + self.sha1 + self.sha256 + self.sha512
            + struct.pack(">H", len(self.signature)) + self.signature
        )

    @classmethod
    def decode(cls, body: bytes) -> "ExtendPayload":
        fixed = 1 + 20 + 32 + 64
        if len(body) < fixed + 2:
            raise FrameError("extend body too short")
        index = body[0]
        sha1, sha256, sha512 = body[1:21], body[21:53], body[53:117]
        (n,) = struct.unpack_from(">H", body, fixed)
        sig = body[fixed + 2:]
        if len(sig) != n:
            raise FrameError("extend signature length mismatch")
        return cls(index, sha1, sha256, sha512, sig)

    def command(self) -> TpmCommand:
        return TpmCommand(Kind.EXTEND, self.encode())


def quote_command(nonce: bytes, selection) -> TpmCommand:
    body = nonce + struct.pack(">B", len(selection))
    body += b"".join(struct.pack(">BB", BANK_IDS[b], i) for b, i in selection)
    return TpmCommand(Kind.QUOTE, body)


def decode_quote(body: bytes) -> tuple[bytes, list[tuple[HashAlg, int]]]:
    if len(body) < 33:
        raise FrameError("quote body too short")
    nonce, count = body[:32], body[32]
    pairs = body[33:]
    if len(pairs) != 2 * count:
        raise FrameError("quote selection length mismatch")
    try:
        return nonce, [(BANK_BY_ID[pairs[k]], pairs[k + 1]) for k in range(0, len(pairs), 2)]
    except KeyError as exc:
        raise FrameError(f"unknown bank id {exc.args[0]}") from None


def read_pcr_command(bank: HashAlg, index: int) -> TpmCommand:
    return TpmCommand(Kind.READ_PCR, struct.pack(">BB", BANK_IDS[bank], index))


def with_prefix(vtpm_id: int, frame: bytes) -> bytes:
    return struct.pack(">I", vtpm_id) + frame


def strip_prefix(frame: bytes) -> tuple[int, bytes]:
    if len(frame) < 4:
        raise FrameError("missing vTPM prefix")
    return struct.unpack_from(">I", frame)[0], frame[4:]


__all__ = [
    "BANKS", "BANK_IDS", "BANK_BY_ID", "ExtendPayload", "FrameError", "GUEST_KINDS", "Kind",
    "NON_IDEMPOTENT", "Status", "TpmCommand", "TpmResponse", "decode_quote", "quote_command",
    "read_pcr_command", "strip_prefix", "with_prefix",
]
