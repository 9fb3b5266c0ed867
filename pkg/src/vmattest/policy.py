"""Tenant security policies: file format, validation and evaluation.

The policy file is a YAML subset with these fixed top-level keys::

    policy_id: "alice-web"
    tpm_manufacturer_roots:         # certificates trusted to vouch for the TPM
      - subject: "..."
        issuer: "..."
        public_key: <hex>
        signature: <hex>
    host_pcrs:                      # DRTM / host kernel expectations
      - bank: sha256
        index: 17
        digest: <hex>
    guest_pcrs: []                  # guest kernel boot expectations
    guest_file_whitelist:           # SHA-256 digests of legal runtime files
      - <hex>
    guest_signer_certs: []          # files signed by these pass without listing
    host_signer_certs: []           # host IMA appraisal roots

Digests are lowercase hex. :func:`serialize_policy` emits the canonical
form: every key present, PCR lists sorted by (bank, index), whitelist sorted.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field
from typing import Iterable, Mapping

import yaml

from .crypto import BANKS, Certificate, Digest, HashAlg, verify
from .errors import PolicyError
from .hwtpm import TpmQuote

KEYS = (
    "policy_id",
    "tpm_manufacturer_roots",
    "host_pcrs",
    "guest_pcrs",
    "guest_file_whitelist",
    "guest_signer_certs",
    "host_signer_certs",
)

PcrExpectation = tuple[HashAlg, int, Digest]


def _pcr_sort_key(item: PcrExpectation):
    return (BANKS.index(item[0]), item[1])


@dataclass(frozen=True)
class PolicyDocument:
    policy_id: str
    tpm_manufacturer_roots: tuple[Certificate, ...] = ()
    host_pcrs: tuple[PcrExpectation, ...] = ()
    guest_pcrs: tuple[PcrExpectation, ...] = ()
    guest_file_whitelist: frozenset[Digest] = frozenset()
    guest_signer_certs: tuple[Certificate, ...] = ()
    host_signer_certs: tuple[Certificate, ...] = ()

    def __post_init__(self):
        validate_policy(self)

    @classmethod
    def build(cls, policy_id: str, *, tpm_manufacturer_roots: Iterable[Certificate] = (),
              host_pcrs: Iterable[PcrExpectation] = (), guest_pcrs: Iterable[PcrExpectation] = (),
              guest_file_whitelist: Iterable[Digest] = (), guest_signer_certs: Iterable[Certificate] = (),
              host_signer_certs: Iterable[Certificate] = ()) -> "PolicyDocument":
        """Construct a document in canonical order from arbitrary iterables."""
        return cls(
            policy_id=policy_id,
            tpm_manufacturer_roots=tuple(tpm_manufacturer_roots),
            host_pcrs=tuple(sorted(host_pcrs, key=_pcr_sort_key)),
            guest_pcrs=tuple(sorted(guest_pcrs, key=_pcr_sort_key)),
            guest_file_whitelist=frozenset(guest_file_whitelist),
            guest_signer_certs=tuple(guest_signer_certs),
            host_signer_certs=tuple(host_signer_certs),
        )

    def whitelisted(self, digest: Digest) -> bool:
        return digest in self.guest_file_whitelist


def validate_policy(doc: PolicyDocument) -> None:
    if not doc.policy_id:
        raise PolicyError("policy_id must be a non-empty string")
    if not doc.guest_file_whitelist and not doc.guest_signer_certs:
        raise PolicyError("invariant violated: guest_file_whitelist and guest_signer_certs are both empty")
    for name in ("host_pcrs", "guest_pcrs"):
        seen = set()
        for bank, index, digest in getattr(doc, name):
            if digest.algorithm is not bank:
                raise PolicyError(f"{name}: digest algorithm does not match bank {bank.value}")
            if (bank, index) in seen:
                raise PolicyError(f"invariant violated: duplicate {name} entry ({bank.value}, {index})")
            seen.add((bank, index))
    for d in doc.guest_file_whitelist:
        if d.algorithm is not HashAlg.SHA256:
            raise PolicyError("guest_file_whitelist holds SHA-256 digests only")


# -- parsing ------------------------------------------------------------------

def _line(node) -> int:
    return node.start_mark.line + 1


def _scalar(node, what: str) -> str:
    if not isinstance(node, yaml.ScalarNode):
        raise PolicyError(f"{what} must be a scalar", _line(node))
    return node.value


def _seq(node, what: str) -> list:
    if not isinstance(node, yaml.SequenceNode):
        raise PolicyError(f"{what} must be a list", _line(node))
    return node.value


def _mapping(node, what: str, keys: Iterable[str]) -> dict:
    if not isinstance(node, yaml.MappingNode):
        raise PolicyError(f"{what} must be a mapping", _line(node))
    out = {}
    allowed = set(keys)
    for k, v in node.value:
        key = _scalar(k, "key")
        if key not in allowed:
            raise PolicyError(f"unknown key {key!r} in {what}", _line(k))
        if key in out:
            raise PolicyError(f"duplicate key {key!r} in {what}", _line(k))
        out[key] = v
    missing = allowed - out.keys()
    if missing and what != "policy":
        raise PolicyError(f"{what} is missing {sorted(missing)}", _line(node))
    return out


def _hex(node, what: str, size: int | None = None) -> bytes:
    text = _scalar(node, what)
    if text != text.lower():
        raise PolicyError(f"{what} must be lowercase hex", _line(node))
    try:
        raw = bytes.fromhex(text)
    except ValueError:
        raise PolicyError(f"{what} is not valid hex", _line(node)) from None
    if size is not None and len(raw) != size:
        raise PolicyError(f"{what} must be {size} bytes, got {len(raw)}", _line(node))
    return raw


def _cert(node) -> Certificate:
    m = _mapping(node, "certificate", ("subject", "issuer", "public_key", "signature"))
    return Certificate(
        subject=_scalar(m["subject"], "subject"),
        public_key=_hex(m["public_key"], "public_key", 32),
        issuer=_scalar(m["issuer"], "issuer"),
        signature=_hex(m["signature"], "signature"),
    )


def _pcr(node) -> PcrExpectation:
    m = _mapping(node, "PCR entry", ("bank", "index", "digest"))
    try:
        bank = HashAlg.parse(_scalar(m["bank"], "bank"))
    except ValueError as exc:
        raise PolicyError(str(exc), _line(m["bank"])) from None
    try:
        index = int(_scalar(m["index"], "index"))
    except ValueError:
        raise PolicyError("index must be an integer", _line(m["index"])) from None
    if not 0 <= index < 24:
        raise PolicyError(f"PCR index {index} out of range", _line(m["index"]))
    return bank, index, Digest(bank, _hex(m["digest"], "digest", bank.size))


def parse_policy(text: str) -> PolicyDocument:
    try:
        root = yaml.compose(text, Loader=yaml.SafeLoader)
    except yaml.MarkedYAMLError as exc:
        mark = exc.problem_mark or exc.context_mark
        raise PolicyError(f"syntax error: {exc.problem}", mark.line + 1 if mark else None) from None
    if root is None:
        raise PolicyError("empty policy", 1)
    m = _mapping(root, "policy", KEYS)
    if "policy_id" not in m:
        raise PolicyError("policy_id is required", _line(root))

    def seq_of(key, conv):
        return [conv(n) for n in _seq(m[key], key)] if key in m else []

    try:
        return PolicyDocument.build(
            _scalar(m["policy_id"], "policy_id"),
            tpm_manufacturer_roots=seq_of("tpm_manufacturer_roots", _cert),
            host_pcrs=seq_of("host_pcrs", _pcr),
            guest_pcrs=seq_of("guest_pcrs", _pcr),
            guest_file_whitelist=seq_of(
                "guest_file_whitelist", lambda n: Digest(HashAlg.SHA256, _hex(n, "whitelist digest", 32))),
            guest_signer_certs=seq_of("guest_signer_certs", _cert),
            host_signer_certs=seq_of("host_signer_certs", _cert),
        )
    except PolicyError as exc:
        if exc.line is None:
            raise PolicyError(str(exc), _line(root)) from None
        raise


# -- serialization --------------------------------------------------------------

def _q(s: str) -> str:
    return json.dumps(s)


def _emit_certs(key: str, certs) -> list[str]:
    if not certs:
        return [f"{key}: []"]
    lines = [f"{key}:"]
    for c in certs:
        lines += [
            f"  - subject: {_q(c.subject)}",
            f"    issuer: {_q(c.issuer)}",
            f"    public_key: {c.public_key.hex()}",
            f"    signature: {c.signature.hex()}",
        ]
    return lines


def _emit_pcrs(key: str, pcrs) -> list[str]:
    if not pcrs:
        return [f"{key}: []"]
    lines = [f"{key}:"]
    for bank, index, digest in sorted(pcrs, key=_pcr_sort_key):
        lines += [f"  - bank: {bank.value}", f"    index: {index}", f"    digest: {digest.hex()}"]
    return lines


def serialize_policy(doc: PolicyDocument) -> str:
    lines = [f"policy_id: {_q(doc.policy_id)}"]
    lines += _emit_certs("tpm_manufacturer_roots", doc.tpm_manufacturer_roots)
    lines += _emit_pcrs("host_pcrs", doc.host_pcrs)
    lines += _emit_pcrs("guest_pcrs", doc.guest_pcrs)
    wl = sorted(d.hex() for d in doc.guest_file_whitelist)
    lines += [f"guest_file_whitelist:"] + [f"  - {h}" for h in wl] if wl else ["guest_file_whitelist: []"]
    lines += _emit_certs("guest_signer_certs", doc.guest_signer_certs)
    lines += _emit_certs("host_signer_certs", doc.host_signer_certs)
    return "\n".join(lines) + "\n"


# -- evaluation -------------------------------------------------------------------

class Verdict(enum.Enum):
    CONFORMS = "Conforms"
    VIOLATION = "Violation"


class Decision(enum.Enum):
    ALLOW = "Allow"
    DENY = "Deny"


@dataclass(frozen=True)
class Violation:
    kind: str
    subject: str
    expected: str = ""
    actual: str = ""

    def to_dict(self) -> dict:
        return {"kind": self.kind, "subject": self.subject, "expected": self.expected, "actual": self.actual}


@dataclass(frozen=True)
class VerificationResult:
    violations: tuple[Violation, ...] = ()

    @property
    def verdict(self) -> Verdict:
        return Verdict.VIOLATION if self.violations else Verdict.CONFORMS

    @property
    def conforms(self) -> bool:
        return not self.violations

    def to_dict(self) -> dict:
        return {"verdict": self.verdict.value, "violations": [v.to_dict() for v in self.violations]}


def compare_pcrs(expectations: Iterable[PcrExpectation],
                 actual: Mapping[tuple[HashAlg, int], Digest]) -> list[Violation]:
    out = []
    for bank, index, want in expectations:
        subject = f"{bank.value}:{index}"
        got = actual.get((bank, index))
        if got is None:
            out.append(Violation("MissingPcr", subject, want.hex(), ""))
        elif got != want:
            out.append(Violation("PcrMismatch", subject, want.hex(), got.hex()))
    return out


def evaluate_quote(policy: PolicyDocument, quote: TpmQuote, roots_check: bool = True,
                   nonce: bytes | None = None) -> VerificationResult:
    """Check a hardware-TPM quote against the policy's host expectations.

    With ``roots_check`` the quote's signer chain must lead to one of the
    policy's manufacturer roots and the signature must verify.
    """
    violations: list[Violation] = []
    signer = quote.signer_chain[0].subject if quote.signer_chain else "<none>"
    if roots_check:
        if not quote.chains_to(policy.tpm_manufacturer_roots):
            violations.append(Violation("UntrustedTpm", signer))
        if not quote.signature_valid():
            violations.append(Violation("BadQuoteSignature", signer))
    if nonce is not None and quote.nonce != nonce:
        violations.append(Violation("NonceMismatch", signer, nonce.hex(), quote.nonce.hex()))
    values = {(b, i): v for b, i, v in quote.selected_pcrs}
    violations += compare_pcrs(policy.host_pcrs, values)
    return VerificationResult(tuple(violations))


def evaluate_measurement(policy: PolicyDocument, entry) -> Decision:
    """Whitelisted digest, or a signature over the digest by a listed signer."""
    if entry.file_digest in policy.guest_file_whitelist:
        return Decision.ALLOW
    sig = entry.signature
    if sig:
        for cert in policy.guest_signer_certs:
            if verify(cert.public_key, entry.file_digest.value, sig):
                return Decision.ALLOW
    return Decision.DENY
