"""TEE-hosted emulated TPM, one instance per VM.

An instance enforces the tenant policy on every IMA extend, increments its
monotonic counter before each non-idempotent command, persists its state
sealed under the TEE key, accepts exactly one authenticated client
connection and signs SSH challenges only while the platform conforms.
"""

from __future__ import annotations

import enum
import hmac
import struct
import threading
from dataclasses import dataclass, field
from typing import Callable

from cryptography.exceptions import InvalidTag

from .config import Config
from .crypto import (
    BANKS,
    Digest,
    Rng,
    SigningKeyPair,
    aead_decrypt,
    aead_encrypt,
    decode_fields,
    encode_fields,
)
from .errors import (
    AuthError,
    ConnectionRefused,
    InstanceMismatch,
    NotProvisioned,
    PolicyViolation,
    RollbackDetected,
    SimulationError,
    TpmError,
)
from .hwtpm import NONCE_SIZE, PcrState, quote_body
from .ima import IMA_PCR, ImaLogEntry, signature_digest
from .mcs import McsClient
from .netsim import ConnectRequest, Fabric, HOST, TEE
from .policy import (
    Decision,
    PolicyDocument,
    VerificationResult,
    Violation,
    compare_pcrs,
    evaluate_measurement,
    parse_policy,
    validate_policy,
)
from .wire import (
    BANK_BY_ID,
    ExtendPayload,
    FrameError,
    Kind,
    NON_IDEMPOTENT,
    Status,
    TpmCommand,
    TpmResponse,
    decode_quote,
    strip_prefix,
)

CHALLENGE_SIZE = 32
SSH_KEY = "ssh"
_STATE_AAD = b"emutpm-state-v1"


class Conformance(enum.Enum):
    CONFORMING = "Conforming"
    VIOLATED = "Violated"


@dataclass
class EmulatedTpmState:
    instance_id: str
    policy_id: str
    pcrs: PcrState
    resident_keys: dict[str, SigningKeyPair]
    mc_counter_id: int
    mc_value: int
    conformance: Conformance
    # stands in for the TLS credentials persisted with the TPM state
    connection_secret: bytes

    def to_bytes(self) -> bytes:
        keys = encode_fields(*(f for name in sorted(self.resident_keys)
                               for f in (name.encode(), self.resident_keys[name].private)))
        return encode_fields(
            self.instance_id.encode(),
            self.policy_id.encode(),
            self.pcrs.to_bytes(),
            struct.pack(">IQ", self.mc_counter_id, self.mc_value),
            self.conformance.value.encode(),
            self.connection_secret,
            keys,
        )

    @classmethod
    def from_bytes(cls, data: bytes) -> "EmulatedTpmState":
        iid, pid, pcrs, mc, conf, secret, keys = decode_fields(data, 7)
        counter_id, mc_value = struct.unpack(">IQ", mc)
        flat = decode_fields(keys)
        resident = {flat[i].decode(): SigningKeyPair.from_private(flat[i + 1]) for i in range(0, len(flat), 2)}
        return cls(iid.decode(), pid.decode(), PcrState.from_bytes(pcrs), resident, counter_id, mc_value,
                   Conformance(conf.decode()), secret)


@dataclass
class Session:
    id: int
    peer: str
    open: bool = True


class Clock:
    """Logical time shared by a simulated node."""

    def __init__(self):
        self.now = 0
        self._lock = threading.Lock()

    def tick(self) -> int:
        with self._lock:
            self.now += 1
            return self.now


HostCheck = Callable[[PolicyDocument], VerificationResult]


class EmulatedTpm:
    def __init__(self, instance_id: str, vtpm_id: int, policy: PolicyDocument, mcs: McsClient, *,
                 rng: Rng, sealing_key: bytes, config: Config | None = None,
                 storage: dict | None = None, host_check: HostCheck | None = None,
                 clock: Clock | None = None):
        self.instance_id = instance_id
        self.vtpm_id = vtpm_id
        self.policy = policy
        self.mcs = mcs
        self.config = config or Config()
        self._rng = rng
        self._sealing_key = sealing_key
        self.storage = storage if storage is not None else {}
        self.host_check = host_check
        self.clock = clock or Clock()
        self._lock = threading.RLock()
        self._sessions: list[Session] = []
        self._connected_once = False
        self._host_cache: tuple[int, VerificationResult] | None = None
        self._ak = SigningKeyPair.generate(rng.child("ak"))
        counter = mcs.allocate()
        self.state = EmulatedTpmState(
            instance_id=instance_id,
            policy_id=policy.policy_id,
            pcrs=PcrState(),
            resident_keys={},
            mc_counter_id=counter,
            mc_value=mcs.read(counter),
            conformance=Conformance.CONFORMING,
            connection_secret=rng.child("secret").bytes(32),
        )
        # observation counters for invariant checks; not part of TPM state
        self.executed_non_idempotent = 0
        self.allowed_extends = 0
        self.denied_extends = 0
        self._persist()

    # -- connections ----------------------------------------------------------

    @property
    def sessions(self) -> list[Session]:
        return list(self._sessions)

    def accept_connection(self, presented_secret: bytes | None, peer: str = "client") -> Session:
        with self._lock:
            if self.config.psk_auth:
                if presented_secret is None or not hmac.compare_digest(presented_secret, self.state.connection_secret):
                    raise AuthError(f"{self.instance_id}: wrong connection secret")
            if self.config.single_connection and self._connected_once:
                raise ConnectionRefused(f"{self.instance_id}: reconnection not permitted")
            self._connected_once = True
            session = Session(len(self._sessions) + 1, peer)
            self._sessions.append(session)
            return session

    def close_session(self, session: Session) -> None:
        with self._lock:
            session.open = False

    # -- command processing ---------------------------------------------------

    def handle_command(self, session: Session | None, cmd: TpmCommand) -> TpmResponse:
        """Execute one command. ``session=None`` is the TEE-internal control path."""
        with self._lock:
            if session is not None and not session.open:
                return TpmResponse.error(Status.REFUSED, "session closed")
            try:
                parsed = self._parse(cmd)
            except (FrameError, TpmError) as exc:
                return TpmResponse.error(Status.ERROR, str(exc))
            if cmd.kind in NON_IDEMPOTENT:
                try:
                    self.state.mc_value = self.mcs.increment(self.state.mc_counter_id)
                except SimulationError as exc:
                    if session is not None:
                        self.close_session(session)
                    return TpmResponse.error(Status.REFUSED, f"monotonic counter unavailable: {exc.kind}")
                self.executed_non_idempotent += 1
            try:
                return self._execute(session, cmd.kind, parsed)
            finally:
                if cmd.kind in NON_IDEMPOTENT:
                    self._persist()

    def _parse(self, cmd: TpmCommand):
        if cmd.kind is Kind.EXTEND:
            p = ExtendPayload.decode(cmd.body)
            PcrState._check_index(p.index)
            return p
        if cmd.kind is Kind.QUOTE:
            nonce, sel = decode_quote(cmd.body)
            if not sel:
                raise TpmError("empty PCR selection")
            for _, i in sel:
                PcrState._check_index(i)
            return nonce, sel
        if cmd.kind is Kind.READ_PCR:
            if len(cmd.body) != 2 or cmd.body[0] not in BANK_BY_ID:
                raise FrameError("bad READ_PCR body")
            PcrState._check_index(cmd.body[1])
            return BANK_BY_ID[cmd.body[0]], cmd.body[1]
        if cmd.kind is Kind.CREATE_KEY:
            if not cmd.body:
                raise FrameError("key name required")
            return cmd.body.decode()
        return cmd.body

    def _execute(self, session, kind: Kind, arg) -> TpmResponse:
        if kind is Kind.EXTEND:
            return self._extend(session, arg)
        if kind is Kind.READ_PCR:
            return TpmResponse(Status.OK, self.state.pcrs.read(*arg).value)
        if kind is Kind.QUOTE:
            nonce, sel = arg
            selected = tuple((b, i, self.state.pcrs.read(b, i)) for b, i in sel)
            sig = self._ak.sign(quote_body(nonce, selected))
            return TpmResponse(Status.OK, encode_fields(sig, self._ak.public, *(v.value for _, _, v in selected)))
        if kind is Kind.CREATE_KEY:
            if arg in self.state.resident_keys:
                return TpmResponse.error(Status.ERROR, f"key {arg!r} exists")
            key = SigningKeyPair.generate(self._rng.child(f"key:{arg}"))
            self.state.resident_keys[arg] = key
            return TpmResponse(Status.OK, key.public)
        if kind is Kind.SIGN_CHALLENGE:
            try:
                sig = self.sign_challenge(session, arg)
            except PolicyViolation as exc:
                return TpmResponse.error(Status.POLICY_VIOLATION, str(exc))
            except NotProvisioned as exc:
                return TpmResponse.error(Status.NOT_PROVISIONED, str(exc))
            except TpmError as exc:
                return TpmResponse.error(Status.ERROR, str(exc))
            return TpmResponse(Status.OK, sig + self.state.resident_keys[SSH_KEY].public)
        if kind is Kind.RESET:
            self.state.pcrs.reset()
            return TpmResponse(Status.OK)
        if kind is Kind.SHUTDOWN:
            if session is not None:
                self.close_session(session)
            return TpmResponse(Status.OK)
        return TpmResponse.error(Status.ERROR, f"unsupported command {kind.name}")

    def _extend(self, session, p: ExtendPayload) -> TpmResponse:
        if p.index == IMA_PCR:
            entry = ImaLogEntry("", Digest(BANKS[1], p.sha256), Digest(BANKS[0], p.sha1), p.signature or None)
            decision = evaluate_measurement(self.policy, entry)
            if p.sha512 != signature_digest(p.signature or None).value:
                decision = Decision.DENY
            if decision is Decision.DENY:
                self.denied_extends += 1
                self.state.conformance = Conformance.VIOLATED
                if session is not None:
                    self.close_session(session)
                return TpmResponse.error(Status.DENIED, f"measurement {p.sha256.hex()} violates policy")
            self.allowed_extends += 1
        for bank, digest in p.digests().items():
            self.state.pcrs.extend(bank, p.index, digest)
        return TpmResponse(Status.OK, self.state.pcrs.read(BANKS[1], p.index).value)

    # -- gated signing --------------------------------------------------------

    def _host_verdict(self) -> VerificationResult:
        now = self.clock.now
        if self._host_cache is not None:
            checked_at, result = self._host_cache
            if now - checked_at < self.config.staleness_window:
                return result
        if self.host_check is None:
            result = VerificationResult((Violation("HostUnverified", "host"),))
        else:
            try:
                result = self.host_check(self.policy)
            except SimulationError as exc:
                result = VerificationResult((Violation("HostUnverified", "host", "", exc.kind),))
        self._host_cache = (now, result)
        return result

    def sign_challenge(self, session, challenge: bytes) -> bytes:
        if len(challenge) != CHALLENGE_SIZE:
            raise TpmError(f"challenge must be {CHALLENGE_SIZE} bytes")
        with self._lock:
            key = self.state.resident_keys.get(SSH_KEY)
            if key is None:
                raise NotProvisioned("no resident SSH key; policy not deployed")
            if self.state.conformance is Conformance.VIOLATED:
                raise PolicyViolation("guest integrity violated the policy")
            guest = compare_pcrs(self.policy.guest_pcrs, {(b, i): self.state.pcrs.read(b, i)
                                                         for b, i, _ in self.policy.guest_pcrs})
            if guest:
                raise PolicyViolation("guest boot measurements do not match the policy", guest)
            host = self._host_verdict()
            if not host.conforms:
                raise PolicyViolation("host does not conform to the policy", host.violations)
            return key.sign(challenge)

    # -- persistence ----------------------------------------------------------

    def save_state(self) -> bytes:
        with self._lock:
            nonce = self._rng.bytes(12)
            return aead_encrypt(self._sealing_key, nonce, self.state.to_bytes(), _STATE_AAD)

    def _persist(self) -> None:
        self.storage[self.instance_id] = self.save_state()

    def load_state(self, blob: bytes) -> None:
        """Restart the instance from a sealed blob (fresh process, no sessions)."""
        try:
            state = EmulatedTpmState.from_bytes(aead_decrypt(self._sealing_key, blob, _STATE_AAD))
        except (InvalidTag, ValueError):
            raise InstanceMismatch("state blob was not sealed by this TEE") from None
        if state.instance_id != self.instance_id:
            raise InstanceMismatch(f"state belongs to {state.instance_id}, not {self.instance_id}")
        with self._lock:
            if self.config.rollback_protection:
                current = self.mcs.read(state.mc_counter_id)
                if current != state.mc_value:
                    raise RollbackDetected(
                        f"{self.instance_id}: stale state (mc {state.mc_value}, counter service {current})")
            for s in self._sessions:
                s.open = False
            self.state = state
            self._connected_once = False
            self._host_cache = None

    # -- introspection used by tests ------------------------------------------

    def private_key_material(self) -> list[bytes]:
        return [k.private for k in self.state.resident_keys.values()] + [self._ak.private]


class TpmSessionHandler:
    """Server side of one client connection to an instance."""

    def __init__(self, tpm: EmulatedTpm, session: Session | None, peer: str | None = None):
        self.tpm = tpm
        self.session = session
        self.peer_identity = peer

    @property
    def closed(self) -> bool:
        return self.session is not None and not self.session.open

    def handle(self, payload: bytes) -> bytes:
        try:
            cmd = TpmCommand.decode(payload)
        except FrameError as exc:
            return TpmResponse.error(Status.ERROR, str(exc)).encode()
        return self.tpm.handle_command(self.session, cmd).encode()

    def on_channel_close(self) -> None:
        if self.session is not None:
            self.tpm.close_session(self.session)


@dataclass
class SpawnedInstance:
    instance_id: str
    vtpm_id: int
    endpoint: str
    connection_secret: bytes
    tpm: EmulatedTpm


def spawn_instance(policy: PolicyDocument | str, mcs: McsClient, *, fabric: Fabric, instance_id: str,
                   vtpm_id: int, rng: Rng, sealing_key: bytes, config: Config | None = None,
                   storage: dict | None = None, host_check: HostCheck | None = None,
                   clock: Clock | None = None) -> SpawnedInstance:
    """Create an instance, allocate its counter and open its endpoints.

    Two listeners are bound: ``emutpm:<id>`` for the hypervisor (host domain,
    secret-authenticated) and ``emutpm-ctl:<id>`` for TEE-internal control.
    """
    if isinstance(policy, str):
        policy = parse_policy(policy)
    if not isinstance(policy, PolicyDocument):
        raise TypeError("policy must be a PolicyDocument or policy text")
    validate_policy(policy)
    tpm = EmulatedTpm(instance_id, vtpm_id, policy, mcs, rng=rng, sealing_key=sealing_key,
                      config=config, storage=storage, host_check=host_check, clock=clock)
    endpoint = f"emutpm:{instance_id}"

    def accept(req: ConnectRequest):
        session = tpm.accept_connection(req.psk, req.src)
        return TpmSessionHandler(tpm, session, req.src)

    fabric.listen(endpoint, accept, domain=HOST)
    fabric.listen(f"emutpm-ctl:{instance_id}", lambda req: TpmSessionHandler(tpm, None, req.src), domain=TEE)
    return SpawnedInstance(instance_id, vtpm_id, endpoint, tpm.state.connection_secret, tpm)


class VtpmRouter:
    """Legacy vTPM multiplexer: one endpoint, 4-byte id prefix selects the
    instance. Exists only to reproduce identifier-rewriting attacks."""

    def __init__(self, fabric: Fabric, address: str):
        self.address = address
        self._instances: dict[int, EmulatedTpm] = {}
        self._sessions: dict[int, Session] = {}
        fabric.listen(address, self._accept, domain=HOST)

    def register(self, tpm: EmulatedTpm) -> None:
        self._instances[tpm.vtpm_id] = tpm

    def _accept(self, req: ConnectRequest):
        vid = req.meta.get("vtpm_id")
        tpm = self._instances.get(vid)
        if tpm is None:
            raise ConnectionRefused(f"unknown vTPM id {vid}")
        self._sessions[vid] = tpm.accept_connection(req.psk, req.src)
        return _RouterConnection(self, vid)

    def dispatch(self, frame: bytes) -> bytes:
        try:
            vid, rest = strip_prefix(frame)
            cmd = TpmCommand.decode(rest)
        except FrameError as exc:
            return TpmResponse.error(Status.ERROR, str(exc)).encode()
        tpm, session = self._instances.get(vid), self._sessions.get(vid)
        if tpm is None or session is None:
            return TpmResponse.error(Status.ERROR, f"no vTPM {vid}").encode()
        return tpm.handle_command(session, cmd).encode()


class _RouterConnection:
    def __init__(self, router: VtpmRouter, vtpm_id: int):
        self.router = router
        self.vtpm_id = vtpm_id

    @property
    def closed(self) -> bool:
        s = self.router._sessions.get(self.vtpm_id)
        return s is None or not s.open

    def handle(self, payload: bytes) -> bytes:
        return self.router.dispatch(payload)

    def on_channel_close(self) -> None:
        s = self.router._sessions.get(self.vtpm_id)
        if s is not None:
            s.open = False
