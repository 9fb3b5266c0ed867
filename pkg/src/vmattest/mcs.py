"""Monotonic Counter Service.

A TEE-resident service in front of hardware-TPM NV counters. Each counter is
leased to exactly one client (one emulated TPM) at allocation time.

Wire format (inside a channel frame): requests are ``op:u8 || counter:u32``,
responses ``status:u8 || counter:u32 || value:u64``, both preceded by a
4-byte big-endian length.
"""

from __future__ import annotations

import enum
import struct
import threading
import time
from collections import defaultdict
from dataclasses import dataclass
from typing import Iterable

from .crypto import Certificate, verify_chain
from .errors import AuthError, Conflict, McsUnavailable, NotFound, SimulationError, UndefinedCounter
from .netsim import Channel, ConnectRequest, Fabric, HOST

_REQ = struct.Struct(">IBI")
_RESP = struct.Struct(">IBIQ")


class Op(enum.IntEnum):
    ALLOCATE = 1
    READ = 2
    INCREMENT = 3
    ACQUIRE = 4


class McsStatus(enum.IntEnum):
    OK = 0
    AUTH_ERROR = 1
    NOT_FOUND = 2
    CONFLICT = 3


_ERRORS = {McsStatus.AUTH_ERROR: AuthError, McsStatus.NOT_FOUND: NotFound, McsStatus.CONFLICT: Conflict}
_STATUS = {AuthError: McsStatus.AUTH_ERROR, NotFound: McsStatus.NOT_FOUND, Conflict: McsStatus.CONFLICT}


def encode_request(op: Op, counter_id: int = 0) -> bytes:
    return _REQ.pack(_REQ.size - 4, op, counter_id)


def decode_request(frame: bytes) -> tuple[Op, int]:
    if len(frame) != _REQ.size:
        raise ValueError("malformed MCS request")
    length, op, cid = _REQ.unpack(frame)
    if length != _REQ.size - 4:
        raise ValueError("bad MCS length prefix")
    return Op(op), cid


def encode_response(status: McsStatus, counter_id: int = 0, value: int = 0) -> bytes:
    return _RESP.pack(_RESP.size - 4, status, counter_id, value)


def decode_response(frame: bytes) -> tuple[McsStatus, int, int]:
    if len(frame) != _RESP.size:
        raise ValueError("malformed MCS response")
    length, status, cid, value = _RESP.unpack(frame)
    if length != _RESP.size - 4:
        raise ValueError("bad MCS length prefix")
    return McsStatus(status), cid, value


@dataclass
class CounterLease:
    counter_id: int
    client_identity: str
    last_known: int = 0


class MonotonicCounterService:
    def __init__(self, hwtpm, *, latency: float = 0.0):
        self.hwtpm = hwtpm
        self.latency = latency
        self._leases: dict[int, CounterLease] = {}
        self._table_lock = threading.Lock()
        self._counter_locks: dict[int, threading.Lock] = defaultdict(threading.Lock)
        self.available = True

    def _delay(self):
        if not self.available:
            raise McsUnavailable("monotonic counter service unreachable")
        if self.latency:
            time.sleep(self.latency)

    @staticmethod
    def _require_auth(client_identity):
        if not client_identity:
            raise AuthError("MCS requires an authenticated client")

    def _lease(self, client_identity: str, counter_id: int) -> CounterLease:
        self._require_auth(client_identity)
        with self._table_lock:
            lease = self._leases.get(counter_id)
        if lease is None:
            raise NotFound(f"counter {counter_id} unknown")
        if lease.client_identity != client_identity:
            raise Conflict(f"counter {counter_id} is leased to another client")
        return lease

    def allocate(self, client_identity: str | None) -> int:
        self._require_auth(client_identity)
        self._delay()
        with self._table_lock:
            cid = self.hwtpm.nv_define()
            self._leases[cid] = CounterLease(cid, client_identity)
        return cid

    def acquire(self, client_identity: str | None, counter_id: int) -> int:
        """Claim an existing counter; the holder may re-acquire, others conflict."""
        lease = self._lease(client_identity, counter_id)
        return lease.counter_id

    def read(self, client_identity: str | None, counter_id: int) -> int:
        lease = self._lease(client_identity, counter_id)
        self._delay()
        with self._counter_locks[counter_id]:
            value = self.hwtpm.nv_read(counter_id)
            lease.last_known = value
            return value

    def increment(self, client_identity: str | None, counter_id: int) -> int:
        lease = self._lease(client_identity, counter_id)
        self._delay()
        with self._counter_locks[counter_id]:
            value = self.hwtpm.nv_increment(counter_id)
            lease.last_known = value
            return value

    # -- network endpoint -------------------------------------------------------

    def serve(self, fabric: Fabric, address: str, *, ca_roots: Iterable[Certificate],
              certificate: Certificate | None = None, chain=()) -> None:
        roots = tuple(ca_roots)

        def accept(req: ConnectRequest):
            identity = None
            if req.protected and req.certificate is not None and verify_chain(req.certificate, roots, req.chain):
                identity = req.certificate.subject
            return _McsSession(self, identity)

        fabric.listen(address, accept, domain=HOST, certificate=certificate, chain=chain)

    def dispatch(self, identity: str | None, frame: bytes) -> bytes:
        try:
            op, cid = decode_request(frame)
        except ValueError:
            return encode_response(McsStatus.NOT_FOUND)
        try:
            if op is Op.ALLOCATE:
                cid = self.allocate(identity)
                return encode_response(McsStatus.OK, cid, 0)
            if op is Op.ACQUIRE:
                self.acquire(identity, cid)
                return encode_response(McsStatus.OK, cid, 0)
            if op is Op.READ:
                return encode_response(McsStatus.OK, cid, self.read(identity, cid))
            return encode_response(McsStatus.OK, cid, self.increment(identity, cid))
        except (AuthError, NotFound, Conflict) as exc:
            return encode_response(_STATUS[type(exc)], cid)
        except UndefinedCounter:
            return encode_response(McsStatus.NOT_FOUND, cid)


class _McsSession:
    def __init__(self, service: MonotonicCounterService, identity: str | None):
        self.service = service
        self.peer_identity = identity

    def handle(self, payload: bytes) -> bytes:
        return self.service.dispatch(self.peer_identity, payload)


class McsClient:
    """Client stub used by an emulated TPM. Transport faults map to
    :class:`McsUnavailable` so callers can fail closed on a single type."""

    def __init__(self, channel: Channel):
        self.channel = channel

    @classmethod
    def connect(cls, fabric: Fabric, src: str, address: str, *, certificate=None, chain=(),
                server_roots=None) -> "McsClient":
        try:
            ch = fabric.connect(ConnectRequest(src, address, protected=True, certificate=certificate,
                                               chain=tuple(chain), server_roots=server_roots))
        except SimulationError as exc:
            raise McsUnavailable(f"cannot reach MCS at {address}: {exc}") from exc
        return cls(ch)

    def _call(self, op: Op, cid: int = 0) -> tuple[int, int]:
        try:
            reply = self.channel.request(encode_request(op, cid))
            status, rcid, value = decode_response(reply)
        except SimulationError as exc:
            raise McsUnavailable(f"MCS call failed: {exc}") from exc
        except ValueError as exc:
            raise McsUnavailable(f"garbled MCS reply: {exc}") from exc
        if status is not McsStatus.OK:
            raise _ERRORS[status](f"MCS {op.name} on counter {cid}: {status.name}")
        return rcid, value

    def allocate(self) -> int:
        return self._call(Op.ALLOCATE)[0]

    def acquire(self, cid: int) -> int:
        return self._call(Op.ACQUIRE, cid)[0]

    def read(self, cid: int) -> int:
        return self._call(Op.READ, cid)[1]

    def increment(self, cid: int) -> int:
        return self._call(Op.INCREMENT, cid)[1]
