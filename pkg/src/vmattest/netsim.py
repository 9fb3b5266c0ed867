"""In-process message fabric with adversary interposition.

Endpoints register a listener under an address; clients ``connect`` to it and
exchange frames over a :class:`Channel`. A channel is either plain or
integrity protected. Protected channels stand in for (PSK- or certificate-)
authenticated TLS: the handshake is abstracted, the session key never appears
on the wire and every frame carries a MAC over its sequence number, so any
modification, drop or reorder surfaces as :class:`IntegrityError` at the
receiver.

Attacks are hooks attached to a link ``(src, dst)``. A hook may rewrite the
connection request (redirect), terminate it itself (proxy), or rewrite frames
in flight. Hooks never see channels of the TEE trust domain.
"""

from __future__ import annotations

import dataclasses
import enum
import json
import threading
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Iterable, Iterator, Protocol

from .crypto import Certificate, Rng, mac, mac_equal, verify_chain
from .errors import (
    AuthError,
    ChannelClosed,
    IntegrityError,
    LocalityViolation,
    SimulationError,
)
from .wire import Kind, Status, TpmCommand, TpmResponse, strip_prefix, with_prefix

TEE = "tee"
HOST = "host"
GUEST = "guest"
NETWORK = "network"

CLIENT = "client"
SERVER = "server"


class ChannelMode(enum.Enum):
    PLAIN = "plain"
    INTEGRITY_PROTECTED = "integrity-protected"


class Handler(Protocol):
    def handle(self, payload: bytes) -> bytes: ...


@dataclass
class ConnectRequest:
    src: str
    dst: str
    protected: bool = True
    psk: bytes | None = None
    certificate: Certificate | None = None
    chain: tuple[Certificate, ...] = ()
    # if set, the server certificate must chain to one of these
    server_roots: tuple[Certificate, ...] | None = None
    meta: dict = field(default_factory=dict)


@dataclass
class Listener:
    address: str
    accept: Callable[[ConnectRequest], Handler]
    domain: str = HOST
    certificate: Certificate | None = None
    chain: tuple[Certificate, ...] = ()


@dataclass
class Frame:
    seq: int
    direction: str  # "c2s" / "s2c"
    payload: bytes
    tag: bytes | None = None


class AdversaryHook:
    """Base hook: passes everything through unchanged."""

    name = "hook"

    def on_connect(self, fabric: "Fabric", request: ConnectRequest):
        """Return None, a rewritten request, or a replacement Channel."""
        return None

    def on_frame(self, channel: "Channel", frame: Frame) -> Frame | None:
        return frame


class Channel:
    def __init__(
        self,
        fabric: "Fabric",
        name: str,
        src: str,
        dst: str,
        handler: Handler | None,
        key: bytes | None,
        domain: str,
        hooks: Iterable[AdversaryHook] = (),
        peer_identity: str | None = None,
        server_identity: str | None = None,
    ):
        self.fabric = fabric
        self.name = name
        self.src = src
        self.dst = dst
        self.handler = handler
        self._key = key
        self.domain = domain
        self.hooks = [] if domain == TEE else list(hooks)
        self.peer_identity = peer_identity
        self.server_identity = server_identity
        self.closed = False
        self._lock = threading.RLock()
        self._boxes = {CLIENT: deque(), SERVER: deque()}
        self._sent = {CLIENT: 0, SERVER: 0}
        self._received = {CLIENT: 0, SERVER: 0}

    @property
    def mode(self) -> ChannelMode:
        return ChannelMode.PLAIN if self._key is None else ChannelMode.INTEGRITY_PROTECTED

    def _tag(self, direction: str, seq: int, payload: bytes) -> bytes:
        return mac(self._key, self.name.encode(), direction.encode(), seq.to_bytes(8, "big"), payload)

    def send(self, payload: bytes, sender: str = CLIENT) -> None:
        with self._lock:
            if self.closed:
                raise ChannelClosed(f"{self.name} is closed")
            direction = "c2s" if sender == CLIENT else "s2c"
            seq = self._sent[sender]
            self._sent[sender] += 1
            frame = Frame(seq, direction, bytes(payload))
            if self._key is not None:
                frame.tag = self._tag(direction, seq, frame.payload)
            self.fabric.record("frame", channel=self.name, seq=seq, dir=direction,
                               payload=frame.payload.hex(), mac=frame.tag.hex() if frame.tag else None)
            for hook in self.hooks:
                before = frame.payload
                frame = hook.on_frame(self, frame)
                if frame is None:
                    self.fabric.record("drop", channel=self.name, seq=seq, dir=direction, hook=hook.name)
                    return
                if frame.payload != before:
                    self.fabric.record("rewrite", channel=self.name, seq=seq, dir=direction,
                                       payload=frame.payload.hex(), hook=hook.name)
            receiver = SERVER if sender == CLIENT else CLIENT
            self._boxes[receiver].append(frame)

    def recv(self, receiver: str = SERVER) -> bytes:
        with self._lock:
            if self.closed and not self._boxes[receiver]:
                raise ChannelClosed(f"{self.name} is closed")
            if not self._boxes[receiver]:
                self.fabric.record("timeout", channel=self.name, side=receiver)
                self.close()
                raise ChannelClosed(f"{self.name}: nothing to receive")
            frame = self._boxes[receiver].popleft()
            expected = self._received[receiver]
            self._received[receiver] += 1
            if self._key is not None:
                direction = "c2s" if receiver == SERVER else "s2c"
                good = (
                    frame.tag is not None
                    and frame.seq == expected
                    and frame.direction == direction
                    and mac_equal(frame.tag, self._tag(direction, expected, frame.payload))
                )
                if not good:
                    self.fabric.record("integrity_error", channel=self.name, seq=frame.seq, side=receiver)
                    self.close()
                    raise IntegrityError(f"{self.name}: frame {frame.seq} failed verification")
            return frame.payload

    def request(self, payload: bytes) -> bytes:
        """Send one request to the server handler and return its reply."""
        with self._lock:
            if self.handler is None:
                raise ChannelClosed(f"{self.name} has no server handler")
            self.send(payload, CLIENT)
            inbound = self.recv(SERVER)
            reply = self.handler.handle(inbound)
            self.send(reply, SERVER)
            out = self.recv(CLIENT)
            if getattr(self.handler, "closed", False):
                self.close()
            return out

    def close(self) -> None:
        with self._lock:
            if not self.closed:
                self.closed = True
                self.fabric.record("close", channel=self.name)
                on_close = getattr(self.handler, "on_channel_close", None)
                if on_close is not None:
                    on_close()


class _Queue:
    """Handler-less far end for raw send/recv use of :meth:`Fabric.open_channel`."""

    def handle(self, payload: bytes) -> bytes:  # pragma: no cover - never called
        raise ChannelClosed("raw channel has no handler")


class Fabric:
    def __init__(self, seed: int | str = 0):
        self.seed = seed
        self.rng = Rng(seed, "fabric")
        self._listeners: dict[str, Listener] = {}
        self._hooks: list[tuple[str | None, str | None, AdversaryHook]] = []
        self._lock = threading.RLock()
        self._counter = 0
        self.transcript: list[dict] = []
        self.channels: list[Channel] = []

    # -- transcript -----------------------------------------------------------

    def record(self, event: str, **fields) -> None:
        with self._lock:
            entry = {"n": len(self.transcript), "event": event}
            entry.update(fields)
            self.transcript.append(entry)

    def transcript_lines(self) -> str:
        with self._lock:
            return "".join(json.dumps(e, sort_keys=True) + "\n" for e in self.transcript)

    def export_transcript(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.transcript_lines())

    def wire_bytes(self) -> Iterator[bytes]:
        """Every payload observed on any channel, original and rewritten."""
        for e in list(self.transcript):
            if "payload" in e:
                yield bytes.fromhex(e["payload"])

    # -- registry -------------------------------------------------------------

    def listen(self, address: str, accept: Callable[[ConnectRequest], Handler], *,
               domain: str = HOST, certificate: Certificate | None = None,
               chain: tuple[Certificate, ...] = ()) -> Listener:
        with self._lock:
            if address in self._listeners:
                raise ValueError(f"address {address!r} already bound")
            listener = Listener(address, accept, domain, certificate, tuple(chain))
            self._listeners[address] = listener
            return listener

    def unlisten(self, address: str) -> None:
        with self._lock:
            self._listeners.pop(address, None)

    def has_listener(self, address: str) -> bool:
        return address in self._listeners

    def attach(self, hook: AdversaryHook, *, src: str | None = None, dst: str | None = None) -> None:
        listener = self._listeners.get(dst) if dst else None
        if listener is not None and listener.domain == TEE:
            raise ValueError(f"cannot attach {hook.name} inside the TEE trust domain ({dst})")
        with self._lock:
            self._hooks.append((src, dst, hook))
        self.record("hook", hook=hook.name, src=src, dst=dst)

    def _matching_hooks(self, src: str, dst: str) -> list[AdversaryHook]:
        return [h for s, d, h in self._hooks if (s is None or s == src) and (d is None or d == dst)]

    def _next_name(self, src: str, dst: str) -> str:
        with self._lock:
            self._counter += 1
            return f"{src}->{dst}#{self._counter}"

    # -- connections ----------------------------------------------------------

    def connect(self, request: ConnectRequest) -> Channel:
        origin = (request.src, request.dst)
        hooks = self._matching_hooks(*origin)
        for hook in hooks:
            out = hook.on_connect(self, request)
            if isinstance(out, Channel):
                return out
            if isinstance(out, ConnectRequest):
                if out.dst != request.dst:
                    self.record("redirect", src=request.src, dst=request.dst, to=out.dst, hook=hook.name)
                request = out
        listener = self._listeners.get(request.dst)
        if listener is None:
            self.record("reject", src=request.src, dst=request.dst, error="ChannelClosed")
            raise ChannelClosed(f"no endpoint listening at {request.dst!r}")
        if request.server_roots is not None:
            ok = listener.certificate is not None and verify_chain(
                listener.certificate, request.server_roots, listener.chain)
            if not ok:
                self.record("reject", src=request.src, dst=request.dst, error="AuthError")
                raise AuthError(f"server certificate of {request.dst!r} not issued by a trusted CA")
        try:
            handler = listener.accept(request)
        except SimulationError as exc:
            self.record("reject", src=request.src, dst=request.dst, error=exc.kind)
            raise
        frame_hooks = [] if listener.domain == TEE else hooks
        return self.establish(request, handler, listener.domain, hooks=frame_hooks,
                              server_identity=listener.certificate.subject if listener.certificate else None,
                              peer_identity=getattr(handler, "peer_identity", None))

    def establish(self, request: ConnectRequest, handler: Handler | None, domain: str, *,
                  hooks: Iterable[AdversaryHook] = (), server_identity: str | None = None,
                  peer_identity: str | None = None) -> Channel:
        """Build a channel to an already-accepted ``handler`` (used by proxies)."""
        name = self._next_name(request.src, request.dst)
        with self._lock:
            key = self.rng.bytes(32) if request.protected else None
        channel = Channel(self, name, request.src, request.dst, handler, key, domain, hooks,
                          peer_identity=peer_identity, server_identity=server_identity)
        with self._lock:
            self.channels.append(channel)
        self.record("connect", channel=name, src=request.src, dst=request.dst,
                    mode=channel.mode.value, domain=domain)
        return channel

    def open_channel(self, a: str, b: str, mode: ChannelMode = ChannelMode.INTEGRITY_PROTECTED,
                     domain: str = NETWORK) -> Channel:
        """Raw FIFO channel between two named endpoints, no server handler."""
        req = ConnectRequest(a, b, protected=mode is ChannelMode.INTEGRITY_PROTECTED)
        return self.establish(req, None, domain, hooks=self._matching_hooks(a, b))


# -- scheduling ----------------------------------------------------------------

class Scheduler:
    """Interleaves generator tasks step by step in a seeded order.

    ``concurrent=True`` instead runs each task in its own thread (stress mode,
    transcripts are then not reproducible).
    """

    def __init__(self, rng: Rng, concurrent: bool = False):
        self.rng = rng
        self.concurrent = concurrent
        self.trace: list[str] = []

    def run(self, tasks: dict[str, Callable[[], Iterator]]) -> dict[str, object]:
        if self.concurrent:
            return self._run_threads(tasks)
        results: dict[str, object] = {}
        live = {name: fn() for name, fn in tasks.items()}
        while live:
            names = sorted(live)
            name = names[self.rng.randrange(len(names))]
            self.trace.append(name)
            try:
                next(live[name])
            except StopIteration as stop:
                results[name] = stop.value
                del live[name]
            except Exception as exc:  # noqa: BLE001 - task failures are results
                results[name] = exc
                del live[name]
        return results

    def _run_threads(self, tasks):
        results: dict[str, object] = {}

        def drive(name, fn):
            gen = fn()
            try:
                while True:
                    next(gen)
            except StopIteration as stop:
                results[name] = stop.value
            except Exception as exc:  # noqa: BLE001
                results[name] = exc

        threads = [threading.Thread(target=drive, args=(n, f), name=n) for n, f in tasks.items()]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        return results


# -- attacks -------------------------------------------------------------------

class ReplaceVtpmId(AdversaryHook):
    """Rewrite the 4-byte vTPM routing prefix of hypervisor->router frames."""

    name = "replace-vtpm-id"

    def __init__(self, new_id: int):
        self.new_id = new_id
        self.rewritten = 0

    def on_frame(self, channel, frame):
        if frame.direction != "c2s" or len(frame.payload) < 4:
            return frame
        _, rest = strip_prefix(frame.payload)
        self.rewritten += 1
        return dataclasses.replace(frame, payload=with_prefix(self.new_id, rest))


class CuckooRedirect(AdversaryHook):
    """Point a connection at another endpoint than the one requested."""

    name = "cuckoo-redirect"

    def __init__(self, target: str):
        self.target = target

    def on_connect(self, fabric, request):
        return dataclasses.replace(request, dst=self.target)


class ProxyIntercept(AdversaryHook):
    """Terminate the hypervisor's TPM connection in an adversary proxy.

    The proxy opens its own upstream connection to the emulated TPM. To do
    so it needs the connection secret; it only holds the sealed blob and its
    own (remote) TPM, so it tries to unseal and otherwise guesses. Once in
    the middle it can drop extends matching ``drop`` (answering OK itself),
    and ``inject_reset`` resets the TPM and replays the extends it forwarded
    up to the last :meth:`mark`.
    """

    name = "proxy-intercept"

    def __init__(self, *, stolen_blob=None, own_tpm=None, rng: Rng | None = None,
                 drop: Callable[[TpmCommand], bool] | None = None, identity: str = "proxy"):
        self.stolen_blob = stolen_blob
        self.own_tpm = own_tpm
        self.rng = rng or Rng(0, "proxy")
        self.drop = drop or (lambda cmd: False)
        self.identity = identity
        self.upstream: Channel | None = None
        self.forwarded_extends: list[bytes] = []
        self.dropped: list[TpmCommand] = []
        self._mark = 0

    def _credential(self, fabric) -> bytes:
        if self.stolen_blob is not None and self.own_tpm is not None:
            try:
                return self.own_tpm.unseal(self.stolen_blob)
            except LocalityViolation as exc:
                fabric.record("proxy_unseal_failed", hook=self.name, error=exc.kind)
        return self.rng.bytes(32)

    def on_connect(self, fabric, request):
        up_req = dataclasses.replace(request, src=self.identity, psk=self._credential(fabric))
        # the proxy's own connection is not re-intercepted
        self.upstream = fabric.connect(up_req)
        relay = _ProxyRelay(self)
        down = ConnectRequest(request.src, f"{self.identity}@{request.dst}", protected=request.protected)
        return fabric.establish(down, relay, HOST)

    def mark(self) -> None:
        self._mark = len(self.forwarded_extends)

    def inject_reset(self) -> list[TpmResponse]:
        out = [TpmResponse.decode(self.upstream.request(TpmCommand(Kind.RESET).encode()))]
        for frame in self.forwarded_extends[: self._mark]:
            out.append(TpmResponse.decode(self.upstream.request(frame)))
        return out


class _ProxyRelay:
    def __init__(self, proxy: ProxyIntercept):
        self.proxy = proxy

    @property
    def closed(self) -> bool:
        return self.proxy.upstream is None or self.proxy.upstream.closed

    def handle(self, payload: bytes) -> bytes:
        try:
            cmd = TpmCommand.decode(payload)
        except ValueError:
            cmd = None
        if cmd is not None and self.proxy.drop(cmd):
            self.proxy.dropped.append(cmd)
            return TpmResponse(Status.OK).encode()
        reply = self.proxy.upstream.request(payload)
        if cmd is not None and cmd.kind is Kind.EXTEND:
            self.proxy.forwarded_extends.append(payload)
        return reply
