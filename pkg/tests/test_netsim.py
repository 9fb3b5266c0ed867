import dataclasses

import pytest

from vmattest.crypto import Rng
from vmattest.errors import AuthError, ChannelClosed, IntegrityError
from vmattest.netsim import (
    TEE,
    AdversaryHook,
    ChannelMode,
    ConnectRequest,
    CuckooRedirect,
    Fabric,
    ReplaceVtpmId,
    Scheduler,
)
from vmattest.wire import strip_prefix, with_prefix


class FlipByte(AdversaryHook):
    name = "flip"

    def on_frame(self, channel, frame):
        p = bytearray(frame.payload)
        p[-1] ^= 0xFF
        return dataclasses.replace(frame, payload=bytes(p))


class Echo:
    def handle(self, payload):
        return b"echo:" + payload


def test_plain_round_trip():
    f = Fabric(0)
    ch = f.open_channel("a", "b", ChannelMode.PLAIN)
    ch.send(b"hello")
    assert ch.recv() == b"hello"


def test_protected_tamper_raises():
    f = Fabric(0)
    f.attach(FlipByte(), src="a", dst="b")
    ch = f.open_channel("a", "b", ChannelMode.INTEGRITY_PROTECTED)
    ch.send(b"hello")
    with pytest.raises(IntegrityError):
        ch.recv()
    assert ch.closed


def test_plain_tamper_delivered_silently():
    f = Fabric(0)
    f.attach(FlipByte(), src="a", dst="b")
    ch = f.open_channel("a", "b", ChannelMode.PLAIN)
    ch.send(b"hello")
    assert ch.recv() == b"hell" + bytes([ord("o") ^ 0xFF])


def test_recv_on_empty_or_closed():
    f = Fabric(0)
    ch = f.open_channel("a", "b")
    with pytest.raises(ChannelClosed):
        ch.recv()
    with pytest.raises(ChannelClosed):
        ch.send(b"x")


def test_replayed_frame_rejected():
    f = Fabric(0)
    ch = f.open_channel("a", "b")
    ch.send(b"one")
    frame = ch._boxes["server"][0]
    ch._boxes["server"].append(frame)
    assert ch.recv() == b"one"
    with pytest.raises(IntegrityError):
        ch.recv()


def test_request_reply_through_listener():
    f = Fabric(0)
    f.listen("svc", lambda req: Echo())
    ch = f.connect(ConnectRequest("client", "svc"))
    assert ch.request(b"ping") == b"echo:ping"


def test_missing_endpoint_and_untrusted_server():
    from vmattest.crypto import SigningKeyPair, self_signed

    f = Fabric(0)
    with pytest.raises(ChannelClosed):
        f.connect(ConnectRequest("c", "nowhere"))
    f.listen("svc", lambda req: Echo())
    root = self_signed("root", SigningKeyPair.generate(Rng(0, "root")))
    with pytest.raises(AuthError):
        f.connect(ConnectRequest("c", "svc", server_roots=(root,)))


def test_tee_channels_cannot_be_hooked():
    f = Fabric(0)
    f.listen("enclave", lambda req: Echo(), domain=TEE)
    with pytest.raises(ValueError):
        f.attach(FlipByte(), dst="enclave")
    # a wildcard hook still does not reach TEE frames
    f.attach(FlipByte())
    ch = f.connect(ConnectRequest("c", "enclave"))
    assert ch.request(b"x") == b"echo:x"


def test_replace_vtpm_id_rewrites_prefix():
    f = Fabric(0)
    hook = ReplaceVtpmId(9)
    f.attach(hook, src="qemu")
    ch = f.open_channel("qemu", "router", ChannelMode.PLAIN)
    ch.send(with_prefix(1, b"cmd"))
    assert strip_prefix(ch.recv()) == (9, b"cmd")
    assert hook.rewritten == 1


def test_cuckoo_redirect_changes_destination():
    f = Fabric(0)
    f.listen("real", lambda req: Echo())
    f.listen("evil", lambda req: type("E", (), {"handle": lambda self, p: b"evil"})())
    f.attach(CuckooRedirect("evil"), src="guest")
    ch = f.connect(ConnectRequest("guest", "real", protected=False))
    assert ch.request(b"x") == b"evil"
    assert any(e["event"] == "redirect" for e in f.transcript)


def test_transcript_deterministic():
    def run():
        f = Fabric(42)
        f.listen("svc", lambda req: Echo())
        ch = f.connect(ConnectRequest("c", "svc"))
        ch.request(b"abc")
        return f.transcript_lines()

    assert run() == run()


def test_scheduler_seeded_and_complete():
    def task(n):
        def gen():
            for i in range(n):
                yield i
            return n
        return gen

    s1 = Scheduler(Rng(1, "s"))
    r1 = s1.run({"a": task(3), "b": task(4)})
    s2 = Scheduler(Rng(1, "s"))
    s2.run({"a": task(3), "b": task(4)})
    assert r1 == {"a": 3, "b": 4}
    assert s1.trace == s2.trace
    assert Scheduler(Rng(1, "s"), concurrent=True).run({"a": task(3), "b": task(4)}) == r1
