import pytest
from hypothesis import HealthCheck, given, settings, strategies as st

from vmattest.config import Config
from vmattest.crypto import HashAlg, hash_data, verify
from vmattest.emutpm import CHALLENGE_SIZE, Conformance, spawn_instance
from vmattest.errors import (
    AuthError,
    ConnectionRefused,
    InstanceMismatch,
    McsUnavailable,
    NotProvisioned,
    PolicyError,
    PolicyViolation,
    RollbackDetected,
    TpmError,
)
from vmattest.ima import ImaLogEntry, SimFile
from vmattest.netsim import ConnectRequest
from vmattest.platform import World
from vmattest.policy import VerificationResult, Violation
from vmattest.wire import Kind, Status, TpmCommand, TpmResponse, read_pcr_command

from conftest import files

GOOD = files("good", 8)
BAD = SimFile("/tmp/bad", b"not whitelisted")


def rig(config=None, name="p"):
    world = World(0, config or Config())
    host = world.bootstrap_host()
    policy = world.make_policy(name, files=GOOD)
    ticket = host.monitor.spawn_instance(policy)
    inst = host.monitor.instances[ticket.instance_id]
    return world, host, inst


def extend(f):
    return ImaLogEntry.from_file(f).payload().command()


def counter(host, tpm):
    return host.hwtpm.nv_read(tpm.state.mc_counter_id)


def test_two_spawns_distinct():
    world, host, a = rig()
    host.monitor.spawn_instance(world.make_policy("q", files=GOOD))
    b = host.monitor.instances["vtpm-2"]
    assert a.instance_id != b.instance_id
    assert a.endpoint != b.endpoint
    assert a.connection_secret != b.connection_secret and len(a.connection_secret) == 32


def test_spawn_counter_starts_at_zero():
    _, host, inst = rig()
    assert inst.tpm.mcs.read(inst.tpm.state.mc_counter_id) == 0


def test_spawn_rejects_invalid_policy():
    world, host, inst = rig()
    with pytest.raises(PolicyError):
        spawn_instance("policy_id: x\n", inst.tpm.mcs, fabric=world.fabric, instance_id="z", vtpm_id=9,
                       rng=world.rng, sealing_key=bytes(32))
    with pytest.raises(TypeError):
        spawn_instance(object(), inst.tpm.mcs, fabric=world.fabric, instance_id="z", vtpm_id=9,
                       rng=world.rng, sealing_key=bytes(32))


def test_spawn_fails_without_mcs():
    world = World(0)
    host = world.bootstrap_host()
    host.mcs.available = False
    with pytest.raises(McsUnavailable):
        host.monitor.spawn_instance(world.make_policy("p", files=GOOD))
    # the policy binding was rolled back
    host.mcs.available = True
    host.monitor.spawn_instance(world.make_policy("p", files=GOOD))


def test_single_connection_and_secret():
    _, _, inst = rig()
    tpm = inst.tpm
    with pytest.raises(AuthError):
        tpm.accept_connection(bytes(32))
    s = tpm.accept_connection(inst.connection_secret)
    assert s.open
    tpm.close_session(s)
    with pytest.raises(ConnectionRefused):
        tpm.accept_connection(inst.connection_secret)


def test_ablations_relax_connection_rules():
    _, _, inst = rig(Config(psk_auth=False, single_connection=False))
    inst.tpm.accept_connection(bytes(32))
    inst.tpm.accept_connection(None)
    assert len(inst.tpm.sessions) == 2


def test_allow_extends_count_and_readpcr_is_free():
    _, host, inst = rig()
    tpm = inst.tpm
    s = tpm.accept_connection(inst.connection_secret)
    for f in GOOD:
        assert tpm.handle_command(s, extend(f)).ok
    assert counter(host, tpm) == len(GOOD) == tpm.state.mc_value
    assert tpm.handle_command(s, read_pcr_command(HashAlg.SHA256, 10)).ok
    assert counter(host, tpm) == len(GOOD)
    assert tpm.handle_command(None, TpmCommand(Kind.CREATE_KEY, b"ssh")).ok
    assert counter(host, tpm) == len(GOOD) + 1


def test_deny_closes_session_and_violates():
    _, host, inst = rig()
    tpm = inst.tpm
    s = tpm.accept_connection(inst.connection_secret)
    before = tpm.state.pcrs.read(HashAlg.SHA256, 10)
    r = tpm.handle_command(s, extend(BAD))
    assert r.status is Status.DENIED
    assert not s.open and tpm.state.conformance is Conformance.VIOLATED
    assert tpm.state.pcrs.read(HashAlg.SHA256, 10) == before
    assert tpm.handle_command(s, read_pcr_command(HashAlg.SHA1, 0)).status is Status.REFUSED
    # Violated is terminal
    tpm.handle_command(None, extend(GOOD[0]))
    assert tpm.state.conformance is Conformance.VIOLATED


def test_inconsistent_signature_bank_denied():
    _, _, inst = rig()
    tpm = inst.tpm
    payload = ImaLogEntry.from_file(GOOD[0]).payload()
    forged = type(payload)(payload.index, payload.sha1, payload.sha256, bytes([1]) * 64, b"")
    assert tpm.handle_command(None, forged.command()).status is Status.DENIED


def test_mcs_failure_refuses_and_closes():
    _, host, inst = rig()
    tpm = inst.tpm
    s = tpm.accept_connection(inst.connection_secret)
    host.mcs.available = False
    r = tpm.handle_command(s, extend(GOOD[0]))
    assert r.status is Status.REFUSED and not s.open
    assert tpm.state.pcrs.read(HashAlg.SHA256, 10).value == bytes(32)


def test_bad_frames_are_errors_without_increment():
    _, host, inst = rig()
    tpm = inst.tpm
    assert tpm.handle_command(None, TpmCommand(Kind.EXTEND, b"short")).status is Status.ERROR
    assert tpm.handle_command(None, TpmCommand(Kind.READ_PCR, b"\x02\x63")).status is Status.ERROR
    assert counter(host, tpm) == 0


def _provisioned():
    world, host, inst = rig()
    tpm = inst.tpm
    pub = TpmResponse.decode(host.monitor._controls[inst.instance_id].request(
        TpmCommand(Kind.CREATE_KEY, b"ssh").encode())).body
    return world, host, inst, tpm, pub


def test_sign_challenge_gate():
    world, host, inst, tpm, pub = _provisioned()
    challenge = bytes(range(CHALLENGE_SIZE))
    assert verify(pub, challenge, tpm.sign_challenge(None, challenge))
    with pytest.raises(TpmError):
        tpm.sign_challenge(None, bytes(31))
    tpm.handle_command(None, extend(BAD))
    with pytest.raises(PolicyViolation):
        tpm.sign_challenge(None, challenge)


def test_sign_requires_resident_key():
    _, _, inst = rig()
    with pytest.raises(NotProvisioned):
        inst.tpm.sign_challenge(None, bytes(32))
    r = inst.tpm.handle_command(None, TpmCommand(Kind.SIGN_CHALLENGE, bytes(32)))
    assert r.status is Status.NOT_PROVISIONED


def test_response_carries_signature_and_public_only():
    _, _, inst, tpm, pub = _provisioned()
    r = tpm.handle_command(None, TpmCommand(Kind.SIGN_CHALLENGE, bytes(32)))
    assert r.ok and r.body[64:] == pub and len(r.body) == 96
    assert tpm.state.resident_keys["ssh"].private not in r.body


def test_host_recheck_and_staleness_window():
    for window, expected_calls in ((0, 4), (3, 2)):
        world, host, inst = rig(Config(staleness_window=window))
        tpm = inst.tpm
        tpm.handle_command(None, TpmCommand(Kind.CREATE_KEY, b"ssh"))
        calls = []
        real = tpm.host_check
        tpm.host_check = lambda p: calls.append(1) or real(p)
        for _ in range(4):
            tpm.sign_challenge(None, bytes(32))
            world.clock.tick()
        assert len(calls) == expected_calls, window


def test_failing_host_check_blocks_signing():
    _, _, inst, tpm, _ = _provisioned()
    tpm.host_check = lambda p: VerificationResult((Violation("PcrMismatch", "sha256:17"),))
    with pytest.raises(PolicyViolation) as info:
        tpm.sign_challenge(None, bytes(32))
    assert info.value.violations[0].subject == "sha256:17"


def test_guest_boot_pcrs_checked():
    world = World(0)
    host = world.bootstrap_host()
    policy = world.make_policy("k", files=GOOD, kernel=b"expected kernel")
    inst = host.monitor.instances[host.monitor.spawn_instance(policy).instance_id]
    inst.tpm.handle_command(None, TpmCommand(Kind.CREATE_KEY, b"ssh"))
    from vmattest.platform import kernel_extend

    inst.tpm.handle_command(None, kernel_extend(b"some other kernel").command())
    with pytest.raises(PolicyViolation):
        inst.tpm.sign_challenge(None, bytes(32))


def test_save_load_and_rollback():
    _, host, inst = rig()
    tpm = inst.tpm
    blob = tpm.save_state()
    tpm.load_state(blob)
    tpm.handle_command(None, extend(GOOD[0]))
    with pytest.raises(RollbackDetected):
        tpm.load_state(blob)
    # the persisted copy on host disk is current
    tpm.load_state(host.storage[inst.instance_id])


def test_rollback_check_can_be_ablated():
    _, _, inst = rig(Config(rollback_protection=False))
    blob = inst.tpm.save_state()
    inst.tpm.handle_command(None, extend(GOOD[0]))
    inst.tpm.load_state(blob)
    assert inst.tpm.state.pcrs.read(HashAlg.SHA256, 10).value == bytes(32)


def test_cross_instance_blob_rejected():
    world, host, a = rig()
    host.monitor.spawn_instance(world.make_policy("q", files=GOOD))
    b = host.monitor.instances["vtpm-2"]
    with pytest.raises(InstanceMismatch):
        a.tpm.load_state(b.tpm.save_state())
    with pytest.raises(InstanceMismatch):
        a.tpm.load_state(b"garbage" * 10)


def test_restart_allows_one_new_connection():
    _, _, inst = rig()
    tpm = inst.tpm
    s = tpm.accept_connection(inst.connection_secret)
    tpm.load_state(tpm.save_state())
    assert not s.open
    tpm.accept_connection(inst.connection_secret)
    with pytest.raises(ConnectionRefused):
        tpm.accept_connection(inst.connection_secret)


def test_state_round_trip_keeps_keys():
    _, _, inst, tpm, pub = _provisioned()
    tpm.load_state(tpm.save_state())
    assert tpm.state.resident_keys["ssh"].public == pub


commands = st.lists(st.one_of(
    st.sampled_from(GOOD).map(lambda f: ("extend", f)),
    st.just(("extend", BAD)),
    st.just(("sign", None)),
    st.just(("read", None)),
    st.just(("key", None)),
    st.just(("reset", None)),
), max_size=14)


@settings(max_examples=25, deadline=None, suppress_health_check=[HealthCheck.too_slow])
@given(commands)
def test_property_gate_soundness_counter_bound_and_confinement(seq):
    world, host, inst = rig()
    tpm = inst.tpm
    link = world.fabric.connect(ConnectRequest("qemu:vm", inst.endpoint, psk=inst.connection_secret))
    denied = False
    for op, arg in seq:
        if link.closed:
            break
        if op == "extend":
            cmd = extend(arg)
        elif op == "sign":
            cmd = TpmCommand(Kind.SIGN_CHALLENGE, bytes(32))
        elif op == "read":
            cmd = read_pcr_command(HashAlg.SHA1, 10)
        elif op == "reset":
            cmd = TpmCommand(Kind.RESET)
        else:
            host.monitor._controls[inst.instance_id].request(TpmCommand(Kind.CREATE_KEY, b"ssh").encode())
            continue
        r = TpmResponse.decode(link.request(cmd.encode()))
        if op == "extend" and arg is BAD:
            denied = True
            assert r.status is Status.DENIED
        if op == "sign" and r.ok:
            assert not denied
        assert counter(host, tpm) >= tpm.executed_non_idempotent
    secrets = tpm.private_key_material()
    assert not any(k in payload for payload in world.fabric.wire_bytes() for k in secrets)
