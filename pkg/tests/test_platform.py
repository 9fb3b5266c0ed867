import hashlib

import pytest

from vmattest.config import Config
from vmattest.crypto import HashAlg, verify_chain
from vmattest.errors import AuthError, Conflict, LocalityViolation, PolicyViolation, VmShutdown
from vmattest.hwtpm import HardwareTpm
from vmattest.ima import SimFile
from vmattest.netsim import CuckooRedirect, ProxyIntercept
from vmattest.platform import DEFAULT_HOST_BOOT, BootMeasurement, VmSpec, World
from vmattest.wire import read_pcr_command

from conftest import files

SOME = files("base", 1)


def test_host_pcrs_match_hashlib_fold(host):
    for index in {m.index for m in DEFAULT_HOST_BOOT}:
        value = bytes(32)
        for m in DEFAULT_HOST_BOOT:
            if m.index == index:
                value = hashlib.sha256(value + hashlib.sha256(m.data).digest()).digest()
        assert host.hwtpm.pcr_read(HashAlg.SHA256, index).value == value


def test_reboot_reproduces_pcrs(host):
    before = {i: host.hwtpm.pcr_read(HashAlg.SHA1, i) for i in (0, 10, 17)}
    host.reboot()
    assert before == {i: host.hwtpm.pcr_read(HashAlg.SHA1, i) for i in (0, 10, 17)}


def test_host_appraisal_blocks_unsigned(host):
    from vmattest.ima import OpenResult

    assert host.run_program(SimFile("/usr/local/bin/rogue", b"x")) is OpenResult.DENIED


def test_service_certs_chain_to_ca(world, host):
    assert verify_chain(host.monitor.certificate, [world.ca.root])


def test_duplicate_policy_conflicts(world, host):
    p = world.make_policy("p", files=SOME)
    host.monitor.spawn_instance(p)
    with pytest.raises(Conflict):
        host.monitor.spawn_instance(p)


def test_benign_flow(alice_setup):
    tenant, vm, _ = alice_setup
    assert vm.running and len(vm.process_table) == 5
    assert tenant.ssh_handshake(vm.ssh_address).established


def test_denied_boot_shuts_vm_down(world, host):
    boot = files("a", 3)
    policy = world.make_policy("p", files=boot[:2])
    tenant = world.tenant("alice")
    vm = host.launch_vm(VmSpec("vm", tenant.key.public, boot[:2]), policy)
    with pytest.raises(VmShutdown) as info:
        vm.open(boot[2])
    assert info.value.cause.kind == "PolicyViolation"
    assert not vm.running and boot[2].path not in vm.process_table
    with pytest.raises(VmShutdown):
        vm.open(boot[0])


def test_guest_cannot_issue_host_only_commands(alice_setup):
    from vmattest.wire import Kind, Status, TpmCommand

    _, vm, _ = alice_setup
    assert vm.tpm_request(TpmCommand(Kind.CREATE_KEY, b"ssh")).status is Status.DENIED
    assert vm.tpm_request(read_pcr_command(HashAlg.SHA256, 10)).ok


def test_sealed_secret_bound_to_host_tpm(world, host):
    ticket = host.monitor.spawn_instance(world.make_policy("p", files=SOME))
    other = HardwareTpm("elsewhere", world.manufacturer, world.rng.child("elsewhere"))
    with pytest.raises(LocalityViolation):
        other.unseal(ticket.sealed_secret)


def test_proxy_without_secret_is_rejected(world, host):
    ticket = host.monitor.spawn_instance(world.make_policy("p", files=SOME))
    other = HardwareTpm("elsewhere", world.manufacturer, world.rng.child("elsewhere"))
    world.fabric.attach(ProxyIntercept(stolen_blob=ticket.sealed_secret, own_tpm=other), src="qemu:vm")
    with pytest.raises(AuthError):
        host.hypervisor.attach(ticket, "vm")


def test_tampered_drtm_blocks_deployment(world, host):
    policy = world.make_policy("p", files=SOME)
    host.monitor.spawn_instance(policy)
    host.reboot(DEFAULT_HOST_BOOT[:-1] + (BootMeasurement(18, b"drtm:evil-mle"),))
    with pytest.raises(PolicyViolation) as info:
        world.tenant("t").deploy_policy(host.monitor.address, policy)
    subjects = {v.subject for v in info.value.violations}
    assert any(s.endswith(":18") for s in subjects)


def test_tenants_get_distinct_keys(world, host):
    keys = set()
    for name in ("alice", "bob"):
        policy = world.make_policy(name, files=SOME)
        t = world.tenant(name)
        host.launch_vm(VmSpec(name, t.key.public), policy)
        keys.add(t.deploy_policy(host.monitor.address, policy))
    assert len(keys) == 2


def test_redirected_ssh_fails_identity(world, host):
    for name in ("alice", "bob"):
        policy = world.make_policy(name, files=SOME)
        t = world.tenant(name)
        host.launch_vm(VmSpec(name, t.key.public), policy)
        t.deploy_policy(host.monitor.address, policy)
    world.fabric.attach(CuckooRedirect("ssh:bob"), src="tenant:alice")
    result = world.tenant("alice").ssh_handshake("ssh:alice")
    assert result.failure == "VmIdentityMismatch"
    # without key binding the presented key is trusted and the redirect succeeds up to tenant auth
    assert world.tenant("alice").ssh_handshake("ssh:alice", key_binding=False).failure == "TenantAuth"


def test_violated_instance_refuses_to_sign(world, host):
    from vmattest.ima import ImaLogEntry

    boot = files("a", 2)
    policy = world.make_policy("p", files=boot)
    t = world.tenant("alice")
    host.launch_vm(VmSpec("vm", t.key.public, boot), policy)
    t.deploy_policy(host.monitor.address, policy)
    # a denied extend on a link the VM does not own leaves the VM up
    tpm = host.monitor.instance_for("p").tpm
    tpm.handle_command(None, ImaLogEntry.from_file(SimFile("/tmp/x", b"bad")).payload().command())
    assert t.ssh_handshake("ssh:vm").failure == "IntegrityViolation"


def test_proxy_reset_reverts_measurements():
    world = World(0, Config(psk_auth=False))
    host = world.bootstrap_host()
    boot = files("a", 3)
    policy = world.make_policy("p", files=boot)
    ticket = host.monitor.spawn_instance(policy)
    proxy = ProxyIntercept()
    world.fabric.attach(proxy, src="qemu:vm", dst=ticket.endpoint)
    vm = host.hypervisor.launch(ticket, VmSpec("vm", world.tenant("t").key.public, boot))
    vm.open(boot[0])
    proxy.mark()
    mid = vm.tpm_request(read_pcr_command(HashAlg.SHA1, 10)).body
    vm.open(boot[1])
    vm.open(boot[2])
    assert all(r.ok for r in proxy.inject_reset())
    assert vm.tpm_request(read_pcr_command(HashAlg.SHA1, 10)).body == mid


def test_cuckoo_to_missing_device_closes(world, host):
    from vmattest.errors import ChannelClosed, NotFound

    policy = world.make_policy("p", files=SOME)
    vm = host.launch_vm(VmSpec("vm", world.tenant("t").key.public), policy)
    world.fabric.attach(CuckooRedirect("vtpmdev:nowhere"), src="guest:vm")
    with pytest.raises((ChannelClosed, NotFound)):
        vm.tpm_request(read_pcr_command(HashAlg.SHA1, 10))
