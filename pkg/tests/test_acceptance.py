"""Acceptance criteria 1-10, one test each.

Run ``python tests/test_acceptance.py`` (or ``pytest tests/test_acceptance.py``)
for one PASS/FAIL line per criterion.
"""

import random
import threading
import time
from itertools import permutations

import pytest

from vmattest.config import Config
from vmattest.crypto import HashAlg, hash_data, verify
from vmattest.errors import RollbackDetected, VmShutdown
from vmattest.hwtpm import PcrState
from vmattest.ima import ImaEngine, ImaLog, ImaLogEntry, SimFile, verify_log
from vmattest.netsim import Scheduler
from vmattest.platform import VmSpec, World
from vmattest.scenario import MATRIX, builtin, run_matrix, run_scenario
from vmattest.wire import Kind, Status, TpmCommand, read_pcr_command

from conftest import files

# worlds produced by criteria 1-8, scanned by criterion 9
WORLDS: dict[int, list[World]] = {}


def counter_value(host, tpm) -> int:
    return host.hwtpm.nv_read(tpm.state.mc_counter_id)


# -- 1 ----------------------------------------------------------------------

def run_benign():
    start = time.perf_counter()
    world = World(seed=1)
    host = world.bootstrap_host()
    boot = files("svc", 20)
    kernel = b"linux guest kernel"
    policy = world.make_policy("alice-policy", files=boot, kernel=kernel)
    tenant = world.tenant("alice")
    vm = host.launch_vm(VmSpec("alice", tenant.key.public, boot, kernel=kernel), policy)
    tenant.deploy_policy(host.monitor.address, policy)
    result = tenant.ssh_handshake(vm.ssh_address)
    return world, result, time.perf_counter() - start


def test_criterion_01():
    world, result, elapsed = run_benign()
    WORLDS[1] = [world]
    assert result.label == "TrustEstablished"
    assert elapsed < 5.0


# -- 2 ----------------------------------------------------------------------

def test_criterion_02():
    start = time.perf_counter()
    reports = {r.name: r for r in run_matrix(seed=0)}
    elapsed = time.perf_counter() - start
    WORLDS[2] = [r.world for r in reports.values()]
    attacks = [n for n in MATRIX if n != "benign"]
    assert len(attacks) == 6
    for name in attacks:
        r = reports[name]
        assert r.passed, (name, r.outcome, r.expected)
        if name.endswith("_defended"):
            assert r.outcome != "undetected" and r.outcome != "trust_established"
        else:
            assert r.outcome == "undetected"
    assert elapsed < 30.0


# -- 3 ----------------------------------------------------------------------

def _bare_log(n: int):
    pcrs = PcrState()

    def extend(payload):
        pcrs.extend(HashAlg.SHA1, payload.index, payload.sha1)
        return True

    engine = ImaEngine(extend)
    for f in files("log", n):
        engine.measure_open(f)
    return engine.log, pcrs.read(HashAlg.SHA1, 10)


def tamper_cases(log: ImaLog):
    n = len(log.entries)
    for i in range(n):
        yield f"delete {i}", log.entries[:i] + log.entries[i + 1:]
    for i in range(n):
        # a well-formed entry for other content at the same path
        forged = ImaLogEntry.from_file(SimFile(log.entries[i].path, b"harmless looking"))
        yield f"mutate {i}", log.entries[:i] + [forged] + log.entries[i + 1:]
    for i in range(n - 1):
        e = list(log.entries)
        e[i], e[i + 1] = e[i + 1], e[i]
        yield f"swap {i}", e


def test_criterion_03():
    log, pcr = _bare_log(10)
    assert verify_log(log, pcr)
    cases = list(tamper_cases(log))
    assert len(cases) == 29
    survivors = [name for name, entries in cases if verify_log(ImaLog(entries), pcr)]
    assert survivors == []


# -- 4 ----------------------------------------------------------------------

def _random_command(rng, pool, idempotent: bool):
    if idempotent:
        return rng.choice([read_pcr_command(HashAlg.SHA256, rng.randrange(24)),
                           TpmCommand(Kind.QUOTE, bytes(32) + bytes([1, 0, 10]))])
    kind = rng.choice(["extend", "key", "reset"])
    if kind == "extend":
        return ImaLogEntry.from_file(rng.choice(pool)).payload().command()
    if kind == "key":
        return TpmCommand(Kind.CREATE_KEY, f"k{rng.randrange(10**9)}".encode())
    return TpmCommand(Kind.RESET)


def test_criterion_04():
    world = World(seed=4)
    host = world.bootstrap_host()
    pool = files("rb", 6)
    detected = 0
    for i in range(100):
        rng = random.Random(i)
        policy = world.make_policy(f"p{i}", files=pool)
        tpm = host.monitor.instances[host.monitor.spawn_instance(policy).instance_id].tpm
        for _ in range(rng.randrange(5)):
            tpm.handle_command(None, _random_command(rng, pool, rng.random() < 0.5))
        blob = tpm.save_state()
        for _ in range(rng.randrange(3)):
            assert tpm.handle_command(None, _random_command(rng, pool, True)).status is not Status.REFUSED
        assert tpm.handle_command(None, _random_command(rng, pool, False)).ok
        try:
            tpm.load_state(blob)
        except RollbackDetected:
            detected += 1
    WORLDS[4] = [world]
    assert detected == 100


# -- 5 ----------------------------------------------------------------------

def test_criterion_05():
    world = World(seed=5)
    host = world.bootstrap_host()
    v1 = SimFile("/usr/bin/app", b"app v1")
    v2 = SimFile("/usr/bin/app", b"app v2")
    policy = world.make_policy("p", files=(v1, v2))
    vm = host.launch_vm(VmSpec("vm", world.tenant("t").key.public), policy)
    tpm = host.monitor.instance_for("p").tpm
    for _ in range(1000):
        vm.open(v1)
    assert len(vm.ima.log) == 1 and vm.ima.extends == 1 and tpm.allowed_extends == 1
    vm.open(v2)
    for _ in range(10):
        vm.open(v2)
    assert len(vm.ima.log) == 2 and vm.ima.extends == 2 and tpm.allowed_extends == 2
    WORLDS[5] = [world]


# -- 6 ----------------------------------------------------------------------

def test_criterion_06():
    world = World(seed=6)
    host = world.bootstrap_host()
    boot = files("k", 50)
    policy = world.make_policy("p", files=boot)
    tenant = world.tenant("t")
    vm = host.launch_vm(VmSpec("vm", tenant.key.public, boot), policy)
    tenant.deploy_policy(host.monitor.address, policy)
    tpm = host.monitor.instance_for("p").tpm
    WORLDS[6] = [world]
    assert len(vm.process_table) == 50
    assert counter_value(host, tpm) == 51
    assert tpm.mcs.read(tpm.state.mc_counter_id) == 51


# -- 7 ----------------------------------------------------------------------

def test_criterion_07():
    world = World(seed=7)
    host = world.bootstrap_host()
    good = files("ok", 30)
    held = 0
    for i in range(100):
        rng = random.Random(1000 + i)
        script = rng.sample(good, rng.randrange(1, 12))
        poison = SimFile(f"/tmp/payload{i}", f"poison {i}".encode())
        script.insert(rng.randrange(len(script) + 1), poison)
        policy = world.make_policy(f"p{i}", files=good)
        vm = host.launch_vm(VmSpec(f"vm{i}", world.tenant("t").key.public, tuple(script)), policy, boot=False)
        with pytest.raises(VmShutdown):
            vm.boot()
        tpm = host.monitor.instance_for(f"p{i}").tpm
        if (vm.link.closed and all(not s.open for s in tpm.sessions)
                and poison.path not in vm.process_table and not vm.running):
            held += 1
    WORLDS[7] = [world]
    assert held == 100


# -- 8 ----------------------------------------------------------------------

def _isolation_world(concurrent: bool):
    world = World(seed=8)
    host = world.bootstrap_host()
    names = ["t0", "t1", "t2", "t3"]
    vms, policies = {}, {}
    for n in names:
        boot = files(n, 6)
        policies[n] = world.make_policy(f"{n}-policy", files=boot, kernel=f"kernel {n}".encode())
        vms[n] = host.launch_vm(VmSpec(n, world.tenant(n).key.public, boot, kernel=f"kernel {n}".encode()),
                                policies[n], boot=False)
    Scheduler(world.rng.child("sched"), concurrent=concurrent).run({n: vms[n].boot_steps for n in names})

    keys = {}
    threads = [threading.Thread(target=lambda n=n: keys.__setitem__(
        n, world.tenant(n).deploy_policy(host.monitor.address, policies[n]))) for n in names]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    sigs = {}
    challenge = hash_data(HashAlg.SHA256, b"isolation challenge").value
    for n in names:
        r = vms[n].tpm_request(TpmCommand(Kind.SIGN_CHALLENGE, challenge))
        assert r.ok, r
        sigs[n] = r.body[:64]
    return world, names, keys, sigs, challenge


@pytest.mark.parametrize("concurrent", [False, True], ids=["scheduled", "threads"])
def test_criterion_08(concurrent):
    world, names, keys, sigs, challenge = _isolation_world(concurrent)
    WORLDS.setdefault(8, []).append(world)
    assert len(set(keys.values())) == 4
    cross = [verify(keys[a], challenge, sigs[b]) for a, b in permutations(names, 2)]
    assert len(cross) == 12 and not any(cross)
    assert all(verify(keys[n], challenge, sigs[n]) for n in names)


# -- 9 ----------------------------------------------------------------------

REBUILD = {
    1: lambda: [run_benign()[0]],
    2: lambda: [r.world for r in run_matrix(seed=0)],
    8: lambda: [_isolation_world(False)[0]],
}


def test_criterion_09():
    for n, build in REBUILD.items():
        if n not in WORLDS:
            WORLDS[n] = build()
    frames = keys = 0
    for worlds in WORLDS.values():
        for world in worlds:
            secrets = [k for host in world.hosts.values() for inst in host.monitor.instances.values()
                       for k in inst.tpm.private_key_material()]
            keys += len(secrets)
            for payload in world.fabric.wire_bytes():
                frames += 1
                assert not any(k in payload for k in secrets)
    assert frames > 0 and keys > 0


# -- 10 ---------------------------------------------------------------------

def test_criterion_10(tmp_path):
    runs = []
    for k in range(2):
        out = tmp_path / f"run{k}"
        run_matrix(seed=0, out_dir=out)
        runs.append({n: (out / f"{n}.transcript.jsonl").read_bytes() for n in MATRIX})
    assert runs[0] == runs[1]
    assert all(runs[0].values())


if __name__ == "__main__":
    import sys

    sys.exit(pytest.main([__file__, "-q", "-p", "no:cacheprovider"]))
