"""Simulated cloud node: host bootstrap, monitoring service, hypervisor,
VM lifecycle, policy deployment and the SSH-style trust handshake.

Trust domains follow the fabric's tags: the monitoring service, MCS and
emulated TPM internals are TEE; hypervisor links are host-domain; guest
driver links are guest-domain; tenant connections cross the network.
"""

from __future__ import annotations

import json
import threading
from dataclasses import dataclass, field
from typing import Iterable, Sequence

from .config import Config
from .crypto import (
    BANKS,
    Certificate,
    HashAlg,
    Rng,
    SIGNATURE_SIZE,
    SigningKeyPair,
    decode_fields,
    encode_fields,
    hash_data,
    issue_certificate,
    self_signed,
    verify,
)
from .emutpm import Clock, SpawnedInstance, VtpmRouter, spawn_instance
from .errors import (
    ChannelClosed,
    Conflict,
    NotFound,
    NotProvisioned,
    PolicyError,
    PolicyViolation,
    SimulationError,
    TpmError,
    VmShutdown,
)
from .hwtpm import HardwareTpm, Manufacturer, SealedBlob, fold
from .ima import IMA_PCR, ImaEngine, OpenResult, SimFile, verify_log
from .mcs import McsClient, MonotonicCounterService
from .netsim import GUEST, NETWORK, ConnectRequest, Fabric
from .policy import (
    PcrExpectation,
    PolicyDocument,
    VerificationResult,
    Violation,
    evaluate_quote,
    parse_policy,
    serialize_policy,
)
from .wire import GUEST_KINDS, ExtendPayload, Kind, Status, TpmCommand, TpmResponse, with_prefix

KERNEL_PCR = 9


@dataclass(frozen=True)
class BootMeasurement:
    """One DRTM / measured-boot event, extended into every bank."""

    index: int
    data: bytes


DEFAULT_HOST_BOOT = (
    BootMeasurement(0, b"firmware:host-uefi-2.7"),
    BootMeasurement(4, b"bootloader:grub-2.06"),
    BootMeasurement(8, b"kernel:linux-6.1-host"),
    BootMeasurement(17, b"drtm:sinit-acm"),
    BootMeasurement(18, b"drtm:hypervisor-mle"),
)

HOST_PROGRAMS = (
    ("/usr/bin/qemu-system-x86_64", b"qemu-system-x86_64 8.0 binary"),
    ("/usr/lib/vmattest/monitor", b"monitoring service enclave loader"),
    ("/usr/lib/vmattest/emutpm", b"emulated tpm enclave loader"),
)


def expected_pcrs(measurements: Iterable[BootMeasurement],
                  banks: Sequence[HashAlg] = (HashAlg.SHA256,)) -> tuple[PcrExpectation, ...]:
    """Reference values a tenant would put in ``host_pcrs`` for a fixture."""
    by_index: dict[int, list[bytes]] = {}
    for m in measurements:
        by_index.setdefault(m.index, []).append(m.data)
    out = []
    for bank in banks:
        for index, items in sorted(by_index.items()):
            out.append((bank, index, fold(bank, (hash_data(bank, d) for d in items))))
    return tuple(out)


def kernel_extend(kernel: bytes) -> ExtendPayload:
    return ExtendPayload(KERNEL_PCR, *(hash_data(b, kernel).value for b in BANKS))


def expected_guest_pcrs(kernel: bytes) -> tuple[PcrExpectation, ...]:
    return ((HashAlg.SHA256, KERNEL_PCR, fold(HashAlg.SHA256, [hash_data(HashAlg.SHA256, kernel)])),)


class CertificateAuthority:
    """Scenario CA: attests TEE services and issues their identities."""

    def __init__(self, name: str, rng: Rng):
        self.name = name
        self._key = SigningKeyPair.generate(rng)
        self.root = self_signed(name, self._key)

    def issue(self, subject: str, public_key: bytes) -> Certificate:
        return issue_certificate(subject, public_key, self.name, self._key)


class World:
    """Everything one scenario run shares: fabric, CA, TPM vendor, clock."""

    def __init__(self, seed: int | str = 0, config: Config | None = None):
        self.seed = seed
        self.config = config or Config()
        self.fabric = Fabric(seed)
        self.rng = Rng(seed, "world")
        self.clock = Clock()
        self.ca = CertificateAuthority("scenario-ca", self.rng.child("ca"))
        self.manufacturer = Manufacturer.create("tpm-vendor", self.rng.child("tpm-vendor"))
        self._provider = SigningKeyPair.generate(self.rng.child("provider-signer"))
        self.provider_cert = self_signed("provider-ima-signer", self._provider)
        self.hosts: dict[str, HostPlatform] = {}
        self.tenants: dict[str, Tenant] = {}
        self._signers: dict[str, SigningKeyPair] = {}

    def provider_signed(self, path: str, content: bytes) -> SimFile:
        return SimFile(path, content).signed(self._provider)

    def host_programs(self) -> list[SimFile]:
        return [self.provider_signed(p, c) for p, c in HOST_PROGRAMS]

    def signer(self, name: str) -> tuple[SigningKeyPair, Certificate]:
        """A named guest software signer (e.g. a tenant's release key)."""
        if name not in self._signers:
            self._signers[name] = SigningKeyPair.generate(self.rng.child(f"signer:{name}"))
        key = self._signers[name]
        return key, self_signed(f"signer:{name}", key)

    def bootstrap_host(self, name: str = "host-1", boot: Sequence[BootMeasurement] = DEFAULT_HOST_BOOT,
                       programs: Sequence[SimFile] | None = None) -> "HostPlatform":
        if name in self.hosts:
            raise Conflict(f"host {name!r} already bootstrapped")
        host = HostPlatform(self, name, boot, self.host_programs() if programs is None else programs)
        self.hosts[name] = host
        return host

    def tenant(self, name: str) -> "Tenant":
        if name not in self.tenants:
            self.tenants[name] = Tenant(self, name)
        return self.tenants[name]

    def make_policy(self, policy_id: str, *, files: Iterable[SimFile] = (), signers: Iterable[str] = (),
                    kernel: bytes | None = None,
                    host_boot: Sequence[BootMeasurement] = DEFAULT_HOST_BOOT) -> PolicyDocument:
        return PolicyDocument.build(
            policy_id,
            tpm_manufacturer_roots=(self.manufacturer.root,),
            host_pcrs=expected_pcrs(host_boot),
            guest_pcrs=expected_guest_pcrs(kernel) if kernel is not None else (),
            guest_file_whitelist=(f.digest for f in files),
            guest_signer_certs=(self.signer(s)[1] for s in signers),
            host_signer_certs=(self.provider_cert,),
        )


@dataclass
class LaunchTicket:
    instance_id: str
    vtpm_id: int
    endpoint: str
    sealed_secret: SealedBlob


class HostPlatform:
    def __init__(self, world: World, name: str, boot: Sequence[BootMeasurement], programs: Sequence[SimFile]):
        self.world = world
        self.name = name
        self.config = world.config
        rng = world.rng.child(f"host:{name}")
        self._rng = rng
        self.hwtpm = HardwareTpm(name, world.manufacturer, rng.child("hwtpm"))
        # TEE sealing key; stands in for the enclave's sealing identity
        self.tee_key = rng.child("tee").bytes(32)
        # untrusted host disk, where sealed emulated-TPM state lives
        self.storage: dict[str, bytes] = {}
        self.boot_measurements = tuple(boot)
        self.programs = tuple(programs)
        self._measure_boot()
        self.hwtpm.provision_attestation_key()

        self.mcs = MonotonicCounterService(self.hwtpm, latency=self.config.mcs_latency)
        self.mcs_address = f"mcs:{name}"
        mcs_key = SigningKeyPair.generate(rng.child("mcs-identity"))
        self.mcs.serve(world.fabric, self.mcs_address, ca_roots=(world.ca.root,),
                       certificate=world.ca.issue(self.mcs_address, mcs_key.public))

        self._start_host_ima()
        self.router = VtpmRouter(world.fabric, f"vtpm-router:{name}") if self.config.routing == "legacy-prefix" else None
        self.monitor = MonitoringService(self)
        self.hypervisor = Hypervisor(self)
        self.vms: dict[str, VmInstance] = {}

    def _measure_boot(self) -> None:
        self.hwtpm.reset()
        for m in self.boot_measurements:
            for bank in BANKS:
                self.hwtpm.pcr_extend(bank, m.index, hash_data(bank, m.data))

    def _host_extend(self, payload: ExtendPayload) -> bool:
        for bank, digest in payload.digests().items():
            self.hwtpm.pcr_extend(bank, payload.index, digest)
        return True

    def _start_host_ima(self) -> None:
        self.ima = ImaEngine(self._host_extend, appraisal_certs=(self.world.provider_cert,))
        for f in self.programs:
            if self.ima.measure_open(f) is OpenResult.DENIED:
                raise PolicyViolation(f"host appraisal rejected {f.path}")

    def run_program(self, f: SimFile) -> OpenResult:
        """Load an extra host executable; appraisal blocks unsigned code."""
        return self.ima.measure_open(f)

    def reboot(self, boot: Sequence[BootMeasurement] | None = None) -> None:
        """Re-measure the host (optionally with a different fixture).

        Emulated TPM instances are kept, which a real reboot would not do; it
        lets tests reach a host change while instances still exist.
        """
        if boot is not None:
            self.boot_measurements = tuple(boot)
        self._measure_boot()
        self.hwtpm.provision_attestation_key()
        self._start_host_ima()

    # spawn, attach and boot in one call
    def launch_vm(self, spec: "VmSpec", policy: PolicyDocument, *, boot: bool = True) -> "VmInstance":
        ticket = self.monitor.spawn_instance(policy)
        vm = self.hypervisor.launch(ticket, spec)
        if boot:
            vm.boot()
        return vm


def _violations_json(violations) -> bytes:
    return json.dumps([v.to_dict() for v in violations], sort_keys=True).encode()


class MonitoringService:
    """TEE-resident: spawns emulated TPMs, attests the host, provisions keys."""

    def __init__(self, host: HostPlatform):
        self.host = host
        self.world = host.world
        self.address = f"monitor:{host.name}"
        self._rng = host._rng.child("monitor")
        key = SigningKeyPair.generate(self._rng.child("identity"))
        self.certificate = self.world.ca.issue(self.address, key.public)
        self.instances: dict[str, SpawnedInstance] = {}
        self._by_policy: dict[str, str] = {}
        self._controls = {}
        self._lock = threading.RLock()
        self._nonces = self._rng.child("nonces")
        self.world.fabric.listen(self.address, lambda req: _MonitorSession(self), domain=NETWORK,
                                 certificate=self.certificate)

    def spawn_instance(self, policy: PolicyDocument) -> LaunchTicket:
        world, host = self.world, self.host
        with self._lock:
            if policy.policy_id in self._by_policy:
                raise Conflict(f"policy {policy.policy_id!r} already bound to an instance")
            n = len(self.instances) + 1
            iid = f"vtpm-{n}"
            self._by_policy[policy.policy_id] = iid
        try:
            client_key = SigningKeyPair.generate(self._rng.child(f"client:{iid}"))
            cert = world.ca.issue(f"emutpm:{iid}", client_key.public)
            mcs = McsClient.connect(world.fabric, f"emutpm:{iid}", host.mcs_address, certificate=cert,
                                    server_roots=(world.ca.root,))
            inst = spawn_instance(policy, mcs, fabric=world.fabric, instance_id=iid, vtpm_id=n,
                                  rng=self._rng.child(f"instance:{iid}"), sealing_key=host.tee_key,
                                  config=world.config, storage=host.storage, host_check=self.host_check,
                                  clock=world.clock)
        except BaseException:
            with self._lock:
                self._by_policy.pop(policy.policy_id, None)
            raise
        with self._lock:
            self.instances[iid] = inst
            self._controls[iid] = world.fabric.connect(ConnectRequest(self.address, f"emutpm-ctl:{iid}"))
        endpoint = inst.endpoint
        if host.router is not None:
            host.router.register(inst.tpm)
            endpoint = host.router.address
        return LaunchTicket(iid, n, endpoint, host.hwtpm.seal(inst.connection_secret))

    def instance_for(self, policy_id: str) -> SpawnedInstance:
        iid = self._by_policy.get(policy_id)
        if iid is None or iid not in self.instances:
            raise NotFound(f"no instance bound to policy {policy_id!r}")
        return self.instances[iid]

    def host_check(self, policy: PolicyDocument) -> VerificationResult:
        """Fresh hardware quote plus host IMA log against ``policy``."""
        hw = self.host.hwtpm
        with self._lock:
            nonce = self._nonces.bytes(32)
        selection = sorted({(b, i) for b, i, _ in policy.host_pcrs} | {(HashAlg.SHA1, IMA_PCR)},
                           key=lambda p: (BANKS.index(p[0]), p[1]))
        quote = hw.quote(nonce, selection)
        violations = list(evaluate_quote(policy, quote, nonce=nonce).violations)
        log = self.host.ima.log
        pcr10 = quote.value(HashAlg.SHA1, IMA_PCR)
        if not verify_log(log, pcr10):
            violations.append(Violation("HostLogMismatch", f"sha1:{IMA_PCR}", log.fold().hex(), pcr10.hex()))
        for e in log.entries:
            ok = bool(e.signature) and any(verify(c.public_key, e.file_digest.value, e.signature)
                                           for c in policy.host_signer_certs)
            if not ok:
                violations.append(Violation("UntrustedHostFile", e.path, "", e.file_digest.hex()))
        return VerificationResult(tuple(violations))

    def deploy(self, policy: PolicyDocument) -> bytes:
        inst = self.instance_for(policy.policy_id)
        if serialize_policy(policy) != serialize_policy(inst.tpm.policy):
            raise Conflict(f"policy {policy.policy_id!r} differs from the one the instance enforces")
        result = self.host_check(policy)
        if not result.conforms:
            raise PolicyViolation("host does not conform to the policy", result.violations)
        with self._lock:
            reply = self._controls[inst.instance_id].request(TpmCommand(Kind.CREATE_KEY, b"ssh").encode())
        resp = TpmResponse.decode(reply)
        if not resp.ok:
            raise TpmError(f"key creation failed: {resp.body.decode(errors='replace')}")
        return resp.body


class _MonitorSession:
    """Tenant-facing API: ``DEPLOY policy-text`` -> ``OK pubkey`` or an error."""

    def __init__(self, monitor: MonitoringService):
        self.monitor = monitor

    def handle(self, payload: bytes) -> bytes:
        try:
            op, text = decode_fields(payload, 2)
            if op != b"DEPLOY":
                raise PolicyError(f"unknown monitor request {op!r}")
            pub = self.monitor.deploy(parse_policy(text.decode()))
        except PolicyViolation as exc:
            return encode_fields(b"VIOLATION", str(exc).encode(), _violations_json(exc.violations))
        except SimulationError as exc:
            return encode_fields(b"ERROR", exc.kind.encode(), str(exc).encode())
        except ValueError as exc:
            return encode_fields(b"ERROR", b"PolicyError", str(exc).encode())
        return encode_fields(b"OK", pub)


class Hypervisor:
    def __init__(self, host: HostPlatform):
        self.host = host

    def attach(self, ticket: LaunchTicket, vm_id: str):
        """Unseal the connection secret (locality proof) and open the TPM link."""
        secret = self.host.hwtpm.unseal(ticket.sealed_secret)
        req = ConnectRequest(f"qemu:{vm_id}", ticket.endpoint, protected=self.host.config.channel_integrity,
                             psk=secret, meta={"vtpm_id": ticket.vtpm_id})
        return self.host.world.fabric.connect(req)

    def launch(self, ticket: LaunchTicket, spec: "VmSpec") -> "VmInstance":
        old = self.host.vms.get(spec.vm_id)
        if old is not None:
            old.unbind()
        link = self.attach(ticket, spec.vm_id)
        vm = VmInstance(self.host, spec, ticket, link)
        self.host.vms[spec.vm_id] = vm
        return vm


@dataclass(frozen=True)
class VmSpec:
    vm_id: str
    # the tenant's SSH public key baked into the image
    tenant_public_key: bytes
    boot_files: tuple[SimFile, ...] = ()
    kernel: bytes | None = None


class VmInstance:
    def __init__(self, host: HostPlatform, spec: VmSpec, ticket: LaunchTicket, link):
        self.host = host
        self.spec = spec
        self.vm_id = spec.vm_id
        self.ticket = ticket
        self.link = link
        self.running = True
        self.shutdown_cause: SimulationError | None = None
        self.process_table: list[str] = []
        self._lock = threading.RLock()
        self._rng = host._rng.child(f"vm:{spec.vm_id}/{ticket.instance_id}")
        self._driver = None
        self.ima = ImaEngine(self._guest_extend)
        fabric = host.world.fabric
        self.device_address = f"vtpmdev:{spec.vm_id}"
        self.ssh_address = f"ssh:{spec.vm_id}"
        fabric.listen(self.device_address, lambda req: _DeviceForwarder(self), domain=GUEST)
        fabric.listen(self.ssh_address, lambda req: _SshServer(self), domain=NETWORK)

    # -- hypervisor side ------------------------------------------------------

    def forward(self, frame: bytes) -> bytes:
        """vTPM device model: relay an allowed guest command over the link."""
        with self._lock:
            if not self.running:
                return TpmResponse.error(Status.REFUSED, "VM is shut down").encode()
            try:
                cmd = TpmCommand.decode(frame)
            except ValueError as exc:
                return TpmResponse.error(Status.ERROR, str(exc)).encode()
            if cmd.kind not in GUEST_KINDS:
                return TpmResponse.error(Status.DENIED, f"{cmd.kind.name} not available to guests").encode()
            if self.host.router is not None:
                frame = with_prefix(self.ticket.vtpm_id, frame)
            try:
                reply = self.link.request(frame)
            except SimulationError as exc:
                self.shutdown(exc)
                return TpmResponse.error(Status.REFUSED, f"vTPM link failed: {exc.kind}").encode()
            if self.link.closed:
                denied = reply[4:5] == bytes([Status.DENIED])
                self.shutdown(PolicyViolation("emulated TPM denied a measurement") if denied
                              else ChannelClosed("emulated TPM closed the session"))
            return reply

    def shutdown(self, cause: SimulationError) -> None:
        with self._lock:
            if not self.running:
                return
            self.running = False
            self.shutdown_cause = cause
            self.host.world.fabric.record("vm_shutdown", vm=self.vm_id, cause=cause.kind)
            if not self.link.closed:
                self.link.close()
            self.unbind()

    def unbind(self) -> None:
        fabric = self.host.world.fabric
        fabric.unlisten(self.device_address)
        fabric.unlisten(self.ssh_address)

    # -- guest side -----------------------------------------------------------

    @property
    def driver(self):
        if self._driver is None:
            req = ConnectRequest(f"guest:{self.vm_id}", self.device_address, protected=False)
            self._driver = self.host.world.fabric.connect(req)
        return self._driver

    def tpm_request(self, cmd: TpmCommand) -> TpmResponse:
        if not self.running:
            raise VmShutdown(f"{self.vm_id} is not running", self.shutdown_cause)
        return TpmResponse.decode(self.driver.request(cmd.encode()))

    def _guest_extend(self, payload: ExtendPayload) -> bool:
        return self.tpm_request(payload.command()).ok

    def _halt(self, why: str):
        if self.running:
            self.shutdown(PolicyViolation(why))
        return VmShutdown(f"{self.vm_id}: {why}", self.shutdown_cause)

    def open(self, f: SimFile) -> OpenResult:
        if not self.running:
            raise VmShutdown(f"{self.vm_id} is not running", self.shutdown_cause)
        result = self.ima.measure_open(f)
        if result is OpenResult.DENIED:
            raise self._halt(f"measurement of {f.path} rejected")
        if result is OpenResult.LOADED:
            self.process_table.append(f.path)
        return result

    def boot_steps(self):
        """Generator form of :meth:`boot`, one step per measured event."""
        if self.spec.kernel is not None:
            if not self._guest_extend(kernel_extend(self.spec.kernel)):
                raise self._halt("kernel measurement rejected")
            yield "kernel"
        for f in self.spec.boot_files:
            self.open(f)
            yield f.path
        return list(self.process_table)

    def boot(self) -> list[str]:
        steps = self.boot_steps()
        while True:
            try:
                next(steps)
            except StopIteration as stop:
                return stop.value


class _DeviceForwarder:
    def __init__(self, vm: VmInstance):
        self.vm = vm

    def handle(self, payload: bytes) -> bytes:
        return self.vm.forward(payload)


def _userauth_message(server_nonce: bytes, challenge: bytes) -> bytes:
    return b"ssh-userauth" + server_nonce + challenge


class _SshServer:
    """In-guest SSH server; host authentication is delegated to the vTPM."""

    def __init__(self, vm: VmInstance):
        self.vm = vm
        self._pending: tuple[bytes, bytes] | None = None

    def handle(self, payload: bytes) -> bytes:
        fields = decode_fields(payload)
        if fields[0] == b"CHAL" and len(fields) == 2:
            try:
                resp = self.vm.tpm_request(TpmCommand(Kind.SIGN_CHALLENGE, fields[1]))
            except SimulationError as exc:
                return encode_fields(b"ERR", exc.kind.encode())
            if not resp.ok:
                return encode_fields(b"ERR", resp.status.name.encode(), resp.body)
            sig, presented = resp.body[:SIGNATURE_SIZE], resp.body[SIGNATURE_SIZE:]
            server_nonce = self.vm._rng.bytes(32)
            self._pending = (fields[1], server_nonce)
            return encode_fields(b"SIG", sig, presented, server_nonce)
        if fields[0] == b"AUTH" and len(fields) == 2 and self._pending is not None:
            challenge, nonce = self._pending
            self._pending = None
            if verify(self.vm.spec.tenant_public_key, _userauth_message(nonce, challenge), fields[1]):
                return encode_fields(b"OK")
        return encode_fields(b"ERR", b"TenantAuth")


@dataclass(frozen=True)
class HandshakeResult:
    established: bool
    failure: str | None = None
    detail: str = ""

    @property
    def label(self) -> str:
        return "TrustEstablished" if self.established else f"Failure{{{self.failure}}}"


class Tenant:
    """A cloud customer. Holds its own SSH key pair, never the VM's."""

    def __init__(self, world: World, name: str):
        self.world = world
        self.name = name
        self.key = SigningKeyPair.generate(world.rng.child(f"tenant:{name}"))
        self._rng = world.rng.child(f"tenant:{name}/session")
        self.policy_id: str | None = None
        self.vm_public_key: bytes | None = None

    @property
    def address(self) -> str:
        return f"tenant:{self.name}"

    def deploy_policy(self, monitor_address: str, policy: PolicyDocument) -> bytes:
        self.world.clock.tick()
        ch = self.world.fabric.connect(ConnectRequest(self.address, monitor_address, protected=True,
                                                      server_roots=(self.world.ca.root,)))
        try:
            fields = decode_fields(ch.request(encode_fields(b"DEPLOY", serialize_policy(policy).encode())))
        finally:
            ch.close()
        if fields[0] == b"OK":
            self.policy_id = policy.policy_id
            self.vm_public_key = fields[1]
            return fields[1]
        if fields[0] == b"VIOLATION":
            violations = tuple(Violation(**v) for v in json.loads(fields[2]))
            raise PolicyViolation(fields[1].decode(), violations)
        raise _remote_error(fields[1].decode(), fields[2].decode())

    def ssh_handshake(self, vm_address: str, *, key_binding: bool | None = None) -> HandshakeResult:
        """Challenge the VM, check its signature, then authenticate ourselves.

        With ``key_binding`` the signature must verify under the key received
        at deployment. Without it (a verifier inside the guest) the key the
        server presents is trusted as is.
        """
        bind = self.world.config.key_binding if key_binding is None else key_binding
        if bind and self.vm_public_key is None:
            raise NotProvisioned(f"{self.name} has no deployed VM key")
        self.world.clock.tick()
        ch = self.world.fabric.connect(ConnectRequest(self.address, vm_address, protected=True))
        try:
            challenge = self._rng.bytes(32)
            fields = decode_fields(ch.request(encode_fields(b"CHAL", challenge)))
            if fields[0] != b"SIG":
                return HandshakeResult(False, "IntegrityViolation", fields[1].decode())
            sig, presented, server_nonce = fields[1], fields[2], fields[3]
            expected = self.vm_public_key if bind else presented
            if not verify(expected, challenge, sig):
                return HandshakeResult(False, "VmIdentityMismatch")
            fields = decode_fields(ch.request(encode_fields(b"AUTH", self.key.sign(
                _userauth_message(server_nonce, challenge)))))
            if fields[0] != b"OK":
                return HandshakeResult(False, "TenantAuth")
            return HandshakeResult(True, detail=presented.hex())
        finally:
            ch.close()


def _remote_error(kind: str, message: str) -> SimulationError:
    from . import errors

    cls = getattr(errors, kind, None)
    if isinstance(cls, type) and issubclass(cls, SimulationError) and cls not in (PolicyViolation, VmShutdown):
        return cls(message)
    return SimulationError(f"{kind}: {message}")
