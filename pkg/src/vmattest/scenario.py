"""Scenario scripts: loading, validation and execution.

A scenario is a JSON document::

    {
      "name": "attack_c_defended",
      "disable": [],                     # defenses switched off (CLI names)
      "routing": "per-instance",         # or "legacy-prefix"
      "files":   {"<ref>": {"path": "...", "content": "...", "signed_by": "<signer>"?}},
      "tenants": {"<name>": {"whitelist": ["<ref>", ...], "signers": [...],
                             "permissive": false}},
      "vms":     {"<vm>": {"tenant": "<name>", "boot": ["<ref>", ...], "kernel": "..."?}},
      "steps":   [{"op": "bootstrap"}, {"op": "spawn", "vm": "alice"}, ...]
    }

Step ops: bootstrap, spawn, attack, connect, deploy, boot, open, handshake,
snapshot, restart_tpm, assert. Any step may carry ``"allow_error": true``.
A domain error in any other step halts the flow with outcome
``detected:<ErrorKind>``. A handshake yields ``trust_established``,
``handshake_failure:<Reason>`` or, if the VM ran a file its tenant's policy
denies, ``undetected``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable

from .config import DEFENSES, ROUTING_MODES, Config
from .errors import SimulationError
from .hwtpm import HardwareTpm
from .ima import ImaLogEntry, SimFile
from .netsim import CuckooRedirect, ProxyIntercept, ReplaceVtpmId
from .platform import BootMeasurement, DEFAULT_HOST_BOOT, HostPlatform, LaunchTicket, VmSpec, World
from .policy import Decision, PolicyDocument, evaluate_measurement
from .wire import ExtendPayload, Kind

OPS = ("bootstrap", "spawn", "attack", "connect", "deploy", "boot", "open", "handshake",
       "snapshot", "restart_tpm", "assert")
ATTACKS = ("replace-vtpm-id", "proxy", "cuckoo", "redirect-ssh")
MATRIX = (
    "benign",
    "attack_a_defended",
    "attack_a_ablated",
    "attack_b_defended",
    "attack_b_ablated",
    "attack_c_defended",
    "attack_c_ablated",
)


class ScenarioError(ValueError):
    """The scenario document is malformed."""


@dataclass
class Scenario:
    name: str
    description: str
    disable: tuple[str, ...]
    routing: str
    staleness_window: int
    files: dict[str, dict]
    tenants: dict[str, dict]
    vms: dict[str, dict]
    steps: list[dict]
    host_boot: tuple[BootMeasurement, ...] | None = None

    def config(self, extra_disable: Iterable[str] = ()) -> Config:
        base = Config(routing=self.routing, staleness_window=self.staleness_window)
        return base.without(tuple(self.disable) + tuple(extra_disable))


def _require(cond: bool, msg: str) -> None:
    if not cond:
        raise ScenarioError(msg)


def parse_scenario(text: str) -> Scenario:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ScenarioError(f"not JSON: {exc}") from None
    _require(isinstance(doc, dict), "scenario must be a JSON object")
    known = {"name", "description", "disable", "routing", "staleness_window", "files", "tenants", "vms",
             "steps", "host_boot"}
    unknown = set(doc) - known
    _require(not unknown, f"unknown keys: {sorted(unknown)}")
    _require(isinstance(doc.get("name"), str) and doc["name"], "name is required")
    disable = tuple(doc.get("disable", ()))
    for d in disable:
        _require(d in DEFENSES, f"unknown defense {d!r}")
    routing = doc.get("routing", "per-instance")
    _require(routing in ROUTING_MODES, f"unknown routing {routing!r}")
    files = doc.get("files", {})
    tenants = doc.get("tenants", {})
    vms = doc.get("vms", {})
    steps = doc.get("steps")
    _require(all(isinstance(x, dict) for x in (files, tenants, vms)), "files/tenants/vms must be objects")
    for ref, f in files.items():
        _require(isinstance(f, dict) and isinstance(f.get("path"), str) and isinstance(f.get("content"), str),
                 f"file {ref!r} needs path and content")
    for name, t in tenants.items():
        for ref in t.get("whitelist", ()):
            _require(ref in files, f"tenant {name!r} whitelists unknown file {ref!r}")
    for vm, v in vms.items():
        _require(v.get("tenant") in tenants, f"vm {vm!r} has unknown tenant")
        for ref in v.get("boot", ()):
            _require(ref in files, f"vm {vm!r} boots unknown file {ref!r}")
    _require(isinstance(steps, list) and steps, "steps must be a non-empty list")
    _require(any(s.get("op") == "assert" for s in steps if isinstance(s, dict)), "scenario needs an assert step")
    for i, s in enumerate(steps):
        _require(isinstance(s, dict) and s.get("op") in OPS, f"step {i}: unknown op {s!r}")
        if s["op"] in ("spawn", "connect", "boot", "open", "snapshot", "restart_tpm", "handshake", "attack"):
            _require(s.get("vm") in vms, f"step {i}: unknown vm {s.get('vm')!r}")
        if s["op"] in ("deploy", "handshake"):
            who = s.get("tenant", vms.get(s.get("vm"), {}).get("tenant"))
            _require(who in tenants, f"step {i}: unknown tenant {who!r}")
        if s["op"] == "open":
            _require(s.get("file") in files, f"step {i}: unknown file {s.get('file')!r}")
        if s["op"] == "attack":
            _require(s.get("type") in ATTACKS, f"step {i}: unknown attack {s.get('type')!r}")
        if s["op"] == "assert":
            _require(isinstance(s.get("outcome"), str), f"step {i}: assert needs an outcome")
    host_boot = None
    if "host_boot" in doc:
        host_boot = tuple(BootMeasurement(int(m["index"]), m["data"].encode()) for m in doc["host_boot"])
    return Scenario(doc["name"], doc.get("description", ""), disable, routing,
                    int(doc.get("staleness_window", 0)), files, tenants, vms, steps, host_boot)


def load_scenario(path: str | Path) -> Scenario:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ScenarioError(f"cannot read {path}: {exc}") from None
    return parse_scenario(text)


def builtin(name: str) -> Scenario:
    ref = resources.files("vmattest") / "scenarios" / f"{name}.scenario"
    return parse_scenario(ref.read_text(encoding="utf-8"))


def builtin_names() -> list[str]:
    root = resources.files("vmattest") / "scenarios"
    return sorted(p.name[: -len(".scenario")] for p in root.iterdir() if p.name.endswith(".scenario"))


@dataclass
class ScenarioReport:
    name: str
    seed: int
    passed: bool
    outcome: str
    expected: list[str]
    steps: list[tuple[str, str]]
    disabled: list[str]
    invariant_breach: str | None = None
    transcript_path: str | None = None
    world: object = field(default=None, repr=False, compare=False)

    @property
    def verdict(self) -> str:
        return "Pass" if self.passed else "Fail"

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "seed": self.seed,
            "verdict": self.verdict,
            "outcome": self.outcome,
            "expected": self.expected,
            "disabled": self.disabled,
            "invariant_breach": self.invariant_breach,
            "steps": [{"step": s, "result": r} for s, r in self.steps],
            "transcript": self.transcript_path,
        }


class InvariantBreach(Exception):
    pass


class _Run:
    def __init__(self, sc: Scenario, seed: int, config: Config):
        self.sc = sc
        self.config = config
        self.world = World(seed, config)
        self.host: HostPlatform | None = None
        self.tickets: dict[str, LaunchTicket] = {}
        self.vms = {}
        self.snapshots: dict[str, bytes] = {}
        self.tainted: set[str] = set()
        self.outcome = "incomplete"
        self._files: dict[str, SimFile] = {}
        self._policies: dict[str, PolicyDocument] = {}

    # -- fixtures -------------------------------------------------------------

    def file(self, ref: str) -> SimFile:
        if ref not in self._files:
            spec = self.sc.files[ref]
            f = SimFile(spec["path"], spec["content"].encode())
            if spec.get("signed_by"):
                f = f.signed(self.world.signer(spec["signed_by"])[0])
            self._files[ref] = f
        return self._files[ref]

    def policy(self, tenant: str) -> PolicyDocument:
        if tenant not in self._policies:
            t = self.sc.tenants[tenant]
            refs = list(self.sc.files) if t.get("permissive") else t.get("whitelist", [])
            kernel = next((v.get("kernel") for v in self.sc.vms.values()
                           if v["tenant"] == tenant and v.get("kernel")), None)
            self._policies[tenant] = self.world.make_policy(
                t.get("policy_id", f"{tenant}-policy"),
                files=[self.file(r) for r in refs],
                signers=t.get("signers", ()),
                kernel=kernel.encode() if kernel and t.get("pin_kernel", True) else None,
                host_boot=self.sc.host_boot or DEFAULT_HOST_BOOT,
            )
        return self._policies[tenant]

    def vm_spec(self, vm: str) -> VmSpec:
        v = self.sc.vms[vm]
        kernel = v.get("kernel")
        return VmSpec(vm, self.world.tenant(v["tenant"]).key.public,
                      tuple(self.file(r) for r in v.get("boot", ())),
                      kernel.encode() if kernel else None)

    def _taint_check(self, vm: str, f: SimFile) -> None:
        if evaluate_measurement(self.policy(self.sc.vms[vm]["tenant"]), ImaLogEntry.from_file(f)) is Decision.DENY:
            self.tainted.add(vm)

    # -- steps ----------------------------------------------------------------

    def step(self, s: dict) -> str:
        op = s["op"]
        w = self.world
        if op == "bootstrap":
            boot = list(self.sc.host_boot or DEFAULT_HOST_BOOT)
            if "tamper" in s:
                boot.append(BootMeasurement(int(s["tamper"]["index"]), s["tamper"]["data"].encode()))
            self.host = w.bootstrap_host("host-1", boot)
            return "host bootstrapped"
        host = self.host
        if host is None:
            raise ScenarioError("bootstrap must come first")
        vm = s.get("vm")
        if op == "spawn":
            t = self.tickets[vm] = host.monitor.spawn_instance(self.policy(self.sc.vms[vm]["tenant"]))
            return f"instance {t.instance_id} (vtpm id {t.vtpm_id})"
        if op == "attack":
            return self._attack(s)
        if op == "connect":
            self.vms[vm] = host.hypervisor.launch(self.tickets[vm], self.vm_spec(vm))
            return f"{vm} attached"
        if op == "deploy":
            tenant = s["tenant"]
            pub = w.tenant(tenant).deploy_policy(host.monitor.address, self.policy(tenant))
            return f"vm key {pub.hex()[:16]}"
        if op == "boot":
            for f in self.vms[vm].spec.boot_files:
                self._taint_check(vm, f)
            loaded = self.vms[vm].boot()
            return f"{len(loaded)} files loaded"
        if op == "open":
            f = self.file(s["file"])
            self._taint_check(vm, f)
            return self.vms[vm].open(f).value
        if op == "handshake":
            tenant = s.get("tenant", self.sc.vms[vm]["tenant"])
            result = w.tenant(tenant).ssh_handshake(f"ssh:{vm}")
            if result.established:
                self.outcome = "undetected" if vm in self.tainted else "trust_established"
            else:
                self.outcome = f"handshake_failure:{result.failure}"
            return result.label
        if op == "snapshot":
            self.snapshots[vm] = host.storage[self.tickets[vm].instance_id]
            return "state blob copied"
        if op == "restart_tpm":
            inst = host.monitor.instances[self.tickets[vm].instance_id]
            inst.tpm.load_state(self.snapshots[vm])
            return "instance restarted from snapshot"
        raise ScenarioError(f"unhandled op {op}")  # pragma: no cover

    def _attack(self, s: dict) -> str:
        kind, vm, target = s["type"], s["vm"], s.get("target")
        fabric, host = self.world.fabric, self.host
        if kind == "replace-vtpm-id":
            fabric.attach(ReplaceVtpmId(self.tickets[target].vtpm_id), src=f"qemu:{vm}")
        elif kind == "cuckoo":
            fabric.attach(CuckooRedirect(f"vtpmdev:{target}"), src=f"guest:{vm}")
        elif kind == "redirect-ssh":
            tenant = self.sc.vms[vm]["tenant"]
            fabric.attach(CuckooRedirect(f"ssh:{target}"), src=f"tenant:{tenant}", dst=f"ssh:{vm}")
        elif kind == "proxy":
            proxy_bin = SimFile("/usr/local/bin/vtpm-proxy", b"adversary proxy")
            fabric.record("proxy_load", host=host.name, result=host.run_program(proxy_bin).value)
            drops = {self.file(r).digest.value for r in s.get("drop", ())}

            def drop(cmd) -> bool:
                return cmd.kind is Kind.EXTEND and ExtendPayload.decode(cmd.body).sha256 in drops

            remote = HardwareTpm("attacker-box", self.world.manufacturer, self.world.rng.child("attacker-box"))
            ticket = self.tickets[vm]
            fabric.attach(ProxyIntercept(stolen_blob=ticket.sealed_secret, own_tpm=remote,
                                         rng=self.world.rng.child("proxy"), drop=drop),
                          src=f"qemu:{vm}", dst=ticket.endpoint)
        return f"{kind} hook installed"

    # -- invariants -----------------------------------------------------------

    def check_invariants(self) -> None:
        for name, vm in self.vms.items():
            loaded = {e.path for e in vm.ima.log.entries}
            stray = [p for p in vm.process_table if p not in loaded]
            if stray:
                raise InvariantBreach(f"{name}: process_table holds unmeasured {stray}")
        if self.host is not None:
            for iid, inst in self.host.monitor.instances.items():
                if self.host.mcs.hwtpm.nv_read(inst.tpm.state.mc_counter_id) < inst.tpm.executed_non_idempotent:
                    raise InvariantBreach(f"{iid}: counter below executed non-idempotent commands")
        if not self.config.disabled() and self.outcome == "undetected":
            raise InvariantBreach("trust established for a VM that ran a denied file with every defense on")

    def check_key_confinement(self) -> None:
        if self.host is None:
            return
        secrets = [k for inst in self.host.monitor.instances.values() for k in inst.tpm.private_key_material()]
        for payload in self.world.fabric.wire_bytes():
            if any(k in payload for k in secrets):
                raise InvariantBreach("a private key appeared on a channel")


def run_scenario(sc: Scenario, *, seed: int = 0, extra_disable: Iterable[str] = (),
                 out_dir: str | Path | None = None) -> ScenarioReport:
    config = sc.config(extra_disable)
    run = _Run(sc, seed, config)
    steps: list[tuple[str, str]] = []
    expected: list[str] = []
    passed = True
    breach = None
    halted = False
    for i, s in enumerate(sc.steps):
        label = f"{i}:{s['op']}" + (f":{s['vm']}" if "vm" in s else "") + (f":{s['type']}" if "type" in s else "")
        if s["op"] == "assert":
            expected.append(s["outcome"])
            ok = run.outcome == s["outcome"]
            passed &= ok
            steps.append((label, f"{'held' if ok else 'FAILED'}: outcome {run.outcome}, expected {s['outcome']}"))
            continue
        if halted:
            steps.append((label, "skipped"))
            continue
        try:
            steps.append((label, run.step(s)))
        except SimulationError as exc:
            steps.append((label, f"error:{exc.kind}: {exc}"))
            if not s.get("allow_error"):
                run.outcome = f"detected:{exc.kind}"
                halted = True
        try:
            run.check_invariants()
        except InvariantBreach as exc:
            breach = f"{label}: {exc}"
            break
    if breach is None:
        try:
            run.check_key_confinement()
        except InvariantBreach as exc:
            breach = f"end: {exc}"
    report = ScenarioReport(sc.name, seed, passed and breach is None, run.outcome, expected, steps,
                            config.disabled(), breach, world=run.world)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        tpath = out / f"{sc.name}.transcript.jsonl"
        run.world.fabric.export_transcript(tpath)
        report.transcript_path = str(tpath)
        (out / f"{sc.name}.report.json").write_text(json.dumps(report.to_dict(), indent=2) + "\n", encoding="utf-8")
    return report


def run_matrix(*, seed: int = 0, extra_disable: Iterable[str] = (), out_dir=None) -> list[ScenarioReport]:
    return [run_scenario(builtin(n), seed=seed, extra_disable=extra_disable, out_dir=out_dir) for n in MATRIX]


def format_table(reports: list[ScenarioReport]) -> str:
    rows = [("scenario", "outcome", "expected", "verdict")]
    rows += [(r.name, r.outcome, ",".join(r.expected), r.verdict) for r in reports]
    widths = [max(len(row[c]) for row in rows) for c in range(4)]
    lines = ["  ".join(cell.ljust(widths[c]) for c, cell in enumerate(row)).rstrip() for row in rows]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines)
