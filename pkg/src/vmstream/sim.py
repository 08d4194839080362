"""Scenario-driven cluster simulation and the boot-vs-clone comparison.

A scenario is a TOML document: hosts, VM templates and a timed script of
commands.  ``run`` replays it on a fresh ``Cloud`` and returns ``Metrics``;
identical (scenario, seed) pairs serialize to identical bytes.

Script commands::

    boot     template, host, [vm], [ops]
    image    vm, name
    clone    image, count, host | hosts, [ops]
    migrate  vm, to, mode, [max_rounds], [stop_threshold_pages]
    destroy  vm
    run_for  duration_s
"""

from __future__ import annotations

import hashlib
import json
import math
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

from .cloud import Cloud, CloudConfig, DEFAULT_BOOT_DURATION_S
from .errors import InvalidConfig, PlacementError, StreamUnavailable, VmsError
from .footprint import EvictionPolicy, account
from .guest import GuestVm, WorkloadSpec, page_content
from .host import GIB, HostSpec
from .migration import MigrationParams, start_migration
from .pages import PAGE_SIZE, ZERO

FORMAT_VERSION = 1
COMMANDS = ("boot", "image", "clone", "migrate", "destroy", "run_for")


@dataclass(frozen=True)
class TemplateSpec:
    name: str
    page_count: int
    disk_size_bytes: int = 0
    workload: WorkloadSpec = field(default_factory=WorkloadSpec)
    clone_workload: WorkloadSpec | None = None
    boot_ops: int | None = None
    clone_ops: int | None = None
    touch_fraction: float = 0.25
    vcpu_bytes: int = 16384
    fill_fraction: float = 0.0  # pages made resident at placement, no ops needed
    fill_pool: int = 1024

    def __post_init__(self) -> None:
        if self.page_count <= 0:
            raise InvalidConfig(f"template {self.name}: page_count must be positive")
        if self.disk_size_bytes < 0 or self.vcpu_bytes < 0:
            raise InvalidConfig(f"template {self.name}: sizes must be >= 0")
        if not 0.0 <= self.touch_fraction <= 1.0 or not 0.0 <= self.fill_fraction <= 1.0:
            raise InvalidConfig(f"template {self.name}: fractions must be in [0, 1]")
        if self.fill_pool <= 0:
            raise InvalidConfig(f"template {self.name}: fill_pool must be positive")
        for ops in (self.boot_ops, self.clone_ops):
            if ops is not None and ops < 0:
                raise InvalidConfig(f"template {self.name}: op counts must be >= 0")
        self.workload.validate_for(self.page_count)
        if self.clone_workload is not None:
            self.clone_workload.validate_for(self.page_count)


@dataclass(frozen=True)
class Command:
    at_us: int
    kind: str
    args: Mapping[str, Any] = field(default_factory=dict)


@dataclass(frozen=True)
class Scenario:
    name: str
    hosts: tuple[HostSpec, ...]
    templates: Mapping[str, TemplateSpec]
    script: tuple[Command, ...]
    seed: int = 0
    boot_duration_s: float = DEFAULT_BOOT_DURATION_S
    link_latency_us: int = 500
    ready_ops: int = 100
    prefetch_window: int = 8
    clone_setup_us: int = 50_000
    background_budget_bps: float = 0.0
    policy: EvictionPolicy = field(default_factory=EvictionPolicy)
    end_us: int | None = None

    def __post_init__(self) -> None:
        validate(self)

    def cloud_config(self, verify_wire: bool = False) -> CloudConfig:
        return CloudConfig(
            link_latency_us=self.link_latency_us,
            prefetch_window=self.prefetch_window,
            clone_setup_us=self.clone_setup_us,
            ready_ops=self.ready_ops,
            boot_duration_s=self.boot_duration_s,
            background_budget_bps=self.background_budget_bps,
            policy=self.policy,
            verify_wire=verify_wire,
        )


def validate(sc: Scenario) -> None:
    if not sc.hosts:
        raise InvalidConfig("scenario needs at least one host")
    ids = [h.host_id for h in sc.hosts]
    if len(set(ids)) != len(ids):
        raise InvalidConfig("duplicate host ids")
    last = 0
    vm_tpl: dict[str, TemplateSpec | None] = {}
    image_tpl: dict[str, TemplateSpec | None] = {}
    open_ended = False
    for cmd in sc.script:
        if cmd.kind not in COMMANDS:
            raise InvalidConfig(f"unknown command {cmd.kind!r}")
        if cmd.at_us < last:
            raise InvalidConfig("script times must be non-decreasing")
        last = cmd.at_us
        a = cmd.args
        for key in ("host", "to"):
            if key in a and a[key] not in ids:
                raise InvalidConfig(f"unknown host {a[key]!r}")
        for h in a.get("hosts", ()):
            if h not in ids:
                raise InvalidConfig(f"unknown host {h!r}")
        if cmd.kind == "boot":
            tpl = sc.templates.get(a.get("template"))
            if tpl is None:
                raise InvalidConfig(f"unknown template {a.get('template')!r}")
            if "host" not in a:
                raise InvalidConfig("boot needs a host")
            if a.get("ops", tpl.boot_ops) is None:
                open_ended = True
            if "vm" in a:
                vm_tpl[a["vm"]] = tpl
        elif cmd.kind == "image":
            if "vm" not in a:
                raise InvalidConfig("image needs a vm")
            image_tpl[a.get("name", a["vm"])] = vm_tpl.get(a["vm"])
        elif cmd.kind == "clone":
            if a.get("image") not in image_tpl:
                raise InvalidConfig(f"clone of unknown image {a.get('image')!r}")
            if int(a.get("count", 1)) < 0:
                raise InvalidConfig("clone count must be >= 0")
            if "host" not in a and not a.get("hosts"):
                raise InvalidConfig("clone needs host or hosts")
            tpl = image_tpl[a["image"]]
            if a.get("ops", tpl.clone_ops if tpl else None) is None:
                open_ended = True
        elif cmd.kind == "migrate":
            if "vm" not in a or "to" not in a:
                raise InvalidConfig("migrate needs vm and to")
            MigrationParams(mode=a.get("mode", "precopy"))
        elif cmd.kind == "run_for" and float(a.get("duration_s", -1)) < 0:
            raise InvalidConfig("run_for needs duration_s >= 0")
    has_horizon = sc.end_us is not None or any(c.kind == "run_for" for c in sc.script)
    if open_ended and not has_horizon:
        raise InvalidConfig("workloads without op limits need end_s or a run_for command")


# -- parsing ----------------------------------------------------------------


def _workload(d: Mapping[str, Any] | None) -> WorkloadSpec | None:
    if d is None:
        return None
    d = dict(d)
    if "phases" in d:
        d["phases"] = tuple(tuple(p) for p in d["phases"])
    try:
        return WorkloadSpec(**d)
    except TypeError as exc:
        raise InvalidConfig(f"bad workload: {exc}") from None


def _host(d: Mapping[str, Any]) -> HostSpec:
    ram = d.get("ram_bytes")
    if ram is None:
        ram = int(float(d.get("ram_gib", 16)) * GIB)
    return HostSpec(
        host_id=str(d["id"]),
        ram_capacity_bytes=int(ram),
        nic_bandwidth_bits_per_s=float(d.get("nic_gbps", 10)) * 1e9,
        cache_fraction=float(d.get("cache_fraction", 0.10)),
        cores=int(d.get("cores", 8)),
    )


def scenario_from_dict(doc: Mapping[str, Any], name: str = "scenario") -> Scenario:
    try:
        version = doc.get("format_version", FORMAT_VERSION)
        if version != FORMAT_VERSION:
            raise InvalidConfig(f"unsupported format_version {version}")
        hosts_doc = doc.get("hosts")
        if hosts_doc is None:
            hosts_doc = [{"id": f"h{i}"} for i in range(int(doc.get("host_count", 4)))]
        hosts = tuple(_host(h) for h in hosts_doc)
        templates = {}
        for tname, t in doc.get("templates", {}).items():
            t = dict(t)
            templates[tname] = TemplateSpec(
                name=tname,
                page_count=int(t.pop("page_count")),
                disk_size_bytes=int(t.pop("disk_size_bytes", 0)),
                workload=_workload(t.pop("workload", None)) or WorkloadSpec(),
                clone_workload=_workload(t.pop("clone_workload", None)),
                boot_ops=t.pop("boot_ops", None),
                clone_ops=t.pop("clone_ops", None),
                touch_fraction=float(t.pop("touch_fraction", 0.25)),
                vcpu_bytes=int(t.pop("vcpu_bytes", 16384)),
                fill_fraction=float(t.pop("fill_fraction", 0.0)),
                fill_pool=int(t.pop("fill_pool", 1024)),
            )
            if t:
                raise InvalidConfig(f"template {tname}: unknown keys {sorted(t)}")
        script = []
        for entry in doc.get("script", []):
            entry = dict(entry)
            at = int(round(float(entry.pop("at_s", 0)) * 1_000_000))
            kind = entry.pop("cmd")
            script.append(Command(at, kind, entry))
        pol = doc.get("policy", {})
        policy = EvictionPolicy(**pol) if pol else EvictionPolicy()
        end_s = doc.get("end_s")
        return Scenario(
            name=str(doc.get("name", name)),
            hosts=hosts,
            templates=templates,
            script=tuple(script),
            seed=int(doc.get("seed", 0)),
            boot_duration_s=float(doc.get("boot_duration_s", DEFAULT_BOOT_DURATION_S)),
            link_latency_us=int(doc.get("link_latency_us", 500)),
            ready_ops=int(doc.get("ready_ops", 100)),
            prefetch_window=int(doc.get("prefetch_window", 8)),
            clone_setup_us=int(doc.get("clone_setup_us", 50_000)),
            background_budget_bps=float(doc.get("background_budget_bps", 0.0)),
            policy=policy,
            end_us=None if end_s is None else int(round(float(end_s) * 1_000_000)),
        )
    except InvalidConfig:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise InvalidConfig(f"invalid scenario: {type(exc).__name__}: {exc}") from None


def load_scenario(path: str | os.PathLike) -> Scenario:
    try:
        with open(path, "rb") as f:
            doc = tomllib.load(f)
    except OSError as exc:
        raise InvalidConfig(f"cannot read scenario {path}: {exc.strerror}") from None
    except tomllib.TOMLDecodeError as exc:
        raise InvalidConfig(f"{path}: {exc}") from None
    return scenario_from_dict(doc, Path(path).stem)


# -- running ------------------------------------------------------------------


def derive_seed(seed: int, label: str) -> int:
    h = hashlib.blake2b(f"{seed}:{label}".encode(), digest_size=8).digest()
    return int.from_bytes(h, "little")


def prefill(vm: GuestVm, fraction: float, pool: int, seed: int) -> int:
    """Make the first ``fraction`` of pages resident with pooled content."""
    n = int(vm.space.page_count * fraction)
    contents = [page_content(seed, i) for i in range(min(pool, n))]
    for p in range(n):
        vm.space.write(p, contents[p % pool])
    return n


@dataclass
class Metrics:
    """Everything a run measured; ``write`` produces the report directory."""

    scenario: str
    seed: int
    end_us: int
    records: list[tuple[int, str, str, Any]]
    vms: dict[str, dict[str, Any]]
    wire_by_purpose: dict[str, int]
    wire_total: int
    content_bytes_by_purpose: dict[str, int]
    templates: dict[str, dict[str, int]]
    max_resident_vms: int
    rejected: int
    migrations: list[dict[str, Any]]
    hosts: dict[str, dict[str, Any]]

    def startup(self, kind: str) -> list[int]:
        return [v["startup_latency_us"] for _, v in sorted(self.vms.items())
                if v["kind"] == kind and v["startup_latency_us"] is not None]

    def mean_startup_us(self, kind: str) -> float:
        xs = self.startup(kind)
        return sum(xs) / len(xs) if xs else math.nan

    def wire_per_vm(self, kind: str) -> float:
        xs = [v["wire_bytes"] for v in self.vms.values() if v["kind"] == kind]
        return sum(xs) / len(xs) if xs else math.nan

    def summary(self) -> dict[str, Any]:
        return {
            "format_version": FORMAT_VERSION,
            "scenario": self.scenario,
            "seed": self.seed,
            "end_us": self.end_us,
            "templates": self.templates,
            "vms": self.vms,
            "wire_bytes": {"total": self.wire_total, "by_purpose": self.wire_by_purpose},
            "content_bytes": self.content_bytes_by_purpose,
            "max_resident_vms": self.max_resident_vms,
            "rejected": self.rejected,
            "migrations": self.migrations,
            "hosts": self.hosts,
            "mean_startup_us": {k: _num(self.mean_startup_us(k)) for k in ("boot", "clone")},
        }

    def metrics_lines(self) -> list[str]:
        rows = [{"time_us": 0, "kind": "format_version", "subject": "metrics", "value": FORMAT_VERSION}]
        for t, kind, subject, value in sorted(self.records, key=lambda r: r[0]):
            rows.append({"time_us": t, "kind": kind, "subject": subject, "value": value})
        return [json.dumps(r, sort_keys=True) for r in rows]

    def write(self, out_dir: str | os.PathLike) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        _atomic_write(out / "metrics.jsonl", "\n".join(self.metrics_lines()) + "\n")
        _atomic_write(out / "summary.json", json.dumps(self.summary(), sort_keys=True, indent=2) + "\n")

    @classmethod
    def from_summary(cls, doc: Mapping[str, Any]) -> "Metrics":
        if doc.get("format_version") != FORMAT_VERSION:
            raise InvalidConfig(f"unsupported summary format_version {doc.get('format_version')}")
        return cls(
            scenario=doc["scenario"], seed=doc["seed"], end_us=doc["end_us"], records=[],
            vms=doc["vms"], wire_by_purpose=doc["wire_bytes"]["by_purpose"],
            wire_total=doc["wire_bytes"]["total"], content_bytes_by_purpose=doc["content_bytes"],
            templates=doc["templates"], max_resident_vms=doc["max_resident_vms"],
            rejected=doc["rejected"], migrations=doc["migrations"], hosts=doc["hosts"],
        )


def _num(x: float) -> float | None:
    return None if math.isnan(x) else x


def _atomic_write(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, path)


def load_metrics(report_dir: str | os.PathLike) -> Metrics:
    path = Path(report_dir) / "summary.json"
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise InvalidConfig(f"cannot read {path}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise InvalidConfig(f"{path}: {exc}") from None
    return Metrics.from_summary(doc)


class _Run:
    def __init__(self, sc: Scenario, seed: int, verify_wire: bool) -> None:
        self.sc = sc
        self.seed = seed
        self.cloud = Cloud(list(sc.hosts), sc.cloud_config(verify_wire))
        self.images: dict[str, str] = {}
        self.template_of: dict[str, str] = {}
        self.kind_of: dict[str, str] = {}
        self.rejected = 0
        self.max_vms = 0
        self.migrations: list[dict[str, Any]] = []
        self._rr = 0

    def _note_placement(self) -> None:
        self.max_vms = max(self.max_vms, len(self.cloud.vms))
        for h in self.cloud.hosts.values():
            self.cloud.record("resident_vms", h.host_id, len(h.vms))

    def dispatch(self, cmd: Command) -> None:
        c, a = self.cloud, cmd.args
        try:
            getattr(self, "_cmd_" + cmd.kind)(a)
        except PlacementError as exc:
            self.rejected += 1
            c.record("placement_rejected", str(a.get("vm", a.get("image", "?"))), str(exc))
        except VmsError as exc:
            c.record("command_failed", cmd.kind, f"{exc.code}: {exc}")

    def _cmd_boot(self, a) -> None:
        tpl = self.sc.templates[a["template"]]
        vm_id = a.get("vm") or self.cloud.next_vm_id(tpl.name)
        wl = tpl.clone_workload if a.get("workload") == "clone" and tpl.clone_workload else tpl.workload
        wl = wl.with_seed(derive_seed(self.seed, vm_id) if wl.seed == 0 else wl.seed)
        vm = self.cloud.boot_vm(a["host"], tpl.page_count, wl, vm_id=vm_id,
                                disk_bytes=tpl.disk_size_bytes, vcpu_bytes=tpl.vcpu_bytes,
                                op_limit=a.get("ops", tpl.boot_ops))
        if tpl.fill_fraction:
            prefill(vm, tpl.fill_fraction, tpl.fill_pool, derive_seed(self.seed, vm_id + ":fill"))
        self.template_of[vm.vm_id] = tpl.name
        self.kind_of[vm.vm_id] = "boot"
        self._note_placement()

    def _cmd_image(self, a) -> None:
        manifest = self.cloud.create_image(a["vm"])
        name = a.get("name", a["vm"])
        self.images[name] = manifest.image_id
        self.template_of["image:" + name] = self.template_of.get(a["vm"], "")

    def _cmd_clone(self, a) -> None:
        name = a["image"]
        image_id = self.images.get(name)
        if image_id is None:
            raise InvalidConfig(f"image {name!r} was never created")
        tpl = self.sc.templates.get(self.template_of.get("image:" + name, ""))
        hosts = list(a.get("hosts", [a.get("host")]))
        ops = a.get("ops", tpl.clone_ops if tpl else None)
        wl = tpl.clone_workload if tpl and tpl.clone_workload else (tpl.workload if tpl else None)
        for i in range(int(a.get("count", 1))):
            host = hosts[self._rr % len(hosts)]
            self._rr += 1
            try:
                hostname = f"{name}-c{self._rr}"
                vm = self.cloud.start_clone(image_id, host, {"hostname": hostname},
                                            vm_id=None if hostname in self.cloud.vms else hostname,
                                            workload=wl, run=True, op_limit=ops)
            except PlacementError as exc:
                self.rejected += 1
                self.cloud.record("placement_rejected", host, str(exc))
                continue
            self.template_of[vm.vm_id] = tpl.name if tpl else ""
            self.kind_of[vm.vm_id] = "clone"
            self._note_placement()

    def _cmd_migrate(self, a) -> None:
        c = self.cloud
        params = MigrationParams(mode=a.get("mode", "precopy"),
                                 max_rounds=int(a.get("max_rounds", 8)),
                                 stop_threshold_pages=float(a.get("stop_threshold_pages", 64)))

        def done(m) -> None:
            if m.report is not None:
                r = m.report
                row = {"vm": r.vm_id, "mode": r.mode, "rounds": r.rounds,
                       "bytes_transferred": r.bytes_transferred, "downtime_us": r.downtime_us,
                       "total_us": r.total_us}
                c.record("migration_downtime_us", r.vm_id, r.downtime_us)
            else:
                row = {"vm": m.vm.vm_id, "mode": params.mode, "error": f"{m.error.code}: {m.error}"}
            self.migrations.append(row)

        start_migration(c, c.vm(a["vm"]), a["to"], params, on_done=done)

    def _cmd_destroy(self, a) -> None:
        self.cloud.destroy(a["vm"])

    def _cmd_run_for(self, a) -> None:
        pass

    def execute(self) -> Metrics:
        c, sc = self.cloud, self.sc
        end = sc.end_us
        for cmd in sc.script:
            if cmd.kind == "run_for":
                t = cmd.at_us + int(round(float(cmd.args["duration_s"]) * 1_000_000))
                end = t if end is None else max(end, t)
            c.loop.schedule(cmd.at_us, self.dispatch, cmd)
        c.start_enforcer()
        c.run(end)
        return self.metrics(c.loop.now)

    def metrics(self, end_us: int) -> Metrics:
        c = self.cloud
        startup = {s: v for _, k, s, v in c.records if k == "startup_latency_us"}
        vms: dict[str, dict[str, Any]] = {}
        for vm_id in sorted(self.kind_of):
            runner = c.runners.get(vm_id)
            row: dict[str, Any] = {
                "kind": self.kind_of[vm_id],
                "template": self.template_of.get(vm_id, ""),
                "startup_latency_us": startup.get(vm_id),
                "wire_bytes": c.meter.by_vm.get(vm_id, 0),
                "content_bytes": c.meter.content_pages_by_vm.get(vm_id, 0) * PAGE_SIZE,
                "ops": runner.executed if runner else 0,
                "faults": runner.faults if runner else 0,
                "state": runner.state if runner else "idle",
            }
            vm = c.vms.get(vm_id)
            if vm is not None and vm.is_clone and runner is not None:
                manifest = c.server.images[vm.image_id]
                digests = {manifest.memory_hash(p) for p in runner.touched}
                digests.discard(ZERO)
                row["touched_unique_bytes"] = len(digests) * PAGE_SIZE
                row["host"] = vm.host_id
            elif vm is not None:
                row["host"] = vm.host_id
            vms[vm_id] = row
        hosts = {}
        for h in c.hosts.values():
            rep = account(h)
            hosts[h.host_id] = {
                "physical_bytes": rep.host_physical_bytes,
                "savings_bytes": rep.savings_bytes,
                "oversubscription_ratio": rep.oversubscription_ratio,
                "vms": len(h.vms),
            }
        templates = {name: {"page_count": t.page_count, "disk_size_bytes": t.disk_size_bytes}
                     for name, t in sorted(self.sc.templates.items())}
        return Metrics(
            scenario=self.sc.name, seed=self.seed, end_us=end_us, records=list(c.records),
            vms=vms, wire_by_purpose=dict(sorted(c.meter.by_purpose.items())),
            wire_total=c.meter.total,
            content_bytes_by_purpose={k: v * PAGE_SIZE for k, v in sorted(c.meter.content_pages.items())},
            templates=templates, max_resident_vms=self.max_vms, rejected=self.rejected,
            migrations=self.migrations, hosts=hosts,
        )


def run(scenario: Scenario, seed: int | None = None, *, verify_wire: bool = False,
        live: bool = False) -> Metrics:
    """Replay ``scenario`` deterministically; ``seed`` overrides the scenario's.

    With ``live`` set, image pages are served by a real localhost socket
    server instead of in-process calls; timing stays virtual, so the
    metrics are identical.
    """
    r = _Run(scenario, scenario.seed if seed is None else seed, verify_wire)
    if live:
        from .live import LivePageClient, LivePageServer, serve_hook

        with LivePageServer(r.cloud.server) as server:
            client = LivePageClient(server)
            r.cloud.serve_hook = serve_hook(client)
            try:
                metrics = r.execute()
            finally:
                client.close()
    else:
        metrics = r.execute()
    metrics.cloud = r.cloud  # type: ignore[attr-defined]  # for callers that inspect end state
    return metrics


@dataclass(frozen=True)
class ComparisonReport:
    speedup: float
    density_ratio: float
    io_ratio: float
    boot_startup_us: float
    clone_startup_us: float
    boot_wire_per_vm: float
    clone_wire_per_vm: float


def compare(baseline: Metrics, vms: Metrics) -> ComparisonReport:
    """Boot-only baseline versus a clone scenario on the same templates."""
    if baseline.templates != vms.templates:
        raise InvalidConfig("scenarios use different templates")
    boot_s = baseline.mean_startup_us("boot")
    clone_s = vms.mean_startup_us("clone")
    boot_io = baseline.wire_per_vm("boot")
    clone_io = vms.wire_per_vm("clone")
    if any(math.isnan(x) for x in (boot_s, clone_s, boot_io, clone_io)):
        raise InvalidConfig("baseline needs ready booted VMs and the other run ready clones")
    boots = sum(1 for v in baseline.vms.values() if v["kind"] == "boot")
    clones = sum(1 for v in vms.vms.values() if v["kind"] == "clone")
    return ComparisonReport(
        speedup=boot_s / clone_s,
        density_ratio=clones / boots if boots else math.inf,
        io_ratio=boot_io / clone_io if clone_io else math.inf,
        boot_startup_us=boot_s,
        clone_startup_us=clone_s,
        boot_wire_per_vm=boot_io,
        clone_wire_per_vm=clone_io,
    )
