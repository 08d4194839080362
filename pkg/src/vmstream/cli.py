"""``vmsctl``: operator command line.

State (placed VMs and known images) lives in ``state.json`` inside the store
directory.  Each invocation rebuilds the cloud from that state by replaying
every VM's deterministic workload, so identical invocations produce
identical output.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Sequence

from .cloud import Cloud, CloudConfig
from .errors import InvalidConfig, StoreError, UnknownVm, VmsError
from .guest import WorkloadSpec
from .host import HostSpec
from .migration import MODES, MigrationParams, start_migration
from .pages import IMAGE_MAGIC, read_image, read_manifest, write_image
from .sim import compare, derive_seed, load_metrics, load_scenario, run

STATE_VERSION = 1
DEFAULT_HOSTS = ("h0", "h1", "h2", "h3")
IMAGE_SUFFIX = ".vms"


@dataclass(frozen=True)
class Template:
    page_count: int
    disk_bytes: int
    warm_ops: int
    workload: WorkloadSpec


TEMPLATES = {
    "demo": Template(4096, 64 << 20, 4096, WorkloadSpec("uniform", 0.5)),
    "small": Template(1024, 16 << 20, 1024, WorkloadSpec("uniform", 0.5)),
    "m1.1g": Template(262144, 20 << 30, 131072, WorkloadSpec("sequential", 1.0)),
}

EPILOG = """\
verbs:
  image create --vm ID --out PATH
  image start PATH --host ID [--hostname S] [--net-id S] [--vm ID]
  image list DIR
  vm list
  boot --template NAME --host ID [--vm ID] [--ops N]
  migrate --vm ID --to HOST --mode precopy|postcopy|stopcopy
  sim run SCENARIO --seed N --out DIR [--live] [--verify-wire]
  report compare BASELINE_DIR VMS_DIR

global flags:
  --store DIR    shared-store directory (default: $VMSCTL_STORE or ./vms-store)
  --seed N       seed for new VMs (default 0)

templates: demo (16 MiB), small (4 MiB), m1.1g (1 GiB, 20 GiB disk)
exit codes: 0 ok, 1 domain error (printed as 'error: <code>: <message>'), 2 usage error
"""


# -- state --------------------------------------------------------------------


def _fresh_state() -> dict[str, Any]:
    return {
        "format_version": STATE_VERSION,
        "hosts": list(DEFAULT_HOSTS),
        "vms": {"demo": {"kind": "boot", "template": "demo", "host": "h0", "seed": 0,
                         "ops": TEMPLATES["demo"].warm_ops, "hostname": "demo",
                         "net_id": "net-demo"}},
    }


def load_state(store: Path) -> dict[str, Any]:
    path = store / "state.json"
    if not path.exists():
        return _fresh_state()
    try:
        state = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise StoreError(f"cannot read {path}: {exc}") from None
    if state.get("format_version") != STATE_VERSION:
        raise StoreError(f"{path}: unsupported format_version {state.get('format_version')}")
    return state


def save_state(store: Path, state: dict[str, Any]) -> None:
    try:
        store.mkdir(parents=True, exist_ok=True)
        tmp = store / "state.json.tmp"
        tmp.write_text(json.dumps(state, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        os.replace(tmp, store / "state.json")
    except OSError as exc:
        raise StoreError(f"cannot write state in {store}: {exc.strerror}") from None


def build_cloud(state: dict[str, Any]) -> Cloud:
    """Replay the recorded VMs onto a fresh cloud."""
    cloud = Cloud([HostSpec(h) for h in state["hosts"]], CloudConfig())
    from .pages import IdentityRecord
    from .stream import live_image_start

    for vm_id, rec in state["vms"].items():
        if rec["kind"] == "boot":
            tpl = TEMPLATES[rec["template"]]
            wl = tpl.workload.with_seed(derive_seed(rec["seed"], vm_id))
            cloud.spawn_vm(rec["host"], tpl.page_count, wl, vm_id=vm_id,
                           identity=IdentityRecord(rec["hostname"], rec["net_id"]))
            if rec["ops"]:
                cloud.run_vm(vm_id, op_limit=rec["ops"])
                cloud.run()
        else:
            manifest = read_image(rec["image"], cloud.server.store)
            cloud.server.register(manifest)
            live_image_start(manifest, cloud.host(rec["host"]),
                             {"hostname": rec["hostname"], "net_id": rec["net_id"]}, vm_id=vm_id)
    cloud.run()
    return cloud


# -- verbs --------------------------------------------------------------------


def _store_dir(args) -> Path:
    return Path(args.store or os.environ.get("VMSCTL_STORE") or "vms-store")


def cmd_boot(args) -> int:
    store = _store_dir(args)
    state = load_state(store)
    if args.template not in TEMPLATES:
        raise InvalidConfig(f"unknown template {args.template!r} (have {', '.join(sorted(TEMPLATES))})")
    if args.host not in state["hosts"]:
        from .errors import UnknownHost
        raise UnknownHost(args.host)
    vm_id = args.vm or _unique_id(state, args.template)
    if vm_id in state["vms"]:
        raise InvalidConfig(f"vm {vm_id} already exists")
    tpl = TEMPLATES[args.template]
    ops = tpl.warm_ops if args.ops is None else args.ops
    cloud = build_cloud(state)
    wl = tpl.workload.with_seed(derive_seed(args.seed, vm_id))
    vm = cloud.boot_vm(args.host, tpl.page_count, wl, vm_id=vm_id, disk_bytes=tpl.disk_bytes,
                       op_limit=ops or None, run=bool(ops))
    t0 = cloud.loop.now
    cloud.run()
    state["vms"][vm_id] = {"kind": "boot", "template": args.template, "host": args.host,
                           "seed": args.seed, "ops": ops, "hostname": vm.identity.hostname,
                           "net_id": vm.identity.net_id}
    save_state(store, state)
    print(f"booted {vm_id} on {args.host} template={args.template} "
          f"live_after_us={vm.live_at - t0} ops={vm.ops_done}")
    return 0


def _unique_id(state, stem: str) -> str:
    if stem not in state["vms"]:
        return stem
    i = 2
    while f"{stem}-{i}" in state["vms"]:
        i += 1
    return f"{stem}-{i}"


def cmd_image_create(args) -> int:
    store = _store_dir(args)
    state = load_state(store)
    if args.vm not in state["vms"]:
        raise UnknownVm(args.vm)
    cloud = build_cloud(state)
    manifest = cloud.create_image(args.vm)
    out = Path(args.out)
    try:
        size = write_image(cloud.server.store, manifest, out)
    except OSError as exc:
        raise StoreError(f"cannot write {out}: {exc.strerror}") from None
    print(f"image {manifest.image_id} written to {out} bytes={size} "
          f"pages={len(manifest.memory_map)} hostname={manifest.identity.hostname}")
    return 0


def cmd_image_start(args) -> int:
    store = _store_dir(args)
    state = load_state(store)
    cloud = build_cloud(state)
    cloud.host(args.host)
    path = Path(args.path).resolve()
    manifest = read_image(path, cloud.server.store)
    cloud.server.register(manifest)
    overrides = {}
    if args.hostname:
        overrides["hostname"] = args.hostname
    if args.net_id:
        overrides["net_id"] = args.net_id
    hostname = overrides.get("hostname", manifest.identity.hostname)
    vm_id = args.vm or _unique_id(state, hostname)
    if vm_id in state["vms"]:
        raise InvalidConfig(f"vm {vm_id} already exists")
    t0 = cloud.loop.now
    from .stream import live_image_start

    vm = live_image_start(manifest, cloud.host(args.host), overrides, vm_id=vm_id)
    state["vms"][vm_id] = {"kind": "clone", "image": str(path), "image_id": manifest.image_id,
                           "host": args.host, "hostname": vm.identity.hostname,
                           "net_id": vm.identity.net_id}
    save_state(store, state)
    print(f"started {vm_id} on {args.host} hostname={vm.identity.hostname} "
          f"net_id={vm.identity.net_id} image={manifest.image_id} ready_after_us={vm.live_at - t0}")
    return 0


def cmd_image_list(args) -> int:
    d = Path(args.dir)
    if not d.is_dir():
        raise StoreError(f"{d} is not a directory")
    rows = []
    for path in sorted(d.iterdir()):
        if not path.is_file():
            continue
        try:
            with open(path, "rb") as f:
                if f.read(len(IMAGE_MAGIC)) != IMAGE_MAGIC:
                    continue
            m = read_manifest(path)
        except (OSError, VmsError):
            rows.append(f"{path.name}\tcorrupt")
            continue
        rows.append(f"{path.name}\t{m.image_id}\tpages={m.memory_page_count}\t"
                    f"mapped={len(m.memory_map)}\thostname={m.identity.hostname}")
    for r in rows:
        print(r)
    if not rows:
        print("no images")
    return 0


def cmd_vm_list(args) -> int:
    state = load_state(_store_dir(args))
    for vm_id, rec in state["vms"].items():
        src = rec.get("template") or rec.get("image_id")
        print(f"{vm_id}\t{rec['kind']}\t{rec['host']}\trunning\thostname={rec['hostname']}\t{src}")
    return 0


def cmd_migrate(args) -> int:
    store = _store_dir(args)
    state = load_state(store)
    if args.vm not in state["vms"]:
        raise UnknownVm(args.vm)
    cloud = build_cloud(state)
    vm = cloud.vm(args.vm)
    m = start_migration(cloud, vm, cloud.host(args.to), MigrationParams(mode=args.mode))
    cloud.run_until(lambda: m.done)
    if m.error is not None:
        raise m.error
    r = m.report
    state["vms"][args.vm]["host"] = args.to
    save_state(store, state)
    print(f"migrated {r.vm_id} to {args.to} mode={r.mode} rounds={r.rounds} "
          f"downtime_us={r.downtime_us} total_us={r.total_us} bytes={r.bytes_transferred}")
    return 0


def cmd_sim_run(args) -> int:
    scenario = load_scenario(args.scenario)
    metrics = run(scenario, args.sim_seed, verify_wire=args.verify_wire, live=args.live)
    try:
        metrics.write(args.out)
    except OSError as exc:
        raise StoreError(f"cannot write report to {args.out}: {exc.strerror}") from None
    s = metrics.summary()
    print(f"scenario {s['scenario']} seed={s['seed']} end_us={s['end_us']} "
          f"vms={len(s['vms'])} wire_bytes={s['wire_bytes']['total']} -> {args.out}")
    return 0


def cmd_report_compare(args) -> int:
    rep = compare(load_metrics(args.baseline), load_metrics(args.vms))
    print(json.dumps({"speedup": rep.speedup, "density_ratio": rep.density_ratio,
                      "io_ratio": rep.io_ratio, "boot_startup_us": rep.boot_startup_us,
                      "clone_startup_us": rep.clone_startup_us,
                      "boot_wire_per_vm": rep.boot_wire_per_vm,
                      "clone_wire_per_vm": rep.clone_wire_per_vm}, indent=2, sort_keys=True))
    return 0


# -- parser -------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="vmsctl", description="Live-image cloning and streaming control.",
                                epilog=EPILOG, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--store", help="shared-store directory")
    p.add_argument("--seed", type=int, default=0, help="seed for new VMs")
    verbs = p.add_subparsers(dest="verb", required=True)

    image = verbs.add_parser("image", help="create, start and list live images")
    image_verbs = image.add_subparsers(dest="image_verb", required=True)
    c = image_verbs.add_parser("create", help="capture a running VM into an image file")
    c.add_argument("--vm", required=True)
    c.add_argument("--out", required=True)
    c.set_defaults(func=cmd_image_create)
    s = image_verbs.add_parser("start", help="launch a clone from an image file")
    s.add_argument("path")
    s.add_argument("--host", required=True)
    s.add_argument("--hostname")
    s.add_argument("--net-id")
    s.add_argument("--vm")
    s.set_defaults(func=cmd_image_start)
    ls = image_verbs.add_parser("list", help="list image files in a directory")
    ls.add_argument("dir")
    ls.set_defaults(func=cmd_image_list)

    vm = verbs.add_parser("vm", help="inspect placed VMs")
    vm_verbs = vm.add_subparsers(dest="vm_verb", required=True)
    vl = vm_verbs.add_parser("list", help="list VMs and where they run")
    vl.set_defaults(func=cmd_vm_list)

    b = verbs.add_parser("boot", help="cold-boot a VM from a template")
    b.add_argument("--template", required=True)
    b.add_argument("--host", required=True)
    b.add_argument("--vm")
    b.add_argument("--ops", type=int)
    b.set_defaults(func=cmd_boot)

    m = verbs.add_parser("migrate", help="live-migrate a VM")
    m.add_argument("--vm", required=True)
    m.add_argument("--to", required=True)
    m.add_argument("--mode", required=True, choices=MODES)
    m.set_defaults(func=cmd_migrate)

    sim = verbs.add_parser("sim", help="run simulation scenarios")
    sim_verbs = sim.add_subparsers(dest="sim_verb", required=True)
    r = sim_verbs.add_parser("run", help="run a scenario file into a report directory")
    r.add_argument("scenario")
    r.add_argument("--seed", dest="sim_seed", type=int, default=None)
    r.add_argument("--out", required=True)
    r.add_argument("--live", action="store_true", help="serve image pages over a local socket")
    r.add_argument("--verify-wire", action="store_true", help="encode every message to check byte counts")
    r.set_defaults(func=cmd_sim_run)

    rep = verbs.add_parser("report", help="compare report directories")
    rep_verbs = rep.add_subparsers(dest="report_verb", required=True)
    cmp_ = rep_verbs.add_parser("compare", help="boot baseline versus clone run")
    cmp_.add_argument("baseline")
    cmp_.add_argument("vms")
    cmp_.set_defaults(func=cmd_report_compare)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except VmsError as exc:
        msg = str(exc).replace("\n", " ")
        print(f"error: {exc.code}: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
