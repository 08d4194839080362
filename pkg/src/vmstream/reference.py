"""Reference scenarios used by the acceptance gate and the experiment scripts.

Each builder returns plain ``Scenario`` objects (or a prepared ``Cloud`` for
the migration runs), so the same setups can be run from tests, scripts and
exported as TOML.
"""

from __future__ import annotations

from .cloud import Cloud, CloudConfig
from .guest import GuestVm, WorkloadSpec
from .host import GIB, HostSpec
from .migration import MigrationParams, MigrationReport, start_migration
from .pages import PAGE_SIZE
from .sim import Command, Scenario, TemplateSpec, prefill

S = 1_000_000
TEMPLATE_PAGES = 262144  # 1 GiB
TEMPLATE_DISK = 20 * GIB
BOOT_DURATION_S = 96.9


def _case_study_host(host_id: str = "h0", **kw) -> HostSpec:
    return HostSpec(host_id, ram_capacity_bytes=16 * GIB, nic_bandwidth_bits_per_s=10e9, **kw)


def launch_template(*, page_count: int = TEMPLATE_PAGES, touch_fraction: float = 0.25,
                    ops_per_second: float = 10_000.0, disk_bytes: int = TEMPLATE_DISK,
                    warm_fraction: float = 0.5) -> TemplateSpec:
    """1 GiB guest: warm-up writes half its memory, clones read ``touch_fraction``."""
    return TemplateSpec(
        name="m1",
        page_count=page_count,
        disk_size_bytes=disk_bytes,
        workload=WorkloadSpec("sequential", 1.0, ops_per_second),
        clone_workload=WorkloadSpec("sequential", 0.0, ops_per_second),
        boot_ops=int(page_count * warm_fraction),
        clone_ops=int(page_count * touch_fraction),
        touch_fraction=touch_fraction,
    )


def launch_pair(*, ready_ops: int = 100, ops_per_second: float = 10_000.0, count: int = 1,
                seed: int = 0, touch_fraction: float = 0.25,
                boot_duration_s: float = BOOT_DURATION_S) -> tuple[Scenario, Scenario]:
    """Boot-only baseline and live-image clone run on one 16 GiB host.

    The template boots, warms up, is captured and then destroyed, so the
    clones' host starts with none of the image's pages.
    """
    tpl = launch_template(touch_fraction=touch_fraction, ops_per_second=ops_per_second)
    common = dict(templates={"m1": tpl}, seed=seed, ready_ops=ready_ops,
                  boot_duration_s=boot_duration_s, hosts=(_case_study_host(),))
    baseline = Scenario(
        name="launch-boot",
        script=tuple(Command(0, "boot", {"template": "m1", "host": "h0", "vm": f"b{i}",
                                         "workload": "clone", "ops": tpl.clone_ops})
                     for i in range(count)),
        **common,
    )
    warm_s = tpl.boot_ops / ops_per_second
    t_image = int((tpl.disk_size_bytes * 8 / 10e9 + boot_duration_s + warm_s + 1) * S)
    vms = Scenario(
        name="launch-clone",
        script=(
            Command(0, "boot", {"template": "m1", "host": "h0", "vm": "t0"}),
            Command(t_image, "image", {"vm": "t0", "name": "m1img"}),
            Command(t_image, "destroy", {"vm": "t0"}),
            Command(t_image + S, "clone", {"image": "m1img", "host": "h0", "count": count}),
        ),
        **common,
    )
    return baseline, vms


def density_pair(*, attempts: int = 24, vm_gib: int = 4, touch_fraction: float = 0.25,
                 seed: int = 0) -> tuple[Scenario, Scenario]:
    """Pack as many 4 GiB guests as admission allows onto one 16 GiB host."""
    pages = vm_gib * GIB // PAGE_SIZE
    tpl = TemplateSpec(
        name="m4", page_count=pages, disk_size_bytes=TEMPLATE_DISK,
        workload=WorkloadSpec("sequential", 1.0), clone_workload=WorkloadSpec("sequential", 0.0),
        boot_ops=4096, clone_ops=200, touch_fraction=touch_fraction,
    )
    hosts = (_case_study_host("h0"), _case_study_host("h1"))
    common = dict(templates={"m4": tpl}, seed=seed, hosts=hosts, boot_duration_s=BOOT_DURATION_S)
    baseline = Scenario(
        name="density-boot",
        script=tuple(Command(0, "boot", {"template": "m4", "host": "h0", "vm": f"b{i}", "ops": 200})
                     for i in range(attempts)),
        **common,
    )
    t_image = 120 * S
    vms = Scenario(
        name="density-clone",
        script=(
            Command(0, "boot", {"template": "m4", "host": "h1", "vm": "t0"}),
            Command(t_image, "image", {"vm": "t0", "name": "m4img"}),
            Command(t_image, "destroy", {"vm": "t0"}),
            Command(t_image + S, "clone", {"image": "m4img", "host": "h0", "count": attempts}),
        ),
        **common,
    )
    return baseline, vms


def scaleout_scenario(*, clones: int = 200, hosts: int = 4, touched_pages: int = 4096,
                      seed: int = 0) -> Scenario:
    """Hundreds of clones of one image launched at the same instant."""
    tpl = TemplateSpec(
        name="m1", page_count=TEMPLATE_PAGES, disk_size_bytes=TEMPLATE_DISK,
        workload=WorkloadSpec("sequential", 1.0), clone_workload=WorkloadSpec("sequential", 0.0),
        boot_ops=2 * touched_pages, clone_ops=touched_pages,
    )
    specs = tuple(_case_study_host(f"h{i}") for i in range(hosts))
    t_image = int((TEMPLATE_DISK * 8 / 10e9 + BOOT_DURATION_S + 2 * touched_pages / 10_000 + 1) * S)
    return Scenario(
        name="scale-out",
        hosts=specs,
        templates={"m1": tpl},
        seed=seed,
        script=(
            Command(0, "boot", {"template": "m1", "host": "h0", "vm": "t0"}),
            Command(t_image, "image", {"vm": "t0", "name": "m1img"}),
            Command(t_image, "destroy", {"vm": "t0"}),
            Command(t_image + S, "clone", {"image": "m1img", "count": clones,
                                           "hosts": [h.host_id for h in specs]}),
        ),
    )


def migration_setup(*, page_count: int = 4 * GIB // PAGE_SIZE, nic_bps: float = 2e9,
                    dirty_fraction: float = 0.10, pool: int = 1024, seed: int = 0,
                    resident_fraction: float = 1.0) -> tuple[Cloud, GuestVm]:
    """Two hosts and one fully resident guest dirtying pages at a fraction of link rate.

    Written contents come from a small pool so a multi-GiB guest fits in
    memory; every page still crosses the wire as a full 4 KiB copy.
    """
    pages_per_s = dirty_fraction * nic_bps / 8 / PAGE_SIZE
    cloud = Cloud([HostSpec("h0", 64 * GIB, nic_bps), HostSpec("h1", 64 * GIB, nic_bps)], CloudConfig())
    if pages_per_s > 0:
        wl = WorkloadSpec("uniform", 1.0, pages_per_s, seed=seed, content_pool=pool)
    else:
        wl = WorkloadSpec("uniform", 0.0, 1.0, seed=seed)
    vm = cloud.spawn_vm("h0", page_count, wl, vm_id="v1")
    prefill(vm, resident_fraction, pool, seed)
    if pages_per_s > 0:
        cloud.run_vm("v1")
    return cloud, vm


def measure_migration(mode: str, *, max_rounds: int = 8, stop_threshold_pages: float = 64,
                      **setup) -> MigrationReport:
    """Run one migration of ``migration_setup(**setup)``'s guest from h0 to h1.

    The guest keeps dirtying pages until it resumes on the destination and
    is then stopped, so the report reflects the migration alone.
    """
    cloud, vm = migration_setup(**setup)
    runner = cloud.runners.get(vm.vm_id)
    params = MigrationParams(mode=mode, max_rounds=max_rounds, stop_threshold_pages=stop_threshold_pages)
    m = start_migration(cloud, vm, "h1", params,
                        on_resume=lambda _vm: runner.stop() if runner is not None else None)
    cloud.run_until(lambda: m.done)
    if m.error is not None:
        raise m.error
    return m.report


__all__ = ["launch_template", "launch_pair", "density_pair", "scaleout_scenario", "migration_setup",
           "measure_migration"]
