"""Runnable scenarios. Each one builds its own machine from a config, runs an
attack phase that may only look at exit information and cleartext VMCB
fields, then checks the outcome against ground truth."""

from __future__ import annotations

import random
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Any, Callable, Iterator, Optional

from .. import oracle
from ..config import ScenarioConfig, VmSpec
from ..errors import SevSimError
from ..hypervisor.core import GuestVm, Hypervisor
from ..hypervisor.image import GuestImage
from ..hypervisor.pools import SevClass
from ..paging import PAGE_SIZE, decode_leaked_gpa, pte_is_leakable
from ..trace import Trace
from ..vm_core.machine import EXIT_CPUID, Machine
from ..vm_core.vmcb import TLB_FLUSH_ASID, Vmcb
from .. import workloads as wl
from .report import LeakedBlock, LeakReport
from .seves import CampaignParams, SevEsReader, seves_offset_campaign
from .v1 import V1Reader, v1_dump_page_table
from .v2 import MomentaryExec, locate_gadgets, v2_decrypt_page, v2_encrypt_page, v2_momentary_exec
from .v3 import prime_victim, v3_tlb_reuse


@dataclass
class Check:
    name: str
    ok: bool
    detail: str = ""


@dataclass
class ScenarioResult:
    scenario: str
    checks: list[Check] = field(default_factory=list)
    summary: dict[str, Any] = field(default_factory=dict)
    report_lines: list[str] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return bool(self.checks) and all(c.ok for c in self.checks)

    def to_dict(self) -> dict[str, Any]:
        return {
            "scenario": self.scenario,
            "passed": self.passed,
            "checks": [{"name": c.name, "ok": c.ok, "detail": c.detail} for c in self.checks],
            "summary": self.summary,
        }

    def report_text(self) -> str:
        head = [f"scenario: {self.scenario}", f"status: {'PASS' if self.passed else 'FAIL'}", ""]
        checks = [f"  [{'ok' if c.ok else 'FAIL'}] {c.name}" + (f" ({c.detail})" if c.detail else "")
                  for c in self.checks]
        summ = [f"  {k}: {v}" for k, v in self.summary.items()]
        return "\n".join(head + ["checks:"] + checks + ["", "summary:"] + summ + [""] + self.report_lines) + "\n"


def hexdump(data: bytes, base: int = 0, width: int = 16) -> list[str]:
    return [f"{base + i:012x}  {data[i:i + width].hex(' ')}" for i in range(0, len(data), width)]


class Context:
    def __init__(self, cfg: ScenarioConfig, trace: Optional[Trace] = None):
        self.cfg = cfg
        self.p = cfg.params
        self.rng = random.Random(cfg.seed)
        self.trace = trace if trace is not None else Trace()
        if self.trace.header is None:
            self.trace.set_header(**cfg.to_dict())
        self.machine = Machine(cfg.machine)
        self.hv = Hypervisor(self.machine, self.trace)
        self.result = ScenarioResult(cfg.scenario)
        self.extra: dict[str, Any] = {}
        self.meta: dict[str, dict[str, Any]] = {}

    def check(self, name: str, ok: bool, detail: str = "") -> bool:
        ok = bool(ok)
        self.result.checks.append(Check(name, ok, detail))
        self.trace.emit("ASSERT", name=name, ok=ok, detail=detail)
        return ok

    # -- VMs -------------------------------------------------------------------

    def build_image(self, spec: VmSpec) -> tuple[GuestImage, dict[str, Any]]:
        """Image plus generator metadata (data page gVAs, task RIPs)."""
        g = dict(spec.generator)
        kind = g.pop("kind")
        rng = self.rng
        if kind == "victim":
            img, data = wl.build_victim(rng, int(g.get("data_pages", 16)),
                                        kernel_fraction=float(g.get("kernel_fraction", 0.25)),
                                        cluster=int(g.get("cluster", 64)))
            return img, {"data_gvas": data}
        if kind == "attacker":
            return wl.build_attacker(rng), {}
        if kind == "tasks":
            img, tasks = wl.build_task_victim(rng, int(g.get("n_tasks", 64)), movs=int(g.get("movs", 12)))
            return img, {"tasks": tasks}
        if kind == "server":
            binary = self.server_binary(g)
            base = g.get("image_base", "random")
            base = self.random_image_base() if base == "random" else int(base)
            return wl.build_server_victim(rng, binary, base, int(g.get("heap_pages", 4))), {}
        raise SevSimError(f"unknown generator {kind}")

    def server_binary(self, g: dict[str, Any]) -> bytes:
        if "binary" in g:
            return self.cfg.resolve(str(g["binary"])).read_bytes()
        if "binary" not in self.extra:
            plants = None
            if "plants" in g:
                plants = {int(k): bytes.fromhex(v) for k, v in g["plants"].items()}
            self.extra["binary"] = wl.synthetic_binary(self.rng, int(g.get("size", 0x10000)), plants)
        return self.extra["binary"]

    def random_image_base(self) -> int:
        return 0x0000_5555_0000_0000 + (self.rng.randrange(1 << 20) << 12)

    def launch(self, role: str, sev_class: Optional[str] = None, vm_id: Optional[str] = None) -> GuestVm:
        spec = self.cfg.vm(role)
        img, meta = self.build_image(spec)
        vm = self.hv.launch_vm(img, sev_class or spec.sev_class, vm_id or spec.id)
        self.meta[vm.vm_id] = meta
        return vm

    # -- phases ----------------------------------------------------------------

    @contextmanager
    def attack_phase(self, label: str) -> Iterator[None]:
        """Fails the scenario if ground truth is consulted inside the block."""
        before = sum(self.machine.audit.values())
        yield
        used = sum(self.machine.audit.values()) - before
        self.check(f"{label}: no ground-truth reads during attack", used == 0, f"{used} reads")

    def victim_state(self, vm: GuestVm) -> tuple[Any, dict[int, bytes]]:
        """Full plaintext state used for before/after comparisons."""
        if vm.vmcb.control.sev_es:
            regs: Any = oracle.registers(self.machine, vm)
        else:
            regs = _vmcb_guest_view(vm)
        mem = {gpa: oracle.read_gpa(self.machine, vm, gpa, PAGE_SIZE) for gpa in sorted(vm.ground_truth.pages)}
        return regs, mem

    def stealth_check(self, vm: GuestVm, before: tuple[Any, dict[int, bytes]], allowed: frozenset = frozenset()) -> None:
        regs0, mem0 = before
        regs1, mem1 = self.victim_state(vm)
        if vm.vmcb.control.sev_es:
            diff = regs0.diff(regs1)
            self.check("victim VMSA unchanged except " + (",".join(sorted(allowed)) or "nothing"),
                       diff <= set(allowed), f"diff={sorted(diff)}")
        else:
            self.check("victim VMCB bit-identical outside exit information", regs0 == regs1)
        changed = [g for g in mem0 if mem0[g] != mem1[g]]
        self.check("victim memory and gPT bit-identical", not changed, f"{len(changed)} pages differ")


def _vmcb_guest_view(vm: GuestVm) -> bytes:
    """VMCB image with the fields every VMEXIT rewrites zeroed: exit code and
    info, nRIP and clean bits. Capturing gCR3 costs the victim one exit."""
    v = Vmcb.from_bytes(vm.vmcb.to_bytes(), vm.vmcb.spa)
    c = v.control
    c.exitcode = c.exitinfo1 = c.exitinfo2 = c.exitintinfo = c.nrip = c.clean_bits = 0
    return v.to_bytes()


def _report_leaks(ctx: Context, report: LeakReport, limit: int = 16) -> None:
    ctx.result.summary.update(report.summary())
    leaked = sorted(report.leaked.items())
    if leaked:
        ctx.result.report_lines.append("leaked blocks (spa: value / known-bit mask):")
        for spa, b in leaked[:limit]:
            ctx.result.report_lines.append(f"  {spa:#014x}: {b.value:#018x} / {b.known_mask:#018x}  exit@{b.exit_step}")
        if len(leaked) > limit:
            ctx.result.report_lines.append(f"  ... {len(leaked) - limit} more")


def _blocked_checks(ctx: Context, report: LeakReport) -> None:
    ctx.check("no bytes leaked under RMP checks", report.leaked_bytes == 0, f"{report.leaked_bytes} bytes")
    ctx.check("RMP faults observed", report.rmp_fault_count > 0, f"RmpFault x{report.rmp_fault_count}")
    ctx.result.report_lines.insert(0, f"{report.leaked_bytes} bytes leaked, RmpFault x{report.rmp_fault_count}")


def _pause(ctx: Context, vm: GuestVm) -> None:
    """Run the victim to its first CPUID exit so it sits paused at an exit."""
    ctx.hv.run_until_exit(vm, lambda e: e.code == EXIT_CPUID)


# -- V1 -------------------------------------------------------------------------

def _v1_targets(ctx: Context, victim: GuestVm) -> list[int]:
    img = victim.ground_truth
    n = int(ctx.p.get("blocks", 2000))
    pages = sorted(img.pages)
    out = [victim.spa_of(img.gcr3) + 8 * i for i in range(512)] if ctx.p.get("include_root", True) else []
    for _ in range(n):
        gpa = ctx.rng.choice(pages)
        out.append(victim.spa_of(gpa) + 8 * ctx.rng.randrange(512))
    return out


def run_v1_read(ctx: Context) -> None:
    victim = ctx.launch("victim")
    attacker = ctx.launch("attacker")
    _pause(ctx, victim)
    targets = _v1_targets(ctx, victim)
    before = ctx.victim_state(victim)
    report = LeakReport()
    with ctx.attack_phase("v1_read"):
        reader = V1Reader(ctx.hv, victim, attacker, rewind=bool(ctx.p.get("rewind", True)), report=report)
        results = [reader.read_block(spa) for spa in targets]
    _report_leaks(ctx, report)
    if ctx.cfg.machine.snp_mode:
        _blocked_checks(ctx, report)
        return
    mismatches = 0
    for spa, res in zip(targets, results):
        truth = oracle.qword_at_spa(ctx.machine, victim, spa)
        expect = pte_is_leakable(truth)
        if bool(res) != expect:
            mismatches += 1
        elif expect and res.pfn != decode_leaked_gpa(truth, last_level=False):
            mismatches += 1
    ctx.check("read succeeds iff block is in PTE format; pfn matches", mismatches == 0,
              f"{mismatches} mismatches over {len(targets)} blocks")
    ctx.stealth_check(victim, before)


def run_v1_dump(ctx: Context) -> None:
    victim = ctx.launch("victim")
    attacker = ctx.launch("attacker")
    _pause(ctx, victim)
    rewind = bool(ctx.p.get("rewind", True))
    before = ctx.victim_state(victim)
    with ctx.attack_phase("v1_dump"):
        dump = v1_dump_page_table(ctx.hv, victim, attacker, rewind=rewind)
    _report_leaks(ctx, dump.report, limit=0)
    ctx.result.summary["tables"] = len(dump.tree)
    if ctx.cfg.machine.snp_mode:
        _blocked_checks(ctx, dump.report)
        return
    truth = victim.ground_truth.gpt_tree()
    ctx.check("reconstructed gPT equals ground truth", dump.tree == truth,
              f"{len(dump.tree)} tables leaked, {len(truth)} expected")
    if rewind:
        ctx.check("no attacker relaunch with rewinding", dump.report.vm_relaunch_count == 0,
                  f"vm_relaunch_count={dump.report.vm_relaunch_count}")
    ctx.result.summary["gcr3"] = hex(dump.gcr3)
    lines = ["reconstructed guest page table:"]
    for table in sorted(dump.tree, key=lambda t: (-dump.levels[t], t)):
        entries = dump.tree[table]
        lines.append(f"  L{dump.levels[table]} table {table:#x}: {len(entries)} entries")
        for idx, pfn in sorted(entries.items()):
            lines.append(f"    [{idx:3d}] -> pfn {pfn:#x}")
    ctx.result.report_lines += lines
    ctx.stealth_check(victim, before)


# -- V2 -------------------------------------------------------------------------

def _v2_setup(ctx: Context) -> tuple[GuestVm, GuestVm, list[int]]:
    victim = ctx.launch("victim")
    attacker = ctx.launch("attacker")
    _pause(ctx, victim)
    return victim, attacker, list(ctx.meta[victim.vm_id]["data_gvas"])


def _pick_pages(ctx: Context, victim: GuestVm, data: list[int]) -> list[int]:
    n = min(int(ctx.p.get("pages", 8)), len(data) - 1)
    gvas = ctx.rng.sample(data[1:], n)
    return [victim.ground_truth.translate(g) for g in gvas]


def run_v2_decrypt(ctx: Context) -> None:
    victim, attacker, data = _v2_setup(ctx)
    text = victim.ground_truth.symbols["text"]   # known binary layout
    gpas = _pick_pages(ctx, victim, data)
    with ctx.attack_phase("v2_decrypt"):
        smoke = v2_momentary_exec(ctx.hv, victim, attacker, text + wl.R15_OFFSET)
        mx = MomentaryExec(ctx.hv, victim, attacker, text + wl.VICTIM_READER_OFFSET, data[0])
        pages = {gpa: v2_decrypt_page(mx, victim.spa_of(gpa) >> 12) for gpa in gpas}
        mx.finish()
    ctx.check("movl $2020,%r15d executed", smoke.reg("r15") & 0xFFFFFFFF == 2020, hex(smoke.reg("r15")))
    bad = [g for g, got in pages.items() if got != oracle.read_gpa(ctx.machine, victim, g, PAGE_SIZE)]
    ctx.check("decrypted pages byte-exact", not bad, f"{len(pages) - len(bad)}/{len(pages)} pages")
    ctx.result.summary.update({"pages": len(pages), "invocations": mx.invocations})
    if pages:
        first = min(pages)
        ctx.result.report_lines += [f"first decrypted page gpa {first:#x} (64 bytes):"] + hexdump(pages[first][:64])


def run_v2_encrypt(ctx: Context) -> None:
    victim, attacker, data = _v2_setup(ctx)
    text = victim.ground_truth.symbols["text"]
    gpas = _pick_pages(ctx, victim, data)
    contents = {g: ctx.rng.randbytes(PAGE_SIZE) for g in gpas}
    with ctx.attack_phase("v2_encrypt"):
        mx = MomentaryExec(ctx.hv, victim, attacker, text + wl.VICTIM_STORE_OFFSET, data[0])
        for g, c in contents.items():
            v2_encrypt_page(mx, victim.spa_of(g) >> 12, c)
        mx.finish()
    bad = [g for g, c in contents.items() if oracle.read_gpa(ctx.machine, victim, g, PAGE_SIZE) != c]
    ctx.check("victim memory holds injected content", not bad, f"{len(contents) - len(bad)}/{len(contents)} pages")
    # the victim itself, resumed on a load, sees the new values
    inv = {g: gva for gva, g in victim.ground_truth.mappings.items()}
    seen_ok = 0
    probes = int(ctx.p.get("victim_probes", 4))
    for g, c in contents.items():
        for j in ctx.rng.sample(range(512), probes):
            ctx.hv.set_rip(victim, text + wl.VICTIM_READER_OFFSET)
            ctx.hv.set_regs(victim, rbx=inv[g] + 8 * j)
            ex = ctx.hv.run(victim)
            if ex.code == EXIT_CPUID and victim.vmcb.save.reg("rax") == int.from_bytes(c[8 * j:8 * j + 8], "little"):
                seen_ok += 1
    total = probes * len(contents)
    ctx.check("resumed victim reads the injected values", seen_ok == total, f"{seen_ok}/{total} loads")
    ctx.result.summary.update({"pages": len(contents), "invocations": mx.invocations})


def run_v2_locate(ctx: Context) -> None:
    attacker = ctx.launch("attacker")
    spec = ctx.cfg.vm("victim")
    binary = ctx.server_binary(spec.generator)
    bases = int(ctx.p.get("bases", 1))
    found_all = []
    for i in range(bases):
        victim = ctx.launch("victim", vm_id=f"{spec.id}-{i}")
        truth = victim.ground_truth.symbols["image_base"]
        ctx.trace.emit("HV_OP", op="event", vm=victim.vm_id, field="server_hello", old=None, new=1)
        with ctx.attack_phase(f"locate #{i}"):
            got = locate_gadgets(ctx.hv, victim, attacker, binary)
        ctx.check(f"base #{i} resolved", got["image_base"] == truth,
                  f"found {got['image_base']:#x}, actual {truth:#x}")
        at_load = oracle.read_gva(ctx.machine, victim, got["load_gadget"], len(wl.LOAD_GADGET))
        at_store = oracle.read_gva(ctx.machine, victim, got["store_gadget"], len(wl.STORE_GADGET))
        ctx.check(f"base #{i} gadget gVAs hold the gadgets",
                  at_load == wl.LOAD_GADGET and at_store == wl.STORE_GADGET,
                  f"load@{got['load_gadget']:#x} store@{got['store_gadget']:#x}")
        found_all.append({k: hex(v) for k, v in got.items()})
        ctx.hv.teardown(victim)
    ctx.result.summary["located"] = found_all


# -- SEV-ES ---------------------------------------------------------------------

def _seves_pair(ctx: Context) -> tuple[GuestVm, GuestVm]:
    victim = ctx.launch("victim", "sev_es")
    attacker = ctx.launch("attacker", "sev_es")
    _pause(ctx, victim)
    return victim, attacker


def _seves_targets(ctx: Context, victim: GuestVm, reader: SevEsReader, n: int) -> list[tuple[int, int]]:
    """(sPA page, level) pairs: the victim's own tables plus random pages."""
    img = victim.ground_truth
    out = []
    for depth, table in enumerate(reader.chain):
        out.append((victim.spa_of(table), 4 - depth))
    pages = sorted(img.pages)
    while len(out) < n:
        level = ctx.rng.choice([4, 4, 3, 2, 1])
        out.append((victim.spa_of(ctx.rng.choice(pages)), level))
    return out


def run_seves_v1(ctx: Context) -> None:
    victim, attacker = _seves_pair(ctx)
    before = ctx.victim_state(victim)
    report = LeakReport()
    n = int(ctx.p.get("iterations", 50))
    snp = ctx.cfg.machine.snp_mode
    with ctx.attack_phase("seves_v1"):
        reader = SevEsReader(ctx.hv, victim, attacker, report)
        offsets = reader.locate()
        if snp:   # only foreign frames; the victim's own tables at their own gPAs are its own walk
            own = {victim.spa_of(t) for t in reader.chain}
            pages = [victim.spa_of(g) for g in sorted(victim.ground_truth.pages)]
            targets = [(p, ctx.rng.choice([4, 3, 2, 1])) for p in pages if p not in own][:n]
        else:
            targets = _seves_targets(ctx, victim, reader, n)
        results = [(spa, lvl, reader.read(spa, lvl)) for spa, lvl in targets]
        reader.finish()
    _report_leaks(ctx, report)
    ctx.result.summary["rip_offsets"] = [hex(o) for o in offsets]
    if snp:
        _blocked_checks(ctx, report)
        return
    bad = 0
    for spa, lvl, res in results:
        block = spa + offsets[4 - lvl]
        truth = oracle.qword_at_spa(ctx.machine, victim, block)
        if isinstance(res, LeakedBlock):
            if not pte_is_leakable(truth, lvl == 1) or res.pfn != decode_leaked_gpa(truth, lvl == 1):
                bad += 1
        elif pte_is_leakable(truth, lvl == 1):
            # a leakable block can still be hidden if the next level's gPA is already mapped
            bad += 1
    ctx.check("leaked values match ground truth", bad == 0, f"{bad} mismatches")
    ctx.check("both leak and triple-fault outcomes seen",
              report.triple_fault_count > 0 and len(report.leaked) > 0,
              f"leaks={len(report.leaked)} shutdowns={report.triple_fault_count}")
    ctx.stealth_check(victim, before, frozenset({"cr2"}))
    # the victim carries on with its loop
    ctx.hv.request_tlb_flush(victim, TLB_FLUSH_ASID)
    cpuids = 0
    for _ in range(int(ctx.p.get("resume_exits", 5))):
        ex = ctx.hv.run(victim)
        if ex.code != EXIT_CPUID:
            break
        cpuids += 1
    regs = oracle.registers(ctx.machine, victim)
    ctx.check("victim resumes and completes its workload",
              cpuids == int(ctx.p.get("resume_exits", 5)) and regs.reg("r11") & 0xFFFFFFFF == 0x7E4,
              f"{cpuids} CPUID exits, r11d={regs.reg('r11') & 0xFFFFFFFF:#x}")


def run_seves_campaign(ctx: Context) -> None:
    attacker = ctx.launch("attacker", "sev_es")
    keys = CampaignParams.__dataclass_fields__
    params = CampaignParams(**{k: int(v) for k, v in ctx.p.items() if k in keys})
    with ctx.attack_phase("campaign"):
        cov, rounds = seves_offset_campaign(ctx.hv, attacker, ctx.rng, params)
    curve = cov.cumulative()
    target = float(ctx.p.get("target", 500))
    ctx.check("coverage monotone in N", all(a <= b for a, b in zip(curve, curve[1:])))
    ctx.check(f"coverage after {params.rounds} rounds >= {target:g}", curve[-1] >= target, f"{curve[-1]:.1f}")
    ctx.result.summary.update({
        "coverage": [round(c, 2) for c in curve],
        "captures": [r.captures for r in rounds],
        "npfs": [r.npfs for r in rounds],
    })
    ctx.result.report_lines.append("covered offsets after N rounds:")
    ctx.result.report_lines += [f"  N={i + 1}: {c:.1f}" for i, c in enumerate(curve)]


# -- V3 -------------------------------------------------------------------------

def run_v3_tlb(ctx: Context) -> None:
    victim = ctx.launch("victim", "sev")
    attacker = ctx.launch("attacker", "none")
    fresh = ctx.hv.snapshot(attacker)
    exits = int(ctx.p.get("exits_before_irq", 3))
    prime_victim(ctx.hv, victim)
    with ctx.attack_phase("v3"):
        res = v3_tlb_reuse(ctx.hv, victim, attacker, exits_before_irq=exits)
    ok_regs = bool(res.cpuid_exits) and all(e == {"r11": 0x7E4, "r12": 0x7E4} for e in res.cpuid_exits)
    ctx.check("r11d = r12d = 0x7e4 at CPUID exits", ok_regs, f"{len(res.cpuid_exits)} exits")
    ctx.check("no nested page fault during the attack", res.npf_count == 0, f"npf_count={res.npf_count}")
    ctx.check("attacker ends in shutdown", res.shutdown, res.final_exit)

    ctx.hv.rewind(attacker, fresh)
    prime_victim(ctx.hv, victim)
    with ctx.attack_phase("v3 control"):
        ctl = v3_tlb_reuse(ctx.hv, victim, attacker, exits_before_irq=exits, flush_tlb=True)
    ctx.check("control: flushed TLB gives no CPUID exit", not ctl.cpuid_exits, f"{len(ctl.cpuid_exits)} exits")
    ctx.check("control: registers unchanged", not ctl.registers_changed, str(ctl.regs_after))
    ctx.result.summary.update({"attack": {"cpuid_exits": len(res.cpuid_exits), "npf_count": res.npf_count,
                                          "final": res.final_exit},
                               "control": {"cpuid_exits": len(ctl.cpuid_exits), "final": ctl.final_exit}})


# -- SNP ------------------------------------------------------------------------

def run_snp_v1(ctx: Context) -> None:
    if not ctx.cfg.machine.snp_mode:
        raise SevSimError("snp_v1 needs machine.snp_mode: true")
    total = LeakReport()
    for name, fn in (("v1_read", run_v1_read), ("v1_dump", run_v1_dump), ("seves_v1", run_seves_v1)):
        sub = Context(ScenarioConfig(name, ctx.rng.randrange(1 << 30), ctx.cfg.machine, ctx.cfg.vms,
                                     ctx.cfg.params, source=ctx.cfg.source), ctx.trace)
        fn(sub)
        for c in sub.result.checks:
            ctx.check(c.name if c.name.startswith(name) else f"{name}: {c.name}", c.ok, c.detail)
        for k in ("leaked_bytes", "rmp_fault_count", "attempts"):
            ctx.result.summary[f"{name}.{k}"] = sub.result.summary.get(k)
        total.rmp_fault_count += sub.result.summary.get("rmp_fault_count", 0)
    leaked = sum(ctx.result.summary[f"{n}.leaked_bytes"] for n in ("v1_read", "v1_dump", "seves_v1"))
    ctx.result.report_lines.insert(0, f"{leaked} bytes leaked, RmpFault x{total.rmp_fault_count}")


SCENARIOS: dict[str, Callable[[Context], None]] = {
    "v1_read": run_v1_read,
    "v1_dump": run_v1_dump,
    "v2_decrypt": run_v2_decrypt,
    "v2_encrypt": run_v2_encrypt,
    "v2_locate": run_v2_locate,
    "seves_v1": run_seves_v1,
    "seves_campaign": run_seves_campaign,
    "v3_tlb": run_v3_tlb,
    "snp_v1": run_snp_v1,
}

DESCRIPTIONS = {
    "v1_read": "read victim blocks through nested-fault addresses",
    "v1_dump": "reconstruct the victim's whole guest page table",
    "v2_decrypt": "decrypt victim pages with a load gadget",
    "v2_encrypt": "overwrite victim pages with a store gadget",
    "v2_locate": "find gadget addresses of a running server binary",
    "seves_v1": "block reads against an SEV-ES victim's paused VMSA",
    "seves_campaign": "page offsets reachable from captured SEV-ES RIPs",
    "v3_tlb": "run victim code through its stale TLB entries",
    "snp_v1": "the V1 scenarios with reverse-map checks enabled",
}


def run_scenario(cfg: ScenarioConfig, trace: Optional[Trace] = None) -> tuple[ScenarioResult, Trace]:
    ctx = Context(cfg, trace)
    SCENARIOS[cfg.scenario](ctx)
    return ctx.result, ctx.trace
