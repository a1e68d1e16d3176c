import random

import pytest

from sevsim.errors import IllegalAsidRange, PoolExhausted, VmCrashed
from sevsim.hypervisor import AsidPools, Rmp, SevClass
from sevsim.errors import NestedPageFault
from sevsim.vm_core.machine import EXIT_CPUID, EXIT_NPF, EXIT_SHUTDOWN
from sevsim.vm_core.vmcb import TLB_FLUSH_ALL, TLB_FLUSH_ASID
from sevsim.workloads import build_attacker, build_victim
from helpers import launch_pair, make_hv


def test_pool_ranges():
    p = AsidPools()
    assert p.range_for(SevClass.SEV_ES) == range(1, 5)
    assert p.range_for(SevClass.SEV) == range(5, 16)
    assert p.range_for(SevClass.NONE) == range(16, 32769)
    assert 0 not in p.range_for(SevClass.SEV_ES)


def test_inconsistent_limits_rejected():
    with pytest.raises(IllegalAsidRange):
        AsidPools(max_all=10, max_sev=15, min_sev_non_es=5)


def test_first_asids():
    hv = make_hv()
    r = random.Random(0)
    assert hv.launch_vm(build_victim(r)[0], "sev").asid == 5
    assert hv.launch_vm(build_victim(r)[0], "sev_es").asid == 1
    assert hv.launch_vm(build_victim(r)[0], "sev_es").asid == 2
    assert hv.launch_vm(build_attacker(r), "none").asid == 16


def test_pool_exhausted():
    hv = make_hv()
    img = build_attacker(random.Random(0))
    for _ in range(4):
        hv.launch_vm(img, "sev_es")
    with pytest.raises(PoolExhausted):
        hv.launch_vm(img, "sev_es")


def test_no_duplicate_live_asids():
    hv = make_hv()
    img = build_attacker(random.Random(0))
    vms = [hv.launch_vm(img, c) for c in ["sev"] * 11 + ["sev_es"] * 4 + ["none"] * 5]
    assert len({v.asid for v in vms}) == len(vms)


def test_relaunch_after_teardown_flushes():
    hv = make_hv()
    img = build_attacker(random.Random(0))
    vm = hv.launch_vm(img, "sev", "a")
    hv.teardown(vm)
    vm2 = hv.launch_vm(img, "sev", "b")
    # a fresh ASID is preferred over one awaiting a flush
    assert vm2.asid == 6
    for _ in range(9):
        hv.launch_vm(img, "sev")
    reuse = hv.launch_vm(img, "sev", "c")
    assert reuse.asid == 5 and hv.machine.engine.owner(5) == "c"
    ops = [r["op"] for r in hv.trace.records if r.get("kind") == "HV_OP"]
    assert "wbinvd" in ops and "df_flush" in ops


def test_default_exit_policy():
    hv, victim, _, _ = launch_pair(seed=1)
    ex = hv.run(victim)
    assert ex.code == EXIT_CPUID
    d = hv.handle_exit(victim, ex)
    assert d.action == "emulated"
    victim.vmcb.save.regs[0] = 0x8000001F
    ex = hv.run(victim)
    hv.handle_exit(victim, ex)
    hv.clear_present_bits(victim)
    hv.request_tlb_flush(victim, TLB_FLUSH_ASID)
    ex = hv.run(victim)
    assert ex.code == EXIT_NPF
    assert hv.handle_exit(victim, ex).action == "mapped"
    assert victim.npt.entry(ex.exitinfo2 >> 12).present


def test_cpuid_emulation_reports_pools():
    hv, victim, _, _ = launch_pair(seed=1)
    ex = hv.run(victim)
    victim.vmcb.save.regs[0] = 0x8000001F
    hv.handle_exit(victim, ex)
    s = victim.vmcb.save
    assert (s.reg("rcx"), s.reg("rdx")) == (15, 5)


def test_shutdown_marks_crashed():
    hv, victim, attacker, _ = launch_pair(seed=2)
    hv.set_asid(attacker, victim.asid)
    hv.request_tlb_flush(attacker, TLB_FLUSH_ALL)
    ex = hv.run(attacker)
    assert hv.handle_exit(attacker, ex).action == "crashed"
    with pytest.raises(VmCrashed):
        hv.run(attacker)
    with pytest.raises(VmCrashed):
        hv.capture_gcr3(attacker)


def test_clear_present_then_resume_faults_on_gcr3():
    hv, victim, _, _ = launch_pair(seed=3)
    hv.run(victim)
    hv.clear_present_bits(victim)
    hv.request_tlb_flush(victim, TLB_FLUSH_ASID)
    ex = hv.run(victim)
    assert ex.code == EXIT_NPF and ex.exitinfo2 & ~0xFFF == victim.ground_truth.gcr3


def test_set_asid_is_silent_and_traced():
    hv, victim, attacker, _ = launch_pair(seed=3)
    hv.set_asid(attacker, victim.asid)
    assert attacker.vmcb.control.asid == victim.asid
    rec = [r for r in hv.trace.records if r.get("op") == "set_asid"][-1]
    assert rec["old"] == attacker.asid and rec["new"] == victim.asid


def test_set_sev_bit_range_checked_at_vmrun():
    hv, victim, attacker, _ = launch_pair(seed=3, victim_cls="sev_es", attacker_cls="none")
    hv.set_asid(attacker, victim.asid)
    hv.set_sev_bit(attacker, "sev")   # accepted here, ASID 1 is not a plain-SEV id
    with pytest.raises(IllegalAsidRange):
        hv.run(attacker)
    hv.set_sev_bit(attacker, "sev_es")
    hv.set_vmsa_ptr(attacker, victim.vmsa_ptr)
    hv.request_tlb_flush(attacker, TLB_FLUSH_ASID)
    ex = hv.run(attacker)
    assert not ex.integrity_error


def test_capture_gcr3_50_victims():
    ok = 0
    for seed in range(50):
        hv, victim, _, _ = launch_pair(seed=seed)
        if seed % 2:
            hv.handle_exit(victim, hv.run(victim))
        ok += hv.capture_gcr3(victim) == victim.ground_truth.gcr3
        assert all(e.present for e in victim.npt.entries.values())
    assert ok == 50


def test_rmp_checks():
    rmp = Rmp()
    rmp.assign(0x5000, 3, 0x9000)
    rmp.check(0x5008, 3, 0x9008)
    with pytest.raises(NestedPageFault) as ei:
        rmp.check(0x5008, 3, 0xA008)
    assert ei.value.rmp
    with pytest.raises(NestedPageFault):
        rmp.check(0x5008, 4, 0x9008)
    rmp.assign(0x6000, 3, None)
    assert rmp.check_vmsa(0x6000, 3) and not rmp.check_vmsa(0x5000, 3)


def test_snp_victim_runs_and_remap_is_rmp_fault():
    hv, victim, attacker, data = launch_pair(seed=5, snp_mode=True)
    assert hv.run(victim).code == EXIT_CPUID
    hv.clear_present_bits(attacker)
    spfn = victim.backing[victim.ground_truth.mappings[data[0]] >> 12]
    hv.remap_gcr3(attacker, spfn)
    hv.set_asid(attacker, victim.asid)
    hv.request_tlb_flush(attacker, TLB_FLUSH_ASID)
    ex = hv.run(attacker)
    assert ex.code == EXIT_NPF and ex.is_rmp_fault


def test_snp_vmsa_with_matching_asid_passes():
    hv, victim, attacker, _ = launch_pair(seed=6, victim_cls="sev_es", attacker_cls="sev_es", snp_mode=True)
    hv.set_vmsa_ptr(attacker, victim.vmsa_ptr)
    hv.set_asid(attacker, victim.asid)
    hv.request_tlb_flush(attacker, TLB_FLUSH_ASID)
    ex = hv.run(attacker)
    assert not ex.integrity_error and ex.code != -1


def test_snapshot_rewind():
    hv, victim, attacker, _ = launch_pair(seed=7)
    blob = hv.snapshot(attacker)
    hv.set_asid(attacker, victim.asid)
    hv.request_tlb_flush(attacker, TLB_FLUSH_ALL)
    assert hv.run(attacker).code == EXIT_SHUTDOWN
    hv.rewind(attacker, blob)
    assert not attacker.crashed and attacker.vmcb.control.asid == attacker.asid
    assert hv.run(attacker).code == EXIT_CPUID
