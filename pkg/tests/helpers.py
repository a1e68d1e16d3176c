import random

from sevsim.hypervisor import Hypervisor
from sevsim.vm_core.machine import Machine, MachineConfig, _WalkMem
from sevsim.workloads import build_attacker, build_victim


def make_hv(**cfg):
    cfg.setdefault("tweak_seed", 1)
    cfg.setdefault("key_seed", 2)
    return Hypervisor(Machine(MachineConfig(**cfg)))


def launch_pair(seed=0, n_data=16, victim_cls="sev", attacker_cls="sev", **cfg):
    rng = random.Random(seed)
    hv = make_hv(**cfg)
    vimg, data = build_victim(rng, n_data)
    victim = hv.launch_vm(vimg, victim_cls, "victim")
    attacker = hv.launch_vm(build_attacker(rng), attacker_cls, "attacker")
    return hv, victim, attacker, data


def walk_mem(hv, asid):
    return _WalkMem(hv.machine.cache, asid)


def truth_qword(vm, spa):
    """Plaintext 8 bytes at ``spa`` straight from the launch image."""
    gpfn = {s: g for g, s in vm.backing.items()}[spa >> 12]
    page = vm.ground_truth.pages[gpfn << 12]
    off = spa & 0xFFF
    return int.from_bytes(page[off:off + 8], "little")


def naive_leakable(v, last_level):
    bits = [(v >> i) & 1 for i in range(64)]
    if bits[0] != 1 or any(bits[i] for i in range(48, 63)):
        return False
    return last_level or (bits[7] == 0 and bits[8] == 0)


def mixed_content(fraction=0.25):
    """Data pages mixing random qwords with well-formed entries."""
    def content(rng, _i):
        out = bytearray()
        for _ in range(512):
            r = rng.random()
            if r < fraction:
                flags = rng.getrandbits(12) | 1
                v = (rng.getrandbits(36) << 12) | flags | (rng.getrandbits(1) << 47) | (rng.getrandbits(1) << 63)
            elif r < fraction + 0.05:
                v = 0
            else:
                v = rng.getrandbits(64)
            out += v.to_bytes(8, "little")
        return bytes(out)
    return content
