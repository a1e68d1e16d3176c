"""Synthetic guest layouts: victims, attacker VMs, server binaries, task mixes."""

from __future__ import annotations

import random
from typing import Callable, Optional

from .hypervisor.image import GuestImage, ImageBuilder
from .paging import PAGE_SIZE, canonical
from .vm_core.isa import ASM_CPUID, asm_jmp, asm_load, asm_mov_imm32, asm_store

KERNEL_TEXT = 0xFFFFFFFF81000000
IDT_GVA = 0xFFFFFE0000000000
USER_TEXT = 0x0000555555554000
HEAP_BASE = 0x00007F0000000000
DIRECT_MAP = 0xFFFF888000000000

VICTIM_GPA_BASE = 0x0010_0000
ATTACKER_GPA_BASE = 0x4000_0000

# two MOVs, CPUID, jump back to the first MOV
V3_SNIPPET = bytes.fromhex("41bbe407000041bce40700000fa2ebf0")
V3_OFFSET = 0xD83
MOV_R15_2020 = asm_mov_imm32("r15", 2020)          # 41 bf e4 07 00 00
R15_OFFSET = 0x400
LOAD_GADGET = asm_load("rax", "rbx")                # 48 8b 03
STORE_GADGET = asm_store("r12", "rax")              # 49 89 04 24
LOAD_GADGET_OFFSET = 0xCA9A
STORE_GADGET_OFFSET = 0xCA18
HANDLER_MARK = 0xFA17
# load, CPUID, jump back: lets a resumed victim report what it reads at %rbx
VICTIM_READER = LOAD_GADGET + ASM_CPUID + asm_jmp(-(len(LOAD_GADGET) + len(ASM_CPUID) + 2))
VICTIM_READER_OFFSET = 0x600
VICTIM_STORE_OFFSET = 0x700

# first bytes that start a supported instruction (or a REX prefix)
_VALID_FIRST = set(range(0x40, 0x50)) | set(range(0xB8, 0xC0)) | {0x0F, 0xEB}
FILL_BYTES = bytes(b for b in range(256) if b not in _VALID_FIRST)


def filler(rng: random.Random, n: int) -> bytes:
    """Bytes that decode as #UD wherever execution lands in them."""
    return bytes(rng.choices(FILL_BYTES, k=n))


def loop_code(marker: int, movs: int = 1) -> bytes:
    """``movs`` x (mov $marker,%r11d), CPUID, jump back to the start."""
    body = asm_mov_imm32("r11", marker) * movs + ASM_CPUID
    return body + asm_jmp(-(len(body) + 2))


def _plant(page: bytearray, offset: int, code: bytes) -> None:
    page[offset:offset + len(code)] = code


def victim_code_page(rng: random.Random) -> bytes:
    page = bytearray(filler(rng, PAGE_SIZE))
    _plant(page, V3_OFFSET, V3_SNIPPET)
    _plant(page, R15_OFFSET, MOV_R15_2020)
    _plant(page, VICTIM_READER_OFFSET, VICTIM_READER)
    _plant(page, VICTIM_STORE_OFFSET, STORE_GADGET)
    return bytes(page)


def handler_page(rng: random.Random) -> bytes:
    page = bytearray(filler(rng, PAGE_SIZE))
    _plant(page, 0, loop_code(HANDLER_MARK))
    return bytes(page)


def _random_user_page(rng: random.Random) -> int:
    return HEAP_BASE + (rng.randrange(1 << 26) << 12)


def _random_kernel_page(rng: random.Random) -> int:
    return DIRECT_MAP + (rng.randrange(1 << 26) << 12)


def _add_kernel(b: ImageBuilder, rng: random.Random) -> None:
    handler = KERNEL_TEXT + (rng.randrange(1 << 8) << 12)
    b.map_page(handler, handler_page(rng), user=False, glob=True)
    b.set_idt(IDT_GVA, handler)
    b.symbols["handler"] = handler
    b.symbols["idt"] = IDT_GVA


PageContent = Callable[[random.Random, int], bytes]


def random_content(rng: random.Random, _i: int) -> bytes:
    return rng.randbytes(PAGE_SIZE)


def _add_data(b: ImageBuilder, rng: random.Random, n_pages: int, content: PageContent,
              kernel_fraction: float, cluster: int) -> list[int]:
    gvas: list[int] = []
    while len(gvas) < n_pages:
        run = min(n_pages - len(gvas), rng.randint(1, cluster))
        kernel = rng.random() < kernel_fraction
        base = _random_kernel_page(rng) if kernel else _random_user_page(rng)
        for k in range(run):
            gva = base + k * PAGE_SIZE
            if gva in b.mappings:
                break
            b.map_page(gva, content(rng, len(gvas)), user=not kernel, glob=kernel, nx=True)
            gvas.append(gva)
    return gvas


def build_victim(rng: random.Random, n_data_pages: int = 16, *, gpa_base: int = VICTIM_GPA_BASE,
                 content: PageContent = random_content, kernel_fraction: float = 0.25,
                 cluster: int = 64) -> tuple[GuestImage, list[int]]:
    """Code page with the TLB-reuse loop, a kernel handler + IDT, and data pages.

    Returns the image and the gVAs of the data pages in mapping order.
    """
    b = ImageBuilder(gpa_base)
    text = USER_TEXT + (rng.randrange(1 << 16) << 12)
    b.map_page(text, victim_code_page(rng))
    b.symbols["text"] = text
    _add_kernel(b, rng)
    data = _add_data(b, rng, n_data_pages, content, kernel_fraction, cluster)
    return b.build(text + V3_OFFSET, IDT_GVA), data


def build_attacker(rng: random.Random, *, gpa_base: int = ATTACKER_GPA_BASE) -> GuestImage:
    b = ImageBuilder(gpa_base)
    text = USER_TEXT
    page = bytearray(filler(rng, PAGE_SIZE))
    _plant(page, 0, loop_code(0xA77))
    b.map_page(text, bytes(page))
    b.symbols["text"] = text
    _add_kernel(b, rng)
    return b.build(text, IDT_GVA)


def synthetic_binary(rng: random.Random, size: int = 0x10000,
                     plants: Optional[dict[int, bytes]] = None) -> bytes:
    """Executable-looking bytes with code planted at chosen file offsets."""
    if plants is None:
        plants = {LOAD_GADGET_OFFSET: LOAD_GADGET, STORE_GADGET_OFFSET: STORE_GADGET}
    blob = bytearray(filler(rng, size))
    for off, code in plants.items():
        blob[off:off + len(code)] = code
    return bytes(blob)


SERVER_ENTRY_OFFSET = 0x1000


def build_server_victim(rng: random.Random, binary: bytes, image_base: int, n_heap_pages: int = 4,
                        *, gpa_base: int = VICTIM_GPA_BASE) -> GuestImage:
    """A serving process: the binary at the lowest user address, heap above."""
    b = ImageBuilder(gpa_base)
    blob = bytearray(binary)
    entry = loop_code(0x55A)
    blob[SERVER_ENTRY_OFFSET:SERVER_ENTRY_OFFSET + len(entry)] = entry
    b.map_region(image_base, bytes(blob))
    b.symbols["image_base"] = image_base
    heap = image_base + ((len(binary) + 0x10 * PAGE_SIZE) & ~(PAGE_SIZE - 1))
    for i in range(n_heap_pages):
        b.map_page(heap + i * PAGE_SIZE, rng.randbytes(PAGE_SIZE), nx=True)
    b.symbols["heap"] = heap
    _add_kernel(b, rng)
    return b.build(image_base + SERVER_ENTRY_OFFSET, IDT_GVA)


def random_canonical_page(rng: random.Random) -> int:
    return canonical(rng.randrange(1 << 36) << 12)


def build_task_victim(rng: random.Random, n_tasks: int, *, movs: int = 12,
                      gpa_base: int = VICTIM_GPA_BASE) -> tuple[GuestImage, list[int]]:
    """Many small looping tasks spread over the whole canonical space."""
    b = ImageBuilder(gpa_base)
    _add_kernel(b, rng)
    tasks: list[int] = []
    while len(tasks) < n_tasks:
        gva = random_canonical_page(rng)
        if gva in b.mappings:
            continue
        page = bytearray(filler(rng, PAGE_SIZE))
        code = loop_code(0x1000 + len(tasks), movs)
        off = rng.randrange(0, PAGE_SIZE - len(code)) & ~0xF
        _plant(page, off, code)
        b.map_page(gva, bytes(page), user=gva >> 63 == 0)
        tasks.append(gva + off)
    return b.build(tasks[0], IDT_GVA), tasks
