"""Platform management: ASID pools, VM lifecycle, exit dispatch, nPT knobs."""

from .core import Dispatch, GuestVm, Hypervisor
from .image import GuestImage, ImageBuilder, idt_gate
from .pools import AsidPools, SevClass
from .rmp import Rmp, RmpEntry

__all__ = ["AsidPools", "Dispatch", "GuestImage", "GuestVm", "Hypervisor", "ImageBuilder",
           "Rmp", "RmpEntry", "SevClass", "idt_gate"]
