"""Attack procedures against the simulated platform and the scenarios that
drive them from a config."""

from .report import RMP_BLOCKED, UNLEAKABLE, LeakedBlock, LeakReport, OffsetCoverage
from .seves import SevEsReader, expected_coverage, seves_offset_campaign, seves_v1_read, uniform_rip_coverage
from .v1 import DumpResult, TablePath, V1Reader, v1_dump_page_table, v1_read_block
from .v2 import MomentaryExec, PathResolver, locate_gadgets, v2_decrypt_page, v2_encrypt_page, v2_momentary_exec
from .v3 import V3Result, prime_victim, v3_tlb_reuse

__all__ = [
    "RMP_BLOCKED", "UNLEAKABLE", "DumpResult", "LeakReport", "LeakedBlock", "MomentaryExec",
    "OffsetCoverage", "PathResolver", "SevEsReader", "TablePath", "V1Reader", "V3Result",
    "expected_coverage", "locate_gadgets", "prime_victim", "seves_offset_campaign", "seves_v1_read",
    "uniform_rip_coverage", "v1_dump_page_table", "v1_read_block", "v2_decrypt_page",
    "v2_encrypt_page", "v2_momentary_exec", "v3_tlb_reuse",
]
