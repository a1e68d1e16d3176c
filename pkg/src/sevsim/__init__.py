"""Deterministic simulator of ASID-based memory isolation for encrypted VMs,
with an ASID-reuse attack harness and a binary scanner."""

__version__ = "0.1.0"
