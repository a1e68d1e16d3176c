"""Line-delimited JSON trace of VMRUN/VMEXIT, privileged operations and leaks."""

from __future__ import annotations

import json
from typing import IO, Any, Optional

TRACE_SCHEMA = 1
KINDS = ("HEADER", "VMRUN", "VMEXIT", "HV_OP", "LEAK", "ASSERT")


class Trace:
    def __init__(self, enabled: bool = True):
        self.enabled = enabled
        self.step = 0
        self.records: list[dict[str, Any]] = []
        self.header: Optional[dict[str, Any]] = None

    def set_header(self, **fields: Any) -> None:
        self.header = {"kind": "HEADER", "schema": TRACE_SCHEMA, **fields}

    def emit(self, kind: str, **payload: Any) -> None:
        if kind not in KINDS:
            raise ValueError(f"unknown trace kind {kind}")
        self.step += 1
        if self.enabled:
            self.records.append({"step": self.step, "kind": kind, **payload})

    def count(self, kind: str, **match: Any) -> int:
        return sum(1 for r in self.records
                   if r["kind"] == kind and all(r.get(k) == v for k, v in match.items()))

    def lines(self):
        if self.header is not None:
            yield json.dumps(self.header, sort_keys=True, separators=(",", ":"))
        for r in self.records:
            yield json.dumps(r, sort_keys=True, separators=(",", ":"))

    def dump(self, fh: IO[str]) -> None:
        for line in self.lines():
            fh.write(line + "\n")
