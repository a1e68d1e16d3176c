"""Scenario configuration files (YAML, schema version 1)."""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

import yaml

from .errors import ConfigParseError
from .vm_core.machine import MachineConfig

SCHEMA_VERSION = 1
SCENARIOS = ("v1_read", "v1_dump", "v2_decrypt", "v2_encrypt", "v2_locate",
             "seves_v1", "seves_campaign", "v3_tlb", "snp_v1")
GENERATORS = ("victim", "attacker", "server", "tasks")
CLASSES = ("none", "sev", "sev_es")
ROLES = ("victim", "attacker")

_MACHINE_KEYS = {"tweak_seed", "key_seed", "snp_mode", "max_all", "max_sev", "min_sev_non_es",
                 "step_budget"}
_TOP_KEYS = {"schema", "scenario", "seed", "machine", "vms", "params", "output", "description"}


@dataclass
class VmSpec:
    id: str
    role: str
    sev_class: str
    generator: dict[str, Any] = field(default_factory=dict)


@dataclass
class ScenarioConfig:
    scenario: str
    seed: int = 0
    machine: MachineConfig = field(default_factory=MachineConfig)
    vms: list[VmSpec] = field(default_factory=list)
    params: dict[str, Any] = field(default_factory=dict)
    output: dict[str, str] = field(default_factory=dict)
    source: Optional[str] = None

    def vm(self, role: str) -> VmSpec:
        for v in self.vms:
            if v.role == role:
                return v
        raise ConfigParseError(f"no VM with role {role!r}")

    def resolve(self, path: str) -> Path:
        """Paths in a config are relative to the config file."""
        p = Path(path)
        if not p.is_absolute() and self.source:
            p = Path(self.source).parent / p
        return p

    def to_dict(self) -> dict[str, Any]:
        m = self.machine
        return {
            "schema": SCHEMA_VERSION,
            "scenario": self.scenario,
            "seed": self.seed,
            "machine": {k: getattr(m, k) for k in sorted(_MACHINE_KEYS)},
            "vms": [{"id": v.id, "role": v.role, "class": v.sev_class, "generator": v.generator}
                    for v in self.vms],
            "params": self.params,
        }


def _fail(where: str, msg: str) -> ConfigParseError:
    return ConfigParseError(f"{where}: {msg}")


def _int(where: str, v: Any) -> int:
    if isinstance(v, bool) or not isinstance(v, int):
        raise _fail(where, f"expected an integer, got {v!r}")
    return v


def _parse_vm(i: int, raw: Any) -> VmSpec:
    where = f"vms[{i}]"
    if not isinstance(raw, dict):
        raise _fail(where, "expected a mapping")
    unknown = set(raw) - {"id", "role", "class", "generator"}
    if unknown:
        raise _fail(where, f"unknown keys {sorted(unknown)}")
    role = raw.get("role")
    if role not in ROLES:
        raise _fail(where, f"role must be one of {ROLES}")
    cls = str(raw.get("class", "sev")).lower().replace("-", "_")
    if cls not in CLASSES:
        raise _fail(where, f"class must be one of {CLASSES}")
    gen = raw.get("generator", {"kind": role})
    if not isinstance(gen, dict) or gen.get("kind", role) not in GENERATORS:
        raise _fail(where, f"generator.kind must be one of {GENERATORS}")
    gen = {"kind": role, **gen}
    return VmSpec(str(raw.get("id", role)), role, cls, gen)


def parse_config(doc: Any, source: Optional[str] = None, env: Optional[dict[str, str]] = None) -> ScenarioConfig:
    where = source or "<config>"
    if not isinstance(doc, dict):
        raise _fail(where, "top level must be a mapping")
    unknown = set(doc) - _TOP_KEYS
    if unknown:
        raise _fail(where, f"unknown keys {sorted(unknown)}")
    if doc.get("schema") != SCHEMA_VERSION:
        raise _fail(where, f"schema must be {SCHEMA_VERSION}")
    scenario = doc.get("scenario")
    if scenario not in SCENARIOS:
        raise _fail(where, f"scenario must be one of {SCENARIOS}")
    seed = _int(f"{where}: seed", doc.get("seed", 0))

    mraw = doc.get("machine", {}) or {}
    if not isinstance(mraw, dict):
        raise _fail(where, "machine must be a mapping")
    bad = set(mraw) - _MACHINE_KEYS
    if bad:
        raise _fail(where, f"unknown machine keys {sorted(bad)}")
    mkw: dict[str, Any] = {}
    for k, v in mraw.items():
        mkw[k] = bool(v) if k == "snp_mode" else _int(f"{where}: machine.{k}", v)

    env = os.environ if env is None else env
    if env.get("SEED"):
        try:
            s = int(env["SEED"], 0)
        except ValueError:
            raise _fail("SEED", f"not an integer: {env['SEED']!r}") from None
        seed, mkw["tweak_seed"], mkw["key_seed"] = s, s, s + 1

    vms_raw = doc.get("vms", [])
    if not isinstance(vms_raw, list):
        raise _fail(where, "vms must be a list")
    vms = [_parse_vm(i, v) for i, v in enumerate(vms_raw)]
    if len({v.id for v in vms}) != len(vms):
        raise _fail(where, "duplicate VM ids")

    params = doc.get("params", {}) or {}
    output = doc.get("output", {}) or {}
    if not isinstance(params, dict) or not isinstance(output, dict):
        raise _fail(where, "params and output must be mappings")
    return ScenarioConfig(scenario, seed, MachineConfig(**mkw), vms, dict(params),
                          {k: str(v) for k, v in output.items()}, source)


def load_config(path: "str | Path", env: Optional[dict[str, str]] = None) -> ScenarioConfig:
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise ConfigParseError(f"{path}: {e.strerror}") from None
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as e:
        raise ConfigParseError(f"{path}: {e}") from None
    return parse_config(doc, str(path), env)
