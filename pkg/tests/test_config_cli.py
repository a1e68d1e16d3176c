import json
import random
import subprocess
import sys
from pathlib import Path

import pytest

from sevsim.attacks.scenarios import run_scenario
from sevsim.cli import EXIT_CONFIG, EXIT_FAILED, EXIT_IO, EXIT_OK, main
from sevsim.config import load_config, parse_config
from sevsim.errors import ConfigParseError
from sevsim.vm_core import Vmcb
from sevsim.workloads import synthetic_binary

ROOT = Path(__file__).resolve().parents[1]
CONFIGS = sorted((ROOT / "configs").glob("*.yaml"))

BASE = {"schema": 1, "scenario": "v1_read", "vms": [{"role": "victim"}, {"role": "attacker"}]}


# -- config --------------------------------------------------------------------------

def test_parse_defaults():
    cfg = parse_config(BASE, env={})
    assert cfg.seed == 0 and cfg.machine.max_sev == 15
    assert cfg.vm("victim").sev_class == "sev" and cfg.vm("attacker").generator == {"kind": "attacker"}


@pytest.mark.parametrize("doc", [
    [],
    {**BASE, "schema": 2},
    {**BASE, "scenario": "nope"},
    {**BASE, "extra": 1},
    {**BASE, "seed": "x"},
    {**BASE, "machine": {"bogus": 1}},
    {**BASE, "vms": [{"role": "bystander"}]},
    {**BASE, "vms": [{"role": "victim", "class": "tdx"}]},
    {**BASE, "vms": [{"role": "victim"}, {"role": "victim"}]},
    {**BASE, "vms": [{"role": "victim", "generator": {"kind": "elf"}}]},
])
def test_parse_rejects(doc):
    with pytest.raises(ConfigParseError):
        parse_config(doc, env={})


def test_seed_env_override():
    cfg = parse_config({**BASE, "seed": 3, "machine": {"tweak_seed": 9}}, env={"SEED": "0x10"})
    assert (cfg.seed, cfg.machine.tweak_seed, cfg.machine.key_seed) == (16, 16, 17)
    with pytest.raises(ConfigParseError):
        parse_config(BASE, env={"SEED": "abc"})


def test_load_config_errors(tmp_path):
    with pytest.raises(ConfigParseError):
        load_config(tmp_path / "missing.yaml", env={})
    bad = tmp_path / "bad.yaml"
    bad.write_text("schema: [1\n")
    with pytest.raises(ConfigParseError):
        load_config(bad, env={})


def test_shipped_configs_parse():
    assert len(CONFIGS) == 9
    for p in CONFIGS:
        load_config(p, env={})


# -- determinism ----------------------------------------------------------------------

def _trace_text(cfg):
    _, tr = run_scenario(cfg)
    return "\n".join(tr.lines())


def test_trace_byte_deterministic():
    cfg = load_config(ROOT / "configs" / "v1_dump.yaml", env={})
    a, b = _trace_text(cfg), _trace_text(cfg)
    assert a == b
    recs = [json.loads(line) for line in a.splitlines()]
    assert recs[0]["kind"] == "HEADER"
    steps = [r["step"] for r in recs[1:]]
    assert steps == sorted(set(steps))


def test_trace_deterministic_across_processes(tmp_path):
    cfg = ROOT / "configs" / "v3_tlb.yaml"
    outs = []
    for hashseed in ("1", "2"):
        out = tmp_path / f"t{hashseed}.jsonl"
        subprocess.run([sys.executable, "-m", "sevsim", "run", str(cfg), "--trace", str(out)], check=True,
                       env={"PYTHONHASHSEED": hashseed, "PATH": "/usr/bin:/bin"}, capture_output=True)
        outs.append(out.read_bytes())
    assert outs[0] == outs[1]


def test_every_privileged_mutation_traced():
    cfg = load_config(ROOT / "configs" / "v1_read.yaml", env={})
    res, tr = run_scenario(parse_config({**cfg.to_dict(), "params": {"blocks": 20}}, env={}))
    ops = [r for r in tr.records if r["kind"] == "HV_OP" and r["op"] == "set_asid"]
    assert ops and all({"vm", "field", "old", "new"} <= r.keys() for r in ops)


# -- cli ------------------------------------------------------------------------------

@pytest.mark.parametrize("cfg", [p.name for p in CONFIGS])
def test_shipped_config_exits_zero(cfg, tmp_path, capsys):
    rc = main(["run", str(ROOT / "configs" / cfg), "--trace", str(tmp_path / "t.jsonl"),
               "--report", str(tmp_path / "r.txt"), "--result", str(tmp_path / "r.json")])
    assert rc == EXIT_OK, capsys.readouterr().err
    result = json.loads((tmp_path / "r.json").read_text())
    assert result["passed"] and result["checks"]
    assert (tmp_path / "r.txt").read_text().startswith("scenario:")
    assert (tmp_path / "t.jsonl").stat().st_size > 0


def test_dump_report_has_tree(tmp_path):
    assert main(["run", str(ROOT / "configs" / "v1_dump.yaml"), "--report", str(tmp_path / "r.txt")]) == 0
    text = (tmp_path / "r.txt").read_text()
    assert "reconstructed guest page table:" in text and "L4 table" in text


def test_snp_report_line(tmp_path):
    assert main(["run", str(ROOT / "configs" / "snp_v1.yaml"), "--report", str(tmp_path / "r.txt")]) == 0
    text = (tmp_path / "r.txt").read_text()
    assert "0 bytes leaked, RmpFault x" in text


def test_malformed_config_exit_2(tmp_path, capsys):
    bad = tmp_path / "bad.yaml"
    bad.write_text("schema: 1\nscenario: v1_read\nbogus: 1\n")
    assert main(["run", str(bad)]) == EXIT_CONFIG
    assert "config error" in capsys.readouterr().err


def test_missing_image_is_io_error(tmp_path):
    cfg = tmp_path / "c.yaml"
    cfg.write_text("schema: 1\nscenario: v2_locate\nvms:\n"
                   "  - {role: victim, generator: {kind: server, binary: nothere.bin}}\n"
                   "  - {role: attacker}\n")
    assert main(["run", str(cfg)]) == EXIT_IO


def test_failed_assertion_exit_1(tmp_path):
    cfg = tmp_path / "c.yaml"
    cfg.write_text("schema: 1\nscenario: seves_campaign\nvms: [{role: attacker, class: sev_es}]\n"
                   "params: {rounds: 1, round_steps: 200, n_tasks: 2, target: 600}\n")
    assert main(["run", str(cfg)]) == EXIT_FAILED


def test_batch_jobs(tmp_path):
    cfgs = [str(ROOT / "configs" / n) for n in ("v1_read.yaml", "v3_tlb.yaml")]
    assert main(["run", *cfgs, "--jobs", "2", "--result", str(tmp_path)]) == 0
    assert sorted(p.name for p in tmp_path.iterdir()) == ["v1_read.result.json", "v3_tlb.result.json"]


def test_list_scenarios(capsys):
    assert main(["list-scenarios"]) == 0
    names = [line.split()[0] for line in capsys.readouterr().out.splitlines()]
    assert names == ["v1_read", "v1_dump", "v2_decrypt", "v2_encrypt", "v2_locate",
                     "seves_v1", "seves_campaign", "v3_tlb", "snp_v1"]


def test_dump_vmcb(tmp_path):
    out = tmp_path / "vmcb.bin"
    assert main(["dump-vmcb", str(ROOT / "configs" / "v1_read.yaml"), "-o", str(out)]) == 0
    blob = out.read_bytes()
    assert len(blob) == 0x1000
    v = Vmcb.from_bytes(blob)
    assert v.control.asid == 5 and v.control.sev and not v.control.sev_es
    assert int.from_bytes(blob[0x58:0x5C], "little") == 5


def test_scan_pte_and_gadget(tmp_path, capsys):
    f = tmp_path / "fixture.bin"
    f.write_bytes(synthetic_binary(random.Random(0)))
    assert main(["scan", str(f), "--pte"]) == 0
    rec = json.loads(capsys.readouterr().out)
    assert rec["total_blocks"] == 8192 and "fraction" in rec and "leakable_offsets" not in rec
    assert main(["scan", str(f), "--gadget", "488b03"]) == 0
    rec = json.loads(capsys.readouterr().out)
    assert 0xCA9A in [h["offset"] for h in rec["gadget_hits"]]


def test_scan_directory(tmp_path, capsys):
    d = tmp_path / "corpus"
    (d / "sub").mkdir(parents=True)
    (d / "a.bin").write_bytes(bytes(64))
    (d / "sub" / "b.bin").write_bytes((1).to_bytes(8, "little") * 4)
    out = tmp_path / "out.jsonl"
    assert main(["scan", str(d), "--pte", "--last-level", "--offsets", "--output", str(out)]) == 0
    recs = [json.loads(line) for line in out.read_text().splitlines()]
    assert [Path(r["file"]).name for r in recs] == ["a.bin", "b.bin"]
    assert recs[1]["leakable_offsets"] == [0, 8, 16, 24] and recs[1]["fraction"] == 1.0


def test_scan_errors(tmp_path):
    short = tmp_path / "s.bin"
    short.write_bytes(b"abc")
    assert main(["scan", str(short)]) == EXIT_FAILED
    assert main(["scan", str(tmp_path / "none.bin")]) == EXIT_IO
