"""Command line entry point: ``sevsim run|scan|list-scenarios|dump-vmcb``."""

from __future__ import annotations

import argparse
import json
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Optional, Sequence

from .attacks.scenarios import DESCRIPTIONS, SCENARIOS, Context, run_scenario
from .config import ScenarioConfig, load_config, parse_config
from .errors import ConfigParseError, InputTooShort, SevSimError
from .scanner import gadget_hits, scan_pte_fraction

EXIT_OK = 0
EXIT_FAILED = 1
EXIT_CONFIG = 2
EXIT_IO = 3


def _out_path(flag: Optional[str], cfg: ScenarioConfig, key: str, suffix: str, many: bool) -> Optional[Path]:
    if flag:
        p = Path(flag)
        return p / f"{Path(cfg.source or cfg.scenario).stem}{suffix}" if many else p
    if key in cfg.output:
        return cfg.resolve(cfg.output[key])
    return None


def _run_one(path: str, trace: Optional[str], report: Optional[str], result: Optional[str],
             many: bool) -> tuple[str, int, str]:
    try:
        cfg = load_config(path)
    except ConfigParseError as e:
        return path, EXIT_CONFIG, f"config error: {e}"
    try:
        res, tr = run_scenario(cfg)
    except OSError as e:
        return path, EXIT_IO, f"{e.filename or path}: {e.strerror}"
    except SevSimError as e:
        return path, EXIT_FAILED, f"scenario error: {e}"
    outputs = []
    for key, flag, suffix in (("trace", trace, ".trace.jsonl"), ("report", report, ".report.txt"),
                              ("result", result, ".result.json")):
        p = _out_path(flag, cfg, key, suffix, many)
        if p is None:
            continue
        p.parent.mkdir(parents=True, exist_ok=True)
        with open(p, "w") as fh:
            if key == "trace":
                tr.dump(fh)
            elif key == "report":
                fh.write(res.report_text())
            else:
                json.dump(res.to_dict(), fh, indent=2, sort_keys=True)
                fh.write("\n")
        outputs.append(str(p))
    status = EXIT_OK if res.passed else EXIT_FAILED
    failed = [c.name for c in res.checks if not c.ok]
    line = f"{'PASS' if res.passed else 'FAIL'} {cfg.scenario} ({len(res.checks)} checks)"
    if failed:
        line += " failed: " + "; ".join(failed)
    if outputs:
        line += " -> " + ", ".join(outputs)
    return path, status, line


def cmd_run(args: argparse.Namespace) -> int:
    many = len(args.configs) > 1
    jobs = [(c, args.trace, args.report, args.result, many) for c in args.configs]
    if args.jobs > 1 and many:
        with ProcessPoolExecutor(max_workers=args.jobs) as ex:
            results = list(ex.map(_run_one, *zip(*jobs)))
    else:
        results = [_run_one(*j) for j in jobs]
    for path, status, line in results:
        print(f"{path}: {line}", file=sys.stdout if status == EXIT_OK else sys.stderr)
    codes = {status for _, status, _ in results}
    if EXIT_CONFIG in codes:
        return EXIT_CONFIG
    return max(codes)


def _scan_targets(paths: Sequence[str]) -> list[Path]:
    out: list[Path] = []
    for p in map(Path, paths):
        if p.is_dir():
            out.extend(sorted(f for f in p.rglob("*") if f.is_file()))
        else:
            out.append(p)
    return out


def cmd_scan(args: argparse.Namespace) -> int:
    if not args.pte and not args.gadget:
        args.pte = True
    status = EXIT_OK
    fh = open(args.output, "w") if args.output else sys.stdout
    try:
        for f in _scan_targets(args.paths):
            try:
                data = f.read_bytes()
            except OSError as e:
                print(f"{f}: {e.strerror}", file=sys.stderr)
                status = EXIT_IO
                continue
            rec: dict = {"file": str(f), "bytes": len(data)}
            if args.pte:
                try:
                    rep = scan_pte_fraction(data, args.last_level, str(f))
                except InputTooShort as e:
                    print(str(e), file=sys.stderr)
                    status = EXIT_FAILED
                    continue
                rec.update(rep.to_record())
                if not args.offsets:
                    rec.pop("leakable_offsets")
                rec.pop("gadget_hits")
            if args.gadget:
                rec["gadget_hits"] = [{"offset": h.offset, "pattern": h.pattern_id}
                                      for h in gadget_hits(data, args.gadget)]
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    finally:
        if fh is not sys.stdout:
            fh.close()
    return status


def cmd_list(_args: argparse.Namespace) -> int:
    for name in SCENARIOS:
        print(f"{name:16s} {DESCRIPTIONS[name]}")
    return EXIT_OK


def cmd_dump_vmcb(args: argparse.Namespace) -> int:
    try:
        if args.config:
            cfg = load_config(args.config)
        else:
            cfg = parse_config({"schema": 1, "scenario": "v1_read",
                                "vms": [{"id": "victim", "role": "victim", "class": "sev"}]})
    except ConfigParseError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    ctx = Context(cfg)
    role = args.role
    vm = ctx.launch(role)
    blob = vm.vmcb.to_bytes()
    if args.output:
        Path(args.output).write_bytes(blob)
    else:
        sys.stdout.buffer.write(blob)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="sevsim", description="SEV ASID-isolation simulator and attack harness")
    sub = ap.add_subparsers(dest="cmd", required=True)

    r = sub.add_parser("run", help="run scenario configs")
    r.add_argument("configs", nargs="+")
    r.add_argument("--trace", help="trace output (a directory when several configs are given)")
    r.add_argument("--report", help="human-readable report output")
    r.add_argument("--result", help="machine-readable result output")
    r.add_argument("--jobs", type=int, default=1, help="run configs in parallel")
    r.set_defaults(fn=cmd_run)

    s = sub.add_parser("scan", help="scan binaries for PTE-shaped blocks or byte patterns")
    s.add_argument("paths", nargs="+", help="files or directories")
    s.add_argument("--pte", action="store_true", help="count leakable 8-byte blocks")
    s.add_argument("--last-level", action="store_true", help="apply the last-level entry rules")
    s.add_argument("--gadget", nargs="+", metavar="HEX", help="hex byte patterns, ?? as wildcard")
    s.add_argument("--offsets", action="store_true", help="include every leakable offset")
    s.add_argument("--output", help="write records here instead of stdout")
    s.set_defaults(fn=cmd_scan)

    ls = sub.add_parser("list-scenarios", help="list scenario names")
    ls.set_defaults(fn=cmd_list)

    d = sub.add_parser("dump-vmcb", help="write the VMCB of a freshly launched VM")
    d.add_argument("config", nargs="?")
    d.add_argument("--role", default="victim", choices=("victim", "attacker"))
    d.add_argument("-o", "--output")
    d.set_defaults(fn=cmd_dump_vmcb)
    return ap


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
