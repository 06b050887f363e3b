"""Command-line driver.

    curesim run FILE.mir [--mode M] [--taint] [--cmt-ways N] [--lfsr-seed S]
                         [--uarch] [--json OUT] [--input TEXT | --input-hex HEX]
                         [--expect FILE] [--emit-taint OUT]
    curesim corpus DIR [--json OUT] [--uarch]
    curesim instrument FILE.mir [--mode M] [--taint] [-o OUT]

Every flag falls back to a CURESIM_<FLAG> environment variable.  Exit codes:
0 success, 1 expectation mismatch or hard abort, 2 usage or parse error.
"""

import argparse
import json
import os
import sys
import time
from pathlib import Path

from .instrument import instrument, make_plan
from .machine import MODES, RESIZED, SPATIAL, TEMPORAL, MachineConfig, run
from .mini_ir import IrError, format_program, parse_file

SCHEMA = "curesim.report/1"
CORPUS_SCHEMA = "curesim.corpus/1"
DETECTION_KINDS = (SPATIAL, TEMPORAL)
CATEGORIES = (
    "stack-overflow",
    "heap-overflow",
    "buffer-underwrite",
    "buffer-overread",
    "buffer-underread",
    "double-free",
    "use-after-free",
)


class UsageError(Exception):
    pass


def _env(name, default=None):
    return os.environ.get("CURESIM_" + name.upper().replace("-", "_"), default)


def _env_flag(name):
    return _env(name, "").lower() in ("1", "true", "yes", "on")


def _int(text):
    return int(text, 0)


def load_expect(path):
    with open(path, encoding="utf-8") as f:
        data = json.load(f)
    if "modes" not in data:
        raise UsageError(f"{path}: expectation file has no 'modes'")
    return data


def expect_input(expect):
    if expect is None:
        return None
    if "input_hex" in expect:
        return bytes.fromhex(expect["input_hex"])
    if "input" in expect:
        return expect["input"].encode("latin-1")
    return None


def check_expectation(report, expect):
    """Compare a report with the `.expect` entry for its mode; returns mismatch strings."""
    mode = report["mode"]
    want = expect["modes"].get(mode)
    if want is None:
        return [f"no expectation for mode {mode}"]
    got = report["violationCounts"]
    problems = []
    kinds = set(DETECTION_KINDS) | set(want)
    for kind in sorted(kinds):
        if kind == RESIZED and kind not in want:
            continue
        if got.get(kind, 0) != want.get(kind, 0):
            problems.append(f"{kind}: expected {want.get(kind, 0)}, got {got.get(kind, 0)}")
    status = expect.get("exit", "ok")
    if report["exit"]["status"] != status:
        problems.append(f"exit: expected {status}, got {report['exit']['status']}")
    if "output" in expect and report["output"] != expect["output"].encode("latin-1").hex():
        problems.append("output differs")
    if report.get("protected") is not None and "protected" in expect:
        if sorted(expect["protected"]) != report["protected"]:
            problems.append(f"protected: expected {sorted(expect['protected'])}, got {report['protected']}")
    return problems


def run_program(program, name, mode="dpt-f", taint=False, cmt_ways=4, lfsr_seed=0xACE1,
                uarch=False, data=b"", emit_taint=None):
    """Instrument and execute; returns the JSON-ready report."""
    plan, graph = make_plan(program, mode, taint=taint)
    if emit_taint is not None and graph is not None:
        emit_taint.update(graph.to_dict())
    code = instrument(program, plan, graph)
    config = MachineConfig(
        enable_dpt=mode != "off",
        mode=mode,
        cmt_ways=cmt_ways,
        lfsr_seed=lfsr_seed,
        uarch_enabled=uarch,
        input=data,
    )
    result = run(code, config)
    return {
        "schema": SCHEMA,
        "program": name,
        "mode": mode,
        "taint": taint,
        "config": config.echo(),
        "protected": sorted(plan.protected_sites(program)) if taint else None,
        "violations": [v.to_dict() for v in result.violations],
        "violationCounts": result.kinds(),
        "stats": result.stats.to_dict(),
        "exit": result.exit,
        "output": result.output.hex(),
    }


def dumps(report):
    return json.dumps(report, sort_keys=True, indent=2) + "\n"


def _write(path, text):
    if path == "-":
        sys.stdout.write(text)
    else:
        Path(path).write_text(text, encoding="utf-8")


def _parse(path):
    try:
        return parse_file(path)
    except IrError as e:
        raise UsageError(e.format(str(path))) from None
    except OSError as e:
        raise UsageError(f"{path}: {e.strerror}") from None


def _summary(report):
    counts = report["violationCounts"]
    parts = [f"{k}={counts[k]}" for k in sorted(counts)] or ["no violations"]
    return f"{report['program']} [{report['mode']}] exit={report['exit']['status']} " + " ".join(parts)


def cmd_run(args):
    program = _parse(args.file)
    expect = load_expect(args.expect) if args.expect else None
    if args.input_hex is not None:
        data = bytes.fromhex(args.input_hex)
    elif args.input is not None:
        data = args.input.encode("latin-1")
    else:
        data = expect_input(expect) or b""
    graph = {} if args.emit_taint else None
    report = run_program(
        program, Path(args.file).name, args.mode, args.taint, args.cmt_ways,
        args.lfsr_seed, args.uarch, data, graph,
    )
    if args.emit_taint:
        _write(args.emit_taint, json.dumps(graph, sort_keys=True, indent=2) + "\n")
    status = 0 if report["exit"]["status"] == "ok" else 1
    if expect is not None:
        problems = check_expectation(report, expect)
        report["expectation"] = {"file": Path(args.expect).name, "pass": not problems, "mismatches": problems}
        status = 1 if problems else 0
        for p in problems:
            print(f"{args.file}: {p}", file=sys.stderr)
    if args.json:
        _write(args.json, dumps(report))
    sys.stdout.write(_output_text(report) if args.json != "-" else "")
    print(_summary(report), file=sys.stderr)
    return status


def _output_text(report):
    return bytes.fromhex(report["output"]).decode("latin-1")


def corpus_results(directory, uarch=False):
    """Run every program with a `.expect` file under each mode it lists."""
    rows = []
    for path in sorted(Path(directory).glob("*.mir")):
        exp_path = path.with_suffix(".expect")
        if not exp_path.exists():
            continue
        expect = load_expect(exp_path)
        program = _parse(path)
        data = expect_input(expect) or b""
        for mode in sorted(expect["modes"]):
            taint = mode.endswith("+taint")
            base_mode = mode[: -len("+taint")] if taint else mode
            report = run_program(program, path.name, base_mode, taint, uarch=uarch, data=data)
            report["mode"] = mode
            problems = check_expectation(report, expect)
            rows.append({
                "program": path.name,
                "category": expect.get("category", "other"),
                "bug": bool(expect.get("bug", True)),
                "mode": mode,
                "counts": report["violationCounts"],
                "exit": report["exit"]["status"],
                "pass": not problems,
                "mismatches": problems,
            })
    return rows


def detection_matrix(rows):
    """category -> {mode: (detected, buggy programs)}, plus false alarms on twins."""
    matrix = {}
    for r in rows:
        cell = matrix.setdefault(r["category"], {"programs": set(), "twins": set(), "detected": {},
                                                 "falseAlarms": 0})
        detected = any(r["counts"].get(k, 0) for k in DETECTION_KINDS)
        if r["bug"]:
            cell["programs"].add(r["program"])
            d = cell["detected"].setdefault(r["mode"], 0)
            cell["detected"][r["mode"]] = d + detected
        else:
            cell["twins"].add(r["program"])
            if detected:
                cell["falseAlarms"] += 1
    return {
        cat: {
            "programs": len(c["programs"]),
            "twins": len(c["twins"]),
            "detected": dict(sorted(c["detected"].items())),
            "falseAlarms": c["falseAlarms"],
        }
        for cat, c in sorted(matrix.items(), key=lambda kv: _cat_order(kv[0]))
    }


def _cat_order(cat):
    return (CATEGORIES.index(cat), cat) if cat in CATEGORIES else (len(CATEGORIES), cat)


def format_matrix(matrix, modes=("dpt-h", "dpt-c", "dpt-f")):
    head = f"{'category':<20}{'programs':>9}" + "".join(f"{m.upper():>8}" for m in modes) + f"{'twins':>7}{'false':>7}"
    lines = [head, "-" * len(head)]
    for cat, c in matrix.items():
        n = c["programs"]
        cells = "".join(f"{str(c['detected'].get(m, 0)) + '/' + str(n):>8}" for m in modes)
        lines.append(f"{cat:<20}{n:>9}{cells}{c['twins']:>7}{c['falseAlarms']:>7}")
    return "\n".join(lines) + "\n"


def cmd_corpus(args):
    start = time.perf_counter()
    rows = corpus_results(args.dir, args.uarch)
    if not rows:
        raise UsageError(f"{args.dir}: no programs with .expect files")
    matrix = detection_matrix(rows)
    sys.stdout.write(format_matrix(matrix))
    failed = [r for r in rows if not r["pass"]]
    for r in failed:
        print(f"FAIL {r['program']} [{r['mode']}]: {'; '.join(r['mismatches'])}", file=sys.stderr)
    print(f"{len(rows) - len(failed)}/{len(rows)} runs met expectations "
          f"({time.perf_counter() - start:.2f}s)", file=sys.stderr)
    if args.json:
        _write(args.json, json.dumps({"schema": CORPUS_SCHEMA, "runs": rows, "matrix": matrix},
                                     sort_keys=True, indent=2) + "\n")
    return 1 if failed else 0


def cmd_instrument(args):
    program = _parse(args.file)
    plan, graph = make_plan(program, args.mode, taint=args.taint)
    _write(args.output, format_program(instrument(program, plan, graph)))
    return 0


def build_parser():
    p = argparse.ArgumentParser(prog="curesim", description="Data-pointer tagging simulator for mini-IR.")
    sub = p.add_subparsers(dest="command", required=True)

    def mode_flags(sp):
        sp.add_argument("--mode", choices=MODES, default=_env("mode", "dpt-f"))
        sp.add_argument("--taint", action="store_true", default=_env_flag("taint"),
                        help="protect only allocation sites reached by tainted data")

    r = sub.add_parser("run", help="instrument and execute a program")
    r.add_argument("file")
    mode_flags(r)
    r.add_argument("--cmt-ways", type=_int, default=_env("cmt_ways", "4"))
    r.add_argument("--lfsr-seed", type=_int, default=_env("lfsr_seed", "0xACE1"))
    r.add_argument("--uarch", action="store_true", default=_env_flag("uarch"),
                   help="enable the microarchitectural statistics model")
    r.add_argument("--json", default=_env("json"), metavar="OUT", help="write the JSON report ('-' for stdout)")
    src = r.add_mutually_exclusive_group()
    src.add_argument("--input", default=_env("input"), help="bytes supplied to the input intrinsic")
    src.add_argument("--input-hex", default=_env("input_hex"))
    r.add_argument("--expect", default=_env("expect"), metavar="FILE", help="expectation file to check against")
    r.add_argument("--emit-taint", default=_env("emit_taint"), metavar="OUT",
                   help="dump the points-to graph with taint marks (requires --taint)")
    r.set_defaults(func=cmd_run)

    c = sub.add_parser("corpus", help="run every program in a directory against its .expect file")
    c.add_argument("dir")
    c.add_argument("--json", default=_env("json"), metavar="OUT")
    c.add_argument("--uarch", action="store_true", default=_env_flag("uarch"))
    c.set_defaults(func=cmd_corpus)

    i = sub.add_parser("instrument", help="print the instrumented program")
    i.add_argument("file")
    mode_flags(i)
    i.add_argument("-o", "--output", default=_env("output", "-"))
    i.set_defaults(func=cmd_instrument)
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return e.code if isinstance(e.code, int) else 2
    try:
        if args.command == "run":
            # env fallbacks arrive as strings
            args.cmt_ways = _int(str(args.cmt_ways))
            args.lfsr_seed = _int(str(args.lfsr_seed))
            if args.emit_taint and not args.taint:
                raise UsageError("--emit-taint requires --taint")
        return args.func(args)
    except (UsageError, ValueError) as e:
        print(f"curesim: {e}", file=sys.stderr)
        return 2
