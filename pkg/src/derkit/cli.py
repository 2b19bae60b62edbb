"""derkit command line.

Exit status: 0 success, 1 detection or failed action, 2 usage/parse error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

from .der import DerError, load_der_file
from .engine import TraceSource, export_log, run
from .events import TraceError, emit_trace, load_trace
from .regions import CatalogError, build_map, flag_suspicious, load_catalog, render_report
from .scenarios import (
    UnknownScenario,
    UnsupportedScenario,
    get_scenario,
    list_scenarios,
    run_scenario,
    shipped_rules,
)

EXIT_OK = 0
EXIT_FAIL = 1
EXIT_USAGE = 2


class UsageError(Exception):
    pass


def _emit(obj) -> None:
    print(json.dumps(obj, indent=2, sort_keys=True))


def _write(path, text) -> None:
    try:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(text)
    except OSError as exc:
        raise UsageError(f"cannot write {path}: {exc.strerror}") from None


def _rules(path):
    try:
        return load_der_file(path)
    except OSError as exc:
        raise UsageError(f"{path}: {exc.strerror}") from None
    except DerError as exc:
        raise UsageError(f"{path}: {exc}") from None


def _trace(path):
    try:
        return load_trace(path)
    except OSError as exc:
        raise UsageError(f"{path}: {exc.strerror}") from None
    except TraceError as exc:
        raise UsageError(f"{path}: {exc}") from None


def cmd_validate(args) -> int:
    rules = _rules(args.der)
    if args.json:
        _emit({"file": args.der, "rules": [{"id": r.id, "summary": r.summary()} for r in rules]})
    else:
        print(f"{args.der}: {len(rules)} rule(s)")
        for r in rules:
            print("  " + r.summary())
    return EXIT_OK


def cmd_replay(args) -> int:
    events = _trace(args.trace)
    rules = _rules(args.der)
    result = run(rules, TraceSource(events))
    text = export_log(result.log)
    if args.log:
        _write(args.log, text)
    failed = [a for a in result.log if not a.applied]
    if args.json:
        _emit({
            "events": len(events),
            "rules": len(rules),
            "actions": [a.to_obj() for a in result.log],
            "failed": len(failed),
        })
    elif not args.log:
        sys.stdout.write(text)
    else:
        print(f"{len(result.log)} action(s), {len(failed)} not applied -> {args.log}")
    return EXIT_FAIL if failed else EXIT_OK


def _overrides(pairs):
    out = {}
    for pair in pairs or ():
        key, sep, value = pair.partition("=")
        if not sep or not key:
            raise UsageError(f"--set expects key=value, got {pair!r}")
        out[key] = value
    return out


def cmd_scenario_run(args) -> int:
    try:
        get_scenario(args.name)
    except UnknownScenario:
        raise UsageError(f"unknown scenario {args.name!r}") from None
    if args.der:
        rules = _rules(args.der)
    elif args.shipped:
        rules = shipped_rules(args.name)
    else:
        rules = None
    try:
        outcome = run_scenario(args.name, rules, _overrides(args.set))
    except UnsupportedScenario as exc:
        raise UsageError(f"scenario not runnable: {exc}") from None
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    if args.trace_out:
        _write(args.trace_out, emit_trace(outcome.events_emitted))
    if args.json:
        _emit(outcome.to_obj())
    elif outcome.survived:
        print(f"{args.name}: survived ({outcome.patches_observed} patch(es) applied)")
    else:
        print(f"{args.name}: detected, reaction {outcome.reaction}")
        for d in outcome.detections:
            print(f"  {d.check}: {d.evidence}")
    return EXIT_OK if outcome.survived else EXIT_FAIL


def cmd_scenario_list(args) -> int:
    rows = list_scenarios()
    if args.json:
        _emit([
            {"name": s.name, "principle": s.principle, "reaction": s.reaction,
             "supported": s.supported, "description": s.description}
            for s in rows
        ])
        return EXIT_OK
    width = max(len(s.name) for s in rows)
    for s in rows:
        mark = "" if s.supported else "  (unsupported)"
        print(f"{s.name:<{width}}  {s.principle:<15} {s.description}{mark}")
    return EXIT_OK


def cmd_map(args) -> int:
    if args.frame < 0:
        raise UsageError("--frame must be >= 0")
    events = _trace(args.trace)
    catalog = None
    if args.catalog:
        try:
            catalog = load_catalog(args.catalog)
        except OSError as exc:
            raise UsageError(f"{args.catalog}: {exc.strerror}") from None
        except CatalogError as exc:
            raise UsageError(f"{args.catalog}: {exc}") from None
    rmap = build_map(events, frame=args.frame)
    _write(args.out, render_report(rmap))
    flags = flag_suspicious(rmap, catalog)
    if args.json:
        _emit({
            "regions": len(rmap.regions),
            "unattributed": len(rmap.unattributed),
            "flags": [
                {"seq": f.event.seq, "syscall": f.event.syscall, "principle": f.principle,
                 "artifact": f.artifact, "note": f.note}
                for f in flags
            ],
        })
    else:
        print(f"{len(rmap.regions)} region(s), {len(rmap.unattributed)} unattributed -> {args.out}")
        for f in flags:
            print(f"  seq {f.event.seq} {f.event.syscall}: {f.principle} [{f.artifact}] {f.note}".rstrip())
    return EXIT_OK


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="derkit", description="syscall-level evasion rules: validate, replay, simulate, map")
    p.add_argument("-v", "--verbose", action="count", default=0, help="log rule matching (repeat for debug)")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    v = sub.add_parser("validate", help="parse a DER file and summarize its rules")
    v.add_argument("der")
    v.add_argument("--json", action="store_true")
    v.set_defaults(func=cmd_validate)

    r = sub.add_parser("replay", help="replay a recorded trace through the engine")
    r.add_argument("--trace", required=True)
    r.add_argument("--der", required=True)
    r.add_argument("--log", help="write the action log (JSONL) here instead of stdout")
    r.add_argument("--json", action="store_true")
    r.set_defaults(func=cmd_replay)

    s = sub.add_parser("scenario", help="simulated anti-analysis scenarios")
    ssub = s.add_subparsers(dest="scenario_command", required=True, parser_class=_Parser)
    sr = ssub.add_parser("run", help="run one scenario")
    sr.add_argument("name")
    src = sr.add_mutually_exclusive_group()
    src.add_argument("--der", help="rules to load")
    src.add_argument("--shipped", action="store_true", help="use the scenario's shipped rules")
    sr.add_argument("--set", action="append", metavar="KEY=VALUE", help="environment override")
    sr.add_argument("--trace-out", help="write the emitted trace (JSONL)")
    sr.add_argument("--json", action="store_true")
    sr.set_defaults(func=cmd_scenario_run)
    sl = ssub.add_parser("list", help="list the scenario catalog")
    sl.add_argument("--json", action="store_true")
    sl.set_defaults(func=cmd_scenario_list)

    m = sub.add_parser("map", help="render the syscall-to-region origin map")
    m.add_argument("--trace", required=True)
    m.add_argument("--out", required=True)
    m.add_argument("--catalog", help="suspicion catalog (TSV); defaults to the shipped one")
    m.add_argument("--frame", type=int, default=0, help="attribute by stack frame N (0 = pc)")
    m.add_argument("--json", action="store_true")
    m.set_defaults(func=cmd_map)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        level = {0: logging.WARNING, 1: logging.INFO}.get(args.verbose, logging.DEBUG)
        logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
        return args.func(args)
    except UsageError as exc:
        print(f"derkit: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    raise SystemExit(main())
