"""``ioda`` command line: run scenarios and poke at the deployment they describe.

Exit codes: 0 success, 1 a check or expectation failed, 2 bad usage or config.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from typing import Optional

from ioda.circuit import verify
from ioda.core_model import Principal, format_address, parse_address
from ioda.dataflow import Filter, operator_from_json
from ioda.errors import (
    AccessDenied,
    IodaError,
    MalformedAddress,
    NotFound,
    ParseError,
    UnknownOPort,
    UnknownPeer,
    UnknownRecord,
    ValidationError,
)
from ioda.governance import trace
from ioda.harness import TRANSPORTS, Deployment, load, run
from ioda.resolution import Selector

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2

LOG_LEVELS = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}

# errors that mean "the question had a definite negative answer"
NEGATIVE = (AccessDenied, NotFound, UnknownPeer, UnknownRecord)

log = logging.getLogger("ioda.cli")


class UsageError(Exception):
    pass


def setup_logging() -> None:
    name = os.environ.get("IODA_LOG", "error").strip().lower() or "error"
    level = LOG_LEVELS.get(name)
    logging.basicConfig(level=level or logging.ERROR, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    if level is None:
        log.error("IODA_LOG=%r is not one of %s; using error", name, sorted(LOG_LEVELS))


def emit(args, obj: dict, text: str) -> None:
    if args.json:
        print(json.dumps(obj, indent=2, sort_keys=True, ensure_ascii=False))
    else:
        print(text)


def parse_json_arg(flag: str, text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError as e:
        raise UsageError(f"{flag}: not valid JSON ({e.msg} at column {e.colno})") from None


def principal_for(config, name: str) -> Principal:
    if name not in config.principals:
        raise UsageError(f"--as: no principal {name!r} (known: {', '.join(sorted(config.principals)) or 'none'})")
    return Principal(name, config.principals[name])


def run_and_keep(config, transport: str):
    """Run the workload but keep the deployment up for a follow-up question."""
    keep: list = []
    report = run(config, transport, keep=keep)
    dep, runner = keep[0]
    return report, dep, runner


# -- commands ---------------------------------------------------------------


def cmd_run(args) -> int:
    config = load(args.file)
    report = run(config, args.transport)
    emit(args, report.to_json(), report.to_text())
    for failure in report.failures():
        print(f"failed: {failure}", file=sys.stderr)
    return EXIT_OK if report.passed else EXIT_FAIL


def cmd_verify(args) -> int:
    config = load(args.file)
    try:
        spec = config.circuit(args.circuit)
    except ValidationError as e:
        raise UsageError(f"--circuit: {e}") from None
    dep = Deployment(config)
    report = verify(spec, dep.registries, dep.specs)
    emit(args, report.to_json(), report.to_text())
    return EXIT_OK if report.passed else EXIT_FAIL


def cmd_resolve(args) -> int:
    config = load(args.file)
    if args.from_gate not in {format_address(g.address) for g in config.gates}:
        raise UsageError(f"--from: no gate {args.from_gate!r} in {config.name}")
    try:
        sel = Selector.from_json(parse_json_arg("--selector", args.selector))
    except IodaError as e:
        raise UsageError(f"--selector: {e}") from None
    dep = Deployment(config, args.transport).start()
    try:
        addr = format_address(dep.resolve(args.from_gate, sel))
    except NEGATIVE as e:
        emit(args, {"error": e.code, "message": str(e)}, f"{e.code}: {e}")
        return EXIT_FAIL
    finally:
        dep.close()
    emit(args, {"address": addr}, addr)
    return EXIT_OK


def cmd_query(args) -> int:
    config = load(args.file)
    principal = principal_for(config, args.as_principal)
    try:
        addr = parse_address(args.oport)
    except MalformedAddress as e:
        raise UsageError(f"--oport: {e}") from None
    if addr.oport is None:
        raise UsageError("--oport: expected domain/gate/oport")
    flt: Optional[Filter] = None
    if args.filter:
        try:
            flt = operator_from_json(parse_json_arg("--filter", args.filter))
        except (IodaError, KeyError, TypeError) as e:
            raise UsageError(f"--filter: {e}") from None
        if not isinstance(flt, Filter):
            raise UsageError("--filter: must be a filter stage")
    report, dep, runner = run_and_keep(config, args.transport)
    try:
        try:
            gate = dep.gate(addr)
        except KeyError:
            raise UsageError(f"--oport: no gate {format_address(addr.gate_address)}") from None
        try:
            records = gate.query(addr.oport, principal, flt)
        except UnknownOPort as e:
            raise UsageError(f"--oport: {e}") from None
        except NEGATIVE as e:
            emit(args, {"error": e.code, "message": str(e)}, f"{e.code}: {e}")
            return EXIT_FAIL
    finally:
        runner.close()
        dep.close()
    out = [r.to_json() for r in records]
    emit(args, {"oport": format_address(addr), "records": out}, "\n".join(json.dumps(r["payload"]) for r in out))
    return EXIT_OK


def cmd_trace(args) -> int:
    config = load(args.file)
    report, dep, runner = run_and_keep(config, args.transport)
    try:
        dag = trace(dep.ledger, args.record)
    except NEGATIVE as e:
        emit(args, {"error": e.code, "message": str(e)}, f"{e.code}: {e}")
        return EXIT_FAIL
    finally:
        runner.close()
        dep.close()
    lines = [f"{dag.root}"]
    for node in sorted(dag.nodes):
        parents = sorted(dag.parents(node))
        if parents:
            lines.append(f"  {node} <- {', '.join(parents)}")
    lines.append(f"sources: {', '.join(sorted(dag.leaves()))}")
    emit(args, dag.to_json(), "\n".join(lines))
    return EXIT_OK


# -- entry point ----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ioda", description="Run and inspect federated data-gateway scenarios.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, transport=True):
        p.add_argument("file", help="scenario JSON file")
        p.add_argument("--json", action="store_true", help="machine-readable output")
        if transport:
            p.add_argument("--transport", choices=TRANSPORTS, default="inproc")

    p = sub.add_parser("run", help="run a scenario and check its expectations")
    common(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("verify", help="verify one circuit without activating it")
    common(p, transport=False)
    p.add_argument("--circuit", required=True)
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("resolve", help="resolve a selector on behalf of a gate")
    common(p)
    p.add_argument("--from", dest="from_gate", required=True, metavar="GATE")
    p.add_argument("--selector", required=True, help='e.g. \'{"tags": {"kind": "weather"}}\'')
    p.set_defaults(func=cmd_resolve)

    p = sub.add_parser("query", help="query an oport after the scenario workload has run")
    common(p)
    p.add_argument("--oport", required=True, metavar="ADDR")
    p.add_argument("--as", dest="as_principal", required=True, metavar="PRINCIPAL")
    p.add_argument("--filter", help="optional filter stage as JSON")
    p.set_defaults(func=cmd_query)

    p = sub.add_parser("trace", help="provenance of a record after the scenario workload has run")
    common(p)
    p.add_argument("--record", required=True, metavar="ID")
    p.set_defaults(func=cmd_trace)
    return parser


def main(argv=None) -> int:
    setup_logging()
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (UsageError, ParseError, ValidationError) as e:
        print(f"ioda: {e}", file=sys.stderr)
        return EXIT_USAGE
    except IodaError as e:
        print(f"ioda: {e.code}: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
