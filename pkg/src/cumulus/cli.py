"""Command-line client plus the master and node daemon entry points.

Exit codes: 0 success, 1 input error, 2 finished with failures, 3 master unreachable.
With ``--json`` every command writes exactly one JSON document to stdout;
logs always go to stderr.
"""

from __future__ import annotations

import argparse
import asyncio
import base64
import json
import logging
import os
import sys
import time
import uuid
from pathlib import Path
from typing import Any, Sequence

from cumulus.core import ApplicationDescriptor, ModelKind, billed_hours, format_money, validate_application
from cumulus.transport import SimNetConfig, TransportError, request, split_address

EXIT_OK = 0
EXIT_INPUT = 1
EXIT_FAILURES = 2
EXIT_UNREACHABLE = 3

DEFAULT_MASTER = "127.0.0.1:7070"

logger = logging.getLogger("cumulus")


class CliError(Exception):
    def __init__(self, message: str, code: int = EXIT_INPUT, detail: Any = None):
        super().__init__(message)
        self.code = code
        self.detail = detail


# -- config and transport ------------------------------------------------------


def load_client_config(path: str | None) -> dict[str, Any]:
    """--config file if given, else ./cumulus.json if present; CUMULUS_MASTER wins for the endpoint."""
    doc: dict[str, Any] = {}
    if path is not None:
        try:
            doc = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise CliError(f"cannot read config {path}: {exc}") from exc
    elif Path("cumulus.json").is_file():
        doc = json.loads(Path("cumulus.json").read_text(encoding="utf-8"))
    master = os.environ.get("CUMULUS_MASTER") or doc.get("master") or DEFAULT_MASTER
    try:
        split_address(master)
    except ValueError as exc:
        raise CliError(str(exc)) from exc
    return {"master": master, "user": doc.get("user") or os.environ.get("USER", "anonymous"),
            "timeout_s": float(doc.get("timeout_s", 10.0))}


def call(cfg: dict[str, Any], msg_type: str, payload: Any = None) -> Any:
    try:
        env = request(cfg["master"], msg_type, payload, sender="cli", timeout=cfg["timeout_s"])
    except (OSError, TransportError) as exc:
        raise CliError(f"master {cfg['master']} unreachable: {exc}", EXIT_UNREACHABLE) from exc
    if env.msg_type == "error":
        p = env.payload or {}
        raise CliError(f"{p.get('code')}: {p.get('message')}", EXIT_INPUT, detail=p)
    return env.payload


# -- rendering -------------------------------------------------------------


def table(headers: Sequence[str], rows: Sequence[Sequence[Any]]) -> str:
    cells = [[str(h) for h in headers]] + [["" if c is None else str(c) for c in r] for r in rows]
    widths = [max(len(row[i]) for row in cells) for i in range(len(headers))]
    return "\n".join("  ".join(c.ljust(w) for c, w in zip(row, widths)).rstrip() for row in cells)


def emit(args: argparse.Namespace, doc: Any, text: str) -> None:
    if args.json:
        sys.stdout.write(json.dumps(doc, sort_keys=True) + "\n")
    else:
        sys.stdout.write(text + "\n")


def _period(text: str | None) -> list[int] | None:
    if not text:
        return None
    start, sep, end = text.partition(":")
    if not sep:
        raise CliError("period must be START_MS:END_MS")
    return [int(start), int(end)]


# -- commands ----------------------------------------------------------------


def read_application(path: str) -> tuple[dict[str, Any], dict[str, str]]:
    """Load an application file; attach local files named by content_ref as blobs."""
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise CliError(f"cannot read {path}: {exc}") from exc
    base = Path(path).parent
    refs: set[str] = set()

    def walk(node: Any) -> None:
        if isinstance(node, dict):
            ref = node.get("content_ref")
            if isinstance(ref, str):
                refs.add(ref)
            for v in node.values():
                walk(v)
        elif isinstance(node, list):
            for v in node:
                walk(v)

    walk(doc)
    blobs = {}
    for ref in sorted(refs):
        local = base / ref
        if local.is_file():
            blobs[ref] = base64.b64encode(local.read_bytes()).decode("ascii")
    return doc, blobs


def cmd_submit(args: argparse.Namespace, cfg: dict[str, Any]) -> int:
    doc, blobs = read_application(args.file)
    if not doc.get("app_id"):
        doc["app_id"] = f"app-{uuid.uuid4().hex[:8]}"
    if not doc.get("owner"):
        doc["owner"] = cfg["user"]
    try:
        desc = ApplicationDescriptor.from_json(doc)
    except (KeyError, ValueError) as exc:
        raise CliError(f"malformed application: {exc}") from exc
    violations = validate_application(desc)
    if violations:
        raise CliError("validation failed: " + "; ".join(f"{v.code} {v.detail}".strip() for v in violations),
                       detail={"code": "ValidationFailed",
                               "violations": [{"code": v.code, "detail": v.detail} for v in violations]})
    reply = call(cfg, "submit", {"descriptor": doc, "blobs": blobs})
    app_id = reply["app_id"]
    if not args.wait:
        emit(args, {"app_id": app_id}, app_id)
        return EXIT_OK
    deadline = time.monotonic() + args.timeout if args.timeout else None
    while True:
        status = call(cfg, "status", {"app_id": app_id})
        if status["state"] != "Running":
            break
        if deadline is not None and time.monotonic() > deadline:
            raise CliError(f"timed out waiting for {app_id}", EXIT_UNREACHABLE)
        time.sleep(args.poll)
    emit(args, status, _status_text(status))
    return EXIT_FAILURES if status["state"] == "FinishedWithFailures" else EXIT_OK


def _status_text(status: dict[str, Any]) -> str:
    head = f"{status['app_id']}  {status['state']}  makespan={status.get('makespan_ms')} ms"
    counts = ", ".join(f"{k}={v}" for k, v in sorted(status.get("counts", {}).items()))
    rows = [(u["unit_id"], u["state"], u["node"], u["attempts"], u["error"]) for u in status.get("units", [])]
    return "\n".join([head, counts, table(["UNIT", "STATE", "NODE", "ATTEMPTS", "ERROR"], rows)])


def cmd_status(args: argparse.Namespace, cfg: dict[str, Any]) -> int:
    status = call(cfg, "status", {"app_id": args.app_id})
    emit(args, status, _status_text(status))
    return EXIT_OK


def cmd_nodes(args: argparse.Namespace, cfg: dict[str, Any]) -> int:
    reply = call(cfg, "nodes")
    nodes = sorted(reply["nodes"], key=lambda n: n["node_id"])
    rows = [(n["node_id"], n["cores"], n["free_cores"], n["memory_mb"], ",".join(n["services"]), n["origin"],
             n.get("instance_type") or "-") for n in nodes]
    emit(args, {"nodes": nodes}, table(["NODE", "CORES", "FREE", "MEM_MB", "SERVICES", "ORIGIN", "TYPE"], rows))
    return EXIT_OK


def cmd_pool(args: argparse.Namespace, cfg: dict[str, Any]) -> int:
    reply = call(cfg, "pool")
    lines = []
    for pool in reply["pools"]:
        lines.append(f"pool {pool['name']}  cost {format_money(pool['cost'])}")
        rows = [(i["instance_id"], i["type"], i["state"], i["node_id"] or "-", format_money(i["cost"]))
                for i in pool["instances"]]
        lines.append(table(["INSTANCE", "TYPE", "STATE", "NODE", "COST"], rows))
    emit(args, reply, "\n".join(lines) or "no pools")
    return EXIT_OK


def _ledger_records(path: str):
    from cumulus.accounting import Ledger

    if not Path(path).is_file():
        raise CliError(f"no ledger at {path}")
    return Ledger(path).records


def cmd_invoice(args: argparse.Namespace, cfg: dict[str, Any]) -> int:
    period = _period(args.period)
    if args.ledger:
        from cumulus.accounting import Invoice, PriceTable, UnpricedResource, price_weighted_sum
        from cumulus.core import to_micros

        prices = {}
        for item in args.price or []:
            key, _, value = item.partition("=")
            prices[key] = to_micros(value)
        try:
            invoices = price_weighted_sum(_ledger_records(args.ledger), PriceTable(prices),
                                          tuple(period) if period else None)
        except UnpricedResource as exc:
            raise CliError(f"UnpricedResource: {exc}") from exc
        if args.user is not None:
            invoices = {args.user: invoices.get(args.user, Invoice(args.user, tuple(period) if period else None))}
        docs = [inv.to_json() for inv in invoices.values()]
    else:
        docs = call(cfg, "invoice", {"user": args.user, "period": period})["invoices"]
    lines = []
    for inv in sorted(docs, key=lambda d: d["user"]):
        lines.append(f"{inv['user']}  total {format_money(inv['total'])}")
        rows = [(ln["app_id"], ln["minutes"], format_money(ln["amount"])) for ln in inv["lines"]]
        if rows:
            lines.append(table(["APP", "MINUTES", "AMOUNT"], rows))
    emit(args, {"invoices": docs}, "\n".join(lines) or "no usage")
    return EXIT_OK


def cmd_usage(args: argparse.Namespace, cfg: dict[str, Any]) -> int:
    period = _period(args.period)
    if args.ledger:
        from cumulus.accounting import usage_report

        doc = usage_report(_ledger_records(args.ledger), args.user, args.app_id,
                           tuple(period) if period else None).to_json()
    else:
        doc = call(cfg, "usage", {"user": args.user, "app_id": args.app_id, "period": period})
    rows = [(r["node_id"], r["app_id"], r["unit_id"], r["user"], r["wall_minutes"], r["state"])
            for r in doc["records"]]
    text = table(["NODE", "APP", "UNIT", "USER", "MINUTES", "STATE"], rows) + f"\ntotal minutes {doc['total_minutes']}"
    emit(args, doc, text)
    return EXIT_OK


def bill_makespan(makespan_min: int, nodes: int, type_name: str, catalog=None) -> dict[str, Any]:
    """Price ``nodes`` instances each held for ``makespan_min`` minutes."""
    from cumulus.provisioning import load_catalog

    catalog = catalog or load_catalog()
    if type_name not in catalog:
        raise CliError(f"unknown instance type {type_name}")
    if makespan_min < 0 or nodes < 1:
        raise CliError("makespan must be >= 0 and nodes >= 1")
    hours = billed_hours(makespan_min * 60_000)
    per_machine = hours * catalog[type_name].rate_per_hour
    total = per_machine * nodes
    return {"makespan_min": makespan_min, "nodes": nodes, "type": type_name, "billed_hours": hours,
            "total": format_money(total), "per_machine": format_money(per_machine),
            "total_micros": total, "per_machine_micros": per_machine}


def cmd_simulate(args: argparse.Namespace, cfg: dict[str, Any]) -> int:
    if args.bill_makespan is not None:
        doc = bill_makespan(args.bill_makespan, args.nodes, args.type)
        text = (f"{doc['nodes']} x {doc['type']} for {doc['makespan_min']} min -> {doc['billed_hours']} h each\n"
                f"total {doc['total']}  per-machine {doc['per_machine']}")
        emit(args, doc, text)
        return EXIT_OK
    if args.file is None:
        raise CliError("simulate needs a workflow file or --bill-makespan")
    from cumulus.models import MissingDuration, simulate_workflow
    from cumulus.sim import parse_cluster

    try:
        doc = json.loads(Path(args.file).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise CliError(f"cannot read {args.file}: {exc}") from exc
    payload = doc.get("payload", doc) if doc.get("model", "Workflow") == ModelKind.WORKFLOW.value else None
    if payload is None:
        raise CliError("simulate only runs Workflow applications")
    desc = ApplicationDescriptor("simulate", "sim", ModelKind.WORKFLOW, payload)
    violations = validate_application(desc)
    if violations:
        raise CliError("validation failed: " + "; ".join(f"{v.code} {v.detail}".strip() for v in violations))
    netcfg = None
    if args.netcfg:
        try:
            netcfg = SimNetConfig.from_json(json.loads(Path(args.netcfg).read_text(encoding="utf-8")))
        except (OSError, json.JSONDecodeError, ValueError, KeyError) as exc:
            raise CliError(f"bad netcfg {args.netcfg}: {exc}") from exc
    try:
        cluster = parse_cluster(args.cluster)
        report = simulate_workflow(payload, cluster, netcfg=netcfg)
    except MissingDuration as exc:
        raise CliError(f"MissingDuration: task {exc} has no sim_duration_s") from exc
    except ValueError as exc:
        raise CliError(str(exc)) from exc
    rows = [(tid, s["node"], s["start"], s["end"]) for tid, s in sorted(report.schedule.items())]
    text = "\n".join([
        table(["TASK", "NODE", "START_S", "END_S"], rows),
        f"makespan {report.makespan_s:.1f} s ({report.makespan_s / 60:.2f} min)  "
        f"transfer {report.transfer_s:.1f} s  cost {format_money(report.cost)}",
    ])
    emit(args, report.to_json(), text)
    return EXIT_OK


# -- argument parsing ------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="client config JSON (default ./cumulus.json)")
    common.add_argument("--json", action="store_true", help="emit one JSON document on stdout")
    common.add_argument("-v", "--verbose", action="store_true", help="debug logging on stderr")

    parser = argparse.ArgumentParser(prog="cumulus", description="Client for a cumulus cloud master.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("submit", parents=[common], help="submit an application JSON file")
    p.add_argument("file")
    p.add_argument("--wait", action="store_true", help="block until the application finishes")
    p.add_argument("--poll", type=float, default=0.2, help="seconds between status polls with --wait")
    p.add_argument("--timeout", type=float, default=None, help="give up waiting after this many seconds")
    p.set_defaults(fn=cmd_submit)

    p = sub.add_parser("status", parents=[common], help="show an application's state")
    p.add_argument("app_id")
    p.set_defaults(fn=cmd_status)

    p = sub.add_parser("nodes", parents=[common], help="list registered nodes")
    p.set_defaults(fn=cmd_nodes)

    p = sub.add_parser("pool", parents=[common], help="show provisioned pools and their cost")
    p.set_defaults(fn=cmd_pool)

    for name, fn in (("invoice", cmd_invoice), ("usage", cmd_usage)):
        p = sub.add_parser(name, parents=[common], help=f"render {name} from the usage ledger")
        p.add_argument("--user")
        p.add_argument("--period", help="START_MS:END_MS, half-open on record end time")
        p.add_argument("--ledger", help="read this ledger file directly instead of asking the master")
        if name == "invoice":
            p.add_argument("--price", action="append", metavar="RESOURCE=PER_MIN",
                           help="per-minute price for --ledger mode; RESOURCE is a node id, type or *")
        else:
            p.add_argument("--app-id")
        p.set_defaults(fn=fn)

    p = sub.add_parser("simulate", parents=[common], help="run a workflow on a simulated cloud, or price a makespan")
    p.add_argument("file", nargs="?", help="workflow application or payload JSON")
    p.add_argument("--cluster", default="m1.small:1", help='instances, e.g. "m1.small:2,c1.medium:1"')
    p.add_argument("--netcfg", help="network model JSON")
    p.add_argument("--bill-makespan", type=int, metavar="MINUTES", help="price an externally measured makespan")
    p.add_argument("--nodes", type=int, default=1, help="machines held for --bill-makespan")
    p.add_argument("--type", default="m1.small", help="instance type for --bill-makespan")
    p.set_defaults(fn=cmd_simulate)

    # Daemons are also reachable as subcommands so `python -m cumulus.cli node` works.
    p = sub.add_parser("master", help="run the master daemon (same as cumulus-master)")
    p.add_argument("--config", required=True)
    p.add_argument("-v", "--verbose", action="store_true")
    p.set_defaults(fn=None, daemon="master")
    p = sub.add_parser("node", help="run a node daemon (same as cumulus-node)")
    p.add_argument("--config", required=True)
    p.add_argument("-v", "--verbose", action="store_true")
    p.set_defaults(fn=None, daemon="node")
    return parser


def _setup_logging(verbose: bool) -> None:
    logging.basicConfig(level=logging.DEBUG if verbose else logging.INFO, stream=sys.stderr,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    if getattr(args, "daemon", None) == "master":
        return _run_master(args.config, args.verbose)
    if getattr(args, "daemon", None) == "node":
        return _run_node(args.config, args.verbose)
    _setup_logging(args.verbose)
    logging.getLogger().setLevel(logging.DEBUG if args.verbose else logging.WARNING)
    try:
        cfg = load_client_config(args.config)
        return args.fn(args, cfg)
    except CliError as exc:
        if args.json:
            sys.stdout.write(json.dumps({"error": str(exc), "exit_code": exc.code, "detail": exc.detail},
                                        sort_keys=True) + "\n")
        print(f"error: {exc}", file=sys.stderr)
        return exc.code


def _daemon_parser(prog: str) -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog=prog)
    p.add_argument("--config", required=True, help="daemon config JSON")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def _run_master(config_path: str, verbose: bool) -> int:
    from cumulus.master import MasterConfig, run_master

    _setup_logging(verbose)
    try:
        config = MasterConfig.load(config_path)
    except (OSError, ValueError, TypeError) as exc:
        print(f"error: bad master config: {exc}", file=sys.stderr)
        return EXIT_INPUT
    try:
        asyncio.run(run_master(config))
    except KeyboardInterrupt:
        pass
    except OSError as exc:
        print(f"error: cannot listen on {config.listen}: {exc}", file=sys.stderr)
        return EXIT_UNREACHABLE
    return EXIT_OK


def _run_node(config_path: str, verbose: bool) -> int:
    from cumulus.container import ContainerConfig, MasterUnreachable, RegistrationRefused, run_node

    _setup_logging(verbose)
    try:
        config = ContainerConfig.load(config_path)
    except (OSError, ValueError, TypeError) as exc:
        print(f"error: bad node config: {exc}", file=sys.stderr)
        return EXIT_INPUT
    if os.environ.get("CUMULUS_MASTER"):
        config.master = os.environ["CUMULUS_MASTER"]
    try:
        asyncio.run(run_node(config))
    except KeyboardInterrupt:
        pass
    except RegistrationRefused as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except MasterUnreachable as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_UNREACHABLE
    return EXIT_OK


def master_main(argv: Sequence[str] | None = None) -> int:
    args = _daemon_parser("cumulus-master").parse_args(argv)
    return _run_master(args.config, args.verbose)


def node_main(argv: Sequence[str] | None = None) -> int:
    args = _daemon_parser("cumulus-node").parse_args(argv)
    return _run_node(args.config, args.verbose)


if __name__ == "__main__":
    sys.exit(main())
