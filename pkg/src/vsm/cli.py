"""Command-line entry points: ``vsmctl`` (cloud tools) and ``vsm-bench``."""
from __future__ import annotations

import argparse
import asyncio
import json
import logging
import os
import signal
import sys
from pathlib import Path

from .config import ConfigError, parse_config
from .control import (
    DeploymentTarget,
    RemoteValidationFailure,
    ValidationFailure,
    configure,
    deploy_async,
    doc_from_args,
)
from .monitor import HealthTable, MonitorServer
from .wire import request

DEFAULT_MONITOR = "127.0.0.1:7900"


def _monitor_default() -> str:
    return os.environ.get("VSM_MONITOR_ADDR", DEFAULT_MONITOR)


# --- vsmctl ------------------------------------------------------------------

def cmd_configure(args: argparse.Namespace) -> int:
    try:
        if args.manifest:
            doc = json.loads(Path(args.manifest).read_text(encoding="utf-8"))
        else:
            missing = [f"--{n.replace('_', '-')}" for n in ("id", "node", "read_rate_ms")
                       if getattr(args, n) is None]
            if missing:
                print(f"error: {', '.join(missing)} required without --manifest", file=sys.stderr)
                return 2
            doc = doc_from_args(args)
        data = configure(doc)
    except ValidationFailure as exc:
        for v in exc.violations:
            print(f"invalid: {v}", file=sys.stderr)
        return 1
    except (OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    if args.output:
        out = Path(args.output)
        if out.is_dir():
            out = out / f"{json.loads(data)['id']}.json"
        out.write_bytes(data)
        print(out)
    else:
        sys.stdout.write(data.decode("utf-8"))
    return 0


async def _deploy_all(target: DeploymentTarget, files: list[str]) -> int:
    status = 0
    for name in files:
        path = Path(name)
        data = path.read_bytes()
        try:
            parse_config(data)
        except ConfigError as exc:
            print(f"{path.name}: invalid locally: {exc}", file=sys.stderr)
            status = 1
            continue
        try:
            reply = await deploy_async(target, data, path.name)
        except RemoteValidationFailure as exc:
            print(f"{path.name}: rejected by {target.control_addr}: {'; '.join(exc.violations)}",
                  file=sys.stderr)
            status = 1
        except ConnectionError as exc:
            print(f"{path.name}: {exc}", file=sys.stderr)
            return 3
        else:
            print(f"{path.name}: deployed to {target.node} ({reply.get('id')})")
    return status


def cmd_deploy(args: argparse.Namespace) -> int:
    target = DeploymentTarget.parse(args.target)
    return asyncio.run(_deploy_all(target, args.files))


def format_status(reply: dict) -> str:
    header = f"{'VS':<16} {'NODE':<10} {'STATUS':<8} {'LAST HEARTBEAT':>15} {'PUBLISHED':>9} {'CONSUMED':>9}"
    lines = [header, "-" * len(header)]
    for r in reply.get("records", []):
        c = r.get("counters") or {}
        last = r.get("last_heartbeat_ts")
        lines.append(f"{r['vs_id']:<16} {r['node']:<10} {r['status']:<8} "
                     f"{last if last is not None else 'never':>15} "
                     f"{c.get('published', 0):>9} {c.get('consumed', 0):>9}")
    for node, offline in sorted(reply.get("nodes", {}).items()):
        lines.append(f"node {node}: {'OFFLINE' if offline else 'online'}")
    return "\n".join(lines)


def cmd_status(args: argparse.Namespace) -> int:
    payload: dict = {"cmd": "status"}
    if args.node:
        payload["node"] = args.node
    try:
        reply = asyncio.run(request(args.monitor, payload))
    except (OSError, asyncio.TimeoutError) as exc:
        print(f"monitor {args.monitor} unreachable: {exc}", file=sys.stderr)
        return 3
    if args.json:
        print(json.dumps(reply, indent=2))
    else:
        print(format_status(reply))
    return 0


async def _serve_monitor(args: argparse.Namespace) -> None:
    table = None
    if args.snapshot and Path(args.snapshot).exists():
        table = HealthTable.from_json(json.loads(Path(args.snapshot).read_text()))
    server = MonitorServer(table, snapshot_path=args.snapshot)
    addr = await server.start(args.addr)
    print(json.dumps({"event": "ready", "monitor": addr}), flush=True)
    stop = asyncio.Event()
    loop = asyncio.get_running_loop()
    for sig in (signal.SIGINT, signal.SIGTERM):
        loop.add_signal_handler(sig, stop.set)
    await stop.wait()
    await server.close()


def cmd_monitor_serve(args: argparse.Namespace) -> int:
    asyncio.run(_serve_monitor(args))
    return 0


def cmd_node(args: argparse.Namespace) -> int:
    payload: dict = {"cmd": args.query}
    if args.query == "vs_status":
        if not args.id:
            print("error: --id required for vs_status", file=sys.stderr)
            return 2
        payload["id"] = args.id
    try:
        reply = asyncio.run(request(args.target, payload))
    except (OSError, asyncio.TimeoutError) as exc:
        print(f"node {args.target} unreachable: {exc}", file=sys.stderr)
        return 3
    print(json.dumps(reply, indent=2))
    return 0 if reply.get("ok") else 1


def vsmctl_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="vsmctl", description="Configure, deploy and monitor virtual sensors.")
    p.add_argument("--log-level", default="WARNING")
    sub = p.add_subparsers(dest="command", required=True)

    c = sub.add_parser("configure", help="emit a validated config file")
    c.add_argument("--manifest", help="JSON document describing one VS config")
    c.add_argument("--id")
    c.add_argument("--node")
    c.add_argument("--input", action="append",
                   help="virtual:<source>@<host:port> or physical:<sensor>:<adapter>[:k=v,...]")
    c.add_argument("--output-topic")
    c.add_argument("--read-rate-ms", type=int)
    c.add_argument("--fault", default="proceed", help="proceed | drop | wait:<max_wait_ticks>")
    c.add_argument("--processor", default="passthrough")
    c.add_argument("--field", default="value")
    c.add_argument("--param", action="append", help="processor parameter key=value")
    c.add_argument("--storage", help="directory for the output log (enables storage)")
    c.add_argument("--monitor-interval", type=int, default=5000)
    c.add_argument("--monitor-endpoint", default=_monitor_default())
    c.add_argument("-o", "--output", help="file or directory to write (default stdout)")
    c.set_defaults(func=cmd_configure)

    d = sub.add_parser("deploy", help="push config files to a node's knowledge-base")
    d.add_argument("--target", required=True, help="host:port or node=host:port of the node control endpoint")
    d.add_argument("files", nargs="+")
    d.set_defaults(func=cmd_deploy)

    s = sub.add_parser("status", help="show VS health from the monitor")
    s.add_argument("--monitor", default=_monitor_default())
    s.add_argument("--node")
    s.add_argument("--json", action="store_true")
    s.set_defaults(func=cmd_status)

    m = sub.add_parser("monitor", help="run the VSM monitor")
    msub = m.add_subparsers(dest="monitor_command", required=True)
    ms = msub.add_parser("serve")
    ms.add_argument("--addr", default=_monitor_default())
    ms.add_argument("--snapshot", help="JSON file for periodic health-table snapshots")
    ms.set_defaults(func=cmd_monitor_serve)

    n = sub.add_parser("node", help="query a node agent")
    n.add_argument("--target", required=True, help="node control host:port")
    n.add_argument("query", choices=("list_vs", "vs_status", "broker_stats"))
    n.add_argument("--id")
    n.set_defaults(func=cmd_node)
    return p


def vsmctl(argv: list[str] | None = None) -> int:
    args = vsmctl_parser().parse_args(argv)
    logging.basicConfig(level=args.log_level.upper(), stream=sys.stderr)
    return args.func(args)


# --- vsm-bench ---------------------------------------------------------------

def bench_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="vsm-bench", description="Run scaling experiments.")
    sub = p.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run")
    r.add_argument("--scenario", required=True, choices=("vs_count", "inputs_per_vs", "levels", "multi_node"))
    r.add_argument("--spec", help="ScenarioSpec JSON, or {\"runs\": [...]} for a sweep; "
                                 "default is the built-in sweep for the scenario")
    r.add_argument("--out", required=True)
    r.add_argument("--duration", type=int, help="override duration_s of every run")
    r.add_argument("--rate-ms", type=int, help="override sensor_rate_ms of every run")
    r.add_argument("--node", default="fog1", help="node whose trend is judged")
    r.add_argument("--no-figures", action="store_true")
    r.add_argument("--log-level", default="WARNING")
    return p


def vsm_bench(argv: list[str] | None = None) -> int:
    from dataclasses import replace

    from .bench.driver import default_sweep, run_scenario
    from .bench.report import write_report
    from .bench.topology import load_specs

    args = bench_parser().parse_args(argv)
    logging.basicConfig(level=args.log_level.upper(), stream=sys.stderr)
    specs = load_specs(args.spec) if args.spec else default_sweep(args.scenario)
    if args.duration:
        specs = [replace(s, duration_s=args.duration) for s in specs]
    if args.rate_ms:
        specs = [replace(s, sensor_rate_ms=args.rate_ms) for s in specs]
    out = Path(args.out)
    results = []
    for i, spec in enumerate(specs):
        print(f"[{i + 1}/{len(specs)}] {spec.scenario} {spec.label} for {spec.duration_s}s", file=sys.stderr)
        results.append(run_scenario(spec, out / "work" / f"run{i + 1}"))
    verdict = write_report(out, results, args.node, figures=not args.no_figures)
    print(json.dumps(verdict, indent=2))
    trend = verdict.get("trend", {})
    return 0 if all(v["monotone_nondecreasing"] for v in trend.values()) else 1


if __name__ == "__main__":
    sys.exit(vsmctl())
