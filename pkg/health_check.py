#!/usr/bin/env python3
"""
Health check for every role of a quadrl topology.

Usage:
  python health_check.py configs/multi_sim.json
  python health_check.py configs/multi_sim.json --json

Checks:
  - each sim / replay / trainer answers Health within the timeout
  - run lock file exists and its PID is alive (a run is attached)
  - events.log freshness (last event < 10 minutes)
  - trainer params version, train steps, episodes, moving-average reward
"""
import argparse
import json
import math
import sys
import time
from datetime import datetime, timezone

from quadrl.app.config import load_topology
from quadrl.domain.errors import RpcError
from quadrl.domain.lock import pid_alive, read_holder
from quadrl.domain.paths import run_paths
from quadrl.wire.protocol import MessageKind
from quadrl.wire.rpc import call


def _check_role(name: str, address, timeout: float) -> dict:
    status = {"role": name, "address": f"{address[0]}:{address[1]}", "healthy": False, "latency_ms": None, "issues": []}
    if address[1] == 0:
        status["issues"].append("ephemeral port (local-mode config); nothing to query")
        return status
    t0 = time.perf_counter()
    try:
        body = call(address, MessageKind.HEALTH, {}, timeout=timeout)
    except RpcError as e:
        status["issues"].append(f"no answer: {e}")
        return status
    status["latency_ms"] = round((time.perf_counter() - t0) * 1000.0, 2)
    status.update({k: body[k] for k in ("version", "train_steps", "episodes")})
    avg = body["moving_avg"]
    status["moving_avg"] = None if math.isnan(avg) else round(float(avg), 2)
    status["healthy"] = True
    return status


def _check_run(topo) -> dict:
    paths = run_paths(topo.metrics_dir, topo.run_id)
    status = {"run_dir": str(paths.root), "attached": False, "pid": None, "events_age_sec": None, "issues": []}
    if paths.lock.exists():
        holder = read_holder(paths.lock)
        if holder is None:
            status["issues"].append("Cannot read lock file PID")
        else:
            status["pid"] = holder.pid
            status["attached"] = pid_alive(holder.pid)
            if not status["attached"]:
                status["issues"].append(f"PID {holder.pid} (run {holder.run_id}) not alive (stale lock)")
    if paths.events.exists():
        age = time.time() - paths.events.stat().st_mtime
        status["events_age_sec"] = int(age)
        if age > 600:
            status["issues"].append(f"events.log stale ({int(age)}s old)")
    return status


def main():
    ap = argparse.ArgumentParser(description="Check health of quadrl roles")
    ap.add_argument("config", help="Topology JSON file")
    ap.add_argument("--timeout", type=float, default=2.0)
    ap.add_argument("--json", action="store_true", help="Output as JSON")
    args = ap.parse_args()

    topo = load_topology(args.config)
    roles = [(f"sim{i}", s.address) for i, s in enumerate(topo.sims)]
    roles += [("replay", topo.replay_address), ("trainer", topo.trainer_address)]
    results = [_check_role(name, addr, args.timeout) for name, addr in roles]
    run = _check_run(topo)

    if args.json:
        print(json.dumps({"roles": results, "run": run}, indent=2, default=str))
        return 0 if all(r["healthy"] for r in results) else 1

    print(f"\n{'='*60}")
    print(f"  QUADRL HEALTH CHECK  ({datetime.now(timezone.utc).strftime('%Y-%m-%d %H:%M UTC')})")
    print(f"{'='*60}\n")

    for r in results:
        icon = "OK  " if r["healthy"] else "FAIL"
        print(f"  [{icon}] {r['role']} @ {r['address']}" + (f"  {r['latency_ms']} ms" if r["latency_ms"] is not None else ""))
        if r["role"] == "trainer" and r["healthy"]:
            print(f"         version={r['version']} steps={r['train_steps']} episodes={r['episodes']} moving_avg={r['moving_avg']}")
        for issue in r["issues"]:
            print(f"         ! {issue}")

    print(f"\n  Run dir: {run['run_dir']} ({'attached, PID ' + str(run['pid']) if run['attached'] else 'no monitor attached'})")
    for issue in run["issues"]:
        print(f"         ! {issue}")

    healthy = sum(1 for r in results if r["healthy"])
    print(f"\n  Summary: {healthy}/{len(results)} roles healthy\n")
    return 0 if healthy == len(results) else 1


if __name__ == "__main__":
    sys.exit(main())
