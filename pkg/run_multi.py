#!/usr/bin/env python3
"""
Multi-process launcher for a quadrl topology.

Usage:
  python run_multi.py configs/multi_sim.json
  python run_multi.py configs/multi_sim.json --roles sim,replay,trainer   # this machine's share

Every role of the config runs as an independent subprocess:
  - one `sim --index i` per sims[] entry
  - one `replay`, one `trainer`
  - one `actor --index i` per sims[] entry
Addresses come from the config, so the same file drives several machines
(start each machine with the roles it hosts). Then run
`python run_quadrl.py run --config <same file>` (mode "attach") to monitor
convergence.

The launcher monitors all roles and restarts crashed ones.
"""
import argparse
import json
import os
import signal
import subprocess
import sys
import time
from pathlib import Path

ROLE_ORDER = ("sim", "replay", "trainer", "actor")


def _launch_role(config_path: str, role: str, index: int = None) -> subprocess.Popen:
    """Launch a single role subprocess."""
    cmd = [sys.executable, "run_quadrl.py", role, "--config", config_path]
    if index is not None:
        cmd.extend(["--index", str(index)])

    env = os.environ.copy()

    proc = subprocess.Popen(
        cmd,
        stdout=subprocess.PIPE,
        stderr=subprocess.STDOUT,
        env=env,
        bufsize=1,
        universal_newlines=True,
    )
    return proc


def plan_roles(config_path: str, roles=ROLE_ORDER) -> list:
    """[(name, role, index)] in start order: servers first, actors last."""
    raw = json.loads(Path(config_path).read_text(encoding="utf-8"))
    n_sims = len(raw.get("sims") or [])
    plan = []
    for role in ROLE_ORDER:
        if role not in roles:
            continue
        if role in ("sim", "actor"):
            plan += [(f"{role}{i}", role, i) for i in range(n_sims)]
        else:
            plan.append((role, role, None))
    return plan


def main():
    ap = argparse.ArgumentParser(description="Launch every role of a quadrl topology")
    ap.add_argument("config", help="Topology JSON file")
    ap.add_argument("--roles", default=",".join(ROLE_ORDER), help="Comma-separated roles hosted on this machine")
    ap.add_argument("--restart-delay", type=int, default=5, help="Seconds to wait before restarting a crashed role")
    ap.add_argument("--no-restart", action="store_true", help="Don't restart crashed roles")
    args = ap.parse_args()

    if not Path(args.config).exists():
        print(f"[MULTI] ERROR: config not found: {args.config}")
        return

    procs = {}  # name -> (Popen, role, index)
    running = True

    def _signal_handler(sig, frame):
        nonlocal running
        running = False
        print(f"\n[MULTI] Received signal {sig}, shutting down all roles...")
        # actors first so they stop pushing into a dying replay
        for name, (proc, role, _) in sorted(procs.items(), key=lambda kv: -ROLE_ORDER.index(kv[1][1])):
            try:
                proc.terminate()
                print(f"[MULTI] Terminated {name} (PID {proc.pid})")
            except Exception:
                pass
        sys.exit(0)

    signal.signal(signal.SIGINT, _signal_handler)
    signal.signal(signal.SIGTERM, _signal_handler)

    roles = tuple(r.strip() for r in args.roles.split(",") if r.strip())
    for name, role, index in plan_roles(args.config, roles):
        proc = _launch_role(args.config, role, index)
        procs[name] = (proc, role, index)
        print(f"[MULTI] Started {name} (PID {proc.pid})")
        if role != "actor":
            time.sleep(0.5)  # let servers bind before clients connect

    if not procs:
        print("[MULTI] No roles started. Exiting.")
        return

    print(f"[MULTI] {len(procs)} role(s) running. Press Ctrl+C to stop all.")

    # Monitor loop
    while running:
        time.sleep(2)

        for name in list(procs.keys()):
            proc, role, index = procs[name]
            ret = proc.poll()

            if ret is not None:
                try:
                    remaining = proc.stdout.read()
                    if remaining:
                        for line in remaining.strip().split("\n"):
                            print(f"[{name}] {line}")
                except Exception:
                    pass

                if ret == 0:
                    print(f"[MULTI] {name} exited normally (code 0)")
                else:
                    print(f"[MULTI] {name} CRASHED (code {ret})")

                if not args.no_restart and running and ret != 0:
                    print(f"[MULTI] Restarting {name} in {args.restart_delay}s...")
                    time.sleep(args.restart_delay)
                    new_proc = _launch_role(args.config, role, index)
                    procs[name] = (new_proc, role, index)
                    print(f"[MULTI] Restarted {name} (new PID {new_proc.pid})")
                else:
                    del procs[name]

            else:
                try:
                    import select
                    if hasattr(select, "select"):
                        readable, _, _ = select.select([proc.stdout], [], [], 0)
                        if readable:
                            line = proc.stdout.readline()
                            if line:
                                print(f"[{name}] {line.rstrip()}")
                except Exception:
                    pass

        if not procs:
            print("[MULTI] All roles have exited. Shutting down.")
            break


if __name__ == "__main__":
    main()
