import os
import logging

# Respect LOG_LEVEL (default INFO)
logging.basicConfig(
    level=getattr(logging, os.getenv("LOG_LEVEL", "INFO").upper(), logging.INFO),
    format="%(message)s"
)

import argparse
import json
import sys
from pathlib import Path

from quadrl.app.config import load_topology
from quadrl.app.engine import (
    evaluate,
    load_params_file,
    read_result,
    run_actor,
    run_experiment,
    run_replay,
    run_sim,
    run_trainer,
)
from quadrl.domain.errors import ExperimentError


def _int_list(text: str):
    return [int(x) for x in str(text).split(",") if x.strip()]


def _seed_list(text: str):
    """'3' -> [0, 1, 2]; '4,7' -> [4, 7]."""
    vals = _int_list(text)
    return list(range(vals[0])) if len(vals) == 1 else vals


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="quadrl")
    sub = ap.add_subparsers(dest="cmd", required=True)

    runp = sub.add_parser("run", help="run a full experiment")
    runp.add_argument("--config", required=True)

    for role in ("sim", "actor"):
        p = sub.add_parser(role, help=f"host one {role} role")
        p.add_argument("--config", required=True)
        p.add_argument("--index", type=int, default=0)
    for role in ("replay", "trainer"):
        p = sub.add_parser(role, help=f"host the {role} role")
        p.add_argument("--config", required=True)

    evp = sub.add_parser("evaluate", help="greedy rollouts on a held-out arena")
    evp.add_argument("--config", required=True)
    evp.add_argument("--params", required=True, help="params.bin written by a run")
    evp.add_argument("--arena", default=None)
    evp.add_argument("--episodes", type=int, default=None)
    evp.add_argument("--seed", type=int, default=0)

    benchp = sub.add_parser("bench")
    bsub = benchp.add_subparsers(dest="bench_cmd", required=True)
    latp = bsub.add_parser("latency")
    latp.add_argument("--config", required=True)
    latp.add_argument("--agents", default="1,2,5,10,25,50")
    latp.add_argument("--calls", type=int, default=1000)
    latp.add_argument("--warmup", type=int, default=50)
    latp.add_argument("--out", required=True)
    spp = bsub.add_parser("speedup")
    spp.add_argument("--config", required=True)
    spp.add_argument("--agents", default="1,4,8")
    spp.add_argument("--seeds", default="3")
    spp.add_argument("--threshold", type=float, default=None)
    spp.add_argument("--out", required=True)

    sump = sub.add_parser("summary")
    sump.add_argument("--in", dest="in_dir", required=True)

    args = ap.parse_args(argv)

    if args.cmd == "run":
        try:
            root = run_experiment(args.config)
        except ExperimentError as e:
            print(str(e), file=sys.stderr)
            return 1
        print(json.dumps(read_result(root), indent=2, sort_keys=True))
        return 0

    if args.cmd == "summary":
        from quadrl.bench.summary import emit_summary
        try:
            print(emit_summary(Path(args.in_dir)), end="")
        except FileNotFoundError as e:
            print(str(e), file=sys.stderr)
            return 1
        return 0

    topo = load_topology(args.config)

    if args.cmd == "sim":
        run_sim(topo, args.index)
    elif args.cmd == "actor":
        run_actor(topo, args.index)
    elif args.cmd == "replay":
        run_replay(topo)
    elif args.cmd == "trainer":
        run_trainer(topo)
    elif args.cmd == "evaluate":
        report = evaluate(topo, load_params_file(args.params), args.arena, args.episodes, args.seed)
        print(json.dumps(report, indent=2, sort_keys=True))
    elif args.cmd == "bench":
        if args.bench_cmd == "latency":
            from quadrl.bench.latency import bench_latency
            samples = bench_latency(topo, _int_list(args.agents), args.calls, args.warmup, Path(args.out))
            return 0 if len(samples) == 2 * len(set(_int_list(args.agents))) else 1
        from quadrl.bench.speedup import bench_speedup
        rows = bench_speedup(topo, _int_list(args.agents), _seed_list(args.seeds), args.threshold, Path(args.out))
        return 0 if all(all(r.completed) for r in rows) else 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
