"""
Batched vs non-batched state collection latency.

Each cell hosts a fresh World with n agents behind a loopback sim server (or
uses an already running sim at `address`) and times `calls` state collections
after `warmup` discarded ones.
"""
from __future__ import annotations

import time
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Iterable, List, Optional, Sequence, Tuple

import pandas as pd

from quadrl.app.config import Topology
from quadrl.app.engine import SimService
from quadrl.domain.logger import log_line
from quadrl.sim.arena import load_arena_file
from quadrl.sim.simcore import create_world
from quadrl.wire.clients import SimClient
from quadrl.wire.rpc import Address, serve

METHODS = ("batched", "nonbatched")
RAW_CSV = "latency_raw.csv"
TABLE_CSV = "latency.csv"


@dataclass(frozen=True)
class LatencySample:
    method: str
    n_agents: int
    mean_ms: float
    p50_ms: float
    p95_ms: float
    barrier_waits: int  # total over the measured calls
    calls: int

    def __post_init__(self):
        if self.calls < 1:
            raise ValueError("calls must be >= 1")
        if self.p50_ms > self.p95_ms:
            raise ValueError(f"p50 {self.p50_ms} > p95 {self.p95_ms}")

    @property
    def waits_per_call(self) -> float:
        return self.barrier_waits / self.calls


def measure_cell(client: SimClient, method: str, n_agents: int, calls: int, warmup: int = 50) -> Tuple[LatencySample, pd.DataFrame]:
    if method not in METHODS:
        raise ValueError(f"method must be one of {METHODS}")
    batched = method == "batched"
    ids = list(range(n_agents))
    waits = client.get_states(ids, batched)[1]["barrier_waits"]
    for _ in range(max(0, warmup) - 1):
        waits = client.get_states(ids, batched)[1]["barrier_waits"]

    ms: List[float] = []
    deltas: List[int] = []
    for _ in range(calls):
        t0 = time.perf_counter()
        _, meta = client.get_states(ids, batched)
        ms.append((time.perf_counter() - t0) * 1000.0)
        deltas.append(meta["barrier_waits"] - waits)
        waits = meta["barrier_waits"]

    raw = pd.DataFrame({
        "method": method,
        "n_agents": n_agents,
        "call": range(calls),
        "ms": ms,
        "barrier_delta": deltas,
    })
    s = raw["ms"]
    sample = LatencySample(
        method=method,
        n_agents=n_agents,
        mean_ms=float(s.mean()),
        p50_ms=float(s.quantile(0.5)),
        p95_ms=float(s.quantile(0.95)),
        barrier_waits=int(raw["barrier_delta"].sum()),
        calls=calls,
    )
    return sample, raw


def bench_latency(
    topo: Topology,
    agent_counts: Sequence[int],
    calls: int = 1000,
    warmup: int = 50,
    out_dir: Optional[Path] = None,
    methods: Iterable[str] = METHODS,
    address: Optional[Address] = None,
) -> List[LatencySample]:
    """
    One cell per (method, n). With `address` the cells run against that sim
    (it must host max(agent_counts) agents); otherwise a sim is started per n.
    """
    methods = tuple(methods)
    arena = load_arena_file(topo.sims[0].arena_path, topo.sim.agent_radius)
    sim_cfg = replace(topo.sim, realtime=True)
    samples: List[LatencySample] = []
    raws: List[pd.DataFrame] = []
    logfile = Path(out_dir) / "bench.log" if out_dir else None

    for n in sorted(set(int(n) for n in agent_counts)):
        server = None
        if address is None:
            world = create_world(arena, n, sim_cfg, topo.sims[0].seed)
            server = serve(SimService(world, "bench-sim").handlers(), ("127.0.0.1", 0), role="bench-sim")
        target = server.address if server else address
        try:
            with SimClient(target, timeout=max(30.0, n * calls * sim_cfg.frame_period)) as client:
                for method in methods:
                    sample, raw = measure_cell(client, method, n, calls, warmup)
                    samples.append(sample)
                    raws.append(raw)
                    log_line(logfile, f"LATENCY method={method} n={n} mean={sample.mean_ms:.2f}ms p95={sample.p95_ms:.2f}ms waits/call={sample.waits_per_call:g}")
        finally:
            if server:
                server.stop()

    if out_dir:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        pd.concat(raws, ignore_index=True).to_csv(out / RAW_CSV, index=False)
        pd.DataFrame([asdict(s) for s in samples]).to_csv(out / TABLE_CSV, index=False)
    return samples
