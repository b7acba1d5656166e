"""Training time vs agent count: run_experiment per (n_agents, seed)."""
from __future__ import annotations

import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np
import pandas as pd

from quadrl.app.config import Topology
from quadrl.app.engine import run_experiment
from quadrl.domain.errors import ExperimentError
from quadrl.domain.logger import log_line
from quadrl.domain.state_store import load_result

RAW_CSV = "speedup_raw.csv"
TABLE_CSV = "speedup.csv"


@dataclass(frozen=True)
class SpeedupRow:
    n_agents: int
    seeds: tuple
    times_s: tuple  # time-to-threshold per seed, nan when not converged
    converged: tuple
    completed: tuple = ()  # False where the run failed

    @property
    def median_time_s(self) -> float:
        done = [t for t, ok in zip(self.times_s, self.converged) if ok]
        return float(np.median(done)) if done else math.nan


def bench_speedup(
    topo: Topology,
    agent_counts: Sequence[int],
    seeds: Sequence[int],
    threshold: Optional[float] = None,
    out_dir: Path = Path("bench/speedup"),
) -> List[SpeedupRow]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    logfile = out / "bench.log"
    raw_rows = []
    rows: List[SpeedupRow] = []

    for n in sorted(set(int(n) for n in agent_counts)):
        times, flags, completed = [], [], []
        for seed in seeds:
            run_id = f"n{n}_s{seed}"
            cell = replace(
                topo.with_agents(n).reseeded(int(seed)),
                threshold=topo.threshold if threshold is None else float(threshold),
                metrics_dir=str(out / run_id),
                run_id=run_id,
                mode="local",
            )
            try:
                root = run_experiment(cell)
            except ExperimentError as e:
                log_line(logfile, f"SPEEDUP_CELL_FAILED n={n} seed={seed} err={e}")
                root = out / run_id
            res = load_result(root / "result.json")
            ok = res.get("status") == "converged"
            t = float(res["time_to_threshold"]) if ok else math.nan
            times.append(t)
            flags.append(ok)
            completed.append(res.get("status") in ("converged", "not_converged"))
            raw_rows.append({
                "n_agents": n,
                "seed": int(seed),
                "status": res.get("status", "failed"),
                "time_to_threshold_s": t,
                "episodes": res.get("episodes", 0),
                "train_steps": res.get("train_steps", 0),
            })
            log_line(logfile, f"SPEEDUP n={n} seed={seed} status={res.get('status')} t={t:.1f}s")
        rows.append(SpeedupRow(n_agents=n, seeds=tuple(int(s) for s in seeds), times_s=tuple(times), converged=tuple(flags), completed=tuple(completed)))

    pd.DataFrame(raw_rows).to_csv(out / RAW_CSV, index=False)
    pd.DataFrame([
        {
            "n_agents": r.n_agents,
            "seeds": len(r.seeds),
            "converged": sum(r.converged),
            "median_time_s": r.median_time_s,
        }
        for r in rows
    ]).to_csv(out / TABLE_CSV, index=False)
    return rows
