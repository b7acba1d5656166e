"""Text tables and gnuplot data files from a benchmark output directory."""
from __future__ import annotations

from pathlib import Path
from typing import List

import pandas as pd

from quadrl.bench import latency, speedup


def _latency_section(d: Path, lines: List[str]) -> bool:
    raw_path = d / latency.RAW_CSV
    if not raw_path.exists():
        return False
    raw = pd.read_csv(raw_path)
    # recomputed from per-call samples so the table always matches the raw CSV
    g = raw.groupby(["n_agents", "method"], sort=True)
    table = pd.DataFrame({
        "mean_ms": g["ms"].mean(),
        "p50_ms": g["ms"].quantile(0.5),
        "p95_ms": g["ms"].quantile(0.95),
        "waits_per_call": g["barrier_delta"].mean(),
        "calls": g["ms"].size(),
    }).reset_index()
    lines.append("State collection latency")
    lines.append(table.to_string(index=False, float_format=lambda v: f"{v:.3f}"))
    lines.append(f"total calls={len(raw)} total barrier waits={int(raw['barrier_delta'].sum())}")

    wide = table.pivot(index="n_agents", columns="method", values="mean_ms").sort_index()
    if {"batched", "nonbatched"} <= set(wide.columns):
        wide["ratio"] = wide["batched"] / wide["nonbatched"]
        lines.append("")
        lines.append("batched / non-batched mean")
        lines.append(wide.reset_index().to_string(index=False, float_format=lambda v: f"{v:.3f}"))
    with open(d / "latency.dat", "w", encoding="utf-8") as f:
        cols = [c for c in ("batched", "nonbatched") if c in wide.columns]
        f.write("# n_agents " + " ".join(f"{c}_mean_ms" for c in cols) + "\n")
        for n, row in wide.iterrows():
            f.write(f"{n} " + " ".join(f"{row[c]:.6f}" for c in cols) + "\n")
    return True


def _speedup_section(d: Path, lines: List[str]) -> bool:
    raw_path = d / speedup.RAW_CSV
    if not raw_path.exists():
        return False
    raw = pd.read_csv(raw_path).sort_values(["n_agents", "seed"], kind="mergesort")
    conv = raw[raw["status"] == "converged"]
    g = raw.groupby("n_agents", sort=True)
    table = pd.DataFrame({
        "seeds": g["seed"].size(),
        "converged": g["status"].apply(lambda s: int((s == "converged").sum())),
        "median_time_s": conv.groupby("n_agents")["time_to_threshold_s"].median(),
    }).reset_index()
    base = table["median_time_s"].iloc[0] if len(table) else float("nan")
    table["speedup"] = base / table["median_time_s"]
    if lines:
        lines.append("")
    lines.append("Training time to threshold")
    lines.append(table.to_string(index=False, float_format=lambda v: f"{v:.2f}"))
    lines.append(f"total runs={len(raw)} converged={len(conv)}")
    with open(d / "speedup.dat", "w", encoding="utf-8") as f:
        f.write("# n_agents median_time_s\n")
        for _, row in table.iterrows():
            f.write(f"{int(row['n_agents'])} {row['median_time_s']:.6f}\n")
    return True


def emit_summary(in_dir: Path) -> str:
    d = Path(in_dir)
    if not d.is_dir():
        raise FileNotFoundError(f"benchmark directory not found: {d}")
    lines: List[str] = []
    found = _latency_section(d, lines)
    found = _speedup_section(d, lines) or found
    if not found:
        raise FileNotFoundError(f"no benchmark CSVs ({latency.RAW_CSV}, {speedup.RAW_CSV}) in {d}")
    text = "\n".join(lines) + "\n"
    (d / "summary.txt").write_text(text, encoding="utf-8")
    return text
