from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path


def _safe_run_id(run_id: str) -> str:
    safe = "".join(ch for ch in str(run_id) if ch.isalnum() or ch in ("-", "_")).strip()
    return safe or "run"


@dataclass(frozen=True)
class RunPaths:
    root: Path
    episodes: Path
    trainer: Path
    manifest: Path
    events: Path
    lock: Path
    result: Path
    params: Path

    def actor_episodes(self, index: int) -> Path:
        return self.root / f"episodes_{int(index)}.csv"


def run_paths(metrics_dir: str | os.PathLike | None, run_id: str = "run") -> RunPaths:
    """
    Resolve the files of one run.

    metrics_dir given -> used as-is (relative paths resolve against QUADRL_BASEDIR if set).
    metrics_dir empty  -> <QUADRL_BASEDIR or ./runs>/<run_id>
    """
    basedir = (os.environ.get("QUADRL_BASEDIR") or "").strip()
    base = Path(basedir).expanduser() if basedir else Path("runs")

    if metrics_dir:
        root = Path(metrics_dir).expanduser()
        if basedir and not root.is_absolute():
            root = base / root
    else:
        root = base / _safe_run_id(run_id)

    # best-effort, the lock acquire re-creates it anyway
    try:
        root.mkdir(parents=True, exist_ok=True)
    except Exception:
        pass

    return RunPaths(
        root=root,
        episodes=root / "episodes.csv",
        trainer=root / "trainer.csv",
        manifest=root / "manifest.txt",
        events=root / "events.log",
        lock=root / ".quadrl.lock",
        result=root / "result.json",
        params=root / "params.bin",
    )
