import csv
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Dict, List, Optional

import pandas as pd

EPISODES_HEADER: List[str] = [
    "agent_id", "episode", "reward", "steps", "epsilon", "t_start", "t_end",
]

TRAINER_HEADER: List[str] = [
    "step", "loss", "version", "rate",
]


def _first_row(csv_path: Path) -> Optional[List[str]]:
    try:
        with open(csv_path, "r", newline="", encoding="utf-8") as f:
            return next(csv.reader(f), None)
    except OSError:
        return None


def _start_file(csv_path: Path, header: List[str]) -> None:
    with open(csv_path, "w", newline="", encoding="utf-8") as f:
        csv.writer(f).writerow(header)


def ensure_header(csv_path: Path, header: List[str]) -> None:
    """Create the CSV with `header`; a file with any other first row is moved to `<stem>.bad.<utc>.csv`."""
    csv_path = Path(csv_path)
    csv_path.parent.mkdir(parents=True, exist_ok=True)
    if csv_path.exists() and csv_path.stat().st_size > 0:
        if _first_row(csv_path) == header:
            return
        stamp = datetime.now(timezone.utc).strftime("%Y%m%d_%H%M%S")
        try:
            csv_path.replace(csv_path.with_name(f"{csv_path.stem}.bad.{stamp}{csv_path.suffix}"))
        except OSError:
            pass
    _start_file(csv_path, header)


def append_rows(csv_path: Path, header: List[str], rows: List[Dict[str, Any]]) -> None:
    csv_path = Path(csv_path)
    ensure_header(csv_path, header)
    with open(csv_path, "a", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerows([row.get(h) for h in header] for row in rows)


def append_row(csv_path: Path, header: List[str], row: Dict[str, Any]) -> None:
    append_rows(csv_path, header, [row])


def read_rows(csv_path: Path, header: List[str]) -> pd.DataFrame:
    """
    Rows of a metrics CSV as strings, so floats written by one actor come back
    byte-identical. Missing, empty or foreign-header files give an empty frame.
    """
    csv_path = Path(csv_path)
    if not csv_path.exists() or csv_path.stat().st_size == 0 or _first_row(csv_path) != header:
        return pd.DataFrame(columns=header, dtype=str)
    return pd.read_csv(csv_path, dtype=str, keep_default_na=False)[header]
