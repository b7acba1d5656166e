from __future__ import annotations

import json
import os
from pathlib import Path
from typing import Any, Dict, Optional


def _backup(path: Path) -> Path:
    return path.with_name(path.name + ".bak")


def write_atomic(path: Path, payload: str | bytes) -> None:
    """
    Write through `<name>.tmp` and os.replace; the previous file, if any,
    becomes `<name>.bak`. Readers never see a half-written result or params blob.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    data = payload.encode("utf-8") if isinstance(payload, str) else payload
    with open(tmp, "wb") as f:
        f.write(data)
        f.flush()
        os.fsync(f.fileno())
    if path.exists():
        try:
            os.replace(path, _backup(path))
        except OSError:
            pass
    os.replace(tmp, path)


def _read_result(path: Path) -> Optional[Dict[str, Any]]:
    try:
        obj = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, ValueError):
        return None
    # A result without a status is treated like a torn write.
    if isinstance(obj, dict) and "status" in obj:
        return obj
    return None


def load_result(path: Path) -> Dict[str, Any]:
    """Load result.json, falling back to result.json.bak. Empty dict when neither is usable."""
    path = Path(path)
    for candidate in (path, _backup(path)):
        res = _read_result(candidate)
        if res is not None:
            return res
    return {}


def save_result_atomic(path: Path, result: Dict[str, Any]) -> None:
    write_atomic(path, json.dumps(result, indent=2, sort_keys=True, default=str))
