import os
import threading
from pathlib import Path

import pandas as pd
import pytz

# Roles share one events.log per run when they run as threads.
_write_lock = threading.Lock()


def _stamp() -> str:
    try:
        tz = pytz.timezone(os.environ.get("QUADRL_LOG_TZ", "UTC"))
    except pytz.UnknownTimeZoneError:
        tz = pytz.utc
    return pd.Timestamp.now(tz=tz).isoformat(timespec="milliseconds")


def log_line(logfile, msg: str) -> str:
    """Print `[timestamp] msg` and append it to `logfile` when one is given. Never raises."""
    line = f"[{_stamp()}] {msg}"
    with _write_lock:
        try:
            print(line, flush=True)
        except (OSError, ValueError):
            pass
        if logfile:
            path = Path(logfile)
            try:
                path.parent.mkdir(parents=True, exist_ok=True)
                with open(path, "a", encoding="utf-8") as fh:
                    fh.write(line + "\n")
            except OSError:
                pass
    return line
