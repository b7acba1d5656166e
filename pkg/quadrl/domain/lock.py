import os
from dataclasses import dataclass
from pathlib import Path
from typing import Optional


@dataclass(frozen=True)
class LockHolder:
    pid: int
    run_id: str


class RunLocked(RuntimeError):
    """Another live process owns the run directory."""


def pid_alive(pid: int) -> bool:
    if pid <= 0:
        return False
    try:
        os.kill(pid, 0)
    except ProcessLookupError:
        return False
    except PermissionError:
        return True
    except OSError:
        return False
    return True


def read_holder(path: Path) -> Optional[LockHolder]:
    """Parse `<pid> [run_id]` from a lock file. None if missing or unreadable."""
    try:
        fields = Path(path).read_text(encoding="utf-8").split()
        return LockHolder(int(fields[0]), fields[1] if len(fields) > 1 else "?")
    except (OSError, ValueError, IndexError):
        return None


class InstanceLock:
    """
    One writer per run directory. The lock file is created with O_EXCL and holds
    `<pid> <run_id>`; a file left by a dead process is taken over once.
    """

    def __init__(self, path: Path, run_id: str = "run"):
        self.path = Path(path)
        self.run_id = run_id
        self.fd: Optional[int] = None

    def _create(self) -> None:
        self.fd = os.open(str(self.path), os.O_CREAT | os.O_EXCL | os.O_WRONLY, 0o644)
        os.write(self.fd, f"{os.getpid()} {self.run_id}\n".encode("utf-8"))
        os.fsync(self.fd)

    def acquire(self) -> None:
        self.path.parent.mkdir(parents=True, exist_ok=True)
        try:
            self._create()
            return
        except FileExistsError:
            pass

        holder = read_holder(self.path)
        if holder is not None and pid_alive(holder.pid):
            raise RunLocked(f"{self.path.parent} is in use by run {holder.run_id} (pid {holder.pid})")
        self.path.unlink(missing_ok=True)
        try:
            self._create()
        except FileExistsError:
            raise RunLocked(f"{self.path.parent}: lost the race for {self.path.name}") from None

    def release(self) -> None:
        if self.fd is not None:
            os.close(self.fd)
            self.fd = None
            self.path.unlink(missing_ok=True)

    def __enter__(self) -> "InstanceLock":
        self.acquire()
        return self

    def __exit__(self, *exc) -> None:
        self.release()
