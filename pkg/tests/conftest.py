from pathlib import Path

import numpy as np
import pytest

from quadrl.app.config import topology_from_raw
from quadrl.domain.models import IMAGE_SIZE, Experience, StackedState
from quadrl.sim.arena import load_arena_file

ROOT = Path(__file__).resolve().parents[1]
ARENAS = ROOT / "arenas"
CONFIGS = ROOT / "configs"


@pytest.fixture(autouse=True)
def _no_basedir(monkeypatch):
    monkeypatch.delenv("QUADRL_BASEDIR", raising=False)


@pytest.fixture
def corridor():
    return load_arena_file(ARENAS / "easy_corridor.arena")


@pytest.fixture
def open_arena():
    return load_arena_file(ARENAS / "open.arena")


@pytest.fixture
def slalom():
    return load_arena_file(ARENAS / "train.arena")


@pytest.fixture
def make_topology(tmp_path):
    """Build a local-mode Topology from a few overrides; every address is ephemeral."""

    def _make(n_agents=1, arena="open.arena", hyperparams=None, sim=None, actor=None, **extra):
        raw = {
            "run_id": "t",
            "metrics_dir": str(tmp_path / "run"),
            "sims": [{"address": "127.0.0.1:0", "arena": str(ARENAS / arena), "n_agents": n_agents}],
            "sim": {"realtime": False, **(sim or {})},
            "hyperparams": {"replay_capacity": 64, **(hyperparams or {})},
            "actor": {"rpc_timeout": 10.0, **(actor or {})},
        }
        raw.update(extra)
        return topology_from_raw(raw, ROOT)

    return _make


def make_state(value: float = 5.0, velocity=(0.0, 0.0, 0.0)) -> StackedState:
    img = np.full((IMAGE_SIZE, IMAGE_SIZE), value, dtype=np.float32)
    return StackedState(img, img.copy(), np.asarray(velocity, dtype=np.float32))


def make_experience(r: float = 3.0, a: int = 0, done: bool = False, value: float = 5.0) -> Experience:
    return Experience(s=make_state(value), a=a, s_next=make_state(value + 1.0), r=r, done=done)


@pytest.fixture
def state_factory():
    return make_state


@pytest.fixture
def experience_factory():
    return make_experience
