import json
import os
import re
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Dict, Optional, Tuple

from quadrl.agent.dqn import Hyperparams
from quadrl.domain.errors import ConfigError
from quadrl.sim.arena import load_arena_file
from quadrl.sim.simcore import SimConfig
from quadrl.wire.rpc import Address, parse_address


@dataclass(frozen=True)
class RunConfig:
    raw: Dict[str, Any]
    path: Optional[Path] = None
    # "<json path> <- VAR" for each ${VAR} left in place because VAR is unset
    unset_env: Tuple[str, ...] = ()


_ENV_RE = re.compile(r"^\$\{([A-Z0-9_]+)\}$")


def _env_ref(v: Any) -> Optional[str]:
    m = _ENV_RE.fullmatch(v.strip()) if isinstance(v, str) else None
    return m.group(1) if m else None


def _expand_env(node: Any, where: str, unset: list) -> Any:
    """Replace values that are exactly '${VAR}' (addresses, paths); other strings are kept verbatim."""
    if isinstance(node, dict):
        return {k: _expand_env(v, f"{where}.{k}" if where else k, unset) for k, v in node.items()}
    if isinstance(node, list):
        return [_expand_env(v, f"{where}[{i}]", unset) for i, v in enumerate(node)]
    var = _env_ref(node)
    if var is None:
        return node
    if var not in os.environ:
        unset.append(f"{where} <- {var}")
        return node
    return os.environ[var]


def load_config(path: str) -> RunConfig:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"topology file not found: {p}")
    try:
        raw = json.loads(p.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ValueError(f"topology file {p} is not valid JSON: {e}") from e
    if not isinstance(raw, dict):
        raise ValueError(f"topology file {p} must hold a JSON object, got {type(raw).__name__}")

    unset: list = []
    raw = _expand_env(raw, "", unset)
    return RunConfig(raw=raw, path=p.resolve(), unset_env=tuple(unset))


# ──────────────────────────────────────────────────
# Topology
# ──────────────────────────────────────────────────

RENDER_MODES = ("batched", "nonbatched")


@dataclass(frozen=True)
class SimInstance:
    address: Address
    arena_path: Path
    n_agents: int
    seed: int
    actor_seed: int


@dataclass(frozen=True)
class ActorSettings:
    render_mode: str = "batched"
    retries: int = 3
    latency_injection_s: float = 0.0
    rpc_timeout: float = 10.0


@dataclass(frozen=True)
class Budget:
    max_wall_seconds: float = 1800.0
    max_actor_ticks: int = 0  # 0 = unbounded


@dataclass(frozen=True)
class Lockstep:
    enabled: bool = False
    train_steps_per_tick: int = 1


@dataclass(frozen=True)
class Topology:
    sims: Tuple[SimInstance, ...]
    replay_address: Address
    trainer_address: Address
    sim: SimConfig = field(default_factory=SimConfig)
    hyperparams: Hyperparams = field(default_factory=Hyperparams)
    actor: ActorSettings = field(default_factory=ActorSettings)
    replay_seed: int = 0
    trainer_seed: int = 0
    network_seed: int = 0
    threshold: float = 150.0
    moving_window: int = 20
    budget: Budget = field(default_factory=Budget)
    lockstep: Lockstep = field(default_factory=Lockstep)
    eval_arena: Optional[Path] = None
    eval_episodes: int = 20
    metrics_dir: str = "runs"
    run_id: str = "run"
    mode: str = "local"
    raw: Dict[str, Any] = field(default_factory=dict, compare=False)
    config_path: Optional[Path] = None

    @property
    def total_agents(self) -> int:
        return sum(s.n_agents for s in self.sims)

    def agent_offset(self, index: int) -> int:
        """Global id of the first agent of sim instance `index`."""
        return sum(s.n_agents for s in self.sims[:index])

    def reseeded(self, seed: int) -> "Topology":
        """Every per-process seed derived from one base seed."""
        sims = tuple(replace(s, seed=seed + i, actor_seed=seed + 1000 + i) for i, s in enumerate(self.sims))
        return replace(self, sims=sims, replay_seed=seed + 2000, trainer_seed=seed + 3000, network_seed=seed)

    def with_agents(self, n_agents: int) -> "Topology":
        """All agents on the first sim instance."""
        if n_agents < 1:
            raise ConfigError("n_agents must be >= 1")
        return replace(self, sims=(replace(self.sims[0], n_agents=int(n_agents)),))


def _section(raw: Dict[str, Any], key: str) -> Dict[str, Any]:
    v = raw.get(key) or {}
    if not isinstance(v, dict):
        raise ConfigError(f"config section '{key}' must be an object")
    return v


def _dataclass_from(cls, section: Dict[str, Any], name: str):
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(section) - known)
    if unknown:
        raise ConfigError(f"unknown keys in '{name}': {unknown}")
    try:
        return cls(**section)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"invalid '{name}' section: {e}") from e


def _address(v: Any, what: str) -> Address:
    var = _env_ref(v)
    if var is not None:
        raise ConfigError(f"{what}: environment variable {var} is not set")
    try:
        return parse_address(str(v))
    except ValueError as e:
        raise ConfigError(f"{what}: {e}") from e


def _seed_list(v: Any, n: int, base_offset: int) -> list:
    if isinstance(v, list):
        if len(v) != n:
            raise ConfigError(f"seed list has {len(v)} entries for {n} sim instances")
        return [int(x) for x in v]
    return [int(v or 0) + base_offset + i for i in range(n)]


def topology_from_raw(raw: Dict[str, Any], base_dir: Path = Path("."), config_path: Optional[Path] = None) -> Topology:
    sims_raw = raw.get("sims") or []
    if not isinstance(sims_raw, list) or not sims_raw:
        raise ConfigError("config needs a non-empty 'sims' list")

    seeds = _section(raw, "seeds")
    sim_seeds = _seed_list(seeds.get("sim", 0), len(sims_raw), 0)
    actor_seeds = _seed_list(seeds.get("actor", 1000), len(sims_raw), 0)

    sim_cfg = _dataclass_from(SimConfig, _section(raw, "sim"), "sim")

    sims = []
    for i, s in enumerate(sims_raw):
        if not isinstance(s, dict) or "arena" not in s:
            raise ConfigError(f"sims[{i}] needs an 'arena'")
        arena_path = Path(str(s["arena"]))
        if not arena_path.is_absolute():
            arena_path = (base_dir / arena_path).resolve()
        try:
            load_arena_file(arena_path, sim_cfg.agent_radius)
        except (OSError, ValueError) as e:
            raise ConfigError(f"sims[{i}] arena {arena_path}: {e}") from e
        n = int(s.get("n_agents", 1))
        if n < 0:
            raise ConfigError(f"sims[{i}].n_agents must be >= 0")
        sims.append(SimInstance(
            address=_address(s.get("address", "127.0.0.1:0"), f"sims[{i}].address"),
            arena_path=arena_path,
            n_agents=n,
            seed=sim_seeds[i],
            actor_seed=actor_seeds[i],
        ))
    if sum(s.n_agents for s in sims) < 1:
        raise ConfigError("topology needs at least one agent")

    replay_address = _address(_section(raw, "replay").get("address", "127.0.0.1:0"), "replay.address")
    trainer_address = _address(_section(raw, "trainer").get("address", "127.0.0.1:0"), "trainer.address")
    fixed = [a for a in [s.address for s in sims] + [replay_address, trainer_address] if a[1] != 0]
    if len(set(fixed)) != len(fixed):
        raise ConfigError(f"addresses must be distinct: {fixed}")

    mode = str(raw.get("mode", "local"))
    if mode not in ("local", "attach"):
        raise ConfigError(f"mode must be 'local' or 'attach', got {mode!r}")
    if mode == "attach" and not fixed:
        raise ConfigError("attach mode needs fixed addresses")

    actor = _dataclass_from(ActorSettings, _section(raw, "actor"), "actor")
    if actor.render_mode not in RENDER_MODES:
        raise ConfigError(f"actor.render_mode must be one of {RENDER_MODES}")

    ev = _section(raw, "evaluation")
    eval_arena = None
    if ev.get("arena"):
        eval_arena = Path(str(ev["arena"]))
        if not eval_arena.is_absolute():
            eval_arena = (base_dir / eval_arena).resolve()

    window = int(raw.get("moving_window", 20))
    if window < 1:
        raise ConfigError("moving_window must be >= 1")

    return Topology(
        sims=tuple(sims),
        replay_address=replay_address,
        trainer_address=trainer_address,
        sim=sim_cfg,
        hyperparams=_dataclass_from(Hyperparams, _section(raw, "hyperparams"), "hyperparams"),
        actor=actor,
        replay_seed=int(seeds.get("replay", 2000)),
        trainer_seed=int(seeds.get("trainer", 3000)),
        network_seed=int(seeds.get("network", 0)),
        threshold=float(raw.get("threshold", 150.0)),
        moving_window=window,
        budget=_dataclass_from(Budget, _section(raw, "budget"), "budget"),
        lockstep=_dataclass_from(Lockstep, _section(raw, "lockstep"), "lockstep"),
        eval_arena=eval_arena,
        eval_episodes=int(ev.get("episodes", 20)),
        metrics_dir=str(raw.get("metrics_dir", "runs")),
        run_id=str(raw.get("run_id", "run")),
        mode=mode,
        raw=raw,
        config_path=config_path,
    )


def load_topology(path: str) -> Topology:
    cfg = load_config(path)
    return topology_from_raw(cfg.raw, cfg.path.parent, cfg.path)
