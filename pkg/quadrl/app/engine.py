"""
Roles of the decentralised topology and the experiment driver.

    sim      World behind endpoints 1-6 (+ Health)
    replay   ReplayBuffer behind PushExperiences / SampleBatch / ReplayStats
    trainer  global Q-network: fixed-rate training loop, GetParams, ReportEpisode
    actor    local policy snapshot paired with one sim instance

Every role talks to the others only through the wire protocol, also when
run_experiment hosts them all in one process.
"""
from __future__ import annotations

import json
import math
import signal
import threading
import time
from collections import deque
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from quadrl.agent.dqn import (
    Hyperparams,
    build_network,
    epsilon_schedule,
    q_values,
    q_values_batch,
    select_action,
    sync_target,
    train_step,
)
from quadrl.app.config import Topology, load_topology
from quadrl.domain.errors import ExperimentError, NonFiniteError, NotReady, RpcConnectionError, RpcError, RpcTimeout
from quadrl.domain.lock import InstanceLock
from quadrl.domain.logger import log_line
from quadrl.domain.metrics_log import EPISODES_HEADER, TRAINER_HEADER, append_row, append_rows, ensure_header, read_rows
from quadrl.domain.models import EpisodeRecord, Experience, StackedState, TerminalKind
from quadrl.domain.paths import RunPaths, run_paths
from quadrl.domain.state_store import load_result, save_result_atomic, write_atomic
from quadrl.nn.adam import AdamState
from quadrl.nn.params import NetParams
from quadrl.replay.buffer import ReplayBuffer
from quadrl.sim.arena import content_hash, load_arena_file
from quadrl.sim.simcore import World, create_world
from quadrl.wire.clients import ReplayClient, SimClient, TrainerClient, is_not_ready
from quadrl.wire.protocol import MessageKind as K
from quadrl.wire.rpc import RpcServer, sleep_backoff, serve

ENGINE_BUILD_TAG = "quadrl_engine_v3"

Clock = Callable[[], float]


# ──────────────────────────────────────────────────
# Graceful shutdown
# ──────────────────────────────────────────────────

_shutdown_flag = threading.Event()


def _install_signal_handlers(logfile) -> None:
    """SIGTERM/SIGINT set the shutdown flag. Main thread only."""
    if threading.current_thread() is not threading.main_thread():
        return

    def _handler(signum, _frame):
        name = signal.Signals(signum).name
        log_line(logfile, f"SIGNAL {name}: graceful shutdown requested")
        _shutdown_flag.set()

    signal.signal(signal.SIGTERM, _handler)
    signal.signal(signal.SIGINT, _handler)


class RunClock:
    """Wall clock since start, or simulated time advanced by the caller (lockstep)."""

    def __init__(self, simulated: bool = False):
        self.simulated = simulated
        self._t0 = time.monotonic()
        self._t = 0.0

    def advance(self, dt: float) -> None:
        self._t += dt

    def __call__(self) -> float:
        return self._t if self.simulated else time.monotonic() - self._t0


# ──────────────────────────────────────────────────
# Sim role
# ──────────────────────────────────────────────────

class SimService:
    def __init__(self, world: World, role: str = "sim"):
        self.world = world
        self.role = role

    def _states(self, body: Dict[str, Any], batched: bool) -> Dict[str, Any]:
        fn = self.world.get_states_batched if batched else self.world.get_states_nonbatched
        raw = fn(body["agent_ids"])
        clock = self.world.clock
        return {
            "tick": clock.tick_index,
            "barrier_waits": clock.barrier_waits,
            "states": [StackedState(*s) for s in raw],
        }

    def apply_actions(self, body: Dict[str, Any]) -> Dict[str, Any]:
        actions = body["actions"]
        alive = set(self.world.alive_ids())
        bad = [a["agent_id"] for a in actions if a["agent_id"] not in alive]
        if bad:
            raise ValueError(f"ApplyActions for unknown or dead agents {bad}")
        return {"desired_lateral": [self.world.apply_action(a["agent_id"], a["action"]) for a in actions]}

    def step_period(self, _body: Dict[str, Any]) -> Dict[str, Any]:
        outcomes = self.world.step_action_period()
        return {"outcomes": [{"agent_id": o.agent_id, "reward": o.reward, "terminal": int(o.terminal)} for o in outcomes]}

    def reset_vehicle(self, body: Dict[str, Any]) -> Dict[str, Any]:
        if body["random_spawn"]:
            return {"pose": self.world.respawn(body["agent_id"])}
        self.world.reset_vehicle(body["agent_id"], body["pose"])
        return {"pose": body["pose"]}

    def reset_all(self, _body: Dict[str, Any]) -> Dict[str, Any]:
        self.world.reset_all()
        return {}

    def health(self, _body: Dict[str, Any]) -> Dict[str, Any]:
        return {"role": self.role, "version": 0, "train_steps": 0, "episodes": 0, "moving_avg": 0.0}

    def handlers(self):
        return {
            K.GET_BATCH_STATES: lambda b: self._states(b, True),
            K.GET_STATES_NONBATCHED: lambda b: self._states(b, False),
            K.APPLY_ACTIONS: self.apply_actions,
            K.STEP_PERIOD: self.step_period,
            K.RESET_VEHICLE: self.reset_vehicle,
            K.RESET_ALL: self.reset_all,
            K.HEALTH: self.health,
        }


def build_sim(topo: Topology, index: int) -> World:
    inst = topo.sims[index]
    arena = load_arena_file(inst.arena_path, topo.sim.agent_radius)
    return create_world(arena, inst.n_agents, topo.sim, inst.seed)


# ──────────────────────────────────────────────────
# Replay role
# ──────────────────────────────────────────────────

class ReplayService:
    """SampleBatch answers ready=0 until the buffer holds min_fill items (default: full)."""

    def __init__(self, buffer: ReplayBuffer, seed: int = 0, min_fill: Optional[int] = None):
        self.buffer = buffer
        self.min_fill = buffer.capacity if min_fill is None else int(min_fill)
        self._rng = np.random.default_rng(seed)
        self._rng_lock = threading.Lock()

    def push(self, body: Dict[str, Any]) -> Dict[str, Any]:
        accepted, rejected = self.buffer.push(body["items"])
        return {
            "accepted": accepted,
            "a_t": self.buffer.stats().a_t,
            "rejected": [{"index": i, "reason": r} for i, r in rejected],
        }

    def sample(self, body: Dict[str, Any]) -> Dict[str, Any]:
        n = int(body["n"])
        if n < 1:
            raise ValueError("SampleBatch needs n >= 1")
        if self.buffer.stats().len < max(n, self.min_fill):
            return {"ready": 0, "items": []}
        with self._rng_lock:
            items = self.buffer.sample(n, self._rng)
        return {"ready": 1, "items": items}

    def stats(self, _body: Dict[str, Any]) -> Dict[str, Any]:
        st = self.buffer.stats()
        return {"len": st.len, "capacity": st.capacity, "a_t": st.a_t, "insert_count": st.insert_count}

    def health(self, _body: Dict[str, Any]) -> Dict[str, Any]:
        return {"role": "replay", "version": 0, "train_steps": 0, "episodes": 0, "moving_avg": 0.0}

    def handlers(self):
        return {
            K.PUSH_EXPERIENCES: self.push,
            K.SAMPLE_BATCH: self.sample,
            K.REPLAY_STATS: self.stats,
            K.HEALTH: self.health,
        }


# ──────────────────────────────────────────────────
# Trainer role
# ──────────────────────────────────────────────────

class TrainerService:
    """Owns the global network. step() is one Q-learning update; endpoints read under the same lock."""

    def __init__(self, hp: Hyperparams, max_range: float = 20.0, network_seed: int = 0, window: int = 20, logfile=None):
        self.hp = hp
        self.max_range = float(max_range)
        self.params = build_network(network_seed)
        self.target = sync_target(self.params)
        self.adam = AdamState.for_params(self.params, lr=hp.lr)
        self.window = int(window)
        self.logfile = logfile
        self.train_steps = 0
        self.target_syncs = 0
        self.nonfinite_skips = 0
        self.last_loss = math.nan
        self.episodes = 0
        self._rewards: deque = deque(maxlen=self.window)
        self._lock = threading.Lock()
        self._blob: Tuple[int, bytes] = (-1, b"")

    def step(self, batch: Sequence[Experience]) -> Optional[float]:
        """Returns the loss, or None when a non-finite loss/gradient skipped the update."""
        with self._lock:
            try:
                loss = train_step(self.params, self.target, batch, self.adam, self.hp.gamma, self.hp.grad_clip, self.max_range)
            except NonFiniteError as e:
                self.nonfinite_skips += 1
                log_line(self.logfile, f"NONFINITE_SKIP count={self.nonfinite_skips} err={e}")
                return None
            self.train_steps += 1
            self.last_loss = loss
            if self.train_steps % self.hp.target_sync_every == 0:
                self.target = sync_target(self.params)
                self.target_syncs += 1
            return loss

    @property
    def version(self) -> int:
        return self.params.version

    def params_blob(self) -> Tuple[int, bytes]:
        with self._lock:
            if self._blob[0] != self.params.version:
                self._blob = (self.params.version, self.params.to_blob())
            return self._blob

    def snapshot(self) -> NetParams:
        with self._lock:
            return self.params.copy()

    def moving_avg(self) -> Optional[float]:
        with self._lock:
            if len(self._rewards) < self.window:
                return None
            return float(np.mean(self._rewards))

    def get_params(self, body: Dict[str, Any]) -> Dict[str, Any]:
        version = self.version
        if version <= body["have_version"]:
            return {"up_to_date": 1, "version": version, "blob": b""}
        version, blob = self.params_blob()
        return {"up_to_date": 0, "version": version, "blob": blob}

    def report_episode(self, body: Dict[str, Any]) -> Dict[str, Any]:
        rec: EpisodeRecord = body["record"]
        with self._lock:
            self._rewards.append(float(rec.reward))
            self.episodes += 1
            return {"episodes": self.episodes}

    def health(self, _body: Dict[str, Any]) -> Dict[str, Any]:
        avg = self.moving_avg()
        return {
            "role": "trainer",
            "version": self.version,
            "train_steps": self.train_steps,
            "episodes": self.episodes,
            "moving_avg": math.nan if avg is None else avg,
        }

    def handlers(self):
        return {
            K.GET_PARAMS: self.get_params,
            K.REPORT_EPISODE: self.report_episode,
            K.HEALTH: self.health,
        }


class TrainerLoop:
    """
    Fixed-rate learner: SampleBatch -> train_step, paced at train_hz.
    Idles while the replay answers not-ready. Writes a trainer.csv row every
    second of run clock.
    """

    def __init__(self, service: TrainerService, replay: ReplayClient, paths: RunPaths, clock: Clock):
        self.service = service
        self.replay = replay
        self.paths = paths
        self.clock = clock
        self.ready = False
        self.last_rate = 0.0
        self._last_log_t = clock()
        self._last_log_steps = 0
        ensure_header(paths.trainer, TRAINER_HEADER)

    def step_once(self) -> bool:
        try:
            batch = self.replay.sample(self.service.hp.batch_size)
        except NotReady:
            return False
        except RpcError as e:
            if is_not_ready(e):
                return False
            raise
        if not self.ready:
            self.ready = True
            log_line(self.paths.events, f"TRAINER_READY batch={len(batch)}")
        self.service.step(batch)
        return True

    def maybe_log(self) -> None:
        now = self.clock()
        dt = now - self._last_log_t
        if dt < 1.0:
            return
        steps = self.service.train_steps
        self.last_rate = (steps - self._last_log_steps) / dt
        self._last_log_t, self._last_log_steps = now, steps
        if steps == 0:
            return
        loss = self.service.last_loss
        append_row(self.paths.trainer, TRAINER_HEADER, {
            "step": steps,
            "loss": f"{loss:.6g}",
            "version": self.service.version,
            "rate": f"{self.last_rate:.2f}",
        })
        log_line(self.paths.events, f"TRAIN step={steps} loss={loss:.6g} version={self.service.version} rate={self.last_rate:.1f}")

    def run(self, stop: threading.Event) -> None:
        period = 1.0 / self.service.hp.train_hz
        next_t = time.monotonic()
        while not stop.is_set():
            if not self.step_once():
                stop.wait(0.05)
                next_t = time.monotonic()
                self.maybe_log()
                continue
            self.maybe_log()
            next_t += period
            delay = next_t - time.monotonic()
            if delay > 0:
                stop.wait(delay)
            elif delay < -period:
                # fell behind; do not burst to catch up
                next_t = time.monotonic()


# ──────────────────────────────────────────────────
# Actor role
# ──────────────────────────────────────────────────

@dataclass
class _Episode:
    index: int = 0
    t_start: float = 0.0
    reward: float = 0.0
    steps: int = 0
    observations: int = 0
    # (s, a, r) of the last non-terminal action, completed by the next render
    pending: Optional[Tuple[StackedState, int, float]] = None


class ActorLoop:
    """
    Drives every agent of one sim instance with a local policy snapshot.

    Agents reset individually the moment their episode ends; the others keep
    acting in the same tick. Local params refresh after any episode end.
    """

    def __init__(self, topo: Topology, index: int, sim: SimClient, replay: ReplayClient, trainer: TrainerClient, paths: RunPaths, clock: Clock):
        inst = topo.sims[index]
        self.topo = topo
        self.index = index
        self.sim = sim
        self.replay = replay
        self.trainer = trainer
        self.paths = paths
        self.clock = clock
        self.ids = list(range(inst.n_agents))
        self.offset = topo.agent_offset(index)
        self.batched = topo.actor.render_mode == "batched"
        self.max_range = topo.sim.max_range
        self.cap = topo.hyperparams.episode_step_cap
        self.rng = np.random.default_rng(inst.actor_seed)
        self.params = build_network(topo.network_seed)
        self.epsilon = 1.0
        self.ticks = 0
        self.pushed = 0
        self.param_refreshes = 0
        self.max_tick_gap = 0.0
        self._last_tick_end: Optional[float] = None
        self.episode_csv = paths.actor_episodes(index)
        ensure_header(self.episode_csv, EPISODES_HEADER)
        t0 = clock()
        self.episodes: Dict[int, _Episode] = {i: _Episode(t_start=t0) for i in self.ids}

    def _render(self, ids: List[int]) -> List[StackedState]:
        return self.sim.get_states(ids, batched=self.batched)[0]

    def refresh_params(self) -> bool:
        got = self.trainer.get_params(self.params.version)
        if got is None:
            return False
        self.params = NetParams.from_blob(got[0])
        self.param_refreshes += 1
        return True

    def tick(self) -> List[EpisodeRecord]:
        t_begin = time.monotonic()
        if self._last_tick_end is not None:
            self.max_tick_gap = max(self.max_tick_gap, t_begin - self._last_tick_end)

        stats = self.replay.stats()
        eps = epsilon_schedule(stats.a_t, stats.capacity)
        self.epsilon = eps

        ids = self.ids
        states = self._render(ids)
        done_exps: List[Experience] = []
        for i, s in zip(ids, states):
            ep = self.episodes[i]
            ep.observations += 1
            if ep.pending is not None:
                s0, a0, r0 = ep.pending
                done_exps.append(Experience(s=s0, a=a0, s_next=s, r=r0, done=False))
                ep.pending = None

        q = q_values_batch(self.params, states, self.max_range)
        actions = [select_action(q[k], eps, self.rng) for k in range(len(ids))]
        self.sim.apply_actions(zip(ids, actions))
        outcomes = {o.agent_id: o for o in self.sim.step_period()}

        ended: List[Tuple[int, int, TerminalKind]] = []
        for k, i in enumerate(ids):
            o = outcomes[i]
            ep = self.episodes[i]
            ep.reward += o.reward
            ep.steps += 1
            if o.terminal != TerminalKind.ALIVE or ep.steps >= self.cap:
                ended.append((k, i, o.terminal))
            else:
                ep.pending = (states[k], actions[k], o.reward)

        records: List[EpisodeRecord] = []
        if ended:
            finals = self._render([i for _, i, _ in ended])
            t_end = self.clock()
            for (k, i, term), s_next in zip(ended, finals):
                ep = self.episodes[i]
                ep.observations += 1
                # truncation at the step cap keeps the bootstrap
                done_exps.append(Experience(s=states[k], a=actions[k], s_next=s_next, r=outcomes[i].reward, done=term != TerminalKind.ALIVE))
                records.append(EpisodeRecord(
                    agent_id=self.offset + i,
                    episode=ep.index,
                    reward=ep.reward,
                    steps=ep.steps,
                    epsilon=eps,
                    t_start=ep.t_start,
                    t_end=t_end,
                    terminal=term,
                    observations=ep.observations,
                ))
                self.sim.reset_vehicle(i)
                self.episodes[i] = _Episode(index=ep.index + 1, t_start=t_end)

        if done_exps:
            accepted, _, rejected = self.replay.push(done_exps)
            self.pushed += accepted
            if rejected:
                log_line(self.paths.events, f"PUSH_REJECTED actor={self.index} count={len(rejected)} first={rejected[0]}")

        if records:
            self.refresh_params()
            append_rows(self.episode_csv, EPISODES_HEADER, [r.as_row() for r in records])
            for r in records:
                self.trainer.report_episode(r)
                log_line(self.paths.events, f"EPISODE agent={r.agent_id} ep={r.episode} reward={r.reward:g} steps={r.steps} eps={r.epsilon:.3f} end={r.terminal.name}")

        self.ticks += 1
        if self.topo.actor.latency_injection_s > 0:
            time.sleep(self.topo.actor.latency_injection_s)
        self._last_tick_end = time.monotonic()
        return records

    def recover(self) -> None:
        """After a lost connection: drop partial episodes and respawn every agent."""
        for c in (self.sim, self.replay, self.trainer):
            c.close()
        self.sim.reset_all()
        t = self.clock()
        self.episodes = {i: _Episode(index=ep.index + 1, t_start=t) for i, ep in self.episodes.items()}

    def run(self, stop: threading.Event, max_ticks: int = 0) -> None:
        retries = self.topo.actor.retries
        failures = 0
        while not stop.is_set() and not (max_ticks and self.ticks >= max_ticks):
            try:
                self.tick()
                failures = 0
            except (RpcConnectionError, RpcTimeout) as e:
                failures += 1
                log_line(self.paths.events, f"ACTOR_RPC_ERROR actor={self.index} attempt={failures}/{retries} err={e}")
                if failures > retries:
                    log_line(self.paths.events, f"ACTOR_STOPPED actor={self.index} ticks={self.ticks}")
                    raise ExperimentError(f"actor {self.index} lost its services: {e}") from e
                sleep_backoff(failures - 1)
                try:
                    self.recover()
                except RpcError:
                    pass


# ──────────────────────────────────────────────────
# Standalone role entry points
# ──────────────────────────────────────────────────

def _wait_shutdown(stop: threading.Event) -> None:
    while not stop.is_set() and not _shutdown_flag.is_set():
        stop.wait(0.5)


def _role_paths(topo: Topology) -> RunPaths:
    return run_paths(topo.metrics_dir, topo.run_id)


def run_sim(topo: Topology, index: int = 0, stop: Optional[threading.Event] = None) -> None:
    stop = stop or threading.Event()
    paths = _role_paths(topo)
    _install_signal_handlers(paths.events)
    inst = topo.sims[index]
    server = serve(SimService(build_sim(topo, index), f"sim{index}").handlers(), inst.address, role=f"sim{index}")
    log_line(paths.events, f"SIM_START index={index} addr={server.address[0]}:{server.address[1]} agents={inst.n_agents} arena={inst.arena_path.name}")
    try:
        _wait_shutdown(stop)
    finally:
        server.stop()
        log_line(paths.events, f"SIM_STOP index={index}")


def run_replay(topo: Topology, stop: Optional[threading.Event] = None) -> None:
    stop = stop or threading.Event()
    paths = _role_paths(topo)
    _install_signal_handlers(paths.events)
    service = ReplayService(ReplayBuffer(topo.hyperparams.replay_capacity), topo.replay_seed)
    server = serve(service.handlers(), topo.replay_address, role="replay")
    log_line(paths.events, f"REPLAY_START addr={server.address[0]}:{server.address[1]} capacity={topo.hyperparams.replay_capacity}")
    try:
        _wait_shutdown(stop)
    finally:
        server.stop()
        st = service.buffer.stats()
        log_line(paths.events, f"REPLAY_STOP len={st.len} a_t={st.a_t}")


def run_trainer(topo: Topology, stop: Optional[threading.Event] = None) -> TrainerService:
    stop = stop or threading.Event()
    paths = _role_paths(topo)
    _install_signal_handlers(paths.events)
    service = TrainerService(topo.hyperparams, topo.sim.max_range, topo.network_seed, topo.moving_window, paths.events)
    server = serve(service.handlers(), topo.trainer_address, role="trainer")
    log_line(paths.events, f"TRAINER_START addr={server.address[0]}:{server.address[1]} hz={topo.hyperparams.train_hz}")
    merged = threading.Event()
    watcher = threading.Thread(target=lambda: (_wait_shutdown(stop), merged.set()), daemon=True)
    watcher.start()
    try:
        with ReplayClient(topo.replay_address, timeout=topo.actor.rpc_timeout, connect_retries=10) as replay:
            TrainerLoop(service, replay, paths, RunClock()).run(merged)
    finally:
        server.stop()
        write_atomic(paths.params, service.params_blob()[1])
        log_line(paths.events, f"TRAINER_STOP steps={service.train_steps} version={service.version} nonfinite={service.nonfinite_skips}")
    return service


def _actor_clients(topo: Topology, index: int, sim_address=None, replay_address=None, trainer_address=None):
    timeout = topo.actor.rpc_timeout
    retries = max(1, topo.actor.retries)
    return (
        SimClient(sim_address or topo.sims[index].address, timeout=timeout, connect_retries=retries),
        ReplayClient(replay_address or topo.replay_address, timeout=timeout, connect_retries=retries),
        TrainerClient(trainer_address or topo.trainer_address, timeout=timeout, connect_retries=retries),
    )


def run_actor(topo: Topology, index: int = 0, stop: Optional[threading.Event] = None) -> ActorLoop:
    stop = stop or threading.Event()
    paths = _role_paths(topo)
    _install_signal_handlers(paths.events)
    sim, replay, trainer = _actor_clients(topo, index)
    actor = ActorLoop(topo, index, sim, replay, trainer, paths, RunClock())
    log_line(paths.events, f"ACTOR_START index={index} agents={len(actor.ids)} render={topo.actor.render_mode}")
    merged = threading.Event()
    threading.Thread(target=lambda: (_wait_shutdown(stop), merged.set()), daemon=True).start()
    try:
        actor.run(merged, topo.budget.max_actor_ticks)
    finally:
        for c in (sim, replay, trainer):
            c.close()
        log_line(paths.events, f"ACTOR_STOP index={index} ticks={actor.ticks} pushed={actor.pushed}")
    return actor


# ──────────────────────────────────────────────────
# Experiment
# ──────────────────────────────────────────────────

class LocalCluster:
    """Every server role of a topology in this process, on loopback."""

    def __init__(self, topo: Topology, paths: RunPaths):
        self.servers: List[RpcServer] = []
        self.worlds: Dict[int, World] = {}
        self.sim_addresses: Dict[int, Tuple[str, int]] = {}
        try:
            for i, inst in enumerate(topo.sims):
                if inst.n_agents == 0:
                    continue
                self.worlds[i] = build_sim(topo, i)
                srv = serve(SimService(self.worlds[i], f"sim{i}").handlers(), inst.address, role=f"sim{i}")
                self.servers.append(srv)
                self.sim_addresses[i] = srv.address
            self.replay = ReplayService(ReplayBuffer(topo.hyperparams.replay_capacity), topo.replay_seed)
            self.replay_server = serve(self.replay.handlers(), topo.replay_address, role="replay")
            self.servers.append(self.replay_server)
            self.trainer = TrainerService(topo.hyperparams, topo.sim.max_range, topo.network_seed, topo.moving_window, paths.events)
            self.trainer_server = serve(self.trainer.handlers(), topo.trainer_address, role="trainer")
            self.servers.append(self.trainer_server)
        except Exception:
            self.stop()
            raise

    @property
    def observations_rendered(self) -> int:
        return sum(w.observations_rendered for w in self.worlds.values())

    def stop(self) -> None:
        for s in self.servers:
            s.stop()
        self.servers = []


def write_manifest(topo: Topology, paths: RunPaths) -> None:
    lines = [
        f"run_id={topo.run_id}",
        f"build={ENGINE_BUILD_TAG}",
        f"config={topo.config_path or '-'}",
        f"created={pd.Timestamp.now(tz='UTC').isoformat()}",
        f"mode={topo.mode} lockstep={topo.lockstep.enabled} render_mode={topo.actor.render_mode}",
        f"total_agents={topo.total_agents} threshold={topo.threshold:g} window={topo.moving_window}",
        f"seeds network={topo.network_seed} replay={topo.replay_seed} trainer={topo.trainer_seed}",
    ]
    for i, s in enumerate(topo.sims):
        lines.append(f"sim[{i}] addr={s.address[0]}:{s.address[1]} agents={s.n_agents} sim_seed={s.seed} actor_seed={s.actor_seed}")
    arenas = sorted({s.arena_path for s in topo.sims} | ({topo.eval_arena} if topo.eval_arena else set()))
    for p in arenas:
        digest = content_hash(Path(p).read_bytes()) if Path(p).exists() else "missing"
        lines.append(f"arena {p} blob={digest}")
    lines.append("config_echo:")
    lines.append(json.dumps(topo.raw, indent=2, sort_keys=True, default=str))
    write_atomic(paths.manifest, "\n".join(lines) + "\n")


def merge_episodes(paths: RunPaths, n_actors: int) -> int:
    """Merge episodes_<i>.csv into episodes.csv ordered by (t_end, agent_id, episode). Returns row count."""
    frames = [f for f in (read_rows(paths.actor_episodes(i), EPISODES_HEADER) for i in range(n_actors)) if len(f)]
    df = pd.concat(frames, ignore_index=True) if frames else pd.DataFrame(columns=EPISODES_HEADER)
    if len(df):
        keys = pd.DataFrame({c: pd.to_numeric(df[c]) for c in ("t_end", "agent_id", "episode")})
        order = keys.sort_values(["t_end", "agent_id", "episode"], kind="mergesort").index
        df = df.loc[order]
    write_atomic(paths.episodes, df[EPISODES_HEADER].to_csv(index=False, lineterminator="\n"))
    return len(df)


def _clear_outputs(paths: RunPaths) -> None:
    for p in list(paths.root.glob("episodes*.csv")) + [paths.trainer, paths.result, paths.params]:
        try:
            p.unlink()
        except FileNotFoundError:
            pass


@dataclass
class _Outcome:
    status: str = "not_converged"
    time_to_threshold: Optional[float] = None
    wall_time_to_threshold: Optional[float] = None
    moving_avg: Optional[float] = None
    error: str = ""


def _check_converged(trainer: TrainerService, topo: Topology, clock: Clock, wall0: float, out: _Outcome, events) -> bool:
    avg = trainer.moving_avg()
    out.moving_avg = avg
    if avg is not None and avg >= topo.threshold:
        out.status = "converged"
        out.time_to_threshold = clock()
        out.wall_time_to_threshold = time.monotonic() - wall0
        log_line(events, f"CONVERGED moving_avg={avg:.2f} threshold={topo.threshold:g} t={out.time_to_threshold:.3f}s episodes={trainer.episodes}")
        return True
    return False


def _run_lockstep(topo: Topology, paths: RunPaths, cluster: LocalCluster, stop: threading.Event, out: _Outcome) -> List[ActorLoop]:
    clock = RunClock(simulated=True)
    wall0 = time.monotonic()
    actors = []
    for i in cluster.sim_addresses:
        sim, replay, trainer = _actor_clients(topo, i, cluster.sim_addresses[i], cluster.replay_server.address, cluster.trainer_server.address)
        actors.append(ActorLoop(topo, i, sim, replay, trainer, paths, clock))
    replay = ReplayClient(cluster.replay_server.address, timeout=topo.actor.rpc_timeout)
    learner = TrainerLoop(cluster.trainer, replay, paths, clock)
    try:
        while not stop.is_set() and not _shutdown_flag.is_set():
            clock.advance(topo.sim.action_period)
            for a in actors:
                a.tick()
            for _ in range(topo.lockstep.train_steps_per_tick):
                if not learner.step_once():
                    break
            learner.maybe_log()
            if _check_converged(cluster.trainer, topo, clock, wall0, out, paths.events):
                break
            if topo.budget.max_actor_ticks and actors[0].ticks >= topo.budget.max_actor_ticks:
                break
            if time.monotonic() - wall0 > topo.budget.max_wall_seconds:
                break
    finally:
        for a in actors:
            for c in (a.sim, a.replay, a.trainer):
                c.close()
        replay.close()
    return actors


def _run_threaded(topo: Topology, paths: RunPaths, cluster: LocalCluster, stop: threading.Event, out: _Outcome) -> List[ActorLoop]:
    clock = RunClock()
    wall0 = time.monotonic()
    roles_stop = threading.Event()
    failures: List[str] = []
    actors: List[ActorLoop] = []

    def guarded(name: str, fn: Callable[[], None]) -> Callable[[], None]:
        def _run():
            try:
                fn()
            except Exception as e:
                failures.append(f"{name}: {e!r}")
                log_line(paths.events, f"ROLE_FAILED role={name} err={e!r}")
        return _run

    for i in cluster.sim_addresses:
        sim, replay, trainer = _actor_clients(topo, i, cluster.sim_addresses[i], cluster.replay_server.address, cluster.trainer_server.address)
        actors.append(ActorLoop(topo, i, sim, replay, trainer, paths, clock))
    replay = ReplayClient(cluster.replay_server.address, timeout=topo.actor.rpc_timeout)
    learner = TrainerLoop(cluster.trainer, replay, paths, clock)

    threads = [threading.Thread(target=guarded("trainer", lambda: learner.run(roles_stop)), name="trainer", daemon=True)]
    for a in actors:
        threads.append(threading.Thread(
            target=guarded(f"actor{a.index}", lambda a=a: a.run(roles_stop, topo.budget.max_actor_ticks)),
            name=f"actor{a.index}",
            daemon=True,
        ))
    for t in threads:
        t.start()
    try:
        while not stop.is_set() and not _shutdown_flag.is_set():
            stop.wait(0.1)
            if failures:
                out.status = "failed"
                out.error = "; ".join(failures)
                break
            if _check_converged(cluster.trainer, topo, clock, wall0, out, paths.events):
                break
            if time.monotonic() - wall0 > topo.budget.max_wall_seconds:
                break
            if not any(t.is_alive() for t in threads[1:]):
                break
    finally:
        roles_stop.set()
        for t in threads:
            t.join(timeout=10.0)
        for a in actors:
            for c in (a.sim, a.replay, a.trainer):
                c.close()
        replay.close()
    return actors


def _run_attach(topo: Topology, paths: RunPaths, stop: threading.Event, out: _Outcome) -> Dict[str, Any]:
    """Monitor remote roles through the trainer's Health endpoint."""
    wall0 = time.monotonic()
    health: Dict[str, Any] = {}
    with TrainerClient(topo.trainer_address, timeout=topo.actor.rpc_timeout, connect_retries=topo.actor.retries + 1) as trainer:
        while not stop.is_set() and not _shutdown_flag.is_set():
            health = trainer.health()
            avg = health["moving_avg"]
            out.moving_avg = None if math.isnan(avg) else float(avg)
            if out.moving_avg is not None and out.moving_avg >= topo.threshold:
                out.status = "converged"
                out.time_to_threshold = out.wall_time_to_threshold = time.monotonic() - wall0
                log_line(paths.events, f"CONVERGED moving_avg={out.moving_avg:.2f} t={out.time_to_threshold:.1f}s")
                break
            if time.monotonic() - wall0 > topo.budget.max_wall_seconds:
                break
            stop.wait(1.0)
    return health


def run_experiment(config: Union[str, Path, Topology], stop: Optional[threading.Event] = None) -> Path:
    """
    Run until the moving-average episode reward over the last `moving_window`
    episodes reaches `threshold`, or the budget runs out. Returns the metrics directory.
    """
    topo = config if isinstance(config, Topology) else load_topology(str(config))
    stop = stop or threading.Event()
    paths = run_paths(topo.metrics_dir, topo.run_id)
    with InstanceLock(paths.lock, run_id=topo.run_id):
        _clear_outputs(paths)
        ensure_header(paths.trainer, TRAINER_HEADER)
        write_manifest(topo, paths)
        log_line(paths.events, f"RUN_START build={ENGINE_BUILD_TAG} run_id={topo.run_id} agents={topo.total_agents} mode={topo.mode} lockstep={topo.lockstep.enabled}")
        out = _Outcome()
        wall0 = time.monotonic()
        result: Dict[str, Any] = {"run_id": topo.run_id, "n_agents": topo.total_agents, "threshold": topo.threshold, "lockstep": topo.lockstep.enabled, "render_mode": topo.actor.render_mode}

        if topo.mode == "attach":
            try:
                health = _run_attach(topo, paths, stop, out)
            except RpcError as e:
                out.status, out.error = "failed", repr(e)
                health = {}
            result.update({"episodes": health.get("episodes", 0), "train_steps": health.get("train_steps", 0), "params_version": health.get("version", 0)})
            merge_episodes(paths, len(topo.sims))
        else:
            cluster = LocalCluster(topo, paths)
            actors: List[ActorLoop] = []
            try:
                runner = _run_lockstep if topo.lockstep.enabled else _run_threaded
                actors = runner(topo, paths, cluster, stop, out)
            except Exception as e:
                out.status, out.error = "failed", repr(e)
                log_line(paths.events, f"ROLE_FAILED err={e!r}")
            finally:
                cluster.stop()
            trainer = cluster.trainer
            write_atomic(paths.params, trainer.params_blob()[1])
            result.update({
                "episodes": trainer.episodes,
                "train_steps": trainer.train_steps,
                "target_syncs": trainer.target_syncs,
                "nonfinite_skips": trainer.nonfinite_skips,
                "params_version": trainer.version,
                "replay_a_t": cluster.replay.buffer.stats().a_t,
                "actor_ticks": [a.ticks for a in actors],
                "max_tick_gap_s": max((a.max_tick_gap for a in actors), default=0.0),
                "observations_rendered": cluster.observations_rendered,
            })
            merge_episodes(paths, len(topo.sims))

        result.update({
            "status": out.status,
            "time_to_threshold": out.time_to_threshold,
            "wall_time_to_threshold": out.wall_time_to_threshold,
            "moving_avg": out.moving_avg,
            "elapsed_s": time.monotonic() - wall0,
            "error": out.error,
        })
        save_result_atomic(paths.result, result)
        log_line(paths.events, f"RUN_END status={out.status} episodes={result.get('episodes')} train_steps={result.get('train_steps')}")
        if out.status == "failed":
            raise ExperimentError(f"experiment {topo.run_id} failed: {out.error} (metrics kept in {paths.root})")
        return paths.root


# ──────────────────────────────────────────────────
# Evaluation
# ──────────────────────────────────────────────────

def evaluate(topo: Topology, params: NetParams, arena_path: Optional[Path] = None, episodes: Optional[int] = None, seed: int = 0) -> Dict[str, Any]:
    """Greedy rollouts of one agent; success = reached the goal plane."""
    arena_path = Path(arena_path or topo.eval_arena or topo.sims[0].arena_path)
    n = int(episodes or topo.eval_episodes)
    world = create_world(load_arena_file(arena_path, topo.sim.agent_radius), 1, replace(topo.sim, realtime=False), seed)
    rewards, steps_list, successes = [], [], 0
    for _ in range(n):
        world.respawn(0)
        reward, steps = 0.0, 0
        while True:
            now, prev, vel = world.get_states_batched([0])[0]
            a = int(np.argmax(q_values(params, StackedState(now, prev, vel), topo.sim.max_range)))
            world.apply_action(0, a)
            o = world.step_action_period()[0]
            reward += o.reward
            steps += 1
            if o.terminal != TerminalKind.ALIVE or steps >= topo.hyperparams.episode_step_cap:
                break
        successes += int(o.terminal == TerminalKind.GOAL)
        rewards.append(reward)
        steps_list.append(steps)
    return {
        "arena": str(arena_path),
        "episodes": n,
        "success_rate": successes / n if n else 0.0,
        "mean_reward": float(np.mean(rewards)) if rewards else 0.0,
        "mean_steps": float(np.mean(steps_list)) if steps_list else 0.0,
    }


def load_params_file(path: Union[str, Path]) -> NetParams:
    return NetParams.from_blob(Path(path).read_bytes())


def read_result(metrics_dir: Union[str, Path]) -> Dict[str, Any]:
    return load_result(Path(metrics_dir) / "result.json")
