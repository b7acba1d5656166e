"""
Vectorized multi-agent quadrotor world.

Agents are non-interactive: they never collide with each other and never appear
in each other's depth images. Every state request goes through the FrameClock,
which models the game/render thread barrier: a batched request waits for one
tick, a non-batched request waits for one tick per agent.
"""
from __future__ import annotations

import math
import threading
import time
from dataclasses import dataclass, field
from typing import Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from quadrl.domain.errors import SimError
from quadrl.domain.models import (
    ACTIONS,
    IMAGE_SIZE,
    REWARD_ALIVE,
    REWARD_COLLISION,
    Pose,
    StepOutcome,
    TerminalKind,
)
from quadrl.sim.arena import ArenaSpec, collides, raycast_many, reached_goal, sample_spawn

AgentState = Tuple[np.ndarray, np.ndarray, np.ndarray]  # (image_now, image_prev, velocity)

_ACTION_NAMES = {"left": 0, "right": 1}


@dataclass(frozen=True)
class SimConfig:
    physics_hz: int = 4
    action_period: float = 1.0
    forward_velocity: float = 1.0
    camera_fov: float = math.pi / 2.0
    max_range: float = 20.0
    frame_period: float = 0.016
    agent_radius: float = 0.3
    lateral_clamp: float = 1.0
    # False: the frame clock advances without sleeping (tests, lockstep runs)
    realtime: bool = True

    def __post_init__(self):
        substeps = self.physics_hz * self.action_period
        if self.physics_hz <= 0 or self.action_period <= 0 or abs(substeps - round(substeps)) > 1e-9 or round(substeps) < 1:
            raise ValueError(f"physics_hz * action_period must be a whole number of substeps, got {substeps}")
        if self.frame_period <= 0:
            raise ValueError("frame_period must be > 0")
        if self.agent_radius <= 0 or self.max_range <= 0 or self.lateral_clamp < 0:
            raise ValueError("agent_radius, max_range must be > 0 and lateral_clamp >= 0")
        if not (0 < self.camera_fov < math.pi):
            raise ValueError("camera_fov must be in (0, pi)")

    @property
    def substeps(self) -> int:
        return int(round(self.physics_hz * self.action_period))


class FrameClock:
    """Render-thread tick counter; barrier() blocks until the next tick."""

    def __init__(self, frame_period: float, realtime: bool = True):
        self.frame_period = float(frame_period)
        self.realtime = bool(realtime)
        self.tick_index = 0
        self.barrier_waits = 0
        self._t0 = time.monotonic()
        self._lock = threading.Lock()

    def _now_tick(self) -> int:
        return int((time.monotonic() - self._t0) // self.frame_period)

    def barrier(self) -> int:
        with self._lock:
            if self.realtime:
                target = self._now_tick() + 1
                wake = self._t0 + target * self.frame_period
                delay = wake - time.monotonic()
                if delay > 0:
                    time.sleep(delay)
                self.tick_index = max(self.tick_index + 1, target)
            else:
                self.tick_index += 1
            self.barrier_waits += 1
            return self.tick_index


@dataclass
class QuadState:
    pose: Pose
    velocity: np.ndarray = field(default_factory=lambda: np.zeros(3))
    desired_lateral: float = 0.0
    alive: bool = True
    steps_in_episode: int = 0
    prev_image: Optional[np.ndarray] = None


def camera_rays(fov: float, size: int = IMAGE_SIZE) -> Tuple[np.ndarray, np.ndarray]:
    """
    Unit ray directions (size*size, 3) for a camera looking along +x, row 0 at the top,
    column 0 on the left (+y). Also returns each ray's cosine to the optical axis.
    """
    half = math.tan(fov / 2.0)
    centers = (np.arange(size) + 0.5) / size * 2.0 - 1.0
    v, u = np.meshgrid(centers, centers, indexing="ij")
    dirs = np.stack([np.ones_like(u), -u * half, -v * half], axis=-1).reshape(-1, 3)
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    return dirs, dirs[:, 0].copy()


class World:
    def __init__(self, arena: ArenaSpec, n_agents: int, config: SimConfig, seed: int = 0):
        if int(n_agents) < 1:
            raise SimError("n_agents must be >= 1")
        self.arena = arena
        self.config = config
        self.seed = int(seed)
        self.clock = FrameClock(config.frame_period, config.realtime)
        self.observations_rendered = 0
        self._lock = threading.RLock()
        # agent i draws from child i of the seed, independent of n_agents
        children = np.random.SeedSequence(self.seed).spawn(int(n_agents))
        self._rngs = [np.random.default_rng(c) for c in children]
        self._rays, self._cos = camera_rays(config.camera_fov)
        # overlapping spawns are fine: agents never see or touch each other
        self.agents: List[QuadState] = [QuadState(pose=sample_spawn(arena, rng)) for rng in self._rngs]

    @property
    def n_agents(self) -> int:
        return len(self.agents)

    def _agent(self, agent_id: int) -> QuadState:
        if not isinstance(agent_id, (int, np.integer)) or not (0 <= int(agent_id) < len(self.agents)):
            raise SimError(f"unknown agent_id {agent_id!r}")
        return self.agents[int(agent_id)]

    def alive_ids(self) -> List[int]:
        with self._lock:
            return [i for i, a in enumerate(self.agents) if a.alive]

    # ── actions / physics ──

    def apply_action(self, agent_id: int, action: Union[int, str]) -> float:
        with self._lock:
            agent = self._agent(agent_id)
            if not agent.alive:
                raise SimError(f"agent {agent_id} is dead; reset it first")
            idx = _ACTION_NAMES.get(action, action) if isinstance(action, str) else action
            if idx not in (0, 1):
                raise SimError(f"unknown action {action!r}")
            clamp = self.config.lateral_clamp
            agent.desired_lateral = float(min(clamp, max(-clamp, agent.desired_lateral + ACTIONS[int(idx)])))
            return agent.desired_lateral

    def step_action_period(self) -> List[StepOutcome]:
        """
        Advance every live agent one action period in `substeps` physics steps.
        Collision is tested after each substep and the vehicle stops at the first
        colliding position.
        """
        cfg = self.config
        dt = cfg.action_period / cfg.substeps
        out: List[StepOutcome] = []
        with self._lock:
            for i, agent in enumerate(self.agents):
                if not agent.alive:
                    continue
                vel = np.array([cfg.forward_velocity, agent.desired_lateral, 0.0])
                pos = agent.pose.as_array()
                hit = False
                for _ in range(cfg.substeps):
                    pos = pos + vel * dt
                    if collides(self.arena, pos, cfg.agent_radius):
                        hit = True
                        break
                agent.pose = Pose(position=tuple(pos), yaw=agent.pose.yaw)
                agent.velocity = vel
                agent.steps_in_episode += 1
                if hit:
                    agent.alive = False
                    out.append(StepOutcome(i, REWARD_COLLISION, TerminalKind.COLLISION))
                elif reached_goal(self.arena, pos):
                    agent.alive = False
                    out.append(StepOutcome(i, REWARD_ALIVE, TerminalKind.GOAL))
                else:
                    out.append(StepOutcome(i, REWARD_ALIVE, TerminalKind.ALIVE))
        return out

    # ── rendering ──

    def _render(self, agent_ids: Sequence[int]) -> List[np.ndarray]:
        n_rays = self._rays.shape[0]
        origins = np.concatenate(
            [np.broadcast_to(self.agents[i].pose.as_array(), (n_rays, 3)) for i in agent_ids]
        )
        dirs = np.tile(self._rays, (len(agent_ids), 1))
        cos = np.tile(self._cos, len(agent_ids))
        # planar depth: distance along the optical axis
        depth = np.minimum(raycast_many(self.arena, origins, dirs, math.inf) * cos, self.config.max_range)
        depth = depth.astype(np.float32).reshape(len(agent_ids), IMAGE_SIZE, IMAGE_SIZE)
        self.observations_rendered += len(agent_ids)
        return [depth[k] for k in range(len(agent_ids))]

    def render_agent_depth(self, agent_id: int) -> np.ndarray:
        with self._lock:
            self._agent(agent_id)
            return self._render([int(agent_id)])[0]

    def _stack(self, agent_id: int, image: np.ndarray) -> AgentState:
        agent = self.agents[agent_id]
        prev = image if agent.prev_image is None else agent.prev_image
        agent.prev_image = image
        return image, prev, np.asarray(agent.velocity, dtype=np.float32).copy()

    def get_states_batched(self, agent_ids: Iterable[int]) -> List[AgentState]:
        ids = list(agent_ids)
        # The world lock stays held through the frame barrier (also in the
        # nonbatched path): state collections on one sim run one at a time.
        with self._lock:
            for i in ids:
                self._agent(i)
            ids = [int(i) for i in ids]
            self.clock.barrier()
            if not ids:
                return []
            images = self._render(ids)
            return [self._stack(i, img) for i, img in zip(ids, images)]

    def get_states_nonbatched(self, agent_ids: Iterable[int]) -> List[AgentState]:
        ids = list(agent_ids)
        with self._lock:
            for i in ids:
                self._agent(i)
            out = []
            for i in ids:
                self.clock.barrier()
                out.append(self._stack(int(i), self._render([int(i)])[0]))
            return out

    # ── resets ──

    def reset_vehicle(self, agent_id: int, pose: Pose) -> None:
        with self._lock:
            agent = self._agent(agent_id)
            if collides(self.arena, pose.position, self.config.agent_radius):
                raise SimError(f"reset pose {pose.position} for agent {agent_id} is in collision")
            agent.pose = pose
            agent.velocity = np.zeros(3)
            agent.desired_lateral = 0.0
            agent.alive = True
            agent.steps_in_episode = 0
            agent.prev_image = None

    def respawn(self, agent_id: int) -> Pose:
        """reset_vehicle at a fresh spawn sample from the agent's own RNG stream."""
        with self._lock:
            self._agent(agent_id)
            pose = sample_spawn(self.arena, self._rngs[int(agent_id)])
            self.reset_vehicle(agent_id, pose)
            return pose

    def reset_all(self) -> None:
        with self._lock:
            for i in range(len(self.agents)):
                self.respawn(i)


def create_world(arena: ArenaSpec, n_agents: int, config: SimConfig, seed: int = 0) -> World:
    return World(arena, n_agents, config, seed)
