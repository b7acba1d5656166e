from __future__ import annotations

import math
from dataclasses import dataclass
from enum import IntEnum
from typing import Tuple

import numpy as np

IMAGE_SIZE = 32

# Action index -> lateral velocity increment (m/s). Body frame: left = +y.
ACTIONS: Tuple[float, float] = (0.25, -0.25)
LEFT, RIGHT = 0, 1

REWARD_COLLISION = -100.0
REWARD_ALIVE = 3.0


class TerminalKind(IntEnum):
    ALIVE = 0
    COLLISION = 1
    GOAL = 2


def wrap_yaw(yaw: float) -> float:
    """Map an angle to [-pi, pi)."""
    y = (float(yaw) + math.pi) % (2.0 * math.pi) - math.pi
    return y


@dataclass(frozen=True)
class Pose:
    position: Tuple[float, float, float]
    yaw: float = 0.0

    def __post_init__(self):
        pos = tuple(float(v) for v in self.position)
        if len(pos) != 3 or not all(math.isfinite(v) for v in pos):
            raise ValueError(f"Pose position must be 3 finite values, got {self.position!r}")
        object.__setattr__(self, "position", pos)
        object.__setattr__(self, "yaw", wrap_yaw(self.yaw))

    def as_array(self) -> np.ndarray:
        return np.asarray(self.position, dtype=np.float64)


@dataclass(frozen=True)
class StepOutcome:
    agent_id: int
    reward: float
    terminal: TerminalKind


@dataclass(frozen=True)
class StackedState:
    """(I_t, I_{t-1}, v_t): two 32x32 depth images (meters) + linear velocity (m/s)."""
    image_now: np.ndarray
    image_prev: np.ndarray
    velocity: np.ndarray

    def __post_init__(self):
        now = np.asarray(self.image_now, dtype=np.float32)
        prev = np.asarray(self.image_prev, dtype=np.float32)
        vel = np.asarray(self.velocity, dtype=np.float32).reshape(-1)
        if now.shape != (IMAGE_SIZE, IMAGE_SIZE) or prev.shape != (IMAGE_SIZE, IMAGE_SIZE):
            raise ValueError(f"depth images must be {IMAGE_SIZE}x{IMAGE_SIZE}, got {now.shape} / {prev.shape}")
        if vel.shape != (3,) or not np.all(np.isfinite(vel)):
            raise ValueError(f"velocity must be 3 finite values, got {self.velocity!r}")
        object.__setattr__(self, "image_now", now)
        object.__setattr__(self, "image_prev", prev)
        object.__setattr__(self, "velocity", vel)

    def same_as(self, other: "StackedState") -> bool:
        return (
            np.array_equal(self.image_now, other.image_now)
            and np.array_equal(self.image_prev, other.image_prev)
            and np.array_equal(self.velocity, other.velocity)
        )


@dataclass(frozen=True)
class Experience:
    s: StackedState
    a: int
    s_next: StackedState
    r: float
    done: bool

    def same_as(self, other: "Experience") -> bool:
        return (
            self.a == other.a
            and float(self.r) == float(other.r)
            and bool(self.done) == bool(other.done)
            and self.s.same_as(other.s)
            and self.s_next.same_as(other.s_next)
        )


@dataclass
class EpisodeRecord:
    agent_id: int
    episode: int
    reward: float
    steps: int
    epsilon: float
    t_start: float
    t_end: float
    terminal: TerminalKind = TerminalKind.COLLISION
    observations: int = 0

    def as_row(self) -> dict:
        return {
            "agent_id": self.agent_id,
            "episode": self.episode,
            "reward": f"{self.reward:g}",
            "steps": self.steps,
            "epsilon": f"{self.epsilon:.6f}",
            "t_start": f"{self.t_start:.3f}",
            "t_end": f"{self.t_end:.3f}",
        }
