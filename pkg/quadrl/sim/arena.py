"""
Arena geometry: bounds, full-height box obstacles, a spawn strip and the goal plane.

The world is a 3D extrusion of a 2D layout. Boxes are closed sets: a point on a
face is inside. All numbers are meters / radians.

arena v1 text format (line-oriented, '#' comments):

    arena v1
    bounds x0 y0 z0 x1 y1 z1
    spawn  x0 y0 x1 y1 z yaw
    goal   x
    box    x0 y0 z0 x1 y1 z1     (repeated)
"""
from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import List, Sequence, Tuple

import numpy as np

from quadrl.domain.errors import ArenaInvariantError, ArenaParseError
from quadrl.domain.models import Pose

DEFAULT_AGENT_RADIUS = 0.3
DEFAULT_MAX_RANGE = 20.0

Vec3 = Tuple[float, float, float]


@dataclass(frozen=True)
class Box:
    lo: Vec3
    hi: Vec3

    def contains(self, p: Sequence[float]) -> bool:
        return all(self.lo[i] <= p[i] <= self.hi[i] for i in range(3))


@dataclass(frozen=True)
class SpawnRegion:
    x0: float
    y0: float
    x1: float
    y1: float
    z: float
    yaw: float = 0.0

    @property
    def center(self) -> Vec3:
        return ((self.x0 + self.x1) / 2.0, (self.y0 + self.y1) / 2.0, self.z)


@dataclass(frozen=True)
class ArenaSpec:
    bounds: Box
    spawn: SpawnRegion
    goal_x: float
    obstacles: Tuple[Box, ...] = field(default_factory=tuple)

    @cached_property
    def obstacle_lo(self) -> np.ndarray:
        if not self.obstacles:
            return np.zeros((0, 3))
        return np.asarray([b.lo for b in self.obstacles], dtype=np.float64)

    @cached_property
    def obstacle_hi(self) -> np.ndarray:
        if not self.obstacles:
            return np.zeros((0, 3))
        return np.asarray([b.hi for b in self.obstacles], dtype=np.float64)

    def without_obstacle(self, index: int) -> "ArenaSpec":
        obs = tuple(b for i, b in enumerate(self.obstacles) if i != index)
        return ArenaSpec(bounds=self.bounds, spawn=self.spawn, goal_x=self.goal_x, obstacles=obs)


# ──────────────────────────────────────────────────
# Parsing / writing
# ──────────────────────────────────────────────────

_ORDER = ("arena", "bounds", "spawn", "goal", "box")
_ARITY = {"bounds": 6, "spawn": 6, "goal": 1, "box": 6}


def _floats(line_no: int, keyword: str, parts: List[str]) -> List[float]:
    want = _ARITY[keyword]
    if len(parts) != want:
        raise ArenaParseError(line_no, f"'{keyword}' expects {want} numbers, got {len(parts)}")
    out = []
    for p in parts:
        try:
            v = float(p)
        except ValueError:
            raise ArenaParseError(line_no, f"not a number: {p!r}") from None
        if not math.isfinite(v):
            raise ArenaParseError(line_no, f"non-finite number: {p!r}")
        out.append(v)
    return out


def parse_arena(text: str) -> ArenaSpec:
    """Grammar only; no invariant checks (see load_arena)."""
    stage = -1
    bounds = spawn = goal = None
    boxes: List[Box] = []

    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        keyword, *parts = line.split()

        if keyword not in _ORDER:
            raise ArenaParseError(line_no, f"unknown keyword {keyword!r}")
        idx = _ORDER.index(keyword)
        if idx < stage or (idx == stage and keyword != "box") or idx > stage + 1:
            expected = _ORDER[min(stage + 1, len(_ORDER) - 1)] if stage < 3 else "box"
            raise ArenaParseError(line_no, f"unexpected {keyword!r}, expected {expected!r}")
        stage = idx

        if keyword == "arena":
            if parts != ["v1"]:
                raise ArenaParseError(line_no, f"unsupported header {line!r} (want 'arena v1')")
        elif keyword == "bounds":
            v = _floats(line_no, keyword, parts)
            bounds = Box(lo=(v[0], v[1], v[2]), hi=(v[3], v[4], v[5]))
        elif keyword == "spawn":
            v = _floats(line_no, keyword, parts)
            spawn = SpawnRegion(*v)
        elif keyword == "goal":
            goal = _floats(line_no, keyword, parts)[0]
        else:
            v = _floats(line_no, keyword, parts)
            boxes.append(Box(lo=(v[0], v[1], v[2]), hi=(v[3], v[4], v[5])))

    if stage == -1:
        raise ArenaParseError(1, "empty arena file")
    if bounds is None or spawn is None or goal is None:
        missing = [k for k, v in (("bounds", bounds), ("spawn", spawn), ("goal", goal)) if v is None]
        raise ArenaParseError(len(text.splitlines()) or 1, "missing " + ", ".join(missing))

    return ArenaSpec(bounds=bounds, spawn=spawn, goal_x=goal, obstacles=tuple(boxes))


def validate_arena(spec: ArenaSpec, agent_radius: float = DEFAULT_AGENT_RADIUS) -> ArenaSpec:
    b, s, r = spec.bounds, spec.spawn, float(agent_radius)

    if not all(b.lo[i] < b.hi[i] for i in range(3)):
        raise ArenaInvariantError("bounds-ordered", f"bounds min must be < max, got {b}")
    for i, box in enumerate(spec.obstacles):
        if not all(box.lo[k] < box.hi[k] for k in range(3)):
            raise ArenaInvariantError("box-ordered", f"box {i} min must be < max")
        if not all(b.lo[k] <= box.lo[k] and box.hi[k] <= b.hi[k] for k in range(3)):
            raise ArenaInvariantError("obstacle-inside-bounds", f"box {i} {box} extends past bounds")

    if not (s.x0 <= s.x1 and s.y0 <= s.y1):
        raise ArenaInvariantError("spawn-ordered", "spawn rectangle min must be <= max")
    if s.yaw != 0.0:
        raise ArenaInvariantError("spawn-yaw", "camera yaw is locked to +x; spawn yaw must be 0")
    if not (b.lo[0] < s.x0 - r and s.x1 + r < b.hi[0]
            and b.lo[1] < s.y0 - r and s.y1 + r < b.hi[1]
            and b.lo[2] < s.z - r and s.z + r < b.hi[2]):
        raise ArenaInvariantError("spawn-inside-bounds", "inflated spawn region must lie inside bounds")
    for i, box in enumerate(spec.obstacles):
        if (s.x0 <= box.hi[0] + r and s.x1 >= box.lo[0] - r
                and s.y0 <= box.hi[1] + r and s.y1 >= box.lo[1] - r
                and box.lo[2] - r <= s.z <= box.hi[2] + r):
            raise ArenaInvariantError("spawn-clear", f"spawn region intersects box {i} (radius {r})")

    if not (s.x1 < spec.goal_x <= b.hi[0]):
        raise ArenaInvariantError("spawn-before-goal", f"need spawn x-max {s.x1} < goal {spec.goal_x} <= bounds x-max {b.hi[0]}")
    return spec


def load_arena(text: str, agent_radius: float = DEFAULT_AGENT_RADIUS) -> ArenaSpec:
    return validate_arena(parse_arena(text), agent_radius)


def load_arena_file(path, agent_radius: float = DEFAULT_AGENT_RADIUS) -> ArenaSpec:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"Arena file not found: {p}")
    return load_arena(p.read_text(encoding="utf-8"), agent_radius)


def render_arena(spec: ArenaSpec) -> str:
    """Canonical writer; load_arena(render_arena(x)) == x."""
    def fmt(*vals: float) -> str:
        return " ".join(repr(float(v)) for v in vals)

    s = spec.spawn
    lines = [
        "arena v1",
        "bounds " + fmt(*spec.bounds.lo, *spec.bounds.hi),
        "spawn " + fmt(s.x0, s.y0, s.x1, s.y1, s.z, s.yaw),
        "goal " + fmt(spec.goal_x),
    ]
    lines += ["box " + fmt(*b.lo, *b.hi) for b in spec.obstacles]
    return "\n".join(lines) + "\n"


def content_hash(data: bytes) -> str:
    """git blob hash of a file's bytes."""
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


# ──────────────────────────────────────────────────
# Queries
# ──────────────────────────────────────────────────

def collides(arena: ArenaSpec, p: Sequence[float], radius: float) -> bool:
    """Sphere (p, radius) touches an obstacle or leaves the bounds."""
    if radius <= 0:
        raise ValueError("radius must be > 0")
    pt = np.asarray(p, dtype=np.float64)
    lo, hi = np.asarray(arena.bounds.lo), np.asarray(arena.bounds.hi)
    if np.any(pt - radius < lo) or np.any(pt + radius > hi):
        return True
    if not arena.obstacles:
        return False
    nearest = np.clip(pt, arena.obstacle_lo, arena.obstacle_hi)
    d2 = np.sum((nearest - pt) ** 2, axis=1)
    return bool(np.any(d2 <= radius * radius))


def reached_goal(arena: ArenaSpec, p: Sequence[float]) -> bool:
    return float(p[0]) >= arena.goal_x


def sample_spawn(arena: ArenaSpec, rng: np.random.Generator) -> Pose:
    s = arena.spawn
    x = float(rng.uniform(s.x0, s.x1))
    y = float(rng.uniform(s.y0, s.y1))
    return Pose(position=(x, y, s.z), yaw=0.0)


def raycast_many(
    arena: ArenaSpec,
    origins: np.ndarray,
    dirs: np.ndarray,
    max_range: float = DEFAULT_MAX_RANGE,
) -> np.ndarray:
    """
    Vectorized slab raycast. origins, dirs: (N, 3), dirs unit length.
    Returns (N,) distances to the nearest surface, capped at max_range.
    An origin inside an obstacle or outside the bounds returns 0.
    """
    o = np.asarray(origins, dtype=np.float64).reshape(-1, 3)
    d = np.asarray(dirs, dtype=np.float64).reshape(-1, 3)
    n = o.shape[0]

    blo, bhi = np.asarray(arena.bounds.lo), np.asarray(arena.bounds.hi)
    outside = np.any((o < blo) | (o > bhi), axis=1)

    # exit distance from the bounds interior
    with np.errstate(divide="ignore", invalid="ignore"):
        t_pos = np.where(d > 0, (bhi - o) / d, np.inf)
        t_neg = np.where(d < 0, (blo - o) / d, np.inf)
    best = np.minimum(t_pos, t_neg).min(axis=1)
    best = np.maximum(best, 0.0)

    if arena.obstacles:
        lo = arena.obstacle_lo[None, :, :]  # (1, M, 3)
        hi = arena.obstacle_hi[None, :, :]
        oo = o[:, None, :]                  # (N, 1, 3)
        dd = d[:, None, :]
        parallel = dd == 0.0
        with np.errstate(divide="ignore", invalid="ignore"):
            t1 = (lo - oo) / dd
            t2 = (hi - oo) / dd
        t_near_ax = np.where(parallel, np.where((oo >= lo) & (oo <= hi), -np.inf, np.inf), np.minimum(t1, t2))
        t_far_ax = np.where(parallel, np.where((oo >= lo) & (oo <= hi), np.inf, -np.inf), np.maximum(t1, t2))
        t_near = t_near_ax.max(axis=2)      # (N, M)
        t_far = t_far_ax.min(axis=2)
        hit = (t_near <= t_far) & (t_far >= 0.0)
        t_hit = np.where(hit, np.maximum(t_near, 0.0), np.inf)
        best = np.minimum(best, t_hit.min(axis=1))

    best = np.where(outside, 0.0, best)
    return np.minimum(best, float(max_range)).reshape(n)


def raycast(
    arena: ArenaSpec,
    origin: Sequence[float],
    direction: Sequence[float],
    max_range: float = DEFAULT_MAX_RANGE,
) -> float:
    d = np.asarray(direction, dtype=np.float64)
    if abs(float(np.linalg.norm(d)) - 1.0) > 1e-9:
        raise ValueError("direction must be a unit vector")
    return float(raycast_many(arena, np.asarray(origin)[None, :], d[None, :], max_range)[0])
