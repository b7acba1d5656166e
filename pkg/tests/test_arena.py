"""Arena parsing, invariants, collision and raycasting."""

import math

import numpy as np
import pytest

from conftest import ARENAS
from quadrl.domain.errors import ArenaInvariantError, ArenaParseError
from quadrl.domain.models import Pose
from quadrl.sim.arena import (
    collides,
    content_hash,
    load_arena,
    load_arena_file,
    parse_arena,
    raycast,
    raycast_many,
    reached_goal,
    render_arena,
    sample_spawn,
)

GOOD = """\
arena v1
bounds 0 0 0 20 10 4
spawn  1 4 2 6 2 0
goal   18
box    10 0 0 12 4 4
"""

SHIPPED = sorted(p.name for p in ARENAS.glob("*.arena"))


def _inside_any(arena, pts):
    """Closed-box containment of (N, 3) points in any obstacle, or outside the bounds."""
    lo, hi = np.asarray(arena.bounds.lo), np.asarray(arena.bounds.hi)
    out = np.any((pts < lo) | (pts > hi), axis=1)
    if arena.obstacles:
        olo, ohi = arena.obstacle_lo[None], arena.obstacle_hi[None]
        inside = np.all((pts[:, None, :] >= olo) & (pts[:, None, :] <= ohi), axis=2).any(axis=1)
        out |= inside
    return out


# =============================================================================
# Parsing
# =============================================================================

class TestParse:

    def test_minimal_file(self):
        a = load_arena(GOOD)
        assert a.bounds.hi == (20.0, 10.0, 4.0)
        assert a.spawn.center == (1.5, 5.0, 2.0)
        assert a.goal_x == 18.0
        assert len(a.obstacles) == 1

    def test_comments_and_blank_lines(self):
        a = load_arena("# header comment\n\n" + GOOD.replace("goal   18", "goal 18  # plane"))
        assert a.goal_x == 18.0

    def test_unknown_keyword_reports_line(self):
        with pytest.raises(ArenaParseError) as e:
            parse_arena(GOOD + "sphere 1 2 3\n")
        assert e.value.line_no == 6

    def test_out_of_order(self):
        text = "arena v1\nspawn 1 4 2 6 2 0\nbounds 0 0 0 20 10 4\ngoal 18\n"
        with pytest.raises(ArenaParseError) as e:
            parse_arena(text)
        assert e.value.line_no == 2

    def test_box_before_goal(self):
        text = "arena v1\nbounds 0 0 0 20 10 4\nspawn 1 4 2 6 2 0\nbox 10 0 0 12 4 4\ngoal 18\n"
        with pytest.raises(ArenaParseError):
            parse_arena(text)

    @pytest.mark.parametrize("text", [
        "",
        "# only a comment\n",
        "arena v2\nbounds 0 0 0 1 1 1\n",
        "arena v1\nbounds 0 0 0 20 10\n",
        "arena v1\nbounds 0 0 0 20 ten 4\n",
        "arena v1\nbounds 0 0 0 20 nan 4\n",
        "arena v1\nbounds 0 0 0 20 10 4\nspawn 1 4 2 6 2 0\n",
    ])
    def test_malformed(self, text):
        with pytest.raises(ArenaParseError):
            parse_arena(text)

    @pytest.mark.parametrize("name", ["easy_corridor.arena", "train.arena", "test.arena", "open.arena"])
    def test_render_is_canonical(self, name):
        a = load_arena_file(ARENAS / name)
        assert load_arena(render_arena(a)) == a

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_arena_file(tmp_path / "nope.arena")

    def test_content_hash_is_git_blob_sha1(self):
        assert content_hash(b"hello\n") == "ce013625030ba8dba906f756967f9e9ca394464a"


# =============================================================================
# Invariants
# =============================================================================

class TestInvariants:

    @pytest.mark.parametrize("old, new, rule", [
        ("bounds 0 0 0 20 10 4", "bounds 0 0 4 20 10 4", "bounds-ordered"),
        ("box    10 0 0 12 4 4", "box    10 0 0 22 4 4", "obstacle-inside-bounds"),
        ("box    10 0 0 12 4 4", "box    12 0 0 10 4 4", "box-ordered"),
        ("box    10 0 0 12 4 4", "box    1.5 4.5 0 3 5 4", "spawn-clear"),
        ("spawn  1 4 2 6 2 0", "spawn  1 4 2 6 2 0.5", "spawn-yaw"),
        ("spawn  1 4 2 6 2 0", "spawn  0.1 4 2 6 2 0", "spawn-inside-bounds"),
        ("goal   18", "goal   0.5", "spawn-before-goal"),
        ("goal   18", "goal   25", "spawn-before-goal"),
    ])
    def test_rule(self, old, new, rule):
        with pytest.raises(ArenaInvariantError) as e:
            load_arena(GOOD.replace(old, new))
        assert e.value.rule == rule

    def test_spawn_clearance_uses_radius(self):
        # 0.2 m gap between spawn strip and box: fine for r=0.1, not for r=0.3
        text = GOOD.replace("box    10 0 0 12 4 4", "box    1 0 0 2 3.8 4")
        load_arena(text, agent_radius=0.1)
        with pytest.raises(ArenaInvariantError):
            load_arena(text, agent_radius=0.3)

    def test_without_obstacle(self, slalom):
        assert len(slalom.without_obstacle(0).obstacles) == len(slalom.obstacles) - 1


# =============================================================================
# Collision and goal queries
# =============================================================================

class TestCollides:

    def test_simple_cases(self):
        a = load_arena(GOOD)
        assert not collides(a, (5.0, 7.0, 2.0), 0.3)
        assert collides(a, (9.8, 2.0, 2.0), 0.3)       # touches box face
        assert collides(a, (5.0, 9.8, 2.0), 0.3)       # leaves the bounds
        assert collides(a, (11.0, 2.0, 2.0), 0.3)      # inside the box
        with pytest.raises(ValueError):
            collides(a, (5.0, 7.0, 2.0), 0.0)

    def test_face_is_closed(self):
        a = load_arena(GOOD)
        assert collides(a, (9.5, 2.0, 2.0), 0.5)

    def test_monte_carlo_oracle(self, slalom):
        """Random spheres vs point sampling inside each sphere."""
        rng = np.random.default_rng(11)
        lo, hi = np.asarray(slalom.bounds.lo), np.asarray(slalom.bounds.hi)
        n_samples = 10_000
        disagreements = 0
        for _ in range(1000):
            c = rng.uniform(lo - 0.5, hi + 0.5)
            r = float(rng.uniform(0.1, 1.0))
            d = rng.standard_normal((n_samples, 3))
            d /= np.linalg.norm(d, axis=1, keepdims=True)
            pts = c + d * (r * rng.random((n_samples, 1)) ** (1.0 / 3.0))
            oracle = bool(_inside_any(slalom, pts).any())
            got = collides(slalom, c, r)
            if got != oracle:
                disagreements += 1
                # only near-tangent spheres may disagree with a finite sample
                nearest = np.clip(c, slalom.obstacle_lo, slalom.obstacle_hi)
                clearance = min(
                    float(np.min(np.linalg.norm(nearest - c, axis=1))),
                    float(np.min(np.minimum(c - lo, hi - c))),
                )
                spacing = r * (4.0 / 3.0 * math.pi / n_samples) ** (1.0 / 3.0)
                assert abs(abs(clearance) - r) <= 3 * spacing, (c, r, got, oracle)
        assert disagreements < 50

    def test_reached_goal(self, corridor):
        assert not reached_goal(corridor, (54.99, 4.0, 2.0))
        assert reached_goal(corridor, (55.0, 4.0, 2.0))

    @pytest.mark.parametrize("name", SHIPPED)
    def test_every_face_point_collides(self, name):
        arena = load_arena_file(ARENAS / name)
        rng = np.random.default_rng(5)
        for box in arena.obstacles:
            lo, hi = np.asarray(box.lo), np.asarray(box.hi)
            for axis in range(3):
                for plane in (lo[axis], hi[axis]):
                    pts = rng.uniform(lo, hi, size=(50, 3))
                    pts[:, axis] = plane
                    for p, r in zip(pts, rng.uniform(1e-3, 1.0, size=50)):
                        assert collides(arena, p, float(r)), (name, p, r)

    def test_spawn_samples_stay_in_strip(self, slalom):
        rng = np.random.default_rng(0)
        s = slalom.spawn
        for _ in range(200):
            p = sample_spawn(slalom, rng)
            x, y, z = p.position
            assert s.x0 <= x <= s.x1 and s.y0 <= y <= s.y1 and z == s.z
            assert p.yaw == 0.0
            assert not collides(slalom, p.position, 0.3)

    @pytest.mark.parametrize("name", SHIPPED)
    def test_spawn_mean_near_center(self, name):
        arena = load_arena_file(ARENAS / name)
        s, n = arena.spawn, 10_000
        rng = np.random.default_rng(1)
        xy = np.array([sample_spawn(arena, rng).position[:2] for _ in range(n)])
        for k, (a, b) in enumerate(((s.x0, s.x1), (s.y0, s.y1))):
            sigma = (b - a) / math.sqrt(12.0 * n)
            assert abs(xy[:, k].mean() - (a + b) / 2.0) <= 3.0 * sigma

    def test_point_spawn_is_exact(self):
        a = load_arena(GOOD.replace("spawn  1 4 2 6 2 0", "spawn  1.5 5 1.5 5 2 0"))
        rng = np.random.default_rng(0)
        assert all(sample_spawn(a, rng) == Pose((1.5, 5.0, 2.0), 0.0) for _ in range(20))

    def test_spawn_repeats_under_seed(self, slalom):
        a, b = np.random.default_rng(3), np.random.default_rng(3)
        seq_a = [sample_spawn(slalom, a) for _ in range(100)]
        seq_b = [sample_spawn(slalom, b) for _ in range(100)]
        assert seq_a == seq_b
        assert len(set(seq_a)) > 1


# =============================================================================
# Raycasting
# =============================================================================

def _march(arena, origins, dirs, max_range, step=1e-3):
    """First step index along each ray that lands in an obstacle or outside the bounds."""
    n = len(origins)
    out = np.full(n, max_range)
    active = np.arange(n)
    k = 1
    while active.size and k * step <= max_range + step:
        t = k * step
        hit = _inside_any(arena, origins[active] + dirs[active] * t)
        out[active[hit]] = min(t, max_range)
        active = active[~hit]
        k += 1
    return out


def _random_rays(arena, n, rng):
    lo, hi = np.asarray(arena.bounds.lo), np.asarray(arena.bounds.hi)
    origins = []
    while len(origins) < n:
        c = rng.uniform(lo + 0.05, hi - 0.05, size=(n, 3))
        c = c[~_inside_any(arena, c)]
        origins.extend(c[: n - len(origins)])
    dirs = rng.standard_normal((n, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    return np.asarray(origins), dirs


class TestRaycast:

    def test_axis_aligned_hits(self):
        a = load_arena(GOOD)
        assert raycast(a, (5.0, 2.0, 2.0), (1.0, 0.0, 0.0)) == pytest.approx(5.0)
        assert raycast(a, (5.0, 7.0, 2.0), (1.0, 0.0, 0.0)) == pytest.approx(15.0)
        assert raycast(a, (5.0, 7.0, 2.0), (0.0, 0.0, 1.0)) == pytest.approx(2.0)
        assert raycast(a, (5.0, 7.0, 2.0), (1.0, 0.0, 0.0), max_range=3.0) == pytest.approx(3.0)

    def test_origin_in_obstacle_is_zero(self):
        a = load_arena(GOOD)
        assert raycast(a, (11.0, 2.0, 2.0), (1.0, 0.0, 0.0)) == 0.0
        assert raycast(a, (25.0, 2.0, 2.0), (1.0, 0.0, 0.0)) == 0.0

    def test_rejects_non_unit_direction(self):
        with pytest.raises(ValueError):
            raycast(load_arena(GOOD), (5.0, 2.0, 2.0), (2.0, 0.0, 0.0))

    def _check_against_march(self, arena, n, seed, max_range=20.0):
        rng = np.random.default_rng(seed)
        origins, dirs = _random_rays(arena, n, rng)
        got = raycast_many(arena, origins, dirs, max_range)
        want = _march(arena, origins, dirs, max_range)
        bad = np.abs(got - want) > 2e-3
        if bad.any():
            # a ray that only grazes a box corner can slip between march steps
            chord_end = origins[bad] + dirs[bad] * (got[bad] + 1.5e-3)
            assert not _inside_any(arena, chord_end).any()
            assert np.all(want[bad] > got[bad])
        assert bad.mean() < 0.01

    def test_against_ray_march(self, slalom):
        self._check_against_march(slalom, 1000, seed=3)

    @pytest.mark.slow
    def test_against_ray_march_full(self, slalom):
        self._check_against_march(slalom, 10_000, seed=4)

    @pytest.mark.parametrize("name", [n for n in SHIPPED if n != "open.arena"])
    def test_removing_an_obstacle_never_shortens(self, name):
        arena = load_arena_file(ARENAS / name)
        origins, dirs = _random_rays(arena, 2000, np.random.default_rng(6))
        full = raycast_many(arena, origins, dirs, 40.0)
        lengthened = 0
        for i in range(len(arena.obstacles)):
            fewer = raycast_many(arena.without_obstacle(i), origins, dirs, 40.0)
            assert np.all(fewer >= full - 1e-9), (name, i)
            lengthened += int(np.sum(fewer > full + 1e-6))
        assert lengthened > 0
