"""Central-difference verification of a Network's analytic gradients (64-bit)."""
from __future__ import annotations

import math
from typing import Any, List, Optional, Tuple

import numpy as np

from quadrl.nn.network import Network
from quadrl.nn.params import NetParams


def _to64(inputs: Any) -> Any:
    if isinstance(inputs, tuple):
        return tuple(np.asarray(x, dtype=np.float64) for x in inputs)
    return np.asarray(inputs, dtype=np.float64)


def _masks_equal(a: List[np.ndarray], b: List[np.ndarray]) -> bool:
    return all(np.array_equal(x, y) for x, y in zip(a, b))


def _sample_coords(params: NetParams, n_coords: int, rng: np.random.Generator) -> List[Tuple[int, int]]:
    """Stratified over tensors so small layers are always covered."""
    tensors = params.tensors()
    per = max(1, math.ceil(n_coords / len(tensors)))
    coords = []
    for ti, t in enumerate(tensors):
        k = min(per, t.size)
        coords += [(ti, int(j)) for j in rng.choice(t.size, size=k, replace=False)]
    # top up from the big tensors when small ones ran out
    while len(coords) < n_coords:
        ti = int(np.argmax([t.size for t in tensors]))
        coords.append((ti, int(rng.integers(tensors[ti].size))))
    return coords


def grad_check(
    net: Network,
    params: NetParams,
    inputs: Any,
    n_coords: int = 200,
    h: float = 1e-6,
    rng: Optional[np.random.Generator] = None,
) -> float:
    """
    Max relative error between the analytic gradient of L = sum(out * P) (P fixed,
    random) and central differences over >= n_coords sampled parameters.

    Coordinates whose perturbation flips a ReLU mask (a kink) are resampled.
    rel = |a - n| / max(|a| + |n|, 1e-3 * max|grad|, 1e-12)
    """
    rng = rng or np.random.default_rng(0)
    p64 = params.astype(np.float64)
    x64 = _to64(inputs)

    out, cache = net.forward(p64, x64)
    proj = rng.standard_normal(out.shape)
    grads = net.backward(p64, cache, proj)
    scale = max(float(np.max(np.abs(g))) for g in grads) if grads else 0.0
    floor = max(1e-3 * scale, 1e-12)
    tensors = p64.tensors()

    def loss_and_masks():
        o, c = net.forward(p64, x64)
        return float(np.sum(o * proj)), c.get("masks", [])

    worst = 0.0
    checked = 0
    candidates = _sample_coords(p64, n_coords, rng)
    attempts = 0
    while checked < n_coords and attempts < 20 * n_coords:
        if not candidates:
            candidates = _sample_coords(p64, n_coords - checked, rng)
        ti, j = candidates.pop()
        attempts += 1
        t = tensors[ti].reshape(-1)
        orig = t[j]
        t[j] = orig + h
        lp, mp = loss_and_masks()
        t[j] = orig - h
        lm, mm = loss_and_masks()
        t[j] = orig
        if not _masks_equal(mp, mm):
            continue
        numeric = (lp - lm) / (2.0 * h)
        analytic = float(grads[ti].reshape(-1)[j])
        rel = abs(analytic - numeric) / max(abs(analytic) + abs(numeric), floor)
        worst = max(worst, rel)
        checked += 1
    return worst
