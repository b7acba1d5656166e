"""
Q-network and Q-learning.

Architecture (ReLU after every layer but the last):
    images (2, 32, 32) -> conv 2->16 6x6/s2 -> (16, 14, 14) -> conv 16->8 3x3/s1 -> (8, 12, 12) -> flatten 1152
    velocity (3,)       -> dense 3->16
    concat 1168 -> dense 1168->256 -> dense 256->2
Depth pixels are divided by max_range before the network.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Sequence, Tuple

import numpy as np

from quadrl.domain.errors import NonFiniteError, ShapeError
from quadrl.domain.models import ACTIONS, IMAGE_SIZE, Experience, StackedState
from quadrl.nn import layers as L
from quadrl.nn.adam import AdamState, adam_step
from quadrl.nn.params import LayerParams, NetParams

N_ACTIONS = len(ACTIONS)
CONV1 = (16, 2, 6, 2)   # (out, in, kernel, stride)
CONV2 = (8, 16, 3, 1)
VEL_WIDTH = 16
HIDDEN = 256
FLAT_WIDTH = CONV2[0] * 12 * 12


@dataclass(frozen=True)
class Hyperparams:
    gamma: float = 0.99
    replay_capacity: int = 15000
    batch_size: int = 32
    target_sync_every: int = 150
    train_hz: float = 50.0
    lr: float = 1e-4
    grad_clip: float = 10.0
    episode_step_cap: int = 200

    def __post_init__(self):
        for name in ("gamma", "replay_capacity", "batch_size", "target_sync_every", "train_hz", "lr", "grad_clip", "episode_step_cap"):
            if not getattr(self, name) > 0:
                raise ValueError(f"hyperparameter {name} must be positive")
        if self.gamma > 1:
            raise ValueError("gamma must be <= 1")


class QNetwork:
    """Two-branch forward/backward over NetParams [conv1, conv2, vel, fc1, fc2]."""

    def forward(self, params: NetParams, inputs: Tuple[np.ndarray, np.ndarray]):
        images, vel = inputs
        c1, c2, lv, f1, f2 = params.layers
        z1 = L.conv2d_forward(images, c1.weight, c1.bias, c1.stride)
        a1 = L.relu_forward(z1)
        z2 = L.conv2d_forward(a1, c2.weight, c2.bias, c2.stride)
        a2 = L.relu_forward(z2)
        flat = L.flatten_forward(a2)
        zv = L.linear_forward(vel, lv.weight, lv.bias)
        av = L.relu_forward(zv)
        cat = L.concat_forward(flat, av)
        z3 = L.linear_forward(cat, f1.weight, f1.bias)
        a3 = L.relu_forward(z3)
        q = L.linear_forward(a3, f2.weight, f2.bias)
        cache = {
            "images": images, "vel": vel, "z1": z1, "a1": a1, "z2": z2, "a2": a2,
            "zv": zv, "cat": cat, "z3": z3, "a3": a3, "flat_width": flat.shape[1],
            "masks": [z1 > 0, z2 > 0, zv > 0, z3 > 0],
        }
        return q, cache

    def backward(self, params: NetParams, cache: Dict, grad_q: np.ndarray) -> List[np.ndarray]:
        c1, c2, lv, f1, f2 = params.layers
        g, dw5, db5 = L.linear_backward(cache["a3"], f2.weight, grad_q)
        g = L.relu_backward(cache["z3"], g)
        g, dw4, db4 = L.linear_backward(cache["cat"], f1.weight, g)
        g_flat, g_vel = L.concat_backward(cache["flat_width"], g)
        g_vel = L.relu_backward(cache["zv"], g_vel)
        _, dw3, db3 = L.linear_backward(cache["vel"], lv.weight, g_vel)
        g = L.flatten_backward(cache["a2"].shape, g_flat)
        g = L.relu_backward(cache["z2"], g)
        g, dw2, db2 = L.conv2d_backward(cache["a1"], c2.weight, c2.stride, g)
        g = L.relu_backward(cache["z1"], g)
        _, dw1, db1 = L.conv2d_backward(cache["images"], c1.weight, c1.stride, g)
        return [dw1, db1, dw2, db2, dw3, db3, dw4, db4, dw5, db5]


QNET = QNetwork()


def build_network(seed: int = 0) -> NetParams:
    rng = np.random.default_rng(seed)

    def conv(spec):
        f, c, k, s = spec
        return LayerParams("conv", L.he_uniform((f, c, k, k), c * k * k, rng), np.zeros(f, np.float32), s)

    def dense(n_in, n_out):
        return LayerParams("dense", L.he_uniform((n_out, n_in), n_in, rng), np.zeros(n_out, np.float32))

    return NetParams(
        version=0,
        layers=[
            conv(CONV1),
            conv(CONV2),
            dense(3, VEL_WIDTH),
            dense(FLAT_WIDTH + VEL_WIDTH, HIDDEN),
            dense(HIDDEN, N_ACTIONS),
        ],
    )


def encode_states(states: Sequence[StackedState], max_range: float, dtype=np.float32) -> Tuple[np.ndarray, np.ndarray]:
    if not states:
        raise ShapeError("empty state batch")
    images = np.empty((len(states), 2, IMAGE_SIZE, IMAGE_SIZE), dtype=dtype)
    vel = np.empty((len(states), 3), dtype=dtype)
    for i, s in enumerate(states):
        images[i, 0] = s.image_now
        images[i, 1] = s.image_prev
        vel[i] = s.velocity
    images /= dtype(max_range)
    if not (np.all(np.isfinite(images)) and np.all(np.isfinite(vel))):
        raise NonFiniteError("non-finite state input")
    return images, vel


def q_values_batch(params: NetParams, states: Sequence[StackedState], max_range: float = 20.0) -> np.ndarray:
    q, _ = QNET.forward(params, encode_states(states, max_range, params.layers[0].weight.dtype.type))
    return q


def q_values(params: NetParams, s: StackedState, max_range: float = 20.0) -> np.ndarray:
    return q_values_batch(params, [s], max_range)[0]


def select_action(q: np.ndarray, epsilon: float, rng: np.random.Generator) -> int:
    """epsilon-greedy; ties go to the lowest index."""
    if not 0.0 <= epsilon <= 1.0:
        raise ValueError(f"epsilon must be in [0, 1], got {epsilon}")
    if rng.random() < epsilon:
        return int(rng.integers(N_ACTIONS))
    return int(np.argmax(q))


def epsilon_schedule(total_actions: int, capacity: int) -> float:
    """eps = max(0, 1 - a_T / |D|)."""
    if total_actions < 0:
        raise ValueError("total_actions must be >= 0")
    return max(0.0, 1.0 - float(total_actions) / float(capacity))


def td_targets(batch: Sequence[Experience], target_params: NetParams, gamma: float, max_range: float = 20.0) -> np.ndarray:
    """y = r + gamma * max_a' Q_target(s', a'), y = r on terminal transitions."""
    if not batch:
        raise ShapeError("empty batch")
    q_next = q_values_batch(target_params, [e.s_next for e in batch], max_range).astype(np.float64)
    r = np.array([e.r for e in batch], dtype=np.float64)
    done = np.array([e.done for e in batch], dtype=bool)
    return np.where(done, r, r + gamma * q_next.max(axis=1))


def _clip_global_norm(grads: List[np.ndarray], max_norm: float) -> List[np.ndarray]:
    norm = float(np.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads)))
    if norm > max_norm > 0:
        return [g * (max_norm / norm) for g in grads]
    return grads


def train_step(
    params: NetParams,
    target_params: NetParams,
    batch: Sequence[Experience],
    adam: AdamState,
    gamma: float = 0.99,
    grad_clip: float = 10.0,
    max_range: float = 20.0,
) -> float:
    """One Adam update on MSE of the taken-action TD error. Returns the pre-update loss."""
    y = td_targets(batch, target_params, gamma, max_range)
    dtype = params.layers[0].weight.dtype.type
    inputs = encode_states([e.s for e in batch], max_range, dtype)
    q, cache = QNET.forward(params, inputs)
    idx = np.arange(len(batch))
    actions = np.array([e.a for e in batch], dtype=np.int64)

    diff = q[idx, actions].astype(np.float64) - y
    loss = float(np.mean(diff ** 2))
    if not np.isfinite(loss):
        raise NonFiniteError(f"non-finite loss {loss}; update aborted")

    grad_q = np.zeros_like(q)
    grad_q[idx, actions] = (2.0 * diff / len(batch)).astype(q.dtype)
    grads = _clip_global_norm(QNET.backward(params, cache, grad_q), grad_clip)
    adam_step(params, grads, adam)
    return loss


def sync_target(params: NetParams) -> NetParams:
    return params.copy()
