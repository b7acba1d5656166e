from __future__ import annotations

from typing import Any, Dict, List, Protocol, Sequence, Tuple

import numpy as np

from quadrl.domain.errors import ShapeError
from quadrl.nn import layers as L
from quadrl.nn.params import LayerParams, NetParams


class Network(Protocol):
    """forward returns (output, cache); cache["masks"] lists every ReLU's active mask."""

    def forward(self, params: NetParams, inputs: Any) -> Tuple[np.ndarray, Dict[str, Any]]:
        ...

    def backward(self, params: NetParams, cache: Dict[str, Any], grad_out: np.ndarray) -> List[np.ndarray]:
        ...


class Sequential:
    """Dense stack with ReLU between layers (none after the last)."""

    def forward(self, params: NetParams, x: np.ndarray):
        acts, pre = [x], []
        h = x
        for i, layer in enumerate(params.layers):
            if layer.kind != "dense":
                raise ShapeError("Sequential only holds dense layers")
            z = L.linear_forward(h, layer.weight, layer.bias)
            pre.append(z)
            h = L.relu_forward(z) if i < len(params.layers) - 1 else z
            acts.append(h)
        masks = [z > 0 for z in pre[:-1]]
        return h, {"acts": acts, "pre": pre, "masks": masks}

    def backward(self, params: NetParams, cache, grad_out: np.ndarray) -> List[np.ndarray]:
        grads: List[np.ndarray] = []
        g = grad_out
        n = len(params.layers)
        for i in reversed(range(n)):
            layer = params.layers[i]
            if i < n - 1:
                g = L.relu_backward(cache["pre"][i], g)
            g, dw, db = L.linear_backward(cache["acts"][i], layer.weight, g)
            grads[:0] = [dw, db]
        return grads


def build_sequential(sizes: Sequence[int], seed: int = 0) -> NetParams:
    rng = np.random.default_rng(seed)
    layers = [
        LayerParams("dense", L.he_uniform((n_out, n_in), n_in, rng), np.zeros(n_out, dtype=np.float32))
        for n_in, n_out in zip(sizes[:-1], sizes[1:])
    ]
    return NetParams(version=0, layers=layers)
