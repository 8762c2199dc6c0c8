"""Minimal feedforward approximator for action values.

A plain ReLU multilayer perceptron with a scalar output, trained by
stochastic gradient descent on mean squared error.  Inputs are encoded as
[node one-hot | normalized time | action-slot one-hot | normalized flow]:
the action slot is the index of the chosen link within the node's ordered
action list, padded to the network's maximum out-degree, and the flow
feature is the mean action divided by a fixed scale.

Backpropagation is verified against central finite differences; see
``gradient_check``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .game import Observation
from .network import LinkId, Network


@dataclass
class MLPParams:
    """Weights/biases per layer plus the architecture they must match."""

    weights: list            # W[i]: (fan_out, fan_in)
    biases: list             # b[i]: (fan_out,)
    sizes: tuple             # layer widths, input first, 1 last

    def copy(self) -> "MLPParams":
        return MLPParams([w.copy() for w in self.weights],
                         [b.copy() for b in self.biases], self.sizes)

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.weights + self.biases])


def init_params(sizes: Sequence[int], rng: np.random.Generator) -> MLPParams:
    """Uniform init in [-1/sqrt(fan_in), 1/sqrt(fan_in)] per layer."""
    sizes = tuple(int(s) for s in sizes)
    if len(sizes) < 2 or sizes[-1] != 1:
        raise ValueError("need at least input and scalar output layers")
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes, sizes[1:]):
        bound = 1.0 / np.sqrt(fan_in)
        weights.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)))
        biases.append(rng.uniform(-bound, bound, size=fan_out))
    return MLPParams(weights, biases, sizes)


def forward_batch(params: MLPParams, x: np.ndarray) -> np.ndarray:
    """Scalar outputs for a batch of input rows (pure, no state)."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    if x.shape[1] != params.sizes[0]:
        raise ValueError(f"input width {x.shape[1]} != expected {params.sizes[0]}")
    h = x
    last = len(params.weights) - 1
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        h = h @ w.T + b
        if i != last:
            h = np.maximum(h, 0.0)
    return h[:, 0]


def forward(params: MLPParams, x: np.ndarray) -> float:
    """Scalar output for one input vector."""
    return float(forward_batch(params, np.asarray(x, dtype=float)[None, :])[0])


def _backward(params: MLPParams, x: np.ndarray, dloss_dy: np.ndarray):
    """Gradients of a scalar loss given d loss / d output per batch row."""
    acts = [x]
    pre = []
    h = x
    last = len(params.weights) - 1
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        z = h @ w.T + b
        pre.append(z)
        h = z if i == last else np.maximum(z, 0.0)
        acts.append(h)
    grads_w = [None] * len(params.weights)
    grads_b = [None] * len(params.biases)
    delta = dloss_dy[:, None]          # (B, 1) at the output layer
    for i in range(last, -1, -1):
        if i != last:
            delta = delta * (pre[i] > 0)
        grads_w[i] = delta.T @ acts[i]
        grads_b[i] = delta.sum(axis=0)
        if i:
            delta = delta @ params.weights[i]
    return grads_w, grads_b


def sgd_step(params: MLPParams, x: np.ndarray, targets: np.ndarray,
             learning_rate: float) -> float:
    """One gradient step on mean squared error over the batch.

    Updates ``params`` in place and returns the pre-step loss.  Raises on a
    non-finite loss, which signals divergence.
    """
    if learning_rate <= 0:
        raise ValueError("learning rate must be positive")
    x = np.atleast_2d(np.asarray(x, dtype=float))
    targets = np.asarray(targets, dtype=float)
    if len(targets) != x.shape[0] or x.shape[0] == 0:
        raise ValueError("batch inputs and targets must align and be nonempty")
    y = forward_batch(params, x)
    err = y - targets
    loss = float(np.mean(err * err))
    if not np.isfinite(loss):
        raise FloatingPointError(f"non-finite loss {loss}")
    grads_w, grads_b = _backward(params, x, 2.0 * err / len(err))
    for w, gw in zip(params.weights, grads_w):
        w -= learning_rate * gw
    for b, gb in zip(params.biases, grads_b):
        b -= learning_rate * gb
    return loss


def gradient_check(params: MLPParams, x: np.ndarray, target: float,
                   h: float = 1e-5) -> float:
    """Worst relative disagreement between backprop and central differences.

    The loss is the squared error on a single sample.  Relative error per
    parameter is |a - n| / max(|a|, |n|), taken as 0 when both vanish.
    """
    if h <= 0:
        raise ValueError("step size must be positive")
    x = np.asarray(x, dtype=float)
    y = forward(params, x)
    grads_w, grads_b = _backward(params, x[None, :], np.array([2.0 * (y - target)]))
    analytic = np.concatenate([g.ravel() for g in grads_w + grads_b])

    def loss_at(flat: np.ndarray) -> float:
        probe = params.copy()
        pos = 0
        for arr in probe.weights + probe.biases:
            n = arr.size
            arr[...] = flat[pos:pos + n].reshape(arr.shape)
            pos += n
        d = forward(probe, x) - target
        return d * d

    base = params.flat()
    numeric = np.empty_like(base)
    for i in range(base.size):
        up = base.copy(); up[i] += h
        dn = base.copy(); dn[i] -= h
        numeric[i] = (loss_at(up) - loss_at(dn)) / (2.0 * h)

    scale = np.maximum(np.abs(analytic), np.abs(numeric))
    err = np.abs(analytic - numeric)
    rel = np.where(scale > 0, err / np.maximum(scale, 1e-300), 0.0)
    return float(rel.max())


@dataclass
class QEncoder:
    """Maps (observation, action, mean action) to the approximator input."""

    net: Network
    horizon: int
    flow_scale: float
    node_index: dict = field(init=False)
    action_width: int = field(init=False)

    def __post_init__(self):
        self.node_index = {n: i for i, n in enumerate(self.net.nodes)}
        self.action_width = max(1, self.net.max_out_degree())

    @property
    def width(self) -> int:
        return len(self.node_index) + 1 + self.action_width + 1

    def encode(self, obs: Observation, action: LinkId, mean_action: float) -> np.ndarray:
        x = np.zeros(self.width)
        x[self.node_index[obs.node]] = 1.0
        x[len(self.node_index)] = min(1.0, obs.time / max(1, self.horizon))
        slot = self.net.actions(obs.node).index(action)
        x[len(self.node_index) + 1 + slot] = 1.0
        x[-1] = mean_action / self.flow_scale
        return x

    def encode_many(self, rows) -> np.ndarray:
        return np.stack([self.encode(o, a, m) for (o, a, m) in rows])
