"""Feed-forward embedding extractor with manual backprop.

``y = x @ W + b`` per layer (``W`` has shape (fan_in, fan_out)); hidden
layers apply the activation, the output layer is affine only, optionally
followed by L2 normalization.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import InvalidSpecError, ShapeMismatchError, StaleCacheError, ZeroNormError
from .losses import CosineParams, HeadParams
from .store import ZERO_NORM

ACTIVATIONS = ("relu", "tanh")


@dataclass
class MlpModel:
    layers: list[tuple[np.ndarray, np.ndarray]]
    activation: str = "relu"
    normalize_output: bool = False
    head: HeadParams | None = None
    cosine: CosineParams | None = None
    meta: dict = field(default_factory=dict)

    @property
    def input_dim(self) -> int:
        return self.layers[0][0].shape[0]

    @property
    def output_dim(self) -> int:
        return self.layers[-1][0].shape[1]

    @property
    def widths(self) -> list[int]:
        return [self.input_dim] + [W.shape[1] for W, _ in self.layers]

    def copy(self) -> "MlpModel":
        head = None if self.head is None else HeadParams(self.head.W.copy(), self.head.b.copy())
        cosine = None if self.cosine is None else replace(self.cosine)
        return MlpModel(
            [(W.copy(), b.copy()) for W, b in self.layers],
            self.activation,
            self.normalize_output,
            head,
            cosine,
            dict(self.meta),
        )


def init_model(widths, seed: int = 0, activation: str = "relu",
               normalize_output: bool = False) -> MlpModel:
    """Weights ~ U(-1, 1) * sqrt(2 / fan_in), zero biases.

    ``widths`` lists layer sizes from input to output, so ``[32, 64, 50]``
    builds two layers.
    """
    widths = [int(w) for w in widths]
    if len(widths) < 2:
        raise InvalidSpecError(f"need at least input and output widths, got {widths}")
    if any(w < 1 for w in widths):
        raise InvalidSpecError(f"layer widths must be positive, got {widths}")
    if activation not in ACTIVATIONS:
        raise InvalidSpecError(f"activation must be one of {ACTIVATIONS}")
    rng = np.random.default_rng(seed)
    layers = []
    for fan_in, fan_out in zip(widths[:-1], widths[1:]):
        W = rng.uniform(-1.0, 1.0, size=(fan_in, fan_out)) * math.sqrt(2.0 / fan_in)
        layers.append((W, np.zeros(fan_out)))
    return MlpModel(layers, activation, normalize_output)


@dataclass
class ForwardCache:
    inputs: list[np.ndarray]  # input to each layer
    pre: list[np.ndarray]  # affine output of each layer
    norms: np.ndarray | None
    output: np.ndarray
    weights: tuple  # the exact weight arrays used, for staleness checks


def _act(name, z):
    return np.maximum(z, 0.0) if name == "relu" else np.tanh(z)


def _act_grad(name, z, a):
    return (z > 0).astype(z.dtype) if name == "relu" else 1.0 - a * a


def forward(model: MlpModel, inputs) -> tuple[np.ndarray, ForwardCache]:
    x = np.asarray(inputs, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != model.input_dim:
        raise ShapeMismatchError(f"input shape {x.shape} does not match input width {model.input_dim}")
    ins, pre = [], []
    h = x
    last = len(model.layers) - 1
    for k, (W, b) in enumerate(model.layers):
        ins.append(h)
        z = h @ W + b
        pre.append(z)
        h = z if k == last else _act(model.activation, z)
    norms = None
    if model.normalize_output:
        norms = np.sqrt(np.einsum("ij,ij->i", h, h))
        if np.any(~(norms >= ZERO_NORM)):
            raise ZeroNormError("network produced a zero-norm embedding")
        h = h / norms[:, None]
    weights = tuple(W for W, _ in model.layers) + tuple(b for _, b in model.layers)
    return h, ForwardCache(ins, pre, norms, h, weights)


def backward(model: MlpModel, cache: ForwardCache, grad_embeddings) -> list[tuple[np.ndarray, np.ndarray]]:
    """Reverse-mode gradients ``[(dW, db), ...]`` aligned with ``model.layers``."""
    current = tuple(W for W, _ in model.layers) + tuple(b for _, b in model.layers)
    if len(current) != len(cache.weights) or any(a is not b for a, b in zip(current, cache.weights)):
        raise StaleCacheError("cache was produced with different model parameters")
    g = np.asarray(grad_embeddings, dtype=np.float64)
    if g.shape != cache.output.shape:
        raise ShapeMismatchError(f"gradient shape {g.shape} != output shape {cache.output.shape}")
    if cache.norms is not None:
        u = cache.output
        g = (g - u * np.einsum("ij,ij->i", g, u)[:, None]) / cache.norms[:, None]
    grads = [None] * len(model.layers)
    for k in range(len(model.layers) - 1, -1, -1):
        W, _ = model.layers[k]
        grads[k] = (cache.inputs[k].T @ g, g.sum(axis=0))
        if k > 0:
            g = g @ W.T
            z = cache.pre[k - 1]
            g = g * _act_grad(model.activation, z, cache.inputs[k])
    return grads
