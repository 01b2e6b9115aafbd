"""Training objectives with hand-derived gradients.

Classification losses (``softmax``, ``amsoftmax``, ``aamsoftmax``) score a
batch against a head ``W`` of shape (dim, num_classes). Metric losses
(``ge2e``, ``angleproto``) consume a :class:`BalancedBatch` whose rows are
grouped by class and use a learnable affine map ``w * cos + b``.

Every loss returns the scalar value together with the gradient w.r.t. the
raw (unnormalized) input embeddings and w.r.t. its own parameters. All
arithmetic is float64.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    DegenerateBatchError,
    InvalidConfigError,
    InvalidScaleError,
    NonFiniteInputError,
    ShapeMismatchError,
    ZeroNormError,
)
from .store import ZERO_NORM

AAM_CLAMP = 1e-7
LOSS_NAMES = ("softmax", "amsoftmax", "aamsoftmax", "ge2e", "angleproto")
METRIC_LOSSES = ("ge2e", "angleproto")


@dataclass
class HeadParams:
    W: np.ndarray
    b: np.ndarray

    @classmethod
    def init(cls, dim: int, num_classes: int, seed: int = 0) -> "HeadParams":
        rng = np.random.default_rng(seed)
        limit = math.sqrt(2.0 / dim)
        W = rng.uniform(-limit, limit, size=(dim, num_classes))
        return cls(W, np.zeros(num_classes))

    @classmethod
    def zeros(cls, dim: int, num_classes: int) -> "HeadParams":
        return cls(np.zeros((dim, num_classes)), np.zeros(num_classes))

    @property
    def num_classes(self) -> int:
        return self.W.shape[1]


@dataclass(frozen=True)
class MarginConfig:
    m: float = 0.3
    s: float = 30.0

    def __post_init__(self):
        if not self.s > 1:
            raise InvalidConfigError(f"margin scale s must exceed 1, got {self.s}")
        if not 0 <= self.m < math.pi / 2:
            raise InvalidConfigError(f"margin m must lie in [0, pi/2), got {self.m}")


@dataclass
class CosineParams:
    w: float = 10.0
    b: float = -5.0


@dataclass(frozen=True)
class BalancedBatch:
    """``n_classes * per_class`` rows, class-contiguous."""

    embeddings: np.ndarray
    n_classes: int
    per_class: int

    def __post_init__(self):
        emb = np.asarray(self.embeddings, dtype=np.float64)
        if emb.ndim != 2 or emb.shape[0] != self.n_classes * self.per_class:
            raise ShapeMismatchError(
                f"expected {self.n_classes}*{self.per_class} rows, got shape {emb.shape}"
            )
        object.__setattr__(self, "embeddings", emb)

    def grouped(self) -> np.ndarray:
        return self.embeddings.reshape(self.n_classes, self.per_class, -1)


@dataclass
class LossOutput:
    loss: float
    grad_embeddings: np.ndarray
    grad_params: dict = field(default_factory=dict)


# ---------------------------------------------------------------------------
# shared pieces


def _unit_rows(a: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    norms = np.sqrt(np.einsum("ij,ij->i", a, a))
    if np.any(~(norms >= ZERO_NORM)):
        raise ZeroNormError("degenerate (zero-norm) vector in cosine computation")
    return a / norms[:, None], norms


def _unit_rows_backward(unit, norms, grad_unit):
    # Jacobian of a/|a| is (I - u u^T) / |a|
    radial = np.einsum("ij,ij->i", grad_unit, unit)
    return (grad_unit - unit * radial[:, None]) / norms[:, None]


def _cross_entropy(logits: np.ndarray, targets: np.ndarray, divisor: float):
    """Sum of -log softmax(logits)[target] over rows, divided by ``divisor``.

    Returns the loss and d loss / d logits.
    """
    rows = np.arange(logits.shape[0])
    top = logits.argmax(axis=1)
    shifted = logits - logits[rows, top][:, None]
    e = np.exp(shifted)
    rest = e.copy()
    rest[rows, top] = 0.0
    # log-sum-exp as log1p of the non-max mass keeps tiny losses accurate
    lse = np.log1p(rest.sum(axis=1))
    nll = lse - shifted[rows, targets]
    prob = e / (1.0 + rest.sum(axis=1))[:, None]
    grad = prob
    grad[rows, targets] -= 1.0
    return float(nll.sum() / divisor), grad / divisor


def _check_finite(*arrays):
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise NonFiniteInputError("input contains NaN or infinity")


def _check_classification_inputs(x, y, head):
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64).reshape(-1)
    W = np.asarray(head.W, dtype=np.float64)
    b = np.asarray(head.b, dtype=np.float64).reshape(-1)
    if x.ndim != 2 or x.shape[0] == 0:
        raise ShapeMismatchError(f"embeddings must be a non-empty (N, dim) matrix, got {x.shape}")
    if y.shape[0] != x.shape[0]:
        raise ShapeMismatchError(f"{x.shape[0]} embeddings but {y.shape[0]} labels")
    if W.ndim != 2 or W.shape[0] != x.shape[1]:
        raise ShapeMismatchError(f"head W shape {W.shape} incompatible with dim {x.shape[1]}")
    if b.shape[0] != W.shape[1]:
        raise ShapeMismatchError(f"head bias length {b.shape[0]} != {W.shape[1]} classes")
    if y.min() < 0 or y.max() >= W.shape[1]:
        raise ShapeMismatchError("label outside the head's class range")
    _check_finite(x, W, b)
    return x, y, W, b


# ---------------------------------------------------------------------------
# classification losses


def softmax_loss(x, y, head: HeadParams) -> LossOutput:
    x, y, W, b = _check_classification_inputs(x, y, head)
    logits = x @ W + b
    loss, dlogits = _cross_entropy(logits, y, x.shape[0])
    return LossOutput(
        loss,
        dlogits @ W.T,
        {"W": x.T @ dlogits, "b": dlogits.sum(axis=0)},
    )


def _margin_forward(x, y, head, cfg, additive_angle: bool) -> LossOutput:
    x, y, W, _ = _check_classification_inputs(x, y, head)
    rows = np.arange(x.shape[0])
    xu, xn = _unit_rows(x)
    wu, wn = _unit_rows(W.T)
    cos = xu @ wu.T
    logits = cfg.s * cos
    target_slope = np.ones(x.shape[0])
    if additive_angle:
        c = cos[rows, y]
        lo, hi = -1.0 + AAM_CLAMP, 1.0 - AAM_CLAMP
        inside = (c > lo) & (c < hi)
        cc = np.clip(c, lo, hi)
        theta = np.arccos(cc)
        logits[rows, y] = cfg.s * np.cos(theta + cfg.m)
        # d cos(acos(c) + m) / dc; zero where the clamp is active
        target_slope = np.where(inside, np.sin(theta + cfg.m) / np.sqrt(1.0 - cc * cc), 0.0)
    else:
        logits[rows, y] -= cfg.s * cfg.m
    loss, dlogits = _cross_entropy(logits, y, x.shape[0])
    dcos = cfg.s * dlogits
    dcos[rows, y] *= target_slope
    gx = _unit_rows_backward(xu, xn, dcos @ wu)
    gW = _unit_rows_backward(wu, wn, dcos.T @ xu).T
    return LossOutput(loss, gx, {"W": gW, "b": np.zeros(W.shape[1])})


def am_softmax_loss(x, y, head: HeadParams, cfg: MarginConfig = MarginConfig()) -> LossOutput:
    """Additive-margin softmax: target logit is ``s * (cos - m)``.

    Rows of ``x`` and columns of ``head.W`` are normalized on the fly; the
    head bias is ignored (its gradient is reported as zeros).
    """
    return _margin_forward(x, y, head, cfg, additive_angle=False)


def aam_softmax_loss(x, y, head: HeadParams, cfg: MarginConfig = MarginConfig()) -> LossOutput:
    """Additive-angular-margin softmax: target logit is ``s * cos(theta + m)``.

    ``theta = arccos(clip(cos, -1 + 1e-7, 1 - 1e-7))``; the gradient through
    the clip is zero outside that interval.
    """
    return _margin_forward(x, y, head, cfg, additive_angle=True)


# ---------------------------------------------------------------------------
# metric-learning losses


def _check_metric_inputs(batch: BalancedBatch, params: CosineParams | None = None):
    if batch.per_class < 2:
        raise DegenerateBatchError(f"need at least 2 rows per class, got {batch.per_class}")
    if batch.n_classes < 1:
        raise DegenerateBatchError("batch has no classes")
    if params is not None:
        if not params.w > 0:
            raise InvalidScaleError(f"cosine scale w must be positive, got {params.w}")
        _check_finite(np.array([params.w, params.b]))
    _check_finite(batch.embeddings)


def ge2e_centroids(batch: BalancedBatch) -> tuple[np.ndarray, np.ndarray]:
    """Per-class centroids and leave-one-out centroids.

    Returns ``full`` of shape (N, dim) and ``exclusive`` of shape (N, M, dim)
    where ``exclusive[j, i]`` averages class ``j`` without row ``i``.
    """
    _check_metric_inputs(batch)
    g = batch.grouped()
    M = batch.per_class
    total = g.sum(axis=1)
    return total / M, (total[:, None, :] - g) / (M - 1)


def ge2e_loss(batch: BalancedBatch, params: CosineParams = CosineParams()) -> LossOutput:
    """Generalized end-to-end loss.

    Every row is a query. It is compared against its own class's
    leave-one-out centroid and against the full centroids of the other
    classes. The summed cross-entropy over all N*M queries is divided by N.
    """
    _check_metric_inputs(batch, params)
    N, M = batch.n_classes, batch.per_class
    x = batch.embeddings
    D = x.shape[1]
    full, excl = ge2e_centroids(batch)
    own = np.repeat(np.arange(N), M)
    rows = np.arange(N * M)

    xu, xn = _unit_rows(x)
    cu, cn = _unit_rows(full)
    eu, en = _unit_rows(excl.reshape(N * M, D))
    cos = xu @ cu.T
    cos[rows, own] = np.einsum("ij,ij->i", xu, eu)

    logits = params.w * cos + params.b
    loss, dlogits = _cross_entropy(logits, own, N)
    dw = float(np.sum(dlogits * cos))
    db = float(np.sum(dlogits))

    dcos = params.w * dlogits
    d_own = dcos[rows, own].copy()
    dcos[rows, own] = 0.0
    dxu = dcos @ cu + d_own[:, None] * eu
    gx = _unit_rows_backward(xu, xn, dxu).reshape(N, M, D)
    g_full = _unit_rows_backward(cu, cn, dcos.T @ xu)
    g_excl = _unit_rows_backward(eu, en, d_own[:, None] * xu).reshape(N, M, D)
    gx += g_full[:, None, :] / M
    # row m feeds every exclusive centroid of its class except its own
    gx += (g_excl.sum(axis=1, keepdims=True) - g_excl) / (M - 1)
    return LossOutput(loss, gx.reshape(N * M, D), {"w": dw, "b": db})


def angular_proto_loss(batch: BalancedBatch, params: CosineParams = CosineParams()) -> LossOutput:
    """Angular prototypical loss.

    The last row of each class is the query; the first ``M - 1`` rows form
    the support centroid. Each query is classified against all N centroids.
    """
    _check_metric_inputs(batch, params)
    N, M = batch.n_classes, batch.per_class
    g = batch.grouped()
    D = g.shape[2]
    query = g[:, -1, :]
    support = g[:, :-1, :].mean(axis=1)

    qu, qn = _unit_rows(query)
    cu, cn = _unit_rows(support)
    cos = qu @ cu.T
    logits = params.w * cos + params.b
    loss, dlogits = _cross_entropy(logits, np.arange(N), N)
    dw = float(np.sum(dlogits * cos))
    db = float(np.sum(dlogits))

    dcos = params.w * dlogits
    gq = _unit_rows_backward(qu, qn, dcos @ cu)
    gc = _unit_rows_backward(cu, cn, dcos.T @ qu)
    gx = np.empty((N, M, D))
    gx[:, :-1, :] = gc[:, None, :] / (M - 1)
    gx[:, -1, :] = gq
    return LossOutput(loss, gx.reshape(N * M, D), {"w": dw, "b": db})


def compute_loss(name: str, x, labels, params, margin: MarginConfig | None = None,
                 n_classes: int | None = None, per_class: int | None = None) -> LossOutput:
    """Dispatch by loss name.

    ``params`` is a :class:`HeadParams` for the classification losses and a
    :class:`CosineParams` for the metric ones; metric losses also need the
    batch layout (``n_classes``, ``per_class``).
    """
    if name == "softmax":
        return softmax_loss(x, labels, params)
    if name == "amsoftmax":
        return am_softmax_loss(x, labels, params, margin or MarginConfig())
    if name == "aamsoftmax":
        return aam_softmax_loss(x, labels, params, margin or MarginConfig())
    if name in METRIC_LOSSES:
        if n_classes is None or per_class is None:
            raise InvalidConfigError(f"{name} needs a balanced batch layout")
        batch = BalancedBatch(x, n_classes, per_class)
        if name == "ge2e":
            return ge2e_loss(batch, params)
        return angular_proto_loss(batch, params)
    raise InvalidConfigError(f"unknown loss {name!r}; expected one of {LOSS_NAMES}")
