"""SGD training loop, learning-rate schedule and checkpoints."""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from .batching import SamplerConfig, epoch_batches
from .errors import (
    ConfigConflictError,
    FormatError,
    InvalidConfigError,
    NonFiniteGradientError,
    NonFiniteInputError,
    NonFiniteLossError,
    OutOfRangeError,
    ShapeMismatchError,
)
from .evaluation import evaluate_eer
from .losses import LOSS_NAMES, METRIC_LOSSES, CosineParams, HeadParams, MarginConfig, compute_loss
from .network import MlpModel, backward, forward
from .store import EmbeddingSet, decode_matrix, encode_matrix

COSINE_W_FLOOR = 1e-6


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 300
    peak_lr: float = 1e-4
    warmup_epochs: int = 10
    momentum: float = 0.9
    eval_interval: int = 25
    loss: str = "ge2e"
    margin: MarginConfig = field(default_factory=MarginConfig)
    seed: int = 0
    eval_bins: int | None = None  # None: exact EER on the dev set

    def validate(self):
        if self.loss not in LOSS_NAMES:
            raise InvalidConfigError(f"unknown loss {self.loss!r}; expected one of {LOSS_NAMES}")
        if self.epochs < 0 or self.warmup_epochs < 0:
            raise InvalidConfigError("epochs and warmup_epochs must be non-negative")
        if self.epochs > 0 and not self.warmup_epochs < self.epochs:
            raise InvalidConfigError("warmup_epochs must be smaller than epochs")
        if not self.peak_lr > 0:
            raise InvalidConfigError("peak_lr must be positive")
        if not 0 <= self.momentum < 1:
            raise InvalidConfigError("momentum must lie in [0, 1)")
        if self.eval_interval < 1:
            raise InvalidConfigError("eval_interval must be >= 1")


def lr_at_epoch(epoch: int, cfg: TrainConfig) -> float:
    """Linear warm-up to ``peak_lr`` then cosine annealing to zero."""
    if not 0 <= epoch < cfg.epochs:
        raise OutOfRangeError(f"epoch {epoch} outside [0, {cfg.epochs})")
    if epoch < cfg.warmup_epochs:
        return cfg.peak_lr * (epoch + 1) / cfg.warmup_epochs
    progress = (epoch - cfg.warmup_epochs) / (cfg.epochs - cfg.warmup_epochs)
    return cfg.peak_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


def sgd_step(params: dict, grads: dict, lr: float, momentum: float, state: dict,
             floors: dict | None = None) -> tuple[dict, dict]:
    """``v <- momentum * v + g``; ``p <- p - lr * v``.

    Returns fresh dicts; inputs are not mutated. ``floors`` maps parameter
    names to a minimum value enforced after the update.
    """
    new_params, new_state = {}, {}
    for name, p in params.items():
        p = np.asarray(p, dtype=np.float64)
        g = np.asarray(grads[name], dtype=np.float64)
        if g.shape != p.shape:
            raise ShapeMismatchError(f"gradient for {name} has shape {g.shape}, expected {p.shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(f"non-finite gradient for {name}")
        v = g if name not in state else momentum * state[name] + g
        p = p - lr * v
        if floors and name in floors:
            p = np.maximum(p, floors[name])
        new_params[name] = p
        new_state[name] = v
    return new_params, new_state


# ---------------------------------------------------------------------------
# parameter plumbing


def model_params(model: MlpModel) -> dict:
    out = {}
    for k, (W, b) in enumerate(model.layers):
        out[f"layer{k}.W"] = W
        out[f"layer{k}.b"] = b
    if model.head is not None:
        out["head.W"] = model.head.W
        out["head.b"] = model.head.b
    if model.cosine is not None:
        out["cosine.w"] = np.float64(model.cosine.w)
        out["cosine.b"] = np.float64(model.cosine.b)
    return out


def set_model_params(model: MlpModel, params: dict) -> None:
    model.layers = [(params[f"layer{k}.W"], params[f"layer{k}.b"]) for k in range(len(model.layers))]
    if model.head is not None:
        model.head = HeadParams(params["head.W"], params["head.b"])
    if model.cosine is not None:
        model.cosine = CosineParams(float(params["cosine.w"]), float(params["cosine.b"]))


def prepare_model(model: MlpModel, loss: str, num_classes: int, seed: int = 0) -> MlpModel:
    """Attach the loss-specific parameters (classification head or cosine affine)."""
    model = model.copy()
    if loss in METRIC_LOSSES:
        model.head = None
        if model.cosine is None:
            model.cosine = CosineParams()
    else:
        model.cosine = None
        if model.head is None or model.head.W.shape != (model.output_dim, num_classes):
            model.head = HeadParams.init(model.output_dim, num_classes, seed)
    return model


def batch_step(model: MlpModel, features, labels, loss: str, margin: MarginConfig,
               layout: tuple[int, int] | None = None):
    """Loss value and gradients for every parameter of ``model`` on one batch."""
    emb, cache = forward(model, features)
    if loss in METRIC_LOSSES:
        out = compute_loss(loss, emb, labels, model.cosine, margin, *layout)
    else:
        out = compute_loss(loss, emb, labels, model.head, margin)
    grads = {}
    for k, (dW, db) in enumerate(backward(model, cache, out.grad_embeddings)):
        grads[f"layer{k}.W"] = dW
        grads[f"layer{k}.b"] = db
    if loss in METRIC_LOSSES:
        grads["cosine.w"] = np.float64(out.grad_params["w"])
        grads["cosine.b"] = np.float64(out.grad_params["b"])
    else:
        grads["head.W"] = out.grad_params["W"]
        grads["head.b"] = out.grad_params["b"]
    return out.loss, grads


def embed(model: MlpModel, emb: EmbeddingSet) -> EmbeddingSet:
    out, _ = forward(model, emb.data)
    return emb.with_data(out)


def dev_eer(model: MlpModel, dev_set: EmbeddingSet, bins: int | None = None) -> float:
    return evaluate_eer(embed(model, dev_set), bins=bins)["eer"]


# ---------------------------------------------------------------------------
# training loop


def train(model: MlpModel, dataset: EmbeddingSet, dev_set: EmbeddingSet | None,
          cfg: TrainConfig, sampler: SamplerConfig | None = None, *, log=None):
    """Train ``model`` and return ``(best_model, history)``.

    ``history`` holds one dict per epoch (``epoch``, ``mean_loss``, ``lr``
    and, on evaluation epochs, ``dev_eer``). Evaluation runs every
    ``eval_interval`` epochs and after the last epoch; the returned model is
    the one with the lowest dev EER (the final model without a dev set).
    """
    if cfg.epochs == 0:
        return model, []
    cfg.validate()
    if sampler is None:
        sampler = SamplerConfig(mode="balanced" if cfg.loss in METRIC_LOSSES else "random", seed=cfg.seed)
    if cfg.loss in METRIC_LOSSES and sampler.mode != "balanced":
        raise ConfigConflictError(f"{cfg.loss} requires the balanced sampler")
    if model.input_dim != dataset.dim:
        raise ShapeMismatchError(f"model expects {model.input_dim}-dim features, dataset has {dataset.dim}")

    model = prepare_model(model, cfg.loss, dataset.num_classes, cfg.seed)
    floors = {"cosine.w": COSINE_W_FLOOR}
    features = np.asarray(dataset.data, dtype=np.float64)
    labels = dataset.labels
    state: dict = {}
    history = []
    best_eer, best_model = math.inf, None

    for epoch in range(cfg.epochs):
        lr = lr_at_epoch(epoch, cfg)
        losses = []
        for batch in epoch_batches(labels, sampler, epoch):
            if sampler.mode == "balanced":
                idx, layout = batch.indices, (batch.n_classes, batch.per_class)
            else:
                idx, layout = batch, None
            try:
                value, grads = batch_step(model, features[idx], labels[idx], cfg.loss, cfg.margin, layout)
            except NonFiniteInputError:
                raise NonFiniteLossError(epoch) from None
            if not math.isfinite(value):
                raise NonFiniteLossError(epoch)
            params, state = sgd_step(model_params(model), grads, lr, cfg.momentum, state, floors)
            set_model_params(model, params)
            losses.append(value)
        record = {"epoch": epoch, "mean_loss": float(np.mean(losses)), "lr": lr}
        if dev_set is not None and ((epoch + 1) % cfg.eval_interval == 0 or epoch + 1 == cfg.epochs):
            eer = dev_eer(model, dev_set, cfg.eval_bins)
            record["dev_eer"] = eer
            if eer < best_eer:
                best_eer, best_model = eer, model.copy()
        history.append(record)
        if log is not None:
            log(record)

    final = best_model if best_model is not None else model
    final.meta.update(train=asdict(cfg), sampler=asdict(sampler), best_dev_eer=None if best_model is None else best_eer)
    return final, history


def write_history(history, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in history:
            fh.write(json.dumps(rec) + "\n")


def read_history(path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


# ---------------------------------------------------------------------------
# checkpoints
#
# u32 LE header length | UTF-8 JSON header | one EMBF block per tensor.
# The header lists tensor names and shapes in block order plus the model
# settings and run configuration.

_LEN = struct.Struct("<I")


def save_checkpoint(model: MlpModel, path, config: dict | None = None) -> int:
    params = model_params(model)
    tensors, blocks = [], []
    for name, value in params.items():
        arr = np.asarray(value, dtype=np.float64)
        tensors.append({"name": name, "shape": list(arr.shape)})
        blocks.append(encode_matrix(arr.reshape(1, -1) if arr.size else arr.reshape(0, 1)))
    header = {
        "format": "srctrace-checkpoint",
        "activation": model.activation,
        "normalize_output": model.normalize_output,
        "n_layers": len(model.layers),
        "tensors": tensors,
        "config": config or {},
        "meta": model.meta,
    }
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    blob = _LEN.pack(len(head)) + head + b"".join(blocks)
    with open(path, "wb") as fh:
        fh.write(blob)
    return len(blob)


def load_checkpoint(path) -> tuple[MlpModel, dict]:
    with open(path, "rb") as fh:
        buf = fh.read()
    if len(buf) < _LEN.size:
        raise FormatError("checkpoint truncated")
    (n,) = _LEN.unpack_from(buf, 0)
    try:
        header = json.loads(buf[_LEN.size:_LEN.size + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"bad checkpoint header: {exc}") from None
    if header.get("format") != "srctrace-checkpoint":
        raise FormatError("not a srctrace checkpoint")
    offset = _LEN.size + n
    params = {}
    for t in header["tensors"]:
        mat, offset = decode_matrix(buf, offset)
        params[t["name"]] = mat.astype(np.float64).reshape(t["shape"])
    layers = [(params[f"layer{k}.W"], params[f"layer{k}.b"]) for k in range(header["n_layers"])]
    head = HeadParams(params["head.W"], params["head.b"]) if "head.W" in params else None
    cosine = CosineParams(float(params["cosine.w"]), float(params["cosine.b"])) if "cosine.w" in params else None
    model = MlpModel(layers, header["activation"], header["normalize_output"], head, cosine, header.get("meta", {}))
    return model, header.get("config", {})
