"""Synthetic source-tracing data: one Gaussian blob per generator system.

Class centroids lie on a sphere whose radius makes the expected distance
between two centroids roughly ``class_separation``. Samples are centroid
plus isotropic noise of standard deviation ``cluster_spread``.

Optionally ``nuisance_dim`` of the ``dim`` coordinates carry class-independent
noise of scale ``nuisance_scale`` (think channel or language variation), and
the whole space is then rotated by a fixed random orthogonal matrix. Raw
cosine scoring suffers from that nuisance, while a learned projection can
remove it; unseen classes share the same structure.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import InvalidSpecError
from .store import EmbeddingSet, ManifestEntry


@dataclass(frozen=True)
class SynthSpec:
    n_classes: int = 24
    dim: int = 32
    samples_per_class: int = 40
    cluster_spread: float = 0.3
    class_separation: float = 2.0
    unseen_classes: int = 0
    seed: int = 0
    dev_samples_per_class: int | None = None
    nuisance_dim: int = 0
    nuisance_scale: float = 0.0

    def validate(self):
        if self.n_classes < 2:
            raise InvalidSpecError("n_classes must be >= 2")
        if self.dim < 1:
            raise InvalidSpecError("dim must be >= 1")
        if self.samples_per_class < 1:
            raise InvalidSpecError("samples_per_class must be >= 1")
        if self.dev_samples_per_class is not None and self.dev_samples_per_class < 1:
            raise InvalidSpecError("dev_samples_per_class must be >= 1")
        if not self.cluster_spread >= 0 or not self.class_separation >= 0:
            raise InvalidSpecError("cluster_spread and class_separation must be non-negative")
        if self.unseen_classes < 0:
            raise InvalidSpecError("unseen_classes must be >= 0")
        if not 0 <= self.nuisance_dim < self.dim:
            raise InvalidSpecError("nuisance_dim must lie in [0, dim)")
        if not self.nuisance_scale >= 0:
            raise InvalidSpecError("nuisance_scale must be non-negative")


def class_names(total: int) -> tuple[str, ...]:
    return tuple(f"system_{k:02d}" for k in range(total))


def _draw(rng, centroids, per_class, spec: SynthSpec, rotation):
    n_cls, sig_dim = centroids.shape
    labels = np.repeat(np.arange(n_cls), per_class)
    signal = centroids[labels] + spec.cluster_spread * rng.standard_normal((labels.size, sig_dim))
    if spec.nuisance_dim:
        nuisance = spec.nuisance_scale * rng.standard_normal((labels.size, spec.nuisance_dim))
        signal = np.hstack([signal, nuisance]) @ rotation
    return signal.astype(np.float32), labels


def generate(spec: SynthSpec) -> tuple[EmbeddingSet, EmbeddingSet, list[ManifestEntry]]:
    """Return ``(train, dev, manifest)``.

    ``train`` covers the first ``n_classes`` systems; ``dev`` holds fresh
    draws of those plus ``unseen_classes`` systems never present in train.
    Manifest entries follow the row order of train then dev.
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    total = spec.n_classes + spec.unseen_classes
    sig_dim = spec.dim - spec.nuisance_dim
    directions = rng.standard_normal((total, sig_dim))
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    centroids = directions * (spec.class_separation / math.sqrt(2.0))
    rotation = None
    if spec.nuisance_dim:
        q, r = np.linalg.qr(rng.standard_normal((spec.dim, spec.dim)))
        rotation = q * np.sign(np.diag(r))

    names = class_names(total)
    x_tr, y_tr = _draw(rng, centroids[: spec.n_classes], spec.samples_per_class, spec, rotation)
    dev_per = spec.dev_samples_per_class or spec.samples_per_class
    x_dev, y_dev = _draw(rng, centroids, dev_per, spec, rotation)

    train = EmbeddingSet(x_tr, y_tr, names[: spec.n_classes])
    dev = EmbeddingSet(x_dev, y_dev, names)
    manifest = [
        ManifestEntry(f"train-{i:06d}", names[y], "train", model_seen=True)
        for i, y in enumerate(y_tr)
    ]
    manifest += [
        ManifestEntry(f"dev-{i:06d}", names[y], "dev", model_seen=bool(y < spec.n_classes))
        for i, y in enumerate(y_dev)
    ]
    return train, dev, manifest


def seen_rows(entries, split: str = "dev", seen: bool = True) -> np.ndarray:
    rows = [e for e in entries if e.split == split]
    return np.array([i for i, e in enumerate(rows) if e.model_seen is seen], dtype=np.int64)
