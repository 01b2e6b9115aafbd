"""Seeded mini-batch index generation.

Two regimes: ``random`` (shuffle all indices, chunk into fixed-size
batches) and ``balanced`` (each batch holds ``per_class`` rows from each of
``n_classes_per_batch`` distinct classes, grouped contiguously by class).

Both are pure functions of ``(labels, config, epoch)``; the generator for an
epoch is seeded with ``[seed, epoch]``.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import numpy as np

from .errors import EmptyDatasetError, InvalidConfigError, TooFewClassesError


@dataclass(frozen=True)
class SamplerConfig:
    mode: str = "random"
    batch_size: int = 128
    n_classes_per_batch: int = 4
    per_class: int = 3
    seed: int = 0
    drop_last: bool = False
    batches_per_epoch: int | None = None  # balanced mode; default count // (N*kappa)

    def __post_init__(self):
        if self.mode not in ("random", "balanced"):
            raise InvalidConfigError(f"sampler mode must be 'random' or 'balanced', got {self.mode!r}")
        if self.mode == "random" and self.batch_size < 1:
            raise InvalidConfigError("batch_size must be >= 1")
        if self.mode == "balanced":
            if self.n_classes_per_batch < 1 or self.per_class < 1:
                raise InvalidConfigError("n_classes_per_batch and per_class must be >= 1")
            if self.batches_per_epoch is not None and self.batches_per_epoch < 1:
                raise InvalidConfigError("batches_per_epoch must be >= 1")

    @property
    def balanced_batch_size(self) -> int:
        return self.n_classes_per_batch * self.per_class


@dataclass(frozen=True)
class BatchLayout:
    """Index layout of one balanced batch: ``indices`` is class-contiguous."""

    indices: np.ndarray
    classes: np.ndarray
    per_class: int

    @property
    def n_classes(self) -> int:
        return len(self.classes)


def _epoch_rng(seed: int, epoch: int) -> np.random.Generator:
    return np.random.default_rng([seed & 0xFFFFFFFFFFFFFFFF, epoch])


def random_batches(labels, cfg: SamplerConfig, epoch: int = 0) -> list[np.ndarray]:
    n = len(labels)
    if n == 0:
        raise EmptyDatasetError("cannot sample batches from an empty dataset")
    order = _epoch_rng(cfg.seed, epoch).permutation(n)
    stop = (n // cfg.batch_size) * cfg.batch_size if cfg.drop_last else n
    return [order[i:i + cfg.batch_size] for i in range(0, stop, cfg.batch_size)]


class _ClassPool:
    """Per-class index pool: hands out shuffled indices, refilling when empty."""

    def __init__(self, members: np.ndarray, rng: np.random.Generator):
        self.members = members
        self.rng = rng
        self.queue: deque = deque()

    def take(self, k: int) -> np.ndarray:
        size = len(self.members)
        if size < k:
            # undersized class: every member once, remainder drawn with replacement
            extra = self.rng.choice(self.members, size=k - size, replace=True)
            return np.concatenate([self.rng.permutation(self.members), extra])
        out = []
        while len(out) < k:
            if not self.queue:
                self.queue.extend(self.rng.permutation(self.members).tolist())
            cand = self.queue.popleft()
            if cand in out:
                # only reachable right after a refill; defer to keep rows distinct
                self.queue.append(cand)
                continue
            out.append(cand)
        return np.array(out, dtype=np.int64)


def balanced_batches(labels, cfg: SamplerConfig, epoch: int = 0) -> list[BatchLayout]:
    """Class-balanced batches.

    Classes are drawn from a shuffled cycle over all classes, so every class
    appears before any repeats. Within a class, indices come from a shuffled
    pool; classes smaller than ``per_class`` are padded with replacement.
    """
    labels = np.asarray(labels)
    if labels.size == 0:
        raise EmptyDatasetError("cannot sample batches from an empty dataset")
    classes = np.unique(labels)
    N, k = cfg.n_classes_per_batch, cfg.per_class
    if len(classes) < N:
        raise TooFewClassesError(f"need {N} classes per batch, dataset has {len(classes)}")
    rng = _epoch_rng(cfg.seed, epoch)
    pools = {int(c): _ClassPool(np.flatnonzero(labels == c), rng) for c in classes}
    n_batches = cfg.batches_per_epoch or max(1, labels.size // (N * k))

    cycle: deque = deque()
    batches = []
    for _ in range(n_batches):
        chosen: list[int] = []
        deferred: list[int] = []
        while len(chosen) < N:
            if not cycle:
                cycle.extend(rng.permutation(classes).tolist())
            c = cycle.popleft()
            if c in chosen:
                deferred.append(c)
            else:
                chosen.append(c)
        cycle.extendleft(reversed(deferred))
        idx = np.concatenate([pools[c].take(k) for c in chosen])
        batches.append(BatchLayout(idx, np.array(chosen, dtype=np.int64), k))
    return batches


def epoch_batches(labels, cfg: SamplerConfig, epoch: int = 0):
    if cfg.mode == "balanced":
        return balanced_batches(labels, cfg, epoch)
    return random_batches(labels, cfg, epoch)
