"""Trial scoring, EER, linear probing and 2-D projection.

Scoring is all unordered pairs ``i < j`` within one set; same-label pairs
are target trials. A trial is accepted when ``score >= threshold``, so

    FRR(t) = #(target < t) / n_target
    FAR(t) = #(nontarget >= t) / n_nontarget
"""

from __future__ import annotations

import csv
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Iterator, NamedTuple

import numpy as np

from .errors import DegenerateSetError, InvalidConfigError, TooFewSamplesError, ZeroNormError
from .losses import HeadParams, softmax_loss
from .store import ZERO_NORM, EmbeddingSet

DEFAULT_BLOCK = 1024
SCORE_SLACK = 1e-9


@dataclass
class TrialScores:
    target_scores: np.ndarray
    nontarget_scores: np.ndarray

    def __post_init__(self):
        self.target_scores = np.asarray(self.target_scores, dtype=np.float64).ravel()
        self.nontarget_scores = np.asarray(self.nontarget_scores, dtype=np.float64).ravel()
        for arr in (self.target_scores, self.nontarget_scores):
            if arr.size and (arr.min() < -1 - SCORE_SLACK or arr.max() > 1 + SCORE_SLACK):
                raise DegenerateSetError("scores must lie in [-1, 1]")

    @property
    def n_target(self) -> int:
        return self.target_scores.size

    @property
    def n_nontarget(self) -> int:
        return self.nontarget_scores.size


# ---------------------------------------------------------------------------
# pair scoring


def _unit_rows_sequential(x: np.ndarray) -> np.ndarray:
    # Fixed left-to-right accumulation over features so results do not
    # depend on BLAS kernels or thread counts.
    sq = np.zeros(x.shape[0])
    for k in range(x.shape[1]):
        sq += x[:, k] * x[:, k]
    norms = np.sqrt(sq)
    if np.any(~(norms >= ZERO_NORM)):
        bad = int(np.flatnonzero(~(norms >= ZERO_NORM))[0])
        raise ZeroNormError(f"row {bad} has zero norm; cannot score it")
    return x / norms[:, None]


def _block_dot(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    out = np.zeros((A.shape[0], B.shape[0]))
    tmp = np.empty_like(out)
    for k in range(A.shape[1]):
        np.multiply(A[:, k, None], B[None, :, k], out=tmp)
        out += tmp
    return out


def _score_block(unit, labels, lo_i, hi_i, lo_j, hi_j):
    s = _block_dot(unit[lo_i:hi_i], unit[lo_j:hi_j])
    gi = np.arange(lo_i, hi_i)[:, None]
    gj = np.arange(lo_j, hi_j)[None, :]
    upper = gi < gj
    same = labels[lo_i:hi_i, None] == labels[None, lo_j:hi_j]
    return s[upper & same], s[upper & ~same]


def iter_pair_scores(emb: EmbeddingSet, block_size: int = DEFAULT_BLOCK,
                     threads: int = 1) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Yield ``(target, nontarget)`` score chunks, one per row-block pair.

    Chunks come out in a fixed block order whatever ``threads`` is, and at
    most ``threads`` score tiles are alive at once.
    """
    if block_size < 1:
        raise InvalidConfigError("block_size must be >= 1")
    if emb.count < 2:
        raise DegenerateSetError(f"need at least 2 rows to form a pair, got {emb.count}")
    unit = _unit_rows_sequential(np.asarray(emb.data, dtype=np.float64))
    labels = emb.labels
    n = emb.count
    starts = list(range(0, n, block_size))
    tiles = [
        (a, min(a + block_size, n), b, min(b + block_size, n))
        for ai, a in enumerate(starts)
        for b in starts[ai:]
    ]
    if threads <= 1:
        for t in tiles:
            yield _score_block(unit, labels, *t)
        return
    with ThreadPoolExecutor(max_workers=threads) as pool:
        for k in range(0, len(tiles), threads):
            yield from pool.map(lambda t: _score_block(unit, labels, *t), tiles[k:k + threads])


def score_all_pairs(emb: EmbeddingSet, block_size: int = DEFAULT_BLOCK, threads: int = 1) -> TrialScores:
    """Cosine score of every unordered pair of rows."""
    tgt, non = [], []
    for t, nt in iter_pair_scores(emb, block_size, threads):
        tgt.append(t)
        non.append(nt)
    return TrialScores(np.concatenate(tgt), np.concatenate(non))


# ---------------------------------------------------------------------------
# EER


def _require_both(n_target, n_nontarget):
    if n_target == 0 or n_nontarget == 0:
        raise DegenerateSetError(
            f"EER needs target and nontarget trials (got {n_target} / {n_nontarget})"
        )


def _crossing(frr: np.ndarray, far: np.ndarray, thresholds: np.ndarray) -> tuple[float, float]:
    """First operating point where FRR - FAR >= 0, interpolated against the previous one."""
    diff = frr - far
    k = int(np.argmax(diff >= 0))
    if diff[k] == 0 or k == 0:
        return float(frr[k]), float(thresholds[k])
    d0, d1 = diff[k - 1], diff[k]
    alpha = d0 / (d0 - d1)
    eer = frr[k - 1] + alpha * (frr[k] - frr[k - 1])
    t0, t1 = thresholds[k - 1], thresholds[k]
    if not math.isfinite(t1):
        t1 = np.nextafter(t0, np.inf)
    return float(eer), float(t0 + alpha * (t1 - t0))


def compute_eer_exact(scores: TrialScores) -> tuple[float, float]:
    """Exact EER by sweeping every distinct score as a threshold.

    Returns ``(eer, threshold)``. Between the last operating point with
    FRR < FAR and the first with FRR >= FAR both rates are linearly
    interpolated to their intersection.
    """
    tgt = np.sort(scores.target_scores)
    non = np.sort(scores.nontarget_scores)
    _require_both(tgt.size, non.size)
    thresholds = np.append(np.unique(np.concatenate([tgt, non])), np.inf)
    frr = np.searchsorted(tgt, thresholds, side="left") / tgt.size
    far = (non.size - np.searchsorted(non, thresholds, side="left")) / non.size
    return _crossing(frr, far, thresholds)


class ScoreHistogram:
    """Fixed-width histograms of target/nontarget scores over [-1, 1].

    Counts are integers, so merging partial histograms is order-independent.
    """

    def __init__(self, bins: int = 100_000):
        if bins < 1000:
            raise InvalidConfigError(f"histogram EER needs at least 1000 bins, got {bins}")
        self.bins = bins
        self.target = np.zeros(bins, dtype=np.int64)
        self.nontarget = np.zeros(bins, dtype=np.int64)

    def _index(self, s):
        idx = np.floor((np.asarray(s, dtype=np.float64) + 1.0) * (self.bins / 2.0)).astype(np.int64)
        return np.clip(idx, 0, self.bins - 1)

    def add(self, target, nontarget):
        self.target += np.bincount(self._index(target), minlength=self.bins)
        self.nontarget += np.bincount(self._index(nontarget), minlength=self.bins)

    def merge(self, other: "ScoreHistogram"):
        if other.bins != self.bins:
            raise InvalidConfigError("cannot merge histograms with different bin counts")
        self.target += other.target
        self.nontarget += other.nontarget

    def eer(self) -> tuple[float, float]:
        nt, nn = int(self.target.sum()), int(self.nontarget.sum())
        _require_both(nt, nn)
        # operating points at the lower edge of each bin, plus one past the top
        edges = np.linspace(-1.0, 1.0, self.bins + 1)
        below_t = np.concatenate([[0], np.cumsum(self.target)])
        below_n = np.concatenate([[0], np.cumsum(self.nontarget)])
        frr = below_t / nt
        far = (nn - below_n) / nn
        return _crossing(frr, far, edges)


def compute_eer_histogram(stream, bins: int = 100_000) -> float:
    """Approximate EER from streamed scores.

    ``stream`` is a :class:`TrialScores`, a :class:`ScoreHistogram`, or an
    iterable of ``(target_chunk, nontarget_chunk)`` pairs such as
    :func:`iter_pair_scores` produces.
    """
    if isinstance(stream, ScoreHistogram):
        return stream.eer()[0]
    hist = ScoreHistogram(bins)
    if isinstance(stream, TrialScores):
        hist.add(stream.target_scores, stream.nontarget_scores)
    else:
        for tgt, non in stream:
            hist.add(tgt, non)
    return hist.eer()[0]


def eer_report(scores: TrialScores, *, bins: int | None = None) -> dict:
    if bins is None:
        eer, thr = compute_eer_exact(scores)
    else:
        hist = ScoreHistogram(bins)
        hist.add(scores.target_scores, scores.nontarget_scores)
        eer, thr = hist.eer()
    return {"eer": eer, "threshold": thr, "n_target": scores.n_target, "n_nontarget": scores.n_nontarget}


def evaluate_eer(emb: EmbeddingSet, *, bins: int | None = None, block_size: int = DEFAULT_BLOCK,
                 threads: int = 1) -> dict:
    """All-pairs scoring followed by an EER report (exact unless ``bins`` given)."""
    if bins is None:
        return eer_report(score_all_pairs(emb, block_size, threads))
    hist = ScoreHistogram(bins)
    for tgt, non in iter_pair_scores(emb, block_size, threads):
        hist.add(tgt, non)
    eer, thr = hist.eer()
    return {"eer": eer, "threshold": thr, "n_target": int(hist.target.sum()),
            "n_nontarget": int(hist.nontarget.sum())}


# ---------------------------------------------------------------------------
# probing


def undersample(emb: EmbeddingSet, cap: int, seed: int = 0) -> EmbeddingSet:
    """Keep at most ``cap`` rows per class, chosen uniformly without replacement.

    Surviving rows keep their original relative order.
    """
    if cap < 1:
        raise InvalidConfigError("cap must be >= 1")
    rng = np.random.default_rng(seed)
    keep = np.ones(emb.count, dtype=bool)
    for c in range(emb.num_classes):
        rows = np.flatnonzero(emb.labels == c)
        if rows.size > cap:
            drop = rng.choice(rows, size=rows.size - cap, replace=False)
            keep[drop] = False
    if keep.all():
        return emb
    return emb.subset(np.flatnonzero(keep))


@dataclass(frozen=True)
class ProbeConfig:
    epochs: int = 50
    lr: float = 0.1
    train_fraction: float = 0.8
    per_class_cap: int = 300
    batch_size: int = 32
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.train_fraction < 1:
            raise InvalidConfigError("train_fraction must lie in (0, 1)")
        if self.per_class_cap < 1 or self.batch_size < 1 or self.epochs < 0:
            raise InvalidConfigError("per_class_cap and batch_size must be >= 1, epochs >= 0")


class ProbeResult(NamedTuple):
    head: HeadParams
    confusion: np.ndarray
    accuracy: float
    class_names: tuple[str, ...]
    n_train: int
    n_heldout: int


def stratified_split(labels, train_fraction: float, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    rng = np.random.default_rng(seed)
    labels = np.asarray(labels)
    train, held = [], []
    for c in np.unique(labels):
        rows = rng.permutation(np.flatnonzero(labels == c))
        k = int(round(train_fraction * rows.size))
        k = min(max(k, 1), rows.size - 1)
        train.append(rows[:k])
        held.append(rows[k:])
    return np.sort(np.concatenate(train)), np.sort(np.concatenate(held))


def confusion_matrix(true, pred, num_classes: int) -> np.ndarray:
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (np.asarray(true), np.asarray(pred)), 1)
    return cm


def linear_probe(emb: EmbeddingSet, cfg: ProbeConfig = ProbeConfig()) -> ProbeResult:
    """Undersample, split, fit one affine softmax layer with plain SGD, score held-out rows."""
    present = np.unique(emb.labels)
    if present.size < 2:
        raise TooFewSamplesError("linear probe needs at least two classes")
    data = undersample(emb, cfg.per_class_cap, cfg.seed)
    counts = data.class_counts()[present]
    if counts.min() < 2:
        raise TooFewSamplesError("every class needs at least 2 samples for a train/held-out split")

    train_rows, held_rows = stratified_split(data.labels, cfg.train_fraction, cfg.seed)
    x = np.asarray(data.data, dtype=np.float64)
    y = data.labels
    head = HeadParams.zeros(data.dim, data.num_classes)
    rng = np.random.default_rng([cfg.seed, 1])
    for _ in range(cfg.epochs):
        order = rng.permutation(train_rows)
        for k in range(0, order.size, cfg.batch_size):
            idx = order[k:k + cfg.batch_size]
            out = softmax_loss(x[idx], y[idx], head)
            head = HeadParams(head.W - cfg.lr * out.grad_params["W"], head.b - cfg.lr * out.grad_params["b"])

    pred = np.argmax(x[held_rows] @ head.W + head.b, axis=1)
    cm = confusion_matrix(y[held_rows], pred, data.num_classes)
    accuracy = float(np.trace(cm) / cm.sum())
    return ProbeResult(head, cm, accuracy, data.class_names, int(train_rows.size), int(held_rows.size))


# ---------------------------------------------------------------------------
# projection


def project_2d(emb: EmbeddingSet) -> np.ndarray:
    """PCA onto the top two principal directions.

    Each direction's sign is chosen so its largest-magnitude coordinate is
    positive, which makes the output deterministic.
    """
    x = np.asarray(emb.data, dtype=np.float64)
    if x.shape[0] < 2:
        raise DegenerateSetError("projection needs at least 2 rows")
    centered = x - x.mean(axis=0)
    cov = centered.T @ centered / (x.shape[0] - 1)
    vals, vecs = np.linalg.eigh(cov)
    if vals[-1] <= 0:
        raise DegenerateSetError("all rows are identical (rank 0)")
    order = np.argsort(vals)[::-1][:2]
    comps = vecs[:, order]
    if comps.shape[1] < 2:
        comps = np.hstack([comps, np.zeros((comps.shape[0], 1))])
    for k in range(comps.shape[1]):
        j = np.argmax(np.abs(comps[:, k]))
        if comps[j, k] < 0:
            comps[:, k] = -comps[:, k]
    return centered @ comps


# ---------------------------------------------------------------------------
# exports


def write_confusion_csv(path, confusion: np.ndarray, class_names) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["true\\pred", *class_names])
        for name, row in zip(class_names, confusion):
            w.writerow([name, *(int(v) for v in row)])


def write_projection_csv(path, coords: np.ndarray, emb: EmbeddingSet) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["x", "y", "label"])
        for (a, b), lab in zip(coords, emb.labels):
            w.writerow([repr(float(a)), repr(float(b)), emb.class_names[lab]])


def write_json(path, obj) -> None:
    text = json.dumps(obj, indent=2, sort_keys=True) + "\n"
    if path is None or path == "-":
        print(text, end="")
        return
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(text)


def condition_breakdown(emb: EmbeddingSet, entries, *, bins: int | None = None,
                        block_size: int = DEFAULT_BLOCK, threads: int = 1) -> dict:
    """EER per manifest condition flag (rows aligned with ``entries``)."""
    entries = list(entries)
    if len(entries) != emb.count:
        raise DegenerateSetError(f"manifest has {len(entries)} entries for {emb.count} rows")
    out = {}
    for flag in ("model_seen", "language_seen"):
        values = [getattr(e, flag) for e in entries]
        for v in (True, False):
            rows = np.array([i for i, x in enumerate(values) if x is v], dtype=np.int64)
            key = f"{flag}={str(v).lower()}"
            if rows.size < 2:
                continue
            try:
                out[key] = evaluate_eer(emb.subset(rows), bins=bins, block_size=block_size, threads=threads)
            except DegenerateSetError as exc:
                out[key] = {"error": str(exc)}
    return out


__all__ = [
    "TrialScores", "score_all_pairs", "iter_pair_scores", "compute_eer_exact",
    "compute_eer_histogram", "ScoreHistogram", "eer_report", "evaluate_eer",
    "undersample", "ProbeConfig", "ProbeResult", "linear_probe", "confusion_matrix",
    "stratified_split", "project_2d", "write_confusion_csv", "write_projection_csv",
    "condition_breakdown",
]
