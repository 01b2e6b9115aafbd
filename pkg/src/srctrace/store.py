"""Embedding containers and on-disk formats.

Binary embedding file layout (all little-endian)::

    b"EMBF" | version u8 (=1) | count u32 | dim u32 | count*dim float32, row-major

Labels live next to it: ``<path>.labels`` holds one class name per row and
``<path>.classes`` holds the ordered class-name table, so the matrix block
stays contiguous and mmap-friendly.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass
from typing import Iterable

import numpy as np

from .errors import (
    DuplicateIdError,
    FormatError,
    ManifestParseError,
    ShapeMismatchError,
    ZeroNormError,
)

MAGIC = b"EMBF"
VERSION = 1
HEADER = struct.Struct("<4sBII")
ZERO_NORM = 1e-30
SPLITS = ("train", "dev", "test")


def l2_normalize(v) -> np.ndarray:
    """Scale ``v`` to unit Euclidean norm (float64)."""
    v = np.asarray(v, dtype=np.float64)
    if v.size == 0:
        raise ZeroNormError("cannot normalize an empty vector")
    norm = np.sqrt(np.dot(v.ravel(), v.ravel()))
    if not norm >= ZERO_NORM:
        raise ZeroNormError(f"vector norm {norm:g} below {ZERO_NORM:g}")
    return v / norm


def l2_normalize_rows(a) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    norms = np.sqrt(np.einsum("ij,ij->i", a, a))
    if np.any(~(norms >= ZERO_NORM)):
        bad = int(np.flatnonzero(~(norms >= ZERO_NORM))[0])
        raise ZeroNormError(f"row {bad} has norm below {ZERO_NORM:g}")
    return a / norms[:, None]


@dataclass(frozen=True)
class EmbeddingSet:
    """Row-major embedding matrix with one integer label per row.

    The arrays are made read-only on construction; derive new sets with
    :meth:`subset` instead of mutating.
    """

    data: np.ndarray
    labels: np.ndarray
    class_names: tuple[str, ...]

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.dtype not in (np.float32, np.float64):
            data = data.astype(np.float64)
        if data.ndim != 2 or data.shape[1] < 1:
            raise ShapeMismatchError(f"data must be (count, dim>=1), got {data.shape}")
        labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if labels.shape[0] != data.shape[0]:
            raise ShapeMismatchError(
                f"{data.shape[0]} rows but {labels.shape[0]} labels"
            )
        names = tuple(str(n) for n in self.class_names)
        if labels.size and (labels.min() < 0 or labels.max() >= len(names)):
            raise ShapeMismatchError("label outside [0, num_classes)")
        data = data.copy() if data.flags.writeable else data
        labels = labels.copy() if labels.flags.writeable else labels
        data.setflags(write=False)
        labels.setflags(write=False)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "class_names", names)

    @property
    def count(self) -> int:
        return self.data.shape[0]

    @property
    def dim(self) -> int:
        return self.data.shape[1]

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def normalized(self) -> np.ndarray:
        """Unit-norm rows as float64 (raw rows stay available via ``data``)."""
        return l2_normalize_rows(self.data)

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)

    def subset(self, rows) -> "EmbeddingSet":
        rows = np.asarray(rows)
        return EmbeddingSet(self.data[rows], self.labels[rows], self.class_names)

    def with_data(self, data) -> "EmbeddingSet":
        return EmbeddingSet(data, self.labels, self.class_names)

    def __eq__(self, other):
        if not isinstance(other, EmbeddingSet):
            return NotImplemented
        return (
            self.class_names == other.class_names
            and self.data.dtype == other.data.dtype
            and self.data.shape == other.data.shape
            and self.data.tobytes() == other.data.tobytes()
            and np.array_equal(self.labels, other.labels)
        )

    __hash__ = None


def encode_matrix(data) -> bytes:
    data = np.asarray(data)
    if data.ndim != 2:
        raise ShapeMismatchError(f"expected a 2-D matrix, got shape {data.shape}")
    count, dim = data.shape
    body = np.ascontiguousarray(data, dtype="<f4").tobytes()
    return HEADER.pack(MAGIC, VERSION, count, dim) + body


def decode_matrix(buf: bytes, offset: int = 0) -> tuple[np.ndarray, int]:
    """Parse one EMBF block starting at ``offset``; returns (matrix, end offset)."""
    if len(buf) - offset < HEADER.size:
        raise FormatError("truncated header")
    magic, version, count, dim = HEADER.unpack_from(buf, offset)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    if version != VERSION:
        raise FormatError(f"unsupported version {version}")
    start = offset + HEADER.size
    end = start + 4 * count * dim
    if len(buf) < end:
        raise FormatError(f"expected {count}x{dim} floats, file is truncated")
    mat = np.frombuffer(buf, dtype="<f4", count=count * dim, offset=start)
    return mat.reshape(count, dim).astype(np.float32), end


def write_embeddings(emb: EmbeddingSet, path) -> int:
    """Write the matrix file plus label sidecars; returns the matrix file size."""
    path = os.fspath(path)
    for name in emb.class_names:
        if "\n" in name or "\r" in name:
            raise FormatError(f"class name {name!r} contains a line break")
    blob = encode_matrix(emb.data)
    with open(path, "wb") as fh:
        fh.write(blob)
    with open(path + ".labels", "w", encoding="utf-8", newline="\n") as fh:
        fh.writelines(emb.class_names[i] + "\n" for i in emb.labels)
    with open(path + ".classes", "w", encoding="utf-8", newline="\n") as fh:
        fh.writelines(n + "\n" for n in emb.class_names)
    return len(blob)


def read_matrix(path) -> np.ndarray:
    with open(path, "rb") as fh:
        buf = fh.read()
    mat, end = decode_matrix(buf)
    if end != len(buf):
        raise FormatError(f"{len(buf) - end} trailing bytes after matrix")
    return mat


def _read_lines(path) -> list[str]:
    with open(path, "r", encoding="utf-8", newline="") as fh:
        return fh.read().splitlines()


def read_embeddings(path) -> EmbeddingSet:
    path = os.fspath(path)
    data = read_matrix(path)
    if os.path.exists(path + ".labels"):
        row_names = _read_lines(path + ".labels")
    else:
        row_names = ["unknown"] * data.shape[0]
    if len(row_names) != data.shape[0]:
        raise FormatError(
            f"{path}.labels has {len(row_names)} lines for {data.shape[0]} rows"
        )
    if os.path.exists(path + ".classes"):
        names = _read_lines(path + ".classes")
    else:
        names = list(dict.fromkeys(row_names))
    index = {n: i for i, n in enumerate(names)}
    try:
        labels = np.array([index[n] for n in row_names], dtype=np.int64)
    except KeyError as exc:
        raise FormatError(f"label {exc.args[0]!r} missing from class table") from None
    return EmbeddingSet(data, labels, tuple(names))


@dataclass(frozen=True)
class ManifestEntry:
    sample_id: str
    label: str
    split: str = "train"
    language: str | None = None
    model_seen: bool | None = None
    language_seen: bool | None = None

    def __post_init__(self):
        if self.split not in SPLITS:
            raise ValueError(f"split must be one of {SPLITS}, got {self.split!r}")

    def to_json(self) -> str:
        return json.dumps(
            {
                "sample_id": self.sample_id,
                "label": self.label,
                "language": self.language,
                "model_seen": self.model_seen,
                "language_seen": self.language_seen,
                "split": self.split,
            }
        )


_MANIFEST_KEYS = {"sample_id", "label", "language", "model_seen", "language_seen", "split"}


def _parse_entry(line_no: int, text: str) -> ManifestEntry:
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ManifestParseError(line_no, f"invalid JSON: {exc.msg}") from None
    if not isinstance(obj, dict):
        raise ManifestParseError(line_no, "record is not a JSON object")
    unknown = set(obj) - _MANIFEST_KEYS
    if unknown:
        raise ManifestParseError(line_no, f"unknown keys {sorted(unknown)}")
    for key in ("sample_id", "label", "split"):
        if not isinstance(obj.get(key), str):
            raise ManifestParseError(line_no, f"{key!r} must be a string")
    if obj["split"] not in SPLITS:
        raise ManifestParseError(line_no, f"split {obj['split']!r} not in {SPLITS}")
    if obj.get("language") is not None and not isinstance(obj["language"], str):
        raise ManifestParseError(line_no, "'language' must be a string or null")
    for key in ("model_seen", "language_seen"):
        if obj.get(key) is not None and not isinstance(obj[key], bool):
            raise ManifestParseError(line_no, f"{key!r} must be a boolean or null")
    return ManifestEntry(
        sample_id=obj["sample_id"],
        label=obj["label"],
        split=obj["split"],
        language=obj.get("language"),
        model_seen=obj.get("model_seen"),
        language_seen=obj.get("language_seen"),
    )


def read_manifest(source) -> list[ManifestEntry]:
    """Parse line-delimited JSON records; ``source`` is a path or text stream."""
    if isinstance(source, (str, os.PathLike)):
        with open(source, "r", encoding="utf-8") as fh:
            return read_manifest(fh)
    entries: list[ManifestEntry] = []
    seen: set[str] = set()
    for line_no, line in enumerate(source, start=1):
        if not line.strip():
            continue
        entry = _parse_entry(line_no, line)
        if entry.sample_id in seen:
            raise DuplicateIdError(entry.sample_id, line_no)
        seen.add(entry.sample_id)
        entries.append(entry)
    return entries


def write_manifest(entries: Iterable[ManifestEntry], dest) -> None:
    if isinstance(dest, (str, os.PathLike)):
        with open(dest, "w", encoding="utf-8", newline="\n") as fh:
            write_manifest(entries, fh)
        return
    seen: set[str] = set()
    for e in entries:
        if e.sample_id in seen:
            raise DuplicateIdError(e.sample_id)
        seen.add(e.sample_id)
        dest.write(e.to_json() + "\n")
