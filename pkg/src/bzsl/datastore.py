"""Datasets, per-class sufficient statistics, splits, PCA and file I/O.

File formats
------------
CSV matrix
    UTF-8, comma separated, no header, one row per line.
bmat
    8-byte magic ``BZSLMAT1``, then rows and cols as little-endian uint64,
    then ``rows * cols`` little-endian float64 values in row-major order.
Label file
    CSV with header ``sample_id,class_name[,group_id]``, rows in feature order.
Split file
    CSV with header ``sample_id,partition``; partition is one of
    ``train_seen``, ``test_seen``, ``test_unseen``.
"""

from __future__ import annotations

import csv
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    DegenerateSplit,
    DimensionError,
    EmptyClass,
    FormatError,
    IoError,
    LengthMismatch,
    NonFiniteValue,
)
from .numkernel import as_sym

BMAT_MAGIC = b"BZSLMAT1"
PARTITIONS = ("train_seen", "test_seen", "test_unseen")


def child_rng(seed: int, stream: str) -> np.random.Generator:
    """Independent, reproducible generator for a named random stream."""
    return np.random.default_rng([int(seed), zlib.crc32(stream.encode("utf-8"))])


# --------------------------------------------------------------------------
# matrices


def as_feature_matrix(values) -> np.ndarray:
    x = np.array(values, dtype=np.float64)
    if x.ndim == 1:
        x = x.reshape(1, -1)
    if x.ndim != 2 or x.shape[0] < 1 or x.shape[1] < 1:
        raise FormatError(f"feature matrix must be 2-D and non-empty, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        bad = np.argwhere(~np.isfinite(x))[0]
        raise NonFiniteValue(f"non-finite value at row {bad[0]}, column {bad[1]}")
    return x


def _format_for(path, fmt):
    if fmt is not None:
        return fmt
    return "csv" if str(path).lower().endswith(".csv") else "bmat"


def load_matrix(path, fmt: str | None = None) -> np.ndarray:
    """Load a feature matrix from a CSV or bmat file.

    ``fmt`` defaults to ``csv`` for ``*.csv`` paths and ``bmat`` otherwise.
    """
    fmt = _format_for(path, fmt)
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    if fmt == "bmat":
        return _parse_bmat(raw, path)
    if fmt == "csv":
        return _parse_csv(raw, path)
    raise FormatError(f"unknown matrix format {fmt!r}")


def _parse_bmat(raw: bytes, path) -> np.ndarray:
    if len(raw) < 24 or raw[:8] != BMAT_MAGIC:
        raise FormatError(f"{path}: bad magic, expected {BMAT_MAGIC!r}")
    rows, cols = struct.unpack("<QQ", raw[8:24])
    expected = 24 + 8 * rows * cols
    if len(raw) != expected:
        raise FormatError(f"{path}: header says {rows}x{cols} but payload has {len(raw) - 24} bytes")
    values = np.frombuffer(raw, dtype="<f8", offset=24).astype(np.float64).reshape(rows, cols)
    return as_feature_matrix(values)


def _parse_csv(raw: bytes, path) -> np.ndarray:
    try:
        text = raw.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise FormatError(f"{path}: not UTF-8") from exc
    rows = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            rows.append([float(cell) for cell in line.split(",")])
        except ValueError as exc:
            raise FormatError(f"{path}:{lineno}: non-numeric cell") from exc
    if not rows:
        raise FormatError(f"{path}: empty matrix")
    width = len(rows[0])
    if any(len(r) != width for r in rows):
        raise FormatError(f"{path}: ragged rows")
    return as_feature_matrix(rows)


def encode_bmat(x) -> bytes:
    x = np.ascontiguousarray(x, dtype="<f8")
    if x.ndim != 2:
        raise FormatError("bmat stores 2-D matrices only")
    return BMAT_MAGIC + struct.pack("<QQ", x.shape[0], x.shape[1]) + x.tobytes(order="C")


def save_matrix(path, x, fmt: str | None = None):
    fmt = _format_for(path, fmt)
    x = np.asarray(x, dtype=np.float64)
    if fmt == "bmat":
        Path(path).write_bytes(encode_bmat(x))
    elif fmt == "csv":
        with open(path, "w", encoding="utf-8", newline="") as fh:
            for row in np.atleast_2d(x):
                fh.write(",".join(repr(float(v)) for v in row) + "\n")
    else:
        raise FormatError(f"unknown matrix format {fmt!r}")


# --------------------------------------------------------------------------
# labels


@dataclass
class LabelVector:
    """Dense integer class ids plus the names they were assigned from.

    Ids are assigned by first appearance, so ``class_names[labels[k]]`` is
    the name of sample ``k``.
    """

    labels: np.ndarray
    class_names: list = field(default_factory=list)
    sample_ids: list | None = None
    group_ids: list | None = None

    def __len__(self):
        return len(self.labels)

    @property
    def n_classes(self) -> int:
        return len(self.class_names) if self.class_names else int(self.labels.max()) + 1

    def name_of(self, class_id) -> str:
        if self.class_names:
            return self.class_names[class_id]
        return str(class_id)

    def id_of(self, name: str) -> int:
        return self.class_names.index(name)

    @classmethod
    def from_names(cls, names, sample_ids=None, group_ids=None):
        index = {}
        labels = np.empty(len(names), dtype=np.int64)
        for k, name in enumerate(names):
            labels[k] = index.setdefault(name, len(index))
        return cls(labels, list(index), sample_ids, group_ids)


def load_labels(path) -> LabelVector:
    try:
        fh = open(path, encoding="utf-8", newline="")
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    with fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header[:2]] != ["sample_id", "class_name"]:
            raise FormatError(f"{path}: header must start with sample_id,class_name")
        with_groups = len(header) >= 3 and header[2].strip() == "group_id"
        sample_ids, names, groups = [], [], []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) < (3 if with_groups else 2):
                raise FormatError(f"{path}:{lineno}: too few columns")
            sample_ids.append(row[0].strip())
            names.append(row[1].strip())
            if with_groups:
                groups.append(row[2].strip())
    if not names:
        raise FormatError(f"{path}: no label rows")
    return LabelVector.from_names(names, sample_ids, groups if with_groups else None)


def save_labels(path, labels: LabelVector):
    sample_ids = labels.sample_ids or [str(k) for k in range(len(labels))]
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sample_id", "class_name"] + (["group_id"] if labels.group_ids else []))
        for k, sid in enumerate(sample_ids):
            row = [sid, labels.name_of(int(labels.labels[k]))]
            if labels.group_ids:
                row.append(labels.group_ids[k])
            w.writerow(row)


# --------------------------------------------------------------------------
# sufficient statistics


@dataclass(frozen=True)
class ClassStats:
    class_id: int
    mean: np.ndarray
    scatter: np.ndarray
    count: int

    @property
    def covariance(self) -> np.ndarray:
        """Unbiased sample covariance; only meaningful for ``count >= 2``."""
        return self.scatter / (self.count - 1)


def class_stats_from_rows(class_id, rows) -> ClassStats:
    rows = np.asarray(rows, dtype=np.float64)
    if rows.shape[0] == 0:
        raise EmptyClass(f"class {class_id} has no samples")
    mean = rows.mean(axis=0)
    centered = rows - mean
    return ClassStats(class_id, mean, as_sym(centered.T @ centered), rows.shape[0])


def compute_class_stats(x, y, class_ids) -> list[ClassStats]:
    """Mean, scatter matrix and count for each requested class, in the
    order given by ``class_ids``."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y)
    if len(y) != x.shape[0]:
        raise LengthMismatch(f"{x.shape[0]} feature rows but {len(y)} labels")
    return [class_stats_from_rows(c, x[y == c]) for c in class_ids]


def merge_class_stats(a: ClassStats, b: ClassStats) -> ClassStats:
    """Combine statistics of two disjoint sample sets of one class."""
    n = a.count + b.count
    delta = b.mean - a.mean
    mean = a.mean + delta * (b.count / n)
    scatter = a.scatter + b.scatter + np.outer(delta, delta) * (a.count * b.count / n)
    return ClassStats(a.class_id, mean, as_sym(scatter), n)


# --------------------------------------------------------------------------
# splits


@dataclass
class SplitSpec:
    train_seen: np.ndarray
    test_seen: np.ndarray
    test_unseen: np.ndarray
    seen_classes: np.ndarray
    unseen_classes: np.ndarray

    def validate(self, y):
        y = np.asarray(y)
        sets = [set(self.train_seen.tolist()), set(self.test_seen.tolist()), set(self.test_unseen.tolist())]
        if sets[0] & sets[1] or sets[0] & sets[2] or sets[1] & sets[2]:
            raise DegenerateSplit("split index sets overlap")
        seen, unseen = set(self.seen_classes.tolist()), set(self.unseen_classes.tolist())
        if seen & unseen:
            raise DegenerateSplit("a class is marked both seen and unseen")
        for name, idx, allowed in (
            ("train_seen", self.train_seen, seen),
            ("test_seen", self.test_seen, seen),
            ("test_unseen", self.test_unseen, unseen),
        ):
            stray = set(y[idx].tolist()) - allowed
            if stray:
                raise DegenerateSplit(f"{name} contains samples of classes {sorted(stray)}")
        return self

    def partition_of(self, n: int) -> list:
        part = [None] * n
        for name in PARTITIONS:
            for i in getattr(self, name):
                part[int(i)] = name
        return part


def _sorted_idx(values) -> np.ndarray:
    return np.array(sorted(int(v) for v in values), dtype=np.int64)


def make_split(
    y, unseen_frac: float, seen_test_frac: float, group_ids=None, seed: int = 0
) -> SplitSpec:
    """Random class-level zero-shot split with stratified seen test samples.

    ``round(unseen_frac * C)`` classes (at least one) become unseen. Every
    seen class sends ``round(seen_test_frac * n_c)`` of its samples to
    ``test_seen``. Samples whose group id is shared with other samples stay
    in ``train_seen`` together and are never drawn for testing.
    """
    if not 0 < unseen_frac < 1 or not 0 < seen_test_frac < 1:
        raise DegenerateSplit("fractions must lie strictly between 0 and 1")
    y = np.asarray(y)
    classes = np.unique(y)
    rng = child_rng(seed, "split")
    n_unseen = max(1, int(round(unseen_frac * len(classes))))
    if n_unseen >= len(classes):
        raise DegenerateSplit(f"{len(classes)} classes leave no seen class")
    unseen = np.sort(rng.choice(classes, size=n_unseen, replace=False))
    seen = np.setdiff1d(classes, unseen)

    multi = np.zeros(len(y), dtype=bool)
    if group_ids is not None:
        if len(group_ids) != len(y):
            raise LengthMismatch("group_ids length differs from labels")
        counts = {}
        for g in group_ids:
            counts[g] = counts.get(g, 0) + 1
        multi = np.array([counts[g] > 1 for g in group_ids], dtype=bool)

    train, test = [], []
    for c in seen:
        members = np.flatnonzero(y == c)
        eligible = members[~multi[members]]
        n_test = min(int(round(seen_test_frac * len(members))), len(eligible))
        chosen = set(rng.choice(eligible, size=n_test, replace=False).tolist()) if n_test else set()
        if len(chosen) == len(members):
            raise DegenerateSplit(f"seen class {c} would have no training samples")
        test.extend(chosen)
        train.extend(set(members.tolist()) - chosen)
    test_unseen = np.flatnonzero(np.isin(y, unseen))
    return SplitSpec(_sorted_idx(train), _sorted_idx(test), test_unseen.astype(np.int64), seen, unseen).validate(y)


def split_from_partitions(y, partitions) -> SplitSpec:
    y = np.asarray(y)
    idx = {name: [] for name in PARTITIONS}
    for k, p in enumerate(partitions):
        if p not in idx:
            raise FormatError(f"unknown partition {p!r} for sample {k}")
        idx[p].append(k)
    seen = np.unique(y[idx["train_seen"] + idx["test_seen"]])
    unseen = np.unique(y[idx["test_unseen"]])
    return SplitSpec(*(np.array(idx[n], dtype=np.int64) for n in PARTITIONS), seen, unseen).validate(y)


def load_split(path, labels: LabelVector) -> SplitSpec:
    try:
        fh = open(path, encoding="utf-8", newline="")
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    with fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header[:2]] != ["sample_id", "partition"]:
            raise FormatError(f"{path}: header must be sample_id,partition")
        assigned = {}
        for row in reader:
            if row:
                assigned[row[0].strip()] = row[1].strip()
    sample_ids = labels.sample_ids or [str(k) for k in range(len(labels))]
    missing = [s for s in sample_ids if s not in assigned]
    if missing:
        raise FormatError(f"{path}: no partition for sample {missing[0]}")
    return split_from_partitions(labels.labels, [assigned[s] for s in sample_ids])


def save_split(path, split: SplitSpec, labels: LabelVector):
    sample_ids = labels.sample_ids or [str(k) for k in range(len(labels))]
    part = split.partition_of(len(labels))
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sample_id", "partition"])
        for sid, p in zip(sample_ids, part):
            if p is not None:
                w.writerow([sid, p])


# --------------------------------------------------------------------------
# PCA


@dataclass(frozen=True)
class PcaModel:
    mean: np.ndarray
    basis: np.ndarray

    @property
    def out_dim(self) -> int:
        return self.basis.shape[1]


def pca_fit(x, out_dim: int) -> PcaModel:
    """Top ``out_dim`` principal directions of ``x`` (rows are samples).

    Column signs are fixed so the largest-magnitude entry of each basis
    vector is positive, which makes the fit reproducible.
    """
    x = np.asarray(x, dtype=np.float64)
    n, d = x.shape
    if not 1 <= out_dim <= min(n, d):
        raise DimensionError(f"out_dim={out_dim} must be in [1, min(N={n}, D={d})]")
    mean = x.mean(axis=0)
    _, _, vt = np.linalg.svd(x - mean, full_matrices=False)
    basis = vt[:out_dim].T.copy()
    pivot = np.argmax(np.abs(basis), axis=0)
    signs = np.sign(basis[pivot, np.arange(out_dim)])
    signs[signs == 0] = 1.0
    return PcaModel(mean=mean, basis=basis * signs)


def pca_apply(model: PcaModel, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != model.mean.shape[0]:
        raise DimensionError(f"expected {model.mean.shape[0]} columns, got {x.shape[-1]}")
    return (x - model.mean) @ model.basis
