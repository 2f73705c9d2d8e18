"""DNA barcode side information.

Barcodes are tokenized into five symbols in the fixed channel order
``A, G, C, T, OTHER`` (codes 0..4); ambiguity codes, gaps and missing bases
all map to ``OTHER``. Sequences are aligned against a majority consensus and
turned into class-level attribute vectors, either through the built-in
k-mer embedding or from externally computed embeddings.
"""

from __future__ import annotations

import csv
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from itertools import product
from pathlib import Path

import numpy as np

from .datastore import child_rng, load_matrix, save_matrix
from .errors import DegenerateSplit, EmptyClass, EmptyInput, FormatError, IoError, UnmatchedSample

CHANNELS = ("A", "G", "C", "T", "OTHER")
OTHER = 4
DEFAULT_LENGTH = 658
SOURCE_TAGS = ("dna_kmer", "dna_external", "wordvec", "visual_attr")

_CODE = np.full(256, OTHER, dtype=np.int8)
for _code, _base in enumerate("AGCT"):
    _CODE[ord(_base)] = _code
    _CODE[ord(_base.lower())] = _code

# k-mer vectors are indexed lexicographically over A < C < G < T
_KMER_DIGIT = np.array([0, 2, 1, 3, -1], dtype=np.int64)  # token code -> ACGT digit


@dataclass(frozen=True)
class BarcodeRecord:
    sample_id: str
    class_id: int
    class_name: str
    sequence: str


@dataclass
class SideInfoTable:
    """One attribute vector per class; ``class_ids[r]`` owns ``vectors[r]``."""

    class_ids: list
    vectors: np.ndarray
    source_tag: str = "dna_external"
    class_names: list | None = None

    def __post_init__(self):
        self.vectors = np.atleast_2d(np.asarray(self.vectors, dtype=np.float64))
        if len(self.class_ids) == 0:
            self.vectors = self.vectors.reshape(0, self.vectors.shape[-1] if self.vectors.size else 0)
        if len(self.class_ids) != self.vectors.shape[0]:
            raise FormatError(f"{len(self.class_ids)} class ids but {self.vectors.shape[0]} vectors")
        if not np.all(np.isfinite(self.vectors)):
            raise FormatError("side information contains non-finite values")
        if self.source_tag not in SOURCE_TAGS:
            raise FormatError(f"unknown source tag {self.source_tag!r}")

    def __len__(self):
        return len(self.class_ids)

    def subset(self, class_ids) -> "SideInfoTable":
        pos = {c: r for r, c in enumerate(self.class_ids)}
        missing = [c for c in class_ids if c not in pos]
        if missing:
            raise FormatError(f"no side information for classes {missing}")
        rows = [pos[c] for c in class_ids]
        names = [self.class_names[r] for r in rows] if self.class_names else None
        vecs = self.vectors[rows] if rows else np.zeros((0, self.vectors.shape[1]))
        return SideInfoTable(list(class_ids), vecs, self.source_tag, names)


def save_side_info(path, table: SideInfoTable, names=None):
    """Write the vectors (bmat or CSV by extension) plus a sidecar CSV of
    ``row_index,class_name`` next to it."""
    names = names or table.class_names or [str(c) for c in table.class_ids]
    save_matrix(path, table.vectors)
    with open(sidecar_path(path), "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["row_index", "class_name"])
        for r, name in enumerate(names):
            w.writerow([r, name])


def sidecar_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.stem + ".classes.csv")


def load_side_info(path, name_to_id, sidecar=None, source_tag="dna_external") -> SideInfoTable:
    """Load class vectors and map sidecar class names through ``name_to_id``.

    Rows whose class name is unknown to ``name_to_id`` are dropped.
    """
    vectors = load_matrix(path)
    sidecar = Path(sidecar) if sidecar else sidecar_path(path)
    try:
        fh = open(sidecar, encoding="utf-8", newline="")
    except OSError as exc:
        raise IoError(f"cannot read {sidecar}: {exc}") from exc
    with fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header[:2]] != ["row_index", "class_name"]:
            raise FormatError(f"{sidecar}: header must be row_index,class_name")
        entries = [(int(r[0]), r[1].strip()) for r in reader if r]
    ids, rows, names = [], [], []
    for row, name in entries:
        if not 0 <= row < vectors.shape[0]:
            raise FormatError(f"{sidecar}: row_index {row} out of range")
        if name in name_to_id:
            ids.append(name_to_id[name])
            rows.append(row)
            names.append(name)
    order = np.argsort(ids, kind="stable")
    return SideInfoTable(
        [ids[i] for i in order],
        vectors[[rows[i] for i in order]] if ids else np.zeros((0, vectors.shape[1])),
        source_tag,
        [names[i] for i in order],
    )


# --------------------------------------------------------------------------
# parsing and tokens


def read_fasta(path) -> list[tuple[str, str]]:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    entries, sid, chunks = [], None, []
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line:
            continue
        if line.startswith(">"):
            if sid is not None:
                entries.append((sid, "".join(chunks)))
            header = line[1:].split()
            if not header:
                raise FormatError(f"{path}:{lineno}: empty FASTA header")
            sid, chunks = header[0], []
        elif sid is None:
            raise FormatError(f"{path}:{lineno}: sequence data before first header")
        else:
            chunks.append(line)
    if sid is not None:
        entries.append((sid, "".join(chunks)))
    for sid, seq in entries:
        if not seq:
            raise FormatError(f"{path}: sample {sid} has an empty sequence")
    return entries


def parse_fasta(path, labels_path) -> list[BarcodeRecord]:
    """Join FASTA records with a ``sample_id,class_name`` label file.

    Class ids are dense integers in order of first appearance in the label
    file. Every FASTA id must have a label; labelled ids absent from the
    FASTA are ignored.
    """
    from .datastore import load_labels

    labels = load_labels(labels_path)
    by_sample = {sid: int(c) for sid, c in zip(labels.sample_ids, labels.labels)}
    entries = read_fasta(path)
    missing = [sid for sid, _ in entries if sid not in by_sample]
    if missing:
        raise UnmatchedSample(missing)
    return [
        BarcodeRecord(sid, by_sample[sid], labels.class_names[by_sample[sid]], seq.upper())
        for sid, seq in entries
    ]


def tokenize(sequence: str) -> np.ndarray:
    raw = np.frombuffer(sequence.encode("ascii", errors="replace"), dtype=np.uint8)
    return _CODE[raw].astype(np.int8)


def detokenize(tokens) -> str:
    return "".join("AGCTN"[int(t)] for t in tokens)


def fit_length(tokens, length: int) -> np.ndarray:
    out = np.full(length, OTHER, dtype=np.int8)
    n = min(length, len(tokens))
    out[:n] = tokens[:n]
    return out


def median_length(records) -> int:
    return int(round(float(np.median([len(r.sequence) for r in records]))))


def consensus(records, length: int = DEFAULT_LENGTH) -> np.ndarray:
    """Column-wise majority token over records padded/truncated to ``length``.

    ``OTHER`` only wins a column where no record has a base; ties go to the
    earlier base in A, G, C, T order.
    """
    if len(records) == 0:
        raise EmptyInput("consensus needs at least one sequence")
    counts = np.zeros((length, 5), dtype=np.int64)
    cols = np.arange(length)
    for rec in records:
        seq = rec.sequence if isinstance(rec, BarcodeRecord) else rec
        tokens = tokenize(seq) if isinstance(seq, str) else np.asarray(seq)
        np.add.at(counts, (cols, fit_length(tokens, length)), 1)
    base_counts = counts[:, :4]
    cons = np.argmax(base_counts, axis=1).astype(np.int8)
    cons[base_counts.sum(axis=1) == 0] = OTHER
    return cons


def align_to_consensus(seq, cons, match: int = 1, mismatch: int = -1, gap: int = -2) -> np.ndarray:
    """Global alignment of ``seq`` against ``cons``, projected onto the
    consensus columns.

    Linear gap penalties. Bases inserted relative to the consensus are
    dropped; consensus columns the sequence skips become ``OTHER``. Among
    equally scoring alignments the traceback prefers a gap in the sequence,
    then a (mis)match, then an insertion, which pushes unmatched columns to
    the end of the barcode.
    """
    s = tokenize(seq) if isinstance(seq, str) else np.asarray(seq, dtype=np.int8)
    c = tokenize(cons) if isinstance(cons, str) else np.asarray(cons, dtype=np.int8)
    n, m = len(s), len(c)
    if m == 0:
        return c.copy()
    if n == 0:
        return np.full(m, OTHER, dtype=np.int8)

    c_valid = c != OTHER
    cols = np.arange(m + 1, dtype=np.int64)
    score = np.empty((n + 1, m + 1), dtype=np.int64)
    score[0] = gap * cols
    for i in range(1, n + 1):
        sub = np.where((c == s[i - 1]) & c_valid, match, mismatch)
        prev = score[i - 1]
        best = np.empty(m + 1, dtype=np.int64)
        best[0] = gap * i
        best[1:] = np.maximum(prev[:-1] + sub, prev[1:] + gap)
        # horizontal gaps: score[i, j] = max_k<=j best[k] + gap * (j - k)
        score[i] = np.maximum.accumulate(best - gap * cols) + gap * cols

    out = np.full(m, OTHER, dtype=np.int8)
    i, j = n, m
    while i > 0 and j > 0:
        if score[i, j] == score[i, j - 1] + gap:
            j -= 1
        elif score[i, j] == score[i - 1, j - 1] + (match if (c[j - 1] == s[i - 1] and c_valid[j - 1]) else mismatch):
            out[j - 1] = s[i - 1]
            i -= 1
            j -= 1
        else:
            i -= 1
    return out


def align_all(records, cons, match=1, mismatch=-1, gap=-2, threads: int = 1) -> list:
    def one(rec):
        return align_to_consensus(rec.sequence, cons, match, mismatch, gap)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(one, records))
    return [one(r) for r in records]


def one_hot(tokens) -> np.ndarray:
    """``L x 5`` indicator matrix in channel order A, G, C, T, OTHER."""
    tokens = tokenize(tokens) if isinstance(tokens, str) else np.asarray(tokens, dtype=np.int64)
    out = np.zeros((len(tokens), 5), dtype=np.float64)
    out[np.arange(len(tokens)), tokens] = 1.0
    return out


def kmer_names(k: int) -> list[str]:
    return ["".join(p) for p in product("ACGT", repeat=k)]


def kmer_embedding(tokens, k: int = 4) -> np.ndarray:
    """L2-normalized counts of every k-mer over A, C, G, T.

    Windows touching an ``OTHER`` token are skipped. Entry order is
    lexicographic (``AA..A`` first, ``TT..T`` last). Returns the zero vector
    when no window is valid.
    """
    if not 1 <= k <= 6:
        raise ValueError(f"k must be in [1, 6], got {k}")
    tokens = tokenize(tokens) if isinstance(tokens, str) else np.asarray(tokens, dtype=np.int64)
    out = np.zeros(4**k, dtype=np.float64)
    n_windows = len(tokens) - k + 1
    if n_windows <= 0:
        return out
    digits = _KMER_DIGIT[tokens]
    windows = np.lib.stride_tricks.sliding_window_view(digits, k)
    valid = np.all(windows >= 0, axis=1)
    if not valid.any():
        return out
    index = windows[valid] @ (4 ** np.arange(k - 1, -1, -1))
    np.add.at(out, index, 1.0)
    return out / np.linalg.norm(out)


def class_attributes(vectors, labels, source_tag: str = "dna_kmer", class_names=None) -> SideInfoTable:
    """Mean vector per class, rows ordered by ascending class id."""
    vectors = np.asarray(vectors, dtype=np.float64)
    labels = np.asarray(labels)
    if len(labels) != vectors.shape[0]:
        raise EmptyClass(f"{vectors.shape[0]} vectors but {len(labels)} labels")
    ids = sorted(set(labels.tolist()))
    if not ids:
        raise EmptyClass("no classes to summarize")
    rows = np.stack([vectors[labels == c].mean(axis=0) for c in ids])
    names = [class_names[c] for c in ids] if class_names else None
    return SideInfoTable(ids, rows, source_tag, names)


def nn_validate(vectors, labels, train_frac: float = 0.8, seed: int = 0) -> float:
    """Accuracy of a 1-nearest-neighbour classifier on a stratified split.

    Each class keeps ``round(train_frac * n)`` samples for reference (at
    least one, at most ``n - 1``); the rest are queries. Distance ties go to
    the lower reference index.
    """
    vectors = np.asarray(vectors, dtype=np.float64)
    labels = np.asarray(labels)
    rng = child_rng(seed, "nn_validate")
    train, test = [], []
    for c in np.unique(labels):
        members = np.flatnonzero(labels == c)
        if len(members) < 2:
            raise DegenerateSplit(f"class {c} has fewer than 2 samples")
        perm = rng.permutation(members)
        n_train = min(max(int(round(train_frac * len(members))), 1), len(members) - 1)
        train.extend(perm[:n_train])
        test.extend(perm[n_train:])
    train, test = np.sort(train), np.sort(test)
    ref, query = vectors[train], vectors[test]
    d2 = (
        np.sum(query**2, axis=1)[:, None]
        - 2.0 * query @ ref.T
        + np.sum(ref**2, axis=1)[None, :]
    )
    nearest = np.argmin(d2, axis=1)
    return float(np.mean(labels[train][nearest] == labels[test]))


def embed_records(
    records,
    k: int = 4,
    length: int | None = None,
    match: int = 1,
    mismatch: int = -1,
    gap: int = -2,
    threads: int = 1,
):
    """Consensus, alignment and k-mer embedding for a list of records.

    Returns ``(cons, aligned, embeddings)`` where ``aligned`` is an
    ``N x L`` token matrix and ``embeddings`` is ``N x 4**k``.
    """
    if not records:
        raise EmptyInput("no barcode records")
    length = length or median_length(records)
    cons = consensus(records, length)
    aligned = np.stack(align_all(records, cons, match, mismatch, gap, threads))
    emb = np.stack([kmer_embedding(t, k) for t in aligned])
    return cons, aligned, emb


def consensus_attributes(records, aligned, k: int = 4) -> SideInfoTable:
    """Alternative class attribute: embed each class's consensus of its
    aligned barcodes instead of averaging sample embeddings."""
    ids = sorted({r.class_id for r in records})
    names = {r.class_id: r.class_name for r in records}
    rows = []
    for c in ids:
        members = [aligned[n] for n, r in enumerate(records) if r.class_id == c]
        rows.append(kmer_embedding(consensus(members, aligned.shape[1]), k))
    return SideInfoTable(ids, np.stack(rows), "dna_kmer", [names[c] for c in ids])
