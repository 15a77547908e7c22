"""Sparse N-way count tensors: storage, text I/O, mode indexing and splits.

Only observed (non-zero) entries are stored. Coordinates live in an
``(N, M)`` integer array and counts in a length-``N`` integer array; both are
read-only after construction.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError, TensorFormatError

__all__ = [
    "SparseCountTensor",
    "ModeIndex",
    "DataSplit",
    "load_tensor",
    "save_tensor",
    "format_tensor",
    "build_mode_index",
    "train_test_split",
    "subsample",
    "most_frequent_value",
    "check_same_shape",
]


def _frozen(a):
    a = np.array(a, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class SparseCountTensor:
    """Coordinate-format count tensor with positive integer counts."""

    mode_sizes: tuple
    coords: np.ndarray
    values: np.ndarray

    def __init__(self, mode_sizes, coords, values, validate=True):
        mode_sizes = tuple(int(s) for s in mode_sizes)
        coords = np.asarray(coords, dtype=np.int64)
        values = np.asarray(values, dtype=np.int64)
        if coords.size == 0:
            coords = coords.reshape(0, len(mode_sizes))
        object.__setattr__(self, "mode_sizes", mode_sizes)
        object.__setattr__(self, "coords", _frozen(coords))
        object.__setattr__(self, "values", _frozen(values))
        if validate:
            self._validate()

    def _validate(self):
        if len(self.mode_sizes) < 2:
            raise DataError("a tensor needs at least 2 modes")
        if any(s <= 0 for s in self.mode_sizes):
            raise DataError(f"mode sizes must be positive, got {self.mode_sizes}")
        if self.coords.ndim != 2 or self.coords.shape[1] != self.n_modes:
            raise DataError(f"coords must have shape (N, {self.n_modes})")
        if self.values.shape != (self.coords.shape[0],):
            raise DataError("values and coords disagree on the number of entries")
        if self.nnz == 0:
            return
        if np.any(self.values < 1):
            raise DataError("counts must be >= 1 (zeros are never stored)")
        for m, size in enumerate(self.mode_sizes):
            bad = (self.coords[:, m] < 0) | (self.coords[:, m] >= size)
            if bad.any():
                i = int(self.coords[np.argmax(bad), m])
                raise DataError(f"index {i} out of range for mode {m}")
        if np.unique(self.coords, axis=0).shape[0] != self.nnz:
            raise DataError("duplicate coordinates")

    @property
    def n_modes(self):
        return len(self.mode_sizes)

    @property
    def nnz(self):
        return int(self.values.shape[0])

    def take(self, positions):
        """Sub-tensor made of the entries at ``positions`` (order kept)."""
        positions = np.asarray(positions, dtype=np.int64)
        return SparseCountTensor(
            self.mode_sizes, self.coords[positions], self.values[positions], validate=False
        )

    def entry_dict(self):
        return {tuple(int(i) for i in c): int(v) for c, v in zip(self.coords, self.values)}

    def __repr__(self):
        return f"SparseCountTensor(mode_sizes={self.mode_sizes}, nnz={self.nnz})"


@dataclass(frozen=True)
class ModeIndex:
    """Entry positions grouped by entity, one CSR-style table per mode.

    ``positions[m][offsets[m][s]:offsets[m][s + 1]]`` are the (sorted) entry
    positions whose ``m``-th index equals ``s``.
    """

    offsets: tuple
    positions: tuple

    def entries_of(self, mode, entity):
        lo, hi = self.offsets[mode][entity], self.offsets[mode][entity + 1]
        return self.positions[mode][lo:hi]

    def counts(self, mode):
        return np.diff(self.offsets[mode])


@dataclass(frozen=True)
class DataSplit:
    train: SparseCountTensor
    test: SparseCountTensor
    seed: int


def build_mode_index(t):
    offsets, positions = [], []
    for m, size in enumerate(t.mode_sizes):
        ids = t.coords[:, m]
        # stable sort keeps positions ascending within an entity
        order = np.argsort(ids, kind="stable")
        counts = np.bincount(ids, minlength=size)
        off = np.zeros(size + 1, dtype=np.int64)
        np.cumsum(counts, out=off[1:])
        offsets.append(_frozen(off))
        positions.append(_frozen(order.astype(np.int64)))
    return ModeIndex(tuple(offsets), tuple(positions))


def _parse_int(token, line_no, what):
    try:
        return int(token)
    except ValueError:
        raise TensorFormatError(f"invalid {what} {token!r}", line_no) from None


def load_tensor(path):
    """Read the tab-separated tensor text format.

    The first line is ``#modes: n1 n2 ... nM``; every later non-empty,
    non-comment line is ``i1<TAB>...<TAB>iM<TAB>count`` with 0-based indices.
    """
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read tensor file {path}: {exc}") from exc
    return parse_tensor(text)


def parse_tensor(text):
    lines = text.split("\n")
    header = lines[0].strip() if lines else ""
    if not header.startswith("#modes:"):
        raise TensorFormatError("missing '#modes:' header", 1)
    size_tokens = header[len("#modes:"):].split()
    if not size_tokens:
        raise TensorFormatError("header lists no mode sizes", 1)
    sizes = [_parse_int(tok, 1, "mode size") for tok in size_tokens]
    if any(s <= 0 for s in sizes) or len(sizes) < 2:
        raise TensorFormatError("need at least 2 positive mode sizes", 1)
    n_modes = len(sizes)

    coords, values, seen = [], [], {}
    for line_no, raw in enumerate(lines[1:], start=2):
        line = raw.rstrip("\r")
        if not line.strip() or line.startswith("#"):
            continue
        fields = line.split("\t")
        if len(fields) != n_modes + 1:
            raise TensorFormatError(
                f"expected {n_modes + 1} tab-separated fields, got {len(fields)}", line_no
            )
        idx = tuple(_parse_int(f, line_no, "index") for f in fields[:-1])
        count = _parse_int(fields[-1], line_no, "count")
        for m, (i, size) in enumerate(zip(idx, sizes)):
            if not 0 <= i < size:
                raise TensorFormatError(f"index {i} out of range for mode {m}", line_no)
        if count < 1:
            raise TensorFormatError(f"non-positive count {count}", line_no)
        if idx in seen:
            raise TensorFormatError(
                f"duplicate coordinate {idx} (first seen on line {seen[idx]})", line_no
            )
        seen[idx] = line_no
        coords.append(idx)
        values.append(count)
    return SparseCountTensor(sizes, np.array(coords, dtype=np.int64).reshape(-1, n_modes), values,
                             validate=False)


def format_tensor(t):
    out = ["#modes: " + " ".join(str(s) for s in t.mode_sizes)]
    for c, v in zip(t.coords.tolist(), t.values.tolist()):
        out.append("\t".join(str(i) for i in c) + f"\t{v}")
    return "\n".join(out) + "\n"


def save_tensor(t, path):
    path = Path(path)
    try:
        path.write_text(format_tensor(t), encoding="utf-8", newline="\n")
    except OSError as exc:
        raise DataError(f"cannot write tensor file {path}: {exc}") from exc


def train_test_split(t, test_fraction, seed):
    """Uniformly random split of the observed entries."""
    if not 0.0 < test_fraction < 1.0:
        raise DataError(f"test_fraction must lie in (0, 1), got {test_fraction}")
    if t.nnz < 2:
        raise DataError("need at least 2 entries to split")
    rng = np.random.default_rng(seed)
    n_test = int(round(test_fraction * t.nnz))
    n_test = min(max(n_test, 1), t.nnz - 1)
    perm = rng.permutation(t.nnz)
    test_pos = np.sort(perm[:n_test])
    train_pos = np.sort(perm[n_test:])
    return DataSplit(t.take(train_pos), t.take(test_pos), int(seed))


def subsample(t, fraction, seed):
    """Keep ``round(fraction * nnz)`` uniformly chosen entries, in source order."""
    if not 0.0 < fraction <= 1.0:
        raise DataError(f"fraction must lie in (0, 1], got {fraction}")
    n_keep = int(round(fraction * t.nnz))
    rng = np.random.default_rng(seed)
    keep = np.sort(rng.choice(t.nnz, size=n_keep, replace=False))
    return t.take(keep)


def most_frequent_value(t):
    """Mode of the stored counts; ties go to the smallest value."""
    if t.nnz == 0:
        raise DataError("most_frequent_value of an empty tensor")
    vals, freq = np.unique(t.values, return_counts=True)
    # np.unique sorts ascending and argmax returns the first maximum
    return int(vals[np.argmax(freq)])


def check_same_shape(a, b):
    if tuple(a.mode_sizes) != tuple(b.mode_sizes):
        raise DataError(
            f"dimension mismatch: {tuple(a.mode_sizes)} vs {tuple(b.mode_sizes)}"
        )
