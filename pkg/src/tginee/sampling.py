"""Triplet batches and uniform negative sampling for mini-batch training."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateGraphError, InsufficientDataError

_ENUMERATE_LIMIT = 1 << 18


@dataclass(frozen=True)
class TripletBatch:
    """Labelled triplets plus a grouping of entries into pair fibers.

    Attributes
    ----------
    entries : ndarray of int64, shape (B, 4)
        Rows ``(i, j, m, label)`` with ``i <= j``.
    values : ndarray, shape (B,)
        Observed value per entry: the label, or the edge weight for weighted
        positives.
    group_index : ndarray of int64, shape (B,)
        Group of each entry.
    group_pairs : ndarray of int64, shape (G, 2)
        Node pair of each group.

    Notes
    -----
    A group collects the entries of one pair with distinct layers. When the
    same triplet occurs more than once in a batch (a resampled negative, or
    a negative colliding with a positive), each repeat opens a new group, so
    every group's residual vector has at most one slot per layer.
    """

    entries: np.ndarray
    values: np.ndarray
    group_index: np.ndarray
    group_pairs: np.ndarray

    @property
    def size(self) -> int:
        return len(self.entries)

    @property
    def num_groups(self) -> int:
        return len(self.group_pairs)

    @property
    def labels(self) -> np.ndarray:
        return self.entries[:, 3]

    @classmethod
    def build(cls, triplets, labels=None, values=None) -> "TripletBatch":
        t = np.asarray(triplets, dtype=np.int64).reshape(-1, 3)
        lo = np.minimum(t[:, 0], t[:, 1])
        hi = np.maximum(t[:, 0], t[:, 1])
        labels = np.ones(len(t), dtype=np.int64) if labels is None else np.asarray(labels, dtype=np.int64)
        if values is None:
            values = labels.astype(float)
        entries = np.column_stack([lo, hi, t[:, 2], labels]).astype(np.int64)
        group_index, group_pairs = _group(entries)
        return cls(entries, np.asarray(values, dtype=float), group_index, group_pairs)

    def extended(self, triplets, label=0) -> "TripletBatch":
        """New batch with ``triplets`` appended, all carrying ``label``."""
        t = np.asarray(triplets, dtype=np.int64).reshape(-1, 3)
        labels = np.concatenate([self.labels, np.full(len(t), label, dtype=np.int64)])
        values = np.concatenate([self.values, np.full(len(t), float(label))])
        return TripletBatch.build(np.vstack([self.entries[:, :3], t]), labels, values)


def _group(entries):
    if len(entries) == 0:
        return np.zeros(0, dtype=np.int64), np.zeros((0, 2), dtype=np.int64)
    i, j, m = entries[:, 0], entries[:, 1], entries[:, 2]
    pos = np.arange(len(entries))
    order = np.lexsort((pos, m, j, i))
    si, sj, sm = i[order], j[order], m[order]
    new_run = np.ones(len(order), dtype=bool)
    new_run[1:] = (si[1:] != si[:-1]) | (sj[1:] != sj[:-1]) | (sm[1:] != sm[:-1])
    starts = np.flatnonzero(new_run)
    occurrence = np.empty(len(order), dtype=np.int64)
    occurrence[order] = pos - starts[np.cumsum(new_run) - 1]
    keys = np.column_stack([i, j, occurrence])
    uniq, inverse = np.unique(keys, axis=0, return_inverse=True)
    return inverse.reshape(-1).astype(np.int64), uniq[:, :2].copy()


def sample_negatives(graph, positives, k, rng) -> np.ndarray:
    """``k`` corrupted triplets per positive, shape ``(k * len(positives), 3)``.

    For a positive ``(u, v, m)`` the anchor is one endpoint picked with
    equal probability. The partner is drawn uniformly over the other
    ``n - 1`` nodes, so self-pairs never occur. Layers are preserved, and
    draws that hit a true edge are kept as negatives. Output rows are
    canonical (``i <= j``), with the ``k`` draws for each positive adjacent.
    """
    if k < 1:
        raise ValueError(f"negative ratio must be >= 1, got {k}")
    pos = np.asarray(positives, dtype=np.int64).reshape(-1, 3)
    if len(pos) == 0:
        return np.zeros((0, 3), dtype=np.int64)
    n = graph.n
    if n < 2:
        raise DegenerateGraphError("negative sampling needs at least two nodes")
    rep = np.repeat(pos, k, axis=0)
    side = rng.integers(0, 2, size=len(rep))
    u = np.where(side == 0, rep[:, 0], rep[:, 1])
    v = rng.integers(0, n - 1, size=len(rep))
    v = v + (v >= u)
    return np.column_stack([np.minimum(u, v), np.maximum(u, v), rep[:, 2]])


def iterate_batches(triplets, batch_size, rng=None, shuffle=True, labels=None, values=None):
    """Yield consecutive :class:`TripletBatch` chunks of a (shuffled) triplet list.

    ``labels`` defaults to all ones. ``rng`` is required only when
    ``shuffle`` is set. The final batch may be short.
    """
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    t = np.asarray(triplets, dtype=np.int64).reshape(-1, 3)
    labels = np.ones(len(t), dtype=np.int64) if labels is None else np.asarray(labels, dtype=np.int64)
    values = labels.astype(float) if values is None else np.asarray(values, dtype=float)
    order = np.arange(len(t))
    if shuffle:
        if rng is None:
            raise ValueError("shuffle=True needs an rng")
        order = rng.permutation(len(t))
    for start in range(0, len(t), batch_size):
        idx = order[start : start + batch_size]
        yield TripletBatch.build(t[idx], labels[idx], values[idx])


def sample_non_edges(n, existing_codes, k, rng):
    """``k`` distinct codes ``i * n + j`` (``i < j``) not in ``existing_codes``."""
    if k == 0:
        return np.zeros(0, dtype=np.int64)
    existing = np.unique(existing_codes)
    total = n * (n - 1) // 2
    if k > total - len(existing):
        raise InsufficientDataError(f"requested {k} non-edges, only {total - len(existing)} exist")
    if total <= 4 * (len(existing) + k) or total <= _ENUMERATE_LIMIT:
        I, J = np.triu_indices(n, k=1)
        codes = np.setdiff1d(I * n + J, existing, assume_unique=True)
        return np.sort(rng.choice(codes, size=k, replace=False))
    chosen = np.zeros(0, dtype=np.int64)
    while len(chosen) < k:
        a = rng.integers(0, n, size=2 * (k - len(chosen)) + 16)
        b = rng.integers(0, n, size=len(a))
        keep = a != b
        codes = np.minimum(a, b)[keep] * n + np.maximum(a, b)[keep]
        codes = codes[~np.isin(codes, existing)]
        chosen = np.union1d(chosen, codes)
    return np.sort(rng.choice(chosen, size=k, replace=False))
