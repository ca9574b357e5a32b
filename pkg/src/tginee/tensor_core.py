"""Storage for multilayer adjacency data and symmetric CP factors.

All symmetry conventions live here: undirected pairs are stored as
``(lo, hi)`` with ``lo <= hi``, node and layer indices are 0-based, and the
parameter vector is ``vec(alpha)`` followed by ``vec(beta)``, both
column-major.

The mean tensor is never materialized as an ``n x n x M`` array. Callers
work with fibers ``Theta[i, j, :]``, one pair at a time or in blocks of
pairs (:func:`theta_pairs`, :func:`iter_pair_blocks`).
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import FormatError, IndexRangeError

PAIR_BLOCK = 1 << 16


@dataclass(frozen=True)
class Dims:
    n: int
    M: int
    R: int

    def __post_init__(self):
        for name in ("n", "M", "R"):
            value = getattr(self, name)
            if int(value) != value or value < 1:
                raise ValueError(f"{name} must be a positive integer, got {value!r}")

    @property
    def N(self) -> int:
        """Number of node pairs with ``i <= j``."""
        return self.n * (self.n + 1) // 2

    @property
    def p(self) -> int:
        """Parameter dimension ``(n + M) * R``."""
        return (self.n + self.M) * self.R


def canonical_pair(i: int, j: int, n: int | None = None) -> tuple[int, int]:
    if n is not None:
        _check_node(i, n)
        _check_node(j, n)
    return (i, j) if i <= j else (j, i)


def _check_node(i, n):
    if not 0 <= i < n:
        raise IndexRangeError(f"node index {i} outside [0, {n})")


def _check_layer(m, M):
    if not 0 <= m < M:
        raise IndexRangeError(f"layer index {m} outside [0, {M})")


class SparseMultiLayerGraph:
    """Undirected multilayer graph over a shared node set.

    Each layer is a hash set of canonical pairs, so membership queries are
    O(1) and insensitive to pair order. An optional weight per triplet
    supports weighted layers; unweighted edges have value 1.
    """

    def __init__(self, n: int, M: int):
        if n < 1 or M < 1:
            raise ValueError(f"graph needs n >= 1 and M >= 1, got n={n}, M={M}")
        self.n = int(n)
        self.M = int(M)
        self.layers: list[set[tuple[int, int]]] = [set() for _ in range(self.M)]
        self.weights: dict[tuple[int, int, int], float] = {}
        self._cache = None

    # -- construction -------------------------------------------------
    def add_edge(self, i: int, j: int, m: int, weight: float | None = None):
        _check_layer(m, self.M)
        pair = canonical_pair(int(i), int(j), self.n)
        self.layers[m].add(pair)
        if weight is not None and weight != 1.0:
            self.weights[pair + (m,)] = float(weight)
        self._cache = None

    def remove_edge(self, i: int, j: int, m: int):
        _check_layer(m, self.M)
        pair = canonical_pair(int(i), int(j), self.n)
        self.layers[m].discard(pair)
        self.weights.pop(pair + (m,), None)
        self._cache = None

    @classmethod
    def from_triplets(cls, n, M, triplets, weights=None):
        g = cls(n, M)
        triplets = np.asarray(triplets, dtype=np.int64).reshape(-1, 3)
        if weights is None:
            if len(triplets) and (triplets.min() < 0 or triplets[:, :2].max() >= n or triplets[:, 2].max() >= M):
                raise IndexRangeError(f"triplet index outside n={n}, M={M}")
            lo = np.minimum(triplets[:, 0], triplets[:, 1]).tolist()
            hi = np.maximum(triplets[:, 0], triplets[:, 1]).tolist()
            for a, b, m in zip(lo, hi, triplets[:, 2].tolist()):
                g.layers[m].add((a, b))
        else:
            for (i, j, m), w in zip(triplets, weights):
                g.add_edge(i, j, m, w)
        return g

    def copy(self) -> "SparseMultiLayerGraph":
        g = SparseMultiLayerGraph(self.n, self.M)
        g.layers = [set(layer) for layer in self.layers]
        g.weights = dict(self.weights)
        return g

    # -- queries --------------------------------------------------------
    def has_edge(self, i: int, j: int, m: int) -> bool:
        _check_layer(m, self.M)
        return canonical_pair(i, j, self.n) in self.layers[m]

    def value(self, i: int, j: int, m: int) -> float:
        pair = canonical_pair(i, j, self.n)
        if pair not in self.layers[m]:
            return 0.0
        return self.weights.get(pair + (m,), 1.0)

    @property
    def is_weighted(self) -> bool:
        return bool(self.weights)

    def num_edges(self, m: int | None = None) -> int:
        if m is None:
            return sum(len(layer) for layer in self.layers)
        return len(self.layers[m])

    def layer_edges(self, m: int) -> np.ndarray:
        """Sorted ``(E_m, 2)`` array of the canonical pairs in layer ``m``."""
        keys = self._layer_keys()[m]
        return np.stack([keys // self.n, keys % self.n], axis=1)

    def triplets(self) -> np.ndarray:
        """All edges as an ``(E, 3)`` array of ``(i, j, m)``, sorted by layer then pair."""
        parts = []
        for m in range(self.M):
            pairs = self.layer_edges(m)
            parts.append(np.column_stack([pairs, np.full(len(pairs), m, dtype=np.int64)]))
        if not parts:
            return np.empty((0, 3), dtype=np.int64)
        return np.concatenate(parts).astype(np.int64)

    def triplet_values(self, triplets) -> np.ndarray:
        t = np.asarray(triplets, dtype=np.int64).reshape(-1, 3)
        if not self.weights:
            return np.ones(len(t))
        return np.array([self.value(i, j, m) for i, j, m in t])

    def observed(self, I, J) -> np.ndarray:
        """Observed fibers ``A[I[k], J[k], :]`` for canonical pairs, shape ``(len(I), M)``."""
        I = np.asarray(I, dtype=np.int64)
        J = np.asarray(J, dtype=np.int64)
        lo = np.minimum(I, J)
        hi = np.maximum(I, J)
        keys = lo * self.n + hi
        out = np.zeros((len(keys), self.M))
        for m, layer_keys in enumerate(self._layer_keys()):
            if len(layer_keys) == 0:
                continue
            pos = np.searchsorted(layer_keys, keys)
            pos = np.minimum(pos, len(layer_keys) - 1)
            out[:, m] = layer_keys[pos] == keys
        if self.weights:
            for (i, j, m), w in self.weights.items():
                hit = (lo == i) & (hi == j)
                out[hit, m] = w
        return out

    def density(self, m: int | None = None, include_diagonal: bool = False) -> float:
        pairs = self.n * (self.n + 1) // 2 if include_diagonal else self.n * (self.n - 1) // 2
        if pairs == 0:
            return 0.0
        if m is None:
            return self.num_edges() / (pairs * self.M)
        return self.num_edges(m) / pairs

    def jaccard(self, a: int, b: int) -> float:
        la, lb = self.layers[a], self.layers[b]
        union = len(la | lb)
        return len(la & lb) / union if union else 0.0

    def _layer_keys(self):
        if self._cache is None:
            self._cache = [
                np.sort(np.fromiter((i * self.n + j for i, j in layer), dtype=np.int64, count=len(layer)))
                for layer in self.layers
            ]
        return self._cache

    def __eq__(self, other):
        if not isinstance(other, SparseMultiLayerGraph):
            return NotImplemented
        return (
            self.n == other.n
            and self.M == other.M
            and self.layers == other.layers
            and self.weights == other.weights
        )

    def __repr__(self):
        return f"SparseMultiLayerGraph(n={self.n}, M={self.M}, edges={self.num_edges()})"


@dataclass(frozen=True, eq=False)
class FactorPair:
    """Node factors ``alpha`` (n x R) and layer factors ``beta`` (M x R)."""

    alpha: np.ndarray
    beta: np.ndarray

    def __post_init__(self):
        alpha = np.array(self.alpha, dtype=float, ndmin=2)
        beta = np.array(self.beta, dtype=float, ndmin=2)
        if alpha.ndim != 2 or beta.ndim != 2 or alpha.shape[1] != beta.shape[1]:
            raise ValueError(
                f"alpha and beta must be 2-d with equal column counts, got {alpha.shape} and {beta.shape}"
            )
        if not (np.all(np.isfinite(alpha)) and np.all(np.isfinite(beta))):
            raise ValueError("factor entries must be finite")
        alpha.setflags(write=False)
        beta.setflags(write=False)
        object.__setattr__(self, "alpha", alpha)
        object.__setattr__(self, "beta", beta)

    @property
    def dims(self) -> Dims:
        return Dims(self.alpha.shape[0], self.beta.shape[0], self.alpha.shape[1])

    def to_vector(self) -> np.ndarray:
        return np.concatenate([self.alpha.ravel(order="F"), self.beta.ravel(order="F")])

    @classmethod
    def from_vector(cls, gamma, n: int, M: int, R: int) -> "FactorPair":
        gamma = np.asarray(gamma, dtype=float)
        if gamma.shape != ((n + M) * R,):
            raise ValueError(f"expected vector of length {(n + M) * R}, got shape {gamma.shape}")
        alpha = gamma[: n * R].reshape((n, R), order="F")
        beta = gamma[n * R :].reshape((M, R), order="F")
        return cls(alpha, beta)

    def __eq__(self, other):
        if not isinstance(other, FactorPair):
            return NotImplemented
        return np.array_equal(self.alpha, other.alpha) and np.array_equal(self.beta, other.beta)


def alpha_index(k: int, r: int, n: int) -> int:
    """Position of ``alpha[k, r]`` in the flattened parameter vector."""
    return r * n + k


def beta_index(m: int, r: int, n: int, M: int, R: int) -> int:
    """Position of ``beta[m, r]`` in the flattened parameter vector."""
    return n * R + r * M + m


def theta_entry(factors: FactorPair, i: int, j: int, m: int) -> float:
    n, M, _ = factors.dims.n, factors.dims.M, factors.dims.R
    i, j = canonical_pair(i, j, n)
    _check_layer(m, M)
    return float(np.sum(factors.alpha[i] * factors.alpha[j] * factors.beta[m]))


def theta_fiber(factors: FactorPair, i: int, j: int) -> np.ndarray:
    i, j = canonical_pair(i, j, factors.dims.n)
    return (factors.alpha[i] * factors.alpha[j]) @ factors.beta.T


def theta_pairs(factors: FactorPair, I, J) -> np.ndarray:
    """Fibers for a block of pairs, shape ``(len(I), M)``."""
    return (factors.alpha[I] * factors.alpha[J]) @ factors.beta.T


def iter_pair_blocks(n: int, include_diagonal: bool = True, block: int = PAIR_BLOCK):
    """Yield ``(I, J)`` index arrays covering every pair ``i <= j`` (or ``i < j``).

    Pairs come row by row in a fixed order, in blocks of roughly ``block``
    pairs, so only one block of fibers is ever held in memory.
    """
    k = 0 if include_diagonal else 1
    rows_I, rows_J, size = [], [], 0
    for i in range(n):
        j = np.arange(i + k, n, dtype=np.int64)
        if len(j) == 0:
            continue
        rows_I.append(np.full(len(j), i, dtype=np.int64))
        rows_J.append(j)
        size += len(j)
        if size >= block:
            yield np.concatenate(rows_I), np.concatenate(rows_J)
            rows_I, rows_J, size = [], [], 0
    if rows_I:
        yield np.concatenate(rows_I), np.concatenate(rows_J)


# -- edge-list text format ------------------------------------------------

_HEADER = re.compile(r"^#tginee\s+(.*)$")


def _parse_header_fields(text, path, line):
    fields = {}
    for token in text.split():
        if "=" not in token:
            raise FormatError(f"malformed header token {token!r}", path, line)
        key, value = token.split("=", 1)
        fields[key] = value
    return fields


def write_edgelist(graph: SparseMultiLayerGraph, path):
    """Write ``graph`` as a header line then one ``i<TAB>j<TAB>m`` line per edge.

    Weighted edges get a fourth column holding the weight.
    """
    lines = [f"#tginee n={graph.n} M={graph.M}"]
    for i, j, m in graph.triplets():
        w = graph.weights.get((int(i), int(j), int(m)))
        if w is None:
            lines.append(f"{i}\t{j}\t{m}")
        else:
            lines.append(f"{i}\t{j}\t{m}\t{w!r}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_edgelist(path) -> SparseMultiLayerGraph:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise FormatError(f"cannot read edge list: {exc.strerror}", path) from exc
    lines = text.splitlines()
    if not lines:
        raise FormatError("empty file, expected '#tginee n=<n> M=<M>' header", path, 1)
    match = _HEADER.match(lines[0].strip())
    if not match:
        raise FormatError("missing '#tginee n=<n> M=<M>' header", path, 1)
    fields = _parse_header_fields(match.group(1), path, 1)
    try:
        n, M = int(fields["n"]), int(fields["M"])
    except (KeyError, ValueError) as exc:
        raise FormatError("header must define integer n and M", path, 1) from exc
    graph = SparseMultiLayerGraph(n, M)
    for lineno, raw in enumerate(lines[1:], start=2):
        raw = raw.strip()
        if not raw or raw.startswith("#"):
            continue
        parts = raw.split("\t") if "\t" in raw else raw.split()
        if len(parts) not in (3, 4):
            raise FormatError(f"expected 3 or 4 fields, got {len(parts)}", path, lineno)
        try:
            i, j, m = (int(x) for x in parts[:3])
            w = float(parts[3]) if len(parts) == 4 else None
        except ValueError as exc:
            raise FormatError(f"non-numeric field in {raw!r}", path, lineno) from exc
        if not (0 <= i < n and 0 <= j < n and 0 <= m < M):
            raise FormatError(f"triplet ({i}, {j}, {m}) out of range for n={n}, M={M}", path, lineno)
        graph.add_edge(i, j, m, w)
    return graph
