"""Synthetic multilayer graphs with planted inter-layer correlation.

Homogeneous generator
    ``P[i, j, m] = rho * Pbase[i, j] + (1 - rho) * U[i, j, m]`` and
    ``A[i, j, m] = 1{V[i, j, m] < P[i, j, m]}`` with ``U, V ~ Unif[0, 1]``.

Heterogeneous generator
    Every unordered layer pair ``e = (a, b)`` owns a base table ``S_e``, and

        P_a = sum_{e containing a} w_e S_e + (1 - W_a) O_a,   W_a = sum_{e containing a} w_e

    with ``w_e = layer_rho[e]``. Layers ``a`` and ``b`` share ``S_e`` only
    with each other, so their similarity grows with ``w_e``. In block mode
    every ``S_e`` is ``(1 - jitter) * B + jitter * X_e``, where ``B`` is the
    community table common to all layers and ``X_e`` is pair-specific
    uniform noise. The private part ``O_a`` is a fresh base draw shuffled
    over node pairs, so every layer has the same marginal distribution of
    probabilities and layer densities do not depend on ``W_a``. With a
    uniform base ``O_a`` is plain uniform noise and ``M = 2`` reduces
    exactly to the homogeneous generator. This is one construction that
    yields a prescribed ordering of layer similarities; it is an
    interpretation.

Truth tables cover the ``n (n - 1) / 2`` off-diagonal pairs; no diagonal
edges are generated.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from itertools import combinations
from pathlib import Path

import numpy as np

from . import _rng
from .errors import ConfigError, FormatError
from .link_fn import LinkFunction
from .sampling import sample_non_edges
from .tensor_core import FactorPair, SparseMultiLayerGraph, theta_pairs

BASE_KINDS = ("uniform_random", "block")
_CHUNK = 1 << 18


@dataclass(frozen=True)
class SynthSpec:
    """Parameters of a synthetic multilayer graph.

    ``block_sizes`` defaults to four near-equal communities in block mode.
    ``base_jitter`` mixes pair-level uniform noise into the block table.
    ``layer_rho`` maps layer pairs ``(a, b)`` with ``a < b`` to mixing
    weights and switches :func:`generate_heterogeneous` on.
    """

    n: int
    M: int
    rho: float = 0.2
    base_kind: str = "uniform_random"
    block_sizes: tuple | None = None
    within_prob: float = 0.3
    between_prob: float = 0.05
    base_jitter: float = 0.0
    layer_rho: dict | None = field(default=None, hash=False)
    seed: int = 0

    def __post_init__(self):
        if self.n < 2 or self.M < 1:
            raise ConfigError(f"synthetic graph needs n >= 2 and M >= 1, got n={self.n}, M={self.M}")
        for name in ("rho", "within_prob", "between_prob", "base_jitter"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1], got {value}")
        if self.base_kind not in BASE_KINDS:
            raise ConfigError(f"base_kind must be one of {BASE_KINDS}, got {self.base_kind!r}")
        if self.block_sizes is not None:
            sizes = tuple(int(s) for s in self.block_sizes)
            if any(s < 1 for s in sizes) or sum(sizes) != self.n:
                raise ConfigError(f"block sizes {sizes} must be positive and sum to n={self.n}")
            object.__setattr__(self, "block_sizes", sizes)

    def memberships(self) -> np.ndarray:
        sizes = self.block_sizes
        if sizes is None:
            sizes = [len(c) for c in np.array_split(np.arange(self.n), min(4, self.n))]
        return np.repeat(np.arange(len(sizes)), sizes)


def upper_pairs(n):
    """Off-diagonal pairs ``i < j`` in row-major order."""
    I, J = np.triu_indices(n, k=1)
    return I.astype(np.int64), J.astype(np.int64)


def upper_pair_index(I, J, n):
    """Row of pair ``(min, max)`` in :func:`upper_pairs` order."""
    I = np.asarray(I, dtype=np.int64)
    J = np.asarray(J, dtype=np.int64)
    lo, hi = np.minimum(I, J), np.maximum(I, J)
    if np.any(lo == hi):
        raise ValueError("diagonal pairs have no truth row")
    return lo * n - lo * (lo + 1) // 2 + (hi - lo - 1)


@dataclass
class SynthTruth:
    """Edge probabilities for every off-diagonal pair, shape ``(n (n - 1) / 2, M)``."""

    n: int
    M: int
    P: np.ndarray

    def pairs(self):
        return upper_pairs(self.n)

    def lookup(self, I, J) -> np.ndarray:
        return self.P[upper_pair_index(I, J, self.n)]

    def dense(self) -> np.ndarray:
        """``n x n x M`` symmetric array with a zero diagonal (small n only)."""
        out = np.zeros((self.n, self.n, self.M))
        I, J = upper_pairs(self.n)
        out[I, J] = self.P
        out[J, I] = self.P
        return out

    def write(self, path):
        I, J = upper_pairs(self.n)
        lines = [f"#tginee-truth n={self.n} M={self.M}"]
        for i, j, row in zip(I, J, self.P):
            lines.append("\t".join([str(i), str(j)] + [f"{x:.17g}" for x in row]))
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def read(cls, path) -> "SynthTruth":
        path = Path(path)
        lines = [ln for ln in path.read_text().splitlines() if ln.strip()]
        if not lines or not lines[0].startswith("#tginee-truth"):
            raise FormatError("missing '#tginee-truth' header", path, 1)
        fields = dict(tok.split("=", 1) for tok in lines[0].split()[1:])
        n, M = int(fields["n"]), int(fields["M"])
        P = np.zeros((n * (n - 1) // 2, M))
        for lineno, line in enumerate(lines[1:], start=2):
            parts = line.split()
            if len(parts) != M + 2:
                raise FormatError(f"expected {M + 2} fields", path, lineno)
            P[upper_pair_index(int(parts[0]), int(parts[1]), n)] = [float(x) for x in parts[2:]]
        return cls(n, M, P)


def _block_table(spec, I, J):
    z = spec.memberships()
    return np.where(z[I] == z[J], spec.within_prob, spec.between_prob)


def _base_draw(spec, I, J, block, rng):
    """One base table over the pairs: block table with jitter, or pure uniform."""
    if spec.base_kind == "uniform_random":
        return rng.random(len(I))
    if spec.base_jitter == 0.0:
        return block.copy()
    return (1.0 - spec.base_jitter) * block + spec.base_jitter * rng.random(len(I))


def _realize(spec, P, rng):
    V = rng.random(P.shape)
    A = V < P
    I, J = upper_pairs(spec.n)
    g = SparseMultiLayerGraph(spec.n, spec.M)
    for m in range(spec.M):
        hit = np.flatnonzero(A[:, m])
        g.layers[m].update(zip(I[hit].tolist(), J[hit].tolist()))
    return g


def generate(spec: SynthSpec):
    """Homogeneous generator; returns ``(graph, truth)``.

    Random draws happen in a fixed order (base table, ``U``, ``V``) from the
    ``synth`` stream of ``spec.seed``.
    """
    rng = _rng.stream(spec.seed, "synth")
    I, J = upper_pairs(spec.n)
    block = _block_table(spec, I, J) if spec.base_kind == "block" else None
    base = _base_draw(spec, I, J, block, rng)
    U = rng.random((len(I), spec.M))
    P = spec.rho * base[:, None] + (1.0 - spec.rho) * U
    return _realize(spec, P, rng), SynthTruth(spec.n, spec.M, P)


def _layer_weights(spec):
    M = spec.M
    if spec.layer_rho is None:
        raise ConfigError("generate_heterogeneous needs layer_rho")
    weights = {}
    for key, value in spec.layer_rho.items():
        a, b = sorted(int(x) for x in key)
        if a == b or not (0 <= a < M and 0 <= b < M):
            raise ConfigError(f"layer_rho key {key} is not a pair of distinct layers in [0, {M})")
        if (a, b) in weights:
            raise ConfigError(f"layer_rho lists pair {(a, b)} twice")
        if not 0.0 <= value <= 1.0:
            raise ConfigError(f"layer_rho{(a, b)} must lie in [0, 1], got {value}")
        weights[(a, b)] = float(value)
    missing = [e for e in combinations(range(M), 2) if e not in weights]
    if missing:
        raise ConfigError(f"layer_rho is missing layer pairs {missing}")
    totals = np.zeros(M)
    for (a, b), w in weights.items():
        totals[a] += w
        totals[b] += w
    over = np.flatnonzero(totals > 1.0 + 1e-12)
    if len(over):
        raise ConfigError(
            f"layer_rho weights touching layer {int(over[0])} sum to {totals[over[0]]:.3g} > 1; "
            "each layer's shared weight must stay <= 1"
        )
    return weights, totals


def generate_heterogeneous(spec: SynthSpec):
    """Layer-pair-specific sharing; returns ``(graph, truth, planted_similarity)``.

    ``planted_similarity`` is the population correlation matrix of the
    layer probability tables implied by the construction.
    """
    weights, totals = _layer_weights(spec)
    rng = _rng.stream(spec.seed, "synth")
    I, J = upper_pairs(spec.n)
    block = _block_table(spec, I, J) if spec.base_kind == "block" else None
    P = np.zeros((len(I), spec.M))
    for (a, b) in combinations(range(spec.M), 2):
        S = _base_draw(spec, I, J, block, rng)
        w = weights[(a, b)]
        P[:, a] += w * S
        P[:, b] += w * S
    if spec.base_kind == "uniform_random":
        O = rng.random((len(I), spec.M))
    else:
        O = np.column_stack(
            [_base_draw(spec, I, J, block, rng)[rng.permutation(len(I))] for _ in range(spec.M)]
        )
    P += (1.0 - totals) * O
    graph = _realize(spec, P, rng)
    return graph, SynthTruth(spec.n, spec.M, P), planted_similarity(spec, weights, totals, block)


def planted_similarity(spec, weights, totals, block=None) -> np.ndarray:
    """Population correlation of the layer tables under the heterogeneous construction.

    Shuffled private parts are treated as independent of everything else.
    """
    if spec.base_kind == "uniform_random":
        var_common, var_draw = 0.0, 1.0 / 12.0
    else:
        j = spec.base_jitter
        var_common = (1.0 - j) ** 2 * float(np.var(block))
        var_draw = var_common + j * j / 12.0
    M = spec.M
    cov = np.zeros((M, M))
    for a in range(M):
        sq = sum(w * w for e, w in weights.items() if a in e)
        cov[a, a] = (totals[a] ** 2 - sq) * var_common + (sq + (1.0 - totals[a]) ** 2) * var_draw
    for (a, b), w in weights.items():
        cov[a, b] = cov[b, a] = totals[a] * totals[b] * var_common + w * w * (var_draw - var_common)
    d = np.sqrt(np.diag(cov))
    with np.errstate(invalid="ignore", divide="ignore"):
        sim = cov / np.outer(d, d)
    return np.nan_to_num(sim)


@dataclass
class PerturbResult:
    graph: SparseMultiLayerGraph
    deleted: np.ndarray  # per layer
    added: np.ndarray
    shortfall: np.ndarray


def perturb(graph: SparseMultiLayerGraph, noise_ratio: float, rng) -> PerturbResult:
    """Delete ``round(E * ratio / 2)`` edges per layer and add as many non-edges.

    Added edges are drawn uniformly from off-diagonal pairs that were
    non-edges of the input layer. If a layer has too few of them the
    addition count is clamped and the gap is recorded in ``shortfall``.
    """
    if not 0.0 <= noise_ratio <= 1.0:
        raise ConfigError(f"noise ratio must lie in [0, 1], got {noise_ratio}")
    n, M = graph.n, graph.M
    out = graph.copy()
    deleted = np.zeros(M, dtype=np.int64)
    added = np.zeros(M, dtype=np.int64)
    shortfall = np.zeros(M, dtype=np.int64)
    total_pairs = n * (n - 1) // 2
    for m in range(M):
        edges = graph.layer_edges(m)
        E = len(edges)
        d = int(round(E * noise_ratio / 2.0))
        if d == 0:
            continue
        gone = edges[rng.choice(E, size=d, replace=False)]
        for i, j in gone.tolist():
            out.remove_edge(i, j, m)
        deleted[m] = d
        off = edges[edges[:, 0] != edges[:, 1]]
        existing = off[:, 0] * n + off[:, 1]
        avail = total_pairs - len(existing)
        k = min(d, avail)
        shortfall[m] = d - k
        fresh = sample_non_edges(n, existing, k, rng)
        for code in fresh.tolist():
            out.add_edge(code // n, code % n, m)
        added[m] = k
    return PerturbResult(out, deleted, added, shortfall)


def plant_cp_model(n, M, R, link=None, seed=0, factors=None, beta_scale=1.5):
    """Draw CP factors and a graph sampled edge-wise from ``P = g^{-1}(Theta)``.

    ``alpha ~ N(0, 1)`` and ``beta ~ N(0, beta_scale^2 / R)``, so ``Theta``
    has standard deviation about ``beta_scale`` and logit probabilities
    spread over roughly ``[0.05, 0.95]``. Pass ``factors`` to sample from
    fixed parameters. Only off-diagonal pairs are sampled.

    Returns
    -------
    factors : FactorPair
    graph : SparseMultiLayerGraph
    """
    link = LinkFunction() if link is None else link
    rng = _rng.stream(seed, "synth")
    if factors is None:
        alpha = rng.normal(0.0, 1.0, size=(n, R))
        beta = rng.normal(0.0, beta_scale / np.sqrt(R), size=(M, R))
        factors = FactorPair(alpha, beta)
    elif factors.dims.n != n or factors.dims.M != M or factors.dims.R != R:
        raise ConfigError(f"factors have dims {factors.dims}, expected n={n}, M={M}, R={R}")
    I, J = upper_pairs(n)
    g = SparseMultiLayerGraph(n, M)
    for start in range(0, len(I), _CHUNK):
        bi, bj = I[start : start + _CHUNK], J[start : start + _CHUNK]
        P = link.inverse(theta_pairs(factors, bi, bj))
        A = rng.random(P.shape) < P
        for m in range(M):
            hit = np.flatnonzero(A[:, m])
            g.layers[m].update(zip(bi[hit].tolist(), bj[hit].tolist()))
    return factors, g


def true_probabilities(factors, link, I, J) -> np.ndarray:
    return link.inverse(theta_pairs(factors, I, J))
