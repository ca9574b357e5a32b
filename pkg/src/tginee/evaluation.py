"""Link-prediction splits and metrics, triangle and zero-shot tasks, diagnostics."""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from itertools import combinations

import numpy as np
from scipy.stats import rankdata

from . import _rng
from .errors import (
    ConfigError,
    InsufficientDataError,
    KruskalRefusedError,
    TaskUndefinedError,
    UndefinedMetricError,
)
from .link_fn import LinkFunction
from .sampling import sample_non_edges
from .tensor_core import FactorPair, SparseMultiLayerGraph, _check_layer, _check_node

KRUSKAL_MAX_R = 12
KRUSKAL_TOL = 1e-9


# -- splits -----------------------------------------------------------------


@dataclass(frozen=True)
class SplitSpec:
    train_frac: float = 0.8
    val_frac: float = 0.1
    test_frac: float = 0.1
    seed: int = 42

    def __post_init__(self):
        fracs = (self.train_frac, self.val_frac, self.test_frac)
        if any(f < 0 for f in fracs) or abs(sum(fracs) - 1.0) > 1e-9:
            raise ConfigError(f"split fractions must be nonnegative and sum to 1, got {fracs}")


@dataclass
class Split:
    """Positive triplets per split plus balanced non-edge negatives.

    Negatives are non-edges of the full graph, drawn per layer to match the
    positive layer counts, and disjoint across splits. On a layer too dense
    to balance every split, the training negatives are truncated first.
    """

    train: np.ndarray
    val: np.ndarray
    test: np.ndarray
    train_neg: np.ndarray
    val_neg: np.ndarray
    test_neg: np.ndarray

    def part(self, name):
        return getattr(self, name), getattr(self, f"{name}_neg")

    def train_graph(self, graph: SparseMultiLayerGraph) -> SparseMultiLayerGraph:
        if graph.is_weighted:
            weights = graph.triplet_values(self.train)
            return SparseMultiLayerGraph.from_triplets(graph.n, graph.M, self.train, weights)
        return SparseMultiLayerGraph.from_triplets(graph.n, graph.M, self.train)


def split_triplets(graph: SparseMultiLayerGraph, spec: SplitSpec = SplitSpec()) -> Split:
    """Shuffle observed triplets with the ``split`` stream and cut them by fraction."""
    rng = _rng.stream(spec.seed, "split")
    t = graph.triplets()
    E = len(t)
    order = rng.permutation(E)
    n_train = int(round(E * spec.train_frac))
    n_val = min(int(round(E * spec.val_frac)), E - n_train)
    cuts = [order[:n_train], order[n_train : n_train + n_val], order[n_train + n_val :]]
    parts = [t[np.sort(c)] for c in cuts]
    for name, frac, part in zip(("train", "val", "test"), (spec.train_frac, spec.val_frac, spec.test_frac), parts):
        if frac > 0 and len(part) == 0:
            raise InsufficientDataError(f"{name} split received no positives ({E} triplets, fraction {frac})")
    negs = _split_negatives(graph, parts, rng)
    return Split(*parts, *negs)


def _split_negatives(graph, parts, rng):
    n = graph.n
    out = [[] for _ in parts]
    for m in range(graph.M):
        counts = [int(np.sum(p[:, 2] == m)) for p in parts]
        edges = graph.layer_edges(m)
        off = edges[edges[:, 0] != edges[:, 1]]
        available = n * (n - 1) // 2 - len(off)
        held = sum(counts[1:])
        if held > available:
            raise InsufficientDataError(f"layer {m} has {available} non-edges, {held} held-out negatives requested")
        # dense layers cannot balance the training split; evaluation splits take priority
        counts[0] = min(counts[0], available - held)
        codes = sample_non_edges(n, off[:, 0] * n + off[:, 1], sum(counts), rng)
        codes = rng.permutation(codes)
        start = 0
        for k in (1, 2, 0):
            c = counts[k]
            chunk = codes[start : start + c]
            start += c
            out[k].append(np.column_stack([chunk // n, chunk % n, np.full(c, m)]))
    return [_sorted_triplets(np.vstack(o)) if o else np.zeros((0, 3), dtype=np.int64) for o in out]


def _sorted_triplets(t):
    t = t.astype(np.int64)
    return t[np.lexsort((t[:, 1], t[:, 0], t[:, 2]))]


# -- scoring and AUC ----------------------------------------------------------


def auc(scores, labels) -> float:
    """Mann-Whitney estimate of ``P(score_pos > score_neg)``, ties counted 1/2."""
    scores = np.asarray(scores, dtype=float).ravel()
    labels = np.asarray(labels).ravel()
    if scores.shape != labels.shape:
        raise ValueError("scores and labels must have equal length")
    pos = labels == 1
    n_pos = int(pos.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUC needs at least one positive and one negative")
    ranks = rankdata(scores, method="average")
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def predict_score(factors: FactorPair, link: LinkFunction, i, j, m) -> float:
    n, M = factors.dims.n, factors.dims.M
    _check_node(i, n)
    _check_node(j, n)
    _check_layer(m, M)
    theta = float(np.sum(factors.alpha[i] * factors.alpha[j] * factors.beta[m]))
    return float(link.inverse(theta))


def predict_scores(factors: FactorPair, link: LinkFunction, triplets) -> np.ndarray:
    t = np.asarray(triplets, dtype=np.int64).reshape(-1, 3)
    theta = np.einsum("kr,kr,kr->k", factors.alpha[t[:, 0]], factors.alpha[t[:, 1]], factors.beta[t[:, 2]])
    return link.inverse(theta)


def link_prediction_auc(factors, link, positives, negatives) -> float:
    scores = np.concatenate([predict_scores(factors, link, positives), predict_scores(factors, link, negatives)])
    labels = np.concatenate([np.ones(len(positives)), np.zeros(len(negatives))])
    return auc(scores, labels)


def fit_and_evaluate(graph, config, split_spec=SplitSpec(), part="test", split=None):
    """Split, fit on the training graph, score ``part``; returns ``(report, auc, split)``."""
    from .estimator import fit

    split = split_triplets(graph, split_spec) if split is None else split
    report = fit(split.train_graph(graph), config)
    pos, neg = split.part(part)
    return report, link_prediction_auc(report.factors, report.link, pos, neg), split


# -- triangle task ------------------------------------------------------------


def layer_triangles(graph: SparseMultiLayerGraph, m: int) -> np.ndarray:
    """All triangles ``i < j < k`` of layer ``m``, shape ``(T, 3)``."""
    nbrs = [set() for _ in range(graph.n)]
    for i, j in graph.layers[m]:
        if i != j:
            nbrs[i].add(j)
            nbrs[j].add(i)
    out = []
    for i in range(graph.n):
        higher = sorted(v for v in nbrs[i] if v > i)
        for a, j in enumerate(higher):
            for k in higher[a + 1 :]:
                if k in nbrs[j]:
                    out.append((i, j, k))
    return np.array(out, dtype=np.int64).reshape(-1, 3)


@dataclass
class TriangleResult:
    accuracy: float
    trials: int
    held_out: np.ndarray
    matched: np.ndarray


def triangle_prediction(graph, fit_fn, rng, max_triangles=200, strategy="mask") -> TriangleResult:
    """Held-out triangle edge versus a matched same-layer non-edge.

    Triangles are sampled uniformly over all layers (at most
    ``max_triangles``). One edge of each is removed. ``fit_fn(train_graph)``
    must return a scorer mapping a ``(k, 3)`` triplet array to scores.
    With ``strategy="mask"`` every held-out edge is removed and one model is
    fit. With ``"refit"`` each triangle gets its own fit. Ties count 1/2.
    """
    if strategy not in ("mask", "refit"):
        raise ConfigError(f"unknown triangle strategy {strategy!r}")
    per_layer = [layer_triangles(graph, m) for m in range(graph.M)]
    tri = np.vstack([np.column_stack([t, np.full(len(t), m)]) for m, t in enumerate(per_layer)])
    if len(tri) == 0:
        raise TaskUndefinedError("graph has no within-layer triangles")
    pick = rng.choice(len(tri), size=min(max_triangles, len(tri)), replace=False)
    pick.sort()
    chosen = tri[pick]
    edge_choice = rng.integers(0, 3, size=len(chosen))
    ends = np.array([[0, 1], [0, 2], [1, 2]])
    held = np.column_stack(
        [
            chosen[np.arange(len(chosen)), ends[edge_choice, 0]],
            chosen[np.arange(len(chosen)), ends[edge_choice, 1]],
            chosen[:, 3],
        ]
    )
    matched = np.zeros_like(held)
    n = graph.n
    for m in range(graph.M):
        rows = np.flatnonzero(held[:, 2] == m)
        if len(rows) == 0:
            continue
        edges = graph.layer_edges(m)
        off = edges[edges[:, 0] != edges[:, 1]]
        codes = rng.permutation(sample_non_edges(n, off[:, 0] * n + off[:, 1], len(rows), rng))
        matched[rows] = np.column_stack([codes // n, codes % n, np.full(len(rows), m)])

    if strategy == "mask":
        train = graph.copy()
        for i, j, m in held.tolist():
            train.remove_edge(i, j, m)
        scorer = fit_fn(train)
        s_pos = np.asarray(scorer(held), dtype=float)
        s_neg = np.asarray(scorer(matched), dtype=float)
    else:
        s_pos = np.zeros(len(held))
        s_neg = np.zeros(len(held))
        for k, (i, j, m) in enumerate(held.tolist()):
            train = graph.copy()
            train.remove_edge(i, j, m)
            scorer = fit_fn(train)
            s_pos[k] = scorer(held[k : k + 1])[0]
            s_neg[k] = scorer(matched[k : k + 1])[0]
    wins = np.sum(s_pos > s_neg) + 0.5 * np.sum(s_pos == s_neg)
    return TriangleResult(float(wins / len(held)), len(held), held, matched)


def factor_scorer(factors, link):
    return lambda triplets: predict_scores(factors, link, triplets)


# -- zero-shot layers ---------------------------------------------------------

ZERO_SHOT_STRATEGIES = ("mean_beta", "nearest_beta", "provided_beta")


def surrogate_beta(factors: FactorPair, strategy, beta=None, similarity=None) -> np.ndarray:
    """Stand-in layer factor for a layer with no training edges.

    ``mean_beta`` averages the trained rows. ``nearest_beta`` takes the row
    of the trained layer with the largest ``similarity`` entry.
    ``provided_beta`` returns ``beta`` unchanged.
    """
    R = factors.dims.R
    if strategy == "mean_beta":
        return factors.beta.mean(axis=0)
    if strategy == "nearest_beta":
        if similarity is None:
            raise ConfigError("nearest_beta needs a similarity vector over the trained layers")
        similarity = np.asarray(similarity, dtype=float)
        if similarity.shape != (factors.dims.M,):
            raise ConfigError(f"similarity must have length {factors.dims.M}")
        return factors.beta[int(np.argmax(similarity))].copy()
    if strategy == "provided_beta":
        if beta is None:
            raise ConfigError("provided_beta needs a beta vector")
        beta = np.asarray(beta, dtype=float)
        if beta.shape != (R,):
            raise ConfigError(f"provided beta must have length R={R}")
        return beta
    raise ConfigError(f"unknown zero-shot strategy {strategy!r}; expected one of {ZERO_SHOT_STRATEGIES}")


def zero_shot_layer_score(factors, link, pairs, strategy, beta=None, similarity=None) -> np.ndarray:
    """Scores ``g^{-1}(<alpha_i * alpha_j, b>)`` for ``pairs`` under a surrogate ``b``."""
    b = surrogate_beta(factors, strategy, beta, similarity)
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    theta = (factors.alpha[pairs[:, 0]] * factors.alpha[pairs[:, 1]]) @ b
    return link.inverse(theta)


def layer_context_similarity(graph: SparseMultiLayerGraph, layers) -> np.ndarray:
    """Mean Jaccard of each listed layer to the other listed layers."""
    layers = list(layers)
    out = np.zeros(len(layers))
    if len(layers) < 2:
        return out
    for a, b in combinations(range(len(layers)), 2):
        jac = graph.jaccard(layers[a], layers[b])
        out[a] += jac
        out[b] += jac
    return out / (len(layers) - 1)


def drop_layer(graph: SparseMultiLayerGraph, layer: int) -> SparseMultiLayerGraph:
    """Copy of ``graph`` without ``layer``; later layers shift down by one."""
    _check_layer(layer, graph.M)
    if graph.M < 2:
        raise ConfigError("cannot hold out the only layer")
    g = SparseMultiLayerGraph(graph.n, graph.M - 1)
    for m in range(graph.M):
        if m == layer:
            continue
        k = m if m < layer else m - 1
        g.layers[k] = set(graph.layers[m])
        for (i, j, mm), w in graph.weights.items():
            if mm == m:
                g.weights[(i, j, k)] = w
    return g


# -- diagnostics --------------------------------------------------------------


@dataclass(frozen=True)
class Diagnostics:
    """Sample-size versus parameter-count summary.

    ``ratio_pairs`` is ``N / p`` (or ``N M / p`` when ``pairs_times_layers``),
    ``ratio_edges`` is ``e_obs / p``. Ratios are exact fractions rendered
    as floats.
    """

    n: int
    M: int
    R: int
    N: int
    p: int
    e_obs: int
    ratio_pairs: float
    ratio_pair_entries: float
    ratio_edges: float
    pairs_times_layers: bool
    suggested_R: int
    kruskal_ok: bool | None = None
    k_alpha: int | None = None
    k_beta: int | None = None

    def as_dict(self) -> dict:
        return {
            "n": self.n,
            "M": self.M,
            "R": self.R,
            "N": self.N,
            "p": self.p,
            "e_obs": self.e_obs,
            "ratio_pairs": self.ratio_pairs,
            "ratio_pair_entries": self.ratio_pair_entries,
            "ratio_edges": self.ratio_edges,
            "pairs_times_layers": self.pairs_times_layers,
            "suggested_R": self.suggested_R,
            "kruskal_ok": self.kruskal_ok,
            "k_alpha": self.k_alpha,
            "k_beta": self.k_beta,
        }


def diagnostics_from_counts(n, M, R, e_obs, C=8.0, pairs_times_layers=False, factors=None) -> Diagnostics:
    n, M, R, e_obs = int(n), int(M), int(R), int(e_obs)
    if R < 1:
        raise ConfigError(f"R must be >= 1, got {R}")
    if e_obs < 0:
        raise ConfigError("e_obs must be nonnegative")
    N = n * (n + 1) // 2
    p = (n + M) * R
    pairs = Fraction(N, p)
    entries = Fraction(N * M, p)
    k_alpha = k_beta = ok = None
    if factors is not None:
        k_alpha, k_beta, ok = kruskal_check(factors)
    return Diagnostics(
        n=n,
        M=M,
        R=R,
        N=N,
        p=p,
        e_obs=e_obs,
        ratio_pairs=float(entries if pairs_times_layers else pairs),
        ratio_pair_entries=float(entries),
        ratio_edges=float(Fraction(e_obs, p)),
        pairs_times_layers=pairs_times_layers,
        suggested_R=suggest_rank(n, M, C),
        kruskal_ok=ok,
        k_alpha=k_alpha,
        k_beta=k_beta,
    )


def diagnostics(graph: SparseMultiLayerGraph, R, factors=None, C=8.0, pairs_times_layers=False) -> Diagnostics:
    return diagnostics_from_counts(graph.n, graph.M, R, graph.num_edges(), C, pairs_times_layers, factors)


def suggest_rank(n, M, C=8.0) -> int:
    """``round(C ln min(n, M))`` with halves rounded up, floored at 1."""
    if C <= 0:
        raise ConfigError(f"C must be positive, got {C}")
    m = min(int(n), int(M))
    if m < 1:
        raise ConfigError("n and M must be positive")
    return max(1, int(math.floor(C * math.log(m) + 0.5)))


def kruskal_rank(A, tol=KRUSKAL_TOL) -> int:
    """Largest ``k`` such that every ``k`` columns of ``A`` are linearly independent."""
    A = np.asarray(A, dtype=float)
    rows, cols = A.shape
    k_best = 0
    for k in range(1, min(rows, cols) + 1):
        for subset in combinations(range(cols), k):
            s = np.linalg.svd(A[:, subset], compute_uv=False)
            if s[0] == 0.0 or s[-1] <= tol * s[0]:
                return k_best
        k_best = k
    return k_best


def kruskal_check(factors: FactorPair):
    """``(k_alpha, k_beta, 2 k_alpha + k_beta >= 2 R + 2)``; refuses ``R > 12``."""
    R = factors.dims.R
    if R > KRUSKAL_MAX_R:
        raise KruskalRefusedError(f"Kruskal check enumerates column subsets; R={R} exceeds the limit {KRUSKAL_MAX_R}")
    k_alpha = kruskal_rank(factors.alpha)
    k_beta = kruskal_rank(factors.beta)
    return k_alpha, k_beta, bool(2 * k_alpha + k_beta >= 2 * R + 2)
