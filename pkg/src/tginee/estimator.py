"""Estimating-equation fitting of the symmetric CP model.

The score

    s(gamma) = sum_{i <= j} (dP_ij / dgamma)^T Sigma_ij^{-1} (A_ij - P_ij)

is assembled block by block over node pairs, never forming the full
Jacobian. With ``Sigma`` held at its current value, ``-s(gamma)`` is the
gradient of the quadratic form ``1/2 sum r^T Sigma^{-1} r``.

Two training regimes are provided:

``full_batch``
    Every pair ``i <= j`` is enumerated each epoch. The objective is
    ``bce_weight * BCE + gee_lambda * GEE``, where both terms are pair
    averages and the GEE term is ``(2 / N)`` times the quadratic form.
    Setting ``bce_weight = 0`` gives plain descent along the score. ``W``
    is re-estimated from all pairs every ``cov_refresh_every`` epochs
    once warm-up ends.

``mini_batch``
    Positive triplets are visited in batches. Each batch is padded with
    ``neg_ratio`` uniformly sampled negatives per positive, and the step
    follows ``BCE + gee_lambda * GEE`` on the batch. During refresh
    epochs ``W`` tracks per-batch estimates through a momentum average.

In both regimes the working covariance is a constant when differentiating.
Gradients flow neither through ``W`` nor through the variances ``Gamma``,
matching the plug-in structure of the estimating equation.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import _rng
from .covariance import WorkingCovariance, estimate_w_pooled, pair_variance
from .errors import ConfigError, DivergedError, DomainError, FormatError, InsufficientDataError
from .link_fn import LinkFunction
from .model_jacobian import (
    block_probabilities,
    gradient_vector,
    scatter_pair_gradients,
    scatter_triplet_gradients,
)
from .sampling import TripletBatch, iterate_batches, sample_negatives
from .tensor_core import FactorPair, SparseMultiLayerGraph, iter_pair_blocks, theta_pairs

MODES = ("full_batch", "mini_batch")
OPTIMIZERS = ("adam", "sgd")


@dataclass(frozen=True)
class FitConfig:
    rank: int = 32
    link: LinkFunction = field(default_factory=LinkFunction)
    learning_rate: float = 0.01
    weight_decay: float = 1e-5
    epochs: int = 50
    batch_size: int = 10000
    gee_lambda: float = 0.1
    cov_refresh_every: int = 5
    momentum_mu: float = 0.9
    warmup_epochs: int = 5
    neg_ratio: int = 3
    mode: str = "full_batch"
    seed: int = 0
    init_scale: float = 0.1
    optimizer: str = "adam"
    bce_weight: float = 1.0
    estimate_w: bool = True
    include_diagonal: bool = True
    gee_full_fiber: bool = False
    ridge_eps: float | None = None
    normalize_correlation: bool = False
    shuffle: bool = True
    sampling_seed: int | None = None

    def __post_init__(self):
        checks = [
            (self.rank >= 1, "rank must be >= 1"),
            (self.learning_rate > 0, "learning_rate must be positive"),
            (self.weight_decay >= 0, "weight_decay must be nonnegative"),
            (self.epochs >= 1, "epochs must be >= 1"),
            (self.batch_size >= 1, "batch_size must be >= 1"),
            (self.gee_lambda >= 0, "gee_lambda must be nonnegative"),
            (self.bce_weight >= 0, "bce_weight must be nonnegative"),
            (self.cov_refresh_every >= 1, "cov_refresh_every must be >= 1"),
            (0 <= self.momentum_mu < 1, "momentum_mu must lie in [0, 1)"),
            (self.warmup_epochs >= 0, "warmup_epochs must be >= 0"),
            (self.neg_ratio >= 1, "neg_ratio must be >= 1"),
            (self.mode in MODES, f"mode must be one of {MODES}"),
            (self.optimizer in OPTIMIZERS, f"optimizer must be one of {OPTIMIZERS}"),
            (self.init_scale > 0, "init_scale must be positive"),
        ]
        for ok, message in checks:
            if not ok:
                raise ConfigError(message)

    def with_(self, **changes) -> "FitConfig":
        return replace(self, **changes)


@dataclass
class FitReport:
    factors: FactorPair
    w_final: np.ndarray
    loss_trace: np.ndarray  # (epochs, 3): bce, gee, total
    score_norm_trace: list
    diagnostics: object
    wall_time: float
    config: FitConfig
    link: LinkFunction


# -- pair pass ------------------------------------------------------------


@dataclass
class _PassResult:
    pairs: int
    bce: float
    quad: float
    grad: np.ndarray | None


def _full_pass(
    graph,
    factors,
    link,
    wc,
    include_diagonal=True,
    sigma_factors=None,
    c_bce=0.0,
    c_score=0.0,
):
    """One sweep over all pairs.

    Returns the summed layer BCE, the summed ``r^T Sigma^{-1} r`` and,
    when a coefficient is nonzero, the vector
    ``c_bce * grad(sum BCE) + c_score * s(gamma)``.
    """
    n = factors.dims.n
    want_grad = c_bce != 0.0 or c_score != 0.0
    ga = np.zeros_like(factors.alpha)
    gb = np.zeros_like(factors.beta)
    bce_total = 0.0
    quad_total = 0.0
    pairs = 0
    for I, J in iter_pair_blocks(n, include_diagonal):
        pairs += len(I)
        _, P, dP = block_probabilities(factors, link, I, J)
        A = graph.observed(I, J)
        if sigma_factors is None:
            gv = pair_variance(P)
        else:
            gv = pair_variance(link.inverse(theta_pairs(sigma_factors, I, J)))
        r = A - P
        root = np.sqrt(gv)
        u = wc.solve(r / root) / root
        quad_total += float(np.sum(r * u))
        bce_total += float(_bce(A, P).sum())
        if want_grad:
            coef = np.zeros_like(P)
            if c_bce:
                coef += c_bce * (P - A) / (P * (1.0 - P)) * dP
            if c_score:
                coef += c_score * u * dP
            scatter_pair_gradients(factors, I, J, coef, ga, gb)
    grad = gradient_vector(ga, gb) if want_grad else None
    return _PassResult(pairs, bce_total, quad_total, grad)


def _bce(a, p):
    return -(a * np.log(p) + (1.0 - a) * np.log1p(-p))


def score(graph, factors, link, wc, include_diagonal=True, sigma_factors=None) -> np.ndarray:
    """Estimating-equation score ``s(gamma)`` summed over all pairs ``i <= j``."""
    return _full_pass(graph, factors, link, wc, include_diagonal, sigma_factors, c_score=1.0).grad


def gradient_of_quadratic_loss(graph, factors, link, wc, include_diagonal=True, sigma_factors=None):
    """Gradient of :func:`quadratic_loss` with ``Sigma`` held fixed: exactly ``-score``."""
    return -score(graph, factors, link, wc, include_diagonal, sigma_factors)


def quadratic_loss(graph, factors, link, wc, include_diagonal=True, sigma_factors=None) -> float:
    """``1/2 sum_{i <= j} r_ij^T Sigma_ij^{-1} r_ij``.

    ``sigma_factors`` pins the variances ``Gamma_ij`` to another parameter
    value, which turns the loss into the fixed-metric quadratic whose
    gradient at ``sigma_factors`` is ``-score``.
    """
    return 0.5 * _full_pass(graph, factors, link, wc, include_diagonal, sigma_factors).quad


def standardized_residual_blocks(graph, factors, link, include_diagonal=True):
    """Yield standardized residual blocks over all pairs (for pooled ``W``)."""
    for I, J in iter_pair_blocks(factors.dims.n, include_diagonal):
        _, P, _ = block_probabilities(factors, link, I, J)
        A = graph.observed(I, J)
        yield (A - P) / np.sqrt(pair_variance(P))


def estimate_w_full(graph, factors, link, include_diagonal=True):
    count = factors.dims.N if include_diagonal else factors.dims.N - factors.dims.n
    return estimate_w_pooled(standardized_residual_blocks(graph, factors, link, include_diagonal), count)


# -- batch loss -----------------------------------------------------------


@dataclass
class _BatchResult:
    bce: float
    gee: float
    total: float
    grad: np.ndarray | None
    w_batch: np.ndarray


def _batch_pass(batch: TripletBatch, factors, link, wc, lam, graph=None, full_fiber=False, want_grad=True):
    M = factors.dims.M
    e = batch.entries
    I, J, L = e[:, 0], e[:, 1], e[:, 2]
    a = batch.values
    G = batch.num_groups
    if G == 0:
        raise InsufficientDataError("batch_gee_loss needs a nonempty batch")
    alpha, beta = factors.alpha, factors.beta
    theta_e = np.einsum("kr,kr,kr->k", alpha[I], alpha[J], beta[L])
    p_e = link.inverse(theta_e)
    dp_e = link.dinverse(theta_e)
    bce = float(_bce(a, p_e).sum()) / G

    gi, gj = batch.group_pairs[:, 0], batch.group_pairs[:, 1]
    if full_fiber:
        if graph is None:
            raise ValueError("gee_full_fiber needs the training graph for unsampled layers")
        theta_g = theta_pairs(factors, gi, gj)
        P = link.inverse(theta_g)
        dP = link.dinverse(theta_g)
        A = graph.observed(gi, gj)
        A[batch.group_index, L] = a
        mask = np.ones((G, M), dtype=bool)
    else:
        P = np.full((G, M), 0.5)
        dP = np.zeros((G, M))
        A = np.full((G, M), 0.5)
        mask = np.zeros((G, M), dtype=bool)
        P[batch.group_index, L] = p_e
        dP[batch.group_index, L] = dp_e
        A[batch.group_index, L] = a
        mask[batch.group_index, L] = True

    gv = pair_variance(P)
    rt = np.where(mask, (A - P) / np.sqrt(gv), 0.0)
    z = np.zeros_like(rt)
    if full_fiber:
        z = wc.solve(rt)
    else:
        codes = mask @ (1 << np.arange(M, dtype=np.int64))
        for code in np.unique(codes):
            rows = codes == code
            layers = np.flatnonzero(mask[np.argmax(rows)])
            z[rows] = rt[rows] @ wc.restricted_inverse(layers)
    gee = float(np.sum(rt * z)) / G
    total = bce + lam * gee
    w_batch = _available_case_w(rt, mask)

    grad = None
    if want_grad:
        ga = np.zeros_like(alpha)
        gb = np.zeros_like(beta)
        coef_e = (p_e - a) / (p_e * (1.0 - p_e)) * dp_e / G
        u = z / np.sqrt(gv)
        if full_fiber:
            scatter_triplet_gradients(factors, I, J, L, coef_e, ga, gb)
            if lam:
                scatter_pair_gradients(factors, gi, gj, (-2.0 * lam / G) * u * dP, ga, gb)
        else:
            if lam:
                coef_e = coef_e + (-2.0 * lam / G) * u[batch.group_index, L] * dp_e
            scatter_triplet_gradients(factors, I, J, L, coef_e, ga, gb)
        grad = gradient_vector(ga, gb)
    return _BatchResult(bce, gee, total, grad, w_batch)


def _available_case_w(rt, mask):
    """Batch ``W``: each entry averaged over the groups observing both layers.

    Dividing by the group count instead would shrink ``W`` toward zero
    whenever groups cover only some layers. Entries with no support fall
    back to the identity, and the result is projected onto the PSD cone.
    """
    support = mask.T.astype(float) @ mask.astype(float)
    S = rt.T @ rt
    W = np.where(support > 0, S / np.maximum(support, 1.0), np.eye(len(S)))
    W = 0.5 * (W + W.T)
    vals, vecs = np.linalg.eigh(W)
    if vals[0] < 0:
        W = (vecs * np.clip(vals, 0.0, None)) @ vecs.T
    return W


def batch_gee_loss(batch, factors, link, wc, lam, graph=None, full_fiber=False):
    """``(bce, gee, total)`` for a triplet batch.

    ``bce`` sums the layer cross-entropies of each pair group and averages
    over groups. ``gee`` averages ``r~^T (W + eps I)^{-1} r~`` over groups,
    restricting ``W`` to the layers sampled for each group unless
    ``full_fiber`` is set. ``total = bce + lam * gee``.
    """
    res = _batch_pass(batch, factors, link, wc, lam, graph, full_fiber, want_grad=False)
    return res.bce, res.gee, res.total


def batch_gee_gradient(batch, factors, link, wc, lam, graph=None, full_fiber=False):
    return _batch_pass(batch, factors, link, wc, lam, graph, full_fiber).grad


# -- optimizers -----------------------------------------------------------


class Adam:
    """Adam with decoupled weight decay, acting on a flat parameter vector."""

    def __init__(self, lr, weight_decay=0.0, betas=(0.9, 0.999), eps=1e-8):
        self.lr = lr
        self.weight_decay = weight_decay
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = None
        self.v = None

    def step(self, x, grad):
        if self.m is None:
            self.m = np.zeros_like(x)
            self.v = np.zeros_like(x)
        self.t += 1
        self.m = self.b1 * self.m + (1 - self.b1) * grad
        self.v = self.b2 * self.v + (1 - self.b2) * grad * grad
        m_hat = self.m / (1 - self.b1**self.t)
        v_hat = self.v / (1 - self.b2**self.t)
        x = x * (1 - self.lr * self.weight_decay)
        return x - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


class SGD:
    def __init__(self, lr, weight_decay=0.0):
        self.lr = lr
        self.weight_decay = weight_decay

    def step(self, x, grad):
        return x * (1 - self.lr * self.weight_decay) - self.lr * grad


def make_optimizer(config: FitConfig):
    if config.optimizer == "adam":
        return Adam(config.learning_rate, config.weight_decay)
    return SGD(config.learning_rate, config.weight_decay)


# -- fitting ----------------------------------------------------------------


def initialize(n, M, R, init_scale, rng) -> FactorPair:
    alpha = rng.normal(0.0, init_scale, size=(n, R))
    beta = rng.normal(0.0, init_scale, size=(M, R))
    return FactorPair(alpha, beta)


def _is_refresh_epoch(epoch, config):
    return epoch >= max(config.warmup_epochs, 1) and epoch % config.cov_refresh_every == 0


def fit(graph: SparseMultiLayerGraph, config: FitConfig, init: FactorPair | None = None, log=None) -> FitReport:
    """Fit the model to ``graph``; deterministic given ``config.seed``.

    ``init`` overrides the seeded Gaussian initialization. ``log``, if
    given, is called with ``(epoch, bce, gee, total)`` after each epoch.
    Raises :class:`DivergedError` as soon as the objective is non-finite.
    """
    from .evaluation import diagnostics

    if graph.num_edges() == 0:
        raise InsufficientDataError("cannot fit a graph with no edges")
    n, M, R = graph.n, graph.M, config.rank
    if init is None:
        factors = initialize(n, M, R, config.init_scale, _rng.stream(config.seed, "init"))
    else:
        if init.dims.n != n or init.dims.M != M or init.dims.R != R:
            raise ConfigError(f"init factors have dims {init.dims}, expected n={n}, M={M}, R={R}")
        factors = init
    wc = WorkingCovariance(
        M,
        ridge_eps=config.ridge_eps,
        momentum_mu=config.momentum_mu,
        warmup_epochs=config.warmup_epochs,
        normalize_correlation=config.normalize_correlation,
    )
    start = time.perf_counter()
    runner = _fit_full_batch if config.mode == "full_batch" else _fit_mini_batch
    progress = {"epoch": 0}

    def _log(epoch, *values):
        progress["epoch"] = epoch
        if log is not None:
            log(epoch, *values)

    try:
        factors, trace, norms = runner(graph, config, factors, wc, _log)
    except (DomainError, FloatingPointError) as exc:
        # overflowing parameters surface as non-finite theta inside the link
        raise DivergedError(progress["epoch"] + 1, f"non-finite model output at epoch {progress['epoch'] + 1}") from exc
    wall = time.perf_counter() - start
    return FitReport(
        factors=factors,
        w_final=wc.W.copy(),
        loss_trace=np.array(trace),
        score_norm_trace=norms,
        diagnostics=diagnostics(graph, R),
        wall_time=wall,
        config=config,
        link=config.link,
    )


def fit_best(graph: SparseMultiLayerGraph, config: FitConfig, restarts=5, log=None) -> FitReport:
    """Best of ``restarts`` fits with init seeds ``config.seed + k``.

    The symmetric factorization has spurious local optima, so a few random
    restarts are kept and the one with the lowest final objective wins.
    Runs that diverge are skipped; if all diverge the last error is raised.
    """
    if restarts < 1:
        raise ConfigError(f"restarts must be >= 1, got {restarts}")
    best, error = None, None
    for k in range(restarts):
        try:
            report = fit(graph, config.with_(seed=config.seed + k), log=log)
        except DivergedError as exc:
            error = exc
            continue
        if best is None or report.loss_trace[-1, 2] < best.loss_trace[-1, 2]:
            best = report
    if best is None:
        raise error
    return best


def _check_finite(epoch, *values):
    if not all(np.isfinite(v) for v in values):
        raise DivergedError(epoch)


def _fit_full_batch(graph, config, factors, wc, log):
    link = config.link
    n, M, R = factors.dims.n, factors.dims.M, factors.dims.R
    N = n * (n + 1) // 2 if config.include_diagonal else n * (n - 1) // 2
    lam = config.gee_lambda
    opt = make_optimizer(config)
    gamma = factors.to_vector()
    trace, norms = [], []
    for epoch in range(1, config.epochs + 1):
        res = _full_pass(
            graph,
            factors,
            link,
            wc,
            config.include_diagonal,
            c_bce=config.bce_weight / N,
            c_score=-2.0 * lam / N,
        )
        bce, gee = res.bce / N, res.quad / N
        total = config.bce_weight * bce + lam * gee
        _check_finite(epoch, bce, gee, total)
        if not np.all(np.isfinite(res.grad)):
            raise DivergedError(epoch, f"non-finite gradient at epoch {epoch}")
        trace.append((bce, gee, total))
        gamma = opt.step(gamma, res.grad)
        if not np.all(np.isfinite(gamma)):
            raise DivergedError(epoch, f"parameters became non-finite at epoch {epoch}")
        factors = FactorPair.from_vector(gamma, n, M, R)
        if _is_refresh_epoch(epoch, config):
            if config.estimate_w:
                wc.set_W(estimate_w_full(graph, factors, link, config.include_diagonal))
            norms.append(float(np.linalg.norm(score(graph, factors, link, wc, config.include_diagonal))))
        log(epoch, bce, gee, total)
    return factors, trace, norms


def _fit_mini_batch(graph, config, factors, wc, log):
    link = config.link
    n, M, R = factors.dims.n, factors.dims.M, factors.dims.R
    seed = config.seed if config.sampling_seed is None else config.sampling_seed
    rng = _rng.stream(seed, "sampling")
    opt = make_optimizer(config)
    gamma = factors.to_vector()
    positives = graph.triplets()
    values = graph.triplet_values(positives)
    trace = []
    for epoch in range(1, config.epochs + 1):
        refresh = config.estimate_w and _is_refresh_epoch(epoch, config)
        sums = np.zeros(3)
        batches = 0
        for pos in iterate_batches(positives, config.batch_size, rng, config.shuffle, values=values):
            negs = sample_negatives(graph, pos.entries[:, :3], config.neg_ratio, rng)
            batch = pos.extended(negs, label=0)
            res = _batch_pass(batch, factors, link, wc, config.gee_lambda, graph, config.gee_full_fiber)
            _check_finite(epoch, res.total)
            if not np.all(np.isfinite(res.grad)):
                raise DivergedError(epoch, f"non-finite gradient at epoch {epoch}")
            sums += (res.bce, res.gee, res.total)
            batches += 1
            gamma = opt.step(gamma, res.grad)
            if not np.all(np.isfinite(gamma)):
                raise DivergedError(epoch, f"parameters became non-finite at epoch {epoch}")
            factors = FactorPair.from_vector(gamma, n, M, R)
            if refresh:
                wc.momentum_update(res.w_batch)
        bce, gee, total = sums / max(batches, 1)
        trace.append((bce, gee, total))
        log(epoch, bce, gee, total)
    return factors, trace, []


# -- checkpoints ----------------------------------------------------------


def _fmt(x):
    return f"{x:.17g}"


def save_checkpoint(path, factors: FactorPair, link: LinkFunction, W=None):
    n, M, R = factors.dims.n, factors.dims.M, factors.dims.R
    W = np.eye(M) if W is None else np.asarray(W)
    lines = [f"#tginee-model n={n} M={M} R={R} link={link.kind} s={_fmt(link.s)}"]
    for block in (factors.alpha, factors.beta, W):
        lines.extend(" ".join(_fmt(x) for x in row) for row in block)
    Path(path).write_text("\n".join(lines) + "\n")


def load_checkpoint(path):
    """Return ``(factors, link, W)`` from a checkpoint file."""
    path = Path(path)
    try:
        lines = path.read_text().splitlines()
    except OSError as exc:
        raise FormatError(f"cannot read checkpoint: {exc.strerror}", path) from exc
    if not lines or not lines[0].startswith("#tginee-model"):
        raise FormatError("missing '#tginee-model' header", path, 1)
    fields = {}
    for token in lines[0].split()[1:]:
        key, _, value = token.partition("=")
        fields[key] = value
    try:
        n, M, R = int(fields["n"]), int(fields["M"]), int(fields["R"])
        link = LinkFunction(fields["link"], float(fields["s"]))
    except (KeyError, ValueError) as exc:
        raise FormatError(f"bad checkpoint header: {exc}", path, 1) from exc
    body = [ln for ln in lines[1:] if ln.strip()]
    expected = n + 2 * M
    if len(body) != expected:
        raise FormatError(f"expected {expected} data rows, found {len(body)}", path)
    rows = []
    for k, line in enumerate(body, start=2):
        try:
            rows.append([float(x) for x in line.split()])
        except ValueError as exc:
            raise FormatError("non-numeric value", path, k) from exc
    alpha = np.array(rows[:n])
    beta = np.array(rows[n : n + M])
    W = np.array(rows[n + M :])
    if alpha.shape != (n, R) or beta.shape != (M, R) or W.shape != (M, M):
        raise FormatError("row lengths do not match header dimensions", path)
    return FactorPair(alpha, beta), link, W
