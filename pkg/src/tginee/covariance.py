"""Working covariance ``Sigma_ij = Gamma_ij^{1/2} W Gamma_ij^{1/2}``.

``Gamma_ij`` is the diagonal of Bernoulli variances ``p (1 - p)`` for the
pair's fiber and ``W`` is one ``M x M`` matrix shared by all pairs. ``W``
starts at the identity, is re-estimated from pooled standardized residuals,
and is inverted as ``W + eps I`` through a cached Cholesky factor.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from scipy import linalg

from .errors import CovarianceSingularError, InsufficientDataError

RIDGE_SCALE = 1e-4
RIDGE_FLOOR = 1e-8


def default_ridge(W) -> float:
    W = np.asarray(W)
    return max(RIDGE_SCALE * float(np.trace(W)) / W.shape[0], RIDGE_FLOOR)


class WorkingCovariance:
    """Shared layer correlation ``W`` with ridge, momentum state and cached factorization.

    Parameters
    ----------
    M : int
        Number of layers.
    ridge_eps : float or None
        Ridge added before inversion. ``None`` selects
        ``1e-4 * trace(W) / M`` (floored at ``1e-8``), recomputed whenever
        ``W`` changes.
    momentum_mu : float
        Weight on the previous ``W`` in :meth:`momentum_update`.
    warmup_epochs : int
        Epochs during which a fitter keeps ``W = I``.
    normalize_correlation : bool
        Rescale every new estimate to unit diagonal.
    """

    def __init__(self, M, ridge_eps=None, momentum_mu=0.9, warmup_epochs=5, normalize_correlation=False):
        if not 0.0 <= momentum_mu < 1.0:
            raise ValueError(f"momentum_mu must lie in [0, 1), got {momentum_mu}")
        if ridge_eps is not None and ridge_eps < 0:
            raise ValueError(f"ridge_eps must be nonnegative, got {ridge_eps}")
        self.M = int(M)
        self.ridge_eps_setting = ridge_eps
        self.momentum_mu = float(momentum_mu)
        self.warmup_epochs = int(warmup_epochs)
        self.normalize_correlation = normalize_correlation
        self.reset()

    def reset(self):
        self._set(np.eye(self.M))
        return self

    @property
    def W(self) -> np.ndarray:
        return self._W

    @property
    def ridge_eps(self) -> float:
        if self.ridge_eps_setting is not None:
            return float(self.ridge_eps_setting)
        return default_ridge(self._W)

    def set_W(self, W):
        W = np.array(W, dtype=float)
        if W.shape != (self.M, self.M):
            raise ValueError(f"W must be {self.M}x{self.M}, got {W.shape}")
        if not np.allclose(W, W.T, atol=1e-12, rtol=0):
            raise ValueError("W must be symmetric")
        if self.normalize_correlation:
            W = to_correlation(W)
        self._set(0.5 * (W + W.T))
        return self

    def _set(self, W):
        self._W = W
        self._chol = None
        self._restricted = {}

    def momentum_update(self, w_batch):
        """``W <- mu * W + (1 - mu) * w_batch``; the factorization cache is dropped."""
        w_batch = np.asarray(w_batch, dtype=float)
        if w_batch.shape != (self.M, self.M):
            raise ValueError(f"w_batch must be {self.M}x{self.M}, got {w_batch.shape}")
        if self.normalize_correlation:
            w_batch = to_correlation(w_batch)
        mu = self.momentum_mu
        W = mu * self._W + (1.0 - mu) * w_batch
        self._set(0.5 * (W + W.T))
        return self

    def copy(self) -> "WorkingCovariance":
        other = WorkingCovariance(
            self.M, self.ridge_eps_setting, self.momentum_mu, self.warmup_epochs, self.normalize_correlation
        )
        other._set(self._W.copy())
        return other

    # -- inversion ------------------------------------------------------
    def _factor(self):
        if self._chol is None:
            A = self._W + self.ridge_eps * np.eye(self.M)
            try:
                self._chol = linalg.cho_factor(A, lower=True)
            except linalg.LinAlgError as exc:
                raise CovarianceSingularError(
                    f"W + {self.ridge_eps:g} I is not positive definite; increase ridge_eps"
                ) from exc
        return self._chol

    def solve(self, v):
        """``(W + eps I)^{-1} v`` for ``v`` of shape ``(M,)`` or ``(k, M)``."""
        v = np.asarray(v, dtype=float)
        chol = self._factor()
        if v.ndim == 1:
            return linalg.cho_solve(chol, v)
        return linalg.cho_solve(chol, v.T).T

    def inverse(self) -> np.ndarray:
        return self.solve(np.eye(self.M))

    def restricted_inverse(self, layers) -> np.ndarray:
        """``M x M`` matrix holding ``((W + eps I)[S, S])^{-1}`` on ``S = layers``, zero elsewhere."""
        key = tuple(int(m) for m in layers)
        cached = self._restricted.get(key)
        if cached is not None:
            return cached
        idx = np.array(key, dtype=np.int64)
        sub = self._W[np.ix_(idx, idx)] + self.ridge_eps * np.eye(len(idx))
        try:
            chol = linalg.cho_factor(sub, lower=True)
        except linalg.LinAlgError as exc:
            raise CovarianceSingularError(
                f"restriction of W + {self.ridge_eps:g} I to layers {key} is not positive definite"
            ) from exc
        out = np.zeros((self.M, self.M))
        out[np.ix_(idx, idx)] = linalg.cho_solve(chol, np.eye(len(idx)))
        self._restricted[key] = out
        return out


def pair_variance(p) -> np.ndarray:
    """Diagonal of ``Gamma_ij``: ``p (1 - p)`` per layer."""
    p = np.asarray(p, dtype=float)
    return p * (1.0 - p)


def pair_sigma_inverse_apply(wc: WorkingCovariance, gv, v) -> np.ndarray:
    """``Sigma^{-1} v = Gamma^{-1/2} (W + eps I)^{-1} Gamma^{-1/2} v``; rows of 2-d input are pairs."""
    gv = np.asarray(gv, dtype=float)
    if np.any(gv <= 0):
        raise ValueError("pair variances must be strictly positive")
    root = np.sqrt(gv)
    return wc.solve(np.asarray(v, dtype=float) / root) / root


def standardized_residual(gv, observed, predicted) -> np.ndarray:
    gv = np.asarray(gv, dtype=float)
    return (np.asarray(observed, dtype=float) - np.asarray(predicted, dtype=float)) / np.sqrt(gv)


def estimate_w_pooled(residuals, count=None) -> np.ndarray:
    """Pooled ``(1 / N) sum r r^T`` over standardized residual vectors.

    ``residuals`` is either a 2-d array with one residual per row or an
    iterable of such blocks, so an estimate can be streamed over all pairs
    without holding them at once. ``count`` defaults to the number of rows
    seen.
    """
    if isinstance(residuals, np.ndarray):
        residuals = [np.atleast_2d(residuals)]
    total = None
    rows = 0
    for block in residuals:
        block = np.atleast_2d(np.asarray(block, dtype=float))
        if block.size == 0:
            continue
        part = block.T @ block
        total = part if total is None else total + part
        rows += block.shape[0]
    if total is None:
        raise InsufficientDataError("cannot estimate W from an empty residual stream")
    N = rows if count is None else count
    if N < 1:
        raise InsufficientDataError(f"pair count must be >= 1, got {N}")
    W = total / N
    return 0.5 * (W + W.T)


def to_correlation(W) -> np.ndarray:
    d = np.sqrt(np.clip(np.diag(W), RIDGE_FLOOR, None))
    return W / np.outer(d, d)


def write_w_csv(W, path):
    W = np.asarray(W)
    rows = [",".join(f"{x:.6g}" for x in row) for row in W]
    Path(path).write_text("\n".join(rows) + "\n")


def read_w_csv(path) -> np.ndarray:
    return np.loadtxt(path, delimiter=",", ndmin=2)
