"""Per-pair mean vectors and analytic Jacobians with respect to ``gamma``.

A pair's Jacobian touches only rows ``i`` and ``j`` of ``alpha`` plus one
``R``-slot of ``beta`` per layer. :class:`PairJacobian` stores just that
footprint. :meth:`PairJacobian.t_apply` and the blocked scatter helpers form
``J^T v`` without building a dense ``M x (n + M) R`` matrix.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .link_fn import LinkFunction
from .tensor_core import FactorPair, canonical_pair, theta_fiber, theta_pairs


@dataclass(frozen=True)
class PairJacobian:
    """Structured ``M x (n + M) R`` Jacobian of one pair's fiber.

    ``alpha_block[:, :R]`` holds derivatives with respect to ``alpha[i]``
    and ``alpha_block[:, R:]`` those with respect to ``alpha[j]``. For a
    diagonal pair both derivatives land on the same row, so the second
    half is zero and the first carries the factor 2. Row ``m`` of
    ``beta_block`` holds derivatives with respect to ``beta[m]``. Every
    other entry of the dense matrix is zero.
    """

    n: int
    M: int
    R: int
    i: int
    j: int
    alpha_block: np.ndarray
    beta_block: np.ndarray

    def dense(self) -> np.ndarray:
        n, M, R = self.n, self.M, self.R
        out = np.zeros((M, (n + M) * R))
        cols_i = np.arange(R) * n + self.i
        cols_j = np.arange(R) * n + self.j
        out[:, cols_i] += self.alpha_block[:, :R]
        out[:, cols_j] += self.alpha_block[:, R:]
        for m in range(M):
            out[m, n * R + np.arange(R) * M + m] = self.beta_block[m]
        return out

    def t_apply(self, v) -> np.ndarray:
        """``J^T v`` as a flat parameter-length vector."""
        v = np.asarray(v, dtype=float)
        n, M, R = self.n, self.M, self.R
        out = np.zeros((n + M) * R)
        out[np.arange(R) * n + self.i] += v @ self.alpha_block[:, :R]
        out[np.arange(R) * n + self.j] += v @ self.alpha_block[:, R:]
        beta_part = v[:, None] * self.beta_block
        out[n * R :] += beta_part.ravel(order="F")
        return out

    def scale_rows(self, d) -> "PairJacobian":
        d = np.asarray(d, dtype=float)[:, None]
        return PairJacobian(self.n, self.M, self.R, self.i, self.j, d * self.alpha_block, d * self.beta_block)


def pair_probability(factors: FactorPair, link: LinkFunction, i: int, j: int) -> np.ndarray:
    return link.inverse(theta_fiber(factors, i, j))


def theta_pair_jacobian(factors: FactorPair, i: int, j: int) -> PairJacobian:
    n, M, R = factors.dims.n, factors.dims.M, factors.dims.R
    i, j = canonical_pair(i, j, n)
    a_i, a_j, beta = factors.alpha[i], factors.alpha[j], factors.beta
    if i == j:
        alpha_block = np.hstack([2.0 * beta * a_i, np.zeros((M, R))])
    else:
        alpha_block = np.hstack([beta * a_j, beta * a_i])
    beta_block = np.tile(a_i * a_j, (M, 1))
    return PairJacobian(n, M, R, i, j, alpha_block, beta_block)


def prob_pair_jacobian(factors: FactorPair, link: LinkFunction, i: int, j: int) -> PairJacobian:
    """Jacobian of ``P[i, j, :]``: theta rows scaled by ``1 / g'(P[i, j, m])``."""
    theta = theta_fiber(factors, i, j)
    return theta_pair_jacobian(factors, i, j).scale_rows(link.dinverse(theta))


# -- blocked versions used by the estimator ------------------------------


def block_probabilities(factors: FactorPair, link: LinkFunction, I, J):
    """``(theta, P, dP/dtheta)`` for a block of pairs, each of shape ``(len(I), M)``."""
    theta = theta_pairs(factors, I, J)
    return theta, link.inverse(theta), link.dinverse(theta)


def scatter_pair_gradients(factors: FactorPair, I, J, weights, grad_alpha, grad_beta):
    """Accumulate ``sum_k J_theta(I[k], J[k])^T weights[k]`` into the gradient buffers.

    ``weights`` has shape ``(len(I), M)`` and holds, per pair and layer, the
    coefficient multiplying ``dTheta[i, j, m] / dgamma``. Diagonal pairs
    receive both scatters on the same row, which supplies their factor 2.
    """
    alpha, beta = factors.alpha, factors.beta
    G = weights @ beta
    _scatter_rows(grad_alpha, I, G * alpha[J])
    _scatter_rows(grad_alpha, J, G * alpha[I])
    grad_beta += weights.T @ (alpha[I] * alpha[J])


def scatter_triplet_gradients(factors: FactorPair, I, J, L, weights, grad_alpha, grad_beta):
    """Accumulate ``sum_k weights[k] * dTheta[I[k], J[k], L[k]] / dgamma``."""
    alpha, beta = factors.alpha, factors.beta
    G = weights[:, None] * beta[L]
    _scatter_rows(grad_alpha, I, G * alpha[J])
    _scatter_rows(grad_alpha, J, G * alpha[I])
    _scatter_rows(grad_beta, L, weights[:, None] * (alpha[I] * alpha[J]))


def _scatter_rows(out, idx, values):
    # bincount per column is much faster than np.add.at for large blocks
    n = out.shape[0]
    for r in range(out.shape[1]):
        out[:, r] += np.bincount(idx, weights=values[:, r], minlength=n)


def gradient_vector(grad_alpha, grad_beta) -> np.ndarray:
    return np.concatenate([grad_alpha.ravel(order="F"), grad_beta.ravel(order="F")])
