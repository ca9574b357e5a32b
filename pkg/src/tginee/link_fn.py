"""Link functions mapping edge probabilities to the CP parameter scale.

Four kinds are supported: ``identity``, ``logit``, ``probit`` and
``sparse_logit`` (``g(x) = log(x / (s - x))``; ``s = 1`` recovers the
logit). Inverse outputs are clamped to ``[eps * s, s - eps * s]`` so that
variances ``p (1 - p)`` and derivatives ``g'(p)`` stay finite.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit, logit, ndtr, ndtri

from .errors import DomainError

KINDS = ("identity", "logit", "probit", "sparse_logit")

_SQRT_2PI = np.sqrt(2.0 * np.pi)


def _normal_pdf(x):
    return np.exp(-0.5 * np.square(x)) / _SQRT_2PI


@dataclass(frozen=True)
class LinkFunction:
    kind: str = "logit"
    s: float = 1.0
    clamp_eps: float = 1e-6

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown link kind {self.kind!r}; expected one of {KINDS}")
        if not 0.0 < self.s <= 1.0:
            raise ValueError(f"sparsity coefficient s must lie in (0, 1], got {self.s}")
        if self.kind != "sparse_logit" and self.s != 1.0:
            raise ValueError(f"s is only meaningful for sparse_logit, got s={self.s} for {self.kind}")
        if not 0.0 < self.clamp_eps < 0.5:
            raise ValueError(f"clamp_eps must lie in (0, 1/2), got {self.clamp_eps}")

    @property
    def upper(self) -> float:
        """Upper end of the probability range (``s`` for sparse_logit, else 1)."""
        return self.s

    @property
    def bounds(self) -> tuple[float, float]:
        return self.clamp_eps * self.s, self.s - self.clamp_eps * self.s

    def inverse(self, x):
        """``g^{-1}(x)``, clamped to :attr:`bounds`."""
        x = np.asarray(x, dtype=float)
        if not np.all(np.isfinite(x)):
            raise DomainError("inverse link requires finite input")
        if self.kind == "identity":
            p = x
        elif self.kind == "logit":
            p = expit(x)
        elif self.kind == "probit":
            p = ndtr(x)
        else:
            p = self.s * expit(x)
        lo, hi = self.bounds
        return np.clip(p, lo, hi)

    def dinverse(self, x):
        """Derivative of ``g^{-1}`` at ``x``, i.e. ``1 / g'(g^{-1}(x))`` off the clamps.

        Evaluated on the parameter scale so it stays accurate where ``p``
        is close to 0 or ``s``.
        """
        x = np.asarray(x, dtype=float)
        if self.kind == "identity":
            return np.ones_like(x)
        if self.kind == "probit":
            return _normal_pdf(x)
        sig = expit(x)
        return self.s * sig * (1.0 - sig)

    def _check_interior(self, p):
        p = np.asarray(p, dtype=float)
        lo, hi = self.bounds
        # tolerance admits values produced by inverse() exactly at the clamp
        slack = 1e-15 * self.s
        if not np.all((p >= lo - slack) & (p <= hi + slack)):
            raise DomainError(f"probability outside the clamped range [{lo:g}, {hi:g}] of the {self.kind} link")
        return p

    def forward(self, p):
        """``g(p)``."""
        p = self._check_interior(p)
        if self.kind == "identity":
            return p.copy()
        if self.kind == "logit":
            return logit(p)
        if self.kind == "probit":
            return ndtri(p)
        return np.log(p) - np.log(self.s - p)

    def derivative(self, p):
        """``g'(p)``."""
        p = self._check_interior(p)
        if self.kind == "identity":
            return np.ones_like(p)
        if self.kind == "logit":
            return 1.0 / (p * (1.0 - p))
        if self.kind == "probit":
            return 1.0 / _normal_pdf(ndtri(p))
        return self.s / (p * (self.s - p))


def inverse(link: LinkFunction, x):
    return link.inverse(x)


def forward(link: LinkFunction, p):
    return link.forward(p)


def derivative_of_g_at(link: LinkFunction, p):
    return link.derivative(p)
