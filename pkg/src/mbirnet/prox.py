"""Proximal maps under diagonal majorizer metrics."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .linops import DiagonalMajorizer, FeasibleSet, _flat, _frozen, _match_return


@dataclass(frozen=True)
class ThresholdVector:
    """Per-channel nonnegative shrinkage thresholds."""

    values: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "values", _frozen(np.ravel(self.values)))
        if np.any(self.values < 0):
            raise ValueError("thresholds must be nonnegative")


def soft_threshold(u, alpha):
    """Entrywise shrinkage: u - alpha*sgn(u) where |u| > alpha, else 0.

    Ties |u| == alpha map to 0.  `alpha` may be a scalar or broadcastable
    array of nonnegative thresholds.
    """
    alpha = np.asarray(alpha, dtype=np.float64)
    if np.any(alpha < 0):
        raise ValueError("threshold must be nonnegative")
    u = np.asarray(u, dtype=np.float64)
    return np.where(np.abs(u) > alpha, u - alpha * np.sign(u), 0.0)


def prox_indicator(v, m: DiagonalMajorizer, fset: FeasibleSet):
    """Metric projection argmin_{u in set} 1/2||u - v||^2_M.

    The implemented sets are separable boxes and M is diagonal, so the
    minimizer is the entrywise clamp of v, independent of M's values.
    """
    out = fset.project(_flat(v))
    return _match_return(v, out)


def prox_l1_metric(z, m: DiagonalMajorizer, beta: float):
    """Prox of beta*||.||_1 in the metric of m: entrywise shrink by beta / M_n."""
    if beta < 0:
        raise ValueError("beta must be nonnegative")
    zf = _flat(z)
    out = soft_threshold(zf, beta / m.scaled_diag)
    return _match_return(z, out)
