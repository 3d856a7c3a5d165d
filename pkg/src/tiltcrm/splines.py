"""Natural cubic spline design matrices with mean-zero columns.

The basis is the usual truncated-power representation of a natural cubic
spline: linear beyond the boundary knots, cubic in between.  Columns are
centered by their training means so the intercept stays a separate degree
of freedom; the centering offsets are stored for out-of-sample evaluation.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


def _raw_basis(x, knots):
    """Uncentered natural-spline basis: len(knots) - 1 columns."""
    x = np.asarray(x, dtype=float)
    k_last = knots[-1]

    def d(k):
        num = np.clip(x - k, 0.0, None) ** 3 - np.clip(x - k_last, 0.0, None) ** 3
        return num / (k_last - k)

    cols = [x]
    d_pen = d(knots[-2])
    for k in knots[:-2]:
        cols.append(d(k) - d_pen)
    return np.column_stack(cols)


@dataclass
class SplineBasis:
    """Fitted spline basis: knots plus training-column centering offsets."""

    boundary: tuple[float, float]
    interior: np.ndarray
    col_means: np.ndarray

    @property
    def knots(self):
        return np.concatenate([[self.boundary[0]], self.interior,
                               [self.boundary[1]]])

    @property
    def df(self):
        return self.col_means.size

    def design(self, x):
        """Evaluate the centered basis at new covariate values."""
        return _raw_basis(x, self.knots) - self.col_means


def spline_design(values, df=3):
    """Build the training design (n x df, mean-zero columns) and its basis.

    Boundary knots sit at the data extremes and the df-1 interior knots at
    equally spaced quantiles of the training covariate.
    """
    values = np.asarray(values, dtype=float)
    distinct = np.unique(values)
    if distinct.size < df + 2:
        raise ValueError(
            f"need at least {df + 2} distinct covariate values, got {distinct.size}")
    boundary = (float(distinct[0]), float(distinct[-1]))
    probs = np.arange(1, df) / df
    interior = np.quantile(values, probs)
    knots = np.concatenate([[boundary[0]], interior, [boundary[1]]])
    raw = _raw_basis(values, knots)
    col_means = raw.mean(axis=0)
    basis = SplineBasis(boundary=boundary, interior=interior, col_means=col_means)
    return raw - col_means, basis
