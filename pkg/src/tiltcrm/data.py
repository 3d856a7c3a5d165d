"""Observation container shared by the sampler, harness and CLI."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DataError


@dataclass
class Dataset:
    """Design rows and responses, with responses strictly inside the support."""

    X: np.ndarray
    y: np.ndarray
    support: tuple[float, float] = (0.0, 1.0)
    response_name: str = "y"
    covariate_names: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.X = np.atleast_2d(np.asarray(self.X, dtype=float))
        self.y = np.asarray(self.y, dtype=float)
        if self.X.shape[0] != self.y.shape[0]:
            raise DataError("design and response lengths differ")
        lo, hi = self.support
        bad = np.flatnonzero((self.y <= lo) | (self.y >= hi))
        if bad.size:
            raise DataError(
                f"responses outside the open support ({lo}, {hi}) "
                f"at rows {bad.tolist()}")
        if not self.covariate_names:
            self.covariate_names = [f"x{j}" for j in range(self.X.shape[1])]

    @property
    def n(self):
        return self.y.size

    @property
    def p(self):
        return self.X.shape[1]
