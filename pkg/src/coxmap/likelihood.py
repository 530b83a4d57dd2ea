"""Observation models in terms of the per-pixel linear predictor X."""

from dataclasses import dataclass

import numpy as np

from .errors import DivergenceError

MAX_PREDICTOR = 30.0


@dataclass(frozen=True, eq=False)
class PoissonLikelihood:
    """Counts n_i ~ Poisson(C exp(X_i)); log(n_i!) is dropped."""

    counts: np.ndarray
    cell_area: float

    def _mu(self, x):
        if x.size and np.max(x) > MAX_PREDICTOR:
            raise DivergenceError(
                f"diverging linear predictor: max X = {np.max(x):.3g} exceeds {MAX_PREDICTOR}"
            )
        return self.cell_area * np.exp(x)

    def value(self, x):
        return float(np.dot(self.counts, x) - np.sum(self._mu(x)))

    def derivatives(self, x):
        """(value, d/dX, -d2/dX2) evaluated per pixel."""
        mu = self._mu(x)
        return float(np.dot(self.counts, x) - np.sum(mu)), self.counts - mu, mu


@dataclass(frozen=True, eq=False)
class GaussianLikelihood:
    """y_i ~ N(X_i, 1/precision); normalising constant dropped."""

    y: np.ndarray
    precision: float

    def value(self, x):
        r = self.y - x
        return float(-0.5 * self.precision * np.dot(r, r))

    def derivatives(self, x):
        r = self.y - x
        return (float(-0.5 * self.precision * np.dot(r, r)), self.precision * r,
                np.full(x.shape, float(self.precision)))
