"""Intensity surfaces, count probabilities and areal aggregation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import gammaln, pdtrc, xlogy

from .errors import DataError, DivergenceError
from .likelihood import MAX_PREDICTOR

ESTIMATORS = ("lognormal", "plugin")


def _check_estimator(estimator):
    if estimator not in ESTIMATORS:
        raise ValueError(f"unknown estimator {estimator!r}; expected one of {ESTIMATORS}")


def intensity_from_moments(mean, var, cell_area, estimator="lognormal"):
    """Expected count per pixel from the Gaussian moments of its linear predictor.

    ``plugin`` gives C exp(mu); ``lognormal`` gives the posterior mean
    C exp(mu + var/2).
    """
    _check_estimator(estimator)
    mean = np.asarray(mean, dtype=np.float64)
    var = np.asarray(var, dtype=np.float64)
    expo = mean + 0.5 * var if estimator == "lognormal" else mean
    if expo.size and np.max(expo) > MAX_PREDICTOR:
        raise DivergenceError(
            f"diverging linear predictor: max X = {np.max(expo):.3g} exceeds {MAX_PREDICTOR}")
    return cell_area * np.exp(expo)


def pixel_intensity(posterior, estimator="lognormal"):
    """Per-pixel expected count for the pixels a posterior was fitted on."""
    return intensity_from_moments(posterior.predictor_mean, posterior.predictor_var,
                                  posterior.cell_area, estimator)


def count_probability(lam, k):
    """Poisson probability of exactly k events, evaluated in log space."""
    lam = np.asarray(lam, dtype=np.float64)
    k = np.asarray(k)
    if np.any(k < 0) or np.any(k != np.floor(k)):
        raise ValueError("k must be a non-negative integer")
    return np.exp(xlogy(k, lam) - lam - gammaln(k + 1.0))


def exceedance(lam, k):
    """pr{N > k} for N ~ Poisson(lam)."""
    return pdtrc(np.asarray(k, dtype=np.float64), np.asarray(lam, dtype=np.float64))


def event_probability(lam):
    """pr{N >= 1} = 1 - exp(-lam)."""
    return -np.expm1(-np.asarray(lam, dtype=np.float64))


def aggregate(lam, unit_id, n_units=None):
    """Sum pixel intensities within units; returns (unit lambda, unit probability)."""
    lam = np.asarray(lam, dtype=np.float64)
    unit = np.asarray(unit_id)
    if unit.shape != lam.shape:
        raise DataError("every pixel needs exactly one unit")
    if unit.size and (np.any(unit < 0) or np.any(unit != np.floor(unit))):
        bad = int(np.argmax((unit < 0) | (unit != np.floor(unit))))
        raise DataError(f"pixel at position {bad} is not mapped to a unit")
    unit = unit.astype(np.int64)
    size = int(unit.max()) + 1 if unit.size else 0
    if n_units is not None:
        if size > n_units:
            raise DataError(f"pixel mapped to unknown unit {size - 1}")
        size = n_units
    total = np.bincount(unit, weights=lam, minlength=size)
    return total, event_probability(total)


@dataclass(frozen=True, eq=False)
class PredictionSurface:
    pixel_id: np.ndarray
    unit_of_pixel: np.ndarray
    pixel_lambda: np.ndarray
    pixel_p: np.ndarray
    unit_lambda: np.ndarray
    unit_p: np.ndarray
    estimator: str

    def count_probabilities(self, k_max=3):
        """Pixel-by-k table of pr{N = k}, k = 0..k_max."""
        k = np.arange(k_max + 1)
        return count_probability(self.pixel_lambda[:, None], k[None, :])

    @property
    def unit_ids(self):
        return np.arange(self.unit_lambda.size)


def surface_from_moments(pixels, mean, var, cell_area, estimator="lognormal", n_units=None):
    lam = intensity_from_moments(mean, var, cell_area, estimator)
    unit_lam, unit_p = aggregate(lam, pixels.unit_id, n_units)
    return PredictionSurface(pixels.pixel_id, pixels.unit_id, lam, event_probability(lam),
                             unit_lam, unit_p, estimator)


def predict_surface(posterior, pixels, estimator="lognormal"):
    """Intensity surface for arbitrary pixels from a fitted (or loaded) posterior.

    ``posterior`` needs ``design``, ``cell_area`` and ``predictor(rows)``.
    """
    rows = posterior.design.incidence(pixels)
    mean, var, missing = posterior.predictor(rows)
    if missing:
        raise DataError(f"posterior covariance lacks {missing} entries needed for these pixels")
    n_units = posterior.design.n_units or None
    return surface_from_moments(pixels, mean, var, posterior.cell_area, estimator, n_units)
