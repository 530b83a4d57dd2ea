"""ROC/AUC scoring and cross-validation blocked by areal unit."""

from __future__ import annotations

import logging
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy.integrate import trapezoid

from .errors import ConfigError, DegenerateLabelsError
from .laplace import fit
from .model import assemble_model
from .predict import aggregate, intensity_from_moments
from .sim import make_rng

log = logging.getLogger(__name__)

LEVELS = ("pixel", "unit")


@dataclass(frozen=True, eq=False)
class RocResult:
    """ROC curve over descending unique thresholds, anchored at (0,0) and (1,1)."""

    thresholds: np.ndarray
    fpr: np.ndarray
    tpr: np.ndarray
    auc: float
    n_positive: int
    n_negative: int

    def trapezoid_area(self):
        return float(trapezoid(self.tpr, self.fpr))


def _labels(labels):
    y = np.asarray(labels)
    if y.dtype != bool:
        if not np.all((y == 0) | (y == 1)):
            raise ValueError("labels must be binary")
        y = y.astype(bool)
    return y


def roc_auc(scores, labels) -> RocResult:
    """ROC curve and AUC as the Mann-Whitney concordance, ties counted one half.

    The concordance is accumulated in integers, so the result is exact and
    depends on the scores only through their ordering.
    """
    s = np.asarray(scores, dtype=np.float64)
    y = _labels(labels)
    if s.shape != y.shape or s.ndim != 1:
        raise ValueError("scores and labels must be vectors of equal length")
    if np.any(np.isnan(s)):
        raise ValueError("scores contain NaN")
    n1 = int(y.sum())
    n0 = int(y.size - n1)
    if n1 == 0 or n0 == 0:
        raise DegenerateLabelsError("degenerate labels: both classes are required")

    values, inverse = np.unique(s, return_inverse=True)
    pos = np.bincount(inverse[y], minlength=values.size).astype(np.int64)
    neg = np.bincount(inverse[~y], minlength=values.size).astype(np.int64)
    neg_below = np.concatenate([[0], np.cumsum(neg)[:-1]])
    twice_u = int(np.sum(pos * (2 * neg_below + neg)))
    auc = twice_u / (2 * n1 * n0)

    # descending thresholds
    tp = np.concatenate([[0], np.cumsum(pos[::-1])])
    fp = np.concatenate([[0], np.cumsum(neg[::-1])])
    thresholds = np.concatenate([[np.inf], values[::-1]])
    return RocResult(thresholds, fp / n0, tp / n1, auc, n1, n0)


def pairwise_auc(scores, labels):
    """O(n^2) concordance; reference implementation for tests."""
    s = np.asarray(scores, dtype=np.float64)
    y = _labels(labels)
    a, b = s[y][:, None], s[~y][None, :]
    return float((np.sum(a > b) + 0.5 * np.sum(a == b)) / (a.size * b.size))


@dataclass(frozen=True, eq=False)
class CvPlan:
    """Assignment of areal units to folds."""

    units: np.ndarray
    fold: np.ndarray
    n_folds: int
    seed: int

    def held_out(self, k):
        return self.units[self.fold == k]

    def sizes(self):
        return np.bincount(self.fold, minlength=self.n_folds)


def make_cv_plan(units, seed, n_folds=4) -> CvPlan:
    """Seeded uniform permutation of the units, dealt round-robin into folds."""
    units = np.unique(np.asarray(units, dtype=np.int64))
    if units.size < n_folds:
        raise ConfigError(f"{units.size} units cannot be split into {n_folds} folds")
    perm = make_rng(seed).permutation(units.size)
    fold = np.empty(units.size, dtype=np.int64)
    fold[perm] = np.arange(units.size) % n_folds
    return CvPlan(units, fold, int(n_folds), int(seed))


@dataclass(frozen=True, eq=False)
class FoldPrediction:
    fold: int
    pixel_id: np.ndarray
    pixel_score: np.ndarray
    pixel_label: np.ndarray
    unit_id: np.ndarray
    unit_score: np.ndarray
    unit_label: np.ndarray

    def scores(self, level):
        return (self.pixel_score, self.pixel_label) if level == "pixel" else (self.unit_score, self.unit_label)


@dataclass(frozen=True, eq=False)
class CvResult:
    plan: CvPlan
    folds: list
    pooled: dict       # level -> RocResult or None
    per_fold: dict     # level -> list of RocResult or None

    def auc(self, level="unit"):
        r = self.pooled[level]
        return float("nan") if r is None else r.auc

    def fold_mean_auc(self, level="unit"):
        vals = [r.auc for r in self.per_fold[level] if r is not None]
        return float(np.mean(vals)) if vals else float("nan")


def unit_scores(lam, counts, unit_id):
    """Aggregate pixel scores and labels over the units present."""
    total, _ = aggregate(lam, unit_id)
    events = np.bincount(unit_id, weights=counts, minlength=total.size)
    present = np.unique(unit_id)
    return present, total[present], events[present] > 0


def _check_coverage(train, test, effects):
    for e in effects:
        if e.covariate is None or e.kind in ("intercept", "car_spatial", "rw1_cyclic"):
            continue
        tr, te = train.covariates[e.covariate], test.covariates[e.covariate]
        if e.kind == "categorical":
            missing = np.setdiff1d(np.unique(te), np.unique(tr))
            if missing.size:
                warnings.warn(f"levels {missing.astype(int).tolist()} of {e.covariate!r} absent from the "
                              "training fold; their coefficients are prior-dominated", stacklevel=3)
        elif e.kind == "rw1" and te.size and (te.min() < tr.min() or te.max() > tr.max()):
            warnings.warn(f"held-out values of {e.covariate!r} outside the training range are clamped "
                          "to the end bins", stacklevel=3)


def _run_fold(pixels, graph, effects, hyper, plan, k, estimator, n_units):
    test_mask = np.isin(pixels.unit_id, plan.held_out(k))
    train, test = pixels.subset(~test_mask), pixels.subset(test_mask)
    _check_coverage(train, test, effects)
    has_car = any(e.kind == "car_spatial" for e in effects)
    model = assemble_model(train, graph if has_car else None, effects, hyper, n_units=n_units)
    result = fit(model, hyper)
    mean, var, missing = result.predictor(model.design.incidence(test))
    assert missing == 0
    lam = intensity_from_moments(mean, var, model.cell_area, estimator)
    units, u_score, u_label = unit_scores(lam, test.count, test.unit_id)
    log.info("fold %d: %d training pixels, %d held-out pixels in %d units", k, train.n_pixels,
             test.n_pixels, units.size)
    return FoldPrediction(k, test.pixel_id, lam, test.count > 0, units, u_score, u_label)


def _safe_roc(scores, labels, what):
    try:
        return roc_auc(scores, labels)
    except DegenerateLabelsError:
        warnings.warn(f"{what}: single-class labels, ROC skipped", stacklevel=3)
        return None


def cross_validate(pixels, graph, effects, hyper, plan: CvPlan, estimator="lognormal", threads=1) -> CvResult:
    """Fit on retained units, score held-out pixels and units.

    The latent field keeps every unit of the adjacency graph; held-out units
    simply contribute no likelihood, so their spatial effect is predicted from
    the fitted neighbours through the CAR prior.
    """
    effects = tuple(effects)
    unknown = np.setdiff1d(np.unique(pixels.unit_id), plan.units)
    if unknown.size:
        raise ConfigError(f"units {unknown[:5].tolist()} are not covered by the cross-validation plan")
    n_units = graph.n_units if graph is not None else pixels.n_units
    folds = range(plan.n_folds)
    run = lambda k: _run_fold(pixels, graph, effects, hyper, plan, k, estimator, n_units)  # noqa: E731
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            preds = list(pool.map(run, folds))
    else:
        preds = [run(k) for k in folds]

    pooled, per_fold = {}, {}
    for level in LEVELS:
        s = np.concatenate([p.scores(level)[0] for p in preds])
        y = np.concatenate([p.scores(level)[1] for p in preds])
        pooled[level] = _safe_roc(s, y, f"pooled {level}")
        per_fold[level] = [_safe_roc(*p.scores(level), f"fold {p.fold} {level}") for p in preds]
    return CvResult(plan, preds, pooled, per_fold)
