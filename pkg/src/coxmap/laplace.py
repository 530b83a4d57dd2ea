"""Laplace approximation of the posterior of a latent Gaussian model.

For each value of the (at most one) estimated precision the latent field is
approximated by a Gaussian at its constrained mode; the precision itself is
integrated over a small grid in log scale.
"""

from __future__ import annotations

import logging
import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.integrate import trapezoid
from scipy.interpolate import CubicSpline
from scipy.special import logsumexp
from scipy.stats import norm

from . import _cholesky
from .errors import ConvergenceError, CoxmapError, DivergenceError
from .gmrf import CholeskyFactor, SparseSymmetric, analyze, constrain_mean, factorize, kriging_terms
from .model import EstimatedHyper, HyperSpec, ModelStructure

log = logging.getLogger(__name__)

MAX_NEWTON = 50
TOL_VALUE = 1e-8
TOL_GRAD = 1e-6
GOLDEN = (math.sqrt(5) - 1) / 2


class GridWarning(UserWarning):
    pass


class _Objective:
    """Joint log posterior of (eta | theta, data) up to a constant."""

    def __init__(self, model: ModelStructure, theta=None):
        self.model = model
        self.Q = model.prior_precision(theta).to_csc()
        self.B = model.incidence
        self.BT = self.B.T.tocsr()

    def value(self, eta):
        r = eta - self.model.prior_mean
        return self.model.likelihood.value(self.B @ eta) - 0.5 * float(r @ (self.Q @ r))

    def all(self, eta):
        r = eta - self.model.prior_mean
        qr = self.Q @ r
        ll, dx, w = self.model.likelihood.derivatives(self.B @ eta)
        value = ll - 0.5 * float(r @ qr)
        grad = self.BT @ dx - qr
        curv = self.Q + self.BT @ sp.diags(w) @ self.B
        return value, grad, sp.csc_matrix(curv)


def joint_log_posterior(model: ModelStructure, eta, theta=None):
    """Value, gradient and negative Hessian of log p(eta, data | theta).

    The value is sum_i [n_i X_i - C exp(X_i)] - (eta - mu)' Q (eta - mu) / 2,
    i.e. with log(n_i!) and Gaussian normalising constants dropped.
    """
    eta = np.asarray(eta, dtype=np.float64)
    if not np.all(np.isfinite(eta)):
        raise ValueError("eta must be finite")
    return _Objective(model, theta).all(eta)


@dataclass(frozen=True, eq=False)
class ModeResult:
    theta: float | None
    mode: np.ndarray
    curvature: SparseSymmetric
    factor: CholeskyFactor
    log_joint_at_mode: float
    n_newton_iters: int
    trace: list = field(default_factory=list, repr=False)


def _projector(constraint):
    a = constraint.matrix
    if a.shape[0] == 0:
        return lambda g: g
    pinv = np.linalg.solve(a @ a.T, a)
    return lambda g: g - a.T @ (pinv @ g)


def find_mode(model: ModelStructure, theta=None, init=None, max_iter=MAX_NEWTON) -> ModeResult:
    """Constrained Newton iteration with step halving."""
    obj = _Objective(model, theta)
    sym = analyze(model.pattern)
    jitter = sp.diags(model.jitter(theta))
    constraint = model.constraint
    project = _projector(constraint)

    eta = np.array(model.prior_mean if init is None else init, dtype=np.float64)
    f, g, H = obj.all(eta)
    factor = factorize(H + jitter, sym)
    if constraint.n_rows and np.max(np.abs(constraint.residual(eta))) > 1e-10:
        eta = constrain_mean(eta, factor, constraint)
        f, g, H = obj.all(eta)
        factor = factorize(H + jitter, sym)

    trace = [(0, f, float(np.max(np.abs(project(g)), initial=0.0)), 0.0)]
    it = 0
    converged = trace[0][2] < TOL_GRAD
    while not converged:
        if it >= max_iter:
            raise ConvergenceError(f"Newton iteration did not converge in {max_iter} steps", trace)
        it += 1
        target = constrain_mean(eta + factor.solve(g), factor, constraint)
        direction = target - eta
        step = 1.0
        f_new = -math.inf
        for _ in range(40):
            cand = eta + step * direction
            try:
                f_new = obj.value(cand)
            except DivergenceError:
                f_new = -math.inf
            if f_new >= f:
                break
            step *= 0.5
        if not f_new >= f:
            # no ascent along the Newton direction: at the optimum to rounding
            trace.append((it, f, trace[-1][2], 0.0))
            break
        f_old = f
        eta = cand
        f, g, H = obj.all(eta)
        factor = factorize(H + jitter, sym)
        gnorm = float(np.max(np.abs(project(g)), initial=0.0))
        trace.append((it, f, gnorm, step))
        converged = abs(f - f_old) < TOL_VALUE or gnorm < TOL_GRAD

    return ModeResult(theta, eta, SparseSymmetric.from_matrix(H + jitter), factor, f, it, trace)


def _laplace(model: ModelStructure, theta, prior: EstimatedHyper | None, init=None):
    mode = find_mode(model, theta, init)
    value = mode.log_joint_at_mode - 0.5 * mode.factor.log_determinant
    kterms = None
    if model.constraint.n_rows:
        kterms = kriging_terms(mode.factor, model.constraint)
        value -= 0.5 * np.linalg.slogdet(kterms[1])[1]
    if theta is not None:
        lt = math.log(theta)
        pb = model.estimated_block()
        if pb is not None:
            value += 0.5 * pb.rank * lt
        if prior is not None:
            value += float(prior.log_prior(lt))
    return float(value), mode, kterms


def log_hyper_posterior(model: ModelStructure, theta, prior: EstimatedHyper | None = None, init=None) -> float:
    """Laplace approximation of log p(log theta | data) up to a constant.

    The density is for log(theta), so grid weights on an equally spaced
    log-scale grid need no Jacobian.
    """
    return _laplace(model, theta, prior, init)[0]


@dataclass(frozen=True)
class GridPoint:
    theta: float | None
    log_posterior: float
    weight: float


@dataclass(frozen=True, eq=False)
class FitResult:
    """Posterior summaries: hyperparameter grid, latent marginals and the
    per-pixel linear predictor. ``cov_*`` hold the posterior covariance of the
    latent field on the sparsity pattern of the Cholesky factor."""

    model: ModelStructure
    grid: list
    latent_mean: np.ndarray
    cov_indptr: np.ndarray
    cov_indices: np.ndarray
    cov_data: np.ndarray
    predictor_mean: np.ndarray
    predictor_var: np.ndarray
    prediction_mean: np.ndarray | None = None
    prediction_var: np.ndarray | None = None
    hyper_summary: dict | None = None
    modes: list = field(default_factory=list, repr=False)

    @property
    def design(self):
        return self.model.design

    @property
    def cell_area(self):
        return self.model.cell_area

    @property
    def weights(self):
        return np.array([g.weight for g in self.grid])

    @property
    def latent_var(self):
        d = self.latent_mean.size
        out = np.empty(d)
        for j in range(d):
            lo, hi = self.cov_indptr[j], self.cov_indptr[j + 1]
            k = lo + np.searchsorted(self.cov_indices[lo:hi], j)
            out[j] = self.cov_data[k]
        return out

    @property
    def latent_sd(self):
        return np.sqrt(self.latent_var)

    @property
    def covariance(self) -> sp.csc_matrix:
        d = self.latent_mean.size
        return sp.csc_matrix((self.cov_data, self.cov_indices, self.cov_indptr), shape=(d, d))

    def marginal(self, name):
        """(mean, sd, q025, q975) arrays for one effect block."""
        b = self.model.block(name)
        m = self.latent_mean[b.slice]
        s = self.latent_sd[b.slice]
        z = norm.ppf(0.975)
        return m, s, m - z * s, m + z * s

    def predictor(self, rows):
        return predictor_moments(self.latent_mean, self.cov_indptr, self.cov_indices, self.cov_data, rows)


def predictor_moments(mean, indptr, indices, data, rows):
    """Mean and variance of rows @ eta; returns (mean, var, n_missing_pairs)."""
    rows = sp.csr_matrix(rows)
    mu = rows @ mean
    var = np.empty(rows.shape[0])
    missing = _cholesky.row_quadratic_forms(
        rows.indptr.astype(np.int64), rows.indices.astype(np.int64), rows.data.astype(np.float64),
        np.asarray(indptr, dtype=np.int64), np.asarray(indices, dtype=np.int64),
        np.asarray(data, dtype=np.float64), var)
    return mu, np.maximum(var, 0.0), int(missing)


def _gaussian_cov(model: ModelStructure, mode: ModeResult, kterms):
    """Constrained posterior covariance on the factor pattern."""
    cov = mode.factor.selected_inverse().copy()
    if kterms is not None:
        indptr, indices, _ = mode.factor.symbolic.full_pattern
        cols = np.repeat(np.arange(indptr.size - 1), np.diff(indptr))
        v, m = kterms
        vm = np.linalg.solve(m, v.T).T
        cov -= np.einsum("ij,ij->i", vm[indices], v[cols])
    return cov


def _golden_max(func, lo, hi, tol=1e-3):
    a, b = lo, hi
    c = b - GOLDEN * (b - a)
    d = a + GOLDEN * (b - a)
    fc, fd = func(c), func(d)
    while b - a > tol:
        if fc >= fd:
            b, d, fd = d, c, fc
            c = b - GOLDEN * (b - a)
            fc = func(c)
        else:
            a, c, fc = c, d, fd
            d = a + GOLDEN * (b - a)
            fd = func(d)
    return (c, fc) if fc >= fd else (d, fd)


def _theta_summary(log_thetas, log_posts):
    u = np.asarray(log_thetas)
    lp = np.asarray(log_posts)
    if u.size == 1:
        t = math.exp(u[0])
        return {"mean": t, "sd": 0.0, "q025": t, "q975": t, "mode": t}
    fine = np.linspace(u[0], u[-1], 4001)
    spline = CubicSpline(u, lp - lp.max())(fine) if u.size >= 4 else np.interp(fine, u, lp - lp.max())
    dens = np.exp(spline - spline.max())
    cdf = np.concatenate([[0.0], np.cumsum(0.5 * (dens[1:] + dens[:-1]) * np.diff(fine))])
    total = cdf[-1]
    dens, cdf = dens / total, cdf / total
    tau = np.exp(fine)
    mean = trapezoid(tau * dens, fine)
    second = trapezoid(tau * tau * dens, fine)
    return {
        "mean": float(mean),
        "sd": float(math.sqrt(max(second - mean * mean, 0.0))),
        "q025": float(math.exp(np.interp(0.025, cdf, fine))),
        "q975": float(math.exp(np.interp(0.975, cdf, fine))),
        "mode": float(math.exp(fine[np.argmax(dens)])),
    }


def fit(model: ModelStructure, hyper: HyperSpec | None = None, threads: int = 1) -> FitResult:
    """Integrate the Laplace approximation over the hyperparameter grid."""
    hyper = hyper or HyperSpec()
    target = hyper.target
    if (target is None) != (model.estimated is None) or (target and target.name != model.estimated):
        raise ValueError("hyper specification does not match the assembled model")

    if target is None:
        lp, mode, kterms = _laplace(model, None, None)
        log_thetas, results = [None], [(lp, mode, kterms)]
    else:
        state = {"init": None}

        def objective(u):
            try:
                val, mode, _ = _laplace(model, math.exp(u), target, state["init"])
            except CoxmapError as exc:
                log.debug("hyperparameter search: log theta %.4f failed: %s", u, exc)
                return -math.inf
            state["init"] = mode.mode
            return val

        lo, hi = target.search_bounds()
        u_star, f_star = _golden_max(objective, lo, hi)
        if not math.isfinite(f_star):
            raise ConvergenceError("mode finding failed across the whole hyperparameter range")
        h = 0.1
        center = _laplace(model, math.exp(u_star), target, state["init"])
        init = center[1].mode
        fp = log_hyper_posterior(model, math.exp(u_star + h), target, init)
        fm = log_hyper_posterior(model, math.exp(u_star - h), target, init)
        curv = (fp - 2 * center[0] + fm) / (h * h)
        sd = 1.0 / math.sqrt(-curv) if curv < 0 else 1.0
        half = (target.n_grid - 1) / 2
        log_thetas = [u_star + (k - half) * target.grid_step_sd * sd for k in range(target.n_grid)]

        def evaluate(u):
            try:
                return _laplace(model, math.exp(u), target, init)
            except CoxmapError as exc:
                log.warning("grid point log theta %.4f dropped: %s", u, exc)
                return None

        if threads > 1:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                results = list(pool.map(evaluate, log_thetas))
        else:
            results = [evaluate(u) for u in log_thetas]
        keep = [i for i, r in enumerate(results) if r is not None]
        if not keep:
            raise ConvergenceError("mode finding failed at every grid point")
        log_thetas = [log_thetas[i] for i in keep]
        results = [results[i] for i in keep]

    lps = np.array([r[0] for r in results])
    weights = np.exp(lps - logsumexp(lps))
    weights /= weights.sum()
    if len(weights) > 1 and max(weights[0], weights[-1]) > 0.2:
        warnings.warn("more than 20% of the posterior weight sits on a grid endpoint; grid too narrow",
                      GridWarning, stacklevel=2)

    def summarize(r):
        return r[1].mode, _gaussian_cov(model, r[1], r[2])

    if threads > 1 and len(results) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            summaries = list(pool.map(summarize, results))
    else:
        summaries = [summarize(r) for r in results]

    indptr, indices, _ = results[0][1].factor.symbolic.full_pattern
    cols = np.repeat(np.arange(indptr.size - 1), np.diff(indptr))
    mean = np.zeros(model.latent_dim)
    second = np.zeros(indices.size)
    for w, (m, cov) in zip(weights, summaries):
        mean += w * m
        second += w * (cov + m[indices] * m[cols])
    cov_mix = second - mean[indices] * mean[cols]
    if len(summaries) == 1:
        cov_mix = summaries[0][1]
        mean = summaries[0][0].copy()

    pm, pv, _ = predictor_moments(mean, indptr, indices, cov_mix, model.incidence)
    qm = qv = None
    if model.prediction_rows is not None:
        qm, qv, missing = predictor_moments(mean, indptr, indices, cov_mix, model.prediction_rows)
        assert missing == 0

    grid = [GridPoint(None if u is None else math.exp(u), float(lp), float(w))
            for u, lp, w in zip(log_thetas, lps, weights)]
    summary = _theta_summary(log_thetas, lps) if target is not None else None
    return FitResult(
        model=model, grid=grid, latent_mean=mean, cov_indptr=indptr, cov_indices=indices,
        cov_data=cov_mix, predictor_mean=pm, predictor_var=pv, prediction_mean=qm,
        prediction_var=qv, hyper_summary=summary, modes=[r[1] for r in results],
    )
