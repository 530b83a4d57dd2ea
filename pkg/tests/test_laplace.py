import math
from dataclasses import replace

import numpy as np
import pytest
import scipy.sparse as sp
from scipy import integrate, optimize

from coxmap import model as M
from coxmap.errors import ConvergenceError, DivergenceError
from coxmap.gmrf import LinearConstraint
from coxmap.laplace import find_mode, fit, joint_log_posterior, log_hyper_posterior
from coxmap.likelihood import GaussianLikelihood, PoissonLikelihood
from coxmap.model import EffectSpec, HyperSpec, PixelTable, assemble_model, design_model

from conftest import small_effects


def intercept_model(counts, cell_area=1.0, prior_mean=-2.0, prior_precision=1.0):
    counts = np.asarray(counts, dtype=float)
    return design_model(np.ones((counts.size, 1)), [prior_mean], [[prior_precision]],
                        PoissonLikelihood(counts, cell_area), cell_area)


def mod2b_toy(seed):
    rng = np.random.default_rng(seed)
    n = 120
    pix = PixelTable(np.arange(n), rng.poisson(0.8, n), rng.integers(0, 6, n), {
        "Elev": rng.standard_normal(n), "Slo": rng.standard_normal(n),
        "Asp": rng.uniform(0, 360, n), "Lito": rng.integers(0, 3, n).astype(float)}, cell_area=1.0)
    roles = M.CovariateRoles.infer(pix.covariate_names, {"categorical": {"Lito": 3}})
    effects = [e if e.kind != "rw1" else replace(e, n_levels=6) for e in M.preset_effects("mod2b", roles)]
    return assemble_model(pix, None, effects), rng


def irls(X, y, offset, iters=100):
    beta = np.zeros(X.shape[1])
    beta[0] = math.log(y.mean()) - offset
    for _ in range(iters):
        mu = np.exp(offset + X @ beta)
        z = X @ beta + (y - mu) / mu
        W = mu
        new = np.linalg.solve(X.T @ (W[:, None] * X), X.T @ (W * z))
        if np.max(np.abs(new - beta)) < 1e-13:
            return new
        beta = new
    return beta


# ---------------------------------------------------------------------------
# joint log posterior

def test_joint_value_at_prior_mean():
    m = intercept_model([0.0])
    f, g, H = joint_log_posterior(m, [-2.0])
    assert abs(f + math.exp(-2)) < 1e-15
    assert abs(g[0] + math.exp(-2)) < 1e-15
    assert abs(H.toarray()[0, 0] - (math.exp(-2) + 1.0)) < 1e-15


def test_curvature_intercept_only():
    m = intercept_model([1, 0, 3], cell_area=225.0)
    beta = -5.0
    _, _, H = joint_log_posterior(m, [beta])
    assert abs(H.toarray()[0, 0] - (3 * 225 * math.exp(beta) + 1.0)) < 1e-12


@pytest.mark.parametrize("seed", range(3))
def test_gradient_finite_differences(seed):
    m, rng = mod2b_toy(seed)
    eta = m.prior_mean + 0.3 * rng.standard_normal(m.latent_dim)
    f, g, _ = joint_log_posterior(m, eta)
    h = 1e-5
    fd = np.empty_like(g)
    for j in range(g.size):
        e = np.zeros_like(g)
        e[j] = h
        fd[j] = (joint_log_posterior(m, eta + e)[0] - joint_log_posterior(m, eta - e)[0]) / (2 * h)
    assert np.max(np.abs(fd - g)) <= 1e-6 * max(1.0, np.max(np.abs(g)))


def test_curvature_matches_gradient_differences(rng):
    m, _ = mod2b_toy(7)
    eta = m.prior_mean + 0.2 * rng.standard_normal(m.latent_dim)
    _, _, H = joint_log_posterior(m, eta)
    v = rng.standard_normal(m.latent_dim)
    h = 1e-6
    gp = joint_log_posterior(m, eta + h * v)[1]
    gm = joint_log_posterior(m, eta - h * v)[1]
    np.testing.assert_allclose(-(gp - gm) / (2 * h), H @ v, rtol=1e-5, atol=1e-6)


def test_diverging_predictor():
    m = intercept_model([0.0])
    with pytest.raises(DivergenceError, match="diverging linear predictor"):
        joint_log_posterior(m, [31.0])


# ---------------------------------------------------------------------------
# mode finding

def test_scalar_mode():
    mode = find_mode(intercept_model([1.0])).mode[0]
    ref = optimize.brentq(lambda b: math.exp(b) + b + 1, -3, 0, xtol=1e-14)
    assert abs(mode - ref) < 1e-8
    assert abs(ref + 1.2785) < 1e-4


def test_empty_likelihood_gives_constrained_prior_mean():
    d = 4
    q = np.diag([1.0, 2.0, 3.0, 4.0]) + 0.1
    a = np.array([[0.0, 1.0, 1.0, 1.0]])
    c = LinearConstraint(a, [0.6])
    m = design_model(sp.csr_matrix((0, d)), [-2.0, 0.5, 0.0, 0.0], q, PoissonLikelihood(np.zeros(0), 1.0),
                     constraint=c)
    mode = find_mode(m).mode
    s = np.linalg.inv(q)
    mu = m.prior_mean
    ref = mu - s @ a.T @ np.linalg.solve(a @ s @ a.T, a @ mu - c.rhs)
    np.testing.assert_allclose(mode, ref, atol=1e-12)


def test_glm_limit_matches_irls(rng):
    n = 400
    X = np.column_stack([np.ones(n), rng.standard_normal(n), rng.standard_normal(n)])
    beta = np.array([-4.5, 0.4, -0.7])
    y = rng.poisson(225 * np.exp(X @ beta)).astype(float)
    m = design_model(X, np.zeros(3), np.eye(3) * 1e-6, PoissonLikelihood(y, 225.0), 225.0)
    mode = find_mode(m).mode
    ref = irls(X, y, math.log(225.0))
    assert np.max(np.abs(mode - ref)) < 1e-4


def test_mode_optimality_and_monotone_trace(small_dataset, rng):
    _, graph, pixels, _ = small_dataset
    m = assemble_model(pixels, graph, small_effects(), M.preset_hyper("mod3"))
    res = find_mode(m, 3.0)
    vals = [t[1] for t in res.trace]
    assert all(b >= a for a, b in zip(vals, vals[1:]))
    a = m.constraint.matrix
    np.testing.assert_allclose(a @ res.mode, 0, atol=1e-10)
    proj = np.eye(m.latent_dim) - a.T @ np.linalg.solve(a @ a.T, a)
    f0 = joint_log_posterior(m, res.mode, 3.0)[0]
    for _ in range(20):
        v = proj @ rng.standard_normal(m.latent_dim)
        v *= 1e-3 / np.linalg.norm(v)
        assert joint_log_posterior(m, res.mode + v, 3.0)[0] < f0
        assert joint_log_posterior(m, res.mode - v, 3.0)[0] < f0


def test_non_convergence_reports_trace(rng):
    n = 50
    X = np.column_stack([np.ones(n), rng.standard_normal(n)])
    y = rng.poisson(np.exp(2 + X[:, 1])).astype(float)
    m = design_model(X, [-8.0, 0.0], np.eye(2) * 1e-6, PoissonLikelihood(y, 1.0))
    with pytest.raises(ConvergenceError) as err:
        find_mode(m, max_iter=1)
    assert len(err.value.trace) >= 2


# ---------------------------------------------------------------------------
# hyperparameter posterior

def test_hyper_posterior_without_theta_block_is_prior():
    m = intercept_model([1.0, 2.0, 0.0])
    prior = M.EstimatedHyper("spatial")
    d1 = log_hyper_posterior(m, 2.0, prior) - log_hyper_posterior(m, 7.0, prior)
    d2 = float(prior.log_prior(math.log(2.0)) - prior.log_prior(math.log(7.0)))
    assert abs(d1 - d2) < 1e-10


def test_hyper_posterior_one_dimensional_quadrature(rng):
    counts = rng.poisson(2.0, 30).astype(float)
    pix = PixelTable(np.arange(30), counts, np.zeros(30, dtype=int), {}, cell_area=1.0)
    hyper = HyperSpec(estimated=(M.EstimatedHyper("intercept"),))
    m = assemble_model(pix, None, [EffectSpec("intercept", "intercept")], hyper)
    s = counts.sum()
    top = s * math.log(s / 30) - s    # likelihood maximum, keeps the integrand in range

    def exact(theta):
        f = lambda b: math.exp(s * b - 30 * math.exp(b) - 0.5 * theta * (b + 2) ** 2 - top)  # noqa: E731
        return math.log(integrate.quad(f, -12, 8, epsabs=0, epsrel=1e-12, limit=200)[0]) + 0.5 * math.log(theta)

    for t1, t2 in [(0.5, 4.0), (1.0, 20.0)]:
        lap = log_hyper_posterior(m, t1) - log_hyper_posterior(m, t2)
        ref = exact(t1) - exact(t2)
        assert abs(lap - ref) <= 0.02 * abs(ref)


def test_gaussian_likelihood_is_exact(rng):
    n, k = 40, 5
    cat = rng.integers(0, k, n).astype(float)
    pix = PixelTable(np.arange(n), np.zeros(n), np.zeros(n, dtype=int), {"c": cat}, cell_area=1.0)
    effects = [EffectSpec("intercept", "intercept"), EffectSpec("c", "categorical", n_levels=k, sum_to_zero=False)]
    hyper = HyperSpec(estimated=(M.EstimatedHyper("c"),))
    base = assemble_model(pix, None, effects, hyper)
    y = rng.normal(0.3, 1.0, n)
    m = base.with_likelihood(GaussianLikelihood(y, 4.0))
    B = base.incidence.toarray()

    def exact(theta):
        P = base.prior_precision(theta).to_dense()
        cov = B @ np.linalg.inv(P) @ B.T + np.eye(n) / 4.0
        r = y - B @ base.prior_mean
        return -0.5 * np.linalg.slogdet(cov)[1] - 0.5 * r @ np.linalg.solve(cov, r)

    res = find_mode(m, 3.0)
    assert res.n_newton_iters <= 2
    _, g, _ = joint_log_posterior(m, res.mode, 3.0)
    assert np.max(np.abs(g)) < 1e-9
    for t1, t2 in [(0.3, 3.0), (2.0, 50.0)]:
        lap = log_hyper_posterior(m, t1) - log_hyper_posterior(m, t2)
        assert abs(lap - (exact(t1) - exact(t2))) < 1e-8


def test_hyper_posterior_finite_over_range(small_dataset):
    _, graph, pixels, _ = small_dataset
    hyper = M.preset_hyper("mod3")
    m = assemble_model(pixels, graph, small_effects(), hyper)
    vals = [log_hyper_posterior(m, t, hyper.target) for t in np.exp(np.linspace(-2, 4, 5))]
    assert np.all(np.isfinite(vals))


# ---------------------------------------------------------------------------
# fit

def test_fit_without_hyperparameters(small_dataset):
    _, _, pixels, _ = small_dataset
    m = assemble_model(pixels, None, small_effects(spatial=False))
    res = fit(m)
    assert len(res.grid) == 1 and res.grid[0].weight == 1.0
    assert np.all(res.latent_sd > 0)


def test_single_point_marginals_equal_gaussian(small_dataset):
    _, _, pixels, _ = small_dataset
    m = assemble_model(pixels, None, small_effects(spatial=False))
    res = fit(m)
    mode = res.modes[0]
    H = mode.curvature.to_dense()
    s = np.linalg.inv(H)
    a = m.constraint.matrix
    cov = s - s @ a.T @ np.linalg.solve(a @ s @ a.T, a @ s)
    np.testing.assert_allclose(res.latent_sd, np.sqrt(np.diag(cov)), rtol=1e-9)
    np.testing.assert_array_equal(res.latent_mean, mode.mode)
    B = m.incidence.toarray()
    np.testing.assert_allclose(res.predictor_var, np.einsum("ij,jk,ik->i", B, cov, B), rtol=1e-8, atol=1e-14)


def test_fit_with_spatial_precision(small_dataset):
    _, graph, pixels, truth = small_dataset
    hyper = M.preset_hyper("mod3")
    m = assemble_model(pixels, graph, small_effects(), hyper)
    res = fit(m, hyper)
    w = res.weights
    assert len(res.grid) == 15
    assert abs(w.sum() - 1) < 1e-12 and np.all(w >= 0)
    s = res.hyper_summary
    assert s["q025"] < s["mean"] < s["q975"]
    assert np.all(res.latent_sd > 0)
    # mixture second moments are consistent with the per-point Gaussians
    sp_block = m.block("spatial").slice
    assert abs(res.latent_mean[sp_block].sum()) < 1e-9


def test_fit_independent_of_threads(small_dataset):
    _, graph, pixels, _ = small_dataset
    hyper = M.preset_hyper("mod3")
    m = assemble_model(pixels, graph, small_effects(), hyper)
    a, b = fit(m, hyper, threads=1), fit(m, hyper, threads=4)
    np.testing.assert_array_equal(a.latent_mean, b.latent_mean)
    np.testing.assert_array_equal(a.cov_data, b.cov_data)
    np.testing.assert_array_equal(a.weights, b.weights)


def test_fit_rejects_mismatched_hyper(small_dataset):
    _, graph, pixels, _ = small_dataset
    m = assemble_model(pixels, graph, small_effects(), M.preset_hyper("mod3"))
    with pytest.raises(ValueError):
        fit(m, HyperSpec())
