"""Acceptance suite: one PASS/FAIL line per criterion, at the stated tolerance.

Run with ``pytest tests/test_acceptance.py -v``; the status lines are written
to the terminal even when output capture is on.
"""

import math
import time
import warnings
from dataclasses import replace

import numpy as np
import pytest

from coxmap import model as M
from coxmap.cli import main
from coxmap.evaluation import cross_validate, make_cv_plan, pairwise_auc, roc_auc
from coxmap.gmrf import AdjacencyGraph, build_car_precision, build_rw1_precision
from coxmap.laplace import find_mode, fit, joint_log_posterior
from coxmap.likelihood import PoissonLikelihood
from coxmap.model import EffectSpec, PixelTable, assemble_model, design_model
from coxmap.predict import aggregate, event_probability
from coxmap.sim import GridSpec, make_rng, quadrature_oracle, simulate_dataset, tile_graph

SIM_ROLES = {"continuous": ["z1", "z2", "z3"], "nonlinear": ["z3"]}


@pytest.fixture
def report(capsys):
    def emit(number, ok, detail):
        with capsys.disabled():
            print(f"\nacceptance {number}: {'PASS' if ok else 'FAIL'} ({detail})")
        assert ok, detail
    return emit


def _timed(fn):
    start = time.perf_counter()
    out = fn()
    return out, time.perf_counter() - start


def _sim_effects(preset):
    roles = M.CovariateRoles.infer(SIM_ROLES["continuous"], SIM_ROLES)
    return M.preset_effects(preset, roles)


# ---------------------------------------------------------------------------
# 1. gradient against central finite differences

def _mod2b_toy(seed):
    rng = np.random.default_rng(seed)
    n = 150
    pix = PixelTable(np.arange(n), rng.poisson(0.8, n), rng.integers(0, 6, n), {
        "Elev": rng.standard_normal(n), "Slo": rng.standard_normal(n),
        "Asp": rng.uniform(0, 360, n), "Lito": rng.integers(0, 3, n).astype(float)}, cell_area=1.0)
    roles = M.CovariateRoles.infer(pix.covariate_names, {"categorical": {"Lito": 3}})
    effects = [e if e.kind != "rw1" else replace(e, n_levels=6) for e in M.preset_effects("mod2b", roles)]
    model = assemble_model(pix, None, effects)
    return model, model.prior_mean + 0.3 * rng.standard_normal(model.latent_dim)


def _gradient_error(seed):
    m, eta = _mod2b_toy(seed)
    _, g, _ = joint_log_posterior(m, eta)
    h = 1e-5
    fd = np.empty_like(g)
    for j in range(g.size):
        e = np.zeros_like(g)
        e[j] = h
        fd[j] = (joint_log_posterior(m, eta + e)[0] - joint_log_posterior(m, eta - e)[0]) / (2 * h)
    return np.max(np.abs(fd - g)) / max(1.0, np.max(np.abs(g)))


def test_criterion_1_gradient(report):
    errors, elapsed = _timed(lambda: [_gradient_error(s) for s in range(10)])
    worst = max(errors)
    report(1, worst <= 1e-6 and elapsed < 5,
           f"max relative gradient error {worst:.2e} over 10 toys, {elapsed:.2f} s")


# ---------------------------------------------------------------------------
# 2. Laplace against quadrature

def test_criterion_2_laplace_vs_quadrature(report):
    def run():
        counts = make_rng(0).poisson(2.0, 200)
        pix = PixelTable(np.arange(200), counts, np.zeros(200, dtype=int), {}, cell_area=1.0)
        m = assemble_model(pix, None, [EffectSpec("intercept", "intercept")])
        return fit(m), quadrature_oracle(m)

    (res, ref), elapsed = _timed(run)
    dm = abs(res.latent_mean[0] - ref["mean"][0])
    ds = abs(res.latent_sd[0] / ref["sd"][0] - 1)
    report(2, dm <= 0.01 and ds <= 0.05 and elapsed < 5,
           f"|mean diff| {dm:.2e}, sd rel diff {ds:.2e}, {elapsed:.2f} s")


# ---------------------------------------------------------------------------
# 3. GLM limit against IRLS

def _irls(X, y, offset):
    beta = np.zeros(X.shape[1])
    beta[0] = math.log(y.mean()) - offset
    for _ in range(100):
        mu = np.exp(offset + X @ beta)
        new = np.linalg.solve(X.T @ (mu[:, None] * X), X.T @ (mu * (X @ beta) + y - mu))
        if np.max(np.abs(new - beta)) < 1e-13:
            return new
        beta = new
    return beta


def test_criterion_3_glm_limit(report):
    def run():
        rng = np.random.default_rng(3)
        n = 500
        X = np.column_stack([np.ones(n), rng.standard_normal((n, 3))])
        y = rng.poisson(225 * np.exp(X @ np.array([-4.5, 0.4, -0.7, 0.2]))).astype(float)
        m = design_model(X, np.zeros(4), np.eye(4) * 1e-6, PoissonLikelihood(y, 225.0), 225.0)
        return find_mode(m).mode, _irls(X, y, math.log(225.0))

    (mode, ref), elapsed = _timed(run)
    err = np.max(np.abs(mode - ref))
    report(3, err <= 1e-4 and elapsed < 5, f"max |mode - IRLS| {err:.2e}, {elapsed:.2f} s")


# ---------------------------------------------------------------------------
# 4. precision structures

def _random_graph(rng, n, p=0.3):
    edges = [(i, i + 1) for i in range(n - 1)]
    edges += [(i, j) for i in range(n) for j in range(i + 2, n) if rng.random() < p / 2]
    return AdjacencyGraph.from_edges(n, edges)


def _precision_checks(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(3, 51))
    tau = float(rng.uniform(0.1, 30))
    g = _random_graph(rng, n)
    failures = []
    for label, q in (("car", build_car_precision(g, tau)), ("rw1", build_rw1_precision(n, tau, cyclic=False)),
                     ("rw1_cyclic", build_rw1_precision(n, tau, cyclic=True))):
        d = q.to_dense()
        ev = np.linalg.eigvalsh(d)
        if not np.array_equal(d, d.T):
            failures.append(f"{label} asymmetric")
        if np.max(np.abs(d.sum(axis=1))) > 1e-12:
            failures.append(f"{label} row sums")
        if np.sum(np.abs(ev) < 1e-9 * tau * n) != 1 or np.any(ev < -1e-9 * tau * n):
            failures.append(f"{label} rank")
    # conditional mean and variance of the CAR full conditionals
    q = build_car_precision(g, tau).to_dense()
    x = rng.standard_normal(n)
    for ell in range(n):
        cond_mean = -(q[ell] @ x - q[ell, ell] * x[ell]) / q[ell, ell]
        if abs(cond_mean - x[list(g.neighbors[ell])].mean()) > 1e-12 or \
                abs(1 / q[ell, ell] - 1 / (g.degrees[ell] * tau)) > 1e-12:
            failures.append(f"car conditional at {ell}")
            break
    return failures


def test_criterion_4_precision_suite(report):
    failures, elapsed = _timed(lambda: [f for s in range(20) for f in _precision_checks(s)])
    report(4, not failures and elapsed < 10,
           f"20 random instances, dims <= 50, {len(failures)} failures {failures[:3]}, {elapsed:.2f} s")


# ---------------------------------------------------------------------------
# 5. parameter recovery

@pytest.mark.slow
def test_criterion_5_parameter_recovery(report):
    grid = GridSpec(60, 60, 10)
    graph = tile_graph(grid)
    effects = _sim_effects("mod3")
    hyper = M.preset_hyper("mod3")
    names = ["intercept", "z1", "z2", "z3"]
    hits = np.zeros(len(names))
    tau_hits, slowest, reps = 0, 0.0, 50
    for rep in range(reps):
        pixels, truth = simulate_dataset(grid, graph, effects, theta=2.7, seed=2000 + rep,
                                         fixed={"intercept": math.log(0.5 / 225)})
        res, elapsed = _timed(lambda: fit(assemble_model(pixels, graph, effects, hyper), hyper, threads=1))
        slowest = max(slowest, elapsed)
        for i, name in enumerate(names):
            _, _, lo, hi = res.marginal(name)
            hits[i] += lo[0] <= truth.blocks[name][0] <= hi[0]
        s = res.hyper_summary
        tau_hits += s["q025"] <= 2.7 <= s["q975"]
    cover = hits / reps
    ok = np.all(cover >= 0.85) and tau_hits / reps >= 0.80 and slowest < 60
    detail = ", ".join(f"{n} {c:.2f}" for n, c in zip(names, cover))
    report(5, ok, f"fixed-effect coverage {detail}; tau coverage {tau_hits / reps:.2f}; "
                  f"slowest fit {slowest:.2f} s")


# ---------------------------------------------------------------------------
# 6. aggregation identity and the logistic limit

def test_criterion_6_aggregation(report):
    def run():
        rng = np.random.default_rng(6)
        worst = 0.0
        for _ in range(50):
            n = int(rng.integers(1, 500))
            lam = rng.exponential(rng.uniform(0.001, 0.5), n)
            unit = rng.integers(0, 9, n)
            _, p_unit = aggregate(lam, unit, 9)
            p = event_probability(lam)
            for u in range(9):
                worst = max(worst, abs(p_unit[u] - (1 - np.prod(1 - p[unit == u]))))
        c = 225.0
        lam_prime = np.geomspace(1e-10, 4e-5, 50)
        p = event_probability(c * lam_prime)
        logistic = c * lam_prime / (1 + c * lam_prime)
        rel = np.max(np.abs(p / logistic - 1)[p < 0.01])
        return worst, rel

    (worst, rel), elapsed = _timed(run)
    report(6, worst <= 1e-12 and rel <= 0.01 and elapsed < 1,
           f"max identity error {worst:.1e}, max logistic rel diff {rel:.1e} at p < 0.01, {elapsed:.2f} s")


# ---------------------------------------------------------------------------
# 7. AUC against the pairwise oracle

def test_criterion_7_auc_oracle(report):
    def run():
        rng = np.random.default_rng(7)
        mismatches = 0
        for i in range(100):
            n = int(rng.integers(2, 1001))
            y = rng.random(n) < rng.uniform(0.05, 0.95)
            y[0], y[1] = True, False
            # half the instances use coarse scores so that ties are common
            s = rng.integers(0, 10, n).astype(float) if i % 2 else rng.standard_normal(n) + y
            mismatches += roc_auc(s, y).auc != pairwise_auc(s, y)
        return mismatches

    mismatches, elapsed = _timed(run)
    report(7, mismatches == 0 and elapsed < 10, f"{mismatches} of 100 instances differ, {elapsed:.2f} s")


# ---------------------------------------------------------------------------
# 8. spatial model beats the non-spatial one in unit-level CV

@pytest.mark.slow
def test_criterion_8_spatial_ordering(report):
    grid = GridSpec(60, 60, 5)          # 144 units of 25 pixels
    graph = tile_graph(grid)
    base, spatial = _sim_effects("mod2b"), _sim_effects("mod3")
    base_hyper, spatial_hyper = M.preset_hyper("mod2b"), M.preset_hyper("mod3")

    def run():
        wins, pairs = 0, []
        for rep in range(20):
            pixels, _ = simulate_dataset(grid, graph, spatial, theta=0.5, seed=3000 + rep,
                                         fixed={"intercept": math.log(0.02 / 225)})
            plan = make_cv_plan(np.unique(pixels.unit_id), seed=rep)
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                a = cross_validate(pixels, None, base, base_hyper, plan).auc("unit")
                b = cross_validate(pixels, graph, spatial, spatial_hyper, plan).auc("unit")
            wins += b > a
            pairs.append((a, b))
        return wins, pairs

    (wins, pairs), elapsed = _timed(run)
    gap = np.mean([b - a for a, b in pairs])
    report(8, wins >= 18 and elapsed < 1200,
           f"spatial model wins {wins}/20, mean AUC gain {gap:.3f}, {elapsed:.0f} s")


# ---------------------------------------------------------------------------
# 9. byte-identical outputs across runs and thread counts

def test_criterion_9_determinism(tmp_path, report):
    cfg = tmp_path / "config.json"
    cfg.write_text('{"roles": {"continuous": ["z1", "z2", "z3"], "nonlinear": ["z3"]},'
                   ' "simulate": {"nx": 30, "ny": 30, "tile": 5, "theta": 2.0}}')
    data = [tmp_path / "sim_a", tmp_path / "sim_b"]
    for d in data:
        assert main(["simulate", "--config", str(cfg), "--seed", "4", "--out", str(d)]) == 0
    pixels, adjacency = str(data[0] / "pixels.csv"), str(data[0] / "adjacency.csv")

    runs = {}
    for command in ("fit", "cv"):
        for label, threads in (("a", 1), ("b", 1), ("c", 4)):
            out = tmp_path / f"{command}_{label}"
            argv = [command, "--pixels", pixels, "--adjacency", adjacency, "--config", str(cfg),
                    "--preset", "mod3", "--seed", "4", "--threads", str(threads), "--out", str(out)]
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                assert main(argv) == 0
            runs[command, label] = {p.name: p.read_bytes() for p in sorted(out.glob("*.csv"))}

    sims = [{p.name: p.read_bytes() for p in sorted(d.glob("*.csv"))} for d in data]
    same = sims[0] == sims[1]
    for command in ("fit", "cv"):
        same &= runs[command, "a"] == runs[command, "b"] == runs[command, "c"]
    n_files = sum(len(runs[k]) for k in runs) + 2 * len(sims[0])
    report(9, same, f"{n_files} CSV files compared across two runs and threads 1 and 4")
