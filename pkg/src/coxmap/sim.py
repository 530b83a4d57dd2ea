"""Synthetic data from the generative model, and a quadrature oracle.

Random numbers come from a Philox (counter-based) generator seeded explicitly,
so a seed fully determines a simulated dataset on every platform.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy import integrate, optimize

from .gmrf import AdjacencyGraph, factorize
from .model import JITTER, PixelTable, assemble_model


def make_rng(seed) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(int(seed)))


@dataclass(frozen=True)
class GridSpec:
    """Rectangular pixel lattice split into square tiles (the areal units)."""

    nx: int
    ny: int
    tile: int
    cell_area: float = 225.0

    @property
    def tiles_x(self):
        return -(-self.nx // self.tile)

    @property
    def tiles_y(self):
        return -(-self.ny // self.tile)

    @property
    def n_units(self):
        return self.tiles_x * self.tiles_y

    @property
    def n_pixels(self):
        return self.nx * self.ny

    def coordinates(self):
        iy, ix = np.divmod(np.arange(self.n_pixels), self.nx)
        return ix, iy

    def unit_ids(self):
        ix, iy = self.coordinates()
        return (iy // self.tile) * self.tiles_x + ix // self.tile


def tile_graph(grid: GridSpec) -> AdjacencyGraph:
    """Rook adjacency between tiles."""
    edges = []
    for ty in range(grid.tiles_y):
        for tx in range(grid.tiles_x):
            u = ty * grid.tiles_x + tx
            if tx + 1 < grid.tiles_x:
                edges.append((u, u + 1))
            if ty + 1 < grid.tiles_y:
                edges.append((u, u + grid.tiles_x))
    return AdjacencyGraph.from_edges(grid.n_units, edges)


@dataclass(frozen=True, eq=False)
class SimTruth:
    latent: np.ndarray
    blocks: dict
    theta: float | None
    intensity: np.ndarray
    counts: np.ndarray
    seed: int

    def to_dict(self):
        return {
            "seed": self.seed,
            "theta": self.theta,
            "latent": {k: [float(x) for x in v] for k, v in self.blocks.items()},
        }


def simulate_covariates(effects, n, rng):
    """Independent covariates per pixel: standard normal for continuous ones,
    uniform angles for cyclic ones and uniform codes for categorical ones."""
    covs = {}
    for e in effects:
        if e.covariate is None or e.covariate in covs or e.kind == "car_spatial":
            continue
        if e.kind == "categorical":
            covs[e.covariate] = rng.integers(0, e.n_levels, n).astype(float)
        elif e.kind == "rw1_cyclic":
            covs[e.covariate] = rng.uniform(0.0, e.period, n)
        else:
            covs[e.covariate] = rng.standard_normal(n)
    return covs


def constrained_sample(structure, tau, rows, rng, size=None):
    """Draws from the intrinsic Gaussian with precision tau * structure,
    conditioned on ``rows @ x = 0`` by kriging."""
    q = structure.scaled(tau).to_csc()
    fac = factorize(q + JITTER * tau * sp.identity(q.shape[0], format="csc"))
    x = fac.sample(rng, size=1 if size is None else size).T
    if rows:
        a = np.array(rows, dtype=float)
        v = fac.solve(a.T)
        x = x - v @ np.linalg.solve(a @ v, a @ x)
    return x[:, 0] if size is None else x.T


def simulate_dataset(grid: GridSpec, graph: AdjacencyGraph | None, effects, theta=None, seed=0,
                     fixed=None, covariates=None):
    """Draw covariates, latent effects and Poisson counts.

    ``theta`` sets the precision of the spatial (CAR) effect; ``fixed`` maps
    effect names to values overriding the prior draw. Returns the pixel table
    and the stored truth.
    """
    effects = tuple(effects)
    fixed = dict(fixed or {})
    rng = make_rng(seed)
    n = grid.n_pixels
    unit = grid.unit_ids()
    if graph is None:
        graph = tile_graph(grid)
    if graph.n_components > 1:
        warnings.warn("adjacency graph is disconnected; sum-to-zero applied per component", stacklevel=2)
    covs = dict(covariates) if covariates is not None else simulate_covariates(effects, n, rng)
    ix, iy = grid.coordinates()
    table = PixelTable(np.arange(n), np.zeros(n, dtype=np.int64), unit, covs, grid.cell_area, ix, iy)
    has_car = any(e.kind == "car_spatial" for e in effects)
    model = assemble_model(table, graph if has_car else None, effects, n_units=graph.n_units)

    latent = np.zeros(model.latent_dim)
    for e, pb in zip(model.effects, model.prior_blocks):
        sl = pb.block.slice
        length = pb.block.length
        tau = float(theta) if (e.kind == "car_spatial" and theta is not None) else e.prior_precision
        if e.name in fixed:
            latent[sl] = np.broadcast_to(np.asarray(fixed[e.name], dtype=float), (length,))
            continue
        if e.kind in ("intercept", "linear", "categorical"):
            x = e.prior_mean + rng.standard_normal(length) / math.sqrt(tau)
            if e.sum_to_zero:
                x = x - x.mean()
        elif e.kind == "rw1":
            x = np.concatenate([[0.0], np.cumsum(rng.standard_normal(length - 1) / math.sqrt(tau))])
            if e.sum_to_zero:
                x = x - x.mean()
        else:
            if e.kind == "car_spatial":
                rows = [(graph.components == c).astype(float) for c in range(graph.n_components)]
            else:
                rows = [np.ones(length)]
            x = constrained_sample(pb.structure, tau, rows if e.sum_to_zero else [], rng)
        latent[sl] = x

    linpred = model.incidence @ latent
    intensity = grid.cell_area * np.exp(linpred)
    counts = rng.poisson(intensity)
    table = table.with_counts(counts)
    blocks = {b.name: latent[b.slice].copy() for b in model.blocks}
    car_theta = float(theta) if theta is not None else None
    return table, SimTruth(latent, blocks, car_theta, intensity, counts, int(seed))


def quadrature_oracle(model, theta=None, epsrel=1e-8):
    """Posterior mean, sd and covariance by adaptive quadrature.

    Only for Poisson models with at most two latent dimensions and no
    constraints. The integration box is +-10 sd around a numerically located
    mode, with sd taken from a finite-difference Hessian.
    """
    d = model.latent_dim
    if d > 2:
        raise ValueError("quadrature oracle supports at most 2 latent dimensions")
    if model.constraint.n_rows:
        raise ValueError("quadrature oracle does not handle constraints")
    B = model.incidence.toarray()
    counts = np.asarray(model.likelihood.counts, dtype=float)
    c = model.likelihood.cell_area
    Q = model.prior_precision(theta).to_dense()
    prior_mean = model.prior_mean

    def logpost(x):
        x = np.asarray(x, dtype=float)
        eta = B @ x
        r = x - prior_mean
        return float(counts @ eta - c * np.sum(np.exp(eta)) - 0.5 * r @ Q @ r)

    res = optimize.minimize(lambda x: -logpost(x), prior_mean.copy(), method="Nelder-Mead",
                            options={"xatol": 1e-10, "fatol": 1e-12, "maxiter": 20000})
    center = res.x
    h = 1e-4
    H = np.empty((d, d))
    for i in range(d):
        for j in range(d):
            ei, ej = np.eye(d)[i] * h, np.eye(d)[j] * h
            H[i, j] = -(logpost(center + ei + ej) - logpost(center + ei - ej)
                        - logpost(center - ei + ej) + logpost(center - ei - ej)) / (4 * h * h)
    sd = np.sqrt(np.diag(np.linalg.inv(H)))
    top = logpost(center)
    half = 10 * sd
    # absolute tolerance relative to the Gaussian estimate of the normaliser
    opts = dict(epsabs=epsrel * float(np.prod(math.sqrt(2 * math.pi) * sd)), epsrel=epsrel)

    if d == 1:
        def moment(k):
            f = lambda t: t ** k * math.exp(logpost(center + t) - top)  # noqa: E731
            return integrate.quad(f, -half[0], half[0], points=[0.0], limit=200, **opts)[0]

        z = moment(0)
        m1 = moment(1) / z
        var = moment(2) / z - m1 * m1
        return {"mean": center + m1, "sd": np.array([math.sqrt(var)]), "cov": np.array([[var]])}

    def moment2(g):
        f = lambda v, u: g(u, v) * math.exp(logpost(center + np.array([u, v])) - top)  # noqa: E731
        return integrate.dblquad(f, -half[0], half[0], -half[1], half[1], **opts)[0]

    z = moment2(lambda u, v: 1.0)
    mu = moment2(lambda u, v: u) / z
    mv = moment2(lambda u, v: v) / z
    cuu = moment2(lambda u, v: u * u) / z - mu * mu
    cvv = moment2(lambda u, v: v * v) / z - mv * mv
    cuv = moment2(lambda u, v: u * v) / z - mu * mv
    cov = np.array([[cuu, cuv], [cuv, cvv]])
    return {"mean": center + np.array([mu, mv]), "sd": np.sqrt(np.diag(cov)), "cov": cov}
