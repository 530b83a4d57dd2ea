"""Data schema, covariate preprocessing and latent-field assembly."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field, replace
from functools import cached_property

import numpy as np
import scipy.sparse as sp

from .errors import ConfigError, DataError
from .gmrf import (
    AdjacencyGraph,
    LinearConstraint,
    SparseSymmetric,
    build_car_precision,
    build_rw1_precision,
)
from .likelihood import PoissonLikelihood

CELL_AREA = 225.0
KINDS = ("intercept", "linear", "categorical", "rw1", "rw1_cyclic", "car_spatial")
LEVEL_KINDS = ("categorical", "rw1", "rw1_cyclic", "car_spatial")
INTRINSIC_KINDS = ("rw1", "rw1_cyclic", "car_spatial")
JITTER = 1e-5

# prior mean, prior precision, sum-to-zero, default levels
_DEFAULTS = {
    "intercept": (-2.0, 1.0, False, None),
    "linear": (0.0, 2.0, False, None),
    "categorical": (0.0, 100.0, True, None),
    "rw1": (0.0, 25.0, True, 20),
    "rw1_cyclic": (0.0, 25.0, True, 16),
    "car_spatial": (0.0, 1.0, True, None),
}


@dataclass(frozen=True, eq=False)
class PixelTable:
    """Per-pixel event counts, areal-unit membership and covariates."""

    pixel_id: np.ndarray
    count: np.ndarray
    unit_id: np.ndarray
    covariates: dict
    cell_area: float = CELL_AREA
    x: np.ndarray | None = None
    y: np.ndarray | None = None

    def __post_init__(self):
        pid = np.asarray(self.pixel_id, dtype=np.int64)
        n = pid.size
        count = np.asarray(self.count)
        if count.shape != (n,):
            raise DataError("count column has the wrong length")
        if not np.all(np.isfinite(count)) or np.any(count < 0) or np.any(count != np.floor(count)):
            raise DataError("counts must be finite non-negative integers")
        unit = np.asarray(self.unit_id)
        if unit.shape != (n,) or np.any(unit < 0) or np.any(unit != np.floor(unit)):
            raise DataError("unit_id must be non-negative integers, one per pixel")
        if not self.cell_area > 0:
            raise DataError("cell_area must be positive")
        covs = {}
        for name, vals in self.covariates.items():
            v = np.asarray(vals, dtype=np.float64)
            if v.shape != (n,):
                raise DataError(f"covariate {name!r} has the wrong length")
            if not np.all(np.isfinite(v)):
                raise DataError(f"covariate {name!r} has missing or non-finite values")
            covs[str(name)] = v
        uniq, counts = np.unique(pid, return_counts=True)
        if np.any(counts > 1):
            raise DataError(f"duplicate pixel_id {int(uniq[counts > 1][0])}")
        object.__setattr__(self, "pixel_id", pid)
        object.__setattr__(self, "count", count.astype(np.int64))
        object.__setattr__(self, "unit_id", unit.astype(np.int64))
        object.__setattr__(self, "covariates", covs)
        for name in ("x", "y"):
            v = getattr(self, name)
            object.__setattr__(self, name, None if v is None else np.asarray(v, dtype=np.float64))

    @property
    def n_pixels(self):
        return self.pixel_id.size

    @property
    def covariate_names(self):
        return list(self.covariates)

    @property
    def n_units(self):
        return int(self.unit_id.max()) + 1 if self.n_pixels else 0

    def subset(self, mask) -> "PixelTable":
        mask = np.asarray(mask)
        return PixelTable(
            self.pixel_id[mask], self.count[mask], self.unit_id[mask],
            {k: v[mask] for k, v in self.covariates.items()}, self.cell_area,
            None if self.x is None else self.x[mask],
            None if self.y is None else self.y[mask],
        )

    def with_counts(self, counts) -> "PixelTable":
        return replace(self, count=np.asarray(counts))


def standardize(values):
    """Center and scale to sample mean 0 and sample sd 1 (n-1 denominator)."""
    v = np.asarray(values, dtype=np.float64)
    if v.size < 2 or np.ptp(v) == 0:
        raise DataError("zero variance covariate")
    mean = float(np.mean(v))
    sd = float(np.std(v, ddof=1))
    return (v - mean) / sd, mean, sd


def destandardize(scaled, mean, sd):
    return np.asarray(scaled, dtype=np.float64) * sd + mean


def bin_covariate(values, n_bins):
    """Equidistant bins over [min, max]; the maximum falls in the last bin."""
    v = np.asarray(values, dtype=np.float64)
    if n_bins < 2:
        raise ValueError("need at least 2 bins")
    lo, hi = float(np.min(v)), float(np.max(v))
    if not hi > lo:
        raise DataError("degenerate covariate range: cannot bin a constant")
    edges = np.linspace(lo, hi, n_bins + 1)
    return assign_bins(v, edges), edges


def assign_bins(values, edges):
    """Bin index per value; out-of-range values clamp to the end bins."""
    n_bins = len(edges) - 1
    lo, hi = edges[0], edges[-1]
    idx = np.floor(n_bins * (np.asarray(values, dtype=np.float64) - lo) / (hi - lo))
    return np.clip(idx, 0, n_bins - 1).astype(np.int64)


def cyclic_bins(values, n_bins, period):
    frac = np.mod(np.asarray(values, dtype=np.float64), period) / period
    return np.minimum(np.floor(n_bins * frac), n_bins - 1).astype(np.int64)


@dataclass(frozen=True)
class EffectSpec:
    """One additive term of the linear predictor.

    ``prior_precision`` is the Gaussian precision for intercept, linear and
    categorical terms and the scale tau of the structured (random walk, CAR)
    precisions. Unset fields take the defaults of their kind.
    """

    name: str
    kind: str
    covariate: str | None = None
    n_levels: int | None = None
    prior_mean: float | None = None
    prior_precision: float | None = None
    sum_to_zero: bool | None = None
    period: float | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"effect {self.name!r}: unknown kind {self.kind!r}")
        mean, prec, stz, levels = _DEFAULTS[self.kind]
        set_ = lambda k, v: object.__setattr__(self, k, v)  # noqa: E731
        if self.prior_mean is None:
            set_("prior_mean", mean)
        if self.prior_precision is None:
            set_("prior_precision", prec)
        if self.sum_to_zero is None:
            set_("sum_to_zero", stz)
        if self.n_levels is None and levels is not None:
            set_("n_levels", levels)
        if self.kind not in ("intercept", "car_spatial") and self.covariate is None:
            set_("covariate", self.name)
        if self.kind == "rw1_cyclic" and self.period is None:
            set_("period", 360.0)
        if not self.prior_precision > 0:
            raise ConfigError(f"effect {self.name!r}: prior precision must be positive")
        if self.kind == "rw1_cyclic" and self.n_levels < 3:
            raise ConfigError(f"effect {self.name!r}: cyclic random walk needs n_levels >= 3")
        if self.kind in ("rw1", "categorical") and (self.n_levels is None or self.n_levels < 2):
            raise ConfigError(f"effect {self.name!r}: needs n_levels >= 2")
        if self.sum_to_zero and self.prior_mean != 0:
            raise ConfigError(f"effect {self.name!r}: sum-to-zero effects need prior mean 0")
        if self.kind == "rw1" and str(self.covariate).lower() in ("asp", "aspect"):
            warnings.warn(f"aspect covariate {self.covariate!r} declared non-cyclic; honoured as declared",
                          stacklevel=3)

    def to_dict(self):
        return {k: getattr(self, k) for k in (
            "name", "kind", "covariate", "n_levels", "prior_mean", "prior_precision",
            "sum_to_zero", "period")}

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown effect fields: {sorted(unknown)}")
        return cls(**d)


@dataclass(frozen=True)
class EstimatedHyper:
    """Precision of one effect treated as unknown, with a log-normal prior."""

    name: str
    prior_median: float = 10.0
    prior_log_sd: float = 1.5
    bounds: tuple | None = None
    n_grid: int = 15
    grid_step_sd: float = 0.5

    def log_prior(self, log_theta):
        """Normal log density of log(theta)."""
        z = (np.asarray(log_theta) - math.log(self.prior_median)) / self.prior_log_sd
        return -0.5 * z * z - math.log(self.prior_log_sd * math.sqrt(2 * math.pi))

    def search_bounds(self):
        if self.bounds is not None:
            return tuple(float(b) for b in self.bounds)
        c = math.log(self.prior_median)
        return c - 4 * self.prior_log_sd, c + 4 * self.prior_log_sd

    def tabulate(self, n=101):
        lo, hi = self.search_bounds()
        u = np.linspace(lo, hi, n)
        return u, self.log_prior(u)


@dataclass(frozen=True)
class HyperSpec:
    """Which precisions are estimated; all others stay at their fixed values."""

    estimated: tuple = ()
    fixed: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.estimated) > 1:
            raise ConfigError("at most one estimated hyperparameter is supported")

    @property
    def target(self):
        return self.estimated[0] if self.estimated else None


@dataclass(frozen=True)
class Block:
    name: str
    kind: str
    offset: int
    length: int

    @property
    def slice(self):
        return slice(self.offset, self.offset + self.length)


@dataclass(frozen=True, eq=False)
class Design:
    """Everything needed to map pixels to latent indices: layout, covariate
    scaling constants and bin edges. Shared by fitting and prediction."""

    effects: tuple
    blocks: tuple
    standardization: dict
    bin_edges: dict
    n_units: int

    @property
    def latent_dim(self):
        last = self.blocks[-1]
        return last.offset + last.length

    def block(self, name) -> Block:
        for b in self.blocks:
            if b.name == name:
                return b
        raise KeyError(name)

    def scaled(self, pixels: PixelTable, covariate):
        try:
            v = pixels.covariates[covariate]
        except KeyError:
            raise DataError(f"missing covariate column {covariate!r}") from None
        mean, sd = self.standardization[covariate]
        return (v - mean) / sd

    def levels(self, pixels: PixelTable, eff: EffectSpec):
        if eff.kind == "car_spatial":
            idx = pixels.unit_id
            if idx.size and idx.max() >= self.n_units:
                bad = int(pixels.pixel_id[np.argmax(idx >= self.n_units)])
                raise DataError(f"pixel {bad} references unknown unit {int(idx.max())}")
            return idx
        if eff.kind == "categorical":
            v = pixels.covariates.get(eff.covariate)
            if v is None:
                raise DataError(f"missing covariate column {eff.covariate!r}")
            if np.any(v != np.floor(v)) or np.any(v < 0) or np.any(v >= eff.n_levels):
                raise DataError(f"categorical covariate {eff.covariate!r} must hold codes 0..{eff.n_levels - 1}")
            return v.astype(np.int64)
        if eff.kind == "rw1_cyclic":
            v = pixels.covariates.get(eff.covariate)
            if v is None:
                raise DataError(f"missing covariate column {eff.covariate!r}")
            return cyclic_bins(v, eff.n_levels, eff.period)
        return assign_bins(self.scaled(pixels, eff.covariate), self.bin_edges[eff.name])

    def incidence(self, pixels: PixelTable) -> sp.csr_matrix:
        """Sparse pixel-by-latent map: X = incidence @ eta."""
        n = pixels.n_pixels
        cols, vals = [], []
        for eff, blk in zip(self.effects, self.blocks):
            if eff.kind == "intercept":
                cols.append(np.full(n, blk.offset))
                vals.append(np.ones(n))
            elif eff.kind == "linear":
                cols.append(np.full(n, blk.offset))
                vals.append(self.scaled(pixels, eff.covariate))
            else:
                cols.append(blk.offset + self.levels(pixels, eff))
                vals.append(np.ones(n))
        per_row = len(cols)
        indices = np.column_stack(cols).reshape(-1) if n else np.zeros(0, dtype=np.int64)
        data = np.column_stack(vals).reshape(-1) if n else np.zeros(0)
        indptr = np.arange(n + 1, dtype=np.int64) * per_row
        return sp.csr_matrix((data, indices, indptr), shape=(n, self.latent_dim))

    def to_dict(self):
        return {
            "effects": [e.to_dict() for e in self.effects],
            "blocks": [[b.name, b.kind, b.offset, b.length] for b in self.blocks],
            "standardization": {k: list(v) for k, v in self.standardization.items()},
            "bin_edges": {k: list(map(float, v)) for k, v in self.bin_edges.items()},
            "n_units": self.n_units,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            tuple(EffectSpec.from_dict(e) for e in d["effects"]),
            tuple(Block(*b) for b in d["blocks"]),
            {k: tuple(v) for k, v in d["standardization"].items()},
            {k: np.asarray(v) for k, v in d["bin_edges"].items()},
            int(d["n_units"]),
        )


@dataclass(frozen=True, eq=False)
class PriorBlock:
    block: Block
    structure: SparseSymmetric   # precision at unit scale
    precision: float             # fixed scale (ignored for the estimated block)
    intrinsic: bool
    rank: int                    # exponent of the scale in the prior normaliser


@dataclass(frozen=True, eq=False)
class ModelStructure:
    """Assembled latent Gaussian model for one pixel table."""

    design: Design
    incidence: sp.csr_matrix
    prior_mean: np.ndarray
    prior_blocks: tuple
    constraint: LinearConstraint
    cell_area: float
    likelihood: object
    estimated: str | None = None
    prediction_rows: sp.csr_matrix | None = None

    @property
    def latent_dim(self):
        return self.design.latent_dim

    @property
    def blocks(self):
        return self.design.blocks

    @property
    def effects(self):
        return self.design.effects

    @property
    def n_pixels(self):
        return self.incidence.shape[0]

    @property
    def offset(self):
        return np.full(self.n_pixels, math.log(self.cell_area))

    def block(self, name) -> Block:
        return self.design.block(name)

    def estimated_block(self) -> PriorBlock | None:
        for pb in self.prior_blocks:
            if pb.block.name == self.estimated:
                return pb
        return None

    def block_precisions(self, theta=None):
        out = {}
        for pb in self.prior_blocks:
            if pb.block.name == self.estimated:
                if theta is None:
                    raise ValueError(f"a value for the precision of {self.estimated!r} is required")
                out[pb.block.name] = float(theta)
            else:
                out[pb.block.name] = pb.precision
        return out

    def prior_precision(self, theta=None) -> SparseSymmetric:
        taus = self.block_precisions(theta)
        rows, cols, vals = [], [], []
        for pb in self.prior_blocks:
            s = pb.structure
            rows.append(s.rows + pb.block.offset)
            cols.append(s.cols + pb.block.offset)
            vals.append(s.vals * taus[pb.block.name])
        return SparseSymmetric(self.latent_dim, np.concatenate(rows), np.concatenate(cols), np.concatenate(vals))

    def jitter(self, theta=None) -> np.ndarray:
        """Diagonal added to intrinsic blocks before factorization."""
        taus = self.block_precisions(theta)
        out = np.zeros(self.latent_dim)
        for pb in self.prior_blocks:
            if pb.intrinsic:
                out[pb.block.slice] = JITTER * taus[pb.block.name]
        return out

    def linear_predictor(self, eta):
        return self.incidence @ np.asarray(eta, dtype=np.float64)

    @cached_property
    def pattern(self) -> sp.csc_matrix:
        """Union of the prior, likelihood and prediction sparsity patterns.

        Every non-spatial index is coupled to every other index, so the
        covariance kept on this pattern covers any pixel row, including
        covariate combinations never seen in the data.
        """
        q = self.prior_precision(1.0 if self.estimated else None).to_csc()
        ones = self.incidence.copy()
        ones.data = np.ones_like(ones.data)
        dense = np.ones(self.latent_dim, dtype=bool)
        for b in self.blocks:
            if b.kind == "car_spatial":
                dense[b.slice] = False
        d = sp.csr_matrix(dense.astype(np.float64)[:, None])
        coupling = d @ sp.csr_matrix(np.ones((1, self.latent_dim)))
        pat = abs(q) + (ones.T @ ones) + sp.identity(self.latent_dim) + coupling + coupling.T
        if self.prediction_rows is not None and self.prediction_rows.shape[0]:
            extra = self.prediction_rows.copy()
            extra.data = np.ones_like(extra.data)
            pat = pat + extra.T @ extra
        pat = sp.csc_matrix(pat)
        pat.data = np.ones_like(pat.data)
        pat.sort_indices()
        return pat

    def with_likelihood(self, likelihood) -> "ModelStructure":
        return replace(self, likelihood=likelihood)

    def with_prediction_rows(self, rows) -> "ModelStructure":
        return replace(self, prediction_rows=sp.csr_matrix(rows))


def assemble_model(pixels: PixelTable, graph: AdjacencyGraph | None, effects, hyper: HyperSpec | None = None,
                   n_units: int | None = None) -> ModelStructure:
    """Lay out the latent field and prior for the given additive effects."""
    effects = tuple(effects)
    hyper = hyper or HyperSpec()
    names = [e.name for e in effects]
    if len(set(names)) != len(names):
        raise ConfigError("effect names must be unique")
    if sum(e.kind == "intercept" for e in effects) != 1:
        raise ConfigError("exactly one intercept effect is required")
    for e in effects:
        if e.covariate is not None and e.kind != "car_spatial" and e.covariate not in pixels.covariates:
            raise ConfigError(f"effect {e.name!r} references unknown covariate {e.covariate!r}")
    has_car = any(e.kind == "car_spatial" for e in effects)
    if has_car and graph is None:
        raise ConfigError("a spatial effect requires an adjacency graph")
    if graph is not None:
        n_units = graph.n_units
    elif n_units is None:
        n_units = pixels.n_units
    if has_car and pixels.n_pixels and pixels.unit_id.max() >= n_units:
        bad = int(pixels.pixel_id[np.argmax(pixels.unit_id >= n_units)])
        raise DataError(f"pixel {bad} references unknown unit {int(pixels.unit_id.max())}")
    if hyper.target is not None and hyper.target.name not in names:
        raise ConfigError(f"estimated hyperparameter targets unknown effect {hyper.target.name!r}")
    for k in hyper.fixed:
        if k not in names:
            raise ConfigError(f"fixed hyperparameter for unknown effect {k!r}")
    effects = tuple(
        replace(e, prior_precision=float(hyper.fixed[e.name])) if e.name in hyper.fixed else e
        for e in effects
    )

    standardization = {}
    for e in effects:
        if e.kind in ("linear", "rw1") and e.covariate not in standardization:
            _, mean, sd = standardize(pixels.covariates[e.covariate])
            standardization[e.covariate] = (mean, sd)

    bin_edges = {}
    for e in effects:
        if e.kind == "rw1":
            mean, sd = standardization[e.covariate]
            _, edges = bin_covariate((pixels.covariates[e.covariate] - mean) / sd, e.n_levels)
            bin_edges[e.name] = edges

    blocks, offset = [], 0
    for e in effects:
        length = n_units if e.kind == "car_spatial" else (e.n_levels if e.kind in LEVEL_KINDS else 1)
        if e.kind == "car_spatial" and e.n_levels not in (None, n_units):
            raise ConfigError(f"effect {e.name!r}: n_levels {e.n_levels} does not match {n_units} units")
        blocks.append(Block(e.name, e.kind, offset, length))
        offset += length
    design = Design(effects, tuple(blocks), standardization, bin_edges, n_units)
    dim = design.latent_dim

    prior_mean = np.zeros(dim)
    prior_blocks, rows = [], []
    for e, b in zip(effects, blocks):
        prior_mean[b.slice] = e.prior_mean
        block_rows = []
        if e.kind == "car_spatial":
            structure = build_car_precision(graph, 1.0)
            null = graph.n_components
            if e.sum_to_zero:
                for c in range(graph.n_components):
                    vec = np.zeros(dim)
                    vec[b.offset:b.offset + b.length][graph.components == c] = 1.0
                    block_rows.append((vec, 0.0))
        elif e.kind in ("rw1", "rw1_cyclic"):
            structure = build_rw1_precision(b.length, 1.0, cyclic=e.kind == "rw1_cyclic")
            null = 1
        else:
            structure = SparseSymmetric.diagonal(np.ones(b.length))
            null = 0
        if e.sum_to_zero and e.kind != "car_spatial":
            vec = np.zeros(dim)
            vec[b.slice] = 1.0
            block_rows.append((vec, 0.0))
        rank = b.length - (len(block_rows) if block_rows else null)
        prior_blocks.append(PriorBlock(b, structure, float(e.prior_precision), e.kind in INTRINSIC_KINDS, rank))
        rows.extend(block_rows)
    constraint = LinearConstraint.from_rows(dim, rows)
    incidence = design.incidence(pixels)
    return ModelStructure(
        design=design,
        incidence=incidence,
        prior_mean=prior_mean,
        prior_blocks=tuple(prior_blocks),
        constraint=constraint,
        cell_area=float(pixels.cell_area),
        likelihood=PoissonLikelihood(pixels.count.astype(np.float64), float(pixels.cell_area)),
        estimated=hyper.target.name if hyper.target is not None else None,
    )


def design_model(incidence, prior_mean, prior_precision, likelihood, cell_area=1.0,
                 constraint=None) -> ModelStructure:
    """Model from an explicit design matrix and Gaussian prior (no structure).

    Useful for generalized linear model checks and small verification cases;
    the prior precision is treated as one fixed Gaussian block.
    """
    incidence = sp.csr_matrix(incidence)
    dim = incidence.shape[1]
    prior_precision = prior_precision if isinstance(prior_precision, SparseSymmetric) \
        else SparseSymmetric.from_matrix(np.atleast_2d(prior_precision))
    b = Block("latent", "linear", 0, dim)
    effects = (EffectSpec("latent", "linear", covariate="latent"),)
    design = Design(effects, (b,), {}, {}, 0)
    return ModelStructure(
        design=design,
        incidence=incidence,
        prior_mean=np.asarray(prior_mean, dtype=np.float64).reshape(dim),
        prior_blocks=(PriorBlock(b, prior_precision, 1.0, False, dim),),
        constraint=constraint if constraint is not None else LinearConstraint.empty(dim),
        cell_area=float(cell_area),
        likelihood=likelihood,
    )


# ---------------------------------------------------------------------------
# model presets

PRESETS = ("mod1", "mod2", "mod2b", "mod3")
DEFAULT_NONLINEAR = ("Elev", "Slo", "Dist2F")


@dataclass(frozen=True)
class CovariateRoles:
    continuous: tuple = ()
    categorical: tuple = ()      # (name, n_levels) pairs
    cyclic: str | None = None
    nonlinear: tuple = DEFAULT_NONLINEAR

    @classmethod
    def infer(cls, covariate_names, spec=None):
        """Roles from a config mapping; unlisted covariates count as continuous."""
        spec = dict(spec or {})
        categorical = tuple((str(k), int(v)) for k, v in dict(spec.get("categorical", {})).items())
        cat_names = {k for k, _ in categorical}
        cyclic = spec.get("cyclic")
        if cyclic is None:
            cyclic = next((c for c in covariate_names if c.lower() in ("asp", "aspect")), None)
        continuous = spec.get("continuous")
        if continuous is None:
            continuous = [c for c in covariate_names if c not in cat_names and c != cyclic]
        nonlinear = spec.get("nonlinear")
        if nonlinear is None:
            nonlinear = [c for c in DEFAULT_NONLINEAR if c in continuous]
        unknown = (set(continuous) | cat_names | set(nonlinear) | ({cyclic} - {None})) - set(covariate_names)
        if unknown:
            raise ConfigError(f"covariate roles reference unknown columns: {sorted(unknown)}")
        if not set(nonlinear) <= set(continuous):
            raise ConfigError("nonlinear covariates must be continuous")
        return cls(tuple(continuous), categorical, cyclic, tuple(nonlinear))


def preset_effects(preset: str, roles: CovariateRoles) -> list:
    """Effect lists for the four model configurations.

    mod1: linear continuous covariates; mod2: every continuous covariate also
    gets a random walk; mod2b: random walks for the nonlinear subset only;
    mod3: mod2b plus the slope-unit CAR effect. Aspect is a cyclic random walk
    and categorical covariates get sum-to-zero coefficients in all four.
    """
    preset = preset.lower()
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}; expected one of {PRESETS}")
    effects = [EffectSpec("intercept", "intercept")]
    effects += [EffectSpec(c, "linear") for c in roles.continuous]
    if preset == "mod2":
        rw = roles.continuous
    elif preset in ("mod2b", "mod3"):
        rw = roles.nonlinear
    else:
        rw = ()
    effects += [EffectSpec(f"{c}_rw", "rw1", covariate=c) for c in rw]
    if roles.cyclic is not None:
        effects.append(EffectSpec(roles.cyclic, "rw1_cyclic"))
    effects += [EffectSpec(name, "categorical", n_levels=k) for name, k in roles.categorical]
    if preset == "mod3":
        effects.append(EffectSpec("spatial", "car_spatial"))
    return effects


def preset_hyper(preset: str, **prior) -> HyperSpec:
    if preset.lower() == "mod3":
        return HyperSpec(estimated=(EstimatedHyper("spatial", **prior),))
    return HyperSpec()
