"""File formats: pixel tables, run configuration, saved fits and result CSVs."""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
import pandas as pd

from .errors import ConfigError, DataError
from .laplace import predictor_moments
from .model import (
    CELL_AREA,
    PRESETS,
    CovariateRoles,
    Design,
    EffectSpec,
    EstimatedHyper,
    HyperSpec,
    PixelTable,
    preset_effects,
    preset_hyper,
)

REQUIRED_COLUMNS = ("pixel_id", "x", "y", "count", "unit_id")
FLOAT_FORMAT = "%.10g"
FIT_FORMAT = "coxmap-fit/1"


# ---------------------------------------------------------------------------
# pixel tables

def _numeric_column(frame, name, path):
    col = frame[name]
    if col.dtype == object:
        coerced = pd.to_numeric(col, errors="coerce")
        row = int(np.argmax(coerced.isna().to_numpy()))
        raw = col.iloc[row]
        what = "missing value" if pd.isna(raw) else f"non-numeric value {raw!r}"
        raise DataError(f"{path}: row {row + 1}: {what} in column {name!r}")
    values = col.to_numpy()
    if values.dtype.kind == "f" and np.isnan(values).any():
        row = int(np.argmax(np.isnan(values)))
        raise DataError(f"{path}: row {row + 1}: missing value in column {name!r}")
    if values.dtype.kind not in "iuf":
        raise DataError(f"{path}: column {name!r} is not numeric")
    return values


def load_pixels(path, cell_area=CELL_AREA) -> PixelTable:
    """Read a pixel CSV with header ``pixel_id,x,y,count,unit_id,<covariates>``."""
    try:
        frame = pd.read_csv(path, float_precision="round_trip", skipinitialspace=True)
    except (OSError, pd.errors.ParserError, pd.errors.EmptyDataError) as exc:
        raise DataError(f"{path}: cannot read pixel table: {exc}") from None
    frame.columns = [str(c).strip() for c in frame.columns]
    missing = [c for c in REQUIRED_COLUMNS if c not in frame.columns]
    if missing:
        raise DataError(f"{path}: missing column(s) {missing}")
    cols = {c: _numeric_column(frame, c, path) for c in frame.columns}
    for name in ("pixel_id", "count", "unit_id"):
        v = cols[name]
        bad = (v != np.floor(v)) | (v < 0)
        if bad.any():
            row = int(np.argmax(bad))
            kind = "negative" if v[row] < 0 else "non-integer"
            raise DataError(f"{path}: row {row + 1}: {kind} value {v[row]:g} in column {name!r}")
    covariates = {c: cols[c].astype(np.float64) for c in frame.columns if c not in REQUIRED_COLUMNS}
    return PixelTable(cols["pixel_id"].astype(np.int64), cols["count"].astype(np.int64),
                      cols["unit_id"].astype(np.int64), covariates, cell_area,
                      cols["x"].astype(np.float64), cols["y"].astype(np.float64))


def save_pixels(pixels: PixelTable, path):
    """Write a pixel table so that a reload reproduces every value exactly."""
    n = pixels.n_pixels
    data = {
        "pixel_id": pixels.pixel_id,
        "x": pixels.x if pixels.x is not None else np.zeros(n),
        "y": pixels.y if pixels.y is not None else np.zeros(n),
        "count": pixels.count,
        "unit_id": pixels.unit_id,
    }
    data.update(pixels.covariates)
    # repr() of a Python float is the shortest string that round-trips
    text = [list(map(repr, np.asarray(v).tolist())) for v in data.values()]
    with open(path, "w", newline="") as fh:
        fh.write(",".join(data) + "\n")
        fh.writelines(",".join(row) + "\n" for row in zip(*text))


def write_csv(frame: pd.DataFrame, path):
    frame.to_csv(path, index=False, float_format=FLOAT_FORMAT, lineterminator="\n", na_rep="")


# ---------------------------------------------------------------------------
# run configuration

_CONFIG_KEYS = {"preset", "effects", "roles", "cell_area", "hyper", "seed", "estimator", "n_folds", "simulate"}


def load_config(path) -> dict:
    if path is None:
        return {}
    try:
        with open(path) as fh:
            cfg = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read config: {exc}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from None
    if not isinstance(cfg, dict):
        raise ConfigError(f"{path}: config must be a JSON object")
    unknown = set(cfg) - _CONFIG_KEYS
    if unknown:
        raise ConfigError(f"{path}: unknown config keys {sorted(unknown)}")
    return cfg


def resolve_effects(cfg, covariate_names, preset=None):
    """Effect list from an explicit ``effects`` entry or from a preset."""
    if cfg.get("effects") is not None:
        if preset is not None:
            raise ConfigError("give either a preset or an explicit effect list, not both")
        try:
            return [EffectSpec.from_dict(e) for e in cfg["effects"]]
        except TypeError as exc:
            raise ConfigError(f"malformed effect entry: {exc}") from None
    preset = preset or cfg.get("preset")
    if preset is None:
        raise ConfigError(f"no model given; use --preset ({', '.join(PRESETS)}) or an effects list")
    roles = CovariateRoles.infer(list(covariate_names), cfg.get("roles"))
    return preset_effects(preset, roles)


def resolve_hyper(cfg, effects, preset=None) -> HyperSpec:
    spec = cfg.get("hyper")
    if spec is None:
        name = preset or cfg.get("preset")
        if name is not None:
            return preset_hyper(name)
        car = next((e.name for e in effects if e.kind == "car_spatial"), None)
        return HyperSpec(estimated=(EstimatedHyper(car),)) if car else HyperSpec()
    est = spec.get("estimated")
    estimated = ()
    if est is not None:
        try:
            estimated = (EstimatedHyper(**est),)
        except TypeError as exc:
            raise ConfigError(f"malformed hyperparameter entry: {exc}") from None
    return HyperSpec(estimated=estimated, fixed=dict(spec.get("fixed", {})))


def hyper_to_dict(hyper: HyperSpec):
    t = hyper.target
    est = None
    if t is not None:
        est = {"name": t.name, "prior_median": t.prior_median, "prior_log_sd": t.prior_log_sd,
               "bounds": list(t.bounds) if t.bounds is not None else None,
               "n_grid": t.n_grid, "grid_step_sd": t.grid_step_sd}
    return {"estimated": est, "fixed": dict(hyper.fixed)}


# ---------------------------------------------------------------------------
# saved fits

@dataclass(frozen=True, eq=False)
class SavedFit:
    """Posterior summary read back from disk; enough to predict new pixels."""

    design: Design
    cell_area: float
    latent_mean: np.ndarray
    cov_indptr: np.ndarray
    cov_indices: np.ndarray
    cov_data: np.ndarray
    grid: list
    hyper_summary: dict | None
    meta: dict

    def predictor(self, rows):
        return predictor_moments(self.latent_mean, self.cov_indptr, self.cov_indices, self.cov_data, rows)


def _floats(a):
    return [float(x) for x in np.asarray(a, dtype=np.float64)]


def fit_to_dict(result, meta=None):
    """JSON-ready posterior summary; floats keep full precision."""
    return {
        "format": FIT_FORMAT,
        "meta": dict(meta or {}),
        "design": result.design.to_dict(),
        "cell_area": result.cell_area,
        "grid": [{"theta": g.theta, "log_posterior": g.log_posterior, "weight": g.weight} for g in result.grid],
        "hyper_summary": result.hyper_summary,
        "latent_mean": _floats(result.latent_mean),
        "latent_sd": _floats(result.latent_sd),
        "covariance": {
            "indptr": [int(i) for i in result.cov_indptr],
            "indices": [int(i) for i in result.cov_indices],
            "data": _floats(result.cov_data),
        },
    }


def save_fit(result, path, meta=None):
    with open(path, "w") as fh:
        json.dump(fit_to_dict(result, meta), fh, allow_nan=False)
        fh.write("\n")


def load_fit(path) -> SavedFit:
    try:
        with open(path) as fh:
            d = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read saved fit: {exc}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from None
    if d.get("format") != FIT_FORMAT:
        raise ConfigError(f"{path}: not a saved fit (format {d.get('format')!r})")
    cov = d["covariance"]
    return SavedFit(
        design=Design.from_dict(d["design"]),
        cell_area=float(d["cell_area"]),
        latent_mean=np.asarray(d["latent_mean"], dtype=np.float64),
        cov_indptr=np.asarray(cov["indptr"], dtype=np.int64),
        cov_indices=np.asarray(cov["indices"], dtype=np.int64),
        cov_data=np.asarray(cov["data"], dtype=np.float64),
        grid=d["grid"],
        hyper_summary=d.get("hyper_summary"),
        meta=d.get("meta", {}),
    )


# ---------------------------------------------------------------------------
# result tables

_SUMMARY_COLUMNS = ["mean", "sd", "q025", "q975"]


def _summary_frame(first_name, first, m, s, lo, hi):
    return pd.DataFrame({first_name: first, "mean": m, "sd": s, "q025": lo, "q975": hi})


def effect_tables(result):
    """(fixed-effects frame, {name: random-effect frame}, spatial frame).

    Fixed effects are reported on the standardized covariate scale.
    """
    fixed_rows, random, spatial = [], {}, None
    for e in result.design.effects:
        m, s, lo, hi = result.marginal(e.name)
        if e.kind in ("intercept", "linear"):
            fixed_rows.append((e.name, m[0], s[0], lo[0], hi[0]))
        elif e.kind == "car_spatial":
            spatial = _summary_frame("unit_id", np.arange(m.size), m, s, lo, hi)
        else:
            random[e.name] = _summary_frame("level", np.arange(m.size), m, s, lo, hi)
    fixed = pd.DataFrame(fixed_rows, columns=["effect"] + _SUMMARY_COLUMNS)
    if spatial is None:
        spatial = pd.DataFrame(columns=["unit_id"] + _SUMMARY_COLUMNS)
    return fixed, random, spatial


def hyper_table(result):
    return pd.DataFrame({
        "theta": [np.nan if g.theta is None else g.theta for g in result.grid],
        "log_posterior": [g.log_posterior for g in result.grid],
        "weight": [g.weight for g in result.grid],
    })


def surface_tables(surface, k_max=3):
    probs = surface.count_probabilities(k_max)
    pixels = pd.DataFrame({"pixel_id": surface.pixel_id, "lambda": surface.pixel_lambda, "p": surface.pixel_p})
    for k in range(k_max + 1):
        pixels[f"k{k}"] = probs[:, k]
    units = pd.DataFrame({"unit_id": surface.unit_ids, "lambda": surface.unit_lambda, "p": surface.unit_p})
    return pixels, units


def roc_rows(roc, level, fold):
    return pd.DataFrame({"level": level, "fold": fold, "fpr": roc.fpr, "tpr": roc.tpr})
