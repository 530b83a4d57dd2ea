"""Command-line entry point: ``coxmap {fit,predict,cv,simulate}``."""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import math
import os
import platform
import sys
import time
import warnings
from pathlib import Path

import numpy as np
import pandas as pd

from . import __version__
from .errors import CoxmapError, ConfigError, DegenerateLabelsError, OutputExistsError
from .evaluation import LEVELS, cross_validate, make_cv_plan, roc_auc, unit_scores
from .gmrf import AdjacencyGraph, load_adjacency, save_adjacency
from .io import (
    effect_tables,
    hyper_table,
    hyper_to_dict,
    load_config,
    load_fit,
    load_pixels,
    resolve_effects,
    resolve_hyper,
    roc_rows,
    save_fit,
    save_pixels,
    surface_tables,
    write_csv,
)
from .laplace import fit
from .model import CELL_AREA, assemble_model
from .predict import ESTIMATORS, predict_surface, surface_from_moments
from .sim import GridSpec, simulate_dataset, tile_graph

log = logging.getLogger("coxmap")

# baseline of 0.01 expected events per pixel at C = 225, so some units stay empty
DEFAULT_SIMULATION = {"nx": 60, "ny": 60, "tile": 5, "theta": 2.7,
                      "fixed": {"intercept": math.log(0.01 / CELL_AREA)}}
ROC_COLUMNS = ["level", "fold", "fpr", "tpr"]
DEFAULT_SIM_ROLES = {"continuous": ["z1", "z2", "z3"], "nonlinear": ["z3"]}


class Outputs:
    """Output directory that refuses to overwrite files unless forced."""

    def __init__(self, root, force=False):
        self.root = Path(root)
        self.force = force
        self.written = []

    def claim(self, names):
        clash = [n for n in names if (self.root / n).exists()]
        if clash and not self.force:
            raise OutputExistsError(f"{self.root / clash[0]} exists; use --force to overwrite")
        self.root.mkdir(parents=True, exist_ok=True)

    def path(self, name):
        self.written.append(name)
        return self.root / name

    def csv(self, frame, name):
        write_csv(frame, self.path(name))

    def json(self, obj, name):
        with open(self.path(name), "w") as fh:
            json.dump(obj, fh, indent=2, sort_keys=True, allow_nan=False)
            fh.write("\n")


def _file_digest(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def config_hash(semantic: dict) -> str:
    text = json.dumps(semantic, sort_keys=True, separators=(",", ":"), allow_nan=False)
    return hashlib.sha256(text.encode()).hexdigest()


def _versions():
    import numba
    import scipy
    return {"coxmap": __version__, "python": platform.python_version(), "numpy": np.__version__,
            "scipy": scipy.__version__, "pandas": pd.__version__, "numba": numba.__version__}


def _write_manifest(out: Outputs, args, semantic, started):
    manifest = {
        "command": args.command,
        "config_hash": config_hash(semantic),
        "config": semantic,
        "seed": args.seed,
        "threads": args.threads,
        "versions": _versions(),
        "wall_time_s": round(time.perf_counter() - started, 3),
        "outputs": sorted(out.written),
    }
    out.json(manifest, "manifest.json")


# ---------------------------------------------------------------------------
# shared setup

def _inputs(args, cfg):
    if args.pixels is None:
        raise ConfigError("--pixels is required")
    pixels = load_pixels(args.pixels, float(cfg.get("cell_area", CELL_AREA)))
    log.info("loaded %d pixels with covariates %s", pixels.n_pixels, ", ".join(pixels.covariate_names))
    graph = None
    if args.adjacency is not None:
        graph = load_adjacency(args.adjacency)
        if pixels.n_units > graph.n_units:
            graph = AdjacencyGraph.from_edges(pixels.n_units, graph.edges())
    effects = resolve_effects(cfg, pixels.covariate_names, args.preset)
    if any(e.kind == "car_spatial" for e in effects) and graph is None:
        raise ConfigError("the model has a spatial effect; --adjacency is required")
    hyper = resolve_hyper(cfg, effects, args.preset)
    return pixels, graph, effects, hyper


def _semantic(args, cfg, effects, hyper, extra=None):
    d = {
        "command": args.command,
        "effects": [e.to_dict() for e in effects],
        "hyper": hyper_to_dict(hyper),
        "cell_area": float(cfg.get("cell_area", CELL_AREA)),
        "estimator": args.estimator,
        "seed": args.seed,
        "inputs": {k: _file_digest(getattr(args, k)) for k in ("pixels", "adjacency", "fit")
                   if getattr(args, k, None) is not None},
    }
    d.update(extra or {})
    return d


def _model_name(args, cfg):
    return args.preset or cfg.get("preset") or "custom"


def _fit_outputs(effects):
    names = ["hyperparameter.csv", "fixed_effects.csv", "spatial_effect.csv", "fit.json"]
    names += [f"random_effect_{e.name}.csv" for e in effects
              if e.kind not in ("intercept", "linear", "car_spatial")]
    return names


def _in_sample(result, pixels, estimator):
    surface = surface_from_moments(pixels, result.predictor_mean, result.predictor_var,
                                   result.cell_area, estimator, result.design.n_units)
    scores = {
        "pixel": (surface.pixel_lambda, pixels.count > 0),
        "unit": unit_scores(surface.pixel_lambda, pixels.count, pixels.unit_id)[1:],
    }
    rocs = {}
    for level in LEVELS:
        try:
            rocs[level] = roc_auc(*scores[level])
        except DegenerateLabelsError:
            warnings.warn(f"in-sample {level} ROC skipped: single-class labels", stacklevel=2)
            rocs[level] = None
    return surface, rocs


def _write_fit(out: Outputs, result, meta):
    fixed, random, spatial = effect_tables(result)
    out.csv(hyper_table(result), "hyperparameter.csv")
    out.csv(fixed, "fixed_effects.csv")
    for name, frame in random.items():
        out.csv(frame, f"random_effect_{name}.csv")
    out.csv(spatial, "spatial_effect.csv")
    save_fit(result, out.path("fit.json"), meta)


def _write_surface(out: Outputs, surface):
    px, un = surface_tables(surface)
    out.csv(px, "intensity_pixels.csv")
    out.csv(un, "intensity_units.csv")


# ---------------------------------------------------------------------------
# subcommands

def cmd_fit(args, cfg, started):
    pixels, graph, effects, hyper = _inputs(args, cfg)
    out = Outputs(args.out, args.force)
    out.claim(_fit_outputs(effects) + ["intensity_pixels.csv", "intensity_units.csv", "roc.csv",
                                       "auc_summary.csv", "manifest.json"])
    model = assemble_model(pixels, graph, effects, hyper)
    result = fit(model, hyper, threads=args.threads)
    if result.hyper_summary is not None:
        s = result.hyper_summary
        log.info("precision of %s: mean %.4g, 95%% interval [%.4g, %.4g]", model.estimated, s["mean"],
                 s["q025"], s["q975"])
    surface, rocs = _in_sample(result, pixels, args.estimator)
    semantic = _semantic(args, cfg, effects, hyper)
    _write_fit(out, result, {"model": _model_name(args, cfg), "config_hash": config_hash(semantic)})
    _write_surface(out, surface)
    roc = [roc_rows(r, level, "in_sample") for level, r in rocs.items() if r is not None]
    out.csv(pd.concat(roc, ignore_index=True) if roc else pd.DataFrame(columns=ROC_COLUMNS),
            "roc.csv")
    out.csv(pd.DataFrame({
        "model": _model_name(args, cfg),
        "level": list(LEVELS),
        "in_sample_auc": [np.nan if rocs[lv] is None else rocs[lv].auc for lv in LEVELS],
        "cv_auc": np.nan,
        "cv_auc_fold_mean": np.nan,
    }), "auc_summary.csv")
    _write_manifest(out, args, semantic, started)


def cmd_predict(args, cfg, started):
    if args.fit is None:
        raise ConfigError("--fit is required for predict")
    if args.pixels is None:
        raise ConfigError("--pixels is required")
    saved = load_fit(args.fit)
    pixels = load_pixels(args.pixels, saved.cell_area)
    out = Outputs(args.out, args.force)
    out.claim(["intensity_pixels.csv", "intensity_units.csv", "manifest.json"])
    surface = predict_surface(saved, pixels, args.estimator)
    _write_surface(out, surface)
    semantic = {"command": "predict", "effects": [e.to_dict() for e in saved.design.effects],
                "estimator": args.estimator,
                "inputs": {"pixels": _file_digest(args.pixels), "fit": _file_digest(args.fit)}}
    _write_manifest(out, args, semantic, started)


def cmd_cv(args, cfg, started):
    pixels, graph, effects, hyper = _inputs(args, cfg)
    n_folds = int(cfg.get("n_folds", 4))
    out = Outputs(args.out, args.force)
    out.claim(["roc.csv", "auc_summary.csv", "cv_pixels.csv", "cv_units.csv", "manifest.json"])
    plan = make_cv_plan(np.unique(pixels.unit_id), args.seed, n_folds)
    cv = cross_validate(pixels, graph, effects, hyper, plan, args.estimator, threads=args.threads)
    model = assemble_model(pixels, graph, effects, hyper)
    _, rocs = _in_sample(fit(model, hyper, threads=args.threads), pixels, args.estimator)

    frames = []
    for level in LEVELS:
        if cv.pooled[level] is not None:
            frames.append(roc_rows(cv.pooled[level], level, "pooled"))
        frames += [roc_rows(r, level, str(k)) for k, r in enumerate(cv.per_fold[level]) if r is not None]
    out.csv(pd.concat(frames, ignore_index=True) if frames else pd.DataFrame(columns=ROC_COLUMNS), "roc.csv")
    out.csv(pd.DataFrame({
        "model": _model_name(args, cfg),
        "level": list(LEVELS),
        "in_sample_auc": [np.nan if rocs[lv] is None else rocs[lv].auc for lv in LEVELS],
        "cv_auc": [cv.auc(lv) for lv in LEVELS],
        "cv_auc_fold_mean": [cv.fold_mean_auc(lv) for lv in LEVELS],
    }), "auc_summary.csv")
    out.csv(pd.concat([pd.DataFrame({"pixel_id": f.pixel_id, "fold": f.fold, "lambda": f.pixel_score,
                                     "event": f.pixel_label.astype(int)}) for f in cv.folds],
                      ignore_index=True), "cv_pixels.csv")
    out.csv(pd.concat([pd.DataFrame({"unit_id": f.unit_id, "fold": f.fold, "lambda": f.unit_score,
                                     "event": f.unit_label.astype(int)}) for f in cv.folds],
                      ignore_index=True), "cv_units.csv")
    _write_manifest(out, args, _semantic(args, cfg, effects, hyper, {"n_folds": n_folds}), started)


def cmd_simulate(args, cfg, started):
    sim_cfg = dict(DEFAULT_SIMULATION)
    sim_cfg.update(cfg.get("simulate", {}))
    unknown = set(sim_cfg) - {"nx", "ny", "tile", "theta", "fixed"}
    if unknown:
        raise ConfigError(f"unknown simulate keys {sorted(unknown)}")
    grid = GridSpec(int(sim_cfg["nx"]), int(sim_cfg["ny"]), int(sim_cfg["tile"]),
                    float(cfg.get("cell_area", CELL_AREA)))
    if cfg.get("effects") is None:
        roles = cfg.get("roles", DEFAULT_SIM_ROLES)
        names = list(roles.get("continuous", [])) + list(dict(roles.get("categorical", {})))
        names += [roles["cyclic"]] if roles.get("cyclic") else []
        cfg = dict(cfg, roles=roles)
        effects = resolve_effects(cfg, names, args.preset or cfg.get("preset", "mod3"))
    else:
        effects = resolve_effects(cfg, [], args.preset)
    out = Outputs(args.out, args.force)
    out.claim(["pixels.csv", "adjacency.csv", "truth.json", "manifest.json"])
    graph = tile_graph(grid)
    has_car = any(e.kind == "car_spatial" for e in effects)
    theta = float(sim_cfg["theta"]) if has_car and sim_cfg.get("theta") is not None else None
    pixels, truth = simulate_dataset(grid, graph, effects, theta=theta, seed=args.seed, fixed=sim_cfg["fixed"])
    save_pixels(pixels, out.path("pixels.csv"))
    save_adjacency(graph, out.path("adjacency.csv"))
    out.json(dict(truth.to_dict(), effects=[e.to_dict() for e in effects]), "truth.json")
    semantic = {"command": "simulate", "effects": [e.to_dict() for e in effects], "simulate": sim_cfg,
                "cell_area": grid.cell_area, "seed": args.seed}
    _write_manifest(out, args, semantic, started)


COMMANDS = {"fit": cmd_fit, "predict": cmd_predict, "cv": cmd_cv, "simulate": cmd_simulate}


def build_parser():
    parser = argparse.ArgumentParser(prog="coxmap", description="Log-Gaussian Cox process intensity mapping.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "fit": "fit a model; write posterior summaries, intensity maps and in-sample ROC",
        "predict": "intensity maps for new pixels from a saved fit",
        "cv": "cross-validation blocked by areal unit",
        "simulate": "simulate a synthetic dataset",
    }
    for name, text in helps.items():
        p = sub.add_parser(name, help=text)
        p.add_argument("--pixels", help="pixel CSV (pixel_id,x,y,count,unit_id,<covariates>)")
        p.add_argument("--adjacency", help="adjacency CSV (unit_id,neighbor_id)")
        p.add_argument("--config", help="JSON configuration")
        p.add_argument("--preset", choices=("mod1", "mod2", "mod2b", "mod3"), help="model configuration")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--threads", type=int, default=None, help="worker threads (default: all cores)")
        p.add_argument("--estimator", choices=ESTIMATORS, default=None,
                       help="intensity estimator (default: lognormal)")
        p.add_argument("--force", action="store_true", help="overwrite existing outputs")
        if name == "predict":
            p.add_argument("--fit", help="fit.json written by the fit subcommand")
    return parser


def _setup_logging():
    level = os.environ.get("COXMAP_LOG", "WARNING").upper()
    if not isinstance(logging.getLevelName(level), int):
        level = "WARNING"
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    logging.captureWarnings(True)
    warnings.formatwarning = lambda message, category, *rest, **kw: f"{category.__name__}: {message}"


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    _setup_logging()
    started = time.perf_counter()
    try:
        cfg = load_config(args.config)
        if args.seed is None:
            args.seed = int(cfg.get("seed", 0))
        if args.estimator is None:
            args.estimator = cfg.get("estimator", "lognormal")
            if args.estimator not in ESTIMATORS:
                raise ConfigError(f"unknown estimator {args.estimator!r}")
        if args.threads is None:
            args.threads = os.cpu_count() or 1
        if args.threads < 1:
            raise ConfigError("--threads must be at least 1")
        COMMANDS[args.command](args, cfg, started)
    except CoxmapError as exc:
        print(f"error {exc.code}: {_one_line(exc)}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error IO_ERROR: {_one_line(exc)}", file=sys.stderr)
        return 2
    except ValueError as exc:
        print(f"error INVALID_INPUT: {_one_line(exc)}", file=sys.stderr)
        return 2
    return 0


def _one_line(exc):
    return " ".join(str(exc).split())


if __name__ == "__main__":
    sys.exit(main())
