"""Bayesian intensity mapping with log-Gaussian Cox processes on pixel grids.

Latent Gaussian models with CAR spatial and random-walk covariate effects,
fitted by Laplace approximation with grid integration over the spatial
precision, plus intensity prediction, areal aggregation and ROC evaluation.
"""

__version__ = "0.1.0"

from .errors import CoxmapError  # noqa: E402
from .evaluation import CvPlan, RocResult, cross_validate, make_cv_plan, roc_auc  # noqa: E402
from .gmrf import (  # noqa: E402
    AdjacencyGraph,
    CholeskyFactor,
    LinearConstraint,
    SparseSymmetric,
    build_car_precision,
    build_rw1_precision,
    factorize,
)
from .laplace import FitResult, ModeResult, find_mode, fit, joint_log_posterior, log_hyper_posterior  # noqa: E402
from .model import (  # noqa: E402
    CovariateRoles,
    EffectSpec,
    HyperSpec,
    ModelStructure,
    PixelTable,
    assemble_model,
    preset_effects,
    preset_hyper,
)
from .predict import (  # noqa: E402
    PredictionSurface,
    aggregate,
    count_probability,
    event_probability,
    pixel_intensity,
    predict_surface,
)
from .sim import GridSpec, SimTruth, quadrature_oracle, simulate_dataset, tile_graph  # noqa: E402
