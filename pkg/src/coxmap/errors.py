"""Exception types. Every error carries a short machine-readable ``code``."""


class CoxmapError(Exception):
    code = "COXMAP_ERROR"


class DataError(CoxmapError, ValueError):
    code = "DATA_ERROR"


class GraphError(CoxmapError, ValueError):
    code = "GRAPH_ERROR"


class ConfigError(CoxmapError, ValueError):
    code = "CONFIG_ERROR"


class NotPositiveDefiniteError(CoxmapError, ArithmeticError):
    """Raised when a Cholesky pivot is not strictly positive.

    ``pivot`` is the position in the factorization order, ``index`` the
    corresponding row of the input matrix.
    """

    code = "NOT_POSITIVE_DEFINITE"

    def __init__(self, pivot, index, value):
        self.pivot = int(pivot)
        self.index = int(index)
        self.value = float(value)
        super().__init__(
            f"non-positive pivot {self.value:.3g} at step {self.pivot} "
            f"(matrix row {self.index})"
        )


class ConstraintError(CoxmapError, ValueError):
    code = "REDUNDANT_CONSTRAINTS"


class DivergenceError(CoxmapError, ArithmeticError):
    code = "DIVERGING_PREDICTOR"


class ConvergenceError(CoxmapError, RuntimeError):
    code = "NO_CONVERGENCE"

    def __init__(self, message, trace=()):
        self.trace = list(trace)
        super().__init__(message)


class DegenerateLabelsError(CoxmapError, ValueError):
    code = "DEGENERATE_LABELS"


class OutputExistsError(CoxmapError, FileExistsError):
    code = "OUTPUT_EXISTS"
