"""Configurable values exposed to user as environment variables"""
import logging
import os

# Changes the log level
LOG_LEVEL: str = os.getenv("LOG_LEVEL", "ERROR")

logging.basicConfig(level=LOG_LEVEL)

# Enables per-iteration solver logs.  It is recommended to also use ``LOG_LEVEL=DEBUG``.
VERBOSE_LOGS: bool = False if os.getenv("VERBOSE_LOGS", "FALSE") == "FALSE" else True

# Shift added to the elliptic coefficient matrix by the fixed-point linearisation
MU_FIXED_POINT: float = float(os.getenv("MU_FIXED_POINT", "1e-4"))

# Shift added to the elliptic coefficient matrix by the Newton linearisation
MU_NEWTON: float = float(os.getenv("MU_NEWTON", "1e-5"))

# Initial Jacobian determinant regularisation of the weak-form scheme
EPS_WEAK: float = float(os.getenv("EPS_WEAK", "1e-4"))

# Smallest regularisation reached by the epsilon continuation (reduced by a factor 10 per stage)
EPS_MIN: float = float(os.getenv("EPS_MIN", "1e-8"))

# Gradient jump penalty of the C0-DG scheme
ETA_DG: float = float(os.getenv("ETA_DG", "10"))

# Weak tangential boundary condition penalty of the rotation-free scheme
ETA_ROT: float = float(os.getenv("ETA_ROT", "1e3"))

# Cordes-type safety factor of the rotation-free curl stabilisation, must lie in (0, 1)
ALPHA_ROT: float = float(os.getenv("ALPHA_ROT", "0.9"))

# Relative update norm at which the nonlinear drivers stop
REL_TOL: float = float(os.getenv("REL_TOL", "1e-10"))

# Absolute residual norm at which the nonlinear drivers stop
ABS_TOL: float = float(os.getenv("ABS_TOL", "1e-12"))

# Iteration cap of the nonlinear drivers
MAX_ITER: int = int(os.getenv("MAX_ITER", "50"))

# Backtracking line search: step reduction factor, Armijo constant and smallest admissible step
LINE_SEARCH_FACTOR: float = float(os.getenv("LINE_SEARCH_FACTOR", "0.5"))
ARMIJO_CONSTANT: float = float(os.getenv("ARMIJO_CONSTANT", "1e-4"))
MIN_STEP: float = float(os.getenv("MIN_STEP", str(2.0 ** -20)))

# Parametric offset used when evaluating one-sided limits at patch vertices
VERTEX_OFFSET: float = float(os.getenv("VERTEX_OFFSET", "1e-10"))

# Lower clamp applied to the boundary layer steepness after its fit
LAYER_D_MIN: float = float(os.getenv("LAYER_D_MIN", "1e-3"))

# Dyadic refinements of the boundary patch basis on which the transverse harmonic function is solved
ORTH_REFINE: int = int(os.getenv("ORTH_REFINE", "2"))

# Smallest slope of the fitted boundary reparameterisations, must lie in [0, 1)
ORTH_MIN_SLOPE: float = float(os.getenv("ORTH_MIN_SLOPE", "0.05"))

# Number of worker threads used by quadrature caching and assembly
THREADS: int = int(os.getenv("THREADS", "1"))

# Determines if basis evaluations are memoised per (space, quadrature order)
ENABLE_EVAL_CACHE: bool = True if os.getenv(
    "ENABLE_EVAL_CACHE", "TRUE"
).upper() == "TRUE" else False

# Determines if the vertex-blend limit matrices are averaged (``TRUE``) or summed (``FALSE``) over adjacent patches
USE_VERTEX_MEAN: bool = False if os.getenv(
    "USE_VERTEX_MEAN", "TRUE"
).upper() == "FALSE" else True
