"""Single table of numerical defaults shared by the library and the CLI."""

# exact-zero structural checks (hermiticity, Bochner sign, symmetry)
TOL = 1e-10

# QVE solver
QVE_TOL = 1e-12
QVE_MAX_ITER = 100_000
ETA_START = 1.0
ETA_STOP = 1e-5
ETA_RATIO = 0.5
ETA_STAR = 1e-5

# density / edge analysis
SUPPORT_THRESHOLD = 1e-3
EDGE_FIT_WINDOW = (1e-3, 1e-1)

# spectral lab
GAMMA = 0.7
DOMINATION_SLACK = 0.1  # N**0.1 allowance for stochastic domination
SCALING_TOLERANCE = 0.25
SCALING_QUANTILE = 0.9
BULK_EDGE_MARGIN = 0.2
BULK_RHO0 = 0.05
EDGE_INDEX_DEPTH = 20
MAX_EIGEN_N = 4096

# Monte Carlo
COUNT_COVARIANCE = 10_000
COUNT_INDEPENDENCE = 1_000
MC_SIGMA = 5.0

DEFAULTS = {
    "tol": QVE_TOL,
    "max_iter": QVE_MAX_ITER,
    "eta_start": ETA_START,
    "eta_stop": ETA_STOP,
    "eta_ratio": ETA_RATIO,
    "eta_star": ETA_STAR,
    "support_threshold": SUPPORT_THRESHOLD,
    "edge_fit_window": list(EDGE_FIT_WINDOW),
    "gamma": GAMMA,
    "count_covariance": COUNT_COVARIANCE,
    "count_independence": COUNT_INDEPENDENCE,
    "mc_sigma": MC_SIGMA,
    "structural_tol": TOL,
}


def eta_schedule(start: float = ETA_START, stop: float = ETA_STOP, ratio: float = ETA_RATIO) -> list[float]:
    """Geometric continuation schedule ``start, start*ratio, ...`` ending
    exactly at ``stop``."""
    etas = []
    eta = start
    while eta > stop * (1 + 1e-12):
        etas.append(eta)
        eta *= ratio
    etas.append(stop)
    return etas
