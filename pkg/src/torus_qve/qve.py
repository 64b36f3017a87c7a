"""Solver and analysis for the discrete quadratic vector equation

    -1/m_phi(z) = z + sum_theta what_a[phi, theta] m_theta(z),   Im m > 0,

plus the derived density of states, its square-root edge, and the
off-diagonal resolvent profile ``q_x(z)``.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import defaults
from .torus_kernel import CorrelationPair, FourierSymbol, fourier_symbol

log = logging.getLogger(__name__)


class ConvergenceError(RuntimeError):
    def __init__(self, msg, residual=None):
        super().__init__(msg)
        self.residual = residual


class GridError(ValueError):
    pass


class FitError(ValueError):
    pass


@dataclass
class SolverOptions:
    tol: float = defaults.QVE_TOL
    max_iter: int = defaults.QVE_MAX_ITER
    method: str = "hybrid"  # "hybrid" (fixed point + Newton polish) or "fixed_point"
    fp_warmup: int = 30
    newton_max: int = 60
    t_min: float = 1.0 / 64


def m_sc(z):
    """Semicircle Stieltjes transform, branch with ``Im m > 0`` on ``Im z > 0``."""
    z = np.asarray(z, dtype=complex)
    return (-z + np.sqrt(z - 2) * np.sqrt(z + 2)) / 2


class SymbolOperator:
    """Applies ``what_a`` to blocks of vectors; uses an eigen-factorization
    ``U V^H`` when the symbol is numerically low rank."""

    def __init__(self, what_a: np.ndarray, rank_tol: float = 1e-15):
        S = np.asarray(what_a, dtype=float)
        self.N = S.shape[0]
        self.dense = S
        Ssym = (S + S.T) / 2
        self.U = self.V = None
        if np.abs(S - Ssym).max() <= 1e-14 * max(np.abs(S).max(), 1e-300):
            w, Q = np.linalg.eigh(Ssym)
            keep = np.abs(w) > rank_tol * max(np.abs(w).max(), 1e-300)
            r = int(keep.sum())
            if 0 < r <= self.N // 4:
                self.V = Q[:, keep]
                self.U = Q[:, keep] * w[keep]
        self.rank = None if self.U is None else self.U.shape[1]

    def __matmul__(self, M):
        if self.U is not None:
            return self.U @ (self.V.T @ M)
        return self.dense @ M

    def newton_step(self, M: np.ndarray, G: np.ndarray) -> np.ndarray:
        """Solve ``(S - diag(1/m^2)) delta = -G`` column by column."""
        d = -1.0 / M**2  # diagonal of the Jacobian part
        if self.U is not None:
            # Woodbury with A = diag(d), S = U V^T
            r = self.U.shape[1]
            Ainv_b = (-G / d).T  # (k, N)
            AiU = self.U[None, :, :] / d.T[:, :, None]  # (k, N, r)
            cap = np.eye(r)[None] + np.einsum("nr,kns->krs", self.V, AiU)
            rhs = Ainv_b @ self.V  # (k, r)
            y = np.linalg.solve(cap, rhs[..., None])[..., 0]
            return (Ainv_b - np.einsum("knr,kr->kn", AiU, y)).T
        k = M.shape[1]
        J = np.broadcast_to(self.dense, (k, self.N, self.N)).astype(complex)
        idx = np.arange(self.N)
        J[:, idx, idx] += d.T
        return np.linalg.solve(J, -G.T[..., None])[..., 0].T


def _residual(op, M, z):
    return np.abs(-1.0 / M - z - (op @ M)).max(axis=0)


def _solve_block(op: SymbolOperator, z: np.ndarray, M0: np.ndarray, opts: SolverOptions):
    """Solve for every column ``j`` at spectral parameter ``z[j]``.

    Returns ``(M, residual, iterations, converged)``.
    """
    M = np.array(M0, dtype=complex)
    k = M.shape[1]
    its = np.zeros(k, dtype=int)
    t = np.ones(k)
    res = _residual(op, M, z)
    prev = res.copy()
    active = res > opts.tol
    n_fp = opts.max_iter if opts.method == "fixed_point" else opts.fp_warmup

    # damped fixed point: m <- (1 - t) m + t (-1/(z + S m)), t halves on increase
    for _ in range(n_fp):
        idx = np.nonzero(active)[0]
        if idx.size == 0:
            break
        Ma = M[:, idx]
        F = -1.0 / (z[idx] + op @ Ma)
        M[:, idx] = (1 - t[idx]) * Ma + t[idx] * F
        its[idx] += 1
        r = _residual(op, M[:, idx], z[idx])
        up = r > prev[idx]
        t[idx[up]] = np.maximum(t[idx[up]] / 2, opts.t_min)
        prev[idx] = r
        res[idx] = r
        active[idx] = r > opts.tol

    if opts.method != "fixed_point":
        for _ in range(opts.newton_max):
            idx = np.nonzero(active)[0]
            if idx.size == 0:
                break
            Ma = M[:, idx]
            za = z[idx]
            G = 1.0 / Ma + za + op @ Ma
            delta = op.newton_step(Ma, G)
            r0 = res[idx]
            lam = np.ones(idx.size)
            accepted = np.zeros(idx.size, dtype=bool)
            trial = Ma.copy()
            for _bt in range(40):
                todo = ~accepted
                if not todo.any():
                    break
                cand = Ma[:, todo] + lam[todo] * delta[:, todo]
                ok_half = np.all(cand.imag > 0, axis=0)
                rc = np.full(cand.shape[1], np.inf)
                if ok_half.any():
                    rc[ok_half] = _residual(op, cand[:, ok_half], za[todo][ok_half])
                good = ok_half & ((rc < r0[todo]) | (rc <= opts.tol))
                pos = np.nonzero(todo)[0]
                trial[:, pos[good]] = cand[:, good]
                res[idx[pos[good]]] = rc[good]
                accepted[pos[good]] = True
                lam[pos[~good]] /= 2
            # Newton failed to decrease: fall back to a damped fixed point step
            fail = ~accepted
            if fail.any():
                pos = np.nonzero(fail)[0]
                Mf = Ma[:, pos]
                F = -1.0 / (za[pos] + op @ Mf)
                trial[:, pos] = 0.5 * Mf + 0.5 * F
                res[idx[pos]] = _residual(op, trial[:, pos], za[pos])
            M[:, idx] = trial
            its[idx] += 1
            active[idx] = res[idx] > opts.tol
        # persistent stragglers: plain fixed point until the budget is spent
        budget = opts.max_iter - int(its.max(initial=0))
        if active.any() and budget > 0:
            sub = np.nonzero(active)[0]
            Ms, rs, ins, _ = _solve_block(
                op, z[sub], M[:, sub], SolverOptions(opts.tol, budget, "fixed_point", t_min=opts.t_min)
            )
            M[:, sub] = Ms
            res[sub] = rs
            its[sub] += ins
            active[sub] = rs > opts.tol

    # projection onto the half plane for numerically non-positive components
    bad = M.imag <= 0
    if bad.any():
        M = np.where(bad, M.real + 1j * np.finfo(float).tiny, M)
    return M, res, its, ~active


def _operator(symbol) -> SymbolOperator:
    if isinstance(symbol, SymbolOperator):
        return symbol
    return SymbolOperator(symbol.what_a)


def solve_qve_at(
    symbol: FourierSymbol,
    z: complex,
    opts: Optional[SolverOptions] = None,
    warm_start: Optional[np.ndarray] = None,
):
    """Solve the QVE at a single ``z`` in the upper half plane.

    Returns ``(m, residual, iterations)``; raises :class:`ConvergenceError`
    carrying the last residual when the tolerance is not reached.
    """
    opts = opts or SolverOptions()
    z = complex(z)
    if not z.imag > 0:
        raise ValueError(f"Im z must be positive, got {z}")
    op = _operator(symbol)
    N = op.N
    m0 = np.full(N, 1j) if warm_start is None else np.asarray(warm_start, dtype=complex)
    M, res, its, ok = _solve_block(op, np.array([z]), m0[:, None], opts)
    if not ok[0]:
        raise ConvergenceError(f"QVE did not converge at z={z}: residual {res[0]:.3e}", float(res[0]))
    return M[:, 0], float(res[0]), int(its[0])


@dataclass
class QveSolution:
    """Solutions on a ``(tau, eta)`` grid; arrays are indexed ``[eta, tau, phi]``."""

    N: int
    tau: np.ndarray
    etas: np.ndarray
    m: np.ndarray
    residual: np.ndarray
    iterations: np.ndarray
    converged: np.ndarray
    symbol: Optional[FourierSymbol] = field(default=None, repr=False)

    @property
    def z_grid(self) -> np.ndarray:
        return self.tau[None, :] + 1j * self.etas[:, None]

    def eta_index(self, eta: float) -> int:
        hit = np.nonzero(np.isclose(self.etas, eta, rtol=1e-9, atol=0))[0]
        if hit.size == 0:
            raise GridError(f"eta={eta} is not on the solution grid {list(self.etas)}")
        return int(hit[0])

    def at(self, z: complex) -> np.ndarray:
        i = self.eta_index(z.imag)
        j = np.nonzero(np.isclose(self.tau, z.real, rtol=0, atol=1e-12))[0]
        if j.size == 0:
            raise GridError(f"tau={z.real} is not on the solution grid")
        return self.m[i, j[0]]

    @property
    def failed(self) -> list:
        return [(float(self.tau[j]), float(self.etas[i])) for i, j in zip(*np.nonzero(~self.converged))]

    def summary(self) -> dict:
        return {
            "N": self.N,
            "n_tau": int(self.tau.size),
            "etas": [float(e) for e in self.etas],
            "max_residual": float(self.residual.max(initial=0.0)),
            "max_iterations": int(self.iterations.max(initial=0)),
            "failed_points": self.failed,
        }

    def write_csv(self, path, phi_stride: int = 1) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["tau", "eta", "phi_index", "re", "im"])
            for i, eta in enumerate(self.etas):
                for j, tau in enumerate(self.tau):
                    for p in range(0, self.N, phi_stride):
                        v = self.m[i, j, p]
                        w.writerow([repr(float(tau)), repr(float(eta)), p, repr(v.real), repr(v.imag)])


def solve_qve_grid(
    symbol: FourierSymbol,
    tau_grid: Sequence[float],
    eta_schedule: Optional[Sequence[float]] = None,
    opts: Optional[SolverOptions] = None,
) -> QveSolution:
    """Solve on ``tau_grid`` for each eta, continuing down the decreasing
    schedule with warm starts. Failed points are marked in ``converged``."""
    opts = opts or SolverOptions()
    etas = np.asarray(eta_schedule if eta_schedule is not None else defaults.eta_schedule(), dtype=float)
    if etas.size and (np.any(np.diff(etas) >= 0) or etas[-1] < 1e-6 or etas[-1] <= 0):
        raise ValueError("eta_schedule must be strictly decreasing with final eta >= 1e-6")
    tau = np.asarray(tau_grid, dtype=float)
    op = _operator(symbol)
    N = op.N
    shape = (etas.size, tau.size)
    m = np.zeros(shape + (N,), complex)
    residual = np.zeros(shape)
    iterations = np.zeros(shape, int)
    converged = np.ones(shape, bool)
    if tau.size:
        M = np.full((N, tau.size), 1j)
        for i, eta in enumerate(etas):
            z = tau + 1j * eta
            M, res, its, ok = _solve_block(op, z, M, opts)
            m[i] = M.T
            residual[i] = res
            iterations[i] = its
            converged[i] = ok
            if not ok.all():
                log.warning("%d points failed to converge at eta=%g", int((~ok).sum()), eta)
    return QveSolution(N, tau, etas, m, residual, iterations, converged, symbol if isinstance(symbol, FourierSymbol) else None)


# --------------------------------------------------------------------------
# density and edge
# --------------------------------------------------------------------------


@dataclass
class SpectralDensity:
    tau: np.ndarray
    rho: np.ndarray
    eta_star: float
    beta: Optional[float] = None
    C0: Optional[float] = None
    edge_exponent: Optional[float] = None
    edge_window: tuple = defaults.EDGE_FIT_WINDOW
    mass: float = float("nan")
    evenness_error: float = float("nan")

    def __call__(self, lam):
        return np.interp(lam, self.tau, self.rho, left=0.0, right=0.0)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["tau", "rho"])
            for t, r in zip(self.tau, self.rho):
                w.writerow([repr(float(t)), repr(float(r))])

    def summary(self) -> dict:
        return {
            "eta_star": self.eta_star,
            "beta": self.beta,
            "C0": self.C0,
            "edge_exponent": self.edge_exponent,
            "edge_window": list(self.edge_window),
            "mass": self.mass,
            "evenness_error": self.evenness_error,
        }


def density(solution: QveSolution, eta_star: float = defaults.ETA_STAR) -> SpectralDensity:
    """Averaged imaginary part ``(pi N)^-1 sum_phi Im m_phi(tau + i eta_star)``."""
    i = solution.eta_index(eta_star)
    rho = solution.m[i].imag.mean(axis=1) / np.pi
    rho = np.clip(rho, 0.0, None)
    tau = solution.tau
    mass = float(np.trapezoid(rho, tau)) if tau.size > 1 else float("nan")
    even = float("nan")
    if tau.size > 1 and np.allclose(tau, -tau[::-1], atol=1e-12):
        even = float(np.abs(rho - rho[::-1]).max())
    return SpectralDensity(tau, rho, eta_star, mass=mass, evenness_error=even)


def support_and_edge(
    dens: SpectralDensity,
    threshold: float = defaults.SUPPORT_THRESHOLD,
    fit_window: tuple = defaults.EDGE_FIT_WINDOW,
):
    """Support endpoint and square-root edge fit.

    The outermost grid points with ``rho >= threshold`` locate each edge; the
    endpoint is then refined by extrapolating ``rho^2`` (linear in the distance
    to the edge under a square-root law) to zero through the ``n_extrap``
    outermost points, never moving more than one grid step. Both edges are
    averaged. The edge law ``rho(beta - omega) ~ C0 omega^p`` is fitted in
    log-log coordinates over ``omega`` in ``fit_window``. Returns
    ``(beta, C0, p)`` and stores them on ``dens``.
    """
    tau, rho = dens.tau, dens.rho
    above = np.nonzero(rho >= threshold)[0]
    if above.size == 0:
        raise FitError("density never reaches the support threshold")

    def crossing(j_edge, step, n_extrap=3):
        js = j_edge - step * np.arange(n_extrap)
        js = js[(js >= 0) & (js < tau.size)]
        if js.size < 2 or np.any(rho[js] < threshold):
            return tau[j_edge]
        slope, icpt = np.polyfit(tau[js], rho[js] ** 2, 1)
        if slope == 0:
            return tau[j_edge]
        root = -icpt / slope
        h = abs(tau[min(j_edge + 1, tau.size - 1)] - tau[j_edge]) or abs(tau[1] - tau[0])
        if step * (root - tau[j_edge]) < 0:
            return tau[j_edge]
        return float(np.clip(root, tau[j_edge] - h, tau[j_edge] + h))

    right = crossing(above[-1], +1)
    left = crossing(above[0], -1)
    beta = 0.5 * (right - left)
    center = 0.5 * (right + left)

    lo, hi = fit_window
    om_r = (center + beta) - tau
    om_l = tau - (center - beta)
    sel_r = (om_r >= lo) & (om_r <= hi) & (rho > 0)
    sel_l = (om_l >= lo) & (om_l <= hi) & (rho > 0)
    om = np.concatenate([om_r[sel_r], om_l[sel_l]])
    vals = np.concatenate([rho[sel_r], rho[sel_l]])
    if om.size < 5:
        raise FitError(f"only {om.size} points in the edge window {fit_window}")
    slope, intercept = np.polyfit(np.log(om), np.log(vals), 1)
    dens.beta, dens.C0, dens.edge_exponent = float(beta), float(np.exp(intercept)), float(slope)
    dens.edge_window = tuple(fit_window)
    return dens.beta, dens.C0, dens.edge_exponent


# --------------------------------------------------------------------------
# off-diagonal profile
# --------------------------------------------------------------------------


def symmetric_offsets(N: int) -> np.ndarray:
    k = np.arange(N)
    return np.where(k <= N // 2, k, k - N)


@dataclass
class QProfile:
    N: int
    z: list
    x: np.ndarray  # symmetric offsets, aligned with columns of q
    q: np.ndarray  # shape (len(z), N), q[:, x mod N]
    decay_fit: Optional[dict] = None

    def at(self, k: int, x) -> np.ndarray:
        return self.q[k, np.mod(x, self.N)]

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["tau", "eta", "x", "re", "im"])
            for k, z in enumerate(self.z):
                for x in np.sort(self.x):
                    v = self.q[k, x % self.N]
                    w.writerow([repr(z.real), repr(z.imag), int(x), repr(v.real), repr(v.imag)])


def q_from_m(m: np.ndarray) -> np.ndarray:
    """``q_x = N^-1 sum_phi exp(-i 2 pi x phi) m_phi`` for ``x = 0..N-1``."""
    m = np.asarray(m)
    return np.fft.fft(m, axis=-1) / m.shape[-1]


def m_from_q(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q)
    return np.fft.ifft(q, axis=-1) * q.shape[-1]


def q_profile(solution: QveSolution, z_list: Sequence[complex]) -> QProfile:
    zs = [complex(z) for z in z_list]
    ms = np.array([solution.at(z) for z in zs]) if zs else np.zeros((0, solution.N), complex)
    return QProfile(solution.N, zs, symmetric_offsets(solution.N), q_from_m(ms))


def q_profile_direct(symbol: FourierSymbol, z_list, opts: Optional[SolverOptions] = None) -> QProfile:
    """Profile at arbitrary ``z`` by solving the QVE at each point (continuing
    down from ``Im z = 1`` for small imaginary parts)."""
    op = _operator(symbol)
    zs = [complex(z) for z in z_list]
    rows = [solve_with_continuation(op, z, opts)[0] for z in zs]
    ms = np.array(rows) if rows else np.zeros((0, op.N), complex)
    return QProfile(op.N, zs, symmetric_offsets(op.N), q_from_m(ms))


def solve_with_continuation(symbol, z: complex, opts: Optional[SolverOptions] = None):
    """Solve at ``z`` by continuing from ``Im z' = max(1, Im z)`` with ratio
    one half."""
    op = _operator(symbol)
    z = complex(z)
    etas = [e for e in defaults.eta_schedule(max(1.0, z.imag), z.imag, 0.5)]
    m = None
    res = its = None
    for eta in etas:
        m, res, its = solve_qve_at(op, z.real + 1j * eta, opts, warm_start=m)
    return m, res, its


def q_decay_fit(
    profile: QProfile,
    kind: str = "exponential",
    index: int = 0,
    floor: Optional[float] = None,
    x_range: Optional[tuple] = None,
) -> dict:
    """Fit the decay of ``|q_x|`` in ``|x|``.

    ``exponential`` regresses ``log|q_x|`` on ``|x|`` (rate ``nu' = -slope``,
    ``lambda = exp(slope)``); ``power`` regresses on ``log|x|``. Points with
    ``|q_x| < floor`` are dropped; the default floor is ``1e-13 |q_0|``
    Offsets run over ``1 <= |x| <= N/2`` unless ``x_range`` narrows them; the two
    signs are averaged.
    """
    N = profile.N
    q = np.abs(profile.q[index])
    lo, hi = x_range if x_range else (1, N // 2)
    xs = np.arange(max(1, lo), min(hi, N // 2) + 1)
    vals = 0.5 * (q[xs % N] + q[(-xs) % N])
    floor = 1e-13 * q[0] if floor is None else floor
    keep = vals >= floor
    if keep.sum() < 2:
        raise FitError("all offsets fall below the resolution floor")
    x, y = xs[keep].astype(float), np.log(vals[keep])
    if kind == "exponential":
        X = x
    elif kind == "power":
        X = np.log(x)
    else:
        raise ValueError("kind must be 'exponential' or 'power'")
    slope, intercept = np.polyfit(X, y, 1)
    pred = slope * X + intercept
    ss_res = float(np.sum((y - pred) ** 2))
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0
    fit = {
        "kind": kind,
        "amplitude": float(np.exp(intercept)),
        "r2": r2,
        "n_points": int(keep.sum()),
        "x_max": int(x.max()),
    }
    if kind == "exponential":
        fit.update(rate=float(-slope), ratio=float(np.exp(slope)))
    else:
        fit.update(exponent=float(-slope))
    profile.decay_fit = fit
    return fit


# --------------------------------------------------------------------------
# grid refinement
# --------------------------------------------------------------------------


def refinement_consistency(
    pair: CorrelationPair,
    z_list: Sequence[complex],
    sizes: Optional[Sequence[int]] = None,
    opts: Optional[SolverOptions] = None,
) -> dict:
    """Sup distance between the size-``N`` and size-``2N`` solutions on the
    common dual points ``p/N = 2p/(2N)``.

    Returns ``{N: [distance per z]}`` for every ``N`` in ``sizes`` (default the
    pair's own size).
    """
    sizes = list(sizes) if sizes else [pair.N]
    out = {}
    cache = {}

    def solve(n):
        if n not in cache:
            p = pair if n == pair.N else pair.regenerate(n)
            op = SymbolOperator(fourier_symbol(p).what_a)
            cache[n] = [solve_with_continuation(op, z, opts)[0] for z in z_list]
        return cache[n]

    for n in sizes:
        coarse, fine = solve(n), solve(2 * n)
        out[n] = [float(np.abs(c - f[::2]).max()) for c, f in zip(coarse, fine)]
    return out


def fit_power(ns, values, floor: float = 1e-300):
    """Slope of ``log value`` against ``log n`` (values floored to stay finite)."""
    ns = np.asarray(ns, dtype=float)
    v = np.maximum(np.asarray(values, dtype=float), floor)
    slope, intercept = np.polyfit(np.log(ns), np.log(v), 1)
    return float(slope), float(intercept)


# --------------------------------------------------------------------------
# scalar reduction for factorized kernels (independent oracle)
# --------------------------------------------------------------------------


def factorized_scalar_solution(f: np.ndarray, z: complex, tol: float = 1e-14, max_iter: int = 200):
    """Solve the rank-one reduction ``what_a = f f^T / N`` via its scalar
    unknown ``mu = N^-1 sum_theta f_theta m_theta``:

        mu = -N^-1 sum_theta f_theta / (z + f_theta mu),

    with ``m_phi = -1/(z + f_phi mu)``. Uses a secant iteration on the scalar
    equation started from the large-|z| asymptotics, independent of the vector
    solver.
    """
    f = np.asarray(f, dtype=float)
    z = complex(z)

    # continuation from large imaginary part keeps the Herglotz branch
    mu = -np.mean(f) / (z.real + 1j * max(z.imag, 10.0))
    for eta in defaults.eta_schedule(max(z.imag, 10.0), z.imag, 0.5):
        zz = z.real + 1j * eta

        def g(mu, zz=zz):
            return mu + np.mean(f / (zz + f * mu))

        a, b = mu, mu * (1 + 1e-3) + 1e-6j
        ga, gb = g(a), g(b)
        for _ in range(max_iter):
            if gb == ga:
                break
            c = b - gb * (b - a) / (gb - ga)
            if c.imag <= 0:
                c = complex(c.real, abs(b.imag) / 2)
            a, ga, b, gb = b, gb, c, g(c)
            if abs(gb) < tol:
                break
        mu = b
    m = -1.0 / (z + f * mu)
    return m, mu
