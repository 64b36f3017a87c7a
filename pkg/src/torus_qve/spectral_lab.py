"""Spectral diagnostics for sampled ensembles: resolvents, local-law errors,
scaling fits, bulk gap statistics, and eigenvector delocalization."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from typing import Iterable, Optional, Sequence, Union

import numpy as np
from scipy import linalg, stats

from . import defaults
from .qve import QProfile, QveSolution, SpectralDensity, q_profile
from .torus_kernel import FourierSymbol


class NumericalError(RuntimeError):
    pass


class InputError(ValueError):
    pass


class FitError(ValueError):
    pass


class ParameterError(ValueError):
    pass


# --------------------------------------------------------------------------
# resolvent and spectra
# --------------------------------------------------------------------------


def resolvent(H: np.ndarray, z: complex, check_tol: float = 1e-10) -> np.ndarray:
    """``(H - z)^-1`` by LU solve, with the residual re-checked."""
    z = complex(z)
    if not z.imag > 0:
        raise ValueError("resolvent needs Im z > 0")
    H = np.asarray(H)
    N = H.shape[0]
    A = H - z * np.eye(N)
    try:
        G = linalg.solve(A, np.eye(N, dtype=complex), check_finite=True)
    except (linalg.LinAlgError, ValueError) as exc:
        raise NumericalError(f"solve failed (condition estimate {np.linalg.cond(A):.3e})") from exc
    res = float(np.abs(A @ G - np.eye(N)).max())
    if not res <= check_tol:
        raise NumericalError(f"resolvent residual {res:.3e} exceeds {check_tol:.1e} (condition estimate {np.linalg.cond(A):.3e})")
    return G


def eigh(H: np.ndarray, vectors: bool = True):
    H = np.asarray(H)
    if H.shape[0] > defaults.MAX_EIGEN_N:
        raise ParameterError(f"N = {H.shape[0]} exceeds the eigensolver cap {defaults.MAX_EIGEN_N}")
    if vectors:
        return np.linalg.eigh(H)
    return np.linalg.eigvalsh(H)


def resolvent_from_eigh(lam: np.ndarray, U: np.ndarray, z: complex) -> np.ndarray:
    return (U / (lam - z)) @ U.conj().T


def stieltjes_from_eigenvalues(lam: np.ndarray, z: complex) -> complex:
    return complex(np.mean(1.0 / (lam - z)))


def fourier_conjugate(H: np.ndarray) -> np.ndarray:
    """``F H F*`` with ``F_{p,y} = N^-1/2 e^{i2pi py/N}``."""
    return np.fft.ifft(np.fft.fft(H, axis=-1), axis=-2)


def isospectrality_error(H: np.ndarray) -> float:
    """Largest eigenvalue difference between ``H`` and ``F H F*``."""
    Hh = fourier_conjugate(H)
    Hh = (Hh + Hh.conj().T) / 2
    return float(np.abs(np.linalg.eigvalsh(H) - np.linalg.eigvalsh(Hh)).max())


def histogram_deviation(eigenvalues: np.ndarray, dens: SpectralDensity, bins: int = 80, bulk_margin: float = defaults.BULK_EDGE_MARGIN) -> float:
    """Sup distance between the eigenvalue histogram and ``dens`` on bins
    inside ``[-beta + margin, beta - margin]``."""
    lam = np.ravel(eigenvalues)
    beta = dens.beta if dens.beta is not None else float(np.abs(lam).max())
    lo, hi = -beta, beta
    hist, edges = np.histogram(lam, bins=bins, range=(lo, hi))
    width = edges[1] - edges[0]
    h = hist / (lam.size * width)
    mids = (edges[:-1] + edges[1:]) / 2
    # bin average of the density (fine quadrature)
    sub = np.linspace(0, 1, 21)
    avg = np.array([np.mean(dens(e + sub * width)) for e in edges[:-1]])
    sel = np.abs(mids) <= beta - bulk_margin
    return float(np.abs(h - avg)[sel].max())


def semicircle_density(n_tau: int = 4001) -> SpectralDensity:
    tau = np.linspace(-2.5, 2.5, n_tau)
    rho = np.sqrt(np.clip(4 - tau**2, 0, None)) / (2 * np.pi)
    return SpectralDensity(tau, rho, 0.0, beta=2.0, C0=1 / np.pi, edge_exponent=0.5, mass=1.0, evenness_error=0.0)


# --------------------------------------------------------------------------
# local law
# --------------------------------------------------------------------------


@dataclass
class LocalLawReport:
    N: int
    gamma: float
    z: list
    rows: list  # dicts: replica, tau, eta, entrywise_error, trace_error, bounds, ratios
    aggregates: list = field(default_factory=list)
    flagged: list = field(default_factory=list)

    def values(self, key: str, z: complex) -> np.ndarray:
        return np.array([r[key] for r in self.rows if complex(r["tau"], r["eta"]) == complex(z)])

    def to_json(self) -> dict:
        return {"N": self.N, "gamma": self.gamma, "z": [[z.real, z.imag] for z in self.z], "aggregates": self.aggregates, "flagged": self.flagged}

    def write_csv(self, path) -> None:
        _write_rows(path, self.rows)

    def write_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_json(), fh, indent=1)


def _write_rows(path, rows) -> None:
    if not rows:
        open(path, "w").close()
        return
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})


def _profile_for(solution: Union[QveSolution, QProfile], z_list) -> QProfile:
    if isinstance(solution, QProfile):
        have = [complex(z) for z in solution.z]
        idx = []
        for z in z_list:
            hit = [k for k, w in enumerate(have) if abs(w - complex(z)) <= 1e-12 * max(1, abs(w))]
            if not hit:
                raise InputError(f"z = {z} not in the supplied profile")
            idx.append(hit[0])
        return QProfile(solution.N, [have[k] for k in idx], solution.x, solution.q[idx])
    return q_profile(solution, z_list)


def _same_symbol(a: Optional[FourierSymbol], b: Optional[FourierSymbol]) -> bool:
    if a is None or b is None:
        return True
    if a.N != b.N:
        return False
    scale = max(float(np.abs(a.what_a).max()), 1e-300)
    return bool(np.abs(a.what_a - b.what_a).max() <= 1e-12 * scale)


def local_law_report(
    batch,
    solution: Union[QveSolution, QProfile],
    z_list: Sequence[complex],
    gamma: float = defaults.GAMMA,
    profile_symbol: Optional[FourierSymbol] = None,
    slack: float = defaults.DOMINATION_SLACK,
) -> LocalLawReport:
    """Entrywise and averaged local-law errors per replica.

    ``batch`` is anything with ``N`` and iteration over matrices (a
    :class:`SampleBatch` or a lazily generated stream). ``entrywise_error`` is
    ``max |G_xy - q_{x-y}|`` and ``trace_error`` is ``|N^-1 Tr G - q_0|``; they
    are compared with ``sqrt(Im q_0/(N eta)) + 1/(N eta)`` and ``1/(N eta)``.
    Replicas exceeding ``N^slack`` times either bound are flagged.
    """
    N = batch.N
    if not 0 < gamma < 1:
        raise InputError("tolerance exponent gamma must lie in (0, 1)")
    sym = solution.symbol if isinstance(solution, QveSolution) else profile_symbol
    if not _same_symbol(getattr(batch, "symbol", None), sym):
        raise InputError("batch and QVE solution were built from different symbols")
    if solution.N != N:
        raise InputError(f"batch N = {N} but solution N = {solution.N}")
    zs = [complex(z) for z in z_list]
    for z in zs:
        if z.imag < N ** (gamma - 1) * (1 - 1e-9):
            raise InputError(f"eta = {z.imag:.3e} below N^(gamma-1) = {N ** (gamma - 1):.3e}")
    prof = _profile_for(solution, zs)
    idx = np.subtract.outer(np.arange(N), np.arange(N)) % N
    allowance = N**slack
    rows, flagged = [], []
    for r, H in enumerate(batch):
        lam, U = eigh(H)
        for k, z in enumerate(zs):
            q = prof.q[k]
            G = resolvent_from_eigh(lam, U, z)
            ent = float(np.abs(G - q[idx]).max())
            tr = abs(np.trace(G) / N - q[0])
            eta = z.imag
            b_ent = float(np.sqrt(max(q[0].imag, 0.0) / (N * eta)) + 1 / (N * eta))
            b_tr = 1 / (N * eta)
            row = {
                "replica": r,
                "tau": z.real,
                "eta": eta,
                "entrywise_error": ent,
                "trace_error": float(tr),
                "entrywise_bound": b_ent,
                "trace_bound": b_tr,
                "entrywise_ratio": ent / b_ent,
                "trace_ratio": float(tr) / b_tr,
            }
            rows.append(row)
            if ent > allowance * b_ent or tr > allowance * b_tr:
                flagged.append({"replica": r, "tau": z.real, "eta": eta, "entrywise_ratio": ent / b_ent, "trace_ratio": float(tr) / b_tr})
    rep = LocalLawReport(N, gamma, zs, rows, [], flagged)
    for z in zs:
        sel = [r for r in rows if r["tau"] == z.real and r["eta"] == z.imag]
        agg = {"tau": z.real, "eta": z.imag, "replicas": len(sel)}
        for key in ("entrywise_error", "trace_error", "entrywise_ratio", "trace_ratio"):
            v = np.array([r[key] for r in sel])
            agg[f"{key}_median"] = float(np.median(v))
            agg[f"{key}_q90"] = float(np.quantile(v, defaults.SCALING_QUANTILE))
        ent_ok = [r["entrywise_ratio"] <= allowance for r in sel]
        agg["entrywise_within_allowance_fraction"] = float(np.mean(ent_ok))
        rep.aggregates.append(agg)
    return rep


def averaged_offdiagonal(batch, z: complex, offsets: Sequence[int]) -> dict:
    """Replica and translation average of ``G_{x+y, y}(z)`` for each offset
    ``x`` (the translation-invariant estimator of ``E G_{x,0}``)."""
    N = batch.N
    offsets = list(offsets)
    acc = np.zeros(len(offsets), complex)
    n = 0
    rows = np.arange(N)
    for H in batch:
        lam, U = eigh(H)
        G = resolvent_from_eigh(lam, U, z)
        for k, x in enumerate(offsets):
            acc[k] += G[(rows + x) % N, rows].mean()
        n += 1
    return {"offsets": offsets, "mean": acc / max(n, 1), "replicas": n}


# --------------------------------------------------------------------------
# scaling fits
# --------------------------------------------------------------------------


@dataclass
class ScalingFit:
    points: list  # (N, statistic)
    fitted_exponent: float
    half_width: float
    intercept: float
    predicted_exponent: Optional[float] = None
    tolerance: float = defaults.SCALING_TOLERANCE
    passes: Optional[bool] = None

    def to_json(self) -> dict:
        return asdict(self)


def _statistic_table(values, quantile: float, min_replicas: int) -> list:
    if isinstance(values, dict):
        pts = []
        for n, v in sorted(values.items()):
            v = np.atleast_1d(np.asarray(v, dtype=float))
            if v.size > 1 and v.size < min_replicas:
                raise FitError(f"N = {n}: {v.size} replicas < {min_replicas}")
            pts.append((int(n), float(np.quantile(v, quantile)) if v.size > 1 else float(v[0])))
        return pts
    return [(int(n), float(s)) for n, s in values]


def scaling_fit(
    values,
    predicted_exponent: Optional[float] = None,
    quantile: float = defaults.SCALING_QUANTILE,
    tolerance: float = defaults.SCALING_TOLERANCE,
    min_replicas: int = 20,
    mode: str = "two_sided",
) -> ScalingFit:
    """Log-log regression of a per-size statistic on ``N``.

    ``values`` is either ``{N: replica values}`` (reduced by ``quantile``) or a
    list of ``(N, statistic)``. ``mode="two_sided"`` passes when
    ``|fitted - predicted| <= tolerance``; ``mode="upper"`` when
    ``fitted <= predicted``.
    """
    pts = _statistic_table(values, quantile, min_replicas)
    ns = np.array([p[0] for p in pts], float)
    if len(set(ns)) < 4:
        raise FitError(f"need at least 4 distinct sizes, got {len(set(ns))}")
    v = np.array([p[1] for p in pts])
    if np.any(v <= 0):
        raise FitError("statistics must be positive for a log-log fit")
    res = stats.linregress(np.log(ns), np.log(v))
    dof = len(ns) - 2
    half = float(stats.t.ppf(0.975, dof) * res.stderr) if dof > 0 else float("inf")
    passes = None
    if predicted_exponent is not None:
        if mode == "upper":
            passes = bool(res.slope <= predicted_exponent)
        else:
            passes = bool(abs(res.slope - predicted_exponent) <= tolerance)
    return ScalingFit(pts, float(res.slope), half, float(res.intercept), predicted_exponent, tolerance, passes)


# --------------------------------------------------------------------------
# gap statistics and universality
# --------------------------------------------------------------------------


@dataclass
class GapStatistics:
    gaps: dict  # depth j -> array of rescaled gaps
    n: int
    rho0: float
    N: int
    replicas: int

    def write_csv(self, path, depth: int = 1) -> None:
        with open(path, "w") as fh:
            fh.write("gap\n")
            for g in self.gaps.get(depth, []):
                fh.write(f"{g!r}\n")


def bulk_gaps(lam: np.ndarray, dens: SpectralDensity, rho0: float, n: int, margin: float, depth: int) -> dict:
    lam = np.sort(lam)
    N = lam.size
    beta = dens.beta if dens.beta is not None else float(np.abs(lam).max())
    rho = dens(lam)
    ok = (np.abs(lam) <= beta - margin) & (rho >= rho0)
    out = {}
    for j in range(1, n + 1):
        i = np.arange(depth, N - depth - j)
        sel = i[ok[i]]
        out[j] = N * rho[sel] * (lam[sel + j] - lam[sel])
    return out


def gap_statistics(
    batch,
    dens: SpectralDensity,
    rho0: float = defaults.BULK_RHO0,
    n: int = 1,
    margin: float = defaults.BULK_EDGE_MARGIN,
    depth: int = defaults.EDGE_INDEX_DEPTH,
) -> GapStatistics:
    """Rescaled gaps ``N rho(l_i) (l_{i+j} - l_i)``, ``j = 1..n``, from bulk
    eigenvalues (``|l| <= beta - margin``, ``rho >= rho0``, at least ``depth``
    indices from either end)."""
    if rho0 <= 0:
        raise ParameterError("rho0 must be positive")
    if not 0 <= n <= 4:
        raise ParameterError("gap depth n must be in 0..4")
    acc = {j: [] for j in range(1, n + 1)}
    count = 0
    for H in batch:
        lam = eigh(H, vectors=False)
        for j, g in bulk_gaps(lam, dens, rho0, n, margin, depth).items():
            acc[j].append(g)
        count += 1
    gaps = {j: (np.concatenate(v) if v else np.zeros(0)) for j, v in acc.items()}
    if n > 0 and all(g.size == 0 for g in gaps.values()):
        raise ParameterError("bulk selection is empty")
    return GapStatistics(gaps, n, rho0, batch.N, count)


BUMP_CENTERS = (0.5, 1.0, 1.5, 2.0, 3.0)
BUMP_WIDTH = 0.5


def bump(s: np.ndarray, center: float, width: float = BUMP_WIDTH) -> np.ndarray:
    """Smooth compactly supported bump ``exp(-1/(1-u^2))`` with ``u = (s-c)/w``."""
    u = (np.asarray(s, float) - center) / width
    out = np.zeros_like(u)
    inside = np.abs(u) < 1
    out[inside] = np.exp(-1.0 / (1.0 - u[inside] ** 2))
    return out


def universality_compare(gaps_a: GapStatistics, gaps_ref: GapStatistics, min_gaps: int = 10_000) -> dict:
    """KS distance, mean difference, and bump-observable differences per depth."""
    rows = []
    for j in sorted(set(gaps_a.gaps) & set(gaps_ref.gaps)):
        a, b = gaps_a.gaps[j], gaps_ref.gaps[j]
        if a.size < min_gaps or b.size < min_gaps:
            raise ParameterError(f"depth {j}: need >= {min_gaps} gaps per sample, got {a.size} and {b.size}")
        ks = stats.ks_2samp(a, b)
        row = {"depth": j, "n_a": int(a.size), "n_ref": int(b.size), "ks": float(ks.statistic), "ks_pvalue": float(ks.pvalue), "mean_diff": float(a.mean() - b.mean())}
        for c in BUMP_CENTERS:
            row[f"bump_{c}"] = float(bump(a, c).mean() - bump(b, c).mean())
        rows.append(row)
    return {"rows": rows, "max_ks": max((r["ks"] for r in rows), default=0.0)}


# --------------------------------------------------------------------------
# delocalization
# --------------------------------------------------------------------------


def fixed_directions(N: int, count: int = 10, seed: int = 20240101) -> np.ndarray:
    """Deterministic unit vectors (rows) used as test directions."""
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, N])))
    B = rng.standard_normal((count, N))
    return B / np.linalg.norm(B, axis=1, keepdims=True)


LOCALIZED_SUP = 0.9


def delocalization_report(batch, directions: Optional[np.ndarray] = None, n_directions: int = 10) -> dict:
    """Per replica ``sqrt(N) max_i ||u_i||_inf`` and, for each test direction
    ``b``, ``sqrt(N) max_i |b . u_i|``. A replica is flagged as localized when
    some eigenvector has sup-norm at least 0.9."""
    N = batch.N
    B = fixed_directions(N, n_directions) if directions is None else np.atleast_2d(directions)
    rows = []
    for r, H in enumerate(batch):
        _, U = eigh(H)
        sup = float(np.abs(U).max())
        proj = np.abs(B @ U).max(axis=1)
        rows.append({
            "replica": r,
            "sup_norm": sup,
            "scaled_sup": float(np.sqrt(N) * sup),
            "scaled_proj": [float(np.sqrt(N) * p) for p in proj],
            "localized": sup >= LOCALIZED_SUP,
        })
    scaled = np.array([r["scaled_sup"] for r in rows])
    proj = np.array([r["scaled_proj"] for r in rows]) if rows else np.zeros((0, len(B)))
    return {
        "N": N,
        "replicas": len(rows),
        "rows": rows,
        "scaled_sup_q90": float(np.quantile(scaled, defaults.SCALING_QUANTILE)) if rows else float("nan"),
        "scaled_proj_q90": [float(np.quantile(proj[:, k], defaults.SCALING_QUANTILE)) for k in range(proj.shape[1])] if rows else [],
        "localized": any(r["localized"] for r in rows),
    }


def delocalization_scaling(reports: Iterable[dict], bound: float = 0.1) -> dict:
    """Scaling exponents across sizes of the rescaled sup-norm and of each
    direction statistic; passes when every exponent is at most ``bound``."""
    reports = sorted(reports, key=lambda r: r["N"])
    sup = scaling_fit([(r["N"], r["scaled_sup_q90"]) for r in reports], bound, mode="upper")
    n_dir = len(reports[0]["scaled_proj_q90"])
    dirs = [scaling_fit([(r["N"], r["scaled_proj_q90"][k]) for r in reports], bound, mode="upper") for k in range(n_dir)]
    return {
        "sup_exponent": sup.fitted_exponent,
        "direction_exponents": [d.fitted_exponent for d in dirs],
        "passes": bool(sup.passes and all(d.passes for d in dirs)),
    }
