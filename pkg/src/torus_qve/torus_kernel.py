"""Correlation kernels on the discrete torus, their Fourier symbols, and
certificates for the structural conditions (decay, non-resonance, block full
indecomposability, Bochner positivity, A/B compatibility).

Index conventions
-----------------
Position indices ``x, y`` run over ``Z/NZ`` stored as ``0..N-1``. The dual
torus is embedded in ``[0, 1)`` as ``p/N``. The torus distance ``|x|`` uses the
symmetric representative ``min(x mod N, N - x mod N)``.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .defaults import TOL

PRESETS = ("delta", "factorized_exp", "power_law", "custom_table")
SYMMETRY_CLASSES = ("real_symmetric", "complex_hermitian")
FID_MAX_K = 16


class KernelError(ValueError):
    """Invalid kernel parameters or table."""


class StructureError(ValueError):
    """Input data violate a structural identity (no ensemble can exist)."""


def torus_distance(x, N: int):
    x = np.mod(x, N)
    return np.minimum(x, N - x)


def _signed_rep(N: int) -> np.ndarray:
    # symmetric representatives of 0..N-1; N/2 kept positive
    k = np.arange(N)
    return np.where(k <= N // 2, k, k - N)


@dataclass(frozen=True)
class CorrelationPair:
    """Position-space covariance tables ``a_xy`` and ``b_xy`` on the torus.

    ``preset`` and ``params`` are kept so the kernel can be regenerated at a
    different size (custom tables have no generator).
    """

    N: int
    a: np.ndarray
    b: np.ndarray
    symmetry_class: str = "real_symmetric"
    preset: str = "custom_table"
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.symmetry_class not in SYMMETRY_CLASSES:
            raise KernelError(f"unknown symmetry class {self.symmetry_class!r}")
        for name in ("a", "b"):
            t = np.asarray(getattr(self, name), dtype=complex)
            if t.shape != (self.N, self.N):
                raise KernelError(f"table {name} has shape {t.shape}, expected {(self.N, self.N)}")
            _check_hermitian(t, name)
            t = t.copy()
            t.setflags(write=False)
            object.__setattr__(self, name, t)
        if self.symmetry_class == "real_symmetric" and not np.array_equal(self.a, self.b):
            raise KernelError("real_symmetric class requires b == a")

    def regenerate(self, N: int) -> "CorrelationPair":
        if self.preset == "custom_table":
            raise KernelError("custom tables have no generator; cannot change N")
        return build_kernel(self.preset, self.params, N, symmetry_class=self.symmetry_class)

    def to_json(self) -> dict:
        return {
            "N": self.N,
            "preset": self.preset,
            "params": self.params,
            "symmetry_class": self.symmetry_class,
            "a": _table_to_json(self.a),
            "b": _table_to_json(self.b),
        }

    @classmethod
    def from_json(cls, data: dict) -> "CorrelationPair":
        return cls(
            N=int(data["N"]),
            a=_table_from_json(data["a"]),
            b=_table_from_json(data["b"]),
            symmetry_class=data.get("symmetry_class", "real_symmetric"),
            preset=data.get("preset", "custom_table"),
            params=dict(data.get("params", {})),
        )

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json()))

    @classmethod
    def load(cls, path) -> "CorrelationPair":
        return cls.from_json(json.loads(Path(path).read_text()))


def _table_to_json(t: np.ndarray) -> list:
    return [[[float(v.real), float(v.imag)] for v in row] for row in t]


def _table_from_json(rows) -> np.ndarray:
    arr = np.asarray(rows, dtype=float)
    if arr.ndim == 3 and arr.shape[-1] == 2:
        return arr[..., 0] + 1j * arr[..., 1]
    return arr.astype(complex)


def _check_hermitian(t: np.ndarray, name: str) -> None:
    bad = np.argwhere(np.abs(t - t.conj().T) > TOL * max(1.0, np.abs(t).max()))
    if len(bad):
        x, y = bad[0]
        raise KernelError(
            f"table {name} is not hermitian: {name}[{x},{y}] != conj({name}[{y},{x}])"
        )


def build_kernel(
    preset: str,
    params: Optional[dict] = None,
    N: int = 16,
    symmetry_class: str = "real_symmetric",
) -> CorrelationPair:
    """Instantiate a kernel preset at torus size ``N``.

    Presets
    -------
    delta
        ``a_xy = delta_x0 delta_y0``; the GOE/GUE reference.
    factorized_exp
        ``a_xy = exp(-nu (|x| + |y|))``; needs ``nu > 0``.
    power_law
        ``a_xy = (1 + |x| + |y|)^(-kappa - 3)``; needs ``kappa``.
    custom_table
        ``params["a"]`` (and optionally ``params["b"]``) as nested lists, complex
        values given as ``[re, im]`` pairs.

    ``normalize_D1`` (with ``kappa``) rescales the table so that
    ``sum (1+|x|+|y|)^kappa |a_xy| == 1``. For the real class ``b = a``; for the
    complex class ``b`` defaults to zero unless ``params["b"]`` or
    ``params["b_scale"]`` (``b = b_scale * a``) is given.
    """
    params = dict(params or {})
    if preset not in PRESETS:
        raise KernelError(f"unknown preset {preset!r}; choose from {PRESETS}")
    if N < 4:
        raise KernelError(f"N must be >= 4, got {N}")
    d = torus_distance(np.arange(N), N)
    dx, dy = np.meshgrid(d, d, indexing="ij")

    if preset == "delta":
        a = np.zeros((N, N))
        a[0, 0] = 1.0
    elif preset == "factorized_exp":
        nu = float(params.get("nu", 1.0))
        if not nu > 0:
            raise KernelError(f"factorized_exp needs nu > 0, got {nu}")
        a = np.exp(-nu * (dx + dy))
    elif preset == "power_law":
        kappa = float(params.get("kappa", 2.0))
        if not kappa > 0:
            raise KernelError(f"power_law needs kappa > 0, got {kappa}")
        a = (1.0 + dx + dy) ** (-kappa - 3.0)
    else:
        if "a" not in params:
            raise KernelError("custom_table needs params['a']")
        a = _table_from_json(params["a"])
        if a.shape != (N, N):
            raise KernelError(f"custom table has shape {a.shape}, expected {(N, N)}")
    a = np.asarray(a, dtype=complex)

    if params.get("normalize_D1"):
        if "kappa" not in params:
            raise KernelError("normalize_D1 requires kappa")
        total = d1_sum(a, float(params["kappa"]))
        if total <= 0:
            raise KernelError("cannot normalize a zero table")
        a = a / total

    if symmetry_class == "real_symmetric":
        b = a
    elif "b" in params:
        b = _table_from_json(params["b"])
    else:
        b = float(params.get("b_scale", 0.0)) * a

    # keep params JSON-friendly
    stored = {k: v for k, v in params.items()}
    return CorrelationPair(N, a, b, symmetry_class, preset, stored)


def d1_sum(a: np.ndarray, kappa: float) -> float:
    N = a.shape[0]
    d = torus_distance(np.arange(N), N)
    w = (1.0 + d[:, None] + d[None, :]) ** kappa
    return float(np.sum(w * np.abs(a)))


# --------------------------------------------------------------------------
# Fourier symbol
# --------------------------------------------------------------------------


def _hat(t: np.ndarray) -> np.ndarray:
    # (1/N) sum_{x,y} exp(i 2pi (x p - y q)/N) t_xy
    return np.fft.ifft(np.fft.fft(t, axis=1), axis=0)


@dataclass(frozen=True)
class FourierSymbol:
    """Dual-torus symbols of a :class:`CorrelationPair`.

    ``what_a[p, q]`` is the symbol at ``(phi, theta) = (p/N, q/N)``; ``s`` is
    ``N * what_a`` and ``a_pos`` keeps the position table for evaluating the
    continuous extension at off-grid points.
    """

    N: int
    what_a: np.ndarray
    what_b: np.ndarray
    s: np.ndarray
    a_pos: Optional[np.ndarray] = None

    def tilde_a(self, phi, theta) -> np.ndarray:
        """Continuous extension evaluated on the outer product grid
        ``phi x theta``; equals ``N * what_a`` on dual-grid points."""
        if self.a_pos is None:
            raise ValueError("symbol built without a position table; no continuous extension")
        phi = np.atleast_1d(np.asarray(phi, dtype=float))
        theta = np.atleast_1d(np.asarray(theta, dtype=float))
        return _trig_eval(self.a_pos, phi, theta)

    def tilde_a_derivative_bounds(self) -> tuple[float, float]:
        """Sup bounds ``(L1, L2)`` with ``|d ta/dphi| + |d ta/dtheta| <= L1`` and
        the sum of absolute second partials ``<= L2`` (Hessian 1-norm bound)."""
        N = self.N
        k = np.abs(_signed_rep(N)).astype(float)
        w = np.abs(self.a_pos)
        tot = k[:, None] + k[None, :]
        L1 = 2 * np.pi * float(np.sum(tot * w))
        L2 = (2 * np.pi) ** 2 * float(np.sum(tot**2 * w))
        return L1, L2

    @property
    def tilde_a_eval(self) -> Callable:
        return self.tilde_a

    def to_json(self) -> dict:
        return {
            "N": self.N,
            "what_a": _table_to_json(self.what_a),
            "what_b": _table_to_json(self.what_b),
        }


def _trig_weights(N: int, pts: np.ndarray, sign: float) -> np.ndarray:
    k = _signed_rep(N).astype(float)
    E = np.exp(sign * 2j * np.pi * np.outer(pts, k))
    if N % 2 == 0:
        # split the N/2 term between +-N/2 so the extension stays real
        E[:, N // 2] = np.cos(np.pi * N * pts)
    return E


def _trig_eval(a: np.ndarray, phi: np.ndarray, theta: np.ndarray) -> np.ndarray:
    N = a.shape[0]
    Ep = _trig_weights(N, phi, +1.0)
    Et = _trig_weights(N, theta, -1.0)
    return Ep @ a @ Et.T


def _trig_grad(a: np.ndarray, phi: np.ndarray, theta: np.ndarray):
    N = a.shape[0]
    k = _signed_rep(N).astype(float)
    Ep = _trig_weights(N, phi, +1.0)
    Et = _trig_weights(N, theta, -1.0)
    dEp = Ep * (2j * np.pi * k)[None, :]
    dEt = Et * (-2j * np.pi * k)[None, :]
    if N % 2 == 0:
        dEp[:, N // 2] = -np.pi * N * np.sin(np.pi * N * phi)
        dEt[:, N // 2] = -np.pi * N * np.sin(np.pi * N * theta)
    return dEp @ a @ Et.T, Ep @ a @ dEt.T


def fourier_symbol(pair: CorrelationPair) -> FourierSymbol:
    """FFT symbols of ``pair`` in ``O(N^2 log N)``.

    Raises :class:`StructureError` when ``what_a`` is not real; that needs the
    reflection symmetry ``a_xy = conj(a_{-x,-y})`` on top of hermiticity.
    """
    N = pair.N
    wa = _hat(pair.a)
    wb = _hat(pair.b)
    scale = max(1.0, float(np.abs(wa).max())) / N
    if np.abs(wa.imag).max() > 1e-10 * max(scale, 1.0 / N):
        p, q = np.unravel_index(np.argmax(np.abs(wa.imag)), wa.shape)
        raise StructureError(
            f"symbol of a is not real at (p, q) = ({p}, {q}); "
            "a_xy must equal conj(a_{-x,-y})"
        )
    wa = wa.real.copy()
    return FourierSymbol(N, wa, wb, N * wa, a_pos=pair.a.copy())


def symbol_from_arrays(what_a, what_b=None) -> FourierSymbol:
    """Build a symbol directly from dual-grid arrays (position table recovered
    by inverse transform)."""
    wa = np.asarray(what_a)
    N = wa.shape[0]
    wb = np.zeros((N, N), complex) if what_b is None else np.asarray(what_b, dtype=complex)
    # inverse of _hat: t = fft(ifft(hat, axis=1), axis=0)
    a_pos = np.fft.fft(np.fft.ifft(wa, axis=1), axis=0)
    wa_real = np.real(wa).astype(float)
    return FourierSymbol(N, wa_real, wb, N * wa_real, a_pos=a_pos)


def brute_force_symbol(t: np.ndarray) -> np.ndarray:
    """O(N^4) double sum; independent check of the FFT path."""
    N = t.shape[0]
    x = np.arange(N)
    out = np.zeros((N, N), complex)
    for p in range(N):
        ep = np.exp(2j * np.pi * x * p / N)
        for q in range(N):
            eq = np.exp(-2j * np.pi * x * q / N)
            out[p, q] = np.sum(ep[:, None] * eq[None, :] * t) / N
    return out


# --------------------------------------------------------------------------
# Certificates
# --------------------------------------------------------------------------


@dataclass
class ConditionCertificate:
    kind: str
    holds: bool
    parameters: dict = field(default_factory=dict)
    witness: Optional[dict] = None

    def to_json(self) -> dict:
        return {
            "kind": self.kind,
            "holds": bool(self.holds),
            "parameters": {k: _jsonable(v) for k, v in self.parameters.items()},
            "witness": None if self.witness is None else {k: _jsonable(v) for k, v in self.witness.items()},
        }

    @classmethod
    def from_json(cls, data: dict) -> "ConditionCertificate":
        return cls(data["kind"], bool(data["holds"]), dict(data.get("parameters", {})), data.get("witness"))


def _jsonable(v):
    if isinstance(v, np.ndarray):
        return v.tolist()
    if isinstance(v, (np.floating, np.integer)):
        return v.item()
    if isinstance(v, (list, tuple)):
        return [_jsonable(u) for u in v]
    return v


def check_decay(pair: CorrelationPair, kind: str, param: float) -> ConditionCertificate:
    """(D1) power-law summability or (D2) pointwise exponential decay."""
    N = pair.N
    d = torus_distance(np.arange(N), N)
    tot = d[:, None] + d[None, :]
    absa = np.abs(pair.a)
    if kind == "D1":
        s = d1_sum(pair.a, param)
        return ConditionCertificate("D1", s <= 1.0 + TOL, {"kappa": param, "sum": s})
    if kind == "D2":
        if not param > 0:
            raise KernelError("D2 needs nu > 0")
        env = np.exp(-param * tot)
        ok = absa <= env * (1 + 1e-12) + TOL
        # tightest nu with |a_xy| <= exp(-nu(|x|+|y|)) over entries with tot > 0
        with np.errstate(divide="ignore"):
            mask = (tot > 0) & (absa > 0)
            nu_tight = float(np.min(-np.log(absa[mask]) / tot[mask])) if mask.any() else np.inf
        witness = None
        if not ok.all():
            x, y = np.argwhere(~ok)[0]
            witness = {"x": int(x), "y": int(y), "abs_a": float(absa[x, y])}
        return ConditionCertificate(
            "D2", bool(ok.all()), {"nu": param, "nu_tightest": nu_tight, "a00": float(absa[0, 0])}, witness
        )
    raise ValueError(f"kind must be D1 or D2, got {kind!r}")


def _grid(n: int) -> np.ndarray:
    return np.arange(n) / n


def check_nonresonance_r1(pair: CorrelationPair, grid_points: Optional[int] = None) -> ConditionCertificate:
    """(R1): ``g(phi) = sum_x exp(i 2pi phi x) a_x0`` bounded below on [0, 1].

    The grid minimum is turned into a certified bound with a second order
    Taylor slack using the exact gradient at each grid point.
    """
    N = pair.N
    n = grid_points or 8 * N
    if n < 4 * N:
        raise ValueError(f"grid_points must be >= 4N = {4 * N}")
    phi = _grid(n)
    col = pair.a[:, 0]
    E = _trig_weights(N, phi, +1.0)
    g = E @ col
    imax = float(np.abs(g.imag).max())
    if imax > 1e-8 * max(1.0, float(np.abs(col).sum())):
        raise StructureError(f"R1: g(phi) has imaginary part {imax:.3e}; column a_x0 is not reflection symmetric")
    g = g.real
    k = np.abs(_signed_rep(N)).astype(float)
    absc = np.abs(col)
    L1 = 2 * np.pi * float(np.sum(k * absc))
    L2 = (2 * np.pi) ** 2 * float(np.sum(k**2 * absc))
    h = 1.0 / n
    dg = (E * (2j * np.pi * _signed_rep(N))[None, :]) @ col
    slack = np.abs(dg) * h / 2 + L2 * (h / 2) ** 2 / 2
    certified = float(np.min(g - slack))
    xi1 = float(g.min())
    witness = None
    if not certified > 0:
        bad = np.nonzero(g <= TOL)[0]
        i = int(bad[0]) if len(bad) else int(np.argmin(g))
        witness = {"phi": float(phi[i]), "g": float(g[i]), "argmin_phi": float(phi[np.argmin(g)])}
    return ConditionCertificate(
        "R1",
        certified > 0,
        {"xi1": xi1, "certified_lower_bound": certified, "lipschitz": L1, "grid_points": n},
        witness,
    )


def _tilde_a_grid(symbol: FourierSymbol, n: int) -> np.ndarray:
    ta = symbol.tilde_a(_grid(n), _grid(n))
    return ta


def check_nonresonance_r2(symbol: FourierSymbol, grid_points: Optional[int] = None) -> ConditionCertificate:
    """(R2): uniform lower bound on the continuous extension over ``[0,1]^2``."""
    N = symbol.N
    n = grid_points or 8 * N
    if n < 4 * N:
        raise ValueError(f"grid_points must be >= 4N = {4 * N}")
    pts = _grid(n)
    ta = _tilde_a_grid(symbol, n)
    scale = max(1.0, float(np.abs(ta).max()))
    if np.abs(ta.imag).max() > 1e-8 * scale:
        raise StructureError("R2: continuous extension is not real; kernel lacks reflection symmetry")
    ta = ta.real
    gp, gt = _trig_grad(symbol.a_pos, pts, pts)
    _, L2 = symbol.tilde_a_derivative_bounds()
    h = 1.0 / n
    slack = (np.abs(gp) + np.abs(gt)) * h / 2 + L2 * (h / 2) ** 2 / 2
    certified = float(np.min(ta - slack))
    xi2 = float(ta.min())
    witness = None
    if xi2 < -TOL * scale:
        i, j = np.unravel_index(np.argmin(ta), ta.shape)
        witness = {"phi": float(pts[i]), "theta": float(pts[j]), "value": float(ta[i, j]), "bochner_violation": True}
    elif not certified > 0:
        i, j = np.unravel_index(np.argmin(ta - slack), ta.shape)
        witness = {"phi": float(pts[i]), "theta": float(pts[j]), "value": float(ta[i, j])}
    return ConditionCertificate(
        "R2",
        certified > 0,
        {"xi2": xi2, "certified_lower_bound": certified, "grid_points": n},
        witness,
    )


def is_fully_indecomposable(Z) -> bool:
    """A square 0-1 matrix is fully indecomposable iff every nonempty row set
    ``I`` whose zero-column set ``J(I)`` is nonempty has ``|I| + |J(I)| <= K - 1``.

    Enumerates all ``2^K - 1`` row subsets, so ``K <= 16``.
    """
    Z = np.asarray(Z)
    K = Z.shape[0]
    if Z.shape != (K, K):
        raise ValueError("Z must be square")
    if K > FID_MAX_K:
        raise ValueError(f"K = {K} exceeds the enumeration bound {FID_MAX_K}")
    if K == 0:
        return False
    # row r -> bitmask of its zero columns
    full = (1 << K) - 1
    zero_cols = [sum(1 << j for j in range(K) if Z[i, j] == 0) for i in range(K)]
    # J(I) for every subset via lowest-bit recursion
    J = [full] * (1 << K)
    for mask in range(1, 1 << K):
        low = mask & -mask
        r = low.bit_length() - 1
        J[mask] = J[mask ^ low] & zero_cols[r]
        nJ = bin(J[mask]).count("1")
        if nJ and bin(mask).count("1") + nJ > K - 1:
            return False
    return True


def has_zero_block_decomposition(Z) -> bool:
    """Exhaustive oracle: is there an ``s x (K - s)`` all-zero submatrix?
    (equivalently permutations P, Q making PZQ block triangular). For ``K = 1``
    the matrix is decomposable iff it is zero."""
    Z = np.asarray(Z)
    K = Z.shape[0]
    if K == 1:
        return Z[0, 0] == 0
    for s in range(1, K):
        for rows in itertools.combinations(range(K), s):
            sub = Z[list(rows)]
            for cols in itertools.combinations(range(K), K - s):
                if not sub[:, list(cols)].any():
                    return True
    return False


def find_block_fid_certificate(
    symbol: FourierSymbol,
    delta: float,
    K_max: int = 8,
    sub_points: Optional[int] = None,
) -> ConditionCertificate:
    """Search uniform partitions ``K = 1..K_max`` for an (R0) certificate.

    ``Z_ij = 1`` iff the max of the continuous extension over the sub-grid of
    ``D_i x D_j`` reaches ``delta``. A ``K`` is accepted when ``Z`` is fully
    indecomposable and every ``Z_ij = 1`` block stays above ``xi0 = delta/2`` on
    its sub-grid.
    """
    if not delta > 0:
        raise ValueError("delta must be positive")
    if K_max > FID_MAX_K:
        raise ValueError(f"K_max must be <= {FID_MAX_K}")
    N = symbol.N
    tried = []
    for K in range(1, K_max + 1):
        sub = sub_points or max(4, -(-8 * N // K))
        n = K * sub
        ta = np.real(symbol.tilde_a(_grid(n), _grid(n)))
        blocks = ta.reshape(K, sub, K, sub)
        bmax = blocks.max(axis=(1, 3))
        bmin = blocks.min(axis=(1, 3))
        Z = (bmax >= delta).astype(int)
        margin_ok = bool(np.all(bmin[Z == 1] >= delta / 2))
        fid = is_fully_indecomposable(Z)
        tried.append({"K": K, "fid": fid, "margin_ok": margin_ok})
        if fid and margin_ok:
            return ConditionCertificate(
                "R0",
                True,
                {"K": K, "xi0": delta / 2, "delta": delta},
                {"Z": Z.tolist(), "partition": [[j / K, (j + 1) / K] for j in range(K)]},
            )
    return ConditionCertificate("R0", False, {"delta": delta, "K_max": K_max}, {"tried": tried})


def check_bochner(symbol: FourierSymbol) -> ConditionCertificate:
    wa = symbol.what_a
    m = float(wa.min())
    holds = m >= -TOL
    witness = None
    if not holds:
        p, q = np.unravel_index(np.argmin(wa), wa.shape)
        witness = {"p": int(p), "q": int(q), "phi": p / symbol.N, "theta": q / symbol.N, "value": m}
    return ConditionCertificate("Bochner", holds, {"min_what_a": m}, witness)


def reflect_index(N: int) -> np.ndarray:
    return (-np.arange(N)) % N


def check_ab_compatibility(symbol: FourierSymbol, xi3: float = 0.0) -> ConditionCertificate:
    """Existence conditions for a Gaussian ensemble with symbols ``(what_a,
    what_b)``; with ``xi3 > 0`` the strict, shifted form used for the complex
    bulk-universality decomposition.

    Raises :class:`StructureError` when ``what_b`` is not reflection
    symmetric.
    """
    if xi3 < 0:
        raise ValueError("xi3 must be >= 0")
    N = symbol.N
    wa, wb = symbol.what_a, symbol.what_b
    r = reflect_index(N)
    wb_ref = wb[np.ix_(r, r)]
    sym_err = float(np.abs(wb_ref - wb).max())
    if sym_err > 1e-10 * max(1.0 / N, float(np.abs(wb).max())):
        p, q = np.unravel_index(np.argmax(np.abs(wb_ref - wb)), wb.shape)
        raise StructureError(f"b symbol not reflection symmetric at (p, q) = ({p}, {q}); no ensemble exists")
    wa_ref = wa[np.ix_(r, r)]
    lhs = np.abs(wb) ** 2
    rhs = np.clip(wa - xi3 / N, 0, None) * np.clip(wa_ref - xi3 / N, 0, None)
    tol = TOL / N**2
    if xi3 > 0:
        ok_cs = lhs < rhs
    else:
        ok_cs = lhs <= rhs + tol
    ok_pos = wa >= -TOL
    ok = ok_cs & ok_pos
    witness = None
    if not ok.all():
        p, q = np.argwhere(~ok)[0]
        witness = {"p": int(p), "q": int(q), "abs_b_sq": float(lhs[p, q]), "bound": float(rhs[p, q])}
    gap = float(np.min(rhs - lhs))
    return ConditionCertificate("AB_compat", bool(ok.all()), {"xi3": xi3, "min_gap": gap}, witness)
