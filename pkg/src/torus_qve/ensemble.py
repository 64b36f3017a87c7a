"""Gaussian random matrices with translation-invariant covariance

    N E h_ij conj(h_kl) = a_{i-k, j-l} + b_{i-l, j-k}

sampled in Fourier coordinates ``hat H = F H F*`` (``F_{p,y} = N^-1/2 e^{i2pi py/N}``).

Random numbers come from numpy's counter-based Philox generator; replica
``r`` of a batch with seed ``s`` uses the stream ``SeedSequence([s, r])`` so
batches can be generated in any order or in parallel.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .defaults import MC_SIGMA, TOL
from .torus_kernel import (
    CorrelationPair,
    FourierSymbol,
    StructureError,
    check_ab_compatibility,
    check_bochner,
)

GENERATOR_TAGS = ("filtered_goe", "filtered_gue_orbit", "decomposed", "goe", "gue")
RNG_NAME = "numpy.random.Philox(SeedSequence([seed, replica]))"


class PreconditionError(ValueError):
    pass


def replica_rng(seed: int, replica: int = 0) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), int(replica)])))


def to_fourier(H: np.ndarray) -> np.ndarray:
    """``F H F*``; works on stacks of matrices (last two axes)."""
    return np.fft.ifft(np.fft.fft(H, axis=-1), axis=-2)


def from_fourier(Hh: np.ndarray) -> np.ndarray:
    return np.fft.fft(np.fft.ifft(Hh, axis=-1), axis=-2)


def _hermitize(H: np.ndarray, real: bool) -> np.ndarray:
    if real:
        H = np.real(H)
        return (H + np.swapaxes(H, -1, -2)) / 2
    return (H + np.conj(np.swapaxes(H, -1, -2))) / 2


def _goe(N: int, rng: np.random.Generator) -> np.ndarray:
    X = rng.standard_normal((N, N))
    return (X + X.T) / np.sqrt(2 * N)


def _gue(N: int, rng: np.random.Generator) -> np.ndarray:
    X = (rng.standard_normal((N, N)) + 1j * rng.standard_normal((N, N))) / np.sqrt(2)
    return (X + X.conj().T) / np.sqrt(2 * N)


def sample_goe_gue(N: int, symmetry_class: str = "real_symmetric", seed: int = 0, replica: int = 0) -> np.ndarray:
    """GOE (``E u_ij u_kl = (d_ik d_jl + d_il d_jk)/N``) or GUE
    (``E u_ij conj(u_kl) = d_ik d_jl / N``) draw."""
    if N < 2:
        raise ValueError("N must be >= 2")
    rng = replica_rng(seed, replica)
    return _goe(N, rng) if symmetry_class == "real_symmetric" else _gue(N, rng)


@dataclass
class SampleBatch:
    N: int
    count: int
    symmetry_class: str
    seed: int
    realizations: np.ndarray  # (count, N, N)
    generator_tag: str
    spec: dict = field(default_factory=dict)
    symbol: Optional[FourierSymbol] = field(default=None, repr=False)
    components: dict = field(default_factory=dict, repr=False)

    def __iter__(self):
        return iter(self.realizations)

    def save(self, directory) -> Path:
        """Directory layout: ``manifest.json`` plus ``r00000.bin`` ... with
        row-major little-endian float64 (complex as interleaved re/im)."""
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        files = []
        for r, H in enumerate(self.realizations):
            name = f"r{r:05d}.bin"
            buf = _to_bytes(H)
            (d / name).write_bytes(buf)
            files.append({"name": name, "sha256": hashlib.sha256(buf).hexdigest()})
        manifest = {
            "format": "torus_qve.batch/1",
            "N": self.N,
            "count": self.count,
            "symmetry_class": self.symmetry_class,
            "seed": self.seed,
            "generator_tag": self.generator_tag,
            "dtype": "complex128" if np.iscomplexobj(self.realizations) else "float64",
            "rng": RNG_NAME,
            "spec": self.spec,
            "files": files,
        }
        manifest["hash"] = _manifest_hash(manifest)
        (d / "manifest.json").write_text(json.dumps(manifest, indent=1))
        return d

    @classmethod
    def load(cls, directory) -> "SampleBatch":
        d = Path(directory)
        manifest = json.loads((d / "manifest.json").read_text())
        if manifest.get("hash") != _manifest_hash(manifest):
            raise ValueError("batch manifest hash mismatch")
        N = manifest["N"]
        cplx = manifest["dtype"] == "complex128"
        mats = []
        for entry in manifest["files"]:
            buf = (d / entry["name"]).read_bytes()
            if hashlib.sha256(buf).hexdigest() != entry["sha256"]:
                raise ValueError(f"checksum mismatch for {entry['name']}")
            mats.append(_from_bytes(buf, N, cplx))
        real = np.array(mats) if mats else np.zeros((0, N, N), complex if cplx else float)
        return cls(N, manifest["count"], manifest["symmetry_class"], manifest["seed"], real, manifest["generator_tag"], manifest.get("spec", {}))


def _manifest_hash(manifest: dict) -> str:
    body = {k: v for k, v in manifest.items() if k != "hash"}
    return hashlib.sha256(json.dumps(body, sort_keys=True).encode()).hexdigest()


def _to_bytes(H: np.ndarray) -> bytes:
    if np.iscomplexobj(H):
        arr = np.empty(H.shape + (2,), dtype="<f8")
        arr[..., 0] = H.real
        arr[..., 1] = H.imag
        return arr.tobytes(order="C")
    return np.ascontiguousarray(H, dtype="<f8").tobytes(order="C")


def _from_bytes(buf: bytes, N: int, cplx: bool) -> np.ndarray:
    arr = np.frombuffer(buf, dtype="<f8")
    if cplx:
        arr = arr.reshape(N, N, 2)
        return arr[..., 0] + 1j * arr[..., 1]
    return arr.reshape(N, N).copy()


# --------------------------------------------------------------------------
# Fourier-space covariance structure
# --------------------------------------------------------------------------


def fourier_covariance(symbol: FourierSymbol, alpha, beta) -> tuple[complex, complex]:
    """``(E h_a conj(h_b), E h_a h_b)`` for Fourier entries ``a = (p, q)``,
    ``b = (p', q')`` of a matrix with symbols ``(what_a, what_b)``."""
    N = symbol.N
    p, q = alpha[0] % N, alpha[1] % N
    pp, qq = beta[0] % N, beta[1] % N

    def C(p1, q1, p2, q2):
        v = 0j
        if p1 == p2 and q1 == q2:
            v += symbol.what_a[p1, q1]
        if p2 == (-q1) % N and q2 == (-p1) % N:
            v += symbol.what_b[p1, q1]
        return v

    # conj(h_{p'q'}) = h_{q'p'} by hermiticity
    return C(p, q, pp, qq), C(p, q, qq, pp)


def _real_cov(C: complex, P: complex) -> np.ndarray:
    """Covariance of (Re h_a, Im h_a) with (Re h_b, Im h_b) from ``C`` and ``P``."""
    return np.array(
        [[(C + P).real / 2, (P - C).imag / 2], [(C + P).imag / 2, (C - P).real / 2]]
    )


def orbit_covariance(symbol: FourierSymbol, p: int, q: int) -> np.ndarray:
    """4x4 real covariance of ``(Re h_{pq}, Re h_{-p,-q}, Im h_{pq}, Im h_{-p,-q})``."""
    N = symbol.N
    ents = [(p % N, q % N), ((-p) % N, (-q) % N)]
    G = np.zeros((4, 4))
    for i, a in enumerate(ents):
        for j, b in enumerate(ents):
            C, P = fourier_covariance(symbol, a, b)
            blk = _real_cov(C, P)
            G[i, j] = blk[0, 0]
            G[i, 2 + j] = blk[0, 1]
            G[2 + i, j] = blk[1, 0]
            G[2 + i, 2 + j] = blk[1, 1]
    return G


def orbit_representatives(N: int) -> list:
    """One ``(p, q)`` per orbit of the group generated by transposition and
    reflection ``(p, q) -> (-p, -q)``."""
    seen = np.zeros((N, N), bool)
    reps = []
    for p in range(N):
        for q in range(N):
            if seen[p, q]:
                continue
            reps.append((p, q))
            for a, b in ((p, q), (q, p), (-p, -q), (-q, -p)):
                seen[a % N, b % N] = True
    return reps


def orbit_psd_min_eig(symbol: FourierSymbol) -> tuple[float, tuple]:
    """Smallest eigenvalue over all orbit covariance matrices and where."""
    worst, where = np.inf, None
    for p, q in orbit_representatives(symbol.N):
        G = orbit_covariance(symbol, p, q)
        G = (G + G.T) / 2
        w = float(np.linalg.eigvalsh(G)[0])
        if w < worst:
            worst, where = w, (p, q)
    return worst, where


class _OrbitSampler:
    def __init__(self, symbol: FourierSymbol):
        N = symbol.N
        reps = orbit_representatives(N)
        self.N = N
        self.p = np.array([r[0] for r in reps])
        self.q = np.array([r[1] for r in reps])
        L = np.zeros((len(reps), 4, 4))
        scale = max(float(np.abs(symbol.what_a).max()), 1.0 / N)
        for k, (p, q) in enumerate(reps):
            G = orbit_covariance(symbol, p, q)
            if np.abs(G - G.T).max() > 1e-9 * scale:
                raise StructureError(f"orbit ({p}, {q}): covariance not symmetric; symbols are inconsistent")
            G = (G + G.T) / 2
            w, V = np.linalg.eigh(G)
            if w[0] < -TOL * scale:
                raise StructureError(f"orbit ({p}, {q}): covariance not positive semidefinite (min eig {w[0]:.3e})")
            L[k] = V * np.sqrt(np.clip(w, 0, None))
        self.L = L

    def draw(self, rng: np.random.Generator) -> np.ndarray:
        N = self.N
        g = rng.standard_normal((self.L.shape[0], 4))
        x = np.einsum("kij,kj->ki", self.L, g)
        u = x[:, 0] + 1j * x[:, 2]
        w = x[:, 1] + 1j * x[:, 3]
        p, q = self.p, self.q
        rp, rq = (-p) % N, (-q) % N
        Hh = np.zeros((N, N), complex)
        Hh[q, p] = np.conj(u)
        Hh[rq, rp] = np.conj(w)
        Hh[p, q] = u
        Hh[rp, rq] = w
        return Hh


def _filter(symbol: FourierSymbol, shift: float = 0.0) -> np.ndarray:
    s = symbol.s - shift
    if s.min() < -TOL:
        raise PreconditionError(f"symbol is indefinite (min N*what_a - shift = {s.min():.3e})")
    return np.sqrt(np.clip(s, 0, None))


def _filtered_real(symbol: FourierSymbol, count: int, seed: int, shift: float = 0.0, offset: int = 0) -> np.ndarray:
    N = symbol.N
    filt = _filter(symbol, shift)
    identity = bool(np.all(np.abs(filt - 1.0) <= 4 * np.finfo(float).eps))
    out = np.empty((count, N, N))
    for r in range(count):
        V = _goe(N, replica_rng(seed, offset + r))
        if identity:
            out[r] = V
            continue
        H = from_fourier(filt * to_fourier(V))
        out[r] = _hermitize(H, real=True)
    return out


def _orbit_complex(symbol: FourierSymbol, count: int, seed: int, offset: int = 0) -> np.ndarray:
    sampler = _OrbitSampler(symbol)
    N = symbol.N
    out = np.empty((count, N, N), complex)
    for r in range(count):
        Hh = sampler.draw(replica_rng(seed, offset + r))
        out[r] = _hermitize(from_fourier(Hh), real=False)
    return out


def _kernel_spec(symbol: FourierSymbol, pair: Optional[CorrelationPair]) -> dict:
    if pair is None:
        return {"N": symbol.N}
    if pair.preset != "custom_table":
        return {"preset": pair.preset, "params": pair.params, "N": pair.N}
    return {"preset": "custom_table", "N": pair.N}


def sample_invariant_gaussian(
    symbol: FourierSymbol,
    symmetry_class: str = "real_symmetric",
    count: int = 1,
    seed: int = 0,
    pair: Optional[CorrelationPair] = None,
) -> SampleBatch:
    """Sample ``count`` matrices with covariance given by ``symbol``.

    Real class: ``hat h = sqrt(N what_a) * hat v`` for a GOE draw ``V``
    (``b = a`` implied). Complex class: each transpose/reflection orbit of
    Fourier entries is drawn from its 4x4 covariance built from
    ``(what_a, what_b)``.
    """
    bo = check_bochner(symbol)
    if not bo.holds:
        raise PreconditionError(f"symbol fails Bochner positivity: {bo.witness}")
    spec = {"kernel": _kernel_spec(symbol, pair), "symmetry_class": symmetry_class}
    if symmetry_class == "real_symmetric":
        H = _filtered_real(symbol, count, seed)
        tag = "filtered_goe"
    elif symmetry_class == "complex_hermitian":
        compat = check_ab_compatibility(symbol, 0.0)
        if not compat.holds:
            raise PreconditionError(f"(a, b) symbols are incompatible: {compat.witness}")
        H = _orbit_complex(symbol, count, seed)
        tag = "filtered_gue_orbit"
    else:
        raise ValueError(f"unknown symmetry class {symmetry_class!r}")
    return SampleBatch(symbol.N, count, symmetry_class, seed, H, tag, spec, symbol)


def sample_reference(N: int, symmetry_class: str = "real_symmetric", count: int = 1, seed: int = 0) -> SampleBatch:
    """Batch of GOE/GUE draws (the zero-correlation reference)."""
    H = np.array([sample_goe_gue(N, symmetry_class, seed, r) for r in range(count)])
    tag = "goe" if symmetry_class == "real_symmetric" else "gue"
    return SampleBatch(N, count, symmetry_class, seed, H, tag, {"kernel": {"preset": "delta", "N": N}})


def gaussian_component_split(
    symbol: FourierSymbol,
    symmetry_class: str = "real_symmetric",
    eps: float = 0.0,
    count: int = 1,
    seed: int = 0,
) -> SampleBatch:
    """``H = H0 + sqrt(eps/2) U`` with ``U`` an independent GOE/GUE draw and
    ``H0`` sampled from the shifted symbol ``what_a - eps/(2N)``. The total
    covariance equals that of the unsplit ensemble.

    ``components["H0"]`` and ``components["U"]`` hold the two parts.
    """
    N = symbol.N
    if eps < 0:
        raise ValueError("eps must be >= 0")
    if symmetry_class == "real_symmetric":
        if float(symbol.s.min()) < eps - TOL:
            raise PreconditionError(f"min N*what_a = {symbol.s.min():.4g} < eps = {eps}")
        H0 = _filtered_real(symbol, count, seed, shift=eps / 2)
    elif symmetry_class == "complex_hermitian":
        if eps > 0:
            c = check_ab_compatibility(symbol, eps)
            if not c.holds:
                raise PreconditionError(f"strict compatibility fails at xi3 = eps: {c.witness}")
        shifted = FourierSymbol(N, symbol.what_a - eps / (2 * N), symbol.what_b, symbol.s - eps / 2, symbol.a_pos)
        H0 = _orbit_complex(shifted, count, seed)
    else:
        raise ValueError(f"unknown symmetry class {symmetry_class!r}")
    if eps > 0:
        # independent stream: replica indices offset past the H0 draws
        U = np.array([sample_goe_gue(N, symmetry_class, seed, count + r) for r in range(count)])
        H = H0 + np.sqrt(eps / 2) * U
    else:
        U = np.zeros_like(H0)
        H = H0.copy()
    H = _hermitize(H, real=symmetry_class == "real_symmetric")
    spec = {"eps": eps, "symmetry_class": symmetry_class}
    return SampleBatch(N, count, symmetry_class, seed, H, "decomposed", spec, symbol, {"H0": H0, "U": U})


# --------------------------------------------------------------------------
# empirical checks
# --------------------------------------------------------------------------


def _studentize(samples: np.ndarray, target: complex) -> float:
    """Largest |z| over real and imaginary parts of a sample mean vs target."""
    n = samples.shape[0]
    # parts that vanish identically up to rounding are compared absolutely
    floor = 1e-10 * max(float(np.abs(samples).mean()), abs(target), 1e-300)
    worst = 0.0
    for part, t in ((samples.real, target.real), (samples.imag, target.imag)):
        mu = part.mean()
        sd = part.std(ddof=1)
        if sd <= floor:
            if abs(mu - t) > floor:
                return np.inf
            continue
        worst = max(worst, abs(mu - t) / (sd / np.sqrt(n)))
    return worst


def default_quadruples(N: int, window: int = 8, n_quads: int = 400, seed: int = 12345) -> np.ndarray:
    """Deterministic index quadruples ``(i, j, k, l)`` with ``i-k`` and ``j-l``
    in ``[-window, window]``; the identity offsets are always included."""
    rng = np.random.default_rng(seed)
    i = rng.integers(0, N, n_quads)
    j = rng.integers(0, N, n_quads)
    u = rng.integers(-window, window + 1, n_quads)
    v = rng.integers(-window, window + 1, n_quads)
    u[:4] = 0
    v[:4] = 0
    j[:2] = i[:2]  # diagonal entries
    return np.stack([i, j, (i - u) % N, (j - v) % N], axis=1)


def empirical_covariance(
    batch: SampleBatch,
    pair: CorrelationPair,
    window: int = 8,
    quadruples: Optional[np.ndarray] = None,
) -> dict:
    """Compare ``N E h_ij conj(h_kl)`` with ``a_{i-k,j-l} + b_{i-l,j-k}``."""
    if batch.count < 100:
        raise PreconditionError(f"need count >= 100 realizations, got {batch.count}")
    if window > 8:
        raise ValueError("window must be <= 8")
    N = batch.N
    quads = default_quadruples(N, window) if quadruples is None else np.asarray(quadruples)
    H = batch.realizations
    rows = []
    for i, j, k, l in quads:
        x = N * H[:, i, j] * np.conj(H[:, k, l])
        target = pair.a[(i - k) % N, (j - l) % N] + pair.b[(i - l) % N, (j - k) % N]
        zval = _studentize(np.asarray(x, dtype=complex), complex(target))
        rows.append({"i": int(i), "j": int(j), "k": int(k), "l": int(l), "estimate": complex(x.mean()), "target": complex(target), "z": zval})
    zs = np.array([r["z"] for r in rows])
    worst = int(np.argmax(zs))
    return {
        "max_studentized": float(zs.max()),
        "n_quadruples": len(rows),
        "count": batch.count,
        "witness": rows[worst],
        "rows": rows,
        "passes": bool(zs.max() <= MC_SIGMA),
    }


def fourfold_independence_test(
    batch: SampleBatch,
    symbol: Optional[FourierSymbol] = None,
    n_pairs: int = 1000,
    n_on_orbit: int = 200,
    seed: int = 2024,
    transform: bool = True,
) -> dict:
    """Check the Fourier-space structure of a batch.

    (i) on-orbit second moments ``E |h_a|^2`` and ``E h_a h_{-a}`` against the
    symbols (studentized, ``MC_SIGMA``); (ii) ``n_pairs`` random off-orbit pairs
    must have empirical correlation magnitude ``<= 4 / sqrt(count)``.
    ``transform=False`` treats the stored matrices as already in Fourier
    coordinates (negative control).
    """
    symbol = symbol or batch.symbol
    if symbol is None:
        raise ValueError("a symbol is required")
    if batch.count < 1000:
        raise PreconditionError(f"need count >= 1000 realizations, got {batch.count}")
    N = batch.N
    Hh = to_fourier(batch.realizations) if transform else np.asarray(batch.realizations, dtype=complex)
    rng = np.random.default_rng(seed)

    on_rows = []
    for _ in range(n_on_orbit):
        p, q = (int(v) for v in rng.integers(0, N, 2))
        a = Hh[:, p, q]
        r = Hh[:, (-p) % N, (-q) % N]
        C, _ = fourier_covariance(symbol, (p, q), (p, q))
        _, P = fourier_covariance(symbol, (p, q), (-p, -q))
        z1 = _studentize(np.abs(a) ** 2 + 0j, C)
        z2 = _studentize(a * r, P)
        on_rows.append({"p": p, "q": q, "z_var": z1, "z_pair": z2})
    on_z = max(max(r["z_var"], r["z_pair"]) for r in on_rows)

    bound = 4.0 / np.sqrt(batch.count)
    worst = 0.0
    worst_pair = None
    done = 0
    while done < n_pairs:
        p, q, pp, qq = (int(v) for v in rng.integers(0, N, 4))
        orbit = {(p, q), (q, p), ((-p) % N, (-q) % N), ((-q) % N, (-p) % N)}
        if (pp, qq) in orbit:
            continue
        a = Hh[:, p, q]
        b = Hh[:, pp, qq]
        na = np.sqrt(np.mean(np.abs(a) ** 2))
        nb = np.sqrt(np.mean(np.abs(b) ** 2))
        if na == 0 or nb == 0:
            done += 1
            continue
        c1 = abs(np.mean(a * np.conj(b))) / (na * nb)
        c2 = abs(np.mean(a * b)) / (na * nb)
        c = max(c1, c2)
        if c > worst:
            worst, worst_pair = c, (p, q, pp, qq)
        done += 1
    return {
        "on_orbit_max_z": float(on_z),
        "on_orbit_passes": bool(on_z <= MC_SIGMA),
        "off_orbit_max_corr": float(worst),
        "off_orbit_bound": float(bound),
        "off_orbit_passes": bool(worst <= bound),
        "witness_pair": worst_pair,
        "count": batch.count,
        "on_orbit_rows": on_rows,
    }


def position_filter(symbol: FourierSymbol) -> np.ndarray:
    """Position-space convolution filter ``r`` with ``h = r * v`` (2D circular
    convolution of a GOE draw) reproducing the Fourier filtering:
    ``r_xy = N^-1 sum_{p,q} e^{-i2pi(xp - yq)/N} sqrt(N what_a_pq)``."""
    N = symbol.N
    filt = np.sqrt(np.clip(symbol.s, 0, None))
    # inverse of the symbol transform, divided by N for the convolution normalization
    return np.fft.fft(np.fft.ifft(filt, axis=1), axis=0) / N


def convolve_filter(r: np.ndarray, V: np.ndarray) -> np.ndarray:
    """``h_ij = sum_{k,l} r_{i-k, j-l} v_kl`` by FFT."""
    return np.fft.ifft2(np.fft.fft2(r) * np.fft.fft2(V))


class StreamBatch:
    """Lazily generated batch: replica ``r`` is produced on iteration from the
    same stream a :class:`SampleBatch` with the same seed would use, so memory
    stays at one matrix for large ``N``."""

    def __init__(self, symbol: FourierSymbol, symmetry_class: str, count: int, seed: int, reference: bool = False):
        self.N = symbol.N
        self.symbol = symbol
        self.symmetry_class = symmetry_class
        self.count = count
        self.seed = seed
        self.reference = reference
        self._sampler = None
        if not reference and symmetry_class == "complex_hermitian":
            self._sampler = _OrbitSampler(symbol)

    def realization(self, r: int) -> np.ndarray:
        if self.reference:
            return sample_goe_gue(self.N, self.symmetry_class, self.seed, r)
        if self._sampler is not None:
            Hh = self._sampler.draw(replica_rng(self.seed, r))
            return _hermitize(from_fourier(Hh), real=False)
        return _filtered_real(self.symbol, 1, self.seed, offset=r)[0]

    def __iter__(self):
        for r in range(self.count):
            yield self.realization(r)

    def materialize(self) -> SampleBatch:
        H = np.array(list(self))
        tag = ("goe" if self.symmetry_class == "real_symmetric" else "gue") if self.reference else (
            "filtered_goe" if self.symmetry_class == "real_symmetric" else "filtered_gue_orbit")
        return SampleBatch(self.N, self.count, self.symmetry_class, self.seed, H, tag, {}, self.symbol)
