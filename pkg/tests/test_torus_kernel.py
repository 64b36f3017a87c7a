import itertools
import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from torus_qve import torus_kernel as tk


def random_hermitian_table(rng, N, support=3, reflect=True):
    """Small-support table with a_xy = conj(a_yx) and, optionally, the
    reflection symmetry a_xy = conj(a_{-x,-y}) that makes the symbol real."""
    a = np.zeros((N, N), complex)
    for x in range(-support, support + 1):
        for y in range(-support, support + 1):
            a[x % N, y % N] = rng.normal() + 1j * rng.normal()
    a = (a + a.conj().T) / 2
    if reflect:
        r = (-np.arange(N)) % N
        a = (a + a[np.ix_(r, r)].conj()) / 2
    return a


# --------------------------------------------------------------------------
# kernels
# --------------------------------------------------------------------------


def test_torus_distance_symmetric_representative():
    N = 10
    d = tk.torus_distance(np.arange(N), N)
    assert list(d) == [0, 1, 2, 3, 4, 5, 4, 3, 2, 1]


def test_delta_kernel_tables():
    p = tk.build_kernel("delta", {}, 8)
    assert p.a[0, 0] == 1 and np.count_nonzero(p.a) == 1
    assert np.array_equal(p.a, p.b)


def test_factorized_exp_values():
    p = tk.build_kernel("factorized_exp", {"nu": 0.5}, 16)
    assert p.a[1, 2].real == pytest.approx(np.exp(-1.5))
    assert p.a[15, 0].real == pytest.approx(np.exp(-0.5))  # x = -1


def test_power_law_normalized_d1_sum_is_one():
    p = tk.build_kernel("power_law", {"kappa": 2.0, "normalize_D1": True}, 64)
    assert tk.d1_sum(p.a, 2.0) == pytest.approx(1.0, abs=1e-12)
    assert tk.check_decay(p, "D1", 2.0).holds


def test_unknown_preset_and_bad_params():
    with pytest.raises(tk.KernelError):
        tk.build_kernel("gaussian", {}, 8)
    with pytest.raises(tk.KernelError):
        tk.build_kernel("factorized_exp", {"nu": -1}, 8)
    with pytest.raises(tk.KernelError):
        tk.build_kernel("delta", {}, 2)


def test_non_hermitian_table_names_offending_pair():
    a = np.zeros((4, 4))
    a[1, 2] = 1.0
    with pytest.raises(tk.KernelError, match=r"a\[1,2\]"):
        tk.CorrelationPair(4, a, a)


def test_real_class_requires_b_equal_a():
    a = np.zeros((4, 4))
    a[0, 0] = 1
    with pytest.raises(tk.KernelError):
        tk.CorrelationPair(4, a, 0 * a, "real_symmetric")


def test_custom_table_and_json_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    a = random_hermitian_table(rng, 8)
    rows = [[[v.real, v.imag] for v in row] for row in a]
    p = tk.build_kernel("custom_table", {"a": rows}, 8, "complex_hermitian")
    path = tmp_path / "k.json"
    p.save(path)
    q = tk.CorrelationPair.load(path)
    assert np.array_equal(p.a, q.a) and np.array_equal(p.b, q.b)
    with pytest.raises(tk.KernelError):
        p.regenerate(16)


def test_regenerate_changes_size():
    p = tk.build_kernel("factorized_exp", {"nu": 1.0}, 16)
    q = p.regenerate(32)
    assert q.N == 32 and q.a[1, 1].real == pytest.approx(np.exp(-2))


def test_decay_d2():
    p = tk.build_kernel("factorized_exp", {"nu": 1.0}, 16)
    c = tk.check_decay(p, "D2", 0.9)
    assert c.holds and c.parameters["nu_tightest"] == pytest.approx(1.0)
    c = tk.check_decay(p, "D2", 1.5)
    assert not c.holds and c.witness is not None


# --------------------------------------------------------------------------
# symbols
# --------------------------------------------------------------------------


def test_delta_symbol_is_flat():
    s = tk.fourier_symbol(tk.build_kernel("delta", {}, 16))
    assert np.allclose(s.what_a, 1 / 16, atol=0, rtol=1e-15)
    assert np.allclose(s.s, 1.0)


def test_factorized_symbol_is_rank_one():
    N = 32
    s = tk.fourier_symbol(tk.build_kernel("factorized_exp", {"nu": 1.0}, N))
    d = tk.torus_distance(np.arange(N), N)
    f = np.fft.ifft(np.exp(-d)).real * N
    assert np.abs(np.outer(f, f) / N - s.what_a).max() < 1e-14


@settings(max_examples=25, deadline=None)
@given(st.integers(4, 9), st.integers(0, 2**32 - 1))
def test_fft_symbol_matches_brute_force(N, seed):
    rng = np.random.default_rng(seed)
    a = random_hermitian_table(rng, N, support=2, reflect=False)
    fft = tk._hat(a)
    assert np.abs(fft - tk.brute_force_symbol(a)).max() < 1e-12


@settings(max_examples=25, deadline=None)
@given(st.integers(4, 12), st.integers(0, 2**32 - 1))
def test_reflection_symmetric_table_has_real_symbol(N, seed):
    a = random_hermitian_table(np.random.default_rng(seed), N, support=2)
    s = tk.fourier_symbol(tk.CorrelationPair(N, a, a, "complex_hermitian"))
    assert s.what_a.dtype == float
    # continuous extension agrees with the grid values
    pts = np.arange(N) / N
    assert np.abs(s.tilde_a(pts, pts) - N * s.what_a).max() < 1e-10


def test_non_reflection_symmetric_table_rejected():
    N = 8
    a = np.zeros((N, N), complex)
    a[0, 0] = 1
    a[1, 2] = 0.3j
    a[2, 1] = -0.3j  # hermitian, but a_{-1,-2} != conj(a_{1,2})
    with pytest.raises(tk.StructureError):
        tk.fourier_symbol(tk.CorrelationPair(N, a, a, "complex_hermitian"))


def test_symbol_json():
    s = tk.fourier_symbol(tk.build_kernel("delta", {}, 4))
    data = json.loads(json.dumps(s.to_json()))
    assert data["N"] == 4


# --------------------------------------------------------------------------
# certificates
# --------------------------------------------------------------------------


def test_r1_factorized_and_grid_size_guard():
    p = tk.build_kernel("factorized_exp", {"nu": 1.0}, 32)
    c = tk.check_nonresonance_r1(p)
    # g(phi) = sum_x e^{i2pi phi x} e^{-|x|} has minimum (1-e^-1)/(1+e^-1) at phi=1/2
    assert c.holds
    assert c.parameters["xi1"] == pytest.approx(np.tanh(0.5), rel=1e-6)
    with pytest.raises(ValueError):
        tk.check_nonresonance_r1(p, grid_points=10)


def test_r2_factorized_equals_square_of_r1():
    s = tk.fourier_symbol(tk.build_kernel("factorized_exp", {"nu": 1.0}, 32))
    c = tk.check_nonresonance_r2(s)
    assert c.holds
    assert c.parameters["xi2"] == pytest.approx(np.tanh(0.5) ** 2, rel=1e-6)
    assert 0 < c.parameters["certified_lower_bound"] <= c.parameters["xi2"]


def test_r2_fails_for_vanishing_symbol():
    N = 16
    a = np.zeros((N, N))
    a[0, 0] = 1
    a[1, 0] = a[N - 1, 0] = a[0, 1] = a[0, N - 1] = 0.25
    # 1 + (cos 2pi phi + cos 2pi theta)/2 vanishes only at (1/2, 1/2)
    s = tk.fourier_symbol(tk.CorrelationPair(N, a, a))
    assert tk.check_bochner(s).holds
    c = tk.check_nonresonance_r2(s)
    assert not c.holds
    assert (c.witness["phi"], c.witness["theta"]) == pytest.approx((0.5, 0.5), abs=0.05)


def test_bochner_witness():
    N = 8
    a = np.zeros((N, N))
    a[0, 0] = 1
    a[1, 0] = a[N - 1, 0] = a[0, 1] = a[0, N - 1] = 0.5
    s = tk.fourier_symbol(tk.CorrelationPair(N, a, a))
    c = tk.check_bochner(s)
    assert not c.holds and (c.witness["p"], c.witness["q"]) == (N // 2, N // 2)


@pytest.mark.parametrize("K", [1, 2, 3])
def test_fid_matches_oracle_exhaustively(K):
    for bits in itertools.product([0, 1], repeat=K * K):
        Z = np.array(bits).reshape(K, K)
        assert tk.is_fully_indecomposable(Z) == (not tk.has_zero_block_decomposition(Z)), Z


@settings(max_examples=200, deadline=None)
@given(st.integers(4, 6), st.integers(0, 2**32 - 1), st.floats(0.2, 0.9))
def test_fid_matches_oracle_random(K, seed, density):
    Z = (np.random.default_rng(seed).random((K, K)) < density).astype(int)
    assert tk.is_fully_indecomposable(Z) == (not tk.has_zero_block_decomposition(Z))


def test_fid_examples():
    assert tk.is_fully_indecomposable(np.ones((3, 3)))
    assert not tk.is_fully_indecomposable(np.eye(3))
    assert tk.is_fully_indecomposable(np.array([[1, 1, 0], [0, 1, 1], [1, 0, 1]]))
    with pytest.raises(ValueError):
        tk.is_fully_indecomposable(np.ones((17, 17)))


def test_block_fid_certificate_flat_symbol():
    s = tk.fourier_symbol(tk.build_kernel("delta", {}, 8))
    c = tk.find_block_fid_certificate(s, 0.5)
    assert c.holds and c.parameters["K"] == 1 and c.parameters["xi0"] == 0.25


def test_block_fid_certificate_needs_larger_partition():
    # 1 + cos(2pi(phi - theta)) vanishes on a line, so R2 fails, yet a
    # banded partition certifies R0
    N = 16
    a = np.zeros((N, N))
    a[0, 0] = 1
    a[1, 1] = a[N - 1, N - 1] = 0.5  # 1 + cos(2 pi (phi - theta))
    s = tk.fourier_symbol(tk.CorrelationPair(N, a, a))
    assert not tk.check_nonresonance_r2(s).holds
    c = tk.find_block_fid_certificate(s, 1.8, K_max=16)
    assert c.holds and c.parameters["K"] > 1 and c.parameters["xi0"] == 0.9
    Z = np.array(c.witness["Z"])
    assert tk.is_fully_indecomposable(Z)


def test_certificate_json_roundtrip():
    s = tk.fourier_symbol(tk.build_kernel("factorized_exp", {"nu": 1.0}, 16))
    c = tk.check_nonresonance_r2(s)
    d = tk.ConditionCertificate.from_json(json.loads(json.dumps(c.to_json())))
    assert d.holds == c.holds and d.parameters["xi2"] == pytest.approx(c.parameters["xi2"])


def test_ab_compatibility_complex():
    N = 16
    ok = tk.fourier_symbol(tk.build_kernel("factorized_exp", {"nu": 1.0, "b_scale": 0.5}, N, "complex_hermitian"))
    assert tk.check_ab_compatibility(ok, 0.0).holds
    bad = tk.fourier_symbol(tk.build_kernel("factorized_exp", {"nu": 1.0, "b_scale": 1.5}, N, "complex_hermitian"))
    c = tk.check_ab_compatibility(bad, 0.0)
    assert not c.holds and c.witness is not None
    # b = a saturates the inequality: fine at xi3 = 0, fails strictly
    eq = tk.fourier_symbol(tk.build_kernel("factorized_exp", {"nu": 1.0, "b_scale": 1.0}, N, "complex_hermitian"))
    assert tk.check_ab_compatibility(eq, 0.0).holds
    assert not tk.check_ab_compatibility(eq, 1e-3).holds


def test_ab_compatibility_rejects_unreflected_b():
    N = 8
    wa = np.full((N, N), 1.0 / N)
    wb = np.zeros((N, N), complex)
    wb[1, 2] = 0.01
    wb[2, 1] = 0.01
    with pytest.raises(tk.StructureError):
        tk.check_ab_compatibility(tk.symbol_from_arrays(wa, wb))
