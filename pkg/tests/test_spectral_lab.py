import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from torus_qve import ensemble as ens, qve, spectral_lab as lab, torus_kernel as tk


def symbol(preset="delta", N=64, **params):
    return tk.fourier_symbol(tk.build_kernel(preset, params, N))


def test_resolvent_trivial_cases():
    assert np.allclose(lab.resolvent(np.zeros((3, 3)), 1j), 1j * np.eye(3))
    G = lab.resolvent(np.diag([1.0, -1.0]), 1j)
    assert np.allclose(G, np.diag([(1 + 1j) / 2, (-1 + 1j) / 2]))
    with pytest.raises(ValueError):
        lab.resolvent(np.eye(2), 0.5)


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 2**31), st.floats(-3, 3), st.floats(1e-3, 1))
def test_resolvent_herglotz(seed, tau, eta):
    H = ens.sample_goe_gue(32, "real_symmetric", seed)
    G = lab.resolvent(H, complex(tau, eta))
    U = np.random.default_rng(seed).standard_normal((100, 32))
    assert np.all(np.einsum("ki,ij,kj->k", U, G, U).imag > 0)


def test_trace_from_resolvent_equals_eigenvalue_sum():
    H = ens.sample_goe_gue(64, "complex_hermitian", 3)
    z = 0.3 + 0.02j
    lam = np.linalg.eigvalsh(H)
    assert abs(np.trace(lab.resolvent(H, z)) / 64 - lab.stieltjes_from_eigenvalues(lam, z)) < 1e-8


def test_isospectrality():
    H = ens.sample_goe_gue(64, "real_symmetric", 1)
    assert lab.isospectrality_error(H) < 1e-8


def test_scaling_fit_identities():
    ns = [128, 256, 512, 1024]
    fit = lab.scaling_fit([(n, 3.0 * n**-0.5) for n in ns], -0.5)
    assert fit.fitted_exponent == pytest.approx(-0.5, abs=1e-12) and fit.passes
    assert lab.scaling_fit([(n, 2.0) for n in ns]).fitted_exponent == pytest.approx(0.0, abs=1e-12)
    with pytest.raises(lab.FitError):
        lab.scaling_fit([(n, 1.0) for n in ns[:3]])
    with pytest.raises(lab.FitError):
        lab.scaling_fit({n: [1.0] * 5 for n in ns})


def test_scaling_fit_from_replicas_uses_quantile():
    vals = {n: np.linspace(1, 2, 21) * n**-0.3 for n in [64, 128, 256, 512]}
    fit = lab.scaling_fit(vals, -0.3)
    assert fit.fitted_exponent == pytest.approx(-0.3, abs=1e-12)
    assert fit.points[0][1] == pytest.approx(1.9 * 64**-0.3)


def test_local_law_flat_reduces_to_wigner():
    N = 128
    s = symbol("delta", N)
    z = 1j * N**-0.3
    prof = qve.q_profile_direct(s, [z])
    assert np.abs(prof.q[0, 1:]).max() < 1e-14
    rep = lab.local_law_report(ens.StreamBatch(s, "real_symmetric", 10, 1), prof, [z], 0.7, profile_symbol=s)
    assert len(rep.rows) == 10
    agg = rep.aggregates[0]
    assert agg["trace_ratio_median"] <= 10
    for r in rep.rows:
        assert r["entrywise_error"] >= 0 and r["trace_error"] >= 0


def test_local_law_input_checks():
    s = symbol("delta", 32)
    other = symbol("factorized_exp", 32, nu=1.0)
    sol = qve.solve_qve_grid(s, [0.0], [1.0, 0.5])
    b = ens.StreamBatch(other, "real_symmetric", 2, 1)
    with pytest.raises(lab.InputError):
        lab.local_law_report(b, sol, [0.5j], 0.7)
    good = ens.StreamBatch(s, "real_symmetric", 2, 1)
    with pytest.raises(lab.InputError):
        lab.local_law_report(good, sol, [0.5j], 0.0)
    sol2 = qve.solve_qve_grid(s, [0.0], [1.0, 0.01])
    with pytest.raises(lab.InputError):
        lab.local_law_report(good, sol2, [0.01j], 0.7)  # below N^(gamma-1)


def test_local_law_exports(tmp_path):
    s = symbol("delta", 32)
    sol = qve.solve_qve_grid(s, [0.0], [1.0, 0.5])
    rep = lab.local_law_report(ens.StreamBatch(s, "real_symmetric", 3, 1), sol, [0.5j], 0.7)
    rep.write_csv(tmp_path / "ll.csv")
    rep.write_json(tmp_path / "ll.json")
    assert len((tmp_path / "ll.csv").read_text().splitlines()) == 4


def test_offdiagonal_average_tracks_q():
    s = symbol("factorized_exp", 64, nu=1.0)
    q = qve.q_profile_direct(s, [1j]).q[0]
    av = lab.averaged_offdiagonal(ens.StreamBatch(s, "real_symmetric", 20, 2), 1j, range(4))
    band = np.sqrt(q[0].imag / 64) + 1 / 64
    assert np.all(np.abs(np.abs(av["mean"]) - np.abs(q[:4])) <= band)


def test_gap_statistics_goe_mean_one():
    sc = lab.semicircle_density()
    b = ens.StreamBatch(symbol("delta", 256), "real_symmetric", 20, 5, reference=True)
    g = lab.gap_statistics(b, sc, n=2)
    assert g.gaps[1].mean() == pytest.approx(1.0, abs=0.03)
    assert g.gaps[2].mean() == pytest.approx(2.0, abs=0.06)
    assert lab.gap_statistics(b, sc, n=0).gaps == {}


def test_gap_statistics_parameter_errors():
    sc = lab.semicircle_density()
    b = ens.StreamBatch(symbol("delta", 64), "real_symmetric", 1, 5, reference=True)
    with pytest.raises(lab.ParameterError):
        lab.gap_statistics(b, sc, rho0=0)
    with pytest.raises(lab.ParameterError):
        lab.gap_statistics(b, sc, n=5)
    with pytest.raises(lab.ParameterError):
        lab.gap_statistics(b, sc, rho0=10.0)


def test_universality_compare_self_is_zero(tmp_path):
    sc = lab.semicircle_density()
    b = ens.StreamBatch(symbol("delta", 128), "real_symmetric", 5, 5, reference=True)
    g = lab.gap_statistics(b, sc)
    rep = lab.universality_compare(g, g, min_gaps=10)
    assert rep["max_ks"] == 0 and rep["rows"][0]["mean_diff"] == 0
    with pytest.raises(lab.ParameterError):
        lab.universality_compare(g, g)
    g.write_csv(tmp_path / "gaps.csv")
    assert (tmp_path / "gaps.csv").read_text().startswith("gap\n")


def test_bump_is_smooth_and_compact():
    s = np.linspace(-1, 3, 401)
    f = lab.bump(s, 1.0)
    assert f.max() == pytest.approx(np.exp(-1))
    assert np.all(f[np.abs(s - 1) >= 0.5] == 0)


class _Fixed:
    def __init__(self, mats):
        self.mats = mats
        self.N = mats[0].shape[0]

    def __iter__(self):
        return iter(self.mats)


def test_delocalization_flags_diagonal_matrix():
    rep = lab.delocalization_report(_Fixed([np.diag(np.arange(16.0))]))
    assert rep["localized"] and rep["rows"][0]["sup_norm"] == 1.0


def test_delocalization_basis_direction_equals_sup_norm():
    H = ens.sample_goe_gue(32, "real_symmetric", 4)
    e = np.zeros((1, 32))
    e[0, 0] = 1
    rep = lab.delocalization_report(_Fixed([H]), directions=e)
    _, U = np.linalg.eigh(H)
    assert rep["rows"][0]["scaled_proj"][0] == pytest.approx(np.sqrt(32) * np.abs(U[0]).max())
    assert not rep["localized"]


def test_histogram_matches_semicircle():
    lam = np.concatenate([np.linalg.eigvalsh(ens.sample_goe_gue(512, "real_symmetric", 7, r)) for r in range(10)])
    assert lab.histogram_deviation(lam, lab.semicircle_density(), bins=40) <= 0.02


def test_fixed_directions_are_deterministic_unit_vectors():
    B = lab.fixed_directions(16)
    assert np.array_equal(B, lab.fixed_directions(16))
    assert np.allclose(np.linalg.norm(B, axis=1), 1)
