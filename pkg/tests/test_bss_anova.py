import warnings
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dyndisc.bss_anova import (
    ComponentSpec,
    DiscrepancyModel,
    KLBasis,
    bernoulli_poly,
    build_kl_basis,
    default_layout,
    eval_basis,
    eval_basis_deriv,
    eval_discrepancy,
    gram_k1,
    k1,
    k2,
    kl_spectrum,
    midpoint_grid,
    nystrom_extension,
)

unit = st.floats(0.0, 1.0, allow_nan=False)


def test_kernel_matches_exact_rationals(reference):
    for a, b, exact, _ in reference["kernel"]["k1"]:
        val = k1(float(Fraction(a)), float(Fraction(b)))
        assert val == pytest.approx(float(Fraction(exact)), abs=1e-12)


def test_bernoulli_values(reference):
    assert bernoulli_poly(2, 0.0) == pytest.approx(float(Fraction(reference["kernel"]["B2(0)"])), abs=1e-12)
    assert bernoulli_poly(4, 1.0) == pytest.approx(float(Fraction(reference["kernel"]["B4(1)"])), abs=1e-12)
    assert bernoulli_poly(1, 1 / 3) == pytest.approx(float(Fraction(reference["kernel"]["B1(1/3)"])), abs=1e-12)


def test_bernoulli_rejects_unsupported_order():
    with pytest.raises(ValueError):
        bernoulli_poly(3, 0.5)


def test_kernel_rejects_out_of_unit_interval():
    with pytest.raises(ValueError):
        k1(1.2, 0.3)
    with pytest.raises(ValueError):
        gram_k1([0.1, -0.5])


@given(unit, unit)
def test_kernel_symmetric(a, b):
    assert k1(a, b) == pytest.approx(k1(b, a), abs=1e-15)


@given(unit, unit, unit, unit)
def test_interaction_is_product(a, b, c, d):
    assert k2((a, b), (c, d)) == pytest.approx(k1(a, c) * k1(b, d), abs=1e-15)


@settings(max_examples=30, deadline=None)
@given(st.lists(unit, min_size=2, max_size=60))
def test_gram_psd(points):
    lam = np.linalg.eigvalsh(gram_k1(np.array(points)))
    assert lam.min() >= -1e-8


def test_random_gram_psd_100():
    pts = np.random.default_rng(0).random(100)
    assert np.linalg.eigvalsh(gram_k1(pts)).min() >= -1e-8


def test_rows_integrate_to_zero():
    g = midpoint_grid(512)
    means = k1(g[:, None], g[None, :]).mean(axis=1)
    assert np.max(np.abs(means)) < 1e-6


def test_spectrum_matches_fine_grid(reference):
    lam, _ = kl_spectrum(512)
    np.testing.assert_allclose(lam[:10], reference["spectrum_G4096"], rtol=1e-4)


def test_reconstruction_within_tail_bound():
    g = 512
    b = build_kl_basis(g, 64)
    lam_all, _ = kl_spectrum(g)
    kmat = k1(b.grid[:, None], b.grid[None, :])
    err = np.max(np.abs(kmat - b.phi @ b.phi.T))
    assert err <= lam_all[64:].sum() + 1e-6


def test_sign_changes_nondecreasing():
    b = build_kl_basis(512, 64)
    e = b.unit_eigenfunctions()
    changes = [int(np.sum(np.diff(np.sign(e[:, l])) != 0)) for l in range(64)]
    assert all(c1 <= c2 for c1, c2 in zip(changes, changes[1:]))
    assert changes[0] == 1


def test_eigenfunctions_orthonormal(basis):
    e = basis.unit_eigenfunctions()
    np.testing.assert_allclose(e.T @ e / basis.grid_size, np.eye(basis.n_basis), atol=1e-10)


def test_sign_convention(basis):
    e = basis.unit_eigenfunctions()
    for l in range(basis.n_basis):
        first = e[np.flatnonzero(np.abs(e[:, l]) > 1e-12)[0], l]
        assert first > 0


def test_grid_too_coarse():
    with pytest.raises(ValueError):
        build_kl_basis(50, 25)


def test_truncate_bounds(basis):
    assert basis.truncate(5).n_basis == 5
    np.testing.assert_array_equal(basis.truncate(5).phi, basis.phi[:, :5])
    with pytest.raises(ValueError):
        basis.truncate(26)


def test_interpolation_agrees_with_nystrom(basis):
    for u in (0.0137, 0.37, 0.5, 0.91):
        np.testing.assert_allclose(eval_basis(basis, u), nystrom_extension(basis, u), atol=5e-6)
    # at grid nodes interpolation is exact and Nystrom reproduces the eigenvector
    u = basis.grid[100]
    np.testing.assert_allclose(eval_basis(basis, u), basis.phi[100], atol=1e-12)
    np.testing.assert_allclose(nystrom_extension(basis, u), basis.phi[100], atol=1e-10)


def test_basis_derivative_is_finite_difference(basis):
    u, h = 0.4321, 1e-7
    fd = (eval_basis(basis, u + h) - eval_basis(basis, u)) / h
    np.testing.assert_allclose(eval_basis_deriv(basis, u), fd, atol=1e-6)


def test_basis_json_roundtrip(basis, tmp_path):
    basis.to_json(tmp_path / "b.json")
    b2 = KLBasis.from_json(tmp_path / "b.json")
    np.testing.assert_array_equal(b2.phi, basis.phi)
    np.testing.assert_array_equal(b2.eigenvalues, basis.eigenvalues)


def test_default_layout_size(layout):
    assert len(layout.specs) == 9
    assert layout.n_beta == 225
    assert [s.target for s in layout.specs] == ["E"] * 3 + ["K"] * 6


def test_three_way_layout():
    specs = default_layout(25, three_way=True)
    assert any(len(s.input_indices) == 3 for s in specs)


def test_equilibrium_component_cannot_use_x():
    with pytest.raises(ValueError):
        ComponentSpec("E", ("x",))


def test_layout_order_enforced(basis):
    specs = [ComponentSpec("K", ("x",)), ComponentSpec("E", ("p",))]
    with pytest.raises(ValueError):
        DiscrepancyModel.zeros(basis, specs)


def test_beta_length_checked(layout):
    with pytest.raises(ValueError):
        layout.with_beta(np.zeros(10))


def test_zero_beta_gives_zero(layout):
    assert eval_discrepancy(layout, "E", (0.1, 0.2, 350.0)) == 0.0
    assert eval_discrepancy(layout, "K", {"x": 0.1, "p": 0.2, "T": 350.0}) == 0.0


@settings(max_examples=25, deadline=None)
@given(st.floats(-2, 2), st.floats(0, 0.5), st.floats(0, 1), st.floats(310, 380))
def test_discrepancy_linear_in_beta(c, x, p, T):
    base = DiscrepancyModel.zeros(build_kl_basis(128, 8), default_layout(8))
    beta = np.linspace(-1, 1, base.n_beta)
    d1 = eval_discrepancy(base.with_beta(beta), "K", (x, p, T))
    dc = eval_discrepancy(base.with_beta(c * beta), "K", (x, p, T))
    assert dc == pytest.approx(c * d1, abs=1e-12)


def test_main_effect_is_single_basis_column(basis):
    model = DiscrepancyModel.zeros(basis, [ComponentSpec("E", ("p",))])
    beta = np.zeros(25)
    beta[3] = 1.0
    u = 0.3
    assert eval_discrepancy(model.with_beta(beta), "E", {"p": u}) == pytest.approx(eval_basis(basis, u)[3])


def test_clamping_warns(random_disc):
    with pytest.warns(RuntimeWarning):
        high = eval_discrepancy(random_disc, "E", (0.1, 0.2, 390.0))
    edge = eval_discrepancy(random_disc, "E", (0.1, 0.2, 380.0))
    assert high == edge
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        eval_discrepancy(random_disc, "E", (0.1, 0.2, 350.0))


def test_missing_target_rejected(basis):
    model = DiscrepancyModel.zeros(basis, [ComponentSpec("K", ("x",))])
    with pytest.raises(ValueError):
        eval_discrepancy(model, "E", (0.1, 0.2, 350.0))
