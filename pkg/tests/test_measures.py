import math

import numpy as np
import pytest
import sympy as sp
from hypothesis import given
from hypothesis import strategies as st
from scipy import integrate as spi

from cmalab.errors import DegenerateBase, InvalidFamily
from cmalab.fibration import Fibration
from cmalab.lattice import BackgroundForm, ScalarField, build_grid, integrate
from cmalab.measures import (
    MeasureFamily,
    density_report,
    jacobian_density,
    lp_norm,
    mixed_determinant,
    normalize_mass,
    peak_density,
    pole_cell_averages,
    pushforward_density,
    realize_density,
    ricci_bounds_of_measure,
    singular_pole_family,
)

EPS_SWEEP = (1e-1, 1e-2, 1e-3, 1e-4)


def continuum_pole_mass(eps, alpha=0.4):
    """Oracle: integral of (eps^2 + sin^2 pi x + sin^2 pi y)^-alpha over the unit square."""
    f = lambda y, x: (eps ** 2 + math.sin(math.pi * (x - 0.5)) ** 2 + math.sin(math.pi * (y - 0.5)) ** 2) ** -alpha
    # split at the pole so the adaptive rule sees the peak at a corner
    total = 0.0
    for (a, b) in ((0, 0.5), (0.5, 1)):
        for (c, d) in ((0, 0.5), (0.5, 1)):
            total += spi.dblquad(f, a, b, c, d, epsabs=1e-11, epsrel=1e-10)[0]
    return total


def test_smooth_zero_amplitude_is_one():
    g = build_grid(2, "reduced", 16)
    assert np.allclose(realize_density(MeasureFamily(), g).values, 1.0)


def test_family_validation():
    with pytest.raises(InvalidFamily):
        singular_pole_family(alpha=0.5, p=2)
    with pytest.raises(InvalidFamily):
        MeasureFamily(p=1.0)
    with pytest.raises(InvalidFamily):
        singular_pole_family(eps=-1.0)
    with pytest.raises(InvalidFamily):
        MeasureFamily(amplitude=1.2)
    with pytest.raises(InvalidFamily):
        realize_density(singular_pole_family(alpha=0.5, p=1.5, eps=0.0), build_grid(1, "reduced", 16))


def test_peak_at_center_matches_quadrature_oracle():
    g = build_grid(1, "full", 64)
    fam = singular_pole_family(eps=0.1, center=(0.5, 0.5))
    expected = 0.01 ** -0.4 / continuum_pole_mass(0.1)
    assert peak_density(fam, g) == pytest.approx(expected, rel=1e-6)


def test_cell_averages_reproduce_continuum_mass():
    for eps in (1e-1, 1e-3):
        g = build_grid(1, "full", 64)
        vals = pole_cell_averages(g, (0.5, 0.5), eps, 0.4)
        assert integrate(ScalarField(g, vals)) == pytest.approx(continuum_pole_mass(eps), rel=1e-6)


def test_pole_family_lp_uniform_while_peak_blows_up():
    g = build_grid(1, "full", 256)
    lps, peaks = [], []
    for eps in EPS_SWEEP:
        fam = singular_pole_family(eps=eps)
        lps.append(lp_norm(realize_density(fam, g), 2))
        peaks.append(peak_density(fam, g))
    assert max(lps) / min(lps) < 1.25
    slope = np.polyfit(np.log(EPS_SWEEP), np.log(peaks), 1)[0]
    assert slope == pytest.approx(-0.8, abs=0.05)
    # 8x working-grid oracle
    fine = build_grid(1, "full", 2048)
    for eps, lp in zip(EPS_SWEEP[::3], lps[::3]):
        assert lp_norm(realize_density(singular_pole_family(eps=eps), fine), 2) == pytest.approx(lp, rel=0.02)


def test_lp_norm_constants():
    g = build_grid(1, "reduced", 16)
    assert lp_norm(ScalarField.constant(g, 1.0), 3.5) == pytest.approx(1.0)
    assert lp_norm(ScalarField.constant(g, 2.0), 2) == pytest.approx(2.0)


def test_lp_norm_stable_under_grid_doubling():
    fam = singular_pole_family(eps=1e-3)
    a = lp_norm(realize_density(fam, build_grid(1, "full", 256)), 2)
    b = lp_norm(realize_density(fam, build_grid(1, "full", 512)), 2)
    assert abs(a - b) / b < 0.05


def test_ricci_bounds_constant_density():
    g = build_grid(2, "reduced", 16)
    assert ricci_bounds_of_measure(ScalarField.constant(g, 3.0), BackgroundForm.identity(2)) == (0.0, 0.0)


def test_ricci_bounds_of_exponential_density():
    a = 0.3
    m = 256
    g = build_grid(1, "reduced", m)
    x = g.coords(0)
    lo, hi = ricci_bounds_of_measure(ScalarField(g, np.exp(a * np.cos(2 * math.pi * x))), BackgroundForm.identity(1))
    # -Ric = 1/4 (log density)'' = -a pi^2 cos; the stencil carries a sinc^2 factor and
    # the largest |cos| at cell-centred nodes is cos(pi / m)
    factor = (math.sin(math.pi / m) / (math.pi / m)) ** 2 * math.cos(math.pi / m)
    assert lo == pytest.approx(a * math.pi ** 2 * factor, rel=1e-9)
    assert hi == pytest.approx(a * math.pi ** 2 * factor, rel=1e-9)


def test_ricci_lower_bound_uniform_for_resolved_poles():
    g = build_grid(1, "full", 256)
    theta = BackgroundForm.identity(1)
    lows, highs = [], []
    for eps in (1e-1, 3e-2, 1e-2):  # eps >= 2.5 h
        lo, hi = ricci_bounds_of_measure(realize_density(singular_pole_family(eps=eps), g), theta)
        lows.append(lo)
        highs.append(hi)
    assert max(lows) < 2 * lows[0]
    assert highs[-1] > 20 * highs[0]


@pytest.mark.xfail(strict=True, reason="once eps < h the discrete Hessian of log density is not psh next to the pole")
def test_ricci_lower_bound_uniform_down_to_eps_1e4_on_8x_grid():
    g = build_grid(1, "full", 2048)
    theta = BackgroundForm.identity(1)
    lows = [ricci_bounds_of_measure(realize_density(singular_pole_family(eps=eps), g), theta)[0] for eps in EPS_SWEEP]
    assert max(lows) < 2 * lows[0]


def test_normalize_mass_examples():
    g = build_grid(1, "reduced", 64)
    assert np.allclose(normalize_mass(ScalarField.constant(g, 2.0), 1.0).values, 1.0)
    x = g.coords(0)
    d = normalize_mass(ScalarField(g, 3.0 + np.cos(2 * math.pi * x)), 1.0)
    assert abs(integrate(d) - 1.0) < 1e-14


def test_normalization_constant_bounded_across_eps():
    g = build_grid(1, "full", 128)
    consts = []
    for eps in EPS_SWEEP:
        raw = realize_density(singular_pole_family(eps=eps), g, target_mass=None)
        consts.append(1.0 / integrate(raw))
    # the oracle limit is 1 / mass of the eps = 0 family
    limit = 1.0 / continuum_pole_mass(0.0)
    assert max(consts) / min(consts) < 1.5
    assert consts[-1] == pytest.approx(limit, rel=0.01)


def test_density_report_fields_finite():
    g = build_grid(1, "full", 64)
    d = realize_density(singular_pole_family(eps=0.01), g)
    rep = density_report(d, 2.0, BackgroundForm.identity(1))
    assert rep.mass == pytest.approx(1.0)
    assert all(np.isfinite([rep.lp_norm, rep.ricci_lower_A, rep.ricci_upper_A, rep.sup_density]))


def test_jacobian_density_examples():
    g = build_grid(2, "reduced", 8)
    theta = BackgroundForm.identity(2)
    assert np.allclose(jacobian_density(BackgroundForm.diagonal(1, 0), theta, g, kappa=1).values, 1.0)
    assert np.allclose(jacobian_density(theta, theta, g, kappa=2).values, 1.0)
    assert np.allclose(jacobian_density(BackgroundForm(np.zeros((2, 2))), theta, g, kappa=1).values, 0.0)


def hermitian(vals):
    a, b, re, im = vals
    return np.array([[a, re - 1j * im], [re + 1j * im, b]])


finite = st.floats(-3, 3, allow_nan=False)


@given(st.tuples(finite, finite, finite, finite), st.tuples(finite, finite, finite, finite), st.integers(0, 2))
def test_mixed_determinant_matches_symbolic_expansion(av, bv, k):
    A, B = hermitian(av), hermitian(bv)
    s = sp.symbols("s")
    M = sp.Matrix(2, 2, lambda i, j: sp.Rational(complex(A[i, j]).real) + sp.I * sp.Rational(complex(A[i, j]).imag)
                  + s * (sp.Rational(complex(B[i, j]).real) + sp.I * sp.Rational(complex(B[i, j]).imag)))
    poly = sp.Poly(sp.expand(M.det()), s)
    coeff = complex(poly.coeff_monomial(s ** (2 - k)))
    assert mixed_determinant(A, B, k) * math.comb(2, k) == pytest.approx(coeff.real, abs=1e-8)


def test_pushforward_product_density():
    g = build_grid(2, "reduced", (32, 16))
    x1, x2 = g.mesh()
    u = 1 + 0.4 * np.cos(2 * math.pi * x1)
    v = 1 + 0.5 * np.sin(2 * math.pi * x2)
    F = pushforward_density(ScalarField(g, u * v), Fibration(1), BackgroundForm.diagonal(1, 0))
    assert np.allclose(F.values, u[:, 0])
    F = pushforward_density(ScalarField.constant(g, 1.0), Fibration(1), BackgroundForm.diagonal(2, 0))
    assert np.allclose(F.values, 0.5)


def test_pushforward_converges_under_fiber_refinement():
    def omega(grid):
        x1, x2 = grid.mesh()
        return ScalarField(grid, np.exp(0.5 * np.cos(2 * math.pi * x1) * np.sin(2 * math.pi * x2) ** 2))

    chi = BackgroundForm.diagonal(1, 0)
    coarse = pushforward_density(omega(build_grid(2, "reduced", (32, 8))), Fibration(1), chi).values
    fine = pushforward_density(omega(build_grid(2, "reduced", (32, 32))), Fibration(1), chi).values
    assert np.abs(coarse - fine).max() / np.abs(fine).max() < 0.01


def test_pushforward_degenerate_base():
    g = build_grid(2, "reduced", 8)
    with pytest.raises(DegenerateBase):
        pushforward_density(ScalarField.constant(g, 1.0), Fibration(1), BackgroundForm(np.zeros((2, 2))))
