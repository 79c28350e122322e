import math

import numpy as np
import pytest
import sympy as sp

from cmalab.errors import NoConvergence, PositivityLost
from cmalab.lattice import BackgroundForm, ScalarField, build_grid, complex_hessian, integrate, metric_from_potential
from cmalab.measures import MeasureFamily, realize_density
from cmalab.solver import (
    ProblemSpec,
    SolveParams,
    class_volume,
    continuation_path,
    detect_tmin,
    geometric_schedule,
    manufactured_rhs,
    normalization_constant,
    residual,
    solve_base_limit,
    solve_ma,
)

ZERO1 = BackgroundForm(np.zeros((1, 1)))
ID1 = BackgroundForm.identity(1)
ID2 = BackgroundForm.identity(2)
FIBER_CHI = BackgroundForm.diagonal(1, 0)


def unit(grid):
    return ScalarField.constant(grid, 1.0)


def fourier_solve_1d(rhs, m):
    """Oracle: periodic solve of 1/4 D2 phi = rhs (mean-free) with the exact discrete symbol."""
    k = np.fft.fftfreq(m, d=1.0 / m)
    symbol = -4.0 * np.sin(np.pi * k / m) ** 2 * m * m / 4.0
    f = np.fft.fft(rhs - rhs.mean())
    out = np.zeros_like(f)
    out[1:] = f[1:] / symbol[1:]
    return np.fft.ifft(out).real


# --- constants ---------------------------------------------------------------


def test_class_volume_examples():
    for t in (1.0, 0.3, 0.01):
        v = class_volume(FIBER_CHI, ID2, t)
        assert v == pytest.approx(t * (1 + t))
        assert 1.0 <= v / t <= 2.0
    assert class_volume(BackgroundForm(np.zeros((2, 2))), ID2, 1.0) == pytest.approx(1.0)
    assert class_volume(ID1, ID1, 0.5) == pytest.approx(1.5)


def test_normalization_constant_examples():
    g = build_grid(2, "reduced", 16)
    for t in (1.0, 0.1, 0.01):
        spec = ProblemSpec(g, FIBER_CHI, ID2, t, 0, unit(g), kappa=1)
        assert normalization_constant(spec) == pytest.approx(math.log(1 + t), abs=1e-14)
    spec = ProblemSpec(g, BackgroundForm(np.zeros((2, 2))), ID2, 1.0, 1, ScalarField.constant(g, 2.0), kappa=2)
    assert normalization_constant(spec) == pytest.approx(math.log(0.5))
    t = 0.2
    spec = ProblemSpec(g, FIBER_CHI, ID2, t, 0, ScalarField.constant(g, (1 + t)), kappa=1)
    assert normalization_constant(spec) == pytest.approx(0.0, abs=1e-14)


# --- residual and manufactured densities -------------------------------------


def test_residual_zero_for_trivial_problem():
    g = build_grid(1, "reduced", 32)
    spec = ProblemSpec(g, ZERO1, ID1, 1.0, 0, unit(g), c_t_override=0.0)
    assert np.abs(residual(spec, ScalarField.constant(g, 0.0)).values).max() == 0.0


def test_residual_of_continuum_solution_is_second_order():
    a = 0.05
    errs = []
    for m in (64, 128):
        g = build_grid(1, "reduced", m)
        x = g.coords(0)
        phi = ScalarField(g, a * np.cos(2 * math.pi * x))
        dens = ScalarField(g, 1 - a * math.pi ** 2 * np.cos(2 * math.pi * x))  # 1 + 1/4 phi''
        spec = ProblemSpec(g, ZERO1, ID1, 1.0, 0, dens, c_t_override=0.0)
        errs.append(np.abs(residual(spec, phi).values).max())
    assert errs[1] < 0.3 * errs[0]
    assert errs[1] < 1e-3


def test_manufactured_rhs_examples():
    g = build_grid(1, "reduced", 64)
    spec = ProblemSpec(g, ZERO1, ID1, 1.0, 0, unit(g))
    assert np.allclose(manufactured_rhs(spec, ScalarField.constant(g, 0.0)).values, 1.0)
    x = g.coords(0)
    phi = ScalarField(g, 0.03 * np.cos(2 * math.pi * x))
    expected = 1 + complex_hessian(phi).diag[0]
    assert np.allclose(manufactured_rhs(spec, phi).values, expected, rtol=0, atol=1e-15)
    spec1 = ProblemSpec(g, ZERO1, ID1, 1.0, 1, unit(g))
    base = manufactured_rhs(spec1, phi).values
    shifted = manufactured_rhs(spec1, phi.with_values(phi.values + 0.7)).values
    assert np.allclose(shifted, base * math.exp(-0.7))
    g2 = build_grid(2, "reduced", 8)
    spec2 = ProblemSpec(g2, FIBER_CHI, ID2, 0.3, 0, unit(g2), kappa=1)
    # phi* = 0: density is the class volume over t^(n - kappa)
    assert np.allclose(manufactured_rhs(spec2, ScalarField.constant(g2, 0.0)).values, 1.3)


def test_manufactured_rhs_is_exact_for_solver():
    g = build_grid(2, "reduced", 32)
    x1, x2 = g.mesh()
    phi = ScalarField(g, 0.04 * np.sin(2 * math.pi * x1) * np.cos(2 * math.pi * x2))
    base = ProblemSpec(g, FIBER_CHI, ID2, 0.5, 1, unit(g), kappa=1, c_t_override=0.0)
    spec = base.replace(density=manufactured_rhs(base, phi))
    assert np.abs(residual(spec, phi).values).max() < 1e-13
    sol = solve_ma(spec)
    assert np.abs(sol.phi.values - phi.values).max() < 1e-10


# --- solve_ma ----------------------------------------------------------------


def test_trivial_solve():
    g = build_grid(2, "reduced", 16)
    spec = ProblemSpec(g, BackgroundForm(np.zeros((2, 2))), ID2, 1.0, 0, unit(g), kappa=2)
    sol = solve_ma(spec)
    assert sol.converged and sol.newton_iters == 0
    assert np.abs(sol.phi.values).max() == 0.0
    assert sol.c_t == pytest.approx(0.0, abs=1e-15)


def test_linear_reduced_equation_matches_fourier_oracle():
    m = 128
    g = build_grid(1, "reduced", m)
    x = g.coords(0)
    dens = ScalarField(g, 1 + 0.3 * np.cos(2 * math.pi * x) + 0.1 * np.sin(6 * math.pi * x))
    sol = solve_ma(ProblemSpec(g, ZERO1, ID1, 1.0, 0, dens))
    oracle = fourier_solve_1d(dens.values / dens.values.mean() - 1.0, m)
    d = sol.phi.values - oracle
    assert np.abs(d - d.mean()).max() < 1e-10
    # log-det Newton is not one step even though the equation is linear
    assert sol.newton_iters <= 6
    assert sol.phi.values.max() == pytest.approx(0.0, abs=1e-15)


def test_closed_form_cosine_density():
    amp = 0.2
    for m in (64, 128, 256):
        g = build_grid(1, "reduced", m)
        x = g.coords(0)
        spec = ProblemSpec(g, ZERO1, ID1, 1.0, 0, ScalarField(g, 1 + amp * np.cos(2 * math.pi * x)))
        phi = solve_ma(spec).phi.values
        exact = -(amp / math.pi ** 2) * np.cos(2 * math.pi * x)
        d = phi - exact
        assert np.abs(d - d.mean()).max() <= 10 / m ** 2


def manufactured_density_symbolic(amplitude, t, lam):
    """Continuum density for phi* = a sin(2 pi x1) sin(2 pi x2) on the reduced n=2 model."""
    x1, x2 = sp.symbols("x1 x2")
    phi = amplitude * sp.sin(2 * sp.pi * x1) * sp.sin(2 * sp.pi * x2)
    H = sp.Matrix(2, 2, lambda j, k: sp.diff(phi, [x1, x2][j], [x1, x2][k]) / 4)
    M = sp.diag(1 + t, t) + H
    dens = M.det() * sp.exp(-lam * phi) / t
    return sp.lambdify((x1, x2), dens, "numpy"), sp.lambdify((x1, x2), phi, "numpy")


@pytest.mark.parametrize("lam", [0, 1])
def test_manufactured_reduced_n2_recovered_within_10h2(lam):
    t = 0.5
    dens_f, phi_f = manufactured_density_symbolic(0.05, t, lam)
    for m in (32, 64):
        g = build_grid(2, "reduced", m)
        x1, x2 = g.mesh()
        spec = ProblemSpec(g, FIBER_CHI, ID2, t, lam, ScalarField(g, dens_f(x1, x2)), kappa=1, c_t_override=0.0)
        sol = solve_ma(spec)
        d = sol.phi.values - phi_f(x1, x2)
        if lam == 0:
            d = d - d.mean()
        assert np.abs(d).max() <= 10 / m ** 2


def test_no_convergence_reports_best_residual():
    g = build_grid(1, "reduced", 64)
    x = g.coords(0)
    spec = ProblemSpec(g, ZERO1, ID1, 1.0, 0, ScalarField(g, 1 + 0.5 * np.cos(2 * math.pi * x)))
    with pytest.raises(NoConvergence) as info:
        solve_ma(spec, SolveParams(max_newton=1, residual_tol=1e-14))
    assert 0 < info.value.best_residual < 1


def test_nonpositive_class_is_rejected():
    g = build_grid(2, "reduced", 8)
    spec = ProblemSpec(g, BackgroundForm.diagonal(1, -0.5), ID2, 0.2, 0, unit(g))
    with pytest.raises(PositivityLost):
        solve_ma(spec)


def test_warm_start_matches_cold_start():
    g = build_grid(2, "reduced", 32)
    dens = realize_density(MeasureFamily(kind="product", amplitude=0.3, fiber_amplitude=0.3), g)
    tmpl = ProblemSpec(g, FIBER_CHI, ID2, 0.3, 0, dens, kappa=1)
    warm = solve_ma(tmpl).phi
    cold = solve_ma(tmpl.replace(t=0.1))
    hot = solve_ma(tmpl.replace(t=0.1), SolveParams(warm_start=warm))
    assert np.abs(cold.phi.values - hot.phi.values).max() < 1e-9


# --- paths and t_min -----------------------------------------------------------


def test_collapsing_path_uniform_bound():
    g = build_grid(2, "reduced", 32)
    dens = realize_density(MeasureFamily(kind="product", amplitude=0.3, fiber_amplitude=0.3), g)
    tmpl = ProblemSpec(g, FIBER_CHI, ID2, 1.0, 0, dens, kappa=1)
    path = continuation_path(tmpl, [1, 0.3, 0.1, 0.03, 0.01])
    assert path.ok and len(path.solutions) == 5
    gaps = [float(np.abs(s.phi.values - s.phi.values.max()).max()) for s in path.solutions]
    assert max(gaps[2:]) <= 1.5 * gaps[0]
    for s in path.solutions:
        assert s.c_t == pytest.approx(math.log(1 + s.t), abs=1e-12)


def test_manufactured_family_along_path():
    g = build_grid(2, "reduced", 32)
    x1, x2 = g.mesh()
    psi = 0.04 * np.sin(2 * math.pi * x1) * np.sin(2 * math.pi * x2)
    warm = None
    for t in (1.0, 0.3, 0.1):
        star = ScalarField(g, t * psi)
        base = ProblemSpec(g, FIBER_CHI, ID2, t, 1, unit(g), kappa=1, c_t_override=0.0)
        spec = base.replace(density=manufactured_rhs(base, star))
        sol = solve_ma(spec, SolveParams(warm_start=warm))
        assert np.abs(sol.phi.values - star.values).max() < 1e-10
        warm = sol.phi


def test_path_rejects_bad_schedule():
    g = build_grid(1, "reduced", 16)
    with pytest.raises(ValueError):
        continuation_path(ProblemSpec(g, ZERO1, ID1, 1.0, 0, unit(g)), [0.1, 0.3])


def test_geometric_schedule_ends_at_target():
    ts = geometric_schedule(1.0, 0.01)
    assert ts[0] == 1.0 and ts[-1] == pytest.approx(0.01)
    assert all(b < a for a, b in zip(ts, ts[1:]))


def test_tmin_detection():
    g = build_grid(2, "reduced", 16)
    tmpl = ProblemSpec(g, BackgroundForm.diagonal(1, -0.25), ID2, 1.0, 1, unit(g))
    assert detect_tmin(tmpl) == pytest.approx(0.25, abs=0.02)
    assert detect_tmin(tmpl.replace(chi=FIBER_CHI)) == 0.0
    assert detect_tmin(tmpl.replace(chi=ID2)) == 0.0


# --- base limit ----------------------------------------------------------------


def test_base_limit_constant_density():
    g = build_grid(1, "reduced", 32)
    sol = solve_base_limit(g, ID1, ScalarField.constant(g, 1.0), 0)
    assert np.abs(sol.phi.values).max() < 1e-14


def test_base_limit_cosine_closed_form_and_mass():
    m = 128
    g = build_grid(1, "reduced", m)
    x = g.coords(0)
    F = ScalarField(g, 1 + 0.2 * np.cos(2 * math.pi * x))
    sol = solve_base_limit(g, ID1, F, 0)
    d = sol.phi.values + (0.2 / math.pi ** 2) * np.cos(2 * math.pi * x)
    assert np.abs(d - d.mean()).max() <= 10 / m ** 2
    omega = metric_from_potential(ZERO1, 1.0, ID1, sol.phi)
    assert integrate(ScalarField(g, omega.diag[0])) == pytest.approx(1.0, abs=1e-13)
