"""Damped Newton solver and continuation for complex Monge-Ampere equations.

The equation solved on a grid is

    det(chi + t theta + i d dbar phi) / det(theta) = s^(n - kappa) e^(lam phi + c) rho

with ``s = t - t_min_offset`` and ``rho`` the density of Omega against theta^n.
Newton works on the log form of the residual, so its linearisation is the
metric Laplacian ``g^{j kbar} d_j d_kbar - lam``.
"""
import dataclasses
import math
import time
from dataclasses import dataclass, field

import numpy as np
from scipy.sparse.linalg import LinearOperator, gmres

from .errors import NoConvergence, PositivityLost, ZeroMass
from .lattice import (
    BackgroundForm,
    ScalarField,
    _hessian_arrays,
    det_array,
    integrate,
    inverse,
    logdet_array,
    metric_from_potential,
    min_eigenvalue_array,
)


@dataclass(frozen=True, eq=False)
class ProblemSpec:
    grid: object
    chi: BackgroundForm
    theta: BackgroundForm
    t: float
    lam: int
    density: ScalarField = None
    kappa: int = None
    t_min_offset: float = 0.0
    c_t_override: float = None

    def __post_init__(self):
        if self.lam not in (0, 1):
            raise ValueError(f"lam must be 0 or 1, got {self.lam}")
        if self.kappa is None:
            object.__setattr__(self, "kappa", self.chi.rank)
        if self.density is not None:
            self.grid.check_same(self.density.grid)
            if not np.all(self.density.values > 0):
                raise ValueError("density must be positive")

    @property
    def n(self):
        return self.grid.n_complex

    @property
    def scale_t(self):
        return self.t - self.t_min_offset

    def replace(self, **kw):
        return dataclasses.replace(self, **kw)

    def reference(self):
        return self.chi.plus(self.theta, self.t)


@dataclass(frozen=True)
class SolveParams:
    residual_tol: float = 1e-10
    max_newton: int = 60
    damping: float = 0.5
    min_step: float = 2.0 ** -20
    linear_tol: float = 1e-3
    linear_maxiter: int = 400
    warm_start: ScalarField = None

    def __post_init__(self):
        if not self.residual_tol > 0:
            raise ValueError("residual_tol must be positive")

    def as_dict(self):
        return {
            "residual_tol": self.residual_tol,
            "max_newton": self.max_newton,
            "damping": self.damping,
            "min_step": self.min_step,
            "linear_tol": self.linear_tol,
        }


@dataclass(frozen=True, eq=False)
class Solution:
    phi: ScalarField
    c_t: float
    metric: object
    residual_sup: float
    newton_iters: int
    converged: bool
    t: float = None
    lam: int = 0
    diagnostics: dict = field(default_factory=dict)


def class_volume(chi, theta, t, n=None):
    """``int det(chi + t theta)`` over the unit torus (constant parts only)."""
    a = chi.constant_part + t * theta.constant_part
    if n is not None and a.shape[0] != n:
        raise ValueError("form size does not match n")
    return float(np.linalg.det(a).real)


def normalization_constant(spec):
    """``c_t = log(class volume / (s^(n-kappa) mass(Omega)))``."""
    mass = integrate(spec.density)
    if not mass > 0:
        raise ZeroMass("density has no mass")
    vol = class_volume(spec.chi, spec.theta, spec.t)
    s = spec.scale_t
    if not vol > 0 or not s > 0:
        raise ValueError(f"class at t={spec.t:g} is not positive (volume {vol:g})")
    return math.log(vol / (s ** (spec.n - spec.kappa) * mass))


def equation_constant(spec):
    if spec.c_t_override is not None:
        return float(spec.c_t_override)
    return normalization_constant(spec)


def _theta_logdet(spec):
    return logdet_array(spec.theta.field(spec.grid))


def _rhs_log(spec, c, theta_ld=None):
    """Everything on the right of the log equation except ``lam phi``."""
    if theta_ld is None:
        theta_ld = _theta_logdet(spec)
    s = spec.scale_t
    return theta_ld + (spec.n - spec.kappa) * math.log(s) + c + np.log(spec.density.values)


def residual(spec, phi, c=None):
    """Pointwise log residual; raises PositivityLost outside the Kahler cone."""
    if c is None:
        c = equation_constant(spec)
    omega = metric_from_potential(spec.chi, spec.t, spec.theta, phi)
    res = logdet_array(omega) - _rhs_log(spec, c) - spec.lam * phi.values
    return ScalarField(spec.grid, res)


def manufactured_rhs(spec, phi_star):
    """Density for which ``phi_star`` solves ``spec`` exactly on the grid.

    The equation constant is ``spec.c_t_override`` (0 when unset), so solve
    with ``c_t_override`` set to the same value to recover ``phi_star``.
    """
    c = 0.0 if spec.c_t_override is None else float(spec.c_t_override)
    omega = metric_from_potential(spec.chi, spec.t, spec.theta, phi_star)
    ratio = det_array(omega) / det_array(spec.theta.field(spec.grid))
    s = spec.scale_t
    dens = ratio * np.exp(-spec.lam * phi_star.values - c) / s ** (spec.n - spec.kappa)
    return ScalarField(spec.grid, dens)


# ---------------------------------------------------------------------------
# linearised operator and its flat preconditioner


class NewtonOperator:
    """``delta -> tr(omega^{-1} Hess delta) - lam delta`` on a fixed metric."""

    def __init__(self, omega, lam):
        self.grid = omega.grid
        self.inv = inverse(omega)
        self.lam = lam
        self.shape = self.grid.shape
        self.size = self.grid.node_count

    def apply(self, values):
        diag, off = _hessian_arrays(values, self.grid)
        out = (self.inv.diag * diag).sum(axis=0)
        if self.grid.n_complex == 2:
            out += 2.0 * np.real(self.inv.off[0] * np.conj(off[0]))
        if self.lam:
            out -= self.lam * values
        return out

    def mean_coefficients(self):
        return self.inv.diag.mean(axis=tuple(range(1, self.grid.ndim + 1))), self.inv.off.mean(
            axis=tuple(range(1, self.grid.ndim + 1))
        )


class FlatPreconditioner:
    """Exact FFT inverse of the constant-coefficient operator with averaged
    coefficients; the constant mode is dropped when ``lam == 0``."""

    def __init__(self, grid, diag_coef, off_coef, lam):
        impulse = np.zeros(grid.shape)
        impulse[(0,) * grid.ndim] = 1.0
        d, o = _hessian_arrays(impulse, grid)
        kern = sum(diag_coef[j] * d[j] for j in range(grid.n_complex))
        if grid.n_complex == 2:
            kern = kern + 2.0 * np.real(off_coef[0] * np.conj(o[0]))
        kern = kern - lam * impulse
        sym = np.fft.fftn(kern)
        keep = np.abs(sym) > 1e-14 * np.abs(sym).max()
        inv = np.zeros_like(sym)
        inv[keep] = 1.0 / sym[keep]
        self.inv_symbol = inv
        self.shape = grid.shape

    def solve(self, values):
        return np.fft.ifftn(np.fft.fftn(values) * self.inv_symbol).real


def _linear_solve(op, rhs, lam, tol, maxiter):
    """Right-hand side and unknown are mean-zero when ``lam == 0``."""
    dc, oc = op.mean_coefficients()
    pre = FlatPreconditioner(op.grid, dc, oc, lam)
    shape = op.shape
    n = op.size
    counter = {"it": 0}

    if lam == 0:
        def matvec(v):
            v = v.reshape(shape)
            w = op.apply(v - v.mean())
            return (w - w.mean()).ravel()
    else:
        def matvec(v):
            return op.apply(v.reshape(shape)).ravel()

    def psolve(v):
        return pre.solve(v.reshape(shape)).ravel()

    def cb(_):
        counter["it"] += 1

    a = LinearOperator((n, n), matvec=matvec, dtype=float)
    m = LinearOperator((n, n), matvec=psolve, dtype=float)
    x0 = psolve(rhs.ravel())
    sol, info = gmres(a, rhs.ravel(), x0=x0, M=m, rtol=tol, atol=0.0, restart=40,
                      maxiter=max(1, maxiter // 40), callback=cb, callback_type="pr_norm")
    sol = sol.reshape(shape)
    if lam == 0:
        sol = sol - sol.mean()
    return sol, counter["it"], info


def _admissible_start(spec, phi0):
    """Scale a warm start toward zero until the metric is positive."""
    if phi0 is None:
        return ScalarField.constant(spec.grid, 0.0)
    spec.grid.check_same(phi0.grid)
    vals = phi0.values
    for _ in range(12):
        try:
            metric_from_potential(spec.chi, spec.t, spec.theta, ScalarField(spec.grid, vals))
            return ScalarField(spec.grid, vals)
        except PositivityLost:
            vals = 0.5 * vals
    return ScalarField.constant(spec.grid, 0.0)


def check_class_positive(spec):
    a = spec.chi.constant_part + spec.t * spec.theta.constant_part
    lo = float(np.linalg.eigvalsh(a).min())
    if not lo > 0 or not spec.scale_t > 0:
        raise PositivityLost((0,) * spec.grid.ndim, lo)


def solve_ma(spec, params=None):
    """Damped Newton iteration; returns a converged Solution.

    For ``lam == 0`` the update is kept mean-zero, the residual is measured
    after removing its mean, and the result is shifted so that ``sup phi = 0``.
    """
    params = params or SolveParams()
    start = time.perf_counter()
    check_class_positive(spec)
    c = equation_constant(spec)
    reported_c = normalization_constant(spec)
    theta_ld = _theta_logdet(spec)
    rhs = _rhs_log(spec, c, theta_ld)
    lam = spec.lam

    def evaluate(phi_vals):
        omega = metric_from_potential(spec.chi, spec.t, spec.theta, ScalarField(spec.grid, phi_vals))
        r = logdet_array(omega) - rhs - lam * phi_vals
        offset = 0.0
        if lam == 0:
            offset = float(r.mean())
            r = r - offset
        return omega, r, offset

    phi = _admissible_start(spec, params.warm_start).values.copy()
    if lam == 0:
        phi = phi - phi.mean()
    omega, res, offset = evaluate(phi)
    history = [float(np.abs(res).max())]
    linear_its = 0
    iters = 0
    converged = history[-1] <= params.residual_tol
    while not converged and iters < params.max_newton:
        op = NewtonOperator(omega, lam)
        delta, its, _ = _linear_solve(op, -res, lam, params.linear_tol, params.linear_maxiter)
        linear_its += its
        norm0 = float(np.sqrt(np.mean(res ** 2)))
        step = 1.0
        accepted = False
        lost = None
        positive_seen = False
        while step >= params.min_step:
            trial = phi + step * delta
            try:
                o_t, r_t, off_t = evaluate(trial)
            except PositivityLost as exc:
                lost = exc
                step *= params.damping
                continue
            positive_seen = True
            if float(np.sqrt(np.mean(r_t ** 2))) < norm0:
                accepted = True
                break
            step *= params.damping
        iters += 1
        if not accepted:
            if not positive_seen:
                raise lost
            raise NoConvergence(min(history), "line search exhausted")
        phi, omega, res, offset = trial, o_t, r_t, off_t
        history.append(float(np.abs(res).max()))
        converged = history[-1] <= params.residual_tol
    if not converged:
        raise NoConvergence(min(history))
    if lam == 0:
        phi = phi - phi.max()
    phi_f = ScalarField(spec.grid, phi)
    omega = metric_from_potential(spec.chi, spec.t, spec.theta, phi_f)
    diag = {
        "history": history,
        "linear_iterations": linear_its,
        "compat_offset": offset,
        "equation_constant": c,
        "seconds": time.perf_counter() - start,
        "params": params.as_dict(),
    }
    return Solution(phi_f, reported_c, omega, history[-1], iters, True, spec.t, lam, diag)


# ---------------------------------------------------------------------------
# paths in t


@dataclass
class PathResult:
    solutions: list
    failure: dict = None

    @property
    def ok(self):
        return self.failure is None


def continuation_path(template, t_schedule, params=None):
    """Solve along a strictly decreasing schedule, warm-starting each step."""
    params = params or SolveParams()
    ts = [float(t) for t in t_schedule]
    if any(t <= 0 for t in ts) or any(b >= a for a, b in zip(ts, ts[1:])):
        raise ValueError("t schedule must be positive and strictly decreasing")
    out = PathResult([])
    warm = params.warm_start
    for t in ts:
        spec = template.replace(t=t)
        try:
            sol = solve_ma(spec, dataclasses.replace(params, warm_start=warm))
        except (PositivityLost, NoConvergence, ValueError) as exc:
            out.failure = {"t": t, "kind": type(exc).__name__, "message": str(exc)}
            return out
        out.solutions.append(sol)
        warm = sol.phi
    return out


def geometric_schedule(t_start, t_end, ratio=1.0 / math.sqrt(10.0)):
    ts = [float(t_start)]
    while ts[-1] * ratio > t_end * (1 + 1e-12):
        ts.append(ts[-1] * ratio)
    if ts[-1] > t_end:
        ts.append(float(t_end))
    return ts


def _solvable(spec, params):
    try:
        solve_ma(spec, params)
        return True
    except (PositivityLost, NoConvergence, ValueError):
        return False


def detect_tmin(template, params=None, bisection_tol=0.005, t_max=1.0):
    """Empirical infimum of solvable t in ``(0, t_max]`` by bisection.

    Failure means the solver raised PositivityLost or NoConvergence; this is a
    proxy for the class leaving the Kahler cone.
    """
    params = params or SolveParams()

    def ok(t):
        return _solvable(template.replace(t=t), params)

    if not ok(t_max):
        return t_max
    lo = 0.5 * bisection_tol
    if ok(lo):
        return 0.0
    hi = t_max
    while hi - lo > bisection_tol:
        mid = 0.5 * (lo + hi)
        if ok(mid):
            hi = mid
        else:
            lo = mid
    return 0.5 * (lo + hi)


def solve_base_limit(base_grid, chi_base, F, lam, coefficient=1.0, params=None):
    """Solve ``det(chi_b + Hess phi) / det(chi_b) = coefficient * F * e^(lam phi + c)``.

    For ``lam == 0`` the constant c is fixed by mass balance, so the
    coefficient drops out; for ``lam == 1`` c is zero.
    """
    base_grid.check_same(F.grid)
    zero = BackgroundForm(np.zeros_like(chi_base.constant_part))
    spec = ProblemSpec(
        grid=base_grid,
        chi=zero,
        theta=chi_base,
        t=1.0,
        lam=lam,
        density=F.with_values(coefficient * F.values),
        kappa=base_grid.n_complex,
        c_t_override=0.0 if lam == 1 else None,
    )
    return solve_ma(spec, params)


def min_metric_eigenvalue(solution):
    return float(min_eigenvalue_array(solution.metric).min())
