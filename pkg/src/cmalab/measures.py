"""Right-hand-side density families and the quantities they are checked against."""
import enum
import itertools
import math
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateBase, InvalidFamily, ZeroMass
from .fibration import Fibration
from .lattice import (
    ScalarField,
    complex_hessian,
    generalized_eigen_range,
    integrate,
)


class DensityKind(str, enum.Enum):
    SMOOTH = "smooth"
    SINGULAR_POLE = "singular_pole"
    PRODUCT = "product"


@dataclass(frozen=True)
class MeasureFamily:
    """A density family on the torus.

    The smooth factor is ``1 + amplitude*cos(2 pi x_1)``, or
    ``exp(amplitude*cos(2 pi x_1))`` when ``exponential`` is set.  Product
    densities multiply in ``1 + fiber_amplitude*cos(2 pi x_n)``.  A singular
    pole contributes ``(eps^2 + u)^(-alpha)`` with
    ``u = sum_i sin^2(pi (x_i - c_i))`` over the grid's real axes; a missing
    ``center`` means the grid node nearest to the torus midpoint.
    """

    kind: DensityKind = DensityKind.SMOOTH
    alpha: float = 0.0
    eps: float = 0.0
    p: float = 2.0
    center: tuple = None
    amplitude: float = 0.0
    fiber_amplitude: float = 0.0
    exponential: bool = False

    def __post_init__(self):
        object.__setattr__(self, "kind", DensityKind(self.kind))
        if self.p <= 1:
            raise InvalidFamily(f"integrability exponent must exceed 1, got {self.p}")
        if self.eps < 0:
            raise InvalidFamily("regulariser eps must be nonnegative")
        if self.kind is DensityKind.SINGULAR_POLE:
            if self.alpha <= 0:
                raise InvalidFamily("pole exponent alpha must be positive")
            if self.alpha * self.p >= 1:
                raise InvalidFamily(
                    f"alpha*p = {self.alpha * self.p:g} >= 1: the eps -> 0 family is not uniformly in L^p"
                )
        if not self.exponential and (abs(self.amplitude) >= 1 or abs(self.fiber_amplitude) >= 1):
            raise InvalidFamily("linear smooth factors need |amplitude| < 1 to stay positive")

    @property
    def lp_uniform(self):
        return self.kind is not DensityKind.SINGULAR_POLE or self.alpha * self.p < 1

    def with_eps(self, eps):
        return MeasureFamily(self.kind, self.alpha, eps, self.p, self.center, self.amplitude,
                             self.fiber_amplitude, self.exponential)

    def pole_center(self, grid):
        if self.center is not None:
            c = tuple(float(v) for v in self.center)
            if len(c) != grid.ndim:
                raise InvalidFamily(f"center has {len(c)} coordinates, grid has {grid.ndim} axes")
            return c
        return grid.node_point(tuple(m // 2 for m in grid.resolution))


@dataclass(frozen=True)
class DensityReport:
    lp_norm: float
    mass: float
    ricci_lower_A: float
    ricci_upper_A: float
    sup_density: float


def vanishing_profile(grid, center):
    mesh = grid.mesh()
    u = np.zeros(grid.shape)
    for a in range(grid.ndim):
        u = u + np.sin(np.pi * (mesh[a] - center[a])) ** 2
    return u


def _smooth_factor(fam, grid, mesh=None):
    """Smooth factor at the grid nodes, or at the coordinates in ``mesh``."""
    if mesh is None:
        mesh = grid.mesh()
    shape = np.broadcast(*mesh).shape
    x1 = mesh[grid.x_axis(0)]
    wave = np.cos(2 * np.pi * x1)
    base = np.exp(fam.amplitude * wave) if fam.exponential else 1.0 + fam.amplitude * wave
    out = np.broadcast_to(base, shape).astype(float)
    if fam.kind is DensityKind.PRODUCT and grid.n_complex > 1:
        xf = mesh[grid.x_axis(grid.n_complex - 1)]
        wf = np.cos(2 * np.pi * xf)
        out = out * (np.exp(fam.fiber_amplitude * wf) if fam.exponential else 1.0 + fam.fiber_amplitude * wf)
    return out


def _pole_values(points, center, eps, alpha):
    u = sum(np.sin(np.pi * (points[a] - center[a])) ** 2 for a in range(len(center)))
    return (eps ** 2 + u) ** (-alpha)


def _near(lo, size, center):
    """True when the periodic distance from the box to ``center`` is below one box width."""
    for a in range(len(center)):
        d = (center[a] - (lo[a] + 0.5 * size[a]) + 0.5) % 1.0 - 0.5
        if abs(d) > size[a]:
            return False
    return True


def _box_average(lo, size, center, eps, alpha, rule, level, max_level):
    if level < max_level and min(size) > 0.25 * eps and _near(lo, size, center):
        half = [0.5 * s for s in size]
        total = 0.0
        for corner in itertools.product((0, 1), repeat=len(lo)):
            sub = [lo[a] + corner[a] * half[a] for a in range(len(lo))]
            total += _box_average(sub, half, center, eps, alpha, rule, level + 1, max_level)
        return total / 2 ** len(lo)
    g, w = rule
    total = 0.0
    for idx in itertools.product(range(len(g)), repeat=len(lo)):
        pt = [np.asarray(lo[a] + (0.5 + g[idx[a]]) * size[a]) for a in range(len(lo))]
        total += float(np.prod([w[i] for i in idx])) * float(_pole_values(pt, center, eps, alpha))
    return total


def pole_cell_averages(grid, center, eps, alpha, order=None, near_cells=2, max_level=24):
    """Cell averages of ``(eps^2 + u)^(-alpha)``.

    Every cell gets a tensor Gauss-Legendre rule; cells within ``near_cells``
    of the pole are bisected recursively until the boxes next to the pole are
    smaller than ``eps / 4``.  Averaging keeps the discrete measure consistent
    when ``eps`` is below the grid spacing.
    """
    d = grid.ndim
    if order is None:
        order = 4 if d <= 2 else 3
    g, w = np.polynomial.legendre.leggauss(order)
    rule = (0.5 * g, 0.5 * w)
    h = grid.spacing
    mesh = grid.mesh()
    out = np.zeros(grid.shape)
    for idx in itertools.product(range(order), repeat=d):
        pts = [mesh[a] + rule[0][idx[a]] * h[a] for a in range(d)]
        out += float(np.prod([rule[1][i] for i in idx])) * _pole_values(pts, center, eps, alpha)
    home = [int(math.floor((center[a] % 1.0) / h[a])) for a in range(d)]
    span = range(-near_cells, near_cells + 1)
    for off in itertools.product(span, repeat=d):
        node = tuple((home[a] + off[a]) % grid.resolution[a] for a in range(d))
        lo = [node[a] * h[a] for a in range(d)]
        out[node] = _box_average(lo, list(h), center, eps, alpha, rule, 0, max_level)
    return out


def _raw_density(fam, grid):
    vals = _smooth_factor(fam, grid)
    if fam.kind is DensityKind.SINGULAR_POLE:
        if fam.eps == 0 and 2 * fam.alpha >= grid.ndim:
            raise InvalidFamily("eps = 0 with a pole that is not locally integrable on this grid")
        vals = vals * pole_cell_averages(grid, fam.pole_center(grid), fam.eps, fam.alpha)
    return vals


def realize_density(fam, grid, target_mass=1.0):
    """Density of the family on the grid, scaled to ``target_mass``.

    Smooth factors are sampled at nodes; a singular pole factor enters as
    cell averages so the discrete mass near the pole stays bounded as eps -> 0.
    """
    density = ScalarField(grid, _raw_density(fam, grid))
    if target_mass is None:
        return density
    return normalize_mass(density, target_mass)


def peak_density(fam, grid, target_mass=1.0):
    """Supremum of the pointwise family density under the same normalisation.

    For a pole this is attained at the centre and is not visible in the cell
    averages once eps drops below the grid spacing.
    """
    mass = integrate(ScalarField(grid, _raw_density(fam, grid)))
    pointwise = _smooth_factor(fam, grid)
    peak = float(pointwise.max())
    if fam.kind is DensityKind.SINGULAR_POLE:
        c = fam.pole_center(grid)
        at_center = _smooth_factor(fam, grid, [np.asarray(v) for v in c])
        if fam.eps == 0:
            return math.inf
        peak = max(float((pointwise * _pole_values(grid.mesh(), c, fam.eps, fam.alpha)).max()),
                   float(at_center) * fam.eps ** (-2 * fam.alpha))
    return peak * target_mass / mass


def normalize_mass(density, target_mass):
    if target_mass <= 0:
        raise ValueError("target mass must be positive")
    mass = integrate(density)
    if not mass > 0:
        raise ZeroMass("density has no mass")
    return density.with_values(density.values * (target_mass / mass))


def lp_norm(density, p, grid=None):
    if grid is not None:
        grid.check_same(density.grid)
    return integrate(density.with_values(density.values ** p)) ** (1.0 / p)


def ricci_of_density(density):
    """``Ric(Omega) = -i d dbar log(density)`` for a flat reference form."""
    return complex_hessian(density.with_values(np.log(density.values))).scaled(-1.0)


def ricci_bounds_of_measure(density, theta):
    """Smallest ``A_lower, A_upper >= 0`` with ``-A_lower theta <= Ric <= A_upper theta``."""
    ric = ricci_of_density(density)
    lo, hi = generalized_eigen_range(ric, theta.field(density.grid))
    return max(0.0, float(-lo.min())), max(0.0, float(hi.max()))


def density_report(density, p, theta, peak=None):
    """Hypothesis quantities of a density; ``peak`` overrides the grid maximum."""
    a_lo, a_hi = ricci_bounds_of_measure(density, theta)
    return DensityReport(
        lp_norm=lp_norm(density, p),
        mass=integrate(density),
        ricci_lower_A=a_lo,
        ricci_upper_A=a_hi,
        sup_density=float(density.values.max()) if peak is None else float(peak),
    )


def det_polynomial(chi_field, theta_field):
    """Coefficients ``c_k`` (arrays) with ``det(chi + s theta) = sum_k c_k s^k``."""
    n = chi_field.n
    if n == 1:
        return [chi_field.diag[0], theta_field.diag[0]]
    c0, c1 = chi_field.diag
    t0, t1 = theta_field.diag
    mixed = c0 * t1 + c1 * t0 - 2.0 * np.real(chi_field.off[0] * np.conj(theta_field.off[0]))
    det_c = c0 * c1 - np.abs(chi_field.off[0]) ** 2
    det_t = t0 * t1 - np.abs(theta_field.off[0]) ** 2
    return [det_c, mixed, det_t]


def jacobian_density(chi, theta, grid, kappa=None):
    """``H`` with ``chi^kappa wedge theta^(n-kappa) = H theta^n``.

    In determinant form this is the coefficient of ``s^(n-kappa)`` in
    ``det(chi + s theta) / det(theta)``, i.e. ``binom(n, kappa)`` times the
    mixed determinant.
    """
    n = grid.n_complex
    kappa = chi.rank if kappa is None else int(kappa)
    coeffs = det_polynomial(chi.field(grid), theta.field(grid))
    return ScalarField(grid, coeffs[n - kappa] / coeffs[n])


def mixed_determinant(a, b, k):
    """Mixed determinant ``D(a[k], b[n-k])`` of constant Hermitian matrices."""
    n = a.shape[0]
    # det(a + s b) sampled at n + 1 points, then solved for its coefficients
    s = np.arange(n + 1, dtype=float)
    vals = np.array([np.linalg.det(a + si * b).real for si in s])
    poly = np.linalg.solve(np.vander(s, n + 1, increasing=True), vals)
    return poly[n - k] / math.comb(n, k)


def pushforward_density(omega, fibration, chi):
    """Fibre integral of a density divided by the determinant of chi's base block."""
    if not isinstance(fibration, Fibration):
        fibration = Fibration(int(fibration))
    grid = omega.grid
    if chi.potential_part is not None:
        raise ValueError("pushforward needs a constant-coefficient chi pulled back from the base")
    k = fibration.base_dim
    c = chi.constant_part
    if np.any(np.abs(c[k:, :]) > 1e-14) or np.any(np.abs(c[:, k:]) > 1e-14):
        raise ValueError("chi must vanish on fibre directions")
    det_b = float(np.linalg.det(c[:k, :k]).real)
    if not det_b > 0:
        raise DegenerateBase(f"base block of chi has determinant {det_b:g}")
    fa = fibration.fiber_axes(grid)
    fiber_cell = float(np.prod([grid.spacing[a] for a in fa]))
    fib = omega.values.sum(axis=fa) * fiber_cell
    return ScalarField(fibration.base_grid(grid), fib / det_b)


def singular_pole_family(alpha=0.4, p=2.0, eps=0.1, **kw):
    return MeasureFamily(DensityKind.SINGULAR_POLE, alpha=alpha, eps=eps, p=p, **kw)


__all__ = [
    "DensityKind",
    "DensityReport",
    "MeasureFamily",
    "density_report",
    "det_polynomial",
    "jacobian_density",
    "lp_norm",
    "mixed_determinant",
    "normalize_mass",
    "peak_density",
    "pole_cell_averages",
    "pushforward_density",
    "realize_density",
    "ricci_bounds_of_measure",
    "ricci_of_density",
    "singular_pole_family",
    "vanishing_profile",
]
