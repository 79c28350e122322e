"""Envelopes, extremal functions, Monge-Ampere mass, capacity and decay tables.

Admissibility of a potential ``u`` for a form ``chi`` means that
``chi + Hess(u)`` (the centred complex Hessian of :mod:`cmalab.lattice`) is
positive semidefinite up to ``psd_tol = 10 h^2`` at every node.
"""
import csv
import math
from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .errors import EmptyDictionary, HypothesisViolated, NoConvergence, NotVanishing
from .lattice import (
    BackgroundForm,
    HermitianField,
    PeriodicGrid,
    ScalarField,
    _hessian_arrays,
    det_array,
    integrate,
    min_eigenvalue_array,
)

DEFAULT_ENVELOPE_TOL = 1e-12
DEFAULT_MAX_SWEEPS = 100_000


def psd_tolerance(grid):
    return 10.0 * max(grid.spacing) ** 2


def _as_form(chi, n):
    if isinstance(chi, BackgroundForm):
        return chi
    return BackgroundForm(np.asarray(chi, dtype=complex).reshape(n, n))


def form_field(chi, grid):
    """Hermitian field of a BackgroundForm, a constant matrix or a field."""
    if isinstance(chi, HermitianField):
        grid.check_same(chi.grid)
        return chi
    return _as_form(chi, grid.n_complex).field(grid)


def admissibility_margin(u, chi):
    """Smallest eigenvalue of ``chi + Hess(u)`` over the grid."""
    diag, off = _hessian_arrays(u.values, u.grid)
    f = form_field(chi, u.grid) + HermitianField(u.grid, diag, off)
    return float(min_eigenvalue_array(f).min())


# ---------------------------------------------------------------------------
# Perron envelope


@dataclass(frozen=True)
class _Stencil:
    nbr: np.ndarray      # (nodes, J) flat neighbour indices
    coef: np.ndarray     # (E, J) complex neighbour weights per Hermitian entry
    wdiag: np.ndarray    # (n,) weight of the centre value on each diagonal entry
    colors: tuple        # flat node indices of the two parity classes


def _stencil(grid):
    impulse = np.zeros(grid.shape)
    impulse[(0,) * grid.ndim] = 1.0
    diag, off = _hessian_arrays(impulse, grid)
    n = grid.n_complex
    entries = [diag[j] for j in range(n)] + [off[k] for k in range(off.shape[0])]
    support = np.zeros(grid.shape, bool)
    for e in entries:
        support |= np.abs(e) > 0
    support[(0,) * grid.ndim] = False
    zs = [tuple(int(i) for i in z) for z in np.argwhere(support)]
    coef = np.array([[e[z] for z in zs] for e in entries], dtype=complex)
    wdiag = np.array([-diag[j][(0,) * grid.ndim] for j in range(n)])
    flat = np.arange(grid.node_count).reshape(grid.shape)
    # M(x) = sum_y C(x - y) P(y): neighbour of x for offset z is x - z
    nbr = np.stack([np.roll(flat, z, axis=tuple(range(grid.ndim))).ravel() for z in zs], axis=1)
    parity = np.add.reduce(np.indices(grid.shape), axis=0).ravel() % 2
    colors = (np.flatnonzero(parity == 0), np.flatnonzero(parity == 1))
    return _Stencil(np.ascontiguousarray(nbr, dtype=np.int64), coef, wdiag, colors)


def _chi_entries(matrix):
    n = matrix.shape[0]
    out = [matrix[j, j] for j in range(n)]
    if n == 2:
        out.append(matrix[1, 0])
    return np.array(out, dtype=complex)


def _coarsen(values, grid):
    shape = []
    for m in grid.resolution:
        shape += [m // 2, 2]
    v = values.reshape(shape)
    return v.mean(axis=tuple(range(1, 2 * grid.ndim, 2)))


def _prolong(values):
    out = values
    for a in range(values.ndim):
        here = out
        prev = np.roll(here, 1, a)
        nxt = np.roll(here, -1, a)
        even = 0.75 * here + 0.25 * prev
        odd = 0.75 * here + 0.25 * nxt
        stacked = np.stack([even, odd], axis=a + 1)
        shape = list(here.shape)
        shape[a] *= 2
        out = stacked.reshape(shape)
    return out


def _hierarchy(grid, levels):
    grids = [grid]
    while len(grids) < levels:
        g = grids[-1]
        if any(m % 2 or m // 2 < 8 for m in g.resolution):
            break
        grids.append(PeriodicGrid(g.n_complex, g.mode, tuple(m // 2 for m in g.resolution)))
    return grids


def _default_relax(grid):
    # the n = 2 update is not monotone in the cross-stencil neighbours and
    # over-relaxation can drive it off to minus infinity
    if grid.n_complex > 1:
        return 1.0
    m = max(grid.resolution)
    return 2.0 / (1.0 + math.sin(math.pi / m))


def _perron(grid, H, chi_ent, P, tol, max_sweeps, relax, floor=None):
    st = _stencil(grid)
    H = np.ascontiguousarray(H.ravel())
    P = np.ascontiguousarray(np.minimum(P.ravel(), H))
    omega = _default_relax(grid) if relax is None else float(relax)
    n = grid.n_complex
    best = np.inf
    since_best = 0
    sweeps = 0
    change = np.inf
    while sweeps < max_sweeps:
        sweeps += 1
        change = 0.0
        for nodes in st.colors:
            c = _kernels.color_update(P, H, st.nbr, st.coef, st.wdiag, chi_ent, nodes, omega, n)
            change = max(change, c)
        if change <= tol:
            break
        if floor is not None and sweeps % 50 == 0 and P.min() < floor:
            raise NoConvergence(change, "Perron sweep fell below a known admissible lower bound")
        if change < best:
            best, since_best = change, 0
        else:
            since_best += 1
            # over-relaxation that stops paying off is halved back towards 1
            if since_best > 200 and omega > 1.0:
                omega = 1.0 + 0.5 * (omega - 1.0)
                since_best = 0
                best = change
    return P.reshape(grid.shape), sweeps, change


def envelope_residual(P, H, grid, chi_matrix):
    """``max |min(H, T(P)) - P|`` with T the local admissible projection."""
    st = _stencil(grid)
    nodes = np.arange(grid.node_count)
    tgt = _kernels._targets_py(P.ravel(), st.nbr, st.coef, st.wdiag, _chi_entries(chi_matrix), nodes, grid.n_complex)
    return float(np.max(np.abs(np.minimum(H.ravel(), tgt) - P.ravel())))


@dataclass(frozen=True)
class EnvelopeResult:
    P_h: ScalarField
    contact_set: np.ndarray
    sweeps: int
    residual: float
    psd_tol: float


def psh_envelope(h, chi0, envelope_tol=DEFAULT_ENVELOPE_TOL, max_sweeps=DEFAULT_MAX_SWEEPS,
                 levels=3, relax=None, contact_tol=1e-9, initial=None):
    """Largest ``P <= h`` with ``chi0 + Hess(P)`` semipositive at every node.

    ``chi0`` may carry a potential part ``g``; then the envelope is computed
    as ``P_{chi0 const}(h + g) - g``.  Red-black sweeps with over-relaxation
    run coarse to fine over up to ``levels`` grids.
    """
    grid = h.grid
    form = _as_form(chi0, grid.n_complex)
    shift = 0.0 if form.potential_part is None else form.potential_part.values
    H = h.values + shift
    chi_ent = _chi_entries(form.constant_part)
    grids = _hierarchy(grid, levels)
    obstacles = [H]
    for g in grids[:-1]:
        obstacles.append(_coarsen(obstacles[-1], g))
    if initial is not None:
        P = np.minimum(initial.values + shift, H)
        grids, obstacles = grids[:1], obstacles[:1]
    else:
        P = obstacles[-1].copy()
    # a constant below the obstacle is admissible when chi0 is semipositive
    floor = None
    if float(form.eigenvalues.min()) >= -1e-12:
        floor = float(H.min()) - 1e-6 * (1.0 + float(np.abs(H).max()))
    total = 0
    change = np.inf
    for lvl in range(len(grids) - 1, -1, -1):
        g = grids[lvl]
        if lvl < len(grids) - 1:
            P = _prolong(P)
        tol = envelope_tol if lvl == 0 else max(envelope_tol, 1e-9)
        P, sweeps, change = _perron(g, obstacles[lvl], chi_ent, P, tol, max_sweeps - total, relax, floor)
        total += sweeps
        if change > tol and lvl == 0:
            raise NoConvergence(change, f"Perron sweep did not settle in {max_sweeps} sweeps")
    vals = P - shift
    contact = vals >= h.values - contact_tol
    return EnvelopeResult(ScalarField(grid, vals), contact, total, float(change), psd_tolerance(grid))


def convex_hull_envelope_1d(h_values, chi0, periods=3):
    """Independent oracle for ``n = 1`` and a one-variable obstacle.

    On the real line ``chi0 + (1/4) P''`` semipositive means ``P + 2 chi0 x^2``
    is convex, so the envelope is the lower convex hull of ``h + 2 chi0 x^2``
    (taken over a few periods so the middle copy is exact) minus ``2 chi0 x^2``.
    """
    h_values = np.asarray(h_values, dtype=float)
    m = h_values.size
    x = (np.arange(m * periods) + 0.5) / m - (periods // 2)
    y = np.tile(h_values, periods) + 2.0 * chi0 * x ** 2
    hull = []
    for i in range(x.size):
        while len(hull) >= 2:
            a, b = hull[-2], hull[-1]
            cross = (x[b] - x[a]) * (y[i] - y[a]) - (y[b] - y[a]) * (x[i] - x[a])
            if cross <= 0:
                hull.pop()
            else:
                break
        hull.append(i)
    lower = np.interp(x, x[hull], y[hull]) - 2.0 * chi0 * x ** 2
    mid = periods // 2
    return lower[mid * m:(mid + 1) * m]


# ---------------------------------------------------------------------------
# extremal functions and Monge-Ampere mass


def _grid_of(*items):
    for it in items:
        g = getattr(it, "grid", None)
        if g is not None:
            return g
        pot = getattr(it, "potential_part", None)
        if pot is not None:
            return pot.grid
    return None


def extremal_function(chi, theta, t, grid=None, mask=None, bound=10.0, **envelope_opts):
    """Extremal potential ``V_t`` of the form ``chi + t theta``.

    Without ``mask`` this is the sup of admissible ``phi <= 0``; it is zero when
    the form is pointwise semipositive and ``P(h) - h`` when the form is
    ``chi0 + i d dbar h``.  With a node ``mask`` it is the relative version:
    ``phi <= 0`` on the mask and ``phi <= bound`` elsewhere.
    """
    form = chi.plus(theta, t)
    grid = grid or _grid_of(form, mask)
    if grid is None:
        raise ValueError("grid needed for a constant form")
    pot = np.zeros(grid.shape) if form.potential_part is None else form.potential_part.values
    tol = psd_tolerance(grid)
    if mask is None:
        if form.potential_part is None and form.is_semipositive(tol):
            return ScalarField.constant(grid, 0.0)
        if float(min_eigenvalue_array(form.field(grid)).min()) >= 0.0:
            return ScalarField.constant(grid, 0.0)
        obstacle = np.zeros(grid.shape)
    else:
        obstacle = np.where(np.asarray(mask, bool), 0.0, float(bound))
    res = psh_envelope(ScalarField(grid, obstacle), form, **envelope_opts)
    return res.P_h


def ma_density(u, chi):
    """Pointwise ``det(chi + Hess u)`` with non-admissible nodes clamped to 0."""
    diag, off = _hessian_arrays(u.values, u.grid)
    f = form_field(chi, u.grid) + HermitianField(u.grid, diag, off)
    det = det_array(f)
    ok = (min_eigenvalue_array(f) >= 0.0) & (det > 0.0)
    return np.where(ok, det, 0.0)


def ma_mass_on_set(u, chi, mask=None):
    """``sum_{mask} det(chi + Hess u) * cell volume``; ``mask`` None means all nodes."""
    dens = ma_density(u, chi)
    if mask is not None:
        mask = np.asarray(mask, bool)
        if not mask.any():
            return 0.0
        dens = np.where(mask, dens, 0.0)
    return float(dens.sum() * u.grid.cell_volume)


def class_volume_of(chi, grid):
    """``int det(chi)`` for a constant form, the Monge-Ampere mass of the class."""
    form = _as_form(chi, grid.n_complex)
    return float(np.linalg.det(form.constant_part).real)


# ---------------------------------------------------------------------------
# capacity


@dataclass(frozen=True)
class CapacityEstimate:
    value: float
    witness: ScalarField
    dictionary_size: int
    masses: tuple = ()


def dilate(mask, cells):
    out = np.asarray(mask, bool).copy()
    for _ in range(int(cells)):
        grown = out.copy()
        for a in range(out.ndim):
            grown |= np.roll(out, 1, a) | np.roll(out, -1, a)
        out = grown
    return out


def default_dictionary(mask, V, potentials=(), scales=(0, 1, 2)):
    """Candidate obstacles between ``V`` and ``V + 1``.

    ``V``, ``V + 1``, ``V`` plus the complement indicator of the mask dilated at
    each scale, and for every solved potential ``phi`` the band-scaled
    ``V + 1 + (w - max w) / max(1, osc w)`` with ``w = phi - V``.
    """
    v = V.values
    out = [v, v + 1.0]
    mask = np.asarray(mask, bool)
    for s in scales:
        out.append(v + 1.0 - dilate(mask, s))
    for phi in potentials:
        w = phi.values - v
        osc = float(w.max() - w.min())
        out.append(v + 1.0 + (w - w.max()) / max(1.0, osc))
    return [V.with_values(o) for o in out]


def admissible_member(u, chi, V, **envelope_opts):
    """Project a candidate into the band ``V <= u <= V + 1`` of admissible potentials."""
    clipped = np.clip(u.values, V.values, V.values + 1.0)
    cand = u.with_values(clipped)
    if admissibility_margin(cand, chi) >= -psd_tolerance(u.grid):
        return cand
    return psh_envelope(cand, chi, **envelope_opts).P_h


def capacity_lower_bound(mask, chi, V, dictionary=None, potentials=(), project=True, **envelope_opts):
    """Best Monge-Ampere mass on ``mask`` over a finite set of admissible candidates."""
    mask = np.asarray(mask, bool)
    if dictionary is None:
        dictionary = default_dictionary(mask, V, potentials)
    dictionary = list(dictionary)
    if not dictionary:
        raise EmptyDictionary("capacity needs at least one candidate potential")
    if not mask.any():
        return CapacityEstimate(0.0, dictionary[0], len(dictionary), (0.0,) * len(dictionary))
    members = [admissible_member(u, chi, V, **envelope_opts) if project else u for u in dictionary]
    masses = [ma_mass_on_set(u, chi, mask) for u in members]
    best = int(np.argmax(masses))
    return CapacityEstimate(float(masses[best]), members[best], len(members), tuple(masses))


@dataclass(frozen=True)
class ComparisonResult:
    holds: bool
    margin: float
    capacity_side: float
    mass_side: float
    necessary_only: bool = True

    def __bool__(self):
        return self.holds


def comparison_check(u, chi, V, s, r, dictionary=None, tol=0.0, **envelope_opts):
    """``r^n Cap(u - V < -s - r) <= int_{u - V < -s} (chi + Hess u)^n``.

    The left side uses a capacity lower bound, so a pass is a necessary
    condition only.
    """
    if not 0 < r <= 1 or s < 0:
        raise ValueError("comparison needs 0 < r <= 1 and s >= 0")
    n = u.grid.n_complex
    w = u.values - V.values
    inner = w < -s - r
    outer = w < -s
    cap = capacity_lower_bound(inner, chi, V, dictionary, potentials=(u,), **envelope_opts)
    lhs = r ** n * cap.value
    rhs = ma_mass_on_set(u, chi, outer)
    margin = rhs - lhs
    return ComparisonResult(bool(margin >= -tol), float(margin), float(lhs), float(rhs))


# ---------------------------------------------------------------------------
# decay tables


@dataclass(frozen=True)
class DecayTable:
    s: np.ndarray
    mass: np.ndarray
    cap_lower: np.ndarray
    q: float
    fit_C: float
    fit_exponent: float
    dominating_C: float
    class_volume: float
    fit_residual: np.ndarray = field(default=None)

    @property
    def rows(self):
        return list(zip(self.s.tolist(), self.mass.tolist(), self.cap_lower.tolist()))

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["s", "mass", "cap_lower", "fit_residual"])
            for i in range(self.s.size):
                res = self.fit_residual[i]
                w.writerow([repr(float(self.s[i])), repr(float(self.mass[i])), repr(float(self.cap_lower[i])),
                            "" if not np.isfinite(res) else repr(float(res))])


def _decay_fit(s, cap, q):
    sel = (s > 1) & (cap > 0)
    x = np.zeros_like(s)
    x[s > 1] = (s[s > 1] - 1.0) ** (-1.0 / q)
    if not sel.any():
        return 0.0, float("nan"), 0.0, np.full(s.shape, np.nan)
    C = float(np.sum(cap[sel] * x[sel]) / np.sum(x[sel] ** 2))
    dom = float(np.max(cap[sel] / x[sel]))
    if sel.sum() >= 2:
        slope = float(np.polyfit(np.log(s[sel] - 1.0), np.log(cap[sel]), 1)[0])
    else:
        slope = float("nan")
    resid = np.where(s > 1, cap - C * x, np.nan)
    return C, slope, dom, resid


def capacity_decay_table(phi, V, chi, s_grid, q=2.0, **envelope_opts):
    """Sublevel mass and capacity lower bound, both divided by the class volume.

    Rows are processed from the largest ``s`` down and every witness found so
    far is offered again on the larger sets, so the capacity column is
    nonincreasing in ``s`` by construction.
    """
    s_vals = np.array(sorted(float(s) for s in s_grid))
    vol = class_volume_of(chi, phi.grid)
    w = phi.values - V.values
    mass = np.zeros(s_vals.size)
    cap = np.zeros(s_vals.size)
    witnesses = []
    for i in range(s_vals.size - 1, -1, -1):
        mask = w < -s_vals[i]
        mass[i] = ma_mass_on_set(phi, chi, mask) / vol
        if not mask.any():
            continue
        cands = default_dictionary(mask, V, (phi,))
        est = capacity_lower_bound(mask, chi, V, cands, **envelope_opts)
        best = est.value
        for u in witnesses:
            best = max(best, ma_mass_on_set(u, chi, mask))
        witnesses.append(est.witness)
        cap[i] = best / vol
    C, slope, dom, resid = _decay_fit(s_vals, cap, q)
    return DecayTable(s_vals, mass, cap, float(q), C, slope, dom, vol, resid)


# ---------------------------------------------------------------------------
# De Giorgi iteration


@dataclass(frozen=True)
class DeGiorgiResult:
    s0: float
    S: float
    violations: tuple
    hypothesis_held: bool
    vanishing_checked: bool


def _pairs(s, r_max):
    for i in range(s.size):
        for j in range(i + 1, s.size):
            r = s[j] - s[i]
            if r > r_max + 1e-12:
                break
            if r > 0:
                yield i, j, r


def measured_decay_constant(s, F, alpha, r_max=1.0):
    """Smallest ``A`` with ``r F(s + r) <= A F(s)^(1 + alpha)`` on the sample pairs."""
    s = np.asarray(s, float)
    F = np.asarray(F, float)
    A = 0.0
    for i, j, r in _pairs(s, r_max):
        if F[i] > 0:
            A = max(A, r * F[j] / F[i] ** (1.0 + alpha))
    return A


def degiorgi_bound(s, F, A, alpha, s0_hint=None, strict=True, r_max=1.0, atol=1e-14):
    """Threshold ``s0`` with ``F(s0)^alpha <= 1/(2A)`` and vanishing point ``S = s0 + 2``.

    The decay hypothesis is checked on every sampled pair with ``0 < r <= 1``.
    When it holds, ``F`` must vanish at every sampled ``s >= S``.
    """
    s = np.asarray(s, float)
    F = np.asarray(F, float)
    order = np.argsort(s, kind="stable")
    s, F = s[order], F[order]
    if np.any(np.diff(F) > atol):
        raise ValueError("samples of F must be nonincreasing in s")
    if not (A > 0 and alpha > 0):
        raise ValueError("A and alpha must be positive")
    violations = [
        (s[i], r) for i, j, r in _pairs(s, r_max)
        if r * F[j] > A * F[i] ** (1.0 + alpha) * (1.0 + 1e-12) + atol
    ]
    if violations and strict:
        raise HypothesisViolated(violations)
    hit = np.flatnonzero(F ** alpha <= 1.0 / (2.0 * A))
    if hit.size:
        s0 = float(s[hit[0]])
    elif s0_hint is not None:
        s0 = float(s0_hint)
    else:
        raise ValueError("no sample reaches the De Giorgi threshold and no s0_hint given")
    S = s0 + 2.0
    if violations:
        return DeGiorgiResult(s0, S, tuple(violations), False, False)
    for si, fi in zip(s, F):
        if si >= S and fi > atol:
            raise NotVanishing(si, fi)
    return DeGiorgiResult(s0, S, (), True, True)


__all__ = [
    "CapacityEstimate",
    "ComparisonResult",
    "DeGiorgiResult",
    "DecayTable",
    "EnvelopeResult",
    "admissibility_margin",
    "admissible_member",
    "capacity_decay_table",
    "capacity_lower_bound",
    "comparison_check",
    "convex_hull_envelope_1d",
    "default_dictionary",
    "degiorgi_bound",
    "dilate",
    "envelope_residual",
    "extremal_function",
    "ma_density",
    "ma_mass_on_set",
    "measured_decay_constant",
    "psd_tolerance",
    "psh_envelope",
]
