"""Measured versions of the geometric conclusions: oscillation, gradient,
Ricci lower bound, Schwarz trace, lattice-geodesic diameter, ball volumes,
and the fibre/base diagnostics of collapsing families."""
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import _kernels
from .fibration import Fibration
from .lattice import (
    BackgroundForm,
    HermitianField,
    Mode,
    PeriodicGrid,
    ScalarField,
    complex_gradient,
    generalized_eigen_range,
    inverse,
    real_metric_blocks,
    ricci_of_metric,
    trace_pair,
)
from .measures import ricci_of_density

DEFAULT_NODE_BUDGET = 2 ** 16
ALL_PAIRS_LIMIT = 4096


def oscillation(phi):
    return float(phi.values.max() - phi.values.min())


def gradient_norm(phi, g):
    """Pointwise ``sqrt(g^{j kbar} d_j phi conj(d_k phi))``."""
    g.grid.check_same(phi.grid)
    grad = complex_gradient(phi)
    ginv = inverse(g)
    q = (ginv.diag * np.abs(grad) ** 2).sum(axis=0)
    if g.n == 2:
        # lower entry (1, 0) and its conjugate (0, 1)
        q = q + 2.0 * np.real(ginv.off[0] * grad[1] * np.conj(grad[0]))
    return np.sqrt(np.maximum(q, 0.0))


def gradient_sup(phi, g):
    return float(gradient_norm(phi, g).max())


def ricci_lower(g):
    """Smallest ``C >= 0`` with ``Ric(g) >= -C g`` at every node."""
    ric = ricci_of_metric(g)
    lo, _ = generalized_eigen_range(ric, g)
    return max(0.0, float(-lo.min()))


def ricci_identity_defect(g, density, reference, lam):
    """Sup of ``Ric(g) + lam (g - reference) - Ric(Omega)`` in the g-norm.

    For a solution of the log equation with a constant ``theta`` this vanishes
    up to the Newton residual; ``reference`` is the form ``chi + t theta``.
    """
    ric = ricci_of_metric(g)
    ref = reference.field(g.grid) if isinstance(reference, BackgroundForm) else reference
    defect = ric + (g - ref).scaled(float(lam)) - ricci_of_density(density)
    lo, hi = generalized_eigen_range(defect, g)
    return float(max(np.abs(lo).max(), np.abs(hi).max()))


def ricci_lower_from_identity(g, density, reference, lam):
    """Ricci lower constant assembled from ``Ric = -lam (g - reference) + Ric(Omega)``."""
    ref = reference.field(g.grid) if isinstance(reference, BackgroundForm) else reference
    neg = (g - ref).scaled(float(lam)) - ricci_of_density(density)
    _, hi = generalized_eigen_range(neg, g)
    return max(0.0, float(hi.max()))


def schwarz_trace(omega, chi):
    """``sup tr_omega chi``."""
    chi_f = chi.field(omega.grid) if isinstance(chi, BackgroundForm) else chi
    return float(trace_pair(omega, chi_f).values.max())


# ---------------------------------------------------------------------------
# lattice geodesics


def stencil_offsets(ndim, radius):
    """Nonzero integer steps with Chebyshev norm <= radius and coprime entries."""
    if radius not in (1, 2, 3):
        raise ValueError("stencil radius must be 1, 2 or 3")
    rng = np.arange(-radius, radius + 1)
    grid = np.stack(np.meshgrid(*([rng] * ndim), indexing="ij"), axis=-1).reshape(-1, ndim)
    keep = [v for v in grid if np.any(v) and math.gcd(*[abs(int(c)) for c in v]) == 1]
    return np.array(keep, dtype=np.int64)


@dataclass(frozen=True)
class MetricGraph:
    """Real metric on a full 2n-torus lattice, ready for Dijkstra."""

    shape: tuple
    G: np.ndarray          # (nodes, d, d)
    spacing: tuple
    coarsen: tuple         # block factor applied on each source axis

    @property
    def node_count(self):
        return int(np.prod(self.shape))

    @property
    def cell_volume(self):
        return float(np.prod(self.spacing))


def _block_mean(arr, factors):
    shape = []
    axes = []
    for a, (m, f) in enumerate(zip(arr.shape[: len(factors)], factors)):
        shape += [m // f, f]
        axes.append(2 * a + 1)
    rest = arr.shape[len(factors):]
    return arr.reshape(tuple(shape) + rest).mean(axis=tuple(axes))


def _coarsening(res, count_fn, budget):
    factors = [1] * len(res)
    while count_fn([r // f for r, f in zip(res, factors)]) > budget:
        a = int(np.argmax([r // f for r, f in zip(res, factors)]))
        if (res[a] // factors[a]) % 2 or res[a] // factors[a] <= 2:
            raise ValueError(f"cannot coarsen resolution {res} below the node budget {budget}")
        factors[a] *= 2
    return tuple(factors)


def metric_graph(g, node_budget=DEFAULT_NODE_BUDGET):
    """Real 2n-dimensional lattice metric of a Hermitian field.

    A Reduced field is extended constantly along the y axes, with each y axis
    as fine as its x partner.  Grids over ``node_budget`` nodes are replaced by
    block averages of the metric on a coarser lattice.
    """
    grid = g.grid
    n = grid.n_complex
    blocks = real_metric_blocks(g)              # grid.shape + (2n, 2n)
    if grid.mode is Mode.FULL:
        factors = _coarsening(grid.resolution, lambda r: int(np.prod(r)), node_budget)
        blocks = _block_mean(blocks, factors)
        shape = blocks.shape[: 2 * n]
    else:
        factors = _coarsening(grid.resolution, lambda r: int(np.prod(r)) ** 2, node_budget)
        blocks = _block_mean(blocks, factors)
        xs = blocks.shape[:n]
        shape = tuple(xs) + tuple(xs)
        blocks = np.broadcast_to(blocks.reshape(tuple(xs) + (1,) * n + blocks.shape[n:]), shape + blocks.shape[n:])
    d = 2 * n
    G = np.ascontiguousarray(blocks.reshape(-1, d, d))
    spacing = tuple(1.0 / m for m in shape)
    return MetricGraph(tuple(int(s) for s in shape), G, spacing, factors)


def _displacements(graph, offsets):
    return offsets * np.asarray(graph.spacing)[None, :]


def distances_from(graph, source, radius=2):
    offsets = stencil_offsets(len(graph.shape), radius)
    disp = _displacements(graph, offsets)
    return _kernels.dijkstra(graph.G, graph.shape, offsets, disp, int(source))


@dataclass(frozen=True)
class DiameterResult:
    diameter: float
    sources: tuple
    exact: bool
    graph_shape: tuple


def diameter_detail(g, stencil_radius=2, sources=8, all_pairs_limit=ALL_PAIRS_LIMIT,
                    node_budget=DEFAULT_NODE_BUDGET):
    graph = g if isinstance(g, MetricGraph) else metric_graph(g, node_budget)
    n_nodes = graph.node_count
    if n_nodes <= all_pairs_limit:
        best = 0.0
        for s in range(n_nodes):
            best = max(best, float(distances_from(graph, s, stencil_radius).max()))
        return DiameterResult(best, tuple(range(n_nodes)), True, graph.shape)
    chosen = [0]
    nearest = np.full(n_nodes, np.inf)
    best = 0.0
    for k in range(sources):
        dist = distances_from(graph, chosen[-1], stencil_radius)
        best = max(best, float(dist.max()))
        nearest = np.minimum(nearest, dist)
        if k + 1 < sources:
            chosen.append(int(np.argmax(nearest)))
    return DiameterResult(best, tuple(chosen), False, graph.shape)


def diameter(g, stencil_radius=2, sources=8, all_pairs_limit=ALL_PAIRS_LIMIT, node_budget=DEFAULT_NODE_BUDGET):
    """Largest lattice-geodesic distance found from the sampled sources."""
    return diameter_detail(g, stencil_radius, sources, all_pairs_limit, node_budget).diameter


def _source_index(graph, g, x):
    """Flat node of the (possibly coarsened, extended) graph nearest to ``x``.

    ``x`` is a node tuple of g's grid or a point of the unit torus.
    """
    grid = g.grid
    if all(isinstance(c, (int, np.integer)) for c in x):
        point = grid.node_point(x)
    else:
        point = tuple(float(c) for c in x)
    if grid.mode is Mode.REDUCED:
        point = tuple(point) + (0.5 / graph.shape[0],) * grid.n_complex
    node = tuple(int(np.floor(p * m)) % m for p, m in zip(point, graph.shape))
    return int(np.ravel_multi_index(node, graph.shape))


def ball_volume_ratio(g, x, r, stencil_radius=2, node_budget=DEFAULT_NODE_BUDGET, graph=None, dist=None):
    """``Vol_g(B(x, r)) / r^(2n)`` with the ball taken in the lattice-geodesic distance."""
    graph = graph or metric_graph(g, node_budget)
    if dist is None:
        dist = distances_from(graph, _source_index(graph, g, x), stencil_radius)
    vol_density = np.sqrt(np.maximum(np.linalg.det(graph.G), 0.0))
    vol = float(vol_density[dist < r].sum() * graph.cell_volume)
    return vol / r ** (2 * g.grid.n_complex)


# ---------------------------------------------------------------------------
# fibre and base diagnostics


def fiber_restrict(omega, fibration, base_node):
    return fibration.fiber_block(omega, base_node)


def fiber_oscillation(phi, fibration, base_node=None):
    """``sup |phi - fibre mean|`` over one fibre, or over all fibres."""
    axes = fibration.fiber_axes(phi.grid)
    dev = np.abs(phi.values - phi.values.mean(axis=axes, keepdims=True))
    if base_node is None:
        return float(dev.max())
    return float(dev[fibration.base_index(phi.grid, base_node)].max())


def _block_arrays(f, fibration):
    if isinstance(f, HermitianField):
        return fibration.fiber_block(f)
    return f


def _fiber_eig_range(a_diag, a_off, r_diag, r_off):
    """Smallest and largest eigenvalue of ``r^{-1} a`` for 1x1 or 2x2 fibre blocks."""
    if a_diag.shape[0] == 1:
        mu = a_diag[0] / r_diag[0]
        return mu, mu
    g0, g1 = r_diag
    h0, h1 = a_diag
    qa = g0 * g1 - np.abs(r_off[0]) ** 2
    qb = h0 * g1 + h1 * g0 - 2.0 * np.real(a_off[0] * np.conj(r_off[0]))
    qc = h0 * h1 - np.abs(a_off[0]) ** 2
    mid = qb / (2.0 * qa)
    root = np.sqrt(np.maximum(mid * mid - qc / qa, 0.0))
    return mid - root, mid + root


def _fiber_det_trace(a_diag, a_off, r_diag, r_off):
    m = a_diag.shape[0]
    if m == 1:
        ratio = a_diag[0] / r_diag[0]
        return ratio, ratio
    det_a = a_diag[0] * a_diag[1] - np.abs(a_off[0]) ** 2
    det_r = r_diag[0] * r_diag[1] - np.abs(r_off[0]) ** 2
    tr = (a_diag[0] * r_diag[1] + a_diag[1] * r_diag[0] - 2.0 * np.real(a_off[0] * np.conj(r_off[0]))) / det_r
    return det_a / det_r, tr


def fiber_cy_gap(omega, t, fibration, reference, base_node=None):
    """Max of the determinant gap and the normalised trace gap between
    ``omega / t`` on the fibres and the reference fibre metric."""
    a_diag, a_off = fibration.fiber_block(omega)
    r_diag, r_off = _block_arrays(reference, fibration)
    a_diag = a_diag / t
    a_off = a_off / t
    det_ratio, tr = _fiber_det_trace(a_diag, a_off, np.broadcast_to(r_diag, a_diag.shape),
                                     np.broadcast_to(r_off, a_off.shape))
    m = a_diag.shape[0]
    gap = np.maximum(np.abs(det_ratio - 1.0), np.abs(tr / m - 1.0))
    if base_node is not None:
        gap = gap[fibration.base_index(omega.grid, base_node)]
    return float(gap.max())


def fiber_domination(omega, t, fibration, reference):
    """Smallest ``C0`` with ``omega|fibre <= C0 t reference`` everywhere."""
    a_diag, a_off = fibration.fiber_block(omega)
    r_diag, r_off = _block_arrays(reference, fibration)
    _, hi = _fiber_eig_range(a_diag / t, a_off / t, np.broadcast_to(r_diag, a_diag.shape),
                             np.broadcast_to(r_off, a_off.shape))
    return float(hi.max())


def fiber_metric_field(omega, fibration, base_node):
    """Fibre restriction over one base node as a field on the fibre grid."""
    return fibration.fiber_block(omega, base_node)


def semi_flat_reference(theta, fibration, grid, density=None, params=None):
    """Fibre blocks of the fibrewise Calabi-Yau metric in the class of theta.

    With no density (or a fibre-constant one) this is theta's fibre block.
    Otherwise every fibre carries the solution of the fibre Monge-Ampere
    equation whose volume form is the density restricted to that fibre,
    normalised to the fibre class volume.  Returns ``(diag, off)`` arrays of
    the fibre block over the whole grid.
    """
    from .solver import ProblemSpec, solve_ma

    k = fibration.base_dim
    th = theta.constant_part
    th_f = th[k:, k:]
    m = grid.n_complex - k
    fgrid = fibration.fiber_grid(grid)
    const = HermitianField.constant(PeriodicGrid(grid.n_complex, grid.mode, grid.resolution), th)
    diag, off = fibration.fiber_block(const)
    diag = np.array(diag)
    off = np.array(off)
    if density is None:
        return diag, off
    axes = fibration.fiber_axes(grid)
    vals = density.values
    normed = vals / vals.mean(axis=axes, keepdims=True)
    if np.allclose(normed, 1.0, rtol=0, atol=1e-13):
        return diag, off
    zero = BackgroundForm(np.zeros((m, m)))
    theta_f = BackgroundForm(th_f)
    cache = {}
    base_shape = tuple(grid.resolution[a] for a in fibration.base_axes(grid))
    for base_node in np.ndindex(*base_shape):
        idx = fibration.base_index(grid, base_node)
        prof = normed[idx]
        key = np.round(prof, 12).tobytes()
        if key not in cache:
            spec = ProblemSpec(fgrid, zero, theta_f, 1.0, 0, density=ScalarField(fgrid, prof), kappa=0)
            sol = solve_ma(spec, params)
            cache[key] = sol.metric
        met = cache[key]
        for j in range(m):
            diag[(j,) + idx] = met.diag[j]
        for o in range(off.shape[0]):
            off[(o,) + idx] = met.off[o]
    return diag, off


def pullback_base_form(base_metric, fibration, grid):
    """Hermitian field on the total space whose base block is ``base_metric``."""
    n = grid.n_complex
    k = fibration.base_dim
    mats = np.zeros(grid.shape + (n, n), dtype=complex)
    if isinstance(base_metric, HermitianField):
        bm = base_metric.matrices()
        shape = [1] * grid.ndim
        for a, ax in enumerate(fibration.base_axes(grid)):
            shape[ax] = grid.resolution[ax]
        bm = np.broadcast_to(bm.reshape(tuple(shape) + (k, k)), grid.shape + (k, k))
    else:
        bm = np.broadcast_to(np.asarray(base_metric, dtype=complex).reshape(k, k), grid.shape + (k, k))
    mats[..., :k, :k] = bm
    return HermitianField.from_matrices(grid, mats)


@dataclass(frozen=True)
class FiberReport:
    fiber_oscillation: float
    rescaled_fiber_gap: float
    fiber_diameter: float
    domination_C0: float


@dataclass(frozen=True)
class BaseReport:
    sup_gap_to_limit: float
    trace_gap: float
    equivalence_C: float


def base_limit_gap(omega, chi_inf, t, theta, kappa, omega_hat=None):
    """Gap between ``omega_t`` and the pulled-back base limit ``chi_inf``.

    ``sup_gap_to_limit`` is the sup of ``|eig(theta^-1 (omega - chi_inf))|``,
    ``trace_gap`` is ``sup |tr_omega chi_inf - kappa|`` and ``equivalence_C``
    compares omega with ``omega_hat`` (``chi + t theta``) from both sides.
    """
    grid = omega.grid
    th = theta.field(grid) if isinstance(theta, BackgroundForm) else theta
    lo, hi = generalized_eigen_range(omega - chi_inf, th)
    sup_gap = float(max(np.abs(lo).max(), np.abs(hi).max()))
    tr = trace_pair(omega, chi_inf).values
    trace_gap = float(np.abs(tr - kappa).max())
    if omega_hat is None:
        eq = float("nan")
    else:
        hat = omega_hat.field(grid) if isinstance(omega_hat, BackgroundForm) else omega_hat
        mlo, mhi = generalized_eigen_range(omega, hat)
        eq = float(max(mhi.max(), 1.0 / mlo.min()))
    return BaseReport(sup_gap, trace_gap, eq)


# ---------------------------------------------------------------------------
# aggregated report


@dataclass(frozen=True)
class EstimateOptions:
    diameter: bool = True
    stencil_radius: int = 2
    sources: int = 8
    node_budget: int = DEFAULT_NODE_BUDGET
    volume_radii: tuple = (0.05, 0.1, 0.2)
    volume_center: tuple = None
    fibration: int = None
    fiber_density: bool = True
    base_metric: object = None


@dataclass
class EstimateReport:
    oscillation: float
    gradient_sup: float
    ricci_lower_C: float
    schwarz_trace_sup: float
    diameter: float
    volume_ratios: list = field(default_factory=list)
    fiber: FiberReport = None
    base: BaseReport = None

    def to_dict(self):
        out = asdict(self)
        out["volume_ratios"] = [list(v) for v in self.volume_ratios]
        if self.fiber is None:
            out.pop("fiber")
        if self.base is None:
            out.pop("base")
        return out

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def scalars(self):
        """Flat name -> value mapping used for result rows."""
        out = {
            "oscillation": self.oscillation,
            "gradient_sup": self.gradient_sup,
            "ricci_lower_C": self.ricci_lower_C,
            "schwarz_trace_sup": self.schwarz_trace_sup,
            "diameter": self.diameter,
        }
        for x, r, ratio in self.volume_ratios:
            out[f"volume_ratio_r{r:g}"] = ratio
        if self.fiber is not None:
            for k, v in asdict(self.fiber).items():
                out[k] = v
        if self.base is not None:
            for k, v in asdict(self.base).items():
                out[k] = v
        return out


def estimate_report(solution, spec, options=None):
    options = options or EstimateOptions()
    g = solution.metric
    phi = solution.phi
    grid = spec.grid
    osc = oscillation(phi)
    grad = gradient_sup(phi, g)
    ric = ricci_lower(g)
    schwarz = schwarz_trace(g, spec.chi)
    diam = float("nan")
    ratios = []
    if options.diameter:
        graph = metric_graph(g, options.node_budget)
        diam = diameter(graph, options.stencil_radius, options.sources)
        center = options.volume_center
        if center is None:
            center = tuple(0.5 for _ in range(grid.ndim))
        src = _source_index(graph, g, center)
        dist = distances_from(graph, src, options.stencil_radius)
        for r in options.volume_radii:
            ratios.append((list(center), float(r), ball_volume_ratio(g, center, r, graph=graph, dist=dist)))
    fiber = base = None
    if options.fibration is not None:
        fib = Fibration(int(options.fibration))
        dens = spec.density if options.fiber_density else None
        ref = semi_flat_reference(spec.theta, fib, grid, dens)
        t = spec.scale_t
        fdiam = float("nan")
        if options.diameter:
            mid = tuple(m // 2 for m in fib.base_grid(grid).resolution)
            fdiam = diameter(fiber_metric_field(g, fib, mid), options.stencil_radius, options.sources,
                             node_budget=options.node_budget)
        fiber = FiberReport(
            fiber_oscillation=fiber_oscillation(phi, fib),
            rescaled_fiber_gap=fiber_cy_gap(g, t, fib, ref),
            fiber_diameter=fdiam,
            domination_C0=fiber_domination(g, t, fib, ref),
        )
        if options.base_metric is not None:
            chi_inf = pullback_base_form(options.base_metric, fib, grid)
            base = base_limit_gap(g, chi_inf, t, spec.theta, spec.kappa, spec.reference())
    return EstimateReport(osc, grad, ric, schwarz, diam, ratios, fiber, base)


__all__ = [
    "BaseReport",
    "DiameterResult",
    "EstimateOptions",
    "EstimateReport",
    "FiberReport",
    "MetricGraph",
    "ball_volume_ratio",
    "base_limit_gap",
    "diameter",
    "diameter_detail",
    "distances_from",
    "estimate_report",
    "fiber_cy_gap",
    "fiber_domination",
    "fiber_metric_field",
    "fiber_oscillation",
    "fiber_restrict",
    "gradient_norm",
    "gradient_sup",
    "metric_graph",
    "oscillation",
    "pullback_base_form",
    "ricci_identity_defect",
    "ricci_lower",
    "ricci_lower_from_identity",
    "schwarz_trace",
    "semi_flat_reference",
    "stencil_offsets",
]
