"""Periodic grids on flat complex tori and the pointwise kernels built on them.

Axis order on a Full grid is ``(x_1, ..., x_n, y_1, ..., y_n)`` where
``z_j = x_j + i y_j``.  A Reduced grid keeps only the ``x`` axes and stands for
fields that do not depend on any ``y``.  Nodes are cell centred: the node with
index ``i`` on an axis of resolution ``m`` sits at ``(i + 0.5) / m``.

Hermitian fields store, per node, the real diagonal and the strictly lower
triangle; the upper triangle is never stored, so ``M == M^H`` holds exactly.
The complex Hessian convention is ``phi_{j kbar} = d^2 phi / dz_j dzbar_k``,
so ``|z|^2`` has Hessian 1.
"""
import enum
from dataclasses import dataclass, field

import numpy as np

from .errors import GridError, GridMismatch, PositivityLost, SingularMetric

DEFAULT_MEMORY_CAP = 2 ** 26


class Mode(str, enum.Enum):
    FULL = "full"
    REDUCED = "reduced"

    @classmethod
    def parse(cls, value):
        if isinstance(value, Mode):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            raise GridError(f"unknown grid mode {value!r}") from None


@dataclass(frozen=True)
class PeriodicGrid:
    n_complex: int
    mode: Mode
    resolution: tuple

    @property
    def ndim(self):
        return len(self.resolution)

    @property
    def shape(self):
        return tuple(self.resolution)

    @property
    def spacing(self):
        return tuple(1.0 / m for m in self.resolution)

    @property
    def node_count(self):
        return int(np.prod(self.resolution, dtype=np.int64))

    @property
    def cell_volume(self):
        return float(np.prod(self.spacing))

    def x_axis(self, j):
        return j

    def y_axis(self, j):
        """Array axis of ``y_j``, or None on a Reduced grid."""
        if self.mode is Mode.REDUCED:
            return None
        return self.n_complex + j

    def coords(self, axis):
        m = self.resolution[axis]
        return (np.arange(m) + 0.5) / m

    def mesh(self):
        """Sparse broadcastable coordinate arrays, one per axis."""
        return np.meshgrid(*[self.coords(a) for a in range(self.ndim)], indexing="ij", sparse=True)

    def node_point(self, node):
        return tuple((int(i) + 0.5) / m for i, m in zip(node, self.resolution))

    def nearest_node(self, point):
        return tuple(int(np.floor(p * m)) % m for p, m in zip(point, self.resolution))

    def neighbor(self, node, offset):
        return tuple((int(i) + int(o)) % m for i, o, m in zip(node, offset, self.resolution))

    def check_same(self, other):
        if self != other:
            raise GridMismatch(f"grid mismatch: {self} vs {other}")


def build_grid(n_complex, mode, resolution, memory_cap=DEFAULT_MEMORY_CAP):
    """Build a periodic grid; ``resolution`` is one integer or one per axis."""
    if n_complex not in (1, 2):
        raise GridError(f"n_complex must be 1 or 2, got {n_complex}")
    mode = Mode.parse(mode)
    ndim = 2 * n_complex if mode is Mode.FULL else n_complex
    if np.ndim(resolution) == 0:
        res = (int(resolution),) * ndim
    else:
        res = tuple(int(r) for r in resolution)
        if len(res) != ndim:
            raise GridError(f"{mode.value} grid with n={n_complex} needs {ndim} resolutions, got {len(res)}")
    if min(res) < 8:
        raise GridError(f"resolution must be >= 8 on every axis, got {res}")
    count = int(np.prod(res, dtype=np.int64))
    if mode is Mode.FULL and count > memory_cap:
        raise GridError(f"Full grid with {count} nodes exceeds the memory cap of {memory_cap}")
    return PeriodicGrid(n_complex, mode, res)


def _frozen(a):
    a = np.array(a, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class ScalarField:
    grid: PeriodicGrid
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.shape != self.grid.shape:
            v = np.broadcast_to(v, self.grid.shape)
        if not np.all(np.isfinite(v)):
            raise ValueError("scalar field has non-finite values")
        object.__setattr__(self, "values", _frozen(v))

    @classmethod
    def constant(cls, grid, c):
        return cls(grid, np.full(grid.shape, float(c)))

    def with_values(self, values):
        return ScalarField(self.grid, values)

    def sup(self):
        return float(self.values.max())

    def inf(self):
        return float(self.values.min())


def _n_off(n):
    return n * (n - 1) // 2


def _off_index(j, k):
    """Position of the strictly lower entry (j, k), j > k, in packed storage."""
    return j * (j - 1) // 2 + k


@dataclass(frozen=True, eq=False)
class HermitianField:
    grid: PeriodicGrid
    diag: np.ndarray
    off: np.ndarray
    positivity_checked: bool = False

    def __post_init__(self):
        n = self.grid.n_complex
        d = np.asarray(self.diag, dtype=float)
        o = np.asarray(self.off, dtype=complex)
        d = np.broadcast_to(d, (n,) + self.grid.shape) if d.shape != (n,) + self.grid.shape else d
        oshape = (_n_off(n),) + self.grid.shape
        o = np.broadcast_to(o, oshape) if o.shape != oshape else o
        object.__setattr__(self, "diag", _frozen(d))
        object.__setattr__(self, "off", _frozen(o))

    @property
    def n(self):
        return self.grid.n_complex

    def entry(self, j, k):
        if j == k:
            return self.diag[j].astype(complex)
        if j > k:
            return self.off[_off_index(j, k)]
        return np.conj(self.off[_off_index(k, j)])

    def matrices(self):
        n = self.n
        m = np.empty(self.grid.shape + (n, n), dtype=complex)
        for j in range(n):
            for k in range(n):
                m[..., j, k] = self.entry(j, k)
        return m

    def at(self, node):
        return self.matrices()[tuple(node)]

    @classmethod
    def from_matrices(cls, grid, m):
        m = np.asarray(m, dtype=complex)
        n = grid.n_complex
        m = np.broadcast_to(m, grid.shape + (n, n))
        diag = np.stack([m[..., j, j].real for j in range(n)])
        off = np.zeros((_n_off(n),) + grid.shape, dtype=complex)
        for j in range(n):
            for k in range(j):
                off[_off_index(j, k)] = 0.5 * (m[..., j, k] + np.conj(m[..., k, j]))
        return cls(grid, diag, off)

    @classmethod
    def constant(cls, grid, matrix):
        return cls.from_matrices(grid, np.asarray(matrix, dtype=complex))

    @classmethod
    def zeros(cls, grid):
        n = grid.n_complex
        return cls(grid, np.zeros((n,) + grid.shape), np.zeros((_n_off(n),) + grid.shape, complex))

    def __add__(self, other):
        self.grid.check_same(other.grid)
        return HermitianField(self.grid, self.diag + other.diag, self.off + other.off)

    def __sub__(self, other):
        self.grid.check_same(other.grid)
        return HermitianField(self.grid, self.diag - other.diag, self.off - other.off)

    def scaled(self, c):
        return HermitianField(self.grid, c * self.diag, c * self.off)

    def marked_positive(self):
        return HermitianField(self.grid, self.diag, self.off, positivity_checked=True)


@dataclass(frozen=True, eq=False)
class BackgroundForm:
    """Constant Hermitian matrix plus an optional ``i d dbar h`` correction."""

    constant_part: np.ndarray
    potential_part: ScalarField = None
    rank_tol: float = field(default=1e-12, repr=False)

    def __post_init__(self):
        c = np.atleast_2d(np.asarray(self.constant_part, dtype=complex))
        if c.shape[0] != c.shape[1]:
            raise ValueError("constant part must be square")
        c = 0.5 * (c + c.conj().T)
        object.__setattr__(self, "constant_part", _frozen(c))

    @classmethod
    def identity(cls, n):
        return cls(np.eye(n))

    @classmethod
    def diagonal(cls, *entries):
        return cls(np.diag(np.asarray(entries, dtype=float)))

    @property
    def n(self):
        return self.constant_part.shape[0]

    @property
    def eigenvalues(self):
        return np.linalg.eigvalsh(self.constant_part)

    @property
    def rank(self):
        """Number of positive eigenvalues of the constant part."""
        ev = self.eigenvalues
        scale = max(1.0, float(np.max(np.abs(ev))))
        return int(np.sum(ev > self.rank_tol * scale))

    def is_semipositive(self, tol=0.0):
        return self.potential_part is None and float(self.eigenvalues.min()) >= -tol

    def field(self, grid):
        if self.n != grid.n_complex:
            raise GridMismatch(f"form of size {self.n} on a grid with n={grid.n_complex}")
        f = HermitianField.constant(grid, self.constant_part)
        if self.potential_part is not None:
            f = f + complex_hessian(self.potential_part)
        return f

    def plus(self, other, t=1.0):
        """The form ``self + t * other`` (potential parts add too)."""
        pot = self.potential_part
        if other.potential_part is not None:
            extra = t * other.potential_part.values
            pot = other.potential_part.with_values(extra if pot is None else pot.values + extra)
        return BackgroundForm(self.constant_part + t * other.constant_part, pot)


def second_difference(values, a, b, spacing):
    """Centred second partial along array axes ``a`` and ``b`` (periodic)."""
    if a == b:
        return (np.roll(values, -1, a) + np.roll(values, 1, a) - 2.0 * values) / spacing[a] ** 2
    pp = np.roll(np.roll(values, -1, a), -1, b)
    pm = np.roll(np.roll(values, -1, a), 1, b)
    mp = np.roll(np.roll(values, 1, a), -1, b)
    mm = np.roll(np.roll(values, 1, a), 1, b)
    return (pp - pm - mp + mm) / (4.0 * spacing[a] * spacing[b])


def first_difference(values, a, spacing):
    return (np.roll(values, -1, a) - np.roll(values, 1, a)) / (2.0 * spacing[a])


def _hessian_arrays(values, grid):
    n = grid.n_complex
    h = grid.spacing
    diag = np.empty((n,) + grid.shape)
    off = np.zeros((_n_off(n),) + grid.shape, dtype=complex)
    full = grid.mode is Mode.FULL

    def d2(a, b):
        return second_difference(values, a, b, h)

    for j in range(n):
        xj = grid.x_axis(j)
        if full:
            yj = grid.y_axis(j)
            diag[j] = 0.25 * (d2(xj, xj) + d2(yj, yj))
        else:
            diag[j] = 0.25 * d2(xj, xj)
        for k in range(j):
            xk = grid.x_axis(k)
            if full:
                yk = grid.y_axis(k)
                re = d2(xj, xk) + d2(yj, yk)
                im = d2(xj, yk) - d2(yj, xk)
                off[_off_index(j, k)] = 0.25 * (re + 1j * im)
            else:
                off[_off_index(j, k)] = 0.25 * d2(xj, xk)
    return diag, off


def complex_hessian(phi):
    """Second-order centred complex Hessian ``phi_{j kbar}`` of a scalar field."""
    diag, off = _hessian_arrays(phi.values, phi.grid)
    return HermitianField(phi.grid, diag, off)


def complex_gradient(phi):
    """Components ``d phi / dz_j = (d_x - i d_y) phi / 2`` by centred differences."""
    grid = phi.grid
    h = grid.spacing
    out = np.zeros((grid.n_complex,) + grid.shape, dtype=complex)
    for j in range(grid.n_complex):
        out[j] = 0.5 * first_difference(phi.values, grid.x_axis(j), h)
        ya = grid.y_axis(j)
        if ya is not None:
            out[j] -= 0.5j * first_difference(phi.values, ya, h)
    return out


# ---------------------------------------------------------------------------
# pointwise Hermitian algebra for n in {1, 2}


def det_array(f):
    if f.n == 1:
        return f.diag[0].copy()
    return f.diag[0] * f.diag[1] - np.abs(f.off[0]) ** 2


def min_eigenvalue_array(f):
    if f.n == 1:
        return f.diag[0].copy()
    a, d = f.diag
    return 0.5 * (a + d) - np.sqrt(0.25 * (a - d) ** 2 + np.abs(f.off[0]) ** 2)


def max_eigenvalue_array(f):
    if f.n == 1:
        return f.diag[0].copy()
    a, d = f.diag
    return 0.5 * (a + d) + np.sqrt(0.25 * (a - d) ** 2 + np.abs(f.off[0]) ** 2)


def trace_array(f):
    return f.diag.sum(axis=0)


def _first_bad(mask):
    idx = np.argwhere(mask)
    return tuple(idx[0]) if len(idx) else None


def logdet_array(f):
    """log det by a pointwise Cholesky factorisation; SingularMetric if not PD."""
    if f.n == 1:
        a = f.diag[0]
        bad = _first_bad(~(a > 0))
        if bad is not None:
            raise SingularMetric(bad)
        return np.log(a)
    a, d = f.diag
    bad = _first_bad(~(a > 0))
    if bad is not None:
        raise SingularMetric(bad)
    schur = d - np.abs(f.off[0]) ** 2 / a
    bad = _first_bad(~(schur > 0))
    if bad is not None:
        raise SingularMetric(bad)
    return np.log(a) + np.log(schur)


def inverse(f):
    det = det_array(f)
    bad = _first_bad(det == 0)
    if bad is not None:
        raise SingularMetric(bad)
    if f.n == 1:
        return HermitianField(f.grid, 1.0 / f.diag, f.off)
    a, d = f.diag
    return HermitianField(f.grid, np.stack([d / det, a / det]), -f.off / det)


def trace_product_array(a, b):
    """Pointwise ``tr(A B)`` for Hermitian fields A and B."""
    out = (a.diag * b.diag).sum(axis=0)
    if a.n == 2:
        out = out + 2.0 * np.real(a.off[0] * np.conj(b.off[0]))
    return out


def generalized_eigen_range(h, g):
    """Pointwise smallest and largest eigenvalues of ``g^{-1} h`` (g positive)."""
    if h.n == 1:
        mu = h.diag[0] / g.diag[0]
        return mu, mu.copy()
    g0, g1 = g.diag
    h0, h1 = h.diag
    qa = g0 * g1 - np.abs(g.off[0]) ** 2
    qb = h0 * g1 + h1 * g0 - 2.0 * np.real(h.off[0] * np.conj(g.off[0]))
    qc = h0 * h1 - np.abs(h.off[0]) ** 2
    mid = qb / (2.0 * qa)
    disc = np.maximum(mid * mid - qc / qa, 0.0)
    root = np.sqrt(disc)
    return mid - root, mid + root


def metric_from_potential(background, t, theta, phi, check=True):
    """Pointwise ``chi + t theta + i d dbar phi``; PositivityLost if not positive."""
    grid = phi.grid
    omega = background.field(grid) + theta.field(grid).scaled(t) + complex_hessian(phi)
    if not check:
        return omega
    lam = min_eigenvalue_array(omega)
    if not np.all(lam > 0):
        node = np.unravel_index(int(np.argmin(lam)), grid.shape)
        raise PositivityLost(node, lam[node])
    return omega.marked_positive()


def det_ratio(omega, theta_vol):
    omega.grid.check_same(theta_vol.grid)
    return ScalarField(omega.grid, det_array(omega) / det_array(theta_vol))


def trace_pair(g, h):
    """Pointwise ``tr(g^{-1} h)``."""
    g.grid.check_same(h.grid)
    det = det_array(g)
    bad = _first_bad(~(np.abs(det) > 0))
    if bad is not None:
        raise SingularMetric(bad)
    return ScalarField(g.grid, trace_product_array(inverse(g), h))


def ricci_of_metric(g):
    """``Ric(g) = -i d dbar log det g``."""
    ld = logdet_array(g)
    return complex_hessian(ScalarField(g.grid, ld)).scaled(-1.0)


def integrate(s, weight=None):
    """Midpoint-rule integral over the unit torus.

    On a Reduced grid the integral runs over the x-torus; the y-fibre has unit
    volume, so totals agree with the Full torus.
    """
    v = s.values
    if weight is not None:
        s.grid.check_same(weight.grid)
        v = v * weight.values
    return float(np.sum(v) * s.grid.cell_volume)


def real_metric_blocks(f):
    """Real ``2n x 2n`` metric ``[[A, B], [-B, A]]`` for ``M = A + iB``.

    The quadratic form is ``v -> Re sum_jk M_jk xi_j conj(xi_k)`` with
    ``xi = v_x + i v_y``, which is the Euclidean metric when M is the identity.
    Returned with shape ``grid.shape + (2n, 2n)``.
    """
    m = f.matrices()
    a = m.real
    b = m.imag
    n = f.n
    out = np.empty(f.grid.shape + (2 * n, 2 * n))
    out[..., :n, :n] = a
    out[..., n:, n:] = a
    out[..., :n, n:] = b
    out[..., n:, :n] = -b
    return out
