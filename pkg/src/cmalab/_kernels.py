"""Hot loops: Perron envelope sweeps and lattice Dijkstra.

Each kernel has a numba version and a numpy/scipy twin with the same
arithmetic; ``_accel.use_numba()`` picks one at call time.
"""
import heapq

import numpy as np

from ._accel import njit, use_numba

# ---------------------------------------------------------------------------
# Perron sweep: one colour class, Jacobi within the class
#
# At a node the form chi + Hess(P) equals M0 - P(node) * diag(w), where M0
# collects chi and the neighbour terms.  The largest admissible centre value
# is the smallest eigenvalue of W^-1/2 M0 W^-1/2; the update clips it by the
# obstacle and relaxes with factor omega.


def _targets_py(P, nbr, coef, wdiag, chi, nodes, n):
    vals = P[nbr[nodes]]                       # (m, J)
    ent = vals @ coef.T + chi[None, :]         # (m, E) complex
    if n == 1:
        return ent[:, 0].real / wdiag[0]
    a = ent[:, 0].real / wdiag[0]
    c = ent[:, 1].real / wdiag[1]
    b2 = np.abs(ent[:, 2]) ** 2 / (wdiag[0] * wdiag[1])
    half = 0.5 * (a - c)
    return 0.5 * (a + c) - np.sqrt(half * half + b2)


def _color_update_py(P, H, nbr, coef, wdiag, chi, nodes, omega, n):
    if len(nodes) == 0:
        return 0.0
    target = _targets_py(P, nbr, coef, wdiag, chi, nodes, n)
    old = P[nodes]
    h = H[nodes]
    change = float(np.max(np.abs(np.minimum(h, target) - old)))
    P[nodes] = np.minimum(h, old + omega * (target - old))
    return change


@njit
def _color_update_nb(P, H, nbr, coef, wdiag, chi, nodes, omega, n):
    m = nodes.shape[0]
    J = nbr.shape[1]
    E = coef.shape[0]
    out = np.empty(m)
    ent = np.empty(E, np.complex128)
    change = 0.0
    for s in range(m):
        i = nodes[s]
        for e in range(E):
            acc = 0j
            for j in range(J):
                acc += P[nbr[i, j]] * coef[e, j]
            ent[e] = acc + chi[e]
        if n == 1:
            target = ent[0].real / wdiag[0]
        else:
            a = ent[0].real / wdiag[0]
            c = ent[1].real / wdiag[1]
            b2 = (ent[2].real ** 2 + ent[2].imag ** 2) / (wdiag[0] * wdiag[1])
            half = 0.5 * (a - c)
            target = 0.5 * (a + c) - np.sqrt(half * half + b2)
        old = P[i]
        h = H[i]
        proj = h if h < target else target
        diff = abs(proj - old)
        if diff > change:
            change = diff
        new = old + omega * (target - old)
        out[s] = h if h < new else new
    for s in range(m):
        P[nodes[s]] = out[s]
    return change


def color_update(P, H, nbr, coef, wdiag, chi, nodes, omega, n):
    if use_numba():
        return _color_update_nb(P, H, nbr, coef, wdiag, chi, nodes, omega, n)
    return _color_update_py(P, H, nbr, coef, wdiag, chi, nodes, omega, n)


# ---------------------------------------------------------------------------
# Dijkstra on an implicit periodic lattice graph


@njit
def _dijkstra_nb(G, shape, offsets, disp, source):
    ndim = shape.shape[0]
    n = G.shape[0]
    strides = np.empty(ndim, np.int64)
    s = 1
    for a in range(ndim - 1, -1, -1):
        strides[a] = s
        s *= shape[a]
    n_off = offsets.shape[0]
    rdim = G.shape[1]
    # edge half-weights sqrt(v^T G_i v) are recomputed per relaxation
    dist = np.full(n, np.inf)
    done = np.zeros(n, np.bool_)
    heap_d = np.empty(n * 4 + 16)
    heap_i = np.empty(n * 4 + 16, np.int64)
    size = 0
    dist[source] = 0.0
    heap_d[0] = 0.0
    heap_i[0] = source
    size = 1
    coord = np.empty(ndim, np.int64)
    while size > 0:
        d0 = heap_d[0]
        u = heap_i[0]
        size -= 1
        if size > 0:
            ld = heap_d[size]
            li = heap_i[size]
            pos = 0
            while True:
                c = 2 * pos + 1
                if c >= size:
                    break
                if c + 1 < size and heap_d[c + 1] < heap_d[c]:
                    c += 1
                if heap_d[c] < ld:
                    heap_d[pos] = heap_d[c]
                    heap_i[pos] = heap_i[c]
                    pos = c
                else:
                    break
            heap_d[pos] = ld
            heap_i[pos] = li
        if done[u]:
            continue
        done[u] = True
        rem = u
        for a in range(ndim):
            coord[a] = rem // strides[a]
            rem = rem % strides[a]
        for o in range(n_off):
            v = 0
            for a in range(ndim):
                c = coord[a] + offsets[o, a]
                m = shape[a]
                if c < 0:
                    c += m
                elif c >= m:
                    c -= m
                v += c * strides[a]
            if done[v]:
                continue
            qu = 0.0
            qv = 0.0
            for p in range(rdim):
                sp = 0.0
                sq = 0.0
                for q in range(rdim):
                    sp += G[u, p, q] * disp[o, q]
                    sq += G[v, p, q] * disp[o, q]
                qu += disp[o, p] * sp
                qv += disp[o, p] * sq
            w = 0.5 * (np.sqrt(max(qu, 0.0)) + np.sqrt(max(qv, 0.0)))
            nd = d0 + w
            if nd < dist[v]:
                dist[v] = nd
                if size >= heap_d.shape[0]:
                    grow_d = np.empty(heap_d.shape[0] * 2)
                    grow_i = np.empty(heap_d.shape[0] * 2, np.int64)
                    grow_d[:size] = heap_d[:size]
                    grow_i[:size] = heap_i[:size]
                    heap_d = grow_d
                    heap_i = grow_i
                pos = size
                size += 1
                while pos > 0:
                    par = (pos - 1) // 2
                    if heap_d[par] > nd:
                        heap_d[pos] = heap_d[par]
                        heap_i[pos] = heap_i[par]
                        pos = par
                    else:
                        break
                heap_d[pos] = nd
                heap_i[pos] = v
    return dist


def edge_list(G, shape, offsets, disp):
    """All directed edges (i, j, w) of the lattice graph, vectorised."""
    n = G.shape[0]
    idx = np.arange(n)
    coords = np.stack(np.unravel_index(idx, shape), axis=1)
    q = np.sqrt(np.maximum(np.einsum("op,npq,oq->no", disp, G, disp), 0.0))
    rows, cols, ws = [], [], []
    for o in range(offsets.shape[0]):
        nb = (coords + offsets[o]) % np.asarray(shape)
        j = np.ravel_multi_index(tuple(nb.T), shape)
        rows.append(idx)
        cols.append(j)
        ws.append(0.5 * (q[:, o] + q[j, o]))
    return np.concatenate(rows), np.concatenate(cols), np.concatenate(ws)


def _dijkstra_py(G, shape, offsets, disp, source):
    from scipy.sparse import csr_matrix
    from scipy.sparse.csgraph import dijkstra

    n = G.shape[0]
    r, c, w = edge_list(G, shape, offsets, disp)
    # a zero weight would vanish from the sparse structure
    w = np.maximum(w, 1e-300)
    mat = csr_matrix((w, (r, c)), shape=(n, n))
    return dijkstra(mat, directed=True, indices=int(source))


def dijkstra(G, shape, offsets, disp, source):
    """Distances from ``source`` with the 2-point (endpoint) edge rule.

    ``G`` is (nodes, d, d) real metrics, ``offsets`` integer steps (k, ndim) and
    ``disp`` the matching physical displacements (k, d).
    """
    shape_arr = np.asarray(shape, dtype=np.int64)
    if use_numba():
        return _dijkstra_nb(G, shape_arr, offsets.astype(np.int64), disp.astype(float), int(source))
    return _dijkstra_py(G, tuple(int(s) for s in shape), offsets, disp, source)


def dijkstra_reference(G, shape, offsets, disp, source):
    """Plain heapq Dijkstra, used as an independent check on small graphs."""
    n = G.shape[0]
    r, c, w = edge_list(G, tuple(shape), offsets, disp)
    order = np.argsort(r, kind="stable")
    r, c, w = r[order], c[order], w[order]
    starts = np.searchsorted(r, np.arange(n + 1))
    dist = np.full(n, np.inf)
    dist[source] = 0.0
    heap = [(0.0, int(source))]
    while heap:
        d, u = heapq.heappop(heap)
        if d > dist[u]:
            continue
        for e in range(starts[u], starts[u + 1]):
            nd = d + w[e]
            v = c[e]
            if nd < dist[v]:
                dist[v] = nd
                heapq.heappush(heap, (nd, int(v)))
    return dist
