"""Compare the numba kernels with their numpy twins on two workloads.

    python benchmarks/bench_kernels.py [--repeat 3]

Workload 1 is the Perron envelope iteration on an n=2 reduced grid. Workload 2
is single-source Dijkstra on a flat 2-torus. Each workload runs once per path
before timing so numba's compile time is excluded. Both paths must agree.
"""
import argparse
import math
import os
import time

import numpy as np

from cmalab.estimates import distances_from, metric_graph
from cmalab.lattice import BackgroundForm, HermitianField, ScalarField, build_grid
from cmalab.pluripotential import psh_envelope


def envelope_workload(res):
    grid = build_grid(2, "reduced", res)
    x = grid.mesh()[grid.x_axis(0)]
    h = ScalarField(grid, np.broadcast_to(0.5 * np.cos(2 * math.pi * x), grid.shape))
    form = BackgroundForm(np.eye(2))
    return lambda: psh_envelope(h, form).P_h.values


def dijkstra_workload(res):
    grid = build_grid(1, "full", res)
    g = HermitianField.constant(grid, np.eye(1))
    graph = metric_graph(g)
    return lambda: distances_from(graph, 0, 2)


def timed(fn, use_numba, repeat):
    os.environ["CMALAB_NUMBA"] = "1" if use_numba else "0"
    out = fn()
    best = math.inf
    for _ in range(repeat):
        start = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - start)
    return best, np.asarray(out)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=3)
    ap.add_argument("--envelope-res", type=int, default=48)
    ap.add_argument("--dijkstra-res", type=int, default=128)
    args = ap.parse_args()
    cases = [
        (f"perron envelope n=2 reduced {args.envelope_res}^2", envelope_workload(args.envelope_res)),
        (f"dijkstra flat torus {args.dijkstra_res}^2", dijkstra_workload(args.dijkstra_res)),
    ]
    print(f"{'workload':40s} {'numba s':>10s} {'numpy s':>10s} {'speedup':>8s} {'max diff':>10s}")
    for name, fn in cases:
        t_nb, a = timed(fn, True, args.repeat)
        t_np, b = timed(fn, False, args.repeat)
        diff = float(np.abs(a - b).max())
        print(f"{name:40s} {t_nb:10.4f} {t_np:10.4f} {t_np / t_nb:8.1f} {diff:10.2e}")
    os.environ.pop("CMALAB_NUMBA", None)


if __name__ == "__main__":
    main()
