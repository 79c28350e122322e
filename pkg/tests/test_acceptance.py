"""Acceptance criteria, one test per criterion (criteria 3 and 5 are split
into the part that holds and an expected-failure part).  Every test prints a
PASS/FAIL line; the lines are collected again at the end of the run."""
import math
import time
from pathlib import Path

import numpy as np
import pytest

from cmalab.config import load_config
from cmalab.estimates import diameter
from cmalab.harness import run_scenario
from cmalab.lattice import BackgroundForm, HermitianField, ScalarField, build_grid
from cmalab.pluripotential import (
    capacity_decay_table,
    comparison_check,
    degiorgi_bound,
    extremal_function,
    measured_decay_constant,
)
from cmalab.solver import ProblemSpec, solve_ma

from conftest import VERDICTS

CONFIGS = Path(__file__).parent.parent / "configs"


def verdict(label, checks, detail=""):
    """Record and print one PASS/FAIL line, then assert every check."""
    failed = [k for k, ok in checks.items() if not ok]
    line = f"{'PASS' if not failed else 'FAIL'} {label}"
    if detail:
        line += f" [{detail}]"
    if failed:
        line += " failed: " + ", ".join(failed)
    VERDICTS.append(line)
    print(line)
    assert not failed, line


def run(name, parallelism=1, out=None, **kw):
    cfg = load_config(CONFIGS / f"{name}.yaml")
    start = time.perf_counter()
    res = run_scenario(cfg, parallelism=parallelism, out=out, **kw)
    return res, time.perf_counter() - start


# --- 1. manufactured solutions ------------------------------------------------------


@pytest.mark.parametrize("name", ["validation_n1_lam0", "validation_n1_lam1", "validation_n2_lam0", "validation_n2_lam1"])
def test_criterion_1_manufactured_convergence(name):
    res, _ = run(name)
    order = res.summary["fitted_order"]
    slowest = max(t["seconds"] for t in res.timings)
    verdict(f"criterion 1 manufactured solutions {name}", {
        "all_resolutions_solved": not res.failures and len(res.rows) == 3,
        "order_at_least_1.9": order >= 1.9,
        "each_solve_under_10s": slowest < 10.0,
    }, f"order={order:.3f} slowest={slowest:.2f}s")


# --- 2. closed form ---------------------------------------------------------------------


def test_criterion_2_closed_form():
    res, _ = run("closed_form")
    worst = res.summary["max_error_over_10h2"]
    verdict("criterion 2 closed-form oracle", {
        "within_10h2_at_every_resolution": worst <= 1.0 and not res.failures,
    }, f"max error/(10h^2)={worst:.3f}")


# --- 3. Thm1 uniformity sweep ------------------------------------------------------------


@pytest.fixture(scope="module")
def thm1_sweeps():
    return {name: run(name) for name in ("thm1_n1", "thm1_n2")}


@pytest.mark.slow
@pytest.mark.parametrize("name", ["thm1_n1", "thm1_n2"])
def test_criterion_3_uniformity_sweep(thm1_sweeps, name):
    res, seconds = thm1_sweeps[name]
    s = res.summary
    stable = s["bound_stable"]
    verdict(f"criterion 3 uniformity sweep {name}", {
        "all_members_solved": not res.failures and len(res.rows) == 4,
        "lp_norm_within_2x": s["ratios"]["lp_norm"] <= 2.0,
        "oscillation_bound_stable": stable["oscillation"],
        "gradient_sup_bound_stable": stable["gradient_sup"],
        "diameter_bound_stable": stable["diameter"],
        "sup_density_grows_100x": s["ratios"]["sup_density_growth"] > 100.0,
        "sweep_under_10_min": seconds < 600.0,
    }, f"lp ratio={s['ratios']['lp_norm']:.3f} sup growth={s['ratios']['sup_density_growth']:.0f} {seconds:.0f}s")


@pytest.mark.slow
@pytest.mark.xfail(strict=True, reason="log of an unresolved pole is not discretely psh once eps < h")
@pytest.mark.parametrize("name", ["thm1_n1", "thm1_n2"])
def test_criterion_3_ricci_uniformity(thm1_sweeps, name):
    res, _ = thm1_sweeps[name]
    s = res.summary
    verdict(f"criterion 3 ricci bounds {name} (expected failure)", {
        "ricci_A_lower_within_2x": s["ratios"]["ricci_A_lower"] <= 2.0,
        "ricci_lower_C_bound_stable": s["bound_stable"]["ricci_lower_C"],
    }, f"A_lower ratio={s['ratios']['ricci_A_lower']:.1f}")


# --- 4. diameter oracle ------------------------------------------------------------------


def test_criterion_4_diameter_oracle():
    flat_grid = build_grid(1, "full", 256)
    flat = diameter(HermitianField.constant(flat_grid, np.eye(1)), stencil_radius=2)
    g64 = build_grid(1, "full", 64)
    base = diameter(HermitianField.constant(g64, np.eye(1)))
    scaled = diameter(HermitianField.constant(g64, 4.0 * np.eye(1)))
    g2 = build_grid(2, "reduced", 16)
    t = 0.1
    product = diameter(HermitianField.constant(g2, np.diag([1.0, t])))
    want = math.sqrt(2 * (1 + t)) / 2
    verdict("criterion 4 diameter oracle", {
        "flat_within_2pct": abs(flat / (math.sqrt(2) / 2) - 1) <= 0.02,
        "scaling_within_3pct": abs(scaled / (2 * base) - 1) <= 0.03,
        "product_within_3pct": abs(product / want - 1) <= 0.03,
    }, f"flat={flat:.5f} scale={scaled / base:.4f} product={product / want:.4f}")


# --- 5. Prop2 collapse ---------------------------------------------------------------------


@pytest.fixture(scope="module")
def prop2():
    return run("prop2")[0]


def test_criterion_5_collapse(prop2):
    s = prop2.summary
    c_err = max(abs(r["c_t"] - math.log(1 + r["t"])) for r in prop2.rows)
    verdict("criterion 5 collapse bounds", {
        "all_members_solved": not prop2.failures and len(prop2.rows) == 5,
        "V_identically_zero": s["V_identically_zero"],
        "normalized_potential_bound_stable": s["uniform_bound"],
        "c_t_is_log_1_plus_t": c_err <= 1e-6,
    }, f"c_t error={c_err:.1e}")


@pytest.mark.xfail(strict=True, reason="tr_omega chi tends to its t=0 value, about 2x the t=1 value")
def test_criterion_5_schwarz_trace(prop2):
    ratio = prop2.summary["schwarz_ratio"]
    verdict("criterion 5 schwarz trace (expected failure)", {"schwarz_within_1.1x": ratio <= 1.1},
            f"ratio={ratio:.3f}")


# --- 6. semi-flat diagnostics ------------------------------------------------------------------


@pytest.mark.slow
def test_criterion_6_semi_flat():
    res, seconds = run("semiflat")
    s = res.summary
    checks = dict(s["checks"])
    checks["all_members_solved"] = not res.failures and len(res.rows) == 5
    verdict("criterion 6 semi-flat collapse", checks,
            f"fiber osc slope={s['fiber_oscillation_slope']:.3f} fiber diam exp={s['fiber_diameter_exponent']:.3f} "
            f"base gap={s['base_gap_last']:.4f} {seconds:.0f}s")


# --- 7. t_min -----------------------------------------------------------------------------------


def test_criterion_7_tmin():
    indefinite, _ = run("tmin")
    nef, _ = run("tmin_nef")
    a, b = indefinite.summary["t_min"], nef.summary["t_min"]
    verdict("criterion 7 t_min detection", {
        "indefinite_0.25": abs(a - 0.25) <= 0.02,
        "nef_zero": b == 0.0,
    }, f"t_min={a:.5f} nef={b}")


# --- 8. pluripotential suite ----------------------------------------------------------------------


def solved_instances():
    g = build_grid(1, "reduced", 128)
    x = g.coords(0)
    chi = BackgroundForm(np.zeros((1, 1)))
    theta = BackgroundForm(12.0 * np.eye(1))
    densities = (
        np.exp(-((x - 0.5) / 0.05) ** 2 / 2) + 0.05,
        np.exp(-((x - 0.3) / 0.1) ** 2 / 2) + 0.05,
        np.exp(3 * np.cos(2 * math.pi * x)),
    )
    for d in densities:
        sol = solve_ma(ProblemSpec(g, chi, theta, 1.0, 0, ScalarField(g, d)))
        yield sol.phi, chi.plus(theta, 1.0), extremal_function(chi, theta, 1.0, g)


def test_criterion_8_pluripotential():
    checks = {}
    for name in ("envelope_n1", "envelope_n2"):
        res, _ = run(name)
        for row in res.rows:
            checks[f"{name}:{row['check']}"] = row["passed"]
    margins, S = [], []
    for k, (phi, form, V) in enumerate(solved_instances()):
        assert -phi.values.min() > 3.0  # both sublevel sets are nonempty
        for s in (1.0, 2.0):
            cmp = comparison_check(phi, form, V, s, 1.0)
            margins.append(cmp.margin)
            checks[f"instance{k}:comparison_s{s:g}"] = cmp.holds and cmp.margin >= 0
        tab = capacity_decay_table(phi, V, form, np.arange(0.0, 8.01, 0.25))
        A = measured_decay_constant(tab.s, tab.cap_lower, 1.0)
        dg = degiorgi_bound(tab.s, tab.cap_lower, A, 1.0)
        S.append(dg.S)
        checks[f"instance{k}:degiorgi_S_is_s0_plus_2"] = dg.S == dg.s0 + 2.0
        checks[f"instance{k}:vanishing_confirmed"] = dg.vanishing_checked and dg.hypothesis_held
    verdict("criterion 8 pluripotential suite", checks,
            f"min comparison margin={min(margins):.3f} S={S}")


# --- 9. determinism --------------------------------------------------------------------------------


@pytest.mark.parametrize("name,resolution", [("thm1_n1", 32), ("prop2", 32), ("validation_n1_lam1", None)])
def test_criterion_9_determinism(tmp_path, name, resolution):
    cfg = load_config(CONFIGS / f"{name}.yaml")
    if resolution is not None:
        cfg = cfg.with_resolution(resolution)
    outputs = {}
    for k in (1, 4):
        run_scenario(cfg, parallelism=k, out=tmp_path / f"p{k}")
        outputs[k] = [(tmp_path / f"p{k}" / f).read_bytes() for f in ("results.csv", "failures.csv")]
    verdict(f"criterion 9 determinism {name}", {
        "results_csv_identical": outputs[1][0] == outputs[4][0],
        "failures_csv_identical": outputs[1][1] == outputs[4][1],
    })
