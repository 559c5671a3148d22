"""Acceptance criteria, one test each.

Every test records a one-line verdict that the terminal summary prints as
``[PASS]`` / ``[FAIL]`` after the run.
"""
import math
import time

import numpy as np
import pytest
from conftest import record_criterion

from degencontrol import DomainSpec, WeightSpec, build_grid, psi_eps
from degencontrol.carleman import (build_eta, carleman_ratio, carleman_weights, decomposition_residual,
                                   weight_extremes)
from degencontrol.control import (hum_cost, hum_gradient, hum_solve, observability_constant)
from degencontrol.experiments import load_config, run_convergence_study
from degencontrol.fields import random_bump_field, sine_mode, smooth_bump
from degencontrol.operators import (assemble_mass, assemble_stiffness, hardy_ratio, l2_poincare_ratio,
                                    log_hardy_profile, poincare_ratio, radial_hardy_oracle)
from degencontrol.parabolic import ProblemSpec, TimeGrid, energy_trace, solve_forward
from degencontrol.spectral import lowest_eigenpairs
from degencontrol.weights import check_weight_identities, psi_bound_constants

pytestmark = pytest.mark.acceptance

CANON = DomainSpec()


def _canonical(n, T=1.0, M=64, weight=None):
    return ProblemSpec.build(CANON, n, weight or WeightSpec.degenerate(1.0), T, M, solver="direct")


def _verdict(number, title, checks: dict, detail: str, elapsed: float, budget: float):
    checks = {**checks, f"runtime < {budget:g} s": elapsed < budget}
    failed = [k for k, ok in checks.items() if not ok]
    record_criterion(number, title, not failed, detail + f" ({elapsed:.1f} s)"
                     + (f"; failed: {', '.join(failed)}" if failed else ""))
    assert not failed, failed


def test_psi_matching_and_bounds():
    t0 = time.perf_counter()
    worst = 0.0
    consts, floor_ok, sandwich = [], True, True
    for eps in (0.5, 0.1, 0.02):
        for sgn in (1.0, -1.0):
            edge = sgn * eps
            inside = psi_eps(np.nextafter(edge, 0.0), eps)
            worst = max(worst, abs(float(inside.value) - eps), abs(float(inside.first) - sgn),
                        abs(float(inside.second)))
        b = psi_bound_constants(eps, 10_000, seed=0)
        consts.append(max(b["max_first"], b["max_second_times_eps"], b["max_third_times_eps2"]))
        floor_ok &= b["min_value_over_eps"] >= 0.25
        sandwich &= b["sandwich_holds"]
    C = max(consts)
    _verdict(1, "psi_eps matching conditions and bounds",
             {"matching <= 1e-12": worst <= 1e-12, "single C <= 4": C <= 4, "psi >= eps/4": floor_ok,
              "|r| <= psi <= 2 eps": sandwich},
             f"matching residual {worst:.1e}, C = {C:.3g}", time.perf_counter() - t0, 1.0)


def test_weight_identities():
    t0 = time.perf_counter()
    worst, signs = 0.0, 0
    for eps in (0.5, 0.1, 0.02):
        rep = check_weight_identities(eps, 10_000, seed=0)
        worst = max(worst, rep.max_residual())
        signs += rep.total_sign_violations()
    _verdict(2, "closed-form identities of psi_eps",
             {"relative residual <= 1e-10": worst <= 1e-10, "sign and bracket bounds": signs == 0},
             f"max relative residual {worst:.1e}, sign violations {signs}", time.perf_counter() - t0, 5.0)


def test_constant_weight_oracle():
    t0 = time.perf_counter()
    target = math.pi ** 2 / 2
    lams = {}
    for n in (17, 33, 65):
        g = build_grid(CANON, n)
        lams[n] = lowest_eigenpairs(assemble_stiffness(g, WeightSpec.constant()), assemble_mass(g),
                                    count=1).values[0]
    errs = [abs(lams[n] - target) for n in (17, 33, 65)]
    orders = [math.log2(errs[i] / errs[i + 1]) for i in range(2)]
    p = ProblemSpec.build(CANON, 65, WeightSpec.constant(), 1.0, 64, solver="direct")
    traj = solve_forward(p, None, sine_mode(p.grid))
    decay = np.linalg.norm(traj[-1]) / np.linalg.norm(traj[0])
    predicted = (1 + p.time.dt * lams[65]) ** (-p.time.M)
    rel_decay = abs(decay / predicted - 1)
    rel65 = abs(lams[65] / target - 1)
    _verdict(3, "constant-weight oracle",
             {"lambda_1 within 1%": rel65 <= 0.01, "order about 2": all(1.8 <= o <= 2.2 for o in orders),
              "decay within 2%": rel_decay <= 0.02},
             f"lambda_1 rel err {rel65:.1e}, orders {orders[0]:.2f}/{orders[1]:.2f}, decay mismatch {rel_decay:.1e}",
             time.perf_counter() - t0, 30.0)


def test_hardy_and_poincare():
    t0 = time.perf_counter()
    g = build_grid(CANON, 65)
    tol = 1 + 5 * g.h
    worst = {"hardy": 0.0, "hardy_eps": 0.0, "poincare": 0.0, "l2_poincare": 0.0}
    for alpha in (0.5, 1.0, 1.5):
        spec = WeightSpec.degenerate(alpha)
        for seed in range(100):
            u = random_bump_field(g, seed)
            worst["hardy"] = max(worst["hardy"], hardy_ratio(u, g, alpha))
            worst["hardy_eps"] = max(worst["hardy_eps"], hardy_ratio(u, g, alpha, eps=0.1))
            worst["poincare"] = max(worst["poincare"], poincare_ratio(u, g, spec))
            worst["l2_poincare"] = max(worst["l2_poincare"], l2_poincare_ratio(u, g, spec))
    # sharpness probe: log-oscillating radial profile resolved down to the grid scale
    fine = build_grid(CANON, 2049)
    f, df = log_hardy_profile(1.5, inner=fine.h, outer=0.95, phase=2.3)
    probe = hardy_ratio(f(fine.radius()), fine, 1.5)
    oracle = radial_hardy_oracle(1.5, f, df, 0.95)
    _verdict(4, "Hardy and Poincare quotients",
             {"all ratios <= 1 + 5h": max(worst.values()) <= tol, "probe > 0.9": probe > 0.9,
              "probe matches radial oracle": abs(probe - oracle) <= 0.01},
             "max " + ", ".join(f"{k} {v:.3f}" for k, v in worst.items())
             + f"; probe {probe:.4f} vs oracle {oracle:.4f}", time.perf_counter() - t0, 30.0)


def test_energy_monotonicity():
    t0 = time.perf_counter()
    p = _canonical(33)
    worst_res, all_decrease = -np.inf, True
    for seed in range(20):
        traj = solve_forward(p, None, random_bump_field(p.grid, seed))
        tr = energy_trace(traj, p)
        all_decrease &= bool(np.all(np.diff(tr["l2_sq"]) < 0))
        worst_res = max(worst_res, float(np.max(np.abs(tr["defect"]) / tr["l2_sq"][0])))
    _verdict(5, "energy monotonicity",
             {"per-step decrease": all_decrease, "identity exact to 1e-12": worst_res <= 1e-12},
             f"max relative identity defect {worst_res:.1e}", time.perf_counter() - t0, 10.0)


def test_convergence_study():
    t0 = time.perf_counter()
    table = run_convergence_study(load_config())
    _verdict(6, "regularization convergence study",
             {"L2(Q) errors decreasing": table.l2_decreasing, "terminal errors decreasing": table.terminal_decreasing,
              "ball diagnostic decreasing": table.diagnostic_decreasing},
             "L2 " + " ".join(f"{v:.2e}" for v in table.l2_error)
             + "; T " + " ".join(f"{v:.2e}" for v in table.terminal_error),
             time.perf_counter() - t0, 180.0)


def test_conjugation_identity():
    t0 = time.perf_counter()
    res = []
    for n, M in ((33, 64), (65, 256)):
        g = build_grid(CANON, n)
        tg = TimeGrid(4.0, M)
        cw = carleman_weights(build_eta(g, CANON, eps=0.25), 1.0, 1.0, tg)
        tau = tg.times / tg.T
        u = (1 + tau + tau ** 2)[:, None, None] * smooth_bump(g, 0.2)[None]
        res.append(decomposition_residual(u, cw, WeightSpec.regularized(1.0, 0.25), M))
    gain = res[0] / res[1]
    _verdict(7, "conjugation identity", {"residual decreases >= 3x": gain >= 3},
             f"{res[0]:.3e} -> {res[1]:.3e} ({gain:.2f}x)", time.perf_counter() - t0, 60.0)


def test_carleman_ratio():
    t0 = time.perf_counter()
    Cs, ext = {}, {}
    for n in (33, 65):
        p = _canonical(n, T=2.0, M=64)
        cw = carleman_weights(build_eta(p.grid, CANON, eps=0.0), 2.0, 2.0, p.time)
        Cs[n] = carleman_ratio(p, cw, samples=20, seed=0).C
        ext[n] = weight_extremes(cw, p.grid, p.time)
    spread = max(Cs.values()) / min(Cs.values()) if min(Cs.values()) > 0 else math.inf
    band = [e["band_min_log10"] for e in ext.values()]
    gmax = [e["global_max_log10"] for e in ext.values()]
    _verdict(8, "Carleman ratio",
             {"C finite": all(np.isfinite(c) and c > 0 for c in Cs.values()), "spread <= 2x": spread <= 2,
              "band_min > 0": all(np.isfinite(b) for b in band), "global_max finite": all(np.isfinite(gmax))},
             f"C {Cs[33]:.3e} / {Cs[65]:.3e} (spread {spread:.3f}), band_min 10^{band[1]:.4g}, "
             f"global_max 10^{gmax[1]:.4g}", time.perf_counter() - t0, 120.0)


# Threshold for the beta = 1e-6 terminal ratio.  Fixed from the first oracle run
# on the canonical configuration (n = 33, M = 64, T = 1, alpha = 1, box control
# of half side 0.2 at (0.6, 0), C^2 bump of radius 0.5 at the origin as phi0,
# CG tolerance 1e-8), which gave 1.30e-3.
HUM_TERMINAL_THRESHOLD = 5e-2


def test_hum():
    t0 = time.perf_counter()
    cfg = load_config()
    p = cfg.problem()
    phi0 = smooth_bump(p.grid, cfg.hum.bump_radius)
    rng = np.random.default_rng(0)
    g = p.grid
    z = g.extend(rng.standard_normal(g.n_interior))
    grad = hum_gradient(z, p, phi0, 1e-6)
    fd_err = 0.0
    for _ in range(5):
        d = g.extend(rng.standard_normal(g.n_interior))
        h = 1e-4
        fd = (hum_cost(z + h * d, p, phi0, 1e-6) - hum_cost(z - h * d, p, phi0, 1e-6)) / (2 * h)
        ana = p.mass_diag * float(np.sum(grad * d))
        fd_err = max(fd_err, abs(fd - ana) / abs(ana))
    rel = [hum_solve(p, phi0, b, cfg.hum.tol).relative_terminal for b in cfg.hum.betas]
    monotone = all(b <= a for a, b in zip(rel, rel[1:]))
    _verdict(9, "penalized HUM",
             {"gradient matches FD to 1e-6": fd_err <= 1e-6, "sweep non-increasing": monotone,
              f"beta=1e-6 ratio <= {HUM_TERMINAL_THRESHOLD:g}": rel[-1] <= HUM_TERMINAL_THRESHOLD},
             f"FD rel err {fd_err:.1e}; ratios " + " ".join(f"{r:.2e}" for r in rel),
             time.perf_counter() - t0, 180.0)


def test_observability():
    t0 = time.perf_counter()
    est = {n: observability_constant(_canonical(n)) for n in (33, 65)}
    change = abs(est[65].constant - est[33].constant) / est[33].constant
    # duality: with matching penalties delta = beta, the HUM cost of the datum
    # u(0) for the extremal u_T equals the observability constant
    p = _canonical(33)
    beta = 1e-8
    pen = observability_constant(p, delta=beta, max_iters=2000)
    phi0 = solve_forward(p, None, pen.extremal)[-1]
    res = hum_solve(p, phi0, beta, tol=1e-10)
    cost = (res.control_norm_sq + beta * p.mass_diag * float(np.sum(res.zT ** 2))) / res.initial_norm ** 2
    factor = max(cost / pen.constant, pen.constant / cost)
    # the canonical estimate (delta = 1e-10) bounds the control cost from above
    ctrl = res.control_norm_sq / res.initial_norm ** 2
    tight = est[33].constant / ctrl
    _verdict(10, "observability constant",
             {"stable within 10% (33 -> 65)": change <= 0.10, "duality within factor 2": factor <= 2,
              "C bounds |f|^2/|phi0|^2": ctrl <= est[33].constant},
             f"C {est[33].constant:.4g} -> {est[65].constant:.4g} ({100 * change:.1f}%); "
             f"HUM cost {cost:.4g} vs C_beta {pen.constant:.4g}; |f|^2/|phi0|^2 {ctrl:.4g} (C/{tight:.2f})", time.perf_counter() - t0, 180.0)
