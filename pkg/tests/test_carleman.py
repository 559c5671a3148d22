import numpy as np
import pytest

from degencontrol import ValidationError, WeightSpec, build_grid
from degencontrol.carleman import (PARAMETER_BOX, build_eta, carleman_ratio, carleman_weights, decomposition_residual,
                                   derivative_bound_constants, origin_ball_term, peak_center,
                                   weight_extremes)
from degencontrol.errors import ConstructionError
from degencontrol.fields import smooth_bump
from degencontrol.parabolic import ProblemSpec, TimeGrid


@pytest.fixture(scope="module")
def eta33(domain):
    return build_eta(build_grid(domain, 33), domain)


@pytest.fixture(scope="module")
def weights33(eta33):
    return carleman_weights(eta33, 2.0, 2.0, TimeGrid(2.0, 64))


def test_theta_is_one_at_midtime(weights33):
    assert weights33.theta(1.0) == pytest.approx(1.0, abs=1e-15)
    assert np.isinf(weights33.log_theta(0.0)) and np.isinf(weights33.log_theta(2.0))


def test_eta_report(eta33, domain):
    rep = eta33.report
    assert rep["c_eta"] > 1e-3 and rep["critical_cell_count"] == 0
    assert rep["min_interior"] > 0 and rep["boundary_max_abs"] == 0.0
    px, py = peak_center(domain)
    assert (px, py) == (0.625, 0.0)
    g = eta33.grid
    i = np.unravel_index(np.argmax(eta33.values), g.shape)
    assert (g.X[i], g.Y[i]) == (0.625, 0.0)


def test_eta_near_origin(eta33, domain):
    g = eta33.grid
    r = g.radius()
    near = r <= 2 * domain.origin_ball_radius
    assert np.allclose(eta33.values[near], r[near] ** (2 - domain.alpha), atol=1e-14)


def test_regularized_eta(domain):
    g = build_grid(domain, 33)
    e = build_eta(g, domain, eps=0.05)
    assert e.report["min_interior"] > 0


def test_poisson_construction_fails(domain):
    with pytest.raises(ConstructionError) as info:
        build_eta(build_grid(domain, 65), domain, method="poisson")
    assert info.value.report["c_eta"] <= 1e-3 or info.value.report["critical_cell_count"] > 0


def test_sigma_positive_and_gradient(weights33, eta33):
    cw = weights33
    e = eta33.values[eta33.grid.interior_mask()]
    t = np.linspace(0.05, 1.95, 9)
    assert np.all(cw.sigma(e, t) > 0)
    # d sigma / d eta = -lam xi, checked by central differences
    h = 1e-5
    ev = np.linspace(0.0, cw.sup, 7)
    fd = (cw.sigma(ev + h, 1.0) - cw.sigma(ev - h, 1.0)) / (2 * h)
    ana = cw.grad_sigma(ev, np.ones_like(ev), 1.0)
    assert np.allclose(fd, ana, rtol=1e-5)
    fdt = (cw.sigma(ev, 1.2 + h) - cw.sigma(ev, 1.2 - h)) / (2 * h)
    assert np.allclose(fdt, cw.sigma_t(ev, 1.2), rtol=1e-5)


def test_endpoints_and_extremes(weights33, eta33):
    ex = weight_extremes(weights33, eta33.grid, TimeGrid(2.0, 64))
    assert ex["endpoint_value"] == 0.0
    assert np.isfinite(ex["band_min_log10"]) and np.isfinite(ex["global_max"])
    assert ex["global_max_at"] == [0.625, 0.0, 1.0]


def test_derivative_constants_finite(weights33):
    c = derivative_bound_constants(weights33, np.linspace(0.1, 1.9, 19))
    assert np.isfinite(c["sigma_tt"]) and np.isfinite(c["xi_xi_t"])


@pytest.mark.parametrize("kw", [dict(s=9.0, lam=2.0, T=2.0), dict(s=2.0, lam=0.5, T=2.0), dict(s=2.0, lam=2.0, T=5.0)])
def test_parameter_box(eta33, kw):
    with pytest.raises(ValidationError, match="weight overflow regime"):
        carleman_weights(eta33, kw["s"], kw["lam"], TimeGrid(kw["T"], 64))
    assert set(PARAMETER_BOX) == {"s", "lam", "T"}


def test_zero_trajectory(domain, eta33):
    tg = TimeGrid(4.0, 32)
    cw = carleman_weights(eta33, 1.0, 1.0, tg)
    u = np.zeros((33,) + eta33.grid.shape)
    assert decomposition_residual(u, cw, WeightSpec.degenerate(1.0), 32) == 0.0


def test_decomposition_refines(domain):
    out = []
    for n, M in ((17, 16), (33, 64)):
        g = build_grid(domain, n)
        tg = TimeGrid(4.0, M)
        cw = carleman_weights(build_eta(g, domain, eps=0.25), 1.0, 1.0, tg)
        tau = tg.times / tg.T
        u = (1 + tau + tau ** 2)[:, None, None] * smooth_bump(g, 0.2)[None]
        out.append(decomposition_residual(u, cw, WeightSpec.regularized(1.0, 0.25), M))
    assert out[1] < out[0]


def test_origin_ball_term_decreases(domain):
    g = build_grid(domain, 65)
    tg = TimeGrid(2.0, 32)
    cw = carleman_weights(build_eta(g, domain, eps=1 / 32), 1.0, 1.0, tg)
    tau = tg.times / tg.T
    u = (1 + tau)[:, None, None] * smooth_bump(g, 0.3)[None]
    vals = [origin_ball_term(u, cw, k, 1.0) for k in (8, 16, 32)]
    assert vals[0] > vals[1] > vals[2]


def test_ratio_on_small_problem(domain):
    p = ProblemSpec.build(domain, 17, WeightSpec.degenerate(1.0), 2.0, 16, solver="direct")
    cw = carleman_weights(build_eta(p.grid, domain), 2.0, 2.0, p.time)
    stats = carleman_ratio(p, cw, samples=3, seed=0)
    assert len(stats.ratios) == 3 and np.all(np.isfinite(stats.ratios))
    assert stats.C == stats.ratios.max()
    assert stats.to_csv().count("\n") >= 4
    with pytest.raises(ValidationError):
        carleman_ratio(p, cw, samples=0)
