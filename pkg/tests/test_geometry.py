import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from degencontrol import Annulus, Ball, DomainSpec, ValidationError, Whole, build_grid, region_mask


def test_grid_basics(domain):
    g = build_grid(domain, 9)
    assert g.h == 0.25
    assert g.origin_index == (4, 4)
    assert g.X[4, 4] == 0.0 and g.Y[4, 4] == 0.0
    g33 = build_grid(domain, 33)
    assert g33.shape == (33, 33) and g33.n_interior == 31 ** 2


@pytest.mark.parametrize("n", [8, 7, 32, 9.5])
def test_grid_rejects_bad_sizes(domain, n):
    with pytest.raises(ValidationError):
        build_grid(domain, n)


def test_even_count_message(domain):
    with pytest.raises(ValidationError, match="even vertex count"):
        build_grid(domain, 8)


def test_grid_is_deterministic(domain):
    a, b = build_grid(domain, 65), build_grid(domain, 65)
    assert np.array_equal(a.X, b.X) and np.array_equal(a.Y, b.Y)


def test_restrict_extend_roundtrip(grid33):
    rng = np.random.default_rng(1)
    v = rng.standard_normal(grid33.n_interior)
    u = grid33.extend(v)
    assert np.all(u[0] == 0) and np.all(u[:, -1] == 0)
    assert np.array_equal(grid33.restrict(u), v)


def test_domain_invariants():
    d = DomainSpec()
    assert d.m == pytest.approx(np.sqrt(2) + 1)
    assert d.control_distance_to_origin() > 0
    for bad in (dict(alpha=2.0), dict(alpha=0.0), dict(control_center=(0.1, 0.0)),
                dict(control_center=(0.9, 0.0)), dict(origin_ball_radius=0.2)):
        with pytest.raises(ValidationError):
            DomainSpec(**bad)


def test_ball_mask_count(grid33):
    # 45 vertices strictly inside, 4 more exactly on the circle |x| = 0.25
    assert region_mask(grid33, Ball((0.0, 0.0), 0.25)).sum() == 49
    r = grid33.radius()
    assert np.count_nonzero(r < 0.25) == 45


def test_named_regions(grid33):
    assert region_mask(grid33, Whole()).all()
    assert region_mask(grid33, "whole").all()
    om = region_mask(grid33, "control")
    assert om.any() and not om[grid33.origin_index]
    assert not np.any(om & region_mask(grid33, "origin_ball"))
    ann = region_mask(grid33, Annulus((0.0, 0.0), 0.2, 0.4))
    r = grid33.radius()
    assert np.all(r[ann] >= 0.2 - 1e-12) and np.all(r[ann] <= 0.4 + 1e-12)


def test_region_outside_domain(grid33):
    with pytest.raises(ValidationError):
        region_mask(grid33, Ball((0.9, 0.0), 0.3))
    with pytest.raises(ValidationError):
        region_mask(grid33, "nowhere")


@settings(max_examples=25, deadline=None)
@given(x0=st.floats(0.65, 0.7), rho=st.floats(0.2, 0.25), n=st.sampled_from([17, 33, 65]))
def test_control_and_origin_ball_disjoint(x0, rho, n):
    d = DomainSpec(control_center=(x0, 0.0), control_radius=rho)
    g = build_grid(d, n)
    om = region_mask(g, "control")
    assert not om[g.origin_index]
    assert not np.any(om & region_mask(g, "origin_ball"))
