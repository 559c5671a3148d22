import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from degencontrol import DomainSpec, ValidationError, WeightSpec, build_grid
from degencontrol.fields import random_bump_field, sine_mode
from degencontrol.operators import (assemble_mass, assemble_stiffness, cell_average_power, edge_energy, hardy_ratio,
                                    l2_poincare_ratio, poincare_ratio, weighted_norms)


def test_constant_stencil(grid17):
    K = assemble_stiffness(grid17, WeightSpec.constant()).toarray()
    i = grid17.n_interior // 2
    row = K[i]
    assert row[i] == 4.0
    assert sorted(row[row != 0])[:-1] == [-1.0] * 4


@pytest.mark.parametrize("spec", [WeightSpec.constant(), WeightSpec.degenerate(1.0), WeightSpec.regularized(1.5, 0.1)])
def test_stiffness_symmetric_positive(grid17, spec):
    K = assemble_stiffness(grid17, spec)
    assert abs(K - K.T).max() <= 1e-14
    assert np.linalg.eigvalsh(K.toarray()).min() > 0


def test_mass_is_h2(grid17):
    M = assemble_mass(grid17)
    assert np.allclose(M.diagonal(), grid17.h ** 2)


def test_quadratic_form_matches_edge_energy(grid17):
    spec = WeightSpec.degenerate(1.0)
    u = random_bump_field(grid17, seed=4)
    v = grid17.restrict(u)
    assert v @ (assemble_stiffness(grid17, spec) @ v) == pytest.approx(edge_energy(grid17, spec, u), rel=1e-12)


def test_sine_quotient_tends_to_pi2_over_2(domain):
    errs = []
    for n in (17, 33, 65):
        g = build_grid(domain, n)
        u = sine_mode(g)
        nrm = weighted_norms(u, WeightSpec.constant(), g)
        errs.append(abs(nrm.weighted_h1_semi ** 2 / nrm.l2 ** 2 - math.pi ** 2 / 2))
    assert errs[0] > errs[1] > errs[2]
    assert errs[2] / (math.pi ** 2 / 2) < 2e-3


def test_origin_cell_average_closed_form():
    h = 0.0625
    a = h / 2
    assert cell_average_power(h, 1.0) == pytest.approx(a * (math.sqrt(2) + math.log(1 + math.sqrt(2))) / 3, rel=1e-12)
    assert cell_average_power(h, 0.0) == pytest.approx(1.0)
    with pytest.raises(ValidationError):
        cell_average_power(h, -2.0)


def test_zero_field_quotients_raise(grid17):
    with pytest.raises(ValidationError):
        hardy_ratio(np.zeros(grid17.shape), grid17, 1.0)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 10_000), alpha=st.sampled_from([0.5, 1.0, 1.5]))
def test_hardy_and_poincare_bounds(seed, alpha):
    g = build_grid(DomainSpec(), 33)
    u = random_bump_field(g, seed)
    tol = 1 + 5 * g.h
    assert hardy_ratio(u, g, alpha) <= tol
    assert hardy_ratio(u, g, alpha, eps=0.1) <= tol
    spec = WeightSpec.degenerate(alpha)
    assert poincare_ratio(u, g, spec) <= tol
    assert l2_poincare_ratio(u, g, spec) <= tol


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 10_000), a=st.floats(0.3, 1.6), da=st.floats(0.05, 0.3))
def test_energy_monotone_in_alpha(seed, a, da):
    # |x|^a decreases in a where |x| < 1, so the energy does too for fields supported there
    g = build_grid(DomainSpec(), 17)
    u = random_bump_field(g, seed) * (g.radius() < 1 - g.h)
    if not np.any(u):
        return
    assert edge_energy(g, WeightSpec.degenerate(a + da), u) <= edge_energy(g, WeightSpec.degenerate(a), u) + 1e-14


def test_field_shape_check(grid17):
    with pytest.raises(ValidationError):
        hardy_ratio(np.ones((5, 5)), grid17, 1.0)
