import numpy as np
import pytest

from degencontrol import WeightSpec, build_grid
from degencontrol.operators import assemble_mass, assemble_stiffness
from degencontrol.spectral import lowest_eigenpairs, rayleigh_quotients


@pytest.fixture(scope="module")
def degenerate33(domain):
    g = build_grid(domain, 33)
    K, M = assemble_stiffness(g, WeightSpec.degenerate(1.0)), assemble_mass(g)
    return g, K, M, lowest_eigenpairs(K, M, count=3)


def test_orthonormal_and_residuals(degenerate33):
    g, K, M, res = degenerate33
    V = res.vectors
    G = V.T @ (M @ V)
    assert np.max(np.abs(G - np.eye(V.shape[1]))) <= 1e-10
    assert np.max(res.residuals) <= 1e-8
    assert np.all(np.diff(res.values) >= 0)


def test_rayleigh_consistency(degenerate33):
    g, K, M, res = degenerate33
    q = rayleigh_quotients(K, M, res.vectors)
    assert np.allclose(q, res.values, rtol=1e-10)


def test_ground_state_has_one_sign(degenerate33):
    g, K, M, res = degenerate33
    v = res.vectors[:, 0]
    v = v * np.sign(v[np.argmax(np.abs(v))])
    assert np.all(v > -1e-12 * np.abs(v).max())


def test_constant_weight_matches_closed_form(domain):
    g = build_grid(domain, 33)
    K, M = assemble_stiffness(g, WeightSpec.constant()), assemble_mass(g)
    lam = lowest_eigenpairs(K, M, count=1).values[0]
    exact = 2 * (4 / g.h ** 2) * np.sin(np.pi * g.h / 4) ** 2
    assert lam == pytest.approx(exact, rel=1e-9)


def test_degenerate_ground_state_stable(domain, degenerate33):
    lam33 = degenerate33[3].values
    g = build_grid(domain, 65)
    res = lowest_eigenpairs(assemble_stiffness(g, WeightSpec.degenerate(1.0)), assemble_mass(g), count=2)
    assert abs(res.values[0] - lam33[0]) / res.values[0] <= 0.03
    assert res.values[1] - res.values[0] > 0.1 * res.values[0]
