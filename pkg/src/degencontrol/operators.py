"""Discrete weighted stiffness and mass, weighted norms, Hardy and Poincare
quotients.

Conventions.  Unknowns are the interior vertex values in the order of
``Grid.restrict``.  The stiffness matrix ``K`` represents the quadratic form

    u^T K u = sum over grid edges e of w(midpoint of e) * (u_i - u_j)^2,

which approximates the weighted Dirichlet energy  int w |grad u|^2  (each edge
carries an h x h dual cell and a difference quotient squared).  The lumped
mass is ``M = h^2 I``, so the familiar five-point stencil
(4, -1, -1, -1, -1)/h^2 is ``M^{-1} K`` in the constant-weight mode.
Edge midpoints sit at distance >= h/2 from the origin, so the degenerate
weight is never evaluated at its zero.
"""
from __future__ import annotations

import math
from typing import NamedTuple

import numpy as np
import scipy.sparse as sp
from scipy.integrate import quad

from .errors import ValidationError
from .geometry import Grid
from .weights import WeightSpec


def edge_weights(grid: Grid, spec: WeightSpec):
    """Weights at midpoints of x-edges (shape (n-1, n)) and y-edges ((n, n-1))."""
    xs, h = grid.xs, grid.h
    mid = xs[:-1] + 0.5 * h
    wx = spec.radial(np.hypot(mid[:, None], xs[None, :]))
    wy = spec.radial(np.hypot(xs[:, None], mid[None, :]))
    return wx, wy


def assemble_stiffness(grid: Grid, spec: WeightSpec) -> sp.csr_matrix:
    """Weighted stiffness on interior vertices (Dirichlet boundary eliminated)."""
    n = grid.n
    k = n - 2
    wx, wy = edge_weights(grid, spec)
    idx = -np.ones((n, n), dtype=np.int64)
    idx[1:-1, 1:-1] = np.arange(k * k).reshape(k, k)
    diag = np.zeros((n, n))
    # every edge adds its weight to the diagonal of both end points
    diag[:-1, :] += wx
    diag[1:, :] += wx
    diag[:, :-1] += wy
    diag[:, 1:] += wy
    rows, cols, vals = [], [], []
    for a, b, w in ((idx[:-1, :], idx[1:, :], wx), (idx[:, :-1], idx[:, 1:], wy)):
        both = (a >= 0) & (b >= 0)
        rows += [a[both], b[both]]
        cols += [b[both], a[both]]
        vals += [-w[both], -w[both]]
    inner = idx >= 0
    rows.append(idx[inner])
    cols.append(idx[inner])
    vals.append(diag[inner])
    K = sp.coo_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                      shape=(k * k, k * k)).tocsr()
    K.sum_duplicates()
    return K


def assemble_mass(grid: Grid) -> sp.dia_matrix:
    """Lumped mass h^2 I on interior vertices."""
    return sp.diags(np.full(grid.n_interior, grid.h ** 2), format="dia")


def edge_energy(grid: Grid, spec: WeightSpec, u):
    """Quadratic form u^T K u evaluated edge-wise on full fields.

    Accepts a field or a stack of fields (..., n, n); boundary values are
    taken as given (they are zero for Dirichlet fields).
    """
    u = np.asarray(u, dtype=float)
    wx, wy = edge_weights(grid, spec)
    dx = np.diff(u, axis=-2)
    dy = np.diff(u, axis=-1)
    return np.sum(wx * dx * dx, axis=(-2, -1)) + np.sum(wy * dy * dy, axis=(-2, -1))


# ------------------------------------------------------------ vertex quadrature

def cell_average_power(h: float, beta: float) -> float:
    """Mean of |x|^beta over the centred square cell [-h/2, h/2]^2, beta > -2.

    In polar coordinates the cell splits into eight congruent triangles
    0 <= theta <= pi/4, 0 <= r <= a sec(theta) with a = h/2, so

        mean = 2 a^beta / (beta + 2) * int_0^{pi/4} sec(theta)^(beta + 2) dtheta.

    For beta = 1 the angular integral is (sqrt 2 + log(1 + sqrt 2))/2 and the
    mean is a (sqrt 2 + log(1 + sqrt 2))/3.
    """
    if beta <= -2:
        raise ValidationError(f"|x|^{beta} is not integrable at the origin")
    a = 0.5 * h
    ang, _ = quad(lambda t: math.cos(t) ** (-(beta + 2.0)), 0.0, math.pi / 4, epsabs=0, epsrel=1e-13)
    return 2.0 * a ** beta / (beta + 2.0) * ang


def vertex_power(grid: Grid, spec: WeightSpec, beta: float):
    """psi^beta at vertices; the degenerate kind uses the cell mean at 0."""
    r = grid.radius()
    if spec.kind == "constant":
        return np.ones(grid.shape)
    if spec.kind == "regularized":
        return spec.radial_power(r, beta)
    out = np.empty(grid.shape)
    nz = r > 0
    out[nz] = r[nz] ** beta
    out[~nz] = cell_average_power(grid.h, beta)
    return out


def vertex_weights(grid: Grid, spec: WeightSpec):
    """Weight values used by the weighted L2 vertex quadrature."""
    return vertex_power(grid, spec, spec.alpha)


class WeightedNorms(NamedTuple):
    l2: float
    weighted_l2: float
    weighted_h1_semi: float


def weighted_norms(u, spec: WeightSpec, grid: Grid) -> WeightedNorms:
    """Discrete L2, weighted L2 and weighted H1 seminorm of a field."""
    u = np.asarray(u, dtype=float)
    h2 = grid.h ** 2
    l2 = math.sqrt(h2 * float(np.sum(u * u)))
    wl2 = math.sqrt(h2 * float(np.sum(vertex_weights(grid, spec) * u * u)))
    semi = math.sqrt(max(float(edge_energy(grid, spec, u)), 0.0))
    return WeightedNorms(l2, wl2, semi)


def _check_field(u, grid):
    u = np.asarray(u, dtype=float)
    if u.shape[-2:] != grid.shape:
        raise ValidationError(f"field shape {u.shape} does not match the grid {grid.shape}")
    if not np.any(u[..., 1:-1, 1:-1]):
        raise ValidationError("quotient undefined for the zero field")
    return u


def hardy_ratio(u, grid: Grid, alpha: float, eps: float | None = None) -> float:
    """alpha ||psi^{alpha/2 - 1} u|| / (2 ||grad u||_w), psi = |x| or psi_eps.

    ``eps=None`` selects the degenerate weight (the singular weight at the
    origin vertex is replaced by its exact cell mean); otherwise the
    regularized weight with that radius.  ``alpha = 0`` is the constant-weight
    mode, for which the two-dimensional Hardy constant vanishes.
    """
    u = _check_field(u, grid)
    if alpha == 0:
        return 0.0
    spec = WeightSpec.degenerate(alpha) if eps is None else WeightSpec.regularized(alpha, eps)
    sing = vertex_power(grid, spec, alpha - 2.0)
    lhs = alpha * math.sqrt(grid.h ** 2 * float(np.sum(sing * u * u)))
    rhs = 2.0 * math.sqrt(float(edge_energy(grid, spec, u)))
    return lhs / rhs


def poincare_ratio(u, grid: Grid, spec: WeightSpec) -> float:
    """||u||_w / ((2m/alpha) ||grad u||_w) for the weighted Poincare bound."""
    u = _check_field(u, grid)
    nrm = weighted_norms(u, spec, grid)
    const = 2.0 * grid.spec.m / spec.alpha
    return nrm.weighted_l2 / (const * nrm.weighted_h1_semi)


def l2_poincare_ratio(u, grid: Grid, spec: WeightSpec) -> float:
    """||u|| / ((2 m^{1 - alpha/2}/alpha) ||grad u||_w)."""
    u = _check_field(u, grid)
    nrm = weighted_norms(u, spec, grid)
    const = 2.0 * grid.spec.m ** (1.0 - 0.5 * spec.alpha) / spec.alpha
    return nrm.l2 / (const * nrm.weighted_h1_semi)


def radial_hardy_oracle(alpha: float, profile, dprofile, r_max: float) -> float:
    """Continuum Hardy quotient of a radial profile u(r) supported in [0, r_max].

    Both sides reduce to one-dimensional integrals in r with the area
    element 2 pi r dr.
    """
    pts = np.geomspace(1e-12, r_max, 40)[1:-1].tolist()
    num, _ = quad(lambda r: r ** (alpha - 1.0) * profile(r) ** 2, 0.0, r_max,
                  points=pts, limit=400, epsabs=0, epsrel=1e-11)
    den, _ = quad(lambda r: r ** (alpha + 1.0) * dprofile(r) ** 2, 0.0, r_max,
                  points=pts, limit=400, epsabs=0, epsrel=1e-11)
    return alpha * math.sqrt(num) / (2.0 * math.sqrt(den))


def log_hardy_profile(alpha: float, inner: float, outer: float, phase: float = 2.3):
    """Radial near-extremal profile for the Hardy quotient and its derivative.

    u(r) = r^{-alpha/2} sin(kappa log(outer/r)) on [inner, outer], constant
    below ``inner`` and zero beyond ``outer``, with kappa log(outer/inner) =
    ``phase``.  The quotient tends to 1 only as log(outer/inner) grows, so the
    inner scale must be resolved by a fine grid.
    """
    kappa = phase / math.log(outer / inner)

    def f(r):
        r = np.asarray(r, dtype=float)
        rr = np.clip(r, inner, outer)
        return np.where(r < outer, rr ** (-0.5 * alpha) * np.sin(kappa * np.log(outer / rr)), 0.0)

    def df(r):
        if r <= inner or r >= outer:
            return 0.0
        th = kappa * math.log(outer / r)
        return -r ** (-0.5 * alpha - 1.0) * (0.5 * alpha * math.sin(th) + kappa * math.cos(th))

    return f, df
