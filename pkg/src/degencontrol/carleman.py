"""Carleman weights for the degenerate backward equation.

Auxiliary function.  ``eta`` equals psi_eps^{2-alpha} (or |x|^{2-alpha} in
the limit eps = 0) on B_{2R}, is positive inside, vanishes on the boundary
and has no critical point outside B_R and the core ball B_{2R}(x0).  Outside
the origin ball it is an explicit function of a square-adapted radius

    rho(x) = sqrt(1 - (1 - (x/L)^2)(1 - (y/L)^2))      (rho = |x|/L near 0),

    E = L^{2-alpha} f(rho) + kappa g(rho) theta(x) / (2 pi),

with f = rho^{2-alpha} near 0, rising to a maximum at rho_m = rho(x0) and
falling to 0 at rho = 1, g a bump around rho_m and theta in (0, 2 pi) the
polar angle measured from the direction of x0.  The angular term turns
every would-be critical point on the ridge rho = rho_m into a slope; its cut
lies inside B_R(x0) where E is replaced by a smooth peak with a strict
maximum at x0.  Two C^3 blends glue the pieces: closed form on B_{2R} to E
on B_{3R}, peak on B_R(x0) to E on B_{2R}(x0).  A topological count on
a disc (maxima - saddles + minima = 1) rules out the simpler Poisson-source
blend, which is kept as ``method="poisson"`` to demonstrate the failure.

Weights.  Theta(t) = 1/(t(T-t))^4, xi = Theta e^{lam(8|eta|_inf + eta)},
sigma = Theta e^{10 lam |eta|_inf} - xi.  Products xi^p e^{-2 s sigma} span
hundreds of thousands of orders of magnitude, so every integral is formed
in log space.
"""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import quad
from scipy.special import logsumexp

from .errors import ConstructionError, NumericalError, ValidationError
from .fields import random_sine_field
from .geometry import DomainSpec, Grid, region_mask
from .linalg import pcg
from .operators import assemble_stiffness
from .weights import WeightSpec, psi_derivatives

PARAMETER_BOX = {"s": (1.0, 8.0), "lam": (1.0, 3.0), "T": (1.0, 4.0)}
GRADIENT_FLOOR = 1e-3
_LOG_MAX = 700.0


# ------------------------------------------------------------ smooth pieces

def _smoothstep(t):
    """C^3 ramp 0 -> 1 on [0, 1] (septic), with derivative."""
    t = np.clip(t, 0.0, 1.0)
    return t ** 4 * (35 - 84 * t + 70 * t * t - 20 * t ** 3), 140 * t ** 3 * (1 - t) ** 3


def _radial_cutoff(r, inner, outer):
    """1 on [0, inner], 0 beyond outer, C^2 in between; value and d/dr."""
    v, dv = _smoothstep((outer - r) / (outer - inner))
    return v, -dv / (outer - inner)


def _bump(z):
    """(1 - z^2)^3 on |z| < 1 and its derivative."""
    inside = np.abs(z) < 1
    b = np.where(inside, (1 - z * z) ** 3, 0.0)
    db = np.where(inside, -6 * z * (1 - z * z) ** 2, 0.0)
    return b, db


def _power_poly_antiderivative(coeffs, alpha, rho):
    """Antiderivative of (2 - alpha) rho^{1-alpha} sum_j c_j rho^j."""
    out = 0.0
    for j, c in enumerate(coeffs):
        e = j + 2.0 - alpha
        out = out + c * rho ** e / e
    return (2.0 - alpha) * out


class _Profile:
    """Radial profile f on [0, 1] and its derivative."""

    def __init__(self, alpha, rho1, rhom, slope=2.0):
        if not 0 < rho1 < rhom < 1:
            raise ConstructionError(f"profile needs 0 < rho1 < rho_m < 1, got {rho1}, {rhom}")
        P = np.polynomial.Polynomial
        d = rhom - rho1
        self.alpha, self.rho1, self.rhom = alpha, rho1, rhom
        self.asc = 1 - P([-rho1 / d, 1 / d]) ** 2
        lin = -slope * P([-rhom / d, 1 / d])
        quadr = -(P([-rhom, 1.0]) ** 2)
        self.f1 = rho1 ** (2 - alpha)
        A = lambda poly, a, b: (_power_poly_antiderivative(poly.coef, alpha, b)
                                - _power_poly_antiderivative(poly.coef, alpha, a))
        self.fm = self.f1 + A(self.asc, rho1, rhom)
        # f(1) = 0 fixes the quadratic coefficient of the descent
        B = -(self.fm + A(lin, rhom, 1.0)) / A(quadr, rhom, 1.0)
        self.desc = lin + B * quadr
        tau = np.linspace(rhom, 1.0, 2001)[1:]
        if np.any(self.desc(tau) >= 0):
            raise ConstructionError("radial profile is not strictly decreasing beyond its maximum")

    def __call__(self, rho):
        a = self.alpha
        rho = np.asarray(rho, dtype=float)
        Fa = lambda poly, x: _power_poly_antiderivative(poly.coef, a, x)
        f = np.where(rho <= self.rho1, rho ** (2 - a),
                     np.where(rho <= self.rhom, self.f1 + Fa(self.asc, rho) - Fa(self.asc, self.rho1),
                              self.fm + Fa(self.desc, rho) - Fa(self.desc, self.rhom)))
        with np.errstate(divide="ignore", invalid="ignore"):
            base = (2 - a) * rho ** (1 - a)
        m = np.where(rho <= self.rho1, 1.0, np.where(rho <= self.rhom, self.asc(rho), self.desc(rho)))
        return f, base * m


# ------------------------------------------------------------ eta

@dataclass
class EtaFunction:
    """Auxiliary function sampled on a grid, with its analytic evaluator."""

    grid: Grid
    eps: float
    values: np.ndarray
    grad: np.ndarray            # (2, n, n)
    analytic: np.ndarray        # True on B_{2R}
    sup: float
    report: dict
    evaluate: object = field(repr=False)   # (x, y) -> (eta, gx, gy)

    def grad_norm(self):
        return np.hypot(self.grad[0], self.grad[1])


def peak_center(spec: DomainSpec, level: int = 3):
    """Point of the lattice L 2^-level Z^2 nearest the control center.

    The maximum of eta is placed there.  It is a vertex of every grid with
    n - 1 a multiple of 2^(level+1), so on such grids the vertex carrying the
    largest Carleman weight is the same point of the domain.  Falls back to
    the control center when the lattice point is farther than R/2 from it.
    """
    c = np.asarray(spec.control_center, dtype=float)
    step = spec.half_width / 2 ** level
    snap = np.round(c / step) * step
    if np.hypot(*(snap - c)) > 0.5 * spec.origin_ball_radius or not np.any(snap):
        return c
    return snap


class _SpiralEta:
    def __init__(self, spec: DomainSpec, eps: float, peak: float = 1.0, blend: float = 2.0,
                 ring: float = 0.8, kappa: float = 0.1, dome: float = 0.05):
        self.spec, self.eps = spec, eps
        a, L, R = spec.alpha, spec.half_width, spec.origin_ball_radius
        self.a, self.L, self.R = a, L, R
        center = np.asarray(spec.control_center, dtype=float)
        self.x0 = peak_center(spec)
        shift = float(np.hypot(*(self.x0 - center)))
        self.dir = self.x0 / np.hypot(*self.x0)
        self.rhom = float(self._rho(*self.x0)[0])
        self.rho1 = 3 * R / L
        self.f = _Profile(a, self.rho1, self.rhom)
        # the blend must stay inside the control core B_{2R}(x0)
        self.peak, self.blend = peak * R, min(blend * R, 2 * R - shift)
        if not self.blend > self.peak:
            raise ConstructionError("peak ball does not fit inside the control core")
        # ring half-width: the cut along the ray through the peak must stay in the peak ball
        out = self._rho(*(self.x0 + self.peak * self.dir))[0]
        inn = self._rho(*(self.x0 - self.peak * self.dir))[0]
        self.width = ring * min(out - self.rhom, self.rhom - inn, self.rhom - self.rho1)
        scale = L ** (2 - a) * self.f.fm
        self.kappa = kappa * scale
        self.dome = dome * scale

    def _rho(self, x, y):
        L = self.L
        b = (1 - (x / L) ** 2) * (1 - (y / L) ** 2)
        rho = np.sqrt(np.clip(1 - b, 0.0, None))
        with np.errstate(divide="ignore", invalid="ignore"):
            gx = (2 * x / L ** 2) * (1 - (y / L) ** 2) / (2 * rho)
            gy = (2 * y / L ** 2) * (1 - (x / L) ** 2) / (2 * rho)
        return rho, np.nan_to_num(gx), np.nan_to_num(gy)

    def _closed(self, x, y):
        pts = np.stack([x, y], axis=-1)
        psi, g, _, _ = psi_derivatives(pts, self.eps if self.eps > 0 else None)
        e = 2 - self.a
        with np.errstate(divide="ignore", invalid="ignore"):
            c1 = e * psi ** (e - 1)
        c1 = np.where(psi > 0, c1, 0.0)
        g = np.nan_to_num(g)
        return psi ** e, c1 * g[..., 0], c1 * g[..., 1]

    def _outer(self, x, y):
        L, a = self.L, self.a
        rho, rx, ry = self._rho(x, y)
        f, df = self.f(rho)
        g, dg = _bump((rho - self.rhom) / self.width)
        dg = dg / self.width
        # polar angle from the x0 direction, in (0, 2 pi)
        c, s = self.dir
        u, v = c * x + s * y, -s * x + c * y
        th = np.mod(np.arctan2(v, u), 2 * np.pi)
        r2 = x * x + y * y
        with np.errstate(divide="ignore", invalid="ignore"):
            tx = np.where(r2 > 0, -y / r2, 0.0)
            ty = np.where(r2 > 0, x / r2, 0.0)
        k = self.kappa / (2 * np.pi)
        A = L ** (2 - a) * df + k * dg * th
        E = L ** (2 - a) * f + k * g * th
        return E, A * rx + k * g * tx, A * ry + k * g * ty, (rho, f, df, g, dg, rx, ry)

    def __call__(self, x, y):
        with np.errstate(divide="ignore", invalid="ignore"):
            return self._eval(np.asarray(x, dtype=float), np.asarray(y, dtype=float))

    def _eval(self, x, y):
        R, L, a = self.R, self.L, self.a
        E, Ex, Ey, (rho, f, df, g, dg, rx, ry) = self._outer(x, y)
        # peak replacing E near x0
        d2 = (x - self.x0[0]) ** 2 + (y - self.x0[1]) ** 2
        D, dD = _bump(np.sqrt(d2) / self.peak)
        dD = dD / self.peak
        dist = np.sqrt(d2)
        with np.errstate(divide="ignore", invalid="ignore"):
            ux = np.where(dist > 0, (x - self.x0[0]) / dist, 0.0)
            uy = np.where(dist > 0, (y - self.x0[1]) / dist, 0.0)
        Pk = L ** (2 - a) * df + self.kappa * dg
        P = L ** (2 - a) * f + self.kappa * g + self.dome * D
        Px = Pk * rx + self.dome * dD * ux
        Py = Pk * ry + self.dome * dD * uy
        z, dz = _radial_cutoff(dist, self.peak, self.blend)
        V = (1 - z) * E + z * P
        Vx = (1 - z) * Ex + z * Px + dz * (P - E) * ux
        Vy = (1 - z) * Ey + z * Py + dz * (P - E) * uy
        # closed form near the origin
        r = np.hypot(x, y)
        C, Cx, Cy = self._closed(x, y)
        chi, dchi = _radial_cutoff(r, 2.0 * R, 3.0 * R)
        with np.errstate(divide="ignore", invalid="ignore"):
            ox = np.where(r > 0, x / r, 0.0)
            oy = np.where(r > 0, y / r, 0.0)
        val = chi * C + (1 - chi) * V
        gx = chi * Cx + (1 - chi) * Vx + dchi * (C - V) * ox
        gy = chi * Cy + (1 - chi) * Vy + dchi * (C - V) * oy
        # V is not needed (and may be singular) where the closed form is used alone
        inner = r <= 2.0 * R
        val = np.where(inner, C, val)
        gx = np.where(inner, Cx, gx)
        gy = np.where(inner, Cy, gy)
        return val, gx, gy


def _critical_cells(gx, gy, allowed):
    """Cells around which the gradient field has nonzero winding number.

    The index of a vector field around a small loop equals the sum of the
    indices of the zeros inside, so a cell with nonzero winding contains a
    critical point once the gradient is resolved on the grid.
    """
    ang = np.arctan2(gy, gx)
    loop = [ang[:-1, :-1], ang[1:, :-1], ang[1:, 1:], ang[:-1, 1:]]
    total = np.zeros(loop[0].shape)
    for a, b in zip(loop, loop[1:] + loop[:1]):
        total += np.mod(b - a + np.pi, 2 * np.pi) - np.pi
    wind = np.rint(total / (2 * np.pi)).astype(int)
    blocked = allowed[:-1, :-1] | allowed[1:, :-1] | allowed[:-1, 1:] | allowed[1:, 1:]
    # the gradient of any function vanishing on a square is zero at its corners
    blocked[0, 0] = blocked[0, -1] = blocked[-1, 0] = blocked[-1, -1] = True
    return np.argwhere((wind != 0) & ~blocked)


def _refine_cells(fn, grid, cells, sub=16):
    """Keep only cells whose sub-sampled analytic gradient still winds."""
    keep = []
    t = np.linspace(0.0, grid.h, sub + 1)
    for i, j in cells:
        X = grid.xs[i] + t[:, None] + 0 * t[None, :]
        Y = grid.xs[j] + t[None, :] + 0 * t[:, None]
        _, gx, gy = fn(X, Y)
        inner = _critical_cells(np.pad(gx, 1, mode="edge"), np.pad(gy, 1, mode="edge"),
                                np.zeros((sub + 3, sub + 3), dtype=bool))
        if len(inner):
            keep.append((i, j))
    return np.array(keep, dtype=int).reshape(-1, 2)


def build_eta(grid: Grid, spec: DomainSpec | None = None, eps: float = 0.0,
              method: str = "spiral") -> EtaFunction:
    """Construct the auxiliary function on the grid and check it.

    ``eps = 0`` gives the limit function |x|^{2-alpha} on B_{2R}.  The report
    holds min eta on interior vertices (off the origin), the boundary maximum,
    ``c_eta`` = min |grad eta| over interior vertices outside B_R and
    B_{2R}(x0), the argmin vertex and any grid cell that may host a critical
    point there.  Raises ``ConstructionError`` when c_eta <= 1e-3 or a
    critical cell is found.
    """
    spec = spec or grid.spec
    if eps < 0 or eps > 0.5:
        raise ValidationError(f"eps must be 0 (limit) or in (0, 1/2], got {eps}")
    if method == "spiral":
        fn = _SpiralEta(spec, eps)
        val, gx, gy = fn(grid.X, grid.Y)
        sup_extra = float(fn(*spec.control_center)[0])
    elif method == "poisson":
        fn = None
        val, gx, gy = _poisson_eta(grid, spec, eps)
        sup_extra = -np.inf
    else:
        raise ValidationError(f"unknown construction method {method!r}")
    val = np.array(val, dtype=float)
    val[0, :] = val[-1, :] = val[:, 0] = val[:, -1] = 0.0
    grad = np.stack([gx, gy])
    r = grid.radius()
    R = spec.origin_ball_radius
    analytic = r <= 2 * R * (1 + 1e-12)
    excluded = region_mask(grid, "origin_ball") | region_mask(grid, "control_core")
    check = grid.interior_mask() & ~excluded
    gn = np.hypot(gx, gy)
    c_eta = float(gn[check].min())
    imin = np.unravel_index(np.argmin(np.where(check, gn, np.inf)), gn.shape)
    crit = _critical_cells(gx, gy, excluded)
    if fn is not None and len(crit):
        crit = _refine_cells(fn, grid, crit)
    interior_off0 = grid.interior_mask().copy()
    interior_off0[grid.origin_index] = eps > 0
    report = {
        "method": method,
        "eps": eps,
        "n": grid.n,
        "min_interior": float(val[interior_off0].min()),
        "boundary_max_abs": float(np.max(np.abs(np.concatenate([val[0], val[-1], val[:, 0], val[:, -1]])))),
        "sup": float(max(val.max(), sup_extra)),
        "c_eta": c_eta,
        "c_eta_at": [float(grid.X[imin]), float(grid.Y[imin])],
        "critical_cells": [[float(grid.X[i, j] + grid.h / 2), float(grid.Y[i, j] + grid.h / 2)]
                           for i, j in crit[:20]],
        "critical_cell_count": int(len(crit)),
    }
    if c_eta <= GRADIENT_FLOOR or len(crit) or report["min_interior"] <= 0:
        report["offending_vertices"] = [[float(grid.X[i, j]), float(grid.Y[i, j])]
                                        for i, j in np.argwhere(check & (gn <= GRADIENT_FLOOR))[:20]]
        raise ConstructionError(
            f"auxiliary function fails its gradient bound: c_eta = {c_eta:.3e} at "
            f"({report['c_eta_at'][0]:.3f}, {report['c_eta_at'][1]:.3f}), "
            f"{len(crit)} critical cell(s) outside B_R and the control core", report)
    return EtaFunction(grid, eps, val, grad, analytic, report["sup"], report, fn)


def _poisson_eta(grid: Grid, spec: DomainSpec, eps: float):
    """Closed form blended with a scaled discrete Poisson solution.

    G solves -Lap G = 1 on the control core with zero boundary values and is
    scaled to match the closed form on the blend annulus 2R <= |x| <= 3R.
    """
    R = spec.origin_ball_radius
    K = assemble_stiffness(grid, WeightSpec.constant())
    src = grid.restrict(region_mask(grid, "control_core").astype(float)) * grid.h ** 2
    G = grid.extend(pcg(K, src, tol=1e-12)[0])
    r = grid.radius()
    core = _SpiralEta(spec, eps)
    C, Cx, Cy = core._closed(grid.X, grid.Y)
    band = (r >= 2 * R) & (r <= 3 * R)
    G *= C[band].mean() / G[band].mean()
    Gx, Gy = np.gradient(G, grid.h, grid.h)
    chi, dchi = _radial_cutoff(r, 2 * R, 3 * R)
    with np.errstate(divide="ignore", invalid="ignore"):
        ox = np.where(r > 0, grid.X / r, 0.0)
        oy = np.where(r > 0, grid.Y / r, 0.0)
    val = chi * C + (1 - chi) * G
    gx = chi * Cx + (1 - chi) * Gx + dchi * (C - G) * ox
    gy = chi * Cy + (1 - chi) * Gy + dchi * (C - G) * oy
    return val, gx, gy


# ------------------------------------------------------------ weights

def _as_time(t, shape):
    t = np.asarray(t, dtype=float)
    return t.reshape(t.shape + (1,) * len(shape))


@dataclass
class CarlemanWeights:
    """Theta, xi, sigma and their derivatives for given eta, s, lam and T.

    Spatial arguments are arrays of eta values (and eta gradients of shape
    (2, ...)); time arguments are arrays of times.  Results broadcast to
    ``t.shape + eta.shape``.
    """

    eta: EtaFunction
    s: float
    lam: float
    T: float
    M: int | None = None

    @property
    def sup(self) -> float:
        return self.eta.sup

    # Theta and its time derivatives, q = t (T - t)
    def log_theta(self, t):
        t = np.asarray(t, dtype=float)
        with np.errstate(divide="ignore", invalid="ignore"):
            q = t * (self.T - t)
            return np.where(q > 0, -4.0 * np.log(np.where(q > 0, q, 1.0)), np.inf)

    def theta(self, t):
        return np.exp(self.log_theta(t))

    def dtheta(self, t):
        t = np.asarray(t, dtype=float)
        q = t * (self.T - t)
        return -4.0 * (self.T - 2 * t) / q ** 5

    def d2theta(self, t):
        t = np.asarray(t, dtype=float)
        q = t * (self.T - t)
        return 20.0 * (self.T - 2 * t) ** 2 / q ** 6 + 8.0 / q ** 5

    def _space(self, eta_vals):
        return self.lam * (8.0 * self.sup + np.asarray(eta_vals, dtype=float))

    def log_xi(self, eta_vals, t):
        e = self._space(eta_vals)
        return _as_time(self.log_theta(t), e.shape) + e

    def xi(self, eta_vals, t):
        return np.exp(self.log_xi(eta_vals, t))

    def _gap(self, eta_vals):
        """e^{10 lam |eta|} - e^{lam (8|eta| + eta)} = e^{10 lam |eta|} (1 - e^{lam (eta - 2|eta|)})."""
        e = np.asarray(eta_vals, dtype=float)
        return np.exp(10 * self.lam * self.sup) * -np.expm1(self.lam * (e - 2 * self.sup))

    def sigma(self, eta_vals, t):
        gap = self._gap(eta_vals)
        return _as_time(self.theta(t), gap.shape) * gap

    def sigma_t(self, eta_vals, t):
        gap = self._gap(eta_vals)
        return _as_time(self.dtheta(t), gap.shape) * gap

    def sigma_tt(self, eta_vals, t):
        gap = self._gap(eta_vals)
        return _as_time(self.d2theta(t), gap.shape) * gap

    def xi_t(self, eta_vals, t):
        e = np.exp(self._space(eta_vals))
        return _as_time(self.dtheta(t), e.shape) * e

    def grad_xi(self, eta_vals, grad_eta, t):
        """lam xi grad eta, shape t.shape + (2,) + eta.shape."""
        xi = self.xi(eta_vals, t)
        return self.lam * np.expand_dims(xi, xi.ndim - np.ndim(eta_vals)) * np.asarray(grad_eta)

    def grad_sigma(self, eta_vals, grad_eta, t):
        return -self.grad_xi(eta_vals, grad_eta, t)

    def dt_grad_sigma(self, eta_vals, grad_eta, t):
        e = np.exp(self._space(eta_vals))
        th = _as_time(self.dtheta(t), e.shape) * e
        return -self.lam * np.expand_dims(th, th.ndim - np.ndim(eta_vals)) * np.asarray(grad_eta)

    def log_weight(self, p: float, eta_vals, t):
        """log(xi^p e^{-2 s sigma}); -inf at t = 0 and t = T."""
        lt = self.log_theta(np.asarray(t, dtype=float))
        gap = self._gap(eta_vals)
        e = self._space(eta_vals)
        ltb = _as_time(lt, e.shape)
        finite = np.isfinite(ltb)
        with np.errstate(over="ignore", invalid="ignore"):
            out = p * (ltb + e) - 2.0 * self.s * np.exp(np.where(finite, ltb, 0.0)) * gap
        return np.where(finite, out, -np.inf)

    def weight(self, p: float, eta_vals, t):
        """xi^p e^{-2 s sigma}, exactly 0 below the underflow threshold."""
        lw = self.log_weight(p, eta_vals, t)
        if np.any(lw > _LOG_MAX):
            raise NumericalError("weight overflow regime: xi^p e^{-2 s sigma} exceeds double range")
        return np.exp(lw)


def scan_exponents(sup: float, s: float, lam: float, T: float, p: float = 3.0, count: int = 4001) -> dict:
    """Largest log xi^p e^{-2 s sigma} and log sigma over eta in [0, sup].

    The time scan covers (0, T) geometrically towards both ends.
    """
    half = np.geomspace(1e-6 * T, 0.5 * T, count // 2)
    t = np.concatenate([half, T - half[::-1]])
    q = t * (T - t)
    lt = -4.0 * np.log(q)[:, None]
    e = np.linspace(0.0, sup, 65)[None, :]
    gap_log = 10 * lam * sup + np.log(-np.expm1(lam * (e - 2 * sup)))
    log_sigma = lt + gap_log
    logw = p * (lt + lam * (8 * sup + e)) - 2 * s * np.exp(log_sigma)
    return {"max_log_weight": float(logw.max()), "max_log_sigma_tmin": float(log_sigma.max()),
            "min_log_sigma": float(log_sigma.min())}


def carleman_weights(eta: EtaFunction, s: float, lam: float, tg, enforce_box: bool = True) -> CarlemanWeights:
    """Weights for parameters (s, lam) on the time grid ``tg`` (TimeGrid)."""
    T = tg.T
    if enforce_box:
        bad = [f"{k}={v:g} not in [{PARAMETER_BOX[k][0]:g}, {PARAMETER_BOX[k][1]:g}]"
               for k, v in (("s", s), ("lam", lam), ("T", T))
               if not PARAMETER_BOX[k][0] <= v <= PARAMETER_BOX[k][1]]
        if bad:
            raise ValidationError("weight overflow regime: " + ", ".join(bad))
        scan = scan_exponents(eta.sup, s, lam, T)
        dt = T / tg.M
        lsig = -4.0 * math.log(dt * (T - dt)) + 10 * lam * eta.sup
        if scan["max_log_weight"] > _LOG_MAX or lsig > _LOG_MAX:
            raise ValidationError("weight overflow regime: exponent scan exceeds the double range")
    elif s < 0 or lam < 0:
        raise ValidationError("s and lam must be nonnegative")
    return CarlemanWeights(eta, float(s), float(lam), float(T), tg.M)


# ------------------------------------------------------------ conjugation identity

def manufactured_trajectory(grid: Grid, tg):
    """Smooth u(x, t) = (1 + t/T + (t/T)^2) sin-mode(1,1) (1 + x/2 + y^2/4), zero on the boundary."""
    L = grid.L
    base = grid.sample(lambda X, Y: np.sin(np.pi * (X + L) / (2 * L)) * np.sin(np.pi * (Y + L) / (2 * L))
                       * (1 + 0.5 * X / L + 0.25 * (Y / L) ** 2))
    tau = tg.times / tg.T
    return (1 + tau + tau ** 2)[:, None, None] * base[None]


def _central(f, h):
    """Central differences in x and y on interior vertices (boundary rows zero)."""
    gx = np.zeros_like(f)
    gy = np.zeros_like(f)
    gx[..., 1:-1, :] = (f[..., 2:, :] - f[..., :-2, :]) / (2 * h)
    gy[..., :, 1:-1] = (f[..., :, 2:] - f[..., :, :-2]) / (2 * h)
    return gx, gy


def _div_weighted_grad(grid: Grid, K, u):
    """div(w grad u) on interior vertices from the conservative stencil."""
    U = grid.restrict(u)
    return grid.extend(-(K @ U.reshape(-1, grid.n_interior).T).T.reshape(U.shape) / grid.h ** 2)


def decomposition_residual(u, cw: CarlemanWeights, spec: WeightSpec, M: int | None = None) -> float:
    """Relative L2 mismatch of e^{-s sigma}(u_t + div(w grad u)) and P1 v + P2 v.

    With v = e^{-s sigma} u,

        P1 v = v_t + s w grad v . grad sigma + s div(v w grad sigma),
        P2 v = div(w grad v) + s sigma_t v + s^2 v w |grad sigma|^2.

    Both sides are formed with central differences in space and time (the
    weighted Laplacian with the conservative stencil) on interior vertices
    and on time levels in [T/4, 3T/4]; sigma, sigma_t and grad sigma are
    exact.  The continuum identity is exact, so the residual is pure
    discretization error.
    """
    u = np.asarray(u, dtype=float)
    grid = cw.eta.grid
    M = u.shape[0] - 1 if M is None else M
    if u.shape != (M + 1,) + grid.shape:
        raise ValidationError(f"trajectory shape {u.shape} does not match (M+1, n, n)")
    if not np.any(u):
        return 0.0
    dt = cw.T / M
    times = np.linspace(0.0, cw.T, M + 1)
    band = np.flatnonzero((times >= 0.25 * cw.T - 1e-12) & (times <= 0.75 * cw.T + 1e-12))
    band = band[(band >= 1) & (band <= M - 1)]
    lev = np.arange(band[0] - 1, band[-1] + 2)
    eta_v, geta = cw.eta.values, cw.eta.grad
    s = cw.s
    sig = cw.sigma(eta_v, times[lev])
    # a common factor e^{-s min sigma} (over the support of u) is dropped from
    # both sides so that strong weights do not underflow
    live = u[lev] != 0
    E = np.exp(np.clip(-s * (sig - sig[live].min()), -745.0, _LOG_MAX))
    v = E * u[lev]
    K = assemble_stiffness(grid, spec)
    w = spec.radial(grid.radius())
    inner = (slice(1, len(lev) - 1),)
    t_in = times[lev][1:-1]
    sig_t = cw.sigma_t(eta_v, t_in)
    gs = cw.grad_sigma(eta_v, geta, t_in)            # (nt, 2, n, n)
    vi = v[1:-1]
    v_t = (v[2:] - v[:-2]) / (2 * dt)
    vx, vy = _central(vi, grid.h)
    Fx, Fy = vi * w * gs[:, 0], vi * w * gs[:, 1]
    divF = _central(Fx, grid.h)[0] + _central(Fy, grid.h)[1]
    P1 = v_t + s * w * (vx * gs[:, 0] + vy * gs[:, 1]) + s * divF
    P2 = _div_weighted_grad(grid, K, vi) + s * sig_t * vi + s * s * vi * w * (gs[:, 0] ** 2 + gs[:, 1] ** 2)
    ui = u[lev][1:-1]
    u_t = (u[lev][2:] - u[lev][:-2]) / (2 * dt)
    rhs = E[inner] * (u_t + _div_weighted_grad(grid, K, ui))
    diff = grid.restrict(P1 + P2 - rhs)
    ref = grid.restrict(rhs)
    den = math.sqrt(float(np.sum(ref * ref)))
    return math.sqrt(float(np.sum(diff * diff))) / den if den > 0 else 0.0


# ------------------------------------------------------------ quadrature helpers

def _quarter_disc_area(x, y, r):
    """Area of {0 <= u <= x, 0 <= v <= y, u^2 + v^2 <= r^2} for x, y >= 0."""
    x = np.minimum(x, r)
    y = np.minimum(y, r)
    a = np.minimum(x, np.sqrt(np.clip(r * r - y * y, 0.0, None)))

    def G(z):
        return 0.5 * (z * np.sqrt(np.clip(r * r - z * z, 0.0, None)) + r * r * np.arcsin(np.clip(z / r, -1, 1)))

    return y * a + G(x) - G(a)


def disc_cell_fractions(grid: Grid, radius: float):
    """Exact area of each dual cell [x -+ h/2] x [y -+ h/2] inside B_radius(0), over h^2."""
    h = grid.h

    def S(x, y):
        return np.sign(x) * np.sign(y) * _quarter_disc_area(np.abs(x), np.abs(y), radius)

    x1, x2 = grid.X - h / 2, grid.X + h / 2
    y1, y2 = grid.Y - h / 2, grid.Y + h / 2
    area = S(x2, y2) - S(x1, y2) - S(x2, y1) + S(x1, y1)
    return np.clip(area / h ** 2, 0.0, 1.0)


def _log_integral(log_density, log_cell):
    """log of sum exp(log_density + log_cell), -inf for an empty sum."""
    a = np.asarray(log_density + log_cell, dtype=float).ravel()
    a = a[np.isfinite(a)]
    return float(logsumexp(a)) if a.size else -np.inf


def _log_abs(x):
    with np.errstate(divide="ignore"):
        return np.log(np.abs(x))


def _time_log_weights(M: int, dt: float):
    """Trapezoid weights on interior levels (endpoint values vanish)."""
    w = np.full(M + 1, math.log(dt))
    w[0] = w[-1] = -np.inf
    return w


def vertex_gradient_density(grid: Grid, spec: WeightSpec, u):
    """Per-vertex share of the edge energy, over h^2 (sums to int w |grad u|^2)."""
    from .operators import edge_weights
    wx, wy = edge_weights(grid, spec)
    ex = wx * np.diff(u, axis=-2) ** 2
    ey = wy * np.diff(u, axis=-1) ** 2
    d = np.zeros(np.shape(u))
    d[..., :-1, :] += 0.5 * ex
    d[..., 1:, :] += 0.5 * ex
    d[..., :, :-1] += 0.5 * ey
    d[..., :, 1:] += 0.5 * ey
    return d / grid.h ** 2


def origin_ball_term(u, cw: CarlemanWeights, k: float, alpha: float) -> float:
    """log of k^{2-alpha} int_0^T int_{B_{1/k}} xi^3 u^2 e^{-2 s sigma}.

    Cell areas inside the ball are exact, so the term is resolved even when
    1/k is comparable to the grid spacing.
    """
    grid = cw.eta.grid
    u = np.asarray(u, dtype=float)
    M = u.shape[0] - 1
    dt = cw.T / M
    frac = disc_cell_fractions(grid, 1.0 / k)
    sel = frac > 0
    times = np.linspace(0.0, cw.T, M + 1)
    lw = cw.log_weight(3.0, cw.eta.values[sel], times)
    dens = lw + 2 * _log_abs(u[:, sel])
    cell = _time_log_weights(M, dt)[:, None] + np.log(frac[sel] * grid.h ** 2)[None, :]
    return (2 - alpha) * math.log(k) + _log_integral(dens, cell)


# ------------------------------------------------------------ Carleman ratio

@dataclass
class CarlemanRatioStats:
    ratios: np.ndarray
    log_terms: list               # per sample dict of log integrals
    C: float
    params: dict

    def as_dict(self) -> dict:
        finite = self.ratios[np.isfinite(self.ratios)]
        return {
            "C": self.C,
            "ratio_min": float(finite.min()) if finite.size else None,
            "ratio_median": float(np.median(finite)) if finite.size else None,
            "ratio_max": float(finite.max()) if finite.size else None,
            "samples": int(self.ratios.size),
            **self.params,
        }

    def to_json(self, **kw) -> str:
        return json.dumps(self.as_dict(), **kw)

    def to_csv(self) -> str:
        buf = io.StringIO()
        keys = list(self.log_terms[0]) if self.log_terms else []
        wr = csv.writer(buf)
        wr.writerow(["sample", "ratio"] + [f"log_{k}" for k in keys])
        for i, (r, row) in enumerate(zip(self.ratios, self.log_terms)):
            wr.writerow([i, repr(float(r))] + [repr(row[k]) for k in keys])
        return buf.getvalue()


def carleman_terms(u, p, cw: CarlemanWeights, _logw=None) -> dict:
    """Log integrals of both sides of the Carleman inequality for one trajectory.

    Keys: ``gradient`` (s lam int xi w |grad u|^2 e^{-2 s sigma}),
    ``zero_order`` (s^3 lam^4 int xi^3 u^2 (w |grad eta|^2)^2 e^{-2 s sigma}),
    ``observation`` (s^3 lam^4 int_omega xi^3 u^2 e^{-2 s sigma}) and, for a
    regularized weight, ``eps_ball`` (s^2 lam^3 eps^{alpha-2} int_{B_eps} xi^3
    u^2 e^{-2 s sigma}).  Values are natural logs, -inf for zero.
    """
    grid = p.grid
    u = np.asarray(u, dtype=float)
    M = u.shape[0] - 1
    dt = p.time.T / M
    times = np.linspace(0.0, p.time.T, M + 1)
    s, lam = cw.s, cw.lam
    eta_v = cw.eta.values
    tw = _time_log_weights(M, dt)[:, None, None]
    cell = math.log(grid.h ** 2)
    if _logw is None:
        _logw = (cw.log_weight(1.0, eta_v, times), cw.log_weight(3.0, eta_v, times))
    lw1, lw3 = _logw
    dens = vertex_gradient_density(grid, p.weight, u)
    out = {"gradient": math.log(s * lam) + _log_integral(lw1 + _log_abs(dens), tw + cell)}
    from .operators import vertex_power
    wv = vertex_power(grid, p.weight, p.weight.alpha) if p.weight.kind != "constant" else np.ones(grid.shape)
    g2 = cw.eta.grad[0] ** 2 + cw.eta.grad[1] ** 2
    zero = lw3 + 2 * _log_abs(u) + 2 * _log_abs(wv * g2)
    out["zero_order"] = math.log(s ** 3 * lam ** 4) + _log_integral(zero, tw + cell)
    mask = p.control_mask
    obs = lw3[:, mask] + 2 * _log_abs(u[:, mask])
    out["observation"] = math.log(s ** 3 * lam ** 4) + _log_integral(obs, tw[:, :, 0] + cell)
    if p.weight.kind == "regularized":
        eps, a = p.weight.epsilon, p.weight.alpha
        frac = disc_cell_fractions(grid, eps)
        sel = frac > 0
        ball = lw3[:, sel] + 2 * _log_abs(u[:, sel])
        out["eps_ball"] = (math.log(s ** 2 * lam ** 3) + (a - 2) * math.log(eps)
                           + _log_integral(ball, tw[:, :, 0] + np.log(frac[sel] * grid.h ** 2)[None, :]))
    return out


def carleman_ratio(p, cw: CarlemanWeights, samples: int = 20, seed: int = 0, modes: int = 6) -> CarlemanRatioStats:
    """Ratio of the Carleman left side to its observation (plus eps-ball) term.

    ``samples`` random terminal data are drawn as seeded sine combinations
    (the same functions on every grid) and solved backward with g = 0 on
    ``p``.  The fitted constant C is the largest ratio; a zero trajectory
    has ratio 0.
    """
    from .fields import random_sine_field as _rsf
    from .parabolic import backward_vectors
    grid = p.grid
    if samples < 1:
        raise ValidationError("need at least one sample")
    UT = np.stack([grid.restrict(_rsf(grid, seed + i, modes=modes)) for i in range(samples)], axis=1)
    traj = backward_vectors(p, None, UT)                     # (M+1, m, samples)
    times = p.time.times
    logw = (cw.log_weight(1.0, cw.eta.values, times), cw.log_weight(3.0, cw.eta.values, times))
    ratios, logs = [], []
    for i in range(samples):
        u = grid.extend(traj[:, :, i])
        terms = carleman_terms(u, p, cw, logw)
        lhs = np.logaddexp(terms["gradient"], terms["zero_order"])
        rhs = terms["observation"]
        if "eps_ball" in terms:
            rhs = np.logaddexp(rhs, terms["eps_ball"])
        terms["lhs"], terms["rhs"] = float(lhs), float(rhs)
        if not np.isfinite(lhs):
            ratios.append(0.0)
        else:
            ratios.append(math.exp(lhs - rhs) if np.isfinite(rhs) else np.inf)
        logs.append(terms)
    ratios = np.asarray(ratios)
    params = {"s": cw.s, "lam": cw.lam, "T": cw.T, "n": grid.n, "M": p.time.M,
              "weight": p.weight.kind, "alpha": p.weight.alpha, "eps": p.weight.epsilon, "seed": seed}
    return CarlemanRatioStats(ratios, logs, float(ratios.max()), params)


def weight_extremes(cw: CarlemanWeights, grid: Grid | None = None, tg=None) -> dict:
    """min of xi e^{-2 s sigma} over the middle time band and max of xi^3 e^{-2 s sigma}.

    Both are formed in log space; ``band_min_log10`` is finite exactly when
    the band minimum is positive, even if ``band_min`` itself underflows.
    """
    grid = grid or cw.eta.grid
    M = tg.M if tg is not None else (cw.M or 64)
    times = np.linspace(0.0, cw.T, M + 1)
    eta_v = cw.eta.values
    inner = grid.interior_mask()
    band = (times >= 0.25 * cw.T - 1e-12) & (times <= 0.75 * cw.T + 1e-12)
    lw1 = cw.log_weight(1.0, eta_v[inner], times[band])
    lw3 = cw.log_weight(3.0, eta_v[inner], times)
    i_min = np.unravel_index(np.argmin(lw1), lw1.shape)
    i_max = np.unravel_index(np.argmax(lw3), lw3.shape)
    xs, ys = grid.X[inner], grid.Y[inner]
    ln10 = math.log(10.0)
    bmin = float(lw1[i_min])
    gmax = float(lw3[i_max])
    return {
        "band_min": math.exp(bmin) if bmin > -745 else 0.0,
        "band_min_log10": bmin / ln10,
        "band_min_at": [float(xs[i_min[1]]), float(ys[i_min[1]]), float(times[band][i_min[0]])],
        "global_max": math.exp(gmax) if gmax < _LOG_MAX else np.inf,
        "global_max_log10": gmax / ln10,
        "global_max_at": [float(xs[i_max[1]]), float(ys[i_max[1]]), float(times[i_max[0]])],
        "endpoint_value": float(np.exp(cw.log_weight(3.0, eta_v[inner], np.array([0.0, cw.T]))).max()),
    }


def derivative_bound_constants(cw: CarlemanWeights, times) -> dict:
    """Fitted C in |sigma_tt| <= C xi^{3/2} and |xi xi_t| <= C xi^{9/4} over ``times``."""
    eta_v = cw.eta.values[cw.eta.grid.interior_mask()]
    lxi = cw.log_xi(eta_v, times)
    l_stt = _log_abs(cw.sigma_tt(eta_v, times))
    l_xxt = lxi + _log_abs(cw.xi_t(eta_v, times))
    return {"sigma_tt": float(np.exp(np.max(l_stt - 1.5 * lxi))),
            "xi_xi_t": float(np.exp(np.max(l_xxt - 2.25 * lxi)))}
