"""Diffusion weights: |x|^alpha, its C^2 regularization, and diagnostics.

The regularization replaces |r| on [-eps, eps] by the even quartic

    psi_eps(r) = 3 eps/8 + 3 r^2/(4 eps) - r^4/(8 eps^3)

which matches |r| together with its first and second derivatives at
|r| = eps.  In the plane psi_eps(x) = psi_eps(|x|) and the regularized
weight is w_eps = psi_eps^alpha.  The approximating family uses eps = 1/k.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
from numpy.polynomial import Polynomial

from .errors import ValidationError

KINDS = ("degenerate", "regularized", "constant")


class PsiValues(NamedTuple):
    value: np.ndarray
    first: np.ndarray
    second: np.ndarray
    third: np.ndarray


class WeightEval(NamedTuple):
    value: np.ndarray
    gradient: np.ndarray
    hessian: np.ndarray


def _check_eps(eps):
    # eps = 1/2 is admitted: the top of the family is used as a sample point
    if not (0.0 < eps <= 0.5):
        raise ValidationError(f"regularization radius must lie in (0, 1/2], got {eps}")


def psi_eps(r, eps: float) -> PsiValues:
    """Regularized |r| and its first three derivatives (vectorized in r)."""
    _check_eps(eps)
    r = np.asarray(r, dtype=float)
    a = np.abs(r)
    inside = a < eps
    e3 = eps ** 3
    r2 = r * r
    val = np.where(inside, 3 * eps / 8 + 0.75 * r2 / eps - r2 * r2 / (8 * e3), a)
    d1 = np.where(inside, 1.5 * r / eps - 0.5 * r2 * r / e3, np.sign(r))
    d2 = np.where(inside, 1.5 / eps - 1.5 * r2 / e3, 0.0)
    d3 = np.where(inside, -3.0 * r / e3, 0.0)
    return PsiValues(val, d1, d2, d3)


@dataclass(frozen=True)
class WeightSpec:
    """Coefficient of the diffusion operator.

    ``kind`` is ``"degenerate"`` (|x|^alpha), ``"regularized"``
    (psi_eps(|x|)^alpha) or ``"constant"`` (w = 1, the alpha -> 0 limit used
    as an oracle mode).
    """

    kind: str
    alpha: float = 1.0
    epsilon: float | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValidationError(f"weight kind must be one of {KINDS}, got {self.kind!r}")
        if self.kind == "constant":
            object.__setattr__(self, "alpha", 0.0)
            object.__setattr__(self, "epsilon", None)
            return
        if not 0.0 < self.alpha < 2.0:
            raise ValidationError(f"alpha must lie in (0, 2), got {self.alpha}")
        if self.kind == "regularized":
            if self.epsilon is None:
                raise ValidationError("regularized weight needs epsilon")
            _check_eps(self.epsilon)
        elif self.epsilon is not None:
            raise ValidationError("epsilon is only meaningful for the regularized weight")

    @classmethod
    def degenerate(cls, alpha):
        return cls("degenerate", alpha)

    @classmethod
    def regularized(cls, alpha, epsilon):
        return cls("regularized", alpha, float(epsilon))

    @classmethod
    def family(cls, alpha, k):
        """Member w_k of the approximating family (eps = 1/k)."""
        return cls("regularized", alpha, 1.0 / k)

    @classmethod
    def constant(cls):
        return cls("constant")

    def radial_base(self, r):
        """psi(r): |r| (degenerate) or psi_eps(r) (regularized)."""
        r = np.abs(np.asarray(r, dtype=float))
        if self.kind == "regularized":
            return psi_eps(r, self.epsilon).value
        return r

    def radial(self, r):
        """Weight as a function of the radius."""
        if self.kind == "constant":
            return np.ones_like(np.asarray(r, dtype=float))
        return self.radial_base(r) ** self.alpha

    def radial_power(self, r, beta):
        """psi(r)^beta; for the constant kind returns ones."""
        if self.kind == "constant":
            return np.ones_like(np.asarray(r, dtype=float))
        return self.radial_base(r) ** beta

    def label(self) -> str:
        if self.kind == "constant":
            return "constant"
        if self.kind == "degenerate":
            return f"degenerate(alpha={self.alpha:g})"
        return f"regularized(alpha={self.alpha:g}, eps={self.epsilon:g})"

    def as_dict(self) -> dict:
        return {"kind": self.kind, "alpha": self.alpha, "epsilon": self.epsilon}


# ------------------------------------------------------------ derivatives

def psi_derivatives(x, eps: float | None):
    """psi, grad psi, Hessian of psi and Laplacian at points ``x`` (..., 2).

    ``eps=None`` gives psi = |x|; that branch is singular at the origin and
    the caller must exclude it.
    """
    x = np.asarray(x, dtype=float)
    q = np.einsum("...i,...i->...", x, x)
    r = np.sqrt(q)
    eye = np.eye(2)
    xxT = x[..., :, None] * x[..., None, :]
    with np.errstate(divide="ignore", invalid="ignore"):
        out_val = r
        out_grad = x / r[..., None]
        out_hess = eye / r[..., None, None] - xxT / (r ** 3)[..., None, None]
        out_lap = 1.0 / r
    if eps is None:
        return out_val, out_grad, out_hess, out_lap
    _check_eps(eps)
    e3 = eps ** 3
    a = 1.5 / eps - 0.5 * q / e3
    in_val = 3 * eps / 8 + 0.75 * q / eps - q * q / (8 * e3)
    in_grad = a[..., None] * x
    in_hess = a[..., None, None] * eye - xxT / e3
    in_lap = 2.0 * a - q / e3
    inside = r < eps
    val = np.where(inside, in_val, out_val)
    grad = np.where(inside[..., None], in_grad, out_grad)
    hess = np.where(inside[..., None, None], in_hess, out_hess)
    lap = np.where(inside, in_lap, out_lap)
    return val, grad, hess, lap


def eval_weight(spec: WeightSpec, x, derivatives: bool = True) -> WeightEval:
    """Weight value, gradient and Hessian at points ``x`` of shape (..., 2)."""
    x = np.asarray(x, dtype=float)
    shape = x.shape[:-1]
    if spec.kind == "constant":
        return WeightEval(np.ones(shape), np.zeros(shape + (2,)), np.zeros(shape + (2, 2)))
    if spec.kind == "degenerate" and derivatives:
        if np.any(np.einsum("...i,...i->...", x, x) == 0.0):
            raise ValidationError("singular point: derivatives of |x|^alpha requested at x = 0")
    if not derivatives:
        r = np.sqrt(np.einsum("...i,...i->...", x, x))
        return WeightEval(spec.radial(r), None, None)
    eps = spec.epsilon if spec.kind == "regularized" else None
    psi, g, H, _ = psi_derivatives(x, eps)
    a = spec.alpha
    w = psi ** a
    c1 = a * psi ** (a - 1)
    c2 = a * (a - 1) * psi ** (a - 2)
    grad = c1[..., None] * g
    hess = c1[..., None, None] * H + c2[..., None, None] * (g[..., :, None] * g[..., None, :])
    return WeightEval(w, grad, hess)


# ------------------------------------------------------------ bounds and identities

def psi_bound_constants(eps: float, sample_count: int = 10_000, seed: int = 0) -> dict:
    """Empirical constants in the bounds satisfied by psi_eps.

    Samples r on [-3 eps, 3 eps] (half of them inside the quartic region) and
    returns min psi/eps, max |psi'|, max eps |psi''|, max eps^2 |psi'''| and
    whether |r| <= psi <= 2 eps on [-eps, eps].
    """
    rng = np.random.default_rng(seed)
    half = sample_count // 2
    r = np.concatenate([rng.uniform(-eps, eps, half),
                        rng.uniform(-3 * eps, 3 * eps, sample_count - half),
                        [0.0, eps, -eps]])
    pv = psi_eps(r, eps)
    inner = np.abs(r) <= eps
    sandwich = bool(np.all(pv.value[inner] >= np.abs(r[inner]) - 1e-15)
                    and np.all(pv.value[inner] <= 2 * eps))
    return {
        "eps": eps,
        "samples": int(r.size),
        "min_value_over_eps": float(np.min(pv.value) / eps),
        "max_first": float(np.max(np.abs(pv.first))),
        "max_second_times_eps": float(np.max(np.abs(pv.second)) * eps),
        "max_third_times_eps2": float(np.max(np.abs(pv.third)) * eps ** 2),
        "sandwich_holds": sandwich,
    }


@dataclass
class IdentityReport:
    """Residuals of the closed-form identities of the regularized weight."""

    eps: float
    samples: int
    seed: int
    entries: dict = field(default_factory=dict)

    def max_residual(self) -> float:
        return max(e["max_residual"] for e in self.entries.values())

    def total_sign_violations(self) -> int:
        return sum(e["sign_violations"] for e in self.entries.values())

    def passed(self, tol: float = 1e-10) -> bool:
        return self.max_residual() <= tol and self.total_sign_violations() == 0

    def as_dict(self) -> dict:
        return {"eps": self.eps, "seed": self.seed, "identities": self.entries}

    def to_json(self, **kw) -> str:
        return json.dumps(self.as_dict(), **kw)


def _entry(lhs, rhs, scale, sign_bad, samples):
    res = np.abs(lhs - rhs) / np.where(scale > 0, scale, 1.0)
    return {"max_residual": float(np.max(res)), "sign_violations": int(np.count_nonzero(sign_bad)),
            "samples": int(samples)}


def _gradient_energy_polynomial(eps: float) -> Polynomial:
    """|grad psi|^2 + psi * Lap psi as a polynomial in q = |x|^2 (N = 2).

    Built from the defining quartic only, viewed as a function of q:
    grad psi = 2 psi'(q) x and, in two dimensions,
    Lap psi = 4 psi'(q) + 4 q psi''(q).
    """
    psi = Polynomial([3 * eps / 8, 3 / (4 * eps), -1 / (8 * eps ** 3)])
    q = Polynomial([0.0, 1.0])
    dpsi = psi.deriv()
    a = 2 * dpsi
    lap = 4 * dpsi + 4 * q * dpsi.deriv()
    return a * a * q + psi * lap


def check_weight_identities(eps: float, sample_count: int = 10_000, seed: int = 0) -> IdentityReport:
    """Evaluate the closed-form identities of psi_eps on random points of B_eps.

    Each residual is relative to the largest magnitude among the terms that
    enter the identity, so cancellation near zeros of the closed forms does
    not inflate it.  Identities:

    ``energy_defect``  psi (3/(2eps) - q/(2eps^3)) - |grad psi|^2
                       = 3/(16 eps^6) (eps^2 - q)^2 (3 eps^2 - q) >= 0
    ``directional``    (g.grad psi)^2 - psi (g.x)^2 / eps^3
                       = (g.x)^2 3/(8 eps^6) (eps^2 - q)(5 eps^2 - q)
    ``energy_gradient`` grad(|grad psi|^2 + psi Lap psi)
                       = 3/(8 eps^6)[20 eps^4 - 36 eps^2 q + 8 q^2] x,
                       with the bracket term between -3/eps^2 and 15/eps^2
    ``radial_defect``  psi - x.grad psi = 3/(8 eps^3) (eps^2 - q)^2 >= 0
    """
    _check_eps(eps)
    if sample_count < 1000:
        raise ValidationError("identity check needs at least 1000 samples")
    rng = np.random.default_rng(seed)
    rad = eps * np.sqrt(rng.uniform(0.0, 1.0, sample_count))
    th = rng.uniform(0.0, 2 * np.pi, sample_count)
    x = np.stack([rad * np.cos(th), rad * np.sin(th)], axis=-1)
    # the centre and the matching circle are always included
    x = np.concatenate([x, [[0.0, 0.0], [eps, 0.0], [0.0, -eps]]])
    # points on the circle belong to the quartic branch by continuity
    x = x * np.minimum(1.0, (1 - 1e-16) * eps / np.maximum(np.hypot(x[:, 0], x[:, 1]), 1e-300))[:, None]
    S = len(x)
    q = np.einsum("ij,ij->i", x, x)
    e2, e3, e6 = eps ** 2, eps ** 3, eps ** 6
    psi, g, _, _ = psi_derivatives(x, eps)
    a = 1.5 / eps - 0.5 * q / e3
    gg = np.einsum("ij,ij->i", g, g)

    rep = IdentityReport(eps=eps, samples=S, seed=seed)

    lhs = psi * a - gg
    rhs = 3 / (16 * e6) * (e2 - q) ** 2 * (3 * e2 - q)
    scale = np.maximum.reduce([np.abs(psi * a), gg, np.abs(rhs)])
    rep.entries["energy_defect"] = _entry(lhs, rhs, scale, lhs < -1e-13 * scale, S)

    v = rng.standard_normal((S, 2))
    vg = np.einsum("ij,ij->i", v, g)
    vx = np.einsum("ij,ij->i", v, x)
    lhs = vg ** 2 - psi * vx ** 2 / e3
    rhs = vx ** 2 * 3 / (8 * e6) * (e2 - q) * (5 * e2 - q)
    scale = np.maximum.reduce([vg ** 2, psi * vx ** 2 / e3, np.abs(rhs)])
    rep.entries["directional"] = _entry(lhs, rhs, scale, rhs < -1e-13 * scale, S)

    F = _gradient_energy_polynomial(eps)
    dF = F.deriv()(q)
    lhs_vec = 2 * dF[:, None] * x
    terms = np.stack([20 * eps ** 4 * np.ones_like(q), -36 * e2 * q, 8 * q * q], axis=-1)
    bracket = 3 / (8 * e6) * terms.sum(axis=-1)
    rhs_vec = bracket[:, None] * x
    rn = np.linalg.norm(x, axis=1)
    scale = 3 / (8 * e6) * np.abs(terms).sum(axis=-1) * rn
    diff = np.linalg.norm(lhs_vec - rhs_vec, axis=1)
    res = diff / np.where(scale > 0, scale, 1.0)
    lo, hi = -3 / e2, 15 * (2 + 2) / (8 * e2)
    slack = 1e-12 * hi
    bad = (bracket < lo - slack) | (bracket > hi + slack)
    rep.entries["energy_gradient"] = {"max_residual": float(np.max(res)),
                                      "sign_violations": int(np.count_nonzero(bad)),
                                      "samples": S,
                                      "bracket_min": float(bracket.min()),
                                      "bracket_max": float(bracket.max()),
                                      "bracket_bounds": [lo, hi]}

    xg = np.einsum("ij,ij->i", x, g)
    lhs = psi - xg
    rhs = 3 / (8 * e3) * (e2 - q) ** 2
    scale = np.maximum.reduce([psi, np.abs(xg), rhs])
    rep.entries["radial_defect"] = _entry(lhs, rhs, scale, lhs < -1e-13 * scale, S)
    return rep


# ------------------------------------------------------------ A_p constants

_GL_CACHE: dict = {}


def _gauss(n):
    if n not in _GL_CACHE:
        _GL_CACHE[n] = np.polynomial.legendre.leggauss(n)
    return _GL_CACHE[n]


def _radial_moment(spec: WeightSpec, beta: float, rho, nodes: int):
    """G(rho) = int_0^rho psi(r)^beta r dr for an array of radii."""
    rho = np.asarray(rho, dtype=float)
    if spec.kind == "constant":
        return 0.5 * rho ** 2
    if spec.kind == "degenerate":
        return rho ** (beta + 2) / (beta + 2)
    eps = spec.epsilon
    t, wt = _gauss(nodes)
    inner = np.minimum(rho, eps)
    # Gauss-Legendre on [0, inner] for each radius
    r = 0.5 * inner[..., None] * (t + 1.0)
    vals = psi_eps(r, eps).value ** beta * r
    G = 0.5 * inner * (vals @ wt)
    outer = np.maximum(rho, eps)
    return G + (outer ** (beta + 2) - eps ** (beta + 2)) / (beta + 2)


def _corner_integral(spec, beta, a, b, nodes):
    """Integral of psi^beta over [0, a] x [0, b] (origin at the corner)."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    t, wt = _gauss(nodes)
    out = np.zeros(np.broadcast(a, b).shape)
    pos = (a > 0) & (b > 0)
    if not np.any(pos):
        return out
    a, b = np.broadcast_to(a, out.shape)[pos], np.broadcast_to(b, out.shape)[pos]
    total = np.zeros(a.shape)
    for p, q in ((a, b), (b, a)):
        top = np.arctan2(q, p)
        th = 0.5 * top[:, None] * (t + 1.0)
        G = _radial_moment(spec, beta, p[:, None] / np.cos(th), nodes)
        total += 0.5 * top * (G @ wt)
    out[pos] = total
    return out


def _rect_integral(spec, beta, x0, x1, y0, y1, nodes):
    """Integral of psi^beta over rectangles by signed corner decomposition."""
    def F(x, y):
        return np.sign(x) * np.sign(y) * _corner_integral(spec, beta, np.abs(x), np.abs(y), nodes)
    return F(x1, y1) - F(x0, y1) - F(x1, y0) + F(x0, y0)


def _tensor_average(spec, beta, cx, cy, half, nodes):
    t, wt = _gauss(nodes)
    xs = cx[:, None] + half[:, None] * t
    ys = cy[:, None] + half[:, None] * t
    r = np.hypot(xs[:, :, None], ys[:, None, :])
    vals = spec.radial_power(r, beta)
    return 0.25 * np.einsum("i,kij,j->k", wt, vals, wt)


@dataclass(frozen=True)
class CubeFamily:
    """Random axis-aligned squares inside (-L, L)^2.

    Side lengths are log-uniform in [min_side, 2L]; a fraction of the squares
    is placed so that it contains the origin, the rest have uniform centres.
    """

    count: int = 512
    half_width: float = 1.0
    min_side: float = 1e-4
    near_origin_fraction: float = 0.5
    seed: int = 0

    def sample(self):
        rng = np.random.default_rng(self.seed)
        L = self.half_width
        side = np.exp(rng.uniform(np.log(self.min_side), np.log(2 * L), self.count))
        half = 0.5 * side
        near = rng.uniform(size=self.count) < self.near_origin_fraction
        c = np.where(near[:, None], rng.uniform(-1, 1, (self.count, 2)) * half[:, None],
                     rng.uniform(-L, L, (self.count, 2)))
        c = np.clip(c, -L + half[:, None], L - half[:, None])
        return c[:, 0], c[:, 1], half


def ap_products(spec: WeightSpec, p: float = 2.0, family: CubeFamily | None = None,
                nodes: int = 64) -> np.ndarray:
    """A_p products (mean w)(mean w^{-1/(p-1)})^{p-1} over a cube family.

    Squares well separated from the origin use 64 x 64 tensor Gauss-Legendre;
    squares close to it are integrated exactly in polar coordinates around
    the origin (corner decomposition), which never evaluates the weight at 0.
    """
    if p <= 1:
        raise ValidationError("A_p needs p > 1")
    family = family or CubeFamily()
    if spec.kind == "constant":
        return np.ones(family.count)
    beta = -1.0 / (p - 1.0)
    if spec.kind == "degenerate" and spec.alpha * -beta >= 2.0:
        raise ValidationError("not an A_p weight for this p: the dual average diverges at the origin")
    cx, cy, half = family.sample()
    dist = np.hypot(np.maximum(np.abs(cx) - half, 0), np.maximum(np.abs(cy) - half, 0))
    far = dist > half
    mean_w = np.empty(family.count)
    mean_d = np.empty(family.count)
    if np.any(far):
        mean_w[far] = _tensor_average(spec, spec.alpha, cx[far], cy[far], half[far], nodes)
        mean_d[far] = _tensor_average(spec, spec.alpha * beta, cx[far], cy[far], half[far], nodes)
    nf = ~far
    if np.any(nf):
        area = (2 * half[nf]) ** 2
        box = (cx[nf] - half[nf], cx[nf] + half[nf], cy[nf] - half[nf], cy[nf] + half[nf])
        mean_w[nf] = _rect_integral(spec, spec.alpha, *box, nodes) / area
        mean_d[nf] = _rect_integral(spec, spec.alpha * beta, *box, nodes) / area
    return mean_w * mean_d ** (p - 1.0)


def estimate_ap_constant(spec: WeightSpec, p: float = 2.0, family: CubeFamily | None = None,
                         nodes: int = 64) -> float:
    """Largest A_p product over the sampled cube family (a lower estimate)."""
    return float(np.max(ap_products(spec, p, family, nodes)))


def ball_weight_mass(spec: WeightSpec, radius: float, nodes: int = 64) -> float:
    """Integral of the weight over the disc of the given radius."""
    return float(2 * np.pi * _radial_moment(spec, spec.alpha, np.array([radius]), nodes)[0])
