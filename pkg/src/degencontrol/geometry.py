"""Square domain, control region and vertex-centered grid.

The domain is the open square (-L, L)^2.  Grids are vertex centered with an
odd number of vertices per axis so that the origin, where the diffusion
coefficient degenerates, is a grid vertex.  Fields are stored as ``(n, n)``
arrays indexed ``[i, j]`` with ``x = xs[i]`` and ``y = xs[j]``; boundary
values are zero (homogeneous Dirichlet data) and only interior vertices are
unknowns of the linear algebra.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError

# relative tolerance for closed-set membership tests
_MEMBERSHIP_RTOL = 1e-12


@dataclass(frozen=True)
class DomainSpec:
    """Geometry of the control problem.

    Parameters
    ----------
    half_width : L, the domain is (-L, L)^2.
    alpha : degeneracy exponent of |x|^alpha, in (0, 2).
    control_center, control_radius : the control set omega is the open box
        (or ball, with ``control_shape="ball"``) of radius rho around x0.
    origin_ball_radius : R, radius of the ball around the degeneracy on which
        the Carleman auxiliary function has closed form.
    """

    half_width: float = 1.0
    alpha: float = 1.0
    control_center: tuple = (0.6, 0.0)
    control_radius: float = 0.2
    origin_ball_radius: float = 0.1
    control_shape: str = "box"

    def __post_init__(self):
        object.__setattr__(self, "control_center",
                           tuple(float(c) for c in self.control_center))
        problems = self.problems()
        if problems:
            raise ValidationError("invalid domain: " + "; ".join(problems))

    def problems(self) -> list[str]:
        """Return the list of violated constraints (empty when valid)."""
        out = []
        L, a, rho, R = self.half_width, self.alpha, self.control_radius, self.origin_ball_radius
        if not L > 0:
            out.append(f"half_width must be positive, got {L}")
            return out
        if not 0.0 < a < 2.0:
            out.append(f"alpha must lie in (0, 2), got {a}")
        if len(self.control_center) != 2:
            out.append("control_center must be a 2-vector")
            return out
        if self.control_shape not in ("box", "ball"):
            out.append(f"control_shape must be 'box' or 'ball', got {self.control_shape!r}")
        if not rho > 0:
            out.append(f"control_radius must be positive, got {rho}")
        if not R > 0:
            out.append(f"origin_ball_radius must be positive, got {R}")
        if out:
            return out
        x0 = np.asarray(self.control_center)
        if np.max(np.abs(x0)) + rho >= L:
            out.append("control set must lie strictly inside the domain")
        if self.control_distance_to_origin() <= 0.0:
            out.append("control set must stay at positive distance from the origin")
        if 8.0 * R >= L * (1.0 + _MEMBERSHIP_RTOL):
            out.append(f"ball of radius 8R = {8 * R:g} must lie inside the domain")
        if np.hypot(*x0) < 6.0 * R * (1.0 - _MEMBERSHIP_RTOL):
            out.append("balls of radius 3R around the origin and around the control center must be disjoint")
        hat = 2.0 * R
        if (self.control_shape == "box" and hat > rho * (1.0 + _MEMBERSHIP_RTOL)) or (self.control_shape == "ball" and hat >= rho):
            out.append(f"ball of radius 2R = {hat:g} around the control center must fit in the control set")
        return out

    def warnings(self) -> list[str]:
        """Soft geometric conditions used by the limit Carleman estimate."""
        out = []
        x0 = np.asarray(self.control_center)
        R3 = 3.0 * self.origin_ball_radius
        if self.control_shape == "box":
            inside = R3 <= self.control_radius
        else:
            inside = R3 < self.control_radius
        if not inside:
            out.append(f"ball of radius 3R = {R3:g} around {tuple(x0)} is not contained in the control set")
        return out

    def control_distance_to_origin(self) -> float:
        x0 = np.abs(np.asarray(self.control_center))
        if self.control_shape == "box":
            return float(np.hypot(*np.maximum(x0 - self.control_radius, 0.0)))
        return float(max(np.hypot(*x0) - self.control_radius, 0.0))

    @property
    def m(self) -> float:
        """sup |x| over the domain plus one."""
        return math.sqrt(2.0) * self.half_width + 1.0

    def control_region(self):
        if self.control_shape == "box":
            return Box(self.control_center, self.control_radius)
        return Ball(self.control_center, self.control_radius)

    def control_core(self):
        """Ball of radius 2R around the control center."""
        return Ball(self.control_center, 2.0 * self.origin_ball_radius)

    def origin_ball(self, factor: float = 1.0):
        return Ball((0.0, 0.0), factor * self.origin_ball_radius)

    def as_dict(self) -> dict:
        return {
            "half_width": self.half_width,
            "alpha": self.alpha,
            "control_center": list(self.control_center),
            "control_radius": self.control_radius,
            "origin_ball_radius": self.origin_ball_radius,
            "control_shape": self.control_shape,
        }


# ---------------------------------------------------------------- regions

@dataclass(frozen=True)
class Ball:
    center: tuple
    radius: float

    def contains(self, X, Y):
        r = np.hypot(X - self.center[0], Y - self.center[1])
        return r <= self.radius * (1.0 + _MEMBERSHIP_RTOL)

    def extent(self) -> float:
        return max(abs(self.center[0]), abs(self.center[1])) + self.radius


@dataclass(frozen=True)
class Box:
    """Axis-aligned square of half side ``half_width``."""

    center: tuple
    half_width: float

    def contains(self, X, Y):
        d = np.maximum(np.abs(X - self.center[0]), np.abs(Y - self.center[1]))
        return d <= self.half_width * (1.0 + _MEMBERSHIP_RTOL)

    def extent(self) -> float:
        return max(abs(self.center[0]), abs(self.center[1])) + self.half_width


@dataclass(frozen=True)
class Annulus:
    center: tuple
    inner: float
    outer: float

    def contains(self, X, Y):
        r = np.hypot(X - self.center[0], Y - self.center[1])
        return (r >= self.inner * (1.0 - _MEMBERSHIP_RTOL)) & (r <= self.outer * (1.0 + _MEMBERSHIP_RTOL))

    def extent(self) -> float:
        return max(abs(self.center[0]), abs(self.center[1])) + self.outer


@dataclass(frozen=True)
class Whole:
    def contains(self, X, Y):
        return np.ones(np.shape(X), dtype=bool)

    def extent(self) -> float:
        return 0.0


# ---------------------------------------------------------------- grid

@dataclass(frozen=True, eq=False)
class Grid:
    """Uniform vertex-centered grid on [-L, L]^2 with n vertices per axis."""

    spec: DomainSpec
    n: int
    h: float = field(init=False)
    xs: np.ndarray = field(init=False, repr=False)
    X: np.ndarray = field(init=False, repr=False)
    Y: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        n, L = self.n, self.spec.half_width
        c = (n - 1) // 2
        # symmetric construction keeps the origin exactly zero
        xs = L * (np.arange(n) - c) / c
        X, Y = np.meshgrid(xs, xs, indexing="ij")
        for a in (xs, X, Y):
            a.setflags(write=False)
        object.__setattr__(self, "h", 2.0 * L / (n - 1))
        object.__setattr__(self, "xs", xs)
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "Y", Y)

    @property
    def L(self) -> float:
        return self.spec.half_width

    @property
    def origin_index(self) -> tuple:
        c = (self.n - 1) // 2
        return (c, c)

    @property
    def n_interior(self) -> int:
        return (self.n - 2) ** 2

    @property
    def shape(self) -> tuple:
        return (self.n, self.n)

    def radius(self):
        return np.hypot(self.X, self.Y)

    def interior_mask(self):
        m = np.zeros(self.shape, dtype=bool)
        m[1:-1, 1:-1] = True
        return m

    def restrict(self, u):
        """Interior values of a field (or a stack of fields) as flat vectors."""
        u = np.asarray(u)
        inner = u[..., 1:-1, 1:-1]
        return inner.reshape(u.shape[:-2] + (self.n_interior,))

    def extend(self, v):
        """Field(s) with zero boundary from interior vector(s)."""
        v = np.asarray(v)
        k = self.n - 2
        out = np.zeros(v.shape[:-1] + self.shape, dtype=v.dtype)
        out[..., 1:-1, 1:-1] = v.reshape(v.shape[:-1] + (k, k))
        return out

    def zero_field(self):
        return np.zeros(self.shape)

    def sample(self, func):
        """Evaluate ``func(X, Y)`` and zero the boundary."""
        u = np.array(func(self.X, self.Y), dtype=float)
        u[0, :] = u[-1, :] = u[:, 0] = u[:, -1] = 0.0
        return u

    def describe(self) -> dict:
        return {"n": self.n, "h": self.h, "L": self.L}


def build_grid(spec: DomainSpec, n: int) -> Grid:
    """Vertex-centered grid with ``n`` (odd, at least 9) vertices per axis."""
    if int(n) != n:
        raise ValidationError(f"vertex count must be an integer, got {n}")
    n = int(n)
    if n % 2 == 0:
        raise ValidationError(f"even vertex count {n}: the origin would not be a grid vertex")
    if n < 9:
        raise ValidationError(f"vertex count {n} is below the minimum of 9")
    return Grid(spec, n)


def region_mask(grid: Grid, region) -> np.ndarray:
    """Boolean field marking the vertices of the closed region.

    ``region`` is a region object (``Ball``, ``Box``, ``Annulus``, ``Whole``)
    or one of the names ``"control"`` (omega), ``"control_core"`` (ball of
    radius 2R around x0), ``"origin_ball"`` (ball of radius R) and ``"whole"``.
    """
    spec = grid.spec
    named = isinstance(region, str)
    if named:
        lookup = {
            "control": spec.control_region,
            "control_core": spec.control_core,
            "origin_ball": spec.origin_ball,
            "whole": Whole,
        }
        if region not in lookup:
            raise ValidationError(f"unknown region name {region!r}")
        kind = region
        region = lookup[region]()
    else:
        kind = None
    if region.extent() > grid.L * (1.0 + _MEMBERSHIP_RTOL):
        raise ValidationError(f"region {region} extends outside the domain")
    mask = np.asarray(region.contains(grid.X, grid.Y), dtype=bool)
    if kind in ("control", "control_core"):
        if mask[grid.origin_index]:
            raise ValidationError("control mask contains the origin")
        if not mask.any():
            raise ValidationError(f"control mask is empty on the n={grid.n} grid")
    mask.setflags(write=False)
    return mask
