"""Implicit Euler time stepping for the forward (controlled) equation

    phi_t - div(w grad phi) = chi_omega f,   phi = 0 on the boundary,

and for the backward adjoint equation u_t + div(w grad u) = g with terminal
data.  The backward scheme is the exact transpose of the forward one in the
mass inner product, so discrete duality identities hold to solver accuracy.

Trajectories are arrays of shape ``(M + 1, n, n)`` indexed by time level.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass
from functools import cached_property

import numpy as np

from . import __version__
from .errors import ValidationError
from .geometry import DomainSpec, Grid, build_grid, region_mask
from .linalg import ShiftedSolver
from .operators import assemble_mass, assemble_stiffness
from .weights import WeightSpec


@dataclass(frozen=True)
class TimeGrid:
    T: float
    M: int

    def __post_init__(self):
        if not self.T > 0:
            raise ValidationError(f"time horizon must be positive, got {self.T}")
        if int(self.M) != self.M or self.M < 8:
            raise ValidationError(f"number of time steps must be an integer >= 8, got {self.M}")
        object.__setattr__(self, "M", int(self.M))

    @property
    def dt(self) -> float:
        return self.T / self.M

    @property
    def times(self):
        return np.linspace(0.0, self.T, self.M + 1)


class ProblemSpec:
    """Domain, grid, weight, time grid and linear-solver settings.

    Operators, the control mask and the step solver are built lazily and
    cached; the object is not mutated otherwise.
    """

    def __init__(self, domain: DomainSpec, grid: Grid, weight: WeightSpec, time: TimeGrid,
                 tol: float = 1e-10, solver: str = "cg"):
        if grid.spec is not domain and grid.spec != domain:
            raise ValidationError("grid was built for a different domain")
        if solver not in ("cg", "direct"):
            raise ValidationError(f"unknown linear solver {solver!r}")
        if not 0 < tol < 1:
            raise ValidationError(f"solver tolerance must lie in (0, 1), got {tol}")
        self.domain = domain
        self.grid = grid
        self.weight = weight
        self.time = time
        self.tol = tol
        self.solver = solver

    @classmethod
    def build(cls, domain: DomainSpec, n: int, weight: WeightSpec, T: float, M: int, **kw):
        return cls(domain, build_grid(domain, n), weight, TimeGrid(T, M), **kw)

    def with_weight(self, weight: WeightSpec) -> "ProblemSpec":
        return ProblemSpec(self.domain, self.grid, weight, self.time, self.tol, self.solver)

    @cached_property
    def stiffness(self):
        return assemble_stiffness(self.grid, self.weight)

    @cached_property
    def mass(self):
        return assemble_mass(self.grid)

    @cached_property
    def mass_diag(self) -> float:
        return self.grid.h ** 2

    @cached_property
    def control_mask(self):
        return region_mask(self.grid, "control")

    @cached_property
    def chi(self):
        """Control indicator on interior unknowns."""
        return self.grid.restrict(self.control_mask).astype(float)

    @cached_property
    def stepper(self) -> ShiftedSolver:
        return ShiftedSolver(self.stiffness, self.mass, self.time.dt, self.solver, self.tol)

    def inner(self, a, b):
        """Mass inner product of interior vectors (broadcast over leading axes)."""
        return self.mass_diag * np.sum(np.asarray(a) * np.asarray(b), axis=-1)

    def describe(self) -> dict:
        return {
            "n": self.grid.n, "M": self.time.M, "T": self.time.T, "L": self.domain.half_width,
            "alpha": self.weight.alpha, "eps": self.weight.epsilon, "weight": self.weight.kind,
            "solver": self.solver, "tol": self.tol,
        }


def _interior(p: ProblemSpec, u):
    u = np.asarray(u, dtype=float)
    if u.shape[-2:] == p.grid.shape:
        return p.grid.restrict(u)
    if u.shape[-1] == p.grid.n_interior:
        return u
    raise ValidationError(f"array of shape {u.shape} is not a field on the n={p.grid.n} grid")


def forward_vectors(p: ProblemSpec, f, phi0):
    """Forward stepping on interior vectors.

    ``phi0`` has shape (m,) or (m, k) for k simultaneous runs; ``f`` is
    ``None`` or an array (M+1, m[, k]) of which level n+1 drives step
    n -> n+1.  The control indicator is applied here.  Returns (M+1, m[, k]).
    """
    M, dt = p.time.M, p.time.dt
    out = np.empty((M + 1,) + phi0.shape)
    out[0] = phi0
    h2 = p.mass_diag
    chi = p.chi if phi0.ndim == 1 else p.chi[:, None]
    for n in range(M):
        rhs = out[n] if f is None else out[n] + dt * chi * f[n + 1]
        out[n + 1] = p.stepper.solve(h2 * rhs, x0=out[n])
    return out


def backward_vectors(p: ProblemSpec, g, uT):
    """Backward stepping (M + dt K) u^n = M u^{n+1} - dt M g^n on vectors."""
    M, dt = p.time.M, p.time.dt
    out = np.empty((M + 1,) + uT.shape)
    out[M] = uT
    h2 = p.mass_diag
    for n in range(M - 1, -1, -1):
        rhs = out[n + 1] if g is None else out[n + 1] - dt * g[n]
        out[n] = p.stepper.solve(h2 * rhs, x0=out[n + 1])
    return out


def solve_forward(p: ProblemSpec, f, phi0):
    """Controlled forward trajectory (M+1, n, n).

    ``f`` is ``None`` (no control) or a trajectory-shaped array; only its
    values on the control set matter and level n+1 acts on step n -> n+1.
    """
    phi0 = _interior(p, phi0)
    fv = None if f is None else _interior(p, f)
    if fv is not None and fv.shape[0] != p.time.M + 1:
        raise ValidationError("control must have M + 1 time levels")
    return p.grid.extend(forward_vectors(p, fv, phi0))


def solve_backward(p: ProblemSpec, g, uT):
    """Backward adjoint trajectory (M+1, n, n) from terminal data ``uT``."""
    uT = _interior(p, uT)
    gv = None if g is None else _interior(p, g)
    if gv is not None and gv.shape[0] != p.time.M + 1:
        raise ValidationError("source must have M + 1 time levels")
    return p.grid.extend(backward_vectors(p, gv, uT))


def energy_trace(traj, p: ProblemSpec, f=None) -> dict:
    """Per-level energies and the per-step energy identity residual.

    For implicit Euler the step identity reads

        1/2 |phi^{n+1}|^2 - 1/2 |phi^n|^2 + dt a(phi^{n+1}, phi^{n+1})
            - dt <chi f^{n+1}, phi^{n+1}> = -1/2 |phi^{n+1} - phi^n|^2 <= 0,

    with mass norms and a(.,.) the stiffness form.  ``residual`` holds the
    left side for n = 0..M-1 and ``defect`` the identity's mismatch
    (left side plus the dissipation 1/2 |phi^{n+1} - phi^n|^2).
    """
    V = _interior(p, traj)
    K = p.stiffness
    l2sq = p.inner(V, V)
    h1sq = np.einsum("ij,ij->i", V, (K @ V.T).T)
    dt = p.time.dt
    res = 0.5 * l2sq[1:] - 0.5 * l2sq[:-1] + dt * h1sq[1:]
    if f is not None:
        F = _interior(p, f) * p.chi
        res -= dt * p.inner(F[1:], V[1:])
    dV = np.diff(V, axis=0)
    defect = res + 0.5 * p.inner(dV, dV)
    return {"t": p.time.times, "l2_sq": l2sq, "weighted_h1_semi_sq": h1sq, "residual": res, "defect": defect}


def energy_bound(traj, p: ProblemSpec, f=None) -> dict:
    """Both sides of the energy estimate with C = max(2m/alpha, 1).

    lhs = max_n |phi^n|^2 + sum_n dt a(phi^{n+1}, phi^{n+1}),
    rhs = C (|phi^0|^2 + sum_n dt |chi f^{n+1}|^2).
    """
    tr = energy_trace(traj, p, f)
    dt = p.time.dt
    lhs = float(np.max(tr["l2_sq"]) + dt * np.sum(tr["weighted_h1_semi_sq"][1:]))
    src = 0.0
    if f is not None:
        F = _interior(p, f) * p.chi
        src = float(dt * np.sum(p.inner(F[1:], F[1:])))
    alpha = p.weight.alpha if p.weight.kind != "constant" else p.domain.alpha
    C = max(2.0 * p.domain.m / alpha, 1.0)
    return {"lhs": lhs, "rhs": C * (float(tr["l2_sq"][0]) + src), "C": C}


def export_trajectory(path, traj, p: ProblemSpec, extra: dict | None = None) -> dict:
    """Write ``path.npy`` and ``path.json`` (manifest); returns the manifest."""
    base = os.fspath(path)
    if base.endswith(".npy"):
        base = base[:-4]
    np.save(base + ".npy", np.asarray(traj))
    manifest = {
        "n": p.grid.n, "M": p.time.M, "T": p.time.T, "L": p.domain.half_width,
        "alpha": p.weight.alpha, "eps": p.weight.epsilon, "weight": p.weight.kind,
        "shape": list(np.shape(traj)), "version": __version__,
    }
    if extra:
        manifest.update(extra)
    with open(base + ".json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    return manifest


def load_trajectory(path):
    base = os.fspath(path)
    if base.endswith(".npy"):
        base = base[:-4]
    with open(base + ".json") as fh:
        manifest = json.load(fh)
    return np.load(base + ".npy"), manifest
