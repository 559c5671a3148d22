"""Observability constants and penalized HUM null controls.

Notation on interior vectors: S = (M + dt K)^{-1} M is one implicit Euler
step (symmetric, since the mass is h^2 I).  A backward solution with g = 0
and terminal value z_T has levels z^n = S^{M-n} z_T; the forward solution
driven by f has phi^{n+1} = S(phi^n + dt chi f^{n+1}).  Discrete duality

    <phi^M, z_T> = <phi^0, z^0> + dt sum_{j=1..M} <chi f^j, z^{j-1}>

makes f^j = chi z^{j-1} the HUM control, and the Gram operator

    Lam z_T = forward(f^j = chi z^{j-1}, phi^0 = 0)(T),
    <Lam z_T, z_T> = dt sum_{n=0..M-1} |chi z^n|^2,

is symmetric positive semidefinite.  All inner products are mass inner
products; the common factor h^2 cancels in quotients.
"""
from __future__ import annotations

import hashlib
import json
import math
import os
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sl
from scipy.sparse.linalg import LinearOperator

from . import __version__
from .errors import ConvergenceError, ValidationError
from .geometry import region_mask
from .linalg import pcg
from .parabolic import ProblemSpec, backward_vectors, forward_vectors

BETA_RANGE = (1e-8, 1e-1)
OBS_DELTA = 1e-10


def _chi(p: ProblemSpec, region=None):
    if region is None:
        return p.chi
    return p.grid.restrict(region_mask(p.grid, region)).astype(float)


def control_from_adjoint(z, chi):
    """f^j = chi z^{j-1} for j = 1..M, f^0 = 0 (vectors, (M+1, m[, k]))."""
    f = np.zeros_like(z)
    c = chi if z.ndim == 2 else chi[:, None]
    f[1:] = c * z[:-1]
    return f


def _free_terminal(p: ProblemSpec, x, steps: int | None = None):
    """S^steps x (default steps = M)."""
    steps = p.time.M if steps is None else steps
    h2 = p.mass_diag
    for _ in range(steps):
        x = p.stepper.solve(h2 * x, x0=x)
    return x


def gram_apply(p: ProblemSpec, zT, chi=None):
    """Lam z_T and the observed energy dt sum |chi z^n|^2 (per column)."""
    z = backward_vectors(p, None, zT)
    if chi is not None and chi is not p.chi:
        return _gram_general(p, z, chi)
    chi = p.chi
    phi = forward_vectors(p, control_from_adjoint(z, chi), np.zeros_like(zT))
    obs = p.time.dt * p.mass_diag * np.sum((chi if z.ndim == 2 else chi[:, None]) * z[:-1] ** 2, axis=(0, 1))
    return phi[-1], obs


def _gram_general(p, z, chi):
    """Gram operator for a mask that is not contained in the control set."""
    M, dt, h2 = p.time.M, p.time.dt, p.mass_diag
    c = chi if z.ndim == 2 else chi[:, None]
    x = np.zeros_like(z[0])
    for n in range(M):
        x = p.stepper.solve(h2 * (x + dt * c * z[n]), x0=x)
    obs = dt * h2 * np.sum(c * z[:-1] ** 2, axis=(0, 1))
    return x, obs


# ------------------------------------------------------------ observability

@dataclass
class ObservabilityEstimate:
    constant: float
    extremal: np.ndarray           # field
    history: list
    converged: bool
    delta: float
    tag: dict

    def as_dict(self) -> dict:
        return {"constant": self.constant, "converged": self.converged, "delta": self.delta,
                "iterations": len(self.history), **self.tag}

    def to_json(self, **kw) -> str:
        return json.dumps(self.as_dict(), **kw)


def observability_quotient(p: ProblemSpec, uT, delta: float = OBS_DELTA, region=None) -> float:
    """|u(0)|^2 / (dt sum_{n<M} |chi u^n|^2 + delta |u_T|^2) for one terminal datum."""
    chi = _chi(p, region)
    x = np.asarray(uT, dtype=float)
    x = p.grid.restrict(x) if x.shape == p.grid.shape else x
    if not np.any(x):
        raise ValidationError("quotient undefined for zero terminal data")
    u0 = _free_terminal(p, x)
    _, obs = gram_apply(p, x, chi)
    num = p.mass_diag * float(u0 @ u0)
    return num / (float(obs) + delta * p.mass_diag * float(x @ x))


def _step_spectrum(p: ProblemSpec):
    """Eigenpairs of the stiffness (K = Q diag(kappa) Q^T) and log of the step factors."""
    kappa, Q = sl.eigh(p.stiffness.toarray())
    log_s = -np.log1p(p.time.dt * kappa / p.mass_diag)
    return Q, log_s


def _reduced_pencil(p: ProblemSpec, chi, delta: float, cutoff: float = 1e-32):
    """Pencil (N, D) in the stiffness eigenbasis, reduced to the range of N.

    With S = Q diag(s) Q^T one has N = Q diag(s^{2M}) Q^T and
    Lam = Q [(Q^T chi Q) o G] Q^T,  G_ab = dt sum_{j=1..M} (s_a s_b)^j.
    Modes with s^{2M} below ``cutoff`` times the largest one do not reach
    u(0) and are dropped from the numerator only.  Returns the reduced
    symmetric matrix Nr^{1/2} D^{-1} Nr^{1/2}, the matrix Z = D^{-1} Nr^{1/2}
    mapping reduced coordinates to terminal data, and Q.
    """
    M, dt = p.time.M, p.time.dt
    Q, log_s = _step_spectrum(p)
    D = Q.T @ (chi[:, None] * Q)
    lr = log_s[:, None] + log_s[None, :]
    D *= dt * np.exp(lr) * np.expm1(M * lr) / np.expm1(lr)
    D[np.diag_indices_from(D)] += delta
    lognum = 2 * M * log_s
    keep = np.flatnonzero(lognum >= lognum.max() + math.log(cutoff))
    E = np.zeros((D.shape[0], keep.size))
    E[keep, np.arange(keep.size)] = np.exp(0.5 * lognum[keep])
    Z = sl.cho_solve(sl.cho_factor(D, overwrite_a=True), E)
    G = E.T @ Z
    return 0.5 * (G + G.T), Z, Q


def observability_constant(p: ProblemSpec, max_iters: int = 200, tol: float = 1e-10, delta: float = OBS_DELTA,
                           region=None, seed: int = 0) -> ObservabilityEstimate:
    """Largest q(u_T) over terminal data.

    The pencil (N, D), N = S^{2M} and D = Lam + delta I, is formed exactly in
    the stiffness eigenbasis and reduced to the slow modes that reach u(0);
    power iteration on the reduced symmetric matrix gives the top value.
    The reported constant is the quotient recomputed by time stepping at
    the returned datum.  Stagnation returns the best iterate with
    ``converged = False``.  Dense in the number of unknowns: meant for
    n <= 65.
    """
    if delta <= 0:
        raise ValidationError("delta must be positive")
    m = p.grid.n_interior
    if m > 5000:
        raise ValidationError(f"observability estimate is dense; n = {p.grid.n} is too large (n <= 71)")
    chi = _chi(p, region)
    G, Z, Q = _reduced_pencil(p, chi, delta)
    rng = np.random.default_rng(seed)
    y = rng.standard_normal(G.shape[0])
    y /= np.linalg.norm(y)
    history, mu, converged = [], 0.0, False
    for _ in range(max_iters):
        Gy = G @ y
        mu_new = float(y @ Gy)
        res = float(np.linalg.norm(Gy - mu_new * y))
        history.append({"value": mu_new, "residual": res / max(mu_new, 1e-300)})
        if res <= tol * mu_new and abs(mu_new - mu) <= tol * mu_new:
            mu, converged = mu_new, True
            break
        mu = mu_new
        y = Gy / np.linalg.norm(Gy)
    x = Q @ (Z @ y)
    x = x / np.max(np.abs(x)) * np.sign(x[np.argmax(np.abs(x))])
    q = observability_quotient(p, x, delta, region)
    tag = {"n": p.grid.n, "M": p.time.M, "T": p.time.T, "alpha": p.weight.alpha,
           "weight": p.weight.kind, "eps": p.weight.epsilon, "modes": int(G.shape[0]),
           "pencil_value": mu}
    return ObservabilityEstimate(q, p.grid.extend(x), history, converged, delta, tag)


def observability_dense(p: ProblemSpec, delta: float = OBS_DELTA, region=None) -> float:
    """Oracle: assemble N and D column by column and solve the dense pencil."""
    chi = _chi(p, region)
    m = p.grid.n_interior
    if m > 2000:
        raise ValidationError("dense observability oracle is for small grids only")
    I = np.eye(m)
    N = _free_terminal(p, I, 2 * p.time.M)
    D = gram_apply(p, I, chi)[0] + delta * I
    N = 0.5 * (N + N.T)
    D = 0.5 * (D + D.T)
    return float(sl.eigh(N, D, eigvals_only=True, subset_by_index=[m - 1, m - 1])[0])


# ------------------------------------------------------------ HUM

def _vec(p: ProblemSpec, u):
    u = np.asarray(u, dtype=float)
    return p.grid.restrict(u) if u.shape == p.grid.shape else u


def hum_cost(zT, p: ProblemSpec, phi0, beta: float) -> float:
    """J(z_T) = 1/2 dt sum |chi z^n|^2 + beta/2 |z_T|^2 + <phi0, z^0>."""
    x, y0 = _vec(p, zT), _vec(p, phi0)
    z = backward_vectors(p, None, x)
    h2, dt = p.mass_diag, p.time.dt
    obs = dt * h2 * float(np.sum(p.chi * z[:-1] ** 2))
    return 0.5 * obs + 0.5 * beta * h2 * float(x @ x) + h2 * float(y0 @ z[0])


def hum_gradient(zT, p: ProblemSpec, phi0, beta: float):
    """Mass-inner-product gradient of J: phi(T) + beta z_T, with phi driven by chi z."""
    if beta <= 0:
        raise ValidationError("beta must be positive")
    x, y0 = _vec(p, zT), _vec(p, phi0)
    z = backward_vectors(p, None, x)
    phi = forward_vectors(p, control_from_adjoint(z, p.chi), y0)
    return p.grid.extend(phi[-1] + beta * x)


@dataclass
class HUMResult:
    zT: np.ndarray
    control: np.ndarray            # (M+1, n, n), zero outside omega, level 0 unused
    trajectory: np.ndarray         # (M+1, n, n)
    terminal_norm: float
    initial_norm: float
    free_terminal_norm: float
    cost: float
    control_norm_sq: float
    iterations: int
    beta: float
    residual: float
    history: list = field(default_factory=list)

    @property
    def relative_terminal(self) -> float:
        return self.terminal_norm / self.initial_norm if self.initial_norm > 0 else 0.0

    def summary(self, config_hash: str | None = None) -> dict:
        return {
            "beta": self.beta,
            "terminal_norm": self.terminal_norm,
            "initial_norm": self.initial_norm,
            "relative_terminal_norm": self.relative_terminal,
            "free_terminal_norm": self.free_terminal_norm,
            "J": self.cost,
            "control_norm_sq": self.control_norm_sq,
            "iterations": self.iterations,
            "cg_relative_residual": self.residual,
            "config_hash": config_hash,
            "version": __version__,
        }

    def save(self, base, config_hash: str | None = None) -> dict:
        """Write ``base.npy`` (trajectory), ``base_control.npy`` and ``base.json``."""
        base = os.fspath(base)
        np.save(base + ".npy", self.trajectory)
        np.save(base + "_control.npy", self.control)
        s = self.summary(config_hash)
        with open(base + ".json", "w") as fh:
            json.dump(s, fh, indent=2, sort_keys=True)
        return s


def hum_solve(p: ProblemSpec, phi0, beta: float, tol: float = 1e-8, maxiter: int | None = None) -> HUMResult:
    """Penalized HUM: CG on (Lam + beta I) z_T = -S^M phi0, control f = chi z.

    The terminal state is recomputed by a fresh forward solve with the
    returned control.
    """
    lo, hi = BETA_RANGE
    if not lo <= beta <= hi:
        raise ValidationError(f"beta = {beta:g} outside [{lo:g}, {hi:g}] (ill-conditioned below the floor)")
    y0 = _vec(p, phi0)
    h2 = p.mass_diag
    free = _free_terminal(p, y0)
    m = p.grid.n_interior

    def op(X):
        X = np.asarray(X, dtype=float).reshape(m, -1)
        return gram_apply(p, X)[0] + beta * X

    A = LinearOperator((m, m), matvec=op, matmat=op, dtype=float)
    if not np.any(y0):
        x, it, hist, res = np.zeros(m), 0, [0.0], 0.0
    else:
        try:
            x, it = pcg(A, -free, tol=tol, maxiter=maxiter or 10 * m, diag=np.ones(m))
        except ConvergenceError as err:
            raise ConvergenceError(f"HUM conjugate gradients failed at beta = {beta:g}: {err}", err.history)
        r = -free - op(x[:, None])[:, 0]
        res = float(np.linalg.norm(r) / np.linalg.norm(free))
        hist = []
    z = backward_vectors(p, None, x)
    f = control_from_adjoint(z, p.chi)
    phi = forward_vectors(p, f, y0)
    dt = p.time.dt
    fn2 = dt * h2 * float(np.sum((p.chi * f[1:]) ** 2))
    J = 0.5 * dt * h2 * float(np.sum(p.chi * z[:-1] ** 2)) + 0.5 * beta * h2 * float(x @ x) + h2 * float(y0 @ z[0])
    g = p.grid
    return HUMResult(
        zT=g.extend(x), control=g.extend(f), trajectory=g.extend(phi),
        terminal_norm=math.sqrt(h2 * float(phi[-1] @ phi[-1])),
        initial_norm=math.sqrt(h2 * float(y0 @ y0)),
        free_terminal_norm=math.sqrt(h2 * float(free @ free)),
        cost=J, control_norm_sq=fn2, iterations=int(it), beta=float(beta), residual=res, history=hist,
    )


def beta_sweep(p: ProblemSpec, phi0, betas, tol: float = 1e-8) -> list:
    return [hum_solve(p, phi0, b, tol) for b in betas]


def config_digest(obj) -> str:
    """Short SHA-256 digest of a JSON-serializable description."""
    blob = json.dumps(obj, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]
