"""Lowest eigenpairs of the generalized problem K phi = lambda M phi."""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
import scipy.linalg as sl

from .errors import ConvergenceError, ValidationError
from .linalg import pcg


@dataclass
class SpectralResult:
    values: np.ndarray          # ascending
    vectors: np.ndarray         # (dim, count), M-orthonormal columns
    residuals: np.ndarray       # ||K phi - lambda M phi||_{M^-1} / lambda
    iterations: int
    history: list

    def as_dict(self) -> dict:
        return {"eigenvalues": self.values.tolist(), "relative_residuals": self.residuals.tolist(),
                "iterations": self.iterations}

    def to_json(self, **kw) -> str:
        return json.dumps(self.as_dict(), **kw)


def _mdiag(M):
    d = np.asarray(M.diagonal(), dtype=float)
    if np.any(d <= 0):
        raise ValidationError("mass matrix must be a positive diagonal")
    return d


def lowest_eigenpairs(K, M, count: int = 2, tol: float = 1e-8, max_outer: int = 500,
                      guard: int = 4, seed: int = 0, inner_tol: float | None = None) -> SpectralResult:
    """Block inverse iteration with Rayleigh-Ritz for the ``count`` smallest
    eigenpairs of K phi = lambda M phi (K SPD, M positive diagonal).

    Each outer step solves K Y = M X with conjugate gradients, then
    M-orthonormalizes the block and rotates it by a Rayleigh-Ritz step.
    ``guard`` extra vectors speed up convergence of the wanted ones.
    Convergence: ||K phi - lambda M phi||_{M^-1} <= tol * lambda.
    Eigenvectors are signed so that their largest-magnitude entry is positive.
    """
    if not 1 <= count <= 12:
        raise ValidationError(f"count must lie in [1, 12], got {count}")
    d = _mdiag(M)
    dim = K.shape[0]
    b = min(count + guard, dim)
    inner_tol = inner_tol if inner_tol is not None else min(1e-3 * tol, 1e-10)
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((dim, b))
    history = []
    kdiag = K.diagonal()
    for it in range(1, max_outer + 1):
        Y, _ = pcg(K, d[:, None] * X, tol=inner_tol, diag=kdiag)
        # Rayleigh-Ritz on span(Y)
        KY = K @ Y
        A = Y.T @ KY
        B = Y.T @ (d[:, None] * Y)
        A = 0.5 * (A + A.T)
        B = 0.5 * (B + B.T)
        vals, C = sl.eigh(A, B)
        X = Y @ C
        KX = KY @ C
        R = KX - (d[:, None] * X) * vals
        res = np.sqrt(np.sum(R * R / d[:, None], axis=0)) / np.abs(vals)
        history.append(res[:count].tolist())
        if np.all(res[:count] <= tol):
            break
    else:
        raise ConvergenceError(f"inverse iteration did not converge in {max_outer} outer steps", history)
    X = X[:, :count]
    idx = np.argmax(np.abs(X), axis=0)
    X = X * np.sign(X[idx, np.arange(count)])
    return SpectralResult(vals[:count].copy(), X, res[:count].copy(), it, history)


def rayleigh_quotients(K, M, vectors):
    d = _mdiag(M)
    V = np.asarray(vectors, dtype=float)
    if V.ndim == 1:
        V = V[:, None]
    return np.einsum("ij,ij->j", V, K @ V) / np.einsum("ij,ij->j", V, d[:, None] * V)
