"""Linear solvers: Jacobi-preconditioned conjugate gradients and a cached
sparse LU alternative for the implicit Euler step."""
from __future__ import annotations

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from .errors import ConvergenceError, ValidationError


def pcg(A, b, tol: float = 1e-10, maxiter: int | None = None, x0=None, diag=None):
    """Solve A x = b for SPD ``A`` by Jacobi-preconditioned CG.

    ``b`` may hold several right-hand sides as columns; they are iterated
    together but each column stops being updated once its relative residual
    ||b - A x|| / ||b|| is below ``tol``.  Returns ``(x, iterations)``.
    Raises ``ConvergenceError`` after ``maxiter`` (default 10 * dim) steps.
    """
    b = np.asarray(b, dtype=float)
    single = b.ndim == 1
    B = b[:, None] if single else b
    dim = B.shape[0]
    if maxiter is None:
        maxiter = 10 * dim
    if diag is None:
        diag = A.diagonal()
    if np.any(diag <= 0):
        raise ValidationError("Jacobi preconditioner needs a positive diagonal")
    inv_d = (1.0 / diag)[:, None]
    X = np.zeros_like(B) if x0 is None else np.array(x0, dtype=float).reshape(B.shape)
    bnorm = np.linalg.norm(B, axis=0)
    target = tol * np.where(bnorm > 0, bnorm, 1.0)
    R = B - A @ X if x0 is not None else B.copy()
    rnorm = np.linalg.norm(R, axis=0)
    active = (rnorm > target) & (bnorm > 0)
    X[:, bnorm == 0] = 0.0
    Z = inv_d * R
    P = Z.copy()
    rz = np.einsum("ij,ij->j", R, Z)
    history = [float(np.max(rnorm / np.where(bnorm > 0, bnorm, 1.0)))]
    scale = np.where(bnorm > 0, bnorm, 1.0)
    it = 0
    while np.any(active):
        if it >= maxiter:
            raise ConvergenceError(
                f"CG did not converge in {maxiter} iterations (relative residual {history[-1]:.3e}, "
                f"target {tol:.1e})", history)
        # converged columns get zero steps, which keeps the block contiguous
        AP = A @ P
        pap = np.einsum("ij,ij->j", P, AP)
        step = np.divide(rz, pap, out=np.zeros_like(rz), where=active & (pap != 0))
        X += step * P
        R -= step * AP
        rnorm = np.linalg.norm(R, axis=0)
        Z = inv_d * R
        rz_new = np.einsum("ij,ij->j", R, Z)
        beta = np.divide(rz_new, rz, out=np.zeros_like(rz), where=active & (rz != 0))
        P = np.where(active, Z + beta * P, P)
        rz = np.where(active, rz_new, rz)
        it += 1
        history.append(float(np.max(np.where(active, rnorm / scale, 0.0))))
        active &= rnorm > target
    return (X[:, 0] if single else X), it


class ShiftedSolver:
    """Repeated solves with the SPD matrix ``M + dt K``.

    ``method="cg"`` uses :func:`pcg` to relative residual ``tol``;
    ``method="direct"`` factorizes once with sparse LU (exact up to rounding,
    much faster for the many solves of the control loops).
    """

    def __init__(self, K, M, dt: float, method: str = "cg", tol: float = 1e-10):
        if method not in ("cg", "direct"):
            raise ValidationError(f"unknown linear solver {method!r}")
        self.A = (sp.csr_matrix(M) + dt * sp.csr_matrix(K)).tocsr()
        self.method = method
        self.tol = tol
        self.diag = self.A.diagonal()
        self.iterations = 0
        self._lu = splu(self.A.tocsc()) if method == "direct" else None

    def solve(self, rhs, x0=None):
        if self._lu is not None:
            return self._lu.solve(np.asarray(rhs, dtype=float))
        x, it = pcg(self.A, rhs, tol=self.tol, x0=x0, diag=self.diag)
        self.iterations += it
        return x
