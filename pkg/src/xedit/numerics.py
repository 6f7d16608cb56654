"""Dense float64 linear algebra used by the editor.

Matrices are plain 2-D ``numpy.ndarray`` objects.  Every routine checks its
inputs for shape and finiteness and returns float64 results.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NumericalError, ShapeError

__all__ = [
    "EigResult",
    "as_matrix",
    "matmul",
    "sym_eig",
    "solve_spd",
    "MAX_SWEEPS",
    "COND_LIMIT",
]

MAX_SWEEPS = 100
OFF_TOL = 1e-12
SYM_TOL = 1e-9
COND_LIMIT = 1e12


def as_matrix(x, name: str = "matrix") -> np.ndarray:
    """Coerce ``x`` to a finite 2-D float64 array."""
    a = np.asarray(x, dtype=np.float64)
    if a.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise NumericalError(f"{name} contains non-finite values")
    return a


def matmul(a, b) -> np.ndarray:
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape[0]}x{a.shape[1]} by {b.shape[0]}x{b.shape[1]}")
    out = a @ b
    if not np.all(np.isfinite(out)):
        raise NumericalError("matmul produced non-finite values")
    return out


@dataclass(frozen=True)
class EigResult:
    eigenvalues: np.ndarray  # ascending
    eigenvectors: np.ndarray  # columns


def _round_robin(m: int):
    """Yield ``m - 1`` rounds of ``m // 2`` disjoint index pairs covering all pairs once."""
    idx = list(range(m))
    for _ in range(m - 1):
        half = m // 2
        ps = np.array(idx[:half])
        qs = np.array(idx[half:][::-1])
        yield np.minimum(ps, qs), np.maximum(ps, qs)
        idx = [idx[0], idx[-1]] + idx[1:-1]


def sym_eig(s, max_sweeps: int = MAX_SWEEPS, tol: float = OFF_TOL) -> EigResult:
    """Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.

    Rotations are scheduled in round-robin (parallel) order: each round
    annihilates ``n/2`` disjoint off-diagonal pairs at once, which keeps the
    sweep vectorized while preserving the convergence of the cyclic method.
    The input is symmetrized as ``(S + S.T) / 2`` first.
    """
    s = as_matrix(s, "s")
    n, m = s.shape
    if n != m:
        raise ShapeError(f"sym_eig needs a square matrix, got {n}x{m}")
    scale = np.max(np.abs(s)) if s.size else 0.0
    if np.max(np.abs(s - s.T), initial=0.0) > SYM_TOL * max(scale, 1e-300):
        raise ShapeError("sym_eig input is not symmetric within tolerance")
    a = 0.5 * (s + s.T)
    if n <= 1:
        return EigResult(np.diag(a).copy(), np.eye(n))

    size = n + (n % 2)
    if size != n:
        # a decoupled zero row/column pads to an even size; dropped afterwards
        a = np.pad(a, ((0, 1), (0, 1)))
    v = np.eye(size)
    fro = np.linalg.norm(a)
    target = tol * fro

    rounds = list(_round_robin(size))
    sweeps = 0
    while True:
        off = np.linalg.norm(a - np.diag(np.diag(a)))
        if off <= target or fro == 0.0:
            break
        if sweeps >= max_sweeps:
            raise NumericalError(
                f"Jacobi eigensolver did not converge after {sweeps} sweeps "
                f"(off-diagonal norm {off:.3e}, target {target:.3e})"
            )
        for p, q in rounds:
            apq = a[p, q]
            app = a[p, p]
            aqq = a[q, q]
            active = np.abs(apq) > 1e-300
            safe = np.where(active, apq, 1.0)
            theta = (aqq - app) / (2.0 * safe)
            big = np.abs(theta) > 1e150
            th = np.where(big, 1.0, theta)
            t = np.sign(th) / (np.abs(th) + np.sqrt(th * th + 1.0))
            t = np.where(big, 0.5 / np.where(big, theta, 1.0), t)
            t = np.where(theta == 0.0, 1.0, t)
            t = np.where(active, t, 0.0)
            c = 1.0 / np.sqrt(t * t + 1.0)
            sn = t * c

            ap = a[:, p].copy()
            aq = a[:, q]
            a[:, p] = c * ap - sn * aq
            a[:, q] = sn * ap + c * aq
            ap = a[p, :].copy()
            aq = a[q, :]
            a[p, :] = c[:, None] * ap - sn[:, None] * aq
            a[q, :] = sn[:, None] * ap + c[:, None] * aq

            vp = v[:, p].copy()
            vq = v[:, q]
            v[:, p] = c * vp - sn * vq
            v[:, q] = sn * vp + c * vq
        sweeps += 1

    # the padding index never mixes with the others (its couplings stay zero)
    lam = np.diag(a)[:n].copy()
    vecs = v[:n, :n]
    order = np.argsort(lam, kind="stable")
    return EigResult(lam[order], vecs[:, order])


def solve_spd(a, b, cond_limit: float = COND_LIMIT) -> np.ndarray:
    """Solve ``a @ x = b`` with a condition-number guard.

    Symmetry is not required; the editor's system matrix is ``I`` plus
    PSD-times-projector terms and is solved with LU.
    """
    a = as_matrix(a, "a")
    b = np.asarray(b, dtype=np.float64)
    vector = b.ndim == 1
    b = as_matrix(b[:, None] if vector else b, "b")
    n, m = a.shape
    if n != m:
        raise ShapeError(f"solve needs a square system matrix, got {n}x{m}")
    if b.shape[0] != n:
        raise ShapeError(f"right-hand side has {b.shape[0]} rows, system has {n}")
    cond = np.linalg.cond(a)
    if not np.isfinite(cond) or cond > cond_limit:
        raise NumericalError(f"system matrix is singular or ill-conditioned (condition estimate {cond:.3e})")
    x = np.linalg.solve(a, b)
    if not np.all(np.isfinite(x)):
        raise NumericalError("linear solve produced non-finite values")
    return x[:, 0] if vector else x
