"""Symmetric eigendecomposition via cyclic Jacobi rotations.

Sized for the Gram matrices this toolkit produces (a few hundred rows at
most). Convergence is declared when the off-diagonal Frobenius norm drops
below 1e-12 times the trace.
"""

import numpy as np

from .errors import EigenConvergenceError

MAX_SWEEPS = 100
REL_TOL = 1e-12


def _off_diagonal_norm(a):
    off = a - np.diag(np.diag(a))
    return float(np.sqrt(np.sum(off * off)))


def jacobi_eigh(matrix, max_sweeps=MAX_SWEEPS):
    """Eigenvalues and eigenvectors of a symmetric matrix.

    Returns (eigenvalues, eigenvectors) with eigenvalues in descending
    order and eigenvectors as matching columns. Raises
    EigenConvergenceError if the sweep cap is reached first.
    """
    a = np.array(matrix, dtype=np.float64)
    n = a.shape[0]
    if a.shape != (n, n):
        raise ValueError(f"expected a square matrix, got shape {a.shape}")
    if n == 1:
        return a[0].copy(), np.ones((1, 1))

    # Tolerance is relative to the trace; PSD inputs have trace >= 0 and a
    # zero-trace PSD matrix is the zero matrix, which is already diagonal.
    tol = REL_TOL * abs(float(np.trace(a)))
    v = np.eye(n)

    sweeps = 0
    while _off_diagonal_norm(a) > tol:
        if sweeps >= max_sweeps:
            raise EigenConvergenceError(sweeps, _off_diagonal_norm(a), tol)
        sweeps += 1
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if abs(apq) <= 1e-300:
                    continue
                # Rotation angle choosing the smaller root keeps |t| <= 1,
                # which is what makes cyclic Jacobi numerically stable.
                theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                t = np.sign(theta) / (abs(theta) + np.sqrt(theta * theta + 1.0))
                if theta == 0.0:
                    t = 1.0
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c

                row_p = a[p, :].copy()
                row_q = a[q, :].copy()
                a[p, :] = c * row_p - s * row_q
                a[q, :] = s * row_p + c * row_q
                col_p = a[:, p].copy()
                col_q = a[:, q].copy()
                a[:, p] = c * col_p - s * col_q
                a[:, q] = s * col_p + c * col_q

                vp = v[:, p].copy()
                vq = v[:, q].copy()
                v[:, p] = c * vp - s * vq
                v[:, q] = s * vp + c * vq

    eigenvalues = np.diag(a).copy()
    order = np.argsort(eigenvalues)[::-1]
    return eigenvalues[order], v[:, order]
