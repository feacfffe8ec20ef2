"""Closed-form canonical correlation analysis.

Used as the reference optimum for linear two-view correlation: no linear
projection pair can beat the canonical correlations on the data they were
fitted on.
"""

import numpy as np


def _inv_sqrt(cov):
    evals, evecs = np.linalg.eigh(cov)
    if evals.min() <= 0:
        raise np.linalg.LinAlgError("singular covariance after ridge")
    return (evecs / np.sqrt(evals)) @ evecs.T


def cca_oracle(X, Y, k, ridge=1e-6):
    """Top-``k`` canonical correlations and directions of ``X`` and ``Y``.

    Returns
    -------
    corrs : ndarray [k]
        Sorted descending, clipped to [0, 1].
    directions : tuple (Wx [Dx, k], Wy [Dy, k], mean_x, mean_y)
        ``(X - mean_x) @ Wx`` and ``(Y - mean_y) @ Wy`` are the canonical
        variates.
    """
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    n, dx = X.shape
    dy = Y.shape[1]
    if Y.shape[0] != n:
        raise ValueError("X and Y must have the same number of rows")
    if n <= max(dx, dy):
        raise ValueError(f"need more samples ({n}) than dimensions ({max(dx, dy)})")
    if not 1 <= k <= min(dx, dy):
        raise ValueError(f"k must be in 1..{min(dx, dy)}")
    mx, my = X.mean(0), Y.mean(0)
    Xc, Yc = X - mx, Y - my
    cxx = Xc.T @ Xc / (n - 1) + ridge * np.eye(dx)
    cyy = Yc.T @ Yc / (n - 1) + ridge * np.eye(dy)
    cxy = Xc.T @ Yc / (n - 1)
    wx, wy = _inv_sqrt(cxx), _inv_sqrt(cyy)
    u, s, vt = np.linalg.svd(wx @ cxy @ wy)
    corrs = np.clip(s[:k], 0.0, 1.0)
    return corrs, (wx @ u[:, :k], wy @ vt[:k].T, mx, my)


def columnwise_correlation(A, B):
    """Pearson correlation between matching columns of ``A`` and ``B``."""
    A = np.asarray(A, dtype=np.float64)
    B = np.asarray(B, dtype=np.float64)
    a = A - A.mean(0)
    b = B - B.mean(0)
    den = np.sqrt((a * a).sum(0) * (b * b).sum(0))
    return np.where(den > 0, (a * b).sum(0) / np.where(den > 0, den, 1.0), 0.0)
