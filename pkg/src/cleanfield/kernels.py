"""Hot-loop kernels for the trainer: subset gather/scatter through trilinear
corners and the per-row Adam update.

All kernels run serially in a fixed order so results are bit-reproducible.
numpy fallbacks keep the package functional without numba.
"""
from __future__ import annotations

import math

import numpy as np

try:
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - exercised only without numba
    HAVE_NUMBA = False

    def njit(*args, **kwargs):
        def wrap(fn):
            return fn

        if args and callable(args[0]):
            return args[0]
        return wrap


@njit(cache=True)
def _gather_rows_jit(theta, idx, w, rows, out):
    for i in range(rows.shape[0]):
        r = rows[i]
        for c in range(theta.shape[1]):
            out[i, c] = 0.0
        for j in range(8):
            base = idx[r, j]
            ww = w[r, j]
            for c in range(theta.shape[1]):
                out[i, c] += ww * theta[base, c]


@njit(cache=True)
def _scatter_rows_jit(grad, idx, w, rows, vals):
    for i in range(rows.shape[0]):
        r = rows[i]
        for j in range(8):
            base = idx[r, j]
            ww = w[r, j]
            for c in range(grad.shape[1]):
                grad[base, c] += ww * vals[i, c]


@njit(cache=True)
def _adam_rows_jit(theta, m, v, steps, rows, grads, lr, beta1, beta2, eps):
    for i in range(rows.shape[0]):
        r = rows[i]
        steps[r] += 1
        t = steps[r]
        bc1 = 1.0 - beta1**t
        bc2 = 1.0 - beta2**t
        for c in range(theta.shape[1]):
            g = grads[i, c]
            m[r, c] = beta1 * m[r, c] + (1.0 - beta1) * g
            v[r, c] = beta2 * v[r, c] + (1.0 - beta2) * g * g
            theta[r, c] -= lr * (m[r, c] / bc1) / (math.sqrt(v[r, c] / bc2) + eps)


def gather_rows(theta: np.ndarray, idx: np.ndarray, w: np.ndarray, rows: np.ndarray) -> np.ndarray:
    """Trilinear gather of ``theta`` (nvox, C) at sample subset ``rows``."""
    out = np.empty((rows.shape[0], theta.shape[1]))
    if HAVE_NUMBA:
        _gather_rows_jit(theta, idx, w, rows, out)
        return out
    out[:] = 0.0
    for j in range(8):
        out += w[rows, j, None] * theta[idx[rows, j]]
    return out


def scatter_rows(grad: np.ndarray, idx: np.ndarray, w: np.ndarray, rows: np.ndarray, vals: np.ndarray) -> None:
    """Accumulate per-sample gradient rows into voxel gradients, in place."""
    if HAVE_NUMBA:
        _scatter_rows_jit(grad, idx, w, rows, vals)
        return
    for j in range(8):
        np.add.at(grad, idx[rows, j], w[rows, j, None] * vals)


def adam_rows(
    theta: np.ndarray,
    m: np.ndarray,
    v: np.ndarray,
    steps: np.ndarray,
    rows: np.ndarray,
    grads: np.ndarray,
    lr: float,
    beta1: float,
    beta2: float,
    eps: float,
) -> None:
    """Adam step restricted to touched voxel rows; per-row step counts drive
    the bias correction. Rows never touched keep their state untouched."""
    if HAVE_NUMBA:
        _adam_rows_jit(theta, m, v, steps, rows, grads, lr, beta1, beta2, eps)
        return
    steps[rows] += 1
    t = steps[rows].astype(np.float64)[:, None]
    bc1 = 1.0 - beta1**t
    bc2 = 1.0 - beta2**t
    m[rows] = beta1 * m[rows] + (1.0 - beta1) * grads
    v[rows] = beta2 * v[rows] + (1.0 - beta2) * grads**2
    theta[rows] -= lr * (m[rows] / bc1) / (np.sqrt(v[rows] / bc2) + eps)
