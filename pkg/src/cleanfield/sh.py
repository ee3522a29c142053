"""Real spherical harmonics: basis evaluation, direction sampling, least-squares
fitting, and low/high-degree target splitting."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import linalg

from .errors import InvalidInputError, InvalidSplitError, SingularFitError, UnderDeterminedError

MAX_DEGREE = 4
UNIT_NORM_TOL = 1e-6
PIVOT_TOL = 1e-12

# Orthonormal real SH constants (all-positive Cartesian polynomial form).
SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
SH_C2 = (
    1.0925484305920792,
    1.0925484305920792,
    0.31539156525252005,
    1.0925484305920792,
    0.5462742152960396,
)
SH_C3 = (
    0.5900435899266435,
    2.890611442640554,
    0.4570457994644658,
    0.3731763325901154,
    0.4570457994644658,
    1.445305721320277,
    0.5900435899266435,
)
SH_C4 = (
    2.5033429417967046,
    1.7701307697799304,
    0.9461746957575601,
    0.6690465435572892,
    0.10578554691520431,
    0.6690465435572892,
    0.47308734787878004,
    1.7701307697799304,
    0.6258357354491761,
)


def basis_size(l_max: int) -> int:
    return (l_max + 1) ** 2


def degree_count(split_degree: int) -> int:
    """Number of basis entries with degree <= split_degree."""
    return (split_degree + 1) ** 2


def sh_basis_matrix(dirs: np.ndarray, l_max: int) -> np.ndarray:
    """Evaluate the basis at many unit directions; rows ordered (0,0), (1,-1),
    (1,0), (1,1), (2,-2), ...

    ``dirs``: (N, 3) unit vectors. Returns (N, L) with L = (l_max+1)^2.
    """
    dirs = np.asarray(dirs, dtype=np.float64)
    if dirs.ndim != 2 or dirs.shape[1] != 3:
        raise InvalidInputError("directions must have shape (N, 3)")
    if not 0 <= l_max <= MAX_DEGREE:
        raise InvalidInputError(f"l_max must be in [0, {MAX_DEGREE}], got {l_max}")
    norms = np.linalg.norm(dirs, axis=1)
    if np.any(np.abs(norms - 1.0) > UNIT_NORM_TOL):
        raise InvalidInputError("directions must be unit-norm")

    n = dirs.shape[0]
    out = np.empty((n, basis_size(l_max)), dtype=np.float64)
    x, y, z = dirs[:, 0], dirs[:, 1], dirs[:, 2]
    out[:, 0] = SH_C0
    if l_max >= 1:
        out[:, 1] = SH_C1 * y
        out[:, 2] = SH_C1 * z
        out[:, 3] = SH_C1 * x
    if l_max >= 2:
        xx, yy, zz = x * x, y * y, z * z
        xy, yz, xz = x * y, y * z, x * z
        out[:, 4] = SH_C2[0] * xy
        out[:, 5] = SH_C2[1] * yz
        out[:, 6] = SH_C2[2] * (2.0 * zz - xx - yy)
        out[:, 7] = SH_C2[3] * xz
        out[:, 8] = SH_C2[4] * (xx - yy)
    if l_max >= 3:
        out[:, 9] = SH_C3[0] * y * (3.0 * xx - yy)
        out[:, 10] = SH_C3[1] * xy * z
        out[:, 11] = SH_C3[2] * y * (4.0 * zz - xx - yy)
        out[:, 12] = SH_C3[3] * z * (2.0 * zz - 3.0 * xx - 3.0 * yy)
        out[:, 13] = SH_C3[4] * x * (4.0 * zz - xx - yy)
        out[:, 14] = SH_C3[5] * z * (xx - yy)
        out[:, 15] = SH_C3[6] * x * (xx - 3.0 * yy)
    if l_max >= 4:
        out[:, 16] = SH_C4[0] * xy * (xx - yy)
        out[:, 17] = SH_C4[1] * yz * (3.0 * xx - yy)
        out[:, 18] = SH_C4[2] * xy * (7.0 * zz - 1.0)
        out[:, 19] = SH_C4[3] * yz * (7.0 * zz - 3.0)
        out[:, 20] = SH_C4[4] * (zz * (35.0 * zz - 30.0) + 3.0)
        out[:, 21] = SH_C4[5] * xz * (7.0 * zz - 3.0)
        out[:, 22] = SH_C4[6] * (xx - yy) * (7.0 * zz - 1.0)
        out[:, 23] = SH_C4[7] * xz * (xx - 3.0 * yy)
        out[:, 24] = SH_C4[8] * (xx * (xx - 3.0 * yy) - yy * (3.0 * xx - yy))
    return out


def eval_sh_basis(d: np.ndarray, l_max: int) -> np.ndarray:
    """Basis values at a single unit direction, shape (L,)."""
    d = np.asarray(d, dtype=np.float64)
    if d.shape != (3,):
        raise InvalidInputError("direction must be a 3-vector")
    return sh_basis_matrix(d[None, :], l_max)[0]


def sample_directions(n: int) -> np.ndarray:
    """Deterministic Fibonacci-sphere set of ``n`` unit vectors, shape (n, 3)."""
    if n < 1:
        raise InvalidInputError(f"need at least one direction, got {n}")
    i = np.arange(n, dtype=np.float64)
    z = 1.0 - (2.0 * i + 1.0) / n
    phi = i * (math.pi * (3.0 - math.sqrt(5.0)))
    r = np.sqrt(np.clip(1.0 - z * z, 0.0, None))
    dirs = np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=1)
    # Re-normalize to keep norms exact under accumulated rounding.
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    return dirs


@dataclass(frozen=True)
class ShFit:
    """Least-squares fit result for one channel."""

    coefficients: np.ndarray  # (L,)
    l_max: int
    residual: float  # squared 2-norm of s - Y @ coefficients


@dataclass(frozen=True)
class DecompositionTargets:
    """Per-position supervision targets for the vi/vd split."""

    c_vi_target: np.ndarray  # (channels,)
    c_vd_target: np.ndarray  # (N, channels)


def sh_normal_factor(basis: np.ndarray):
    """Cholesky factor of Y^T Y with a pivot check; reusable across channels."""
    gram = basis.T @ basis
    try:
        factor = linalg.cho_factor(gram)
    except linalg.LinAlgError as exc:
        raise SingularFitError(f"normal matrix not positive definite: {exc}") from exc
    pivots = np.diag(factor[0]) ** 2
    if np.min(pivots) < PIVOT_TOL:
        raise SingularFitError(f"normal-matrix pivot {np.min(pivots):.3e} below {PIVOT_TOL:.0e}")
    return factor


def fit_sh(s: np.ndarray, dirs: np.ndarray, l_max: int) -> ShFit:
    """Fit SH coefficients to one channel of per-direction samples.

    Solves min_k ||s - Y k||_2^2 through the normal equations with a Cholesky
    factorization of Y^T Y.
    """
    s = np.asarray(s, dtype=np.float64)
    dirs = np.asarray(dirs, dtype=np.float64)
    if s.ndim != 1 or s.shape[0] != dirs.shape[0]:
        raise InvalidInputError("samples must be one value per direction")
    length = basis_size(l_max)
    if s.shape[0] < length:
        raise UnderDeterminedError(f"{s.shape[0]} samples cannot determine {length} coefficients")
    basis = sh_basis_matrix(dirs, l_max)
    factor = sh_normal_factor(basis)
    coeffs = linalg.cho_solve(factor, basis.T @ s)
    resid = s - basis @ coeffs
    return ShFit(coefficients=coeffs, l_max=l_max, residual=float(resid @ resid))


def split_targets(fits, dirs: np.ndarray, split_degree: int) -> DecompositionTargets:
    """Split fitted coefficients into a scalar low-degree mean (per channel) and
    per-direction high-degree reconstructions.

    ``fits``: one ShFit per color channel, identical l_max.
    """
    fits = list(fits)
    if not fits:
        raise InvalidInputError("need at least one channel fit")
    l_max = fits[0].l_max
    if any(f.l_max != l_max for f in fits):
        raise InvalidInputError("channel fits disagree on l_max")
    if split_degree < 0 or split_degree >= l_max:
        raise InvalidSplitError(
            f"split_degree must be in [0, l_max), got {split_degree} with l_max {l_max}"
        )
    basis = sh_basis_matrix(dirs, l_max)
    low = degree_count(split_degree)
    coeffs = np.stack([f.coefficients for f in fits], axis=1)  # (L, channels)
    low_recon = basis[:, :low] @ coeffs[:low]  # (N, channels)
    high_recon = basis[:, low:] @ coeffs[low:]
    return DecompositionTargets(
        c_vi_target=low_recon.mean(axis=0),
        c_vd_target=high_recon,
    )
