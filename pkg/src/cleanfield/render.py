"""Ray sampling, volume-rendering quadrature, per-ray geometry correction, and
image assembly."""
from __future__ import annotations

from dataclasses import dataclass, field as dc_field

import numpy as np

from .cameras import CameraPose, pixel_rays
from .errors import InvalidInputError
from .field import VoxelField, clamp01, interpolate_group, logistic, relu, trilinear_weights
from .image import Image
from .sh import sh_basis_matrix

# Relative thresholds bottom out here so near-empty profiles stay untouched.
THRESHOLD_FLOOR = 1e-3

RENDER_CHUNK_RAYS = 1024


@dataclass(frozen=True)
class Ray:
    origin: np.ndarray
    direction: np.ndarray
    near: float
    far: float

    def __post_init__(self):
        object.__setattr__(self, "origin", np.asarray(self.origin, dtype=np.float64))
        object.__setattr__(self, "direction", np.asarray(self.direction, dtype=np.float64))
        if abs(np.linalg.norm(self.direction) - 1.0) > 1e-6:
            raise InvalidInputError("ray direction must be unit-norm")
        if not 0.0 <= self.near < self.far:
            raise InvalidInputError(f"need 0 <= near < far, got {self.near}, {self.far}")


@dataclass
class DensityProfile:
    """Sampled densities along one ray; delta_k = t_{k+1} - t_k with the last
    entry capped."""

    t: np.ndarray
    sigma: np.ndarray
    delta: np.ndarray

    def __post_init__(self):
        self.t = np.asarray(self.t, dtype=np.float64)
        self.sigma = np.asarray(self.sigma, dtype=np.float64)
        self.delta = np.asarray(self.delta, dtype=np.float64)
        if not (self.t.shape == self.sigma.shape == self.delta.shape) or self.t.ndim != 1:
            raise InvalidInputError("t, sigma, delta must be equal-length 1-D arrays")
        if np.any(np.diff(self.t) <= 0.0):
            raise InvalidInputError("sample depths must be strictly increasing")
        if np.any(self.sigma < 0.0) or np.any(self.delta < 0.0):
            raise InvalidInputError("sigma and delta must be non-negative")


@dataclass(frozen=True)
class CorrectionParams:
    """Threshold scan parameters; relative mode thresholds against the profile
    max (with the absolute floor), absolute mode uses sigma_thres directly."""

    sigma_thres: float = 0.1
    m: int = 2
    relative_mode: bool = True

    def __post_init__(self):
        if self.m < 0:
            raise InvalidInputError(f"margin m must be non-negative, got {self.m}")
        if self.relative_mode:
            if not 0.0 < self.sigma_thres <= 1.0:
                raise InvalidInputError(f"relative sigma_thres must be in (0, 1], got {self.sigma_thres}")
        elif self.sigma_thres <= 0.0:
            raise InvalidInputError(f"absolute sigma_thres must be positive, got {self.sigma_thres}")


@dataclass(frozen=True)
class PixelEstimate:
    """Initial and final color estimates for one ray, with the final branch's
    per-sample weights and transmittance."""

    c_initial: np.ndarray
    c_final: np.ndarray
    weights: np.ndarray
    transmittance: np.ndarray


@dataclass(frozen=True)
class RenderOptions:
    n_samples: int = 64
    stratified: bool = True
    seed: int = 0
    near: float = 0.5
    far: float = 3.5
    correction: CorrectionParams | None = dc_field(
        default_factory=lambda: CorrectionParams(sigma_thres=0.4, m=1)
    )
    vi_only: bool = False


def sample_depths(near, far, k, count, stratified, rng=None):
    """Quadrature depths for ``count`` rays: bin centers, or one uniform draw
    per bin when stratified. Returns (t, delta), each (count, k)."""
    if k < 2:
        raise InvalidInputError(f"need at least 2 samples per ray, got {k}")
    width = (far - near) / k
    edges = near + width * np.arange(k)
    if stratified:
        if rng is None:
            rng = np.random.default_rng(0)
        offsets = rng.random((count, k))
    else:
        offsets = np.full((count, k), 0.5)
    t = edges + width * offsets
    delta = np.empty_like(t)
    delta[:, :-1] = np.diff(t, axis=1)
    delta[:, -1] = width  # last step has no successor; capped at the bin width
    return t, delta


def sample_ray(ray: Ray, k: int, stratified: bool = False, seed: int = 0) -> DensityProfile:
    """Depth/step skeleton for one ray (sigma left at zero)."""
    rng = np.random.default_rng(seed)
    t, delta = sample_depths(ray.near, ray.far, k, 1, stratified, rng)
    return DensityProfile(t=t[0], sigma=np.zeros(k), delta=delta[0])


def correct_sigma(sigma: np.ndarray, params: CorrectionParams):
    """Vectorized threshold scan over the trailing axis.

    Returns (corrected, keep) where keep marks retained samples; rows with no
    sample above threshold are returned unchanged (keep all-true).
    """
    sigma = np.asarray(sigma, dtype=np.float64)
    k = sigma.shape[-1]
    if params.relative_mode:
        thres = np.maximum(params.sigma_thres * sigma.max(axis=-1, keepdims=True), THRESHOLD_FLOOR)
    else:
        thres = np.full(sigma.shape[:-1] + (1,), params.sigma_thres)
    salient = sigma > thres
    has_peak = salient.any(axis=-1)
    k_front = np.argmax(salient, axis=-1)
    k_back = k - 1 - np.argmax(salient[..., ::-1], axis=-1)
    positions = np.arange(k)
    keep = (positions >= (k_front - params.m)[..., None]) & (positions <= (k_back + params.m)[..., None])
    keep |= ~has_peak[..., None]
    return np.where(keep, sigma, 0.0), keep


def correct_density(profile: DensityProfile, params: CorrectionParams) -> DensityProfile:
    """Zero densities outside the [k_front - m, k_back + m] salient window."""
    corrected, _ = correct_sigma(profile.sigma[None, :], params)
    return DensityProfile(t=profile.t.copy(), sigma=corrected[0], delta=profile.delta.copy())


def composite_batch(sigma: np.ndarray, colors: np.ndarray, delta: np.ndarray):
    """Quadrature compositing: T_k = exp(-sum_{k'<k} sigma delta), weight_k =
    T_k (1 - exp(-sigma_k delta_k)). Returns (rgb, weights, transmittance)."""
    if np.any(sigma < 0.0) or np.any(delta < 0.0):
        raise InvalidInputError("sigma and delta must be non-negative")
    # Contiguous colors pin the einsum reduction path so that channel
    # permutations of the input permute the output bit-exactly.
    colors = np.ascontiguousarray(colors)
    optical = sigma * delta
    accum = np.cumsum(optical, axis=-1)
    transmittance = np.exp(-(accum - optical))  # exclusive prefix sum
    weights = transmittance * (-np.expm1(-optical))
    rgb = np.einsum("...k,...kc->...c", weights, colors)
    return rgb, weights, transmittance


def composite(sigma, colors, delta):
    """Single-ray compositing; see composite_batch."""
    sigma = np.asarray(sigma, dtype=np.float64)
    colors = np.asarray(colors, dtype=np.float64)
    delta = np.asarray(delta, dtype=np.float64)
    if not (sigma.shape[0] == colors.shape[0] == delta.shape[0]):
        raise InvalidInputError("sigma, colors, delta must have equal length")
    rgb, weights, transmittance = composite_batch(sigma[None], colors[None], delta[None])
    return rgb[0], weights[0], transmittance[0]


def eval_field_on_rays(field: VoxelField, origins, dirs, t):
    """Activated field values at every quadrature point of a ray batch.

    origins/dirs are (B, 3); t is (B, K). All samples on a ray share its
    direction. Returns a dict of (B, K, ...) arrays.
    """
    b, k = t.shape
    pts = origins[:, None, :] + t[..., None] * dirs[:, None, :]
    idx, w, _ = trilinear_weights(field, pts.reshape(-1, 3))

    sigma0 = relu(interpolate_group(field.density_raw, idx, w)).reshape(b, k)
    c_vi = logistic(interpolate_group(field.c_vi_raw, idx, w)).reshape(b, k, 3)
    gamma = logistic(interpolate_group(field.gamma_raw, idx, w)).reshape(b, k)

    y = sh_basis_matrix(dirs, field.l_max)  # (B, L)
    sh_c0 = interpolate_group(field.sh_c0, idx, w).reshape(b, k, field.basis_count, 3)
    c0 = clamp01(np.einsum("bl,bklc->bkc", y, sh_c0))
    sh_vd = interpolate_group(field.sh_vd, idx, w).reshape(b, k, field.high_count, 3)
    c_vd = np.einsum("bl,bklc->bkc", y[:, field.low_count:], sh_vd)

    c_final = gamma[..., None] * c_vi + (1.0 - gamma[..., None]) * c_vd
    return {
        "sigma0": sigma0,
        "c0": c0,
        "c_vi": c_vi,
        "c_vd": c_vd,
        "gamma": gamma,
        "c_final": c_final,
    }


def render_rays(field: VoxelField, origins, dirs, t, delta, opts: RenderOptions):
    """Both compositing branches for a ray batch with precomputed depths.

    Returns (c_initial (B,3), c_final (B,3), weights (B,K), transmittance (B,K));
    weights and transmittance belong to the final (corrected) branch.
    """
    vals = eval_field_on_rays(field, origins, dirs, t)
    c_init, _, _ = composite_batch(vals["sigma0"], vals["c0"], delta)
    if opts.correction is not None:
        sigma_final, _ = correct_sigma(vals["sigma0"], opts.correction)
    else:
        sigma_final = vals["sigma0"]
    colors = vals["c_vi"] if opts.vi_only else vals["c_final"]
    c_fin, weights, transmittance = composite_batch(sigma_final, colors, delta)
    return c_init, c_fin, weights, transmittance


def render_ray(field: VoxelField, ray: Ray, opts: RenderOptions) -> PixelEstimate:
    """Full pipeline for a single ray: initial estimate from (sigma0, c0),
    corrected density, final estimate from (sigma, c_final)."""
    rng = np.random.default_rng(opts.seed)
    t, delta = sample_depths(ray.near, ray.far, opts.n_samples, 1, opts.stratified, rng)
    c_init, c_fin, weights, transmittance = render_rays(
        field, ray.origin[None, :], ray.direction[None, :], t, delta, opts
    )
    return PixelEstimate(
        c_initial=c_init[0], c_final=c_fin[0], weights=weights[0], transmittance=transmittance[0]
    )


def render_image(field: VoxelField, camera: CameraPose, opts: RenderOptions) -> Image:
    """One ray per pixel; deterministic for a given opts.seed."""
    origins, dirs = pixel_rays(camera)
    n = origins.shape[0]
    rng = np.random.default_rng(opts.seed)
    # Jitter for the whole image drawn up front so chunking cannot affect it.
    t, delta = sample_depths(opts.near, opts.far, opts.n_samples, n, opts.stratified, rng)
    out = np.empty((n, 3))
    for start in range(0, n, RENDER_CHUNK_RAYS):
        stop = min(start + RENDER_CHUNK_RAYS, n)
        _, c_fin, _, _ = render_rays(
            field, origins[start:stop], dirs[start:stop], t[start:stop], delta[start:stop], opts
        )
        out[start:stop] = c_fin
    w, h = camera.resolution
    return Image(out.reshape(h, w, 3))
