"""Dense trilinear voxel grid holding the radiance-field parameters, plus the
CFLD checkpoint format."""
from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .errors import FormatError, InvalidInputError
from .sh import basis_size, degree_count, eval_sh_basis

CHECKPOINT_MAGIC = b"CFLD"
CHECKPOINT_VERSION = 1

DEFAULT_L_MAX = 3
DEFAULT_SPLIT_DEGREE = 1
DENSITY_RAW_INIT = 0.1
GAMMA_RAW_INIT = 2.0

# Parameter groups in declared (and serialized) order.
PARAM_GROUPS = ("density_raw", "c_vi_raw", "gamma_raw", "sh_c0", "sh_vd")


def relu(x):
    return np.maximum(x, 0.0)


def logistic(x):
    return expit(x)


def clamp01(x):
    return np.clip(x, 0.0, 1.0)


@dataclass
class VoxelField:
    """Trainable voxel grid; raw parameter arrays are flat over voxels with the
    x index fastest (flat = ix + nx*(iy + ny*iz))."""

    resolution: tuple[int, int, int]
    bounds: np.ndarray  # (2, 3): lower and upper corners
    l_max: int
    split_degree: int
    density_raw: np.ndarray  # (nvox,)
    c_vi_raw: np.ndarray  # (nvox, 3)
    gamma_raw: np.ndarray  # (nvox,)
    sh_c0: np.ndarray  # (nvox, L, 3)
    sh_vd: np.ndarray  # (nvox, L_high, 3)

    @property
    def nvox(self) -> int:
        nx, ny, nz = self.resolution
        return nx * ny * nz

    @property
    def basis_count(self) -> int:
        return basis_size(self.l_max)

    @property
    def low_count(self) -> int:
        return degree_count(self.split_degree)

    @property
    def high_count(self) -> int:
        return self.basis_count - self.low_count

    @property
    def spacing(self) -> np.ndarray:
        n = np.array(self.resolution, dtype=np.float64)
        return (self.bounds[1] - self.bounds[0]) / (n - 1.0)

    def groups(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in PARAM_GROUPS}

    def copy(self) -> "VoxelField":
        return VoxelField(
            resolution=self.resolution,
            bounds=self.bounds.copy(),
            l_max=self.l_max,
            split_degree=self.split_degree,
            **{name: arr.copy() for name, arr in self.groups().items()},
        )

    def node_coords(self) -> np.ndarray:
        """World positions of all grid nodes, flat x-fastest order, shape (nvox, 3)."""
        nx, ny, nz = self.resolution
        axes = [
            np.linspace(self.bounds[0][a], self.bounds[1][a], self.resolution[a])
            for a in range(3)
        ]
        zz, yy, xx = np.meshgrid(axes[2], axes[1], axes[0], indexing="ij")
        return np.stack([xx.ravel(), yy.ravel(), zz.ravel()], axis=1)


def init_field(
    resolution,
    bounds,
    seed: int = 0,
    l_max: int = DEFAULT_L_MAX,
    split_degree: int = DEFAULT_SPLIT_DEGREE,
) -> VoxelField:
    """Fresh field: small uniform density, mid-gray c_vi, blend biased toward
    view-independent, zero SH coefficients."""
    resolution = tuple(int(r) for r in resolution)
    if len(resolution) != 3 or any(r < 2 for r in resolution):
        raise InvalidInputError(f"resolution must be >= 2 per axis, got {resolution}")
    bounds = np.asarray(bounds, dtype=np.float64).reshape(2, 3)
    if np.any(bounds[1] - bounds[0] <= 0.0):
        raise InvalidInputError("bounds must have positive extent on every axis")
    if not 0 <= split_degree < l_max:
        raise InvalidInputError(f"need 0 <= split_degree < l_max, got {split_degree}, {l_max}")
    nvox = resolution[0] * resolution[1] * resolution[2]
    length = basis_size(l_max)
    high = length - degree_count(split_degree)
    del seed  # deterministic init; parameter kept for interface stability
    return VoxelField(
        resolution=resolution,
        bounds=bounds,
        l_max=l_max,
        split_degree=split_degree,
        density_raw=np.full(nvox, DENSITY_RAW_INIT),
        c_vi_raw=np.zeros((nvox, 3)),
        gamma_raw=np.full(nvox, GAMMA_RAW_INIT),
        sh_c0=np.zeros((nvox, length, 3)),
        sh_vd=np.zeros((nvox, high, 3)),
    )


def trilinear_weights(field: VoxelField, points: np.ndarray):
    """Corner indices and weights for a batch of points.

    Returns (idx, w, inside): idx (M, 8) flat voxel indices, w (M, 8) weights
    (all-zero rows for points outside bounds), inside (M,) bool mask.
    """
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    nx, ny, nz = self_res = field.resolution
    lo, hi = field.bounds[0], field.bounds[1]
    inside = np.all((points >= lo) & (points <= hi), axis=1)

    n = np.array(self_res, dtype=np.float64)
    g = (points - lo) / (hi - lo) * (n - 1.0)
    i0 = np.clip(np.floor(g).astype(np.int64), 0, (np.array(self_res) - 2))
    frac = g - i0

    m = points.shape[0]
    idx = np.empty((m, 8), dtype=np.int64)
    w = np.empty((m, 8), dtype=np.float64)
    wx = (1.0 - frac[:, 0], frac[:, 0])
    wy = (1.0 - frac[:, 1], frac[:, 1])
    wz = (1.0 - frac[:, 2], frac[:, 2])
    for corner in range(8):
        dx, dy, dz = corner & 1, (corner >> 1) & 1, (corner >> 2) & 1
        idx[:, corner] = (i0[:, 0] + dx) + nx * ((i0[:, 1] + dy) + ny * (i0[:, 2] + dz))
        w[:, corner] = wx[dx] * wy[dy] * wz[dz]
    idx[~inside] = 0
    w[~inside] = 0.0
    return idx, w, inside


def interpolate_group(arr: np.ndarray, idx: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Weighted gather of one parameter group at precomputed corners."""
    flat = arr.reshape(arr.shape[0], -1)
    out = np.zeros((idx.shape[0], flat.shape[1]))
    for corner in range(8):
        out += w[:, corner, None] * flat[idx[:, corner]]
    return out.reshape((idx.shape[0],) + arr.shape[1:])


@dataclass(frozen=True)
class RawSample:
    """Interpolated raw (pre-activation) parameters at one point."""

    density_raw: float
    c_vi_raw: np.ndarray
    gamma_raw: float
    sh_c0: np.ndarray
    sh_vd: np.ndarray


@dataclass(frozen=True)
class RadianceSample:
    """Activated field outputs at one point and viewing direction."""

    sigma0: float
    c0: np.ndarray
    c_vi: np.ndarray
    c_vd: np.ndarray
    gamma: float
    c_final: np.ndarray


def sample_field(field: VoxelField, p) -> RawSample:
    """Trilinear interpolation of all raw parameter channels at one point."""
    idx, w, _ = trilinear_weights(field, np.asarray(p, dtype=np.float64)[None, :])
    return RawSample(
        density_raw=float(interpolate_group(field.density_raw, idx, w)[0]),
        c_vi_raw=interpolate_group(field.c_vi_raw, idx, w)[0],
        gamma_raw=float(interpolate_group(field.gamma_raw, idx, w)[0]),
        sh_c0=interpolate_group(field.sh_c0, idx, w)[0],
        sh_vd=interpolate_group(field.sh_vd, idx, w)[0],
    )


def eval_radiance(field: VoxelField, p, d) -> RadianceSample:
    """Activated radiance at one point: rectified density, logistic c_vi and
    gamma, clamped SH color c0, unclamped high-degree residual c_vd."""
    d = np.asarray(d, dtype=np.float64)
    if abs(np.linalg.norm(d) - 1.0) > 1e-6:
        raise InvalidInputError("viewing direction must be unit-norm")
    p = np.asarray(p, dtype=np.float64)
    inside = bool(np.all((p >= field.bounds[0]) & (p <= field.bounds[1])))
    if not inside:
        # Vacuum outside bounds: nothing to see, blend pinned to c_vi.
        zero = np.zeros(3)
        return RadianceSample(sigma0=0.0, c0=zero, c_vi=zero, c_vd=zero.copy(), gamma=1.0, c_final=zero)
    raw = sample_field(field, p)
    y = eval_sh_basis(d, field.l_max)
    sigma0 = float(relu(raw.density_raw))
    c0 = clamp01(y @ raw.sh_c0)
    c_vi = logistic(raw.c_vi_raw)
    c_vd = y[field.low_count:] @ raw.sh_vd
    gamma = float(logistic(raw.gamma_raw))
    c_final = gamma * c_vi + (1.0 - gamma) * c_vd
    return RadianceSample(sigma0=sigma0, c0=c0, c_vi=c_vi, c_vd=c_vd, gamma=gamma, c_final=c_final)


def _group_shapes(nvox: int, l_max: int, split_degree: int):
    length = basis_size(l_max)
    high = length - degree_count(split_degree)
    return {
        "density_raw": (nvox,),
        "c_vi_raw": (nvox, 3),
        "gamma_raw": (nvox,),
        "sh_c0": (nvox, length, 3),
        "sh_vd": (nvox, high, 3),
    }


def save_checkpoint(field: VoxelField, path) -> None:
    """Write the CFLD binary format: header then each parameter group as f32
    little-endian in declared order, voxels x-fastest, per-voxel channels
    contiguous."""
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<3I", *field.resolution))
        fh.write(struct.pack("<6f", *field.bounds[0], *field.bounds[1]))
        fh.write(struct.pack("<2I", field.l_max, field.split_degree))
        for name in PARAM_GROUPS:
            fh.write(np.ascontiguousarray(getattr(field, name), dtype="<f4").tobytes())


def load_checkpoint(path) -> VoxelField:
    """Read a CFLD checkpoint; refuses wrong magic, version, or truncation."""
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != CHECKPOINT_MAGIC:
        raise FormatError(f"not a CFLD checkpoint: bad magic {data[:4]!r}")
    header = struct.Struct("<I3I6f2I")
    if len(data) < 4 + header.size:
        raise FormatError("checkpoint truncated in header")
    fields = header.unpack_from(data, 4)
    version = fields[0]
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    resolution = fields[1:4]
    bounds = np.array([fields[4:7], fields[7:10]], dtype=np.float64)
    l_max, split_degree = fields[10], fields[11]
    if not 0 <= split_degree < l_max <= 4:
        raise FormatError(f"invalid degree header: l_max {l_max}, split {split_degree}")
    if any(r < 2 for r in resolution):
        raise FormatError(f"invalid resolution {resolution}")

    nvox = resolution[0] * resolution[1] * resolution[2]
    shapes = _group_shapes(nvox, l_max, split_degree)
    offset = 4 + header.size
    arrays = {}
    for name, shape in shapes.items():
        count = int(np.prod(shape))
        end = offset + 4 * count
        if end > len(data):
            raise FormatError(f"checkpoint truncated in group {name}")
        arrays[name] = (
            np.frombuffer(data, dtype="<f4", count=count, offset=offset)
            .astype(np.float64)
            .reshape(shape)
        )
        offset = end
    if offset != len(data):
        raise FormatError(f"{len(data) - offset} trailing bytes after parameter groups")
    return VoxelField(
        resolution=tuple(int(r) for r in resolution),
        bounds=bounds,
        l_max=int(l_max),
        split_degree=int(split_degree),
        **arrays,
    )
