"""Photometric and decomposition losses, analytic gradients through the
compositing quadrature and trilinear interpolation, and the Adam training loop."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field as dc_field, replace

import numpy as np
from scipy import linalg

from .cameras import pixel_rays
from .errors import DegenerateBatchError, InvalidInputError
from .field import VoxelField, init_field, logistic, relu, trilinear_weights
from .kernels import adam_rows, gather_rows, scatter_rows
from .render import CorrectionParams, composite_batch, correct_sigma, sample_depths
from .scenes import Dataset, scene_bounds
from .sh import degree_count, fit_sh, sample_directions, sh_basis_matrix, split_targets

LOG_HEADER = ["iteration", "l_pho_initial", "l_pho_final", "l_vi", "l_vd", "total"]


@dataclass(frozen=True)
class TrainConfig:
    iterations: int = 2000
    batch_rays: int = 512
    n_samples: int = 64
    learning_rate: float = 0.05
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_epsilon: float = 1e-8
    lambda_vi: float = 0.01
    lambda_vd: float = 0.01
    reg_position_fraction: float = 0.125
    seed: int = 0
    correction: CorrectionParams | None = dc_field(
        default_factory=lambda: CorrectionParams(sigma_thres=0.4, m=1)
    )
    l_max: int = 3
    split_degree: int = 1
    n_fit_directions: int = 64
    grid_resolution: tuple[int, int, int] = (64, 64, 64)
    stratified: bool = True

    def __post_init__(self):
        if self.iterations < 0:
            raise InvalidInputError("iterations must be non-negative")
        for name in ("batch_rays", "n_samples", "n_fit_directions"):
            if getattr(self, name) < 1:
                raise InvalidInputError(f"{name} must be positive")
        for name in ("learning_rate", "adam_beta1", "adam_beta2", "adam_epsilon"):
            if getattr(self, name) <= 0.0:
                raise InvalidInputError(f"{name} must be positive")
        if self.lambda_vi < 0.0 or self.lambda_vd < 0.0:
            raise InvalidInputError("regularizer weights must be non-negative")
        if not 0.0 < self.reg_position_fraction <= 1.0:
            raise InvalidInputError("reg_position_fraction must be in (0, 1]")


@dataclass(frozen=True)
class LossBreakdown:
    l_pho_initial: float
    l_pho_final: float
    l_vi: float
    l_vd: float
    total: float


@dataclass(frozen=True)
class RayBatch:
    """One training batch: rays with ground truth, fixed quadrature depths, and
    regularizer positions given as flat indices into the B*K quadrature points."""

    origins: np.ndarray  # (B, 3)
    directions: np.ndarray  # (B, 3)
    gt: np.ndarray  # (B, 3)
    t: np.ndarray  # (B, K)
    delta: np.ndarray  # (B, K)
    position_rows: np.ndarray  # (P,) int64


@dataclass(frozen=True)
class FrozenAux:
    """Quantities treated as constants by the differentiated objective: the
    correction keep-mask and the decomposition targets."""

    keep: np.ndarray  # (B, K) bool
    c_vi_target: np.ndarray  # (P, 3)
    c_vd_target: np.ndarray  # (P, N, 3)


class DecompositionBasis:
    """Fit-direction design matrix with its normal-equation factor, shared
    across positions and iterations."""

    def __init__(self, n_directions: int, l_max: int, split_degree: int):
        self.dirs = sample_directions(n_directions)
        self.basis = sh_basis_matrix(self.dirs, l_max)  # (N, L)
        self.low = degree_count(split_degree)
        self.factor = linalg.cho_factor(self.basis.T @ self.basis)
        self.low_mean = self.basis[:, : self.low].mean(axis=0)  # (L_low,)
        self.high = self.basis[:, self.low:]  # (N, L_high)


_BASIS_CACHE: dict[tuple[int, int, int], DecompositionBasis] = {}


def decomposition_basis(n_directions: int, l_max: int, split_degree: int) -> DecompositionBasis:
    key = (n_directions, l_max, split_degree)
    if key not in _BASIS_CACHE:
        _BASIS_CACHE[key] = DecompositionBasis(*key)
    return _BASIS_CACHE[key]


def photometric_loss(estimates, gt) -> tuple[float, float]:
    """Summed squared color error of both branches over a ray batch."""
    estimates = list(estimates)
    gt = np.asarray(gt, dtype=np.float64)
    if len(estimates) != gt.shape[0]:
        raise InvalidInputError(f"{len(estimates)} estimates vs {gt.shape[0]} ground-truth colors")
    c_init = np.array([e.c_initial for e in estimates])
    c_fin = np.array([e.c_final for e in estimates])
    return float(np.sum((c_init - gt) ** 2)), float(np.sum((c_fin - gt) ** 2))


def decomposition_losses(field: VoxelField, positions, dirs):
    """Per-position decomposition consistency, averaged over positions.

    At each position the view-dependent color c0 is sampled over ``dirs``,
    fitted, and split into targets; the model's c_vi and c_vd are penalized
    against them. Positions whose fit fails are skipped; if every position
    fails the batch is degenerate.
    """
    positions = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
    if positions.shape[0] == 0:
        raise InvalidInputError("positions must be non-empty")
    dirs = np.asarray(dirs, dtype=np.float64)
    basis = sh_basis_matrix(dirs, field.l_max)
    low = field.low_count
    idx, w, _ = trilinear_weights(field, positions)

    sh_c0 = np.zeros((positions.shape[0],) + field.sh_c0.shape[1:])
    c_vi_raw = np.zeros((positions.shape[0], 3))
    sh_vd = np.zeros((positions.shape[0],) + field.sh_vd.shape[1:])
    for corner in range(8):
        sh_c0 += w[:, corner, None, None] * field.sh_c0[idx[:, corner]]
        c_vi_raw += w[:, corner, None] * field.c_vi_raw[idx[:, corner]]
        sh_vd += w[:, corner, None, None] * field.sh_vd[idx[:, corner]]
    c_vi = logistic(c_vi_raw)

    total_vi = 0.0
    total_vd = 0.0
    kept = 0
    for p in range(positions.shape[0]):
        samples = np.clip(basis @ sh_c0[p], 0.0, 1.0)  # (N, 3)
        try:
            fits = [fit_sh(samples[:, ch], dirs, field.l_max) for ch in range(3)]
        except Exception:
            continue
        targets = split_targets(fits, dirs, field.split_degree)
        model_vd = basis[:, low:] @ sh_vd[p]  # (N, 3)
        total_vi += float(np.sum((c_vi[p] - targets.c_vi_target) ** 2))
        total_vd += float(np.sum((model_vd - targets.c_vd_target) ** 2))
        kept += 1
    if kept == 0:
        raise DegenerateBatchError("decomposition fit failed at every position")
    return total_vi / kept, total_vd / kept


def _forward(field: VoxelField, batch: RayBatch, config: TrainConfig, aux: FrozenAux | None):
    """Forward pass of the frozen-aux objective. Returns (breakdown, state);
    state carries everything the backward pass needs. When ``aux`` is given its
    keep-mask and targets are reused; otherwise they are computed and frozen."""
    b, k = batch.t.shape
    m = b * k
    pts = batch.origins[:, None, :] + batch.t[..., None] * batch.directions[:, None, :]
    idx, w, _ = trilinear_weights(field, pts.reshape(-1, 3))

    all_rows = np.arange(m, dtype=np.int64)
    u_dens = gather_rows(field.density_raw.reshape(-1, 1), idx, w, all_rows)[:, 0]
    sigma0 = relu(u_dens).reshape(b, k)

    if aux is not None:
        keep = aux.keep
    elif config.correction is not None:
        _, keep = correct_sigma(sigma0, config.correction)
    else:
        keep = np.ones((b, k), dtype=bool)
    sigma_fin = np.where(keep, sigma0, 0.0)

    pos_rows = np.asarray(batch.position_rows, dtype=np.int64)
    act_rows = np.flatnonzero(u_dens > 0.0)
    union_rows = np.union1d(act_rows, pos_rows)
    act_in_union = np.searchsorted(union_rows, act_rows)
    pos_in_union = np.searchsorted(union_rows, pos_rows)

    length = field.basis_count
    high = field.high_count
    cvi_union = logistic(gather_rows(field.c_vi_raw, idx, w, union_rows))
    shc0_union = gather_rows(field.sh_c0.reshape(field.nvox, -1), idx, w, union_rows)
    shvd_union = gather_rows(field.sh_vd.reshape(field.nvox, -1), idx, w, union_rows)
    gam_act = logistic(gather_rows(field.gamma_raw.reshape(-1, 1), idx, w, act_rows)[:, 0])

    y = sh_basis_matrix(batch.directions, field.l_max)  # (B, L)
    y_act = y[act_rows // k]
    shc0_act = shc0_union[act_in_union].reshape(-1, length, 3)
    u_c0 = np.einsum("rl,rlc->rc", y_act, shc0_act)
    c0_act = np.clip(u_c0, 0.0, 1.0)
    cvi_act = cvi_union[act_in_union]
    shvd_act = shvd_union[act_in_union].reshape(-1, high, 3)
    cvd_act = np.einsum("rh,rhc->rc", y_act[:, field.low_count:], shvd_act)
    cf_act = gam_act[:, None] * cvi_act + (1.0 - gam_act[:, None]) * cvd_act

    c0_dense = np.zeros((m, 3))
    c0_dense[act_rows] = c0_act
    cf_dense = np.zeros((m, 3))
    cf_dense[act_rows] = cf_act
    c0_dense = c0_dense.reshape(b, k, 3)
    cf_dense = cf_dense.reshape(b, k, 3)

    c_init, w0, t0 = composite_batch(sigma0, c0_dense, batch.delta)
    c_fin, wf, tf = composite_batch(sigma_fin, cf_dense, batch.delta)
    r0 = c_init - batch.gt
    rf = c_fin - batch.gt
    l0 = float(np.sum(r0**2))
    lf = float(np.sum(rf**2))

    n_pos = pos_rows.shape[0]
    basis = decomposition_basis(config.n_fit_directions, field.l_max, field.split_degree)
    n_dirs = basis.basis.shape[0]
    if n_pos > 0:
        # Position tensors run as (L, P*3) matmuls so BLAS carries the cost.
        shvd_pos = shvd_union[pos_in_union].reshape(-1, high, 3)
        model_vd = basis.high @ shvd_pos.transpose(1, 0, 2).reshape(high, n_pos * 3)
        if aux is not None:
            c_vi_target = aux.c_vi_target
            vd_target = aux.c_vd_target.transpose(1, 0, 2).reshape(n_dirs, n_pos * 3)
        else:
            shc0_pos = shc0_union[pos_in_union].reshape(-1, length, 3)
            samples = np.clip(
                basis.basis @ shc0_pos.transpose(1, 0, 2).reshape(length, n_pos * 3), 0.0, 1.0
            )
            coeffs = linalg.cho_solve(basis.factor, basis.basis.T @ samples)  # (L, P*3)
            c_vi_target = (basis.low_mean @ coeffs[: basis.low]).reshape(n_pos, 3)
            vd_target = basis.high @ coeffs[basis.low:]  # (N, P*3)
        c_vd_target = vd_target.reshape(n_dirs, n_pos, 3).transpose(1, 0, 2)
        e_vi = cvi_union[pos_in_union] - c_vi_target
        e_vd = model_vd - vd_target  # (N, P*3)
        l_vi = float(np.sum(e_vi**2)) / n_pos
        l_vd = float(np.sum(e_vd**2)) / n_pos
    else:
        c_vi_target = np.zeros((0, 3))
        c_vd_target = np.zeros((0, n_dirs, 3))
        e_vi = np.zeros((0, 3))
        e_vd = np.zeros((n_dirs, 0))
        l_vi = 0.0
        l_vd = 0.0

    total = l0 + lf + config.lambda_vi * l_vi + config.lambda_vd * l_vd
    breakdown = LossBreakdown(l_pho_initial=l0, l_pho_final=lf, l_vi=l_vi, l_vd=l_vd, total=total)
    state = {
        "idx": idx, "w": w, "keep": keep,
        "act_rows": act_rows, "pos_rows": pos_rows, "union_rows": union_rows,
        "act_in_union": act_in_union, "pos_in_union": pos_in_union,
        "u_c0": u_c0, "c0_dense": c0_dense, "cf_dense": cf_dense,
        "cvi_union": cvi_union, "cvi_act": cvi_act, "gam_act": gam_act,
        "cvd_act": cvd_act, "y_act": y_act,
        "w0": w0, "t0": t0, "wf": wf, "tf": tf, "r0": r0, "rf": rf,
        "e_vi": e_vi, "e_vd": e_vd, "basis": basis,
        "aux": FrozenAux(keep=keep, c_vi_target=c_vi_target, c_vd_target=c_vd_target),
    }
    return breakdown, state


def loss_with_frozen_aux(field: VoxelField, batch: RayBatch, config: TrainConfig, aux: FrozenAux) -> LossBreakdown:
    """The exact objective differentiated by ``gradients``: correction mask and
    decomposition targets held constant."""
    breakdown, _ = _forward(field, batch, config, aux)
    return breakdown


def _suffix_sum(x: np.ndarray) -> np.ndarray:
    """suffix_k = sum_{j>k} x_j along the last axis."""
    rev = x[..., ::-1]
    return np.cumsum(rev, axis=-1)[..., ::-1] - x


def _gradients(field: VoxelField, batch: RayBatch, config: TrainConfig, aux: FrozenAux | None):
    breakdown, st = _forward(field, batch, config, aux)
    _, k = st["keep"].shape
    delta = batch.delta
    nvox = field.nvox
    length = field.basis_count
    high = field.high_count
    act_rows = st["act_rows"]
    union_rows = st["union_rows"]
    n_pos = st["pos_rows"].shape[0]

    # Density: both branches differentiate the compositing weights in sigma.
    q0 = 2.0 * np.einsum("bc,bkc->bk", st["r0"], st["c0_dense"])
    dsig0 = delta * ((st["t0"] - st["w0"]) * q0 - _suffix_sum(st["w0"] * q0))
    qf = 2.0 * np.einsum("bc,bkc->bk", st["rf"], st["cf_dense"])
    dsigf = delta * ((st["tf"] - st["wf"]) * qf - _suffix_sum(st["wf"] * qf))
    dsig = dsig0 + np.where(st["keep"], dsigf, 0.0)  # mask frozen

    grad_density = np.zeros((nvox, 1))
    # relu' = 1 exactly on the active rows, 0 elsewhere.
    scatter_rows(grad_density, st["idx"], st["w"], act_rows, dsig.reshape(-1)[act_rows, None])

    # Initial-branch colors feed sh_c0 through the clamp.
    w0_act = st["w0"].reshape(-1)[act_rows]
    r0_act = st["r0"][act_rows // k]
    dc0 = 2.0 * w0_act[:, None] * r0_act
    dc0 *= (st["u_c0"] > 0.0) & (st["u_c0"] < 1.0)
    grad_shc0 = np.zeros((nvox, length * 3))
    vals_shc0 = (st["y_act"][:, :, None] * dc0[:, None, :]).reshape(-1, length * 3)
    scatter_rows(grad_shc0, st["idx"], st["w"], act_rows, vals_shc0)

    # Final-branch colors split into gamma, c_vi, and sh_vd parts.
    wf_act = st["wf"].reshape(-1)[act_rows]
    rf_act = st["rf"][act_rows // k]
    dcf = 2.0 * wf_act[:, None] * rf_act
    gam = st["gam_act"]
    dgam = np.sum(dcf * (st["cvi_act"] - st["cvd_act"]), axis=1) * gam * (1.0 - gam)
    grad_gamma = np.zeros((nvox, 1))
    scatter_rows(grad_gamma, st["idx"], st["w"], act_rows, dgam[:, None])

    vals_cvi = np.zeros((union_rows.shape[0], 3))
    vals_cvi[st["act_in_union"]] += dcf * gam[:, None]
    vals_shvd = np.zeros((union_rows.shape[0], high, 3))
    dcvd = dcf * (1.0 - gam[:, None])
    vals_shvd[st["act_in_union"]] += st["y_act"][:, field.low_count:, None] * dcvd[:, None, :]

    if n_pos > 0:
        basis = st["basis"]
        dvd_pos = (basis.high.T @ st["e_vd"]).reshape(high, n_pos, 3).transpose(1, 0, 2)
        # add.at: position rows may repeat when a caller duplicates a batch.
        np.add.at(vals_cvi, st["pos_in_union"], (2.0 * config.lambda_vi / n_pos) * st["e_vi"])
        np.add.at(vals_shvd, st["pos_in_union"], (2.0 * config.lambda_vd / n_pos) * dvd_pos)

    cvi_union = st["cvi_union"]
    vals_cvi *= cvi_union * (1.0 - cvi_union)  # logistic derivative
    grad_cvi = np.zeros((nvox, 3))
    scatter_rows(grad_cvi, st["idx"], st["w"], union_rows, vals_cvi)
    grad_shvd = np.zeros((nvox, high * 3))
    scatter_rows(grad_shvd, st["idx"], st["w"], union_rows, vals_shvd.reshape(-1, high * 3))

    grads = {
        "density_raw": grad_density[:, 0],
        "c_vi_raw": grad_cvi,
        "gamma_raw": grad_gamma[:, 0],
        "sh_c0": grad_shc0.reshape(nvox, length, 3),
        "sh_vd": grad_shvd.reshape(nvox, high, 3),
    }
    touched = {
        "geometry": _touched_voxels(st["idx"], act_rows, nvox),
        "appearance": _touched_voxels(st["idx"], union_rows, nvox),
    }
    return breakdown, grads, st["aux"], touched


def _touched_voxels(idx: np.ndarray, rows: np.ndarray, nvox: int) -> np.ndarray:
    """Sorted unique voxel ids reached by the given sample rows."""
    mask = np.zeros(nvox, dtype=bool)
    mask[idx[rows].ravel()] = True
    return np.flatnonzero(mask)


def gradients(field: VoxelField, batch: RayBatch, config: TrainConfig, aux: FrozenAux | None = None):
    """Analytic gradients of the frozen-aux total loss for every parameter
    group. Voxels not reached by the batch carry exactly zero gradient.

    Returns (breakdown, grads, aux) with grads keyed by parameter group name.
    """
    breakdown, grads, aux_out, _ = _gradients(field, batch, config, aux)
    return breakdown, grads, aux_out


def make_batch(origins, dirs, gt, near, far, config: TrainConfig, rng) -> RayBatch:
    """Assemble a RayBatch with stratified quadrature depths and, initially, no
    regularizer positions."""
    b = origins.shape[0]
    t, delta = sample_depths(near, far, config.n_samples, b, config.stratified, rng)
    return RayBatch(origins=origins, directions=dirs, gt=gt, t=t, delta=delta,
                    position_rows=np.zeros(0, dtype=np.int64))


def choose_positions(field: VoxelField, batch: RayBatch, fraction: float, rng) -> np.ndarray:
    """Flat indices of regularizer positions: a without-replacement draw from
    the quadrature points lying inside the field bounds."""
    pts = batch.origins[:, None, :] + batch.t[..., None] * batch.directions[:, None, :]
    flat = pts.reshape(-1, 3)
    inside = np.all((flat >= field.bounds[0]) & (flat <= field.bounds[1]), axis=1)
    in_rows = np.flatnonzero(inside)
    if in_rows.size == 0:
        return np.zeros(0, dtype=np.int64)
    count = min(in_rows.size, max(1, round(fraction * flat.shape[0])))
    return np.sort(rng.choice(in_rows, size=count, replace=False))


class AdamState:
    """Per-group first/second moments with per-row step counts. Rows untouched
    by an iteration keep their state frozen."""

    def __init__(self, field: VoxelField):
        self.m = {}
        self.v = {}
        self.steps = {}
        for name, arr in field.groups().items():
            flat = arr.reshape(arr.shape[0], -1)
            self.m[name] = np.zeros_like(flat)
            self.v[name] = np.zeros_like(flat)
            self.steps[name] = np.zeros(arr.shape[0], dtype=np.int64)


def train(dataset: Dataset, config: TrainConfig, field: VoxelField | None = None, progress=None):
    """Optimize a voxel field against the dataset's train views.

    Returns (field, log) where log holds one LossBreakdown per iteration,
    evaluated before that iteration's update. ``progress(iteration, breakdown)``
    is called every 100 iterations when given.
    """
    train_views = dataset.split(test=False)
    if not train_views:
        raise InvalidInputError("dataset has no train views")
    if field is None:
        field = init_field(
            config.grid_resolution,
            scene_bounds(dataset.scene),
            seed=config.seed,
            l_max=config.l_max,
            split_degree=config.split_degree,
        )

    all_origins = []
    all_dirs = []
    all_gt = []
    for view in train_views:
        origins, dirs = pixel_rays(view.camera)
        all_origins.append(origins)
        all_dirs.append(dirs)
        all_gt.append(view.image.pixels.reshape(-1, 3))
    all_origins = np.concatenate(all_origins)
    all_dirs = np.concatenate(all_dirs)
    all_gt = np.concatenate(all_gt)
    n_pixels = all_origins.shape[0]

    rng = np.random.default_rng(config.seed)
    adam = AdamState(field)
    reg_on = config.lambda_vi > 0.0 or config.lambda_vd > 0.0
    log = []
    for iteration in range(1, config.iterations + 1):
        pick = rng.integers(0, n_pixels, size=config.batch_rays)
        batch = make_batch(
            all_origins[pick], all_dirs[pick], all_gt[pick], dataset.near, dataset.far, config, rng
        )
        if reg_on:
            pos = choose_positions(field, batch, config.reg_position_fraction, rng)
            batch = replace(batch, position_rows=pos)
        breakdown, grads, _, touched = _gradients(field, batch, config, None)
        log.append(breakdown)

        row_sets = {
            "density_raw": touched["geometry"], "gamma_raw": touched["geometry"],
            "sh_c0": touched["geometry"],
            "c_vi_raw": touched["appearance"], "sh_vd": touched["appearance"],
        }
        for name, arr in field.groups().items():
            rows = row_sets[name]
            if rows.size == 0:
                continue
            flat = arr.reshape(arr.shape[0], -1)
            gflat = grads[name].reshape(arr.shape[0], -1)
            adam_rows(
                flat, adam.m[name], adam.v[name], adam.steps[name], rows, gflat[rows],
                config.learning_rate, config.adam_beta1, config.adam_beta2, config.adam_epsilon,
            )
        if progress is not None and iteration % 100 == 0:
            progress(iteration, breakdown)
    return field, log


def format_training_log(log) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(LOG_HEADER)
    for i, entry in enumerate(log, start=1):
        writer.writerow(
            [i, repr(entry.l_pho_initial), repr(entry.l_pho_final),
             repr(entry.l_vi), repr(entry.l_vd), repr(entry.total)]
        )
    return buf.getvalue()


def parse_training_log(text: str):
    reader = csv.reader(io.StringIO(text))
    header = next(reader, None)
    if header != LOG_HEADER:
        raise InvalidInputError(f"unexpected log header: {header}")
    out = []
    for row in reader:
        if not row:
            continue
        out.append(
            LossBreakdown(
                l_pho_initial=float(row[1]), l_pho_final=float(row[2]),
                l_vi=float(row[3]), l_vd=float(row[4]), total=float(row[5]),
            )
        )
    return out
