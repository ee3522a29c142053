"""Losses and analytic gradients against finite differences, Adam training
behavior, and the training log format."""
import io
from dataclasses import replace

import numpy as np
import pytest
from scipy.special import logit

from cleanfield.errors import DegenerateBatchError, InvalidInputError
from cleanfield.field import init_field, save_checkpoint, trilinear_weights
from cleanfield.render import CorrectionParams, PixelEstimate, RenderOptions, render_rays
from cleanfield.scenes import SceneSpec, make_dataset
from cleanfield.sh import SH_C0, sample_directions
from cleanfield.train import (
    FrozenAux,
    LossBreakdown,
    RayBatch,
    TrainConfig,
    choose_positions,
    decomposition_losses,
    format_training_log,
    gradients,
    loss_with_frozen_aux,
    make_batch,
    parse_training_log,
    photometric_loss,
    train,
)

UNIT_BOUNDS = np.array([[0.0, 0.0, 0.0], [1.0, 1.0, 1.0]])


def smooth_random_field(resolution=(8, 8, 8), seed=11):
    """A field whose activations are all strictly inside their smooth regions,
    so small parameter perturbations cannot cross a relu or clamp kink."""
    field = init_field(resolution, UNIT_BOUNDS, seed=5)
    rng = np.random.default_rng(seed)
    field.density_raw[:] = rng.uniform(0.05, 0.8, field.nvox)
    field.sh_c0[:] = 0.0
    field.sh_c0[:, 0, :] = rng.uniform(0.25, 0.75, (field.nvox, 3)) / SH_C0
    field.sh_c0[:, 1:, :] = rng.uniform(-0.01, 0.01, (field.nvox, field.basis_count - 1, 3))
    field.c_vi_raw[:] = rng.uniform(-1.5, 1.5, (field.nvox, 3))
    field.gamma_raw[:] = rng.uniform(-1.5, 1.5, field.nvox)
    field.sh_vd[:] = rng.uniform(-0.3, 0.3, field.sh_vd.shape)
    return field


def crossing_rays(n, rng):
    """Rays entering the unit cube from below z=0 with mild direction spread."""
    origins = np.column_stack(
        [rng.uniform(0.1, 0.9, n), rng.uniform(0.1, 0.9, n), np.full(n, -0.3)]
    )
    dirs = np.column_stack(
        [rng.uniform(-0.2, 0.2, n), rng.uniform(-0.2, 0.2, n), np.ones(n)]
    )
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    return origins, dirs


@pytest.fixture(scope="module")
def fd_setup():
    field = smooth_random_field()
    rng = np.random.default_rng(11)
    origins, dirs = crossing_rays(32, rng)
    gt = rng.uniform(0.0, 1.0, (32, 3))
    config = TrainConfig(n_samples=16, lambda_vi=0.5, lambda_vd=0.5)
    batch = make_batch(origins, dirs, gt, 0.05, 1.8, config, rng)
    batch = replace(batch, position_rows=choose_positions(field, batch, 0.1, rng))
    return field, batch, config


def test_gradients_match_finite_differences(fd_setup):
    field, batch, config = fd_setup
    breakdown, grads, aux = gradients(field, batch, config)
    h = 1e-3
    rng = np.random.default_rng(7)
    checked = 0
    for name, grad in grads.items():
        flat = grad.reshape(-1)
        # Parameters with negligible gradient are covered by the exact-zero
        # tests; the relative comparison needs informative entries.
        candidates = np.flatnonzero(np.abs(flat) > 1e-4)
        take = rng.choice(candidates, size=min(20, candidates.size), replace=False)
        for fi in take:
            plus = field.copy()
            plus.groups()[name].reshape(-1)[fi] += h
            minus = field.copy()
            minus.groups()[name].reshape(-1)[fi] -= h
            fd = (
                loss_with_frozen_aux(plus, batch, config, aux).total
                - loss_with_frozen_aux(minus, batch, config, aux).total
            ) / (2.0 * h)
            analytic = float(flat[fi])
            err = abs(analytic - fd)
            assert err <= max(1e-6, 1e-3 * max(abs(analytic), abs(fd))), (
                f"{name}[{fi}]: analytic {analytic} vs fd {fd}"
            )
            checked += 1
    assert checked == 100
    assert breakdown.total == pytest.approx(
        breakdown.l_pho_initial + breakdown.l_pho_final
        + config.lambda_vi * breakdown.l_vi + config.lambda_vd * breakdown.l_vd
    )


def test_frozen_aux_reeval_is_identical(fd_setup):
    field, batch, config = fd_setup
    breakdown, _, aux = gradients(field, batch, config)
    assert loss_with_frozen_aux(field, batch, config, aux) == breakdown


def test_gradients_confined_to_batch_voxels(fd_setup):
    field, batch, config = fd_setup
    _, grads, _ = gradients(field, batch, config)
    pts = batch.origins[:, None, :] + batch.t[..., None] * batch.directions[:, None, :]
    idx, _, _ = trilinear_weights(field, pts.reshape(-1, 3))
    reachable = set(np.unique(idx).tolist())
    for name, grad in grads.items():
        rows = np.flatnonzero(grad.reshape(grad.shape[0], -1).any(axis=1))
        assert set(rows.tolist()) <= reachable, name


def test_vacuum_field_black_targets_zero_gradients():
    field = init_field((6, 6, 6), UNIT_BOUNDS, seed=0)
    field.density_raw[:] = -0.2  # relu clips to vacuum everywhere
    rng = np.random.default_rng(3)
    origins, dirs = crossing_rays(8, rng)
    config = TrainConfig(n_samples=8, lambda_vi=0.0, lambda_vd=0.0)
    batch = make_batch(origins, dirs, np.zeros((8, 3)), 0.05, 1.8, config, rng)
    breakdown, grads, _ = gradients(field, batch, config)
    assert breakdown.total == 0.0
    for name, grad in grads.items():
        assert np.all(grad == 0.0), name


def test_matched_decomposition_gradients_negligible():
    # c0 constant 0.6, c_vi already 0.6, sh_vd zero: targets are met, so with a
    # vacuum density and black ground truth every gradient vanishes.
    field = init_field((6, 6, 6), UNIT_BOUNDS, seed=0)
    field.density_raw[:] = -0.2
    field.sh_c0[:] = 0.0
    field.sh_c0[:, 0, :] = 0.6 / SH_C0
    field.c_vi_raw[:] = logit(0.6)
    field.sh_vd[:] = 0.0
    rng = np.random.default_rng(4)
    origins, dirs = crossing_rays(8, rng)
    config = TrainConfig(n_samples=8, lambda_vi=0.5, lambda_vd=0.5)
    batch = make_batch(origins, dirs, np.zeros((8, 3)), 0.05, 1.8, config, rng)
    batch = replace(batch, position_rows=choose_positions(field, batch, 0.2, rng))
    breakdown, grads, _ = gradients(field, batch, config)
    assert breakdown.l_vi < 1e-20 and breakdown.l_vd < 1e-20
    for name, grad in grads.items():
        assert np.abs(grad).max() < 1e-12, name


def test_photometric_loss_values():
    est = [
        PixelEstimate(c_initial=np.array([1.0, 0.0, 0.0]), c_final=np.array([0.5, 0.5, 0.0]),
                      weights=np.zeros(2), transmittance=np.ones(2)),
        PixelEstimate(c_initial=np.array([0.0, 0.0, 0.0]), c_final=np.array([0.0, 0.0, 0.0]),
                      weights=np.zeros(2), transmittance=np.ones(2)),
    ]
    gt = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])
    l0, lf = photometric_loss(est, gt)
    assert l0 == pytest.approx(1.0)  # second pixel misses green entirely
    assert lf == pytest.approx(0.25 + 0.25 + 1.0)


def test_photometric_loss_length_mismatch():
    est = [PixelEstimate(c_initial=np.zeros(3), c_final=np.zeros(3),
                         weights=np.zeros(2), transmittance=np.ones(2))]
    with pytest.raises(InvalidInputError):
        photometric_loss(est, np.zeros((2, 3)))


def test_trainer_photometric_matches_renderer(fd_setup):
    field, batch, config = fd_setup
    breakdown, _, _ = gradients(field, batch, config)
    opts = RenderOptions(n_samples=config.n_samples, correction=config.correction)
    c_init, c_fin, _, _ = render_rays(
        field, batch.origins, batch.directions, batch.t, batch.delta, opts
    )
    l0 = float(np.sum((c_init - batch.gt) ** 2))
    lf = float(np.sum((c_fin - batch.gt) ** 2))
    assert breakdown.l_pho_initial == pytest.approx(l0, rel=1e-9, abs=1e-12)
    assert breakdown.l_pho_final == pytest.approx(lf, rel=1e-9, abs=1e-12)


def test_decomposition_losses_constant_gray():
    # Direction-independent c0 = 0.7, c_vi = 0.5: the view-independent target
    # is 0.7 per channel, so l_vi = 3 * 0.2^2; the high-degree fit is zero.
    field = init_field((6, 6, 6), UNIT_BOUNDS, seed=0)
    field.sh_c0[:] = 0.0
    field.sh_c0[:, 0, :] = 0.7 / SH_C0
    field.c_vi_raw[:] = 0.0
    field.sh_vd[:] = 0.0
    positions = np.random.default_rng(0).uniform(0.2, 0.8, (5, 3))
    l_vi, l_vd = decomposition_losses(field, positions, sample_directions(64))
    assert l_vi == pytest.approx(0.12, abs=1e-9)
    assert l_vd == pytest.approx(0.0, abs=1e-12)


def test_decomposition_losses_matched_field_zero():
    field = init_field((6, 6, 6), UNIT_BOUNDS, seed=0)
    field.sh_c0[:] = 0.0
    field.sh_c0[:, 0, :] = 0.6 / SH_C0
    field.c_vi_raw[:] = logit(0.6)
    field.sh_vd[:] = 0.0
    positions = np.random.default_rng(1).uniform(0.1, 0.9, (4, 3))
    l_vi, l_vd = decomposition_losses(field, positions, sample_directions(48))
    assert l_vi < 1e-12 and l_vd < 1e-12


def test_decomposition_losses_permutation_invariant():
    field = smooth_random_field(seed=21)
    rng = np.random.default_rng(2)
    positions = rng.uniform(0.1, 0.9, (12, 3))
    dirs = sample_directions(64)
    base = decomposition_losses(field, positions, dirs)
    perm = decomposition_losses(field, positions[::-1], dirs)
    assert base[0] == pytest.approx(perm[0], rel=1e-12)
    assert base[1] == pytest.approx(perm[1], rel=1e-12)


def test_decomposition_losses_underdetermined_batch():
    field = smooth_random_field(seed=22)
    positions = np.full((3, 3), 0.5)
    with pytest.raises(DegenerateBatchError):
        # 8 directions cannot determine 16 coefficients at any position.
        decomposition_losses(field, positions, sample_directions(8))


def test_decomposition_losses_empty_positions():
    field = smooth_random_field(seed=23)
    with pytest.raises(InvalidInputError):
        decomposition_losses(field, np.zeros((0, 3)), sample_directions(32))


def test_decomposition_losses_match_trainer_path(fd_setup):
    field, batch, config = fd_setup
    breakdown, _, _ = gradients(field, batch, config)
    pts = batch.origins[:, None, :] + batch.t[..., None] * batch.directions[:, None, :]
    positions = pts.reshape(-1, 3)[batch.position_rows]
    l_vi, l_vd = decomposition_losses(field, positions, sample_directions(config.n_fit_directions))
    assert breakdown.l_vi == pytest.approx(l_vi, rel=1e-9)
    assert breakdown.l_vd == pytest.approx(l_vd, rel=1e-9)


def test_duplicated_batch_doubles_photometric_gradients():
    field = smooth_random_field(seed=31)
    rng = np.random.default_rng(6)
    origins, dirs = crossing_rays(8, rng)
    gt = rng.uniform(0.0, 1.0, (8, 3))
    config = TrainConfig(n_samples=8, lambda_vi=0.0, lambda_vd=0.0)
    batch = make_batch(origins, dirs, gt, 0.05, 1.8, config, rng)
    doubled = RayBatch(
        origins=np.concatenate([batch.origins] * 2),
        directions=np.concatenate([batch.directions] * 2),
        gt=np.concatenate([batch.gt] * 2),
        t=np.concatenate([batch.t] * 2),
        delta=np.concatenate([batch.delta] * 2),
        position_rows=np.zeros(0, dtype=np.int64),
    )
    _, g1, _ = gradients(field, batch, config)
    _, g2, _ = gradients(field, doubled, config)
    for name in g1:
        assert np.allclose(g2[name], 2.0 * g1[name], atol=1e-12), name


def test_loss_non_increasing_under_small_step():
    for trial in range(20):
        field = smooth_random_field(resolution=(6, 6, 6), seed=100 + trial)
        rng = np.random.default_rng(200 + trial)
        origins, dirs = crossing_rays(8, rng)
        gt = rng.uniform(0.0, 1.0, (8, 3))
        config = TrainConfig(n_samples=8, lambda_vi=0.3, lambda_vd=0.3)
        batch = make_batch(origins, dirs, gt, 0.05, 1.8, config, rng)
        batch = replace(batch, position_rows=choose_positions(field, batch, 0.2, rng))
        before, grads, aux = gradients(field, batch, config)
        stepped = field.copy()
        for name, arr in stepped.groups().items():
            arr -= 1e-4 * grads[name]
        after = loss_with_frozen_aux(stepped, batch, config, aux)
        assert after.total <= before.total + 1e-9, trial


def test_zero_iterations_returns_initial_field():
    dataset = make_dataset(SceneSpec(), n_views=4, resolution=(8, 8), seed=0)
    config = TrainConfig(iterations=0, grid_resolution=(8, 8, 8))
    field, log = train(dataset, config)
    reference = init_field((8, 8, 8), np.array([[-0.6] * 3, [0.6] * 3]), seed=config.seed)
    assert log == []
    for name, arr in field.groups().items():
        assert np.array_equal(arr, reference.groups()[name]), name


def test_train_smoke_and_determinism(tmp_path):
    dataset = make_dataset(SceneSpec(), n_views=4, resolution=(8, 8), seed=0)
    config = TrainConfig(
        iterations=5, batch_rays=32, n_samples=16, grid_resolution=(8, 8, 8), seed=3
    )
    field_a, log_a = train(dataset, config)
    field_b, log_b = train(dataset, config)
    assert len(log_a) == 5
    assert all(np.isfinite(entry.total) for entry in log_a)
    assert log_a == log_b
    save_checkpoint(field_a, tmp_path / "a.cfld")
    save_checkpoint(field_b, tmp_path / "b.cfld")
    assert (tmp_path / "a.cfld").read_bytes() == (tmp_path / "b.cfld").read_bytes()


def test_training_log_round_trip():
    log = [
        LossBreakdown(l_pho_initial=1.5, l_pho_final=0.25, l_vi=1e-3, l_vd=2e-3,
                      total=1.5 + 0.25 + 1e-5 + 2e-5),
        LossBreakdown(l_pho_initial=0.5, l_pho_final=0.125, l_vi=0.0, l_vd=0.0, total=0.625),
    ]
    text = format_training_log(log)
    lines = text.splitlines()
    assert lines[0] == "iteration,l_pho_initial,l_pho_final,l_vi,l_vd,total"
    assert lines[1].startswith("1,")
    assert parse_training_log(text) == log
    with pytest.raises(InvalidInputError):
        parse_training_log("bogus,header\n")


def test_single_view_overfit():
    dataset = make_dataset(SceneSpec(), n_views=4, resolution=(4, 4), seed=0)
    config = TrainConfig(
        iterations=400, batch_rays=16, n_samples=32, grid_resolution=(16, 16, 16),
        learning_rate=1e-2, seed=1,
    )
    _, log = train(dataset, config)
    first = np.mean([e.l_pho_final for e in log[:20]])
    last = np.mean([e.l_pho_final for e in log[-20:]])
    assert last < 0.05 * first
    assert last / config.batch_rays < 2e-3  # mean per-ray squared error


def test_train_config_validation():
    with pytest.raises(InvalidInputError):
        TrainConfig(iterations=-1)
    with pytest.raises(InvalidInputError):
        TrainConfig(batch_rays=0)
    with pytest.raises(InvalidInputError):
        TrainConfig(learning_rate=0.0)
    with pytest.raises(InvalidInputError):
        TrainConfig(lambda_vi=-0.1)
    with pytest.raises(InvalidInputError):
        TrainConfig(reg_position_fraction=0.0)


def test_correction_mask_used_by_trainer():
    # A lone distant blob ahead of the main slab is cut by the scan, so the
    # final branch's keep-mask must differ from all-true.
    field = init_field((9, 9, 9), UNIT_BOUNDS, seed=0)
    field.density_raw[:] = -1.0
    coords = field.node_coords()
    slab = np.abs(coords[:, 2] - 0.7) < 0.12
    field.density_raw[slab] = 30.0
    blob = (np.abs(coords[:, 2] - 0.1) < 0.06) & (np.abs(coords[:, 0] - 0.5) < 0.08) \
        & (np.abs(coords[:, 1] - 0.5) < 0.08)
    field.density_raw[blob] = 0.02
    origins = np.array([[0.5, 0.5, -0.3]])
    dirs = np.array([[0.0, 0.0, 1.0]])
    config = TrainConfig(n_samples=64, correction=CorrectionParams(sigma_thres=0.1, m=2))
    rng = np.random.default_rng(0)
    batch = make_batch(origins, dirs, np.zeros((1, 3)), 0.05, 1.8, config, rng)
    _, _, aux = gradients(field, batch, config)
    assert not np.all(aux.keep)

    uncorrected = replace(config, correction=None)
    _, _, aux2 = gradients(field, batch, uncorrected)
    assert np.all(aux2.keep)
