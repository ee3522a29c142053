"""Command-line entry point: dataset generation, training, rendering,
evaluation, and density-profile correction, each deterministic under a fixed
config and seed."""
from __future__ import annotations

import argparse
import math
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .cameras import CameraPose, look_at
from .config import RunConfig, load_config, save_config
from .errors import CleanfieldError, FormatError, InvalidInputError, InvalidSplitError, UsageError
from .field import load_checkpoint, save_checkpoint
from .image import Image, write_ppm
from .metrics import floater_volume, format_metric_report, mae, psnr, ssim
from .render import DensityProfile, correct_density, render_image
from .scenes import SceneOracle, load_dataset, make_dataset, save_dataset
from .train import format_training_log, train

FLOATER_THRES = 5.0  # node density threshold for the eval report

CHART_WIDTH = 256
CHART_HEIGHT = 128
CHART_MARGIN = 8
CHART_BEFORE = (0.75, 0.75, 0.75)
CHART_AFTER = (0.85, 0.2, 0.15)


class _Parser(argparse.ArgumentParser):
    # argparse exits with its own two-line message; route through the
    # machine-parsable error format instead.
    def error(self, message):
        raise UsageError(message)


def resolve_threads(flag_value: int | None) -> int:
    """Thread count: --threads flag, then CLEANFIELD_THREADS, then cpu count.
    Numerics are deterministic regardless; this only caps library pools."""
    if flag_value is None:
        env = os.environ.get("CLEANFIELD_THREADS")
        if env is not None:
            try:
                flag_value = int(env)
            except ValueError:
                raise UsageError(f"CLEANFIELD_THREADS must be an integer, got {env!r}")
    if flag_value is None:
        return os.cpu_count() or 1
    if flag_value < 1:
        raise UsageError(f"thread count must be positive, got {flag_value}")
    try:
        import numba

        numba.set_num_threads(min(flag_value, numba.config.NUMBA_NUM_THREADS))
    except ImportError:
        pass
    return flag_value


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="cleanfield", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON run configuration")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--threads", type=int, help="cap library thread pools")

    p = sub.add_parser("gen", help="generate a posed synthetic dataset")
    common(p)
    p.add_argument("--out", required=True, help="dataset directory")

    p = sub.add_parser("train", help="optimize a field on a dataset")
    common(p)
    p.add_argument("dataset", help="dataset directory from gen")
    p.add_argument("--out", required=True, help="run directory")
    p.add_argument("--no-decomposition", action="store_true",
                   help="zero both decomposition regularizer weights")
    p.add_argument("--no-correction", action="store_true",
                   help="drop the density keep-mask from training and eval")

    p = sub.add_parser("render", help="render a view from a checkpoint")
    common(p)
    p.add_argument("checkpoint", help="CFLD checkpoint path")
    p.add_argument("--out", required=True, help="output PPM path")
    p.add_argument("--data", help="dataset directory; renders one of its views")
    p.add_argument("--view", type=int, default=0, help="view index within --data")
    p.add_argument("--vi-only", action="store_true",
                   help="composite the view-independent color branch")
    p.add_argument("--no-correction", action="store_true")

    p = sub.add_parser("eval", help="metric report over a dataset's test views")
    common(p)
    p.add_argument("checkpoint")
    p.add_argument("dataset")
    p.add_argument("--out", help="also write the CSV report here")
    p.add_argument("--no-correction", action="store_true")

    p = sub.add_parser("correct", help="apply geometry correction to a profile file")
    common(p)
    p.add_argument("input", help="profile file, one ray per line of t:sigma pairs")
    p.add_argument("--out", required=True, help="corrected profile file")
    return parser


def _load_run_config(args) -> RunConfig:
    config = load_config(args.config) if args.config else RunConfig()
    if args.seed is not None:
        config = replace(config, seed=args.seed)
    return config


def _ring_camera(config: RunConfig) -> CameraPose:
    centroid = config.scene.centroid()
    eye = centroid + np.array([config.dataset.ring_radius, 0.0, 0.0])
    w, h = config.camera.resolution
    return CameraPose(
        focal=config.camera.focal,
        principal=(w / 2.0, h / 2.0),
        resolution=config.camera.resolution,
        c2w=look_at(eye, centroid),
    )


def _ring_near_far(config: RunConfig) -> tuple[float, float]:
    # Same clip range the dataset generator derives from its ring radius.
    return max(0.05, config.dataset.ring_radius - 1.5), config.dataset.ring_radius + 1.5


def _metric_rows(field, dataset, opts):
    rows = []
    for i, view in enumerate(dataset.views):
        if not view.is_test:
            continue
        rendered = render_image(field, view.camera, opts)
        rows.append((f"view_{i:03d}", psnr(rendered, view.image),
                     ssim(rendered, view.image), mae(rendered, view.image)))
    if not rows:
        raise InvalidSplitError("dataset has no test views to evaluate")
    return rows


def cmd_gen(config: RunConfig, out_dir) -> None:
    dataset = make_dataset(config.scene, **config.dataset_kwargs())
    save_dataset(dataset, out_dir)
    save_config(config, Path(out_dir) / "config.json")
    n_test = len(dataset.split(test=True))
    print(f"wrote {len(dataset.views)} views ({len(dataset.views) - n_test} train, "
          f"{n_test} test) to {out_dir}")


def cmd_train(config: RunConfig, dataset_dir, out_dir,
              decomposition: bool = True, correction: bool = True, progress=None):
    """Train, then score the test views; returns (field, metric rows, floater)."""
    dataset = load_dataset(dataset_dir)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_config(config, out / "config.json")
    field, log = train(dataset, config.train_config(decomposition, correction), progress=progress)
    save_checkpoint(field, out / "checkpoint.cfld")
    (out / "train_log.csv").write_text(format_training_log(log))
    opts = config.render_options(dataset.near, dataset.far, correction=correction)
    rows = _metric_rows(field, dataset, opts)
    report = format_metric_report(rows)
    (out / "metrics.csv").write_text(report)
    floater = floater_volume(field, SceneOracle(dataset.scene), FLOATER_THRES)
    mean_psnr = float(np.mean([r[1] for r in rows]))
    print(f"trained {config.train.iterations} iterations; "
          f"test PSNR {mean_psnr:.3f} dB; floater_volume({FLOATER_THRES}) {floater:.6f}")
    return field, rows, floater


def cmd_render(config: RunConfig, checkpoint_path, out_path,
               data_dir=None, view: int = 0, vi_only: bool = False,
               correction: bool = True) -> None:
    field = load_checkpoint(checkpoint_path)
    if data_dir is not None:
        dataset = load_dataset(data_dir)
        if not 0 <= view < len(dataset.views):
            raise InvalidInputError(
                f"view {view} out of range for {len(dataset.views)}-view dataset")
        camera = dataset.views[view].camera
        near, far = dataset.near, dataset.far
    else:
        camera = _ring_camera(config)
        near, far = _ring_near_far(config)
    opts = config.render_options(near, far, vi_only=vi_only, correction=correction)
    write_ppm(render_image(field, camera, opts), out_path)
    print(f"wrote {out_path}")


def cmd_eval(config: RunConfig, checkpoint_path, dataset_dir,
             out_path=None, correction: bool = True) -> None:
    field = load_checkpoint(checkpoint_path)
    dataset = load_dataset(dataset_dir)
    opts = config.render_options(dataset.near, dataset.far, correction=correction)
    report = format_metric_report(_metric_rows(field, dataset, opts))
    if out_path is not None:
        Path(out_path).write_text(report)
    sys.stdout.write(report)
    floater = floater_volume(field, SceneOracle(dataset.scene), FLOATER_THRES)
    print(f"floater_volume({FLOATER_THRES}) = {floater!r}")


def parse_profile_file(text: str) -> list[DensityProfile]:
    """One ray per non-empty line: comma-separated t:sigma pairs."""
    profiles = []
    for line_no, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line:
            continue
        t, sigma = [], []
        for pair in line.split(","):
            parts = pair.split(":")
            if len(parts) != 2:
                raise FormatError(f"line {line_no}: expected 't:sigma', got {pair.strip()!r}")
            try:
                t.append(float(parts[0]))
                sigma.append(float(parts[1]))
            except ValueError:
                raise FormatError(f"line {line_no}: non-numeric pair {pair.strip()!r}")
        t = np.asarray(t)
        if len(t) > 1:
            delta = np.append(np.diff(t), np.diff(t)[-1])
        else:
            delta = np.ones(1)
        try:
            profiles.append(DensityProfile(t=t, sigma=np.asarray(sigma), delta=delta))
        except InvalidInputError as exc:
            raise FormatError(f"line {line_no}: {exc}") from exc
    return profiles


def format_profile_file(profiles) -> str:
    lines = []
    for profile in profiles:
        lines.append(",".join(f"{float(t)!r}:{float(s)!r}"
                              for t, s in zip(profile.t, profile.sigma)))
    return "".join(line + "\n" for line in lines)


def _draw_segment(canvas, x0, y0, x1, y1, color):
    steps = int(max(abs(x1 - x0), abs(y1 - y0))) + 1
    xs = np.rint(np.linspace(x0, x1, steps + 1)).astype(int)
    ys = np.rint(np.linspace(y0, y1, steps + 1)).astype(int)
    canvas[np.clip(ys, 0, canvas.shape[0] - 1), np.clip(xs, 0, canvas.shape[1] - 1)] = color


def profile_chart(before, after) -> Image:
    """Line chart of density against depth, originals under corrected copies."""
    canvas = np.ones((CHART_HEIGHT, CHART_WIDTH, 3))
    t_lo = min(float(p.t[0]) for p in before)
    t_hi = max(float(p.t[-1]) for p in before)
    t_span = (t_hi - t_lo) or 1.0
    s_hi = max(float(p.sigma.max()) for p in before) or 1.0
    x_span = CHART_WIDTH - 1 - 2 * CHART_MARGIN
    y_span = CHART_HEIGHT - 1 - 2 * CHART_MARGIN

    def draw(profile, color):
        xs = CHART_MARGIN + (profile.t - t_lo) / t_span * x_span
        ys = CHART_HEIGHT - 1 - CHART_MARGIN - profile.sigma / s_hi * y_span
        for i in range(len(xs) - 1):
            _draw_segment(canvas, xs[i], ys[i], xs[i + 1], ys[i + 1], color)

    for profile in before:
        draw(profile, CHART_BEFORE)
    for profile in after:
        draw(profile, CHART_AFTER)
    return Image(canvas)


def cmd_correct(config: RunConfig, in_path, out_path) -> None:
    """Correct every profile row; the chart lands next to --out as <out>.ppm."""
    try:
        text = Path(in_path).read_text()
    except FileNotFoundError:
        raise InvalidInputError(f"no such profile file: {in_path}")
    params = config.correction_params()
    if params is None:
        raise InvalidInputError("correction is disabled in this config")
    before = parse_profile_file(text)
    after = [correct_density(p, params) for p in before]
    Path(out_path).write_text(format_profile_file(after))
    if before:
        write_ppm(profile_chart(before, after), str(out_path) + ".ppm")
    print(f"corrected {len(after)} profiles -> {out_path}")


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        resolve_threads(args.threads)
        config = _load_run_config(args)
        if args.command == "gen":
            cmd_gen(config, args.out)
        elif args.command == "train":
            cmd_train(config, args.dataset, args.out,
                      decomposition=not args.no_decomposition,
                      correction=not args.no_correction)
        elif args.command == "render":
            cmd_render(config, args.checkpoint, args.out, data_dir=args.data,
                       view=args.view, vi_only=args.vi_only,
                       correction=not args.no_correction)
        elif args.command == "eval":
            cmd_eval(config, args.checkpoint, args.dataset,
                     out_path=args.out, correction=not args.no_correction)
        elif args.command == "correct":
            cmd_correct(config, args.input, args.out)
    except CleanfieldError as exc:
        print(f"error:{exc.category}:{exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error:io:{exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
