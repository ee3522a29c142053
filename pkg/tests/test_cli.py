"""End-to-end tests for the command-line interface on miniature runs."""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import pytest

from cleanfield.cli import (
    cmd_correct,
    format_profile_file,
    main,
    parse_profile_file,
    profile_chart,
    resolve_threads,
)
from cleanfield.config import RunConfig, load_config
from cleanfield.errors import FormatError, UsageError
from cleanfield.field import PARAM_GROUPS, init_field, load_checkpoint, save_checkpoint
from cleanfield.metrics import parse_metric_report
from cleanfield.render import CorrectionParams, DensityProfile
from cleanfield.scenes import scene_bounds

TINY = {
    "seed": 3,
    "camera": {"focal": 20.0, "resolution": [16, 16]},
    "dataset": {"n_views": 6, "test_stride": 3},
    "field": {"resolution": [16, 16, 16]},
    "train": {"iterations": 12, "batch_rays": 64, "n_samples": 16},
    "sh": {"l_max": 2, "n_fit_directions": 32},
}


def write_tiny(tmp_path, **overrides) -> Path:
    data = json.loads(json.dumps(TINY))
    for section, fields in overrides.items():
        data.setdefault(section, {}).update(fields)
    path = tmp_path / "config.json"
    path.write_text(json.dumps(data))
    return path


def tree_bytes(root: Path) -> dict[str, bytes]:
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """One tiny gen+train shared by the read-only CLI tests."""
    root = tmp_path_factory.mktemp("cli")
    config = root / "config.json"
    config.write_text(json.dumps(TINY))
    assert main(["gen", "--config", str(config), "--out", str(root / "data")]) == 0
    assert main(["train", str(root / "data"), "--config", str(config),
                 "--out", str(root / "run")]) == 0
    return root


class TestGen:
    def test_default_split_counts(self, workspace):
        manifest = json.loads((workspace / "data" / "manifest.json").read_text())
        splits = [v["split"] for v in manifest["views"]]
        assert len(splits) == 6 and splits.count("test") == 2

    def test_same_seed_byte_identical(self, workspace, tmp_path):
        assert main(["gen", "--config", str(workspace / "config.json"),
                     "--out", str(tmp_path / "again")]) == 0
        assert tree_bytes(tmp_path / "again") == tree_bytes(workspace / "data")

    def test_unknown_key_rejected(self, tmp_path, capsys):
        bad = tmp_path / "bad.json"
        bad.write_text('{"trian": {}}')
        assert main(["gen", "--config", str(bad), "--out", str(tmp_path / "d")]) == 1
        err = capsys.readouterr().err
        assert err.startswith("error:config:") and "trian" in err

    def test_config_echo_round_trips(self, workspace):
        echoed = load_config(workspace / "data" / "config.json")
        assert echoed.seed == 3
        assert echoed.dataset.n_views == 6


class TestTrain:
    def test_outputs_exist_and_parse(self, workspace):
        run = workspace / "run"
        assert (run / "checkpoint.cfld").exists()
        report = parse_metric_report((run / "metrics.csv").read_text())
        assert "mean" in report and len(report) == 3
        log = (run / "train_log.csv").read_text().splitlines()
        assert len(log) == 1 + TINY["train"]["iterations"]

    def test_zero_iterations_equals_init(self, tmp_path, capsys):
        config = write_tiny(tmp_path, train={"iterations": 0})
        data = Path(str(tmp_path / "d"))
        assert main(["gen", "--config", str(config), "--out", str(data)]) == 0
        assert main(["train", str(data), "--config", str(config),
                     "--out", str(tmp_path / "r")]) == 0
        trained = load_checkpoint(tmp_path / "r" / "checkpoint.cfld")
        run_config = load_config(config)
        fresh = init_field((16, 16, 16), scene_bounds(run_config.scene), seed=3,
                           l_max=2, split_degree=1)
        save_checkpoint(fresh, tmp_path / "fresh.cfld")  # compare at format precision
        fresh = load_checkpoint(tmp_path / "fresh.cfld")
        for group in PARAM_GROUPS:
            np.testing.assert_array_equal(getattr(trained, group), getattr(fresh, group))

    def test_rerun_byte_identical(self, workspace, tmp_path):
        assert main(["train", str(workspace / "data"), "--config",
                     str(workspace / "config.json"), "--out", str(tmp_path / "r2")]) == 0
        a = (workspace / "run" / "checkpoint.cfld").read_bytes()
        b = (tmp_path / "r2" / "checkpoint.cfld").read_bytes()
        assert a == b

    def test_ablation_flags_change_outcome(self, workspace, tmp_path):
        args = ["train", str(workspace / "data"), "--config", str(workspace / "config.json")]
        assert main(args + ["--out", str(tmp_path / "ab"), "--no-decomposition",
                            "--no-correction"]) == 0
        ablated = (tmp_path / "ab" / "checkpoint.cfld").read_bytes()
        assert ablated != (workspace / "run" / "checkpoint.cfld").read_bytes()

    def test_missing_manifest(self, tmp_path, capsys):
        assert main(["train", str(tmp_path / "nowhere"), "--config",
                     str(write_tiny(tmp_path)), "--out", str(tmp_path / "r")]) == 1
        assert capsys.readouterr().err.startswith("error:format:")


class TestRender:
    def test_view_render_reproducible(self, workspace, tmp_path):
        args = ["render", str(workspace / "run" / "checkpoint.cfld"),
                "--config", str(workspace / "config.json"),
                "--data", str(workspace / "data"), "--view", "1"]
        assert main(args + ["--out", str(tmp_path / "a.ppm")]) == 0
        assert main(args + ["--out", str(tmp_path / "b.ppm")]) == 0
        assert (tmp_path / "a.ppm").read_bytes() == (tmp_path / "b.ppm").read_bytes()

    def test_vi_only_differs_from_full(self, workspace, tmp_path):
        base = ["render", str(workspace / "run" / "checkpoint.cfld"),
                "--config", str(workspace / "config.json"), "--data", str(workspace / "data")]
        assert main(base + ["--out", str(tmp_path / "full.ppm")]) == 0
        assert main(base + ["--vi-only", "--out", str(tmp_path / "vi.ppm")]) == 0
        assert (tmp_path / "full.ppm").read_bytes() != (tmp_path / "vi.ppm").read_bytes()

    def test_default_camera_without_dataset(self, workspace, tmp_path):
        assert main(["render", str(workspace / "run" / "checkpoint.cfld"),
                     "--config", str(workspace / "config.json"),
                     "--out", str(tmp_path / "ring.ppm")]) == 0
        assert (tmp_path / "ring.ppm").exists()

    def test_corrupted_magic_refused(self, workspace, tmp_path, capsys):
        blob = bytearray((workspace / "run" / "checkpoint.cfld").read_bytes())
        blob[:4] = b"XXXX"
        bad = tmp_path / "bad.cfld"
        bad.write_bytes(bytes(blob))
        assert main(["render", str(bad), "--out", str(tmp_path / "x.ppm")]) == 1
        assert capsys.readouterr().err.startswith("error:format:")

    def test_view_out_of_range(self, workspace, tmp_path, capsys):
        assert main(["render", str(workspace / "run" / "checkpoint.cfld"),
                     "--data", str(workspace / "data"), "--view", "99",
                     "--out", str(tmp_path / "x.ppm")]) == 1
        assert capsys.readouterr().err.startswith("error:invalid-input:")


class TestEval:
    def test_report_and_floater_line(self, workspace, tmp_path, capsys):
        out = tmp_path / "report.csv"
        assert main(["eval", str(workspace / "run" / "checkpoint.cfld"),
                     str(workspace / "data"), "--config", str(workspace / "config.json"),
                     "--out", str(out)]) == 0
        printed = capsys.readouterr().out
        assert "floater_volume(5.0) = " in printed
        report = parse_metric_report(out.read_text())
        assert set(report) == {"view_000", "view_003", "mean"}
        for p, s, m in report.values():
            assert p > 0 and 0 <= s <= 1 and m >= 0

    def test_missing_test_split(self, workspace, tmp_path, capsys):
        import shutil

        broken = tmp_path / "broken"
        shutil.copytree(workspace / "data", broken)
        manifest = broken / "manifest.json"
        manifest.write_text(manifest.read_text().replace('"test"', '"train"'))
        assert main(["eval", str(workspace / "run" / "checkpoint.cfld"), str(broken)]) == 1
        assert capsys.readouterr().err.startswith("error:invalid-split:")


class TestCorrect:
    def fixture_line(self):
        return "0.5:0.5,1.0:0.0,1.5:0.0,2.0:4.0,2.5:1.0,3.0:3.0,3.5:0.0,4.0:0.0,4.5:0.5\n"

    def corr_config(self, tmp_path, thres=2.0, m=1):
        path = tmp_path / "corr.json"
        path.write_text(json.dumps(
            {"correction": {"sigma_thres": thres, "m": m, "relative_mode": False}}))
        return path

    def test_two_peak_fixture(self, tmp_path):
        src = tmp_path / "in.txt"
        src.write_text(self.fixture_line())
        out = tmp_path / "out.txt"
        assert main(["correct", str(src), "--config", str(self.corr_config(tmp_path)),
                     "--out", str(out)]) == 0
        sigma = [float(pair.split(":")[1]) for pair in out.read_text().strip().split(",")]
        assert sigma == [0.0, 0.0, 0.0, 4.0, 1.0, 3.0, 0.0, 0.0, 0.0]
        assert (tmp_path / (out.name + ".ppm")).exists()

    def test_empty_file(self, tmp_path):
        src = tmp_path / "empty.txt"
        src.write_text("")
        out = tmp_path / "out.txt"
        assert main(["correct", str(src), "--out", str(out)]) == 0
        assert out.read_text() == ""
        assert not (tmp_path / (out.name + ".ppm")).exists()

    def test_margin_larger_than_profile(self, tmp_path):
        src = tmp_path / "in.txt"
        src.write_text(self.fixture_line())
        out = tmp_path / "out.txt"
        assert main(["correct", str(src), "--config", str(self.corr_config(tmp_path, m=50)),
                     "--out", str(out)]) == 0
        assert out.read_text() == self.fixture_line()

    def test_malformed_row_names_line(self, tmp_path, capsys):
        src = tmp_path / "in.txt"
        src.write_text("0.5:1.0\nnonsense\n")
        assert main(["correct", str(src), "--out", str(tmp_path / "o.txt")]) == 1
        err = capsys.readouterr().err
        assert err.startswith("error:format:") and "line 2" in err

    def test_round_trip(self):
        text = self.fixture_line() + "0.1:0.0,0.2:7.5\n"
        assert format_profile_file(parse_profile_file(text)) == text

    def test_non_numeric_pair(self):
        with pytest.raises(FormatError, match="line 1"):
            parse_profile_file("0.5:abc\n")

    def test_decreasing_t_rejected(self):
        with pytest.raises(FormatError, match="line 1"):
            parse_profile_file("1.0:0.5,0.5:0.5\n")

    def test_chart_shape(self):
        profiles = parse_profile_file(self.fixture_line())
        corrected = [DensityProfile(t=p.t, sigma=np.zeros_like(p.sigma), delta=p.delta)
                     for p in profiles]
        chart = profile_chart(profiles, corrected)
        assert chart.pixels.shape == (128, 256, 3)
        assert chart.pixels.min() >= 0.0 and chart.pixels.max() <= 1.0


class TestThreadsAndUsage:
    def test_flag_beats_env(self, monkeypatch):
        monkeypatch.setenv("CLEANFIELD_THREADS", "7")
        assert resolve_threads(2) == 2
        assert resolve_threads(None) == 7

    def test_env_fallback_invalid(self, monkeypatch):
        monkeypatch.setenv("CLEANFIELD_THREADS", "many")
        with pytest.raises(UsageError):
            resolve_threads(None)

    def test_nonpositive_rejected(self):
        with pytest.raises(UsageError):
            resolve_threads(0)

    def test_unknown_subcommand(self, capsys):
        assert main(["bogus"]) == 1
        assert capsys.readouterr().err.startswith("error:usage:")

    def test_seed_flag_overrides_config(self, workspace, tmp_path):
        assert main(["gen", "--config", str(workspace / "config.json"), "--seed", "9",
                     "--out", str(tmp_path / "d9")]) == 0
        echoed = load_config(tmp_path / "d9" / "config.json")
        assert echoed.seed == 9
        assert tree_bytes(tmp_path / "d9") != tree_bytes(workspace / "data")
