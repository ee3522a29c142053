"""Run configuration: one JSON object per section, every field optional, unknown
keys rejected by path. The resolved form written back by ``dump_config`` parses
to an equal ``RunConfig``."""
from __future__ import annotations

import json
from dataclasses import dataclass, field as dc_field

from .errors import ConfigError
from .render import CorrectionParams, RenderOptions
from .scenes import SceneSpec
from .train import TrainConfig


@dataclass(frozen=True)
class CameraSection:
    focal: float = 80.0
    resolution: tuple[int, int] = (64, 64)


@dataclass(frozen=True)
class DatasetSection:
    n_views: int = 25
    ring_radius: float = 2.0
    test_stride: int = 5
    elevation_jitter: float = 0.15


@dataclass(frozen=True)
class FieldSection:
    resolution: tuple[int, int, int] = (64, 64, 64)
    bounds_scale: float = 1.2


@dataclass(frozen=True)
class TrainSection:
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
    stratified: bool = True


@dataclass(frozen=True)
class CorrectionSection:
    enabled: bool = True
    sigma_thres: float = 0.4
    m: int = 1
    relative_mode: bool = True


@dataclass(frozen=True)
class ShSection:
    l_max: int = 3
    split_degree: int = 1
    n_fit_directions: int = 64


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    scene: SceneSpec = dc_field(default_factory=SceneSpec)
    camera: CameraSection = dc_field(default_factory=CameraSection)
    dataset: DatasetSection = dc_field(default_factory=DatasetSection)
    field: FieldSection = dc_field(default_factory=FieldSection)
    train: TrainSection = dc_field(default_factory=TrainSection)
    correction: CorrectionSection = dc_field(default_factory=CorrectionSection)
    sh: ShSection = dc_field(default_factory=ShSection)

    def correction_params(self) -> CorrectionParams | None:
        if not self.correction.enabled:
            return None
        return CorrectionParams(
            sigma_thres=self.correction.sigma_thres,
            m=self.correction.m,
            relative_mode=self.correction.relative_mode,
        )

    def train_config(self, decomposition: bool = True, correction: bool = True) -> TrainConfig:
        """Assemble the trainer's view of this config; the two flags implement
        the ablation switches (zero regularizer weights / no keep-mask)."""
        lam_vi = self.train.lambda_vi if decomposition else 0.0
        lam_vd = self.train.lambda_vd if decomposition else 0.0
        return TrainConfig(
            iterations=self.train.iterations,
            batch_rays=self.train.batch_rays,
            n_samples=self.train.n_samples,
            learning_rate=self.train.learning_rate,
            adam_beta1=self.train.adam_beta1,
            adam_beta2=self.train.adam_beta2,
            adam_epsilon=self.train.adam_epsilon,
            lambda_vi=lam_vi,
            lambda_vd=lam_vd,
            reg_position_fraction=self.train.reg_position_fraction,
            seed=self.seed,
            correction=self.correction_params() if correction else None,
            l_max=self.sh.l_max,
            split_degree=self.sh.split_degree,
            n_fit_directions=self.sh.n_fit_directions,
            grid_resolution=self.field.resolution,
            stratified=self.train.stratified,
        )

    def render_options(self, near: float, far: float, vi_only: bool = False,
                       correction: bool = True) -> RenderOptions:
        return RenderOptions(
            n_samples=self.train.n_samples,
            stratified=self.train.stratified,
            seed=self.seed,
            near=near,
            far=far,
            correction=self.correction_params() if correction else None,
            vi_only=vi_only,
        )

    def dataset_kwargs(self) -> dict:
        return {
            "n_views": self.dataset.n_views,
            "resolution": self.camera.resolution,
            "ring_radius": self.dataset.ring_radius,
            "seed": self.seed,
            "focal": self.camera.focal,
            "test_stride": self.dataset.test_stride,
            "elevation_jitter": self.dataset.elevation_jitter,
        }


_SECTIONS = {
    "camera": CameraSection,
    "dataset": DatasetSection,
    "field": FieldSection,
    "train": TrainSection,
    "correction": CorrectionSection,
    "sh": ShSection,
}
_TUPLE_FIELDS = {"resolution"}
_SPHERE_KEYS = {"center", "radius", "albedo", "specular_strength", "shininess"}
_SCENE_KEYS = {"spheres", "light_direction", "ambient", "background"}


def config_to_dict(config: RunConfig) -> dict:
    out = {"seed": config.seed, "scene": config.scene.to_dict()}
    for name, cls in _SECTIONS.items():
        section = getattr(config, name)
        fields = {}
        for f in cls.__dataclass_fields__:
            value = getattr(section, f)
            fields[f] = list(value) if isinstance(value, tuple) else value
        out[name] = fields
    return out


def _require_mapping(value, path: str) -> dict:
    if not isinstance(value, dict):
        raise ConfigError(f"section '{path}' must be an object, got {type(value).__name__}")
    return value


def _check_keys(given: dict, known, path: str) -> None:
    for key in given:
        if key not in known:
            where = f"{path}.{key}" if path else key
            raise ConfigError(f"unknown config key '{where}'")


def _scene_from_dict(data: dict) -> SceneSpec:
    _check_keys(data, _SCENE_KEYS, "scene")
    for i, sphere in enumerate(data.get("spheres", [])):
        _require_mapping(sphere, f"scene.spheres[{i}]")
        _check_keys(sphere, _SPHERE_KEYS, f"scene.spheres[{i}]")
    merged = SceneSpec().to_dict()
    merged.update(data)
    return SceneSpec.from_dict(merged)


def config_from_dict(data: dict) -> RunConfig:
    data = _require_mapping(data, "<top>")
    _check_keys(data, {"seed", "scene", *_SECTIONS}, "")
    kwargs = {}
    if "seed" in data:
        kwargs["seed"] = data["seed"]
    if "scene" in data:
        kwargs["scene"] = _scene_from_dict(_require_mapping(data["scene"], "scene"))
    for name, cls in _SECTIONS.items():
        if name not in data:
            continue
        section = _require_mapping(data[name], name)
        _check_keys(section, cls.__dataclass_fields__, name)
        values = {
            k: tuple(v) if k in _TUPLE_FIELDS and isinstance(v, list) else v
            for k, v in section.items()
        }
        kwargs[name] = cls(**values)
    return RunConfig(**kwargs)


def parse_config(text: str) -> RunConfig:
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    return config_from_dict(data)


def dump_config(config: RunConfig) -> str:
    return json.dumps(config_to_dict(config), indent=2, sort_keys=True) + "\n"


def load_config(path) -> RunConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config(fh.read())


def save_config(config: RunConfig, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(dump_config(config))
