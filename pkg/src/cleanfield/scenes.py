"""Analytic ground truth: spheres with Lambertian plus Phong-specular shading,
posed ring cameras, oracle density profiles, and the on-disk dataset format."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field as dc_field
from pathlib import Path

import numpy as np

from .cameras import CameraPose, look_at, pixel_rays
from .errors import FormatError, InvalidInputError
from .image import Image, read_ppm, write_ppm
from .render import DensityProfile, Ray, sample_depths

SIGMA_SOLID = 50.0
BOUNDS_SCALE = 1.2


@dataclass(frozen=True)
class Sphere:
    center: tuple[float, float, float]
    radius: float
    albedo: tuple[float, float, float]
    specular_strength: float = 0.0
    shininess: float = 1.0

    def __post_init__(self):
        if self.radius <= 0.0:
            raise InvalidInputError(f"sphere radius must be positive, got {self.radius}")
        if self.specular_strength < 0.0:
            raise InvalidInputError("specular_strength must be non-negative")
        if self.shininess < 1.0:
            raise InvalidInputError("shininess must be at least 1")


@dataclass(frozen=True)
class SceneSpec:
    spheres: tuple[Sphere, ...] = (
        Sphere(center=(0.0, 0.0, 0.0), radius=0.5, albedo=(0.8, 0.25, 0.25),
               specular_strength=0.8, shininess=64.0),
    )
    light_direction: tuple[float, float, float] = (0.4, -0.35, 0.85)
    ambient: float = 0.1
    background: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        if not self.spheres:
            raise InvalidInputError("scene needs at least one sphere")
        if not 0.0 <= self.ambient <= 1.0:
            raise InvalidInputError(f"ambient must be in [0, 1], got {self.ambient}")
        if np.linalg.norm(self.light_direction) < 1e-12:
            raise InvalidInputError("light_direction must be nonzero")

    def centroid(self) -> np.ndarray:
        return np.mean([s.center for s in self.spheres], axis=0)

    def to_dict(self) -> dict:
        return {
            "spheres": [
                {
                    "center": list(s.center),
                    "radius": s.radius,
                    "albedo": list(s.albedo),
                    "specular_strength": s.specular_strength,
                    "shininess": s.shininess,
                }
                for s in self.spheres
            ],
            "light_direction": list(self.light_direction),
            "ambient": self.ambient,
            "background": list(self.background),
        }

    @staticmethod
    def from_dict(data: dict) -> "SceneSpec":
        spheres = tuple(
            Sphere(
                center=tuple(s["center"]),
                radius=s["radius"],
                albedo=tuple(s["albedo"]),
                specular_strength=s.get("specular_strength", 0.0),
                shininess=s.get("shininess", 1.0),
            )
            for s in data["spheres"]
        )
        return SceneSpec(
            spheres=spheres,
            light_direction=tuple(data["light_direction"]),
            ambient=data["ambient"],
            background=tuple(data["background"]),
        )


def scene_bounds(spec: SceneSpec, scale: float = BOUNDS_SCALE) -> np.ndarray:
    """Axis-aligned box around all spheres, inflated about its center."""
    lo = np.min([np.array(s.center) - s.radius for s in spec.spheres], axis=0)
    hi = np.max([np.array(s.center) + s.radius for s in spec.spheres], axis=0)
    mid, half = (lo + hi) / 2.0, (hi - lo) / 2.0
    return np.array([mid - scale * half, mid + scale * half])


class SceneOracle:
    """Closed-form ray-sphere intersection and Phong shading."""

    def __init__(self, spec: SceneSpec):
        for i, a in enumerate(spec.spheres):
            for b in spec.spheres[i + 1:]:
                gap = np.linalg.norm(np.array(a.center) - b.center)
                if gap <= a.radius + b.radius:
                    raise InvalidInputError(
                        f"spheres at {a.center} and {b.center} overlap (distance {gap:.4g})"
                    )
        self.spec = spec
        self.centers = np.array([s.center for s in spec.spheres], dtype=np.float64)
        self.radii = np.array([s.radius for s in spec.spheres], dtype=np.float64)
        self.albedos = np.array([s.albedo for s in spec.spheres], dtype=np.float64)
        self.spec_strengths = np.array([s.specular_strength for s in spec.spheres])
        self.shininesses = np.array([s.shininess for s in spec.spheres])
        light = np.asarray(spec.light_direction, dtype=np.float64)
        self.light = light / np.linalg.norm(light)

    def intersect(self, origins: np.ndarray, dirs: np.ndarray):
        """Nearest positive intersection per ray.

        Returns (hit (B,), t_hit (B,), sphere_index (B,)); t_hit is inf on miss.
        """
        oc = origins[:, None, :] - self.centers[None, :, :]  # (B, S, 3)
        b_half = np.einsum("bsc,bc->bs", oc, dirs)
        c = np.einsum("bsc,bsc->bs", oc, oc) - self.radii[None, :] ** 2
        disc = b_half**2 - c
        sqrt_disc = np.sqrt(np.maximum(disc, 0.0))
        t_near = -b_half - sqrt_disc
        t_far = -b_half + sqrt_disc
        eps = 1e-9
        t_candidate = np.where(t_near > eps, t_near, np.where(t_far > eps, t_far, np.inf))
        t_candidate = np.where(disc >= 0.0, t_candidate, np.inf)
        sphere_index = np.argmin(t_candidate, axis=1)
        t_hit = np.min(t_candidate, axis=1)
        return np.isfinite(t_hit), t_hit, sphere_index

    def shade(self, points: np.ndarray, dirs: np.ndarray, sphere_index: np.ndarray) -> np.ndarray:
        """Phong shading at surface points: ambient + (1 - ambient) diffuse on
        the albedo, plus a white specular lobe."""
        centers = self.centers[sphere_index]
        radii = self.radii[sphere_index]
        normals = (points - centers) / radii[:, None]
        albedo = self.albedos[sphere_index]
        n_dot_l = np.einsum("bc,c->b", normals, self.light)
        diffuse = (1.0 - self.spec.ambient) * np.maximum(n_dot_l, 0.0)
        reflect = 2.0 * n_dot_l[:, None] * normals - self.light  # light mirrored about n
        r_dot_v = np.maximum(np.einsum("bc,bc->b", reflect, -dirs), 0.0)
        spec_term = self.spec_strengths[sphere_index] * r_dot_v ** self.shininesses[sphere_index]
        color = (self.spec.ambient + diffuse)[:, None] * albedo + spec_term[:, None]
        return color

    def ray_colors(self, origins: np.ndarray, dirs: np.ndarray) -> np.ndarray:
        """Shaded color per ray, background where nothing is hit; unclamped."""
        hit, t_hit, sphere_index = self.intersect(origins, dirs)
        colors = np.tile(np.asarray(self.spec.background, dtype=np.float64), (origins.shape[0], 1))
        if np.any(hit):
            pts = origins[hit] + t_hit[hit, None] * dirs[hit]
            colors[hit] = self.shade(pts, dirs[hit], sphere_index[hit])
        return colors

    def contains(self, points: np.ndarray, dilation: float = 0.0) -> np.ndarray:
        """True for points inside any sphere inflated by ``dilation``."""
        d = np.linalg.norm(points[:, None, :] - self.centers[None, :, :], axis=2)
        return np.any(d < self.radii[None, :] + dilation, axis=1)


def generate_scene(spec: SceneSpec) -> SceneOracle:
    return SceneOracle(spec)


def oracle_render(scene: SceneOracle, camera: CameraPose) -> Image:
    origins, dirs = pixel_rays(camera)
    colors = scene.ray_colors(origins, dirs)
    w, h = camera.resolution
    return Image(colors.reshape(h, w, 3))


def oracle_density(scene: SceneOracle, ray: Ray, k: int) -> DensityProfile:
    """Ideal plateau profile: sigma_solid at bin-center depths inside any
    sphere, zero elsewhere."""
    t, delta = sample_depths(ray.near, ray.far, k, 1, stratified=False)
    pts = ray.origin + t[0][:, None] * ray.direction
    sigma = np.where(scene.contains(pts), SIGMA_SOLID, 0.0)
    return DensityProfile(t=t[0], sigma=sigma, delta=delta[0])


@dataclass
class DatasetView:
    camera: CameraPose
    image: Image
    is_test: bool


@dataclass
class Dataset:
    views: list[DatasetView]
    scene: SceneSpec
    near: float
    far: float

    def split(self, test: bool) -> list[DatasetView]:
        return [v for v in self.views if v.is_test == test]


def make_dataset(
    spec: SceneSpec,
    n_views: int = 25,
    resolution: tuple[int, int] = (64, 64),
    ring_radius: float = 2.0,
    seed: int = 0,
    focal: float = 80.0,
    test_stride: int = 5,
    elevation_jitter: float = 0.15,
) -> Dataset:
    """Ring of cameras around the scene centroid with seeded elevation jitter;
    ground truth from the analytic oracle; every ``test_stride``-th view held out."""
    if n_views < 2:
        raise InvalidInputError(f"need at least 2 views, got {n_views}")
    scene = generate_scene(spec)
    centroid = spec.centroid()
    rng = np.random.default_rng(seed)
    elevations = rng.uniform(-elevation_jitter, elevation_jitter, size=n_views)
    w, h = resolution
    near = max(0.05, ring_radius - 1.5)
    far = ring_radius + 1.5
    views = []
    for i in range(n_views):
        azimuth = 2.0 * math.pi * i / n_views
        e = elevations[i]
        eye = centroid + ring_radius * np.array(
            [math.cos(azimuth) * math.cos(e), math.sin(azimuth) * math.cos(e), math.sin(e)]
        )
        camera = CameraPose(
            focal=focal, principal=(w / 2.0, h / 2.0), resolution=resolution, c2w=look_at(eye, centroid)
        )
        views.append(
            DatasetView(camera=camera, image=oracle_render(scene, camera), is_test=i % test_stride == 0)
        )
    return Dataset(views=views, scene=spec, near=near, far=far)


def save_dataset(dataset: Dataset, out_dir) -> None:
    """Manifest plus one PPM per view."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, view in enumerate(dataset.views):
        name = f"view_{i:03d}.ppm"
        write_ppm(view.image, out / name)
        entries.append(
            {
                "image": name,
                "pose": [[float(x) for x in row] for row in view.camera.c2w],
                "split": "test" if view.is_test else "train",
            }
        )
    first = dataset.views[0].camera
    manifest = {
        "resolution": list(first.resolution),
        "focal": first.focal,
        "principal": list(first.principal),
        "near": dataset.near,
        "far": dataset.far,
        "scene": dataset.scene.to_dict(),
        "views": entries,
    }
    with open(out / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2)
        fh.write("\n")


def load_dataset(dataset_dir) -> Dataset:
    root = Path(dataset_dir)
    manifest_path = root / "manifest.json"
    if not manifest_path.exists():
        raise FormatError(f"missing manifest: {manifest_path}")
    try:
        manifest = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"malformed manifest {manifest_path}: {exc}") from exc
    try:
        resolution = tuple(manifest["resolution"])
        views = []
        for entry in manifest["views"]:
            camera = CameraPose(
                focal=manifest["focal"],
                principal=tuple(manifest["principal"]),
                resolution=resolution,
                c2w=np.array(entry["pose"], dtype=np.float64),
            )
            views.append(
                DatasetView(
                    camera=camera,
                    image=read_ppm(root / entry["image"]),
                    is_test=entry["split"] == "test",
                )
            )
        return Dataset(
            views=views,
            scene=SceneSpec.from_dict(manifest["scene"]),
            near=manifest["near"],
            far=manifest["far"],
        )
    except KeyError as exc:
        raise FormatError(f"manifest missing key {exc}") from exc
