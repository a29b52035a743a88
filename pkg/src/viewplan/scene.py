"""Procedural ground-truth scenes and posed-image dataset I/O.

Scenes are small arrangements of textured spheres and axis-aligned boxes on
a checkered ground plane, lit by one directional light, rendered by analytic
ray tracing. They stand in for real captures: the renderer here is the
oracle that supplies ground-truth RGB and depth for training data, mission
simulation, and evaluation.

Dataset layout on disk::

    <root>/images/000000.png ...   8-bit RGB
    <root>/manifest.json           schema, intrinsics, camera-to-world poses

The manifest is also the export format for collections gathered during
missions, so external novel-view trainers can consume them directly.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .geometry import (CameraView, Intrinsics, Pose, SphericalViewpoint,
                       fibonacci_hemisphere, nearest_rotation,
                       pose_from_spherical, spherical_from_position)

MANIFEST_SCHEMA_VERSION = 1
MANIFEST_NAME = "manifest.json"
IMAGE_DIR = "images"

_HIT_EPS = 1e-6
_AMBIENT = 0.15


class DatasetError(Exception):
    """Base class for posed-dataset loading failures."""


class ManifestMissingError(DatasetError):
    pass


class ManifestSchemaError(DatasetError):
    pass


class ImageMissingError(DatasetError):
    pass


class RotationError(DatasetError):
    pass


@dataclass(frozen=True)
class Texture:
    """Procedural albedo: solid colour, 3D checker, or sinusoidal stripes."""

    kind: str
    colour_a: np.ndarray
    colour_b: np.ndarray
    scale: float = 1.0
    phase: float = 0.0

    def albedo(self, points: np.ndarray) -> np.ndarray:
        a = np.asarray(self.colour_a, dtype=np.float64)
        b = np.asarray(self.colour_b, dtype=np.float64)
        if self.kind == "solid":
            return np.broadcast_to(a, points.shape).copy()
        if self.kind == "checker":
            cells = np.floor(points * self.scale + self.phase).astype(np.int64)
            parity = (cells.sum(axis=-1) % 2).astype(np.float64)[..., None]
            return a * (1.0 - parity) + b * parity
        if self.kind == "stripes":
            s = points.sum(axis=-1) * self.scale * 2.0 * math.pi + self.phase
            w = (0.5 * (1.0 + np.sin(s)))[..., None]
            return a * (1.0 - w) + b * w
        raise ValueError(f"unknown texture kind {self.kind!r}")


@dataclass(frozen=True)
class Sphere:
    centre: np.ndarray
    radius: float
    texture: Texture


@dataclass(frozen=True)
class Box:
    centre: np.ndarray
    half_size: np.ndarray
    texture: Texture


@dataclass(frozen=True)
class GroundPlane:
    height: float
    texture: Texture


@dataclass(frozen=True)
class DirectionalLight:
    direction: np.ndarray  # unit vector pointing towards the light
    intensity: float


@dataclass(frozen=True)
class Scene:
    seed: int
    primitives: tuple
    ground: GroundPlane
    light: DirectionalLight
    background: np.ndarray
    hemisphere_radius: float = 2.0
    centre: np.ndarray = field(default_factory=lambda: np.zeros(3))


@dataclass(frozen=True)
class PosedImage:
    """An RGB image in [0, 1] together with the camera that captured it."""

    image: np.ndarray
    view: CameraView

    def __post_init__(self):
        img = np.asarray(self.image, dtype=np.float64)
        if img.ndim != 3 or img.shape[2] != 3:
            raise ValueError(f"expected an HxWx3 image, got shape {img.shape}")
        if img.min() < 0.0 or img.max() > 1.0:
            raise ValueError("image channels must lie in [0, 1]")
        object.__setattr__(self, "image", img)


@dataclass
class PosedImageSet:
    scene_id: str
    images: list
    split: dict = field(default_factory=dict)

    def __post_init__(self):
        sizes = {(p.view.intrinsics.width, p.view.intrinsics.height)
                 for p in self.images}
        if len(sizes) > 1:
            raise ValueError(f"images in one set must share a resolution, got {sizes}")

    def __len__(self):
        return len(self.images)


def _random_colour(rng) -> np.ndarray:
    return rng.uniform(0.15, 1.0, size=3)


def _random_texture(rng, high_frequency: bool) -> Texture:
    kind = rng.choice(["solid", "checker", "stripes"])
    scale = rng.uniform(4.0, 10.0) if high_frequency else rng.uniform(1.0, 3.0)
    return Texture(kind=str(kind), colour_a=_random_colour(rng),
                   colour_b=_random_colour(rng), scale=float(scale),
                   phase=float(rng.uniform(0.0, 6.0)))


def build_scene(seed: int, difficulty: str = "simple",
                hemisphere_radius: float = 2.0) -> Scene:
    """Deterministic procedural scene.

    ``simple`` places 1-2 primitives with gentle textures, ``cluttered``
    4-8 with high-frequency ones. All primitives stay inside half the
    hemisphere radius so every viewpoint keeps them in frame.
    """
    if difficulty not in ("simple", "cluttered"):
        raise ValueError(f"unknown difficulty {difficulty!r}")
    rng = np.random.default_rng(seed)
    cluttered = difficulty == "cluttered"
    n_prims = int(rng.integers(4, 9)) if cluttered else int(rng.integers(1, 3))

    bound = 0.5 * hemisphere_radius
    prims = []
    for _ in range(n_prims):
        size = float(rng.uniform(0.10, 0.22)) * bound
        # keep centre + extent inside the containment bound
        max_offset = bound - size * 1.8
        angle = rng.uniform(0.0, 2.0 * math.pi)
        dist = rng.uniform(0.0, max_offset)
        centre = np.array([dist * math.cos(angle), dist * math.sin(angle), 0.0])
        tex = _random_texture(rng, high_frequency=cluttered)
        if rng.uniform() < 0.5:
            centre[2] = size
            prims.append(Sphere(centre=centre, radius=size, texture=tex))
        else:
            half = np.array([size, size, size]) * rng.uniform(0.6, 1.0, size=3)
            centre[2] = half[2]
            prims.append(Box(centre=centre, half_size=half, texture=tex))

    ground_tex = Texture(kind="checker",
                         colour_a=np.full(3, float(rng.uniform(0.25, 0.45))),
                         colour_b=np.full(3, float(rng.uniform(0.6, 0.85))),
                         scale=float(rng.uniform(1.5, 3.0)))
    light_az = rng.uniform(0.0, 2.0 * math.pi)
    light_el = rng.uniform(math.radians(35.0), math.radians(70.0))
    light_dir = np.array([math.cos(light_el) * math.cos(light_az),
                          math.cos(light_el) * math.sin(light_az),
                          math.sin(light_el)])
    background = np.array([rng.uniform(0.45, 0.6), rng.uniform(0.55, 0.7),
                           rng.uniform(0.7, 0.9)])
    return Scene(seed=int(seed), primitives=tuple(prims),
                 ground=GroundPlane(height=0.0, texture=ground_tex),
                 light=DirectionalLight(direction=light_dir,
                                        intensity=float(rng.uniform(0.65, 0.85))),
                 background=background, hemisphere_radius=float(hemisphere_radius))


def _intersect_sphere(origin, dirs, sphere: Sphere):
    oc = origin - sphere.centre
    b = dirs @ oc
    c = float(oc @ oc) - sphere.radius ** 2
    disc = b * b - c
    hit = disc > 0.0
    sq = np.sqrt(np.where(hit, disc, 0.0))
    t0 = -b - sq
    t1 = -b + sq
    t = np.where(t0 > _HIT_EPS, t0, t1)
    t = np.where(hit & (t > _HIT_EPS), t, np.inf)
    t_safe = np.where(np.isfinite(t), t, 1.0)
    points = origin + dirs * t_safe[:, None]
    normals = (points - sphere.centre) / sphere.radius
    return t, normals


def _intersect_box(origin, dirs, box: Box):
    lo = box.centre - box.half_size
    hi = box.centre + box.half_size
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        t_lo = (lo - origin) * inv
        t_hi = (hi - origin) * inv
    t_min = np.minimum(t_lo, t_hi)
    t_max = np.maximum(t_lo, t_hi)
    # rays parallel to a slab: inside iff origin within that slab
    par = np.abs(dirs) < 1e-12
    inside = (origin >= lo) & (origin <= hi)
    t_min = np.where(par, np.where(inside, -np.inf, np.inf), t_min)
    t_max = np.where(par, np.where(inside, np.inf, -np.inf), t_max)
    t_near = t_min.max(axis=1)
    t_far = t_max.min(axis=1)
    hit = (t_near <= t_far) & (t_far > _HIT_EPS)
    t = np.where(t_near > _HIT_EPS, t_near, t_far)
    t = np.where(hit, t, np.inf)
    t_safe = np.where(np.isfinite(t), t, 1.0)
    points = origin + dirs * t_safe[:, None]
    # face normal: axis with the largest normalised excursion from the centre
    rel = (points - box.centre) / box.half_size
    axis = np.argmax(np.abs(rel), axis=1)
    normals = np.zeros_like(points)
    idx = np.arange(points.shape[0])
    normals[idx, axis] = np.sign(rel[idx, axis])
    return t, normals


def _intersect_ground(origin, dirs, ground: GroundPlane):
    dz = dirs[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        t = (ground.height - origin[2]) / dz
    t = np.where((np.abs(dz) > 1e-12) & (t > _HIT_EPS), t, np.inf)
    normals = np.zeros((dirs.shape[0], 3))
    normals[:, 2] = 1.0
    return t, normals


def _pixel_grid(intr: Intrinsics):
    u = (np.arange(intr.width) + 0.5)
    v = (np.arange(intr.height) + 0.5)
    uu, vv = np.meshgrid(u, v)
    return uu.ravel(), vv.ravel()


def _view_ray_directions(view: CameraView):
    intr = view.intrinsics
    uu, vv = _pixel_grid(intr)
    d_cam = np.stack([(uu - intr.cx) / intr.fx, (vv - intr.cy) / intr.fy,
                      np.ones_like(uu)], axis=1)
    d_world = d_cam @ view.pose.rotation.T
    return d_world / np.linalg.norm(d_world, axis=1, keepdims=True)


def render_view(scene: Scene, view: CameraView, resolution=None,
                return_depth: bool = False):
    """Ray-trace the scene from ``view``.

    Closest-hit shading is Lambertian with a constant ambient term:
    ``colour = clip(albedo * intensity * max(0, n . l) + ambient, 0, 1)``.
    Misses produce the background colour and +inf depth.
    """
    intr = view.intrinsics
    if resolution is not None:
        intr = intr.rescaled(int(resolution[0]), int(resolution[1]))
        view = CameraView(intr, view.pose)
    origin = view.pose.centre
    dirs = _view_ray_directions(view)
    n_rays = dirs.shape[0]

    best_t = np.full(n_rays, np.inf)
    best_n = np.zeros((n_rays, 3))
    best_albedo = np.broadcast_to(scene.background, (n_rays, 3)).copy()

    surfaces = list(scene.primitives) + [scene.ground]
    for prim in surfaces:
        if isinstance(prim, Sphere):
            t, normals = _intersect_sphere(origin, dirs, prim)
            tex = prim.texture
        elif isinstance(prim, Box):
            t, normals = _intersect_box(origin, dirs, prim)
            tex = prim.texture
        else:
            t, normals = _intersect_ground(origin, dirs, prim)
            tex = prim.texture
        closer = t < best_t
        if not closer.any():
            continue
        points = origin + dirs[closer] * t[closer, None]
        best_albedo[closer] = tex.albedo(points)
        best_n[closer] = normals[closer]
        best_t[closer] = t[closer]

    hit = np.isfinite(best_t)
    lambert = np.clip(best_n @ scene.light.direction, 0.0, None)
    shaded = np.clip(best_albedo * (scene.light.intensity * lambert[:, None])
                     + _AMBIENT, 0.0, 1.0)
    colours = np.where(hit[:, None], shaded, best_albedo)

    image = colours.reshape(intr.height, intr.width, 3)
    posed = PosedImage(image=image, view=view)
    if return_depth:
        return posed, best_t.reshape(intr.height, intr.width)
    return posed


def default_intrinsics(width: int, height: int, fov_deg: float = 55.0) -> Intrinsics:
    f = 0.5 * width / math.tan(math.radians(fov_deg) / 2.0)
    return Intrinsics(fx=f, fy=f, cx=width / 2.0, cy=height / 2.0,
                      width=width, height=height)


def generate_dataset(scene: Scene, n_views: int, resolution, out_path,
                     min_elevation: float = math.radians(10.0),
                     fov_deg: float = 55.0) -> PosedImageSet:
    """Render ``n_views`` lattice viewpoints and persist them with a manifest."""
    if n_views < 2:
        raise ValueError("a dataset needs at least 2 views")
    width, height = int(resolution[0]), int(resolution[1])
    intr = default_intrinsics(width, height, fov_deg)
    viewpoints = fibonacci_hemisphere(n_views, scene.hemisphere_radius,
                                      scene.centre, min_elevation)
    images = [render_view(scene, CameraView(intr, pose_from_spherical(v)))
              for v in viewpoints]
    dataset = PosedImageSet(scene_id=f"scene-{scene.seed:04d}", images=images)
    save_posed_dataset(dataset, out_path)
    return dataset


def save_posed_dataset(dataset: PosedImageSet, out_path) -> Path:
    out = Path(out_path)
    (out / IMAGE_DIR).mkdir(parents=True, exist_ok=True)
    frames = []
    intr = dataset.images[0].view.intrinsics
    for i, posed in enumerate(dataset.images):
        rel = f"{IMAGE_DIR}/{i:06d}.png"
        arr = np.clip(np.round(posed.image * 255.0), 0, 255).astype(np.uint8)
        Image.fromarray(arr).save(out / rel)
        frames.append({"file": rel,
                       "camera_to_world": posed.view.pose.matrix().ravel().tolist()})
    manifest = {"schema_version": MANIFEST_SCHEMA_VERSION,
                "units": "metres",
                "scene_id": dataset.scene_id,
                "intrinsics": intr.to_dict(),
                "frames": frames}
    if dataset.split:
        manifest["split"] = dataset.split
    with open(out / MANIFEST_NAME, "w") as fh:
        json.dump(manifest, fh, indent=1)
    return out


def load_posed_dataset(path) -> PosedImageSet:
    """Load a dataset directory written by :func:`save_posed_dataset`.

    Raises a distinct :class:`DatasetError` subclass for a missing manifest,
    malformed frame entries, missing image files, and non-orthonormal
    rotations (tolerance 1e-4).
    """
    root = Path(path)
    manifest_path = root / MANIFEST_NAME
    if not manifest_path.is_file():
        raise ManifestMissingError(f"no {MANIFEST_NAME} under {root}")
    with open(manifest_path) as fh:
        manifest = json.load(fh)

    version = manifest.get("schema_version")
    if version != MANIFEST_SCHEMA_VERSION:
        raise ManifestSchemaError(
            f"unsupported manifest schema {version!r}, expected {MANIFEST_SCHEMA_VERSION}")
    for key in ("intrinsics", "frames"):
        if key not in manifest:
            raise ManifestSchemaError(f"manifest is missing the {key!r} section")
    intr = Intrinsics.from_dict(manifest["intrinsics"])

    images = []
    for i, frame in enumerate(manifest["frames"]):
        if "file" not in frame or "camera_to_world" not in frame:
            raise ManifestSchemaError(f"frame {i} lacks file/camera_to_world")
        pose_values = np.asarray(frame["camera_to_world"], dtype=np.float64)
        if pose_values.size != 16:
            raise ManifestSchemaError(
                f"frame {i}: camera_to_world holds {pose_values.size} numbers, expected 16")
        matrix = pose_values.reshape(4, 4)
        rot = matrix[:3, :3]
        if (not np.allclose(rot.T @ rot, np.eye(3), atol=1e-4)
                or np.linalg.det(rot) < 0):
            raise RotationError(f"frame {i}: rotation is not orthonormal within 1e-4")
        image_path = root / frame["file"]
        if not image_path.is_file():
            raise ImageMissingError(f"frame {i}: image file {frame['file']} not found")
        arr = np.asarray(Image.open(image_path).convert("RGB"), dtype=np.float64) / 255.0
        pose = Pose(nearest_rotation(rot), matrix[:3, 3])
        images.append(PosedImage(image=arr, view=CameraView(intr, pose)))

    return PosedImageSet(scene_id=str(manifest.get("scene_id", root.name)),
                         images=images, split=manifest.get("split", {}))


class SceneMeasurementOracle:
    """Measurement source for missions in a procedural scene: renders the
    ground-truth image at any requested hemisphere viewpoint."""

    def __init__(self, scene: Scene, intrinsics: Intrinsics):
        self.scene = scene
        self.intrinsics = intrinsics

    @property
    def radius(self) -> float:
        return self.scene.hemisphere_radius

    @property
    def centre(self) -> np.ndarray:
        return self.scene.centre

    def measure(self, viewpoint: SphericalViewpoint) -> PosedImage:
        view = CameraView(self.intrinsics, pose_from_spherical(viewpoint))
        return render_view(self.scene, view)

    def measure_at(self, viewpoint: SphericalViewpoint, resolution) -> PosedImage:
        view = CameraView(self.intrinsics.rescaled(*resolution),
                          pose_from_spherical(viewpoint))
        return render_view(self.scene, view)


class PosedSetOracle:
    """Measurement source over a finite posed-image set (discrete-candidate
    missions): views can only be taken from the unselected remainder."""

    def __init__(self, dataset: PosedImageSet, centre=(0.0, 0.0, 0.0)):
        self.dataset = dataset
        self.centre = np.asarray(centre, dtype=np.float64)
        self._viewpoints = [spherical_from_position(p.view.pose.centre, self.centre)
                            for p in dataset.images]
        self._taken = set()

    @property
    def intrinsics(self) -> Intrinsics:
        return self.dataset.images[0].view.intrinsics

    def remaining(self) -> list:
        return [(i, self._viewpoints[i]) for i in range(len(self.dataset))
                if i not in self._taken]

    def viewpoint(self, index: int) -> SphericalViewpoint:
        return self._viewpoints[index]

    def measure_index(self, index: int) -> PosedImage:
        if index in self._taken:
            raise ValueError(f"view {index} was already measured")
        self._taken.add(index)
        return self.dataset.images[index]
