"""Scene ingestion and synthesis.

On-disk layout of a scene directory:

    cameras.json   array of {id, fx, fy, cx, cy, width, height,
                             qw, qx, qy, qz, tx, ty, tz}
    images/<id>.png        per-view RGB (or pseudo-RGB) frames
    nir/<id>.png           optional grayscale NIR frames, same cameras
    points.json            optional array of {x, y, z, r, g, b}

Quaternions are Hamilton, world-to-camera. All types are immutable after
construction.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, replace

import numpy as np

from .camera import Camera, look_at_pose, matrix_to_quat
from .image_io import load_image, save_image
from .renderer import GaussianCloud, rasterize

__all__ = [
    "Scene",
    "SyntheticSpec",
    "SceneFormatError",
    "load_scene",
    "save_scene",
    "select_train_views",
    "generate_synthetic_scene",
]


class SceneFormatError(ValueError):
    pass


@dataclass(frozen=True)
class Scene:
    cameras: tuple[Camera, ...]
    rgb_images: tuple[np.ndarray, ...]
    nir_images: tuple[np.ndarray, ...] | None = None
    init_points: np.ndarray | None = None   # (M, 3)
    init_colors: np.ndarray | None = None   # (M, 3)
    train_ids: tuple[int, ...] = ()
    test_ids: tuple[int, ...] = ()
    name: str = "scene"

    def __post_init__(self):
        if len(self.cameras) != len(self.rgb_images):
            raise SceneFormatError("camera/image count mismatch")
        if self.nir_images is not None and len(self.nir_images) != len(self.cameras):
            raise SceneFormatError(
                f"{len(self.rgb_images)} rgb vs {len(self.nir_images)} nir views")
        if set(self.train_ids) & set(self.test_ids):
            raise SceneFormatError("train and test splits overlap")

    @property
    def n_views(self) -> int:
        return len(self.cameras)

    @property
    def has_nir(self) -> bool:
        return self.nir_images is not None

    def view_index(self, view_id: int) -> int:
        for k, cam in enumerate(self.cameras):
            if cam.view_id == view_id:
                return k
        raise KeyError(f"no view with id {view_id}")


@dataclass(frozen=True)
class SyntheticSpec:
    n_gaussians: int = 20
    n_views: int = 10
    image_size: int = 64
    seed: int = 0
    multispectral: bool = False

    def __post_init__(self):
        if min(self.n_gaussians, self.n_views, self.image_size) < 1:
            raise ValueError("counts must be >= 1")
        if self.image_size % 2:
            raise ValueError("image_size must be even")


def _load_cameras(path: str) -> list[Camera]:
    try:
        with open(path) as f:
            raw = json.load(f)
    except json.JSONDecodeError as exc:
        raise SceneFormatError(f"malformed JSON in {path}: {exc}") from exc
    cams = []
    for entry in raw:
        try:
            cams.append(Camera(
                fx=float(entry["fx"]), fy=float(entry["fy"]),
                cx=float(entry["cx"]), cy=float(entry["cy"]),
                width=int(entry["width"]), height=int(entry["height"]),
                quat=np.array([entry["qw"], entry["qx"], entry["qy"], entry["qz"]],
                              dtype=np.float64),
                t=np.array([entry["tx"], entry["ty"], entry["tz"]], dtype=np.float64),
                view_id=int(entry["id"])))
        except KeyError as exc:
            raise SceneFormatError(f"camera entry missing field {exc}") from exc
    cams.sort(key=lambda c: c.view_id)
    return cams


def load_scene(directory: str | os.PathLike, multispectral: bool = False) -> Scene:
    """Read a scene directory; views are sorted by id."""
    directory = str(directory)
    cam_path = os.path.join(directory, "cameras.json")
    if not os.path.isfile(cam_path):
        raise FileNotFoundError(f"missing cameras file: {cam_path}")
    cameras = _load_cameras(cam_path)

    rgb = tuple(load_image(os.path.join(directory, "images", f"{c.view_id}.png"))
                for c in cameras)
    nir = None
    nir_dir = os.path.join(directory, "nir")
    if multispectral:
        if not os.path.isdir(nir_dir):
            raise FileNotFoundError(f"multispectral scene needs {nir_dir}")
    if os.path.isdir(nir_dir):
        have = {os.path.splitext(n)[0] for n in os.listdir(nir_dir)
                if n.endswith(".png")}
        want = {str(c.view_id) for c in cameras}
        if have != want:
            raise SceneFormatError(
                f"nir/ holds views {sorted(have)}, cameras declare {sorted(want)}")
        nir = tuple(load_image(os.path.join(nir_dir, f"{c.view_id}.png"))
                    for c in cameras)
        for k, img in enumerate(nir):
            if img.ndim != 2:
                raise SceneFormatError(f"nir/{cameras[k].view_id}.png is not grayscale")

    points = colors = None
    pts_path = os.path.join(directory, "points.json")
    if os.path.isfile(pts_path):
        try:
            with open(pts_path) as f:
                raw = json.load(f)
        except json.JSONDecodeError as exc:
            raise SceneFormatError(f"malformed JSON in {pts_path}: {exc}") from exc
        if raw:
            points = np.array([[p["x"], p["y"], p["z"]] for p in raw], dtype=np.float64)
            colors = np.array([[p["r"], p["g"], p["b"]] for p in raw], dtype=np.float64)

    for cam, img in zip(cameras, rgb):
        if img.shape[:2] != (cam.height, cam.width):
            raise SceneFormatError(
                f"view {cam.view_id}: image is {img.shape[:2]}, camera says "
                f"{(cam.height, cam.width)}")

    return Scene(cameras=tuple(cameras), rgb_images=rgb, nir_images=nir,
                 init_points=points, init_colors=colors,
                 name=os.path.basename(os.path.normpath(directory)))


def save_scene(scene: Scene, directory: str | os.PathLike) -> None:
    """Write a scene in the directory layout load_scene expects."""
    directory = str(directory)
    os.makedirs(os.path.join(directory, "images"), exist_ok=True)
    if scene.has_nir:
        os.makedirs(os.path.join(directory, "nir"), exist_ok=True)
    cams = []
    for cam in scene.cameras:
        q, t = cam.quat, cam.t
        cams.append({"id": cam.view_id, "fx": cam.fx, "fy": cam.fy,
                     "cx": cam.cx, "cy": cam.cy,
                     "width": cam.width, "height": cam.height,
                     "qw": q[0], "qx": q[1], "qy": q[2], "qz": q[3],
                     "tx": t[0], "ty": t[1], "tz": t[2]})
    with open(os.path.join(directory, "cameras.json"), "w") as f:
        json.dump(cams, f, indent=2)
        f.write("\n")
    for cam, img in zip(scene.cameras, scene.rgb_images):
        save_image(img, os.path.join(directory, "images", f"{cam.view_id}.png"))
    if scene.has_nir:
        for cam, img in zip(scene.cameras, scene.nir_images):
            save_image(img, os.path.join(directory, "nir", f"{cam.view_id}.png"),
                       bitdepth=16)
    if scene.init_points is not None:
        pts = [{"x": p[0], "y": p[1], "z": p[2], "r": c[0], "g": c[1], "b": c[2]}
               for p, c in zip(scene.init_points.tolist(),
                               scene.init_colors.tolist())]
        with open(os.path.join(directory, "points.json"), "w") as f:
            json.dump(pts, f, indent=2)
            f.write("\n")


def select_train_views(scene: Scene, n_train: int, protocol: str = "uniform",
                       seed: int = 0) -> Scene:
    """Populate the few-shot split.

    `uniform` spreads the training views as evenly as possible over the
    id-sorted view list (indices floor(i * (V-1) / (n-1)), ties toward the
    lower id); `seeded-random` is a deterministic shuffle.
    """
    v = scene.n_views
    if not 1 <= n_train < v:
        raise ValueError(f"n_train must be in [1, {v - 1}], got {n_train}")
    ids = [cam.view_id for cam in scene.cameras]
    if protocol == "uniform":
        if n_train == 1:
            picks = [0]
        else:
            picks = sorted({i * (v - 1) // (n_train - 1) for i in range(n_train)})
    elif protocol == "seeded-random":
        rng = np.random.default_rng(seed)
        picks = sorted(rng.permutation(v)[:n_train].tolist())
    else:
        raise ValueError(f"unknown protocol {protocol!r}")
    train = tuple(ids[i] for i in picks)
    test = tuple(i for i in ids if i not in train)
    return replace(scene, train_ids=train, test_ids=test)


def _ring_cameras(n_views: int, image_size: int) -> list[Camera]:
    radius, height = 2.6, 0.9
    focal = 1.1 * image_size
    cams = []
    for k in range(n_views):
        angle = 2 * np.pi * k / n_views
        eye = np.array([radius * np.cos(angle), radius * np.sin(angle), height])
        R, t = look_at_pose(eye, np.zeros(3))
        cams.append(Camera(fx=focal, fy=focal,
                           cx=image_size / 2.0, cy=image_size / 2.0,
                           width=image_size, height=image_size,
                           quat=matrix_to_quat(R), t=t, view_id=k))
    return cams


def generate_synthetic_scene(spec: SyntheticSpec) -> tuple[GaussianCloud, Scene]:
    """Deterministic oracle scene: a random cloud on a camera ring, with
    ground-truth views rendered from the cloud itself. Init points are the
    true splat centers with slight positional noise."""
    rng = np.random.default_rng(spec.seed)
    n = spec.n_gaussians
    quats = rng.standard_normal((n, 4))
    quats /= np.linalg.norm(quats, axis=1, keepdims=True)
    opacities = rng.uniform(0.55, 0.95, n)
    cloud = GaussianCloud(
        positions=rng.uniform(-0.45, 0.45, (n, 3)),
        log_scales=np.log(rng.uniform(0.05, 0.14, (n, 3))),
        rotations=quats,
        opacity_logits=np.log(opacities / (1 - opacities)),
        rgb_colors=rng.uniform(0.15, 0.95, (n, 3)),
        nir_intensities=rng.uniform(0.15, 0.95, n) if spec.multispectral else None,
    )
    cameras = _ring_cameras(spec.n_views, spec.image_size)
    rgb = tuple(rasterize(cloud, cam, "rgb", background=0.0).color
                for cam in cameras)
    nir = None
    if spec.multispectral:
        nir = tuple(rasterize(cloud, cam, "nir", background=0.0).color
                    for cam in cameras)
    points = cloud.positions + rng.normal(0.0, 0.02, (n, 3))
    colors = np.clip(cloud.rgb_colors, 0.0, 1.0)
    scene = Scene(cameras=tuple(cameras), rgb_images=rgb, nir_images=nir,
                  init_points=points, init_colors=colors,
                  name=f"synth-seed{spec.seed}")
    return cloud, scene
