"""Procedural volumetric scenes with analytic density/colour, and datasets of them.

Scenes are a handful of Gaussian blobs and soft-edged boxes. Reference images
come from dense ray marching of the analytic field with the same compositing
rule the learned model uses, so the whole pipeline can be exercised without
external data.

Dataset layout on disk::

    <root>/transforms.json      manifest (see README)
    <root>/train/r_000.png ...
    <root>/test/r_000.png ...
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .renderer import (
    WHITE,
    Camera,
    composite,
    generate_rays,
    load_image,
    look_at,
    sample_along_rays,
    save_image,
)

MANIFEST = "transforms.json"
DEFAULT_BBOX = ((-1.0, -1.0, -1.0), (1.0, 1.0, 1.0))


@dataclass
class Primitive:
    kind: str  # "gaussian" or "box"
    center: tuple[float, float, float]
    scale: tuple[float, float, float]  # std-dev per axis (gaussian) or half extent (box)
    density: float
    albedo: tuple[float, float, float]
    softness: float = 0.02  # box edge width

    def __post_init__(self) -> None:
        if self.kind not in ("gaussian", "box"):
            raise ValueError(f"unknown primitive kind {self.kind!r}")
        if self.density < 0:
            raise ValueError("primitive density must be nonnegative")
        if not all(0.0 <= a <= 1.0 for a in self.albedo):
            raise ValueError("albedo must lie in [0, 1]")

    def sigma(self, points: np.ndarray) -> np.ndarray:
        d = (points - np.asarray(self.center)) / np.asarray(self.scale)
        if self.kind == "gaussian":
            return self.density * np.exp(-0.5 * np.sum(d * d, axis=-1))
        # product of logistic edges; exp argument clipped to stay finite
        margin = (np.asarray(self.scale) - np.abs(points - np.asarray(self.center))) / self.softness
        return self.density * np.prod(1.0 / (1.0 + np.exp(-np.clip(margin, -60, 60))), axis=-1)


@dataclass
class SyntheticScene:
    primitives: list[Primitive]
    bbox: np.ndarray = field(default_factory=lambda: np.array(DEFAULT_BBOX))
    scene_id: str = "toy"
    seed: int = 0

    def __post_init__(self) -> None:
        self.bbox = np.asarray(self.bbox, dtype=np.float64).reshape(2, 3)

    def density(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=np.float64)
        out = np.zeros(points.shape[:-1])
        for p in self.primitives:
            out += p.sigma(points)
        return out

    def color(self, points: np.ndarray) -> np.ndarray:
        """Density-weighted mix of primitive albedos (black where empty)."""
        points = np.asarray(points, dtype=np.float64)
        num = np.zeros(points.shape[:-1] + (3,))
        den = np.zeros(points.shape[:-1])
        for p in self.primitives:
            s = p.sigma(points)
            num += s[..., None] * np.asarray(p.albedo)
            den += s
        return np.where(den[..., None] > 0, num / np.where(den > 0, den, 1.0)[..., None], 0.0)

    def to_dict(self) -> dict:
        return {
            "scene_id": self.scene_id,
            "seed": self.seed,
            "bbox": self.bbox.tolist(),
            "primitives": [asdict(p) for p in self.primitives],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticScene":
        prims = [
            Primitive(p["kind"], tuple(p["center"]), tuple(p["scale"]), p["density"],
                      tuple(p["albedo"]), p.get("softness", 0.02))
            for p in d["primitives"]
        ]
        return cls(prims, np.asarray(d["bbox"]), d.get("scene_id", "toy"), d.get("seed", 0))


def generate_scene(
    seed: int,
    n_primitives: int = 4,
    n_boxes: int | None = None,
    bbox=DEFAULT_BBOX,
) -> SyntheticScene:
    """Random blobs and boxes placed inside the central 90% of ``bbox``.

    By default every fourth primitive is a box (the 4-primitive default is
    three blobs and one box).
    """
    if n_primitives < 1:
        raise ValueError("need at least one primitive")
    n_boxes = n_primitives // 4 if n_boxes is None else n_boxes
    rng = np.random.default_rng(seed)
    bbox = np.asarray(bbox, dtype=np.float64).reshape(2, 3)
    mid = 0.5 * (bbox[0] + bbox[1])
    half = 0.45 * (bbox[1] - bbox[0])  # 90% of the box
    prims = []
    for i in range(n_primitives):
        is_box = i >= n_primitives - n_boxes
        if is_box:
            scale = rng.uniform(0.2, 0.4, 3) * half
            reach = scale
            density = float(rng.uniform(30.0, 50.0))
        else:
            scale = np.full(3, rng.uniform(0.18, 0.3)) * half
            reach = 2.0 * scale
            density = float(rng.uniform(20.0, 40.0))
        center = mid + rng.uniform(-1, 1, 3) * np.maximum(half - reach, 0.0)
        albedo = rng.uniform(0.05, 0.95, 3)
        prims.append(
            Primitive("box" if is_box else "gaussian", tuple(center.tolist()), tuple(scale.tolist()),
                      density, tuple(albedo.tolist()))
        )
    return SyntheticScene(prims, bbox, f"toy-{seed}", seed)


def render_reference(
    scene: SyntheticScene,
    cam: Camera,
    samples_per_ray: int = 256,
    background: np.ndarray = WHITE,
) -> np.ndarray:
    """Ground-truth image by dense midpoint ray marching of the analytic field."""
    if samples_per_ray < 64:
        raise ValueError("reference rendering needs at least 64 samples per ray")
    o, d = generate_rays(cam)
    _, delta, pts = sample_along_rays(o, d, scene.bbox, samples_per_ray)
    sigma = scene.density(pts)
    rgb = scene.color(pts)
    img = composite(sigma, rgb, delta, background).color
    return img.reshape(cam.height, cam.width, 3)


def sphere_cameras(
    n: int,
    size: int,
    radius: float = 3.5,
    fov_deg: float = 50.0,
    phase: float = 0.0,
    center=(0.0, 0.0, 0.0),
) -> list[Camera]:
    """Cameras on a Fibonacci spiral over the sphere, all facing ``center``."""
    golden = np.pi * (3.0 - np.sqrt(5.0))
    focal = 0.5 * size / np.tan(0.5 * np.deg2rad(fov_deg))
    cams = []
    for i in range(n):
        z = 1.0 - 2.0 * (i + 0.5) / n
        r = np.sqrt(1.0 - z * z)
        th = golden * i + phase
        eye = np.asarray(center) + radius * np.array([r * np.cos(th), r * np.sin(th), z])
        cams.append(Camera(focal, size / 2.0, size / 2.0, size, size, look_at(eye, center)))
    return cams


@dataclass
class Dataset:
    root: Path
    cameras: list[Camera]
    splits: list[str]
    image_paths: list[Path]
    image_size: tuple[int, int]
    background: np.ndarray
    bbox: np.ndarray
    scene: SyntheticScene | None = None
    _images: dict = field(default_factory=dict, repr=False)

    def indices(self, split: str) -> list[int]:
        return [i for i, s in enumerate(self.splits) if s == split]

    def image(self, i: int) -> np.ndarray:
        if i not in self._images:
            img = load_image(self.image_paths[i])
            if img.shape[:2] != (self.image_size[1], self.image_size[0]):
                raise ValueError(f"{self.image_paths[i]} has size {img.shape[:2]}, manifest says {self.image_size}")
            self._images[i] = img
        return self._images[i]

    def views(self, split: str) -> list[tuple[Camera, np.ndarray]]:
        return [(self.cameras[i], self.image(i)) for i in self.indices(split)]

    def rays(self, split: str = "train") -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """All (origins, directions, colors) of a split, concatenated over views."""
        os_, ds, cs = [], [], []
        for cam, img in self.views(split):
            if (cam.width, cam.height) != tuple(self.image_size):
                raise ValueError("camera size disagrees with the dataset images")
            o, d = generate_rays(cam)
            os_.append(o)
            ds.append(d)
            cs.append(img.reshape(-1, 3))
        return np.concatenate(os_), np.concatenate(ds), np.concatenate(cs)


def _camera_to_frame(cam: Camera) -> dict:
    return {"transform_matrix": cam.c2w.tolist()}


def make_dataset(
    scene: SyntheticScene,
    out_dir: str | Path,
    n_train: int = 20,
    n_test: int = 5,
    size: int = 32,
    seed: int = 0,
    samples_per_ray: int = 256,
    ext: str = ".png",
    background: np.ndarray = WHITE,
) -> Dataset:
    """Render train/test views of ``scene`` and write images plus manifest."""
    if n_train < 1 or n_test < 1:
        raise ValueError("need at least one train and one test view")
    out = Path(out_dir)
    (out / "train").mkdir(parents=True, exist_ok=True)
    (out / "test").mkdir(parents=True, exist_ok=True)
    phase = float(np.random.default_rng(seed).uniform(0, 2 * np.pi))
    center = 0.5 * (scene.bbox[0] + scene.bbox[1])
    train = sphere_cameras(n_train, size, phase=phase, center=center)
    test = sphere_cameras(n_test, size, phase=phase + 0.5, center=center)
    frames = []
    for split, cams in (("train", train), ("test", test)):
        for i, cam in enumerate(cams):
            rel = f"{split}/r_{i:03d}{ext}"
            save_image(out / rel, render_reference(scene, cam, samples_per_ray, background))
            frames.append({"file_path": rel, "split": split, **_camera_to_frame(cam)})
    first = train[0]
    manifest = {
        "scene_id": scene.scene_id,
        "seed": seed,
        "image_size": [size, size],
        "focal": first.focal,
        "cx": first.cx,
        "cy": first.cy,
        "bbox": scene.bbox.tolist(),
        "background": np.asarray(background, dtype=np.float64).tolist(),
        "scene": scene.to_dict(),
        "frames": frames,
    }
    (out / MANIFEST).write_text(json.dumps(manifest, indent=2))
    return load_dataset(out)


def load_dataset(root: str | Path) -> Dataset:
    root = Path(root)
    path = root / MANIFEST
    if not path.is_file():
        raise FileNotFoundError(f"no {MANIFEST} in {root}")
    meta = json.loads(path.read_text())
    W, H = meta["image_size"]
    cams, splits, paths = [], [], []
    for fr in meta["frames"]:
        cams.append(Camera(meta["focal"], meta["cx"], meta["cy"], W, H, np.asarray(fr["transform_matrix"])))
        splits.append(fr["split"])
        paths.append(root / fr["file_path"])
    scene = SyntheticScene.from_dict(meta["scene"]) if "scene" in meta else None
    ds = Dataset(root, cams, splits, paths, (W, H), np.asarray(meta["background"]), np.asarray(meta["bbox"]), scene)
    if not ds.indices("train") or not ds.indices("test"):
        raise ValueError("dataset needs at least one train and one test view")
    return ds
