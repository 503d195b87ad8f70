"""Multi-view scene datasets: cameras, mesh proxy, images, masks.

On-disk layout::

    <root>/cameras.json   [{id, fx, fy, cx, cy, width, height, extrinsic[12]}, ...]
    <root>/proxy.obj      Wavefront OBJ (v/vt/vn/f)
    <root>/images/<id>.pfm | <id>.png
    <root>/masks/<id>.png
    <root>/split.json     optional {"train": [...], "test": [...]}

``extrinsic`` is the row-major 3x4 world-to-camera matrix [R | t]. Camera
space is x right, y down, z forward; pixel (i, j) has its centre at
(i + 0.5, j + 0.5).
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import imageio
from .geometry import Mesh, MeshError, load_obj, save_obj


class SceneError(ValueError):
    """Base class for dataset validation failures."""


class MissingFileError(SceneError, FileNotFoundError):
    pass


class CameraError(SceneError):
    pass


class SceneMeshError(SceneError):
    pass


class ImageSizeError(SceneError):
    pass


@dataclass(frozen=True)
class Camera:
    id: str
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    extrinsic: np.ndarray = field(repr=False)

    def __post_init__(self):
        ext = np.asarray(self.extrinsic, dtype=np.float64)
        if ext.size != 12:
            raise CameraError(f"camera {self.id}: extrinsic must have 12 numbers, got {ext.size}")
        object.__setattr__(self, "extrinsic", ext.reshape(3, 4))

    @property
    def rotation(self) -> np.ndarray:
        return self.extrinsic[:, :3]

    @property
    def translation(self) -> np.ndarray:
        return self.extrinsic[:, 3]

    @property
    def center(self) -> np.ndarray:
        return -self.rotation.T @ self.translation

    @property
    def intrinsics(self) -> np.ndarray:
        return np.array([[self.fx, 0, self.cx], [0, self.fy, self.cy], [0, 0, 1.0]])

    def validate(self) -> None:
        if not np.all(np.isfinite(self.extrinsic)):
            raise CameraError(f"camera {self.id}: non-finite extrinsic")
        r = self.rotation
        if np.max(np.abs(r @ r.T - np.eye(3))) > 1e-5:
            raise CameraError(f"camera {self.id}: rotation block is not orthonormal")
        if abs(np.linalg.det(r) - 1.0) > 1e-5:
            raise CameraError(f"camera {self.id}: rotation determinant {np.linalg.det(r):.6f} != +1")
        if self.width <= 0 or self.height <= 0:
            raise CameraError(f"camera {self.id}: non-positive image size")
        if not (self.fx > 0 and self.fy > 0):
            raise CameraError(f"camera {self.id}: focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise CameraError(f"camera {self.id}: principal point outside the image")

    def pixel_rays(self) -> np.ndarray:
        """World-space unit ray directions through every pixel centre, (H, W, 3)."""
        j, i = np.meshgrid(np.arange(self.height) + 0.5, np.arange(self.width) + 0.5, indexing="ij")
        cam = np.stack([(i - self.cx) / self.fx, (j - self.cy) / self.fy, np.ones_like(i)], axis=-1)
        world = cam @ self.rotation  # R^T applied to row vectors
        return world / np.linalg.norm(world, axis=-1, keepdims=True)

    def to_json(self) -> dict:
        return {
            "id": self.id, "fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
            "width": self.width, "height": self.height,
            "extrinsic": [float(v) for v in self.extrinsic.ravel()],
        }

    @classmethod
    def look_at(cls, id, eye, target, up, fov_deg: float, width: int, height: int) -> "Camera":
        eye, target, up = (np.asarray(v, dtype=np.float64) for v in (eye, target, up))
        fwd = target - eye
        fwd /= np.linalg.norm(fwd)
        right = np.cross(fwd, up)
        if np.linalg.norm(right) < 1e-6:
            right = np.cross(fwd, [1.0, 0.0, 0.0] if abs(fwd[0]) < 0.9 else [0.0, 0.0, 1.0])
        right /= np.linalg.norm(right)
        down = np.cross(fwd, right)
        rot = np.stack([right, down, fwd])
        f = 0.5 * width / math.tan(math.radians(fov_deg) / 2)
        ext = np.concatenate([rot, (-rot @ eye)[:, None]], axis=1)
        return cls(str(id), f, f, width / 2, height / 2, width, height, ext)


@dataclass(frozen=True)
class ViewImage:
    camera_id: str
    pixels: np.ndarray = field(repr=False)
    mask: np.ndarray = field(repr=False)


@dataclass(frozen=True)
class SceneDataset:
    cameras: dict[str, Camera]
    mesh: Mesh = field(repr=False)
    views: list[ViewImage] = field(repr=False)
    train: tuple[str, ...] = ()
    test: tuple[str, ...] = ()

    def view(self, view_id: str) -> ViewImage:
        for v in self.views:
            if v.camera_id == view_id:
                return v
        raise KeyError(view_id)

    @property
    def view_ids(self) -> list[str]:
        return [v.camera_id for v in self.views]

    def subset(self, ids) -> "SceneDataset":
        ids = list(ids)
        views = [self.view(i) for i in ids]
        return SceneDataset({i: self.cameras[i] for i in ids}, self.mesh, views,
                            tuple(i for i in self.train if i in ids), tuple(i for i in self.test if i in ids))


def _read_cameras(path: Path) -> dict[str, Camera]:
    if not path.is_file():
        raise MissingFileError(f"{path}: cameras file not found")
    try:
        records = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise CameraError(f"{path}: invalid JSON ({exc.msg})") from exc
    if not isinstance(records, list):
        raise CameraError(f"{path}: expected an array of camera records")
    cameras = {}
    for n, rec in enumerate(records):
        try:
            cam = Camera(
                str(rec["id"]), float(rec["fx"]), float(rec["fy"]), float(rec["cx"]), float(rec["cy"]),
                int(rec["width"]), int(rec["height"]), np.asarray(rec["extrinsic"], dtype=np.float64),
            )
        except (KeyError, TypeError, ValueError) as exc:
            if isinstance(exc, CameraError):
                raise
            raise CameraError(f"{path}: camera record {n} is malformed ({exc})") from exc
        cam.validate()
        if cam.id in cameras:
            raise CameraError(f"{path}: duplicate camera id {cam.id}")
        cameras[cam.id] = cam
    return cameras


def _find_image(folder: Path, cam_id: str) -> Path:
    for ext in (".pfm", ".png"):
        p = folder / f"{cam_id}{ext}"
        if p.is_file():
            return p
    raise MissingFileError(f"{folder / cam_id}.pfm|.png: image not found")


def load_scene(root, srgb: bool = False) -> SceneDataset:
    """Load and validate a scene directory (see module docstring)."""
    root = Path(root)
    if not root.is_dir():
        raise MissingFileError(f"{root}: scene directory not found")
    cameras = _read_cameras(root / "cameras.json")
    mesh_path = root / "proxy.obj"
    if not mesh_path.is_file():
        raise MissingFileError(f"{mesh_path}: mesh file not found")
    try:
        mesh = load_obj(mesh_path)
    except MeshError as exc:
        raise SceneMeshError(str(exc)) from exc
    views = []
    for cam_id, cam in cameras.items():
        img_path = _find_image(root / "images", cam_id)
        mask_path = root / "masks" / f"{cam_id}.png"
        if not mask_path.is_file():
            raise MissingFileError(f"{mask_path}: mask not found")
        pixels = imageio.read_image(img_path, srgb=srgb and img_path.suffix.lower() == ".png")
        if pixels.ndim == 2:
            pixels = np.repeat(pixels[..., None], 3, axis=2)
        if pixels.shape[:2] != (cam.height, cam.width):
            raise ImageSizeError(
                f"{img_path}: image is {pixels.shape[1]}x{pixels.shape[0]}, camera {cam_id} "
                f"expects {cam.width}x{cam.height}")
        if not np.all(np.isfinite(pixels)):
            raise ImageSizeError(f"{img_path}: non-finite pixel values")
        mask = imageio.read_mask(mask_path)
        if mask.shape != (cam.height, cam.width):
            raise ImageSizeError(f"{mask_path}: mask size does not match camera {cam_id}")
        views.append(ViewImage(cam_id, pixels, mask))
    if not views:
        raise CameraError(f"{root / 'cameras.json'}: no cameras")
    train, test = tuple(cameras), ()
    split_path = root / "split.json"
    if split_path.is_file():
        split = json.loads(split_path.read_text())
        train, test = tuple(map(str, split.get("train", []))), tuple(map(str, split.get("test", [])))
        _check_split(train, test, list(cameras), split_path)
    return SceneDataset(cameras, mesh, views, train, test)


def _check_split(train, test, ids, source) -> None:
    if set(train) & set(test):
        raise SceneError(f"{source}: train and test splits overlap")
    if set(train) | set(test) != set(ids):
        raise SceneError(f"{source}: split does not cover exactly the dataset views")


def save_scene(root, dataset: SceneDataset, image_format: str = "pfm") -> None:
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    (root / "cameras.json").write_text(
        json.dumps([dataset.cameras[v.camera_id].to_json() for v in dataset.views], indent=1))
    save_obj(root / "proxy.obj", dataset.mesh)
    for v in dataset.views:
        if image_format == "pfm":
            imageio.write_pfm(root / "images" / f"{v.camera_id}.pfm", v.pixels)
        else:
            imageio.write_png(root / "images" / f"{v.camera_id}.png", v.pixels)
        imageio.write_mask(root / "masks" / f"{v.camera_id}.png", v.mask)
    (root / "split.json").write_text(json.dumps({"train": list(dataset.train), "test": list(dataset.test)}))


def split_views(dataset: SceneDataset, test_fraction: float, seed: int) -> SceneDataset:
    """Seeded shuffle into train/test with at least one view on each side."""
    if not 0 < test_fraction < 1:
        raise ValueError("test_fraction must lie strictly between 0 and 1")
    ids = dataset.view_ids
    if len(ids) < 2:
        raise ValueError("splitting needs at least 2 views")
    n_test = min(max(1, int(round(test_fraction * len(ids)))), len(ids) - 1)
    order = np.random.default_rng(seed).permutation(len(ids))
    test = tuple(ids[i] for i in sorted(order[:n_test]))
    train = tuple(i for i in ids if i not in test)
    return replace(dataset, train=train, test=test)
