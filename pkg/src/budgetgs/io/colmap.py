"""Sparse-reconstruction tables (cameras, images, points3D) in text or binary form."""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..core import Camera, quaternion_to_rotation
from .images import load_image, load_mask


class DataError(Exception):
    """Raised for unreadable or inconsistent scene data."""


# model id -> (name, parameter count)
CAMERA_MODELS = {
    0: ("SIMPLE_PINHOLE", 3),
    1: ("PINHOLE", 4),
    2: ("SIMPLE_RADIAL", 4),
    3: ("RADIAL", 5),
    4: ("OPENCV", 8),
    5: ("OPENCV_FISHEYE", 8),
    6: ("FULL_OPENCV", 12),
    7: ("FOV", 5),
    8: ("SIMPLE_RADIAL_FISHEYE", 4),
    9: ("RADIAL_FISHEYE", 5),
    10: ("THIN_PRISM_FISHEYE", 12),
}
MODEL_IDS = {name: (mid, n) for mid, (name, n) in CAMERA_MODELS.items()}
SUPPORTED = ("SIMPLE_PINHOLE", "PINHOLE", "SIMPLE_RADIAL")
RADIAL_TOLERANCE = 1e-6
TEST_EVERY = 8


@dataclass
class Intrinsics:
    id: int
    model: str
    width: int
    height: int
    params: np.ndarray


@dataclass
class ImageRecord:
    id: int
    qvec: np.ndarray
    tvec: np.ndarray
    camera_id: int
    name: str


@dataclass
class SceneBundle:
    """Cameras, SfM points and the train/test split of one scene."""

    train_cameras: list
    test_cameras: list
    points: np.ndarray
    colors: np.ndarray
    scene_extent: float
    source: str = ""
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        self.colors = np.asarray(self.colors, dtype=np.float64).reshape(-1, 3)
        if not self.train_cameras:
            raise DataError("scene has no training cameras")
        if len(self.points) == 0:
            raise DataError("scene has no SfM points")
        if len(self.colors) != len(self.points):
            raise DataError("point and color counts differ")
        if not self.scene_extent > 0:
            raise DataError("scene extent must be positive")

    @property
    def cameras(self) -> list:
        return list(self.train_cameras) + list(self.test_cameras)


def scene_extent(centers, scale: float = 1.1) -> float:
    """``scale`` times the largest camera distance from the mean center."""
    centers = np.asarray(centers, dtype=np.float64).reshape(-1, 3)
    if len(centers) == 0:
        return 1.0
    radius = float(np.max(np.linalg.norm(centers - centers.mean(axis=0), axis=1)))
    return scale * radius if radius > 0 else 1.0


def _lines(path: Path):
    for line in path.read_text().splitlines():
        line = line.strip()
        if line and not line.startswith("#"):
            yield line


def read_cameras_text(path) -> dict:
    cams = {}
    for line in _lines(Path(path)):
        e = line.split()
        cams[int(e[0])] = Intrinsics(int(e[0]), e[1], int(e[2]), int(e[3]), np.array([float(x) for x in e[4:]]))
    return cams


def read_images_text(path) -> dict:
    images = {}
    # pose lines alternate with keypoint lines, and keypoint lines may be empty
    body = [l.strip() for l in Path(path).read_text().splitlines() if not l.strip().startswith("#")]
    i = 0
    while i < len(body):
        e = body[i].split()
        if not e:
            i += 1
            continue
        if len(e) < 10:
            raise DataError(f"malformed image line: {body[i]!r}")
        images[int(e[0])] = ImageRecord(int(e[0]), np.array([float(x) for x in e[1:5]]),
                                        np.array([float(x) for x in e[5:8]]), int(e[8]), e[9])
        i += 2
    return images


def read_points_text(path):
    xyz, rgb = [], []
    for line in _lines(Path(path)):
        e = line.split()
        xyz.append([float(x) for x in e[1:4]])
        rgb.append([int(x) for x in e[4:7]])
    return np.array(xyz, dtype=np.float64).reshape(-1, 3), np.array(rgb, dtype=np.float64).reshape(-1, 3) / 255.0


def _read(fid, fmt):
    size = struct.calcsize("<" + fmt)
    data = fid.read(size)
    if len(data) != size:
        raise DataError("truncated binary table")
    return struct.unpack("<" + fmt, data)


def read_cameras_binary(path) -> dict:
    cams = {}
    with open(path, "rb") as fid:
        (n,) = _read(fid, "Q")
        for _ in range(n):
            cid, mid, w, h = _read(fid, "iiQQ")
            if mid not in CAMERA_MODELS:
                raise DataError(f"unknown camera model id {mid}")
            name, k = CAMERA_MODELS[mid]
            cams[cid] = Intrinsics(cid, name, w, h, np.array(_read(fid, "d" * k)))
    return cams


def read_images_binary(path) -> dict:
    images = {}
    with open(path, "rb") as fid:
        (n,) = _read(fid, "Q")
        for _ in range(n):
            props = _read(fid, "idddddddi")
            name = b""
            while True:
                c = fid.read(1)
                if c == b"":
                    raise DataError("truncated binary table")
                if c == b"\x00":
                    break
                name += c
            (n2d,) = _read(fid, "Q")
            fid.read(24 * n2d)
            images[props[0]] = ImageRecord(props[0], np.array(props[1:5]), np.array(props[5:8]), props[8],
                                           name.decode("utf-8"))
    return images


def read_points_binary(path):
    with open(path, "rb") as fid:
        (n,) = _read(fid, "Q")
        xyz = np.empty((n, 3))
        rgb = np.empty((n, 3))
        for i in range(n):
            p = _read(fid, "QdddBBBd")
            xyz[i] = p[1:4]
            rgb[i] = p[4:7]
            (track,) = _read(fid, "Q")
            fid.read(8 * track)
    return xyz, rgb / 255.0


def write_colmap(path, intrinsics: dict, images: dict, points, colors, binary: bool = False) -> None:
    """Write the three tables; colors are in [0, 1] and stored as 8-bit."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    rgb8 = np.clip(np.rint(np.asarray(colors).reshape(-1, 3) * 255), 0, 255).astype(int)
    if binary:
        with open(path / "cameras.bin", "wb") as f:
            f.write(struct.pack("<Q", len(intrinsics)))
            for c in intrinsics.values():
                f.write(struct.pack("<iiQQ", c.id, MODEL_IDS[c.model][0], c.width, c.height))
                f.write(struct.pack("<" + "d" * len(c.params), *c.params))
        with open(path / "images.bin", "wb") as f:
            f.write(struct.pack("<Q", len(images)))
            for im in images.values():
                f.write(struct.pack("<idddddddi", im.id, *im.qvec, *im.tvec, im.camera_id))
                f.write(im.name.encode("utf-8") + b"\x00")
                f.write(struct.pack("<Q", 0))
        with open(path / "points3D.bin", "wb") as f:
            f.write(struct.pack("<Q", len(points)))
            for i, (p, c) in enumerate(zip(points, rgb8)):
                f.write(struct.pack("<QdddBBBd", i + 1, *p, *c, 0.0))
                f.write(struct.pack("<Q", 0))
        return
    with open(path / "cameras.txt", "w") as f:
        f.write("# CAMERA_ID, MODEL, WIDTH, HEIGHT, PARAMS[]\n")
        for c in intrinsics.values():
            f.write(f"{c.id} {c.model} {c.width} {c.height} " + " ".join(repr(float(x)) for x in c.params) + "\n")
    with open(path / "images.txt", "w") as f:
        f.write("# IMAGE_ID, QW, QX, QY, QZ, TX, TY, TZ, CAMERA_ID, NAME\n# POINTS2D[] as (X, Y, POINT3D_ID)\n")
        for im in images.values():
            vals = " ".join(repr(float(x)) for x in (*im.qvec, *im.tvec))
            f.write(f"{im.id} {vals} {im.camera_id} {im.name}\n\n")
    with open(path / "points3D.txt", "w") as f:
        f.write("# POINT3D_ID, X, Y, Z, R, G, B, ERROR, TRACK[]\n")
        for i, (p, c) in enumerate(zip(points, rgb8)):
            f.write(f"{i + 1} {float(p[0])!r} {float(p[1])!r} {float(p[2])!r} {c[0]} {c[1]} {c[2]} 0.0\n")


def _find_tables(path: Path):
    for sub in (path / "sparse" / "0", path / "sparse", path):
        if all((sub / f"{t}.bin").exists() for t in ("cameras", "images", "points3D")):
            return sub, True
        if all((sub / f"{t}.txt").exists() for t in ("cameras", "images", "points3D")):
            return sub, False
    raise DataError(f"no cameras/images/points3D tables under {path}")


def _pinhole(c: Intrinsics):
    if c.model not in SUPPORTED:
        raise DataError(f"unsupported camera model {c.model}; undistort the images first")
    p = c.params
    if c.model == "SIMPLE_PINHOLE":
        return p[0], p[0], p[1], p[2]
    if c.model == "PINHOLE":
        return p[0], p[1], p[2], p[3]
    if abs(p[3]) > RADIAL_TOLERANCE:
        raise DataError(f"camera {c.id} has radial distortion {p[3]}; undistort the images first")
    return p[0], p[0], p[1], p[2]


def load_colmap(path, image_dir=None, mask_dir=None, load_images: bool = True) -> SceneBundle:
    """Load a sparse reconstruction as a ``SceneBundle``.

    Images are sorted by name; every 8th one (index 0, 8, ...) goes to the
    test split. Images are read from ``image_dir`` (default ``path/images``)
    when present; ROI masks are matched by file stem in ``mask_dir``.
    """
    path = Path(path)
    if not path.is_dir():
        raise DataError(f"scene directory {path} does not exist")
    tables, binary = _find_tables(path)
    try:
        if binary:
            intr = read_cameras_binary(tables / "cameras.bin")
            recs = read_images_binary(tables / "images.bin")
            points, colors = read_points_binary(tables / "points3D.bin")
        else:
            intr = read_cameras_text(tables / "cameras.txt")
            recs = read_images_text(tables / "images.txt")
            points, colors = read_points_text(tables / "points3D.txt")
    except (ValueError, IndexError, struct.error) as exc:
        raise DataError(f"malformed reconstruction tables in {tables}: {exc}") from exc
    if len(points) == 0:
        raise DataError("points table is empty")
    image_dir = Path(image_dir) if image_dir is not None else path / "images"
    masks = {}
    if mask_dir is not None:
        masks = {p.stem: p for p in Path(mask_dir).iterdir() if p.is_file()}
    cameras = []
    for rec in sorted(recs.values(), key=lambda r: r.name):
        if rec.camera_id not in intr:
            raise DataError(f"image {rec.name} references missing camera {rec.camera_id}")
        c = intr[rec.camera_id]
        fx, fy, cx, cy = _pinhole(c)
        R = quaternion_to_rotation(rec.qvec)
        img_path = image_dir / rec.name
        image = load_image(img_path) if load_images and img_path.exists() else None
        stem = Path(rec.name).stem
        mask = load_mask(masks[stem]) if stem in masks else None
        cameras.append(Camera(c.width, c.height, fx, fy, cx, cy, R, rec.tvec, name=rec.name,
                              image_path=img_path, image=image, mask=mask))
    if not cameras:
        raise DataError("images table is empty")
    test = [c for i, c in enumerate(cameras) if i % TEST_EVERY == 0] if len(cameras) > 1 else []
    train = [c for i, c in enumerate(cameras) if i % TEST_EVERY != 0 or len(cameras) == 1]
    extent = scene_extent([c.center for c in cameras])
    return SceneBundle(train, test, points, colors, extent, str(path))
