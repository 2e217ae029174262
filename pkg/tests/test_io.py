import math
import struct

import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from budgetgs.core import GaussianSet, OpacityMode
from budgetgs.io import (DataError, ModelFormatError, SyntheticSpec, load_colmap, load_image, load_mask,
                         load_model, make_synthetic_scene, quadrant_mask, save_image, save_mask, save_model,
                         scene_extent, write_colmap, write_scene)
from budgetgs.io.colmap import ImageRecord, Intrinsics
from budgetgs.io.ply import OPTIMIZED_ATTRIBUTES, PROPERTIES
from budgetgs.projection import project
from budgetgs.raster import render

CAMERAS_TXT = """# Camera list with one line of data per camera:
1 PINHOLE 40 30 35.0 36.0 20.0 15.0
2 SIMPLE_RADIAL 40 30 33.0 20.0 15.0 0.0
"""
IMAGES_TXT = """# Image list with two lines of data per image:
#   IMAGE_ID, QW, QX, QY, QZ, TX, TY, TZ, CAMERA_ID, NAME
2 1.0 0.0 0.0 0.0 0.0 0.0 4.0 2 b.png
10.0 20.0 1
1 0.7071067811865476 0.0 0.7071067811865476 0.0 1.0 0.0 3.0 1 a.png

"""
POINTS_TXT = """# 3D point list
1 0.0 0.0 0.0 255 0 0 0.5 1 0
2 1.0 0.0 0.0 0 255 0 0.5
3 0.0 1.0 0.0 0 0 255 0.5 2 0 1 0
"""


def _fixture(tmp_path):
    d = tmp_path / "scene" / "sparse" / "0"
    d.mkdir(parents=True)
    (d / "cameras.txt").write_text(CAMERAS_TXT)
    (d / "images.txt").write_text(IMAGES_TXT)
    (d / "points3D.txt").write_text(POINTS_TXT)
    return tmp_path / "scene"


def test_text_fixture(tmp_path):
    b = load_colmap(_fixture(tmp_path))
    assert len(b.cameras) == 2 and len(b.points) == 3
    # sorted by name: a.png is index 0 and therefore the test view
    assert [c.name for c in b.test_cameras] == ["a.png"]
    assert [c.name for c in b.train_cameras] == ["b.png"]
    a = b.test_cameras[0]
    assert (a.fx, a.fy, a.cx, a.cy) == (35.0, 36.0, 20.0, 15.0)
    # 90 degrees about y
    assert np.allclose(a.R, [[0, 0, 1], [0, 1, 0], [-1, 0, 0]])
    assert np.allclose(b.train_cameras[0].center, [0, 0, -4])
    assert np.allclose(b.colors, np.eye(3))
    centers = np.array([a.center, b.train_cameras[0].center])
    assert math.isclose(b.scene_extent, 1.1 * np.linalg.norm(centers[0] - centers.mean(0)))


def test_binary_and_text_agree(tmp_path):
    txt = load_colmap(_fixture(tmp_path))
    from budgetgs.io.colmap import read_cameras_text, read_images_text

    src = tmp_path / "scene" / "sparse" / "0"
    write_colmap(tmp_path / "bin", read_cameras_text(src / "cameras.txt"), read_images_text(src / "images.txt"),
                 txt.points, txt.colors, binary=True)
    bn = load_colmap(tmp_path / "bin")
    assert np.array_equal(bn.points, txt.points) and np.array_equal(bn.colors, txt.colors)
    for c1, c2 in zip(txt.cameras, bn.cameras):
        assert c1.name == c2.name and np.array_equal(c1.R, c2.R) and np.array_equal(c1.t, c2.t)
        assert (c1.fx, c1.fy, c1.cx, c1.cy, c1.width) == (c2.fx, c2.fy, c2.cx, c2.cy, c2.width)


def test_errors(tmp_path):
    root = _fixture(tmp_path)
    sp = root / "sparse" / "0"
    (sp / "points3D.txt").write_text("# nothing\n")
    with pytest.raises(DataError):
        load_colmap(root)
    (sp / "points3D.txt").write_text(POINTS_TXT)
    (sp / "cameras.txt").write_text(CAMERAS_TXT.replace("SIMPLE_RADIAL 40 30 33.0 20.0 15.0 0.0",
                                                        "OPENCV 40 30 1 1 1 1 0 0 0 0"))
    with pytest.raises(DataError):
        load_colmap(root)
    (sp / "cameras.txt").write_text(CAMERAS_TXT.replace("15.0 0.0", "15.0 0.2"))
    with pytest.raises(DataError):
        load_colmap(root)
    (sp / "cameras.txt").unlink()
    with pytest.raises(DataError):
        load_colmap(root)
    with pytest.raises(DataError):
        load_colmap(tmp_path / "missing")


def test_truncated_binary_table(tmp_path):
    d = tmp_path / "s"
    write_colmap(d, {1: Intrinsics(1, "PINHOLE", 4, 4, np.array([2.0, 2, 2, 2]))},
                 {1: ImageRecord(1, np.array([1.0, 0, 0, 0]), np.zeros(3), 1, "x.png")}, np.zeros((2, 3)),
                 np.zeros((2, 3)), binary=True)
    blob = (d / "points3D.bin").read_bytes()
    (d / "points3D.bin").write_bytes(blob[:-20])
    with pytest.raises(DataError):
        load_colmap(d)


def test_extent_invariant_under_rigid_motion(rng):
    centers = rng.standard_normal((6, 3))
    R = Rotation.random(random_state=1).as_matrix()
    moved = centers @ R.T + [5.0, -2.0, 1.0]
    assert math.isclose(scene_extent(centers), scene_extent(moved), rel_tol=1e-12)
    assert scene_extent(np.zeros((3, 3))) == 1.0


def _model(rng, n):
    q = rng.standard_normal((n, 4))
    return GaussianSet(rng.standard_normal((n, 3)), q / np.linalg.norm(q, axis=1, keepdims=True),
                       rng.standard_normal((n, 3)), rng.standard_normal(n), rng.standard_normal((n, 3)),
                       rng.standard_normal((n, 15, 3)))


def test_ply_round_trip(tmp_path, rng):
    g = _model(rng, 7)
    save_model(tmp_path / "m.ply", g)
    h = load_model(tmp_path / "m.ply")
    assert h.count == 7 and h.opacity_mode is OpacityMode.SIGMOID
    for name in GaussianSet.PARAMS:
        assert np.array_equal(getattr(h, name), getattr(g, name).astype(np.float32).astype(np.float64))
    # float32-representable models round-trip exactly, and so do the bytes
    save_model(tmp_path / "n.ply", h)
    assert (tmp_path / "n.ply").read_bytes() == (tmp_path / "m.ply").read_bytes()
    h.opacity_mode = OpacityMode.HIGH_OPACITY_ABS
    save_model(tmp_path / "a.ply", h)
    assert load_model(tmp_path / "a.ply").opacity_mode is OpacityMode.HIGH_OPACITY_ABS


def test_ply_layout(tmp_path, rng):
    assert len(PROPERTIES) == 62 and OPTIMIZED_ATTRIBUTES == 59
    g = _model(rng, 2)
    save_model(tmp_path / "m.ply", g)
    blob = (tmp_path / "m.ply").read_bytes()
    header, payload = blob.split(b"end_header\n")
    assert b"format binary_little_endian 1.0" in header
    assert len(payload) == 2 * 62 * 4
    rec = struct.unpack("<62f", payload[:248])
    assert np.allclose(rec[0:3], g.positions[0].astype(np.float32))
    assert rec[3:6] == (0.0, 0.0, 0.0)
    # f_rest is channel-major: f_rest_0..14 are the red channel of bands 1-3
    assert np.isclose(rec[9], np.float32(g.sh_rest[0, 0, 0]))
    assert np.isclose(rec[10], np.float32(g.sh_rest[0, 1, 0]))
    assert np.isclose(rec[24], np.float32(g.sh_rest[0, 0, 1]))
    assert np.isclose(rec[54], np.float32(g.raw_opacities[0]))
    assert np.allclose(rec[58:62], g.rotations[0].astype(np.float32))


def test_ply_empty_and_malformed(tmp_path):
    save_model(tmp_path / "e.ply", GaussianSet.empty())
    assert load_model(tmp_path / "e.ply").count == 0
    g = _model(np.random.default_rng(0), 3)
    save_model(tmp_path / "m.ply", g)
    blob = (tmp_path / "m.ply").read_bytes()
    (tmp_path / "t.ply").write_bytes(blob[:-10])
    with pytest.raises(ModelFormatError):
        load_model(tmp_path / "t.ply")
    (tmp_path / "h.ply").write_bytes(blob.replace(b"binary_little_endian", b"ascii"))
    with pytest.raises(ModelFormatError):
        load_model(tmp_path / "h.ply")
    (tmp_path / "p.ply").write_bytes(blob.replace(b"property float opacity", b"property float opakity"))
    with pytest.raises(ModelFormatError):
        load_model(tmp_path / "p.ply")
    (tmp_path / "x.ply").write_bytes(b"not a ply")
    with pytest.raises(ModelFormatError):
        load_model(tmp_path / "x.ply")
    with pytest.raises(FileNotFoundError):
        load_model(tmp_path / "none.ply")


def test_image_and_mask_io(tmp_path, rng):
    img = rng.random((5, 7, 3))
    save_image(tmp_path / "i.png", img)
    back = load_image(tmp_path / "i.png")
    assert back.shape == (5, 7, 3) and np.abs(back - img).max() <= 0.5 / 255 + 1e-12
    m = quadrant_mask(8, 6, 3)
    assert m.sum() == 12 and m[5, 7] == 1 and m[0, 0] == 0
    save_mask(tmp_path / "m.png", m)
    assert np.array_equal(load_mask(tmp_path / "m.png"), m)


def test_synthetic_scene_examples():
    b, gt = make_synthetic_scene(SyntheticSpec(num_gaussians=1, num_cameras=4, width=32, height=32),
                                 np.random.default_rng(0))
    assert len(b.train_cameras) == 4 and gt.count == 1
    for cam in b.train_cameras:
        assert cam.image.shape == (32, 32, 3)
        assert len(project(gt, cam)) == 1 and cam.image.max() > 0.05
        assert np.array_equal(render(project(gt, cam)).image, cam.image)
    b0, gt0 = make_synthetic_scene(SyntheticSpec(jitter=0.0), np.random.default_rng(1))
    assert np.array_equal(b0.points, gt0.positions)
    assert np.all(np.linalg.norm(gt0.positions, axis=1) <= 1.0)


def test_written_scene_reloads(tmp_path):
    b, gt = make_synthetic_scene(SyntheticSpec(num_gaussians=5, num_cameras=7, num_test_cameras=1, width=16,
                                               height=16), np.random.default_rng(2))
    for binary in (False, True):
        d = write_scene(b, tmp_path / f"s{int(binary)}", binary)
        r = load_colmap(d)
        assert len(r.train_cameras) == 7 and len(r.test_cameras) == 1
        assert np.allclose(r.points, b.points) and math.isclose(r.scene_extent, b.scene_extent)
        assert np.allclose(r.train_cameras[0].R, b.train_cameras[0].R, atol=1e-12)
        assert np.abs(r.train_cameras[0].image - b.train_cameras[0].image).max() <= 0.5 / 255 + 1e-12
        again = load_colmap(d)
        assert [c.name for c in again.test_cameras] == [c.name for c in r.test_cameras]
        assert not {c.name for c in r.test_cameras} & {c.name for c in r.train_cameras}


def test_arc_cameras_stay_on_one_side():
    from budgetgs.io.synthetic import ring_cameras

    cams = ring_cameras(SyntheticSpec(arc_deg=60.0), 6)
    angles = [math.degrees(math.atan2(c.center[1], c.center[0])) for c in cams]
    assert max(angles) - min(angles) == pytest.approx(50.0)
    assert all(abs(a) <= 30.0 for a in angles)
