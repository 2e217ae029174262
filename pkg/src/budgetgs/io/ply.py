"""Gaussian models as binary little-endian PLY point clouds.

Each vertex carries 62 float32 properties in the common splatting layout:
``x y z nx ny nz f_dc_0..2 f_rest_0..44 opacity scale_0..2 rot_0..3``.
Normals are zero placeholders and ``f_rest`` is stored channel-major. The
opacity activation is recorded in a header comment.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np

from ..core import SH_REST_COEFFS, GaussianSet, OpacityMode

PROPERTIES = (
    ["x", "y", "z", "nx", "ny", "nz"]
    + [f"f_dc_{i}" for i in range(3)]
    + [f"f_rest_{i}" for i in range(3 * SH_REST_COEFFS)]
    + ["opacity"]
    + [f"scale_{i}" for i in range(3)]
    + [f"rot_{i}" for i in range(4)]
)
OPTIMIZED_ATTRIBUTES = len(PROPERTIES) - 3
MODE_COMMENT = "opacity_activation"


class ModelFormatError(Exception):
    pass


def to_records(gaussians: GaussianSet) -> np.ndarray:
    n = gaussians.count
    rest = np.transpose(gaussians.sh_rest, (0, 2, 1)).reshape(n, 3 * SH_REST_COEFFS)
    cols = [gaussians.positions, np.zeros((n, 3)), gaussians.sh_dc, rest,
            gaussians.raw_opacities[:, None], gaussians.log_scales, gaussians.rotations]
    return np.concatenate(cols, axis=1).astype("<f4")


def from_records(data: np.ndarray, mode=OpacityMode.SIGMOID) -> GaussianSet:
    data = np.asarray(data, dtype=np.float64).reshape(-1, len(PROPERTIES))
    n = len(data)
    rest = data[:, 9:9 + 3 * SH_REST_COEFFS].reshape(n, 3, SH_REST_COEFFS).transpose(0, 2, 1)
    o = 9 + 3 * SH_REST_COEFFS
    return GaussianSet(data[:, 0:3], data[:, o + 4:o + 8], data[:, o + 1:o + 4], data[:, o], data[:, 6:9],
                       rest, mode)


def save_model(path, gaussians: GaussianSet) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = ["ply", "format binary_little_endian 1.0",
              f"comment {MODE_COMMENT} {gaussians.opacity_mode.value}",
              f"element vertex {gaussians.count}"]
    header += [f"property float {p}" for p in PROPERTIES]
    header.append("end_header")
    with open(path, "wb") as f:
        f.write(("\n".join(header) + "\n").encode("ascii"))
        f.write(to_records(gaussians).tobytes())


def load_model(path) -> GaussianSet:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"model file {path} does not exist")
    blob = path.read_bytes()
    end = blob.find(b"end_header\n")
    if not blob.startswith(b"ply\n") or end < 0:
        raise ModelFormatError(f"{path}: not a PLY file")
    try:
        lines = blob[:end].decode("ascii").splitlines()
    except UnicodeDecodeError as exc:
        raise ModelFormatError(f"{path}: header is not ASCII") from exc
    count = None
    props = []
    mode = OpacityMode.SIGMOID
    fmt_ok = False
    for line in lines[1:]:
        e = line.split()
        if not e:
            continue
        if e[0] == "format":
            fmt_ok = e[1:] == ["binary_little_endian", "1.0"]
        elif e[0] == "comment" and len(e) >= 3 and e[1] == MODE_COMMENT:
            try:
                mode = OpacityMode(e[2])
            except ValueError as exc:
                raise ModelFormatError(f"{path}: unknown opacity activation {e[2]!r}") from exc
        elif e[0] == "element":
            if e[1] != "vertex" or count is not None:
                raise ModelFormatError(f"{path}: unexpected element {e[1]!r}")
            count = int(e[2])
        elif e[0] == "property":
            if e[1] != "float":
                raise ModelFormatError(f"{path}: property {e[-1]} is not float32")
            props.append(e[2])
    if not fmt_ok:
        raise ModelFormatError(f"{path}: only binary_little_endian 1.0 is supported")
    if count is None or props != PROPERTIES:
        raise ModelFormatError(f"{path}: vertex layout does not match the Gaussian model layout")
    payload = blob[end + len(b"end_header\n"):]
    expected = count * len(PROPERTIES) * 4
    if len(payload) < expected:
        raise ModelFormatError(f"{path}: truncated payload ({len(payload)} of {expected} bytes)")
    data = np.frombuffer(payload[:expected], dtype="<f4").reshape(count, len(PROPERTIES))
    return from_records(data, mode)
