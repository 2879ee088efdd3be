"""Bit-exact reader/writer for the standard splat-scene PLY layout.

Binary little-endian, one vertex per primitive, float32 properties in the
canonical order: x y z, nx ny nz, f_dc_0..2, f_rest_0..(3(B-1)-1), opacity,
scale_0..2, rot_0..3. Opacity is stored as a logit and scales as logs,
verbatim; normals are written as zeros and discarded on load. f_rest is
channel-major: f_rest[c*(B-1) + (b-1)] holds SH row b, channel c.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .scene import GaussianScene

_DEGREE_FOR_B = {1: 0, 4: 1, 9: 2, 16: 3}

_FLOAT_NAMES = {"float", "float32"}


class PlyFormatError(ValueError):
    pass


class UnsupportedEncodingError(PlyFormatError):
    pass


def _canonical_properties(num_sh: int) -> list[str]:
    props = ["x", "y", "z", "nx", "ny", "nz", "f_dc_0", "f_dc_1", "f_dc_2"]
    props += [f"f_rest_{i}" for i in range(3 * (num_sh - 1))]
    props += ["opacity", "scale_0", "scale_1", "scale_2", "rot_0", "rot_1", "rot_2", "rot_3"]
    return props


def _parse_header(raw: bytes, path: Path) -> tuple[int, list[str], int]:
    end = raw.find(b"end_header\n")
    if not raw.startswith(b"ply") or end < 0:
        raise PlyFormatError(f"{path}: not a PLY file")
    header = raw[:end].decode("ascii", errors="replace").splitlines()
    body_offset = end + len(b"end_header\n")

    vertex_count = None
    properties: list[str] = []
    in_vertex = False
    for line in header[1:]:
        parts = line.strip().split()
        if not parts or parts[0] == "comment":
            continue
        if parts[0] == "format":
            if parts[1] != "binary_little_endian":
                raise UnsupportedEncodingError(f"{path}: unsupported encoding {parts[1]!r}")
        elif parts[0] == "element":
            in_vertex = parts[1] == "vertex"
            if in_vertex:
                vertex_count = int(parts[2])
        elif parts[0] == "property" and in_vertex:
            if parts[1] not in _FLOAT_NAMES:
                raise PlyFormatError(f"{path}: property {parts[-1]!r} is not float32")
            properties.append(parts[2])
    if vertex_count is None:
        raise PlyFormatError(f"{path}: missing vertex element")
    return vertex_count, properties, body_offset


def load_ply(path) -> GaussianScene:
    """Load a splat scene; raises PlyFormatError naming any missing property."""
    path = Path(path)
    raw = path.read_bytes()
    vertex_count, properties, body_offset = _parse_header(raw, path)

    rest = [p for p in properties if p.startswith("f_rest_")]
    num_sh = 1 + len(rest) // 3
    if num_sh not in _DEGREE_FOR_B or len(rest) % 3 != 0:
        raise PlyFormatError(f"{path}: {len(rest)} f_rest properties do not form a valid SH set")
    for name in _canonical_properties(num_sh):
        if name not in properties:
            raise PlyFormatError(f"{path}: missing property {name!r}")

    dtype = np.dtype([(p, "<f4") for p in properties])
    body = raw[body_offset:body_offset + vertex_count * dtype.itemsize]
    if len(body) < vertex_count * dtype.itemsize:
        raise PlyFormatError(f"{path}: truncated body ({len(body)} bytes for {vertex_count} vertices)")
    table = np.frombuffer(body, dtype=dtype, count=vertex_count)

    def cols(names):
        return np.stack([table[n] for n in names], axis=1)

    n = vertex_count
    sh = np.zeros((n, num_sh, 3), dtype=np.float32)
    sh[:, 0, 0] = table["f_dc_0"]
    sh[:, 0, 1] = table["f_dc_1"]
    sh[:, 0, 2] = table["f_dc_2"]
    for c in range(3):
        for b in range(1, num_sh):
            sh[:, b, c] = table[f"f_rest_{c * (num_sh - 1) + (b - 1)}"]

    return GaussianScene(
        positions=cols(["x", "y", "z"]),
        log_scales=cols(["scale_0", "scale_1", "scale_2"]),
        rotations=cols(["rot_0", "rot_1", "rot_2", "rot_3"]),
        opacity_logits=np.array(table["opacity"]),  # frombuffer view is read-only
        sh_coeffs=sh,
        sh_degree=_DEGREE_FOR_B[num_sh],
    )


def save_ply(scene: GaussianScene, path) -> None:
    """Write the exact layout load_ply consumes; load(save(s)) is bit-identical."""
    if len(scene) == 0:
        raise ValueError("refusing to save an empty scene")
    path = Path(path)
    num_sh = scene.num_sh_coeffs
    props = _canonical_properties(num_sh)

    n = len(scene)
    table = np.zeros(n, dtype=np.dtype([(p, "<f4") for p in props]))
    for i, name in enumerate(("x", "y", "z")):
        table[name] = scene.positions[:, i]
    for i, name in enumerate(("f_dc_0", "f_dc_1", "f_dc_2")):
        table[name] = scene.sh_coeffs[:, 0, i]
    for c in range(3):
        for b in range(1, num_sh):
            table[f"f_rest_{c * (num_sh - 1) + (b - 1)}"] = scene.sh_coeffs[:, b, c]
    table["opacity"] = scene.opacity_logits
    for i in range(3):
        table[f"scale_{i}"] = scene.log_scales[:, i]
    for i in range(4):
        table[f"rot_{i}"] = scene.rotations[:, i]

    header_lines = ["ply", "format binary_little_endian 1.0", f"element vertex {n}"]
    header_lines += [f"property float {p}" for p in props]
    header_lines.append("end_header")
    header = ("\n".join(header_lines) + "\n").encode("ascii")
    try:
        path.write_bytes(header + table.tobytes())
    except OSError as exc:
        raise OSError(f"failed writing PLY to {path}: {exc}") from exc
