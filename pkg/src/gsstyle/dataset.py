"""Camera-dataset manifest loading (`transforms.json`).

The manifest lists per-frame file_path and a 4x4 camera-to-world matrix,
with fx/fy/cx/cy/w/h either global or per frame (per-frame wins). Views come
back in file order with world_to_camera = inverse(camera_to_world) and image
paths resolved relative to the manifest directory.

Our camera convention is right-handed, +z forward. Manifests exported with
the look-down-minus-z convention set `"camera_axes": "opengl"` and get the
y/z axis flip applied on load; the default `"opencv"` means no flip.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .scene import CameraView

_INTRINSIC_KEYS = ("fx", "fy", "cx", "cy", "w", "h")

# camera-to-world right-multiplied by this flips the camera's y and z axes
_GL_TO_CV = np.diag([1.0, -1.0, -1.0, 1.0])


class DatasetError(ValueError):
    pass


def load_dataset(dataset_dir) -> list[CameraView]:
    dataset_dir = Path(dataset_dir)
    manifest_path = dataset_dir / "transforms.json"
    if not manifest_path.exists():
        raise DatasetError(f"missing manifest {manifest_path}")
    manifest = json.loads(manifest_path.read_text())

    axes = manifest.get("camera_axes", "opencv")
    if axes not in ("opencv", "opengl"):
        raise DatasetError(f"{manifest_path}: unknown camera_axes {axes!r}")

    frames = manifest.get("frames")
    if not frames:
        raise DatasetError(f"{manifest_path}: no frames listed")

    views = []
    for idx, frame in enumerate(frames):
        name = frame.get("file_path", f"frame {idx}")
        params = {}
        for key in _INTRINSIC_KEYS:
            if key in frame:
                params[key] = frame[key]
            elif key in manifest:
                params[key] = manifest[key]
            else:
                raise DatasetError(f"{manifest_path}: {name}: missing intrinsic {key!r}")

        c2w = np.asarray(frame["transform_matrix"], dtype=np.float64)
        if c2w.shape != (4, 4):
            raise DatasetError(f"{manifest_path}: {name}: transform_matrix must be 4x4")
        if axes == "opengl":
            c2w = c2w @ _GL_TO_CV
        det = np.linalg.det(c2w)
        if abs(det) < 1e-12:
            raise DatasetError(f"{manifest_path}: {name}: camera-to-world matrix is not invertible")
        w2c = np.linalg.inv(c2w)

        image_path = frame.get("file_path")
        views.append(CameraView(
            id=frame.get("id", Path(name).stem),
            width=int(params["w"]),
            height=int(params["h"]),
            fx=float(params["fx"]),
            fy=float(params["fy"]),
            cx=float(params["cx"]),
            cy=float(params["cy"]),
            world_to_camera=w2c,
            image_path=str(dataset_dir / image_path) if image_path else None,
        ))
    return views
