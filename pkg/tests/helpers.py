"""Shared builders for synthetic scenes, cameras, datasets, and encoders."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from gsstyle.dataset import load_dataset
from gsstyle.encoder import Encoder, EncoderSpec, LayerSpec, load_encoder, save_encoder
from gsstyle.images import write_image
from gsstyle.rasterizer import render
from gsstyle.scene import CameraView, GaussianScene, ImageBuffer


def random_scene(n: int, sh_degree: int = 1, seed: int = 0,
                 background=(0.0, 0.0, 0.0), depth_range=(1.5, 4.0)) -> GaussianScene:
    rng = np.random.default_rng(seed)
    b = (sh_degree + 1) ** 2
    return GaussianScene(
        positions=np.column_stack([
            rng.uniform(-1.2, 1.2, n),
            rng.uniform(-1.2, 1.2, n),
            rng.uniform(*depth_range, n),
        ]),
        log_scales=np.log(rng.uniform(0.02, 0.25, (n, 3))),
        rotations=rng.normal(size=(n, 4)),
        opacity_logits=rng.uniform(-2.0, 3.0, n),
        sh_coeffs=rng.normal(scale=0.3, size=(n, b, 3)),
        sh_degree=sh_degree,
        background_color=background,
    )


def identity_view(width=32, height=32, focal=30.0, view_id="v0",
                  tx=0.0) -> CameraView:
    w2c = np.eye(4)
    w2c[0, 3] = -tx  # camera center at (tx, 0, 0)
    return CameraView(
        id=view_id, width=width, height=height,
        fx=focal, fy=focal, cx=width / 2, cy=height / 2,
        world_to_camera=w2c,
    )


def solid_color_scene(color, n=1, position=(0.0, 0.0, 1.0), scale=0.05,
                      opacity=0.8, background=(0.0, 0.0, 0.0)) -> GaussianScene:
    """Degree-0 scene whose rendered base color equals `color` exactly."""
    from gsstyle.scene import SH_C0, logit

    sh = np.zeros((n, 1, 3), dtype=np.float64)
    sh[:, 0, :] = (np.asarray(color, dtype=np.float64) - 0.5) / SH_C0
    return GaussianScene(
        positions=np.tile(np.asarray(position, dtype=np.float64), (n, 1)),
        log_scales=np.full((n, 3), np.log(scale)),
        rotations=np.tile([1.0, 0.0, 0.0, 0.0], (n, 1)),
        opacity_logits=np.full(n, logit(opacity)),
        sh_coeffs=sh,
        sh_degree=0,
        background_color=background,
    )


def make_test_encoder(seed=0, channels=(3, 4, 4), with_pool=True,
                      mean=(0.45, 0.45, 0.45), std=(0.27, 0.27, 0.27)) -> Encoder:
    rng = np.random.default_rng(seed)
    layers, weights = [], {}
    cin = channels[0]
    for i, cout in enumerate(channels[1:], start=1):
        conv = f"conv{i}"
        layers.append(LayerSpec(conv, "conv3x3", cin, cout))
        weights[conv] = (
            rng.normal(scale=0.4, size=(cout, cin, 3, 3)),
            rng.normal(scale=0.1, size=cout),
        )
        layers.append(LayerSpec(f"relu{i}", "relu"))
        if with_pool and i == 1:
            layers.append(LayerSpec("pool1", "maxpool2"))
        cin = cout
    return Encoder(EncoderSpec(layers=layers, mean=mean, std=std), weights)


def encoder_on_disk(tmp_path, **kwargs) -> tuple[Encoder, Path]:
    manifest = Path(tmp_path) / "encoder.json"
    save_encoder(make_test_encoder(**kwargs), manifest)
    return load_encoder(manifest), manifest


def write_synthetic_dataset(dataset_dir, scene: GaussianScene, num_views: int,
                            width=48, height=48, focal=48.0,
                            track_extent=0.6) -> list[CameraView]:
    """Write transforms.json plus rendered PNGs for cameras translating in x."""
    dataset_dir = Path(dataset_dir)
    dataset_dir.mkdir(parents=True, exist_ok=True)
    frames = []
    offsets = (np.linspace(-track_extent, track_extent, num_views)
               if num_views > 1 else np.zeros(1))
    for i, tx in enumerate(offsets):
        c2w = np.eye(4)
        c2w[0, 3] = tx
        frames.append({
            "id": f"v{i:02d}",
            "file_path": f"im_{i:02d}.png",
            "transform_matrix": c2w.tolist(),
        })
    manifest = {"fx": focal, "fy": focal, "cx": width / 2, "cy": height / 2,
                "w": width, "h": height, "frames": frames}
    (dataset_dir / "transforms.json").write_text(json.dumps(manifest, indent=1))
    views = load_dataset(dataset_dir)
    for v in views:
        write_image(render(scene, v).color, v.image_path)
    return views


def style_image(size=32, seed=None) -> ImageBuffer:
    """Red-dominant gradient: far from typical render statistics."""
    y, x = np.meshgrid(np.linspace(0, 1, size), np.linspace(0, 1, size), indexing="ij")
    data = np.stack([0.7 + 0.3 * x, 0.15 * y, 0.1 + 0.1 * x], axis=-1)
    if seed is not None:
        data += np.random.default_rng(seed).normal(scale=0.02, size=data.shape)
    return ImageBuffer(np.clip(data, 0.0, 1.0))
