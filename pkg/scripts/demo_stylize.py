#!/usr/bin/env python3
"""End-to-end demo on a synthetic scene with the built-in mock editor.

Builds a small splat scene and a camera track, runs the full
edit-then-optimize pipeline, and scores multi-view consistency of the
result. No ML assets needed; finishes in under a minute on a laptop.

    python scripts/demo_stylize.py --out /tmp/gsstyle-demo
"""

import argparse
import json
import sys
from pathlib import Path

import numpy as np

ROOT = Path(__file__).resolve().parent.parent
sys.path.insert(0, str(ROOT / "src"))

from gsstyle.cli import main as cli_main  # noqa: E402
from gsstyle.dataset import load_dataset  # noqa: E402
from gsstyle.images import write_image  # noqa: E402
from gsstyle.ply import save_ply  # noqa: E402
from gsstyle.rasterizer import render  # noqa: E402
from gsstyle.scene import GaussianScene, ImageBuffer  # noqa: E402
from make_encoder import TINY_PLAN, VGG_MEAN, VGG_STD, build  # noqa: E402
from gsstyle.encoder import save_encoder  # noqa: E402


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", default="demo-out")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--iterations", type=int, default=300)
    args = parser.parse_args()

    out = Path(args.out)
    data = out / "inputs"
    data.mkdir(parents=True, exist_ok=True)

    rng = np.random.default_rng(args.seed)
    n = 500
    scene = GaussianScene(
        positions=np.column_stack([
            rng.uniform(-1.4, 1.4, n), rng.uniform(-1.4, 1.4, n),
            rng.uniform(2.5, 3.5, n)]),
        log_scales=np.log(rng.uniform(0.05, 0.15, (n, 3))),
        rotations=rng.normal(size=(n, 4)),
        opacity_logits=rng.uniform(0.5, 3.0, n),
        sh_coeffs=rng.normal(scale=0.25, size=(n, 4, 3)),
        sh_degree=1,
    )
    save_ply(scene, data / "scene.ply")

    frames = []
    for i, tx in enumerate(np.linspace(-0.5, 0.5, 12)):
        c2w = np.eye(4)
        c2w[0, 3] = tx
        frames.append({"id": f"cam{i:02d}", "file_path": f"im_{i:02d}.png",
                       "transform_matrix": c2w.tolist()})
    (data / "transforms.json").write_text(json.dumps(
        {"fx": 64.0, "fy": 64.0, "cx": 32.0, "cy": 32.0, "w": 64, "h": 64,
         "frames": frames}, indent=1))
    for v in load_dataset(data):
        write_image(render(scene, v).color, v.image_path)

    sy, sx = np.meshgrid(np.linspace(0, 1, 48), np.linspace(0, 1, 48), indexing="ij")
    style = ImageBuffer(np.clip(np.stack(
        [0.75 + 0.25 * sx, 0.2 * sy, 0.15 + 0.1 * sx], axis=-1), 0, 1))
    write_image(style, data / "style.png")
    save_encoder(build(TINY_PLAN, 0, VGG_MEAN, VGG_STD), data / "encoder.json")

    rc = cli_main([
        "stylize",
        "--scene", str(data / "scene.ply"),
        "--dataset", str(data),
        "--style", str(data / "style.png"),
        "--encoder", str(data / "encoder.json"),
        "--out", str(out / "run"),
        "--seed", str(args.seed),
        "--max-iterations", str(args.iterations),
        "--lr", "0.02",
        "--nnfm-layer", "relu2_1",
        "--perceptual-layers", "relu1_1,relu2_1",
        "--w-perceptual", "0.05",
    ])
    if rc != 0:
        sys.exit(rc)

    rc = cli_main([
        "eval",
        "--scene", str(out / "run" / "stylized.ply"),
        "--dataset", str(data),
        "--out", str(out / "eval"),
    ])
    sys.exit(rc)


if __name__ == "__main__":
    main()
