#!/usr/bin/env python3
"""Generate the committed test fixtures under tests/data/.

Deterministic by construction (seeded scene, byte-stable PNG/PLY writers),
so reruns reproduce the exact same bytes. Run from the repo root:

    python scripts/make_fixtures.py
"""

import json
import sys
from pathlib import Path

import numpy as np

ROOT = Path(__file__).resolve().parent.parent
sys.path.insert(0, str(ROOT / "src"))

from gsstyle.images import write_image  # noqa: E402
from gsstyle.ply import load_ply, save_ply  # noqa: E402
from gsstyle.rasterizer import render  # noqa: E402
from gsstyle.scene import GaussianScene, ImageBuffer  # noqa: E402
from gsstyle.dataset import load_dataset  # noqa: E402


def fixture_scene(n=80, seed=13) -> GaussianScene:
    # background stays at the default: PLY does not carry it, so goldens must
    # match what a scene loaded from disk renders
    rng = np.random.default_rng(seed)
    return GaussianScene(
        positions=np.column_stack([
            rng.uniform(-1.0, 1.0, n),
            rng.uniform(-1.0, 1.0, n),
            rng.uniform(2.0, 3.0, n),
        ]),
        log_scales=np.log(rng.uniform(0.05, 0.2, (n, 3))),
        rotations=rng.normal(size=(n, 4)),
        opacity_logits=rng.uniform(0.0, 2.5, n),
        sh_coeffs=rng.normal(scale=0.25, size=(n, 4, 3)),
        sh_degree=1,
    )


def main():
    out = ROOT / "tests" / "data"
    out.mkdir(parents=True, exist_ok=True)

    save_ply(fixture_scene(), out / "fixture_scene.ply")
    scene = load_ply(out / "fixture_scene.ply")  # render exactly what tools load

    frames = []
    for i, tx in enumerate(np.linspace(-0.3, 0.3, 4)):
        c2w = np.eye(4)
        c2w[0, 3] = tx
        frames.append({
            "id": f"cam{i}",
            "file_path": f"im_{i}.png",
            "transform_matrix": c2w.tolist(),
        })
    manifest = {"fx": 40.0, "fy": 40.0, "cx": 20.0, "cy": 20.0, "w": 40, "h": 40,
                "frames": frames}
    (out / "transforms.json").write_text(json.dumps(manifest, indent=1))

    views = load_dataset(out)
    for v in views:
        write_image(render(scene, v).color, v.image_path)

    # golden render for the CLI byte-comparison test: view cam1
    write_image(render(scene, views[1]).color, out / "golden_render_cam1.png")

    sy, sx = np.meshgrid(np.linspace(0, 1, 24), np.linspace(0, 1, 24), indexing="ij")
    style = ImageBuffer(np.clip(np.stack(
        [0.7 + 0.3 * sx, 0.15 * sy, 0.1 + 0.1 * sx], axis=-1), 0, 1))
    write_image(style, out / "style.png")

    make_golden_job(out, scene, views[:2], out / "style.png")

    print(f"fixtures written under {out}")


def make_golden_job(out: Path, scene, views, style_path):
    """One committed request-side job directory: the protocol conformance
    fixture shared by the mock editor's tests and any external editor's."""
    import shutil

    from gsstyle.editor import EditJob, EditRequestView, compute_edges, submit_job

    golden = out / "golden_job"
    if golden.exists():
        shutil.rmtree(golden)

    stage = out / "_stage"
    stage.mkdir(exist_ok=True)
    requests = []
    for v in views:
        result = render(scene, v)
        render_path = stage / f"r_{v.id}.png"
        edge_path = stage / f"e_{v.id}.png"
        write_image(result.color, render_path)
        write_image(compute_edges(result.color), edge_path)
        requests.append(EditRequestView(
            view_id=v.id, render_path=str(render_path), edge_path=str(edge_path),
            width=v.width, height=v.height,
        ))
    job = EditJob(job_id="golden", requests=requests, style_path=str(style_path),
                  prompt="a watercolor painting", noise_seed=42,
                  editor_params={"conditioning_scale": 0.8})
    submit_job(out / "golden_job", job)
    shutil.rmtree(stage)


if __name__ == "__main__":
    main()
