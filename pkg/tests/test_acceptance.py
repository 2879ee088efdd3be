"""Acceptance suite: every exit criterion at its stated tolerance.

Each test prints one `ACCEPTANCE <name>: PASS` line (visible with -s) and
enforces both the numeric tolerance and the runtime budget. The expensive
end-to-end fixture (mock editor, 500 splats, 20 views at 64x64) runs once
per session and feeds the stylization, reproducibility, and consistency-
ordering criteria.

Run:  pytest tests/test_acceptance.py -v -s
"""

import json
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pytest

from gsstyle.consistency import EvalConfig, evaluate
from gsstyle.encoder import forward, save_encoder, load_encoder
from gsstyle.images import read_image, write_image
from gsstyle.losses import (
    NNFM_EPS,
    LossWeights,
    compute_style_features,
    nnfm_loss,
    nnfm_match,
    perceptual_loss,
)
from gsstyle.pipeline import StylizeConfig, stylize
from gsstyle.ply import load_ply, save_ply
from gsstyle.rasterizer import RenderOptions, render, render_backward
from gsstyle.scene import CameraView, GaussianScene, ImageBuffer

from helpers import (
    identity_view,
    make_test_encoder,
    random_scene,
    solid_color_scene,
    style_image,
    write_synthetic_dataset,
)
from oracles import nnfm_exhaustive, relative_error, render_naive


def _report(name: str, elapsed: float):
    print(f"\nACCEPTANCE {name}: PASS ({elapsed:.1f}s)")


# ---------------------------------------------------------------- criterion 1
def test_rasterizer_oracle_equivalence():
    """Tiled render equals the naive full-sort reference within 1e-5/channel
    on 20 random scenes (<=200 Gaussians, 32x32); runtime < 10 s."""
    start = time.monotonic()
    opts = RenderOptions(transmittance_stop=0.0)  # reference composites everything
    rng = np.random.default_rng(2024)
    worst = 0.0
    for trial in range(20):
        n = int(rng.integers(20, 201))
        scene = random_scene(n, sh_degree=int(rng.integers(0, 3)), seed=trial,
                             background=(0.1, 0.2, 0.3))
        view = identity_view(32, 32, focal=float(rng.uniform(20, 40)),
                             tx=float(rng.uniform(-0.2, 0.2)))
        out = render(scene, view, opts)
        ref_color, ref_alpha, ref_depth = render_naive(scene, view, opts)
        worst = max(worst,
                    np.abs(out.color.data - ref_color).max(),
                    np.abs(out.alpha.data[:, :, 0] - ref_alpha).max(),
                    np.abs(out.depth.data[:, :, 0] - ref_depth).max())
    elapsed = time.monotonic() - start
    assert worst <= 1e-5, f"max deviation {worst}"
    assert elapsed < 10.0, f"runtime {elapsed:.1f}s over budget"
    _report("rasterizer-oracle-equivalence", elapsed)


# ---------------------------------------------------------------- criterion 2
def test_gradient_suite():
    """render_backward, perceptual_loss, and nnfm_loss pass central finite
    differences (rel err < 1e-3) on >=5 random small instances each; < 60 s."""
    start = time.monotonic()
    h = 1e-3
    encoder = make_test_encoder(seed=2, channels=(3, 4, 6))

    for seed in range(5):
        scene = random_scene(8, sh_degree=1, seed=100 + seed)
        view = identity_view(12, 12, focal=11.0)
        weights = np.random.default_rng(seed).normal(size=(12, 12, 3))
        grads = render_backward(scene, view, ImageBuffer(weights))
        base = scene.sh_coeffs.astype(np.float64).copy()
        flat = base.copy().ravel()
        fd = np.zeros(flat.size)
        for k in range(flat.size):
            orig = flat[k]
            for sign, slot in ((1, 0), (-1, 1)):
                flat[k] = orig + sign * h
                scene.sh_coeffs = flat.reshape(base.shape).astype(np.float32)
                val = float((render(scene, view).color.data * weights).sum())
                fd[k] = fd[k] + sign * val
            flat[k] = orig
            fd[k] /= 2 * h
        scene.sh_coeffs = base.astype(np.float32)
        err = relative_error(grads.d_sh.ravel(), fd)
        assert err < 1e-3, f"render_backward seed {seed}: rel err {err}"

    fd_h = 1e-5
    for seed in range(5):
        rng = np.random.default_rng(200 + seed)
        img = ImageBuffer(rng.uniform(size=(6, 6, 3)))
        target = ImageBuffer(rng.uniform(size=(6, 6, 3)))
        layers = {"relu1": None, "relu2": None}
        _, grad = perceptual_loss(encoder, img, target, layers)
        fd = np.zeros_like(img.data)
        d = img.data
        for idx in np.ndindex(d.shape):
            orig = d[idx]
            d[idx] = orig + fd_h
            fp = perceptual_loss(encoder, img, target, layers)[0]
            d[idx] = orig - fd_h
            fm = perceptual_loss(encoder, img, target, layers)[0]
            d[idx] = orig
            fd[idx] = (fp - fm) / (2 * fd_h)
        err = relative_error(grad.data, fd)
        assert err < 1e-3, f"perceptual seed {seed}: rel err {err}"

    for seed in range(5):
        rng = np.random.default_rng(300 + seed)
        img = ImageBuffer(rng.uniform(size=(6, 6, 3)))
        style = ImageBuffer(rng.uniform(size=(6, 6, 3)))
        _, grad = nnfm_loss(encoder, img, style, "relu2")
        sf = compute_style_features(encoder, style, "relu2")
        fs_flat = sf.data.reshape(-1, sf.channels)
        fr = forward(encoder, img, ["relu2"])["relu2"]
        frozen, _ = nnfm_match(fr.data.reshape(-1, fr.channels), fs_flat)

        def frozen_loss(image_data):
            feat = forward(encoder, ImageBuffer(image_data), ["relu2"])["relu2"]
            f2 = feat.data.reshape(-1, feat.channels)
            v = fs_flat[frozen]
            nu = np.sqrt((f2 * f2).sum(-1))
            nv = np.sqrt((v * v).sum(-1))
            return float((1 - (f2 * v).sum(-1) / (nu * nv + NNFM_EPS)).mean())

        fd = np.zeros_like(img.data)
        d = img.data
        for idx in np.ndindex(d.shape):
            orig = d[idx]
            d[idx] = orig + fd_h
            fp = frozen_loss(d)
            d[idx] = orig - fd_h
            fm = frozen_loss(d)
            d[idx] = orig
            fd[idx] = (fp - fm) / (2 * fd_h)
        err = relative_error(grad.data, fd)
        assert err < 1e-3, f"nnfm seed {seed}: rel err {err}"

    elapsed = time.monotonic() - start
    assert elapsed < 60.0, f"runtime {elapsed:.1f}s over budget"
    _report("gradient-suite", elapsed)


# ---------------------------------------------------------------- criterion 3
def test_nnfm_search_oracle():
    """Blocked nearest-neighbor search equals exhaustive O(N*M) search exactly
    on 50 random feature-map pairs up to 64x64; < 30 s."""
    start = time.monotonic()
    rng = np.random.default_rng(7)
    for trial in range(50):
        h, w = rng.integers(2, 65, size=2)
        hs, ws = rng.integers(2, 65, size=2)
        c = int(rng.integers(4, 17))
        fr = rng.normal(size=(int(h), int(w), c))
        fs = rng.normal(size=(int(hs), int(ws), c))
        m1, d1 = nnfm_match(fr, fs, block_rows=int(rng.integers(1, 200)))
        _, m2, d2 = nnfm_exhaustive(fr, fs)
        assert np.array_equal(m1, m2), f"trial {trial}: match indices differ"
        assert np.array_equal(d1, d2), f"trial {trial}: distances differ"
    elapsed = time.monotonic() - start
    assert elapsed < 30.0, f"runtime {elapsed:.1f}s over budget"
    _report("nnfm-search-oracle", elapsed)


# ---------------------------------------------------------------- criterion 4
def test_compositing_hand_cases():
    """One- and two-Gaussian analytic compositing values match to 1e-6."""
    start = time.monotonic()
    view = CameraView(id="v", width=16, height=16, fx=10, fy=10,
                      cx=8.5, cy=8.5, world_to_camera=np.eye(4))

    one = solid_color_scene((1, 0, 0), position=(0, 0, 1.0), opacity=0.8)
    out = render(one, view)
    assert np.abs(out.color.data[8, 8] - [0.8, 0.0, 0.0]).max() <= 1e-6
    assert abs(out.alpha.data[8, 8, 0] - 0.8) <= 1e-6

    near = solid_color_scene((1, 0, 0), position=(0, 0, 1.0), opacity=0.5)
    far = solid_color_scene((0, 1, 0), position=(0, 0, 2.0), opacity=0.5, scale=0.1)
    two = GaussianScene(
        positions=np.vstack([near.positions, far.positions]),
        log_scales=np.vstack([near.log_scales, far.log_scales]),
        rotations=np.vstack([near.rotations, far.rotations]),
        opacity_logits=np.concatenate([near.opacity_logits, far.opacity_logits]),
        sh_coeffs=np.vstack([near.sh_coeffs, far.sh_coeffs]),
        sh_degree=0,
    )
    out = render(two, view)
    assert np.abs(out.color.data[8, 8] - [0.5, 0.25, 0.0]).max() <= 1e-6
    assert abs(out.alpha.data[8, 8, 0] - 0.75) <= 1e-6
    _report("compositing-hand-cases", time.monotonic() - start)


# ------------------------------------------------------- criteria 5 and 6 rig
@dataclass
class EndToEndRun:
    scene: GaussianScene
    stylized: GaussianScene
    views: list
    selected_ids: list
    edited: dict
    l1_before: float
    l1_after: float
    ply_bytes: bytes
    rerun_ply_bytes: bytes
    elapsed: float


def _mean_l1_to_edits(scene, views_by_id, edited):
    vals = []
    for vid, image in edited.items():
        out = render(scene, views_by_id[vid])
        vals.append(np.abs(out.color.data - image.data).mean())
    return float(np.mean(vals))


def _run_fixture(root: Path, seed=17) -> tuple[GaussianScene, Path, Path]:
    scene = random_scene(500, sh_degree=1, seed=seed, depth_range=(2.5, 3.5))
    dataset_dir = root / "data"
    write_synthetic_dataset(dataset_dir, scene, num_views=20, width=64, height=64,
                            focal=64.0, track_extent=0.5)
    write_image(style_image(48), root / "style.png")
    save_encoder(make_test_encoder(seed=2, channels=(3, 8, 8)), root / "encoder.json")
    return scene, dataset_dir, root / "style.png"


def _config():
    return StylizeConfig(
        max_iterations=500,
        views_per_round=20,
        selection_seed=9,
        noise_seed=9,
        loss_weights=LossWeights(w_l1=1.0, w_perceptual=0.0, w_nnfm=0.1),
        learning_rate=0.01,
        convergence_window=50,
        convergence_tolerance=1e-4,
        nnfm_layer="relu2",
    )


@pytest.fixture(scope="module")
def e2e(tmp_path_factory) -> EndToEndRun:
    root = tmp_path_factory.mktemp("e2e")
    scene, dataset_dir, style_path = _run_fixture(root)
    encoder = load_encoder(root / "encoder.json")

    start = time.monotonic()
    stylized, report = stylize(scene, dataset_dir, style_path, "painterly",
                               _config(), root / "work", encoder=encoder)
    elapsed = time.monotonic() - start

    from gsstyle.dataset import load_dataset

    views = load_dataset(dataset_dir)
    views_by_id = {v.id: v for v in views}
    job_dir = root / "work" / "jobs" / "edit-00000009"
    edited = {}
    for vid in report.selected_views:
        edited[vid] = read_image(job_dir / "response" / f"view_{vid}.png")

    l1_before = _mean_l1_to_edits(scene, views_by_id, edited)
    l1_after = _mean_l1_to_edits(stylized, views_by_id, edited)

    ply_path = root / "stylized.ply"
    save_ply(stylized, ply_path)

    # identical seeds, fresh working directory: the rerun must be byte-equal
    rerun_root = tmp_path_factory.mktemp("e2e-rerun")
    scene2, dataset2, style2 = _run_fixture(rerun_root)
    stylized2, _ = stylize(scene2, dataset2, style2, "painterly", _config(),
                           rerun_root / "work", encoder=encoder)
    rerun_ply = rerun_root / "stylized.ply"
    save_ply(stylized2, rerun_ply)

    return EndToEndRun(
        scene=scene, stylized=stylized, views=views,
        selected_ids=report.selected_views, edited=edited,
        l1_before=l1_before, l1_after=l1_after,
        ply_bytes=ply_path.read_bytes(), rerun_ply_bytes=rerun_ply.read_bytes(),
        elapsed=elapsed,
    )


# ---------------------------------------------------------------- criterion 5
def test_end_to_end_mock_stylization(e2e):
    """Mock-editor run on the 500-splat / 20-view / 64x64 fixture within 500
    iterations: geometry bit-identical, final mean L1 to the edited targets at
    most half its pre-optimization value, byte-reproducible; < 5 min."""
    assert e2e.scene.positions.tobytes() == e2e.stylized.positions.tobytes()
    assert e2e.scene.log_scales.tobytes() == e2e.stylized.log_scales.tobytes()
    assert e2e.scene.rotations.tobytes() == e2e.stylized.rotations.tobytes()

    assert e2e.l1_after <= 0.5 * e2e.l1_before, (
        f"L1 {e2e.l1_before:.4f} -> {e2e.l1_after:.4f} "
        f"({e2e.l1_after / e2e.l1_before:.1%} of initial)"
    )

    assert e2e.ply_bytes == e2e.rerun_ply_bytes, "rerun PLY bytes differ"

    assert e2e.elapsed < 300.0, f"runtime {e2e.elapsed:.0f}s over budget"
    _report("end-to-end-mock-stylization", e2e.elapsed)


# ---------------------------------------------------------------- criterion 6
def test_consistency_ordering(e2e):
    """Warped-RMSE of the stylized 3D renders is no worse than that of the
    per-frame 2D edits over the same short-range pairs."""
    start = time.monotonic()
    selected = [v for v in e2e.views if v.id in set(e2e.selected_ids)]
    config = EvalConfig(short_stride=1, long_stride=0)

    three_d = evaluate(e2e.stylized, selected, config)
    two_d = evaluate(e2e.stylized, selected, config, images=e2e.edited)

    rmse_3d = three_d.aggregates["short"]["rmse_mean"]
    rmse_2d = two_d.aggregates["short"]["rmse_mean"]
    assert rmse_3d <= rmse_2d, (
        f"stylized-3D RMSE {rmse_3d:.5f} should not exceed 2D-edit RMSE {rmse_2d:.5f}"
    )
    elapsed = time.monotonic() - start
    print(f"\n  (3D warp-RMSE {rmse_3d:.5f} vs per-frame-2D {rmse_2d:.5f})")
    _report("consistency-ordering", elapsed)


# ---------------------------------------------------------------- criterion 7
def test_evaluator_self_consistency():
    """Evaluating an unstylized scene against itself: masked RMSE <= 1e-4 on
    every short-range pair (each pair warps a view onto itself)."""
    start = time.monotonic()
    data = Path(__file__).parent / "data"
    scene = load_ply(data / "fixture_scene.ply")
    worst = 0.0
    for i, tx in enumerate(np.linspace(-0.3, 0.3, 4)):
        view = identity_view(40, 40, focal=40.0, view_id=f"cam{i}", tx=float(tx))
        twin = identity_view(40, 40, focal=40.0, view_id=f"cam{i}'", tx=float(tx))
        report = evaluate(scene, [view, twin], EvalConfig(short_stride=1, long_stride=0))
        assert len(report.pairs) == 1
        worst = max(worst, report.pairs[0].rmse)
    assert worst <= 1e-4, f"worst self-pair RMSE {worst}"
    _report("evaluator-self-consistency", time.monotonic() - start)


# ---------------------------------------------------------------- criterion 8
def test_ply_round_trip_bit_exact(tmp_path):
    """save(load(save(scene))) is byte-identical for 20 random scenes."""
    start = time.monotonic()
    rng = np.random.default_rng(31)
    for trial in range(20):
        scene = random_scene(int(rng.integers(1, 120)),
                             sh_degree=int(rng.integers(0, 4)), seed=1000 + trial)
        first = tmp_path / f"a{trial}.ply"
        second = tmp_path / f"b{trial}.ply"
        save_ply(scene, first)
        save_ply(load_ply(first), second)
        assert first.read_bytes() == second.read_bytes(), f"trial {trial}"
    _report("ply-round-trip", time.monotonic() - start)
