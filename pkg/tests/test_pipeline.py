import numpy as np
import pytest

from gsstyle.images import write_image
from gsstyle.losses import LossWeights
from gsstyle.pipeline import (
    DatasetEntry,
    OptimizerState,
    StylizeConfig,
    TrainingDataset,
    build_edit_job,
    build_training_dataset,
    ingest_edits,
    optimize_step,
    select_views,
    stylize,
)
from gsstyle.ply import load_ply, save_ply
from gsstyle.rasterizer import render
from gsstyle.scene import ImageBuffer

from helpers import (
    identity_view,
    make_test_encoder,
    random_scene,
    solid_color_scene,
    style_image,
    write_synthetic_dataset,
)


def _dataset(num_views=6, seed=0, weight=1.0):
    rng = np.random.default_rng(seed)
    entries = []
    for i in range(num_views):
        view = identity_view(16, 16, view_id=f"v{i:02d}", tx=0.05 * i)
        entries.append(DatasetEntry(
            view=view, image=ImageBuffer(rng.uniform(size=(16, 16, 3))),
            origin="original", photometric_weight=weight,
        ))
    return TrainingDataset(entries)


class TestSelectViews:
    def test_k_equals_size_returns_all(self):
        ds = _dataset(5)
        out = select_views(ds, 5, seed=1)
        assert [v.id for v in out] == [f"v{i:02d}" for i in range(5)]

    def test_same_seed_same_subset(self):
        ds = _dataset(10)
        a = select_views(ds, 4, seed=9)
        b = select_views(ds, 4, seed=9)
        assert [v.id for v in a] == [v.id for v in b]

    def test_sorted_output(self):
        ds = _dataset(10)
        out = select_views(ds, 6, seed=3)
        ids = [v.id for v in out]
        assert ids == sorted(ids)

    def test_k_too_large_rejected(self):
        with pytest.raises(ValueError):
            select_views(_dataset(3), 4, seed=0)

    def test_uniform_frequency(self):
        # inclusion count of each of n views over many draws is binomial
        ds = _dataset(8)
        draws, k = 10_000, 3
        counts = {f"v{i:02d}": 0 for i in range(8)}
        for s in range(draws):
            for v in select_views(ds, k, seed=s):
                counts[v.id] += 1
        p = k / 8
        sigma = np.sqrt(draws * p * (1 - p))
        for c in counts.values():
            assert abs(c - draws * p) <= 3 * sigma


class TestBuildEditJob:
    def test_three_views_make_six_files(self, tmp_path):
        scene = random_scene(20, seed=0)
        views = [identity_view(16, 16, view_id=f"v{i}", tx=0.1 * i) for i in range(3)]
        write_image(style_image(8), tmp_path / "style.png")
        job = build_edit_job(scene, views, tmp_path / "style.png", "p", 3,
                             stage_dir=tmp_path / "stage")
        assert len(job.requests) == 3
        staged = list((tmp_path / "stage").iterdir())
        assert len(staged) == 6  # render + edge per view

    def test_renders_delegate_to_rasterizer(self, tmp_path):
        from gsstyle.images import read_image, quantize

        scene = random_scene(20, seed=0)
        view = identity_view(16, 16, view_id="v0")
        write_image(style_image(8), tmp_path / "style.png")
        job = build_edit_job(scene, [view], tmp_path / "style.png", "", 0,
                             stage_dir=tmp_path / "stage")
        staged = read_image(job.requests[0].render_path)
        direct = render(scene, view).color
        assert np.array_equal(quantize(staged), quantize(direct))

    def test_deterministic_bytes(self, tmp_path):
        scene = random_scene(20, seed=0)
        views = [identity_view(16, 16, view_id="v0")]
        write_image(style_image(8), tmp_path / "style.png")
        j1 = build_edit_job(scene, views, tmp_path / "style.png", "", 5,
                            stage_dir=tmp_path / "s1")
        j2 = build_edit_job(scene, views, tmp_path / "style.png", "", 5,
                            stage_dir=tmp_path / "s2")
        for a, b in zip(j1.requests, j2.requests):
            assert open(a.render_path, "rb").read() == open(b.render_path, "rb").read()
            assert open(a.edge_path, "rb").read() == open(b.edge_path, "rb").read()


class TestIngest:
    def _result(self, tmp_path, ds, n):
        from gsstyle.editor import EditResult

        rng = np.random.default_rng(5)
        images = {}
        for e in ds.entries[:n]:
            p = tmp_path / f"edited_{e.view.id}.png"
            write_image(ImageBuffer(rng.uniform(size=(16, 16, 3))), p)
            images[e.view.id] = str(p)
        status = "complete" if n == len(ds.entries) else "partial"
        return EditResult(job_id="j", status=status, images=images)

    def test_complete_adds_all(self, tmp_path):
        ds = _dataset(6, weight=0.0)
        out = ingest_edits(ds, self._result(tmp_path, ds, 6))
        assert len(out.entries) == 12
        edited = [e for e in out.entries if e.origin == "edited"]
        assert len(edited) == 6
        assert all(e.generation == 1 for e in edited)
        assert all(e.photometric_weight == 1.0 for e in edited)

    def test_partial_adds_fewer(self, tmp_path):
        ds = _dataset(6, weight=0.0)
        out = ingest_edits(ds, self._result(tmp_path, ds, 4))
        assert len(out.entries) == 10

    def test_originals_untouched(self, tmp_path):
        ds = _dataset(4, weight=0.0)
        before = [e.image.data.copy() for e in ds.entries]
        out = ingest_edits(ds, self._result(tmp_path, ds, 4))
        for prev, e in zip(before, out.entries[:4]):
            assert e.origin == "original"
            assert np.array_equal(e.image.data, prev)

    def test_failed_result_rejected(self, tmp_path):
        from gsstyle.editor import EditResult

        ds = _dataset(2)
        with pytest.raises(ValueError):
            ingest_edits(ds, EditResult(job_id="j", status="failed", images={}))


class TestAdam:
    def test_first_step_magnitude(self):
        scene = solid_color_scene((0.6, 0.6, 0.6))
        state = OptimizerState.for_scene(scene, learning_rate=0.01, trainable="sh_only")
        g = np.zeros(scene.sh_coeffs.shape)
        g[0, 0, 0] = 1.0
        before = float(scene.sh_coeffs[0, 0, 0])
        state.apply(scene, g, None)
        moved = float(scene.sh_coeffs[0, 0, 0]) - before
        assert moved == pytest.approx(-0.01 / (1 + 1e-8), abs=1e-6)

    def test_zero_gradient_leaves_parameters(self):
        scene = solid_color_scene((0.6, 0.6, 0.6))
        state = OptimizerState.for_scene(scene, 0.01, "sh_only")
        before = scene.sh_coeffs.copy()
        state.apply(scene, np.zeros(scene.sh_coeffs.shape), None)
        assert np.array_equal(scene.sh_coeffs, before)
        assert state.step == 1

    def test_moments_decay_on_zero_grad(self):
        scene = solid_color_scene((0.6, 0.6, 0.6))
        state = OptimizerState.for_scene(scene, 0.01, "sh_only")
        g = np.ones(scene.sh_coeffs.shape)
        state.apply(scene, g, None)
        m_before = state.m_sh.copy()
        state.apply(scene, np.zeros_like(g), None)
        assert np.all(np.abs(state.m_sh) < np.abs(m_before))


class TestOptimizeStep:
    def test_toy_convergence(self):
        # one huge, nearly opaque Gaussian: the render can actually reach a
        # constant target, so the L1 objective is effectively convex in color
        scene = solid_color_scene((0.3, 0.3, 0.3), opacity=0.9999, scale=5.0)
        view = identity_view(16, 16, focal=10.0)
        target = ImageBuffer(np.full((16, 16, 3), 0.8))
        ds = TrainingDataset([DatasetEntry(view=view, image=target,
                                           origin="edited", photometric_weight=1.0)])
        config = StylizeConfig(max_iterations=200, views_per_round=1,
                               loss_weights=LossWeights(1, 0, 0), learning_rate=0.05)
        state = OptimizerState.for_scene(scene, config.learning_rate, "sh_only")
        first = None
        for _ in range(200):
            report, state = optimize_step(scene, ds, None, None, config, state)
            if first is None:
                first = report.l1
        assert report.l1 < 0.1 * first

    def test_no_signal_rejected(self):
        scene = solid_color_scene((0.3, 0.3, 0.3))
        view = identity_view(16, 16)
        ds = TrainingDataset([DatasetEntry(view=view,
                                           image=ImageBuffer(np.zeros((16, 16, 3))),
                                           photometric_weight=0.0)])
        config = StylizeConfig(loss_weights=LossWeights(1, 0, 0))
        state = OptimizerState.for_scene(scene, 0.01, "sh_only")
        with pytest.raises(ValueError):
            optimize_step(scene, ds, None, None, config, state)


def _stylize_fixture(tmp_path, n=120, num_views=5, size=32, max_iterations=40,
                     **config_kwargs):
    scene = random_scene(n, sh_degree=0, seed=21, depth_range=(2.5, 3.5))
    dataset_dir = tmp_path / "data"
    write_synthetic_dataset(dataset_dir, scene, num_views, width=size, height=size,
                            focal=float(size), track_extent=0.4)
    write_image(style_image(24), tmp_path / "style.png")
    encoder = make_test_encoder(seed=2, channels=(3, 4, 6))
    defaults = dict(
        max_iterations=max_iterations,
        views_per_round=num_views,
        selection_seed=3,
        noise_seed=3,
        loss_weights=LossWeights(1.0, 0.0, 0.1),
        learning_rate=0.05,
        nnfm_layer="relu2",
    )
    defaults.update(config_kwargs)
    config = StylizeConfig(**defaults)
    return scene, dataset_dir, config, encoder


class TestStylize:
    def test_zero_iterations_returns_unchanged(self, tmp_path):
        scene, dataset_dir, config, encoder = _stylize_fixture(
            tmp_path, max_iterations=0)
        out, report = stylize(scene, dataset_dir, tmp_path / "style.png", "",
                              config, tmp_path / "work", encoder=encoder)
        assert np.array_equal(out.sh_coeffs, scene.sh_coeffs)
        assert report.edit_status == "complete"
        assert report.iterations_run == 0
        assert report.steps == []

    def test_geometry_immutable_and_loss_drops(self, tmp_path):
        scene, dataset_dir, config, encoder = _stylize_fixture(tmp_path)
        out, report = stylize(scene, dataset_dir, tmp_path / "style.png", "",
                              config, tmp_path / "work", encoder=encoder)
        assert np.array_equal(out.positions, scene.positions)
        assert np.array_equal(out.log_scales, scene.log_scales)
        assert np.array_equal(out.rotations, scene.rotations)
        assert not np.array_equal(out.sh_coeffs, scene.sh_coeffs)
        assert report.steps[-1]["total"] < report.steps[0]["total"]

    def test_moving_average_never_diverges(self, tmp_path):
        scene, dataset_dir, config, encoder = _stylize_fixture(
            tmp_path, max_iterations=60, convergence_window=10)
        _, report = stylize(scene, dataset_dir, tmp_path / "style.png", "",
                            config, tmp_path / "work", encoder=encoder)
        totals = [s["total"] for s in report.steps]
        w = 10
        assert np.mean(totals[-w:]) <= np.mean(totals[:w]) + 1e-9

    def test_byte_reproducible(self, tmp_path):
        outs = []
        for run in ("r1", "r2"):
            scene, dataset_dir, config, encoder = _stylize_fixture(
                tmp_path / run, max_iterations=25)
            out, _ = stylize(scene, dataset_dir, (tmp_path / run) / "style.png", "",
                             config, (tmp_path / run) / "work", encoder=encoder)
            ply = (tmp_path / run) / "out.ply"
            save_ply(out, ply)
            outs.append(ply.read_bytes())
        assert outs[0] == outs[1]

    def test_snapshots_written(self, tmp_path):
        scene, dataset_dir, config, encoder = _stylize_fixture(
            tmp_path, max_iterations=20, snapshot_every=10)
        stylize(scene, dataset_dir, tmp_path / "style.png", "", config,
                tmp_path / "work", encoder=encoder)
        snaps = sorted((tmp_path / "work").glob("snapshot_*.ply"))
        assert [s.name for s in snaps] == ["snapshot_000010.ply", "snapshot_000020.ply"]
        load_ply(snaps[0])  # decodable

    def test_original_weight_zero_keeps_originals_out(self, tmp_path):
        scene, dataset_dir, config, encoder = _stylize_fixture(tmp_path)
        ds = build_training_dataset(dataset_dir, original_weight=0.0)
        assert all(e.photometric_weight == 0.0 for e in ds.entries)

    def test_multi_round_gate(self, tmp_path):
        scene, dataset_dir, config, encoder = _stylize_fixture(
            tmp_path, num_views=4, max_iterations=20, edit_rounds=2,
            views_per_round=3)
        out, report = stylize(scene, dataset_dir, tmp_path / "style.png", "",
                              config, tmp_path / "work", encoder=encoder)
        assert report.iterations_run == 20
        assert len(report.selected_views) == 6  # 3 views per round, 2 rounds
        jobs = sorted(p.name for p in (tmp_path / "work" / "jobs").iterdir())
        assert len(jobs) == 2
        assert np.array_equal(out.positions, scene.positions)

    def test_editor_timeout_aborts(self, tmp_path):
        from gsstyle.editor import EditorTimeoutError

        external_root = tmp_path / "silent-root"
        external_root.mkdir()
        scene, dataset_dir, config, encoder = _stylize_fixture(
            tmp_path, editor=str(external_root), editor_timeout_s=0.4)
        with pytest.raises(EditorTimeoutError) as err:
            stylize(scene, dataset_dir, tmp_path / "style.png", "", config,
                    tmp_path / "work", encoder=encoder)
        assert err.value.report.edit_status == "timeout"
