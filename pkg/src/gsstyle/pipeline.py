"""Iterative dataset update: edit a sampled subset of views once, append the
edits to the training set (originals are never replaced), then re-optimize
Gaussian appearance until the iteration budget or a loss plateau.

Phases run strictly in sequence — select, render+edge, dispatch, await,
ingest, optimize — so the optimizer is the only writer of scene parameters.
Everything is seeded; with the built-in mock editor the whole run is
byte-reproducible.
"""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .dataset import load_dataset
from .editor import (
    EditJob,
    EditRequestView,
    EditResult,
    EditorTimeoutError,
    await_result,
    compute_edges,
    submit_job,
)
from .encoder import Encoder, FeatureMap
from .images import read_image, write_image
from .losses import LossReport, LossWeights, compute_style_features, total_loss
from .mock_editor import process_job
from .ply import save_ply
from .rasterizer import RenderOptions, render, render_backward
from .scene import CameraView, GaussianScene, ImageBuffer


@dataclass
class DatasetEntry:
    view: CameraView
    image: ImageBuffer
    origin: str = "original"          # original | edited
    photometric_weight: float = 0.0
    generation: int = 0


@dataclass
class TrainingDataset:
    entries: list[DatasetEntry] = field(default_factory=list)

    def __post_init__(self):
        for e in self.entries:
            if not np.isfinite(e.photometric_weight) or e.photometric_weight < 0:
                raise ValueError(f"entry {e.view.id}: bad photometric weight")

    def views(self) -> list[CameraView]:
        seen = {}
        for e in self.entries:
            seen.setdefault(e.view.id, e.view)
        return list(seen.values())

    def max_generation(self) -> int:
        return max((e.generation for e in self.entries), default=0)

    @classmethod
    def from_views(cls, views, images, original_weight: float = 0.0) -> "TrainingDataset":
        return cls([
            DatasetEntry(view=v, image=img, origin="original",
                         photometric_weight=original_weight, generation=0)
            for v, img in zip(views, images)
        ])


@dataclass
class OptimizerState:
    """Adam accumulators for the trainable appearance tensors."""

    m_sh: np.ndarray
    v_sh: np.ndarray
    m_opacity: np.ndarray | None
    v_opacity: np.ndarray | None
    step: int = 0
    learning_rate: float = 0.0025
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_scene(cls, scene: GaussianScene, learning_rate: float,
                  trainable: str) -> "OptimizerState":
        sh_shape = scene.sh_coeffs.shape
        opacity = trainable == "sh_and_opacity"
        return cls(
            m_sh=np.zeros(sh_shape),
            v_sh=np.zeros(sh_shape),
            m_opacity=np.zeros(len(scene)) if opacity else None,
            v_opacity=np.zeros(len(scene)) if opacity else None,
            learning_rate=learning_rate,
        )

    def _update(self, m, v, grad):
        m *= self.beta1
        m += (1.0 - self.beta1) * grad
        v *= self.beta2
        v += (1.0 - self.beta2) * grad * grad
        t = self.step
        m_hat = m / (1.0 - self.beta1 ** t)
        v_hat = v / (1.0 - self.beta2 ** t)
        return self.learning_rate * m_hat / (np.sqrt(v_hat) + self.eps)

    def apply(self, scene: GaussianScene, d_sh: np.ndarray,
              d_opacity: np.ndarray | None) -> None:
        self.step += 1
        delta = self._update(self.m_sh, self.v_sh, d_sh)
        scene.sh_coeffs = (scene.sh_coeffs.astype(np.float64) - delta).astype(np.float32)
        if self.m_opacity is not None and d_opacity is not None:
            delta_o = self._update(self.m_opacity, self.v_opacity, d_opacity)
            scene.opacity_logits = (
                scene.opacity_logits.astype(np.float64) - delta_o
            ).astype(np.float32)


@dataclass
class StylizeConfig:
    max_iterations: int = 1000
    views_per_round: int = 30
    selection_seed: int = 0
    noise_seed: int = 0
    loss_weights: LossWeights = field(default_factory=LossWeights)
    learning_rate: float = 0.0025
    convergence_window: int = 50
    convergence_tolerance: float = 1e-3
    trainable: str = "sh_only"
    editor: str = "mock"              # "mock" or a path to an external job root
    editor_timeout_s: float = 600.0
    editor_params: dict = field(default_factory=dict)
    prompt: str = ""
    edit_rounds: int = 1              # >1 interleaves further edit passes
    edited_weight: float = 1.0
    original_weight: float = 0.0
    snapshot_every: int = 0           # 0 disables snapshots
    nnfm_layer: str | None = None
    perceptual_layers: list[str] = field(default_factory=list)
    perceptual_channel_weights: dict | None = None  # layer -> weight vector
    render_options: RenderOptions = field(default_factory=RenderOptions)

    def __post_init__(self):
        if self.max_iterations < 0:
            raise ValueError("max_iterations must be >= 0")
        if self.views_per_round < 1:
            raise ValueError("views_per_round must be >= 1")
        if self.edit_rounds < 1:
            raise ValueError("edit_rounds must be >= 1")


@dataclass
class RunReport:
    config: dict
    seeds: dict
    num_views: int
    selected_views: list[str]
    editor_name: str = "none"
    edit_status: str = "skipped"
    steps: list[dict] = field(default_factory=list)
    phase_seconds: dict = field(default_factory=dict)
    stopped_reason: str = ""
    iterations_run: int = 0

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=1, sort_keys=True, default=str)


class DivergenceError(RuntimeError):
    def __init__(self, step: int, value: float):
        super().__init__(f"non-finite loss at step {step}: {value}")
        self.step = step


def select_views(dataset: TrainingDataset, k: int, seed: int) -> list[CameraView]:
    """Uniform sample of k distinct views without replacement, seeded, and
    returned sorted by view id so downstream artifacts are order-stable."""
    views = dataset.views()
    if k > len(views):
        raise ValueError(f"cannot select {k} of {len(views)} views")
    rng = np.random.default_rng(seed)
    chosen = rng.choice(len(views), size=k, replace=False)
    return sorted((views[i] for i in chosen), key=lambda v: v.id)


def build_edit_job(
    scene: GaussianScene,
    views: list[CameraView],
    style_path,
    prompt: str,
    seed: int,
    stage_dir,
    job_id: str | None = None,
    render_options: RenderOptions | None = None,
    edge_threshold: float = 0.0,
    editor_params: dict | None = None,
) -> EditJob:
    """Render each selected view, compute its edge map, and stage both as PNGs."""
    stage = Path(stage_dir)
    stage.mkdir(parents=True, exist_ok=True)
    requests = []
    for view in views:
        out = render(scene, view, render_options)
        render_path = stage / f"render_{view.id}.png"
        edge_path = stage / f"edge_{view.id}.png"
        write_image(out.color, render_path)
        write_image(compute_edges(out.color, edge_threshold), edge_path)
        requests.append(EditRequestView(
            view_id=view.id,
            render_path=str(render_path),
            edge_path=str(edge_path),
            width=view.width,
            height=view.height,
        ))
    return EditJob(
        job_id=job_id or f"edit-{seed:08d}",
        requests=requests,
        style_path=str(style_path),
        prompt=prompt,
        noise_seed=seed,
        editor_params=dict(editor_params or {}),
    )


def ingest_edits(dataset: TrainingDataset, result: EditResult,
                 edited_weight: float = 1.0) -> TrainingDataset:
    """Append one edited entry per returned view; originals stay untouched."""
    if result.status == "failed":
        raise ValueError(f"job {result.job_id}: cannot ingest a failed result")
    by_id = {}
    for e in dataset.entries:
        by_id.setdefault(e.view.id, e.view)
    generation = dataset.max_generation() + 1
    new_entries = list(dataset.entries)
    for vid in sorted(result.images):
        if vid not in by_id:
            raise ValueError(f"job {result.job_id}: edited unknown view {vid!r}")
        new_entries.append(DatasetEntry(
            view=by_id[vid],
            image=read_image(result.images[vid]),
            origin="edited",
            photometric_weight=edited_weight,
            generation=generation,
        ))
    return TrainingDataset(new_entries)


def _training_schedule(dataset: TrainingDataset, config: StylizeConfig, seed: int):
    eligible = [i for i, e in enumerate(dataset.entries) if e.photometric_weight > 0]
    if not eligible:
        if config.loss_weights.w_nnfm > 0:
            eligible = list(range(len(dataset.entries)))
        else:
            raise ValueError("no trainable signal: no weighted entries and w_nnfm == 0")
    rng = np.random.default_rng(seed)
    return [eligible[i] for i in rng.permutation(len(eligible))]


def optimize_step(
    scene: GaussianScene,
    dataset: TrainingDataset,
    encoder: Encoder | None,
    style_image: ImageBuffer | None,
    config: StylizeConfig,
    state: OptimizerState,
    schedule: list[int] | None = None,
    style_features: FeatureMap | None = None,
) -> tuple[LossReport, OptimizerState]:
    """One optimization step: render the scheduled entry's view, evaluate the
    combined loss against its image (photometric) and the style (NNFM), push
    the gradient through the rasterizer, apply one bias-corrected Adam update."""
    if schedule is None:
        schedule = _training_schedule(dataset, config, config.selection_seed)
    entry = dataset.entries[schedule[state.step % len(schedule)]]

    weights = config.loss_weights
    if entry.photometric_weight <= 0 and weights.w_nnfm == 0:
        raise ValueError("selected entry carries no trainable signal")
    effective = LossWeights(
        w_l1=weights.w_l1 * entry.photometric_weight,
        w_perceptual=weights.w_perceptual * entry.photometric_weight,
        w_nnfm=weights.w_nnfm,
    )

    channel_weights = config.perceptual_channel_weights or {}
    layer_weights = {n: channel_weights.get(n) for n in config.perceptual_layers}

    out = render(scene, entry.view, config.render_options)
    report = total_loss(
        encoder,
        out.color,
        entry.image,
        style_image,
        effective,
        perceptual_layer_weights=layer_weights or None,
        nnfm_layer=config.nnfm_layer,
        nnfm_style_features=style_features,
    )
    grads = render_backward(scene, entry.view, report.grad_image, config.render_options)
    state.apply(scene, grads.d_sh, grads.d_opacity_logit)
    return report, state


def _dispatch_edits(job_root: Path, job: EditJob, config: StylizeConfig) -> EditResult:
    submit_job(job_root, job)
    if config.editor == "mock":
        process_job(job_root / job.job_id)
        timeout = 5.0
    else:
        timeout = config.editor_timeout_s
    return await_result(job_root, job.job_id, timeout_s=timeout)


def _geometry_fingerprint(scene: GaussianScene) -> bytes:
    return (scene.positions.tobytes() + scene.log_scales.tobytes()
            + scene.rotations.tobytes())


def stylize(
    scene: GaussianScene,
    dataset_dir,
    style_path,
    prompt: str,
    config: StylizeConfig,
    work_dir,
    encoder: Encoder | None = None,
) -> tuple[GaussianScene, RunReport]:
    """Run the full edit-then-optimize pipeline on a copy of the scene.

    work_dir receives staged renders, the job directory (for the mock
    editor), and snapshot PLYs. Raises EditorTimeoutError on a silent editor
    and DivergenceError on a non-finite loss.
    """
    work = Path(work_dir)
    work.mkdir(parents=True, exist_ok=True)
    scene = scene.copy()
    geometry_before = _geometry_fingerprint(scene)

    report = RunReport(
        config=_config_echo(config),
        seeds={"selection": config.selection_seed, "noise": config.noise_seed},
        num_views=0,
        selected_views=[],
    )

    t0 = time.monotonic()
    views = load_dataset(dataset_dir)
    images = [read_image(v.image_path) for v in views]
    dataset = TrainingDataset.from_views(views, images, config.original_weight)
    report.num_views = len(views)
    style_image = read_image(style_path)
    report.phase_seconds["load"] = time.monotonic() - t0

    # Setup shared across edit rounds.
    state = OptimizerState.for_scene(scene, config.learning_rate, config.trainable)
    style_features = None
    if config.loss_weights.w_nnfm > 0 and config.max_iterations > 0:
        if encoder is None or config.nnfm_layer is None:
            raise ValueError("w_nnfm > 0 requires an encoder and nnfm_layer")
        style_features = compute_style_features(encoder, style_image, config.nnfm_layer)

    k = min(config.views_per_round, len(views))
    job_root = work / "jobs" if config.editor == "mock" else Path(config.editor)
    base = config.max_iterations // config.edit_rounds
    budgets = [base] * config.edit_rounds
    budgets[-1] += config.max_iterations - base * config.edit_rounds

    report.phase_seconds["edit"] = 0.0
    report.phase_seconds["optimize"] = 0.0
    totals: list[float] = []
    w = config.convergence_window
    statuses = []
    report.stopped_reason = "max_iterations" if config.max_iterations else "no_optimization"
    converged = False

    for round_idx in range(config.edit_rounds):
        # Edit phase: select, render + edge, dispatch, await, ingest.
        t0 = time.monotonic()
        selected = select_views(dataset, k, config.selection_seed + round_idx)
        report.selected_views.extend(v.id for v in selected)
        job = build_edit_job(
            scene, selected, style_path, prompt, config.noise_seed + round_idx,
            stage_dir=work / "stage",
            render_options=config.render_options,
            editor_params=config.editor_params,
        )
        try:
            result = _dispatch_edits(job_root, job, config)
        except EditorTimeoutError as exc:
            report.edit_status = "timeout"
            report.phase_seconds["edit"] += time.monotonic() - t0
            exc.report = report  # partial report for the caller
            raise
        report.editor_name = result.editor_name
        statuses.append(result.status)
        report.edit_status = ("complete" if all(s == "complete" for s in statuses)
                              else "partial")
        dataset = ingest_edits(dataset, result, config.edited_weight)
        report.phase_seconds["edit"] += time.monotonic() - t0

        # Optimization segment: this round's share of the iteration budget,
        # with a plateau early-stop over the whole loss history.
        t0 = time.monotonic()
        schedule = _training_schedule(dataset, config, config.selection_seed)
        for _ in range(budgets[round_idx]):
            loss_report, state = optimize_step(
                scene, dataset, encoder, style_image, config, state,
                schedule=schedule, style_features=style_features,
            )
            if not np.isfinite(loss_report.total):
                report.stopped_reason = f"diverged at step {state.step}"
                report.phase_seconds["optimize"] += time.monotonic() - t0
                exc = DivergenceError(state.step, loss_report.total)
                exc.report = report
                raise exc
            totals.append(loss_report.total)
            report.steps.append({
                "step": state.step,
                "total": loss_report.total,
                "l1": loss_report.l1,
                "perceptual": loss_report.perceptual,
                "nnfm": loss_report.nnfm,
            })
            if config.snapshot_every and state.step % config.snapshot_every == 0:
                save_ply(scene, work / f"snapshot_{state.step:06d}.ply")
            if len(totals) >= 2 * w:
                recent = float(np.mean(totals[-w:]))
                previous = float(np.mean(totals[-2 * w:-w]))
                if abs(recent - previous) / max(previous, 1e-12) < config.convergence_tolerance:
                    report.stopped_reason = "converged"
                    converged = True
                    break
        report.phase_seconds["optimize"] += time.monotonic() - t0
        if converged:
            break
    report.iterations_run = state.step

    if _geometry_fingerprint(scene) != geometry_before:
        raise AssertionError("geometry changed during appearance-only optimization")
    return scene, report


def _config_echo(config: StylizeConfig) -> dict:
    return asdict(config)


def build_training_dataset(dataset_dir, original_weight: float = 0.0) -> TrainingDataset:
    views = load_dataset(dataset_dir)
    images = [read_image(v.image_path) for v in views]
    return TrainingDataset.from_views(views, images, original_weight)
