"""Command-line surface: stylize | render | edges | mock-edit | serve-mock | eval.

Options can come from a JSON config file (--config); explicit flags win.
Every command accepts --seed and --config; GSSTYLE_THREADS is the fallback
for --threads. Outputs land under --out and inputs are never mutated.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from pathlib import Path

from . import __version__
from .consistency import EvalConfig, evaluate
from .dataset import load_dataset
from .editor import EditorTimeoutError, compute_edges
from .encoder import load_encoder
from .images import read_image, write_depth_png, write_image
from .losses import LossWeights, load_layer_weights
from .mock_editor import ColorStats, color_transfer, serve_jobs
from .pipeline import DivergenceError, StylizeConfig, stylize
from .ply import load_ply, save_ply
from .rasterizer import RenderOptions, render

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_EDITOR_TIMEOUT = 2
EXIT_DIVERGED = 3


def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _load_config_file(args) -> dict:
    if getattr(args, "config", None):
        return json.loads(Path(args.config).read_text())
    return {}


def _opt(args, config: dict, name: str, default):
    """Flag wins over config file wins over default (flags default to None)."""
    value = getattr(args, name.replace("-", "_"), None)
    if value is not None:
        return value
    if name in config:
        return config[name]
    return default


def _threads(args, config) -> int:
    value = _opt(args, config, "threads", None)
    if value is None:
        value = os.environ.get("GSSTYLE_THREADS", "1")
    threads = int(value)
    if threads < 1:
        raise ValueError("--threads must be >= 1")
    return threads


def _require(path, what: str) -> Path:
    if path is None:
        raise ValueError(f"missing required option: {what}")
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"{what} not found: {p}")
    return p


def cmd_stylize(args) -> int:
    config_file = _load_config_file(args)
    scene_path = _require(_opt(args, config_file, "scene", None), "scene PLY")
    dataset_dir = _require(_opt(args, config_file, "dataset", None), "dataset dir")
    style_path = _require(_opt(args, config_file, "style", None), "style image")
    out_dir = Path(_opt(args, config_file, "out", "stylize-out"))
    encoder_path = _opt(args, config_file, "encoder", None)
    if encoder_path is not None:
        encoder_path = _require(encoder_path, "encoder manifest")

    seed = int(_opt(args, config_file, "seed", 0))
    weights = LossWeights(
        w_l1=float(_opt(args, config_file, "w-l1", 1.0)),
        w_perceptual=float(_opt(args, config_file, "w-perceptual", 0.2)),
        w_nnfm=float(_opt(args, config_file, "w-nnfm", 0.5)),
    )
    perceptual_layers = _opt(args, config_file, "perceptual-layers", None)
    if isinstance(perceptual_layers, str):
        perceptual_layers = [s for s in perceptual_layers.split(",") if s]
    lpips_weights_path = _opt(args, config_file, "lpips-weights", None)
    channel_weights = None
    if lpips_weights_path is not None:
        channel_weights = load_layer_weights(_require(lpips_weights_path, "weight blob"))
        if not perceptual_layers:
            perceptual_layers = sorted(channel_weights)

    encoder = load_encoder(encoder_path) if encoder_path else None
    if encoder is not None:
        default_nnfm = "relu3_2" if "relu3_2" in encoder.layer_names else encoder.layer_names[-1]
    else:
        default_nnfm = None
        if weights.w_perceptual > 0 or weights.w_nnfm > 0:
            raise ValueError("feature losses need --encoder (or set their weights to 0)")

    config = StylizeConfig(
        max_iterations=int(_opt(args, config_file, "max-iterations", 1000)),
        views_per_round=int(_opt(args, config_file, "views-per-round", 30)),
        selection_seed=seed,
        noise_seed=int(_opt(args, config_file, "noise-seed", seed)),
        loss_weights=weights,
        learning_rate=float(_opt(args, config_file, "lr", 0.0025)),
        convergence_window=int(_opt(args, config_file, "convergence-window", 50)),
        convergence_tolerance=float(_opt(args, config_file, "convergence-tolerance", 1e-3)),
        trainable=_opt(args, config_file, "trainable", "sh_only"),
        editor=_opt(args, config_file, "editor", "mock"),
        editor_timeout_s=float(_opt(args, config_file, "editor-timeout", 600.0)),
        prompt=_opt(args, config_file, "prompt", ""),
        edited_weight=float(_opt(args, config_file, "edited-weight", 1.0)),
        original_weight=float(_opt(args, config_file, "original-weight", 0.0)),
        edit_rounds=int(_opt(args, config_file, "edit-rounds", 1)),
        snapshot_every=int(_opt(args, config_file, "snapshot-every", 0)),
        nnfm_layer=_opt(args, config_file, "nnfm-layer", default_nnfm),
        perceptual_layers=perceptual_layers or [],
        perceptual_channel_weights=channel_weights,
    )
    threads = _threads(args, config_file)

    out_dir.mkdir(parents=True, exist_ok=True)
    echo = {
        "command": "stylize",
        "version": __version__,
        "threads": threads,
        "scene": str(scene_path),
        "dataset": str(dataset_dir),
        "style": str(style_path),
        "encoder": str(encoder_path) if encoder_path else None,
        "config": json.loads(json.dumps(vars(args), default=str)),
    }
    (out_dir / "config.json").write_text(json.dumps(echo, indent=1, sort_keys=True))

    scene = load_ply(scene_path)
    checksums = {"scene": _sha256(scene_path), "style": _sha256(style_path)}

    def write_report(report):
        payload = json.loads(report.to_json())
        payload["version"] = __version__
        payload["threads"] = threads
        payload["input_checksums"] = checksums
        (out_dir / "run_report.json").write_text(
            json.dumps(payload, indent=1, sort_keys=True))

    try:
        stylized, report = stylize(
            scene, dataset_dir, style_path, config.prompt, config,
            work_dir=out_dir / "work", encoder=encoder,
        )
    except EditorTimeoutError as exc:
        print(f"error: {exc}", file=sys.stderr)
        if getattr(exc, "report", None) is not None:
            write_report(exc.report)
        return EXIT_EDITOR_TIMEOUT
    except DivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        if getattr(exc, "report", None) is not None:
            write_report(exc.report)
        return EXIT_DIVERGED

    save_ply(stylized, out_dir / "stylized.ply")
    write_report(report)
    print(f"stylized scene written to {out_dir / 'stylized.ply'} "
          f"({report.iterations_run} iterations, {report.stopped_reason})")
    return EXIT_OK


def _pick_view(views, args, config_file):
    view_id = _opt(args, config_file, "view-id", None)
    if view_id is not None:
        for v in views:
            if v.id == view_id:
                return v
        raise ValueError(f"view id {view_id!r} not in dataset")
    index = int(_opt(args, config_file, "view-index", 0))
    return views[index]


def cmd_render(args) -> int:
    config_file = _load_config_file(args)
    scene = load_ply(_require(_opt(args, config_file, "scene", None), "scene PLY"))
    views = load_dataset(_require(_opt(args, config_file, "dataset", None), "dataset dir"))
    view = _pick_view(views, args, config_file)
    out_path = Path(_opt(args, config_file, "out", "render.png"))
    out_path.parent.mkdir(parents=True, exist_ok=True)

    result = render(scene, view, RenderOptions())
    write_image(result.color, out_path)
    depth_path = _opt(args, config_file, "depth", None)
    if depth_path:
        scale = write_depth_png(result.depth.data, depth_path)
        Path(depth_path).with_suffix(".json").write_text(
            json.dumps({"scale": scale, "encoding": "uint16 = depth/scale * 65535"}))
    print(f"rendered view {view.id} to {out_path}")
    return EXIT_OK


def cmd_edges(args) -> int:
    config_file = _load_config_file(args)
    image = read_image(_require(_opt(args, config_file, "image", None), "image"))
    threshold = float(_opt(args, config_file, "threshold", 0.0))
    out_path = Path(_opt(args, config_file, "out", "edges.png"))
    out_path.parent.mkdir(parents=True, exist_ok=True)
    write_image(compute_edges(image, threshold), out_path)
    return EXIT_OK


def cmd_mock_edit(args) -> int:
    config_file = _load_config_file(args)
    image = read_image(_require(_opt(args, config_file, "image", None), "image"))
    style = read_image(_require(_opt(args, config_file, "style", None), "style image"))
    out_path = Path(_opt(args, config_file, "out", "edited.png"))
    out_path.parent.mkdir(parents=True, exist_ok=True)
    write_image(color_transfer(image, ColorStats.of(style)), out_path)
    return EXIT_OK


def cmd_serve_mock(args) -> int:
    config_file = _load_config_file(args)
    root = _require(_opt(args, config_file, "root", None), "job root")
    if bool(_opt(args, config_file, "watch", False)):
        poll = float(_opt(args, config_file, "poll", 0.25))
        print(f"watching {root} (Ctrl-C to stop)")
        try:
            serve_jobs(root, stop_condition=lambda: False, poll_interval_s=poll)
        except KeyboardInterrupt:
            pass
        return EXIT_OK
    n = serve_jobs(root)
    print(f"served {n} job(s)")
    return EXIT_OK


def cmd_eval(args) -> int:
    config_file = _load_config_file(args)
    scene = load_ply(_require(_opt(args, config_file, "scene", None), "scene PLY"))
    views = load_dataset(_require(_opt(args, config_file, "dataset", None), "dataset dir"))
    out_dir = Path(_opt(args, config_file, "out", "eval-out"))
    out_dir.mkdir(parents=True, exist_ok=True)

    encoder_path = _opt(args, config_file, "encoder", None)
    encoder = load_encoder(_require(encoder_path, "encoder manifest")) if encoder_path else None
    layers = _opt(args, config_file, "perceptual-layers", None)
    if isinstance(layers, str):
        layers = [s for s in layers.split(",") if s]
    if encoder is not None and not layers:
        layers = ["relu3_2"] if "relu3_2" in encoder.layer_names else [encoder.layer_names[-1]]

    config = EvalConfig(
        short_stride=int(_opt(args, config_file, "short-stride", 1)),
        long_stride=int(_opt(args, config_file, "long-stride", 7)),
        tau_depth=float(_opt(args, config_file, "tau-depth", 0.01)),
        tau_alpha=float(_opt(args, config_file, "tau-alpha", 0.5)),
    )
    report = evaluate(scene, views, config, encoder=encoder, perceptual_layers=layers)
    report.write(out_dir / "report.json", out_dir / "report.csv")
    for name, agg in report.aggregates.items():
        print(f"{name}: rmse={agg['rmse_mean']:.6f} over {agg['pairs']} pairs")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="gsstyle",
        description="Appearance-only style transfer for Gaussian splat scenes",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON config file; flags override it")
        p.add_argument("--seed", type=int, help="random seed")
        p.add_argument("--threads", type=int,
                       help="worker cap (GSSTYLE_THREADS is the fallback)")

    p = sub.add_parser("stylize", help="edit views and re-optimize scene colors")
    common(p)
    p.add_argument("--scene")
    p.add_argument("--dataset")
    p.add_argument("--style")
    p.add_argument("--out")
    p.add_argument("--prompt")
    p.add_argument("--encoder")
    p.add_argument("--editor", help='"mock" or an external job-root path')
    p.add_argument("--editor-timeout", type=float)
    p.add_argument("--max-iterations", type=int)
    p.add_argument("--views-per-round", type=int)
    p.add_argument("--noise-seed", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--w-l1", type=float)
    p.add_argument("--w-perceptual", type=float)
    p.add_argument("--w-nnfm", type=float)
    p.add_argument("--nnfm-layer")
    p.add_argument("--perceptual-layers", help="comma-separated layer names")
    p.add_argument("--lpips-weights", help="per-channel weight blob manifest")
    p.add_argument("--edit-rounds", type=int)
    p.add_argument("--trainable", choices=("sh_only", "sh_and_opacity"))
    p.add_argument("--snapshot-every", type=int)
    p.add_argument("--convergence-window", type=int)
    p.add_argument("--convergence-tolerance", type=float)
    p.add_argument("--edited-weight", type=float)
    p.add_argument("--original-weight", type=float)
    p.set_defaults(func=cmd_stylize)

    p = sub.add_parser("render", help="render one dataset view to PNG")
    common(p)
    p.add_argument("--scene")
    p.add_argument("--dataset")
    p.add_argument("--view-id")
    p.add_argument("--view-index", type=int)
    p.add_argument("--out")
    p.add_argument("--depth", help="also write 16-bit depth PNG here")
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("edges", help="Sobel edge map of an image")
    common(p)
    p.add_argument("--image")
    p.add_argument("--threshold", type=float)
    p.add_argument("--out")
    p.set_defaults(func=cmd_edges)

    p = sub.add_parser("mock-edit", help="one-shot statistical color transfer")
    common(p)
    p.add_argument("--image")
    p.add_argument("--style")
    p.add_argument("--out")
    p.set_defaults(func=cmd_mock_edit)

    p = sub.add_parser("serve-mock", help="serve pending editor jobs with the mock editor")
    common(p)
    p.add_argument("--root")
    p.add_argument("--watch", action="store_const", const=True)
    p.add_argument("--poll", type=float)
    p.set_defaults(func=cmd_serve_mock)

    p = sub.add_parser("eval", help="multi-view consistency report")
    common(p)
    p.add_argument("--scene")
    p.add_argument("--dataset")
    p.add_argument("--out")
    p.add_argument("--encoder")
    p.add_argument("--perceptual-layers")
    p.add_argument("--short-stride", type=int)
    p.add_argument("--long-stride", type=int)
    p.add_argument("--tau-depth", type=float)
    p.add_argument("--tau-alpha", type=float)
    p.set_defaults(func=cmd_eval)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (FileNotFoundError, ValueError, KeyError, IndexError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
