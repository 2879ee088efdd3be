"""Built-in deterministic editor: statistical color transfer from the style.

Serves the job protocol without any learned model, so end-to-end runs and
protocol tests are hermetic. Each request view is remapped per channel to
the style image's mean/std; edge maps are read but unused (this is a
pipeline test double, not a structure-aware editor). Same request bytes in,
same response bytes out.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from .editor import read_job_meta
from .images import read_image, write_image
from .scene import ImageBuffer

EDITOR_NAME = "mock-color-transfer"

_STD_EPS = 1e-6


@dataclass
class ColorStats:
    mean: np.ndarray  # (3,)
    std: np.ndarray   # (3,) population std

    @classmethod
    def of(cls, image: ImageBuffer) -> "ColorStats":
        if image.channels != 3:
            raise ValueError("color stats need a 3-channel image")
        flat = image.data.reshape(-1, 3)
        return cls(mean=flat.mean(axis=0), std=flat.std(axis=0))


def color_transfer(image: ImageBuffer, style_stats: ColorStats) -> ImageBuffer:
    """Match per-channel first and second moments to the style, then clamp."""
    if image.channels != 3:
        raise ValueError("color transfer needs a 3-channel image")
    stats = ColorStats.of(image)
    out = (image.data - stats.mean) / (stats.std + _STD_EPS)
    out = out * style_stats.std + style_stats.mean
    return ImageBuffer(np.clip(out, 0.0, 1.0))


def process_job(jdir) -> str:
    """Serve one job directory; returns the resulting status."""
    jdir = Path(jdir)
    resp = jdir / "response"
    if (resp / "done").exists():
        return "already-done"
    resp.mkdir(exist_ok=True)
    try:
        meta = read_job_meta(jdir)
        style = read_image(jdir / "request" / meta["style_file"])
        stats = ColorStats.of(style)
        for vm in meta["views"]:
            view = read_image(jdir / "request" / vm["render_file"])
            write_image(color_transfer(view, stats), resp / f"view_{vm['view_id']}.png")
        (resp / "meta.json").write_text(json.dumps(
            {"editor_name": EDITOR_NAME, "editor_params": meta.get("editor_params", {})},
            indent=1, sort_keys=True))
        status = "complete"
    except Exception as exc:  # malformed job: report, never crash the server
        (resp / "error.txt").write_text(f"{type(exc).__name__}: {exc}")
        status = "failed"
    (resp / "done").write_text("")
    return status


def discover_jobs(root_dir) -> list[Path]:
    root = Path(root_dir)
    found = []
    for meta in sorted(root.glob("*/request/meta.json")):
        jdir = meta.parent.parent
        if not (jdir / "response" / "done").exists():
            found.append(jdir)
    return found


def process_pending(root_dir) -> int:
    """One scan: serve every job without a done marker. Idempotent."""
    count = 0
    for jdir in discover_jobs(root_dir):
        process_job(jdir)
        count += 1
    return count


def serve_jobs(root_dir, stop_condition: Callable[[], bool] | None = None,
               poll_interval_s: float = 0.25) -> int:
    """Serve jobs until stop_condition() is true (checked after each scan).

    With no stop condition this handles a single scan and returns, which is
    the one-shot mode the CLI and tests use. Returns jobs processed.
    """
    total = 0
    while True:
        total += process_pending(root_dir)
        if stop_condition is None or stop_condition():
            return total
        time.sleep(poll_interval_s)
