"""Filesystem job protocol between the engine and any image editor.

A job is one directory:

    <root>/<job_id>/request/
        view_<id>.png   rendered view to edit
        edge_<id>.png   edge-detection map of that render
        style.png       style reference
        prompt.txt      UTF-8 text prompt
        meta.json       schema_version, job_id, noise_seed, per-view
                        dimensions, editor_params passthrough
    <root>/<job_id>/response/
        view_<id>.png   edited views
        meta.json       editor_name + effective parameters (optional)
        error.txt       present only on failure
        done            completion marker, written last

Editors detect jobs by the presence of request/meta.json and must write the
``done`` marker after everything else; the engine never reads response/
before it exists. Deleting the job directory cancels the job — no state
lives anywhere else. meta.json carries no timestamps so request bytes are
a pure function of the job content.
"""

from __future__ import annotations

import json
import shutil
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .images import read_image
from .scene import ImageBuffer

SCHEMA_VERSION = 1

_SOBEL_NORM = 4.0 * np.sqrt(2.0)


class EditorProtocolError(RuntimeError):
    pass


class EditorTimeoutError(TimeoutError):
    def __init__(self, job_id: str, elapsed_s: float):
        super().__init__(f"job {job_id!r}: no response after {elapsed_s:.1f}s")
        self.job_id = job_id
        self.elapsed_s = elapsed_s


@dataclass
class EditRequestView:
    view_id: str
    render_path: str
    edge_path: str
    width: int
    height: int


@dataclass
class EditJob:
    job_id: str
    requests: list[EditRequestView]
    style_path: str
    prompt: str
    noise_seed: int
    created_at: float = field(default_factory=time.time)
    editor_params: dict = field(default_factory=dict)

    def __post_init__(self):
        ids = [r.view_id for r in self.requests]
        if len(set(ids)) != len(ids):
            raise ValueError("view ids must be unique within a job")


@dataclass
class EditResult:
    job_id: str
    status: str  # complete | partial | failed
    images: dict[str, str]  # view_id -> edited image path
    editor_name: str = "unknown"
    detail: dict[str, str] = field(default_factory=dict)  # view_id -> failure reason


def job_dir(root_dir, job_id: str) -> Path:
    return Path(root_dir) / job_id


def submit_job(root_dir, job: EditJob) -> Path:
    """Materialize the request directory; returns the job directory path."""
    if not job.requests:
        raise ValueError(f"job {job.job_id!r}: empty view list")
    root = Path(root_dir)
    jdir = root / job.job_id
    if jdir.exists():
        raise EditorProtocolError(f"job id collision: {jdir} already exists")
    for req in job.requests:
        for p in (req.render_path, req.edge_path):
            if not Path(p).exists():
                raise FileNotFoundError(f"job {job.job_id!r}: missing input {p}")
    if not Path(job.style_path).exists():
        raise FileNotFoundError(f"job {job.job_id!r}: missing style image {job.style_path}")

    reqdir = jdir / "request"
    reqdir.mkdir(parents=True)
    views_meta = []
    for req in job.requests:
        shutil.copyfile(req.render_path, reqdir / f"view_{req.view_id}.png")
        shutil.copyfile(req.edge_path, reqdir / f"edge_{req.view_id}.png")
        views_meta.append({
            "view_id": req.view_id,
            "width": req.width,
            "height": req.height,
            "render_file": f"view_{req.view_id}.png",
            "edge_file": f"edge_{req.view_id}.png",
        })
    shutil.copyfile(job.style_path, reqdir / "style.png")
    (reqdir / "prompt.txt").write_text(job.prompt, encoding="utf-8")
    meta = {
        "schema_version": SCHEMA_VERSION,
        "job_id": job.job_id,
        "noise_seed": job.noise_seed,
        "views": views_meta,
        "style_file": "style.png",
        "prompt_file": "prompt.txt",
        "editor_params": job.editor_params,
    }
    # written last: editors treat meta.json as the job-ready marker
    (reqdir / "meta.json").write_text(json.dumps(meta, indent=1, sort_keys=True))
    return jdir


def read_job_meta(jdir) -> dict:
    meta_path = Path(jdir) / "request" / "meta.json"
    meta = json.loads(meta_path.read_text())
    if meta.get("schema_version") != SCHEMA_VERSION:
        raise EditorProtocolError(
            f"{meta_path}: unsupported schema version {meta.get('schema_version')!r}"
        )
    return meta


def _collect_result(jdir: Path, meta: dict) -> EditResult:
    resp = jdir / "response"
    editor_name = "unknown"
    resp_meta = resp / "meta.json"
    if resp_meta.exists():
        try:
            editor_name = json.loads(resp_meta.read_text()).get("editor_name", "unknown")
        except (json.JSONDecodeError, OSError):
            pass

    if (resp / "error.txt").exists():
        return EditResult(job_id=meta["job_id"], status="failed", images={},
                          editor_name=editor_name,
                          detail={"*": (resp / "error.txt").read_text()})

    images: dict[str, str] = {}
    detail: dict[str, str] = {}
    for vm in meta["views"]:
        vid = vm["view_id"]
        path = resp / f"view_{vid}.png"
        if not path.exists():
            detail[vid] = "missing response image"
            continue
        try:
            img = read_image(path)
        except Exception as exc:
            detail[vid] = f"unreadable: {exc}"
            continue
        if (img.width, img.height) != (vm["width"], vm["height"]):
            detail[vid] = (
                f"dimension mismatch: got {img.width}x{img.height}, "
                f"expected {vm['width']}x{vm['height']}"
            )
            continue
        images[vid] = str(path)

    if not detail:
        status = "complete"
    elif images:
        status = "partial"
    else:
        status = "failed"
    return EditResult(job_id=meta["job_id"], status=status, images=images,
                      editor_name=editor_name, detail=detail)


def await_result(root_dir, job_id: str, timeout_s: float = 600.0,
                 poll_interval_s: float = 0.25) -> EditResult:
    """Block until response/done appears, then validate the response set."""
    jdir = job_dir(root_dir, job_id)
    meta = read_job_meta(jdir)
    done = jdir / "response" / "done"
    start = time.monotonic()
    while not done.exists():
        elapsed = time.monotonic() - start
        if elapsed >= timeout_s:
            raise EditorTimeoutError(job_id, elapsed)
        time.sleep(min(poll_interval_s, max(timeout_s - elapsed, 0.001)))
    return _collect_result(jdir, meta)


def compute_edges(image: ImageBuffer, low_threshold: float = 0.0) -> ImageBuffer:
    """Sobel gradient magnitude of luminance, normalized so a unit step
    responds with at most 1; values below low_threshold are zeroed."""
    if image.channels != 3:
        raise ValueError("edge maps are computed from 3-channel images")
    lum = (0.299 * image.data[:, :, 0]
           + 0.587 * image.data[:, :, 1]
           + 0.114 * image.data[:, :, 2])
    padded = np.pad(lum, 1, mode="edge")
    # Sobel horizontal: [[-1,0,1],[-2,0,2],[-1,0,1]]; vertical is its
    # transpose. Differences first, so constant regions cancel exactly.
    gx = ((padded[:-2, 2:] - padded[:-2, :-2])
          + 2.0 * (padded[1:-1, 2:] - padded[1:-1, :-2])
          + (padded[2:, 2:] - padded[2:, :-2]))
    gy = ((padded[2:, :-2] - padded[:-2, :-2])
          + 2.0 * (padded[2:, 1:-1] - padded[:-2, 1:-1])
          + (padded[2:, 2:] - padded[:-2, 2:]))
    mag = np.sqrt(gx * gx + gy * gy) / _SOBEL_NORM
    mag[mag < low_threshold] = 0.0
    return ImageBuffer(mag[:, :, None])


__all__ = [
    "SCHEMA_VERSION",
    "EditJob",
    "EditRequestView",
    "EditResult",
    "EditorProtocolError",
    "EditorTimeoutError",
    "await_result",
    "compute_edges",
    "job_dir",
    "read_job_meta",
    "submit_job",
]
