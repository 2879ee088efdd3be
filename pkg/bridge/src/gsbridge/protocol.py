"""Job-directory protocol client (schema version 1).

Layout (producer side documents this; the bridge only consumes/serves it):

    <root>/<job_id>/request/
        meta.json       schema_version, job_id, noise_seed, views[], style
                        and prompt file names, editor_params passthrough
        view_<id>.png   image to edit
        edge_<id>.png   edge conditioning map
        style.png       style reference
        prompt.txt      text prompt
    <root>/<job_id>/response/
        view_<id>.png   edited output per view
        meta.json       editor_name + all effective parameters
        error.txt       only on whole-job failure
        done            completion marker, always written last

Jobs are detected by the presence of request/meta.json and served at most
once (a job with response/done is finished). The bridge never writes outside
response/.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

SCHEMA_VERSION = 1


class ProtocolError(RuntimeError):
    pass


@dataclass
class ViewJob:
    view_id: str
    width: int
    height: int
    render_path: Path
    edge_path: Path


@dataclass
class JobRequest:
    job_id: str
    job_dir: Path
    noise_seed: int
    prompt: str
    style_path: Path
    views: list[ViewJob]
    editor_params: dict = field(default_factory=dict)

    @property
    def response_dir(self) -> Path:
        return self.job_dir / "response"


def read_request(job_dir) -> JobRequest:
    job_dir = Path(job_dir)
    request = job_dir / "request"
    meta = json.loads((request / "meta.json").read_text())
    if meta.get("schema_version") != SCHEMA_VERSION:
        raise ProtocolError(
            f"{job_dir}: unsupported schema version {meta.get('schema_version')!r}"
        )
    views = [
        ViewJob(
            view_id=vm["view_id"],
            width=vm["width"],
            height=vm["height"],
            render_path=request / vm["render_file"],
            edge_path=request / vm["edge_file"],
        )
        for vm in meta["views"]
    ]
    prompt_file = request / meta.get("prompt_file", "prompt.txt")
    return JobRequest(
        job_id=meta["job_id"],
        job_dir=job_dir,
        noise_seed=meta.get("noise_seed", 0),
        prompt=prompt_file.read_text(encoding="utf-8") if prompt_file.exists() else "",
        style_path=request / meta.get("style_file", "style.png"),
        views=views,
        editor_params=meta.get("editor_params", {}),
    )


def discover_jobs(root) -> list[Path]:
    """Pending job directories under root, oldest path first."""
    root = Path(root)
    pending = []
    for meta in sorted(root.glob("*/request/meta.json")):
        job_dir = meta.parent.parent
        if not (job_dir / "response" / "done").exists():
            pending.append(job_dir)
    return pending


def view_output_path(request: JobRequest, view_id: str) -> Path:
    return request.response_dir / f"view_{view_id}.png"


def finish(request: JobRequest, editor_name: str, effective_params: dict,
           error: str | None = None) -> None:
    """Write response metadata (and error, if any), then the done marker."""
    resp = request.response_dir
    resp.mkdir(exist_ok=True)
    if error is not None:
        (resp / "error.txt").write_text(error)
    (resp / "meta.json").write_text(json.dumps(
        {"editor_name": editor_name, "editor_params": effective_params},
        indent=1, sort_keys=True))
    (resp / "done").write_text("")
