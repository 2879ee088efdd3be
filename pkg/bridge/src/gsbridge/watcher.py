"""Job loop: discover pending jobs, edit every view, mark done.

Failure handling mirrors what awaiting engines expect: a backend that cannot
even start a job produces response/error.txt (whole job failed); a per-view
failure leaves that view's file missing (partial), while the rest complete.
The done marker is always written last.
"""

from __future__ import annotations

import time
import traceback
from pathlib import Path
from typing import Callable

from .backends import BridgeConfig, make_backend
from .protocol import JobRequest, discover_jobs, read_request, finish


def process_job(job_dir, backend) -> str:
    """Serve one job directory; returns complete | partial | failed."""
    job_dir = Path(job_dir)
    try:
        request = read_request(job_dir)
    except Exception as exc:
        # can't even parse: report under response/ so the requester unblocks
        broken = JobRequest(job_id=job_dir.name, job_dir=job_dir, noise_seed=0,
                            prompt="", style_path=job_dir, views=[])
        finish(broken, "unreadable-job", {},
               error=f"{type(exc).__name__}: {exc}")
        return "failed"

    request.response_dir.mkdir(exist_ok=True)
    try:
        effective = backend.prepare(request)
    except Exception as exc:
        finish(request, getattr(backend, "name", "unknown"), {},
               error=f"backend failed to start: {type(exc).__name__}: {exc}")
        return "failed"

    failures = 0
    for view in request.views:
        try:
            backend.edit_view(request, view)
        except Exception:
            failures += 1
            traceback.print_exc()
    finish(request, backend.name, effective)
    if failures == len(request.views):
        return "failed"
    return "partial" if failures else "complete"


def process_pending(root, backend) -> list[str]:
    return [process_job(job_dir, backend) for job_dir in discover_jobs(root)]


def watch_and_edit(config: BridgeConfig,
                   stop_condition: Callable[[], bool] | None = None) -> int:
    """Serve jobs under config.job_root until stop_condition() is true; a
    missing stop condition means a single scan. Returns jobs served."""
    backend = make_backend(config)
    served = 0
    while True:
        served += len(process_pending(config.job_root, backend))
        if stop_condition is None or stop_condition():
            return served
        time.sleep(config.poll_interval_s)
