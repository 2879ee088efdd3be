"""Editor bridge for the splat-stylization job protocol.

Watches a job root, edits every requested view with the configured backend
(an image-conditioned diffusion editor, or an identity stub for tests), and
writes protocol-conformant responses. Any process honoring the job layout is
a valid editor; this package is reference glue, not engine logic.
"""

__version__ = "0.1.0"

from .backends import BridgeConfig, DiffusionBackend, IdentityBackend, make_backend
from .protocol import JobRequest, ViewJob, discover_jobs, read_request
from .watcher import process_job, process_pending, watch_and_edit

__all__ = [
    "BridgeConfig",
    "DiffusionBackend",
    "IdentityBackend",
    "JobRequest",
    "ViewJob",
    "discover_jobs",
    "make_backend",
    "process_job",
    "process_pending",
    "read_request",
    "watch_and_edit",
]
