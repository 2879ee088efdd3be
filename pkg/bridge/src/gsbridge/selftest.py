"""Built-in conformance self-test (identity stub, no model assets).

Fabricates a two-view job in a temporary root, serves it, and checks the
protocol contract: complete response, byte-identical outputs for the
identity backend, request side untouched, nothing written outside
response/, done marker present, and byte-stable reruns.
"""

from __future__ import annotations

import json
import tempfile
from pathlib import Path

from PIL import Image

from .backends import BridgeConfig, IdentityBackend
from .protocol import SCHEMA_VERSION
from .watcher import process_pending


def _checker_png(path: Path, size: int, phase: int) -> None:
    img = Image.new("RGB", (size, size))
    px = img.load()
    for y in range(size):
        for x in range(size):
            on = (x // 4 + y // 4 + phase) % 2
            px[x, y] = (220 * on, 40 + 60 * phase, 255 - 200 * on)
    img.save(path)


def fabricate_job(root: Path, job_id: str = "selftest", size: int = 16) -> Path:
    request = root / job_id / "request"
    request.mkdir(parents=True)
    views = []
    for i in range(2):
        _checker_png(request / f"view_v{i}.png", size, phase=i)
        _checker_png(request / f"edge_v{i}.png", size, phase=i)
        views.append({
            "view_id": f"v{i}", "width": size, "height": size,
            "render_file": f"view_v{i}.png", "edge_file": f"edge_v{i}.png",
        })
    _checker_png(request / "style.png", size, phase=1)
    (request / "prompt.txt").write_text("self test", encoding="utf-8")
    (request / "meta.json").write_text(json.dumps({
        "schema_version": SCHEMA_VERSION,
        "job_id": job_id,
        "noise_seed": 1,
        "views": views,
        "style_file": "style.png",
        "prompt_file": "prompt.txt",
        "editor_params": {},
    }, indent=1, sort_keys=True))
    return root / job_id


def _tree(root: Path) -> dict:
    return {p.relative_to(root).as_posix(): p.read_bytes()
            for p in sorted(root.rglob("*")) if p.is_file()}


def run_self_test(verbose: bool = True) -> bool:
    failures = []

    def check(name, ok):
        if verbose:
            print(f"  [{'ok' if ok else 'FAIL'}] {name}")
        if not ok:
            failures.append(name)

    with tempfile.TemporaryDirectory(prefix="gsbridge-selftest-") as tmp:
        root_a = Path(tmp) / "a"
        root_b = Path(tmp) / "b"
        job_a = fabricate_job(root_a)
        fabricate_job(root_b)
        request_before = _tree(job_a / "request")
        outside_before = set(_tree(root_a))

        backend = IdentityBackend(BridgeConfig(backend="identity"))
        statuses = process_pending(root_a, backend)
        check("job served", statuses == ["complete"])

        resp = job_a / "response"
        check("done marker written", (resp / "done").exists())
        check("no error file", not (resp / "error.txt").exists())
        for i in range(2):
            out = resp / f"view_v{i}.png"
            src = job_a / "request" / f"view_v{i}.png"
            check(f"view v{i} byte-equal to request",
                  out.exists() and out.read_bytes() == src.read_bytes())
            if out.exists():
                with Image.open(out) as img:
                    check(f"view v{i} dimensions preserved", img.size == (16, 16))

        meta = json.loads((resp / "meta.json").read_text())
        check("response meta names the editor", meta.get("editor_name") == "identity-stub")
        check("request untouched", _tree(job_a / "request") == request_before)
        new_files = set(_tree(root_a)) - outside_before
        check("writes confined to response/",
              bool(new_files) and all(f.startswith("selftest/response/") for f in new_files))

        check("rerun is idempotent", process_pending(root_a, backend) == [])

        process_pending(root_b, backend)
        check("responses byte-stable across roots",
              _tree(job_a / "response") == _tree(root_b / "selftest" / "response"))

    if verbose:
        print("self-test:", "PASS" if not failures else f"FAIL ({len(failures)})")
    return not failures
