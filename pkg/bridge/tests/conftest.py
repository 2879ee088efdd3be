import shutil
from pathlib import Path

import pytest

# The committed golden job lives with the engine's fixtures; the bridge reads
# it as data only (the protocol directory layout IS the interface).
GOLDEN_JOB = Path(__file__).resolve().parents[2] / "tests" / "data" / "golden_job"


@pytest.fixture()
def golden_root(tmp_path):
    if not GOLDEN_JOB.exists():
        pytest.skip("golden job fixture not generated (scripts/make_fixtures.py)")
    root = tmp_path / "root"
    shutil.copytree(GOLDEN_JOB, root)
    return root


def tree_bytes(root: Path) -> dict:
    return {p.relative_to(root).as_posix(): p.read_bytes()
            for p in sorted(root.rglob("*")) if p.is_file()}
