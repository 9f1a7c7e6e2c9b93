import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

ROOT = Path(__file__).resolve().parent.parent
CRITERIA = {}
ACCEPTANCE_COUNT = 10


@pytest.fixture
def criterion():
    """Record an acceptance criterion outcome for the end-of-run summary."""
    def record(number, ok, detail):
        CRITERIA[number] = (bool(ok), detail)
        return ok
    return record


@pytest.fixture
def demo_dir():
    return ROOT / "demo"


def pytest_terminal_summary(terminalreporter):
    ran = any("test_acceptance" in r.nodeid
              for reps in terminalreporter.stats.values() for r in reps if hasattr(r, "nodeid"))
    if not ran:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for n in range(1, ACCEPTANCE_COUNT + 1):
        ok, detail = CRITERIA.get(n, (False, "no result recorded"))
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")


def copy_project(src_dir, dest, config):
    """Copy a demo config (and its data directory, if any) to ``dest``."""
    import shutil
    shutil.copy(src_dir / config, dest / config)
    if (src_dir / "data").exists():
        shutil.copytree(src_dir / "data", dest / "data")
    return dest / config


@pytest.fixture
def demo_project(tmp_path, demo_dir):
    return copy_project(demo_dir, tmp_path, "project.yaml")


@pytest.fixture
def synth_project(tmp_path, demo_dir):
    import shutil
    shutil.copy(demo_dir / "synth.yaml", tmp_path / "synth.yaml")
    return tmp_path / "synth.yaml"
