from pathlib import Path

import pytest
import torch

from stylecond.dataset import build_multiresolution, clear_cache, ingest_images
from stylecond.labels import external_conditions
from stylecond.shapes import red_circles_blue_squares

torch.set_num_threads(1)

FIXTURES = Path(__file__).parent / "fixtures"

# lines printed by test_acceptance, echoed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(autouse=True)
def _fresh_cache():
    clear_cache()
    yield


@pytest.fixture
def shapes_dir(tmp_path):
    entries = red_circles_blue_squares(tmp_path / "raw", per_class=5, resolution=16, seed=3)
    return tmp_path / "raw", entries


@pytest.fixture
def shapes_store(tmp_path, shapes_dir):
    raw, entries = shapes_dir
    manifest = build_multiresolution(ingest_images(raw, tmp_path / "store", 16, seed=0))
    labels = external_conditions(manifest, {e.id: e.label for e in entries}, 2)
    return manifest, labels, entries
