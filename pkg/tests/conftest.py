import sys
from pathlib import Path

import pytest

from mitokit.core import MppScale, Point2D, Rect
from mitokit.manifest import AnnotationRecord, DatasetManifest, RegionRecord, SlideRecord

WORKERS = Path(__file__).parent / "workers"


def slide(slide_id, width=2000, height=2000, domain="d0", case=None, mpp=0.25, dataset="ds"):
    return SlideRecord(slide_id, dataset, f"{slide_id}.png", width, height, MppScale(mpp) if mpp else None, domain, case or slide_id)


def ann(ann_id, slide_id, x, y, label="mitotic_figure"):
    return AnnotationRecord(ann_id, slide_id, Point2D(x, y), label, "test")


def region(region_id, slide_id, x, y, w, h, label="necrosis"):
    return RegionRecord(region_id, slide_id, Rect(x, y, w, h), label)


def worker_cmd(name, *args):
    return [sys.executable, str(WORKERS / name), *map(str, args)]


@pytest.fixture
def small_manifest():
    """3 slides over 2 domains, 5 annotations (4 mitotic figures, 1 imposter)."""
    return DatasetManifest(
        slides=(
            slide("s1", domain="breast", case="c1"),
            slide("s2", domain="breast", case="c2"),
            slide("s3", domain="lung", case="c3", dataset="other"),
        ),
        annotations=(
            ann("a1", "s1", 100, 100),
            ann("a2", "s1", 500, 500),
            ann("a3", "s2", 700, 300, "imposter"),
            ann("a4", "s3", 50, 60),
            ann("a5", "s3", 1999, 1999),
        ),
        regions=(region("r1", "s1", 0, 0, 720, 720),),
    )


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
