import json
import os
from pathlib import Path

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mitokit.core import MppScale, Point2D, Rect
from mitokit.manifest import (
    AnnotationRecord,
    DatasetManifest,
    ManifestError,
    RegionRecord,
    SlideRecord,
    dataset_stats,
    dumps_manifest,
    import_point_annotations,
    load_manifest,
    save_manifest,
)

from conftest import ann, slide


@st.composite
def manifests(draw):
    n = draw(st.integers(0, 4))
    slides = []
    for i in range(n):
        w = draw(st.integers(1, 5000))
        h = draw(st.integers(1, 5000))
        mpp = draw(st.one_of(st.none(), st.floats(0.05, 2.0)))
        slides.append(
            SlideRecord(
                f"s{i}",
                draw(st.sampled_from(["a", "b"])),
                f"img/{i}.png",
                w,
                h,
                None if mpp is None else MppScale(mpp),
                draw(st.text(min_size=1, max_size=8)),
                draw(st.sampled_from(["c0", "c1", f"s{i}"])),
            )
        )
    anns, regions = [], []
    for s in slides:
        for j in range(draw(st.integers(0, 3))):
            x = draw(st.floats(0, s.width))
            y = draw(st.floats(0, s.height))
            anns.append(AnnotationRecord(f"{s.slide_id}-{j}", s.slide_id, Point2D(x, y), draw(st.sampled_from(["mitotic_figure", "imposter"])), "gen"))
        if s.width > 2 and s.height > 2 and draw(st.booleans()):
            regions.append(RegionRecord(f"{s.slide_id}-r", s.slide_id, Rect(1, 1, s.width - 2, s.height - 2), "necrosis"))
    return DatasetManifest(tuple(slides), tuple(anns), tuple(regions))


@settings(max_examples=60, deadline=None)
@given(manifests())
def test_save_load_round_trip(tmp_path_factory, m):
    path = tmp_path_factory.mktemp("m") / "manifest.json"
    save_manifest(m, path)
    assert load_manifest(path) == m


@settings(max_examples=60, deadline=None)
@given(manifests())
def test_stats_groups_sum_to_totals(m):
    st_ = dataset_stats(m)
    assert sum(st_.per_label.values()) == st_.n_annotations == len(m.annotations)
    for table in (st_.per_domain, st_.per_dataset):
        assert sum(c["slides"] for c in table.values()) == st_.n_slides
        assert sum(c["mitotic_figure"] + c["imposter"] for c in table.values()) == st_.n_annotations


def test_unknown_slide_is_integrity_error(tmp_path):
    doc = {"format_version": 1, "slides": [], "annotations": [{"ann_id": "a", "slide_id": "nope", "x": 1, "y": 1, "label": "mitotic_figure"}]}
    (tmp_path / "m.json").write_text(json.dumps(doc))
    with pytest.raises(ManifestError, match="unknown slide_id 'nope'"):
        load_manifest(tmp_path / "m.json")


def test_header_only_manifest_is_empty(tmp_path):
    (tmp_path / "m.json").write_text('{"format_version": 1}')
    m = load_manifest(tmp_path / "m.json")
    assert m == DatasetManifest()


def test_parse_errors(tmp_path):
    (tmp_path / "bad.json").write_text("{not json")
    with pytest.raises(ManifestError, match="not valid JSON"):
        load_manifest(tmp_path / "bad.json")
    (tmp_path / "v.json").write_text('{"format_version": 99}')
    with pytest.raises(ManifestError, match="format_version"):
        load_manifest(tmp_path / "v.json")


def test_integrity_violations():
    with pytest.raises(ManifestError, match="duplicate slide_id"):
        DatasetManifest((slide("s"), slide("s")))
    with pytest.raises(ManifestError, match="outside slide"):
        DatasetManifest((slide("s", 100, 100),), (ann("a", "s", 101, 5),))
    with pytest.raises(ManifestError, match="duplicate ann_id"):
        DatasetManifest((slide("s"),), (ann("a", "s", 1, 1), ann("a", "s", 2, 2)))
    with pytest.raises(ManifestError):
        slide("s", 0, 10)


def test_stats_empty():
    s = dataset_stats(DatasetManifest())
    assert (s.n_slides, s.n_cases, s.n_annotations, s.n_regions) == (0, 0, 0, 0)
    assert s.per_label == {"mitotic_figure": 0, "imposter": 0}
    assert s.per_domain == {} and s.per_dataset == {}


def test_stats_hand_counted(small_manifest):
    # enumerated from the fixture: s1,s2 breast/ds; s3 lung/other; a3 is the imposter
    s = dataset_stats(small_manifest)
    assert (s.n_slides, s.n_cases, s.n_annotations, s.n_regions) == (3, 3, 5, 1)
    assert s.per_label == {"mitotic_figure": 4, "imposter": 1}
    assert s.per_domain == {
        "breast": {"slides": 2, "cases": 2, "mitotic_figure": 2, "imposter": 1},
        "lung": {"slides": 1, "cases": 1, "mitotic_figure": 2, "imposter": 0},
    }
    assert s.per_dataset == {
        "ds": {"slides": 2, "cases": 2, "mitotic_figure": 2, "imposter": 1},
        "other": {"slides": 1, "cases": 1, "mitotic_figure": 2, "imposter": 0},
    }
    assert "breast" in s.format_table()


def _coco(tmp_path, annotations, images=None, name="coco.json"):
    doc = {
        "images": images or [{"id": 1, "file_name": "001.tiff", "width": 100, "height": 80, "tumor_type": "human breast cancer"}],
        "annotations": annotations,
        "categories": [{"id": 1, "name": "mitotic figure"}, {"id": 2, "name": "hard negative"}],
    }
    path = tmp_path / name
    path.write_text(json.dumps(doc))
    return path


def test_import_box_center(tmp_path):
    path = _coco(tmp_path, [{"id": 7, "image_id": 1, "category_id": 1, "bbox": [10, 10, 30, 30]}])
    slides, anns = import_point_annotations(path, "midog", {1: "mitotic_figure", 2: "imposter"})
    assert len(slides) == 1 and len(anns) == 1
    assert anns[0].center == Point2D(20, 20)
    assert anns[0].label == "mitotic_figure"
    assert slides[0].domain_tag == "human breast cancer"
    assert slides[0].case_id == slides[0].slide_id
    assert (slides[0].width, slides[0].height) == (100, 80)


def test_import_xywh_and_points(tmp_path):
    path = _coco(
        tmp_path,
        [
            {"id": 1, "image_id": 1, "category_id": 1, "bbox": [10, 10, 30, 30]},
            {"id": 2, "image_id": 1, "category_id": 2, "point": [5, 6]},
        ],
    )
    res = import_point_annotations(path, "x", {1: "mitotic_figure", 2: "imposter"}, box_format="xywh")
    assert [a.center for a in res.annotations] == [Point2D(25, 25), Point2D(5, 6)]
    assert [a.label for a in res.annotations] == ["mitotic_figure", "imposter"]


def test_import_ignore_and_out_of_bounds(tmp_path):
    path = _coco(
        tmp_path,
        [
            {"id": 1, "image_id": 1, "category_id": 2, "bbox": [10, 10, 30, 30]},
            {"id": 2, "image_id": 1, "category_id": 1, "bbox": [190, 10, 210, 30]},
        ],
    )
    res = import_point_annotations(path, "x", {1: "mitotic_figure", 2: "ignore"})
    assert res.annotations == []
    assert res.skipped["ignored"] == 1
    assert res.skipped["out_of_bounds"] == 1


def test_import_unmapped_category(tmp_path):
    path = _coco(tmp_path, [{"id": 1, "image_id": 1, "category_id": 2, "bbox": [1, 1, 2, 2]}])
    with pytest.raises(ManifestError, match="unmapped category 2"):
        import_point_annotations(path, "x", {1: "mitotic_figure"})


def test_import_deterministic(tmp_path):
    anns = [{"id": i, "image_id": 1 + i % 2, "category_id": 1 + i % 2, "bbox": [i, i, i + 10, i + 10]} for i in range(20)]
    images = [{"id": 1, "file_name": "a.tiff", "width": 100, "height": 100}, {"id": 2, "file_name": "b.tiff", "width": 100, "height": 100, "case_id": "k"}]
    p1 = _coco(tmp_path, anns, images, "one.json")
    p2 = _coco(tmp_path, list(reversed(anns)), list(reversed(images)), "two.json")
    lm = {1: "mitotic_figure", 2: "imposter"}
    a = dumps_manifest(import_point_annotations(p1, "d", lm, default_mpp=0.25).to_manifest())
    b = dumps_manifest(import_point_annotations(p1, "d", lm, default_mpp=0.25).to_manifest())
    c = dumps_manifest(import_point_annotations(p2, "d", lm, default_mpp=0.25).to_manifest())
    assert a == b == c


def _real(env):
    path = os.environ.get(env)
    if not path or not Path(path).exists():
        pytest.skip(f"set {env} to the real annotation file to run this check")
    return path


def test_real_midogpp_counts():
    res = import_point_annotations(_real("MIDOGPP_JSON"), "midogpp", {1: "mitotic_figure", 2: "imposter"})
    st_ = dataset_stats(res.to_manifest())
    assert st_.per_label["mitotic_figure"] == 11937
    assert st_.n_cases == 503


def test_real_ccmct_counts():
    res = import_point_annotations(_real("CCMCT_JSON"), "ccmct", {1: "mitotic_figure", 2: "imposter"})
    assert dataset_stats(res.to_manifest()).per_label["mitotic_figure"] > 40000
