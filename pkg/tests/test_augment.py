import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mitokit.augment import (
    AnnotatedPatch,
    AugmentConfig,
    AugmentError,
    TransformRecord,
    apply_pipeline,
    augment_patch_set,
    crop,
    execute,
    flip,
    random_size_crop,
    resize,
    sample_transform,
)
from mitokit.patchset import INDEX_NAME, make_spec, write_patch_set

from conftest import ann, slide


def _patch(size=380, points=((100.0, 50.0),), seed=0):
    rng = np.random.default_rng(seed)
    img = rng.integers(0, 256, size=(size, size, 3), dtype=np.uint8)
    return AnnotatedPatch(img, np.array(points, dtype=np.float64))


def test_hflip_maps_x_to_width_minus_x():
    p = flip(_patch(380, [(100.0, 50.0)]), "horizontal")
    assert p.points.tolist() == [[280.0, 50.0]]


def test_vflip_maps_y():
    p = flip(_patch(380, [(100.0, 50.0)]), "vertical")
    assert p.points.tolist() == [[100.0, 330.0]]


def test_flip_center_is_fixed():
    p = flip(flip(_patch(380, [(190.0, 190.0)]), "horizontal"), "vertical")
    assert p.points.tolist() == [[190.0, 190.0]]


def test_flip_moves_pixels_with_points():
    img = np.zeros((10, 10), dtype=np.uint8)
    img[2, 3] = 255
    # the marked pixel covers [3, 4) x [2, 3); its center is (3.5, 2.5)
    p = flip(AnnotatedPatch(img, [(3.5, 2.5)]), "horizontal")
    x, y = p.points[0]
    assert p.image[int(y), int(x)] == 255


@given(st.sampled_from(["horizontal", "vertical"]), st.lists(st.tuples(st.floats(0, 63.99), st.floats(0, 63.99)), max_size=6))
@settings(max_examples=50, deadline=None)
def test_flip_is_an_involution(axis, pts):
    p = _patch(64, pts or [(1.0, 1.0)])
    q = flip(flip(p, axis), axis)
    assert np.array_equal(q.image, p.image)
    assert np.allclose(q.points, p.points, atol=1e-12)


def test_flip_rejects_unknown_axis():
    with pytest.raises(AugmentError):
        flip(_patch(), "diagonal")


def test_resize_scales_coordinates_exactly():
    p = resize(_patch(380, [(190.0, 190.0)]), 400)
    assert p.points.tolist() == [[200.0, 200.0]]
    assert p.image.shape == (400, 400, 3)
    assert p.image.dtype == np.uint8


def test_resize_same_size_is_identity():
    p = _patch(380, [(12.5, 300.25)])
    q = resize(p, 380)
    assert np.array_equal(q.image, p.image)
    assert np.array_equal(q.points, p.points)


def test_resize_round_trip_points():
    p = _patch(500, [(0.0, 0.0), (123.4, 456.7), (499.9, 250.0)])
    q = resize(resize(p, 380), 500)
    assert np.max(np.abs(q.points - p.points)) <= 1e-6


def test_resize_rejects_non_square():
    img = np.zeros((380, 400, 3), dtype=np.uint8)
    with pytest.raises(AugmentError):
        resize(AnnotatedPatch(img, np.zeros((0, 2))), 500)


def test_resize_constant_image_stays_constant():
    img = np.full((50, 50), 77, dtype=np.uint8)
    out = resize(AnnotatedPatch(img, np.zeros((0, 2))), 73)
    assert out.image.shape == (73, 73)
    assert (out.image == 77).all()


def test_crop_keeps_and_drops():
    p = _patch(400, [(10.0, 10.0), (390.0, 390.0)])
    c = crop(p, 0, 0, 384)
    assert c.points.tolist() == [[10.0, 10.0]]
    assert c.ids.tolist() == [0]
    assert c.image.shape[:2] == (384, 384)


def test_crop_boundary_is_half_open():
    p = _patch(400, [(384.0, 5.0), (383.999, 5.0)])
    c = crop(p, 0, 0, 384)
    assert c.ids.tolist() == [1]


def test_crop_outside_rejected():
    with pytest.raises(AugmentError):
        crop(_patch(400), 20, 0, 384)


def test_random_size_crop_deterministic():
    p = _patch(600, [(300.0, 300.0)])
    a, oa = random_size_crop(p, 384, seed=3)
    b, ob = random_size_crop(p, 384, seed=3)
    assert oa == ob
    assert np.array_equal(a.image, b.image)
    assert 0 <= oa[0] <= 216 and 0 <= oa[1] <= 216


def test_random_size_crop_too_small():
    with pytest.raises(AugmentError):
        random_size_crop(_patch(300), 384)


def test_pipeline_identity_config():
    cfg = AugmentConfig(hflip_prob=0.0, vflip_prob=0.0, resize_choices=(380,), crop_size=380)
    p = _patch(380, [(10.0, 20.0), (300.0, 100.0)])
    s = apply_pipeline(p, cfg, 17)
    assert np.array_equal(s.patch.image, p.image)
    assert np.array_equal(s.patch.points, p.points)


def test_pipeline_is_deterministic():
    cfg = AugmentConfig(seed=5)
    p = _patch(380, [(10.0, 20.0), (300.0, 100.0)])
    a = apply_pipeline(p, cfg, 3)
    b = apply_pipeline(p, cfg, 3)
    assert a.record == b.record
    assert a.patch.image.tobytes() == b.patch.image.tobytes()
    assert a.patch.points.tobytes() == b.patch.points.tobytes()


def test_flip_frequency_over_many_samples():
    cfg = AugmentConfig(seed=0)
    records = [sample_transform(cfg, 380, i) for i in range(10_000)]
    h = np.mean([r.hflip for r in records])
    v = np.mean([r.vflip for r in records])
    assert abs(h - 0.5) <= 0.02
    assert abs(v - 0.5) <= 0.02
    counts = {t: sum(r.resize_to == t for r in records) for t in cfg.resize_choices}
    assert all(abs(c / 10_000 - 1 / 3) < 0.02 for c in counts.values())


def test_pipeline_executes_the_sampled_record():
    cfg = AugmentConfig(seed=9)
    p = _patch(380, [(50.0, 60.0), (200.0, 210.0), (370.0, 10.0)])
    for i in range(20):
        s = apply_pipeline(p, cfg, i)
        assert s.record == sample_transform(cfg, 380, i)
        expected = execute(p, s.record)
        assert np.array_equal(s.patch.image, expected.image)


@given(
    st.integers(0, 2**31 - 1),
    st.integers(0, 10_000),
    st.lists(st.tuples(st.floats(0, 379.999), st.floats(0, 379.999)), min_size=1, max_size=8),
)
@settings(max_examples=40, deadline=None)
def test_pipeline_inverse_recovers_annotations(seed, idx, pts):
    cfg = AugmentConfig(seed=seed)
    img = np.zeros((380, 380), dtype=np.uint8)
    p = AnnotatedPatch(img, np.array(pts))
    s = apply_pipeline(p, cfg, idx)
    assert s.patch.image.shape == (384, 384)
    back = s.record.inverse(s.patch.points)
    assert np.max(np.abs(back - p.points[s.patch.ids]), initial=0.0) <= 1e-6
    fwd = s.record.forward(p.points)
    inside = ((fwd >= 0) & (fwd < 384)).all(axis=1)
    assert sorted(s.patch.ids.tolist()) == np.flatnonzero(inside).tolist()


def test_transform_record_forward_inverse():
    r = TransformRecord(380, True, False, 400, (8, 4), 384)
    f = r.forward(np.array([[100.0, 50.0]]))
    assert f.tolist() == [[280 * 400 / 380 - 8, 50 * 400 / 380 - 4]]
    assert np.allclose(r.inverse(f), [[100.0, 50.0]], atol=1e-9)


def test_config_validation():
    with pytest.raises(AugmentError):
        AugmentConfig(hflip_prob=1.5)
    with pytest.raises(AugmentError):
        AugmentConfig(resize_choices=(300,), crop_size=384)
    with pytest.raises(AugmentError):
        AugmentConfig(resize_choices=())


def test_augment_patch_set(tmp_path):
    s = slide("s1", width=800, height=800)
    img = np.random.default_rng(0).integers(0, 256, size=(800, 800, 3), dtype=np.uint8)
    anns = [ann("a1", "s1", 190.0, 190.0), ann("a2", "s1", 410.0, 770.0)]
    specs = [make_spec("s1", 0, 0, 380, 380, "positive", anns), make_spec("s1", 400, 400, 380, 380, "positive", anns)]
    assert [len(sp.local_annotations) for sp in specs] == [1, 1]
    src = tmp_path / "src"
    write_patch_set(src, specs, {"s1": s}, loader=lambda _: img)
    cfg = AugmentConfig(seed=1)
    out1 = augment_patch_set(src, tmp_path / "a", cfg, copies=2)
    out2 = augment_patch_set(src, tmp_path / "b", cfg, copies=2)
    assert [o.patch_id for o in out1] == [o.patch_id for o in out2]
    assert len(out1) == 4
    assert all(o.width == o.height == 384 for o in out1)
    assert (tmp_path / "a" / INDEX_NAME).read_bytes() == (tmp_path / "b" / INDEX_NAME).read_bytes()
    for o in out1:
        assert (tmp_path / "a" / f"{o.patch_id}.png").read_bytes() == (tmp_path / "b" / f"{o.patch_id}.png").read_bytes()
    lines = [json.loads(line) for line in (tmp_path / "a" / INDEX_NAME).read_text().splitlines()]
    assert [d["sample_index"] for d in lines] == [0, 1, 2, 3]
    for d in lines:
        assert set(d["transform"]) == {"source_size", "hflip", "vflip", "resize_to", "crop_origin", "crop_size"}
