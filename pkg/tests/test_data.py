import numpy as np
import pytest

from hatfusion.data import (
    DatasetError,
    GlyphTemplate,
    JitterParams,
    Sample,
    by_split,
    digit_templates,
    generate,
    rasterize,
    read_dataset,
    resample_strokes,
    split_counts,
    write_dataset,
)


def test_templates_are_valid_and_distinct():
    tpls = digit_templates()
    assert [t.label for t in tpls] == list(range(10))
    assert any(len(t.polylines) > 1 for t in tpls)
    closed = [t for t in tpls if t.polylines[0][0] == t.polylines[0][-1]]
    assert closed


def test_template_rejects_empty_and_out_of_square():
    with pytest.raises(ValueError):
        GlyphTemplate(0, ())
    with pytest.raises(ValueError):
        GlyphTemplate(0, (((0.5, 0.5), (1.2, 0.5)),))


def test_generate_deterministic():
    a = generate(digit_templates()[:3], 5, seed=11)
    b = generate(digit_templates()[:3], 5, seed=11)
    assert a == b
    c = generate(digit_templates()[:3], 5, seed=12)
    assert a != c


def test_zero_jitter_reproduces_resampled_template():
    tpl = digit_templates()[4]
    samples = generate([tpl], 3, seed=5, jitter=JitterParams.none(32))
    expected = resample_strokes([np.asarray(p) for p in tpl.polylines], 32)
    for s in samples:
        np.testing.assert_array_equal(s.strokes, expected)


def test_class_balanced_counts():
    samples = generate(digit_templates(), 200, seed=0, jitter=JitterParams(n_points=12, length_jitter=0.0))
    assert len(samples) == 2000
    labels, counts = np.unique([s.label for s in samples], return_counts=True)
    assert labels.tolist() == list(range(10)) and set(counts) == {200}


def test_split_fractions_per_class():
    samples = generate(digit_templates()[:2], 20, seed=3)
    assert split_counts(samples) == {"train": 32, "val": 4, "test": 4}
    for label in (0, 1):
        assert sum(1 for s in by_split(samples, "val") if s.label == label) == 2


def test_splits_disjoint_with_shared_classes():
    samples = generate(digit_templates(), 10, seed=8)
    parts = {s: by_split(samples, s) for s in ("train", "val", "test")}
    seeds = [{x.writer_seed for x in part} for part in parts.values()]
    assert sum(map(len, seeds)) == len(samples)
    assert {x.label for x in parts["train"]} == {x.label for x in parts["val"]} == set(range(10))


def test_generated_coordinates_stay_in_unit_square():
    wild = JitterParams(max_rotation_deg=15, min_scale=1.5, max_scale=2.0, max_translation=0.4, noise_sigma=0.05)
    for s in generate(digit_templates(), 4, seed=9, jitter=wild):
        assert s.strokes[:, :2].min() >= 0.0 and s.strokes[:, :2].max() <= 1.0


def test_pen_up_points_between_polylines():
    strokes = resample_strokes([np.array([[0.1, 0.1], [0.4, 0.1]]), np.array([[0.6, 0.6], [0.6, 0.9]])], 10)
    pen = strokes[:, 2]
    assert pen.tolist().count(0.0) == 1
    up = int(np.flatnonzero(pen == 0.0)[0])
    np.testing.assert_allclose(strokes[up, :2], [0.5, 0.35])
    assert (pen == 1.0).sum() == 10


def test_variable_length_sequences():
    lengths = {len(s.strokes) for s in generate(digit_templates()[:1], 30, seed=1)}
    assert len(lengths) > 3
    assert min(lengths) >= 24 and max(lengths) <= 41


# -- rasterisation ----------------------------------------------------------

def test_rasterize_no_pen_down_is_blank():
    pts = np.array([[0.2, 0.2, 0.0], [0.8, 0.8, 0.0]])
    assert not rasterize(pts, 32).any()


def test_rasterize_range_and_quantisation():
    img = rasterize(generate(digit_templates()[:1], 1, seed=0)[0].strokes, 56)
    assert img.min() >= 0.0 and img.max() <= 1.0
    np.testing.assert_array_equal(np.round(img * 255) / 255, img)


def test_every_pen_down_point_is_inked():
    for s in generate(digit_templates(), 3, seed=4):
        side = s.image.shape[0]
        for x, y, p in s.strokes:
            if p != 1.0:
                continue
            col = min(int(x * side), side - 1)
            row = min(int(y * side), side - 1)
            hood = s.image[max(row - 1, 0):row + 2, max(col - 1, 0):col + 2]
            assert hood.max() > 0.5


def test_horizontal_line_mirror_symmetry():
    pts = np.array([[0.25, 0.5, 1.0], [0.6, 0.5, 1.0]])
    mirrored = pts.copy()
    mirrored[:, 0] = 1.0 - mirrored[:, 0]
    a = rasterize(pts, 40)
    b = rasterize(mirrored, 40)
    np.testing.assert_allclose(a[:, ::-1], b, atol=1e-6)


def test_isolated_pen_down_point_draws_dot():
    img = rasterize(np.array([[0.5, 0.5, 1.0]]), 16)
    assert img[8, 8] > 0.5 or img[7, 7] > 0.5


def test_images_are_rasterized_strokes():
    for s in generate(digit_templates(), 5, seed=21):
        assert np.array_equal(rasterize(s.strokes), s.image)


def test_rasterize_rejects_tiny_side():
    with pytest.raises(ValueError):
        rasterize(np.zeros((1, 3)), 4)


# -- disk format ------------------------------------------------------------

def test_dataset_round_trip(tmp_path):
    samples = generate(digit_templates()[:3], 4, seed=2)
    write_dataset(samples, tmp_path)
    back = read_dataset(tmp_path)
    assert back == samples


def test_manifest_line_format(tmp_path):
    import json

    write_dataset(generate(digit_templates()[:1], 1, seed=0, split_fractions=None), tmp_path)
    rec = json.loads((tmp_path / "manifest.jsonl").read_text().splitlines()[0])
    assert set(rec) >= {"label", "split", "strokes", "image"}
    assert rec["image"].startswith("images/") and rec["image"].endswith(".pgm")
    assert (tmp_path / rec["image"]).read_bytes().startswith(b"P5\n56 56\n255\n")


def test_stroke_only_manifest_round_trip(tmp_path):
    samples = [Sample(1, np.array([[0.1, 0.2, 1.0], [0.3, 0.4, 0.0]]), None, 7, "val")]
    write_dataset(samples, tmp_path)
    assert read_dataset(tmp_path) == samples


def _corrupt_line(tmp_path, n, edit):
    samples = generate(digit_templates()[:1], 3, seed=2)
    write_dataset(samples, tmp_path)
    path = tmp_path / "manifest.jsonl"
    lines = path.read_text().splitlines()
    lines[n - 1] = edit(lines[n - 1])
    path.write_text("\n".join(lines) + "\n")


def test_bad_pen_value_names_line(tmp_path):
    _corrupt_line(tmp_path, 2, lambda l: l.replace(",1],", ",2],", 1))
    with pytest.raises(DatasetError, match=r"line 2: pen value 2"):
        read_dataset(tmp_path)


def test_malformed_json_names_line(tmp_path):
    _corrupt_line(tmp_path, 3, lambda l: l[:-5])
    with pytest.raises(DatasetError, match="line 3"):
        read_dataset(tmp_path)


def test_missing_image_names_path(tmp_path):
    write_dataset(generate(digit_templates()[:1], 2, seed=2), tmp_path)
    (tmp_path / "images" / "000001.pgm").unlink()
    with pytest.raises(DatasetError, match="000001.pgm"):
        read_dataset(tmp_path)


def test_truncated_image_names_file(tmp_path):
    write_dataset(generate(digit_templates()[:1], 2, seed=2), tmp_path)
    img = tmp_path / "images" / "000000.pgm"
    img.write_bytes(img.read_bytes()[:-10])
    with pytest.raises(DatasetError, match="000000.pgm"):
        read_dataset(tmp_path)
