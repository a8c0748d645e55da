import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from colontcn import data
from colontcn.data import (
    AnnotationError, DataError, FeatureSequence, LabelClass, Manifest, SyntheticSpec,
)

HEADER = "video_id,start_frame,end_frame,label\n"


# annotations

def test_parse_abutting_segments():
    segs = data.parse_annotations(HEADER + "v1,0,99,insertion\nv1,100,199,cecum\n")
    assert [(s.start_frame, s.end_frame, s.label) for s in segs] == [
        (0, 99, LabelClass.INSERTION), (100, 199, LabelClass.CECUM)]
    labels = data.rasterize(segs, 200)
    assert labels[99] == 1 and labels[100] == 2


def test_parse_sorts_rows():
    segs = data.parse_annotations(HEADER + "v,5,9,rectum\nv,0,4,outside\n")
    assert [s.start_frame for s in segs] == [0, 5]


@pytest.mark.parametrize("body,needle", [
    ("v,0,10,cecum\nv,5,20,ileum\n", "lines 2 and 3"),
    ("v,0,10,cecum\nv,12,20,ileum\n", "lines 2 and 3"),
    ("v,0,10,cecum\nv,11,20,colon\n", "line 3"),
    ("v,0,10,cecum\nv,11,x,ileum\n", "line 3"),
    ("v,0,10\n", "line 2"),
    ("v,3,10,cecum\n", "line 2"),
    ("v,0,10,cecum\nv,20,11,ileum\n", "line 3"),
])
def test_parse_errors_have_line_numbers(body, needle):
    with pytest.raises(AnnotationError, match=needle):
        data.parse_annotations(HEADER + body)


def test_parse_rejects_bad_header():
    with pytest.raises(AnnotationError, match="line 1"):
        data.parse_annotations("vid,start,end,label\nv,0,1,cecum\n")


def test_full_nine_class_file_rasterizes():
    names = list(data.CLASS_ORDER_NAMES)
    rows, pos = [], 0
    for i, n in enumerate(names):
        rows.append(f"v,{pos},{pos + i + 2},{n}")
        pos += i + 3
    labels = data.rasterize(data.parse_annotations(HEADER + "\n".join(rows) + "\n"), pos)
    assert labels.size == pos
    assert sorted(set(labels.tolist())) == list(range(9))


def test_rasterize_errors_and_constant():
    seg = data.SegmentAnnotation("v", 0, 9, LabelClass.CECUM)
    np.testing.assert_array_equal(data.rasterize([seg], 10), np.full(10, 2))
    with pytest.raises(DataError):
        data.rasterize([seg], 12)
    with pytest.raises(DataError):
        data.rasterize([seg], 5)


def test_uncertain_is_masked():
    seq = FeatureSequence("v", 5.0, np.zeros((4, 2)), np.array([2, 9, 9, 3]))
    np.testing.assert_array_equal(seq.mask, [True, False, False, True])


label_runs = st.lists(st.tuples(st.integers(0, 9), st.integers(1, 30)), min_size=1, max_size=15)


@settings(max_examples=100, deadline=None)
@given(label_runs)
def test_annotation_roundtrip(runs):
    labels = np.concatenate([np.full(n, lab) for lab, n in runs])
    segs = data.segmentize(labels, "vid")
    text = data.format_annotations(segs)
    parsed = data.parse_annotations(text)
    assert parsed == segs
    np.testing.assert_array_equal(data.rasterize(parsed, labels.size), labels)
    assert data.segmentize(data.rasterize(parsed, labels.size), "vid") == segs


# resampling and augmentation

def sentinel_seq(T, fps, D=3):
    feats = np.repeat(np.arange(T, dtype=np.float64)[:, None], D, axis=1)
    labels = np.arange(T) % 10
    return FeatureSequence("s", fps, feats, labels)


def test_resample_25_to_5():
    seq = sentinel_seq(250, 25.0)
    out = data.resample_to_fps(seq, 5.0)
    assert out.num_frames == 50 and out.fps == 5.0
    np.testing.assert_array_equal(out.features[:, 0], np.arange(0, 250, 5))
    np.testing.assert_array_equal(out.labels, seq.labels[::5])
    np.testing.assert_array_equal(out.mask, seq.mask[::5])


def test_resample_identity_and_upsample_error():
    seq = sentinel_seq(20, 5.0)
    assert data.resample_to_fps(seq, 5.0) is seq
    with pytest.raises(DataError):
        data.resample_to_fps(seq, 10.0)


def test_resample_non_integer_ratio():
    out = data.resample_to_fps(sentinel_seq(30, 12.5), 5.0)
    np.testing.assert_array_equal(out.features[:, 0], [0, 3, 5, 8, 10, 13, 15, 18, 20, 23, 25, 28])


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 500), st.sampled_from([5.0, 10.0, 12.5, 25.0, 29.97, 30.0, 50.0]), st.integers(0, 2**31))
def test_augment_length_bound_and_alignment(T, fps, seed):
    seq = sentinel_seq(T, fps)
    out = data.temporal_augment(seq, np.random.default_rng(seed))
    f = fps / 5.0
    assert abs(out.num_frames - math.ceil(T / f)) <= 1
    idx = out.features[:, 0].astype(int)
    assert np.all(np.diff(idx) > 0) and idx[-1] < T
    np.testing.assert_array_equal(out.labels, seq.labels[idx])
    np.testing.assert_array_equal(out.mask, seq.mask[idx])
    assert np.all(out.features == out.features[:, :1])


def test_augment_identity_at_target_fps_and_deterministic():
    seq = sentinel_seq(40, 5.0)
    for s in range(5):
        assert data.temporal_augment(seq, np.random.default_rng(s)) is seq
    seq = sentinel_seq(300, 25.0)
    a = data.temporal_augment(seq, np.random.default_rng(11))
    b = data.temporal_augment(seq, np.random.default_rng(11))
    np.testing.assert_array_equal(a.features, b.features)


def test_augment_uses_both_branches():
    seq = sentinel_seq(300, 25.0)
    firsts = {int(data.temporal_augment(seq, np.random.default_rng(s)).features[0, 0]) for s in range(40)}
    assert 0 in firsts and len(firsts) > 1


# batching

def test_make_batch_padding():
    a = FeatureSequence("a", 5.0, np.ones((3, 4)), np.array([1, 2, 9]))
    b = FeatureSequence("b", 5.0, np.ones((5, 4)), np.array([0, 1, 2, 3, 4]))
    batch = data.make_batch([a, b])
    assert batch.features.shape == (2, 5, 4)
    np.testing.assert_array_equal(batch.mask[0], [True, True, False, False, False])
    np.testing.assert_array_equal(batch.labels[0, 3:], [-1, -1])
    assert np.all(batch.features[0, 3:] == 0)
    x, y, m = batch.sequence(0)
    assert x.shape == (3, 4) and y.tolist() == [1, 2, 9]
    assert batch.video_ids == ["a", "b"] and len(batch) == 2


def test_make_batch_equal_lengths_and_errors():
    a = FeatureSequence("a", 5.0, np.ones((3, 2)), np.array([1, 2, 3]))
    batch = data.make_batch([a, a])
    assert batch.mask.all()
    with pytest.raises(DataError):
        data.make_batch([])
    with pytest.raises(DataError):
        data.make_batch([a, FeatureSequence("c", 5.0, np.ones((3, 3)))])


def test_sequence_validation():
    with pytest.raises(DataError):
        FeatureSequence("v", 5.0, np.zeros((4, 2)), np.zeros(3))
    with pytest.raises(DataError):
        FeatureSequence("v", 5.0, np.zeros((0, 2)))


# feature files

def test_feature_roundtrip_bit_exact(tmp_path):
    rng = np.random.default_rng(0)
    for T, D in ((1, 1), (17, 5), (300, 64)):
        feats = (rng.standard_normal((T, D)) * 1e3).astype(np.float32)
        feats[0, 0] = np.float32(np.finfo(np.float32).tiny)
        p = tmp_path / f"f{T}.ctcnfeat"
        data.save_features(FeatureSequence("x", 25.0, feats), p)
        back = data.load_features(p)
        assert back.features.tobytes() == feats.tobytes()
        assert back.fps == 25.0 and back.video_id == f"f{T}"


def test_feature_file_layout(tmp_path):
    p = tmp_path / "a.ctcnfeat"
    data.save_features(FeatureSequence("a", 5.0, np.arange(6, dtype=np.float32).reshape(3, 2)), p)
    raw = p.read_bytes()
    assert raw[:8] == b"CTCNFEAT"
    assert int.from_bytes(raw[8:12], "little") == 1
    assert int.from_bytes(raw[12:16], "little") == 3
    assert int.from_bytes(raw[16:20], "little") == 2
    assert len(raw) == 24 + 6 * 4 + 8


def test_feature_file_errors(tmp_path):
    p = tmp_path / "a.ctcnfeat"
    data.save_features(FeatureSequence("a", 5.0, np.ones((10, 4), dtype=np.float32)), p)
    raw = p.read_bytes()
    cases = {
        "trunc": raw[:-3],
        "header": raw[:10],
        "magic": b"XXXXXXXX" + raw[8:],
        "version": raw[:8] + (2).to_bytes(4, "little") + raw[12:],
        "checksum": raw[:30] + bytes([raw[30] ^ 1]) + raw[31:],
    }
    for name, blob in cases.items():
        q = tmp_path / f"{name}.ctcnfeat"
        q.write_bytes(blob)
        with pytest.raises(DataError):
            data.load_features(q)
    with pytest.raises(DataError, match="dim"):
        data.load_features(p, expected_dim=8)
    with pytest.raises(DataError):
        data.load_features(tmp_path / "missing.ctcnfeat")


# manifest

def test_manifest_roundtrip(tmp_path):
    seqs = data.generate_synthetic(SyntheticSpec(feature_dim=4), 3, np.random.default_rng(0))
    m = data.write_dataset(seqs, tmp_path, folds={"5fold": {"synth000": 0}})
    loaded = Manifest.load(tmp_path / "manifest.json")
    assert loaded.feature_dim == 4 and [v.video_id for v in loaded.videos] == ["synth000", "synth001", "synth002"]
    assert loaded.entry("synth000").folds == {"5fold": 0}
    for s in seqs:
        back = loaded.load_video(s.video_id)
        assert back.features.tobytes() == s.features.tobytes()
        np.testing.assert_array_equal(back.labels, s.labels)
        assert back.cohort == s.cohort
    assert len(m.load_all()) == 3
    with pytest.raises(DataError):
        loaded.entry("nope")


def test_manifest_errors(tmp_path):
    bad = tmp_path / "m.json"
    bad.write_text("{")
    with pytest.raises(DataError):
        Manifest.load(bad)
    bad.write_text('{"format": "other"}')
    with pytest.raises(DataError):
        Manifest.load(bad)
    seqs = data.generate_synthetic(SyntheticSpec(feature_dim=4), 1, np.random.default_rng(0))
    m = data.write_dataset(seqs, tmp_path)
    m.feature_dim = 5
    m.save(tmp_path / "manifest.json")
    with pytest.raises(DataError, match="dim"):
        Manifest.load(tmp_path / "manifest.json").load_video("synth000")


# synthetic procedures

def test_truncated_lognormal_bounds_and_mean():
    rng = np.random.default_rng(0)
    for name, (mean, lo, hi) in data.DURATION_TABLE.items():
        if name == "ileum" or mean <= 0:
            continue
        d = data.TruncatedLogNormal(mean, lo, hi)
        assert abs(d.truncated_mean() - mean) < 1e-6 * mean
        x = d.sample(rng, 20000)
        assert x.min() >= lo and x.max() <= hi
        assert abs(x.mean() - mean) < 0.05 * mean


def test_synthetic_durations_monte_carlo():
    spec = SyntheticSpec()
    rng = np.random.default_rng(1)
    samplers = data._duration_samplers(spec)
    totals = {n: [] for n in data.CLASS_ORDER_NAMES}
    for _ in range(1000):
        runs, info = data.synthetic_segments(spec, rng, samplers)
        for name in data.CLASS_ORDER_NAMES:
            mean, lo, hi = spec.durations[name]
            sec = info["ileum_seconds"] if name == "ileum" else info[name]
            if name != "ileum" or sec > 0:
                assert lo <= sec <= hi
            totals[name].append(sum(n for lab, n in runs if lab == LabelClass.from_name(name)) / spec.fps)
    for name in data.CLASS_ORDER_NAMES:
        mean = spec.durations[name][0]
        assert abs(np.mean(totals[name]) - mean) < 0.1 * mean, name


def collapse(labels):
    return [int(labels[0])] + [int(b) for a, b in zip(labels[:-1], labels[1:]) if a != b]


def test_synthetic_grammar():
    seqs = data.generate_synthetic(SyntheticSpec(feature_dim=4), 60, np.random.default_rng(2))
    with_ileum = [0, 1, 2, 3, 2, 4, 5, 6, 7, 8, 0]
    without = [0, 1, 2, 4, 5, 6, 7, 8, 0]
    seen = set()
    for s in seqs:
        order = collapse(s.labels)
        assert order in (with_ileum, without)
        seen.add(len(order))
        assert s.features.dtype == np.float32 and s.features.shape[1] == 4
        assert s.mask.all()
    assert seen == {9, 11}
    assert [s.cohort for s in seqs] == [i * 4 // 60 + 1 for i in range(60)]


def test_synthetic_deterministic_and_uncertain():
    spec = SyntheticSpec(feature_dim=3, uncertain_prob=1.0)
    a = data.generate_synthetic(spec, 4, np.random.default_rng(5))
    b = data.generate_synthetic(spec, 4, np.random.default_rng(5))
    for x, y in zip(a, b):
        assert x.features.tobytes() == y.features.tobytes()
    assert any((s.labels == 9).any() for s in a)
    for s in a:
        np.testing.assert_array_equal(s.mask, s.labels != 9)


def test_synthetic_spec_validation():
    with pytest.raises(ValueError):
        SyntheticSpec(ileum_presence_prob=1.5)
    bad = dict(data.DURATION_TABLE)
    bad["cecum"] = (10.0, 20.0, 30.0)
    with pytest.raises(ValueError):
        SyntheticSpec(durations=bad)
    spec = SyntheticSpec(noise=0.5)
    assert SyntheticSpec.from_dict(spec.to_dict()) == spec


def test_moving_average_edges():
    x = np.arange(6, dtype=float)[:, None]
    y = data._moving_average(x, 3)
    np.testing.assert_allclose(y[:, 0], [1 / 3, 1, 2, 3, 4, 14 / 3])
