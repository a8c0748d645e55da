"""Feature sequences, annotations, batching, file formats and synthetic procedures."""

import csv
import enum
import hashlib
import io
import json
import math
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np
from scipy import special

TARGET_FPS = 5.0


class DataError(ValueError):
    """Malformed or inconsistent input data."""


class LabelClass(enum.IntEnum):
    OUTSIDE = 0
    INSERTION = 1
    CECUM = 2
    ILEUM = 3
    ASCENDING = 4
    TRANSVERSE = 5
    DESCENDING = 6
    SIGMOID = 7
    RECTUM = 8
    UNCERTAIN = 9

    @property
    def canonical(self):
        return self.name.lower()

    @classmethod
    def from_name(cls, name):
        try:
            return cls[name.strip().upper()]
        except KeyError:
            raise ValueError(f"unknown label {name!r}") from None


NUM_CLASSES = 9  # model classes; UNCERTAIN is never a target


@dataclass(frozen=True)
class SegmentAnnotation:
    video_id: str
    start_frame: int
    end_frame: int  # inclusive
    label: LabelClass

    def __len__(self):
        return self.end_frame - self.start_frame + 1


# --------------------------------------------------------------------------
# annotations

ANNOTATION_HEADER = ["video_id", "start_frame", "end_frame", "label"]


class AnnotationError(DataError):
    pass


def parse_annotations(document):
    """Parse annotation CSV text into validated, sorted segments.

    Segments of each video must abut exactly and start at frame 0.
    """
    reader = csv.reader(io.StringIO(document))
    rows = list(reader)
    if not rows or [c.strip() for c in rows[0]] != ANNOTATION_HEADER:
        raise AnnotationError(f"line 1: expected header {','.join(ANNOTATION_HEADER)}")
    parsed = []  # (segment, line number)
    for lineno, row in enumerate(rows[1:], start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != 4:
            raise AnnotationError(f"line {lineno}: expected 4 fields, got {len(row)}")
        vid, start, end, label = (c.strip() for c in row)
        try:
            start_i, end_i = int(start), int(end)
        except ValueError:
            raise AnnotationError(f"line {lineno}: frame indices must be integers") from None
        try:
            lab = LabelClass.from_name(label)
        except ValueError as e:
            raise AnnotationError(f"line {lineno}: {e}") from None
        if not vid:
            raise AnnotationError(f"line {lineno}: empty video_id")
        if start_i < 0 or end_i < start_i:
            raise AnnotationError(f"line {lineno}: invalid interval [{start_i}, {end_i}]")
        parsed.append((SegmentAnnotation(vid, start_i, end_i, lab), lineno))

    parsed.sort(key=lambda p: (p[0].video_id, p[0].start_frame))
    prev = None
    for seg, lineno in parsed:
        if prev is None or prev[0].video_id != seg.video_id:
            if seg.start_frame != 0:
                raise AnnotationError(
                    f"line {lineno}: video {seg.video_id} starts at frame {seg.start_frame}, not 0"
                )
        else:
            pseg, pline = prev
            if seg.start_frame <= pseg.end_frame:
                raise AnnotationError(f"lines {pline} and {lineno}: overlapping segments")
            if seg.start_frame != pseg.end_frame + 1:
                raise AnnotationError(
                    f"lines {pline} and {lineno}: gap between frames {pseg.end_frame} "
                    f"and {seg.start_frame}"
                )
        prev = (seg, lineno)
    return [p[0] for p in parsed]


def read_annotations(path):
    return parse_annotations(Path(path).read_text())


def format_annotations(segments):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(ANNOTATION_HEADER)
    for s in segments:
        w.writerow([s.video_id, s.start_frame, s.end_frame, LabelClass(s.label).canonical])
    return buf.getvalue()


def rasterize(segments, T):
    """Per-frame labels from segments that exactly cover ``[0, T)``."""
    labels = np.full(T, -1, dtype=np.int64)
    pos = 0
    for s in sorted(segments, key=lambda s: s.start_frame):
        if s.start_frame != pos:
            raise DataError(f"segments do not cover frame {pos} contiguously")
        if s.end_frame >= T:
            raise DataError(f"segment ends at frame {s.end_frame} beyond T={T}")
        labels[s.start_frame:s.end_frame + 1] = int(s.label)
        pos = s.end_frame + 1
    if pos != T:
        raise DataError(f"segments cover [0, {pos}) but T={T}")
    return labels


def segmentize(labels, video_id):
    """Inverse of :func:`rasterize`: run-length segments of a label sequence."""
    labels = np.asarray(labels)
    if labels.size == 0:
        return []
    change = np.flatnonzero(labels[1:] != labels[:-1]) + 1
    starts = np.concatenate([[0], change])
    ends = np.concatenate([change - 1, [labels.size - 1]])
    return [
        SegmentAnnotation(video_id, int(a), int(b), LabelClass(int(labels[a])))
        for a, b in zip(starts, ends)
    ]


def label_mask(labels):
    """Frames usable as targets: everything except UNCERTAIN."""
    labels = np.asarray(labels)
    return (labels >= 0) & (labels < NUM_CLASSES)


# --------------------------------------------------------------------------
# sequences


@dataclass
class FeatureSequence:
    video_id: str
    fps: float
    features: np.ndarray
    labels: Optional[np.ndarray] = None
    mask: Optional[np.ndarray] = None
    cohort: Optional[int] = None

    def __post_init__(self):
        if self.features.ndim != 2 or self.features.shape[0] < 1:
            raise DataError(f"{self.video_id}: features must be (T, D) with T >= 1")
        T = self.features.shape[0]
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (T,):
                raise DataError(f"{self.video_id}: {self.labels.size} labels for {T} frames")
            if self.mask is None:
                self.mask = label_mask(self.labels)
        if self.mask is None:
            self.mask = np.ones(T, dtype=bool)
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.mask.shape != (T,):
            raise DataError(f"{self.video_id}: mask length {self.mask.size} != {T}")

    @property
    def num_frames(self):
        return self.features.shape[0]

    @property
    def feature_dim(self):
        return self.features.shape[1]

    def take(self, idx, fps):
        return FeatureSequence(
            self.video_id, fps, self.features[idx],
            None if self.labels is None else self.labels[idx], self.mask[idx], self.cohort,
        )


def resample_indices(T, ratio):
    """Frame indices ``round(i * ratio)`` below ``T``; ``ratio`` = source/target fps."""
    n = int(math.ceil(T / ratio))
    idx = np.floor(np.arange(n + 1) * ratio + 0.5).astype(np.int64)
    return idx[idx < T]


def resample_to_fps(seq, target_fps=TARGET_FPS):
    if target_fps > seq.fps:
        raise DataError(f"{seq.video_id}: cannot upsample {seq.fps} fps to {target_fps}")
    if target_fps == seq.fps:
        return seq
    return seq.take(resample_indices(seq.num_frames, seq.fps / target_fps), target_fps)


def temporal_augment(seq, rng, target_fps=TARGET_FPS):
    """Random-phase temporal subsampling to ``target_fps`` in half of the draws.

    Otherwise the deterministic offset-0 subsampling of :func:`resample_to_fps`.
    Labels and mask follow the same index map.
    """
    factor = seq.fps / target_fps
    random_phase = rng.random() < 0.5
    offset = rng.uniform(0.0, factor) if random_phase else 0.0
    if factor <= 1.0:
        return seq
    T = seq.num_frames
    n = int(math.ceil((T - offset) / factor))
    idx = np.floor(offset + np.arange(n + 1) * factor + 0.5).astype(np.int64)
    idx = idx[idx < T]
    if idx.size == 0:  # clip shorter than one period, phase landed past its end
        idx = np.array([T - 1])
    return seq.take(idx, target_fps)


@dataclass
class Batch:
    features: np.ndarray  # (B, T_max, D)
    labels: np.ndarray  # (B, T_max), -1 on padding
    mask: np.ndarray  # (B, T_max)
    lengths: np.ndarray  # (B,)
    video_ids: List[str]

    def __len__(self):
        return len(self.video_ids)

    def sequence(self, i):
        """Unpadded view of entry ``i``."""
        n = int(self.lengths[i])
        return self.features[i, :n], self.labels[i, :n], self.mask[i, :n]


def make_batch(seqs):
    """Zero-pad sequences to the longest one; the mask is False on padding."""
    if not seqs:
        raise DataError("cannot batch an empty list")
    dims = {s.feature_dim for s in seqs}
    if len(dims) != 1:
        raise DataError(f"mixed feature dimensions in batch: {sorted(dims)}")
    D = dims.pop()
    lengths = np.array([s.num_frames for s in seqs], dtype=np.int64)
    B, T = len(seqs), int(lengths.max())
    feats = np.zeros((B, T, D))
    labels = np.full((B, T), -1, dtype=np.int64)
    mask = np.zeros((B, T), dtype=bool)
    for i, s in enumerate(seqs):
        n = s.num_frames
        feats[i, :n] = s.features
        if s.labels is not None:
            labels[i, :n] = s.labels
        mask[i, :n] = s.mask
    return Batch(feats, labels, mask, lengths, [s.video_id for s in seqs])


# --------------------------------------------------------------------------
# CTCNFEAT binary feature files

FEATURE_MAGIC = b"CTCNFEAT"
FEATURE_VERSION = 1
_FEATURE_HEADER = struct.Struct("<8sIIIf")
_CHECKSUM = struct.Struct("<Q")


def payload_checksum(payload):
    """64-bit checksum of a byte payload (BLAKE2b with an 8-byte digest)."""
    return _CHECKSUM.unpack(hashlib.blake2b(payload, digest_size=8).digest())[0]


def save_features(seq, path):
    """Write ``seq.features`` as little-endian float32 in the CTCNFEAT layout."""
    feats = np.ascontiguousarray(seq.features, dtype="<f4")
    T, D = feats.shape
    payload = feats.tobytes()
    with open(path, "wb") as f:
        f.write(_FEATURE_HEADER.pack(FEATURE_MAGIC, FEATURE_VERSION, T, D, float(seq.fps)))
        f.write(payload)
        f.write(_CHECKSUM.pack(payload_checksum(payload)))


def load_features(path, video_id=None, expected_dim=None):
    """Read a CTCNFEAT file; returns an unlabeled :class:`FeatureSequence` (float32)."""
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as e:
        raise DataError(f"{path}: {e.strerror or e}") from None
    if len(raw) < _FEATURE_HEADER.size:
        raise DataError(f"{path}: truncated header")
    magic, version, T, D, fps = _FEATURE_HEADER.unpack_from(raw)
    if magic != FEATURE_MAGIC:
        raise DataError(f"{path}: bad magic {magic!r}")
    if version != FEATURE_VERSION:
        raise DataError(f"{path}: unsupported version {version}")
    n = T * D * 4
    if len(raw) != _FEATURE_HEADER.size + n + _CHECKSUM.size:
        raise DataError(f"{path}: expected {n} payload bytes plus checksum, file is truncated or padded")
    payload = raw[_FEATURE_HEADER.size:_FEATURE_HEADER.size + n]
    (stored,) = _CHECKSUM.unpack_from(raw, _FEATURE_HEADER.size + n)
    if stored != payload_checksum(payload):
        raise DataError(f"{path}: checksum mismatch")
    if expected_dim is not None and D != expected_dim:
        raise DataError(f"{path}: feature dim {D} != dataset dim {expected_dim}")
    feats = np.frombuffer(payload, dtype="<f4").reshape(T, D).astype(np.float32)
    return FeatureSequence(video_id or path.stem, float(fps), feats)


# --------------------------------------------------------------------------
# manifest

MANIFEST_FORMAT = "colontcn-manifest"


@dataclass
class ManifestEntry:
    video_id: str
    features: str
    annotations: Optional[str] = None
    fps: float = TARGET_FPS
    cohort: Optional[int] = None
    folds: Dict[str, int] = field(default_factory=dict)


@dataclass
class Manifest:
    feature_dim: int
    videos: List[ManifestEntry]
    root: Path = Path(".")

    def to_dict(self):
        return {
            "format": MANIFEST_FORMAT,
            "version": 1,
            "feature_dim": self.feature_dim,
            "videos": [vars(v) for v in self.videos],
        }

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path):
        path = Path(path)
        try:
            doc = json.loads(path.read_text())
        except OSError as e:
            raise DataError(f"{path}: {e.strerror or e}") from None
        except json.JSONDecodeError as e:
            raise DataError(f"{path}: invalid JSON ({e})") from None
        if doc.get("format") != MANIFEST_FORMAT:
            raise DataError(f"{path}: not a {MANIFEST_FORMAT} document")
        try:
            videos = [ManifestEntry(**v) for v in doc["videos"]]
            dim = int(doc["feature_dim"])
        except (KeyError, TypeError) as e:
            raise DataError(f"{path}: malformed manifest ({e})") from None
        ids = [v.video_id for v in videos]
        if len(set(ids)) != len(ids):
            raise DataError(f"{path}: duplicate video ids")
        return cls(dim, videos, path.parent)

    def entry(self, video_id):
        for v in self.videos:
            if v.video_id == video_id:
                return v
        raise DataError(f"video {video_id!r} not in manifest")

    def load_video(self, video_id):
        e = self.entry(video_id)
        seq = load_features(self.root / e.features, e.video_id, self.feature_dim)
        if seq.fps != e.fps:
            raise DataError(f"{e.features}: fps {seq.fps} disagrees with manifest {e.fps}")
        seq.cohort = e.cohort
        if e.annotations is not None:
            apath = self.root / e.annotations
            try:
                text = apath.read_text()
            except OSError as err:
                raise DataError(f"{apath}: {err.strerror or err}") from None
            try:
                segs = [s for s in parse_annotations(text) if s.video_id == e.video_id]
                labels = rasterize(segs, seq.num_frames)
            except DataError as err:
                raise DataError(f"{apath}: {err}") from None
            seq = FeatureSequence(seq.video_id, seq.fps, seq.features, labels, None, e.cohort)
        return seq

    def load_all(self, video_ids=None):
        ids = [v.video_id for v in self.videos] if video_ids is None else video_ids
        return {vid: self.load_video(vid) for vid in ids}


# --------------------------------------------------------------------------
# synthetic procedures

# mean [min, max] seconds per class over the 60 annotated procedures
DURATION_TABLE = {
    "outside": (29.1, 0.0, 105.0),
    "insertion": (594.4, 113.0, 2608.0),
    "cecum": (133.2, 17.0, 608.0),
    "ileum": (10.0, 0.0, 132.0),
    "ascending": (140.6, 13.0, 656.0),
    "transverse": (355.0, 49.0, 1964.0),
    "descending": (148.2, 13.0, 1132.0),
    "sigmoid": (176.8, 25.0, 726.0),
    "rectum": (101.4, 5.0, 597.0),
    "uncertain": (2.3, 0.0, 131.0),
}


@dataclass
class SyntheticSpec:
    durations: Dict[str, tuple] = field(default_factory=lambda: dict(DURATION_TABLE))
    ileum_presence_prob: float = 26 / 60
    uncertain_prob: float = 0.0
    feature_dim: int = 16
    separation: float = 1.0
    noise: float = 1.5
    smoothing_window: int = 5
    video_shift: float = 0.0
    fps: float = TARGET_FPS
    seed: int = 0

    def __post_init__(self):
        for name in CLASS_ORDER_NAMES + ("uncertain",):
            if name not in self.durations:
                raise ValueError(f"missing duration stats for {name!r}")
        for name, (mean, lo, hi) in self.durations.items():
            if not (0 <= lo <= mean <= hi) or hi <= 0:
                raise ValueError(f"{name}: need 0 <= min <= mean <= max, got {mean} [{lo}, {hi}]")
        for p in (self.ileum_presence_prob, self.uncertain_prob):
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"probability {p} outside [0, 1]")
        if self.feature_dim < 1 or self.smoothing_window < 1 or self.fps <= 0:
            raise ValueError("feature_dim, smoothing_window and fps must be positive")
        if self.noise < 0 or self.separation < 0 or self.video_shift < 0:
            raise ValueError("noise, separation and video_shift must be nonnegative")

    def to_dict(self):
        d = dict(vars(self))
        d["durations"] = {k: list(v) for k, v in self.durations.items()}
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "durations" in d:
            d["durations"] = {k: tuple(v) for k, v in d["durations"].items()}
        return cls(**d)


CLASS_ORDER_NAMES = (
    "outside", "insertion", "cecum", "ileum", "ascending",
    "transverse", "descending", "sigmoid", "rectum",
)


class TruncatedLogNormal:
    """Log-normal restricted to ``[lo, hi]`` whose truncated mean equals ``mean``.

    The log-scale spread puts ``[lo, hi]`` at about +-2 sigma; the location is
    solved by bisection (the truncated mean is increasing in it).
    """

    def __init__(self, mean, lo, hi, floor=0.2):
        lo_eff = max(lo, floor)
        if not lo_eff < mean < hi:
            raise ValueError(f"mean {mean} must lie strictly inside [{lo_eff}, {hi}]")
        self.lo, self.hi = lo, hi
        self.sigma = math.log(hi / lo_eff) / 4.0
        self._a = -np.inf if lo <= 0 else math.log(lo)
        self._b = math.log(hi)
        a, b = math.log(lo_eff) - 10 * self.sigma, self._b + 10 * self.sigma
        for _ in range(200):
            mid = 0.5 * (a + b)
            if self.truncated_mean(mid) < mean:
                a = mid
            else:
                b = mid
        self.mu = 0.5 * (a + b)

    def truncated_mean(self, mu=None):
        mu = self.mu if mu is None else mu
        s = self.sigma
        za, zb = (self._a - mu) / s, (self._b - mu) / s
        # E[X | a<lnX<b] = exp(mu + s^2/2) [Phi(zb - s) - Phi(za - s)] / [Phi(zb) - Phi(za)]
        num = special.log_ndtr(zb - s) + np.log1p(-np.exp(special.log_ndtr(za - s) - special.log_ndtr(zb - s)))
        den = special.log_ndtr(zb) + np.log1p(-np.exp(special.log_ndtr(za) - special.log_ndtr(zb)))
        return float(np.exp(mu + 0.5 * s * s + num - den))

    def sample(self, rng, size=None):
        s = self.sigma
        pa = special.ndtr((self._a - self.mu) / s)
        pb = special.ndtr((self._b - self.mu) / s)
        u = rng.uniform(pa, pb, size=size)
        x = np.exp(self.mu + s * special.ndtri(u))
        return np.clip(x, self.lo, self.hi)


def _duration_samplers(spec):
    samplers = {}
    for name, (mean, lo, hi) in spec.durations.items():
        if name == "ileum":
            # table mean counts videos without ileum as 0 s; sample the conditional law
            mean = mean / spec.ileum_presence_prob if spec.ileum_presence_prob > 0 else mean
        if mean <= 0:
            samplers[name] = None
            continue
        samplers[name] = TruncatedLogNormal(mean, lo, hi)
    return samplers


def _frames(seconds, fps):
    return max(1, int(round(seconds * fps)))


def synthetic_segments(spec, rng, samplers=None):
    """Ordered (label, frames) runs of one synthetic procedure."""
    samplers = samplers or _duration_samplers(spec)
    fps = spec.fps
    L = LabelClass
    dur = {name: samplers[name].sample(rng) for name in CLASS_ORDER_NAMES if name != "ileum"}
    has_ileum = rng.random() < spec.ileum_presence_prob
    ileum_s = samplers["ileum"].sample(rng) if has_ileum else 0.0
    outside_split = rng.uniform(0.25, 0.75)
    cecum_split = rng.uniform(0.3, 0.7)

    runs = [(L.OUTSIDE, _frames(dur["outside"] * outside_split, fps)),
            (L.INSERTION, _frames(dur["insertion"], fps))]
    if has_ileum:
        runs += [(L.CECUM, _frames(dur["cecum"] * cecum_split, fps)),
                 (L.ILEUM, _frames(ileum_s, fps)),
                 (L.CECUM, _frames(dur["cecum"] * (1 - cecum_split), fps))]
    else:
        runs.append((L.CECUM, _frames(dur["cecum"], fps)))
    for lab in (L.ASCENDING, L.TRANSVERSE, L.DESCENDING, L.SIGMOID, L.RECTUM):
        runs.append((lab, _frames(dur[lab.canonical], fps)))
    runs.append((L.OUTSIDE, _frames(dur["outside"] * (1 - outside_split), fps)))
    return runs, {"ileum_seconds": ileum_s, **{k: float(v) for k, v in dur.items()}}


def _moving_average(x, window):
    if window <= 1:
        return x
    kernel = np.ones(window) / window
    pad_lo, pad_hi = (window - 1) // 2, window // 2
    xp = np.pad(x, ((pad_lo, pad_hi), (0, 0)), mode="edge")
    c = np.cumsum(np.vstack([np.zeros((1, x.shape[1])), xp]), axis=0)
    return (c[window:] - c[:-window]) * kernel[0]


def generate_synthetic(spec, n_videos, rng):
    """Synthetic procedures following the colonoscopy class order.

    Features are a per-class mean direction (scaled by ``separation``) plus
    white noise, smoothed by a moving average; stored as float32.
    """
    samplers = _duration_samplers(spec)
    D = spec.feature_dim
    dirs = rng.standard_normal((NUM_CLASSES, D))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    means = spec.separation * dirs
    out = []
    for i in range(n_videos):
        runs, _ = synthetic_segments(spec, rng, samplers)
        labels = np.concatenate([np.full(n, int(lab), dtype=np.int64) for lab, n in runs])
        T = labels.size
        if spec.uncertain_prob > 0 and rng.random() < spec.uncertain_prob and samplers["uncertain"]:
            n_unc = min(_frames(samplers["uncertain"].sample(rng), spec.fps), T - 1)
            start = int(rng.integers(0, T - n_unc + 1))
            labels[start:start + n_unc] = int(LabelClass.UNCERTAIN)
        shift = spec.video_shift * rng.standard_normal(D)
        clean = means[np.minimum(labels, NUM_CLASSES - 1)] + shift
        feats = _moving_average(clean + spec.noise * rng.standard_normal((T, D)), spec.smoothing_window)
        cohort = (i * 4) // max(n_videos, 1) + 1
        out.append(
            FeatureSequence(f"synth{i:03d}", spec.fps, feats.astype(np.float32), labels, None, cohort)
        )
    return out


def write_dataset(seqs, out_dir, feature_dim=None, folds=None):
    """Write CTCNFEAT files, annotation CSVs and a manifest under ``out_dir``."""
    out_dir = Path(out_dir)
    (out_dir / "features").mkdir(parents=True, exist_ok=True)
    (out_dir / "annotations").mkdir(parents=True, exist_ok=True)
    entries = []
    for s in seqs:
        fpath = f"features/{s.video_id}.ctcnfeat"
        save_features(s, out_dir / fpath)
        apath = None
        if s.labels is not None:
            apath = f"annotations/{s.video_id}.csv"
            (out_dir / apath).write_text(format_annotations(segmentize(s.labels, s.video_id)))
        tags = {} if folds is None else {k: v[s.video_id] for k, v in folds.items() if s.video_id in v}
        entries.append(ManifestEntry(s.video_id, fpath, apath, float(s.fps), s.cohort, tags))
    if feature_dim is None:
        feature_dim = seqs[0].feature_dim if seqs else 0
    manifest = Manifest(feature_dim, entries, out_dir)
    manifest.save(out_dir / "manifest.json")
    return manifest


def dataset_sha(out_dir):
    """Digest over every file below ``out_dir`` (for reproducibility checks)."""
    h = hashlib.sha256()
    for p in sorted(Path(out_dir).rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(out_dir)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()
