"""On-disk artifacts: annotation corpora, feature pyramids, detection results.

All temporal endpoints are stored normalized to [0, 1] in memory; seconds
appear only inside the JSON documents read and written here.  Feature
payloads are 32-bit little-endian floats, row-major (time-major).

Formats
-------
Annotation JSON::

    {"labels": ["a", ...],
     "videos": [{"id": str, "duration": seconds, "fps": number,
                 "num_frames": int,
                 "annotations": [{"label": str, "segment": [s0, s1]}, ...]},
                ...]}

Feature file (binary): magic ``DTPF``, u32 version=1, u32 d, u32 S,
u32 K1, then for s = 1..S a (K_s x d) float32 LE row-major block with
K_s = 2^(s-1) * K1.

Detection JSON::

    {"version": "dtpn-1",
     "results": {video_id: [{"label": str, "score": float,
                             "segment": [start_s, end_s]}, ...]}}

with each per-video list sorted by descending score.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from dtpn.errors import FormatError, ValidationError

FEATURE_MAGIC = b"DTPF"
FEATURE_VERSION = 1
DETECTION_FORMAT_VERSION = "dtpn-1"


@dataclass(frozen=True)
class VideoMeta:
    """Identity and timing of one untrimmed video."""

    id: str
    duration_s: float
    fps: float
    num_frames: int

    def validate(self) -> None:
        if not self.id:
            raise ValidationError("video id must be a non-empty string")
        if self.duration_s <= 0:
            raise ValidationError(f"video {self.id!r}: duration must be > 0")
        if self.fps <= 0:
            raise ValidationError(f"video {self.id!r}: fps must be > 0")
        if self.num_frames < 1:
            raise ValidationError(f"video {self.id!r}: num_frames must be >= 1")
        # Frame count must agree with duration within one second of slack.
        if abs(self.num_frames - self.duration_s * self.fps) > self.fps:
            raise ValidationError(
                f"video {self.id!r}: num_frames={self.num_frames} inconsistent "
                f"with duration {self.duration_s}s at {self.fps} fps"
            )


@dataclass(frozen=True)
class GroundTruthSegment:
    """One annotated activity instance, endpoints normalized to [0, 1]."""

    label_index: int
    start: float
    end: float

    def validate(self, num_classes: int) -> None:
        if not 0 <= self.label_index < num_classes:
            raise ValidationError(
                f"label index {self.label_index} outside [0, {num_classes})"
            )
        if not self.start < self.end:
            raise ValidationError(
                f"segment start >= end: [{self.start}, {self.end}]"
            )
        if self.start < 0 or self.end > 1:
            raise ValidationError(
                f"segment outside [0, 1]: [{self.start}, {self.end}]"
            )


@dataclass(frozen=True)
class Detection:
    """A scored, classified temporal interval, normalized to [0, 1]."""

    start: float
    end: float
    label_index: int
    score: float


@dataclass
class Corpus:
    """An ordered label set plus annotated videos.

    label_index is the stable identity of a class; evaluation is per-class
    and must be order-stable, so labels are a list rather than a set.
    """

    labels: list[str]
    videos: list[tuple[VideoMeta, list[GroundTruthSegment]]] = field(
        default_factory=list
    )

    @property
    def num_classes(self) -> int:
        return len(self.labels)

    def video_ids(self) -> list[str]:
        return [meta.id for meta, _ in self.videos]

    def get(self, video_id: str) -> tuple[VideoMeta, list[GroundTruthSegment]]:
        for meta, gts in self.videos:
            if meta.id == video_id:
                return meta, gts
        raise ValidationError(f"unknown video id {video_id!r}")


class PyramidFeature:
    """Multi-scale input feature: S matrices, level s of shape (K_s x d).

    Row counts double per level (K_s = 2^(s-1) * K_1) and all levels share
    the feature dimension d.  Values are float32, the payload dtype of the
    feature file format.
    """

    def __init__(self, levels: list[np.ndarray]):
        if not levels:
            raise ValidationError("pyramid must have at least one level")
        clean = []
        for s, lv in enumerate(levels, start=1):
            arr = np.ascontiguousarray(lv, dtype=np.float32)
            if arr.ndim != 2:
                raise ValidationError(f"pyramid level {s} is not a 2-D matrix")
            clean.append(arr)
        base = clean[0].shape[0]
        dim = clean[0].shape[1]
        for s, arr in enumerate(clean, start=1):
            want_rows = base * (1 << (s - 1))
            if arr.shape != (want_rows, dim):
                raise ValidationError(
                    f"pyramid level {s} has shape {arr.shape}, expected "
                    f"({want_rows}, {dim})"
                )
        self.levels = clean

    @property
    def num_scales(self) -> int:
        return len(self.levels)

    @property
    def base_segments(self) -> int:
        return self.levels[0].shape[0]

    @property
    def dim(self) -> int:
        return self.levels[0].shape[1]

    def copy(self) -> "PyramidFeature":
        return PyramidFeature([lv.copy() for lv in self.levels])

    def allclose(self, other: "PyramidFeature") -> bool:
        return self.num_scales == other.num_scales and all(
            np.array_equal(a, b) for a, b in zip(self.levels, other.levels)
        )


def _require(obj: dict, key: str, where: str):
    if key not in obj:
        raise FormatError(f"{where}: missing required key {key!r}")
    return obj[key]


def load_corpus(path) -> Corpus:
    """Parse and validate an annotation JSON document.

    Segment endpoints given in seconds are normalized by the video
    duration.  Malformed input raises; nothing is silently repaired.
    """
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as e:
        raise ValidationError(f"cannot read corpus {path}: {e}") from e
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise FormatError(
            f"{path}:{e.lineno}:{e.colno}: malformed JSON: {e.msg}"
        ) from e

    if not isinstance(doc, dict):
        raise FormatError(f"{path}: top level must be a JSON object")
    labels = _require(doc, "labels", str(path))
    if (
        not isinstance(labels, list)
        or not labels
        or not all(isinstance(x, str) for x in labels)
    ):
        raise FormatError(f"{path}: 'labels' must be a non-empty list of strings")
    if len(set(labels)) != len(labels):
        raise ValidationError(f"{path}: duplicate label names")
    label_index = {name: i for i, name in enumerate(labels)}

    corpus = Corpus(labels=list(labels))
    seen_ids: set[str] = set()
    for entry in _require(doc, "videos", str(path)):
        where = f"{path}: video {entry.get('id', '?')!r}"
        vid = str(_require(entry, "id", where))
        if vid in seen_ids:
            raise ValidationError(f"{where}: duplicate video id")
        seen_ids.add(vid)
        meta = VideoMeta(
            id=vid,
            duration_s=float(_require(entry, "duration", where)),
            fps=float(_require(entry, "fps", where)),
            num_frames=int(_require(entry, "num_frames", where)),
        )
        meta.validate()

        gts = []
        for ann in entry.get("annotations", []):
            label = _require(ann, "label", where)
            if label not in label_index:
                raise ValidationError(f"{where}: unknown label {label!r}")
            seg = _require(ann, "segment", where)
            if not (isinstance(seg, list) and len(seg) == 2):
                raise FormatError(f"{where}: segment must be [start, end]")
            start_s, end_s = float(seg[0]), float(seg[1])
            if start_s >= end_s:
                raise ValidationError(
                    f"{where}: segment start >= end: [{start_s}, {end_s}]"
                )
            if start_s < 0 or end_s > meta.duration_s:
                raise ValidationError(
                    f"{where}: segment [{start_s}, {end_s}] outside "
                    f"[0, {meta.duration_s}]"
                )
            gt = GroundTruthSegment(
                label_index=label_index[label],
                start=start_s / meta.duration_s,
                end=end_s / meta.duration_s,
            )
            gt.validate(len(labels))
            gts.append(gt)
        corpus.videos.append((meta, gts))
    return corpus


def write_corpus(path, corpus: Corpus) -> None:
    """Inverse of load_corpus; endpoints are de-normalized to seconds."""
    doc = {
        "labels": list(corpus.labels),
        "videos": [
            {
                "id": meta.id,
                "duration": meta.duration_s,
                "fps": meta.fps,
                "num_frames": meta.num_frames,
                "annotations": [
                    {
                        "label": corpus.labels[gt.label_index],
                        "segment": [
                            gt.start * meta.duration_s,
                            gt.end * meta.duration_s,
                        ],
                    }
                    for gt in gts
                ],
            }
            for meta, gts in corpus.videos
        ],
    }
    Path(path).write_text(json.dumps(doc, indent=2) + "\n")


def write_features(path, pyramid: PyramidFeature) -> None:
    """Serialize a pyramid; read_features(write_features(p)) is bit-exact."""
    header = struct.pack(
        "<4s4I",
        FEATURE_MAGIC,
        FEATURE_VERSION,
        pyramid.dim,
        pyramid.num_scales,
        pyramid.base_segments,
    )
    with open(path, "wb") as f:
        f.write(header)
        for lv in pyramid.levels:
            f.write(np.ascontiguousarray(lv, dtype="<f4").tobytes())


def read_features(path) -> PyramidFeature:
    path = Path(path)
    raw = path.read_bytes()
    head_size = struct.calcsize("<4s4I")
    if len(raw) < head_size:
        raise FormatError(f"{path}: truncated header")
    magic, version, dim, scales, base = struct.unpack_from("<4s4I", raw)
    if magic != FEATURE_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}, expected {FEATURE_MAGIC!r}")
    if version != FEATURE_VERSION:
        raise FormatError(f"{path}: unsupported feature file version {version}")
    if dim < 1 or scales < 1 or base < 1:
        raise FormatError(f"{path}: invalid header (d={dim}, S={scales}, K1={base})")

    total_rows = base * ((1 << scales) - 1)
    expected = head_size + total_rows * dim * 4
    if len(raw) != expected:
        raise FormatError(
            f"{path}: payload size mismatch: have {len(raw)} bytes, "
            f"header implies {expected}"
        )
    flat = np.frombuffer(raw, dtype="<f4", offset=head_size)
    levels = []
    offset = 0
    for s in range(scales):
        rows = base * (1 << s)
        levels.append(flat[offset : offset + rows * dim].reshape(rows, dim).copy())
        offset += rows * dim
    return PyramidFeature(levels)


def write_detections(path, results: dict[str, list[Detection]], corpus: Corpus) -> None:
    """Emit the detection JSON document, segments de-normalized to seconds."""
    doc_results = {}
    for vid, dets in results.items():
        meta, _ = corpus.get(vid)  # raises on unknown id
        for det in dets:
            if not 0.0 <= det.score <= 1.0:
                raise ValidationError(
                    f"video {vid!r}: detection score {det.score} outside [0, 1]"
                )
            if not 0 <= det.label_index < corpus.num_classes:
                raise ValidationError(
                    f"video {vid!r}: invalid label index {det.label_index}"
                )
        ordered = sorted(dets, key=lambda d: (-d.score, d.start, d.label_index))
        doc_results[vid] = [
            {
                "label": corpus.labels[det.label_index],
                "score": det.score,
                "segment": [
                    det.start * meta.duration_s,
                    det.end * meta.duration_s,
                ],
            }
            for det in ordered
        ]
    doc = {"version": DETECTION_FORMAT_VERSION, "results": doc_results}
    Path(path).write_text(json.dumps(doc, indent=2) + "\n")


def read_detections(path, corpus: Corpus) -> dict[str, list[Detection]]:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise FormatError(
            f"{path}:{e.lineno}:{e.colno}: malformed JSON: {e.msg}"
        ) from e
    if doc.get("version") != DETECTION_FORMAT_VERSION:
        raise FormatError(
            f"{path}: unsupported detection format version {doc.get('version')!r}"
        )
    label_index = {name: i for i, name in enumerate(corpus.labels)}
    results: dict[str, list[Detection]] = {}
    for vid, entries in _require(doc, "results", str(path)).items():
        meta, _ = corpus.get(vid)  # raises on unknown id
        dets = []
        for entry in entries:
            label = _require(entry, "label", f"{path}: video {vid!r}")
            if label not in label_index:
                raise ValidationError(f"{path}: video {vid!r}: unknown label {label!r}")
            seg = _require(entry, "segment", f"{path}: video {vid!r}")
            dets.append(
                Detection(
                    start=float(seg[0]) / meta.duration_s,
                    end=float(seg[1]) / meta.duration_s,
                    label_index=label_index[label],
                    score=float(entry["score"]),
                )
            )
        results[vid] = dets
    return results
