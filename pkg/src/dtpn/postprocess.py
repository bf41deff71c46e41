"""From raw anchor predictions to final detections.

Offsets follow the single-shot detector convention: the center moves
linearly in units of the anchor length, the length scales by exp of the
predicted log-ratio.  Scores combine the activity logit (sigmoid) with the
per-class softmax.  Overlapping same-class detections are pruned by greedy
temporal NMS.
"""

from __future__ import annotations

import math

import numpy as np

from dtpn.errors import ValidationError
from dtpn.io_formats import Detection, PyramidFeature
from dtpn.model import Anchor, AnchorPrediction, PyramidDetector, layout_anchors
from dtpn.tensor import sigmoid, softmax_rows

DEFAULT_NMS_THRESHOLD = 0.5
DEFAULT_TOP_K = 100
DEFAULT_SCORE_FLOOR = 0.005


def decode_offsets(
    anchor: Anchor, d_center: float, d_length: float
) -> tuple[float, float] | None:
    """Predicted interval for an anchor, clipped to [0, 1].

    Returns None when clipping leaves nothing (start >= end).
    """
    center = anchor.center + d_center * anchor.length
    length = anchor.length * math.exp(d_length)
    start = max(0.0, center - 0.5 * length)
    end = min(1.0, center + 0.5 * length)
    if start >= end:
        return None
    return start, end


def encode_offsets(anchor: Anchor, start: float, end: float) -> tuple[float, float]:
    """Regression targets that make decode_offsets reproduce [start, end]."""
    length = end - start
    if length <= 0:
        raise ValidationError(f"cannot encode degenerate interval [{start}, {end}]")
    center = 0.5 * (start + end)
    d_center = (center - anchor.center) / anchor.length
    d_length = math.log(length / anchor.length)
    return d_center, d_length


def score_detection(pred: AnchorPrediction, class_index: int) -> float:
    """Activity presence times class probability."""
    act = float(sigmoid(np.asarray(pred.act_logit)))
    probs = softmax_rows(pred.class_logits[None, :])[0]
    return act * float(probs[class_index])


def tiou(x: tuple[float, float], y: tuple[float, float]) -> float:
    """Temporal intersection over union; 0 for disjoint intervals."""
    inter = min(x[1], y[1]) - max(x[0], y[0])
    if inter <= 0:
        return 0.0
    union = (x[1] - x[0]) + (y[1] - y[0]) - inter
    return inter / union


def temporal_nms(
    detections: list[Detection],
    threshold: float = DEFAULT_NMS_THRESHOLD,
    top_k: int = DEFAULT_TOP_K,
) -> list[Detection]:
    """Greedy class-wise suppression.

    Candidates are visited by descending score (ties: earlier start, then
    smaller label index) and kept iff they overlap every already-kept
    detection of the same class with tIoU < threshold.  Stops at top_k.
    """
    if not 0 <= threshold <= 1:
        raise ValidationError(f"nms threshold {threshold} outside [0, 1]")
    ordered = sorted(detections, key=lambda d: (-d.score, d.start, d.label_index))
    kept: list[Detection] = []
    for det in ordered:
        if len(kept) >= top_k:
            break
        span = (det.start, det.end)
        if any(
            k.label_index == det.label_index and tiou(span, (k.start, k.end)) >= threshold
            for k in kept
        ):
            continue
        kept.append(det)
    return kept


def detect_video(
    pyramid: PyramidFeature,
    model: PyramidDetector,
    nms_threshold: float = DEFAULT_NMS_THRESHOLD,
    top_k: int = DEFAULT_TOP_K,
    score_floor: float = DEFAULT_SCORE_FLOOR,
) -> list[Detection]:
    """Forward pass, decode every (anchor, class) pair, filter, suppress."""
    fp = model.forward(pyramid)
    matrix = model.prediction_matrix(fp)
    m = model.cfg.num_classes
    anchors = layout_anchors(model.cfg)

    act = sigmoid(matrix[:, 0])
    probs = softmax_rows(matrix[:, 1 : 1 + m])
    scores = act[:, None] * probs  # (num_anchors, M)

    candidates: list[Detection] = []
    for a, anchor in enumerate(anchors):
        decoded = None
        for cls in range(m):
            score = float(scores[a, cls])
            if score < score_floor:
                continue
            if decoded is None:
                decoded = decode_offsets(
                    anchor, float(matrix[a, 1 + m]), float(matrix[a, 2 + m])
                )
                if decoded is None:
                    break  # degenerate for every class
            candidates.append(
                Detection(
                    start=decoded[0],
                    end=decoded[1],
                    label_index=cls,
                    score=score,
                )
            )
    return temporal_nms(candidates, threshold=nms_threshold, top_k=top_k)


def detect_corpus(
    features: dict[str, PyramidFeature],
    model: PyramidDetector,
    nms_threshold: float = DEFAULT_NMS_THRESHOLD,
    top_k: int = DEFAULT_TOP_K,
    score_floor: float = DEFAULT_SCORE_FLOOR,
) -> dict[str, list[Detection]]:
    """detect_video over a whole feature set, keyed by video id."""
    return {
        vid: detect_video(pyramid, model, nms_threshold, top_k, score_floor)
        for vid, pyramid in features.items()
    }
