"""Detection metrics: per-class average precision at a tIoU threshold,
mAP, and the mean over the 0.50:0.05:0.95 threshold sweep.

AP is the step-wise (non-interpolated) area under the precision-recall
curve: detections sorted by descending score greedily claim the
highest-tIoU unmatched ground truth in their video.  Classes absent from
the ground truth are excluded from the mAP mean and flagged instead, so an
undefined AP never pollutes the average.

oracle_evaluate recomputes everything through an intentionally separate
code path (per-rank re-derivation, direct summation) and exists purely to
cross-check evaluate.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from dtpn.errors import ValidationError
from dtpn.io_formats import Corpus, Detection
from dtpn.postprocess import tiou

DEFAULT_THRESHOLDS = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))

# one detection, ready to rank: (video_id, start, end, score)
_Scored = tuple[str, float, float, float]


def _ranked(dets: list[_Scored]) -> list[_Scored]:
    # Deterministic order: score desc, then earlier start, then video id.
    return sorted(dets, key=lambda d: (-d[3], d[1], d[0]))


def average_precision(
    detections: list[_Scored],
    gts_by_video: dict[str, list[tuple[float, float]]],
    threshold: float,
    curve: list[tuple[float, float]] | None = None,
) -> float:
    """Step-wise AP of one class at one tIoU threshold.

    detections are (video_id, start, end, score) tuples; gts_by_video maps
    a video id to that class's ground-truth intervals.  If `curve` is given
    it receives (recall, precision) points, one per rank.
    """
    num_gt = sum(len(v) for v in gts_by_video.values())
    if num_gt == 0:
        return 0.0

    matched = {vid: [False] * len(spans) for vid, spans in gts_by_video.items()}
    ap = 0.0
    true_positives = 0
    prev_recall = 0.0
    for rank, (vid, start, end, _score) in enumerate(_ranked(detections), start=1):
        best_overlap = 0.0
        best_gt = -1
        for g, span in enumerate(gts_by_video.get(vid, [])):
            if matched[vid][g]:
                continue
            overlap = tiou((start, end), span)
            if overlap >= threshold and overlap > best_overlap:
                best_overlap = overlap
                best_gt = g
        if best_gt >= 0:
            matched[vid][best_gt] = True
            true_positives += 1
            recall = true_positives / num_gt
            precision = true_positives / rank
            ap += (recall - prev_recall) * precision
            prev_recall = recall
        if curve is not None:
            curve.append((true_positives / num_gt, true_positives / rank))
    return ap


@dataclass
class EvalReport:
    thresholds: list[float]
    map_values: list[float]
    average_map: float
    # per class: AP per threshold, or None when the class has no ground truth
    ap_table: dict[int, list[float] | None]
    classes_without_gt: list[int] = field(default_factory=list)
    # (label_index, threshold) -> [(recall, precision), ...]
    curves: dict[tuple[int, float], list[tuple[float, float]]] = field(
        default_factory=dict
    )

    def to_json_dict(self, labels: list[str]) -> dict:
        return {
            "thresholds": self.thresholds,
            "map": {f"{t:.2f}": v for t, v in zip(self.thresholds, self.map_values)},
            "average_map": self.average_map,
            "per_class_ap": {
                labels[c]: (
                    None
                    if aps is None
                    else {f"{t:.2f}": v for t, v in zip(self.thresholds, aps)}
                )
                for c, aps in self.ap_table.items()
            },
            "classes_without_ground_truth": [
                labels[c] for c in self.classes_without_gt
            ],
        }

    def format_table(self, labels: list[str]) -> str:
        width = max([len("class")] + [len(x) for x in labels])
        header = ["class".ljust(width)] + [f"{t:.2f}" for t in self.thresholds]
        lines = ["  ".join(header)]
        for c, aps in sorted(self.ap_table.items()):
            cells = (
                ["   -"] * len(self.thresholds)
                if aps is None
                else [f"{v:.2f}" for v in aps]
            )
            lines.append("  ".join([labels[c].ljust(width)] + cells))
        map_cells = [f"{v:.2f}" for v in self.map_values]
        lines.append("  ".join(["mAP".ljust(width)] + map_cells))
        lines.append(f"average mAP over {len(self.thresholds)} thresholds: "
                     f"{self.average_map:.4f}")
        return "\n".join(lines)


def _split_by_class(
    results: dict[str, list[Detection]], corpus: Corpus
) -> tuple[dict[int, list[_Scored]], dict[int, dict[str, list[tuple[float, float]]]]]:
    known = set(corpus.video_ids())
    for vid in results:
        if vid not in known:
            raise ValidationError(f"detections reference unknown video id {vid!r}")

    dets_by_class: dict[int, list[_Scored]] = {c: [] for c in range(corpus.num_classes)}
    gts_by_class: dict[int, dict[str, list[tuple[float, float]]]] = {
        c: {} for c in range(corpus.num_classes)
    }
    for vid, dets in results.items():
        for det in dets:
            dets_by_class[det.label_index].append(
                (vid, det.start, det.end, det.score)
            )
    for meta, gts in corpus.videos:
        for gt in gts:
            gts_by_class[gt.label_index].setdefault(meta.id, []).append(
                (gt.start, gt.end)
            )
    return dets_by_class, gts_by_class


def _ap_task(args):
    c, t, dets, gts = args
    return c, t, average_precision(dets, gts, t)


def evaluate(
    results: dict[str, list[Detection]],
    corpus: Corpus,
    thresholds: tuple[float, ...] = DEFAULT_THRESHOLDS,
    collect_curves: bool = False,
    jobs: int = 1,
) -> EvalReport:
    """mAP(t) = mean AP over classes with ground truth; averaged over t.

    Per-class, per-threshold computations are independent; jobs > 1 fans
    them out to worker processes (curve collection stays serial).
    """
    dets_by_class, gts_by_class = _split_by_class(results, corpus)

    report = EvalReport(
        thresholds=list(thresholds),
        map_values=[],
        average_map=0.0,
        ap_table={},
    )
    scored_classes = []
    for c in range(corpus.num_classes):
        if gts_by_class[c]:
            scored_classes.append(c)
            report.ap_table[c] = []
        else:
            report.ap_table[c] = None
            report.classes_without_gt.append(c)

    ap_values: dict[tuple[int, float], float] = {}
    if jobs > 1 and not collect_curves:
        tasks = [
            (c, t, dets_by_class[c], gts_by_class[c])
            for t in thresholds
            for c in scored_classes
        ]
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=jobs) as pool:
            for c, t, ap in pool.map(_ap_task, tasks):
                ap_values[(c, t)] = ap
    else:
        for t in thresholds:
            for c in scored_classes:
                curve: list[tuple[float, float]] | None = (
                    [] if collect_curves else None
                )
                ap_values[(c, t)] = average_precision(
                    dets_by_class[c], gts_by_class[c], t, curve
                )
                if collect_curves:
                    report.curves[(c, t)] = curve

    for t in thresholds:
        aps = []
        for c in scored_classes:
            ap = ap_values[(c, t)]
            report.ap_table[c].append(ap)
            aps.append(ap)
        report.map_values.append(float(np.mean(aps)) if aps else 0.0)
    report.average_map = float(np.mean(report.map_values)) if thresholds else 0.0
    return report


# ---------------------------------------------------------------------------
# independent reference path
# ---------------------------------------------------------------------------


def _oracle_overlap(a0, a1, b0, b1):
    lo = a0 if a0 > b0 else b0
    hi = a1 if a1 < b1 else b1
    if hi <= lo:
        return 0.0
    return (hi - lo) / ((a1 - a0) + (b1 - b0) - (hi - lo))


def _oracle_class_ap(dets, gts_by_video, threshold):
    total_gt = 0
    for spans in gts_by_video.values():
        total_gt += len(spans)
    if total_gt == 0:
        return 0.0

    ordered = list(dets)
    ordered.sort(key=lambda d: (-d[3], d[1], d[0]))

    # Re-derive the full match sequence: hits[k] is True when detection k
    # claims a ground truth no earlier detection claimed.
    claimed: dict[tuple[str, int], bool] = {}
    hits = []
    for vid, start, end, _score in ordered:
        choice = None
        choice_overlap = 0.0
        for g, (g0, g1) in enumerate(gts_by_video.get(vid, [])):
            if claimed.get((vid, g)):
                continue
            ov = _oracle_overlap(start, end, g0, g1)
            if ov >= threshold and ov > choice_overlap:
                choice, choice_overlap = g, ov
        if choice is None:
            hits.append(False)
        else:
            claimed[(vid, choice)] = True
            hits.append(True)

    # Direct summation: each hit contributes precision-at-its-rank / total_gt,
    # with the prefix recounted from scratch every time.
    ap = 0.0
    for k in range(len(hits)):
        if not hits[k]:
            continue
        tp = 0
        for j in range(k + 1):
            if hits[j]:
                tp += 1
        ap += (tp / (k + 1)) / total_gt
    return ap


def oracle_evaluate(
    results: dict[str, list[Detection]],
    corpus: Corpus,
    thresholds: tuple[float, ...] = DEFAULT_THRESHOLDS,
) -> EvalReport:
    """Reference evaluator sharing no AP code with evaluate()."""
    dets_by_class, gts_by_class = _split_by_class(results, corpus)
    report = EvalReport(
        thresholds=list(thresholds), map_values=[], average_map=0.0, ap_table={}
    )
    scored = []
    for c in range(corpus.num_classes):
        if gts_by_class[c]:
            scored.append(c)
            report.ap_table[c] = []
        else:
            report.ap_table[c] = None
            report.classes_without_gt.append(c)
    for t in thresholds:
        aps = []
        for c in scored:
            ap = _oracle_class_ap(dets_by_class[c], gts_by_class[c], t)
            report.ap_table[c].append(ap)
            aps.append(ap)
        report.map_values.append(sum(aps) / len(aps) if aps else 0.0)
    report.average_map = (
        sum(report.map_values) / len(report.map_values) if thresholds else 0.0
    )
    return report
