"""Supervised training: anchor assignment, the multi-task loss with hard
negative mining, and a deterministic optimization loop.

Matching is single-shot style: every ground truth first claims its best
anchor, then any leftover anchor overlapping some ground truth at or above
the match threshold joins as a positive.  The loss combines softmax
cross-entropy over classes (positives), smooth L1 on the span offsets
(positives), and binary cross-entropy on the activity logit (positives as
1, the highest-scoring negatives as 0 at a fixed negative:positive ratio),
normalized by the positive count.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from dtpn.errors import ConfigError, NumericalError, ValidationError
from dtpn.io_formats import Corpus, GroundTruthSegment, PyramidFeature, VideoMeta
from dtpn.model import Anchor, PyramidDetector, layout_anchors
from dtpn.postprocess import encode_offsets, tiou
from dtpn.sampling import SamplingConfig, temporal_flip
from dtpn.tensor import binary_cross_entropy, cross_entropy_rows, smooth_l1

NEGATIVE = -1
IGNORED = -2


@dataclass
class MatchResult:
    """Per-anchor assignment plus regression/classification targets.

    assignment[a] is a ground-truth index for positives, NEGATIVE, or
    IGNORED; target_offsets and target_labels are only meaningful at
    positive rows.
    """

    assignment: np.ndarray  # (A,) int64
    target_offsets: np.ndarray  # (A, 2) float64
    target_labels: np.ndarray  # (A,) int64

    @property
    def positive_indices(self) -> np.ndarray:
        return np.where(self.assignment >= 0)[0]

    @property
    def num_positives(self) -> int:
        return int((self.assignment >= 0).sum())


@dataclass(frozen=True)
class TrainConfig:
    epochs_hi: int = 12
    epochs_lo: int = 8
    lr_hi: float = 1e-4
    lr_lo: float = 1e-5
    match_threshold: float = 0.5
    neg_pos_ratio: int = 3
    weight_cls: float = 1.0
    weight_loc: float = 1.0
    weight_act: float = 1.0
    batch_size: int = 1
    seed: int = 0
    flip_prob: float = 0.5

    def __post_init__(self):
        if self.lr_hi <= 0 or self.lr_lo <= 0:
            raise ConfigError("learning rates must be > 0")
        if self.neg_pos_ratio < 1:
            raise ConfigError("neg_pos_ratio must be >= 1")
        if self.epochs_hi < 0 or self.epochs_lo < 0 or self.total_epochs < 1:
            raise ConfigError("need at least one training epoch")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if not 0.0 <= self.flip_prob <= 1.0:
            raise ConfigError("flip_prob must be in [0, 1]")

    @property
    def total_epochs(self) -> int:
        return self.epochs_hi + self.epochs_lo

    def learning_rate(self, epoch: int) -> float:
        """epoch is 1-based; the rate drops after epochs_hi epochs."""
        return self.lr_hi if epoch <= self.epochs_hi else self.lr_lo


def match_anchors(
    anchors: list[Anchor],
    gts: list[GroundTruthSegment],
    match_threshold: float = 0.5,
) -> MatchResult:
    num_anchors = len(anchors)
    assignment = np.full(num_anchors, NEGATIVE, dtype=np.int64)
    offsets = np.zeros((num_anchors, 2))
    labels = np.zeros(num_anchors, dtype=np.int64)
    if gts:
        overlaps = np.array(
            [[tiou(a.interval, (gt.start, gt.end)) for gt in gts] for a in anchors]
        )  # (A, G)

        # Stage 1: every ground truth claims its best free anchor, so none
        # goes unsupervised (while anchors last).  Anchor order is
        # level-major then cell, which makes argmax ties resolve to the
        # lower level / lower cell.
        for g in range(len(gts)):
            free = np.where(assignment == NEGATIVE)[0]
            if len(free) == 0:
                break
            best = free[np.argmax(overlaps[free, g])]
            assignment[best] = g

        # Stage 2: remaining anchors overlapping some ground truth at or
        # above the threshold join as positives for their best match.
        for a in np.where(assignment == NEGATIVE)[0]:
            g = int(np.argmax(overlaps[a]))
            if overlaps[a, g] >= match_threshold:
                assignment[a] = g

        for a in np.where(assignment >= 0)[0]:
            gt = gts[assignment[a]]
            offsets[a] = encode_offsets(anchors[a], gt.start, gt.end)
            labels[a] = gt.label_index
    return MatchResult(assignment=assignment, target_offsets=offsets, target_labels=labels)


def multitask_loss(
    predictions: np.ndarray,
    match: MatchResult,
    cfg: TrainConfig,
    num_classes: int,
) -> tuple[float, np.ndarray]:
    """Loss and its gradient with respect to the raw prediction matrix.

    predictions is (num_anchors, 1 + M + 2) in head-channel order:
    activity logit, class logits, center offset, log-length offset.
    """
    if predictions.shape[1] != num_classes + 3:
        raise ValidationError(
            f"prediction matrix has {predictions.shape[1]} channels, "
            f"expected {num_classes + 3}"
        )
    grad = np.zeros_like(predictions, dtype=np.float64)
    pred = predictions.astype(np.float64, copy=False)
    act_logits = pred[:, 0]
    n_pos = match.num_positives
    n_eff = max(1, n_pos)
    loss = 0.0

    pos = match.positive_indices
    if n_pos:
        ce, ce_grad = cross_entropy_rows(
            pred[pos, 1 : 1 + num_classes], match.target_labels[pos]
        )
        loss += cfg.weight_cls * float(ce.sum())
        grad[np.ix_(pos, np.arange(1, 1 + num_classes))] += cfg.weight_cls * ce_grad

        loc, loc_grad = smooth_l1(pred[pos, -2:], match.target_offsets[pos])
        loss += cfg.weight_loc * loc
        grad[np.ix_(pos, np.array([-2, -1]))] += cfg.weight_loc * loc_grad

        act_pos, act_pos_grad = binary_cross_entropy(act_logits[pos], 1.0)
        loss += cfg.weight_act * float(act_pos.sum())
        grad[pos, 0] += cfg.weight_act * act_pos_grad

    negatives = np.where(match.assignment == NEGATIVE)[0]
    take = min(len(negatives), cfg.neg_pos_ratio * n_eff)
    if take:
        # Hardest negatives: highest activity logit; stable sort keeps the
        # anchor order deterministic on ties.
        hard = negatives[np.argsort(-act_logits[negatives], kind="stable")[:take]]
        act_neg, act_neg_grad = binary_cross_entropy(act_logits[hard], 0.0)
        loss += cfg.weight_act * float(act_neg.sum())
        grad[hard, 0] += cfg.weight_act * act_neg_grad

    return loss / n_eff, grad / n_eff


class Adam:
    """Adaptive-moment optimizer over the model's parameter arrays."""

    def __init__(self, model: PyramidDetector, beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.steps = 0
        self._slots = []
        for _, layer in model.parameters():
            for value, gradient in ((layer.w, layer.w_grad), (layer.b, layer.b_grad)):
                self._slots.append(
                    (value, gradient, np.zeros_like(value), np.zeros_like(value))
                )

    def step(self, lr: float) -> None:
        self.steps += 1
        correction1 = 1.0 - self.beta1**self.steps
        correction2 = 1.0 - self.beta2**self.steps
        for value, gradient, m, v in self._slots:
            m += (1.0 - self.beta1) * (gradient - m)
            v += (1.0 - self.beta2) * (gradient * gradient - v)
            value -= lr * (m / correction1) / (np.sqrt(v / correction2) + self.eps)


@dataclass
class TrainResult:
    epoch_losses: list[float] = field(default_factory=list)


def train(
    corpus: Corpus,
    features: dict[str, PyramidFeature],
    model: PyramidDetector,
    cfg: TrainConfig,
) -> TrainResult:
    """Optimize the model in place; returns the per-epoch mean loss curve.

    Deterministic under a fixed cfg.seed: shuffling, flip decisions and
    update order all come from one seeded generator, applied by a single
    writer.
    """
    missing = [vid for vid in corpus.video_ids() if vid not in features]
    if missing:
        raise ValidationError(f"missing features for videos: {missing}")

    anchors = layout_anchors(model.cfg)
    optimizer = Adam(model)
    rng = np.random.default_rng(cfg.seed)
    result = TrainResult()

    for epoch in range(1, cfg.total_epochs + 1):
        lr = cfg.learning_rate(epoch)
        order = rng.permutation(len(corpus.videos))
        losses = []
        model.zero_grad()
        pending = 0
        for j in order:
            meta, gts = corpus.videos[j]
            pyramid = features[meta.id]
            if cfg.flip_prob > 0 and rng.random() < cfg.flip_prob:
                pyramid, gts = temporal_flip(pyramid, gts)

            fp = model.forward(pyramid)
            match = match_anchors(anchors, gts, cfg.match_threshold)
            loss, grad = multitask_loss(
                model.prediction_matrix(fp), match, cfg, model.cfg.num_classes
            )
            if not math.isfinite(loss):
                raise NumericalError(
                    f"non-finite loss at epoch {epoch}, video {meta.id!r}"
                )
            model.set_head_gradients(fp, grad.astype(model.dtype))
            model.backward(fp)
            losses.append(loss)
            pending += 1
            if pending == cfg.batch_size:
                _apply_update(model, optimizer, lr, pending)
                pending = 0
        if pending:
            _apply_update(model, optimizer, lr, pending)
        result.epoch_losses.append(float(np.mean(losses)))
    return result


def _apply_update(model, optimizer, lr, batch_count):
    if batch_count > 1:
        scale = 1.0 / batch_count
        for _, layer in model.parameters():
            layer.w_grad *= scale
            layer.b_grad *= scale
    optimizer.step(lr)
    model.zero_grad()


def make_synthetic_corpus(
    seed: int,
    n_videos: int = 32,
    num_classes: int = 3,
    max_instances: int = 3,
    cfg: SamplingConfig = SamplingConfig(),
    feature_dim: int = 32,
    noise: float = 0.1,
    pattern_scale: float = 2.0,
) -> tuple[Corpus, dict[str, PyramidFeature]]:
    """Deterministic desk-scale corpus with learnable structure.

    Each video gets 1..max_instances non-overlapping segments (lengths in
    [1/16, 1/2]); pyramid rows blend a per-class pattern vector in
    proportion to their overlap with a segment, on top of background noise.
    """
    if num_classes < 2:
        raise ConfigError("need at least two classes")
    rng = np.random.default_rng(seed)
    labels = [f"activity_{i}" for i in range(num_classes)]
    patterns = rng.standard_normal((num_classes, feature_dim))
    patterns *= pattern_scale / np.linalg.norm(patterns, axis=1, keepdims=True)

    # Annotations are drawn before any features so two generators with the
    # same seed share identical ground truth even when their pyramid
    # geometries differ (used by the ablation comparisons).
    corpus = Corpus(labels=labels)
    for v in range(n_videos):
        duration = float(rng.uniform(40.0, 120.0))
        fps = float(rng.uniform(10.0, 30.0))
        meta = VideoMeta(
            id=f"video_{v:03d}",
            duration_s=duration,
            fps=fps,
            num_frames=int(round(duration * fps)),
        )
        spans: list[tuple[float, float]] = []
        wanted = int(rng.integers(1, max_instances + 1))
        for _ in range(wanted):
            for _attempt in range(40):
                length = float(rng.uniform(1.0 / 16.0, 0.5))
                start = float(rng.uniform(0.0, 1.0 - length))
                end = start + length
                if all(end <= s - 0.02 or start >= e + 0.02 for s, e in spans):
                    spans.append((start, end))
                    break
        spans.sort()
        gts = [
            GroundTruthSegment(
                label_index=int(rng.integers(0, num_classes)), start=s, end=e
            )
            for s, e in spans
        ]
        corpus.videos.append((meta, gts))

    features: dict[str, PyramidFeature] = {}
    for meta, gts in corpus.videos:
        levels = []
        for s in range(cfg.scales):
            rows = cfg.base_segments << s
            values = noise * rng.standard_normal((rows, feature_dim))
            edges = np.arange(rows + 1) / rows
            for gt in gts:
                overlap = np.clip(
                    np.minimum(edges[1:], gt.end) - np.maximum(edges[:-1], gt.start),
                    0.0,
                    None,
                )
                values += (overlap * rows)[:, None] * patterns[gt.label_index]
            levels.append(values.astype(np.float32))
        features[meta.id] = PyramidFeature(levels)
    return corpus, features
