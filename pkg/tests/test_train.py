import math

import numpy as np
import pytest

from dtpn.errors import ConfigError, NumericalError, ValidationError
from dtpn.io_formats import GroundTruthSegment
from dtpn.model import ModelConfig, PyramidDetector, layout_anchors
from dtpn.postprocess import tiou
from dtpn.sampling import SamplingConfig
from dtpn.train import (
    NEGATIVE,
    TrainConfig,
    make_synthetic_corpus,
    match_anchors,
    multitask_loss,
    train,
)

CFG16 = ModelConfig(num_classes=4, scales=5, base_segments=16, feature_dim=8)
ANCHORS16 = layout_anchors(CFG16)


class TestMatchAnchors:
    def test_exact_anchor_coincidence(self):
        a = ANCHORS16[3]
        gt = GroundTruthSegment(2, *a.interval)
        match = match_anchors(ANCHORS16, [gt])
        assert match.assignment[3] == 0
        assert match.target_labels[3] == 2
        assert match.target_offsets[3] == pytest.approx((0.0, 0.0))

    def test_whole_video_gt_claims_top_anchor(self):
        gt = GroundTruthSegment(0, 0.0, 1.0)
        match = match_anchors(ANCHORS16, [gt])
        assert match.assignment[len(ANCHORS16) - 1] == 0

    def test_first_cell_gt(self):
        gt = GroundTruthSegment(1, 0.0, 1 / 16)
        match = match_anchors(ANCHORS16, [gt])
        assert match.assignment[0] == 0
        assert tiou(ANCHORS16[0].interval, (gt.start, gt.end)) == pytest.approx(1.0)

    def test_every_gt_gets_a_positive(self, rng):
        for _ in range(200):
            gts = []
            cursor = 0.0
            while len(gts) < 4:
                length = float(rng.uniform(1 / 32, 0.3))
                if cursor + length >= 1.0:
                    break
                start = float(rng.uniform(cursor, 1.0 - length))
                gts.append(GroundTruthSegment(0, start, start + length))
                cursor = start + length + 0.01
            if not gts:
                continue
            match = match_anchors(ANCHORS16, gts)
            claimed = set(match.assignment[match.assignment >= 0].tolist())
            assert claimed == set(range(len(gts)))

    def test_anchor_positive_for_at_most_one_gt(self, rng):
        gts = [
            GroundTruthSegment(0, 0.1, 0.2),
            GroundTruthSegment(1, 0.11, 0.21),  # overlapping pair
        ]
        match = match_anchors(ANCHORS16, gts)
        positives = match.assignment[match.assignment >= 0]
        assert len(positives) == len(match.positive_indices)
        assert set(positives.tolist()) == {0, 1}

    def test_threshold_promotes_extra_anchors(self):
        gt = GroundTruthSegment(0, 0.0, 0.5)
        strict = match_anchors(ANCHORS16, [gt], match_threshold=0.99)
        loose = match_anchors(ANCHORS16, [gt], match_threshold=0.3)
        assert strict.num_positives == 1
        assert loose.num_positives > 1

    def test_no_gts_all_negative(self):
        match = match_anchors(ANCHORS16, [])
        assert match.num_positives == 0
        assert np.all(match.assignment == NEGATIVE)


class TestMultitaskLoss:
    def _single_positive_match(self):
        a = ANCHORS16[5]
        gt = GroundTruthSegment(1, *a.interval)
        return match_anchors(ANCHORS16, [gt], match_threshold=0.99)

    def test_zero_logit_closed_form(self):
        match = self._single_positive_match()
        assert match.num_positives == 1
        preds = np.zeros((len(ANCHORS16), 4 + 3))
        cfg = TrainConfig(neg_pos_ratio=3)
        loss, grad = multitask_loss(preds, match, cfg, num_classes=4)
        # one positive: CE = ln 4, offsets exact so smooth-L1 = 0,
        # actionness = (1 pos + 3 hard neg) * ln 2
        assert loss == pytest.approx(math.log(4) + 4 * math.log(2))
        assert grad.shape == preds.shape

    def test_saturated_correct_predictions_drive_loss_to_zero(self):
        match = self._single_positive_match()
        preds = np.zeros((len(ANCHORS16), 4 + 3))
        preds[:, 0] = -40.0  # negatives confidently off
        pos = match.positive_indices[0]
        preds[pos, 0] = 40.0
        preds[pos, 1 + match.target_labels[pos]] = 40.0
        preds[pos, -2:] = match.target_offsets[pos]
        loss, _ = multitask_loss(preds, match, TrainConfig(), num_classes=4)
        assert loss < 1e-12

    def test_no_gts_reduces_to_hard_negative_actionness(self):
        match = match_anchors(ANCHORS16, [])
        preds = np.zeros((len(ANCHORS16), 4 + 3))
        loss, grad = multitask_loss(preds, match, TrainConfig(), num_classes=4)
        assert loss == pytest.approx(3 * math.log(2))  # ratio * floor(1) negatives
        assert np.count_nonzero(grad[:, 0]) == 3
        assert np.all(grad[:, 1:] == 0)

    def test_loss_nonnegative_on_random_predictions(self, rng):
        match = self._single_positive_match()
        for _ in range(25):
            preds = rng.normal(scale=3.0, size=(len(ANCHORS16), 7))
            loss, _ = multitask_loss(preds, match, TrainConfig(), num_classes=4)
            assert loss >= 0.0

    def test_hard_negatives_are_highest_scoring(self):
        match = self._single_positive_match()
        preds = np.zeros((len(ANCHORS16), 4 + 3))
        negatives = np.where(match.assignment == NEGATIVE)[0]
        hot = negatives[[4, 7, 11]]
        preds[hot, 0] = 5.0
        _, grad = multitask_loss(preds, match, TrainConfig(), num_classes=4)
        touched = set(np.nonzero(grad[:, 0])[0].tolist())
        assert set(hot.tolist()) <= touched
        assert len(touched) == 4  # 1 positive + 3 hard negatives


class TestTrainConfig:
    def test_learning_rate_switches_after_high_phase(self):
        cfg = TrainConfig(epochs_hi=12, epochs_lo=8, lr_hi=1e-4, lr_lo=1e-5)
        assert cfg.learning_rate(12) == 1e-4
        assert cfg.learning_rate(13) == 1e-5
        assert cfg.total_epochs == 20

    def test_invalid_values_rejected(self):
        with pytest.raises(ConfigError):
            TrainConfig(lr_hi=0.0)
        with pytest.raises(ConfigError):
            TrainConfig(neg_pos_ratio=0)
        with pytest.raises(ConfigError):
            TrainConfig(flip_prob=1.5)


def _tiny_training_setup(seed=0, n_videos=6):
    sampling = SamplingConfig(scales=3, base_segments=8, window=4)
    corpus, features = make_synthetic_corpus(
        seed=seed, n_videos=n_videos, num_classes=2, max_instances=2,
        cfg=sampling, feature_dim=8,
    )
    model_cfg = ModelConfig(
        num_classes=2, scales=3, base_segments=8, feature_dim=8, branch_filters=4
    )
    return corpus, features, model_cfg


class TestTrainLoop:
    def test_identical_seeds_give_identical_curves_and_weights(self):
        corpus, features, model_cfg = _tiny_training_setup()
        cfg = TrainConfig(epochs_hi=2, epochs_lo=1, seed=3)
        runs = []
        for _ in range(2):
            model = PyramidDetector(model_cfg, seed=3)
            result = train(corpus, features, model, cfg)
            runs.append((result.epoch_losses, model))
        assert runs[0][0] == runs[1][0]
        for (_, a), (_, b) in zip(
            runs[0][1].parameters(), runs[1][1].parameters()
        ):
            assert np.array_equal(a.w, b.w)
            assert np.array_equal(a.b, b.b)

    def test_missing_features_fail_before_training(self):
        corpus, features, model_cfg = _tiny_training_setup()
        features.pop(corpus.videos[0][0].id)
        model = PyramidDetector(model_cfg, seed=0)
        with pytest.raises(ValidationError, match="missing features"):
            train(corpus, features, model, TrainConfig(epochs_hi=1, epochs_lo=0))

    def test_non_finite_loss_aborts_with_video_id(self):
        corpus, features, model_cfg = _tiny_training_setup()
        vid = corpus.videos[2][0].id
        features[vid].levels[0][0, 0] = np.nan
        model = PyramidDetector(model_cfg, seed=0)
        with pytest.raises(NumericalError, match=vid):
            train(corpus, features, model, TrainConfig(epochs_hi=1, epochs_lo=0,
                                                       flip_prob=0.0))

    def test_adam_moves_parameters(self):
        corpus, features, model_cfg = _tiny_training_setup()
        model = PyramidDetector(model_cfg, seed=0)
        before = [layer.w.copy() for _, layer in model.parameters()]
        train(corpus, features, model, TrainConfig(epochs_hi=1, epochs_lo=0))
        moved = any(
            not np.array_equal(b, layer.w)
            for b, (_, layer) in zip(before, model.parameters())
        )
        assert moved

    def test_batched_updates_match_config(self):
        corpus, features, model_cfg = _tiny_training_setup()
        model = PyramidDetector(model_cfg, seed=1)
        cfg = TrainConfig(epochs_hi=1, epochs_lo=0, batch_size=3, seed=0)
        result = train(corpus, features, model, cfg)
        assert len(result.epoch_losses) == 1


class TestSyntheticCorpus:
    def test_same_seed_reproduces_everything(self):
        a_corpus, a_features = make_synthetic_corpus(seed=5, n_videos=4)
        b_corpus, b_features = make_synthetic_corpus(seed=5, n_videos=4)
        assert a_corpus.labels == b_corpus.labels
        for (ma, ga), (mb, gb) in zip(a_corpus.videos, b_corpus.videos):
            assert ma == mb and ga == gb
        for vid in a_features:
            assert a_features[vid].allclose(b_features[vid])

    def test_instance_count_bounds(self):
        corpus, _ = make_synthetic_corpus(seed=0, n_videos=32, max_instances=3)
        total = sum(len(gts) for _, gts in corpus.videos)
        assert 32 <= total <= 96
        assert all(len(gts) >= 1 for _, gts in corpus.videos)

    def test_segment_length_floor(self):
        corpus, _ = make_synthetic_corpus(seed=1, n_videos=16)
        for _, gts in corpus.videos:
            for gt in gts:
                assert gt.end - gt.start >= 1 / 16 - 1e-12

    def test_segments_do_not_overlap(self):
        corpus, _ = make_synthetic_corpus(seed=2, n_videos=16)
        for _, gts in corpus.videos:
            for a, b in zip(gts, gts[1:]):
                assert a.end <= b.start

    def test_ground_truth_identical_across_pyramid_geometries(self):
        five, _ = make_synthetic_corpus(seed=9, n_videos=6,
                                        cfg=SamplingConfig(scales=5))
        one, _ = make_synthetic_corpus(seed=9, n_videos=6,
                                       cfg=SamplingConfig(scales=1))
        for (ma, ga), (mb, gb) in zip(five.videos, one.videos):
            assert ma == mb and ga == gb
