import json
from pathlib import Path

import pytest

from dtpn.cli import main
from dtpn.config import default_run_config, load_run_config, parse_run_config
from dtpn.errors import ConfigError
from dtpn.io_formats import read_features
from dtpn.model import ModelConfig, PyramidDetector

REPO_ROOT = Path(__file__).resolve().parents[1]

QUICK_CONF = """
sampling.scales = 3
sampling.base_segments = 8
sampling.window = 4
model.feature_dim = 8
model.branch_filters = 4
train.epochs_hi = 2
train.epochs_lo = 1
train.flip_prob = 0.5
"""


class TestRunConfig:
    def test_checked_in_defaults_match_library_defaults(self):
        shipped = load_run_config(REPO_ROOT / "configs" / "default.conf")
        assert shipped == default_run_config()

    def test_overrides_apply(self):
        run = parse_run_config("train.lr_hi = 5e-3\nsampling.scales = 2\n")
        assert run.train.lr_hi == 5e-3
        assert run.sampling.scales == 2
        assert run.train.lr_lo == 1e-5  # untouched default

    def test_unknown_key_reports_line(self):
        with pytest.raises(ConfigError, match=":2: unknown config key"):
            parse_run_config("train.lr_hi = 1e-3\nbogus.key = 1\n")

    def test_bad_value_reports_line(self):
        with pytest.raises(ConfigError, match=":1: bad value"):
            parse_run_config("train.epochs_hi = soon\n")

    def test_comments_and_blanks_ignored(self):
        run = parse_run_config("# comment\n\ntrain.seed = 9  # trailing\n")
        assert run.train.seed == 9

    def test_cross_field_consistency_enforced(self):
        with pytest.raises(ConfigError, match="power of two"):
            parse_run_config("sampling.base_segments = 10\n")

    def test_model_config_view(self):
        run = parse_run_config("model.branch = pool\n")
        cfg = run.model_config(num_classes=7)
        assert cfg.num_classes == 7 and cfg.branch == "pool"


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """synth -> train -> detect artifacts shared by the CLI tests."""
    root = tmp_path_factory.mktemp("pipeline")
    conf = root / "quick.conf"
    conf.write_text(QUICK_CONF)
    data = root / "data"
    assert main(["synth", "--out", str(data), "--seed", "7", "--videos", "6",
                 "--classes", "3", "--config", str(conf), "--emit-frames"]) == 0
    ckpt = root / "model.dtpm"
    assert main(["train", "--corpus", str(data / "corpus.json"),
                 "--features-dir", str(data / "features"),
                 "--out", str(ckpt), "--config", str(conf), "--seed", "1"]) == 0
    dets = root / "dets.json"
    assert main(["detect", "--checkpoint", str(ckpt),
                 "--corpus", str(data / "corpus.json"),
                 "--features-dir", str(data / "features"),
                 "--out", str(dets)]) == 0
    return root, conf, data, ckpt, dets


class TestCliPipeline:
    def test_synth_wrote_corpus_and_features(self, pipeline):
        _, _, data, _, _ = pipeline
        doc = json.loads((data / "corpus.json").read_text())
        assert len(doc["videos"]) == 6
        feature_files = sorted((data / "features").glob("*.dtpf"))
        assert len(feature_files) == 6
        pyramid = read_features(feature_files[0])
        assert pyramid.num_scales == 3 and pyramid.dim == 8

    def test_extract_runs_and_is_idempotent(self, pipeline):
        root, conf, data, _, _ = pipeline
        out1, out2 = root / "ex1", root / "ex2"
        for out in (out1, out2):
            assert main(["extract", "--corpus", str(data / "corpus.json"),
                         "--frames-dir", str(data / "frames"),
                         "--out-dir", str(out), "--seed", "3",
                         "--config", str(conf)]) == 0
        for f1 in sorted(out1.glob("*.dtpf")):
            f2 = out2 / f1.name
            assert f1.read_bytes() == f2.read_bytes()

    def test_extract_jobs_parallel_matches_serial(self, pipeline):
        root, conf, data, _, _ = pipeline
        serial, parallel = root / "exs", root / "exp"
        for out, jobs in ((serial, "1"), (parallel, "2")):
            assert main(["extract", "--corpus", str(data / "corpus.json"),
                         "--frames-dir", str(data / "frames"),
                         "--out-dir", str(out), "--seed", "3",
                         "--config", str(conf), "--jobs", jobs]) == 0
        for f1 in sorted(serial.glob("*.dtpf")):
            assert f1.read_bytes() == (parallel / f1.name).read_bytes()

    def test_extract_passthrough_reemits_features(self, pipeline):
        root, conf, data, _, _ = pipeline
        out = root / "through"
        assert main(["extract", "--corpus", str(data / "corpus.json"),
                     "--features-in", str(data / "features"),
                     "--out-dir", str(out), "--config", str(conf)]) == 0
        for f in sorted(out.glob("*.dtpf")):
            assert f.read_bytes() == (data / "features" / f.name).read_bytes()

    def test_extract_missing_frames_names_video(self, pipeline, capsys):
        root, conf, data, _, _ = pipeline
        empty = root / "noframes"
        empty.mkdir(exist_ok=True)
        code = main(["extract", "--corpus", str(data / "corpus.json"),
                     "--frames-dir", str(empty),
                     "--out-dir", str(root / "exx"), "--config", str(conf)])
        assert code == 1
        assert "video_000" in capsys.readouterr().err

    def test_train_determinism_across_runs(self, pipeline):
        root, conf, data, ckpt, _ = pipeline
        again = root / "model2.dtpm"
        assert main(["train", "--corpus", str(data / "corpus.json"),
                     "--features-dir", str(data / "features"),
                     "--out", str(again), "--config", str(conf),
                     "--seed", "1"]) == 0
        assert ckpt.read_bytes() == again.read_bytes()

    def test_train_writes_loss_log(self, pipeline):
        root, _, _, ckpt, _ = pipeline
        log = Path(f"{ckpt}.losses.csv").read_text().strip().splitlines()
        assert log[0] == "epoch,mean_loss"
        assert len(log) == 1 + 3  # header + epochs_hi + epochs_lo

    def test_train_missing_feature_file_preflight(self, pipeline, capsys):
        root, conf, data, _, _ = pipeline
        holey = root / "holey"
        holey.mkdir(exist_ok=True)
        for f in list(sorted((data / "features").glob("*.dtpf")))[:-1]:
            (holey / f.name).write_bytes(f.read_bytes())
        code = main(["train", "--corpus", str(data / "corpus.json"),
                     "--features-dir", str(holey),
                     "--out", str(root / "nope.dtpm"), "--config", str(conf)])
        assert code == 1
        assert "missing feature files" in capsys.readouterr().err

    def test_detect_output_sorted_and_bounded(self, pipeline):
        _, _, data, _, dets = pipeline
        doc = json.loads(dets.read_text())
        assert doc["version"] == "dtpn-1"
        for entries in doc["results"].values():
            scores = [e["score"] for e in entries]
            assert scores == sorted(scores, reverse=True)
            assert len(entries) <= 100

    def test_detect_top_k_one(self, pipeline):
        root, _, data, ckpt, _ = pipeline
        out = root / "topk.json"
        assert main(["detect", "--checkpoint", str(ckpt),
                     "--corpus", str(data / "corpus.json"),
                     "--features-dir", str(data / "features"),
                     "--out", str(out), "--top-k", "1"]) == 0
        for entries in json.loads(out.read_text())["results"].values():
            assert len(entries) <= 1

    def test_detect_zeroed_checkpoint_high_floor_is_empty(self, pipeline):
        root, _, data, _, _ = pipeline
        cfg = ModelConfig(num_classes=3, scales=3, base_segments=8,
                          feature_dim=8, branch_filters=4)
        model = PyramidDetector(cfg, seed=0)
        for _, layer in model.parameters():
            layer.w[:] = 0
            layer.b[:] = 0
        zero_ckpt = root / "zero.dtpm"
        model.save(zero_ckpt)
        out = root / "zero.json"
        assert main(["detect", "--checkpoint", str(zero_ckpt),
                     "--corpus", str(data / "corpus.json"),
                     "--features-dir", str(data / "features"),
                     "--out", str(out), "--score-floor", "0.2"]) == 0
        assert all(v == [] for v in json.loads(out.read_text())["results"].values())

    def test_detect_config_mismatch_lists_both_headers(self, pipeline, capsys):
        root, _, data, _, _ = pipeline
        other = PyramidDetector(
            ModelConfig(num_classes=3, scales=3, base_segments=8,
                        feature_dim=16, branch_filters=4),
            seed=0,
        )
        bad_ckpt = root / "bad.dtpm"
        other.save(bad_ckpt)
        code = main(["detect", "--checkpoint", str(bad_ckpt),
                     "--corpus", str(data / "corpus.json"),
                     "--features-dir", str(data / "features"),
                     "--out", str(root / "bad.json")])
        assert code == 1
        err = capsys.readouterr().err
        assert "d=8" in err and "d=16" in err

    def test_eval_ground_truth_replay_scores_one(self, pipeline, capsys, tmp_path):
        _, _, data, _, _ = pipeline
        corpus_doc = json.loads((data / "corpus.json").read_text())
        results = {}
        for video in corpus_doc["videos"]:
            results[video["id"]] = [
                {"label": ann["label"], "score": 1.0, "segment": ann["segment"]}
                for ann in video["annotations"]
            ]
        replay = tmp_path / "replay.json"
        replay.write_text(json.dumps({"version": "dtpn-1", "results": results}))
        report_json = tmp_path / "report.json"
        pr_csv = tmp_path / "pr.csv"
        assert main(["eval", "--detections", str(replay),
                     "--corpus", str(data / "corpus.json"),
                     "--report-json", str(report_json),
                     "--pr-csv", str(pr_csv)]) == 0
        out = capsys.readouterr().out
        assert "average mAP over 10 thresholds: 1.0000" in out
        doc = json.loads(report_json.read_text())
        assert doc["average_map"] == pytest.approx(1.0)
        header = pr_csv.read_text().splitlines()[0]
        assert header == "label,tiou_threshold,recall,precision"

    def test_eval_empty_detections_scores_zero(self, pipeline, capsys, tmp_path):
        _, _, data, _, _ = pipeline
        empty = tmp_path / "empty.json"
        empty.write_text(json.dumps({"version": "dtpn-1", "results": {}}))
        assert main(["eval", "--detections", str(empty),
                     "--corpus", str(data / "corpus.json")]) == 0
        assert "average mAP over 10 thresholds: 0.0000" in capsys.readouterr().out

    def test_eval_unknown_video_id_exits_one(self, pipeline, tmp_path, capsys):
        _, _, data, _, _ = pipeline
        bogus = tmp_path / "bogus.json"
        bogus.write_text(json.dumps(
            {"version": "dtpn-1",
             "results": {"ghost": [{"label": "activity_0", "score": 0.5,
                                    "segment": [0.0, 1.0]}]}}
        ))
        assert main(["eval", "--detections", str(bogus),
                     "--corpus", str(data / "corpus.json")]) == 1
        assert "unknown video" in capsys.readouterr().err

    def test_gradcheck_passes_and_prints_per_layer(self, capsys):
        assert main(["gradcheck", "--size", "tiny"]) == 0
        out = capsys.readouterr().out
        assert "end_to_end_loss" in out
        assert "FAIL" not in out

    def test_gradcheck_numerical_failure_exits_two(self, capsys, monkeypatch):
        import dtpn.kernels as kernels

        true_backward = kernels.conv1d_backward

        def flipped(x, w, stride, pad_left, pad_right, gy):
            gx, gw, gb = true_backward(x, w, stride, pad_left, pad_right, gy)
            return gx, -gw, gb

        monkeypatch.setattr(kernels, "conv1d_backward", flipped)
        assert main(["gradcheck"]) == 2
        captured = capsys.readouterr()
        assert "FAIL" in captured.out
        assert "numerical failure" in captured.err

    def test_synth_determinism(self, pipeline, tmp_path):
        root, conf, data, _, _ = pipeline
        rerun = tmp_path / "again"
        assert main(["synth", "--out", str(rerun), "--seed", "7", "--videos", "6",
                     "--classes", "3", "--config", str(conf)]) == 0
        assert (rerun / "corpus.json").read_text() == (data / "corpus.json").read_text()
        for f in sorted((rerun / "features").glob("*.dtpf")):
            assert f.read_bytes() == (data / "features" / f.name).read_bytes()
