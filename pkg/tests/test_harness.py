"""Training harness: schedule, metrics, data, optimizer, configs, model files and CLI."""
import subprocess
import sys
from dataclasses import replace

import numpy as np
import pytest

from oracles import numeric_grad, rel_err
from sdconv.cli import main
from sdconv.harness.config import (
    ConfigError,
    DataConfig,
    LayerConfig,
    ModelConfig,
    TrainConfig,
    desk_model,
    dump_config,
    paper_encoder,
    parse_config,
    resolve,
)
from sdconv.harness.data import synth_dataset
from sdconv.harness.metrics import confusion_matrix, iou, mean_iou
from sdconv.harness.model import SegmentationModel, softmax_cross_entropy
from sdconv.harness.train import SGD, TrainingDiverged, poly_lr, train, write_log

TINY = ModelConfig(layers=(LayerConfig(rate=2, channels=4, smoothing="SS"),
                           LayerConfig(rate=4, channels=4, smoothing="GI")),
                   d_k=4, d_o=4, heads=1, window=3)


@pytest.fixture(scope="module")
def tiny_data():
    return synth_dataset(11, 8, size=32)


class TestPolyLR:
    cfg = TrainConfig(initial_lr=0.00025, max_iter=1000)

    def test_start_and_end(self):
        assert poly_lr(0, self.cfg) == 0.00025
        assert poly_lr(1000, self.cfg) == 0.0

    def test_midpoint(self):
        assert poly_lr(500, self.cfg) == pytest.approx(1.3397e-4, rel=1e-4)
        assert poly_lr(500, self.cfg) == pytest.approx(0.00025 * 0.5**0.9, rel=1e-14)

    def test_past_end_rejected(self):
        with pytest.raises(ValueError):
            poly_lr(1001, self.cfg)


class TestMetrics:
    def test_hand_counts(self):
        # class 1: TP = 3, FP = 1, FN = 2
        pred = np.array([1, 1, 1, 1, 0, 0, 0])
        truth = np.array([1, 1, 1, 0, 1, 1, 0])
        assert iou(pred, truth, 1, 2) == 0.5

    def test_perfect_prediction(self):
        labels = np.random.default_rng(0).integers(0, 3, size=(6, 6))
        assert mean_iou(labels, labels, 5) == 1.0

    def test_disjoint_class(self):
        assert iou(np.array([0, 0, 1]), np.array([1, 1, 0]), 1, 2) == 0.0

    def test_absent_class_excluded(self):
        pred = np.array([0, 0, 1, 1])
        assert mean_iou(pred, pred, 4) == 1.0
        assert np.isnan(iou(pred, pred, 3, 4))

    def test_prediction_only_class_counts_as_zero(self):
        assert mean_iou(np.array([0, 2]), np.array([0, 0]), 3) == pytest.approx((0.5 + 0.0) / 2)

    def test_relabeling_invariance(self):
        rng = np.random.default_rng(1)
        pred, truth = rng.integers(0, 4, size=(2, 20, 20))
        perm = np.array([2, 0, 3, 1])
        assert mean_iou(perm[pred], perm[truth], 4) == pytest.approx(mean_iou(pred, truth, 4), rel=1e-15)

    def test_confusion_layout(self):
        cm = confusion_matrix(np.array([1, 0, 1]), np.array([0, 0, 1]), 2)
        np.testing.assert_array_equal(cm, [[1, 1], [0, 1]])

    @pytest.mark.parametrize("pred,truth", [([0, 5], [0, 1]), ([0, 1], [0, -1])])
    def test_unknown_class_rejected(self, pred, truth):
        with pytest.raises(ValueError):
            mean_iou(np.array(pred), np.array(truth), 3)

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError):
            mean_iou(np.zeros(3, int), np.zeros(4, int), 2)


class TestSynthData:
    def test_deterministic(self):
        a, b = synth_dataset(3, 5), synth_dataset(3, 5)
        for s, t in zip(a, b):
            assert s.image.tobytes() == t.image.tobytes()
            assert s.labels.tobytes() == t.labels.tobytes()

    def test_empty(self):
        assert synth_dataset(0, 0) == []

    @pytest.mark.parametrize("classes", [2, 4, 7])
    def test_every_class_present(self, classes):
        data = synth_dataset(5, 10, size=48, classes=classes)
        counts = np.bincount(np.concatenate([s.labels.ravel() for s in data]), minlength=classes)
        assert len(counts) == classes and (counts > 0).all()

    def test_ranges(self):
        s = synth_dataset(1, 1)[0]
        assert s.image.shape == (1, 1, 64, 64) and s.labels.shape == (64, 64)
        assert 0.0 <= s.image.min() and s.image.max() <= 1.0

    @pytest.mark.parametrize("kwargs", [dict(size=16), dict(classes=1)])
    def test_bad_arguments(self, kwargs):
        with pytest.raises(ValueError):
            synth_dataset(0, 1, **kwargs)


class TestSGD:
    def test_vanilla_step_on_scalar_model(self):
        # y = w x, loss (w x - t)^2 / 2 at w=2, x=3, t=1 -> g = 15
        w = np.array([2.0])
        opt = SGD({"w": w}, momentum=0.0, weight_decay=0.0)
        opt.step({"w": np.array([(2.0 * 3 - 1) * 3])}, lr=0.01)
        assert w[0] == pytest.approx(1.85, abs=1e-15)

    def test_momentum_and_decay(self):
        w = np.array([2.0])
        opt = SGD({"w": w}, momentum=0.9, weight_decay=0.1)
        g = {"w": np.array([15.0])}
        opt.step(g, 0.01)
        assert w[0] == pytest.approx(1.848, abs=1e-14)
        opt.step(g, 0.01)
        assert w[0] == pytest.approx(1.559352, abs=1e-14)

    def test_bias_not_decayed(self):
        b = np.array([2.0])
        SGD({"enc0.bias": b}, momentum=0.0, weight_decay=0.1).step({"enc0.bias": np.array([15.0])}, 0.01)
        assert b[0] == pytest.approx(1.85, abs=1e-15)


class TestLoss:
    def test_gradient(self):
        rng = np.random.default_rng(3)
        logits = rng.standard_normal((2, 3, 2, 2))
        labels = rng.integers(0, 3, size=(2, 2, 2))
        loss, grad = softmax_cross_entropy(logits, labels)
        assert loss > 0
        assert rel_err(grad, numeric_grad(lambda v: softmax_cross_entropy(v, labels)[0], logits)) < 1e-6

    def test_uniform_logits(self):
        loss, _ = softmax_cross_entropy(np.zeros((1, 4, 3, 3)), np.zeros((1, 3, 3), int))
        assert loss == pytest.approx(np.log(4), rel=1e-15)


class TestTrain:
    cfg = TrainConfig(initial_lr=0.01, max_iter=4, batch=2, crop=16, seed=3)

    def test_zero_lr_keeps_parameters(self, tiny_data):
        model = SegmentationModel.build(TINY, seed=0)
        before = {k: v.copy() for k, v in model.params().items()}
        train(model, tiny_data, replace(self.cfg, initial_lr=0.0, weight_decay=0.0))
        for k, v in model.params().items():
            np.testing.assert_array_equal(v, before[k])

    def test_deterministic_logs(self, tiny_data):
        a = train(TINY, tiny_data[:6], self.cfg, tiny_data[6:])
        b = train(TINY, tiny_data[:6], self.cfg, tiny_data[6:])
        assert a.log == b.log
        assert [r["iter"] for r in a.log] == [3, 4]
        assert all(np.isfinite(r["loss"]) for r in a.log)

    def test_parameters_move(self, tiny_data):
        model = SegmentationModel.build(TINY, seed=0)
        before = {k: v.copy() for k, v in model.params().items()}
        train(model, tiny_data, self.cfg)
        assert any(not np.array_equal(v, before[k]) for k, v in model.params().items())

    def test_nan_aborts(self, tiny_data):
        bad = [replace(s, image=np.full_like(s.image, np.nan)) for s in tiny_data[:2]]
        with pytest.raises(TrainingDiverged, match="iteration 0"):
            train(TINY, bad, self.cfg)

    def test_csv_log(self, tmp_path):
        path = write_log([dict(iter=1, lr=0.1, loss=2.0, miou=0.5)], tmp_path / "m.csv")
        assert path.read_text().splitlines() == ["iter,lr,loss,miou", "1,0.1,2.0,0.5"]


class TestConfig:
    def test_parse(self):
        flat = parse_config("# c\nlayer.0.rate = 2  # trailing\n\n train.seed=4\n")
        assert flat == {"layer.0.rate": "2", "train.seed": "4"}

    @pytest.mark.parametrize("text,match", [("oops\n", "key = value"), ("a = 1\na = 2\n", "duplicate"),
                                            (" = 3\n", "empty key")])
    def test_parse_errors(self, text, match):
        with pytest.raises(ConfigError, match=match):
            parse_config(text)

    def test_layers_replace_encoder(self):
        p = resolve("desk", {"layer.0.rate": "3", "layer.0.channels": "5", "model.window": "7"})
        assert p.model.layers == (LayerConfig(rate=3, channels=5),)
        assert p.model.window == 7

    @pytest.mark.parametrize("flat", [
        {"model.bogus": "1"}, {"train.max_iter": "many"}, {"layer.1.rate": "2"},
        {"layer.0.rate": "1", "layer.0.smoothing": "SS"}, {"model.window": "4"},
        {"data.holdout": "500"}, {"layer.0.smoothing": "XX"},
    ])
    def test_invalid(self, flat):
        with pytest.raises(ConfigError):
            resolve("desk", flat)

    def test_unknown_preset(self):
        with pytest.raises(ConfigError):
            resolve("nope")

    def test_round_trip(self):
        model = desk_model("GI")
        assert ModelConfig.from_flat(parse_config(dump_config(model.to_flat()))) == model

    def test_presets(self):
        assert len(paper_encoder().layers) == 26
        desk = desk_model()
        assert [l.rate for l in desk.layers] == [2, 2, 2, 2, 4, 4]
        assert DataConfig() == DataConfig(n=200, size=64, holdout=40)


class TestModelFile:
    def test_save_load_round_trip(self, tmp_path):
        model = SegmentationModel.build(TINY, seed=5)
        for v in model.params().values():  # move smoothing weights off identity
            v += 0.01
        model.save(tmp_path / "m")
        loaded = SegmentationModel.load(tmp_path / "m")
        assert loaded.config == TINY
        for k, v in model.params().items():
            np.testing.assert_array_equal(loaded.params()[k], v)
        x = np.random.default_rng(0).uniform(size=(1, 1, 16, 16))
        np.testing.assert_array_equal(loaded.forward(x), model.forward(x))

    def test_manifest_mismatch(self, tmp_path):
        SegmentationModel.build(TINY).save(tmp_path / "m")
        manifest = tmp_path / "m" / "weights.manifest"
        manifest.write_text("\n".join(manifest.read_text().splitlines()[:-1]) + "\n")
        with pytest.raises(ValueError):
            SegmentationModel.load(tmp_path / "m")

    def test_largefov_head(self):
        cfg = replace(TINY, output="largefov", largefov_rate=3, largefov_hidden=6)
        model = SegmentationModel.build(cfg)
        assert model.forward(np.zeros((1, 1, 12, 12))).shape == (1, 4, 12, 12)
        assert "head.largefov.filters" in model.params()


class TestCLI:
    def test_params_gi(self, capsys):
        assert main(["params", "--preset", "paper-encoder", "--method", "GI"]) == 0
        assert capsys.readouterr().out.strip() == "1136"

    def test_params_ss(self, capsys):
        assert main(["params", "--preset", "paper-encoder", "--method", "SS"]) == 0
        assert capsys.readouterr().out.strip() == "354"

    def test_params_audit(self, capsys):
        assert main(["params", "--preset", "paper-encoder"]) == 0
        out = capsys.readouterr().out
        assert "9,437,696" in out and "37,750,784" in out and "FAIL" not in out

    def test_verify(self, capsys):
        assert main(["verify", "--seed", "7"]) == 0
        assert "FAIL" not in capsys.readouterr().out

    def test_gradcheck(self, capsys):
        assert main(["gradcheck"]) == 0

    @pytest.mark.parametrize("method,expected", [("none", "holes inside receptive field: 56"),
                                                 ("SS", "holes inside receptive field: 0")])
    def test_erf(self, capsys, tmp_path, method, expected):
        assert main(["erf", "--preset", "cascade", "--method", method, "--out", str(tmp_path)]) == 0
        assert expected in capsys.readouterr().out
        assert (tmp_path / f"erf_cascade_{method}.pgm").exists()
        assert (tmp_path / f"erf_cascade_{method}.t4").exists()

    def test_malformed_config_exits_2(self, tmp_path):
        bad = tmp_path / "bad.cfg"
        bad.write_text("model.window = 4\n")
        assert main(["train", "--config", str(bad)]) == 2
        bad.write_text("no equals sign\n")
        assert main(["params", "--config", str(bad)]) == 2
        assert main(["params", "--config", str(tmp_path / "missing.cfg")]) == 2

    def test_bad_flag_exits_2(self):
        with pytest.raises(SystemExit) as exc:
            main(["params", "--method", "XX"])
        assert exc.value.code == 2

    def test_train_then_eval(self, tmp_path, capsys):
        cfg = tmp_path / "short.cfg"
        cfg.write_text("train.max_iter = 3\ndata.n = 10\ndata.holdout = 2\ntrain.crop = 16\n"
                       "model.window = 3\n")
        out = tmp_path / "run"
        assert main(["train", "--config", str(cfg), "--out", str(out), "--seed", "2"]) == 0
        trained = capsys.readouterr().out
        assert (out / "metrics.csv").read_text().startswith("iter,lr,loss,miou")
        assert main(["eval", "--out", str(out)]) == 0
        final = trained.split("final held-out mean IoU ")[1].split()[0]
        assert f"held-out mean IoU {final}" in capsys.readouterr().out

    def test_eval_without_model(self, tmp_path):
        assert main(["eval", "--out", str(tmp_path)]) == 2

    def test_module_entry_point(self):
        proc = subprocess.run([sys.executable, "-m", "sdconv", "params", "--preset", "paper-encoder",
                               "--method", "SS"], capture_output=True, text=True, check=False)
        assert proc.returncode == 0 and proc.stdout.strip() == "354"
