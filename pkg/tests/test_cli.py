import csv
import os

import numpy as np
import pytest

from petnet import gradcheck as G
from petnet.cli import cmd_gradcheck, main
from petnet.modelio import save_model
from petnet.network import build_toy_cnn, build_unet
from petnet.pgm import read_pgm, write_pgm
from petnet.training import dice

SEG = """
dataset.count = 20
dataset.height = 16
dataset.width = 16
model.architecture = unet
model.base_channels = 2
model.depth = 1
training.learning_rate = 0.1
training.batch_size = 4
training.max_epochs = 3
"""

TOY = """
dataset.count = 12
dataset.height = 16
dataset.width = 16
dataset.task = classification
dataset.balanced = true
model.architecture = toy_cnn
model.filters = 2
model.fc_width = 4
training.batch_size = 4
training.max_epochs = 3
"""


def run(tmp_path, text, *args, name="run"):
    cfg = tmp_path / f"{name}.cfg"
    cfg.write_text(text)
    return main(["--config", str(cfg), "--out", str(tmp_path / name), *args])


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


class TestGenerate:
    def test_writes_files(self, tmp_path):
        assert run(tmp_path, "dataset.count = 10\ndataset.height = 16\ndataset.width = 16\n", "generate") == 0
        rows = read_csv(tmp_path / "run" / "manifest.csv")
        assert rows[0] == ["index", "image_path", "mask_path", "class_label", "clean_path"]
        assert len(rows) == 11
        for row in rows[1:]:
            for rel in (row[1], row[2], row[4]):
                assert read_pgm(tmp_path / "run" / rel).shape == (1, 16, 16)

    def test_rerun_byte_identical(self, tmp_path):
        text = "dataset.count = 4\ndataset.height = 16\ndataset.width = 16\n"
        run(tmp_path, text, "generate", name="a")
        run(tmp_path, text, "generate", name="b")
        files = sorted(os.listdir(tmp_path / "a" / "data"))
        assert files == sorted(os.listdir(tmp_path / "b" / "data")) and len(files) == 12
        for f in files:
            assert (tmp_path / "a" / "data" / f).read_bytes() == (tmp_path / "b" / "data" / f).read_bytes()
        assert (tmp_path / "a" / "manifest.csv").read_bytes() == (tmp_path / "b" / "manifest.csv").read_bytes()

    def test_invalid_height_writes_nothing(self, tmp_path):
        assert run(tmp_path, "dataset.height = 8\n", "generate") == 2
        assert not (tmp_path / "run").exists()

    def test_echoes_effective_config(self, tmp_path, capsys):
        run(tmp_path, "dataset.count = 2\ndataset.height = 16\ndataset.width = 16\n", "generate")
        out = capsys.readouterr().out
        assert "training.patience = 5" in out and "dataset.count = 2" in out


class TestTrain:
    def test_outputs_and_determinism(self, tmp_path, capsys):
        assert run(tmp_path, TOY, "train", name="a") == 0
        assert run(tmp_path, TOY, "train", name="b") == 0
        a, b = tmp_path / "a", tmp_path / "b"
        assert (a / "report.csv").read_bytes() == (b / "report.csv").read_bytes()
        assert (a / "model.pnm").read_bytes() == (b / "model.pnm").read_bytes()
        assert (a / "loss_curve.png").stat().st_size > 0
        rows = read_csv(a / "report.csv")
        assert rows[0] == ["epoch", "train_loss", "val_loss"] and len(rows) == 4
        out = capsys.readouterr().out
        assert "final validation loss" in out and "train accuracy" in out

    def test_overfit_config_logs_full_accuracy(self, tmp_path, capsys):
        text = ("dataset.count = 16\ndataset.height = 16\ndataset.width = 16\ndataset.task = classification\n"
                "dataset.balanced = true\ndataset.train_fraction = 1\ndataset.val_fraction = 0\n"
                "dataset.test_fraction = 0\nmodel.architecture = toy_cnn\ntraining.learning_rate = 0.05\n"
                "training.batch_size = 4\ntraining.max_epochs = 200\ntraining.patience = 200\n")
        assert run(tmp_path, text, "train") == 0
        assert "train accuracy: 1\n" in capsys.readouterr().out

    def test_seed_flag_changes_run(self, tmp_path):
        run(tmp_path, TOY, "train", name="a")
        (tmp_path / "b.cfg").write_text(TOY)
        main(["--config", str(tmp_path / "b.cfg"), "--out", str(tmp_path / "b"), "--seed", "9", "train"])
        assert (tmp_path / "a" / "report.csv").read_bytes() != (tmp_path / "b" / "report.csv").read_bytes()

    def test_incompatible_head_and_loss(self, tmp_path):
        text = TOY + "model.head = softmax\nmodel.classes = 2\ntraining.loss_kind = binary_cross_entropy\n"
        assert run(tmp_path, text, "train") == 2

    def test_head_task_mismatch(self, tmp_path):
        assert run(tmp_path, TOY.replace("classification", "segmentation"), "train") == 2

    def test_from_manifest(self, tmp_path):
        run(tmp_path, SEG, "generate", name="gen")
        text = SEG + f"paths.manifest = {tmp_path / 'gen' / 'manifest.csv'}\ntraining.max_epochs = 1\n"
        assert run(tmp_path, text.replace("training.max_epochs = 3\n", ""), "train") == 0


class TestEvaluate:
    def test_dice_recomputed_from_dumped_masks(self, tmp_path):
        assert run(tmp_path, SEG, "train") == 0
        assert run(tmp_path, SEG, "evaluate", "--dump-predictions") == 0
        rows = read_csv(tmp_path / "run" / "metrics.csv")
        assert rows[0] == ["fold", "dice", "pixel_accuracy"]
        reported = float(rows[1][1])
        # the test split is 15% of 20 = 3 samples; rebuild their true masks independently
        from petnet.data import SplitSpec, generate_phantoms, split

        _, _, test = split(generate_phantoms(20, 16, 16), SplitSpec(0.7, 0.15, 0.15, 0))
        masks = [read_pgm(tmp_path / "run" / "predictions" / f"{i:04d}_mask.pgm") for i in range(len(test))]
        assert np.isclose(np.mean([dice(m, t.mask) for m, t in zip(masks, test)]), reported, rtol=0, atol=1e-15)
        assert (tmp_path / "run" / "predictions.png").exists()

    def test_all_folds_rows(self, tmp_path):
        text = TOY + "dataset.count = 15\ntraining.max_epochs = 1\ntraining.batch_size = 2\n"
        text = text.replace("dataset.count = 12\n", "").replace("training.max_epochs = 3\n", "")
        text = text.replace("training.batch_size = 4\n", "")
        assert run(tmp_path, text, "evaluate", "--split", "all-folds") == 0
        rows = read_csv(tmp_path / "run" / "metrics.csv")
        assert [r[0] for r in rows[1:]] == ["0", "1", "2", "3", "4", "mean"]
        assert np.isclose(float(rows[-1][1]), np.mean([float(r[1]) for r in rows[1:-1]]))
        assert (tmp_path / "run" / "fold_metrics.png").exists()

    def test_memorized_training_set(self, tmp_path):
        from petnet.data import generate_phantoms, make_dataset
        from petnet.training import TrainConfig, train

        data = make_dataset(generate_phantoms(12, 16, 16, balanced=True), "classification")
        best, _ = train(build_toy_cnn(16, 16), data, data,
                        TrainConfig(learning_rate=0.05, batch_size=4, max_epochs=200, patience=200))
        save_model(best, tmp_path / "m.pnm")
        # every sample lands in the test split
        text = TOY + "dataset.train_fraction = 0\ndataset.val_fraction = 0\ndataset.test_fraction = 1\n"
        assert run(tmp_path, text, "evaluate", "--model", str(tmp_path / "m.pnm")) == 0
        assert read_csv(tmp_path / "run" / "metrics.csv")[1] == ["test", "1"]

    def test_missing_model(self, tmp_path):
        assert run(tmp_path, SEG, "evaluate", "--model", str(tmp_path / "nope.pnm")) == 3


class TestPredict:
    def test_zero_weight_sigmoid(self, tmp_path):
        model = build_unet(16, 16, 2, 1)
        for w in model.parameters().values():
            w[...] = 0.0
        save_model(model, tmp_path / "m.pnm")
        write_pgm(np.full((1, 16, 16), 3.0), tmp_path / "in.pgm", 32.0)
        args = ["predict", "--model", str(tmp_path / "m.pnm"), "--input", str(tmp_path / "in.pgm")]
        assert main(args + ["--output", str(tmp_path / "out.pgm")]) == 0
        assert not read_pgm(tmp_path / "out.pgm").any()
        raw = np.frombuffer((tmp_path / "out_prob.pgm").read_bytes()[-512:], dtype=">u2")
        assert np.all(raw == 32768)  # 0.5 * 65535 rounded half-to-even
        assert main(args + ["--output", str(tmp_path / "again.pgm")]) == 0
        assert (tmp_path / "again.pgm").read_bytes() == (tmp_path / "out.pgm").read_bytes()
        assert (tmp_path / "again_prob.pgm").read_bytes() == (tmp_path / "out_prob.pgm").read_bytes()

    def test_softmax_text(self, tmp_path):
        save_model(build_toy_cnn(16, 16, head="softmax", classes=4, seed=3), tmp_path / "m.pnm")
        write_pgm(np.full((1, 16, 16), 1.0), tmp_path / "in.pgm", 32.0)
        assert main(["predict", "--model", str(tmp_path / "m.pnm"), "--input", str(tmp_path / "in.pgm"),
                     "--output", str(tmp_path / "p.txt")]) == 0
        lines = (tmp_path / "p.txt").read_text().splitlines()
        assert lines[0] == "class,probability" and len(lines) == 5
        assert abs(sum(float(line.split(",")[1]) for line in lines[1:]) - 1.0) < 1e-12

    def test_linear_output_image(self, tmp_path):
        save_model(build_unet(16, 16, 2, 1, head="linear", use_bn=False), tmp_path / "m.pnm")
        write_pgm(np.full((1, 16, 16), 1.0), tmp_path / "in.pgm", 32.0)
        assert main(["predict", "--model", str(tmp_path / "m.pnm"), "--input", str(tmp_path / "in.pgm"),
                     "--output", str(tmp_path / "o.pgm")]) == 0
        assert read_pgm(tmp_path / "o.pgm").shape == (1, 16, 16)

    def test_dimension_mismatch(self, tmp_path, capsys):
        save_model(build_unet(16, 16, 2, 1), tmp_path / "m.pnm")
        write_pgm(np.zeros((1, 8, 16)), tmp_path / "in.pgm", 1.0)
        assert main(["predict", "--model", str(tmp_path / "m.pnm"), "--input", str(tmp_path / "in.pgm"),
                     "--output", str(tmp_path / "o.pgm")]) == 3
        err = capsys.readouterr().err
        assert "(1, 8, 16)" in err and "(1, 16, 16)" in err
        assert not (tmp_path / "o.pgm").exists()


class TestGradcheck:
    def test_fresh_build_passes(self, capsys):
        assert main(["gradcheck"]) == 0
        out = capsys.readouterr().out
        table = [line.split()[0] for line in out.splitlines() if line and line.split()[0] in G.REGISTRY]
        assert sorted(table) == sorted(G.REGISTRY)

    def test_broken_layer_fails(self, monkeypatch):
        import petnet.layers as L

        real = L._BACKWARD["sigmoid"]
        monkeypatch.setitem(L._BACKWARD, "sigmoid", lambda c, g: (-real(c, g)[0], {}))
        assert cmd_gradcheck(end_to_end=[]) == 5

    def test_missing_registration_fails(self):
        registry = {k: v for k, v in G.REGISTRY.items() if k != "upsample"}
        assert cmd_gradcheck(registry, end_to_end=[]) == 5


def test_config_error_exit_code(tmp_path):
    assert run(tmp_path, "training.learning_rate = -1\n", "train") == 2
    assert run(tmp_path, "trainin.learning_rate = 0.01\n", "train") == 2
