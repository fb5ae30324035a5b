import json
import re

import pytest

from resmasknet.cli import _train_config, build_parser, main
from resmasknet.data import class_histogram, parse_fer_csv, read_image, synthetic_dataset, write_pgm


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    """Synthetic CSV, one short mini training run and a test image."""
    root = tmp_path_factory.mktemp("cli")
    assert main(["synth", "--out", str(root / "data.csv"), "--train", "28", "--val", "14", "--test", "14"]) == 0
    assert main(["train", "--mini", "--data", str(root / "data.csv"), "--out", str(root / "run"), "--epochs", "2"]) == 0
    px = synthetic_dataset(7, seed=9).pixels[3]
    write_pgm(root / "face.pgm", px)
    return root


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


def accuracy_line(text):
    return float(re.search(r"accuracy ([0-9.]+)", text).group(1))


class TestTrain:
    def test_outputs(self, workdir):
        run_dir = workdir / "run"
        assert {p.name for p in run_dir.iterdir()} == {
            "best.ckpt", "summary.json", "train_log.csv", "training_curves.png"
        }
        summary = json.loads((run_dir / "summary.json").read_text())
        assert set(summary) >= {"config", "epochs", "best_epoch", "best_val_acc", "checkpoint"}
        assert summary["config"]["lr0"] == 0.0001 and summary["config"]["batch_size"] == 48
        assert summary["spec"]["input_size"] == 64

    def test_default_config(self):
        args = build_parser().parse_args(["train", "--data", "d.csv", "--out", "o"])
        cfg = _train_config(args)
        assert (cfg.lr0, cfg.batch_size, cfg.max_epochs) == (1e-4, 48, 50)

    def test_precedence(self, tmp_path):
        cfg_file = tmp_path / "c.json"
        cfg_file.write_text(json.dumps({"lr0": 0.5, "batch_size": 8, "momentum": 0.5}))
        args = build_parser().parse_args(["train", "--data", "d", "--out", "o", "--config", str(cfg_file), "--lr", "0.2"])
        cfg = _train_config(args)
        assert (cfg.lr0, cfg.batch_size, cfg.momentum, cfg.max_epochs) == (0.2, 8, 0.5, 50)

    def test_unknown_config_key(self, tmp_path, capsys):
        cfg_file = tmp_path / "c.json"
        cfg_file.write_text('{"learning_rate": 1}')
        code, _, err = run(capsys, "train", "--data", "x.csv", "--out", tmp_path / "o", "--config", cfg_file)
        assert code == 1 and err.startswith("error:") and "learning_rate" in err

    def test_missing_data_is_usage_error(self, capsys):
        with pytest.raises(SystemExit) as info:
            main(["train", "--out", "o"])
        assert info.value.code == 2
        assert "error:" in capsys.readouterr().err

    def test_bad_csv(self, tmp_path, capsys):
        bad = tmp_path / "bad.csv"
        bad.write_text("emotion,pixels,Usage\n0,1 2 3,Training\n")
        code, _, err = run(capsys, "train", "--data", bad, "--out", tmp_path / "o", "--mini")
        assert code == 1 and err.startswith("error: line 2:")

    @pytest.mark.slow
    def test_mini_overfits(self, tmp_path, capsys):
        data = tmp_path / "d.csv"
        run(capsys, "synth", "--out", data, "--train", "64", "--val", "28")
        code, out, _ = run(capsys, "train", "--mini", "--data", data, "--out", tmp_path / "r", "--epochs", "30", "--lr", "0.01")
        assert code == 0
        assert json.loads((tmp_path / "r" / "summary.json").read_text())["train_acc"] >= 0.95

    def test_f64_runs_are_identical(self, tmp_path, capsys):
        data = tmp_path / "d.csv"
        run(capsys, "synth", "--out", data, "--train", "7", "--val", "7")
        logs = []
        for i in range(2):
            out = tmp_path / f"r{i}"
            code, *_ = run(capsys, "train", "--mini", "--data", data, "--out", out, "--epochs", "1",
                           "--precision", "f64", "--seed", "3", "--batch", "7")
            assert code == 0
            logs.append((out / "train_log.csv").read_text())
        assert logs[0] == logs[1]


class TestEval:
    def test_matches_logged_train_accuracy(self, workdir, capsys):
        code, out, _ = run(capsys, "eval", "--data", workdir / "data.csv", "--split", "train",
                           "--ckpt", workdir / "run" / "best.ckpt", "--out", workdir / "ev")
        assert code == 0
        summary = json.loads((workdir / "run" / "summary.json").read_text())
        assert abs(accuracy_line(out) - summary["train_acc"]) <= 1e-6

    def test_confusion_csv_rows_sum_to_class_counts(self, workdir, capsys):
        code, out, _ = run(capsys, "eval", "--data", workdir / "data.csv", "--split", "test",
                           "--ckpt", workdir / "run" / "best.ckpt", "--out", workdir / "ev")
        assert code == 0
        rows = (workdir / "ev" / "confusion_test.csv").read_text().splitlines()[1:]
        sums = [sum(map(int, r.split(",")[1:])) for r in rows]
        ds = parse_fer_csv(workdir / "data.csv")
        assert sums == class_histogram(ds, "test").tolist()
        assert (workdir / "ev" / "confusion_test.png").stat().st_size > 0
        assert "Neutral" in out

    def test_ensemble_of_one_checkpoint_twice(self, workdir, capsys):
        ckpt = workdir / "run" / "best.ckpt"
        _, single, _ = run(capsys, "eval", "--data", workdir / "data.csv", "--ckpt", ckpt, "--out", workdir / "e1")
        code, twice, _ = run(capsys, "ensemble", "--data", workdir / "data.csv", "--ckpt", ckpt, ckpt, "--out", workdir / "e2")
        assert code == 0 and accuracy_line(twice) == accuracy_line(single)
        assert (workdir / "e1" / "confusion_test.csv").read_text() == (workdir / "e2" / "confusion_test.csv").read_text()

    def test_architecture_mismatch(self, workdir, tmp_path, capsys):
        from resmasknet.checkpoint import save_checkpoint
        from resmasknet.model import NetworkSpec, build_network

        other = save_checkpoint(build_network(NetworkSpec(input_size=64, channels=(4, 4, 4, 4), blocks=(1, 1, 1, 1),
                                                          depths=(1, 1, 1, 1))), tmp_path / "o.ckpt")
        code, _, err = run(capsys, "ensemble", "--data", workdir / "data.csv",
                           "--ckpt", workdir / "run" / "best.ckpt", other, "--out", tmp_path)
        assert code == 1 and "architecture" in err

    def test_corrupt_checkpoint(self, workdir, tmp_path, capsys):
        bad = tmp_path / "bad.ckpt"
        bad.write_bytes(b"NOPE" + bytes(20))
        code, _, err = run(capsys, "eval", "--data", workdir / "data.csv", "--ckpt", bad, "--out", tmp_path)
        assert code == 1 and err.startswith("error:") and "magic" in err


class TestInferAndGradcam:
    def test_infer(self, workdir, capsys):
        code, out, _ = run(capsys, "infer", "--image", workdir / "face.pgm", "--ckpt", workdir / "run" / "best.ckpt")
        assert code == 0
        probs = [float(line.split()[1]) for line in out.splitlines()[:7]]
        assert len(probs) == 7 and abs(sum(probs) - 1) <= 1e-6
        assert out.splitlines()[-1].startswith("prediction ")

    def test_gradcam_writes_ppm(self, workdir, tmp_path, capsys):
        out = tmp_path / "cam.ppm"
        code, text, _ = run(capsys, "gradcam", "--image", workdir / "face.pgm", "--ckpt", workdir / "run" / "best.ckpt",
                            "--class", "3", "--out", out)
        assert code == 0 and "stage4.last_conv" in text
        assert out.read_bytes()[:2] == b"P6"
        assert read_image(out).shape == (48, 48, 3)

    def test_gradcam_fused(self, workdir, tmp_path, capsys):
        code, text, _ = run(capsys, "gradcam", "--image", workdir / "face.pgm", "--ckpt", workdir / "run" / "best.ckpt",
                            "--class", "0", "--out", tmp_path / "f.ppm", "--fused")
        assert code == 0 and "(stage4," in text

    def test_class_out_of_range(self, workdir, tmp_path, capsys):
        code, _, err = run(capsys, "gradcam", "--image", workdir / "face.pgm", "--ckpt", workdir / "run" / "best.ckpt",
                           "--class", "9", "--out", tmp_path / "x.ppm")
        assert code == 1 and err.startswith("error:") and "0-6" in err and "6=Neutral" in err
        assert not (tmp_path / "x.ppm").exists()

    def test_unreadable_image(self, workdir, tmp_path, capsys):
        junk = tmp_path / "junk.pgm"
        junk.write_bytes(b"not an image")
        code, _, err = run(capsys, "infer", "--image", junk, "--ckpt", workdir / "run" / "best.ckpt")
        assert code == 1 and err.startswith("error:")


class TestInspect:
    def test_default_table(self, capsys):
        code, out, _ = run(capsys, "inspect", "--spec", "default")
        assert code == 0
        for size in ["64×112×112", "64×56×56", "128×28×28", "256×14×14", "512×7×7", "512×1×1"]:
            assert size in out
        m = re.search(r"total parameters (\d+) \(([0-9.]+)x10\^6\)", out)
        assert m and abs(int(m.group(1)) / 1e6 - float(m.group(2))) < 0.01

    def test_backbone_only(self, capsys):
        code, out, _ = run(capsys, "inspect", "--spec", "default", "--backbone-only")
        n = int(re.search(r"total parameters (\d+)", out).group(1))
        assert code == 0 and abs(n / 21.2e6 - 1) <= 0.05

    def test_checkpoint(self, workdir, capsys):
        code, out, _ = run(capsys, "inspect", "--ckpt", workdir / "run" / "best.ckpt")
        assert code == 0 and "8×16×16" in out


def test_stats(workdir, tmp_path, capsys):
    code, out, _ = run(capsys, "stats", "--data", workdir / "data.csv", "--out", tmp_path / "s")
    assert code == 0
    assert out.splitlines()[1] == "train,4,4,4,4,4,4,4,28"
    assert (tmp_path / "s" / "class_counts.png").exists()


def test_writes_stay_inside_out(workdir, tmp_path, monkeypatch, capsys):
    cwd = tmp_path / "cwd"
    cwd.mkdir()
    monkeypatch.chdir(cwd)
    out = tmp_path / "out"
    ckpt = workdir / "run" / "best.ckpt"
    before = sorted(p.name for p in workdir.rglob("*"))
    run(capsys, "train", "--mini", "--data", workdir / "data.csv", "--out", out / "t", "--epochs", "1")
    run(capsys, "eval", "--data", workdir / "data.csv", "--ckpt", ckpt, "--out", out / "e")
    run(capsys, "gradcam", "--image", workdir / "face.pgm", "--ckpt", ckpt, "--class", "1", "--out", out / "g.ppm")
    run(capsys, "infer", "--image", workdir / "face.pgm", "--ckpt", ckpt)
    run(capsys, "inspect", "--ckpt", ckpt)
    assert list(cwd.iterdir()) == []
    assert sorted(p.name for p in workdir.rglob("*")) == before
    assert sorted(p.name for p in tmp_path.iterdir()) == ["cwd", "out"]
