import math

import numpy as np
import pytest

from htprior import cli, dataset, detector, hough
from htprior.hough import LineParam


@pytest.fixture
def tiny_data(tmp_path, monkeypatch):
    monkeypatch.setattr(dataset, "SPLITS", {"train": 8, "val": 4, "test": 4})
    out = tmp_path / "data"
    assert cli.main(["gen-data", "--seed", "5", "--out", str(out)]) == 0
    return out


def _run(capsys, argv):
    code = cli.main(argv)
    cap = capsys.readouterr()
    return code, cap.out, cap.err


def _train(tmp_path, data, model="local_global"):
    cfg = tmp_path / f"{model}.cfg"
    cfg.write_text(f"model = {model}\ndata = {data}\nout = {tmp_path / model}\nepochs = 2\n"
                   "lr = 3e-2\nbatch_size = 4\n")
    assert cli.main(["train", "--config", str(cfg)]) == 0
    return tmp_path / model / "best.htp"


def test_gen_data_refuses_overwrite(tiny_data, capsys):
    code, _, err = _run(capsys, ["gen-data", "--seed", "5", "--out", str(tiny_data)])
    assert code == 1 and err.startswith("error:") and "--force" in err


def test_gen_data_force_and_determinism(tiny_data, capsys):
    before = dataset.manifest_digest(tiny_data)
    assert cli.main(["gen-data", "--seed", "5", "--out", str(tiny_data), "--force"]) == 0
    assert dataset.manifest_digest(tiny_data) == before
    assert len(dataset.load_split(tiny_data / "val")) == 4


def test_full_split_sizes(tmp_path):
    assert cli.main(["gen-data", "--seed", "0", "--out", str(tmp_path / "d")]) == 0
    assert {k: len(dataset.load_split(tmp_path / "d" / k)) for k in dataset.SPLITS} == dataset.SPLITS


def test_train_then_eval_twice(tmp_path, tiny_data, capsys):
    ckpt = _train(tmp_path, tiny_data)
    capsys.readouterr()
    code, first, _ = _run(capsys, ["eval", "--ckpt", str(ckpt), "--split", "test", "--data", str(tiny_data)])
    assert code == 0 and first.splitlines()[1].startswith("AP: ")
    csv = (ckpt.parent / "test_pr.csv").read_bytes()
    _, second, _ = _run(capsys, ["eval", "--ckpt", str(ckpt), "--split", "test", "--data", str(tiny_data)])
    assert first == second and (ckpt.parent / "test_pr.csv").read_bytes() == csv


def test_eval_zero_init_model(tmp_path, tiny_data, capsys):
    cfg = tmp_path / "z.cfg"
    cfg.write_text(f"model = global\ninit = zero\ndata = {tiny_data}\nout = {tmp_path / 'z'}\nepochs = 1\nlr = 0\n")
    assert cli.main(["train", "--config", str(cfg)]) == 0
    _, out, _ = _run(capsys, ["eval", "--ckpt", str(tmp_path / "z" / "best.htp"), "--split", "val"])
    assert "AP: 0.00%" in out


def test_eval_model_mismatch(tmp_path, tiny_data, capsys):
    ckpt = _train(tmp_path, tiny_data, "local")
    other = tmp_path / "other.cfg"
    other.write_text(f"model = global\ndata = {tiny_data}\n")
    code, _, err = _run(capsys, ["eval", "--ckpt", str(ckpt), "--config", str(other), "--split", "val"])
    assert code == 1 and err.startswith("error:") and "do not match" in err


def test_train_bad_config(tmp_path, capsys):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("model = local\nlearning_rate = 1\n")
    code, _, err = _run(capsys, ["train", "--config", str(cfg)])
    assert code == 1 and "learning_rate" in err and err.count("\n") == 1


def test_detect_classic(tmp_path, capsys):
    grid = hough.build_grid(100, 100)
    truth = LineParam(12.0, 1.1)
    dataset.write_pgm(tmp_path / "one.pgm", detector.rasterize_line(truth, grid))
    code, _, _ = _run(capsys, ["detect", "--image", str(tmp_path / "one.pgm"), "--mode", "classic",
                               "--k", "1", "--out", str(tmp_path / "o")])
    assert code == 0
    rows = (tmp_path / "o" / "one_lines.txt").read_text().splitlines()
    assert rows[0] == "rho theta score"
    rho, theta, score = map(float, rows[1].split())
    assert abs(rho - truth.rho) <= grid.rho_step and abs(theta - truth.theta) <= grid.theta_step
    assert dataset.read_pgm(tmp_path / "o" / "one_lines.pgm").any()


def test_detect_learned_blank(tmp_path, tiny_data, capsys):
    ckpt = _train(tmp_path, tiny_data)
    dataset.write_pgm(tmp_path / "blank.pgm", np.zeros((100, 100), np.uint8))
    code, _, _ = _run(capsys, ["detect", "--image", str(tmp_path / "blank.pgm"), "--mode", "learned",
                               "--ckpt", str(ckpt), "--out", str(tmp_path / "o")])
    assert code == 0
    assert not dataset.read_pgm(tmp_path / "o" / "blank_pred.pgm").any()


def test_detect_learned_needs_checkpoint(tmp_path, capsys):
    dataset.write_pgm(tmp_path / "blank.pgm", np.zeros((10, 10), np.uint8))
    code, _, err = _run(capsys, ["detect", "--image", str(tmp_path / "blank.pgm"), "--mode", "learned",
                                 "--out", str(tmp_path / "o")])
    assert code == 1 and err.startswith("error:") and "--ckpt" in err


def test_detect_missing_image(tmp_path, capsys):
    code, _, err = _run(capsys, ["detect", "--image", str(tmp_path / "nope.pgm"), "--out", str(tmp_path)])
    assert code == 1 and "nope.pgm" in err


@pytest.mark.parametrize("kind", ["local", "local_global", "block_variant_1"])
def test_gradcheck(kind, capsys):
    code, out, _ = _run(capsys, ["gradcheck", "--model", kind, "--seed", "0"])
    assert code == 0 and out.strip().endswith("ok")


def test_gradcheck_unknown(capsys):
    code, _, err = _run(capsys, ["gradcheck", "--model", "resnet"])
    assert code == 1 and err.startswith("error:")
