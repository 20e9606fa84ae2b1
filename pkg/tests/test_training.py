import numpy as np
import pytest

from htprior import dataset, training
from htprior.errors import ConfigurationError, LoadError
from htprior.tensor import load_checkpoint

TINY = {"train": 16, "val": 8}


@pytest.fixture(scope="module")
def tiny_splits():
    return dataset.generate_dataset(11, TINY)


def _cfg(tmp_path, **kw):
    base = dict(model="local_global", out=str(tmp_path / "run"), epochs=2, lr=3e-2, batch_size=4, patience=0)
    base.update(kw)
    return training.RunConfig(**base)


class TestConfig:
    def test_parse(self):
        cfg = training.parse_config("model = global  # the Hough-only model\n\n# comment\nlr=1e-3\nepochs = 7\n")
        assert (cfg.model, cfg.lr, cfg.epochs) == ("global", 1e-3, 7)

    def test_unknown_keys_listed(self):
        with pytest.raises(ConfigurationError, match="colour, speed"):
            training.parse_config("colour = red\nlr = 1\nspeed = 3\n")

    @pytest.mark.parametrize("text", ["epochs = many", "just words", "model = resnet", "batch_size = 0"])
    def test_invalid(self, text):
        with pytest.raises(ConfigurationError):
            training.parse_config(text)

    def test_round_trip(self):
        cfg = training.RunConfig(model="block_variant_2", lr=2e-4, lr_decay_epoch=25, data="d")
        assert training.parse_config(cfg.to_text()) == cfg

    def test_schedule(self):
        cfg = training.RunConfig(lr=4e-4, lr_decay_epoch=25, lr_decay=0.1)
        assert cfg.lr_at(24) == 4e-4 and cfg.lr_at(25) == pytest.approx(4e-5)

    def test_missing_file(self, tmp_path):
        with pytest.raises(LoadError):
            training.load_config(tmp_path / "none.cfg")


class TestTrain:
    def test_outputs(self, tmp_path, tiny_splits):
        r = training.train(_cfg(tmp_path), tiny_splits)
        names = {p.name for p in r.out_dir.iterdir()}
        assert {"best.htp", "last_state.htp", "run.cfg", "train_log.csv", "val_report.txt", "val_pr.csv"} <= names
        rows = (r.out_dir / "train_log.csv").read_text().splitlines()
        assert rows[0] == "epoch,train_loss,val_ap,lr" and len(rows) == 3

    def test_lr_zero_keeps_weights(self, tmp_path, tiny_splits):
        cfg = _cfg(tmp_path, lr=0.0, weight_decay=1e-4)
        training.train(cfg, tiny_splits)
        init = dict(training.model_from_config(cfg).state())
        best = load_checkpoint(tmp_path / "run" / "best.htp")
        for name, arr in init.items():
            assert best[name].tobytes() == arr.tobytes()

    def test_deterministic(self, tmp_path, tiny_splits):
        a = training.train(_cfg(tmp_path / "a"), tiny_splits).out_dir
        b = training.train(_cfg(tmp_path / "b"), tiny_splits).out_dir
        for name in ("best.htp", "last_state.htp", "train_log.csv", "val_report.txt", "val_pr.csv"):
            assert (a / name).read_bytes() == (b / name).read_bytes()

    def test_resume_reproduces_next_epoch(self, tmp_path, tiny_splits):
        full = training.train(_cfg(tmp_path / "full", epochs=3), tiny_splits)
        part = training.train(_cfg(tmp_path / "part", epochs=2), tiny_splits)
        resumed = training.train(_cfg(tmp_path / "part", epochs=3,
                                      resume=str(part.out_dir / "last_state.htp")), tiny_splits)
        assert resumed.history[2][1] == pytest.approx(full.history[2][1], rel=1e-6)
        a = load_checkpoint(full.out_dir / "last_state.htp")
        b = load_checkpoint(resumed.out_dir / "last_state.htp")
        for name in a:
            np.testing.assert_allclose(a[name], b[name], rtol=1e-6)

    def test_resume_needs_optimizer_state(self, tmp_path, tiny_splits):
        r = training.train(_cfg(tmp_path), tiny_splits)
        with pytest.raises(LoadError):
            training.train(_cfg(tmp_path, resume=str(r.out_dir / "best.htp")), tiny_splits)

    def test_early_stop(self, tmp_path, tiny_splits):
        r = training.train(_cfg(tmp_path, lr=0.0, epochs=10, patience=2), tiny_splits)
        assert len(r.history) == 3

    def test_load_trained(self, tmp_path, tiny_splits):
        r = training.train(_cfg(tmp_path, model="local"), tiny_splits)
        model, cfg = training.load_trained(r.out_dir / "best.htp")
        assert cfg.model == "local" and model.kind == "local"

    def test_needs_data(self, tmp_path):
        with pytest.raises(ConfigurationError):
            training.train(_cfg(tmp_path))

    @pytest.mark.slow
    def test_loss_decreases_first_epochs(self, tmp_path):
        splits = dataset.generate_dataset(0, {"train": 744, "val": 16})
        r = training.train(_cfg(tmp_path, epochs=5, batch_size=8), splits)
        losses = [h[1] for h in r.history]
        assert all(b < a for a, b in zip(losses, losses[1:]))


class TestGradcheck:
    @pytest.mark.parametrize("kind", ["local", "global", "local_global"])
    def test_exp1_models(self, kind):
        assert training.gradient_report(kind, seed=3) < 1e-3

    def test_detects_wrong_gradient(self):
        model, sample = training.gradcheck_setup("global", 0)
        original = model.loss

        def doubled(pred, target):
            from htprior.tensor import l2_loss, record
            loss = l2_loss(pred, target)
            return record(loss.data, [loss], lambda g: [2 * g])

        model.loss = doubled
        err = training.finite_diff_check(model, sample, training.GRADCHECK_DELTA)
        model.loss = original
        assert err > 0.3
