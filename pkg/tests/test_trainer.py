import hashlib
import json
import math

import numpy as np
import pytest

from elseg import dataio, trainer
from elseg.dataio import LabelMap, Manifest, Volume
from elseg.elnet import ELNet, NetworkConfig, desk_config
from elseg.losses import LossConfig
from elseg.synth import PhantomSpec, generate_dataset
from elseg.trainer import TrainRun

SMALL_NET = dict(levels=3, base_channels=2, max_channels=None, convs=(1, 1, 2), num_labels=3, extent=16)


@pytest.fixture(scope="module")
def small_manifest(tmp_path_factory):
    root = tmp_path_factory.mktemp("small")
    spec = PhantomSpec(extent=16, num_labels=3, fractions=(0.2, 0.02))
    return generate_dataset(spec, 6, root, seed=0, n_sets=2)


def small_run(**kw):
    kw.setdefault("epochs", 2)
    return TrainRun(network=NetworkConfig(**SMALL_NET), **kw)


def sha(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


class TestHardDice:
    def test_identical_maps(self, rng):
        a = rng.integers(0, 4, (5, 5, 5))
        a[0, 0, 0] = 3
        d = trainer.hard_dice(a, a, 5)
        assert d[:4] == [1.0] * 4 and d[4] is None

    def test_hand_count(self):
        pred = np.zeros(10, int)
        gt = np.zeros(10, int)
        pred[:2] = 1
        gt[:4] = 1
        assert trainer.hard_dice(pred, gt, 2)[1] == pytest.approx(4 / 6)

    def test_absent_from_one_is_zero(self):
        assert trainer.hard_dice(np.array([0, 1]), np.array([0, 0]), 2)[1] == 0.0

    def test_symmetric(self, rng):
        for _ in range(10):
            a, b = rng.integers(0, 4, 50), rng.integers(0, 4, 50)
            assert trainer.hard_dice(a, b, 4) == trainer.hard_dice(b, a, 4)

    def test_absent_excluded_from_mean(self):
        assert trainer.mean_present([1.0, None, 0.5]) == 0.75
        assert trainer.aggregate_subjects({"a": [1.0, None], "b": [0.0, 0.5]}, 2) == [0.5, 0.5]


class TestPredict:
    def test_argmax_of_one_hot(self, rng):
        labels = rng.integers(0, 4, (3, 4, 5))
        probs = (np.arange(4).reshape(4, 1, 1, 1) == labels[None]).astype(float)
        np.testing.assert_array_equal(trainer.argmax_labels(probs), labels)

    def test_ties_go_to_lowest(self):
        assert trainer.argmax_labels(np.full((3, 1, 1, 1), 1 / 3))[0, 0, 0] == 0

    def test_repeatable_and_fast(self, rng):
        net = ELNet(desk_config(), seed=0)
        vol = Volume(rng.normal(size=(32, 32, 32)))
        a, seconds = trainer.predict(net, vol)
        b, _ = trainer.predict(net, vol)
        np.testing.assert_array_equal(a.data, b.data)
        assert seconds < 5.0

    def test_from_checkpoint(self, tmp_path, rng):
        from elseg.elnet import save_checkpoint

        net = ELNet(NetworkConfig(**SMALL_NET), seed=1)
        path = save_checkpoint(tmp_path / "m.ckpt", net)
        vol = rng.normal(size=(16, 16, 16))
        np.testing.assert_array_equal(trainer.predict(path, vol)[0].data, trainer.predict(net, vol)[0].data)

    def test_extent_mismatch(self):
        with pytest.raises(ValueError, match="extent"):
            trainer.predict(ELNet(NetworkConfig(**SMALL_NET)), np.zeros((8, 8, 8)))


class TestTrain:
    def test_desk_smoke(self, tmp_path):
        generate_dataset(PhantomSpec(), 2, tmp_path, seed=0)
        m = Manifest.load_file(tmp_path / "manifest.json")
        m.splits = [(["s000"], ["s001"])]
        res = trainer.train(TrainRun(epochs=1), m)
        assert len(res.log) == 1 and math.isfinite(res.log[0].train_loss)
        assert len(res.log[0].val_dice) == 5

    def test_log_and_files(self, small_manifest, tmp_path):
        res = trainer.train(small_run(epochs=3, out_dir=tmp_path), small_manifest)
        assert [r.epoch for r in res.log] == [1, 2, 3]
        rows = trainer.read_csv_log(tmp_path / "log.csv")
        assert list(rows[0]) == ["epoch", "train_loss", "val_dice_mean", "val_dice_label_0",
                                 "val_dice_label_1", "val_dice_label_2", "seconds"]
        assert len(rows) == 3
        assert float(rows[2]["train_loss"]) == res.log[2].train_loss
        assert (tmp_path / "final.ckpt").is_file() and (tmp_path / "best.ckpt").is_file()

    def test_deterministic_checkpoints(self, small_manifest, tmp_path):
        trainer.train(small_run(seed=3, out_dir=tmp_path / "a"), small_manifest)
        trainer.train(small_run(seed=3, out_dir=tmp_path / "b"), small_manifest)
        trainer.train(small_run(seed=4, out_dir=tmp_path / "c"), small_manifest)
        assert sha(tmp_path / "a/final.ckpt") == sha(tmp_path / "b/final.ckpt")
        assert sha(tmp_path / "a/final.ckpt") != sha(tmp_path / "c/final.ckpt")

    def test_validation_never_touches_updates(self, small_manifest, tmp_path, monkeypatch):
        touched = []
        real = dataio.read_mvol

        def audit(path):
            touched.append(str(path))
            return real(path)

        monkeypatch.setattr(dataio, "read_mvol", audit)
        trainer.train(small_run(out_dir=tmp_path / "noval", validate=False), small_manifest)
        train_ids, val_ids = small_manifest.split(0)
        assert touched
        for path in touched:
            assert not any(f"{sid}.mvol" in path for sid in val_ids)
        trainer.train(small_run(out_dir=tmp_path / "val"), small_manifest)
        assert sha(tmp_path / "noval/final.ckpt") == sha(tmp_path / "val/final.ckpt")

    def test_non_finite_loss_aborts(self, small_manifest, monkeypatch):
        monkeypatch.setattr(trainer, "compute_loss_logits", lambda z, y, c: (float("nan"), np.zeros_like(z)))
        with pytest.raises(FloatingPointError, match=r"epoch 1, subject s\d+"):
            trainer.train(small_run(), small_manifest)

    def test_label_weights_from_training_split(self, small_manifest):
        train_ids, _ = small_manifest.split(0)
        lc = trainer.resolve_loss(LossConfig(), small_manifest, train_ids)
        f = dataio.label_frequencies(small_manifest, train_ids)
        np.testing.assert_allclose(lc.label_weights, np.sqrt(1 / f))
        fixed = LossConfig(label_weights=[1, 1, 1])
        assert trainer.resolve_loss(fixed, small_manifest, train_ids) is fixed

    def test_preprocesses_other_extents(self, tmp_path):
        generate_dataset(PhantomSpec(extent=20, num_labels=3, fractions=(0.2, 0.02)), 4, tmp_path, seed=1, n_sets=1)
        m = Manifest.load_file(tmp_path / "manifest.json")
        res = trainer.train(small_run(epochs=1), m)
        assert len(res.log) == 1


class TestSuite:
    def test_aggregation_shape(self, small_manifest, tmp_path):
        configs = {"linear_dice": LossConfig(kind="linear_dice"), "exp_log": LossConfig()}
        reports = trainer.run_experiment_suite(
            configs, small_manifest, n_sets=2, network=NetworkConfig(**SMALL_NET), epochs=1, out_dir=tmp_path)
        assert list(reports) == ["linear_dice", "exp_log"]
        for r in reports.values():
            assert len(r.sets) == 2 and len(r.label_mean) == 3
            assert all(s is None or s >= 0 for s in r.label_std)
            assert all(m is None or 0 <= m <= 1 for m in r.label_mean)
        table = (tmp_path / "table.md").read_text().splitlines()
        assert len(table) == 4 and table[2].startswith("| linear_dice |")
        saved = json.loads((tmp_path / "report.json").read_text())
        assert set(saved) == set(configs)
        assert (tmp_path / "exp_log/set1/result.json").is_file()
        assert (tmp_path / "dice_vs_epoch.svg").is_file() and (tmp_path / "loss_vs_epoch.svg").is_file()

    def test_duplicated_sets_have_zero_std(self, small_manifest, tmp_path):
        m = Manifest.load_file(small_manifest.root / "manifest.json")
        m.splits = [m.splits[0], m.splits[0]]
        m.save(tmp_path / "manifest.json")
        for sub in ("images", "labels"):
            (tmp_path / sub).symlink_to(small_manifest.root / sub)
        reports = trainer.run_experiment_suite(
            {"exp_log": LossConfig()}, tmp_path / "manifest.json", n_sets=2,
            network=NetworkConfig(**SMALL_NET), epochs=1, set_seeds=[5, 5])
        r = reports["exp_log"]
        assert all(s in (None, 0.0) for s in r.label_std)
        assert r.average_std == 0.0

    def test_too_many_sets(self, small_manifest):
        with pytest.raises(ValueError, match="splits"):
            trainer.run_experiment_suite({"a": LossConfig()}, small_manifest, n_sets=3)

    def test_table_format(self):
        r = trainer.build_report("x", [
            {"label_mean": [0.9, 0.5], "average": 0.5},
            {"label_mean": [0.7, None], "average": None},
        ], 2)
        assert r.label_mean[0] == pytest.approx(0.8) and r.label_std[0] == pytest.approx(0.1)
        assert r.label_mean[1] == 0.5 and r.label_std[1] == 0.0
        assert "| x | 80±10 | 50±0 | 50±0 |" in trainer.comparison_table({"x": r}, ["bg", "fg"])


def test_label_map_round_trip_through_predict(rng):
    lab = LabelMap(rng.integers(0, 3, (4, 4, 4)), 3)
    assert trainer.hard_dice(lab, lab, 3) == [1.0, 1.0, 1.0]
