import hashlib

import numpy as np
import pytest

from elseg import elnet, losses, volgrad as vg
from elseg.elnet import ELNet, NetworkConfig, CheckpointError
from elseg.losses import LossConfig

from conftest import rel_err


def count_by_layer(levels, base, convs, labels, in_channels=1, deep_supervision=True):
    """Per-layer parameter tally, written independently of the builder."""
    ch = [base * 2 ** i for i in range(levels)]

    def block(cin, n, k):
        total = cin * 27 * n + n + 2 * n
        total += (k - 1) * (n * 27 * n + n + 2 * n)
        return total + cin * n + n

    total = 0
    cin = in_channels
    for lv in range(levels):
        total += block(cin, ch[lv], convs[lv])
        cin = ch[lv]
    for lv in range(levels - 1):
        total += ch[lv + 1] * ch[lv] + ch[lv]
        total += block(2 * ch[lv], ch[lv], convs[lv])
    if deep_supervision:
        total += sum(ch[lv] * labels + labels for lv in range(1, levels - 1))
    return total + ch[0] * labels + labels


def tiny_config(**kw):
    cfg = dict(levels=2, base_channels=2, max_channels=None, convs=(1, 2), num_labels=3, extent=8)
    cfg.update(kw)
    return NetworkConfig(**cfg)


class TestConfig:
    def test_desk_defaults(self):
        cfg = elnet.desk_config()
        assert cfg.channels == (6, 12, 24, 48)
        assert (cfg.num_labels, cfg.extent, cfg.convs) == (5, 32, (1, 2, 3, 3))

    @pytest.mark.parametrize("kw, match", [
        ({"convs": (3, 2, 1, 1)}, "non-decreasing"),
        ({"max_channels": 24}, "doubling"),
        ({"extent": 12}, "divisible"),
        ({"convs": (1, 2, 3)}, "entries"),
        ({"dropout_rate": 1.0}, "dropout"),
        ({"num_labels": 1}, "num_labels"),
    ])
    def test_invalid(self, kw, match):
        with pytest.raises(ValueError, match=match):
            NetworkConfig(**kw)

    def test_dict_round_trip(self):
        cfg = elnet.paper_config()
        assert NetworkConfig.from_dict(cfg.to_dict()) == cfg


class TestParamCount:
    def test_paper_scale(self):
        cfg = elnet.paper_config()
        n = elnet.param_count(cfg)
        assert 3_000_000 <= n <= 8_000_000
        assert n == count_by_layer(4, 24, (1, 2, 3, 3), 20)
        assert n == 4_498_308

    def test_desk_scale(self):
        n = elnet.param_count(elnet.desk_config())
        assert n == count_by_layer(4, 6, (1, 2, 3, 3), 5)
        assert n == 282_195

    def test_without_deep_supervision(self):
        cfg = elnet.desk_config(deep_supervision=False)
        assert elnet.param_count(cfg) == count_by_layer(4, 6, (1, 2, 3, 3), 5, deep_supervision=False)

    def test_instance_matches_shapes(self):
        cfg = tiny_config(levels=3, convs=(1, 1, 2))
        assert ELNet(cfg).param_count() == elnet.param_count(cfg)


class TestForward:
    def test_desk_output(self, rng):
        net = ELNet(elnet.desk_config(), seed=0)
        x = rng.normal(size=(1, 32, 32, 32)).astype(np.float32)
        probs = net.predict_probs(x)
        assert probs.shape == (5, 32, 32, 32)
        np.testing.assert_allclose(probs.sum(axis=0), 1.0, atol=1e-5)
        assert np.all(probs >= 0)

    def test_batch_axis_accepted(self, rng):
        net = ELNet(tiny_config(), seed=0)
        x = rng.normal(size=(1, 8, 8, 8))
        np.testing.assert_array_equal(net.predict_probs(x), net.predict_probs(x[None]))

    def test_wrong_shape(self):
        with pytest.raises(ValueError, match="expected"):
            ELNet(tiny_config()).predict_probs(np.zeros((1, 4, 4, 4)))

    def test_training_needs_rng(self):
        with pytest.raises(ValueError, match="rng"):
            ELNet(tiny_config()).forward(np.zeros((1, 8, 8, 8)), training=True)

    def test_same_seed_same_network(self, rng):
        x = rng.normal(size=(1, 8, 8, 8))
        a, b = ELNet(tiny_config(), seed=3), ELNet(tiny_config(), seed=3)
        np.testing.assert_array_equal(a.predict_probs(x), b.predict_probs(x))
        c = ELNet(tiny_config(), seed=4)
        assert not np.array_equal(a.predict_probs(x), c.predict_probs(x))

    def test_inference_is_deterministic_and_noise_free(self, rng):
        net = ELNet(tiny_config(noise_sigma=0.5, dropout_rate=0.5), seed=0)
        x = rng.normal(size=(1, 8, 8, 8))
        np.testing.assert_array_equal(net.predict_probs(x), net.predict_probs(x))

    def test_training_updates_batchnorm_moments(self, rng):
        net = ELNet(tiny_config(), seed=0)
        before = net.bn_state["enc0.bn0"].mean.copy()
        net.forward(rng.normal(size=(1, 8, 8, 8)) + 3.0, training=True, rng=rng)
        assert not np.array_equal(before, net.bn_state["enc0.bn0"].mean)

    def test_deep_supervision_heads(self):
        cfg = tiny_config(levels=3, convs=(1, 1, 2))
        names = set(ELNet(cfg).params)
        assert "head1.w" in names and "head2.w" not in names
        cfg = tiny_config(levels=3, convs=(1, 1, 2), supervise_deepest=True)
        assert "head2.w" in set(ELNet(cfg).params)


def _sum_log_prob(net, x, labels, rng_seed):
    probs = net.forward(x, training=True, rng=np.random.default_rng(rng_seed))
    weights = -losses.one_hot(labels, net.config.num_labels)
    return vg.scalar_loss(vg.log(probs), lambda a: (float(np.sum(a * weights)), weights))


def _fused_combined(net, x, labels, rng_seed):
    cfg = LossConfig(label_weights=[1.0, 2.0, 3.0])
    logits = net.logits(x, training=True, rng=np.random.default_rng(rng_seed))
    return vg.scalar_loss(logits, lambda z: losses.compute_loss_logits(z, labels, cfg))


class TestNetworkGradient:
    @pytest.mark.parametrize("seed", [0, 1, 2])
    @pytest.mark.parametrize("loss_fn, cfg_kw", [
        (_sum_log_prob, dict(levels=2, convs=(1, 2))),
        (_fused_combined, dict(levels=3, convs=(1, 1, 2))),
    ], ids=["sum_log_prob", "combined"])
    def test_tiny_network_matches_finite_differences(self, seed, loss_fn, cfg_kw):
        rng = np.random.default_rng(seed)
        net = ELNet(tiny_config(dropout_rate=0.2, **cfg_kw), seed=seed, dtype=np.float64)
        x = rng.normal(size=(1, 8, 8, 8))
        labels = rng.integers(0, 3, (8, 8, 8))

        grads = vg.backward(loss_fn(net, x, labels, seed + 7), net.params)
        analytic, numeric = [], []
        h = 1e-6
        for name, p in net.params.items():
            flat = p.data.reshape(-1)
            for i in rng.choice(flat.size, size=min(flat.size, 12), replace=False):
                orig = flat[i]
                flat[i] = orig + h
                fp = float(loss_fn(net, x, labels, seed + 7).data)
                flat[i] = orig - h
                fm = float(loss_fn(net, x, labels, seed + 7).data)
                flat[i] = orig
                numeric.append((fp - fm) / (2 * h))
                analytic.append(grads[name].reshape(-1)[i])
        assert rel_err(analytic, numeric) < 1e-3


class TestCheckpoint:
    def test_round_trip_bit_exact(self, tmp_path, rng):
        net = ELNet(tiny_config(), seed=2)
        net.forward(rng.normal(size=(1, 8, 8, 8)), training=True, rng=rng)
        opt_state = {"optim.step": np.array([3.0], np.float32), "optim.m.final.b": np.arange(3, dtype=np.float32)}
        path = elnet.save_checkpoint(tmp_path / "a.ckpt", net, opt_state)
        loaded, state = elnet.load_checkpoint(path)
        assert loaded.config == net.config
        for k in net.params:
            assert loaded.params[k].data.tobytes() == net.params[k].data.tobytes()
        for k in net.bn_state:
            np.testing.assert_array_equal(loaded.bn_state[k].mean, net.bn_state[k].mean)
            np.testing.assert_array_equal(loaded.bn_state[k].var, net.bn_state[k].var)
        np.testing.assert_array_equal(state["optim.m.final.b"], [0, 1, 2])
        elnet.save_checkpoint(tmp_path / "b.ckpt", loaded, state)
        digest = [hashlib.sha256((tmp_path / n).read_bytes()).hexdigest() for n in ("a.ckpt", "b.ckpt")]
        assert digest[0] == digest[1]

    def test_bad_magic(self, tmp_path):
        p = tmp_path / "x.ckpt"
        p.write_bytes(b"NOTCKPT" + bytes(20))
        with pytest.raises(CheckpointError, match="magic"):
            elnet.load_checkpoint(p)

    def test_truncated(self, tmp_path):
        data = elnet.checkpoint_bytes(ELNet(tiny_config()))
        p = tmp_path / "x.ckpt"
        p.write_bytes(data[:-5])
        with pytest.raises(CheckpointError):
            elnet.load_checkpoint(p)

    def test_trailing_bytes(self, tmp_path):
        data = elnet.checkpoint_bytes(ELNet(tiny_config()))
        p = tmp_path / "x.ckpt"
        p.write_bytes(data + b"\0")
        with pytest.raises(CheckpointError):
            elnet.load_checkpoint(p)
