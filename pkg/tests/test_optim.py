import math

import numpy as np
import pytest

from elseg.optim import Nadam, NadamConfig


def scalar_nadam_first_step(w, g, lr=1e-3, b1=0.9, b2=0.999, eps=1e-8):
    """First Nadam step on a scalar, written out longhand."""
    mu1 = b1 * (1 - 0.5 * 0.96 ** (1 / 250))
    mu2 = b1 * (1 - 0.5 * 0.96 ** (2 / 250))
    m = (1 - b1) * g
    v = (1 - b2) * g * g
    m_hat = mu2 * m / (1 - mu1 * mu2) + (1 - mu1) * g / (1 - mu1)
    v_hat = v / (1 - b2)
    return w - lr * m_hat / (math.sqrt(v_hat) + eps)


class TestNadam:
    def test_zero_gradient_leaves_params(self, rng):
        p = {"a": rng.normal(size=(3, 4)), "b": rng.normal(size=5)}
        before = {k: v.copy() for k, v in p.items()}
        Nadam().step(p, {k: np.zeros_like(v) for k, v in p.items()})
        for k in p:
            np.testing.assert_array_equal(p[k], before[k])

    def test_first_step_scalar_oracle(self):
        p = {"w": np.array([0.7])}
        opt = Nadam()
        opt.step(p, {"w": np.array([1.0])})
        assert abs(p["w"][0] - scalar_nadam_first_step(0.7, 1.0)) < 1e-15
        assert opt.step_count == 1

    def test_symmetry(self, rng):
        g = rng.normal(size=(4, 4))
        p = {"a": np.ones((4, 4)), "b": np.ones((4, 4))}
        opt = Nadam()
        for _ in range(5):
            opt.step(p, {"a": g, "b": g})
        np.testing.assert_array_equal(p["a"], p["b"])

    def test_update_bounded(self, rng):
        p = {"w": np.zeros(1000)}
        opt = Nadam()
        for _ in range(300):
            before = p["w"].copy()
            opt.step(p, {"w": rng.uniform(-1, 1, 1000)})
            assert np.max(np.abs(p["w"] - before)) <= 10 * opt.config.lr

    def test_quadratic_convergence(self):
        w = {"w": np.ones(10)}
        opt = Nadam(NadamConfig(lr=0.02))
        f0 = 0.5 * np.sum(w["w"] ** 2)
        for _ in range(200):
            opt.step(w, {"w": w["w"].copy()})
        assert 0.5 * np.sum(w["w"] ** 2) <= 0.01 * f0

    def test_deterministic(self, rng):
        grads = [rng.normal(size=(3, 3)) for _ in range(10)]
        out = []
        for _ in range(2):
            p = {"w": np.full((3, 3), 0.5, np.float32)}
            opt = Nadam()
            for g in grads:
                opt.step(p, {"w": g})
            out.append(p["w"].tobytes())
        assert out[0] == out[1]

    @pytest.mark.parametrize("bad", [np.nan, np.inf])
    def test_non_finite_gradient_names_parameter(self, bad):
        p = {"enc0.conv0.w": np.zeros(3), "final.b": np.zeros(2)}
        with pytest.raises(FloatingPointError, match="final.b"):
            Nadam().step(p, {"enc0.conv0.w": np.zeros(3), "final.b": np.array([0.0, bad])})
        np.testing.assert_array_equal(p["enc0.conv0.w"], 0.0)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError, match="shape"):
            Nadam().step({"w": np.zeros(3)}, {"w": np.zeros(4)})

    def test_step_increments(self):
        opt = Nadam()
        p = {"w": np.zeros(2)}
        for t in range(1, 4):
            opt.step(p, {"w": np.ones(2)})
            assert opt.step_count == t

    def test_schedule(self):
        opt = Nadam()
        assert opt.mu(0) == pytest.approx(0.45)
        assert opt.mu(250) == pytest.approx(0.9 * (1 - 0.5 * 0.96))
        assert opt.mu(10 ** 6) == pytest.approx(0.9)

    def test_clip_norm(self):
        p = {"w": np.zeros(2)}
        q = {"w": np.zeros(2)}
        Nadam(NadamConfig(clip_norm=1.0)).step(p, {"w": np.array([30.0, 40.0])})
        Nadam().step(q, {"w": np.array([0.6, 0.8])})
        np.testing.assert_allclose(p["w"], q["w"], rtol=1e-12)

    def test_state_round_trip(self, rng):
        p = {"w": rng.normal(size=4)}
        opt = Nadam()
        for _ in range(3):
            opt.step(p, {"w": rng.normal(size=4)})
        clone = Nadam()
        clone.load_state_arrays(opt.state_arrays())
        assert clone.step_count == 3
        np.testing.assert_array_equal(clone.m["w"], opt.m["w"])
        np.testing.assert_array_equal(clone.v["w"], opt.v["w"])
