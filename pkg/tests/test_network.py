"""Network forward/backward against hand computations and finite differences."""

import math
import types

import numpy as np
import pytest

from shiftmdn.augment import MoExConfig, MoExPairing, augment_batch
from shiftmdn.betamix import SHAPE_MAX, SHAPE_MIN
from shiftmdn.errors import ConfigError, DataError, NumericalError
from shiftmdn.network import (
    NetworkConfig,
    _forward_cache,
    batch_loss,
    forward,
    init_weights,
    load_checkpoint,
    loss_and_gradients,
    predict,
    save_checkpoint,
    summaries_to_arrays,
    validate_weights,
)


def finite_difference_grads(config, weights, x, y, mix=None, h=1e-5):
    """Central-difference oracle over every weight entry."""
    out = {}
    for name, arr in weights.items():
        g = np.zeros_like(arr)
        it = np.nditer(arr, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            orig = arr[idx]
            arr[idx] = orig + h
            lp = batch_loss(config, weights, x, y, mix)
            arr[idx] = orig - h
            lm = batch_loss(config, weights, x, y, mix)
            arr[idx] = orig
            g[idx] = (lp - lm) / (2.0 * h)
        out[name] = g
    return out


def max_relative_error(analytic, oracle, abs_floor=1e-6):
    worst = 0.0
    for name in oracle:
        denom = np.maximum(np.abs(oracle[name]), abs_floor)
        worst = max(worst, np.max(np.abs(analytic[name] - oracle[name]) / denom))
    return worst


class TestInit:
    def test_deterministic_in_seed(self):
        cfg = NetworkConfig(input_dim=7, hidden=(16, 8), n_components=4, seed=3)
        w1, w2 = init_weights(cfg), init_weights(cfg)
        for name in w1:
            np.testing.assert_array_equal(w1[name], w2[name])

    def test_head_width(self):
        cfg = NetworkConfig(input_dim=37, hidden=(128, 128), n_components=5)
        w = init_weights(cfg)
        assert w["head_w"].shape == (128, 15)
        assert w["head_b"].shape == (15,)

    def test_glorot_bounds(self):
        cfg = NetworkConfig(input_dim=9, hidden=(11, 13), n_components=2, seed=0)
        w = init_weights(cfg)
        dims = {"dense0_w": (9, 11), "dense1_w": (11, 13), "head_w": (13, 6)}
        for name, (fi, fo) in dims.items():
            bound = math.sqrt(6.0 / (fi + fo))
            assert np.max(np.abs(w[name])) <= bound

    def test_identity_gate_and_pono(self):
        cfg = NetworkConfig(input_dim=4, hidden=(6,), n_components=2)
        w = init_weights(cfg)
        np.testing.assert_array_equal(w["gate_scale"], np.ones(4))
        np.testing.assert_array_equal(w["gate_shift"], np.zeros(4))
        np.testing.assert_array_equal(w["pono_gain"], np.ones(6))
        np.testing.assert_array_equal(w["pono_shift"], np.zeros(6))

    def test_config_validation(self):
        with pytest.raises(ConfigError):
            NetworkConfig(input_dim=0)
        with pytest.raises(ConfigError):
            NetworkConfig(input_dim=3, n_components=0)
        with pytest.raises(ConfigError):
            NetworkConfig(input_dim=3, hidden=())


class TestForward:
    def test_simplex_and_clamp_bounds(self):
        rng = np.random.default_rng(0)
        cfg = NetworkConfig(input_dim=6, hidden=(12, 12), n_components=5, seed=1)
        w = init_weights(cfg)
        params = forward(cfg, w, rng.normal(size=(50, 6)))
        np.testing.assert_allclose(params.weights.sum(axis=1), 1.0, atol=1e-9)
        assert np.all(params.alphas >= SHAPE_MIN)
        assert np.all(params.alphas <= SHAPE_MAX)
        assert np.all(params.betas >= SHAPE_MIN)
        assert np.all(params.betas <= SHAPE_MAX)

    def test_zero_weights_give_uniform_mixture(self):
        cfg = NetworkConfig(input_dim=3, hidden=(5,), n_components=4, seed=0)
        w = init_weights(cfg)
        w["dense0_w"][:] = 0.0
        w["head_w"][:] = 0.0
        params = forward(cfg, w, np.array([[0.3, -1.0, 2.0]]))
        np.testing.assert_allclose(params.weights[0], 0.25, atol=1e-12)

    def test_hand_computed_golden(self):
        # 2 inputs -> gate -> dense(4) -> leaky -> pono -> head (K=2),
        # recomputed below with straight-line scalar math
        cfg = NetworkConfig(input_dim=2, hidden=(4,), n_components=2)
        w = init_weights(cfg)
        w["gate_scale"][:] = [2.0, 0.5]
        w["gate_shift"][:] = [0.25, 1.0]
        w["dense0_w"][:] = [[0.5, -1.0, 0.2, 0.0],
                            [1.0, 0.5, -0.3, 0.8]]
        w["dense0_b"][:] = [0.1, -0.2, 0.0, 0.3]
        w["pono_gain"][:] = [1.5, 1.0, 0.5, 2.0]
        w["pono_shift"][:] = [0.0, 0.1, -0.1, 0.2]
        w["head_w"][:] = [[0.3, -0.2, 0.5, 0.1, -0.4, 0.6],
                          [0.0, 0.7, -0.1, 0.2, 0.3, -0.5],
                          [-0.6, 0.1, 0.4, -0.3, 0.2, 0.0],
                          [0.2, 0.0, -0.2, 0.5, 0.1, 0.4]]
        w["head_b"][:] = [0.05, -0.05, 0.2, 0.0, 0.1, -0.1]
        x = [1.0, -2.0]

        def lrelu(v):
            return v if v > 0 else 0.01 * v

        z0 = [2.0 * 1.0 + 0.25, 0.5 * -2.0 + 1.0]
        g = [lrelu(v) for v in z0]
        pre = [sum(g[i] * w["dense0_w"][i, j] for i in range(2))
               + w["dense0_b"][j] for j in range(4)]
        h = [lrelu(v) for v in pre]
        mu = sum(h) / 4.0
        var = sum((v - mu) ** 2 for v in h) / 4.0
        nhat = [(v - mu) / math.sqrt(var + 1e-5) for v in h]
        p = [w["pono_gain"][j] * nhat[j] + w["pono_shift"][j] for j in range(4)]
        raw = [sum(p[j] * w["head_w"][j, k] for j in range(4))
               + w["head_b"][k] for k in range(6)]
        mx = max(raw[0], raw[1])
        e = [math.exp(raw[0] - mx), math.exp(raw[1] - mx)]
        pi = [v / (e[0] + e[1]) for v in e]
        alphas = [math.log1p(math.exp(raw[2])) + 1e-3,
                  math.log1p(math.exp(raw[3])) + 1e-3]
        betas = [math.log1p(math.exp(raw[4])) + 1e-3,
                 math.log1p(math.exp(raw[5])) + 1e-3]

        params = forward(cfg, w, np.array([x]))
        np.testing.assert_allclose(params.weights[0], pi, atol=1e-12)
        np.testing.assert_allclose(params.alphas[0], alphas, atol=1e-12)
        np.testing.assert_allclose(params.betas[0], betas, atol=1e-12)

    def test_pono_normalizes_each_sample(self):
        rng = np.random.default_rng(5)
        cfg = NetworkConfig(input_dim=4, hidden=(32, 8), n_components=2, seed=2)
        w = init_weights(cfg)
        # a wide bias spread keeps per-sample activation variance far above
        # the 1e-5 eps, where normalization is exact; with tiny variance
        # the eps inside the sqrt deliberately damps the output instead
        w["dense0_b"][:] = 10.0 * np.arange(32)
        _, cache = _forward_cache(cfg, w, rng.normal(size=(20, 4)))
        nhat = cache["pono_nhat"]
        np.testing.assert_allclose(nhat.mean(axis=1), 0.0, atol=1e-6)
        np.testing.assert_allclose(nhat.var(axis=1), 1.0, atol=1e-6)

    def test_pono_eps_damps_degenerate_rows(self):
        rng = np.random.default_rng(6)
        cfg = NetworkConfig(input_dim=4, hidden=(16,), n_components=2, seed=3)
        w = init_weights(cfg)
        _, cache = _forward_cache(cfg, w, rng.normal(size=(12, 4)))
        pre = cache["dense0_pre"]
        act = np.where(pre > 0, pre, cfg.leaky_slope * pre)
        v = act.var(axis=1)
        got = cache["pono_nhat"].var(axis=1)
        np.testing.assert_allclose(got, v / (v + cfg.pono_eps), atol=1e-12)

    def test_forward_deterministic(self):
        rng = np.random.default_rng(8)
        cfg = NetworkConfig(input_dim=5, hidden=(9,), n_components=3, seed=4)
        w = init_weights(cfg)
        x = rng.normal(size=(10, 5))
        p1, p2 = forward(cfg, w, x), forward(cfg, w, x)
        np.testing.assert_array_equal(p1.weights, p2.weights)
        np.testing.assert_array_equal(p1.alphas, p2.alphas)
        np.testing.assert_array_equal(p1.betas, p2.betas)

    def test_dimension_mismatch(self):
        cfg = NetworkConfig(input_dim=4, hidden=(6,), n_components=2)
        w = init_weights(cfg)
        with pytest.raises(DataError):
            forward(cfg, w, np.zeros((3, 5)))

    def test_nonfinite_activation_reports_layer(self):
        cfg = NetworkConfig(input_dim=3, hidden=(5,), n_components=2, seed=0)
        w = init_weights(cfg)
        w["dense0_w"][0, 0] = np.nan
        with pytest.raises(NumericalError, match="dense0"):
            forward(cfg, w, np.ones((2, 3)))


class TestLossAndGradients:
    def test_uniform_density_loss_zero(self):
        cfg = NetworkConfig(input_dim=3, hidden=(4,), n_components=1, seed=0)
        w = init_weights(cfg)
        w["head_w"][:] = 0.0
        # softplus(b) + 1e-3 = 1  ->  alpha = beta = 1, the uniform density
        b = math.log(math.expm1(0.999))
        w["head_b"][:] = [0.0, b, b]
        loss, grads = loss_and_gradients(
            cfg, w, np.random.default_rng(0).normal(size=(1, 3)), [0.3])
        assert loss == pytest.approx(0.0, abs=1e-12)
        assert all(np.all(np.isfinite(g)) for g in grads.values())

    def test_matches_finite_differences(self):
        for seed in range(20):
            rng = np.random.default_rng(seed)
            cfg = NetworkConfig(
                input_dim=5, hidden=(8,), n_components=3, seed=seed)
            w = init_weights(cfg)
            x = rng.normal(size=(4, 5))
            y = rng.uniform(0.05, 0.95, size=4)
            _, grads = loss_and_gradients(cfg, w, x, y)
            oracle = finite_difference_grads(cfg, w, x, y)
            assert max_relative_error(grads, oracle) < 1e-4

    def test_matches_finite_differences_with_moex(self):
        rng = np.random.default_rng(123)
        cfg = NetworkConfig(input_dim=4, hidden=(6, 5), n_components=2, seed=9)
        w = init_weights(cfg)
        x = rng.normal(size=(6, 4))
        y = rng.uniform(0.1, 0.9, size=6)
        xa, mix = augment_batch(x, MoExConfig(p=0.8), np.random.default_rng(1))
        assert mix.n_augmented > 0
        _, grads = loss_and_gradients(cfg, w, xa, y, mix)
        oracle = finite_difference_grads(cfg, w, xa, y, mix)
        assert max_relative_error(grads, oracle) < 1e-4

    def test_lambda_one_reduces_to_plain_loss(self):
        rng = np.random.default_rng(2)
        cfg = NetworkConfig(input_dim=3, hidden=(5,), n_components=2, seed=1)
        w = init_weights(cfg)
        x = rng.normal(size=(4, 3))
        y = rng.uniform(0.2, 0.8, size=4)
        mix = MoExPairing(
            augmented=np.array([True, True, False, False]),
            partner=np.array([1, 0, 2, 3]),
            lam=np.array([1.0 - 1e-300, 1.0 - 1e-300, 1.0, 1.0]),
        )
        mixed = batch_loss(cfg, w, x, y, mix)
        plain = batch_loss(cfg, w, x, y)
        assert mixed == pytest.approx(plain, abs=1e-12)

    def test_mixing_interpolates_between_labels(self):
        rng = np.random.default_rng(4)
        cfg = NetworkConfig(input_dim=3, hidden=(5,), n_components=2, seed=7)
        w = init_weights(cfg)
        x = rng.normal(size=(2, 3))
        y = np.array([0.3, 0.7])
        mix = MoExPairing(
            augmented=np.array([True, False]),
            partner=np.array([1, 1]),
            lam=np.array([0.25, 1.0]),
        )
        mixed = batch_loss(cfg, w, x, y, mix)
        swapped = batch_loss(cfg, w, x, np.array([0.7, 0.7]))
        plain = batch_loss(cfg, w, x, y)
        # row 0 mixes its own NLL with the partner-label NLL at weight 0.25
        expected = plain + 0.75 * (swapped - plain)
        assert mixed == pytest.approx(expected, abs=1e-12)

    def test_empty_batch_rejected(self):
        cfg = NetworkConfig(input_dim=3, hidden=(4,), n_components=2)
        w = init_weights(cfg)
        with pytest.raises(DataError):
            loss_and_gradients(cfg, w, np.zeros((0, 3)), np.zeros(0))


class TestPredict:
    def _scalers(self):
        # target range [0, 10] mapped to [0.1, 0.9]: u = 0.08 y + 0.1
        return types.SimpleNamespace(
            invert_target=lambda u: (np.asarray(u) - 0.1) / 0.08,
            variance_scale=1.0 / 0.08**2,
        )

    def test_affine_inverse_of_mean(self):
        cfg = NetworkConfig(input_dim=2, hidden=(4,), n_components=1, seed=0)
        w = init_weights(cfg)
        w["head_w"][:] = 0.0
        # alpha = beta = 2 -> scaled mean 0.5, scaled variance 0.05
        b = math.log(math.expm1(1.999))
        w["head_b"][:] = [0.0, b, b]
        out = predict(cfg, w, np.zeros((3, 2)), self._scalers())
        mean, va, ve = summaries_to_arrays(out)
        np.testing.assert_allclose(mean, 5.0, atol=1e-9)
        np.testing.assert_allclose(va, 0.05 * 156.25, atol=1e-9)
        np.testing.assert_array_equal(ve, 0.0)
        assert out[0].var_total == pytest.approx(out[0].var_aleatoric)

    def test_constant_net_gives_identical_summaries(self):
        cfg = NetworkConfig(input_dim=3, hidden=(5,), n_components=2, seed=3)
        w = init_weights(cfg)
        w["gate_scale"][:] = 0.0
        rng = np.random.default_rng(0)
        out = predict(cfg, w, rng.normal(size=(8, 3)), self._scalers())
        mean, va, _ = summaries_to_arrays(out)
        np.testing.assert_allclose(mean, mean[0], atol=1e-12)
        np.testing.assert_allclose(va, va[0], atol=1e-12)

    def test_scaled_units_without_scalers(self):
        cfg = NetworkConfig(input_dim=2, hidden=(4,), n_components=1, seed=0)
        w = init_weights(cfg)
        w["head_w"][:] = 0.0
        b = math.log(math.expm1(1.999))
        w["head_b"][:] = [0.0, b, b]
        mean, va, _ = summaries_to_arrays(predict(cfg, w, np.zeros((2, 2))))
        np.testing.assert_allclose(mean, 0.5, atol=1e-12)
        np.testing.assert_allclose(va, 0.05, atol=1e-12)


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        cfg = NetworkConfig(input_dim=5, hidden=(7, 3), n_components=2, seed=11)
        w = init_weights(cfg)
        path = tmp_path / "model.json"
        save_checkpoint(path, cfg, w)
        cfg2, w2 = load_checkpoint(path)
        assert cfg2 == cfg
        for name in w:
            np.testing.assert_array_equal(w[name], w2[name])

    def test_byte_identical_rewrite(self, tmp_path):
        cfg = NetworkConfig(input_dim=3, hidden=(4,), n_components=2, seed=5)
        w = init_weights(cfg)
        p1, p2 = tmp_path / "a.json", tmp_path / "b.json"
        save_checkpoint(p1, cfg, w)
        save_checkpoint(p2, cfg, w)
        assert p1.read_bytes() == p2.read_bytes()

    def test_rejects_unknown_format(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text('{"format": "other", "config": {}, "weights": {}}')
        with pytest.raises(ConfigError):
            load_checkpoint(path)

    def test_validate_catches_shape_mismatch(self):
        cfg = NetworkConfig(input_dim=3, hidden=(4,), n_components=2)
        w = init_weights(cfg)
        w["dense0_w"] = w["dense0_w"][:, :2]
        with pytest.raises(ConfigError):
            validate_weights(cfg, w)
