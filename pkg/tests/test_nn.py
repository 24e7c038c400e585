"""Layer forward/backward behavior, training step, gradient checking and
checkpoint round trips."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hybridnav import nn
from hybridnav.errors import ConfigError, TrainingError


def conv_oracle(x, W, b, stride):
    """Direct nested-loop cross-correlation with ceil-division same padding."""
    k = W.shape[0]
    h, w, cin = x.shape
    cout = W.shape[3]
    ho = -(-h // stride)
    wo = -(-w // stride)
    ph = max((ho - 1) * stride + k - h, 0)
    pw = max((wo - 1) * stride + k - w, 0)
    xp = np.pad(x, ((ph // 2, ph - ph // 2), (pw // 2, pw - pw // 2), (0, 0)))
    out = np.zeros((ho, wo, cout))
    for i in range(ho):
        for j in range(wo):
            for f in range(cout):
                acc = b[f]
                for a in range(k):
                    for bb in range(k):
                        for c in range(cin):
                            acc += xp[i * stride + a, j * stride + bb, c] * W[a, bb, c, f]
                out[i, j, f] = acc
    return out


class TestLeakyRelu:
    def test_positive_passthrough(self):
        assert nn.leaky_relu(5.0) == 5.0

    def test_zero(self):
        assert nn.leaky_relu(0.0) == 0.0

    def test_negative_default_slope(self):
        assert nn.leaky_relu(-2.0) == pytest.approx(-0.02)


class TestConv2D:
    def test_zero_kernel_annihilates(self):
        rng = np.random.default_rng(0)
        layer = nn.Conv2D(2, 3, 3, stride=1, activation="none", rng=rng)
        layer.params["W"][...] = 0.0
        layer.params["b"][...] = 0.0
        out = layer.forward(rng.standard_normal((8, 8, 2)))
        assert np.all(out == 0.0)

    def test_identity_kernel(self):
        layer = nn.Conv2D(1, 1, 1, stride=1, activation="none",
                          rng=np.random.default_rng(0))
        layer.params["W"][...] = 1.0
        layer.params["b"][...] = 0.0
        x = np.random.default_rng(1).standard_normal((5, 7, 1))
        assert np.allclose(layer.forward(x), x, atol=0)

    def test_matches_nested_loop_oracle(self):
        rng = np.random.default_rng(3)
        x = rng.standard_normal((6, 6, 1))
        layer = nn.Conv2D(1, 1, 3, stride=2, activation="none", rng=rng)
        ref = conv_oracle(x, layer.params["W"], layer.params["b"], 2)
        assert np.abs(layer.forward(x) - ref).max() < 1e-9

    def test_multichannel_strided_oracle(self):
        rng = np.random.default_rng(9)
        x = rng.standard_normal((7, 5, 3))
        layer = nn.Conv2D(3, 4, 3, stride=2, rng=rng)
        ref = conv_oracle(x, layer.params["W"], layer.params["b"], 2)
        ref = np.where(ref >= 0, ref, 0.01 * ref)
        assert np.abs(layer.forward(x) - ref).max() < 1e-9

    @pytest.mark.parametrize("stride", [1, 2, 3, 4])
    def test_ceil_division_output_extent(self, stride):
        layer = nn.Conv2D(1, 1, 3, stride=stride, rng=np.random.default_rng(0))
        for n in range(1, 257, 7):
            out = layer.forward(np.zeros((1, n, 1)))
            assert out.shape[1] == -(-n // stride)

    def test_full_extent_sweep_stride2(self):
        layer = nn.Conv2D(1, 1, 3, stride=2, rng=np.random.default_rng(0))
        for n in range(1, 257):
            assert layer.forward(np.zeros((n, 1, 1))).shape[0] == -(-n // 2)

    def test_channel_mismatch_raises(self):
        layer = nn.Conv2D(3, 4, 3, rng=np.random.default_rng(0))
        with pytest.raises(ConfigError):
            layer.forward(np.zeros((4, 4, 2)))


class TestDense:
    def test_zero_weights_give_bias(self):
        layer = nn.Dense(3, 2, activation="none", rng=np.random.default_rng(0))
        layer.params["W"][...] = 0.0
        layer.params["b"][...] = (1.5, -2.0)
        assert np.allclose(layer.forward(np.ones(3)), [1.5, -2.0])

    def test_identity(self):
        layer = nn.Dense(4, 4, activation="none", rng=np.random.default_rng(0))
        layer.params["W"][...] = np.eye(4)
        layer.params["b"][...] = 0.0
        x = np.arange(4.0)
        assert np.allclose(layer.forward(x), x)

    def test_length_mismatch_raises(self):
        layer = nn.Dense(4, 2, rng=np.random.default_rng(0))
        with pytest.raises(ConfigError):
            layer.forward(np.zeros(5))

    def test_noisy_seed_determinism(self):
        layer = nn.NoisyDense(6, 3, rng=np.random.default_rng(2))
        x = np.random.default_rng(3).standard_normal(6)
        a = layer.forward(x, noise_key=[7, 0])
        b = layer.forward(x, noise_key=[7, 0])
        c = layer.forward(x, noise_key=[8, 0])
        assert np.array_equal(a, b)
        assert not np.array_equal(a, c)

    def test_noisy_eval_mode_equals_mean_dense(self):
        rng = np.random.default_rng(4)
        layer = nn.NoisyDense(5, 4, rng=rng)
        x = rng.standard_normal(5)
        expected = layer.params["W"] @ x + layer.params["b"]
        assert np.array_equal(layer.forward(x, None), expected)

    def test_forward_bit_reproducible(self):
        rng = np.random.default_rng(11)
        net = nn.Sequential([nn.Dense(4, 6, rng=rng), nn.NoisyDense(6, 2, rng=rng)])
        x = rng.standard_normal((3, 4))
        assert np.array_equal(net.forward(x, noise_key=5), net.forward(x, noise_key=5))


class TestTrainStep:
    def test_zero_learning_rate_keeps_params(self):
        rng = np.random.default_rng(0)
        net = nn.Sequential([nn.Dense(3, 2, rng=rng)])
        before = {k: v.copy() for k, v in net.layers[0].params.items()}
        loss = nn.train_step(net, nn.Adam(lr=0.0), rng.standard_normal((4, 3)),
                             rng.standard_normal((4, 2)), "huber")
        assert loss > 0.0
        for k, v in net.layers[0].params.items():
            assert np.array_equal(v, before[k])

    def test_one_parameter_regression_recovers_slope(self):
        net = nn.Sequential([nn.Dense(1, 1, activation="none", use_bias=False,
                                      rng=np.random.default_rng(0))])
        net.layers[0].params["W"][...] = 0.0
        opt = nn.Adam(lr=0.02)
        x = np.linspace(-1.0, 1.0, 32)[:, None]
        y = 2.0 * x
        losses = [nn.train_step(net, opt, x, y, "huber") for _ in range(200)]
        assert all(losses[i + 1] < losses[i] for i in range(10, 199))
        assert abs(float(net.layers[0].params["W"][0, 0]) - 2.0) < 0.05

    def test_identical_seeds_identical_trajectories(self):
        def run():
            rng = np.random.default_rng(5)
            net = nn.Sequential([nn.Dense(4, 3, rng=rng),
                                 nn.NoisyDense(3, 2, rng=rng)])
            opt = nn.Adam(lr=1e-3)
            snaps = []
            for step in range(5):
                nn.train_step(net, opt, rng.standard_normal((6, 4)),
                              rng.standard_normal((6, 2)), "huber",
                              noise_key=[1, step])
                snaps.append(net.layers[0].params["W"].copy())
            return snaps

        for a, b in zip(run(), run()):
            assert np.array_equal(a, b)

    def test_non_finite_loss_reports_batch_index(self):
        rng = np.random.default_rng(0)
        net = nn.Sequential([nn.Dense(2, 2, activation="none", rng=rng)])
        x = np.array([[0.1, 0.2], [np.nan, 0.0], [0.3, 0.4]])
        with pytest.raises(TrainingError) as exc:
            nn.train_step(net, nn.Adam(), x, np.zeros((3, 2)), "huber")
        assert exc.value.batch_index == 1

    def test_unknown_loss_rejected(self):
        net = nn.Sequential([nn.Dense(2, 2, rng=np.random.default_rng(0))])
        with pytest.raises(ConfigError):
            nn.train_step(net, nn.Adam(), np.zeros((1, 2)), np.zeros((1, 2)), "l1")


class TestGradientCheck:
    def test_dense_only_huber_tight(self):
        rng = np.random.default_rng(1)
        net = nn.Sequential([nn.Dense(5, 7, rng=rng),
                             nn.Dense(7, 3, activation="none", rng=rng)])
        err = nn.gradient_check(net, rng.standard_normal((4, 5)),
                                rng.standard_normal((4, 3)), "huber")
        assert err < 1e-4

    def test_zero_network_zero_target_zero_gradients(self):
        net = nn.Sequential([nn.Dense(3, 3, activation="none",
                                      rng=np.random.default_rng(0))])
        net.layers[0].params["W"][...] = 0.0
        net.layers[0].params["b"][...] = 0.0
        err = nn.gradient_check(net, np.zeros((2, 3)), np.zeros((2, 3)), "huber")
        nn.zero_grads(net)
        _, _, dout = nn.evaluate_loss(net, np.zeros((2, 3)), np.zeros((2, 3)), "huber")
        net.backward(dout)
        assert np.all(net.layers[0].grads["W"] == 0.0)
        assert err == 0.0

    @settings(max_examples=8, deadline=None, derandomize=True)
    @given(st.integers(0, 10 ** 6), st.integers(1, 3), st.booleans(),
           st.sampled_from(["huber", "td", "bce"]))
    def test_random_small_architectures(self, seed, depth, noisy, loss):
        rng = np.random.default_rng(seed)
        dims = [int(rng.integers(2, 9)) for _ in range(depth + 1)]
        layers = []
        for i in range(depth):
            last = i == depth - 1
            out_dim = dims[i + 1] if not last else (2 if loss == "bce" else 4)
            if last and noisy:
                layers.append(nn.NoisyDense(dims[i], out_dim, rng=rng))
            else:
                layers.append(nn.Dense(dims[i], out_dim,
                                       activation="none" if last else "leaky-relu",
                                       rng=rng))
        net = nn.Sequential(layers)
        assert nn.param_count(net) < 5000
        n = 3
        x = rng.uniform(-1, 1, size=(n, dims[0]))
        if loss == "huber":
            targets = rng.uniform(-0.8, 0.8, size=(n, layers[-1].out_dim))
        elif loss == "bce":
            targets = rng.integers(0, 2, size=n)
        else:
            targets = (rng.integers(0, layers[-1].out_dim, size=n),
                       rng.uniform(-1, 1, size=n))
        err = nn.gradient_check(net, x, targets, loss, noise_key=3 if noisy else None)
        assert err < 1e-3


class TestCheckpoints:
    def test_round_trip_forward_bit_identical(self, tmp_path):
        rng = np.random.default_rng(6)
        net = nn.Sequential([nn.Conv2D(1, 2, 3, stride=2, rng=rng),
                             nn.Conv2D(2, 1, 3, stride=1, activation="none", rng=rng)])
        path = tmp_path / "ckpt.npz"
        nn.save_checkpoint(net, path)
        loaded = nn.load_checkpoint(path)
        x = rng.standard_normal((6, 8, 1))
        assert np.array_equal(net.forward(x), loaded.forward(x))

    def test_round_trip_all_archs(self, tmp_path):
        rng = np.random.default_rng(7)
        from hybridnav.collision import build_collision_net
        from hybridnav.config import PolicyConfig
        from hybridnav.policy import build_policy_net

        duel = build_policy_net(PolicyConfig(), rng, obs_dim=12, width_scale=0.1)
        nn.save_checkpoint(duel, tmp_path / "duel.npz")
        loaded = nn.load_checkpoint(tmp_path / "duel.npz")
        obs = rng.standard_normal(12)
        assert np.array_equal(duel.forward(obs), loaded.forward(obs))

        concat = build_collision_net(rng, obs_dim=10)
        nn.save_checkpoint(concat, tmp_path / "concat.npz")
        loaded = nn.load_checkpoint(tmp_path / "concat.npz")
        pair = (rng.standard_normal(10), np.array([0.0, 1.0, 0.0, 0.0]))
        assert np.array_equal(concat.forward(pair), loaded.forward(pair))

    def test_reject_foreign_file(self, tmp_path):
        path = tmp_path / "junk.npz"
        np.savez(path, __meta__=np.frombuffer(b'{"format": "other"}', dtype=np.uint8))
        with pytest.raises(ConfigError):
            nn.load_checkpoint(path)
