"""Dueling combine, action selection, reward, replay and the DQN update."""

import numpy as np
import pytest

from hybridnav import nn, policy
from hybridnav.config import PolicyConfig
from hybridnav.errors import ConfigError
from hybridnav.world import COLLISION, COMPLETED, OUT_OF_BOUNDS, RUNNING


def dueling_stub(value_bias: float):
    """Dueling net whose advantage stream echoes the 4-value observation and
    whose value stream is the constant value_bias."""
    trunk = nn.Sequential([nn.Dense(4, 4, activation="none",
                                    rng=np.random.default_rng(0))])
    trunk.layers[0].params["W"][...] = np.eye(4)
    trunk.layers[0].params["b"][...] = 0.0
    vstream = nn.Sequential([nn.Dense(4, 1, activation="none",
                                      rng=np.random.default_rng(0))])
    vstream.layers[0].params["W"][...] = 0.0
    vstream.layers[0].params["b"][...] = value_bias
    astream = nn.Sequential([nn.Dense(4, 4, activation="none",
                                      rng=np.random.default_rng(0))])
    astream.layers[0].params["W"][...] = np.eye(4)
    astream.layers[0].params["b"][...] = 0.0
    return nn.DuelingNet(trunk, vstream, astream)


class TestQValues:
    def test_uniform_advantage_collapses_to_value(self):
        net = dueling_stub(value_bias=1.0)
        q = policy.q_values(net, np.array([1.0, 1.0, 1.0, 1.0]))
        assert np.allclose(q, [1.0, 1.0, 1.0, 1.0])

    def test_dueling_combine_formula(self):
        net = dueling_stub(value_bias=0.0)
        q = policy.q_values(net, np.array([2.0, 0.0, 0.0, 0.0]))
        assert np.allclose(q, [1.5, -0.5, -0.5, -0.5])

    def test_evaluation_mode_deterministic(self):
        cfg = PolicyConfig()
        net = policy.build_policy_net(cfg, np.random.default_rng(1))
        obs = np.random.default_rng(2).uniform(-1, 1, policy.OBS_DIM)
        assert np.array_equal(policy.q_values(net, obs), policy.q_values(net, obs))

    def test_advantage_mean_centering(self):
        cfg = PolicyConfig()
        net = policy.build_policy_net(cfg, np.random.default_rng(3))
        rng = np.random.default_rng(4)
        for _ in range(5):
            obs = rng.uniform(-1, 1, policy.OBS_DIM)
            q = net.forward(obs)
            v = net.value.forward(net.trunk.forward(obs))
            assert abs(np.sum(q - v[0])) < 1e-9

    def test_noise_changes_outputs_but_is_seeded(self):
        cfg = PolicyConfig()
        net = policy.build_policy_net(cfg, np.random.default_rng(5))
        obs = np.random.default_rng(6).uniform(-1, 1, policy.OBS_DIM)
        a = policy.q_values(net, obs, noise_key=[1, 2])
        b = policy.q_values(net, obs, noise_key=[1, 2])
        c = policy.q_values(net, obs, noise_key=[1, 3])
        assert np.array_equal(a, b)
        assert not np.array_equal(a, c)


class TestSelectAction:
    def test_argmax(self):
        assert policy.select_action(np.array([0.0, 5.0, 1.0, 2.0])) == 1

    def test_tie_breaks_to_lowest_index(self):
        assert policy.select_action(np.array([2.0, 2.0, 2.0, 2.0])) == 0

    def test_constant_shift_invariance(self):
        rng = np.random.default_rng(7)
        for _ in range(20):
            q = rng.standard_normal(4)
            assert policy.select_action(q) == policy.select_action(q + 13.7)

    def test_strictly_increasing_transform_invariance(self):
        rng = np.random.default_rng(8)
        for _ in range(20):
            q = rng.standard_normal(4)
            assert policy.select_action(q) == policy.select_action(np.exp(q) * 3 + 1)


class TestReward:
    def test_progress(self):
        assert policy.reward(5.0, 5.3, RUNNING, 20.0) == pytest.approx(0.3)

    def test_collision_penalty(self):
        assert policy.reward(5.0, 5.3, COLLISION, 20.0) == -20.0

    def test_out_of_bounds_penalty(self):
        assert policy.reward(5.0, 5.3, OUT_OF_BOUNDS, 20.0) == -20.0

    def test_stationary_zero(self):
        assert policy.reward(4.0, 4.0, RUNNING, 20.0) == 0.0

    def test_completion_keeps_progress(self):
        assert policy.reward(99.9, 100.2, COMPLETED, 20.0) == pytest.approx(0.3)


class TestReplayBuffer:
    def test_capacity_and_oldest_first_eviction(self):
        buf = policy.ReplayBuffer(capacity=4, obs_dim=2)
        for i in range(6):
            buf.add(np.array([i, i]), i % 4, float(i), np.array([i, i]), False)
        assert buf.size == 4
        # oldest two (0 and 1) were evicted; slots now hold 4,5,2,3
        held = sorted(buf.rewards.tolist())
        assert held == [2.0, 3.0, 4.0, 5.0]

    def test_sample_seeded(self):
        buf = policy.ReplayBuffer(capacity=8, obs_dim=2)
        for i in range(8):
            buf.add(np.array([i, 0]), 0, float(i), np.array([i, 0]), False)
        a = buf.sample(4, np.random.default_rng(3))
        b = buf.sample(4, np.random.default_rng(3))
        assert np.array_equal(a[2], b[2])


class _ConstantTarget:
    """Stands in for the frozen target network."""

    def __init__(self, q_row):
        self.q_row = np.asarray(q_row, dtype=np.float64)

    def forward(self, obs, noise_key=None):
        return np.tile(self.q_row, (len(obs), 1))


def tiny_net(obs_dim=2, bias=None):
    net = nn.Sequential([nn.Dense(obs_dim, 4, activation="none",
                                  rng=np.random.default_rng(0))])
    net.layers[0].params["W"][...] = 0.0
    if bias is not None:
        net.layers[0].params["b"][...] = bias
    return net


class TestDqnUpdate:
    def test_terminal_transition_already_correct_gives_zero_loss(self):
        net = tiny_net(bias=1.0)
        before = net.layers[0].params["W"].copy()
        batch = (np.zeros((1, 2)), np.array([2]), np.array([1.0]),
                 np.zeros((1, 2)), np.array([True]))
        loss = policy.dqn_update(net, _ConstantTarget([9, 9, 9, 9]),
                                 nn.Adam(lr=0.1), batch, gamma=0.9)
        assert loss == 0.0
        assert np.array_equal(net.layers[0].params["W"], before)

    def test_bellman_target_formula(self):
        net = tiny_net(bias=0.0)
        batch = (np.zeros((1, 2)), np.array([0]), np.array([1.0]),
                 np.zeros((1, 2)), np.array([False]))
        # r + gamma * max target Q = 1 + 0.9 * 2 = 2.8; Q(s,a) = 0
        loss = policy.dqn_update(net, _ConstantTarget([2.0, 1.0, 0.0, -1.0]),
                                 nn.Adam(lr=0.0), batch, gamma=0.9)
        assert loss == pytest.approx(2.8 ** 2)

    def test_two_state_chain_matches_value_iteration(self):
        # states one-hot; action 1 advances: s0 -> s1 (r 0), s1 -> done (r 1);
        # other actions hold the state with zero reward
        gamma = 0.9
        obs = {0: np.array([1.0, 0.0]), 1: np.array([0.0, 1.0])}

        def transition(s, a):
            if a == 1:
                return (1, 0.0, False) if s == 0 else (None, 1.0, True)
            return s, 0.0, False

        q_star = np.zeros((2, 4))
        for _ in range(200):
            v = q_star.max(axis=1)
            for s in range(2):
                for a in range(4):
                    ns, r, done = transition(s, a)
                    q_star[s, a] = r + (0.0 if done else gamma * v[ns])

        rng = np.random.default_rng(0)
        net = nn.Sequential([nn.Dense(2, 16, alpha=0.0, rng=rng),
                             nn.Dense(16, 4, activation="none", rng=rng)])
        target = nn.Sequential([nn.Dense(2, 16, alpha=0.0, rng=rng),
                                nn.Dense(16, 4, activation="none", rng=rng)])
        nn.copy_params(net, target)
        opt = nn.Adam(lr=3e-3)
        buf = policy.ReplayBuffer(capacity=256, obs_dim=2)
        for s in range(2):
            for a in range(4):
                ns, r, done = transition(s, a)
                nxt = obs[ns] if ns is not None else np.zeros(2)
                for _ in range(8):
                    buf.add(obs[s], a, r, nxt, done)
        for step in range(5000):
            batch = buf.sample(16, rng)
            policy.dqn_update(net, target, opt, batch, gamma)
            if (step + 1) % 100 == 0:
                nn.copy_params(net, target)

        for s in range(2):
            learned = net.forward(obs[s])
            assert int(np.argmax(learned)) == int(np.argmax(q_star[s]))
            assert np.abs(learned - q_star[s]).max() < 0.05


class TestTrainingLoopDeterminism:
    def test_identical_master_seed_identical_log(self):
        from hybridnav.config import HarnessConfig
        from hybridnav import harness

        cfg = HarnessConfig()
        cfg.policy.warmup_steps = 60
        cfg.policy.replay_capacity = 500
        channel = harness.build_channel(cfg)

        def run():
            net, log = policy.train_policy(cfg.policy, cfg.vehicle, cfg.course,
                                           channel, master_seed=5, steps=300)
            return [(r["outcome"], r["steps"], round(r["return"], 12)) for r in log]

        assert run() == run()


class TestConfigGuards:
    def test_rainbow_placeholders_rejected(self):
        cfg = PolicyConfig(prioritized_replay=True)
        with pytest.raises(ConfigError):
            cfg.validate()
        cfg = PolicyConfig(distributional_atoms=51)
        with pytest.raises(ConfigError):
            cfg.validate()

    def test_gamma_bounds(self):
        with pytest.raises(ConfigError):
            PolicyConfig(gamma=1.0).validate()
