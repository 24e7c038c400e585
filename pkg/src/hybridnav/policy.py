"""Dueling noisy Q-network controller, reward, replay and the DQN loop.

The observation is the flattened reduced depth map (144 values) followed by
the 16-channel odometry vector. Four actions: left, forward, right, reverse.
Exploration comes solely from the noisy output layers; evaluation passes no
noise key and is deterministic.
"""

from __future__ import annotations

import numpy as np

from . import nn
from .config import PolicyConfig, VehicleConfig
from .errors import DataError
from .world import (ACTION_NAMES, COLLISION, OUT_OF_BOUNDS, RUNNING,
                    apply_action, fresh_world)

OBS_DIM = 144 + 16


def build_policy_net(cfg: PolicyConfig, rng, obs_dim: int = OBS_DIM,
                     width_scale: float = 1.0) -> nn.DuelingNet:
    """Trunk of ReLU hidden layers feeding value/advantage streams whose
    final layers are noisy-dense. width_scale shrinks the net for tests."""
    tw = max(2, int(round(cfg.trunk_width * width_scale)))
    sw = max(2, int(round(cfg.stream_width * width_scale)))

    def hidden(i, o):
        return nn.Dense(i, o, activation="leaky-relu", alpha=0.0, rng=rng)

    trunk, prev = [], obs_dim
    for _ in range(cfg.trunk_depth):
        trunk.append(hidden(prev, tw))
        prev = tw

    def stream(out_dim):
        layers, p = [], prev
        for _ in range(cfg.stream_depth):
            layers.append(hidden(p, sw))
            p = sw
        layers.append(nn.NoisyDense(p, out_dim, activation="none",
                                    sigma0=cfg.noisy_sigma0, rng=rng))
        return nn.Sequential(layers)

    return nn.DuelingNet(nn.Sequential(trunk), stream(1), stream(cfg.action_count))


def q_values(net: nn.DuelingNet, obs: np.ndarray, noise_key=None) -> np.ndarray:
    """Q estimates for one observation; no key means evaluation mode."""
    return net.forward(np.asarray(obs, dtype=np.float64), noise_key)


def select_action(q: np.ndarray) -> int:
    """Argmax with ties broken toward the lowest index (left first)."""
    return int(np.argmax(q))


def reward(prev_x: float, new_x: float, classification: str, penalty: float) -> float:
    """Forward progress per step; a flat penalty on collision or boundary
    violation."""
    if classification in (COLLISION, OUT_OF_BOUNDS):
        return -float(penalty)
    return float(new_x - prev_x)


class ReplayBuffer:
    """Fixed-capacity ring buffer, oldest-first eviction."""

    def __init__(self, capacity: int, obs_dim: int = OBS_DIM):
        self.capacity = int(capacity)
        self.obs = np.zeros((capacity, obs_dim))
        self.next_obs = np.zeros((capacity, obs_dim))
        self.actions = np.zeros(capacity, dtype=np.int64)
        self.rewards = np.zeros(capacity)
        self.terminal = np.zeros(capacity, dtype=bool)
        self.size = 0
        self._head = 0

    def add(self, obs, action, rew, next_obs, terminal):
        i = self._head
        self.obs[i] = obs
        self.actions[i] = action
        self.rewards[i] = rew
        self.next_obs[i] = next_obs
        self.terminal[i] = terminal
        self._head = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def sample(self, batch: int, rng):
        if self.size == 0:
            raise DataError("empty replay buffer")
        idx = rng.integers(0, self.size, size=batch)
        return (self.obs[idx], self.actions[idx], self.rewards[idx],
                self.next_obs[idx], self.terminal[idx])


def dqn_update(net, target_net, optimizer, batch, gamma: float,
               noise_key=None) -> float:
    """One squared-TD-error gradient step against a frozen target network.

    Terminal transitions bootstrap zero. Returns the pre-update loss.
    """
    obs, actions, rewards, next_obs, terminal = batch
    next_q = target_net.forward(next_obs)  # evaluation mode: mean weights
    boot = next_q.max(axis=1) * (~terminal)
    targets = rewards + gamma * boot
    return nn.train_step(net, optimizer, obs, (actions, targets), "td",
                         noise_key=noise_key)


def train_policy(cfg: PolicyConfig, vehicle: VehicleConfig, course, channel,
                 master_seed: int, net=None, steps: int | None = None,
                 penalty: float | None = None, progress=None):
    """DQN over simulator rollouts.

    Each environment step takes one action from the noisy network, stores the
    transition, and (after warmup) runs one gradient step on a replay batch.
    The target network syncs on a fixed cadence. Fully reproducible from
    master_seed. An existing net may be passed to resume with a new penalty.

    Returns (net, per-episode log rows).
    """
    steps = cfg.train_steps if steps is None else steps
    penalty = cfg.penalty if penalty is None else penalty
    root = np.random.default_rng([master_seed, 505])
    if net is None:
        net = build_policy_net(cfg, np.random.default_rng([master_seed, 506]))
    target = build_policy_net(cfg, np.random.default_rng([master_seed, 506]))
    nn.copy_params(net, target)
    optimizer = nn.Adam(lr=cfg.learning_rate)
    replay = ReplayBuffer(cfg.replay_capacity)
    log = []

    episode = 0
    world = fresh_world(course, vehicle, int(root.integers(2 ** 31)))
    ep_rng = np.random.default_rng([master_seed, 507, episode])
    obs, _ = channel.policy_observation(world, ep_rng)
    ep_return, ep_steps = 0.0, 0

    for step in range(steps):
        action = select_action(q_values(net, obs, noise_key=[master_seed, 508, step]))
        prev_x = world.state.x
        state, outcome = world.step(apply_action(action, world.state, vehicle))
        r = reward(prev_x, state.x, outcome.classification, penalty)
        next_obs, _ = channel.policy_observation(world, ep_rng)
        replay.add(obs, action, r, next_obs, outcome.terminal)
        obs = next_obs
        ep_return += r
        ep_steps += 1

        if replay.size >= cfg.warmup_steps:
            batch = replay.sample(cfg.batch_size, root)
            dqn_update(net, target, optimizer, batch, cfg.gamma,
                       noise_key=[master_seed, 509, step])
            if (step + 1) % cfg.target_sync == 0:
                nn.copy_params(net, target)

        if outcome.terminal:
            log.append({"episode": episode, "return": ep_return,
                        "outcome": outcome.classification, "steps": ep_steps,
                        "penalty": penalty})
            if progress is not None:
                progress(step, log[-1])
            episode += 1
            world = fresh_world(course, vehicle, int(root.integers(2 ** 31)))
            ep_rng = np.random.default_rng([master_seed, 507, episode])
            obs, _ = channel.policy_observation(world, ep_rng)
            ep_return, ep_steps = 0.0, 0

    return net, log


def write_policy_log(log: list[dict], path):
    cols = ["episode", "return", "outcome", "steps", "penalty"]
    with open(path, "w") as fh:
        fh.write(",".join(cols) + "\n")
        for row in log:
            fh.write(",".join(str(row[c]) if not isinstance(row[c], float)
                              else f"{row[c]:.10g}" for c in cols) + "\n")


__all__ = ["OBS_DIM", "ACTION_NAMES", "build_policy_net", "q_values",
           "select_action", "reward", "ReplayBuffer", "dqn_update",
           "train_policy", "write_policy_log"]
