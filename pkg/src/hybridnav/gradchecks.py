"""Gradient verification suite shared by the CLI and the acceptance tests.

Each instance compares backpropagated gradients to central finite
differences at step 1e-4 on a fixed probe, and reports the worst relative
disagreement. Instances cover the three production architectures (the conv
ladder at reduced scale, the collision MLP at full scale, the dueling trunk)
plus small dense-only nets held to a tighter bound.
"""

from __future__ import annotations

import numpy as np

from . import collision as cnet
from . import depthnet, nn, policy
from .config import PolicyConfig


def conv_ladder_check() -> float:
    """Depth ladder shape at 1/8 spatial scale with channels shrunk to keep
    the finite-difference sweep tractable (< 5000 parameters)."""
    rng = np.random.default_rng(2024)
    net = depthnet.build_depth_net(rng, channel_scale=1.0 / 16.0)
    x = rng.uniform(-0.8, 0.8, size=(2, 18, 32, 3))
    target_shape = net.forward(x).shape
    y = rng.uniform(-0.8, 0.8, size=target_shape)
    return nn.gradient_check(net, x, y, "huber")


def collision_mlp_check() -> float:
    """The full-scale collision network (all eight dense layers)."""
    rng = np.random.default_rng(77)
    net = cnet.build_collision_net(rng)
    obs = rng.uniform(-1.0, 1.0, size=(2, policy.OBS_DIM))
    onehot = cnet.one_hot_actions([1, 3])
    classes = np.array([0, 1])
    return nn.gradient_check(net, (obs, onehot), classes, "bce")


def dueling_trunk_check() -> float:
    """Dueling value/advantage combine with noisy output layers, shrunk to
    gradient-check scale."""
    rng = np.random.default_rng(11)
    cfg = PolicyConfig()
    net = policy.build_policy_net(cfg, rng, obs_dim=20, width_scale=1.0 / 8.0)
    obs = rng.uniform(-1.0, 1.0, size=(3, 20))
    targets = (np.array([0, 2, 3]), rng.uniform(-1.0, 1.0, size=3))
    return nn.gradient_check(net, obs, targets, "td", noise_key=9)


def dense_only_checks() -> list[float]:
    """Small plain-dense nets under each loss, held to 1e-4."""
    out = []
    rng = np.random.default_rng(5)
    reg = nn.Sequential([nn.Dense(6, 10, rng=rng),
                         nn.Dense(10, 4, activation="none", rng=rng)])
    x = rng.uniform(-1.0, 1.0, size=(5, 6))
    y = rng.uniform(-0.8, 0.8, size=(5, 4))
    out.append(nn.gradient_check(reg, x, y, "huber"))

    clf = nn.Sequential([nn.Dense(8, 12, rng=rng),
                         nn.Dense(12, 2, activation="none", rng=rng)])
    xc = rng.uniform(-1.0, 1.0, size=(6, 8))
    out.append(nn.gradient_check(clf, xc, np.array([0, 1, 1, 0, 1, 0]), "bce"))

    td = nn.Sequential([nn.Dense(7, 9, alpha=0.0, rng=rng),
                        nn.Dense(9, 4, activation="none", rng=rng)])
    xt = rng.uniform(-1.0, 1.0, size=(4, 7))
    out.append(nn.gradient_check(td, xt, (np.array([0, 1, 2, 3]),
                                          rng.uniform(-1, 1, size=4)), "td"))
    return out


def run_gradient_checks(verbose: bool = False) -> int:
    """Run all instances; returns the number of failures."""
    failures = 0
    named = [
        ("conv ladder (reduced scale)", conv_ladder_check(), 1e-3),
        ("collision MLP (full scale)", collision_mlp_check(), 1e-3),
        ("dueling trunk (reduced scale)", dueling_trunk_check(), 1e-3),
    ]
    for i, err in enumerate(dense_only_checks()):
        named.append((f"dense-only net {i}", err, 1e-4))
    for name, err, tol in named:
        ok = err < tol
        failures += 0 if ok else 1
        if verbose:
            print(f"{'PASS' if ok else 'FAIL'} {name}: max relative error "
                  f"{err:.3e} (tolerance {tol:g})")
    return failures
