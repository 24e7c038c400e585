"""Hybrid switching controller: a primary pilot by default, with a
collision-probability gate that hands control to a contingency pilot and
takes it back when the pilot terminates.

The gate is strict: the contingency engages only when the predicted
probability exceeds the threshold, evaluated for the action the primary
pilot is about to take.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .config import ArbiterConfig, ContingencyConfig
from .contingency import ContingencyPilot, run_astar_policy, run_expert_policy
from .errors import ConfigError
from .world import ACTION_FORWARD, StepOutcome, apply_action

MODE_RL = "rl"
MODE_CONTINGENCY = "contingency-active"


@dataclass
class ArbiterState:
    mode: str = MODE_RL
    threshold: float = 0.5
    contingency: str = "expert"
    engagements: int = 0


class RlPrimary:
    """Greedy evaluation-mode Q-policy."""

    source = "rl"

    def __init__(self, policy_net, vehicle_cfg):
        self.net = policy_net
        self.vehicle = vehicle_cfg

    def action(self, obs, world):
        q = self.net.forward(np.asarray(obs, dtype=np.float64))
        action = int(np.argmax(q))
        return action, apply_action(action, world.state, self.vehicle)


class StraightLinePrimary:
    """Flies straight down the course; the gate conditions on Forward."""

    source = "straight-line"

    def __init__(self, vehicle_cfg):
        self.speed = vehicle_cfg.forward_speed

    def action(self, obs, world):
        return ACTION_FORWARD, np.array([self.speed, 0.0])


def decide(primary, gate, obs, world, state: ArbiterState):
    """(action index, command, probability-or-None, engage flag)."""
    if state.mode != MODE_RL:
        raise ConfigError("decide is only valid while the primary pilot holds control")
    action, cmd = primary.action(obs, world)
    if gate is None or state.contingency == "none":
        return action, cmd, None, False
    p = float(gate(obs, action))
    return action, cmd, p, p > state.threshold


class Arbiter:
    """Owns one episode's switching logic and engagement bookkeeping."""

    def __init__(self, primary, gate, channel, arb_cfg: ArbiterConfig,
                 cont_cfg: ContingencyConfig, course_cfg, vehicle_cfg):
        self.primary = primary
        self.gate = gate
        self.channel = channel
        self.cont_cfg = cont_cfg
        self.course = course_cfg
        self.vehicle = vehicle_cfg
        self.state = ArbiterState(threshold=arb_cfg.threshold,
                                  contingency=arb_cfg.contingency)
        self.cooldown = int(arb_cfg.cooldown_steps)
        self._cool = 0

    def episode_step(self, world, rng, record):
        """One arbitration point: either a single primary-pilot world step or
        a full contingency engagement (many steps)."""
        obs, _ = self.channel.policy_observation(world, rng)
        if record.keep_observations:
            record.observations.append(obs)
        action, cmd, p, engage = decide(self.primary, self.gate, obs, world, self.state)
        if self._cool > 0:
            self._cool -= 1
            engage = False

        if not engage:
            state, outcome = world.step(cmd)
            record.log_step(self.primary.source, action, cmd, state, outcome, p)
            return outcome

        self.state.mode = MODE_CONTINGENCY
        self.state.engagements += 1
        start_step = world.step_index
        kind = self.state.contingency

        def on_step(c, st, out):
            record.log_step(kind, None, c, st, out, None)

        pilot = ContingencyPilot(world, self.cont_cfg, self.course, on_step=on_step)
        if kind == "expert":
            run_expert_policy(pilot, self.channel, rng)
        elif kind == "astar":
            run_astar_policy(pilot, self.channel, rng, self.vehicle.radius,
                             debug_sink=record.planner_debug)
        else:
            raise ConfigError(f"unknown contingency kind {kind!r}")
        self.state.mode = MODE_RL
        self._cool = self.cooldown
        record.engagements.append({
            "step": start_step, "probability": p, "action": action,
            "kind": kind, "duration": world.step_index - start_step,
        })
        return StepOutcome(world.classification, world.step_index)
