"""Episode records and their serialization.

A record logs every simulator step with the controlling source, the command
and the post-step vehicle state, plus engagement events and the terminal
classification. Observations are retained only on request (they dominate
memory). Records serialize to canonical JSON so equal episodes hash equal.
"""

from __future__ import annotations

import hashlib
import json

import numpy as np

from .world import COLLISION, RUNNING


class EpisodeRecord:
    def __init__(self, seed: int, controller: str, config_hash: str = "",
                 keep_observations: bool = False):
        self.seed = int(seed)
        self.controller = controller
        self.config_hash = config_hash
        self.keep_observations = keep_observations
        self.observations: list[np.ndarray] = []
        self.sources: list[str] = []
        self.actions: list[int] = []
        self.commands: list[tuple[float, float]] = []
        self.states: list[tuple[float, ...]] = []
        self.probabilities: list[float] = []
        self.engagements: list[dict] = []
        self.planner_debug: list[dict] = []
        self.classification = RUNNING
        self.step_count = 0

    def log_step(self, source, action, cmd, state, outcome, probability):
        self.sources.append(source)
        self.actions.append(-1 if action is None else int(action))
        self.commands.append((float(cmd[0]), float(cmd[1])))
        self.states.append((state.x, state.y, state.vx, state.vy, state.yaw))
        self.probabilities.append(float("nan") if probability is None else float(probability))
        self.classification = outcome.classification
        self.step_count = outcome.step_index

    @property
    def terminal(self) -> bool:
        return self.classification != RUNNING

    def collision_source(self) -> str | None:
        """Which source was piloting at the collision step, if any."""
        if self.classification != COLLISION or not self.sources:
            return None
        return self.sources[-1]

    def summary(self) -> dict:
        return {
            "seed": self.seed,
            "controller": self.controller,
            "outcome": self.classification,
            "steps": self.step_count,
            "collision_source": self.collision_source(),
            "engagements": len(self.engagements),
        }

    def to_dict(self) -> dict:
        return {
            "format": "hybridnav-episode",
            "version": 1,
            "seed": self.seed,
            "controller": self.controller,
            "config_hash": self.config_hash,
            "classification": self.classification,
            "step_count": self.step_count,
            "sources": self.sources,
            "actions": self.actions,
            "commands": self.commands,
            "states": self.states,
            "probabilities": [None if np.isnan(p) else p for p in self.probabilities],
            "engagements": self.engagements,
        }

    def canonical_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    def digest(self) -> str:
        return hashlib.sha256(self.canonical_json().encode()).hexdigest()

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=1, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, path) -> "EpisodeRecord":
        with open(path) as fh:
            data = json.load(fh)
        rec = cls(data["seed"], data["controller"], data.get("config_hash", ""))
        rec.classification = data["classification"]
        rec.step_count = data["step_count"]
        rec.sources = list(data["sources"])
        rec.actions = list(data["actions"])
        rec.commands = [tuple(c) for c in data["commands"]]
        rec.states = [tuple(s) for s in data["states"]]
        rec.probabilities = [float("nan") if p is None else p
                             for p in data["probabilities"]]
        rec.engagements = list(data["engagements"])
        return rec
