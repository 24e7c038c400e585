"""Collision-prediction MLP: horizon labeling, class-balanced batching,
binary cross-entropy training and the validation metric suite.

The network embeds the 160-length observation through four dense layers,
concatenates the selected action as a one-hot, and maps through four more
layers to two logits; softmax gives the collision probability. Class 0 is
"collision within the horizon".
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from . import nn
from .config import CollisionConfig
from .errors import DataError
from .policy import OBS_DIM

HEAD_WIDTHS = (256, 256, 128, 32)
TAIL_WIDTHS = (32, 32, 32)
ACTION_COUNT = 4
POSITIVE_CLASS = 0


def build_collision_net(rng, obs_dim: int = OBS_DIM,
                        action_count: int = ACTION_COUNT) -> nn.ConcatNet:
    head, prev = [], obs_dim
    for width in HEAD_WIDTHS:
        head.append(nn.Dense(prev, width, activation="leaky-relu", rng=rng))
        prev = width
    tail, prev = [], prev + action_count
    for width in TAIL_WIDTHS:
        tail.append(nn.Dense(prev, width, activation="leaky-relu", rng=rng))
        prev = width
    tail.append(nn.Dense(prev, 2, activation="none", rng=rng))
    return nn.ConcatNet(nn.Sequential(head), nn.Sequential(tail))


def one_hot_actions(actions, action_count: int = ACTION_COUNT) -> np.ndarray:
    actions = np.atleast_1d(np.asarray(actions, dtype=np.int64))
    out = np.zeros((len(actions), action_count))
    out[np.arange(len(actions)), actions] = 1.0
    return out


def collision_probability(logits: np.ndarray) -> np.ndarray:
    """Softmax probability of the collision class from 2-logit outputs."""
    logits = np.atleast_2d(logits)
    shifted = logits - logits.max(axis=1, keepdims=True)
    expo = np.exp(shifted)
    probs = expo / expo.sum(axis=1, keepdims=True)
    return probs[:, POSITIVE_CLASS]


def predict_collision(net, obs, action_index: int) -> float:
    """Collision probability for one observation/action pair."""
    obs = np.asarray(obs, dtype=np.float64)[None, :]
    logits = net.forward((obs, one_hot_actions([action_index])))
    return float(collision_probability(logits)[0])


def predict_collision_batch(net, obs_batch, actions) -> np.ndarray:
    logits = net.forward((obs_batch, one_hot_actions(actions)))
    return collision_probability(logits)


def label_frames(collision_step: int | None, n_frames: int, horizon: int) -> np.ndarray:
    """Frame t is positive iff a collision lands in steps (t, t + horizon].

    collision_step is the 1-based step index at which the episode classified
    as collision, or None. Frames are 0..n_frames-1.
    """
    labels = np.zeros(n_frames, dtype=bool)
    if collision_step is not None:
        lo = max(0, collision_step - horizon)
        labels[lo:collision_step] = True
    return labels


def sample_balanced_batch(pos_idx: np.ndarray, neg_idx: np.ndarray,
                          batch_size: int, positive_fraction: float, rng):
    """Indices for one batch at the fixed class mix, sampled with
    replacement within each class."""
    if len(pos_idx) == 0 or len(neg_idx) == 0:
        raise DataError("balanced batch needs at least one sample per class")
    n_pos = int(round(batch_size * positive_fraction))
    pos = pos_idx[rng.integers(0, len(pos_idx), size=n_pos)]
    neg = neg_idx[rng.integers(0, len(neg_idx), size=batch_size - n_pos)]
    return np.concatenate([pos, neg])


def train_collision(net, obs: np.ndarray, actions: np.ndarray,
                    labels: np.ndarray, cfg: CollisionConfig, rng,
                    batches: int | None = None, log_every: int = 0) -> list[dict]:
    """Cross-entropy on balanced batches; no importance reweighting."""
    batches = cfg.train_batches if batches is None else batches
    pos_idx = np.flatnonzero(labels)
    neg_idx = np.flatnonzero(~labels)
    classes = np.where(labels, POSITIVE_CLASS, 1 - POSITIVE_CLASS).astype(np.int64)
    optimizer = nn.Adam(lr=cfg.learning_rate)
    log = []
    for b in range(batches):
        idx = sample_balanced_batch(pos_idx, neg_idx, cfg.batch_size,
                                    cfg.positive_fraction, rng)
        loss = nn.train_step(net, optimizer,
                             (obs[idx], one_hot_actions(actions[idx])),
                             classes[idx], "bce")
        if log_every and (b % log_every == 0 or b == batches - 1):
            log.append({"batch": b, "loss": loss})
    return log


def validate_collision(net, obs: np.ndarray, actions: np.ndarray,
                       labels: np.ndarray, cfg: CollisionConfig, rng,
                       batches: int | None = None) -> dict:
    """Balanced-batch evaluation (24 negative + 8 positive per batch).

    Counts are reported two ways: as fractions of all evaluated frames
    (batch-mass rates, which sum to 1) and as the usual conditional rates.
    """
    batches = cfg.val_batches if batches is None else batches
    pos_idx = np.flatnonzero(labels)
    neg_idx = np.flatnonzero(~labels)
    tp = tn = fp = fn = 0
    ce_sum = 0.0
    total = 0
    for _ in range(batches):
        idx = sample_balanced_batch(pos_idx, neg_idx, cfg.batch_size,
                                    cfg.positive_fraction, rng)
        probs = predict_collision_batch(net, obs[idx], actions[idx])
        truth = labels[idx]
        pred = probs > cfg.threshold
        tp += int(np.sum(pred & truth))
        tn += int(np.sum(~pred & ~truth))
        fp += int(np.sum(pred & ~truth))
        fn += int(np.sum(~pred & truth))
        p_true = np.where(truth, probs, 1.0 - probs)
        ce_sum += float(-np.log(np.maximum(p_true, 1e-300)).sum())
        total += len(idx)

    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = (2 * precision * recall / (precision + recall)) if precision + recall else 0.0
    return {
        "batches": batches,
        "frames": total,
        "accuracy": (tp + tn) / total,
        "precision": precision,
        "recall": recall,
        "f1": f1,
        "cross_entropy": ce_sum / total,
        "batch_mass": {"tp": tp / total, "tn": tn / total,
                       "fp": fp / total, "fn": fn / total},
        "conditional": {
            "tpr": recall,
            "tnr": tn / (tn + fp) if tn + fp else 0.0,
            "fpr": fp / (fp + tn) if fp + tn else 0.0,
            "fnr": fn / (fn + tp) if fn + tp else 0.0,
        },
    }


# ---------------------------------------------------------------------------
# Labeled dataset container


def save_collision_dataset(directory, obs: np.ndarray, actions: np.ndarray,
                           labels: np.ndarray, meta: dict):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    np.save(directory / "obs.npy", obs.astype(np.float32))
    np.save(directory / "actions.npy", actions.astype(np.uint8))
    np.save(directory / "labels.npy", labels.astype(np.uint8))
    index = {"count": int(len(obs)),
             "positives": int(labels.sum()),
             "negatives": int(len(labels) - labels.sum()),
             "obs_dim": int(obs.shape[1])}
    index.update(meta)
    with open(directory / "index.json", "w") as fh:
        json.dump(index, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_collision_dataset(directory):
    directory = Path(directory)
    with open(directory / "index.json") as fh:
        index = json.load(fh)
    obs = np.load(directory / "obs.npy").astype(np.float64)
    actions = np.load(directory / "actions.npy").astype(np.int64)
    labels = np.load(directory / "labels.npy").astype(bool)
    return obs, actions, labels, index
