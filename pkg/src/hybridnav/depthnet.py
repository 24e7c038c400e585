"""Down-scaling depth CNN: construction, Huber training on (image, reduced
map) pairs, and the four validation metrics.

The seven-layer ladder halves each spatial dimension four times (stride-2
convolutions) and then refines at 1/16 scale, so a 144x256 frame comes out
as a 9x16 map. Images and maps are normalized to [-1, 1].
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from . import nn
from .config import DepthTrainConfig
from .errors import ConfigError, DataError

# (kernel, stride, out channels); activations are leaky-relu except the head.
LADDER = ((5, 2, 32), (5, 2, 64), (3, 2, 128), (3, 2, 256),
          (3, 1, 128), (3, 1, 32), (3, 1, 1))


def build_depth_net(rng, in_channels: int = 3, channel_scale: float = 1.0) -> nn.Sequential:
    """The convolutional ladder. channel_scale < 1 shrinks every width
    (minimum 1) for cheap gradient-check instances."""
    layers = []
    prev = in_channels
    for i, (kernel, stride, out_ch) in enumerate(LADDER):
        ch = max(1, int(round(out_ch * channel_scale))) if i < len(LADDER) - 1 else 1
        act = "none" if i == len(LADDER) - 1 else "leaky-relu"
        layers.append(nn.Conv2D(prev, ch, kernel, stride=stride, activation=act, rng=rng))
        prev = ch
    layers[0].skip_input_grad = True   # image gradients are never consumed
    return nn.Sequential(layers)


def normalize_images(images_u8: np.ndarray) -> np.ndarray:
    """uint8 RGB -> float64 in [-1, 1]."""
    return images_u8.astype(np.float64) / 127.5 - 1.0


def predict(net: nn.Sequential, images: np.ndarray) -> np.ndarray:
    """Reduced normalized depth maps for one image (H,W,3) or a batch."""
    images = np.asarray(images, dtype=np.float64)
    single = images.ndim == 3
    out = net.forward(images[None] if single else images)
    out = out[..., 0]
    return out[0] if single else out


huber_loss = nn.huber_loss


def _epoch_batches(n: int, batch: int, rng) -> list[np.ndarray]:
    order = rng.permutation(n)
    return [order[i:i + batch] for i in range(0, n, batch)]


def split_dataset(n: int, val_fraction: float, seed: int):
    """Seeded shuffle, then a train/validation partition."""
    rng = np.random.default_rng([seed, 303])
    order = rng.permutation(n)
    n_val = max(1, int(round(n * val_fraction)))
    return order[n_val:], order[:n_val]


def depth_metrics(pred: np.ndarray, target: np.ndarray, delta: float = 1.0) -> dict:
    """Per-image-mean error metrics on normalized maps.

    The logistic metric compares log(2 - y): both maps live in [-1, 1] so
    the argument stays in [1, 3].
    """
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ConfigError("prediction/target shape mismatch")
    single = pred.ndim == 2
    if single:
        pred, target = pred[None], target[None]
    n = pred.shape[0]
    diff = (pred - target).reshape(n, -1)
    mae = np.abs(diff).mean(axis=1)
    mse = (diff ** 2).mean(axis=1)
    log_diff = (np.log(2.0 - pred) - np.log(2.0 - target)).reshape(n, -1)
    rmsle = np.sqrt((log_diff ** 2).mean(axis=1))
    hub = nn._huber_elementwise(diff, delta).mean(axis=1)

    def stat(v):
        se = float(v.std(ddof=1) / np.sqrt(n)) if n > 1 else 0.0
        return {"mean": float(v.mean()), "se": se}

    return {"mae": stat(mae), "mse": stat(mse), "rmsle": stat(rmsle), "huber": stat(hub)}


def validate_depth(net, images: np.ndarray, targets: np.ndarray,
                   delta: float = 1.0, batch: int = 32) -> dict:
    preds = []
    for i in range(0, len(images), batch):
        preds.append(predict(net, images[i:i + batch]))
    return depth_metrics(np.concatenate(preds), targets, delta)


def train_depth(net, images_u8: np.ndarray, targets: np.ndarray,
                cfg: DepthTrainConfig, rng) -> list[dict]:
    """Mini-batch Huber training with a 90/10 train/validation split.

    Returns one log row per epoch: mean train Huber plus the validation
    metric suite.
    """
    if len(images_u8) == 0:
        raise DataError("empty depth dataset")
    train_idx, val_idx = split_dataset(len(images_u8), cfg.val_fraction, cfg.split_seed)
    val_images = normalize_images(images_u8[val_idx])
    val_targets = targets[val_idx]
    optimizer = nn.Adam(lr=cfg.learning_rate)
    log = []
    for epoch in range(cfg.epochs):
        epoch_rng = np.random.default_rng([cfg.split_seed, 404, epoch])
        losses = []
        for batch_idx in _epoch_batches(len(train_idx), cfg.batch_size, epoch_rng):
            sel = train_idx[batch_idx]
            x = normalize_images(images_u8[sel])
            y = targets[sel]
            losses.append(nn.train_step(net, optimizer, x, y, "huber", delta=cfg.huber_delta))
        metrics = validate_depth(net, val_images, val_targets, cfg.huber_delta)
        row = {"epoch": epoch, "train_huber": float(np.mean(losses)),
               "val_huber": metrics["huber"]["mean"], "val_mae": metrics["mae"]["mean"],
               "val_mse": metrics["mse"]["mean"], "val_rmsle": metrics["rmsle"]["mean"]}
        log.append(row)
    return log


def write_training_log(log: list[dict], path):
    cols = ["epoch", "train_huber", "val_huber", "val_mae", "val_mse", "val_rmsle"]
    with open(path, "w") as fh:
        fh.write(",".join(cols) + "\n")
        for row in log:
            fh.write(",".join(_fmt(row[c]) for c in cols) + "\n")


def _fmt(v):
    return str(v) if isinstance(v, int) else f"{v:.10g}"


# ---------------------------------------------------------------------------
# Dataset container: flat binary arrays plus a JSON index.


def save_depth_dataset(directory, images_u8: np.ndarray, targets: np.ndarray,
                       meta: dict):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    np.save(directory / "images.npy", images_u8)
    np.save(directory / "depths.npy", targets)
    index = {"count": int(len(images_u8)),
             "image_shape": list(images_u8.shape[1:]),
             "depth_shape": list(targets.shape[1:]),
             "image_encoding": {"dtype": "uint8", "scale": 127.5, "offset": -1.0},
             "depth_range": [-1.0, 1.0]}
    index.update(meta)
    with open(directory / "index.json", "w") as fh:
        json.dump(index, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_depth_dataset(directory):
    directory = Path(directory)
    with open(directory / "index.json") as fh:
        index = json.load(fh)
    images = np.load(directory / "images.npy")
    targets = np.load(directory / "depths.npy")
    return images, targets, index
