"""End-to-end orchestration: episode driver, the four-controller evaluation
protocol, dataset collection, aggregation and file emission.

Episodes are seeded base+i and are independent, so evaluation may fan out
across worker processes; summaries are aggregated in seed order, making
reports byte-identical for any worker count.
"""

from __future__ import annotations

import dataclasses
import json
import math
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import collision as cnet
from . import depthnet, nn
from .arbiter import Arbiter, RlPrimary, StraightLinePrimary
from .camera import CameraModel, ObservationChannel, min_pool, normalize, render_depth_full, render_rgb
from .config import HarnessConfig, config_hash
from .errors import ConfigError, StartupError
from .records import EpisodeRecord
from .world import COLLISION, COMPLETED, OUT_OF_BOUNDS, TIMEOUT, fresh_world, generate_course

CONTROLLER_SPECS = ("hybrid-expert", "hybrid-astar", "rl-only", "expert-only")
_EPISODE_STREAM = 606
_MEANDER_STREAM = 707

TABLE_ROWS = ("Collision Rate", "Contingency Policy Collision Rate",
              "Out-of-Bounds Rate", "Timeout Rate", "Completion Rate",
              "Episode Length")


def build_channel(cfg: HarnessConfig, depth_net=None) -> ObservationChannel:
    cam = CameraModel(cfg.camera)
    source = cfg.observation.source
    sigma = cfg.noise.depth_sigma if source == "noisy_oracle" else 0.0
    predictor = None
    if source == "depth_net":
        if depth_net is None:
            raise StartupError("observation source 'depth_net' needs a depth checkpoint")
        predictor = lambda img: depthnet.predict(depth_net, img * 2.0 - 1.0)
    return ObservationChannel(cam, cfg.course, sigma, cfg.noise.kin_sigma,
                              predictor=predictor)


def _as_gate(net_or_fn):
    if net_or_fn is None:
        return None
    if callable(net_or_fn) and not isinstance(net_or_fn, nn.ConcatNet):
        return net_or_fn
    return lambda obs, action: cnet.predict_collision(net_or_fn, obs, action)


def _controller_parts(spec: str, cfg: HarnessConfig, nets: dict):
    """(primary, gate, contingency kind) for a controller spec."""
    def need(key):
        if nets.get(key) is None:
            raise StartupError(f"controller {spec!r} needs the {key!r} artifact")
        return nets[key]

    if spec == "rl-only":
        return RlPrimary(need("policy"), cfg.vehicle), None, "none"
    if spec == "hybrid-expert":
        return (RlPrimary(need("policy"), cfg.vehicle),
                _as_gate(need("collision")), "expert")
    if spec == "hybrid-astar":
        return (RlPrimary(need("policy"), cfg.vehicle),
                _as_gate(need("collision")), "astar")
    if spec == "expert-only":
        return (StraightLinePrimary(cfg.vehicle),
                _as_gate(need("collision_straight")), "expert")
    if spec == "straight-only":   # data collection: straight flight, no gate
        return StraightLinePrimary(cfg.vehicle), None, "none"
    raise ConfigError(f"unknown controller spec {spec!r}")


def run_episode(spec: str, seed: int, cfg: HarnessConfig, nets: dict,
                keep_observations: bool = False) -> EpisodeRecord:
    """One seeded episode from the 0 m mark to a terminal classification."""
    primary, gate, kind = _controller_parts(spec, cfg, nets)
    arb_cfg = dataclasses.replace(cfg.arbiter, contingency=kind)
    world = fresh_world(cfg.course, cfg.vehicle, seed)
    channel = build_channel(cfg, nets.get("depth"))
    rng = np.random.default_rng([int(seed), _EPISODE_STREAM])
    record = EpisodeRecord(seed, spec, config_hash(cfg), keep_observations)
    arb = Arbiter(primary, gate, channel, arb_cfg, cfg.contingency,
                  cfg.course, cfg.vehicle)
    while not world.terminal:
        arb.episode_step(world, rng, record)
    return record


# ---------------------------------------------------------------------------
# Evaluation


def evaluation_report(spec: str, summaries: list[dict], cfg: HarnessConfig,
                      base_seed: int) -> dict:
    n = len(summaries)
    outcomes = [s["outcome"] for s in summaries]
    collisions = [s for s in summaries if s["outcome"] == COLLISION]
    primary_coll = sum(1 for s in collisions
                       if s["collision_source"] in ("rl", "straight-line"))
    contingency_coll = len(collisions) - primary_coll
    completed = [s["steps"] for s in summaries if s["outcome"] == COMPLETED]
    engagements = sum(s["engagements"] for s in summaries)
    if len(completed) > 1:
        se = float(np.std(completed, ddof=1) / math.sqrt(len(completed)))
    else:
        se = 0.0
    return {
        "controller": spec,
        "episodes": n,
        "base_seed": base_seed,
        "config_hash": config_hash(cfg),
        "collision_rate": len(collisions) / n,
        "primary_collision_share": primary_coll / n,
        "contingency_collision_share": contingency_coll / n,
        "out_of_bounds_rate": outcomes.count(OUT_OF_BOUNDS) / n,
        "timeout_rate": outcomes.count(TIMEOUT) / n,
        "completion_rate": outcomes.count(COMPLETED) / n,
        "completed_count": len(completed),
        "mean_completed_length": float(np.mean(completed)) if completed else float("nan"),
        "completed_length_se": se,
        "engagements_total": engagements,
        "mean_engagements": engagements / n,
        "contingency_collision_per_engagement":
            contingency_coll / engagements if engagements else 0.0,
    }


_WORKER_NETS: dict = {}


def _load_nets_from_paths(paths: dict) -> dict:
    nets = {}
    for key, path in paths.items():
        if path:
            if not Path(path).exists():
                raise StartupError(f"missing checkpoint: {key} at {path}")
            nets[key] = nn.load_checkpoint(path)
    return nets


def _eval_worker(args):
    spec, seed, cfg_dict, path_items = args
    from .config import config_from_dict
    cfg = config_from_dict(cfg_dict)
    key = path_items
    if key not in _WORKER_NETS:
        _WORKER_NETS[key] = _load_nets_from_paths(dict(path_items))
    record = run_episode(spec, seed, cfg, _WORKER_NETS[key])
    return record.summary()


def run_evaluation(spec: str, episodes: int, base_seed: int, cfg: HarnessConfig,
                   nets: dict | None = None, net_paths: dict | None = None,
                   workers: int = 1):
    """Seeded evaluation sweep. Returns (report, per-episode summaries).

    Parallel execution needs checkpoint paths (workers load their own
    copies); results are independent of the worker count.
    """
    seeds = [base_seed + i for i in range(episodes)]
    if workers > 1:
        if net_paths is None:
            raise ConfigError("parallel evaluation requires checkpoint paths")
        args = [(spec, s, cfg.to_dict(), tuple(sorted(net_paths.items())))
                for s in seeds]
        with ProcessPoolExecutor(max_workers=workers) as pool:
            summaries = list(pool.map(_eval_worker, args, chunksize=8))
    else:
        if nets is None:
            nets = _load_nets_from_paths(net_paths or {})
        summaries = [run_episode(spec, s, cfg, nets).summary() for s in seeds]
    summaries.sort(key=lambda s: s["seed"])
    return evaluation_report(spec, summaries, cfg, base_seed), summaries


def write_episode_csv(summaries: list[dict], path):
    cols = ["seed", "controller", "outcome", "steps", "collision_source", "engagements"]
    with open(path, "w") as fh:
        fh.write(",".join(cols) + "\n")
        for s in summaries:
            fh.write(",".join("" if s[c] is None else str(s[c]) for c in cols) + "\n")


def _fmt_rate(x: float) -> str:
    return f"{100.0 * x:.1f}%"


def aggregate_and_emit(reports: list[dict], outdir, records=None) -> list[str]:
    """Results table (rows = metrics, columns = controllers), full JSON, and
    static plots. Re-emission from the same inputs is byte-identical."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    written = []

    table_path = outdir / "results_table.csv"
    with open(table_path, "w") as fh:
        fh.write("Metric," + ",".join(r["controller"] for r in reports) + "\n")
        rows = {
            "Collision Rate": [_fmt_rate(r["primary_collision_share"]) for r in reports],
            "Contingency Policy Collision Rate":
                [_fmt_rate(r["contingency_collision_share"]) for r in reports],
            "Out-of-Bounds Rate": [_fmt_rate(r["out_of_bounds_rate"]) for r in reports],
            "Timeout Rate": [_fmt_rate(r["timeout_rate"]) for r in reports],
            "Completion Rate": [_fmt_rate(r["completion_rate"]) for r in reports],
            "Episode Length": [
                (f"{r['mean_completed_length']:.1f} +/- {r['completed_length_se']:.1f}"
                 if r["completed_count"] else "n/a") for r in reports],
        }
        for name in TABLE_ROWS:
            fh.write(name + "," + ",".join(rows[name]) + "\n")
    written.append(str(table_path))

    json_path = outdir / "reports.json"
    with open(json_path, "w") as fh:
        json.dump(reports, fh, indent=2, sort_keys=True)
        fh.write("\n")
    written.append(str(json_path))

    written.append(_plot_metrics(reports, outdir / "metrics.png"))
    if records:
        for controller, (recs, course_template) in records.items():
            path = outdir / f"trajectories_{controller}.png"
            written.append(plot_record(recs, course_template, path))
    return written


def _mpl():
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    return plt


def _plot_metrics(reports, path) -> str:
    plt = _mpl()
    fig, ax = plt.subplots(figsize=(7, 4))
    names = [r["controller"] for r in reports]
    x = np.arange(len(names))
    ax.bar(x - 0.2, [r["completion_rate"] for r in reports], 0.4, label="completion")
    ax.bar(x + 0.2, [r["collision_rate"] for r in reports], 0.4, label="collision")
    ax.set_xticks(x, names)
    ax.set_ylim(0, 1)
    ax.set_ylabel("rate")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)
    return str(path)


def plot_record(rec: EpisodeRecord, course_template, path) -> str:
    """Top-down trace of one episode over its course, engagement points
    starred."""
    recs = rec if isinstance(rec, list) else [rec]
    plt = _mpl()
    fig, axes = plt.subplots(len(recs), 1, figsize=(10, 2.2 * len(recs)),
                             squeeze=False)
    colors = {COMPLETED: "tab:green", COLLISION: "tab:red",
              OUT_OF_BOUNDS: "tab:orange", TIMEOUT: "tab:purple"}
    for ax, r in zip(axes[:, 0], recs):
        course = dataclasses.replace(course_template, seed=r.seed)
        for box in generate_course(course):
            ax.add_patch(plt.Rectangle(
                (box.cx - box.half_depth, box.cy - box.half_width),
                2 * box.half_depth, 2 * box.half_width, fc="0.6", ec="k"))
        xs = [0.0] + [s[0] for s in r.states]
        ys = [0.0] + [s[1] for s in r.states]
        ax.plot(xs, ys, lw=1.1, color=colors.get(r.classification, "k"))
        for eng in r.engagements:
            i = min(eng["step"], len(xs) - 1)
            ax.plot(xs[i], ys[i], "k*", ms=8)
        hw = course.half_width
        ax.axhline(hw, color="k", lw=1.2)
        ax.axhline(-hw, color="k", lw=1.2)
        ax.set_xlim(-2, course.length + 2)
        ax.set_ylim(-hw - 1, hw + 1)
        ax.set_title(f"{r.controller} seed={r.seed}: {r.classification} "
                     f"in {r.step_count} steps", fontsize=8)
    axes[-1, 0].set_xlabel("x [m]")
    fig.tight_layout()
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)
    return str(path)


# ---------------------------------------------------------------------------
# Dataset collection


def collect_depth_data(cfg: HarnessConfig, pairs: int, seed: int,
                       frames_per_course: int = 25):
    """Matched (RGB frame, reduced true depth) pairs along a scripted weave.

    The pose script meanders down the course: x advances steadily while y
    sweeps a sine band and the heading follows the weave with jitter.
    """
    cam = CameraModel(cfg.camera)
    rng = np.random.default_rng([seed, _MEANDER_STREAM])
    images = np.empty((pairs, cam.h, cam.w, 3), dtype=np.uint8)
    targets = np.empty((pairs, cam.h // 16, cam.w // 16))
    course = cfg.course
    i = 0
    course_idx = 0
    while i < pairs:
        course_seed = int(rng.integers(2 ** 31))
        ccfg = dataclasses.replace(course, seed=course_seed)
        boxes = generate_course(ccfg)
        phase = rng.uniform(0, 2 * math.pi)
        wavelength = rng.uniform(25.0, 60.0)
        amp = rng.uniform(1.0, course.half_width - 1.2)
        for t in range(frames_per_course):
            if i >= pairs:
                break
            x = (t + rng.uniform(0.0, 1.0)) * (course.length - 8.0) / frames_per_course
            y = amp * math.sin(2 * math.pi * x / wavelength + phase)
            slope = amp * (2 * math.pi / wavelength) * math.cos(2 * math.pi * x / wavelength + phase)
            yaw = math.atan(slope) + rng.normal(0.0, 0.08)
            pose = (x, y, yaw)
            img = render_rgb(pose, boxes, ccfg, cam, seed=course_seed)
            images[i] = np.round(img * 255.0).astype(np.uint8)
            full = render_depth_full(pose, boxes, ccfg, cam)
            targets[i] = normalize(min_pool(full), cam.far)
            i += 1
        course_idx += 1
    meta = {"generator_seed": seed, "courses": course_idx,
            "frames_per_course": frames_per_course}
    return images, targets, meta


def collect_collision_data(cfg: HarnessConfig, nets: dict, episodes: int,
                           base_seed: int, pilot: str = "rl-only"):
    """Frames from no-arbitration rollouts, labeled by the 10-step collision
    window. pilot is "rl-only" or "straight-only"."""
    horizon = cfg.collision.horizon
    all_obs, all_actions, all_labels = [], [], []
    episode_stats = {"episodes": episodes, "collisions": 0}
    for i in range(episodes):
        record = run_episode(pilot, base_seed + i, cfg, nets, keep_observations=True)
        n = record.step_count
        collision_step = n if record.classification == COLLISION else None
        labels = cnet.label_frames(collision_step, n, horizon)
        if collision_step is not None:
            episode_stats["collisions"] += 1
        all_obs.append(np.asarray(record.observations))
        all_actions.append(np.asarray(record.actions, dtype=np.int64))
        all_labels.append(labels)
    obs = np.concatenate(all_obs)
    actions = np.concatenate(all_actions)
    labels = np.concatenate(all_labels)
    meta = {"provenance": pilot, "horizon": horizon, "base_seed": base_seed}
    meta.update(episode_stats)
    return obs, actions, labels, meta
