"""Training loop: render, compare against a view, backpropagate, take an Adam step."""
from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .data import Dataset, View
from .errors import InvalidInputError, NumericalError
from .gaussians import LEARNABLE, GaussianCloud, RenderSettings, save_ply
from .losses import LossWeights, dssim_loss, l1_loss, mask_loss, depth_loss, total_loss
from .rasterizer import render, render_backward


@dataclass
class TrainConfig:
    iterations: int = 10_000
    lr_position: float = 1.6e-4
    lr_position_final: float = 1.6e-6  # exponential decay to this by the last iteration
    lr_rotation: float = 1e-3
    lr_log_scale: float = 5e-3
    lr_opacity: float = 5e-2
    lr_color: float = 2.5e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-15
    prune_interval: int = 500
    prune_opacity: float = 0.005
    weights: LossWeights = field(default_factory=LossWeights)
    depth_align: bool = True
    sh_degree: int = 0
    seed: int = 0
    log_interval: int = 100

    def __post_init__(self):
        if isinstance(self.weights, dict):
            self.weights = LossWeights(**self.weights)
        if self.iterations < 0:
            raise InvalidInputError("iterations must be non-negative")
        rates = (self.lr_position, self.lr_position_final, self.lr_rotation, self.lr_log_scale,
                 self.lr_opacity, self.lr_color)
        if min(rates) <= 0:
            raise InvalidInputError("learning rates must be positive")

    def learning_rates(self, iteration: int) -> dict[str, float]:
        frac = min(max(iteration / max(self.iterations, 1), 0.0), 1.0)
        pos = self.lr_position * (self.lr_position_final / self.lr_position) ** frac
        return {"positions": pos, "rotations": self.lr_rotation, "log_scales": self.lr_log_scale,
                "opacity_logits": self.lr_opacity, "sh": self.lr_color}

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class AdamState:
    m: dict
    v: dict
    t: int = 0

    @classmethod
    def for_cloud(cls, cloud: GaussianCloud) -> "AdamState":
        return cls({k: np.zeros_like(getattr(cloud, k)) for k in LEARNABLE},
                   {k: np.zeros_like(getattr(cloud, k)) for k in LEARNABLE})

    def subset(self, keep) -> "AdamState":
        return AdamState({k: a[keep] for k, a in self.m.items()},
                         {k: a[keep] for k, a in self.v.items()}, self.t)


@dataclass
class TrainRecord:
    iteration: int
    loss: float
    parts: dict
    count: int
    wall_time: float = field(default=0.0, compare=False)


@dataclass
class TrainLog:
    records: list[TrainRecord] = field(default_factory=list)

    def append(self, record: TrainRecord) -> None:
        if self.records and record.iteration <= self.records[-1].iteration:
            raise InvalidInputError("log iterations must increase")
        self.records.append(record)

    def write(self, path) -> None:
        """One JSON object per line: iteration, loss, parts, count, wall_time."""
        with open(path, "w") as fh:
            for r in self.records:
                fh.write(json.dumps(asdict(r)) + "\n")

    @classmethod
    def read(cls, path) -> "TrainLog":
        return cls([TrainRecord(**json.loads(line)) for line in Path(path).read_text().splitlines() if line])


def render_settings(config: TrainConfig, background) -> RenderSettings:
    return RenderSettings(background=background, sh_degree=config.sh_degree)


def view_loss(cloud: GaussianCloud, view: View, config: TrainConfig, settings: RenderSettings,
              with_grad: bool = True):
    """Total loss of ``cloud`` against one view, its parts and (optionally) parameter gradients."""
    out = render(cloud, view.camera, settings)
    w = config.weights
    parts, grads = {}, {}
    parts["l1"], grads["l1"] = l1_loss(out.color, view.image)
    parts["dssim"], grads["dssim"] = dssim_loss(out.color, view.image)
    if view.mask is not None and w.mask > 0:
        parts["mask"], grads["mask"] = mask_loss(out.alpha, view.mask)
    if view.depth is not None and w.depth > 0:
        parts["depth"], grads["depth"] = depth_loss(out.depth, view.depth, align=config.depth_align)
    value, weighted = total_loss(parts, w, grads)
    if not np.isfinite(value):
        raise NumericalError(f"non-finite loss on view {view.name!r}: {parts}")
    if not with_grad:
        return value, parts, None
    g = render_backward(cloud, view.camera, settings, weighted["l1"] + weighted["dssim"],
                        weighted.get("mask"), weighted.get("depth"))
    return value, parts, g


def step(cloud: GaussianCloud, view: View, config: TrainConfig, state: AdamState,
         iteration: int, settings: RenderSettings | None = None) -> tuple[float, dict]:
    """One Adam update of ``cloud`` (in place) against ``view``.

    Returns the total loss and its parts before the update.
    """
    settings = settings or render_settings(config, np.zeros(3))
    value, parts, g = view_loss(cloud, view, config, settings)
    state.t += 1
    b1, b2 = config.beta1, config.beta2
    c1 = 1 - b1**state.t
    c2 = 1 - b2**state.t
    for name, lr in config.learning_rates(iteration).items():
        grad = getattr(g, name)
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1 - b1) * grad
        v *= b2
        v += (1 - b2) * grad * grad
        param = getattr(cloud, name)
        param -= lr * (m / c1) / (np.sqrt(v / c2) + config.eps)
    cloud.rotations /= np.linalg.norm(cloud.rotations, axis=1, keepdims=True)
    return value, parts


def prune(cloud: GaussianCloud, opacity_floor: float) -> tuple[GaussianCloud, np.ndarray]:
    """Drop Gaussians with opacity below ``opacity_floor``; returns the survivors and the keep mask."""
    keep = cloud.opacities >= opacity_floor
    return cloud.subset(keep), keep


def train(dataset: Dataset, cloud: GaussianCloud, config: TrainConfig, *, log_path=None,
          checkpoint_dir=None, checkpoint_interval: int = 0,
          callback=None) -> tuple[GaussianCloud, TrainLog]:
    """Optimise a copy of ``cloud`` against the training views of ``dataset``.

    Views are visited in seeded shuffled epochs; pruning runs every
    ``prune_interval`` iterations. ``callback(iteration, cloud)`` is called
    after every step when given.
    """
    views = dataset.train
    if not views:
        raise InvalidInputError("dataset has no training views")
    cloud = cloud.copy()
    if config.sh_degree > cloud.sh_degree:
        pad = np.zeros((len(cloud), 3, (config.sh_degree + 1) ** 2))
        pad[:, :, :cloud.sh.shape[-1]] = cloud.sh
        cloud.sh = pad
    settings = render_settings(config, dataset.background)
    state = AdamState.for_cloud(cloud)
    rng = np.random.default_rng(config.seed)
    log = TrainLog()
    start = time.perf_counter()
    order: list[int] = []
    window_loss, window_parts, window_n = 0.0, {}, 0
    for it in range(1, config.iterations + 1):
        if not order:
            order = list(rng.permutation(len(views)))
        value, parts = step(cloud, views[order.pop()], config, state, it, settings)
        window_loss += value
        for k, v in parts.items():
            window_parts[k] = window_parts.get(k, 0.0) + v
        window_n += 1
        if config.prune_interval and it % config.prune_interval == 0 and it < config.iterations:
            cloud, keep = prune(cloud, config.prune_opacity)
            state = state.subset(keep)
        if it % config.log_interval == 0 or it == config.iterations:
            log.append(TrainRecord(it, window_loss / window_n,
                                   {k: v / window_n for k, v in window_parts.items()},
                                   len(cloud), time.perf_counter() - start))
            window_loss, window_parts, window_n = 0.0, {}, 0
        if checkpoint_dir and checkpoint_interval and it % checkpoint_interval == 0:
            Path(checkpoint_dir).mkdir(parents=True, exist_ok=True)
            save_ply(cloud, Path(checkpoint_dir) / f"iter_{it:06d}.ply")
        if callback is not None:
            callback(it, cloud)
    if log_path is not None:
        log.write(log_path)
    return cloud, log
