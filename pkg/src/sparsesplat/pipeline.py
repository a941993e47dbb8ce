"""End-to-end glue: configuration, initialisation, reconstruction and evaluation."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .data import Dataset, View
from .errors import InvalidInputError
from .gaussians import GaussianCloud, RenderSettings
from .hull import assign_colors, carve, default_bounds, init_gaussians, random_box_samples
from .metrics import psnr, ssim
from .optimizer import TrainConfig, TrainLog, train
from .rasterizer import render


@dataclass
class HullConfig:
    init: str = "hull"  # "hull" or "random"
    n_samples: int = 1_000_000
    max_points: int | None = 3000
    init_opacity: float = 0.1
    knn: int = 3
    seed: int = 0

    def __post_init__(self):
        if self.init not in ("hull", "random"):
            raise InvalidInputError(f"init must be 'hull' or 'random', got {self.init!r}")


@dataclass
class MeshConfig:
    resolution: int = 128
    iso: float = 0.3
    smooth_iterations: int = 5
    target_faces: int = 100_000
    min_opacity: float | None = None


@dataclass
class RelevanceConfig:
    tau: float = 0.35
    blur: bool = False
    text_guidance: float = 7.5
    image_guidance: float = 1.5


@dataclass
class PipelineConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    hull: HullConfig = field(default_factory=HullConfig)
    mesh: MeshConfig = field(default_factory=MeshConfig)
    relevance: RelevanceConfig = field(default_factory=RelevanceConfig)

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        sections = {f.name: f.type for f in fields(cls)}
        unknown = set(d) - set(sections)
        if unknown:
            raise InvalidInputError(f"unknown config sections: {sorted(unknown)}")
        kinds = {"train": TrainConfig, "hull": HullConfig, "mesh": MeshConfig, "relevance": RelevanceConfig}
        try:
            return cls(**{k: kinds[k](**v) for k, v in d.items()})
        except TypeError as exc:
            raise InvalidInputError(f"bad config: {exc}") from None

    @classmethod
    def load(cls, path=None, overrides: list[str] = ()) -> "PipelineConfig":
        """Read a JSON config (optional) and apply ``section.key=value`` overrides."""
        d = json.loads(Path(path).read_text()) if path else {}
        for item in overrides:
            key, sep, raw = item.partition("=")
            if not sep or key.count(".") < 1:
                raise InvalidInputError(f"override must look like section.key=value: {item!r}")
            try:
                value = json.loads(raw)
            except json.JSONDecodeError:
                value = raw
            node = d
            *parents, leaf = key.split(".")
            for p in parents:
                node = node.setdefault(p, {})
            node[leaf] = value
        return cls.from_dict(d)

    def to_dict(self) -> dict:
        return asdict(self)


def dataset_bounds(dataset: Dataset) -> np.ndarray:
    if dataset.bounds is not None:
        return np.asarray(dataset.bounds, dtype=np.float64)
    return default_bounds([v.camera for v in dataset.train])


def initial_cloud(dataset: Dataset, cfg: HullConfig, sh_degree: int = 0) -> GaussianCloud:
    """Visual-hull (or random-in-box) initial Gaussians from the training views."""
    views = dataset.train
    bounds = dataset_bounds(dataset)
    cams = [v.camera for v in views]
    if cfg.init == "random":
        n = cfg.max_points or 3000
        samples = random_box_samples(bounds, n, cfg.seed)
    else:
        if any(v.mask is None for v in views):
            raise InvalidInputError("visual hull needs a silhouette for every training view")
        points = carve(cams, [v.mask for v in views], bounds, cfg.n_samples, cfg.seed)
        if cfg.max_points is not None and len(points) > cfg.max_points:
            rng = np.random.default_rng(cfg.seed + 1)
            points = points[np.sort(rng.choice(len(points), cfg.max_points, replace=False))]
        samples = assign_colors(points, cams, [v.image for v in views])
    return init_gaussians(samples, cfg.init_opacity, cfg.knn, sh_degree)


def reconstruct(dataset: Dataset, cfg: PipelineConfig, init: GaussianCloud | None = None,
                **train_kw) -> tuple[GaussianCloud, TrainLog]:
    if init is None:
        init = initial_cloud(dataset, cfg.hull, cfg.train.sh_degree)
    return train(dataset, init, cfg.train, **train_kw)


@dataclass
class EvalRow:
    view: str
    psnr: float
    ssim: float


def evaluate(cloud: GaussianCloud, views: list[View], background, sh_degree: int = 0) -> list[EvalRow]:
    """PSNR and SSIM of renders against each view's image."""
    settings = RenderSettings(background=background, sh_degree=min(sh_degree, cloud.sh_degree))
    rows = []
    for v in views:
        out = render(cloud, v.camera, settings)
        rows.append(EvalRow(v.name, psnr(out.color, v.image), ssim(out.color, v.image)))
    return rows


def format_table(rows: list[EvalRow], method: str = "ours") -> str:
    """Tab-separated ``method view PSNR SSIM`` rows plus a ``mean`` row."""
    lines = ["method\tview\tPSNR\tSSIM"]
    lines += [f"{method}\t{r.view}\t{r.psnr:.4f}\t{r.ssim:.4f}" for r in rows]
    if rows:
        lines.append(f"{method}\tmean\t{np.mean([r.psnr for r in rows]):.4f}\t"
                     f"{np.mean([r.ssim for r in rows]):.4f}")
    return "\n".join(lines)
