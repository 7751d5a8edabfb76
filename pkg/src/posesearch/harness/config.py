"""Flat key-value experiment configuration."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path

from ..featurizer import DEFAULT_DIM, DEFAULT_K, DEFAULT_SCALES, DEFAULT_TAU
from ..geometry import DEFAULT_DIST, DEFAULT_RESOLUTION, Camera
from ..renderer import SplatConfig
from ..retrieval import AdamWConfig, PoseGrid, build_pose_grid
from .shapes import CATEGORIES


class ConfigError(ValueError):
    pass


@dataclass
class Config:
    seed: int = 0
    # database
    categories: list = tuple(CATEGORIES)
    per_category: int = 5
    n_points: int = 4096
    scales: list = tuple(list(s) for s in DEFAULT_SCALES)
    dim: int = DEFAULT_DIM
    k: int = DEFAULT_K
    tau: float = DEFAULT_TAU
    encoder_seed: int = 7
    # renderer / camera
    radius: float = 0.04
    points_per_pixel: int = 16
    resolution: int = DEFAULT_RESOLUTION
    dist: float = DEFAULT_DIST
    splat_eps: float = 1e-10
    # search
    n_elev: int = 4
    n_azim: int = 12
    n_theta: int = 4
    elev_min_deg: float = -30.0
    elev_max_deg: float = 60.0
    theta_min_deg: float = -45.0
    theta_max_deg: float = 45.0
    top_k: int = 5
    # refinement
    lr: float = 0.01
    weight_decay: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    steps: int = 50
    fd_step_deg: float = 0.5
    # queries
    noise_sigma: float = 0.05
    levels: list = ("L0", "L1", "L2", "L3")
    queries_per_category: int = 25
    # output
    heatmaps: bool = False

    def __post_init__(self):
        for name in ("categories", "scales", "levels"):
            setattr(self, name, [list(x) if isinstance(x, tuple) else x for x in getattr(self, name)])
        self.validate()

    def validate(self) -> None:
        if self.per_category < 1 or self.queries_per_category < 0:
            raise ConfigError("per_category must be >= 1 and queries_per_category >= 0")
        sizes = [s[0] for s in self.scales]
        if any(b >= a for a, b in zip(sizes, sizes[1:])) or sizes[0] > self.n_points:
            raise ConfigError(f"scales must strictly decrease and fit in n_points: {self.scales}")
        if self.top_k < 1:
            raise ConfigError("top_k must be >= 1")
        for lvl in self.levels:
            if lvl not in ("L0", "L1", "L2", "L3"):
                raise ConfigError(f"unknown occlusion level {lvl!r}")

    # -- construction ------------------------------------------------------

    @classmethod
    def keys(cls) -> list[str]:
        return [f.name for f in fields(cls)]

    @classmethod
    def from_dict(cls, d: dict) -> Config:
        unknown = set(d) - set(cls.keys())
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            return cls(**d)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def load(cls, path: str | Path) -> Config:
        try:
            d = json.loads(Path(path).read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
        if not isinstance(d, dict) or any(isinstance(v, dict) for v in d.values()):
            raise ConfigError(f"{path}: config must be a flat JSON object")
        return cls.from_dict(d)

    def to_dict(self) -> dict:
        return asdict(self)

    def replace(self, **overrides) -> Config:
        d = self.to_dict()
        d.update(overrides)
        return Config.from_dict(d)

    # -- derived objects ---------------------------------------------------

    def camera(self) -> Camera:
        return Camera.default(self.resolution, self.dist)

    def splat(self) -> SplatConfig:
        return SplatConfig(self.radius, self.points_per_pixel, self.resolution, self.resolution, self.splat_eps)

    def grid(self, n_elev=None, n_azim=None, n_theta=None) -> PoseGrid:
        return build_pose_grid(
            n_elev or self.n_elev,
            n_azim or self.n_azim,
            n_theta or self.n_theta,
            self.elev_range,
            self.theta_range,
            self.dist,
        )

    def adamw(self) -> AdamWConfig:
        return AdamWConfig(
            self.lr, self.weight_decay, self.beta1, self.beta2, self.adam_eps, self.steps, math.radians(self.fd_step_deg)
        )

    @property
    def elev_range(self) -> tuple[float, float]:
        return math.radians(self.elev_min_deg), math.radians(self.elev_max_deg)

    @property
    def theta_range(self) -> tuple[float, float]:
        return math.radians(self.theta_min_deg), math.radians(self.theta_max_deg)

    @property
    def scale_spec(self) -> tuple[tuple[int, int], ...]:
        return tuple((int(n), int(d)) for n, d in self.scales)
