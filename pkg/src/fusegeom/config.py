"""Pipeline configuration: built-in defaults < JSON config file < command-line flags."""
from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path


class ConfigError(ValueError):
    pass


@dataclass
class PipelineConfig:
    root: str = "."
    camera: int = 2
    seed: int = 0
    jobs: int = 1
    # anchors
    anchor_size: list = field(default_factory=lambda: [3.9, 1.6, 1.5])
    anchor_orientations: list = field(default_factory=lambda: [0.0, math.pi / 2])
    score_threshold: float = 0.5
    label_lo: float = 0.3
    label_hi: float = 0.5
    assign_pos: float = 0.6
    assign_neg: float = 0.45
    assign_reg_min: float = 0.55
    nms_iou: float = 0.85
    top_k: int = 9000
    # pseudo-LiDAR
    disparity_stride: int = 1
    filter_k: int = 20
    filter_sigma: float = 1.0
    rectify_k: int = 5
    rectify_range: float = 3.0
    rectify_step: float = 0.05
    crop_range: list = field(default_factory=lambda: [[0.0, 70.0], [-40.0, 40.0], [-3.0, 1.0]])
    # losses
    alpha_bce: float = 1.0
    beta_focal: float = 0.25
    gamma_focal: float = 2.0
    alpha_reproj: float = 1.0
    prob_epsilon: float = 1e-7
    # evaluation
    class_name: str = "Car"
    eval_mode: str = "3d"
    eval_iou: float = 0.7
    interpolation: int = 40
    recall_k: list = field(default_factory=lambda: [50, 100, 150, 200, 250, 300])

    @classmethod
    def keys(cls) -> set[str]:
        return {f.name for f in dataclasses.fields(cls)}

    def update(self, values: dict, source: str) -> None:
        unknown = set(values) - self.keys()
        if unknown:
            raise ConfigError(f"{source}: unknown config keys {sorted(unknown)}")
        types = {f.name: f.type for f in dataclasses.fields(self)}
        for k, v in values.items():
            kind = {"int": int, "float": float, "str": str}.get(types[k])
            if kind is not None:
                if kind is int and isinstance(v, float) and not v.is_integer():
                    raise ConfigError(f"{source}: {k} must be an integer, got {v!r}")
                if kind is not str and isinstance(v, (bool, str)):
                    raise ConfigError(f"{source}: {k} must be numeric, got {v!r}")
                v = kind(v)
            elif not isinstance(v, list):
                raise ConfigError(f"{source}: {k} must be a list, got {v!r}")
            setattr(self, k, v)

    def validate(self) -> None:
        def need(cond, msg):
            if not cond:
                raise ConfigError(msg)

        need(self.camera in (0, 1, 2, 3), "camera must be 0..3")
        need(self.jobs >= 1, "jobs must be >= 1")
        need(len(self.anchor_size) == 3 and all(v > 0 for v in self.anchor_size), "anchor_size must be 3 positive values")
        need(len(self.anchor_orientations) >= 1, "anchor_orientations must not be empty")
        need(0.0 <= self.score_threshold <= 1.0, "score_threshold must lie in [0, 1]")
        need(0.0 <= self.label_lo < self.label_hi <= 1.0, "need 0 <= label_lo < label_hi <= 1")
        for name in ("assign_pos", "assign_neg", "assign_reg_min", "nms_iou", "eval_iou"):
            need(0.0 <= getattr(self, name) <= 1.0, f"{name} must lie in [0, 1]")
        need(self.top_k >= 0, "top_k must be >= 0")
        need(self.disparity_stride >= 1, "disparity_stride must be >= 1")
        need(self.filter_k >= 1 and self.filter_sigma >= 0, "filter_k >= 1 and filter_sigma >= 0 required")
        need(self.rectify_k >= 1, "rectify_k must be >= 1")
        need(self.rectify_range > 0 and 0 < self.rectify_step <= self.rectify_range, "bad rectify range/step")
        need(len(self.crop_range) == 3 and all(len(r) == 2 and r[0] <= r[1] for r in self.crop_range), "bad crop_range")
        for name in ("alpha_bce", "beta_focal", "gamma_focal", "alpha_reproj"):
            need(getattr(self, name) >= 0, f"{name} must be non-negative")
        need(0 < self.prob_epsilon < 0.5, "prob_epsilon must lie in (0, 0.5)")
        need(self.eval_mode in ("2d", "bev", "3d"), "eval_mode must be 2d, bev or 3d")
        need(self.interpolation in (11, 40), "interpolation must be 11 or 40")
        need(all(int(k) >= 0 for k in self.recall_k), "recall_k must be non-negative")

    def as_dict(self) -> dict:
        return dataclasses.asdict(self)


def load_config(path: str | None, overrides: dict) -> PipelineConfig:
    cfg = PipelineConfig()
    if path:
        try:
            data = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from None
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: top level must be an object")
        cfg.update(data, path)
    cfg.update({k: v for k, v in overrides.items() if v is not None}, "command line")
    cfg.validate()
    return cfg
