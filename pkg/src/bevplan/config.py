"""Pipeline configuration, model-variant presets and grid profiles."""

from __future__ import annotations

from dataclasses import dataclass, field, asdict
from pathlib import Path

import yaml

from .core import GridSpec, VehicleGeometry

# Model variants and what they switch on (attention wiring, task losses,
# rasterizer truncation, training datasets, post-processing planner).
VARIANTS = {
    "M0": {"attention": "none", "task_losses": False, "truncated": False,
           "datasets": ("d_o",), "postplan": False},
    "M0a": {"attention": "none", "task_losses": True, "truncated": False,
            "datasets": ("d_o", "d_r"), "postplan": False},
    "M0b": {"attention": "branch", "task_losses": False, "truncated": False,
            "datasets": ("d_o",), "postplan": False},
    "M1": {"attention": "branch", "task_losses": True, "truncated": False,
           "datasets": ("d_o", "d_r"), "postplan": False},
    "M1a": {"attention": "raw", "task_losses": True, "truncated": False,
            "datasets": ("d_o", "d_r"), "postplan": False},
    "M1b": {"attention": "inline", "task_losses": True, "truncated": False,
            "datasets": ("d_o", "d_r"), "postplan": False},
    "M1c": {"attention": "branch", "task_losses": True, "truncated": True,
            "datasets": ("d_o", "d_r"), "postplan": False},
    "M2": {"attention": "branch", "task_losses": True, "truncated": False,
           "datasets": ("d_o", "d_r", "d_f"), "postplan": False},
    "M3": {"attention": "branch", "task_losses": True, "truncated": False,
           "datasets": ("d_o", "d_r", "d_f"), "postplan": True,
           "params_from": "M2"},
}

PROFILES = {
    # paper-faithful geometry; default for acceptance runs
    "paper": {"width_px": 200, "height_px": 200, "resolution": 0.2,
              "anchor_px": (100.0, 160.0)},
    # half-resolution profile for CI and quick iteration
    "fast": {"width_px": 100, "height_px": 100, "resolution": 0.4,
             "anchor_px": (50.0, 80.0)},
}


@dataclass
class PipelineConfig:
    workdir: str = "runs/default"
    profile: str = "paper"
    variant: str = "M2"
    scenario_dir: str = ""  # empty -> packaged suite

    n_steps: int = 10
    dt: float = 0.2
    history_window: float = 2.0
    sample_stride: int = 2
    max_speed_ref: float = 20.0

    seed: int = 0
    learning_rate: float = 3e-4
    batch_size: int = 8
    epochs: int = 10
    imitation_weights: tuple = (1.0, 1.0, 1.0, 0.1)
    task_weight: float = 10.0
    imitation_dropout_p: float = 0.5

    max_lateral_offset: float = 2.0
    curvature_max: float = 0.2
    feedback_T: int = 5
    feedback_iterations: int = 1
    rejoin_horizon: int = 10
    frame_stride: int = 8
    emit_stride: int = 2
    emit_cap: int = 3

    raster_alpha: float = 0.5
    vehicle_length: float = 4.8
    vehicle_width: float = 2.1
    wheelbase: float = 2.8
    steer_max: float = 0.52
    accel_max: float = 4.0

    backbone_channels: tuple = (16, 24, 32, 48, 64)
    attention_tap: int = 1
    encode_dim: int = 64
    state_embed_dim: int = 32
    hidden_dim: int = 128

    pass_rate_floor: float = 0.0  # evaluate exits nonzero below this

    def __post_init__(self):
        if self.profile not in PROFILES:
            raise ValueError(f"unknown profile {self.profile!r}")
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")
        self.imitation_weights = tuple(self.imitation_weights)
        self.backbone_channels = tuple(self.backbone_channels)

    def grid(self) -> GridSpec:
        p = PROFILES[self.profile]
        return GridSpec(p["width_px"], p["height_px"], p["resolution"],
                        tuple(p["anchor_px"]))

    def geometry(self) -> VehicleGeometry:
        return VehicleGeometry(length=self.vehicle_length, width=self.vehicle_width,
                               wheelbase=self.wheelbase)

    def variant_spec(self) -> dict:
        return VARIANTS[self.variant]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["imitation_weights"] = list(self.imitation_weights)
        d["backbone_channels"] = list(self.backbone_channels)
        return d

    @staticmethod
    def from_dict(d: dict) -> "PipelineConfig":
        known = {f for f in PipelineConfig.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return PipelineConfig(**d)

    def save(self, path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8") as f:
            yaml.safe_dump(self.to_dict(), f, sort_keys=True)

    @staticmethod
    def load(path) -> "PipelineConfig":
        with open(path, "r", encoding="utf-8") as f:
            return PipelineConfig.from_dict(yaml.safe_load(f))
