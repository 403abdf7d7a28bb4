"""Experiment configuration.

One JSON text file drives every subcommand. Values not present fall back to
defaults; unknown keys are refused rather than ignored so typos cannot
silently change a run. Defaults that the supplementary material pins
(learning rate 1e-4, batch sizes 256 and 32, codebook 256 x 256, T = 100,
DDIM 5 steps, 25% masking, 16 frames) are encoded here.
"""

import dataclasses
import json
import os
from dataclasses import dataclass, field

from .errors import ConfigError

OUTPUT_ROOT_ENV = "DUOPOSE_OUTPUT_ROOT"


@dataclass
class DataConfig:
    corpus_dir: str = "out/corpus"
    count: int = 550
    frames: int = 16
    seed_base: int = 0
    test_fraction: float = 0.1
    pixel_noise: float = 2.0
    depth_noise: float = 0.2
    lateral_noise: float = 0.02
    pose_noise: float = 0.07
    shape_noise: float = 0.2
    occluded_pose_boost: float = 3.0
    conf_floor: float = 0.3
    sigma_floor: float = 1e-4


@dataclass
class PriorConfig:
    blocks: int = 4
    heads: int = 4
    width: int = 256
    ff_hidden: int = 512
    num_codes: int = 256
    alpha: float = 0.02
    ema_decay: float = 0.99
    reset_threshold: int = 1
    reset_window: int = 50
    batch_size: int = 256
    steps: int = 300
    lr: float = 1e-4
    grad_clip: float = 1.0
    seed: int = 0
    log_every: int = 25


@dataclass
class DiffusionConfig:
    train_timesteps: int = 100
    ddim_steps: int = 5
    mask_rate: float = 0.25
    blocks: int = 4
    heads: int = 4
    width: int = 256
    ff_hidden: int = 512
    feature_dim: int = 64
    batch_size: int = 32
    steps: int = 300
    lr: float = 1e-4
    grad_clip: float = 1.0
    seed: int = 0
    log_every: int = 25
    pen_frames: int = 4
    prior_project_every_step: bool = True
    start_noise_scale: float = 1.0
    w_reproj: float = 1.0
    w_smpl: float = 1.0
    w_joint: float = 1.0
    w_vel: float = 1.0
    w_int: float = 1.0
    w_pen: float = 1.0


@dataclass
class TrackingConfig:
    w_root: float = 1.0
    w_pose: float = 0.5
    w_iou: float = 0.3
    max_gap: int = 3


@dataclass
class EvalConfig:
    mpjpe_alignment: str = "root"  # or "none"


@dataclass
class ExperimentConfig:
    output_root: str = "out"
    seed: int = 0
    data: DataConfig = field(default_factory=DataConfig)
    prior: PriorConfig = field(default_factory=PriorConfig)
    diffusion: DiffusionConfig = field(default_factory=DiffusionConfig)
    tracking: TrackingConfig = field(default_factory=TrackingConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def resolve_output_root(self) -> str:
        return os.environ.get(OUTPUT_ROOT_ENV, self.output_root)

    def path(self, *parts: str) -> str:
        return os.path.join(self.resolve_output_root(), *parts)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def config_hash(self) -> str:
        import hashlib

        text = json.dumps(self.to_dict(), sort_keys=True)
        return hashlib.sha256(text.encode()).hexdigest()[:16]


def _apply(obj, data: dict, path: str) -> None:
    fields = {f.name: f for f in dataclasses.fields(obj)}
    for key, value in data.items():
        if key not in fields:
            raise ConfigError(f"unknown config key: {path}{key}")
        current = getattr(obj, key)
        if dataclasses.is_dataclass(current):
            if not isinstance(value, dict):
                raise ConfigError(f"config key {path}{key} must be a table")
            _apply(current, value, f"{path}{key}.")
        else:
            expected = type(current)
            if expected is float and isinstance(value, int):
                value = float(value)
            if not isinstance(value, expected):
                raise ConfigError(
                    f"config key {path}{key} expects {expected.__name__}, "
                    f"got {type(value).__name__}"
                )
            setattr(obj, key, value)


def load_config(path: str | None = None, overrides: dict | None = None) -> ExperimentConfig:
    """Defaults, optionally overlaid by a JSON file and an override dict."""
    cfg = ExperimentConfig()
    if path:
        try:
            with open(path) as f:
                data = json.load(f)
        except FileNotFoundError as exc:
            raise ConfigError(f"config file not found: {path}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError(f"config file {path} must hold a JSON object")
        _apply(cfg, data, "")
    if overrides:
        _apply(cfg, overrides, "")
    return cfg


def save_config(cfg: ExperimentConfig, path: str) -> None:
    with open(path, "w") as f:
        json.dump(cfg.to_dict(), f, indent=1, sort_keys=True)
        f.write("\n")


def noise_config(cfg: ExperimentConfig):
    from .synth import NoiseConfig

    d = cfg.data
    return NoiseConfig(
        pixel_noise=d.pixel_noise,
        depth_noise=d.depth_noise,
        lateral_noise=d.lateral_noise,
        pose_noise=d.pose_noise,
        shape_noise=d.shape_noise,
        occluded_pose_boost=d.occluded_pose_boost,
        conf_floor=d.conf_floor,
        sigma_floor=d.sigma_floor,
    )
