"""Default configuration for every pipeline stage.

All numeric defaults follow the published operating regime; dataset presets
(``manipal``, ``okutama``, ``visdrone``) differ only in the confidence
percentile used to filter point maps.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field


CONF_PERCENTILE_PRESETS = {"manipal": 5.0, "okutama": 20.0, "visdrone": 40.0}

# COCO-17 keypoint order used by 2D pose detectors.
COCO_KEYPOINT_NAMES = [
    "nose", "left_eye", "right_eye", "left_ear", "right_ear",
    "left_shoulder", "right_shoulder", "left_elbow", "right_elbow",
    "left_wrist", "right_wrist", "left_hip", "right_hip",
    "left_knee", "right_knee", "left_ankle", "right_ankle",
]


@dataclass
class RefineConfig:
    box_ratio_limit: float = 1.2        # projected/detected bbox area ratio gate
    mask_dilation_px: int = 5           # square dilation radius for overlap gate
    keypoint_score_min: float = 0.3


@dataclass
class BackgroundConfig:
    conf_percentile: float = 40.0       # eta_conf; preset-dependent
    grid_depth: int = 7                 # Poisson grid is 2**depth cells per axis
    cg_tol: float = 1e-8
    cg_max_iter: int = 2000
    mesh_stride: int = 4                # point-map subsampling before meshing
    normal_k: int = 16


@dataclass
class ScaleConfig:
    sigma_init: float = 40.0
    learning_rate: float = 0.1
    steps: int = 30
    n_people_min: int = 5
    n_people_max: int = 10
    n_frames: int = 5
    frame_stride: int = 5
    vector_residual: bool = False       # penalize bone orientation too, not just length


@dataclass
class PlacementConfig:
    pelvis_offset: float = 1.0          # along the estimated world up-axis
    depth_search_radius: int = 3        # 7x7 neighborhood fallback for depth holes


@dataclass
class LossWeights:
    pho: float = 0.2                    # SSIM share of the photometric loss
    opacity: float = 0.05
    knn: float = 0.01
    smooth: float = 0.001

    def validate(self):
        if not (0.0 <= self.pho <= 1.0):
            raise ValueError("pho weight must lie in [0,1]")
        if min(self.opacity, self.knn, self.smooth) < 0:
            raise ValueError("loss weights must be non-negative")


@dataclass
class OptimConfig:
    iterations: int = 30000
    # Background attribute learning rates.
    bg_lr_rotation: float = 0.001
    bg_lr_scale: float = 0.005
    bg_lr_sh0: float = 0.0025
    bg_lr_sh_rest: float = 0.000125
    # Human attribute learning rates.
    h_lr_rotation: float = 0.0016
    h_lr_scale: float = 0.005
    h_lr_sh0: float = 0.0025
    h_lr_sh_rest: float = 0.000125
    # Per-frame body pose learning rates.
    pose_lr_rotation: float = 1e-5
    pose_lr_translation: float = 5e-4
    skin_lr: float = 1e-4
    # Means/opacity rates (standard splat-training defaults; means rate is
    # multiplied by scene extent and decays exponentially over the run).
    lr_mean_init: float = 1.6e-4
    lr_mean_final: float = 1.6e-6
    lr_opacity: float = 0.05
    # Densification / pruning.
    densify_grad_threshold: float = 0.0003
    densify_interval: int = 100
    densify_start: int = 500
    densify_stop: int = 15000
    prune_opacity: float = 0.005
    opacity_reset_interval: int = 3000
    split_scale_fraction: float = 0.01  # of scene extent; larger Gaussians split
    max_gaussians: int = 200000
    # Spherical harmonics band schedule.
    sh_degree_max: int = 3
    sh_degree_interval: int = 1000
    knn_k: int = 8
    test_every: int = 8                 # frame t is held out iff t % test_every == 0
    seed: int = 0


@dataclass
class InitConfig:
    altitude_mode: str = "low"          # "high": keep all points; "low": filter
    bg_stride: int = 4                  # point subsampling for Gaussian seeding
    bg_opacity: float = 0.1
    human_opacity: float = 0.9


@dataclass
class SceneConfig:
    refine: RefineConfig = field(default_factory=RefineConfig)
    background: BackgroundConfig = field(default_factory=BackgroundConfig)
    scale: ScaleConfig = field(default_factory=ScaleConfig)
    placement: PlacementConfig = field(default_factory=PlacementConfig)
    weights: LossWeights = field(default_factory=LossWeights)
    optim: OptimConfig = field(default_factory=OptimConfig)
    init: InitConfig = field(default_factory=InitConfig)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "SceneConfig":
        cfg = cls()
        for section, values in data.items():
            target = getattr(cfg, section, None)
            if target is None or not isinstance(values, dict):
                continue
            for key, value in values.items():
                if hasattr(target, key):
                    setattr(target, key, value)
        cfg.weights.validate()
        return cfg

    def apply_preset(self, name: str):
        self.background.conf_percentile = CONF_PERCENTILE_PRESETS[name]

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]
