"""Run configuration: one flat record covering model, losses, and schedule.

Defaults are the published values where the method defines them (loss
weights, optimizer constants, d_max, lambda_l, lambda_motion, D-bar, EMA
momentum) and desk-scale values where only full-scale numbers exist
(network widths, iteration milestones, sampling counts). Everything is
serializable to JSON so a run can be reproduced from its config hash.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

LOSS_NAMES = ("photo", "sdf", "structure", "merge", "ellipsoid", "coverage", "separation")


@dataclass
class RunConfig:
    seed: int = 0

    # parts and field
    parts: int = 8
    radius_init: float = 0.12
    radius_min: float = 1e-3
    radius_max: float = 1.0
    d_max: float = 0.02
    s_pe_init: float = 30.0
    s_d_init: float = 30.0
    s_res_init: float = 1.0
    sharpness_init: float | None = None  # None: 2x sample spacing transition width

    # networks
    traj_hidden: int = 64
    traj_layers: int = 4
    dec_hidden: int = 64
    dec_layers: int = 8
    k_time: int = 50
    k_spatial: int = 6

    # rendering
    n_samples_train: int = 48
    n_samples_render: int = 128
    near_far_margin: float = 1.1
    render_workers: int = 1
    # decoder runs only where |softmin SDF| <= d_max + sigmas/sharpness (0: everywhere)
    residual_band_sigmas: float = 6.0

    # optimizer
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 0.005

    # batching
    images_per_batch: int = 4
    rays_per_image: int = 96

    # frame schedule (desk-scale defaults; paper-scale: 10 / 10k / 80k / 150k / 200k)
    t0_frames: int = 5
    tau0: int = 500
    tau1: int = 3000
    tau2: int = 5000
    tau_final: int = 8000

    # loss weights
    lambda_photo: float = 1.0
    lambda_sdf: float = 0.2
    lambda_ellipsoid: float = 600.0
    lambda_coverage: float = 1000.0
    lambda_separation: float = 1.0
    lambda_structure_start: float = 2.0  # ramps to _end by tau0
    lambda_structure_end: float = 50.0
    lambda_merge: float = 5.0  # active from tau2
    disable_losses: list[str] = field(default_factory=list)

    # loss internals
    sigma_separation: float = 0.1
    lambda_l: float = 0.02
    lambda_motion: float = 3.0
    d_bar: float = 0.1
    ema_momentum: float = 0.01
    n_mask_samples: int = 512
    n_surface_samples: int = 64  # per ellipsoid
    eikonal_points: int = 256
    eikonal_sigma: float = 0.02
    fd_step: float = 1e-3

    # structure / merging
    structure_every: int = 1
    merge_threshold: float = 0.03

    # data
    train_cameras: list[int] | None = None  # None: all cameras

    # bookkeeping
    log_every: int = 10
    save_at: list[int] = field(default_factory=list)

    def __post_init__(self):
        for name in self.disable_losses:
            if name not in LOSS_NAMES:
                raise ValueError(f"unknown loss toggle '{name}'; expected one of {LOSS_NAMES}")
        if not (self.tau0 < self.tau1 <= self.tau2 < self.tau_final):
            raise ValueError("schedule milestones must satisfy tau0 < tau1 <= tau2 < tau_final")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def load(cls, path) -> "RunConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def loss_enabled(self, name: str) -> bool:
        return name not in self.disable_losses
