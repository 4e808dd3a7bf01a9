"""Run configuration: one JSON-serializable schema covering every tunable.

Nested dataclasses mirror the JSON document one to one. Values can be
overridden from dotted key=value strings (CLI --set), with JSON-style
parsing of the value side. schema_version guards stored configs.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field

SCHEMA_VERSION = 1


@dataclass
class SpaceConfig:
    extend_m: float = 40.0           # frustum far-plane extension
    n_dv_shells: int = 8             # distant shells (n_dv + 1 samples)
    r_max: float = 1000.0
    dv_tail_delta: float = 1e4       # warped step closing the ray without sky


@dataclass
class FieldConfig:
    cr_levels: int = 8
    cr_features: int = 2
    cr_base_res_longest: int = 16
    cr_scale: float = 1.45
    cr_table_log2: int = 19
    geo_hidden: tuple = (64, 64)
    feat_dim: int = 15
    color_hidden: tuple = (64, 64)
    cr_n_freq: int = 2
    dv_levels: int = 6
    dv_features: int = 2
    dv_base_res_longest: int = 8
    dv_base_res_w: int = 16
    dv_scale: float = 1.4
    dv_table_log2: int = 17
    dv_hidden: tuple = (64,)
    dv_n_freq: int = 2
    sky_hidden: tuple = (48,)
    sky_n_freq: int = 3
    embed_dim: int = 4
    s_init: float = 20.0


@dataclass
class SamplingConfig:
    occ_longest_voxels: int = 128
    occ_threshold: float = 0.01
    occ_decay: float = 0.95
    occ_update_period: int = 300
    coarse_step: float = 0.0         # 0: AABB longest axis / coarse_divisor
    coarse_divisor: int = 96
    max_coarse: int = 96
    upsample_stages: int = 4
    per_stage: int = 8
    base_s: float = 64.0
    weight_floor: float = 1e-4
    max_cr_samples: int = 48
    max_dv_samples: int = 64


@dataclass
class LossConfig:
    geometry_lidar: float = 0.1
    geometry_mono: float = 0.05      # weight of (normal + mono_depth * depth)
    mono_depth: float = 1.0
    mask: float = 0.3
    eikonal: float = 0.01
    sparsity: float = 0.002
    entropy: float = 0.003
    s_reg_frac: float = 0.01         # sparsity scale as fraction of AABB diagonal
    uniform_samples: int = 1024      # shared by eikonal and sparsity terms


@dataclass
class PretrainConfig:
    mode: str = "road_surface"       # road_surface | capsule | none
    iters: int = 500
    samples_per_step: int = 16384
    lr: float = 5e-3
    capsule_radius: float = 8.0


@dataclass
class TrainerConfig:
    iters: int = 12000               # 15000 with lidar supervision
    rays_per_batch: int = 8192
    beams_per_batch: int = 1024
    lr: float = 1e-2                 # hash tables; other segments scale down
    lr_warmup: int = 200
    lr_min_frac: float = 0.1
    anneal_start: int = 0
    anneal_full_frac: float = 0.15
    s_floor_end: float = 2000.0      # engaged only without lidar
    s_floor_start_frac: float = 0.3333333333333333
    pose_refine: bool = False
    pose_freeze_frac: float = 0.1
    error_map_decay: float = 0.95
    uniform_pixel_frac: float = 0.5
    holdout_every: int = 10          # frame % holdout_every == offset held out
    holdout_offset: int = 5
    log_every: int = 50
    seed: int = 0
    deterministic: bool = True


@dataclass
class Config:
    schema_version: int = SCHEMA_VERSION
    space: SpaceConfig = field(default_factory=SpaceConfig)
    fields: FieldConfig = field(default_factory=FieldConfig)
    sampling: SamplingConfig = field(default_factory=SamplingConfig)
    losses: LossConfig = field(default_factory=LossConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    trainer: TrainerConfig = field(default_factory=TrainerConfig)

    def to_json(self) -> dict:
        return dataclasses.asdict(self)

    def save(self, path) -> None:
        with open(path, "w") as f:
            json.dump(self.to_json(), f, indent=1)

    @classmethod
    def from_json(cls, d: dict) -> "Config":
        version = d.get("schema_version", SCHEMA_VERSION)
        if version != SCHEMA_VERSION:
            raise ValueError(f"unsupported config schema version {version}")
        cfg = cls()
        for section_field in dataclasses.fields(cls):
            name = section_field.name
            if name == "schema_version" or name not in d:
                continue
            section = getattr(cfg, name)
            for k, v in d[name].items():
                if not hasattr(section, k):
                    raise KeyError(f"unknown config key {name}.{k}")
                if isinstance(getattr(section, k), tuple):
                    v = tuple(v)
                setattr(section, k, v)
        return cfg

    @classmethod
    def load(cls, path) -> "Config":
        with open(path) as f:
            return cls.from_json(json.load(f))

    def apply_overrides(self, pairs) -> "Config":
        """Apply dotted key=value overrides (e.g. trainer.iters=4000)."""
        for pair in pairs:
            if "=" not in pair:
                raise ValueError(f"override {pair!r} is not key=value")
            key, raw = pair.split("=", 1)
            parts = key.split(".")
            if len(parts) != 2:
                raise ValueError(f"override key {key!r} must be section.name")
            section = getattr(self, parts[0], None)
            if section is None or not hasattr(section, parts[1]):
                raise KeyError(f"unknown config key {key!r}")
            current = getattr(section, parts[1])
            try:
                value = json.loads(raw)
            except json.JSONDecodeError:
                value = raw
            if isinstance(current, tuple):
                value = tuple(value)
            elif isinstance(current, bool):
                value = bool(value)
            elif isinstance(current, int) and not isinstance(value, bool):
                value = int(value)
            elif isinstance(current, float):
                value = float(value)
            setattr(section, parts[1], value)
        return self


def desk_preset(lidar: bool) -> Config:
    """Reduced-scale defaults tuned for CPU training on the synthetic scenes."""
    cfg = Config()
    cfg.trainer.iters = 4000
    cfg.trainer.rays_per_batch = 768
    cfg.trainer.beams_per_batch = 384
    cfg.trainer.lr_warmup = 100
    cfg.sampling.occ_update_period = 150
    cfg.sampling.occ_decay = 0.45
    cfg.sampling.occ_longest_voxels = 96
    cfg.sampling.coarse_divisor = 36
    cfg.sampling.max_coarse = 64
    cfg.sampling.upsample_stages = 2
    cfg.sampling.per_stage = 6
    cfg.sampling.max_cr_samples = 32
    cfg.sampling.weight_floor = 1e-3
    cfg.losses.uniform_samples = 512
    cfg.fields.cr_levels = 8
    cfg.fields.cr_base_res_longest = 24
    cfg.fields.cr_scale = 1.42
    cfg.fields.cr_table_log2 = 19
    cfg.fields.geo_hidden = (48, 48)
    cfg.fields.color_hidden = (48, 48)
    cfg.fields.dv_levels = 5
    cfg.pretrain.iters = 300
    cfg.pretrain.samples_per_step = 8192
    if lidar:
        cfg.trainer.iters = 4000
    return cfg
