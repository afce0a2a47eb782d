"""Experiment configuration: one YAML file drives everything.

The config nests four sections: data (synthetic domain recipe), model
(layer widths), train (all TrainConfig knobs), switches (term gates). Seeds
are mandatory, with no wall-clock fallback anywhere, so a config plus
its datasets pins every output byte. Parsing is strict: unknown keys are
rejected rather than ignored.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
import yaml

from .domains import (Dataset, DomainSpec, default_prototypes, generate,
                      paired_rotation)
from .trainer import TrainConfig


class ConfigError(ValueError):
    """Missing, unknown, or out-of-range configuration values."""


@dataclass
class DataConfig:
    """Recipe for the three dataset files of one experiment."""

    categories: int = 10
    feature_dim: int = 8
    height: int = 8
    width: int = 8
    source_count: int = 12
    target_train_count: int = 12
    target_eval_count: int = 8
    noise_sigma: float = 0.33
    coherence_scale: int = 4
    rotation_degrees: float = 30.0
    shift_offset: float | list = 0.5
    target_noise_sigma: float = 0.33
    dir: str = "data"

    def __post_init__(self):
        for name in ("source_count", "target_train_count", "target_eval_count"):
            if getattr(self, name) < 1:
                raise ConfigError(f"data.{name} must be >= 1, got {getattr(self, name)}")
        if self.categories < 2 or self.feature_dim < 2:
            raise ConfigError("data needs categories >= 2 and feature_dim >= 2")
        if self.height < 1 or self.width < 1:
            raise ConfigError("grid size must be positive")
        if self.noise_sigma < 0 or self.target_noise_sigma < 0:
            raise ConfigError("noise sigmas must be >= 0")

    def offset_vector(self) -> np.ndarray:
        if isinstance(self.shift_offset, (int, float)):
            return np.full(self.feature_dim, float(self.shift_offset))
        off = np.asarray(self.shift_offset, dtype=np.float64)
        if off.shape != (self.feature_dim,):
            raise ConfigError(
                f"shift_offset list must have {self.feature_dim} entries")
        return off


@dataclass
class ModelConfig:
    hidden: int = 32
    embed_dim: int = 16    # encoder output width
    anchor_dim: int = 16   # alignment space width, where anchors live

    def __post_init__(self):
        if min(self.hidden, self.embed_dim, self.anchor_dim) < 1:
            raise ConfigError("model widths must be positive")

    def dims(self) -> dict:
        return {"hidden": self.hidden, "E": self.embed_dim, "F": self.anchor_dim}


# named ablation variants: overrides applied to the train config
ABLATION_VARIANTS = {
    "source-only": dict(enable_warmup=False, enable_dis_source=False,
                        enable_dis_target=False, enable_ce_target_anchor=False,
                        enable_ce_target_prob=False),
    "warmup": dict(stages=0),
    "dis": dict(enable_ce_target_anchor=False, enable_ce_target_prob=False),
    "ce_t": dict(enable_dis_source=False, enable_dis_target=False,
                 enable_ce_target_prob=False),
    "ce_tp": dict(enable_dis_source=False, enable_dis_target=False,
                  enable_ce_target_anchor=False),
    "dis+ce_t": dict(enable_ce_target_prob=False),
    "full": dict(),
}

_SWITCH_KEYS = {
    "warmup": "enable_warmup",
    "dis_source": "enable_dis_source",
    "dis_target": "enable_dis_target",
    "ce_target_anchor": "enable_ce_target_anchor",
    "ce_target_prob": "enable_ce_target_prob",
}

_TRAIN_KEYS = ("stages", "iterations_per_stage", "pretrain_iterations",
               "warmup_iterations", "base_lr", "poly_power", "momentum",
               "weight_decay", "lambda_dis", "lambda_ce", "margin_threshold",
               "prob_threshold", "adversarial_weight", "restart_lr_each_stage",
               "balance_target_ce")


@dataclass
class ExperimentConfig:
    seed: int
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = None
    out_dir: str = "runs/default"
    ablate_variants: list = field(default_factory=lambda: ["warmup", "dis", "ce_t",
                                                           "dis+ce_t", "full"])

    def __post_init__(self):
        if self.train is None:
            self.train = TrainConfig(seed=self.seed)
        if self.train.seed != self.seed:
            raise ConfigError("train.seed must equal the experiment seed")
        seen = set()
        for v in self.ablate_variants:
            if v not in ABLATION_VARIANTS:
                raise ConfigError(f"unknown ablation variant {v!r}; "
                                  f"known: {sorted(ABLATION_VARIANTS)}")
            if v in seen:
                raise ConfigError(f"duplicate ablation variant {v!r}")
            seen.add(v)

    def with_seed(self, seed: int) -> "ExperimentConfig":
        return replace(self, seed=seed, train=replace(self.train, seed=seed))

    def variant_train_config(self, name: str) -> TrainConfig:
        return replace(self.train, **ABLATION_VARIANTS[name])


def _take(d: dict, section: str, allowed) -> dict:
    unknown = set(d) - set(allowed)
    if unknown:
        raise ConfigError(f"unknown key(s) in {section}: {sorted(unknown)}")
    return d


def config_from_dict(raw: dict) -> ExperimentConfig:
    raw = dict(_take(raw, "config",
                     ("seed", "out_dir", "data", "model", "train", "switches",
                      "ablate")))
    if "seed" not in raw:
        raise ConfigError("seed is required; there is no default")
    seed = int(raw["seed"])
    data = DataConfig(**_take(dict(raw.get("data", {})), "data",
                              DataConfig.__dataclass_fields__))
    model = ModelConfig(**_take(dict(raw.get("model", {})), "model",
                                ModelConfig.__dataclass_fields__))
    train_kwargs = _take(dict(raw.get("train", {})), "train", _TRAIN_KEYS)
    switch_raw = _take(dict(raw.get("switches", {})), "switches", _SWITCH_KEYS)
    for key, attr in _SWITCH_KEYS.items():
        if key in switch_raw:
            train_kwargs[attr] = bool(switch_raw[key])
    train = TrainConfig(seed=seed, **train_kwargs)
    ablate_raw = _take(dict(raw.get("ablate", {})), "ablate", ("variants",))
    kwargs = {"seed": seed, "data": data, "model": model, "train": train}
    if "out_dir" in raw:
        kwargs["out_dir"] = str(raw["out_dir"])
    if "variants" in ablate_raw:
        kwargs["ablate_variants"] = list(ablate_raw["variants"])
    return ExperimentConfig(**kwargs)


def config_to_dict(cfg: ExperimentConfig) -> dict:
    t = cfg.train
    return {
        "seed": cfg.seed,
        "out_dir": cfg.out_dir,
        "data": {k: getattr(cfg.data, k) for k in DataConfig.__dataclass_fields__},
        "model": {k: getattr(cfg.model, k) for k in ModelConfig.__dataclass_fields__},
        "train": {k: getattr(t, k) for k in _TRAIN_KEYS},
        "switches": {k: getattr(t, attr) for k, attr in _SWITCH_KEYS.items()},
        "ablate": {"variants": list(cfg.ablate_variants)},
    }


def load_config(path) -> ExperimentConfig:
    with open(path, "r", encoding="utf-8") as f:
        raw = yaml.safe_load(f)
    if not isinstance(raw, dict):
        raise ConfigError(f"config file {path} must hold a mapping")
    return config_from_dict(raw)


def save_config(cfg: ExperimentConfig, path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        yaml.safe_dump(config_to_dict(cfg), f, sort_keys=False)


DEFAULT_CONFIG_YAML = """\
# Default experiment: ten-category grids under a rotation-plus-offset
# appearance shift. Values mirror the library defaults; edit freely.
seed: 0                      # required; no wall-clock fallback exists
out_dir: runs/default
data:
  categories: 10
  feature_dim: 8
  height: 8
  width: 8
  source_count: 12
  target_train_count: 12
  target_eval_count: 8
  noise_sigma: 0.33          # source feature noise
  coherence_scale: 4         # label block size in pixels
  rotation_degrees: 30.0     # appearance shift: paired-axis rotation
  shift_offset: 0.5          # appearance shift: additive offset per dim
  target_noise_sigma: 0.33
  dir: data
model:
  hidden: 32
  embed_dim: 16
  anchor_dim: 16             # width of the space anchors live in
train:
  stages: 3                  # K, number of frozen-anchor stages
  iterations_per_stage: 120  # L
  pretrain_iterations: 120
  warmup_iterations: 120
  base_lr: 0.00025           # initial learning rate of the poly schedule
  poly_power: 0.9            # poly decay exponent
  momentum: 0.9
  weight_decay: 0.0001
  lambda_dis: 0.3            # lambda1, weight of the distance terms
  lambda_ce: 0.7             # lambda2, weight of the target CE terms
  margin_threshold: 2.5      # delta_d, activation margin on anchor distances
  prob_threshold: 0.95       # p0, probability activation floor
  adversarial_weight: 0.01   # weight of the warm-up alignment loss
  restart_lr_each_stage: false
  balance_target_ce: false   # true divides target CE terms by active count
switches:                    # ablation gates; all on = the full method
  warmup: true
  dis_source: true
  dis_target: true
  ce_target_anchor: true
  ce_target_prob: true
ablate:
  variants: [warmup, dis, ce_t, dis+ce_t, full]
"""


def default_config(seed: int = 0) -> ExperimentConfig:
    cfg = config_from_dict(yaml.safe_load(DEFAULT_CONFIG_YAML))
    return cfg.with_seed(seed) if seed != cfg.seed else cfg


def build_domain_specs(data: DataConfig, seed: int) -> tuple[DomainSpec, DomainSpec]:
    """Source and target domain recipes sharing one prototype set.

    Domain seeds are derived from the experiment seed with distinct role
    offsets, so the two domains (and the two target splits) never reuse a
    grid stream.
    """
    protos = default_prototypes(data.categories, data.feature_dim, seed=seed)
    source = DomainSpec.identity(data.categories, data.feature_dim,
                                 noise_sigma=data.noise_sigma,
                                 coherence_scale=data.coherence_scale,
                                 seed=seed * 10 + 1, prototypes=protos)
    target = source.shifted(
        transform_matrix=paired_rotation(data.feature_dim, data.rotation_degrees),
        transform_offset=data.offset_vector(),
        noise_sigma=data.target_noise_sigma,
        seed=seed * 10 + 2)
    return source, target


def build_datasets(cfg: ExperimentConfig) -> tuple[Dataset, Dataset, Dataset]:
    """Generate (source, target_train, target_eval) in memory."""
    src_spec, tgt_spec = build_domain_specs(cfg.data, cfg.seed)
    d = cfg.data
    source = generate(src_spec, d.source_count, d.height, d.width, "source")
    target_train = generate(tgt_spec, d.target_train_count, d.height, d.width,
                            "target-train")
    eval_spec = tgt_spec.shifted(seed=cfg.seed * 10 + 3)
    target_eval = generate(eval_spec, d.target_eval_count, d.height, d.width,
                           "target-eval")
    return source, target_train, target_eval


DATASET_FILENAMES = {
    "source": "source.grids",
    "target-train": "target-train.grids",
    "target-eval": "target-eval.grids",
}
