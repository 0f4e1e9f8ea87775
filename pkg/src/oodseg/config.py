"""Experiment configuration (YAML) with strict key checking.

Schema::

    seed: 0                    # global seed
    out: experiment            # output directory (the CLI --out flag wins)
    data:
      source: synthetic        # or "manifest"
      scale: desk              # synthetic only: desk | full
      manifest: path/to/manifest.txt   # manifest only
      crop: null               # preset name or {origin: [x,y,z], size: [x,y,z]}
      pad_to: null             # [x, y, z]
      foreground_classes: [1]
      envs: {}                 # synthetic only: env id -> EnvSpec field overrides
    ood_env: 2                 # optional; test-only environment
    folds: 5
    val_fraction: 0.1
    budgets: {0: [6, 4]}       # optional labeled (train, val) per env
    training: {...}            # TrainConfig fields shared by every method
    methods:                   # run name -> TrainConfig overrides
      erm: {}
      vrex: {lambda_vrex: 10}

A run name that is not itself a method must set ``method``.
"""
from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import yaml

from .synthgen import EnvSpec, default_env_suite
from .trainer import METHODS, TrainConfig
from .volumes import CROP_PRESETS

TOP_KEYS = {"seed", "out", "data", "ood_env", "folds", "val_fraction", "budgets", "training", "methods"}
DATA_KEYS = {"source", "scale", "manifest", "crop", "pad_to", "foreground_classes", "envs"}
DISPLAY_NAMES = {
    "erm": "U-Net",
    "vrex": "U-Net + V-REx",
    "domain_prediction": "Domain-Prediction",
    "combined": "Combined",
    "irmv1": "U-Net + IRMv1",
}


class ConfigError(ValueError):
    pass


def _reject_unknown(d, allowed, where):
    unknown = set(d) - set(allowed)
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {sorted(unknown)}")


@dataclass
class DataConfig:
    source: str = "synthetic"
    scale: str = "desk"
    manifest: Optional[str] = None
    crop: Optional[Union[str, dict]] = None
    pad_to: Optional[Tuple[int, int, int]] = None
    foreground_classes: Tuple[int, ...] = (1,)
    envs: Dict[int, dict] = field(default_factory=dict)


@dataclass
class ExperimentConfig:
    data: DataConfig
    methods: Dict[str, dict]
    seed: int = 0
    out: Optional[str] = None
    ood_env: Optional[int] = None
    folds: int = 5
    val_fraction: float = 0.1
    budgets: Dict[int, Tuple[int, int]] = field(default_factory=dict)
    training: dict = field(default_factory=dict)
    source_text: str = ""

    # ------------------------------------------------------------------ access

    def env_specs(self) -> List[EnvSpec]:
        specs = default_env_suite(self.data.scale, seed=self.seed)
        by_id = {s.env_id: s for s in specs}
        out = []
        for s in specs:
            over = {k: tuple(v) if isinstance(v, list) else v
                    for k, v in self.data.envs.get(s.env_id, {}).items()}
            out.append(EnvSpec(**{**s.__dict__, **over}) if over else s)
        unknown = set(self.data.envs) - set(by_id)
        if unknown:
            raise ConfigError(f"overrides for unknown synthetic env(s) {sorted(unknown)}")
        return out

    def train_config(self, run: str) -> TrainConfig:
        if run not in self.methods:
            raise ConfigError(f"unknown method run {run!r}; configured: {sorted(self.methods)}")
        merged = copy.deepcopy(self.training)
        over = copy.deepcopy(self.methods[run])
        if "augmentation" in over and "augmentation" in merged:
            merged["augmentation"] = {**merged["augmentation"], **over.pop("augmentation")}
        merged.update(over)
        merged.setdefault("method", run)
        merged.setdefault("seed", self.seed)
        try:
            return TrainConfig.from_dict(merged)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"methods.{run}: {exc}") from exc

    def display_name(self, run: str) -> str:
        return DISPLAY_NAMES.get(run, run)

    @property
    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()

    def to_dict(self) -> dict:
        d = self.data
        return {
            "seed": self.seed,
            "data": {
                "source": d.source, "scale": d.scale, "manifest": d.manifest, "crop": d.crop,
                "pad_to": None if d.pad_to is None else list(d.pad_to),
                "foreground_classes": list(d.foreground_classes),
                "envs": {str(k): v for k, v in sorted(d.envs.items())},
            },
            "ood_env": self.ood_env,
            "folds": self.folds,
            "val_fraction": self.val_fraction,
            "budgets": {str(k): list(v) for k, v in sorted(self.budgets.items())},
            "training": self.training,
            "methods": self.methods,
        }


def parse_config(raw: dict, text: str = "") -> ExperimentConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config must be a mapping")
    _reject_unknown(raw, TOP_KEYS, "config")
    data_raw = raw.get("data") or {}
    if not isinstance(data_raw, dict):
        raise ConfigError("data must be a mapping")
    _reject_unknown(data_raw, DATA_KEYS, "data")
    data = DataConfig(
        source=data_raw.get("source", "synthetic"),
        scale=data_raw.get("scale", "desk"),
        manifest=data_raw.get("manifest"),
        crop=data_raw.get("crop"),
        pad_to=None if data_raw.get("pad_to") is None else tuple(int(x) for x in data_raw["pad_to"]),
        foreground_classes=tuple(int(x) for x in data_raw.get("foreground_classes", (1,))),
        envs={int(k): dict(v) for k, v in (data_raw.get("envs") or {}).items()},
    )
    if data.source not in ("synthetic", "manifest"):
        raise ConfigError(f"data.source must be 'synthetic' or 'manifest', got {data.source!r}")
    if data.scale not in ("desk", "full"):
        raise ConfigError(f"data.scale must be 'desk' or 'full', got {data.scale!r}")
    if data.source == "manifest" and not data.manifest:
        raise ConfigError("data.manifest is required when data.source is 'manifest'")
    if isinstance(data.crop, str) and data.crop not in CROP_PRESETS:
        raise ConfigError(f"unknown crop preset {data.crop!r}")
    if isinstance(data.crop, dict):
        _reject_unknown(data.crop, {"origin", "size"}, "data.crop")
    env_fields = set(EnvSpec.__dataclass_fields__) - {"env_id"}
    for env_id, over in data.envs.items():
        _reject_unknown(over, env_fields, f"data.envs.{env_id}")

    methods = raw.get("methods")
    if isinstance(methods, list):
        methods = {m: {} for m in methods}
    if not methods or not isinstance(methods, dict):
        raise ConfigError("methods must be a non-empty list or mapping")
    methods = {str(k): dict(v or {}) for k, v in methods.items()}
    for name, over in methods.items():
        if name not in METHODS and "method" not in over:
            raise ConfigError(f"run {name!r} is not a method name and sets no 'method'")
    training = dict(raw.get("training") or {})
    if "method" in training:
        raise ConfigError("training may not set 'method'; use methods")

    try:
        budgets = {int(k): (int(v[0]), int(v[1])) for k, v in (raw.get("budgets") or {}).items()}
    except (TypeError, ValueError, IndexError) as exc:
        raise ConfigError(f"budgets must map env id to [n_train, n_val]: {exc}") from exc
    cfg = ExperimentConfig(
        data=data, methods=methods, seed=int(raw.get("seed", 0)), out=raw.get("out"),
        ood_env=None if raw.get("ood_env") is None else int(raw["ood_env"]),
        folds=int(raw.get("folds", 5)), val_fraction=float(raw.get("val_fraction", 0.1)),
        budgets=budgets, training=training, source_text=text,
    )
    if cfg.folds < 2:
        raise ConfigError("folds must be >= 2")
    if not 0 < cfg.val_fraction < 1:
        raise ConfigError("val_fraction must lie in (0, 1)")
    if data.source == "synthetic":
        ids = {s.env_id for s in cfg.env_specs()}
        for env_id in [cfg.ood_env, *cfg.budgets]:
            if env_id is not None and env_id not in ids:
                raise ConfigError(f"config references unknown environment {env_id}")
    for name in methods:
        cfg.train_config(name)  # validates every method block up front
    return cfg


def load_config(path: Union[str, Path]) -> ExperimentConfig:
    text = Path(path).read_text()
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: invalid YAML: {exc}") from exc
    return parse_config(raw or {}, text)


_DEFAULT_TEMPLATE = """\
# Default experiment: three synthetic sites, the third held out as OoD.
seed: 0
data:
  source: synthetic
  scale: {scale}
ood_env: 2
folds: {folds}
val_fraction: 0.1
training:
  learning_rate: {lr:.1e}
  dp_learning_rate: {lr:.1e}
  max_epochs: {epochs}
  patience: {patience}
  warmup_epochs: {warmup}
  joint_epochs: {joint}
  alpha: 0.2
  beta: 0.1
  dp_inner_steps: 2
methods:
  erm: {{}}
  vrex: {{lambda_vrex: 10.0}}
  domain_prediction: {{}}
  combined: {{lambda_vrex: 10.0}}
"""


def default_config_text(scale: str = "desk") -> str:
    if scale == "desk":
        return _DEFAULT_TEMPLATE.format(scale=scale, folds=2, lr=1e-3, epochs=32, patience=10,
                                        warmup=6, joint=10)
    if scale == "full":
        return _DEFAULT_TEMPLATE.format(scale=scale, folds=5, lr=5e-5, epochs=300, patience=30,
                                        warmup=20, joint=20)
    raise ConfigError(f"unknown scale {scale!r}")
