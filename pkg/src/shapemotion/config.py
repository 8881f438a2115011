"""Run configuration: nested dataclasses, named profiles and strict file loading."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import yaml

from .datagen import SynthConfig
from .errors import ConfigError, InvalidArgument, ModelConfigurationError
from .eval_metrics import ExtractorConfig
from .lm_predictor import PredictorConfig
from .sa_vae import SAVAEConfig

OUTPUT_ROOT_ENV = "SHAPEMOTION_OUTPUT_ROOT"


@dataclass
class EvalConfig:
    n_prompts: int = 64
    repeats: int = 1
    pool_size: int = 32
    sampling: str = "top_k"
    top_k: int = 10
    exclude_tags: list = field(default_factory=lambda: ["climb"])
    extractor_samples: int = 256

    def __post_init__(self):
        if self.sampling not in ("greedy", "top_k"):
            raise ConfigError(f"eval.sampling must be greedy or top_k, not {self.sampling!r}")
        if self.repeats < 1 or self.n_prompts < 1:
            raise ConfigError("eval.repeats and eval.n_prompts must be >= 1")


@dataclass
class RunConfig:
    profile: str = "desk"
    seed: int = 0
    output_dir: str = "runs"
    data: SynthConfig = field(default_factory=SynthConfig)
    vae: SAVAEConfig = field(default_factory=SAVAEConfig)
    lm: PredictorConfig = field(default_factory=PredictorConfig)
    extractor: ExtractorConfig = field(default_factory=ExtractorConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def to_dict(self):
        return asdict(self)

    def digest(self):
        blob = json.dumps(self.to_dict(), sort_keys=True, default=list).encode()
        return hashlib.sha256(blob).hexdigest()

    def output_root(self):
        return Path(os.environ.get(OUTPUT_ROOT_ENV) or self.output_dir)


PROFILES = {
    "desk": {
        "data": {"n_samples": 512},
        "vae": {"width": 256, "batch_size": 32, "iterations": 20000, "lr_decay_step": 13334},
        # sized so the full 8k-step schedule fits in ~20 min on one CPU core
        "lm": {"d_model": 128, "enc_layers": 3, "dec_layers": 3, "ff_dim": 512, "batch_size": 32,
               "stage1_steps": 6000, "stage2_steps": 2000},
    },
    "paper": {
        "data": {"n_samples": 20000},
        "vae": {"width": 512, "batch_size": 256, "iterations": 300000, "lr_decay_step": 200000},
        "lm": {"d_model": 768, "heads": 12, "enc_layers": 12, "dec_layers": 12, "ff_dim": 3072,
               "batch_size": 64, "stage1_steps": 120000, "stage2_steps": 30000},
        "eval": {"repeats": 20, "n_prompts": 1024},
    },
    "smoke": {
        "data": {"n_samples": 40, "text_mode": "numeric"},
        "vae": {"width": 32, "res_depth": 1, "latent_dim": 32, "batch_size": 8, "iterations": 20,
                "lr_decay_step": 15},
        "lm": {"d_model": 32, "heads": 2, "enc_layers": 1, "dec_layers": 1, "ff_dim": 64, "batch_size": 8,
               "stage1_steps": 10, "stage2_steps": 5, "warmup": 2},
        "extractor": {"epochs": 2, "hidden": 32, "embed_dim": 16, "word_dim": 16},
        "eval": {"n_prompts": 32, "repeats": 2, "extractor_samples": 40},
    },
}

_SECTIONS = {"data": SynthConfig, "vae": SAVAEConfig, "lm": PredictorConfig,
             "extractor": ExtractorConfig, "eval": EvalConfig}


def _merge(base: dict, over: dict, where=""):
    out = dict(base)
    for key, value in over.items():
        if key not in base:
            raise ConfigError(f"unknown config key {where}{key!r}")
        if isinstance(base[key], dict) and not isinstance(value, dict):
            raise ConfigError(f"config key {where}{key!r} must be a mapping")
        out[key] = _merge(base[key], value, f"{where}{key}.") if isinstance(base[key], dict) else value
    return out


def build_config(doc: dict | None = None, profile: str | None = None) -> RunConfig:
    """Profile defaults overlaid with ``doc``; unknown keys raise ConfigError."""
    doc = dict(doc or {})
    profile = profile or doc.get("profile", "desk")
    if profile not in PROFILES:
        raise ConfigError(f"unknown profile {profile!r}; choose from {sorted(PROFILES)}")
    base = asdict(RunConfig())
    merged = _merge(base, PROFILES[profile], "")
    merged = _merge(merged, doc, "")
    merged["profile"] = profile
    try:
        sections = {name: cls(**merged[name]) for name, cls in _SECTIONS.items()}
        return RunConfig(profile=profile, seed=int(merged["seed"]), output_dir=str(merged["output_dir"]),
                         **sections)
    except (TypeError, InvalidArgument, ModelConfigurationError) as exc:
        raise ConfigError(str(exc)) from None


def load_config(path=None, profile=None) -> RunConfig:
    doc = {}
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        text = path.read_text()
        try:
            doc = json.loads(text) if path.suffix == ".json" else yaml.safe_load(text)
        except (json.JSONDecodeError, yaml.YAMLError) as exc:
            raise ConfigError(f"cannot parse {path}: {exc}") from None
        if doc is None:
            doc = {}
        if not isinstance(doc, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
    return build_config(doc, profile)


def config_schema():
    """Documented key schema: section -> {key: default}."""
    return {name: {f.name: (f.default if f.default is not dataclasses.MISSING else f.default_factory())
                   for f in dataclasses.fields(cls)} for name, cls in _SECTIONS.items()}
