"""Run configuration: nested defaults, presets, overrides and a stable hash."""

import copy
import hashlib
import json
from dataclasses import fields
from pathlib import Path

import yaml

from .audio import MelConfig
from .exceptions import ConfigurationError

DEFAULTS = {
    "schedule": {"beta0": 0.05, "beta1": 20.0, "t_min": 1e-4},
    "model": {"n_mels": 80, "n_units": 200, "hidden": 128, "n_blocks": 2, "n_heads": 2,
              "spk_dim": 16, "dec_channels": 64},
    "units": {"K": 200, "extractor": "mel-frames", "max_iters": 100, "seed": 0},
    "pretrain": {"lr": 1e-4, "steps": 1000, "batch_size": 16},
    "unit_encoder": {"lr": 1e-4, "steps": 1000},
    "finetune": {"lr": 2e-5, "steps": 500, "batch_size": 4, "min_reference_seconds": 2.0},
    "sample": {"n_steps": 50, "tts_gamma": 1.0, "vc_gamma": 1.5, "temperature": 1.0},
    "train": {"seed": 0, "clip_norm": 1.0},
    "mel": {f.name: f.default for f in fields(MelConfig)},
}

# desk-scale settings used with the synthetic corpus
PRESETS = {
    "toy": {
        "model": {"n_mels": 16, "n_units": 16, "hidden": 64},
        "units": {"K": 16, "extractor": "mel-cmvn"},
        "pretrain": {"lr": 1e-3, "steps": 2000, "batch_size": 8},
        "unit_encoder": {"lr": 1e-3, "steps": 1000},
        "mel": {"n_mels": 16},
    },
}


class RunConfig:
    """Validated nested configuration; unknown sections or keys are rejected."""

    def __init__(self, data=None):
        self.data = copy.deepcopy(DEFAULTS)
        if data:
            self.update(data)

    def update(self, data, origin="config"):
        for section, values in data.items():
            if section not in DEFAULTS:
                raise ConfigurationError(f"{origin}: unknown section {section!r}")
            if not isinstance(values, dict):
                raise ConfigurationError(f"{origin}: section {section!r} must be a mapping")
            for key, value in values.items():
                self.set(section, key, value, origin)
        return self

    def set(self, section, key, value, origin="config"):
        if section not in DEFAULTS or key not in DEFAULTS[section]:
            raise ConfigurationError(f"{origin}: unknown key {section}.{key}")
        default = DEFAULTS[section][key]
        if isinstance(default, bool):
            ok = isinstance(value, bool)
        elif isinstance(default, int):
            ok = isinstance(value, int) and not isinstance(value, bool)
        elif isinstance(default, float):
            if isinstance(value, str):
                # YAML 1.1 reads exponent literals without a dot (``1e-3``) as strings
                try:
                    value = float(value)
                except ValueError:
                    pass
            ok = isinstance(value, (int, float)) and not isinstance(value, bool)
            value = float(value) if ok else value
        else:
            ok = isinstance(value, type(default))
        if not ok:
            raise ConfigurationError(f"{origin}: {section}.{key} expects {type(default).__name__}, got {value!r}")
        self.data[section][key] = value

    def __getitem__(self, section):
        return self.data[section]

    def digest(self):
        blob = json.dumps(self.data, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def to_json(self):
        return json.dumps(self.data, sort_keys=True, indent=2)

    def mel_config(self):
        return MelConfig(**self.data["mel"])

    def estimator_params(self):
        d = self.data
        return dict(
            n_mels=d["model"]["n_mels"], n_units=d["model"]["n_units"], hidden=d["model"]["hidden"],
            n_blocks=d["model"]["n_blocks"], n_heads=d["model"]["n_heads"], spk_dim=d["model"]["spk_dim"],
            dec_channels=d["model"]["dec_channels"],
            beta0=d["schedule"]["beta0"], beta1=d["schedule"]["beta1"], t_min=d["schedule"]["t_min"],
            pretrain_lr=d["pretrain"]["lr"], pretrain_steps=d["pretrain"]["steps"],
            batch_size=d["pretrain"]["batch_size"],
            unit_lr=d["unit_encoder"]["lr"], unit_steps=d["unit_encoder"]["steps"],
            finetune_lr=d["finetune"]["lr"], finetune_steps=d["finetune"]["steps"],
            finetune_batch_size=d["finetune"]["batch_size"],
            min_reference_seconds=d["finetune"]["min_reference_seconds"],
            frame_rate_hz=self.mel_config().frame_rate_hz,
            n_sampling_steps=d["sample"]["n_steps"], tts_gamma=d["sample"]["tts_gamma"],
            vc_gamma=d["sample"]["vc_gamma"], temperature=d["sample"]["temperature"],
            clip_norm=d["train"]["clip_norm"], random_state=d["train"]["seed"],
        )


def parse_override(text):
    """``section.key=value`` with the value parsed as a YAML scalar."""
    if "=" not in text or "." not in text.split("=", 1)[0]:
        raise ConfigurationError(f"override {text!r} is not of the form section.key=value")
    lhs, raw = text.split("=", 1)
    section, key = lhs.split(".", 1)
    return section, key, yaml.safe_load(raw)


def load_config(path=None, preset=None, overrides=()):
    """Defaults, then preset, then file, then ``section.key=value`` overrides."""
    cfg = RunConfig()
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigurationError(f"unknown preset {preset!r}; known: {sorted(PRESETS)}")
        cfg.update(PRESETS[preset], f"preset {preset}")
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigurationError(f"config file not found: {p}")
        text = p.read_text()
        try:
            data = json.loads(text) if p.suffix == ".json" else (yaml.safe_load(text) or {})
        except (ValueError, yaml.YAMLError) as exc:
            raise ConfigurationError(f"cannot parse {p}: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigurationError(f"{p}: top level must be a mapping")
        cfg.update(data, str(p))
    for text in overrides:
        section, key, value = parse_override(text)
        cfg.set(section, key, value, "override")
    return cfg
