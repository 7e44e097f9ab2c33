"""Experiment configuration files.

A config is a JSON object with up to three sections; every key is optional
and unknown keys are rejected::

    {
      "fed":     { FedConfig fields, "privacy": null | { PrivacySpec fields } },
      "codec":   { "preset": "resnet2d-desk", "spec": null | { CodecSpec fields },
                   "epochs": 200, "lr": 2e-4, "batch_size": 4,
                   "random_state": 0, "train_fraction": 0.9, "split_seed": 0 },
      "desk":    true
    }

``desk: true`` (the default) starts from :func:`fedcodec.fedsim.desk_config`
(mean aggregation); ``false`` starts from plain :class:`FedConfig` defaults.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

from .codec import CodecSpec, get_preset
from .fedsim import FedConfig, desk_config
from .privacy import PrivacySpec


class ConfigError(ValueError):
    """Malformed or unknown configuration content."""


@dataclass
class CodecTraining:
    preset: str = "resnet2d-desk"
    spec: Optional[dict] = None
    epochs: int = 200
    lr: float = 2e-4
    batch_size: int = 4
    random_state: int = 0
    train_fraction: float = 0.9
    split_seed: int = 0

    def build_spec(self, canvas_shape) -> CodecSpec:
        if self.spec is not None:
            try:
                return CodecSpec.from_dict({"input_shape": list(canvas_shape), **self.spec})
            except TypeError as exc:
                raise ConfigError(f"bad codec spec: {exc}") from None
        return get_preset(self.preset, tuple(canvas_shape))


@dataclass
class ExperimentConfig:
    fed: FedConfig = field(default_factory=desk_config)
    codec: CodecTraining = field(default_factory=CodecTraining)
    desk: bool = True

    def to_dict(self) -> dict:
        return {"fed": self.fed.to_dict(), "codec": asdict(self.codec), "desk": self.desk}


def _reject_unknown(section: str, given: dict, allowed) -> None:
    if not isinstance(given, dict):
        raise ConfigError(f"section {section!r} must be an object")
    unknown = sorted(set(given) - set(allowed))
    if unknown:
        raise ConfigError(f"unknown key(s) in {section!r}: {', '.join(unknown)}")


def parse_config(raw: dict) -> ExperimentConfig:
    _reject_unknown("<root>", raw, ("fed", "codec", "desk"))
    desk = raw.get("desk", True)
    if not isinstance(desk, bool):
        raise ConfigError("'desk' must be true or false")
    fed_raw = dict(raw.get("fed", {}))
    _reject_unknown("fed", fed_raw, [f.name for f in fields(FedConfig)])
    priv = fed_raw.pop("privacy", None)
    if priv is not None:
        _reject_unknown("fed.privacy", priv, [f.name for f in fields(PrivacySpec)])
        try:
            fed_raw["privacy"] = PrivacySpec(**priv)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"fed.privacy: {exc}") from None
    try:
        fed = desk_config(**fed_raw) if desk else FedConfig(**fed_raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"fed: {exc}") from None
    codec_raw = raw.get("codec", {})
    _reject_unknown("codec", codec_raw, [f.name for f in fields(CodecTraining)])
    codec = CodecTraining(**codec_raw)
    return ExperimentConfig(fed, codec, desk)


def load_config(path) -> ExperimentConfig:
    if path is None:
        return ExperimentConfig()
    try:
        raw = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    return parse_config(raw)


def dump_config(cfg: ExperimentConfig) -> str:
    return json.dumps(cfg.to_dict(), indent=2, sort_keys=True)
