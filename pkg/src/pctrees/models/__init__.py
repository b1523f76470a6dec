"""Classifier architectures: multi-view quarter-ResNet baselines and PCT."""

from __future__ import annotations

from dataclasses import asdict

from ..errors import ConfigMismatch
from .layers import LBR, BatchNorm, Conv2d, Linear, Module
from .pct import (OffsetAttention, PCTClassifier, PCTConfig, neighbor_embed, offset_attention,
                  pct_forward, point_embed)
from .resnet import (FULL_RESNET18_WIDTHS, MultiViewCNN, ResNetBackbone, ResNetQuarterConfig,
                     backbone_parameter_count, multiview_forward)

MODEL_NAMES = ("baseline", "baselinepp", "pctrees")
_ALIASES = {"baseline++": "baselinepp"}


def canonical_name(name: str) -> str:
    name = _ALIASES.get(name, name)
    if name not in MODEL_NAMES:
        raise ConfigMismatch(f"unknown model {name!r}; expected one of {', '.join(MODEL_NAMES)}")
    return name


def build_model(name: str, num_classes: int, seed: int = 0, tiny: bool = False,
                input_points: int | None = None, fusion: str | None = None) -> Module:
    """Construct a fresh model by name.

    ``fusion`` overrides the multi-view fusion for CNN models; by default
    baseline uses separate views and baselinepp stacks them as channels.
    """
    name = canonical_name(name)
    if name == "pctrees":
        if tiny:
            cfg = PCTConfig.tiny_preset(num_classes, input_points or 128)
        else:
            cfg = PCTConfig(num_classes=num_classes, **({"input_points": input_points} if input_points else {}))
        return PCTClassifier(cfg, seed)
    fusion = fusion or ("separate" if name == "baseline" else "channels")
    cfg = ResNetQuarterConfig(input_channels=1 if fusion == "separate" else 6,
                              num_classes=num_classes, fusion=fusion)
    return MultiViewCNN(cfg, seed)


def config_text(model: Module, name: str) -> str:
    """Plain key=value description of a model, stored beside its checkpoint."""
    lines = [f"architecture={canonical_name(name)}"]
    for k, v in asdict(model.config).items():
        lines.append(f"{k}={','.join(map(str, v)) if isinstance(v, list) else v}")
    return "\n".join(lines) + "\n"


def model_from_config_text(text: str, seed: int = 0) -> tuple[str, Module]:
    kv = {}
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, _, value = line.partition("=")
        kv[key.strip()] = value.strip()
    name = canonical_name(kv.pop("architecture", ""))
    cls = PCTConfig if name == "pctrees" else ResNetQuarterConfig
    unknown = set(kv) - set(cls.__dataclass_fields__)
    if unknown:
        raise ConfigMismatch(f"unknown config keys {sorted(unknown)}")
    defaults = asdict(cls())
    parsed = {}
    for key, raw in kv.items():
        default = defaults[key]
        if isinstance(default, list):
            parsed[key] = [int(t) for t in raw.split(",") if t]
        elif isinstance(default, bool):
            parsed[key] = raw == "True"
        elif isinstance(default, (int, float)):
            parsed[key] = type(default)(raw)
        else:
            parsed[key] = raw
    cfg = cls(**parsed)
    model = PCTClassifier(cfg, seed) if name == "pctrees" else MultiViewCNN(cfg, seed)
    return name, model


__all__ = [
    "LBR", "BatchNorm", "Conv2d", "Linear", "Module", "OffsetAttention", "PCTClassifier", "PCTConfig",
    "MultiViewCNN", "ResNetBackbone", "ResNetQuarterConfig", "FULL_RESNET18_WIDTHS", "MODEL_NAMES",
    "backbone_parameter_count", "build_model", "canonical_name", "config_text", "model_from_config_text",
    "multiview_forward", "neighbor_embed", "offset_attention", "pct_forward", "point_embed",
]
