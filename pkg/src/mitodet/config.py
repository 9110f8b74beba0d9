"""Run configuration: one flat JSON document of dotted keys covering
data, model, anchors, training, augmentation, loss, and evaluation.

The flat form round-trips exactly: parse -> serialize -> parse is a
fixed point, and unknown keys are rejected rather than ignored.
"""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

from .augment import AugmentConfig
from .data import DEFAULT_HELD_OUT
from .geometry import DEFAULT_ANCHOR_LEVELS, AnchorLevelConfig
from .losses import LossConfig
from .model import BackboneConfig

OUTPUT_ROOT_ENV = "MITODET_OUTPUT_ROOT"


@dataclass(frozen=True)
class RunConfig:
    # data
    manifest: str = ""
    held_out: str = DEFAULT_HELD_OUT
    patch_size: int = 128
    patches_per_case: int = 4
    val_fraction: float = 0.1
    # training
    epochs: int = 10
    batch_size: int = 16
    learning_rate: float = 1e-5
    seed: int = 0
    pos_iou: float = 0.5
    neg_iou: float = 0.4
    # ablation components
    use_fg_head: bool = True
    use_tumor_head: bool = True
    # evaluation
    iou_threshold: float = 0.5
    score_threshold: float = 0.05
    nms_threshold: float = 0.5
    max_detections: int = 100
    # output
    output_dir: str = "runs/default"
    # nested blocks
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    anchors: tuple[AnchorLevelConfig, ...] = DEFAULT_ANCHOR_LEVELS

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ValueError("val_fraction must lie in [0, 1)")
        if self.patch_size < 1 or self.patches_per_case < 1:
            raise ValueError("patch_size and patches_per_case must be >= 1")
        if not 0.0 <= self.neg_iou <= self.pos_iou <= 1.0:
            raise ValueError("need 0 <= neg_iou <= pos_iou <= 1")
        for name in ("iou_threshold", "score_threshold", "nms_threshold"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        if self.max_detections < 1:
            raise ValueError("max_detections must be >= 1")
        strides = tuple(lv.stride for lv in self.anchors)
        if strides != self.backbone.pyramid_strides:
            raise ValueError(
                f"anchor strides {strides} do not match backbone pyramid "
                f"strides {self.backbone.pyramid_strides}"
            )


# dotted key -> (section object getter, field name); assembled below
_TOP_KEYS = {
    "data.manifest": "manifest",
    "data.held_out": "held_out",
    "data.patch_size": "patch_size",
    "data.patches_per_case": "patches_per_case",
    "data.val_fraction": "val_fraction",
    "train.epochs": "epochs",
    "train.batch_size": "batch_size",
    "train.learning_rate": "learning_rate",
    "train.seed": "seed",
    "train.pos_iou": "pos_iou",
    "train.neg_iou": "neg_iou",
    "model.use_fg_head": "use_fg_head",
    "model.use_tumor_head": "use_tumor_head",
    "eval.iou_threshold": "iou_threshold",
    "eval.score_threshold": "score_threshold",
    "eval.nms_threshold": "nms_threshold",
    "eval.max_detections": "max_detections",
    "output.dir": "output_dir",
}

_BACKBONE_KEYS = {
    "model.variant": "variant",
    "model.fpn_channels": "fpn_channels",
    "model.head_hidden": "head_hidden",
    "model.head_convs": "head_convs",
    "model.pretrained": "pretrained",
}

_AUGMENT_KEYS = {
    "augment.enabled": "enabled",
    "augment.brightness": "brightness",
    "augment.contrast": "contrast",
    "augment.saturation": "saturation",
    "augment.hue": "hue",
    "augment.crop_size": "crop_size",
    "augment.flip_h_prob": "flip_h_prob",
    "augment.flip_v_prob": "flip_v_prob",
}

_LOSS_KEYS = {
    "loss.alpha": "alpha",
    "loss.gamma": "gamma",
    "loss.task_weights": "task_weights",
}

_ANCHOR_KEYS = (
    "anchors.strides",
    "anchors.base_sizes",
    "anchors.scales",
    "anchors.aspect_ratios",
)


def to_flat(config: RunConfig) -> dict:
    """Serialize to the flat dotted-key dict (JSON-compatible values)."""
    flat = {}
    for key, attr in _TOP_KEYS.items():
        flat[key] = getattr(config, attr)
    for key, attr in _BACKBONE_KEYS.items():
        flat[key] = getattr(config.backbone, attr)
    for key, attr in _AUGMENT_KEYS.items():
        flat[key] = getattr(config.augment, attr)
    for key, attr in _LOSS_KEYS.items():
        v = getattr(config.loss, attr)
        flat[key] = list(v) if isinstance(v, tuple) else v
    # anchor levels share one scale/ratio set per level in this layout;
    # serialized as parallel per-level lists plus shared scale/ratio lists
    levels = config.anchors
    scales = levels[0].scales
    ratios = levels[0].aspect_ratios
    for lv in levels[1:]:
        if lv.scales != scales or lv.aspect_ratios != ratios:
            raise ValueError(
                "flat config requires all anchor levels to share scales and "
                "aspect ratios"
            )
    flat["anchors.strides"] = [lv.stride for lv in levels]
    flat["anchors.base_sizes"] = [lv.base_size for lv in levels]
    flat["anchors.scales"] = list(scales)
    flat["anchors.aspect_ratios"] = list(ratios)
    return flat


def from_flat(flat: dict) -> RunConfig:
    """Build a RunConfig from a (possibly partial) flat dict.

    Missing keys take defaults; unknown keys raise with the offending
    names so typos fail loudly.
    """
    known = (
        set(_TOP_KEYS) | set(_BACKBONE_KEYS) | set(_AUGMENT_KEYS)
        | set(_LOSS_KEYS) | set(_ANCHOR_KEYS)
    )
    unknown = sorted(set(flat) - known)
    if unknown:
        raise KeyError(f"unknown config keys: {', '.join(unknown)}")

    def section(mapping, cls, extra=None):
        kwargs = dict(extra or {})
        for key, attr in mapping.items():
            if key in flat:
                v = flat[key]
                kwargs[attr] = tuple(v) if isinstance(v, list) else v
        return cls(**kwargs)

    top = {attr: flat[key] for key, attr in _TOP_KEYS.items() if key in flat}

    anchor_defaults = to_flat(RunConfig())
    strides = flat.get("anchors.strides", anchor_defaults["anchors.strides"])
    bases = flat.get("anchors.base_sizes", anchor_defaults["anchors.base_sizes"])
    if len(strides) != len(bases):
        raise ValueError("anchors.strides and anchors.base_sizes differ in length")
    scales = tuple(flat.get("anchors.scales", anchor_defaults["anchors.scales"]))
    ratios = tuple(flat.get("anchors.aspect_ratios", anchor_defaults["anchors.aspect_ratios"]))
    anchors = tuple(
        AnchorLevelConfig(stride=s, base_size=b, scales=scales, aspect_ratios=ratios)
        for s, b in zip(strides, bases)
    )

    backbone_extra = {}
    if "anchors.strides" in flat:
        backbone_extra["pyramid_strides"] = tuple(strides)
    return RunConfig(
        **top,
        augment=section(_AUGMENT_KEYS, AugmentConfig),
        loss=section(_LOSS_KEYS, LossConfig),
        backbone=section(_BACKBONE_KEYS, BackboneConfig, backbone_extra),
        anchors=anchors,
    )


def save_config(config: RunConfig, path) -> Path:
    path = Path(path)
    path.write_text(json.dumps(to_flat(config), indent=2, sort_keys=True) + "\n")
    return path


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        flat = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ValueError(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(flat, dict):
        raise ValueError(f"config {path} must be a JSON object of dotted keys")
    return from_flat(flat)


def apply_overrides(config: RunConfig, overrides: dict) -> RunConfig:
    """Overlay dotted-key overrides (already typed) onto a config."""
    flat = to_flat(config)
    unknown = sorted(set(overrides) - set(flat))
    if unknown:
        raise KeyError(f"unknown config keys: {', '.join(unknown)}")
    flat.update(overrides)
    return from_flat(flat)


def parse_override(text: str) -> tuple[str, object]:
    """Parse one KEY=VALUE override; the value is parsed as JSON, falling
    back to a bare string (so `model.variant=tiny` works unquoted)."""
    key, sep, raw = text.partition("=")
    if not sep or not key:
        raise ValueError(f"override {text!r} is not of the form KEY=VALUE")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key, value


def resolve_output_dir(config: RunConfig) -> Path:
    """Output directory, under $MITODET_OUTPUT_ROOT when that is set and
    the configured path is relative."""
    out = Path(config.output_dir)
    root = os.environ.get(OUTPUT_ROOT_ENV)
    if root and not out.is_absolute():
        out = Path(root) / out
    return out


def config_diff(a: RunConfig, b: RunConfig) -> dict:
    """Dotted keys whose values differ, mapped to (a_value, b_value)."""
    fa, fb = to_flat(a), to_flat(b)
    return {k: (fa[k], fb[k]) for k in sorted(fa) if fa[k] != fb[k]}


def describe(config: RunConfig) -> str:
    return json.dumps(to_flat(config), indent=2, sort_keys=True)


def with_loss_classes(config: RunConfig, num_classes: int) -> RunConfig:
    """Pin the tumor-class count (known only once the manifest is read)."""
    return dataclasses.replace(
        config, loss=dataclasses.replace(config.loss, num_tumor_classes=num_classes)
    )
