"""Detector architecture: backbone -> feature pyramid -> dense per-anchor
heads, plus two fully-connected auxiliary heads (tumor type, patch
foreground) fed by the global-average-pooled deepest pyramid feature.

The default "tiny" backbone trains on CPU at desk scale; the "resnet50"
variant swaps in the 50-layer residual trunk (torchvision) behind the same
pyramid.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import geometry
from .geometry import AnchorLevelConfig, AnchorSet, Box, DEFAULT_ANCHOR_LEVELS


@dataclass(frozen=True)
class BackboneConfig:
    """Trunk variant and pyramid layout.

    ``pyramid_strides`` must be ascending powers of two; ``fpn_channels``
    is the shared pyramid width; ``head_hidden`` the auxiliary heads'
    hidden width; ``head_convs`` the depth of the detection towers.
    """

    variant: str = "tiny"
    pyramid_strides: tuple = (8, 16, 32)
    fpn_channels: int = 64
    head_hidden: int = 256
    head_convs: int = 2
    pretrained: bool = False

    def __post_init__(self):
        if self.variant not in ("tiny", "resnet50"):
            raise ValueError(f"unknown backbone variant {self.variant!r}")
        if len(self.pyramid_strides) < 1:
            raise ValueError("at least one pyramid level is required")
        strides = tuple(self.pyramid_strides)
        if list(strides) != sorted(strides):
            raise ValueError("pyramid_strides must be ascending")
        for s in strides:
            if s < 4 or (s & (s - 1)) != 0:
                raise ValueError(f"pyramid stride must be a power of two >= 4, got {s}")
        if self.fpn_channels <= 0 or self.head_hidden <= 0 or self.head_convs < 0:
            raise ValueError("channel/width settings must be positive")


@dataclass
class ModelOutput:
    """Per-level dense outputs plus the auxiliary logits.

    ``cls_logits[i]`` is (B, N_i) mitosis-vs-background logits and
    ``box_deltas[i]`` is (B, N_i, 4), where N_i matches the anchor count
    of level i; ``tumor_logits`` is (B, C) and ``fg_logit`` (B,), each
    None when the head is disabled.
    """

    cls_logits: list
    box_deltas: list
    tumor_logits: torch.Tensor | None
    fg_logit: torch.Tensor | None

    def cat_cls(self) -> torch.Tensor:
        return torch.cat(self.cls_logits, dim=1)

    def cat_deltas(self) -> torch.Tensor:
        return torch.cat(self.box_deltas, dim=1)


@dataclass(frozen=True)
class Detection:
    box: Box
    score: float


def _conv_gn_relu(c_in, c_out, stride=1):
    return nn.Sequential(
        nn.Conv2d(c_in, c_out, 3, stride=stride, padding=1, bias=False),
        nn.GroupNorm(min(8, c_out), c_out),
        nn.ReLU(inplace=True),
    )


class TinyBackbone(nn.Module):
    """Small conv trunk: stride-2 stages from stride 2 up to the deepest
    pyramid stride, feature width growing per stage."""

    WIDTHS = {2: 16, 4: 24, 8: 32, 16: 48, 32: 64, 64: 80}

    def __init__(self, strides):
        super().__init__()
        self.out_strides = tuple(strides)
        deepest = max(strides)
        self.stages = nn.ModuleList()
        self.stage_strides = []
        c_in, stride = 3, 1
        while stride < deepest:
            stride *= 2
            c_out = self.WIDTHS[stride]
            self.stages.append(
                nn.Sequential(_conv_gn_relu(c_in, c_out, stride=2), _conv_gn_relu(c_out, c_out))
            )
            self.stage_strides.append(stride)
            c_in = c_out

    @property
    def out_channels(self):
        return [self.WIDTHS[s] for s in self.out_strides]

    def forward(self, x):
        feats = {}
        for stride, stage in zip(self.stage_strides, self.stages):
            x = stage(x)
            feats[stride] = x
        return [feats[s] for s in self.out_strides]


class ResNet50Backbone(nn.Module):
    """50-layer residual trunk via torchvision; optional pretrained weights."""

    CHANNELS = {4: 256, 8: 512, 16: 1024, 32: 2048}

    def __init__(self, strides, pretrained=False):
        super().__init__()
        from torchvision.models import resnet50

        if max(strides) > 32 or min(strides) < 4:
            raise ValueError("resnet50 provides strides 4..32")
        weights = None
        if pretrained:
            from torchvision.models import ResNet50_Weights

            weights = ResNet50_Weights.IMAGENET1K_V1
        net = resnet50(weights=weights)
        self.stem = nn.Sequential(net.conv1, net.bn1, net.relu, net.maxpool)
        self.layers = nn.ModuleList([net.layer1, net.layer2, net.layer3, net.layer4])
        self.layer_strides = [4, 8, 16, 32]
        self.out_strides = tuple(strides)

    @property
    def out_channels(self):
        return [self.CHANNELS[s] for s in self.out_strides]

    def forward(self, x):
        x = self.stem(x)
        feats = {}
        for stride, layer in zip(self.layer_strides, self.layers):
            x = layer(x)
            feats[stride] = x
        return [feats[s] for s in self.out_strides]


class FeaturePyramid(nn.Module):
    """Lateral 1x1 projections with top-down nearest upsampling and a 3x3
    smoothing conv per level."""

    def __init__(self, in_channels, out_channels):
        super().__init__()
        self.lateral = nn.ModuleList(nn.Conv2d(c, out_channels, 1) for c in in_channels)
        self.smooth = nn.ModuleList(
            nn.Conv2d(out_channels, out_channels, 3, padding=1) for _ in in_channels
        )

    def forward(self, feats):
        laterals = [lat(f) for lat, f in zip(self.lateral, feats)]
        for i in range(len(laterals) - 2, -1, -1):
            up = F.interpolate(laterals[i + 1], size=laterals[i].shape[-2:], mode="nearest")
            laterals[i] = laterals[i] + up
        return [sm(l) for sm, l in zip(self.smooth, laterals)]


class DenseHead(nn.Module):
    """Conv tower shared across pyramid levels with a final 3x3 projection."""

    def __init__(self, channels, n_convs, out_per_anchor, anchors_per_cell):
        super().__init__()
        self.tower = nn.Sequential(*[_conv_gn_relu(channels, channels) for _ in range(n_convs)])
        self.out = nn.Conv2d(channels, out_per_anchor * anchors_per_cell, 3, padding=1)
        self.out_per_anchor = out_per_anchor
        self.anchors_per_cell = anchors_per_cell

    def forward(self, x):
        b = x.shape[0]
        y = self.out(self.tower(x))
        h, w = y.shape[-2:]
        # (B, A*K, H, W) -> (B, H*W*A, K): cell row-major, per-cell anchors
        # contiguous, matching geometry.generate_anchors layout
        y = y.view(b, self.anchors_per_cell, self.out_per_anchor, h, w)
        y = y.permute(0, 3, 4, 1, 2).reshape(b, h * w * self.anchors_per_cell, self.out_per_anchor)
        return y


class AuxHead(nn.Module):
    """Global-average pool -> hidden FC -> linear output."""

    def __init__(self, in_channels, hidden, out_dim):
        super().__init__()
        self.fc = nn.Sequential(nn.Linear(in_channels, hidden), nn.ReLU(inplace=True))
        self.out = nn.Linear(hidden, out_dim)

    def forward(self, x):
        pooled = x.mean(dim=(2, 3))
        return self.out(self.fc(pooled))


class MitosisDetector(nn.Module):
    """Anchor-based single-class detector with optional auxiliary heads.

    Auxiliary modules are constructed after the detection path so that,
    under a fixed torch seed, the detection parameters receive identical
    initial values whether or not the auxiliary heads exist.
    """

    def __init__(self, backbone_config=None, anchor_levels=DEFAULT_ANCHOR_LEVELS,
                 num_tumor_classes=6, use_tumor_head=True, use_fg_head=True):
        super().__init__()
        cfg = backbone_config or BackboneConfig()
        anchor_levels = tuple(anchor_levels)
        anchor_strides = tuple(l.stride for l in anchor_levels)
        if anchor_strides != tuple(cfg.pyramid_strides):
            raise ValueError(
                f"anchor strides {anchor_strides} do not match pyramid strides "
                f"{tuple(cfg.pyramid_strides)}"
            )
        per_cell = {l.anchors_per_cell for l in anchor_levels}
        if len(per_cell) != 1:
            raise ValueError("all levels must share one anchors-per-cell count for the shared head")
        self.anchors_per_cell = per_cell.pop()

        self.backbone_config = cfg
        self.anchor_levels = anchor_levels
        self.num_tumor_classes = num_tumor_classes
        self.use_tumor_head = use_tumor_head
        self.use_fg_head = use_fg_head

        if cfg.variant == "tiny":
            self.backbone = TinyBackbone(cfg.pyramid_strides)
        else:
            self.backbone = ResNet50Backbone(cfg.pyramid_strides, pretrained=cfg.pretrained)
        self.fpn = FeaturePyramid(self.backbone.out_channels, cfg.fpn_channels)
        self.cls_head = DenseHead(cfg.fpn_channels, cfg.head_convs, 1, self.anchors_per_cell)
        self.reg_head = DenseHead(cfg.fpn_channels, cfg.head_convs, 4, self.anchors_per_cell)
        # start the dense classifier near the background prior so early
        # focal loss is not swamped by the easy negatives
        prior = 0.01
        nn.init.constant_(self.cls_head.out.bias, -math.log((1 - prior) / prior))

        self.tumor_head = (
            AuxHead(cfg.fpn_channels, cfg.head_hidden, num_tumor_classes)
            if use_tumor_head
            else None
        )
        self.fg_head = AuxHead(cfg.fpn_channels, cfg.head_hidden, 1) if use_fg_head else None

    @property
    def deepest_stride(self):
        return max(self.backbone_config.pyramid_strides)

    def forward(self, images) -> ModelOutput:
        if images.dim() != 4 or images.shape[1] != 3:
            raise ValueError(f"expected (B, 3, H, W) input, got {tuple(images.shape)}")
        h, w = images.shape[-2:]
        if h < self.deepest_stride or w < self.deepest_stride:
            raise ValueError(
                f"image {h}x{w} is smaller than the deepest stride {self.deepest_stride}"
            )
        x = (images - 0.5) / 0.5
        pyramid = self.fpn(self.backbone(x))
        cls_logits = [self.cls_head(p).squeeze(-1) for p in pyramid]
        box_deltas = [self.reg_head(p) for p in pyramid]
        deepest = pyramid[-1]
        tumor = self.tumor_head(deepest) if self.tumor_head is not None else None
        fg = self.fg_head(deepest).squeeze(-1) if self.fg_head is not None else None
        return ModelOutput(cls_logits, box_deltas, tumor, fg)

    def anchor_set(self, image_size) -> AnchorSet:
        return anchors_for(tuple(image_size), self.anchor_levels)


@lru_cache(maxsize=16)
def anchors_for(image_size, anchor_levels) -> AnchorSet:
    """Cached anchor grids keyed by (image size, level config)."""
    return geometry.generate_anchors(image_size, anchor_levels)


def image_to_tensor(image) -> torch.Tensor:
    """HWC float array in [0, 1] -> (3, H, W) float32 tensor."""
    arr = np.asarray(image, dtype=np.float32)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValueError(f"expected (H, W, 3) image, got {arr.shape}")
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(2, 0, 1)))


@torch.no_grad()
def predict(model, image, score_threshold=0.05, nms_threshold=0.5, max_detections=100):
    """Run the detector on one HWC image and post-process to detections.

    Decodes deltas against the anchor grid, drops scores below
    ``score_threshold``, clips boxes to the image, applies NMS, and keeps
    at most ``max_detections`` in descending-score order.
    """
    was_training = model.training
    model.eval()
    try:
        tensor = image_to_tensor(image).unsqueeze(0)
        h, w = tensor.shape[-2:]
        out = model(tensor)
        scores = torch.sigmoid(out.cat_cls())[0].numpy().astype(np.float64)
        deltas = out.cat_deltas()[0].numpy().astype(np.float64)
    finally:
        if was_training:
            model.train()

    anchors = model.anchor_set((h, w)).all_anchors
    keep = scores >= score_threshold
    if not np.any(keep):
        return []
    boxes = geometry.decode_boxes(deltas[keep], anchors[keep])
    boxes = geometry.clip_boxes(boxes, (h, w))
    scores = scores[keep]
    kept = geometry.nms(boxes, scores, nms_threshold)[:max_detections]
    return [Detection(Box.from_array(boxes[i]), float(scores[i])) for i in kept]


def num_parameters(backbone_config=None, anchor_levels=DEFAULT_ANCHOR_LEVELS,
                   num_tumor_classes=6, use_tumor_head=True, use_fg_head=True) -> int:
    """Total trainable parameter count for a configuration."""
    m = MitosisDetector(backbone_config, anchor_levels, num_tumor_classes,
                        use_tumor_head, use_fg_head)
    return sum(p.numel() for p in m.parameters())


# ---------------------------------------------------------------------------
# checkpoints: <stem>.pt parameter archive + <stem>.json config sidecar


def _anchor_levels_to_json(levels):
    return [
        {
            "stride": l.stride,
            "base_size": l.base_size,
            "scales": list(l.scales),
            "aspect_ratios": list(l.aspect_ratios),
        }
        for l in levels
    ]


def anchor_levels_from_json(data):
    return tuple(
        AnchorLevelConfig(
            stride=int(d["stride"]),
            base_size=float(d["base_size"]),
            scales=tuple(d["scales"]),
            aspect_ratios=tuple(d["aspect_ratios"]),
        )
        for d in data
    )


def checkpoint_sidecar(model, class_names, loss_config=None, extra=None) -> dict:
    cfg = model.backbone_config
    sidecar = {
        "backbone": {
            "variant": cfg.variant,
            "pyramid_strides": list(cfg.pyramid_strides),
            "fpn_channels": cfg.fpn_channels,
            "head_hidden": cfg.head_hidden,
            "head_convs": cfg.head_convs,
            "pretrained": cfg.pretrained,
        },
        "anchor_levels": _anchor_levels_to_json(model.anchor_levels),
        "num_tumor_classes": model.num_tumor_classes,
        "use_tumor_head": model.use_tumor_head,
        "use_fg_head": model.use_fg_head,
        "class_names": list(class_names),
        "loss": None,
        "extra": extra or {},
    }
    if loss_config is not None:
        sidecar["loss"] = {
            "alpha": loss_config.alpha,
            "gamma": loss_config.gamma,
            "num_tumor_classes": loss_config.num_tumor_classes,
            "task_weights": list(loss_config.task_weights),
        }
    return sidecar


def save_checkpoint(path, model, class_names, loss_config=None, extra=None) -> Path:
    """Write <path>.pt (state dict) and <path>.json (config sidecar)."""
    path = Path(path)
    stem = path.with_suffix("") if path.suffix == ".pt" else path
    torch.save(model.state_dict(), stem.with_suffix(".pt"))
    sidecar = checkpoint_sidecar(model, class_names, loss_config, extra)
    stem.with_suffix(".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True))
    return stem.with_suffix(".pt")


def load_checkpoint(path):
    """Rebuild the model from a checkpoint's sidecar and load its weights.

    Returns (model, sidecar). Raises FileNotFoundError when either file of
    the pair is missing.
    """
    path = Path(path)
    stem = path.with_suffix("") if path.suffix in (".pt", ".json") else path
    pt, js = stem.with_suffix(".pt"), stem.with_suffix(".json")
    if not pt.exists() or not js.exists():
        raise FileNotFoundError(f"checkpoint pair {pt} / {js} not found")
    sidecar = json.loads(js.read_text())
    b = sidecar["backbone"]
    cfg = BackboneConfig(
        variant=b["variant"],
        pyramid_strides=tuple(b["pyramid_strides"]),
        fpn_channels=b["fpn_channels"],
        head_hidden=b["head_hidden"],
        head_convs=b["head_convs"],
        pretrained=False,
    )
    model = MitosisDetector(
        cfg,
        anchor_levels_from_json(sidecar["anchor_levels"]),
        num_tumor_classes=sidecar["num_tumor_classes"],
        use_tumor_head=sidecar["use_tumor_head"],
        use_fg_head=sidecar["use_fg_head"],
    )
    state = torch.load(pt, map_location="cpu", weights_only=True)
    model.load_state_dict(state)
    model.eval()
    return model, sidecar
