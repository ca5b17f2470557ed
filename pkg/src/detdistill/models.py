"""Teacher and student networks: ResNet backbones, FPN / PAFPN necks, heads, anchors."""
from __future__ import annotations

import hashlib
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .data import ClassCatalog
from .exceptions import ConfigurationError, InputError

BACKBONE_PROFILES = {
    # ResNet50 / ResNet18 layouts
    ("paper", "large"): dict(block="bottleneck", layers=(3, 4, 6, 3), widths=(64, 128, 256, 512), stem=64),
    ("paper", "small"): dict(block="basic", layers=(2, 2, 2, 2), widths=(64, 128, 256, 512), stem=64),
    ("desk", "large"): dict(block="basic", layers=(1, 1, 1, 1), widths=(24, 48, 96, 160), stem=24),
    ("desk", "small"): dict(block="basic", layers=(1, 1, 1, 1), widths=(12, 24, 48, 80), stem=12),
}
HEADS = ("detection", "segmentation")


@dataclass(frozen=True)
class AnchorConfig:
    strides: tuple = (8, 16, 32, 64, 128)
    scales: tuple = (4.0, 4.0 * 2 ** (1 / 3), 4.0 * 2 ** (2 / 3))
    aspect_ratios: tuple = (0.5, 1.0, 2.0)

    def __post_init__(self):
        for name in ("strides", "scales", "aspect_ratios"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        s = self.strides
        if not s or s[0] != 8 or any(b != 2 * a for a, b in zip(s, s[1:])) or len(s) < 3:
            raise ConfigurationError(f"strides must be 8, 16, 32[, 64[, 128]], got {s}")
        if len(s) > 5:
            raise ConfigurationError("at most five pyramid levels are supported")
        if not self.scales or not self.aspect_ratios:
            raise ConfigurationError("scales and aspect_ratios must be non-empty")

    @property
    def A(self) -> int:
        return len(self.scales) * len(self.aspect_ratios)


def generate_anchors(anchors: AnchorConfig, image_size) -> list:
    """Per-level ``(H_l * W_l * A, 4)`` anchor boxes, ordered by row, column, then anchor."""
    h, w = (image_size, image_size) if np.isscalar(image_size) else tuple(image_size)
    out = []
    for stride in anchors.strides:
        if h % stride or w % stride:
            raise InputError(f"image size {h}x{w} not divisible by stride {stride}")
        base = []
        for scale in anchors.scales:
            for ratio in anchors.aspect_ratios:
                size = stride * scale
                bw, bh = size / math.sqrt(ratio), size * math.sqrt(ratio)
                base.append((-bw / 2, -bh / 2, bw / 2, bh / 2))
        base = np.array(base)
        cy, cx = np.meshgrid((np.arange(h // stride) + 0.5) * stride,
                             (np.arange(w // stride) + 0.5) * stride, indexing="ij")
        centers = np.stack([cx, cy, cx, cy], axis=-1).reshape(-1, 1, 4)
        out.append((centers + base[None]).reshape(-1, 4))
    return out


@dataclass(frozen=True)
class ModelSpec:
    backbone: str = "small"
    neck: str = "fpn"
    heads: frozenset = frozenset({"detection"})
    head_channels: int = 256
    head_conv_blocks: int = 2
    seg_channels: int = 128
    profile: str = "paper"
    context_enhancement: bool = True
    shared_head: bool = True

    def __post_init__(self):
        object.__setattr__(self, "heads", frozenset(self.heads))
        if (self.profile, self.backbone) not in BACKBONE_PROFILES:
            raise ConfigurationError(f"unknown backbone {self.backbone!r} / profile {self.profile!r}")
        if self.neck not in ("fpn", "pafpn"):
            raise ConfigurationError(f"unknown neck {self.neck!r}")
        if not self.heads or not self.heads <= set(HEADS):
            raise ConfigurationError(f"heads must be a non-empty subset of {HEADS}, got {set(self.heads)}")
        if self.head_channels <= 0 or self.seg_channels <= 0 or self.head_conv_blocks < 0:
            raise ConfigurationError("channel counts must be positive")

    @classmethod
    def teacher(cls, heads=("detection",), profile="paper", **kw) -> "ModelSpec":
        kw.setdefault("shared_head", profile != "paper")
        return cls(backbone="large", neck="pafpn", heads=frozenset(heads), profile=profile, **kw)

    @classmethod
    def student(cls, heads=("detection",), profile="paper", **kw) -> "ModelSpec":
        kw.setdefault("shared_head", profile != "paper")
        return cls(backbone="small", neck="fpn", heads=frozenset(heads), profile=profile, **kw)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["heads"] = sorted(self.heads)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        d = dict(d)
        d["heads"] = frozenset(d.get("heads", ("detection",)))
        return cls(**d)


# ---------------------------------------------------------------- containers

@dataclass
class PyramidFeatures:
    levels: list
    strides: tuple

    @property
    def channels(self) -> int:
        return self.levels[0].shape[1]


@dataclass
class DetectionOutput:
    cls_logits: list
    reg_deltas: list
    pyramid: PyramidFeatures
    num_classes: int
    num_anchors: int

    def flat_cls(self) -> torch.Tensor:
        """``(B, N_anchors, C)`` in the anchor order of :func:`generate_anchors`."""
        return _flatten(self.cls_logits, self.num_anchors, self.num_classes)

    def flat_reg(self) -> torch.Tensor:
        return _flatten(self.reg_deltas, self.num_anchors, 4)


def _flatten(levels, A, K):
    parts = []
    for t in levels:
        b, _, h, w = t.shape
        parts.append(t.view(b, A, K, h, w).permute(0, 3, 4, 1, 2).reshape(b, h * w * A, K))
    return torch.cat(parts, dim=1)


@dataclass
class SegmentationOutput:
    logits: torch.Tensor
    pyramid: PyramidFeatures


@dataclass
class ModelOutput:
    pyramid: PyramidFeatures
    detection: Optional[DetectionOutput] = None
    segmentation: Optional[SegmentationOutput] = None


# ---------------------------------------------------------------- backbone

def _norm(c):
    return nn.BatchNorm2d(c)


class BasicBlock(nn.Module):
    expansion = 1

    def __init__(self, cin, planes, stride=1):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, planes, 3, stride, 1, bias=False)
        self.bn1 = _norm(planes)
        self.conv2 = nn.Conv2d(planes, planes, 3, 1, 1, bias=False)
        self.bn2 = _norm(planes)
        self.downsample = None
        if stride != 1 or cin != planes:
            self.downsample = nn.Sequential(nn.Conv2d(cin, planes, 1, stride, bias=False), _norm(planes))

    def forward(self, x):
        idt = x if self.downsample is None else self.downsample(x)
        out = F.relu(self.bn1(self.conv1(x)))
        return F.relu(self.bn2(self.conv2(out)) + idt)


class Bottleneck(nn.Module):
    expansion = 4

    def __init__(self, cin, planes, stride=1):
        super().__init__()
        out = planes * 4
        self.conv1 = nn.Conv2d(cin, planes, 1, bias=False)
        self.bn1 = _norm(planes)
        self.conv2 = nn.Conv2d(planes, planes, 3, stride, 1, bias=False)
        self.bn2 = _norm(planes)
        self.conv3 = nn.Conv2d(planes, out, 1, bias=False)
        self.bn3 = _norm(out)
        self.downsample = None
        if stride != 1 or cin != out:
            self.downsample = nn.Sequential(nn.Conv2d(cin, out, 1, stride, bias=False), _norm(out))

    def forward(self, x):
        idt = x if self.downsample is None else self.downsample(x)
        y = F.relu(self.bn1(self.conv1(x)))
        y = F.relu(self.bn2(self.conv2(y)))
        return F.relu(self.bn3(self.conv3(y)) + idt)


class ResNet(nn.Module):
    """ResNet without the stem max-pool; the first residual stage downsamples instead.

    Returns the stride 8, 16 and 32 stage outputs.
    """

    def __init__(self, block="basic", layers=(2, 2, 2, 2), widths=(64, 128, 256, 512), stem=64):
        super().__init__()
        blk = BasicBlock if block == "basic" else Bottleneck
        self.conv1 = nn.Conv2d(3, stem, 7, 2, 3, bias=False)
        self.bn1 = _norm(stem)
        self.maxpool = nn.Identity()
        cin = stem
        stages = []
        for planes, n in zip(widths, layers):
            blocks = []
            for i in range(n):
                blocks.append(blk(cin, planes, 2 if i == 0 else 1))
                cin = planes * blk.expansion
            stages.append(nn.Sequential(*blocks))
        self.layer1, self.layer2, self.layer3, self.layer4 = stages
        self.out_channels = tuple(w * blk.expansion for w in widths[1:])

    def forward(self, x):
        x = self.maxpool(F.relu(self.bn1(self.conv1(x))))
        c2 = self.layer1(x)
        c3 = self.layer2(c2)
        c4 = self.layer3(c3)
        c5 = self.layer4(c4)
        return [c3, c4, c5]


# ---------------------------------------------------------------- necks

class FPN(nn.Module):
    def __init__(self, in_channels: Sequence[int], channels: int, num_levels: int):
        super().__init__()
        self.lateral = nn.ModuleList(nn.Conv2d(c, channels, 1) for c in in_channels)
        self.output = nn.ModuleList(nn.Conv2d(channels, channels, 3, padding=1) for _ in in_channels)
        self.extra = nn.ModuleList(
            nn.Conv2d(channels, channels, 3, stride=2, padding=1)
            for _ in range(num_levels - len(in_channels)))

    def top_down(self, feats):
        lat = [conv(f) for conv, f in zip(self.lateral, feats)]
        for i in range(len(lat) - 1, 0, -1):
            lat[i - 1] = lat[i - 1] + F.interpolate(lat[i], size=lat[i - 1].shape[-2:], mode="nearest")
        return [conv(f) for conv, f in zip(self.output, lat)]

    def add_extra(self, outs):
        for i, conv in enumerate(self.extra):
            src = outs[-1] if i == 0 else F.relu(outs[-1])
            outs.append(conv(src))
        return outs

    def forward(self, feats):
        return self.add_extra(self.top_down(feats))


class PAFPN(FPN):
    """FPN followed by a bottom-up path aggregation branch."""

    def __init__(self, in_channels, channels, num_levels):
        super().__init__(in_channels, channels, num_levels)
        n = len(in_channels)
        self.downsample = nn.ModuleList(
            nn.Conv2d(channels, channels, 3, stride=2, padding=1) for _ in range(n - 1))
        self.pa_output = nn.ModuleList(
            nn.Conv2d(channels, channels, 3, padding=1) for _ in range(n - 1))

    def forward(self, feats):
        inter = self.top_down(feats)
        for i, down in enumerate(self.downsample):
            inter[i + 1] = inter[i + 1] + down(inter[i])
        outs = [inter[0]] + [conv(f) for conv, f in zip(self.pa_output, inter[1:])]
        return self.add_extra(outs)


class ContextEnhancement(nn.Module):
    """Global-context and coarser-scale fusion applied to every neck level."""

    def __init__(self, channels: int, num_levels: int):
        super().__init__()
        self.global_pool = nn.AdaptiveAvgPool2d(1)
        self.global_proj = nn.Conv2d(channels, channels, 1)
        self.coarse_proj = nn.ModuleList(nn.Conv2d(channels, channels, 1) for _ in range(num_levels - 1))

    def forward(self, levels):
        g = self.global_proj(self.global_pool(levels[-1]))
        out = []
        for i, p in enumerate(levels):
            y = p + g
            if i + 1 < len(levels):
                y = y + F.interpolate(self.coarse_proj[i](levels[i + 1]), size=p.shape[-2:], mode="nearest")
            out.append(y)
        return out


# ---------------------------------------------------------------- heads

def _gn(c):
    return nn.GroupNorm(min(32, max(1, c // 8)), c)


def _conv_block(cin, cout):
    return nn.Sequential(nn.Conv2d(cin, cout, 3, padding=1), _gn(cout), nn.ReLU(inplace=True))


class _HeadBranch(nn.Module):
    def __init__(self, channels, out, conv_blocks):
        super().__init__()
        self.tower = nn.Sequential(*[_conv_block(channels, channels) for _ in range(conv_blocks)])
        self.out = nn.Conv2d(channels, out, 3, padding=1)
        nn.init.normal_(self.out.weight, std=0.01)
        nn.init.zeros_(self.out.bias)

    def forward(self, x):
        return self.out(self.tower(x))


class RetinaHead(nn.Module):
    """Classification and box-delta branches, identical except for their last layer.

    With ``shared=False`` every pyramid level gets its own pair of branches.
    """

    def __init__(self, channels: int, num_classes: int, num_anchors: int, conv_blocks: int = 2,
                 num_levels: int = 5, shared: bool = True, prior_prob: float = 0.01):
        super().__init__()
        self.num_classes, self.num_anchors, self.shared = num_classes, num_anchors, shared
        n = 1 if shared else num_levels
        self.cls_branches = nn.ModuleList(
            _HeadBranch(channels, num_anchors * num_classes, conv_blocks) for _ in range(n))
        self.reg_branches = nn.ModuleList(
            _HeadBranch(channels, num_anchors * 4, conv_blocks) for _ in range(n))
        for b in self.cls_branches:
            nn.init.constant_(b.out.bias, -math.log((1 - prior_prob) / prior_prob))

    def forward(self, pyramid: PyramidFeatures) -> DetectionOutput:
        pick = (lambda bs, i: bs[0]) if self.shared else (lambda bs, i: bs[i])
        cls = [pick(self.cls_branches, i)(p) for i, p in enumerate(pyramid.levels)]
        reg = [pick(self.reg_branches, i)(p) for i, p in enumerate(pyramid.levels)]
        return DetectionOutput(cls, reg, pyramid, self.num_classes, self.num_anchors)


class SemanticFPNHead(nn.Module):
    """Per-level conv + 2x upsampling chains to 1/4 scale, summed, then 4x upsampled."""

    def __init__(self, channels: int, strides: Sequence[int], num_classes: int, seg_channels: int = 128):
        super().__init__()
        self.chains = nn.ModuleList()
        for stride in strides:
            n_up = int(round(math.log2(stride / 4)))
            layers, cin = [], channels
            for _ in range(max(n_up, 1)):
                layers.append(_conv_block(cin, seg_channels))
                cin = seg_channels
                if n_up > 0:
                    layers.append(nn.Upsample(scale_factor=2, mode="bilinear", align_corners=False))
            self.chains.append(nn.Sequential(*layers))
        self.classifier = nn.Conv2d(seg_channels, num_classes, 1)

    def forward(self, pyramid: PyramidFeatures, out_size) -> SegmentationOutput:
        agg = None
        for chain, p in zip(self.chains, pyramid.levels):
            y = chain(p)
            agg = y if agg is None else agg + y
        logits = F.interpolate(self.classifier(agg), size=out_size, mode="bilinear", align_corners=False)
        return SegmentationOutput(logits, pyramid)


class DetSegNet(nn.Module):
    """Backbone + neck (+ context enhancement) with detection and/or segmentation heads."""

    def __init__(self, spec: ModelSpec, catalog: ClassCatalog, anchors: AnchorConfig,
                 num_seg_classes: Optional[int] = None):
        super().__init__()
        self.spec, self.catalog, self.anchor_config = spec, catalog, anchors
        self.strides = anchors.strides
        self.backbone = ResNet(**BACKBONE_PROFILES[(spec.profile, spec.backbone)])
        neck_cls = PAFPN if spec.neck == "pafpn" else FPN
        self.neck = neck_cls(self.backbone.out_channels, spec.head_channels, len(anchors.strides))
        self.cem = ContextEnhancement(spec.head_channels, len(anchors.strides)) \
            if spec.context_enhancement else None
        self.det_head = RetinaHead(spec.head_channels, catalog.C, anchors.A, spec.head_conv_blocks,
                                   len(anchors.strides), spec.shared_head) \
            if "detection" in spec.heads else None
        self.num_seg_classes = num_seg_classes or catalog.C + 1
        self.seg_head = SemanticFPNHead(spec.head_channels, anchors.strides, self.num_seg_classes,
                                        spec.seg_channels) if "segmentation" in spec.heads else None

    @property
    def feature_channels(self) -> int:
        return self.spec.head_channels

    def features(self, x: torch.Tensor) -> PyramidFeatures:
        h, w = x.shape[-2:]
        top = self.strides[-1]
        if h % top or w % top:
            raise InputError(f"input {h}x{w} not divisible by the largest stride {top}")
        levels = self.neck(self.backbone(x))
        if self.cem is not None:
            levels = self.cem(levels)
        return PyramidFeatures(levels, self.strides)

    def forward(self, x: torch.Tensor, heads: Optional[Sequence[str]] = None) -> ModelOutput:
        heads = set(heads) if heads is not None else set(self.spec.heads)
        if not heads <= set(self.spec.heads):
            raise ConfigurationError(f"model has no head(s) {sorted(heads - set(self.spec.heads))}")
        pyr = self.features(x)
        out = ModelOutput(pyr)
        if "detection" in heads:
            out.detection = self.det_head(pyr)
        if "segmentation" in heads:
            out.segmentation = self.seg_head(pyr, x.shape[-2:])
        return out


def build_model(spec: ModelSpec, catalog: ClassCatalog, anchors: AnchorConfig = AnchorConfig(),
                num_seg_classes: Optional[int] = None, seed: Optional[int] = None) -> DetSegNet:
    if not isinstance(spec, ModelSpec):
        raise ConfigurationError(f"expected a ModelSpec, got {type(spec).__name__}")
    if seed is not None:
        torch.manual_seed(seed)
    return DetSegNet(spec, catalog, anchors, num_seg_classes)


def count_parameters(model: nn.Module, trainable_only: bool = True) -> int:
    return sum(p.numel() for p in model.parameters() if p.requires_grad or not trainable_only)


def parameter_hash(model: nn.Module) -> str:
    h = hashlib.sha256()
    for name, t in sorted(model.state_dict().items()):
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def images_to_tensor(images: Sequence[np.ndarray]) -> torch.Tensor:
    """Stack HxWx3 uint8 images into a normalised float batch."""
    shapes = {im.shape for im in images}
    if len(shapes) != 1:
        raise InputError(f"batch images must share one resolution, got {sorted(shapes)}")
    arr = np.stack(images).astype(np.float32) / 255.0
    t = torch.from_numpy(arr).permute(0, 3, 1, 2)
    return (t - 0.45) / 0.25


def save_checkpoint(model: DetSegNet, path, extra: Optional[dict] = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save({
        "state_dict": model.state_dict(),
        "spec": model.spec.to_dict(),
        "anchors": asdict(model.anchor_config),
        "catalog": list(model.catalog.names),
        "catalog_hash": model.catalog.digest(),
        "num_seg_classes": model.num_seg_classes,
        "extra": extra or {},
    }, path)
    return path


def load_checkpoint(path, spec: Optional[ModelSpec] = None, catalog: Optional[ClassCatalog] = None,
                    anchors: Optional[AnchorConfig] = None) -> DetSegNet:
    """Rebuild a model from a checkpoint; optional arguments are checked for compatibility."""
    blob = torch.load(Path(path), map_location="cpu", weights_only=False)
    stored_spec = ModelSpec.from_dict(blob["spec"])
    stored_anchors = AnchorConfig(**blob["anchors"])
    stored_catalog = ClassCatalog(tuple(blob["catalog"]))
    if stored_catalog.digest() != blob["catalog_hash"]:
        raise ConfigurationError(f"{path}: catalog hash mismatch")
    if spec is not None and spec != stored_spec:
        raise ConfigurationError(f"{path}: checkpoint spec {stored_spec} != requested {spec}")
    if anchors is not None and anchors != stored_anchors:
        raise ConfigurationError(f"{path}: anchor configuration differs from checkpoint")
    if catalog is not None and catalog.digest() != stored_catalog.digest():
        raise ConfigurationError(f"{path}: class catalog differs from checkpoint")
    model = DetSegNet(stored_spec, stored_catalog, stored_anchors, blob["num_seg_classes"])
    model.load_state_dict(blob["state_dict"])
    return model
