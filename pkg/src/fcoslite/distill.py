"""Focal and global feature distillation between teacher and student necks.

Masks and attention follow the focal-and-global distillation recipe: a
foreground mask from the gt boxes, a scale mask that gives every box (and the
background as a whole) unit total weight, and temperature-softmax attention
computed from absolute activations.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import NamedTuple, Optional, Sequence

import torch
from torch import nn
import torch.nn.functional as F

from .detector import DetectorSpec
from .losses import LossBreakdown
from .targets import level_points

DESK_WEIGHT_SCALE = 1e-4


@dataclass(frozen=True)
class KdConfig:
    sigma: float = 1.6e-3
    beta: float = 8e-4
    gamma: float = 8e-4
    lam: float = 8e-6
    temperature: float = 0.8
    # one GcBlock for both teacher and student features
    share_gc: bool = False

    def __post_init__(self):
        for name in ("sigma", "beta", "gamma", "lam"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")

    def scaled(self, factor: float) -> "KdConfig":
        """Same recipe with all four loss weights multiplied by ``factor``."""
        return replace(self, sigma=self.sigma * factor, beta=self.beta * factor, gamma=self.gamma * factor, lam=self.lam * factor)

    @classmethod
    def desk(cls) -> "KdConfig":
        """Weights for unnormalised 32/64-channel desk necks.  The large-scale
        weights make imitation gradients ~1e3x the detection gradients there."""
        return cls().scaled(DESK_WEIGHT_SCALE)


class MaskSet(NamedTuple):
    fg: torch.Tensor  # M, (B, H, W)
    scale: torch.Tensor  # S
    bg: torch.Tensor  # M-hat = 1 - M
    bg_scale: torch.Tensor  # S-hat


class AttentionSet(NamedTuple):
    spatial: torch.Tensor  # (B, H, W), sums to H*W per image
    channel: torch.Tensor  # (B, C), sums to C per image


def _level_masks(boxes: torch.Tensor, pts: torch.Tensor, h: int, w: int, dtype) -> tuple[torch.Tensor, torch.Tensor]:
    n = pts.shape[0]
    scale = torch.zeros(n, dtype=dtype)
    if boxes.shape[0] == 0:
        return torch.zeros(n, dtype=dtype).reshape(h, w), scale.reshape(h, w)
    x, y = pts[:, 0:1], pts[:, 1:2]
    inside = (x > boxes[:, 0]) & (x < boxes[:, 2]) & (y > boxes[:, 1]) & (y < boxes[:, 3])  # (n, K)
    # box extent measured in covered feature cells
    xs, ys = pts[:w, 0], pts[::w, 1]
    cols = ((xs[:, None] > boxes[:, 0]) & (xs[:, None] < boxes[:, 2])).sum(0)
    rows = ((ys[:, None] > boxes[:, 1]) & (ys[:, None] < boxes[:, 3])).sum(0)
    cells = (cols * rows).to(dtype)
    areas = (boxes[:, 2] - boxes[:, 0]) * (boxes[:, 3] - boxes[:, 1])
    cand = torch.where(inside, areas.expand(n, -1), torch.full((n, boxes.shape[0]), float("inf"), dtype=areas.dtype))
    owner = cand.argmin(dim=1)
    fg = inside.any(dim=1)
    scale[fg] = 1.0 / cells[owner[fg]]
    return fg.to(dtype).reshape(h, w), scale.reshape(h, w)


def build_masks(gt_boxes: Sequence, spec: DetectorSpec, dtype=torch.float32) -> list[MaskSet]:
    """Per-level masks for a batch; ``gt_boxes[b]`` is an ``(K, 4)`` tensor or box list."""
    per_level = [[] for _ in spec.strides]
    for boxes in gt_boxes:
        if not isinstance(boxes, torch.Tensor):
            boxes = torch.tensor([b.as_list() if hasattr(b, "as_list") else list(b) for b in boxes], dtype=torch.float64)
        boxes = boxes.reshape(-1, 4).to(torch.float64)
        for k, (pts, (h, w)) in enumerate(zip(level_points(spec, torch.float64), spec.level_shapes())):
            fg, sc = _level_masks(boxes, pts, h, w, dtype)
            bg = 1.0 - fg
            n_bg = bg.sum()
            bg_sc = bg / n_bg if n_bg > 0 else torch.zeros_like(bg)
            per_level[k].append((fg, sc, bg, bg_sc))
    return [MaskSet(*(torch.stack(t) for t in zip(*lv))) for lv in per_level]


def attention(feat: torch.Tensor, temperature: float) -> AttentionSet:
    """Spatial and channel attention of a ``(B, C, H, W)`` feature map."""
    if feat.dim() == 3:
        feat = feat[None]
    if feat.numel() == 0:
        raise ValueError("empty feature map")
    b, c, h, w = feat.shape
    a = feat.abs()
    spatial = h * w * F.softmax((a.mean(dim=1) / temperature).reshape(b, -1), dim=1).reshape(b, h, w)
    channel = c * F.softmax(a.mean(dim=(2, 3)) / temperature, dim=1)
    return AttentionSet(spatial, channel)


def focal_distill_level(f_t: torch.Tensor, f_s: torch.Tensor, masks: MaskSet, cfg: KdConfig) -> torch.Tensor:
    if f_t.shape != f_s.shape:
        raise ValueError(f"teacher/student shape mismatch {tuple(f_t.shape)} vs {tuple(f_s.shape)}")
    f_t = f_t.detach()
    att_t = attention(f_t, cfg.temperature)
    att_s = attention(f_s, cfg.temperature)
    n = f_t.shape[0]
    sq = (f_t - f_s) ** 2
    w_sp = att_t.spatial[:, None] * att_t.channel[:, :, None, None]
    fg = (masks.fg * masks.scale)[:, None] * w_sp * sq
    bg = (masks.bg * masks.bg_scale)[:, None] * w_sp * sq
    l1 = (att_t.spatial - att_s.spatial).abs().sum() + (att_t.channel - att_s.channel).abs().sum()
    return (cfg.sigma * fg.sum() + cfg.beta * bg.sum() + cfg.gamma * l1) / n


def focal_distill(f_t: Sequence[torch.Tensor], f_s: Sequence[torch.Tensor], masks: Sequence[MaskSet], cfg: KdConfig):
    """Foreground/background imitation weighted by teacher attention, plus an
    L1 attention-matching term; summed over levels and averaged over the batch."""
    if len(f_t) != len(f_s) or len(f_t) != len(masks):
        raise ValueError("level count mismatch")
    return sum(focal_distill_level(t, s, m, cfg) for t, s, m in zip(f_t, f_s, masks))


class GcBlock(nn.Module):
    """Global-context block: softmax pixel pooling, bottleneck channel
    transform with layer norm, broadcast residual add."""

    def __init__(self, channels: int, ratio: float = 0.5):
        super().__init__()
        hidden = max(1, int(channels * ratio))
        self.conv_mask = nn.Conv2d(channels, 1, 1)
        self.transform = nn.Sequential(
            nn.Conv2d(channels, hidden, 1),
            nn.LayerNorm([hidden, 1, 1]),
            nn.ReLU(inplace=True),
            nn.Conv2d(hidden, channels, 1),
        )
        nn.init.kaiming_normal_(self.conv_mask.weight, mode="fan_in")
        nn.init.zeros_(self.conv_mask.bias)
        nn.init.zeros_(self.transform[-1].weight)
        nn.init.zeros_(self.transform[-1].bias)

    def pixel_weights(self, x: torch.Tensor) -> torch.Tensor:
        b, c, h, w = x.shape
        return F.softmax(self.conv_mask(x).reshape(b, h * w), dim=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.dim() != 4:
            raise ValueError("GcBlock expects (B, C, H, W) input")
        b, c, h, w = x.shape
        weights = self.pixel_weights(x)  # (B, HW)
        context = torch.bmm(x.reshape(b, c, h * w), weights[:, :, None]).reshape(b, c, 1, 1)
        return x + self.transform(context)


def global_distill(
    f_t: Sequence[torch.Tensor],
    f_s: Sequence[torch.Tensor],
    gc_t: Sequence[GcBlock],
    gc_s: Sequence[GcBlock],
    cfg: KdConfig,
) -> torch.Tensor:
    """``lambda * sum (G_T(F_T) - G_S(F_S))^2`` over levels, averaged over the batch."""
    total = 0.0
    for t, s, gt, gs in zip(f_t, f_s, gc_t, gc_s, strict=True):
        if t.shape != s.shape:
            raise ValueError(f"teacher/student shape mismatch {tuple(t.shape)} vs {tuple(s.shape)}")
        total = total + ((gt(t.detach()) - gs(s)) ** 2).sum() / t.shape[0]
    return cfg.lam * total


def total_loss(det: LossBreakdown, focal: torch.Tensor, global_: torch.Tensor) -> LossBreakdown:
    """Detection loss plus the two distillation terms, each kept for logging."""
    for name, v in (("cls", det.cls), ("reg", det.reg), ("focal", focal), ("global", global_)):
        if not math.isfinite(float(v.detach())):
            raise FloatingPointError(f"non-finite {name} loss component: {float(v.detach())}")
    return LossBreakdown(cls=det.cls, reg=det.reg, focal_distill=focal, global_distill=global_)


class Distiller(nn.Module):
    """Trainable side of distillation: channel adapters and GcBlocks per level."""

    def __init__(self, student_channels: int, teacher_channels: int, levels: int, cfg: KdConfig = KdConfig()):
        super().__init__()
        self.cfg = cfg
        self.adapters = nn.ModuleList(
            nn.Identity() if student_channels == teacher_channels else nn.Conv2d(student_channels, teacher_channels, 1)
            for _ in range(levels)
        )
        self.gc_s = nn.ModuleList(GcBlock(teacher_channels) for _ in range(levels))
        self.gc_t = self.gc_s if cfg.share_gc else nn.ModuleList(GcBlock(teacher_channels) for _ in range(levels))

    def forward(self, f_t, f_s, masks: Optional[list[MaskSet]]):
        f_s = [a(s) for a, s in zip(self.adapters, f_s)]
        for t, s in zip(f_t, f_s):
            if t.shape != s.shape:
                raise ValueError(f"teacher/student levels not bridgeable: {tuple(t.shape)} vs {tuple(s.shape)}")
        focal = focal_distill(f_t, f_s, masks, self.cfg)
        glob = global_distill(f_t, f_s, self.gc_t, self.gc_s, self.cfg)
        return focal, glob
