"""Axis-aligned boxes and the IoU family of overlap metrics / regression losses.

Boxes are corner-encoded ``(x1, y1, x2, y2)`` in pixels.  Every tensor function
accepts ``(..., 4)`` tensors and reduces over the last axis; the :class:`Box`
helpers wrap them for scalar use.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple, Optional, Sequence

import torch

_FOUR_OVER_PI_SQ = 4.0 / math.pi**2


class DegenerateBoxError(ValueError):
    pass


@dataclass(frozen=True)
class Box:
    x1: float
    y1: float
    x2: float
    y2: float
    label: Optional[int] = None
    score: Optional[float] = None

    def __post_init__(self):
        coords = (self.x1, self.y1, self.x2, self.y2)
        if not all(math.isfinite(c) for c in coords):
            raise DegenerateBoxError(f"non-finite box coordinates {coords}")
        if self.x2 <= self.x1 or self.y2 <= self.y1:
            raise DegenerateBoxError(f"box has non-positive width/height: {coords}")

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def center(self) -> tuple[float, float]:
        return (self.x1 + self.x2) / 2, (self.y1 + self.y2) / 2

    def as_list(self) -> list[float]:
        return [self.x1, self.y1, self.x2, self.y2]

    def as_tensor(self, dtype=torch.float64) -> torch.Tensor:
        return torch.tensor(self.as_list(), dtype=dtype)

    def translate(self, dx: float, dy: float) -> "Box":
        return Box(self.x1 + dx, self.y1 + dy, self.x2 + dx, self.y2 + dy, self.label, self.score)

    def scale(self, s: float) -> "Box":
        return Box(self.x1 * s, self.y1 * s, self.x2 * s, self.y2 * s, self.label, self.score)


class OverlapResult(NamedTuple):
    iou: torch.Tensor
    enclosing_diag_sq: torch.Tensor
    center_dist_sq: torch.Tensor


def check_boxes(boxes: torch.Tensor) -> None:
    """Raise :class:`DegenerateBoxError` unless every box has positive extent."""
    if boxes.shape[-1] != 4:
        raise ValueError(f"expected (..., 4) boxes, got shape {tuple(boxes.shape)}")
    if not torch.isfinite(boxes).all():
        raise DegenerateBoxError("non-finite box coordinates")
    if ((boxes[..., 2] <= boxes[..., 0]) | (boxes[..., 3] <= boxes[..., 1])).any():
        raise DegenerateBoxError("box has non-positive width/height")


def _parts(pred: torch.Tensor, gt: torch.Tensor):
    w1, h1 = pred[..., 2] - pred[..., 0], pred[..., 3] - pred[..., 1]
    w2, h2 = gt[..., 2] - gt[..., 0], gt[..., 3] - gt[..., 1]
    iw = (torch.minimum(pred[..., 2], gt[..., 2]) - torch.maximum(pred[..., 0], gt[..., 0])).clamp(min=0)
    ih = (torch.minimum(pred[..., 3], gt[..., 3]) - torch.maximum(pred[..., 1], gt[..., 1])).clamp(min=0)
    inter = iw * ih
    union = w1 * h1 + w2 * h2 - inter
    cw = torch.maximum(pred[..., 2], gt[..., 2]) - torch.minimum(pred[..., 0], gt[..., 0])
    ch = torch.maximum(pred[..., 3], gt[..., 3]) - torch.minimum(pred[..., 1], gt[..., 1])
    return w1, h1, w2, h2, inter, union, cw, ch


def overlap(pred: torch.Tensor, gt: torch.Tensor, validate: bool = True) -> OverlapResult:
    """Elementwise IoU, squared enclosing-box diagonal and squared centre distance."""
    if validate:
        check_boxes(pred)
        check_boxes(gt)
    _, _, _, _, inter, union, cw, ch = _parts(pred, gt)
    dx = (pred[..., 0] + pred[..., 2]) / 2 - (gt[..., 0] + gt[..., 2]) / 2
    dy = (pred[..., 1] + pred[..., 3]) / 2 - (gt[..., 1] + gt[..., 3]) / 2
    return OverlapResult(inter / union, cw**2 + ch**2, dx**2 + dy**2)


def aspect_consistency(pred: torch.Tensor, gt: torch.Tensor) -> torch.Tensor:
    """The CIoU aspect-ratio term ``v = 4/pi^2 (atan(w_gt/h_gt) - atan(w/h))^2``."""
    w1, h1 = pred[..., 2] - pred[..., 0], pred[..., 3] - pred[..., 1]
    w2, h2 = gt[..., 2] - gt[..., 0], gt[..., 3] - gt[..., 1]
    return _FOUR_OVER_PI_SQ * (torch.atan(w2 / h2) - torch.atan(w1 / h1)) ** 2


def iou_loss(pred: torch.Tensor, gt: torch.Tensor, validate: bool = True) -> torch.Tensor:
    return 1.0 - overlap(pred, gt, validate).iou


def giou_loss(pred: torch.Tensor, gt: torch.Tensor, validate: bool = True) -> torch.Tensor:
    if validate:
        check_boxes(pred)
        check_boxes(gt)
    _, _, _, _, inter, union, cw, ch = _parts(pred, gt)
    hull = cw * ch
    return 1.0 - inter / union + (hull - union) / hull


def diou_loss(pred: torch.Tensor, gt: torch.Tensor, validate: bool = True) -> torch.Tensor:
    ov = overlap(pred, gt, validate)
    return 1.0 - ov.iou + ov.center_dist_sq / ov.enclosing_diag_sq


def ciou_loss(
    pred: torch.Tensor, gt: torch.Tensor, validate: bool = True, detach_alpha: bool = True
) -> torch.Tensor:
    """Complete-IoU loss ``1 - IoU + rho^2/c^2 + alpha*v``.

    ``alpha = v / ((1 - IoU) + v)`` is treated as a constant for backprop unless
    ``detach_alpha`` is False.  When pred == gt both ``v`` and ``1 - IoU`` vanish;
    alpha is then defined as 0.
    """
    ov = overlap(pred, gt, validate)
    v = aspect_consistency(pred, gt)
    denom = (1.0 - ov.iou) + v
    alpha = torch.where(denom > 0, v / denom.clamp(min=torch.finfo(denom.dtype).tiny), torch.zeros_like(v))
    if detach_alpha:
        alpha = alpha.detach()
    return 1.0 - ov.iou + ov.center_dist_sq / ov.enclosing_diag_sq + alpha * v


REG_LOSSES = {
    "IoU": iou_loss,
    "GIoU": giou_loss,
    "DIoU": diou_loss,
    "CIoU": ciou_loss,
}


def pairwise_iou(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """IoU matrix of shape (len(a), len(b)); no validation, zero-area safe."""
    if a.numel() == 0 or b.numel() == 0:
        return torch.zeros((a.shape[0], b.shape[0]), dtype=torch.float64)
    a = a[:, None, :]
    b = b[None, :, :]
    iw = (torch.minimum(a[..., 2], b[..., 2]) - torch.maximum(a[..., 0], b[..., 0])).clamp(min=0)
    ih = (torch.minimum(a[..., 3], b[..., 3]) - torch.maximum(a[..., 1], b[..., 1])).clamp(min=0)
    inter = iw * ih
    area_a = (a[..., 2] - a[..., 0]) * (a[..., 3] - a[..., 1])
    area_b = (b[..., 2] - b[..., 0]) * (b[..., 3] - b[..., 1])
    union = area_a + area_b - inter
    return torch.where(union > 0, inter / union.clamp(min=1e-12), torch.zeros_like(inter))


# scalar conveniences --------------------------------------------------------

def _pair(a: Box, b: Box) -> tuple[torch.Tensor, torch.Tensor]:
    return a.as_tensor(), b.as_tensor()


def iou(a: Box, b: Box) -> float:
    return float(overlap(*_pair(a, b)).iou)


def box_ciou_loss(pred: Box, gt: Box) -> float:
    return float(ciou_loss(*_pair(pred, gt)))


def box_giou_loss(pred: Box, gt: Box) -> float:
    return float(giou_loss(*_pair(pred, gt)))


def box_diou_loss(pred: Box, gt: Box) -> float:
    return float(diou_loss(*_pair(pred, gt)))


def boxes_to_tensor(boxes: Sequence[Box], dtype=torch.float32) -> torch.Tensor:
    if not boxes:
        return torch.zeros((0, 4), dtype=dtype)
    return torch.tensor([b.as_list() for b in boxes], dtype=dtype)
