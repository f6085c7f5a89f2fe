"""Anchor-free target assignment, box decoding, NMS and end-to-end inference."""
from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Optional, Sequence

import numpy as np
import torch

from .detector import DetectorOutput, DetectorSpec
from .geometry import Box, pairwise_iou

DEFAULT_SCORE_THRESHOLD = 0.05
DEFAULT_NMS_THRESHOLD = 0.6
MAX_DETECTIONS = 100
PRE_NMS_TOP_K = 1000


@dataclass(frozen=True)
class Detection:
    box: Box
    class_id: int
    score: float

    def __post_init__(self):
        if self.class_id not in (0, 1):
            raise ValueError(f"class_id must be 0 or 1, got {self.class_id}")
        if not 0.0 < self.score <= 1.0:
            raise ValueError(f"score must lie in (0, 1], got {self.score}")


class LevelTargets(NamedTuple):
    cls_target: torch.Tensor  # (2, H, W) one-hot on positives
    reg_target: torch.Tensor  # (4, H, W) pixel distances, zero on negatives
    pos_mask: torch.Tensor  # (H, W) bool
    gt_index: torch.Tensor  # (H, W) long, -1 on negatives


TargetMap = list[LevelTargets]


def level_points(spec: DetectorSpec, dtype=torch.float32) -> list[torch.Tensor]:
    """Image-plane ``(x, y)`` of every feature location, row-major, per level."""
    pts = []
    for (h, w), s in zip(spec.level_shapes(), spec.strides):
        ys = s / 2 + s * torch.arange(h, dtype=dtype)
        xs = s / 2 + s * torch.arange(w, dtype=dtype)
        yy, xx = torch.meshgrid(ys, xs, indexing="ij")
        pts.append(torch.stack([xx.reshape(-1), yy.reshape(-1)], dim=1))
    return pts


def _as_arrays(gt_boxes, gt_classes):
    if isinstance(gt_boxes, torch.Tensor):
        boxes = gt_boxes.to(torch.float64).reshape(-1, 4)
        classes = torch.as_tensor(gt_classes, dtype=torch.long).reshape(-1)
    else:
        gt_boxes = list(gt_boxes)
        boxes = torch.tensor([b.as_list() for b in gt_boxes], dtype=torch.float64).reshape(-1, 4)
        if gt_classes is None:
            gt_classes = [b.label for b in gt_boxes]
        classes = torch.as_tensor(list(gt_classes), dtype=torch.long).reshape(-1)
    if boxes.shape[0] != classes.shape[0]:
        raise ValueError("one class per gt box required")
    return boxes, classes


def check_inside_image(boxes: torch.Tensor, spec: DetectorSpec) -> None:
    h, w = spec.input_size
    if boxes.numel() and (
        (boxes[:, 0] < 0).any() or (boxes[:, 1] < 0).any() or (boxes[:, 2] > w).any() or (boxes[:, 3] > h).any()
    ):
        raise ValueError("gt box outside the image")
    if boxes.numel() and ((boxes[:, 2] <= boxes[:, 0]) | (boxes[:, 3] <= boxes[:, 1])).any():
        raise ValueError("degenerate gt box")


def assign(gt_boxes, spec: DetectorSpec, gt_classes=None) -> TargetMap:
    """FCOS assignment, by default without centre sampling.

    A location is positive when its image point lies strictly inside a gt box
    and the largest of its four distances falls in the level's size range.
    Competing boxes are resolved to the smallest area (lowest index on ties).
    With ``spec.center_radius > 0`` the point must also lie strictly inside the
    box centre square of half-width ``center_radius * stride``.
    """
    boxes, classes = _as_arrays(gt_boxes, gt_classes)
    check_inside_image(boxes, spec)
    if ((classes < 0) | (classes >= spec.num_classes)).any():
        raise ValueError("gt class out of range")
    areas = (boxes[:, 2] - boxes[:, 0]) * (boxes[:, 3] - boxes[:, 1])
    out = []
    for pts, (h, w), (lo, hi), stride in zip(
        level_points(spec, torch.float64), spec.level_shapes(), spec.size_ranges(), spec.strides
    ):
        n = pts.shape[0]
        cls_t = torch.zeros((spec.num_classes, n))
        reg_t = torch.zeros((4, n))
        gt_idx = torch.full((n,), -1, dtype=torch.long)
        if boxes.shape[0]:
            x, y = pts[:, 0:1], pts[:, 1:2]
            ltrb = torch.stack([x - boxes[:, 0], y - boxes[:, 1], boxes[:, 2] - x, boxes[:, 3] - y], dim=2)
            inside = ltrb.min(dim=2).values > 0
            if spec.center_radius > 0:
                r = spec.center_radius * stride
                cx, cy = (boxes[:, 0] + boxes[:, 2]) / 2, (boxes[:, 1] + boxes[:, 3]) / 2
                inside &= ((x - cx).abs() < r) & ((y - cy).abs() < r)
            m = ltrb.max(dim=2).values
            ok = inside & (m > lo) & (m <= hi)
            cand = torch.where(ok, areas.expand(n, -1), torch.full_like(m, float("inf")))
            best = cand.argmin(dim=1)
            pos = ok.any(dim=1)
            gt_idx[pos] = best[pos]
            sel = ltrb[torch.arange(n), best]  # (n, 4)
            reg_t[:, pos] = sel[pos].T.float()
            cls_t[classes[best[pos]], pos.nonzero().squeeze(1)] = 1.0
        else:
            pos = torch.zeros(n, dtype=torch.bool)
        out.append(LevelTargets(cls_t.reshape(-1, h, w), reg_t.reshape(4, h, w), pos.reshape(h, w), gt_idx.reshape(h, w)))
    return out


def encode(point: tuple[float, float], box: Box) -> tuple[float, float, float, float]:
    x, y = point
    return (x - box.x1, y - box.y1, box.x2 - x, box.y2 - y)


def decode(point: tuple[float, float], reg: Sequence[float]) -> Box:
    l, t, r, b = (float(v) for v in reg)
    if min(l, t, r, b) <= 0:
        raise ValueError(f"regression distances must be positive, got {reg}")
    x, y = point
    return Box(x - l, y - t, x + r, y + b)


def decode_boxes(points: torch.Tensor, ltrb: torch.Tensor) -> torch.Tensor:
    """Vectorised decode: ``points (N, 2)`` and ``ltrb (N, 4)`` to ``(N, 4)`` corners."""
    return torch.stack(
        [points[:, 0] - ltrb[:, 0], points[:, 1] - ltrb[:, 1], points[:, 0] + ltrb[:, 2], points[:, 1] + ltrb[:, 3]],
        dim=1,
    )


def _order(dets: Sequence[Detection]) -> list[int]:
    return sorted(
        range(len(dets)),
        key=lambda i: (-dets[i].score, dets[i].class_id, tuple(dets[i].box.as_list())),
    )


def nms(
    dets: Sequence[Detection],
    iou_threshold: float = DEFAULT_NMS_THRESHOLD,
    score_threshold: float = 0.0,
    max_detections: Optional[int] = MAX_DETECTIONS,
) -> list[Detection]:
    """Per-class greedy suppression; a box is dropped when its IoU with a kept
    box of the same class exceeds ``iou_threshold``."""
    for name, v in (("iou_threshold", iou_threshold), ("score_threshold", score_threshold)):
        if not 0.0 <= v <= 1.0:
            raise ValueError(f"{name} must lie in [0, 1], got {v}")
    dets = [d for d in dets if d.score >= score_threshold]
    order = _order(dets)
    if not order:
        return []
    boxes = torch.tensor([dets[i].box.as_list() for i in order], dtype=torch.float64)
    classes = np.array([dets[i].class_id for i in order])
    ious = pairwise_iou(boxes, boxes).numpy()
    keep: list[int] = []
    suppressed = np.zeros(len(order), dtype=bool)
    for a in range(len(order)):
        if suppressed[a]:
            continue
        keep.append(a)
        if max_detections is not None and len(keep) >= max_detections:
            break
        suppressed |= (classes == classes[a]) & (ious[a] > iou_threshold)
    return [dets[order[a]] for a in keep]


def postprocess(
    output: DetectorOutput,
    spec: DetectorSpec,
    score_threshold: float = DEFAULT_SCORE_THRESHOLD,
    nms_threshold: float = DEFAULT_NMS_THRESHOLD,
    max_detections: int = MAX_DETECTIONS,
) -> list[list[Detection]]:
    """Sigmoid scores (no centre-ness), decode, threshold, top-k, NMS; per image."""
    points = torch.cat(level_points(spec))
    scores = torch.cat([c.flatten(2) for c in output.cls_logits], dim=2).sigmoid()  # (B, 2, N)
    reg = torch.cat([r.flatten(2) for r in output.reg], dim=2)  # (B, 4, N)
    h, w = spec.input_size
    results = []
    for b in range(scores.shape[0]):
        s = scores[b].double()
        cand = (s > score_threshold).nonzero()
        if cand.shape[0] > PRE_NMS_TOP_K:
            top = s[cand[:, 0], cand[:, 1]].topk(PRE_NMS_TOP_K).indices
            cand = cand[top]
        boxes = decode_boxes(points[cand[:, 1]].double(), reg[b][:, cand[:, 1]].T.double())
        boxes[:, 0::2] = boxes[:, 0::2].clamp(0, w)
        boxes[:, 1::2] = boxes[:, 1::2].clamp(0, h)
        dets = []
        for (c, _), bx, sc in zip(cand.tolist(), boxes.tolist(), s[cand[:, 0], cand[:, 1]].tolist()):
            if bx[2] <= bx[0] or bx[3] <= bx[1]:
                continue
            dets.append(Detection(Box(*bx), int(c), float(sc)))
        results.append(nms(dets, nms_threshold, 0.0, max_detections))
    return results


@torch.no_grad()
def infer(network, image: torch.Tensor, **kwargs) -> list[Detection]:
    """Detections for one ``(3, H, W)`` image (network in eval mode)."""
    spec = network.spec
    if image.dim() != 3 or tuple(image.shape) != (spec.in_channels, *spec.input_size):
        raise ValueError(f"expected image of shape {(spec.in_channels, *spec.input_size)}, got {tuple(image.shape)}")
    network.eval()
    return postprocess(network(image[None]), spec, **kwargs)[0]


@torch.no_grad()
def infer_batch(network, images: torch.Tensor, **kwargs) -> list[list[Detection]]:
    network.eval()
    return postprocess(network(images), network.spec, **kwargs)
