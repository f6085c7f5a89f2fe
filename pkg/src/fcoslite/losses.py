"""Classification losses (BCE, focal, gradient-weighted BCE) and the detection loss.

All per-sample functions are elementwise over tensors of probabilities ``p`` and
binary labels ``p_star``; python floats are accepted and promoted to float64.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Union

import numpy as np
import torch

from .geometry import REG_LOSSES

PROB_EPS = 1e-7

ArrayLike = Union[float, torch.Tensor]


@dataclass(frozen=True)
class WceConfig:
    mu: float = 0.7
    # weight is a constant for backprop; False lets gradients flow through it
    detach_weight: bool = True

    def __post_init__(self):
        if not 0.0 < self.mu < 1.0:
            raise ValueError(f"mu must lie in (0, 1), got {self.mu}")


@dataclass(frozen=True)
class FocalConfig:
    alpha_t: float = 0.4
    gamma: float = 1.2
    # alpha_t for positives and 1 - alpha_t for negatives; False applies alpha_t to both
    balanced: bool = True

    def __post_init__(self):
        if not 0.0 < self.alpha_t <= 1.0:
            raise ValueError(f"alpha_t must lie in (0, 1], got {self.alpha_t}")
        if self.gamma < 0:
            raise ValueError(f"gamma must be >= 0, got {self.gamma}")


@dataclass
class LossBreakdown:
    """Named scalar loss terms of one batch; ``total`` is always the sum."""

    cls: torch.Tensor
    reg: torch.Tensor
    focal_distill: Optional[torch.Tensor] = None
    global_distill: Optional[torch.Tensor] = None
    extras: dict = field(default_factory=dict)

    def components(self) -> dict[str, torch.Tensor]:
        out = {"cls": self.cls, "reg": self.reg}
        if self.focal_distill is not None:
            out["focal_distill"] = self.focal_distill
        if self.global_distill is not None:
            out["global_distill"] = self.global_distill
        return out

    @property
    def total(self) -> torch.Tensor:
        return sum(self.components().values())

    def as_floats(self) -> dict[str, float]:
        out = {k: float(v.detach()) for k, v in self.components().items()}
        out["total"] = math.fsum(out.values())
        return out


def _as_tensor(x: ArrayLike) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x
    return torch.as_tensor(x, dtype=torch.float64)


def _check_labels(p_star: torch.Tensor) -> None:
    if not ((p_star == 0) | (p_star == 1)).all():
        raise ValueError("labels must be binary (0 or 1)")


def clamp_prob(p: torch.Tensor) -> torch.Tensor:
    return p.clamp(PROB_EPS, 1.0 - PROB_EPS)


def bce(p: ArrayLike, p_star: ArrayLike) -> torch.Tensor:
    p, p_star = _as_tensor(p), _as_tensor(p_star).to(_as_tensor(p).dtype)
    _check_labels(p_star)
    p = clamp_prob(p)
    return -(p_star * torch.log(p) + (1 - p_star) * torch.log1p(-p))


def gradient_norm(p: ArrayLike, p_star: ArrayLike) -> torch.Tensor:
    """``|p - p*|``, the magnitude of the BCE gradient with respect to the logit."""
    p, p_star = _as_tensor(p), _as_tensor(p_star).to(_as_tensor(p).dtype)
    _check_labels(p_star)
    return (p - p_star).abs()


def wce_weight(g: ArrayLike, cfg: WceConfig = WceConfig()) -> torch.Tensor:
    """``e^g`` below the threshold ``mu``; ``|2e^mu - e^g|`` at and above it."""
    g = _as_tensor(g)
    eg = torch.exp(g)
    return torch.where(g < cfg.mu, eg, (2.0 * math.exp(cfg.mu) - eg).abs())


def wce(p: ArrayLike, p_star: ArrayLike, cfg: WceConfig = WceConfig()) -> torch.Tensor:
    p, p_star = _as_tensor(p), _as_tensor(p_star).to(_as_tensor(p).dtype)
    g = gradient_norm(p, p_star)
    w = wce_weight(g.detach() if cfg.detach_weight else g, cfg)
    return w * bce(p, p_star)


def focal(p: ArrayLike, p_star: ArrayLike, cfg: FocalConfig = FocalConfig()) -> torch.Tensor:
    p, p_star = _as_tensor(p), _as_tensor(p_star).to(_as_tensor(p).dtype)
    _check_labels(p_star)
    p = clamp_prob(p)
    p_t = p_star * p + (1 - p_star) * (1 - p)
    if cfg.balanced:
        a_t = p_star * cfg.alpha_t + (1 - p_star) * (1 - cfg.alpha_t)
    else:
        a_t = torch.full_like(p, cfg.alpha_t)
    return -a_t * (1 - p_t) ** cfg.gamma * torch.log(p_t)


CLS_KINDS = ("FL", "BCE", "WCE")
REG_KINDS = tuple(REG_LOSSES)


def cls_loss(p, p_star, kind: str, wce_cfg: WceConfig = WceConfig(), focal_cfg: FocalConfig = FocalConfig()):
    if kind == "BCE":
        return bce(p, p_star)
    if kind == "WCE":
        return wce(p, p_star, wce_cfg)
    if kind == "FL":
        return focal(p, p_star, focal_cfg)
    raise ValueError(f"unknown classification loss {kind!r}; expected one of {CLS_KINDS}")


def reg_loss(pred: torch.Tensor, gt: torch.Tensor, kind: str) -> torch.Tensor:
    try:
        fn = REG_LOSSES[kind]
    except KeyError:
        raise ValueError(f"unknown regression loss {kind!r}; expected one of {REG_KINDS}") from None
    return fn(pred, gt)


def detection_loss(
    cls_p: torch.Tensor,
    cls_target: torch.Tensor,
    pred_boxes: torch.Tensor,
    gt_boxes: torch.Tensor,
    cls_kind: str = "WCE",
    reg_kind: str = "CIoU",
    normalizer: Optional[float] = None,
    wce_cfg: WceConfig = WceConfig(),
    focal_cfg: FocalConfig = FocalConfig(),
) -> LossBreakdown:
    """Classification loss over every location plus box loss over positives.

    Args:
        cls_p: predicted probabilities, any shape (one entry per location/class).
        cls_target: binary targets, same shape as ``cls_p``.
        pred_boxes, gt_boxes: ``(P, 4)`` decoded boxes at the positive locations.
        normalizer: defaults to the number of positives; floored at 1.
    """
    if cls_p.numel() == 0:
        raise ValueError("detection_loss needs at least one classification term")
    if pred_boxes.shape != gt_boxes.shape:
        raise ValueError("pred_boxes and gt_boxes must align")
    n = pred_boxes.shape[0] if normalizer is None else normalizer
    n = max(float(n), 1.0)
    cls = cls_loss(cls_p, cls_target, cls_kind, wce_cfg, focal_cfg).sum() / n
    if pred_boxes.shape[0]:
        reg = reg_loss(pred_boxes, gt_boxes, reg_kind).sum() / n
    else:
        reg = cls_p.new_zeros(()) * cls_p.sum()
    return LossBreakdown(cls=cls, reg=reg)


# curves ---------------------------------------------------------------------

def loss_curves(mu_values: Iterable[float], focal_cfg: FocalConfig = FocalConfig(), step: float = 1e-3):
    """Weight and normalised loss curves over a probability/gradient-norm sweep.

    ``x`` doubles as the gradient norm for the weight columns and as the
    predicted probability of a positive sample (``p* = 1``) for the loss
    columns.  Each loss curve is divided by its own value at ``p = 0.5``.
    """
    mu_values = [float(m) for m in mu_values]
    if not mu_values:
        raise ValueError("need at least one mu value")
    n = int(round((0.999 - 0.001) / step)) + 1
    x = torch.tensor(np.round(0.001 + step * np.arange(n), 6), dtype=torch.float64)
    ones = torch.ones_like(x)
    half = torch.tensor(0.5, dtype=torch.float64)
    one = torch.tensor(1.0, dtype=torch.float64)
    cols: dict[str, torch.Tensor] = {"x": x}
    for mu in mu_values:
        cols[f"weight_mu_{mu:g}"] = wce_weight(x, WceConfig(mu))
    cols["bce_norm"] = bce(x, ones) / bce(half, one)
    cols["fl_norm"] = focal(x, ones, focal_cfg) / focal(half, one, focal_cfg)
    for mu in mu_values:
        cfg = WceConfig(mu)
        cols[f"wce_norm_mu_{mu:g}"] = wce(x, ones, cfg) / wce(half, one, cfg)
    return cols


def emit_loss_curves(mu_values: Iterable[float], out_path, focal_cfg: FocalConfig = FocalConfig()) -> Path:
    cols = loss_curves(mu_values, focal_cfg)
    out_path = Path(out_path)
    names = list(cols)
    rows = torch.stack([cols[k] for k in names], dim=1).tolist()
    with open(out_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(names)
        for r in rows:
            w.writerow([f"{r[0]:.3f}"] + [repr(v) for v in r[1:]])
    return out_path
