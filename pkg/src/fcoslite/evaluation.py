"""Detection evaluation: greedy matching, P/R/F1/specificity, AP and mAP@0.5,
the {healthy, sick, background} confusion matrix and PR curves.

Conventions:
    * AP uses every detection the detector emits; P/R/F1, specificity and the
      confusion matrix use only detections scoring at least ``conf_threshold``.
    * TN is counted per (image, class) when the class appears in neither the
      ground truth nor the thresholded detections of that image.
    * A rate with a zero denominator is 0, except P/R/F1 of a class with no
      gts and no detections, which is ``None`` and skipped from averages.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Optional, Sequence

import numpy as np
import torch

from .geometry import Box, pairwise_iou
from .targets import Detection, infer_batch

SCHEMA_VERSION = 1
CLASS_NAMES = ("healthy", "sick")
BACKGROUND = len(CLASS_NAMES)
DEFAULT_IOU = 0.5
DEFAULT_CONF = 0.5


@dataclass
class Counts:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    def __add__(self, other: "Counts") -> "Counts":
        return Counts(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn, self.tn + other.tn)


@dataclass
class MatchResult:
    det_tp: list[bool]  # aligned with the input detection order
    det_gt: list[int]  # matched gt index or -1
    gt_matched: list[bool]
    counts: dict[int, Counts]


@dataclass(frozen=True)
class PrMetrics:
    precision: Optional[float]
    recall: Optional[float]
    f1: Optional[float]
    specificity: float


def _check_threshold(name: str, v: float) -> None:
    if not 0.0 <= v <= 1.0 or math.isnan(v):
        raise ValueError(f"{name} must lie in [0, 1], got {v}")


def _gt_label(b: Box) -> int:
    if b.label not in range(len(CLASS_NAMES)):
        raise ValueError(f"gt box needs a label in {{0, 1}}, got {b.label}")
    return int(b.label)


def _tensor(boxes: Sequence[Box]) -> torch.Tensor:
    if not boxes:
        return torch.zeros((0, 4), dtype=torch.float64)
    return torch.tensor([b.as_list() for b in boxes], dtype=torch.float64)


def _score_order(dets: Sequence[Detection]) -> list[int]:
    return sorted(range(len(dets)), key=lambda i: (-dets[i].score, dets[i].class_id, tuple(dets[i].box.as_list())))


def match(
    dets: Sequence[Detection],
    gts: Sequence[Box],
    iou_threshold: float = DEFAULT_IOU,
    num_classes: int = len(CLASS_NAMES),
) -> MatchResult:
    """Greedy matching in descending score order within each class.

    A detection is a TP when its best-IoU unmatched gt of the same class
    reaches ``iou_threshold``.  Detection order on input does not matter.
    """
    _check_threshold("iou_threshold", iou_threshold)
    labels = [_gt_label(g) for g in gts]
    ious = pairwise_iou(_tensor([d.box for d in dets]), _tensor(gts)).numpy()
    det_tp = [False] * len(dets)
    det_gt = [-1] * len(dets)
    gt_matched = [False] * len(gts)
    for i in _score_order(dets):
        cands = [j for j in range(len(gts)) if not gt_matched[j] and labels[j] == dets[i].class_id]
        if not cands:
            continue
        j = max(cands, key=lambda k: (ious[i, k], -k))
        if ious[i, j] >= iou_threshold:
            det_tp[i], det_gt[i], gt_matched[j] = True, j, True
    counts = {}
    for c in range(num_classes):
        n_det = sum(d.class_id == c for d in dets)
        n_gt = sum(l == c for l in labels)
        tp = sum(t for t, d in zip(det_tp, dets) if d.class_id == c)
        counts[c] = Counts(tp=tp, fp=n_det - tp, fn=n_gt - tp, tn=int(n_det == 0 and n_gt == 0))
    return MatchResult(det_tp, det_gt, gt_matched, counts)


def _ratio(num: float, den: float) -> float:
    return num / den if den > 0 else 0.0


def pr_metrics(counts: Counts) -> PrMetrics:
    if counts.tp + counts.fp + counts.fn == 0:
        p = r = f1 = None
    else:
        p = _ratio(counts.tp, counts.tp + counts.fp)
        r = _ratio(counts.tp, counts.tp + counts.fn)
        f1 = _ratio(2 * p * r, p + r)
    return PrMetrics(p, r, f1, _ratio(counts.tn, counts.tn + counts.fp))


def pr_curve(flags: Sequence[bool], n_gt: int) -> tuple[np.ndarray, np.ndarray]:
    """Recall and precision after each ranked detection."""
    f = np.asarray(flags, dtype=np.float64)
    tp = np.cumsum(f)
    fp = np.cumsum(1.0 - f)
    recall = tp / n_gt if n_gt > 0 else np.zeros_like(tp)
    precision = tp / np.maximum(tp + fp, 1.0)
    return recall, precision


def average_precision(flags: Sequence[bool], n_gt: int, method: str = "all") -> Optional[float]:
    """Area under the precision envelope for TP/FP ``flags`` ranked by score.

    ``method="all"`` integrates over every recall step; ``"11pt"`` samples the
    envelope at recall 0, 0.1, ..., 1.  Returns ``None`` when ``n_gt == 0``.
    """
    if n_gt < 0:
        raise ValueError("n_gt must be non-negative")
    if n_gt == 0:
        return None
    if sum(bool(x) for x in flags) > n_gt:
        raise ValueError("more true positives than gts")
    if len(flags) == 0:
        return 0.0
    recall, precision = pr_curve(flags, n_gt)
    if method == "11pt":
        return float(np.mean([precision[recall >= t].max() if (recall >= t).any() else 0.0 for t in np.linspace(0, 1, 11)]))
    if method != "all":
        raise ValueError(f"unknown AP method {method!r}")
    r = np.concatenate([[0.0], recall, [recall[-1]]])
    p = np.concatenate([[0.0], precision, [0.0]])
    p = np.maximum.accumulate(p[::-1])[::-1]
    steps = np.nonzero(r[1:] != r[:-1])[0]
    return float(np.sum((r[steps + 1] - r[steps]) * p[steps + 1]))


def confusion_matrix(
    dets: Sequence[Detection], gts: Sequence[Box], iou_threshold: float = DEFAULT_IOU
) -> np.ndarray:
    """Rows gt {healthy, sick, background}, columns predicted.

    Class-agnostic greedy matching; an unmatched detection counts in the
    background row and an unmatched gt in the background column.
    """
    k = len(CLASS_NAMES) + 1
    cm = np.zeros((k, k), dtype=np.int64)
    labels = [_gt_label(g) for g in gts]
    ious = pairwise_iou(_tensor([d.box for d in dets]), _tensor(gts)).numpy()
    used = [False] * len(gts)
    for i in _score_order(dets):
        free = [j for j in range(len(gts)) if not used[j]]
        j = max(free, key=lambda k_: (ious[i, k_], labels[k_] == dets[i].class_id, -k_)) if free else None
        if j is not None and ious[i, j] >= iou_threshold:
            used[j] = True
            cm[labels[j], dets[i].class_id] += 1
        else:
            cm[BACKGROUND, dets[i].class_id] += 1
    for j, u in enumerate(used):
        if not u:
            cm[labels[j], BACKGROUND] += 1
    return cm


@dataclass
class ClassReport:
    name: str
    ap: Optional[float]
    precision: Optional[float]
    recall: Optional[float]
    f1: Optional[float]
    specificity: float
    n_gt: int
    tp: int
    fp: int
    fn: int
    tn: int


@dataclass
class EvalReport:
    classes: list[ClassReport]
    map: float
    precision: float
    recall: float
    f1: float
    specificity: float
    confusion: list[list[int]]
    pr_curves: dict[str, dict[str, list[float]]]
    settings: dict
    n_images: int
    extra: dict = field(default_factory=dict)

    @property
    def selection_score(self) -> float:
        """Model-selection scalar: mAP + F1."""
        return self.map + self.f1

    def to_dict(self) -> dict:
        d = asdict(self)
        d["schema"] = SCHEMA_VERSION
        return d

    def to_json(self, path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))
        return path

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        if d.get("schema") != SCHEMA_VERSION:
            raise ValueError(f"unsupported report schema {d.get('schema')!r}")
        d = {k: v for k, v in d.items() if k != "schema"}
        d["classes"] = [ClassReport(**c) for c in d["classes"]]
        return cls(**d)

    def write_pr_csv(self, path) -> Path:
        path = Path(path)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["class", "rank", "recall", "precision"])
            for name, curve in self.pr_curves.items():
                for k, (r, p) in enumerate(zip(curve["recall"], curve["precision"])):
                    w.writerow([name, k, repr(r), repr(p)])
        return path

    def summary_line(self) -> str:
        return f"mAP@0.5 {self.map:.3f}  P {self.precision:.3f}  R {self.recall:.3f}  F1 {self.f1:.3f}  spec {self.specificity:.3f}"


def _mean(vals: Iterable[Optional[float]]) -> float:
    vals = [v for v in vals if v is not None]
    return float(sum(vals) / len(vals)) if vals else 0.0


def evaluate_detections(
    dets_per_image: Sequence[Sequence[Detection]],
    gts_per_image: Sequence[Sequence[Box]],
    iou_threshold: float = DEFAULT_IOU,
    conf_threshold: float = DEFAULT_CONF,
    ap_method: str = "all",
) -> EvalReport:
    if len(dets_per_image) != len(gts_per_image):
        raise ValueError("one detection list per image required")
    if not gts_per_image:
        raise ValueError("empty dataset")
    _check_threshold("conf_threshold", conf_threshold)
    nc = len(CLASS_NAMES)
    ranked: dict[int, list[tuple[float, int, int, bool]]] = {c: [] for c in range(nc)}
    totals = {c: Counts() for c in range(nc)}
    cm = np.zeros((nc + 1, nc + 1), dtype=np.int64)
    n_gt = {c: 0 for c in range(nc)}
    for img, (dets, gts) in enumerate(zip(dets_per_image, gts_per_image)):
        full = match(dets, gts, iou_threshold, nc)
        for k, (d, tp) in enumerate(zip(dets, full.det_tp)):
            ranked[d.class_id].append((-d.score, img, k, tp))
        for g in gts:
            n_gt[_gt_label(g)] += 1
        kept = [d for d in dets if d.score >= conf_threshold]
        op = match(kept, gts, iou_threshold, nc)
        for c in range(nc):
            totals[c] = totals[c] + op.counts[c]
        cm += confusion_matrix(kept, gts, iou_threshold)
    classes, curves = [], {}
    for c, name in enumerate(CLASS_NAMES):
        flags = [tp for *_, tp in sorted(ranked[c])]
        ap = average_precision(flags, n_gt[c], ap_method)
        rec, prec = pr_curve(flags, n_gt[c])
        curves[name] = {"recall": rec.tolist(), "precision": prec.tolist()}
        m = pr_metrics(totals[c])
        t = totals[c]
        classes.append(ClassReport(name, ap, m.precision, m.recall, m.f1, m.specificity, n_gt[c], t.tp, t.fp, t.fn, t.tn))
    return EvalReport(
        classes=classes,
        map=_mean(c.ap for c in classes),
        precision=_mean(c.precision for c in classes),
        recall=_mean(c.recall for c in classes),
        f1=_mean(c.f1 for c in classes),
        specificity=_mean(c.specificity for c in classes),
        confusion=cm.tolist(),
        pr_curves=curves,
        settings={"iou_threshold": iou_threshold, "conf_threshold": conf_threshold, "ap_method": ap_method},
        n_images=len(gts_per_image),
    )


Predictor = Callable[[torch.Tensor], list[list[Detection]]]


def predictor_for(network, batch_size: int = 16) -> Predictor:
    """Batched float predictor around a detector network."""

    def run(images: torch.Tensor) -> list[list[Detection]]:
        out = []
        for k in range(0, images.shape[0], batch_size):
            out.extend(infer_batch(network, images[k : k + batch_size]))
        return out

    return run


def gt_replay(gts_per_image: Sequence[Sequence[Box]], scores: Optional[Sequence[Sequence[float]]] = None) -> list[list[Detection]]:
    """Oracle detections that copy the ground truth (score 1 unless given)."""
    out = []
    for i, gts in enumerate(gts_per_image):
        s = scores[i] if scores is not None else [1.0] * len(gts)
        out.append([Detection(Box(*g.as_list()), _gt_label(g), float(v)) for g, v in zip(gts, s)])
    return out


def evaluate(dataset, network, batch_size: int = 16, **kwargs) -> EvalReport:
    """Evaluate ``network`` (a detector module or a predictor callable taking a
    ``(B, 3, H, W)`` batch) over ``(image, gt_boxes)`` pairs."""
    items = list(dataset)
    if not items:
        raise ValueError("empty dataset")
    predict = network if not isinstance(network, torch.nn.Module) else predictor_for(network, batch_size)
    images = torch.stack([img for img, _ in items])
    gts = [list(g) for _, g in items]
    dets = []
    for k in range(0, len(items), batch_size):
        dets.extend(predict(images[k : k + batch_size]))
    return evaluate_detections(dets, gts, **kwargs)
