"""Plain and distillation training loops, checkpoint selection and the loss ablation grid."""
from __future__ import annotations

import copy
import csv
import json
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional, Sequence

import torch
from torch import nn

from .detector import Detector, DetectorSpec, build_student, build_teacher, load_checkpoint, save_checkpoint
from .distill import Distiller, KdConfig, MaskSet, build_masks, total_loss
from .evaluation import EvalReport, evaluate, predictor_for
from .geometry import Box
from .losses import CLS_KINDS, REG_KINDS, FocalConfig, LossBreakdown, WceConfig, detection_loss
from .targets import assign, decode_boxes, level_points

MU_SWEEP = (0.4, 0.5, 0.6, 0.7, 0.8)


class NonFiniteLossError(FloatingPointError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    model: str = "student"  # or "teacher"
    teacher_depth: int = 50
    lr: float = 0.03
    momentum: float = 0.9
    weight_decay: float = 1e-4
    # step decay at these fractions of the total iteration count
    milestones: tuple[float, ...] = (0.6, 0.85)
    lr_factor: float = 0.1
    warmup_iters: int = 100
    batch_size: int = 8
    epochs: int = 20
    cls_kind: str = "WCE"
    reg_kind: str = "CIoU"
    mu: float = 0.7
    focal_alpha: float = 0.4
    focal_gamma: float = 1.2
    grad_clip: float = 10.0
    hflip: bool = True
    seed: int = 0
    deterministic: bool = True
    eval_every: int = 1

    def __post_init__(self):
        if self.model not in ("student", "teacher"):
            raise ValueError(f"model must be student or teacher, got {self.model!r}")
        if self.cls_kind not in CLS_KINDS or self.reg_kind not in REG_KINDS:
            raise ValueError(f"loss kinds must come from {CLS_KINDS} x {REG_KINDS}")
        if self.lr < 0 or self.batch_size < 1 or self.epochs < 1:
            raise ValueError("lr >= 0, batch_size >= 1 and epochs >= 1 required")
        if not all(0 < m <= 1 for m in self.milestones) or list(self.milestones) != sorted(self.milestones):
            raise ValueError("milestones must be increasing fractions in (0, 1]")
        WceConfig(self.mu)
        FocalConfig(self.focal_alpha, self.focal_gamma)

    @classmethod
    def paper(cls, **kw) -> "TrainConfig":
        """Large-scale schedule: 2e-3 dropping by 10x at 24k and 28k of 30k iterations."""
        return cls(lr=2e-3, milestones=(0.8, 28 / 30), warmup_iters=500, **kw)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "milestones" in d:
            d["milestones"] = tuple(d["milestones"])
        return cls(**d)


@dataclass
class TrainResult:
    network: Detector
    best_epoch: int
    best_report: EvalReport
    history: list[dict]
    log: list[dict]
    distiller: Optional[Distiller] = None
    seconds: float = 0.0


@dataclass
class _Data:
    images: torch.Tensor  # (N, 3, H, W)
    boxes: list[list[Box]]
    cls_t: list[torch.Tensor] = field(default_factory=list)  # per flip: (N, 2, L)
    reg_t: list[torch.Tensor] = field(default_factory=list)  # (N, 4, L)
    pos: list[torch.Tensor] = field(default_factory=list)  # (N, L)
    masks: list[list[MaskSet]] = field(default_factory=list)  # per flip, per level, batched over N


def _flip_boxes(boxes: Sequence[Box], width: int) -> list[Box]:
    return [Box(width - b.x2, b.y1, width - b.x1, b.y2, label=b.label) for b in boxes]


def _prepare(images: torch.Tensor, boxes: list[list[Box]], spec: DetectorSpec, flips: bool, kd: bool) -> _Data:
    data = _Data(images, boxes)
    w = spec.input_size[1]
    for flip in ([False, True] if flips else [False]):
        cls_l, reg_l, pos_l, per_image = [], [], [], []
        for bx in boxes:
            bx = _flip_boxes(bx, w) if flip else bx
            t = assign(bx, spec)
            cls_l.append(torch.cat([lv.cls_target.flatten(1) for lv in t], 1))
            reg_l.append(torch.cat([lv.reg_target.flatten(1) for lv in t], 1))
            pos_l.append(torch.cat([lv.pos_mask.flatten() for lv in t]))
            per_image.append(bx)
        data.cls_t.append(torch.stack(cls_l))
        data.reg_t.append(torch.stack(reg_l))
        data.pos.append(torch.stack(pos_l))
        if kd:
            data.masks.append(build_masks([[b.as_list() for b in bx] for bx in per_image], spec))
    return data


def _param_groups(modules: Sequence[nn.Module], weight_decay: float) -> list[dict]:
    decay, no_decay, seen = [], [], set()
    for mod in modules:
        for name, p in mod.named_parameters():
            if not p.requires_grad or id(p) in seen:
                continue
            seen.add(id(p))
            # batch-norm / layer-norm affine terms, biases and scalar scales
            (no_decay if p.ndim <= 1 else decay).append(p)
    return [{"params": decay, "weight_decay": weight_decay}, {"params": no_decay, "weight_decay": 0.0}]


def lr_at(cfg: TrainConfig, it: int, total: int) -> float:
    factor = 1.0
    for m in cfg.milestones:
        if it >= int(m * total):
            factor *= cfg.lr_factor
    if cfg.warmup_iters and it < cfg.warmup_iters:
        factor *= (it + 1) / cfg.warmup_iters
    return cfg.lr * factor


def _flat(output) -> tuple[torch.Tensor, torch.Tensor]:
    cls = torch.cat([c.flatten(2) for c in output.cls_logits], 2)
    reg = torch.cat([r.flatten(2) for r in output.reg], 2)
    return cls, reg


def batch_detection_loss(output, cls_t, reg_t, pos, points, cfg: TrainConfig) -> LossBreakdown:
    """Detection loss of one batch from flattened targets."""
    cls, reg = _flat(output)
    p = torch.sigmoid(cls)
    b_idx, l_idx = pos.nonzero(as_tuple=True)
    pts = points[l_idx]
    pred = decode_boxes(pts, reg[b_idx, :, l_idx])
    gt = decode_boxes(pts, reg_t[b_idx, :, l_idx])
    return detection_loss(
        p,
        cls_t,
        pred,
        gt,
        cls_kind=cfg.cls_kind,
        reg_kind=cfg.reg_kind,
        normalizer=float(pos.sum()),
        wce_cfg=WceConfig(cfg.mu),
        focal_cfg=FocalConfig(cfg.focal_alpha, cfg.focal_gamma),
    )


def _set_determinism(cfg: TrainConfig) -> None:
    torch.manual_seed(cfg.seed)
    if cfg.deterministic:
        torch.set_num_threads(1)
        torch.use_deterministic_algorithms(True)


def _dump_batch(out_dir: Optional[Path], idx: torch.Tensor, parts: dict, step: int) -> Optional[Path]:
    if out_dir is None:
        return None
    path = Path(out_dir) / "nonfinite_batch.json"
    path.write_text(json.dumps({"step": step, "indices": idx.tolist(), "loss": parts}, indent=1))
    return path


def _fit(
    cfg: TrainConfig,
    network: Detector,
    train: _Data,
    val_pairs: list,
    out_dir: Optional[Path],
    teacher: Optional[Detector] = None,
    distiller: Optional[Distiller] = None,
    on_epoch: Optional[Callable[[dict], None]] = None,
) -> TrainResult:
    start = time.perf_counter()
    spec = network.spec
    points = torch.cat(level_points(spec))
    n = train.images.shape[0]
    steps_per_epoch = math.ceil(n / cfg.batch_size)
    total = steps_per_epoch * cfg.epochs
    modules = [network] + ([distiller] if distiller is not None else [])
    opt = torch.optim.SGD(_param_groups(modules, cfg.weight_decay), lr=cfg.lr, momentum=cfg.momentum)
    gen = torch.Generator().manual_seed(cfg.seed)
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    log_fh = open(out_dir / "metrics.jsonl", "w") if out_dir is not None else None
    log, history = [], []
    best_score, best_state, best_epoch, best_report = -math.inf, None, -1, None
    it = 0
    try:
        for epoch in range(cfg.epochs):
            network.train()
            if distiller is not None:
                distiller.train()
            order = torch.randperm(n, generator=gen)
            flips = torch.rand(n, generator=gen) < 0.5 if cfg.hflip else torch.zeros(n, dtype=torch.bool)
            for k in range(steps_per_epoch):
                idx = order[k * cfg.batch_size : (k + 1) * cfg.batch_size]
                f = flips[idx]
                images = train.images[idx]
                images = torch.where(f[:, None, None, None], images.flip(-1), images)
                sel = f.long()
                cls_t = torch.stack([train.cls_t[s][i] for s, i in zip(sel.tolist(), idx.tolist())])
                reg_t = torch.stack([train.reg_t[s][i] for s, i in zip(sel.tolist(), idx.tolist())])
                pos = torch.stack([train.pos[s][i] for s, i in zip(sel.tolist(), idx.tolist())])
                lr = lr_at(cfg, it, total)
                for g in opt.param_groups:
                    g["lr"] = lr
                if teacher is None:
                    out = network(images)
                    loss = batch_detection_loss(out, cls_t, reg_t, pos, points, cfg)
                else:
                    with torch.no_grad():
                        f_t = teacher.features(images)
                    out, f_s = network.forward_with_features(images)
                    det = batch_detection_loss(out, cls_t, reg_t, pos, points, cfg)
                    masks = [
                        MaskSet(*(torch.stack([getattr(train.masks[s][lv], fld)[i] for s, i in zip(sel.tolist(), idx.tolist())])
                                  for fld in MaskSet._fields))
                        for lv in range(len(spec.strides))
                    ]
                    focal, glob = distiller(f_t, f_s, masks)
                    try:
                        loss = total_loss(det, focal, glob)
                    except FloatingPointError as e:
                        dump = _dump_batch(out_dir, idx, {"error": str(e)}, it)
                        raise NonFiniteLossError(f"{e} at step {it} (batch dump: {dump})") from None
                parts = loss.as_floats()
                if not all(math.isfinite(v) for v in parts.values()):
                    dump = _dump_batch(out_dir, idx, parts, it)
                    raise NonFiniteLossError(f"non-finite loss {parts} at step {it} (batch dump: {dump})")
                opt.zero_grad(set_to_none=True)
                loss.total.backward()
                if cfg.grad_clip:
                    nn.utils.clip_grad_norm_([p for g in opt.param_groups for p in g["params"]], cfg.grad_clip)
                opt.step()
                rec = {"event": "step", "epoch": epoch, "step": it, "lr": lr, **parts}
                log.append(rec)
                if log_fh:
                    log_fh.write(json.dumps(rec) + "\n")
                it += 1
            if (epoch + 1) % cfg.eval_every == 0 or epoch == cfg.epochs - 1:
                report = evaluate(val_pairs, predictor_for(network))
                rec = {"event": "eval", "epoch": epoch, "map": report.map, "f1": report.f1, "score": report.selection_score}
                history.append(rec)
                log.append(rec)
                if log_fh:
                    log_fh.write(json.dumps(rec) + "\n")
                    log_fh.flush()
                if on_epoch:
                    on_epoch(rec)
                if report.selection_score > best_score:
                    best_score, best_epoch, best_report = report.selection_score, epoch, report
                    best_state = copy.deepcopy(network.state_dict())
    finally:
        if log_fh:
            log_fh.close()
    network.load_state_dict(best_state)
    network.eval()
    result = TrainResult(network, best_epoch, best_report, history, log, distiller, time.perf_counter() - start)
    if out_dir is not None:
        save_checkpoint(network, Path(out_dir) / "checkpoint.bin", {"best_epoch": best_epoch, "config": cfg.to_dict()})
        best_report.to_json(Path(out_dir) / "report.json")
    return result


def _split(corpus, split: str):
    from .synthcorpus import load

    c = load(corpus, split) if isinstance(corpus, (str, Path)) else corpus[split]
    images, boxes = c.tensors()
    return images, boxes


def build_network(cfg: TrainConfig, spec: DetectorSpec) -> Detector:
    torch.manual_seed(cfg.seed)
    return build_student(spec) if cfg.model == "student" else build_teacher(cfg.teacher_depth, spec)


def train(cfg: TrainConfig, corpus, spec: DetectorSpec = DetectorSpec(), out_dir=None, on_epoch=None) -> TrainResult:
    """Train from scratch and keep the epoch with the best val mAP + F1.

    ``corpus`` is a corpus directory or a mapping ``split -> Corpus``.
    """
    _set_determinism(cfg)
    images, boxes = _split(corpus, "train")
    val = list(zip(*_split(corpus, "val")))
    net = build_network(cfg, spec)
    data = _prepare(images, boxes, spec, cfg.hflip, kd=False)
    return _fit(cfg, net, data, val, Path(out_dir) if out_dir else None, on_epoch=on_epoch)


def train_kd(
    cfg: TrainConfig,
    teacher,
    corpus,
    kd: KdConfig = KdConfig(),
    spec: DetectorSpec = DetectorSpec(),
    out_dir=None,
    check_teacher: bool = True,
    on_epoch=None,
) -> TrainResult:
    """Distil a frozen teacher (network or checkpoint path) into a fresh student."""
    if cfg.model != "student":
        raise ValueError("distillation trains a student")
    _set_determinism(cfg)
    if isinstance(teacher, (str, Path)):
        teacher, _ = load_checkpoint(teacher)
    teacher.eval()
    for p in teacher.parameters():
        p.requires_grad_(False)
    images, boxes = _split(corpus, "train")
    val = list(zip(*_split(corpus, "val")))
    net = build_network(cfg, spec)
    if check_teacher:
        t_map = evaluate(val, predictor_for(teacher)).map
        s_map = evaluate(val, predictor_for(net)).map
        if not t_map > s_map:
            raise ValueError(f"teacher val mAP {t_map:.3f} does not beat the untrained student ({s_map:.3f})")
        torch.manual_seed(cfg.seed)
        net = build_network(cfg, spec)
    distiller = Distiller(net.fpn_channels, teacher.fpn_channels, len(spec.strides), kd)
    data = _prepare(images, boxes, spec, cfg.hflip, kd=True)
    return _fit(cfg, net, data, val, Path(out_dir) if out_dir else None, teacher, distiller, on_epoch)


ABLATION_COLUMNS = ["cls_loss", "reg_loss", "mu", "map", "ap_healthy", "ap_sick", "precision", "recall", "f1", "best_epoch", "error"]


def _row(cls_kind, reg_kind, mu, result: Optional[TrainResult], error: str = "") -> dict:
    row = dict.fromkeys(ABLATION_COLUMNS, "")
    row.update(cls_loss=cls_kind, reg_loss=reg_kind, mu=mu if cls_kind == "WCE" else "", error=error)
    if result is not None:
        r = result.best_report
        row.update(
            map=r.map,
            ap_healthy=r.classes[0].ap,
            ap_sick=r.classes[1].ap,
            precision=r.precision,
            recall=r.recall,
            f1=r.f1,
            best_epoch=result.best_epoch,
        )
    return row


def _write_csv(rows: list[dict], path: Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=ABLATION_COLUMNS)
        w.writeheader()
        w.writerows(rows)


def run_ablation_grid(
    corpus,
    base: TrainConfig = TrainConfig(),
    spec: DetectorSpec = DetectorSpec(),
    out_dir=None,
    cls_kinds: Sequence[str] = CLS_KINDS,
    reg_kinds: Sequence[str] = REG_KINDS,
    mus: Sequence[float] = MU_SWEEP,
    progress: Optional[Callable[[dict], None]] = None,
) -> tuple[list[dict], list[dict]]:
    """Loss-function grid plus a WCE threshold sweep, each cell with the shared
    seed and budget.  A failing cell is recorded and the grid continues."""
    out_dir = Path(out_dir) if out_dir else None

    def cell(**kw) -> dict:
        try:
            cfg = replace(base, **kw)
            row = _row(cfg.cls_kind, cfg.reg_kind, cfg.mu, train(cfg, corpus, spec))
        except Exception as e:  # recorded per cell, the grid continues
            row = _row(kw["cls_kind"], kw["reg_kind"], kw.get("mu", base.mu), None, f"{type(e).__name__}: {e}")
        if progress:
            progress(row)
        return row

    grid = [cell(cls_kind=c, reg_kind=r) for c in cls_kinds for r in reg_kinds]
    sweep = [cell(cls_kind="WCE", reg_kind="CIoU", mu=m) for m in mus]
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        _write_csv(grid, out_dir / "ablation_grid.csv")
        _write_csv(sweep, out_dir / "mu_sweep.csv")
    return grid, sweep
