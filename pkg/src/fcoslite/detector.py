"""FCOS-Lite student, FCOS-style teacher, and parameter/FLOP accounting.

Both networks share one contract: ``forward(images)`` returns a
:class:`DetectorOutput` whose three levels (strides 8/16/32) carry 2-channel
classification logits and 4-channel positive ``(l, t, r, b)`` distances, and
``features(images)`` returns the neck outputs used for distillation.
"""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import NamedTuple, Optional, Sequence

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

NUM_CLASSES = 2
PRIOR_PROB = 0.01

# (expansion t, out channels c, repeats n, first stride s)
MBV2_SETTINGS = [
    (1, 16, 1, 1),
    (6, 24, 2, 2),
    (6, 32, 3, 2),
    (6, 64, 4, 2),
    (6, 96, 3, 1),
    (6, 160, 3, 2),
    (6, 320, 1, 1),
]
DESK_SETTINGS = [
    (1, 8, 1, 1),
    (4, 16, 2, 2),
    (4, 24, 2, 2),
    (4, 40, 2, 2),
    (4, 48, 1, 1),
    (4, 80, 2, 2),
]
RESNET_DEPTHS = {34: ("basic", (3, 4, 6, 3)), 50: ("bottleneck", (3, 4, 6, 3)), 101: ("bottleneck", (3, 4, 23, 3))}


@dataclass(frozen=True)
class DetectorSpec:
    profile: str = "desk"
    input_size: tuple[int, int] = (128, 128)
    in_channels: int = 3
    fpn_channels: int = 32
    strides: tuple[int, ...] = (8, 16, 32)
    num_classes: int = NUM_CLASSES
    # regression size ranges separating the levels: (0, 64], (64, 128], (128, inf)
    level_bounds: tuple[float, ...] = (64.0, 128.0)
    # 1x1 conv to this many channels on top of the last student stage (0 = none)
    student_last_channels: int = 0
    teacher_fpn_channels: int = 64
    teacher_widths: tuple[int, ...] = (32, 64, 96, 128)
    teacher_blocks: tuple[int, ...] = (2, 2, 2, 2)
    # centre sampling radius in strides; 0 keeps every point inside a box
    center_radius: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "input_size", tuple(self.input_size))
        object.__setattr__(self, "strides", tuple(self.strides))
        object.__setattr__(self, "level_bounds", tuple(self.level_bounds))
        object.__setattr__(self, "teacher_widths", tuple(self.teacher_widths))
        object.__setattr__(self, "teacher_blocks", tuple(self.teacher_blocks))
        if self.profile not in ("desk", "paper"):
            raise ValueError(f"unknown profile {self.profile!r}")
        if self.strides != (8, 16, 32):
            raise ValueError("FCOS-Lite uses exactly three levels at strides 8/16/32")
        if len(self.level_bounds) != len(self.strides) - 1 or list(self.level_bounds) != sorted(self.level_bounds):
            raise ValueError("level_bounds must be increasing with one entry fewer than strides")
        h, w = self.input_size
        if h % 32 or w % 32:
            raise ValueError(f"input size {self.input_size} must be divisible by 32")
        if self.num_classes != NUM_CLASSES:
            raise ValueError("the classification head has exactly two channels")
        if self.center_radius < 0:
            raise ValueError("center_radius must be >= 0")
        if self.fpn_channels <= 0 or self.in_channels <= 0:
            raise ValueError("channel counts must be positive")

    @classmethod
    def paper(cls) -> "DetectorSpec":
        return cls(
            profile="paper",
            input_size=(320, 320),
            fpn_channels=288,
            student_last_channels=1280,
            teacher_fpn_channels=256,
        )

    def level_shapes(self) -> list[tuple[int, int]]:
        h, w = self.input_size
        return [(h // s, w // s) for s in self.strides]

    def size_ranges(self) -> list[tuple[float, float]]:
        edges = (0.0,) + self.level_bounds + (float("inf"),)
        return list(zip(edges[:-1], edges[1:]))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "DetectorSpec":
        return cls(**d)


class DetectorOutput(NamedTuple):
    cls_logits: list[torch.Tensor]  # per level (B, 2, H, W)
    reg: list[torch.Tensor]  # per level (B, 4, H, W), strictly positive pixel distances


# building blocks -------------------------------------------------------------

def conv_bn_act(cin, cout, k=3, stride=1, groups=1, act=nn.ReLU6):
    layers = [nn.Conv2d(cin, cout, k, stride, k // 2, groups=groups, bias=False), nn.BatchNorm2d(cout)]
    if act is not None:
        layers.append(act(inplace=True))
    return nn.Sequential(*layers)


class InvertedResidual(nn.Module):
    def __init__(self, cin, cout, stride, expand):
        super().__init__()
        hidden = cin * expand
        layers = []
        if expand != 1:
            layers.append(conv_bn_act(cin, hidden, 1))
        layers += [conv_bn_act(hidden, hidden, 3, stride, groups=hidden), conv_bn_act(hidden, cout, 1, act=None)]
        self.block = nn.Sequential(*layers)
        self.use_res = stride == 1 and cin == cout

    def forward(self, x):
        out = self.block(x)
        return x + out if self.use_res else out


class MobileBackbone(nn.Module):
    """Inverted-residual backbone tapped at strides 8, 16 and 32."""

    def __init__(self, settings, stem=32, in_channels=3, last_channels=0):
        super().__init__()
        self.stem = conv_bn_act(in_channels, stem, 3, 2)
        blocks, cin, stride = [], stem, 2
        taps = {}
        for t, c, n, s in settings:
            for i in range(n):
                blocks.append(InvertedResidual(cin, c, s if i == 0 else 1, t))
                cin = c
            stride *= s
            # the deepest block at each stride is the tap
            taps[stride] = (len(blocks) - 1, c)
        self.blocks = nn.ModuleList(blocks)
        self.tap_index = [taps[s][0] for s in (8, 16, 32)]
        self.out_channels = [taps[s][1] for s in (8, 16, 32)]
        self.last = None
        if last_channels:
            self.last = conv_bn_act(cin, last_channels, 1)
            self.out_channels[-1] = last_channels

    def forward(self, x):
        x = self.stem(x)
        outs = []
        for i, blk in enumerate(self.blocks):
            x = blk(x)
            if i in self.tap_index:
                outs.append(x)
        if self.last is not None:
            outs[-1] = self.last(outs[-1])
        return outs


class BasicBlock(nn.Module):
    expansion = 1

    def __init__(self, cin, width, stride):
        super().__init__()
        cout = width * self.expansion
        self.conv1 = conv_bn_act(cin, width, 3, stride, act=nn.ReLU)
        self.conv2 = conv_bn_act(width, cout, 3, act=None)
        self.down = None if stride == 1 and cin == cout else conv_bn_act(cin, cout, 1, stride, act=None)

    def forward(self, x):
        idt = x if self.down is None else self.down(x)
        return F.relu(self.conv2(self.conv1(x)) + idt)


class Bottleneck(nn.Module):
    expansion = 4

    def __init__(self, cin, width, stride):
        super().__init__()
        cout = width * self.expansion
        self.conv1 = conv_bn_act(cin, width, 1, act=nn.ReLU)
        self.conv2 = conv_bn_act(width, width, 3, stride, act=nn.ReLU)
        self.conv3 = conv_bn_act(width, cout, 1, act=None)
        self.down = None if stride == 1 and cin == cout else conv_bn_act(cin, cout, 1, stride, act=None)

    def forward(self, x):
        idt = x if self.down is None else self.down(x)
        return F.relu(self.conv3(self.conv2(self.conv1(x))) + idt)


class ResidualBackbone(nn.Module):
    """ResNet-style backbone (stem stride 4) tapped after stages 2-4."""

    def __init__(self, block, widths, blocks, stem=64, in_channels=3):
        super().__init__()
        self.stem = nn.Sequential(conv_bn_act(in_channels, stem, 7, 2, act=nn.ReLU), nn.MaxPool2d(3, 2, 1))
        stages, cin = [], stem
        for i, (w, n) in enumerate(zip(widths, blocks)):
            layers = []
            for j in range(n):
                layers.append(block(cin, w, 2 if (j == 0 and i > 0) else 1))
                cin = w * block.expansion
            stages.append(nn.Sequential(*layers))
        self.stages = nn.ModuleList(stages)
        self.out_channels = [w * block.expansion for w in widths[1:]]

    def forward(self, x):
        x = self.stem(x)
        outs = []
        for i, st in enumerate(self.stages):
            x = st(x)
            if i >= 1:
                outs.append(x)
        return outs


class Neck(nn.Module):
    """1x1 lateral convolutions joined by nearest-neighbour top-down addition."""

    def __init__(self, in_channels: Sequence[int], out_channels: int, top_down: bool = True, smooth: bool = False):
        super().__init__()
        self.lateral = nn.ModuleList(nn.Conv2d(c, out_channels, 1) for c in in_channels)
        # 3x3 output convolutions of the original FPN (teacher only)
        self.smooth = (
            nn.ModuleList(nn.Conv2d(out_channels, out_channels, 3, padding=1) for _ in in_channels) if smooth else None
        )
        self.top_down = top_down

    def forward(self, feats):
        outs = [lat(f) for lat, f in zip(self.lateral, feats)]
        if self.top_down:
            for i in range(len(outs) - 2, -1, -1):
                outs[i] = outs[i] + F.interpolate(outs[i + 1], size=outs[i].shape[-2:], mode="nearest")
        if self.smooth is not None:
            outs = [conv(o) for conv, o in zip(self.smooth, outs)]
        return outs


class Dethead(nn.Sequential):
    """3x3 conv, batch norm, ReLU6, 1x1 conv, 3x3 conv.

    The student makes the first 3x3 depthwise, which keeps the head cheap on
    the stride-8 map.
    """

    def __init__(self, channels: int, out_channels: int, depthwise: bool = False):
        super().__init__(
            nn.Conv2d(channels, channels, 3, padding=1, groups=channels if depthwise else 1, bias=False),
            nn.BatchNorm2d(channels),
            nn.ReLU6(inplace=True),
            nn.Conv2d(channels, channels, 1),
            nn.Conv2d(channels, out_channels, 3, padding=1),
        )

    def forward_levels(self, feats: Sequence[torch.Tensor]) -> list[torch.Tensor]:
        """Apply the head to every level with one set of batch-norm statistics.

        Levels differ in activation scale by orders of magnitude.  Normalising
        each level with its own batch statistics while the running estimates
        average over all of them makes eval-mode outputs disagree with training,
        so the statistics are pooled over the concatenated levels instead.
        """
        conv, norm, act = self[0], self[1], self[2]
        ys = [conv(f) for f in feats]
        sizes = [y.shape[2] * y.shape[3] for y in ys]
        flat = act(norm(torch.cat([y.flatten(2) for y in ys], 2).unsqueeze(2))).squeeze(2)
        outs = []
        for y, part in zip(ys, flat.split(sizes, 2)):
            outs.append(self[4](self[3](part.reshape(y.shape))))
        return outs


class Scale(nn.Module):
    def __init__(self, init: float = 1.0):
        super().__init__()
        self.scale = nn.Parameter(torch.tensor(float(init)))

    def forward(self, x):
        return x * self.scale


class SharedHead(nn.Module):
    """Classification and regression Detheads shared by every pyramid level."""

    def __init__(self, channels: int, strides: Sequence[int], num_classes: int = NUM_CLASSES, depthwise: bool = False):
        super().__init__()
        self.cls_head = Dethead(channels, num_classes, depthwise)
        self.reg_head = Dethead(channels, 4, depthwise)
        self.scales = nn.ModuleList(Scale() for _ in strides)
        self.strides = tuple(strides)
        for m in self.modules():
            if isinstance(m, nn.Conv2d):
                nn.init.normal_(m.weight, std=0.01)
                if m.bias is not None:
                    nn.init.zeros_(m.bias)
        nn.init.constant_(self.cls_head[-1].bias, -float(np.log((1 - PRIOR_PROB) / PRIOR_PROB)))

    def forward(self, feats) -> DetectorOutput:
        cls_out = self.cls_head.forward_levels(feats)
        reg_out = []
        for r, scale, s in zip(self.reg_head.forward_levels(feats), self.scales, self.strides):
            # clamp keeps exp finite for wild early iterates
            reg_out.append(torch.exp(scale(r).clamp(max=10.0)) * s)
        return DetectorOutput(cls_out, reg_out)


class Detector(nn.Module):
    def __init__(
        self, spec: DetectorSpec, backbone: nn.Module, fpn_channels: int, kind: str, depth: Optional[int] = None, smooth=False
    ):
        super().__init__()
        self.spec = spec
        self.kind = kind
        self.depth = depth
        self.backbone = backbone
        self.neck = Neck(backbone.out_channels, fpn_channels, smooth=smooth)
        self.head = SharedHead(fpn_channels, spec.strides, spec.num_classes, depthwise=kind == "student")
        self.fpn_channels = fpn_channels

    def features(self, images: torch.Tensor) -> list[torch.Tensor]:
        return self.neck(self.backbone(images))

    def forward_with_features(self, images):
        feats = self.features(images)
        return self.head(feats), feats

    def forward(self, images: torch.Tensor) -> DetectorOutput:
        return self.head(self.features(images))


def build_student(spec: DetectorSpec) -> Detector:
    if spec.profile == "paper":
        backbone = MobileBackbone(MBV2_SETTINGS, 32, spec.in_channels, spec.student_last_channels)
    else:
        backbone = MobileBackbone(DESK_SETTINGS, 16, spec.in_channels, spec.student_last_channels)
    return Detector(spec, backbone, spec.fpn_channels, "student")


def build_teacher(depth: int, spec: DetectorSpec) -> Detector:
    if depth not in RESNET_DEPTHS:
        raise ValueError(f"unsupported teacher depth {depth}; expected one of {sorted(RESNET_DEPTHS)}")
    kind, blocks = RESNET_DEPTHS[depth]
    block = BasicBlock if kind == "basic" else Bottleneck
    if spec.profile == "paper":
        backbone = ResidualBackbone(block, (64, 128, 256, 512), blocks, 64, spec.in_channels)
    else:
        # desk stand-in: basic blocks at reduced width; depth only selects the block count
        scale = {34: 1, 50: 1, 101: 2}[depth]
        nblocks = tuple(min(b * scale, 4) for b in spec.teacher_blocks)
        backbone = ResidualBackbone(BasicBlock, spec.teacher_widths, nblocks, spec.teacher_widths[0], spec.in_channels)
    return Detector(spec, backbone, spec.teacher_fpn_channels, "teacher", depth, smooth=True)


# accounting -------------------------------------------------------------------

def count_params(network: nn.Module) -> int:
    return sum(p.numel() for p in network.parameters())


def count_flops(network: nn.Module, input_size: Sequence[int]) -> int:
    """Convolution + linear FLOPs, counted as 2 x multiply-accumulates.

    ``input_size`` is ``(C, H, W)``; one image is traced.
    """
    total = 0

    def conv_hook(m: nn.Conv2d, inp, out):
        nonlocal total
        k = m.kernel_size[0] * m.kernel_size[1] * (m.in_channels // m.groups)
        total += 2 * k * out.numel()

    def linear_hook(m: nn.Linear, inp, out):
        nonlocal total
        total += 2 * m.in_features * out.numel()

    hooks = []
    for m in network.modules():
        if isinstance(m, nn.Conv2d):
            hooks.append(m.register_forward_hook(conv_hook))
        elif isinstance(m, nn.Linear):
            hooks.append(m.register_forward_hook(linear_hook))
    was_training = network.training
    network.eval()
    try:
        with torch.no_grad():
            network(torch.zeros((1, *input_size)))
    finally:
        for h in hooks:
            h.remove()
        network.train(was_training)
    return total


# checkpoints ------------------------------------------------------------------

CHECKPOINT_MAGIC = b"FCLTCKPT"
CHECKPOINT_VERSION = 1


def save_checkpoint(network: Detector, path, extra: Optional[dict] = None) -> Path:
    """Write ``magic | version | header length | JSON header | raw tensor bytes``."""
    path = Path(path)
    state = network.state_dict()
    entries, blobs, offset = [], [], 0
    for name, t in state.items():
        arr = t.detach().cpu().contiguous().numpy()
        raw = arr.tobytes()
        entries.append({"name": name, "dtype": str(arr.dtype), "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = {
        "spec": network.spec.to_dict(),
        "kind": network.kind,
        "depth": network.depth,
        "tensors": entries,
        "extra": extra or {},
    }
    hb = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(hb)))
        fh.write(hb)
        for b in blobs:
            fh.write(b)
    return path


def load_checkpoint(path) -> tuple[Detector, dict]:
    data = Path(path).read_bytes()
    if data[:8] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path} is not a checkpoint file")
    version, hlen = struct.unpack("<II", data[8:16])
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    header = json.loads(data[16 : 16 + hlen])
    body = memoryview(data)[16 + hlen :]
    spec = DetectorSpec.from_dict(header["spec"])
    if header["kind"] == "teacher":
        net = build_teacher(header["depth"], spec)
    else:
        net = build_student(spec)
    state = {}
    for e in header["tensors"]:
        arr = np.frombuffer(body[e["offset"] : e["offset"] + e["nbytes"]], dtype=np.dtype(e["dtype"]))
        state[e["name"]] = torch.from_numpy(arr.copy().reshape(e["shape"]))
    net.load_state_dict(state)
    return net, header.get("extra", {})
