"""Simulated int8 post-training quantization and the deployment size audit.

Batch norm is folded into the preceding convolution first.  Weights are
quantized symmetrically per output channel; activations asymmetrically per
tensor at every convolution input and at the two head outputs.  Biases stay in
float in the simulation (int32 in a deployed model, with a scale fine enough
that the rounding is negligible) and are costed at 4 bytes in the audit.
"""
from __future__ import annotations

import copy
import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Optional, Sequence

import torch
from torch import nn
from torch.nn.utils.fusion import fuse_conv_bn_eval

from .targets import Detection, postprocess

QMIN, QMAX = -128, 127
SCALE_FLOOR = 1e-8
MIN_CALIBRATION_IMAGES = 16
BUDGET_BYTES = 5 * 2**20
QPARAM_BYTES = 5  # float32 scale + int8 zero point
BIAS_BYTES = 4
_SAMPLE_PER_BATCH = 4096


class MissingSpecError(KeyError):
    pass


@dataclass(frozen=True)
class QuantSpec:
    scale: tuple[float, ...]
    zero_point: tuple[int, ...]
    scheme: str  # "asymmetric-per-tensor" or "symmetric-per-channel"
    qmin: int = QMIN
    qmax: int = QMAX

    def __post_init__(self):
        if len(self.scale) != len(self.zero_point) or not self.scale:
            raise ValueError("scale and zero_point must be non-empty and aligned")
        if any(not s > 0 for s in self.scale):
            raise ValueError("scales must be positive")
        if any(not self.qmin <= z <= self.qmax for z in self.zero_point):
            raise ValueError("zero point outside the integer range")
        if self.scheme not in ("asymmetric-per-tensor", "symmetric-per-channel"):
            raise ValueError(f"unknown scheme {self.scheme!r}")

    @classmethod
    def per_tensor(cls, scale: float, zero_point: int = 0, qmin: int = QMIN, qmax: int = QMAX) -> "QuantSpec":
        return cls((float(scale),), (int(zero_point),), "asymmetric-per-tensor", qmin, qmax)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "QuantSpec":
        return cls(tuple(d["scale"]), tuple(d["zero_point"]), d["scheme"], d.get("qmin", QMIN), d.get("qmax", QMAX))


def quantize_dequantize(x: torch.Tensor, spec: QuantSpec) -> torch.Tensor:
    """``(clamp(round(x/s) + zp, qmin, qmax) - zp) * s`` with round-half-to-even.

    Per-channel specs apply along dim 0.
    """
    x = torch.as_tensor(x)
    scale = torch.tensor(spec.scale, dtype=x.dtype if x.is_floating_point() else torch.float64)
    zp = torch.tensor(spec.zero_point, dtype=scale.dtype)
    if len(spec.scale) > 1:
        if x.shape[0] != len(spec.scale):
            raise ValueError(f"per-channel spec has {len(spec.scale)} channels, tensor has {x.shape[0]}")
        shape = (-1,) + (1,) * (x.dim() - 1)
        scale, zp = scale.reshape(shape), zp.reshape(shape)
    q = torch.clamp(torch.round(x / scale) + zp, spec.qmin, spec.qmax)
    return (q - zp) * scale


def _int_range(bits: int) -> tuple[int, int]:
    if not 2 <= bits <= 32:
        raise ValueError("bits must lie in [2, 32]")
    return -(2 ** (bits - 1)), 2 ** (bits - 1) - 1


def activation_spec(lo: float, hi: float, bits: int = 8) -> QuantSpec:
    """Asymmetric spec covering ``[min(lo, 0), max(hi, 0)]``."""
    qmin, qmax = _int_range(bits)
    lo, hi = min(float(lo), 0.0), max(float(hi), 0.0)
    if hi - lo <= 0:
        return QuantSpec.per_tensor(SCALE_FLOOR, 0, qmin, qmax)
    scale = max((hi - lo) / (qmax - qmin), SCALE_FLOOR)
    zp = int(torch.round(torch.tensor(qmin - lo / scale, dtype=torch.float64)))
    return QuantSpec.per_tensor(scale, min(max(zp, qmin), qmax), qmin, qmax)


def weight_spec(w: torch.Tensor, bits: int = 8) -> QuantSpec:
    """Symmetric per-output-channel spec from the exact weight range."""
    qmin, qmax = _int_range(bits)
    amax = w.detach().reshape(w.shape[0], -1).abs().amax(dim=1).double()
    scale = torch.clamp(amax / qmax, min=SCALE_FLOOR)
    return QuantSpec(tuple(scale.tolist()), (0,) * w.shape[0], "symmetric-per-channel", qmin, qmax)


class Observer:
    """Running min/max, or a low/high percentile over a strided value sample."""

    def __init__(self, percentile: Optional[float] = None):
        if percentile is not None and not 50.0 < percentile <= 100.0:
            raise ValueError("percentile must lie in (50, 100]")
        self.percentile = percentile
        self.lo = float("inf")
        self.hi = float("-inf")
        self.samples: list[torch.Tensor] = []

    def update(self, x: torch.Tensor) -> None:
        x = x.detach().reshape(-1).double()
        if x.numel() == 0:
            return
        self.lo = min(self.lo, float(x.min()))
        self.hi = max(self.hi, float(x.max()))
        if self.percentile is not None:
            step = max(1, x.numel() // _SAMPLE_PER_BATCH)
            # always keep the extremes so a lone outlier is seen by the sample
            self.samples.append(torch.cat([x[::step], x.min()[None], x.max()[None]]))

    def range(self) -> tuple[float, float]:
        if self.lo == float("inf"):
            raise ValueError("observer saw no data")
        if self.percentile is None:
            return self.lo, self.hi
        v = torch.cat(self.samples)
        q = torch.tensor([1 - self.percentile / 100, self.percentile / 100], dtype=torch.float64)
        lo, hi = torch.quantile(v, q).tolist()
        return lo, hi

    def spec(self, bits: int = 8) -> QuantSpec:
        return activation_spec(*self.range(), bits=bits)


def fold_batchnorm(network: nn.Module) -> nn.Module:
    """Eval-mode copy with every Conv2d→BatchNorm2d pair fused into one conv."""
    net = copy.deepcopy(network).eval()
    for mod in net.modules():
        if not isinstance(mod, nn.Sequential):
            continue
        kids = list(mod._modules.items())
        for (k1, a), (k2, b) in zip(kids, kids[1:]):
            if isinstance(a, nn.Conv2d) and isinstance(b, nn.BatchNorm2d):
                mod._modules[k1] = fuse_conv_bn_eval(a, b)
                mod._modules[k2] = nn.Identity()
    for p in net.parameters():
        p.requires_grad_(False)
    return net


def _head_outputs(net: nn.Module) -> dict[str, nn.Module]:
    head = getattr(net, "head", None)
    if head is None:
        return {}
    return {"head.cls_head.out": head.cls_head[-1], "head.reg_head.out": head.reg_head[-1]}


def _convs(net: nn.Module) -> dict[str, nn.Conv2d]:
    return {name: m for name, m in net.named_modules() if isinstance(m, nn.Conv2d)}


def tensor_names(network: nn.Module) -> list[str]:
    """Names of every quantized tensor: per-conv weights and inputs, head outputs."""
    names = []
    for name in _convs(network):
        names += [f"{name}.weight", f"{name}.in"]
    return names + list(_head_outputs(network))


@torch.no_grad()
def calibrate(
    network: nn.Module,
    images: Sequence[torch.Tensor] | torch.Tensor,
    percentile: Optional[float] = None,
    batch_size: int = 16,
    bits: int = 8,
) -> dict[str, QuantSpec]:
    """Specs for every quantized tensor of the batch-norm-folded network."""
    if isinstance(images, torch.Tensor):
        images = list(images)
    images = list(images)
    if not images:
        raise ValueError("empty calibration set")
    if len(images) < MIN_CALIBRATION_IMAGES:
        raise ValueError(f"need at least {MIN_CALIBRATION_IMAGES} calibration images, got {len(images)}")
    net = fold_batchnorm(network)
    observers: dict[str, Observer] = {}
    hooks = []
    for name, conv in _convs(net).items():
        observers[f"{name}.in"] = obs = Observer(percentile)
        hooks.append(conv.register_forward_pre_hook(lambda m, inp, o=obs: o.update(inp[0])))
    for name, mod in _head_outputs(net).items():
        observers[name] = obs = Observer(percentile)
        hooks.append(mod.register_forward_hook(lambda m, inp, out, o=obs: o.update(out)))
    try:
        for k in range(0, len(images), batch_size):
            net(torch.stack(images[k : k + batch_size]))
    finally:
        for h in hooks:
            h.remove()
    specs = {name: obs.spec(bits) for name, obs in observers.items()}
    for name, conv in _convs(net).items():
        specs[f"{name}.weight"] = weight_spec(conv.weight, bits)
    return specs


def quantized_network(network: nn.Module, specs: dict[str, QuantSpec]) -> nn.Module:
    """Folded copy with fake-quantized weights and activation hooks installed."""
    net = fold_batchnorm(network)
    missing = [n for n in tensor_names(net) if n not in specs]
    if missing:
        raise MissingSpecError(f"no quantization spec for {missing[0]} ({len(missing)} missing)")
    for name, conv in _convs(net).items():
        conv.weight.copy_(quantize_dequantize(conv.weight, specs[f"{name}.weight"]))
        s = specs[f"{name}.in"]
        conv.register_forward_pre_hook(lambda m, inp, s=s: (quantize_dequantize(inp[0], s),))
    for name, mod in _head_outputs(net).items():
        s = specs[name]
        mod.register_forward_hook(lambda m, inp, out, s=s: quantize_dequantize(out, s))
    return net


@torch.no_grad()
def quantized_inference(network: nn.Module, specs: dict[str, QuantSpec], images: torch.Tensor, **kwargs) -> list[list[Detection]]:
    """Detections from the simulated int8 pipeline for a ``(B, 3, H, W)`` batch
    (a single ``(3, H, W)`` image yields a one-element list)."""
    qnet = quantized_network(network, specs)
    if images.dim() == 3:
        images = images[None]
    return postprocess(qnet(images), network.spec, **kwargs)


def quantized_predictor(network: nn.Module, specs: dict[str, QuantSpec]):
    """Reusable batched predictor (builds the quantized copy once)."""
    qnet = quantized_network(network, specs)

    @torch.no_grad()
    def run(images: torch.Tensor) -> list[list[Detection]]:
        return postprocess(qnet(images), network.spec)

    return run


def save_specs(specs: dict[str, QuantSpec], path) -> Path:
    path = Path(path)
    path.write_text(json.dumps({"schema": 1, "tensors": {k: v.to_dict() for k, v in sorted(specs.items())}}, indent=1))
    return path


def load_specs(path) -> dict[str, QuantSpec]:
    d = json.loads(Path(path).read_text())
    if d.get("schema") != 1:
        raise ValueError("unsupported quantspec schema")
    return {k: QuantSpec.from_dict(v) for k, v in d["tensors"].items()}


@dataclass(frozen=True)
class SizeAudit:
    param_bytes: int
    overhead_bytes: int
    total_bytes: int
    budget_bytes: int = BUDGET_BYTES
    weight_count: int = 0
    bias_count: int = 0
    float_count: int = 0
    quantized_tensors: int = 0
    manifest_bytes: int = 0

    @property
    def passed(self) -> bool:
        return self.total_bytes <= self.budget_bytes

    @property
    def total_mb(self) -> float:
        """Decimal megabytes (10^6 bytes)."""
        return self.total_bytes / 1e6

    def to_dict(self) -> dict:
        d = asdict(self)
        d.update(passed=self.passed, total_mb=self.total_mb)
        return d

    def summary_line(self) -> str:
        verdict = "PASS" if self.passed else "FAIL"
        return f"int8 size {self.total_mb:.3f} MB ({self.total_bytes} B) vs budget {self.budget_bytes} B: {verdict}"


def size_audit(network: nn.Module) -> SizeAudit:
    """Int8 deployment size of the batch-norm-folded network.

    Parameters: 1 byte per conv weight, 4 per bias, 4 per remaining float
    scalar.  Overhead: scale + zero point per weight channel and per activation
    tensor, plus the JSON tensor manifest.
    """
    net = fold_batchnorm(network)
    convs = _convs(net)
    weights = sum(c.weight.numel() for c in convs.values())
    biases = sum(c.out_channels for c in convs.values())
    conv_params = {id(p) for c in convs.values() for p in c.parameters()}
    floats = sum(p.numel() for p in net.parameters() if id(p) not in conv_params)
    channels = sum(c.out_channels for c in convs.values())
    activations = len(convs) + len(_head_outputs(net))
    manifest = {
        "tensors": tensor_names(net),
        "weight_channels": {n: c.out_channels for n, c in convs.items()},
    }
    manifest_bytes = len(json.dumps(manifest, sort_keys=True).encode())
    param_bytes = weights + BIAS_BYTES * biases + 4 * floats
    overhead = QPARAM_BYTES * (channels + activations) + manifest_bytes
    return SizeAudit(
        param_bytes=param_bytes,
        overhead_bytes=overhead,
        total_bytes=param_bytes + overhead,
        weight_count=weights,
        bias_count=biases,
        float_count=floats,
        quantized_tensors=len(convs) + activations,
        manifest_bytes=manifest_bytes,
    )
