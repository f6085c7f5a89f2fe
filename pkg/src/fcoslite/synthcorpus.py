"""Deterministic two-class synthetic detection corpus.

Class 0 ("healthy") is a plain filled ellipse.  Class 1 ("sick") is the same
kind of ellipse carrying a small contrasting marker near its centre.  Scenes
add background gradients, clutter (including marker-like dots off-object) and
Gaussian sensor noise.  Every scene draws from its own child seed, so a scene
depends only on ``(seed, split, index)``.
"""
from __future__ import annotations

import hashlib
import io
import json
import shutil
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterator, NamedTuple, Optional

import numpy as np
import torch
from PIL import Image, ImageDraw

from .geometry import Box

SPLITS = ("train", "val", "test")
MARGIN = 2
MANIFEST = "manifest.json"


class CorpusError(Exception):
    pass


class ChecksumError(CorpusError):
    pass


@dataclass(frozen=True)
class SceneSpec:
    seed: int = 0
    image_size: tuple[int, int] = (128, 128)  # (H, W)
    min_objects: int = 1
    max_objects: int = 4  # 4 keeps a 20-epoch desk student inside the target mAP band
    min_size: int = 14
    max_size: int = 72
    class1_fraction: float = 0.5
    clutter: int = 6  # clutter items per scene (upper bound)
    noise: float = 10.0  # Gaussian noise sigma in 0-255 units
    occlusion: float = 0.0  # probability that an object may overlap earlier ones
    marker_scale: float = 0.22  # marker radius as a fraction of the short semi-axis

    def __post_init__(self):
        h, w = self.image_size
        if not 1 <= self.min_objects <= self.max_objects <= 8:
            raise ValueError("objects per scene must satisfy 1 <= min <= max <= 8")
        if not 4 <= self.min_size <= self.max_size <= min(h, w) - 2 * MARGIN:
            raise ValueError("object size range must fit inside the image margins")
        if not 0.0 <= self.class1_fraction <= 1.0:
            raise ValueError("class1_fraction must lie in [0, 1]")
        if self.noise < 0 or self.clutter < 0 or not 0.0 <= self.occlusion <= 1.0:
            raise ValueError("noise, clutter must be >= 0 and occlusion in [0, 1]")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        d = dict(d)
        d["image_size"] = tuple(d["image_size"])
        return cls(**d)


class Scene(NamedTuple):
    image: np.ndarray  # (H, W, 3) uint8
    boxes: list[list[int]]
    classes: list[int]


class Sample(NamedTuple):
    image: torch.Tensor  # (3, H, W) float in [0, 1]
    boxes: list[Box]  # labelled
    file: str


def scene_rng(seed: int, split: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(split, index)))


def _iou(a, b) -> float:
    iw = max(0, min(a[2], b[2]) - max(a[0], b[0]))
    ih = max(0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = iw * ih
    return inter / ((a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter)


def _colour(rng, lo=40, hi=215) -> tuple[int, int, int]:
    base = int(rng.integers(lo, hi))
    tint = rng.integers(-25, 26, 3)
    return tuple(int(np.clip(base + t, 0, 255)) for t in tint)


def _contrasting(rng, c) -> tuple[int, int, int]:
    lum = sum(c) / 3
    v = int(rng.integers(0, 50)) if lum > 128 else int(rng.integers(205, 256))
    return (v, v, v)


def _place(rng, spec: SceneSpec, placed: list) -> Optional[list[int]]:
    h, w = spec.image_size
    for _ in range(50):
        bw = int(rng.integers(spec.min_size, spec.max_size + 1))
        bh = int(np.clip(bw * rng.uniform(0.6, 1.6), spec.min_size, spec.max_size))
        x1 = int(rng.integers(MARGIN, w - MARGIN - bw + 1))
        y1 = int(rng.integers(MARGIN, h - MARGIN - bh + 1))
        box = [x1, y1, x1 + bw, y1 + bh]
        limit = 0.35 if rng.random() < spec.occlusion else 0.0
        if all(_iou(box, p) <= limit for p in placed):
            return box
    return None


def render_scene(spec: SceneSpec, rng: np.random.Generator) -> Scene:
    h, w = spec.image_size
    bg0, bg1 = np.array(_colour(rng, 60, 200)), np.array(_colour(rng, 60, 200))
    t = np.linspace(0, 1, w if rng.random() < 0.5 else h)
    ramp = bg0[None] * (1 - t[:, None]) + bg1[None] * t[:, None]
    canvas = np.broadcast_to(ramp[None] if len(t) == w else ramp[:, None], (h, w, 3)).astype(np.uint8)
    img = Image.fromarray(np.ascontiguousarray(canvas), "RGB")
    draw = ImageDraw.Draw(img)

    for _ in range(int(rng.integers(0, spec.clutter + 1))):
        kind = rng.integers(0, 3)
        c = _colour(rng)
        x, y = int(rng.integers(0, w)), int(rng.integers(0, h))
        if kind == 0:  # line
            draw.line([x, y, int(rng.integers(0, w)), int(rng.integers(0, h))], fill=c, width=int(rng.integers(1, 3)))
        elif kind == 1:  # small rectangle
            s = int(rng.integers(3, 10))
            draw.rectangle([x, y, x + s, y + s], fill=c)
        else:  # marker-like dot
            r = int(rng.integers(2, 4))
            draw.ellipse([x - r, y - r, x + r, y + r], fill=c)

    n = int(rng.integers(spec.min_objects, spec.max_objects + 1))
    boxes, classes = [], []
    for _ in range(n):
        box = _place(rng, spec, boxes)
        if box is None:
            continue
        cls = int(rng.random() < spec.class1_fraction)
        body = _colour(rng)
        x1, y1, x2, y2 = box
        draw.ellipse([x1, y1, x2 - 1, y2 - 1], fill=body)
        if cls == 1:
            cx = (x1 + x2) / 2 + rng.uniform(-0.15, 0.15) * (x2 - x1)
            cy = (y1 + y2) / 2 + rng.uniform(-0.15, 0.15) * (y2 - y1)
            r = max(2.0, spec.marker_scale * min(x2 - x1, y2 - y1) / 2)
            draw.ellipse([cx - r, cy - r, cx + r, cy + r], fill=_contrasting(rng, body))
        boxes.append(box)
        classes.append(cls)
    if not boxes:  # the first placement into an empty scene cannot fail, kept for safety
        raise CorpusError("could not place any object")

    arr = np.asarray(img, dtype=np.float64)
    if spec.noise > 0:
        arr = arr + rng.normal(0.0, spec.noise, arr.shape)
    return Scene(np.clip(np.rint(arr), 0, 255).astype(np.uint8), boxes, classes)


def _png_bytes(arr: np.ndarray) -> bytes:
    buf = io.BytesIO()
    Image.fromarray(arr, "RGB").save(buf, format="PNG", optimize=False, compress_level=6)
    return buf.getvalue()


def _sha256(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def _render_job(args) -> tuple[bytes, list, list]:
    spec_dict, split_id, index = args
    spec = SceneSpec.from_dict(spec_dict)
    scene = render_scene(spec, scene_rng(spec.seed, split_id, index))
    return _png_bytes(scene.image), scene.boxes, scene.classes


def split_counts(n_total: int, val_fraction: float = 0.1) -> tuple[int, int]:
    """Train/val counts for the 9:1 convention."""
    n_val = max(1, int(round(n_total * val_fraction)))
    return n_total - n_val, n_val


def generate(spec: SceneSpec, n_train: int, n_val: int, n_test: int, out, force: bool = False, workers: int = 1) -> Path:
    """Render the three splits into ``out`` with a checksummed manifest."""
    counts = {"train": n_train, "val": n_val, "test": n_test}
    if any(c <= 0 for c in counts.values()):
        raise ValueError("split counts must be positive")
    out = Path(out)
    if out.exists() and any(out.iterdir()):
        if not force:
            raise FileExistsError(f"{out} exists and is not empty (use force to overwrite)")
        shutil.rmtree(out)
    out.mkdir(parents=True, exist_ok=True)
    checksums = {}
    class_counts = {"0": 0, "1": 0}
    pool = ProcessPoolExecutor(workers) if workers > 1 else None
    try:
        for split_id, split in enumerate(SPLITS):
            (out / split).mkdir()
            jobs = [(spec.to_dict(), split_id, i) for i in range(counts[split])]
            results = pool.map(_render_job, jobs, chunksize=16) if pool else map(_render_job, jobs)
            lines = []
            for i, (png, boxes, classes) in enumerate(results):
                rel = f"{split}/{i:06d}.png"
                (out / rel).write_bytes(png)
                checksums[rel] = _sha256(png)
                lines.append(json.dumps({"file": rel, "boxes": boxes, "classes": classes}))
                for c in classes:
                    class_counts[str(c)] += 1
            ann = f"{split}.jsonl"
            data = ("\n".join(lines) + "\n").encode()
            (out / ann).write_bytes(data)
            checksums[ann] = _sha256(data)
    finally:
        if pool:
            pool.shutdown()
    manifest = {
        "schema": 1,
        "seed": spec.seed,
        "scene_spec": spec.to_dict(),
        "counts": counts,
        "objects": class_counts,
        "splits": {s: f"{s}.jsonl" for s in SPLITS},
        "checksums": checksums,
    }
    (out / MANIFEST).write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return out


class Corpus:
    """Read-only view of one split; iteration follows annotation order and
    verifies every image against the manifest checksum."""

    def __init__(self, root, split: str = "train"):
        self.root = Path(root)
        if split not in SPLITS:
            raise ValueError(f"unknown split {split!r}")
        try:
            self.manifest = json.loads((self.root / MANIFEST).read_text())
        except FileNotFoundError:
            raise CorpusError(f"no manifest in {self.root}") from None
        self.split = split
        ann = self.manifest["splits"][split]
        data = self._read(ann)
        self.records = [json.loads(line) for line in data.decode().splitlines() if line.strip()]
        if len(self.records) != self.manifest["counts"][split]:
            raise CorpusError(f"{ann}: {len(self.records)} records, manifest says {self.manifest['counts'][split]}")
        self.spec = SceneSpec.from_dict(self.manifest["scene_spec"])

    def _read(self, rel: str) -> bytes:
        path = self.root / rel
        try:
            data = path.read_bytes()
        except FileNotFoundError:
            raise CorpusError(f"missing file {rel}") from None
        expected = self.manifest["checksums"].get(rel)
        if expected is None:
            raise CorpusError(f"{rel} is not in the manifest")
        if _sha256(data) != expected:
            raise ChecksumError(f"checksum mismatch for {rel}")
        return data

    def __len__(self) -> int:
        return len(self.records)

    def _sample(self, rec: dict) -> Sample:
        for key in ("file", "boxes", "classes"):
            if key not in rec:
                raise CorpusError(f"annotation record missing {key!r}: {rec}")
        if len(rec["boxes"]) != len(rec["classes"]):
            raise CorpusError(f"{rec['file']}: boxes and classes differ in length")
        img = Image.open(io.BytesIO(self._read(rec["file"])))
        arr = np.asarray(img.convert("RGB"), dtype=np.float32) / 255.0
        boxes = [Box(*map(float, b), label=int(c)) for b, c in zip(rec["boxes"], rec["classes"])]
        return Sample(torch.from_numpy(arr).permute(2, 0, 1).contiguous(), boxes, rec["file"])

    def __getitem__(self, i: int) -> Sample:
        return self._sample(self.records[i])

    def __iter__(self) -> Iterator[Sample]:
        for rec in self.records:
            yield self._sample(rec)

    def pairs(self) -> Iterator[tuple[torch.Tensor, list[Box]]]:
        for s in self:
            yield s.image, s.boxes

    def tensors(self) -> tuple[torch.Tensor, list[list[Box]]]:
        """Whole split as one ``(N, 3, H, W)`` tensor plus labelled boxes."""
        samples = list(self)
        return torch.stack([s.image for s in samples]), [s.boxes for s in samples]


def load(path, split: str = "train") -> Corpus:
    return Corpus(path, split)
