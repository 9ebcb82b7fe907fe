"""Procedural dense-prediction tasks.

Each class carries a signature (channel means plus a sinusoidal texture);
samples are a signature-noise background with a few signature-painted
rectangles and discs on top, later shapes occluding earlier ones. A
per-image global gain/offset jitter makes one fixed set of class
prototypes suboptimal, which is exactly the headroom image-conditioned
prompting needs to show up at desk scale. Everything is a pure function
of (spec, seed): per-sample RNG streams are derived, so generation could
fan out across samples without changing a single pixel.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from .matching import BoxAnnotation
from .tensor import Tensor, read_dct1, write_dct1

__all__ = [
    "ClassSignature",
    "TaskSpec",
    "SyntheticSample",
    "default_task",
    "generate",
    "split",
    "save_dataset",
    "load_dataset",
]


@dataclass
class ClassSignature:
    mean: tuple[float, float, float]
    freq: float
    angle: float
    amp: float


@dataclass
class TaskSpec:
    k: int = 8
    height: int = 32
    width: int = 32
    min_shapes: int = 2
    max_shapes: int = 4
    shape_min_px: int = 6
    shape_max_px: int = 16
    noise_sigma: float = 0.22
    jitter_gain: float = 0.35
    jitter_offset: float = 0.25
    seed: int = 7
    shape_kinds: list[str] = field(default_factory=lambda: ["rect", "disc"])
    signatures: list[ClassSignature] = field(default_factory=list)
    class_names: list[str] = field(default_factory=list)

    def __post_init__(self):
        if self.k < 2:
            raise ValueError("need at least two classes (background plus one)")
        if not self.class_names:
            self.class_names = ["background"] + [f"object_{i}" for i in range(1, self.k)]
        if len(self.class_names) != self.k:
            raise ValueError("class_names length must equal k")
        if not self.signatures:
            self.signatures = _default_signatures(self.k, self.seed)
        if len(self.signatures) != self.k:
            raise ValueError("signature table length must equal k")
        if self.shape_max_px > min(self.height, self.width):
            raise ValueError("shape_max_px exceeds the image size")
        if not (1 <= self.shape_min_px <= self.shape_max_px):
            raise ValueError("invalid shape size range")
        if not (1 <= self.min_shapes <= self.max_shapes):
            raise ValueError("invalid shapes-per-image range")

    def to_dict(self) -> dict:
        return asdict(self)

    @staticmethod
    def from_dict(d: dict) -> "TaskSpec":
        d = dict(d)
        if "signatures" in d:
            d["signatures"] = [ClassSignature(mean=tuple(s["mean"]), freq=s["freq"],
                                              angle=s["angle"], amp=s["amp"])
                               for s in d["signatures"]]
        return TaskSpec(**d)


def _default_signatures(k: int, seed: int) -> list[ClassSignature]:
    """Spread channel means across the color cube; up to 8 classes land on
    distinct inset corners, extras are drawn from the seeded stream."""
    corners = [
        (0.25, 0.25, 0.25), (0.75, 0.25, 0.25), (0.25, 0.75, 0.25), (0.25, 0.25, 0.75),
        (0.75, 0.75, 0.25), (0.75, 0.25, 0.75), (0.25, 0.75, 0.75), (0.75, 0.75, 0.75),
    ]
    rng = np.random.default_rng(np.random.SeedSequence([seed & 0xFFFFFFFF, 0x51674]))
    sigs = []
    for i in range(k):
        if i < len(corners):
            mean = corners[i]
        else:
            mean = tuple(rng.uniform(0.2, 0.8, size=3).tolist())
        sigs.append(
            ClassSignature(
                mean=mean,
                freq=1.0 + (i % 4),
                angle=np.pi * i / max(k, 1),
                amp=0.12,
            )
        )
    return sigs


def default_task() -> TaskSpec:
    """The calibrated desk-scale task used by the ablation experiments."""
    return TaskSpec()


@dataclass
class SyntheticSample:
    image: Tensor  # (H, W, 3)
    mask: np.ndarray  # (H*W,) int
    boxes: list[BoxAnnotation]


def _pattern(sig: ClassSignature, h: int, w: int) -> np.ndarray:
    ys, xs = np.mgrid[0:h, 0:w]
    phase = 2.0 * np.pi * sig.freq * (
        np.cos(sig.angle) * xs + np.sin(sig.angle) * ys
    ) / max(h, w)
    wave = sig.amp * np.sin(phase)
    return np.asarray(sig.mean)[None, None, :] + wave[:, :, None]


def _sample_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed & 0xFFFFFFFF, index]))


def _generate_one(spec: TaskSpec, rng: np.random.Generator) -> SyntheticSample:
    h, w = spec.height, spec.width
    canvas = _pattern(spec.signatures[0], h, w).copy()
    shape_ids = np.full((h, w), -1, dtype=np.intp)
    mask = np.zeros((h, w), dtype=np.intp)

    n_shapes = int(rng.integers(spec.min_shapes, spec.max_shapes + 1))
    shape_classes = []
    for j in range(n_shapes):
        cls = int(rng.integers(1, spec.k))
        shape_classes.append(cls)
        pat = _pattern(spec.signatures[cls], h, w)
        kind = spec.shape_kinds[int(rng.integers(0, len(spec.shape_kinds)))]
        if kind == "rect":
            sh = int(rng.integers(spec.shape_min_px, spec.shape_max_px + 1))
            sw = int(rng.integers(spec.shape_min_px, spec.shape_max_px + 1))
            r0 = int(rng.integers(0, h - sh + 1))
            c0 = int(rng.integers(0, w - sw + 1))
            region = np.zeros((h, w), dtype=bool)
            region[r0 : r0 + sh, c0 : c0 + sw] = True
        else:
            radius_lo = max(1, spec.shape_min_px // 2)
            radius_hi = max(radius_lo, min(spec.shape_max_px, min(h, w)) // 2)
            radius = int(rng.integers(radius_lo, radius_hi + 1))
            cr = int(rng.integers(radius, max(h - radius, radius + 1)))
            cc = int(rng.integers(radius, max(w - radius, radius + 1)))
            ys, xs = np.mgrid[0:h, 0:w]
            region = (ys - cr) ** 2 + (xs - cc) ** 2 <= radius**2
        canvas[region] = pat[region]
        shape_ids[region] = j
        mask[region] = cls

    noise = rng.normal(0.0, spec.noise_sigma, size=(h, w, 3))
    gain = 1.0 + rng.uniform(-spec.jitter_gain, spec.jitter_gain, size=3)
    offset = rng.uniform(-spec.jitter_offset, spec.jitter_offset, size=3)
    image = (canvas + noise) * gain[None, None, :] + offset[None, None, :]

    boxes = []
    for j, cls in enumerate(shape_classes):
        visible = shape_ids == j
        if not visible.any():
            continue  # fully occluded by a later shape
        rows = np.where(visible.any(axis=1))[0]
        cols = np.where(visible.any(axis=0))[0]
        boxes.append(
            BoxAnnotation(
                class_id=cls,
                x_min=cols[0] / w,
                y_min=rows[0] / h,
                x_max=(cols[-1] + 1) / w,
                y_max=(rows[-1] + 1) / h,
            )
        )
    return SyntheticSample(image=Tensor(image), mask=mask.reshape(-1), boxes=boxes)


def generate(spec: TaskSpec, n: int, seed: int | None = None) -> list[SyntheticSample]:
    """n samples, bitwise reproducible from (spec, seed)."""
    base = spec.seed if seed is None else seed
    return [_generate_one(spec, _sample_rng(base, i)) for i in range(n)]


def split(samples, train_fraction: float):
    """Deterministic positional split into (train, eval)."""
    if not (0.0 < train_fraction < 1.0):
        raise ValueError("train fraction must be in (0, 1)")
    cut = int(len(samples) * train_fraction)
    return list(samples[:cut]), list(samples[cut:])


# ---------------------------------------------------------------------------
# Dataset directory: spec.json, images.dct1, masks.dct1, boxes.json.


def save_dataset(spec: TaskSpec, samples, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "spec.json"), "w") as fh:
        json.dump(spec.to_dict(), fh, indent=1, sort_keys=True)
    images = np.stack([s.image.data for s in samples])
    masks = np.stack([s.mask.astype(np.float64) for s in samples])
    write_dct1(os.path.join(out_dir, "images.dct1"), images)
    write_dct1(os.path.join(out_dir, "masks.dct1"), masks)
    boxes = [
        [
            {
                "class_id": b.class_id,
                "box": [b.x_min, b.y_min, b.x_max, b.y_max],
            }
            for b in s.boxes
        ]
        for s in samples
    ]
    with open(os.path.join(out_dir, "boxes.json"), "w") as fh:
        json.dump(boxes, fh)


def load_dataset(data_dir):
    with open(os.path.join(data_dir, "spec.json")) as fh:
        spec = TaskSpec.from_dict(json.load(fh))
    images = read_dct1(os.path.join(data_dir, "images.dct1"))
    masks = read_dct1(os.path.join(data_dir, "masks.dct1"))
    with open(os.path.join(data_dir, "boxes.json")) as fh:
        all_boxes = json.load(fh)
    samples = []
    for i in range(images.shape[0]):
        boxes = [
            BoxAnnotation(class_id=int(e["class_id"]), x_min=e["box"][0],
                          y_min=e["box"][1], x_max=e["box"][2], y_max=e["box"][3])
            for e in all_boxes[i]
        ]
        samples.append(
            SyntheticSample(
                image=Tensor(images[i]),
                mask=masks[i].astype(np.intp),
                boxes=boxes,
            )
        )
    return spec, samples
