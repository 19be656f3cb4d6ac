"""Deterministic synthetic multi-label images: coloured shapes on a noisy canvas.

Random stream
-------------
One ``Xoshiro256ss`` generator, state filled from ``splitmix64(seed)``, drives
all structural choices. Per image, in order:

1. object count ``k = randint(min_objects, max_objects)``
2. background level ``0.25 * random()``
3. per object: class ``randint(0, C-1)``, side ``randint(*scale_px)``, then
   placement draws ``x0, y0 = randint(0, canvas - side)`` repeated until the
   overlap rule accepts it, then brightness ``0.7 + 0.3 * random()``
4. a 64-bit noise key ``next_u64()``; pixel noise is Box-Muller over the
   counter hash ``splitmix64(key + (i + 1) * GOLDEN)`` for ``i = 0, 1, ...``

Directory layout (one per split)::

    meta            text: version, canvas, count, classes
    images/NNNNNN.ppm
    labels.tsv      image id <TAB> space-separated class ids
    boxes.tsv       image id <TAB> class x_lo y_lo x_hi y_hi   (one per object)
"""
from __future__ import annotations

import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .region import default_min_region_px

MASK64 = (1 << 64) - 1
GOLDEN = 0x9E3779B97F4A7C15
FORMAT_VERSION = 1

SHAPES = ("circle", "square", "triangle", "cross")
PALETTE = {
    "red": (0.95, 0.15, 0.15),
    "green": (0.15, 0.85, 0.2),
    "blue": (0.2, 0.35, 0.95),
    "yellow": (0.95, 0.9, 0.15),
    "magenta": (0.9, 0.2, 0.85),
    "cyan": (0.15, 0.9, 0.9),
    "orange": (1.0, 0.55, 0.1),
    "white": (0.95, 0.95, 0.95),
}
COLOR_ORDER = tuple(PALETTE)


class DatasetError(ValueError):
    """Base class for dataset loading failures."""


class DatasetFormatError(DatasetError):
    """Malformed meta file or image header."""


class TruncatedDataError(DatasetError):
    """Pixel data shorter than its header promises."""


class LabelMismatchError(DatasetError):
    """Labels disagree with the image count or class list."""


def splitmix64(state: int) -> Tuple[int, int]:
    """Advance a splitmix64 state; returns ``(new_state, output)``."""
    state = (state + GOLDEN) & MASK64
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return state, z ^ (z >> 31)


def _rotl(x: int, k: int) -> int:
    return ((x << k) | (x >> (64 - k))) & MASK64


class Xoshiro256ss:
    """xoshiro256** with state seeded from four splitmix64 outputs."""

    def __init__(self, seed: int):
        sm = seed & MASK64
        s = []
        for _ in range(4):
            sm, out = splitmix64(sm)
            s.append(out)
        self.s = s

    def next_u64(self) -> int:
        s = self.s
        result = (_rotl((s[1] * 5) & MASK64, 7) * 9) & MASK64
        t = (s[1] << 17) & MASK64
        s[2] ^= s[0]
        s[3] ^= s[1]
        s[1] ^= s[2]
        s[0] ^= s[3]
        s[2] ^= t
        s[3] = _rotl(s[3], 45)
        return result

    def random(self) -> float:
        """Uniform float in [0, 1) from the top 53 bits."""
        return (self.next_u64() >> 11) * (1.0 / (1 << 53))

    def randint(self, lo: int, hi: int) -> int:
        """Uniform integer in ``[lo, hi]`` (inclusive), by rejection."""
        span = hi - lo + 1
        if span <= 0:
            raise ValueError(f"empty range [{lo}, {hi}]")
        limit = (1 << 64) - ((1 << 64) % span)
        while True:
            x = self.next_u64()
            if x < limit:
                return lo + x % span


def hashed_normals(key: int, n: int) -> np.ndarray:
    """``n`` standard normals from the splitmix64 counter hash of ``key``."""
    m = n + (n & 1)
    with np.errstate(over="ignore"):
        z = np.uint64(key) + (np.arange(1, m + 1, dtype=np.uint64) * np.uint64(GOLDEN))
        z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
        z = z ^ (z >> np.uint64(31))
    u = ((z >> np.uint64(11)).astype(np.float64) + 0.5) * (1.0 / (1 << 53))
    u1, u2 = u[0::2], u[1::2]
    r = np.sqrt(-2.0 * np.log(u1))
    out = np.empty(m)
    out[0::2] = r * np.cos(2 * np.pi * u2)
    out[1::2] = r * np.sin(2 * np.pi * u2)
    return out[:n]


@dataclass(frozen=True)
class ClassDef:
    shape: str
    color: str

    @property
    def name(self) -> str:
        return f"{self.color}-{self.shape}"


def default_classes(n: int) -> List[ClassDef]:
    """Shapes cycle fastest, so classes sharing a colour differ by shape."""
    if not 1 <= n <= 16:
        raise ValueError(f"class count must be in [1, 16], got {n}")
    return [ClassDef(SHAPES[i % len(SHAPES)], COLOR_ORDER[i // len(SHAPES)]) for i in range(n)]


@dataclass
class SynthSpec:
    canvas: int = 64
    classes: List[ClassDef] = field(default_factory=lambda: default_classes(8))
    objects_per_image: Tuple[int, int] = (1, 4)
    scale_px: Tuple[int, int] = (8, 12)
    occlusion: bool = True
    noise_std: float = 0.14
    counts: Tuple[int, int] = (2000, 500)
    seed: int = 0
    # None: the localizer default for this canvas (8 px at 64 px)
    min_region_px: Optional[int] = None

    def validate(self) -> None:
        lo, hi = self.objects_per_image
        if not 1 <= lo <= hi:
            raise ValueError(f"objects_per_image must satisfy 1 <= min <= max, got {self.objects_per_image}")
        if not self.classes or len(self.classes) > 16:
            raise ValueError(f"class list must hold 1..16 entries, got {len(self.classes)}")
        smin, smax = self.scale_px
        min_px = self.min_region_px or default_min_region_px(self.canvas)
        if not min_px <= smin <= smax:
            raise ValueError(f"scale_px {self.scale_px} must satisfy min_region_px ({min_px}) <= min <= max")
        if smax > self.canvas:
            raise ValueError(f"object scale {smax} exceeds canvas {self.canvas}")
        if not self.occlusion and hi * smin * smin > self.canvas * self.canvas:
            raise ValueError(f"{hi} non-overlapping objects of side {smin} cannot fit a {self.canvas}px canvas")
        if self.noise_std < 0:
            raise ValueError("noise_std must be >= 0")
        for c in self.classes:
            if c.shape not in SHAPES or c.color not in PALETTE:
                raise ValueError(f"unknown class definition {c}")
        for n in self.counts:
            if n < 0:
                raise ValueError("split sizes must be >= 0")
            need = math.ceil(0.01 * n)
            if n and need * len(self.classes) > n * hi:
                raise ValueError(
                    f"{n} images with at most {hi} objects cannot cover {len(self.classes)} classes"
                )


@dataclass
class Sample:
    image: np.ndarray  # [h, w, 3] float32 in [0, 1], quantised to 8 bits
    labels: np.ndarray  # [C] uint8
    gt_boxes: List[Tuple[int, Tuple[int, int, int, int]]]  # (class, (x_lo, y_lo, x_hi, y_hi))


def shape_mask(shape: str, side: int) -> np.ndarray:
    """Boolean ``side x side`` mask of a shape filling its bounding box."""
    c = (np.arange(side) + 0.5) / side - 0.5  # pixel centres in [-0.5, 0.5)
    yy, xx = np.meshgrid(c, c, indexing="ij")
    if shape == "circle":
        return xx ** 2 + yy ** 2 <= 0.25
    if shape == "square":
        return np.ones((side, side), dtype=bool)
    if shape == "triangle":
        return np.abs(xx) <= (yy + 0.5) / 2
    if shape == "cross":
        arm = 1.0 / 6
        return (np.abs(xx) <= arm) | (np.abs(yy) <= arm)
    raise ValueError(f"unknown shape {shape!r}")


def _overlap_ok(box, boxes, occlusion: bool) -> bool:
    x0, y0, x1, y1 = box
    area = (x1 - x0 + 1) * (y1 - y0 + 1)
    for bx0, by0, bx1, by1 in boxes:
        iw = min(x1, bx1) - max(x0, bx0) + 1
        ih = min(y1, by1) - max(y0, by0) + 1
        if iw <= 0 or ih <= 0:
            continue
        if not occlusion:
            return False
        inter = iw * ih
        other = (bx1 - bx0 + 1) * (by1 - by0 + 1)
        # partial occlusion only: neither object may lose more than half its box
        if inter > 0.5 * area or inter > 0.5 * other:
            return False
    return True


def _sample_image(rng: Xoshiro256ss, spec: SynthSpec, force: Sequence[int] = ()) -> Sample:
    C = len(spec.classes)
    canvas = spec.canvas
    for _ in range(1000):
        k = max(rng.randint(*spec.objects_per_image), len(force))
        bg = 0.25 * rng.random()
        objects = []
        boxes = []
        ok = True
        for j in range(k):
            cls = rng.randint(0, C - 1)
            if j < len(force):
                cls = force[j]
            side = rng.randint(*spec.scale_px)
            for _ in range(200):
                x0 = rng.randint(0, canvas - side)
                y0 = rng.randint(0, canvas - side)
                box = (x0, y0, x0 + side - 1, y0 + side - 1)
                if _overlap_ok(box, boxes, spec.occlusion):
                    break
            else:
                ok = False
                break
            bright = 0.7 + 0.3 * rng.random()
            boxes.append(box)
            objects.append((cls, side, box, bright))
        key = rng.next_u64()
        if ok:
            break
    else:
        raise RuntimeError("could not place objects; spec is too crowded")

    img = np.full((canvas, canvas, 3), bg, dtype=np.float64)
    labels = np.zeros(C, dtype=np.uint8)
    gt = []
    for cls, side, (x0, y0, x1, y1), bright in objects:
        cdef = spec.classes[cls]
        mask = shape_mask(cdef.shape, side)
        color = np.asarray(PALETTE[cdef.color]) * bright
        patch = img[y0:y1 + 1, x0:x1 + 1]
        patch[mask] = color
        labels[cls] = 1
        gt.append((cls, (x0, y0, x1, y1)))
    if spec.noise_std > 0:
        img += spec.noise_std * hashed_normals(key, img.size).reshape(img.shape)
    pixels = np.round(np.clip(img, 0.0, 1.0) * 255).astype(np.uint8)
    return Sample(pixels.astype(np.float32) / 255.0, labels, gt)


def _fix_coverage(rng: Xoshiro256ss, spec: SynthSpec, samples: List[Sample]) -> None:
    n = len(samples)
    if n == 0:
        return
    need = math.ceil(0.01 * n)
    C = len(spec.classes)
    for _ in range(10 * n * C):
        counts = np.sum([s.labels for s in samples], axis=0)
        short = [c for c in range(C) if counts[c] < need]
        if not short:
            return
        cls = short[0]
        # resample the image that strands the fewest classes; stranded ones are redrawn with it
        best = None
        for i in range(n - 1, -1, -1):
            present = np.flatnonzero(samples[i].labels)
            critical = [int(c) for c in present if counts[c] <= need]
            if cls in present or len(critical) + 1 > spec.objects_per_image[1]:
                continue
            if best is None or len(critical) < len(best[1]):
                best = (i, critical)
                if not critical:
                    break
        if best is None:
            break
        samples[best[0]] = _sample_image(rng, spec, force=[cls] + best[1])
    raise RuntimeError("could not reach 1% per-class coverage")


def generate_split(spec: SynthSpec, rng: Xoshiro256ss, n: int) -> List[Sample]:
    samples = [_sample_image(rng, spec) for _ in range(n)]
    _fix_coverage(rng, spec, samples)
    return samples


def generate_samples(spec: SynthSpec) -> Tuple[List[Sample], List[Sample]]:
    """In-memory train and val splits, drawn from one stream (train first)."""
    spec.validate()
    rng = Xoshiro256ss(spec.seed)
    train = generate_split(spec, rng, spec.counts[0])
    val = generate_split(spec, rng, spec.counts[1])
    return train, val


# --- file I/O ---------------------------------------------------------------

def write_ppm(path, image: np.ndarray) -> None:
    """Binary P6, 8-bit. Accepts float in [0, 1] or uint8."""
    if image.dtype != np.uint8:
        image = np.round(np.clip(image, 0.0, 1.0) * 255).astype(np.uint8)
    h, w = image.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(image).tobytes())


def _ppm_tokens(raw: bytes, count: int):
    tokens = []
    pos = 0
    while len(tokens) < count:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise DatasetFormatError("PPM header ended early")
        tokens.append(raw[start:pos])
    return tokens, pos + 1


def read_ppm(path) -> np.ndarray:
    """Read a binary P6 file into a float32 ``[h, w, 3]`` array in [0, 1]."""
    raw = Path(path).read_bytes()
    if raw[:2] != b"P6":
        raise DatasetFormatError(f"{path}: not a binary PPM (magic {raw[:2]!r})")
    tokens, pos = _ppm_tokens(raw, 4)
    try:
        w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    except ValueError:
        raise DatasetFormatError(f"{path}: malformed PPM header") from None
    if maxval != 255:
        raise DatasetFormatError(f"{path}: only 8-bit PPM is supported (maxval {maxval})")
    data = raw[pos:]
    if len(data) < w * h * 3:
        raise TruncatedDataError(f"{path}: expected {w * h * 3} pixel bytes, found {len(data)}")
    arr = np.frombuffer(data, dtype=np.uint8, count=w * h * 3).reshape(h, w, 3)
    return arr.astype(np.float32) / 255.0


def write_split(path, spec: SynthSpec, samples: Sequence[Sample]) -> None:
    path = Path(path)
    (path / "images").mkdir(parents=True, exist_ok=True)
    meta = [
        f"version {FORMAT_VERSION}",
        f"canvas {spec.canvas}",
        f"count {len(samples)}",
        "classes " + " ".join(c.name for c in spec.classes),
    ]
    (path / "meta").write_text("\n".join(meta) + "\n")
    label_lines, box_lines = [], []
    for i, s in enumerate(samples):
        write_ppm(path / "images" / f"{i:06d}.ppm", s.image)
        label_lines.append(f"{i:06d}\t" + " ".join(str(c) for c in np.flatnonzero(s.labels)))
        for cls, (x0, y0, x1, y1) in s.gt_boxes:
            box_lines.append(f"{i:06d}\t{cls} {x0} {y0} {x1} {y1}")
    (path / "labels.tsv").write_text("".join(line + "\n" for line in label_lines))
    (path / "boxes.tsv").write_text("".join(line + "\n" for line in box_lines))


def generate(spec: SynthSpec, out) -> Path:
    """Write ``out/train`` and ``out/val`` split directories."""
    train, val = generate_samples(spec)
    out = Path(out)
    write_split(out / "train", spec, train)
    write_split(out / "val", spec, val)
    return out


@dataclass
class SplitMeta:
    version: int
    canvas: int
    count: int
    classes: List[str]


def read_meta(path) -> SplitMeta:
    meta_path = Path(path) / "meta"
    if not meta_path.is_file():
        raise DatasetFormatError(f"{path}: missing meta file")
    fields = {}
    for line in meta_path.read_text().splitlines():
        if line.strip():
            key, _, value = line.partition(" ")
            fields[key] = value
    try:
        meta = SplitMeta(int(fields["version"]), int(fields["canvas"]), int(fields["count"]), fields["classes"].split())
    except (KeyError, ValueError) as exc:
        raise DatasetFormatError(f"{meta_path}: malformed meta ({exc})") from None
    if meta.version != FORMAT_VERSION:
        raise DatasetFormatError(f"{meta_path}: unsupported version {meta.version}")
    return meta


def load(path) -> List[Sample]:
    """Load one split directory written by :func:`generate`."""
    path = Path(path)
    meta = read_meta(path)
    C = len(meta.classes)
    label_lines = [l for l in (path / "labels.tsv").read_text().splitlines() if l.strip()] if (path / "labels.tsv").exists() else []
    if len(label_lines) != meta.count:
        raise LabelMismatchError(f"{path}: meta lists {meta.count} images but labels.tsv has {len(label_lines)} rows")
    boxes = {}
    if (path / "boxes.tsv").exists():
        for line in (path / "boxes.tsv").read_text().splitlines():
            if line.strip():
                img_id, rest = line.split("\t")
                c, x0, y0, x1, y1 = (int(v) for v in rest.split())
                boxes.setdefault(img_id, []).append((c, (x0, y0, x1, y1)))
    samples = []
    for i, line in enumerate(label_lines):
        img_id, _, ids = line.partition("\t")
        if img_id != f"{i:06d}":
            raise LabelMismatchError(f"{path}: label row {i} has id {img_id!r}")
        labels = np.zeros(C, dtype=np.uint8)
        for tok in ids.split():
            c = int(tok)
            if not 0 <= c < C:
                raise LabelMismatchError(f"{path}: class id {c} outside [0, {C}) for image {img_id}")
            labels[c] = 1
        image = read_ppm(path / "images" / f"{img_id}.ppm")
        if image.shape != (meta.canvas, meta.canvas, 3):
            raise DatasetFormatError(f"{path}: image {img_id} has shape {image.shape}, canvas is {meta.canvas}")
        samples.append(Sample(image, labels, boxes.get(img_id, [])))
    return samples


def stack(samples: Sequence[Sample]) -> Tuple[np.ndarray, np.ndarray]:
    """Samples to ``(images [n,h,w,3] float32, labels [n,C] float32)``."""
    images = np.stack([s.image for s in samples]).astype(np.float32)
    labels = np.stack([s.labels for s in samples]).astype(np.float32)
    return images, labels


def resolve_split(path, prefer: str = "val") -> Path:
    """Accept a split directory or a dataset root holding ``train/`` and ``val/``."""
    path = Path(path)
    if (path / "meta").is_file():
        return path
    if (path / prefer / "meta").is_file():
        return path / prefer
    raise DatasetFormatError(f"{path}: neither a split directory nor a dataset root with {prefer}/")


def expected_distinct_labels(num_classes: int, objects: Tuple[int, int]) -> float:
    """Mean number of distinct classes when the object count is uniform and classes are i.i.d. uniform."""
    lo, hi = objects
    q = 1 - 1 / num_classes
    return sum(num_classes * (1 - q ** k) for k in range(lo, hi + 1)) / (hi - lo + 1)
