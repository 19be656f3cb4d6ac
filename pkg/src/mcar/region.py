"""Class attention maps and attentional region localization.

For each selected class the attention map is squashed by a sigmoid, upsampled
to the image size, reduced to per-axis max marginals, min-max normalised and
thresholded. One interval is kept per axis, giving one box per class.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .backbone import ModelParams
from .tensor import bilinear_resize, sigmoid

SELECTIONS = ("top", "bottom", "random")


@dataclass(frozen=True)
class McarConfig:
    top_n: int = 4
    tau: float = 0.5
    selection: str = "top"
    # None: 8 px at a 64 px input, scaled with the input size
    min_region_px: Optional[int] = None

    def __post_init__(self):
        if self.top_n < 0:
            raise ValueError("top_n must be >= 0")
        if not 0.0 < self.tau < 1.0:
            raise ValueError(f"tau must lie strictly inside (0, 1), got {self.tau}")
        if self.selection not in SELECTIONS:
            raise ValueError(f"selection must be one of {SELECTIONS}, got {self.selection!r}")
        if self.min_region_px is not None and self.min_region_px < 1:
            raise ValueError("min_region_px must be >= 1")


def default_min_region_px(input_size: int) -> int:
    """8 px at a 64 px input, scaled proportionally."""
    return max(1, round(8 * input_size / 64))


@dataclass(frozen=True)
class Region:
    """Class-tagged box with inclusive pixel bounds in input coordinates."""

    class_id: int
    x_lo: int
    x_hi: int
    y_lo: int
    y_hi: int
    global_score: float

    @property
    def width(self) -> int:
        return self.x_hi - self.x_lo + 1

    @property
    def height(self) -> int:
        return self.y_hi - self.y_lo + 1

    def crop(self, image: np.ndarray) -> np.ndarray:
        return image[self.y_lo:self.y_hi + 1, self.x_lo:self.x_hi + 1]

    def to_record(self) -> str:
        return f"{self.class_id}\t{self.x_lo}\t{self.y_lo}\t{self.x_hi}\t{self.y_hi}\t{self.global_score:.6f}"

    @classmethod
    def from_record(cls, line: str) -> "Region":
        c, x0, y0, x1, y1, s = line.split("\t")
        return cls(int(c), int(x0), int(x1), int(y0), int(y1), float(s))


@dataclass
class ClassAttentionStack:
    maps: np.ndarray  # [h', w', C]
    source_size: Tuple[int, int]

    @property
    def num_classes(self) -> int:
        return self.maps.shape[-1]


def class_attention_maps(activation: np.ndarray, params: ModelParams, source_size: Optional[Tuple[int, int]] = None) -> ClassAttentionStack:
    """Apply the shared 1x1 classifier at every location of ``A`` ``[h',w',d']``."""
    if activation.ndim != 3:
        raise ValueError(f"expected a single [h',w',d'] activation map, got {activation.shape}")
    if activation.shape[-1] != params.W.shape[0]:
        raise ValueError(f"activation has {activation.shape[-1]} channels, W expects {params.W.shape[0]}")
    maps = activation @ params.W + params.b
    if source_size is None:
        source_size = (params.config.input_size, params.config.input_size)
    return ClassAttentionStack(maps, source_size)


def select_maps(scores: Sequence[float], cfg: McarConfig, rng: Optional[np.random.Generator] = None) -> List[int]:
    """Pick which class maps to localize; ties go to the lower class index."""
    scores = np.asarray(scores)
    n = min(cfg.top_n, scores.shape[0])
    if n == 0:
        return []
    if cfg.selection == "top":
        order = np.lexsort((np.arange(len(scores)), -scores))
    elif cfg.selection == "bottom":
        order = np.lexsort((np.arange(len(scores)), scores))
    else:
        if rng is None:
            raise ValueError("random selection needs an explicit rng")
        order = rng.choice(len(scores), size=n, replace=False)
    return [int(i) for i in order[:n]]


def normalize_and_upsample(stack: ClassAttentionStack, class_id: int) -> np.ndarray:
    """Sigmoid at feature resolution, then bilinear resize to the image size."""
    if not 0 <= class_id < stack.num_classes:
        raise ValueError(f"class_id {class_id} outside [0, {stack.num_classes})")
    m = sigmoid(stack.maps[:, :, class_id])
    h, w = stack.source_size
    return bilinear_resize(m[:, :, None], h, w)[:, :, 0]


def marginals(attn: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Column maxima ``p_x`` (length w) and row maxima ``p_y`` (length h)."""
    return attn.max(axis=0), attn.max(axis=1)


def minmax_normalize(p: np.ndarray) -> np.ndarray:
    """Rescale to [0, 1]; a constant vector maps to all ones."""
    p = np.asarray(p, dtype=np.float64)
    lo, hi = p.min(), p.max()
    if hi == lo:
        return np.ones_like(p)
    return (p - lo) / (hi - lo)


def threshold_runs(p: np.ndarray, tau: float) -> List[Tuple[int, int]]:
    """Maximal runs ``(lo, hi)`` (inclusive) of consecutive indices with ``p >= tau``."""
    above = np.concatenate(([False], np.asarray(p) >= tau, [False]))
    edges = np.flatnonzero(above[1:] != above[:-1])
    return [(int(a), int(b) - 1) for a, b in zip(edges[::2], edges[1::2])]


def solve_interval(p: np.ndarray, tau: float) -> Tuple[int, int]:
    """Choose one interval of ``{i : p[i] >= tau}``.

    A single run is returned as is. With several runs, only those containing
    an index where ``p`` attains its maximum qualify; among those the widest
    wins, and the leftmost breaks width ties.
    """
    p = np.asarray(p)
    runs = threshold_runs(p, tau)
    if not runs:
        raise ValueError("no entry reaches tau; marginal must be min-max normalised")
    if len(runs) == 1:
        return runs[0]
    peak = p.max()
    best = None
    for lo, hi in runs:
        if p[lo:hi + 1].max() == peak and (best is None or hi - lo > best[1] - best[0]):
            best = (lo, hi)
    return best


def expand_interval(lo: int, hi: int, min_len: int, size: int) -> Tuple[int, int]:
    """Grow ``[lo, hi]`` symmetrically to ``min_len`` and clamp into ``[0, size)``."""
    min_len = min(min_len, size)
    width = hi - lo + 1
    if width >= min_len:
        return lo, hi
    need = min_len - width
    lo -= need // 2
    hi += need - need // 2
    if lo < 0:
        hi -= lo
        lo = 0
    if hi > size - 1:
        lo -= hi - (size - 1)
        hi = size - 1
    return max(lo, 0), hi


def localize_class(stack: ClassAttentionStack, class_id: int, tau: float, min_region_px: int, score: float = 0.0) -> Region:
    attn = normalize_and_upsample(stack, class_id)
    px, py = marginals(attn)
    h, w = attn.shape
    x_lo, x_hi = expand_interval(*solve_interval(minmax_normalize(px), tau), min_region_px, w)
    y_lo, y_hi = expand_interval(*solve_interval(minmax_normalize(py), tau), min_region_px, h)
    return Region(class_id, x_lo, x_hi, y_lo, y_hi, float(score))


def localize(
    image_size: Tuple[int, int],
    activation: np.ndarray,
    params: ModelParams,
    global_scores: Sequence[float],
    cfg: McarConfig,
    rng: Optional[np.random.Generator] = None,
) -> List[Region]:
    """One region per selected class, in selection order."""
    selected = select_maps(global_scores, cfg, rng)
    if not selected:
        return []
    stack = class_attention_maps(activation, params, tuple(image_size))
    min_px = cfg.min_region_px or default_min_region_px(min(image_size))
    return [localize_class(stack, c, cfg.tau, min_px, global_scores[c]) for c in selected]
