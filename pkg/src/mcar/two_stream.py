"""Global/local two-stream training and inference over one shared network."""
from __future__ import annotations

import json
import logging
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from .backbone import (
    SGD,
    BackboneConfig,
    GradientSet,
    ModelParams,
    add_grads,
    backward,
    default_drop_epochs,
    forward,
    init_params,
    step_lr,
)
from .metrics import mean_average_precision
from .region import McarConfig, Region, localize
from .tensor import PoolingStrategy, bilinear_resize

log = logging.getLogger(__name__)

EPS = 1e-7
LOSS_MODES = ("pair", "single")


class TrainingDivergedError(RuntimeError):
    pass


# --- losses and aggregation -------------------------------------------------

def bce_loss(pred, target, eps: float = EPS) -> float:
    """Binary cross entropy summed over classes and averaged over images.

    Predictions are clamped to ``[eps, 1 - eps]`` before the log.
    """
    p = np.clip(np.asarray(pred, dtype=np.float64), eps, 1 - eps)
    y = np.asarray(target, dtype=np.float64)
    per = -(y * np.log(p) + (1 - y) * np.log(1 - p))
    if per.ndim == 1:
        return float(per.sum())
    return float(per.sum(axis=-1).mean())


def bce_grad(pred, target, eps: float = EPS) -> np.ndarray:
    """d bce_loss / d pred for a ``[n, C]`` batch; zero where the clamp is active."""
    p = np.asarray(pred, dtype=np.float64)
    y = np.asarray(target, dtype=np.float64)
    n = p.shape[0] if p.ndim == 2 else 1
    pc = np.clip(p, eps, 1 - eps)
    g = (-y / pc + (1 - y) / (1 - pc)) / n
    return np.where((p < eps) | (p > 1 - eps), 0.0, g)


def aggregate_local(region_scores: Sequence[np.ndarray], num_classes: Optional[int] = None) -> np.ndarray:
    """Category-wise max over region score vectors; all zeros for no regions."""
    if len(region_scores) == 0:
        if num_classes is None:
            raise ValueError("num_classes is required to aggregate an empty region list")
        return np.zeros(num_classes, dtype=np.float32)
    return np.max(np.stack(region_scores), axis=0)


@dataclass
class StreamOutputs:
    y_g: np.ndarray
    region_scores: List[np.ndarray]
    y_l: np.ndarray
    y_fused: np.ndarray


def total_loss(outputs: StreamOutputs, target, mode: str = "pair", weights: Tuple[float, float] = (1.0, 1.0)) -> float:
    """Pair: weighted global BCE plus local BCE. Single: BCE of the fused scores."""
    if mode == "pair":
        loss = weights[0] * bce_loss(outputs.y_g, target)
        if outputs.region_scores:
            loss += weights[1] * bce_loss(outputs.y_l, target)
        return loss
    if mode == "single":
        return bce_loss(outputs.y_fused, target)
    raise ValueError(f"unknown loss mode {mode!r}")


# --- two-stream forward -----------------------------------------------------

def crop_and_resize(image: np.ndarray, region: Region, size: int) -> np.ndarray:
    return bilinear_resize(region.crop(image), size, size)


def localize_batch(activation, y_g, params, cfg: McarConfig, rng=None) -> List[List[Region]]:
    size = params.config.input_size
    return [localize((size, size), activation[i], params, y_g[i], cfg, rng) for i in range(activation.shape[0])]


def forward_two_stream(image: np.ndarray, params: ModelParams, cfg: McarConfig, rng=None):
    """Global pass, localization, local passes on resized crops, max fusion.

    Returns ``(StreamOutputs, regions)`` for a single ``[h, w, 3]`` image.
    Each region is run as its own forward pass.
    """
    a, _, y_g, _ = forward(image, params, keep_cache=False)
    y_g = y_g[0]
    size = params.config.input_size
    regions = localize((size, size), a[0], params, y_g, cfg, rng)
    region_scores = [forward(crop_and_resize(image, r, size), params, keep_cache=False)[2][0] for r in regions]
    y_l = aggregate_local(region_scores, params.num_classes).astype(y_g.dtype)
    return StreamOutputs(y_g, region_scores, y_l, np.maximum(y_g, y_l)), regions


def predict(image: np.ndarray, params: ModelParams, cfg: McarConfig, rng=None):
    """``(y_fused, regions, y_g, y_l)`` for one image."""
    out, regions = forward_two_stream(image, params, cfg, rng)
    return out.y_fused, regions, out.y_g, out.y_l


def _run_locals(images, regions, params, keep_cache=True):
    size = params.config.input_size
    owner, crops = [], []
    for i, regs in enumerate(regions):
        for r in regs:
            owner.append(i)
            crops.append(crop_and_resize(images[i], r, size))
    if not crops:
        return None, None, None
    _, _, y_r, cache = forward(np.stack(crops), params, keep_cache)
    return np.asarray(owner), y_r, cache


def _local_max(owner, y_r, n, C, dtype):
    """Per-image max over region scores plus the winning region row per class."""
    y_l = np.zeros((n, C), dtype=dtype)
    arg = np.full((n, C), -1, dtype=np.int64)
    if owner is None:
        return y_l, arg
    for row in range(len(owner)):
        i = owner[row]
        better = (arg[i] < 0) | (y_r[row] > y_l[i])
        y_l[i] = np.where(better, y_r[row], y_l[i])
        arg[i] = np.where(better, row, arg[i])
    return y_l, arg


def loss_and_grads(
    images: np.ndarray,
    labels: np.ndarray,
    params: ModelParams,
    regions,
    mode: str = "pair",
    weights: Tuple[float, float] = (1.0, 1.0),
):
    """Two-stream loss and its gradient with detached regions.

    ``regions`` is a per-image list of regions, or a callable
    ``(activation, y_g) -> regions`` evaluated on this global pass.

    Returns ``(loss, loss_global, loss_local, grads)``; ``loss_local`` is the
    local BCE (pair mode) or ``nan`` when there are no regions.
    """
    n = images.shape[0]
    C = params.num_classes
    a, _, y_g, cache_g = forward(images, params)
    if callable(regions):
        regions = regions(a, y_g)
    owner, y_r, cache_l = _run_locals(images, regions, params)
    y_l, arg = _local_max(owner, y_r, n, C, y_g.dtype)
    has_local = owner is not None

    loss_g = bce_loss(y_g, labels)
    loss_l = bce_loss(y_l, labels) if has_local else float("nan")
    if mode == "pair":
        loss = weights[0] * loss_g + (weights[1] * loss_l if has_local else 0.0)
        dy_g = weights[0] * bce_grad(y_g, labels)
        dy_l = weights[1] * bce_grad(y_l, labels) if has_local else None
    elif mode == "single":
        fused = np.maximum(y_g, y_l)
        loss = bce_loss(fused, labels)
        d = bce_grad(fused, labels)
        to_global = y_g >= y_l
        dy_g = np.where(to_global, d, 0.0)
        dy_l = np.where(to_global, 0.0, d) if has_local else None
    else:
        raise ValueError(f"unknown loss mode {mode!r}")

    dlogits_g = dy_g * y_g * (1 - y_g)
    grads = backward(dlogits_g.astype(params.dtype), cache_g, params)
    if has_local:
        dy_r = np.zeros(y_r.shape, dtype=np.float64)
        rows, cols = np.nonzero(arg >= 0)
        np.add.at(dy_r, (arg[rows, cols], cols), dy_l[rows, cols])
        dlogits_r = dy_r * y_r * (1 - y_r)
        grads = add_grads(grads, backward(dlogits_r.astype(params.dtype), cache_l, params))
    return loss, loss_g, loss_l, grads


# --- training ---------------------------------------------------------------

@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 32
    lr: float = 0.02
    momentum: float = 0.9
    weight_decay: float = 1e-4
    lr_drop_epochs: Optional[List[int]] = None
    loss_mode: str = "pair"
    mcar: McarConfig = field(default_factory=McarConfig)
    pooling: PoolingStrategy = field(default_factory=PoolingStrategy)
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    stream_weights: Tuple[float, float] = (1.0, 1.0)
    flip: bool = True
    seed: int = 0
    # global-only epochs before the local stream joins (stand-in for a pretrained start)
    local_warmup_epochs: int = 3

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if self.loss_mode not in LOSS_MODES:
            raise ValueError(f"loss_mode must be one of {LOSS_MODES}")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.local_warmup_epochs < 0:
            raise ValueError("local_warmup_epochs must be >= 0")

    def drops(self) -> List[int]:
        return list(self.lr_drop_epochs) if self.lr_drop_epochs is not None else default_drop_epochs(self.epochs)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lr_drop_epochs"] = self.drops()
        d["backbone"]["channels"] = list(self.backbone.channels)
        return d


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    train_loss_global: float
    train_loss_local: float
    val_mAP: float
    wall_seconds: float

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=False)


def train(
    train_images: np.ndarray,
    train_labels: np.ndarray,
    config: TrainConfig,
    val_images: Optional[np.ndarray] = None,
    val_labels: Optional[np.ndarray] = None,
    on_epoch: Optional[Callable[[EpochRecord], None]] = None,
    params: Optional[ModelParams] = None,
) -> Tuple[ModelParams, List[EpochRecord]]:
    """Jointly train both streams with SGD; returns final params and history."""
    n = train_images.shape[0]
    if n == 0:
        raise ValueError("empty training set")
    if train_labels.ndim != 2 or train_labels.shape[0] != n:
        raise ValueError(f"labels shape {train_labels.shape} does not match {n} images")
    C = train_labels.shape[1]
    if val_labels is not None and val_labels.shape[1] != C:
        raise ValueError(f"validation labels have {val_labels.shape[1]} classes, training has {C}")
    if params is None:
        params = init_params(config.backbone, C, config.pooling, seed=config.seed)
    elif params.num_classes != C:
        raise ValueError(f"params classify {params.num_classes} classes, labels have {C}")
    rng = np.random.default_rng(config.seed)
    opt = SGD(config.momentum, config.weight_decay)
    drops = config.drops()
    history = []
    for epoch in range(config.epochs):
        t0 = time.perf_counter()
        lr = step_lr(config.lr, epoch, drops)
        order = rng.permutation(n)
        sum_g = sum_l = 0.0
        seen = seen_l = 0
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            x = train_images[idx]
            if config.flip:
                flip = rng.random(len(idx)) < 0.5
                x = np.where(flip[:, None, None, None], x[:, :, ::-1], x)
            y = train_labels[idx]
            if epoch < config.local_warmup_epochs:
                find = [[] for _ in idx]
            else:
                find = lambda a, y_g: localize_batch(a, y_g, params, config.mcar, rng)
            loss, lg, ll, grads = loss_and_grads(x, y, params, find, config.loss_mode, config.stream_weights)
            if not math.isfinite(loss):
                raise TrainingDivergedError(
                    f"non-finite loss {loss} at epoch {epoch} batch {start // config.batch_size}; lower --lr"
                )
            opt.step(params, grads, lr)
            sum_g += lg * len(idx)
            seen += len(idx)
            if math.isfinite(ll):
                sum_l += ll * len(idx)
                seen_l += len(idx)
        val_map = float("nan")
        if val_images is not None and len(val_images):
            scores = predict_batch(val_images, params, config.mcar, seed=config.seed)[0]
            val_map = mean_average_precision(scores, val_labels)[0]
        rec = EpochRecord(
            epoch + 1,
            lr,
            sum_g / seen,
            sum_l / seen_l if seen_l else float("nan"),
            val_map,
            time.perf_counter() - t0,
        )
        history.append(rec)
        log.info("epoch %d lr %.4g loss_g %.4f loss_l %.4f val_mAP %.4f (%.1fs)", rec.epoch, lr,
                 rec.train_loss_global, rec.train_loss_local, val_map, rec.wall_seconds)
        if on_epoch is not None:
            on_epoch(rec)
    return params, history


# --- batched inference ------------------------------------------------------

def _predict_chunk(images, params, cfg, rng):
    a, _, y_g, _ = forward(images, params, keep_cache=False)
    regions = localize_batch(a, y_g, params, cfg, rng)
    owner, y_r, _ = _run_locals(images, regions, params, keep_cache=False)
    y_l, _ = _local_max(owner, y_r, images.shape[0], params.num_classes, y_g.dtype)
    return np.maximum(y_g, y_l), y_g, y_l, regions


def worker_threads() -> int:
    try:
        return max(1, int(os.environ.get("MCAR_THREADS", "1")))
    except ValueError:
        return 1


def predict_batch(images: np.ndarray, params: ModelParams, cfg: McarConfig, seed: int = 0, chunk: int = 64):
    """Two-stream inference over many images.

    Returns ``(y_fused, y_g, y_l, regions)`` with one row (list entry) per
    image. Random selection draws from a per-chunk generator seeded by
    ``(seed, chunk index)``, so results do not depend on ``MCAR_THREADS``.
    """
    starts = list(range(0, images.shape[0], chunk))

    def run(k):
        s = starts[k]
        rng = np.random.default_rng([seed, k])
        return _predict_chunk(images[s:s + chunk], params, cfg, rng)

    threads = worker_threads()
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(run, range(len(starts))))
    else:
        parts = [run(k) for k in range(len(starts))]
    y_f = np.concatenate([p[0] for p in parts])
    y_g = np.concatenate([p[1] for p in parts])
    y_l = np.concatenate([p[2] for p in parts])
    regions = [r for p in parts for r in p[3]]
    return y_f, y_g, y_l, regions
