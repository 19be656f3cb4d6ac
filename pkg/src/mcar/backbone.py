"""Small convolutional backbone with a shared 1x1 classifier head.

Each block is ``conv3x3(pad 1) -> ReLU -> maxpool 2x2`` (evaluated as pool then
ReLU, which is the same function). The final activation
map is pooled globally and fed to the linear classifier ``x = W^T f + b``.
Gradients are derived by hand; there is no autodiff graph.
"""
from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .tensor import (
    PoolingStrategy,
    col2im_cf,
    im2col_cf,
    kernel_from_matrix,
    kernel_matrix,
    maxpool2x2,
    maxpool2x2_backward,
    sigmoid,
    spatial_pool,
    spatial_pool_backward,
)

GradientSet = Dict[str, np.ndarray]

CHECKPOINT_MAGIC = b"MCAR"
CHECKPOINT_VERSION = 1


class StaleCacheError(RuntimeError):
    """Backward was asked to use a forward cache that no longer matches the parameters."""


class CheckpointError(ValueError):
    """Raised for unreadable or mismatched checkpoint files."""


@dataclass(frozen=True)
class BackboneConfig:
    input_size: int = 64
    channels: Tuple[int, ...] = (16, 32, 64)

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        if not self.channels:
            raise ValueError("backbone needs at least one block")
        if any(c < 1 for c in self.channels):
            raise ValueError("block channel counts must be >= 1")
        div = 2 ** len(self.channels)
        if self.input_size % div:
            raise ValueError(f"input_size {self.input_size} is not divisible by 2^{len(self.channels)}")
        if self.input_size // div < 4:
            raise ValueError(
                f"final feature size {self.input_size // div} < 4; use fewer blocks or a larger input"
            )

    @property
    def feature_size(self) -> int:
        return self.input_size // 2 ** len(self.channels)

    @property
    def feature_channels(self) -> int:
        return self.channels[-1]


@dataclass
class ModelParams:
    """All trainable tensors, stored once and shared by both streams.

    ``tensors`` maps names (``conv{i}.kernel``, ``conv{i}.bias``,
    ``classifier.W``, ``classifier.b``) to arrays. ``version`` increases on
    every in-place update so stale forward caches can be detected.
    """

    config: BackboneConfig
    num_classes: int
    pooling: PoolingStrategy
    tensors: Dict[str, np.ndarray]
    version: int = 0

    def __post_init__(self):
        W = self.tensors["classifier.W"]
        if W.shape != (self.config.feature_channels, self.num_classes):
            raise ValueError(
                f"classifier.W shape {W.shape} != ({self.config.feature_channels}, {self.num_classes})"
            )

    @property
    def conv_layers(self) -> List[Tuple[np.ndarray, np.ndarray]]:
        return [
            (self.tensors[f"conv{i}.kernel"], self.tensors[f"conv{i}.bias"])
            for i in range(len(self.config.channels))
        ]

    @property
    def W(self) -> np.ndarray:
        return self.tensors["classifier.W"]

    @property
    def b(self) -> np.ndarray:
        return self.tensors["classifier.b"]

    @property
    def dtype(self):
        return self.W.dtype

    def astype(self, dtype) -> "ModelParams":
        return ModelParams(
            self.config,
            self.num_classes,
            self.pooling,
            {k: v.astype(dtype) for k, v in self.tensors.items()},
        )

    def copy(self) -> "ModelParams":
        return self.astype(self.dtype)


def param_names(n_blocks: int) -> List[str]:
    names = []
    for i in range(n_blocks):
        names += [f"conv{i}.kernel", f"conv{i}.bias"]
    return names + ["classifier.W", "classifier.b"]


def init_params(
    config: BackboneConfig,
    num_classes: int,
    pooling: Optional[PoolingStrategy] = None,
    seed: int = 0,
    dtype=np.float32,
) -> ModelParams:
    """He-normal conv kernels, zero biases, small Gaussian classifier weights."""
    rng = np.random.default_rng(seed)
    tensors = {}
    c_in = 3
    for i, c_out in enumerate(config.channels):
        std = np.sqrt(2.0 / (c_in * 9))
        tensors[f"conv{i}.kernel"] = (rng.standard_normal((c_out, c_in, 3, 3)) * std).astype(dtype)
        tensors[f"conv{i}.bias"] = np.zeros(c_out, dtype=dtype)
        c_in = c_out
    tensors["classifier.W"] = (rng.standard_normal((c_in, num_classes)) / np.sqrt(c_in)).astype(dtype)
    tensors["classifier.b"] = np.zeros(num_classes, dtype=dtype)
    return ModelParams(config, num_classes, pooling or PoolingStrategy(), tensors)


@dataclass
class ForwardCache:
    """Intermediate tensors of one batched forward pass."""

    params_id: int
    params_version: int
    input_shape: Tuple[int, ...]
    cols: List[np.ndarray] = field(default_factory=list)
    relu_masks: List[np.ndarray] = field(default_factory=list)
    pool_idx: List[np.ndarray] = field(default_factory=list)
    pre_shapes: List[Tuple[int, ...]] = field(default_factory=list)
    activation: Optional[np.ndarray] = None
    pooled: Optional[np.ndarray] = None
    logits: Optional[np.ndarray] = None
    scores: Optional[np.ndarray] = None


def _as_batch(images: np.ndarray, config: BackboneConfig, dtype) -> Tuple[np.ndarray, bool]:
    single = images.ndim == 3
    x = images[None] if single else images
    if x.ndim != 4 or x.shape[1:] != (config.input_size, config.input_size, 3):
        raise ValueError(
            f"expected images of shape [{config.input_size},{config.input_size},3], got {images.shape}"
        )
    return x.astype(dtype, copy=False), single


def backbone_forward(images: np.ndarray, params: ModelParams, cache: Optional[ForwardCache] = None) -> np.ndarray:
    """Run the conv blocks and return the last activation map ``A``.

    ``images`` is ``[h,w,3]`` or ``[n,h,w,3]``; the result has matching
    batch-ness with shape ``[h', w', d']``.
    """
    x, single = _as_batch(images, params.config, params.dtype)
    # channels-first [c,n,h,w] internally: the conv matmul then emits this layout directly
    x = np.ascontiguousarray(x.transpose(3, 0, 1, 2))
    for kernel, bias in params.conv_layers:
        c_out = kernel.shape[0]
        _, n, h, w = x.shape
        cols = im2col_cf(x)
        pre = kernel_matrix(kernel) @ cols
        pre += bias[:, None]
        pre = pre.reshape(c_out, n, h, w)
        # max-pool and ReLU commute; pooling first keeps the ReLU at quarter size
        pooled, idx = maxpool2x2(pre, channels_first=True)
        mask = pooled > 0
        x = pooled * mask
        if cache is not None:
            cache.cols.append(cols)
            cache.relu_masks.append(mask)
            cache.pool_idx.append(idx)
            cache.pre_shapes.append((n, h, w, c_out))
    x = x.transpose(1, 2, 3, 0)
    if cache is not None:
        cache.activation = x
    return x[0] if single else x


def classify(activation: np.ndarray, params: ModelParams) -> Tuple[np.ndarray, np.ndarray]:
    """Pool the activation map, apply the linear head, and squash with a sigmoid."""
    if activation.shape[-1] != params.config.feature_channels:
        raise ValueError(
            f"activation has {activation.shape[-1]} channels, classifier expects {params.config.feature_channels}"
        )
    f = spatial_pool(activation, params.pooling)
    logits = f @ params.W + params.b
    return logits, sigmoid(logits)


def forward(images: np.ndarray, params: ModelParams, keep_cache: bool = True):
    """Batched forward through backbone and head.

    Returns ``(activation, logits, scores, cache)``; ``cache`` is ``None`` when
    ``keep_cache`` is false.
    """
    x = images[None] if images.ndim == 3 else images
    cache = ForwardCache(id(params), params.version, x.shape) if keep_cache else None
    a = backbone_forward(x, params, cache)
    f = spatial_pool(a, params.pooling)
    logits = f @ params.W + params.b
    scores = sigmoid(logits)
    if cache is not None:
        cache.pooled = f
        cache.logits = logits
        cache.scores = scores
    return a, logits, scores, cache


def backward(dlogits: np.ndarray, cache: Optional[ForwardCache], params: ModelParams) -> GradientSet:
    """Reverse-mode gradients of a scalar loss given ``dL/dlogits`` ``[n, C]``.

    The cache must come from :func:`forward` on the same, unmodified params.
    """
    if cache is None or cache.activation is None or cache.pooled is None:
        raise StaleCacheError("backward needs a cache filled by forward(keep_cache=True)")
    if cache.params_id != id(params) or cache.params_version != params.version:
        raise StaleCacheError("forward cache was built for a different or since-updated parameter set")
    if dlogits.shape != cache.logits.shape:
        raise ValueError(f"dlogits shape {dlogits.shape} != logits shape {cache.logits.shape}")
    dlogits = dlogits.astype(params.dtype, copy=False)
    grads: GradientSet = {}
    grads["classifier.W"] = cache.pooled.T @ dlogits
    grads["classifier.b"] = dlogits.sum(axis=0)
    df = dlogits @ params.W.T
    g = spatial_pool_backward(df, cache.activation, params.pooling).transpose(3, 0, 1, 2)
    n_blocks = len(params.config.channels)
    for i in reversed(range(n_blocks)):
        kernel = params.tensors[f"conv{i}.kernel"]
        c_out = kernel.shape[0]
        g = maxpool2x2_backward(g * cache.relu_masks[i], cache.pool_idx[i], channels_first=True)
        g2 = g.reshape(c_out, -1)
        grads[f"conv{i}.kernel"] = kernel_from_matrix(g2 @ cache.cols[i].T, kernel.shape)
        grads[f"conv{i}.bias"] = g2.sum(axis=1)
        if i > 0:
            dcols = kernel_matrix(kernel).T @ g2
            n, h, w, _ = cache.pre_shapes[i]
            g = col2im_cf(dcols, (kernel.shape[1], n, h, w))
    return {k: grads[k] for k in param_names(n_blocks)}


def add_grads(a: GradientSet, b: GradientSet) -> GradientSet:
    return {k: a[k] + b[k] for k in a}


def zero_grads(params: ModelParams) -> GradientSet:
    return {k: np.zeros_like(v) for k, v in params.tensors.items()}


class SGD:
    """SGD with momentum and L2 weight decay, updating params in place.

    ``v <- momentum * v + grad + weight_decay * param``; ``param <- param - lr * v``.
    """

    def __init__(self, momentum: float = 0.9, weight_decay: float = 1e-4):
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity: Dict[str, np.ndarray] = {}

    def step(self, params: ModelParams, grads: GradientSet, lr: float) -> ModelParams:
        if lr <= 0:
            raise ValueError("learning rate must be positive")
        for name, p in params.tensors.items():
            g = grads[name]
            if g.shape != p.shape:
                raise ValueError(f"gradient for {name} has shape {g.shape}, param has {p.shape}")
            v = self.velocity.get(name)
            d = g + self.weight_decay * p if self.weight_decay else g.copy()
            if v is None:
                v = d.astype(p.dtype)
            else:
                v *= self.momentum
                v += d
            self.velocity[name] = v
            p -= (lr * v).astype(p.dtype, copy=False)
        params.version += 1
        return params


def sgd_step(params, grads, lr, momentum=0.0, weight_decay=0.0, state=None):
    """Functional wrapper around :class:`SGD`; ``state`` is the velocity dict."""
    opt = SGD(momentum, weight_decay)
    if state is not None:
        opt.velocity = state
    return opt.step(params, grads, lr)


def step_lr(base_lr: float, epoch: int, drop_epochs: Sequence[int], factor: float = 0.1) -> float:
    """Learning rate for a 0-based ``epoch`` under a step schedule."""
    return base_lr * factor ** sum(1 for e in drop_epochs if epoch >= e)


def default_drop_epochs(epochs: int) -> List[int]:
    """Drops at 1/2 and 5/6 of training (the 30/50-of-60 pattern, rescaled)."""
    drops = sorted({round(epochs * 30 / 60), round(epochs * 50 / 60)})
    return [d for d in drops if 0 < d < epochs]


# --- checkpoint I/O ---------------------------------------------------------

def _header(params: ModelParams, extra: Optional[dict]) -> dict:
    manifest = []
    offset = 0
    for name in param_names(len(params.config.channels)):
        arr = params.tensors[name]
        manifest.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.size * 4
    return {
        "input_size": params.config.input_size,
        "channels": list(params.config.channels),
        "num_classes": params.num_classes,
        "pooling": {"kind": params.pooling.kind, "lambda": params.pooling.lam},
        "tensors": manifest,
        "extra": extra or {},
    }


def save_checkpoint(path, params: ModelParams, extra: Optional[dict] = None) -> None:
    """Write ``MCAR`` magic, u32 version, u32-length JSON manifest, then LE float32 blobs."""
    header = json.dumps(_header(params, extra), sort_keys=True).encode("utf-8")
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<II", CHECKPOINT_VERSION, len(header)))
    buf.write(header)
    for name in param_names(len(params.config.channels)):
        buf.write(np.ascontiguousarray(params.tensors[name], dtype="<f4").tobytes())
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_checkpoint(path) -> Tuple[ModelParams, dict]:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad magic {raw[:4]!r}")
    if len(raw) < 12:
        raise CheckpointError(f"{path}: truncated header")
    version, hlen = struct.unpack_from("<II", raw, 4)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    try:
        header = json.loads(raw[12:12 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: malformed manifest: {exc}") from None
    body = raw[12 + hlen:]
    config = BackboneConfig(header["input_size"], tuple(header["channels"]))
    pooling = PoolingStrategy(header["pooling"]["kind"], header["pooling"]["lambda"])
    tensors = {}
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape))
        start = entry["offset"]
        if start + 4 * count > len(body):
            raise CheckpointError(f"{path}: tensor {entry['name']} runs past end of file")
        tensors[entry["name"]] = np.frombuffer(body, dtype="<f4", count=count, offset=start).reshape(shape).astype(np.float32)
    expected = {}
    c_in = 3
    for i, c in enumerate(config.channels):
        expected[f"conv{i}.kernel"] = (c, c_in, 3, 3)
        expected[f"conv{i}.bias"] = (c,)
        c_in = c
    expected["classifier.W"] = (c_in, header["num_classes"])
    expected["classifier.b"] = (header["num_classes"],)
    diff = [
        f"{k}: expected {expected.get(k)}, found {tensors[k].shape if k in tensors else None}"
        for k in sorted(set(expected) | set(tensors))
        if expected.get(k) != (tensors[k].shape if k in tensors else None)
    ]
    if diff:
        raise CheckpointError(f"{path}: manifest does not match backbone config:\n  " + "\n  ".join(diff))
    return ModelParams(config, header["num_classes"], pooling, tensors), header.get("extra", {})
