"""Fixed tiny instance for comparing analytic gradients with finite differences."""
import numpy as np

from mcar.backbone import BackboneConfig, backward, forward, init_params
from mcar.region import McarConfig
from mcar.tensor import PoolingStrategy
from mcar.two_stream import bce_grad, localize_batch, loss_and_grads
from oracles import FrozenReference, bilinear_loops, central_differences, max_relative_error


def _crop_oracle(image, r, size):
    patch = image[r.y_lo:r.y_hi + 1, r.x_lo:r.x_hi + 1]
    return np.stack([bilinear_loops(patch[:, :, ch], size, size) for ch in range(patch.shape[2])], axis=-1)


def instance(seed=0, n=2, C=3, size=16, channels=(4, 6), top_n=2, pooling=None):
    rng = np.random.default_rng(seed)
    pooling = pooling or PoolingStrategy("gwp", 0.5)
    params = init_params(BackboneConfig(size, channels), C, pooling, seed=seed, dtype=np.float64)
    images = rng.random((n, size, size, 3))
    labels = (rng.random((n, C)) < 0.5).astype(np.float64)
    labels[:, 0] = 1
    regions = None
    if top_n:
        a, _, y_g, _ = forward(images, params, keep_cache=False)
        regions = localize_batch(a, y_g, params, McarConfig(top_n=top_n, min_region_px=4))
    return params, images, labels, regions


def compare(params, images, labels, regions, mode="pair", eps=1e-3):
    """Analytic vs frozen-pattern central differences; returns ``{name: max rel error}``."""
    if regions is None:
        _, _, y_g, cache = forward(images, params)
        dlogits = bce_grad(y_g, labels) * y_g * (1 - y_g)
        grads = backward(dlogits, cache, params)
        ref = FrozenReference(images, None, None, labels, len(params.config.channels), params.pooling)
    else:
        _, _, _, grads = loss_and_grads(images, labels, params, regions, mode)
        size = params.config.input_size
        owner, crops = [], []
        for i, regs in enumerate(regions):
            for r in regs:
                owner.append(i)
                crops.append(_crop_oracle(images[i], r, size))
        ref = FrozenReference(images, np.stack(crops), owner, labels, len(params.config.channels), params.pooling, mode)
    tensors = {k: v.copy() for k, v in params.tensors.items()}
    ref.record(tensors)
    numeric = central_differences(ref.loss, tensors, eps)
    return {k: max_relative_error(grads[k], numeric[k]) for k in grads}


def compare_unfrozen(params, images, labels, regions, mode="pair", eps=1e-6):
    """Central differences of the package's own loss with no pattern freezing."""
    _, _, _, grads = loss_and_grads(images, labels, params, regions, mode)
    tensors = params.tensors

    def fn(_):
        params.version += 1
        return loss_and_grads(images, labels, params, regions, mode)[0]

    numeric = central_differences(fn, tensors, eps)
    return {k: max_relative_error(grads[k], numeric[k]) for k in grads}
