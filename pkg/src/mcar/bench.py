"""Per-stage inference timing: global pass, global-to-local, local pass."""
from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Dict, List, Sequence

import numpy as np

from .backbone import ModelParams, forward
from .region import McarConfig, localize
from .two_stream import aggregate_local, crop_and_resize, predict

STAGES = ("global", "g2l", "local")


@dataclass
class StageTiming:
    top_n: int
    global_ms: float
    g2l_ms: float
    local_ms: float
    total_ms: float

    @property
    def stage_sum_ms(self) -> float:
        return self.global_ms + self.g2l_ms + self.local_ms

    @property
    def gap(self) -> float:
        """Relative difference between the end-to-end time and the stage sum."""
        return abs(self.total_ms - self.stage_sum_ms) / self.total_ms if self.total_ms > 0 else 0.0

    def to_dict(self) -> dict:
        return {
            "topn": self.top_n,
            "global_ms": self.global_ms,
            "g2l_ms": self.g2l_ms,
            "local_ms": self.local_ms,
            "total_ms": self.total_ms,
            "stage_sum_ms": self.stage_sum_ms,
        }


def _staged(image, params: ModelParams, cfg: McarConfig, rng, clock=time.perf_counter):
    """The :func:`predict` pipeline with clock reads between stages."""
    size = params.config.input_size
    t0 = clock()
    a, _, y_g, _ = forward(image, params, keep_cache=False)
    t1 = clock()
    regions = localize((size, size), a[0], params, y_g[0], cfg, rng)
    crops = [crop_and_resize(image, r, size) for r in regions]
    t2 = clock()
    scores = [forward(c, params, keep_cache=False)[2][0] for c in crops]
    np.maximum(y_g[0], aggregate_local(scores, params.num_classes))
    t3 = clock()
    return t1 - t0, t2 - t1, t3 - t2


def time_stages(
    images: np.ndarray,
    params: ModelParams,
    top_n_list: Sequence[int],
    repeat: int = 3,
    tau: float = 0.5,
    selection: str = "top",
    seed: int = 0,
) -> List[StageTiming]:
    """Mean milliseconds per image per stage, for each ``top_n``.

    Every image is processed on its own, as at deployment. The total comes
    from an uninstrumented :func:`predict` call on the same image right after
    the staged one, so it can be checked against the stage sum. Each figure is the minimum over ``repeat`` passes
    of the per-image mean, which damps scheduler noise.
    """
    if repeat < 1:
        raise ValueError("repeat must be >= 1")
    if len(images) == 0:
        raise ValueError("no images to time")
    if len(top_n_list) == 0:
        raise ValueError("no topN values to time")
    results = []
    clock = time.perf_counter
    # untimed pass so the first configuration does not pay for cold caches
    warm = McarConfig(top_n=max(top_n_list), tau=tau, selection=selection)
    for image in images:
        predict(image, params, warm, np.random.default_rng(seed))
    for top_n in top_n_list:
        cfg = McarConfig(top_n=top_n, tau=tau, selection=selection)
        stages = np.full(3, np.inf)
        total = np.inf
        for _ in range(repeat):
            # staged and plain passes alternate per image so both see the same
            # machine state; their generators advance in lockstep
            rng_s = np.random.default_rng(seed)
            rng_p = np.random.default_rng(seed)
            acc = np.zeros(3)
            plain = 0.0
            for image in images:
                acc += _staged(image, params, cfg, rng_s, clock)
                t0 = clock()
                predict(image, params, cfg, rng_p)
                plain += clock() - t0
            stages = np.minimum(stages, acc * 1000.0 / len(images))
            total = min(total, plain * 1000.0 / len(images))
        results.append(StageTiming(top_n, *(float(v) for v in stages), float(total)))
    return results


def linear_fit(x: Sequence[float], y: Sequence[float]) -> Dict[str, float]:
    """Least-squares line ``y = slope * x + intercept`` and its R^2."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    slope, intercept = np.polyfit(x, y, 1)
    resid = y - (slope * x + intercept)
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 - float(np.sum(resid ** 2)) / ss_tot if ss_tot > 0 else 1.0
    return {"slope": float(slope), "intercept": float(intercept), "r2": r2}
