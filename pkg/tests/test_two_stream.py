import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import gradcheck
from mcar.backbone import BackboneConfig, forward, init_params, load_checkpoint, save_checkpoint
from mcar.region import McarConfig, Region
from mcar.tensor import PoolingStrategy
from mcar.two_stream import (
    StreamOutputs,
    TrainConfig,
    aggregate_local,
    bce_loss,
    crop_and_resize,
    forward_two_stream,
    predict,
    predict_batch,
    total_loss,
    train,
)


def tiny_params(seed=0, size=16, C=3):
    return init_params(BackboneConfig(size, (4, 6)), C, PoolingStrategy("gwp", 0.5), seed=seed)


def outputs(y_g, y_l):
    y_g, y_l = np.asarray(y_g, float), np.asarray(y_l, float)
    return StreamOutputs(y_g, [y_l], y_l, np.maximum(y_g, y_l))


# --- loss and aggregation ---------------------------------------------------

def test_bce_hand_values():
    assert bce_loss([0.5], [1]) == pytest.approx(math.log(2), abs=1e-12)
    assert bce_loss([0.8, 0.3], [1, 0]) == pytest.approx(-(math.log(0.8) + math.log(0.7)), abs=1e-12)
    assert bce_loss([0.8, 0.3], [1, 0]) == pytest.approx(0.5798, abs=5e-5)
    assert bce_loss([1.0, 0.0], [1, 0]) == pytest.approx(0.0, abs=1e-6)


def test_bce_batch_mean_of_class_sums():
    pred = np.array([[0.8, 0.3], [0.5, 0.5]])
    y = np.array([[1, 0], [1, 1]])
    assert bce_loss(pred, y) == pytest.approx((bce_loss(pred[0], y[0]) + bce_loss(pred[1], y[1])) / 2)


def test_bce_finite_on_random_inputs():
    rng = np.random.default_rng(0)
    pred = rng.random((100_000, 1))
    pred[:50] = 0.0
    pred[50:100] = 1.0
    y = rng.integers(0, 2, (100_000, 1))
    for row_p, row_y in ((pred, y), (pred[:100], y[:100])):
        assert math.isfinite(bce_loss(row_p, row_y))


def test_pair_and_single_losses():
    assert total_loss(outputs([0.8], [0.6]), [1]) == pytest.approx(-math.log(0.8) - math.log(0.6), abs=1e-12)
    assert total_loss(outputs([0.8], [0.6]), [1]) == pytest.approx(0.7340, abs=5e-5)
    same = outputs([0.7, 0.2], [0.7, 0.2])
    assert total_loss(same, [1, 0], "pair") == pytest.approx(2 * total_loss(same, [1, 0], "single"))
    assert total_loss(outputs([1, 0], [1, 0]), [1, 0]) == pytest.approx(0.0, abs=1e-6)
    no_regions = StreamOutputs(np.array([0.8]), [], np.zeros(1), np.array([0.8]))
    assert total_loss(no_regions, [1]) == pytest.approx(-math.log(0.8))
    assert total_loss(outputs([0.8], [0.6]), [1], weights=(1.0, 0.5)) == pytest.approx(-math.log(0.8) - 0.5 * math.log(0.6))


def test_aggregate_local():
    v = np.array([0.3, 0.6])
    assert np.array_equal(aggregate_local([v]), v)
    assert aggregate_local([np.array([0.2, 0.9]), np.array([0.7, 0.1])]).tolist() == [0.7, 0.9]
    assert aggregate_local([], 3).tolist() == [0, 0, 0]
    rng = np.random.default_rng(1)
    vs = [rng.random(6) for _ in range(5)]
    assert aggregate_local(vs).tolist() == [max(v[c] for v in vs) for c in range(6)]


@settings(max_examples=300, deadline=None)
@given(
    vecs=st.lists(st.lists(st.floats(0, 1), min_size=4, max_size=4), min_size=1, max_size=6),
    perm_seed=st.integers(0, 1000),
    dup=st.integers(0, 5),
)
def test_aggregate_permutation_invariant_and_idempotent(vecs, perm_seed, dup):
    arrs = [np.array(v) for v in vecs]
    base = aggregate_local(arrs)
    perm = np.random.default_rng(perm_seed).permutation(len(arrs))
    assert np.array_equal(aggregate_local([arrs[i] for i in perm]), base)
    assert np.array_equal(aggregate_local(arrs + [arrs[dup % len(arrs)]]), base)


# --- forward / predict ------------------------------------------------------

def test_top_n_zero_degrades_to_global():
    p = tiny_params()
    x = np.random.default_rng(2).random((16, 16, 3)).astype(np.float32)
    out, regions = forward_two_stream(x, p, McarConfig(top_n=0, min_region_px=2))
    assert regions == [] and not out.y_l.any()
    assert np.array_equal(out.y_fused, out.y_g)


def test_full_image_region_reproduces_global_scores():
    p = tiny_params()
    x = np.random.default_rng(3).random((16, 16, 3)).astype(np.float32)
    full = Region(0, 0, 15, 0, 15, 0.5)
    y_local = forward(crop_and_resize(x, full, 16), p, keep_cache=False)[2][0]
    y_global = forward(x, p, keep_cache=False)[2][0]
    assert np.array_equal(y_local, y_global)


def test_forward_two_stream_fusion_and_shapes():
    p = tiny_params()
    x = np.random.default_rng(4).random((16, 16, 3)).astype(np.float32)
    out, regions = forward_two_stream(x, p, McarConfig(top_n=2, min_region_px=4))
    assert len(regions) == 2 == len(out.region_scores)
    assert np.array_equal(out.y_l, np.max(np.stack(out.region_scores), axis=0))
    assert np.all(out.y_fused >= out.y_g) and np.all(out.y_fused >= out.y_l)
    fused, regs, y_g, y_l = predict(x, p, McarConfig(top_n=2, min_region_px=4))
    assert np.array_equal(fused, out.y_fused) and regs == regions


def test_predict_batch_matches_single_image_path():
    p = tiny_params()
    x = np.random.default_rng(5).random((5, 16, 16, 3)).astype(np.float32)
    cfg = McarConfig(top_n=2, min_region_px=4)
    fused, y_g, y_l, regions = predict_batch(x, p, cfg, chunk=2)
    for i in range(5):
        f, regs, g, l = predict(x[i], p, cfg)
        assert regs == regions[i]
        np.testing.assert_allclose(fused[i], f, rtol=1e-5, atol=1e-6)
        np.testing.assert_allclose(y_g[i], g, rtol=1e-5, atol=1e-6)


def test_predict_batch_random_selection_is_seeded():
    p = tiny_params()
    x = np.random.default_rng(6).random((4, 16, 16, 3)).astype(np.float32)
    cfg = McarConfig(top_n=2, selection="random", min_region_px=4)
    a = predict_batch(x, p, cfg, seed=1)
    b = predict_batch(x, p, cfg, seed=1)
    assert np.array_equal(a[0], b[0]) and a[3] == b[3]


# --- gradients --------------------------------------------------------------

@pytest.mark.parametrize("mode", ["pair", "single"])
def test_two_stream_gradient_matches_frozen_finite_differences(mode):
    p, x, y, regions = gradcheck.instance(seed=1)
    errors = gradcheck.compare(p, x, y, regions, mode)
    assert max(errors.values()) <= 1e-3, errors


def test_two_stream_gradient_small_step_without_freezing():
    p, x, y, regions = gradcheck.instance(seed=2)
    errors = gradcheck.compare_unfrozen(p, x, y, regions)
    assert max(errors.values()) <= 1e-4, errors


# --- training ---------------------------------------------------------------

def toy_data(n=8, size=16, C=3, seed=0):
    rng = np.random.default_rng(seed)
    x = rng.random((n, size, size, 3)).astype(np.float32)
    y = (rng.random((n, C)) < 0.5).astype(np.float32)
    return x, y


def toy_config(**kw):
    base = dict(
        epochs=2, batch_size=4, lr=0.01, backbone=BackboneConfig(16, (4, 6)),
        mcar=McarConfig(top_n=2, min_region_px=4), seed=3, local_warmup_epochs=0,
    )
    base.update(kw)
    return TrainConfig(**base)


def test_train_checkpoint_round_trip(tmp_path):
    x, y = toy_data(4)
    params, history = train(x, y, toy_config(epochs=1))
    assert len(history) == 1 and math.isfinite(history[0].train_loss_global)
    save_checkpoint(tmp_path / "m.ckpt", params)
    loaded, _ = load_checkpoint(tmp_path / "m.ckpt")
    for k, v in params.tensors.items():
        assert loaded.tensors[k].tobytes() == v.tobytes()


def test_train_is_deterministic():
    x, y = toy_data()
    xv, yv = toy_data(6, seed=1)
    yv[0] = 1
    p1, h1 = train(x, y, toy_config(), xv, yv)
    p2, h2 = train(x, y, toy_config(), xv, yv)
    strip = lambda h: [(r.epoch, r.lr, r.train_loss_global, r.train_loss_local, r.val_mAP) for r in h]
    assert strip(h1) == strip(h2)
    assert all(p1.tensors[k].tobytes() == p2.tensors[k].tobytes() for k in p1.tensors)
    rec = json.loads(h1[0].to_json())
    assert list(rec) == ["epoch", "lr", "train_loss_global", "train_loss_local", "val_mAP", "wall_seconds"]


def test_global_only_training_has_no_local_loss():
    x, y = toy_data()
    _, h = train(x, y, toy_config(mcar=McarConfig(top_n=0)))
    assert all(math.isnan(r.train_loss_local) for r in h)


def test_train_rejects_inconsistent_labels():
    x, y = toy_data()
    with pytest.raises(ValueError):
        train(x, y[:5], toy_config())
    with pytest.raises(ValueError):
        train(x, y, toy_config(), x, np.zeros((8, 4), np.float32))
    with pytest.raises(ValueError):
        TrainConfig(epochs=0)


def test_shared_parameters_after_step():
    x, y = toy_data(4)
    params, _ = train(x, y, toy_config(epochs=1))
    # both streams read the one tensor dict; a local pass sees the updated weights
    a = forward(x[:1], params, keep_cache=False)[2]
    out, _ = forward_two_stream(x[0], params, McarConfig(top_n=0))
    assert np.array_equal(out.y_g, a[0])
