import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from popcnn.errors import CheckpointFormatError, DataError
from popcnn.nn import (
    AdamHyper,
    AdamState,
    ArchitectureSpec,
    LayerSpec,
    TrainConfig,
    adam_step,
    build_preset,
    dense_only,
    evaluate,
    forward,
    grad_check,
    init_model,
    load_checkpoint,
    loss_and_backward,
    predict_proba,
    save_checkpoint,
    train,
    train_arrays,
)
from popcnn.nn import layers as L
from popcnn.nn.checkpoint import from_bytes, to_bytes
from popcnn.nn.train import topk_hits
from popcnn.raster import bin_grid
from popcnn.sampler import draw_samples
from popcnn.synthworld import WorldSpec, generate_world


def spatial(shapes):
    return [s[0] for s in shapes if len(s) == 3]


# -- architecture -------------------------------------------------------------------


def test_vgg_trace():
    spec = build_preset("vgg-a-paper")
    shapes = spec.trace()
    pooled = [shapes[k][0] for k, l in enumerate(spec.layers) if l.kind == "maxpool2x2"]
    assert pooled == [37, 18, 9, 4, 2]
    widths = [l.size for l in spec.layers if l.kind == "conv3x3"]
    assert widths == [64, 128, 256, 256, 512, 512, 512, 512]
    dense = [l.size for l in spec.layers if l.kind == "dense"]
    assert dense == [4096, 4096, 18]
    assert shapes[-1] == (18,)


def test_tiny_and_micro_traces():
    tiny = build_preset("tiny")
    assert tiny.input_shape == (18, 18, 7)
    assert [tiny.trace()[k][0] for k, l in enumerate(tiny.layers) if l.kind == "maxpool2x2"] == [9, 4]
    micro = build_preset("micro")
    assert [l.size for l in micro.layers if l.kind == "conv3x3"] == [8, 16, 32, 32, 32]


@pytest.mark.parametrize("name", ["vgg-a-paper", "micro", "tiny"])
@pytest.mark.parametrize("bn,drop", [(False, 0.0), (True, 0.5)])
def test_presets_shape_check(name, bn, drop):
    spec = build_preset(name, bands=3, n_classes=5, dropout=drop, batchnorm=bn)
    assert spec.trace()[-1] == (5,)
    assert spec.layers[-1].kind == "softmax"
    assert [l.kind for l in spec.layers if l.kind in ("conv3x3", "dense", "batchnorm")][-2:] in (
        ["dense", "dense"], ["batchnorm", "dense"])


def test_unknown_preset():
    with pytest.raises(DataError, match="unknown preset"):
        build_preset("vgg-z")


def test_shape_mismatch_names_layer():
    with pytest.raises(DataError, match="layer 1"):
        ArchitectureSpec((4, 4, 1), (LayerSpec("flatten"), LayerSpec("conv3x3", 2), LayerSpec("dense", 3),
                                     LayerSpec("dense", 3), LayerSpec("softmax")), 3, "bad")


def test_spec_requires_softmax_and_two_dense():
    with pytest.raises(DataError):
        ArchitectureSpec((1, 1, 2), (LayerSpec("flatten"), LayerSpec("dense", 3), LayerSpec("softmax")), 3, "x")
    with pytest.raises(DataError):
        ArchitectureSpec((1, 1, 2), (LayerSpec("flatten"), LayerSpec("dense", 3), LayerSpec("dense", 3)), 3, "x")


def test_forward_rejects_bad_batch():
    model = init_model(build_preset("tiny"), 0)
    with pytest.raises(DataError, match="layer 0"):
        forward(model, np.zeros((1, 17, 18, 7)))


def test_spec_dict_roundtrip():
    spec = build_preset("micro", 4, 9, 0.25, True)
    assert ArchitectureSpec.from_dict(spec.to_dict()) == spec


# -- layers -------------------------------------------------------------------------


@given(hnp.arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 20)),
                  elements=st.floats(-700, 700, allow_nan=False)))
def test_softmax_rows_sum_to_one(logits):
    p = L.softmax(logits)
    assert (p >= 0).all()
    assert np.allclose(p.sum(axis=1), 1.0, atol=1e-9, rtol=0)


def test_zero_logits_uniform():
    assert np.allclose(L.softmax(np.zeros((2, 18))), 1 / 18, rtol=0, atol=1e-15)


def test_identity_delta_conv():
    x = np.random.default_rng(0).normal(size=(2, 5, 6, 1))
    W = np.zeros((3, 3, 1, 1))
    W[1, 1, 0, 0] = 1.0
    y, _ = L.conv_forward(x, {"W": W, "b": np.zeros(1)})
    assert np.array_equal(y, x)


def test_conv_matches_loop_oracle(rng):
    x = rng.normal(size=(2, 4, 5, 3))
    p = {"W": rng.normal(size=(3, 3, 3, 2)), "b": rng.normal(size=2)}
    y, _ = L.conv_forward(x, p)
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    ref = np.zeros((2, 4, 5, 2))
    for n in range(2):
        for i in range(4):
            for j in range(5):
                for o in range(2):
                    ref[n, i, j, o] = np.sum(xp[n, i:i + 3, j:j + 3, :] * p["W"][..., o]) + p["b"][o]
    assert np.allclose(y, ref, atol=1e-12)


def test_pool_floor_and_first_max():
    x = np.array([[1, 5, 2], [5, 0, 9], [7, 7, 7]], dtype=float).reshape(1, 3, 3, 1)
    y, cache = L.pool_forward(x)
    assert y.shape == (1, 1, 1, 1) and y[0, 0, 0, 0] == 5
    dx = L.pool_backward(np.ones_like(y), cache)
    # gradient goes to the first maximum only; the floor-dropped row/column gets none
    assert dx[0, :, :, 0].tolist() == [[0, 1, 0], [0, 0, 0], [0, 0, 0]]


def test_dropout_zero_rate_train_equals_infer():
    model = init_model(build_preset("tiny", dropout=0.0), 3)
    x = np.random.default_rng(1).uniform(size=(3, 18, 18, 7))
    a = forward(model, x, "train", np.random.default_rng(0))[0]
    b = forward(model, x, "infer")[0]
    assert np.array_equal(a, b)


def test_inverted_dropout_scaling():
    x = np.ones((2000, 10))
    y, scale = L.dropout_forward(x, 0.25, np.random.default_rng(0))
    assert set(np.unique(y)) <= {0.0, 1 / 0.75}
    assert abs(y.mean() - 1.0) < 0.02


def test_batchnorm_train_vs_infer(rng):
    x = rng.normal(2.0, 3.0, size=(64, 4))
    p = {"gamma": np.ones(4), "beta": np.zeros(4)}
    buf = {"running_mean": np.zeros(4), "running_var": np.ones(4)}
    y, cache = L.batchnorm_forward(x, p, buf, True)
    assert np.allclose(y.mean(axis=0), 0, atol=1e-12)
    assert np.allclose(y.var(axis=0), 1, atol=1e-3)
    yi, _ = L.batchnorm_forward(x, p, buf, False)
    assert np.allclose(yi, x / np.sqrt(1 + L.BN_EPS))


# -- loss ------------------------------------------------------------------------------


def _dense_model(n_in=4, n_classes=18, seed=0):
    return init_model(dense_only(n_in, [5], n_classes), seed)


def test_uniform_loss_is_log18():
    model = _dense_model()
    for p in model.params:
        for v in p.values():
            v[...] = 0
    loss, _, _ = loss_and_backward(model, np.ones((3, 1, 1, 4)), [0, 5, 17])
    assert loss == pytest.approx(math.log(18), abs=1e-12)
    assert round(loss, 4) == 2.8904


def test_perfect_prediction_loss_near_zero():
    model = _dense_model(n_classes=3)
    last = model.params[-2]
    last["W"][...] = 0
    last["b"][...] = [100.0, 0.0, 0.0]
    loss, _, _ = loss_and_backward(model, np.ones((2, 1, 1, 4)), [0, 0])
    assert loss <= 1e-6


def test_label_out_of_range():
    model = _dense_model(n_classes=3)
    with pytest.raises(DataError):
        loss_and_backward(model, np.ones((1, 1, 1, 4)), [3])


# -- gradient checks ---------------------------------------------------------------


def test_gradcheck_tiny():
    report = grad_check(build_preset("tiny", bands=2, n_classes=5), tolerance=1e-4, seed=1)
    assert report.passed, report.layers
    assert report.max_rel_error < 1e-4
    assert report.kinked_fraction < 0.02


def test_gradcheck_tiny_seven_bands():
    report = grad_check(build_preset("tiny"), tolerance=1e-4, seed=0)
    assert report.passed and report.kinked_fraction < 0.02


def test_gradcheck_dense_only():
    report = grad_check(dense_only(6, [7, 5], 4), tolerance=1e-6, seed=2, batch=3)
    assert report.max_rel_error < 1e-6


def test_gradcheck_dropout_skipped():
    spec = dense_only(6, [7, 5], 4)
    layers = list(spec.layers)
    layers.insert(3, LayerSpec("dropout", rate=0.5))
    spec = ArchitectureSpec(spec.input_shape, tuple(layers), 4, "dense-dropout")
    report = grad_check(spec, tolerance=1e-6)
    skipped = [r for r in report.layers if r.skipped]
    assert [r.kind for r in skipped] == ["dropout"]
    assert report.passed


def test_gradcheck_batchnorm():
    # biases feeding a batchnorm have zero true gradient, so their finite
    # differences are pure rounding noise; checked at a looser tolerance
    spec = build_preset("tiny", bands=2, n_classes=4, batchnorm=True)
    report = grad_check(spec, tolerance=1e-3, seed=3, batch=4)
    assert report.passed, report.layers


# -- adam ----------------------------------------------------------------------------


def test_adam_hand_example():
    params = [{"w": np.array([1.0])}]
    state = AdamState.zeros_like(params)
    adam_step(params, [{"w": np.array([1.0])}], state, AdamHyper())
    assert params[0]["w"][0] == pytest.approx(1 - 0.001 / (1 + 1e-8), abs=1e-15)
    assert abs(params[0]["w"][0] - 0.999000) < 1e-10
    assert state.t == 1


def test_adam_zero_grad_keeps_params():
    params = [{"w": np.array([1.0, -2.0])}]
    state = AdamState.zeros_like(params)
    adam_step(params, [{"w": np.zeros(2)}], state)
    assert params[0]["w"].tolist() == [1.0, -2.0]


def test_adam_deterministic(rng):
    g = [{"w": rng.normal(size=5)}]
    runs = []
    for _ in range(2):
        params = [{"w": np.ones(5)}]
        state = AdamState.zeros_like(params)
        for _ in range(3):
            adam_step(params, g, state)
        runs.append(params[0]["w"].copy())
    assert np.array_equal(*runs)


def test_adam_oracle_multi_step(rng):
    h = AdamHyper()
    theta = rng.normal(size=4)
    params = [{"w": theta.copy()}]
    state = AdamState.zeros_like(params)
    m = v = np.zeros(4)
    ref = theta.copy()
    for t in range(1, 6):
        g = rng.normal(size=4)
        adam_step(params, [{"w": g}], state, h)
        m = h.beta1 * m + (1 - h.beta1) * g
        v = h.beta2 * v + (1 - h.beta2) * g * g
        ref = ref - h.lr * (m / (1 - h.beta1**t)) / (np.sqrt(v / (1 - h.beta2**t)) + h.eps)
    assert np.allclose(params[0]["w"], ref, rtol=0, atol=1e-15)


# -- training --------------------------------------------------------------------------


@pytest.fixture(scope="module")
def small_data():
    spec = WorldSpec(seed=5, rows=30, cols=30, tile_h=18, tile_w=18, county_grid=(1, 1))
    w0, _ = generate_world(spec)
    classes = bin_grid(w0.population)
    samples = draw_samples(classes, None, 200 / 900, 50 / 900, seed=1)
    return w0, classes, samples


def test_training_loss_decreases(small_data):
    w0, classes, samples = small_data
    assert len(samples.train) == 200
    ckpt = train(w0.tiles, classes, samples, build_preset("tiny"), TrainConfig(batch_size=32, epochs=5, seed=0))
    losses = [r.train_loss for r in ckpt.history]
    assert len(losses) == 5
    assert losses[0] > losses[1] > losses[2]
    best = min(range(5), key=lambda e: ckpt.history[e].val_loss)
    assert ckpt.best_epoch == best


def test_training_deterministic(small_data):
    w0, classes, samples = small_data
    cfg = TrainConfig(batch_size=64, epochs=2, seed=4)
    a = train(w0.tiles, classes, samples, build_preset("tiny"), cfg)
    b = train(w0.tiles, classes, samples, build_preset("tiny"), cfg)
    assert to_bytes(a) == to_bytes(b)


def test_epochs_zero_rejected():
    with pytest.raises(DataError):
        TrainConfig(epochs=0)
    with pytest.raises(DataError):
        TrainConfig(batch_size=0)


def test_empty_training_set_rejected():
    spec = dense_only(2, [3], 2)
    with pytest.raises(DataError):
        train_arrays(np.zeros((0, 1, 1, 2), np.uint8), np.zeros(0, int), None, None, spec, TrainConfig(epochs=1))


def test_constant_band_normalises_to_zero():
    spec = dense_only(2, [3], 2)
    x = np.stack([np.full(6, 7), np.arange(6)], axis=1).reshape(6, 1, 1, 2).astype(np.uint8)
    ckpt = train_arrays(x, np.array([0, 1] * 3), x, np.array([0, 1] * 3), spec, TrainConfig(batch_size=4, epochs=1))
    z = ckpt.normalize(x)
    assert (z[..., 0] == 0).all()
    assert z[..., 1].min() == 0 and z[..., 1].max() == 1


# -- evaluation ----------------------------------------------------------------------


def test_topk_tie_break_uniform():
    probs = np.full((18, 18), 1 / 18)
    labels = np.arange(18)
    hits = topk_hits(probs, labels, 3)
    assert hits.tolist() == [True] * 3 + [False] * 15
    assert topk_hits(probs, labels, 1).tolist() == [True] + [False] * 17


@given(hnp.arrays(np.float64, st.tuples(st.integers(1, 10), st.just(6)), elements=st.floats(0, 1)),
       st.data())
def test_top3_contains_top1(scores, data):
    labels = np.array(data.draw(st.lists(st.integers(0, 5), min_size=len(scores), max_size=len(scores))))
    assert (topk_hits(scores, labels, 3) >= topk_hits(scores, labels, 1)).all()


def test_evaluate_perfect(small_data):
    spec = dense_only(1, [4], 2)
    x = np.array([0, 255] * 4, dtype=np.uint8).reshape(8, 1, 1, 1)
    y = np.array([0, 1] * 4)
    ckpt = train_arrays(x, y, x, y, spec, TrainConfig(batch_size=8, epochs=1))
    last = ckpt.model.params[-2]
    last["W"][...] = 0
    # hidden relu units see x in {0, 1}; force the output to copy the input
    ckpt.model.params[1]["W"][...] = 1.0
    ckpt.model.params[1]["b"][...] = 0.0
    last["W"][:, 1] = 50.0
    last["b"][...] = [10.0, 0.0]
    top1, top3, loss = evaluate(ckpt, x, y)
    assert top1 == 1.0 and top3 == 1.0


def test_evaluate_empty_rejected(small_data):
    spec = dense_only(1, [2], 2)
    x = np.zeros((2, 1, 1, 1), np.uint8)
    ckpt = train_arrays(x, np.array([0, 1]), x, np.array([0, 1]), spec, TrainConfig(batch_size=2, epochs=1))
    with pytest.raises(DataError):
        evaluate(ckpt, np.zeros((0, 1, 1, 1), np.uint8), np.zeros(0, int))


# -- checkpoint ------------------------------------------------------------------------


def test_checkpoint_roundtrip(tmp_path, small_data):
    w0, classes, samples = small_data
    spec = build_preset("tiny", batchnorm=True, dropout=0.2)
    ckpt = train(w0.tiles, classes, samples, spec, TrainConfig(batch_size=64, epochs=1, seed=2))
    p = tmp_path / "m.pgnn"
    save_checkpoint(ckpt, p)
    data = p.read_bytes()
    assert data[:4] == b"PGNN"
    back = load_checkpoint(p)
    assert to_bytes(back) == data
    x = w0.tiles.gather(samples.validation)
    assert np.array_equal(predict_proba(back, x), predict_proba(ckpt, x))
    assert back.history == ckpt.history and back.best_epoch == ckpt.best_epoch


@given(st.integers(0, 2**32 - 1))
def test_checkpoint_roundtrip_random(seed):
    from popcnn.nn.train import Checkpoint, EpochRecord

    rng = np.random.default_rng(seed)
    model = init_model(dense_only(3, [int(rng.integers(1, 5))], 3), seed)
    for _, _, arr in model.tensors():
        arr[...] = rng.normal(size=arr.shape) * 10.0 ** rng.integers(-300, 300)
    ckpt = Checkpoint(model, rng.uniform(0, 10, 3), rng.uniform(10, 20, 3),
                      [EpochRecord(0, float(rng.normal()), None, None, None)], 0)
    back = from_bytes(to_bytes(ckpt))
    for (_, _, a), (_, _, b) in zip(model.tensors(), back.model.tensors()):
        assert a.tobytes() == b.tobytes()
    assert back.band_min.tobytes() == ckpt.band_min.tobytes()


def test_checkpoint_corruption(tmp_path):
    from popcnn.nn.train import Checkpoint

    blob = to_bytes(Checkpoint(init_model(dense_only(2, [2], 2), 0), np.zeros(2), np.ones(2)))
    for bad, msg in [(b"XXXX" + blob[4:], "magic"), (blob[:4] + b"\x09\x00" + blob[6:], "version"),
                     (blob[:-3], "truncated"), (blob + b"\x00", "trailing")]:
        with pytest.raises(CheckpointFormatError, match=msg):
            from_bytes(bad)
