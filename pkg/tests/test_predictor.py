import io
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from msight.predictor.model import (
    HISTORY,
    DegenerateHeading,
    EncoderConfig,
    ModelFormatError,
    ShapeMismatch,
    encode_histories,
    fde,
    forward,
    init_params,
    load_model,
    loss,
    param_shapes,
    positional_map,
    predict,
    save_model,
)
from msight.predictor.tensor import GraphNotRecorded, Tensor, gelu, layer_norm, no_grad, softmax, softplus
from msight.predictor.train import (
    Dataset,
    Diverged,
    constant_position,
    constant_velocity,
    make_cv_dataset,
    stable_lr_max,
    read_dataset,
    train,
    write_dataset,
)

TOY = EncoderConfig(model_dim=16, layers=1, heads=2, pos_len=2, horizon=3)


def _toy_batch(seed=0, n=2, b=1):
    rng = np.random.default_rng(seed)
    hist = rng.uniform(-0.8, 0.8, (b, n, HISTORY, 2))
    gt = rng.uniform(-0.8, 0.8, (b, n, TOY.horizon, 2))
    return hist, gt


# ---------------------------------------------------------------------------
# positional map

def test_positional_map_identity_when_L_zero():
    out = positional_map([0.3, -0.7], 0)
    assert out.shape == (2, 1)
    np.testing.assert_array_equal(out[:, 0], [0.3, -0.7])


def test_positional_map_at_zero():
    np.testing.assert_array_equal(positional_map(0.0, 2), [0, 0, 1, 0, 1])


def test_positional_map_frequencies():
    c = 0.13
    out = positional_map(c, 3)
    want = [c]
    for i in range(3):
        want += [math.sin(2**i * math.pi * c), math.cos(2**i * math.pi * c)]
    np.testing.assert_allclose(out, want, rtol=0, atol=1e-15)


def test_history_encoding_length():
    assert positional_map(0.5, 4).shape == (9,)
    assert encode_histories(np.zeros((HISTORY, 2)), 4).shape == (6 * 18,)
    assert EncoderConfig().input_dim == 108


def test_encode_rejects_bad_history():
    with pytest.raises(ShapeMismatch):
        encode_histories(np.zeros((5, 2)), 4)


# ---------------------------------------------------------------------------
# config and forward

def test_default_config():
    cfg = EncoderConfig()
    assert (cfg.model_dim, cfg.layers, cfg.heads, cfg.horizon) == (256, 4, 8, 3)
    assert cfg.horizon_s == pytest.approx(1.2)


@pytest.mark.parametrize("kw", [{"model_dim": 30, "heads": 8}, {"horizon": 0}, {"pos_len": -1}])
def test_bad_config(kw):
    with pytest.raises(ValueError):
        EncoderConfig(**kw)


def test_single_object_shapes():
    ps = init_params(TOY, 3)
    mean, var = forward(np.zeros((1, 1, HISTORY, 2)), np.ones((1, 1), bool), ps, TOY)
    assert mean.shape == var.shape == (1, 1, 3, 2)
    assert np.all(var.data > 0)


def test_forward_shape_errors():
    ps = init_params(TOY, 0)
    with pytest.raises(ShapeMismatch):
        forward(np.zeros((1, 2, 5, 2)), np.ones((1, 2), bool), ps, TOY)
    with pytest.raises(ShapeMismatch):
        forward(np.zeros((1, 2, 6, 2)), np.ones((1, 3), bool), ps, TOY)


def test_permutation_equivariance():
    ps = init_params(TOY, 1)
    rng = np.random.default_rng(5)
    hist = rng.uniform(-1, 1, (1, 5, HISTORY, 2))
    act = np.array([[True, True, False, True, True]])
    perm = np.array([3, 0, 4, 2, 1])
    with no_grad():
        m1, v1 = forward(hist, act, ps, TOY)
        m2, v2 = forward(hist[:, perm], act[:, perm], ps, TOY)
    np.testing.assert_allclose(m2.data, m1.data[:, perm], atol=1e-12)
    np.testing.assert_allclose(v2.data, v1.data[:, perm], atol=1e-12)


def test_inactive_objects_do_not_influence_active_ones():
    ps = init_params(TOY, 2)
    hist, _ = _toy_batch(3, n=3)
    act = np.array([[True, False, True]])
    other = hist.copy()
    other[0, 1] += 7.0
    with no_grad():
        a, _ = forward(hist, act, ps, TOY)
        b, _ = forward(other, act, ps, TOY)
    np.testing.assert_array_equal(a.data[0, [0, 2]], b.data[0, [0, 2]])


def test_zero_weight_heads_emit_bias():
    ps = init_params(TOY, 0)
    ps["mean.w"].data[:] = 0.0
    ps["mean.b"].data[:] = np.arange(6) * 0.1
    hist, _ = _toy_batch(9, n=3)
    with no_grad():
        mean, _ = forward(hist, np.ones((1, 3), bool), ps, TOY)
    for o in range(3):
        np.testing.assert_array_equal(mean.data[0, o].ravel(), np.arange(6) * 0.1)


def test_predict_in_metres_and_skips_short_histories():
    ps = init_params(TOY, 0)
    hists = {7: [(float(i), 0.0) for i in range(6)], 8: [(0.0, 0.0)] * 3}
    out = predict(hists, ps, TOY)
    assert out.object_ids == (7,)
    assert out.mean.shape == out.var.shape == (1, 3, 2)
    with no_grad():
        m, v = forward(np.array([[hists[7]]]) / TOY.roi_radius, np.ones((1, 1), bool), ps, TOY)
    np.testing.assert_allclose(out.mean, m.data[0] * 50.0)
    np.testing.assert_allclose(out.var, v.data[0] * 2500.0)


# ---------------------------------------------------------------------------
# loss

def test_loss_worked_example():
    total, parts = loss(Tensor(np.zeros((1, 1, 2))), Tensor(np.ones((1, 1, 2))), [[[1.0, 2.0]]])
    assert parts == {"mu": 5.0, "sigma_x": 0.0, "sigma_y": 9.0, "total": 14.0}
    assert float(total.data) == 14.0


def test_loss_zero_at_exact_prediction():
    gt = np.random.default_rng(0).normal(size=(2, 3, 3, 2))
    total, _ = loss(Tensor(gt.copy()), Tensor(np.zeros_like(gt)), gt)
    assert float(total.data) == 0.0


@given(st.floats(-5, 5), st.floats(-5, 5), st.floats(0.01, 30))
def test_variance_stationary_point(x, mu, s0):
    # d/ds ((x - mu)^2 - s)^2 vanishes exactly at s = (x - mu)^2
    s = Tensor(np.array([[s0, s0]]), requires_grad=True)
    total, _ = loss(Tensor(np.array([[mu, mu]])), s, [[x, x]])
    total.backward()
    r = (x - mu) ** 2
    np.testing.assert_allclose(s.grad[0, 0], -2 * (r - s0), rtol=1e-9, atol=1e-9)
    s_opt = Tensor(np.array([[r, r]]), requires_grad=True)
    loss(Tensor(np.array([[mu, mu]])), s_opt, [[x, x]])[0].backward()
    assert abs(s_opt.grad[0, 0]) <= 1e-12 * max(1.0, r)


def test_loss_ignores_masked_objects():
    gt = np.zeros((1, 2, 3, 2))
    mean = np.zeros_like(gt)
    mean[0, 1] = 100.0
    total, _ = loss(Tensor(mean), Tensor(np.zeros_like(gt)), gt, [[True, False]])
    assert float(total.data) == 0.0


def test_loss_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        loss(Tensor(np.zeros((1, 3, 2))), Tensor(np.zeros((1, 3, 2))), np.zeros((1, 2, 2)))


# ---------------------------------------------------------------------------
# gradients

def _toy_loss(ps, hist, gt, act):
    mean, var = forward(hist, act, ps, TOY)
    return loss(mean, var, gt, act)[0]


def test_gradients_match_finite_differences():
    ps = init_params(TOY, 7)
    rng = np.random.default_rng(11)
    for t in ps.values():  # move off the tiny-head initialisation so every path matters
        t.data += rng.normal(0, 0.1, t.shape)
    hist, gt = _toy_batch(4)
    act = np.ones((1, 2), bool)
    ps.zero_grad()
    _toy_loss(ps, hist, gt, act).backward()
    h = 1e-4
    worst = 0.0
    with no_grad():
        for name, t in ps.items():
            flat = t.data.reshape(-1)
            g = t.grad.reshape(-1)
            for i in range(flat.size):
                keep = flat[i]
                flat[i] = keep + h
                up = float(_toy_loss(ps, hist, gt, act).data)
                flat[i] = keep - h
                dn = float(_toy_loss(ps, hist, gt, act).data)
                flat[i] = keep
                num = (up - dn) / (2 * h)
                rel = abs(num - g[i]) / max(abs(num), abs(g[i]), 1e-6)
                worst = max(worst, rel)
                assert rel < 1e-4, (name, i, num, g[i])
    assert worst < 1e-4


def test_masked_object_history_does_not_reach_loss():
    ps = init_params(TOY, 1)
    hist, gt = _toy_batch(2, n=2)
    act = np.array([[True, False]])
    other = hist.copy()
    other[0, 1] = 0.5
    with no_grad():
        a = _toy_loss(ps, hist, gt, act).data
        b = _toy_loss(ps, other, gt, act).data
    assert a == b


def test_inactive_slot_parameters_unused():
    # each token may only attend to itself, so attention weights are constant 1
    # and the query/key projections receive exactly zero gradient
    ps = init_params(TOY, 3)
    hist, gt = _toy_batch(6, n=2)
    act = np.array([[True, False]])
    ps.zero_grad()
    _toy_loss(ps, hist, gt, act).backward()
    d = TOY.model_dim
    np.testing.assert_array_equal(ps["l0.qkv.w"].grad[:, : 2 * d], 0.0)


def test_doubling_loss_doubles_gradients():
    ps = init_params(TOY, 2)
    hist, gt = _toy_batch(1)
    act = np.ones((1, 2), bool)
    ps.zero_grad()
    _toy_loss(ps, hist, gt, act).backward()
    g1 = np.concatenate([t.grad.ravel() for t in ps.values()])
    ps.zero_grad()
    (_toy_loss(ps, hist, gt, act) * 2.0).backward()
    g2 = np.concatenate([t.grad.ravel() for t in ps.values()])
    np.testing.assert_array_equal(g2, 2.0 * g1)


def test_backward_without_graph():
    with pytest.raises(GraphNotRecorded):
        Tensor(np.ones(3)).sum().backward()
    w = Tensor(np.ones(3), requires_grad=True)
    with no_grad():
        y = (w * 2.0).sum()
    with pytest.raises(GraphNotRecorded):
        y.backward()


def _numgrad(f, x, h=1e-6):
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        keep = x[i]
        x[i] = keep + h
        up = f(x)
        x[i] = keep - h
        dn = f(x)
        x[i] = keep
        g[i] = (up - dn) / (2 * h)
    return g


@pytest.mark.parametrize("op", ["softmax", "layer_norm", "gelu", "softplus", "getitem", "matmul"])
def test_kernel_op_gradients(op):
    rng = np.random.default_rng(0)
    x0 = rng.normal(size=(2, 3, 4))
    w = rng.normal(size=(2, 3, 4))
    gain, bias = rng.normal(size=4), rng.normal(size=4)
    m = rng.normal(size=(4, 5))

    def run(t):
        if op == "softmax":
            return softmax(t)
        if op == "layer_norm":
            return layer_norm(t, Tensor(gain), Tensor(bias))
        if op == "gelu":
            return gelu(t)
        if op == "softplus":
            return softplus(t)
        if op == "getitem":
            return t[:, [0, 2, 2]] * 1.0
        return t @ Tensor(m)

    def f(arr):
        with no_grad():
            y = run(Tensor(arr))
        return float((y.data * (w if y.shape == w.shape else 1.0)).sum())

    x = Tensor(x0.copy(), requires_grad=True)
    y = run(x)
    (y * Tensor(w if y.shape == w.shape else np.ones(y.shape))).sum().backward()
    np.testing.assert_allclose(x.grad, _numgrad(f, x0.copy()), rtol=1e-6, atol=1e-8)


def test_softplus_large_inputs_are_finite():
    x = Tensor(np.array([-800.0, 0.0, 800.0]), requires_grad=True)
    y = softplus(x)
    y.sum().backward()
    assert np.all(np.isfinite(y.data)) and np.all(np.isfinite(x.grad))
    np.testing.assert_allclose(x.grad, [0.0, 0.5, 1.0])


# ---------------------------------------------------------------------------
# training

def test_training_is_deterministic():
    data = make_cv_dataset(64, seed=2)
    a = train(data, TOY, lr=0.05, steps=20, batch=8, seed=4)
    b = train(data, TOY, lr=0.05, steps=20, batch=8, seed=4)
    assert a.losses == b.losses
    np.testing.assert_array_equal(a.params.flat(), b.params.flat())


def test_loss_non_increasing_over_windows():
    # full-batch descent on a small toy set with lr inside the declared range
    data = make_cv_dataset(16, seed=8)
    for lr in (0.01, stable_lr_max(TOY)):
        res = train(data, TOY, lr=lr, steps=300, batch=len(data), seed=0)
        curve = np.asarray(res.losses)
        for start in range(len(curve) - 49):
            assert curve[start + 49] <= curve[start] + 1e-12


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_raises():
    data = make_cv_dataset(16, seed=1)
    with pytest.raises(Diverged):
        train(data, TOY, lr=1e6, steps=50, batch=16)


def test_empty_dataset():
    with pytest.raises(ValueError):
        train(Dataset(np.zeros((0, 1, 6, 2)), np.zeros((0, 1, 3, 2)), np.zeros((0, 1), bool)), TOY)


def test_baselines_closed_form():
    data = make_cv_dataset(5, seed=0, hist_noise_m=0.0)
    cv = constant_velocity(data, 3)
    m = data.active
    np.testing.assert_allclose(cv[m], data.future[m], atol=1e-9)
    cp = constant_position(data, 3)
    np.testing.assert_array_equal(cp[m][:, 2], data.hist[m][:, -1])


def test_dataset_ndjson_round_trip():
    data = make_cv_dataset(4, seed=3)
    buf = io.StringIO()
    write_dataset(data, buf)
    buf.seek(0)
    back = read_dataset(buf)
    assert len(back) == int(data.active.sum())
    np.testing.assert_array_equal(back.hist[:, 0], data.hist[data.active])
    np.testing.assert_array_equal(back.future[:, 0], data.future[data.active])


def test_dataset_bad_line():
    with pytest.raises(ValueError):
        read_dataset(io.StringIO('{"history": [[0, 0]], "future": [[0, 0]]}\n'))


# ---------------------------------------------------------------------------
# FDE

def test_fde_exact():
    gt = np.array([[1.0, 0], [2, 0], [3, 0]])
    r = fde(gt, gt, 3)
    assert (r.lat, r.lon) == (0.0, 0.0)


def test_fde_axis_aligned():
    gt = np.array([[1.0, 0], [2, 0], [3, 0]])
    pred = gt.copy()
    pred[2] += [0.5, 1.0]
    r = fde(pred, gt, 3)
    assert (r.lat, r.lon, r.degenerate) == (1.0, 0.5, False)


def test_fde_degenerate_heading():
    gt = np.zeros((3, 2))
    pred = gt + [[0, 0], [0, 0], [0.3, -0.4]]
    r = fde(pred, gt, 3)
    assert r.degenerate and (r.lat, r.lon) == (0.3, 0.4)


def test_fde_errors():
    with pytest.raises(ShapeMismatch):
        fde(np.zeros((3, 2)), np.zeros((3, 2)), 4)
    with pytest.raises(DegenerateHeading):
        fde(np.zeros((1, 2)), np.zeros((1, 2)), 1)


@settings(max_examples=200)
@given(st.floats(-20, 20), st.floats(-20, 20), st.floats(-math.pi, math.pi), st.floats(0.5, 20))
def test_fde_norm_identity(dx, dy, hd, spd):
    gt = np.array([[0.0, 0.0], [spd * math.cos(hd), spd * math.sin(hd)]])
    pred = gt.copy()
    pred[1] += [dx, dy]
    r = fde(pred, gt, 2)
    assert math.hypot(r.lat, r.lon) == pytest.approx(math.hypot(dx, dy), abs=1e-12)


# ---------------------------------------------------------------------------
# model file

def test_model_file_round_trip(tmp_path):
    ps = init_params(TOY, 5)
    buf = io.BytesIO()
    save_model(ps, TOY, buf)
    buf.seek(0)
    back, cfg = load_model(buf)
    assert cfg == EncoderConfig(16, 1, 2, 2, 3, 0.4, 64, 50.0)
    assert list(back) == [n for n, _ in param_shapes(TOY)]
    np.testing.assert_array_equal(back.flat(), ps.flat())


def test_model_file_errors():
    ps = init_params(TOY, 5)
    buf = io.BytesIO()
    save_model(ps, TOY, buf)
    raw = buf.getvalue()
    for bad in (b"XXXX" + raw[4:], raw[:-8], raw + b"\0", raw[:10], raw[:4] + b"\x09\x00" + raw[6:]):
        with pytest.raises(ModelFormatError):
            load_model(io.BytesIO(bad))
