import hashlib
import math

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from fedjam import nn
from fedjam.exceptions import DimensionError, FormatError, InputError
from fedjam.nn import CnnConfig, TrainConfig


def small_cfg(**kw):
    base = dict(input_h=10, input_w=10, conv_filters=2, conv_kernel=3, num_classes=6)
    base.update(kw)
    return CnnConfig(**base)


def random_params(cfg, seed, dtype=np.float32, scale=0.5):
    rng = np.random.default_rng(seed)
    return {k: (rng.standard_normal(s) * scale).astype(dtype) for k, s in cfg.param_shapes().items()}


def forward_oracle(params, x, cfg):
    """Direct nested-loop convolution, max-pool, ReLU, dense layer and softmax."""
    p = {k: np.asarray(v, dtype=np.float64) for k, v in params.items()}
    k, s, ps = cfg.conv_kernel, cfg.conv_stride, cfg.pool_size
    oh, ow = (cfg.input_h - k) // s + 1, (cfg.input_w - k) // s + 1
    ph, pw = oh // ps, ow // ps
    out = []
    for b in range(x.shape[0]):
        feats = []
        for f in range(cfg.conv_filters):
            conv = np.zeros((oh, ow))
            for i in range(oh):
                for j in range(ow):
                    acc = p["conv_b"][f]
                    for u in range(k):
                        for v in range(k):
                            acc += p["conv_w"][f, 0, u, v] * float(x[b, 0, i * s + u, j * s + v])
                    conv[i, j] = max(acc, 0.0)
            for i in range(ph):
                for j in range(pw):
                    feats.append(max(conv[i * ps + a, j * ps + c] for a in range(ps) for c in range(ps)))
        logits = p["fc_w"] @ np.array(feats) + p["fc_b"]
        e = np.exp(logits - logits.max())
        out.append(e / e.sum())
    return np.array(out)


# ------------------------------------------------------------------ config


def test_default_shapes():
    cfg = CnnConfig()
    assert cfg.conv_out == (53, 53)
    assert cfg.pooled == (26, 26)
    assert cfg.param_shapes() == {
        "conv_w": (16, 1, 12, 12),
        "conv_b": (16,),
        "fc_w": (6, 16 * 26 * 26),
        "fc_b": (6,),
    }


@pytest.mark.parametrize(
    "kw",
    [dict(conv_kernel=11), dict(conv_stride=2, conv_kernel=3, input_h=10), dict(num_classes=1), dict(pool_kind="avg"), dict(conv_kernel=9, pool_size=3)],
)
def test_invalid_config(kw):
    with pytest.raises(nn.ConfigurationError):
        small_cfg(**kw).validate()


def test_train_config_validation():
    for bad in (TrainConfig(epochs=0), TrainConfig(batch_size=0), TrainConfig(learning_rate=-1.0)):
        with pytest.raises(nn.ConfigurationError):
            bad.validate()


def test_init_is_he_uniform_and_seeded():
    cfg = CnnConfig()
    a, b = nn.init_params(cfg, 3), nn.init_params(cfg, 3)
    for name in nn.PARAM_NAMES:
        np.testing.assert_array_equal(a[name], b[name])
        assert a[name].dtype == np.float32
    assert np.abs(a["conv_w"]).max() <= math.sqrt(6 / 144)
    assert np.abs(a["fc_w"]).max() <= math.sqrt(6 / cfg.flat_dim)
    assert not a["conv_b"].any() and not a["fc_b"].any()
    assert not np.array_equal(a["conv_w"], nn.init_params(cfg, 4)["conv_w"])


@given(seed=st.integers(0, 10_000))
def test_flatten_unflatten_identity(seed):
    cfg = small_cfg()
    params = random_params(cfg, seed)
    back = nn.unflatten_params(nn.flatten_params(params), cfg)
    for name in nn.PARAM_NAMES:
        np.testing.assert_array_equal(back[name], params[name])


@given(seed=st.integers(0, 10_000), n=st.integers(1, 4))
def test_parameter_averaging_is_linear(seed, n):
    cfg = small_cfg()
    rng = np.random.default_rng(seed)
    models = [random_params(cfg, seed + i, dtype=np.float64) for i in range(n)]
    coeffs = rng.random(n)
    flat = nn.unflatten_params(sum(a * nn.flatten_params(m) for a, m in zip(coeffs, models)), cfg)
    for name in nn.PARAM_NAMES:
        tensor = sum(a * m[name] for a, m in zip(coeffs, models))
        np.testing.assert_array_equal(flat[name], tensor)


def test_unflatten_rejects_wrong_length():
    with pytest.raises(DimensionError):
        nn.unflatten_params(np.zeros(3), small_cfg())


# ----------------------------------------------------------------- forward


def test_zero_params_give_uniform_posterior():
    cfg = small_cfg()
    x = np.random.default_rng(0).random((3, 1, 10, 10))
    np.testing.assert_allclose(nn.forward(nn.zeros_like_params(cfg), x, cfg), 1 / 6, atol=1e-7)


def test_duplicated_sample_gives_identical_rows():
    cfg = small_cfg()
    params = random_params(cfg, 1)
    x = np.random.default_rng(1).random((1, 1, 10, 10))
    out = nn.forward(params, np.concatenate([x, x]), cfg)
    np.testing.assert_array_equal(out[0], out[1])


@settings(max_examples=120)
@given(
    h=st.integers(6, 16),
    w=st.integers(6, 16),
    k=st.integers(1, 4),
    stride=st.integers(1, 2),
    pool=st.integers(1, 3),
    filters=st.integers(1, 3),
    classes=st.integers(2, 6),
    batch=st.integers(1, 3),
    seed=st.integers(0, 10_000),
)
def test_forward_matches_loop_oracle(h, w, k, stride, pool, filters, classes, batch, seed):
    # trim the image so the stride tiles it exactly
    h -= (h - k) % stride
    w -= (w - k) % stride
    cfg = CnnConfig(h, w, filters, k, stride, "max", pool, classes)
    assume(min(cfg.pooled) >= 1)
    params = random_params(cfg, seed)
    x = np.random.default_rng(seed + 1).random((batch, 1, h, w)).astype(np.float32)
    got = nn.forward(params, x, cfg)
    np.testing.assert_allclose(got, forward_oracle(params, x, cfg), atol=1e-5, rtol=0)
    np.testing.assert_allclose(got.sum(axis=1), 1.0, atol=1e-5)


def test_forward_16x16_oracle_example():
    cfg = CnnConfig(16, 16, 4, 3, 1, "max", 2, 6)
    params = random_params(cfg, 7)
    x = np.random.default_rng(8).random((2, 1, 16, 16)).astype(np.float32)
    np.testing.assert_allclose(nn.forward(params, x, cfg), forward_oracle(params, x, cfg), atol=1e-5)


@given(scale=st.floats(1e-3, 1e3), seed=st.integers(0, 1000))
def test_softmax_rows_sum_to_one(scale, seed):
    logits = np.random.default_rng(seed).standard_normal((5, 6)) * scale
    p = np.exp(nn.log_softmax(logits))
    assert np.all(np.isfinite(p))
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-5)


def test_forward_rejects_bad_shapes():
    cfg = small_cfg()
    params = random_params(cfg, 0)
    with pytest.raises(DimensionError, match="conv"):
        nn.forward(params, np.zeros((1, 1, 11, 10)), cfg)
    with pytest.raises(DimensionError, match="conv"):
        nn.forward(params, np.zeros((1, 10, 10)), cfg)
    bad = dict(params, fc_w=np.zeros((6, 3), np.float32))
    with pytest.raises(DimensionError, match="fc_w"):
        nn.forward(bad, np.zeros((1, 1, 10, 10)), cfg)


def test_predict_proba_chunks_consistently():
    cfg = small_cfg()
    params = random_params(cfg, 2)
    x = np.random.default_rng(2).random((70, 1, 10, 10)).astype(np.float32)
    whole = nn.predict_proba(params, x, cfg, chunk=1000)
    np.testing.assert_allclose(nn.predict_proba(params, x, cfg, chunk=7), whole, rtol=1e-6, atol=1e-7)


# -------------------------------------------------------------------- loss


def test_zero_params_loss_is_log6():
    cfg = small_cfg()
    x = np.random.default_rng(0).random((4, 1, 10, 10))
    loss, grads = nn.loss_and_grad(nn.zeros_like_params(cfg), x, np.array([0, 1, 2, 5]), cfg)
    assert loss == pytest.approx(math.log(6), abs=1e-6)
    assert set(grads) == set(nn.PARAM_NAMES)


def test_saturated_bias_gives_near_zero_loss():
    cfg = small_cfg()
    params = nn.zeros_like_params(cfg)
    params["fc_b"][3] = 20.0
    x = np.random.default_rng(0).random((2, 1, 10, 10))
    loss, _ = nn.loss_and_grad(params, x, np.array([3, 3]), cfg)
    assert loss < 1e-6


@pytest.mark.parametrize("labels", [[0, 6], [-1, 0]])
def test_labels_out_of_range(labels):
    cfg = small_cfg()
    with pytest.raises(InputError):
        nn.loss_and_grad(nn.zeros_like_params(cfg), np.zeros((2, 1, 10, 10)), np.array(labels), cfg)


def _kink_margin(params, x, cfg):
    """Smallest distance of any pre-activation to a ReLU or max-pool switch."""
    p = {k: v.astype(np.float64) for k, v in params.items()}
    _, cache = nn._forward(p, x.astype(np.float64), cfg)
    pooled = cache["pooled"]
    k, nf, ps = cfg.conv_kernel, cfg.conv_filters, cfg.pool_size
    oh, ow = cfg.conv_out
    ph, pw = cfg.pooled
    z = (cache["cols"] @ p["conv_w"].reshape(nf, k * k).T + p["conv_b"]).reshape(x.shape[0], oh, ow, nf)
    windows = np.stack(
        [z[:, i : ph * ps : ps, j : pw * ps : ps, :] for i in range(ps) for j in range(ps)], axis=-1
    )
    srt = np.sort(windows, axis=-1)
    gap = srt[..., -1] - srt[..., -2] if ps > 1 else np.inf
    return min(np.abs(pooled).min(), np.min(gap))


def gradient_check(seed, cfg, step=1e-3):
    """Largest relative error between analytic and central-difference gradients.

    Coordinates whose absolute error is at most 1e-6 count as exact.
    """
    rng = np.random.default_rng(seed)
    while True:
        params = random_params(cfg, int(rng.integers(2**31)), dtype=np.float64)
        x = rng.random((2, 1, cfg.input_h, cfg.input_w))
        # resample until no coordinate step can cross a kink
        if _kink_margin(params, x, cfg) > 50 * step:
            break
    labels = rng.integers(0, cfg.num_classes, size=2)
    _, grads = nn.loss_and_grad(params, x, labels, cfg)
    worst = 0.0
    for name in nn.PARAM_NAMES:
        flat = params[name].reshape(-1)
        g = grads[name].reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + step
            up, _ = nn.loss_and_grad(params, x, labels, cfg)
            flat[i] = old - step
            down, _ = nn.loss_and_grad(params, x, labels, cfg)
            flat[i] = old
            fd = (up - down) / (2 * step)
            diff = abs(fd - g[i])
            if diff > 1e-6:  # absolute floor
                worst = max(worst, diff / max(abs(fd), abs(g[i])))
    return worst


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_gradient_matches_finite_differences(seed):
    cfg = CnnConfig(8, 8, 2, 3, 1, "max", 2, 6)
    assert gradient_check(seed, cfg) < 1e-4


def test_gradient_check_with_stride():
    cfg = CnnConfig(9, 9, 2, 3, 2, "max", 2, 4)
    assert gradient_check(11, cfg) < 1e-4


def test_maxpool_routes_to_first_maximum():
    # a 1x1 kernel of weight 1 copies the image; the 2x2 window holds a tie
    cfg = CnnConfig(2, 2, 1, 1, 1, "max", 2, 2)
    params = {
        "conv_w": np.ones((1, 1, 1, 1)),
        "conv_b": np.zeros(1),
        "fc_w": np.array([[1.0], [0.0]]),
        "fc_b": np.zeros(2),
    }
    x = np.array([[[[0.2, 0.7], [0.7, 0.1]]]])
    _, grads = nn.loss_and_grad(params, x, np.array([1]), cfg)
    # only the first 0.7 (row-major) contributes to the kernel gradient
    p = np.exp(0.7) / (np.exp(0.7) + 1)
    assert grads["conv_w"][0, 0, 0, 0] == pytest.approx(p * 0.7)
    assert grads["conv_b"][0] == pytest.approx(p)


# --------------------------------------------------------------------- SGD


def _shard(cfg, n, seed=0):
    rng = np.random.default_rng(seed)
    return rng.random((n, 1, cfg.input_h, cfg.input_w)).astype(np.float32), rng.integers(0, cfg.num_classes, n)


def test_zero_learning_rate_leaves_params():
    cfg = small_cfg()
    params = nn.init_params(cfg, 1)
    x, y = _shard(cfg, 10)
    out = nn.sgd_epochs(params, x, y, cfg, TrainConfig(learning_rate=0.0, epochs=3, batch_size=4))
    for name in nn.PARAM_NAMES:
        np.testing.assert_array_equal(out[name], params[name])


def test_full_batch_step_equals_gradient_step():
    cfg = small_cfg()
    params = nn.init_params(cfg, 2)
    x, y = _shard(cfg, 9)
    out = nn.sgd_epochs(params, x, y, cfg, TrainConfig(0.05, 1, 9, seed=4))
    _, grads = nn.loss_and_grad(params, x, y, cfg)
    for name in nn.PARAM_NAMES:
        np.testing.assert_array_equal(out[name], params[name] - np.float32(0.05) * grads[name])


def test_training_reduces_loss():
    cfg = small_cfg()
    params = nn.init_params(cfg, 3)
    x, y = _shard(cfg, 12, seed=5)
    before, _ = nn.loss_and_grad(params, x, y, cfg)
    after, _ = nn.loss_and_grad(nn.sgd_epochs(params, x, y, cfg, TrainConfig(0.05, 50, 4, 1)), x, y, cfg)
    assert after < before


def test_sgd_does_not_mutate_input_and_is_deterministic():
    cfg = small_cfg()
    params = nn.init_params(cfg, 3)
    snapshot = {k: v.copy() for k, v in params.items()}
    x, y = _shard(cfg, 11)
    train = TrainConfig(0.1, 2, 4, 9)
    a = nn.dump_params(nn.sgd_epochs(params, x, y, cfg, train))
    b = nn.dump_params(nn.sgd_epochs(params, x, y, cfg, train))
    assert a == b
    for name in nn.PARAM_NAMES:
        np.testing.assert_array_equal(params[name], snapshot[name])
    assert a != nn.dump_params(nn.sgd_epochs(params, x, y, cfg, TrainConfig(0.1, 2, 4, 10)))


def test_sgd_rejects_empty_shard():
    cfg = small_cfg()
    with pytest.raises(InputError):
        nn.sgd_epochs(nn.init_params(cfg), np.zeros((0, 1, 10, 10)), np.zeros(0, int), cfg, TrainConfig())


# -------------------------------------------------------------------- FJWT


@given(seed=st.integers(0, 10_000))
def test_fjwt_round_trip(seed):
    cfg = small_cfg()
    params = random_params(cfg, seed)
    blob = nn.dump_params(params)
    back = nn.parse_params(blob, cfg)
    assert hashlib.sha256(nn.dump_params(back)).digest() == hashlib.sha256(blob).digest()
    for name in nn.PARAM_NAMES:
        np.testing.assert_array_equal(back[name], params[name])


def test_fjwt_layout():
    cfg = small_cfg(conv_filters=1, num_classes=2)
    blob = nn.dump_params(nn.zeros_like_params(cfg))
    assert blob[:4] == b"FJWT"
    assert int.from_bytes(blob[4:8], "little") == 1
    assert int.from_bytes(blob[8:12], "little") == 4
    name_len = int.from_bytes(blob[12:16], "little")
    assert blob[16 : 16 + name_len] == b"conv_w"
    assert blob[16 + name_len] == 4
    n_values = sum(int(np.prod(s)) for s in cfg.param_shapes().values())
    header = 12 + sum(4 + len(n) + 1 + 4 * len(s) for n, s in zip(nn.PARAM_NAMES, cfg.param_shapes().values()))
    assert len(blob) == header + 4 * n_values


def test_fjwt_file_round_trip(tmp_path):
    cfg = small_cfg()
    params = random_params(cfg, 1)
    nn.save_params(params, tmp_path / "w.fjwt")
    back = nn.load_params(tmp_path / "w.fjwt", cfg)
    assert nn.dump_params(back) == nn.dump_params(params)


def test_fjwt_bad_magic():
    blob = bytearray(nn.dump_params(nn.zeros_like_params(small_cfg())))
    blob[:4] = b"XJWT"
    with pytest.raises(FormatError) as err:
        nn.parse_params(bytes(blob))
    assert err.value.offset == 0


def test_fjwt_truncated_payload_names_tensor():
    blob = nn.dump_params(nn.zeros_like_params(small_cfg()))
    with pytest.raises(FormatError, match="fc_b"):
        nn.parse_params(blob[:-3])


def test_fjwt_trailing_bytes():
    blob = nn.dump_params(nn.zeros_like_params(small_cfg()))
    with pytest.raises(FormatError):
        nn.parse_params(blob + b"\0")


def test_fjwt_class_count_mismatch():
    five = nn.dump_params(nn.zeros_like_params(small_cfg(num_classes=5)))
    with pytest.raises(nn.ParamShapeError, match="fc_w"):
        nn.parse_params(five, small_cfg(num_classes=6))


def test_infer_config_round_trip_and_mismatch():
    cfg = small_cfg()
    params = random_params(cfg, 0)
    assert nn.infer_config(params, 10, 10) == cfg
    with pytest.raises(DimensionError, match="12x12"):
        nn.infer_config(params, 12, 12)
