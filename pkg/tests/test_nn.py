import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from deepcluster_lab.errors import ConfigError, NonFiniteError
from deepcluster_lab.gradcheck import check_gradients, random_small_network, relative_error
from deepcluster_lab.nn import (Architecture, BatchNorm2d, BlockSpec, Conv2d, MaxPool2d, NetworkConfig, OptimizerState,
                                backward, build_network, forward, parameter_digest, reset_head,
                                softmax_cross_entropy, sgd_step)


def lenet(**kw):
    base = dict(architecture=Architecture.LENET5, input_channels=1, input_size=28, num_classes=5)
    return NetworkConfig(**{**base, **kw})


def alexnet(**kw):
    base = dict(architecture=Architecture.MINI_ALEXNET, input_channels=3, input_size=32, use_sobel=True,
                num_classes=10)
    return NetworkConfig(**{**base, **kw})


def naive_conv(x, w, pad):
    # direct sliding-window dot products
    x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    n, c, h, wd = x.shape
    o, _, k, _ = w.shape
    out = np.zeros((n, o, h - k + 1, wd - k + 1))
    for b in range(n):
        for f in range(o):
            for i in range(h - k + 1):
                for j in range(wd - k + 1):
                    out[b, f, i, j] = np.sum(x[b, :, i:i + k, j:j + k] * w[f])
    return out


# -- architecture -------------------------------------------------------------

def test_lenet_feature_dim():
    net = build_network(lenet(), seed=0)
    assert net.feature_dim == 16 * 4 * 4
    assert net.feature_layer == "conv2"
    out = net.eval().forward(np.zeros((2, 1, 28, 28)), upto="features")
    assert out.shape == (2, 256)


def test_mini_alexnet_feature_dim_and_filters():
    cfg = alexnet()
    net = build_network(cfg, seed=0)
    assert [s.filters for s in cfg.block_specs()] == [48, 126, 192, 192, 128]
    assert cfg.in_channels == 2
    assert net.feature_dim == 128 * 4 * 4 == 2048
    assert net.head.out_features == 10


def test_same_seed_bitwise_identical():
    a = build_network(lenet(), seed=7).state_dict()
    b = build_network(lenet(), seed=7).state_dict()
    c = build_network(lenet(), seed=8).state_dict()
    assert all(np.array_equal(a[k], b[k]) for k in a)
    assert not np.array_equal(a["conv1.conv.weight"], c["conv1.conv.weight"])


def test_filters_independent_of_head_width():
    a = build_network(lenet(num_classes=5), seed=3)
    b = build_network(lenet(num_classes=200), seed=3)
    assert parameter_digest(a) == parameter_digest(b)


def test_bad_pool_schedule_rejected():
    with pytest.raises(ConfigError):
        build_network(lenet(input_size=27), seed=0)
    with pytest.raises(ConfigError):
        build_network(alexnet(filters=(48, 126, 192)), seed=0)


def test_kaiming_uniform_bounds():
    net = build_network(lenet(), seed=0)
    w = net.parameters()["conv2.conv.weight"]
    bound = math.sqrt(6 / (6 * 25))
    assert np.abs(w).max() <= bound
    assert np.abs(w).max() > 0.9 * bound
    assert not np.any(net.parameters()["head.bias"])


# -- forward ------------------------------------------------------------------

def test_zero_input_gives_zero_features():
    net = build_network(lenet(use_batchnorm=False), seed=1).eval()
    assert not np.any(net.forward(np.zeros((3, 1, 28, 28)), upto="features"))


def test_identity_1x1_conv():
    conv = Conv2d(3, 3, 1, 0, np.random.default_rng(0), np.float64)
    conv.params["weight"][:] = np.eye(3)[:, :, None, None]
    x = np.random.default_rng(1).normal(size=(2, 3, 5, 5))
    assert np.array_equal(conv.forward(x, False), x)


def test_conv_hand_summed():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(1, 1, 5, 5))
    k = np.array([[1.0, 0.0, -1.0], [2.0, 0.0, -2.0], [1.0, 0.0, -1.0]])
    conv = Conv2d(1, 1, 3, 0, rng, np.float64, bias=False)
    conv.params["weight"][0, 0] = k
    out = conv.forward(x, False)
    assert out.shape == (1, 1, 3, 3)
    top_left = sum(x[0, 0, i, j] * k[i, j] for i in range(3) for j in range(3))
    assert out[0, 0, 0, 0] == pytest.approx(top_left, abs=1e-12)


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 3), st.integers(1, 4), st.sampled_from([1, 3, 5]), st.integers(0, 2), st.integers(0, 10**6))
def test_conv_matches_naive_oracle(cin, cout, k, pad, seed):
    rng = np.random.default_rng(seed)
    size = k + 3
    conv = Conv2d(cin, cout, k, pad, rng, np.float64)
    conv.params["bias"] = rng.normal(size=cout)
    x = rng.normal(size=(2, cin, size, size))
    expected = naive_conv(x, conv.params["weight"], pad) + conv.params["bias"][None, :, None, None]
    np.testing.assert_allclose(conv.forward(x, False), expected, rtol=1e-12, atol=1e-12)


def test_maxpool_and_gradient_routing():
    x = np.array([[[[1.0, 5.0, 2.0, 0.0], [3.0, 4.0, 9.0, 1.0], [0.0, 0.0, 1.0, 1.0], [7.0, 0.0, 1.0, 1.0]]]])
    pool = MaxPool2d()
    out = pool.forward(x, True)
    assert out[0, 0].tolist() == [[5.0, 9.0], [7.0, 1.0]]
    dx = pool.backward(np.ones_like(out))
    assert dx.sum() == 4
    assert dx[0, 0, 0, 1] == dx[0, 0, 1, 2] == dx[0, 0, 3, 0] == 1
    assert dx[0, 0, 2, 2] == 1  # first of the tied maxima


def test_forward_rejects_bad_shape_and_nonfinite():
    net = build_network(lenet(), seed=0)
    with pytest.raises(ValueError):
        net.forward(np.zeros((1, 3, 28, 28)))
    x = np.zeros((1, 1, 28, 28))
    x[0, 0, 3, 3] = np.nan
    with pytest.raises(NonFiniteError):
        net.forward(x)


def test_unknown_layer():
    net = build_network(lenet(), seed=0)
    assert net.resolve_layer("relu2") == "conv2"
    with pytest.raises(KeyError):
        net.forward(np.zeros((1, 1, 28, 28)), upto="conv5")


# -- batchnorm ----------------------------------------------------------------

def test_batchnorm_train_statistics():
    rng = np.random.default_rng(0)
    x = rng.normal(3.0, 2.5, size=(16, 4, 6, 6))
    bn = BatchNorm2d(4, np.float64)
    xhat = bn.normalize(x, training=True)
    assert np.abs(xhat.mean(axis=(0, 2, 3))).max() < 1e-5
    assert np.abs(xhat.var(axis=(0, 2, 3)) - 1).max() < 1e-4


def test_batchnorm_eval_uses_running_stats_only():
    bn = BatchNorm2d(2, np.float64)
    bn.buffers["running_mean"][:] = [1.0, -1.0]
    bn.buffers["running_var"][:] = [4.0, 9.0]
    x = np.ones((1, 2, 2, 2))
    out = bn.forward(x, training=False)
    np.testing.assert_allclose(out[0, 0], 0.0)
    np.testing.assert_allclose(out[0, 1], 2.0 / math.sqrt(9.0 + 1e-5))
    # output of a sample does not depend on the rest of the batch
    y = np.concatenate([x, 100 * np.ones((1, 2, 2, 2))])
    np.testing.assert_array_equal(bn.forward(y, training=False)[:1], out)


def test_batchnorm_running_update_uses_momentum():
    bn = BatchNorm2d(1, np.float64)
    x = np.arange(8.0).reshape(2, 1, 2, 2)
    bn.normalize(x, training=True)
    assert bn.buffers["running_mean"][0] == pytest.approx(0.1 * 3.5)
    assert bn.buffers["running_var"][0] == pytest.approx(0.9 + 0.1 * np.var(np.arange(8.0), ddof=1))


# -- loss and gradients --------------------------------------------------------

def test_uniform_logits_loss_is_log_k():
    for k in (2, 5, 200):
        loss, _ = softmax_cross_entropy(np.zeros((3, k)), np.array([0, 1, 1]))
        assert loss == pytest.approx(math.log(k))


def test_target_out_of_range():
    with pytest.raises(ValueError):
        softmax_cross_entropy(np.zeros((2, 3)), np.array([0, 3]))


def test_identical_batch_gradient_equals_single():
    net = build_network(lenet(use_batchnorm=False), seed=2, dtype=np.float64).train()
    x = np.random.default_rng(0).random((1, 1, 28, 28))
    _, g1 = backward(net, net.forward(x), np.array([3]))
    g1 = {k: v.copy() for k, v in g1.items()}
    _, g4 = backward(net, net.forward(np.repeat(x, 4, axis=0)), np.array([3, 3, 3, 3]))
    for k in g1:
        np.testing.assert_allclose(g4[k], g1[k], rtol=1e-10, atol=1e-14)


@pytest.mark.parametrize("seed", range(8))
def test_gradients_match_finite_differences(seed):
    cfg, x, y = random_small_network(seed)
    report = check_gradients(build_network(cfg, seed, dtype=np.float64), x, y)
    assert report.max_rel_error < 1e-3
    assert report.skipped_fraction < 0.5


def test_lenet_gradients_float32_tensorwise():
    # 32-bit engine: elementwise error is dominated by accumulation order,
    # but every tensor matches the float64 oracle closely in norm.
    cfg, x, y = random_small_network(5)
    report = check_gradients(build_network(cfg, 5), x, y)
    assert report.max_tensor_rel_error < 1e-3


def test_relative_error_floor():
    assert relative_error(0.0, 0.0) == 0
    assert relative_error(1e-9, 0.0) == pytest.approx(1e-5)


# -- optimiser ------------------------------------------------------------------

def test_sgd_noop_without_gradient():
    w = {"w": np.array([1.5, -2.0])}
    st_ = OptimizerState.for_params(w, 0.1)
    sgd_step(w, {"w": np.zeros(2)}, st_)
    assert w["w"].tolist() == [1.5, -2.0]


def test_sgd_weight_decay_example():
    w = {"w": np.array([1.0])}
    st_ = OptimizerState.for_params(w, 0.1, momentum=0.0, weight_decay=0.001)
    sgd_step(w, {"w": np.zeros(1)}, st_)
    assert w["w"][0] == pytest.approx(0.9999, abs=1e-15)


def test_sgd_momentum_two_steps():
    w = {"w": np.array([0.0])}
    st_ = OptimizerState.for_params(w, 0.1, momentum=0.5)
    sgd_step(w, {"w": np.ones(1)}, st_)
    assert w["w"][0] == pytest.approx(-0.1)
    sgd_step(w, {"w": np.ones(1)}, st_)
    assert w["w"][0] == pytest.approx(-0.25)


def test_sgd_shape_mismatch_and_validation():
    w = {"w": np.zeros(3)}
    st_ = OptimizerState.for_params(w, 0.1)
    with pytest.raises(ValueError):
        sgd_step(w, {"w": np.zeros(2)}, st_)
    with pytest.raises(ConfigError):
        OptimizerState(0.0)
    with pytest.raises(ConfigError):
        OptimizerState(0.1, momentum=1.0)
    with pytest.raises(ConfigError):
        OptimizerState(0.1, weight_decay=-1)


def test_velocity_mirrors_parameter_shapes():
    net = build_network(lenet(), seed=0)
    st_ = OptimizerState.for_params(net.parameters(), 0.1, 0.9)
    assert {k: v.shape for k, v in st_.velocity.items()} == {k: v.shape for k, v in net.parameters().items()}


def test_loss_decreases_on_fixed_batch():
    rng = np.random.default_rng(0)
    net = build_network(lenet(), seed=0).train()
    x = rng.random((64, 1, 28, 28)).astype(np.float32)
    y = rng.integers(0, 5, 64)
    opt = OptimizerState.for_params(net.parameters(), 0.01)
    losses = []
    for _ in range(21):
        loss, grads = backward(net, net.forward(x), y)
        losses.append(loss)
        sgd_step(net.parameters(), grads, opt)
    decreases = sum(b < a for a, b in zip(losses, losses[1:]))
    assert decreases >= 18


def test_training_deterministic():
    def train(seed):
        net = build_network(lenet(), seed=seed).train()
        x = np.random.default_rng(1).random((8, 1, 28, 28))
        y = np.arange(8) % 5
        opt = OptimizerState.for_params(net.parameters(), 0.1, 0.9, 0.001)
        for _ in range(3):
            _, g = backward(net, net.forward(x), y)
            sgd_step(net.parameters(), g, opt)
        return parameter_digest(net, include_head=True)
    assert train(4) == train(4)


# -- head reset -----------------------------------------------------------------

def test_reset_head_isolation():
    net = build_network(lenet(), seed=0).eval()
    x = np.random.default_rng(0).random((4, 1, 28, 28))
    feats = net.forward(x, upto="features")
    digest = parameter_digest(net)
    reset_head(net, 5, seed=99)
    assert parameter_digest(net) == digest
    assert np.array_equal(net.forward(x, upto="features"), feats)
    reset_head(net, 7, seed=1)
    assert net.forward(x).shape == (4, 7)
    assert net.config.num_classes == 7
    with pytest.raises(ConfigError):
        reset_head(net, 1, seed=0)


def test_custom_blocks_and_functional_forward():
    cfg = NetworkConfig(Architecture.CUSTOM, input_channels=2, input_size=8, num_classes=3,
                        blocks=(BlockSpec(4, 3, 1, True), BlockSpec(2, 1, 0, False)))
    net = build_network(cfg, 0)
    assert forward(net, np.zeros((1, 2, 8, 8)), "features").shape == (1, 2 * 4 * 4)
