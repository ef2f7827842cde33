import numpy as np
import pytest
from _grad import numeric_grad, rel_error

from wsloc import nn

TOL = 1e-4


def rng(seed=0):
    return np.random.default_rng(seed)


# -- convolution --------------------------------------------------------------


def conv_oracle(x, w, b):
    B, n, cin = x.shape
    cout, K, _ = w.shape
    left, _ = nn.same_padding(K)
    out = np.zeros((B, n, cout))
    for bb in range(B):
        for t in range(n):
            for o in range(cout):
                acc = b[o]
                for k in range(K):
                    src = t + k - left
                    if 0 <= src < n:
                        acc += w[o, k] @ x[bb, src]
                out[bb, t, o] = acc
    return out


def test_conv_identity_kernel():
    x = rng().standard_normal((2, 9, 1))
    w = np.zeros((1, 3, 1))
    w[0, 1, 0] = 1.0
    y, _ = nn.conv1d_forward(x, w, np.zeros(1))
    assert np.array_equal(y, x)


def test_conv_zero_weights():
    x = rng().standard_normal((1, 8, 3))
    y, _ = nn.conv1d_forward(x, np.zeros((4, 5, 3)), np.zeros(4))
    assert not y.any() and y.shape == (1, 8, 4)


@pytest.mark.parametrize("K", [1, 3, 4, 32])
def test_conv_matches_direct_sum(K):
    r = rng(K)
    x = r.standard_normal((1, 16 if K < 32 else 40, 2))
    w = r.standard_normal((3, K, 2))
    b = r.standard_normal(3)
    y, _ = nn.conv1d_forward(x, w, b)
    assert np.max(np.abs(y - conv_oracle(x, w, b))) < 1e-12


def test_conv_channel_mismatch():
    with pytest.raises(nn.ShapeError):
        nn.conv1d_forward(np.zeros((1, 4, 2)), np.zeros((1, 3, 3)), np.zeros(1))


@pytest.mark.parametrize("K", [1, 3, 4, 5])
def test_conv_gradients(K):
    r = rng(10 + K)
    x = r.standard_normal((2, 11, 3))
    w = r.standard_normal((4, K, 3))
    b = r.standard_normal(4)
    R = r.standard_normal((2, 11, 4))
    f = lambda: float((nn.conv1d_forward(x, w, b)[0] * R).sum())
    _, cache = nn.conv1d_forward(x, w, b)
    dx, dw, db = nn.conv1d_backward(R, cache)
    assert rel_error(dx, numeric_grad(f, x)) < TOL
    assert rel_error(dw, numeric_grad(f, w)) < TOL
    assert rel_error(db, numeric_grad(f, b)) < TOL


# -- batch norm ---------------------------------------------------------------


def test_batchnorm_standardised_input_is_unchanged():
    x = rng().standard_normal((4, 500, 2))
    x = (x - x.mean(axis=(0, 1))) / x.std(axis=(0, 1))
    y, _ = nn.batchnorm_forward(x, np.ones(2), np.zeros(2), np.zeros(2), np.ones(2), True)
    assert np.max(np.abs(y - x)) < 1e-4
    assert np.max(np.abs(y * np.sqrt(1 + nn.BN_EPS) - x)) < 1e-12


def test_batchnorm_constant_channel_gives_shift():
    x = np.full((2, 10, 1), 3.0)
    y, _ = nn.batchnorm_forward(x, np.ones(1), np.full(1, 0.5), np.zeros(1), np.ones(1), True)
    assert np.all(np.isfinite(y)) and np.allclose(y, 0.5)


def test_batchnorm_moments_and_running_stats():
    x = 3 + 2 * rng().standard_normal((8, 64, 3))
    rm, rv = np.zeros(3), np.ones(3)
    y, _ = nn.batchnorm_forward(x, np.ones(3), np.zeros(3), rm, rv, True)
    assert np.max(np.abs(y.mean(axis=(0, 1)))) < 1e-6
    assert np.max(np.abs(y.var(axis=(0, 1)) - 1)) < 1e-3  # eps shifts the variance slightly
    assert np.allclose(rm, 0.1 * x.mean(axis=(0, 1)))
    assert np.allclose(rv, 0.9 + 0.1 * x.var(axis=(0, 1)))


@pytest.mark.parametrize("train", [True, False])
def test_batchnorm_gradients(train):
    r = rng(5)
    x = r.standard_normal((3, 7, 2))
    g, b = r.standard_normal(2), r.standard_normal(2)
    rm, rv = r.standard_normal(2), 1 + r.random(2)
    R = r.standard_normal(x.shape)

    def f():
        return float((nn.batchnorm_forward(x, g, b, rm.copy(), rv.copy(), train)[0] * R).sum())

    _, cache = nn.batchnorm_forward(x, g, b, rm.copy(), rv.copy(), train)
    dx, dg, db = nn.batchnorm_backward(R, cache)
    assert rel_error(dx, numeric_grad(f, x)) < TOL
    assert rel_error(dg, numeric_grad(f, g)) < TOL
    assert rel_error(db, numeric_grad(f, b)) < TOL


# -- relu / dropout -------------------------------------------------------------


def test_relu_values_and_gradient():
    y, m = nn.relu_forward(np.array([-1.0, 0.0, 2.0]))
    assert y.tolist() == [0, 0, 2]
    assert nn.relu_backward(np.ones(3), m).tolist() == [0, 0, 1]
    y, m = nn.relu_forward(-np.ones(4))
    assert not y.any() and not nn.relu_backward(np.ones(4), m).any()


def test_relu_gradcheck_away_from_kink():
    x = rng(1).standard_normal((2, 20, 3))
    x[np.abs(x) < 1e-3] = 0.5
    R = rng(2).standard_normal(x.shape)
    f = lambda: float((nn.relu_forward(x)[0] * R).sum())
    _, m = nn.relu_forward(x)
    assert rel_error(nn.relu_backward(R, m), numeric_grad(f, x)) < TOL


def test_dropout_identity_cases():
    x = rng().standard_normal((2, 5, 3))
    assert nn.dropout_forward(x, 0.0, True, rng())[0] is x
    assert nn.dropout_forward(x, 0.5, False, rng())[0] is x


def test_dropout_statistics():
    x = np.ones((1, 1_000_000, 1))
    y, mask = nn.dropout_forward(x, 0.25, True, rng(7))
    assert abs((y == 0).mean() - 0.25) < 0.002
    assert abs(y.mean() - 1.0) < 0.005
    R = rng(3).standard_normal(x.shape)
    assert np.array_equal(nn.dropout_backward(R, mask), R * mask)


def test_dropout_rejects_bad_rate():
    with pytest.raises(ValueError):
        nn.dropout_forward(np.ones(3), 1.0, True, rng())


# -- pooling / upsampling / concat ------------------------------------------------


def test_maxpool_examples():
    y, _ = nn.maxpool2_forward(np.array([1.0, 3, 2, 5]).reshape(1, 4, 1))
    assert y.ravel().tolist() == [3, 5]
    y, _ = nn.maxpool2_forward(np.full((1, 6, 2), 4.0))
    assert y.shape == (1, 3, 2) and np.all(y == 4)


def test_maxpool_odd_length():
    with pytest.raises(nn.ShapeError):
        nn.maxpool2_forward(np.zeros((1, 5, 1)))


def test_maxpool_ties_route_to_earlier():
    _, sel = nn.maxpool2_forward(np.array([2.0, 2.0]).reshape(1, 2, 1))
    assert nn.maxpool2_backward(np.ones((1, 1, 1)), sel).ravel().tolist() == [1, 0]


def test_maxpool_gradcheck():
    x = rng(4).permutation(48).astype(float).reshape(2, 8, 3)  # distinct values, no ties
    R = rng(5).standard_normal((2, 4, 3))
    f = lambda: float((nn.maxpool2_forward(x)[0] * R).sum())
    _, sel = nn.maxpool2_forward(x)
    assert rel_error(nn.maxpool2_backward(R, sel), numeric_grad(f, x)) < TOL


def test_upsample_examples():
    x = np.array([1.0, 2.0]).reshape(1, 2, 1)
    assert nn.upsample_repeat(x, 2).ravel().tolist() == [1, 1, 2, 2]
    assert nn.upsample_repeat(x, 1) is x
    c = np.full((1, 8, 2), 1.5)
    assert np.array_equal(nn.upsample_repeat(nn.maxpool2_forward(c)[0], 2), c)


def test_upsample_gradcheck():
    x = rng(6).standard_normal((2, 3, 2))
    R = rng(7).standard_normal((2, 12, 2))
    f = lambda: float((nn.upsample_repeat(x, 4) * R).sum())
    assert rel_error(nn.upsample_repeat_backward(R, 4), numeric_grad(f, x)) < TOL


def test_concat_examples():
    a, b = np.zeros((1, 10, 32)), np.ones((1, 10, 32))
    assert nn.concat_channels([a, b]).shape == (1, 10, 64)
    assert np.array_equal(nn.concat_channels([a]), a)
    assert nn.concat_channels([a] * 5).shape[-1] == 160
    with pytest.raises(nn.ShapeError):
        nn.concat_channels([a, np.zeros((1, 9, 32))])


def test_concat_gradient_split():
    dy = rng().standard_normal((1, 4, 7))
    parts = nn.concat_channels_backward(dy, [3, 4])
    assert [p.shape[-1] for p in parts] == [3, 4]
    assert np.array_equal(np.concatenate(parts, axis=-1), dy)


# -- softmax / loss ---------------------------------------------------------------


def test_softmax_examples():
    assert np.allclose(nn.softmax_channels(np.zeros((1, 2))), 0.5)
    assert np.allclose(nn.softmax_channels(np.full((1, 3), 7.0)), 1 / 3)
    x = np.array([1.0, 2.0, 3.0])
    direct = np.exp(x) / np.exp(x).sum()
    assert np.max(np.abs(nn.softmax_channels(x) - direct)) < 1e-12


def test_softmax_rows_sum_to_one_for_large_inputs():
    x = rng().standard_normal((3, 50, 6)) * 500
    s = nn.softmax_channels(x)
    assert np.all(np.isfinite(s)) and np.max(np.abs(s.sum(-1) - 1)) < 1e-9


def test_softmax_gradcheck():
    x = rng(8).standard_normal((2, 5, 4))
    R = rng(9).standard_normal(x.shape)
    f = lambda: float((nn.softmax_channels(x) * R).sum())
    assert rel_error(nn.softmax_backward(R, nn.softmax_channels(x)), numeric_grad(f, x)) < TOL


def test_bce_examples():
    loss, _ = nn.bce_loss(np.array([1.0, 0.0]), np.array([1.0, 0.0]))
    assert loss <= 2 * 1.1e-7
    loss, _ = nn.bce_loss(np.array([0.5]), np.array([1.0]))
    assert abs(loss - np.log(2)) < 1e-12


def test_bce_gradcheck_absolute():
    r = rng(11)
    s = r.uniform(0.05, 0.95, 6)
    t = (r.random(6) > 0.5).astype(float)
    f = lambda: nn.bce_loss(s, t)[0]
    assert np.max(np.abs(nn.bce_loss(s, t)[1] - numeric_grad(f, s))) < 1e-6


# -- init / optimiser ---------------------------------------------------------------


def test_he_init_variance_and_determinism():
    w = nn.he_init((1_000_000,), 128, seed=0)
    assert abs(w.var() / (2 / 128) - 1) < 0.03
    assert np.array_equal(nn.he_init((5, 3), 9, seed=4), nn.he_init((5, 3), 9, seed=4))


def test_conv_layer_bias_starts_at_zero():
    layer = nn.Conv1D(2, 4, 3, rng(), np.float64)
    assert not layer.params["b"].any()


def test_adam_zero_gradient_leaves_params():
    p = {"w": np.array([1.0, -2.0])}
    nn.adam_step(p, {"w": np.zeros(2)}, nn.Adam())
    assert p["w"].tolist() == [1.0, -2.0]


def test_adam_first_step():
    p = {"w": np.array([0.3])}
    nn.adam_step(p, {"w": np.array([0.5])}, nn.Adam(lr=0.001))
    assert abs((p["w"][0] - 0.3) + 0.001) < 1e-9


def test_adam_constant_gradient_decreases_monotonically():
    p = {"w": np.array([1.0])}
    opt = nn.Adam()
    last = []
    for _ in range(200):
        nn.adam_step(p, {"w": np.array([0.2])}, opt)
        last.append(p["w"][0])
    assert np.all(np.diff(last) < 0)


def test_adam_shape_mismatch():
    with pytest.raises(nn.ShapeError):
        nn.Adam().step({"w": np.zeros(2)}, {"w": np.zeros(3)})
