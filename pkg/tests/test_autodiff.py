import math
import zlib

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from viewhall.autodiff import tensor as T
from viewhall.autodiff.gradcheck import check_gradients
from viewhall.autodiff.optim import Adam, AdamState, adam_step
from viewhall.autodiff.tensor import ConfigurationError, NonFiniteError, ShapeError, Tensor


def t64(rng, *shape, scale=1.0):
    return Tensor(rng.normal(size=shape) * scale, requires_grad=True, dtype=np.float64)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# -- matmul -----------------------------------------------------------------

def test_matmul_identity(rng):
    a = Tensor(rng.normal(size=(3, 4)))
    np.testing.assert_array_equal(T.matmul(a, Tensor(np.eye(4, dtype=np.float32))).data, a.data)


def test_matmul_hand_case():
    out = T.matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[1.0], [1.0]]))
    np.testing.assert_array_equal(out.data, [[3.0], [7.0]])


def test_matmul_grad_is_ones_times_bt(rng):
    a, b = t64(rng, 3, 4), t64(rng, 4, 2)
    T.matmul(a, b).sum().backward()
    np.testing.assert_allclose(a.grad, np.ones((3, 2)) @ b.data.T, rtol=1e-12)


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
        T.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))


# -- conv2d -----------------------------------------------------------------

def test_conv_identity_kernel(rng):
    x = Tensor(rng.normal(size=(2, 5, 6)))
    w = Tensor(np.eye(2, dtype=np.float32).reshape(2, 2, 1, 1))
    np.testing.assert_array_equal(T.conv2d(x, w).data, x.data)


def test_conv_hand_sum():
    x = Tensor([[[1.0, 2.0], [3.0, 4.0]]])
    w = Tensor(np.ones((1, 1, 2, 2)))
    np.testing.assert_array_equal(T.conv2d(x, w).data, [[[10.0]]])


def test_conv_is_cross_correlation():
    x = Tensor(np.arange(9.0).reshape(1, 3, 3))
    w = Tensor(np.array([[[[1.0, 0.0], [0.0, 0.0]]]]))
    # top-left tap picks x[i, j] without flipping
    np.testing.assert_array_equal(T.conv2d(x, w).data[0], [[0.0, 1.0], [3.0, 4.0]])


def test_conv_matches_naive_loops(rng):
    x = rng.normal(size=(2, 3, 7, 5))
    w = rng.normal(size=(4, 3, 3, 3))
    b = rng.normal(size=4)
    out = T.conv2d(Tensor(x), Tensor(w), Tensor(b), stride=2, pad=1).data
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    ref = np.zeros((2, 4, 4, 3))
    for n in range(2):
        for o in range(4):
            for i in range(4):
                for j in range(3):
                    ref[n, o, i, j] = np.sum(xp[n, :, 2 * i : 2 * i + 3, 2 * j : 2 * j + 3] * w[o]) + b[o]
    np.testing.assert_allclose(out, ref, rtol=1e-12, atol=1e-12)


def test_conv_non_integral_output_is_configuration_error():
    with pytest.raises(ConfigurationError):
        T.conv2d(Tensor(np.zeros((1, 4, 4))), Tensor(np.zeros((1, 1, 3, 3))), stride=2, pad=0)


def test_conv_transpose_is_adjoint_of_conv(rng):
    x = rng.normal(size=(2, 3, 8, 6))
    y = rng.normal(size=(2, 5, 4, 3))
    w = rng.normal(size=(5, 3, 4, 4))
    conv = T.conv2d(Tensor(x), Tensor(w), stride=2, pad=1).data
    # the same 5×3 kernel read as (C_in=5, C_out=3) for the transpose
    tconv = T.conv_transpose2d(Tensor(y), Tensor(w), stride=2, pad=1).data
    assert np.isclose(np.sum(conv * y), np.sum(x * tconv), rtol=1e-10)


# -- finite differences, every differentiable op -------------------------------

def _relu_safe(rng, *shape):
    x = rng.normal(size=shape)
    x[np.abs(x) < 1e-2] += 0.05
    return Tensor(x, requires_grad=True, dtype=np.float64)


OPS = {
    "add": lambda rng: ([t64(rng, 3, 4), t64(rng, 4)], lambda a, b: ((a + b) * (a + b)).sum()),
    "sub": lambda rng: ([t64(rng, 3, 4), t64(rng, 3, 1)], lambda a, b: ((a - b) * a).sum()),
    "mul": lambda rng: ([t64(rng, 2, 3), t64(rng, 2, 3)], lambda a, b: (a * b).sum()),
    "div": lambda rng: ([t64(rng, 2, 3), Tensor(rng.uniform(1, 2, (2, 3)), True, np.float64)],
                        lambda a, b: (a / b).sum()),
    "matmul": lambda rng: ([t64(rng, 3, 4), t64(rng, 4, 2)], lambda a, b: (T.matmul(a, b) ** 2).sum()),
    "bmm": lambda rng: ([t64(rng, 2, 3, 4), t64(rng, 2, 4, 5)], lambda a, b: (T.matmul(a, b) ** 2).sum()),
    "exp_log": lambda rng: ([Tensor(rng.uniform(0.5, 2, (3, 3)), True, np.float64)],
                            lambda a: (T.log(a) * T.exp(a)).sum()),
    "softmax": lambda rng: ([t64(rng, 3, 5), t64(rng, 3, 5)], lambda a, w: (T.softmax(a, axis=-1) * w).sum()),
    "softmax_axis0": lambda rng: ([t64(rng, 4, 3), t64(rng, 4, 3)], lambda a, w: (T.softmax(a, axis=0) * w).sum()),
    "log_softmax": lambda rng: ([t64(rng, 3, 5), t64(rng, 3, 5)], lambda a, w: (T.log_softmax(a, 1) * w).sum()),
    "layernorm": lambda rng: ([t64(rng, 2, 4, 3, 3), t64(rng, 4), t64(rng, 4), t64(rng, 2, 4, 3, 3)],
                              lambda x, g, b, w: (T.layernorm(x, g, b, axis=1) * w).sum()),
    "leaky_relu": lambda rng: ([_relu_safe(rng, 4, 5), t64(rng, 4, 5)],
                               lambda x, w: (T.leaky_relu(x, 0.2) * w).sum()),
    "clamp": lambda rng: ([Tensor(rng.uniform(0.05, 0.95, (4, 4)), True, np.float64), t64(rng, 4, 4)],
                          lambda x, w: (T.clamp(x) * w).sum()),
    "reshape_transpose": lambda rng: ([t64(rng, 2, 3, 4), t64(rng, 4, 6)],
                                      lambda x, w: (T.transpose(T.reshape(x, (6, 4)), (1, 0)) * w).sum()),
    "concat": lambda rng: ([t64(rng, 2, 3), t64(rng, 2, 2), t64(rng, 2, 5)],
                           lambda a, b, w: (T.concat([a, b], axis=1) * w).sum()),
    "mean": lambda rng: ([t64(rng, 3, 4, 2)], lambda x: (T.mean(x * x, axis=(0, 2)) ** 2).sum()),
    "conv2d": lambda rng: ([t64(rng, 2, 3, 5, 5), t64(rng, 4, 3, 3, 3), t64(rng, 4), t64(rng, 2, 4, 3, 3)],
                           lambda x, w, b, v: (T.conv2d(x, w, b, stride=2, pad=1) * v).sum()),
    "conv2d_k4": lambda rng: ([t64(rng, 1, 2, 8, 8), t64(rng, 3, 2, 4, 4), t64(rng, 1, 3, 4, 4)],
                              lambda x, w, v: (T.conv2d(x, w, None, stride=2, pad=1) * v).sum()),
    "conv_transpose2d": lambda rng: ([t64(rng, 2, 3, 3, 4), t64(rng, 3, 2, 4, 4), t64(rng, 2),
                                      t64(rng, 2, 2, 6, 8)],
                                     lambda x, w, b, v: (T.conv_transpose2d(x, w, b, 2, 1) * v).sum()),
    "l1_loss": lambda rng: ([t64(rng, 3, 4), Tensor(rng.normal(size=(3, 4)) + 3.0, True, np.float64)],
                            lambda a, b: T.l1_loss(a, b)),
    "soft_cross_entropy": lambda rng: ([t64(rng, 2, 5, 4)],
                                       lambda z: T.soft_cross_entropy(_soft_target(2, 5, 4), z, axis=-1)),
    "cross_entropy": lambda rng: ([t64(rng, 2, 4, 3, 3)],
                                  lambda z: T.cross_entropy(np.arange(18).reshape(2, 3, 3) % 4, z, axis=1)),
}


def _soft_target(*shape):
    r = np.random.default_rng(7).uniform(0.1, 1.0, size=shape)
    return r / r.sum(axis=-1, keepdims=True)


@pytest.mark.parametrize("name", sorted(OPS))
@pytest.mark.parametrize("trial", range(5))
def test_op_gradients_match_finite_differences(name, trial):
    rng = np.random.default_rng([trial, zlib.crc32(name.encode())])
    with T.precision(np.float64):
        inputs, fn = OPS[name](rng)
        err = check_gradients(lambda: fn(*inputs), inputs, step=1e-4)
    assert err < 1e-4, f"{name}: relative error {err:.2e}"


# -- softmax / layernorm / activations / losses ---------------------------

def test_softmax_cases():
    np.testing.assert_allclose(T.softmax(Tensor(np.zeros(4))).data, [0.25] * 4)
    np.testing.assert_allclose(T.softmax(Tensor(np.array([0.0, math.log(3.0)]))).data, [0.25, 0.75], rtol=1e-6)
    x = np.random.default_rng(0).normal(size=(3, 7))
    np.testing.assert_allclose(T.softmax(Tensor(x + 123.0)).data, T.softmax(Tensor(x)).data, rtol=1e-5)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 6)),
              elements=st.floats(-500, 500, allow_nan=False)))
def test_softmax_sums_to_one(x):
    s = T.softmax(Tensor(x), axis=-1).data
    assert np.all(s >= 0)
    np.testing.assert_allclose(s.sum(axis=-1), 1.0, atol=1e-6)


def test_layernorm_constant_input_gives_beta():
    beta = Tensor(np.array([0.5, -1.0, 2.0]))
    out = T.layernorm(Tensor(np.full((4, 3), 7.0)), Tensor(np.ones(3) * 3.0), beta, axis=-1)
    np.testing.assert_allclose(out.data, np.broadcast_to(beta.data, (4, 3)), atol=1e-6)


def test_layernorm_moments():
    rng = np.random.default_rng(3)
    gamma, beta = rng.uniform(0.5, 2.0, 64), rng.normal(size=64)
    x = rng.normal(size=(200, 64)) * 5 + 2
    out = T.layernorm(Tensor(x), Tensor(gamma), Tensor(beta), axis=-1).data
    normed = (out - beta) / gamma
    np.testing.assert_allclose(normed.mean(axis=1), 0.0, atol=1e-6)
    np.testing.assert_allclose(normed.var(axis=1), 1.0, rtol=1e-3)
    assert np.isclose(out.mean(), beta.mean(), atol=0.05)


def test_leaky_relu_branches():
    assert T.leaky_relu(Tensor(np.array(5.0)), 0.2).item() == 5.0
    assert np.isclose(T.leaky_relu(Tensor(np.array(-1.0)), 0.2).item(), -0.2)
    x = Tensor(np.array([-2.0, 3.0]), requires_grad=True)
    T.leaky_relu(x, 0.2).sum().backward()
    np.testing.assert_allclose(x.grad, [0.2, 1.0])


def test_l1_loss_cases():
    a = np.random.default_rng(0).normal(size=(3, 4))
    assert T.l1_loss(Tensor(a), a).item() == 0.0
    assert np.isclose(T.l1_loss(Tensor(a + 0.5), a).item(), 0.5)
    p = Tensor(a.copy(), requires_grad=True)
    T.l1_loss(p, a).backward()
    np.testing.assert_array_equal(p.grad, 0.0)
    with pytest.raises(ShapeError):
        T.l1_loss(p, a[:2])


def test_soft_cross_entropy_cases():
    rng = np.random.default_rng(5)
    logits = rng.normal(size=(3, 3, 4))
    labels = rng.integers(0, 4, size=(3, 3))
    onehot = np.eye(4)[labels]
    ls = logits - np.log(np.exp(logits).sum(-1, keepdims=True))
    expected = -np.take_along_axis(ls, labels[..., None], -1).mean()
    assert np.isclose(T.soft_cross_entropy(onehot, Tensor(logits)).item(), expected, rtol=1e-6)
    uniform = np.full((2, 2, 4), 0.25)
    assert np.isclose(T.soft_cross_entropy(uniform, Tensor(np.zeros((2, 2, 4)))).item(), math.log(4), rtol=1e-6)
    with pytest.raises(ValueError):
        T.soft_cross_entropy(np.full((2, 2, 4), 0.3), Tensor(np.zeros((2, 2, 4))))


def test_soft_cross_entropy_gibbs_inequality():
    rng = np.random.default_rng(11)
    for _ in range(20):
        t = rng.dirichlet(np.ones(5), size=(4,))
        entropy = -(t * np.log(t)).sum(-1).mean()
        logits = rng.normal(size=(4, 5)) * 2
        assert T.soft_cross_entropy(t, Tensor(logits, dtype=np.float64)).item() >= entropy - 1e-12
        matched = T.soft_cross_entropy(t, Tensor(np.log(t), dtype=np.float64)).item()
        assert np.isclose(matched, entropy, rtol=1e-10)


def test_hard_cross_entropy_equals_soft_with_onehot():
    rng = np.random.default_rng(9)
    logits = rng.normal(size=(2, 6, 5, 7))
    labels = rng.integers(0, 6, size=(2, 5, 7))
    onehot = np.moveaxis(np.eye(6)[labels], -1, 1)
    hard = T.cross_entropy(labels, Tensor(logits, dtype=np.float64), axis=1).item()
    soft = T.soft_cross_entropy(onehot, Tensor(logits, dtype=np.float64), axis=1).item()
    assert abs(hard - soft) < 1e-6


# -- backward semantics ----------------------------------------------------

def test_square_gradient():
    x = Tensor(np.array(3.0), requires_grad=True)
    (x * x).backward()
    assert x.grad == 6.0


def test_sum_of_softmax_has_zero_gradient():
    x = Tensor(np.random.default_rng(0).normal(size=6), requires_grad=True, dtype=np.float64)
    T.softmax(x).sum().backward()
    np.testing.assert_allclose(x.grad, 0.0, atol=1e-12)


@pytest.mark.parametrize("n", [1, 2, 5])
def test_reuse_accumulates_single_use_gradients(n):
    rng = np.random.default_rng(n)
    w_data = rng.normal(size=(3, 3))
    xs = [rng.normal(size=(2, 3)) for _ in range(n)]

    shared = Tensor(w_data.copy(), requires_grad=True, dtype=np.float64)
    total = None
    for x in xs:
        term = T.leaky_relu(T.matmul(Tensor(x), shared)).sum()
        total = term if total is None else total + term
    total.backward()

    expected = np.zeros_like(w_data)
    for x in xs:
        single = Tensor(w_data.copy(), requires_grad=True, dtype=np.float64)
        T.leaky_relu(T.matmul(Tensor(x), single)).sum().backward()
        expected += single.grad
    np.testing.assert_allclose(shared.grad, expected, rtol=1e-12)


def test_two_layer_network_gradient():
    rng = np.random.default_rng(21)
    with T.precision(np.float64):
        x = Tensor(rng.normal(size=(5, 4)))
        w1, b1 = t64(rng, 4, 6), t64(rng, 6)
        w2 = t64(rng, 6, 3)
        target = rng.normal(size=(5, 3))

        def loss():
            h = T.leaky_relu(T.matmul(x, w1) + b1, 0.2)
            return T.l1_loss(T.matmul(h, w2), target) + (T.softmax(T.matmul(h, w2)) * target).sum()

        assert check_gradients(loss, [w1, b1, w2]) < 1e-3


def test_non_finite_is_an_error():
    with pytest.raises(NonFiniteError):
        T.log(Tensor(np.array([0.0, 1.0])))


def test_backward_requires_scalar():
    with pytest.raises(ShapeError):
        Tensor(np.ones(3), requires_grad=True).exp().backward()


def test_ops_are_deterministic():
    rng = np.random.default_rng(2)
    x, w = rng.normal(size=(2, 3, 8, 8)).astype(np.float32), rng.normal(size=(4, 3, 3, 3)).astype(np.float32)
    a = T.conv2d(Tensor(x), Tensor(w), pad=1).data
    b = T.conv2d(Tensor(x), Tensor(w), pad=1).data
    assert a.tobytes() == b.tobytes()


def test_no_grad_builds_no_graph():
    p = Tensor(np.ones(3), requires_grad=True)
    with T.no_grad():
        y = p * 2.0
    assert not y.requires_grad and y._parents == ()


# -- Adam -------------------------------------------------------------------

def test_adam_first_step_moves_by_lr():
    p = {"w": np.array([1.0])}
    adam_step(p, {"w": np.array([2.0])}, AdamState(lr=1e-4))
    assert np.isclose(p["w"][0], 1.0 - 1e-4, rtol=0, atol=1e-12)


def test_adam_zero_gradient_is_fixed_point():
    p = {"w": np.array([0.3, -0.7])}
    state = AdamState()
    for _ in range(5):
        adam_step(p, {"w": np.zeros(2)}, state)
    np.testing.assert_array_equal(p["w"], [0.3, -0.7])
    assert state.t == 5


def test_adam_matches_hand_recurrence():
    g1, g2 = np.array([0.5, -1.5]), np.array([-0.25, 2.0])
    lr, b1, b2, eps = 1e-3, 0.9, 0.999, 1e-8
    p = {"w": np.array([0.1, 0.2])}
    state = AdamState(lr=lr, beta1=b1, beta2=b2, eps=eps)
    adam_step(p, {"w": g1}, state)
    adam_step(p, {"w": g2}, state)

    w = np.array([0.1, 0.2])
    m = np.zeros(2)
    v = np.zeros(2)
    for t, g in enumerate((g1, g2), start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g ** 2
        w = w - lr * (m / (1 - b1 ** t)) / (np.sqrt(v / (1 - b2 ** t)) + eps)
    np.testing.assert_allclose(p["w"], w, rtol=0, atol=1e-12)


def test_adam_optimizer_descends():
    w = Tensor(np.array([3.0, -2.0]), requires_grad=True, dtype=np.float64)
    opt = Adam({"w": w}, lr=0.1)
    for _ in range(200):
        opt.zero_grad()
        (w * w).sum().backward()
        opt.step()
    assert np.all(np.abs(w.data) < 0.05)
