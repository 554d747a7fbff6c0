import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sgi import diffcore as dc
from sgi.diffcore import ContractError, DimensionError, Tensor

GRAD_TOL = 1e-4


def param(rng, *shape):
    return Tensor(rng.standard_normal(shape), requires_grad=True)


# affine


def test_affine_identity():
    eye = np.eye(2)
    out = dc.affine(Tensor(eye), Tensor(eye), Tensor(np.zeros(2)))
    np.testing.assert_array_equal(out.data, eye)


def test_affine_hand_arithmetic():
    out = dc.affine(Tensor([[1.0, 2.0]]), Tensor([[1.0], [1.0]]), Tensor([3.0]))
    assert out.data.tolist() == [[6.0]]


def test_affine_shape_mismatch():
    with pytest.raises(DimensionError):
        dc.affine(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 2))), Tensor(np.zeros(2)))


@pytest.mark.parametrize("seed", range(5))
def test_affine_gradient(seed):
    rng = np.random.default_rng(seed)
    x, w, b = param(rng, 3, 4), param(rng, 4, 2), param(rng, 2)
    weights = rng.standard_normal((3, 2))
    for t in (x, w, b):
        assert dc.grad_check(lambda: dc.weighted_sum(dc.affine(x, w, b), weights), t) < GRAD_TOL


# conv2d


def test_conv_unit_kernel_is_identity():
    x = np.random.default_rng(0).random((2, 1, 5, 4))
    out = dc.conv2d(Tensor(x), Tensor(np.ones((1, 1, 1, 1))))
    np.testing.assert_array_equal(out.data, x)


def test_conv_all_ones():
    out = dc.conv2d(Tensor(np.ones((1, 1, 3, 3))), Tensor(np.ones((1, 1, 2, 2))))
    np.testing.assert_array_equal(out.data, np.full((1, 1, 2, 2), 4.0))


def test_conv_matches_direct_loop():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((2, 3, 9, 8))
    w = rng.standard_normal((4, 3, 3, 3))
    b = rng.standard_normal(4)
    out = dc.conv2d(Tensor(x), Tensor(w), Tensor(b), stride=2).data
    assert out.shape == (2, 4, 4, 3)
    ref = np.zeros_like(out)
    for n in range(2):
        for o in range(4):
            for i in range(4):
                for j in range(3):
                    ref[n, o, i, j] = (x[n, :, 2 * i:2 * i + 3, 2 * j:2 * j + 3] * w[o]).sum() + b[o]
    np.testing.assert_allclose(out, ref, rtol=1e-12, atol=1e-12)


@pytest.mark.parametrize("size,kernel,stride,expected", [(40, 4, 2, 19), (19, 3, 2, 9), (9, 3, 1, 7), (7, 7, 3, 1)])
def test_conv_output_size(size, kernel, stride, expected):
    assert dc.conv_output_size(size, kernel, stride) == expected


def test_conv_kernel_larger_than_input():
    with pytest.raises(DimensionError):
        dc.conv2d(Tensor(np.ones((1, 1, 2, 2))), Tensor(np.ones((1, 1, 3, 3))))


@pytest.mark.parametrize("stride", [1, 2])
def test_conv_gradient(stride):
    rng = np.random.default_rng(stride)
    x, w, b = param(rng, 2, 3, 7, 6), param(rng, 4, 3, 3, 3), param(rng, 4)
    for t in (x, w, b):
        assert dc.grad_check(lambda: dc.total(dc.square(dc.conv2d(x, w, b, stride))), t) < GRAD_TOL


# cosine


def test_cosine_basic_values():
    v = Tensor(np.array([3.0, -1.0, 2.0]))
    assert dc.cosine_similarity(v, v).item() == pytest.approx(1.0, abs=1e-15)
    assert dc.cosine_similarity(Tensor([1.0, 0.0]), Tensor([0.0, 1.0])).item() == 0.0


def test_cosine_zero_policy():
    z, v = Tensor(np.zeros(3), requires_grad=True), Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ZeroDivisionError):
        dc.cosine_similarity(z, v)
    out = dc.cosine_similarity(z, v, on_zero="zero")
    assert out.item() == 0.0
    out.backward()
    np.testing.assert_array_equal(z.grad, 0.0)
    np.testing.assert_array_equal(v.grad, 0.0)


@pytest.mark.parametrize("seed", range(5))
def test_cosine_gradient(seed):
    rng = np.random.default_rng(seed)
    a, b = param(rng, 3, 6), param(rng, 3, 6)
    w = rng.standard_normal(3)
    for t in (a, b):
        assert dc.grad_check(lambda: dc.weighted_sum(dc.cosine_similarity(a, b), w), t) < GRAD_TOL


vectors = st.lists(st.floats(-1e6, 1e6, allow_nan=False), min_size=2, max_size=8)


@given(vectors, vectors)
def test_cosine_bounded(a, b):
    n = min(len(a), len(b))
    a, b = np.array(a[:n]), np.array(b[:n])
    if np.linalg.norm(a) == 0 or np.linalg.norm(b) == 0:
        return
    c = dc.cosine_similarity(Tensor(a), Tensor(b)).item()
    assert -1 - 1e-12 <= c <= 1 + 1e-12


# cross-entropy


def test_cross_entropy_uniform_logits():
    loss = dc.softmax_cross_entropy(Tensor(np.zeros((4, 5))), np.array([0, 1, 2, 4]))
    assert loss.item() == pytest.approx(np.log(5), abs=1e-14)


def test_cross_entropy_dominant_margin():
    logits = np.full((2, 5), -1e3)
    logits[[0, 1], [3, 1]] = 1e3
    assert dc.softmax_cross_entropy(Tensor(logits), np.array([3, 1])).item() == pytest.approx(0.0, abs=1e-12)


def test_cross_entropy_gradient_formula():
    rng = np.random.default_rng(3)
    logits = param(rng, 4, 5)
    labels = np.array([1, 0, 4, 4])
    dc.softmax_cross_entropy(logits, labels).backward()
    p = np.exp(logits.data - logits.data.max(axis=1, keepdims=True))
    p /= p.sum(axis=1, keepdims=True)
    p[np.arange(4), labels] -= 1
    np.testing.assert_allclose(logits.grad, p / 4, atol=1e-14)
    assert dc.grad_check(lambda: dc.softmax_cross_entropy(logits, labels), logits) < GRAD_TOL


def test_cross_entropy_label_range():
    with pytest.raises(IndexError):
        dc.softmax_cross_entropy(Tensor(np.zeros((2, 5))), np.array([0, 5]))


# layer norm


def test_layer_norm_constant_row():
    out = dc.layer_norm(Tensor(np.full((2, 4), 3.0)), Tensor(np.ones(4)), Tensor(np.zeros(4)))
    np.testing.assert_array_equal(out.data, 0.0)


def test_layer_norm_zero_scale():
    x = np.random.default_rng(0).standard_normal((3, 4))
    out = dc.layer_norm(Tensor(x), Tensor(np.zeros(4)), Tensor(np.full(4, 2.5)))
    np.testing.assert_array_equal(out.data, 2.5)


def test_layer_norm_standardizes():
    x = np.random.default_rng(1).standard_normal((3, 6)) * 4 + 1
    out = dc.layer_norm(Tensor(x), Tensor(np.ones(6)), Tensor(np.zeros(6))).data
    np.testing.assert_allclose(out.mean(axis=1), 0, atol=1e-12)
    ref = (x - x.mean(axis=1, keepdims=True)) / np.sqrt(x.var(axis=1, keepdims=True) + 1e-5)
    np.testing.assert_allclose(out, ref, rtol=1e-12)


@pytest.mark.parametrize("seed", range(3))
def test_layer_norm_gradient(seed):
    rng = np.random.default_rng(seed)
    x, s, b = param(rng, 3, 5), param(rng, 5), param(rng, 5)
    w = rng.standard_normal((3, 5))
    for t in (x, s, b):
        assert dc.grad_check(lambda: dc.weighted_sum(dc.layer_norm(x, s, b), w), t) < GRAD_TOL


# remaining elementwise and shape ops


def test_elementwise_and_shape_gradients():
    rng = np.random.default_rng(4)
    x, u = param(rng, 3, 4), param(rng, 3, 4)
    w = rng.standard_normal((3, 4))
    cases = [
        lambda: dc.weighted_sum(dc.mul(x, u), w),
        lambda: dc.weighted_sum(dc.exp(dc.sub(x, u)), w),
        lambda: dc.weighted_sum(dc.relu(dc.add(x, u)), w),
        lambda: dc.total(dc.square(dc.concat([dc.columns(x, 0, 2), dc.columns(u, 1, 3)], axis=1))),
        lambda: dc.total(dc.square(dc.pad2d(dc.reshape(x, (1, 1, 3, 4)), 1))),
        lambda: dc.total(dc.gather_rows(x, np.array([3, 0, 1]))),
        lambda: dc.mean(dc.scale(dc.select(x, 2, axis=1), 3.0)),
    ]
    for f in cases:
        for t in (x, u):
            assert dc.grad_check(f, t) < GRAD_TOL


def test_elementwise_requires_equal_shapes():
    with pytest.raises(DimensionError):
        dc.add(Tensor(np.ones((2, 3))), Tensor(np.ones((3, 2))))


def test_non_finite_forward_is_an_error():
    with pytest.raises(FloatingPointError):
        dc.exp(Tensor(np.array([1e6])))


def test_backward_accumulates_shared_parents():
    x = Tensor(np.array([2.0, -1.0]), requires_grad=True)
    dc.total(dc.add(dc.mul(x, x), x)).backward()
    np.testing.assert_array_equal(x.grad, 2 * x.data + 1)


def test_no_grad_builds_no_graph():
    x = Tensor(np.ones(3), requires_grad=True)
    with dc.no_grad():
        y = dc.square(x)
    assert not y.requires_grad
    assert dc.square(x).requires_grad


# optimiser


def test_adam_zero_gradient_is_identity():
    t = Tensor(np.array([1.0, -2.0, 3.0]), requires_grad=True)
    t.grad = np.zeros(3)
    dc.adam_step([dc.ParamGroup("w", [t])], dc.AdamState(lr=0.1))
    np.testing.assert_array_equal(t.data, [1.0, -2.0, 3.0])


def test_adam_descends_on_square():
    w = Tensor(np.array([1.0]), requires_grad=True)
    dc.total(dc.square(w)).backward()
    dc.adam_step([dc.ParamGroup("w", [w])], dc.AdamState(lr=0.1))
    assert w.data[0] < 1.0
    assert w.grad is None


def test_adam_scale_moves_proportionally():
    a = Tensor(np.array([1.0]), requires_grad=True)
    b = Tensor(np.array([1.0]), requires_grad=True)
    a.grad = np.array([0.5])
    b.grad = np.array([0.5])
    state = dc.AdamState(lr=0.1)
    dc.adam_step([dc.ParamGroup("fast", [a], 1.0), dc.ParamGroup("slow", [b], 0.01)], state)
    # first bias-corrected step: lr * g / (|g| + eps)
    expected = 0.1 * 0.5 / (0.5 + 1.5e-4)
    assert 1.0 - a.data[0] == pytest.approx(expected, rel=1e-12)
    assert (1.0 - a.data[0]) / (1.0 - b.data[0]) == pytest.approx(100.0, rel=1e-9)


def test_adam_matches_reference_over_steps():
    rng = np.random.default_rng(2)
    w0 = rng.standard_normal(4)
    grads = rng.standard_normal((5, 4))
    t = Tensor(w0.copy(), requires_grad=True)
    state = dc.AdamState(lr=0.01)
    m = np.zeros(4)
    v = np.zeros(4)
    ref = w0.copy()
    for i, g in enumerate(grads, start=1):
        t.grad = g.copy()
        dc.adam_step([dc.ParamGroup("w", [t])], state)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        ref -= 0.01 * (m / (1 - 0.9 ** i)) / (np.sqrt(v / (1 - 0.999 ** i)) + 1.5e-4)
    np.testing.assert_allclose(t.data, ref, rtol=1e-12)


def test_adam_missing_gradient():
    t = Tensor(np.ones(2), requires_grad=True)
    with pytest.raises(ContractError):
        dc.adam_step([dc.ParamGroup("w", [t])], dc.AdamState())


def test_adam_duplicate_group_names():
    t = Tensor(np.ones(2), requires_grad=True)
    t.grad = np.ones(2)
    with pytest.raises(ContractError):
        dc.adam_step([dc.ParamGroup("w", [t]), dc.ParamGroup("w", [t])], dc.AdamState())


def test_param_group_rejects_negative_scale():
    with pytest.raises(ValueError):
        dc.ParamGroup("w", [], -0.5)


# gradient checker


def test_grad_check_sum_is_exact():
    x = param(np.random.default_rng(0), 4, 3)
    assert dc.grad_check(lambda: dc.total(x), x) < 1e-9


def test_grad_check_squared_norm():
    x = param(np.random.default_rng(1), 6)
    assert dc.grad_check(lambda: dc.total(dc.square(x)), x, h=1e-5) < 1e-6


def test_grad_check_detects_wrong_gradient():
    x = param(np.random.default_rng(2), 5)

    def wrong():
        return dc._result(np.asarray((x.data ** 2).sum()), (x,), lambda g: (g * x.data,))

    assert dc.grad_check(wrong, x) > 0.4


def test_grad_check_non_finite():
    x = Tensor(np.array([0.0]), requires_grad=True)
    with pytest.raises(FloatingPointError):
        dc.grad_check(lambda: dc._result(np.asarray(np.inf), (x,), lambda g: (g,)), x)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_forward_is_bit_deterministic(seed):
    rng = np.random.default_rng(seed)
    x, w, b = rng.standard_normal((2, 3, 6, 6)), rng.standard_normal((2, 3, 3, 3)), rng.standard_normal(2)
    first = dc.conv2d(Tensor(x), Tensor(w), Tensor(b)).data
    second = dc.conv2d(Tensor(x.copy()), Tensor(w.copy()), Tensor(b.copy())).data
    assert first.tobytes() == second.tobytes()
