import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from depsnet import autodiff as ad
from depsnet.autodiff import Tensor
from depsnet.errors import ContractError, InternalError, NumericError, ShapeError
from oracles import central_difference, conv2d_loops, relative_error, smoothed_ce_scalar


def leaf(arr, dtype=np.float64):
    return Tensor(np.asarray(arr, dtype=dtype), requires_grad=True)


# -- forward examples -------------------------------------------------------------


def test_conv_all_ones():
    x = Tensor(np.ones((1, 1, 4, 4)))
    w = Tensor(np.ones((1, 1, 3, 3)))
    out = ad.forward_primitive("conv2d", [x, w], stride=1, padding=0)
    assert out.shape == (1, 1, 2, 2)
    assert np.all(out.data == 9.0)


def test_relu_definition():
    out = ad.relu(Tensor([-1.0, 0.0, 2.0]))
    assert out.data.tolist() == [0.0, 0.0, 2.0]


def test_batchnorm_training_normalizes():
    r = np.random.default_rng(0)
    x = 5.0 + 2.0 * r.standard_normal((64, 3, 4, 4))
    # force exact per-channel mean 5 and var 4
    x = (x - x.mean(axis=(0, 2, 3), keepdims=True)) / x.std(axis=(0, 2, 3), keepdims=True) * 2.0 + 5.0
    out = ad.batchnorm(Tensor(x), Tensor(np.ones(3)), Tensor(np.zeros(3)), training=True)
    assert np.all(np.abs(out.data.mean(axis=(0, 2, 3))) <= 1e-5)
    assert np.all(np.abs(out.data.var(axis=(0, 2, 3)) - 1.0) <= 1e-3)


def test_batchnorm_running_stats_momentum():
    x = np.random.default_rng(1).standard_normal((4, 2, 3, 3))
    rm, rv = np.zeros(2), np.ones(2)
    ad.batchnorm(Tensor(x), Tensor(np.ones(2)), Tensor(np.zeros(2)), rm, rv, training=True)
    n = 4 * 9
    mean = x.mean(axis=(0, 2, 3))
    var = x.var(axis=(0, 2, 3)) * n / (n - 1)
    np.testing.assert_allclose(rm, 0.1 * mean, rtol=1e-12)
    np.testing.assert_allclose(rv, 0.9 + 0.1 * var, rtol=1e-12)


def test_batchnorm_eval_is_affine():
    r = np.random.default_rng(2)
    rm, rv = r.standard_normal(3), r.uniform(0.5, 2.0, 3)
    g, b = Tensor(r.standard_normal(3)), Tensor(r.standard_normal(3))

    def f(x):
        return ad.batchnorm(Tensor(x), g, b, rm, rv, training=False).data

    x1, x2 = r.standard_normal((2, 3, 2, 2)), r.standard_normal((2, 3, 2, 2))
    a, c = 0.3, 0.7
    # superposition for affine maps: f(a x1 + c x2) = a f(x1) + c f(x2) + (1 - a - c) f(0)
    lhs = f(a * x1 + c * x2)
    rhs = a * f(x1) + c * f(x2) + (1 - a - c) * f(np.zeros_like(x1))
    np.testing.assert_allclose(lhs, rhs, atol=1e-12)


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 2), st.integers(1, 3), st.integers(1, 3), st.integers(3, 6),
       st.sampled_from([1, 3, 5]), st.integers(1, 2), st.integers(0, 2))
def test_conv_matches_loop_oracle(b, cin, cout, h, k, stride, pad):
    if h + 2 * pad < k:
        return
    r = np.random.default_rng(b * 100 + cin * 10 + h)
    x, w = r.standard_normal((b, cin, h, h)), r.standard_normal((cout, cin, k, k))
    with ad.count_macs_executed() as ctr:
        out = ad.conv2d(Tensor(x), Tensor(w), stride, pad)
    ref, macs = conv2d_loops(x, w, stride, pad)
    assert out.shape == ref.shape
    assert out.shape[2] == (h + 2 * pad - k) // stride + 1
    np.testing.assert_allclose(out.data, ref, rtol=1e-12, atol=1e-12)
    assert ctr.total == macs * b


def test_conv_shape_error_names_operand():
    with pytest.raises(ShapeError) as e:
        ad.conv2d(Tensor(np.ones((1, 2, 4, 4))), Tensor(np.ones((1, 3, 3, 3))))
    assert e.value.operand == "kernel" or "kernel" in str(e.value)


def test_matmul_shape_error():
    with pytest.raises(ShapeError):
        ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 2))))


def test_non_finite_input_rejected():
    with pytest.raises(NumericError):
        Tensor([1.0, float("nan")])
    with pytest.raises(NumericError):
        Tensor([float("inf")])


def test_unknown_primitive():
    with pytest.raises(ContractError):
        ad.forward_primitive("softmax", [Tensor([1.0])])


def test_float32_default():
    assert Tensor([1, 2]).dtype == np.float32


# -- backward examples ------------------------------------------------------------


def test_linear_gradient():
    w = leaf([1.0, 2.0])
    x = Tensor(np.array([3.0, 4.0]))
    loss = ad.sum_(ad.mul(w, x))
    ad.backward(loss)
    assert w.grad.tolist() == [3.0, 4.0]


def test_backward_twice_doubles():
    r = np.random.default_rng(3)
    w = leaf(r.standard_normal((3, 2)))
    x = Tensor(r.standard_normal((4, 3)))
    with ad.Tape():
        loss = ad.sum_(ad.relu(ad.matmul(x, w)))
        ad.backward(loss)
        first = w.grad.copy()
        ad.backward(loss)
    np.testing.assert_array_equal(w.grad, 2 * first)


def test_unreachable_untouched():
    w, u = leaf([1.0]), leaf([5.0])
    u.grad = np.array([7.0])
    ad.backward(ad.sum_(ad.mul(w, w)))
    assert u.grad.tolist() == [7.0]


def test_backward_needs_scalar():
    w = leaf([1.0, 2.0])
    with pytest.raises(ContractError):
        ad.backward(ad.mul(w, w))


def test_backward_needs_tape():
    with pytest.raises(ContractError):
        ad.backward(Tensor(1.0))


def test_cycle_detected():
    w = leaf([1.0, 2.0])
    with ad.Tape() as tape:
        y = ad.mul(w, w)
        loss = ad.sum_(y)
        # corrupt the record so an operand points forward in the tape
        y._node.index = loss._node.index + 1
        tape.nodes.append(y._node)
        with pytest.raises(InternalError):
            ad.backward(loss)


def test_tape_is_topological():
    r = np.random.default_rng(4)
    w = leaf(r.standard_normal((3, 3)))
    with ad.Tape() as tape:
        h = ad.hard_swish(ad.matmul(Tensor(r.standard_normal((2, 3))), w))
        ad.sum_(ad.relu(h))
    seen = set()
    for node in tape.nodes:
        for inp in node.inputs:
            if inp._node is not None:
                assert id(inp._node) in seen
        seen.add(id(node))


def test_no_grad_records_nothing():
    w = leaf([1.0])
    with ad.Tape() as tape, ad.no_grad():
        ad.mul(w, w)
    assert len(tape) == 0


def test_determinism_bit_identical():
    r = np.random.default_rng(5)
    x, w0 = r.standard_normal((2, 3, 5, 5)), r.standard_normal((4, 3, 3, 3))

    def run():
        w = leaf(w0.copy(), np.float32)
        with ad.Tape():
            out = ad.conv2d(Tensor(x.astype(np.float32)), w, 1, 1)
            ad.backward(ad.sum_(ad.hard_swish(out)))
        return out.data, w.grad

    (o1, g1), (o2, g2) = run(), run()
    assert o1.tobytes() == o2.tobytes() and g1.tobytes() == g2.tobytes()


# -- per-primitive gradient checks --------------------------------------------------


def check_grads(build, leaves, h=1e-3, tol=1e-4, min_frac=1.0):
    """build() -> scalar Tensor; compares every leaf entry against central differences."""
    for t in leaves:
        t.grad = None
    with ad.Tape():
        ad.backward(build())
    ok = total = 0
    for t in leaves:
        for idx in np.ndindex(t.shape):
            with ad.no_grad():
                fd = central_difference(lambda: build().item(), t.data, idx, h)
            total += 1
            ok += relative_error(t.grad[idx], fd) <= tol
    assert ok >= min_frac * total, f"{ok}/{total} entries within tolerance"


shapes = st.tuples(st.integers(1, 2), st.integers(1, 3), st.integers(2, 5))


@settings(max_examples=10, deadline=None)
@given(shapes, st.integers(0, 10_000))
def test_gradcheck_matmul_add(shape, seed):
    b, m, n = shape
    r = np.random.default_rng(seed)
    a, w, bias = leaf(r.standard_normal((b, m))), leaf(r.standard_normal((m, n))), leaf(r.standard_normal(n))
    c = Tensor(r.standard_normal((b, n)))
    check_grads(lambda: ad.sum_(ad.mul(ad.add(ad.matmul(a, w), bias), c)), [a, w, bias])


@settings(max_examples=10, deadline=None)
@given(st.tuples(st.integers(1, 2), st.integers(1, 3), st.integers(3, 5)), st.integers(0, 10_000),
       st.sampled_from([1, 3]), st.integers(1, 2))
def test_gradcheck_conv(shape, seed, k, stride):
    b, c, h = shape
    r = np.random.default_rng(seed)
    x, w = leaf(r.standard_normal((b, c, h, h))), leaf(r.standard_normal((2, c, k, k)))
    proj = Tensor(r.standard_normal((b, 2, (h + 2 * (k // 2) - k) // stride + 1,
                                     (h + 2 * (k // 2) - k) // stride + 1)))
    check_grads(lambda: ad.sum_(ad.mul(ad.conv2d(x, w, stride, k // 2), proj)), [x, w])


@settings(max_examples=10, deadline=None)
@given(st.tuples(st.integers(2, 3), st.integers(1, 3), st.integers(2, 4)), st.integers(0, 10_000),
       st.booleans())
def test_gradcheck_batchnorm(shape, seed, training):
    b, c, h = shape
    r = np.random.default_rng(seed)
    x = leaf(r.standard_normal((b, c, h, h)))
    g, beta = leaf(r.uniform(0.5, 1.5, c)), leaf(r.standard_normal(c))
    rm, rv = r.standard_normal(c), r.uniform(0.5, 2, c)
    proj = Tensor(r.standard_normal((b, c, h, h)))
    check_grads(lambda: ad.sum_(ad.mul(ad.batchnorm(x, g, beta, rm, rv, training, update_stats=False), proj)),
                [x, g, beta])


@settings(max_examples=10, deadline=None)
@given(st.tuples(st.integers(1, 2), st.integers(1, 3), st.integers(2, 5)), st.integers(0, 10_000))
def test_gradcheck_pointwise_pool_reshape_slice(shape, seed):
    b, c, h = shape
    r = np.random.default_rng(seed)
    # keep away from the relu / hard_swish kinks so differences are smooth
    raw = r.uniform(0.2, 2.5, (b, c, h, h)) * r.choice([-1, 1], (b, c, h, h))
    x = leaf(raw)
    proj = Tensor(r.standard_normal((b, c)))

    def build():
        y = ad.add(ad.relu(x), ad.hard_swish(x))
        pooled = ad.reshape(ad.global_avg_pool(y), (b, c))
        return ad.sum_(ad.mul(ad.slice_(pooled, (slice(None), slice(0, c))), proj))

    check_grads(build, [x])


@settings(max_examples=10, deadline=None)
@given(st.integers(2, 4), st.integers(2, 5), st.integers(0, 10_000), st.floats(0.0, 0.5))
def test_gradcheck_losses(b, c, seed, smoothing):
    r = np.random.default_rng(seed)
    z = leaf(r.standard_normal((b, c)))
    labels = r.integers(0, c, b)
    teacher = Tensor(r.standard_normal((b, c)))
    check_grads(lambda: ad.loss_ce_smoothed(z, labels, smoothing), [z])
    check_grads(lambda: ad.loss_kd_soft(z, teacher), [z])


# -- losses ---------------------------------------------------------------------


@given(st.integers(2, 12), st.floats(0.0, 0.9), st.floats(-5, 5))
def test_uniform_logits_give_log_c(c, s, v):
    z = Tensor(np.full((3, c), v, dtype=np.float64))
    assert abs(ad.loss_ce_smoothed(z, [0, 1, c - 1], s).item() - math.log(c)) < 1e-12


def test_two_class_hand_value():
    z = Tensor(np.array([[0.0, math.log(3)]]))
    assert abs(ad.loss_ce_smoothed(z, [1], 0.0).item() - math.log(4 / 3)) < 1e-12


def test_smoothed_brute_force():
    logits = [0.0] * 10
    logits[4] = 50.0
    got = ad.loss_ce_smoothed(Tensor(np.array([logits])), [4], 0.1).item()
    assert abs(got - smoothed_ce_scalar(logits, 4, 0.1)) < 1e-9


def test_ce_needs_two_classes():
    with pytest.raises(ContractError):
        ad.loss_ce_smoothed(Tensor(np.zeros((2, 1))), [0, 0], 0.1)


def test_kd_self_distillation_is_entropy():
    r = np.random.default_rng(6)
    z = r.standard_normal((4, 5))
    p = np.exp(z) / np.exp(z).sum(axis=1, keepdims=True)
    entropy = -(p * np.log(p)).sum(axis=1).mean()
    assert abs(ad.loss_kd_soft(Tensor(z), Tensor(z)).item() - entropy) < 1e-12
    u = np.zeros((2, 7))
    assert abs(ad.loss_kd_soft(Tensor(u), Tensor(u)).item() - math.log(7)) < 1e-12


def test_kd_hand_value():
    got = ad.loss_kd_soft(Tensor(np.array([[0.0, math.log(3)]])), Tensor(np.zeros((1, 2)))).item()
    assert abs(got - (0.5 * math.log(4 / 3) + 0.5 * math.log(4))) < 1e-12


def test_kd_rejects_live_teacher():
    t = leaf(np.zeros((2, 3)))
    with pytest.raises(ContractError):
        ad.loss_kd_soft(Tensor(np.zeros((2, 3))), t)
    with ad.Tape():
        linked = ad.relu(t)
        with pytest.raises(ContractError):
            ad.loss_kd_soft(Tensor(np.zeros((2, 3))), linked)


def test_kd_teacher_gets_zero_gradient():
    r = np.random.default_rng(7)
    x = Tensor(r.standard_normal((2, 3)))
    w_teacher, w_student = leaf(r.standard_normal((3, 4))), leaf(r.standard_normal((3, 4)))
    with ad.Tape():
        teacher = ad.matmul(x, w_teacher).detach()
        ad.backward(ad.loss_kd_soft(ad.matmul(x, w_student), teacher))
    assert w_teacher.grad is None
    assert np.abs(w_student.grad).sum() > 0
