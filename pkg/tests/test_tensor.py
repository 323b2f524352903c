import math

import numpy as np
import pytest

from langneck.errors import DimensionError, LabelError, NumericalError, TapeError
from langneck.tensor import (
    Tape,
    Tensor,
    add,
    cosine_similarity,
    cross_entropy,
    gelu,
    grad_check,
    layer_norm,
    log_softmax,
    matmul,
    mul,
    no_grad,
    sabotaged,
    softmax,
    sum_,
)


def test_sum_gradient_is_all_ones():
    x = Tensor(np.random.default_rng(0).normal(size=(3, 4)), requires_grad=True)
    with Tape() as tape:
        loss = sum_(x)
        tape.backward(loss)
    np.testing.assert_array_equal(x.grad, np.ones((3, 4)))


def test_square_gradient_is_two_x():
    data = np.array([1.0, -2.0, 0.5])
    x = Tensor(data, requires_grad=True)
    with Tape() as tape:
        loss = sum_(mul(x, x))
        tape.backward(loss)
    np.testing.assert_allclose(x.grad, 2 * data)


def test_backward_twice_without_reset():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with Tape() as tape:
        loss = sum_(x)
        tape.backward(loss)
        with pytest.raises(TapeError):
            tape.backward(loss)


def test_reset_allows_reuse():
    x = Tensor([1.0, 2.0], requires_grad=True)
    tape = Tape()
    with tape:
        tape.backward(sum_(x))
    tape.reset()
    x.zero_grad()
    with tape:
        tape.backward(sum_(mul(x, x)))
    np.testing.assert_allclose(x.grad, [2.0, 4.0])


def test_backward_on_empty_tape():
    with Tape() as tape:
        with pytest.raises(TapeError):
            tape.backward(Tensor(1.0))


def test_non_scalar_root():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with Tape() as tape:
        y = mul(x, x)
        with pytest.raises(DimensionError):
            tape.backward(y)


def test_no_recording_without_tape():
    x = Tensor([1.0, 2.0], requires_grad=True)
    y = mul(x, x)
    assert y.node is None
    with Tape() as tape, no_grad():
        z = mul(x, x)
    assert z.node is None
    assert len(tape) == 0


def test_gradients_accumulate_across_uses():
    x = Tensor([3.0], requires_grad=True)
    with Tape() as tape:
        loss = sum_(add(mul(x, x), x))
        tape.backward(loss)
    np.testing.assert_allclose(x.grad, [7.0])


def test_operator_overloads_record():
    x = Tensor([[1.0, 2.0]], requires_grad=True)
    w = Tensor([[1.0], [1.0]])
    with Tape() as tape:
        loss = ((x @ w) * 2.0 - 1.0).sum()
        loss.backward()
    np.testing.assert_allclose(x.grad, [[2.0, 2.0]])
    assert len(tape) == 4


def test_softmax_rows_sum_to_one_and_shift_invariant():
    x = np.random.default_rng(1).normal(size=(5, 7))
    s = softmax(Tensor(x)).data
    np.testing.assert_allclose(s.sum(axis=-1), np.ones(5), atol=1e-12)
    assert np.all((s >= 0) & (s <= 1))
    np.testing.assert_allclose(softmax(Tensor(x + 1000.0)).data, s, atol=1e-12)


def test_softmax_of_equal_logits():
    np.testing.assert_allclose(softmax(Tensor([0.0, 0.0])).data, [0.5, 0.5])


def test_log_softmax_matches_log_of_softmax():
    x = Tensor(np.random.default_rng(2).normal(size=(3, 4)))
    np.testing.assert_allclose(log_softmax(x).data, np.log(softmax(x).data), atol=1e-12)


def test_cross_entropy_uniform_logits():
    loss = cross_entropy(Tensor(np.zeros((2, 16))), [3, 15])
    assert loss.item() == pytest.approx(math.log(16), abs=1e-12)


def test_cross_entropy_label_out_of_range():
    with pytest.raises(LabelError):
        cross_entropy(Tensor(np.zeros((1, 4))), [4])
    with pytest.raises(IndexError):
        cross_entropy(Tensor(np.zeros((1, 4))), [-1])


def test_cosine_similarity_bounds():
    u = Tensor([1.0, 2.0, 3.0])
    assert cosine_similarity(u, u).item() == pytest.approx(1.0)
    assert cosine_similarity(u, Tensor([-1.0, -2.0, -3.0])).item() == pytest.approx(-1.0)
    assert cosine_similarity(u, Tensor([0.0, 0.0, 0.0])).item() == 0.0


def test_matmul_shape_mismatch():
    with pytest.raises(DimensionError):
        matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_add_shapes_must_broadcast():
    with pytest.raises(DimensionError):
        add(Tensor(np.ones((2, 3))), Tensor(np.ones((4,))))


def test_non_finite_output_raises():
    with pytest.raises(NumericalError) as excinfo:
        add(Tensor([np.inf]), Tensor([1.0]))
    assert excinfo.value.op == "add"


def test_unknown_sabotage_target():
    with pytest.raises(KeyError):
        with sabotaged("not_an_op"):
            pass


def test_grad_check_sum_is_exact():
    x = np.random.default_rng(3).normal(size=(4, 3))
    assert grad_check(lambda t: sum_(t), x) < 1e-10


def test_grad_check_softmax_cross_entropy():
    x = np.random.default_rng(4).normal(size=(3, 5))
    error = grad_check(lambda t: cross_entropy(log_softmax(t), [0, 4, 2]), x)
    assert error < 1e-6


def test_grad_check_catches_wrong_backward_rule():
    x = np.random.default_rng(5).normal(size=(3, 5))
    with sabotaged("cross_entropy"):
        error = grad_check(lambda t: cross_entropy(t, [1, 2, 3]), x)
    assert error > 1e-2


def test_grad_check_needs_scalar_function():
    with pytest.raises(DimensionError):
        grad_check(lambda t: mul(t, t), np.ones(3))


def test_replay_is_deterministic():
    def run():
        x = Tensor(np.random.default_rng(6).normal(size=(2, 3)), requires_grad=True)
        with Tape() as tape:
            loss = sum_(mul(softmax(x), x))
            tape.backward(loss)
        return loss.data.tobytes(), x.grad.tobytes()

    assert run() == run()


def test_matmul_identity_and_zero():
    a = np.random.default_rng(7).normal(size=(3, 5))
    np.testing.assert_array_equal(matmul(Tensor(a), Tensor(np.eye(5))).data, a)
    np.testing.assert_array_equal(matmul(Tensor(np.eye(3)), Tensor(a)).data, a)
    np.testing.assert_array_equal(matmul(Tensor(a), Tensor(np.zeros((5, 2)))).data, np.zeros((3, 2)))


@pytest.mark.parametrize("seed", range(5))
def test_matmul_is_associative(seed):
    rng = np.random.default_rng(seed)
    m, k, p, q = rng.integers(1, 9, size=4)
    a, b, c = (Tensor(rng.normal(size=s)) for s in ((m, k), (k, p), (p, q)))
    left = matmul(matmul(a, b), c).data
    right = matmul(a, matmul(b, c)).data
    np.testing.assert_allclose(left, right, rtol=0, atol=1e-9)


def test_matmul_matches_triple_loop():
    rng = np.random.default_rng(8)
    a, b = rng.normal(size=(4, 6)), rng.normal(size=(6, 3))
    expected = np.zeros((4, 3))
    for i in range(4):
        for j in range(3):
            for k in range(6):
                expected[i, j] += a[i, k] * b[k, j]
    np.testing.assert_allclose(matmul(Tensor(a), Tensor(b)).data, expected, atol=1e-12)


def test_softmax_worked_examples():
    np.testing.assert_allclose(softmax(Tensor([0.0, math.log(2.0)])).data, [1 / 3, 2 / 3], atol=1e-12)
    for c in (-7.0, 0.0, 3.5, 800.0):
        np.testing.assert_allclose(softmax(Tensor(np.full(4, c))).data, np.full(4, 0.25), atol=1e-12)


def test_cross_entropy_saturated():
    logits = np.zeros((2, 5))
    logits[0, 1] = logits[1, 4] = 1e9
    assert cross_entropy(Tensor(logits), [1, 4]).item() == pytest.approx(0.0, abs=1e-6)


def test_cross_entropy_matches_loop():
    rng = np.random.default_rng(9)
    logits = rng.normal(size=(8, 5))
    labels = rng.integers(0, 5, size=8)
    total = 0.0
    for row, label in zip(logits, labels):
        total -= math.log(math.exp(row[label]) / sum(math.exp(v) for v in row))
    assert cross_entropy(Tensor(logits), labels).item() == pytest.approx(total / 8, abs=1e-12)


def test_cosine_similarity_angles():
    assert cosine_similarity(Tensor([1.0, 0.0]), Tensor([0.0, 3.0])).item() == pytest.approx(0.0, abs=1e-15)
    theta = 0.7
    v = Tensor([2.0 * math.cos(theta), 2.0 * math.sin(theta)])
    assert cosine_similarity(Tensor([1.0, 0.0]), v).item() == pytest.approx(math.cos(theta), abs=1e-12)


def test_layer_norm_of_constant_row_is_bias():
    gain, bias = Tensor([2.0, -1.0, 0.5]), Tensor([0.1, 0.2, 0.3])
    out = layer_norm(Tensor(np.full((2, 3), 4.2)), gain, bias).data
    np.testing.assert_allclose(out, [[0.1, 0.2, 0.3]] * 2, atol=1e-12)


def test_gelu_fixed_points():
    assert gelu(Tensor(0.0)).item() == 0.0
    assert gelu(Tensor(10.0)).item() == pytest.approx(10.0, abs=1e-9)
    assert gelu(Tensor(-10.0)).item() == pytest.approx(0.0, abs=1e-9)
