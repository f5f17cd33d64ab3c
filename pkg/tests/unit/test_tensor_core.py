"""Unit tests for the tensor core: op values, reverse-mode gradients and seeded streams."""

import threading

import numpy as np
import pytest
from hypothesis import HealthCheck, assume, given, settings, strategies as st
from hypothesis.extra.numpy import arrays


def _weighted(op, shape, seed=0):
    """Scalar objective sum(op(x) * C) with a fixed random C so every output entry matters."""
    from rule_miner.tensor_core import Tensor, mul, reduce_sum

    weights = Tensor(np.random.default_rng(seed).normal(size=shape))
    return lambda x: reduce_sum(mul(op(x), weights))


def _unary_cases():
    from rule_miner import tensor_core as tc

    return [
        ("tanh", tc.tanh, (3, 4), False),
        ("sigmoid", tc.sigmoid, (3, 4), False),
        ("softplus", tc.softplus, (3, 4), False),
        ("gelu", tc.gelu, (3, 4), False),
        ("exp", tc.exp, (3, 4), False),
        ("log", tc.log, (3, 4), True),
        ("sqrt", tc.sqrt, (3, 4), True),
        ("neg", tc.neg, (3, 4), False),
        ("transpose", tc.transpose, (4, 3), False),
        ("softmax_rows", tc.softmax_rows, (3, 4), False),
        ("softmax_cols", tc.softmax_cols, (3, 4), False),
        ("row_normalize", tc.row_normalize, (3, 4), False),
        ("take_row", lambda x: tc.take_row(x, 1), (1, 4), False),
        ("slice_cols", lambda x: tc.slice_cols(x, 1, 3), (3, 2), False),
        ("reduce_mean_rows", lambda x: tc.reduce_mean(x, axis=0), (1, 4), False),
        ("reduce_sum_cols", lambda x: tc.reduce_sum(x, axis=1), (3, 1), False),
        ("max_all", tc.max_all, (1, 1), False),
        ("min_all", tc.min_all, (1, 1), False),
        ("self_matmul", lambda x: tc.matmul(x, tc.transpose(x)), (3, 3), False),
        ("concat_rows", lambda x: tc.concat([x, tc.mul(x, 2.0)], axis=0), (6, 4), False),
    ]


UNARY_CASES = _unary_cases()


@pytest.mark.unit
@pytest.mark.parametrize("name,op,out_shape,positive", UNARY_CASES, ids=[case[0] for case in UNARY_CASES])
def test_op_gradients_match_central_differences(name, op, out_shape, positive):
    """Every differentiable op agrees with central differences to 1e-6."""
    from rule_miner.tensor_core import Tensor, finite_difference_check

    values = np.random.default_rng(3).normal(size=(3, 4))
    if positive:
        values = np.abs(values) + 0.5
    x = Tensor(values, requires_grad=True)
    objective = _weighted(op, out_shape)

    error = finite_difference_check(lambda: objective(x), x)
    assert error < 1e-6, f"{name}: relative gradient error {error:.2e}"


@pytest.mark.unit
def test_binary_op_gradients_with_broadcasting():
    from rule_miner.tensor_core import Tensor, add, finite_difference_check, matmul, mul, reduce_sum, sub

    generator = np.random.default_rng(5)
    a = Tensor(generator.normal(size=(3, 4)), requires_grad=True)
    row = Tensor(generator.normal(size=(1, 4)), requires_grad=True)
    b = Tensor(generator.normal(size=(4, 2)), requires_grad=True)

    def objective():
        shifted = sub(mul(add(a, row), a), row)
        return reduce_sum(mul(matmul(shifted, b), matmul(shifted, b)))

    error = finite_difference_check(objective, [a, row, b])
    assert error < 1e-6, f"relative gradient error {error:.2e}"


@pytest.mark.unit
def test_square_sum_gradient_is_twice_input():
    from rule_miner.tensor_core import Tape, Tensor, backward, mul, reduce_sum

    x = Tensor([[1.0, -2.0, 3.0]], requires_grad=True)
    with Tape() as tape:
        out = reduce_sum(mul(x, x))
    grads = backward(tape, out)

    assert out.item() == pytest.approx(14.0)
    np.testing.assert_allclose(grads[x], [[2.0, -4.0, 6.0]])
    np.testing.assert_allclose(x.grad, [[2.0, -4.0, 6.0]])


@pytest.mark.unit
def test_gradients_accumulate_over_shared_inputs():
    from rule_miner.tensor_core import Tape, Tensor, add, backward, reduce_sum

    x = Tensor([[1.0, 2.0]], requires_grad=True)
    with Tape() as tape:
        out = reduce_sum(add(add(x, x), x))
    grads = backward(tape, out)
    np.testing.assert_allclose(grads[x], [[3.0, 3.0]])


@pytest.mark.unit
def test_backward_rejects_non_scalar_output():
    from rule_miner.exceptions import UsageError
    from rule_miner.tensor_core import Tape, Tensor, backward, mul

    x = Tensor(np.ones((2, 2)), requires_grad=True)
    with Tape() as tape:
        out = mul(x, 3.0)
    with pytest.raises(UsageError):
        backward(tape, out)


@pytest.mark.unit
def test_no_recording_without_an_active_tape():
    from rule_miner.tensor_core import Tape, Tensor, backward, current_tape, reduce_sum

    x = Tensor([[1.0, 2.0]], requires_grad=True)
    assert current_tape() is None, "no tape should be active outside a context"
    out = reduce_sum(x)
    assert not out.requires_grad, "ops outside a tape must not track gradients"
    assert backward(Tape(), out) == {}


@pytest.mark.unit
def test_constant_inputs_are_not_recorded():
    from rule_miner.tensor_core import Tape, Tensor, add

    with Tape() as tape:
        add(Tensor([[1.0]]), Tensor([[2.0]]))
    assert len(tape) == 0, "ops over constants should leave the tape empty"


@pytest.mark.unit
def test_tapes_are_thread_local():
    from rule_miner.tensor_core import Tape, Tensor, mul

    x = Tensor([[1.0, 2.0]], requires_grad=True)
    recorded = {}

    def worker():
        with Tape() as inner:
            mul(x, 2.0)
        recorded["inner"] = len(inner)

    with Tape() as outer:
        thread = threading.Thread(target=worker)
        thread.start()
        thread.join()
    assert recorded["inner"] == 1
    assert len(outer) == 0, "another thread's ops leaked onto this thread's tape"


@pytest.mark.unit
def test_finite_difference_rejects_non_positive_step():
    from rule_miner.exceptions import UsageError
    from rule_miner.tensor_core import Tensor, finite_difference_check, reduce_sum

    x = Tensor([[1.0]], requires_grad=True)
    with pytest.raises(UsageError):
        finite_difference_check(lambda: reduce_sum(x), x, h=0.0)


@pytest.mark.unit
def test_finite_difference_restores_parameters():
    from rule_miner.tensor_core import Tensor, finite_difference_check, mul, reduce_sum, tanh

    values = np.random.default_rng(8).normal(size=(2, 3))
    x = Tensor(values.copy(), requires_grad=True)
    finite_difference_check(lambda: reduce_sum(tanh(mul(x, x))), x)
    np.testing.assert_array_equal(x.data, values)


@pytest.mark.unit
def test_tensor_construction_and_shape_rules():
    from rule_miner.exceptions import ShapeError, UsageError
    from rule_miner.tensor_core import Tensor, add

    assert Tensor(2.5).shape == (1, 1)
    assert Tensor([1.0, 2.0, 3.0]).shape == (1, 3)
    with pytest.raises(ShapeError):
        Tensor(np.zeros((2, 2, 2)))
    with pytest.raises(ShapeError):
        add(Tensor(np.ones((2, 3))), Tensor(np.ones((3, 2))))
    with pytest.raises(UsageError):
        Tensor([[1.0]]) / Tensor([[2.0]])
    with pytest.raises(UsageError):
        Tensor([1.0, 2.0]).item()
    assert (Tensor([[4.0]]) / 2).item() == 2.0


@pytest.mark.unit
def test_log_clamps_small_inputs_and_blocks_their_gradient():
    from rule_miner.tensor_core import LOG_FLOOR, Tape, Tensor, backward, log, reduce_sum

    x = Tensor([[0.0, 1.0]], requires_grad=True)
    with Tape() as tape:
        out = reduce_sum(log(x))
    grads = backward(tape, out)
    assert out.item() == pytest.approx(np.log(LOG_FLOOR))
    np.testing.assert_allclose(grads[x], [[0.0, 1.0]])


@pytest.mark.unit
def test_cosine_similarity_handles_zero_vectors():
    from rule_miner.tensor_core import Tensor, cosine_similarity, cosine_similarity_matrix

    assert cosine_similarity([0.0, 0.0], [1.0, 2.0]) == 0.0
    assert cosine_similarity([1.0, 0.0], [2.0, 0.0]) == pytest.approx(1.0)
    assert cosine_similarity([1.0, 0.0], [-3.0, 0.0]) == pytest.approx(-1.0)

    matrix = cosine_similarity_matrix(Tensor([[1.0, 0.0], [0.0, 0.0]]), Tensor([[2.0, 0.0]]))
    np.testing.assert_allclose(matrix.data, [[1.0], [0.0]])


@pytest.mark.unit
@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (4, 5), elements=st.floats(-30.0, 30.0)))
def test_softmax_is_stochastic_along_its_axis(values):
    from rule_miner.tensor_core import Tensor, softmax_cols, softmax_rows

    rows = softmax_rows(Tensor(values)).data
    cols = softmax_cols(Tensor(values)).data
    np.testing.assert_allclose(rows.sum(axis=1), 1.0, atol=1e-9)
    np.testing.assert_allclose(cols.sum(axis=0), 1.0, atol=1e-9)
    assert np.all(rows >= 0) and np.all(cols >= 0)


@pytest.mark.unit
def test_make_rng_streams_are_reproducible_and_independent():
    from rule_miner.exceptions import UsageError
    from rule_miner.tensor_core import make_rng

    first = make_rng(3, "init").normal(size=5)
    again = make_rng(3, "init").normal(size=5)
    other = make_rng(3, "batching").normal(size=5)
    np.testing.assert_array_equal(first, again)
    assert not np.allclose(first, other), "different streams should not coincide"
    with pytest.raises(UsageError):
        make_rng(-1)


@pytest.mark.unit
def test_registry_covers_every_recorded_op():
    from rule_miner.tensor_core import registered_ops

    expected = {
        "add", "sub", "mul", "neg", "matmul", "transpose", "exp", "log", "sqrt", "tanh",
        "sigmoid", "softplus", "gelu", "softmax", "row_normalize", "concat", "take_row",
        "slice_cols", "reduce_sum", "extreme",
    }
    missing = expected - set(registered_ops())
    assert not missing, f"ops without a registered gradient: {sorted(missing)}"


@st.composite
def conformable_triples(draw):
    n, k, m, p = (draw(st.integers(1, 5)) for _ in range(4))
    element = st.floats(-10.0, 10.0)
    return tuple(
        draw(arrays(np.float64, shape, elements=element)) for shape in ((n, k), (k, m), (m, p))
    )


@pytest.mark.unit
@settings(max_examples=200, deadline=None)
@given(conformable_triples())
def test_matmul_is_associative(triple):
    from rule_miner.tensor_core import Tensor, matmul

    a, b, c = (Tensor(x) for x in triple)
    left = matmul(matmul(a, b), c).data
    right = matmul(a, matmul(b, c)).data
    np.testing.assert_allclose(left, right, rtol=1e-9, atol=1e-9)


@pytest.mark.unit
@settings(max_examples=200, deadline=None, suppress_health_check=[HealthCheck.filter_too_much])
@given(
    arrays(np.float64, (6,), elements=st.floats(-10.0, 10.0)),
    arrays(np.float64, (6,), elements=st.floats(-10.0, 10.0)),
    st.floats(1e-3, 1e3),
)
def test_cosine_similarity_is_symmetric_and_scale_free(x, y, scale):
    from rule_miner.tensor_core import Tensor, cosine_similarity, cosine_similarity_matrix

    assume(np.linalg.norm(x) > 1e-3 and np.linalg.norm(y) > 1e-3)
    value = cosine_similarity(x, y)
    assert -1.0 <= value <= 1.0
    assert cosine_similarity(y, x) == pytest.approx(value, abs=1e-12)
    assert cosine_similarity(scale * x, y) == pytest.approx(value, abs=1e-9)
    assert cosine_similarity(x, scale * y) == pytest.approx(value, abs=1e-9)

    rows = np.stack([x, y])
    matrix = cosine_similarity_matrix(Tensor(rows), Tensor(rows)).data
    np.testing.assert_allclose(matrix, matrix.T, atol=1e-12)
    scaled = cosine_similarity_matrix(Tensor(rows * scale), Tensor(rows)).data
    np.testing.assert_allclose(scaled, matrix, atol=1e-9)
