import numpy as np
import pytest

import autograd_utils as ag
from autograd_utils import (
    AdamState, CompGraph, GradientError, Tensor2, adam_step, clip_grad_norm, finite_difference_check, init_params,
)


def _param(shape, seed, name):
    return init_params(shape, seed, name=name)


OP_CASES = {
    "matmul_tanh": lambda a, b: ag.sum_all(ag.tanh(ag.matmul(a, b))),
    "add_broadcast": lambda a, b: ag.sum_all(ag.tanh(ag.add(ag.matmul(a, b), ag.slice_rows(b, 0, 1)))),
    "mul_sigmoid": lambda a, b: ag.sum_all(ag.mul(ag.sigmoid(a), ag.transpose(b))),
    "softmax_rows": lambda a, b: ag.sum_all(ag.mul(ag.softmax(a, axis=1), ag.transpose(ag.slice_cols(b, 0, 3)))),
    "softmax_cols": lambda a, b: ag.sum_all(ag.mul(ag.softmax(a, axis=0), ag.exp(ag.transpose(ag.slice_cols(b, 0, 3))))),
    "logsumexp": lambda a, b: ag.sum_all(ag.logsumexp(ag.matmul(a, b), axis=0)),
    "log_power": lambda a, b: ag.add(ag.sum_all(ag.log(ag.sigmoid(a))), ag.sum_all(ag.power(ag.sigmoid(b), 2.0))),
    "concat_max": lambda a, b: ag.sum_all(ag.max_rows(ag.concat([a, ag.transpose(b)], axis=0))),
    "gather": lambda a, b: ag.sum_all(ag.mul(ag.gather(a, [0, 1, 2, 0], [1, 3, 0, 1]), 2.5)),
}


@pytest.mark.parametrize("name", sorted(OP_CASES))
def test_ops_match_finite_differences(name):
    a = _param((3, 4), 1, "a")
    b = _param((4, 3), 2, "b")
    errors = finite_difference_check(lambda: OP_CASES[name](a, b), [a, b])
    assert max(errors.values()) < 1e-6, errors


def test_graph_records_nodes_in_creation_order():
    a = _param((2, 2), 0, "a")
    graph = CompGraph("g")
    loss = graph.forward(lambda: ag.sum_all(ag.tanh(ag.mul(a, a))))
    assert [n.op for n in graph.nodes] == ["mul", "tanh", "sum"]
    assert graph.order == [0, 1, 2]
    grads = graph.backward(loss)
    np.testing.assert_allclose(grads["a"], 2 * a.data * (1 - np.tanh(a.data ** 2) ** 2))


def test_backward_before_forward_is_rejected():
    with pytest.raises(GradientError):
        CompGraph("empty").backward(Tensor2([[1.0]], requires_grad=True, name="x"))


def test_backward_requires_scalar_loss():
    a = _param((2, 3), 0, "a")
    graph = CompGraph()
    out = graph.forward(lambda: ag.tanh(a))
    with pytest.raises(GradientError, match="标量"):
        graph.backward(out)


def test_disconnected_parameter_gets_zero_gradient():
    a = _param((2, 2), 0, "a")
    unused = _param((3, 1), 1, "unused")
    graph = CompGraph()
    loss = graph.forward(lambda: ag.sum_all(a))
    grads = graph.backward(loss, [a, unused])
    np.testing.assert_array_equal(grads["unused"], np.zeros((3, 1)))
    np.testing.assert_array_equal(grads["a"], np.ones((2, 2)))


def test_non_finite_output_names_the_op():
    with pytest.raises(GradientError, match="log"):
        ag.log(ag.constant([[0.0]]))


def test_matmul_shape_mismatch():
    with pytest.raises(GradientError):
        ag.matmul(ag.constant(np.ones((2, 3))), ag.constant(np.ones((2, 3))))


def test_max_rows_gives_gradient_to_first_row_on_ties():
    a = Tensor2([[1.0, 2.0], [1.0, 0.0]], requires_grad=True, name="a")
    graph = CompGraph()
    loss = graph.forward(lambda: ag.sum_all(ag.max_rows(a)))
    grads = graph.backward(loss)
    np.testing.assert_array_equal(grads["a"], [[1.0, 1.0], [0.0, 0.0]])


def test_init_params_range_and_determinism():
    p1 = init_params((20, 40), 7, "w")
    p2 = init_params((20, 40), 7, "w")
    limit = np.sqrt(6.0 / 60)
    np.testing.assert_array_equal(p1.data, p2.data)
    assert np.all(np.abs(p1.data) <= limit)
    assert p1.requires_grad


def test_clip_grad_norm_scales_to_max_norm():
    grads = {"a": np.array([[6.0]]), "b": np.array([[8.0]])}
    clipped, total = clip_grad_norm(grads, 5.0)
    assert total == pytest.approx(10.0)
    norm = np.sqrt(sum(float(np.sum(g ** 2)) for g in clipped.values()))
    assert norm == pytest.approx(5.0)
    unchanged, _ = clip_grad_norm({"a": np.array([[1.0]])}, 5.0)
    assert unchanged["a"][0, 0] == 1.0


def test_adam_first_step_moves_by_learning_rate():
    p = Tensor2(np.zeros((1, 2)), requires_grad=True, name="p")
    state = AdamState(lr=0.01)
    adam_step({"p": p}, {"p": np.array([[1.0, -3.0]])}, state)
    np.testing.assert_allclose(p.data, [[-0.01, 0.01]], rtol=1e-6)
    assert state.step_count == 1


def test_adam_treats_missing_gradient_as_zero():
    p = Tensor2(np.ones((1, 1)), requires_grad=True, name="p")
    adam_step({"p": p}, {}, AdamState())
    assert p.data[0, 0] == 1.0


def test_adam_rejects_non_finite_gradient():
    p = Tensor2(np.zeros((1, 1)), requires_grad=True, name="W_att")
    with pytest.raises(GradientError, match="W_att"):
        adam_step({"W_att": p}, {"W_att": np.array([[np.nan]])}, AdamState())


def test_adam_rejects_non_positive_learning_rate():
    p = Tensor2(np.zeros((1, 1)), requires_grad=True, name="p")
    with pytest.raises(GradientError):
        adam_step({"p": p}, {"p": np.zeros((1, 1))}, AdamState(lr=0.0))


def test_mean_of_averages_scalars():
    a = _param((1, 1), 0, "a")
    graph = CompGraph()
    loss = graph.forward(lambda: ag.mean_of([ag.mul(a, 2.0), ag.mul(a, 4.0)]))
    assert loss.item() == pytest.approx(3.0 * a.data[0, 0])
    assert graph.backward(loss)["a"][0, 0] == pytest.approx(3.0)


def test_adam_minimises_scalar_quadratic():
    p = Tensor2(np.zeros((1, 1)), requires_grad=True, name="p")
    target = ag.constant([[3.0]])
    state = AdamState(lr=0.1)
    graph = CompGraph("quadratic")
    for _ in range(100):
        p.zero_grad()
        loss = graph.forward(lambda: ag.sum_all(ag.mul(ag.sub(p, target), ag.sub(p, target))))
        adam_step({"p": p}, graph.backward(loss, [p]), state)
    assert abs(p.data[0, 0] - 3.0) < 0.05
    assert state.step_count == 100


def test_init_params_is_centred_with_uniform_spread():
    data = init_params((200, 300), 3, "big").data
    limit = np.sqrt(6.0 / 500)
    assert abs(data.mean()) < 0.005
    assert data.std() == pytest.approx(limit / np.sqrt(3.0), rel=0.02)
