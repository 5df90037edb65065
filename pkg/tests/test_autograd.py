import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra import numpy as hnp

import autograd as ag
from autograd import Tensor
from utils.errors import NumericFault, RejectedInputError


def _rel_error(a, b):
    return np.linalg.norm(a - b) / max(np.linalg.norm(a) + np.linalg.norm(b), 1e-12)


def _gradcheck(build, arrays, tol=1e-6):
    """Compare eval_with_grads to central differences for every input of `build`."""
    leaves = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    _, grads = ag.eval_with_grads(build(*leaves), leaves)
    for i, a in enumerate(arrays):
        def f(x, i=i):
            args = [Tensor(x) if j == i else Tensor(arrays[j]) for j in range(len(arrays))]
            return float(build(*args).data)
        numeric = ag.finite_diff_grad(f, a)
        assert _rel_error(grads[i], numeric) <= tol, f"input {i}"


def test_relu_backward_piecewise():
    x = Tensor(np.array([-1.0, 1.0]), requires_grad=True)
    out = ag.mul(ag.relu(x), Tensor([3.0, 5.0]))
    _, (g,) = ag.eval_with_grads(ag.sum_all(out), [x])
    assert g.tolist() == [0.0, 5.0]


@given(hnp.arrays(np.float64, st.integers(1, 12), elements=st.floats(-50, 50)))
def test_softmax_sums_to_one(v):
    p = ag.softmax(Tensor(v)).data
    assert abs(p.sum() - 1.0) <= 1e-12
    assert (p >= 0).all()


def test_masked_softmax_zeroes_masked_entries():
    mask = np.array([[True, False, True], [False, True, False]])
    p = ag.softmax(Tensor(np.ones((2, 3))), mask=mask).data
    assert np.allclose(p, [[0.5, 0, 0.5], [0, 1, 0]])
    with pytest.raises(RejectedInputError):
        ag.softmax(Tensor(np.ones(2)), mask=np.array([False, False]))


def test_quadratic_gradient():
    x = Tensor([1.0, 2.0], requires_grad=True)
    value, (g,) = ag.eval_with_grads(ag.sum_all(ag.mul(x, x)), [x])
    assert value == 5.0
    assert g.tolist() == [2.0, 4.0]


def test_constant_graph_has_zero_gradients():
    p = Tensor(np.ones(3), requires_grad=True)
    out = ag.sum_all(ag.mul(Tensor([1.0, 2.0]), 2.0))
    _, (g,) = ag.eval_with_grads(out, [p])
    assert not g.any()


def test_shared_node_gradients_accumulate():
    x = Tensor(np.array([3.0]), requires_grad=True)
    y = ag.mul(x, x)
    _, (g,) = ag.eval_with_grads(ag.sum_all(ag.add(y, y)), [x])
    assert g.tolist() == [12.0]


def test_three_layer_perceptron_matches_finite_differences(rng):
    x = rng.normal(size=(5, 4))
    w1, w2, w3 = rng.normal(size=(4, 6)), rng.normal(size=(6, 5)), rng.normal(size=(5, 2))
    b1 = rng.normal(size=6)

    def build(w1, b1, w2, w3):
        h = ag.sigmoid(ag.fully_connected(Tensor(x), w1, b1))
        h = ag.leaky_relu(ag.matmul(h, w2), 0.2)
        return ag.cross_entropy_loss(ag.matmul(h, w3), [0, 1, 1, 0, 1])

    _gradcheck(build, [w1, b1, w2, w3])


def test_linear_finite_difference_is_exact(rng):
    a = rng.normal(size=7)
    grad = ag.finite_diff_grad(lambda x: float(a @ x), rng.normal(size=7))
    assert np.max(np.abs(grad - a)) <= 1e-9


def test_finite_difference_of_sine():
    grad = ag.finite_diff_grad(lambda x: float(np.sin(x[0])), np.array([0.3]))
    assert grad[0] == pytest.approx(np.cos(0.3), abs=1e-8)


@pytest.mark.parametrize("name,build,shapes", [
    ("add", lambda a, b: ag.sum_all(ag.mul(ag.add(a, b), ag.add(a, b))), [(3, 4), (4,)]),
    ("mul", lambda a, b: ag.sum_all(ag.mul(a, b)), [(2, 3), (2, 1)]),
    ("sigmoid", lambda a: ag.sum_all(ag.sigmoid(a)), [(6,)]),
    ("softmax", lambda a, b: ag.sum_all(ag.mul(ag.softmax(a, axis=-1), b)), [(3, 5), (3, 5)]),
    ("transpose", lambda a, b: ag.sum_all(ag.mul(ag.transpose(a), b)), [(2, 3, 4), (2, 4, 3)]),
    ("reshape", lambda a, b: ag.sum_all(ag.mul(ag.reshape(a, (6, 2)), b)), [(3, 4), (6, 2)]),
    ("concat", lambda a, b, c: ag.sum_all(ag.mul(ag.concat([a, b], axis=1), c)), [(2, 3), (2, 2), (2, 5)]),
    ("mean", lambda a, b: ag.sum_all(ag.mul(ag.mean(a, axis=1), b)), [(3, 4, 2), (3, 2)]),
    ("matmul", lambda a, b: ag.sum_all(ag.mul(ag.matmul(a, b), ag.matmul(a, b))), [(2, 3, 4), (4, 5)]),
    ("gap", lambda a, b: ag.sum_all(ag.mul(ag.global_average_pool(a), b)), [(2, 3, 4, 4), (2, 3)]),
])
def test_primitive_gradients(rng, name, build, shapes):
    _gradcheck(build, [rng.normal(size=s) for s in shapes])


def test_masked_softmax_gradient(rng):
    mask = rng.uniform(size=(4, 4)) > 0.4
    np.fill_diagonal(mask, True)
    b = rng.normal(size=(4, 4))
    _gradcheck(lambda a: ag.sum_all(ag.mul(ag.softmax(a, mask=mask), Tensor(b))), [rng.normal(size=(4, 4))])


def test_leaky_relu_gradient_away_from_kink(rng):
    a = rng.normal(size=10)
    a[np.abs(a) < 0.1] = 0.5
    _gradcheck(lambda x: ag.sum_all(ag.mul(ag.leaky_relu(x, 0.2), x)), [a])


@pytest.mark.parametrize("stride,padding,groups", [(1, 0, 1), (2, 1, 1), (1, 1, 2), (2, 3, 4)])
def test_conv2d_gradients(rng, stride, padding, groups):
    x = rng.normal(size=(2, 4, 7, 6))
    w = rng.normal(size=(4, 4 // groups, 3, 3))
    b = rng.normal(size=4)
    proj = rng.normal(size=(2, 4) + ag.conv2d(Tensor(x), Tensor(w), stride=stride, padding=padding,
                                              groups=groups).shape[2:])
    _gradcheck(
        lambda x, w, b: ag.sum_all(ag.mul(ag.conv2d(x, w, b, stride=stride, padding=padding, groups=groups),
                                          Tensor(proj))),
        [x, w, b],
    )


def test_grouped_conv_equals_per_group_convolutions(rng):
    x = rng.normal(size=(1, 3, 6, 6))
    w = rng.normal(size=(3, 1, 3, 3))
    grouped = ag.conv2d(Tensor(x), Tensor(w), groups=3).data
    separate = np.concatenate(
        [ag.conv2d(Tensor(x[:, g:g + 1]), Tensor(w[g:g + 1])).data for g in range(3)], axis=1
    )
    assert np.allclose(grouped, separate, atol=1e-12)


def test_conv2d_matches_naive_loop(rng):
    x = rng.normal(size=(1, 2, 5, 5))
    w = rng.normal(size=(3, 2, 3, 3))
    out = ag.conv2d(Tensor(x), Tensor(w), stride=2, padding=1).data
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    for o in range(3):
        for i in range(3):
            for j in range(3):
                expected = np.sum(xp[0, :, 2 * i:2 * i + 3, 2 * j:2 * j + 3] * w[o])
                assert out[0, o, i, j] == pytest.approx(expected, abs=1e-12)


def test_cross_entropy_gradient(rng):
    _gradcheck(lambda z: ag.cross_entropy_loss(z, [1, 0, 1]), [rng.normal(size=(3, 2))])


def test_shape_mismatch_names_both_shapes():
    with pytest.raises(RejectedInputError, match=r"\(2, 3\).*\(4, 5\)"):
        ag.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 5))))
    with pytest.raises(RejectedInputError):
        ag.add(Tensor(np.ones(3)), Tensor(np.ones(4)))


def test_non_finite_forward_value_is_a_numeric_fault():
    with np.errstate(over="ignore"):
        with pytest.raises(NumericFault) as info:
            ag.mul(Tensor([1e308]), Tensor([1e308]))
    assert info.value.node == "mul"
    assert info.value.exit_code == 3


def test_backward_needs_scalar():
    with pytest.raises(RejectedInputError):
        ag.backward(Tensor(np.ones(2), requires_grad=True))


def test_initializers_respect_bounds(rng):
    w = ag.he_uniform(rng, (200, 50), fan_in=50)
    assert np.abs(w.data).max() <= np.sqrt(6.0 / 50)
    x = ag.xavier_uniform(rng, (20, 30), fan_in=20, fan_out=30)
    assert np.abs(x.data).max() <= np.sqrt(6.0 / 50)
    assert not ag.zeros((3,)).data.any()
