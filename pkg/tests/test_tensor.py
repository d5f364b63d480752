import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from protomoe.tensor import ShapeError, Tensor, concat, gradcheck, no_grad, tensor, zeros

from conftest import rand_tensor


def make_gen(seed):
    return np.random.Generator(np.random.Philox(key=seed))


# -- forward anchors ------------------------------------------------------


def test_matmul_identity():
    eye = Tensor(np.eye(2))
    out = eye @ eye
    np.testing.assert_array_equal(out.data, np.eye(2))


def test_matmul_row_sums():
    a = Tensor([[1.0, 2.0], [3.0, 4.0]])
    b = Tensor([[1.0], [1.0]])
    np.testing.assert_array_equal((a @ b).data, [[3.0], [7.0]])


def test_matmul_shape_mismatch_mentions_both_shapes():
    with pytest.raises(ShapeError) as err:
        Tensor(np.ones((2, 3))) @ Tensor(np.ones((2, 3)))
    assert "(2, 3)" in str(err.value)


def test_l2_normalize_345_triangle():
    out = Tensor([3.0, 4.0]).l2_normalize(axis=0)
    np.testing.assert_allclose(out.data, [0.6, 0.8], atol=1e-7)


def test_l2_normalize_zero_vector():
    out = Tensor([0.0, 0.0]).l2_normalize(axis=0)
    np.testing.assert_array_equal(out.data, [0.0, 0.0])


def test_softmax_uniform():
    out = Tensor([0.0, 0.0, 0.0]).softmax(axis=0)
    np.testing.assert_allclose(out.data, np.full(3, 1 / 3))


def test_sigmoid_zero():
    assert Tensor([0.0]).sigmoid().item() == 0.5


def test_incompatible_broadcast_raises():
    with pytest.raises(ShapeError):
        Tensor(np.ones((2, 3))) + Tensor(np.ones((2, 4)))


# -- backward anchors ------------------------------------------------------


def test_backward_sum_gives_ones():
    x = rand_tensor(make_gen(0), 3, 4)
    x.sum().backward()
    np.testing.assert_array_equal(x.grad, np.ones((3, 4)))


def test_backward_half_square_gives_x():
    x = rand_tensor(make_gen(1), 5)
    ((x * x).sum() * 0.5).backward()
    np.testing.assert_allclose(x.grad, x.data, rtol=1e-12)


def test_backward_requires_scalar():
    x = rand_tensor(make_gen(2), 3)
    with pytest.raises(ShapeError):
        (x * 2.0).backward()


def test_diamond_graph_accumulates_once():
    # d = a*b + a*c; da = b + c only if each node is visited exactly once
    g = make_gen(3)
    a, b, c = (rand_tensor(g, 4) for _ in range(3))
    (a * b + a * c).sum().backward()
    np.testing.assert_allclose(a.grad, b.data + c.data, rtol=1e-12)


def test_off_path_grad_stays_zero():
    g = make_gen(4)
    x, y = rand_tensor(g, 3), rand_tensor(g, 3)
    (x * 2.0).sum().backward()
    assert y.grad is None
    assert x.grad is not None


def test_backward_deterministic_bitwise():
    def run():
        g = make_gen(77)
        x = rand_tensor(g, 6, 5)
        w = rand_tensor(g, 5, 4)
        ((x @ w).gelu().softmax(axis=1).sum(axis=0).mean()).backward()
        return x.grad.copy(), w.grad.copy()

    gx1, gw1 = run()
    gx2, gw2 = run()
    assert np.array_equal(gx1, gx2) and np.array_equal(gw1, gw2)


def test_middle_axis_broadcast_add():
    g = make_gen(5)
    a = rand_tensor(g, 2, 1, 4)
    b = rand_tensor(g, 2, 3, 4)
    out = a + b
    assert out.shape == (2, 3, 4)
    out.sum().backward()
    np.testing.assert_array_equal(a.grad, np.full((2, 1, 4), 3.0))
    np.testing.assert_array_equal(b.grad, np.ones((2, 3, 4)))


def test_no_grad_blocks_recording():
    x = rand_tensor(make_gen(6), 3)
    with no_grad():
        y = (x * x).sum()
    assert not y.requires_grad


def test_detach_cuts_graph():
    x = rand_tensor(make_gen(7), 3)
    (x.detach() * x).sum().backward()
    np.testing.assert_allclose(x.grad, x.data)  # only the non-detached factor


# -- finite-difference suite ------------------------------------------------------

UNARY_OPS = {
    "exp": lambda t: t.exp(),
    "log": lambda t: (t * t + 0.5).log(),  # keep the argument positive
    "sigmoid": lambda t: t.sigmoid(),
    "tanh": lambda t: t.tanh(),
    "gelu": lambda t: t.gelu(),
    "softmax": lambda t: t.softmax(axis=1),
    "log_softmax": lambda t: t.log_softmax(axis=1),
    "layer_norm": lambda t: t.layer_norm(axis=-1),
    "l2_normalize": lambda t: t.l2_normalize(axis=1),
    "pow": lambda t: (t * t + 1.0) ** 1.5,
    "mean_axis": lambda t: t.mean(axis=0),
    "sum_axis": lambda t: t.sum(axis=1),
    "reshape": lambda t: t.reshape(4, 3),
    "transpose": lambda t: t.transpose(1, 0),
    "neg": lambda t: -t,
}


@pytest.mark.parametrize("name", sorted(UNARY_OPS))
@pytest.mark.parametrize("seed", range(3))
def test_gradcheck_unary(name, seed):
    x = rand_tensor(make_gen(1000 + seed), 3, 4)
    op = UNARY_OPS[name]
    err = gradcheck(lambda: (op(x) * np.pi).sum(), [x])
    assert err < 1e-6, f"{name}: {err}"


BINARY_OPS = {
    "add": lambda a, b: a + b,
    "sub": lambda a, b: a - b,
    "mul": lambda a, b: a * b,
    "div": lambda a, b: a / (b * b + 1.0),
    "scale": lambda a, b: a * 2.5 + b * 0.0,
}


@pytest.mark.parametrize("name", sorted(BINARY_OPS))
@pytest.mark.parametrize("seed", range(3))
def test_gradcheck_binary(name, seed):
    g = make_gen(2000 + seed)
    a, b = rand_tensor(g, 4, 3), rand_tensor(g, 4, 3)
    op = BINARY_OPS[name]
    err = gradcheck(lambda: (op(a, b).sigmoid()).sum(), [a, b])
    assert err < 1e-6, f"{name}: {err}"


@pytest.mark.parametrize("seed", range(10))
def test_gradcheck_matmul_many_seeds(seed):
    g = make_gen(3000 + seed)
    a, b = rand_tensor(g, 3, 4), rand_tensor(g, 4, 2)
    err = gradcheck(lambda: ((a @ b) * (a @ b)).sum(), [a, b])
    assert err < 1e-6


def test_gradcheck_batched_matmul():
    g = make_gen(31)
    a, b = rand_tensor(g, 2, 3, 4), rand_tensor(g, 2, 4, 5)
    err = gradcheck(lambda: (a @ b).tanh().sum(), [a, b])
    assert err < 1e-6


def test_gradcheck_broadcast_matmul():
    # stacked left operand against a shared right matrix
    g = make_gen(32)
    a, b = rand_tensor(g, 2, 3, 4), rand_tensor(g, 4, 5)
    err = gradcheck(lambda: (a @ b).sigmoid().sum(), [a, b])
    assert err < 1e-6


def test_gradcheck_l2_normalize_5vector():
    x = rand_tensor(make_gen(33), 5)
    err = gradcheck(lambda: (x.l2_normalize(axis=0) * np.arange(1.0, 6.0)).sum(), [x])
    assert err < 1e-6


# -- gather / scatter ------------------------------------------------------


def test_gather_all_true_is_identity():
    x = rand_tensor(make_gen(40), 4, 3)
    out = x.gather_rows(np.ones(4, dtype=bool))
    np.testing.assert_array_equal(out.data, x.data)


def test_gather_all_false_empty_and_scatter_noop():
    x = rand_tensor(make_gen(41), 4, 3)
    mask = np.zeros(4, dtype=bool)
    gathered = x.gather_rows(mask)
    assert gathered.shape == (0, 3)
    target = rand_tensor(make_gen(42), 4, 3, requires_grad=False)
    out = target.scatter_rows(mask, gathered)
    np.testing.assert_array_equal(out.data, target.data)


def test_scatter_gather_round_trip_and_complement():
    g = make_gen(43)
    x = rand_tensor(g, 8, 5, requires_grad=False)
    target = rand_tensor(g, 8, 5, requires_grad=False)
    mask = g.random(8) < 0.5
    out = target.scatter_rows(mask, x.gather_rows(mask))
    np.testing.assert_array_equal(out.data[mask], x.data[mask])
    np.testing.assert_array_equal(out.data[~mask], target.data[~mask])


def test_scatter_count_mismatch():
    x = rand_tensor(make_gen(44), 4, 3)
    with pytest.raises(ShapeError):
        x.scatter_rows(np.array([True, False, True, False]), Tensor(np.ones((3, 3))))


def test_gather_scatter_gradients_route_through_selected_rows():
    g = make_gen(45)
    x = rand_tensor(g, 6, 2)
    mask = np.array([True, False, True, False, False, True])
    (x.gather_rows(mask) * 3.0).sum().backward()
    expected = np.where(mask[:, None], 3.0, 0.0) * np.ones((1, 2))
    np.testing.assert_array_equal(x.grad, expected)


def test_gradcheck_gather_scatter_chain():
    g = make_gen(46)
    x, v = rand_tensor(g, 5, 3), rand_tensor(g, 2, 3)
    mask = np.array([True, False, False, True, False])
    err = gradcheck(lambda: (x.scatter_rows(mask, v).gelu()).sum(), [x, v])
    assert err < 1e-6
    err = gradcheck(lambda: (x.scatter_add_rows(mask, v) ** 2.0).sum(), [x, v])
    assert err < 1e-6


def test_take_rows_duplicate_indices_accumulate():
    x = rand_tensor(make_gen(47), 3, 2)
    idx = np.array([1, 1, 0])
    x.take_rows(idx).sum().backward()
    np.testing.assert_array_equal(x.grad, [[1.0, 1.0], [2.0, 2.0], [0.0, 0.0]])


def test_take_along_rows_values_and_grad():
    x = rand_tensor(make_gen(48), 3, 4)
    idx = np.array([[0, 2], [1, 1], [3, 0]])
    out = x.take_along_rows(idx)
    np.testing.assert_array_equal(out.data, np.take_along_axis(x.data, idx, axis=1))
    err = gradcheck(lambda: (x.take_along_rows(idx) ** 2.0).sum(), [x])
    assert err < 1e-6


def test_concat_gradients():
    g = make_gen(49)
    a, b = rand_tensor(g, 2, 3), rand_tensor(g, 4, 3)
    err = gradcheck(lambda: concat([a, b], axis=0).sigmoid().sum(), [a, b])
    assert err < 1e-6


@settings(max_examples=25, deadline=None)
@given(st.lists(st.booleans(), min_size=1, max_size=12), st.integers(0, 2 ** 31 - 1))
def test_scatter_preserves_complement_property(mask_bits, seed):
    mask = np.array(mask_bits, dtype=bool)
    g = make_gen(seed)
    target = g.standard_normal((mask.size, 3))
    values = g.standard_normal((int(mask.sum()), 3))
    out = Tensor(target).scatter_rows(mask, Tensor(values))
    np.testing.assert_array_equal(out.data[~mask], target[~mask])
    np.testing.assert_array_equal(out.data[mask], values)


def test_zeros_and_tensor_helpers():
    z = zeros((2, 3), dtype=np.float32)
    assert z.dtype == np.float32 and not z.requires_grad
    t = tensor([1.0, 2.0], requires_grad=True)
    assert t.requires_grad and t.shape == (2,)
