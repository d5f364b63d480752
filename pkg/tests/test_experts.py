import numpy as np
import pytest

from protomoe.experts import (
    ExpertFFN,
    activated_weight_params,
    dense_weight_params,
    make_expert,
    make_segmented_pool,
    segmented_inner_dim,
)
from protomoe.tensor import ConfigError, ShapeError, Tensor


def make_gen(seed):
    return np.random.Generator(np.random.Philox(key=seed))


def dense_two_layer_oracle(x, w1, b1, w2, b2):
    """Independent plain-numpy forward with the same tanh-approx gelu."""
    h = x @ w1 + b1
    g = 0.5 * h * (1.0 + np.tanh(np.sqrt(2.0 / np.pi) * (h + 0.044715 * h ** 3)))
    return g @ w2 + b2


def test_zero_weights_zero_output():
    e = ExpertFFN(Tensor(np.zeros((4, 8))), Tensor(np.zeros(8)),
                  Tensor(np.zeros((8, 4))), Tensor(np.zeros(4)))
    out = e(Tensor(np.random.default_rng(0).standard_normal((5, 4))))
    np.testing.assert_array_equal(out.data, np.zeros((5, 4)))


def test_identity_construction_reproduces_input():
    # w1 embeds into the first D inner units, w2 projects back; identity act
    d, inner = 3, 6
    w1 = np.zeros((d, inner))
    w1[:, :d] = np.eye(d)
    w2 = np.zeros((inner, d))
    w2[:d, :] = np.eye(d)
    e = ExpertFFN(Tensor(w1), Tensor(np.zeros(inner)), Tensor(w2), Tensor(np.zeros(d)),
                  activation="identity")
    x = np.random.default_rng(1).standard_normal((7, d))
    np.testing.assert_allclose(e(Tensor(x)).data, x, rtol=1e-12)


@pytest.mark.parametrize("seed", range(5))
def test_expert_forward_matches_dense_oracle(seed):
    gen = make_gen(seed)
    e = make_expert(6, 10, gen)
    x = gen.standard_normal((9, 6))
    expected = dense_two_layer_oracle(x, e.w1.data, e.b1.data, e.w2.data, e.b2.data)
    np.testing.assert_allclose(e(Tensor(x)).data, expected, atol=1e-6)


def test_expert_shape_error():
    e = make_expert(4, 8, make_gen(0))
    with pytest.raises(ShapeError):
        e(Tensor(np.ones((3, 5))))


def test_segmented_inner_dim_factor_two():
    assert segmented_inner_dim(64, 2) == 128


def test_segmented_inner_dim_four_way():
    assert segmented_inner_dim(64, 4) == 64


def test_segmented_inner_dim_indivisible():
    with pytest.raises(ConfigError):
        segmented_inner_dim(10, 3)


def test_activated_parity_e14a1s1u1_at_768():
    # 12 standard + 1 shared + 1 uncond, top-1, n_act=2 -> inner 1536
    pool = make_segmented_pool(768, 12, 1, 1, 2, seed=0)
    assert pool.d_inner == 1536
    activated = activated_weight_params(pool, k=1)
    assert activated == 2 * (2 * 768 * 1536)
    assert activated == dense_weight_params(768) == 2 * (768 * 3072)


def test_activated_parity_three_routed_plus_shared():
    # 3 routed + 1 shared activated -> n_act=4 -> inner = D
    pool = make_segmented_pool(64, 12, 1, 1, 4, seed=0)
    assert pool.d_inner == 64
    assert activated_weight_params(pool, k=3) == dense_weight_params(64)


@pytest.mark.parametrize("dim", [32, 64, 128])
@pytest.mark.parametrize("n_act", [1, 2, 4])
def test_parity_grid(dim, n_act):
    n_shared = 1 if n_act > 1 else 0
    k = n_act - n_shared
    pool = make_segmented_pool(dim, max(k, 1) + 3, n_shared, 1, n_act, seed=3)
    assert activated_weight_params(pool, k) == dense_weight_params(dim)


def test_param_count_formula():
    e = make_expert(6, 10, make_gen(4))
    assert e.param_count() == 6 * 10 + 10 + 10 * 6 + 6
    assert e.weight_param_count() == 2 * 6 * 10


def test_pool_shares_dims():
    pool = make_segmented_pool(32, 4, 1, 1, 2, seed=9)
    dims = {e.dim for e in pool.all_experts()}
    inners = {e.d_inner for e in pool.all_experts()}
    assert dims == {32} and inners == {64}


def test_forward_row_independence():
    gen = make_gen(11)
    e = make_expert(5, 8, gen)
    x = gen.standard_normal((6, 5))
    perm = gen.permutation(6)
    out = e(Tensor(x)).data
    out_perm = e(Tensor(x[perm])).data
    np.testing.assert_allclose(out_perm, out[perm], rtol=1e-12)


def test_init_is_seed_reproducible():
    p1 = make_segmented_pool(16, 3, 1, 1, 2, seed=42)
    p2 = make_segmented_pool(16, 3, 1, 1, 2, seed=42)
    for a, b in zip(p1.parameters(), p2.parameters()):
        np.testing.assert_array_equal(a.data, b.data)
    p3 = make_segmented_pool(16, 3, 1, 1, 2, seed=43)
    assert not np.array_equal(p1.standard[0].w1.data, p3.standard[0].w1.data)
