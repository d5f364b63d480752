import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from protomoe.router import (
    KMeansState,
    activate,
    classifier_route,
    kmeans_assign,
    kmeans_init,
    kmeans_update,
    linear_router_scores,
    make_prototypes,
    partition_by_condition,
    partition_from_mask,
    prototype_scores,
    topk_gate,
)
from protomoe.tensor import ConfigError, ShapeError, Tensor, gradcheck


def make_gen(seed):
    return np.random.Generator(np.random.Philox(key=seed))


# -- conditional partitioning ------------------------------------------------------


def test_partition_all_null():
    part = partition_by_condition(np.array([9, 9, 9]), null_label=9, seq_len=4)
    assert part.mask_uncond.all() and not part.mask_cond.any()


def test_partition_no_null():
    part = partition_by_condition(np.array([0, 1, 2]), null_label=9, seq_len=4)
    assert part.mask_cond.all() and not part.mask_uncond.any()


def test_partition_mixed_rows():
    part = partition_by_condition(np.array([3, 9, 7]), null_label=9, seq_len=2)
    np.testing.assert_array_equal(part.mask_uncond,
                                  [[False, False], [True, True], [False, False]])


@settings(max_examples=30, deadline=None)
@given(st.lists(st.integers(0, 5), min_size=1, max_size=10), st.integers(1, 6))
def test_partition_masks_complementary(labels, seq_len):
    part = partition_by_condition(np.array(labels), null_label=5, seq_len=seq_len)
    assert (part.mask_uncond ^ part.mask_cond).all()
    # constant across L within a sample
    assert (part.mask_uncond == part.mask_uncond[:, :1]).all()


def test_partition_from_mask_matches_labels():
    labels = np.array([1, 5, 2, 5])
    by_label = partition_by_condition(labels, null_label=5, seq_len=3)
    by_mask = partition_from_mask(labels == 5, seq_len=3)
    np.testing.assert_array_equal(by_label.mask_uncond, by_mask.mask_uncond)


# -- prototypical scores ------------------------------------------------------


def test_prototype_scores_parallel_vector():
    proto = make_prototypes(2, 3, seed=0, alpha=1.0)
    proto.p.data[0] = np.array([2.0, 0.0, 0.0])
    proto.p.data[1] = np.array([0.0, 1.0, 0.0])
    x = Tensor(np.array([[5.0, 0.0, 0.0]]))
    z = prototype_scores(x, proto)
    assert z.data[0, 0] == pytest.approx(1.0, abs=1e-6)
    assert z.data[0, 1] == pytest.approx(0.0, abs=1e-9)


def test_prototype_scores_hand_value():
    proto = make_prototypes(1, 2, seed=0, alpha=1.0)
    proto.p.data[0] = np.array([1.0, 0.0])
    z = prototype_scores(Tensor(np.array([[1.0, 1.0]])), proto)
    assert z.data[0, 0] == pytest.approx(1.0 / np.sqrt(2.0), abs=1e-7)


def test_prototype_scores_alpha_scales():
    proto = make_prototypes(1, 2, seed=0, alpha=3.0)
    proto.p.data[0] = np.array([1.0, 0.0])
    z = prototype_scores(Tensor(np.array([[1.0, 0.0]])), proto)
    assert z.data[0, 0] == pytest.approx(3.0, abs=1e-6)


@pytest.mark.parametrize("seed", range(5))
def test_prototype_scores_scale_invariance(seed):
    gen = make_gen(seed)
    proto = make_prototypes(4, 6, seed=seed)
    x = gen.standard_normal((7, 6))
    c = float(gen.uniform(0.1, 10.0))
    z1 = prototype_scores(Tensor(x), proto).data
    z2 = prototype_scores(Tensor(c * x), proto).data
    np.testing.assert_allclose(z1, z2, atol=1e-6)


def test_prototype_scores_shape_error():
    proto = make_prototypes(2, 3, seed=0)
    with pytest.raises(ShapeError):
        prototype_scores(Tensor(np.ones((4, 5))), proto)


def test_prototype_scores_gradcheck():
    gen = make_gen(9)
    proto = make_prototypes(3, 4, seed=9)
    x = Tensor(gen.standard_normal((5, 4)), requires_grad=True)
    err = gradcheck(lambda: (prototype_scores(x, proto) ** 2.0).sum(), [x, proto.p])
    assert err < 1e-6


# -- activation ------------------------------------------------------


def test_activate_identity_passthrough():
    z = Tensor(np.array([[-0.2, 0.9]]))
    np.testing.assert_array_equal(activate(z, "identity").data, z.data)


def test_activate_softmax_preserves_argmax():
    gen = make_gen(1)
    z = gen.standard_normal((6, 5))
    s = activate(Tensor(z), "softmax").data
    np.testing.assert_array_equal(np.argmax(s, axis=1), np.argmax(z, axis=1))


def test_activate_sigmoid_closed_form():
    z = Tensor(np.array([1.0 / np.sqrt(2.0)]))
    assert activate(z, "sigmoid").data[0] == pytest.approx(0.6698, abs=5e-5)


def test_activate_unknown_kind():
    with pytest.raises(ConfigError):
        activate(Tensor(np.ones(2)), "relu")


# -- top-K gating ------------------------------------------------------


def test_topk_single_argmax():
    res = topk_gate(Tensor(np.array([[0.9, -0.2, 0.5]])), 1)
    assert res.indices.tolist() == [[0]]
    assert res.gates.data[0, 0] == pytest.approx(0.9)


def test_topk_tie_lowest_index():
    res = topk_gate(Tensor(np.array([[0.5, 0.5]])), 1)
    assert res.indices.tolist() == [[0]]


def test_topk_matches_sort_oracle():
    gen = make_gen(2)
    s = gen.standard_normal((40, 6))
    res = topk_gate(Tensor(s), 3)
    for i in range(40):
        expected = np.argsort(-s[i], kind="stable")[:3]
        np.testing.assert_array_equal(res.indices[i], expected)
        np.testing.assert_allclose(res.gates.data[i], s[i, expected])


def test_topk_out_of_range():
    with pytest.raises(ConfigError):
        topk_gate(Tensor(np.ones((2, 3))), 4)


def test_topk_indices_distinct_and_gates_match_scores():
    gen = make_gen(3)
    s = gen.standard_normal((25, 8))
    res = topk_gate(Tensor(s), 4)
    for i in range(25):
        assert len(set(res.indices[i])) == 4
        for j, e in enumerate(res.indices[i]):
            assert res.gates.data[i, j] == s[i, e]


@pytest.mark.parametrize("kind", ["identity", "sigmoid"])
def test_argmax_invariant_to_positive_scaling(kind):
    gen = make_gen(4)
    z = gen.standard_normal((30, 5))
    for c in (0.1, 1.0, 7.3):
        a = activate(Tensor(z), kind)
        b = activate(Tensor(c * z), kind)
        np.testing.assert_array_equal(topk_gate(a, 2).indices, topk_gate(b, 2).indices)


def test_topk_gate_gradient_flows_to_selected_only():
    s = Tensor(np.array([[0.9, -0.2, 0.5]]), requires_grad=True)
    res = topk_gate(s, 2)
    res.gates.sum().backward()
    np.testing.assert_array_equal(s.grad, [[1.0, 0.0, 1.0]])


# -- linear router ------------------------------------------------------


def test_linear_router_zero_weights_tie():
    scores = linear_router_scores(Tensor(np.ones((3, 4))), Tensor(np.zeros((4, 5))))
    res = topk_gate(scores, 1)
    assert (res.indices == 0).all()


def test_linear_router_basis_routing():
    # token e_j scores highest on expert j when w_r is the identity
    x = Tensor(np.eye(4))
    res = topk_gate(linear_router_scores(x, Tensor(np.eye(4))), 1)
    np.testing.assert_array_equal(res.indices[:, 0], np.arange(4))


def test_linear_router_matches_matmul_oracle():
    gen = make_gen(5)
    x, w = gen.standard_normal((6, 4)), gen.standard_normal((4, 3))
    out = linear_router_scores(Tensor(x), Tensor(w))
    np.testing.assert_allclose(out.data, x @ w, rtol=1e-12)


# -- k-means ------------------------------------------------------


def test_kmeans_token_equal_to_centroid():
    state = KMeansState(centroids=np.eye(4), counts=np.zeros(4, dtype=np.int64))
    idx = kmeans_assign(np.eye(4)[2:3], state)
    assert idx.tolist() == [2]


def test_kmeans_equidistant_tie_lowest():
    state = KMeansState(centroids=np.array([[1.0], [-1.0]]), counts=np.zeros(2, dtype=np.int64))
    idx = kmeans_assign(np.array([[0.0]]), state)
    assert idx.tolist() == [0]


def test_kmeans_assign_matches_bruteforce():
    gen = make_gen(6)
    x = gen.standard_normal((100, 5))
    state = kmeans_init(x, 7, seed=6)
    idx = kmeans_assign(x, state)
    for i in range(100):
        dists = np.linalg.norm(x[i] - state.centroids, axis=1)
        assert idx[i] == int(np.argmin(dists))


def test_kmeans_update_single_cluster():
    gen = make_gen(7)
    x = gen.standard_normal((10, 3))
    state = KMeansState(centroids=np.vstack([x.mean(0) * 0, np.full(3, 100.0)]),
                        counts=np.zeros(2, dtype=np.int64))
    idx = kmeans_assign(x, state)
    assert (idx == 0).all()
    new = kmeans_update(x, idx, state)
    np.testing.assert_allclose(new.centroids[0], x.mean(axis=0), rtol=1e-12)
    np.testing.assert_array_equal(new.centroids[1], state.centroids[1])  # empty frozen
    assert new.counts.tolist() == [10, 0]


def test_kmeans_update_singletons():
    x = np.array([[1.0, 0.0], [0.0, 2.0]])
    state = KMeansState(centroids=np.array([[0.9, 0.0], [0.0, 1.9]]),
                        counts=np.zeros(2, dtype=np.int64))
    new = kmeans_update(x, kmeans_assign(x, state), state)
    np.testing.assert_allclose(new.centroids, x)


def test_kmeans_update_matches_group_mean_oracle():
    gen = make_gen(8)
    x = gen.standard_normal((60, 4))
    state = kmeans_init(x, 5, seed=8)
    idx = kmeans_assign(x, state)
    new = kmeans_update(x, idx, state)
    for e in range(5):
        members = x[idx == e]
        if len(members):
            np.testing.assert_allclose(new.centroids[e], members.mean(axis=0), atol=1e-6)
        else:
            np.testing.assert_array_equal(new.centroids[e], state.centroids[e])


@pytest.mark.parametrize("seed", range(5))
def test_kmeans_objective_never_increases(seed):
    gen = make_gen(100 + seed)
    x = gen.standard_normal((80, 6))
    state = kmeans_init(x, 6, seed=seed)

    def objective(st):
        idx = kmeans_assign(x, st)
        return float(((x - st.centroids[idx]) ** 2).sum())

    before = objective(state)
    idx = kmeans_assign(x, state)
    state = kmeans_update(x, idx, state)
    after = objective(state)
    assert after <= before + 1e-9


def test_kmeans_init_distinct_tokens():
    gen = make_gen(10)
    x = gen.standard_normal((20, 3))
    state = kmeans_init(x, 5, seed=10)
    assert state.centroids.shape == (5, 3)
    # all centroids come from the token set
    for c in state.centroids:
        assert (np.abs(x - c).sum(axis=1) < 1e-12).any()


def test_kmeans_affinity_scores_returned():
    gen = make_gen(11)
    x = gen.standard_normal((9, 3))
    state = kmeans_init(x, 3, seed=11)
    idx, scores = kmeans_assign(x, state, return_scores=True)
    assert scores.shape == (9, 3)
    np.testing.assert_array_equal(np.argmax(scores, axis=1), idx)


# -- classifier router ------------------------------------------------------


def test_classifier_constant_tokens_pool_to_constant():
    x = np.full((2, 5, 3), 0.0)
    x[0] = 1.5
    x[1] = -2.0
    scores, _ = classifier_route(Tensor(x), Tensor(np.eye(3)))
    np.testing.assert_allclose(scores.data, [[1.5] * 3, [-2.0] * 3])


def test_classifier_zero_weights_tie_to_zero():
    gen = make_gen(12)
    x = Tensor(gen.standard_normal((4, 6, 3)))
    _, idx = classifier_route(x, Tensor(np.zeros((3, 5))))
    assert (idx == 0).all()


def test_partition_routes_reconstruct_every_token_once():
    # scatter(uncond branch) then scatter-add(cond branch) touches each
    # token exactly once, so routing identity transforms reconstruct x
    gen = make_gen(14)
    x = gen.standard_normal((4, 3, 5))
    part = partition_by_condition(np.array([0, 9, 2, 9]), null_label=9, seq_len=3)
    flat = Tensor(x.reshape(-1, 5))
    out = Tensor(np.zeros_like(flat.data))
    out = out.scatter_rows(part.flat_uncond, flat.gather_rows(part.flat_uncond))
    out = out.scatter_add_rows(part.flat_cond, flat.gather_rows(part.flat_cond))
    np.testing.assert_array_equal(out.data, flat.data)


def test_classifier_matches_pool_then_matmul_oracle():
    gen = make_gen(13)
    x = gen.standard_normal((5, 7, 4))
    w = gen.standard_normal((4, 6))
    scores, idx = classifier_route(Tensor(x), Tensor(w))
    pooled = x.mean(axis=1)
    np.testing.assert_allclose(scores.data, pooled @ w, rtol=1e-10)
    np.testing.assert_array_equal(idx, np.argmax(pooled @ w, axis=1))
