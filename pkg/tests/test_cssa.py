import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from modalseg import diffops as ops
from modalseg.cssa import (
    apply_cssa,
    channel_scores,
    cssa_forward,
    permutation_from_scores,
    register_cssa_params,
)
from modalseg.decoupler import decouple, register_decoupler_params
from modalseg.diffops import ParameterStore, Tensor, backward
from modalseg.modality_graph import Modality


def make_store(c1=32, seed=0):
    store = ParameterStore(seed=seed)
    register_cssa_params(store, c1)
    return store


def leaky(v, slope=0.01):
    return np.where(v >= 0, v, slope * v)


def test_scores_length_is_4c():
    store = make_store(32)
    x = Tensor(np.random.default_rng(0).standard_normal((1, 32, 4, 4, 4)).astype(np.float32))
    s = channel_scores(x, store, Modality.T1)
    assert s.shape == (1, 32)


def test_scores_on_constant_channels_match_manual_mlp():
    store = make_store(8, seed=1)
    consts = np.arange(8, dtype=np.float32) - 3.5
    x_np = np.broadcast_to(consts[None, :, None, None, None], (1, 8, 2, 2, 2)).copy()
    got = channel_scores(Tensor(x_np), store, Modality.T2).numpy()[0]
    # GAP of constant channels is the constant vector; apply the MLP by hand
    w1 = store["cssa.t2.fc1.w"].numpy()
    b1 = store["cssa.t2.fc1.b"].numpy()
    w2 = store["cssa.t2.fc2.w"].numpy()
    b2 = store["cssa.t2.fc2.b"].numpy()
    expected = w2 @ leaky(w1 @ consts + b1) + b2
    assert np.allclose(got, expected, atol=1e-5)


def test_gap_matches_loop_inside_scores():
    rng = np.random.default_rng(2)
    x_np = rng.standard_normal((1, 8, 2, 2, 2)).astype(np.float32)
    pooled = ops.global_average_pool(Tensor(x_np)).numpy()[0]
    for c in range(8):
        assert abs(pooled[c] - x_np[0, c].mean()) < 1e-6


def test_permutation_descending_scores_is_identity():
    s = np.array([5.0, 4.0, 3.0, 2.0])
    plan = permutation_from_scores(s)
    assert np.array_equal(plan.order, [0, 1, 2, 3])
    assert np.array_equal(plan.matrix, np.eye(4))


def test_permutation_example_four_scores():
    plan = permutation_from_scores(np.array([0.1, 0.9, 0.5, 0.3]))
    assert tuple(plan.order) == (1, 2, 3, 0)
    x = np.arange(4 * 2, dtype=np.float64).reshape(4, 2)
    permuted = plan.matrix @ x
    assert np.array_equal(permuted, x[[1, 2, 3, 0]])


def test_permutation_ties_break_low_index():
    plan = permutation_from_scores(np.zeros(6))
    assert np.array_equal(plan.order, np.arange(6))
    plan = permutation_from_scores(np.array([1.0, 2.0, 2.0, 0.5]))
    assert tuple(plan.order) == (1, 2, 0, 3)


def test_permutation_rejects_nan():
    with pytest.raises(ValueError):
        permutation_from_scores(np.array([0.1, np.nan, 0.3]))


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_permutation_matrix_validity_random(seed):
    scores = np.random.default_rng(seed).standard_normal(32)
    plan = permutation_from_scores(scores)
    p = plan.matrix
    assert np.array_equal(p.sum(axis=0), np.ones(32))
    assert np.array_equal(p.sum(axis=1), np.ones(32))
    assert np.count_nonzero(p) == 32  # sparse: one entry per channel
    assert abs(abs(np.linalg.det(p)) - 1.0) < 1e-9
    inverse = np.empty(32, dtype=int)
    inverse[plan.order] = np.arange(32)  # bijective mapping inverts
    assert np.array_equal(plan.order[inverse], np.arange(32))


def test_identity_permutation_doubles_input():
    store = make_store(8, seed=3)
    # zero the score MLP output so all scores tie -> identity permutation
    store["cssa.t1.fc2.w"].data.zero_()
    store["cssa.t1.fc2.b"].data.zero_()
    rng = np.random.default_rng(4)
    x_np = rng.standard_normal((1, 8, 3, 3, 3)).astype(np.float32)
    y, plan = cssa_forward(Tensor(x_np), store, Modality.T1)
    assert np.array_equal(plan.order, np.arange(8))
    assert np.allclose(y.numpy(), 2.0 * x_np, atol=1e-6)


def test_forward_matches_gather_and_dense_oracle():
    store = make_store(8, seed=5)
    rng = np.random.default_rng(6)
    x_np = rng.standard_normal((1, 8, 2, 2, 2)).astype(np.float64)
    y, plan = cssa_forward(Tensor(x_np, dtype=torch.float64), store_f64(store), Modality.T1)
    # dense-matrix oracle: y = x + P x over flattened channels
    flat = x_np.reshape(8, -1)
    expected = flat + plan.matrix @ flat
    assert np.max(np.abs(y.numpy().reshape(8, -1) - expected)) < 1e-12


def store_f64(store32: ParameterStore) -> ParameterStore:
    store = ParameterStore(seed=store32.seed, dtype=torch.float64)
    register_cssa_params(store, 8)
    store.load_state_dict({k: v.astype(np.float64) for k, v in store32.state_dict().items()})
    return store


def test_channel_sum_conservation():
    store = make_store(8, seed=7)
    rng = np.random.default_rng(8)
    x_np = rng.standard_normal((1, 8, 4, 4, 4)).astype(np.float32)
    y, _ = cssa_forward(Tensor(x_np), store, Modality.FL)
    assert np.allclose(
        y.numpy().sum(axis=1), 2.0 * x_np.sum(axis=1), atol=1e-4
    )


def test_hard_gate_gives_mlp_no_gradient():
    store = make_store(8, seed=9)
    rng = np.random.default_rng(10)
    x = Tensor(rng.standard_normal((1, 8, 2, 2, 2)).astype(np.float32), requires_grad=True)
    y, _ = cssa_forward(x, store, Modality.T1, soft_gate=False)
    store.zero_grads()
    backward(ops.sum_all(y))
    assert x.grad is not None
    assert store["cssa.t1.fc1.w"].grad is None
    assert store["cssa.t1.fc2.w"].grad is None


def test_soft_gate_gives_mlp_gradient():
    store = make_store(8, seed=11)
    rng = np.random.default_rng(12)
    x = Tensor(rng.standard_normal((1, 8, 2, 2, 2)).astype(np.float32), requires_grad=True)
    y, _ = cssa_forward(x, store, Modality.T1, soft_gate=True)
    store.zero_grads()
    backward(ops.sum_all(y))
    g = store["cssa.t1.fc1.w"].grad
    assert g is not None and float(g.abs().sum()) > 0


def test_apply_cssa_fills_post_subspaces():
    store = ParameterStore(seed=13)
    register_decoupler_params(store, 8)
    register_cssa_params(store, 32)
    rng = np.random.default_rng(14)
    x = Tensor(rng.standard_normal((1, 1, 8, 8, 8)).astype(np.float32))
    feats = decouple(x, Modality.TC, store, 8)
    plan = apply_cssa(feats, store)
    assert feats.stacked_post is not None and feats.self_post is not None
    assert set(feats.mutual_post) == {Modality.T1, Modality.T2, Modality.FL}
    # re-separation is exactly the channel ranges of the attended stack
    stacked = feats.stacked_post.numpy()
    assert np.array_equal(feats.self_post.numpy(), stacked[:, 0:8])
    assert np.array_equal(feats.mutual_post[Modality.T1].numpy(), stacked[:, 8:16])
    # and the attended stack obeys the residual-gather identity
    pre = feats.stacked_pre.numpy()
    assert np.allclose(stacked, pre + pre[:, plan.order], atol=1e-6)


def test_channel_mismatch_rejected():
    store = make_store(8)
    x = Tensor(np.zeros((1, 16, 2, 2, 2), dtype=np.float32))
    with pytest.raises(ValueError):
        channel_scores(x, store, Modality.T1)
