"""Channel-wised sparse self-attention over the decoupled feature stack.

A squeeze step (global average pool + two-layer MLP) scores every channel;
sorting the scores yields a permutation that pairs each channel with a
unique partner, and the attention output is the residual sum of the stack
with its permuted self. The permutation matrix is never materialized in the
forward path: it is applied as a channel gather. The dense-matrix form is
exposed on the plan for verification.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffops as ops
from .decoupler import DecoupledFeatures, mutual_targets, subspace_slices
from .diffops import ParameterStore, Tensor
from .modality_graph import MODALITIES, Modality


@dataclass(frozen=True)
class PermutationPlan:
    """Channel scores, the sort order Q, and the implied permutation matrix.

    ``order[i] = j`` means channel j holds the i-th highest score; ties are
    broken toward the lower channel index (stable descending sort).
    """

    scores: np.ndarray
    order: np.ndarray

    def __post_init__(self) -> None:
        n = self.scores.shape[0]
        if sorted(self.order.tolist()) != list(range(n)):
            raise ValueError("order must be a permutation of the channel indices")

    @property
    def matrix(self) -> np.ndarray:
        """Dense 0/1 permutation matrix P with rows e_{order[i]}."""
        n = self.order.shape[0]
        p = np.zeros((n, n), dtype=np.float64)
        p[np.arange(n), self.order] = 1.0
        return p


def permutation_from_scores(scores: np.ndarray) -> PermutationPlan:
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    if np.isnan(scores).any():
        raise ValueError("channel scores contain NaN")
    order = np.argsort(-scores, kind="stable")
    return PermutationPlan(scores=scores, order=order)


def register_cssa_params(store: ParameterStore, c1: int, slope: float = 0.01) -> None:
    """Per-modality score MLP (c1 -> c1/2 -> c1)."""
    hidden = max(1, c1 // 2)
    for m in MODALITIES:
        prefix = f"cssa.{m.key}"
        store.linear(f"{prefix}.fc1", c1, hidden, slope=slope)
        store.linear(f"{prefix}.fc2", hidden, c1, slope=slope)


def channel_scores(x: Tensor, store: ParameterStore, m: Modality, slope: float = 0.01) -> Tensor:
    """(1, C1, D, H, W) -> (1, C1) score vector via GAP + MLP."""
    prefix = f"cssa.{m.key}"
    w1 = store[f"{prefix}.fc1.w"]
    if x.shape[1] != w1.shape[1]:
        raise ValueError(f"CSSA expects {w1.shape[1]} channels, got {x.shape[1]}")
    pooled = ops.global_average_pool(x)
    h = ops.leaky_rectifier(ops.linear(pooled, w1, store[f"{prefix}.fc1.b"]), slope)
    return ops.linear(h, store[f"{prefix}.fc2.w"], store[f"{prefix}.fc2.b"])


def cssa_forward(
    x: Tensor,
    store: ParameterStore,
    m: Modality,
    slope: float = 0.01,
    soft_gate: bool = False,
) -> tuple[Tensor, PermutationPlan]:
    """Residual channel-permutation attention: y[c] = x[c] + x[order[c]].

    The sort is a non-differentiable decision, so the permutation is a
    constant of the forward pass; gradients flow through both residual paths.
    With ``soft_gate`` the gathered term is weighted by sigmoid of its score,
    which gives the score MLP a gradient path (off by default: the plain
    residual form has none).
    """
    scores_t = channel_scores(x, store, m, slope)
    plan = permutation_from_scores(scores_t.data[0].numpy())
    gathered = ops.channel_gather(x, plan.order, axis=1)
    if soft_gate:
        gate = ops.sigmoid(ops.channel_gather(scores_t, plan.order, axis=1))
        gate = ops.reshape(gate, (1, x.shape[1], 1, 1, 1))
        y = ops.add(x, ops.mul(gate, gathered))
    else:
        y = ops.add(x, gathered)
    return y, plan


def apply_cssa(
    features: DecoupledFeatures,
    store: ParameterStore,
    slope: float = 0.01,
    soft_gate: bool = False,
) -> PermutationPlan:
    """Run CSSA on a modality's stack and fill the post-attention sub-spaces."""
    y, plan = cssa_forward(features.stacked_pre, store, features.modality, slope, soft_gate)
    _split_post(features, y)
    return plan


def skip_cssa(features: DecoupledFeatures) -> None:
    """Ablation path: post-attention sub-spaces are the pre-attention ones."""
    _split_post(features, features.stacked_pre)


def _split_post(features: DecoupledFeatures, stacked: Tensor) -> None:
    c = features.channels
    slices = subspace_slices(features.modality, c)
    features.stacked_post = stacked
    features.self_post = ops.narrow(stacked, 1, slices[None][0], c)
    features.mutual_post = {
        target: ops.narrow(stacked, 1, slices[target][0], c)
        for target in mutual_targets(features.modality)
    }
