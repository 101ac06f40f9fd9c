"""Alignment, segmentation, and total training losses.

The alignment term distills each modality's Self sub-space into the other
available modalities' Mutual sub-spaces for it: per ordered pair (m, n) of
available modalities, the KL divergence from softmax(u_{n->m}/t) to the
detached softmax(s_m/t), channel-wise per voxel, averaged over voxels.
Segmentation is soft Dice plus cross-entropy, deep-supervised across scales
with geometrically decaying weights.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from . import diffops as ops
from .backbone import SegmentationLogits
from .decoupler import DecoupledFeatures
from .diffops import Tensor
from .modality_graph import Modality, ModalityIndicator


@dataclass
class LossConfig:
    temperature: float = 1.0
    kd_mode: str = "pre"  # "pre" (before CSSA), "post" (after), or "none"
    kd_detach_teacher: bool = True
    dice_eps: float = 1e-5
    exclude_lowest_scale: bool = False

    def __post_init__(self) -> None:
        if self.kd_mode not in ("pre", "post", "none"):
            raise ValueError(f"kd_mode must be pre/post/none, got {self.kd_mode!r}")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")


@dataclass
class LossBreakdown:
    """Loss components of one forward pass; ``total`` is the graph node."""

    seg_per_scale: tuple[float, ...]
    weights: tuple[float, ...]
    kd: float
    temperature: float
    total: Tensor

    @property
    def seg(self) -> float:
        return float(np.dot(self.weights, self.seg_per_scale))

    @property
    def total_value(self) -> float:
        return self.total.item()

    def __post_init__(self) -> None:
        if len(self.seg_per_scale) != len(self.weights):
            raise ValueError("one weight per supervised scale")
        if any(w <= 0 for w in self.weights) or abs(sum(self.weights) - 1.0) > 1e-9:
            raise ValueError("weights must be positive and sum to 1")
        values = (*self.seg_per_scale, self.kd, self.total_value)
        if not all(np.isfinite(v) for v in values):
            raise NumericsError(f"non-finite loss: seg={self.seg_per_scale} kd={self.kd}")
        recomposed = self.seg + self.kd
        if abs(recomposed - self.total_value) > 1e-4 * max(1.0, abs(recomposed)):
            raise AssertionError("total loss does not recompose from its parts")


class NumericsError(RuntimeError):
    """Raised when a loss goes non-finite (surfaced by the trainer)."""


def kd_pairs(available: tuple[Modality, ...]) -> list[tuple[Modality, Modality]]:
    """Ordered (target m, expresser n) pairs with both modalities available."""
    return [(m, n) for m in available for n in available if n != m]


def kd_loss(
    features: dict[Modality, DecoupledFeatures],
    temperature: float = 1.0,
    use_post: bool = False,
    detach_teacher: bool = True,
) -> Tensor:
    """Sum over available ordered pairs of voxel-mean KL(mutual || self).

    Absent modalities carry no features, so pairs are restricted to the
    available set; with fewer than two available modalities this is zero.
    """
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    available = tuple(sorted(features, key=int))
    pairs = kd_pairs(available)
    if not pairs:
        ref = next(iter(features.values())).self_pre
        return ops.constant(torch.zeros((), dtype=ref.dtype))
    total: Tensor | None = None
    for m, n in pairs:
        teacher_feats = features[m]
        student_feats = features[n]
        s = teacher_feats.self_post if use_post else teacher_feats.self_pre
        u = student_feats.mutual_post[m] if use_post else student_feats.mutual_pre[m]
        if detach_teacher:
            s = s.detach()
        log_p = ops.log_softmax(ops.mul(u, 1.0 / temperature), axis=1)
        p = ops.softmax(ops.mul(u, 1.0 / temperature), axis=1)
        log_q = ops.log_softmax(ops.mul(s, 1.0 / temperature), axis=1)
        kl = ops.sum_over(ops.mul(p, ops.sub(log_p, log_q)), axes=(1,), keepdim=True)
        term = ops.mean_all(kl)
        total = term if total is None else ops.add(total, term)
    return total


def one_hot_labels(labels: np.ndarray, num_classes: int, dtype=np.float32) -> np.ndarray:
    """(D, H, W) int labels -> (1, K, D, H, W) one-hot."""
    labels = np.asarray(labels)
    if labels.max(initial=0) >= num_classes:
        raise ValueError(f"label id {labels.max()} >= num_classes {num_classes}")
    onehot = np.zeros((num_classes, *labels.shape), dtype=dtype)
    for k in range(num_classes):
        onehot[k] = labels == k
    return onehot[None]


def dice_ce_loss(logits: Tensor, target_onehot, eps: float = 1e-5) -> Tensor:
    """Mean-over-classes soft Dice plus voxel-mean cross-entropy.

    ``eps`` smooths both the Dice numerator and denominator so a class absent
    from prediction and ground truth contributes ~0 rather than 0/0.
    """
    if not isinstance(target_onehot, Tensor):
        target_onehot = ops.constant(np.asarray(target_onehot), dtype=logits.dtype)
    if target_onehot.shape != logits.shape:
        raise ValueError(f"target shape {target_onehot.shape} != logits shape {logits.shape}")
    reduce_axes = (0, *range(2, len(logits.shape)))
    p = ops.softmax(logits, axis=1)
    inter = ops.sum_over(ops.mul(p, target_onehot), axes=reduce_axes)
    denom = ops.add(ops.sum_over(p, axes=reduce_axes), ops.sum_over(target_onehot, axes=reduce_axes))
    dice_per_class = ops.sub(
        ops.constant(torch.ones(logits.shape[1], dtype=logits.dtype)),
        ops.div(ops.add(ops.mul(inter, 2.0), eps), ops.add(denom, eps)),
    )
    dice = ops.mean_all(dice_per_class)
    voxels = float(np.prod([logits.shape[0], *logits.shape[2:]]))
    log_p = ops.log_softmax(logits, axis=1)
    ce = ops.mul(ops.sum_all(ops.mul(target_onehot, log_p)), -1.0 / voxels)
    return ops.add(dice, ce)


def deep_supervision_weights(num_scales: int, exclude_lowest: bool = False) -> np.ndarray:
    """Normalized 2^-s weights over supervised scales (scale 0 heaviest)."""
    if num_scales < 1:
        raise ValueError("need at least one scale")
    raw = np.array([0.5 ** s for s in range(num_scales)], dtype=np.float64)
    if exclude_lowest and num_scales > 1:
        raw[-1] = 0.0
    return raw / raw.sum()


def downsample_labels_majority(labels: np.ndarray, num_classes: int) -> np.ndarray:
    """2x majority-vote label downsample; ties go to the lower class id."""
    d, h, w = labels.shape
    if d % 2 or h % 2 or w % 2:
        raise ValueError(f"label shape {labels.shape} not divisible by 2")
    counts = np.zeros((num_classes, d // 2, h // 2, w // 2), dtype=np.int32)
    blocks = labels.reshape(d // 2, 2, h // 2, 2, w // 2, 2)
    for k in range(num_classes):
        counts[k] = (blocks == k).sum(axis=(1, 3, 5))
    return counts.argmax(axis=0).astype(labels.dtype)  # argmax takes the first max


def scale_targets(labels: np.ndarray, num_scales: int, num_classes: int) -> list[np.ndarray]:
    """Ground-truth label maps per logits scale (majority-vote pyramids)."""
    targets = [np.asarray(labels)]
    for _ in range(1, num_scales):
        targets.append(downsample_labels_majority(targets[-1], num_classes))
    return targets


def total_loss(
    logits: SegmentationLogits,
    labels: np.ndarray,
    features: dict[Modality, DecoupledFeatures],
    delta: ModalityIndicator,
    config: LossConfig,
    num_classes: int,
) -> LossBreakdown:
    """Deep-supervised Dice+CE across scales plus the alignment term."""
    num_scales = len(logits)
    weights = deep_supervision_weights(num_scales, config.exclude_lowest_scale)
    supervised = [s for s in range(num_scales) if weights[s] > 0]
    targets = scale_targets(labels, num_scales, num_classes)

    seg_values = []
    total: Tensor | None = None
    for s in range(num_scales):
        if s not in supervised:
            seg_values.append(0.0)
            continue
        onehot = one_hot_labels(
            targets[s], num_classes, dtype=np.float64 if logits[s].dtype == torch.float64 else np.float32
        )
        l_s = dice_ce_loss(logits[s], onehot, config.dice_eps)
        seg_values.append(l_s.item())
        weighted = ops.mul(l_s, float(weights[s]))
        total = weighted if total is None else ops.add(total, weighted)

    if config.kd_mode != "none" and len(features) >= 2:
        kd = kd_loss(
            features,
            temperature=config.temperature,
            use_post=config.kd_mode == "post",
            detach_teacher=config.kd_detach_teacher,
        )
        kd_value = kd.item()
        total = ops.add(total, kd)
    else:
        kd_value = 0.0

    active = [s for s in range(num_scales) if weights[s] > 0]
    return LossBreakdown(
        seg_per_scale=tuple(seg_values[s] for s in active),
        weights=tuple(float(weights[s]) for s in active),
        kd=kd_value,
        temperature=config.temperature,
        total=total,
    )
