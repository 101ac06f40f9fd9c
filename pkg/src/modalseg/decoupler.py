"""Per-modality feature decoupling into one Self and three Mutual sub-spaces.

Each modality's single-channel input goes through two same-padded 3x3x3
convolutions producing 4C channels, read as a fixed channel partition:
[0, C) is the Self sub-space (the modality expressing itself) and the three
C-wide blocks after it are Mutual sub-spaces, one per other modality in
canonical order, trained to stand in for that modality when it is absent.
"""
from __future__ import annotations

from dataclasses import dataclass, field

from . import diffops as ops
from .diffops import ParameterStore, Tensor
from .modality_graph import MODALITIES, Modality


def mutual_targets(m: Modality) -> tuple[Modality, Modality, Modality]:
    """The other three modalities in canonical order."""
    return tuple(l for l in MODALITIES if l != m)


def subspace_slices(m: Modality, channels: int) -> dict[Modality | None, tuple[int, int]]:
    """Channel ranges of modality ``m``'s stack: None key = Self, else Mutual target."""
    ranges: dict[Modality | None, tuple[int, int]] = {None: (0, channels)}
    for i, target in enumerate(mutual_targets(m)):
        ranges[target] = ((i + 1) * channels, (i + 2) * channels)
    return ranges


@dataclass
class DecoupledFeatures:
    """One modality's four feature sub-spaces, before and after CSSA."""

    modality: Modality
    channels: int  # C, per sub-space
    self_pre: Tensor
    mutual_pre: dict[Modality, Tensor]
    stacked_pre: Tensor  # the raw 4C-channel stack the slices come from
    self_post: Tensor | None = None
    mutual_post: dict[Modality, Tensor] = field(default_factory=dict)
    stacked_post: Tensor | None = None

    def __post_init__(self) -> None:
        expected = mutual_targets(self.modality)
        if tuple(self.mutual_pre) != expected:
            raise ValueError(
                f"mutual sub-spaces for {self.modality.key} must be keyed "
                f"{[t.key for t in expected]}, got {[t.key for t in self.mutual_pre]}"
            )


def register_decoupler_params(store: ParameterStore, channels: int, slope: float = 0.01) -> None:
    """Create the per-modality conv/norm parameters (1 -> 4C -> 4C)."""
    c1 = 4 * channels
    for m in MODALITIES:
        prefix = f"decoupler.{m.key}"
        store.conv(f"{prefix}.conv1", 1, c1, 3, slope=slope)
        store.norm(f"{prefix}.norm1", c1)
        store.conv(f"{prefix}.conv2", c1, c1, 3, slope=slope)
        store.norm(f"{prefix}.norm2", c1)


def decouple(
    x: Tensor,
    m: Modality,
    store: ParameterStore,
    channels: int,
    slope: float = 0.01,
    mid_norm_act: bool = True,
) -> DecoupledFeatures:
    """Map a (1, 1, D, H, W) input onto the four sub-spaces of modality ``m``.

    ``mid_norm_act`` controls whether norm+activation sits between the two
    convolutions as well as after the second one.
    """
    if x.shape[1] != 1:
        raise ValueError(f"decoupler input must have 1 channel, got {x.shape[1]}")
    prefix = f"decoupler.{m.key}"
    h = ops.conv3d(x, store[f"{prefix}.conv1.w"], store[f"{prefix}.conv1.b"])
    if mid_norm_act:
        h = ops.instance_norm(h, store[f"{prefix}.norm1.gain"], store[f"{prefix}.norm1.bias"])
        h = ops.leaky_rectifier(h, slope)
    h = ops.conv3d(h, store[f"{prefix}.conv2.w"], store[f"{prefix}.conv2.b"])
    h = ops.instance_norm(h, store[f"{prefix}.norm2.gain"], store[f"{prefix}.norm2.bias"])
    h = ops.leaky_rectifier(h, slope)
    if h.shape[1] != 4 * channels:
        raise ValueError(f"decoupler produced {h.shape[1]} channels, expected {4 * channels}")
    slices = subspace_slices(m, channels)
    start, _ = slices[None]
    self_pre = ops.narrow(h, 1, start, channels)
    mutual_pre = {
        target: ops.narrow(h, 1, slices[target][0], channels) for target in mutual_targets(m)
    }
    return DecoupledFeatures(
        modality=m,
        channels=channels,
        self_pre=self_pre,
        mutual_pre=mutual_pre,
        stacked_pre=h,
    )
