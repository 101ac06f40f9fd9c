"""3D U-Net whose first encoding stage is decouple -> CSSA -> compensate.

Per scale the encoder applies a stride-2 convolution then a stride-1
convolution (each conv -> instance norm -> leaky rectifier); the decoder
mirrors it with stride-2 transposed convolutions and skip concatenation.
Segmentation heads (1x1x1 convs) sit at every decoder scale plus the
bottleneck, producing one logits map per scale for deep supervision.

The component toggles exist for ablations: with ``rcr_enabled=False`` the
routing is replaced by zero-filling missing slots and a 1x1x1 mixing
convolution; with ``feature_decoupling=False`` the stack has no designated
sub-spaces and slots are filled position-aligned from the entangled stack.
"""
from __future__ import annotations

from dataclasses import dataclass, asdict

import numpy as np

from . import diffops as ops
from .cssa import PermutationPlan, apply_cssa, register_cssa_params, skip_cssa
from .decoupler import DecoupledFeatures, decouple, register_decoupler_params
from .diffops import ParameterStore, Tensor
from .modality_graph import (
    DEFAULT_TABLE,
    MODALITIES,
    Modality,
    ModalityIndicator,
    RelationshipTable,
)
from .rcr import SlotSource, compensate

ENABLING_PREFIXES = ("decoupler.", "cssa.", "fuse.")


@dataclass
class UNetConfig:
    num_scales: int = 3
    channels: tuple[int, ...] = (32, 64, 128)
    subspace_channels: int = 8  # C; the fused feature has 4C channels
    num_classes: int = 4
    max_channels: int = 320
    leaky_slope: float = 0.01
    decoupler_mid_norm_act: bool = True
    cssa_soft_gate: bool = False
    feature_decoupling: bool = True
    cssa_enabled: bool = True
    rcr_enabled: bool = True
    profile: str = "desk"

    def __post_init__(self) -> None:
        self.channels = tuple(int(c) for c in self.channels)
        if self.num_scales < 2:
            raise ValueError("need at least 2 scales")
        if len(self.channels) != self.num_scales:
            raise ValueError("channels must list one width per scale")
        if self.channels[0] != 4 * self.subspace_channels:
            raise ValueError(
                f"stage-2 input must be 4C={4 * self.subspace_channels} channels, "
                f"got {self.channels[0]}"
            )
        if any(c > self.max_channels for c in self.channels):
            raise ValueError(f"channels capped at {self.max_channels}")

    @property
    def downsample_factor(self) -> int:
        return 2 ** (self.num_scales - 1)

    @classmethod
    def desk(cls, **overrides) -> "UNetConfig":
        return cls(**overrides)

    @classmethod
    def full(cls, **overrides) -> "UNetConfig":
        defaults = dict(
            num_scales=6,
            channels=(32, 64, 128, 256, 320, 320),
            subspace_channels=8,
            profile="full",
        )
        defaults.update(overrides)
        return cls(**defaults)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "UNetConfig":
        return cls(**d)


@dataclass
class SegmentationLogits:
    """Per-scale class logits; scale 0 is full resolution, scale s is 1/2^s."""

    scales: list[Tensor]

    def __len__(self) -> int:
        return len(self.scales)

    def __getitem__(self, s: int) -> Tensor:
        return self.scales[s]


@dataclass
class ForwardResult:
    logits: SegmentationLogits
    features: dict[Modality, DecoupledFeatures]
    fused: Tensor
    provenance: tuple[SlotSource, ...] | None
    plans: dict[Modality, PermutationPlan]


def build_network(store: ParameterStore, config: UNetConfig) -> None:
    """Register every parameter of the network on the store."""
    slope = config.leaky_slope
    register_decoupler_params(store, config.subspace_channels, slope)
    if config.cssa_enabled:
        register_cssa_params(store, 4 * config.subspace_channels, slope)
    if not config.rcr_enabled:
        c1 = 4 * config.subspace_channels
        store.conv("fuse.mix", c1, c1, 1, slope=slope)
    ch = config.channels
    for s in range(1, config.num_scales):
        store.conv(f"enc.{s}.conv_a", ch[s - 1], ch[s], 3, slope=slope)
        store.norm(f"enc.{s}.norm_a", ch[s])
        store.conv(f"enc.{s}.conv_b", ch[s], ch[s], 3, slope=slope)
        store.norm(f"enc.{s}.norm_b", ch[s])
    for s in range(config.num_scales - 2, -1, -1):
        store.transposed_conv(f"dec.{s}.up", ch[s + 1], ch[s], 2)
        store.conv(f"dec.{s}.conv_a", 2 * ch[s], ch[s], 3, slope=slope)
        store.norm(f"dec.{s}.norm_a", ch[s])
        store.conv(f"dec.{s}.conv_b", ch[s], ch[s], 3, slope=slope)
        store.norm(f"dec.{s}.norm_b", ch[s])
    for s in range(config.num_scales):
        store.conv(f"head.{s}", ch[s], config.num_classes, 1, slope=slope)


def _block(x: Tensor, store: ParameterStore, conv: str, norm: str, stride: int, slope: float) -> Tensor:
    h = ops.conv3d(x, store[f"{conv}.w"], store[f"{conv}.b"], stride=stride)
    h = ops.instance_norm(h, store[f"{norm}.gain"], store[f"{norm}.bias"])
    return ops.leaky_rectifier(h, slope)


def _fuse_without_rcr(
    features: dict[Modality, DecoupledFeatures],
    delta: ModalityIndicator,
    store: ParameterStore,
    config: UNetConfig,
) -> Tensor:
    """Ablation fusion: zero-fill missing slots, then a 1x1x1 mixing conv."""
    c = config.subspace_channels
    ref = next(iter(features.values())).stacked_post
    slots: list[Tensor] = []
    for m in MODALITIES:
        if delta[m]:
            slots.append(features[m].self_post)
        else:
            slots.append(ops.constant(np.zeros((1, c, *ref.shape[2:]), dtype=np.float32), dtype=ref.dtype))
    fused = ops.concat(slots, axis=1)
    return ops.conv3d(fused, store["fuse.mix.w"], store["fuse.mix.b"])


def _entangled_slot_features(features: DecoupledFeatures) -> None:
    """Ablation: no designated sub-spaces; every slot range is read
    position-aligned from the entangled stack."""
    c = features.channels
    stack = features.stacked_post
    for m in MODALITIES:
        lo = int(m) * c
        sl = ops.narrow(stack, 1, lo, c)
        if m == features.modality:
            features.self_post = sl
        else:
            features.mutual_post[m] = sl


def forward(
    inputs: dict[Modality, Tensor],
    delta: ModalityIndicator,
    store: ParameterStore,
    config: UNetConfig,
    table: RelationshipTable = DEFAULT_TABLE,
) -> ForwardResult:
    """Full network forward for one sample under availability ``delta``.

    Only available modalities are consumed; absent ones are never encoded.
    """
    slope = config.leaky_slope
    available = delta.available
    for m in available:
        if m not in inputs:
            raise ValueError(f"input volume missing for available modality {m.key}")
    spatial = inputs[available[0]].shape[2:]
    factor = config.downsample_factor
    if any(s % factor for s in spatial):
        raise ValueError(
            f"spatial dims {spatial} must be divisible by {factor} "
            f"({config.num_scales} scales)"
        )

    features: dict[Modality, DecoupledFeatures] = {}
    plans: dict[Modality, PermutationPlan] = {}
    for m in available:
        feats = decouple(
            inputs[m], m, store, config.subspace_channels, slope, config.decoupler_mid_norm_act
        )
        if config.cssa_enabled:
            plans[m] = apply_cssa(feats, store, slope, config.cssa_soft_gate)
        else:
            skip_cssa(feats)
        if not config.feature_decoupling:
            _entangled_slot_features(feats)
        features[m] = feats

    provenance: tuple[SlotSource, ...] | None
    if config.rcr_enabled:
        fused_feat = compensate(features, delta, table)
        fused, provenance = fused_feat.tensor, fused_feat.provenance
    else:
        fused, provenance = _fuse_without_rcr(features, delta, store, config), None

    skips: list[Tensor] = [fused]
    x = fused
    for s in range(1, config.num_scales):
        x = _block(x, store, f"enc.{s}.conv_a", f"enc.{s}.norm_a", 2, slope)
        x = _block(x, store, f"enc.{s}.conv_b", f"enc.{s}.norm_b", 1, slope)
        skips.append(x)

    logits: list[Tensor | None] = [None] * config.num_scales
    bottom = config.num_scales - 1
    logits[bottom] = ops.conv3d(x, store[f"head.{bottom}.w"], store[f"head.{bottom}.b"])
    for s in range(config.num_scales - 2, -1, -1):
        x = ops.transposed_conv3d(x, store[f"dec.{s}.up.w"], store[f"dec.{s}.up.b"], stride=2)
        x = ops.concat([x, skips[s]], axis=1)
        x = _block(x, store, f"dec.{s}.conv_a", f"dec.{s}.norm_a", 1, slope)
        x = _block(x, store, f"dec.{s}.conv_b", f"dec.{s}.norm_b", 1, slope)
        logits[s] = ops.conv3d(x, store[f"head.{s}.w"], store[f"head.{s}.b"])

    return ForwardResult(
        logits=SegmentationLogits(scales=logits),
        features=features,
        fused=fused,
        provenance=provenance,
        plans=plans,
    )


def count_params(store: ParameterStore, scope: str = "all") -> int:
    """Exact parameter count by summation over a named scope."""
    if scope == "all":
        return store.num_params()
    if scope == "enabling":
        return store.num_params(ENABLING_PREFIXES)
    if scope == "rcr":
        return 0  # routing is pure selection
    if scope == "backbone":
        return store.num_params() - store.num_params(ENABLING_PREFIXES)
    raise ValueError(f"unknown scope {scope!r}")


def conv_flops(cin: int, cout: int, k: int, out_voxels: int) -> int:
    """Multiply-adds x2 for one convolution layer."""
    return 2 * (k ** 3) * cin * cout * out_voxels


def count_flops(config: UNetConfig, patch: tuple[int, int, int], scope: str = "all") -> int:
    """Analytic FLOP count (multiply-adds x2, conv/linear layers only).

    The enabling-module scope covers all four modality branches at full
    availability. Norms, activations and the parameter-free routing are
    excluded from the count.
    """
    if scope not in ("all", "enabling", "backbone", "rcr"):
        raise ValueError(f"unknown scope {scope!r}")
    voxels = int(np.prod(patch))
    c1 = 4 * config.subspace_channels
    hidden = max(1, c1 // 2)

    enabling = 0
    for _ in MODALITIES:
        enabling += conv_flops(1, c1, 3, voxels)
        enabling += conv_flops(c1, c1, 3, voxels)
        if config.cssa_enabled:
            enabling += 2 * c1 * hidden + 2 * hidden * c1  # score MLP
    if not config.rcr_enabled:
        enabling += conv_flops(c1, c1, 1, voxels)
    if scope == "rcr":
        return 0
    if scope == "enabling":
        return enabling

    backbone_flops = 0
    ch = config.channels
    scale_voxels = [voxels // (8 ** s) for s in range(config.num_scales)]
    for s in range(1, config.num_scales):
        backbone_flops += conv_flops(ch[s - 1], ch[s], 3, scale_voxels[s])
        backbone_flops += conv_flops(ch[s], ch[s], 3, scale_voxels[s])
    for s in range(config.num_scales - 2, -1, -1):
        backbone_flops += conv_flops(ch[s + 1], ch[s], 2, scale_voxels[s + 1])  # transposed, per input voxel
        backbone_flops += conv_flops(2 * ch[s], ch[s], 3, scale_voxels[s])
        backbone_flops += conv_flops(ch[s], ch[s], 3, scale_voxels[s])
    for s in range(config.num_scales):
        backbone_flops += conv_flops(ch[s], config.num_classes, 1, scale_voxels[s])
    if scope == "backbone":
        return backbone_flops
    return enabling + backbone_flops
