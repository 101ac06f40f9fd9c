"""Feature compensation: assemble a pseudo full-modality feature by routing.

The fused feature is a fixed-order channel concatenation of four C-wide
slots (t1, tc, t2, fl). An available modality fills its own slot with its
Self-feature; a missing modality's slot is taken over by the highest-priority
available donor's Mutual-feature for it. Pure selection - no parameters, no
arithmetic.
"""
from __future__ import annotations

from dataclasses import dataclass

from . import diffops as ops
from .decoupler import DecoupledFeatures
from .diffops import Tensor
from .modality_graph import (
    DEFAULT_TABLE,
    MODALITIES,
    Modality,
    ModalityIndicator,
    RelationshipTable,
    donor_for,
)


@dataclass(frozen=True)
class SlotSource:
    """Where one fused slot came from: the slot's modality and its donor."""

    target: Modality
    donor: Modality

    @property
    def is_self(self) -> bool:
        return self.donor == self.target

    def __str__(self) -> str:
        if self.is_self:
            return f"self({self.target.key})"
        return f"mutual({self.donor.key}->{self.target.key})"


@dataclass
class FusedFeature:
    """4C-channel pseudo full-modality feature plus per-slot provenance."""

    tensor: Tensor
    provenance: tuple[SlotSource, SlotSource, SlotSource, SlotSource]


def route_slots(
    delta: ModalityIndicator, table: RelationshipTable = DEFAULT_TABLE
) -> tuple[SlotSource, ...]:
    """Donor decision per slot in canonical order, without touching features."""
    return tuple(
        SlotSource(m, m if delta[m] else donor_for(m, delta, table)) for m in MODALITIES
    )


def compensate(
    features: dict[Modality, DecoupledFeatures],
    delta: ModalityIndicator,
    table: RelationshipTable = DEFAULT_TABLE,
) -> FusedFeature:
    """Concatenate Self-features of available modalities and donated
    Mutual-features for missing ones, in fixed [t1 tc t2 fl] slot order."""
    available = set(delta.available)
    provided = set(features)
    if provided - available:
        extra = sorted(m.key for m in provided - available)
        raise ValueError(f"features provided for unavailable modalities: {extra}")
    if available - provided:
        missing = sorted(m.key for m in available - provided)
        raise ValueError(f"missing features for available modalities: {missing}")

    provenance = route_slots(delta, table)
    slots: list[Tensor] = []
    for source in provenance:
        feats = features[source.donor]
        slot = feats.self_post if source.is_self else feats.mutual_post[source.target]
        if slot is None:
            raise ValueError(f"post-attention features not filled for {source.donor.key}")
        slots.append(slot)
    shapes = {s.shape for s in slots}
    if len(shapes) != 1:
        raise ValueError(f"sub-space shape mismatch across slots: {shapes}")
    return FusedFeature(tensor=ops.concat(slots, axis=1), provenance=provenance)
