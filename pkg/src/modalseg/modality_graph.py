"""Canonical modality set, availability indicators, and donor priority tables.

Everything downstream (feature routing, training perturbation, evaluation
tables) is keyed off the four MRI contrasts in a fixed canonical order:
t1, tc (= T1 contrast-enhanced), t2, fl (= FLAIR).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from enum import IntEnum

import numpy as np


class Modality(IntEnum):
    """One MRI contrast; the integer value is the canonical slot index."""

    T1 = 0
    TC = 1
    T2 = 2
    FL = 3

    @property
    def key(self) -> str:
        return self.name.lower()

    @classmethod
    def from_key(cls, key: str) -> "Modality":
        try:
            return cls[key.upper()]
        except KeyError:
            raise ValueError(f"unknown modality {key!r}") from None


MODALITIES: tuple[Modality, ...] = tuple(Modality)
MODALITY_KEYS: tuple[str, ...] = tuple(m.key for m in MODALITIES)


@dataclass(frozen=True)
class ModalityIndicator:
    """Availability bits in [t1, tc, t2, fl] order; at least one must be set."""

    bits: tuple[int, int, int, int]

    def __post_init__(self) -> None:
        bits = tuple(int(b) for b in self.bits)
        if len(bits) != 4 or any(b not in (0, 1) for b in bits):
            raise ValueError(f"indicator must be 4 bits of 0/1, got {self.bits!r}")
        if not any(bits):
            raise ValueError("indicator must have at least one available modality")
        object.__setattr__(self, "bits", bits)

    def __getitem__(self, m: Modality | int) -> int:
        return self.bits[int(m)]

    def __iter__(self):
        return iter(self.bits)

    @property
    def available(self) -> tuple[Modality, ...]:
        return tuple(m for m in MODALITIES if self.bits[m])

    @property
    def missing(self) -> tuple[Modality, ...]:
        return tuple(m for m in MODALITIES if not self.bits[m])

    @property
    def value(self) -> int:
        """4-bit integer with t1 as the least significant bit."""
        return sum(b << i for i, b in enumerate(self.bits))

    @classmethod
    def from_value(cls, value: int) -> "ModalityIndicator":
        if not 1 <= value <= 15:
            raise ValueError(f"indicator value must be in [1, 15], got {value}")
        return cls(tuple((value >> i) & 1 for i in range(4)))

    @classmethod
    def full(cls) -> "ModalityIndicator":
        return cls((1, 1, 1, 1))

    @classmethod
    def only(cls, *mods: Modality) -> "ModalityIndicator":
        bits = [0, 0, 0, 0]
        for m in mods:
            bits[int(m)] = 1
        return cls(tuple(bits))


# Fixed pairings, each a perfect matching on the four modalities. Tier I pairs
# the core readers (t1, tc) and the edema readers (t2, fl); II pairs the
# single-modality strong performers (tc, fl) and the physically similar
# (t1, t2); III is the remaining matching.
PAIRINGS: dict[str, tuple[tuple[Modality, Modality], tuple[Modality, Modality]]] = {
    "I": ((Modality.T1, Modality.TC), (Modality.T2, Modality.FL)),
    "II": ((Modality.T1, Modality.T2), (Modality.TC, Modality.FL)),
    "III": ((Modality.T1, Modality.FL), (Modality.TC, Modality.T2)),
}

TIER_NAMES: tuple[str, str, str] = ("I", "II", "III")


def _pairing_partner(tier: str, m: Modality) -> Modality:
    for a, b in PAIRINGS[tier]:
        if m == a:
            return b
        if m == b:
            return a
    raise AssertionError(f"{m} not covered by pairing {tier}")


@dataclass(frozen=True)
class RelationshipTable:
    """Priority-ordered pairings used to pick a donor for a missing modality.

    ``order`` is a permutation of ("I", "II", "III"); position 0 is the
    highest-priority (primary) pairing.
    """

    order: tuple[str, str, str] = field(default=TIER_NAMES)

    def __post_init__(self) -> None:
        if sorted(self.order) != sorted(TIER_NAMES):
            raise ValueError(
                f"order must be a permutation of {TIER_NAMES}, got {self.order!r}"
            )
        object.__setattr__(self, "order", tuple(self.order))

    @classmethod
    def from_string(cls, spec: str) -> "RelationshipTable":
        """Parse e.g. ``"I,II,III"`` or ``"III,I,II"`` (case-insensitive)."""
        parts = tuple(p.strip().upper() for p in spec.split(","))
        return cls(parts)

    def __str__(self) -> str:
        return ",".join(self.order)

    def partner(self, tier: str, m: Modality) -> Modality:
        return _pairing_partner(tier, m)

    def partners(self, m: Modality) -> tuple[Modality, Modality, Modality]:
        """Partners of ``m`` scanning tiers in priority order."""
        return tuple(_pairing_partner(t, m) for t in self.order)


DEFAULT_TABLE = RelationshipTable()


def enumerate_scenarios() -> list[ModalityIndicator]:
    """All 15 non-empty availability indicators, ascending by 4-bit value."""
    return [ModalityIndicator.from_value(v) for v in range(1, 16)]


def donor_for(
    missing: Modality,
    delta: ModalityIndicator,
    table: RelationshipTable = DEFAULT_TABLE,
) -> Modality:
    """First available partner of ``missing``, scanning the table in order.

    Total for every valid (missing, delta): the three tiers are pairwise
    disjoint matchings, so the partners of any modality cover the other
    three exactly, and at least one modality is always available.
    """
    if delta[missing]:
        raise ValueError(f"{missing.key} is not missing under delta={list(delta)}")
    for partner in table.partners(missing):
        if delta[partner]:
            return partner
    raise AssertionError("unreachable: partners cover all other modalities")


def sample_perturbation(rng: np.random.Generator) -> ModalityIndicator:
    """Draw one of the 15 scenarios uniformly (training-time modality dropout)."""
    return ModalityIndicator.from_value(int(rng.integers(1, 16)))
