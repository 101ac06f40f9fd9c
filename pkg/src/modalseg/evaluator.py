"""Evaluation: region DSC, ET false-alarm post-processing, sliding-window
inference, the 15-scenario table, and the enabling-module efficiency factor.

Region composition follows the standard nesting: whole tumor = {1,2,3},
tumor core = {1,3}, enhancing tumor = {3}. Scenario tables are emitted with
availability marks in (fl, t1, tc, t2) column order to match the reporting
convention, while everything internal stays in canonical (t1, tc, t2, fl)
order.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import diffops as ops
from .backbone import UNetConfig, forward
from .diffops import ParameterStore
from .modality_graph import DEFAULT_TABLE, ModalityIndicator, RelationshipTable
from .trainer import TrainingCase

REGIONS = ("WT", "TC", "ET")
ET_THRESHOLD_FULL = 500
FULL_REFERENCE_VOXELS = 128 ** 3


def region_mask(labels: np.ndarray, region: str) -> np.ndarray:
    if region == "WT":
        return labels > 0
    if region == "TC":
        return (labels == 1) | (labels == 3)
    if region == "ET":
        return labels == 3
    raise ValueError(f"unknown region {region!r}")


def dsc(pred: np.ndarray, gt: np.ndarray, both_empty: float = 1.0) -> float:
    """Dice similarity 2|A&B| / (|A| + |B|) of two boolean masks."""
    pred = np.asarray(pred, dtype=bool)
    gt = np.asarray(gt, dtype=bool)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {gt.shape}")
    denom = int(pred.sum()) + int(gt.sum())
    if denom == 0:
        return both_empty
    return 2.0 * int((pred & gt).sum()) / denom


def postprocess_et(labels: np.ndarray, threshold: int = ET_THRESHOLD_FULL) -> np.ndarray:
    """Reclassify enhancing tumor to non-enhancing core when its total voxel
    count is strictly below the threshold (false-alarm suppression)."""
    labels = np.asarray(labels)
    et = labels == 3
    count = int(et.sum())
    if 0 < count < threshold:
        out = labels.copy()
        out[et] = 1
        return out
    return labels


def scaled_et_threshold(case_voxels: int, full_threshold: int = ET_THRESHOLD_FULL) -> int:
    """Volume-proportional threshold so the rule stays active at desk scale."""
    return max(1, round(full_threshold * case_voxels / FULL_REFERENCE_VOXELS))


def sliding_window_logits(
    vols: np.ndarray,
    delta: ModalityIndicator,
    store: ParameterStore,
    config: UNetConfig,
    table: RelationshipTable = DEFAULT_TABLE,
    patch_size: int = 32,
) -> np.ndarray:
    """Tile the volume with half-overlapping windows, averaging full-resolution
    logits uniformly where windows overlap. Returns (K, D, H, W)."""
    dims = vols.shape[1:]
    if any(d < patch_size for d in dims):
        raise ValueError(f"volume {dims} smaller than window {patch_size}")
    stride = max(1, patch_size // 2)
    starts_per_axis = []
    for d in dims:
        starts = list(range(0, d - patch_size + 1, stride))
        if starts[-1] != d - patch_size:
            starts.append(d - patch_size)
        starts_per_axis.append(sorted(set(starts)))
    acc = np.zeros((config.num_classes, *dims), dtype=np.float64)
    count = np.zeros(dims, dtype=np.float64)
    for sd in starts_per_axis[0]:
        for sh in starts_per_axis[1]:
            for sw in starts_per_axis[2]:
                sl = (
                    slice(sd, sd + patch_size),
                    slice(sh, sh + patch_size),
                    slice(sw, sw + patch_size),
                )
                inputs = {
                    m: ops.constant(vols[(int(m), *sl)][None, None]) for m in delta.available
                }
                result = forward(inputs, delta, store, config, table)
                acc[(slice(None), *sl)] += result.logits[0].data[0].numpy()
                count[sl] += 1.0
    return (acc / count).astype(np.float32)


def predict_labels(
    case: TrainingCase,
    delta: ModalityIndicator,
    store: ParameterStore,
    config: UNetConfig,
    table: RelationshipTable = DEFAULT_TABLE,
    patch_size: int = 32,
    et_threshold: int | None = None,
) -> np.ndarray:
    logits = sliding_window_logits(case.volumes, delta, store, config, table, patch_size)
    labels = logits.argmax(axis=0).astype(np.uint8)
    if et_threshold is None:
        et_threshold = scaled_et_threshold(int(np.prod(case.labels.shape)))
    return postprocess_et(labels, et_threshold)


# Row order used by the reporting convention: singles, pairs, triples, full,
# as (fl, t1, tc, t2) availability patterns.
_TABLE_ROW_ORDER_FL_T1_TC_T2 = (
    (0, 0, 0, 1),
    (0, 0, 1, 0),
    (0, 1, 0, 0),
    (1, 0, 0, 0),
    (0, 0, 1, 1),
    (0, 1, 1, 0),
    (1, 1, 0, 0),
    (0, 1, 0, 1),
    (1, 0, 0, 1),
    (1, 0, 1, 0),
    (1, 1, 1, 0),
    (1, 1, 0, 1),
    (1, 0, 1, 1),
    (0, 1, 1, 1),
    (1, 1, 1, 1),
)


def _delta_to_display(delta: ModalityIndicator) -> tuple[int, int, int, int]:
    """[t1, tc, t2, fl] bits -> (fl, t1, tc, t2) display order."""
    t1, tc, t2, fl = delta.bits
    return (fl, t1, tc, t2)


def table_row_order() -> list[ModalityIndicator]:
    rows = []
    for fl, t1, tc, t2 in _TABLE_ROW_ORDER_FL_T1_TC_T2:
        rows.append(ModalityIndicator((t1, tc, t2, fl)))
    return rows


@dataclass
class ScenarioRow:
    delta: ModalityIndicator
    wt: float
    tc: float
    et: float

    def values(self) -> tuple[float, float, float]:
        return (self.wt, self.tc, self.et)


@dataclass
class ScenarioTable:
    rows: list[ScenarioRow]

    @property
    def average(self) -> tuple[float, float, float]:
        arr = np.array([r.values() for r in self.rows], dtype=np.float64)
        return tuple(arr.mean(axis=0))

    def row_for(self, delta: ModalityIndicator) -> ScenarioRow:
        for row in self.rows:
            if row.delta == delta:
                return row
        raise KeyError(f"no row for delta={list(delta)}")

    def to_tsv(self) -> str:
        lines = ["fl\tt1\ttc\tt2\tWT\tTC\tET"]
        for row in self.rows:
            marks = _delta_to_display(row.delta)
            lines.append(
                "\t".join(str(b) for b in marks)
                + f"\t{row.wt:.4f}\t{row.tc:.4f}\t{row.et:.4f}"
            )
        avg = self.average
        lines.append(f"average\t\t\t\t{avg[0]:.4f}\t{avg[1]:.4f}\t{avg[2]:.4f}")
        return "\n".join(lines) + "\n"

    def to_text(self) -> str:
        def mark(b: int) -> str:
            return "•" if b else "◦"

        lines = ["fl t1 tc t2 |     WT     TC     ET"]
        for row in self.rows:
            marks = " ".join(f"{mark(b)} " for b in _delta_to_display(row.delta))
            lines.append(f"{marks}| {row.wt:6.4f} {row.tc:6.4f} {row.et:6.4f}")
        avg = self.average
        lines.append(f"average     | {avg[0]:6.4f} {avg[1]:6.4f} {avg[2]:6.4f}")
        return "\n".join(lines) + "\n"


PredictFn = Callable[[TrainingCase, ModalityIndicator], np.ndarray]


def evaluate_scenarios(
    predict_fn: PredictFn,
    cases: Sequence[TrainingCase],
    scenarios: Sequence[ModalityIndicator] | None = None,
    both_empty: float = 1.0,
) -> ScenarioTable:
    """Per-scenario mean DSC over cases for the three nested regions."""
    if not cases:
        raise ValueError("no test cases to evaluate")
    rows = []
    for delta in scenarios if scenarios is not None else table_row_order():
        per_region = {r: [] for r in REGIONS}
        for case in cases:
            pred = predict_fn(case, delta)
            for r in REGIONS:
                per_region[r].append(
                    dsc(region_mask(pred, r), region_mask(case.labels, r), both_empty)
                )
        rows.append(
            ScenarioRow(
                delta=delta,
                wt=float(np.mean(per_region["WT"])),
                tc=float(np.mean(per_region["TC"])),
                et=float(np.mean(per_region["ET"])),
            )
        )
    return ScenarioTable(rows=rows)


def network_predict_fn(
    store: ParameterStore,
    config: UNetConfig,
    table: RelationshipTable = DEFAULT_TABLE,
    patch_size: int = 32,
    et_threshold: int | None = None,
) -> PredictFn:
    def predict(case: TrainingCase, delta: ModalityIndicator) -> np.ndarray:
        return predict_labels(case, delta, store, config, table, patch_size, et_threshold)

    return predict


@dataclass
class EfficiencyInput:
    """Inputs of the enabling-module efficiency factor."""

    ddsc_percent: float
    param_millions: float
    flops_giga: float
    eta: float
    lam: float = 0.5
    mu: float = 0.5

    def __post_init__(self) -> None:
        if self.param_millions < 0 or self.flops_giga < 0:
            raise ValueError("Param and FLOPs must be non-negative")
        if self.eta <= 0:
            raise ValueError("eta must be positive")


def efficiency_factor(inp: EfficiencyInput) -> float:
    """P = dDSC / (lam * Param(M) + mu * FLOPs(G) / eta^3)."""
    denom = inp.lam * inp.param_millions + inp.mu * inp.flops_giga / inp.eta ** 3
    if denom <= 0:
        raise ValueError("efficiency denominator must be positive")
    return inp.ddsc_percent / denom
