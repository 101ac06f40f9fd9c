"""Case storage, synthetic phantom generation, and intensity normalization.

Cases live in per-case directories holding a small JSON header plus raw
little-endian payloads (f32 volumes, u8 labels/mask), so the package has no
imaging-format dependencies. Phantoms are nested-ellipsoid tumors with
per-modality contrast profiles chosen so that every modality carries some
information about every region, with clinically motivated strengths (t2/fl
strong on edema, tc strong on enhancing tumor, t1 moderate on the core).
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .modality_graph import MODALITIES, MODALITY_KEYS, Modality

# Voxel label ids.
BACKGROUND, NECROTIC, EDEMA, ENHANCING = 0, 1, 2, 3
NUM_CLASSES = 4

HEADER_NAME = "header.json"
LABEL_FILE = "labels.raw"
MASK_FILE = "mask.raw"


class CaseFormatError(ValueError):
    """Raised for malformed case directories (bad header, truncated payload)."""


@dataclass
class Volume:
    """A single-modality 3D scalar grid."""

    data: np.ndarray

    def __post_init__(self) -> None:
        self.data = np.asarray(self.data, dtype=np.float32)
        if self.data.ndim != 3:
            raise ValueError(f"volume must be 3D, got shape {self.data.shape}")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("volume contains non-finite values")

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.data.shape)


@dataclass
class LabelVolume:
    """Voxel-wise class ids: 0=background, 1=necrotic core, 2=edema, 3=enhancing."""

    labels: np.ndarray

    def __post_init__(self) -> None:
        self.labels = np.asarray(self.labels, dtype=np.uint8)
        if self.labels.ndim != 3:
            raise ValueError(f"labels must be 3D, got shape {self.labels.shape}")
        if self.labels.max(initial=0) >= NUM_CLASSES:
            raise ValueError("label ids must be in {0,1,2,3}")

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.labels.shape)


@dataclass
class CaseRecord:
    """One case: four co-registered modality volumes, labels, and a brain mask."""

    case_id: str
    volumes: tuple[Volume, Volume, Volume, Volume]
    labels: LabelVolume
    brain_mask: np.ndarray

    def __post_init__(self) -> None:
        if len(self.volumes) != len(MODALITIES):
            raise ValueError("a case needs exactly 4 modality volumes")
        self.volumes = tuple(self.volumes)
        self.brain_mask = np.asarray(self.brain_mask, dtype=bool)
        shapes = {v.shape for v in self.volumes}
        shapes.add(self.labels.shape)
        shapes.add(tuple(self.brain_mask.shape))
        if len(shapes) != 1:
            raise ValueError(f"inconsistent shapes across case fields: {shapes}")
        if np.any((self.labels.labels > 0) & ~self.brain_mask):
            raise ValueError("brain mask must cover all labeled voxels")

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.labels.shape

    def volume(self, m: Modality) -> Volume:
        return self.volumes[int(m)]


# region -> (mean, std) of raw intensity; "brain" is healthy tissue inside the
# brain mask. Each modality sees every region, but with different contrast so
# each donor pairing stays genuinely informative.
DEFAULT_INTENSITY_PROFILE: dict[str, dict[str, tuple[float, float]]] = {
    "t1": {"brain": (1.00, 0.10), "edema": (1.22, 0.10), "necrotic": (1.55, 0.10), "enhancing": (1.40, 0.10)},
    "tc": {"brain": (1.00, 0.10), "edema": (1.25, 0.10), "necrotic": (1.35, 0.10), "enhancing": (2.00, 0.10)},
    "t2": {"brain": (1.00, 0.10), "edema": (1.85, 0.10), "necrotic": (1.40, 0.10), "enhancing": (1.25, 0.10)},
    "fl": {"brain": (1.00, 0.10), "edema": (1.95, 0.10), "necrotic": (1.35, 0.10), "enhancing": (1.25, 0.10)},
}


@dataclass
class PhantomSpec:
    """Recipe for one synthetic case: nested WT >= TC >= ET ellipsoids."""

    shape: tuple[int, int, int] = (32, 32, 32)
    seed: int = 0
    wt_radii: tuple[float, float, float] = (10.0, 9.0, 10.0)
    tc_radii: tuple[float, float, float] = (6.5, 6.0, 6.5)
    et_radii: tuple[float, float, float] = (4.0, 3.5, 4.0)
    intensity_profile: dict[str, dict[str, tuple[float, float]]] = field(
        default_factory=lambda: {k: dict(v) for k, v in DEFAULT_INTENSITY_PROFILE.items()}
    )

    def __post_init__(self) -> None:
        self.shape = tuple(int(s) for s in self.shape)
        if len(self.shape) != 3 or any(s < 4 for s in self.shape):
            raise ValueError(f"shape must be 3 positive dims, got {self.shape}")
        for radii in (self.wt_radii, self.tc_radii, self.et_radii):
            if len(radii) != 3 or any(r < 0 for r in radii):
                raise ValueError(f"radii must be 3 non-negative values, got {radii}")
        if any(t > w for t, w in zip(self.tc_radii, self.wt_radii)) or any(
            e > t for e, t in zip(self.et_radii, self.tc_radii)
        ):
            raise ValueError("radii must be nested: ET <= TC <= WT")
        if any(r <= 0 for r in self.wt_radii):
            raise ValueError("WT radii must be positive")

    @property
    def brain_radii(self) -> tuple[float, float, float]:
        return tuple(r * 1.45 for r in self.wt_radii)

    @classmethod
    def scaled(cls, shape: tuple[int, int, int], seed: int, **overrides) -> "PhantomSpec":
        """Radii proportional to the grid (tumor ~ 1/3 of each dimension)."""
        params = dict(
            shape=shape,
            seed=seed,
            wt_radii=tuple(0.3125 * s for s in shape),
            tc_radii=tuple(0.20 * s for s in shape),
            et_radii=tuple(0.125 * s for s in shape),
        )
        params.update(overrides)
        return cls(**params)


def _ellipsoid(shape: tuple[int, int, int], center: np.ndarray, radii: np.ndarray) -> np.ndarray:
    if np.any(radii <= 0):
        return np.zeros(shape, dtype=bool)
    grids = np.ogrid[tuple(slice(0, s) for s in shape)]
    acc = np.zeros(shape, dtype=np.float64)
    for g, c, r in zip(grids, center, radii):
        acc = acc + ((g - c) / r) ** 2
    return acc <= 1.0


def generate_phantom(spec: PhantomSpec) -> CaseRecord:
    """Deterministically synthesize one case from a seeded spec.

    Tumor regions are jittered nested ellipsoids; nesting is enforced by
    intersecting each region with its parent. Raises if the brain ellipsoid
    does not fit inside the grid.
    """
    shape = np.array(spec.shape, dtype=np.float64)
    brain_r = np.array(spec.brain_radii)
    if np.any(brain_r >= shape / 2.0 - 0.5):
        raise ValueError(
            f"region radii {spec.wt_radii} too large for shape {spec.shape} "
            f"(brain ellipsoid {tuple(brain_r)} must fit inside the grid)"
        )

    rng = np.random.default_rng(spec.seed)
    center = shape / 2.0 + rng.uniform(-0.5, 0.5, size=3)

    def jitter(radii: tuple[float, float, float], rel: float) -> np.ndarray:
        r = np.array(radii, dtype=np.float64)
        return r * rng.uniform(1.0 - rel, 1.0 + rel, size=3)

    brain = _ellipsoid(spec.shape, center, brain_r)
    wt = _ellipsoid(spec.shape, center + rng.uniform(-1.0, 1.0, 3), jitter(spec.wt_radii, 0.08))
    tc = _ellipsoid(spec.shape, center + rng.uniform(-1.0, 1.0, 3), jitter(spec.tc_radii, 0.08))
    et = _ellipsoid(spec.shape, center + rng.uniform(-0.8, 0.8, 3), jitter(spec.et_radii, 0.08))
    wt &= brain
    tc &= wt
    et &= tc

    labels = np.zeros(spec.shape, dtype=np.uint8)
    labels[wt] = EDEMA
    labels[tc] = NECROTIC
    labels[et] = ENHANCING

    region_masks = {
        "brain": brain & (labels == BACKGROUND),
        "edema": labels == EDEMA,
        "necrotic": labels == NECROTIC,
        "enhancing": labels == ENHANCING,
    }

    volumes = []
    for key in MODALITY_KEYS:
        profile = spec.intensity_profile[key]
        grid = rng.normal(0.0, 0.02, size=spec.shape)  # air noise floor
        for region, mask in region_masks.items():
            mean, std = profile[region]
            n = int(mask.sum())
            if n:
                grid[mask] = rng.normal(mean, std, size=n)
        volumes.append(Volume(grid.astype(np.float32)))

    return CaseRecord(
        case_id=f"phantom_{spec.seed:05d}",
        volumes=tuple(volumes),
        labels=LabelVolume(labels),
        brain_mask=brain,
    )


def zscore_normalize(v: Volume, mask: np.ndarray) -> Volume:
    """Zero-mean unit-variance over masked voxels; zeros outside the mask."""
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != v.shape:
        raise ValueError(f"mask shape {mask.shape} != volume shape {v.shape}")
    inside = v.data[mask].astype(np.float64)
    if inside.size < 2:
        raise ValueError("mask must select at least 2 voxels")
    mean = inside.mean()
    std = inside.std()
    if std == 0.0:
        raise ValueError("zero intensity variance inside mask")
    out = np.zeros_like(v.data, dtype=np.float64)
    out[mask] = (inside - mean) / std
    return Volume(out.astype(np.float32))


def save_case(record: CaseRecord, path: str | Path) -> Path:
    """Write a case directory (header.json + raw payloads), return its path."""
    case_dir = Path(path)
    case_dir.mkdir(parents=True, exist_ok=True)
    header = {
        "case_id": record.case_id,
        "shape": list(record.shape),
        "dtype": "f32",
        "modalities": list(MODALITY_KEYS),
    }
    (case_dir / HEADER_NAME).write_text(json.dumps(header, indent=1) + "\n")
    for key, vol in zip(MODALITY_KEYS, record.volumes):
        (case_dir / f"{key}.raw").write_bytes(vol.data.astype("<f4").tobytes(order="C"))
    (case_dir / LABEL_FILE).write_bytes(record.labels.labels.astype(np.uint8).tobytes(order="C"))
    (case_dir / MASK_FILE).write_bytes(record.brain_mask.astype(np.uint8).tobytes(order="C"))
    return case_dir


def _read_payload(path: Path, count: int, dtype: str) -> np.ndarray:
    raw = path.read_bytes()
    itemsize = np.dtype(dtype).itemsize
    if len(raw) != count * itemsize:
        raise CaseFormatError(
            f"{path.name}: expected {count * itemsize} bytes ({count} x {dtype}), got {len(raw)}"
        )
    return np.frombuffer(raw, dtype=dtype).copy()


def load_case(path: str | Path) -> CaseRecord:
    """Load a case directory written by :func:`save_case` (bit-exact round trip)."""
    case_dir = Path(path)
    header_path = case_dir / HEADER_NAME
    if not header_path.is_file():
        raise CaseFormatError(f"missing {HEADER_NAME} in {case_dir}")
    try:
        header = json.loads(header_path.read_text())
    except json.JSONDecodeError as exc:
        raise CaseFormatError(f"unreadable header in {case_dir}: {exc}") from exc
    shape = tuple(int(s) for s in header.get("shape", ()))
    if len(shape) != 3:
        raise CaseFormatError(f"header shape must have 3 dims, got {header.get('shape')}")
    if header.get("dtype") != "f32":
        raise CaseFormatError(f"unknown dtype {header.get('dtype')!r} (only f32 supported)")
    if list(header.get("modalities", [])) != list(MODALITY_KEYS):
        raise CaseFormatError(f"unexpected modality list {header.get('modalities')!r}")
    voxels = int(np.prod(shape))
    volumes = tuple(
        Volume(_read_payload(case_dir / f"{key}.raw", voxels, "<f4").reshape(shape))
        for key in MODALITY_KEYS
    )
    labels = _read_payload(case_dir / LABEL_FILE, voxels, np.uint8).reshape(shape)
    mask = _read_payload(case_dir / MASK_FILE, voxels, np.uint8).reshape(shape)
    if labels.max(initial=0) >= NUM_CLASSES:
        raise CaseFormatError(f"label file contains ids outside 0..{NUM_CLASSES - 1}")
    if mask.max(initial=0) > 1:
        raise CaseFormatError("mask file must be 0/1")
    return CaseRecord(
        case_id=str(header.get("case_id", case_dir.name)),
        volumes=volumes,
        labels=LabelVolume(labels),
        brain_mask=mask.astype(bool),
    )


SPLIT_NAMES = ("train", "val", "test")


@dataclass
class DatasetManifest:
    """Per-split lists of case directories, stored relative to the manifest file."""

    splits: dict[str, list[str]]
    seed: int = 0

    def __post_init__(self) -> None:
        unknown = set(self.splits) - set(SPLIT_NAMES)
        if unknown:
            raise ValueError(f"unknown split names {unknown}")
        all_paths = [p for paths in self.splits.values() for p in paths]
        if len(all_paths) != len(set(all_paths)):
            raise ValueError("splits must be disjoint")

    def cases(self, split: str) -> list[str]:
        return list(self.splits.get(split, []))


def save_manifest(manifest: DatasetManifest, path: str | Path) -> Path:
    path = Path(path)
    payload = {"seed": manifest.seed, "splits": manifest.splits}
    path.write_text(json.dumps(payload, indent=1) + "\n")
    return path


def load_manifest(path: str | Path) -> tuple[DatasetManifest, Path]:
    """Load a manifest; returns it plus the base dir paths are relative to."""
    path = Path(path)
    if not path.is_file():
        raise CaseFormatError(f"manifest not found: {path}")
    payload = json.loads(path.read_text())
    manifest = DatasetManifest(splits=payload["splits"], seed=int(payload.get("seed", 0)))
    base = path.parent
    for split, cases in manifest.splits.items():
        for rel in cases:
            if not (base / rel / HEADER_NAME).is_file():
                raise CaseFormatError(f"{split} case not resolvable: {base / rel}")
    return manifest, base


def load_split_cases(manifest_path: str | Path, split: str) -> list[CaseRecord]:
    manifest, base = load_manifest(manifest_path)
    return [load_case(base / rel) for rel in manifest.cases(split)]
