"""Missing-modality-robust 3D segmentation with decoupled per-modality features.

The pipeline: each available modality is mapped onto Self/Mutual feature
sub-spaces (decoupler), the sub-spaces exchange guidance through a sparse
channel-permutation attention (cssa), and a fixed clinical-priority routing
(rcr) assembles a pseudo full-modality feature that feeds a 3D U-Net trained
under random modality dropout.
"""

from .modality_graph import (
    MODALITIES,
    MODALITY_KEYS,
    Modality,
    ModalityIndicator,
    RelationshipTable,
    donor_for,
    enumerate_scenarios,
    sample_perturbation,
)
from .volume_io import (
    CaseRecord,
    DatasetManifest,
    LabelVolume,
    PhantomSpec,
    Volume,
    generate_phantom,
    load_case,
    save_case,
    zscore_normalize,
)

__version__ = "0.1.0"

__all__ = [
    "MODALITIES",
    "MODALITY_KEYS",
    "Modality",
    "ModalityIndicator",
    "RelationshipTable",
    "donor_for",
    "enumerate_scenarios",
    "sample_perturbation",
    "CaseRecord",
    "DatasetManifest",
    "LabelVolume",
    "PhantomSpec",
    "Volume",
    "generate_phantom",
    "load_case",
    "save_case",
    "zscore_normalize",
    "__version__",
]
