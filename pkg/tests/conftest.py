import numpy as np
import pytest

from modalseg.volume_io import DatasetManifest, PhantomSpec, generate_phantom, save_case, save_manifest

pytest_plugins = ()


def make_dataset(root, n_cases=4, shape=(16, 16, 16), seed=11, splits=(2, 1, 1)):
    """Small phantom dataset + manifest for fast pipeline tests."""
    radii = dict(
        wt_radii=(4.5, 4.0, 4.5),
        tc_radii=(3.0, 2.8, 3.0),
        et_radii=(1.8, 1.6, 1.8),
    )
    if min(shape) >= 32:
        radii = {}
    case_seeds = np.random.SeedSequence(seed).generate_state(n_cases)
    names = []
    for i, cs in enumerate(case_seeds):
        rec = generate_phantom(PhantomSpec(shape=shape, seed=int(cs), **radii))
        rec.case_id = f"case_{i:03d}"
        save_case(rec, root / rec.case_id)
        names.append(rec.case_id)
    n_train, n_val, n_test = splits
    assert n_train + n_val + n_test == n_cases
    manifest = DatasetManifest(
        splits={
            "train": names[:n_train],
            "val": names[n_train:n_train + n_val],
            "test": names[n_train + n_val:],
        },
        seed=seed,
    )
    return save_manifest(manifest, root / "manifest.json")


@pytest.fixture
def tiny_manifest(tmp_path):
    return make_dataset(tmp_path)
