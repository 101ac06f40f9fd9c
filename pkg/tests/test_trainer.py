import json

import numpy as np
import pytest
import torch

from modalseg.backbone import UNetConfig
from modalseg.diffops import ParameterStore
from modalseg.losses import LossConfig, NumericsError
from modalseg.modality_graph import enumerate_scenarios
from modalseg.trainer import (
    AugmentConfig,
    TrainConfig,
    apply_mirror,
    apply_rot90,
    augment,
    load_checkpoint,
    load_training_cases,
    poly_lr,
    prepare_case,
    restore_network,
    sample_patch,
    sgd_step,
    train,
)
from modalseg.volume_io import PhantomSpec, generate_phantom

TINY_NET = dict(num_scales=2, channels=(32, 64), subspace_channels=8)


def tiny_train_cfg(**kw):
    defaults = dict(
        epochs=1, iters_per_epoch=4, batch_size=2, patch_size=16, seed=0,
        augment=AugmentConfig.none(),
    )
    defaults.update(kw)
    return TrainConfig(**defaults)


def test_poly_lr_values():
    cfg = TrainConfig(epochs=1000, learning_rate=0.01, poly_gamma=0.9)
    assert poly_lr(0, cfg) == pytest.approx(0.01)
    assert poly_lr(500, cfg) == pytest.approx(0.01 * 0.5 ** 0.9, rel=1e-6)
    assert poly_lr(500, cfg) == pytest.approx(0.005359, abs=1e-6)
    lrs = [poly_lr(e, cfg) for e in range(0, 1000, 100)]
    assert all(a > b for a, b in zip(lrs, lrs[1:]))
    assert poly_lr(999, cfg) > 0
    with pytest.raises(ValueError):
        poly_lr(1000, cfg)


def _train_case(shape=(24, 24, 24), seed=3):
    spec = PhantomSpec(
        shape=shape, seed=seed, wt_radii=(6.0, 5.5, 6.0),
        tc_radii=(4.0, 3.6, 4.0), et_radii=(2.2, 2.0, 2.2),
    )
    return prepare_case(generate_phantom(spec))


def test_prepare_case_normalizes_over_mask():
    case = _train_case()
    rec = generate_phantom(PhantomSpec(
        shape=(24, 24, 24), seed=3, wt_radii=(6.0, 5.5, 6.0),
        tc_radii=(4.0, 3.6, 4.0), et_radii=(2.2, 2.0, 2.2),
    ))
    mask = rec.brain_mask
    for c in range(4):
        inside = case.volumes[c][mask].astype(np.float64)
        assert abs(inside.mean()) < 1e-4
        assert abs(inside.std() - 1.0) < 1e-4
        assert np.all(case.volumes[c][~mask] == 0.0)


def test_sample_patch_identity_when_full_volume():
    case = _train_case()
    rng = np.random.default_rng(0)
    vols, labels = sample_patch(case, 24, rng)
    assert np.array_equal(vols, case.volumes)
    assert np.array_equal(labels, case.labels)


def test_sample_patch_deterministic():
    case = _train_case()
    a = sample_patch(case, 16, np.random.default_rng(5))
    b = sample_patch(case, 16, np.random.default_rng(5))
    assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])


def test_sample_patch_foreground_bias():
    case = _train_case(shape=(32, 32, 32))
    rng = np.random.default_rng(6)
    hits = sum(
        (sample_patch(case, 8, rng, foreground_bias=0.6)[1] > 0).any()
        for _ in range(1000)
    )
    assert hits >= 500


def test_sample_patch_too_large_rejected():
    case = _train_case()
    with pytest.raises(ValueError):
        sample_patch(case, 32, np.random.default_rng(0))


def test_augment_disabled_is_identity():
    case = _train_case()
    rng = np.random.default_rng(1)
    vols, labels = sample_patch(case, 16, rng)
    out_v, out_l = augment(vols.copy(), labels.copy(), rng, AugmentConfig.none())
    assert np.array_equal(out_v, vols) and np.array_equal(out_l, labels)


def test_mirror_involution_and_correspondence():
    case = _train_case()
    vols, labels = sample_patch(case, 16, np.random.default_rng(2))
    axes = (True, False, True)
    v1, l1 = apply_mirror(vols, labels, axes)
    v2, l2 = apply_mirror(v1, l1, axes)
    assert np.array_equal(v2, vols) and np.array_equal(l2, labels)
    # voxelwise correspondence is preserved: flipping moves tumor voxels with image
    assert np.array_equal(np.asarray(l1), labels[::-1, :, ::-1])
    assert np.array_equal(np.asarray(v1), vols[:, ::-1, :, ::-1])


def test_rot90_preserves_correspondence():
    case = _train_case()
    vols, labels = sample_patch(case, 16, np.random.default_rng(3))
    v, l = apply_rot90(vols, labels, (0, 2), 1)
    assert (l > 0).sum() == (labels > 0).sum()
    assert v.shape == vols.shape
    # same transform applied to both: tumor-masked intensities are preserved
    assert np.allclose(np.sort(v[0][l > 0]), np.sort(vols[0][labels > 0]))


def test_augment_intensity_never_touches_labels():
    case = _train_case()
    rng = np.random.default_rng(4)
    vols, labels = sample_patch(case, 16, rng)
    cfg = AugmentConfig(mirror=False, rotate90=False, noise=True, blur=True,
                        noise_prob=1.0, blur_prob=1.0)
    out_v, out_l = augment(vols.copy(), labels.copy(), rng, cfg)
    assert np.array_equal(out_l, labels)
    assert not np.array_equal(out_v, vols)


def test_sgd_momentum_closed_form_probe():
    lr, mu = 0.1, 0.9
    grads = [1.0, -0.5, 0.25]
    for nesterov in (False, True):
        store = ParameterStore(seed=0)
        store.add("probe", np.array([1.0], dtype=np.float32))
        buffers = {}
        # hand-rolled reference
        p_ref, v_ref = 1.0, 0.0
        for g in grads:
            store["probe"].grad = torch.tensor([g])
            sgd_step(store, buffers, lr, mu, nesterov)
            v_ref = mu * v_ref + g
            p_ref -= lr * ((g + mu * v_ref) if nesterov else v_ref)
            assert store["probe"].data.item() == pytest.approx(p_ref, rel=1e-6)
            assert store["probe"].grad is None  # consumed


def test_short_training_reduces_loss(tiny_manifest):
    cfg = tiny_train_cfg(epochs=2, iters_per_epoch=15, seed=1)
    result = train(tiny_manifest, tiny_manifest.parent / "run", cfg,
                   UNetConfig(**TINY_NET), LossConfig())
    lines = [json.loads(l) for l in open(result.metrics_path)]
    assert len(lines) == 30
    first = np.mean([l["L_total"] for l in lines[:8]])
    last = np.mean([l["L_total"] for l in lines[-8:]])
    assert last < first


def test_training_deterministic(tiny_manifest, tmp_path):
    cfg = tiny_train_cfg(epochs=1, iters_per_epoch=5)
    a = train(tiny_manifest, tmp_path / "a", cfg, UNetConfig(**TINY_NET), LossConfig())
    b = train(tiny_manifest, tmp_path / "b", cfg, UNetConfig(**TINY_NET), LossConfig())
    assert a.metrics_path.read_bytes() == b.metrics_path.read_bytes()
    pa = load_checkpoint(a.checkpoint_path).params
    pb = load_checkpoint(b.checkpoint_path).params
    assert all(np.array_equal(pa[k], pb[k]) for k in pa)


def test_resume_reproduces_uninterrupted_trace(tiny_manifest, tmp_path):
    net = UNetConfig(**TINY_NET)
    full_cfg = tiny_train_cfg(epochs=4, iters_per_epoch=3)
    full = train(tiny_manifest, tmp_path / "full", full_cfg, net, LossConfig())
    # same run interrupted after epoch 1, then resumed to completion
    train(tiny_manifest, tmp_path / "half", full_cfg, net, LossConfig(),
          stop_after_epoch=1)
    resumed = train(
        tiny_manifest, tmp_path / "resumed", full_cfg, net, LossConfig(),
        resume_from=tmp_path / "half" / "checkpoint.npz",
    )
    full_lines = full.metrics_path.read_text().splitlines()
    resumed_lines = resumed.metrics_path.read_text().splitlines()
    assert resumed_lines == full_lines[6:]
    pa = load_checkpoint(full.checkpoint_path).params
    pb = load_checkpoint(resumed.checkpoint_path).params
    assert all(np.array_equal(pa[k], pb[k]) for k in pa)


def test_resume_rejects_config_mismatch(tiny_manifest, tmp_path):
    net = UNetConfig(**TINY_NET)
    train(tiny_manifest, tmp_path / "base", tiny_train_cfg(), net, LossConfig())
    other = tiny_train_cfg(seed=99)
    with pytest.raises(ValueError, match="config"):
        train(tiny_manifest, tmp_path / "resume", other, net, LossConfig(),
              resume_from=tmp_path / "base" / "checkpoint.npz")


def test_all_drawn_deltas_are_valid(tiny_manifest, tmp_path):
    cfg = tiny_train_cfg(epochs=1, iters_per_epoch=12)
    result = train(tiny_manifest, tmp_path / "run", cfg, UNetConfig(**TINY_NET), LossConfig())
    valid = {tuple(d.bits) for d in enumerate_scenarios()}
    seen = set()
    for line in open(result.metrics_path):
        for bits in json.loads(line)["delta"]:
            assert tuple(bits) in valid
            seen.add(tuple(bits))
    assert len(seen) > 1  # perturbation actually varies


def test_per_sample_granularity_varies_within_batch(tiny_manifest, tmp_path):
    cfg = tiny_train_cfg(epochs=1, iters_per_epoch=12, perturb_granularity="sample")
    result = train(tiny_manifest, tmp_path / "s", cfg, UNetConfig(**TINY_NET), LossConfig())
    mixed = False
    for line in open(result.metrics_path):
        deltas = json.loads(line)["delta"]
        if deltas[0] != deltas[1]:
            mixed = True
    assert mixed
    cfg_b = tiny_train_cfg(epochs=1, iters_per_epoch=6, perturb_granularity="batch")
    result_b = train(tiny_manifest, tmp_path / "b", cfg_b, UNetConfig(**TINY_NET), LossConfig())
    for line in open(result_b.metrics_path):
        deltas = json.loads(line)["delta"]
        assert deltas[0] == deltas[1]


def test_nan_loss_aborts_with_dump(tiny_manifest, tmp_path, monkeypatch):
    import modalseg.trainer as trainer_mod

    def explode(*args, **kwargs):
        raise NumericsError("injected")

    monkeypatch.setattr(trainer_mod, "total_loss", explode)
    with pytest.raises(NumericsError):
        train(tiny_manifest, tmp_path / "nan", tiny_train_cfg(), UNetConfig(**TINY_NET), LossConfig())
    assert (tmp_path / "nan" / "nan_dump.npz").is_file()
    dump = np.load(tmp_path / "nan" / "nan_dump.npz")
    assert dump["volumes"].shape[0] == 4


def test_checkpoint_roundtrip_restores_network(tiny_manifest, tmp_path):
    net = UNetConfig(**TINY_NET)
    result = train(tiny_manifest, tmp_path / "run", tiny_train_cfg(), net, LossConfig())
    ckpt = load_checkpoint(result.checkpoint_path)
    store, cfg = restore_network(ckpt)
    assert cfg == net
    trained = result.store.state_dict()
    for name, arr in store.state_dict().items():
        assert np.array_equal(arr, trained[name])


def test_patch_not_divisible_rejected(tiny_manifest, tmp_path):
    with pytest.raises(ValueError, match="divisible"):
        train(tiny_manifest, tmp_path / "x", tiny_train_cfg(patch_size=15),
              UNetConfig(**TINY_NET), LossConfig())


def test_load_training_cases(tiny_manifest):
    cases = load_training_cases(tiny_manifest, "train")
    assert len(cases) == 2
    assert cases[0].volumes.shape == (4, 16, 16, 16)
    assert len(cases[0].fg_coords) > 0
