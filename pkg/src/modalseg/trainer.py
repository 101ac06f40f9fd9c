"""Training loop: random modality perturbation, patch sampling, light
augmentation, momentum SGD with a poly learning-rate schedule, and
bit-reproducible checkpointing.

Each batch item is forwarded separately (per-sample perturbation means the
encode path differs across items) and gradients accumulate before one
optimizer step. All randomness flows through two seeded numpy generators
whose states are checkpointed, so a resumed run reproduces the uninterrupted
loss trace exactly.
"""
from __future__ import annotations

import hashlib
import json
import shutil
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
import torch
from scipy.ndimage import gaussian_filter

from . import diffops as ops
from .backbone import UNetConfig, build_network, forward
from .diffops import ParameterStore
from .losses import LossConfig, NumericsError, total_loss
from .modality_graph import (
    DEFAULT_TABLE,
    ModalityIndicator,
    RelationshipTable,
    sample_perturbation,
)
from .volume_io import CaseRecord, load_split_cases, zscore_normalize


@dataclass
class AugmentConfig:
    mirror: bool = True
    rotate90: bool = True
    noise: bool = True
    blur: bool = True
    rotate_prob: float = 0.5
    noise_prob: float = 0.3
    noise_sigma: float = 0.1
    blur_prob: float = 0.2
    blur_sigma: tuple[float, float] = (0.5, 1.0)

    @classmethod
    def none(cls) -> "AugmentConfig":
        return cls(mirror=False, rotate90=False, noise=False, blur=False)


@dataclass
class TrainConfig:
    epochs: int = 10
    iters_per_epoch: int = 60
    batch_size: int = 2
    learning_rate: float = 0.01
    poly_gamma: float = 0.9
    momentum: float = 0.99
    nesterov: bool = True
    patch_size: int = 32
    seed: int = 0
    perturb_granularity: str = "sample"  # or "batch"
    foreground_bias: float = 0.6
    augment: AugmentConfig = field(default_factory=AugmentConfig)

    def __post_init__(self) -> None:
        if self.learning_rate <= 0:
            raise ValueError("learning rate must be positive")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.perturb_granularity not in ("sample", "batch"):
            raise ValueError("perturb_granularity must be 'sample' or 'batch'")
        if isinstance(self.augment, dict):
            self.augment = AugmentConfig(**self.augment)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


def poly_lr(epoch: int, config: TrainConfig) -> float:
    """lr0 * (1 - epoch/epochs)^gamma, evaluated per epoch."""
    if not 0 <= epoch < config.epochs:
        raise ValueError(f"epoch {epoch} outside [0, {config.epochs})")
    return config.learning_rate * (1.0 - epoch / config.epochs) ** config.poly_gamma


@dataclass
class TrainingCase:
    """A case prepared for training: normalized volumes plus tumor coordinates."""

    case_id: str
    volumes: np.ndarray  # (4, D, H, W) float32, z-scored over the brain mask
    labels: np.ndarray  # (D, H, W) uint8
    fg_coords: np.ndarray  # (n, 3) voxel coordinates with label > 0


def prepare_case(record: CaseRecord) -> TrainingCase:
    vols = np.stack(
        [zscore_normalize(v, record.brain_mask).data for v in record.volumes], axis=0
    )
    labels = record.labels.labels
    return TrainingCase(
        case_id=record.case_id,
        volumes=vols,
        labels=labels,
        fg_coords=np.argwhere(labels > 0),
    )


def load_training_cases(manifest_path: str | Path, split: str = "train") -> list[TrainingCase]:
    return [prepare_case(rec) for rec in load_split_cases(manifest_path, split)]


def sample_patch(
    case: TrainingCase,
    patch_size: int,
    rng: np.random.Generator,
    foreground_bias: float = 0.6,
) -> tuple[np.ndarray, np.ndarray]:
    """Aligned random crop of all modalities + labels, biased toward tumor."""
    dims = case.labels.shape
    if any(d < patch_size for d in dims):
        raise ValueError(f"patch {patch_size} larger than volume {dims}")
    if len(case.fg_coords) and rng.random() < foreground_bias:
        voxel = case.fg_coords[rng.integers(len(case.fg_coords))]
        offs = rng.integers(0, patch_size, size=3)
        start = np.clip(voxel - offs, 0, np.array(dims) - patch_size)
    else:
        start = np.array([rng.integers(0, d - patch_size + 1) for d in dims])
    sl = tuple(slice(int(s), int(s) + patch_size) for s in start)
    return case.volumes[(slice(None), *sl)].copy(), case.labels[sl].copy()


def apply_mirror(
    vols: np.ndarray, labels: np.ndarray, axes: tuple[bool, bool, bool]
) -> tuple[np.ndarray, np.ndarray]:
    for ax, flip in enumerate(axes):
        if flip:
            vols = np.flip(vols, axis=ax + 1)
            labels = np.flip(labels, axis=ax)
    return vols, labels


def apply_rot90(
    vols: np.ndarray, labels: np.ndarray, axis_pair: tuple[int, int], k: int
) -> tuple[np.ndarray, np.ndarray]:
    vols = np.rot90(vols, k=k, axes=(axis_pair[0] + 1, axis_pair[1] + 1))
    labels = np.rot90(labels, k=k, axes=axis_pair)
    return vols, labels


_ROT_PAIRS = ((0, 1), (0, 2), (1, 2))


def augment(
    vols: np.ndarray,
    labels: np.ndarray,
    rng: np.random.Generator,
    cfg: AugmentConfig,
) -> tuple[np.ndarray, np.ndarray]:
    """Geometric transforms hit volumes and labels identically; intensity
    transforms (noise, blur) never touch the labels."""
    if cfg.mirror:
        axes = tuple(bool(rng.random() < 0.5) for _ in range(3))
        vols, labels = apply_mirror(vols, labels, axes)
    if cfg.rotate90 and rng.random() < cfg.rotate_prob:
        pair = _ROT_PAIRS[rng.integers(len(_ROT_PAIRS))]
        k = int(rng.integers(1, 4))
        vols, labels = apply_rot90(vols, labels, pair, k)
    vols = np.ascontiguousarray(vols)
    labels = np.ascontiguousarray(labels)
    if cfg.noise and rng.random() < cfg.noise_prob:
        vols = vols + rng.normal(0.0, cfg.noise_sigma, size=vols.shape).astype(np.float32)
    if cfg.blur and rng.random() < cfg.blur_prob:
        sigma = rng.uniform(*cfg.blur_sigma)
        vols = np.stack([gaussian_filter(v, sigma) for v in vols], axis=0)
    return vols.astype(np.float32, copy=False), labels


def sgd_step(
    store: ParameterStore,
    buffers: dict[str, torch.Tensor],
    lr: float,
    momentum: float,
    nesterov: bool,
) -> None:
    """v <- mu*v + g; update by g + mu*v (nesterov) or v. Consumes gradients."""
    for name, p in store.items():
        if p.grad is None:
            continue
        g = p.grad
        buf = buffers.get(name)
        if buf is None:
            buf = torch.zeros_like(p.data)
            buffers[name] = buf
        buf.mul_(momentum).add_(g)
        step_dir = g + momentum * buf if nesterov else buf
        p.data -= lr * step_dir
        p.grad = None


def _config_blob(
    train_cfg: TrainConfig, net_cfg: UNetConfig, loss_cfg: LossConfig, table: RelationshipTable
) -> dict:
    return {
        "train": train_cfg.to_dict(),
        "net": net_cfg.to_dict(),
        "loss": asdict(loss_cfg),
        "rcr_order": str(table),
    }


def _config_hash(blob: dict) -> str:
    return hashlib.sha256(json.dumps(blob, sort_keys=True).encode()).hexdigest()[:16]


def save_checkpoint(
    path: str | Path,
    store: ParameterStore,
    buffers: dict[str, torch.Tensor],
    epoch: int,
    rng_states: dict,
    config_blob: dict,
) -> Path:
    path = Path(path)
    arrays = {f"param/{k}": v for k, v in store.state_dict().items()}
    arrays.update({f"mom/{k}": v.numpy().copy() for k, v in buffers.items()})
    meta = {
        "epoch": epoch,
        "rng_states": rng_states,
        "config": config_blob,
        "config_hash": _config_hash(config_blob),
    }
    arrays["meta_json"] = np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)
    np.savez(path, **arrays)
    return path


@dataclass
class Checkpoint:
    params: dict[str, np.ndarray]
    momentum: dict[str, np.ndarray]
    epoch: int
    rng_states: dict
    config: dict
    config_hash: str


def load_checkpoint(path: str | Path) -> Checkpoint:
    with np.load(Path(path)) as data:
        meta = json.loads(bytes(data["meta_json"]).decode())
        params = {k[len("param/"):]: data[k] for k in data.files if k.startswith("param/")}
        momentum = {k[len("mom/"):]: data[k] for k in data.files if k.startswith("mom/")}
    return Checkpoint(
        params=params,
        momentum=momentum,
        epoch=int(meta["epoch"]),
        rng_states=meta["rng_states"],
        config=meta["config"],
        config_hash=meta["config_hash"],
    )


def restore_network(checkpoint: Checkpoint) -> tuple[ParameterStore, UNetConfig]:
    net_cfg = UNetConfig.from_dict(checkpoint.config["net"])
    store = ParameterStore(seed=checkpoint.config["train"]["seed"])
    build_network(store, net_cfg)
    store.load_state_dict(checkpoint.params)
    return store, net_cfg


@dataclass
class TrainResult:
    checkpoint_path: Path
    metrics_path: Path
    epochs_run: int
    store: ParameterStore
    net_config: UNetConfig


def _batch_deltas(
    train_cfg: TrainConfig, perturb_rng: np.random.Generator
) -> list[ModalityIndicator]:
    if train_cfg.perturb_granularity == "batch":
        delta = sample_perturbation(perturb_rng)
        return [delta] * train_cfg.batch_size
    return [sample_perturbation(perturb_rng) for _ in range(train_cfg.batch_size)]


def train(
    manifest_path: str | Path,
    out_dir: str | Path,
    train_cfg: TrainConfig,
    net_cfg: UNetConfig,
    loss_cfg: LossConfig | None = None,
    table: RelationshipTable = DEFAULT_TABLE,
    resume_from: str | Path | None = None,
    stop_after_epoch: int | None = None,
) -> TrainResult:
    """Run (or resume) training; writes metrics.jsonl and per-epoch checkpoints.

    ``stop_after_epoch`` interrupts the run after that epoch's checkpoint (the
    schedule still belongs to the full ``train_cfg.epochs`` run), so a resumed
    run reproduces the uninterrupted trace exactly.
    """
    loss_cfg = loss_cfg or LossConfig()
    if not net_cfg.feature_decoupling and loss_cfg.kd_mode != "none":
        loss_cfg = LossConfig(**{**asdict(loss_cfg), "kd_mode": "none"})
    if train_cfg.patch_size % net_cfg.downsample_factor:
        raise ValueError(
            f"patch size {train_cfg.patch_size} not divisible by {net_cfg.downsample_factor}"
        )
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    blob = _config_blob(train_cfg, net_cfg, loss_cfg, table)

    cases = load_training_cases(manifest_path, "train")
    if not cases:
        raise ValueError("empty training split")

    store = ParameterStore(seed=train_cfg.seed)
    build_network(store, net_cfg)
    buffers: dict[str, torch.Tensor] = {}
    data_rng = np.random.default_rng(np.random.SeedSequence(train_cfg.seed).spawn(2)[0])
    perturb_rng = np.random.default_rng(np.random.SeedSequence(train_cfg.seed).spawn(2)[1])
    start_epoch = 0
    metrics_mode = "w"

    if resume_from is not None:
        ckpt = load_checkpoint(resume_from)
        if ckpt.config_hash != _config_hash(blob):
            raise ValueError("checkpoint config does not match the requested run")
        store.load_state_dict(ckpt.params)
        buffers = {k: torch.from_numpy(v.copy()) for k, v in ckpt.momentum.items()}
        data_rng.bit_generator.state = ckpt.rng_states["data"]
        perturb_rng.bit_generator.state = ckpt.rng_states["perturb"]
        start_epoch = ckpt.epoch + 1
        metrics_mode = "a"

    metrics_path = out_dir / "metrics.jsonl"
    checkpoint_path = out_dir / "checkpoint.npz"
    with open(metrics_path, metrics_mode) as metrics:
        for epoch in range(start_epoch, train_cfg.epochs):
            lr = poly_lr(epoch, train_cfg)
            for it in range(train_cfg.iters_per_epoch):
                global_iter = epoch * train_cfg.iters_per_epoch + it
                deltas = _batch_deltas(train_cfg, perturb_rng)
                store.zero_grads()
                seg_sum = kd_sum = total_sum = 0.0
                for delta in deltas:
                    case = cases[data_rng.integers(len(cases))]
                    vols, labels = sample_patch(
                        case, train_cfg.patch_size, data_rng, train_cfg.foreground_bias
                    )
                    vols, labels = augment(vols, labels, data_rng, train_cfg.augment)
                    inputs = {
                        m: ops.constant(vols[int(m)][None, None]) for m in delta.available
                    }
                    result = forward(inputs, delta, store, net_cfg, table)
                    try:
                        breakdown = total_loss(
                            result.logits, labels, result.features, delta, loss_cfg,
                            net_cfg.num_classes,
                        )
                    except NumericsError:
                        np.savez(
                            out_dir / "nan_dump.npz",
                            volumes=vols,
                            labels=labels,
                            delta=np.array(list(delta)),
                            iteration=np.array(global_iter),
                        )
                        raise
                    ops.backward(ops.mul(breakdown.total, 1.0 / len(deltas)))
                    seg_sum += breakdown.seg
                    kd_sum += breakdown.kd
                    total_sum += breakdown.total_value
                sgd_step(store, buffers, lr, train_cfg.momentum, train_cfg.nesterov)
                line = {
                    "iter": global_iter,
                    "epoch": epoch,
                    "lr": lr,
                    "L_seg": seg_sum / len(deltas),
                    "L_kd": kd_sum / len(deltas),
                    "L_total": total_sum / len(deltas),
                    "delta": [list(d) for d in deltas],
                }
                metrics.write(json.dumps(line) + "\n")
            metrics.flush()
            rng_states = {
                "data": data_rng.bit_generator.state,
                "perturb": perturb_rng.bit_generator.state,
            }
            epoch_path = out_dir / f"checkpoint_ep{epoch:03d}.npz"
            save_checkpoint(epoch_path, store, buffers, epoch, rng_states, blob)
            shutil.copyfile(epoch_path, checkpoint_path)
            if stop_after_epoch is not None and epoch >= stop_after_epoch:
                break

    return TrainResult(
        checkpoint_path=checkpoint_path,
        metrics_path=metrics_path,
        epochs_run=train_cfg.epochs - start_epoch,
        store=store,
        net_config=net_cfg,
    )
