"""Command-line entry point: data generation, training, evaluation, ablations,
gradient checks, and the efficiency factor.

Exit codes: 0 ok, 1 usage error, 2 data error, 3 numeric failure. Every
command that writes artifacts also writes a ``config.json`` echo of its
resolved settings for reproducibility.
"""
from __future__ import annotations

import argparse
import json
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .backbone import UNetConfig, count_flops, count_params
from .evaluator import (
    EfficiencyInput,
    efficiency_factor,
    evaluate_scenarios,
    network_predict_fn,
    scaled_et_threshold,
)
from .gradsuite import run_gradient_suite
from .losses import LossConfig, NumericsError
from .modality_graph import ModalityIndicator, RelationshipTable
from .trainer import (
    AugmentConfig,
    TrainConfig,
    load_checkpoint,
    load_training_cases,
    restore_network,
    train,
)
from .volume_io import (
    CaseFormatError,
    DatasetManifest,
    PhantomSpec,
    generate_phantom,
    save_case,
    save_manifest,
)

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse defaults to exit code 2; we want 1
        raise UsageError(message)


def _write_echo(out_dir: Path, payload: dict) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.json").write_text(json.dumps(payload, indent=1, sort_keys=True) + "\n")


def _parse_shape(values: list[int]) -> tuple[int, int, int]:
    if len(values) == 1:
        return (values[0],) * 3
    if len(values) == 3:
        return tuple(values)
    raise UsageError("--shape takes 1 or 3 integers")


def cmd_gen_data(args) -> int:
    shape = _parse_shape(args.shape)
    out = Path(args.out)
    if out.exists() and any(out.iterdir()) and not args.force:
        print(f"error: output dir {out} is not empty (use --force)", file=sys.stderr)
        return EXIT_DATA
    factor = 2 ** (args.scales - 1)
    if any(s % factor for s in shape):
        print(
            f"warning: shape {shape} not divisible by {factor}; "
            f"the {args.scales}-scale backbone will reject these volumes",
            file=sys.stderr,
        )
    out.mkdir(parents=True, exist_ok=True)
    case_seeds = np.random.SeedSequence(args.seed).generate_state(args.n_cases)
    rel_paths = []
    for i, case_seed in enumerate(case_seeds):
        spec = PhantomSpec.scaled(shape, seed=int(case_seed))
        record = generate_phantom(spec)
        record.case_id = f"case_{i:03d}"
        save_case(record, out / record.case_id)
        rel_paths.append(record.case_id)

    order = np.random.default_rng(args.seed).permutation(args.n_cases)
    n = args.n_cases
    n_train = max(1, int(n * 0.7))
    n_val = int(n * 0.1)
    if n >= 2 and n_train + n_val >= n:
        n_train = max(1, n - n_val - 1)
    splits = {
        "train": [rel_paths[i] for i in order[:n_train]],
        "val": [rel_paths[i] for i in order[n_train:n_train + n_val]],
        "test": [rel_paths[i] for i in order[n_train + n_val:]],
    }
    save_manifest(DatasetManifest(splits=splits, seed=args.seed), out / "manifest.json")
    _write_echo(out, {"command": "gen-data", "n_cases": n, "shape": list(shape),
                      "seed": args.seed, "scales": args.scales})
    print(f"wrote {n} cases and manifest.json to {out}")
    return EXIT_OK


def _net_config(args) -> UNetConfig:
    kwargs = dict(
        cssa_soft_gate=args.cssa_soft_gate,
        decoupler_mid_norm_act=not args.no_mid_norm_act,
    )
    if args.profile == "full":
        return UNetConfig.full(**kwargs)
    return UNetConfig.desk(**kwargs)


def _train_config(args) -> TrainConfig:
    aug = AugmentConfig.none() if args.no_augment else AugmentConfig()
    return TrainConfig(
        epochs=args.epochs,
        iters_per_epoch=args.iters_per_epoch,
        batch_size=args.batch_size,
        learning_rate=args.learning_rate,
        patch_size=args.patch_size,
        seed=args.seed,
        perturb_granularity=args.perturb_granularity,
        augment=aug,
    )


def _apply_config_file(train_cfg: TrainConfig, net_cfg: UNetConfig, loss_cfg: LossConfig, path: str | None):
    if path is None:
        return train_cfg, net_cfg, loss_cfg
    blob = json.loads(Path(path).read_text())
    if "train" in blob:
        train_cfg = TrainConfig.from_dict({**train_cfg.to_dict(), **blob["train"]})
    if "net" in blob:
        net_cfg = UNetConfig.from_dict({**net_cfg.to_dict(), **blob["net"]})
    if "loss" in blob:
        loss_cfg = LossConfig(**{**asdict(loss_cfg), **blob["loss"]})
    return train_cfg, net_cfg, loss_cfg


def cmd_train(args) -> int:
    table = RelationshipTable.from_string(args.rcr_order)
    train_cfg = _train_config(args)
    net_cfg = _net_config(args)
    loss_cfg = LossConfig(kd_mode=args.kd_mode)
    train_cfg, net_cfg, loss_cfg = _apply_config_file(train_cfg, net_cfg, loss_cfg, args.config)
    out = Path(args.out)
    _write_echo(out, {
        "command": "train",
        "manifest": str(args.manifest),
        "train": train_cfg.to_dict(),
        "net": net_cfg.to_dict(),
        "loss": asdict(loss_cfg),
        "rcr_order": str(table),
    })
    result = train(
        args.manifest, out, train_cfg, net_cfg, loss_cfg, table, resume_from=args.resume
    )
    print(f"trained {train_cfg.epochs} epochs -> {result.checkpoint_path}")
    return EXIT_OK


def _parse_scenario(bits: str) -> ModalityIndicator:
    if len(bits) != 4 or any(b not in "01" for b in bits):
        raise UsageError("--scenario takes 4 bits in t1,tc,t2,fl order, e.g. 0011")
    return ModalityIndicator(tuple(int(b) for b in bits))


def cmd_eval(args) -> int:
    table = RelationshipTable.from_string(args.rcr_order)
    scenarios = [_parse_scenario(args.scenario)] if args.scenario else None
    ckpt = load_checkpoint(args.checkpoint)
    store, net_cfg = restore_network(ckpt)
    patch = ckpt.config["train"]["patch_size"]
    cases = load_training_cases(args.manifest, args.split)
    if not cases:
        print(f"error: split {args.split!r} is empty", file=sys.stderr)
        return EXIT_DATA
    et_threshold = args.et_threshold
    if et_threshold is None:
        et_threshold = scaled_et_threshold(int(np.prod(cases[0].labels.shape)))
    predict = network_predict_fn(store, net_cfg, table, patch, et_threshold)
    table_out = evaluate_scenarios(predict, cases, scenarios, both_empty=args.both_empty_dsc)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "table.tsv").write_text(table_out.to_tsv())
    (out / "table.txt").write_text(table_out.to_text())
    _write_echo(out, {
        "command": "eval",
        "checkpoint": str(args.checkpoint),
        "manifest": str(args.manifest),
        "split": args.split,
        "scenario": args.scenario,
        "rcr_order": str(table),
        "et_threshold": et_threshold,
        "both_empty_dsc": args.both_empty_dsc,
    })
    print(table_out.to_text())
    return EXIT_OK


COMPONENT_ROWS = (  # (FD, CSSA, RCR) toggle combinations, baseline first
    (0, 0, 0), (1, 0, 0), (0, 1, 0), (0, 0, 1),
    (0, 1, 1), (1, 0, 1), (1, 1, 0), (1, 1, 1),
)
RCR_ORDER_ROWS = ("III,II,I", "III,I,II", "II,III,I", "II,I,III", "I,III,II", "I,II,III")
KD_PLACEMENT_ROWS = (("w/o alignment", "none"), ("after CSSA", "post"), ("before CSSA", "pre"))


def cmd_ablate(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cases = load_training_cases(args.manifest, "test")
    if not cases:
        print("error: empty test split", file=sys.stderr)
        return EXIT_DATA

    def run_variant(tag: str, net_cfg: UNetConfig, loss_cfg: LossConfig, table: RelationshipTable):
        train_cfg = TrainConfig(
            epochs=1,
            iters_per_epoch=args.iters,
            batch_size=2,
            patch_size=args.patch_size,
            seed=args.seed,
        )
        result = train(args.manifest, out / f"run_{tag}", train_cfg, net_cfg, loss_cfg, table)
        predict = network_predict_fn(
            result.store, net_cfg, table, args.patch_size,
            scaled_et_threshold(int(np.prod(cases[0].labels.shape))),
        )
        return evaluate_scenarios(predict, cases).average

    rows: list[tuple[str, tuple[float, float, float]]] = []
    header: list[str]
    if args.kind == "components":
        header = ["FD", "CSSA", "RCR", "WT", "TC", "ET"]
        for i, (fd, cs, rc) in enumerate(COMPONENT_ROWS):
            net_cfg = _net_config(args)
            net_cfg.feature_decoupling = bool(fd)
            net_cfg.cssa_enabled = bool(cs)
            net_cfg.rcr_enabled = bool(rc)
            loss_cfg = LossConfig(kd_mode="pre" if fd else "none")
            avg = run_variant(f"comp{i}", net_cfg, loss_cfg, RelationshipTable())
            rows.append(("\t".join("x" if t else "-" for t in (fd, cs, rc)), avg))
    elif args.kind == "rcr-order":
        header = ["order", "WT", "TC", "ET"]
        for order in RCR_ORDER_ROWS:
            avg = run_variant(
                f"order_{order.replace(',', '')}",
                _net_config(args), LossConfig(), RelationshipTable.from_string(order),
            )
            rows.append((order, avg))
    elif args.kind == "kd-placement":
        header = ["constraint", "WT", "TC", "ET"]
        for label, mode in KD_PLACEMENT_ROWS:
            avg = run_variant(f"kd_{mode}", _net_config(args), LossConfig(kd_mode=mode), RelationshipTable())
            rows.append((label, avg))
    else:
        raise UsageError(f"unknown ablation kind {args.kind!r}")

    lines = ["\t".join(header)]
    for label, (wt, tc, et) in rows:
        lines.append(f"{label}\t{wt:.4f}\t{tc:.4f}\t{et:.4f}")
    (out / "table.tsv").write_text("\n".join(lines) + "\n")
    (out / "table.txt").write_text("\n".join(lines).expandtabs(14) + "\n")
    _write_echo(out, {
        "command": "ablate", "kind": args.kind, "manifest": str(args.manifest),
        "iters": args.iters, "patch_size": args.patch_size, "seed": args.seed,
    })
    print("\n".join(lines).expandtabs(14))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    reports = run_gradient_suite(seeds=args.seeds, tolerance=args.tolerance)
    failed = [r for r in reports if not r.passed]
    for r in reports:
        status = "ok" if r.passed else "FAIL"
        print(f"{r.op_name:28s} max_rel_err={r.max_rel_error:.3e}  [{status}]")
    if args.out:
        _write_echo(Path(args.out), {
            "command": "gradcheck", "seeds": args.seeds, "tolerance": args.tolerance,
            "failed": [r.op_name for r in failed],
        })
    if failed:
        print(f"{len(failed)} gradient check(s) failed", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


def cmd_efficiency(args) -> int:
    inp = EfficiencyInput(
        ddsc_percent=args.ddsc,
        param_millions=args.param,
        flops_giga=args.flops,
        eta=args.eta,
        lam=args.lam,
        mu=args.mu,
    )
    p = efficiency_factor(inp)
    if args.out:
        _write_echo(Path(args.out), {"command": "efficiency", **asdict(inp), "P": p})
    print(f"P = {p:.6f}")
    return EXIT_OK


def cmd_count(args) -> int:
    from .diffops import ParameterStore
    from .backbone import build_network

    net_cfg = _net_config(args)
    store = ParameterStore(seed=0)
    build_network(store, net_cfg)
    patch = (args.patch_size,) * 3
    for scope in ("enabling", "backbone", "rcr", "all"):
        params = count_params(store, scope)
        flops = count_flops(net_cfg, patch, scope)
        print(f"{scope:9s} params={params:>10,d}  flops={flops / 1e9:10.3f} G")
    return EXIT_OK


def build_parser() -> _Parser:
    parser = _Parser(prog="modalseg", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate phantom cases and a split manifest")
    p.add_argument("--n-cases", type=int, default=10)
    p.add_argument("--shape", type=int, nargs="+", default=[32])
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--scales", type=int, default=3)
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")
    p.set_defaults(fn=cmd_gen_data)

    def add_model_flags(p):
        p.add_argument("--profile", choices=("desk", "full"), default="desk")
        p.add_argument("--cssa-soft-gate", action="store_true")
        p.add_argument("--no-mid-norm-act", action="store_true")

    p = sub.add_parser("train", help="train on a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None, help="JSON with train/net/loss overrides")
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--iters-per-epoch", type=int, default=60)
    p.add_argument("--batch-size", type=int, default=2)
    p.add_argument("--learning-rate", type=float, default=0.01)
    p.add_argument("--patch-size", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--perturb-granularity", choices=("sample", "batch"), default="sample")
    p.add_argument("--kd-mode", choices=("pre", "post", "none"), default="pre")
    p.add_argument("--rcr-order", default="I,II,III")
    p.add_argument("--no-augment", action="store_true")
    p.add_argument("--resume", default=None)
    add_model_flags(p)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint across scenarios")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--scenario", default=None, help="4 bits in t1,tc,t2,fl order")
    p.add_argument("--rcr-order", default="I,II,III")
    p.add_argument("--et-threshold", type=int, default=None)
    p.add_argument("--both-empty-dsc", type=float, default=1.0)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("ablate", help="train/evaluate component or routing variants")
    p.add_argument("--kind", choices=("components", "rcr-order", "kd-placement"), required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--iters", type=int, default=150)
    p.add_argument("--patch-size", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)
    add_model_flags(p)
    p.set_defaults(fn=cmd_ablate)

    p = sub.add_parser("gradcheck", help="finite-difference check of all primitives")
    p.add_argument("--seeds", type=int, default=20)
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.add_argument("--out", default=None)
    p.set_defaults(fn=cmd_gradcheck)

    p = sub.add_parser("efficiency", help="enabling-module efficiency factor")
    p.add_argument("--ddsc", type=float, required=True)
    p.add_argument("--param", type=float, required=True)
    p.add_argument("--flops", type=float, required=True)
    p.add_argument("--eta", type=float, required=True)
    p.add_argument("--lambda", dest="lam", type=float, default=0.5)
    p.add_argument("--mu", type=float, default=0.5)
    p.add_argument("--out", default=None)
    p.set_defaults(fn=cmd_efficiency)

    p = sub.add_parser("count", help="parameter/FLOP counts per scope")
    p.add_argument("--patch-size", type=int, default=32)
    add_model_flags(p)
    p.set_defaults(fn=cmd_count)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    try:
        return args.fn(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (CaseFormatError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericsError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
