"""Randomized finite-difference verification of every differentiable piece.

Each entry draws small random shapes and double-precision values from a
seeded rng, runs the op inside a scalar probe (weighted sum against a fixed
random constant so gradients are non-trivial), and compares the tape
gradients against central differences. Inputs for kinked ops are nudged away
from the kink so the numeric derivative is well-defined.
"""
from __future__ import annotations

from typing import Callable

import numpy as np
import torch

from . import diffops as ops
from .cssa import channel_scores, cssa_forward, register_cssa_params
from .decoupler import DecoupledFeatures, mutual_targets
from .diffops import GradCheckReport, ParameterStore, Tensor, grad_check
from .losses import dice_ce_loss, kd_loss, one_hot_labels
from .modality_graph import Modality

F64 = torch.float64


def _t(rng: np.random.Generator, shape) -> Tensor:
    return Tensor(rng.standard_normal(shape), requires_grad=True, dtype=F64)


def _probe_fn(rng: np.random.Generator, apply: Callable[..., Tensor], inputs: list[Tensor]):
    """Wrap ``apply`` into a scalar graph via a fixed random weighting."""
    out = apply(*inputs)
    c = ops.constant(rng.standard_normal(out.shape), dtype=F64)
    return lambda *ts: ops.sum_all(ops.mul(apply(*ts), c)), inputs


def _away_from_kink(rng: np.random.Generator, shape, margin: float = 0.05) -> Tensor:
    x = rng.standard_normal(shape)
    x = x + np.sign(x) * margin
    return Tensor(x, requires_grad=True, dtype=F64)


def _spatial(rng, lo=2, hi=4) -> tuple[int, int, int]:
    return tuple(int(rng.integers(lo, hi + 1)) for _ in range(3))


def _check_conv3d(rng, stride: int):
    n, cin, cout = rng.integers(1, 3), rng.integers(1, 4), rng.integers(1, 4)
    k = int(rng.choice([1, 3]))
    sp = _spatial(rng, 3, 4)
    x, w, b = _t(rng, (n, cin, *sp)), _t(rng, (cout, cin, k, k, k)), _t(rng, (cout,))
    return _probe_fn(rng, lambda x, w, b: ops.conv3d(x, w, b, stride=stride), [x, w, b])


def _check_conv3d_k1(rng):
    n, cin, cout = rng.integers(1, 3), rng.integers(1, 4), rng.integers(1, 4)
    sp = _spatial(rng)
    x, w, b = _t(rng, (n, cin, *sp)), _t(rng, (cout, cin, 1, 1, 1)), _t(rng, (cout,))
    return _probe_fn(rng, lambda x, w, b: ops.conv3d(x, w, b), [x, w, b])


def _check_transposed(rng):
    n, cin, cout = rng.integers(1, 3), rng.integers(1, 4), rng.integers(1, 4)
    sp = _spatial(rng, 2, 3)
    x, w, b = _t(rng, (n, cin, *sp)), _t(rng, (cin, cout, 2, 2, 2)), _t(rng, (cout,))
    return _probe_fn(rng, lambda x, w, b: ops.transposed_conv3d(x, w, b, stride=2), [x, w, b])


def _check_instance_norm(rng):
    n, c = rng.integers(1, 3), rng.integers(2, 5)
    sp = _spatial(rng)
    x, g, b = _t(rng, (n, c, *sp)), _t(rng, (c,)), _t(rng, (c,))
    return _probe_fn(rng, lambda x, g, b: ops.instance_norm(x, g, b), [x, g, b])


def _check_leaky(rng):
    x = _away_from_kink(rng, (int(rng.integers(1, 3)), int(rng.integers(2, 5)), *_spatial(rng)))
    return _probe_fn(rng, lambda x: ops.leaky_rectifier(x, 0.01), [x])


def _check_gap(rng):
    x = _t(rng, (rng.integers(1, 3), rng.integers(2, 5), *_spatial(rng)))
    return _probe_fn(rng, ops.global_average_pool, [x])


def _check_linear(rng):
    n, fin, fout = rng.integers(1, 4), rng.integers(2, 6), rng.integers(1, 4)
    x, w, b = _t(rng, (n, fin)), _t(rng, (fout, fin)), _t(rng, (fout,))
    return _probe_fn(rng, lambda x, w, b: ops.linear(x, w, b), [x, w, b])


def _check_softmax(rng):
    x = _t(rng, (rng.integers(1, 3), rng.integers(2, 8)))
    return _probe_fn(rng, lambda x: ops.softmax(x, axis=1), [x])


def _check_log_softmax(rng):
    x = _t(rng, (rng.integers(1, 3), rng.integers(2, 8)))
    return _probe_fn(rng, lambda x: ops.log_softmax(x, axis=1), [x])


def _check_log(rng):
    shape = (rng.integers(1, 3), rng.integers(2, 6))
    x = Tensor(rng.uniform(0.5, 2.0, size=shape), requires_grad=True, dtype=F64)
    return _probe_fn(rng, ops.log, [x])


def _check_exp_sigmoid(rng):
    x = _t(rng, (rng.integers(1, 3), rng.integers(2, 6)))
    return _probe_fn(rng, lambda x: ops.sigmoid(ops.exp(ops.mul(x, 0.5))), [x])


def _check_concat(rng):
    sp = _spatial(rng)
    a = _t(rng, (1, rng.integers(1, 4), *sp))
    b = _t(rng, (1, rng.integers(1, 4), *sp))
    return _probe_fn(rng, lambda a, b: ops.concat([a, b], axis=1), [a, b])


def _check_add_mul(rng):
    shape = (rng.integers(1, 3), rng.integers(2, 5))
    a, b = _t(rng, shape), _t(rng, shape)
    return _probe_fn(rng, lambda a, b: ops.mul(ops.add(a, b), b), [a, b])


def _check_div(rng):
    shape = (rng.integers(1, 3), rng.integers(2, 5))
    a, b = _t(rng, shape), _t(rng, shape)
    return _probe_fn(rng, lambda a, b: ops.div(a, ops.add(ops.mul(b, b), 1.0)), [a, b])


def _check_channel_gather(rng):
    c = int(rng.integers(3, 8))
    x = _t(rng, (1, c, *_spatial(rng)))
    idx = rng.permutation(c)
    return _probe_fn(rng, lambda x: ops.channel_gather(x, idx, axis=1), [x])


def _check_mean_down(rng):
    sp = tuple(2 * int(rng.integers(1, 3)) for _ in range(3))
    x = _t(rng, (1, rng.integers(1, 4), *sp))
    return _probe_fn(rng, ops.mean_downsample, [x])


def _check_nearest_down(rng):
    sp = tuple(2 * int(rng.integers(1, 3)) for _ in range(3))
    x = _t(rng, (1, rng.integers(1, 4), *sp))
    return _probe_fn(rng, ops.nearest_downsample, [x])


def _check_narrow_sum(rng):
    c = int(rng.integers(4, 8))
    x = _t(rng, (1, c, 2, 2, 2))
    start = int(rng.integers(0, c - 2))
    return _probe_fn(
        rng,
        lambda x: ops.sum_over(ops.narrow(x, 1, start, 2), axes=(0, 2), keepdim=False),
        [x],
    )


def _check_cssa(rng, soft_gate: bool):
    # the sort is constant only away from score ties; redraw until the
    # smallest score gap dwarfs anything a 1e-4 probe step can move
    m = Modality.T1
    for _ in range(100):
        c1 = int(rng.choice([4, 8]))
        store = ParameterStore(seed=int(rng.integers(1 << 31)), dtype=F64)
        register_cssa_params(store, c1)
        x = _t(rng, (1, c1, *_spatial(rng, 2, 3)))
        scores = np.sort(channel_scores(x, store, m).numpy()[0])
        if np.min(np.diff(scores)) > 0.02:
            break
    else:
        raise AssertionError("could not find tie-free CSSA scores")
    params = [store[n] for n in store.names()]

    def apply(*_ts):
        y, _plan = cssa_forward(x, store, m, soft_gate=soft_gate)
        return y

    out = apply()
    c = ops.constant(rng.standard_normal(out.shape), dtype=F64)
    return lambda *ts: ops.sum_all(ops.mul(apply(*ts), c)), [x, *params]


def _check_dice_ce(rng):
    k = int(rng.integers(2, 5))
    sp = _spatial(rng)
    logits = _t(rng, (1, k, *sp))
    labels = rng.integers(0, k, size=sp)
    onehot = one_hot_labels(labels, k, dtype=np.float64)
    return lambda logits: dice_ce_loss(logits, onehot, eps=1e-5), [logits]


def _features_for_kd(rng, mods, c, sp) -> dict[Modality, DecoupledFeatures]:
    feats = {}
    for m in mods:
        self_pre = _t(rng, (1, c, *sp))
        mutual_pre = {t: _t(rng, (1, c, *sp)) for t in mutual_targets(m)}
        feats[m] = DecoupledFeatures(
            modality=m,
            channels=c,
            self_pre=self_pre,
            mutual_pre=mutual_pre,
            stacked_pre=self_pre,  # stand-in; kd only touches the slices
        )
    return feats


def _check_kd(rng, detach_teacher: bool):
    mods = (Modality.T1, Modality.T2)
    c = int(rng.integers(2, 4))
    feats = _features_for_kd(rng, mods, c, _spatial(rng, 2, 3))
    if detach_teacher:
        # teachers held constant: check student-side gradients only
        inputs = [feats[n].mutual_pre[m] for m, n in ((mods[0], mods[1]), (mods[1], mods[0]))]
    else:
        inputs = []
        for m in mods:
            inputs.append(feats[m].self_pre)
            inputs.extend(feats[m].mutual_pre.values())

    def fn(*_inputs):
        return kd_loss(feats, temperature=1.0, detach_teacher=detach_teacher)

    return fn, inputs


def suite_entries() -> list[tuple[str, Callable]]:
    return [
        ("conv3d_stride1", lambda rng: _check_conv3d(rng, 1)),
        ("conv3d_stride2", lambda rng: _check_conv3d(rng, 2)),
        ("conv3d_1cubed", _check_conv3d_k1),
        ("transposed_conv3d", _check_transposed),
        ("instance_norm", _check_instance_norm),
        ("leaky_rectifier", _check_leaky),
        ("global_average_pool", _check_gap),
        ("linear", _check_linear),
        ("softmax", _check_softmax),
        ("log_softmax", _check_log_softmax),
        ("log", _check_log),
        ("exp_sigmoid", _check_exp_sigmoid),
        ("concat", _check_concat),
        ("add_mul", _check_add_mul),
        ("div", _check_div),
        ("channel_gather", _check_channel_gather),
        ("mean_downsample", _check_mean_down),
        ("nearest_downsample", _check_nearest_down),
        ("narrow_sum_over", _check_narrow_sum),
        ("cssa_forward_hard", lambda rng: _check_cssa(rng, False)),
        ("cssa_forward_softgate", lambda rng: _check_cssa(rng, True)),
        ("dice_ce_loss", _check_dice_ce),
        ("kd_loss_detached", lambda rng: _check_kd(rng, True)),
        ("kd_loss_full", lambda rng: _check_kd(rng, False)),
    ]


def run_gradient_suite(
    seeds: int = 20, tolerance: float = 1e-4, base_seed: int = 1234
) -> list[GradCheckReport]:
    """One report per op: the worst relative error across all seeded draws."""
    reports = []
    for name, builder in suite_entries():
        worst = 0.0
        for i in range(seeds):
            rng = np.random.default_rng(base_seed + 1000 * i)
            fn, inputs = builder(rng)
            rep = grad_check(fn, inputs, tolerance=tolerance, name=name)
            worst = max(worst, rep.max_rel_error)
        reports.append(GradCheckReport(op_name=name, max_rel_error=worst, tolerance=tolerance))
    return reports
