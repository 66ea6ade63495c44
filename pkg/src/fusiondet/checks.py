"""Named finite-difference audits of every differentiable component.

Each check builds a small randomized instance, computes the analytic
gradient, and probes coordinates with central differences via
:mod:`fusiondet.nn.gradcheck`. Layers, fusion blocks, and losses are probed
exhaustively; the assembled detector is spot-checked on a sampled subset of
its parameters (with the box-quality factor frozen, since the ce term
deliberately treats it as a constant).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .fusion import FUSION_MODES, AttentionGate, FusionBlock, IlFusion, LiFusion
from .geometry import PixelCoords, bilinear_sample, bilinear_sample_backward
from .losses import BoxCodecConfig, bin_reg_loss, ce_loss, focal_loss, mc_loss
from .nn import (
    ParamStore,
    check_packed,
    conv3x3,
    conv3x3_backward,
    linear,
    linear_backward,
    sigmoid_act,
    sigmoid_backward,
    tanh_act,
    tanh_backward,
    upsample_nearest,
    upsample_nearest_backward,
)

LAYER_TOL = 1e-4
MODEL_TOL = 1e-3


@dataclass
class CheckResult:
    name: str
    max_rel_err: float
    tolerance: float
    n_seeds: int

    @property
    def passed(self) -> bool:
        return self.max_rel_err <= self.tolerance


def _coords(rng, n, size):
    h, w = size
    uv = np.stack(
        [rng.uniform(0.3, w - 1.3, size=n), rng.uniform(0.3, h - 1.3, size=n)], axis=1
    )
    valid = np.ones(n, dtype=bool)
    valid[0] = False
    uv[0] = 0.0
    return PixelCoords(uv, valid, size)


# -- layers ------------------------------------------------------------------------


def _check_linear(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(5, 4))
    w = rng.normal(size=(4, 3))
    b = rng.normal(size=3)
    proj = rng.normal(size=(5, 3))

    def f(arrs):
        y, tape = linear(*arrs)
        gx, gw, gb = linear_backward(tape, proj)
        return float((y * proj).sum()), [gx, gw, gb]

    return check_packed(f, [x, w, b]).max_rel_err


def _conv_check(stride):
    def run(seed):
        rng = np.random.default_rng(seed)
        x = rng.normal(size=(6, 7, 2))
        k = rng.normal(size=(3, 3, 2, 3))
        b = rng.normal(size=3)
        oh, ow = -(-6 // stride), -(-7 // stride)
        proj = rng.normal(size=(oh, ow, 3))

        def f(arrs):
            y, tape = conv3x3(arrs[0], arrs[1], arrs[2], stride=stride)
            gx, gk, gb = conv3x3_backward(tape, proj)
            return float((y * proj).sum()), [gx, gk, gb]

        return check_packed(f, [x, k, b]).max_rel_err

    return run


def _activation_check(act, back):
    def run(seed):
        rng = np.random.default_rng(seed)
        x = rng.normal(size=(4, 5))
        proj = rng.normal(size=(4, 5))

        def f(arrs):
            y, tape = act(arrs[0])
            return float((y * proj).sum()), [back(tape, proj)]

        return check_packed(f, [x]).max_rel_err

    return run


def _check_upsample(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(3, 4, 2))
    proj = rng.normal(size=(5, 7, 2))  # odd target exercises edge cropping

    def f(arrs):
        y, tape = upsample_nearest(arrs[0], 2, out_hw=(5, 7))
        return float((y * proj).sum()), [upsample_nearest_backward(tape, proj)]

    return check_packed(f, [x]).max_rel_err


def _check_bilinear(seed):
    rng = np.random.default_rng(seed)
    img = rng.normal(size=(5, 6, 3))
    coords = _coords(rng, 8, (5, 6))
    proj = rng.normal(size=(8, 3))

    def f(arrs):
        y, tape = bilinear_sample(arrs[0], coords)
        return float((y * proj).sum()), [bilinear_sample_backward(tape, proj)]

    return check_packed(f, [img]).max_rel_err


# -- fusion ------------------------------------------------------------------------


def _with_store_params(store, names, arrs, offset):
    for n, v in zip(names, arrs[offset:]):
        store.params[n][...] = v
    store.zero_grads()


def _check_gate(seed):
    rng = np.random.default_rng(seed)
    store = ParamStore()
    gate = AttentionGate(store, "g", 3, 2, 4, np.random.default_rng(seed))
    names = store.names()
    fa = rng.normal(size=(6, 3))
    fb = rng.normal(size=(6, 2))
    proj = rng.normal(size=(6, 1))

    def f(arrs):
        _with_store_params(store, names, arrs, 2)
        w, tape = gate.forward(arrs[0], arrs[1])
        gfa, gfb = gate.backward(tape, proj)
        return float((w * proj).sum()), [gfa, gfb] + [store.grads[n].copy() for n in names]

    point = [fa, fb] + [store.params[n].copy() for n in names]
    return check_packed(f, point).max_rel_err


def _check_li(seed):
    rng = np.random.default_rng(seed)
    store = ParamStore()
    li = LiFusion(store, "li", 3, 2, np.random.default_rng(seed))
    names = store.names()
    f_p = rng.normal(size=(6, 3))
    f_ipt = rng.normal(size=(6, 2))
    proj = rng.normal(size=(6, 3))

    def f(arrs):
        _with_store_params(store, names, arrs, 2)
        y, tape = li.forward(arrs[0], arrs[1])
        gp, gi = li.backward(tape, proj)
        return float((y * proj).sum()), [gp, gi] + [store.grads[n].copy() for n in names]

    point = [f_p, f_ipt] + [store.params[n].copy() for n in names]
    return check_packed(f, point).max_rel_err


def _check_il(seed):
    rng = np.random.default_rng(seed)
    store = ParamStore()
    il = IlFusion(store, "il", 3, 2, np.random.default_rng(seed))
    names = store.names()
    f_p = rng.normal(size=(6, 3))
    f_i = rng.normal(size=(4, 5, 2))
    coords = _coords(rng, 6, (4, 5))
    proj = rng.normal(size=(4, 5, 2))

    def f(arrs):
        _with_store_params(store, names, arrs, 2)
        y, tape = il.forward(arrs[0], arrs[1], coords)
        gp, gi = il.backward(tape, proj)
        return float((y * proj).sum()), [gp, gi] + [store.grads[n].copy() for n in names]

    point = [f_p, f_i] + [store.params[n].copy() for n in names]
    return check_packed(f, point).max_rel_err


def _block_check(mode):
    def run(seed):
        rng = np.random.default_rng(seed)
        store = ParamStore()
        blk = FusionBlock(store, "blk", 3, 2, mode, np.random.default_rng(seed))
        names = store.names()
        f_p = rng.normal(size=(6, 3))
        f_i = rng.normal(size=(4, 5, 2))
        coords = _coords(rng, 6, (4, 5))
        proj_p = rng.normal(size=(6, 3))
        proj_i = rng.normal(size=(4, 5, 2))

        def f(arrs):
            _with_store_params(store, names, arrs, 2)
            f_ep, f_ei, tape = blk.forward(arrs[0], arrs[1], coords)
            gp, gi = blk.backward(tape, proj_p, proj_i)
            value = float((f_ep * proj_p).sum() + (f_ei * proj_i).sum())
            return value, [gp, gi] + [store.grads[n].copy() for n in names]

        point = [f_p, f_i] + [store.params[n].copy() for n in names]
        return check_packed(f, point).max_rel_err

    return run


# -- losses ------------------------------------------------------------------------


def _check_focal(seed):
    rng = np.random.default_rng(seed)
    p = rng.uniform(0.05, 0.95, size=12)
    mask = rng.random(12) < 0.4

    def f(arrs):
        v, g = focal_loss(arrs[0], mask)
        return v, [g]

    return check_packed(f, [p]).max_rel_err


def _check_mc(seed):
    rng = np.random.default_rng(seed)
    # keep both confidences well above the activity threshold so the
    # indicator inside the loss cannot flip under the probe
    c_p = rng.uniform(0.3, 0.9, size=10)
    c_i = rng.uniform(0.3, 0.9, size=10)
    valid = np.ones(10, dtype=bool)
    valid[:2] = False

    def f(arrs):
        v, gp, gi = mc_loss(arrs[0], arrs[1], valid)
        return v, [gp, gi]

    return check_packed(f, [c_p, c_i]).max_rel_err


def _check_bin_reg(seed):
    rng = np.random.default_rng(seed)
    codec = BoxCodecConfig()
    n = 5
    k = codec.bins_per_side
    bins_x = rng.integers(-k, k + 1, size=n)
    bins_z = rng.integers(-k, k + 1, size=n)
    bins_yaw = rng.integers(0, codec.n_bins_yaw, size=n)
    res_t = rng.uniform(-0.4, 0.4, size=(n, 7))
    head = rng.normal(size=(n, codec.head_width))
    # keep every residual difference inside the quadratic region of the
    # smooth-l1 so the probe never crosses its transition point
    head[:, codec.logits_width :] = res_t + rng.uniform(-0.8, 0.8, size=(n, 7))

    def f(arrs):
        v, g = bin_reg_loss(arrs[0], bins_x, bins_z, bins_yaw, res_t, codec)
        return v, [g]

    return check_packed(f, [head]).max_rel_err


def _check_ce(seed):
    rng = np.random.default_rng(seed)
    conf = rng.uniform(0.1, 0.9, size=8)
    iou = rng.uniform(0.2, 1.0, size=8)

    def f(arrs):
        v, g = ce_loss(arrs[0], iou)
        return v, [g]

    return check_packed(f, [conf]).max_rel_err


# -- assembled model -----------------------------------------------------------------


def _check_model(seed, n_per_array=2):
    from .synth import SceneConfig, synth_scene
    from .toy.model import ToyModel, ToyModelConfig, build_frame_cache

    cfg = ToyModelConfig(init_seed=seed)
    model = ToyModel(cfg)
    cache = build_frame_cache(synth_scene(SceneConfig(), seed), cfg, frame_seed=seed)
    iou = model.forward(cache).iou.copy()
    model.store.zero_grads()
    model.backward(model.forward(cache, frozen_iou=iou), cache)
    grads = {n: model.store.grads[n].copy() for n in model.store.names()}

    rng = np.random.default_rng(seed)
    eps = 1e-5
    worst = 0.0
    for name in model.store.names():
        flat = model.store.params[name].ravel()
        for j in rng.choice(flat.size, size=min(n_per_array, flat.size), replace=False):
            orig = flat[j]
            flat[j] = orig + eps
            fp = model.forward(cache, frozen_iou=iou).total
            flat[j] = orig - eps
            fm = model.forward(cache, frozen_iou=iou).total
            flat[j] = orig
            fd = (fp - fm) / (2.0 * eps)
            an = grads[name].ravel()[j]
            scale = max(abs(an), abs(fd))
            worst = max(worst, abs(an - fd) / scale if scale > 1e-6 else abs(an - fd))
    return worst


CHECKS = [
    ("linear", _check_linear, LAYER_TOL),
    ("conv3x3/s1", _conv_check(1), LAYER_TOL),
    ("conv3x3/s2", _conv_check(2), LAYER_TOL),
    ("tanh", _activation_check(tanh_act, tanh_backward), LAYER_TOL),
    ("sigmoid", _activation_check(sigmoid_act, sigmoid_backward), LAYER_TOL),
    ("upsample_nearest", _check_upsample, LAYER_TOL),
    ("bilinear_sample", _check_bilinear, LAYER_TOL),
    ("attention_gate", _check_gate, LAYER_TOL),
    ("li_fusion", _check_li, LAYER_TOL),
    ("il_fusion", _check_il, LAYER_TOL),
    *[(f"block/{m}", _block_check(m), LAYER_TOL) for m in FUSION_MODES],
    ("focal_loss", _check_focal, LAYER_TOL),
    ("mc_loss", _check_mc, LAYER_TOL),
    ("bin_reg_loss", _check_bin_reg, LAYER_TOL),
    ("ce_loss", _check_ce, LAYER_TOL),
]


def run_gradient_checks(n_seeds: int = 10, include_model: bool = True) -> list:
    """Run every named check over ``n_seeds`` seeds; returns CheckResults."""
    if n_seeds < 1:
        raise ValueError(f"n_seeds must be >= 1, got {n_seeds}")
    results = []
    for name, fn, tol in CHECKS:
        worst = max(fn(seed) for seed in range(n_seeds))
        results.append(CheckResult(name, worst, tol, n_seeds))
    if include_model:
        worst = max(_check_model(seed) for seed in range(n_seeds))
        results.append(CheckResult("model/spot", worst, MODEL_TOL, n_seeds))
    return results


def all_passed(results) -> bool:
    return all(r.passed for r in results)


def format_check_results(results) -> str:
    width = max(len(r.name) for r in results)
    lines = []
    for r in results:
        status = "pass" if r.passed else "FAIL"
        lines.append(
            f"{r.name.ljust(width)}  max_rel_err={r.max_rel_err:.3e}  "
            f"tol={r.tolerance:.0e}  seeds={r.n_seeds}  {status}"
        )
    return "\n".join(lines)
