"""End-to-end checks for the miniature two-stream detector."""

import numpy as np
import pytest

from fusiondet.synth import SceneConfig, synth_scene
from fusiondet.toy import (
    MODEL_MODES,
    ToyModel,
    ToyModelConfig,
    build_frame_cache,
)


@pytest.fixture(scope="module")
def sample():
    return synth_scene(SceneConfig(), 7)


def make(sample, **kw):
    cfg = ToyModelConfig(**kw)
    model = ToyModel(cfg)
    cache = build_frame_cache(sample, cfg, frame_seed=0)
    return cfg, model, cache


# -- config and cache validation ----------------------------------------------


def test_config_rejects_unknown_mode():
    with pytest.raises(ValueError, match="unknown fusion mode"):
        ToyModelConfig(fusion_mode="telepathy").validate()


def test_config_rejects_bad_widths():
    with pytest.raises(ValueError, match=">= 1"):
        ToyModelConfig(point_width=0).validate()
    with pytest.raises(ValueError, match="ball_radius"):
        ToyModelConfig(ball_radius=0.0).validate()


def test_cache_requires_enough_points(sample):
    cfg = ToyModelConfig(n_centers=10_000)
    with pytest.raises(ValueError, match="fewer than n_centers"):
        build_frame_cache(sample, cfg, frame_seed=0)


def test_cache_targets_are_consistent(sample):
    cfg, model, cache = make(sample)
    n = len(cache.pf)
    assert cache.point_mask.shape == (n,)
    assert set(cache.fg_idx) == set(np.flatnonzero(cache.point_mask))
    # candidates are foreground points, capped, unique
    assert len(cache.ce_idx) <= cfg.ce_cap
    assert len(np.unique(cache.ce_idx)) == len(cache.ce_idx)
    assert np.all(cache.point_mask[cache.ce_idx])
    assert len(cache.ce_gt) == len(cache.ce_idx)
    # interpolation weights are a convex combination over real centers
    assert cache.nbr.shape == (n, 3)
    assert np.allclose(cache.nbr_w.sum(axis=1), 1.0)
    assert np.all(cache.nbr_w >= 0)


# -- construction ---------------------------------------------------------------


def test_build_is_deterministic(sample):
    a = ToyModel(ToyModelConfig())
    b = ToyModel(ToyModelConfig())
    assert a.store.names() == b.store.names()
    for name in a.store.names():
        assert np.array_equal(a.store.params[name], b.store.params[name])


def test_init_seed_changes_values_not_names():
    a = ToyModel(ToyModelConfig(init_seed=0))
    b = ToyModel(ToyModelConfig(init_seed=1))
    assert a.store.names() == b.store.names()
    assert any(
        not np.array_equal(a.store.params[n], b.store.params[n]) for n in a.store.names()
    )


def test_mode_none_has_no_cross_modal_parameters():
    model = ToyModel(ToyModelConfig(fusion_mode="none"))
    assert not any("fuse" in n for n in model.store.names())
    prefixes = {n.split(".")[0] for n in model.store.names()}
    assert prefixes == {"pt", "img"}


def test_disabling_gates_removes_their_parameters():
    gated = ToyModel(ToyModelConfig(attention=True))
    plain = ToyModel(ToyModelConfig(attention=False))
    gate_names = [n for n in gated.store.names() if ".i2p." in n or ".p2i." in n]
    assert gate_names
    assert not any(".i2p." in n or ".p2i." in n for n in plain.store.names())
    assert plain.n_params() < gated.n_params()


def test_parameter_count_grows_with_fusion():
    counts = {
        mode: ToyModel(ToyModelConfig(fusion_mode=mode)).n_params()
        for mode in MODEL_MODES
    }
    assert counts["none"] < counts["li_only"] < counts["cascade"]
    assert counts["cascade"] == counts["parallel"] == counts["reversed"]


# -- forward --------------------------------------------------------------------


def test_forward_shapes_and_ranges(sample):
    cfg, model, cache = make(sample)
    n = len(cache.pf)
    h2, w2 = cache.pix_mask_half.shape
    state = model.forward(cache)
    assert state.c_p.shape == (n,)
    assert state.c_i.shape == (h2, w2)
    assert state.c_a.shape == (n,)
    assert state.box_out.shape == (n, cfg.codec.head_width)
    assert state.iou.shape == (len(cache.ce_idx),)
    assert np.all((state.c_p > 0) & (state.c_p < 1))
    assert np.all((state.c_i > 0) & (state.c_i < 1))
    assert np.all((state.iou >= 0) & (state.iou <= 1))
    assert np.isfinite(state.total)
    for part in (state.parts.cls, state.parts.reg, state.parts.ims, state.parts.mc, state.parts.ce):
        assert np.isfinite(part) and part >= 0


def test_forward_is_deterministic(sample):
    _, model, cache = make(sample)
    a = model.forward(cache)
    b = model.forward(cache)
    assert a.total == b.total
    assert np.array_equal(a.c_p, b.c_p)
    assert np.array_equal(a.box_out, b.box_out)


def test_fused_confidence_is_the_average(sample):
    _, model, cache = make(sample)
    state = model.forward(cache)
    # c_a recomputed from its two ingredients
    from fusiondet.geometry import bilinear_sample

    ci_pt, _ = bilinear_sample(state.c_i[:, :, None], cache.coords_half)
    assert np.allclose(state.c_a, 0.5 * (state.c_p + ci_pt[:, 0]))


def test_frozen_iou_reproduces_the_reported_loss(sample):
    _, model, cache = make(sample)
    state = model.forward(cache)
    again = model.forward(cache, frozen_iou=state.iou)
    assert again.total == pytest.approx(state.total, rel=0, abs=1e-12)


def test_mc_off_zeroes_that_part(sample):
    _, model, cache = make(sample, mc_on=False)
    state = model.forward(cache)
    assert state.parts.mc == 0.0


@pytest.mark.parametrize("mode", MODEL_MODES)
def test_every_mode_runs_forward_and_backward(sample, mode):
    _, model, cache = make(sample, fusion_mode=mode)
    state = model.forward(cache)
    model.backward(state, cache)
    zero = [n for n in model.store.names() if not np.any(model.store.grads[n])]
    assert zero == []


# -- decode ----------------------------------------------------------------------


def test_decode_recovers_encoded_boxes(sample):
    from fusiondet.losses import encode_reg_targets

    cfg, model, cache = make(sample)
    k = cfg.codec.bins_per_side
    nxz = cfg.codec.n_bins_xz
    head = np.zeros((len(cache.pf), cfg.codec.head_width))
    for pi, box in zip(cache.ce_idx, cache.ce_gt):
        t = encode_reg_targets(cache.xyz[pi], box, cfg.codec)
        row = head[pi]
        row[t.bin_x + k] = 10.0
        row[nxz + t.bin_z + k] = 10.0
        row[2 * nxz + t.bin_yaw] = 10.0
        row[cfg.codec.logits_width :] = t.res
    decoded = model.decode_boxes(head, cache, cache.ce_idx)
    for dec, gt in zip(decoded, cache.ce_gt):
        assert dec.x == pytest.approx(gt.x, abs=1e-9)
        assert dec.y == pytest.approx(gt.y, abs=1e-9)
        assert dec.z == pytest.approx(gt.z, abs=1e-9)
        assert (dec.l, dec.h, dec.w) == pytest.approx((gt.l, gt.h, gt.w), abs=1e-9)
        d = (dec.yaw - gt.yaw + np.pi) % (2 * np.pi) - np.pi
        assert abs(d) < 1e-9


def test_proposals_respect_the_threshold(sample):
    cfg, model, cache = make(sample, score_thresh=0.5)
    state = model.forward(cache)
    boxes, scores = model.proposals(state, cache)
    assert len(boxes) == len(scores)
    assert np.all(scores > 0.5)
    assert len(boxes) == int(np.sum(model.score_for_proposals(state) > 0.5))


def test_mode_none_scores_ignore_the_image(sample):
    _, model, cache = make(sample, fusion_mode="none", mc_on=False)
    state = model.forward(cache)
    assert model.score_for_proposals(state) is state.c_p


# -- gradients --------------------------------------------------------------------


def test_backward_scale_is_linear(sample):
    # tapes are single-use, so each backward needs its own forward
    _, model, cache = make(sample)
    model.backward(model.forward(cache), cache, scale=1.0)
    full = {n: model.store.grads[n].copy() for n in model.store.names()}
    model.store.zero_grads()
    model.backward(model.forward(cache), cache, scale=0.5)
    for n in model.store.names():
        assert np.allclose(model.store.grads[n], 0.5 * full[n], atol=1e-15)


def test_mode_none_image_stream_learns_only_from_its_own_loss(sample):
    """With no fusion and no consistency terms, zeroing the image-segmentation
    gradient must leave every image parameter untouched: the point losses have
    no path into the image stream."""
    _, model, cache = make(sample, fusion_mode="none", mc_on=False)
    state = model.forward(cache)
    state.up_grads["ims"] = np.zeros_like(state.up_grads["ims"])
    model.backward(state, cache)
    img = [n for n in model.store.names() if n.startswith("img.")]
    pt = [n for n in model.store.names() if n.startswith("pt.")]
    assert img and pt
    assert all(not np.any(model.store.grads[n]) for n in img)
    assert all(np.any(model.store.grads[n]) for n in pt)


def test_fused_mode_point_losses_do_reach_the_image_stream(sample):
    # contrast with the audit above: cascade fusion carries them across
    _, model, cache = make(sample, fusion_mode="cascade", mc_on=False)
    state = model.forward(cache)
    state.up_grads["ims"] = np.zeros_like(state.up_grads["ims"])
    state.up_grads["cipt"] = np.zeros_like(state.up_grads["cipt"])
    model.backward(state, cache)
    img = [n for n in model.store.names() if n.startswith("img.")]
    assert any(np.any(model.store.grads[n]) for n in img)


def fd_spot_check(model, cache, rng, n_per_array=2, eps=1e-5):
    state = model.forward(cache)
    iou = state.iou.copy()
    model.store.zero_grads()
    model.backward(model.forward(cache, frozen_iou=iou), cache)
    grads = {n: model.store.grads[n].copy() for n in model.store.names()}
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
            fd = (fp - fm) / (2 * eps)
            an = grads[name].ravel()[j]
            scale = max(abs(an), abs(fd), 1e-8)
            worst = max(worst, abs(an - fd) / scale)
    return worst


@pytest.mark.parametrize("mode", ["cascade", "none"])
def test_gradients_match_finite_differences(sample, mode):
    _, model, cache = make(sample, fusion_mode=mode)
    worst = fd_spot_check(model, cache, np.random.default_rng(11))
    assert worst < 1e-3, f"worst relative error {worst:.2e}"


def test_training_steps_reduce_the_loss(sample):
    # adam needs a few steps to settle its moment estimates before descending
    _, model, cache = make(sample)
    before = model.forward(cache).total
    for _ in range(12):
        state = model.forward(cache)
        model.backward(state, cache)
        model.store.adam_step(lr=0.002, weight_decay=0.001)
    assert model.forward(cache).total < before
