"""Gated fusion blocks: wiring, gradients, gate saturation, audits."""

import numpy as np
import pytest

from fusiondet.fusion import FUSION_MODES, AttentionGate, FusionBlock, IlFusion, LiFusion
from fusiondet.geometry import PixelCoords
from fusiondet.nn import ParamStore, check_packed, conv3x3, linear

D_P, D_I = 3, 2
SIZE = (5, 6)  # (h, w)


def make_coords(rng, n, n_invalid=1):
    h, w = SIZE
    uv = np.stack(
        [rng.uniform(0.2, w - 1.2, size=n), rng.uniform(0.2, h - 1.2, size=n)], axis=1
    )
    valid = np.ones(n, dtype=bool)
    valid[:n_invalid] = False
    uv[~valid] = 0.0
    return PixelCoords(uv, valid, SIZE)


def make_inputs(seed, n=6):
    rng = np.random.default_rng(seed)
    f_p = rng.normal(size=(n, D_P))
    f_i = rng.normal(size=(SIZE[0], SIZE[1], D_I))
    coords = make_coords(rng, n)
    return rng, f_p, f_i, coords


def build_block(mode, seed=0, attention=True):
    store = ParamStore()
    blk = FusionBlock(
        store, "blk", D_P, D_I, mode, np.random.default_rng(seed), attention=attention
    )
    return store, blk


# -- attention gate -----------------------------------------------------------


def test_gate_output_shape_and_range():
    store = ParamStore()
    rng = np.random.default_rng(3)
    gate = AttentionGate(store, "g", 4, 3, 2, rng)
    fa = rng.normal(size=(7, 4))
    fb = rng.normal(size=(7, 3))
    w, tape = gate.forward(fa, fb)
    assert w.shape == (7, 1)
    assert np.all(w > 0.0) and np.all(w < 1.0)
    tape.take()


def test_gate_row_mismatch_rejected():
    store = ParamStore()
    gate = AttentionGate(store, "g", 2, 2, 2, np.random.default_rng(0))
    with pytest.raises(ValueError, match="rows"):
        gate.forward(np.zeros((3, 2)), np.zeros((4, 2)))


def test_gate_matches_direct_formula():
    store = ParamStore()
    rng = np.random.default_rng(5)
    gate = AttentionGate(store, "g", 3, 2, 4, rng)
    fa = rng.normal(size=(5, 3))
    fb = rng.normal(size=(5, 2))
    w, tape = gate.forward(fa, fb)
    tape.take()
    z = np.tanh(fa @ gate.w2 + gate.b2 + fb @ gate.w3 + gate.b3) @ gate.w1 + gate.b1
    assert np.allclose(w, 1.0 / (1.0 + np.exp(-z)), atol=1e-12)


def test_gate_gradients():
    store = ParamStore()
    rng = np.random.default_rng(7)
    gate = AttentionGate(store, "g", 3, 2, 2, rng)
    fa0 = rng.normal(size=(4, 3))
    fb0 = rng.normal(size=(4, 2))
    r = rng.normal(size=(4, 1))
    names = store.names()

    def f_and_grad(arrs):
        fa, fb = arrs[0], arrs[1]
        for name, val in zip(names, arrs[2:]):
            store.params[name][...] = val
        store.zero_grads()
        w, tape = gate.forward(fa, fb)
        gfa, gfb = gate.backward(tape, r)
        grads = [gfa, gfb] + [store.grads[n].copy() for n in names]
        return float(np.sum(w * r)), grads

    arrays = [fa0, fb0] + [store.params[n].copy() for n in names]
    report = check_packed(f_and_grad, arrays)
    assert report.passed, report.max_rel_err


# -- point-side fusion --------------------------------------------------------


def test_li_fusion_shape():
    store = ParamStore()
    rng = np.random.default_rng(1)
    li = LiFusion(store, "li", D_P, D_I, rng)
    out, tape = li.forward(rng.normal(size=(9, D_P)), rng.normal(size=(9, D_I)))
    assert out.shape == (9, D_P)
    tape.take()


def test_li_fusion_width_mismatch():
    store = ParamStore()
    li = LiFusion(store, "li", D_P, D_I, np.random.default_rng(0))
    with pytest.raises(ValueError, match="widths"):
        li.forward(np.zeros((4, D_P + 1)), np.zeros((4, D_I)))


def test_li_gate_forced_shut_drops_image_features():
    # saturating the gate logit bias to -2000 gives w exactly 0, so the
    # output must equal the FC applied to [F_p | 0] bit for bit
    store = ParamStore()
    rng = np.random.default_rng(11)
    li = LiFusion(store, "li", D_P, D_I, rng)
    store.params["li.i2p.b1"][...] = -2000.0
    f_p = rng.normal(size=(6, D_P))
    f_ipt = rng.normal(size=(6, D_I))
    out, tape = li.forward(f_p, f_ipt)
    tape.take()
    cat = np.concatenate([f_p, np.zeros((6, D_I))], axis=1)
    expect, t = linear(cat, li.w_out, li.b_out)
    t.take()
    assert np.array_equal(out, expect)
    # and changing the image features does nothing
    out2, tape2 = li.forward(f_p, f_ipt + 5.0)
    tape2.take()
    assert np.array_equal(out, out2)


def test_li_gate_forced_open_matches_no_attention():
    store = ParamStore()
    rng = np.random.default_rng(13)
    li = LiFusion(store, "li", D_P, D_I, rng)
    store.params["li.i2p.b1"][...] = 2000.0
    f_p = rng.normal(size=(5, D_P))
    f_ipt = rng.normal(size=(5, D_I))
    out, tape = li.forward(f_p, f_ipt)
    tape.take()
    cat = np.concatenate([f_p, f_ipt], axis=1)
    expect, t = linear(cat, li.w_out, li.b_out)
    t.take()
    assert np.array_equal(out, expect)


def test_li_no_attention_registers_no_gate_params():
    store = ParamStore()
    LiFusion(store, "li", D_P, D_I, np.random.default_rng(0), attention=False)
    assert store.names() == ("li.out.w", "li.out.b")


# -- image-side fusion --------------------------------------------------------


def test_il_fusion_shape():
    store = ParamStore()
    rng, f_p, f_i, coords = make_inputs(2)
    il = IlFusion(store, "il", D_P, D_I, rng)
    out, tape = il.forward(f_p, f_i, coords)
    assert out.shape == f_i.shape
    tape.take()


def test_il_coord_count_mismatch():
    store = ParamStore()
    rng, f_p, f_i, coords = make_inputs(2)
    il = IlFusion(store, "il", D_P, D_I, rng)
    with pytest.raises(ValueError, match="coords"):
        il.forward(f_p[:-1], f_i, coords)


def test_il_gate_forced_shut_reduces_to_image_conv():
    # w = 0 scatters nothing; every pixel sees [F_i | 0] into the mix conv
    store = ParamStore()
    rng, f_p, f_i, coords = make_inputs(17)
    il = IlFusion(store, "il", D_P, D_I, rng)
    store.params["il.p2i.b1"][...] = -2000.0
    out, tape = il.forward(f_p, f_i, coords)
    tape.take()
    cat = np.concatenate([f_i, np.zeros(SIZE + (D_P,))], axis=2)
    expect, t = conv3x3(cat, il.k, il.b, stride=1)
    t.take()
    assert np.array_equal(out, expect)


def test_il_all_invalid_coords_keep_pure_image_information():
    store = ParamStore()
    rng, f_p, f_i, _ = make_inputs(19)
    coords = PixelCoords(np.zeros((len(f_p), 2)), np.zeros(len(f_p), dtype=bool), SIZE)
    il = IlFusion(store, "il", D_P, D_I, rng)
    out, tape = il.forward(f_p, f_i, coords)
    tape.take()
    cat = np.concatenate([f_i, np.zeros(SIZE + (D_P,))], axis=2)
    expect, t = conv3x3(cat, il.k, il.b, stride=1)
    t.take()
    assert np.allclose(out, expect, atol=1e-12)


# -- full blocks --------------------------------------------------------------


@pytest.mark.parametrize("mode", FUSION_MODES)
def test_block_shapes(mode):
    store, blk = build_block(mode)
    _, f_p, f_i, coords = make_inputs(4)
    f_ep, f_ei, tape = blk.forward(f_p, f_i, coords)
    assert f_ep.shape == f_p.shape
    assert f_ei.shape == f_i.shape
    g_ep, g_ei = blk.backward(tape, np.ones_like(f_ep), np.ones_like(f_ei))
    assert g_ep.shape == f_p.shape
    assert g_ei.shape == f_i.shape


def test_unknown_mode_rejected():
    with pytest.raises(ValueError, match="fusion mode"):
        build_block("sideways")


@pytest.mark.parametrize("mode", FUSION_MODES)
@pytest.mark.parametrize("attention", [True, False])
def test_block_gradients(mode, attention):
    store, blk = build_block(mode, seed=23, attention=attention)
    rng, f_p0, f_i0, coords = make_inputs(29, n=5)
    r_ep = rng.normal(size=f_p0.shape)
    r_ei = rng.normal(size=f_i0.shape)
    names = store.names()

    def f_and_grad(arrs):
        f_p, f_i = arrs[0], arrs[1]
        for name, val in zip(names, arrs[2:]):
            store.params[name][...] = val
        store.zero_grads()
        f_ep, f_ei, tape = blk.forward(f_p, f_i, coords)
        value = float(np.sum(f_ep * r_ep) + np.sum(f_ei * r_ei))
        gf_p, gf_i = blk.backward(tape, r_ep, r_ei)
        grads = [gf_p, gf_i] + [store.grads[n].copy() for n in names]
        return value, grads

    arrays = [f_p0, f_i0] + [store.params[n].copy() for n in names]
    report = check_packed(f_and_grad, arrays)
    assert report.passed, (mode, attention, report.max_rel_err)


def test_block_backward_touches_every_parameter():
    for mode in FUSION_MODES:
        store, blk = build_block(mode, seed=31)
        rng, f_p, f_i, coords = make_inputs(37)
        f_ep, f_ei, tape = blk.forward(f_p, f_i, coords)
        blk.backward(tape, rng.normal(size=f_ep.shape), rng.normal(size=f_ei.shape))
        store.adam_step()  # raises if any parameter was skipped


def test_cascade_point_side_reads_enhanced_map():
    # same parameters; the image output of cascade and parallel agree (both
    # enhance from the originals) but the point output must differ because
    # cascade samples the enhanced map
    _, casc = build_block("cascade", seed=41)
    _, para = build_block("parallel", seed=41)
    _, f_p, f_i, coords = make_inputs(43)
    ep_c, ei_c, t1 = casc.forward(f_p, f_i, coords)
    ep_p, ei_p, t2 = para.forward(f_p, f_i, coords)
    t1.take(), t2.take()
    assert np.array_equal(ei_c, ei_p)
    assert not np.allclose(ep_c, ep_p, atol=1e-8)


def test_reversed_image_side_reads_enhanced_points():
    _, casc = build_block("cascade", seed=41)
    _, rev = build_block("reversed", seed=41)
    _, f_p, f_i, coords = make_inputs(43)
    _, ei_c, t1 = casc.forward(f_p, f_i, coords)
    ep_r, ei_r, t2 = rev.forward(f_p, f_i, coords)
    t1.take(), t2.take()
    assert not np.allclose(ei_c, ei_r, atol=1e-8)
    # reversed's point side matches parallel's (both sample the original map)
    _, para = build_block("parallel", seed=41)
    ep_p, _, t3 = para.forward(f_p, f_i, coords)
    t3.take()
    assert np.array_equal(ep_r, ep_p)


def test_li_only_passes_image_through():
    _, blk = build_block("li_only", seed=47)
    _, f_p, f_i, coords = make_inputs(53)
    _, f_ei, tape = blk.forward(f_p, f_i, coords)
    tape.take()
    assert np.array_equal(f_ei, f_i)


def test_li_only_image_gradient_is_passthrough_plus_sampling():
    store, blk = build_block("li_only", seed=47)
    rng, f_p, f_i, coords = make_inputs(53)
    f_ep, f_ei, tape = blk.forward(f_p, f_i, coords)
    g_ei = rng.normal(size=f_ei.shape)
    _, gf_i = blk.backward(tape, np.zeros_like(f_ep), g_ei)
    # zero upstream on the point side: nothing flows through the sampler
    # except the gate input, which is part of the point branch
    assert gf_i.shape == f_i.shape
    # with the point branch silent the image gradient is the identity
    store2, blk2 = build_block("li_only", seed=47, attention=False)
    f_ep2, f_ei2, tape2 = blk2.forward(f_p, f_i, coords)
    _, gf_i2 = blk2.backward(tape2, np.zeros_like(f_ep2), g_ei)
    assert np.array_equal(gf_i2, g_ei)


def test_block_permutation_equivariance():
    _, blk = build_block("cascade", seed=59)
    rng, f_p, f_i, coords = make_inputs(61, n=8)
    perm = rng.permutation(len(f_p))
    f_ep, f_ei, t1 = blk.forward(f_p, f_i, coords)
    t1.take()
    coords_perm = PixelCoords(coords.uv[perm], coords.valid[perm], coords.size)
    f_ep2, f_ei2, t2 = blk.forward(f_p[perm], f_i, coords_perm)
    t2.take()
    assert np.allclose(f_ep2, f_ep[perm], atol=1e-10)
    assert np.allclose(f_ei2, f_ei, atol=1e-10)


def test_parameter_audit_by_mode():
    store, _ = build_block("cascade", seed=0, attention=True)
    names = store.names()
    assert len(names) == 16
    assert any(".i2p." in n for n in names) and any(".p2i." in n for n in names)

    store, _ = build_block("cascade", seed=0, attention=False)
    names = store.names()
    assert len(names) == 4
    assert not any(".i2p." in n or ".p2i." in n for n in names)

    store, _ = build_block("li_only", seed=0, attention=True)
    names = store.names()
    assert len(names) == 8
    assert not any(".il." in n for n in names)


def test_build_is_deterministic():
    s1, _ = build_block("cascade", seed=71)
    s2, _ = build_block("cascade", seed=71)
    assert s1.names() == s2.names()
    assert np.array_equal(s1.pack(), s2.pack())
