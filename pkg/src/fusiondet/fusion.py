"""Gated cross-modal feature fusion.

Three building blocks, all hand-differentiated:

* :class:`AttentionGate` scores each point in (0, 1) from two feature
  vectors: w = sigmoid(W1 . tanh(W2 . F_a + W3 . F_b)).
* :class:`LiFusion` enriches point features with gated, bilinearly sampled
  image features: F_ep = FC(concat(F_p, w * F_i_pt)).
* :class:`IlFusion` enriches the image map with gated point features
  scattered onto the grid and mixed back in with a 3x3 convolution.

:class:`FusionBlock` wires them into the four exchange topologies: the
image-first cascade (point side samples from the already-enhanced map),
the reversed cascade, the parallel form (both sides read the originals),
and the point-only form.

All parameters live in a shared :class:`~fusiondet.nn.ParamStore` under a
caller-chosen name prefix; ``backward`` accumulates parameter gradients
into the store and returns gradients for the block inputs.
"""

from __future__ import annotations

import numpy as np

from .geometry import (
    PixelCoords,
    bilinear_sample,
    bilinear_sample_backward,
    grid_scatter,
    grid_scatter_backward,
)
from .nn.layers import (
    LayerTape,
    conv3x3,
    conv3x3_backward,
    init_conv3x3,
    init_linear,
    linear,
    linear_backward,
    sigmoid_act,
    sigmoid_backward,
    tanh_act,
    tanh_backward,
)
from .nn.params import ParamStore

FUSION_MODES = ("cascade", "reversed", "parallel", "li_only")


class AttentionGate:
    """Learned per-point gate; the fusion direction is set purely by
    argument order (first argument drives W2, second drives W3)."""

    def __init__(self, store: ParamStore, prefix: str, d_a: int, d_b: int, d_hidden: int, rng):
        self.store = store
        self.prefix = prefix
        w2, b2 = init_linear(rng, d_a, d_hidden)
        w3, b3 = init_linear(rng, d_b, d_hidden)
        w1, b1 = init_linear(rng, d_hidden, 1)
        self.w2 = store.add(f"{prefix}.w2", w2)
        self.b2 = store.add(f"{prefix}.b2", b2)
        self.w3 = store.add(f"{prefix}.w3", w3)
        self.b3 = store.add(f"{prefix}.b3", b3)
        self.w1 = store.add(f"{prefix}.w1", w1)
        self.b1 = store.add(f"{prefix}.b1", b1)

    def forward(self, fa, fb):
        """Returns (w, tape) with w of shape (n, 1)."""
        if len(fa) != len(fb):
            raise ValueError(
                f"attention gate: {len(fa)} rows on one side, {len(fb)} on the other"
            )
        ya, t2 = linear(fa, self.w2, self.b2)
        yb, t3 = linear(fb, self.w3, self.b3)
        h, th = tanh_act(ya + yb)
        logit, t1 = linear(h, self.w1, self.b1)
        w, ts = sigmoid_act(logit)
        return w, LayerTape("attention_gate", t2=t2, t3=t3, th=th, t1=t1, ts=ts)

    def backward(self, tape, gw):
        c = tape.take()
        gl = sigmoid_backward(c["ts"], gw)
        gh, gw1, gb1 = linear_backward(c["t1"], gl)
        gz = tanh_backward(c["th"], gh)
        gfa, gw2, gb2 = linear_backward(c["t2"], gz)
        gfb, gw3, gb3 = linear_backward(c["t3"], gz)
        s = self.store
        s.accumulate(f"{self.prefix}.w1", gw1)
        s.accumulate(f"{self.prefix}.b1", gb1)
        s.accumulate(f"{self.prefix}.w2", gw2)
        s.accumulate(f"{self.prefix}.b2", gb2)
        s.accumulate(f"{self.prefix}.w3", gw3)
        s.accumulate(f"{self.prefix}.b3", gb3)
        return gfa, gfb


class LiFusion:
    """Image-to-point fusion: F_ep = FC(concat(F_p, w * F_i_pt)).

    ``attention=False`` removes the gate entirely (w = 1): no gate
    parameters exist and the sampled features pass straight into the
    concatenation.
    """

    def __init__(
        self,
        store: ParamStore,
        prefix: str,
        d_p: int,
        d_i: int,
        rng,
        d_hidden: int | None = None,
        attention: bool = True,
    ):
        self.store = store
        self.prefix = prefix
        self.d_p = d_p
        self.d_i = d_i
        self.gate = None
        if attention:
            dh = d_hidden or max(min(d_p, d_i), 2)
            self.gate = AttentionGate(store, f"{prefix}.i2p", d_p, d_i, dh, rng)
        w, b = init_linear(rng, d_p + d_i, d_p)
        self.w_out = store.add(f"{prefix}.out.w", w)
        self.b_out = store.add(f"{prefix}.out.b", b)

    def forward(self, f_p, f_ipt):
        f_p = np.asarray(f_p, dtype=np.float64)
        f_ipt = np.asarray(f_ipt, dtype=np.float64)
        if f_p.shape[1] != self.d_p or f_ipt.shape[1] != self.d_i:
            raise ValueError(
                f"li_fusion {self.prefix}: expected widths ({self.d_p}, {self.d_i}), "
                f"got ({f_p.shape[1]}, {f_ipt.shape[1]})"
            )
        if self.gate is not None:
            w, gate_tape = self.gate.forward(f_p, f_ipt)
            gated = w * f_ipt
        else:
            w, gate_tape = None, None
            gated = f_ipt
        cat = np.concatenate([f_p, gated], axis=1)
        out, t_out = linear(cat, self.w_out, self.b_out)
        return out, LayerTape(
            "li_fusion", gate_tape=gate_tape, w=w, f_ipt=f_ipt, t_out=t_out
        )

    def backward(self, tape, g_out):
        c = tape.take()
        gcat, gw_out, gb_out = linear_backward(c["t_out"], g_out)
        self.store.accumulate(f"{self.prefix}.out.w", gw_out)
        self.store.accumulate(f"{self.prefix}.out.b", gb_out)
        gf_p = gcat[:, : self.d_p]
        g_gated = gcat[:, self.d_p :]
        if c["gate_tape"] is None:
            return gf_p, g_gated
        gw = np.sum(g_gated * c["f_ipt"], axis=1, keepdims=True)
        gf_ipt = g_gated * c["w"]
        gf_p2, gf_ipt2 = self.gate.backward(c["gate_tape"], gw)
        return gf_p + gf_p2, gf_ipt + gf_ipt2


class IlFusion:
    """Point-to-image fusion.

    Point features are gated by w = sigmoid(W1 tanh(W2 F_i_pt + W3 F_p))
    (note the swapped argument order relative to LiFusion), scattered onto
    the image grid at the projection coordinates, concatenated channelwise
    with the image map, and mixed by a same-size 3x3 convolution back to
    the image width. Pixels no point lands near see zeros in the scattered
    channels, so they keep pure image information going into the mix.
    """

    def __init__(
        self,
        store: ParamStore,
        prefix: str,
        d_p: int,
        d_i: int,
        rng,
        d_hidden: int | None = None,
        attention: bool = True,
    ):
        self.store = store
        self.prefix = prefix
        self.d_p = d_p
        self.d_i = d_i
        self.gate = None
        if attention:
            dh = d_hidden or max(min(d_p, d_i), 2)
            self.gate = AttentionGate(store, f"{prefix}.p2i", d_i, d_p, dh, rng)
        k, b = init_conv3x3(rng, d_i + d_p, d_i)
        self.k = store.add(f"{prefix}.mix.k", k)
        self.b = store.add(f"{prefix}.mix.b", b)

    def forward(self, f_p, f_i, coords: PixelCoords):
        f_p = np.asarray(f_p, dtype=np.float64)
        f_i = np.asarray(f_i, dtype=np.float64)
        if len(f_p) != len(coords):
            raise ValueError(
                f"il_fusion {self.prefix}: {len(f_p)} point features for {len(coords)} coords"
            )
        if f_p.shape[1] != self.d_p or f_i.shape[2] != self.d_i:
            raise ValueError(
                f"il_fusion {self.prefix}: expected widths ({self.d_p}, {self.d_i}), "
                f"got ({f_p.shape[1]}, {f_i.shape[2]})"
            )
        if self.gate is not None:
            f_ipt, t_sample = bilinear_sample(f_i, coords)
            w, gate_tape = self.gate.forward(f_ipt, f_p)
            f_ap = w * f_p
        else:
            w, gate_tape, t_sample = None, None, None
            f_ap = f_p
        grid, t_scatter = grid_scatter(f_ap, coords, coords.size)
        cat = np.concatenate([f_i, grid], axis=2)
        out, t_conv = conv3x3(cat, self.k, self.b, stride=1)
        return out, LayerTape(
            "il_fusion",
            gate_tape=gate_tape,
            w=w,
            f_p=f_p,
            t_sample=t_sample,
            t_scatter=t_scatter,
            t_conv=t_conv,
        )

    def backward(self, tape, g_out):
        c = tape.take()
        gcat, gk, gb = conv3x3_backward(c["t_conv"], g_out)
        self.store.accumulate(f"{self.prefix}.mix.k", gk)
        self.store.accumulate(f"{self.prefix}.mix.b", gb)
        gf_i = gcat[:, :, : self.d_i]
        g_grid = gcat[:, :, self.d_i :]
        g_ap = grid_scatter_backward(c["t_scatter"], g_grid)
        if c["gate_tape"] is None:
            return g_ap, gf_i
        gw = np.sum(g_ap * c["f_p"], axis=1, keepdims=True)
        gf_p = g_ap * c["w"]
        gf_ipt, gf_p2 = self.gate.backward(c["gate_tape"], gw)
        gf_i = gf_i + bilinear_sample_backward(c["t_sample"], gf_ipt)
        return gf_p + gf_p2, gf_i


class FusionBlock:
    """One cross-modal exchange at one scale.

    mode:
        ``cascade``  -- enhance the image first, then the point side samples
                        from the enhanced map (the default topology).
        ``reversed`` -- enhance points first from the original map, then the
                        image side consumes the enhanced point features.
        ``parallel`` -- both sides read the original features.
        ``li_only``  -- point side only; the image map passes through.

    ``forward`` returns (f_ep, f_ei, tape); ``backward`` takes upstream
    gradients for both outputs and returns (gf_p, gf_i).
    """

    def __init__(
        self,
        store: ParamStore,
        prefix: str,
        d_p: int,
        d_i: int,
        mode: str,
        rng,
        d_hidden: int | None = None,
        attention: bool = True,
    ):
        if mode not in FUSION_MODES:
            raise ValueError(f"unknown fusion mode {mode!r}; pick one of {FUSION_MODES}")
        self.mode = mode
        self.d_p = d_p
        self.d_i = d_i
        self.li = LiFusion(store, f"{prefix}.li", d_p, d_i, rng, d_hidden, attention)
        self.il = None
        if mode != "li_only":
            self.il = IlFusion(store, f"{prefix}.il", d_p, d_i, rng, d_hidden, attention)

    def forward(self, f_p, f_i, coords: PixelCoords):
        if self.mode == "cascade":
            f_ei, t_il = self.il.forward(f_p, f_i, coords)
            f_ipt, t_s = bilinear_sample(f_ei, coords)
            f_ep, t_li = self.li.forward(f_p, f_ipt)
            tape = LayerTape("fusion.cascade", t_il=t_il, t_s=t_s, t_li=t_li)
        elif self.mode == "reversed":
            f_ipt, t_s = bilinear_sample(f_i, coords)
            f_ep, t_li = self.li.forward(f_p, f_ipt)
            f_ei, t_il = self.il.forward(f_ep, f_i, coords)
            tape = LayerTape("fusion.reversed", t_il=t_il, t_s=t_s, t_li=t_li)
        elif self.mode == "parallel":
            f_ipt, t_s = bilinear_sample(f_i, coords)
            f_ep, t_li = self.li.forward(f_p, f_ipt)
            f_ei, t_il = self.il.forward(f_p, f_i, coords)
            tape = LayerTape("fusion.parallel", t_il=t_il, t_s=t_s, t_li=t_li)
        else:  # li_only
            f_ipt, t_s = bilinear_sample(f_i, coords)
            f_ep, t_li = self.li.forward(f_p, f_ipt)
            f_ei = f_i
            tape = LayerTape("fusion.li_only", t_s=t_s, t_li=t_li)
        return f_ep, f_ei, tape

    def backward(self, tape, g_ep, g_ei):
        c = tape.take()
        if self.mode == "cascade":
            gf_p1, gf_ipt = self.li.backward(c["t_li"], g_ep)
            g_ei_total = g_ei + bilinear_sample_backward(c["t_s"], gf_ipt)
            gf_p2, gf_i = self.il.backward(c["t_il"], g_ei_total)
            return gf_p1 + gf_p2, gf_i
        if self.mode == "reversed":
            g_ep_extra, gf_i1 = self.il.backward(c["t_il"], g_ei)
            gf_p, gf_ipt = self.li.backward(c["t_li"], g_ep + g_ep_extra)
            return gf_p, gf_i1 + bilinear_sample_backward(c["t_s"], gf_ipt)
        if self.mode == "parallel":
            gf_p1, gf_ipt = self.li.backward(c["t_li"], g_ep)
            gf_i1 = bilinear_sample_backward(c["t_s"], gf_ipt)
            gf_p2, gf_i2 = self.il.backward(c["t_il"], g_ei)
            return gf_p1 + gf_p2, gf_i1 + gf_i2
        # li_only
        gf_p, gf_ipt = self.li.backward(c["t_li"], g_ep)
        return gf_p, g_ei + bilinear_sample_backward(c["t_s"], gf_ipt)
