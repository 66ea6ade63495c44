"""Hand-rolled differentiable layers: explicit forwards, taped backwards.

Every forward returns ``(output, tape)``; the matching ``*_backward`` takes
the tape plus the upstream gradient and returns gradients for the inputs in
declaration order. Tapes are single use.
"""

from __future__ import annotations

import numpy as np

from .dense import as_dense


class LayerTape:
    """Forward-pass cache consumed exactly once by the matching backward."""

    __slots__ = ("op", "_cache", "_spent")

    def __init__(self, op: str, **cache):
        self.op = op
        self._cache = cache
        self._spent = False

    def take(self) -> dict:
        if self._spent:
            raise RuntimeError(
                f"{self.op}: tape already consumed; each forward pays for one backward"
            )
        self._spent = True
        return self._cache


# -- dense --------------------------------------------------------------------


def linear(x, w, b):
    """y = x @ w + b over the trailing axis.

    Args:
        x: (..., d_in) input; any leading shape (points, pixels, batches).
        w: (d_in, d_out) weight.
        b: (d_out,) bias.

    Returns:
        (y, tape) with y of shape (..., d_out).
    """
    x = as_dense(x, "linear input")
    w = np.asarray(w, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if w.ndim != 2:
        raise ValueError(f"linear: weight must be 2-d, got shape {w.shape}")
    if x.shape[-1] != w.shape[0]:
        raise ValueError(
            f"linear: input has {x.shape[-1]} features, weight expects {w.shape[0]}"
        )
    if b.shape != (w.shape[1],):
        raise ValueError(
            f"linear: bias shape {b.shape} does not match output width {w.shape[1]}"
        )
    y = x @ w + b
    return y, LayerTape("linear", x=x, w=w)


def linear_backward(tape, gy):
    """Returns (gx, gw, gb)."""
    c = tape.take()
    x, w = c["x"], c["w"]
    gy = np.asarray(gy, dtype=np.float64)
    want = x.shape[:-1] + (w.shape[1],)
    if gy.shape != want:
        raise ValueError(f"linear backward: gradient shape {gy.shape}, expected {want}")
    xl = x.reshape(-1, x.shape[-1])
    gl = gy.reshape(-1, w.shape[1])
    gw = xl.T @ gl
    gb = gl.sum(axis=0)
    gx = (gl @ w.T).reshape(x.shape)
    return gx, gw, gb


# -- convolution ---------------------------------------------------------------


def conv3x3(x, k, b, stride: int = 1):
    """3x3 same-padded convolution, stride 1 or 2.

    Args:
        x: (h, w, c_in) feature map.
        k: (3, 3, c_in, c_out) kernel.
        b: (c_out,) bias.
        stride: 1 or 2; output is ceil(h/stride) x ceil(w/stride). Zero
            padding follows the usual same-convolution split (the odd
            row/column goes to the bottom/right edge).

    Returns:
        (y, tape) with y of shape (out_h, out_w, c_out).
    """
    x = as_dense(x, "conv input")
    k = np.asarray(k, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if x.ndim != 3:
        raise ValueError(f"conv3x3: expected (h, w, c) input, got shape {x.shape}")
    if k.ndim != 4 or k.shape[:2] != (3, 3) or k.shape[2] != x.shape[2]:
        raise ValueError(f"conv3x3: kernel {k.shape} does not fit input {x.shape}")
    if b.shape != (k.shape[3],):
        raise ValueError(
            f"conv3x3: bias shape {b.shape} does not match {k.shape[3]} output channels"
        )
    if stride not in (1, 2):
        raise ValueError(f"conv3x3: stride must be 1 or 2, got {stride}")

    h, w, ci = x.shape
    co = k.shape[3]
    oh = -(-h // stride)
    ow = -(-w // stride)
    ph = max((oh - 1) * stride + 3 - h, 0)
    pw = max((ow - 1) * stride + 3 - w, 0)
    pt, pl = ph // 2, pw // 2
    xp = np.zeros((h + ph, w + pw, ci))
    xp[pt : pt + h, pl : pl + w] = x

    y = np.zeros((oh, ow, co)) + b
    for di in range(3):
        for dj in range(3):
            view = xp[
                di : di + (oh - 1) * stride + 1 : stride,
                dj : dj + (ow - 1) * stride + 1 : stride,
            ]
            y += view @ k[di, dj]
    return y, LayerTape(
        "conv3x3", xp=xp, k=k, geom=(h, w, pt, pl, stride, oh, ow)
    )


def conv3x3_backward(tape, gy):
    """Returns (gx, gk, gb)."""
    c = tape.take()
    xp, k = c["xp"], c["k"]
    h, w, pt, pl, stride, oh, ow = c["geom"]
    gy = np.asarray(gy, dtype=np.float64)
    if gy.shape != (oh, ow, k.shape[3]):
        raise ValueError(
            f"conv3x3 backward: gradient shape {gy.shape}, expected {(oh, ow, k.shape[3])}"
        )
    gb = gy.sum(axis=(0, 1))
    gk = np.zeros_like(k)
    gxp = np.zeros_like(xp)
    for di in range(3):
        for dj in range(3):
            rows = slice(di, di + (oh - 1) * stride + 1, stride)
            cols = slice(dj, dj + (ow - 1) * stride + 1, stride)
            gk[di, dj] = np.tensordot(xp[rows, cols], gy, axes=([0, 1], [0, 1]))
            gxp[rows, cols] += gy @ k[di, dj].T
    gx = gxp[pt : pt + h, pl : pl + w]
    return gx, gk, gb


# -- activations ----------------------------------------------------------------


def sigmoid(x):
    """Numerically stable logistic; saturates to exactly 0/1 in the far tails."""
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def tanh_act(x):
    y = np.tanh(as_dense(x, "tanh input"))
    return y, LayerTape("tanh", y=y)


def tanh_backward(tape, gy):
    y = tape.take()["y"]
    return np.asarray(gy) * (1.0 - y * y)


def sigmoid_act(x):
    y = sigmoid(as_dense(x, "sigmoid input"))
    return y, LayerTape("sigmoid", y=y)


def sigmoid_backward(tape, gy):
    y = tape.take()["y"]
    return np.asarray(gy) * y * (1.0 - y)


def relu_act(x):
    x = as_dense(x, "relu input")
    mask = x > 0
    return np.where(mask, x, 0.0), LayerTape("relu", mask=mask)


def relu_backward(tape, gy):
    mask = tape.take()["mask"]
    return np.where(mask, np.asarray(gy), 0.0)


ACTIVATIONS = {
    "tanh": (tanh_act, tanh_backward),
    "sigmoid": (sigmoid_act, sigmoid_backward),
    "relu": (relu_act, relu_backward),
}


# -- resampling ------------------------------------------------------------------


def upsample_nearest(x, factor: int, out_hw=None):
    """Nearest-neighbor upsample by an integer factor.

    When ``out_hw`` is given the result is cropped to it (covers odd sizes
    where ceil-divided encoder maps overshoot on the way back up).
    """
    x = as_dense(x, "upsample input")
    if x.ndim != 3:
        raise ValueError(f"upsample: expected (h, w, c) input, got shape {x.shape}")
    if factor < 1 or int(factor) != factor:
        raise ValueError(f"upsample: factor must be a positive integer, got {factor}")
    y = np.repeat(np.repeat(x, factor, axis=0), factor, axis=1)
    if out_hw is not None:
        if y.shape[0] < out_hw[0] or y.shape[1] < out_hw[1]:
            raise ValueError(
                f"upsample: factor {factor} cannot reach {out_hw} from {x.shape[:2]}"
            )
        y = y[: out_hw[0], : out_hw[1]]
    return y, LayerTape(
        "upsample", in_shape=x.shape, factor=int(factor), out_shape=y.shape
    )


def upsample_nearest_backward(tape, gy):
    c = tape.take()
    h, w, ch = c["in_shape"]
    f = c["factor"]
    gy = np.asarray(gy, dtype=np.float64)
    if gy.shape != c["out_shape"]:
        raise ValueError(
            f"upsample backward: gradient shape {gy.shape}, expected {c['out_shape']}"
        )
    gx = np.zeros((h, w, ch))
    # add-pool: each input cell collects all outputs it was replicated into
    for di in range(f):
        for dj in range(f):
            blk = gy[di::f, dj::f]
            gx[: blk.shape[0], : blk.shape[1]] += blk
    return gx


# -- initialization ----------------------------------------------------------------


def init_linear(rng, d_in: int, d_out: int):
    """Xavier-uniform weight, zero bias."""
    limit = np.sqrt(6.0 / (d_in + d_out))
    return rng.uniform(-limit, limit, size=(d_in, d_out)), np.zeros(d_out)


def init_conv3x3(rng, c_in: int, c_out: int):
    limit = np.sqrt(6.0 / (9 * c_in + 9 * c_out))
    return rng.uniform(-limit, limit, size=(3, 3, c_in, c_out)), np.zeros(c_out)
