"""Convolutional read-out heads mapping a matrix-state snapshot to a
2 x P x P target image.

Structure: 3x3 conv (ReLU), then a 4x4/stride-2 transposed conv (ReLU) per
doubling needed to reach the patch side, then a 1x1 projection. Heads are
training scaffolding only; they are dropped after pretraining.

The 3x3 conv runs as one im2col GEMM; the transposed conv scatters its 16
kernel taps onto a strided output buffer.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def init_head(n_in: int, d_head: int, patch: int, width: int,
              rng: np.random.Generator, dtype=np.float64) -> dict[str, np.ndarray]:
    """Parameter dict for one head. Requires patch = d_head * 2**m."""
    ups = 0
    side = d_head
    while side < patch:
        side *= 2
        ups += 1
    if side != patch:
        raise ValueError(f"patch {patch} not reachable from d_head {d_head} by doubling")
    def conv_w(shape):
        fan_in = shape[1] * shape[2] * shape[3] if len(shape) == 4 else shape[0]
        return rng.uniform(-1, 1, size=shape).astype(dtype) / np.sqrt(fan_in)
    p = {
        "conv1_W": conv_w((width, n_in, 3, 3)),
        "conv1_b": np.zeros(width, dtype),
        "proj_W": conv_w((width, 2)),
        "proj_b": np.zeros(2, dtype),
    }
    for j in range(ups):
        p[f"up{j}_W"] = rng.uniform(-1, 1, size=(width, width, 4, 4)).astype(dtype) \
            / np.sqrt(width * 16)
        p[f"up{j}_b"] = np.zeros(width, dtype)
    return p


def n_upsamples(head: dict) -> int:
    return sum(1 for k in head if k.startswith("up") and k.endswith("_W"))


def _conv3x3_fwd(x, W, b):
    Bn, C, H, Wd = x.shape
    F = W.shape[0]
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    win = sliding_window_view(xp, (3, 3), axis=(2, 3))       # (B, C, H, W, 3, 3)
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(
        Bn * H * Wd, C * 9)
    out = cols @ W.reshape(F, C * 9).T
    out = out.reshape(Bn, H, Wd, F).transpose(0, 3, 1, 2) + b[None, :, None, None]
    return out, cols


def _conv3x3_bwd(cols, x_shape, W, dout):
    Bn, C, H, Wd = x_shape
    F = W.shape[0]
    dflat = np.ascontiguousarray(dout.transpose(0, 2, 3, 1)).reshape(-1, F)
    dW = (dflat.T @ cols).reshape(F, C, 3, 3)
    dcols = (dflat @ W.reshape(F, C * 9)).reshape(Bn, H, Wd, C, 3, 3)
    dxp = np.zeros((Bn, C, H + 2, Wd + 2), dtype=dout.dtype)
    for p in range(3):
        for q in range(3):
            dxp[:, :, p:p + H, q:q + Wd] += dcols[:, :, :, :, p, q].transpose(0, 3, 1, 2)
    db = dflat.sum(0)
    return dxp[:, :, 1:-1, 1:-1], dW, db


def _convT_fwd(x, W, b):
    """4x4 stride-2 pad-1 transposed conv: (B,C,H,W) -> (B,F,2H,2W)."""
    Bn, C, H, Wd = x.shape
    F = W.shape[1]
    # every tap at once: (B, H, W, F, 4, 4)
    taps = np.tensordot(x.transpose(0, 2, 3, 1), W, axes=([3], [0]))
    buf = np.zeros((Bn, F, 2 * H + 2, 2 * Wd + 2), dtype=x.dtype)
    for p in range(4):
        for q in range(4):
            buf[:, :, p:p + 2 * H:2, q:q + 2 * Wd:2] += \
                taps[:, :, :, :, p, q].transpose(0, 3, 1, 2)
    return buf[:, :, 1:2 * H + 1, 1:2 * Wd + 1] + b[None, :, None, None]


def _convT_bwd(x, W, dout):
    Bn, C, H, Wd = x.shape
    F = W.shape[1]
    dbuf = np.zeros((Bn, F, 2 * H + 2, 2 * Wd + 2), dtype=x.dtype)
    dbuf[:, :, 1:2 * H + 1, 1:2 * Wd + 1] = dout
    dtaps = np.empty((Bn, H, Wd, F, 4, 4), dtype=x.dtype)
    for p in range(4):
        for q in range(4):
            dtaps[:, :, :, :, p, q] = \
                dbuf[:, :, p:p + 2 * H:2, q:q + 2 * Wd:2].transpose(0, 2, 3, 1)
    x_flat = x.transpose(0, 2, 3, 1).reshape(-1, C)
    dt_flat = dtaps.reshape(-1, F * 16)
    dW = (x_flat.T @ dt_flat).reshape(C, F, 4, 4)
    dx = (dt_flat @ W.reshape(C, F * 16).T).reshape(Bn, H, Wd, C).transpose(0, 3, 1, 2)
    db = dout.sum((0, 2, 3))
    return dx, dW, db


def head_forward(head: dict, x: np.ndarray, want_cache: bool = False):
    """x: (B, n_in, d_head, d_head) -> prediction (B, 2, P, P)."""
    cache = {"x_shape": x.shape}
    h, cols = _conv3x3_fwd(x, head["conv1_W"], head["conv1_b"])
    cache["cols1"] = cols
    cache["pre1"] = h
    h = np.maximum(h, 0.0)
    for j in range(n_upsamples(head)):
        cache[f"in_up{j}"] = h
        h = _convT_fwd(h, head[f"up{j}_W"], head[f"up{j}_b"])
        cache[f"pre_up{j}"] = h
        h = np.maximum(h, 0.0)
    cache["feat"] = h
    out = np.tensordot(h.transpose(0, 2, 3, 1), head["proj_W"],
                       axes=([3], [0])).transpose(0, 3, 1, 2) \
        + head["proj_b"][None, :, None, None]
    if want_cache:
        return out, cache
    return out


def head_backward(head: dict, cache: dict, dout: np.ndarray):
    """Returns (grads dict, dx)."""
    grads = {}
    feat = cache["feat"]
    F = feat.shape[1]
    feat_flat = feat.transpose(0, 2, 3, 1).reshape(-1, F)
    dout_flat = dout.transpose(0, 2, 3, 1).reshape(-1, 2)
    grads["proj_W"] = feat_flat.T @ dout_flat
    grads["proj_b"] = dout_flat.sum(0)
    dh = (dout_flat @ head["proj_W"].T).reshape(
        feat.shape[0], feat.shape[2], feat.shape[3], F).transpose(0, 3, 1, 2)
    for j in reversed(range(n_upsamples(head))):
        dh = dh * (cache[f"pre_up{j}"] > 0)
        dh, dW, db = _convT_bwd(cache[f"in_up{j}"], head[f"up{j}_W"], dh)
        grads[f"up{j}_W"] = dW
        grads[f"up{j}_b"] = db
    dh = dh * (cache["pre1"] > 0)
    dx, dW, db = _conv3x3_bwd(cache["cols1"], cache["x_shape"], head["conv1_W"], dh)
    grads["conv1_W"] = dW
    grads["conv1_b"] = db
    return grads, dx
