"""Token-mixing (TM) and channel-mixing (CM) sublayers and their block.

Each block applies, with pre-norm residual wiring,

    h   = x + TM(LN1(x))
    out = h + CM(LN2(h))

TM interpolates consecutive inputs with a data-dependent mix (ddlerp),
projects to r/k/v/g and a per-channel decay w = exp(-exp(d)), runs the
decayed outer-product recurrence over heads, then gates the per-head
normalized read-out with SiLU(g) before the output projection. CM is the
squared-ReLU feed-forward with a sigmoid gate.

Every sequence function exists in two modes: a chunked-parallel form used
for training/offline encoding (with optional cache for the hand-derived
backward pass) and a single-token recurrent form used for event-by-event
inference. The two are equivalent up to floating-point rounding.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import scan
from .config import EncoderConfig
from .params import LN_EPS, BlockParams


@dataclass
class BlockState:
    """Recurrent state of one block for one stream."""

    S: np.ndarray        # (N, Dh, Dh)
    tm_prev: np.ndarray  # (D,) last normalized TM input
    cm_prev: np.ndarray  # (D,) last normalized CM input

    @classmethod
    def zeros(cls, cfg: EncoderConfig, dtype=None) -> "BlockState":
        dtype = dtype or cfg.dtype
        return cls(
            S=np.zeros((cfg.n_heads, cfg.d_head, cfg.d_head), dtype),
            tm_prev=np.zeros(cfg.d_model, dtype),
            cm_prev=np.zeros(cfg.d_model, dtype),
        )

    def copy(self) -> "BlockState":
        return BlockState(self.S.copy(), self.tm_prev.copy(), self.cm_prev.copy())


# ---------------------------------------------------------------------------
# Primitive ops (forward + hand-derived backward)
# ---------------------------------------------------------------------------

def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def silu(x):
    return x * sigmoid(x)


def ln_fwd(x, g, b, eps=LN_EPS):
    mean = x.mean(-1, keepdims=True)
    xc = x - mean
    inv = 1.0 / np.sqrt((xc * xc).mean(-1, keepdims=True) + eps)
    xhat = xc * inv
    return xhat * g + b, (xhat, inv, g)


def ln_bwd(cache, dy):
    xhat, inv, g = cache
    D = dy.shape[-1]
    dg = (dy * xhat).reshape(-1, D).sum(0)
    db = dy.reshape(-1, D).sum(0)
    dxh = dy * g
    dx = inv * (dxh - dxh.mean(-1, keepdims=True)
                - xhat * (dxh * xhat).mean(-1, keepdims=True))
    return dx, dg, db


def headln_fwd(y, eps=LN_EPS):
    """Affine-free normalization over the last axis (one head at a time)."""
    mean = y.mean(-1, keepdims=True)
    yc = y - mean
    inv = 1.0 / np.sqrt((yc * yc).mean(-1, keepdims=True) + eps)
    yhat = yc * inv
    return yhat, (yhat, inv)


def headln_bwd(cache, dy):
    yhat, inv = cache
    return inv * (dy - dy.mean(-1, keepdims=True)
                  - yhat * (dy * yhat).mean(-1, keepdims=True))


def lora(x, lam, A, B):
    """lam + tanh(x A) B, on a single vector or batched rows."""
    return lam + np.tanh(x @ A) @ B


def ddlerp(x, x_prev, mu, lam, A, B):
    """Data-dependent interpolation between the current and previous input."""
    delta = x_prev - x
    return x + delta * lora(x + delta * mu, lam, A, B)


def _shift(a, carry):
    """Previous-token sequence: [carry, a_0, ..., a_{T-2}]."""
    return np.concatenate([carry[:, None], a[:, :-1]], axis=1)


def _outer_grad(x, dy):
    """sum over leading dims of x[..., i] dy[..., j] -> (Din, Dout) GEMM."""
    return x.reshape(-1, x.shape[-1]).T @ dy.reshape(-1, dy.shape[-1])


# ---------------------------------------------------------------------------
# TM sublayer, sequence form
# ---------------------------------------------------------------------------

_TM_PATHS = ("r", "k", "v", "g")


def tm_sublayer_fwd(a, carry, S0, bp: BlockParams, n_heads: int,
                    chunk: int = scan.DEFAULT_CHUNK, want_cache: bool = False):
    """a: (B, T, D) normalized inputs; carry: (B, D); S0: (B, N, Dh, Dh).

    Returns (o, S_final, new_carry[, cache]).
    """
    B, T, D = a.shape
    Dh = D // n_heads
    a_prev = _shift(a, carry)
    delta = a_prev - a
    m = a + delta * bp.mu

    proj = {}
    path_cache = {}
    for name in _TM_PATHS:
        lam, A, Bm, W = (getattr(bp, f"lam_{name}"), getattr(bp, f"A_{name}"),
                         getattr(bp, f"B_{name}"), getattr(bp, f"W_{name}"))
        q = np.tanh(m @ A)
        gmix = lam + q @ Bm
        mixed = a + delta * gmix
        proj[name] = mixed @ W
        path_cache[name] = (q, gmix, mixed)

    q_d = np.tanh(m @ bp.A_w)
    d = bp.lam_d + q_d @ bp.B_w
    lw = -np.exp(d)

    r = proj["r"].reshape(B, T, n_heads, Dh)
    k = proj["k"].reshape(B, T, n_heads, Dh)
    v = proj["v"].reshape(B, T, n_heads, Dh)
    lw_h = lw.reshape(B, T, n_heads, Dh)
    u_h = bp.u.reshape(n_heads, Dh)

    if want_cache:
        y, S_fin, scan_cache = scan.decay_scan_forward(
            r, k, v, lw_h, u_h, S0, chunk, want_cache=True)
    else:
        y, S_fin = scan.decay_scan_forward(r, k, v, lw_h, u_h, S0, chunk)
        scan_cache = None

    yn, headln_cache = headln_fwd(y)
    g = proj["g"]
    sg = silu(g)
    o_pre = sg * yn.reshape(B, T, D)
    o = o_pre @ bp.W_o
    new_carry = a[:, -1].copy()
    if not want_cache:
        return o, S_fin, new_carry
    cache = {"a": a, "delta": delta, "m": m, "paths": path_cache, "q_d": q_d,
             "lw": lw, "scan": scan_cache, "headln": headln_cache, "g": g,
             "sg": sg, "yn": yn, "o_pre": o_pre, "bp": bp,
             "n_heads": n_heads}
    return o, S_fin, new_carry, cache


def tm_sublayer_bwd(cache, do, dS_fin=None):
    """Returns (da, d_carry, grads dict keyed by BlockParams field name)."""
    bp: BlockParams = cache["bp"]
    a, delta, m = cache["a"], cache["delta"], cache["m"]
    B, T, D = a.shape
    n_heads = cache["n_heads"]
    Dh = D // n_heads
    grads = {}

    # output projection and gate
    grads["W_o"] = _outer_grad(cache["o_pre"], do)
    d_opre = do @ bp.W_o.T
    yn_flat = cache["yn"].reshape(B, T, D)
    dsg = d_opre * yn_flat
    dyn = (d_opre * cache["sg"]).reshape(B, T, n_heads, Dh)
    sig_g = sigmoid(cache["g"])
    dg_proj = dsg * (sig_g * (1.0 + cache["g"] * (1.0 - sig_g)))

    dy = headln_bwd(cache["headln"], dyn)
    if dS_fin is None:
        dS_fin = np.zeros_like(cache["scan"]["s_ins"][0])
    dr, dk, dv, dlw, du, _ = scan.decay_scan_backward(cache["scan"], dy, dS_fin)
    grads["u"] = du.reshape(D)

    dproj = {"r": dr.reshape(B, T, D), "k": dk.reshape(B, T, D),
             "v": dv.reshape(B, T, D), "g": dg_proj}

    # decay path: lw = -exp(d), d = lam_d + tanh(m A_w) B_w
    dd = dlw.reshape(B, T, D) * cache["lw"]
    grads["lam_d"] = dd.sum((0, 1))
    q_d = cache["q_d"]
    grads["B_w"] = _outer_grad(q_d, dd)
    dz_d = (dd @ bp.B_w.T) * (1.0 - q_d * q_d)
    grads["A_w"] = _outer_grad(m, dz_d)
    dm = dz_d @ bp.A_w.T

    da = np.zeros_like(a)
    ddelta = np.zeros_like(a)
    for name in _TM_PATHS:
        q, gmix, mixed = cache["paths"][name]
        W = getattr(bp, f"W_{name}")
        grads[f"W_{name}"] = _outer_grad(mixed, dproj[name])
        dmixed = dproj[name] @ W.T
        da += dmixed
        ddelta += dmixed * gmix
        dgmix = dmixed * delta
        grads[f"lam_{name}"] = dgmix.sum((0, 1))
        Bm = getattr(bp, f"B_{name}")
        grads[f"B_{name}"] = _outer_grad(q, dgmix)
        dz = (dgmix @ Bm.T) * (1.0 - q * q)
        grads[f"A_{name}"] = _outer_grad(m, dz)
        dm += dz @ getattr(bp, f"A_{name}").T

    # m = a + delta * mu
    da += dm
    ddelta += dm * bp.mu
    grads["mu"] = (dm * delta).sum((0, 1))

    # delta = a_prev - a; a_prev = shift(a, carry)
    da -= ddelta
    da[:, :-1] += ddelta[:, 1:]
    d_carry = ddelta[:, 0].copy()
    return da, d_carry, grads


# ---------------------------------------------------------------------------
# CM sublayer, sequence form
# ---------------------------------------------------------------------------

def cm_sublayer_fwd(b, carry, bp: BlockParams, want_cache: bool = False):
    b_prev = _shift(b, carry)
    delta = b_prev - b
    mr = b + delta * bp.mu_cr
    mk = b + delta * bp.mu_ck
    rr = mr @ bp.W_cr
    sig = sigmoid(rr)
    kk = mk @ bp.W_ck
    kr = np.maximum(kk, 0.0)
    relu2 = kr * kr
    vv = relu2 @ bp.W_cv
    o = sig * vv
    new_carry = b[:, -1].copy()
    if not want_cache:
        return o, new_carry
    cache = {"delta": delta, "mr": mr, "mk": mk, "sig": sig, "kr": kr,
             "relu2": relu2, "vv": vv, "bp": bp}
    return o, new_carry, cache


def cm_sublayer_bwd(cache, do):
    bp: BlockParams = cache["bp"]
    delta, sig, vv = cache["delta"], cache["sig"], cache["vv"]
    grads = {}
    dsig = do * vv
    dvv = do * sig
    drr = dsig * sig * (1.0 - sig)
    grads["W_cr"] = _outer_grad(cache["mr"], drr)
    dmr = drr @ bp.W_cr.T
    grads["W_cv"] = _outer_grad(cache["relu2"], dvv)
    drelu2 = dvv @ bp.W_cv.T
    dkk = drelu2 * 2.0 * cache["kr"]
    grads["W_ck"] = _outer_grad(cache["mk"], dkk)
    dmk = dkk @ bp.W_ck.T

    db = dmr + dmk
    ddelta = dmr * bp.mu_cr + dmk * bp.mu_ck
    grads["mu_cr"] = (dmr * delta).sum((0, 1))
    grads["mu_ck"] = (dmk * delta).sum((0, 1))
    grads["mu_cv"] = np.zeros_like(bp.mu_cv)

    db -= ddelta
    db[:, :-1] += ddelta[:, 1:]
    d_carry = ddelta[:, 0].copy()
    return db, d_carry, grads


# ---------------------------------------------------------------------------
# Whole block, sequence form
# ---------------------------------------------------------------------------

def block_seq_fwd(x, S0, tm_prev, cm_prev, bp: BlockParams, n_heads: int,
                  chunk: int = scan.DEFAULT_CHUNK, want_cache: bool = False):
    """x: (B, T, D). Returns (out, (S_fin, tm_carry, cm_carry)[, cache])."""
    a, ln1_cache = ln_fwd(x, bp.ln1_g, bp.ln1_b)
    tm_out = tm_sublayer_fwd(a, tm_prev, S0, bp, n_heads, chunk, want_cache)
    if want_cache:
        o_tm, S_fin, tm_carry, tm_cache = tm_out
    else:
        o_tm, S_fin, tm_carry = tm_out
    h = x + o_tm
    b, ln2_cache = ln_fwd(h, bp.ln2_g, bp.ln2_b)
    cm_out = cm_sublayer_fwd(b, cm_prev, bp, want_cache)
    if want_cache:
        o_cm, cm_carry, cm_cache = cm_out
    else:
        o_cm, cm_carry = cm_out
    out = h + o_cm
    state = (S_fin, tm_carry, cm_carry)
    if not want_cache:
        return out, state
    cache = {"ln1": ln1_cache, "tm": tm_cache, "ln2": ln2_cache, "cm": cm_cache}
    return out, state, cache


def block_seq_bwd(cache, dout, dS_fin=None):
    """Returns (dx, grads dict keyed by BlockParams field name)."""
    db, _, cm_grads = cm_sublayer_bwd(cache["cm"], dout)
    dh, dln2_g, dln2_b = ln_bwd(cache["ln2"], db)
    dh += dout
    da, _, tm_grads = tm_sublayer_bwd(cache["tm"], dh, dS_fin)
    dx, dln1_g, dln1_b = ln_bwd(cache["ln1"], da)
    dx += dh
    grads = {**tm_grads, **cm_grads,
             "ln1_g": dln1_g, "ln1_b": dln1_b, "ln2_g": dln2_g, "ln2_b": dln2_b}
    return dx, grads


# ---------------------------------------------------------------------------
# Single-token recurrent form (event-by-event inference)
# ---------------------------------------------------------------------------

def tm_project(x, x_prev, bp: BlockParams):
    """Project one (or a batch of) normalized input(s) to (r, k, v, g, w)."""
    delta = x_prev - x
    m = x + delta * bp.mu
    outs = []
    for name in _TM_PATHS:
        gmix = getattr(bp, f"lam_{name}") + np.tanh(m @ getattr(bp, f"A_{name}")) \
            @ getattr(bp, f"B_{name}")
        outs.append((x + delta * gmix) @ getattr(bp, f"W_{name}"))
    d = bp.lam_d + np.tanh(m @ bp.A_w) @ bp.B_w
    if not np.all(np.isfinite(d)):
        raise FloatingPointError("non-finite decay pre-activation")
    w = np.exp(-np.exp(d))
    r, k, v, g = outs
    return r, k, v, g, w


def tm_step(S, r, k, v, w, u):
    """One recurrence step on a per-head state stack S: (N, Dh, Dh).

    y = (S + diag(u) k v^T) r per head; S' = diag(w) S + k v^T.
    Returns (y flattened to (D,), S').
    """
    N, Dh, _ = S.shape
    rh, kh, vh, wh = (z.reshape(N, Dh) for z in (r, k, v, w))
    uh = u.reshape(N, Dh)
    kv = kh[:, :, None] * vh[:, None, :]
    y = np.einsum("nab,nb->na", S + uh[:, :, None] * kv, rh)
    S_new = wh[:, :, None] * S + kv
    return y.reshape(-1), S_new


def tm_parallel(r, k, v, w, u, S0, n_heads: int, chunk: int = scan.DEFAULT_CHUNK):
    """Chunked-scan evaluation of iterating tm_step over a (T, D) sequence.

    Returns (y (T, D), S_final). Matches the recurrent iteration to
    floating-point tolerance.
    """
    T, D = r.shape
    Dh = D // n_heads
    shape = (1, T, n_heads, Dh)
    with np.errstate(divide="ignore"):
        # w == 0 (full reset) clamps to a huge finite log-decay so the
        # cumulative-sum differences stay NaN-free
        lw = np.maximum(np.log(w.reshape(shape)), -1e6)
    y, S_fin = scan.decay_scan_forward(
        r.reshape(shape), k.reshape(shape), v.reshape(shape), lw,
        u.reshape(n_heads, Dh), S0[None], chunk)
    return y.reshape(T, D), S_fin[0]


def tm_output(y, g, bp: BlockParams, n_heads: int):
    """Per-head normalization of y gated by SiLU(g), projected by W_o."""
    D = y.shape[-1]
    yn, _ = headln_fwd(y.reshape(*y.shape[:-1], n_heads, D // n_heads))
    return (silu(g) * yn.reshape(y.shape)) @ bp.W_o


def cm_step(x, x_prev, bp: BlockParams):
    delta = x_prev - x
    rr = (x + delta * bp.mu_cr) @ bp.W_cr
    kk = (x + delta * bp.mu_ck) @ bp.W_ck
    kr = np.maximum(kk, 0.0)
    return sigmoid(rr) * ((kr * kr) @ bp.W_cv)


def block_forward(x, state: BlockState, bp: BlockParams, n_heads: int):
    """One token through one block, updating `state` in place.

    x: (D,). Returns the block output (D,).
    """
    a, _ = ln_fwd(x, bp.ln1_g, bp.ln1_b)
    r, k, v, g, w = tm_project(a, state.tm_prev, bp)
    y, state.S = tm_step(state.S, r, k, v, w, bp.u)
    h = x + tm_output(y, g, bp, n_heads)
    b, _ = ln_fwd(h, bp.ln2_g, bp.ln2_b)
    out = h + cm_step(b, state.cm_prev, bp)
    state.tm_prev = a
    state.cm_prev = b
    return out
