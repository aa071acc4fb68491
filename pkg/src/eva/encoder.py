"""Full encoder stack: embedding, pre-norm, mixing blocks, matrix state.

Three evaluation paths share one parameter set:

  * `encoder_step`          one event at a time (serving),
  * `encode_sequence`       chunked-parallel over a whole sequence (offline),
  * `encode_sequence_recurrent`  the stepping reference for equivalence tests.

The training path (`forward_train` / `backward_train`) runs the parallel
form with caches and returns exact reverse-mode gradients for every
parameter as a flat named dict matching `params.named_arrays`.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import blocks as B
from . import mvhs as M
from . import scan
from .config import EncoderConfig
from .embedding import embed_events, embed_temporal
from .params import EncoderParams


@dataclass
class EncoderState:
    """Per-stream recurrent state: one per patch pipeline."""

    blocks: list
    mvhs: M.MvhsState
    last_t: int = -1      # timestamp of last absorbed event (-1: none yet)
    event_index: int = 0  # events absorbed

    @classmethod
    def zeros(cls, cfg: EncoderConfig, dtype=None) -> "EncoderState":
        return cls(blocks=[B.BlockState.zeros(cfg, dtype) for _ in range(cfg.n_blocks)],
                   mvhs=M.MvhsState.zeros(cfg, dtype))

    def copy(self) -> "EncoderState":
        return EncoderState(blocks=[s.copy() for s in self.blocks],
                            mvhs=self.mvhs.copy(),
                            last_t=self.last_t, event_index=self.event_index)


def representation(state: EncoderState, n_out: int) -> M.Representation:
    return M.Representation(values=M.select_channels(state.mvhs.S, n_out),
                            event_index=state.event_index, last_t=state.last_t)


# ---------------------------------------------------------------------------
# Event-by-event path
# ---------------------------------------------------------------------------

def encoder_step(params: EncoderParams, state: EncoderState, token: int, dt: int) -> None:
    """Absorb one tokenized event into `state`, in place."""
    cfg = params.config
    x = params.embed[token] + embed_temporal(dt, cfg.d_model, dtype=params.dtype)
    h, _ = B.ln_fwd(x, params.ln0_g, params.ln0_b)
    for bs, bp in zip(state.blocks, params.blocks):
        h = B.block_forward(h, bs, bp, cfg.n_heads)
    state.mvhs.S = M.mvhs_step(state.mvhs.S, h, state.mvhs.prev, params.mvhs)
    state.mvhs.prev = h
    state.event_index += 1


def ingest_event(params: EncoderParams, state: EncoderState, token: int, t: int) -> None:
    """encoder_step plus the timestamp cursor (dt = t - last_t, 0 at start)."""
    dt = 0 if state.last_t < 0 else t - state.last_t
    encoder_step(params, state, token, dt)
    state.last_t = t


# ---------------------------------------------------------------------------
# Sequence paths
# ---------------------------------------------------------------------------

def _embed(params: EncoderParams, tokens, dts):
    x = embed_events(np.asarray(tokens), np.asarray(dts), params.embed)
    return x.astype(params.dtype, copy=False)


def encode_sequence(params: EncoderParams, tokens, dts,
                    state: EncoderState | None = None, checkpoints=None,
                    chunk: int = scan.DEFAULT_CHUNK):
    """Chunked-parallel encode of a token/gap sequence.

    Returns (snaps, new_state) where snaps is (K, N, Dh, Dh), one raw
    matrix-state snapshot per checkpoint (1-based indices; defaults to
    just the end of the sequence).
    """
    cfg = params.config
    T = len(tokens)
    checkpoints = list(checkpoints) if checkpoints is not None else [T]
    state = state.copy() if state is not None else EncoderState.zeros(cfg, params.dtype)
    x = _embed(params, tokens, dts)[None]
    h, _ = B.ln_fwd(x, params.ln0_g, params.ln0_b)
    for i, bp in enumerate(params.blocks):
        bs = state.blocks[i]
        h, (S_f, tm_c, cm_c) = B.block_seq_fwd(
            h, bs.S[None], bs.tm_prev[None], bs.cm_prev[None], bp,
            cfg.n_heads, chunk)
        state.blocks[i] = B.BlockState(S_f[0], tm_c[0], cm_c[0])
    snaps, S_fin, new_prev = M._mvhs_seq(
        h, state.mvhs.prev[None], state.mvhs.S[None], params.mvhs,
        cfg.mvhs_heads, checkpoints, chunk)
    state.mvhs = M.MvhsState(S_fin[0], new_prev[0])
    state.event_index += T
    return snaps[0], state


def encode_sequence_recurrent(params: EncoderParams, tokens, dts,
                              state: EncoderState | None = None, checkpoints=None):
    """Stepping reference; identical contract to encode_sequence."""
    cfg = params.config
    T = len(tokens)
    checkpoints = set(checkpoints) if checkpoints is not None else {T}
    state = state.copy() if state is not None else EncoderState.zeros(cfg, params.dtype)
    snaps = []
    for i in range(T):
        encoder_step(params, state, int(tokens[i]), int(dts[i]))
        if i + 1 in checkpoints:
            snaps.append(state.mvhs.S.copy())
    snaps = (np.stack(snaps) if snaps else
             np.zeros((0, cfg.mvhs_heads, cfg.mvhs_d_head, cfg.mvhs_d_head), params.dtype))
    return snaps, state


def encode_events(params: EncoderParams, events, state=None, checkpoints=None,
                  chunk: int = scan.DEFAULT_CHUNK, recurrent: bool = False):
    """Encode patch-local events, tracking the timestamp cursor."""
    from .embedding import event_to_token_dt
    cfg = params.config
    prev_t = None if state is None or state.last_t < 0 else state.last_t
    tokens, dts = event_to_token_dt(events, cfg.patch, cfg.patch, prev_t)
    fn = encode_sequence_recurrent if recurrent else encode_sequence
    snaps, new_state = fn(params, tokens, dts, state, checkpoints)
    if len(events):
        new_state.last_t = int(events["t"][-1])
    return snaps, new_state


# ---------------------------------------------------------------------------
# Training path
# ---------------------------------------------------------------------------

def forward_train(params: EncoderParams, tokens: np.ndarray, dts: np.ndarray,
                  checkpoints, chunk: int = scan.DEFAULT_CHUNK):
    """Batched forward with caches. tokens/dts: (B, T) int arrays.

    Sequences start from zero state. Returns (snaps (B, K, N, Dh, Dh), cache).
    """
    cfg = params.config
    Bsz, T = tokens.shape
    dtype = params.dtype
    x = _embed(params, tokens, dts)
    h, ln0_cache = B.ln_fwd(x, params.ln0_g, params.ln0_b)
    block_caches = []
    for bp in params.blocks:
        S0 = np.zeros((Bsz, cfg.n_heads, cfg.d_head, cfg.d_head), dtype)
        carry = np.zeros((Bsz, cfg.d_model), dtype)
        h, _, cache = B.block_seq_fwd(h, S0, carry, carry, bp, cfg.n_heads,
                                      chunk, want_cache=True)
        block_caches.append(cache)
    S0m = np.zeros((Bsz, cfg.mvhs_heads, cfg.mvhs_d_head, cfg.mvhs_d_head), dtype)
    carry_m = np.zeros((Bsz, cfg.d_model), dtype)
    snaps, _, _, mvhs_cache = M._mvhs_seq(h, carry_m, S0m, params.mvhs,
                                          cfg.mvhs_heads, list(checkpoints),
                                          chunk, want_cache=True)
    cache = {"tokens": tokens, "ln0": ln0_cache, "blocks": block_caches,
             "mvhs": mvhs_cache, "cfg": cfg, "vocab": params.embed.shape[0]}
    return snaps, cache


def backward_train(cache, dSnaps) -> dict[str, np.ndarray]:
    """Gradients of a scalar loss given d(loss)/d(snapshots)."""
    grads: dict[str, np.ndarray] = {}
    dh, _, mvhs_grads = M._mvhs_seq_bwd(cache["mvhs"], dSnaps)
    for name, g in mvhs_grads.items():
        grads[f"mvhs.{name}"] = g
    for i in reversed(range(len(cache["blocks"]))):
        dh, bgrads = B.block_seq_bwd(cache["blocks"][i], dh)
        for name, g in bgrads.items():
            grads[f"blocks.{i}.{name}"] = g
    dx, dln0_g, dln0_b = B.ln_bwd(cache["ln0"], dh)
    grads["ln0_g"] = dln0_g
    grads["ln0_b"] = dln0_b
    tokens = cache["tokens"]
    dtable = np.zeros((cache["vocab"], dx.shape[-1]), dtype=dx.dtype)
    np.add.at(dtable, tokens.reshape(-1), dx.reshape(-1, dx.shape[-1]))
    grads["embed"] = dtable
    return grads
