"""`EVAW` checkpoint container.

Layout: magic "EVAW", u32 metadata length, metadata (UTF-8 `key = value`
lines echoing the encoder configuration), then named tensors until EOF:
u16 name length, name bytes, u8 rank, u32 dims, little-endian f32 payload.
"""

from __future__ import annotations

import struct

import numpy as np

from .config import (EncoderConfig, encoder_config_from_kv, encoder_config_to_kv,
                     format_kv_text, parse_kv_text)
from .params import EncoderParams, encoder_params_from_named, named_arrays

MAGIC = b"EVAW"


class CheckpointError(ValueError):
    pass


def dump_tensors(cfg: EncoderConfig, named: dict[str, np.ndarray],
                 extra_meta: dict | None = None) -> bytes:
    meta = encoder_config_to_kv(cfg)
    if extra_meta:
        meta.update({k: str(v) for k, v in extra_meta.items()})
    meta_bytes = format_kv_text(meta).encode()
    out = [MAGIC, struct.pack("<I", len(meta_bytes)), meta_bytes]
    for name, arr in named.items():
        nb = name.encode()
        if len(nb) > 0xFFFF:
            raise CheckpointError(f"tensor name too long: {name}")
        out.append(struct.pack("<H", len(nb)))
        out.append(nb)
        out.append(struct.pack("<B", arr.ndim))
        out.append(np.array(arr.shape, dtype="<u4").tobytes())
        out.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(out)


def load_tensors(data: bytes) -> tuple[EncoderConfig, dict[str, np.ndarray], dict[str, str]]:
    if data[:4] != MAGIC:
        raise CheckpointError(f"bad magic {data[:4]!r}")
    (meta_len,) = struct.unpack_from("<I", data, 4)
    pos = 8
    meta = parse_kv_text(data[pos:pos + meta_len].decode())
    pos += meta_len
    cfg_keys = set(encoder_config_to_kv(EncoderConfig()))
    cfg = encoder_config_from_kv({k: v for k, v in meta.items() if k in cfg_keys})
    extra = {k: v for k, v in meta.items() if k not in cfg_keys}
    named: dict[str, np.ndarray] = {}
    n = len(data)
    try:
        while pos < n:
            (name_len,) = struct.unpack_from("<H", data, pos)
            pos += 2
            name = data[pos:pos + name_len].decode()
            pos += name_len
            (rank,) = struct.unpack_from("<B", data, pos)
            pos += 1
            dims = np.frombuffer(data, dtype="<u4", count=rank, offset=pos)
            pos += 4 * rank
            count = int(np.prod(dims)) if rank else 1
            arr = np.frombuffer(data, dtype="<f4", count=count, offset=pos)
            pos += 4 * count
            named[name] = arr.reshape(dims).copy()
    except (struct.error, ValueError) as exc:
        raise CheckpointError(f"truncated or corrupt tensor block: {exc}") from None
    if pos != n:
        raise CheckpointError("trailing bytes in checkpoint")
    return cfg, named, extra


def save_checkpoint(path, params: EncoderParams,
                    extra_named: dict[str, np.ndarray] | None = None,
                    extra_meta: dict | None = None) -> None:
    named = dict(named_arrays(params))
    if extra_named:
        named.update(extra_named)
    with open(path, "wb") as fh:
        fh.write(dump_tensors(params.config, named, extra_meta))


def load_checkpoint(path, precision: str | None = None):
    """Returns (EncoderParams, extra tensors, extra metadata)."""
    with open(path, "rb") as fh:
        cfg, named, extra = load_tensors(fh.read())
    if precision:
        from dataclasses import replace
        cfg = replace(cfg, precision=precision)
    enc_names = set(named_arrays_template(cfg))
    enc = {k: v.astype(cfg.dtype) for k, v in named.items() if k in enc_names}
    rest = {k: v for k, v in named.items() if k not in enc_names}
    params = encoder_params_from_named(cfg, enc)
    return params, rest, extra


def named_arrays_template(cfg: EncoderConfig) -> dict[str, tuple]:
    """Names/shapes of the encoder tensors for a config (no allocation of
    the real model needed)."""
    from .params import init_encoder_params
    return {k: v.shape for k, v in named_arrays(init_encoder_params(cfg, seed=0)).items()}
