"""BREX weight files: binary, little-endian, CRC-checked.

Layout:

    magic   4 bytes  b"BREX"
    version u32      format version (currently 1)
    hlen    u32      byte length of the UTF-8 JSON header
    header  hlen     JSON: model config, optional head metadata, config hash
    body    raw float32 parameter arrays, C order, little endian, in the
            canonical order: embeddings, blocks in depth order, final norm,
            lm head, then exit heads in tap order (if present)
    crc     u32      CRC32 of the body

Readers reject wrong magic, unsupported version, truncated bodies, and CRC
mismatches.
"""

from __future__ import annotations

import json
import struct
import zlib

import numpy as np

from .errors import FormatError
from .heads import ExitHead, HeadBank, InitMode
from .ioutil import atomic_write_bytes
from .model import Backbone, BlockParams, ModelConfig

MAGIC = b"BREX"
VERSION = 1


def _collect_arrays(model: Backbone, bank: HeadBank | None):
    arrays = [arr for _, arr in model.param_items()]
    if bank is not None:
        arrays.extend(arr for _, arr in bank.param_items())
    return arrays


def save_weights(path, model: Backbone, bank: HeadBank | None = None,
                 lam: float | None = None, config_hash: str | None = None) -> None:
    """Write a BREX file; heads (with their init mode and training lambda)
    are appended after the backbone when a bank is given."""
    header = {
        "format_version": VERSION,
        "config": model.config.to_dict(),
        "config_hash": config_hash,
        "heads": None,
    }
    if bank is not None:
        header["heads"] = {
            "count": len(bank),
            "init_mode": bank.init_mode.value,
            "lambda": lam,
        }
    hjson = json.dumps(header, sort_keys=True).encode("utf-8")
    body = b"".join(
        np.ascontiguousarray(arr, dtype="<f4").tobytes()
        for arr in _collect_arrays(model, bank)
    )
    blob = (MAGIC + struct.pack("<I", VERSION) + struct.pack("<I", len(hjson))
            + hjson + body + struct.pack("<I", zlib.crc32(body)))
    atomic_write_bytes(path, blob)


def _take(buf: memoryview, offset: int, shape, dtype=np.float32):
    n = int(np.prod(shape))
    nbytes = n * 4
    if offset + nbytes > len(buf):
        raise FormatError("weight file body truncated")
    arr = np.frombuffer(buf[offset:offset + nbytes], dtype="<f4").reshape(shape)
    return np.ascontiguousarray(arr, dtype=dtype), offset + nbytes


def load_weights(path) -> tuple[Backbone, HeadBank | None, dict]:
    """Read a BREX file back into a Backbone (and HeadBank when present).

    Returns (model, bank or None, header dict).
    """
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 12 or blob[:4] != MAGIC:
        raise FormatError(f"{path}: not a BREX weight file (bad magic)")
    version = struct.unpack("<I", blob[4:8])[0]
    if version != VERSION:
        raise FormatError(f"{path}: unsupported format version {version}")
    hlen = struct.unpack("<I", blob[8:12])[0]
    if len(blob) < 12 + hlen + 4:
        raise FormatError(f"{path}: truncated header")
    try:
        header = json.loads(blob[12:12 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: unreadable header ({exc})") from exc
    body = blob[12 + hlen:-4]
    crc_stored = struct.unpack("<I", blob[-4:])[0]
    if zlib.crc32(body) != crc_stored:
        raise FormatError(f"{path}: body CRC mismatch")

    config = ModelConfig.from_dict(header["config"])
    d, f, v = config.d_model, config.d_ff, config.vocab_size
    buf = memoryview(body)
    off = 0
    tok_emb, off = _take(buf, off, (v, d))
    pos_emb, off = _take(buf, off, (config.max_seq_len, d))
    blocks = []
    for _ in range(config.n_layers):
        ln1_g, off = _take(buf, off, (d,))
        ln1_b, off = _take(buf, off, (d,))
        wq, off = _take(buf, off, (d, d))
        wk, off = _take(buf, off, (d, d))
        wv, off = _take(buf, off, (d, d))
        wo, off = _take(buf, off, (d, d))
        ln2_g, off = _take(buf, off, (d,))
        ln2_b, off = _take(buf, off, (d,))
        w1, off = _take(buf, off, (d, f))
        w2, off = _take(buf, off, (f, d))
        blocks.append(BlockParams(ln1_g, ln1_b, wq, wk, wv, wo, ln2_g, ln2_b, w1, w2))
    lnf_g, off = _take(buf, off, (d,))
    lnf_b, off = _take(buf, off, (d,))
    lm_head, off = _take(buf, off, (d, v))
    model = Backbone(config, tok_emb, pos_emb, blocks, lnf_g, lnf_b, lm_head)

    bank = None
    meta = header.get("heads")
    if meta:
        mode = InitMode(meta["init_mode"])
        heads = []
        for tap in config.exit_taps:
            ng, off = _take(buf, off, (d,))
            nb, off = _take(buf, off, (d,))
            proj, off = _take(buf, off, (d, v))
            heads.append(ExitHead(tap, ng, nb, proj, mode))
        if meta["count"] != len(heads):
            raise FormatError(
                f"{path}: header says {meta['count']} heads, config taps give {len(heads)}"
            )
        bank = HeadBank(heads, mode)
    if off != len(body):
        raise FormatError(
            f"{path}: {len(body) - off} unexpected trailing bytes in body"
        )
    return model, bank, header
