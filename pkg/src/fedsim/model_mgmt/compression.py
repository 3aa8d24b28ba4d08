"""Update compression with a fixed little-endian wire layout.

Every encoded message is ``header | body``::

    header   u8 scheme (0 none, 1 topk, 2 quantize) | u32 dim | scheme params
      topk      u32 k
      quantize  u8 bits | f64 min | f64 step
    body
      none      dim x f64
      topk      k x (index, f64 value), index is u16 when dim <= 65535 else u32,
                entries sorted by index
      quantize  ceil(dim * bits / 8) bytes of codes; 4-bit codes are packed
                low nibble first, 16-bit codes are u16

``compressed_bytes`` counts the whole message, header included.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from fedsim.core import ParamVector
from fedsim.errors import DecodeError, ParameterError

__all__ = ["CompressedUpdate", "compress", "decompress", "SCHEMES", "quantization_bound"]

SCHEMES = {"none": 0, "topk": 1, "quantize": 2}
_SCHEME_NAMES = {v: k for k, v in SCHEMES.items()}
_QUANT_BITS = (4, 8, 16)
_HEAD = struct.Struct("<BI")
_TOPK = struct.Struct("<I")
_QUANT = struct.Struct("<Bdd")


@dataclass(frozen=True)
class CompressedUpdate:
    scheme: str
    payload: bytes
    original_dim: int
    k: int | None = None
    bits: int | None = None
    scale: float | None = None

    @property
    def original_bytes(self) -> int:
        return 8 * self.original_dim

    @property
    def compressed_bytes(self) -> int:
        return len(self.payload)


def _index_dtype(dim: int) -> str:
    return "<u2" if dim <= 0xFFFF else "<u4"


def quantization_bound(lo: float, hi: float, bits: int) -> float:
    return (hi - lo) / (2 * (2**bits - 1))


def compress(v: ParamVector, scheme: str = "none", *, k: int | None = None, bits: int | None = None) -> CompressedUpdate:
    if scheme not in SCHEMES:
        raise ParameterError(f"unknown compression scheme {scheme!r}")
    x = v.values
    dim = v.dim
    head = _HEAD.pack(SCHEMES[scheme], dim)
    if scheme == "none":
        return CompressedUpdate(scheme, head + x.astype("<f8").tobytes(), dim)

    if scheme == "topk":
        if k is None or not 1 <= k <= dim:
            raise ParameterError(f"topk needs 1 <= k <= dim ({dim}), got {k}")
        # stable sort keeps the lower index on equal magnitude
        keep = np.sort(np.argsort(-np.abs(x), kind="stable")[:k])
        entries = np.empty(k, dtype=[("i", _index_dtype(dim)), ("v", "<f8")])
        entries["i"] = keep
        entries["v"] = x[keep]
        return CompressedUpdate(scheme, head + _TOPK.pack(k) + entries.tobytes(), dim, k=k)

    if bits not in _QUANT_BITS:
        raise ParameterError(f"quantize needs bits in {_QUANT_BITS}, got {bits}")
    lo, hi = float(x.min()), float(x.max())
    levels = 2**bits - 1
    step = (hi - lo) / levels
    if step > 0:
        codes = np.clip(np.rint((x - lo) / step), 0, levels).astype(np.uint32)
    else:
        codes = np.zeros(dim, dtype=np.uint32)
    if bits == 4:
        padded = np.append(codes, 0) if dim % 2 else codes
        body = (padded[0::2] | (padded[1::2] << 4)).astype(np.uint8).tobytes()
    elif bits == 8:
        body = codes.astype(np.uint8).tobytes()
    else:
        body = codes.astype("<u2").tobytes()
    return CompressedUpdate(scheme, head + _QUANT.pack(bits, lo, step) + body, dim, bits=bits, scale=step)


def decompress(c: CompressedUpdate | bytes, version: int = 0) -> ParamVector:
    """Decode a message produced by :func:`compress`; raises ``DecodeError`` on corrupt input."""
    buf = c.payload if isinstance(c, CompressedUpdate) else bytes(c)
    if len(buf) < _HEAD.size:
        raise DecodeError("truncated header")
    code, dim = _HEAD.unpack_from(buf, 0)
    if code not in _SCHEME_NAMES:
        raise DecodeError(f"unknown scheme code {code}")
    if dim == 0:
        raise DecodeError("zero dimension")
    pos = _HEAD.size
    scheme = _SCHEME_NAMES[code]

    if scheme == "none":
        if len(buf) - pos != 8 * dim:
            raise DecodeError(f"expected {8 * dim} payload bytes, found {len(buf) - pos}")
        values = np.frombuffer(buf, dtype="<f8", offset=pos, count=dim)
    elif scheme == "topk":
        if len(buf) < pos + _TOPK.size:
            raise DecodeError("truncated topk header")
        (k,) = _TOPK.unpack_from(buf, pos)
        pos += _TOPK.size
        dt = np.dtype([("i", _index_dtype(dim)), ("v", "<f8")])
        if not 1 <= k <= dim or len(buf) - pos != k * dt.itemsize:
            raise DecodeError("topk payload length does not match k")
        entries = np.frombuffer(buf, dtype=dt, offset=pos, count=k)
        idx = entries["i"].astype(np.int64)
        if (idx >= dim).any() or (np.diff(idx) <= 0).any():
            raise DecodeError("topk indices out of range or not strictly increasing")
        values = np.zeros(dim)
        values[idx] = entries["v"]
    else:
        if len(buf) < pos + _QUANT.size:
            raise DecodeError("truncated quantize header")
        bits, lo, step = _QUANT.unpack_from(buf, pos)
        pos += _QUANT.size
        if bits not in _QUANT_BITS:
            raise DecodeError(f"invalid bit width {bits}")
        nbytes = (dim * bits + 7) // 8
        if len(buf) - pos != nbytes:
            raise DecodeError(f"expected {nbytes} code bytes, found {len(buf) - pos}")
        raw = np.frombuffer(buf, dtype=np.uint8, offset=pos)
        if bits == 4:
            codes = np.empty(raw.size * 2, dtype=np.uint32)
            codes[0::2] = raw & 0x0F
            codes[1::2] = raw >> 4
            codes = codes[:dim]
        elif bits == 8:
            codes = raw.astype(np.uint32)
        else:
            codes = np.frombuffer(buf, dtype="<u2", offset=pos, count=dim).astype(np.uint32)
        values = lo + codes * step
    if not np.all(np.isfinite(values)):
        raise DecodeError("decoded non-finite values")
    return ParamVector(values, version)
