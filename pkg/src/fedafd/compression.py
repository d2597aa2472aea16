"""Payload codecs: raw float64, Hadamard-rotated 8-bit quantization, and
top-k sparsification with momentum correction and residual accumulation.

Wire layout (all little-endian; what ``to_wire`` emits and
``payload_size_bytes`` counts):

* ``RAW``     ``n`` float64 values.
* ``QUANT8``  float64 min, float64 max, then ``padded_n`` uint8 levels.
* ``TOPK``    uint32 original length, uint32 k, ``k`` uint32 indices, ``k`` float64 values.

Tensor shape and the sign-flip seed travel out of band (the receiver knows
the sub-model architecture and the round seed).
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

LEVELS = 256
_Q8_HEADER = struct.Struct("<dd")
_TOPK_HEADER = struct.Struct("<II")


class Codec(enum.Enum):
    RAW = "raw"
    QUANT8 = "quant8_hadamard"
    TOPK = "topk_sparse"


@dataclass(frozen=True)
class CompressedBlob:
    codec: Codec
    payload: bytes
    meta: dict = field(default_factory=dict)


def next_pow2(n: int) -> int:
    return 1 if n <= 1 else 1 << (n - 1).bit_length()


# -- Hadamard rotation -------------------------------------------------------


def fwht(v: np.ndarray) -> np.ndarray:
    """Unnormalized fast Walsh-Hadamard transform (Sylvester ordering)."""
    n = v.shape[0]
    if n & (n - 1):
        raise ValueError(f"length {n} is not a power of two")
    y = np.array(v, dtype=np.float64)
    h = 1
    while h < n:
        y = y.reshape(-1, 2, h)
        y = np.stack((y[:, 0] + y[:, 1], y[:, 0] - y[:, 1]), axis=1)
        h *= 2
    return y.reshape(n)


def sign_flips(n: int, sign_seed: int | None) -> np.ndarray:
    if sign_seed is None:
        return np.ones(n)
    return np.random.default_rng(sign_seed).integers(0, 2, size=n) * 2.0 - 1.0


def hadamard_rotate(x: np.ndarray, sign_seed: int | None) -> np.ndarray:
    """Zero-pad to a power of two, flip signs, apply the orthonormal Hadamard map."""
    x = np.asarray(x, dtype=np.float64).ravel()
    n = next_pow2(x.size)
    padded = np.zeros(n)
    padded[: x.size] = x
    return fwht(padded * sign_flips(n, sign_seed)) / np.sqrt(n)


def hadamard_unrotate(y: np.ndarray, sign_seed: int | None, length: int | None = None) -> np.ndarray:
    n = y.shape[0]
    x = fwht(y) / np.sqrt(n) * sign_flips(n, sign_seed)
    return x if length is None else x[:length]


# -- uniform 8-bit quantizer -------------------------------------------------


def quantize_uniform(y: np.ndarray) -> tuple[np.ndarray, float, float]:
    lo, hi = float(y.min()), float(y.max())
    if hi == lo:
        return np.zeros(y.shape, dtype=np.uint8), lo, hi
    scale = (hi - lo) / (LEVELS - 1)
    q = np.clip(np.rint((y - lo) / scale), 0, LEVELS - 1).astype(np.uint8)
    return q, lo, hi


def dequantize_uniform(q: np.ndarray, lo: float, hi: float) -> np.ndarray:
    if hi == lo:
        return np.full(q.shape, lo)
    return lo + q.astype(np.float64) * ((hi - lo) / (LEVELS - 1))


def quant8_encode(t: np.ndarray, sign_seed: int | None) -> CompressedBlob:
    """Rotate then quantize to 256 levels over the rotated min/max.

    A constant tensor is sent as its value alone (zero-width range, no rotation).
    """
    t = np.asarray(t, dtype=np.float64)
    flat = t.ravel()
    n_pad = next_pow2(flat.size)
    meta = {"shape": t.shape, "n": flat.size, "seed": sign_seed}
    if flat.size == 0 or flat.min() == flat.max():
        c = float(flat[0]) if flat.size else 0.0
        return CompressedBlob(Codec.QUANT8, bytes(n_pad), {**meta, "min": c, "max": c})
    q, lo, hi = quantize_uniform(hadamard_rotate(flat, sign_seed))
    return CompressedBlob(Codec.QUANT8, q.tobytes(), {**meta, "min": lo, "max": hi})


def quant8_decode(blob: CompressedBlob) -> np.ndarray:
    m = blob.meta
    if m["min"] == m["max"]:
        return np.full(m["shape"], m["min"])
    q = np.frombuffer(blob.payload, dtype=np.uint8)
    y = dequantize_uniform(q, m["min"], m["max"])
    return hadamard_unrotate(y, m["seed"], m["n"]).reshape(m["shape"])


# -- raw ---------------------------------------------------------------------


def raw_encode(t: np.ndarray) -> CompressedBlob:
    t = np.asarray(t, dtype=np.float64)
    return CompressedBlob(Codec.RAW, t.astype("<f8").tobytes(), {"shape": t.shape})


def raw_decode(blob: CompressedBlob) -> np.ndarray:
    return np.frombuffer(blob.payload, dtype="<f8").astype(np.float64).reshape(blob.meta["shape"])


# -- top-k sparsification with momentum correction ---------------------------


@dataclass
class DgcState:
    """Per-client sparsifier memory.

    ``residual`` is the locally accumulated, not yet transmitted update and
    ``velocity`` the momentum-corrected gradient; both are ``None`` until the
    first encode and must be reset when the client's sub-model changes.
    """

    ratio: float = 0.25
    clip_norm: float = 1.0
    momentum: float = 0.9
    residual: list | None = None
    velocity: list | None = None

    def reset(self) -> "DgcState":
        return DgcState(self.ratio, self.clip_norm, self.momentum)


def topk_count(n: int, ratio: float) -> int:
    return min(n, max(1, int(np.floor(ratio * n + 0.5))))


def clip_global(grads: Sequence[np.ndarray], clip_norm: float) -> list[np.ndarray]:
    norm = np.sqrt(sum(float(np.sum(g * g)) for g in grads))
    if norm > clip_norm:
        return [g * (clip_norm / norm) for g in grads]
    return [np.array(g, dtype=np.float64) for g in grads]


def topk_encode(values: np.ndarray, k: int) -> tuple[CompressedBlob, np.ndarray]:
    """Keep the ``k`` largest-magnitude entries (ties: lowest index first)."""
    flat = values.ravel()
    idx = np.sort(np.argsort(-np.abs(flat), kind="stable")[:k])
    payload = idx.astype("<u4").tobytes() + flat[idx].astype("<f8").tobytes()
    return CompressedBlob(Codec.TOPK, payload, {"shape": values.shape, "n": flat.size, "k": len(idx)}), idx


def topk_decode(blob: CompressedBlob) -> np.ndarray:
    k = blob.meta["k"]
    idx = np.frombuffer(blob.payload, dtype="<u4", count=k)
    vals = np.frombuffer(blob.payload, dtype="<f8", count=k, offset=4 * k)
    out = np.zeros(blob.meta["n"])
    out[idx] = vals
    return out.reshape(blob.meta["shape"])


def dgc_encode(grads: Sequence[np.ndarray], state: DgcState) -> tuple[list[CompressedBlob], DgcState]:
    """Clip, apply momentum, accumulate, and send the top fraction of the accumulator.

    Returns one sparse blob per tensor and the updated state; transmitted
    coordinates are zeroed in the residual.
    """
    if not 0.0 < state.ratio <= 1.0:
        raise ValueError(f"sparsity ratio must be in (0, 1], got {state.ratio}")
    if state.clip_norm <= 0:
        raise ValueError("clip_norm must be positive")
    shapes = [np.shape(g) for g in grads]
    for name, acc in (("residual", state.residual), ("velocity", state.velocity)):
        if acc is not None and [a.shape for a in acc] != shapes:
            raise ValueError(f"{name} shapes {[a.shape for a in acc]} do not match gradients {shapes}")

    g = clip_global(grads, state.clip_norm)
    u_prev = state.velocity or [np.zeros(s) for s in shapes]
    r_prev = state.residual or [np.zeros(s) for s in shapes]
    velocity = [state.momentum * u + gi for u, gi in zip(u_prev, g)]
    residual = [r + u for r, u in zip(r_prev, velocity)]

    blobs = []
    for acc in residual:
        blob, idx = topk_encode(acc, topk_count(acc.size, state.ratio))
        acc.reshape(-1)[idx] = 0.0
        blobs.append(blob)
    return blobs, DgcState(state.ratio, state.clip_norm, state.momentum, residual, velocity)


# -- generic -----------------------------------------------------------------


def decode(blob: CompressedBlob) -> np.ndarray:
    if blob.codec is Codec.RAW:
        return raw_decode(blob)
    if blob.codec is Codec.QUANT8:
        return quant8_decode(blob)
    return topk_decode(blob)


def payload_size_bytes(blob: CompressedBlob) -> int:
    """Bytes on the wire: RAW 8n, QUANT8 padded_n + 16, TOPK 12k + 8."""
    if blob.codec is Codec.RAW:
        return len(blob.payload)
    if blob.codec is Codec.QUANT8:
        return len(blob.payload) + _Q8_HEADER.size
    return len(blob.payload) + _TOPK_HEADER.size


def to_wire(blob: CompressedBlob) -> bytes:
    if blob.codec is Codec.RAW:
        return blob.payload
    if blob.codec is Codec.QUANT8:
        return _Q8_HEADER.pack(blob.meta["min"], blob.meta["max"]) + blob.payload
    return _TOPK_HEADER.pack(blob.meta["n"], blob.meta["k"]) + blob.payload


def from_wire(codec: Codec, data: bytes, shape: tuple[int, ...], sign_seed: int | None = None) -> CompressedBlob:
    """Rebuild a blob from wire bytes plus the out-of-band shape (and seed)."""
    n = int(np.prod(shape))
    if codec is Codec.RAW:
        if len(data) != 8 * n:
            raise ValueError(f"raw payload of {len(data)} bytes for {n} values")
        return CompressedBlob(codec, bytes(data), {"shape": tuple(shape)})
    if codec is Codec.QUANT8:
        lo, hi = _Q8_HEADER.unpack_from(data)
        payload = bytes(data[_Q8_HEADER.size :])
        if len(payload) != next_pow2(n):
            raise ValueError(f"quant8 payload of {len(payload)} bytes for {n} values")
        return CompressedBlob(
            codec, payload, {"shape": tuple(shape), "n": n, "seed": sign_seed, "min": lo, "max": hi}
        )
    n_wire, k = _TOPK_HEADER.unpack_from(data)
    payload = bytes(data[_TOPK_HEADER.size :])
    if n_wire != n or len(payload) != 12 * k:
        raise ValueError("top-k payload does not match its header")
    return CompressedBlob(codec, payload, {"shape": tuple(shape), "n": n, "k": k})
