"""Dense numeric substrate: batched QK^T, stable row softmax, MSE, seeded
RNG streams, and the binary tensor container used by the CLI.

Attention tensors follow the [batch, heads, tokens, head_dim] convention and
are float32 at rest; dot products and reductions accumulate in float64 before
results are cast back to float32.
"""

from __future__ import annotations

import struct

import numpy as np

from .errors import DegenerateRowError, FormatError, ShapeError

MAGIC = b"SVDT"

# Hard cap on any single dimension read back from a binary header, so a
# corrupt file cannot trigger an absurd allocation.
_MAX_DIM = 1 << 28


def _mix64(state: int, word: int) -> int:
    """One splitmix64 round folding `word` into `state` (both mod 2**64)."""
    z = (state + 0x9E3779B97F4A7C15 + word) & 0xFFFFFFFFFFFFFFFF
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & 0xFFFFFFFFFFFFFFFF
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & 0xFFFFFFFFFFFFFFFF
    return z ^ (z >> 31)


def make_rng(seed: int, *stream: int) -> np.random.Generator:
    """Deterministic generator for a (seed, substream...) address.

    Built on counter-based Philox keyed with the seed and a hash of the
    substream words, so any (seed, stream) address yields the same values on
    every platform and is statistically independent of every other address.
    """
    sub = 0
    for word in stream:
        sub = _mix64(sub, int(word))
    key = np.array([int(seed) & 0xFFFFFFFFFFFFFFFF, sub], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def as_tensor4(x, name: str = "tensor") -> np.ndarray:
    """Validate and return `x` as a float32 [batch, heads, tokens, dim] array."""
    arr = np.asarray(x)
    if arr.ndim != 4:
        raise ShapeError(f"{name} must have rank 4 [B, H, N, d], got rank {arr.ndim}")
    if arr.dtype != np.float32:
        arr = arr.astype(np.float32)
    return arr


def require_finite(arr: np.ndarray, what: str) -> np.ndarray:
    """Raise ShapeError if `arr` contains NaN or Inf; otherwise return it."""
    if not np.isfinite(arr).all():
        raise ShapeError(f"non-finite values in {what}")
    return arr


def matmul_qk(q, k, scale: float | None = None) -> np.ndarray:
    """Scaled score matrix q @ k^T over the trailing two axes.

    q, k: float32 [B, H, N, d]. The product runs in float64 and the result is
    cast back to float32. `scale` defaults to 1/sqrt(d).
    """
    q = as_tensor4(q, "q")
    k = as_tensor4(k, "k")
    if q.shape != k.shape:
        raise ShapeError(f"q and k shapes differ: {q.shape} vs {k.shape}")
    d = q.shape[-1]
    if scale is None:
        scale = 1.0 / np.sqrt(d)
    if not scale > 0:
        raise ShapeError(f"scale must be positive, got {scale}")
    scores = np.matmul(q.astype(np.float64), k.astype(np.float64).swapaxes(-1, -2))
    scores *= scale
    out = scores.astype(np.float32)
    return require_finite(out, "attention scores")


def softmax_rows(scores, mask: np.ndarray | None = None) -> np.ndarray:
    """Numerically stable softmax along the last axis.

    `mask`, when given, is a boolean array broadcastable to `scores` (a block
    mask object exposing token_mask() also works); masked entries come out
    exactly 0.0 and active entries renormalize over the surviving set. A row
    with no active entry raises DegenerateRowError. Accepts a single row
    (rank 1) or any batch of rows.
    """
    s = np.asarray(scores, dtype=np.float64)
    squeeze = s.ndim == 1
    if squeeze:
        s = s[None, :]
    if mask is not None:
        if hasattr(mask, "token_mask"):
            mask = mask.token_mask()
        active = np.broadcast_to(np.asarray(mask, dtype=bool), s.shape)
        s = np.where(active, s, -np.inf)
    m = s.max(axis=-1, keepdims=True)
    if not np.isfinite(m).all():
        raise DegenerateRowError("softmax row has no active entries")
    p = np.exp(s - m)
    if mask is not None:
        p = np.where(active, p, 0.0)
    out = (p / p.sum(axis=-1, keepdims=True)).astype(np.float32)
    if squeeze:
        out = out[0]
    return out


def mse(a, b) -> float:
    """Mean squared error between two equal-shaped arrays, accumulated in float64."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise ShapeError(f"mse operands differ in shape: {a.shape} vs {b.shape}")
    diff = a.astype(np.float64) - b.astype(np.float64)
    return float(np.mean(diff * diff)) if diff.size else 0.0


def save_tensor(path, array) -> None:
    """Write a rank-4 float32 tensor as magic 'SVDT', four little-endian u32
    dims, then the row-major float32 payload."""
    arr = np.asarray(array)
    if arr.ndim != 4:
        raise ShapeError(f"tensor container stores rank-4 arrays, got rank {arr.ndim}")
    arr = np.ascontiguousarray(arr, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<4I", *arr.shape))
        fh.write(arr.tobytes())


def load_tensor(path) -> np.ndarray:
    """Read a tensor written by save_tensor, validating magic and payload size."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 20:
        raise FormatError(f"{path}: header truncated ({len(blob)} bytes)")
    if blob[:4] != MAGIC:
        raise FormatError(f"{path}: bad magic {blob[:4]!r}, expected {MAGIC!r}")
    shape = struct.unpack("<4I", blob[4:20])
    if any(dim > _MAX_DIM for dim in shape):
        raise FormatError(f"{path}: implausible dimensions {shape}")
    count = int(np.prod(shape, dtype=np.int64))
    expected = 20 + 4 * count
    if len(blob) != expected:
        raise FormatError(
            f"{path}: payload size {len(blob) - 20} does not match dims {shape}"
        )
    data = np.frombuffer(blob, dtype="<f4", offset=20, count=count)
    return data.reshape(shape).astype(np.float32)
