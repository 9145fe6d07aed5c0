"""Attention kernels: dense reference, block-sparse streaming, head fusion.

The sparse kernel walks one query block at a time and streams over that
block's active key blocks with an online softmax: it keeps a running row
maximum m, a running denominator l, and an output accumulator, rescaling both
by exp(m - m_new) whenever a new key block raises the maximum. Nothing of
size [N, N] is ever allocated; working memory is O(N * block_size + N * d).

All kernels take float32 [batch, heads, tokens, head_dim] tensors, accumulate
in float64, and return float32.
"""

from __future__ import annotations

import tracemalloc
from contextlib import contextmanager
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DegenerateRowError, ShapeError
from .layout import BlockGrid
from .numerics import as_tensor4, matmul_qk, require_finite, softmax_rows
from .patterns import BlockMask, Mode, PatternSpec, build_mask


def _check_qkv(q, k, v):
    q = as_tensor4(q, "q")
    k = as_tensor4(k, "k")
    v = as_tensor4(v, "v")
    if not (q.shape == k.shape == v.shape):
        raise ShapeError(f"q/k/v shapes differ: {q.shape}, {k.shape}, {v.shape}")
    return q, k, v


def dense_attention(q, k, v) -> np.ndarray:
    """softmax(q k^T / sqrt(d)) v with full [N, N] score materialization."""
    q, k, v = _check_qkv(q, k, v)
    probs = softmax_rows(matmul_qk(q, k))
    out = np.matmul(probs.astype(np.float64), v.astype(np.float64))
    return require_finite(out.astype(np.float32), "attention output")


def dense_attention_map(q, k) -> np.ndarray:
    """Row-stochastic [B, H, N, N] attention probabilities (diagnostics only)."""
    q = as_tensor4(q, "q")
    k = as_tensor4(k, "k")
    return softmax_rows(matmul_qk(q, k))


def skip_attention(q, k, v) -> np.ndarray:
    """The SKIP mode: no scores, no softmax, output is exact zeros."""
    q, k, v = _check_qkv(q, k, v)
    return np.zeros_like(q)


def sparse_attention(q, k, v, mask: BlockMask) -> np.ndarray:
    """Block-sparse attention restricted to `mask`'s active block pairs.

    Matches a dense kernel run under the same token mask to float32 round-off
    (and is bitwise equal to the full kernel when every block is active,
    since the streaming order visits blocks left to right either way).
    """
    q, k, v = _check_qkv(q, k, v)
    B, H, N, d = q.shape
    if mask.grid.layout.total_tokens != N:
        raise ShapeError(
            f"mask grid covers {mask.grid.layout.total_tokens} tokens, tensors have {N}"
        )
    if mask.is_skip:
        raise DegenerateRowError("skip mask defines no softmax; use skip_attention")
    if not mask.active.any(axis=1).all():
        raise DegenerateRowError("mask has a query row with no active key blocks")

    scale = 1.0 / np.sqrt(d)
    bounds = mask.grid.bounds
    q64 = q.astype(np.float64)
    k64 = k.astype(np.float64)
    v64 = v.astype(np.float64)
    out = np.empty_like(q)
    for qb in range(mask.grid.n_blocks):
        r0, r1 = int(bounds[qb]), int(bounds[qb + 1])
        rows = r1 - r0
        m = np.full((B, H, rows), -np.inf)
        l = np.zeros((B, H, rows))
        acc = np.zeros((B, H, rows, d))
        for kb in mask.active_key_blocks(qb):
            c0, c1 = int(bounds[kb]), int(bounds[kb + 1])
            s = np.matmul(q64[:, :, r0:r1], k64[:, :, c0:c1].swapaxes(-1, -2))
            s *= scale
            m_new = np.maximum(m, s.max(axis=-1))
            p = np.exp(s - m_new[..., None])
            alpha = np.exp(m - m_new)
            l = l * alpha + p.sum(axis=-1)
            acc = acc * alpha[..., None] + np.matmul(p, v64[:, :, c0:c1])
            m = m_new
        out[:, :, r0:r1] = (acc / l[..., None]).astype(np.float32)
    return require_finite(out, "attention output")


def full_mask_attention(q, k, v, grid: BlockGrid) -> np.ndarray:
    """The streaming kernel with every block active (the FULL baseline that
    sparse candidates are scored against, so comparisons share one code path)."""
    full = BlockMask(grid=grid, active=np.ones((grid.n_blocks,) * 2, dtype=bool))
    return sparse_attention(q, k, v, full)


def block_key_mass(q, k, grid: BlockGrid) -> np.ndarray:
    """Per-head attention mass landing on each key block: [B, H, n_blocks].

    Streams with the same online-softmax recurrence as the sparse kernel, so
    no [N, N] map is built; per query block only a [rows, n_blocks] partial
    lives at once. The result sums to 1 per (batch, head).
    """
    q = as_tensor4(q, "q")
    k = as_tensor4(k, "k")
    if q.shape != k.shape:
        raise ShapeError(f"q and k shapes differ: {q.shape} vs {k.shape}")
    B, H, N, d = q.shape
    if grid.layout.total_tokens != N:
        raise ShapeError(f"grid covers {grid.layout.total_tokens} tokens, tensors have {N}")
    scale = 1.0 / np.sqrt(d)
    bounds = grid.bounds
    q64 = q.astype(np.float64)
    k64 = k.astype(np.float64)
    mass = np.zeros((B, H, grid.n_blocks))
    for qb in range(grid.n_blocks):
        r0, r1 = int(bounds[qb]), int(bounds[qb + 1])
        rows = r1 - r0
        m = np.full((B, H, rows), -np.inf)
        l = np.zeros((B, H, rows))
        partial = np.zeros((B, H, rows, grid.n_blocks))
        for kb in range(grid.n_blocks):
            c0, c1 = int(bounds[kb]), int(bounds[kb + 1])
            s = np.matmul(q64[:, :, r0:r1], k64[:, :, c0:c1].swapaxes(-1, -2))
            s *= scale
            m_new = np.maximum(m, s.max(axis=-1))
            p = np.exp(s - m_new[..., None])
            alpha = np.exp(m - m_new)
            block_total = p.sum(axis=-1)
            l = l * alpha + block_total
            partial *= alpha[..., None]
            partial[:, :, :, kb] = block_total
            m = m_new
        mass += (partial / l[..., None]).sum(axis=2)
    return mass / N


@dataclass(frozen=True, eq=False)
class HeadGroup:
    """Heads of one layer sharing a pattern, ready for a fused kernel call."""

    spec: PatternSpec
    heads: tuple[int, ...]
    mask: BlockMask | None

    def __post_init__(self):
        if not self.heads:
            raise ConfigError("head group must contain at least one head")
        if len(set(self.heads)) != len(self.heads):
            raise ConfigError(f"duplicate heads in group: {self.heads}")


def group_heads(assignment, grid: BlockGrid) -> list[HeadGroup]:
    """Fuse same-pattern heads: one group (and one mask build) per distinct spec.

    `assignment` is a sequence of PatternSpec, one per head. Groups come back
    ordered by first head occurrence; together they partition the heads.
    """
    order: list[PatternSpec] = []
    members: dict[PatternSpec, list[int]] = {}
    for h, spec in enumerate(assignment):
        if spec not in members:
            members[spec] = []
            order.append(spec)
        members[spec].append(h)
    groups = []
    for spec in order:
        mask = None
        if spec.mode not in (Mode.FULL, Mode.SKIP):
            mask = build_mask(spec, grid)
        groups.append(HeadGroup(spec=spec, heads=tuple(members[spec]), mask=mask))
    return groups


def fused_layer_attention(q, k, v, groups) -> np.ndarray:
    """Run one layer's attention with heads dispatched per group.

    Groups must partition range(H) exactly. Per-head outputs are identical to
    running that head alone, because batching same-mask heads only widens the
    head axis of each kernel call.
    """
    q, k, v = _check_qkv(q, k, v)
    B, H, N, d = q.shape
    seen: list[int] = []
    for g in groups:
        seen.extend(g.heads)
    if sorted(seen) != list(range(H)):
        raise ConfigError(f"groups cover heads {sorted(seen)}, tensors have {H} heads")

    out = np.empty_like(q)
    for g in groups:
        idx = list(g.heads)
        qs, ks, vs = q[:, idx], k[:, idx], v[:, idx]
        if g.spec.mode is Mode.FULL:
            res = dense_attention(qs, ks, vs)
        elif g.spec.mode is Mode.SKIP:
            res = skip_attention(qs, ks, vs)
        else:
            res = sparse_attention(qs, ks, vs, g.mask)
        out[:, idx] = res
    return out


@dataclass
class AllocationProbe:
    """Peak Python-side allocation (bytes) observed inside an allocation_probe block."""

    peak_bytes: int = 0


@contextmanager
def allocation_probe():
    """Track peak allocations under tracemalloc for the enclosed block.

    Only allocations made inside the block count; arrays created before
    entering are part of the baseline. Numpy buffers route through the traced
    allocator, so an accidental [N, N] materialization shows up immediately.
    """
    probe = AllocationProbe()
    was_tracing = tracemalloc.is_tracing()
    if not was_tracing:
        tracemalloc.start()
    baseline, _ = tracemalloc.get_traced_memory()
    tracemalloc.reset_peak()
    try:
        yield probe
    finally:
        _, peak = tracemalloc.get_traced_memory()
        probe.peak_bytes = max(0, peak - baseline)
        if not was_tracing:
            tracemalloc.stop()
