"""Shared fixtures and independent reference implementations.

The oracles here are deliberately naive (scalar loops, dense [N, N]
materialization) so library results are checked against code with no shared
structure.
"""

import sys

import numpy as np
import pytest

from svdit.layout import TokenLayout, block_grid
from svdit.numerics import make_rng


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    """Replay the acceptance scorecard after the run, past output capture."""
    module = sys.modules.get("test_acceptance")
    lines = getattr(module, "SCORECARD", None)
    if lines:
        terminalreporter.section("acceptance scorecard")
        for line in lines:
            terminalreporter.write_line(line)


def naive_matmul_qk(q, k, scale):
    """Triple-loop scalar oracle for scaled QK^T."""
    b, h, n, d = q.shape
    out = np.zeros((b, h, n, n))
    for bi in range(b):
        for hi in range(h):
            for i in range(n):
                for j in range(n):
                    acc = 0.0
                    for c in range(d):
                        acc += float(q[bi, hi, i, c]) * float(k[bi, hi, j, c])
                    out[bi, hi, i, j] = acc * scale
    return out


def naive_softmax(row):
    """Direct exp/normalize softmax for one 1-D row."""
    row = np.asarray(row, dtype=np.float64)
    shifted = np.exp(row - row.max())
    return shifted / shifted.sum()


def masked_dense_attention(q, k, v, token_mask):
    """Dense oracle: scores to -inf outside the mask, then softmax @ v."""
    d = q.shape[-1]
    scores = np.matmul(q.astype(np.float64), k.astype(np.float64).swapaxes(-1, -2))
    scores /= np.sqrt(d)
    scores = np.where(token_mask[None, None], scores, -np.inf)
    m = scores.max(axis=-1, keepdims=True)
    p = np.exp(scores - m)
    p /= p.sum(axis=-1, keepdims=True)
    return np.matmul(p, v.astype(np.float64)).astype(np.float32)


def random_qkv(seed, b, h, n, d):
    rng = make_rng(seed, 999)
    q = rng.standard_normal((b, h, n, d)).astype(np.float32)
    k = rng.standard_normal((b, h, n, d)).astype(np.float32)
    v = rng.standard_normal((b, h, n, d)).astype(np.float32)
    return q, k, v


@pytest.fixture
def video_grid_8():
    """8 pure-video blocks of 64 tokens: no text, no mixed blocks."""
    return block_grid(TokenLayout(text_tokens=0, frames=8, tokens_per_frame=64, block_size=64))


@pytest.fixture
def video_grid_12():
    """12 pure-video blocks (frame stride = 1 block)."""
    return block_grid(TokenLayout(text_tokens=0, frames=12, tokens_per_frame=64, block_size=64))
