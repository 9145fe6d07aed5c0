"""Token layout of a text+video sequence and the block grid laid over it.

A sequence is text tokens followed by frame-major video tokens. The block
grid chops the token axis into fixed-size blocks (a trailing partial block is
allowed) and records, per block, whether it touches text and which frame its
first video token belongs to.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .errors import ConfigError


class RegionKind(str, Enum):
    TT = "TT"
    TV = "TV"
    VT = "VT"
    VV = "VV"


@dataclass(frozen=True)
class TokenLayout:
    text_tokens: int
    frames: int
    tokens_per_frame: int
    block_size: int = 64

    def __post_init__(self):
        if self.text_tokens < 0:
            raise ConfigError(f"text_tokens must be >= 0, got {self.text_tokens}")
        if self.frames < 0 or self.tokens_per_frame < 0:
            raise ConfigError("frames and tokens_per_frame must be >= 0")
        if self.frames > 0 and self.tokens_per_frame == 0:
            raise ConfigError("frames > 0 requires tokens_per_frame > 0")
        if self.block_size < 1:
            raise ConfigError(f"block_size must be >= 1, got {self.block_size}")
        if self.total_tokens < 1:
            raise ConfigError("layout has no tokens")

    @property
    def video_tokens(self) -> int:
        return self.frames * self.tokens_per_frame

    @property
    def total_tokens(self) -> int:
        return self.text_tokens + self.video_tokens

    @property
    def n_blocks(self) -> int:
        return -(-self.total_tokens // self.block_size)

    def frame_of(self, token: int) -> int:
        """Frame index of a video token; text tokens map to -1."""
        if not 0 <= token < self.total_tokens:
            raise IndexError(f"token {token} out of range [0, {self.total_tokens})")
        if token < self.text_tokens:
            return -1
        return (token - self.text_tokens) // self.tokens_per_frame

    def to_json(self) -> dict:
        return {
            "text_tokens": self.text_tokens,
            "frames": self.frames,
            "tokens_per_frame": self.tokens_per_frame,
            "block_size": self.block_size,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "TokenLayout":
        return cls(
            text_tokens=int(obj["text_tokens"]),
            frames=int(obj["frames"]),
            tokens_per_frame=int(obj["tokens_per_frame"]),
            block_size=int(obj.get("block_size", 64)),
        )


def total_tokens(layout: TokenLayout) -> int:
    return layout.total_tokens


def classify_region(layout: TokenLayout, i: int, j: int) -> RegionKind:
    """Which quadrant of the attention map the (query i, key j) cell falls in."""
    n = layout.total_tokens
    if not (0 <= i < n and 0 <= j < n):
        raise IndexError(f"({i}, {j}) outside the {n}x{n} attention map")
    qt = i < layout.text_tokens
    kt = j < layout.text_tokens
    if qt:
        return RegionKind.TT if kt else RegionKind.TV
    return RegionKind.VT if kt else RegionKind.VV


@dataclass(frozen=True, eq=False)
class BlockGrid:
    """Block decomposition of the token axis.

    bounds[b]..bounds[b+1] is block b's token range. `has_text` marks blocks
    containing any text token; `mixed` marks blocks that straddle the
    text/video border or a frame border; `frame_index` is the frame of the
    block's first video token (-1 for all-text blocks).
    """

    layout: TokenLayout
    bounds: np.ndarray
    has_text: np.ndarray
    mixed: np.ndarray
    frame_index: np.ndarray

    @property
    def n_blocks(self) -> int:
        return len(self.bounds) - 1

    @property
    def forced(self) -> np.ndarray:
        """Blocks whose rows and columns every sparse mask keeps active."""
        return self.has_text | self.mixed

    def block_of(self, token: int) -> int:
        if not 0 <= token < self.layout.total_tokens:
            raise IndexError(f"token {token} out of range")
        return int(np.searchsorted(self.bounds, token, side="right") - 1)

    def block_tokens(self, b: int) -> range:
        if not 0 <= b < self.n_blocks:
            raise IndexError(f"block {b} out of range [0, {self.n_blocks})")
        return range(int(self.bounds[b]), int(self.bounds[b + 1]))


def block_grid(layout: TokenLayout) -> BlockGrid:
    n = layout.total_tokens
    size = layout.block_size
    nb = layout.n_blocks
    bounds = np.minimum(np.arange(nb + 1, dtype=np.int64) * size, n)
    has_text = np.zeros(nb, dtype=bool)
    mixed = np.zeros(nb, dtype=bool)
    frame_index = np.full(nb, -1, dtype=np.int64)
    for b in range(nb):
        t0, t1 = int(bounds[b]), int(bounds[b + 1])
        has_text[b] = t0 < layout.text_tokens
        first_video = max(t0, layout.text_tokens)
        if first_video < t1:
            frame_index[b] = layout.frame_of(first_video)
            straddles_border = t0 < layout.text_tokens
            spans_frames = layout.frame_of(t1 - 1) != frame_index[b]
            mixed[b] = straddles_border or spans_frames
    return BlockGrid(
        layout=layout,
        bounds=bounds,
        has_text=has_text,
        mixed=mixed,
        frame_index=frame_index,
    )
