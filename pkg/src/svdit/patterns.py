"""Structured block-sparse attention patterns and their masks.

Five modes over the block grid:

* FULL             every block pair active (sparsity exactly 0)
* SKIP             nothing computed, output is zeros (sparsity exactly 1)
* DIAGONAL         |query block - key block| <= halfwidth
* MULTI_DIAGONAL   diagonals repeating with a fixed block period, each
                   widened by a halfwidth (the main diagonal is the 0th)
* VERTICAL_STRIPE  a set of key-block columns, optionally unioned with the
                   main diagonal

Rows and columns of blocks that contain text tokens or straddle a text/frame
border stay active in every sparse mask, so cross-modal scores are never
dropped by a structural pattern.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from enum import IntEnum

import numpy as np

from .errors import ConfigError, DegenerateMaskError, FormatError, ShapeError
from .layout import BlockGrid

MODE_NAMES = ("full", "skip", "diagonal", "multi_diagonal", "vertical_stripe")


class Mode(IntEnum):
    FULL = 0
    SKIP = 1
    DIAGONAL = 2
    MULTI_DIAGONAL = 3
    VERTICAL_STRIPE = 4

    @property
    def label(self) -> str:
        return MODE_NAMES[self]

    @classmethod
    def from_label(cls, name: str) -> "Mode":
        try:
            return cls(MODE_NAMES.index(name))
        except ValueError:
            raise ConfigError(f"unknown mode {name!r}, expected one of {MODE_NAMES}")


@dataclass(frozen=True)
class PatternSpec:
    """Geometry of one pattern. Fields not used by `mode` are ignored.

    For VERTICAL_STRIPE, `stripes` holds resolved key-block columns; specs
    fresh out of PatternParams carry stripes=None until a calibration pass
    picks the heaviest columns.
    """

    mode: Mode
    halfwidth: int = 1
    period: int | None = None
    md_halfwidth: int = 0
    stripe_count: int = 2
    stripes: tuple[int, ...] | None = None
    include_diagonal: bool = True

    def __post_init__(self):
        if self.halfwidth < 0 or self.md_halfwidth < 0:
            raise ConfigError("halfwidth must be >= 0")
        if self.period is not None and self.period < 1:
            raise ConfigError(f"period must be >= 1, got {self.period}")
        if self.stripe_count < 1:
            raise ConfigError(f"stripe_count must be >= 1, got {self.stripe_count}")
        if self.stripes is not None:
            object.__setattr__(self, "stripes", tuple(sorted(set(int(s) for s in self.stripes))))

    def to_json(self) -> dict:
        obj = {"mode": self.mode.label}
        if self.mode is Mode.DIAGONAL:
            obj["halfwidth"] = self.halfwidth
        elif self.mode is Mode.MULTI_DIAGONAL:
            obj["period"] = self.period
            obj["md_halfwidth"] = self.md_halfwidth
        elif self.mode is Mode.VERTICAL_STRIPE:
            obj["stripe_count"] = self.stripe_count
            obj["include_diagonal"] = self.include_diagonal
            if self.stripes is not None:
                obj["stripes"] = list(self.stripes)
        return obj

    @classmethod
    def from_json(cls, obj: dict) -> "PatternSpec":
        mode = Mode.from_label(obj["mode"])
        stripes = obj.get("stripes")
        return cls(
            mode=mode,
            halfwidth=int(obj.get("halfwidth", 1)),
            period=obj.get("period"),
            md_halfwidth=int(obj.get("md_halfwidth", 0)),
            stripe_count=int(obj.get("stripe_count", 2)),
            stripes=tuple(stripes) if stripes is not None else None,
            include_diagonal=bool(obj.get("include_diagonal", True)),
        )


def full_spec() -> PatternSpec:
    return PatternSpec(mode=Mode.FULL)


def skip_spec() -> PatternSpec:
    return PatternSpec(mode=Mode.SKIP)


def diagonal_spec(halfwidth: int = 1) -> PatternSpec:
    return PatternSpec(mode=Mode.DIAGONAL, halfwidth=halfwidth)


def multi_diagonal_spec(period: int | None = None, md_halfwidth: int = 0) -> PatternSpec:
    return PatternSpec(mode=Mode.MULTI_DIAGONAL, period=period, md_halfwidth=md_halfwidth)


def vertical_stripe_spec(
    stripe_count: int = 2,
    stripes=None,
    include_diagonal: bool = True,
) -> PatternSpec:
    return PatternSpec(
        mode=Mode.VERTICAL_STRIPE,
        stripe_count=stripe_count,
        stripes=tuple(stripes) if stripes is not None else None,
        include_diagonal=include_diagonal,
    )


@dataclass(frozen=True)
class PatternParams:
    """Shared pattern geometry used when instantiating all candidate modes."""

    diagonal_halfwidth: int = 1
    md_period: int | None = None  # None: derived as frame stride in blocks
    md_halfwidth: int = 0
    stripe_count: int = 2
    include_diagonal: bool = True

    def spec_for(self, mode: Mode, stripes=None) -> PatternSpec:
        if mode is Mode.FULL:
            return full_spec()
        if mode is Mode.SKIP:
            return skip_spec()
        if mode is Mode.DIAGONAL:
            return diagonal_spec(self.diagonal_halfwidth)
        if mode is Mode.MULTI_DIAGONAL:
            return multi_diagonal_spec(self.md_period, self.md_halfwidth)
        return vertical_stripe_spec(self.stripe_count, stripes, self.include_diagonal)

    def to_json(self) -> dict:
        return {
            "diagonal_halfwidth": self.diagonal_halfwidth,
            "md_period": self.md_period,
            "md_halfwidth": self.md_halfwidth,
            "stripe_count": self.stripe_count,
            "include_diagonal": self.include_diagonal,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "PatternParams":
        return cls(
            diagonal_halfwidth=int(obj.get("diagonal_halfwidth", 1)),
            md_period=obj.get("md_period"),
            md_halfwidth=int(obj.get("md_halfwidth", 0)),
            stripe_count=int(obj.get("stripe_count", 2)),
            include_diagonal=bool(obj.get("include_diagonal", True)),
        )


def frame_period(grid: BlockGrid) -> int:
    """Default multi-diagonal period: one frame measured in blocks,
    rounded to the nearest whole block and clamped to at least 1."""
    tpf = grid.layout.tokens_per_frame
    size = grid.layout.block_size
    return max(1, round(tpf / size))


@dataclass(frozen=True, eq=False)
class BlockMask:
    """Boolean block grid of active (query block, key block) pairs.

    `active` is None for SKIP: nothing is computed and the attention output
    is defined as zeros, which is not expressible as a softmax mask.
    """

    grid: BlockGrid
    active: np.ndarray | None

    @property
    def is_skip(self) -> bool:
        return self.active is None

    @property
    def sparsity(self) -> float:
        if self.active is None:
            return 1.0
        return 1.0 - float(np.count_nonzero(self.active)) / self.active.size

    def active_key_blocks(self, qb: int) -> np.ndarray:
        if self.active is None:
            return np.empty(0, dtype=np.int64)
        return np.flatnonzero(self.active[qb])

    def token_mask(self) -> np.ndarray:
        """Expand to a [N, N] boolean token mask (all False for SKIP)."""
        n = self.grid.layout.total_tokens
        if self.active is None:
            return np.zeros((n, n), dtype=bool)
        sizes = np.diff(self.grid.bounds)
        return np.repeat(np.repeat(self.active, sizes, axis=0), sizes, axis=1)


def build_mask(spec: PatternSpec, grid: BlockGrid) -> BlockMask:
    """Realize a pattern spec as a block mask over `grid`.

    Text/mixed block rows and columns are forced active for every sparse
    mode. An all-inactive query row raises DegenerateMaskError.
    """
    nb = grid.n_blocks
    if spec.mode is Mode.SKIP:
        return BlockMask(grid=grid, active=None)
    if spec.mode is Mode.FULL:
        return BlockMask(grid=grid, active=np.ones((nb, nb), dtype=bool))

    idx = np.arange(nb)
    offset = idx[:, None] - idx[None, :]
    if spec.mode is Mode.DIAGONAL:
        active = np.abs(offset) <= spec.halfwidth
    elif spec.mode is Mode.MULTI_DIAGONAL:
        period = spec.period if spec.period is not None else frame_period(grid)
        folded = np.abs(offset) % period
        active = (folded <= spec.md_halfwidth) | (period - folded <= spec.md_halfwidth)
    else:
        if spec.stripes is None:
            raise ConfigError(
                "vertical-stripe spec has no resolved stripe columns; "
                "pass stripes=... or let the search pick them"
            )
        active = np.zeros((nb, nb), dtype=bool)
        for col in spec.stripes:
            if not 0 <= col < nb:
                raise ConfigError(f"stripe column {col} outside grid of {nb} blocks")
            active[:, col] = True
        if spec.include_diagonal:
            active |= offset == 0

    forced = grid.forced
    active[forced, :] = True
    active[:, forced] = True
    if not active.any(axis=1).all():
        empty = int(np.flatnonzero(~active.any(axis=1))[0])
        raise DegenerateMaskError(f"query block {empty} has no active key blocks")
    return BlockMask(grid=grid, active=active)


def sparsity(spec: PatternSpec, grid: BlockGrid) -> float:
    """Fraction of inactive block pairs; exactly 0.0 for FULL and 1.0 for SKIP."""
    if spec.mode is Mode.SKIP:
        return 1.0
    return build_mask(spec, grid).sparsity


def block_sums(attention_map: np.ndarray, grid: BlockGrid) -> np.ndarray:
    """Fold an [N, N] map into per-block-pair sums via the grid bounds."""
    a = np.asarray(attention_map, dtype=np.float64)
    n = grid.layout.total_tokens
    if a.shape != (n, n):
        raise ShapeError(f"attention map must be [{n}, {n}], got {a.shape}")
    starts = grid.bounds[:-1]
    folded = np.add.reduceat(np.add.reduceat(a, starts, axis=0), starts, axis=1)
    return folded


def pattern_mass_coverage(attention_map: np.ndarray, spec: PatternSpec, grid: BlockGrid) -> float:
    """Fraction of total attention mass captured by the pattern's active blocks.

    SKIP covers nothing (0.0); FULL covers everything (1.0).
    """
    folded = block_sums(attention_map, grid)
    total = float(folded.sum())
    if total <= 0:
        raise ShapeError("attention map has no mass")
    mask = build_mask(spec, grid)
    if mask.is_skip:
        return 0.0
    return float(folded[mask.active].sum()) / total


def to_pgm(values: np.ndarray) -> bytes:
    """Encode a 2-D uint8 array as a binary (P5) PGM image."""
    arr = np.asarray(values, dtype=np.uint8)
    if arr.ndim != 2:
        raise ShapeError(f"PGM payload must be 2-D, got rank {arr.ndim}")
    header = f"P5\n{arr.shape[1]} {arr.shape[0]}\n255\n".encode("ascii")
    return header + arr.tobytes()


def mask_to_pgm(mask: BlockMask) -> bytes:
    """Render a block mask as PGM: active blocks white (255), inactive black."""
    nb = mask.grid.n_blocks
    if mask.active is None:
        img = np.zeros((nb, nb), dtype=np.uint8)
    else:
        img = np.where(mask.active, 255, 0).astype(np.uint8)
    return to_pgm(img)


def map_to_pgm(attention_map: np.ndarray) -> bytes:
    """Render an attention map as PGM, scaled so the peak value maps to 255."""
    a = np.asarray(attention_map, dtype=np.float64)
    if a.ndim != 2:
        raise ShapeError(f"attention map must be 2-D, got rank {a.ndim}")
    peak = a.max()
    scaled = np.zeros_like(a) if peak <= 0 else a * (255.0 / peak)
    return to_pgm(np.clip(scaled, 0, 255).astype(np.uint8))


def pgm_to_array(blob: bytes) -> np.ndarray:
    """Decode a binary (P5) PGM produced by to_pgm back into a uint8 array."""
    parts = blob.split(b"\n", 3)
    if len(parts) != 4 or parts[0] != b"P5":
        raise FormatError("not a binary PGM stream")
    try:
        width, height = (int(tok) for tok in parts[1].split())
        maxval = int(parts[2])
    except ValueError:
        raise FormatError("malformed PGM header")
    if maxval != 255:
        raise FormatError(f"unsupported PGM maxval {maxval}")
    data = np.frombuffer(parts[3], dtype=np.uint8, count=width * height)
    return data.reshape(height, width).copy()


def default_sparse_specs(params: PatternParams | None = None) -> tuple[PatternSpec, ...]:
    """The four sparse candidates (SKIP, DIAGONAL, MULTI_DIAGONAL, VERTICAL_STRIPE)."""
    params = params or PatternParams()
    return tuple(
        params.spec_for(mode)
        for mode in (Mode.SKIP, Mode.DIAGONAL, Mode.MULTI_DIAGONAL, Mode.VERTICAL_STRIPE)
    )


def with_stripes(spec: PatternSpec, stripes) -> PatternSpec:
    return replace(spec, stripes=tuple(stripes))
