"""Block-sparse multi-head attention with an offline per-head pattern search.

The package provides structured sparse attention kernels over a block grid
(full, skip, diagonal, multi-diagonal, vertical-stripe), a loss-driven
offline search that assigns one pattern per (step, layer, head) of a toy
video diffusion transformer, same-pattern head fusion, a FLOP cost model,
and PSNR/SSIM quality reporting, plus a CLI tying them together.
"""

__version__ = "0.1.0"

from .errors import (
    ConfigError,
    DegenerateMaskError,
    DegenerateRowError,
    FormatError,
    PlantError,
    ShapeError,
    SvditError,
)
from .numerics import load_tensor, make_rng, matmul_qk, mse, save_tensor, softmax_rows
from .layout import BlockGrid, RegionKind, TokenLayout, block_grid, classify_region
from .patterns import (
    BlockMask,
    Mode,
    PatternParams,
    PatternSpec,
    build_mask,
    mask_to_pgm,
    pattern_mass_coverage,
    sparsity,
)
from .attention import (
    HeadGroup,
    allocation_probe,
    block_key_mass,
    dense_attention,
    fused_layer_attention,
    group_heads,
    skip_attention,
    sparse_attention,
)
from .model import (
    Model,
    ModelSpec,
    PlantDirective,
    build_model,
    denoise,
    load_model,
    rope,
    save_model,
)
from .search import (
    PatternConfig,
    SearchParams,
    aggregate_config,
    config_sparsity,
    mode_loss,
    run_search,
    select_mode,
)
from .costmodel import CostReport, attention_flops, attention_latency_share, config_cost, measure_latency
from .metrics import QualityReport, compare_trajectories, psnr, ssim

__all__ = [name for name in dir() if not name.startswith("_")]
