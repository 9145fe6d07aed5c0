"""FLOP accounting and wall-clock measurement for pattern configs.

Conventions: a matmul of [m, n] by [n, p] costs 2*m*n*p FLOPs. Attention per
head costs 4*N^2*d dense (QK^T plus PV, each 2*N^2*d), scaled by the active
fraction (1 - sparsity) of its block mask. Projections contribute 8*N*D^2
per layer (Q, K, V, O) and the MLP 4*mult*N*D^2. Softmax, normalization, and
rotary arithmetic are excluded: they are O(N^2) and O(N*D) terms an order
below the matmuls that dominate both compute and latency.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field

import numpy as np
from threadpoolctl import threadpool_limits

from .errors import ConfigError, FormatError
from .model import Model, ModelSpec, denoise
from .patterns import Mode
from .search import PatternConfig, sparsity_table


def attention_flops(n_tokens: int, head_dim: int, heads: int, sparsity: float) -> float:
    """FLOPs for one attention call: heads * (1 - sparsity) * 4 * N^2 * d."""
    if n_tokens < 1 or head_dim < 1 or heads < 1:
        raise ConfigError("n_tokens, head_dim, heads must all be >= 1")
    if not 0.0 <= sparsity <= 1.0:
        raise ConfigError(f"sparsity must be in [0, 1], got {sparsity}")
    return heads * (1.0 - sparsity) * 4.0 * float(n_tokens) ** 2 * head_dim


def layer_linear_flops(n_tokens: int, dim: int, ffn_mult: int = 4) -> float:
    """Non-attention matmul FLOPs in one block: projections plus the MLP."""
    if n_tokens < 1 or dim < 1 or ffn_mult < 1:
        raise ConfigError("n_tokens, dim, ffn_mult must all be >= 1")
    return 8.0 * n_tokens * float(dim) ** 2 + 4.0 * ffn_mult * n_tokens * float(dim) ** 2


def attention_latency_share(n_tokens: int, head_dim: int, heads: int, ffn_mult: int = 4) -> float:
    """Fraction of per-layer matmul FLOPs spent in dense attention.

    Attention grows as N^2 while the linear terms grow as N, so the share
    rises with sequence length for a fixed width.
    """
    attn = attention_flops(n_tokens, head_dim, heads, 0.0)
    other = layer_linear_flops(n_tokens, heads * head_dim, ffn_mult)
    return attn / (attn + other)


@dataclass(eq=False)
class CostReport:
    n_tokens: int
    steps: int
    layers: int
    heads: int
    head_dim: int
    dense_attention_flops: float
    sparse_attention_flops: float
    other_flops: float
    mean_sparsity: float
    theoretical_speedup: float
    attention_share: float
    per_mode_flops: dict = field(default_factory=dict)
    wall_clock_seconds: float | None = None

    def to_json(self) -> dict:
        obj = {
            "n_tokens": self.n_tokens,
            "steps": self.steps,
            "layers": self.layers,
            "heads": self.heads,
            "head_dim": self.head_dim,
            "dense_attention_flops": self.dense_attention_flops,
            "sparse_attention_flops": self.sparse_attention_flops,
            "other_flops": self.other_flops,
            "mean_sparsity": self.mean_sparsity,
            "theoretical_speedup": self.theoretical_speedup,
            "attention_share": self.attention_share,
            "per_mode_flops": dict(self.per_mode_flops),
        }
        if self.wall_clock_seconds is not None:
            obj["wall_clock_seconds"] = self.wall_clock_seconds
        return obj

    @classmethod
    def from_json(cls, obj: dict) -> "CostReport":
        try:
            return cls(
                n_tokens=int(obj["n_tokens"]),
                steps=int(obj["steps"]),
                layers=int(obj["layers"]),
                heads=int(obj["heads"]),
                head_dim=int(obj["head_dim"]),
                dense_attention_flops=float(obj["dense_attention_flops"]),
                sparse_attention_flops=float(obj["sparse_attention_flops"]),
                other_flops=float(obj["other_flops"]),
                mean_sparsity=float(obj["mean_sparsity"]),
                theoretical_speedup=float(obj["theoretical_speedup"]),
                attention_share=float(obj["attention_share"]),
                per_mode_flops=dict(obj.get("per_mode_flops", {})),
                wall_clock_seconds=obj.get("wall_clock_seconds"),
            )
        except KeyError as exc:
            raise FormatError(f"cost report missing field {exc}")

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_json(), fh, indent=2, sort_keys=True)
            fh.write("\n")


def config_cost(spec: ModelSpec, config: PatternConfig | None = None) -> CostReport:
    """Total FLOPs for a full denoise under `config` (None means all-FULL),
    with the dense baseline and the implied theoretical speedup."""
    n = spec.layout.total_tokens
    steps, layers, heads, d = spec.timesteps, spec.layers, spec.heads, spec.head_dim
    per_head_dense = attention_flops(n, d, 1, 0.0)
    dense_total = per_head_dense * steps * layers * heads
    other_total = layer_linear_flops(n, spec.hidden_dim, spec.ffn_mult) * steps * layers

    per_mode = {mode.label: 0.0 for mode in Mode}
    if config is None:
        sparse_total = dense_total
        mean_sparsity = 0.0
        per_mode[Mode.FULL.label] = dense_total
    else:
        if (config.steps, config.layers, config.heads) != (steps, layers, heads):
            raise ConfigError(
                f"config dims {(config.steps, config.layers, config.heads)} do not match "
                f"model dims {(steps, layers, heads)}"
            )
        table = sparsity_table(config, spec.layout)
        sparse_total = 0.0
        sparsity_sum = 0.0
        for s in range(steps):
            for l in range(layers):
                for h in range(heads):
                    code = int(config.modes[s, l, h])
                    sv = table[l, h, code]
                    if np.isnan(sv):
                        raise ConfigError(f"stripe entry ({l}, {h}) has no resolved columns")
                    flops = attention_flops(n, d, 1, float(sv))
                    sparse_total += flops
                    sparsity_sum += float(sv)
                    per_mode[Mode(code).label] += flops
        mean_sparsity = sparsity_sum / config.modes.size

    return CostReport(
        n_tokens=n,
        steps=steps,
        layers=layers,
        heads=heads,
        head_dim=d,
        dense_attention_flops=dense_total,
        sparse_attention_flops=sparse_total,
        other_flops=other_total,
        mean_sparsity=mean_sparsity,
        theoretical_speedup=(dense_total + other_total) / (sparse_total + other_total),
        attention_share=dense_total / (dense_total + other_total),
        per_mode_flops=per_mode,
    )


def measure_latency(model: Model, config: PatternConfig | None = None,
                    repeats: int = 5, threads: int | None = 1, seed: int = 0) -> float:
    """Median wall-clock seconds for one full denoise (after one warmup run).

    `threads` caps the BLAS thread pools for the duration; the default of 1
    keeps medians stable. Pass None to leave the environment's setting alone.
    """
    if repeats < 3:
        raise ConfigError(f"need at least 3 repeats for a stable median, got {repeats}")
    with threadpool_limits(limits=threads):
        denoise(model, config, seed=seed)
        samples = []
        for _ in range(repeats):
            start = time.perf_counter()
            denoise(model, config, seed=seed)
            samples.append(time.perf_counter() - start)
    return float(np.median(samples))
