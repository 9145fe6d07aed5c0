"""Toy video-diffusion transformer with plantable attention structure.

The model is a stack of pre-norm residual blocks (attention + GELU MLP) run
under a fixed-step Euler solver. Selected (layer, head) pairs can be planted
with synthetic Q/K codes that force a known block-level attention pattern:

* diagonal        every token attends only within its own block
* multi_diagonal  blocks attend to all blocks sharing their residue modulo
                  the frame stride (in blocks)
* vertical_stripe all tokens attend to a fixed set of key-block columns
* uniform         scores are exactly equal everywhere (flat map)
* redundant       the head's value and output projections are zero, so the
                  head contributes nothing regardless of its pattern

Planted codes are written into Q/K after projection and rotary encoding, and
their score margins are large enough that off-pattern probabilities underflow
to exact zeros in float64. A sparse kernel whose mask covers the planted
support therefore reproduces the full kernel bitwise, which is what lets an
offline search recover plants from loss ties instead of fragile thresholds.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np
from scipy.special import erf

from .errors import ConfigError, FormatError, PlantError, ShapeError
from .layout import BlockGrid, TokenLayout, block_grid
from .numerics import make_rng
from .patterns import frame_period, full_spec
from .attention import fused_layer_attention, group_heads

PLANT_KINDS = ("diagonal", "multi_diagonal", "vertical_stripe", "uniform", "redundant")

ROPE_BASE = 10000.0

# Planted on-pattern score after 1/sqrt(d) scaling. Off-pattern scores are 0,
# so exp(0 - _TARGET_SCORE) underflows float64 (cutoff near -745) and the
# planted map has exact zeros outside its support.
_TARGET_SCORE = 2000.0

# Query mixing weight for vertical-stripe plants: queries are
# sqrt(1-beta^2)*w + beta*z with z orthogonal to the key direction w.
_STRIPE_BETA = 0.4

# RNG stream domains under the model seed.
_S_WEIGHT = 1
_S_PLANT = 2
_S_NOISE = 3

_WEIGHT_SLOTS = ("wq", "wk", "wv", "wo", "w1", "w2")


@dataclass(frozen=True)
class PlantDirective:
    kind: str
    stripe_count: int = 2

    def __post_init__(self):
        if self.kind not in PLANT_KINDS:
            raise PlantError(f"unknown plant kind {self.kind!r}, expected one of {PLANT_KINDS}")
        if self.stripe_count < 1:
            raise PlantError(f"stripe_count must be >= 1, got {self.stripe_count}")

    def to_json(self):
        obj = {"kind": self.kind}
        if self.kind == "vertical_stripe":
            obj["stripe_count"] = self.stripe_count
        return obj

    @classmethod
    def from_json(cls, obj):
        return cls(kind=obj["kind"], stripe_count=int(obj.get("stripe_count", 2)))


@dataclass(frozen=True, eq=False)
class ModelSpec:
    layers: int
    heads: int
    head_dim: int
    layout: TokenLayout
    timesteps: int
    seed: int = 0
    ffn_mult: int = 4
    plant: dict = field(default_factory=dict)

    def __post_init__(self):
        if min(self.layers, self.heads, self.head_dim, self.timesteps) < 1:
            raise ConfigError("layers, heads, head_dim, timesteps must all be >= 1")
        if self.head_dim % 2 != 0:
            raise ConfigError(f"head_dim must be even for rotary encoding, got {self.head_dim}")
        if self.ffn_mult < 1:
            raise ConfigError(f"ffn_mult must be >= 1, got {self.ffn_mult}")
        for (l, h), directive in self.plant.items():
            if not (0 <= l < self.layers and 0 <= h < self.heads):
                raise ConfigError(f"plant target ({l}, {h}) outside {self.layers}x{self.heads}")
            if not isinstance(directive, PlantDirective):
                raise ConfigError(f"plant value for ({l}, {h}) is not a PlantDirective")

    @property
    def hidden_dim(self) -> int:
        return self.heads * self.head_dim

    def to_json(self) -> dict:
        return {
            "layers": self.layers,
            "heads": self.heads,
            "head_dim": self.head_dim,
            "layout": self.layout.to_json(),
            "timesteps": self.timesteps,
            "seed": self.seed,
            "ffn_mult": self.ffn_mult,
            "plant": {f"{l},{h}": d.to_json() for (l, h), d in sorted(self.plant.items())},
        }

    @classmethod
    def from_json(cls, obj: dict) -> "ModelSpec":
        plant = {}
        for key, val in obj.get("plant", {}).items():
            l_str, h_str = key.split(",")
            plant[(int(l_str), int(h_str))] = PlantDirective.from_json(val)
        return cls(
            layers=int(obj["layers"]),
            heads=int(obj["heads"]),
            head_dim=int(obj["head_dim"]),
            layout=TokenLayout.from_json(obj["layout"]),
            timesteps=int(obj["timesteps"]),
            seed=int(obj.get("seed", 0)),
            ffn_mult=int(obj.get("ffn_mult", 4)),
            plant=plant,
        )


@dataclass(eq=False)
class LayerWeights:
    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray
    w1: np.ndarray
    w2: np.ndarray
    planted_q: dict = field(default_factory=dict)  # head -> [N, d] float32
    planted_k: dict = field(default_factory=dict)


@dataclass(eq=False)
class Model:
    spec: ModelSpec
    grid: BlockGrid
    layers: list
    planted_stripes: dict = field(default_factory=dict)  # (layer, head) -> tuple of blocks

    def fingerprint(self) -> str:
        """SHA-256 over all weights and planted codes, in a canonical order."""
        digest = hashlib.sha256()
        for layer in self.layers:
            for slot in _WEIGHT_SLOTS:
                digest.update(np.ascontiguousarray(getattr(layer, slot)).tobytes())
            for store in (layer.planted_q, layer.planted_k):
                for head in sorted(store):
                    digest.update(np.ascontiguousarray(store[head]).tobytes())
        return digest.hexdigest()


def rope(x: np.ndarray, positions: np.ndarray | None = None) -> np.ndarray:
    """Rotary position encoding over [..., N, d] with pairwise rotation.

    Dimension pair (2c, 2c+1) rotates by angle position * ROPE_BASE**(-2c/d);
    per-token vector norms are preserved.
    """
    x = np.asarray(x)
    d = x.shape[-1]
    n = x.shape[-2]
    if d % 2 != 0:
        raise ShapeError(f"rotary encoding needs an even head_dim, got {d}")
    if positions is None:
        positions = np.arange(n)
    positions = np.asarray(positions, dtype=np.float64)
    if positions.shape != (n,):
        raise ShapeError(f"positions must have shape ({n},), got {positions.shape}")
    theta = ROPE_BASE ** (-2.0 * np.arange(d // 2) / d)
    angles = positions[:, None] * theta[None, :]
    cos = np.cos(angles)
    sin = np.sin(angles)
    x64 = x.astype(np.float64)
    even = x64[..., 0::2]
    odd = x64[..., 1::2]
    out = np.empty_like(x64)
    out[..., 0::2] = even * cos - odd * sin
    out[..., 1::2] = even * sin + odd * cos
    return out.astype(np.float32)


def _unit_rows(rng, count: int, dim: int) -> np.ndarray:
    vecs = rng.standard_normal((count, dim))
    return vecs / np.linalg.norm(vecs, axis=1, keepdims=True)


def _block_codes(rng, count: int, dim: int) -> np.ndarray:
    """`count` well-separated unit vectors in R^dim.

    Exactly orthonormal via QR when count <= dim; otherwise greedy redraws
    keep pairwise |cos| <= 0.6 so cross-block scores stay far from the
    planted target.
    """
    if count <= dim:
        basis, _ = np.linalg.qr(rng.standard_normal((dim, count)))
        return basis.T.copy()
    codes = np.zeros((count, dim))
    for i in range(count):
        for _ in range(200):
            cand = _unit_rows(rng, 1, dim)[0]
            if i == 0 or np.max(np.abs(codes[:i] @ cand)) <= 0.6:
                codes[i] = cand
                break
        else:
            raise PlantError(f"could not place {count} separated codes in {dim} dimensions")
    return codes


def _token_codes(codes_per_block: np.ndarray, grid: BlockGrid, gain: float) -> np.ndarray:
    sizes = np.diff(grid.bounds)
    return (gain * np.repeat(codes_per_block, sizes, axis=0)).astype(np.float32)


def _plant_diagonal(rng, grid: BlockGrid, d: int):
    gain = float(np.sqrt(_TARGET_SCORE * np.sqrt(d)))
    codes = _block_codes(rng, grid.n_blocks, d)
    tok = _token_codes(codes, grid, gain)
    return tok, tok.copy()


def _plant_multi_diagonal(rng, grid: BlockGrid, d: int):
    layout = grid.layout
    if layout.tokens_per_frame == 0 or layout.tokens_per_frame % layout.block_size != 0:
        raise PlantError(
            "multi_diagonal plants need tokens_per_frame to be a whole number of "
            f"blocks; got {layout.tokens_per_frame} with block_size {layout.block_size}"
        )
    period = frame_period(grid)
    gain = float(np.sqrt(_TARGET_SCORE * np.sqrt(d)))
    codes = _block_codes(rng, min(period, grid.n_blocks), d)
    per_block = codes[np.arange(grid.n_blocks) % len(codes)]
    tok = _token_codes(per_block, grid, gain)
    return tok, tok.copy()


def _pick_stripe_blocks(rng, grid: BlockGrid, count: int) -> tuple[int, ...]:
    """Stripe columns among unforced blocks, preferring distinct residues
    modulo the frame stride so a repeating-diagonal mask cannot capture them."""
    candidates = np.flatnonzero(~grid.forced)
    if len(candidates) < count:
        raise PlantError(
            f"need {count} unforced blocks for a stripe plant, grid has {len(candidates)}"
        )
    period = frame_period(grid)
    shuffled = rng.permutation(candidates)
    chosen: list[int] = []
    if period > 1:
        used = set()
        for b in shuffled:
            if int(b) % period not in used:
                chosen.append(int(b))
                used.add(int(b) % period)
            if len(chosen) == count:
                break
    for b in shuffled:
        if len(chosen) == count:
            break
        if int(b) not in chosen:
            chosen.append(int(b))
    return tuple(sorted(chosen))


def _plant_vertical_stripe(rng, grid: BlockGrid, d: int, stripes: tuple[int, ...]):
    n = grid.layout.total_tokens
    c = float(np.sqrt(1.0 - _STRIPE_BETA**2))
    gain = float(np.sqrt(_TARGET_SCORE * np.sqrt(d) / c))
    w = _unit_rows(rng, 1, d)[0]
    z = rng.standard_normal((n, d))
    z -= np.outer(z @ w, w)
    z /= np.linalg.norm(z, axis=1, keepdims=True)
    q = gain * (c * w[None, :] + _STRIPE_BETA * z)
    k = np.zeros((n, d))
    for b in stripes:
        t0, t1 = int(grid.bounds[b]), int(grid.bounds[b + 1])
        k[t0:t1] = gain * w
    return q.astype(np.float32), k.astype(np.float32)


def _plant_uniform(rng, grid: BlockGrid, d: int):
    """Exactly flat attention: queries and keys live in disjoint halves of
    the head dimension, so every score is exactly zero."""
    n = grid.layout.total_tokens
    half = d // 2
    q = np.zeros((n, d))
    k = np.zeros((n, d))
    q[:, :half] = rng.standard_normal((n, half))
    k[:, half:] = rng.standard_normal((n, d - half))
    return q.astype(np.float32), k.astype(np.float32)


def build_model(spec: ModelSpec) -> Model:
    """Materialize weights and planted codes deterministically from spec.seed."""
    grid = block_grid(spec.layout)
    n = spec.layout.total_tokens
    dim = spec.hidden_dim
    d = spec.head_dim
    hidden = spec.ffn_mult * dim
    layers = []
    planted_stripes: dict = {}
    for l in range(spec.layers):
        def w(slot: int, rows: int, cols: int) -> np.ndarray:
            rng = make_rng(spec.seed, _S_WEIGHT, l, slot)
            return (rng.standard_normal((rows, cols)) / np.sqrt(rows)).astype(np.float32)

        layer = LayerWeights(
            wq=w(0, dim, dim),
            wk=w(1, dim, dim),
            wv=w(2, dim, dim),
            wo=w(3, dim, dim),
            w1=w(4, dim, hidden),
            w2=w(5, hidden, dim),
        )
        for (pl, ph), directive in sorted(spec.plant.items()):
            if pl != l:
                continue
            rng = make_rng(spec.seed, _S_PLANT, pl, ph)
            if directive.kind == "diagonal":
                layer.planted_q[ph], layer.planted_k[ph] = _plant_diagonal(rng, grid, d)
            elif directive.kind == "multi_diagonal":
                layer.planted_q[ph], layer.planted_k[ph] = _plant_multi_diagonal(rng, grid, d)
            elif directive.kind == "vertical_stripe":
                stripes = _pick_stripe_blocks(rng, grid, directive.stripe_count)
                planted_stripes[(pl, ph)] = stripes
                layer.planted_q[ph], layer.planted_k[ph] = _plant_vertical_stripe(
                    rng, grid, d, stripes
                )
            elif directive.kind == "uniform":
                layer.planted_q[ph], layer.planted_k[ph] = _plant_uniform(rng, grid, d)
            else:  # redundant: the head's value/output paths are exact zeros
                layer.wv[:, ph * d : (ph + 1) * d] = 0.0
                layer.wo[ph * d : (ph + 1) * d, :] = 0.0
        layers.append(layer)
    return Model(spec=spec, grid=grid, layers=layers, planted_stripes=planted_stripes)


def _layernorm(x64: np.ndarray) -> np.ndarray:
    mean = x64.mean(axis=-1, keepdims=True)
    var = x64.var(axis=-1, keepdims=True)
    return (x64 - mean) / np.sqrt(var + 1e-5)


def _gelu(x64: np.ndarray) -> np.ndarray:
    return 0.5 * x64 * (1.0 + erf(x64 / np.sqrt(2.0)))


def _split_heads(x: np.ndarray, heads: int) -> np.ndarray:
    b, n, dim = x.shape
    return x.reshape(b, n, heads, dim // heads).transpose(0, 2, 1, 3)


def _merge_heads(x: np.ndarray) -> np.ndarray:
    b, h, n, d = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, n, h * d)


def layer_qkv(model: Model, layer_idx: int, x: np.ndarray):
    """Project (and rotary-encode) one layer's Q, K, V from latent x [B, N, D].

    Planted heads overwrite their Q/K slices with stored codes after the
    rotary step; their value path stays learned.
    """
    if not 0 <= layer_idx < model.spec.layers:
        raise IndexError(f"layer {layer_idx} out of range")
    layer = model.layers[layer_idx]
    h64 = _layernorm(np.asarray(x, dtype=np.float64))
    q = _split_heads((h64 @ layer.wq.astype(np.float64)).astype(np.float32), model.spec.heads)
    k = _split_heads((h64 @ layer.wk.astype(np.float64)).astype(np.float32), model.spec.heads)
    v = _split_heads((h64 @ layer.wv.astype(np.float64)).astype(np.float32), model.spec.heads)
    q = rope(q)
    k = rope(k)
    for head, code in layer.planted_q.items():
        q[:, head] = code[None, :, :]
    for head, code in layer.planted_k.items():
        k[:, head] = code[None, :, :]
    return q, k, v


def layer_finish(model: Model, layer_idx: int, x: np.ndarray, attn_out: np.ndarray) -> np.ndarray:
    """Close a block: output projection, residual add, then the MLP residual."""
    layer = model.layers[layer_idx]
    x64 = np.asarray(x, dtype=np.float64)
    merged = _merge_heads(np.asarray(attn_out, dtype=np.float64))
    a = x64 + merged @ layer.wo.astype(np.float64)
    n2 = _layernorm(a)
    f = a + _gelu(n2 @ layer.w1.astype(np.float64)) @ layer.w2.astype(np.float64)
    return f.astype(np.float32)


def layer_forward(model: Model, layer_idx: int, x: np.ndarray, assignment=None) -> np.ndarray:
    """One transformer block under a per-head pattern assignment.

    `assignment` is a sequence of PatternSpec (one per head); None means
    every head runs FULL.
    """
    if assignment is None:
        assignment = [full_spec()] * model.spec.heads
    if len(assignment) != model.spec.heads:
        raise ConfigError(
            f"assignment covers {len(assignment)} heads, model has {model.spec.heads}"
        )
    q, k, v = layer_qkv(model, layer_idx, x)
    groups = group_heads(assignment, model.grid)
    out = fused_layer_attention(q, k, v, groups)
    return layer_finish(model, layer_idx, x, out)


@dataclass(frozen=True)
class DenoiseState:
    """Latent and solver position: x is the current sample, t counts down to 0."""

    x: np.ndarray
    t: int


def initial_latent(model: Model, seed: int) -> np.ndarray:
    rng = make_rng(seed, _S_NOISE)
    n = model.spec.layout.total_tokens
    return rng.standard_normal((1, n, model.spec.hidden_dim)).astype(np.float32)


def predict(model: Model, x: np.ndarray, step: int, config=None) -> np.ndarray:
    """Full forward pass at one solver step under an optional pattern config.

    `config` must expose assignment(step, layer) -> list of PatternSpec;
    None runs every head FULL.
    """
    h = x
    for l in range(model.spec.layers):
        assignment = None if config is None else config.assignment(step, l)
        h = layer_forward(model, l, h, assignment)
    return h


def denoise(model: Model, config=None, seed: int = 0) -> np.ndarray:
    """Euler-solve x_{t-1} = x_t - prediction(x_t) / T from seeded noise.

    Returns the trajectory [T + 1, 1, N, D] (float32): index 0 is the initial
    noise, index T the final sample. Step s of the config addresses the
    transition from trajectory[s] to trajectory[s + 1].
    """
    steps = model.spec.timesteps
    state = DenoiseState(x=initial_latent(model, seed), t=steps)
    trajectory = [state.x]
    for s in range(steps):
        pred = predict(model, state.x, s, config)
        x_next = (state.x.astype(np.float64) - pred.astype(np.float64) / steps).astype(np.float32)
        state = DenoiseState(x=x_next, t=state.t - 1)
        trajectory.append(state.x)
    return np.stack(trajectory)


MODEL_FORMAT = "svdit-model"


def save_model(path, model: Model) -> None:
    """Write spec plus a weights fingerprint; weights themselves regenerate
    deterministically from the seed on load."""
    doc = {
        "format": MODEL_FORMAT,
        "version": 1,
        "spec": model.spec.to_json(),
        "weights_sha256": model.fingerprint(),
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_model(path) -> Model:
    with open(path, "r", encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise FormatError(f"{path}: not valid JSON ({exc})")
    if doc.get("format") != MODEL_FORMAT:
        raise FormatError(f"{path}: format field is {doc.get('format')!r}, expected {MODEL_FORMAT!r}")
    model = build_model(ModelSpec.from_json(doc["spec"]))
    expected = doc.get("weights_sha256")
    if expected is not None and expected != model.fingerprint():
        raise FormatError(
            f"{path}: weights fingerprint mismatch; the file was built in a different environment"
        )
    return model
