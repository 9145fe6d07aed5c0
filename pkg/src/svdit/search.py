"""Offline pattern search: assign one attention mode per (step, layer, head).

For every solver step and layer the search projects Q/K/V once, evaluates the
FULL baseline plus all four sparse candidates per head, and scores each
candidate with

    loss = MSE(candidate output, full output) + lambda * penalty(sparsity)

where the default penalty charges density (1 - sparsity), so raising lambda
pushes the selection toward sparser modes. A head falls back to FULL only
when every sparse candidate's loss exceeds epsilon; otherwise the lowest
loss wins, with exact ties resolved toward the sparser mode and then the
lower mode index. Selected head outputs propagate into the layer's residual
stream, so later steps see the sparse model actually being built.

Vertical-stripe columns are head-specific: on the first evaluation of a
(layer, head) the key-block mass profile picks the stripe_count heaviest
columns, and those columns stay frozen for the rest of the search. Runs
repeat over a set of calibration seeds and merge per-entry choices by
majority vote (ties again toward denser).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigError, FormatError
from .layout import TokenLayout, block_grid
from .numerics import mse
from .patterns import BlockMask, Mode, PatternParams, PatternSpec, build_mask
from .attention import block_key_mass, full_mask_attention, sparse_attention
from .model import Model, initial_latent, layer_finish, layer_qkv

PENALTIES = ("eq2_density", "alg1_sparsity")
AGGREGATES = ("per_step", "majority_over_steps")

SPARSE_MODES = (Mode.SKIP, Mode.DIAGONAL, Mode.MULTI_DIAGONAL, Mode.VERTICAL_STRIPE)


@dataclass(frozen=True)
class SearchParams:
    lam: float = 0.5
    epsilon: float = 1.0
    calibration_seeds: tuple[int, ...] = (0, 1)
    penalty: str = "eq2_density"
    aggregate: str = "per_step"
    patterns: PatternParams = field(default_factory=PatternParams)

    def __post_init__(self):
        if self.lam < 0:
            raise ConfigError(f"lambda must be >= 0, got {self.lam}")
        if self.epsilon <= 0:
            raise ConfigError(f"epsilon must be > 0, got {self.epsilon}")
        if not self.calibration_seeds:
            raise ConfigError("need at least one calibration seed")
        if self.penalty not in PENALTIES:
            raise ConfigError(f"penalty must be one of {PENALTIES}, got {self.penalty!r}")
        if self.aggregate not in AGGREGATES:
            raise ConfigError(f"aggregate must be one of {AGGREGATES}, got {self.aggregate!r}")


def mode_loss(output, reference, sparsity: float, lam: float, penalty: str = "eq2_density") -> float:
    """Reconstruction error plus the sparsity-dependent penalty term.

    eq2_density charges lambda * (1 - sparsity): denser candidates pay more.
    alg1_sparsity charges lambda * sparsity instead (kept for comparison runs;
    it rewards density and is not the default).
    """
    if penalty not in PENALTIES:
        raise ConfigError(f"penalty must be one of {PENALTIES}, got {penalty!r}")
    if not 0.0 <= sparsity <= 1.0:
        raise ConfigError(f"sparsity must be in [0, 1], got {sparsity}")
    err = mse(output, reference)
    if penalty == "eq2_density":
        return err + lam * (1.0 - sparsity)
    return err + lam * sparsity


def select_mode(losses, sparsities, epsilon: float) -> Mode:
    """Pick a mode from the four sparse losses (SKIP, DIAGONAL,
    MULTI_DIAGONAL, VERTICAL_STRIPE, in that order).

    FULL wins only if every sparse loss exceeds epsilon. Otherwise the
    minimum loss wins; ties prefer the larger sparsity, then the smaller
    mode index.
    """
    losses = list(losses)
    sparsities = list(sparsities)
    if len(losses) != 4 or len(sparsities) != 4:
        raise ConfigError("expected exactly four sparse losses and sparsities")
    if all(loss > epsilon for loss in losses):
        return Mode.FULL
    best_key = None
    best_mode = None
    for offset, (loss, s) in enumerate(zip(losses, sparsities)):
        key = (float(loss), -float(s), offset)
        if best_key is None or key < best_key:
            best_key = key
            best_mode = SPARSE_MODES[offset]
    return best_mode


@dataclass(eq=False)
class PatternConfig:
    """The search product: a mode per (step, layer, head) plus stripe columns
    and the pattern geometry needed to rebuild every mask."""

    modes: np.ndarray  # uint8 [steps, layers, heads]
    stripes: dict = field(default_factory=dict)  # (layer, head) -> tuple of key blocks
    params: PatternParams = field(default_factory=PatternParams)
    penalty: str = "eq2_density"
    seed_set: tuple[int, ...] = ()

    def __post_init__(self):
        self.modes = np.asarray(self.modes, dtype=np.uint8)
        if self.modes.ndim != 3:
            raise ConfigError(f"modes must be [steps, layers, heads], got rank {self.modes.ndim}")
        if self.modes.max(initial=0) > 4:
            raise ConfigError("mode codes must be in 0..4")
        self.stripes = {key: tuple(val) for key, val in self.stripes.items()}

    @property
    def steps(self) -> int:
        return self.modes.shape[0]

    @property
    def layers(self) -> int:
        return self.modes.shape[1]

    @property
    def heads(self) -> int:
        return self.modes.shape[2]

    def spec_for(self, step: int, layer: int, head: int) -> PatternSpec:
        mode = Mode(int(self.modes[step, layer, head]))
        stripes = self.stripes.get((layer, head)) if mode is Mode.VERTICAL_STRIPE else None
        return self.params.spec_for(mode, stripes)

    def assignment(self, step: int, layer: int) -> list:
        return [self.spec_for(step, layer, h) for h in range(self.heads)]

    def mode_counts(self) -> dict:
        counts = np.bincount(self.modes.reshape(-1), minlength=5)
        return {Mode(i).label: int(c) for i, c in enumerate(counts)}

    @classmethod
    def uniform(cls, steps: int, layers: int, heads: int, mode: Mode,
                params: PatternParams | None = None) -> "PatternConfig":
        if mode is Mode.VERTICAL_STRIPE:
            raise ConfigError("a uniform stripe config needs per-head stripe columns")
        modes = np.full((steps, layers, heads), int(mode), dtype=np.uint8)
        return cls(modes=modes, params=params or PatternParams())

    def to_json(self) -> dict:
        return {
            "dims": [self.steps, self.layers, self.heads],
            "modes": self.modes.tolist(),
            "stripes": {f"{l},{h}": list(cols) for (l, h), cols in sorted(self.stripes.items())},
            "params": self.params.to_json(),
            "penalty": self.penalty,
            "seed_set": list(self.seed_set),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "PatternConfig":
        dims = obj.get("dims")
        modes = np.asarray(obj["modes"], dtype=np.uint8)
        if dims is not None and tuple(dims) != modes.shape:
            raise FormatError(f"config dims {dims} disagree with modes shape {modes.shape}")
        stripes = {}
        for key, cols in obj.get("stripes", {}).items():
            l_str, h_str = key.split(",")
            stripes[(int(l_str), int(h_str))] = tuple(int(c) for c in cols)
        return cls(
            modes=modes,
            stripes=stripes,
            params=PatternParams.from_json(obj.get("params", {})),
            penalty=obj.get("penalty", "eq2_density"),
            seed_set=tuple(obj.get("seed_set", [])),
        )

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_json(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, path) -> "PatternConfig":
        with open(path, "r", encoding="utf-8") as fh:
            try:
                doc = json.load(fh)
            except json.JSONDecodeError as exc:
                raise FormatError(f"{path}: not valid JSON ({exc})")
        try:
            return cls.from_json(doc)
        except (KeyError, TypeError, ValueError) as exc:
            if isinstance(exc, FormatError):
                raise
            raise FormatError(f"{path}: malformed pattern config ({exc})")


@dataclass(eq=False)
class SearchLog:
    """Per-evaluation records: losses and sparsities for every candidate."""

    entries: list = field(default_factory=list)

    def add(self, seed, step, layer, head, losses, sparsities, selected: Mode) -> None:
        self.entries.append(
            {
                "seed": int(seed),
                "step": int(step),
                "layer": int(layer),
                "head": int(head),
                "losses": [float(x) for x in losses],
                "sparsities": [float(x) for x in sparsities],
                "selected": int(selected),
            }
        )

    def to_json(self) -> dict:
        return {"mode_order": [m.label for m in SPARSE_MODES], "entries": self.entries}

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_json(), fh, indent=2, sort_keys=True)
            fh.write("\n")


def sparsity_table(config: PatternConfig, layout: TokenLayout) -> np.ndarray:
    """Sparsity of each mode for each (layer, head) under `layout`: [L, H, 5].

    FULL is exactly 0 and SKIP exactly 1; stripe entries without resolved
    columns are NaN (the mode was never selectable there).
    """
    grid = block_grid(layout)
    table = np.full((config.layers, config.heads, 5), np.nan)
    table[:, :, Mode.FULL] = 0.0
    table[:, :, Mode.SKIP] = 1.0
    diag = build_mask(config.params.spec_for(Mode.DIAGONAL), grid)
    md = build_mask(config.params.spec_for(Mode.MULTI_DIAGONAL), grid)
    table[:, :, Mode.DIAGONAL] = diag.sparsity
    table[:, :, Mode.MULTI_DIAGONAL] = md.sparsity
    stripe_cache: dict = {}
    for (l, h), cols in config.stripes.items():
        if cols not in stripe_cache:
            spec = config.params.spec_for(Mode.VERTICAL_STRIPE, cols)
            stripe_cache[cols] = build_mask(spec, grid).sparsity
        table[l, h, Mode.VERTICAL_STRIPE] = stripe_cache[cols]
    return table


def config_sparsity(config: PatternConfig, layout: TokenLayout) -> float:
    """Mean attention sparsity over all (step, layer, head) entries."""
    table = sparsity_table(config, layout)
    total = 0.0
    for s in range(config.steps):
        for l in range(config.layers):
            for h in range(config.heads):
                value = table[l, h, config.modes[s, l, h]]
                if np.isnan(value):
                    raise ConfigError(f"stripe entry ({l}, {h}) has no resolved columns")
                total += value
    return total / config.modes.size


def _denser_tiebreak(candidates, sparsity_row) -> int:
    """Among tied mode codes, pick the densest (smallest sparsity, then
    smallest code). `sparsity_row` maps mode code -> sparsity for the head."""
    def key(mode_code: int):
        s = sparsity_row[mode_code]
        return (1.0 if np.isnan(s) else float(s), mode_code)

    return min(candidates, key=key)


def aggregate_config(config: PatternConfig, layout: TokenLayout, strategy: str) -> PatternConfig:
    """Collapse or keep the step axis.

    per_step returns the config unchanged; majority_over_steps replaces each
    (layer, head) column with its most frequent mode across steps, breaking
    ties toward the denser mode, and repeats it at every step.
    """
    if strategy not in AGGREGATES:
        raise ConfigError(f"aggregate must be one of {AGGREGATES}, got {strategy!r}")
    if strategy == "per_step" or config.steps == 1:
        return config
    table = sparsity_table(config, layout)
    collapsed = np.empty_like(config.modes)
    for l in range(config.layers):
        for h in range(config.heads):
            counts = np.bincount(config.modes[:, l, h], minlength=5)
            top = counts.max()
            tied = [code for code in range(5) if counts[code] == top]
            collapsed[:, l, h] = _denser_tiebreak(tied, table[l, h])
    return replace(config, modes=collapsed)


def run_search(model: Model, params: SearchParams | None = None):
    """Calibrate a PatternConfig for `model`. Returns (config, log).

    One pass per calibration seed; within a pass, selected outputs feed the
    residual stream so downstream evaluations see the sparsified model.
    Stripe columns freeze at each head's first evaluation; per-seed choices
    merge by majority vote with ties toward the denser mode.
    """
    params = params or SearchParams()
    spec = model.spec
    grid = model.grid
    steps, layers, heads = spec.timesteps, spec.layers, spec.heads

    diag_mask = build_mask(params.patterns.spec_for(Mode.DIAGONAL), grid)
    md_mask = build_mask(params.patterns.spec_for(Mode.MULTI_DIAGONAL), grid)
    stripes: dict = {}
    stripe_masks: dict = {}

    def stripe_mask_for(cols: tuple) -> BlockMask:
        if cols not in stripe_masks:
            spec_s = params.patterns.spec_for(Mode.VERTICAL_STRIPE, cols)
            stripe_masks[cols] = build_mask(spec_s, grid)
        return stripe_masks[cols]

    votes = np.zeros((steps, layers, heads, 5), dtype=np.int64)
    log = SearchLog()

    for seed in params.calibration_seeds:
        x = initial_latent(model, seed)
        for s in range(steps):
            h_stream = x
            for l in range(layers):
                q, k, v = layer_qkv(model, l, h_stream)
                o_full = full_mask_attention(q, k, v, grid)
                o_skip = np.zeros_like(o_full)
                o_diag = sparse_attention(q, k, v, diag_mask)
                o_md = sparse_attention(q, k, v, md_mask)

                unresolved = [hd for hd in range(heads) if (l, hd) not in stripes]
                if unresolved:
                    mass = block_key_mass(q, k, grid)[0]
                    for hd in unresolved:
                        order = np.argsort(-mass[hd], kind="stable")
                        cols = tuple(sorted(int(c) for c in order[: params.patterns.stripe_count]))
                        stripes[(l, hd)] = cols
                o_stripe = np.empty_like(o_full)
                by_cols: dict = {}
                for hd in range(heads):
                    by_cols.setdefault(stripes[(l, hd)], []).append(hd)
                for cols, members in by_cols.items():
                    res = sparse_attention(q[:, members], k[:, members], v[:, members],
                                           stripe_mask_for(cols))
                    o_stripe[:, members] = res

                candidates = (o_skip, o_diag, o_md, o_stripe)
                o_sel = np.empty_like(o_full)
                for hd in range(heads):
                    svals = (
                        1.0,
                        diag_mask.sparsity,
                        md_mask.sparsity,
                        stripe_mask_for(stripes[(l, hd)]).sparsity,
                    )
                    losses = [
                        mode_loss(cand[:, hd], o_full[:, hd], sv, params.lam, params.penalty)
                        for cand, sv in zip(candidates, svals)
                    ]
                    choice = select_mode(losses, svals, params.epsilon)
                    votes[s, l, hd, choice] += 1
                    log.add(seed, s, l, hd, losses, svals, choice)
                    o_sel[:, hd] = o_full[:, hd] if choice is Mode.FULL else candidates[choice - 1][:, hd]
                h_stream = layer_finish(model, l, h_stream, o_sel)
            x = (x.astype(np.float64) - h_stream.astype(np.float64) / steps).astype(np.float32)

    config = PatternConfig(
        modes=np.zeros((steps, layers, heads), dtype=np.uint8),
        stripes=dict(stripes),
        params=params.patterns,
        penalty=params.penalty,
        seed_set=tuple(params.calibration_seeds),
    )
    table = sparsity_table(config, spec.layout)
    for s in range(steps):
        for l in range(layers):
            for hd in range(heads):
                row = votes[s, l, hd]
                top = row.max()
                tied = [code for code in range(5) if row[code] == top]
                config.modes[s, l, hd] = _denser_tiebreak(tied, table[l, hd])
    if params.aggregate == "majority_over_steps":
        config = aggregate_config(config, spec.layout, params.aggregate)
    return config, log
