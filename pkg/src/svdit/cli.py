"""Command-line front end.

Subcommands: plant (build a model file), search (calibrate a pattern
config), infer (denoise and dump the trajectory), bench (FLOP/latency
report), mask (render one pattern as PGM), compare (score two trajectory
dumps), repro (re-run a manifest and verify outputs bitwise).

Every producing run writes `<out>.manifest.json` beside its primary output
with the resolved parameters and relative input/output paths, and no
timestamps, so reruns of the same command are byte-identical. Thread caps
come from --threads or the SVDIT_THREADS environment variable (flag wins).

Exit codes: 0 success, 2 usage/validation/format errors, 1 unexpected
failures or a repro mismatch.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import tempfile
import traceback

from threadpoolctl import threadpool_limits

from . import __version__
from .errors import ConfigError, FormatError, SvditError
from .layout import TokenLayout, block_grid
from .numerics import load_tensor, save_tensor
from .patterns import (
    MODE_NAMES,
    Mode,
    PatternParams,
    build_mask,
    mask_to_pgm,
)
from .model import ModelSpec, build_model, denoise, load_model, save_model
from .search import PatternConfig, SearchParams, run_search
from .costmodel import config_cost, measure_latency
from .metrics import compare_trajectories

# Output-path attributes per command, used for manifests and repro rewiring.
_OUTPUTS = {
    "plant": ("out",),
    "search": ("out", "log"),
    "infer": ("out", "report"),
    "bench": ("out",),
    "mask": ("out",),
    "compare": ("out",),
}
_INPUTS = {
    "plant": ("spec",),
    "search": ("model",),
    "infer": ("model", "config", "metrics_against"),
    "bench": ("model", "config"),
    "mask": ("model",),
    "compare": ("reference", "candidate", "model"),
}


def _parse_int_list(text: str, what: str) -> tuple[int, ...]:
    try:
        return tuple(int(tok) for tok in text.split(",") if tok.strip() != "")
    except ValueError:
        raise ConfigError(f"{what} must be comma-separated integers, got {text!r}")


def _layout_from_args(args) -> TokenLayout:
    return TokenLayout(
        text_tokens=args.text_tokens,
        frames=args.frames,
        tokens_per_frame=args.tokens_per_frame,
        block_size=args.block_size,
    )


def _pattern_params(args) -> PatternParams:
    return PatternParams(
        diagonal_halfwidth=args.diag_halfwidth,
        md_period=args.md_period,
        md_halfwidth=args.md_halfwidth,
        stripe_count=args.stripe_count,
        include_diagonal=not args.no_diagonal_union,
    )


def _add_layout_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--text-tokens", type=int, default=0)
    p.add_argument("--frames", type=int, default=8)
    p.add_argument("--tokens-per-frame", type=int, default=128)
    p.add_argument("--block-size", type=int, default=64)


def _add_pattern_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--diag-halfwidth", type=int, default=1)
    p.add_argument("--md-period", type=int, default=None)
    p.add_argument("--md-halfwidth", type=int, default=0)
    p.add_argument("--stripe-count", type=int, default=2)
    p.add_argument("--no-diagonal-union", action="store_true",
                   help="vertical stripes without the main diagonal")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="svdit",
        description="Block-sparse attention pattern search over a toy video diffusion transformer.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--threads", type=int, default=None,
                        help="cap BLAS threads (default: SVDIT_THREADS or unlimited)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("plant", help="build a model file from a model-spec JSON")
    p.add_argument("spec", help="model spec JSON (layers/heads/head_dim/layout/"
                                "timesteps/seed/ffn_mult/plant)")
    p.add_argument("--out", required=True)

    p = sub.add_parser("search", help="calibrate a per-head pattern config")
    p.add_argument("--model", required=True)
    p.add_argument("--lambda", dest="lam", type=float, default=0.5)
    p.add_argument("--epsilon", type=float, default=1.0)
    p.add_argument("--seeds", default="0,1", help="comma-separated calibration seeds")
    p.add_argument("--penalty", choices=("eq2_density", "alg1_sparsity"), default="eq2_density")
    p.add_argument("--aggregate", choices=("per_step", "majority_over_steps"), default="per_step")
    _add_pattern_flags(p)
    p.add_argument("--out", required=True)
    p.add_argument("--log", default=None,
                   help="per-candidate loss log path (default: OUT.log.json)")

    p = sub.add_parser("infer", help="denoise and write the trajectory tensor")
    p.add_argument("--model", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--metrics-against", default=None,
                   help="reference trajectory dump to score against")
    p.add_argument("--report", default=None,
                   help="quality report path (default: OUT.quality.json)")

    p = sub.add_parser("bench", help="FLOP accounting and optional wall-clock timing")
    p.add_argument("--model", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--measure", action="store_true", help="also time full denoise runs")
    p.add_argument("--repeats", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)

    p = sub.add_parser("mask", help="render one pattern's block mask as a PGM image")
    p.add_argument("--mode", choices=MODE_NAMES, required=True)
    p.add_argument("--model", default=None, help="take the block grid from a model file")
    _add_layout_flags(p)
    _add_pattern_flags(p)
    p.add_argument("--stripes", default=None, help="explicit stripe columns, e.g. 3,17")
    p.add_argument("--out", required=True)

    p = sub.add_parser("compare", help="score a candidate trajectory against a reference")
    p.add_argument("reference")
    p.add_argument("candidate")
    p.add_argument("--model", default=None, help="adds per-frame breakdown and SSIM")
    p.add_argument("--out", required=True)

    p = sub.add_parser("repro", help="re-run a manifest and verify outputs bitwise")
    p.add_argument("manifest")

    return parser


def _cmd_plant(args) -> int:
    with open(args.spec, "r", encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise FormatError(f"{args.spec}: not valid JSON ({exc})")
    try:
        spec = ModelSpec.from_json(doc)
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, SvditError):
            raise
        raise FormatError(f"{args.spec}: malformed model spec ({exc})")
    save_model(args.out, build_model(spec))
    print(f"wrote model ({spec.layers} layers, {spec.heads} heads, "
          f"{spec.layout.total_tokens} tokens) to {args.out}")
    return 0


def _cmd_search(args) -> int:
    model = load_model(args.model)
    params = SearchParams(
        lam=args.lam,
        epsilon=args.epsilon,
        calibration_seeds=_parse_int_list(args.seeds, "--seeds"),
        penalty=args.penalty,
        aggregate=args.aggregate,
        patterns=_pattern_params(args),
    )
    config, log = run_search(model, params)
    config.save(args.out)
    if args.log is None:
        args.log = f"{args.out}.log.json"
    log.save(args.log)
    counts = ", ".join(f"{k}={v}" for k, v in config.mode_counts().items() if v)
    print(f"wrote config ({counts}) to {args.out}")
    return 0


def _cmd_infer(args) -> int:
    model = load_model(args.model)
    config = PatternConfig.load(args.config) if args.config else None
    trajectory = denoise(model, config, seed=args.seed)
    save_tensor(args.out, trajectory)
    print(f"wrote trajectory {trajectory.shape} to {args.out}")
    if args.metrics_against:
        reference = load_tensor(args.metrics_against)
        report = compare_trajectories(reference, trajectory, model.spec.layout)
        report_path = args.report or f"{args.out}.quality.json"
        args.report = report_path
        report.save(report_path)
        print(f"psnr {report.psnr:.2f} dB vs {args.metrics_against}; report at {report_path}")
    return 0


def _cmd_bench(args) -> int:
    model = load_model(args.model)
    config = PatternConfig.load(args.config) if args.config else None
    report = config_cost(model.spec, config)
    if args.measure:
        # timing runs single-threaded unless --threads says otherwise
        report.wall_clock_seconds = measure_latency(
            model, config, repeats=args.repeats,
            threads=args.threads if args.threads is not None else 1, seed=args.seed,
        )
    report.save(args.out)
    print(f"theoretical speedup {report.theoretical_speedup:.3f}x "
          f"(mean sparsity {report.mean_sparsity:.3f}); report at {args.out}")
    return 0


def _cmd_mask(args) -> int:
    if args.model:
        layout = load_model(args.model).spec.layout
    else:
        layout = _layout_from_args(args)
    params = _pattern_params(args)
    stripes = _parse_int_list(args.stripes, "--stripes") if args.stripes else None
    mode = Mode.from_label(args.mode)
    if mode is Mode.VERTICAL_STRIPE and stripes is None:
        raise ConfigError("mask --mode vertical_stripe needs --stripes")
    spec = params.spec_for(mode, stripes)
    mask = build_mask(spec, block_grid(layout))
    with open(args.out, "wb") as fh:
        fh.write(mask_to_pgm(mask))
    print(f"wrote {layout.n_blocks}x{layout.n_blocks} mask "
          f"(sparsity {mask.sparsity:.4f}) to {args.out}")
    return 0


def _cmd_compare(args) -> int:
    reference = load_tensor(args.reference)
    candidate = load_tensor(args.candidate)
    layout = load_model(args.model).spec.layout if args.model else None
    report = compare_trajectories(reference, candidate, layout)
    report.save(args.out)
    ssim_part = "n/a" if report.ssim is None else f"{report.ssim:.4f}"
    print(f"mse {report.mse:.6g}, psnr {report.psnr:.2f} dB, ssim {ssim_part}; "
          f"report at {args.out}")
    return 0


_HANDLERS = {
    "plant": _cmd_plant,
    "search": _cmd_search,
    "infer": _cmd_infer,
    "bench": _cmd_bench,
    "mask": _cmd_mask,
    "compare": _cmd_compare,
}


def _manifest_path(out_path: str) -> str:
    return f"{out_path}.manifest.json"


def _json_safe(value):
    if isinstance(value, (str, int, float, bool)) or value is None:
        return value
    if isinstance(value, (list, tuple)):
        return [_json_safe(v) for v in value]
    raise ConfigError(f"cannot store {type(value).__name__} in a manifest")


def write_manifest(args, threads: int | None) -> str:
    """Record the resolved run beside its primary output; paths relative to
    the manifest so the pair relocates cleanly."""
    primary = getattr(args, "out")
    root = os.path.dirname(os.path.abspath(_manifest_path(primary)))
    skip = {"command", "func"}
    params = {
        key: _json_safe(val)
        for key, val in sorted(vars(args).items())
        if key not in skip
    }
    inputs = {}
    for attr in _INPUTS[args.command]:
        val = getattr(args, attr, None)
        if val:
            inputs[attr] = os.path.relpath(os.path.abspath(val), root)
    outputs = {}
    for attr in _OUTPUTS[args.command]:
        val = getattr(args, attr, None)
        if val:
            outputs[attr] = os.path.relpath(os.path.abspath(val), root)
    doc = {
        "tool": "svdit",
        "version": __version__,
        "command": args.command,
        "threads": threads,
        "params": params,
        "inputs": inputs,
        "outputs": outputs,
    }
    path = _manifest_path(primary)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def _cmd_repro(args) -> int:
    with open(args.manifest, "r", encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise FormatError(f"{args.manifest}: not valid JSON ({exc})")
    command = doc.get("command")
    if doc.get("tool") != "svdit" or command not in _HANDLERS:
        raise FormatError(f"{args.manifest}: not an svdit run manifest")
    root = os.path.dirname(os.path.abspath(args.manifest))

    ns = argparse.Namespace(**doc["params"])
    ns.command = command
    for attr, rel in doc.get("inputs", {}).items():
        setattr(ns, attr, os.path.join(root, rel))

    recorded = {}
    for attr, rel in doc.get("outputs", {}).items():
        recorded[attr] = os.path.join(root, rel)

    status = 0
    with tempfile.TemporaryDirectory(prefix="svdit-repro-") as tmp:
        for attr, original in recorded.items():
            setattr(ns, attr, os.path.join(tmp, os.path.basename(original)))
        ns.threads = doc.get("threads")
        with threadpool_limits(limits=ns.threads):
            _HANDLERS[command](ns)
        for attr, original in recorded.items():
            fresh = getattr(ns, attr)
            if not os.path.exists(fresh):
                print(f"repro: {attr}: not regenerated", file=sys.stderr)
                status = 1
                continue
            with open(original, "rb") as fh:
                want = fh.read()
            with open(fresh, "rb") as fh:
                got = fh.read()
            if want == got:
                print(f"repro: {attr}: identical ({len(want)} bytes)")
            else:
                print(f"repro: {attr}: MISMATCH vs {original}", file=sys.stderr)
                status = 1
    return status


def _resolve_threads(args) -> int | None:
    if args.threads is not None:
        return args.threads
    env = os.environ.get("SVDIT_THREADS")
    if env:
        try:
            return int(env)
        except ValueError:
            raise ConfigError(f"SVDIT_THREADS must be an integer, got {env!r}")
    return None


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "repro":
            return _cmd_repro(args)
        threads = _resolve_threads(args)
        args.threads = threads
        with threadpool_limits(limits=threads):
            status = _HANDLERS[args.command](args)
        if status == 0:
            write_manifest(args, threads)
        return status
    except SvditError as exc:
        print(f"svdit {args.command}: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"svdit {args.command}: {exc}", file=sys.stderr)
        return 2
    except Exception:
        traceback.print_exc()
        return 1


def entry() -> None:
    sys.exit(main())
