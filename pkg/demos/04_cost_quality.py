"""Trade compute for fidelity by sweeping the full-fallback threshold.

A higher epsilon lets heads with larger approximation losses go sparse:
mean sparsity and theoretical speedup rise while PSNR against the dense
run falls. The value projections are scaled up so the learned heads' losses
actually straddle the sweep instead of all clearing the lowest threshold.
"""

from svdit.costmodel import config_cost
from svdit.layout import TokenLayout
from svdit.metrics import compare_trajectories
from svdit.model import ModelSpec, build_model, denoise
from svdit.search import SearchParams, config_sparsity, run_search


def main() -> None:
    layout = TokenLayout(text_tokens=0, frames=4, tokens_per_frame=64, block_size=32)
    spec = ModelSpec(layers=2, heads=4, head_dim=16, layout=layout, timesteps=2, seed=5)
    model = build_model(spec)
    for lw in model.layers:
        lw.wv *= 6.0

    dense = denoise(model, None, seed=2)
    print(f"{'epsilon':>8} {'sparsity':>9} {'speedup':>8} {'psnr dB':>8}  modes")
    for eps in (0.5, 1.0, 3.0, 5.0, 10.0):
        config, _ = run_search(model, SearchParams(lam=0.0, epsilon=eps,
                                                   calibration_seeds=(0,)))
        sparsity = config_sparsity(config, layout)
        speedup = config_cost(spec, config).theoretical_speedup
        psnr = compare_trajectories(dense, denoise(model, config, seed=2), layout).psnr
        counts = ", ".join(f"{k}={v}" for k, v in config.mode_counts().items() if v)
        print(f"{eps:>8.1f} {sparsity:>9.3f} {speedup:>7.2f}x {psnr:>8.2f}  {counts}")
    print("\nhigher epsilon -> sparser configs and more speedup, at a psnr cost")


if __name__ == "__main__":
    main()
