"""Render every attention pattern as a block mask and report its sparsity.

Writes one PGM per mode into demos/out/ (white = active block) and prints
the exact active-block accounting for a 16-frame grid.
"""

import os

from svdit.layout import TokenLayout, block_grid
from svdit.patterns import (
    Mode,
    build_mask,
    diagonal_spec,
    full_spec,
    mask_to_pgm,
    multi_diagonal_spec,
    skip_spec,
    vertical_stripe_spec,
)

OUT = os.path.join(os.path.dirname(__file__), "out")


def main() -> None:
    layout = TokenLayout(text_tokens=0, frames=16, tokens_per_frame=64, block_size=64)
    grid = block_grid(layout)
    os.makedirs(OUT, exist_ok=True)

    specs = {
        Mode.FULL: full_spec(),
        Mode.SKIP: skip_spec(),
        Mode.DIAGONAL: diagonal_spec(1),
        Mode.MULTI_DIAGONAL: multi_diagonal_spec(period=4),
        Mode.VERTICAL_STRIPE: vertical_stripe_spec(stripes=(0, 9)),
    }
    nb = grid.n_blocks
    print(f"{nb}x{nb} block grid over {layout.total_tokens} tokens "
          f"(block size {layout.block_size})\n")
    print(f"{'mode':<16} {'active blocks':>13} {'sparsity':>9}")
    for mode, spec in specs.items():
        mask = build_mask(spec, grid)
        active = 0 if mask.active is None else int(mask.active.sum())
        print(f"{mode.label:<16} {active:>7}/{nb * nb:<5} {mask.sparsity:>9.4f}")
        path = os.path.join(OUT, f"{mode.label}.pgm")
        with open(path, "wb") as fh:
            fh.write(mask_to_pgm(mask))
    print(f"\nmask images written to {OUT}/<mode>.pgm")


if __name__ == "__main__":
    main()
