"""Quality metrics between denoise trajectories: MSE, PSNR, SSIM.

PSNR is capped at 99 dB so identical arrays compare cleanly instead of
dividing by zero. SSIM is the single-scale form over sliding 8x8 windows
with uniform weighting, evaluated on a [frames, tokens_per_frame] plane
obtained by channel-averaging the final latent.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import FormatError, ShapeError
from .layout import TokenLayout
from .numerics import mse

PSNR_CAP = 99.0

_SSIM_WINDOW = 8
_SSIM_K1 = 0.01
_SSIM_K2 = 0.03


def psnr(a, b, max_value: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB, capped at 99."""
    if max_value <= 0:
        raise ShapeError(f"max_value must be > 0, got {max_value}")
    err = mse(a, b)
    if err == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * np.log10(max_value * max_value / err))


def ssim(a, b, max_value: float | None = None) -> float:
    """Mean structural similarity over sliding 8x8 windows of two 2-D arrays.

    `max_value` sets the dynamic range; by default it is the larger
    peak-to-peak range of the inputs, falling back to 1.0 for constant
    images so C1/C2 stay positive.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError("ssim expects 2-D arrays")
    if a.shape != b.shape:
        raise ShapeError(f"ssim operands differ in shape: {a.shape} vs {b.shape}")
    if min(a.shape) < _SSIM_WINDOW:
        raise ShapeError(f"ssim needs both dims >= {_SSIM_WINDOW}, got {a.shape}")
    if max_value is None:
        max_value = float(max(np.ptp(a), np.ptp(b)))
        if max_value == 0.0:
            max_value = 1.0
    c1 = (_SSIM_K1 * max_value) ** 2
    c2 = (_SSIM_K2 * max_value) ** 2

    wa = sliding_window_view(a, (_SSIM_WINDOW, _SSIM_WINDOW))
    wb = sliding_window_view(b, (_SSIM_WINDOW, _SSIM_WINDOW))
    mu_a = wa.mean(axis=(-1, -2))
    mu_b = wb.mean(axis=(-1, -2))
    sq_a = (wa * wa).mean(axis=(-1, -2))
    sq_b = (wb * wb).mean(axis=(-1, -2))
    var_a = sq_a - mu_a * mu_a
    var_b = sq_b - mu_b * mu_b
    cov = (wa * wb).mean(axis=(-1, -2)) - mu_a * mu_b
    score = ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / (
        (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    )
    return float(score.mean())


@dataclass(eq=False)
class QualityReport:
    mse: float
    psnr: float
    ssim: float | None
    max_value: float
    per_frame: list = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "mse": self.mse,
            "psnr": self.psnr,
            "ssim": self.ssim,
            "max_value": self.max_value,
            "per_frame": list(self.per_frame),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "QualityReport":
        try:
            return cls(
                mse=float(obj["mse"]),
                psnr=float(obj["psnr"]),
                ssim=None if obj.get("ssim") is None else float(obj["ssim"]),
                max_value=float(obj["max_value"]),
                per_frame=list(obj.get("per_frame", [])),
            )
        except KeyError as exc:
            raise FormatError(f"quality report missing field {exc}")

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_json(), fh, indent=2, sort_keys=True)
            fh.write("\n")


def _video_plane(final: np.ndarray, layout: TokenLayout) -> np.ndarray:
    """Channel-averaged [frames, tokens_per_frame] view of a final latent."""
    video = final[0, layout.text_tokens :, :]
    return video.mean(axis=-1).reshape(layout.frames, layout.tokens_per_frame)


def compare_trajectories(reference, candidate, layout: TokenLayout | None = None,
                         max_value: float = 1.0) -> QualityReport:
    """Score a candidate trajectory against a reference one.

    Both are [steps + 1, batch, tokens, dim] stacks from denoise(); only the
    final states are scored. PSNR uses `max_value` as the nominal signal
    range (default 1.0, matching psnr's own convention). With a layout, the
    report adds a per-frame MSE/PSNR breakdown and, when the video plane is
    at least 8x8, a global SSIM on the channel-averaged plane.
    """
    ref = np.asarray(reference)
    cand = np.asarray(candidate)
    if ref.ndim != 4 or cand.ndim != 4:
        raise ShapeError("trajectories must be [steps + 1, batch, tokens, dim]")
    if ref.shape != cand.shape:
        raise ShapeError(f"trajectory shapes differ: {ref.shape} vs {cand.shape}")
    final_ref = ref[-1]
    final_cand = cand[-1]
    if max_value <= 0:
        raise ShapeError(f"max_value must be > 0, got {max_value}")

    report = QualityReport(
        mse=mse(final_ref, final_cand),
        psnr=psnr(final_ref, final_cand, max_value),
        ssim=None,
        max_value=max_value,
    )
    if layout is None:
        return report
    n = layout.total_tokens
    if final_ref.shape[1] != n:
        raise ShapeError(f"layout covers {n} tokens, trajectory has {final_ref.shape[1]}")
    for f in range(layout.frames):
        t0 = layout.text_tokens + f * layout.tokens_per_frame
        t1 = t0 + layout.tokens_per_frame
        frame_mse = mse(final_ref[:, t0:t1], final_cand[:, t0:t1])
        report.per_frame.append(
            {
                "frame": f,
                "mse": frame_mse,
                "psnr": psnr(final_ref[:, t0:t1], final_cand[:, t0:t1], max_value),
            }
        )
    if layout.frames >= _SSIM_WINDOW and layout.tokens_per_frame >= _SSIM_WINDOW:
        report.ssim = ssim(
            _video_plane(final_ref, layout),
            _video_plane(final_cand, layout),
            max_value=None,
        )
    return report
