"""Time-bin grid, detector jitter and guard-band filtering."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import ndtr

N_BINS = 3


@dataclass(frozen=True)
class TimeBinGrid:
    frame_period_s: float = 32e-9
    pulse_on_s: float = 3e-9
    bin_width_s: float = 1e-9

    def __post_init__(self):
        for name in ("frame_period_s", "pulse_on_s", "bin_width_s"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be > 0")
        if not math.isclose(self.pulse_on_s, N_BINS * self.bin_width_s, rel_tol=1e-9):
            raise ValueError("pulse_on_s must equal three bin widths")
        if self.pulse_on_s > self.frame_period_s:
            raise ValueError("pulse_on_s must not exceed frame_period_s")

    def bin_start(self, bin_label: int) -> float:
        """Offset of a bin (1-based) from the frame start."""
        return (bin_label - 1) * self.bin_width_s

    def bin_center(self, bin_label: int, frame_index: int = 0) -> float:
        return frame_index * self.frame_period_s + (bin_label - 0.5) * self.bin_width_s


@dataclass(frozen=True)
class GuardBand:
    guard_s: float = 0.0

    def __post_init__(self):
        if not (self.guard_s >= 0 and math.isfinite(self.guard_s)):
            raise ValueError("guard_s must be finite and >= 0")

    @classmethod
    def from_ps(cls, guard_ps: float) -> "GuardBand":
        return cls(guard_ps * 1e-12)

    def check(self, grid: TimeBinGrid) -> None:
        if not 2.0 * self.guard_s < grid.bin_width_s:
            raise ValueError(
                f"guard band {self.guard_s * 1e12:g} ps leaves no acceptance window "
                f"in a {grid.bin_width_s * 1e12:g} ps bin (need 2*guard < bin width)"
            )


def assign_offsets(offset_s, grid: TimeBinGrid, g: GuardBand) -> np.ndarray:
    """Bin label (1..3) for within-frame offsets, 0 where the click is rejected."""
    off = np.asarray(offset_s, dtype=float)
    w = grid.bin_width_s
    idx = np.floor(off / w)
    pos = off - idx * w
    ok = (idx >= 0) & (idx < N_BINS) & (pos >= g.guard_s) & (pos <= w - g.guard_s)
    return np.where(ok, idx + 1, 0).astype(np.int64)


def assign_bins(timestamps_s, grid: TimeBinGrid, g: GuardBand):
    """Vectorised assign_bin: returns (frame_index, bin) arrays, bin 0 = rejected."""
    t = np.asarray(timestamps_s, dtype=float)
    frame = np.floor(t / grid.frame_period_s).astype(np.int64)
    bins = assign_offsets(t - frame * grid.frame_period_s, grid, g)
    bins = np.where(t < 0, 0, bins)
    return frame, bins


def assign_bin(timestamp_s: float, grid: TimeBinGrid, g: GuardBand):
    """Map an absolute timestamp to ``(frame_index, bin)`` or ``None`` when rejected."""
    frame, b = assign_bins(timestamp_s, grid, g)
    if int(b) == 0:
        return None
    return int(frame), int(b)


def jittered_timestamp(true_time_s, jitter_std_s: float, rng: np.random.Generator):
    if jitter_std_s < 0:
        raise ValueError("jitter_std_s must be >= 0")
    t = np.asarray(true_time_s, dtype=float)
    if jitter_std_s == 0:
        return t if t.ndim else float(t)
    out = t + jitter_std_s * rng.standard_normal(t.shape)
    return out if out.ndim else float(out)


def _integrated_cdf(z):
    # antiderivative of the standard normal CDF
    z = np.asarray(z, dtype=float)
    return z * ndtr(z) + np.exp(-0.5 * z * z) / math.sqrt(2.0 * math.pi)


def _land_probability(src_start, width, lo, hi, sigma):
    """P(U + J in [lo, hi]) for U ~ Uniform[src_start, src_start + width], J ~ N(0, sigma^2)."""
    if hi <= lo:
        return 0.0
    if sigma <= 1e-12 * width:
        # jitter far below float resolution of the bin: plain overlap
        overlap = min(hi, src_start + width) - max(lo, src_start)
        return max(overlap, 0.0) / width
    a = src_start
    b = src_start + width
    total = (
        _integrated_cdf((hi - a) / sigma)
        - _integrated_cdf((hi - b) / sigma)
        - _integrated_cdf((lo - a) / sigma)
        + _integrated_cdf((lo - b) / sigma)
    )
    return float(np.clip(sigma * total / width, 0.0, 1.0))


def transfer_matrix(grid: TimeBinGrid, g: GuardBand, jitter_std_s: float) -> np.ndarray:
    """M[j, k]: probability that a click emitted in bin j+1 is labelled bin k+1.

    Clicks are uniform over their true bin and blurred by Gaussian jitter;
    each row's shortfall from 1 is the rejected fraction.
    """
    if jitter_std_s < 0:
        raise ValueError("jitter_std_s must be >= 0")
    w = grid.bin_width_s
    m = np.zeros((N_BINS, N_BINS))
    for j in range(N_BINS):
        for k in range(N_BINS):
            lo = k * w + g.guard_s
            hi = (k + 1) * w - g.guard_s
            m[j, k] = _land_probability(j * w, w, lo, hi, jitter_std_s)
    return m


def acceptance_fraction(g: GuardBand, grid: TimeBinGrid, jitter_std_s: float) -> float:
    """Fraction of a bin's clicks that land in that same bin's acceptance window."""
    w = grid.bin_width_s
    return _land_probability(0.0, w, g.guard_s, w - g.guard_s, jitter_std_s)
