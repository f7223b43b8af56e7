"""Two weak coherent pulses on a 50:50 beam splitter, and threshold-detector clicks."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

TWO_PI = 2.0 * math.pi


def wrap_phase(phase):
    """Map a phase (scalar or array) into [0, 2*pi)."""
    wrapped = np.mod(phase, TWO_PI)
    # mod of a tiny negative number rounds up to exactly 2*pi
    wrapped = np.where(wrapped >= TWO_PI, 0.0, wrapped)
    if np.ndim(wrapped) == 0:
        return float(wrapped)
    return wrapped


def phase_difference(phi_a, phi_b):
    """Wrapped difference phi_a - phi_b in (-pi, pi]."""
    d = np.mod(np.asarray(phi_a) - np.asarray(phi_b) + math.pi, TWO_PI) - math.pi
    d = np.where(d == -math.pi, math.pi, d)
    if np.ndim(d) == 0:
        return float(d)
    return d


@dataclass(frozen=True)
class CoherentBin:
    mean_photons: float
    phase: float = 0.0

    def __post_init__(self):
        if not (self.mean_photons >= 0.0) or not math.isfinite(self.mean_photons):
            raise ValueError(f"mean_photons must be finite and >= 0, got {self.mean_photons!r}")
        if not math.isfinite(self.phase):
            raise ValueError(f"phase must be finite, got {self.phase!r}")
        object.__setattr__(self, "phase", wrap_phase(self.phase))


@dataclass(frozen=True)
class PortIntensities:
    constructive: float
    destructive: float

    @property
    def total(self) -> float:
        return self.constructive + self.destructive


def port_intensities(mu_a, mu_b, delta_phi, visibility=1.0):
    """Vectorised beam-splitter outputs; returns (constructive, destructive).

    ``visibility`` is the fringe contrast of the interferometer (mode overlap).
    It scales only the interference term, so total energy is conserved.
    """
    mu_a = np.asarray(mu_a, dtype=float)
    mu_b = np.asarray(mu_b, dtype=float)
    mean = 0.5 * (mu_a + mu_b)
    cross = visibility * np.sqrt(mu_a * mu_b) * np.cos(delta_phi)
    # clip guards the -0.0 / 1e-17 residue at perfect cancellation
    return np.maximum(mean + cross, 0.0), np.maximum(mean - cross, 0.0)


def interfere_at_bs(a: CoherentBin, b: CoherentBin, visibility: float = 1.0) -> PortIntensities:
    c, d = port_intensities(a.mean_photons, b.mean_photons, a.phase - b.phase, visibility)
    return PortIntensities(float(c), float(d))


def click_probability(mu_at_detector, eta_det, p_dark):
    """Threshold detector: 1 - (1 - p_dark) * exp(-eta_det * mu).

    Works elementwise on arrays. Negative mean photon numbers are rejected.
    """
    mu = np.asarray(mu_at_detector, dtype=float)
    if np.any(mu < 0):
        raise ValueError("mean photon number at the detector must be >= 0")
    if not (0.0 <= eta_det <= 1.0):
        raise ValueError(f"eta_det must lie in [0, 1], got {eta_det!r}")
    if np.any((np.asarray(p_dark) < 0) | (np.asarray(p_dark) > 1)):
        raise ValueError("p_dark must lie in [0, 1]")
    # 1 - (1-p) e^{-x} = p + (1-p)(1 - e^{-x}); expm1 keeps precision at tiny x
    p = np.asarray(p_dark, dtype=float)
    out = p - (1.0 - p) * np.expm1(-eta_det * mu)
    if out.ndim == 0:
        return float(out)
    return out


def predict_pattern(frame_a, frame_b, visibility: float = 1.0) -> list[PortIntensities]:
    """Bin-wise interference of two three-bin frames (classical pattern prediction)."""
    bins_a, bins_b = frame_a.bins, frame_b.bins
    if len(bins_a) != len(bins_b):
        raise ValueError("frames must have the same number of bins")
    for x, y in zip(bins_a, bins_b):
        if not math.isclose(x.mean_photons, y.mean_photons, rel_tol=1e-12, abs_tol=0.0):
            raise ValueError("predict_pattern expects equal per-bin intensities")
    return [interfere_at_bs(x, y, visibility) for x, y in zip(bins_a, bins_b)]
