"""Fiber loss, Sagnac-residual phase drift and Rayleigh backscatter noise."""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

SPEED_OF_LIGHT = 299_792_458.0  # m/s
DEFAULT_GROUP_INDEX = 1.468  # SMF-28 at 1550 nm


@dataclass(frozen=True)
class FiberSpec:
    length_km: float
    alpha_db_per_km: float = 0.2

    def __post_init__(self):
        if not (self.length_km >= 0.0 and math.isfinite(self.length_km)):
            raise ValueError(f"length_km must be finite and >= 0, got {self.length_km!r}")
        if not (self.alpha_db_per_km >= 0.0 and math.isfinite(self.alpha_db_per_km)):
            raise ValueError(f"alpha_db_per_km must be finite and >= 0, got {self.alpha_db_per_km!r}")

    @property
    def loss_db(self) -> float:
        return self.alpha_db_per_km * self.length_km


def transmittance(f: FiberSpec) -> float:
    return 10.0 ** (-f.loss_db / 10.0)


def one_way_delay(length_km: float, group_index: float = DEFAULT_GROUP_INDEX) -> float:
    return length_km * 1e3 * group_index / SPEED_OF_LIGHT


def loop_delay(alice: FiberSpec, bob: FiberSpec, group_index: float = DEFAULT_GROUP_INDEX) -> float:
    """Traversal time of the Charlie -> Alice -> Charlie -> Bob -> Charlie loop, in seconds."""
    return 2.0 * one_way_delay(alice.length_km + bob.length_km, group_index)


@dataclass(frozen=True)
class Disturbance:
    """A phase step injected directly into the relative phase during [start_s, end_s)."""

    start_s: float
    end_s: float
    phase_rad: float = math.pi

    def __post_init__(self):
        if not self.end_s > self.start_s:
            raise ValueError(f"disturbance must have end_s > start_s, got [{self.start_s}, {self.end_s})")


def _check_schedule(schedule):
    for prev, cur in zip(schedule, schedule[1:]):
        if cur.start_s < prev.end_s:
            raise ValueError("disturbance schedule must be time-ordered and non-overlapping")


@dataclass
class PhaseDriftProcess:
    """Lazily sampled Wiener phase path plus a deterministic disturbance schedule.

    The path is only realised at the times that are queried. Points beyond the
    sampled range extend it with independent Gaussian increments; points that
    fall between sampled knots are drawn from the Brownian bridge, so the path
    stays a consistent Wiener process whatever order queries arrive in.
    Single owner: the sampled knots are mutable state.
    """

    drift_std_rad_per_sqrt_s: float
    disturbance_schedule: list[Disturbance] = field(default_factory=list)
    seed: int | np.random.SeedSequence | None = None
    start_phase: float = 0.0

    def __post_init__(self):
        if not (self.drift_std_rad_per_sqrt_s >= 0.0 and math.isfinite(self.drift_std_rad_per_sqrt_s)):
            raise ValueError("drift_std_rad_per_sqrt_s must be finite and >= 0")
        self.disturbance_schedule = list(self.disturbance_schedule)
        _check_schedule(self.disturbance_schedule)
        self._rng = np.random.default_rng(self.seed)
        self._times = np.empty(0)
        self._values = np.empty(0)

    @property
    def current_phase(self) -> float:
        """Drift value at the latest sampled time (start_phase before any sampling)."""
        return float(self._values[-1]) if self._values.size else self.start_phase

    @property
    def sampled_times(self) -> np.ndarray:
        return self._times.copy()

    def drift_at(self, times) -> np.ndarray:
        t = np.atleast_1d(np.asarray(times, dtype=float))
        uniq = np.unique(t)
        self._realise(uniq)
        idx = np.searchsorted(self._times, t)
        out = self._values[idx]
        return out if np.ndim(times) else float(out[0])

    def disturbance_at(self, times):
        t = np.asarray(times, dtype=float)
        out = np.zeros(t.shape)
        for d in self.disturbance_schedule:
            out = out + np.where((t >= d.start_s) & (t < d.end_s), d.phase_rad, 0.0)
        return out if out.ndim else float(out)

    def phase_at(self, times):
        return self.drift_at(times) + self.disturbance_at(times)

    def _realise(self, uniq: np.ndarray) -> None:
        sigma = self.drift_std_rad_per_sqrt_s
        if self._times.size == 0:
            # anchor the path at the earliest requested time
            self._times = uniq[:1].copy()
            self._values = np.array([self.start_phase])
        new = uniq[~np.isin(uniq, self._times)]
        if new.size == 0:
            return
        ahead = new[new > self._times[-1]]
        inner = new[new < self._times[-1]]
        # knots before the first sample are handled by the scalar path below
        if ahead.size:
            steps = np.diff(np.concatenate(([self._times[-1]], ahead)))
            incr = sigma * np.sqrt(steps) * self._rng.standard_normal(ahead.size)
            vals = self._values[-1] + np.cumsum(incr)
            self._times = np.concatenate((self._times, ahead))
            self._values = np.concatenate((self._values, vals))
        for t in inner:
            self._insert_one(float(t), sigma)

    def _insert_one(self, t: float, sigma: float) -> None:
        i = int(np.searchsorted(self._times, t))
        if i == 0:
            v = self._values[0] + sigma * math.sqrt(self._times[0] - t) * self._rng.standard_normal()
        else:
            t0, t1 = self._times[i - 1], self._times[i]
            v0, v1 = self._values[i - 1], self._values[i]
            frac = (t - t0) / (t1 - t0)
            mean = v0 + frac * (v1 - v0)
            std = sigma * math.sqrt((t - t0) * (t1 - t) / (t1 - t0))
            v = mean + std * self._rng.standard_normal()
        self._times = np.insert(self._times, i, t)
        self._values = np.insert(self._values, i, v)


def sagnac_residual_phase(p: PhaseDriftProcess, loop_delay_s: float, t):
    """Relative phase left over after common-path compensation at time(s) ``t``.

    Drift seen by the two counter-propagating pulses differs by the change of
    the fiber phase over one loop traversal, phi(t) - phi(t - delay). Scheduled
    disturbances are fast enough to escape compensation and add directly.
    """
    if loop_delay_s < 0:
        raise ValueError("loop_delay_s must be >= 0")
    t = np.asarray(t, dtype=float)
    if loop_delay_s == 0.0 or p.drift_std_rad_per_sqrt_s == 0.0:
        residual = np.zeros(t.shape)
    else:
        both = p.drift_at(np.concatenate((np.atleast_1d(t - loop_delay_s), np.atleast_1d(t))))
        n = np.atleast_1d(t).size
        residual = (both[n:] - both[:n]).reshape(t.shape)
    out = residual + p.disturbance_at(t)
    return out if np.ndim(out) else float(out)


@dataclass(frozen=True)
class BackscatterParams:
    repetition_rate_hz: float = 31.25e6
    mean_photons_out: float = 40.0
    beta: float = 1e-4
    gate_on_s: float = 3e-9
    eta_det: float = 0.1

    def __post_init__(self):
        if not self.repetition_rate_hz > 0:
            raise ValueError("repetition_rate_hz must be > 0")
        if not self.mean_photons_out > 0:
            raise ValueError("mean_photons_out must be > 0")
        if not self.beta >= 0:
            raise ValueError("beta must be >= 0")
        if not self.gate_on_s > 0:
            raise ValueError("gate_on_s must be > 0")
        if not 0.0 <= self.eta_det <= 1.0:
            raise ValueError("eta_det must lie in [0, 1]")


def backscatter_click_probability(bp: BackscatterParams, f: FiberSpec) -> float:
    """Per-gate click probability from Rayleigh backscatter of the outbound pulses.

    P_B = 2 (1 - eta) N mu_out beta t_on eta_det, the 2 covering both arms.
    """
    eta = transmittance(f)
    p = 2.0 * (1.0 - eta) * bp.repetition_rate_hz * bp.mean_photons_out * bp.beta * bp.gate_on_s * bp.eta_det
    if p > 1.0:
        warnings.warn(f"backscatter click probability {p:.3g} exceeds 1; clamped", RuntimeWarning, stacklevel=2)
        return 1.0
    return p
