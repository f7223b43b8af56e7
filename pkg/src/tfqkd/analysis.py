"""Visibility, QBER, entropy and key-rate figures, plus the closed-form run model."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Callable, Sequence

import numpy as np

from .optics import click_probability, port_intensities
from .timing import transfer_matrix

if TYPE_CHECKING:
    from .config import SimConfig


def visibility(correct_counts: int, error_counts: int) -> float | None:
    total = correct_counts + error_counts
    if total <= 0:
        return None
    return (correct_counts - error_counts) / total


def pattern_visibility(n1: int, n2: int, n3: int) -> float | None:
    """Contrast for the 0-0-pi test pattern: bins 1 and 2 bright, bin 3 dark."""
    total = n1 + n2 + n3
    if total <= 0:
        return None
    return ((n1 + n2) - n3) / total


def binary_entropy(x):
    x = np.asarray(x, dtype=float)
    if np.any((x < 0) | (x > 1)):
        raise ValueError("binary_entropy is defined on [0, 1]")
    with np.errstate(divide="ignore", invalid="ignore"):
        h = -x * np.log2(x) - (1 - x) * np.log2(1 - x)
    h = np.where((x == 0) | (x == 1), 0.0, h)
    return float(h) if h.ndim == 0 else h


@dataclass(frozen=True)
class KeyRateParams:
    """How the phase-error rate is bounded, and the sifting multiplicity.

    e_p_policy is one of "equal_to_eb", "scaled" (e_p = factor * e_b) or
    "fixed" (e_p = value); the result is clipped to [0, 0.5].
    """

    e_p_policy: str = "equal_to_eb"
    e_p_parameter: float | None = None
    sift_factor: float = 4.0

    def __post_init__(self):
        if self.e_p_policy not in ("equal_to_eb", "scaled", "fixed"):
            raise ValueError(f"unknown e_p policy {self.e_p_policy!r}")
        if self.e_p_policy != "equal_to_eb":
            if self.e_p_parameter is None or not self.e_p_parameter >= 0:
                raise ValueError(f"e_p policy {self.e_p_policy!r} needs a nonnegative parameter")
            if self.e_p_policy == "fixed" and self.e_p_parameter > 0.5:
                raise ValueError("fixed e_p must lie in [0, 0.5]")
        if not self.sift_factor > 0:
            raise ValueError("sift_factor must be > 0")

    def phase_error(self, e_b: float) -> float:
        if self.e_p_policy == "equal_to_eb":
            e_p = e_b
        elif self.e_p_policy == "scaled":
            e_p = self.e_p_parameter * e_b
        else:
            e_p = self.e_p_parameter
        return min(max(e_p, 0.0), 0.5)


def key_rate(r_sift: float, e_b: float, params: KeyRateParams = KeyRateParams()) -> float:
    """R = R_sift [1 - h(e_b) - h(e_p)], floored at zero."""
    bracket = 1.0 - binary_entropy(e_b) - binary_entropy(params.phase_error(e_b))
    return r_sift * max(bracket, 0.0)


@dataclass
class RunStats:
    """Aggregate counters for a run. Merging is associative and commutative."""

    counts: np.ndarray = field(default_factory=lambda: np.zeros((3, 2), dtype=np.int64))
    sifted_bits: int = 0
    errors: int = 0
    errors_uncorrected: int = 0
    corrected_bits: int = 0
    frames_simulated: int = 0
    inconclusive: int = 0
    no_key_click: int = 0

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64).reshape(3, 2)
        if np.any(self.counts < 0) or min(self.sifted_bits, self.errors, self.frames_simulated, self.inconclusive) < 0:
            raise ValueError("RunStats counts must be >= 0")
        if self.errors > self.sifted_bits or self.errors_uncorrected > self.sifted_bits:
            raise ValueError("errors cannot exceed sifted bits")

    def __add__(self, other: "RunStats") -> "RunStats":
        return RunStats(
            self.counts + other.counts,
            self.sifted_bits + other.sifted_bits,
            self.errors + other.errors,
            self.errors_uncorrected + other.errors_uncorrected,
            self.corrected_bits + other.corrected_bits,
            self.frames_simulated + other.frames_simulated,
            self.inconclusive + other.inconclusive,
            self.no_key_click + other.no_key_click,
        )

    def __eq__(self, other):
        if not isinstance(other, RunStats):
            return NotImplemented
        return self.as_tuple() == other.as_tuple()

    def as_tuple(self):
        return (
            tuple(int(x) for x in self.counts.ravel()),
            self.sifted_bits, self.errors, self.errors_uncorrected, self.corrected_bits,
            self.frames_simulated, self.inconclusive, self.no_key_click,
        )

    @property
    def conclusive(self) -> int:
        return self.sifted_bits

    @property
    def e_b(self) -> float | None:
        return self.errors / self.sifted_bits if self.sifted_bits else None

    @property
    def e_b_uncorrected(self) -> float | None:
        return self.errors_uncorrected / self.sifted_bits if self.sifted_bits else None

    @property
    def visibility(self) -> float | None:
        return visibility(self.sifted_bits - self.errors, self.errors)

    @property
    def pattern_visibility(self) -> float | None:
        n1, n2, n3 = (int(x) for x in self.counts[:, 0])
        return pattern_visibility(n1, n2, n3)

    @property
    def r_sift(self) -> float:
        return self.sifted_bits / self.frames_simulated if self.frames_simulated else 0.0


def secure_key_rate(stats: RunStats, params: KeyRateParams = KeyRateParams(), corrected: bool = True) -> float:
    """Secure bits per frame from measured counts.

    r is the per-class sifting probability sifted/(4 frames); R_sift = sift_factor * r.
    """
    if stats.sifted_bits <= 0:
        raise ValueError("secure_key_rate needs at least one sifted bit")
    r = stats.sifted_bits / (4.0 * stats.frames_simulated)
    errors = stats.errors if corrected else stats.errors_uncorrected
    return key_rate(params.sift_factor * r, errors / stats.sifted_bits, params)


def jackknife_se(parts: Sequence[RunStats], statistic: Callable[[RunStats], float]) -> float:
    """Delete-one jackknife standard error over contiguous batches.

    Batches much longer than the drift correlation time make this robust to
    the frame-to-frame correlation that a binomial error bar would ignore.
    """
    n = len(parts)
    if n < 2:
        return float("nan")
    total = parts[0]
    for p in parts[1:]:
        total = total + p
    leave_out = []
    for p in parts:
        rest = RunStats(
            total.counts - p.counts,
            total.sifted_bits - p.sifted_bits,
            total.errors - p.errors,
            total.errors_uncorrected - p.errors_uncorrected,
            total.corrected_bits - p.corrected_bits,
            total.frames_simulated - p.frames_simulated,
            total.inconclusive - p.inconclusive,
            total.no_key_click - p.no_key_click,
        )
        leave_out.append(statistic(rest))
    vals = np.asarray(leave_out, dtype=float)
    return float(math.sqrt((n - 1) / n * np.sum((vals - vals.mean()) ** 2)))


# --- closed-form expectation of a run ---------------------------------------

@dataclass(frozen=True)
class AnalyticPoint:
    e_b: float
    r_sift: float
    R: float
    visibility: float
    click_rates: np.ndarray  # (bin, port) probability of an accepted click per frame
    p_conclusive: float
    p_inconclusive: float
    p_no_key_click: float

    @property
    def pattern_visibility(self) -> float:
        n1, n2, n3 = self.click_rates[:, 0]
        return ((n1 + n2) - n3) / (n1 + n2 + n3)


_ALL_BITS = np.array([[a1, a2, b1, b2] for a1 in (0, 1) for a2 in (0, 1) for b1 in (0, 1) for b2 in (0, 1)])


def event_probabilities(cfg: "SimConfig", bits, theta):
    """Click probability per (true bin, port) for frames with the given bits and residual phase.

    bits has shape (..., 4) = (a1, a2, b1, b2); theta broadcasts against bits[..., 0].
    Returns an array of shape (..., 3, 2), ports ordered (C, D).
    """
    bits = np.asarray(bits)
    theta = np.asarray(theta, dtype=float)
    zeros = np.zeros(bits.shape[:-1])
    phase_a = np.pi * np.stack([zeros, bits[..., 0], bits[..., 1]], axis=-1)
    phase_b = np.pi * np.stack([zeros, bits[..., 2], bits[..., 3]], axis=-1) + theta[..., None]
    mu_a, mu_b = cfg.arrival_mu()
    c, d = port_intensities(mu_a, mu_b, phase_a - phase_b, cfg.fringe_visibility)
    q = cfg.noise_per_bin()
    eta = cfg.detector.eta_det
    return np.stack([click_probability(c, eta, q), click_probability(d, eta, q)], axis=-1)


def analytic_skr(cfg: "SimConfig", params: KeyRateParams | None = None, n_nodes: int = 48) -> AnalyticPoint:
    """Expected QBER, sifted rate and secure key rate of a run, in closed form.

    Integrates over the Gaussian Sagnac residual (Gauss-Hermite) and averages
    over the encoded bits. Clicks, jitter misassignment, guard rejection,
    dark and backscatter noise follow the same model the Monte Carlo samples.
    Disturbances and flip correction are not part of the steady-state model.
    """
    params = params or cfg.key_rate
    if cfg.pattern is not None:
        bits = np.array([cfg.pattern_bits()])
    else:
        bits = _ALL_BITS
    w_bits = np.full(len(bits), 1.0 / len(bits))

    s = cfg.residual_phase_std()
    if s > 0:
        x, wx = np.polynomial.hermite_e.hermegauss(n_nodes)
        theta, w_theta = s * x, wx / math.sqrt(2.0 * math.pi)
    else:
        theta, w_theta = np.zeros(1), np.ones(1)

    p = event_probabilities(cfg, bits[:, None, :], theta[None, :])  # (combo, node, bin, port)
    m = transfer_matrix(cfg.grid, cfg.guard, cfg.detector.jitter_s)  # (true bin, labelled bin)

    # per port: probability that no event lands in the key bins, and in each bin alone
    def prod_over_true_bins(lands):
        return np.prod(1.0 - p * lands[None, None, :, None], axis=2)  # (combo, node, port)

    none_key = prod_over_true_bins(m[:, 1] + m[:, 2])
    only2 = prod_over_true_bins(m[:, 2]) - none_key
    only3 = prod_over_true_bins(m[:, 1]) - none_key
    observed = np.stack([1.0 - prod_over_true_bins(m[:, k]) for k in range(3)], axis=2)  # (combo,node,bin,port)

    C, D = 0, 1
    ann = {
        (2, C): only2[..., C] * none_key[..., D],
        (3, C): only3[..., C] * none_key[..., D],
        (2, D): only2[..., D] * none_key[..., C],
        (3, D): only3[..., D] * none_key[..., C],
    }
    equal = {2: bits[:, 0] == bits[:, 2], 3: bits[:, 1] == bits[:, 3]}

    weight = w_bits[:, None] * w_theta[None, :]
    p_concl = 0.0
    p_err = 0.0
    for (b, port), prob in ann.items():
        wrong = ~equal[b] if port == C else equal[b]
        p_concl += float(np.sum(weight * prob))
        p_err += float(np.sum(weight * prob * wrong[:, None]))
    p_none = float(np.sum(weight * none_key[..., C] * none_key[..., D]))
    rates = np.einsum("cn,cnbp->bp", weight, observed)

    e_b = p_err / p_concl if p_concl > 0 else float("nan")
    R = key_rate(params.sift_factor * p_concl / 4.0, e_b, params) if p_concl > 0 else 0.0
    return AnalyticPoint(
        e_b=e_b,
        r_sift=p_concl,
        R=R,
        visibility=1.0 - 2.0 * e_b,
        click_rates=rates,
        p_conclusive=p_concl,
        p_inconclusive=1.0 - p_concl - p_none,
        p_no_key_click=p_none,
    )
