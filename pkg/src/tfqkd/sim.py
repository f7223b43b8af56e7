"""Seeded Monte Carlo of the three-bin protocol, parameter sweeps and calibration.

Sampling is exact but sparse. Each frame offers six independent click
opportunities (three true bins times two ports). A bound ``p_ub`` on any
opportunity's click probability is known from the configuration, so the
sampler first draws the Bernoulli(p_ub) candidate opportunities and then
accepts each with probability p / p_ub once the frame's bits and residual
phase are known (thinning). Frames with no candidate can never click and
cost nothing, which keeps 1e8-frame runs at long distance cheap.

Determinism: frames are cut into fixed-size blocks whose random streams are
derived from (seed, block index), independent of the worker count. The drift
path is realised afterwards, sequentially, at exactly the frame times that
need it, so parallel and serial runs produce identical outputs.
"""
from __future__ import annotations

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from typing import Iterator

import numpy as np
from scipy.optimize import brentq

from .analysis import RunStats, analytic_skr, event_probabilities, secure_key_rate
from .channel import PhaseDriftProcess, sagnac_residual_phase
from .config import SimConfig, SweepSpec, apply_sweep_value
from .optics import click_probability
from .protocol import Announcement, Port, SiftedRecord, window_flip_decisions
from .timing import assign_offsets

log = logging.getLogger(__name__)

_BLOCK_STREAM = 0
_DRIFT_STREAM = 1
_SWEEP_STREAM = 2

RECORD_DTYPE = np.dtype([
    ("frame_index", np.int64), ("bin", np.int8), ("port", np.int8),
    ("alice_bit", np.int8), ("bob_bit", np.int8), ("corrected", np.bool_),
])


def click_bound(cfg: SimConfig) -> float:
    """Upper bound on the click probability of any (bin, port) opportunity."""
    mu_a, mu_b = cfg.arrival_mu()
    brightest = 0.5 * (mu_a + mu_b) + cfg.fringe_visibility * math.sqrt(mu_a * mu_b)
    return click_probability(brightest, cfg.detector.eta_det, cfg.noise_per_bin())


@dataclass
class _BlockDraw:
    frames: np.ndarray  # global indices of frames holding a candidate, sorted
    bits: np.ndarray  # (len(frames), 4) = a1, a2, b1, b2
    slot_frame: np.ndarray  # candidate -> row of ``frames``
    slot_event: np.ndarray  # candidate -> 2*(true bin - 1) + port
    u: np.ndarray
    pos: np.ndarray
    jitter: np.ndarray


def _block_rng(seed: int, block: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(_BLOCK_STREAM, block)))


def _draw_slots(rng: np.random.Generator, n: int, p_ub: float) -> np.ndarray:
    n_slots = 6 * n
    k = int(rng.binomial(n_slots, p_ub)) if p_ub > 0 else 0
    if k == 0:
        return np.empty(0, dtype=np.int64)
    return np.sort(rng.choice(n_slots, size=k, replace=False))


def _candidate_frames(seed: int, block: int, start: int, n: int, p_ub: float) -> np.ndarray:
    """Frames of a block that hold at least one candidate click (first pass)."""
    slots = _draw_slots(_block_rng(seed, block), n, p_ub)
    return np.unique(slots // 6) + start


def _draw_block(seed: int, block: int, start: int, n: int, p_ub: float, pattern) -> _BlockDraw:
    rng = _block_rng(seed, block)
    slots = _draw_slots(rng, n, p_ub)
    k = slots.size
    u = rng.random(k)
    pos = rng.random(k)
    jitter = rng.standard_normal(k)
    local, slot_frame = np.unique(slots // 6, return_inverse=True)
    if pattern is None:
        bits = rng.integers(0, 2, size=(local.size, 4), dtype=np.int8)
    else:
        bits = np.tile(np.asarray(pattern, dtype=np.int8), (local.size, 1))
    return _BlockDraw(local + start, bits, slot_frame.ravel(), (slots % 6).astype(np.int8), u, pos, jitter)


@dataclass
class _BlockOutcome:
    frames: np.ndarray  # candidate frames of the block
    observed: np.ndarray  # (len(frames), 6) accepted, labelled click per (bin, port)
    bits: np.ndarray


def _simulate_block(cfg: SimConfig, block: int, start: int, n: int, p_ub: float, theta: np.ndarray) -> _BlockOutcome:
    """Second pass over a block: re-draw its stream and resolve every candidate click."""
    pattern = cfg.pattern_bits() if cfg.pattern is not None else None
    d = _draw_block(cfg.seed, block, start, n, p_ub, pattern)
    true_bin = d.slot_event // 2
    port = d.slot_event % 2
    if d.slot_frame.size:
        p_all = event_probabilities(cfg, d.bits[d.slot_frame], theta[d.slot_frame])
        p = p_all[np.arange(d.slot_frame.size), true_bin, port]
    else:
        p = np.empty(0)
    accepted = d.u * p_ub < p
    offset = (true_bin + d.pos) * cfg.grid.bin_width_s + cfg.detector.jitter_s * d.jitter
    label = assign_offsets(offset, cfg.grid, cfg.guard)
    keep = accepted & (label > 0)
    observed = np.zeros((d.frames.size, 6), dtype=bool)
    observed[d.slot_frame[keep], 2 * (label[keep] - 1) + port[keep]] = True
    return _BlockOutcome(d.frames, observed, d.bits)


def _first_pass_task(args):
    return _candidate_frames(*args)


def _second_pass_task(args):
    return _simulate_block(*args)


@dataclass
class RunResult:
    config: SimConfig
    stats: RunStats
    block_stats: list[RunStats]
    records: np.ndarray  # RECORD_DTYPE, ordered by frame
    flipped_windows: np.ndarray
    flagged_windows: np.ndarray

    def iter_records(self) -> Iterator[SiftedRecord]:
        for r in self.records:
            port = Port.DESTRUCTIVE if r["port"] else Port.CONSTRUCTIVE
            yield SiftedRecord(
                Announcement(int(r["frame_index"]), int(r["bin"]), port),
                int(r["alice_bit"]), int(r["bob_bit"]), bool(r["corrected"]),
            )

    def segment_qber(self, start_frame: int, end_frame: int, corrected: bool = True) -> float | None:
        rec = self.records
        sel = (rec["frame_index"] >= start_frame) & (rec["frame_index"] < end_frame)
        if not sel.any():
            return None
        err = rec["alice_bit"][sel] != rec["bob_bit"][sel]
        if not corrected:
            err = err ^ rec["corrected"][sel]
        return float(err.mean())

    def summary(self) -> dict:
        s = self.stats
        params = self.config.key_rate
        has_key = s.sifted_bits > 0
        return {
            "frames": s.frames_simulated,
            "seed": self.config.seed,
            "visibility": s.visibility,
            "pattern_visibility": s.pattern_visibility,
            "e_b": s.e_b,
            "e_b_uncorrected": s.e_b_uncorrected,
            "R_sift": s.r_sift,
            "R": secure_key_rate(s, params) if has_key else 0.0,
            "R_uncorrected": secure_key_rate(s, params, corrected=False) if has_key else 0.0,
            "inconclusive_fraction": s.inconclusive / s.frames_simulated,
            "sifted_bits": s.sifted_bits,
            "errors": s.errors,
        }


def _map(fn, tasks, workers: int):
    if workers > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(fn, tasks, chunksize=max(1, len(tasks) // (4 * workers))))
    return [fn(t) for t in tasks]


def run(config: SimConfig) -> RunResult:
    cfg = config.check()
    p_ub = click_bound(cfg)
    blocks = [(b, s, min(cfg.block_frames, cfg.frames - s))
              for b, s in enumerate(range(0, cfg.frames, cfg.block_frames))]

    # pass 1: which frames can click at all
    cand = _map(_first_pass_task, [(cfg.seed, b, s, n, p_ub) for b, s, n in blocks], cfg.workers)

    # the drift path is realised sequentially at exactly those frames
    frames = np.concatenate(cand) if cand else np.empty(0, dtype=np.int64)
    drift = PhaseDriftProcess(
        cfg.drift.std_rad_per_sqrt_s,
        list(cfg.drift.disturbances),
        seed=np.random.SeedSequence(cfg.seed, spawn_key=(_DRIFT_STREAM,)),
    )
    theta = np.atleast_1d(sagnac_residual_phase(drift, cfg.loop_delay_s(), frames * cfg.grid.frame_period_s))
    bounds = np.cumsum([0] + [c.size for c in cand])

    # pass 2: resolve clicks block by block
    outcomes = _map(
        _second_pass_task,
        [(cfg, b, s, n, p_ub, theta[bounds[b]:bounds[b + 1]]) for b, s, n in blocks],
        cfg.workers,
    )
    return _collect(cfg, outcomes)


def _collect(cfg: SimConfig, outcomes: list[_BlockOutcome]) -> RunResult:
    frames = np.concatenate([o.frames for o in outcomes])
    observed = np.concatenate([o.observed for o in outcomes]).reshape(-1, 6)
    bits = np.concatenate([o.bits for o in outcomes]).reshape(-1, 4)

    key = observed[:, 2:]
    n_key = key.sum(axis=1)
    concl = n_key == 1
    incon = n_key >= 2

    code = np.argmax(key[concl], axis=1)  # 0: 2C, 1: 2D, 2: 3C, 3: 3D
    r_bin = (code // 2 + 2).astype(np.int8)
    r_port = (code % 2).astype(np.int8)
    r_bits = bits[concl]
    alice_bit = np.where(r_bin == 2, r_bits[:, 0], r_bits[:, 1]).astype(np.int8)
    bob_raw = np.where(r_bin == 2, r_bits[:, 2], r_bits[:, 3]).astype(np.int8)
    bob_bit = bob_raw ^ r_port
    r_frames = frames[concl]

    n_windows = -(-cfg.frames // cfg.flip.window_frames)
    if cfg.flip.enabled:
        win = frames // cfg.flip.window_frames
        c1 = np.bincount(win[observed[:, 0]], minlength=n_windows)
        d1 = np.bincount(win[observed[:, 1]], minlength=n_windows)
        flip_w, flagged_w = window_flip_decisions(c1, d1, cfg.flip.threshold, cfg.flip.mode)
        corrected = flip_w[r_frames // cfg.flip.window_frames]
    else:
        flip_w = np.zeros(n_windows, dtype=bool)
        flagged_w = np.zeros(n_windows, dtype=bool)
        corrected = np.zeros(r_frames.size, dtype=bool)

    records = np.empty(r_frames.size, dtype=RECORD_DTYPE)
    records["frame_index"] = r_frames
    records["bin"] = r_bin
    records["port"] = r_port ^ corrected
    records["alice_bit"] = alice_bit
    records["bob_bit"] = bob_bit ^ corrected
    records["corrected"] = corrected

    block_stats = _block_stats(cfg, frames, observed, incon, records, bob_bit != alice_bit)
    total = RunStats()
    for b in block_stats:
        total = total + b
    return RunResult(cfg, total, block_stats, records, flip_w, flagged_w)


def _block_stats(cfg, frames, observed, incon, records, err_uncorrected) -> list[RunStats]:
    nb = -(-cfg.frames // cfg.block_frames)
    fb = frames // cfg.block_frames
    rb = records["frame_index"] // cfg.block_frames
    counts = np.zeros((nb, 6), dtype=np.int64)
    for c in range(6):
        counts[:, c] = np.bincount(fb[observed[:, c]], minlength=nb)
    sifted = np.bincount(rb, minlength=nb)
    errors = np.bincount(rb[records["alice_bit"] != records["bob_bit"]], minlength=nb)
    errors_u = np.bincount(rb[err_uncorrected], minlength=nb)
    corrected = np.bincount(rb[records["corrected"]], minlength=nb)
    n_incon = np.bincount(fb[incon], minlength=nb)
    sizes = np.minimum(cfg.block_frames, cfg.frames - np.arange(nb) * cfg.block_frames)
    out = []
    for i in range(nb):
        out.append(RunStats(
            counts[i].reshape(3, 2), int(sifted[i]), int(errors[i]), int(errors_u[i]), int(corrected[i]),
            int(sizes[i]), int(n_incon[i]), int(sizes[i] - sifted[i] - n_incon[i]),
        ))
    return out


def derived_seed(seed: int, index: int) -> int:
    ss = np.random.SeedSequence(seed, spawn_key=(_SWEEP_STREAM, index))
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def sweep(spec: SweepSpec, base: SimConfig) -> list[dict]:
    """One summary row per grid value; failures are recorded and the sweep continues."""
    errs = spec.validate()
    if errs:
        raise ValueError("; ".join(errs))
    rows = []
    for i, value in enumerate(spec.values):
        seed = base.seed if spec.seed_mode == "common" else derived_seed(base.seed, i)
        row = {"variable": spec.variable, "value": value}
        try:
            cfg = replace(base, seed=seed, frames=spec.frames_per_point or base.frames)
            cfg = apply_sweep_value(cfg, spec.variable, value)
            row.update(run(cfg).summary())
            row["status"] = "ok"
        except Exception as exc:  # one bad point must not sink the sweep
            log.warning("sweep point %s=%r failed: %s", spec.variable, value, exc)
            row.update({"frames": spec.frames_per_point or base.frames, "seed": seed, "status": f"error: {exc}"})
        rows.append(row)
    return rows


def disturbance_experiment(base: SimConfig, segment: tuple[int, int], phase_rad: float = math.pi) -> dict:
    """QBER inside a disturbed segment with flip correction off and on.

    A single run supplies both numbers: records carry their correction flag,
    so undoing the correction recovers the uncorrected stream exactly.
    """
    from .channel import Disturbance

    start, end = segment
    if not 0 <= start < end <= base.frames:
        raise ValueError(f"segment {segment} must lie within the {base.frames}-frame run")
    T = base.grid.frame_period_s
    cfg = replace(
        base,
        drift=replace(base.drift, disturbances=(Disturbance(start * T, end * T, phase_rad),)),
        flip=replace(base.flip, enabled=True),
    )
    res = run(cfg)
    rec = res.records
    outside = (rec["frame_index"] < start) | (rec["frame_index"] >= end)
    base_err = rec["alice_bit"][outside] != rec["bob_bit"][outside]
    return {
        "segment": (start, end),
        "baseline_qber": float(base_err.mean()) if base_err.size else None,
        "segment_qber_uncorrected": res.segment_qber(start, end, corrected=False),
        "segment_qber_corrected": res.segment_qber(start, end, corrected=True),
        "overall_qber_uncorrected": res.stats.e_b_uncorrected,
        "overall_qber_corrected": res.stats.e_b,
        "flipped_windows": int(res.flipped_windows.sum()),
        "flagged_windows": int(res.flagged_windows.sum()),
        "result": res,
    }


# --- calibration against the closed-form model -----------------------------

def calibrate_fringe_visibility(cfg: SimConfig, target_visibility: float) -> float:
    """Fringe contrast at which the expected sifted-stream visibility equals the target."""
    def gap(v):
        return analytic_skr(replace(cfg, fringe_visibility=v)).visibility - target_visibility
    return brentq(gap, 1e-6, 1.0, xtol=1e-12)


def calibrate_drift(cfg: SimConfig, target_visibility: float) -> float:
    """Wiener strength (rad/sqrt(s)) giving the target expected visibility for cfg's loop."""
    def gap(d):
        return analytic_skr(replace(cfg, drift=replace(cfg.drift, std_rad_per_sqrt_s=d))).visibility - target_visibility
    hi = 1.0
    while gap(hi) > 0:
        hi *= 2.0
        if hi > 1e6:
            raise ValueError("target visibility not reachable by phase drift alone")
    if gap(0.0) < 0:
        raise ValueError("target visibility is below what noise alone already gives")
    return brentq(gap, 0.0, hi, xtol=1e-12)


def calibrate_mu(cfg: SimConfig, target_rate: float, lo: float = 1e-4, hi: float = 10.0) -> float:
    """Launched mean photon number per bin at which the expected key rate hits the target."""
    def gap(mu):
        return analytic_skr(replace(cfg, mu_per_bin=mu)).R - target_rate
    return brentq(gap, lo, hi, xtol=1e-12)


def calibrate_visibility_model(
    cfg: SimConfig,
    near_visibility: float,
    far_visibility: float,
    far_km: float = 50.0,
    tol: float = 1e-9,
    max_iter: int = 100,
) -> SimConfig:
    """Fit fringe contrast (spool-free anchor) and drift strength (far anchor) jointly.

    The two anchors interact weakly: drift still acts over the patch cords
    and fringe contrast scales every distance. Alternating one-dimensional
    solves converges in a handful of rounds.
    """
    from .channel import FiberSpec

    near = replace(cfg, alice=FiberSpec(0.0, cfg.alice.alpha_db_per_km))
    far = replace(cfg, alice=FiberSpec(far_km, cfg.alice.alpha_db_per_km))
    v, d = cfg.fringe_visibility, cfg.drift.std_rad_per_sqrt_s
    for _ in range(max_iter):
        v_new = calibrate_fringe_visibility(replace(near, drift=replace(cfg.drift, std_rad_per_sqrt_s=d)), near_visibility)
        d_new = calibrate_drift(replace(far, fringe_visibility=v_new), far_visibility)
        done = abs(v_new - v) < tol and abs(d_new - d) < tol * max(1.0, d)
        v, d = v_new, d_new
        if done:
            break
    else:
        raise RuntimeError("visibility calibration did not converge")
    return replace(cfg, fringe_visibility=v, drift=replace(cfg.drift, std_rad_per_sqrt_s=d))
