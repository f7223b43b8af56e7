"""End-to-end acceptance checks. Each test records one PASS/FAIL line."""
import math
import time
from dataclasses import replace

import mpmath
import numpy as np

from conftest import record_acceptance
from tfqkd.analysis import RunStats, analytic_skr, jackknife_se, secure_key_rate
from tfqkd.channel import BackscatterParams, Disturbance, FiberSpec, backscatter_click_probability
from tfqkd.config import SweepSpec, preset
from tfqkd.protocol import sifting_table_check
from tfqkd.sim import calibrate_visibility_model, disturbance_experiment, run, sweep


def test_1_sifting_table_equivalence():
    t0 = time.perf_counter()
    rows = sifting_table_check()
    elapsed = time.perf_counter() - t0
    combos = {(r["a1"], r["a2"], r["b1"], r["b2"]) for r in rows}
    relations = {(r["bin"], r["port"]): r["relation"] for r in rows}
    ok = (
        len(combos) == 16
        and all(r["pass"] for r in rows)
        and sum(r["alice_bit"] != r["bob_bit"] for r in rows) == 0
        and relations == {(2, "C"): "equal", (3, "C"): "equal", (2, "D"): "xor-one", (3, "D"): "xor-one"}
        and elapsed < 1.0
    )
    record_acceptance(1, ok, f"{len(rows)} outcomes over {len(combos)} combinations, 0 key errors, {elapsed * 1e3:.1f} ms")
    assert ok


def _mp_h(x):
    if x == 0 or x == 1:
        return mpmath.mpf(0)
    return -x * mpmath.log(x, 2) - (1 - x) * mpmath.log(1 - x, 2)


def test_2_numeric_fidelity():
    mpmath.mp.dps = 50
    rng = np.random.default_rng(20240611)
    worst_r = worst_b = 0.0
    for _ in range(100):
        frames = int(rng.integers(10**5, 10**10))
        sifted = int(rng.integers(1, frames // 4))
        errors = int(rng.integers(0, sifted // 9 + 1))
        got = secure_key_rate(RunStats(sifted_bits=sifted, errors=errors, errors_uncorrected=errors, frames_simulated=frames))
        eb = mpmath.mpf(errors) / sifted
        ref = 4 * (mpmath.mpf(sifted) / (4 * frames)) * max(1 - 2 * _mp_h(eb), 0)
        worst_r = max(worst_r, float(abs(got - ref) / ref) if ref else float(got != 0) * math.inf)

        n, mu, beta, t_on, eta_d = rng.uniform([1e6, 1, 1e-6, 1e-9, 0.01], [1e8, 100, 1e-4, 1e-8, 1.0])
        length, alpha = rng.uniform([0.1, 0.15], [150, 0.3])
        got = backscatter_click_probability(BackscatterParams(n, mu, beta, t_on, eta_d), FiberSpec(length, alpha))
        eta = mpmath.power(10, -mpmath.mpf(alpha) * mpmath.mpf(length) / 10)
        ref = 2 * (1 - eta) * mpmath.mpf(n) * mpmath.mpf(mu) * mpmath.mpf(beta) * mpmath.mpf(t_on) * mpmath.mpf(eta_d)
        worst_b = max(worst_b, float(abs(got - ref) / ref))

    point = backscatter_click_probability(BackscatterParams(), FiberSpec(50.0, 0.2))
    point_err = abs(point - 6.75e-5) / 6.75e-5
    ok = worst_r <= 1e-10 and worst_b <= 1e-10 and point_err <= 1e-12
    record_acceptance(
        2, ok,
        f"max rel err key rate {worst_r:.1e}, backscatter {worst_b:.1e}; 50 km P_B = {point!r} (rel err {point_err:.1e})",
    )
    assert ok


def test_3_visibility_vs_distance():
    target = {0.0: 0.90, 10.0: 0.897, 20.0: 0.88, 50.0: 0.878}
    base = calibrate_visibility_model(preset("visibility"), target[0.0], target[50.0])
    rows = sweep(SweepSpec("distance", tuple(target), frames_per_point=1_000_000), base)
    vis = [r["visibility"] for r in rows]
    dev = [100 * (v - target[r["value"]]) for v, r in zip(vis, rows)]
    monotone = all(a >= b for a, b in zip(vis, vis[1:]))
    within = all(abs(d) <= 1.5 for d in dev)
    ok = monotone and within
    shown = ", ".join(f"{r['value']:g} km {100 * v:.2f}%" for r, v in zip(rows, vis))
    record_acceptance(
        3, ok,
        f"{shown}; max |dev| {max(map(abs, dev)):.2f} pp; monotone={monotone} "
        f"(drift {base.drift.std_rad_per_sqrt_s:.4g} rad/sqrt(s), fringe {base.fringe_visibility:.5f})",
    )
    assert ok


def test_4_guard_band_plateau():
    base = preset("paper-table4")
    guards = tuple(float(g) for g in range(0, 451, 50))
    rows = sweep(SweepSpec("guard_band", guards), base)
    R = {r["value"]: r["R"] for r in rows}
    rises = R[50.0] > R[0.0]
    change = abs(R[450.0] - R[300.0]) / R[300.0] if R[300.0] > 0 else math.inf
    ok = rises and change < 0.05
    expected = {g: analytic_skr(replace(base, guard=replace(base.guard, guard_s=g * 1e-12))).R for g in (300.0, 450.0)}
    record_acceptance(
        4, ok,
        "R(g) = " + ", ".join(f"{g:g}:{R[g]:.2e}" for g in guards)
        + f"; rises={rises}; |R(450)-R(300)|/R(300) = {change:.0%} (expected {1 - expected[450.0] / expected[300.0]:.0%})",
    )
    assert ok


def test_5_key_rate_magnitude():
    res = run(preset("paper-table4"))
    s = res.summary()
    se = jackknife_se(res.block_stats, secure_key_rate)
    ok = 0.75e-5 <= s["R"] <= 3e-5
    record_acceptance(5, ok, f"R = {s['R']:.3e} +/- {se:.1e} bits/pulse at 50 km, QBER {s['e_b']:.4f}")
    assert ok


def test_6_analytic_vs_monte_carlo():
    base = preset("paper-table4")
    ok = True
    parts = []
    for km in (0.0, 20.0, 50.0):
        rates = {}
        for beta in (0.0, 1e-4):
            cfg = replace(base, alice=FiberSpec(km), backscatter=replace(base.backscatter, beta=beta))
            a = analytic_skr(cfg).R
            res = run(cfg)
            R = res.summary()["R"]
            se = jackknife_se(res.block_stats, secure_key_rate)
            z = (R - a) / se
            ok &= abs(z) < 4
            rates[beta] = a
            parts.append(f"{km:g}km/b={beta:g}: z={z:+.2f}")
        ok &= rates[1e-4] < rates[0.0]
    record_acceptance(6, ok, "; ".join(parts) + "; analytic R strictly lower for larger beta at every distance")
    assert ok


def test_7_flip_correction_recovery():
    cfg = preset("default")
    cfg = replace(cfg, drift=replace(cfg.drift, std_rad_per_sqrt_s=0.0))
    assert cfg.flip.window_frames == 1000 and cfg.flip.threshold == 0.0
    seg = (400_000, 600_000)  # 20 % of the 1e6 frames
    out = disturbance_experiment(cfg, seg)
    again = disturbance_experiment(cfg, seg)
    base = out["baseline_qber"]
    unc, cor = out["segment_qber_uncorrected"], out["segment_qber_corrected"]
    deterministic = out["result"].records.tobytes() == again["result"].records.tobytes()
    ok = unc >= 1 - 2 * base and cor <= 2 * base and deterministic
    record_acceptance(
        7, ok,
        f"baseline {base:.4f}, segment uncorrected {unc:.4f}, corrected {cor:.4f}, deterministic={deterministic}",
    )
    assert ok


def test_8_worker_invariance():
    cfg = replace(preset("default"), frames=2_000_000, block_frames=1 << 17, seed=12345)
    # a disturbance exercises the flip-correction path as well
    cfg = replace(cfg, drift=replace(cfg.drift, disturbances=(Disturbance(0.01, 0.02),)))
    results = {w: run(replace(cfg, workers=w)) for w in (1, 4, 8)}
    ref = results[1]
    same = all(
        r.records.tobytes() == ref.records.tobytes()
        and r.stats == ref.stats
        and np.array_equal(r.flipped_windows, ref.flipped_windows)
        and r.summary() == ref.summary()
        for r in results.values()
    )
    record_acceptance(8, same, f"1/4/8 workers, {len(ref.block_stats)} blocks, {ref.records.size} records identical={same}")
    assert same
