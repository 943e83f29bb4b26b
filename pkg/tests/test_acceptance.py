"""One check per acceptance criterion; each prints a PASS/FAIL line with the
measured numbers (collected again in the terminal summary)."""

import math
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest
from conftest import SEED, TRIALS, report

from uplink_vlp import experiments as ex
from uplink_vlp.bounds import (
    Fim,
    SingularFimError,
    crlb_room,
    crlb_rms,
    fim,
    lattice,
    lb_rms,
    los_gradient,
    qlb,
    weights,
)
from uplink_vlp.channel import ChannelParams, los_power
from uplink_vlp.estimator import FeatureSelection, SnrSpec, locate, rms_error_mc
from uplink_vlp.fingerprint import build_map, simulate_features
from uplink_vlp.regression import PolySurface, eval_surface, fit_poly, relative_residuals
from uplink_vlp.scene import make_grid

SMALL = Path(__file__).parent / "data" / "small.cfg"


def _fd_grad(f, theta, h=1e-5):
    x, y = theta
    return np.array([(f(x + h, y) - f(x - h, y)) / (2 * h), (f(x, y + h) - f(x, y - h)) / (2 * h)])


def _room_crlb(scene, surfaces, noise, f, q, pts):
    try:
        return crlb_room(scene, surfaces, noise, FeatureSelection(f), q, pts)
    except SingularFimError:
        return math.inf


def test_criterion_01_qlb():
    n = 10_000
    t0 = time.perf_counter()
    for _ in range(n):
        v = qlb(0.14)
    per_call = (time.perf_counter() - t0) / n
    # the printed 0.057154 is Delta/sqrt(6) = 0.0571548 cut at the sixth decimal
    ok = abs(v - 0.057154) < 1e-6 and round(v * 100, 1) == 5.7 and per_call < 1e-3
    report(1, ok, f"qlb(0.14 m) = {v:.7f} m (printed 0.057154, 5.7 cm), {per_call * 1e6:.2f} us per call")
    assert ok


def test_criterion_02_los_gradient(scene):
    rng = np.random.default_rng(2)
    em = scene.emitter_template
    pts = rng.uniform(0.05, 4.95, (1000, 2))
    dets = rng.integers(0, 4, 1000)
    t0 = time.perf_counter()
    worst = 0.0
    for (x, y), q in zip(pts, dets):
        det = scene.detectors[q]
        g = los_gradient((x, y), det, em)
        fd = _fd_grad(lambda a, b: los_power(em.at(a, b), det), (x, y))
        worst = max(worst, float(np.linalg.norm(g - fd) / max(np.linalg.norm(g), 1e-300)))
    dt = time.perf_counter() - t0
    ok = worst < 1e-6 and dt < 1.0
    report(2, ok, f"max relative error {worst:.2e} over 1000 points, {dt:.2f} s")
    assert ok


def test_criterion_03_fim_equivalence(scene, surfaces):
    noise = SnrSpec(30).noise(scene)
    sel = FeatureSelection(3)
    pts = lattice(scene.room, surfaces=surfaces)
    pts = pts[np.linspace(0, len(pts) - 1, 100).astype(int)]
    em = scene.emitter_template
    w = weights(noise, sel, 4)
    t0 = time.perf_counter()
    worst = 0.0
    for p in pts:
        J = fim(p, scene, surfaces, noise, sel, 4).matrix
        cols = []
        for q, det in enumerate(scene.detectors):
            spp, dtau = surfaces[q]
            cols.append(_fd_grad(lambda a, b: los_power(em.at(a, b), det), p))
            cols.append(_fd_grad(lambda a, b: eval_surface(spp, (a, b)), p))
            cols.append(_fd_grad(lambda a, b: eval_surface(dtau, (a, b)), p))
        H = np.column_stack(cols)
        J_fd = (H * w) @ H.T
        worst = max(worst, float(np.linalg.norm(J - J_fd) / np.linalg.norm(J_fd)))
    dt = time.perf_counter() - t0
    ok = worst < 1e-3 and dt < 10
    report(3, ok, f"max relative Frobenius error {worst:.2e} at 100 lattice points, {dt:.2f} s")
    assert ok


def test_criterion_04_crlb_slope(scene, surfaces):
    t0 = time.perf_counter()
    pts = lattice(scene.room, surfaces=surfaces)
    ratios = []
    for snr in (10, 30):
        a = crlb_room(scene, surfaces, SnrSpec(snr).noise(scene), FeatureSelection(3), 4, pts)
        b = crlb_room(scene, surfaces, SnrSpec(snr + 20).noise(scene), FeatureSelection(3), 4, pts)
        ratios.append(a / b)
    p = pts[37]
    one = crlb_rms(fim(p, scene, surfaces, SnrSpec(30).noise(scene), FeatureSelection(2), 2)) / \
        crlb_rms(fim(p, scene, surfaces, SnrSpec(50).noise(scene), FeatureSelection(2), 2))
    ratios.append(one)
    dt = time.perf_counter() - t0
    dev = max(abs(r / 10 - 1) for r in ratios)
    ok = dev < 1e-9 and dt < 1.0
    report(4, ok, f"CRLB ratio per 20 dB = {ratios[0]:.12f} (max deviation {dev:.1e}), {dt:.2f} s")
    assert ok


def test_criterion_05_ordering(scene, surfaces):
    t0 = time.perf_counter()
    noise = SnrSpec(30).noise(scene)
    pts = lattice(scene.room, surfaces=surfaces)
    c = {(q, f): _room_crlb(scene, surfaces, noise, f, q, pts) for q in (1, 2, 3, 4) for f in (1, 2, 3)}
    in_q = all(c[(q, f)] >= c[(q + 1, f)] for q in (1, 2, 3) for f in (1, 2, 3))
    in_f = all(c[(q, f)] >= c[(q, f + 1)] for q in (1, 2, 3, 4) for f in (1, 2))
    claim = c[(2, 2)] < c[(4, 1)]
    dt = time.perf_counter() - t0
    ok = in_q and in_f and claim and dt < 10
    report(5, ok, f"monotone in Q: {in_q}, in features: {in_f}; 2PD/2F {c[(2, 2)] * 100:.2f} cm "
                  f"vs 4PD/1F {c[(4, 1)] * 100:.2f} cm at 30 dB; {dt:.1f} s")
    assert ok


def test_criterion_06_noiseless_self_consistency(scene):
    t0 = time.perf_counter()
    params = ChannelParams()
    grid = make_grid(scene.room, 0.14, scene.emitter_template.position.z)
    fmap = build_map(scene, grid, params)
    cells = np.random.default_rng(6).choice(grid.n_cells, 100, replace=False)
    feats = simulate_features(scene, grid.xy[cells], params)
    noise = SnrSpec(math.inf).noise(scene)
    hits, twins = {}, {}
    for q in (1, 2, 3, 4):
        found = [locate(v[:q], fmap, noise, FeatureSelection(3))[0] for v in feats]
        hits[q] = sum(k == j for k, j in zip(cells, found))
        # misses whose chosen cell carries exactly the same fingerprint
        twins[q] = sum(k != j and np.array_equal(fmap.features[k, :q], fmap.features[j, :q])
                       for k, j in zip(cells, found))
    dt = time.perf_counter() - t0
    ok = all(h == 100 for h in hits.values()) and dt < 60
    report(6, ok, "recovered cells per Q: "
           + ", ".join(f"Q={q}: {h}/100" + (f" ({twins[q]} misses pick a cell with an identical "
                                             "fingerprint)" if twins[q] else "")
                       for q, h in hits.items())
           + f"; {dt:.1f} s incl. the 14 cm map")
    assert ok


def test_criterion_07_high_snr(scene, map14, truth):
    t0 = time.perf_counter()
    sel = FeatureSelection(3)
    mc = {snr: rms_error_mc(scene, map14, SnrSpec(snr), sel, TRIALS, SEED, q=4, truth=truth)
          for snr in (0, 10, 20, 30, 40, 50, 60)}
    lb = {snr: lb_rms(truth, map14, SnrSpec(snr).noise(scene), sel, 4) for snr in (40, 50, 60)}
    dt = time.perf_counter() - t0
    q = qlb(0.14)
    r50 = mc[50].rms
    in_band = q <= r50 <= 1.5 * q
    gaps = {s: abs(lb[s] - mc[s].rms) / mc[s].rms for s in lb}
    close = all(g < 0.10 for g in gaps.values())
    seq = [mc[s] for s in sorted(mc)]
    monotone = all(a.rms >= b.rms - 3 * (a.stderr + b.stderr) for a, b in zip(seq, seq[1:]))
    ok = in_band and close and monotone and dt < 1800
    report(7, ok, f"MC RMS at 50 dB = {r50 * 100:.2f} cm (band {q * 100:.2f}-{1.5 * q * 100:.2f}); "
                  "LB gap " + ", ".join(f"{s} dB {g * 100:.1f}%" for s, g in gaps.items())
           + f"; monotone in SNR: {monotone}; {dt:.0f} s")
    assert ok


def test_criterion_08_single_detector(scene, map14, truth):
    snr = SnrSpec(60)
    three = rms_error_mc(scene, map14, snr, FeatureSelection(3), TRIALS, SEED, q=1, truth=truth)
    one = rms_error_mc(scene, map14, snr, FeatureSelection(1), TRIALS, SEED, q=1, truth=truth)
    ok_abs = three.rms <= 0.35
    ok_ratio = one.rms > 3 * three.rms
    report(8, ok_abs and ok_ratio,
           f"1 PD at 60 dB: 3 features {three.rms * 100:.1f} cm (limit 35 cm), "
           f"1 feature {one.rms * 100:.1f} cm (ratio {one.rms / three.rms:.2f}, need > 3)")
    assert ok_abs and ok_ratio


def test_criterion_09_regression(scene, surfaces, dense10):
    xy = dense10.grid.xy
    worst = {"spp": 0.0, "dtau": 0.0}
    for q in range(scene.n_detectors):
        f = dense10.features[:, q]
        ok_rows = f[:, 3] > 0
        for s, col in zip(surfaces[q], (1, 2)):
            res = relative_residuals(s, xy, f[:, col], ok_rows)
            worst[s.feature] = max(worst[s.feature], max(res.values()))
    M = np.random.default_rng(9).normal(size=(5, 5))
    g = np.linspace(0, 5, 51)
    X, Y = np.meshgrid(g, g)
    rec = fit_poly(X.ravel(), Y.ravel(), PolySurface(M).value(X.ravel(), Y.ravel()))
    exact = float(np.abs(rec.coef - M).max())
    ok = worst["spp"] <= 0.05 and worst["dtau"] <= 0.05 and exact < 1e-8
    report(9, ok, f"worst per-section relative residual: SPP {worst['spp'] * 100:.1f}%, "
                  f"delay {worst['dtau'] * 100:.1f}% (limit 5%); synthetic recovery error {exact:.1e}")
    assert ok


def test_criterion_10_bandwidth(scene, map14, truth, filtered):
    cfg = ex.config_from_file(None)
    t = ex.bw_map(cfg)
    x, y, bw = (t.column(c) for c in ("x_m", "y_m", "bw_hz"))
    inner = np.minimum.reduce([x, y, 5 - x, 5 - y]) >= 1.0
    bw_max = float(bw[inner].max())
    fmap, ftruth, flt = filtered(100e6)
    sel = FeatureSelection(3)
    r100 = rms_error_mc(scene, fmap, cfg.snr(cfg.bw_snr_db).noise(scene, flt), sel, TRIALS, SEED,
                        flt=flt, truth=ftruth).rms
    rinf = rms_error_mc(scene, map14, cfg.snr(cfg.bw_snr_db), sel, TRIALS, SEED, truth=truth).rms
    ok = bw_max < 200e6 and r100 <= 2 * rinf
    report(10, ok, f"max interior diffuse BW {bw_max / 1e6:.1f} MHz (limit 200); RMS at "
                   f"{cfg.bw_snr_db:g} dB: 100 MHz {r100 * 100:.1f} cm vs ideal {rinf * 100:.1f} cm "
                   f"(ratio {r100 / rinf:.2f}, limit 2)")
    assert ok


def test_criterion_11_reproducibility(tmp_path, monkeypatch, map14, truth):
    same = {}
    for run in (ex.sweep_snr, ex.sweep_grid, ex.sweep_bw, ex.bw_map, ex.sweep_bounds):
        texts = []
        for name in ("a", "b"):
            monkeypatch.setenv("UPLINK_VLP_CACHE", str(tmp_path / name))
            texts.append(run(ex.config_from_file(SMALL)).to_csv().encode())
        same[run.__name__] = texts[0] == texts[1]
    monkeypatch.undo()
    cfg = replace(ex.config_from_file(None), detectors=(1, 4), features=(1, 3))
    same["sweep_snr (reference room)"] = ex.sweep_snr(cfg).to_csv() == ex.sweep_snr(cfg).to_csv()
    ok = all(same.values())
    report(11, ok, "byte-identical reruns: " + ", ".join(f"{k} {v}" for k, v in same.items()))
    assert ok
