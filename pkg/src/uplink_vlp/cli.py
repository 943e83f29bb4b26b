"""Command line entry point: ``uplink-vlp <command> [options]``."""

from __future__ import annotations

import argparse
import logging
import math
import sys

import numpy as np

from . import experiments as ex
from .channel import SystemFilter, apply_system_filter, simulator
from .estimator import FeatureSelection, locate, synthesize_observation
from .fingerprint import build_map, cached_map, load_map, map_to_text, save_map
from .regression import coefficients_to_text, fit_scene
from .scene import make_grid

log = logging.getLogger("uplink_vlp")


def _bw(value: str) -> float:
    return math.inf if value.lower() in ("inf", "ideal") else float(value) * 1e6


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="scene/sweep configuration file (default: bundled room)")
    p.add_argument("--seed", type=int, help="random seed")
    p.add_argument("--out", help="output CSV path (default: stdout)")
    p.add_argument("--trials", type=int, help="Monte Carlo trials per point")


def _parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="uplink-vlp", description=__doc__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate-ir", help="impulse response for one emitter position")
    _common(p)
    p.add_argument("--x", type=float, required=True)
    p.add_argument("--y", type=float, required=True)
    p.add_argument("--detector", type=int, default=1, help="1-based detector index")
    p.add_argument("--bw-mhz", type=_bw, default=math.inf, help="LED bandwidth in MHz or 'inf'")

    p = sub.add_parser("build-map", help="fingerprint map on a regular grid")
    _common(p)
    p.add_argument("--step", type=float, help="grid step in meters")
    p.add_argument("--bw-mhz", type=_bw, default=math.inf)

    p = sub.add_parser("fit-regression", help="polynomial SPP/delay coefficients per detector")
    _common(p)
    p.add_argument("--step", type=float, help="dense sampling step in meters")

    p = sub.add_parser("locate", help="synthesize a noisy observation and locate it")
    _common(p)
    p.add_argument("--x", type=float, required=True)
    p.add_argument("--y", type=float, required=True)
    p.add_argument("--snr", type=float, default=50.0, help="SNR in dB ('inf' for noise-free)")
    p.add_argument("--detectors", type=int, help="number of detectors used (default: all)")
    p.add_argument("--features", type=int, default=3, choices=(1, 2, 3))
    p.add_argument("--map", help="map CSV from build-map (default: cached map)")

    for name, text in (("sweep-snr", "RMS error vs SNR"), ("sweep-grid", "RMS error vs grid step"),
                       ("sweep-bw", "RMS error vs system bandwidth"),
                       ("bw-map", "diffuse 3 dB bandwidth over the room"),
                       ("bounds", "CRLB / QLB / QCRLB / two-point bound vs SNR")):
        _common(sub.add_parser(name, help=text))
    return ap


def _emit(text: str, out: str | None) -> None:
    if out:
        with open(out, "w", encoding="utf-8") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


def _run(args) -> None:
    cfg = ex.config_from_file(args.config, trials=args.trials, seed=args.seed)
    scene = cfg.scene
    cmd = args.command
    if cmd == "simulate-ir":
        det = scene.detectors[args.detector - 1]
        ir = simulator(scene, cfg.params).impulse_response(scene.emitter_template.at(args.x, args.y), det)
        ir = apply_system_filter(ir, SystemFilter(f_led=args.bw_mhz, order=cfg.filter_order))
        rows = [(t * 1e9, g) for t, g in zip(ir.times, ir.bins)]
        _emit(ex.Table(("time_ns", "gain"), rows).to_csv(), args.out)
    elif cmd == "build-map":
        step = args.step or cfg.grid_step
        flt = SystemFilter(f_led=args.bw_mhz, order=cfg.filter_order)
        grid = make_grid(scene.room, step, scene.emitter_template.position.z)
        fmap = build_map(scene, grid, cfg.params, flt)
        if args.out:
            save_map(fmap, args.out)
        else:
            sys.stdout.write(map_to_text(fmap))
    elif cmd == "fit-regression":
        surfaces = fit_scene(scene, args.step or cfg.regression_step, cfg.params, cfg.cache_dir)
        _emit(coefficients_to_text([s for q in sorted(surfaces) for s in surfaces[q]]), args.out)
    elif cmd == "locate":
        fmap = load_map(args.map) if args.map else cached_map(scene, cfg.grid_step, cfg.params)
        q = args.detectors or fmap.n_detectors
        noise = cfg.snr(args.snr).noise(scene, dt=cfg.params.dt)
        obs = synthesize_observation((args.x, args.y), scene.with_detectors(range(q)), noise,
                                     cfg.seed, cfg.params)
        k, c = locate(obs, fmap, noise, FeatureSelection(args.features))
        err = float(np.hypot(c[0] - args.x, c[1] - args.y))
        _emit(ex.Table(("k", "x_m", "y_m", "error_m"), [(k, c[0], c[1], err)]).to_csv(), args.out)
    else:
        run = {"sweep-snr": ex.sweep_snr, "sweep-grid": ex.sweep_grid, "sweep-bw": ex.sweep_bw,
               "bw-map": ex.bw_map, "bounds": ex.sweep_bounds}[cmd]
        _emit(run(cfg).to_csv(), args.out)


def main(argv: list[str] | None = None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        _run(args)
    except (ValueError, OSError, KeyError, IndexError) as exc:
        print(f"uplink-vlp {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
