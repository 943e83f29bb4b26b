"""Sweeps over SNR, grid step and system bandwidth, bound tables and the
channel-bandwidth room map, written as deterministic CSV tables."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import bounds as bnd
from .channel import (
    ChannelParams, ImpulseResponse, SystemFilter, diffuse_bw_3db, params_from_config, simulator,
)
from .estimator import (
    DEFAULT_SIGMA_TAU_REF, FeatureSelection, SnrReference, SnrSpec, draw_trials, make_truth,
    rms_error_mc,
)
from .fingerprint import cached_map
from .regression import fit_scene
from .scene import Scene, load_config, make_grid, scene_from_config

log = logging.getLogger(__name__)


class SweepError(ValueError):
    pass


@dataclass(frozen=True)
class SweepConfig:
    scene: Scene
    params: ChannelParams = ChannelParams()
    snr_db: tuple[float, ...] = (0.0, 10.0, 20.0, 30.0, 40.0, 50.0, 60.0)
    detectors: tuple[int, ...] = (1, 2, 3, 4)
    features: tuple[int, ...] = (1, 2, 3)
    grid_step: float = 0.14
    grid_steps: tuple[float, ...] = (0.07, 0.14, 0.21, 0.28, 0.35)
    grid_snr_db: float = 30.0
    bandwidths: tuple[float, ...] = (10e6, 20e6, 50e6, 100e6, 200e6, 500e6, math.inf)
    bw_snr_db: float = 30.0
    bw_features: tuple[int, ...] = (2, 3)
    filter_order: int = 1
    trials: int = 10_000
    seed: int = 1
    sigma_tau_ref: float = DEFAULT_SIGMA_TAU_REF
    snr_reference: SnrReference = SnrReference.CENTER_LOS_PEAK
    regression_step: float = 0.10
    bw_map_step: float = 0.10
    bw_detector: int = 1
    # snap every random position to its cell centre (noise-free checks)
    on_grid: bool = False
    cache_dir: Path | None = None

    def __post_init__(self):
        if self.trials < 1:
            raise SweepError("trials must be > 0")
        for name in ("snr_db", "detectors", "features", "grid_steps", "bandwidths", "bw_features"):
            if len(getattr(self, name)) == 0:
                raise SweepError(f"sweep axis {name} is empty")
        if max(self.detectors) > self.scene.n_detectors or min(self.detectors) < 1:
            raise SweepError("detector counts must be between 1 and the scene's detector count")

    def snr(self, db: float) -> SnrSpec:
        return SnrSpec(db, self.snr_reference, self.sigma_tau_ref)

    def filter(self, bw: float) -> SystemFilter:
        return SystemFilter(f_led=bw, order=self.filter_order)


def _tuple(value: str, conv=float) -> tuple:
    return tuple(conv(v) for v in value.replace(",", " ").split())


def config_from_file(path: str | Path | None = None, **overrides) -> SweepConfig:
    """Sweep settings from the ``sweep.*``, ``noise.*`` and ``filter.*`` keys of a
    scene configuration; keyword arguments override file values."""
    cfg = load_config(path)
    kw: dict = {"scene": scene_from_config(cfg), "params": params_from_config(cfg)}
    simple = {
        "sweep.snr_db": ("snr_db", _tuple),
        "sweep.detectors": ("detectors", lambda v: _tuple(v, int)),
        "sweep.features": ("features", lambda v: _tuple(v, int)),
        "sweep.grid_step": ("grid_step", float),
        "sweep.grid_steps": ("grid_steps", _tuple),
        "sweep.grid_snr_db": ("grid_snr_db", float),
        "sweep.bw_snr_db": ("bw_snr_db", float),
        "sweep.bw_features": ("bw_features", lambda v: _tuple(v, int)),
        "sweep.trials": ("trials", int),
        "sweep.seed": ("seed", int),
        "filter.order": ("filter_order", int),
        "regression.step": ("regression_step", float),
        "bwmap.step": ("bw_map_step", float),
        "bwmap.detector": ("bw_detector", int),
    }
    for key, (name, conv) in simple.items():
        if key in cfg:
            kw[name] = conv(cfg[key])
    if "sweep.bandwidths_mhz" in cfg:
        kw["bandwidths"] = tuple(v * 1e6 for v in _tuple(cfg["sweep.bandwidths_mhz"]))
    if "noise.sigma_tau_ref_ns" in cfg:
        kw["sigma_tau_ref"] = float(cfg["noise.sigma_tau_ref_ns"]) * 1e-9
    if "noise.snr_reference" in cfg:
        kw["snr_reference"] = SnrReference(cfg["noise.snr_reference"])
    kw.update({k: v for k, v in overrides.items() if v is not None})
    return SweepConfig(**kw)


# --------------------------------------------------------------------------- tables


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    v = float(v)
    if math.isnan(v):
        return "nan"
    if math.isinf(v):
        return "inf" if v > 0 else "-inf"
    return f"{v:.10g}"


@dataclass(frozen=True)
class Table:
    columns: tuple[str, ...]
    rows: list[tuple] = field(compare=False)

    def sorted(self) -> Table:
        return Table(self.columns, sorted(self.rows, key=lambda r: tuple(_sort_key(v) for v in r)))

    def to_csv(self, path: str | Path | None = None) -> str:
        text = ",".join(self.columns) + "\n" + "".join(
            ",".join(_fmt(v) for v in r) + "\n" for r in self.rows
        )
        if path is not None:
            Path(path).write_text(text, encoding="utf-8")
        return text

    def column(self, name: str) -> np.ndarray:
        i = self.columns.index(name)
        return np.array([r[i] for r in self.rows], dtype=float)

    def where(self, **match) -> list[tuple]:
        idx = {k: self.columns.index(k) for k in match}
        return [r for r in self.rows if all(r[idx[k]] == v for k, v in match.items())]


def _sort_key(v):
    return (0, float(v)) if isinstance(v, (int, float, np.integer, np.floating)) else (1, str(v))


MC_COLUMNS = ("snr_db", "q", "features", "grid_step_m", "trials", "rms_m", "stderr_m")
BOUND_COLUMNS = ("snr_db", "q", "features", "crlb_rms_m", "qlb_m", "qcrlb_m", "lb_rms_m")


# --------------------------------------------------------------------------- sweeps


def _map(cfg: SweepConfig, step: float, flt: SystemFilter | None = None):
    return cached_map(cfg.scene, step, cfg.params, flt or SystemFilter(), directory=cfg.cache_dir)


def _truth(cfg: SweepConfig, flt: SystemFilter | None = None, step: float | None = None):
    flt = flt or SystemFilter()
    if not cfg.on_grid:
        return make_truth(cfg.scene, cfg.trials, cfg.seed, cfg.params, flt)
    pos, _ = draw_trials(cfg.scene, cfg.trials, cfg.seed)
    return make_truth(cfg.scene, cfg.trials, cfg.seed, cfg.params, flt,
                      positions=snap_to_grid(cfg.scene, pos, step or cfg.grid_step))


def snap_to_grid(scene: Scene, xy: np.ndarray, step: float) -> np.ndarray:
    """Centre of the grid cell containing each point (points in the unpopulated
    remainder strip go to the last cell)."""
    grid = make_grid(scene.room, step, scene.emitter_template.position.z)
    i = np.clip(np.floor(xy[:, 0] / step), 0, grid.n_cols - 1)
    j = np.clip(np.floor(xy[:, 1] / step), 0, grid.n_rows - 1)
    return np.column_stack([(i + 0.5) * step, (j + 0.5) * step])


def sweep_snr(cfg: SweepConfig) -> Table:
    """MC RMS and the two-nearest-point bound per (SNR, detector count, feature count)."""
    fmap = _map(cfg, cfg.grid_step)
    truth = _truth(cfg)
    rows = []
    for snr in cfg.snr_db:
        noise = cfg.snr(snr).noise(cfg.scene, dt=cfg.params.dt)
        for q in cfg.detectors:
            for f in cfg.features:
                sel = FeatureSelection(f)
                mc = rms_error_mc(cfg.scene, fmap, noise, sel, cfg.trials, cfg.seed, q=q, truth=truth)
                lb = bnd.lb_rms(truth, fmap, noise, sel, q)
                rows.append((snr, q, f, cfg.grid_step, cfg.trials, mc.rms, mc.stderr, lb))
    return Table(MC_COLUMNS + ("lb_rms_m",), rows).sorted()


def sweep_grid(cfg: SweepConfig) -> Table:
    """MC RMS per grid step at ``grid_snr_db``, with the quantization bound."""
    noise = cfg.snr(cfg.grid_snr_db).noise(cfg.scene, dt=cfg.params.dt)
    rows = []
    truth = None if cfg.on_grid else _truth(cfg)
    for step in cfg.grid_steps:
        fmap = _map(cfg, step)
        t = truth or _truth(cfg, step=step)
        for q in cfg.detectors:
            for f in cfg.features:
                mc = rms_error_mc(cfg.scene, fmap, noise, FeatureSelection(f), cfg.trials, cfg.seed,
                                  q=q, truth=t)
                rows.append((cfg.grid_snr_db, q, f, step, cfg.trials, mc.rms, mc.stderr, bnd.qlb(step)))
    return Table(MC_COLUMNS + ("qlb_m",), rows).sorted()


def sweep_bw(cfg: SweepConfig) -> Table:
    """MC RMS per system bandwidth (LED-limited) at ``bw_snr_db``."""
    rows = []
    for bw in cfg.bandwidths:
        flt = cfg.filter(bw)
        fmap = _map(cfg, cfg.grid_step, flt)
        truth = _truth(cfg, flt)
        noise = cfg.snr(cfg.bw_snr_db).noise(cfg.scene, flt, cfg.params.dt)
        for q in cfg.detectors:
            for f in cfg.bw_features:
                mc = rms_error_mc(cfg.scene, fmap, noise, FeatureSelection(f), cfg.trials, cfg.seed,
                                  q=q, truth=truth)
                rows.append((bw, cfg.bw_snr_db, q, f, cfg.grid_step, cfg.trials, mc.rms, mc.stderr))
    return Table(("bw_hz",) + MC_COLUMNS, rows).sorted()


def bw_map(cfg: SweepConfig) -> Table:
    """Diffuse 3 dB channel bandwidth at every cell centre for one detector."""
    scene = cfg.scene
    grid = make_grid(scene.room, cfg.bw_map_step, scene.emitter_template.position.z)
    det = scene.detectors[cfg.bw_detector - 1]
    sim = simulator(scene, cfg.params)
    rows = []
    for lo in range(0, grid.n_cells, 1024):
        xy = grid.xy[lo:lo + 1024]
        bins = sim.gains(xy, det, z=grid.z)
        for (x, y), h in zip(xy, bins):
            rows.append((x, y, diffuse_bw_3db(ImpulseResponse(0.0, cfg.params.dt, h))))
    return Table(("x_m", "y_m", "bw_hz"), rows).sorted()


def sweep_bounds(cfg: SweepConfig) -> Table:
    """Room-average CRLB, QLB, QCRLB and the two-nearest-point bound per (SNR, Q, features).

    Configurations whose Fisher information is singular somewhere on the lattice
    (one detector with LOS power only) report ``nan`` for the CRLB columns.
    """
    surfaces = fit_scene(cfg.scene, cfg.regression_step, cfg.params, cfg.cache_dir)
    fmap = _map(cfg, cfg.grid_step)
    truth = _truth(cfg)
    q_lb = bnd.qlb(cfg.grid_step)
    pts = bnd.lattice(cfg.scene.room, surfaces=surfaces)
    rows = []
    for snr in cfg.snr_db:
        noise = cfg.snr(snr).noise(cfg.scene, dt=cfg.params.dt)
        for q in cfg.detectors:
            for f in cfg.features:
                sel = FeatureSelection(f)
                try:
                    c = bnd.crlb_room(cfg.scene, surfaces, noise, sel, q, pts)
                    qc = bnd.qcrlb(c, q_lb)
                except bnd.SingularFimError:
                    c = qc = math.nan
                lb = bnd.lb_rms(truth, fmap, noise, sel, q)
                rows.append((snr, q, f, c, q_lb, qc, lb))
    return Table(BOUND_COLUMNS, rows).sorted()


def with_trials(cfg: SweepConfig, trials: int | None = None, seed: int | None = None) -> SweepConfig:
    return replace(cfg, trials=cfg.trials if trials is None else trials,
                   seed=cfg.seed if seed is None else seed)
