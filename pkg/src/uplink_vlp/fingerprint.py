"""Fingerprint maps: simulated feature vectors at every grid cell for every detector.

Maps are persisted as headered text CSV. The header records the geometry needed to
rebuild the grid, the row count and a SHA-256 of the data rows, so truncated or
edited files are rejected on load.

Feature arrays throughout the package have shape ``(E, Q, 4)`` with the last axis
holding ``(p_los, p_spp, delta_tau, valid)``.
"""

from __future__ import annotations

import hashlib
import logging
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .channel import IDEAL, ChannelError, ChannelParams, SystemFilter, filter_bins, simulator
from .features import DEFAULT_GUARD, DEFAULT_SPP_FLOOR, FeatureVector, extract_batch
from .scene import Grid, Scene, Vec3, make_grid

log = logging.getLogger(__name__)

FORMAT_VERSION = 1
COLUMNS = "k,q,x_k,y_k,p_los_W,p_spp_W,delta_tau_s"
CHUNK = 1024


class MapError(ValueError):
    pass


class MapFormatError(MapError):
    """Unreadable map file: wrong version, truncated, or checksum mismatch."""


def default_guard(flt: SystemFilter) -> float:
    """Guard interval matching the pipeline.

    An unfiltered response has a one-bin LOS, so no guard is needed; a filtered one
    smears the LOS over several bins and uses the default guard.
    """
    return 0.0 if flt.is_ideal else DEFAULT_GUARD


def simulate_features(scene: Scene, xy: np.ndarray, params: ChannelParams = ChannelParams(),
                      flt: SystemFilter = IDEAL, guard: float | None = None,
                      spp_floor: float = DEFAULT_SPP_FLOOR, z: float | None = None) -> np.ndarray:
    """Features seen by every detector of ``scene`` for emitters at ``xy``; shape (E, Q, 4)."""
    xy = np.atleast_2d(np.asarray(xy, dtype=float))
    guard = default_guard(flt) if guard is None else guard
    sim = simulator(scene, params)
    p_t = scene.emitter_template.power
    out = np.zeros((len(xy), scene.n_detectors, 4))
    for q, det in enumerate(scene.detectors):
        for lo in range(0, len(xy), CHUNK):
            part = xy[lo:lo + CHUNK]
            try:
                bins = sim.gains(part, det, z=z)
            except ChannelError as exc:
                k = lo + _first_failing(sim, part, det, z)
                raise MapError(f"cell {k}, detector {q + 1}: {exc}") from exc
            bins = filter_bins(bins, flt, params.dt)
            out[lo:lo + CHUNK, q] = extract_batch(bins, params.dt, p_t, guard, spp_floor)
    n_bad = int((out[..., 3] == 0).sum())
    if n_bad:
        log.info("%d of %d responses have no separable second peak", n_bad, out[..., 3].size)
    return out


def _first_failing(sim, xy, det, z) -> int:
    for i in range(len(xy)):
        try:
            sim.gains(xy[i:i + 1], det, z=z, max_bounces=0)
        except ChannelError:
            return i
    return 0


@dataclass(frozen=True)
class FingerprintMap:
    grid: Grid
    detectors: tuple[Vec3, ...]
    room: tuple[float, float, float]
    features: np.ndarray = field(repr=False, compare=False)  # (N*M, Q, 4)

    def __post_init__(self):
        want = (self.grid.n_cells, len(self.detectors), 4)
        if self.features.shape != want:
            raise MapError(f"feature array has shape {self.features.shape}, expected {want}")

    @property
    def n_detectors(self) -> int:
        return len(self.detectors)

    def __len__(self) -> int:
        return self.grid.n_cells * self.n_detectors

    def entry(self, k: int, q: int) -> FeatureVector:
        r = self.features[k, q]
        return FeatureVector(float(r[0]), float(r[1]), float(r[2]), bool(r[3]))

    def center(self, k: int) -> np.ndarray:
        return self.grid.xy[k]

    def equals(self, other: FingerprintMap) -> bool:
        return (
            self.grid == other.grid
            and self.detectors == other.detectors
            and self.room == other.room
            and np.array_equal(self.grid.cell_centers, other.grid.cell_centers)
            and np.array_equal(self.features, other.features)
        )


def build_map(scene: Scene, grid: Grid, params: ChannelParams = ChannelParams(),
              flt: SystemFilter = IDEAL, guard: float | None = None,
              spp_floor: float = DEFAULT_SPP_FLOOR) -> FingerprintMap:
    feats = simulate_features(scene, grid.xy, params, flt, guard, spp_floor, z=grid.z)
    return FingerprintMap(grid, _det_positions(scene), _room(scene), feats)


def _det_positions(scene: Scene) -> tuple[Vec3, ...]:
    return tuple(Vec3(*map(float, d.position)) for d in scene.detectors)


def _room(scene: Scene) -> tuple[float, float, float]:
    r = scene.room
    return (float(r.width), float(r.length), float(r.height))


# --------------------------------------------------------------------------- persistence


def _num(v: float) -> str:
    return repr(float(v))


def _rows(fmap: FingerprintMap) -> list[str]:
    xy = fmap.grid.xy
    rows = []
    for k in range(fmap.grid.n_cells):
        x, y = _num(xy[k, 0]), _num(xy[k, 1])
        for q in range(fmap.n_detectors):
            p_los, p_spp, dtau, ok = fmap.features[k, q]
            spp, tau = (_num(p_spp), _num(dtau)) if ok else ("nan", "nan")
            rows.append(f"{k},{q + 1},{x},{y},{_num(p_los)},{spp},{tau}")
    return rows


def save_map(fmap: FingerprintMap, path: str | Path) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(map_to_text(fmap), encoding="utf-8")
    os.replace(tmp, path)


def map_to_text(fmap: FingerprintMap) -> str:
    rows = _rows(fmap)
    body = "".join(r + "\n" for r in rows)
    g = fmap.grid
    dets = ";".join(" ".join(_num(c) for c in d) for d in fmap.detectors)
    header = [
        f"format_version={FORMAT_VERSION}",
        "room=" + " ".join(_num(v) for v in fmap.room),
        f"step={_num(g.step)}",
        f"z={_num(g.z)}",
        f"n_cols={g.n_cols}",
        f"n_rows={g.n_rows}",
        f"q={fmap.n_detectors}",
        f"detectors={dets}",
        f"rows={len(rows)}",
        "sha256=" + hashlib.sha256(body.encode("utf-8")).hexdigest(),
    ]
    return "".join(f"# {h}\n" for h in header) + COLUMNS + "\n" + body


def load_map(path: str | Path) -> FingerprintMap:
    text = Path(path).read_text(encoding="utf-8")
    lines = text.split("\n")
    meta: dict[str, str] = {}
    i = 0
    while i < len(lines) and lines[i].startswith("#"):
        key, _, value = lines[i][1:].strip().partition("=")
        meta[key.strip()] = value.strip()
        i += 1
    version = meta.get("format_version")
    if version != str(FORMAT_VERSION):
        raise MapFormatError(f"unsupported map format_version {version!r}")
    if i >= len(lines) or lines[i] != COLUMNS:
        raise MapFormatError("missing or unexpected column header")
    body_lines = [ln for ln in lines[i + 1:] if ln]
    try:
        n_cols, n_rows, q = int(meta["n_cols"]), int(meta["n_rows"]), int(meta["q"])
        n_expected = int(meta["rows"])
        step, z = float(meta["step"]), float(meta["z"])
        room = tuple(float(v) for v in meta["room"].split())
        dets = tuple(Vec3(*(float(c) for c in d.split())) for d in meta["detectors"].split(";"))
        digest = meta["sha256"]
    except (KeyError, ValueError, TypeError) as exc:
        raise MapFormatError(f"bad map header: {exc}") from exc
    if len(body_lines) != n_expected or not text.endswith("\n"):
        raise MapFormatError(f"truncated map: {len(body_lines)} of {n_expected} rows")
    body = "".join(ln + "\n" for ln in body_lines)
    if hashlib.sha256(body.encode("utf-8")).hexdigest() != digest:
        raise MapFormatError("map checksum mismatch")
    if n_expected != n_cols * n_rows * q or len(dets) != q or len(room) != 3:
        raise MapFormatError("map header is inconsistent with its rows")

    grid = make_grid_from_header(step, n_cols, n_rows, z)
    feats = np.zeros((n_cols * n_rows, q, 4))
    for ln in body_lines:
        parts = ln.split(",")
        if len(parts) != 7:
            raise MapFormatError(f"bad row {ln!r}")
        k, qq = int(parts[0]), int(parts[1]) - 1
        p_los, p_spp, dtau = (float(v) for v in parts[4:])
        ok = not (math.isnan(p_spp) or math.isnan(dtau))
        feats[k, qq] = (p_los, p_spp if ok else 0.0, dtau if ok else 0.0, float(ok))
    return FingerprintMap(grid, dets, room, feats)


def make_grid_from_header(step: float, n_cols: int, n_rows: int, z: float) -> Grid:
    i, j = np.meshgrid(np.arange(n_cols), np.arange(n_rows))
    centers = np.column_stack(
        [(i.ravel() + 0.5) * step, (j.ravel() + 0.5) * step, np.full(n_cols * n_rows, float(z))]
    )
    return Grid(step, n_cols, n_rows, float(z), centers)


# --------------------------------------------------------------------------- cache


def cache_dir() -> Path:
    """Directory for cached maps (``UPLINK_VLP_CACHE`` or ``~/.cache/uplink_vlp``)."""
    env = os.environ.get("UPLINK_VLP_CACHE")
    return Path(env) if env else Path.home() / ".cache" / "uplink_vlp"


def _key(*parts) -> str:
    h = hashlib.sha256()
    for p in parts:
        h.update((p.tobytes() if isinstance(p, np.ndarray) else repr(p).encode()) + b"\0")
    return h.hexdigest()[:24]


def cached_map(scene: Scene, step: float, params: ChannelParams = ChannelParams(),
               flt: SystemFilter = IDEAL, guard: float | None = None,
               spp_floor: float = DEFAULT_SPP_FLOOR, z: float | None = None,
               directory: str | Path | None = None) -> FingerprintMap:
    """:func:`build_map` on a regular grid, memoized on disk by configuration."""
    z = scene.emitter_template.position.z if z is None else z
    guard = default_guard(flt) if guard is None else guard
    grid = make_grid(scene.room, step, z)
    d = Path(directory) if directory is not None else cache_dir()
    path = d / f"map-{_key(scene, step, z, params, flt, guard, spp_floor, FORMAT_VERSION)}.csv"
    if path.exists():
        try:
            return load_map(path)
        except MapFormatError as exc:
            log.warning("discarding unreadable cached map %s: %s", path, exc)
    fmap = build_map(scene, grid, params, flt, guard, spp_floor)
    d.mkdir(parents=True, exist_ok=True)
    save_map(fmap, path)
    return fmap


def cached_features(scene: Scene, xy: np.ndarray, params: ChannelParams = ChannelParams(),
                    flt: SystemFilter = IDEAL, guard: float | None = None,
                    spp_floor: float = DEFAULT_SPP_FLOOR, z: float | None = None,
                    directory: str | Path | None = None) -> np.ndarray:
    """:func:`simulate_features` for arbitrary points, memoized on disk.

    The cache file reuses the map CSV layout with one "cell" per point; it is keyed
    by the exact point coordinates.
    """
    xy = np.ascontiguousarray(np.atleast_2d(np.asarray(xy, dtype=float)))
    z = scene.emitter_template.position.z if z is None else z
    guard = default_guard(flt) if guard is None else guard
    d = Path(directory) if directory is not None else cache_dir()
    path = d / f"pts-{_key(scene, xy, z, params, flt, guard, spp_floor, FORMAT_VERSION)}.csv"
    if path.exists():
        try:
            return _load_points(path, xy)
        except MapFormatError as exc:
            log.warning("discarding unreadable cached features %s: %s", path, exc)
    feats = simulate_features(scene, xy, params, flt, guard, spp_floor, z=z)
    d.mkdir(parents=True, exist_ok=True)
    pseudo = Grid(0.0, len(xy), 1, float(z), np.column_stack([xy, np.full(len(xy), z)]))
    save_map(FingerprintMap(pseudo, _det_positions(scene), _room(scene), feats), path)
    return feats


def _load_points(path: Path, xy: np.ndarray) -> np.ndarray:
    fmap = load_map(path)
    if fmap.features.shape[0] != len(xy):
        raise MapFormatError("cached point set has the wrong size")
    return fmap.features
