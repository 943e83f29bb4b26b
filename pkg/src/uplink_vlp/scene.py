"""Room geometry, emitter/detector definitions, measurement grid and surface partitioning.

Scenes are read from a plain ``section.key = value`` configuration file. Lengths are
in meters, angles in degrees and powers in milliwatts; everything is converted to SI
on load. The bundled ``reference_room.cfg`` describes the reference 5 x 5 x 3 m room with four
ceiling photodiodes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

SURFACES = ("wall_x0", "wall_x1", "wall_y0", "wall_y1", "floor", "ceiling")
UP = (0.0, 0.0, 1.0)
DOWN = (0.0, 0.0, -1.0)


class SceneError(ValueError):
    """Raised when a scene, grid or configuration violates an invariant."""


class Vec3(NamedTuple):
    x: float
    y: float
    z: float


@dataclass(frozen=True)
class Room:
    width: float
    length: float
    height: float
    reflectance: float = 0.8
    element_size: float = 0.02
    # per-surface overrides, e.g. (("floor", 0.3),); surfaces not listed use ``reflectance``
    surface_reflectance: tuple[tuple[str, float], ...] = ()

    def rho(self, surface: str) -> float:
        return dict(self.surface_reflectance).get(surface, self.reflectance)


@dataclass(frozen=True)
class Emitter:
    position: Vec3
    lambertian_order: float = 1.0
    power: float = 10e-3
    orientation: Vec3 = Vec3(*UP)

    def at(self, x: float, y: float) -> Emitter:
        """Same emitter moved to ``(x, y)`` at its fixed height."""
        return replace(self, position=Vec3(float(x), float(y), self.position.z))


@dataclass(frozen=True)
class Detector:
    position: Vec3
    area: float = 1e-4
    fov_half_angle: float = math.radians(70.0)
    orientation: Vec3 = Vec3(*DOWN)


@dataclass(frozen=True)
class Scene:
    room: Room
    emitter_template: Emitter
    detectors: tuple[Detector, ...]

    @property
    def n_detectors(self) -> int:
        return len(self.detectors)

    def with_detectors(self, indices: Sequence[int]) -> Scene:
        return replace(self, detectors=tuple(self.detectors[i] for i in indices))


@dataclass(frozen=True)
class Grid:
    step: float
    n_cols: int
    n_rows: int
    z: float
    cell_centers: np.ndarray = field(repr=False, compare=False)

    @property
    def n_cells(self) -> int:
        return self.n_cols * self.n_rows

    @property
    def xy(self) -> np.ndarray:
        return self.cell_centers[:, :2]


@dataclass(frozen=True)
class Elements:
    """Flat arrays describing square reflecting elements."""

    centers: np.ndarray  # (E, 3)
    normals: np.ndarray  # (E, 3), unit, pointing into the room
    areas: np.ndarray  # (E,)
    reflectance: np.ndarray  # (E,)
    surface: np.ndarray  # (E,) index into SURFACES

    def __len__(self) -> int:
        return len(self.areas)

    def subset(self, mask: np.ndarray) -> Elements:
        return Elements(
            self.centers[mask],
            self.normals[mask],
            self.areas[mask],
            self.reflectance[mask],
            self.surface[mask],
        )


def _inside(room: Room, p: Vec3) -> bool:
    return 0.0 <= p.x <= room.width and 0.0 <= p.y <= room.length and 0.0 <= p.z <= room.height


def validate_scene(scene: Scene) -> Scene:
    """Return ``scene`` unchanged if every invariant holds, else raise :class:`SceneError`."""
    room = scene.room
    for name in ("width", "length", "height"):
        v = getattr(room, name)
        if not (math.isfinite(v) and v > 0):
            raise SceneError(f"room.{name} must be positive, got {v}")
    for surf, rho in [("all", room.reflectance), *room.surface_reflectance]:
        if surf != "all" and surf not in SURFACES:
            raise SceneError(f"unknown surface {surf!r}")
        if not 0.0 <= rho <= 1.0:
            raise SceneError(f"reflectance of {surf} must lie in [0, 1], got {rho}")
    if not 0 < room.element_size <= min(room.width, room.length, room.height):
        raise SceneError(f"element_size {room.element_size} outside (0, min room dimension]")

    em = scene.emitter_template
    if not all(math.isfinite(c) for c in em.position):
        raise SceneError("emitter position is not finite")
    if em.lambertian_order < 1:
        raise SceneError(f"lambertian order must be >= 1, got {em.lambertian_order}")
    if em.power <= 0:
        raise SceneError(f"emitter power must be positive, got {em.power}")
    if not _inside(room, em.position):
        raise SceneError(f"emitter at {tuple(em.position)} is outside the room")
    if tuple(em.orientation) != UP:
        raise SceneError("emitter must face vertically upwards (tilt is not supported)")

    if len(scene.detectors) < 1:
        raise SceneError("scene needs at least one detector")
    for q, det in enumerate(scene.detectors, start=1):
        p = det.position
        if not all(math.isfinite(c) for c in p):
            raise SceneError(f"detector {q} position is not finite")
        if det.area <= 0:
            raise SceneError(f"detector {q} area must be positive")
        if not 0 < det.fov_half_angle <= math.pi / 2:
            raise SceneError(f"detector {q} field of view outside (0, 90] degrees")
        if tuple(det.orientation) != DOWN:
            raise SceneError(f"detector {q} must face vertically downwards")
        if not (0.0 <= p.x <= room.width and 0.0 <= p.y <= room.length):
            raise SceneError(f"detector {q} outside the room footprint")
        if not math.isclose(p.z, room.height, abs_tol=1e-9):
            raise SceneError(f"detector {q} is not on the ceiling plane (z={p.z})")
        if p.z <= em.position.z:
            raise SceneError(f"detector {q} is below the emitter plane")
    return scene


def make_grid(room: Room, step: float, z: float) -> Grid:
    """Grid of ``floor(width/step) x floor(length/step)`` cell centers, row-major in x.

    Cell ``k = j * n_cols + i`` is centered at ``((i + 1/2) step, (j + 1/2) step, z)``.
    The remainder strip that does not fit a whole cell is left unpopulated.
    """
    if not step > 0:
        raise SceneError(f"grid step must be positive, got {step}")
    if step > min(room.width, room.length):
        raise SceneError(f"grid step {step} larger than the room footprint")
    n_cols = _whole_cells(room.width, step)
    n_rows = _whole_cells(room.length, step)
    i, j = np.meshgrid(np.arange(n_cols), np.arange(n_rows))
    centers = np.column_stack(
        [(i.ravel() + 0.5) * step, (j.ravel() + 0.5) * step, np.full(n_cols * n_rows, float(z))]
    )
    return Grid(step, n_cols, n_rows, float(z), centers)


def _whole_cells(extent: float, step: float) -> int:
    # tolerate 5/0.02 = 249.99999999999997 style round-off
    return int(math.floor(extent / step + 1e-9))


def _edges(extent: float, size: float) -> np.ndarray:
    n = max(1, math.ceil(extent / size - 1e-9))
    edges = np.minimum(np.arange(n + 1) * size, extent)
    edges[-1] = extent
    return edges


def _plane(u_edges: np.ndarray, v_edges: np.ndarray):
    uc = 0.5 * (u_edges[1:] + u_edges[:-1])
    vc = 0.5 * (v_edges[1:] + v_edges[:-1])
    du = np.diff(u_edges)
    dv = np.diff(v_edges)
    U, V = np.meshgrid(uc, vc, indexing="ij")
    A = np.outer(du, dv)
    return U.ravel(), V.ravel(), A.ravel()


def partition_surfaces(room: Room, element_size: float | None = None) -> Elements:
    """Split the four walls, floor and ceiling into square elements of ``element_size``.

    Elements at the far edge of a surface are clipped so the surfaces are covered
    exactly once.
    """
    size = room.element_size if element_size is None else element_size
    if not size > 0:
        raise SceneError(f"element size must be positive, got {size}")
    w, l, h = room.width, room.length, room.height
    ex, ey, ez = _edges(w, size), _edges(l, size), _edges(h, size)

    centers, normals, areas, rhos, surf = [], [], [], [], []

    def add(name, pts, normal, a):
        centers.append(pts)
        normals.append(np.tile(normal, (len(a), 1)))
        areas.append(a)
        rhos.append(np.full(len(a), room.rho(name)))
        surf.append(np.full(len(a), SURFACES.index(name), dtype=np.int8))

    y, z, a = _plane(ey, ez)
    add("wall_x0", np.column_stack([np.zeros_like(y), y, z]), (1.0, 0.0, 0.0), a)
    add("wall_x1", np.column_stack([np.full_like(y, w), y, z]), (-1.0, 0.0, 0.0), a)
    x, z, a = _plane(ex, ez)
    add("wall_y0", np.column_stack([x, np.zeros_like(x), z]), (0.0, 1.0, 0.0), a)
    add("wall_y1", np.column_stack([x, np.full_like(x, l), z]), (0.0, -1.0, 0.0), a)
    x, y, a = _plane(ex, ey)
    add("floor", np.column_stack([x, y, np.zeros_like(x)]), (0.0, 0.0, 1.0), a)
    add("ceiling", np.column_stack([x, y, np.full_like(x, h)]), (0.0, 0.0, -1.0), a)

    return Elements(
        np.concatenate(centers),
        np.concatenate(normals),
        np.concatenate(areas),
        np.concatenate(rhos),
        np.concatenate(surf),
    )


# --------------------------------------------------------------------------- config


def parse_config(text: str) -> dict[str, str]:
    """Parse ``section.key = value`` lines; ``#`` starts a comment."""
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise SceneError(f"line {lineno}: expected 'section.key = value', got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if "." not in key:
            raise SceneError(f"line {lineno}: key {key!r} has no section")
        out[key] = value
    return out


def default_config_path() -> Path:
    return Path(str(resources.files("uplink_vlp").joinpath("data/reference_room.cfg")))


def load_config(path: str | Path | None = None) -> dict[str, str]:
    path = default_config_path() if path is None else Path(path)
    return parse_config(path.read_text(encoding="utf-8"))


def _floats(value: str) -> list[float]:
    return [float(v) for v in value.replace(",", " ").split()]


def scene_from_config(cfg: dict[str, str]) -> Scene:
    def get(key, default=None):
        if key in cfg:
            return float(cfg[key])
        if default is None:
            raise SceneError(f"missing configuration key {key!r}")
        return default

    overrides = tuple(
        (name, float(cfg[f"room.reflectance_{name}"]))
        for name in SURFACES
        if f"room.reflectance_{name}" in cfg
    )
    room = Room(
        width=get("room.width"),
        length=get("room.length"),
        height=get("room.height"),
        reflectance=get("room.reflectance", 0.8),
        element_size=get("room.element_size", 0.02),
        surface_reflectance=overrides,
    )
    z_t = get("emitter.height")
    emitter = Emitter(
        position=Vec3(room.width / 2, room.length / 2, z_t),
        lambertian_order=get("emitter.lambertian_order", 1.0),
        power=get("emitter.power_mw") * 1e-3,
    )
    area = get("detector.area_cm2", 1.0) * 1e-4
    fov = math.radians(get("detector.fov_deg", 70.0))
    detectors = []
    q = 1
    while f"detector{q}.position" in cfg:
        pos = _floats(cfg[f"detector{q}.position"])
        if len(pos) != 3:
            raise SceneError(f"detector{q}.position needs three coordinates")
        detectors.append(
            Detector(
                position=Vec3(*pos),
                area=get(f"detector{q}.area_cm2", area * 1e4) * 1e-4,
                fov_half_angle=math.radians(get(f"detector{q}.fov_deg", math.degrees(fov))),
            )
        )
        q += 1
    return validate_scene(Scene(room, emitter, tuple(detectors)))


def load_scene(path: str | Path | None = None) -> Scene:
    return scene_from_config(load_config(path))


def reference_scene() -> Scene:
    """The reference four-photodiode room."""
    return load_scene(None)
