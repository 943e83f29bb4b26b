"""Sectioned degree-4 bivariate polynomial surfaces ``A(x)^T M A(y)``.

A smooth closed form of the SPP and delay maps gives analytic gradients for the
Fisher information. Each detector's footprint is split into sections along lines
where the second-peak source changes, and each section gets its own 5 x 5
coefficient matrix.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .scene import Detector, Room

DEGREE = 4
N_COEF = DEGREE + 1
BOUNDARY_TOL = 1e-9

# value units in memory -> export units
_EXPORT_SCALE = {"spp": 1e3, "dtau": 1e9}  # W -> mW, s -> ns


class RegressionError(ValueError):
    pass


def powers(x) -> np.ndarray:
    """``A(x) = [1, x, x^2, x^3, x^4]`` along a new last axis."""
    return np.asarray(x, dtype=float)[..., None] ** np.arange(N_COEF)


def dpowers(x) -> np.ndarray:
    """``dA/dx = [0, 1, 2x, 3x^2, 4x^3]``."""
    x = np.asarray(x, dtype=float)[..., None]
    k = np.arange(N_COEF)
    return k * x ** np.maximum(k - 1, 0)


@dataclass(frozen=True)
class PolySurface:
    coef: np.ndarray = field(compare=False)

    def __post_init__(self):
        c = np.asarray(self.coef, dtype=float)
        if c.shape != (N_COEF, N_COEF):
            raise RegressionError(f"coefficient matrix must be {N_COEF}x{N_COEF}")
        if not np.all(np.isfinite(c)):
            raise RegressionError("coefficients must be finite")
        object.__setattr__(self, "coef", c)

    def value(self, x, y):
        return np.einsum("...i,ij,...j->...", powers(x), self.coef, powers(y))

    def gradient(self, x, y):
        ax, ay = powers(x), powers(y)
        gx = np.einsum("...i,ij,...j->...", dpowers(x), self.coef, ay)
        gy = np.einsum("...i,ij,...j->...", ax, self.coef, dpowers(y))
        return gx, gy


@dataclass(frozen=True)
class HalfPlane:
    """``a x + b y + c > 0`` (or ``>= 0`` when not strict)."""

    a: float
    b: float
    c: float
    strict: bool = True

    def level(self, x, y):
        return self.a * np.asarray(x) + self.b * np.asarray(y) + self.c

    def contains(self, x, y):
        s = self.level(x, y)
        return s > 0 if self.strict else s >= 0

    def distance(self, x, y):
        return np.abs(self.level(x, y)) / math.hypot(self.a, self.b)


@dataclass(frozen=True)
class Section:
    name: str
    planes: tuple[HalfPlane, ...]

    def contains(self, x, y):
        x, y = np.asarray(x, float), np.asarray(y, float)
        ok = np.ones(np.broadcast(x, y).shape, dtype=bool)
        for p in self.planes:
            ok &= p.contains(x, y)
        return ok

    def boundary_distance(self, x, y):
        if not self.planes:
            return np.full(np.broadcast(np.asarray(x), np.asarray(y)).shape, np.inf)
        return np.min([p.distance(x, y) for p in self.planes], axis=0)


WHOLE = Section("all", ())


def default_sections(room: Room, detector: Detector) -> tuple[Section, ...]:
    """Four sections: the diagonal through a corner-quadrant detector crossed with a
    line ``v = L - 0.43 u`` in the detector's own quadrant frame.

    The layout is given for a detector in the ``x, y < centre`` quadrant; detectors
    in other quadrants use the same partition mirrored through the room centre
    lines, so ``u``/``v`` are ``x``/``y`` measured from the nearest walls.
    """
    W, L = room.width, room.length
    px, py = detector.position[0], detector.position[1]
    # u = sx * x + ox maps real x into the reference-quadrant frame
    sx, ox = (-1.0, W) if px > W / 2 else (1.0, 0.0)
    sy, oy = (-1.0, L) if py > L / 2 else (1.0, 0.0)

    def plane(a, b, c, strict):
        # a u + b v + c in terms of x, y
        return HalfPlane(a * sx, b * sy, a * ox + b * oy + c, strict)

    return (
        Section("s1", (plane(-1, 1, 0, True), plane(0.43, 1, -L, True))),
        Section("s2", (plane(-1, 1, 0, True), plane(-0.43, -1, L, False))),
        Section("s3", (plane(1, -1, 0, False), plane(1, 0.43, -W, True))),
        Section("s4", (plane(1, -1, 0, False), plane(-1, -0.43, W, False))),
    )


@dataclass(frozen=True)
class SectionedSurface:
    feature: str  # "spp" or "dtau"
    detector: int  # 1-based
    sections: tuple[Section, ...]
    surfaces: tuple[PolySurface, ...]

    def __post_init__(self):
        if len(self.sections) != len(self.surfaces) or not self.sections:
            raise RegressionError("need one surface per section")

    def section_index(self, x, y) -> np.ndarray:
        """First matching section per point, -1 where none matches."""
        x, y = np.asarray(x, float), np.asarray(y, float)
        idx = np.full(np.broadcast(x, y).shape, -1)
        for s, sec in enumerate(self.sections):
            idx = np.where((idx < 0) & sec.contains(x, y), s, idx)
        return idx

    def on_boundary(self, x, y, tol: float = BOUNDARY_TOL) -> np.ndarray:
        idx = self.section_index(x, y)
        out = np.zeros(idx.shape, dtype=bool)
        for s, sec in enumerate(self.sections):
            m = idx == s
            if np.any(m):
                out = np.where(m, sec.boundary_distance(x, y) <= tol, out)
        return out


def eval_surface(s: SectionedSurface, theta) -> float | np.ndarray:
    """Surface value at ``theta`` (shape (2,) or (n, 2))."""
    th = np.asarray(theta, dtype=float)
    x, y = th[..., 0], th[..., 1]
    idx = s.section_index(x, y)
    if np.any(idx < 0):
        raise RegressionError(f"point(s) outside every section: {th[idx < 0].tolist()}")
    out = np.zeros(idx.shape)
    for k, surf in enumerate(s.surfaces):
        m = idx == k
        if np.any(m):
            out = np.where(m, surf.value(x, y), out)
    return float(out) if out.ndim == 0 else out


def eval_gradient(s: SectionedSurface, theta) -> tuple[float, float]:
    """``(d/dx, d/dy)`` at a single point strictly inside a section."""
    x, y = (float(v) for v in theta)
    k = int(s.section_index(x, y))
    if k < 0:
        raise RegressionError(f"({x}, {y}) is outside every section")
    if bool(s.on_boundary(x, y)):
        raise RegressionError(f"({x}, {y}) lies on a section boundary; gradient undefined")
    gx, gy = s.surfaces[k].gradient(x, y)
    return float(gx), float(gy)


def fit_poly(x: np.ndarray, y: np.ndarray, v: np.ndarray) -> PolySurface:
    """Least-squares ``M`` for ``v ~ A(x)^T M A(y)``."""
    x, y, v = (np.asarray(a, dtype=float).ravel() for a in (x, y, v))
    n = N_COEF * N_COEF
    if len(v) < n:
        raise RegressionError(f"need at least {n} samples, got {len(v)}")
    X = (powers(x)[:, :, None] * powers(y)[:, None, :]).reshape(len(v), n)
    # column scaling keeps the normal problem well conditioned for x, y of a few meters
    scale = np.linalg.norm(X, axis=0)
    if np.any(scale == 0):
        raise RegressionError("degenerate sampling: a monomial is identically zero")
    c, _, rank, _ = np.linalg.lstsq(X / scale, v, rcond=None)
    if rank < n:
        raise RegressionError(f"rank-deficient design ({rank} < {n}); sampling is degenerate")
    return PolySurface((c / scale).reshape(N_COEF, N_COEF))


def fit_surfaces(xy: np.ndarray, spp: np.ndarray, dtau: np.ndarray, sections: Sequence[Section],
                 detector: int = 1, valid: np.ndarray | None = None
                 ) -> tuple[SectionedSurface, SectionedSurface]:
    """Fit SPP and delay surfaces section by section. Samples are assigned to the
    first section that contains them; samples with ``valid == False`` are ignored."""
    xy = np.asarray(xy, dtype=float)
    ok = np.ones(len(xy), bool) if valid is None else np.asarray(valid, bool)
    probe = SectionedSurface("spp", detector, tuple(sections),
                             tuple(PolySurface(np.zeros((N_COEF, N_COEF))) for _ in sections))
    idx = probe.section_index(xy[:, 0], xy[:, 1])
    fits: dict[str, list[PolySurface]] = {"spp": [], "dtau": []}
    for k, sec in enumerate(sections):
        m = (idx == k) & ok
        for name, vals in (("spp", spp), ("dtau", dtau)):
            try:
                fits[name].append(fit_poly(xy[m, 0], xy[m, 1], np.asarray(vals)[m]))
            except RegressionError as exc:
                raise RegressionError(f"section {sec.name} ({name}): {exc}") from exc
    return (
        SectionedSurface("spp", detector, tuple(sections), tuple(fits["spp"])),
        SectionedSurface("dtau", detector, tuple(sections), tuple(fits["dtau"])),
    )


def relative_residuals(s: SectionedSurface, xy: np.ndarray, values: np.ndarray,
                       valid: np.ndarray | None = None) -> dict[str, float]:
    """Per section: RMS fit residual divided by the RMS sample value."""
    xy = np.asarray(xy, float)
    ok = np.ones(len(xy), bool) if valid is None else np.asarray(valid, bool)
    idx = s.section_index(xy[:, 0], xy[:, 1])
    out = {}
    for k, sec in enumerate(s.sections):
        m = (idx == k) & ok
        v = np.asarray(values, float)[m]
        r = s.surfaces[k].value(xy[m, 0], xy[m, 1]) - v
        out[sec.name] = math.sqrt(np.mean(r**2) / np.mean(v**2))
    return out


# --------------------------------------------------------------------------- export


def coefficients_to_text(surfaces: Sequence[SectionedSurface]) -> str:
    """One row per ``(feature, detector, section, i, j)``; SPP in mW, delay in ns."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["feature", "detector", "section", "i", "j", "coefficient"])
    for s in surfaces:
        k = _EXPORT_SCALE[s.feature]
        for sec, surf in zip(s.sections, s.surfaces):
            for i in range(N_COEF):
                for j in range(N_COEF):
                    w.writerow([s.feature, s.detector, sec.name, i, j, repr(float(surf.coef[i, j] * k))])
    return buf.getvalue()


def save_coefficients(surfaces: Sequence[SectionedSurface], path: str | Path) -> None:
    Path(path).write_text(coefficients_to_text(surfaces), encoding="utf-8")


def load_coefficients(path: str | Path, sections: dict[int, Sequence[Section]]
                      ) -> list[SectionedSurface]:
    """Inverse of :func:`save_coefficients`; ``sections`` maps detector -> its sections."""
    coefs: dict[tuple[str, int], dict[str, np.ndarray]] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            key = (row["feature"], int(row["detector"]))
            m = coefs.setdefault(key, {}).setdefault(row["section"], np.zeros((N_COEF, N_COEF)))
            m[int(row["i"]), int(row["j"])] = float(row["coefficient"]) / _EXPORT_SCALE[row["feature"]]
    out = []
    for (feat, det), by_sec in coefs.items():
        secs = tuple(sections[det])
        missing = [s.name for s in secs if s.name not in by_sec]
        if missing:
            raise RegressionError(f"{feat} detector {det}: no coefficients for {missing}")
        out.append(SectionedSurface(feat, det, secs, tuple(PolySurface(by_sec[s.name]) for s in secs)))
    return out


def fit_scene(scene, step: float = 0.10, params=None, directory=None
              ) -> dict[int, tuple[SectionedSurface, SectionedSurface]]:
    """Fit both surfaces for every detector from a dense unfiltered map.

    Returns ``{detector index (0-based): (spp, dtau)}``.
    """
    from .channel import ChannelParams
    from .fingerprint import cached_map

    fmap = cached_map(scene, step, params or ChannelParams(), directory=directory)
    xy = fmap.grid.xy
    out = {}
    for q, det in enumerate(scene.detectors):
        f = fmap.features[:, q]
        out[q] = fit_surfaces(xy, f[:, 1], f[:, 2], default_sections(scene.room, det),
                              detector=q + 1, valid=f[:, 3] > 0)
    return out
