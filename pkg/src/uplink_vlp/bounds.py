"""Error bounds: quantization bound, two-nearest-point nearest-neighbour bound,
Fisher information and (quantized) Cramer-Rao bounds."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np
from scipy.special import erfc

from .channel import los_power
from .estimator import FeatureSelection, NoiseModel, TruthSet, _detected
from .fingerprint import FingerprintMap
from .regression import SectionedSurface, eval_gradient
from .scene import Detector, Emitter, Room, Scene

COND_LIMIT = 1e12


class BoundsError(ValueError):
    pass


class SingularFimError(BoundsError):
    pass


def qlb(step: float) -> float:
    """RMS distance from a uniform point in a square cell of side ``step`` to its centre."""
    if step < 0:
        raise BoundsError("grid step must be >= 0")
    return step / math.sqrt(6.0)


def qcrlb(crlb: float, qlb_m: float) -> float:
    if crlb < 0 or qlb_m < 0:
        raise BoundsError("bounds must be >= 0")
    return math.hypot(crlb, qlb_m)


def q_function(x):
    """Gaussian tail probability ``P(N(0,1) > x)``."""
    return 0.5 * erfc(np.asarray(x, dtype=float) / math.sqrt(2.0))


# --------------------------------------------------------------------------- LOS gradient


def los_gradient(theta, detector: Detector, emitter: Emitter) -> np.ndarray:
    """Gradient (W/m) of the received LOS power with respect to the emitter's (x, y).

    ``emitter`` supplies power, Lambertian order and height; its own (x, y) is
    replaced by ``theta``. Outside the detector's field of view the power is
    identically zero and so is the gradient.
    """
    x, y = (float(v) for v in theta)
    em = emitter.at(x, y)
    r = detector.position
    z = r.z - em.position.z
    dx, dy = x - r.x, y - r.y
    d = math.sqrt(dx * dx + dy * dy + z * z)
    if d == 0.0:
        raise BoundsError("emitter and detector positions coincide")
    if los_power(em, detector) == 0.0:
        return np.zeros(2)
    m = em.lambertian_order
    k = -em.power * (m + 1) * (m + 3) * detector.area * z ** (m + 1) / (2 * math.pi * d ** (m + 5))
    return np.array([k * dx, k * dy])


# --------------------------------------------------------------------------- Fisher information


@dataclass(frozen=True)
class Fim:
    matrix: np.ndarray = field(compare=False)

    @property
    def cond(self) -> float:
        s = np.linalg.svd(self.matrix, compute_uv=False)
        return math.inf if s[-1] <= 0 else float(s[0] / s[-1])


Surfaces = Mapping[int, tuple[SectionedSurface, SectionedSurface]]


def jacobian(theta, scene: Scene, surfaces: Surfaces | None, sel: FeatureSelection,
             q: int) -> np.ndarray:
    """``H``: 2 x (selected components) matrix of feature derivatives, detectors 0..q-1."""
    cols = []
    for i in range(q):
        cols.append(los_gradient(theta, scene.detectors[i], scene.emitter_template))
        if sel.count >= 2:
            if surfaces is None or i not in surfaces:
                raise BoundsError(f"no regression surfaces for detector {i + 1}")
            spp, dtau = surfaces[i]
            cols.append(np.array(eval_gradient(spp, theta)))
            if sel.count >= 3:
                cols.append(np.array(eval_gradient(dtau, theta)))
    return np.column_stack(cols)


def weights(noise: NoiseModel, sel: FeatureSelection, q: int) -> np.ndarray:
    """Diagonal of ``Sigma^-1`` restricted to the selected components."""
    return ((1.0 / noise.stds(q)) ** 2)[sel.mask(q)]


def fim(theta, scene: Scene, surfaces: Surfaces | None, noise: NoiseModel,
        sel: FeatureSelection = FeatureSelection(), q: int | None = None) -> Fim:
    """``J = H Sigma^-1 H^T`` for the first ``q`` detectors."""
    q = scene.n_detectors if q is None else q
    if not 1 <= q <= scene.n_detectors:
        raise BoundsError(f"detector count {q} not available")
    H = jacobian(theta, scene, surfaces, sel, q)
    return Fim((H * weights(noise, sel, q)) @ H.T)


def crlb_rms(J: Fim) -> float:
    """``sqrt(trace(J^-1))``."""
    c = J.cond
    if not c < COND_LIMIT:
        raise SingularFimError(f"Fisher information is singular (condition number {c:.3g})")
    return math.sqrt(float(np.trace(np.linalg.inv(J.matrix))))


def lattice(room: Room, n: int = 20, surfaces: Surfaces | None = None,
            tol: float = 1e-6) -> np.ndarray:
    """``n x n`` interior evaluation points; points within ``tol`` of a section
    boundary are dropped.

    Rows sit at quarter-cell offsets so no point falls on the room diagonals.
    """
    xs = (np.arange(n) + 0.5) * room.width / n
    ys = (np.arange(n) + 0.25) * room.length / n
    X, Y = np.meshgrid(xs, ys)
    pts = np.column_stack([X.ravel(), Y.ravel()])
    if surfaces:
        keep = np.ones(len(pts), bool)
        for pair in surfaces.values():
            for s in pair:
                keep &= ~s.on_boundary(pts[:, 0], pts[:, 1], tol)
        pts = pts[keep]
    return pts


def _los_gradients(pts: np.ndarray, detector: Detector, emitter: Emitter) -> np.ndarray:
    """:func:`los_gradient` for ``(P, 2)`` points; returns ``(P, 2)``."""
    r = detector.position
    z = r.z - emitter.position.z
    d = pts - (r.x, r.y)
    dist = np.sqrt((d**2).sum(1) + z * z)
    m = emitter.lambertian_order
    k = -emitter.power * (m + 1) * (m + 3) * detector.area * z ** (m + 1) / (2 * math.pi * dist ** (m + 5))
    seen = z / dist >= math.cos(detector.fov_half_angle) - 1e-15
    return np.where(seen[:, None], k[:, None] * d, 0.0)


def _surface_gradients(s: SectionedSurface, pts: np.ndarray) -> np.ndarray:
    x, y = pts[:, 0], pts[:, 1]
    idx = s.section_index(x, y)
    if np.any(idx < 0) or np.any(s.on_boundary(x, y)):
        raise BoundsError("evaluation points must lie strictly inside a regression section")
    out = np.zeros((len(pts), 2))
    for k, surf in enumerate(s.surfaces):
        m = idx == k
        if np.any(m):
            gx, gy = surf.gradient(x[m], y[m])
            out[m] = np.column_stack([gx, gy])
    return out


def crlb_room(scene: Scene, surfaces: Surfaces | None, noise: NoiseModel,
              sel: FeatureSelection = FeatureSelection(), q: int | None = None,
              points: np.ndarray | None = None) -> float:
    """Room-average CRLB: RMS of the per-point bound over the evaluation lattice.

    Same quantity as :func:`crlb_rms` of :func:`fim` at every point, evaluated for
    all points at once.
    """
    q = scene.n_detectors if q is None else q
    if not 1 <= q <= scene.n_detectors:
        raise BoundsError(f"detector count {q} not available")
    pts = lattice(scene.room, surfaces=surfaces) if points is None else np.asarray(points, float)
    cols = []
    for i in range(q):
        cols.append(_los_gradients(pts, scene.detectors[i], scene.emitter_template))
        if sel.count >= 2:
            if surfaces is None or i not in surfaces:
                raise BoundsError(f"no regression surfaces for detector {i + 1}")
            cols.append(_surface_gradients(surfaces[i][0], pts))
            if sel.count >= 3:
                cols.append(_surface_gradients(surfaces[i][1], pts))
    H = np.stack(cols, axis=-1)  # (P, 2, K)
    J = np.einsum("pik,k,pjk->pij", H, weights(noise, sel, q), H)
    sv = np.linalg.svd(J, compute_uv=False)
    with np.errstate(divide="ignore", invalid="ignore"):
        cond = np.where(sv[:, -1] > 0, sv[:, 0] / sv[:, -1], np.inf)
    if not np.all(cond < COND_LIMIT):
        worst = int(np.argmax(np.nan_to_num(cond, nan=np.inf)))
        raise SingularFimError(f"Fisher information is singular at {pts[worst].tolist()} "
                               f"(condition number {cond[worst]:.3g})")
    tr = np.trace(np.linalg.inv(J), axis1=1, axis2=2)
    return math.sqrt(math.fsum(tr) / len(tr))


# --------------------------------------------------------------------------- NN lower bound


@dataclass(frozen=True)
class LbTerm:
    i: int
    i2: int
    eps: float
    eps2: float
    contribution: float  # eps |theta - C_i|^2 + eps2 |theta - C_i2|^2


def _two_nearest(v: np.ndarray, S: np.ndarray):
    """Nearest constellation point (lowest index on ties) and the nearest point whose
    features differ from it. Exact duplicates of the winner never win the
    localizer's tie-break, so they are not competitors."""
    d = ((v - S) ** 2).sum(1)
    i = int(np.argmin(d))
    d[np.all(S == S[i], axis=1)] = np.inf
    i2 = int(np.argmin(d))
    if not np.isfinite(d[i2]):
        raise BoundsError("all constellation points coincide")
    return i, i2


def nn_lower_bound(theta, v_true: np.ndarray, fmap: FingerprintMap, noise: NoiseModel,
                   sel: FeatureSelection = FeatureSelection()) -> LbTerm:
    """Two-point term of the high-SNR error bound at ``theta``.

    ``v_true`` holds the noiseless features (``(Q, 4)`` rows) observed at
    ``theta``. With ``i`` the constellation point nearest to them and ``i2`` the
    runner-up, ``L`` is the whitened distance from the observation to the
    bisecting boundary and ``eps_i = 1 - Q(sqrt(L^T Sigma^-1 L / 2))``. Runner-up
    candidates identical to the winner are skipped.
    """
    v_true = np.asarray(v_true, float)
    q = len(v_true)
    if fmap.grid.n_cells < 2:
        raise BoundsError("the map needs at least two cells")
    use = sel.mask(q) & _detected(v_true)
    sd = noise.stds(q)[use]
    u = v_true[:, :3].reshape(3 * q)[use] / sd
    S = fmap.features[:, :q, :3].reshape(fmap.grid.n_cells, 3 * q)[:, use] / sd
    i, i2 = _two_nearest(u, S)
    eps = _eps(u, S[i], S[i2], noise.noiseless)
    th = np.asarray(theta, float)
    ci, ci2 = fmap.grid.xy[i], fmap.grid.xy[i2]
    contrib = eps * float(((th - ci) ** 2).sum()) + (1 - eps) * float(((th - ci2) ** 2).sum())
    return LbTerm(i, i2, eps, 1 - eps, contrib)


def _eps(u, si, si2, noiseless: bool) -> float:
    n = si2 - si
    norm = float(np.linalg.norm(n))
    if norm == 0.0:
        raise BoundsError("the two nearest constellation points coincide")
    if noiseless:
        return 1.0
    dist = abs(float(n @ (u - 0.5 * (si + si2)))) / norm
    return 1.0 - float(q_function(math.sqrt(dist * dist / 2.0)))


def lb_rms(truth: TruthSet, fmap: FingerprintMap, noise: NoiseModel,
           sel: FeatureSelection = FeatureSelection(), q: int | None = None) -> float:
    """Bound on the RMS error averaged over the truth positions."""
    q = fmap.n_detectors if q is None else q
    terms = [nn_lower_bound(truth.positions[t], truth.features[t, :q], fmap, noise, sel).contribution
             for t in range(len(truth))]
    return math.sqrt(math.fsum(terms) / len(terms))


@dataclass(frozen=True)
class BoundResult:
    crlb_rms: float
    qlb: float
    qcrlb: float
    lb_rms: float
