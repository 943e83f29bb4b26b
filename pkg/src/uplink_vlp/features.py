"""Peak-detector feature extraction: LOS peak power, second power peak and their delay."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .channel import ImpulseResponse

log = logging.getLogger(__name__)

DEFAULT_GUARD = 2e-9
DEFAULT_SPP_FLOOR = 1e-6


class FeatureError(ValueError):
    pass


@dataclass(frozen=True)
class FeatureVector:
    p_los: float
    p_spp: float
    delta_tau: float
    spp_valid: bool = True

    def as_array(self) -> np.ndarray:
        return np.array([self.p_los, self.p_spp, self.delta_tau])


@dataclass(frozen=True)
class Observation:
    features: tuple[FeatureVector, ...]

    @property
    def supervector(self) -> np.ndarray:
        """``[v1(1), v2(1), v3(1), ..., v3(Q)]``."""
        return np.concatenate([f.as_array() for f in self.features])

    @property
    def valid(self) -> np.ndarray:
        """Per-component validity mask matching :attr:`supervector`."""
        return np.concatenate([[True, f.spp_valid, f.spp_valid] for f in self.features])

    def __len__(self) -> int:
        return len(self.features)


def _peaks(h: np.ndarray, guard_bins: int, floor: float):
    """Return ``(los_idx, spp_idx)``; ``spp_idx`` is -1 when no valid SPP exists.

    The LOS peak is the maximum within ``guard_bins`` of the first nonzero bin.
    With ``guard_bins > 0`` the LOS peak owns a lobe: the run of non-increasing bins
    that follows it. The SPP is the first local maximum after that lobe; if the
    signal never rises again it is not separable from the LOS. With
    ``guard_bins == 0`` the LOS is a single bin and the SPP is the first local
    maximum of the remaining bins (the bin right after the LOS may itself be it).
    """
    nz = np.flatnonzero(h > 0)
    if len(nz) == 0:
        raise FeatureError("impulse response is all zero")
    first = nz[0]
    los = first + int(np.argmax(h[first:first + guard_bins + 1]))
    n = len(h)
    if guard_bins > 0:
        d = np.diff(h[los:])
        rises = np.flatnonzero(d > 0)
        if len(rises) == 0:
            return los, -1
        start = los + rises[0]
    else:
        rest = np.flatnonzero(h[los + 1:] > 0)
        if len(rest) == 0:
            return los, -1
        start = los + 1 + rest[0]
    falls = np.flatnonzero(np.diff(h[start:]) < 0)
    spp = start + falls[0] if len(falls) else n - 1
    if h[spp] <= floor * h[los]:
        return los, -1
    return los, spp


def extract_features(ir: ImpulseResponse, p_t: float, guard: float = DEFAULT_GUARD,
                     spp_floor: float = DEFAULT_SPP_FLOOR) -> FeatureVector:
    """Feature triple of one impulse response scaled to received power (W) by ``p_t``.

    A response whose post-LOS signal never rises again (the LOS lobe swallows the
    diffuse part, e.g. after heavy low-pass filtering) yields ``spp_valid=False``
    with zero SPP and delay.
    """
    h = np.asarray(ir.bins, dtype=float)
    guard_bins = max(0, int(round(guard / ir.dt)))
    los, spp = _peaks(h, guard_bins, spp_floor)
    if spp < 0:
        return FeatureVector(p_t * h[los], 0.0, 0.0, False)
    return FeatureVector(p_t * h[los], p_t * h[spp], (spp - los) * ir.dt, True)


def extract_batch(bins: np.ndarray, dt: float, p_t: float, guard: float = DEFAULT_GUARD,
                  spp_floor: float = DEFAULT_SPP_FLOOR) -> np.ndarray:
    """Features for each row of ``bins``; returns ``(E, 4)`` rows of
    ``(p_los, p_spp, delta_tau, valid)``."""
    guard_bins = max(0, int(round(guard / dt)))
    out = np.zeros((len(bins), 4))
    for e, h in enumerate(bins):
        los, spp = _peaks(h, guard_bins, spp_floor)
        out[e, 0] = p_t * h[los]
        if spp >= 0:
            out[e, 1:] = p_t * h[spp], (spp - los) * dt, 1.0
    return out


def assemble_observation(features: Sequence[FeatureVector], q: int | None = None) -> Observation:
    if q is not None and len(features) != q:
        raise FeatureError(f"expected {q} feature vectors, got {len(features)}")
    if len(features) == 0:
        raise FeatureError("an observation needs at least one detector")
    return Observation(tuple(features))


def features_from_rows(rows: np.ndarray) -> list[FeatureVector]:
    return [FeatureVector(float(r[0]), float(r[1]), float(r[2]), bool(r[3])) for r in rows]


def isclose(a: FeatureVector, b: FeatureVector, rel: float = 1e-9) -> bool:
    return (
        a.spp_valid == b.spp_valid
        and math.isclose(a.p_los, b.p_los, rel_tol=rel)
        and math.isclose(a.p_spp, b.p_spp, rel_tol=rel)
        and math.isclose(a.delta_tau, b.delta_tau, rel_tol=rel, abs_tol=1e-15)
    )
