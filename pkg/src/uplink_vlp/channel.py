"""Uplink optical channel: closed-form LOS, ray-traced diffuse response, system filter
and frequency-domain helpers.

The diffuse part follows the recursive Lambertian-reflector model: every reflecting
element reradiates as an ideal order-1 Lambertian source scaled by its reflectance.
Single reflections are traced over the fine element partition. Higher-order
reflections use a coarser partition and a per-detector response table, so each
extra emitter position costs one pass over the coarse elements.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import signal

from . import _kernels
from .scene import Detector, Elements, Emitter, Scene, partition_surfaces

log = logging.getLogger(__name__)

SPEED_OF_LIGHT = _kernels.C


class ChannelError(ValueError):
    pass


class ResourceLimitError(ChannelError):
    """The requested element size / bounce count would exceed the work budget."""


@dataclass(frozen=True)
class ImpulseResponse:
    t0: float
    dt: float
    bins: np.ndarray = field(repr=False, compare=False)

    def __post_init__(self):
        if not self.dt > 0:
            raise ChannelError("dt must be positive")

    @property
    def times(self) -> np.ndarray:
        return self.t0 + self.dt * np.arange(len(self.bins))

    def scaled(self, k: float) -> ImpulseResponse:
        return ImpulseResponse(self.t0, self.dt, self.bins * k)

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["time_ns", "gain"])
            for t, g in zip(self.times, self.bins):
                w.writerow([f"{t * 1e9:.12g}", f"{g:.12g}"])

    @classmethod
    def from_csv(cls, path: str | Path) -> ImpulseResponse:
        data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        t = data[:, 0] * 1e-9
        dt = float(t[1] - t[0]) if len(t) > 1 else 1e-9
        return cls(float(t[0]), dt, data[:, 1].copy())


@dataclass(frozen=True)
class Spectrum:
    df: float
    magnitudes: np.ndarray = field(repr=False, compare=False)

    @property
    def freqs(self) -> np.ndarray:
        return self.df * np.arange(len(self.magnitudes))


@dataclass(frozen=True)
class SystemFilter:
    """LED and photodiode low-pass responses given by their 3 dB bandwidths.

    ``math.inf`` means an ideal (all-pass) device. Each device is modelled as
    ``order`` cascaded identical first-order poles placed so the cascade has the
    requested 3 dB bandwidth.
    """

    f_led: float = math.inf
    f_pd: float = math.inf
    order: int = 1

    def __post_init__(self):
        if not (self.f_led > 0 and self.f_pd > 0):
            raise ChannelError("filter bandwidths must be positive (use math.inf for ideal)")
        if self.order < 1:
            raise ChannelError("filter order must be >= 1")

    @property
    def is_ideal(self) -> bool:
        return math.isinf(self.f_led) and math.isinf(self.f_pd)


IDEAL = SystemFilter()


@dataclass(frozen=True)
class ChannelParams:
    max_bounces: int = 3
    dt: float = 0.2e-9
    window: float = 120e-9
    # element edge used for reflections >= 2 (single reflections use room.element_size)
    coarse_element_size: float = 0.2
    # work budget: fine elements per trace, and coarse pair-bins per extra bounce
    max_fine_elements: int = 2_000_000
    max_coarse_work: float = 2e10

    @property
    def n_bins(self) -> int:
        return int(math.ceil(self.window / self.dt - 1e-9))


def params_from_config(cfg: dict[str, str]) -> ChannelParams:
    d = ChannelParams()
    return ChannelParams(
        max_bounces=int(cfg.get("channel.max_bounces", d.max_bounces)),
        dt=float(cfg.get("channel.dt_ns", d.dt * 1e9)) * 1e-9,
        window=float(cfg.get("channel.window_ns", d.window * 1e9)) * 1e-9,
        coarse_element_size=float(cfg.get("channel.coarse_element_size", d.coarse_element_size)),
    )


# --------------------------------------------------------------------------- LOS


def _geometry(emitter: Emitter, detector: Detector) -> tuple[float, float, float]:
    p = np.asarray(emitter.position, dtype=float)
    r = np.asarray(detector.position, dtype=float)
    dz = r[2] - p[2]
    dh2 = float((r[0] - p[0]) ** 2 + (r[1] - p[1]) ** 2)
    d = math.sqrt(dh2 + dz * dz)
    return d, dz, dh2


def los_power(emitter: Emitter, detector: Detector) -> float:
    """Received LOS power in watts for an up-facing emitter and a down-facing detector."""
    d, z, _ = _geometry(emitter, detector)
    if d == 0.0:
        raise ChannelError("emitter and detector positions coincide")
    if z <= 0:
        raise ChannelError("emitter must be below the detector plane")
    if z / d < math.cos(detector.fov_half_angle) - 1e-15:
        return 0.0
    m = emitter.lambertian_order
    return emitter.power * (m + 1) * detector.area * z ** (m + 1) / (2 * math.pi * d ** (m + 3))


def los_delay(emitter: Emitter, detector: Detector) -> float:
    d, _, _ = _geometry(emitter, detector)
    if d == 0.0:
        raise ChannelError("emitter and detector positions coincide")
    return d / SPEED_OF_LIGHT


def _los_batch(xy: np.ndarray, z: float, m: float, det: Detector, dt: float):
    """Vectorized LOS gain (per unit transmit power) and bin index."""
    r = det.position
    dz = r.z - z
    d2 = (xy[:, 0] - r.x) ** 2 + (xy[:, 1] - r.y) ** 2 + dz * dz
    d = np.sqrt(d2)
    gain = (m + 1) * det.area * dz ** (m + 1) / (2 * np.pi * d ** (m + 3))
    gain = np.where(dz / d >= math.cos(det.fov_half_angle) - 1e-15, gain, 0.0)
    bins = np.floor(d / SPEED_OF_LIGHT / dt + 0.5).astype(np.int64)
    return gain, bins


# --------------------------------------------------------------------------- ray tracer


class ChannelSimulator:
    """Batched impulse-response generator for one scene and parameter set.

    Per-detector precomputation (receiver-side gains and the multi-reflection
    response table) is cached, so building maps over many emitter positions reuses
    it. Results do not depend on batch composition.
    """

    def __init__(self, scene: Scene, params: ChannelParams = ChannelParams()):
        if params.max_bounces < 0:
            raise ChannelError("max_bounces must be >= 0")
        if not params.dt > 0:
            raise ChannelError("dt must be positive")
        self.scene = scene
        self.params = params
        self.n_bins = params.n_bins
        self._fine: Elements | None = None
        self._coarse: Elements | None = None
        self._rx_fine: dict = {}
        self._rx_coarse: dict = {}
        self._check_budget()

    def _check_budget(self) -> None:
        room, p = self.scene.room, self.params
        area = 2 * (room.width * room.length + room.width * room.height + room.length * room.height)
        if p.max_bounces >= 1:
            n_fine = area / room.element_size**2
            if n_fine > p.max_fine_elements:
                raise ResourceLimitError(
                    f"{n_fine:.3g} fine elements at {room.element_size} m exceed the budget "
                    f"of {p.max_fine_elements}; increase max_fine_elements or the element size"
                )
        if p.max_bounces >= 3:
            n_c = area / p.coarse_element_size**2
            work = (p.max_bounces - 2) * n_c * n_c * self.n_bins / 2
            if work > p.max_coarse_work:
                raise ResourceLimitError(
                    f"{p.max_bounces} bounces with {p.coarse_element_size} m coarse elements "
                    f"need ~{work:.3g} operations (budget {p.max_coarse_work:.3g})"
                )

    @property
    def fine(self) -> Elements:
        if self._fine is None:
            self._fine = partition_surfaces(self.scene.room)
        return self._fine

    @property
    def coarse(self) -> Elements:
        if self._coarse is None:
            self._coarse = partition_surfaces(self.scene.room, self.params.coarse_element_size)
        return self._coarse

    def _fine_rx(self, det: Detector, z: float):
        key = (det, z)
        if key not in self._rx_fine:
            el = self.fine
            # only elements above the emitter plane can be lit by an up-facing emitter
            sub = el.subset(el.centers[:, 2] > z)
            g, delay, _ = _kernels.receiver_gains(
                sub.centers, sub.normals, sub.areas, sub.reflectance,
                np.asarray(det.position, float), math.cos(det.fov_half_angle), self.params.dt,
            )
            keep = g > 0
            self._rx_fine[key] = (
                np.ascontiguousarray(sub.centers[keep]),
                np.ascontiguousarray(sub.normals[keep]),
                g[keep] * det.area,
                delay[keep],
            )
        return self._rx_fine[key]

    def _coarse_rx(self, det: Detector):
        if det not in self._rx_coarse:
            el = self.coarse
            nb = self.n_bins
            g, _, b = _kernels.receiver_gains(
                el.centers, el.normals, el.areas, el.reflectance,
                np.asarray(det.position, float), math.cos(det.fov_half_angle), self.params.dt,
            )
            # response to unit power incident on element j after one reflection
            prev = np.zeros((len(el), nb))
            lo = np.full(len(el), nb, dtype=np.int64)
            hi = np.full(len(el), -1, dtype=np.int64)
            # receiver_gains includes the area of the *emitting* element; unit incident
            # power needs reflectance and pattern only, area of the detector instead
            gain = g / el.areas * det.area
            ok = (gain > 0) & (b < nb)
            idx = np.nonzero(ok)[0]
            prev[idx, b[idx]] = gain[idx]
            lo[idx] = b[idx]
            hi[idx] = b[idx]
            total = np.zeros_like(prev)
            t_lo = np.full(len(el), nb, dtype=np.int64)
            t_hi = np.full(len(el), -1, dtype=np.int64)
            for _ in range(2, self.params.max_bounces + 1):
                prev, lo, hi = _kernels.propagate(
                    el.centers, el.normals, el.areas, el.reflectance, prev, lo, hi, self.params.dt
                )
                total += prev
                t_lo = np.minimum(t_lo, lo)
                t_hi = np.maximum(t_hi, hi)
            self._rx_coarse[det] = (total, t_lo, t_hi)
        return self._rx_coarse[det]

    def gains(self, xy: np.ndarray, detector: Detector, z: float | None = None,
              max_bounces: int | None = None) -> np.ndarray:
        """Binned channel gain for emitters at ``xy`` (shape (E, 2)); returns (E, n_bins)."""
        xy = np.atleast_2d(np.asarray(xy, dtype=float))
        em = self.scene.emitter_template
        z = em.position.z if z is None else float(z)
        m = float(em.lambertian_order)
        bounces = self.params.max_bounces if max_bounces is None else max_bounces
        dt, nb = self.params.dt, self.n_bins
        tx = np.ascontiguousarray(np.column_stack([xy, np.full(len(xy), z)]))
        if np.any(tx[:, 2] >= detector.position.z):
            raise ChannelError("emitter must be below the detector plane")

        out = np.zeros((len(xy), nb))
        los, los_bin = _los_batch(xy, z, m, detector, dt)
        if np.any(los_bin >= nb):
            raise ChannelError("LOS delay beyond the simulation window")
        out[np.arange(len(xy)), los_bin] += los
        if bounces >= 1 and self._reflective():
            c, n, g, delay = self._fine_rx(detector, z)
            _kernels.first_bounce(tx, m, c, n, g, delay, los_bin, dt, out)
        if bounces >= 2 and self._reflective():
            if bounces != self.params.max_bounces:
                raise ChannelError("multi-bounce tables are built for params.max_bounces only")
            resp, lo, hi = self._coarse_rx(detector)
            el = self.coarse
            _kernels.multi_bounce(tx, m, el.centers, el.normals, el.areas,
                                  resp, lo, hi, los_bin, dt, out)
        return out

    def _reflective(self) -> bool:
        room = self.scene.room
        return room.reflectance > 0 or any(r > 0 for _, r in room.surface_reflectance)

    def impulse_response(self, emitter: Emitter, detector: Detector,
                         max_bounces: int | None = None) -> ImpulseResponse:
        if _geometry(emitter, detector)[0] == 0.0:
            raise ChannelError("emitter and detector positions coincide")
        xy = np.array([[emitter.position.x, emitter.position.y]])
        bins = self.gains(xy, detector, z=emitter.position.z, max_bounces=max_bounces)[0]
        return ImpulseResponse(0.0, self.params.dt, bins)


_SIMULATORS: dict = {}


def simulator(scene: Scene, params: ChannelParams = ChannelParams()) -> ChannelSimulator:
    """Shared simulator for ``(scene, params)`` so precomputed tables are reused."""
    key = (scene, params)
    if key not in _SIMULATORS:
        _SIMULATORS[key] = ChannelSimulator(scene, params)
    return _SIMULATORS[key]


def impulse_response(emitter: Emitter, detector: Detector, scene: Scene,
                     max_bounces: int = 3, dt: float = 0.2e-9,
                     params: ChannelParams | None = None) -> ImpulseResponse:
    """Channel impulse response ``h_ch`` between ``emitter`` and ``detector``.

    Bin ``n`` holds the fraction of transmitted power arriving in
    ``[n dt - dt/2, n dt + dt/2)``. The LOS term lands in a single bin.
    """
    if max_bounces < 0:
        raise ChannelError("max_bounces must be >= 0")
    if not dt > 0:
        raise ChannelError("dt must be positive")
    base = params or ChannelParams()
    p = ChannelParams(max_bounces=max_bounces, dt=dt, window=base.window,
                      coarse_element_size=base.coarse_element_size,
                      max_fine_elements=base.max_fine_elements,
                      max_coarse_work=base.max_coarse_work)
    return simulator(scene, p).impulse_response(emitter, detector)


# --------------------------------------------------------------------------- filtering


def _pole(f3db: float, order: int, dt: float) -> float:
    # per-stage cutoff so that `order` identical stages give the requested 3 dB point
    fc = f3db / math.sqrt(2 ** (1 / order) - 1)
    return math.exp(-2 * math.pi * fc * dt)


def _kernel_poles(flt: SystemFilter, dt: float) -> list[float]:
    poles = []
    for f in (flt.f_led, flt.f_pd):
        if not math.isinf(f):
            poles += [_pole(f, flt.order, dt)] * flt.order
    return poles


def _tail_bins(poles: list[float], tol: float = 1e-10) -> int:
    if not poles:
        return 0
    probe = np.zeros(64)
    probe[0] = 1.0
    n = 64
    while True:
        y = probe
        for a in poles:
            y = signal.lfilter([1 - a], [1, -a], y)
        if 1.0 - y.sum() < tol:
            return n
        n *= 2
        probe = np.zeros(n)
        probe[0] = 1.0


def filter_bins(bins: np.ndarray, flt: SystemFilter, dt: float) -> np.ndarray:
    """Filter the last axis of ``bins``; output is padded so the DC gain is kept."""
    poles = _kernel_poles(flt, dt)
    if not poles:
        return np.array(bins, dtype=float, copy=True)
    pad = _tail_bins(poles)
    x = np.concatenate([bins, np.zeros(bins.shape[:-1] + (pad,))], axis=-1)
    for a in poles:
        x = signal.lfilter([1 - a], [1, -a], x, axis=-1)
    return x


def apply_system_filter(ir: ImpulseResponse, flt: SystemFilter) -> ImpulseResponse:
    return ImpulseResponse(ir.t0, ir.dt, filter_bins(ir.bins, flt, ir.dt))


# --------------------------------------------------------------------------- spectrum


def frequency_response(ir: ImpulseResponse, n_points: int | None = None) -> Spectrum:
    """One-sided ``|H(f)|`` of the zero-padded bin sequence, ``df = 1/(n_points dt)``."""
    n = len(ir.bins) if n_points is None else int(n_points)
    if n < len(ir.bins):
        raise ChannelError("n_points must be at least the number of bins")
    mag = np.abs(np.fft.rfft(ir.bins, n))
    return Spectrum(1.0 / (n * ir.dt), mag)


def diffuse_bw_3db(ir: ImpulseResponse, n_points: int = 16384) -> float:
    """3 dB bandwidth (Hz) of the response with its LOS bin removed.

    The LOS bin is the first nonzero bin. The crossing of ``|H(0)|/sqrt(2)`` is
    linearly interpolated between frequency samples.
    """
    nz = np.flatnonzero(ir.bins)
    if len(nz) == 0:
        raise ChannelError("impulse response is all zero")
    diffuse = ir.bins.copy()
    diffuse[nz[0]] = 0.0
    if not np.any(diffuse > 0):
        raise ChannelError("no diffuse energy in the impulse response")
    spec = frequency_response(ImpulseResponse(ir.t0, ir.dt, diffuse),
                              max(n_points, len(ir.bins)))
    mag = spec.magnitudes
    level = mag[0] / math.sqrt(2)
    below = np.flatnonzero(mag < level)
    if len(below) == 0:
        return math.inf
    k = below[0]
    f0, f1 = spec.freqs[k - 1], spec.freqs[k]
    m0, m1 = mag[k - 1], mag[k]
    return float(f0 + (m0 - level) / (m0 - m1) * (f1 - f0))
