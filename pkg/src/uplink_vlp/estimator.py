"""Noisy observations, the covariance-weighted nearest-neighbour localizer and Monte
Carlo RMS error.

Noise is calibrated from an SNR in dB: the power-feature standard deviation is
``P_ref * 10**(-SNR/20)`` and the delay standard deviation is
``sigma_tau_ref * 10**(-SNR/20)``, so every error bound scales exactly with the SNR.
"""

from __future__ import annotations

import enum
import logging
import math
from dataclasses import dataclass

import numpy as np

from .channel import IDEAL, ChannelParams, SystemFilter, filter_bins, los_power
from .features import FeatureVector, Observation, assemble_observation
from .fingerprint import FingerprintMap, cached_features, simulate_features
from .scene import Scene

log = logging.getLogger(__name__)

DEFAULT_SIGMA_TAU_REF = 30e-9


class EstimatorError(ValueError):
    pass


@dataclass(frozen=True)
class NoiseModel:
    """Per-detector feature noise: ``sigma`` (W) on both powers, ``sigma_tau`` (s) on
    the delay.

    ``noiseless=True`` keeps the weighting implied by the two deviations but adds no
    noise (the SNR -> infinity limit).
    """

    sigma: float
    sigma_tau: float
    noiseless: bool = False

    def __post_init__(self):
        if not (self.sigma > 0 and self.sigma_tau > 0):
            raise EstimatorError("noise deviations must be positive")
        if not (math.isfinite(self.sigma) and math.isfinite(self.sigma_tau)):
            raise EstimatorError("noise deviations must be finite")

    def stds(self, q: int) -> np.ndarray:
        return np.tile([self.sigma, self.sigma, self.sigma_tau], q)

    def covariance(self, q: int) -> np.ndarray:
        """``diag(sigma^2, sigma^2, sigma_tau^2, ...)`` of size ``3q``."""
        return np.diag(self.stds(q) ** 2)

    def scaled(self, k: float) -> NoiseModel:
        return NoiseModel(self.sigma * k, self.sigma_tau * k, self.noiseless)


class SnrReference(enum.Enum):
    """What ``P_ref`` is for a given SNR.

    ``CENTER_LOS``: closed-form LOS power at the first detector from an emitter at
    the room centre. ``CENTER_LOS_PEAK``: the same power passed through the system
    filter as a one-bin pulse, i.e. the LOS peak the detector actually reports. The
    two coincide for an ideal system.
    """

    CENTER_LOS = "center_los"
    CENTER_LOS_PEAK = "center_los_peak"


@dataclass(frozen=True)
class SnrSpec:
    snr_db: float
    reference: SnrReference = SnrReference.CENTER_LOS_PEAK
    sigma_tau_ref: float = DEFAULT_SIGMA_TAU_REF

    def __post_init__(self):
        if math.isnan(self.snr_db) or self.snr_db == -math.inf:
            raise EstimatorError("SNR must be a number or +inf")
        if not self.sigma_tau_ref > 0:
            raise EstimatorError("sigma_tau_ref must be positive")

    def reference_power(self, scene: Scene, flt: SystemFilter = IDEAL, dt: float = 0.2e-9) -> float:
        room = scene.room
        em = scene.emitter_template.at(room.width / 2, room.length / 2)
        p = los_power(em, scene.detectors[0])
        if self.reference is SnrReference.CENTER_LOS_PEAK:
            p *= pulse_peak(flt, dt)
        return p

    def noise(self, scene: Scene, flt: SystemFilter = IDEAL, dt: float = 0.2e-9) -> NoiseModel:
        p_ref = self.reference_power(scene, flt, dt)
        if math.isinf(self.snr_db):
            return NoiseModel(p_ref, self.sigma_tau_ref, noiseless=True)
        k = 10.0 ** (-self.snr_db / 20.0)
        return NoiseModel(p_ref * k, self.sigma_tau_ref * k)


def pulse_peak(flt: SystemFilter, dt: float) -> float:
    """Peak of the filtered response to a unit one-bin pulse (1 for an ideal system)."""
    if flt.is_ideal:
        return 1.0
    return float(filter_bins(np.array([1.0]), flt, dt).max())


@dataclass(frozen=True)
class FeatureSelection:
    count: int = 3

    def __post_init__(self):
        if self.count not in (1, 2, 3):
            raise EstimatorError("feature count must be 1, 2 or 3")

    def mask(self, q: int) -> np.ndarray:
        """Boolean mask over a length-``3q`` supervector."""
        return np.tile(np.arange(3) < self.count, q)


# --------------------------------------------------------------------------- observations


def observe(true: np.ndarray, noise: NoiseModel, normals: np.ndarray) -> np.ndarray:
    """``true + noise`` for ``(..., Q, 4)`` features and standard normals of shape ``(..., Q, 3)``.

    Components without a separable second peak keep zero value and stay flagged
    invalid; noise is still drawn for them so random streams stay aligned.
    """
    out = np.array(true, dtype=float, copy=True)
    if not noise.noiseless:
        out[..., :3] += normals * np.array([noise.sigma, noise.sigma, noise.sigma_tau])
        bad = out[..., 3] == 0
        out[..., 1:3] = np.where(bad[..., None], 0.0, out[..., 1:3])
    return out


def synthesize_observation(theta, scene: Scene, noise: NoiseModel, seed: int,
                           params: ChannelParams = ChannelParams(), flt: SystemFilter = IDEAL,
                           guard: float | None = None) -> Observation:
    """Noisy features for an emitter at ``theta``; deterministic in ``seed``."""
    th = np.asarray(theta, dtype=float).reshape(1, 2)
    room = scene.room
    if not (0 <= th[0, 0] <= room.width and 0 <= th[0, 1] <= room.length):
        raise EstimatorError(f"position {th[0].tolist()} is outside the room")
    true = simulate_features(scene, th, params, flt, guard)[0]
    rng = np.random.default_rng(np.random.SeedSequence([int(seed)]))
    v = observe(true, noise, rng.standard_normal((scene.n_detectors, 3)))
    return assemble_observation([FeatureVector(r[0], r[1], r[2], bool(r[3])) for r in v])


def _as_rows(obs: Observation | np.ndarray) -> np.ndarray:
    if isinstance(obs, Observation):
        return np.array([[f.p_los, f.p_spp, f.delta_tau, float(f.spp_valid)] for f in obs.features])
    return np.asarray(obs, dtype=float)


def _detected(v: np.ndarray) -> np.ndarray:
    """Per-component detection mask for ``(..., Q, 4)`` rows; LOS is always present."""
    ok = np.repeat(v[..., 3] > 0, 3, axis=-1)
    ok[..., 0::3] = True
    return ok


def distances(obs: Observation | np.ndarray, fmap: FingerprintMap, noise: NoiseModel,
              sel: FeatureSelection) -> np.ndarray:
    """Squared Mahalanobis distance from one observation to every map cell.

    Only the first ``len(obs)`` detectors of the map take part. Components whose
    second peak was not detected are left out.
    """
    v = _as_rows(obs)
    q = len(v)
    if q > fmap.n_detectors:
        raise EstimatorError(f"observation has {q} detectors, map has {fmap.n_detectors}")
    use = sel.mask(q) & _detected(v)
    if np.any(sel.mask(q) & ~use):
        log.debug("dropping %d undetected second-peak components", int((sel.mask(q) & ~use).sum()))
    w = (1.0 / noise.stds(q)) ** 2
    S = fmap.features[:, :q, :3].reshape(fmap.grid.n_cells, 3 * q)[:, use]
    d = (v[:, :3].reshape(3 * q)[use] - S) ** 2
    return d @ w[use]


def locate(obs: Observation | np.ndarray, fmap: FingerprintMap, noise: NoiseModel,
           sel: FeatureSelection = FeatureSelection()) -> tuple[int, np.ndarray]:
    """Nearest cell under the noise-weighted metric; ties go to the lowest index."""
    if fmap.grid.n_cells == 0:
        raise EstimatorError("empty map")
    k = int(np.argmin(distances(obs, fmap, noise, sel)))
    return k, fmap.grid.xy[k].copy()


def locate_batch(obs: np.ndarray, fmap: FingerprintMap, noise: NoiseModel,
                 sel: FeatureSelection, chunk: int = 256) -> np.ndarray:
    """:func:`locate` for ``(T, Q, 4)`` observations; returns cell indices."""
    obs = np.asarray(obs, float)
    n, q = obs.shape[:2]
    if q > fmap.n_detectors:
        raise EstimatorError(f"observations have {q} detectors, map has {fmap.n_detectors}")
    S = fmap.features[:, :q, :3].reshape(fmap.grid.n_cells, 3 * q)
    w = (1.0 / noise.stds(q)) ** 2 * sel.mask(q)
    out = np.empty(n, dtype=np.int64)
    for lo in range(0, n, chunk):
        v = obs[lo:lo + chunk]
        ww = w * _detected(v)
        d = ((v[:, None, :, :3].reshape(len(v), 1, 3 * q) - S[None]) ** 2 * ww[:, None, :]).sum(-1)
        out[lo:lo + chunk] = d.argmin(1)
    return out


# --------------------------------------------------------------------------- Monte Carlo


@dataclass(frozen=True)
class TruthSet:
    """Random emitter positions with their noiseless features and the standard-normal
    draws used to perturb them.

    Trial ``t`` uses its own generator seeded by ``(seed, t)``: two uniforms for the
    position, then three normals per detector. Different detector subsets and feature
    counts therefore see the same positions and noise.
    """

    seed: int
    positions: np.ndarray  # (T, 2)
    features: np.ndarray  # (T, Q, 4)
    normals: np.ndarray  # (T, Q, 3)

    def __len__(self) -> int:
        return len(self.positions)


def draw_trials(scene: Scene, trials: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    if trials < 1:
        raise EstimatorError("trials must be >= 1")
    W, L = scene.room.width, scene.room.length
    q = scene.n_detectors
    pos = np.empty((trials, 2))
    nrm = np.empty((trials, q, 3))
    for t in range(trials):
        rng = np.random.default_rng(np.random.SeedSequence([int(seed), t]))
        pos[t] = rng.uniform(0.0, 1.0, 2) * (W, L)
        nrm[t] = rng.standard_normal((q, 3))
    return pos, nrm


def make_truth(scene: Scene, trials: int, seed: int, params: ChannelParams = ChannelParams(),
               flt: SystemFilter = IDEAL, guard: float | None = None,
               positions: np.ndarray | None = None, cache: bool = True) -> TruthSet:
    """Truth set over uniform random positions (or the given ``positions``)."""
    pos, nrm = draw_trials(scene, trials, seed)
    if positions is not None:
        pos = np.asarray(positions, float).reshape(trials, 2)
    get = cached_features if cache else simulate_features
    feats = get(scene, pos, params, flt, guard)
    return TruthSet(int(seed), pos, feats, nrm)


@dataclass(frozen=True)
class McResult:
    rms: float
    stderr: float
    trials: int
    cells: np.ndarray  # chosen cell per trial


def rms_error_mc(scene: Scene, fmap: FingerprintMap, noise: NoiseModel | SnrSpec,
                 sel: FeatureSelection = FeatureSelection(), trials: int = 10_000, seed: int = 0,
                 q: int | None = None, params: ChannelParams = ChannelParams(),
                 flt: SystemFilter = IDEAL, guard: float | None = None,
                 truth: TruthSet | None = None) -> McResult:
    """RMS of ``|theta - C_khat|`` over ``trials`` uniform positions, detectors ``1..q``.

    ``noise`` may be an :class:`SnrSpec`, resolved against ``scene`` and ``flt``. A
    prebuilt ``truth`` set (same seed and trial count) skips the channel simulation.
    The standard error is the delta-method estimate for the RMS.
    """
    if isinstance(noise, SnrSpec):
        noise = noise.noise(scene, flt, params.dt)
    if truth is None:
        truth = make_truth(scene, trials, seed, params, flt, guard)
    elif len(truth) != trials or truth.seed != seed:
        raise EstimatorError("truth set does not match the requested trials/seed")
    q = fmap.n_detectors if q is None else q
    if not 1 <= q <= min(fmap.n_detectors, truth.features.shape[1]):
        raise EstimatorError(f"detector count {q} not available")
    obs = observe(truth.features[:, :q], noise, truth.normals[:, :q])
    cells = locate_batch(obs, fmap, noise, sel)
    return summarize(truth.positions, fmap.grid.xy[cells], cells)


def summarize(truth_xy: np.ndarray, est_xy: np.ndarray, cells: np.ndarray) -> McResult:
    err2 = ((np.asarray(truth_xy) - np.asarray(est_xy)) ** 2).sum(1)
    n = len(err2)
    mean = math.fsum(err2) / n
    rms = math.sqrt(mean)
    if n > 1 and rms > 0:
        var = math.fsum((err2 - mean) ** 2) / (n - 1)
        stderr = math.sqrt(var / n) / (2 * rms)
    else:
        stderr = 0.0
    return McResult(rms, stderr, n, cells)
