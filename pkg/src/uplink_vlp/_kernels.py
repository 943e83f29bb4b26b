"""Compiled inner loops of the ray tracer.

All gains are optical power fractions. Single reflections are split linearly
between the two bins bracketing their delay; higher-order paths are rounded to
the nearest bin of width ``dt``. A bin index at or beyond ``nb`` is dropped
(outside the window).
"""

import math

import numpy as np
from numba import njit

C = 2.99792458e8
INV_2PI = 1.0 / (2.0 * math.pi)
INV_PI = 1.0 / math.pi


@njit(cache=True)
def receiver_gains(centers, normals, areas, rho, rx, cos_fov, dt):
    """Gain and delay bin of the last hop ``element -> detector`` (detector faces down).

    Returns ``(gain, delay_s, bin)`` where ``gain`` already contains the element's
    reflectance, its Lambertian order-1 reradiation and the detector area is *not*
    included (the caller multiplies by it).
    """
    n = centers.shape[0]
    gain = np.zeros(n)
    delay = np.zeros(n)
    bins = np.zeros(n, dtype=np.int64)
    for i in range(n):
        vx = rx[0] - centers[i, 0]
        vy = rx[1] - centers[i, 1]
        vz = rx[2] - centers[i, 2]
        d2 = vx * vx + vy * vy + vz * vz
        d = math.sqrt(d2)
        delay[i] = d / C
        bins[i] = int(math.floor(d / C / dt + 0.5))
        if d2 == 0.0:
            continue
        cos_out = (vx * normals[i, 0] + vy * normals[i, 1] + vz * normals[i, 2]) / d
        cos_inc = vz / d
        if cos_out <= 0.0 or cos_inc <= 0.0 or cos_inc < cos_fov:
            continue
        gain[i] = rho[i] * areas[i] * INV_PI * cos_out * cos_inc / d2
    return gain, delay, bins


@njit(cache=True)
def first_bounce(tx, m, centers, normals, g_rx, delay_rx, los_bin, dt, out):
    """Single reflections over fine elements for a batch of upward-facing emitters.

    Each contribution is split linearly between the two bins whose centers bracket
    its delay (never before the emitter's LOS bin). ``out[e, :]`` is accumulated
    in place.
    """
    n_tx = tx.shape[0]
    n_el = centers.shape[0]
    nb = out.shape[1]
    k = (m + 1.0) * INV_2PI
    for e in range(n_tx):
        px = tx[e, 0]
        py = tx[e, 1]
        pz = tx[e, 2]
        first = los_bin[e]
        for i in range(n_el):
            g = g_rx[i]
            if g == 0.0:
                continue
            vx = centers[i, 0] - px
            vy = centers[i, 1] - py
            vz = centers[i, 2] - pz
            if vz <= 0.0:
                continue
            d2 = vx * vx + vy * vy + vz * vz
            d = math.sqrt(d2)
            cos_in = -(vx * normals[i, 0] + vy * normals[i, 1] + vz * normals[i, 2]) / d
            if cos_in <= 0.0:
                continue
            u = (d / C + delay_rx[i]) / dt
            b = int(math.floor(u))
            if b + 1 >= nb:
                continue
            w = k * (vz / d) ** m * cos_in / d2 * g
            f = u - b
            out[e, max(b, first)] += w * (1.0 - f)
            out[e, max(b + 1, first)] += w * f


@njit(cache=True)
def propagate(centers, normals, areas, rho, prev, lo, hi, dt):
    """One more reflection: ``new[i, t + s_ij] += rho_i K_ij prev[j, t]``.

    ``prev[j]`` is the response at the detector to unit power incident on element
    ``j``; ``new[i]`` is the same quantity for power incident on ``i`` that first
    reradiates towards ``j``. ``lo``/``hi`` bound the nonzero support of each row.
    """
    n, nb = prev.shape
    new = np.zeros((n, nb))
    new_lo = np.full(n, nb, dtype=np.int64)
    new_hi = np.full(n, -1, dtype=np.int64)
    for i in range(n):
        if rho[i] == 0.0:
            continue
        for j in range(n):
            if hi[j] < lo[j]:
                continue
            vx = centers[j, 0] - centers[i, 0]
            vy = centers[j, 1] - centers[i, 1]
            vz = centers[j, 2] - centers[i, 2]
            d2 = vx * vx + vy * vy + vz * vz
            if d2 == 0.0:
                continue
            d = math.sqrt(d2)
            cos_out = (vx * normals[i, 0] + vy * normals[i, 1] + vz * normals[i, 2]) / d
            if cos_out <= 0.0:
                continue
            cos_in = -(vx * normals[j, 0] + vy * normals[j, 1] + vz * normals[j, 2]) / d
            if cos_in <= 0.0:
                continue
            w = rho[i] * areas[j] * INV_PI * cos_out * cos_in / d2
            s = int(math.floor(d / C / dt + 0.5))
            top = min(hi[j], nb - 1 - s)
            for t in range(lo[j], top + 1):
                new[i, t + s] += w * prev[j, t]
            if top >= lo[j]:
                new_lo[i] = min(new_lo[i], lo[j] + s)
                new_hi[i] = max(new_hi[i], top + s)
    return new, new_lo, new_hi


@njit(cache=True)
def multi_bounce(tx, m, centers, normals, areas, resp, lo, hi, los_bin, dt, out):
    """Add ``sum_i g_tx(i) resp[i, t - s_i]`` for every emitter in ``tx``.

    Contributions are never placed before the emitter's LOS bin.
    """
    n_tx = tx.shape[0]
    n_el = centers.shape[0]
    nb = out.shape[1]
    k = (m + 1.0) * INV_2PI
    for e in range(n_tx):
        px = tx[e, 0]
        py = tx[e, 1]
        pz = tx[e, 2]
        first = los_bin[e]
        for i in range(n_el):
            if hi[i] < lo[i]:
                continue
            vx = centers[i, 0] - px
            vy = centers[i, 1] - py
            vz = centers[i, 2] - pz
            if vz <= 0.0:
                continue
            d2 = vx * vx + vy * vy + vz * vz
            d = math.sqrt(d2)
            cos_in = -(vx * normals[i, 0] + vy * normals[i, 1] + vz * normals[i, 2]) / d
            if cos_in <= 0.0:
                continue
            g = k * (vz / d) ** m * cos_in / d2 * areas[i]
            s = int(math.floor(d / C / dt + 0.5))
            top = min(hi[i], nb - 1 - s)
            for t in range(lo[i], top + 1):
                b = t + s
                if b < first:
                    b = first
                out[e, b] += g * resp[i, t]
