import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from uplink_vlp.bounds import (
    BoundsError,
    Fim,
    SingularFimError,
    crlb_rms,
    crlb_room,
    fim,
    lattice,
    los_gradient,
    lb_rms,
    nn_lower_bound,
    q_function,
    qcrlb,
    qlb,
)
from uplink_vlp.channel import los_power
from uplink_vlp.estimator import FeatureSelection, NoiseModel, SnrSpec
from uplink_vlp.fingerprint import FingerprintMap
from uplink_vlp.scene import make_grid, reference_scene

S = reference_scene()
EM = S.emitter_template


def test_qlb_values():
    assert qlb(0.14) == pytest.approx(0.05715, abs=5e-6)
    assert qlb(0.0) == 0.0
    assert qlb(0.10) == pytest.approx(0.04082, abs=5e-6)


def test_qlb_matches_uniform_cell_rms():
    u = np.random.default_rng(0).uniform(-0.5, 0.5, (200_000, 2)) * 0.2
    assert math.sqrt((u**2).sum(1).mean()) == pytest.approx(qlb(0.2), rel=5e-3)


@pytest.mark.parametrize("c,q,want", [(0.0, 0.3, 0.3), (0.2, 0.0, 0.2), (3.0, 4.0, 5.0)])
def test_qcrlb(c, q, want):
    assert qcrlb(c, q) == want


def test_q_function_midpoint():
    assert float(q_function(0.0)) == 0.5


def test_gradient_vanishes_under_detector():
    for det in S.detectors:
        np.testing.assert_array_equal(los_gradient(det.position[:2], det, EM), [0.0, 0.0])


@settings(max_examples=100, deadline=None)
@given(st.floats(0.01, 4.99), st.floats(0.01, 4.99), st.integers(0, 3))
def test_gradient_matches_finite_differences(x, y, q):
    det = S.detectors[q]
    g = los_gradient((x, y), det, EM)
    if los_power(EM.at(x, y), det) == 0.0:
        assert not g.any()
        return
    h = 1e-5
    fd = [(los_power(EM.at(x + h, y), det) - los_power(EM.at(x - h, y), det)) / (2 * h),
          (los_power(EM.at(x, y + h), det) - los_power(EM.at(x, y - h), det)) / (2 * h)]
    np.testing.assert_allclose(g, fd, rtol=1e-6, atol=1e-6 * np.abs(g).max())
    # power falls off away from the nadir
    assert g @ (np.array([x, y]) - det.position[:2]) <= 0


def test_single_detector_los_at_nadir_is_singular():
    noise = SnrSpec(30).noise(S)
    J = fim(S.detectors[0].position[:2], S, None, noise, FeatureSelection(1), q=1)
    assert not J.matrix.any()
    with pytest.raises(SingularFimError, match="condition number"):
        crlb_rms(J)


def test_diagonal_crlb():
    assert crlb_rms(Fim(np.diag([1 / 0.3**2, 1 / 0.4**2]))) == pytest.approx(0.5, rel=1e-12)


def test_doubling_noise_quarters_fim(surfaces):
    n = SnrSpec(30).noise(S)
    a = fim((1.1, 3.3), S, surfaces, n, FeatureSelection(3), 4).matrix
    b = fim((1.1, 3.3), S, surfaces, n.scaled(2.0), FeatureSelection(3), 4).matrix
    np.testing.assert_allclose(b, a / 4, rtol=1e-12)


def test_noise_times_ten_scales_crlb(surfaces):
    n = SnrSpec(20).noise(S)
    a = crlb_rms(fim((2.2, 0.9), S, surfaces, n, FeatureSelection(2), 3))
    b = crlb_rms(fim((2.2, 0.9), S, surfaces, n.scaled(10.0), FeatureSelection(2), 3))
    assert b / a == pytest.approx(10.0, rel=1e-9)


def test_missing_surfaces_reported():
    with pytest.raises(BoundsError, match="regression"):
        fim((1.0, 2.0), S, None, SnrSpec(30).noise(S), FeatureSelection(2), 1)


def test_lattice_avoids_section_boundaries(surfaces):
    pts = lattice(S.room, surfaces=surfaces)
    assert 300 < len(pts) <= 400
    for pair in surfaces.values():
        for s in pair:
            assert not s.on_boundary(pts[:, 0], pts[:, 1], 1e-6).any()


def _two_cell_map(a, b):
    grid = make_grid(S.room, 2.5, 0.85)
    f = np.zeros((4, 1, 4))
    f[:, 0, 3] = 1.0
    far = np.array([1.0, 1.0, 1.0]) * 1e3
    f[:, 0, :3] = [a, b, far, 2 * far]
    return FingerprintMap(grid, (S.detectors[0].position,), (5.0, 5.0, 3.0), f)


def test_eps_on_bisector_is_half():
    a, b = np.array([1.0, 2.0, 3.0]), np.array([1.2, 2.5, 3.1])
    fmap = _two_cell_map(a, b)
    mid = np.r_[(a + b) / 2, 1.0][None]
    t = nn_lower_bound((1.0, 1.0), mid, fmap, NoiseModel(0.1, 0.1))
    assert t.eps == pytest.approx(0.5, abs=1e-12)
    assert {t.i, t.i2} == {0, 1}


def test_eps_tends_to_one_inside_region():
    a, b = np.array([1.0, 2.0, 3.0]), np.array([1.2, 2.5, 3.1])
    fmap = _two_cell_map(a, b)
    v = np.r_[a + 0.1 * (b - a), 1.0][None]
    eps = [nn_lower_bound((1.0, 1.0), v, fmap, NoiseModel(s, s)).eps for s in (1.0, 0.1, 0.01)]
    assert eps[0] < eps[1] < eps[2] and eps[2] == pytest.approx(1.0, abs=1e-12)
    assert nn_lower_bound((1.0, 1.0), v, fmap, NoiseModel(1.0, 1.0, noiseless=True)).eps == 1.0


def test_degenerate_constellation_rejected():
    grid = make_grid(S.room, 2.5, 0.85)
    f = np.ones((4, 1, 4))
    fmap = FingerprintMap(grid, (S.detectors[0].position,), (5.0, 5.0, 3.0), f)
    with pytest.raises(BoundsError, match="coincide"):
        nn_lower_bound((1.0, 1.0), f[0], fmap, NoiseModel(1.0, 1.0))


def test_bound_is_noiseless_quantization_error(map14, truth):
    # eps = 1 leaves the squared distance to the nearest fingerprint
    clean = SnrSpec(math.inf).noise(S)
    lb = lb_rms(truth, map14, clean, FeatureSelection(3), 4)
    assert qlb(0.14) <= lb < 2 * qlb(0.14)


@pytest.mark.parametrize("q,f", [(1, 3), (2, 2), (4, 1), (4, 3)])
def test_room_average_matches_pointwise(surfaces, q, f):
    noise = SnrSpec(30).noise(S)
    pts = lattice(S.room, surfaces=surfaces)[::7]
    sel = FeatureSelection(f)
    each = [crlb_rms(fim(p, S, surfaces, noise, sel, q)) ** 2 for p in pts]
    assert crlb_room(S, surfaces, noise, sel, q, pts) == pytest.approx(math.sqrt(np.mean(each)), rel=1e-10)
