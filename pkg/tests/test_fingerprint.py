import numpy as np
import pytest
from hypothesis import HealthCheck, given, settings
from hypothesis import strategies as st

from uplink_vlp.channel import los_power
from uplink_vlp.fingerprint import (
    COLUMNS,
    FingerprintMap,
    MapError,
    MapFormatError,
    build_map,
    load_map,
    map_to_text,
    save_map,
)
from uplink_vlp.scene import Detector, Vec3, make_grid, reference_scene

S = reference_scene()


def test_quarter_grid_single_detector_has_four_entries():
    s = S.with_detectors([0])
    fmap = build_map(s, make_grid(s.room, 2.5, 0.85))
    assert len(fmap) == 4
    assert fmap.features.shape == (4, 1, 4)


def test_14cm_map_shape_and_los_maximum(map14):
    assert len(map14) == 4900
    for q, det in enumerate(S.detectors):
        k = int(np.argmax(map14.features[:, q, 0]))
        oracle = [los_power(S.emitter_template.at(x, y), det) for x, y in map14.grid.xy]
        assert k == int(np.argmax(oracle))
        got = map14.features[:, q, 0]
        # reflections arriving within one bin of the LOS share its bin near walls
        exact = np.isclose(got, oracle, rtol=1e-12, atol=0)
        assert exact.mean() > 0.95
        assert np.all(got >= np.asarray(oracle) * (1 - 1e-12))
        np.testing.assert_allclose(got, oracle, rtol=0.05)
        assert np.hypot(*(map14.center(k) - det.position[:2])) < 0.14


def test_diagonal_mirror_entries_equal(map14):
    n = map14.grid.n_cols
    f = map14.features[:, 0].reshape(n, n, 4)
    np.testing.assert_allclose(f, f.transpose(1, 0, 2), rtol=1e-9, atol=1e-20)


def test_channel_errors_carry_cell_index():
    bad = S.with_detectors([0])
    low = Detector(Vec3(1.5, 1.5, 0.5))
    grid = make_grid(bad.room, 2.5, 0.85)
    from dataclasses import replace
    with pytest.raises(MapError, match="cell 0, detector 1"):
        build_map(replace(bad, detectors=(low,)), grid)


def _random_map(seed, q=2, step=1.0):
    rng = np.random.default_rng(seed)
    grid = make_grid(S.room, step, 0.85)
    f = rng.uniform(1e-9, 1e-6, (grid.n_cells, q, 4))
    f[..., 2] = rng.uniform(0, 40e-9, (grid.n_cells, q))
    f[..., 3] = rng.integers(0, 2, (grid.n_cells, q))
    f[f[..., 3] == 0, 1:3] = 0.0
    return FingerprintMap(grid, tuple(d.position for d in S.detectors[:q]), (5.0, 5.0, 3.0), f)


@settings(max_examples=20, deadline=None, suppress_health_check=[HealthCheck.function_scoped_fixture])
@given(st.integers(0, 2**32 - 1), st.integers(1, 4), st.sampled_from([0.5, 1.0, 2.5]))
def test_round_trip(tmp_path, seed, q, step):
    fmap = _random_map(seed, q, step)
    path = tmp_path / f"m{seed}.csv"
    save_map(fmap, path)
    assert load_map(path).equals(fmap)


def test_round_trip_real_map(tmp_path, map14):
    save_map(map14, tmp_path / "m.csv")
    assert load_map(tmp_path / "m.csv").equals(map14)


def test_version_mismatch(tmp_path):
    text = map_to_text(_random_map(1)).replace("# format_version=1\n", "# format_version=999\n")
    (tmp_path / "m.csv").write_text(text)
    with pytest.raises(MapFormatError, match="version"):
        load_map(tmp_path / "m.csv")


def test_truncated_file(tmp_path):
    text = map_to_text(_random_map(2))
    (tmp_path / "a.csv").write_text(text[: len(text) - 30])
    with pytest.raises(MapFormatError):
        load_map(tmp_path / "a.csv")
    lines = text.splitlines(keepends=True)
    (tmp_path / "b.csv").write_text("".join(lines[:-1]))
    with pytest.raises(MapFormatError):
        load_map(tmp_path / "b.csv")


def test_checksum_failure(tmp_path):
    text = map_to_text(_random_map(3))
    head, body = text.split(COLUMNS + "\n")
    row = body.splitlines()[0].split(",")
    row[4] = repr(float(row[4]) * 1.5)
    tampered = head + COLUMNS + "\n" + "\n".join([",".join(row)] + body.splitlines()[1:]) + "\n"
    (tmp_path / "m.csv").write_text(tampered)
    with pytest.raises(MapFormatError, match="checksum"):
        load_map(tmp_path / "m.csv")


def test_hand_built_single_cell_file(tmp_path):
    import hashlib
    row = "0,1,2.5,2.5,3.25e-08,1.5e-09,1.2e-08\n"
    digest = hashlib.sha256(row.encode()).hexdigest()
    header = ("# format_version=1\n# room=5.0 5.0 3.0\n# step=5.0\n# z=0.85\n# n_cols=1\n"
              "# n_rows=1\n# q=1\n# detectors=1.5 1.5 3.0\n# rows=1\n"
              f"# sha256={digest}\n")
    (tmp_path / "one.csv").write_text(header + COLUMNS + "\n" + row)
    fmap = load_map(tmp_path / "one.csv")
    e = fmap.entry(0, 0)
    assert (e.p_los, e.p_spp, e.delta_tau, e.spp_valid) == (3.25e-08, 1.5e-09, 1.2e-08, True)
    np.testing.assert_array_equal(fmap.center(0), [2.5, 2.5])
