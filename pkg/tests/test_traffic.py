import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hevtem import traffic
from hevtem.errors import EmptyInput, InvalidConfig, OutOfGrid, StallError


def simple_grid(space_cells=4, time_cells=3, ds=100.0, dt=50.0):
    return traffic.GridSpec(0.0, ds, space_cells, 0.0, dt, time_cells)


def single_cell_traj(t, x, v):
    return traffic.ProbeTrajectory([t], [x], [v])


# ---------------------------------------------------------------------------
# field construction
# ---------------------------------------------------------------------------

def test_cell_mean_of_two_samples():
    grid = simple_grid()
    field = traffic.build_speed_field(
        [single_cell_traj(10.0, 50.0, 10.0), single_cell_traj(12.0, 60.0, 20.0)],
        grid, 30.0)
    assert field.mean_speed_m_s[0, 0] == 15.0
    assert field.sample_count[0, 0] == 2


def test_empty_cell_gets_speed_limit():
    grid = simple_grid()
    field = traffic.build_speed_field([single_cell_traj(10.0, 50.0, 10.0)],
                                      grid, 29.06)
    assert field.mean_speed_m_s[2, 1] == 29.06
    assert field.sample_count[2, 1] == 0


def test_single_sample_identity():
    grid = simple_grid()
    field = traffic.build_speed_field([single_cell_traj(0.0, 0.0, 12.3)],
                                      grid, 30.0)
    assert field.mean_speed_m_s[0, 0] == 12.3


def test_edge_sample_joins_higher_cell():
    grid = simple_grid()
    field = traffic.build_speed_field([single_cell_traj(0.0, 100.0, 7.0)],
                                      grid, 30.0)
    assert field.sample_count[1, 0] == 1
    assert field.sample_count[0, 0] == 0


def test_build_requires_input():
    with pytest.raises(EmptyInput):
        traffic.build_speed_field([], simple_grid(), 30.0)


@settings(max_examples=40)
@given(st.lists(st.tuples(st.floats(0.0, 149.9), st.floats(0.0, 399.9),
                          st.floats(0.5, 28.0)),
                min_size=1, max_size=40))
def test_cell_mean_bounded_by_samples(points):
    """Brute-force re-aggregation bounds each filled cell by its samples."""
    grid = simple_grid()
    trajs = [single_cell_traj(t, x, v) for t, x, v in points]
    field = traffic.build_speed_field(trajs, grid, 30.0)
    per_cell: dict[tuple[int, int], list[float]] = {}
    for t, x, v in points:
        per_cell.setdefault((grid.space_index(x), grid.time_index(t)),
                            []).append(v)
    for (si, ti), vals in per_cell.items():
        got = field.mean_speed_m_s[si, ti]
        assert min(vals) - 1e-12 <= got <= max(vals) + 1e-12
        assert field.sample_count[si, ti] == len(vals)


# ---------------------------------------------------------------------------
# extraction
# ---------------------------------------------------------------------------

def uniform_field(v, space_cells=12, ds=traffic.MILE_M / 10.0):
    grid = traffic.GridSpec(0.0, ds, space_cells, 0.0, 300.0, 10)
    mean = np.full((space_cells, 10), float(v))
    return traffic.SpeedField(grid, mean, np.zeros_like(mean, dtype=np.int64), 30.0)


def test_extract_uniform_time_increments():
    field = uniform_field(20.0)
    ds = field.grid.space_cell_m
    prof = traffic.extract_flow_speed(field, 0.0, 0.0, end_position_m=10 * ds)
    dts = np.diff(prof.time_s)
    assert np.allclose(dts, ds / 20.0, rtol=1e-12)
    assert prof.time_s[-1] == pytest.approx(10 * ds / 20.0, rel=1e-12)


def test_extract_two_cell_hand_times():
    grid = traffic.GridSpec(0.0, 100.0, 2, 0.0, 1000.0, 1)
    mean = np.array([[10.0], [20.0]])
    field = traffic.SpeedField(grid, mean, np.zeros_like(mean, dtype=np.int64), 30.0)
    prof = traffic.extract_flow_speed(field, 0.0, 0.0, end_position_m=200.0)
    assert list(prof.time_s) == [0.0, 10.0, 15.0]
    assert list(prof.position_m) == [0.0, 100.0, 200.0]


def test_extract_monotone_walk():
    field = uniform_field(15.0)
    prof = traffic.extract_flow_speed(field, 100.0, 40.0, end_time_s=220.0)
    assert np.all(np.diff(prof.time_s) > 0)
    assert np.all(np.diff(prof.position_m) > 0)


def test_extract_time_varying_uniform_reproduces_field():
    """On a spatially-uniform field the emitted speed at each boundary equals
    the field's value in that time cell."""
    grid = traffic.GridSpec(0.0, 100.0, 40, 0.0, 60.0, 6)
    per_time = np.array([20.0, 14.0, 9.0, 16.0, 24.0, 11.0])
    mean = np.tile(per_time, (40, 1))
    field = traffic.SpeedField(grid, mean, np.zeros_like(mean, dtype=np.int64), 30.0)
    prof = traffic.extract_flow_speed(field, 0.0, 0.0, end_time_s=250.0)
    for t, v in zip(prof.time_s[:-1], prof.speed_m_s[:-1]):
        assert v == per_time[grid.time_index(t)]


def test_extract_stall_error():
    field = uniform_field(0.05)
    with pytest.raises(StallError):
        traffic.extract_flow_speed(field, 0.0, 0.0, end_time_s=100.0)


def test_extract_out_of_grid():
    field = uniform_field(20.0, space_cells=2, ds=100.0)
    with pytest.raises(OutOfGrid):
        traffic.extract_flow_speed(field, 0.0, 0.0, end_time_s=2000.0)
    with pytest.raises(OutOfGrid):
        traffic.extract_flow_speed(field, -5.0, 0.0, end_time_s=10.0)


# ---------------------------------------------------------------------------
# resampling
# ---------------------------------------------------------------------------

def test_resample_midpoint():
    prof = traffic.FlowSpeedProfile([0.0, 10.0], [0.0, 150.0], [10.0, 20.0])
    out = traffic.resample_profile(prof, 5.0)
    assert list(out.time_s) == [0.0, 5.0, 10.0]
    assert list(out.speed_m_s) == [10.0, 15.0, 20.0]


def test_resample_idempotent():
    prof = traffic.FlowSpeedProfile([0.0, 3.0, 7.5, 9.0],
                                    [0.0, 30.0, 90.0, 120.0],
                                    [10.0, 12.0, 18.0, 14.0])
    once = traffic.resample_profile(prof, 2.0)
    twice = traffic.resample_profile(once, 2.0)
    assert np.array_equal(once.time_s, twice.time_s)
    assert np.array_equal(once.speed_m_s, twice.speed_m_s)


def test_resample_uniform_same_dt_identity():
    prof = traffic.FlowSpeedProfile([0.0, 2.0, 4.0, 6.0],
                                    [0.0, 20.0, 44.0, 60.0],
                                    [10.0, 12.0, 8.0, 9.0])
    out = traffic.resample_profile(prof, 2.0)
    assert np.array_equal(out.time_s, prof.time_s)
    assert np.array_equal(out.speed_m_s, prof.speed_m_s)


def test_resample_degenerate_endpoints_only():
    prof = traffic.FlowSpeedProfile([0.0, 4.0], [0.0, 40.0], [10.0, 11.0])
    out = traffic.resample_profile(prof, 50.0)
    assert list(out.time_s) == [0.0, 4.0]
    assert list(out.speed_m_s) == [10.0, 11.0]


# ---------------------------------------------------------------------------
# synthetic trajectories
# ---------------------------------------------------------------------------

def test_synth_zero_probes():
    cfg = traffic.TrafficConfig(probe_count=0)
    assert traffic.synth_trajectories(cfg, 1) == []


def test_synth_deterministic():
    cfg = traffic.TrafficConfig(probe_count=8, duration_s=600.0,
                                corridor_length_m=3000.0)
    a = traffic.synth_trajectories(cfg, 42)
    b = traffic.synth_trajectories(cfg, 42)
    assert len(a) == len(b) == 8
    for ta, tb in zip(a, b):
        assert np.array_equal(ta.speed_m_s, tb.speed_m_s)
        assert np.array_equal(ta.position_m, tb.position_m)


def test_synth_zero_amplitude_free_flow():
    cfg = traffic.TrafficConfig(probe_count=4, congestion_depth=0.0,
                                speed_jitter=0.0, duration_s=500.0,
                                corridor_length_m=2000.0)
    for traj in traffic.synth_trajectories(cfg, 3):
        assert np.allclose(traj.speed_m_s, cfg.free_flow_speed_m_s)


def test_synth_congestion_visible_in_field():
    cfg = traffic.TrafficConfig(probe_count=40, duration_s=1800.0,
                                corridor_length_m=6000.0)
    trajs = traffic.synth_trajectories(cfg, 7)
    grid = traffic.GridSpec(0.0, 200.0, 30, 0.0, 300.0, 6)
    field = traffic.build_speed_field(trajs, grid, cfg.free_flow_speed_m_s)
    filled = field.mean_speed_m_s[field.sample_count > 0]
    assert filled.min() < 0.5 * cfg.free_flow_speed_m_s
    assert filled.max() <= cfg.free_flow_speed_m_s + 1e-9


def test_synth_invalid_config():
    with pytest.raises(InvalidConfig):
        traffic.TrafficConfig(congestion_depth=1.5)
    with pytest.raises(InvalidConfig):
        traffic.TrafficConfig(probe_count=-1)


# ---------------------------------------------------------------------------
# file round trips
# ---------------------------------------------------------------------------

def test_trajectory_csv_round_trip(tmp_path):
    cfg = traffic.TrafficConfig(probe_count=3, duration_s=300.0,
                                corridor_length_m=2000.0)
    trajs = traffic.synth_trajectories(cfg, 5)
    path = tmp_path / "probes.csv"
    traffic.save_trajectories_csv(trajs, path)
    back = traffic.load_trajectories_csv(path)
    assert len(back) == len(trajs)
    for a, b in zip(trajs, back):
        assert np.array_equal(a.time_s, b.time_s)
        assert np.array_equal(a.speed_m_s, b.speed_m_s)


def test_field_round_trip(tmp_path):
    field = uniform_field(17.5, space_cells=3, ds=120.0)
    base = str(tmp_path / "field")
    traffic.save_speed_field(field, base)
    back = traffic.load_speed_field(base)
    assert back.grid == field.grid
    assert np.array_equal(back.mean_speed_m_s, field.mean_speed_m_s)
    assert back.speed_limit_m_s == field.speed_limit_m_s


def test_profile_round_trip(tmp_path):
    prof = traffic.FlowSpeedProfile([0.0, 5.0, 9.0], [0.0, 60.0, 121.5],
                                    [12.0, 13.5, 11.0])
    path = tmp_path / "profile.csv"
    traffic.save_profile_csv(prof, path)
    back = traffic.load_profile_csv(path)
    assert np.array_equal(back.time_s, prof.time_s)
    assert np.array_equal(back.speed_m_s, prof.speed_m_s)
