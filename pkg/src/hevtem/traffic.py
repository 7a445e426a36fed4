"""Spatiotemporal traffic speed fields from probe-vehicle trajectories.

Builds a gridded mean-speed matrix over (space cell, time interval) from
probe samples, then extracts a per-trip traffic flow speed profile by walking
the field cell by cell (the time to cross a cell is cell length over the
local mean speed). A synthetic trajectory generator with a moving congestion
wave stands in for real probe data.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass

import numpy as np

from .errors import EmptyInput, InvalidConfig, OutOfGrid, StallError

STALL_SPEED_M_S = 0.1  # below this a field walk cannot advance

MILE_M = 1609.34


@dataclass(frozen=True)
class GridSpec:
    """Rectangular (space, time) aggregation grid.

    Defaults: 0.1-mile space cells, 5-minute time cells.
    """
    space_origin_m: float = 0.0
    space_cell_m: float = MILE_M / 10.0
    space_cells: int = 64
    time_origin_s: float = 0.0
    time_cell_s: float = 300.0
    time_cells: int = 48

    def __post_init__(self):
        if self.space_cell_m <= 0 or self.time_cell_s <= 0:
            raise InvalidConfig("grid cell sizes must be positive")
        if self.space_cells < 1 or self.time_cells < 1:
            raise InvalidConfig("grid must have at least one cell per axis")

    @property
    def space_end_m(self) -> float:
        return self.space_origin_m + self.space_cells * self.space_cell_m

    @property
    def time_end_s(self) -> float:
        return self.time_origin_s + self.time_cells * self.time_cell_s

    def space_index(self, position_m: float) -> int:
        """Half-open binning: a sample on a cell edge joins the higher cell."""
        return math.floor((position_m - self.space_origin_m) / self.space_cell_m)

    def time_index(self, time_s: float) -> int:
        return math.floor((time_s - self.time_origin_s) / self.time_cell_s)

    def contains(self, time_s: float, position_m: float) -> bool:
        return (0 <= self.space_index(position_m) < self.space_cells
                and 0 <= self.time_index(time_s) < self.time_cells)


class ProbeTrajectory:
    """One probe vehicle's (time, position, speed) samples."""

    def __init__(self, time_s, position_m, speed_m_s, vehicle_id: int = 0):
        self.time_s = np.asarray(time_s, dtype=float)
        self.position_m = np.asarray(position_m, dtype=float)
        self.speed_m_s = np.asarray(speed_m_s, dtype=float)
        self.vehicle_id = int(vehicle_id)
        if not (len(self.time_s) == len(self.position_m) == len(self.speed_m_s)):
            raise InvalidConfig("trajectory arrays must have equal length")
        if len(self.time_s) == 0:
            raise EmptyInput("trajectory has no samples")
        if np.any(np.diff(self.time_s) <= 0):
            raise InvalidConfig("trajectory time must be strictly increasing")
        if np.any(np.diff(self.position_m) < 0):
            raise InvalidConfig("trajectory position must be nondecreasing")

    def __len__(self):
        return len(self.time_s)


class FlowSpeedProfile:
    """Traffic flow speed along one trip: (time, position, speed) samples."""

    def __init__(self, time_s, position_m, speed_m_s):
        self.time_s = np.asarray(time_s, dtype=float)
        self.position_m = np.asarray(position_m, dtype=float)
        self.speed_m_s = np.asarray(speed_m_s, dtype=float)
        if len(self.time_s) == 0:
            raise EmptyInput("profile has no samples")
        if np.any(np.diff(self.time_s) <= 0):
            raise InvalidConfig("profile time must be strictly increasing")
        if np.any(self.speed_m_s <= 0):
            raise InvalidConfig("profile speeds must be positive")

    def __len__(self):
        return len(self.time_s)


@dataclass(frozen=True)
class SpeedField:
    """Gridded mean speeds with per-cell sample counts."""
    grid: GridSpec
    mean_speed_m_s: np.ndarray  # (space_cells, time_cells)
    sample_count: np.ndarray
    speed_limit_m_s: float

    def speed_at(self, space_idx: int, time_idx: int) -> float:
        return float(self.mean_speed_m_s[space_idx, time_idx])


def build_speed_field(trajectories: list[ProbeTrajectory], grid: GridSpec,
                      speed_limit_m_s: float) -> SpeedField:
    """Aggregate probe samples into per-cell arithmetic mean speeds.

    Cells without any sample are set to the road speed limit so the matrix
    stays consistent and empty cells do not read as congestion. Samples
    outside the grid are ignored.
    """
    if not trajectories:
        raise EmptyInput("no trajectories to aggregate")
    if speed_limit_m_s <= 0:
        raise InvalidConfig("speed limit must be positive")
    sums = np.zeros((grid.space_cells, grid.time_cells))
    counts = np.zeros((grid.space_cells, grid.time_cells), dtype=np.int64)
    for traj in trajectories:
        si = np.floor((traj.position_m - grid.space_origin_m)
                      / grid.space_cell_m).astype(np.int64)
        ti = np.floor((traj.time_s - grid.time_origin_s)
                      / grid.time_cell_s).astype(np.int64)
        ok = ((si >= 0) & (si < grid.space_cells)
              & (ti >= 0) & (ti < grid.time_cells))
        np.add.at(sums, (si[ok], ti[ok]), traj.speed_m_s[ok])
        np.add.at(counts, (si[ok], ti[ok]), 1)
    mean = np.full_like(sums, float(speed_limit_m_s))
    filled = counts > 0
    mean[filled] = sums[filled] / counts[filled]
    return SpeedField(grid, mean, counts, float(speed_limit_m_s))


def extract_flow_speed(field: SpeedField, t0_s: float, s0_m: float,
                       end_time_s: float | None = None,
                       end_position_m: float | None = None) -> FlowSpeedProfile:
    """Walk the field from (t0, s0): each step crosses to the next cell edge
    at the local mean speed (zero-order hold in time), until the stop
    condition.

    Emits the start point and one sample per step; arrival samples carry the
    speed of the cell about to be traversed, and the final sample carries the
    last speed used.
    """
    if (end_time_s is None) == (end_position_m is None):
        raise InvalidConfig("exactly one of end_time_s / end_position_m required")
    grid = field.grid
    if not grid.contains(t0_s, s0_m):
        raise OutOfGrid(f"start point ({t0_s}, {s0_m}) outside the grid")
    if end_position_m is not None and end_position_m <= s0_m:
        raise InvalidConfig("end position must lie ahead of the start")
    if end_time_s is not None and end_time_s <= t0_s:
        raise InvalidConfig("end time must lie after the start")

    t, s = float(t0_s), float(s0_m)
    times, positions, speeds = [], [], []
    v = field.speed_at(grid.space_index(s), grid.time_index(t))
    times.append(t)
    positions.append(s)
    speeds.append(v)

    while True:
        si = grid.space_index(s)
        ti = grid.time_index(t)
        if not (0 <= si < grid.space_cells and 0 <= ti < grid.time_cells):
            raise OutOfGrid(f"walk left the grid at ({t:.1f} s, {s:.1f} m) "
                            "before the stop condition")
        v = field.speed_at(si, ti)
        if v <= STALL_SPEED_M_S:
            raise StallError(f"mean speed {v:.3f} m/s at cell ({si}, {ti}) "
                             "is below the advance floor")
        target = grid.space_origin_m + (si + 1) * grid.space_cell_m
        if end_position_m is not None and end_position_m < target:
            target = end_position_m
        dt = (target - s) / v
        if end_time_s is not None and t + dt >= end_time_s:
            remaining = end_time_s - t
            s += v * remaining
            t = end_time_s
            times.append(t)
            positions.append(s)
            speeds.append(v)
            break
        s = target
        t += dt
        if end_position_m is not None and s >= end_position_m:
            times.append(t)
            positions.append(s)
            speeds.append(v)
            break
        si = grid.space_index(s)
        ti = grid.time_index(t)
        if not (0 <= si < grid.space_cells and 0 <= ti < grid.time_cells):
            raise OutOfGrid(f"walk left the grid at ({t:.1f} s, {s:.1f} m) "
                            "before the stop condition")
        times.append(t)
        positions.append(s)
        speeds.append(field.speed_at(si, ti))

    return FlowSpeedProfile(times, positions, speeds)


def resample_profile(profile: FlowSpeedProfile, dt_s: float) -> FlowSpeedProfile:
    """Linear interpolation onto a uniform ``dt_s`` grid over the profile's
    time span; both endpoints are preserved exactly."""
    if dt_s <= 0:
        raise InvalidConfig("dt must be positive")
    if len(profile) < 2:
        raise EmptyInput("profile needs at least 2 samples to resample")
    t0 = profile.time_s[0]
    t1 = profile.time_s[-1]
    n_full = int(math.floor((t1 - t0) / dt_s + 1e-12))
    grid = [t0 + k * dt_s for k in range(n_full + 1)]
    if grid[-1] < t1 - 1e-12:
        grid.append(t1)
    else:
        grid[-1] = t1
    grid = np.asarray(grid)
    speeds = np.interp(grid, profile.time_s, profile.speed_m_s)
    positions = np.interp(grid, profile.time_s, profile.position_m)
    # exact endpoint preservation against interpolation round-off
    speeds[0], speeds[-1] = profile.speed_m_s[0], profile.speed_m_s[-1]
    positions[0], positions[-1] = profile.position_m[0], profile.position_m[-1]
    return FlowSpeedProfile(grid, positions, speeds)


# ---------------------------------------------------------------------------
# synthetic probe data
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TrafficConfig:
    """Synthetic corridor with a moving slow-speed band.

    The congestion wave is a Gaussian speed dip whose center drifts at
    ``wave_speed_m_s`` (negative = upstream-moving, the classic pattern).
    """
    corridor_length_m: float = 8000.0
    duration_s: float = 3600.0
    probe_count: int = 60
    free_flow_speed_m_s: float = 29.06  # 65 mph
    congestion_depth: float = 0.75      # fractional dip, in [0, 1)
    wave_origin_m: float = 6000.0
    wave_speed_m_s: float = -1.2
    wave_width_m: float = 900.0
    speed_jitter: float = 0.03
    sample_period_s: float = 1.0

    def __post_init__(self):
        if self.corridor_length_m <= 0 or self.duration_s <= 0:
            raise InvalidConfig("corridor length and duration must be positive")
        if self.probe_count < 0:
            raise InvalidConfig("probe count must be >= 0")
        if not 0.0 <= self.congestion_depth < 1.0:
            raise InvalidConfig("congestion depth must be in [0, 1)")
        if self.free_flow_speed_m_s <= 0:
            raise InvalidConfig("free-flow speed must be positive")


def wave_speed_at(cfg: TrafficConfig, position_m: float, time_s: float) -> float:
    center = cfg.wave_origin_m + cfg.wave_speed_m_s * time_s
    dip = cfg.congestion_depth * math.exp(-((position_m - center)
                                            / cfg.wave_width_m) ** 2)
    return cfg.free_flow_speed_m_s * (1.0 - dip)


def synth_trajectories(cfg: TrafficConfig, seed: int) -> list[ProbeTrajectory]:
    """Deterministic probe trajectories through the congestion wave."""
    rng = np.random.default_rng(seed)
    trajectories = []
    if cfg.probe_count == 0:
        return trajectories
    headway = cfg.duration_s / cfg.probe_count
    for k in range(cfg.probe_count):
        start_t = k * headway + float(rng.uniform(0.0, 0.3 * headway))
        gain = 1.0 + float(rng.normal(0.0, cfg.speed_jitter))
        gain = min(max(gain, 0.85), 1.15)
        t, x = start_t, 0.0
        times, xs, vs = [], [], []
        while t < cfg.duration_s and x < cfg.corridor_length_m:
            v = wave_speed_at(cfg, x, t) * gain
            v = min(max(v, 0.5), cfg.free_flow_speed_m_s)
            times.append(t)
            xs.append(x)
            vs.append(v)
            x += v * cfg.sample_period_s
            t += cfg.sample_period_s
        if times:
            trajectories.append(ProbeTrajectory(times, xs, vs, vehicle_id=k))
    return trajectories


# ---------------------------------------------------------------------------
# file formats
# ---------------------------------------------------------------------------


def save_trajectories_csv(trajectories: list[ProbeTrajectory], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["vehicle_id", "time_s", "position_m", "speed_m_s"])
        for traj in trajectories:
            for t, x, v in zip(traj.time_s, traj.position_m, traj.speed_m_s):
                w.writerow([traj.vehicle_id, repr(float(t)), repr(float(x)),
                            repr(float(v))])


def load_trajectories_csv(path) -> list[ProbeTrajectory]:
    by_vehicle: dict[int, list[tuple[float, float, float]]] = {}
    with open(path, "r", newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        for row in reader:
            by_vehicle.setdefault(int(row["vehicle_id"]), []).append(
                (float(row["time_s"]), float(row["position_m"]),
                 float(row["speed_m_s"])))
    trajectories = []
    for vid in sorted(by_vehicle):
        rows = sorted(by_vehicle[vid])
        trajectories.append(ProbeTrajectory([r[0] for r in rows],
                                            [r[1] for r in rows],
                                            [r[2] for r in rows], vid))
    if not trajectories:
        raise EmptyInput(f"no trajectory rows in {path}")
    return trajectories


def save_speed_field(field: SpeedField, base_path: str) -> tuple[str, str]:
    """Write ``<base>.csv`` (matrix, one row per space cell) and
    ``<base>.json`` (grid spec + speed limit)."""
    csv_path = base_path + ".csv"
    json_path = base_path + ".json"
    with open(csv_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        for row in field.mean_speed_m_s:
            w.writerow([repr(float(v)) for v in row])
    header = {
        "space_origin_m": field.grid.space_origin_m,
        "space_cell_m": field.grid.space_cell_m,
        "space_cells": field.grid.space_cells,
        "time_origin_s": field.grid.time_origin_s,
        "time_cell_s": field.grid.time_cell_s,
        "time_cells": field.grid.time_cells,
        "speed_limit_m_s": field.speed_limit_m_s,
    }
    with open(json_path, "w", encoding="utf-8") as fh:
        json.dump(header, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return csv_path, json_path


def load_speed_field(base_path: str) -> SpeedField:
    with open(base_path + ".json", "r", encoding="utf-8") as fh:
        header = json.load(fh)
    limit = header.pop("speed_limit_m_s")
    grid = GridSpec(**header)
    mean = np.loadtxt(base_path + ".csv", delimiter=",", ndmin=2)
    counts = np.zeros_like(mean, dtype=np.int64)  # counts not round-tripped
    return SpeedField(grid, mean, counts, limit)


def save_profile_csv(profile: FlowSpeedProfile, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["time_s", "position_m", "speed_m_s"])
        for t, x, v in zip(profile.time_s, profile.position_m,
                           profile.speed_m_s):
            w.writerow([repr(float(t)), repr(float(x)), repr(float(v))])


def load_profile_csv(path) -> FlowSpeedProfile:
    times, xs, vs = [], [], []
    with open(path, "r", newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            times.append(float(row["time_s"]))
            xs.append(float(row["position_m"]))
            vs.append(float(row["speed_m_s"]))
    return FlowSpeedProfile(times, xs, vs)
