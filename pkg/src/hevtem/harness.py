"""Scenario configuration, end-to-end experiment runner, metrics, reports.

A scenario binds a driving cycle source (named synthetic cycle, speed CSV,
or a traffic-extracted flow profile), ambient conditions, a strategy, and a
seed. Runs are fully deterministic per (config, seed): traces and metrics
re-run byte-identically. Measured controller wall times are real but
nondeterministic, so they are written to a separate timing file that is not
part of the determinism contract.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import os
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import config as cfgmod
from . import control, cycles, dcr, plant, predictor, traffic
from .errors import ConfigError, HevtemError, MismatchedCycles, SimulationError

STRATEGIES = ("rule", "mpc_sp", "ta_item")


@dataclass(frozen=True)
class ScenarioConfig:
    name: str = "scenario"
    cycle: str = "urban_stop_go"      # named cycle | csv:<path> | traffic
    duration_s: int = 600
    ambient_c: float = 20.0
    solar_w_m2: float = 0.0
    seed: int = 2024
    initial_soc: float = 0.45
    comfort_target_c: float = 23.0
    model_config: str = ""            # optional plant config path
    planner: control.PlannerConfig = field(default_factory=control.PlannerConfig)
    mpc: control.MpcConfig = field(default_factory=control.MpcConfig)
    rule: control.RuleBasedConfig = field(default_factory=control.RuleBasedConfig)
    traffic_cfg: traffic.TrafficConfig = field(default_factory=traffic.TrafficConfig)
    predictor_cfg: predictor.PredictorConfig = field(
        default_factory=lambda: predictor.PredictorConfig(
            history_len=60, horizon=5, max_positions=64, heads=4, key_dim=8,
            hidden_dim=64, batch_size=128, epochs=10, learning_rate=2e-3))
    predictor_weights: str = ""       # optional pre-trained weights path

    def __post_init__(self):
        if self.duration_s < 0:
            raise ConfigError("scenario duration must be >= 0 s")
        if not -39.0 <= self.ambient_c <= 60.0:
            raise ConfigError("ambient outside plant bounds")
        if not 0.0 < self.initial_soc < 1.0:
            raise ConfigError("initial soc must be in (0, 1)")


def load_scenario(path: str) -> ScenarioConfig:
    """Read a scenario from a structured-text config file."""
    doc = cfgmod.load_config(path)
    cfgmod.check_format_version(doc, path)
    sc = doc.get("scenario", {})
    kwargs: dict = {}
    for key in ("name", "cycle", "model_config", "predictor_weights"):
        if key in sc:
            kwargs[key] = str(sc[key])
    for key in ("duration_s", "seed"):
        if key in sc:
            kwargs[key] = int(sc[key])
    for key in ("ambient_c", "solar_w_m2", "initial_soc", "comfort_target_c"):
        if key in sc:
            kwargs[key] = float(sc[key])
    if "planner" in doc:
        fields = {f.name for f in dataclasses.fields(control.PlannerConfig)}
        over = {k: (int(v) if k == "macro_step_s" else
                    (bool(v) if k == "charge_sustaining" else float(v)))
                for k, v in doc["planner"].items() if k in fields}
        kwargs["planner"] = replace(control.PlannerConfig(), **over)
    if "mpc" in doc:
        fields = {f.name for f in dataclasses.fields(control.MpcConfig)}
        over = {k: (int(v) if k in ("horizon", "explore_period") else float(v))
                for k, v in doc["mpc"].items() if k in fields}
        kwargs["mpc"] = replace(control.MpcConfig(), **over)
    if "rule" in doc:
        fields = {f.name for f in dataclasses.fields(control.RuleBasedConfig)}
        over = {k: float(v) for k, v in doc["rule"].items() if k in fields}
        kwargs["rule"] = replace(control.RuleBasedConfig(), **over)
    if "traffic" in doc:
        fields = {f.name for f in dataclasses.fields(traffic.TrafficConfig)}
        over = {k: (int(v) if k == "probe_count" else float(v))
                for k, v in doc["traffic"].items() if k in fields}
        kwargs["traffic_cfg"] = replace(traffic.TrafficConfig(), **over)
    if "predictor" in doc:
        fields = {f.name for f in dataclasses.fields(predictor.PredictorConfig)}
        over = {k: (float(v) if k in ("learning_rate", "val_fraction")
                    else int(v))
                for k, v in doc["predictor"].items() if k in fields}
        kwargs["predictor_cfg"] = replace(
            ScenarioConfig().predictor_cfg, **over)
    try:
        return ScenarioConfig(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def builtin_scenario_names() -> list[str]:
    return [f"{cyc}_{amb}" for cyc in ("urban", "highway", "mixed")
            for amb in ("20c", "35c")]


def builtin_scenario(name: str) -> ScenarioConfig:
    """The six shipped scenarios: three cycles x two ambients."""
    cycle_by_prefix = {"urban": "urban_stop_go", "highway": "highway_cruise",
                       "mixed": "mixed"}
    try:
        prefix, amb = name.rsplit("_", 1)
        cycle = cycle_by_prefix[prefix]
        ambient = {"20c": 20.0, "35c": 35.0}[amb]
    except (ValueError, KeyError) as exc:
        raise ConfigError(f"unknown scenario {name!r}; expected one of "
                          f"{builtin_scenario_names()}") from exc
    return ScenarioConfig(name=name, cycle=cycle, duration_s=600,
                          ambient_c=ambient,
                          solar_w_m2=500.0 if ambient > 25.0 else 0.0)


# ---------------------------------------------------------------------------
# shared artifacts (models, recognizer, forecaster, plans)
# ---------------------------------------------------------------------------


@dataclass
class SharedArtifacts:
    """Seed-derived artifacts reused across strategies and scenarios.

    Everything here is a pure function of (seed, configs), so sharing them
    does not break per-run determinism.
    """
    models: plant.PlantModels
    recognizer: dcr.DcrModel | None
    forecaster: predictor.PredictorWeights | None
    plans: dict = field(default_factory=dict)


def prepare_artifacts(scenario: ScenarioConfig,
                      need_forecaster: bool = True) -> SharedArtifacts:
    if scenario.model_config:
        models = plant.models_from_config(cfgmod.load_config(scenario.model_config))
    else:
        models = plant.default_models()
    if not need_forecaster:
        return SharedArtifacts(models, None, None)

    recognizer = dcr.fit_dcr(
        [c for _, c in cycles.style_corpus(6, 600, seed=scenario.seed + 11)],
        seed=scenario.seed)

    if scenario.predictor_weights:
        with open(scenario.predictor_weights, "r", encoding="utf-8") as fh:
            weights = predictor.weights_from_json(fh.read())
    else:
        weights = train_forecaster(scenario, recognizer).weights
    return SharedArtifacts(models, recognizer, weights)


def train_forecaster(scenario: ScenarioConfig,
                     recognizer: dcr.DcrModel) -> predictor.TrainResult:
    cfg = scenario.predictor_cfg
    train_cycles = [cycles.generate_mixed_cycle(600, seed=scenario.seed + 100 + k)
                    for k in range(6)]
    norm = predictor.fit_normalization(train_cycles)
    windows, targets = predictor.windows_from_speed_cycles(
        train_cycles, recognizer.classify_window, cfg, norm, stride=3)
    return predictor.train(windows, np.array(targets), cfg, norm,
                           seed=scenario.seed + 7)


def scenario_speeds(scenario: ScenarioConfig) -> np.ndarray:
    """Resolve the cycle source to a 1 Hz speed trace."""
    if scenario.duration_s == 0:
        return np.zeros(0)
    src = scenario.cycle
    if src.startswith("csv:"):
        prof = traffic.load_profile_csv(src[4:])
        res = traffic.resample_profile(prof, 1.0)
        return np.asarray(res.speed_m_s[:scenario.duration_s])
    if src == "traffic":
        tc = scenario.traffic_cfg
        trajs = traffic.synth_trajectories(tc, scenario.seed)
        grid = traffic.GridSpec(0.0, tc.corridor_length_m / 40.0, 40,
                                0.0, 300.0,
                                max(1, int(tc.duration_s // 300)))
        fld = traffic.build_speed_field(trajs, grid, tc.free_flow_speed_m_s)
        prof = traffic.extract_flow_speed(
            fld, 0.0, 0.0, end_position_m=tc.corridor_length_m * 0.98)
        res = traffic.resample_profile(prof, 1.0)
        return np.asarray(res.speed_m_s[:scenario.duration_s])
    return cycles.named_cycle(src, scenario.duration_s, scenario.seed)


def smooth_flow_profile(speeds: np.ndarray, window_s: int = 45) -> np.ndarray:
    """Moving-average stand-in for traffic flow speed when the scenario is a
    raw cycle: the planner sees the trend, not the second-scale detail."""
    kernel = np.ones(window_s) / window_s
    pad = np.concatenate([np.full(window_s // 2, speeds[0]), speeds,
                          np.full(window_s - window_s // 2 - 1, speeds[-1])])
    return np.convolve(pad, kernel, mode="valid")


# ---------------------------------------------------------------------------
# trip metrics and files
# ---------------------------------------------------------------------------


@dataclass
class TripMetrics:
    fuel_kg: float
    soc_start: float
    soc_end: float
    soc_rmse: float
    cabin_rmse_c: float
    time_to_target_s: float
    max_tb_c: float
    mean_wall_ms: float
    max_wall_ms: float
    violation_count: int


METRIC_KEYS = ("fuel_kg", "soc_start", "soc_end", "soc_rmse", "cabin_rmse_c",
               "time_to_target_s", "max_tb_c", "violation_count")
TIMING_KEYS = ("mean_wall_ms", "max_wall_ms")

TRACE_COLUMNS = (("time_s", "speed_m_s", "accel_m_s2", "soc",
                  "temp_battery_c", "temp_cabin_c", "temp_roof_c",
                  "temp_window_c", "temp_engine_c", "temp_compartment_c",
                  "engine_speed_rad_s", "engine_torque_nm", "fan_duty",
                  "hvac_heat_w", "fuel_rate_kg_s")
                 + plant.DIAG_FIELDS)

CONTROLLER_COLUMNS = ("time_s", "ref_soc", "ref_tc", "forecast_1_m_s",
                      "forecast_2_m_s", "forecast_3_m_s", "forecast_4_m_s",
                      "forecast_5_m_s", "engine_speed_rad_s",
                      "engine_torque_nm", "fan_duty", "hvac_heat_w",
                      "solver_status", "solver_iterations", "fallback",
                      "wall_ms")


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "1" if value else "0"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return repr(float(value))


class _TraceWriter:
    def __init__(self):
        self.buf = io.StringIO()
        self.writer = csv.writer(self.buf)

    def header(self, columns):
        self.writer.writerow(columns)

    def row(self, values):
        self.writer.writerow([_fmt(v) for v in values])

    def save(self, path):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            fh.write(self.buf.getvalue())


# ---------------------------------------------------------------------------
# the runner
# ---------------------------------------------------------------------------


def run_scenario(scenario: ScenarioConfig, strategy: str,
                 out_dir: str | os.PathLike,
                 shared: SharedArtifacts | None = None) -> TripMetrics:
    """Simulate one scenario under one strategy at 1 Hz.

    Writes ``<name>_<strategy>_trace.csv``, ``..._controller.csv``,
    ``..._metrics.csv`` (deterministic) and ``..._timing.csv`` (measured wall
    times) into ``out_dir`` and returns the metrics.
    """
    if strategy not in STRATEGIES:
        raise ConfigError(f"unknown strategy {strategy!r}; expected one of "
                          f"{STRATEGIES}")
    os.makedirs(out_dir, exist_ok=True)
    if shared is None:
        shared = prepare_artifacts(scenario, need_forecaster=strategy != "rule")
    models = shared.models
    env = plant.EnvConditions(ambient_c=scenario.ambient_c,
                              solar_w_m2=scenario.solar_w_m2)
    speeds = scenario_speeds(scenario)
    n = len(speeds)
    if n == 0:
        metrics = TripMetrics(0.0, scenario.initial_soc, scenario.initial_soc,
                              0.0, 0.0, 0.0, scenario.ambient_c, 0.0, 0.0, 0)
        _write_outputs(scenario, strategy, out_dir, metrics, None, None)
        return metrics
    samples = cycles.cycle_samples(speeds)
    x = plant.isothermal_state(scenario.initial_soc, scenario.ambient_c)

    mpc_cfg = replace(scenario.mpc, comfort_target_c=scenario.comfort_target_c)
    rule_cfg = replace(scenario.rule,
                       comfort_target_c=scenario.comfort_target_c)
    planner_cfg = replace(scenario.planner,
                          comfort_target_c=scenario.comfort_target_c)

    refs: control.ReferenceTrajectory | None = None
    tracker: control.MpcTracker | None = None
    if strategy == "ta_item":
        key = (scenario.name, scenario.seed)
        if key not in shared.plans:
            flow = smooth_flow_profile(speeds)
            shared.plans[key] = control.plan_global(flow, env, models,
                                                    planner_cfg, x)
        refs = shared.plans[key].references
        tracker = control.MpcTracker(refs, env, models, mpc_cfg)
    elif strategy == "mpc_sp":
        refs = control.constant_references(n + mpc_cfg.horizon + 1,
                                           scenario.initial_soc,
                                           scenario.comfort_target_c)
        tracker = control.MpcTracker(refs, env, models, mpc_cfg)

    if strategy != "rule":
        if shared.forecaster is None or shared.recognizer is None:
            raise ConfigError(f"strategy {strategy!r} needs forecaster "
                              "artifacts; prepare_artifacts(need_forecaster=True)")
        norm = shared.forecaster.norm
        hist_len = shared.forecaster.config.history_len
    else:
        norm = None
        hist_len = 60
    engine_on = False
    fuel_total = 0.0
    walls: list[float] = []
    viol_count = 0
    soc_sq = 0.0
    tc_sq = 0.0
    time_to_target = float(n)
    reached = False
    max_tb = x.temp_battery_c

    trace = _TraceWriter()
    trace.header(TRACE_COLUMNS)
    ctrl_log = _TraceWriter()
    ctrl_log.header(CONTROLLER_COLUMNS)

    past = np.zeros(hist_len)

    for t in range(n):
        sample = samples[t]
        past = np.roll(past, -1)
        past[-1] = sample.speed_m_s

        try:
            if strategy == "rule":
                force = plant.road_load_force(sample, env, models.vehicle)
                demand = plant.wheel_to_powersplit(force, sample.speed_m_s,
                                                   models.vehicle)
                t_wall = time.perf_counter()
                u, engine_on = control.rule_based_step(x, demand, env, models,
                                                       rule_cfg, engine_on)
                wall_ms = (time.perf_counter() - t_wall) * 1e3
                diag = {"status": "rule", "iterations": 0, "fallback": False,
                        "wall_ms": wall_ms,
                        "ref_soc": scenario.initial_soc,
                        "ref_tc": scenario.comfort_target_c}
                forecast_speeds = np.full(mpc_cfg.horizon, sample.speed_m_s)
            else:
                accel_hist = np.diff(past, prepend=past[0])
                label = shared.recognizer.classify_window(past[-60:]) \
                    if hist_len >= 60 else dcr.StyleLabel.URBAN
                window = predictor.build_input(past, accel_hist, label, norm,
                                               hist_len)
                forecast = predictor.forward(window, shared.forecaster)
                forecast_speeds = forecast.speeds_m_s
                u, diag = tracker.step(t, x, forecast_speeds,
                                       sample.speed_m_s)
            x_next, fuel_step, step_diag, viol = plant.plant_step_soft(
                x, u, sample, env, models, 1.0, want_diag=True)
        except HevtemError as exc:
            raise SimulationError(f"{scenario.name}/{strategy} failed at "
                                  f"step {t}: {exc}", step=t, cause=exc) from exc

        fuel_total += fuel_step
        walls.append(diag["wall_ms"])
        if max(viol.values()) > 1e-6:
            viol_count += 1
        ref_soc = diag.get("ref_soc", scenario.initial_soc)
        soc_sq += (x_next.soc - ref_soc) ** 2
        tc_err = x_next.temp_cabin_c - scenario.comfort_target_c
        tc_sq += tc_err ** 2
        if not reached and abs(tc_err) <= 1.0:
            reached = True
            time_to_target = float(t + 1)
        if t == 0:
            max_tb = x_next.temp_battery_c
        max_tb = max(max_tb, x_next.temp_battery_c)

        # rows carry the post-step state so trip metrics are recomputable
        # from the trace alone
        trace.row((float(t), sample.speed_m_s, sample.accel_m_s2)
                  + x_next.as_tuple()
                  + (u.engine_speed_rad_s, u.engine_torque_nm, u.fan_duty,
                     u.hvac_heat_w, step_diag.fuel_rate_kg_s)
                  + tuple(getattr(step_diag, name) for name in plant.DIAG_FIELDS))
        ctrl_log.row((float(t), ref_soc, diag.get("ref_tc"),
                      *[float(v) for v in forecast_speeds[:5]],
                      u.engine_speed_rad_s, u.engine_torque_nm, u.fan_duty,
                      u.hvac_heat_w, diag.get("status"),
                      diag.get("iterations", 0),
                      diag.get("fallback", False), diag["wall_ms"]))
        x = x_next

    metrics = TripMetrics(
        fuel_kg=fuel_total,
        soc_start=scenario.initial_soc,
        soc_end=x.soc,
        soc_rmse=float(np.sqrt(soc_sq / n)),
        cabin_rmse_c=float(np.sqrt(tc_sq / n)),
        time_to_target_s=time_to_target,
        max_tb_c=max_tb,
        mean_wall_ms=float(np.mean(walls)),
        max_wall_ms=float(np.max(walls)),
        violation_count=viol_count,
    )
    _write_outputs(scenario, strategy, out_dir, metrics, trace, ctrl_log)
    return metrics


def _write_outputs(scenario, strategy, out_dir, metrics, trace, ctrl_log):
    base = os.path.join(str(out_dir), f"{scenario.name}_{strategy}")
    if trace is not None:
        trace.save(base + "_trace.csv")
        ctrl_log.save(base + "_controller.csv")
    else:
        for suffix in ("_trace.csv", "_controller.csv"):
            with open(base + suffix, "w", newline="", encoding="utf-8") as fh:
                w = csv.writer(fh)
                w.writerow(TRACE_COLUMNS if suffix == "_trace.csv"
                           else CONTROLLER_COLUMNS)
    with open(base + "_metrics.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["metric", "value"])
        for key in METRIC_KEYS:
            w.writerow([key, _fmt(getattr(metrics, key))])
    with open(base + "_timing.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["metric", "value"])
        for key in TIMING_KEYS:
            w.writerow([key, _fmt(getattr(metrics, key))])


# ---------------------------------------------------------------------------
# strategy comparison
# ---------------------------------------------------------------------------


@dataclass
class ComparisonReport:
    rows: list[dict]                     # scenario, strategy, metrics...
    fuel_deltas: list[dict]              # scenario, a, b, delta_pct

    def summary(self) -> str:
        out = ["scenario        strategy   fuel_kg   soc_end  cabin_rmse_c"]
        for row in self.rows:
            out.append("%-15s %-9s %9.5f  %7.4f  %9.3f"
                       % (row["scenario"], row["strategy"],
                          row["fuel_kg"], row["soc_end"],
                          row["cabin_rmse_c"]))
        out.append("")
        for d in self.fuel_deltas:
            out.append("%-15s %s vs %s: %+.2f%% fuel"
                       % (d["scenario"], d["a"], d["b"], d["delta_pct"]))
        return "\n".join(out)


def compare_strategies(scenarios: list[ScenarioConfig], strategies: list[str],
                       out_dir: str | os.PathLike,
                       shared: SharedArtifacts | None = None,
                       ) -> ComparisonReport:
    """Run >= 2 strategies on identical cycles per scenario and tabulate."""
    if len(strategies) < 2:
        raise MismatchedCycles("need at least two strategies to compare")
    os.makedirs(out_dir, exist_ok=True)
    if shared is None:
        shared = prepare_artifacts(scenarios[0])
    rows = []
    for scenario in scenarios:
        cycle_check = None
        for strategy in strategies:
            speeds = scenario_speeds(scenario)
            if cycle_check is None:
                cycle_check = speeds
            elif not np.array_equal(cycle_check, speeds):
                raise MismatchedCycles(
                    f"{scenario.name}: cycle changed between strategies")
            metrics = run_scenario(scenario, strategy, out_dir, shared)
            row = {"scenario": scenario.name, "strategy": strategy}
            row.update({k: getattr(metrics, k) for k in METRIC_KEYS})
            row.update({k: getattr(metrics, k) for k in TIMING_KEYS})
            rows.append(row)

    deltas = []
    for scenario in scenarios:
        sub = [r for r in rows if r["scenario"] == scenario.name]
        for i in range(len(sub)):
            for j in range(i + 1, len(sub)):
                fa, fb = sub[i]["fuel_kg"], sub[j]["fuel_kg"]
                delta = 100.0 * (fa - fb) / fb if fb else 0.0
                deltas.append({"scenario": scenario.name,
                               "a": sub[i]["strategy"],
                               "b": sub[j]["strategy"],
                               "delta_pct": delta})

    report = ComparisonReport(rows, deltas)
    with open(os.path.join(str(out_dir), "comparison.csv"), "w", newline="",
              encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["scenario", "strategy"] + list(METRIC_KEYS))
        for row in rows:
            w.writerow([row["scenario"], row["strategy"]]
                       + [_fmt(row[k]) for k in METRIC_KEYS])
    with open(os.path.join(str(out_dir), "comparison_summary.txt"), "w",
              encoding="utf-8") as fh:
        fh.write(report.summary() + "\n")
    return report


# ---------------------------------------------------------------------------
# plot data
# ---------------------------------------------------------------------------

PLOT_STATE_VARS = ("soc", "temp_battery_c", "temp_cabin_c", "temp_engine_c")


def emit_plotdata(trace_paths: dict[str, str], out_dir: str | os.PathLike,
                  ) -> list[str]:
    """Tidy long-format CSVs from trace files (state series per strategy,
    fuel bars, wall-time box data); values are copied, never resampled."""
    os.makedirs(out_dir, exist_ok=True)
    states_path = os.path.join(str(out_dir), "plot_states.csv")
    fuel_path = os.path.join(str(out_dir), "plot_fuel.csv")
    wall_path = os.path.join(str(out_dir), "plot_walltime.csv")

    with open(states_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["strategy", "time_s", "variable", "value"])
        for strategy, path in trace_paths.items():
            with open(path, newline="", encoding="utf-8") as trace_fh:
                for row in csv.DictReader(trace_fh):
                    for var in PLOT_STATE_VARS:
                        w.writerow([strategy, row["time_s"], var, row[var]])

    with open(fuel_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["strategy", "fuel_kg"])
        for strategy, path in trace_paths.items():
            total = 0.0
            with open(path, newline="", encoding="utf-8") as trace_fh:
                for row in csv.DictReader(trace_fh):
                    total += float(row["fuel_rate_kg_s"])
            w.writerow([strategy, repr(total)])

    with open(wall_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["strategy", "wall_ms"])
        for strategy, path in trace_paths.items():
            ctrl = path.replace("_trace.csv", "_controller.csv")
            if os.path.exists(ctrl):
                with open(ctrl, newline="", encoding="utf-8") as ctrl_fh:
                    for row in csv.DictReader(ctrl_fh):
                        w.writerow([strategy, row["wall_ms"]])
    return [states_path, fuel_path, wall_path]
