"""Command-line interface.

Verbs: simulate, plan, train-predictor, fit-dcr, build-field, extract-flow,
compare, report. Exit codes: 0 success, 1 config error, 2 simulation error,
3 acceptance-check failure (compare --check-ordering).
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from . import control, cycles, dcr, harness, plant, predictor, traffic
from . import config as cfgmod
from .errors import ConfigError, HevtemError, InvalidConfig, SimulationError

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_SIMULATION = 2
EXIT_CHECK = 3


def _scenario_from_arg(arg: str) -> harness.ScenarioConfig:
    if os.path.exists(arg):
        return harness.load_scenario(arg)
    return harness.builtin_scenario(arg)


def cmd_simulate(args) -> int:
    scenario = _scenario_from_arg(args.scenario)
    metrics = harness.run_scenario(scenario, args.strategy, args.out)
    print(f"{scenario.name}/{args.strategy}: fuel {metrics.fuel_kg:.5f} kg, "
          f"soc {metrics.soc_start:.3f} -> {metrics.soc_end:.3f}, "
          f"cabin rmse {metrics.cabin_rmse_c:.2f} C, "
          f"mean step {metrics.mean_wall_ms:.1f} ms")
    return EXIT_OK


def cmd_plan(args) -> int:
    scenario = _scenario_from_arg(args.scenario)
    models = (plant.models_from_config(cfgmod.load_config(scenario.model_config))
              if scenario.model_config else plant.default_models())
    env = plant.EnvConditions(ambient_c=scenario.ambient_c,
                              solar_w_m2=scenario.solar_w_m2)
    speeds = harness.scenario_speeds(scenario)
    flow = harness.smooth_flow_profile(speeds)
    x0 = plant.isothermal_state(scenario.initial_soc, scenario.ambient_c)
    result = control.plan_global(flow, env, models, scenario.planner, x0)
    os.makedirs(args.out, exist_ok=True)
    path = os.path.join(args.out, f"{scenario.name}_references.csv")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("time_s,soc_ref,temp_cabin_ref_c\n")
        refs = result.references
        for t, s, c in zip(refs.time_s, refs.soc, refs.temp_cabin_c):
            fh.write(f"{t!r},{s!r},{c!r}\n")
    print(f"plan {scenario.name}: objective {result.objective:.5f}, "
          f"fuel {result.fuel_kg:.5f} kg, "
          f"charge-sustaining violation {result.cs_violation:.5f}, "
          f"status {result.status} -> {path}")
    return EXIT_OK


def cmd_train_predictor(args) -> int:
    scenario = _scenario_from_arg(args.scenario)
    recognizer = dcr.fit_dcr(
        [c for _, c in cycles.style_corpus(6, 600, seed=scenario.seed + 11)],
        seed=scenario.seed)
    result = harness.train_forecaster(scenario, recognizer)
    os.makedirs(os.path.dirname(os.path.abspath(args.out)) or ".", exist_ok=True)
    with open(args.out, "w", encoding="utf-8") as fh:
        fh.write(predictor.weights_to_json(result.weights))
    curve_path = args.out + ".losses.csv"
    with open(curve_path, "w", encoding="utf-8") as fh:
        fh.write("epoch,train_mse,val_mse\n")
        for e, (tr, va) in enumerate(zip(result.train_loss, result.val_loss)):
            fh.write(f"{e},{tr!r},{va!r}\n")
    print(f"trained forecaster -> {args.out} (final train MSE "
          f"{result.train_loss[-1]:.5f}, loss curve {curve_path})")
    return EXIT_OK


def cmd_fit_dcr(args) -> int:
    model = dcr.fit_dcr(
        [c for _, c in cycles.style_corpus(args.cycles_per_style, 600,
                                           seed=args.seed)],
        seed=args.seed)
    with open(args.out, "w", encoding="utf-8") as fh:
        fh.write(dcr.dcr_to_json(model))
    ratios = model.pca.explained_ratio
    print(f"fitted recognizer -> {args.out} (top-{len(ratios)} variance "
          f"{ratios.sum():.3f})")
    return EXIT_OK


def cmd_build_field(args) -> int:
    trajs = traffic.load_trajectories_csv(args.trajectories)
    t_max = max(float(tr.time_s[-1]) for tr in trajs)
    s_max = max(float(tr.position_m[-1]) for tr in trajs)
    grid = traffic.GridSpec(0.0, args.space_cell_m,
                            max(1, int(np.ceil(s_max / args.space_cell_m))),
                            0.0, args.time_cell_s,
                            max(1, int(np.ceil(t_max / args.time_cell_s))))
    field = traffic.build_speed_field(trajs, grid, args.speed_limit)
    csv_path, json_path = traffic.save_speed_field(field, args.out)
    filled = int((field.sample_count > 0).sum())
    print(f"built field {grid.space_cells}x{grid.time_cells} "
          f"({filled} filled cells) -> {csv_path}, {json_path}")
    return EXIT_OK


def cmd_extract_flow(args) -> int:
    field = traffic.load_speed_field(args.field)
    kwargs = {}
    if args.end_time is not None:
        kwargs["end_time_s"] = args.end_time
    if args.end_position is not None:
        kwargs["end_position_m"] = args.end_position
    profile = traffic.extract_flow_speed(field, args.t0, args.s0, **kwargs)
    resampled = traffic.resample_profile(profile, args.dt)
    traffic.save_profile_csv(resampled, args.out)
    print(f"extracted flow profile: {len(resampled)} samples over "
          f"{resampled.time_s[-1] - resampled.time_s[0]:.0f} s -> {args.out}")
    return EXIT_OK


def cmd_compare(args) -> int:
    scenarios = [_scenario_from_arg(s) for s in args.scenarios.split(",")]
    strategies = args.strategies.split(",")
    report = harness.compare_strategies(scenarios, strategies, args.out)
    print(report.summary())
    if args.check_ordering:
        ordered = {"ta_item", "mpc_sp", "rule"}
        if not ordered.issubset(set(strategies)):
            print("ordering check needs all three strategies", file=sys.stderr)
            return EXIT_CHECK
        for scenario in scenarios:
            sub = {r["strategy"]: r["fuel_kg"] for r in report.rows
                   if r["scenario"] == scenario.name}
            if not sub["ta_item"] <= sub["mpc_sp"] <= sub["rule"]:
                print(f"ordering violated on {scenario.name}: "
                      f"{sub}", file=sys.stderr)
                return EXIT_CHECK
        print("strategy fuel ordering holds on all scenarios")
    return EXIT_OK


def cmd_report(args) -> int:
    traces = {}
    for entry in args.traces.split(","):
        strategy, path = entry.split("=", 1)
        traces[strategy] = path
    paths = harness.emit_plotdata(traces, args.out)
    print("plot data written:", ", ".join(paths))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="hevtem",
        description="Hierarchical thermal and energy management toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="run one scenario under one strategy")
    p.add_argument("--scenario", required=True,
                   help="builtin scenario name or config file path")
    p.add_argument("--strategy", default="ta_item",
                   choices=harness.STRATEGIES)
    p.add_argument("--out", default="out")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("plan", help="run the global reference planner only")
    p.add_argument("--scenario", required=True)
    p.add_argument("--out", default="out")
    p.set_defaults(func=cmd_plan)

    p = sub.add_parser("train-predictor", help="train the speed forecaster")
    p.add_argument("--scenario", default="mixed_20c",
                   help="scenario supplying seed and predictor settings")
    p.add_argument("--out", default="out/predictor_weights.json")
    p.set_defaults(func=cmd_train_predictor)

    p = sub.add_parser("fit-dcr", help="fit the driving-condition recognizer")
    p.add_argument("--cycles-per-style", type=int, default=6)
    p.add_argument("--seed", type=int, default=2024)
    p.add_argument("--out", default="out/dcr_model.json")
    p.set_defaults(func=cmd_fit_dcr)

    p = sub.add_parser("build-field", help="aggregate probe trajectories "
                                           "into a speed field")
    p.add_argument("--trajectories", required=True,
                   help="CSV: vehicle_id,time_s,position_m,speed_m_s")
    p.add_argument("--space-cell-m", type=float, default=traffic.MILE_M / 10)
    p.add_argument("--time-cell-s", type=float, default=300.0)
    p.add_argument("--speed-limit", type=float, default=29.06)
    p.add_argument("--out", default="out/speed_field")
    p.set_defaults(func=cmd_build_field)

    p = sub.add_parser("extract-flow", help="extract a flow speed profile "
                                            "from a field")
    p.add_argument("--field", required=True, help="field base path (no ext)")
    p.add_argument("--t0", type=float, default=0.0)
    p.add_argument("--s0", type=float, default=0.0)
    p.add_argument("--end-time", type=float, default=None)
    p.add_argument("--end-position", type=float, default=None)
    p.add_argument("--dt", type=float, default=1.0)
    p.add_argument("--out", default="out/flow_profile.csv")
    p.set_defaults(func=cmd_extract_flow)

    p = sub.add_parser("compare", help="run several strategies on scenarios")
    p.add_argument("--scenarios", required=True,
                   help="comma-separated names or config paths")
    p.add_argument("--strategies", default="rule,mpc_sp,ta_item")
    p.add_argument("--out", default="out")
    p.add_argument("--check-ordering", action="store_true",
                   help="exit 3 unless fuel(ta_item) <= fuel(mpc_sp) "
                        "<= fuel(rule) on every scenario")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("report", help="emit tidy plot data from traces")
    p.add_argument("--traces", required=True,
                   help="strategy=path[,strategy=path...] trace CSVs")
    p.add_argument("--out", default="out")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, InvalidConfig) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except SimulationError as exc:
        print(f"simulation error: {exc}", file=sys.stderr)
        return EXIT_SIMULATION
    except HevtemError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_SIMULATION


if __name__ == "__main__":
    sys.exit(main())
