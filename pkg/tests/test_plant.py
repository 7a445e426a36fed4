import math

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hevtem import plant
from hevtem.errors import ConstraintViolation, OutOfEnvelope, PowerInfeasible
from hevtem.tables import Table1D, Table2D


def mk_state(soc=0.5, temp=20.0):
    return plant.isothermal_state(soc, temp)


# ---------------------------------------------------------------------------
# road load / driveline
# ---------------------------------------------------------------------------

def test_road_load_at_rest(models, env20):
    # 1350 * 9.8 * 0.007 by hand
    f = plant.road_load_force(plant.DriveSample(0.0, 0.0), env20, models.vehicle)
    assert f == pytest.approx(92.61, abs=1e-9)


def test_road_load_zero_rolling(env20):
    veh = plant.VehicleParams(rolling_coeff=1e-300)
    f = plant.road_load_force(plant.DriveSample(0.0, 0.0), env20, veh)
    assert f == pytest.approx(0.0, abs=1e-290)


def test_road_load_moving(models, env20):
    # 92.61 + 0.5*1.184*0.3*1.746*400 + 1350*0.5
    expected = 92.61 + 0.5 * 1.184 * 0.3 * 1.746 * 400.0 + 675.0
    f = plant.road_load_force(plant.DriveSample(20.0, 0.5), env20, models.vehicle)
    assert f == pytest.approx(expected, rel=1e-12)


def test_wheel_to_powersplit_speed_only(models):
    t, w = plant.wheel_to_powersplit(0.0, 10.0, models.vehicle)
    assert t == 0.0
    assert w == pytest.approx(10.0 * 3.26 / 0.28, rel=1e-12)


def test_wheel_to_powersplit_driving_vs_regen(models):
    eff = 0.97 * 0.95
    t_drv, _ = plant.wheel_to_powersplit(326.0, 0.0, models.vehicle)
    assert t_drv == pytest.approx(326.0 * 0.28 / (3.26 * eff), rel=1e-12)
    t_reg, _ = plant.wheel_to_powersplit(-326.0, 0.0, models.vehicle)
    assert t_reg == pytest.approx(-326.0 * 0.28 * eff / 3.26, rel=1e-12)


def test_powersplit_kinematics_examples(models):
    t1, w1, t2, w2 = plant.powersplit_kinematics(0.0, 0.0, 0.0, 100.0, models.vehicle)
    assert (t1, w1, w2, t2) == (0.0, -260.0, 250.0, 0.0)

    t1, w1, t2, w2 = plant.powersplit_kinematics(100.0, 5.0, 0.0, 3.0, models.vehicle)
    assert t1 == pytest.approx(-100.0 / 3.6, rel=1e-12)
    assert t2 == pytest.approx(-(2.6 * 100.0 / 3.6) / 2.5, rel=1e-12)

    assert plant.powersplit_kinematics(0, 0, 0, 0, models.vehicle) == (0, 0, 0, 0)


def test_powersplit_limit_report(models):
    with pytest.raises(ConstraintViolation):
        plant.powersplit_kinematics(0.0, 0.0, 0.0, 1000.0, models.vehicle,
                                    check_limits=models)


def willis_residuals(t_e, w_e, t_ps, w_ps, veh):
    t1, w1, t2, w2 = plant.powersplit_kinematics(t_e, w_e, t_ps, w_ps, veh)
    r1, r2 = veh.pg1_ratio, veh.pg2_ratio
    t_r1 = r1 * t_e / (r1 + 1.0)
    return (
        t_r1 + r1 * t1,
        w1 - ((r1 + 1.0) * w_e - r1 * w_ps),
        w2 - r2 * w_ps,
        r2 * t2 - (t_ps - t_r1),
    )


@given(t_e=st.floats(-220, 220), w_e=st.floats(0, 500),
       t_ps=st.floats(-500, 500), w_ps=st.floats(0, 450))
def test_willis_constraint_residual(t_e, w_e, t_ps, w_ps):
    veh = plant.VehicleParams()
    for res in willis_residuals(t_e, w_e, t_ps, w_ps, veh):
        assert abs(res) < 1e-9


# ---------------------------------------------------------------------------
# engine
# ---------------------------------------------------------------------------

def small_engine(node_kg_s=8.0e-4):
    fuel = Table2D([0.0, 100.0, 200.0], [0.0, 50.0, 100.0],
                   [[0.0, 0.0, 0.0],
                    [0.0, node_kg_s / 2, node_kg_s],
                    [0.0, node_kg_s, 2 * node_kg_s]], "test.fuel")
    return plant.EngineModel(
        fuel_map=fuel,
        cold_fuel_factor=Table1D([-40.0, 0.0, 70.0, 150.0],
                                 [1.3, 1.15, 1.0, 1.0]),
        heat_release_ratio=Table1D([-40.0, 150.0], [0.95, 0.95]),
        exhaust_ratio=0.4, fuel_lhv_j_kg=43e6,
        max_power_w=110e3, max_torque_nm=220.0, max_speed_rad_s=500.0,
        min_speed_rad_s=90.0,
        thermal_mass_kg=100.0, specific_heat_j_kgk=500.0,
        conv_coeff_w_m2k=10.0, conv_area_m2=2.0,
        radiator_base_w_k=5.0, radiator_coolant_w_k_per_kg_s=300.0,
        radiator_air_w_k_per_kg_s=110.0, coolant_flow_kg_s=0.3,
        intake_air_flow_kg_s=0.5, cabin_heat_coeff_w_k=80.0,
        compartment_tau_s=150.0, compartment_engine_mix=0.4)


def test_engine_fuel_off_state(models):
    assert plant.engine_fuel_rate(0.0, 0.0, 20.0, models.engine) == 0.0


def test_engine_fuel_warm_node():
    eng = small_engine()
    assert plant.engine_fuel_rate(100.0, 100.0, 90.0, eng) == pytest.approx(8.0e-4)


def test_engine_fuel_cold_factor():
    eng = small_engine()
    assert plant.engine_fuel_rate(100.0, 100.0, 0.0, eng) == pytest.approx(
        1.15 * 8.0e-4)


def test_engine_fuel_envelope_errors(models):
    with pytest.raises(OutOfEnvelope):
        plant.engine_fuel_rate(600.0, 0.0, 20.0, models.engine)
    with pytest.raises(OutOfEnvelope):
        plant.engine_fuel_rate(100.0, 230.0, 20.0, models.engine)
    with pytest.raises(OutOfEnvelope):
        plant.engine_fuel_rate(500.0, 220.1, 20.0, models.engine)
    with pytest.raises(OutOfEnvelope):
        plant.engine_fuel_rate(40.0, 50.0, 20.0, models.engine)  # below idle


@given(w=st.floats(90, 500), t=st.floats(0, 220))
def test_engine_fuel_nonnegative(w, t):
    eng = plant.default_models().engine
    if w * t > eng.max_power_w:
        return
    assert plant.engine_fuel_rate(w, t, -10.0, eng) >= 0.0


def test_engine_thermal_equilibrium(models, env20):
    state = mk_state(temp=20.0)
    u = plant.ControlInput(0.0, 0.0, 0.0, 0.0)
    dte, dtcom, q_heat = plant.engine_thermal_rate(state, u, 0.0, env20,
                                                   models.engine)
    assert dte == 0.0
    assert dtcom == 0.0
    assert q_heat == 0.0


def test_engine_thermal_hand_value(env20):
    # Q_f = 30 kW, P_e = 10 kW, exhaust 0.4, everything else zeroed out:
    # dTe = (30 - 10 - 0.4*20) kW / 50 kJ/K = 0.24 K/s
    eng = small_engine()
    state = mk_state(temp=20.0)  # te = tcom = tamb -> q_air = q_cl = 0
    u = plant.ControlInput(100.0, 100.0, 0.0, 0.0)
    fuel_rate = 30e3 / (eng.heat_release_ratio(20.0) * eng.fuel_lhv_j_kg)
    dte, _, _ = plant.engine_thermal_rate(state, u, fuel_rate, env20, eng)
    assert dte == pytest.approx(0.24, rel=1e-12)


def test_engine_thermal_convective_sign(models, env20):
    state = plant.PlantState(0.5, 20.0, 20.0, 20.0, 20.0, 50.0, 20.0)
    u = plant.ControlInput(0.0, 0.0, 0.0, 0.0)
    dte, _, _ = plant.engine_thermal_rate(state, u, 0.0, env20, models.engine)
    assert dte < 0.0


# ---------------------------------------------------------------------------
# motor-generators
# ---------------------------------------------------------------------------

def flat_mg(eff=0.9):
    emap = Table2D([0.0, 1500.0], [0.0, 210.0],
                   [[eff, eff], [eff, eff]], "test.mg")
    return plant.MgModel(efficiency_map=emap, max_power_w=60e3,
                         max_torque_nm=207.0, max_speed_rad_s=1450.0)


def test_mg_power_motoring_and_generating():
    mg = flat_mg(0.9)
    assert plant.mg_electric_power(100.0, 50.0, mg) == pytest.approx(5000.0 / 0.9)
    assert plant.mg_electric_power(100.0, -50.0, mg) == pytest.approx(-4500.0)
    assert plant.mg_electric_power(100.0, 0.0, mg) == 0.0


def test_mg_power_limit():
    mg = flat_mg()
    with pytest.raises(ConstraintViolation):
        plant.mg_electric_power(1000.0, 100.0, mg)


# ---------------------------------------------------------------------------
# battery
# ---------------------------------------------------------------------------

def flat_battery(u_oc=1.3, r0=0.01):
    return plant.BatteryModel(
        ocv_v=Table1D([0.0, 0.5, 1.0], [u_oc - 0.01, u_oc, u_oc + 0.01]),
        resistance_ohm=Table2D([0.0, 1.0], [-20.0, 60.0],
                               [[r0, r0], [r0, r0]]),
        nominal_capacity_ah=6.5, nominal_voltage_v=1.2, cell_count=168,
        thermal_mass_kg=45.0, specific_heat_j_kgk=800.0,
        cooling_base_w_k=1.0, cooling_flow_w_k_per_kg_s=300.0,
        fan_airflow=Table2D([0.0, 1.0], [0.0, 40.0],
                            [[0.0, 0.032], [0.06, 0.092]]),
        pump_power_w=25.0, fan_power_max_w=150.0,
        blower_coeff_w_per_w=0.03, blower_max_w=200.0,
        max_charge_power_w_cell=150.0)


def test_battery_open_circuit():
    bat = flat_battery()
    i, u, soc_rate, q_gen = plant.battery_electrical_step(0.0, 0.5, 25.0, bat)
    assert i == 0.0
    assert u == pytest.approx(1.3)
    assert soc_rate == 0.0
    assert q_gen == 0.0


def test_battery_quadratic_root():
    bat = flat_battery()
    i, u, _, q_gen = plant.battery_electrical_step(13.0 * 168, 0.5, 25.0, bat)
    expected = (1.3 - math.sqrt(1.3 ** 2 - 4 * 0.01 * 13.0)) / 0.02
    assert i == pytest.approx(expected, abs=1e-12)
    assert i == pytest.approx(10.92, abs=0.01)
    assert q_gen == pytest.approx(i * i * 0.01 * 168, rel=1e-12)


def test_battery_soc_rate_unit():
    bat = flat_battery()
    # choose pack power so the cell current is exactly 6.5 A
    p_cell = 1.3 * 6.5 - 6.5 ** 2 * 0.01
    _, _, soc_rate, _ = plant.battery_electrical_step(p_cell * 168, 0.5, 25.0, bat)
    assert soc_rate == pytest.approx(-1.0 / 3600.0, rel=1e-9)


def test_battery_infeasible_power():
    bat = flat_battery()
    p_max_cell = 1.3 ** 2 / (4 * 0.01)
    with pytest.raises(PowerInfeasible) as exc:
        plant.battery_electrical_step((p_max_cell + 1.0) * 168, 0.5, 25.0, bat)
    assert exc.value.max_feasible_w == pytest.approx(p_max_cell * 168)


@given(p_cell=st.floats(-150.0, 42.0), soc=st.floats(0.05, 0.95),
       temp=st.floats(-10.0, 50.0))
def test_battery_energy_bookkeeping(p_cell, soc, temp):
    bat = plant.default_models().battery
    i, u, _, q_gen = plant.battery_electrical_step(p_cell * bat.cell_count,
                                                   soc, temp, bat)
    assert abs(u * i - p_cell) < 1e-6
    assert q_gen >= 0.0


def test_battery_thermal_equilibrium(models):
    assert plant.battery_thermal_rate(0.0, 25.0, 25.0, 0.0, 0.0,
                                      models.battery) == 0.0


def test_battery_thermal_hand_value():
    bat = flat_battery()  # m_b C_b = 36 kJ/K
    rate = plant.battery_thermal_rate(200.0, 25.0, 25.0, 0.0, 0.0, bat)
    assert rate == pytest.approx(200.0 / 36e3, rel=1e-12)


@given(tb=st.floats(25.1, 60.0), tc=st.floats(15.0, 25.0),
       v=st.floats(0.0, 40.0))
def test_battery_fan_monotone_cooling(tb, tc, v):
    bat = plant.default_models().battery
    r_on = plant.battery_thermal_rate(100.0, tb, tc, 1.0, v, bat)
    r_off = plant.battery_thermal_rate(100.0, tb, tc, 0.0, v, bat)
    assert r_on <= r_off


# ---------------------------------------------------------------------------
# cabin
# ---------------------------------------------------------------------------

def test_cabin_isothermal_rest(models):
    env = plant.EnvConditions(ambient_c=20.0, solar_w_m2=0.0)
    rates = plant.cabin_thermal_rate(mk_state(temp=20.0), 0.0, 0.0, env,
                                     models.cabin)
    assert rates == (0.0, 0.0, 0.0)


def test_cabin_hvac_division(models):
    env = plant.EnvConditions(ambient_c=20.0, solar_w_m2=0.0)
    dtc, _, _ = plant.cabin_thermal_rate(mk_state(temp=20.0), -3000.0, 0.0,
                                         env, models.cabin)
    # air capacity is 60 kJ/K by construction
    assert models.cabin.air_capacity_j_k == pytest.approx(60e3)
    assert dtc == pytest.approx(-0.05, rel=1e-12)


def test_cabin_solar_gain(models):
    env = plant.EnvConditions(ambient_c=20.0, solar_w_m2=800.0,
                              solar_incidence=0.8)
    dtc, _, _ = plant.cabin_thermal_rate(mk_state(temp=20.0), 0.0, 0.0, env,
                                         models.cabin)
    # Q_sun = 0.5 * 800 * 0.8 * 2.6 = 832 W
    assert dtc * models.cabin.air_capacity_j_k == pytest.approx(832.0, rel=1e-12)


def test_cabin_engine_heat_share(models, env20):
    dtc, _, _ = plant.cabin_thermal_rate(mk_state(temp=20.0), 1000.0, 500.0,
                                         env20, models.cabin)
    assert dtc == pytest.approx(1500.0 / 60e3, rel=1e-12)


# ---------------------------------------------------------------------------
# full step
# ---------------------------------------------------------------------------

def test_plant_step_fixed_point(models, env20):
    state = mk_state(0.5, 20.0)
    u = plant.ControlInput(0.0, 0.0, 0.0, 0.0)
    nxt, fuel, _ = plant.plant_step(state, u, plant.DriveSample(0.0, 0.0),
                                    env20, models, 1.0)
    assert nxt == state
    assert fuel == 0.0


def test_plant_step_discharge_signs(models, env20):
    state = mk_state(0.5, 20.0)
    u = plant.ControlInput(0.0, 0.0, 0.0, 0.0)
    sample = plant.DriveSample(15.0, 0.5)  # electric-only launch
    nxt, fuel, diag = plant.plant_step(state, u, sample, env20, models, 1.0)
    assert diag.pack_w > 0.0
    assert nxt.soc < state.soc
    assert nxt.temp_battery_c >= state.temp_battery_c
    assert fuel == 0.0


def test_plant_step_deterministic(models, env20):
    state = mk_state(0.47, 23.0)
    u = plant.ControlInput(180.0, 70.0, 0.4, -900.0)
    sample = plant.DriveSample(12.0, 0.2)
    a = plant.plant_step(state, u, sample, env20, models, 1.0, substeps=7)
    b = plant.plant_step(state, u, sample, env20, models, 1.0, substeps=7)
    assert a[0] == b[0]
    assert a[1] == b[1]


def test_plant_step_energy_bookkeeping(models, env20):
    state = mk_state(0.6, 25.0)
    u = plant.ControlInput(150.0, 60.0, 0.5, -2000.0)
    _, _, diag = plant.plant_step(state, u, plant.DriveSample(10.0, 0.1),
                                  env20, models, 1.0)
    assert abs(diag.cell_voltage_v * diag.cell_current_a - diag.cell_w) < 1e-6


def wltc_like(n):
    """A deterministic stop-go/cruise speed profile at 1 Hz."""
    speeds = []
    v = 0.0
    for t in range(n):
        if t % 60 < 25:
            v = min(v + 1.1, 14.0)
        elif t % 60 < 45:
            v = max(v - 0.15, 0.8 * v)
        else:
            v = max(v - 1.4, 0.0)
        speeds.append(v)
    return speeds


def drive_controls(t):
    engine_on = (t // 30) % 2 == 0
    return plant.ControlInput(170.0 if engine_on else 0.0,
                              60.0 if engine_on else 0.0,
                              0.3, -1200.0)


def run_profile(models, env, n, substeps):
    speeds = wltc_like(n)
    state = mk_state(0.5, env.ambient_c)
    prev_v = 0.0
    states = []
    for t in range(n):
        v = speeds[t]
        sample = plant.DriveSample(v, v - prev_v)
        prev_v = v
        state, _, _, _ = plant.plant_step_soft(state, drive_controls(t), sample,
                                               env, models, 1.0,
                                               substeps=substeps)
        states.append(state)
    return states


def test_step_vs_substepped_oracle_100s(models, env20):
    coarse = run_profile(models, env20, 100, 1)
    fine = run_profile(models, env20, 100, 100)
    worst_temp = 0.0
    worst_soc = 0.0
    for a, b in zip(coarse, fine):
        at, bt = a.as_tuple(), b.as_tuple()
        worst_soc = max(worst_soc, abs(at[0] - bt[0]))
        worst_temp = max(worst_temp, max(abs(x - y)
                                         for x, y in zip(at[1:], bt[1:])))
    assert worst_temp < 0.5
    assert worst_soc < 0.002


def test_integrator_first_order(models, env20):
    """Halving dt shrinks the error vs a dt=1e-3 reference by >= 1.8x."""
    state0 = mk_state(0.5, 20.0)
    u = plant.ControlInput(150.0, 50.0, 0.3, -1500.0)
    sample = plant.DriveSample(12.0, 0.2)

    def run(substeps, seconds=20):
        s = state0
        for _ in range(seconds):
            s, _, _, _ = plant.plant_step_soft(s, u, sample, env20, models,
                                               1.0, substeps=substeps)
        return s.as_tuple()

    ref = run(1000)

    def err(substeps):
        return max(abs(a - b) for a, b in zip(run(substeps), ref))

    assert err(1) / err(2) >= 1.8


def test_thermal_relaxation_monotone(models):
    """With all sources zero each node relaxes toward its sink."""
    env = plant.EnvConditions(ambient_c=20.0, solar_w_m2=0.0)
    state = plant.PlantState(0.5, 35.0, 30.0, 40.0, 38.0, 80.0, 50.0)
    u = plant.ControlInput(0.0, 0.0, 0.0, 0.0)
    sample = plant.DriveSample(0.0, 0.0)
    prev = state
    for _ in range(300):
        nxt, _, _ = plant.plant_step(prev, u, sample, env, models, 1.0)
        assert nxt.temp_engine_c <= prev.temp_engine_c
        assert nxt.temp_battery_c <= prev.temp_battery_c
        assert nxt.temp_roof_c <= max(prev.temp_roof_c, 20.0) + 1e-12
        assert nxt.temp_window_c <= max(prev.temp_window_c, 20.0) + 1e-12
        prev = nxt
    assert prev.temp_engine_c < 45.0


def test_plant_step_soc_bound_error(models, env20):
    state = mk_state(0.9999, 20.0)
    u = plant.ControlInput(300.0, 150.0, 0.0, 0.0)  # 45 kW into the battery
    with pytest.raises(ConstraintViolation):
        for _ in range(30):
            state, _, _ = plant.plant_step(state, u, plant.DriveSample(0.0, 0.0),
                                           env20, models, 1.0)


def test_plant_step_soft_records_violations(models, env20):
    state = mk_state(0.5, 20.0)
    u = plant.ControlInput(700.0, 100.0, 0.0, 0.0)  # over speed limit
    _, _, _, viol = plant.plant_step_soft(state, u, plant.DriveSample(5.0, 0.0),
                                          env20, models, 1.0)
    assert viol["engine_speed"] > 0.0


def test_regen_blends_to_friction(models, env20):
    state = mk_state(0.5, 20.0)
    u = plant.ControlInput(0.0, 0.0, 0.0, 0.0)
    sample = plant.DriveSample(25.0, -4.0)  # hard braking
    nxt, _, diag = plant.plant_step(state, u, sample, env20, models, 1.0)
    assert diag.friction_brake_w > 0.0
    assert nxt.soc > state.soc  # still recuperates up to the cap
