"""Control-oriented forward model of a power-split hybrid electric vehicle.

Covers longitudinal load, the planetary power split, engine fuel/thermal
dynamics, the two motor-generators, battery electro-thermal dynamics, and a
five-node cabin thermal model, integrated with explicit Euler at a fixed
control rate (optional sub-stepping for reference-grade accuracy).

All operations are pure functions over immutable inputs. The per-substep
core is deliberately plain-Python scalar code: the fine-step reference
integrator evaluates it ~10^6 times and numpy scalars are an order of
magnitude slower there.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields

from .config import ConfigDict
from .errors import ConstraintViolation, OutOfEnvelope, PowerInfeasible
from .tables import Table1D, Table2D

# ---------------------------------------------------------------------------
# Value types
# ---------------------------------------------------------------------------


@dataclass(frozen=True, slots=True)
class DriveSample:
    """One point of a driving cycle: speed (m/s) and acceleration (m/s^2)."""
    speed_m_s: float
    accel_m_s2: float

    def __post_init__(self):
        if self.speed_m_s < 0.0:
            raise ConstraintViolation("drive sample speed must be >= 0",
                                      "speed_m_s", self.speed_m_s, 0.0)


@dataclass(frozen=True, slots=True)
class EnvConditions:
    """Ambient boundary conditions for a trip."""
    ambient_c: float = 20.0
    road_grade_rad: float = 0.0
    solar_w_m2: float = 500.0
    solar_incidence: float = 0.8

    def __post_init__(self):
        if not -0.3 < self.road_grade_rad < 0.3:
            raise ConstraintViolation("road grade outside (-0.3, 0.3) rad",
                                      "road_grade_rad", self.road_grade_rad, 0.3)


@dataclass(frozen=True, slots=True)
class PlantState:
    """The seven plant states: SOC plus six temperatures (deg C)."""
    soc: float
    temp_battery_c: float
    temp_cabin_c: float
    temp_roof_c: float
    temp_window_c: float
    temp_engine_c: float
    temp_compartment_c: float

    def as_tuple(self) -> tuple[float, ...]:
        return (self.soc, self.temp_battery_c, self.temp_cabin_c,
                self.temp_roof_c, self.temp_window_c, self.temp_engine_c,
                self.temp_compartment_c)

    def validate(self) -> None:
        if not 0.0 <= self.soc <= 1.0:
            raise ConstraintViolation("soc outside [0, 1]", "soc", self.soc, 1.0)
        for name, value in (("temp_battery_c", self.temp_battery_c),
                            ("temp_cabin_c", self.temp_cabin_c),
                            ("temp_roof_c", self.temp_roof_c),
                            ("temp_window_c", self.temp_window_c),
                            ("temp_engine_c", self.temp_engine_c),
                            ("temp_compartment_c", self.temp_compartment_c)):
            if not (math.isfinite(value) and -40.0 <= value <= 150.0):
                raise ConstraintViolation(f"{name} outside [-40, 150] C",
                                          name, value, 150.0)


def isothermal_state(soc: float, temp_c: float) -> PlantState:
    """All six temperature nodes at ``temp_c`` (the standard trip start)."""
    return PlantState(soc, temp_c, temp_c, temp_c, temp_c, temp_c, temp_c)


@dataclass(frozen=True, slots=True)
class ControlInput:
    """The four controls: engine speed/torque, battery fan duty, HVAC heat."""
    engine_speed_rad_s: float
    engine_torque_nm: float
    fan_duty: float
    hvac_heat_w: float


# ---------------------------------------------------------------------------
# Parameter / model types
# ---------------------------------------------------------------------------


@dataclass(frozen=True, slots=True)
class VehicleParams:
    mass_kg: float = 1350.0
    gravity_m_s2: float = 9.8
    air_density_kg_m3: float = 1.184
    rolling_coeff: float = 0.007
    drag_coeff: float = 0.3
    frontal_area_m2: float = 1.746
    tire_radius_m: float = 0.28
    wheel_eff: float = 0.95
    final_drive_ratio: float = 3.26
    final_drive_eff: float = 0.97
    pg1_ratio: float = 78.0 / 30.0
    pg2_ratio: float = 2.5

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) <= 0.0:
                raise ConstraintViolation(f"vehicle param {f.name} must be > 0",
                                          f.name, getattr(self, f.name), 0.0)
        for name in ("wheel_eff", "final_drive_eff"):
            if not 0.0 < getattr(self, name) <= 1.0:
                raise ConstraintViolation(f"{name} must be in (0, 1]",
                                          name, getattr(self, name), 1.0)


class EngineModel:
    """Fuel map, cold-fuel factor, thermal parameters and limits.

    The fuel map is a rectangular (speed, torque) grid in kg/s with bilinear
    interpolation; the shipped default is a Willans-line surface (idle/friction
    term plus torque-proportional term over the fuel heating value), which is
    monotone nondecreasing in torque at fixed speed.
    """

    def __init__(self, *, fuel_map: Table2D, cold_fuel_factor: Table1D,
                 heat_release_ratio: Table1D, exhaust_ratio: float,
                 fuel_lhv_j_kg: float, max_power_w: float, max_torque_nm: float,
                 max_speed_rad_s: float, min_speed_rad_s: float,
                 thermal_mass_kg: float,
                 specific_heat_j_kgk: float, conv_coeff_w_m2k: float,
                 conv_area_m2: float, radiator_base_w_k: float,
                 radiator_coolant_w_k_per_kg_s: float,
                 radiator_air_w_k_per_kg_s: float, coolant_flow_kg_s: float,
                 intake_air_flow_kg_s: float, cabin_heat_coeff_w_k: float,
                 compartment_tau_s: float, compartment_engine_mix: float):
        self.fuel_map = fuel_map
        self.cold_fuel_factor = cold_fuel_factor
        self.heat_release_ratio = heat_release_ratio
        self.exhaust_ratio = exhaust_ratio
        self.fuel_lhv_j_kg = fuel_lhv_j_kg
        self.max_power_w = max_power_w
        self.max_torque_nm = max_torque_nm
        self.max_speed_rad_s = max_speed_rad_s
        # running below idle is not a valid operating point: the speed
        # envelope is {0} union [min_speed, max_speed]
        self.min_speed_rad_s = min_speed_rad_s
        self.thermal_mass_kg = thermal_mass_kg
        self.specific_heat_j_kgk = specific_heat_j_kgk
        self.conv_coeff_w_m2k = conv_coeff_w_m2k
        self.conv_area_m2 = conv_area_m2
        self.radiator_base_w_k = radiator_base_w_k
        self.radiator_coolant_w_k_per_kg_s = radiator_coolant_w_k_per_kg_s
        self.radiator_air_w_k_per_kg_s = radiator_air_w_k_per_kg_s
        self.coolant_flow_kg_s = coolant_flow_kg_s
        self.intake_air_flow_kg_s = intake_air_flow_kg_s
        self.cabin_heat_coeff_w_k = cabin_heat_coeff_w_k
        self.compartment_tau_s = compartment_tau_s
        self.compartment_engine_mix = compartment_engine_mix
        self._validate()

    def _validate(self):
        if self.fuel_map.min_over_grid() < 0.0:
            raise ConstraintViolation("fuel map must be nonnegative", "fuel_map")
        if min(self.cold_fuel_factor.ys) < 1.0:
            raise ConstraintViolation("cold fuel factor must be >= 1",
                                      "cold_fuel_factor")
        if not 0.0 < self.exhaust_ratio < 1.0:
            raise ConstraintViolation("exhaust ratio must be in (0, 1)",
                                      "exhaust_ratio", self.exhaust_ratio, 1.0)
        for dh in self.heat_release_ratio.ys:
            if not 0.0 < dh < 1.0:
                raise ConstraintViolation("heat release ratio must be in (0, 1)",
                                          "heat_release_ratio", dh, 1.0)
        if not 0.0 < self.compartment_engine_mix < 1.0:
            raise ConstraintViolation("compartment mix must be in (0, 1)",
                                      "compartment_engine_mix")
        # monotone in torque at fixed speed
        for row in self.fuel_map.values:
            if any(b < a - 1e-15 for a, b in zip(row, row[1:])):
                raise ConstraintViolation("fuel map must be nondecreasing in torque",
                                          "fuel_map")

    def radiator_heat_w(self, temp_engine_c: float, ambient_c: float) -> float:
        coeff = (self.radiator_base_w_k
                 + self.radiator_coolant_w_k_per_kg_s * self.coolant_flow_kg_s
                 + self.radiator_air_w_k_per_kg_s * self.intake_air_flow_kg_s)
        return coeff * (temp_engine_c - ambient_c)


class MgModel:
    """Motor-generator efficiency map over (|speed|, |torque|) plus limits."""

    def __init__(self, *, efficiency_map: Table2D, max_power_w: float,
                 max_torque_nm: float, max_speed_rad_s: float, name: str = "mg"):
        self.efficiency_map = efficiency_map
        self.max_power_w = max_power_w
        self.max_torque_nm = max_torque_nm
        self.max_speed_rad_s = max_speed_rad_s
        self.name = name
        lo = efficiency_map.min_over_grid()
        hi = efficiency_map.max_over_grid()
        if not (0.5 < lo and hi <= 1.0):
            raise ConstraintViolation(f"{name} efficiency must be in (0.5, 1]",
                                      "efficiency_map", lo, 1.0)


class BatteryModel:
    """Internal-resistance electrical model plus lumped-mass thermal model."""

    def __init__(self, *, ocv_v: Table1D, resistance_ohm: Table2D,
                 nominal_capacity_ah: float, nominal_voltage_v: float,
                 cell_count: int, thermal_mass_kg: float,
                 specific_heat_j_kgk: float, cooling_base_w_k: float,
                 cooling_flow_w_k_per_kg_s: float, fan_airflow: Table2D,
                 pump_power_w: float, fan_power_max_w: float,
                 blower_coeff_w_per_w: float, blower_max_w: float,
                 max_charge_power_w_cell: float):
        self.ocv_v = ocv_v
        self.resistance_ohm = resistance_ohm
        self.nominal_capacity_ah = nominal_capacity_ah
        self.nominal_voltage_v = nominal_voltage_v
        self.cell_count = int(cell_count)
        self.thermal_mass_kg = thermal_mass_kg
        self.specific_heat_j_kgk = specific_heat_j_kgk
        self.cooling_base_w_k = cooling_base_w_k
        self.cooling_flow_w_k_per_kg_s = cooling_flow_w_k_per_kg_s
        self.fan_airflow = fan_airflow
        self.pump_power_w = pump_power_w
        self.fan_power_max_w = fan_power_max_w
        self.blower_coeff_w_per_w = blower_coeff_w_per_w
        self.blower_max_w = blower_max_w
        self.max_charge_power_w_cell = max_charge_power_w_cell
        if any(b <= a for a, b in zip(ocv_v.ys, ocv_v.ys[1:])):
            raise ConstraintViolation("open-circuit voltage must be strictly "
                                      "increasing in soc", "ocv_v")
        if resistance_ohm.min_over_grid() <= 0.0:
            raise ConstraintViolation("internal resistance must be > 0",
                                      "resistance_ohm")

    def fan_power_w(self, fan_duty: float) -> float:
        # affinity law: fan electrical power grows with the cube of duty
        return self.fan_power_max_w * fan_duty ** 3

    def blower_power_w(self, hvac_heat_w: float) -> float:
        return min(self.blower_coeff_w_per_w * abs(hvac_heat_w), self.blower_max_w)


class CabinModel:
    """Five-node cabin thermal model: air node plus lumped roof/window nodes."""

    def __init__(self, *, thermal_mass_kg: float, specific_heat_j_kgk: float,
                 extra_capacity_j_k: float, glass_transmission: float,
                 solar_intensity_w_m2: float, incidence_factor: float,
                 window_area_m2: float, roof_area_m2: float,
                 bottom_area_m2: float, side_area_m2: float,
                 bottom_conv_w_m2k: float, side_conv_w_m2k: float,
                 window_conv_w_m2k: float, roof_conv_w_m2k: float,
                 window_capacity_j_k: float, window_ambient_conv_w_m2k: float,
                 window_absorptivity: float, roof_capacity_j_k: float,
                 roof_ambient_conv_w_m2k: float, roof_absorptivity: float,
                 hvac_min_w: float, hvac_max_w: float, cop_cooling: float,
                 cop_heating: float):
        self.thermal_mass_kg = thermal_mass_kg
        self.specific_heat_j_kgk = specific_heat_j_kgk
        self.extra_capacity_j_k = extra_capacity_j_k
        self.glass_transmission = glass_transmission
        self.solar_intensity_w_m2 = solar_intensity_w_m2
        self.incidence_factor = incidence_factor
        self.window_area_m2 = window_area_m2
        self.roof_area_m2 = roof_area_m2
        self.bottom_area_m2 = bottom_area_m2
        self.side_area_m2 = side_area_m2
        self.bottom_conv_w_m2k = bottom_conv_w_m2k
        self.side_conv_w_m2k = side_conv_w_m2k
        self.window_conv_w_m2k = window_conv_w_m2k
        self.roof_conv_w_m2k = roof_conv_w_m2k
        self.window_capacity_j_k = window_capacity_j_k
        self.window_ambient_conv_w_m2k = window_ambient_conv_w_m2k
        self.window_absorptivity = window_absorptivity
        self.roof_capacity_j_k = roof_capacity_j_k
        self.roof_ambient_conv_w_m2k = roof_ambient_conv_w_m2k
        self.roof_absorptivity = roof_absorptivity
        self.hvac_min_w = hvac_min_w
        self.hvac_max_w = hvac_max_w
        self.cop_cooling = cop_cooling
        self.cop_heating = cop_heating
        if not 0.0 < glass_transmission <= 1.0:
            raise ConstraintViolation("glass transmission must be in (0, 1]",
                                      "glass_transmission", glass_transmission, 1.0)
        for name in ("thermal_mass_kg", "specific_heat_j_kgk", "extra_capacity_j_k",
                     "window_area_m2", "roof_area_m2", "bottom_area_m2",
                     "side_area_m2", "bottom_conv_w_m2k", "side_conv_w_m2k",
                     "window_conv_w_m2k", "roof_conv_w_m2k", "window_capacity_j_k",
                     "roof_capacity_j_k", "cop_cooling", "cop_heating"):
            if getattr(self, name) <= 0.0:
                raise ConstraintViolation(f"cabin param {name} must be > 0", name)

    @property
    def air_capacity_j_k(self) -> float:
        return self.thermal_mass_kg * self.specific_heat_j_kgk + self.extra_capacity_j_k


@dataclass(frozen=True)
class PlantModels:
    """The full parameter bundle consumed by the plant operations."""
    vehicle: VehicleParams
    engine: EngineModel
    mg1: MgModel
    mg2: MgModel
    battery: BatteryModel
    cabin: CabinModel


# ---------------------------------------------------------------------------
# Default parameterization
# ---------------------------------------------------------------------------

_FUEL_SPEEDS = [0.0, 50.0, 100.0, 150.0, 200.0, 250.0, 300.0, 350.0, 400.0,
                450.0, 500.0]
_FUEL_TORQUES = [0.0, 20.0, 40.0, 60.0, 80.0, 100.0, 120.0, 140.0, 160.0,
                 180.0, 200.0, 220.0]


def _willans_fuel_rows(friction_nm: float, indicated_eff: float,
                       lhv_j_kg: float) -> list[list[float]]:
    rows = []
    for w in _FUEL_SPEEDS:
        rows.append([(friction_nm * w + w * t / indicated_eff) / lhv_j_kg
                     for t in _FUEL_TORQUES])
    return rows


def _mg_eff_rows(speeds, torques, t_max) -> list[list[float]]:
    rows = []
    for w in speeds:
        row = []
        for t in torques:
            eff = 0.93 - 0.18 * math.exp(-abs(w) / 150.0) - 0.05 * (t / t_max) ** 2
            row.append(min(0.93, max(0.62, eff)))
        rows.append(row)
    return rows


def default_config() -> ConfigDict:
    """Full plant parameterization as a config dict (the documented defaults)."""
    mg_speeds = [0.0, 100.0, 200.0, 400.0, 700.0, 1000.0, 1500.0]
    mg1_torques = [0.0, 30.0, 60.0, 90.0, 120.0, 170.0]
    mg2_torques = [0.0, 40.0, 80.0, 120.0, 160.0, 207.0]
    return {
        "": {"format_version": 1.0},
        "vehicle": {
            "mass_kg": 1350.0, "gravity_m_s2": 9.8, "air_density_kg_m3": 1.184,
            "rolling_coeff": 0.007, "drag_coeff": 0.3, "frontal_area_m2": 1.746,
            "tire_radius_m": 0.28, "wheel_eff": 0.95, "final_drive_ratio": 3.26,
            "final_drive_eff": 0.97, "pg1_ratio": 78.0 / 30.0, "pg2_ratio": 2.5,
        },
        "engine": {
            "fuel_map_speed_rad_s": list(_FUEL_SPEEDS),
            "fuel_map_torque_nm": list(_FUEL_TORQUES),
            "fuel_map_kg_s": _willans_fuel_rows(15.0, 0.38, 43.0e6),
            "cold_fuel_temp_c": [-40.0, 0.0, 40.0, 70.0, 150.0],
            "cold_fuel_factor": [1.30, 1.15, 1.05, 1.0, 1.0],
            "heat_release_temp_c": [-40.0, 0.0, 70.0, 150.0],
            "heat_release_ratio": [0.90, 0.93, 0.96, 0.96],
            "exhaust_ratio": 0.40,
            "fuel_lhv_j_kg": 43.0e6,
            "max_power_w": 110.0e3, "max_torque_nm": 220.0,
            "max_speed_rad_s": 500.0, "min_speed_rad_s": 90.0,
            "thermal_mass_kg": 100.0, "specific_heat_j_kgk": 500.0,
            "conv_coeff_w_m2k": 10.0, "conv_area_m2": 2.0,
            "radiator_base_w_k": 5.0,
            "radiator_coolant_w_k_per_kg_s": 300.0,
            "radiator_air_w_k_per_kg_s": 110.0,
            "coolant_flow_kg_s": 0.30, "intake_air_flow_kg_s": 0.50,
            "cabin_heat_coeff_w_k": 80.0,
            "compartment_tau_s": 150.0, "compartment_engine_mix": 0.4,
        },
        "mg1": {
            "efficiency_speed_rad_s": mg_speeds,
            "efficiency_torque_nm": mg1_torques,
            "efficiency": _mg_eff_rows(mg_speeds, mg1_torques, 170.0),
            "max_power_w": 40.0e3, "max_torque_nm": 170.0,
            "max_speed_rad_s": 1100.0,
        },
        "mg2": {
            "efficiency_speed_rad_s": mg_speeds,
            "efficiency_torque_nm": mg2_torques,
            "efficiency": _mg_eff_rows(mg_speeds, mg2_torques, 207.0),
            "max_power_w": 60.0e3, "max_torque_nm": 207.0,
            "max_speed_rad_s": 1450.0,
        },
        "battery": {
            "ocv_soc": [0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0],
            "ocv_v": [1.08, 1.13, 1.17, 1.20, 1.23, 1.26, 1.29, 1.32, 1.35,
                      1.39, 1.44],
            "resistance_soc": [0.0, 0.5, 1.0],
            "resistance_temp_c": [-20.0, 0.0, 20.0, 40.0, 60.0],
            "resistance_ohm": [
                [0.0056, 0.0042, 0.0028, 0.0025, 0.0024],
                [0.0044, 0.0033, 0.0022, 0.0020, 0.0019],
                [0.0048, 0.0036, 0.0024, 0.0022, 0.0021],
            ],
            "nominal_capacity_ah": 6.5, "nominal_voltage_v": 1.2,
            "cell_count": 168.0,
            "thermal_mass_kg": 45.0, "specific_heat_j_kgk": 800.0,
            "cooling_base_w_k": 1.0, "cooling_flow_w_k_per_kg_s": 300.0,
            "fan_airflow_duty": [0.0, 0.5, 1.0],
            "fan_airflow_speed_m_s": [0.0, 10.0, 20.0, 30.0, 40.0],
            "fan_airflow_kg_s": [
                [0.000, 0.008, 0.016, 0.024, 0.032],
                [0.030, 0.038, 0.046, 0.054, 0.062],
                [0.060, 0.068, 0.076, 0.084, 0.092],
            ],
            "pump_power_w": 25.0, "fan_power_max_w": 150.0,
            "blower_coeff_w_per_w": 0.03, "blower_max_w": 200.0,
            "max_charge_power_w_cell": 150.0,
        },
        "cabin": {
            "thermal_mass_kg": 5.0, "specific_heat_j_kgk": 1000.0,
            "extra_capacity_j_k": 55.0e3,
            "glass_transmission": 0.5, "solar_intensity_w_m2": 500.0,
            "incidence_factor": 0.8,
            "window_area_m2": 2.6, "roof_area_m2": 2.0,
            "bottom_area_m2": 2.0, "side_area_m2": 3.0,
            "bottom_conv_w_m2k": 8.0, "side_conv_w_m2k": 8.0,
            "window_conv_w_m2k": 10.0, "roof_conv_w_m2k": 8.0,
            "window_capacity_j_k": 8400.0, "window_ambient_conv_w_m2k": 25.0,
            "window_absorptivity": 0.10,
            "roof_capacity_j_k": 12000.0, "roof_ambient_conv_w_m2k": 20.0,
            "roof_absorptivity": 0.60,
            "hvac_min_w": -6000.0, "hvac_max_w": 6000.0,
            "cop_cooling": 2.5, "cop_heating": 2.2,
        },
    }


def models_from_config(cfg: ConfigDict) -> PlantModels:
    """Build the full model bundle from a parsed config dict."""
    veh = VehicleParams(**{f.name: float(cfg["vehicle"][f.name])
                           for f in fields(VehicleParams)})
    e = cfg["engine"]
    engine = EngineModel(
        fuel_map=Table2D(e["fuel_map_speed_rad_s"], e["fuel_map_torque_nm"],
                         e["fuel_map_kg_s"], "engine.fuel_map"),
        cold_fuel_factor=Table1D(e["cold_fuel_temp_c"], e["cold_fuel_factor"],
                                 "engine.cold_fuel_factor"),
        heat_release_ratio=Table1D(e["heat_release_temp_c"],
                                   e["heat_release_ratio"],
                                   "engine.heat_release_ratio"),
        exhaust_ratio=float(e["exhaust_ratio"]),
        fuel_lhv_j_kg=float(e["fuel_lhv_j_kg"]),
        max_power_w=float(e["max_power_w"]),
        max_torque_nm=float(e["max_torque_nm"]),
        max_speed_rad_s=float(e["max_speed_rad_s"]),
        min_speed_rad_s=float(e["min_speed_rad_s"]),
        thermal_mass_kg=float(e["thermal_mass_kg"]),
        specific_heat_j_kgk=float(e["specific_heat_j_kgk"]),
        conv_coeff_w_m2k=float(e["conv_coeff_w_m2k"]),
        conv_area_m2=float(e["conv_area_m2"]),
        radiator_base_w_k=float(e["radiator_base_w_k"]),
        radiator_coolant_w_k_per_kg_s=float(e["radiator_coolant_w_k_per_kg_s"]),
        radiator_air_w_k_per_kg_s=float(e["radiator_air_w_k_per_kg_s"]),
        coolant_flow_kg_s=float(e["coolant_flow_kg_s"]),
        intake_air_flow_kg_s=float(e["intake_air_flow_kg_s"]),
        cabin_heat_coeff_w_k=float(e["cabin_heat_coeff_w_k"]),
        compartment_tau_s=float(e["compartment_tau_s"]),
        compartment_engine_mix=float(e["compartment_engine_mix"]),
    )
    mgs = []
    for name in ("mg1", "mg2"):
        m = cfg[name]
        mgs.append(MgModel(
            efficiency_map=Table2D(m["efficiency_speed_rad_s"],
                                   m["efficiency_torque_nm"], m["efficiency"],
                                   f"{name}.efficiency"),
            max_power_w=float(m["max_power_w"]),
            max_torque_nm=float(m["max_torque_nm"]),
            max_speed_rad_s=float(m["max_speed_rad_s"]),
            name=name,
        ))
    b = cfg["battery"]
    battery = BatteryModel(
        ocv_v=Table1D(b["ocv_soc"], b["ocv_v"], "battery.ocv"),
        resistance_ohm=Table2D(b["resistance_soc"], b["resistance_temp_c"],
                               b["resistance_ohm"], "battery.resistance"),
        nominal_capacity_ah=float(b["nominal_capacity_ah"]),
        nominal_voltage_v=float(b["nominal_voltage_v"]),
        cell_count=int(b["cell_count"]),
        thermal_mass_kg=float(b["thermal_mass_kg"]),
        specific_heat_j_kgk=float(b["specific_heat_j_kgk"]),
        cooling_base_w_k=float(b["cooling_base_w_k"]),
        cooling_flow_w_k_per_kg_s=float(b["cooling_flow_w_k_per_kg_s"]),
        fan_airflow=Table2D(b["fan_airflow_duty"], b["fan_airflow_speed_m_s"],
                            b["fan_airflow_kg_s"], "battery.fan_airflow"),
        pump_power_w=float(b["pump_power_w"]),
        fan_power_max_w=float(b["fan_power_max_w"]),
        blower_coeff_w_per_w=float(b["blower_coeff_w_per_w"]),
        blower_max_w=float(b["blower_max_w"]),
        max_charge_power_w_cell=float(b["max_charge_power_w_cell"]),
    )
    c = cfg["cabin"]
    cabin = CabinModel(**{k: float(v) for k, v in c.items()})
    return PlantModels(veh, engine, mgs[0], mgs[1], battery, cabin)


def default_models() -> PlantModels:
    return models_from_config(default_config())


# ---------------------------------------------------------------------------
# Operations
# ---------------------------------------------------------------------------


def road_load_force(sample: DriveSample, env: EnvConditions,
                    veh: VehicleParams) -> float:
    """Demanded traction force (N) for one cycle point."""
    theta = env.road_grade_rad
    v = sample.speed_m_s
    return (veh.mass_kg * veh.gravity_m_s2
            * (veh.rolling_coeff * math.cos(theta) + math.sin(theta))
            + 0.5 * veh.air_density_kg_m3 * veh.drag_coeff
            * veh.frontal_area_m2 * v * v
            + veh.mass_kg * sample.accel_m_s2)


def wheel_to_powersplit(force_n: float, speed_m_s: float,
                        veh: VehicleParams) -> tuple[float, float]:
    """Torque and speed demanded at the power-split output.

    Driveline efficiency divides when driving and multiplies when
    regenerating; sign(0) is taken as +1.
    """
    eff = veh.final_drive_eff * veh.wheel_eff
    if force_n >= 0.0:
        torque = force_n * veh.tire_radius_m / (veh.final_drive_ratio * eff)
    else:
        torque = force_n * veh.tire_radius_m * eff / veh.final_drive_ratio
    omega = speed_m_s * veh.final_drive_ratio / veh.tire_radius_m
    return torque, omega


def powersplit_kinematics(engine_torque_nm: float, engine_speed_rad_s: float,
                          ps_torque_nm: float, ps_speed_rad_s: float,
                          veh: VehicleParams,
                          check_limits: PlantModels | None = None,
                          ) -> tuple[float, float, float, float]:
    """Quasi-static planetary-gear relations: MG1/MG2 torque and speed.

    With ``check_limits`` set, raises :class:`ConstraintViolation` when any
    resulting MG torque or speed exceeds its machine limits (reported, not
    clamped).
    """
    r1 = veh.pg1_ratio
    r2 = veh.pg2_ratio
    t_mg1 = -engine_torque_nm / (r1 + 1.0)
    w_mg1 = (r1 + 1.0) * engine_speed_rad_s - r1 * ps_speed_rad_s
    w_mg2 = r2 * ps_speed_rad_s
    t_mg2 = (ps_torque_nm - r1 * engine_torque_nm / (r1 + 1.0)) / r2
    if check_limits is not None:
        for name, t, w, mg in (("mg1", t_mg1, w_mg1, check_limits.mg1),
                               ("mg2", t_mg2, w_mg2, check_limits.mg2)):
            if abs(t) > mg.max_torque_nm:
                raise ConstraintViolation(f"{name} torque limit exceeded",
                                          f"{name}_torque_nm", t, mg.max_torque_nm)
            if abs(w) > mg.max_speed_rad_s:
                raise ConstraintViolation(f"{name} speed limit exceeded",
                                          f"{name}_speed_rad_s", w, mg.max_speed_rad_s)
            if abs(w * t) > mg.max_power_w:
                raise ConstraintViolation(f"{name} power limit exceeded",
                                          f"{name}_power_w", w * t, mg.max_power_w)
    return t_mg1, w_mg1, t_mg2, w_mg2


def engine_fuel_rate(engine_speed_rad_s: float, engine_torque_nm: float,
                     temp_engine_c: float, eng: EngineModel) -> float:
    """Instantaneous fuel rate (kg/s) including the cold-engine factor."""
    w, t = engine_speed_rad_s, engine_torque_nm
    if w < 0.0 or w > eng.max_speed_rad_s:
        raise OutOfEnvelope("engine speed outside envelope",
                            "engine_speed_rad_s", w, eng.max_speed_rad_s)
    if 0.0 < w < eng.min_speed_rad_s:
        raise OutOfEnvelope("engine cannot run below idle speed",
                            "engine_speed_rad_s", w, eng.min_speed_rad_s)
    if t < 0.0 or t > eng.max_torque_nm:
        raise OutOfEnvelope("engine torque outside envelope",
                            "engine_torque_nm", t, eng.max_torque_nm)
    if w * t > eng.max_power_w * (1.0 + 1e-9):
        raise OutOfEnvelope("engine power outside envelope",
                            "engine_power_w", w * t, eng.max_power_w)
    if w == 0.0 and t > 0.0:
        raise OutOfEnvelope("engine cannot deliver torque at zero speed",
                            "engine_torque_nm", t, 0.0)
    return eng.cold_fuel_factor(temp_engine_c) * eng.fuel_map(w, t)


def engine_thermal_rate(state: PlantState, u: ControlInput, fuel_rate_kg_s: float,
                        env: EnvConditions, eng: EngineModel,
                        ) -> tuple[float, float, float]:
    """Engine and compartment temperature rates plus cabin heater draw (W).

    The heater draw is the engine-waste-heat share of a positive HVAC
    command, limited by the coolant-to-cabin heat exchanger capacity.
    """
    p_e = u.engine_speed_rad_s * u.engine_torque_nm
    q_f = eng.heat_release_ratio(state.temp_engine_c) * fuel_rate_kg_s * eng.fuel_lhv_j_kg
    q_exh = eng.exhaust_ratio * (q_f - p_e)
    q_air = eng.conv_coeff_w_m2k * eng.conv_area_m2 * (
        state.temp_engine_c - state.temp_compartment_c)
    q_cl = eng.radiator_heat_w(state.temp_engine_c, env.ambient_c)
    q_heat = 0.0
    if u.hvac_heat_w > 0.0:
        q_heat = min(u.hvac_heat_w,
                     max(0.0, eng.cabin_heat_coeff_w_k
                         * (state.temp_engine_c - state.temp_cabin_c)))
    dte = (q_f - p_e - q_exh - q_air - q_cl - q_heat) / (
        eng.thermal_mass_kg * eng.specific_heat_j_kgk)
    mix = (eng.compartment_engine_mix * state.temp_engine_c
           + (1.0 - eng.compartment_engine_mix) * env.ambient_c)
    dtcom = (mix - state.temp_compartment_c) / eng.compartment_tau_s
    return dte, dtcom, q_heat


def mg_electric_power(speed_rad_s: float, torque_nm: float, mg: MgModel) -> float:
    """DC-side electrical power (W) of one machine; sign(0) taken as +1."""
    if abs(torque_nm) > mg.max_torque_nm:
        raise ConstraintViolation(f"{mg.name} torque limit exceeded",
                                  f"{mg.name}_torque_nm", torque_nm, mg.max_torque_nm)
    if abs(speed_rad_s) > mg.max_speed_rad_s:
        raise ConstraintViolation(f"{mg.name} speed limit exceeded",
                                  f"{mg.name}_speed_rad_s", speed_rad_s,
                                  mg.max_speed_rad_s)
    p_mech = speed_rad_s * torque_nm
    if abs(p_mech) > mg.max_power_w:
        raise ConstraintViolation(f"{mg.name} power limit exceeded",
                                  f"{mg.name}_power_w", p_mech, mg.max_power_w)
    eff = mg.efficiency_map(abs(speed_rad_s), abs(torque_nm))
    return p_mech / eff if p_mech >= 0.0 else p_mech * eff


def battery_electrical_step(pack_power_w: float, soc: float,
                            temp_battery_c: float, bat: BatteryModel,
                            ) -> tuple[float, float, float, float]:
    """Cell current, terminal voltage, SOC rate (1/s), and heat generation (W).

    Current solves the terminal-power quadratic; the discharge branch (smaller
    root) is taken so the open-circuit limit ``i -> 0`` as power ``-> 0``.
    """
    p_cell = pack_power_w / bat.cell_count
    u_oc = bat.ocv_v(soc)
    r0 = bat.resistance_ohm(soc, temp_battery_c)
    disc = u_oc * u_oc - 4.0 * r0 * p_cell
    if disc < 0.0:
        raise PowerInfeasible(
            "battery cannot deliver requested power",
            requested_w=pack_power_w,
            max_feasible_w=u_oc * u_oc / (4.0 * r0) * bat.cell_count)
    i = (u_oc - math.sqrt(disc)) / (2.0 * r0)
    u = u_oc - i * r0
    soc_rate = -i / (3600.0 * bat.nominal_capacity_ah)
    q_gen = i * i * r0 * bat.cell_count
    return i, u, soc_rate, q_gen


def battery_thermal_rate(q_gen_w: float, temp_battery_c: float,
                         temp_cabin_c: float, fan_duty: float,
                         speed_m_s: float, bat: BatteryModel) -> float:
    """Battery temperature rate (K/s) under cabin-air cooling."""
    if not 0.0 <= fan_duty <= 1.0:
        raise ConstraintViolation("fan duty outside [0, 1]", "fan_duty",
                                  fan_duty, 1.0)
    airflow = bat.fan_airflow(fan_duty, speed_m_s)
    q_cool = (temp_battery_c - temp_cabin_c) * (
        bat.cooling_base_w_k + bat.cooling_flow_w_k_per_kg_s * airflow)
    return (q_gen_w - q_cool) / (bat.thermal_mass_kg * bat.specific_heat_j_kgk)


def cabin_thermal_rate(state: PlantState, hvac_heat_w: float, q_heat_w: float,
                       env: EnvConditions, cab: CabinModel,
                       ) -> tuple[float, float, float]:
    """Cabin air, roof, and window temperature rates (K/s).

    ``hvac_heat_w`` is the electrically supplied HVAC heat flow and
    ``q_heat_w`` the engine-waste-heat share; their sum is the total heat
    delivered to the cabin air.
    """
    total = hvac_heat_w + q_heat_w
    if not cab.hvac_min_w - 1e-9 <= total <= cab.hvac_max_w + 1e-9:
        raise ConstraintViolation("hvac heat outside limits", "hvac_heat_w",
                                  total, cab.hvac_max_w)
    intensity = env.solar_w_m2
    incidence = env.solar_incidence
    q_sun = cab.glass_transmission * intensity * incidence * cab.window_area_m2
    q_trans = (cab.bottom_conv_w_m2k * cab.bottom_area_m2
               + cab.side_conv_w_m2k * cab.side_area_m2) * (
        env.ambient_c - state.temp_cabin_c)
    q_c2w = cab.window_conv_w_m2k * cab.window_area_m2 * (
        state.temp_cabin_c - state.temp_window_c)
    q_c2r = cab.roof_conv_w_m2k * cab.roof_area_m2 * (
        state.temp_cabin_c - state.temp_roof_c)
    dtc = (total + q_sun + q_trans - q_c2w - q_c2r) / cab.air_capacity_j_k
    dtr = (q_c2r + cab.roof_absorptivity * intensity * cab.roof_area_m2
           + cab.roof_ambient_conv_w_m2k * cab.roof_area_m2
           * (env.ambient_c - state.temp_roof_c)) / cab.roof_capacity_j_k
    dtw = (q_c2w + cab.window_absorptivity * intensity * cab.window_area_m2
           + cab.window_ambient_conv_w_m2k * cab.window_area_m2
           * (env.ambient_c - state.temp_window_c)) / cab.window_capacity_j_k
    return dtc, dtr, dtw


# ---------------------------------------------------------------------------
# One integrated step
# ---------------------------------------------------------------------------

@dataclass(frozen=True, slots=True)
class StepDiagnostics:
    """Every intermediate power/heat flow of one plant step (first substep)."""
    force_n: float
    ps_torque_nm: float
    ps_speed_rad_s: float
    mg1_torque_nm: float
    mg1_speed_rad_s: float
    mg2_torque_nm: float
    mg2_speed_rad_s: float
    mg1_dc_w: float
    mg2_dc_w: float
    friction_brake_w: float
    pump_w: float
    fan_w: float
    blower_w: float
    hvac_elec_w: float
    pack_w: float
    cell_w: float
    cell_current_a: float
    cell_voltage_v: float
    q_gen_w: float
    q_cool_w: float
    fuel_rate_kg_s: float
    q_fuel_w: float
    q_exh_w: float
    q_air_w: float
    q_cl_w: float
    q_heat_w: float
    q_hvac_w: float
    q_sun_w: float
    q_trans_w: float
    q_conv_w: float


DIAG_FIELDS = tuple(f.name for f in fields(StepDiagnostics))

# violation channels reported by soft-mode stepping, in fixed order
VIOLATION_CHANNELS = (
    "engine_speed", "engine_idle_band", "engine_torque", "engine_power",
    "mg1_torque", "mg1_speed", "mg1_power",
    "mg2_torque", "mg2_speed", "mg2_power",
    "battery_power", "fan_duty", "hvac", "soc_range",
)


def demand_core(u_speed: float, u_torque: float, u_fan: float, u_hvac: float,
                v: float, a: float, theta: float, models: PlantModels):
    """State-independent part of one step over plain floats (hot path).

    Returns ``(demand_tuple, viol_tuple)`` where the violation tuple follows
    :data:`VIOLATION_CHANNELS` (the trailing battery/soc channels are filled
    by the integration). Regenerative torque beyond what MG2 can absorb is
    blended to friction braking (recorded, not an error).
    """
    veh = models.vehicle
    eng = models.engine
    cab = models.cabin
    bat = models.battery
    mg1 = models.mg1
    mg2 = models.mg2

    force = (veh.mass_kg * veh.gravity_m_s2
             * (veh.rolling_coeff * math.cos(theta) + math.sin(theta))
             + 0.5 * veh.air_density_kg_m3 * veh.drag_coeff
             * veh.frontal_area_m2 * v * v
             + veh.mass_kg * a)
    eff = veh.final_drive_eff * veh.wheel_eff
    if force >= 0.0:
        t_ps = force * veh.tire_radius_m / (veh.final_drive_ratio * eff)
    else:
        t_ps = force * veh.tire_radius_m * eff / veh.final_drive_ratio
    w_ps = v * veh.final_drive_ratio / veh.tire_radius_m
    r1 = veh.pg1_ratio
    t_mg1 = -u_torque / (r1 + 1.0)
    w_mg1 = (r1 + 1.0) * u_speed - r1 * w_ps
    w_mg2 = veh.pg2_ratio * w_ps
    t_mg2 = (t_ps - r1 * u_torque / (r1 + 1.0)) / veh.pg2_ratio

    v_eng_speed = max(0.0, -u_speed, u_speed - eng.max_speed_rad_s) / eng.max_speed_rad_s
    # the band (0, idle) is not a valid operating point
    if eng.min_speed_rad_s > 0.0:
        v_idle_band = max(0.0, min(u_speed, eng.min_speed_rad_s - u_speed)) \
            / eng.min_speed_rad_s
    else:
        v_idle_band = 0.0
    v_eng_torque = max(0.0, -u_torque, u_torque - eng.max_torque_nm) / eng.max_torque_nm
    v_eng_power = max(0.0, u_speed * u_torque - eng.max_power_w) / eng.max_power_w
    v_fan = max(0.0, -u_fan, u_fan - 1.0)
    v_hvac = max(0.0, cab.hvac_min_w - u_hvac,
                 u_hvac - cab.hvac_max_w) / cab.hvac_max_w

    friction_w = 0.0
    # friction-brake blending: cap regenerative MG2 torque at its limit
    if t_mg2 < -mg2.max_torque_nm:
        friction_w += (-t_mg2 - mg2.max_torque_nm) * abs(w_mg2)
        t_mg2 = -mg2.max_torque_nm
    # and at its power limit on the regenerating side
    if w_mg2 * t_mg2 < -mg2.max_power_w and w_mg2 > 0.0:
        t_cap = -mg2.max_power_w / w_mg2
        friction_w += (t_cap - t_mg2) * w_mg2
        t_mg2 = t_cap

    v_mg1_t = max(0.0, abs(t_mg1) - mg1.max_torque_nm) / mg1.max_torque_nm
    v_mg1_w = max(0.0, abs(w_mg1) - mg1.max_speed_rad_s) / mg1.max_speed_rad_s
    v_mg1_p = max(0.0, abs(w_mg1 * t_mg1) - mg1.max_power_w) / mg1.max_power_w
    v_mg2_t = max(0.0, abs(t_mg2) - mg2.max_torque_nm) / mg2.max_torque_nm
    v_mg2_w = max(0.0, abs(w_mg2) - mg2.max_speed_rad_s) / mg2.max_speed_rad_s
    v_mg2_p = max(0.0, abs(w_mg2 * t_mg2) - mg2.max_power_w) / mg2.max_power_w

    p_mech1 = w_mg1 * t_mg1
    eff1 = mg1.efficiency_map(abs(w_mg1), abs(t_mg1))
    p_mg1 = p_mech1 / eff1 if p_mech1 >= 0.0 else p_mech1 * eff1
    p_mech2 = w_mg2 * t_mg2
    eff2 = mg2.efficiency_map(abs(w_mg2), abs(t_mg2))
    p_mg2 = p_mech2 / eff2 if p_mech2 >= 0.0 else p_mech2 * eff2

    w_map = min(max(u_speed, 0.0), eng.max_speed_rad_s)
    t_map = min(max(u_torque, 0.0), eng.max_torque_nm)
    base_fuel = eng.fuel_map(w_map, t_map)
    p_e = u_speed * u_torque
    fan_duty = min(max(u_fan, 0.0), 1.0)
    hvac_cmd = min(max(u_hvac, cab.hvac_min_w), cab.hvac_max_w)
    airflow = bat.fan_airflow(fan_duty, v)
    cool_coeff = bat.cooling_base_w_k + bat.cooling_flow_w_k_per_kg_s * airflow
    # coolant pump runs with the engine
    p_pump = bat.pump_power_w if u_speed > 0.0 else 0.0
    p_fan = bat.fan_power_max_w * fan_duty ** 3
    p_bl = min(bat.blower_coeff_w_per_w * abs(hvac_cmd), bat.blower_max_w)
    p_base = p_mg1 + p_mg2 + p_pump + p_fan + p_bl

    demand = (base_fuel, p_e, p_base, hvac_cmd, cool_coeff, friction_w,
              force, t_ps, w_ps, t_mg1, w_mg1, t_mg2, w_mg2, p_mg1, p_mg2,
              p_pump, p_fan, p_bl,
              v_eng_speed + v_idle_band + v_eng_torque + v_eng_power + v_fan
              + v_hvac + v_mg1_t + v_mg1_w + v_mg1_p + v_mg2_t + v_mg2_w
              + v_mg2_p)
    viols = (v_eng_speed, v_idle_band, v_eng_torque, v_eng_power, v_mg1_t,
             v_mg1_w, v_mg1_p, v_mg2_t, v_mg2_w, v_mg2_p, v_fan, v_hvac)
    return demand, viols


def plant_step(state: PlantState, u: ControlInput, sample: DriveSample,
               env: EnvConditions, models: PlantModels, dt_s: float,
               substeps: int = 1,
               ) -> tuple[PlantState, float, StepDiagnostics]:
    """Integrate all seven states over one control interval (strict mode).

    Deterministic: identical inputs yield bit-identical outputs. Raises
    :class:`ConstraintViolation` / :class:`PowerInfeasible` with the offending
    quantity instead of clamping.
    """
    next_state, fuel, diag, _ = _step_core(state, u, sample, env, models,
                                           dt_s, substeps, strict=True,
                                           want_diag=True)
    next_state.validate()
    return next_state, fuel, diag


def plant_step_soft(state: PlantState, u: ControlInput, sample: DriveSample,
                    env: EnvConditions, models: PlantModels, dt_s: float,
                    substeps: int = 1, want_diag: bool = False,
                    ) -> tuple[PlantState, float, StepDiagnostics | None, dict]:
    """Non-raising variant for optimizer rollouts and closed-loop logging.

    Limit breaches are returned as normalized violation magnitudes instead of
    exceptions; infeasible battery power is capped at the feasibility boundary
    with the shortfall recorded under ``battery_power``.
    """
    return _step_core(state, u, sample, env, models, dt_s, substeps,
                      strict=False, want_diag=want_diag)


def step_consts(models: PlantModels, env: EnvConditions) -> tuple:
    """Control- and state-independent constants of one (models, env) pair.

    Built once per trip/rollout and threaded through :func:`advance`; keeping
    this a flat tuple makes the hot loop a single unpack.
    """
    eng, bat, cab = models.engine, models.battery, models.cabin
    rad_coeff = (eng.radiator_base_w_k
                 + eng.radiator_coolant_w_k_per_kg_s * eng.coolant_flow_kg_s
                 + eng.radiator_air_w_k_per_kg_s * eng.intake_air_flow_kg_s)
    return (
        rad_coeff,
        eng.conv_coeff_w_m2k * eng.conv_area_m2,
        eng.thermal_mass_kg * eng.specific_heat_j_kgk,
        bat.thermal_mass_kg * bat.specific_heat_j_kgk,
        cab.air_capacity_j_k,
        cab.glass_transmission * env.solar_w_m2 * env.solar_incidence * cab.window_area_m2,
        cab.bottom_conv_w_m2k * cab.bottom_area_m2 + cab.side_conv_w_m2k * cab.side_area_m2,
        cab.window_conv_w_m2k * cab.window_area_m2,
        cab.roof_conv_w_m2k * cab.roof_area_m2,
        cab.roof_absorptivity * env.solar_w_m2 * cab.roof_area_m2,
        cab.roof_ambient_conv_w_m2k * cab.roof_area_m2,
        cab.roof_capacity_j_k,
        cab.window_absorptivity * env.solar_w_m2 * cab.window_area_m2,
        cab.window_ambient_conv_w_m2k * cab.window_area_m2,
        cab.window_capacity_j_k,
        eng.compartment_engine_mix,
        eng.compartment_tau_s,
        env.ambient_c,
        float(bat.cell_count),
        3600.0 * bat.nominal_capacity_ah,
        eng.cabin_heat_coeff_w_k,
        -bat.max_charge_power_w_cell,
        cab.cop_heating,
        cab.cop_cooling,
        bat.ocv_v,
        bat.resistance_ohm,
        eng.cold_fuel_factor,
        eng.heat_release_ratio,
        eng.exhaust_ratio,
        eng.fuel_lhv_j_kg,
    )


def compute_demand(u: ControlInput, sample: DriveSample, env: EnvConditions,
                   models: PlantModels, strict: bool = False):
    """State-independent quantities of one step, bundled for :func:`advance`.

    Returns ``(demand_tuple, violations_dict)``; the tuple's last element is
    the summed normalized control/demand violation so rollouts can penalize
    it without touching the dict. In strict mode any nonzero violation raises
    :class:`ConstraintViolation` with the offending channel.
    """
    demand, viols = demand_core(u.engine_speed_rad_s, u.engine_torque_nm,
                                u.fan_duty, u.hvac_heat_w, sample.speed_m_s,
                                sample.accel_m_s2, env.road_grade_rad, models)
    viol = dict.fromkeys(VIOLATION_CHANNELS, 0.0)
    for name, value in zip(("engine_speed", "engine_idle_band",
                            "engine_torque", "engine_power",
                            "mg1_torque", "mg1_speed", "mg1_power",
                            "mg2_torque", "mg2_speed", "mg2_power",
                            "fan_duty", "hvac"), viols):
        viol[name] = value
        if strict and value > 1e-12:
            raise ConstraintViolation(f"{name} limit exceeded", name,
                                      value, 0.0)
    return demand, viol


def advance(state7: tuple, demand: tuple, consts: tuple, h: float,
            substeps: int, strict: bool = False, want_flows: bool = False):
    """Integrate the seven states over ``substeps`` Euler substeps of ``h``.

    The single source of truth for the plant dynamics; both
    :func:`plant_step` and the optimizer rollouts route through here.
    Returns ``(state7, fuel_kg, battery_violation, flows_or_None,
    friction_extra_w)``.
    """
    (rad_coeff, conv_ea, me_ce, mb_cb, cab_cap, q_sun, trans_coeff, hwa, hra,
     roof_sun, roof_amb, roof_cap, win_sun, win_amb, win_cap, mix_e, tau_com,
     t_amb, n_cells, q_nom3600, heater_k, chg_floor, cop_heat, cop_cool,
     ocv, res, delta_f, delta_h, exh, lhv) = consts
    (base_fuel, p_e, p_base, hvac_cmd, cool_coeff, _friction_w,
     *_rest) = demand

    soc, tb, tc, tr, tw, te, tcom = state7
    fuel_kg = 0.0
    flows = None
    battery_viol = 0.0
    friction_extra = 0.0

    for k in range(substeps):
        fuel_rate = delta_f(te) * base_fuel
        q_f = delta_h(te) * fuel_rate * lhv
        q_exh = exh * (q_f - p_e)
        q_air = conv_ea * (te - tcom)
        q_cl = rad_coeff * (te - t_amb)
        if hvac_cmd > 0.0:
            avail = heater_k * (te - tc)
            q_heat = hvac_cmd if avail > hvac_cmd else (avail if avail > 0.0 else 0.0)
            hvac_elec_deliver = hvac_cmd - q_heat
            p_hvac = hvac_elec_deliver / cop_heat
        else:
            q_heat = 0.0
            hvac_elec_deliver = hvac_cmd
            p_hvac = -hvac_cmd / cop_cool

        p_pack = p_base + p_hvac
        p_cell = p_pack / n_cells
        u_oc = ocv(soc if 0.0 <= soc <= 1.0 else (0.0 if soc < 0.0 else 1.0))
        r0 = res(soc, tb)
        if p_cell < chg_floor:
            # charge-power cap: excess regen goes to the friction brake
            if k == 0:
                friction_extra = (chg_floor - p_cell) * n_cells
            p_cell = chg_floor
            p_pack = p_cell * n_cells
        disc = u_oc * u_oc - 4.0 * r0 * p_cell
        if disc < 0.0:
            if strict:
                raise PowerInfeasible(
                    "battery cannot deliver requested power",
                    requested_w=p_pack,
                    max_feasible_w=u_oc * u_oc / (4.0 * r0) * n_cells)
            shortfall = -disc / (u_oc * u_oc)
            if shortfall > battery_viol:
                battery_viol = shortfall
            disc = 0.0
        i = (u_oc - math.sqrt(disc)) / (2.0 * r0)
        q_gen = i * i * r0 * n_cells

        q_cool = (tb - tc) * cool_coeff
        q_trans = trans_coeff * (t_amb - tc)
        q_c2w = hwa * (tc - tw)
        q_c2r = hra * (tc - tr)

        if want_flows and k == 0:
            flows = (p_hvac, p_pack, p_cell, i, u_oc - i * r0, q_gen, q_cool,
                     fuel_rate, q_f, q_exh, q_air, q_cl, q_heat,
                     hvac_elec_deliver + q_heat, q_sun, q_trans,
                     -q_c2w - q_c2r)

        dtcom = (mix_e * te + (1.0 - mix_e) * t_amb - tcom) / tau_com
        soc += h * (-i / q_nom3600)
        tb += h * (q_gen - q_cool) / mb_cb
        tc += h * (hvac_elec_deliver + q_heat + q_sun + q_trans - q_c2w - q_c2r) / cab_cap
        tr += h * (q_c2r + roof_sun + roof_amb * (t_amb - tr)) / roof_cap
        tw += h * (q_c2w + win_sun + win_amb * (t_amb - tw)) / win_cap
        te += h * (q_f - p_e - q_exh - q_air - q_cl - q_heat) / me_ce
        tcom += h * dtcom
        fuel_kg += h * fuel_rate

    return (soc, tb, tc, tr, tw, te, tcom), fuel_kg, battery_viol, flows, friction_extra


def _step_core(state, u, sample, env, models, dt_s, substeps, strict, want_diag):
    if not 0.0 < dt_s <= 1.0:
        raise ConstraintViolation("dt must be in (0, 1] s", "dt_s", dt_s, 1.0)
    demand, viol = compute_demand(u, sample, env, models, strict)
    consts = step_consts(models, env)
    state7, fuel_kg, battery_viol, flows, friction_extra = advance(
        state.as_tuple(), demand, consts, dt_s / substeps, substeps,
        strict=strict, want_flows=want_diag)

    soc = state7[0]
    soc_viol = -soc if soc < 0.0 else (soc - 1.0 if soc > 1.0 else 0.0)
    viol["battery_power"] = battery_viol
    viol["soc_range"] = soc_viol

    first = None
    if want_diag:
        (base_fuel, p_e, p_base, hvac_cmd, cool_coeff, friction_w,
         force, t_ps, w_ps, t_mg1, w_mg1, t_mg2, w_mg2, p_mg1, p_mg2,
         p_pump, p_fan, p_bl, _vt) = demand
        (p_hvac, p_pack, p_cell, i, u_term, q_gen, q_cool, fuel_rate, q_f,
         q_exh, q_air, q_cl, q_heat, q_hvac, q_sun, q_trans, q_conv) = flows
        first = StepDiagnostics(
            force_n=force, ps_torque_nm=t_ps, ps_speed_rad_s=w_ps,
            mg1_torque_nm=t_mg1, mg1_speed_rad_s=w_mg1,
            mg2_torque_nm=t_mg2, mg2_speed_rad_s=w_mg2,
            mg1_dc_w=p_mg1, mg2_dc_w=p_mg2,
            friction_brake_w=friction_w + friction_extra,
            pump_w=p_pump, fan_w=p_fan, blower_w=p_bl, hvac_elec_w=p_hvac,
            pack_w=p_pack, cell_w=p_cell, cell_current_a=i,
            cell_voltage_v=u_term, q_gen_w=q_gen, q_cool_w=q_cool,
            fuel_rate_kg_s=fuel_rate, q_fuel_w=q_f, q_exh_w=q_exh,
            q_air_w=q_air, q_cl_w=q_cl, q_heat_w=q_heat, q_hvac_w=q_hvac,
            q_sun_w=q_sun, q_trans_w=q_trans, q_conv_w=q_conv)

    next_state = PlantState(*state7)
    if strict and soc_viol > 0.0:
        raise ConstraintViolation("soc left [0, 1] during step", "soc", soc, 1.0)
    return next_state, fuel_kg, first, viol
