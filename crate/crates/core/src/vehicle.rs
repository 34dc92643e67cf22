//! Longitudinal battery-electric-vehicle plant: motor torque to traction
//! force to speed, battery state of charge, and the PI speed controller used
//! for both drive-cycle following and cruise.
//!
//! The force model is the standard point-mass longitudinal model; the
//! integrator is fixed-step semi-implicit Euler. Both are part of the output
//! contract: identical inputs produce bit-identical states.

use serde::Deserialize;
use thiserror::Error;

pub const GRAVITY: f64 = 9.81;

/// Physical constants of the plant. Defaults approximate a mid-size BEV
/// from public specifications.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VehicleParams {
    pub mass_kg: f64,
    pub drag_coeff: f64,
    pub frontal_area_m2: f64,
    pub air_density_kgpm3: f64,
    pub rolling_coeff: f64,
    pub wheel_radius_m: f64,
    pub gear_ratio: f64,
    /// Driveline efficiency in (0, 1]: applied to traction when driving,
    /// inverted when braking/regenerating.
    pub driveline_efficiency: f64,
    pub motor_torque_min_nm: f64,
    pub motor_torque_max_nm: f64,
    pub battery_capacity_kwh: f64,
    pub road_grade_rad: f64,
}

impl Default for VehicleParams {
    fn default() -> Self {
        VehicleParams {
            mass_kg: 1847.0,
            drag_coeff: 0.23,
            frontal_area_m2: 2.22,
            air_density_kgpm3: 1.225,
            rolling_coeff: 0.01,
            wheel_radius_m: 0.334,
            gear_ratio: 9.0,
            driveline_efficiency: 0.95,
            motor_torque_min_nm: -250.0,
            motor_torque_max_nm: 250.0,
            battery_capacity_kwh: 75.0,
            road_grade_rad: 0.0,
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum ParamError {
    #[error("{field} must be positive (got {value})")]
    NotPositive { field: &'static str, value: f64 },
    #[error("driveline_efficiency must be in (0, 1] (got {0})")]
    Efficiency(f64),
    #[error("motor torque limits must satisfy min < 0 < max (got [{min}, {max}])")]
    TorqueLimits { min: f64, max: f64 },
    #[error("{field} must be finite and non-negative (got {value})")]
    Negative { field: &'static str, value: f64 },
}

impl VehicleParams {
    pub fn validate(&self) -> Result<(), ParamError> {
        let positive = [
            ("mass_kg", self.mass_kg),
            ("wheel_radius_m", self.wheel_radius_m),
            ("gear_ratio", self.gear_ratio),
            ("battery_capacity_kwh", self.battery_capacity_kwh),
        ];
        for (field, value) in positive {
            if !(value > 0.0) || !value.is_finite() {
                return Err(ParamError::NotPositive { field, value });
            }
        }
        let non_negative = [
            ("drag_coeff", self.drag_coeff),
            ("frontal_area_m2", self.frontal_area_m2),
            ("air_density_kgpm3", self.air_density_kgpm3),
            ("rolling_coeff", self.rolling_coeff),
        ];
        for (field, value) in non_negative {
            if !(value >= 0.0) || !value.is_finite() {
                return Err(ParamError::Negative { field, value });
            }
        }
        if !(self.driveline_efficiency > 0.0 && self.driveline_efficiency <= 1.0) {
            return Err(ParamError::Efficiency(self.driveline_efficiency));
        }
        if !(self.motor_torque_min_nm < 0.0 && self.motor_torque_max_nm > 0.0) {
            return Err(ParamError::TorqueLimits {
                min: self.motor_torque_min_nm,
                max: self.motor_torque_max_nm,
            });
        }
        Ok(())
    }

    pub fn battery_capacity_joules(&self) -> f64 {
        self.battery_capacity_kwh * 3.6e6
    }

    pub fn motor_speed_for(&self, speed_mps: f64) -> f64 {
        speed_mps * self.gear_ratio / self.wheel_radius_m
    }
}

/// The plant state. `motor_speed_radps` is always derived from `speed_mps`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VehicleState {
    pub t: f64,
    pub speed_mps: f64,
    pub distance_m: f64,
    pub motor_speed_radps: f64,
    pub torque_applied_nm: f64,
    pub soc: f64,
}

impl VehicleState {
    pub fn at_rest(params: &VehicleParams, soc: f64) -> VehicleState {
        VehicleState::moving(params, 0.0, soc)
    }

    pub fn moving(params: &VehicleParams, speed_mps: f64, soc: f64) -> VehicleState {
        VehicleState {
            t: 0.0,
            speed_mps,
            distance_m: 0.0,
            motor_speed_radps: params.motor_speed_for(speed_mps),
            torque_applied_nm: 0.0,
            soc: soc.clamp(0.0, 1.0),
        }
    }
}

/// Resistive force on the vehicle at `speed`:
/// aero drag + rolling resistance + grade. The rolling term vanishes at
/// standstill so a parked vehicle stays parked.
pub fn road_load(speed_mps: f64, params: &VehicleParams) -> f64 {
    let aero = 0.5
        * params.air_density_kgpm3
        * params.drag_coeff
        * params.frontal_area_m2
        * speed_mps
        * speed_mps;
    let rolling = if speed_mps > 0.0 {
        params.rolling_coeff * params.mass_kg * GRAVITY * params.road_grade_rad.cos()
    } else {
        0.0
    };
    let grade = params.mass_kg * GRAVITY * params.road_grade_rad.sin();
    aero + rolling + grade
}

/// Wheel force produced by `motor_torque`. Driveline losses subtract from
/// drive torque and add to the braking demand, so efficiency divides on the
/// negative side.
pub fn traction_force(motor_torque_nm: f64, params: &VehicleParams) -> f64 {
    let gearing = params.gear_ratio / params.wheel_radius_m;
    if motor_torque_nm >= 0.0 {
        motor_torque_nm * gearing * params.driveline_efficiency
    } else {
        motor_torque_nm * gearing / params.driveline_efficiency
    }
}

/// Motor torque that exactly balances road load at `speed` (steady state).
pub fn steady_state_torque(speed_mps: f64, params: &VehicleParams) -> f64 {
    road_load(speed_mps, params) * params.wheel_radius_m
        / (params.gear_ratio * params.driveline_efficiency)
}

/// One semi-implicit Euler step of the mechanical state. The requested
/// torque is clamped to the motor envelope; speed never goes negative
/// (no reverse modeled).
pub fn step_vehicle(
    state: &VehicleState,
    motor_torque_nm: f64,
    dt: f64,
    params: &VehicleParams,
) -> VehicleState {
    let torque = motor_torque_nm.clamp(params.motor_torque_min_nm, params.motor_torque_max_nm);
    let accel = (traction_force(torque, params) - road_load(state.speed_mps, params))
        / params.mass_kg;
    let speed = (state.speed_mps + accel * dt).max(0.0);
    VehicleState {
        t: state.t + dt,
        speed_mps: speed,
        distance_m: state.distance_m + speed * dt,
        motor_speed_radps: params.motor_speed_for(speed),
        torque_applied_nm: torque,
        soc: state.soc,
    }
}

/// One battery step. Discharge power pays for driveline losses
/// (divide by efficiency); regenerated power is reduced by them (multiply).
pub fn battery_step(
    soc: f64,
    motor_torque_nm: f64,
    motor_speed_radps: f64,
    dt: f64,
    params: &VehicleParams,
) -> f64 {
    let mech_power = motor_torque_nm * motor_speed_radps;
    let battery_power = if mech_power >= 0.0 {
        mech_power / params.driveline_efficiency
    } else {
        mech_power * params.driveline_efficiency
    };
    (soc - battery_power * dt / params.battery_capacity_joules()).clamp(0.0, 1.0)
}

/// PI gains, from the scenario configuration.
#[derive(Debug, Clone, Copy, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControllerGains {
    pub kp: f64,
    pub ki: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControllerMode {
    CycleFollow,
    Cruise,
}

/// PI accumulator. The integral is conditionally integrated: it freezes
/// whenever the output is clamped and the error would push it further into
/// the clamp, and is additionally bounded so `ki * integral` alone can never
/// exceed the torque envelope.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ControllerState {
    pub integral: f64,
    pub mode: ControllerMode,
}

impl ControllerState {
    pub fn new(mode: ControllerMode) -> ControllerState {
        ControllerState { integral: 0.0, mode }
    }
}

/// One PI update: `u = kp * e + ki * integral`, clamped to the motor
/// envelope, with anti-windup as described on [`ControllerState`].
pub fn controller_command(
    reference_mps: f64,
    measured_mps: f64,
    ctrl: &mut ControllerState,
    gains: &ControllerGains,
    dt: f64,
    params: &VehicleParams,
) -> f64 {
    let error = reference_mps - measured_mps;
    let (lo, hi) = (params.motor_torque_min_nm, params.motor_torque_max_nm);
    let unsat = gains.kp * error + gains.ki * (ctrl.integral + error * dt);
    let windup = (unsat > hi && error > 0.0) || (unsat < lo && error < 0.0);
    if gains.ki != 0.0 && !windup {
        ctrl.integral += error * dt;
        ctrl.integral = ctrl.integral.clamp(lo / gains.ki, hi / gains.ki);
    }
    (gains.kp * error + gains.ki * ctrl.integral).clamp(lo, hi)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn params() -> VehicleParams {
        VehicleParams::default()
    }

    #[test]
    fn defaults_validate() {
        params().validate().unwrap();
    }

    #[test]
    fn validation_rejects_bad_params() {
        let mut p = params();
        p.mass_kg = 0.0;
        assert!(matches!(p.validate(), Err(ParamError::NotPositive { .. })));
        let mut p = params();
        p.driveline_efficiency = 1.2;
        assert!(matches!(p.validate(), Err(ParamError::Efficiency(_))));
        let mut p = params();
        p.motor_torque_min_nm = 10.0;
        assert!(matches!(p.validate(), Err(ParamError::TorqueLimits { .. })));
    }

    #[test]
    fn road_load_zero_at_standstill_on_flat() {
        assert_eq!(road_load(0.0, &params()), 0.0);
    }

    #[test]
    fn road_load_matches_hand_computed_terms() {
        // Aero at 100 km/h: 0.5 * 1.225 * 0.23 * 2.22 * 27.78^2 = 241.3 N.
        let p = params();
        let v: f64 = 27.78;
        let aero = 0.5 * 1.225 * 0.23 * 2.22 * v * v;
        assert!((aero - 241.3).abs() < 0.1);
        // Rolling: 0.01 * 1847 * 9.81 = 181.2 N.
        let rolling = 0.01 * 1847.0 * GRAVITY;
        assert!((road_load(v, &p) - (aero + rolling)).abs() < 1e-9);
    }

    #[test]
    fn road_load_monotone_in_speed_on_flat() {
        let p = params();
        let mut prev = road_load(0.0, &p);
        for i in 1..100 {
            let f = road_load(i as f64 * 0.5, &p);
            assert!(f >= prev);
            prev = f;
        }
    }

    #[test]
    fn road_load_includes_grade_term() {
        let mut p = params();
        p.road_grade_rad = 0.05_f64;
        let expected = 1847.0 * GRAVITY * 0.05_f64.sin();
        assert!((road_load(0.0, &p) - expected).abs() < 1e-9);
    }

    #[test]
    fn traction_force_matches_hand_computed_value() {
        // 15 Nm * 9 / 0.334 * 0.95 = 384.1 N.
        let f = traction_force(15.0, &params());
        assert!((f - 15.0 * 9.0 * 0.95 / 0.334).abs() < 1e-9);
        assert!((f - 384.0).abs() < 0.2);
    }

    #[test]
    fn traction_force_zero_and_linear() {
        let p = params();
        assert_eq!(traction_force(0.0, &p), 0.0);
        assert_eq!(traction_force(30.0, &p), 2.0 * traction_force(15.0, &p));
        assert_eq!(traction_force(-30.0, &p), 2.0 * traction_force(-15.0, &p));
    }

    #[test]
    fn braking_torque_is_amplified_by_inverse_efficiency() {
        let p = params();
        let drive = traction_force(15.0, &p);
        let brake = traction_force(-15.0, &p);
        assert!((brake.abs() - drive / (0.95 * 0.95)).abs() < 1e-9);
    }

    #[test]
    fn step_at_rest_with_zero_torque_is_equilibrium() {
        let p = params();
        let s0 = VehicleState::at_rest(&p, 0.9);
        let s1 = step_vehicle(&s0, 0.0, 0.001, &p);
        assert_eq!(s1.speed_mps, 0.0);
        assert_eq!(s1.distance_m, 0.0);
        assert_eq!(s1.soc, 0.9);
        assert_eq!(s1.t, 0.001);
    }

    #[test]
    fn constant_torque_from_rest_accelerates_until_balance() {
        let p = params();
        let mut s = VehicleState::at_rest(&p, 0.9);
        let mut prev = 0.0;
        for _ in 0..400_000 {
            s = step_vehicle(&s, 50.0, 0.001, &p);
            assert!(s.speed_mps >= prev);
            prev = s.speed_mps;
        }
        // Balance speed: traction(50) = aero(v) + rolling.
        let aero_coeff = 0.5 * p.air_density_kgpm3 * p.drag_coeff * p.frontal_area_m2;
        let rolling = p.rolling_coeff * p.mass_kg * GRAVITY;
        let balance = ((traction_force(50.0, &p) - rolling) / aero_coeff).sqrt();
        assert!((s.speed_mps - balance).abs() < 0.1, "{} vs {balance}", s.speed_mps);
    }

    #[test]
    fn torque_is_clamped_to_envelope() {
        let p = params();
        let s = VehicleState::at_rest(&p, 0.9);
        assert_eq!(step_vehicle(&s, 1e4, 0.001, &p).torque_applied_nm, 250.0);
        assert_eq!(step_vehicle(&s, -1e4, 0.001, &p).torque_applied_nm, -250.0);
    }

    #[test]
    fn speed_never_goes_negative() {
        let p = params();
        let mut s = VehicleState::moving(&p, 1.0, 0.9);
        for _ in 0..10_000 {
            s = step_vehicle(&s, -200.0, 0.001, &p);
            assert!(s.speed_mps >= 0.0);
        }
        assert_eq!(s.speed_mps, 0.0);
    }

    #[test]
    fn steady_cruise_torque_matches_algebraic_balance() {
        // Balance: torque = road_load(v) * r / (ratio * eta) at 100 km/h.
        let p = params();
        let v = 100.0 / 3.6;
        let t = steady_state_torque(v, &p);
        let expected = road_load(v, &p) * 0.334 / (9.0 * 0.95);
        assert!((t - expected).abs() < 1e-12);
        assert!(t > 8.0 && t < 18.0, "steady torque {t}");
        // Holding that torque holds the speed (up to one Euler step of drift).
        let s = VehicleState::moving(&p, v, 0.9);
        let s1 = step_vehicle(&s, t, 0.001, &p);
        assert!((s1.speed_mps - v).abs() < 1e-9);
    }

    #[test]
    fn motor_speed_stays_consistent_with_speed() {
        let p = params();
        let mut s = VehicleState::moving(&p, 10.0, 0.9);
        for _ in 0..1000 {
            s = step_vehicle(&s, 40.0, 0.001, &p);
            assert_eq!(s.motor_speed_radps, p.motor_speed_for(s.speed_mps));
        }
    }

    #[test]
    fn battery_idle_holds_charge() {
        let p = params();
        assert_eq!(battery_step(0.5, 0.0, 100.0, 0.001, &p), 0.5);
    }

    #[test]
    fn battery_discharge_matches_hand_computed_delta() {
        // 10 kW mechanical-equivalent draw for 360 s on 75 kWh: 1/75 of
        // 2.7e8 J is 3.6e6 J, so delta soc = 3.6e6 / 2.7e8 = 1/75.
        let mut p = params();
        p.driveline_efficiency = 1.0;
        let torque = 50.0;
        let omega = 200.0; // 10 kW
        let mut soc = 0.9;
        for _ in 0..360_000 {
            soc = battery_step(soc, torque, omega, 0.001, &p);
        }
        assert!((soc - (0.9 - 1.0 / 75.0)).abs() < 1e-9);
    }

    #[test]
    fn battery_discharges_under_positive_power_and_regens_under_negative() {
        let p = params();
        let down = battery_step(0.5, 100.0, 300.0, 0.01, &p);
        assert!(down < 0.5);
        let up = battery_step(0.5, -100.0, 300.0, 0.01, &p);
        assert!(up > 0.5);
        // Losses cut both ways: a discharge costs more than the same regen
        // returns.
        assert!((0.5 - down) > (up - 0.5));
    }

    #[test]
    fn battery_clamps_to_unit_interval() {
        let p = params();
        assert_eq!(battery_step(0.0001, 250.0, 900.0, 10.0, &p), 0.0);
        assert_eq!(battery_step(0.9999, -250.0, 900.0, 10.0, &p), 1.0);
    }

    fn gains() -> ControllerGains {
        ControllerGains { kp: 40.0, ki: 2.0 }
    }

    #[test]
    fn zero_error_zero_integral_commands_zero() {
        let p = params();
        let mut ctrl = ControllerState::new(ControllerMode::Cruise);
        let u = controller_command(20.0, 20.0, &mut ctrl, &gains(), 0.001, &p);
        assert_eq!(u, 0.0);
        assert_eq!(ctrl.integral, 0.0);
    }

    #[test]
    fn constant_error_ramps_output_until_saturation() {
        let p = params();
        let mut ctrl = ControllerState::new(ControllerMode::Cruise);
        let mut prev = f64::NEG_INFINITY;
        for _ in 0..200_000 {
            let u = controller_command(30.0, 20.0, &mut ctrl, &gains(), 0.001, &p);
            assert!(u >= prev);
            prev = u;
        }
        assert_eq!(prev, p.motor_torque_max_nm);
    }

    #[test]
    fn integral_freezes_while_saturated() {
        // Error of 2 m/s: the P-term (80 Nm) stays inside the envelope, so
        // the integral climbs until P + I hits the +250 limit, then freezes.
        let p = params();
        let mut ctrl = ControllerState::new(ControllerMode::Cruise);
        let mut last = 0.0;
        for _ in 0..300_000 {
            last = controller_command(22.0, 20.0, &mut ctrl, &gains(), 0.001, &p);
        }
        // Conditional integration stops within one quantum (ki*e*dt) of the
        // limit rather than crossing it.
        assert!(last <= p.motor_torque_max_nm);
        assert!(last > p.motor_torque_max_nm - 0.01, "last {last}");
        let frozen = ctrl.integral;
        controller_command(22.0, 20.0, &mut ctrl, &gains(), 0.001, &p);
        assert_eq!(ctrl.integral, frozen);
        assert!(gains().ki * frozen <= p.motor_torque_max_nm + 1e-9);
    }

    #[test]
    fn integral_unwinds_when_error_reverses() {
        let p = params();
        let mut ctrl = ControllerState::new(ControllerMode::Cruise);
        for _ in 0..300_000 {
            controller_command(22.0, 20.0, &mut ctrl, &gains(), 0.001, &p);
        }
        let wound = ctrl.integral;
        assert!(wound > 0.0);
        // Error flips sign: integration must resume immediately, even while
        // the output is still inside the envelope.
        controller_command(20.0, 22.0, &mut ctrl, &gains(), 0.001, &p);
        assert!(ctrl.integral < wound);
    }

    #[test]
    fn ki_zero_leaves_integral_untouched() {
        let p = params();
        let g = ControllerGains { kp: 40.0, ki: 0.0 };
        let mut ctrl = ControllerState::new(ControllerMode::Cruise);
        let u = controller_command(25.0, 20.0, &mut ctrl, &g, 0.001, &p);
        assert_eq!(u, 200.0);
        assert_eq!(ctrl.integral, 0.0);
    }

    #[test]
    fn halving_dt_converges() {
        // Same constant-torque run at dt and dt/2 must agree closely.
        let p = params();
        let run = |dt: f64| {
            let steps = (60.0 / dt).round() as u64;
            let mut s = VehicleState::at_rest(&p, 0.9);
            for _ in 0..steps {
                s = step_vehicle(&s, 100.0, dt, &p);
            }
            s.speed_mps
        };
        assert!((run(0.001) - run(0.0005)).abs() < 0.01);
    }

    proptest! {
        #[test]
        fn state_invariants_hold_under_fuzz(
            mass in 500.0f64..4000.0,
            torque in -400.0f64..400.0,
            v0 in 0.0f64..60.0,
            soc0 in 0.0f64..1.0,
            eff in 0.5f64..1.0,
        ) {
            let mut p = params();
            p.mass_kg = mass;
            p.driveline_efficiency = eff;
            p.validate().unwrap();
            let mut s = VehicleState::moving(&p, v0, soc0);
            for _ in 0..500 {
                s = step_vehicle(&s, torque, 0.001, &p);
                s.soc = battery_step(s.soc, s.torque_applied_nm, s.motor_speed_radps, 0.001, &p);
                prop_assert!(s.speed_mps >= 0.0);
                prop_assert!((0.0..=1.0).contains(&s.soc));
            }
        }

        #[test]
        fn energy_balance_under_positive_torque(
            torque in 0.0f64..250.0,
            v0 in 0.0f64..40.0,
        ) {
            // With T >= 0 throughout, energy drawn from the battery bounds
            // the kinetic energy gained.
            let p = params();
            let mut s = VehicleState::moving(&p, v0, 0.9);
            let mut soc = 0.9;
            for _ in 0..2000 {
                s = step_vehicle(&s, torque, 0.001, &p);
                soc = battery_step(soc, s.torque_applied_nm, s.motor_speed_radps, 0.001, &p);
            }
            let drawn = (0.9 - soc) * p.battery_capacity_joules();
            let kinetic = 0.5 * p.mass_kg * (s.speed_mps * s.speed_mps - v0 * v0);
            prop_assert!(drawn >= kinetic - 1e-6, "drawn {drawn} kinetic {kinetic}");
        }

        #[test]
        fn controller_output_always_within_envelope(
            reference in 0.0f64..50.0,
            measured in 0.0f64..50.0,
            integral0 in -200.0f64..200.0,
        ) {
            let p = params();
            let mut ctrl = ControllerState::new(ControllerMode::Cruise);
            ctrl.integral = integral0;
            for _ in 0..100 {
                let u = controller_command(reference, measured, &mut ctrl, &gains(), 0.001, &p);
                prop_assert!(u >= p.motor_torque_min_nm && u <= p.motor_torque_max_nm);
            }
        }
    }
}
