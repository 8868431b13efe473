//! Variable-gain operational-space control with an energy tank.
//!
//! Lengths are in mm throughout the public interface, inertias in kg and
//! stiffness/damping gains in s^-2 / s^-1 (they multiply the inertia). Forces
//! come out in N, energies in J.
//!
//! The plant seen by the controller is the task-space error dynamics
//! `Lambda(t) e_ddot = F_c + F_e`, with setpoint feedforward already applied.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const MM: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LawChoice {
    #[default]
    Full,
    /// Inertia-shaping law whenever the stiffness is constant, so no tank energy is needed.
    InertiaShapingWhenStatic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LawUsed {
    Full,
    InertiaShaping,
    Fallback,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SigmaMode {
    #[default]
    Binary,
    Smooth,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AccelSource {
    #[default]
    Exact,
    Filtered,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ControllerConfig {
    pub lambda_c_kg: [f64; 3],
    #[serde(rename = "k_c_per_s2")]
    pub k_c: [f64; 3],
    pub damping_ratio: f64,
    pub tank_init_j: f64,
    pub tank_max_j: f64,
    pub tank_floor_j: f64,
    /// Width of the sigma hysteresis band (binary) or ramp (smooth).
    pub sigma_band_j: f64,
    pub sigma_mode: SigmaMode,
    /// Tank re-enables once x_t exceeds eps_min + this fraction of x_t_max.
    pub refill_fraction: f64,
    pub law: LawChoice,
    pub et_enabled: bool,
    /// Stiffness slew limit, s^-2 per s.
    #[serde(rename = "stiffness_rate_limit_per_s3")]
    pub stiffness_rate_limit_per_s: f64,
    /// Sinusoidal time-varying inertia, per axis amplitude.
    pub lambda_v_amplitude_kg: [f64; 3],
    pub lambda_v_frequency_hz: f64,
    pub accel_source: AccelSource,
    pub accel_cutoff_hz: f64,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        Self {
            lambda_c_kg: [50.0; 3],
            k_c: [800.0; 3],
            damping_ratio: 1.0,
            tank_init_j: 10.0,
            tank_max_j: 20.0,
            tank_floor_j: 0.01,
            sigma_band_j: 0.2,
            sigma_mode: SigmaMode::Binary,
            refill_fraction: 0.1,
            law: LawChoice::Full,
            et_enabled: true,
            stiffness_rate_limit_per_s: 5000.0,
            lambda_v_amplitude_kg: [0.0; 3],
            lambda_v_frequency_hz: 0.5,
            accel_source: AccelSource::Exact,
            accel_cutoff_hz: 50.0,
        }
    }
}

impl ControllerConfig {
    pub fn validate(&self) -> Result<()> {
        for i in 0..3 {
            if !(self.lambda_c_kg[i] > 0.0) {
                return Err(Error::NonSpdGains("lambda_c"));
            }
            if !(self.k_c[i] > 0.0) {
                return Err(Error::NonSpdGains("k_c"));
            }
            if !(self.lambda_v_amplitude_kg[i].abs() < self.lambda_c_kg[i]) {
                return Err(Error::NonSpdGains("lambda_c + lambda_v"));
            }
        }
        if !(self.damping_ratio > 0.0) {
            return Err(Error::InvalidConfig("damping ratio must be positive".into()));
        }
        if !(self.tank_floor_j > 0.0 && self.tank_floor_j < self.tank_max_j) {
            return Err(Error::InvalidConfig("tank floor must lie in (0, tank_max)".into()));
        }
        if !(self.tank_init_j >= self.tank_floor_j && self.tank_init_j <= self.tank_max_j) {
            return Err(Error::InvalidConfig("initial tank energy outside [floor, max]".into()));
        }
        if !(self.stiffness_rate_limit_per_s > 0.0) {
            return Err(Error::InvalidConfig("stiffness rate limit must be positive".into()));
        }
        if !(self.sigma_band_j >= 0.0 && self.refill_fraction >= 0.0 && self.accel_cutoff_hz > 0.0) {
            return Err(Error::InvalidConfig("tank band, refill fraction and cutoff must be non-negative".into()));
        }
        Ok(())
    }

    pub fn lambda_v(&self, t: f64) -> Matrix3<f64> {
        let s = (std::f64::consts::TAU * self.lambda_v_frequency_hz * t).sin();
        let a = self.lambda_v_amplitude_kg;
        Matrix3::from_diagonal(&Vector3::new(a[0] * s, a[1] * s, a[2] * s))
    }
}

/// K_d = 2 zeta sqrt(K_p) per axis.
pub fn damping_for(k_p_diag: &Vector3<f64>, zeta: f64) -> Matrix3<f64> {
    Matrix3::from_diagonal(&k_p_diag.map(|k| 2.0 * zeta * k.max(0.0).sqrt()))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GainSchedule {
    pub lambda_c: Matrix3<f64>,
    pub lambda_v: Matrix3<f64>,
    pub k_c: Matrix3<f64>,
    pub k_v: Matrix3<f64>,
    pub k_d: Matrix3<f64>,
    /// Damping used by the depleted-tank fallback.
    pub k_dc: Matrix3<f64>,
}

fn is_spd(m: &Matrix3<f64>) -> bool {
    (m - m.transpose()).abs().max() <= 1e-9 * m.abs().max().max(1.0) && m.cholesky().is_some()
}

fn is_psd(m: &Matrix3<f64>) -> bool {
    let sym = 0.5 * (m + m.transpose());
    sym.symmetric_eigenvalues().min() >= -1e-9 * m.abs().max().max(1.0)
}

impl GainSchedule {
    pub fn constant(lambda_c: Matrix3<f64>, k_c: Matrix3<f64>, k_d: Matrix3<f64>) -> Self {
        Self { lambda_c, lambda_v: Matrix3::zeros(), k_c, k_v: Matrix3::zeros(), k_d, k_dc: k_d }
    }

    pub fn lambda(&self) -> Matrix3<f64> {
        self.lambda_c + self.lambda_v
    }
    pub fn k_p(&self) -> Matrix3<f64> {
        self.k_c + self.k_v
    }

    pub fn validate(&self) -> Result<()> {
        if !is_spd(&self.lambda_c) {
            return Err(Error::NonSpdGains("lambda_c"));
        }
        if !is_spd(&self.lambda()) {
            return Err(Error::NonSpdGains("lambda_c + lambda_v"));
        }
        if !is_spd(&self.k_c) {
            return Err(Error::NonSpdGains("k_c"));
        }
        if !is_psd(&self.k_p()) {
            return Err(Error::NonSpdGains("k_c + k_v"));
        }
        if !is_psd(&self.k_d) || !is_psd(&self.k_dc) {
            return Err(Error::NonSpdGains("k_d"));
        }
        Ok(())
    }

    /// Lambda_c^-1 Lambda, exactly the identity when there is no inertia variation.
    fn lambda_ratio(&self) -> Matrix3<f64> {
        if self.lambda_v == Matrix3::zeros() {
            Matrix3::identity()
        } else {
            Matrix3::identity() + self.lambda_c.try_inverse().expect("lambda_c validated") * self.lambda_v
        }
    }
}

/// Non-passive injection w(t) in N (e in mm, e_ddot in mm/s^2).
pub fn w_of_t(g: &GainSchedule, e: &Vector3<f64>, e_ddot: &Vector3<f64>) -> Vector3<f64> {
    (-g.lambda_v * g.k_c * e - g.lambda() * g.k_v * e - g.lambda_v * e_ddot) * MM
}

/// Dissipated power e_dot^T Lambda K_d e_dot in W.
pub fn dissipation(g: &GainSchedule, k_d: &Matrix3<f64>, e_dot: &Vector3<f64>) -> f64 {
    e_dot.dot(&(g.lambda() * k_d * e_dot)) * MM * MM
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TankState {
    /// Stored energy H_t = x_t^2 / 2, J.
    pub h: f64,
    pub h_floor: f64,
    pub h_max: f64,
    pub sigma: f64,
    pub p_in: f64,
    pub p_out: f64,
    pub depleted: bool,
}

impl TankState {
    pub fn new(init_j: f64, floor_j: f64, max_j: f64) -> Self {
        let mut t = Self { h: init_j, h_floor: floor_j, h_max: max_j, sigma: 1.0, p_in: 0.0, p_out: 0.0, depleted: false };
        t.update_sigma(SigmaMode::Binary, 0.0);
        t
    }
    pub fn from_config(cfg: &ControllerConfig) -> Self {
        let mut t = Self::new(cfg.tank_init_j, cfg.tank_floor_j, cfg.tank_max_j);
        t.update_sigma(cfg.sigma_mode, cfg.sigma_band_j);
        t
    }
    pub fn x_t(&self) -> f64 {
        (2.0 * self.h).sqrt()
    }
    pub fn eps_min(&self) -> f64 {
        (2.0 * self.h_floor).sqrt()
    }
    pub fn x_max(&self) -> f64 {
        (2.0 * self.h_max).sqrt()
    }

    pub fn update_sigma(&mut self, mode: SigmaMode, band: f64) {
        self.sigma = match mode {
            SigmaMode::Binary => {
                // hysteresis: stay closed until the tank drains below the band
                if self.h >= self.h_max || (self.sigma == 0.0 && self.h > self.h_max - band) {
                    0.0
                } else {
                    1.0
                }
            }
            SigmaMode::Smooth => {
                if band <= 0.0 {
                    if self.h >= self.h_max { 0.0 } else { 1.0 }
                } else {
                    ((self.h_max - self.h) / band).clamp(0.0, 1.0)
                }
            }
        };
    }

    fn refill_check(&mut self, refill_fraction: f64) {
        if self.depleted && self.x_t() > self.eps_min() + refill_fraction * self.x_max() {
            self.depleted = false;
        }
    }
}

/// One explicit tank update over `dt` in energy coordinates.
pub fn tank_step(tank: &TankState, g: &GainSchedule, e_dot: &Vector3<f64>, w: &Vector3<f64>, dt: f64) -> TankState {
    let d = dissipation(g, &g.k_d, e_dot);
    let mut t = *tank;
    t.h += dt * (t.sigma * d - w.dot(e_dot) * MM + t.p_in - t.p_out);
    if t.h >= t.h_max {
        t.h = t.h_max;
        t.sigma = 0.0;
    } else if t.sigma == 0.0 {
        t.sigma = 1.0;
    }
    if t.h <= t.h_floor {
        t.h = t.h_floor;
        t.depleted = true;
    }
    t
}

/// Rate of change of tank energy in W.
pub fn tank_power(tank: &TankState, g: &GainSchedule, e_dot: &Vector3<f64>, w: &Vector3<f64>) -> f64 {
    tank.sigma * dissipation(g, &g.k_d, e_dot) - w.dot(e_dot) * MM + tank.p_in - tank.p_out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ControlOutput {
    pub f_c: Vector3<f64>,
    pub w_t: Vector3<f64>,
    /// w^T e_dot, W.
    pub tank_drain_rate: f64,
    pub law_used: LawUsed,
}

fn inertia_shaping_force(g: &GainSchedule, k_d: &Matrix3<f64>, e: &Vector3<f64>, e_dot: &Vector3<f64>, f_e: &Vector3<f64>) -> Vector3<f64> {
    let lam = g.lambda();
    let ratio = g.lambda_ratio();
    let lc_inv = g.lambda_c.try_inverse().expect("lambda_c validated");
    lam * (-ratio * k_d * e_dot - g.k_c * e) * MM + g.lambda_v * lc_inv * f_e
}

/// Control wrench for the current state. With a live tank this is the full
/// law `-Lc Kc e - L Kd e_dot + w + Lv e_ddot`; with `InertiaShapingWhenStatic` and
/// constant stiffness the inertia-shaping law; with a depleted tank the
/// constant-gain fallback.
pub fn control_force(
    g: &GainSchedule,
    e: &Vector3<f64>,
    e_dot: &Vector3<f64>,
    e_ddot: &Vector3<f64>,
    f_e: &Vector3<f64>,
    tank: &TankState,
    law: LawChoice,
) -> Result<ControlOutput> {
    g.validate()?;
    if tank.depleted {
        let fallback = GainSchedule { k_v: Matrix3::zeros(), ..*g };
        return Ok(ControlOutput {
            f_c: inertia_shaping_force(&fallback, &g.k_dc, e, e_dot, f_e),
            w_t: Vector3::zeros(),
            tank_drain_rate: 0.0,
            law_used: LawUsed::Fallback,
        });
    }
    if law == LawChoice::InertiaShapingWhenStatic && g.k_v == Matrix3::zeros() {
        return Ok(ControlOutput {
            f_c: inertia_shaping_force(g, &g.k_d, e, e_dot, f_e),
            w_t: Vector3::zeros(),
            tank_drain_rate: 0.0,
            law_used: LawUsed::InertiaShaping,
        });
    }
    let w = w_of_t(g, e, e_ddot);
    let f_c = (-g.lambda_c * g.k_c * e - g.lambda() * g.k_d * e_dot + g.lambda_v * e_ddot) * MM + w;
    Ok(ControlOutput { f_c, w_t: w, tank_drain_rate: w.dot(e_dot) * MM, law_used: LawUsed::Full })
}

/// Storage of the controlled robot plus the tank, W = H_c + H_t (J).
pub fn hamiltonian(lambda_c: &Matrix3<f64>, k_c: &Matrix3<f64>, e: &Vector3<f64>, e_dot: &Vector3<f64>, h_t: f64) -> f64 {
    let s = 0.5 * (lambda_c * k_c + (lambda_c * k_c).transpose());
    0.5 * (e_dot.dot(&(lambda_c * e_dot)) + e.dot(&(s * e))) * MM * MM + h_t
}

/// Closed-loop error dynamics `e_ddot = -A_e e - A_v e_dot + b` for one step.
#[derive(Debug, Clone, Copy)]
struct Linear {
    a_e: Matrix3<f64>,
    a_v: Matrix3<f64>,
    b: Vector3<f64>,
}

impl Linear {
    /// Implicit midpoint step. Returns (e+, v+).
    fn step(&self, e: &Vector3<f64>, v: &Vector3<f64>, dt: f64) -> (Vector3<f64>, Vector3<f64>) {
        let m = Matrix3::identity() + self.a_e * (0.25 * dt * dt) + self.a_v * (0.5 * dt);
        let rhs = v + dt * (-self.a_e * e - self.a_e * v * (0.25 * dt) - self.a_v * v * 0.5 + self.b);
        let v1 = m.lu().solve(&rhs).expect("midpoint system is non-singular for PSD gains");
        let e1 = e + 0.5 * dt * (v + v1);
        (e1, v1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutcome {
    pub e: Vector3<f64>,
    pub e_dot: Vector3<f64>,
    /// Midpoint velocity, the one used for all power terms.
    pub e_dot_mid: Vector3<f64>,
    pub e_ddot: Vector3<f64>,
    pub f_c: Vector3<f64>,
    pub w_t: Vector3<f64>,
    pub dissipation_w: f64,
    pub tank_drain_w: f64,
    pub law_used: LawUsed,
    pub k_p_diag: Vector3<f64>,
    pub tank: TankState,
    /// Robot plus tank energy before and after the step.
    pub w_before: f64,
    pub w_after: f64,
    /// Work done by the environment over the step, J.
    pub port_work: f64,
}

/// First-order low-pass on the finite-difference acceleration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AccelFilter {
    cutoff_hz: f64,
    state: Vector3<f64>,
}

impl AccelFilter {
    pub fn new(cutoff_hz: f64) -> Self {
        Self { cutoff_hz, state: Vector3::zeros() }
    }
    pub fn update(&mut self, v_prev: &Vector3<f64>, v: &Vector3<f64>, dt: f64) -> Vector3<f64> {
        let raw = (v - v_prev) / dt;
        let tau = 1.0 / (std::f64::consts::TAU * self.cutoff_hz);
        self.state += (dt / (dt + tau)) * (raw - self.state);
        self.state
    }
    pub fn value(&self) -> Vector3<f64> {
        self.state
    }
}

/// Stateful controller: commanded stiffness with rate limiting, the tank and
/// its depletion latch.
#[derive(Debug, Clone, PartialEq)]
pub struct OscController {
    cfg: ControllerConfig,
    k_cmd: Vector3<f64>,
    k_target: Vector3<f64>,
    tank: TankState,
    filter: AccelFilter,
}

impl OscController {
    pub fn new(cfg: ControllerConfig) -> Result<Self> {
        cfg.validate()?;
        let k_c = Vector3::from(cfg.k_c);
        Ok(Self {
            tank: TankState::from_config(&cfg),
            filter: AccelFilter::new(cfg.accel_cutoff_hz),
            k_cmd: k_c,
            k_target: k_c,
            cfg,
        })
    }

    pub fn config(&self) -> &ControllerConfig {
        &self.cfg
    }
    pub fn tank(&self) -> &TankState {
        &self.tank
    }
    pub fn tank_mut(&mut self) -> &mut TankState {
        &mut self.tank
    }
    pub fn stiffness(&self) -> Vector3<f64> {
        self.k_cmd
    }

    pub fn set_target_stiffness(&mut self, k: Vector3<f64>) {
        self.k_target = k;
    }

    /// Jump straight to the given stiffness (episode start).
    pub fn force_stiffness(&mut self, k: Vector3<f64>) {
        self.k_target = k;
        self.k_cmd = k;
    }

    pub fn gains_at(&self, t: f64) -> GainSchedule {
        let k_c = Matrix3::from_diagonal(&Vector3::from(self.cfg.k_c));
        let k_p = Matrix3::from_diagonal(&self.k_cmd);
        GainSchedule {
            lambda_c: Matrix3::from_diagonal(&Vector3::from(self.cfg.lambda_c_kg)),
            lambda_v: self.cfg.lambda_v(t),
            k_c,
            k_v: k_p - k_c,
            k_d: damping_for(&self.k_cmd, self.cfg.damping_ratio),
            k_dc: damping_for(&Vector3::from(self.cfg.k_c), self.cfg.damping_ratio),
        }
    }

    fn advance_stiffness(&mut self, dt: f64) {
        let max = self.cfg.stiffness_rate_limit_per_s * dt;
        for i in 0..3 {
            let d = (self.k_target[i] - self.k_cmd[i]).clamp(-max, max);
            self.k_cmd[i] = if (self.k_target[i] - self.k_cmd[i]).abs() <= max { self.k_target[i] } else { self.k_cmd[i] + d };
        }
    }

}

fn dynamics(g: &GainSchedule, law: LawUsed, f_e: &Vector3<f64>) -> Linear {
        let lc_inv = g.lambda_c.try_inverse().expect("lambda_c validated");
        match law {
            LawUsed::Full => {
                let lam_inv = g.lambda().try_inverse().expect("lambda validated");
                Linear { a_e: g.k_p(), a_v: g.k_d, b: lam_inv * f_e / MM }
            }
            LawUsed::InertiaShaping => Linear { a_e: g.k_c, a_v: g.lambda_ratio() * g.k_d, b: lc_inv * f_e / MM },
            LawUsed::Fallback => Linear { a_e: g.k_c, a_v: g.lambda_ratio() * g.k_dc, b: lc_inv * f_e / MM },
        }
}

impl OscController {

    /// Advance the error state by one physics step with the external force
    /// held constant. `t` is the time at the start of the step.
    pub fn step(&mut self, e: &Vector3<f64>, e_dot: &Vector3<f64>, f_e: &Vector3<f64>, t: f64, dt: f64) -> Result<StepOutcome> {
        self.advance_stiffness(dt);
        let g = self.gains_at(t + 0.5 * dt);
        g.validate()?;
        let w_before = hamiltonian(&g.lambda_c, &g.k_c, e, e_dot, self.tank.h);

        let nominal = if self.cfg.law == LawChoice::InertiaShapingWhenStatic && g.k_v == Matrix3::zeros() {
            LawUsed::InertiaShaping
        } else {
            LawUsed::Full
        };
        let mut law = if self.cfg.et_enabled && self.tank.depleted { LawUsed::Fallback } else { nominal };

        let accel_source = self.cfg.accel_source;
        let filtered = self.filter.value();
        let attempt = |law: LawUsed| {
            let (e1, v1) = dynamics(&g, law, f_e).step(e, e_dot, dt);
            let v_mid = 0.5 * (e_dot + v1);
            let a_mid = (v1 - e_dot) / dt;
            let (w, kd) = match law {
                LawUsed::Full => {
                    let e_mid = 0.5 * (e + e1);
                    let acc = match accel_source {
                        AccelSource::Exact => a_mid,
                        AccelSource::Filtered => filtered,
                    };
                    (w_of_t(&g, &e_mid, &acc), g.k_d)
                }
                LawUsed::InertiaShaping => (Vector3::zeros(), g.k_d),
                LawUsed::Fallback => (Vector3::zeros(), g.k_dc),
            };
            let d = dissipation(&g, &kd, &v_mid);
            (e1, v1, v_mid, a_mid, w, d)
        };

        let (mut e1, mut v1, mut v_mid, mut a_mid, mut w, mut d) = attempt(law);
        if self.cfg.et_enabled && law == LawUsed::Full {
            let dh = dt * (self.tank.sigma * d - w.dot(&v_mid) * MM + self.tank.p_in - self.tank.p_out);
            if self.tank.h + dh < self.tank.h_floor {
                self.tank.depleted = true;
                law = LawUsed::Fallback;
                (e1, v1, v_mid, a_mid, w, d) = attempt(law);
            }
        }

        let drain = w.dot(&v_mid) * MM;
        if self.cfg.et_enabled {
            let tank = &mut self.tank;
            tank.h += dt * (tank.sigma * d - drain + tank.p_in - tank.p_out);
            if tank.h > tank.h_max {
                tank.h = tank.h_max;
            }
            if tank.h <= tank.h_floor {
                tank.h = tank.h_floor;
                tank.depleted = true;
            }
            tank.refill_check(self.cfg.refill_fraction);
            tank.update_sigma(self.cfg.sigma_mode, self.cfg.sigma_band_j);
        }
        self.filter.update(e_dot, &v1, dt);

        let f_c = g.lambda() * a_mid * MM - f_e;
        let w_after = hamiltonian(&g.lambda_c, &g.k_c, &e1, &v1, self.tank.h);
        Ok(StepOutcome {
            e: e1,
            e_dot: v1,
            e_dot_mid: v_mid,
            e_ddot: a_mid,
            f_c,
            w_t: w,
            dissipation_w: d,
            tank_drain_w: drain,
            law_used: law,
            k_p_diag: self.k_cmd,
            tank: self.tank,
            w_before,
            w_after,
            port_work: dt * v_mid.dot(f_e) * MM,
        })
    }
}

/// Per-step energy bookkeeping consumed by [`passivity_audit`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AuditRecord {
    pub w_before: f64,
    pub w_after: f64,
    pub port_work: f64,
    pub tank_j: f64,
    pub tank_floor_j: f64,
    pub tank_max_j: f64,
}

impl From<&StepOutcome> for AuditRecord {
    fn from(s: &StepOutcome) -> Self {
        Self {
            w_before: s.w_before,
            w_after: s.w_after,
            port_work: s.port_work,
            tank_j: s.tank.h,
            tank_floor_j: s.tank.h_floor,
            tank_max_j: s.tank.h_max,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub steps: usize,
    /// Largest single-step excess of dW over the port work, J.
    pub max_step_excess: f64,
    /// Largest excess over any contiguous interval, J.
    pub max_interval_excess: f64,
    /// Largest interval excess after subtracting the per-step tolerance.
    pub max_violation: f64,
    pub tank_bounds_ok: bool,
    pub passed: bool,
}

/// Check `W(t1) - W(t0) <= int e_dot^T F_e dt + tol` over every interval,
/// with `tol` accumulated per step.
pub fn passivity_audit(records: &[AuditRecord], tol_per_step: f64) -> AuditReport {
    let mut s = 0.0;
    let mut min_s = 0.0f64;
    let mut min_s_tol = 0.0f64;
    let mut max_step = f64::NEG_INFINITY;
    let mut max_interval = f64::NEG_INFINITY;
    let mut max_violation = f64::NEG_INFINITY;
    let mut bounds_ok = true;
    for (k, r) in records.iter().enumerate() {
        let excess = r.w_after - r.w_before - r.port_work;
        max_step = max_step.max(excess);
        s += excess;
        let s_tol = s - tol_per_step * (k + 1) as f64;
        max_interval = max_interval.max(s - min_s);
        max_violation = max_violation.max(s_tol - min_s_tol);
        min_s = min_s.min(s);
        min_s_tol = min_s_tol.min(s_tol);
        let eps = 1e-12 * r.tank_max_j;
        if r.tank_j < r.tank_floor_j - eps || r.tank_j > r.tank_max_j + eps {
            bounds_ok = false;
        }
    }
    if records.is_empty() {
        max_step = 0.0;
        max_interval = 0.0;
        max_violation = 0.0;
    }
    AuditReport {
        steps: records.len(),
        max_step_excess: max_step,
        max_interval_excess: max_interval,
        max_violation,
        tank_bounds_ok: bounds_ok,
        passed: max_violation <= 0.0 && bounds_ok,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn diag(v: f64) -> Matrix3<f64> {
        Matrix3::from_diagonal_element(v)
    }

    #[test]
    fn w_examples() {
        let mut g = GainSchedule::constant(diag(50.0), diag(800.0), diag(56.0));
        assert_eq!(w_of_t(&g, &Vector3::new(1.0, 2.0, 3.0), &Vector3::new(4.0, 5.0, 6.0)), Vector3::zeros());
        g.k_v = diag(100.0);
        let w = w_of_t(&g, &Vector3::new(1.0, 0.0, 0.0), &Vector3::zeros());
        assert_abs_diff_eq!(w, Vector3::new(-50.0 * 100.0 * 1e-3, 0.0, 0.0), epsilon = 1e-12);
        g.lambda_v = diag(10.0);
        assert_eq!(w_of_t(&g, &Vector3::zeros(), &Vector3::zeros()), Vector3::zeros());
    }

    #[test]
    fn constant_gain_limit() {
        let g = GainSchedule::constant(diag(50.0), diag(800.0), diag(56.0));
        let tank = TankState::new(10.0, 0.01, 20.0);
        let e = Vector3::new(1.0, 0.0, 0.0);
        let out = control_force(&g, &e, &Vector3::zeros(), &Vector3::zeros(), &Vector3::zeros(), &tank, LawChoice::Full).unwrap();
        assert_abs_diff_eq!(out.f_c, -g.lambda_c * g.k_c * e * 1e-3, epsilon = 1e-12);
        assert_eq!(out.w_t, Vector3::zeros());
        assert_eq!(out.tank_drain_rate, 0.0);
    }

    #[test]
    fn depleted_tank_falls_back() {
        let mut g = GainSchedule::constant(diag(50.0), diag(800.0), diag(56.0));
        g.k_v = diag(1200.0);
        g.k_d = diag(90.0);
        let mut tank = TankState::new(0.01, 0.01, 20.0);
        tank.depleted = true;
        let e = Vector3::new(1.0, -2.0, 0.5);
        let ed = Vector3::new(3.0, 1.0, -1.0);
        let out = control_force(&g, &e, &ed, &Vector3::zeros(), &Vector3::zeros(), &tank, LawChoice::Full).unwrap();
        assert_eq!(out.law_used, LawUsed::Fallback);
        assert_eq!(out.w_t, Vector3::zeros());
        let expected = (-g.lambda_c * g.k_c * e - g.lambda_c * g.k_dc * ed) * 1e-3;
        assert_abs_diff_eq!(out.f_c, expected, epsilon = 1e-12);
    }

    #[test]
    fn tank_examples() {
        let g = GainSchedule::constant(diag(1.0), diag(1.0), diag(1.0));
        let tank = TankState::new(2.0, 0.01, 20.0);
        // e_dot of 1000 mm/s gives D = 1 W
        let ed = Vector3::new(1000.0, 0.0, 0.0);
        let dt = 1e-6;
        let t1 = tank_step(&tank, &g, &ed, &Vector3::zeros(), dt);
        assert_abs_diff_eq!((t1.h - tank.h) / dt, 1.0, epsilon = 1e-6);
        let w = Vector3::new(3.0, 0.0, 0.0);
        let t2 = tank_step(&tank, &g, &ed, &w, dt);
        assert_abs_diff_eq!((t2.h - tank.h) / dt, -2.0, epsilon = 1e-6);
        let full = TankState::new(20.0, 0.01, 20.0);
        assert_eq!(full.sigma, 0.0);
        assert_eq!(tank_power(&full, &g, &ed, &Vector3::zeros()), 0.0);
    }

    #[test]
    fn rejects_non_spd() {
        let g = GainSchedule::constant(diag(-1.0), diag(800.0), diag(56.0));
        assert!(matches!(g.validate(), Err(Error::NonSpdGains(_))));
    }
}
