//! Task-space plant: a point inertia tracking a moving setpoint under the
//! operational-space controller and the milling wrench.
//!
//! The tool position is carried as `x = x_d + e`; the setpoint acceleration
//! is fed forward, so only the error state is integrated.

use std::f64::consts::TAU;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::control::{AuditRecord, LawUsed, OscController, StepOutcome};
use crate::cutting::{total_force, CuttingOptions, FeedState, MaterialParams};
use crate::error::{Error, Result};
use crate::tool::ToolGeometry;
use crate::workpiece::{Heightfield, ToolPose};

const GOLDEN_FRAC: f64 = 0.618_033_988_749_894_8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StepConfig {
    pub physics_dt_s: f64,
    pub control_dt_s: f64,
    /// Spindle angles averaged per physics step.
    pub force_substeps: usize,
}

impl Default for StepConfig {
    fn default() -> Self {
        Self { physics_dt_s: 1e-3, control_dt_s: 0.02, force_substeps: 1 }
    }
}

impl StepConfig {
    pub fn substeps_per_control(&self) -> Result<usize> {
        if !(self.physics_dt_s > 0.0 && self.control_dt_s > 0.0) || self.force_substeps == 0 {
            return Err(Error::InvalidConfig("time steps must be positive".into()));
        }
        let n = self.control_dt_s / self.physics_dt_s;
        let r = n.round();
        if r < 1.0 || (n - r).abs() > 1e-9 * n {
            return Err(Error::InvalidConfig(format!(
                "control_dt {} is not an integer multiple of physics_dt {}",
                self.control_dt_s, self.physics_dt_s
            )));
        }
        Ok(r as usize)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SafetyLimits {
    pub workspace_min_mm: [f64; 3],
    pub workspace_max_mm: [f64; 3],
    pub max_tracking_error_mm: f64,
}

impl Default for SafetyLimits {
    fn default() -> Self {
        Self {
            workspace_min_mm: [-1e4; 3],
            workspace_max_mm: [1e4; 3],
            max_tracking_error_mm: 40.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlantState {
    pub x: Vector3<f64>,
    pub x_dot: Vector3<f64>,
    pub x_ddot: Vector3<f64>,
    pub e: Vector3<f64>,
    pub e_dot: Vector3<f64>,
    /// Unwrapped spindle angle.
    pub theta: f64,
    pub time: f64,
    pub steps: u64,
}

/// Everything that happened in one physics step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhysicsRecord {
    pub t: f64,
    pub x: Vector3<f64>,
    pub x_dot: Vector3<f64>,
    pub e: Vector3<f64>,
    pub e_dot: Vector3<f64>,
    pub f_e: Vector3<f64>,
    pub engaged: usize,
    pub mrv_rate: f64,
    pub removed_volume: f64,
    pub outcome: StepOutcome,
}

impl PhysicsRecord {
    pub fn audit(&self) -> AuditRecord {
        AuditRecord::from(&self.outcome)
    }
}

#[derive(Debug, Clone)]
pub struct Plant {
    pub tool: ToolGeometry,
    pub material: MaterialParams,
    pub cutting: CuttingOptions,
    pub workpiece: Heightfield,
    pub controller: OscController,
    pub orientation: Matrix3<f64>,
    pub step_cfg: StepConfig,
    pub limits: SafetyLimits,
    state: PlantState,
    theta0: f64,
    x_prev: Vector3<f64>,
}

impl Plant {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        tool: ToolGeometry,
        material: MaterialParams,
        cutting: CuttingOptions,
        workpiece: Heightfield,
        controller: OscController,
        orientation: Matrix3<f64>,
        step_cfg: StepConfig,
        limits: SafetyLimits,
        x_d0: Vector3<f64>,
        v_d0: Vector3<f64>,
    ) -> Result<Self> {
        step_cfg.substeps_per_control()?;
        let state = PlantState {
            x: x_d0,
            x_dot: v_d0,
            x_ddot: Vector3::zeros(),
            e: Vector3::zeros(),
            e_dot: Vector3::zeros(),
            theta: 0.0,
            time: 0.0,
            steps: 0,
        };
        Ok(Self {
            tool,
            material,
            cutting,
            workpiece,
            controller,
            orientation,
            step_cfg,
            limits,
            state,
            theta0: 0.0,
            x_prev: x_d0,
        })
    }

    pub fn state(&self) -> &PlantState {
        &self.state
    }

    /// Start from a perturbed error state (tests and analytic checks).
    pub fn set_error(&mut self, e: Vector3<f64>, e_dot: Vector3<f64>) {
        let x_d = self.state.x - self.state.e;
        let v_d = self.state.x_dot - self.state.e_dot;
        self.state.e = e;
        self.state.e_dot = e_dot;
        self.state.x = x_d + e;
        self.state.x_dot = v_d + e_dot;
        self.x_prev = self.state.x;
    }

    pub fn set_spindle_angle(&mut self, theta0: f64) {
        self.theta0 = theta0;
        self.state.theta = theta0 + TAU * self.tool.spindle_speed() * self.state.time;
    }

    fn pose(&self, x: Vector3<f64>) -> ToolPose {
        ToolPose { position: x, r_m_to_w: self.orientation }
    }

    /// Advance one physics step. `x_d` and `x_d_next` are the setpoints at
    /// the start and end of the step.
    pub fn step(&mut self, x_d: Vector3<f64>, x_d_next: Vector3<f64>) -> Result<PhysicsRecord> {
        let dt = self.step_cfg.physics_dt_s;
        let s = self.state;
        let x = x_d + s.e;
        // feed is the displacement over the last step: the material in front
        // of the tool now is what that motion exposed
        let v_feed = (x - self.x_prev) / dt;
        let r_w_to_m = self.orientation.transpose();

        let n_sub = self.step_cfg.force_substeps;
        let mut f_e = Vector3::zeros();
        let mut mrv_rate = 0.0;
        let mut engaged = 0;
        // stratified offsets from a golden-ratio sequence; a fixed offset
        // aliases with the tooth pitch when the step angle divides it
        let u = (s.steps as f64 * GOLDEN_FRAC).fract();
        for j in 0..n_sub {
            let theta = s.theta + TAU * self.tool.spindle_speed() * dt * (j as f64 + u) / n_sub as f64;
            let g = self.workpiece.engagement(&self.tool, &self.pose(x), theta);
            let feed = FeedState { v_w: v_feed, r_w_to_m, theta };
            let fr = total_force(&self.tool, &self.material, &feed, &g, &self.cutting)?;
            f_e += fr.f_w;
            mrv_rate += fr.mrv_rate;
            engaged += fr.engaged_count;
        }
        f_e /= n_sub as f64;
        mrv_rate /= n_sub as f64;
        let engaged = engaged / n_sub;

        let removed = self.workpiece.remove_material(&self.tool, &self.pose(self.x_prev), &self.pose(x));

        let out = self.controller.step(&s.e, &s.e_dot, &f_e, s.time, dt)?;

        let steps = s.steps + 1;
        let time = steps as f64 * dt;
        let x_next = x_d_next + out.e;
        let x_dot_next = (x_d_next - x_d) / dt + out.e_dot;
        self.x_prev = x;
        self.state = PlantState {
            x: x_next,
            x_dot: x_dot_next,
            x_ddot: out.e_ddot,
            e: out.e,
            e_dot: out.e_dot,
            theta: self.theta0 + TAU * self.tool.spindle_speed() * time,
            time,
            steps,
        };
        let rec = PhysicsRecord {
            t: s.time,
            x,
            x_dot: v_feed,
            e: s.e,
            e_dot: s.e_dot,
            f_e,
            engaged,
            mrv_rate,
            removed_volume: removed,
            outcome: out,
        };
        self.check_safety()?;
        Ok(rec)
    }

    fn check_safety(&self) -> Result<()> {
        let s = &self.state;
        let finite = s.x.iter().chain(s.x_dot.iter()).chain(s.e_dot.iter()).all(|v| v.is_finite());
        if !finite || !self.controller.tank().h.is_finite() {
            return Err(Error::NonFiniteState);
        }
        let lo = self.limits.workspace_min_mm;
        let hi = self.limits.workspace_max_mm;
        if (0..3).any(|i| s.x[i] < lo[i] || s.x[i] > hi[i]) {
            return Err(Error::WorkspaceViolation(s.x.x, s.x.y, s.x.z));
        }
        let err = s.e.norm();
        if err > self.limits.max_tracking_error_mm {
            return Err(Error::TrackingLimit(err));
        }
        Ok(())
    }
}

pub fn law_name(l: LawUsed) -> &'static str {
    match l {
        LawUsed::Full => "full",
        LawUsed::InertiaShaping => "inertia_shaping",
        LawUsed::Fallback => "fallback",
    }
}
