//! Reinforcement-learning environment over the plant, controller, workpiece
//! and path.
//!
//! Observation layout (base, 15 slots):
//!
//! | index | content |
//! |-------|---------|
//! | 0     | path velocity . tool velocity (mm^2/s^2) |
//! | 1-3   | tracking error e (mm) |
//! | 4-6   | tool velocity (mm/s) |
//! | 7-9   | external force F_e (N), mean over the control step |
//! | 10    | time offset t_delta (s) |
//! | 11    | normal offset n_delta (mm) |
//! | 12-14 | commanded stiffness diagonal |
//!
//! The augmented layout appends tank energy H_t (J) and its mean rate over
//! the step (W). With `outer_product_obs` slot 0 becomes the 9 entries of
//! the outer product, row-major, and everything else shifts by 8.
//!
//! Action layout: `[k_x, k_y, k_z, t_delta_rate, n_delta_rate]`.

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{MaterialConfig, ToolConfig};
use crate::control::{passivity_audit, AuditRecord, AuditReport, ControllerConfig, LawUsed, OscController};
use crate::cutting::{CuttingOptions, MaterialParams};
use crate::error::{Error, Result};
use crate::path::CutterPath;
use crate::plant::{Plant, SafetyLimits, StepConfig};
use crate::tool::ToolGeometry;
use crate::workpiece::{slitting_orientation, GridSpec, Heightfield, SurfaceFamily, SurfaceSpec};

pub const ACTION_DIM: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ActionBounds {
    #[serde(rename = "stiffness_min_per_s2")]
    pub stiffness_min: f64,
    #[serde(rename = "stiffness_max_per_s2")]
    pub stiffness_max: f64,
    pub t_delta_rate_max: f64,
    pub n_delta_rate_max_mm_s: f64,
}

impl Default for ActionBounds {
    fn default() -> Self {
        Self { stiffness_min: 100.0, stiffness_max: 2000.0, t_delta_rate_max: 1.0, n_delta_rate_max_mm_s: 5.0 }
    }
}

impl ActionBounds {
    pub fn low(&self) -> [f64; ACTION_DIM] {
        [self.stiffness_min, self.stiffness_min, self.stiffness_min, -self.t_delta_rate_max, -self.n_delta_rate_max_mm_s]
    }
    pub fn high(&self) -> [f64; ACTION_DIM] {
        [self.stiffness_max, self.stiffness_max, self.stiffness_max, self.t_delta_rate_max, self.n_delta_rate_max_mm_s]
    }
    pub fn clip(&self, a: &[f64]) -> ([f64; ACTION_DIM], bool) {
        let (lo, hi) = (self.low(), self.high());
        let mut out = [0.0; ACTION_DIM];
        let mut clipped = false;
        for i in 0..ACTION_DIM {
            out[i] = a[i].clamp(lo[i], hi[i]);
            clipped |= out[i] != a[i];
        }
        (out, clipped)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathTemplate {
    pub x_start_mm: f64,
    pub x_end_mm: f64,
    /// Grid row the kerf mid-plane sits on.
    pub row: usize,
    pub n_ctrl: usize,
    pub speed_mm_s: f64,
    /// Height of the saw bottom above the surface at the control points.
    pub clearance_mm: f64,
}

impl Default for PathTemplate {
    fn default() -> Self {
        Self { x_start_mm: 30.0, x_end_mm: 170.0, row: 4, n_ctrl: 24, speed_mm_s: 25.0, clearance_mm: 0.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RewardWeights {
    pub q_mrv_per_mm3: f64,
    pub q_cut_per_s: f64,
    pub q_d_per_mm2: [f64; 3],
    pub f_max_n: f64,
    pub ref_mrv_rate_mm3_s: f64,
    /// Overrides the calibrated force weight.
    pub q_f_per_n2: Option<[f64; 3]>,
    pub safety_penalty: f64,
}

impl Default for RewardWeights {
    fn default() -> Self {
        Self {
            q_mrv_per_mm3: 1e-3,
            q_cut_per_s: 0.02,
            q_d_per_mm2: [1e-3; 3],
            f_max_n: 50.0,
            // 25 mm/s at 5 mm depth through a 0.5 mm kerf
            ref_mrv_rate_mm3_s: 62.5,
            q_f_per_n2: None,
            safety_penalty: 5.0,
        }
    }
}

/// Force weight at which one control step at `f_max` costs exactly the
/// reward of one step at the reference removal rate:
/// `Q_f = Q_mrv * ref_rate * dt / F_max^2`.
pub fn calibrate_force_weight(q_mrv: f64, ref_mrv_rate: f64, control_dt: f64, f_max: f64) -> Result<f64> {
    if !(f_max > 0.0) {
        return Err(Error::InvalidConfig(format!("F_max must be positive, got {f_max}")));
    }
    Ok(q_mrv * ref_mrv_rate * control_dt / (f_max * f_max))
}

impl RewardWeights {
    pub fn q_f(&self, control_dt: f64) -> Result<Vector3<f64>> {
        match self.q_f_per_n2 {
            Some(q) => Ok(q.into()),
            None => Ok(Vector3::repeat(calibrate_force_weight(
                self.q_mrv_per_mm3,
                self.ref_mrv_rate_mm3_s,
                control_dt,
                self.f_max_n,
            )?)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RandomizationSpec {
    pub kc_lo_n_per_mm2: [f64; 3],
    pub kc_hi_n_per_mm2: [f64; 3],
    pub ke_lo_n_per_mm: [f64; 3],
    pub ke_hi_n_per_mm: [f64; 3],
    /// Relative weights of flat, sinusoidal, perlin, fractal.
    pub family_weights: [f64; 4],
    pub amplitude_mm: [f64; 2],
    pub wavelength_mm: [f64; 2],
    pub base_height_mm: f64,
    pub octaves: usize,
    pub lacunarity: f64,
    pub persistence: f64,
}

impl Default for RandomizationSpec {
    fn default() -> Self {
        Self {
            kc_lo_n_per_mm2: [300.0, 700.0, -0.05],
            kc_hi_n_per_mm2: [750.0, 1000.0, 0.1],
            ke_lo_n_per_mm: [3.0, 0.4, -0.01],
            ke_hi_n_per_mm: [9.5, 7.0, 0.001],
            family_weights: [1.0, 1.0, 1.0, 1.0],
            amplitude_mm: [0.5, 3.0],
            wavelength_mm: [40.0, 120.0],
            base_height_mm: 20.0,
            octaves: 4,
            lacunarity: 2.0,
            persistence: 0.5,
        }
    }
}

fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        rng.gen_range(lo..hi)
    } else {
        lo
    }
}

impl RandomizationSpec {
    pub fn validate(&self) -> Result<()> {
        let pairs = (0..3)
            .map(|i| (self.kc_lo_n_per_mm2[i], self.kc_hi_n_per_mm2[i]))
            .chain((0..3).map(|i| (self.ke_lo_n_per_mm[i], self.ke_hi_n_per_mm[i])))
            .chain([(self.amplitude_mm[0], self.amplitude_mm[1]), (self.wavelength_mm[0], self.wavelength_mm[1])]);
        for (lo, hi) in pairs {
            if !(lo <= hi) {
                return Err(Error::InvalidConfig(format!("randomization range [{lo}, {hi}] is empty")));
            }
        }
        if self.family_weights.iter().any(|w| *w < 0.0) || self.family_weights.iter().sum::<f64>() <= 0.0 {
            return Err(Error::InvalidConfig("surface family weights must be non-negative and not all zero".into()));
        }
        if self.amplitude_mm[0] < 0.0 || self.wavelength_mm[0] <= 0.0 {
            return Err(Error::InvalidConfig("surface amplitude/wavelength ranges out of domain".into()));
        }
        Ok(())
    }

    pub fn sample_material(&self, rng: &mut ChaCha8Rng) -> MaterialParams {
        let mut kc = [0.0; 3];
        let mut ke = [0.0; 3];
        for i in 0..3 {
            kc[i] = uniform(rng, self.kc_lo_n_per_mm2[i], self.kc_hi_n_per_mm2[i]);
        }
        for i in 0..3 {
            ke[i] = uniform(rng, self.ke_lo_n_per_mm[i], self.ke_hi_n_per_mm[i]);
        }
        MaterialParams { kc: kc.into(), ke: ke.into() }
    }

    pub fn sample_surface(&self, rng: &mut ChaCha8Rng) -> SurfaceSpec {
        let total: f64 = self.family_weights.iter().sum();
        let mut pick = rng.gen_range(0.0..total);
        let families = [SurfaceFamily::Flat, SurfaceFamily::Sinusoidal, SurfaceFamily::Perlin, SurfaceFamily::Fractal];
        let mut family = SurfaceFamily::Flat;
        for (f, w) in families.iter().zip(self.family_weights) {
            if w > 0.0 {
                family = *f;
                if pick < w {
                    break;
                }
                pick -= w;
            }
        }
        SurfaceSpec {
            family,
            base_height_mm: self.base_height_mm,
            amplitude_mm: uniform(rng, self.amplitude_mm[0], self.amplitude_mm[1]),
            wavelength_mm: uniform(rng, self.wavelength_mm[0], self.wavelength_mm[1]),
            octaves: self.octaves,
            lacunarity: self.lacunarity,
            persistence: self.persistence,
            seed: rng.gen(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvConfig {
    pub tool: ToolConfig,
    /// Fixed material; when absent it is drawn from `randomization`.
    pub material: Option<MaterialConfig>,
    /// Fixed surface; when absent it is drawn from `randomization`.
    pub surface: Option<SurfaceSpec>,
    pub randomization: RandomizationSpec,
    pub grid: GridSpec,
    pub path: PathTemplate,
    pub controller: ControllerConfig,
    pub step: StepConfig,
    pub reward: RewardWeights,
    pub action_bounds: ActionBounds,
    pub cutting: CuttingOptions,
    pub t_delta_max_s: f64,
    pub n_delta_max_mm: f64,
    /// Constant extra depth added to the policy's normal offset.
    pub doc_offset_mm: f64,
    pub augmented_obs: bool,
    pub outer_product_obs: bool,
    pub capture_radius_mm: f64,
    pub time_margin_s: f64,
    pub max_tracking_error_mm: f64,
    pub workspace_margin_mm: f64,
    pub record_trajectory: bool,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            tool: ToolConfig::default(),
            material: None,
            surface: None,
            randomization: RandomizationSpec::default(),
            grid: GridSpec { nx: 2001, ny: 9, dx_mm: 0.1, dy_mm: 0.5, origin_mm: [0.0, 0.0] },
            path: PathTemplate::default(),
            controller: ControllerConfig::default(),
            step: StepConfig::default(),
            reward: RewardWeights::default(),
            action_bounds: ActionBounds::default(),
            cutting: CuttingOptions::default(),
            t_delta_max_s: 2.0,
            n_delta_max_mm: 10.0,
            doc_offset_mm: 0.0,
            augmented_obs: true,
            outer_product_obs: false,
            capture_radius_mm: 2.0,
            time_margin_s: 1.0,
            max_tracking_error_mm: 40.0,
            workspace_margin_mm: 40.0,
            record_trajectory: false,
        }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<()> {
        self.tool.build()?;
        if let Some(m) = &self.material {
            m.build()?;
        }
        if let Some(s) = &self.surface {
            s.validate()?;
        }
        self.randomization.validate()?;
        self.grid.validate()?;
        self.controller.validate()?;
        self.step.substeps_per_control()?;
        self.reward.q_f(self.step.control_dt_s)?;
        let b = &self.action_bounds;
        if !(b.stiffness_min > 0.0 && b.stiffness_min <= b.stiffness_max && b.t_delta_rate_max >= 0.0 && b.n_delta_rate_max_mm_s >= 0.0) {
            return Err(Error::InvalidConfig("action bounds are inconsistent".into()));
        }
        if self.path.row >= self.grid.ny {
            return Err(Error::InvalidConfig(format!("path row {} outside grid", self.path.row)));
        }
        if !(self.path.speed_mm_s > 0.0) {
            return Err(Error::InvalidConfig("path speed must be positive".into()));
        }
        if !(self.t_delta_max_s >= 0.0 && self.n_delta_max_mm >= 0.0 && self.capture_radius_mm > 0.0) {
            return Err(Error::InvalidConfig("offset bounds and capture radius must be non-negative".into()));
        }
        Ok(())
    }

    pub fn obs_dim(&self) -> usize {
        15 + if self.outer_product_obs { 8 } else { 0 } + if self.augmented_obs { 2 } else { 0 }
    }
}

/// Slot indices of the observation vector for a given config.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObsLayout {
    pub alignment: (usize, usize),
    pub e: usize,
    pub x_dot: usize,
    pub f_e: usize,
    pub t_delta: usize,
    pub n_delta: usize,
    pub k_p: usize,
    pub tank: Option<usize>,
    pub dim: usize,
}

impl ObsLayout {
    pub fn for_config(cfg: &EnvConfig) -> Self {
        let a = if cfg.outer_product_obs { 9 } else { 1 };
        Self {
            alignment: (0, a),
            e: a,
            x_dot: a + 3,
            f_e: a + 6,
            t_delta: a + 9,
            n_delta: a + 10,
            k_p: a + 11,
            tank: cfg.augmented_obs.then_some(a + 14),
            dim: cfg.obs_dim(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub mrv_term: f64,
    pub time_term: f64,
    pub deviation_term: f64,
    pub force_term: f64,
    /// Non-positive; set only on a safety termination.
    pub safety_term: f64,
    pub total: f64,
}

impl RewardBreakdown {
    pub fn new(mrv: f64, time: f64, deviation: f64, force: f64, safety: f64) -> Self {
        Self {
            mrv_term: mrv,
            time_term: time,
            deviation_term: deviation,
            force_term: force,
            safety_term: safety,
            total: mrv - time - deviation - force + safety,
        }
    }

    pub fn accumulate(&mut self, r: &RewardBreakdown) {
        self.mrv_term += r.mrv_term;
        self.time_term += r.time_term;
        self.deviation_term += r.deviation_term;
        self.force_term += r.force_term;
        self.safety_term += r.safety_term;
        self.total += r.total;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    PathEnd,
    TimeLimit,
    Safety,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct StepInfo {
    pub time_s: f64,
    pub progress_s: f64,
    pub action_clipped: bool,
    pub termination: Option<Termination>,
    pub safety_reason: Option<String>,
    pub chip_volume_mm3: f64,
    pub removed_volume_mm3: f64,
    pub tank_j: f64,
    pub fallback_steps: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    pub obs: Vec<f64>,
    pub reward: RewardBreakdown,
    pub done: bool,
    pub info: StepInfo,
}

/// Reset/step protocol shared by the milling environment and test rigs.
pub trait Environment {
    fn obs_dim(&self) -> usize;
    fn action_low(&self) -> Vec<f64>;
    fn action_high(&self) -> Vec<f64>;
    fn reset(&mut self, seed: u64) -> Result<Vec<f64>>;
    fn step(&mut self, action: &[f64]) -> Result<StepResult>;
}

/// One physics step of the trajectory log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub control_step: usize,
    pub t_s: f64,
    pub x_mm: [f64; 3],
    pub x_dot_mm_s: [f64; 3],
    /// Error at the end of the physics step.
    pub e_mm: [f64; 3],
    pub f_e_n: [f64; 3],
    pub f_c_n: [f64; 3],
    pub k_p: [f64; 3],
    pub t_delta_s: f64,
    pub n_delta_mm: f64,
    pub h_t_j: f64,
    pub sigma: f64,
    pub mrv_rate_mm3_s: f64,
    pub chip_volume_mm3: f64,
    pub removed_volume_mm3: f64,
    pub engaged: usize,
    pub fallback: bool,
}

pub const LOG_HEADER: [&str; 30] = [
    "control_step", "t_s", "x_mm", "y_mm", "z_mm", "vx_mm_s", "vy_mm_s", "vz_mm_s", "ex_mm", "ey_mm", "ez_mm",
    "fex_n", "fey_n", "fez_n", "fcx_n", "fcy_n", "fcz_n", "kpx", "kpy", "kpz", "t_delta_s", "n_delta_mm", "h_t_j",
    "sigma", "mrv_rate_mm3_s", "chip_volume_mm3", "removed_volume_mm3", "engaged", "fallback", "law",
];

impl LogRecord {
    pub fn csv_row(&self) -> Vec<String> {
        let mut v = vec![self.control_step.to_string(), format!("{:?}", self.t_s)];
        for arr in [self.x_mm, self.x_dot_mm_s, self.e_mm, self.f_e_n, self.f_c_n, self.k_p] {
            v.extend(arr.iter().map(|x| format!("{x:?}")));
        }
        for x in [self.t_delta_s, self.n_delta_mm, self.h_t_j, self.sigma, self.mrv_rate_mm3_s, self.chip_volume_mm3, self.removed_volume_mm3] {
            v.push(format!("{x:?}"));
        }
        v.push(self.engaged.to_string());
        v.push((self.fallback as u8).to_string());
        v.push(if self.fallback { "fallback".into() } else { "nominal".into() });
        v
    }
}

#[derive(Debug, Clone)]
pub struct MillingEnv {
    cfg: EnvConfig,
    tool: ToolGeometry,
    q_f: Vector3<f64>,
    substeps: usize,
    plant: Option<Plant>,
    path: Option<CutterPath>,
    material: MaterialParams,
    surface: Option<SurfaceSpec>,
    t_delta: f64,
    n_delta: f64,
    control_steps: usize,
    done: bool,
    episode: RewardBreakdown,
    chip_volume: f64,
    removed_volume: f64,
    fallback_steps: usize,
    audit: Vec<AuditRecord>,
    log: Vec<LogRecord>,
    last_force: Vector3<f64>,
    last_tank_rate: f64,
    initial_volume: f64,
    max_error: f64,
    termination: Option<Termination>,
}

impl MillingEnv {
    pub fn new(cfg: EnvConfig) -> Result<Self> {
        cfg.validate()?;
        let tool = cfg.tool.build()?;
        let q_f = cfg.reward.q_f(cfg.step.control_dt_s)?;
        let substeps = cfg.step.substeps_per_control()?;
        Ok(Self {
            cfg,
            tool,
            q_f,
            substeps,
            plant: None,
            path: None,
            material: MaterialParams::reference(),
            surface: None,
            t_delta: 0.0,
            n_delta: 0.0,
            control_steps: 0,
            done: true,
            episode: RewardBreakdown::default(),
            chip_volume: 0.0,
            removed_volume: 0.0,
            fallback_steps: 0,
            audit: Vec::new(),
            log: Vec::new(),
            last_force: Vector3::zeros(),
            last_tank_rate: 0.0,
            initial_volume: 0.0,
            max_error: 0.0,
            termination: None,
        })
    }

    pub fn config(&self) -> &EnvConfig {
        &self.cfg
    }
    pub fn tool(&self) -> &ToolGeometry {
        &self.tool
    }
    pub fn material(&self) -> &MaterialParams {
        &self.material
    }
    pub fn surface(&self) -> Option<&SurfaceSpec> {
        self.surface.as_ref()
    }
    pub fn plant(&self) -> Option<&Plant> {
        self.plant.as_ref()
    }
    pub fn path(&self) -> Option<&CutterPath> {
        self.path.as_ref()
    }
    pub fn q_f(&self) -> Vector3<f64> {
        self.q_f
    }
    pub fn offsets(&self) -> (f64, f64) {
        (self.t_delta, self.n_delta)
    }
    pub fn episode_reward(&self) -> &RewardBreakdown {
        &self.episode
    }
    pub fn audit_records(&self) -> &[AuditRecord] {
        &self.audit
    }
    pub fn trajectory(&self) -> &[LogRecord] {
        &self.log
    }
    pub fn is_done(&self) -> bool {
        self.done
    }
    /// Drop the episode state; `step` fails until the next reset.
    pub fn release(&mut self) {
        self.plant = None;
        self.path = None;
        self.log.clear();
        self.audit.clear();
        self.done = true;
    }
    pub fn chip_volume(&self) -> f64 {
        self.chip_volume
    }
    pub fn removed_volume(&self) -> f64 {
        self.removed_volume
    }
    /// Volume lost by the heightfield since reset.
    pub fn heightfield_delta(&self) -> f64 {
        self.plant.as_ref().map(|p| self.initial_volume - p.workpiece.volume()).unwrap_or(0.0)
    }
    pub fn audit_report(&self, tol_per_step: f64) -> AuditReport {
        passivity_audit(&self.audit, tol_per_step)
    }

    pub fn report(&self, seed: u64) -> EpisodeReport {
        EpisodeReport {
            seed,
            control_steps: self.control_steps,
            duration_s: self.plant.as_ref().map(|p| p.state().time).unwrap_or(0.0),
            reward: self.episode,
            termination: self.termination,
            chip_volume_mm3: self.chip_volume,
            removed_volume_mm3: self.removed_volume,
            max_error_mm: self.max_error,
            fallback_steps: self.fallback_steps,
            audit: self.audit_report(1e-6),
            material: MaterialConfig::from(self.material),
            surface: self.surface.clone(),
        }
    }

    fn n_eff(&self, n_delta: f64) -> f64 {
        n_delta - self.cfg.doc_offset_mm
    }

    fn setpoint(&self, t: f64) -> Result<Vector3<f64>> {
        let path = self.path.as_ref().expect("episode active");
        path.setpoint(t, self.t_delta, self.n_eff(self.n_delta))
    }

    fn build_episode(&mut self, seed: u64) -> Result<()> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let spec = &self.cfg.randomization;
        // always draw both so fixed overrides do not shift the random stream
        let material = spec.sample_material(&mut rng);
        let surface = spec.sample_surface(&mut rng);
        self.material = match &self.cfg.material {
            Some(m) => m.build()?,
            None => material,
        };
        let surface = self.cfg.surface.clone().unwrap_or(surface);
        let hf = Heightfield::generate(&surface, self.cfg.grid)?;
        self.surface = Some(surface);

        let tool = &self.tool;
        let tp = &self.cfg.path;
        let row_y = hf.node_y(tp.row);
        // kerf mid-plane on the grid row; the axis points along -y
        let y_c = row_y + 0.5 * tool.axial_length() * tool.disc_stack_sign();
        let path = CutterPath::over_surface(&hf, row_y, tp.x_start_mm, tp.x_end_mm, tp.n_ctrl, tool.radius(), tp.clearance_mm, tp.speed_mm_s)?;
        let path = shift_y(&path, y_c - row_y)?;

        let g = &self.cfg.grid;
        let m = self.cfg.workspace_margin_mm;
        let zmin = hf.heights().iter().cloned().fold(f64::INFINITY, f64::min);
        let limits = SafetyLimits {
            workspace_min_mm: [g.origin_mm[0] - m, g.origin_mm[1] - m, zmin - m],
            workspace_max_mm: [g.x_max() + m, g.y_max() + m, hf.max_height() + 2.0 * tool.radius() + m],
            max_tracking_error_mm: self.cfg.max_tracking_error_mm,
        };
        self.t_delta = 0.0;
        self.n_delta = 0.0;
        self.path = Some(path);
        let x0 = self.setpoint(0.0)?;
        let v0 = self.path.as_ref().unwrap().eval(0.0)?.velocity;
        let controller = OscController::new(self.cfg.controller.clone())?;
        self.initial_volume = hf.volume();
        let mut plant = Plant::new(
            tool.clone(),
            self.material,
            self.cfg.cutting,
            hf,
            controller,
            slitting_orientation(),
            self.cfg.step,
            limits,
            x0,
            v0,
        )?;
        plant.set_spindle_angle(rng.gen_range(0.0..std::f64::consts::TAU));
        self.plant = Some(plant);
        Ok(())
    }

    fn observation(&self) -> Vec<f64> {
        let plant = self.plant.as_ref().expect("episode active");
        let s = plant.state();
        let path = self.path.as_ref().unwrap();
        let c_dot = path.eval(s.time + self.t_delta).map(|p| p.velocity).unwrap_or_else(|_| Vector3::zeros());
        let mut obs = Vec::with_capacity(self.cfg.obs_dim());
        if self.cfg.outer_product_obs {
            let m = c_dot * s.x_dot.transpose();
            for i in 0..3 {
                for j in 0..3 {
                    obs.push(m[(i, j)]);
                }
            }
        } else {
            obs.push(c_dot.dot(&s.x_dot));
        }
        obs.extend(s.e.iter());
        obs.extend(s.x_dot.iter());
        obs.extend(self.last_force.iter());
        obs.push(self.t_delta);
        obs.push(self.n_delta);
        obs.extend(plant.controller.stiffness().iter());
        if self.cfg.augmented_obs {
            obs.push(plant.controller.tank().h);
            obs.push(self.last_tank_rate);
        }
        obs
    }

    fn info(&self, clipped: bool, safety_reason: Option<String>) -> StepInfo {
        let plant = self.plant.as_ref().unwrap();
        StepInfo {
            time_s: plant.state().time,
            progress_s: plant.state().time + self.t_delta,
            action_clipped: clipped,
            termination: self.termination,
            safety_reason,
            chip_volume_mm3: self.chip_volume,
            removed_volume_mm3: self.removed_volume,
            tank_j: plant.controller.tank().h,
            fallback_steps: self.fallback_steps,
        }
    }
}

fn shift_y(path: &CutterPath, dy: f64) -> Result<CutterPath> {
    let mut spec = path.to_spec();
    for p in &mut spec.control_points_mm {
        p[1] += dy;
    }
    CutterPath::from_spec(&spec)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeReport {
    pub seed: u64,
    pub control_steps: usize,
    pub duration_s: f64,
    pub reward: RewardBreakdown,
    pub termination: Option<Termination>,
    pub chip_volume_mm3: f64,
    pub removed_volume_mm3: f64,
    pub max_error_mm: f64,
    pub fallback_steps: usize,
    pub audit: AuditReport,
    pub material: MaterialConfig,
    pub surface: Option<SurfaceSpec>,
}

impl Environment for MillingEnv {
    fn obs_dim(&self) -> usize {
        self.cfg.obs_dim()
    }
    fn action_low(&self) -> Vec<f64> {
        self.cfg.action_bounds.low().to_vec()
    }
    fn action_high(&self) -> Vec<f64> {
        self.cfg.action_bounds.high().to_vec()
    }

    fn reset(&mut self, seed: u64) -> Result<Vec<f64>> {
        self.build_episode(seed)?;
        self.control_steps = 0;
        self.done = false;
        self.episode = RewardBreakdown::default();
        self.chip_volume = 0.0;
        self.removed_volume = 0.0;
        self.fallback_steps = 0;
        self.audit.clear();
        self.log.clear();
        self.last_force = Vector3::zeros();
        self.last_tank_rate = 0.0;
        self.max_error = 0.0;
        self.termination = None;
        Ok(self.observation())
    }

    fn step(&mut self, action: &[f64]) -> Result<StepResult> {
        if self.done {
            return Err(Error::EpisodeFinished);
        }
        if action.len() != ACTION_DIM {
            return Err(Error::DimensionMismatch { expected: format!("{ACTION_DIM} actions"), got: action.len().to_string() });
        }
        if action.iter().any(|a| !a.is_finite()) {
            return Err(Error::InvalidAction(format!("non-finite action {action:?}")));
        }
        let (a, clipped) = self.cfg.action_bounds.clip(action);
        let dt = self.cfg.step.physics_dt_s;
        let control_dt = self.cfg.step.control_dt_s;
        let (t_max, n_max) = (self.cfg.t_delta_max_s, self.cfg.n_delta_max_mm);
        self.plant.as_mut().unwrap().controller.set_target_stiffness(Vector3::new(a[0], a[1], a[2]));

        let h_start = self.plant.as_ref().unwrap().controller.tank().h;
        let mut f_sum = Vector3::zeros();
        let mut n_done = 0usize;
        let mut mrv = 0.0;
        let mut safety_reason = None;
        for _ in 0..self.substeps {
            let t = self.plant.as_ref().unwrap().state().time;
            let x_d = self.setpoint(t)?;
            self.t_delta = (self.t_delta + a[3] * dt).clamp(-t_max, t_max);
            self.n_delta = (self.n_delta + a[4] * dt).clamp(-n_max, n_max);
            let x_d_next = self.setpoint((self.plant.as_ref().unwrap().state().steps + 1) as f64 * dt)?;
            let plant = self.plant.as_mut().unwrap();
            match plant.step(x_d, x_d_next) {
                Ok(rec) => {
                    n_done += 1;
                    f_sum += rec.f_e;
                    let chip = rec.mrv_rate * dt;
                    mrv += chip;
                    self.chip_volume += chip;
                    self.removed_volume += rec.removed_volume;
                    self.audit.push(rec.audit());
                    let fallback = rec.outcome.law_used == LawUsed::Fallback;
                    self.fallback_steps += fallback as usize;
                    let s = *plant.state();
                    self.max_error = self.max_error.max(s.e.norm());
                    if self.cfg.record_trajectory {
                        let o = &rec.outcome;
                        self.log.push(LogRecord {
                            control_step: self.control_steps,
                            t_s: s.time,
                            x_mm: s.x.into(),
                            x_dot_mm_s: s.x_dot.into(),
                            e_mm: s.e.into(),
                            f_e_n: rec.f_e.into(),
                            f_c_n: o.f_c.into(),
                            k_p: o.k_p_diag.into(),
                            t_delta_s: self.t_delta,
                            n_delta_mm: self.n_delta,
                            h_t_j: o.tank.h,
                            sigma: o.tank.sigma,
                            mrv_rate_mm3_s: rec.mrv_rate,
                            chip_volume_mm3: chip,
                            removed_volume_mm3: rec.removed_volume,
                            engaged: rec.engaged,
                            fallback,
                        });
                    }
                }
                Err(e) if e.is_safety_stop() => {
                    log::debug!("safety stop: {e}");
                    safety_reason = Some(e.to_string());
                    break;
                }
                Err(e) => return Err(e),
            }
        }

        let plant = self.plant.as_ref().unwrap();
        let s = *plant.state();
        self.last_force = if n_done > 0 { f_sum / n_done as f64 } else { Vector3::zeros() };
        let h_end = plant.controller.tank().h;
        self.last_tank_rate = (h_end - h_start) / control_dt;

        let w = &self.cfg.reward;
        let q_d = Vector3::from(w.q_d_per_mm2);
        let deviation = s.e.component_mul(&q_d).dot(&s.e);
        let force = self.last_force.component_mul(&self.q_f).dot(&self.last_force);
        let safety = if safety_reason.is_some() { -w.safety_penalty } else { 0.0 };
        let reward = RewardBreakdown::new(w.q_mrv_per_mm3 * mrv, w.q_cut_per_s * control_dt, deviation, force, safety);
        self.episode.accumulate(&reward);
        self.control_steps += 1;

        let path = self.path.as_ref().unwrap();
        let progress = s.time + self.t_delta;
        if safety_reason.is_some() {
            self.termination = Some(Termination::Safety);
        } else if progress >= path.duration() && (s.x - self.setpoint(s.time)?).norm() <= self.cfg.capture_radius_mm {
            self.termination = Some(Termination::PathEnd);
        } else if s.time >= path.duration() + self.cfg.t_delta_max_s + self.cfg.time_margin_s {
            self.termination = Some(Termination::TimeLimit);
        }
        self.done = self.termination.is_some();
        let obs = self.observation();
        Ok(StepResult { obs, reward, done: self.done, info: self.info(clipped, safety_reason) })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn force_weight_scaling() {
        let a = calibrate_force_weight(1e-3, 62.5, 0.02, 50.0).unwrap();
        let b = calibrate_force_weight(1e-3, 62.5, 0.02, 100.0).unwrap();
        assert!((a / b - 4.0).abs() < 1e-12);
        assert_eq!(calibrate_force_weight(0.0, 62.5, 0.02, 50.0).unwrap(), 0.0);
        assert!(calibrate_force_weight(1e-3, 62.5, 0.02, 0.0).is_err());
        // one step at F_max costs one step of reference removal
        assert!((a * 50.0 * 50.0 - 1e-3 * 62.5 * 0.02).abs() < 1e-15);
    }

    #[test]
    fn clip_flags() {
        let b = ActionBounds::default();
        let (a, c) = b.clip(&[800.0, 800.0, 800.0, 0.0, 0.0]);
        assert!(!c);
        assert_eq!(a[0], 800.0);
        let (a, c) = b.clip(&[1e9, 0.0, 800.0, -4.0, 0.0]);
        assert!(c);
        assert_eq!(a, [2000.0, 100.0, 800.0, -1.0, 0.0]);
    }

    #[test]
    fn obs_dims() {
        let mut c = EnvConfig::default();
        assert_eq!(c.obs_dim(), 17);
        c.augmented_obs = false;
        assert_eq!(c.obs_dim(), 15);
        c.outer_product_obs = true;
        assert_eq!(c.obs_dim(), 23);
    }
}
