//! Mechanistic cutting forces: feed per tooth, chip thickness, per-element
//! forces and their sum over the engaged elements of a tool.

use std::f64::consts::TAU;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tool::{element_frame, ToolGeometry};

/// Cutting constants in (tangential, radial, axial) order.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaterialParams {
    /// N/mm^2
    pub kc: Vector3<f64>,
    /// N/mm
    pub ke: Vector3<f64>,
}

impl MaterialParams {
    pub fn new(kc: [f64; 3], ke: [f64; 3], allow_signed: bool) -> Result<Self> {
        let m = Self { kc: kc.into(), ke: ke.into() };
        m.validate(allow_signed)?;
        Ok(m)
    }

    pub fn validate(&self, allow_signed: bool) -> Result<()> {
        if self.kc.iter().chain(self.ke.iter()).any(|v| !v.is_finite()) {
            return Err(Error::InvalidConfig("material constants must be finite".into()));
        }
        if !allow_signed && (self.kc[0] < 0.0 || self.kc[1] < 0.0) {
            return Err(Error::InvalidConfig(
                "negative tangential/radial cutting constant (set allow_signed to permit)".into(),
            ));
        }
        Ok(())
    }

    /// Aluminium-like constants fitted in the slitting experiments.
    pub fn reference() -> Self {
        Self {
            kc: Vector3::new(718.7, 839.9, 0.03656),
            ke: Vector3::new(8.337, 0.4894, -0.009854),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeedState {
    /// mm/s in the world frame
    pub v_w: Vector3<f64>,
    pub r_w_to_m: Matrix3<f64>,
    pub theta: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ForceResult {
    pub f_m: Vector3<f64>,
    pub f_w: Vector3<f64>,
    pub engaged_count: usize,
    /// Chip-load removal rate, mm^3/s.
    pub mrv_rate: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CuttingOptions {
    /// Elements with no chip load (h_raw <= 0) produce no force at all.
    pub edge_force_when_engaged: bool,
    /// Use the flute-to-model rotation in the chip projection instead of its transpose.
    pub reversed_rotation: bool,
}

impl Default for CuttingOptions {
    fn default() -> Self {
        Self { edge_force_when_engaged: true, reversed_rotation: false }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChipThickness {
    pub h: f64,
    pub raw: f64,
}

/// Boolean engagement matrix, row-major `[flute][disc]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Engagement {
    nf: usize,
    nd: usize,
    bits: Vec<bool>,
}

impl Engagement {
    pub fn none(nf: usize, nd: usize) -> Self {
        Self { nf, nd, bits: vec![false; nf * nd] }
    }
    pub fn all(nf: usize, nd: usize) -> Self {
        Self { nf, nd, bits: vec![true; nf * nd] }
    }
    pub fn for_tool(tool: &ToolGeometry) -> Self {
        Self::none(tool.n_flutes(), tool.n_discs())
    }
    pub fn dims(&self) -> (usize, usize) {
        (self.nf, self.nd)
    }
    pub fn get(&self, f: usize, d: usize) -> bool {
        self.bits[f * self.nd + d]
    }
    pub fn set(&mut self, f: usize, d: usize, v: bool) {
        self.bits[f * self.nd + d] = v;
    }
    pub fn count(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }
}

pub fn feed_per_tooth(feed: &FeedState, tool: &ToolGeometry) -> Result<Vector3<f64>> {
    let w = tool.spindle_speed();
    if !(w > 0.0) {
        return Err(Error::ZeroSpindleSpeed(w));
    }
    Ok(feed.r_w_to_m * feed.v_w / (tool.n_flutes() as f64 * w))
}

pub fn chip_thickness(f_m: &Vector3<f64>, theta: f64) -> ChipThickness {
    let raw = f_m.x * theta.sin() + f_m.y * theta.cos();
    ChipThickness { h: raw.max(0.0), raw }
}

pub fn chip_thickness_with(f_m: &Vector3<f64>, theta: f64, opts: &CuttingOptions) -> ChipThickness {
    if opts.reversed_rotation {
        let raw = -f_m.x * theta.sin() + f_m.y * theta.cos();
        ChipThickness { h: raw.max(0.0), raw }
    } else {
        chip_thickness(f_m, theta)
    }
}

pub fn flute_force(material: &MaterialParams, b: f64, h: f64) -> Vector3<f64> {
    b * material.ke + (b * h) * material.kc
}

pub fn total_force(
    tool: &ToolGeometry,
    material: &MaterialParams,
    feed: &FeedState,
    engagement: &Engagement,
    opts: &CuttingOptions,
) -> Result<ForceResult> {
    if engagement.dims() != (tool.n_flutes(), tool.n_discs()) {
        return Err(Error::DimensionMismatch {
            expected: format!("{}x{}", tool.n_flutes(), tool.n_discs()),
            got: format!("{}x{}", engagement.nf, engagement.nd),
        });
    }
    let f_m = feed_per_tooth(feed, tool)?;
    let mut force = Vector3::zeros();
    let mut chip_area = 0.0;
    for (f, d) in tool.elements() {
        if !engagement.get(f, d) {
            continue;
        }
        let theta = tool.element_angle(feed.theta, f, d);
        let chip = chip_thickness_with(&f_m, theta, opts);
        if opts.edge_force_when_engaged && chip.raw <= 0.0 {
            continue;
        }
        let b = tool.edge_length(f, d);
        force += element_frame(theta).rotation * flute_force(material, b, chip.h);
        chip_area += b * chip.h;
    }
    Ok(ForceResult {
        f_m: force,
        f_w: feed.r_w_to_m.transpose() * force,
        engaged_count: engagement.count(),
        mrv_rate: chip_area * TAU * tool.radius() * tool.spindle_speed(),
    })
}

/// Mean force over `n_samples` equally spaced spindle angles; the
/// engagement is re-queried for every sample.
pub fn revolution_average_force<E>(
    tool: &ToolGeometry,
    material: &MaterialParams,
    feed: &FeedState,
    n_samples: usize,
    opts: &CuttingOptions,
    mut engagement_at: E,
) -> Result<Vector3<f64>>
where
    E: FnMut(f64) -> Result<Engagement>,
{
    if n_samples < tool.n_flutes() {
        return Err(Error::InvalidConfig(format!(
            "need at least {} angle samples, got {n_samples}",
            tool.n_flutes()
        )));
    }
    let mut sum = Vector3::zeros();
    for i in 0..n_samples {
        let theta = feed.theta + TAU * i as f64 / n_samples as f64;
        let g = engagement_at(theta)?;
        let fs = FeedState { theta, ..*feed };
        sum += total_force(tool, material, &fs, &g, opts)?.f_m;
    }
    Ok(sum / n_samples as f64)
}
