//! Discretized rotary cutters (end mills and slitting saws).
//!
//! A tool is split into `n_flutes x n_discs` cutting elements. Angles are
//! measured clockwise from the model-frame y axis about z, and frame M sits on
//! the lower axial face of the tool.

use std::f64::consts::TAU;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub fn rpm_to_hz(rpm: f64) -> f64 {
    rpm / 60.0
}

pub fn wrap_angle(a: f64) -> f64 {
    let r = a.rem_euclid(TAU);
    // rem_euclid can return TAU itself for tiny negative inputs
    if r >= TAU {
        0.0
    } else {
        r
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolGeometry {
    radius: f64,
    pitch: f64,
    helix: f64,
    n_flutes: usize,
    n_discs: usize,
    /// Row-major `[flute][disc]`.
    edge_length: Vec<f64>,
    /// Revolutions per second.
    spindle_speed: f64,
    disc_stack_sign: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ElementFrame {
    pub theta: f64,
    pub rotation: Matrix3<f64>,
}

impl ToolGeometry {
    /// Uniformly pitched tool with the same edge length on every element.
    pub fn uniform(
        radius_mm: f64,
        n_flutes: usize,
        n_discs: usize,
        edge_length_mm: f64,
        helix_rad: f64,
        spindle_rpm: f64,
    ) -> Result<Self> {
        let pitch = if n_flutes > 0 { TAU / n_flutes as f64 } else { 0.0 };
        Self::new(
            radius_mm,
            pitch,
            helix_rad,
            n_flutes,
            n_discs,
            vec![edge_length_mm; n_flutes * n_discs],
            spindle_rpm,
            false,
        )
    }

    #[allow(clippy::too_many_arguments)]
    pub fn new(
        radius_mm: f64,
        pitch_rad: f64,
        helix_rad: f64,
        n_flutes: usize,
        n_discs: usize,
        edge_length_mm: Vec<f64>,
        spindle_rpm: f64,
        non_uniform_pitch: bool,
    ) -> Result<Self> {
        if !(radius_mm > 0.0 && radius_mm.is_finite()) {
            return Err(Error::InvalidConfig(format!("tool radius must be positive, got {radius_mm}")));
        }
        if n_flutes == 0 || n_discs == 0 {
            return Err(Error::InvalidConfig("tool needs at least one flute and one disc".into()));
        }
        if edge_length_mm.len() != n_flutes * n_discs {
            return Err(Error::DimensionMismatch {
                expected: format!("{} edge lengths", n_flutes * n_discs),
                got: edge_length_mm.len().to_string(),
            });
        }
        if edge_length_mm.iter().any(|b| !(*b > 0.0 && b.is_finite())) {
            return Err(Error::InvalidConfig("edge lengths must be positive".into()));
        }
        if !non_uniform_pitch && (pitch_rad * n_flutes as f64 - TAU).abs() > 1e-9 {
            return Err(Error::InvalidConfig(format!(
                "pitch {pitch_rad} x {n_flutes} flutes does not close the circle"
            )));
        }
        if !helix_rad.is_finite() || helix_rad.abs() >= std::f64::consts::FRAC_PI_2 {
            return Err(Error::InvalidConfig(format!("helix angle {helix_rad} out of range")));
        }
        if !spindle_rpm.is_finite() || spindle_rpm < 0.0 {
            return Err(Error::InvalidConfig(format!("spindle speed {spindle_rpm} rpm invalid")));
        }
        Ok(Self {
            radius: radius_mm,
            pitch: pitch_rad,
            helix: helix_rad,
            n_flutes,
            n_discs,
            edge_length: edge_length_mm,
            spindle_speed: rpm_to_hz(spindle_rpm),
            disc_stack_sign: 1.0,
        })
    }

    pub fn with_disc_stack_sign(mut self, sign: f64) -> Self {
        self.disc_stack_sign = if sign < 0.0 { -1.0 } else { 1.0 };
        self
    }

    pub fn with_spindle_speed_hz(mut self, hz: f64) -> Self {
        self.spindle_speed = hz;
        self
    }

    pub fn radius(&self) -> f64 {
        self.radius
    }
    pub fn pitch(&self) -> f64 {
        self.pitch
    }
    pub fn helix(&self) -> f64 {
        self.helix
    }
    pub fn n_flutes(&self) -> usize {
        self.n_flutes
    }
    pub fn n_discs(&self) -> usize {
        self.n_discs
    }
    /// s^-1 (revolutions per second).
    pub fn spindle_speed(&self) -> f64 {
        self.spindle_speed
    }
    pub fn disc_stack_sign(&self) -> f64 {
        self.disc_stack_sign
    }

    pub fn edge_length(&self, f: usize, d: usize) -> f64 {
        self.edge_length[f * self.n_discs + d]
    }

    /// Axial extent of the tool (largest per-flute stack).
    pub fn axial_length(&self) -> f64 {
        (0..self.n_flutes)
            .map(|f| (0..self.n_discs).map(|d| self.edge_length(f, d)).sum::<f64>())
            .fold(0.0, f64::max)
    }

    pub fn element_angle(&self, spindle_angle: f64, f: usize, d: usize) -> f64 {
        assert!(f < self.n_flutes && d < self.n_discs, "element index out of range");
        let b = self.edge_length(f, d);
        wrap_angle(
            spindle_angle + f as f64 * self.pitch - (d as f64 + 0.5) * self.helix.tan() * b / self.radius,
        )
    }

    /// Point on the cutting edge in frame M (mm).
    pub fn element_position(&self, theta: f64, f: usize, d: usize) -> Vector3<f64> {
        let below: f64 = (0..d).map(|k| self.edge_length(f, k)).sum();
        let z = self.disc_stack_sign * (below + 0.5 * self.edge_length(f, d));
        Vector3::new(self.radius * theta.sin(), self.radius * theta.cos(), z)
    }

    /// All elements in `(f, d)` row-major order.
    pub fn elements(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        let nd = self.n_discs;
        (0..self.n_flutes * nd).map(move |i| (i / nd, i % nd))
    }
}

pub fn element_frame(theta: f64) -> ElementFrame {
    let (s, c) = theta.sin_cos();
    #[rustfmt::skip]
    let rotation = Matrix3::new(
        -c, -s, 0.0,
         s, -c, 0.0,
        0.0, 0.0, 1.0,
    );
    ElementFrame { theta, rotation }
}
