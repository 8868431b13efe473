//! Rational B-spline cutting paths c(t) with path normals and offset setpoints.

use nalgebra::{Vector3, Vector4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::workpiece::Heightfield;

#[derive(Debug, Clone, PartialEq)]
pub struct Nurbs {
    degree: usize,
    knots: Vec<f64>,
    /// Homogeneous control points (w*x, w*y, w*z, w).
    cw: Vec<Vector4<f64>>,
    /// Hodograph of the homogeneous curve, degree - 1.
    dcw: Vec<Vector4<f64>>,
}

fn find_span(knots: &[f64], degree: usize, n: usize, u: f64) -> usize {
    // n = number of control points; valid spans are degree..n-1
    if u >= knots[n] {
        return n - 1;
    }
    if u <= knots[degree] {
        return degree;
    }
    let (mut lo, mut hi) = (degree, n);
    while hi - lo > 1 {
        let mid = (lo + hi) / 2;
        if u < knots[mid] {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    lo
}

fn de_boor(knots: &[f64], degree: usize, pts: &[Vector4<f64>], u: f64) -> Vector4<f64> {
    let k = find_span(knots, degree, pts.len(), u);
    let mut d: Vec<Vector4<f64>> = (0..=degree).map(|j| pts[j + k - degree]).collect();
    for r in 1..=degree {
        for j in (r..=degree).rev() {
            let i = j + k - degree;
            let den = knots[i + degree + 1 - r] - knots[i];
            let a = if den > 0.0 { (u - knots[i]) / den } else { 0.0 };
            d[j] = (1.0 - a) * d[j - 1] + a * d[j];
        }
    }
    d[degree]
}

impl Nurbs {
    pub fn new(degree: usize, knots: Vec<f64>, points: Vec<Vector3<f64>>, weights: Vec<f64>) -> Result<Self> {
        let n = points.len();
        if degree < 1 || n < degree + 1 {
            return Err(Error::InvalidConfig(format!("need at least {} control points for degree {degree}", degree + 1)));
        }
        if weights.len() != n {
            return Err(Error::DimensionMismatch { expected: format!("{n} weights"), got: weights.len().to_string() });
        }
        if knots.len() != n + degree + 1 {
            return Err(Error::DimensionMismatch {
                expected: format!("{} knots", n + degree + 1),
                got: knots.len().to_string(),
            });
        }
        if knots.windows(2).any(|w| w[1] < w[0]) || knots.iter().any(|k| !k.is_finite()) {
            return Err(Error::InvalidConfig("knot vector must be finite and non-decreasing".into()));
        }
        if weights.iter().any(|w| !(*w > 0.0)) {
            return Err(Error::InvalidConfig("NURBS weights must be positive".into()));
        }
        if !(knots[n] > knots[degree]) {
            return Err(Error::InvalidConfig("knot vector has an empty parameter domain".into()));
        }
        let cw: Vec<Vector4<f64>> = points
            .iter()
            .zip(&weights)
            .map(|(p, w)| Vector4::new(w * p.x, w * p.y, w * p.z, *w))
            .collect();
        let dcw = (0..n - 1)
            .map(|i| {
                let den = knots[i + degree + 1] - knots[i + 1];
                if den > 0.0 {
                    (cw[i + 1] - cw[i]) * (degree as f64 / den)
                } else {
                    Vector4::zeros()
                }
            })
            .collect();
        Ok(Self { degree, knots, cw, dcw })
    }

    /// Cubic (or lower) curve with clamped uniform knots and unit weights.
    pub fn clamped_uniform(degree: usize, points: Vec<Vector3<f64>>) -> Result<Self> {
        let n = points.len();
        let degree = degree.min(n.saturating_sub(1)).max(1);
        let spans = n - degree;
        let mut knots = vec![0.0; degree + 1];
        knots.extend((1..spans).map(|i| i as f64 / spans as f64));
        knots.extend(std::iter::repeat_n(1.0, degree + 1));
        Self::new(degree, knots, points, vec![1.0; n])
    }

    pub fn domain(&self) -> (f64, f64) {
        (self.knots[self.degree], self.knots[self.cw.len()])
    }

    pub fn degree(&self) -> usize {
        self.degree
    }
    pub fn knots(&self) -> &[f64] {
        &self.knots
    }
    pub fn control_points(&self) -> Vec<Vector3<f64>> {
        self.cw.iter().map(|c| c.xyz() / c.w).collect()
    }
    pub fn weights(&self) -> Vec<f64> {
        self.cw.iter().map(|c| c.w).collect()
    }

    /// Point and first derivative with respect to the curve parameter.
    pub fn eval(&self, u: f64) -> (Vector3<f64>, Vector3<f64>) {
        let (a, b) = self.domain();
        let u = u.clamp(a, b);
        let h = de_boor(&self.knots, self.degree, &self.cw, u);
        let c = h.xyz() / h.w;
        let dh = if self.degree == 1 {
            let k = find_span(&self.knots, 1, self.cw.len(), u);
            self.dcw[k - 1]
        } else {
            de_boor(&self.knots[1..self.knots.len() - 1], self.degree - 1, &self.dcw, u)
        };
        let dc = (dh.xyz() - dh.w * c) / h.w;
        (c, dc)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Timing {
    /// Curve parameter proportional to time.
    Linear,
    /// Constant speed along the curve.
    #[default]
    ArcLength,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathSpec {
    pub degree: usize,
    pub knots: Vec<f64>,
    pub control_points_mm: Vec<[f64; 3]>,
    pub weights: Vec<f64>,
    pub duration_s: f64,
    #[serde(default)]
    pub timing: Timing,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PathPoint {
    pub position: Vector3<f64>,
    pub velocity: Vector3<f64>,
    pub normal: Vector3<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CutterPath {
    curve: Nurbs,
    duration: f64,
    timing: Timing,
    /// Cumulative arc length at uniformly spaced parameters.
    arc: Vec<f64>,
}

const ARC_SAMPLES: usize = 2048;

impl CutterPath {
    pub fn new(curve: Nurbs, duration_s: f64, timing: Timing) -> Result<Self> {
        if !(duration_s > 0.0 && duration_s.is_finite()) {
            return Err(Error::InvalidConfig(format!("path duration must be positive, got {duration_s}")));
        }
        let (a, b) = curve.domain();
        let mut arc = Vec::with_capacity(ARC_SAMPLES + 1);
        arc.push(0.0);
        // Simpson on each sub-interval
        let h = (b - a) / ARC_SAMPLES as f64;
        let speed = |u: f64| curve.eval(u).1.norm();
        for i in 0..ARC_SAMPLES {
            let u0 = a + i as f64 * h;
            let s = h / 6.0 * (speed(u0) + 4.0 * speed(u0 + 0.5 * h) + speed(u0 + h));
            arc.push(arc[i] + s);
        }
        Ok(Self { curve, duration: duration_s, timing, arc })
    }

    pub fn from_spec(spec: &PathSpec) -> Result<Self> {
        let pts = spec.control_points_mm.iter().map(|p| Vector3::from(*p)).collect();
        let curve = Nurbs::new(spec.degree, spec.knots.clone(), pts, spec.weights.clone())?;
        Self::new(curve, spec.duration_s, spec.timing)
    }

    pub fn to_spec(&self) -> PathSpec {
        PathSpec {
            degree: self.curve.degree(),
            knots: self.curve.knots().to_vec(),
            control_points_mm: self.curve.control_points().iter().map(|p| [p.x, p.y, p.z]).collect(),
            weights: self.curve.weights(),
            duration_s: self.duration,
            timing: self.timing,
        }
    }

    /// Straight segment traversed at constant speed.
    pub fn line(from: Vector3<f64>, to: Vector3<f64>, duration_s: f64) -> Result<Self> {
        Self::new(Nurbs::new(1, vec![0.0, 0.0, 1.0, 1.0], vec![from, to], vec![1.0, 1.0])?, duration_s, Timing::Linear)
    }

    /// Cubic path riding on the surface along a constant-y row: at each
    /// control point a disc of `radius_mm` rests on the surface (touching,
    /// not overlapping), lifted by `clearance_mm`.
    #[allow(clippy::too_many_arguments)]
    pub fn over_surface(
        hf: &Heightfield,
        y_mm: f64,
        x_start: f64,
        x_end: f64,
        n_ctrl: usize,
        radius_mm: f64,
        clearance_mm: f64,
        speed_mm_s: f64,
    ) -> Result<Self> {
        let n_ctrl = n_ctrl.max(4);
        let step = hf.grid().dx_mm.min(radius_mm / 16.0);
        let n_probe = (2.0 * radius_mm / step).ceil() as usize;
        let mut pts = Vec::with_capacity(n_ctrl);
        for k in 0..n_ctrl {
            let x = x_start + (x_end - x_start) * k as f64 / (n_ctrl - 1) as f64;
            let mut z = f64::NEG_INFINITY;
            for i in 0..=n_probe {
                let xi = x - radius_mm + 2.0 * radius_mm * i as f64 / n_probe as f64;
                let Ok(h) = hf.surface_height(xi, y_mm) else { continue };
                let dx = (xi - x).abs().min(radius_mm);
                z = z.max(h + (radius_mm * radius_mm - dx * dx).sqrt());
            }
            if !z.is_finite() {
                z = hf.surface_height(x, y_mm)? + radius_mm;
            }
            pts.push(Vector3::new(x, y_mm, z + clearance_mm));
        }
        let curve = Nurbs::clamped_uniform(3, pts)?;
        let tmp = Self::new(curve, 1.0, Timing::ArcLength)?;
        let duration = tmp.length() / speed_mm_s;
        Self::new(tmp.curve, duration, Timing::ArcLength)
    }

    pub fn duration(&self) -> f64 {
        self.duration
    }
    pub fn length(&self) -> f64 {
        *self.arc.last().unwrap()
    }
    pub fn curve(&self) -> &Nurbs {
        &self.curve
    }

    /// Parameter and du/dt at time t (t clamped to [0, T]).
    fn param(&self, t: f64) -> (f64, f64) {
        let (a, b) = self.curve.domain();
        let tau = (t / self.duration).clamp(0.0, 1.0);
        match self.timing {
            Timing::Linear => (a + tau * (b - a), (b - a) / self.duration),
            Timing::ArcLength => {
                let total = self.length();
                if total <= 0.0 {
                    return (a + tau * (b - a), 0.0);
                }
                let s = tau * total;
                let i = self.arc.partition_point(|v| *v < s).clamp(1, ARC_SAMPLES);
                let (s0, s1) = (self.arc[i - 1], self.arc[i]);
                let frac = if s1 > s0 { (s - s0) / (s1 - s0) } else { 0.0 };
                let h = (b - a) / ARC_SAMPLES as f64;
                let mut u = a + (i as f64 - 1.0 + frac) * h;
                // one Newton polish against the exact speed
                let sp = self.curve.eval(u).1.norm();
                if sp > 1e-12 {
                    let s_u = s0 + self.partial_arc(a + (i - 1) as f64 * h, u);
                    u = (u - (s_u - s) / sp).clamp(a, b);
                }
                let sp = self.curve.eval(u).1.norm();
                let dudt = if sp > 0.0 { total / self.duration / sp } else { 0.0 };
                (u, dudt)
            }
        }
    }

    fn partial_arc(&self, u0: f64, u1: f64) -> f64 {
        let speed = |u: f64| self.curve.eval(u).1.norm();
        (u1 - u0) / 6.0 * (speed(u0) + 4.0 * speed(0.5 * (u0 + u1)) + speed(u1))
    }

    pub fn eval(&self, t: f64) -> Result<PathPoint> {
        let t_c = t.clamp(0.0, self.duration);
        let (u, dudt) = self.param(t_c);
        let (c, dc) = self.curve.eval(u);
        let velocity = dc * dudt;
        let speed = velocity.norm();
        let stationary = self.length() == 0.0;
        if speed < 1e-9 && !stationary && t_c > 0.0 && t_c < self.duration {
            return Err(Error::DegeneratePath(t_c));
        }
        Ok(PathPoint { position: c, velocity, normal: path_normal(&velocity) })
    }

    pub fn setpoint(&self, t: f64, t_delta: f64, n_delta: f64) -> Result<Vector3<f64>> {
        let p = self.eval(t + t_delta)?;
        Ok(p.position + n_delta * p.normal)
    }
}

/// +z projected perpendicular to the travel direction.
pub fn path_normal(velocity: &Vector3<f64>) -> Vector3<f64> {
    let speed = velocity.norm();
    if speed < 1e-12 {
        return Vector3::z();
    }
    let t = velocity / speed;
    let n = Vector3::z() - t.z * t;
    if n.norm() < 1e-9 {
        let m = Vector3::x() - t.x * t;
        return m.normalize();
    }
    n.normalize()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn straight_line_midpoint() {
        let p = CutterPath::line(Vector3::zeros(), Vector3::new(10.0, 0.0, 0.0), 2.0).unwrap();
        let m = p.eval(1.0).unwrap();
        assert_abs_diff_eq!(m.position, Vector3::new(5.0, 0.0, 0.0), epsilon = 1e-12);
        assert_abs_diff_eq!(m.velocity, Vector3::new(5.0, 0.0, 0.0), epsilon = 1e-12);
        assert_abs_diff_eq!(m.normal, Vector3::z(), epsilon = 1e-12);
    }

    #[test]
    fn setpoint_offsets() {
        let p = CutterPath::line(Vector3::zeros(), Vector3::new(10.0, 0.0, 0.0), 2.0).unwrap();
        assert_abs_diff_eq!(p.setpoint(1.0, 0.0, 2.0).unwrap(), Vector3::new(5.0, 0.0, 2.0), epsilon = 1e-12);
        assert_abs_diff_eq!(p.setpoint(1.5, 5.0, 1.0).unwrap(), Vector3::new(10.0, 0.0, 1.0), epsilon = 1e-12);
    }

    #[test]
    fn arc_length_timing_is_uniform_speed() {
        let pts = vec![
            Vector3::new(0.0, 0.0, 0.0),
            Vector3::new(10.0, 0.0, 5.0),
            Vector3::new(20.0, 0.0, -3.0),
            Vector3::new(40.0, 0.0, 0.0),
            Vector3::new(50.0, 0.0, 2.0),
        ];
        let p = CutterPath::new(Nurbs::clamped_uniform(3, pts).unwrap(), 4.0, Timing::ArcLength).unwrap();
        let v = p.length() / 4.0;
        for k in 1..20 {
            let s = p.eval(4.0 * k as f64 / 20.0).unwrap().velocity.norm();
            assert_abs_diff_eq!(s, v, epsilon = 1e-6 * v);
        }
    }

    #[test]
    fn rejects_bad_curves() {
        let pts = vec![Vector3::zeros(), Vector3::x()];
        assert!(Nurbs::new(1, vec![0.0, 1.0, 0.0, 1.0], pts.clone(), vec![1.0; 2]).is_err());
        assert!(Nurbs::new(1, vec![0.0, 0.0, 1.0, 1.0], pts.clone(), vec![1.0, -1.0]).is_err());
        assert!(Nurbs::new(1, vec![0.0, 0.0, 1.0], pts, vec![1.0; 2]).is_err());
    }
}
