//! Heightfield workpieces: generation, bicubic surface queries, tool
//! engagement and material removal.

use std::f64::consts::TAU;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::{Matrix3, Vector2, Vector3};
use noise::{Fbm, MultiFractal, NoiseFn, Perlin};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cutting::Engagement;
use crate::error::{Error, Result};
use crate::tool::ToolGeometry;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SurfaceFamily {
    Flat,
    Sinusoidal,
    Perlin,
    Fractal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SurfaceSpec {
    pub family: SurfaceFamily,
    pub base_height_mm: f64,
    pub amplitude_mm: f64,
    /// Wavelength for the sinusoid, feature size for the noise families.
    pub wavelength_mm: f64,
    pub octaves: usize,
    pub lacunarity: f64,
    pub persistence: f64,
    pub seed: u64,
}

impl Default for SurfaceSpec {
    fn default() -> Self {
        Self {
            family: SurfaceFamily::Flat,
            base_height_mm: 20.0,
            amplitude_mm: 2.0,
            wavelength_mm: 60.0,
            octaves: 4,
            lacunarity: 2.0,
            persistence: 0.5,
            seed: 0,
        }
    }
}

impl SurfaceSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.amplitude_mm >= 0.0) || !self.base_height_mm.is_finite() {
            return Err(Error::InvalidConfig("surface amplitude must be non-negative".into()));
        }
        if self.octaves < 1 {
            return Err(Error::InvalidConfig("fractal surfaces need at least one octave".into()));
        }
        if !(self.wavelength_mm > 0.0) {
            return Err(Error::InvalidConfig("surface wavelength must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub nx: usize,
    pub ny: usize,
    pub dx_mm: f64,
    pub dy_mm: f64,
    pub origin_mm: [f64; 2],
}

impl Default for GridSpec {
    fn default() -> Self {
        Self { nx: 256, ny: 256, dx_mm: 1.0, dy_mm: 1.0, origin_mm: [0.0, 0.0] }
    }
}

impl GridSpec {
    pub fn validate(&self) -> Result<()> {
        if self.nx < 2 || self.ny < 2 {
            return Err(Error::InvalidConfig("heightfield needs at least 2x2 nodes".into()));
        }
        if !(self.dx_mm > 0.0 && self.dy_mm > 0.0) {
            return Err(Error::InvalidConfig("grid spacing must be positive".into()));
        }
        Ok(())
    }
    pub fn x_max(&self) -> f64 {
        self.origin_mm[0] + (self.nx - 1) as f64 * self.dx_mm
    }
    pub fn y_max(&self) -> f64 {
        self.origin_mm[1] + (self.ny - 1) as f64 * self.dy_mm
    }
}

/// Position and orientation of frame M in the world frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ToolPose {
    pub position: Vector3<f64>,
    pub r_m_to_w: Matrix3<f64>,
}

/// Saw disc in the world x-z plane, tool axis along world -y.
pub fn slitting_orientation() -> Matrix3<f64> {
    #[rustfmt::skip]
    let r = Matrix3::new(
        1.0, 0.0, 0.0,
        0.0, 0.0, -1.0,
        0.0, 1.0, 0.0,
    );
    r
}

#[derive(Debug, Clone, PartialEq)]
pub struct Heightfield {
    grid: GridSpec,
    /// Row-major: `heights[j * nx + i]` is node (x_i, y_j).
    heights: Vec<f64>,
    max_height: f64,
    removed_volume_total: f64,
    spec: Option<SurfaceSpec>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataFormat {
    Csv,
    Binary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeightfieldHeader {
    pub nx: usize,
    pub ny: usize,
    pub dx_mm: f64,
    pub dy_mm: f64,
    pub origin_mm: [f64; 2],
    pub seed: Option<u64>,
    pub family: Option<SurfaceFamily>,
    pub format: DataFormat,
    pub data_file: String,
}

fn catmull_rom(t: f64) -> [f64; 4] {
    let t2 = t * t;
    let t3 = t2 * t;
    [
        0.5 * (-t3 + 2.0 * t2 - t),
        0.5 * (3.0 * t3 - 5.0 * t2 + 2.0),
        0.5 * (-3.0 * t3 + 4.0 * t2 + t),
        0.5 * (t3 - t2),
    ]
}

impl Heightfield {
    pub fn from_heights(grid: GridSpec, heights: Vec<f64>) -> Result<Self> {
        grid.validate()?;
        if heights.len() != grid.nx * grid.ny {
            return Err(Error::DimensionMismatch {
                expected: format!("{} heights", grid.nx * grid.ny),
                got: heights.len().to_string(),
            });
        }
        if heights.iter().any(|h| !h.is_finite()) {
            return Err(Error::InvalidConfig("heights must be finite".into()));
        }
        let max_height = heights.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        Ok(Self { grid, heights, max_height, removed_volume_total: 0.0, spec: None })
    }

    pub fn generate(spec: &SurfaceSpec, grid: GridSpec) -> Result<Self> {
        spec.validate()?;
        grid.validate()?;
        let a = spec.amplitude_mm;
        let k = 1.0 / spec.wavelength_mm;
        let seed32 = (spec.seed ^ (spec.seed >> 32)) as u32;
        let phase = ChaCha8Rng::seed_from_u64(spec.seed).gen_range(0.0..TAU);
        let perlin = Perlin::new(seed32);
        let fbm = Fbm::<Perlin>::new(seed32)
            .set_octaves(spec.octaves)
            .set_frequency(k)
            .set_lacunarity(spec.lacunarity)
            .set_persistence(spec.persistence);
        // offset keeps samples off the integer lattice where Perlin noise is zero
        let off = 0.5 + (seed32 % 997) as f64 * 0.001;
        let mut heights = Vec::with_capacity(grid.nx * grid.ny);
        for j in 0..grid.ny {
            let y = grid.origin_mm[1] + j as f64 * grid.dy_mm;
            for i in 0..grid.nx {
                let x = grid.origin_mm[0] + i as f64 * grid.dx_mm;
                let dz = match spec.family {
                    SurfaceFamily::Flat => 0.0,
                    SurfaceFamily::Sinusoidal => a * (TAU * x * k + phase).sin(),
                    SurfaceFamily::Perlin => a * perlin.get([x * k + off, y * k + off]),
                    SurfaceFamily::Fractal => a * fbm.get([x + off / k, y + off / k]),
                };
                heights.push(spec.base_height_mm + dz);
            }
        }
        let mut hf = Self::from_heights(grid, heights)?;
        hf.spec = Some(spec.clone());
        Ok(hf)
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }
    pub fn heights(&self) -> &[f64] {
        &self.heights
    }
    pub fn spec(&self) -> Option<&SurfaceSpec> {
        self.spec.as_ref()
    }
    pub fn removed_volume_total(&self) -> f64 {
        self.removed_volume_total
    }
    /// Upper bound on the surface (the initial maximum; heights never rise).
    pub fn max_height(&self) -> f64 {
        self.max_height
    }

    pub fn node(&self, i: usize, j: usize) -> f64 {
        self.heights[j * self.grid.nx + i]
    }

    pub fn node_x(&self, i: usize) -> f64 {
        self.grid.origin_mm[0] + i as f64 * self.grid.dx_mm
    }
    pub fn node_y(&self, j: usize) -> f64 {
        self.grid.origin_mm[1] + j as f64 * self.grid.dy_mm
    }

    /// Node value with linearly extrapolated ghost nodes one step outside the grid.
    fn ghost(&self, i: isize, j: isize) -> f64 {
        let nx = self.grid.nx as isize;
        let ny = self.grid.ny as isize;
        let col = |j: usize| -> f64 {
            if i < 0 {
                2.0 * self.node(0, j) - self.node(1, j)
            } else if i >= nx {
                2.0 * self.node((nx - 1) as usize, j) - self.node((nx - 2) as usize, j)
            } else {
                self.node(i as usize, j)
            }
        };
        if j < 0 {
            2.0 * col(0) - col(1)
        } else if j >= ny {
            2.0 * col((ny - 1) as usize) - col((ny - 2) as usize)
        } else {
            col(j as usize)
        }
    }

    /// Height of the bicubic (Catmull-Rom) surface at (x, y).
    pub fn surface_height(&self, x: f64, y: f64) -> Result<f64> {
        let g = &self.grid;
        let u = (x - g.origin_mm[0]) / g.dx_mm;
        let v = (y - g.origin_mm[1]) / g.dy_mm;
        let eps = 1e-9;
        if !(u >= -eps && v >= -eps && u <= (g.nx - 1) as f64 + eps && v <= (g.ny - 1) as f64 + eps) {
            return Err(Error::OutOfBounds { x, y });
        }
        let i0 = (u.floor() as isize).clamp(0, g.nx as isize - 2);
        let j0 = (v.floor() as isize).clamp(0, g.ny as isize - 2);
        let wu = catmull_rom(u - i0 as f64);
        let wv = catmull_rom(v - j0 as f64);
        let mut h = 0.0;
        for (b, wy) in wv.iter().enumerate() {
            if *wy == 0.0 {
                continue;
            }
            let mut row = 0.0;
            for (a, wx) in wu.iter().enumerate() {
                if *wx != 0.0 {
                    row += wx * self.ghost(i0 - 1 + a as isize, j0 - 1 + b as isize);
                }
            }
            h += wy * row;
        }
        Ok(h)
    }

    /// Integrated height over the grid (node value times cell area).
    pub fn volume(&self) -> f64 {
        self.heights.iter().sum::<f64>() * self.grid.dx_mm * self.grid.dy_mm
    }

    pub fn engagement(&self, tool: &ToolGeometry, pose: &ToolPose, spindle_angle: f64) -> Engagement {
        let mut g = Engagement::for_tool(tool);
        for (f, d) in tool.elements() {
            let theta = tool.element_angle(spindle_angle, f, d);
            let p = pose.position + pose.r_m_to_w * tool.element_position(theta, f, d);
            if p.z >= self.max_height {
                continue;
            }
            if let Ok(h) = self.surface_height(p.x, p.y) {
                if p.z < h {
                    g.set(f, d, true);
                }
            }
        }
        g
    }

    /// Lower every cell inside the kerf swept between two poses down to the
    /// tool's lowest cutting surface. Returns the removed volume in mm^3.
    pub fn remove_material(&mut self, tool: &ToolGeometry, from: &ToolPose, to: &ToolPose) -> f64 {
        let axis = to.r_m_to_w * Vector3::z();
        let r = tool.radius();
        let (c0, c1) = (from.position, to.position);
        // skip sweeps that stay entirely above the material
        if c0.z.min(c1.z) - r >= self.max_height && axis.z.abs() < 0.5 {
            return 0.0;
        }
        let removed = if axis.z.abs() > 0.5 {
            self.remove_end_mill(tool, c0, c1, axis.z.signum())
        } else {
            self.remove_disc(tool, c0, c1, axis)
        };
        self.removed_volume_total += removed;
        removed
    }

    fn cell_range(&self, lo: Vector2<f64>, hi: Vector2<f64>) -> Option<(usize, usize, usize, usize)> {
        let g = &self.grid;
        let i_lo = ((lo.x - g.origin_mm[0]) / g.dx_mm).ceil().max(0.0);
        let i_hi = ((hi.x - g.origin_mm[0]) / g.dx_mm).floor().min((g.nx - 1) as f64);
        let j_lo = ((lo.y - g.origin_mm[1]) / g.dy_mm).ceil().max(0.0);
        let j_hi = ((hi.y - g.origin_mm[1]) / g.dy_mm).floor().min((g.ny - 1) as f64);
        if i_lo > i_hi || j_lo > j_hi {
            return None;
        }
        Some((i_lo as usize, i_hi as usize, j_lo as usize, j_hi as usize))
    }

    fn remove_disc(&mut self, tool: &ToolGeometry, c0: Vector3<f64>, c1: Vector3<f64>, axis: Vector3<f64>) -> f64 {
        let r = tool.radius();
        let kerf = tool.axial_length();
        let sign = tool.disc_stack_sign();
        let a = Vector2::new(axis.x, axis.y).normalize();
        let u = Vector2::new(-a.y, a.x);
        let base = Vector2::new(c1.x, c1.y);
        let q0 = (Vector2::new(c0.x, c0.y) - base).dot(&u);
        let dq = (Vector2::new(c1.x, c1.y) - base).dot(&u) - q0;
        let dz = c1.z - c0.z;
        let len = f64::sqrt(dq * dq + dz * dz);

        let q_lo = q0.min(q0 + dq) - r;
        let q_hi = q0.max(q0 + dq) + r;
        let mut lo = Vector2::new(f64::INFINITY, f64::INFINITY);
        let mut hi = -lo;
        for q in [q_lo, q_hi] {
            for t in [0.0, sign * kerf] {
                let p = base + q * u + t * a;
                lo = lo.inf(&p);
                hi = hi.sup(&p);
            }
        }
        let Some((i_lo, i_hi, j_lo, j_hi)) = self.cell_range(lo, hi) else { return 0.0 };
        let cell_area = self.grid.dx_mm * self.grid.dy_mm;
        let mut removed = 0.0;
        for j in j_lo..=j_hi {
            for i in i_lo..=i_hi {
                let p = Vector2::new(self.node_x(i), self.node_y(j)) - base;
                let t = sign * p.dot(&a);
                if !(0.0..kerf).contains(&t) {
                    continue;
                }
                let q = p.dot(&u);
                let Some(env) = disc_envelope(q, q0, dq, c0.z, dz, len, r) else { continue };
                let idx = j * self.grid.nx + i;
                if env < self.heights[idx] {
                    removed += (self.heights[idx] - env) * cell_area;
                    self.heights[idx] = env;
                }
            }
        }
        removed
    }

    fn remove_end_mill(&mut self, tool: &ToolGeometry, c0: Vector3<f64>, c1: Vector3<f64>, axis_sign: f64) -> f64 {
        let r = tool.radius();
        // the face with the lowest world z cuts the floor
        let reach = tool.axial_length() * tool.disc_stack_sign() * axis_sign;
        let bottom = reach.min(0.0);
        let p0 = Vector2::new(c0.x, c0.y);
        let d = Vector2::new(c1.x, c1.y) - p0;
        let lo = p0.inf(&(p0 + d)) - Vector2::repeat(r);
        let hi = p0.sup(&(p0 + d)) + Vector2::repeat(r);
        let Some((i_lo, i_hi, j_lo, j_hi)) = self.cell_range(lo, hi) else { return 0.0 };
        let cell_area = self.grid.dx_mm * self.grid.dy_mm;
        let dd = d.norm_squared();
        let mut removed = 0.0;
        for j in j_lo..=j_hi {
            for i in i_lo..=i_hi {
                let w = Vector2::new(self.node_x(i), self.node_y(j)) - p0;
                // parameter interval where the cell centre is inside the footprint
                let (s_lo, s_hi) = if dd == 0.0 {
                    if w.norm_squared() > r * r {
                        continue;
                    }
                    (0.0, 1.0)
                } else {
                    let b = w.dot(&d) / dd;
                    let disc = b * b - (w.norm_squared() - r * r) / dd;
                    if disc < 0.0 {
                        continue;
                    }
                    let s = disc.sqrt();
                    ((b - s).max(0.0), (b + s).min(1.0))
                };
                if s_lo > s_hi {
                    continue;
                }
                let z = (c0.z + s_lo * (c1.z - c0.z)).min(c0.z + s_hi * (c1.z - c0.z)) + bottom;
                let idx = j * self.grid.nx + i;
                if z < self.heights[idx] {
                    removed += (self.heights[idx] - z) * cell_area;
                    self.heights[idx] = z;
                }
            }
        }
        removed
    }

    pub fn save(&self, header_path: &Path, format: DataFormat) -> Result<()> {
        let ext = match format {
            DataFormat::Csv => "csv",
            DataFormat::Binary => "bin",
        };
        let data_path = header_path.with_extension(ext);
        let data_file = data_path.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        let header = HeightfieldHeader {
            nx: self.grid.nx,
            ny: self.grid.ny,
            dx_mm: self.grid.dx_mm,
            dy_mm: self.grid.dy_mm,
            origin_mm: self.grid.origin_mm,
            seed: self.spec.as_ref().map(|s| s.seed),
            family: self.spec.as_ref().map(|s| s.family),
            format,
            data_file,
        };
        serde_json::to_writer_pretty(BufWriter::new(File::create(header_path)?), &header)?;
        let mut out = BufWriter::new(File::create(&data_path)?);
        match format {
            DataFormat::Csv => {
                for row in self.heights.chunks(self.grid.nx) {
                    let line: Vec<String> = row.iter().map(|h| format!("{h:?}")).collect();
                    writeln!(out, "{}", line.join(","))?;
                }
            }
            DataFormat::Binary => {
                for h in &self.heights {
                    out.write_all(&h.to_le_bytes())?;
                }
            }
        }
        out.flush()?;
        Ok(())
    }

    pub fn load(header_path: &Path) -> Result<Self> {
        let header: HeightfieldHeader = serde_json::from_reader(BufReader::new(File::open(header_path)?))?;
        let dir = header_path.parent().map(Path::to_path_buf).unwrap_or_default();
        let data_path = dir.join(&header.data_file);
        let grid = GridSpec {
            nx: header.nx,
            ny: header.ny,
            dx_mm: header.dx_mm,
            dy_mm: header.dy_mm,
            origin_mm: header.origin_mm,
        };
        let heights = match header.format {
            DataFormat::Csv => {
                let mut rdr = csv::ReaderBuilder::new().has_headers(false).from_path(&data_path)?;
                let mut v = Vec::with_capacity(grid.nx * grid.ny);
                for rec in rdr.records() {
                    for field in rec?.iter() {
                        v.push(field.trim().parse::<f64>().map_err(|e| {
                            Error::InvalidConfig(format!("bad height value {field:?}: {e}"))
                        })?);
                    }
                }
                v
            }
            DataFormat::Binary => {
                let mut bytes = Vec::new();
                BufReader::new(File::open(&data_path)?).read_to_end(&mut bytes)?;
                bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect()
            }
        };
        Self::from_heights(grid, heights)
    }
}

/// Lowest point of a disc of radius `r` swept from (q0, z0) by (dq, dz),
/// sampled on the vertical line through `q`. `None` if the line misses.
fn disc_envelope(q: f64, q0: f64, dq: f64, z0: f64, dz: f64, len: f64, r: f64) -> Option<f64> {
    let lower = |s: f64| {
        let u = q - (q0 + s * dq);
        z0 + s * dz - (r * r - u * u).max(0.0).sqrt()
    };
    if dq == 0.0 {
        if (q - q0).abs() > r {
            return None;
        }
        return Some(lower(if dz < 0.0 { 1.0 } else { 0.0 }));
    }
    let a = (q - r - q0) / dq;
    let b = (q + r - q0) / dq;
    let (s_lo, s_hi) = (a.min(b).max(0.0), a.max(b).min(1.0));
    if s_lo > s_hi {
        return None;
    }
    // the lower boundary is convex in s; its stationary point is where the
    // circle normal is perpendicular to the motion
    let u_star = r * dz * dq.signum() / len;
    let s = ((q - u_star - q0) / dq).clamp(s_lo, s_hi);
    Some(lower(s))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn grid(nx: usize, ny: usize, d: f64) -> GridSpec {
        GridSpec { nx, ny, dx_mm: d, dy_mm: d, origin_mm: [0.0, 0.0] }
    }

    #[test]
    fn flat_is_constant() {
        let spec = SurfaceSpec { family: SurfaceFamily::Flat, base_height_mm: 3.0, ..Default::default() };
        let hf = Heightfield::generate(&spec, grid(16, 16, 1.0)).unwrap();
        assert!(hf.heights().iter().all(|h| *h == 3.0));
        assert_abs_diff_eq!(hf.surface_height(7.3, 2.9).unwrap(), 3.0, epsilon = 1e-12);
    }

    #[test]
    fn ramp_reproduced_between_nodes() {
        let g = grid(10, 8, 0.7);
        let mut h = Vec::new();
        for j in 0..8 {
            for i in 0..10 {
                h.push(1.0 + 0.3 * i as f64 * 0.7 - 0.2 * j as f64 * 0.7);
            }
        }
        let hf = Heightfield::from_heights(g, h).unwrap();
        for (x, y) in [(0.35, 0.35), (6.0, 4.5), (0.01, 4.89), (6.29, 0.0)] {
            assert_abs_diff_eq!(hf.surface_height(x, y).unwrap(), 1.0 + 0.3 * x - 0.2 * y, epsilon = 1e-9);
        }
        assert!(matches!(hf.surface_height(-0.1, 1.0), Err(Error::OutOfBounds { .. })));
    }

    #[test]
    fn envelope_matches_dense_search() {
        let r = 25.0;
        for &(q, q0, dq, dz) in &[(3.0, 0.0, 1.0, -0.5), (-20.0, 0.0, 2.0, 0.3), (24.5, 0.0, 0.5, 0.0), (1.0, 0.0, -3.0, -1.0)] {
            let len = f64::sqrt(dq * dq + dz * dz);
            let fast = disc_envelope(q, q0, dq, 10.0, dz, len, r).unwrap();
            let mut best = f64::INFINITY;
            for k in 0..=100_000 {
                let s = k as f64 / 100_000.0;
                let u: f64 = q - (q0 + s * dq);
                if u.abs() <= r {
                    best = best.min(10.0 + s * dz - (r * r - u * u).sqrt());
                }
            }
            assert_abs_diff_eq!(fast, best, epsilon = 1e-6);
        }
    }
}
