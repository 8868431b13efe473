//! Identification of cutting constants from force logs.
//!
//! Records are grouped by feed vector; each group's mean engaged force is
//! matched to the revolution-averaged model force, which is affine in
//! (Kc, Ke):
//!
//! `F_avg = R_mw * (sum b)/(2 pi) * int_arc R(theta) (Ke + h(theta) Kc) dtheta`
//!
//! over the part of the immersion arc with positive chip thickness. The arc
//! is the half of `cos(theta) <= -1 + rdoc/R` on the down- or up-milling
//! side.

use std::collections::BTreeMap;
use std::f64::consts::{PI, TAU};
use std::path::Path;

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::config::{MaterialConfig, ToolConfig};
use crate::cutting::{total_force, CuttingOptions, Engagement, FeedState, MaterialParams};
use crate::error::{Error, Result};
use crate::tool::{element_frame, wrap_angle, ToolGeometry};
use crate::workpiece::slitting_orientation;

pub const CSV_HEADER: [&str; 8] = ["t_s", "vx_mms", "vy_mms", "vz_mms", "fx_N", "fy_N", "fz_N", "engaged"];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ForceRecord {
    pub t_s: f64,
    pub feed_mm_s: [f64; 3],
    pub force_n: [f64; 3],
    pub engaged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ForceLogMeta {
    pub tool: ToolConfig,
    pub rdoc_mm: f64,
    pub down_milling: bool,
    /// Spindle angle at t = 0; enables instantaneous residuals.
    #[serde(default)]
    pub theta0_rad: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForceLog {
    pub meta: ForceLogMeta,
    pub records: Vec<ForceRecord>,
}

impl ForceLog {
    pub fn validate(&self) -> Result<()> {
        if self.records.windows(2).any(|w| !(w[1].t_s > w[0].t_s)) {
            return Err(Error::InvalidConfig("force log time stamps must be strictly increasing".into()));
        }
        let tool = self.meta.tool.build()?;
        if !(self.meta.rdoc_mm > 0.0 && self.meta.rdoc_mm <= 2.0 * tool.radius()) {
            return Err(Error::InvalidConfig(format!("rdoc {} outside (0, 2R]", self.meta.rdoc_mm)));
        }
        Ok(())
    }

    /// Reads `<stem>.csv` and the metadata sidecar `<stem>.json`.
    pub fn load(csv_path: &Path) -> Result<Self> {
        let meta_path = csv_path.with_extension("json");
        let meta: ForceLogMeta = serde_json::from_str(&std::fs::read_to_string(&meta_path)?)?;
        let mut rdr = csv::Reader::from_path(csv_path)?;
        let header: Vec<String> = rdr.headers()?.iter().map(|s| s.trim().to_string()).collect();
        if header != CSV_HEADER {
            return Err(Error::InvalidConfig(format!("unexpected force log header {header:?}")));
        }
        let mut records = Vec::new();
        for row in rdr.records() {
            let row = row?;
            let v: Vec<f64> = row
                .iter()
                .map(|s| s.trim().parse::<f64>().map_err(|e| Error::InvalidConfig(format!("bad number {s:?}: {e}"))))
                .collect::<Result<_>>()?;
            if v.len() != 8 {
                return Err(Error::InvalidConfig(format!("force log row has {} fields", v.len())));
            }
            records.push(ForceRecord {
                t_s: v[0],
                feed_mm_s: [v[1], v[2], v[3]],
                force_n: [v[4], v[5], v[6]],
                engaged: v[7] != 0.0,
            });
        }
        let log = Self { meta, records };
        log.validate()?;
        Ok(log)
    }

    pub fn save(&self, csv_path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(csv_path)?;
        w.write_record(CSV_HEADER)?;
        for r in &self.records {
            let mut row: Vec<String> = vec![format!("{:?}", r.t_s)];
            row.extend(r.feed_mm_s.iter().chain(&r.force_n).map(|v| format!("{v:?}")));
            row.push((r.engaged as u8).to_string());
            w.write_record(&row)?;
        }
        w.flush()?;
        std::fs::write(csv_path.with_extension("json"), serde_json::to_string_pretty(&self.meta)?)?;
        Ok(())
    }
}

/// Subtract the mean force of the records before first engagement.
pub fn bias_correct(log: &ForceLog) -> Result<(ForceLog, Vector3<f64>)> {
    let pre: Vec<&ForceRecord> = log.records.iter().take_while(|r| !r.engaged).collect();
    if pre.len() < 10 {
        return Err(Error::InsufficientBaseline { needed: 10, found: pre.len() });
    }
    let bias = pre.iter().map(|r| Vector3::from(r.force_n)).sum::<Vector3<f64>>() / pre.len() as f64;
    let records = log
        .records
        .iter()
        .map(|r| ForceRecord { force_n: (Vector3::from(r.force_n) - bias).into(), ..*r })
        .collect();
    Ok((ForceLog { meta: log.meta.clone(), records }, bias))
}

/// Immersion half-arc `[lo, hi]`.
pub fn immersion_arc(radius: f64, rdoc: f64, down_milling: bool) -> (f64, f64) {
    let c0 = (-1.0 + rdoc / radius).clamp(-1.0, 1.0);
    let entry = c0.acos();
    if down_milling {
        (entry, PI)
    } else {
        (PI, TAU - entry)
    }
}

fn in_arc(theta: f64, arc: (f64, f64)) -> bool {
    let t = wrap_angle(theta);
    t >= arc.0 && t <= arc.1
}

/// World-frame sensitivities of the averaged force: `F = A kc + B ke`.
pub fn average_design(tool: &ToolGeometry, rdoc: f64, down_milling: bool, feed_w: &Vector3<f64>) -> Result<(Matrix3<f64>, Matrix3<f64>)> {
    let w = tool.spindle_speed();
    if !(w > 0.0) {
        return Err(Error::ZeroSpindleSpeed(w));
    }
    let r_mw = slitting_orientation();
    let f_m = r_mw.transpose() * feed_w / (tool.n_flutes() as f64 * w);
    let h = |t: f64| f_m.x * t.sin() + f_m.y * t.cos();
    let arc = immersion_arc(tool.radius(), rdoc, down_milling);
    let mut cuts = vec![arc.0, arc.1];
    let z = (-f_m.y).atan2(f_m.x);
    for k in -2..=2 {
        let c = z + k as f64 * PI;
        if c > arc.0 && c < arc.1 {
            cuts.push(c);
        }
    }
    cuts.sort_by(f64::total_cmp);
    let mut a = Matrix3::zeros();
    let mut b = Matrix3::zeros();
    const N: usize = 256;
    for seg in cuts.windows(2) {
        let (lo, hi) = (seg[0], seg[1]);
        if hi - lo <= 0.0 || h(0.5 * (lo + hi)) <= 0.0 {
            continue;
        }
        // composite Simpson, integrand smooth on the segment
        let dx = (hi - lo) / N as f64;
        for i in 0..=N {
            let t = lo + i as f64 * dx;
            let wgt = if i == 0 || i == N { 1.0 } else if i % 2 == 1 { 4.0 } else { 2.0 } * dx / 3.0;
            let r = element_frame(t).rotation;
            a += r * h(t) * wgt;
            b += r * wgt;
        }
    }
    let total_b: f64 = tool.elements().map(|(f, d)| tool.edge_length(f, d)).sum();
    let s = total_b / TAU;
    Ok((r_mw * a * s, r_mw * b * s))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitOptions {
    /// Per world axis weight; zero drops the axis.
    pub axis_weights: [f64; 3],
    pub max_iterations: usize,
    pub tolerance: f64,
    pub initial: Option<MaterialConfig>,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self { axis_weights: [1.0; 3], max_iterations: 500, tolerance: 1e-12, initial: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub material: MaterialConfig,
    pub rmse_axis_n: [f64; 3],
    pub rmse_overall_n: f64,
    /// True when the RMSE is over individual records against the
    /// instantaneous model, false when over feed-group means.
    pub rmse_instantaneous: bool,
    pub iterations: usize,
    pub converged: bool,
    pub objective: f64,
    pub groups: usize,
    pub bias_n: Vec<[f64; 3]>,
}

struct Group {
    a: Matrix3<f64>,
    b: Matrix3<f64>,
    mean: Vector3<f64>,
}

fn feed_key(v: &[f64; 3]) -> [u64; 3] {
    [v[0].to_bits(), v[1].to_bits(), v[2].to_bits()]
}

fn groups_of(log: &ForceLog) -> Result<Vec<Group>> {
    let tool = log.meta.tool.build()?;
    let mut sums: BTreeMap<[u64; 3], (Vector3<f64>, usize, [f64; 3])> = BTreeMap::new();
    for r in log.records.iter().filter(|r| r.engaged) {
        let e = sums.entry(feed_key(&r.feed_mm_s)).or_insert((Vector3::zeros(), 0, r.feed_mm_s));
        e.0 += Vector3::from(r.force_n);
        e.1 += 1;
    }
    sums.into_values()
        .map(|(s, n, feed)| {
            let (a, b) = average_design(&tool, log.meta.rdoc_mm, log.meta.down_milling, &Vector3::from(feed))?;
            Ok(Group { a, b, mean: s / n as f64 })
        })
        .collect()
}

fn model(g: &Group, p: &DVector<f64>) -> Vector3<f64> {
    g.a * Vector3::new(p[0], p[1], p[2]) + g.b * Vector3::new(p[3], p[4], p[5])
}

/// Levenberg-Marquardt on the group means of one or more bias-corrected logs.
pub fn fit(logs: &[ForceLog], opts: &FitOptions) -> Result<FitResult> {
    let mut groups = Vec::new();
    for log in logs {
        log.validate()?;
        groups.extend(groups_of(log)?);
    }
    let sw: Vec<f64> = opts.axis_weights.iter().map(|w| w.max(0.0).sqrt()).collect();
    let rows: Vec<(usize, usize)> = (0..groups.len()).flat_map(|g| (0..3).filter(|&k| sw[k] > 0.0).map(move |k| (g, k))).collect();
    let m = rows.len();
    let mut jac = DMatrix::zeros(m, 6);
    for (r, &(g, k)) in rows.iter().enumerate() {
        for c in 0..3 {
            jac[(r, c)] = sw[k] * groups[g].a[(k, c)];
            jac[(r, c + 3)] = sw[k] * groups[g].b[(k, c)];
        }
    }
    // column scaling makes the rank test unit free
    let scale: Vec<f64> = (0..6).map(|c| jac.column(c).norm().max(1e-300)).collect();
    let mut js = jac.clone();
    for c in 0..6 {
        js.column_mut(c).scale_mut(1.0 / scale[c]);
    }
    let sv = js.clone().svd(false, false).singular_values;
    let (smax, smin) = (sv.max(), if m >= 6 { sv.min() } else { 0.0 });
    if m < 6 || smin <= 1e-9 * smax {
        return Err(Error::RankDeficient(format!(
            "{} feed groups give {m} equations; edge and cutting terms are not separable",
            groups.len()
        )));
    }

    let resid = |p: &DVector<f64>| -> DVector<f64> {
        DVector::from_iterator(m, rows.iter().map(|&(g, k)| sw[k] * (groups[g].mean[k] - model(&groups[g], p)[k])))
    };
    let mut p = match &opts.initial {
        Some(mc) => DVector::from_iterator(6, mc.kc_n_per_mm2.iter().chain(&mc.ke_n_per_mm).cloned()),
        None => DVector::zeros(6),
    };
    let mut r = resid(&p);
    let mut cost = r.norm_squared();
    let mut lambda = 1e-3;
    let jtj = js.transpose() * &js;
    let mut converged = false;
    let mut iterations = 0;
    while iterations < opts.max_iterations {
        iterations += 1;
        // the model is linear so J is constant; work in scaled coordinates
        let g = js.transpose() * &r;
        if g.norm() <= opts.tolerance * (1.0 + cost.sqrt()) {
            converged = true;
            break;
        }
        let mut a = jtj.clone();
        for i in 0..6 {
            a[(i, i)] += lambda * jtj[(i, i)].max(1e-300);
        }
        let Some(ch) = a.cholesky() else {
            lambda *= 2.0;
            continue;
        };
        let dq = ch.solve(&g);
        let dp = DVector::from_iterator(6, (0..6).map(|i| dq[i] / scale[i]));
        let cand = &p + &dp;
        let rc = resid(&cand);
        let cc = rc.norm_squared();
        if cc < cost {
            debug_assert!(cc <= cost);
            let rel = (cost - cc) / cost.max(1e-300);
            p = cand;
            r = rc;
            cost = cc;
            lambda /= 3.0;
            if rel < 1e-15 || dq.norm() < 1e-14 {
                converged = true;
                break;
            }
        } else {
            lambda *= 2.0;
            if lambda > 1e16 {
                converged = dq.norm() < 1e-10;
                break;
            }
        }
    }
    if !converged {
        return Err(Error::NoConvergence(iterations));
    }
    let material = MaterialConfig {
        kc_n_per_mm2: [p[0], p[1], p[2]],
        ke_n_per_mm: [p[3], p[4], p[5]],
        allow_signed: true,
    };
    let (rmse_axis, inst) = rmse(logs, &material.build()?, &groups, &p)?;
    let overall = (rmse_axis.iter().map(|v| v * v).sum::<f64>() / 3.0).sqrt();
    Ok(FitResult {
        material,
        rmse_axis_n: rmse_axis,
        rmse_overall_n: overall,
        rmse_instantaneous: inst,
        iterations,
        converged,
        objective: cost,
        groups: groups.len(),
        bias_n: Vec::new(),
    })
}

/// Instantaneous model force for one record of a log.
pub fn instantaneous_force(tool: &ToolGeometry, meta: &ForceLogMeta, mat: &MaterialParams, r: &ForceRecord, theta0: f64) -> Result<Vector3<f64>> {
    let theta = theta0 + TAU * tool.spindle_speed() * r.t_s;
    let arc = immersion_arc(tool.radius(), meta.rdoc_mm, meta.down_milling);
    let mut g = Engagement::for_tool(tool);
    if r.engaged {
        for (f, d) in tool.elements() {
            g.set(f, d, in_arc(tool.element_angle(theta, f, d), arc));
        }
    }
    let feed = FeedState { v_w: Vector3::from(r.feed_mm_s), r_w_to_m: slitting_orientation().transpose(), theta };
    Ok(total_force(tool, mat, &feed, &g, &CuttingOptions::default())?.f_w)
}

fn rmse(logs: &[ForceLog], mat: &MaterialParams, groups: &[Group], p: &DVector<f64>) -> Result<([f64; 3], bool)> {
    if logs.iter().all(|l| l.meta.theta0_rad.is_some()) {
        let mut sq = Vector3::zeros();
        let mut n = 0usize;
        for log in logs {
            let tool = log.meta.tool.build()?;
            let th0 = log.meta.theta0_rad.unwrap();
            for r in log.records.iter().filter(|r| r.engaged) {
                let d = Vector3::from(r.force_n) - instantaneous_force(&tool, &log.meta, mat, r, th0)?;
                sq += d.component_mul(&d);
                n += 1;
            }
        }
        let n = n.max(1) as f64;
        Ok(([(sq[0] / n).sqrt(), (sq[1] / n).sqrt(), (sq[2] / n).sqrt()], true))
    } else {
        let mut sq = Vector3::zeros();
        for g in groups {
            let d = g.mean - model(g, p);
            sq += d.component_mul(&d);
        }
        let n = groups.len().max(1) as f64;
        Ok(([(sq[0] / n).sqrt(), (sq[1] / n).sqrt(), (sq[2] / n).sqrt()], false))
    }
}

/// Bias-correct every log, then fit.
pub fn fit_logs(logs: &[ForceLog], opts: &FitOptions) -> Result<FitResult> {
    let mut corrected = Vec::with_capacity(logs.len());
    let mut biases = Vec::with_capacity(logs.len());
    for l in logs {
        let (c, b) = bias_correct(l)?;
        corrected.push(c);
        biases.push(b.into());
    }
    let mut res = fit(&corrected, opts)?;
    res.bias_n = biases;
    Ok(res)
}

/// Linear least squares on the same group means; an independent check of
/// the LM solution.
pub fn closed_form(logs: &[ForceLog], axis_weights: [f64; 3]) -> Result<MaterialConfig> {
    let mut groups = Vec::new();
    for log in logs {
        groups.extend(groups_of(log)?);
    }
    let mut a = DMatrix::zeros(0, 6);
    let mut y = Vec::new();
    for g in &groups {
        for k in 0..3 {
            let w = axis_weights[k].max(0.0).sqrt();
            if w == 0.0 {
                continue;
            }
            let n = a.nrows();
            a = a.insert_row(n, 0.0);
            for c in 0..3 {
                a[(n, c)] = w * g.a[(k, c)];
                a[(n, c + 3)] = w * g.b[(k, c)];
            }
            y.push(w * g.mean[k]);
        }
    }
    let y = DVector::from_vec(y);
    let qr = a.clone().col_piv_qr();
    let p = qr.solve(&y).ok_or_else(|| Error::RankDeficient("closed-form normal equations".into()))?;
    Ok(MaterialConfig { kc_n_per_mm2: [p[0], p[1], p[2]], ke_n_per_mm: [p[3], p[4], p[5]], allow_signed: true })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub material: MaterialConfig,
    pub tool: ToolConfig,
    pub rdoc_mm: f64,
    pub down_milling: bool,
    pub feeds_mm_s: Vec<f64>,
    /// Records per feed; the spindle phase steps by pitch/n, so a group
    /// samples the pitch uniformly.
    pub samples_per_feed: usize,
    pub baseline_records: usize,
    pub bias_n: [f64; 3],
    pub noise_sd_n: f64,
    pub theta0_rad: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            material: MaterialParams::reference().into(),
            tool: ToolConfig { edge_length_mm: crate::config::EdgeLengths::Uniform(2.0), ..ToolConfig::default() },
            rdoc_mm: 10.0,
            down_milling: true,
            feeds_mm_s: vec![25.0, 75.0, 125.0, 175.0, 250.0],
            samples_per_feed: 2000,
            baseline_records: 200,
            bias_n: [1.0, 2.0, 3.0],
            noise_sd_n: 0.0,
            theta0_rad: 0.3,
            seed: 0,
        }
    }
}

/// Generate a log from the instantaneous force model.
pub fn synthesize(spec: &SyntheticSpec) -> Result<ForceLog> {
    let tool = spec.tool.build()?;
    let mat = spec.material.build()?;
    let meta = ForceLogMeta {
        tool: spec.tool.clone(),
        rdoc_mm: spec.rdoc_mm,
        down_milling: spec.down_milling,
        theta0_rad: Some(spec.theta0_rad),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let noise = Normal::new(0.0, spec.noise_sd_n.max(0.0)).map_err(|e| Error::InvalidConfig(e.to_string()))?;
    let pitch_period = 1.0 / (tool.n_flutes() as f64 * tool.spindle_speed());
    let n = spec.samples_per_feed.max(1);
    let dt = pitch_period * (1.0 + 1.0 / n as f64);
    // half-step phase offset gives a midpoint rule over the pitch
    let mut t = 0.5 * pitch_period / n as f64;
    let dir = if spec.down_milling { 1.0 } else { -1.0 };
    let bias = Vector3::from(spec.bias_n);
    let mut records = Vec::with_capacity(spec.baseline_records + n * spec.feeds_mm_s.len());
    let mut push = |t: f64, feed: [f64; 3], f: Vector3<f64>, engaged: bool, rng: &mut ChaCha8Rng| {
        let f = f + bias + Vector3::new(noise.sample(rng), noise.sample(rng), noise.sample(rng));
        records.push(ForceRecord { t_s: t, feed_mm_s: feed, force_n: f.into(), engaged });
    };
    for _ in 0..spec.baseline_records {
        push(t, [0.0; 3], Vector3::zeros(), false, &mut rng);
        t += dt;
    }
    for &v in &spec.feeds_mm_s {
        let feed = [dir * v, 0.0, 0.0];
        for _ in 0..n {
            let r = ForceRecord { t_s: t, feed_mm_s: feed, force_n: [0.0; 3], engaged: true };
            let f = instantaneous_force(&tool, &meta, &mat, &r, spec.theta0_rad)?;
            push(t, feed, f, true, &mut rng);
            t += dt;
        }
    }
    Ok(ForceLog { meta, records })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_bias_removed() {
        let spec = SyntheticSpec { samples_per_feed: 50, ..Default::default() };
        let log = synthesize(&spec).unwrap();
        let (c, b) = bias_correct(&log).unwrap();
        assert!((b - Vector3::new(1.0, 2.0, 3.0)).norm() < 1e-12);
        assert!(c.records[0].force_n.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn missing_baseline() {
        let spec = SyntheticSpec { samples_per_feed: 20, baseline_records: 3, ..Default::default() };
        let log = synthesize(&spec).unwrap();
        assert!(matches!(bias_correct(&log), Err(Error::InsufficientBaseline { found: 3, .. })));
    }

    #[test]
    fn single_feed_rank_deficient() {
        let spec = SyntheticSpec { feeds_mm_s: vec![50.0], samples_per_feed: 100, ..Default::default() };
        let log = synthesize(&spec).unwrap();
        assert!(matches!(fit_logs(&[log], &FitOptions::default()), Err(Error::RankDeficient(_))));
    }

    #[test]
    fn design_matches_sampled_average() {
        let spec = SyntheticSpec::default();
        let tool = spec.tool.build().unwrap();
        let mat = spec.material.build().unwrap();
        let feed = Vector3::new(100.0, 0.0, 0.0);
        let (a, b) = average_design(&tool, spec.rdoc_mm, true, &feed).unwrap();
        let analytic = a * mat.kc + b * mat.ke;
        let meta = ForceLogMeta { tool: spec.tool.clone(), rdoc_mm: spec.rdoc_mm, down_milling: true, theta0_rad: None };
        let n = 4000;
        let period = 1.0 / (tool.n_flutes() as f64 * tool.spindle_speed());
        let mut sum = Vector3::zeros();
        for i in 0..n {
            let r = ForceRecord { t_s: (i as f64 + 0.5) / n as f64 * period, feed_mm_s: feed.into(), force_n: [0.0; 3], engaged: true };
            sum += instantaneous_force(&tool, &meta, &mat, &r, 0.0).unwrap();
        }
        let avg = sum / n as f64;
        assert!((avg - analytic).norm() < 1e-3 * analytic.norm(), "{avg} vs {analytic}");
    }
}
