//! Efficient global optimization of constant process parameters.
//!
//! A Latin-hypercube design seeds the surrogate, expected improvement picks
//! the remaining samples, and the optimum is the maximum of the posterior
//! mean over a regular grid refined by pattern search. Search happens in the
//! unit box; only the active dimensions are varied.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::env::{EnvConfig, MillingEnv};
use crate::error::{Error, Result};
use crate::gp::{GpHyper, GpOptions, GpSurrogate};
use crate::policy::{run_episode, BaselineConfig, BaselinePolicy};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProcessParams {
    pub feed_mm_s: f64,
    pub rdoc_mm: f64,
    #[serde(rename = "stiffness_per_s2")]
    pub stiffness: f64,
}

impl ProcessParams {
    pub fn to_array(&self) -> [f64; 3] {
        [self.feed_mm_s, self.rdoc_mm, self.stiffness]
    }
    pub fn from_array(a: [f64; 3]) -> Self {
        Self { feed_mm_s: a[0], rdoc_mm: a[1], stiffness: a[2] }
    }

    pub fn baseline(&self) -> BaselineConfig {
        BaselineConfig { feed_mm_s: self.feed_mm_s, doc_mm: self.rdoc_mm, stiffness: self.stiffness, ..Default::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EgoConfig {
    pub budget: usize,
    pub init_fraction: f64,
    /// feed (mm/s), rdoc (mm), stiffness (s^-2).
    pub lower: [f64; 3],
    pub upper: [f64; 3],
    pub active: [bool; 3],
    /// Values of inactive dimensions.
    pub fixed: [f64; 3],
    pub grid_points: usize,
    pub ei_candidates: usize,
    pub gp: GpOptions,
    /// Full multi-restart hyperparameter fit every this many acquisitions;
    /// in between a single start from the previous optimum.
    pub full_refit_every: usize,
    /// Every evaluation uses a fresh episode seed; otherwise all reuse `seed`.
    pub vary_episode_seed: bool,
}

impl Default for EgoConfig {
    fn default() -> Self {
        Self {
            budget: 115,
            init_fraction: 0.4,
            lower: [1.0, 0.5, 100.0],
            upper: [50.0, 15.0, 2000.0],
            active: [true; 3],
            fixed: [25.0, 5.0, 800.0],
            grid_points: 64,
            ei_candidates: 2048,
            gp: GpOptions::default(),
            full_refit_every: 10,
            vary_episode_seed: true,
        }
    }
}

impl EgoConfig {
    pub fn validate(&self) -> Result<()> {
        if self.budget < 10 {
            return Err(Error::InvalidConfig(format!("EGO budget must be at least 10, got {}", self.budget)));
        }
        if !(self.init_fraction > 0.0 && self.init_fraction <= 1.0) {
            return Err(Error::InvalidConfig("init_fraction must lie in (0, 1]".into()));
        }
        if (0..3).any(|i| !(self.lower[i] < self.upper[i])) {
            return Err(Error::InvalidConfig("EGO search box is empty".into()));
        }
        if !self.active.iter().any(|a| *a) {
            return Err(Error::InvalidConfig("EGO needs at least one active dimension".into()));
        }
        if self.grid_points < 2 {
            return Err(Error::InvalidConfig("grid_points must be at least 2".into()));
        }
        Ok(())
    }

    pub fn active_dims(&self) -> Vec<usize> {
        (0..3).filter(|&i| self.active[i]).collect()
    }

    /// Unit-box coordinates of the active dimensions to physical params.
    pub fn to_params(&self, u: &[f64]) -> ProcessParams {
        let mut a = self.fixed;
        for (k, &i) in self.active_dims().iter().enumerate() {
            a[i] = self.lower[i] + u[k].clamp(0.0, 1.0) * (self.upper[i] - self.lower[i]);
        }
        ProcessParams::from_array(a)
    }
}

/// Reward of one rollout at constant parameters.
pub trait Objective {
    /// `k` is the evaluation index.
    fn evaluate(&mut self, p: &ProcessParams, k: usize) -> Result<f64>;
}

impl<F: FnMut(&ProcessParams, usize) -> Result<f64>> Objective for F {
    fn evaluate(&mut self, p: &ProcessParams, k: usize) -> Result<f64> {
        self(p, k)
    }
}

/// Baseline-policy episode with the path speed set to the feed.
pub struct MillingObjective {
    pub env: EnvConfig,
    pub seed: u64,
    pub vary_seed: bool,
}

impl MillingObjective {
    pub fn env_for(&self, p: &ProcessParams) -> EnvConfig {
        let mut c = self.env.clone();
        c.path.speed_mm_s = p.feed_mm_s;
        c
    }
}

impl Objective for MillingObjective {
    fn evaluate(&mut self, p: &ProcessParams, k: usize) -> Result<f64> {
        let cfg = self.env_for(p);
        let seed = if self.vary_seed { self.seed.wrapping_add(k as u64) } else { self.seed };
        let mut env = MillingEnv::new(cfg.clone())?;
        let mut policy = BaselinePolicy::new(p.baseline(), &cfg);
        match run_episode(&mut env, &mut policy, seed) {
            Ok(r) => Ok(r.reward.total),
            Err(e) if e.is_safety_stop() => Ok(-cfg.reward.safety_penalty),
            Err(e) => Err(e),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplePhase {
    Design,
    Acquisition,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EgoSample {
    pub index: usize,
    pub phase: SamplePhase,
    pub params: ProcessParams,
    pub reward: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EgoResult {
    pub history: Vec<EgoSample>,
    pub optimum: ProcessParams,
    pub predicted_reward: f64,
    pub hyper: GpHyper,
}

impl EgoResult {
    /// The final surrogate, rebuilt from the history with the fitted
    /// hyperparameters.
    pub fn surrogate(&self, cfg: &EgoConfig) -> Result<GpSurrogate> {
        let dims = cfg.active_dims();
        let xs: Vec<Vec<f64>> = self
            .history
            .iter()
            .map(|s| {
                let a = s.params.to_array();
                dims.iter().map(|&i| (a[i] - cfg.lower[i]) / (cfg.upper[i] - cfg.lower[i])).collect()
            })
            .collect();
        let ys: Vec<f64> = self.history.iter().map(|s| s.reward).collect();
        GpSurrogate::with_hyper(&xs, &ys, self.hyper.clone())
    }
}

pub fn latin_hypercube(n: usize, d: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut pts = vec![vec![0.0; d]; n];
    for j in 0..d {
        let mut strata: Vec<usize> = (0..n).collect();
        strata.shuffle(rng);
        for (i, s) in strata.into_iter().enumerate() {
            pts[i][j] = (s as f64 + rng.gen::<f64>()) / n as f64;
        }
    }
    pts
}

/// Coordinate pattern search maximizing `f` inside the unit box.
fn pattern_search(f: &dyn Fn(&[f64]) -> f64, start: &[f64], step0: f64) -> (Vec<f64>, f64) {
    let mut x = start.to_vec();
    let mut fx = f(&x);
    let mut step = step0;
    while step > 1e-6 {
        let mut improved = false;
        for i in 0..x.len() {
            for s in [step, -step] {
                let mut c = x.clone();
                c[i] = (c[i] + s).clamp(0.0, 1.0);
                let fc = f(&c);
                if fc > fx {
                    x = c;
                    fx = fc;
                    improved = true;
                }
            }
        }
        if !improved {
            step *= 0.5;
        }
    }
    (x, fx)
}

fn grid_argmax(gp: &GpSurrogate, d: usize, m: usize) -> (Vec<f64>, f64) {
    let total = m.pow(d as u32);
    let mut best = (vec![0.0; d], f64::NEG_INFINITY);
    let mut p = vec![0.0; d];
    for idx in 0..total {
        let mut r = idx;
        for v in p.iter_mut() {
            *v = (r % m) as f64 / (m - 1) as f64;
            r /= m;
        }
        let v = gp.mean(&p);
        if v > best.1 {
            best = (p.clone(), v);
        }
    }
    best
}

/// Run EGO against any objective.
pub fn optimize(objective: &mut dyn Objective, cfg: &EgoConfig, seed: u64) -> Result<EgoResult> {
    cfg.validate()?;
    let dims = cfg.active_dims();
    let d = dims.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_init = ((cfg.budget as f64 * cfg.init_fraction).round() as usize).clamp(2, cfg.budget);
    let mut xs: Vec<Vec<f64>> = Vec::with_capacity(cfg.budget);
    let mut ys: Vec<f64> = Vec::with_capacity(cfg.budget);
    let mut history = Vec::with_capacity(cfg.budget);
    let gp_opts = |k: usize, prev: Option<&GpSurrogate>| match prev {
        // cheap refit from the previous optimum between full restarts
        Some(g) if cfg.full_refit_every > 1 && !(k - n_init).is_multiple_of(cfg.full_refit_every) => {
            GpOptions { seed: seed.wrapping_add(k as u64), restarts: 1, initial: Some(g.hyper().clone()), ..cfg.gp.clone() }
        }
        _ => GpOptions { seed: seed.wrapping_add(k as u64), ..cfg.gp.clone() },
    };
    let mut prev: Option<GpSurrogate> = None;

    for u in latin_hypercube(n_init, d, &mut rng) {
        let p = cfg.to_params(&u);
        let r = objective.evaluate(&p, history.len())?;
        history.push(EgoSample { index: history.len(), phase: SamplePhase::Design, params: p, reward: r });
        xs.push(u);
        ys.push(r);
    }

    while history.len() < cfg.budget {
        let gp = GpSurrogate::fit(&xs, &ys, &gp_opts(history.len(), prev.as_ref()))?;
        let best = ys.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let ei = |u: &[f64]| gp.expected_improvement(u, best);
        let mut cands: Vec<(Vec<f64>, f64)> = (0..cfg.ei_candidates)
            .map(|_| {
                let u: Vec<f64> = (0..d).map(|_| rng.gen::<f64>()).collect();
                let v = ei(&u);
                (u, v)
            })
            .collect();
        cands.sort_by(|a, b| b.1.total_cmp(&a.1));
        let mut pick = cands[0].clone();
        for c in cands.iter().take(4) {
            let r = pattern_search(&ei, &c.0, 0.05);
            if r.1 > pick.1 {
                pick = r;
            }
        }
        let u = pick.0;
        let p = cfg.to_params(&u);
        let r = objective.evaluate(&p, history.len())?;
        history.push(EgoSample { index: history.len(), phase: SamplePhase::Acquisition, params: p, reward: r });
        xs.push(u);
        ys.push(r);
        prev = Some(gp);
    }

    let gp = GpSurrogate::fit(&xs, &ys, &gp_opts(history.len(), None))?;
    let m = cfg.grid_points;
    let (g, _) = grid_argmax(&gp, d, m);
    let mean = |u: &[f64]| gp.mean(u);
    let (u, v) = pattern_search(&mean, &g, 0.5 / (m - 1) as f64);
    Ok(EgoResult { history, optimum: cfg.to_params(&u), predicted_reward: v, hyper: gp.hyper().clone() })
}

/// Posterior mean along unit-box dimension `dim`, averaged over a regular
/// grid of `others` points in each remaining dimension.
pub fn partial_dependence(gp: &GpSurrogate, dim: usize, samples: usize, others: usize) -> Vec<(f64, f64)> {
    let d = gp.dim();
    let rest: Vec<usize> = (0..d).filter(|&i| i != dim).collect();
    let others = others.max(1);
    let n_rest = others.pow(rest.len() as u32);
    let coord = |k: usize| if others == 1 { 0.5 } else { k as f64 / (others - 1) as f64 };
    (0..samples)
        .map(|s| {
            let t = if samples == 1 { 0.5 } else { s as f64 / (samples - 1) as f64 };
            let mut p = vec![0.0; d];
            p[dim] = t;
            let mut sum = 0.0;
            for idx in 0..n_rest {
                let mut r = idx;
                for &j in &rest {
                    p[j] = coord(r % others);
                    r /= others;
                }
                sum += gp.mean(&p);
            }
            (t, sum / n_rest as f64)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lhs_one_point_per_stratum() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let pts = latin_hypercube(10, 3, &mut rng);
        for j in 0..3 {
            let mut s: Vec<usize> = pts.iter().map(|p| (p[j] * 10.0) as usize).collect();
            s.sort();
            assert_eq!(s, (0..10).collect::<Vec<_>>());
        }
    }

    #[test]
    fn history_matches_budget_and_box() {
        let cfg = EgoConfig { budget: 12, ei_candidates: 256, grid_points: 16, ..Default::default() };
        let mut f = |p: &ProcessParams, _k: usize| -> Result<f64> { Ok(-(p.feed_mm_s - 20.0).powi(2) / 100.0 - (p.rdoc_mm - 4.0).powi(2)) };
        let r = optimize(&mut f, &cfg, 2).unwrap();
        assert_eq!(r.history.len(), 12);
        for s in &r.history {
            let a = s.params.to_array();
            for i in 0..3 {
                assert!(a[i] >= cfg.lower[i] && a[i] <= cfg.upper[i]);
            }
        }
    }

    #[test]
    fn inactive_dims_stay_fixed() {
        let cfg = EgoConfig { active: [true, false, false], ..Default::default() };
        let p = cfg.to_params(&[1.0]);
        assert_eq!(p.to_array(), [50.0, 5.0, 800.0]);
    }
}
