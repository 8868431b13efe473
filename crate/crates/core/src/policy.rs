//! Policies, observation normalization and episode rollouts.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::env::{ActionBounds, EnvConfig, Environment, EpisodeReport, MillingEnv, ObsLayout, ACTION_DIM};
use crate::error::{Error, Result};

pub trait Policy: Send {
    fn act(&mut self, obs: &[f64]) -> Vec<f64>;
    /// Clear per-episode state.
    fn reset(&mut self) {}
    fn deterministic(&self) -> bool {
        true
    }
}

/// Constant process parameters: fixed stiffness, feed and depth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaselineConfig {
    pub feed_mm_s: f64,
    pub doc_mm: f64,
    #[serde(rename = "stiffness_per_s2")]
    pub stiffness: f64,
    /// Time constant of the depth regulator.
    pub tau_s: f64,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self { feed_mm_s: 25.0, doc_mm: 5.0, stiffness: 800.0, tau_s: 1.0 }
    }
}

#[derive(Debug, Clone)]
pub struct BaselinePolicy {
    cfg: BaselineConfig,
    layout: ObsLayout,
    bounds: ActionBounds,
    path_speed: f64,
}

impl BaselinePolicy {
    pub fn new(cfg: BaselineConfig, env: &EnvConfig) -> Self {
        Self { cfg, layout: ObsLayout::for_config(env), bounds: env.action_bounds, path_speed: env.path.speed_mm_s }
    }

    /// Offset rates only: `t_delta_rate` holds the progress rate at
    /// feed / path speed, `n_delta_rate` relaxes `n_delta` to `-doc` with
    /// time constant `tau`.
    pub fn offset_rates(&self, obs: &[f64]) -> (f64, f64) {
        let t_rate = self.cfg.feed_mm_s / self.path_speed - 1.0;
        let n = obs[self.layout.n_delta];
        let n_rate = (-self.cfg.doc_mm - n) / self.cfg.tau_s;
        (t_rate, n_rate)
    }
}

impl Policy for BaselinePolicy {
    fn act(&mut self, obs: &[f64]) -> Vec<f64> {
        let (t, n) = self.offset_rates(obs);
        let k = self.cfg.stiffness;
        self.bounds.clip(&[k, k, k, t, n]).0.to_vec()
    }
}

/// Stiffness pumping: high stiffness while an axis error is shrinking, low
/// while it grows. Injects energy every oscillation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StressConfig {
    #[serde(rename = "k_low_per_s2")]
    pub k_low: f64,
    #[serde(rename = "k_high_per_s2")]
    pub k_high: f64,
    pub damping_ratio: f64,
    #[serde(rename = "stiffness_rate_limit_per_s3")]
    pub stiffness_rate_limit_per_s: f64,
    pub baseline: BaselineConfig,
}

impl Default for StressConfig {
    fn default() -> Self {
        Self {
            k_low: 100.0,
            k_high: 2000.0,
            damping_ratio: 0.1,
            stiffness_rate_limit_per_s: 2e5,
            baseline: BaselineConfig::default(),
        }
    }
}

impl StressConfig {
    /// Env config with the damping and rate limit the stress test runs at.
    pub fn apply(&self, env: &EnvConfig, et_enabled: bool) -> EnvConfig {
        let mut c = env.clone();
        c.controller.damping_ratio = self.damping_ratio;
        c.controller.stiffness_rate_limit_per_s = self.stiffness_rate_limit_per_s;
        c.controller.et_enabled = et_enabled;
        c
    }
}

#[derive(Debug, Clone)]
pub struct StressPolicy {
    cfg: StressConfig,
    base: BaselinePolicy,
    layout: ObsLayout,
    e_prev: Option<[f64; 3]>,
}

impl StressPolicy {
    pub fn new(cfg: StressConfig, env: &EnvConfig) -> Self {
        Self { base: BaselinePolicy::new(cfg.baseline.clone(), env), layout: ObsLayout::for_config(env), cfg, e_prev: None }
    }
}

impl Policy for StressPolicy {
    fn act(&mut self, obs: &[f64]) -> Vec<f64> {
        let e = [obs[self.layout.e], obs[self.layout.e + 1], obs[self.layout.e + 2]];
        let mut k = [self.cfg.k_high; 3];
        if let Some(p) = self.e_prev {
            for i in 0..3 {
                let de = e[i] - p[i];
                k[i] = if e[i] * de <= 0.0 { self.cfg.k_high } else { self.cfg.k_low };
            }
        }
        self.e_prev = Some(e);
        let (t, n) = self.base.offset_rates(obs);
        self.base.bounds.clip(&[k[0], k[1], k[2], t, n]).0.to_vec()
    }
    fn reset(&mut self) {
        self.e_prev = None;
    }
}

/// Uniformly random stiffness, redrawn every `hold_steps` control steps, on
/// top of the baseline offsets.
#[derive(Debug, Clone)]
pub struct RandomStiffnessPolicy {
    rng: ChaCha8Rng,
    seed: u64,
    hold_steps: usize,
    count: usize,
    k: [f64; 3],
    base: BaselinePolicy,
}

impl RandomStiffnessPolicy {
    pub fn new(seed: u64, hold_steps: usize, baseline: BaselineConfig, env: &EnvConfig) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            seed,
            hold_steps: hold_steps.max(1),
            count: 0,
            k: [0.0; 3],
            base: BaselinePolicy::new(baseline, env),
        }
    }
}

impl Policy for RandomStiffnessPolicy {
    fn act(&mut self, obs: &[f64]) -> Vec<f64> {
        let b = self.base.bounds;
        if self.count.is_multiple_of(self.hold_steps) {
            for k in &mut self.k {
                *k = self.rng.gen_range(b.stiffness_min..=b.stiffness_max);
            }
        }
        self.count += 1;
        let (t, n) = self.base.offset_rates(obs);
        b.clip(&[self.k[0], self.k[1], self.k[2], t, n]).0.to_vec()
    }
    fn reset(&mut self) {
        self.rng = ChaCha8Rng::seed_from_u64(self.seed);
        self.count = 0;
    }
    fn deterministic(&self) -> bool {
        false
    }
}

/// Welford running mean and variance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunningNormalizer {
    pub count: u64,
    pub mean: Vec<f64>,
    /// Sum of squared deviations.
    pub m2: Vec<f64>,
    pub clip: f64,
    pub training: bool,
}

impl RunningNormalizer {
    pub fn new(dim: usize) -> Self {
        Self { count: 0, mean: vec![0.0; dim], m2: vec![0.0; dim], clip: 10.0, training: true }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn variance(&self) -> Vec<f64> {
        if self.count == 0 {
            return vec![1.0; self.dim()];
        }
        self.m2.iter().map(|m| m / self.count as f64).collect()
    }

    pub fn update(&mut self, x: &[f64]) -> Result<()> {
        self.check(x)?;
        self.count += 1;
        let n = self.count as f64;
        for i in 0..x.len() {
            let d = x[i] - self.mean[i];
            self.mean[i] += d / n;
            self.m2[i] += d * (x[i] - self.mean[i]);
        }
        Ok(())
    }

    fn check(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim() {
            return Err(Error::DimensionMismatch { expected: self.dim().to_string(), got: x.len().to_string() });
        }
        Ok(())
    }

    /// Normalize without touching the state.
    pub fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check(x)?;
        let var = self.variance();
        Ok(x.iter()
            .zip(&self.mean)
            .zip(&var)
            .map(|((x, m), v)| {
                let z = (x - m) / (v + 1e-8).sqrt();
                if z.is_nan() {
                    0.0
                } else {
                    z.clamp(-self.clip, self.clip)
                }
            })
            .collect())
    }

    /// Updates the statistics first when in training mode.
    pub fn normalize(&mut self, x: &[f64]) -> Result<Vec<f64>> {
        if self.training {
            self.update(x)?;
        }
        self.apply(x)
    }
}

/// `a = mid + half * tanh(W z + b)` with `z` the normalized observation.
/// Parameters are stored row-major, one row of `obs_dim + 1` per action.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearPolicy {
    pub obs_dim: usize,
    pub act_dim: usize,
    pub params: Vec<f64>,
    pub normalizer: RunningNormalizer,
    pub low: Vec<f64>,
    pub high: Vec<f64>,
}

impl LinearPolicy {
    pub fn new(obs_dim: usize, low: Vec<f64>, high: Vec<f64>) -> Self {
        let act_dim = low.len();
        let mut normalizer = RunningNormalizer::new(obs_dim);
        normalizer.training = false;
        Self { obs_dim, act_dim, params: vec![0.0; act_dim * (obs_dim + 1)], normalizer, low, high }
    }

    pub fn n_params(&self) -> usize {
        self.act_dim * (self.obs_dim + 1)
    }

    pub fn with_params(&self, params: Vec<f64>) -> Self {
        Self { params, ..self.clone() }
    }

    fn raw(&self, z: &[f64]) -> Vec<f64> {
        let row = self.obs_dim + 1;
        (0..self.act_dim)
            .map(|i| {
                let w = &self.params[i * row..(i + 1) * row];
                w[..self.obs_dim].iter().zip(z).map(|(a, b)| a * b).sum::<f64>() + w[self.obs_dim]
            })
            .collect()
    }

    pub fn action(&self, obs: &[f64]) -> Vec<f64> {
        let z = match self.normalizer.apply(obs) {
            Ok(z) => z,
            Err(_) => vec![0.0; self.obs_dim],
        };
        self.raw(&z)
            .iter()
            .enumerate()
            .map(|(i, u)| {
                let mid = 0.5 * (self.low[i] + self.high[i]);
                let half = 0.5 * (self.high[i] - self.low[i]);
                let s = if u.is_nan() { 0.0 } else { u.tanh() };
                (mid + half * s).clamp(self.low[i], self.high[i])
            })
            .collect()
    }

    /// Least-squares fit of the pre-squash output to a set of
    /// (observation, action) pairs. Used to warm-start from a demonstrator.
    pub fn fit_to(&mut self, obs: &[Vec<f64>], actions: &[Vec<f64>], ridge: f64) -> Result<()> {
        let n = obs.len();
        let d = self.obs_dim + 1;
        if n == 0 || actions.len() != n {
            return Err(Error::DimensionMismatch { expected: format!("{n} actions"), got: actions.len().to_string() });
        }
        let mut x = nalgebra::DMatrix::zeros(n, d);
        for (r, o) in obs.iter().enumerate() {
            let z = self.normalizer.apply(o)?;
            for c in 0..self.obs_dim {
                x[(r, c)] = z[c];
            }
            x[(r, self.obs_dim)] = 1.0;
        }
        let mut a = x.transpose() * &x;
        for i in 0..d {
            a[(i, i)] += ridge;
        }
        let chol = a.cholesky().ok_or_else(|| Error::RankDeficient("warm-start normal equations".into()))?;
        for j in 0..self.act_dim {
            let mid = 0.5 * (self.low[j] + self.high[j]);
            let half = 0.5 * (self.high[j] - self.low[j]);
            let y = nalgebra::DVector::from_iterator(
                n,
                actions.iter().map(|a| if half > 0.0 { ((a[j] - mid) / half).clamp(-0.95, 0.95).atanh() } else { 0.0 }),
            );
            let w = chol.solve(&(x.transpose() * y));
            self.params[j * d..(j + 1) * d].copy_from_slice(w.as_slice());
        }
        Ok(())
    }
}

impl Policy for LinearPolicy {
    fn act(&mut self, obs: &[f64]) -> Vec<f64> {
        if self.normalizer.training {
            let _ = self.normalizer.update(obs);
        }
        self.action(obs)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Relu,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DenseLayer {
    /// One row per output unit.
    pub weight: Vec<Vec<f64>>,
    pub bias: Vec<f64>,
}

/// Feed-forward network exported by external trainers. Hidden layers use
/// `activation`; the last layer is linear and its output `u` maps to
/// `mid + half * clamp(u, -1, 1)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlpPolicy {
    pub obs_mean: Vec<f64>,
    pub obs_std: Vec<f64>,
    #[serde(default = "default_obs_clip")]
    pub obs_clip: f64,
    pub activation: Activation,
    pub layers: Vec<DenseLayer>,
    pub low: Vec<f64>,
    pub high: Vec<f64>,
}

fn default_obs_clip() -> f64 {
    10.0
}

impl MlpPolicy {
    pub fn obs_dim(&self) -> usize {
        self.obs_mean.len()
    }

    pub fn act_dim(&self) -> usize {
        self.low.len()
    }

    /// Checks the layer chain obs_dim -> ... -> act_dim.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(format!("mlp policy: {m}")));
        if self.obs_std.len() != self.obs_dim() || self.high.len() != self.act_dim() {
            return bad("normalizer or bound lengths disagree".into());
        }
        if self.obs_std.iter().any(|s| !(*s > 0.0)) {
            return bad("obs_std must be positive".into());
        }
        if self.layers.is_empty() {
            return bad("no layers".into());
        }
        let mut width = self.obs_dim();
        for (k, l) in self.layers.iter().enumerate() {
            if l.weight.len() != l.bias.len() || l.weight.iter().any(|r| r.len() != width) {
                return bad(format!("layer {k} expects input width {width}"));
            }
            width = l.bias.len();
        }
        if width != self.act_dim() {
            return bad(format!("output width {width} != action dim {}", self.act_dim()));
        }
        Ok(())
    }

    pub fn action(&self, obs: &[f64]) -> Vec<f64> {
        let mut h: Vec<f64> = obs
            .iter()
            .zip(self.obs_mean.iter().zip(&self.obs_std))
            .map(|(x, (m, s))| ((x - m) / s).clamp(-self.obs_clip, self.obs_clip))
            .collect();
        let last = self.layers.len() - 1;
        for (k, l) in self.layers.iter().enumerate() {
            h = l
                .weight
                .iter()
                .zip(&l.bias)
                .map(|(row, b)| {
                    let u = row.iter().zip(&h).map(|(w, x)| w * x).sum::<f64>() + b;
                    match (k == last, self.activation) {
                        (true, _) => u,
                        (false, Activation::Tanh) => u.tanh(),
                        (false, Activation::Relu) => u.max(0.0),
                    }
                })
                .collect();
        }
        h.iter()
            .enumerate()
            .map(|(i, u)| {
                let mid = 0.5 * (self.low[i] + self.high[i]);
                let half = 0.5 * (self.high[i] - self.low[i]);
                let u = if u.is_nan() { 0.0 } else { u.clamp(-1.0, 1.0) };
                mid + half * u
            })
            .collect()
    }
}

impl Policy for MlpPolicy {
    fn act(&mut self, obs: &[f64]) -> Vec<f64> {
        self.action(obs)
    }
}

/// Serialized policy artifact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum PolicyFile {
    Baseline(BaselineConfig),
    Stress(StressConfig),
    RandomStiffness { seed: u64, hold_steps: usize, baseline: BaselineConfig },
    Linear(LinearPolicy),
    Mlp(MlpPolicy),
}

impl PolicyFile {
    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn instantiate(&self, env: &EnvConfig) -> Result<Box<dyn Policy>> {
        Ok(match self {
            PolicyFile::Baseline(c) => Box::new(BaselinePolicy::new(c.clone(), env)),
            PolicyFile::Stress(c) => Box::new(StressPolicy::new(c.clone(), env)),
            PolicyFile::RandomStiffness { seed, hold_steps, baseline } => {
                Box::new(RandomStiffnessPolicy::new(*seed, *hold_steps, baseline.clone(), env))
            }
            PolicyFile::Linear(p) => {
                if p.obs_dim != env.obs_dim() || p.act_dim != ACTION_DIM {
                    return Err(Error::DimensionMismatch {
                        expected: format!("policy for obs {} / act {ACTION_DIM}", env.obs_dim()),
                        got: format!("obs {} / act {}", p.obs_dim, p.act_dim),
                    });
                }
                Box::new(p.clone())
            }
            PolicyFile::Mlp(p) => {
                p.validate()?;
                if p.obs_dim() != env.obs_dim() || p.act_dim() != ACTION_DIM {
                    return Err(Error::DimensionMismatch {
                        expected: format!("policy for obs {} / act {ACTION_DIM}", env.obs_dim()),
                        got: format!("obs {} / act {}", p.obs_dim(), p.act_dim()),
                    });
                }
                Box::new(p.clone())
            }
        })
    }
}

/// Run one episode to termination.
pub fn run_episode(env: &mut MillingEnv, policy: &mut dyn Policy, seed: u64) -> Result<EpisodeReport> {
    policy.reset();
    let mut obs = env.reset(seed)?;
    loop {
        let a = policy.act(&obs);
        let r = env.step(&a)?;
        obs = r.obs;
        if r.done {
            break;
        }
    }
    Ok(env.report(seed))
}

/// Generic rollout over any environment, returning the summed total reward.
pub fn episode_return<E: Environment + ?Sized>(env: &mut E, policy: &mut dyn Policy, seed: u64, max_steps: usize) -> Result<f64> {
    policy.reset();
    let mut obs = env.reset(seed)?;
    let mut total = 0.0;
    for _ in 0..max_steps {
        let r = env.step(&policy.act(&obs))?;
        total += r.reward.total;
        obs = r.obs;
        if r.done {
            break;
        }
    }
    Ok(total)
}

/// One-sided sign test of "a > b" over paired samples; ties are dropped.
/// Returns (wins, informative pairs, p-value).
pub fn sign_test(a: &[f64], b: &[f64]) -> (usize, usize, f64) {
    use statrs::distribution::{Binomial, DiscreteCDF};
    let mut wins = 0;
    let mut n = 0;
    for (x, y) in a.iter().zip(b) {
        if x != y {
            n += 1;
            if x > y {
                wins += 1;
            }
        }
    }
    if n == 0 {
        return (0, 0, 1.0);
    }
    let bin = Binomial::new(0.5, n as u64).expect("valid binomial");
    let p = if wins == 0 { 1.0 } else { 1.0 - bin.cdf(wins as u64 - 1) };
    (wins, n, p)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn baseline_constant_stiffness() {
        let env = EnvConfig::default();
        let mut p = BaselinePolicy::new(BaselineConfig::default(), &env);
        let l = ObsLayout::for_config(&env);
        let mut obs = vec![0.3; env.obs_dim()];
        let a = p.act(&obs);
        assert_eq!(&a[..3], &[800.0; 3]);
        obs[l.n_delta] = -5.0;
        let a = p.act(&obs);
        assert_eq!(a[4], 0.0);
        assert_eq!(a[3], 0.0);
    }

    #[test]
    fn normalizer_first_sample_zero() {
        let mut n = RunningNormalizer::new(2);
        assert_eq!(n.normalize(&[3.0, -1.0]).unwrap(), vec![0.0, 0.0]);
        n.training = false;
        let before = n.clone();
        n.normalize(&[5.0, 5.0]).unwrap();
        assert_eq!(n, before);
        assert!(n.normalize(&[1.0]).is_err());
    }

    #[test]
    fn mlp_identity_maps_to_bounds() {
        let m = MlpPolicy {
            obs_mean: vec![0.0, 0.0],
            obs_std: vec![1.0, 2.0],
            obs_clip: 10.0,
            activation: Activation::Relu,
            layers: vec![
                DenseLayer { weight: vec![vec![1.0, 0.0], vec![0.0, 1.0]], bias: vec![0.0, 0.0] },
                DenseLayer { weight: vec![vec![1.0, 0.0], vec![0.0, 1.0]], bias: vec![0.0, -0.5] },
            ],
            low: vec![0.0, -1.0],
            high: vec![10.0, 1.0],
        };
        m.validate().unwrap();
        // relu(0.5)=0.5 -> 5 + 5*0.5; relu(-1)=0 -> 0 - 0.5
        assert_eq!(m.action(&[0.5, -2.0]), vec![7.5, -0.5]);
        assert_eq!(m.action(&[9.0, 0.0]), vec![10.0, -0.5]);
        let mut bad = m.clone();
        bad.layers[1].weight[0].push(1.0);
        assert!(bad.validate().is_err());
    }

    #[test]
    fn sign_test_values() {
        let (w, n, p) = sign_test(&[1.0; 10], &[0.0; 10]);
        assert_eq!((w, n), (10, 10));
        assert!((p - 0.5f64.powi(10)).abs() < 1e-15);
        let (_, _, p) = sign_test(&[0.0; 4], &[0.0; 4]);
        assert_eq!(p, 1.0);
    }
}
