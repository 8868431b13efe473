//! Cross-entropy method over linear policy parameters.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::env::{EnvConfig, Environment, MillingEnv};
use crate::error::{Error, Result};
use crate::policy::{episode_return, BaselineConfig, BaselinePolicy, LinearPolicy, Policy};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CemConfig {
    pub generations: usize,
    pub population: usize,
    pub elite_frac: f64,
    pub init_std: f64,
    /// Added to the refit std each generation, decays linearly to zero.
    pub extra_std: f64,
    pub episodes_per_candidate: usize,
    /// Baseline episodes used to fit the normalizer and warm start.
    pub warmup_episodes: usize,
    pub warm_start: bool,
    pub max_episode_steps: usize,
    /// Evaluate candidates on the rayon pool; results are identical either way.
    pub parallel: bool,
}

impl Default for CemConfig {
    fn default() -> Self {
        Self {
            generations: 40,
            population: 64,
            elite_frac: 0.125,
            init_std: 0.3,
            extra_std: 0.05,
            episodes_per_candidate: 2,
            warmup_episodes: 4,
            warm_start: true,
            max_episode_steps: 100_000,
            parallel: true,
        }
    }
}

impl CemConfig {
    pub fn validate(&self) -> Result<()> {
        if self.population < 8 {
            return Err(Error::InvalidConfig(format!("population must be at least 8, got {}", self.population)));
        }
        if !(self.elite_frac > 0.0 && self.elite_frac <= 0.5) {
            return Err(Error::InvalidConfig(format!("elite_frac must lie in (0, 0.5], got {}", self.elite_frac)));
        }
        if !(self.init_std > 0.0 && self.extra_std >= 0.0) || self.episodes_per_candidate == 0 {
            return Err(Error::InvalidConfig("CEM std and episode count must be positive".into()));
        }
        Ok(())
    }

    pub fn n_elite(&self) -> usize {
        ((self.population as f64 * self.elite_frac).round() as usize).max(1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GenerationStats {
    pub generation: usize,
    pub mean: f64,
    pub std: f64,
    pub best: f64,
}

#[derive(Debug, Clone)]
pub struct TrainResult {
    pub policy: LinearPolicy,
    pub curve: Vec<GenerationStats>,
}

/// Training seeds never collide with evaluation seeds below 2^40.
const TRAIN_SEED_BASE: u64 = 1 << 40;

fn evaluate<E, F>(factory: &F, policy: &LinearPolicy, seeds: &[u64], max_steps: usize) -> Result<f64>
where
    E: Environment,
    F: Fn() -> Result<E>,
{
    let mut env = factory()?;
    let mut p = policy.clone();
    let mut sum = 0.0;
    for &s in seeds {
        sum += episode_return(&mut env, &mut p as &mut dyn Policy, s, max_steps)?;
    }
    Ok(sum / seeds.len() as f64)
}

/// CEM from `init`. Each generation evaluates the current mean plus
/// `population - 1` samples on a shared set of seeds; the best candidate of
/// the last generation is returned.
pub fn train_cem<E, F>(factory: F, init: LinearPolicy, cfg: &CemConfig, seed: u64) -> Result<TrainResult>
where
    E: Environment,
    F: Fn() -> Result<E> + Sync,
{
    cfg.validate()?;
    let n = init.n_params();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mean = init.params.clone();
    let mut std = vec![cfg.init_std; n];
    let mut curve = Vec::with_capacity(cfg.generations);
    let mut best = init.clone();
    let n_elite = cfg.n_elite();
    let std_normal = Normal::new(0.0, 1.0).expect("unit normal");

    for g in 0..cfg.generations {
        let extra = cfg.extra_std * (1.0 - g as f64 / cfg.generations as f64);
        let mut cands = vec![mean.clone()];
        for _ in 1..cfg.population {
            cands.push((0..n).map(|i| mean[i] + std[i] * std_normal.sample(&mut rng)).collect::<Vec<_>>());
        }
        let seeds: Vec<u64> = (0..cfg.episodes_per_candidate)
            .map(|k| TRAIN_SEED_BASE + seed.wrapping_mul(1_000_003) % (1 << 30) * 1024 + (g * cfg.episodes_per_candidate + k) as u64)
            .collect();
        let eval = |p: &Vec<f64>| evaluate(&factory, &init.with_params(p.clone()), &seeds, cfg.max_episode_steps);
        let scores: Vec<f64> = if cfg.parallel {
            cands.par_iter().map(eval).collect::<Result<_>>()?
        } else {
            cands.iter().map(eval).collect::<Result<_>>()?
        };

        let mut order: Vec<usize> = (0..cands.len()).collect();
        order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
        let m = scores.iter().sum::<f64>() / scores.len() as f64;
        let sd = (scores.iter().map(|s| (s - m).powi(2)).sum::<f64>() / scores.len() as f64).sqrt();
        curve.push(GenerationStats { generation: g, mean: m, std: sd, best: scores[order[0]] });
        log::info!("cem generation {g}: mean {m:.4} best {:.4}", scores[order[0]]);
        best = init.with_params(cands[order[0]].clone());

        let elite = &order[..n_elite];
        for i in 0..n {
            let mu = elite.iter().map(|&k| cands[k][i]).sum::<f64>() / n_elite as f64;
            let var = elite.iter().map(|&k| (cands[k][i] - mu).powi(2)).sum::<f64>() / n_elite as f64;
            mean[i] = mu;
            std[i] = var.sqrt() + extra;
        }
    }
    Ok(TrainResult { policy: best, curve })
}

/// Linear policy with the normalizer fitted on baseline rollouts and,
/// optionally, parameters regressed onto the baseline actions.
pub fn warm_start_policy(env_cfg: &EnvConfig, baseline: &BaselineConfig, cfg: &CemConfig, seed: u64) -> Result<LinearPolicy> {
    let mut env = MillingEnv::new(env_cfg.clone())?;
    let mut policy = LinearPolicy::new(env.obs_dim(), env.action_low(), env.action_high());
    let mut demo = BaselinePolicy::new(baseline.clone(), env_cfg);
    let mut obs_log = Vec::new();
    let mut act_log = Vec::new();
    for k in 0..cfg.warmup_episodes {
        let mut obs = env.reset(TRAIN_SEED_BASE - 1 - seed.wrapping_mul(64) % (1 << 30) - k as u64)?;
        loop {
            let a = demo.act(&obs);
            policy.normalizer.update(&obs)?;
            obs_log.push(obs.clone());
            act_log.push(a.clone());
            let r = env.step(&a)?;
            obs = r.obs;
            if r.done {
                break;
            }
        }
    }
    policy.normalizer.training = false;
    if cfg.warm_start && !obs_log.is_empty() {
        policy.fit_to(&obs_log, &act_log, 1e-3)?;
    }
    Ok(policy)
}
