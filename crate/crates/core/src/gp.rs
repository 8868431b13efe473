//! Gaussian-process regression with a constant mean and an ARD RBF kernel.
//!
//! Targets are standardized internally; hyperparameters are fitted by
//! maximizing the log marginal likelihood with projected gradient ascent in
//! log space from several starts.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const JITTERS: [f64; 6] = [0.0, 1e-10, 1e-9, 1e-8, 1e-6, 1e-4];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GpHyper {
    pub length_scales: Vec<f64>,
    /// Signal variance in standardized target units.
    pub signal_var: f64,
    pub noise_var: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GpOptions {
    pub restarts: usize,
    pub iterations: usize,
    /// Keep the noise variance at this value instead of fitting it.
    pub fixed_noise: Option<f64>,
    pub length_bounds: [f64; 2],
    pub signal_bounds: [f64; 2],
    pub noise_bounds: [f64; 2],
    pub seed: u64,
    /// Starting point of the first restart; a fixed default when absent.
    pub initial: Option<GpHyper>,
}

impl Default for GpOptions {
    fn default() -> Self {
        Self {
            restarts: 8,
            iterations: 150,
            fixed_noise: None,
            length_bounds: [1e-2, 1e2],
            signal_bounds: [1e-3, 1e2],
            noise_bounds: [1e-8, 1.0],
            seed: 0,
            initial: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GpSurrogate {
    x: Vec<Vec<f64>>,
    y_mean: f64,
    y_scale: f64,
    hyper: GpHyper,
    jitter: f64,
    alpha: DVector<f64>,
    chol: Cholesky<f64, Dyn>,
    lml: f64,
}

fn sq_dist(a: &[f64], b: &[f64], ls: &[f64]) -> f64 {
    a.iter().zip(b).zip(ls).map(|((x, y), l)| ((x - y) / l).powi(2)).sum()
}

fn kernel_matrix(x: &[Vec<f64>], h: &GpHyper) -> DMatrix<f64> {
    let n = x.len();
    DMatrix::from_fn(n, n, |i, j| {
        let k = h.signal_var * (-0.5 * sq_dist(&x[i], &x[j], &h.length_scales)).exp();
        if i == j {
            k + h.noise_var
        } else {
            k
        }
    })
}

fn factor(k: &DMatrix<f64>, scale: f64) -> Result<(Cholesky<f64, Dyn>, f64)> {
    for j in JITTERS {
        let mut kj = k.clone();
        for i in 0..kj.nrows() {
            kj[(i, i)] += j * scale;
        }
        if let Some(c) = kj.cholesky() {
            return Ok((c, j * scale));
        }
    }
    Err(Error::SingularCovariance(JITTERS[JITTERS.len() - 1]))
}

fn lml_parts(x: &[Vec<f64>], y: &DVector<f64>, h: &GpHyper) -> Result<(f64, Cholesky<f64, Dyn>, DVector<f64>)> {
    let n = x.len();
    let k = kernel_matrix(x, h);
    let (chol, _) = factor(&k, h.signal_var)?;
    let alpha = chol.solve(y);
    let logdet: f64 = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    let lml = -0.5 * y.dot(&alpha) - 0.5 * logdet - 0.5 * n as f64 * (std::f64::consts::TAU).ln();
    Ok((lml, chol, alpha))
}

/// Log marginal likelihood and its gradient w.r.t. (log l_1..d, log s2, log n2).
fn lml_grad(x: &[Vec<f64>], y: &DVector<f64>, h: &GpHyper) -> Result<(f64, Vec<f64>)> {
    let (lml, chol, alpha) = lml_parts(x, y, h)?;
    Ok((lml, grad_from(x, h, &chol, &alpha)))
}

fn grad_from(x: &[Vec<f64>], h: &GpHyper, chol: &Cholesky<f64, Dyn>, alpha: &DVector<f64>) -> Vec<f64> {
    let n = x.len();
    let d = h.length_scales.len();
    let kinv = chol.inverse();
    // W = alpha alpha^T - K^-1
    let w = alpha * alpha.transpose() - kinv;
    let mut grad = vec![0.0; d + 2];
    for i in 0..n {
        for j in 0..n {
            let kf = h.signal_var * (-0.5 * sq_dist(&x[i], &x[j], &h.length_scales)).exp();
            let wij = w[(i, j)];
            for (p, l) in h.length_scales.iter().enumerate() {
                grad[p] += 0.5 * wij * kf * ((x[i][p] - x[j][p]) / l).powi(2);
            }
            grad[d] += 0.5 * wij * kf;
        }
        grad[d + 1] += 0.5 * w[(i, i)] * h.noise_var;
    }
    grad
}

fn pack(h: &GpHyper) -> Vec<f64> {
    let mut v: Vec<f64> = h.length_scales.iter().map(|l| l.ln()).collect();
    v.push(h.signal_var.ln());
    v.push(h.noise_var.ln());
    v
}

fn unpack(v: &[f64]) -> GpHyper {
    let d = v.len() - 2;
    GpHyper { length_scales: v[..d].iter().map(|x| x.exp()).collect(), signal_var: v[d].exp(), noise_var: v[d + 1].exp() }
}

impl GpSurrogate {
    /// Fit to inputs `x` (ideally scaled to the unit box) and targets `y`.
    pub fn fit(x: &[Vec<f64>], y: &[f64], opts: &GpOptions) -> Result<Self> {
        let n = x.len();
        if n < 2 || y.len() != n {
            return Err(Error::InvalidConfig(format!("GP needs at least 2 samples with targets, got {n}/{}", y.len())));
        }
        let d = x[0].len();
        if x.iter().any(|r| r.len() != d) {
            return Err(Error::DimensionMismatch { expected: d.to_string(), got: "ragged inputs".into() });
        }
        let y_mean = y.iter().sum::<f64>() / n as f64;
        let var = y.iter().map(|v| (v - y_mean).powi(2)).sum::<f64>() / n as f64;
        let y_scale = if var > 1e-300 { var.sqrt() } else { 1.0 };
        let ys = DVector::from_iterator(n, y.iter().map(|v| (v - y_mean) / y_scale));

        let mut lo = vec![opts.length_bounds[0].ln(); d];
        let mut hi = vec![opts.length_bounds[1].ln(); d];
        lo.push(opts.signal_bounds[0].ln());
        hi.push(opts.signal_bounds[1].ln());
        match opts.fixed_noise {
            Some(v) => {
                lo.push(v.ln());
                hi.push(v.ln());
            }
            None => {
                lo.push(opts.noise_bounds[0].ln());
                hi.push(opts.noise_bounds[1].ln());
            }
        }

        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        let mut best: Option<(f64, Vec<f64>)> = None;
        for r in 0..opts.restarts.max(1) {
            let mut theta: Vec<f64> = if r == 0 {
                match &opts.initial {
                    Some(h) if h.length_scales.len() == d => pack(h),
                    _ => pack(&GpHyper { length_scales: vec![0.3; d], signal_var: 1.0, noise_var: opts.fixed_noise.unwrap_or(1e-2) }),
                }
            } else {
                (0..d + 2).map(|i| if hi[i] > lo[i] { rng.gen_range(lo[i]..hi[i]) } else { lo[i] }).collect()
            };
            for (i, t) in theta.iter_mut().enumerate() {
                *t = t.clamp(lo[i], hi[i]);
            }
            let Ok((mut f, mut g)) = lml_grad(x, &ys, &unpack(&theta)) else { continue };
            let mut step = 0.1;
            for _ in 0..opts.iterations {
                let gn = g.iter().map(|v| v * v).sum::<f64>().sqrt();
                if gn < 1e-6 {
                    break;
                }
                let mut accepted = false;
                while step > 1e-8 {
                    let cand: Vec<f64> = theta.iter().zip(&g).enumerate().map(|(i, (t, gi))| (t + step * gi / gn).clamp(lo[i], hi[i])).collect();
                    let h = unpack(&cand);
                    match lml_parts(x, &ys, &h) {
                        Ok((fc, chol, alpha)) if fc > f => {
                            g = grad_from(x, &h, &chol, &alpha);
                            theta = cand;
                            f = fc;
                            step *= 1.5;
                            accepted = true;
                            break;
                        }
                        _ => step *= 0.5,
                    }
                }
                if !accepted {
                    break;
                }
            }
            if best.as_ref().is_none_or(|(bf, _)| f > *bf) {
                best = Some((f, theta));
            }
        }
        let (lml, theta) = best.ok_or(Error::SingularCovariance(JITTERS[JITTERS.len() - 1]))?;
        Self::with_hyper(x, y, unpack(&theta)).map(|mut s| {
            s.lml = lml;
            s
        })
    }

    /// Condition on data with the given hyperparameters.
    pub fn with_hyper(x: &[Vec<f64>], y: &[f64], hyper: GpHyper) -> Result<Self> {
        let n = x.len();
        let y_mean = y.iter().sum::<f64>() / n as f64;
        let var = y.iter().map(|v| (v - y_mean).powi(2)).sum::<f64>() / n as f64;
        let y_scale = if var > 1e-300 { var.sqrt() } else { 1.0 };
        let ys = DVector::from_iterator(n, y.iter().map(|v| (v - y_mean) / y_scale));
        let k = kernel_matrix(x, &hyper);
        let (chol, jitter) = factor(&k, hyper.signal_var)?;
        let alpha = chol.solve(&ys);
        let logdet: f64 = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        let lml = -0.5 * ys.dot(&alpha) - 0.5 * logdet - 0.5 * n as f64 * (std::f64::consts::TAU).ln();
        Ok(Self { x: x.to_vec(), y_mean, y_scale, hyper, jitter, alpha, chol, lml })
    }

    pub fn hyper(&self) -> &GpHyper {
        &self.hyper
    }
    pub fn log_marginal_likelihood(&self) -> f64 {
        self.lml
    }
    pub fn jitter(&self) -> f64 {
        self.jitter
    }
    pub fn dim(&self) -> usize {
        self.hyper.length_scales.len()
    }
    pub fn constant_mean(&self) -> f64 {
        self.y_mean
    }

    fn k_star(&self, p: &[f64]) -> DVector<f64> {
        DVector::from_iterator(
            self.x.len(),
            self.x.iter().map(|xi| self.hyper.signal_var * (-0.5 * sq_dist(xi, p, &self.hyper.length_scales)).exp()),
        )
    }

    pub fn mean(&self, p: &[f64]) -> f64 {
        self.y_mean + self.y_scale * self.k_star(p).dot(&self.alpha)
    }

    /// Posterior mean and latent variance (noise excluded), target units.
    pub fn predict(&self, p: &[f64]) -> (f64, f64) {
        let ks = self.k_star(p);
        let mean = self.y_mean + self.y_scale * ks.dot(&self.alpha);
        let v = self.chol.l().solve_lower_triangular(&ks).expect("triangular solve");
        let var = (self.hyper.signal_var - v.dot(&v)).max(0.0);
        (mean, var * self.y_scale * self.y_scale)
    }

    /// Expected improvement over `best` for maximization.
    pub fn expected_improvement(&self, p: &[f64], best: f64) -> f64 {
        let (m, v) = self.predict(p);
        expected_improvement(m, v.sqrt(), best)
    }
}

pub fn expected_improvement(mean: f64, sd: f64, best: f64) -> f64 {
    let imp = mean - best;
    if sd <= 1e-300 {
        return imp.max(0.0);
    }
    let z = imp / sd;
    let pdf = (-0.5 * z * z).exp() / (std::f64::consts::TAU).sqrt();
    let cdf = 0.5 * statrs::function::erf::erfc(-z / std::f64::consts::SQRT_2);
    (imp * cdf + sd * pdf).max(0.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn interpolates_noiseless() {
        let x: Vec<Vec<f64>> = (0..8).map(|i| vec![i as f64 / 7.0]).collect();
        let y: Vec<f64> = x.iter().map(|v| (3.0 * v[0]).sin() + 2.0).collect();
        let gp = GpSurrogate::fit(&x, &y, &GpOptions { fixed_noise: Some(1e-12), ..Default::default() }).unwrap();
        for (xi, yi) in x.iter().zip(&y) {
            assert!((gp.mean(xi) - yi).abs() <= 1e-6 * yi.abs());
        }
    }

    #[test]
    fn duplicate_inputs_absorbed_by_noise() {
        let x = vec![vec![0.5], vec![0.5], vec![0.1]];
        let y = vec![1.0, 2.0, 0.0];
        let gp = GpSurrogate::fit(&x, &y, &GpOptions::default()).unwrap();
        assert!(gp.hyper().noise_var > 1e-6);
        assert!(gp.mean(&[0.5]).is_finite());
    }

    #[test]
    fn ei_non_negative() {
        for m in [-3.0, 0.0, 2.0] {
            for s in [0.0, 0.1, 5.0] {
                assert!(expected_improvement(m, s, 1.0) >= 0.0);
            }
        }
        assert_eq!(expected_improvement(2.0, 0.0, 1.0), 1.0);
    }

    #[test]
    fn gradient_matches_finite_difference() {
        let x: Vec<Vec<f64>> = (0..6).map(|i| vec![i as f64 / 5.0, (i * i) as f64 / 25.0]).collect();
        let y = DVector::from_iterator(6, x.iter().map(|v| v[0] - v[1] * 0.5));
        let h = GpHyper { length_scales: vec![0.4, 0.7], signal_var: 1.3, noise_var: 0.05 };
        let (_, g) = lml_grad(&x, &y, &h).unwrap();
        let th = pack(&h);
        for i in 0..th.len() {
            let mut a = th.clone();
            let mut b = th.clone();
            a[i] += 1e-6;
            b[i] -= 1e-6;
            let fd = (lml_grad(&x, &y, &unpack(&a)).unwrap().0 - lml_grad(&x, &y, &unpack(&b)).unwrap().0) / 2e-6;
            assert!((fd - g[i]).abs() < 1e-5 * (1.0 + fd.abs()), "{i}: {fd} vs {}", g[i]);
        }
    }
}
