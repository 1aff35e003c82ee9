//! Bayesian optimization of GAT hyperparameters with a Gaussian-process
//! surrogate (Matern 5/2) and expected-improvement acquisition.
//!
//! The optimizer works on the unit cube; [`SearchSpace`] maps unit points to
//! hyperparameters (log scale for learning rate and weight decay, hidden
//! width rounded to an integer).

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{GatError, GatHyperParams};
use crate::scalar::Scalar;
use crate::seeds;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SearchSpace {
    pub nhid: (usize, usize),
    pub lr: (f64, f64),
    pub dropout: (f64, f64),
    pub weight_decay: (f64, f64),
}

impl Default for SearchSpace {
    fn default() -> Self {
        Self {
            nhid: (4, 64),
            lr: (1e-4, 1e-1),
            dropout: (0.0, 0.7),
            weight_decay: (1e-6, 1e-2),
        }
    }
}

/// Tunable subset of [`GatHyperParams`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GatTuning {
    pub nhid: usize,
    pub lr: f64,
    pub dropout: f64,
    pub weight_decay: f64,
}

impl GatTuning {
    pub fn to_hyper<S: Scalar>(&self, nfeat: usize, nclass: usize) -> GatHyperParams<S> {
        GatHyperParams {
            nfeat,
            nclass,
            nhid: self.nhid,
            lr: S::lit(self.lr),
            dropout: S::lit(self.dropout),
            weight_decay: S::lit(self.weight_decay),
        }
    }
}

fn lerp(lo: f64, hi: f64, u: f64) -> f64 {
    lo + (hi - lo) * u.clamp(0.0, 1.0)
}

fn log_lerp(lo: f64, hi: f64, u: f64) -> f64 {
    lerp(lo.ln(), hi.ln(), u).exp()
}

impl SearchSpace {
    pub const DIM: usize = 4;

    pub fn decode(&self, u: &[f64]) -> GatTuning {
        let (lo, hi) = self.nhid;
        GatTuning {
            nhid: lerp(lo as f64, hi as f64, u[0]).round() as usize,
            lr: log_lerp(self.lr.0, self.lr.1, u[1]),
            dropout: lerp(self.dropout.0, self.dropout.1, u[2]),
            weight_decay: log_lerp(self.weight_decay.0, self.weight_decay.1, u[3]),
        }
    }
}

fn matern52(a: &[f64], b: &[f64], length: f64) -> f64 {
    let r = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
        / length;
    let s = 5f64.sqrt() * r;
    (1.0 + s + s * s / 3.0) * (-s).exp()
}

/// Lower Cholesky factor, or `None` when the matrix is not positive definite.
fn cholesky(a: &[f64], n: usize) -> Option<Vec<f64>> {
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= l[i * n + k] * l[j * n + k];
            }
            if i == j {
                if s <= 0.0 {
                    return None;
                }
                l[i * n + i] = s.sqrt();
            } else {
                l[i * n + j] = s / l[j * n + j];
            }
        }
    }
    Some(l)
}

fn forward_sub(l: &[f64], n: usize, b: &[f64]) -> Vec<f64> {
    let mut x = b.to_vec();
    for i in 0..n {
        for k in 0..i {
            x[i] -= l[i * n + k] * x[k];
        }
        x[i] /= l[i * n + i];
    }
    x
}

fn backward_sub(l: &[f64], n: usize, b: &[f64]) -> Vec<f64> {
    let mut x = b.to_vec();
    for i in (0..n).rev() {
        for k in i + 1..n {
            x[i] -= l[k * n + i] * x[k];
        }
        x[i] /= l[i * n + i];
    }
    x
}

/// Starts refined by local search when maximizing expected improvement.
const LOCAL_STARTS: usize = 5;

const LENGTH_SCALES: [f64; 8] = [0.05, 0.1, 0.2, 0.3, 0.5, 0.8, 1.2, 2.0];

/// GP regression with unit signal variance on standardized targets. The
/// length-scale is picked from a fixed grid by marginal likelihood.
#[derive(Debug, Clone)]
pub struct GaussianProcess {
    x: Vec<Vec<f64>>,
    y: Vec<f64>,
    y_mean: f64,
    y_std: f64,
    noise: f64,
    length: f64,
    chol: Vec<f64>,
    weights: Vec<f64>,
}

impl GaussianProcess {
    /// `noise` is the observation variance in standardized units. With zero
    /// noise the posterior at an observed input is exact.
    pub fn fit(x: Vec<Vec<f64>>, y: Vec<f64>, noise: f64) -> Self {
        let n = y.len();
        let y_mean = y.iter().sum::<f64>() / n as f64;
        let var = y.iter().map(|v| (v - y_mean).powi(2)).sum::<f64>() / n as f64;
        let y_std = if var > 0.0 { var.sqrt() } else { 1.0 };
        let ys: Vec<f64> = y.iter().map(|v| (v - y_mean) / y_std).collect();

        let mut best: Option<(f64, f64, Vec<f64>, Vec<f64>)> = None;
        for &length in &LENGTH_SCALES {
            let Some(chol) = Self::factor(&x, length, noise) else {
                continue;
            };
            let w = backward_sub(&chol, n, &forward_sub(&chol, n, &ys));
            let fit: f64 = ys.iter().zip(&w).map(|(a, b)| a * b).sum();
            let logdet: f64 = (0..n).map(|i| chol[i * n + i].ln()).sum();
            let lml = -0.5 * fit - logdet;
            if best.as_ref().is_none_or(|b| lml > b.0) {
                best = Some((lml, length, chol, w));
            }
        }
        let (_, length, chol, weights) = best.expect("jittered kernel is positive definite");
        Self {
            x,
            y,
            y_mean,
            y_std,
            noise,
            length,
            chol,
            weights,
        }
    }

    fn factor(x: &[Vec<f64>], length: f64, noise: f64) -> Option<Vec<f64>> {
        let n = x.len();
        let mut jitter = 1e-10;
        while jitter < 1.0 {
            let mut k = vec![0.0; n * n];
            for i in 0..n {
                for j in 0..n {
                    k[i * n + j] = matern52(&x[i], &x[j], length);
                }
                k[i * n + i] += noise + jitter;
            }
            if let Some(l) = cholesky(&k, n) {
                return Some(l);
            }
            jitter *= 10.0;
        }
        None
    }

    pub fn length_scale(&self) -> f64 {
        self.length
    }

    /// Posterior mean and standard deviation in the original target units.
    pub fn predict(&self, p: &[f64]) -> (f64, f64) {
        if self.noise == 0.0 {
            if let Some(i) = self.x.iter().position(|xi| xi.as_slice() == p) {
                return (self.y[i], 0.0);
            }
        }
        let n = self.x.len();
        let k: Vec<f64> = self.x.iter().map(|xi| matern52(xi, p, self.length)).collect();
        let mean: f64 = k.iter().zip(&self.weights).map(|(a, b)| a * b).sum();
        let v = forward_sub(&self.chol, n, &k);
        let var = (1.0 - v.iter().map(|t| t * t).sum::<f64>()).max(0.0);
        (self.y_mean + self.y_std * mean, self.y_std * var.sqrt())
    }
}

/// Expected improvement over `best` for maximization.
pub fn expected_improvement(mean: f64, std: f64, best: f64, xi: f64) -> f64 {
    let gain = mean - best - xi;
    if std <= 0.0 {
        return gain.max(0.0);
    }
    let z = gain / std;
    let cdf = 0.5 * (1.0 + libm::erf(z / std::f64::consts::SQRT_2));
    let pdf = (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt();
    (gain * cdf + std * pdf).max(0.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trial {
    pub unit: Vec<f64>,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BayesResult {
    pub trials: Vec<Trial>,
    /// Index of the first trial attaining the maximum.
    pub best: usize,
}

impl BayesResult {
    pub fn best_trial(&self) -> &Trial {
        &self.trials[self.best]
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BayesOptimizer {
    pub dim: usize,
    pub budget: usize,
    pub init_random: usize,
    pub noise: f64,
    /// Exploration margin in target units.
    pub xi: f64,
    /// Random candidates scored per acquisition step.
    pub candidates: usize,
    pub seed: u64,
}

impl BayesOptimizer {
    pub fn new(dim: usize, budget: usize, init_random: usize, seed: u64) -> Self {
        Self {
            dim,
            budget,
            init_random,
            noise: 0.0,
            xi: 0.0,
            candidates: 1000,
            seed,
        }
    }

    /// Maximizes `objective` over `[0,1]^dim` with exactly `budget` calls.
    pub fn maximize<F>(&self, mut objective: F) -> Result<BayesResult, GatError>
    where
        F: FnMut(&[f64]) -> Result<f64, GatError>,
    {
        if self.init_random == 0 || self.budget < self.init_random {
            return Err(GatError::BudgetTooSmall {
                budget: self.budget,
                init_random: self.init_random,
            });
        }
        let mut rng = seeds::rng(self.seed);
        let mut trials: Vec<Trial> = Vec::with_capacity(self.budget);
        for t in 0..self.budget {
            let unit = if t < self.init_random {
                self.random_point(&mut rng)
            } else {
                self.propose(&trials, &mut rng)
            };
            let value = objective(&unit)?;
            log::debug!("bayes trial {t}: {unit:?} -> {value}");
            trials.push(Trial { unit, value });
        }
        let best = trials
            .iter()
            .enumerate()
            .fold(0, |b, (i, t)| if t.value > trials[b].value { i } else { b });
        Ok(BayesResult { trials, best })
    }

    fn random_point<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        (0..self.dim).map(|_| rng.random::<f64>()).collect()
    }

    fn propose<R: Rng + ?Sized>(&self, trials: &[Trial], rng: &mut R) -> Vec<f64> {
        let gp = GaussianProcess::fit(
            trials.iter().map(|t| t.unit.clone()).collect(),
            trials.iter().map(|t| t.value).collect(),
            self.noise,
        );
        let best = trials.iter().map(|t| t.value).fold(f64::NEG_INFINITY, f64::max);
        let incumbent = trials
            .iter()
            .find(|t| t.value == best)
            .map(|t| t.unit.clone())
            .unwrap_or_default();
        let ei = |p: &[f64]| {
            let (m, s) = gp.predict(p);
            expected_improvement(m, s, best, self.xi)
        };
        let mut scored: Vec<(f64, Vec<f64>)> = (0..self.candidates)
            .map(|c| {
                // a quarter of the candidates perturb the incumbent
                let p: Vec<f64> = if c % 4 == 0 {
                    incumbent
                        .iter()
                        .map(|&v| (v + 0.1 * (rng.random::<f64>() - 0.5)).clamp(0.0, 1.0))
                        .collect()
                } else {
                    self.random_point(rng)
                };
                (ei(&p), p)
            })
            .collect();
        scored.sort_by(|a, b| b.0.total_cmp(&a.0));
        scored.truncate(LOCAL_STARTS);
        let mut top = (f64::NEG_INFINITY, Vec::new());
        for (mut v, mut p) in scored {
            // compass search from each start
            let mut step = 0.05;
            while step > 1e-3 {
                let mut moved = false;
                for d in 0..self.dim {
                    for dir in [-1.0, 1.0] {
                        let mut q = p.clone();
                        q[d] = (q[d] + dir * step).clamp(0.0, 1.0);
                        let e = ei(&q);
                        if e > v {
                            (v, p) = (e, q);
                            moved = true;
                        }
                    }
                }
                if !moved {
                    step /= 2.0;
                }
            }
            if v > top.0 {
                top = (v, p);
            }
        }
        if top.0 <= 0.0 {
            return self.random_point(rng);
        }
        top.1
    }
}

/// Tunes GAT hyperparameters by maximizing `objective` (validation F1).
pub fn bayes_opt<F>(
    space: &SearchSpace,
    budget: usize,
    init_random: usize,
    seed: u64,
    mut objective: F,
) -> Result<(GatTuning, BayesResult), GatError>
where
    F: FnMut(&GatTuning) -> Result<f64, GatError>,
{
    let opt = BayesOptimizer::new(SearchSpace::DIM, budget, init_random, seed);
    let result = opt.maximize(|u| objective(&space.decode(u)))?;
    Ok((space.decode(&result.best_trial().unit), result))
}
