//! SMO dual solver with maximal-violating-pair working-set selection.
//!
//! Solves `max_a sum(a) - 1/2 a'Qa` subject to `sum(a_i y_i) = 0` and
//! `0 <= a_i <= C_i`, where `Q_ij = y_i y_j K(x_i, x_j)`.

use super::{check_training_set, rbf_kernel, SvmError, SvmHyperParams, SvmModel};
use crate::scalar::Scalar;
use crate::txmodel::Label;

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SmoOptions<S> {
    /// Stopping tolerance on the maximal KKT violation `m(a) - M(a)`.
    pub tol: S,
    /// Iteration budget, in multiples of the training-set size.
    pub max_passes: usize,
}

impl<S: Scalar> Default for SmoOptions<S> {
    fn default() -> Self {
        Self {
            tol: S::lit(1e-3),
            max_passes: 200,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SmoOutcome<S> {
    /// Trained model without Platt parameters.
    pub model: SvmModel<S>,
    /// Multiplier per training row (zeros included).
    pub alpha: Vec<S>,
    /// Per-row box bound `C_i`.
    pub bounds: Vec<S>,
    pub objective: S,
    pub iterations: usize,
    pub converged: bool,
}

impl<S: Scalar> SmoOutcome<S> {
    /// Turns a non-converged run into an error.
    pub fn require_converged(self) -> Result<Self, SvmError> {
        if self.converged {
            Ok(self)
        } else {
            Err(SvmError::NonConvergence {
                iterations: self.iterations,
            })
        }
    }
}

/// Row-major symmetric kernel matrix.
pub(crate) fn kernel_matrix<S: Scalar>(x: &[Vec<S>], gamma: S) -> Vec<S> {
    let n = x.len();
    let mut k = vec![S::zero(); n * n];
    for i in 0..n {
        k[i * n + i] = S::one();
        for j in 0..i {
            let v = rbf_kernel(&x[i], &x[j], gamma);
            k[i * n + j] = v;
            k[j * n + i] = v;
        }
    }
    k
}

/// Trains the soft-margin RBF SVM. A run that exhausts its budget returns
/// the last iterate with `converged == false`.
pub fn train_smo<S: Scalar>(
    x: &[Vec<S>],
    y: &[Label],
    hp: &SvmHyperParams<S>,
    opts: &SmoOptions<S>,
) -> Result<SmoOutcome<S>, SvmError> {
    hp.validate()?;
    check_training_set(x, y)?;
    let n = x.len();
    let ys: Vec<S> = y.iter().map(|l| S::lit(l.sign())).collect();
    let bounds: Vec<S> = y.iter().map(|&l| hp.box_bound(l)).collect();
    let k = kernel_matrix(x, hp.gamma);
    let q = |i: usize, j: usize| ys[i] * ys[j] * k[i * n + j];
    let tau = S::lit(1e-12);

    let mut alpha = vec![S::zero(); n];
    let mut grad = vec![-S::one(); n];
    let max_iter = opts.max_passes.saturating_mul(n.max(100));
    let mut iterations = 0;
    let mut converged = false;

    let at_upper = |a: &[S], t: usize| a[t] >= bounds[t];
    let at_lower = |a: &[S], t: usize| a[t] <= S::zero();

    while iterations < max_iter {
        // i maximizes -y G over I_up, j minimizes it over I_low.
        let mut gmax = S::neg_infinity();
        let mut gmin = S::infinity();
        let (mut i, mut j) = (usize::MAX, usize::MAX);
        for t in 0..n {
            let v = -ys[t] * grad[t];
            let in_up = if ys[t] > S::zero() { !at_upper(&alpha, t) } else { !at_lower(&alpha, t) };
            let in_low = if ys[t] > S::zero() { !at_lower(&alpha, t) } else { !at_upper(&alpha, t) };
            if in_up && v > gmax {
                gmax = v;
                i = t;
            }
            if in_low && v < gmin {
                gmin = v;
                j = t;
            }
        }
        if i == usize::MAX || j == usize::MAX || gmax - gmin < opts.tol {
            converged = true;
            break;
        }
        iterations += 1;

        let (ci, cj) = (bounds[i], bounds[j]);
        let (old_i, old_j) = (alpha[i], alpha[j]);
        if ys[i] != ys[j] {
            let mut quad = q(i, i) + q(j, j) + S::lit(2.0) * q(i, j);
            if quad <= S::zero() {
                quad = tau;
            }
            let delta = (-grad[i] - grad[j]) / quad;
            let diff = alpha[i] - alpha[j];
            alpha[i] += delta;
            alpha[j] += delta;
            if diff > S::zero() {
                if alpha[j] < S::zero() {
                    alpha[j] = S::zero();
                    alpha[i] = diff;
                }
            } else if alpha[i] < S::zero() {
                alpha[i] = S::zero();
                alpha[j] = -diff;
            }
            if diff > ci - cj {
                if alpha[i] > ci {
                    alpha[i] = ci;
                    alpha[j] = ci - diff;
                }
            } else if alpha[j] > cj {
                alpha[j] = cj;
                alpha[i] = cj + diff;
            }
        } else {
            let mut quad = q(i, i) + q(j, j) - S::lit(2.0) * q(i, j);
            if quad <= S::zero() {
                quad = tau;
            }
            let delta = (grad[i] - grad[j]) / quad;
            let sum = alpha[i] + alpha[j];
            alpha[i] -= delta;
            alpha[j] += delta;
            if sum > ci {
                if alpha[i] > ci {
                    alpha[i] = ci;
                    alpha[j] = sum - ci;
                }
            } else if alpha[j] < S::zero() {
                alpha[j] = S::zero();
                alpha[i] = sum;
            }
            if sum > cj {
                if alpha[j] > cj {
                    alpha[j] = cj;
                    alpha[i] = sum - cj;
                }
            } else if alpha[i] < S::zero() {
                alpha[i] = S::zero();
                alpha[j] = sum;
            }
        }

        let (di, dj) = (alpha[i] - old_i, alpha[j] - old_j);
        for t in 0..n {
            grad[t] += q(t, i) * di + q(t, j) * dj;
        }
    }

    // Bias from free vectors, else the midpoint of the feasible interval.
    let mut ub = S::infinity();
    let mut lb = S::neg_infinity();
    let mut free_sum = S::zero();
    let mut free = 0usize;
    for t in 0..n {
        let yg = ys[t] * grad[t];
        let pos = ys[t] > S::zero();
        if at_upper(&alpha, t) {
            if pos {
                lb = lb.max(yg);
            } else {
                ub = ub.min(yg);
            }
        } else if at_lower(&alpha, t) {
            if pos {
                ub = ub.min(yg);
            } else {
                lb = lb.max(yg);
            }
        } else {
            free += 1;
            free_sum += yg;
        }
    }
    let rho = if free > 0 {
        free_sum / S::from_usize_lossy(free)
    } else {
        (ub + lb) / S::lit(2.0)
    };

    let objective = alpha
        .iter()
        .zip(&grad)
        .fold(S::zero(), |acc, (&a, &g)| acc + a - a * (g + S::one()) / S::lit(2.0));

    let mut support_vectors = Vec::new();
    let mut dual_coefs = Vec::new();
    for t in 0..n {
        if alpha[t] > S::zero() {
            support_vectors.push(x[t].clone());
            dual_coefs.push(alpha[t] * ys[t]);
        }
    }

    Ok(SmoOutcome {
        model: SvmModel {
            hyper: *hp,
            support_vectors,
            dual_coefs,
            bias: -rho,
            gamma: hp.gamma,
            platt: None,
        },
        alpha,
        bounds,
        objective,
        iterations,
        converged,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn hp(c: f64, gamma: f64) -> SvmHyperParams<f64> {
        SvmHyperParams {
            c,
            gamma,
            class_weight_malicious: 1.0,
        }
    }

    #[test]
    fn separable_pair() {
        let x = vec![vec![0.0, 0.0], vec![1.0, 1.0]];
        let y = [Label::Malicious, Label::Normal];
        let out = train_smo(&x, &y, &hp(10.0, 0.5), &SmoOptions::default()).unwrap();
        assert!(out.converged);
        assert_eq!(out.model.support_vectors.len(), 2);
        assert!(out.model.decision_value(&x[0]) > 0.0);
        assert!(out.model.decision_value(&x[1]) < 0.0);
    }

    #[test]
    fn conflicting_duplicates_hit_the_box() {
        // Dual reduces to max 2a - 0 over a in [0, 1] since K = 1 and the
        // equality constraint forces a_1 = a_2; optimum a = C = 1.
        let x = vec![vec![0.5, -0.5], vec![0.5, -0.5]];
        let y = [Label::Malicious, Label::Normal];
        let out = train_smo(&x, &y, &hp(1.0, 1.0), &SmoOptions::default()).unwrap();
        assert!(out.converged);
        assert_eq!(out.alpha, vec![1.0, 1.0]);
        assert!((out.objective - 2.0).abs() < 1e-12);
    }

    #[test]
    fn class_weight_scales_bound() {
        let x = vec![vec![0.0], vec![0.0], vec![0.1]];
        let y = [Label::Malicious, Label::Normal, Label::Normal];
        let p = SvmHyperParams {
            c: 1.0,
            gamma: 1.0,
            class_weight_malicious: 3.0,
        };
        let out = train_smo(&x, &y, &p, &SmoOptions::default()).unwrap();
        assert_eq!(out.bounds, vec![3.0, 1.0, 1.0]);
        for (a, c) in out.alpha.iter().zip(&out.bounds) {
            assert!(*a >= 0.0 && *a <= c + 1e-12);
        }
    }

    #[test]
    fn rejects_single_class() {
        let x = vec![vec![0.0], vec![1.0]];
        let y = [Label::Normal, Label::Normal];
        assert!(matches!(
            train_smo(&x, &y, &hp(1.0, 1.0), &SmoOptions::default()),
            Err(SvmError::DegenerateLabels)
        ));
    }

    #[test]
    fn budget_exhaustion_is_flagged() {
        let x: Vec<Vec<f64>> = (0..30).map(|i| vec![(i as f64 * 0.37).sin(), (i as f64).cos()]).collect();
        let y: Vec<Label> = (0..30)
            .map(|i| if i % 3 == 0 { Label::Malicious } else { Label::Normal })
            .collect();
        let opts = SmoOptions {
            tol: 1e-12,
            max_passes: 0,
        };
        let out = train_smo(&x, &y, &hp(10.0, 1.0), &opts).unwrap();
        assert!(!out.converged);
        assert!(matches!(out.require_converged(), Err(SvmError::NonConvergence { .. })));
    }
}
