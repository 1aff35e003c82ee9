//! Platt sigmoid calibration fitted by Newton's method with backtracking.

use super::{PlattParams, SvmError};
use crate::scalar::Scalar;
use crate::txmodel::Label;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlattFit<S> {
    pub params: PlattParams<S>,
    pub iterations: usize,
    pub converged: bool,
}

fn smoothed_targets<S: Scalar>(y: &[Label]) -> (Vec<S>, usize, usize) {
    let pos = y.iter().filter(|l| l.is_malicious()).count();
    let neg = y.len() - pos;
    let hi = S::from_usize_lossy(pos + 1) / S::from_usize_lossy(pos + 2);
    let lo = S::one() / S::from_usize_lossy(neg + 2);
    let t = y.iter().map(|l| if l.is_malicious() { hi } else { lo }).collect();
    (t, pos, neg)
}

fn nll_with_targets<S: Scalar>(f: &[S], t: &[S], a: S, b: S) -> S {
    f.iter().zip(t).fold(S::zero(), |acc, (&fi, &ti)| {
        let z = fi * a + b;
        acc + if z >= S::zero() {
            ti * z + (-z).exp().ln_1p()
        } else {
            (ti - S::one()) * z + z.exp().ln_1p()
        }
    })
}

/// Negative log-likelihood of `(a, b)` against the smoothed targets.
pub fn platt_nll<S: Scalar>(decisions: &[S], y: &[Label], a: S, b: S) -> S {
    let (t, _, _) = smoothed_targets(y);
    nll_with_targets(decisions, &t, a, b)
}

/// Fits `p_malicious = 1 / (1 + exp(a f + b))` to decision values.
pub fn fit_platt<S: Scalar>(
    decisions: &[S],
    y: &[Label],
    max_iter: usize,
) -> Result<PlattFit<S>, SvmError> {
    if decisions.len() != y.len() {
        return Err(SvmError::InvalidInput("decision/label length mismatch".into()));
    }
    let (t, pos, neg) = smoothed_targets::<S>(y);
    if pos == 0 || neg == 0 {
        return Err(SvmError::DegenerateLabels);
    }
    let min_step = S::lit(1e-10);
    let sigma = S::lit(1e-12);
    let eps = S::lit(1e-5);

    let mut a = S::zero();
    let mut b = (S::from_usize_lossy(neg + 1) / S::from_usize_lossy(pos + 1)).ln();
    let mut fval = nll_with_targets(decisions, &t, a, b);
    let mut converged = false;
    let mut iterations = 0;

    while iterations < max_iter {
        let (mut h11, mut h22, mut h21) = (sigma, sigma, S::zero());
        let (mut g1, mut g2) = (S::zero(), S::zero());
        for (&f, &ti) in decisions.iter().zip(&t) {
            let z = f * a + b;
            let (p, q) = if z >= S::zero() {
                let e = (-z).exp();
                (e / (S::one() + e), S::one() / (S::one() + e))
            } else {
                let e = z.exp();
                (S::one() / (S::one() + e), e / (S::one() + e))
            };
            let d2 = p * q;
            h11 += f * f * d2;
            h22 += d2;
            h21 += f * d2;
            let d1 = ti - p;
            g1 += f * d1;
            g2 += d1;
        }
        if g1.abs() < eps && g2.abs() < eps {
            converged = true;
            break;
        }
        iterations += 1;

        let det = h11 * h22 - h21 * h21;
        let da = -(h22 * g1 - h21 * g2) / det;
        let db = -(-h21 * g1 + h11 * g2) / det;
        let gd = g1 * da + g2 * db;

        let mut step = S::one();
        let mut accepted = false;
        while step >= min_step {
            let na = a + step * da;
            let nb = b + step * db;
            let nf = nll_with_targets(decisions, &t, na, nb);
            if nf < fval + S::lit(1e-4) * step * gd {
                a = na;
                b = nb;
                fval = nf;
                accepted = true;
                break;
            }
            step = step / S::lit(2.0);
        }
        if !accepted {
            log::debug!("platt line search stalled after {iterations} iterations");
            break;
        }
    }

    Ok(PlattFit {
        params: PlattParams { a, b },
        iterations,
        converged,
    })
}
