//! Stratified folds, precision-scored grid search, calibrated training and
//! out-of-fold probabilities.

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{
    fit_platt, train_smo, ProbPair, SmoOptions, SvmError, SvmHyperParams, SvmModel,
};
use crate::scalar::Scalar;
use crate::seeds;
use crate::txmodel::Label;

/// Assigns each row to one of `k` folds, class by class, so every fold
/// receives a near-equal share of both classes.
pub fn stratified_folds(y: &[Label], k: usize, seed: u64) -> Result<Vec<usize>, SvmError> {
    if k < 2 || k > y.len() {
        return Err(SvmError::InvalidInput(format!(
            "k = {k} folds for {} rows",
            y.len()
        )));
    }
    let mut rng = seeds::rng(seed);
    let mut folds = vec![0usize; y.len()];
    let mut next = 0usize;
    for class in [Label::Malicious, Label::Normal] {
        let mut idx: Vec<usize> = (0..y.len()).filter(|&i| y[i] == class).collect();
        idx.shuffle(&mut rng);
        for i in idx {
            folds[i] = next % k;
            next += 1;
        }
    }
    check_folds(y, &folds)?;
    Ok(folds)
}

fn fold_count(folds: &[usize]) -> usize {
    folds.iter().copied().max().map_or(0, |m| m + 1)
}

/// Every fold's training complement must hold both classes.
fn check_folds(y: &[Label], folds: &[usize]) -> Result<(), SvmError> {
    if folds.len() != y.len() {
        return Err(SvmError::InvalidInput("fold vector length mismatch".into()));
    }
    for f in 0..fold_count(folds) {
        let mut has = [false, false];
        for (i, &l) in y.iter().enumerate() {
            if folds[i] != f {
                has[l.is_malicious() as usize] = true;
            }
        }
        if !(has[0] && has[1]) {
            return Err(SvmError::FoldClassMissing(f));
        }
    }
    Ok(())
}

fn subset<T: Clone>(xs: &[T], keep: impl Fn(usize) -> bool) -> Vec<T> {
    xs.iter()
        .enumerate()
        .filter(|(i, _)| keep(*i))
        .map(|(_, v)| v.clone())
        .collect()
}

/// Trains on all rows and calibrates Platt parameters on internal
/// cross-validated decision values. Falls back to in-sample decisions when a
/// class is too small for two folds.
pub fn fit_calibrated<S: Scalar>(
    x: &[Vec<S>],
    y: &[Label],
    hp: &SvmHyperParams<S>,
    opts: &SmoOptions<S>,
    k: usize,
    seed: u64,
) -> Result<SvmModel<S>, SvmError> {
    let outcome = train_smo(x, y, hp, opts)?;
    if !outcome.converged {
        log::warn!("SMO hit its iteration budget ({} iterations)", outcome.iterations);
    }
    let mut model = outcome.model;
    let pos = y.iter().filter(|l| l.is_malicious()).count();
    let k_cal = k.min(pos).min(y.len() - pos);

    let decisions: Vec<S> = if k_cal >= 2 {
        let folds = stratified_folds(y, k_cal, seed)?;
        let mut dec = vec![S::zero(); x.len()];
        for f in 0..k_cal {
            let xt = subset(x, |i| folds[i] != f);
            let yt = subset(y, |i| folds[i] != f);
            let m = train_smo(&xt, &yt, hp, opts)?.model;
            for i in (0..x.len()).filter(|&i| folds[i] == f) {
                dec[i] = m.decision_value(&x[i]);
            }
        }
        dec
    } else {
        x.iter().map(|r| model.decision_value(r)).collect()
    };
    model.platt = Some(fit_platt(&decisions, y, 100)?.params);
    Ok(model)
}

/// Out-of-fold probabilities under an explicit fold assignment.
pub fn oof_probabilities_with_folds<S: Scalar>(
    x: &[Vec<S>],
    y: &[Label],
    hp: &SvmHyperParams<S>,
    opts: &SmoOptions<S>,
    folds: &[usize],
    seed: u64,
) -> Result<Vec<ProbPair<S>>, SvmError> {
    check_folds(y, folds)?;
    let k = fold_count(folds);
    let per_fold: Vec<Result<Vec<(usize, ProbPair<S>)>, SvmError>> = (0..k)
        .into_par_iter()
        .map(|f| {
            let xt = subset(x, |i| folds[i] != f);
            let yt = subset(y, |i| folds[i] != f);
            // one calibration seed for every fold, so identical training data
            // yields an identical model
            let model = fit_calibrated(&xt, &yt, hp, opts, k, seed)?;
            (0..x.len())
                .filter(|&i| folds[i] == f)
                .map(|i| model.predict_proba(&x[i]).map(|p| (i, p)))
                .collect()
        })
        .collect();
    let mut out = vec![ProbPair::from_malicious(S::zero()); x.len()];
    for r in per_fold {
        for (i, p) in r? {
            out[i] = p;
        }
    }
    Ok(out)
}

/// Probabilities for every training row from a model that never saw it.
pub fn oof_probabilities<S: Scalar>(
    x: &[Vec<S>],
    y: &[Label],
    hp: &SvmHyperParams<S>,
    opts: &SmoOptions<S>,
    k: usize,
    seed: u64,
) -> Result<Vec<ProbPair<S>>, SvmError> {
    let folds = stratified_folds(y, k, seed)?;
    oof_probabilities_with_folds(x, y, hp, opts, &folds, seeds::child(seed, u64::MAX))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GammaSpec<S> {
    Value(S),
    /// `1 / (n_features * var(X))`.
    Scale,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClassWeightSpec<S> {
    Value(S),
    /// `|normal| / |malicious|`.
    Balanced,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SvmGrid<S> {
    pub c: Vec<S>,
    pub gamma: Vec<GammaSpec<S>>,
    pub class_weight: Vec<ClassWeightSpec<S>>,
}

impl<S: Scalar> Default for SvmGrid<S> {
    fn default() -> Self {
        Self {
            c: [0.1, 1.0, 10.0, 100.0].iter().map(|&v| S::lit(v)).collect(),
            gamma: vec![
                GammaSpec::Value(S::lit(0.01)),
                GammaSpec::Value(S::lit(0.1)),
                GammaSpec::Value(S::one()),
                GammaSpec::Scale,
            ],
            class_weight: vec![ClassWeightSpec::Value(S::one()), ClassWeightSpec::Balanced],
        }
    }
}

impl<S: Scalar> SvmGrid<S> {
    /// Resolves `Scale`/`Balanced` against the training data.
    pub fn points(&self, x: &[Vec<S>], y: &[Label]) -> Vec<SvmHyperParams<S>> {
        let entries: Vec<S> = x.iter().flatten().copied().collect();
        let n_features = x.first().map_or(1, |r| r.len()).max(1);
        let scale_gamma = if entries.is_empty() {
            S::one()
        } else {
            let n = S::from_usize_lossy(entries.len());
            let mean = entries.iter().copied().sum::<S>() / n;
            let var = entries.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / n;
            if var > S::zero() {
                S::one() / (S::from_usize_lossy(n_features) * var)
            } else {
                S::one()
            }
        };
        let pos = y.iter().filter(|l| l.is_malicious()).count().max(1);
        let balanced = S::from_usize_lossy(y.len() - pos) / S::from_usize_lossy(pos);

        let mut out = Vec::new();
        for &c in &self.c {
            for g in &self.gamma {
                for w in &self.class_weight {
                    out.push(SvmHyperParams {
                        c,
                        gamma: match *g {
                            GammaSpec::Value(v) => v,
                            GammaSpec::Scale => scale_gamma,
                        },
                        class_weight_malicious: match *w {
                            ClassWeightSpec::Value(v) => v,
                            ClassWeightSpec::Balanced => balanced,
                        },
                    });
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridPointScore<S> {
    pub hyper: SvmHyperParams<S>,
    /// Mean malicious-class precision over held-out folds.
    pub precision: S,
    pub f1: S,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridSearchResult<S> {
    pub best: SvmHyperParams<S>,
    pub scores: Vec<GridPointScore<S>>,
}

fn precision_f1<S: Scalar>(pred: &[Label], truth: &[Label]) -> (S, S) {
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut fneg = 0usize;
    for (&p, &t) in pred.iter().zip(truth) {
        match (p.is_malicious(), t.is_malicious()) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fneg += 1,
            _ => {}
        }
    }
    let ratio = |a: usize, b: usize| {
        if b == 0 {
            S::zero()
        } else {
            S::from_usize_lossy(a) / S::from_usize_lossy(b)
        }
    };
    let p = ratio(tp, tp + fp);
    let r = ratio(tp, tp + fneg);
    let f1 = if p + r > S::zero() {
        S::lit(2.0) * p * r / (p + r)
    } else {
        S::zero()
    };
    (p, f1)
}

fn score_point<S: Scalar>(
    x: &[Vec<S>],
    y: &[Label],
    folds: &[usize],
    hp: &SvmHyperParams<S>,
    opts: &SmoOptions<S>,
) -> Result<GridPointScore<S>, SvmError> {
    let k = fold_count(folds);
    let (mut ps, mut fs) = (S::zero(), S::zero());
    for f in 0..k {
        let xt = subset(x, |i| folds[i] != f);
        let yt = subset(y, |i| folds[i] != f);
        let model = train_smo(&xt, &yt, hp, opts)?.model;
        let held: Vec<usize> = (0..x.len()).filter(|&i| folds[i] == f).collect();
        let pred: Vec<Label> = held.iter().map(|&i| model.predict_label(&x[i])).collect();
        let truth: Vec<Label> = held.iter().map(|&i| y[i]).collect();
        let (p, f1) = precision_f1::<S>(&pred, &truth);
        ps += p;
        fs += f1;
    }
    let kk = S::from_usize_lossy(k);
    Ok(GridPointScore {
        hyper: *hp,
        precision: ps / kk,
        f1: fs / kk,
    })
}

/// `true` when `a` should replace the incumbent `b`.
fn better<S: Scalar>(a: &GridPointScore<S>, b: &GridPointScore<S>) -> bool {
    use std::cmp::Ordering::*;
    let ord = a
        .precision
        .partial_cmp(&b.precision)
        .unwrap_or(Equal)
        .then(a.f1.partial_cmp(&b.f1).unwrap_or(Equal))
        .then(b.hyper.c.partial_cmp(&a.hyper.c).unwrap_or(Equal))
        .then(b.hyper.gamma.partial_cmp(&a.hyper.gamma).unwrap_or(Equal));
    ord == Greater
}

/// Exhaustive grid search maximizing mean held-out malicious precision.
/// Ties go to higher F1, then smaller C, then smaller gamma, then grid order.
pub fn grid_search<S: Scalar>(
    x: &[Vec<S>],
    y: &[Label],
    grid: &SvmGrid<S>,
    k: usize,
    seed: u64,
    opts: &SmoOptions<S>,
) -> Result<GridSearchResult<S>, SvmError> {
    super::check_training_set(x, y)?;
    let folds = stratified_folds(y, k, seed)?;
    let points = grid.points(x, y);
    if points.is_empty() {
        return Err(SvmError::InvalidInput("empty grid".into()));
    }
    let scores = points
        .par_iter()
        .map(|hp| score_point(x, y, &folds, hp, opts))
        .collect::<Result<Vec<_>, _>>()?;
    let mut best = &scores[0];
    for s in &scores[1..] {
        if better(s, best) {
            best = s;
        }
    }
    Ok(GridSearchResult {
        best: best.hyper,
        scores,
    })
}
