//! First-stage classifier: RBF-kernel soft-margin SVM.
//!
//! Labels are encoded malicious = `+1`, normal = `-1`. Class weighting is a
//! per-class box constraint `C_i = C * w(y_i)`. Probabilities come from a
//! Platt sigmoid fitted on cross-validated decision values.

mod cv;
mod persist;
mod platt;
mod smo;

pub use cv::{
    fit_calibrated, grid_search, oof_probabilities, oof_probabilities_with_folds,
    stratified_folds, ClassWeightSpec, GammaSpec, GridPointScore, GridSearchResult, SvmGrid,
};
pub use persist::{load_svm, save_svm};
pub use platt::{fit_platt, platt_nll, PlattFit};
pub use smo::{train_smo, SmoOptions, SmoOutcome};

use thiserror::Error;

use crate::scalar::{sigmoid, sq_dist, Scalar};
use crate::txmodel::Label;

#[derive(Debug, Error)]
pub enum SvmError {
    #[error("training labels contain a single class")]
    DegenerateLabels,
    #[error("fold {0} leaves a class absent from its training part")]
    FoldClassMissing(usize),
    #[error("model has no Platt calibration")]
    UncalibratedModel,
    #[error("SMO did not converge after {iterations} iterations")]
    NonConvergence { iterations: usize },
    #[error("invalid hyperparameters: {0}")]
    InvalidHyperParams(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("model file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SvmHyperParams<S> {
    pub c: S,
    pub gamma: S,
    /// Multiplier on `c` for malicious points; normal points use weight 1.
    pub class_weight_malicious: S,
}

impl<S: Scalar> SvmHyperParams<S> {
    pub fn validate(&self) -> Result<(), SvmError> {
        let ok = |x: S| x > S::zero() && x.is_finite();
        if ok(self.c) && ok(self.gamma) && ok(self.class_weight_malicious) {
            Ok(())
        } else {
            Err(SvmError::InvalidHyperParams(format!(
                "c={}, gamma={}, class_weight={} must all be positive",
                self.c, self.gamma, self.class_weight_malicious
            )))
        }
    }

    /// Box constraint for a point of class `label`.
    pub fn box_bound(&self, label: Label) -> S {
        match label {
            Label::Malicious => self.c * self.class_weight_malicious,
            Label::Normal => self.c,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlattParams<S> {
    pub a: S,
    pub b: S,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbPair<S> {
    pub p_normal: S,
    pub p_malicious: S,
}

impl<S: Scalar> ProbPair<S> {
    pub fn from_malicious(p_malicious: S) -> Self {
        Self {
            p_normal: S::one() - p_malicious,
            p_malicious,
        }
    }
}

/// Trained RBF SVM.
#[derive(Debug, Clone, PartialEq)]
pub struct SvmModel<S> {
    pub hyper: SvmHyperParams<S>,
    pub support_vectors: Vec<Vec<S>>,
    /// `alpha_i * y_i` per support vector.
    pub dual_coefs: Vec<S>,
    pub bias: S,
    pub gamma: S,
    pub platt: Option<PlattParams<S>>,
}

/// `exp(-gamma * |x - y|^2)`.
pub fn rbf_kernel<S: Scalar>(x: &[S], y: &[S], gamma: S) -> S {
    (-gamma * sq_dist(x, y)).exp()
}

impl<S: Scalar> SvmModel<S> {
    /// `f(x) = sum_i coef_i K(sv_i, x) + b`.
    pub fn decision_value(&self, x: &[S]) -> S {
        self.support_vectors
            .iter()
            .zip(&self.dual_coefs)
            .fold(self.bias, |acc, (sv, &c)| acc + c * rbf_kernel(sv, x, self.gamma))
    }

    pub fn predict_label(&self, x: &[S]) -> Label {
        if self.decision_value(x) >= S::zero() {
            Label::Malicious
        } else {
            Label::Normal
        }
    }

    /// Calibrated class probabilities.
    pub fn predict_proba(&self, x: &[S]) -> Result<ProbPair<S>, SvmError> {
        let platt = self.platt.ok_or(SvmError::UncalibratedModel)?;
        Ok(platt_probability(platt, self.decision_value(x)))
    }
}

/// `p_malicious = 1 / (1 + exp(a f + b))`.
pub fn platt_probability<S: Scalar>(platt: PlattParams<S>, f: S) -> ProbPair<S> {
    ProbPair::from_malicious(sigmoid(-(platt.a * f + platt.b)))
}

pub(crate) fn check_training_set<S: Scalar>(
    x: &[Vec<S>],
    y: &[Label],
) -> Result<(), SvmError> {
    if x.len() != y.len() {
        return Err(SvmError::InvalidInput(format!(
            "{} rows but {} labels",
            x.len(),
            y.len()
        )));
    }
    if !y.iter().any(|l| l.is_malicious()) || y.iter().all(|l| l.is_malicious()) {
        return Err(SvmError::DegenerateLabels);
    }
    if x.iter().flatten().any(|v| !v.is_finite()) {
        return Err(SvmError::InvalidInput("non-finite feature value".into()));
    }
    Ok(())
}
