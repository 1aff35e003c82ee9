//! Second-stage classifier: a two-layer graph attention network trained
//! full-graph with hand-written forward and backward passes.
//!
//! Layer 1 runs `heads` attention heads (LeakyReLU slope 0.2, softmax over
//! the neighborhood including a self-loop), concatenates them and applies
//! ELU. Layer 2 is a single head producing class logits followed by
//! log-softmax. Class index 0 is normal, 1 is malicious.

mod bayes;
mod layer;
mod matrix;
mod network;
mod persist;
mod train;

pub use bayes::{
    bayes_opt, expected_improvement, BayesOptimizer, BayesResult, GatTuning, GaussianProcess,
    SearchSpace, Trial,
};
pub use layer::{attention_coefficients, Neighborhoods};
pub use matrix::Matrix;
pub use network::{backward, forward, loss_nll, ForwardCache, Mode};
pub use persist::{load_gat, save_gat, GatCheckpoint};
pub use train::{
    fit, run_schedule, train_invocation, Adam, FitResult, GatInput, InvocationReport,
    TrainSchedule,
};

use rand::Rng;
use thiserror::Error;

use crate::scalar::Scalar;
use crate::txmodel::Label;

/// Attention heads in layer 1.
pub const DEFAULT_HEADS: usize = 4;
/// LeakyReLU negative slope inside attention scores.
pub const LEAKY_SLOPE: f64 = 0.2;

#[derive(Debug, Error)]
pub enum GatError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("loss mask selects no node")]
    EmptyMask,
    #[error("non-finite loss {loss} at epoch {epoch}")]
    NonFiniteLoss { epoch: usize, loss: f64 },
    #[error("budget {budget} must be at least init_random {init_random} >= 1")]
    BudgetTooSmall { budget: usize, init_random: usize },
    #[error("invalid hyperparameters: {0}")]
    InvalidHyperParams(String),
    #[error("checkpoint: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GatHyperParams<S> {
    pub nfeat: usize,
    pub nclass: usize,
    pub nhid: usize,
    pub lr: S,
    pub dropout: S,
    pub weight_decay: S,
}

impl<S: Scalar> GatHyperParams<S> {
    pub fn validate(&self) -> Result<(), GatError> {
        let ok = self.nfeat > 0
            && self.nclass > 0
            && self.nhid > 0
            && self.lr >= S::zero()
            && self.dropout >= S::zero()
            && self.dropout < S::one()
            && self.weight_decay >= S::zero();
        if ok {
            Ok(())
        } else {
            Err(GatError::InvalidHyperParams(format!("{self:?}")))
        }
    }
}

/// One attention head: projection `in x out` and attention vector of
/// length `2 * out` (source half, then neighbor half).
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionHead<S> {
    pub weight: Matrix<S>,
    pub attention: Vec<S>,
}

impl<S: Scalar> AttentionHead<S> {
    fn init<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        let w_bound = 1.0 / (fan_in as f64).sqrt();
        let a_bound = 1.0 / (2.0 * fan_out as f64).sqrt();
        let weight = Matrix {
            rows: fan_in,
            cols: fan_out,
            data: (0..fan_in * fan_out)
                .map(|_| S::lit(rng.random_range(-w_bound..=w_bound)))
                .collect(),
        };
        let attention = (0..2 * fan_out)
            .map(|_| S::lit(rng.random_range(-a_bound..=a_bound)))
            .collect();
        Self { weight, attention }
    }

    fn zeros_like(&self) -> Self {
        Self {
            weight: Matrix::zeros(self.weight.rows, self.weight.cols),
            attention: vec![S::zero(); self.attention.len()],
        }
    }
}

/// Model parameters. Also used as the gradient container.
#[derive(Debug, Clone, PartialEq)]
pub struct GatModel<S> {
    pub heads: Vec<AttentionHead<S>>,
    pub output: AttentionHead<S>,
}

impl<S: Scalar> GatModel<S> {
    /// Uniform `+-1/sqrt(fan_in)` initialization.
    pub fn init<R: Rng + ?Sized>(hp: &GatHyperParams<S>, heads: usize, rng: &mut R) -> Self {
        let heads_v = (0..heads)
            .map(|_| AttentionHead::init(hp.nfeat, hp.nhid, rng))
            .collect();
        let output = AttentionHead::init(heads * hp.nhid, hp.nclass, rng);
        Self {
            heads: heads_v,
            output,
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            heads: self.heads.iter().map(AttentionHead::zeros_like).collect(),
            output: self.output.zeros_like(),
        }
    }

    pub fn nfeat(&self) -> usize {
        self.heads.first().map_or(0, |h| h.weight.rows)
    }

    pub fn nhid(&self) -> usize {
        self.heads.first().map_or(0, |h| h.weight.cols)
    }

    pub fn nclass(&self) -> usize {
        self.output.weight.cols
    }

    /// Parameter tensors in a fixed order.
    pub fn tensors(&self) -> Vec<&[S]> {
        let mut v: Vec<&[S]> = Vec::new();
        for h in &self.heads {
            v.push(&h.weight.data);
            v.push(&h.attention);
        }
        v.push(&self.output.weight.data);
        v.push(&self.output.attention);
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [S]> {
        let mut v: Vec<&mut [S]> = Vec::new();
        for h in &mut self.heads {
            v.push(&mut h.weight.data);
            v.push(&mut h.attention);
        }
        v.push(&mut self.output.weight.data);
        v.push(&mut self.output.attention);
        v
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn sum_sq(&self) -> S {
        self.tensors()
            .iter()
            .flat_map(|t| t.iter())
            .fold(S::zero(), |acc, &x| acc + x * x)
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|x| x.is_finite()))
    }

    pub fn check_shapes(&self, nfeat: usize) -> Result<(), GatError> {
        let nhid = self.nhid();
        let ok = !self.heads.is_empty()
            && self.heads.iter().all(|h| {
                h.weight.rows == nfeat && h.weight.cols == nhid && h.attention.len() == 2 * nhid
            })
            && self.output.weight.rows == self.heads.len() * nhid
            && self.output.attention.len() == 2 * self.output.weight.cols;
        if ok {
            Ok(())
        } else {
            Err(GatError::ShapeMismatch(format!(
                "model does not accept {nfeat}-wide input"
            )))
        }
    }
}

pub fn class_index(label: Label) -> usize {
    match label {
        Label::Normal => 0,
        Label::Malicious => 1,
    }
}

/// Argmax over a log-probability row; ties resolve to normal.
pub fn predicted_label<S: Scalar>(row: &[S]) -> Label {
    if row.len() > 1 && row[1] > row[0] {
        Label::Malicious
    } else {
        Label::Normal
    }
}
