//! Adam updates, the per-invocation epoch loop and the m x n schedule.

use rand::Rng;

use super::network::{backward, forward, loss_nll, Mode};
use super::{predicted_label, GatError, GatHyperParams, GatModel, Matrix, Neighborhoods};
use crate::metrics::compute_metrics;
use crate::netgraph::{AccountGraph, Role};
use crate::scalar::Scalar;
use crate::txmodel::Label;

/// Dense tensors of a masked graph, ready for training.
#[derive(Debug, Clone)]
pub struct GatInput<S> {
    pub features: Matrix<S>,
    pub neighborhoods: Neighborhoods,
    /// Per-node labels; only read on masked nodes.
    pub labels: Vec<Label>,
    pub train_mask: Vec<bool>,
    pub val_mask: Vec<bool>,
    pub test_mask: Vec<bool>,
}

impl<S: Scalar> GatInput<S> {
    /// Unlabeled nodes default to normal and must stay outside every mask.
    pub fn from_graph(g: &AccountGraph<S>) -> Self {
        Self {
            features: Matrix::from_rows(&g.feature_rows()),
            neighborhoods: Neighborhoods::with_self_loops(&g.adjacency()),
            labels: g
                .nodes
                .iter()
                .map(|n| n.label.unwrap_or(Label::Normal))
                .collect(),
            train_mask: g.mask(Role::Train),
            val_mask: g.mask(Role::Val),
            test_mask: g.mask(Role::Test),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct TrainSchedule {
    /// Training-function invocations.
    pub m: usize,
    /// Epochs per invocation.
    pub n: usize,
    /// Invocations without validation improvement tolerated before stopping.
    pub patience: usize,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        Self {
            m: 10,
            n: 50,
            patience: 3,
        }
    }
}

/// Adam with bias correction and default moments.
#[derive(Debug, Clone)]
pub struct Adam<S> {
    first: Vec<Vec<S>>,
    second: Vec<Vec<S>>,
    step: i32,
}

impl<S: Scalar> Adam<S> {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    pub fn new(model: &GatModel<S>) -> Self {
        let shapes: Vec<Vec<S>> = model.tensors().iter().map(|t| vec![S::zero(); t.len()]).collect();
        Self {
            first: shapes.clone(),
            second: shapes,
            step: 0,
        }
    }

    pub fn step(&mut self, model: &mut GatModel<S>, grads: &GatModel<S>, lr: S) {
        self.step += 1;
        let (b1, b2) = (S::lit(Self::BETA1), S::lit(Self::BETA2));
        let c1 = S::one() - b1.powi(self.step);
        let c2 = S::one() - b2.powi(self.step);
        let eps = S::lit(Self::EPS);
        for (((p, g), m), v) in model
            .tensors_mut()
            .into_iter()
            .zip(grads.tensors())
            .zip(&mut self.first)
            .zip(&mut self.second)
        {
            for k in 0..p.len() {
                m[k] = b1 * m[k] + (S::one() - b1) * g[k];
                v[k] = b2 * v[k] + (S::one() - b2) * g[k] * g[k];
                let mh = m[k] / c1;
                let vh = v[k] / c2;
                p[k] -= lr * mh / (vh.sqrt() + eps);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InvocationReport<S> {
    /// Training loss observed at each epoch, before that epoch's update.
    pub epoch_losses: Vec<S>,
    pub val_loss: S,
    pub val_f1: f64,
}

fn eval_val<S: Scalar, R: Rng + ?Sized>(
    model: &GatModel<S>,
    input: &GatInput<S>,
    hp: &GatHyperParams<S>,
    rng: &mut R,
) -> Result<(S, f64), GatError> {
    let c = forward(model, &input.features, &input.neighborhoods, hp, Mode::Eval, rng)?;
    let loss = loss_nll(&c.log_probs, &input.labels, &input.val_mask, model, hp.weight_decay)?;
    let idx: Vec<usize> = (0..input.labels.len()).filter(|&i| input.val_mask[i]).collect();
    let pred: Vec<Label> = idx.iter().map(|&i| predicted_label(c.log_probs.row(i))).collect();
    let truth: Vec<Label> = idx.iter().map(|&i| input.labels[i]).collect();
    let f1 = compute_metrics(&pred, &truth, 0.0)
        .map_err(|e| GatError::ShapeMismatch(e.to_string()))?
        .f1;
    Ok((loss, f1))
}

/// Runs `epochs` epochs. Each epoch resets gradients, runs the forward
/// pass, computes the loss, back-propagates and updates the parameters.
pub fn train_invocation<S: Scalar, R: Rng + ?Sized>(
    model: &mut GatModel<S>,
    input: &GatInput<S>,
    hp: &GatHyperParams<S>,
    epochs: usize,
    adam: &mut Adam<S>,
    rng: &mut R,
) -> Result<InvocationReport<S>, GatError> {
    hp.validate()?;
    let mut grads = model.zeros_like();
    let mut epoch_losses = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        for t in grads.tensors_mut() {
            t.fill(S::zero());
        }
        let cache = forward(model, &input.features, &input.neighborhoods, hp, Mode::Train, rng)?;
        let loss = loss_nll(&cache.log_probs, &input.labels, &input.train_mask, model, hp.weight_decay)?;
        if !loss.is_finite() {
            return Err(GatError::NonFiniteLoss {
                epoch,
                loss: loss.as_f64(),
            });
        }
        epoch_losses.push(loss);
        grads = backward(
            model,
            &input.neighborhoods,
            &cache,
            &input.labels,
            &input.train_mask,
            hp.weight_decay,
        )?;
        adam.step(model, &grads, hp.lr);
    }
    let (val_loss, val_f1) = eval_val(model, input, hp, rng)?;
    Ok(InvocationReport {
        epoch_losses,
        val_loss,
        val_f1,
    })
}

#[derive(Debug, Clone)]
pub struct FitResult<M, S> {
    pub best: M,
    pub best_val_f1: f64,
    pub best_val_loss: S,
    pub invocations: usize,
    pub val_f1_history: Vec<f64>,
}

/// Drives up to `schedule.m` invocations, keeping the best checkpoint by
/// validation F1 (validation loss breaks ties) and stopping once `patience`
/// consecutive invocations fail to improve.
pub fn run_schedule<M, S, F>(schedule: &TrainSchedule, mut invoke: F) -> Result<FitResult<M, S>, GatError>
where
    S: Scalar,
    F: FnMut(usize) -> Result<(M, f64, S), GatError>,
{
    let mut best: Option<(M, f64, S)> = None;
    let mut stale = 0usize;
    let mut history = Vec::new();
    let mut invocations = 0;
    for i in 0..schedule.m.max(1) {
        let (model, f1, loss) = invoke(i)?;
        invocations += 1;
        history.push(f1);
        let improved = match &best {
            None => true,
            Some((_, bf, bl)) => f1 > *bf || (f1 == *bf && loss < *bl),
        };
        if improved {
            best = Some((model, f1, loss));
            stale = 0;
        } else {
            stale += 1;
            if stale > schedule.patience {
                break;
            }
        }
    }
    let (best, best_val_f1, best_val_loss) = best.expect("at least one invocation");
    Ok(FitResult {
        best,
        best_val_f1,
        best_val_loss,
        invocations,
        val_f1_history: history,
    })
}

/// Trains `model` under `schedule` and returns the best checkpoint.
pub fn fit<S: Scalar, R: Rng + ?Sized>(
    model: GatModel<S>,
    input: &GatInput<S>,
    hp: &GatHyperParams<S>,
    schedule: &TrainSchedule,
    rng: &mut R,
) -> Result<FitResult<GatModel<S>, S>, GatError> {
    let mut model = model;
    let mut adam = Adam::new(&model);
    run_schedule(schedule, |_| {
        let r = train_invocation(&mut model, input, hp, schedule.n, &mut adam, rng)?;
        Ok((model.clone(), r.val_f1, r.val_loss))
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_input() -> GatInput<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let n = 12;
        let labels: Vec<Label> = (0..n)
            .map(|i| if i < 4 { Label::Malicious } else { Label::Normal })
            .collect();
        let rows: Vec<Vec<f64>> = labels
            .iter()
            .map(|l| {
                let shift = if l.is_malicious() { 1.0 } else { -1.0 };
                (0..4).map(|_| shift + rng.random_range(-0.5..0.5)).collect()
            })
            .collect();
        let mut adj = vec![Vec::new(); n];
        adj[0].push(1);
        adj[1].push(0);
        adj[2].push(3);
        adj[3].push(2);
        GatInput {
            features: Matrix::from_rows(&rows),
            neighborhoods: Neighborhoods::with_self_loops(&adj),
            labels,
            train_mask: (0..n).map(|i| i % 3 != 2).collect(),
            val_mask: (0..n).map(|i| i % 3 == 2).collect(),
            test_mask: vec![false; n],
        }
    }

    fn hp(lr: f64) -> GatHyperParams<f64> {
        GatHyperParams {
            nfeat: 4,
            nclass: 2,
            nhid: 4,
            lr,
            dropout: 0.2,
            weight_decay: 5e-4,
        }
    }

    #[test]
    fn zero_learning_rate_is_a_null_update() {
        let input = tiny_input();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut m = GatModel::init(&hp(0.0), 2, &mut rng);
        let before = m.clone();
        let mut adam = Adam::new(&m);
        train_invocation(&mut m, &input, &hp(0.0), 5, &mut adam, &mut rng).unwrap();
        assert_eq!(m, before);
    }

    #[test]
    fn loss_decreases_on_fixture() {
        let input = tiny_input();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let h = GatHyperParams { dropout: 0.0, ..hp(0.01) };
        let mut m = GatModel::init(&h, 2, &mut rng);
        let mut adam = Adam::new(&m);
        let r = train_invocation(&mut m, &input, &h, 10, &mut adam, &mut rng).unwrap();
        assert!(r.epoch_losses[9] <= r.epoch_losses[0]);
    }

    #[test]
    fn same_seed_same_parameters() {
        let input = tiny_input();
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(3);
            let m = GatModel::init(&hp(0.05), 2, &mut rng);
            fit(m, &input, &hp(0.05), &TrainSchedule { m: 3, n: 5, patience: 1 }, &mut rng)
                .unwrap()
                .best
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn patience_zero_stops_after_worsening() {
        let trajectory = [0.8, 0.5, 0.9, 0.95];
        let r = run_schedule(&TrainSchedule { m: 4, n: 1, patience: 0 }, |i| {
            Ok((i, trajectory[i], 0.0f64))
        })
        .unwrap();
        assert_eq!(r.invocations, 2);
        assert_eq!(r.best, 0);
        assert_eq!(r.best_val_f1, 0.8);
    }

    #[test]
    fn best_is_at_least_final() {
        let trajectory = [0.3, 0.7, 0.6, 0.65, 0.2];
        let r = run_schedule(&TrainSchedule { m: 5, n: 1, patience: 10 }, |i| {
            Ok((i, trajectory[i], 0.0f64))
        })
        .unwrap();
        assert_eq!(r.invocations, 5);
        assert!(r.best_val_f1 >= *r.val_f1_history.last().unwrap());
        assert_eq!(r.best, 1);
        let one = run_schedule(&TrainSchedule { m: 1, n: 1, patience: 0 }, |i| Ok((i, 0.1, 0.0f64))).unwrap();
        assert_eq!(one.invocations, 1);
    }
}
