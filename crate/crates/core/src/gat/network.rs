//! Two-layer forward pass, masked NLL loss and its analytic gradient.

use rand::Rng;

use super::layer::{dropout_mask, layer_backward, layer_forward, LayerCache};
use super::{class_index, GatError, GatHyperParams, GatModel, Matrix, Neighborhoods};
use crate::scalar::Scalar;
use crate::txmodel::Label;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Dropout active.
    Train,
    Eval,
}

/// Intermediates kept for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache<S> {
    input: Matrix<S>,
    heads: Vec<LayerCache<S>>,
    hidden_pre: Matrix<S>,
    hidden: Matrix<S>,
    hidden_keep: Option<Vec<S>>,
    output: LayerCache<S>,
    /// Per-node log-probabilities, `n_nodes x nclass`.
    pub log_probs: Matrix<S>,
}

fn elu<S: Scalar>(x: S) -> S {
    if x > S::zero() {
        x
    } else {
        x.exp_m1()
    }
}

fn elu_grad<S: Scalar>(x: S) -> S {
    if x > S::zero() {
        S::one()
    } else {
        x.exp()
    }
}

fn apply_keep<S: Scalar>(m: &mut Matrix<S>, keep: &[S]) {
    for (v, &k) in m.data.iter_mut().zip(keep) {
        *v *= k;
    }
}

/// Runs the network. In [`Mode::Train`] with positive dropout, inputs of
/// both layers and all attention weights are dropped using `rng`.
pub fn forward<S: Scalar, R: Rng + ?Sized>(
    model: &GatModel<S>,
    x: &Matrix<S>,
    nb: &Neighborhoods,
    hp: &GatHyperParams<S>,
    mode: Mode,
    rng: &mut R,
) -> Result<ForwardCache<S>, GatError> {
    model.check_shapes(x.cols)?;
    if x.rows != nb.len() {
        return Err(GatError::ShapeMismatch(format!(
            "{} feature rows but {} nodes",
            x.rows,
            nb.len()
        )));
    }
    let drop = mode == Mode::Train && hp.dropout > S::zero();
    let n = x.rows;
    let nhid = model.nhid();

    let mut input = x.clone();
    if drop {
        let keep = dropout_mask(input.data.len(), hp.dropout, rng);
        apply_keep(&mut input, &keep);
    }

    let mut hidden_pre = Matrix::zeros(n, model.heads.len() * nhid);
    let mut heads = Vec::with_capacity(model.heads.len());
    for (k, head) in model.heads.iter().enumerate() {
        let (out, cache) = if drop {
            layer_forward(&input, head, nb, Some((hp.dropout, &mut *rng)))
        } else {
            layer_forward::<S, R>(&input, head, nb, None)
        };
        for i in 0..n {
            hidden_pre.row_mut(i)[k * nhid..(k + 1) * nhid].copy_from_slice(out.row(i));
        }
        heads.push(cache);
    }

    let mut hidden = hidden_pre.clone();
    for v in &mut hidden.data {
        *v = elu(*v);
    }
    let hidden_keep = drop.then(|| dropout_mask(hidden.data.len(), hp.dropout, rng));
    if let Some(k) = &hidden_keep {
        apply_keep(&mut hidden, k);
    }

    let (logits, output) = if drop {
        layer_forward(&hidden, &model.output, nb, Some((hp.dropout, &mut *rng)))
    } else {
        layer_forward::<S, R>(&hidden, &model.output, nb, None)
    };

    let mut log_probs = logits;
    for i in 0..n {
        let row = log_probs.row_mut(i);
        let max = row.iter().copied().fold(S::neg_infinity(), S::max);
        let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<S>().ln();
        for v in row.iter_mut() {
            *v -= lse;
        }
    }

    Ok(ForwardCache {
        input,
        heads,
        hidden_pre,
        hidden,
        hidden_keep,
        output,
        log_probs,
    })
}

fn mask_count(mask: &[bool]) -> Result<usize, GatError> {
    match mask.iter().filter(|&&m| m).count() {
        0 => Err(GatError::EmptyMask),
        c => Ok(c),
    }
}

/// Mean negative log-likelihood over `mask` plus `weight_decay / 2 * |theta|^2`.
pub fn loss_nll<S: Scalar>(
    log_probs: &Matrix<S>,
    labels: &[Label],
    mask: &[bool],
    model: &GatModel<S>,
    weight_decay: S,
) -> Result<S, GatError> {
    if labels.len() != log_probs.rows || mask.len() != log_probs.rows {
        return Err(GatError::ShapeMismatch("labels/mask length".into()));
    }
    let count = mask_count(mask)?;
    let nll = (0..log_probs.rows)
        .filter(|&i| mask[i])
        .fold(S::zero(), |acc, i| acc - log_probs.at(i, class_index(labels[i])));
    Ok(nll / S::from_usize_lossy(count) + weight_decay * model.sum_sq() / S::lit(2.0))
}

/// Analytic gradient of [`loss_nll`] with respect to every parameter, using
/// the intermediates (and dropout draws) of `cache`.
pub fn backward<S: Scalar>(
    model: &GatModel<S>,
    nb: &Neighborhoods,
    cache: &ForwardCache<S>,
    labels: &[Label],
    mask: &[bool],
    weight_decay: S,
) -> Result<GatModel<S>, GatError> {
    let lp = &cache.log_probs;
    if labels.len() != lp.rows || mask.len() != lp.rows {
        return Err(GatError::ShapeMismatch("labels/mask length".into()));
    }
    let count = S::from_usize_lossy(mask_count(mask)?);

    let mut d_logits = Matrix::zeros(lp.rows, lp.cols);
    for i in (0..lp.rows).filter(|&i| mask[i]) {
        let y = class_index(labels[i]);
        let row = d_logits.row_mut(i);
        for (c, v) in row.iter_mut().enumerate() {
            let p = lp.at(i, c).exp();
            let t = if c == y { S::one() } else { S::zero() };
            *v = (p - t) / count;
        }
    }

    let (d_hidden, d_out) =
        layer_backward(&cache.hidden, &model.output, nb, &cache.output, &d_logits, true);
    let mut d_hidden = d_hidden.expect("requested");
    if let Some(k) = &cache.hidden_keep {
        apply_keep(&mut d_hidden, k);
    }
    for (g, &h) in d_hidden.data.iter_mut().zip(&cache.hidden_pre.data) {
        *g *= elu_grad(h);
    }

    let nhid = model.nhid();
    let n = lp.rows;
    let mut grads = model.zeros_like();
    for (k, head) in model.heads.iter().enumerate() {
        let mut g = Matrix::zeros(n, nhid);
        for i in 0..n {
            g.row_mut(i)
                .copy_from_slice(&d_hidden.row(i)[k * nhid..(k + 1) * nhid]);
        }
        let (_, dh) = layer_backward(&cache.input, head, nb, &cache.heads[k], &g, false);
        grads.heads[k] = dh;
    }
    grads.output = d_out;

    if weight_decay != S::zero() {
        let params = model.tensors();
        for (gt, pt) in grads.tensors_mut().into_iter().zip(params) {
            for (g, &p) in gt.iter_mut().zip(pt) {
                *g += weight_decay * p;
            }
        }
    }
    Ok(grads)
}
