//! Single-head graph attention layer.

use rand::Rng;

use super::{AttentionHead, Matrix, LEAKY_SLOPE};
use crate::scalar::Scalar;

/// Compressed neighbor lists, each including the node itself.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Neighborhoods {
    offsets: Vec<usize>,
    cols: Vec<usize>,
}

impl Neighborhoods {
    /// Adds a self-loop to every node; lists are sorted and deduplicated.
    pub fn with_self_loops(adjacency: &[Vec<usize>]) -> Self {
        let mut offsets = Vec::with_capacity(adjacency.len() + 1);
        let mut cols = Vec::new();
        offsets.push(0);
        for (i, nbrs) in adjacency.iter().enumerate() {
            let mut v: Vec<usize> = nbrs.iter().copied().filter(|&j| j != i).collect();
            v.push(i);
            v.sort_unstable();
            v.dedup();
            cols.extend(v);
            offsets.push(cols.len());
        }
        Self { offsets, cols }
    }

    pub fn len(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn of(&self, i: usize) -> &[usize] {
        &self.cols[self.offsets[i]..self.offsets[i + 1]]
    }

    #[inline]
    pub(crate) fn range(&self, i: usize) -> std::ops::Range<usize> {
        self.offsets[i]..self.offsets[i + 1]
    }

    pub fn num_entries(&self) -> usize {
        self.cols.len()
    }
}

#[inline]
fn leaky<S: Scalar>(u: S) -> S {
    if u > S::zero() {
        u
    } else {
        S::lit(LEAKY_SLOPE) * u
    }
}

#[inline]
fn leaky_grad<S: Scalar>(u: S) -> S {
    if u > S::zero() {
        S::one()
    } else {
        S::lit(LEAKY_SLOPE)
    }
}

fn scores<S: Scalar>(z: &Matrix<S>, attention: &[S]) -> (Vec<S>, Vec<S>) {
    let d = z.cols;
    let (a_src, a_nbr) = attention.split_at(d);
    let dot = |a: &[S], r: &[S]| a.iter().zip(r).fold(S::zero(), |s, (&x, &y)| s + x * y);
    let src = (0..z.rows).map(|i| dot(a_src, z.row(i))).collect();
    let nbr = (0..z.rows).map(|i| dot(a_nbr, z.row(i))).collect();
    (src, nbr)
}

/// Pre-activation scores `u_ij` and normalized weights `alpha_ij`, stored in
/// neighborhood order.
fn normalized<S: Scalar>(z: &Matrix<S>, attention: &[S], nb: &Neighborhoods) -> (Vec<S>, Vec<S>) {
    let (src, nbr) = scores(z, attention);
    let mut u = vec![S::zero(); nb.num_entries()];
    let mut alpha = vec![S::zero(); nb.num_entries()];
    for i in 0..nb.len() {
        let r = nb.range(i);
        let mut max = S::neg_infinity();
        for (e, &j) in r.clone().zip(nb.of(i)) {
            u[e] = src[i] + nbr[j];
            max = max.max(leaky(u[e]));
        }
        let mut total = S::zero();
        for e in r.clone() {
            let w = (leaky(u[e]) - max).exp();
            alpha[e] = w;
            total += w;
        }
        for e in r {
            alpha[e] /= total;
        }
    }
    (u, alpha)
}

/// Attention weights `softmax_j LeakyReLU(a^T [z_i || z_j])` over each
/// neighborhood, returned per node in neighborhood order.
pub fn attention_coefficients<S: Scalar>(
    projected: &Matrix<S>,
    attention: &[S],
    nb: &Neighborhoods,
) -> Vec<Vec<S>> {
    let (_, alpha) = normalized(projected, attention, nb);
    (0..nb.len()).map(|i| alpha[nb.range(i)].to_vec()).collect()
}

#[derive(Debug, Clone)]
pub(crate) struct LayerCache<S> {
    pub z: Matrix<S>,
    pub u: Vec<S>,
    pub alpha: Vec<S>,
    /// Inverted-dropout multipliers on attention weights.
    pub keep: Option<Vec<S>>,
}

/// Inverted-dropout multipliers: `0` or `1 / (1 - p)`.
pub(crate) fn dropout_mask<S: Scalar, R: Rng + ?Sized>(len: usize, p: S, rng: &mut R) -> Vec<S> {
    let scale = S::one() / (S::one() - p);
    let p = p.as_f64();
    (0..len)
        .map(|_| if rng.random::<f64>() < p { S::zero() } else { scale })
        .collect()
}

pub(crate) fn layer_forward<S: Scalar, R: Rng + ?Sized>(
    x: &Matrix<S>,
    head: &AttentionHead<S>,
    nb: &Neighborhoods,
    dropout: Option<(S, &mut R)>,
) -> (Matrix<S>, LayerCache<S>) {
    let z = x.matmul(&head.weight);
    let (u, alpha) = normalized(&z, &head.attention, nb);
    let keep = dropout.map(|(p, rng)| dropout_mask(alpha.len(), p, rng));
    let d = z.cols;
    let mut out = Matrix::zeros(z.rows, d);
    for i in 0..nb.len() {
        let orow = out.row_mut(i);
        for (e, &j) in nb.range(i).zip(nb.of(i)) {
            let w = match &keep {
                Some(k) => alpha[e] * k[e],
                None => alpha[e],
            };
            for (o, &zj) in orow.iter_mut().zip(z.row(j)) {
                *o += w * zj;
            }
        }
    }
    (out, LayerCache { z, u, alpha, keep })
}

/// Back-propagates `grad_out = dL/d(out)`. Returns `dL/dx` when requested
/// and the parameter gradients.
pub(crate) fn layer_backward<S: Scalar>(
    x: &Matrix<S>,
    head: &AttentionHead<S>,
    nb: &Neighborhoods,
    cache: &LayerCache<S>,
    grad_out: &Matrix<S>,
    need_dx: bool,
) -> (Option<Matrix<S>>, AttentionHead<S>) {
    let z = &cache.z;
    let d = z.cols;
    let n = nb.len();
    let (a_src, a_nbr) = head.attention.split_at(d);
    let mut dz = Matrix::zeros(n, d);
    let mut d_src = vec![S::zero(); n];
    let mut d_nbr = vec![S::zero(); n];
    let mut d_alpha = Vec::new();

    for i in 0..n {
        let g = grad_out.row(i);
        let r = nb.range(i);
        d_alpha.clear();
        for (e, &j) in r.clone().zip(nb.of(i)) {
            let keep = cache.keep.as_ref().map_or(S::one(), |k| k[e]);
            let w = cache.alpha[e] * keep;
            if w != S::zero() {
                for (dzj, &gi) in dz.row_mut(j).iter_mut().zip(g) {
                    *dzj += w * gi;
                }
            }
            let dot = g.iter().zip(z.row(j)).fold(S::zero(), |s, (&a, &b)| s + a * b);
            d_alpha.push(dot * keep);
        }
        let weighted = r
            .clone()
            .zip(&d_alpha)
            .fold(S::zero(), |s, (e, &da)| s + cache.alpha[e] * da);
        for ((e, &j), &da) in r.clone().zip(nb.of(i)).zip(&d_alpha) {
            let de = cache.alpha[e] * (da - weighted);
            let du = de * leaky_grad(cache.u[e]);
            d_src[i] += du;
            d_nbr[j] += du;
        }
    }

    let mut d_att = vec![S::zero(); 2 * d];
    for t in 0..n {
        let zt = z.row(t);
        let row = dz.row_mut(t);
        for c in 0..d {
            row[c] += a_src[c] * d_src[t] + a_nbr[c] * d_nbr[t];
            d_att[c] += d_src[t] * zt[c];
            d_att[d + c] += d_nbr[t] * zt[c];
        }
    }

    let d_weight = x.t_matmul(&dz);
    let dx = need_dx.then(|| dz.matmul_t(&head.weight));
    (
        dx,
        AttentionHead {
            weight: d_weight,
            attention: d_att,
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn isolated_node_attends_to_itself() {
        let nb = Neighborhoods::with_self_loops(&[vec![], vec![]]);
        let z = Matrix::from_rows(&[vec![1.0f64, -2.0], vec![0.3, 0.4]]);
        let a = attention_coefficients(&z, &[0.5, 0.1, -0.3, 0.9], &nb);
        assert_eq!(a, vec![vec![1.0], vec![1.0]]);
    }

    #[test]
    fn identical_neighbors_split_evenly() {
        let nb = Neighborhoods::with_self_loops(&[vec![1, 2], vec![0], vec![0]]);
        let z = Matrix::from_rows(&[vec![0.7f64, 0.2], vec![0.7, 0.2], vec![0.7, 0.2]]);
        let a = attention_coefficients(&z, &[0.5, -1.0, 2.0, 0.3], &nb);
        let third = 1.0 / 3.0;
        assert!(a[0].iter().all(|&w| (w - third).abs() < 1e-15));
        let a1 = &a[1];
        assert!((a1[0] - 0.5).abs() < 1e-15 && (a1[1] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn matches_dense_softmax_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let adj = vec![vec![1, 3], vec![0, 2], vec![1], vec![0]];
        let nb = Neighborhoods::with_self_loops(&adj);
        let z = Matrix {
            rows: 4,
            cols: 3,
            data: (0..12).map(|_| rng.random_range(-1.0f64..1.0)).collect(),
        };
        let a: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
        let got = attention_coefficients(&z, &a, &nb);
        for i in 0..4 {
            // naive dense recomputation
            let mut members: Vec<usize> = adj[i].clone();
            members.push(i);
            members.sort();
            let e: Vec<f64> = members
                .iter()
                .map(|&j| {
                    let mut s = 0.0;
                    for c in 0..3 {
                        s += a[c] * z.at(i, c) + a[3 + c] * z.at(j, c);
                    }
                    if s > 0.0 { s } else { 0.2 * s }
                })
                .collect();
            let total: f64 = e.iter().map(|v| v.exp()).sum();
            for (k, &v) in e.iter().enumerate() {
                assert!((got[i][k] - v.exp() / total).abs() < 1e-9);
            }
            assert!((got[i].iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}
