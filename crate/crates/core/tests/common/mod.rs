//! Independent oracles and generators shared by the integration tests.
#![allow(dead_code)]

use std::path::PathBuf;

use gastrace::gat::{GatHyperParams, GatModel, Matrix, Neighborhoods};
use gastrace::svm::{SmoOptions, SvmHyperParams};
use gastrace::txmodel::{
    group_by_account, parse_labels, parse_transactions, Label, LabeledAccountSet,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn fixture_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/synth_50_150")
}

/// The shipped 50/150 synthetic corpus.
pub fn fixture_set() -> LabeledAccountSet {
    let dir = fixture_dir();
    let txs = parse_transactions(std::fs::File::open(dir.join("transactions.csv")).unwrap()).unwrap();
    let labels = parse_labels(std::fs::File::open(dir.join("labels.csv")).unwrap()).unwrap();
    group_by_account(&txs, &labels).unwrap().set
}

// ---------------------------------------------------------------- SVM dual

pub fn sign(l: Label) -> f64 {
    if l.is_malicious() {
        1.0
    } else {
        -1.0
    }
}

/// `Q_ij = y_i y_j exp(-gamma |x_i - x_j|^2)`.
pub fn dual_q(x: &[Vec<f64>], y: &[Label], gamma: f64) -> Vec<Vec<f64>> {
    let n = x.len();
    let mut q = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            let d2: f64 = x[i].iter().zip(&x[j]).map(|(a, b)| (a - b) * (a - b)).sum();
            q[i][j] = sign(y[i]) * sign(y[j]) * (-gamma * d2).exp();
        }
    }
    q
}

/// `sum(a) - 1/2 a'Qa`.
pub fn dual_objective(q: &[Vec<f64>], a: &[f64]) -> f64 {
    let n = a.len();
    let mut quad = 0.0;
    for i in 0..n {
        for j in 0..n {
            quad += a[i] * q[i][j] * a[j];
        }
    }
    a.iter().sum::<f64>() - 0.5 * quad
}

/// Euclidean projection onto `{a : y'a = 0, 0 <= a <= c}` by bisection on
/// the multiplier of the equality constraint.
pub fn project(v: &[f64], ys: &[f64], c: &[f64]) -> Vec<f64> {
    let clip = |mu: f64| -> Vec<f64> {
        v.iter()
            .zip(ys)
            .zip(c)
            .map(|((&vi, &yi), &ci)| (vi - mu * yi).clamp(0.0, ci))
            .collect()
    };
    let g = |mu: f64| clip(mu).iter().zip(ys).map(|(a, y)| a * y).sum::<f64>();
    let span = v.iter().fold(0.0f64, |m, x| m.max(x.abs())) + c.iter().fold(0.0f64, |m, x| m.max(*x)) + 1.0;
    let (mut lo, mut hi) = (-span, span);
    // g is non-increasing in mu
    loop {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if g(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    clip(0.5 * (lo + hi))
}

/// Maximizes the SVM dual by accelerated projected gradient with adaptive
/// restart.
pub fn qp_oracle(q: &[Vec<f64>], y: &[Label], c: &[f64], max_iter: usize) -> Vec<f64> {
    let n = q.len();
    let ys: Vec<f64> = y.iter().map(|&l| sign(l)).collect();
    let lip = (0..n)
        .map(|i| q[i].iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max);
    let step = 1.0 / lip;
    let grad = |a: &[f64]| -> Vec<f64> {
        (0..n)
            .map(|i| q[i].iter().zip(a).map(|(qij, aj)| qij * aj).sum::<f64>() - 1.0)
            .collect()
    };
    let mut a = vec![0.0; n];
    let mut z = a.clone();
    let mut t = 1.0f64;
    let mut best = dual_objective(q, &a);
    // distance of `a` from one projected-gradient step
    let fixed_point_residual = |a: &[f64]| -> f64 {
        let g = grad(a);
        let cand: Vec<f64> = a.iter().zip(&g).map(|(ai, gi)| ai - step * gi).collect();
        project(&cand, &ys, c)
            .iter()
            .zip(a)
            .fold(0.0, |m, (p, ai)| m.max((p - ai).abs()))
    };
    for iter in 0..max_iter {
        if iter % 50 == 0 && fixed_point_residual(&a) < 1e-13 {
            break;
        }
        let g = grad(&z);
        let cand: Vec<f64> = z.iter().zip(&g).map(|(zi, gi)| zi - step * gi).collect();
        let next = project(&cand, &ys, c);
        let obj = dual_objective(q, &next);
        if obj < best && t > 1.0 {
            // restart momentum from the incumbent; a plain step is always kept
            z = a.clone();
            t = 1.0;
            continue;
        }
        let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
        z = next
            .iter()
            .zip(&a)
            .map(|(p, o)| p + (t - 1.0) / t_next * (p - o))
            .collect();
        a = next;
        t = t_next;
        best = obj;
    }
    a
}

/// A random small SVM instance with both classes present.
pub struct SvmInstance {
    pub x: Vec<Vec<f64>>,
    pub y: Vec<Label>,
    pub hp: SvmHyperParams<f64>,
}

pub fn random_svm_instance(r: &mut ChaCha8Rng) -> SvmInstance {
    let n = r.random_range(4..=20);
    let d = r.random_range(1..=4);
    let x: Vec<Vec<f64>> = (0..n)
        .map(|_| (0..d).map(|_| r.random_range(-2.0..2.0)).collect())
        .collect();
    let mut y: Vec<Label> = (0..n)
        .map(|_| if r.random_bool(0.5) { Label::Malicious } else { Label::Normal })
        .collect();
    y[0] = Label::Malicious;
    y[1] = Label::Normal;
    let hp = SvmHyperParams {
        c: [0.1, 1.0, 10.0][r.random_range(0..3)],
        gamma: [0.1, 0.5, 2.0][r.random_range(0..3)],
        class_weight_malicious: [1.0, 2.5][r.random_range(0..2)],
    };
    SvmInstance { x, y, hp }
}

pub fn tight_smo() -> SmoOptions<f64> {
    SmoOptions {
        tol: 1e-10,
        max_passes: 100_000,
    }
}

/// Largest KKT violation of `alpha` given decision values `f`:
/// `y f >= 1` at zero, `y f = 1` when free, `y f <= 1` at the bound.
pub fn kkt_violation(alpha: &[f64], bounds: &[f64], y: &[Label], f: &[f64]) -> f64 {
    let eps = 1e-12;
    let mut worst = 0.0f64;
    for i in 0..alpha.len() {
        let margin = sign(y[i]) * f[i];
        let v = if alpha[i] <= eps {
            (1.0 - margin).max(0.0)
        } else if alpha[i] >= bounds[i] - eps {
            (margin - 1.0).max(0.0)
        } else {
            (margin - 1.0).abs()
        };
        worst = worst.max(v);
    }
    worst
}

// ---------------------------------------------------------------- GAT

/// A random graph problem small enough for finite differences.
pub struct GatProblem {
    pub x: Matrix<f64>,
    pub adjacency: Vec<Vec<usize>>,
    pub nb: Neighborhoods,
    pub labels: Vec<Label>,
    pub mask: Vec<bool>,
    pub hp: GatHyperParams<f64>,
    pub model: GatModel<f64>,
}

pub fn random_gat_problem(r: &mut ChaCha8Rng, edge_p: f64) -> GatProblem {
    let n = r.random_range(2..=12);
    let nfeat = r.random_range(2..=5);
    let heads = r.random_range(1..=3);
    let hp = GatHyperParams {
        nfeat,
        nclass: 2,
        nhid: r.random_range(2..=4),
        lr: 0.01,
        dropout: 0.0,
        weight_decay: [0.0, 1e-3][r.random_range(0..2)],
    };
    let rows: Vec<Vec<f64>> = (0..n)
        .map(|_| (0..nfeat).map(|_| r.random_range(-1.5..1.5)).collect())
        .collect();
    let mut adjacency = vec![Vec::new(); n];
    for i in 0..n {
        for j in i + 1..n {
            if r.random_bool(edge_p) {
                adjacency[i].push(j);
                adjacency[j].push(i);
            }
        }
    }
    let labels: Vec<Label> = (0..n)
        .map(|_| if r.random_bool(0.4) { Label::Malicious } else { Label::Normal })
        .collect();
    let mut mask: Vec<bool> = (0..n).map(|_| r.random_bool(0.6)).collect();
    mask[0] = true;
    // larger initial weights so the check also exercises saturated units
    let mut model = GatModel::init(&hp, heads, r);
    for t in model.tensors_mut() {
        for v in t.iter_mut() {
            *v *= 2.0;
        }
    }
    GatProblem {
        x: Matrix::from_rows(&rows),
        nb: Neighborhoods::with_self_loops(&adjacency),
        adjacency,
        labels,
        mask,
        hp,
        model,
    }
}

fn elu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        x.exp_m1()
    }
}

fn matmul(a: &[Vec<f64>], w: &Matrix<f64>) -> Vec<Vec<f64>> {
    a.iter()
        .map(|row| {
            (0..w.cols)
                .map(|c| row.iter().enumerate().map(|(k, v)| v * w.at(k, c)).sum())
                .collect()
        })
        .collect()
}

/// Log-probabilities of the network on a graph with no edges, where every
/// attention weight is 1 and the model reduces to a two-layer perceptron.
pub fn isolated_mlp_log_probs(model: &GatModel<f64>, x: &Matrix<f64>) -> Vec<Vec<f64>> {
    let rows: Vec<Vec<f64>> = (0..x.rows).map(|i| x.row(i).to_vec()).collect();
    let mut hidden = vec![Vec::new(); x.rows];
    for head in &model.heads {
        for (i, h) in matmul(&rows, &head.weight).into_iter().enumerate() {
            hidden[i].extend(h.into_iter().map(elu));
        }
    }
    matmul(&hidden, &model.output.weight)
        .into_iter()
        .map(|logits| {
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + logits.iter().map(|l| (l - m).exp()).sum::<f64>().ln();
            logits.iter().map(|l| l - lse).collect()
        })
        .collect()
}
