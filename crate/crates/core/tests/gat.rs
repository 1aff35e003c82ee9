//! GAT forward/backward correctness against finite differences and a
//! closed-form perceptron oracle.

mod common;

use common::*;
use gastrace::gat::{
    attention_coefficients, backward, forward, loss_nll, train_invocation, Adam, GatInput,
    GatModel, Matrix, Mode, Neighborhoods,
};
use gastrace::txmodel::Label;

fn loss_at(p: &GatProblem, model: &GatModel<f64>) -> f64 {
    let c = forward(model, &p.x, &p.nb, &p.hp, Mode::Eval, &mut rng(0)).unwrap();
    loss_nll(&c.log_probs, &p.labels, &p.mask, model, p.hp.weight_decay).unwrap()
}

/// Largest relative gap between analytic and central-difference gradients.
fn gradient_gap(p: &GatProblem) -> f64 {
    let cache = forward(&p.model, &p.x, &p.nb, &p.hp, Mode::Eval, &mut rng(0)).unwrap();
    let grads = backward(&p.model, &p.nb, &cache, &p.labels, &p.mask, p.hp.weight_decay).unwrap();
    let analytic: Vec<f64> = grads.tensors().iter().flat_map(|t| t.iter().copied()).collect();
    let h = 1e-6;
    let mut worst = 0.0f64;
    let mut k = 0;
    let sizes: Vec<usize> = p.model.tensors().iter().map(|t| t.len()).collect();
    for (ti, &len) in sizes.iter().enumerate() {
        for e in 0..len {
            let mut plus = p.model.clone();
            plus.tensors_mut()[ti][e] += h;
            let mut minus = p.model.clone();
            minus.tensors_mut()[ti][e] -= h;
            let fd = (loss_at(p, &plus) - loss_at(p, &minus)) / (2.0 * h);
            let a = analytic[k];
            let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-6);
            worst = worst.max(rel);
            k += 1;
        }
    }
    worst
}

#[test]
fn analytic_gradients_match_central_differences() {
    let mut r = rng(101);
    for case in 0..20 {
        let p = random_gat_problem(&mut r, 0.35);
        let gap = gradient_gap(&p);
        assert!(gap <= 1e-4, "graph {case}: relative gap {gap}");
    }
}

#[test]
fn attention_and_log_softmax_rows_normalize() {
    let mut r = rng(102);
    for _ in 0..20 {
        let p = random_gat_problem(&mut r, 0.5);
        for head in &p.model.heads {
            let z = p.x.matmul(&head.weight);
            for row in attention_coefficients(&z, &head.attention, &p.nb) {
                let s: f64 = row.iter().sum();
                assert!((s - 1.0).abs() <= 1e-6);
                assert!(row.iter().all(|&a| a >= 0.0));
            }
        }
        let c = forward(&p.model, &p.x, &p.nb, &p.hp, Mode::Eval, &mut rng(0)).unwrap();
        for i in 0..c.log_probs.rows {
            let s: f64 = c.log_probs.row(i).iter().map(|v| v.exp()).sum();
            assert!((s - 1.0).abs() <= 1e-6);
        }
    }
}

#[test]
fn isolated_graph_reduces_to_perceptron() {
    let mut r = rng(103);
    for _ in 0..10 {
        let p = random_gat_problem(&mut r, 0.0);
        assert!(p.adjacency.iter().all(Vec::is_empty));
        let c = forward(&p.model, &p.x, &p.nb, &p.hp, Mode::Eval, &mut rng(0)).unwrap();
        let oracle = isolated_mlp_log_probs(&p.model, &p.x);
        for (i, row) in oracle.iter().enumerate() {
            for (k, v) in row.iter().enumerate() {
                assert!((c.log_probs.at(i, k) - v).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn eval_mode_ignores_the_generator() {
    let mut r = rng(104);
    let mut p = random_gat_problem(&mut r, 0.4);
    p.hp.dropout = 0.5;
    let a = forward(&p.model, &p.x, &p.nb, &p.hp, Mode::Eval, &mut rng(1)).unwrap();
    let b = forward(&p.model, &p.x, &p.nb, &p.hp, Mode::Eval, &mut rng(2)).unwrap();
    assert_eq!(a.log_probs, b.log_probs);
    let t1 = forward(&p.model, &p.x, &p.nb, &p.hp, Mode::Train, &mut rng(1)).unwrap();
    let t2 = forward(&p.model, &p.x, &p.nb, &p.hp, Mode::Train, &mut rng(2)).unwrap();
    assert_ne!(t1.log_probs, t2.log_probs);
}

fn masked_input() -> GatInput<f64> {
    let mut r = rng(105);
    let p = random_gat_problem(&mut r, 0.3);
    let n = p.x.rows;
    let roles: Vec<usize> = (0..n).map(|i| i % 3).collect();
    GatInput {
        features: p.x,
        neighborhoods: p.nb,
        labels: p.labels,
        train_mask: roles.iter().map(|&r| r == 0).collect(),
        val_mask: roles.iter().map(|&r| r == 1).collect(),
        test_mask: roles.iter().map(|&r| r == 2).collect(),
    }
}

fn flip(l: Label) -> Label {
    if l.is_malicious() {
        Label::Normal
    } else {
        Label::Malicious
    }
}

#[test]
fn training_never_reads_held_out_labels() {
    let base = masked_input();
    let nfeat = base.features.cols;
    let hp = gastrace::gat::GatHyperParams {
        nfeat,
        nclass: 2,
        nhid: 3,
        lr: 0.05,
        dropout: 0.2,
        weight_decay: 1e-4,
    };
    let run = |input: &GatInput<f64>| {
        let mut model = GatModel::init(&hp, 2, &mut rng(7));
        let mut adam = Adam::new(&model);
        let rep = train_invocation(&mut model, input, &hp, 15, &mut adam, &mut rng(8)).unwrap();
        (model, rep)
    };
    let (m0, r0) = run(&base);

    let mut test_flipped = base.clone();
    for i in 0..test_flipped.labels.len() {
        if test_flipped.test_mask[i] {
            test_flipped.labels[i] = flip(test_flipped.labels[i]);
        }
    }
    let (m1, r1) = run(&test_flipped);
    assert_eq!(m0, m1);
    assert_eq!(r0, r1);

    let mut val_flipped = base.clone();
    for i in 0..val_flipped.labels.len() {
        if val_flipped.val_mask[i] {
            val_flipped.labels[i] = flip(val_flipped.labels[i]);
        }
    }
    let (m2, r2) = run(&val_flipped);
    assert_eq!(m0, m2);
    assert_eq!(r0.epoch_losses, r2.epoch_losses);
}

#[test]
fn single_node_neighborhood_is_itself() {
    let nb = Neighborhoods::with_self_loops(&[vec![]]);
    assert_eq!(nb.of(0), &[0]);
    let z = Matrix::from_rows(&[vec![0.3, -2.0]]);
    let a = attention_coefficients(&z, &[1.0, 2.0, 3.0, 4.0], &nb);
    assert_eq!(a, vec![vec![1.0]]);
}
