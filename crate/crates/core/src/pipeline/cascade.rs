//! The end-to-end cascade: features, splits, first-stage SVM, account graph,
//! second-stage GAT and the R2-only ablation.

use std::collections::BTreeSet;
use std::fmt;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::split::{assign_splits, SplitAssignment, SplitError};
use crate::features::{extract_features, FeatureError, FeatureVector, Standardizer, NUM_FEATURES};
use crate::gat::{
    bayes_opt, fit, forward, predicted_label, BayesResult, FitResult, GatCheckpoint, GatError,
    GatInput, GatModel, GatTuning, Mode, SearchSpace, TrainSchedule, DEFAULT_HEADS,
};
use crate::metrics::{compute_metrics, Metrics, MetricsError};
use crate::netgraph::{
    assign_masks, build_graph, AccountGraph, EdgeRule, GraphError, GraphNode, NodeFeatures,
    NODE_DIM,
};
use crate::scalar::Scalar;
use crate::seeds;
use crate::svm::{
    fit_calibrated, grid_search, oof_probabilities, GridSearchResult, ProbPair, SmoOptions,
    SvmError, SvmGrid, SvmHyperParams, SvmModel,
};
use crate::txmodel::{Label, LabeledAccountSet, TxError};

/// Which held-out set the cascade's headline metrics use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalSplit {
    R1Test,
    R2Test,
}

impl std::str::FromStr for EvalSplit {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "r1test" => Ok(EvalSplit::R1Test),
            "r2test" => Ok(EvalSplit::R2Test),
            _ => Err(format!("expected r1test or r2test, got `{s}`")),
        }
    }
}

/// How the R2-only ablation obtains its model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AblationMode {
    /// Evaluate the cascade's trained GAT on the blinded graph.
    Reuse,
    /// Train a fresh GAT on the blinded graph with the same hyperparameters
    /// and seeds.
    Retrain,
}

impl std::str::FromStr for AblationMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "reuse" => Ok(AblationMode::Reuse),
            "retrain" => Ok(AblationMode::Retrain),
            _ => Err(format!("expected reuse or retrain, got `{s}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CascadeConfig<S> {
    pub window_secs: u64,
    pub grid: SvmGrid<S>,
    pub cv_folds: usize,
    pub smo: SmoOptions<S>,
    pub edge_rule: EdgeRule<S>,
    pub search_space: SearchSpace,
    pub bayes_budget: usize,
    pub bayes_init: usize,
    pub schedule: TrainSchedule,
    pub heads: usize,
    pub eval_split: EvalSplit,
    pub ablation: AblationMode,
}

impl<S: Scalar> Default for CascadeConfig<S> {
    fn default() -> Self {
        Self {
            window_secs: crate::features::DEFAULT_WINDOW_SECS,
            grid: SvmGrid::default(),
            cv_folds: 5,
            smo: SmoOptions::default(),
            edge_rule: EdgeRule::default(),
            search_space: SearchSpace::default(),
            bayes_budget: 25,
            bayes_init: 5,
            schedule: TrainSchedule::default(),
            heads: DEFAULT_HEADS,
            eval_split: EvalSplit::R2Test,
            ablation: AblationMode::Reuse,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Ingest,
    Features,
    Split,
    Standardize,
    R1,
    Graph,
    R2,
    Ablation,
    Metrics,
    Study,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Stage::Ingest => "ingest",
            Stage::Features => "features",
            Stage::Split => "split",
            Stage::Standardize => "standardize",
            Stage::R1 => "r1",
            Stage::Graph => "graph",
            Stage::R2 => "r2",
            Stage::Ablation => "ablation",
            Stage::Metrics => "metrics",
            Stage::Study => "study",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Error)]
pub enum StageError {
    #[error(transparent)]
    Tx(#[from] TxError),
    #[error("account {address}: {source}")]
    Feature {
        address: String,
        source: FeatureError,
    },
    #[error(transparent)]
    Standardize(#[from] FeatureError),
    #[error(transparent)]
    Split(#[from] SplitError),
    #[error(transparent)]
    Svm(#[from] SvmError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Gat(#[from] GatError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Error)]
#[error("{stage} stage failed: {source}")]
pub struct PipelineError {
    pub stage: Stage,
    #[source]
    pub source: StageError,
}

impl PipelineError {
    pub fn new(stage: Stage, source: impl Into<StageError>) -> Self {
        Self {
            stage,
            source: source.into(),
        }
    }

    /// True for solver or training failures, false for bad input data.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self.source,
            StageError::Svm(SvmError::NonConvergence { .. })
                | StageError::Gat(GatError::NonFiniteLoss { .. })
        )
    }
}

pub(crate) trait AtStage<T> {
    fn at(self, stage: Stage) -> Result<T, PipelineError>;
}

impl<T, E: Into<StageError>> AtStage<T> for Result<T, E> {
    fn at(self, stage: Stage) -> Result<T, PipelineError> {
        self.map_err(|e| PipelineError::new(stage, e))
    }
}

/// Raw features of every labeled account, in address order.
#[derive(Debug, Clone)]
pub struct AccountFeatures<S> {
    pub addresses: Vec<String>,
    pub labels: Vec<Label>,
    pub raw: Vec<FeatureVector<S>>,
}

impl<S> AccountFeatures<S> {
    pub fn indices_in(&self, set: &BTreeSet<String>) -> Vec<usize> {
        (0..self.addresses.len())
            .filter(|&i| set.contains(&self.addresses[i]))
            .collect()
    }
}

pub fn extract_all<S: Scalar>(
    set: &LabeledAccountSet,
    window_secs: u64,
) -> Result<AccountFeatures<S>, PipelineError> {
    let raw = set
        .accounts
        .iter()
        .map(|a| {
            extract_features(a, window_secs).map_err(|source| {
                PipelineError::new(
                    Stage::Features,
                    StageError::Feature {
                        address: a.address.clone(),
                        source,
                    },
                )
            })
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(AccountFeatures {
        addresses: set.accounts.iter().map(|a| a.address.clone()).collect(),
        labels: set.accounts.iter().map(|a| set.label_of(&a.address)).collect(),
        raw,
    })
}

/// First-stage artefacts.
#[derive(Debug, Clone)]
pub struct R1Output<S> {
    pub standardizer: Standardizer<S>,
    /// Standardized features of every account.
    pub standardized: Vec<[S; NUM_FEATURES]>,
    pub grid: GridSearchResult<S>,
    pub hyper: SvmHyperParams<S>,
    pub model: SvmModel<S>,
    /// Out-of-fold for first-stage training accounts, full-model otherwise.
    pub probs: Vec<ProbPair<S>>,
}

/// Standardizes on the R1 training accounts, grid-searches and trains the
/// calibrated SVM, and produces probabilities for every account.
pub fn stage_r1<S: Scalar>(
    feats: &AccountFeatures<S>,
    split: &SplitAssignment,
    cfg: &CascadeConfig<S>,
    seed: u64,
) -> Result<R1Output<S>, PipelineError> {
    let train = feats.indices_in(&split.r1_train);
    let train_rows: Vec<FeatureVector<S>> = train.iter().map(|&i| feats.raw[i]).collect();
    let standardizer = Standardizer::fit(&train_rows).at(Stage::Standardize)?;
    let standardized: Vec<[S; NUM_FEATURES]> =
        feats.raw.iter().map(|v| standardizer.apply(v)).collect();

    let x: Vec<Vec<S>> = train.iter().map(|&i| standardized[i].to_vec()).collect();
    let y: Vec<Label> = train.iter().map(|&i| feats.labels[i]).collect();
    let svm_seed = seeds::substream(seed, seeds::SVM_FOLDS);
    let grid = grid_search(&x, &y, &cfg.grid, cfg.cv_folds, svm_seed, &cfg.smo).at(Stage::R1)?;
    let hyper = grid.best;
    log::info!(
        "R1 grid best: C={} gamma={} w={}",
        hyper.c,
        hyper.gamma,
        hyper.class_weight_malicious
    );
    let model = fit_calibrated(&x, &y, &hyper, &cfg.smo, cfg.cv_folds, seeds::child(svm_seed, 1))
        .at(Stage::R1)?;
    let oof = oof_probabilities(&x, &y, &hyper, &cfg.smo, cfg.cv_folds, seeds::child(svm_seed, 2))
        .at(Stage::R1)?;

    let mut probs = Vec::with_capacity(feats.raw.len());
    let mut next_train = train.iter().zip(&oof).peekable();
    for (i, row) in standardized.iter().enumerate() {
        match next_train.peek() {
            Some((&t, &p)) if t == i => {
                probs.push(p);
                next_train.next();
            }
            _ => probs.push(model.predict_proba(row).at(Stage::R1)?),
        }
    }
    Ok(R1Output {
        standardizer,
        standardized,
        grid,
        hyper,
        model,
        probs,
    })
}

/// Builds the account graph from first-stage outputs and attaches the
/// second-stage split as node masks.
pub fn stage_graph<S: Scalar>(
    feats: &AccountFeatures<S>,
    r1: &R1Output<S>,
    split: &SplitAssignment,
    rule: &EdgeRule<S>,
) -> Result<AccountGraph<S>, PipelineError> {
    let nodes = (0..feats.addresses.len())
        .map(|i| GraphNode {
            address: feats.addresses[i].clone(),
            features: NodeFeatures {
                standardized: r1.standardized[i],
                p_normal: r1.probs[i].p_normal,
                p_malicious: r1.probs[i].p_malicious,
            },
            label: Some(feats.labels[i]),
        })
        .collect();
    let g = build_graph(nodes, rule).at(Stage::Graph)?;
    log::info!("graph: {} nodes, {} edges", g.len(), g.edges.len());
    assign_masks(g, &split.r2_roles()).at(Stage::Graph)
}

/// Trains one GAT with fixed hyperparameters. Initialization and dropout
/// draw from the `gat-init` and `dropout` sub-streams of `seed`.
pub fn train_gat<S: Scalar>(
    input: &GatInput<S>,
    tuning: &GatTuning,
    heads: usize,
    schedule: &TrainSchedule,
    seed: u64,
) -> Result<FitResult<GatModel<S>, S>, GatError> {
    let hp = tuning.to_hyper::<S>(NODE_DIM, 2);
    hp.validate()?;
    let mut init_rng = seeds::rng(seeds::substream(seed, seeds::GAT_INIT));
    let model = GatModel::init(&hp, heads, &mut init_rng);
    let mut dropout_rng = seeds::rng(seeds::substream(seed, seeds::DROPOUT));
    fit(model, input, &hp, schedule, &mut dropout_rng)
}

/// Second-stage artefacts.
#[derive(Debug, Clone)]
pub struct R2Output<S> {
    pub tuning: GatTuning,
    pub checkpoint: GatCheckpoint<S>,
    pub best_val_f1: f64,
    pub invocations: usize,
    pub bayes: BayesResult,
}

/// Bayesian optimization over GAT hyperparameters; the best trial's model
/// is kept rather than retrained.
pub fn stage_r2<S: Scalar>(
    input: &GatInput<S>,
    cfg: &CascadeConfig<S>,
    seed: u64,
) -> Result<R2Output<S>, GatError> {
    let mut best: Option<(f64, GatTuning, FitResult<GatModel<S>, S>)> = None;
    let (tuning, bayes) = bayes_opt(
        &cfg.search_space,
        cfg.bayes_budget,
        cfg.bayes_init,
        seeds::substream(seed, seeds::BAYES),
        |t| {
            let r = train_gat(input, t, cfg.heads, &cfg.schedule, seed)?;
            let v = r.best_val_f1;
            if best.as_ref().is_none_or(|b| v > b.0) {
                best = Some((v, *t, r));
            }
            Ok(v)
        },
    )?;
    let (_, kept, fit) = best.expect("budget is at least one trial");
    debug_assert_eq!(kept, tuning);
    Ok(R2Output {
        tuning,
        checkpoint: GatCheckpoint {
            hyper: tuning.to_hyper(NODE_DIM, 2),
            seed,
            model: fit.best,
        },
        best_val_f1: fit.best_val_f1,
        invocations: fit.invocations,
        bayes,
    })
}

/// Eval-mode predictions for every node.
pub fn predict_nodes<S: Scalar>(
    model: &GatModel<S>,
    input: &GatInput<S>,
    hp: &crate::gat::GatHyperParams<S>,
) -> Result<Vec<Label>, GatError> {
    // eval mode draws nothing from the generator
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let c = forward(model, &input.features, &input.neighborhoods, hp, Mode::Eval, &mut rng)?;
    Ok((0..c.log_probs.rows)
        .map(|i| predicted_label(c.log_probs.row(i)))
        .collect())
}

/// Metrics on one evaluation set, plus class-rate diagnostics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub metrics: Metrics,
    pub support: usize,
    pub predicted_malicious_rate: f64,
    pub true_malicious_rate: f64,
}

fn evaluate(
    predicted: &[Label],
    truth: &[Label],
    elapsed: f64,
) -> Result<Evaluation, PipelineError> {
    let metrics = compute_metrics(predicted, truth, elapsed).at(Stage::Metrics)?;
    let rate = |v: &[Label]| v.iter().filter(|l| l.is_malicious()).count() as f64 / v.len() as f64;
    Ok(Evaluation {
        metrics,
        support: truth.len(),
        predicted_malicious_rate: rate(predicted),
        true_malicious_rate: rate(truth),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunDetails<S> {
    pub n_accounts: usize,
    pub n_malicious: usize,
    pub r1_train: usize,
    pub r1_test: usize,
    pub r2_train: usize,
    pub r2_val: usize,
    pub r2_test: usize,
    pub svm: SvmHyperParams<S>,
    pub gat: GatTuning,
    pub gat_val_f1: f64,
    pub gat_invocations: usize,
    pub edges: usize,
    pub connected_nodes: usize,
}

/// Wall-clock seconds per stage.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub features_s: f64,
    pub r1_s: f64,
    pub graph_s: f64,
    pub r2_s: f64,
    pub ablation_s: f64,
    pub cascade_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport<S> {
    pub seed: u64,
    pub eval_split: EvalSplit,
    /// SVM alone on the R1 test accounts.
    pub r1: Evaluation,
    /// GAT without first-stage information: probabilities zeroed, no edges.
    pub r2_only: Evaluation,
    pub cascade: Evaluation,
    pub details: RunDetails<S>,
    pub config: CascadeConfig<S>,
    pub timings: Timings,
}

fn section(e: &Evaluation) -> serde_json::Value {
    let m = &e.metrics;
    serde_json::json!({
        "precision": m.precision,
        "recall": m.recall,
        "f1": m.f1,
        "accuracy": m.accuracy,
        "precision_undefined": m.precision_undefined,
        "support": e.support,
        "predicted_malicious_rate": e.predicted_malicious_rate,
        "true_malicious_rate": e.true_malicious_rate,
    })
}

impl<S: Scalar> RunReport<S> {
    /// Deterministic report: the three metric sections, run details and the
    /// configuration. Wall-clock times live in [`RunReport::timings_json`].
    pub fn report_json(&self) -> serde_json::Value {
        serde_json::json!({
            "seed": self.seed,
            "eval_split": self.eval_split,
            "R1": section(&self.r1),
            "R2": section(&self.r2_only),
            "GasTrace": section(&self.cascade),
            "details": self.details,
            "config": self.config,
        })
    }

    /// Table-layout timings: R1, R2 and GasTrace rows plus stage detail.
    pub fn timings_json(&self) -> serde_json::Value {
        serde_json::json!({
            "seed": self.seed,
            "R1": {"wall_time_s": self.r1.metrics.wall_time_s},
            "R2": {"wall_time_s": self.r2_only.metrics.wall_time_s},
            "GasTrace": {"wall_time_s": self.cascade.metrics.wall_time_s},
            "stages": self.timings,
        })
    }
}

/// Everything a cascade run produces.
#[derive(Debug, Clone)]
pub struct CascadeOutput<S> {
    pub report: RunReport<S>,
    pub features: AccountFeatures<S>,
    pub split: SplitAssignment,
    pub r1: R1Output<S>,
    pub graph: AccountGraph<S>,
    pub r2: R2Output<S>,
}

fn eval_mask(feats_len: usize, graph: &AccountGraph<impl Scalar>, split: &SplitAssignment, which: EvalSplit) -> Vec<bool> {
    match which {
        EvalSplit::R2Test => graph.mask(crate::netgraph::Role::Test),
        EvalSplit::R1Test => (0..feats_len)
            .map(|i| split.r1_test.contains(&graph.nodes[i].address))
            .collect(),
    }
}

fn pick(values: &[Label], mask: &[bool]) -> Vec<Label> {
    values
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|(&v, _)| v)
        .collect()
}

/// Runs the whole cascade on a grouped dataset.
pub fn run_cascade<S: Scalar>(
    set: &LabeledAccountSet,
    cfg: &CascadeConfig<S>,
    seed: u64,
) -> Result<CascadeOutput<S>, PipelineError> {
    let start = Instant::now();
    let mut timings = Timings::default();

    let feats = extract_all::<S>(set, cfg.window_secs)?;
    let labels = set.labels.clone();
    let split = assign_splits(&labels, seed).at(Stage::Split)?;
    timings.features_s = start.elapsed().as_secs_f64();

    let t = Instant::now();
    let r1 = stage_r1(&feats, &split, cfg, seed)?;
    timings.r1_s = t.elapsed().as_secs_f64();

    let r1_test = feats.indices_in(&split.r1_test);
    let r1_pred: Vec<Label> = r1_test
        .iter()
        .map(|&i| r1.model.predict_label(&r1.standardized[i]))
        .collect();
    let r1_truth: Vec<Label> = r1_test.iter().map(|&i| feats.labels[i]).collect();
    let r1_eval = evaluate(&r1_pred, &r1_truth, timings.r1_s)?;

    let t = Instant::now();
    let graph = stage_graph(&feats, &r1, &split, &cfg.edge_rule)?;
    timings.graph_s = t.elapsed().as_secs_f64();
    let input = GatInput::from_graph(&graph);
    let r2 = stage_r2(&input, cfg, seed).at(Stage::R2)?;
    timings.r2_s = t.elapsed().as_secs_f64();

    let mask = eval_mask(feats.addresses.len(), &graph, &split, cfg.eval_split);
    let truth = pick(&feats.labels, &mask);
    let hp = r2.checkpoint.hyper;
    let cascade_pred = predict_nodes(&r2.checkpoint.model, &input, &hp).at(Stage::R2)?;

    // R2 alone: no first-stage probabilities, hence no edges either
    let t = Instant::now();
    let blind_input = GatInput::from_graph(&graph.blinded());
    let blind_pred = match cfg.ablation {
        AblationMode::Reuse => predict_nodes(&r2.checkpoint.model, &blind_input, &hp),
        AblationMode::Retrain => train_gat(&blind_input, &r2.tuning, cfg.heads, &cfg.schedule, seed)
            .and_then(|fit| predict_nodes(&fit.best, &blind_input, &hp)),
    }
    .at(Stage::Ablation)?;
    timings.ablation_s = t.elapsed().as_secs_f64();
    timings.cascade_s = start.elapsed().as_secs_f64() - timings.ablation_s;

    let cascade_eval = evaluate(&pick(&cascade_pred, &mask), &truth, timings.cascade_s)?;
    let r2_eval = evaluate(&pick(&blind_pred, &mask), &truth, timings.r2_s)?;

    let degree = graph.degree();
    let details = RunDetails {
        n_accounts: feats.addresses.len(),
        n_malicious: feats.labels.iter().filter(|l| l.is_malicious()).count(),
        r1_train: split.r1_train.len(),
        r1_test: split.r1_test.len(),
        r2_train: split.r2_train.len(),
        r2_val: split.r2_val.len(),
        r2_test: split.r2_test.len(),
        svm: r1.hyper,
        gat: r2.tuning,
        gat_val_f1: r2.best_val_f1,
        gat_invocations: r2.invocations,
        edges: graph.edges.len(),
        connected_nodes: degree.iter().filter(|&&d| d > 0).count(),
    };
    let report = RunReport {
        seed,
        eval_split: cfg.eval_split,
        r1: r1_eval,
        r2_only: r2_eval,
        cascade: cascade_eval,
        details,
        config: cfg.clone(),
        timings,
    };
    Ok(CascadeOutput {
        report,
        features: feats,
        split,
        r1,
        graph,
        r2,
    })
}
