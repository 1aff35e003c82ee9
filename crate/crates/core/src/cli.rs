//! Command-line interface.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.

use std::ffi::OsString;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use thiserror::Error;

use crate::features::{write_feature_csv, DEFAULT_WINDOW_SECS};
use crate::gat::{save_gat, GatInput, SearchSpace, TrainSchedule};
use crate::netgraph::EdgeRule;
use crate::pipeline::{
    assign_splits, extract_all, run_cascade, stage_graph, stage_r1, stage_r2, ten_run_study,
    write_study_csv, AblationMode, CascadeConfig, EvalSplit, PipelineError, Stage,
};
use crate::svm::{save_svm, ClassWeightSpec, GammaSpec, SmoOptions, SvmError, SvmGrid};
use crate::synth::{generate_corpus, SynthConfig};
use crate::txmodel::{group_by_account, parse_labels, parse_transactions, LabeledAccountSet};
use crate::Real;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "gastrace", version, about = "Cascade SVM + GAT detector for sandwich-attack accounts")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic labeled corpus.
    Synth(SynthArgs),
    /// Extract per-account features and export them.
    Features(DataArgs),
    /// Grid-search and train the first-stage SVM.
    TrainR1(RunArgs),
    /// Build and export the account graph.
    BuildGraph(RunArgs),
    /// Tune and train the second-stage GAT.
    TrainR2(RunArgs),
    /// Run the full cascade and write a report.
    Run(RunArgs),
    /// Repeat the cascade over several seeds.
    Study(StudyArgs),
}

#[derive(Debug, Args, Serialize)]
struct SynthArgs {
    #[arg(long, default_value_t = 50)]
    malicious: usize,
    #[arg(long, default_value_t = 150)]
    normal: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value_t = 30)]
    horizon_days: u64,
    #[arg(long, default_value_t = DEFAULT_WINDOW_SECS)]
    window_secs: u64,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
struct DataArgs {
    /// Transaction CSV [default: <out>/transactions.csv]
    #[arg(long)]
    tx: Option<PathBuf>,
    /// Label CSV [default: <out>/labels.csv]
    #[arg(long)]
    labels: Option<PathBuf>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    #[arg(long, default_value_t = DEFAULT_WINDOW_SECS)]
    window_secs: u64,
    /// Worker threads (0 = all cores).
    #[arg(long, default_value_t = 0)]
    jobs: usize,
}

impl DataArgs {
    fn tx_path(&self) -> PathBuf {
        self.tx.clone().unwrap_or_else(|| self.out.join("transactions.csv"))
    }

    fn labels_path(&self) -> PathBuf {
        self.labels.clone().unwrap_or_else(|| self.out.join("labels.csv"))
    }
}

fn parse_range<T: std::str::FromStr>(s: &str) -> Result<(T, T), String> {
    let (a, b) = s.split_once(',').ok_or("expected LO,HI")?;
    let a = a.trim().parse().map_err(|_| format!("bad bound `{a}`"))?;
    let b = b.trim().parse().map_err(|_| format!("bad bound `{b}`"))?;
    Ok((a, b))
}

fn parse_gamma(s: &str) -> Result<GammaSpec<Real>, String> {
    match s {
        "scale" => Ok(GammaSpec::Scale),
        v => v.parse().map(GammaSpec::Value).map_err(|_| format!("bad gamma `{v}`")),
    }
}

fn parse_weight(s: &str) -> Result<ClassWeightSpec<Real>, String> {
    match s {
        "balanced" => Ok(ClassWeightSpec::Balanced),
        v => v
            .parse()
            .map(ClassWeightSpec::Value)
            .map_err(|_| format!("bad class weight `{v}`")),
    }
}

#[derive(Debug, Args, Serialize)]
struct RunArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Minimum p_malicious on both edge endpoints.
    #[arg(long, default_value_t = 0.5)]
    theta: Real,
    /// Maximum standardized Euclidean distance of an edge.
    #[arg(long, default_value_t = 2.0)]
    tau: Real,
    /// Measure edge distance over the probabilities too, not only the 13 features.
    #[arg(long)]
    distance_includes_probs: bool,
    /// Accounts scored for the cascade and ablation rows: r2test or r1test.
    #[arg(long, default_value = "r2test")]
    eval_split: EvalSplit,
    /// R2-only ablation: `reuse` the cascade GAT or `retrain` on the blinded graph.
    #[arg(long, default_value = "reuse")]
    ablation: AblationMode,
    #[arg(long, default_value_t = 5)]
    cv_folds: usize,
    /// SVM C grid.
    #[arg(long, value_delimiter = ',', default_value = "0.1,1,10,100")]
    svm_c: Vec<Real>,
    /// SVM gamma grid; `scale` means 1/(n_features * var(X)).
    #[arg(long, value_delimiter = ',', value_parser = parse_gamma, default_value = "0.01,0.1,1,scale")]
    #[serde(skip)]
    svm_gamma: Vec<GammaSpec<Real>>,
    /// Malicious class weights; `balanced` means |normal|/|malicious|.
    #[arg(long, value_delimiter = ',', value_parser = parse_weight, default_value = "1,balanced")]
    #[serde(skip)]
    svm_class_weight: Vec<ClassWeightSpec<Real>>,
    #[arg(long, default_value_t = 1e-3)]
    smo_tol: Real,
    #[arg(long, default_value_t = 200)]
    smo_max_passes: usize,
    #[arg(long, default_value_t = 25)]
    bayes_budget: usize,
    #[arg(long, default_value_t = 5)]
    bayes_init: usize,
    /// Training-function invocations (m).
    #[arg(long, default_value_t = 10)]
    invocations: usize,
    /// Epochs per invocation (n).
    #[arg(long, default_value_t = 50)]
    epochs: usize,
    #[arg(long, default_value_t = 3)]
    patience: usize,
    #[arg(long, default_value_t = crate::gat::DEFAULT_HEADS)]
    heads: usize,
    #[arg(long, value_parser = parse_range::<usize>, default_value = "4,64")]
    #[serde(skip)]
    nhid_range: (usize, usize),
    #[arg(long, value_parser = parse_range::<f64>, default_value = "1e-4,1e-1")]
    #[serde(skip)]
    lr_range: (f64, f64),
    #[arg(long, value_parser = parse_range::<f64>, default_value = "0,0.7")]
    #[serde(skip)]
    dropout_range: (f64, f64),
    #[arg(long, value_parser = parse_range::<f64>, default_value = "1e-6,1e-2")]
    #[serde(skip)]
    wd_range: (f64, f64),
}

impl RunArgs {
    fn config(&self) -> CascadeConfig<Real> {
        CascadeConfig {
            window_secs: self.data.window_secs,
            grid: SvmGrid {
                c: self.svm_c.clone(),
                gamma: self.svm_gamma.clone(),
                class_weight: self.svm_class_weight.clone(),
            },
            cv_folds: self.cv_folds,
            smo: SmoOptions {
                tol: self.smo_tol,
                max_passes: self.smo_max_passes,
            },
            edge_rule: EdgeRule {
                prob_threshold: self.theta,
                distance_threshold: self.tau,
                distance_includes_probs: self.distance_includes_probs,
            },
            search_space: SearchSpace {
                nhid: self.nhid_range,
                lr: self.lr_range,
                dropout: self.dropout_range,
                weight_decay: self.wd_range,
            },
            bayes_budget: self.bayes_budget,
            bayes_init: self.bayes_init,
            schedule: TrainSchedule {
                m: self.invocations,
                n: self.epochs,
                patience: self.patience,
            },
            heads: self.heads,
            eval_split: self.eval_split,
            ablation: self.ablation,
        }
    }
}

#[derive(Debug, Args, Serialize)]
struct StudyArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Comma-separated distinct seeds.
    #[arg(long, value_delimiter = ',', default_value = "1,2,3,4,5,6,7,8,9,10")]
    seeds: Vec<u64>,
}

#[derive(Debug, Error)]
enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{stage} stage failed: {path}: {source}")]
    Io {
        stage: &'static str,
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{0}")]
    Data(String),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
}

impl CliError {
    fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Pipeline(e) if e.is_numerical() => EXIT_NUMERICAL,
            _ => EXIT_DATA,
        }
    }
}

fn io_at(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    io_in("output", path)
}

fn io_in<'a>(stage: &'static str, path: &'a Path) -> impl FnOnce(std::io::Error) -> CliError + 'a {
    move |source| CliError::Io {
        stage,
        path: path.to_path_buf(),
        source,
    }
}

/// Writes `path` through a buffered writer.
fn write_file(
    path: &Path,
    body: impl FnOnce(&mut BufWriter<File>) -> std::io::Result<()>,
) -> Result<(), CliError> {
    let file = File::create(path).map_err(io_at(path))?;
    let mut w = BufWriter::new(file);
    body(&mut w).and_then(|_| w.flush()).map_err(io_at(path))?;
    log::info!("wrote {}", path.display());
    Ok(())
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), CliError> {
    write_file(path, |w| {
        serde_json::to_writer_pretty(&mut *w, value).map_err(std::io::Error::other)?;
        writeln!(w)
    })
}

fn prepare_out(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(io_at(dir))
}

fn ingest(data: &DataArgs) -> Result<LabeledAccountSet, CliError> {
    let tx_path = data.tx_path();
    let labels_path = data.labels_path();
    for p in [&tx_path, &labels_path] {
        if !p.is_file() {
            return Err(CliError::Io {
                stage: "ingest",
                path: p.clone(),
                source: std::io::Error::new(std::io::ErrorKind::NotFound, "input file not found"),
            });
        }
    }
    let stage = |path: &Path, e: crate::txmodel::TxError| {
        CliError::Data(format!("ingest stage failed: {}: {e}", path.display()))
    };
    let txs = parse_transactions(File::open(&tx_path).map_err(io_in("ingest", &tx_path))?)
        .map_err(|e| stage(&tx_path, e))?;
    let labels = parse_labels(File::open(&labels_path).map_err(io_in("ingest", &labels_path))?)
        .map_err(|e| stage(&labels_path, e))?;
    let grouping = group_by_account(&txs, &labels).map_err(|e| stage(&tx_path, e))?;
    if grouping.labels_without_transactions > 0 {
        log::warn!(
            "{} labeled accounts have no outgoing transactions and are skipped",
            grouping.labels_without_transactions
        );
    }
    Ok(grouping.set)
}

#[derive(Serialize)]
struct Snapshot<'a, A: Serialize> {
    command: &'a str,
    version: &'a str,
    args: &'a A,
    config: Option<CascadeConfig<Real>>,
}

fn snapshot<A: Serialize>(
    out: &Path,
    command: &str,
    args: &A,
    config: Option<CascadeConfig<Real>>,
) -> Result<(), CliError> {
    write_json(
        &out.join("config.json"),
        &Snapshot {
            command,
            version: env!("CARGO_PKG_VERSION"),
            args,
            config,
        },
    )
}

fn cmd_synth(a: &SynthArgs) -> Result<(), CliError> {
    let cfg = SynthConfig {
        n_malicious: a.malicious,
        n_normal: a.normal,
        seed: a.seed,
        time_horizon_s: a.horizon_days * 86_400,
        window_secs: a.window_secs,
    };
    let corpus = generate_corpus(&cfg).map_err(|e| CliError::Usage(e.to_string()))?;
    prepare_out(&a.out)?;
    let tx = a.out.join("transactions.csv");
    let labels = a.out.join("labels.csv");
    write_file(&tx, |w| w.write_all(&corpus.transactions_csv()))?;
    write_file(&labels, |w| w.write_all(&corpus.labels_csv()))?;
    write_json(&a.out.join("synth_config.json"), &cfg)?;
    println!(
        "wrote {} transactions for {} accounts to {}",
        corpus.transactions.len(),
        corpus.labels.len(),
        a.out.display()
    );
    Ok(())
}

fn cmd_features(a: &DataArgs) -> Result<(), CliError> {
    let set = ingest(a)?;
    prepare_out(&a.out)?;
    let feats = extract_all::<Real>(&set, a.window_secs)?;
    let rows: Vec<_> = (0..feats.addresses.len())
        .map(|i| (feats.addresses[i].clone(), feats.labels[i], feats.raw[i]))
        .collect();
    write_file(&a.out.join("features.csv"), |w| write_feature_csv(w, &rows))?;
    snapshot(&a.out, "features", a, None)
}

/// Runs the shared prefix of the cascade up to the graph.
fn prefix(
    a: &RunArgs,
    cfg: &CascadeConfig<Real>,
) -> Result<
    (
        crate::pipeline::AccountFeatures<Real>,
        crate::pipeline::R1Output<Real>,
        crate::netgraph::AccountGraph<Real>,
    ),
    CliError,
> {
    let set = ingest(&a.data)?;
    let feats = extract_all::<Real>(&set, cfg.window_secs)?;
    let split = assign_splits(&set.labels, a.seed)
        .map_err(|e| PipelineError::new(Stage::Split, e))?;
    let r1 = stage_r1(&feats, &split, cfg, a.seed)?;
    let graph = stage_graph(&feats, &r1, &split, &cfg.edge_rule)?;
    Ok((feats, r1, graph))
}

fn save_r1(out: &Path, model: &crate::svm::SvmModel<Real>) -> Result<(), CliError> {
    let path = out.join("model_r1.txt");
    write_file(&path, |w| {
        save_svm(model, w).map_err(|e| match e {
            SvmError::Io(e) => e,
            other => std::io::Error::other(other.to_string()),
        })
    })
}

fn save_graph(out: &Path, g: &crate::netgraph::AccountGraph<Real>) -> Result<(), CliError> {
    write_file(&out.join("graph_nodes.csv"), |w| g.write_nodes_csv(w))?;
    write_file(&out.join("graph_edges.csv"), |w| g.write_edges_csv(w))
}

fn save_r2(out: &Path, ck: &crate::gat::GatCheckpoint<Real>) -> Result<(), CliError> {
    write_file(&out.join("model_r2.txt"), |w| {
        save_gat(ck, w).map_err(|e| std::io::Error::other(e.to_string()))
    })
}

fn cmd_train_r1(a: &RunArgs) -> Result<(), CliError> {
    let cfg = a.config();
    prepare_out(&a.data.out)?;
    let (feats, r1, _) = prefix(a, &cfg)?;
    save_r1(&a.data.out, &r1.model)?;
    write_file(&a.data.out.join("r1_probabilities.csv"), |w| {
        writeln!(w, "address,label,p_normal,p_malicious")?;
        for i in 0..feats.addresses.len() {
            writeln!(
                w,
                "{},{},{},{}",
                feats.addresses[i],
                feats.labels[i].code(),
                crate::scalar::fmt_real(r1.probs[i].p_normal),
                crate::scalar::fmt_real(r1.probs[i].p_malicious)
            )?;
        }
        Ok(())
    })?;
    write_json(&a.data.out.join("r1_standardizer.json"), &serde_json::json!({
        "mean": r1.standardizer.mean,
        "stddev": r1.standardizer.stddev,
    }))?;
    snapshot(&a.data.out, "train-r1", a, Some(cfg))
}

fn cmd_build_graph(a: &RunArgs) -> Result<(), CliError> {
    let cfg = a.config();
    prepare_out(&a.data.out)?;
    let (_, _, graph) = prefix(a, &cfg)?;
    save_graph(&a.data.out, &graph)?;
    snapshot(&a.data.out, "build-graph", a, Some(cfg))
}

fn cmd_train_r2(a: &RunArgs) -> Result<(), CliError> {
    let cfg = a.config();
    prepare_out(&a.data.out)?;
    let (_, _, graph) = prefix(a, &cfg)?;
    let r2 = stage_r2(&GatInput::from_graph(&graph), &cfg, a.seed)
        .map_err(|e| PipelineError::new(Stage::R2, e))?;
    save_r2(&a.data.out, &r2.checkpoint)?;
    println!("best validation F1 {:.4} with {:?}", r2.best_val_f1, r2.tuning);
    snapshot(&a.data.out, "train-r2", a, Some(cfg))
}

fn cmd_run(a: &RunArgs) -> Result<(), CliError> {
    let cfg = a.config();
    prepare_out(&a.data.out)?;
    let set = ingest(&a.data)?;
    let out = run_cascade(&set, &cfg, a.seed)?;
    let dir = &a.data.out;
    write_json(&dir.join("report.json"), &out.report.report_json())?;
    write_json(&dir.join("timings.json"), &out.report.timings_json())?;
    save_r1(dir, &out.r1.model)?;
    save_r2(dir, &out.r2.checkpoint)?;
    save_graph(dir, &out.graph)?;
    snapshot(dir, "run", a, Some(cfg))?;
    let r = &out.report;
    println!("{:<9} {:>9} {:>9} {:>9} {:>9} {:>9}", "", "precision", "recall", "f1", "accuracy", "time_s");
    for (name, e) in [("R1", &r.r1), ("R2", &r.r2_only), ("GasTrace", &r.cascade)] {
        let m = &e.metrics;
        println!(
            "{:<9} {:>9.4} {:>9.4} {:>9.4} {:>9.4} {:>9.2}",
            name, m.precision, m.recall, m.f1, m.accuracy, m.wall_time_s
        );
    }
    Ok(())
}

fn cmd_study(a: &StudyArgs) -> Result<(), CliError> {
    let cfg = a.run.config();
    let dir = &a.run.data.out;
    prepare_out(dir)?;
    let set = ingest(&a.run.data)?;
    let study = ten_run_study(&set, &cfg, &a.seeds)?;
    write_file(&dir.join("study.csv"), |w| write_study_csv(&study.rows, w))?;
    write_json(&dir.join("study_summary.json"), &study.summaries)?;
    let timings: Vec<_> = study.reports.iter().map(|r| r.timings_json()).collect();
    write_json(&dir.join("study_timings.json"), &timings)?;
    snapshot(dir, "study", a, Some(cfg))?;
    for s in &study.summaries {
        println!(
            "{:<9} mean f1 {:.4}  std precision {:.4} recall {:.4} f1 {:.4}",
            s.model, s.mean.f1, s.std.precision, s.std.recall, s.std.f1
        );
    }
    Ok(())
}

fn init_logging() {
    let env = env_logger::Env::new().filter_or("GASTRACE_LOG", "warn");
    // a second call (e.g. from tests) keeps the first logger
    let _ = env_logger::Builder::from_env(env).try_init();
}

fn jobs_of(c: &Command) -> usize {
    match c {
        Command::Synth(_) => 0,
        Command::Features(a) => a.jobs,
        Command::TrainR1(a) | Command::BuildGraph(a) | Command::TrainR2(a) | Command::Run(a) => {
            a.data.jobs
        }
        Command::Study(a) => a.run.data.jobs,
    }
}

fn dispatch(c: &Command) -> Result<(), CliError> {
    match c {
        Command::Synth(a) => cmd_synth(a),
        Command::Features(a) => cmd_features(a),
        Command::TrainR1(a) => cmd_train_r1(a),
        Command::BuildGraph(a) => cmd_build_graph(a),
        Command::TrainR2(a) => cmd_train_r2(a),
        Command::Run(a) => cmd_run(a),
        Command::Study(a) => cmd_study(a),
    }
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    init_logging();
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let result = match jobs_of(&cli.command) {
        0 => dispatch(&cli.command),
        n => match rayon::ThreadPoolBuilder::new().num_threads(n).build() {
            Ok(pool) => pool.install(|| dispatch(&cli.command)),
            Err(e) => Err(CliError::Usage(format!("--jobs {n}: {e}"))),
        },
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
