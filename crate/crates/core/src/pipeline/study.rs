//! Repeated cascade runs over several seeds, with min-max normalized
//! metrics and per-model spread.

use std::collections::BTreeSet;
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::cascade::{run_cascade, CascadeConfig, PipelineError, RunReport, Stage, StageError};
use crate::metrics::Metrics;
use crate::scalar::Scalar;
use crate::txmodel::LabeledAccountSet;

pub const DEFAULT_STUDY_SEEDS: [u64; 10] = [1, 2, 3, 4, 5, 6, 7, 8, 9, 10];

pub const STUDY_HEADER: &str = "seed,model,precision,recall,f1,precision_norm,recall_norm,f1_norm";

/// Min-max scaling to `[0, 1]`; a zero range maps every value to 0.5.
pub fn min_max_normalize(xs: &[f64]) -> Vec<f64> {
    let lo = xs.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    xs.iter()
        .map(|&x| if hi > lo { (x - lo) / (hi - lo) } else { 0.5 })
        .collect()
}

/// Population standard deviation.
pub fn population_std(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    (xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricTriple {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl MetricTriple {
    fn as_array(&self) -> [f64; 3] {
        [self.precision, self.recall, self.f1]
    }

    fn from_array(a: [f64; 3]) -> Self {
        Self {
            precision: a[0],
            recall: a[1],
            f1: a[2],
        }
    }

    fn of(m: &Metrics) -> Self {
        Self {
            precision: m.precision,
            recall: m.recall,
            f1: m.f1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyRow {
    pub seed: u64,
    pub model: String,
    pub raw: MetricTriple,
    pub normalized: MetricTriple,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudySummary {
    pub model: String,
    pub mean: MetricTriple,
    pub std: MetricTriple,
}

#[derive(Debug, Clone)]
pub struct StudyResult<S> {
    pub reports: Vec<RunReport<S>>,
    pub rows: Vec<StudyRow>,
    pub summaries: Vec<StudySummary>,
}

/// The models compared by the study.
pub const STUDY_MODELS: [&str; 2] = ["R1", "GasTrace"];

/// Builds normalized rows and spread statistics from per-seed raw metrics,
/// `per_model[m][s]` being model `m` on seed `seeds[s]`.
pub fn summarize(seeds: &[u64], per_model: &[(String, Vec<MetricTriple>)]) -> (Vec<StudyRow>, Vec<StudySummary>) {
    let mut rows = Vec::new();
    let mut summaries = Vec::new();
    for (name, runs) in per_model {
        let cols: Vec<Vec<f64>> = (0..3)
            .map(|k| runs.iter().map(|r| r.as_array()[k]).collect())
            .collect();
        let norm: Vec<Vec<f64>> = cols.iter().map(|c| min_max_normalize(c)).collect();
        for (s, &seed) in seeds.iter().enumerate() {
            rows.push(StudyRow {
                seed,
                model: name.clone(),
                raw: runs[s],
                normalized: MetricTriple::from_array([norm[0][s], norm[1][s], norm[2][s]]),
            });
        }
        let mean = |c: &Vec<f64>| c.iter().sum::<f64>() / c.len().max(1) as f64;
        summaries.push(StudySummary {
            model: name.clone(),
            mean: MetricTriple::from_array([mean(&cols[0]), mean(&cols[1]), mean(&cols[2])]),
            std: MetricTriple::from_array([
                population_std(&cols[0]),
                population_std(&cols[1]),
                population_std(&cols[2]),
            ]),
        });
    }
    rows.sort_by(|a, b| a.seed.cmp(&b.seed).then(model_rank(&a.model).cmp(&model_rank(&b.model))));
    (rows, summaries)
}

fn model_rank(m: &str) -> usize {
    STUDY_MODELS.iter().position(|x| *x == m).unwrap_or(usize::MAX)
}

/// Runs the cascade once per seed (seeds in parallel) and tabulates R1-alone
/// against the cascade.
pub fn ten_run_study<S: Scalar>(
    set: &LabeledAccountSet,
    cfg: &CascadeConfig<S>,
    seeds: &[u64],
) -> Result<StudyResult<S>, PipelineError> {
    let distinct: BTreeSet<u64> = seeds.iter().copied().collect();
    if seeds.is_empty() || distinct.len() != seeds.len() {
        return Err(PipelineError::new(
            Stage::Study,
            StageError::Invalid(format!("seeds must be distinct and non-empty: {seeds:?}")),
        ));
    }
    let reports = seeds
        .par_iter()
        .map(|&seed| run_cascade(set, cfg, seed).map(|o| o.report))
        .collect::<Result<Vec<_>, _>>()?;
    let per_model = vec![
        (
            STUDY_MODELS[0].to_string(),
            reports.iter().map(|r| MetricTriple::of(&r.r1.metrics)).collect(),
        ),
        (
            STUDY_MODELS[1].to_string(),
            reports.iter().map(|r| MetricTriple::of(&r.cascade.metrics)).collect(),
        ),
    ];
    let (rows, summaries) = summarize(seeds, &per_model);
    Ok(StudyResult {
        reports,
        rows,
        summaries,
    })
}

pub fn write_study_csv<W: Write>(rows: &[StudyRow], out: &mut W) -> std::io::Result<()> {
    writeln!(out, "{STUDY_HEADER}")?;
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.seed,
            r.model,
            r.raw.precision,
            r.raw.recall,
            r.raw.f1,
            r.normalized.precision,
            r.normalized.recall,
            r.normalized.f1
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn min_max_examples() {
        let n = min_max_normalize(&[0.8, 0.9, 1.0]);
        assert!((n[0] - 0.0).abs() < 1e-12 && (n[1] - 0.5).abs() < 1e-12 && (n[2] - 1.0).abs() < 1e-12);
        assert_eq!(min_max_normalize(&[0.7, 0.7, 0.7]), vec![0.5; 3]);
    }

    #[test]
    fn population_std_matches_definition() {
        assert_eq!(population_std(&[2.0, 4.0, 4.0, 4.0, 5.0, 5.0, 7.0, 9.0]), 2.0);
        assert_eq!(population_std(&[3.0]), 0.0);
    }

    #[test]
    fn rows_are_ordered_by_seed_then_model() {
        let t = |v: f64| MetricTriple { precision: v, recall: v, f1: v };
        let per_model = vec![
            ("R1".to_string(), vec![t(0.5), t(0.7)]),
            ("GasTrace".to_string(), vec![t(0.9), t(0.9)]),
        ];
        let (rows, sums) = summarize(&[3, 8], &per_model);
        let order: Vec<(u64, &str)> = rows.iter().map(|r| (r.seed, r.model.as_str())).collect();
        assert_eq!(order, vec![(3, "R1"), (3, "GasTrace"), (8, "R1"), (8, "GasTrace")]);
        assert_eq!(rows[1].normalized.f1, 0.5);
        assert_eq!(rows[2].normalized.f1, 1.0);
        assert!((sums[0].std.f1 - 0.1).abs() < 1e-12);
        let mut buf = Vec::new();
        write_study_csv(&rows, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with(STUDY_HEADER));
        assert_eq!(text.lines().count(), 5);
    }
}
