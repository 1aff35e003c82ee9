//! Per-account transaction features and z-score standardization.

use std::io::Write;

use thiserror::Error;

use crate::scalar::{fmt_real, Scalar};
use crate::txmodel::{AccountHistory, Label, TxStatus};

/// Number of engineered features per account.
pub const NUM_FEATURES: usize = 13;

/// Default short-term window in seconds.
pub const DEFAULT_WINDOW_SECS: u64 = 3600;

/// Burst threshold for `bursts_10plus`.
const BURST_SIZE: usize = 10;

const WEI_PER_ETH: f64 = 1e18;

pub const FEATURE_NAMES: [&str; NUM_FEATURES] = [
    "avg_gas",
    "avg_gas_fluct",
    "max_gas_fluct",
    "short_term_gas_fluct",
    "avg_gas_value_ratio",
    "total_tx",
    "failure_rate",
    "creation_rate",
    "avg_value_eth",
    "max_value_eth",
    "short_term_max_trades",
    "bursts_10plus",
    "zero_value_ratio",
];

#[derive(Debug, Error, PartialEq, Eq)]
pub enum FeatureError {
    #[error("account history is empty")]
    EmptyHistory,
    #[error("window_secs must be positive")]
    ZeroWindow,
    #[error("need at least 2 rows to fit a standardizer, got {0}")]
    TooFewRows(usize),
}

/// The 13 features of one account, in [`FEATURE_NAMES`] order.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeatureVector<S>(pub [S; NUM_FEATURES]);

impl<S: Scalar> FeatureVector<S> {
    pub fn values(&self) -> &[S; NUM_FEATURES] {
        &self.0
    }

    pub fn get(&self, name: &str) -> Option<S> {
        FEATURE_NAMES.iter().position(|n| *n == name).map(|i| self.0[i])
    }
}

/// Index helpers for the few features referenced by name elsewhere.
pub mod idx {
    pub const AVG_GAS_FLUCT: usize = 1;
    pub const MAX_GAS_FLUCT: usize = 2;
    pub const TOTAL_TX: usize = 5;
    pub const SHORT_TERM_MAX_TRADES: usize = 10;
    pub const BURSTS_10PLUS: usize = 11;
}

fn mean<S: Scalar>(xs: impl ExactSizeIterator<Item = S>) -> S {
    let n = xs.len();
    if n == 0 {
        return S::zero();
    }
    xs.sum::<S>() / S::from_usize_lossy(n)
}

fn pop_std<S: Scalar>(xs: &[S]) -> S {
    let m = mean(xs.iter().copied());
    let var = mean(xs.iter().map(|&x| (x - m) * (x - m)));
    var.sqrt()
}

/// Computes the feature vector of one account.
pub fn extract_features<S: Scalar>(
    history: &AccountHistory,
    window_secs: u64,
) -> Result<FeatureVector<S>, FeatureError> {
    let txs = &history.transactions;
    let n = txs.len();
    if n == 0 {
        return Err(FeatureError::EmptyHistory);
    }
    if window_secs == 0 {
        return Err(FeatureError::ZeroWindow);
    }
    let nf = S::from_usize_lossy(n);
    let gas: Vec<S> = txs.iter().map(|t| S::lit(t.gas_used as f64)).collect();
    let eth: Vec<S> = txs
        .iter()
        .map(|t| S::lit(t.value_wei as f64 / WEI_PER_ETH))
        .collect();
    let times: Vec<u64> = txs.iter().map(|t| t.timestamp).collect();

    let avg_gas = mean(gas.iter().copied());
    let diffs: Vec<S> = gas.windows(2).map(|w| (w[1] - w[0]).abs()).collect();
    let avg_gas_fluct = mean(diffs.iter().copied());
    let max_gas_fluct = diffs.iter().copied().fold(S::zero(), S::max);

    // Per-anchor windows [t_i, t_i + w). Transactions are sorted, so the
    // window at anchor i starts at the first index sharing t_i.
    let mut short_term_gas_fluct = S::zero();
    let mut short_term_max_trades = 0usize;
    let mut bursts = 0usize;
    let mut start = 0usize;
    let mut end = 0usize;
    for i in 0..n {
        if i == 0 || times[i] != times[i - 1] {
            start = i;
        }
        let limit = times[i].saturating_add(window_secs);
        end = end.max(i);
        while end < n && times[end] < limit {
            end += 1;
        }
        let count = end - start;
        short_term_max_trades = short_term_max_trades.max(count);
        if count >= BURST_SIZE {
            bursts += 1;
        }
        if count >= 2 {
            short_term_gas_fluct = short_term_gas_fluct.max(pop_std(&gas[start..end]));
        }
    }

    let ratios: Vec<S> = gas
        .iter()
        .zip(&eth)
        .filter(|(_, &v)| v > S::zero())
        .map(|(&g, &v)| g / v)
        .collect();
    let avg_gas_value_ratio = mean(ratios.into_iter());

    let failures = txs.iter().filter(|t| t.status == TxStatus::Failed).count();
    let zero_value = txs.iter().filter(|t| t.value_wei == 0).count();
    let span_hours = S::lit((times[n - 1] - times[0]) as f64 / 3600.0);
    let creation_rate = nf / span_hours.max(S::one());

    Ok(FeatureVector([
        avg_gas,
        avg_gas_fluct,
        max_gas_fluct,
        short_term_gas_fluct,
        avg_gas_value_ratio,
        nf,
        S::from_usize_lossy(failures) / nf,
        creation_rate,
        mean(eth.iter().copied()),
        eth.iter().copied().fold(S::zero(), S::max),
        S::from_usize_lossy(short_term_max_trades),
        S::from_usize_lossy(bursts),
        S::from_usize_lossy(zero_value) / nf,
    ]))
}

/// Column-wise z-score transform.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardizer<S> {
    pub mean: [S; NUM_FEATURES],
    pub stddev: [S; NUM_FEATURES],
}

impl<S: Scalar> Standardizer<S> {
    /// Fits column means and population standard deviations. Zero
    /// deviations are replaced by one.
    pub fn fit(rows: &[FeatureVector<S>]) -> Result<Self, FeatureError> {
        if rows.len() < 2 {
            return Err(FeatureError::TooFewRows(rows.len()));
        }
        let mut mean = [S::zero(); NUM_FEATURES];
        let mut stddev = [S::zero(); NUM_FEATURES];
        for k in 0..NUM_FEATURES {
            let col: Vec<S> = rows.iter().map(|r| r.0[k]).collect();
            mean[k] = self::mean(col.iter().copied());
            let sd = pop_std(&col);
            stddev[k] = if sd > S::zero() { sd } else { S::one() };
        }
        Ok(Self { mean, stddev })
    }

    pub fn apply(&self, v: &FeatureVector<S>) -> [S; NUM_FEATURES] {
        std::array::from_fn(|k| (v.0[k] - self.mean[k]) / self.stddev[k])
    }

    pub fn invert(&self, z: &[S; NUM_FEATURES]) -> FeatureVector<S> {
        FeatureVector(std::array::from_fn(|k| z[k] * self.stddev[k] + self.mean[k]))
    }
}

/// Writes the `address,label,f1..f13` feature export.
pub fn write_feature_csv<S: Scalar, W: Write>(
    out: &mut W,
    rows: &[(String, Label, FeatureVector<S>)],
) -> std::io::Result<()> {
    write!(out, "address,label")?;
    for k in 1..=NUM_FEATURES {
        write!(out, ",f{k}")?;
    }
    writeln!(out)?;
    for (address, label, fv) in rows {
        write!(out, "{},{}", address, label.code())?;
        for &x in &fv.0 {
            write!(out, ",{}", fmt_real(x))?;
        }
        writeln!(out)?;
    }
    Ok(())
}
