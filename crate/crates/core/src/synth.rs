//! Synthetic labeled transaction corpora.
//!
//! Malicious accounts run sandwich sessions: each attack is a front-run
//! priced a little above an implicit victim and a back-run priced a little
//! below it, mostly with zero value. Normal accounts come in three flavors
//! (casual users, active traders, keeper bots) so that no single feature
//! separates the classes cleanly.

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seeds;
use crate::txmodel::{write_labels, write_transactions, Label, TransactionRecord, TxStatus};

const GWEI: f64 = 1e9;
const WEI_PER_ETH: f64 = 1e18;
const START_TIME: u64 = 1_650_000_000;
const START_BLOCK: u64 = 14_600_000;
const BLOCK_SECS: u64 = 12;
const DAY: u64 = 86_400;

/// Failure probability of a malicious transaction.
pub const MALICIOUS_FAILURE_RATE: f64 = 0.08;
/// Failure probability of a normal transaction.
pub const NORMAL_FAILURE_RATE: f64 = 0.01;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SynthError {
    #[error("invalid synth config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_malicious: usize,
    pub n_normal: usize,
    pub seed: u64,
    pub time_horizon_s: u64,
    pub window_secs: u64,
}

impl SynthConfig {
    pub fn new(n_malicious: usize, n_normal: usize, seed: u64) -> Self {
        Self {
            n_malicious,
            n_normal,
            seed,
            time_horizon_s: 30 * DAY,
            window_secs: crate::features::DEFAULT_WINDOW_SECS,
        }
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        if self.n_malicious < 2 || self.n_normal < 2 {
            return Err(SynthError::InvalidConfig(
                "need at least 2 accounts per class".into(),
            ));
        }
        if self.time_horizon_s < DAY || self.window_secs < 60 {
            return Err(SynthError::InvalidConfig(
                "horizon must be at least one day and window at least 60 s".into(),
            ));
        }
        Ok(())
    }
}

/// Generated corpus as records and labels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SynthCorpus {
    /// Sorted by `(timestamp, tx_hash)`.
    pub transactions: Vec<TransactionRecord>,
    pub labels: BTreeMap<String, Label>,
}

impl SynthCorpus {
    pub fn transactions_csv(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        write_transactions(&mut buf, &self.transactions).expect("write to memory");
        buf
    }

    pub fn labels_csv(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        write_labels(&mut buf, &self.labels).expect("write to memory");
        buf
    }
}

fn hex(rng: &mut ChaCha8Rng, bytes: usize) -> String {
    let mut s = String::with_capacity(2 + 2 * bytes);
    s.push_str("0x");
    for _ in 0..bytes {
        s.push_str(&format!("{:02x}", rng.random::<u8>()));
    }
    s
}

fn eth(x: f64) -> u128 {
    (x * WEI_PER_ETH) as u128
}

/// Prevailing gas price: a daily cycle with multiplicative noise.
fn market_gas_price(t: u64, rng: &mut ChaCha8Rng) -> f64 {
    let phase = (t % DAY) as f64 / DAY as f64 * std::f64::consts::TAU;
    let noise = LogNormal::new(0.0, 0.25).expect("valid").sample(rng);
    30.0 * GWEI * (1.0 + 0.4 * phase.sin()) * noise
}

struct Account<'a> {
    address: String,
    rng: ChaCha8Rng,
    failure_rate: f64,
    out: &'a mut Vec<TransactionRecord>,
    routers: &'a [String],
}

impl Account<'_> {
    fn emit(&mut self, t: u64, to: Option<String>, value: u128, gas_used: u64, gas_price: f64) {
        let failed = self.rng.random::<f64>() < self.failure_rate;
        let tx_hash = hex(&mut self.rng, 32);
        self.out.push(TransactionRecord {
            tx_hash,
            from_addr: self.address.clone(),
            to_addr: to.unwrap_or_default(),
            value_wei: value,
            gas_used: gas_used.max(21_000),
            gas_price_wei: gas_price.max(1.0) as u128,
            timestamp: t,
            block_number: START_BLOCK + (t - START_TIME) / BLOCK_SECS,
            status: if failed { TxStatus::Failed } else { TxStatus::Success },
        });
    }

    fn router(&mut self) -> String {
        let i = self.rng.random_range(0..self.routers.len());
        self.routers[i].clone()
    }

    fn peer(&mut self) -> String {
        hex(&mut self.rng, 20)
    }

    /// Plain transfer or contract call at the prevailing price.
    fn ordinary(&mut self, t: u64, transfer_share: f64, zero_value_call: f64) {
        let price = market_gas_price(t, &mut self.rng) * self.rng.random_range(0.95..1.25);
        if self.rng.random::<f64>() < transfer_share {
            let to = self.peer();
            let v = eth(LogNormal::new(-1.5, 1.5).expect("valid").sample(&mut self.rng));
            self.emit(t, Some(to), v.max(1), 21_000, price);
        } else {
            let to = self.router();
            let v = if self.rng.random::<f64>() < zero_value_call {
                0
            } else {
                eth(LogNormal::new(-3.0, 1.8).expect("valid").sample(&mut self.rng)).max(1)
            };
            let gas = self.rng.random_range(45_000..220_000);
            self.emit(t, Some(to), v, gas, price);
        }
    }

    /// One sandwich: front-run above the victim's price, back-run below it.
    fn sandwich(&mut self, t: u64) {
        let victim = market_gas_price(t, &mut self.rng);
        let router = self.router();
        let front = victim * (1.0 + self.rng.random_range(0.01..=0.10));
        let back = victim * (1.0 - self.rng.random_range(0.01..=0.10));
        let dust = |rng: &mut ChaCha8Rng| {
            if rng.random::<f64>() < 0.75 {
                0
            } else {
                eth(LogNormal::new(-4.0, 1.5).expect("valid").sample(rng)).max(1)
            }
        };
        let v1 = dust(&mut self.rng);
        let v2 = dust(&mut self.rng);
        let g1 = self.rng.random_range(90_000..220_000);
        let g2 = self.rng.random_range(70_000..180_000);
        let lag = self.rng.random_range(0..=BLOCK_SECS * 2);
        self.emit(t, Some(router.clone()), v1, g1, front);
        self.emit(t + lag, Some(router), v2, g2, back);
    }
}

/// Session start times spread over the horizon.
fn session_start(rng: &mut ChaCha8Rng, horizon: u64, span: u64) -> u64 {
    START_TIME + rng.random_range(0..horizon.saturating_sub(span).max(1))
}

fn malicious(acc: &mut Account<'_>, cfg: &SynthConfig) {
    let active = acc.rng.random::<f64>() < 0.6;
    let (sessions, per_session) = if active {
        (acc.rng.random_range(2..=6), (3usize, 10usize))
    } else {
        (acc.rng.random_range(2..=6), (1, 3))
    };
    let span = cfg.window_secs * 2 / 3;
    for _ in 0..sessions {
        let t0 = session_start(&mut acc.rng, cfg.time_horizon_s, span);
        let k = acc.rng.random_range(per_session.0..=per_session.1);
        for _ in 0..k {
            let t = t0 + acc.rng.random_range(0..span);
            acc.sandwich(t);
        }
    }
    // funding and cash-out transfers
    for _ in 0..acc.rng.random_range(0..=4) {
        let t = START_TIME + acc.rng.random_range(0..cfg.time_horizon_s);
        acc.ordinary(t, 0.8, 0.3);
    }
}

fn casual(acc: &mut Account<'_>, cfg: &SynthConfig) {
    let n = acc.rng.random_range(3..=40);
    for _ in 0..n {
        let t = START_TIME + acc.rng.random_range(0..cfg.time_horizon_s);
        if acc.rng.random::<f64>() < 0.005 {
            let price = market_gas_price(t, &mut acc.rng);
            let gas = acc.rng.random_range(500_000..2_000_000);
            acc.emit(t, None, 0, gas, price);
        } else {
            acc.ordinary(t, 0.45, 0.6);
        }
    }
}

fn trader(acc: &mut Account<'_>, cfg: &SynthConfig) {
    let sessions = acc.rng.random_range(3..=20);
    let span = cfg.window_secs * 2 / 3;
    for _ in 0..sessions {
        let t0 = session_start(&mut acc.rng, cfg.time_horizon_s, span);
        for _ in 0..acc.rng.random_range(2..=14) {
            let t = t0 + acc.rng.random_range(0..span);
            acc.ordinary(t, 0.15, 0.5);
        }
    }
}

fn keeper(acc: &mut Account<'_>, cfg: &SynthConfig) {
    let interval = acc.rng.random_range(600..=3600u64);
    let days = acc.rng.random_range(1..=5u64);
    let t0 = session_start(&mut acc.rng, cfg.time_horizon_s, days * DAY);
    let mut t = t0;
    while t < t0 + days * DAY {
        let price = market_gas_price(t, &mut acc.rng);
        let to = acc.router();
        let gas = acc.rng.random_range(60_000..140_000);
        acc.emit(t, Some(to), 0, gas, price);
        t += interval + acc.rng.random_range(0..interval / 4);
    }
}

/// Generates the corpus. Deterministic for a given config.
pub fn generate_corpus(cfg: &SynthConfig) -> Result<SynthCorpus, SynthError> {
    cfg.validate()?;
    let base = seeds::substream(cfg.seed, "synth");
    let mut shared = seeds::rng(seeds::child(base, u64::MAX));
    let routers: Vec<String> = (0..6).map(|_| hex(&mut shared, 20)).collect();

    let mut transactions = Vec::new();
    let mut labels = BTreeMap::new();
    let mut used = BTreeSet::new();
    for i in 0..cfg.n_malicious + cfg.n_normal {
        let mut rng = seeds::rng(seeds::child(base, i as u64));
        let address = loop {
            let a = hex(&mut rng, 20);
            if used.insert(a.clone()) {
                break a;
            }
        };
        let label = if i < cfg.n_malicious {
            Label::Malicious
        } else {
            Label::Normal
        };
        labels.insert(address.clone(), label);
        let mut acc = Account {
            address,
            rng,
            failure_rate: match label {
                Label::Malicious => MALICIOUS_FAILURE_RATE,
                Label::Normal => NORMAL_FAILURE_RATE,
            },
            out: &mut transactions,
            routers: &routers,
        };
        match label {
            Label::Malicious => malicious(&mut acc, cfg),
            Label::Normal => {
                let u = acc.rng.random::<f64>();
                if u < 0.6 {
                    casual(&mut acc, cfg)
                } else if u < 0.9 {
                    trader(&mut acc, cfg)
                } else {
                    keeper(&mut acc, cfg)
                }
            }
        }
    }
    transactions.sort_by(|a, b| {
        a.timestamp
            .cmp(&b.timestamp)
            .then_with(|| a.tx_hash.cmp(&b.tx_hash))
    });
    Ok(SynthCorpus {
        transactions,
        labels,
    })
}

/// Transaction and label CSV bytes.
pub fn generate(cfg: &SynthConfig) -> Result<(Vec<u8>, Vec<u8>), SynthError> {
    let c = generate_corpus(cfg)?;
    Ok((c.transactions_csv(), c.labels_csv()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::txmodel::{parse_labels, parse_transactions};

    #[test]
    fn tiny_config_parses() {
        let (tx, labels) = generate(&SynthConfig::new(2, 2, 7)).unwrap();
        let l = parse_labels(&labels[..]).unwrap();
        assert_eq!(l.len(), 4);
        let t = parse_transactions(&tx[..]).unwrap();
        assert!(!t.is_empty());
    }

    #[test]
    fn same_seed_same_bytes() {
        let cfg = SynthConfig::new(5, 9, 3);
        assert_eq!(generate(&cfg).unwrap(), generate(&cfg).unwrap());
        assert_ne!(generate(&cfg).unwrap(), generate(&SynthConfig::new(5, 9, 4)).unwrap());
    }

    #[test]
    fn rejects_small_classes() {
        assert!(SynthConfig::new(1, 5, 0).validate().is_err());
    }

    #[test]
    fn serialization_is_a_fixed_point() {
        let c = generate_corpus(&SynthConfig::new(4, 6, 11)).unwrap();
        let tx = c.transactions_csv();
        let parsed = parse_transactions(&tx[..]).unwrap();
        let mut again = Vec::new();
        write_transactions(&mut again, &parsed.records).unwrap();
        assert_eq!(again, tx);
        let labels = c.labels_csv();
        let mut again = Vec::new();
        write_labels(&mut again, &parse_labels(&labels[..]).unwrap()).unwrap();
        assert_eq!(again, labels);
    }
}
