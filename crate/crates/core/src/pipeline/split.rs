//! Stratified account splits for the two stages.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::netgraph::Role;
use crate::seeds;
use crate::txmodel::Label;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SplitError {
    #[error("class {label} has {count} accounts; at least 2 are required")]
    ClassMissing { label: Label, count: usize },
}

/// Address sets of both splits. Each stage's sets partition all accounts.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitAssignment {
    pub r1_train: BTreeSet<String>,
    pub r1_test: BTreeSet<String>,
    pub r2_train: BTreeSet<String>,
    pub r2_val: BTreeSet<String>,
    pub r2_test: BTreeSet<String>,
}

impl SplitAssignment {
    /// Role of every account in the second-stage split.
    pub fn r2_roles(&self) -> BTreeMap<String, Role> {
        let mut m = BTreeMap::new();
        for (set, role) in [
            (&self.r2_train, Role::Train),
            (&self.r2_val, Role::Val),
            (&self.r2_test, Role::Test),
        ] {
            for a in set {
                m.insert(a.clone(), role);
            }
        }
        m
    }
}

/// Shuffles each class and cuts it into consecutive parts whose sizes are
/// `floor(class_size * tenths / 10)`; the last part takes the remainder.
fn stratified_parts(
    labels: &BTreeMap<String, Label>,
    tenths: &[usize],
    seed: u64,
) -> Result<Vec<BTreeSet<String>>, SplitError> {
    let mut parts = vec![BTreeSet::new(); tenths.len() + 1];
    let mut rng = seeds::rng(seed);
    for class in [Label::Malicious, Label::Normal] {
        let mut members: Vec<&String> = labels
            .iter()
            .filter(|(_, &l)| l == class)
            .map(|(a, _)| a)
            .collect();
        if members.len() < 2 {
            return Err(SplitError::ClassMissing {
                label: class,
                count: members.len(),
            });
        }
        members.shuffle(&mut rng);
        let n = members.len();
        let mut start = 0;
        for (p, &t) in tenths.iter().enumerate() {
            let take = n * t / 10;
            parts[p].extend(members[start..start + take].iter().map(|a| (*a).clone()));
            start += take;
        }
        parts[tenths.len()].extend(members[start..].iter().map(|a| (*a).clone()));
    }
    Ok(parts)
}

/// 70/30 train/test split, stratified by class.
pub fn split_r1(
    labels: &BTreeMap<String, Label>,
    seed: u64,
) -> Result<(BTreeSet<String>, BTreeSet<String>), SplitError> {
    let mut parts = stratified_parts(labels, &[3], seed)?;
    let train = parts.pop().unwrap_or_default();
    let test = parts.pop().unwrap_or_default();
    Ok((train, test))
}

/// 60/20/20 train/val/test split, stratified by class.
pub fn split_r2(
    labels: &BTreeMap<String, Label>,
    seed: u64,
) -> Result<(BTreeSet<String>, BTreeSet<String>, BTreeSet<String>), SplitError> {
    let mut parts = stratified_parts(labels, &[2, 2], seed)?;
    let train = parts.pop().unwrap_or_default();
    let test = parts.pop().unwrap_or_default();
    let val = parts.pop().unwrap_or_default();
    Ok((train, val, test))
}

/// Draws both splits independently from the `split` sub-stream of `seed`.
pub fn assign_splits(
    labels: &BTreeMap<String, Label>,
    seed: u64,
) -> Result<SplitAssignment, SplitError> {
    let base = seeds::substream(seed, seeds::SPLIT);
    let (r1_train, r1_test) = split_r1(labels, seeds::child(base, 1))?;
    let (r2_train, r2_val, r2_test) = split_r2(labels, seeds::child(base, 2))?;
    Ok(SplitAssignment {
        r1_train,
        r1_test,
        r2_train,
        r2_val,
        r2_test,
    })
}
