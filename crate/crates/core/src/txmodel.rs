//! Transaction and label ingestion.
//!
//! Parses the plain-text transaction and label CSV files, validates them,
//! and groups outgoing transactions into per-account histories sorted by
//! `(timestamp, tx_hash)`.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Exact header of the transaction CSV.
pub const TX_HEADER: &str =
    "tx_hash,from_addr,to_addr,value_wei,gas_used,gas_price_wei,timestamp,block_number,status";
/// Exact header of the label CSV.
pub const LABEL_HEADER: &str = "address,label";

#[derive(Debug, Error)]
pub enum TxError {
    #[error("input is not valid UTF-8 or could not be read: {0}")]
    Io(String),
    #[error("missing or unexpected header: expected `{expected}`, found `{found}`")]
    BadHeader { expected: &'static str, found: String },
    #[error("malformed row at line {line}: {reason}")]
    MalformedRow { line: u64, reason: String },
    #[error("duplicate tx_hash {0}")]
    DuplicateTxHash(String),
    #[error("duplicate label for address {0}")]
    DuplicateLabel(String),
    #[error("no labeled account has any outgoing transaction")]
    NoLabeledAccounts,
    #[error("class {0} has no accounts")]
    ClassMissing(Label),
}

/// Account class. Malicious is the positive class everywhere.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Label {
    Malicious,
    Normal,
}

impl Label {
    /// `+1` for malicious, `-1` for normal.
    pub fn sign(self) -> f64 {
        match self {
            Label::Malicious => 1.0,
            Label::Normal => -1.0,
        }
    }

    pub fn is_malicious(self) -> bool {
        self == Label::Malicious
    }

    /// Label CSV encoding.
    pub fn code(self) -> u8 {
        match self {
            Label::Malicious => 1,
            Label::Normal => 0,
        }
    }

    pub fn from_code(s: &str) -> Option<Label> {
        match s {
            "1" => Some(Label::Malicious),
            "0" => Some(Label::Normal),
            _ => None,
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Label::Malicious => f.write_str("malicious"),
            Label::Normal => f.write_str("normal"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TxStatus {
    Success,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TransactionRecord {
    pub tx_hash: String,
    pub from_addr: String,
    /// Empty for contract creation.
    pub to_addr: String,
    pub value_wei: u128,
    pub gas_used: u64,
    pub gas_price_wei: u128,
    pub timestamp: u64,
    pub block_number: u64,
    pub status: TxStatus,
}

impl TransactionRecord {
    fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.tx_hash,
            self.from_addr,
            self.to_addr,
            self.value_wei,
            self.gas_used,
            self.gas_price_wei,
            self.timestamp,
            self.block_number,
            match self.status {
                TxStatus::Success => 1,
                TxStatus::Failed => 0,
            }
        )
    }
}

/// Parsed transactions in file order.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TransactionSet {
    pub records: Vec<TransactionRecord>,
}

impl TransactionSet {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AccountHistory {
    pub address: String,
    /// Outgoing transactions sorted by `(timestamp, tx_hash)`.
    pub transactions: Vec<TransactionRecord>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabeledAccountSet {
    /// Sorted by address.
    pub accounts: Vec<AccountHistory>,
    pub labels: BTreeMap<String, Label>,
}

impl LabeledAccountSet {
    pub fn label_of(&self, address: &str) -> Label {
        self.labels[address]
    }

    pub fn class_counts(&self) -> (usize, usize) {
        let mal = self.labels.values().filter(|l| l.is_malicious()).count();
        (mal, self.labels.len() - mal)
    }
}

/// Result of [`group_by_account`].
#[derive(Debug, Clone)]
pub struct Grouping {
    pub set: LabeledAccountSet,
    /// Transactions whose sender has no label.
    pub dropped_unlabeled: usize,
    /// Labeled addresses that sent no transaction.
    pub labels_without_transactions: usize,
}

fn is_hex_of_len(s: &str, bytes: usize) -> bool {
    s.len() == 2 + 2 * bytes
        && (s.starts_with("0x") || s.starts_with("0X"))
        && s[2..].bytes().all(|b| b.is_ascii_hexdigit())
}

/// Validates a 20-byte `0x` address and returns it lower-cased.
pub fn normalize_address(s: &str) -> Option<String> {
    let s = s.trim();
    is_hex_of_len(s, 20).then(|| s.to_ascii_lowercase())
}

fn read_all<R: Read>(mut input: R) -> Result<String, TxError> {
    let mut buf = String::new();
    input
        .read_to_string(&mut buf)
        .map_err(|e| TxError::Io(e.to_string()))?;
    Ok(buf)
}

fn reader(text: &str) -> csv::Reader<&[u8]> {
    csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(text.as_bytes())
}

fn check_header(
    rec: Option<Result<csv::StringRecord, csv::Error>>,
    expected: &'static str,
) -> Result<(), TxError> {
    let found = match rec {
        Some(Ok(r)) => r.iter().collect::<Vec<_>>().join(","),
        Some(Err(e)) => return Err(TxError::Io(e.to_string())),
        None => String::new(),
    };
    if found.trim_start_matches('\u{feff}') != expected {
        return Err(TxError::BadHeader { expected, found });
    }
    Ok(())
}

fn field<'a>(rec: &'a csv::StringRecord, i: usize) -> &'a str {
    rec.get(i).unwrap_or("")
}

fn parse_num<T: std::str::FromStr>(s: &str, name: &str, line: u64) -> Result<T, TxError> {
    s.parse().map_err(|_| TxError::MalformedRow {
        line,
        reason: format!("{name} `{s}` is not an unsigned integer"),
    })
}

/// Parses the transaction CSV. Row order is preserved.
pub fn parse_transactions<R: Read>(input: R) -> Result<TransactionSet, TxError> {
    let text = read_all(input)?;
    let mut rdr = reader(&text);
    let mut rows = rdr.records();
    check_header(rows.next(), TX_HEADER)?;

    let mut seen = HashSet::new();
    let mut records = Vec::new();
    for row in rows {
        let row = row.map_err(|e| TxError::Io(e.to_string()))?;
        let line = row.position().map(|p| p.line()).unwrap_or(0);
        if row.len() == 1 && field(&row, 0).is_empty() {
            continue;
        }
        if row.len() != 9 {
            return Err(TxError::MalformedRow {
                line,
                reason: format!("expected 9 fields, found {}", row.len()),
            });
        }
        let bad = |reason: String| TxError::MalformedRow { line, reason };

        let tx_hash = field(&row, 0);
        if !is_hex_of_len(tx_hash, 32) {
            return Err(bad(format!("tx_hash `{tx_hash}` is not a 32-byte hex string")));
        }
        let from_addr = normalize_address(field(&row, 1))
            .ok_or_else(|| bad(format!("from_addr `{}` is not a 20-byte hex string", field(&row, 1))))?;
        let to_raw = field(&row, 2);
        let to_addr = if to_raw.is_empty() {
            String::new()
        } else {
            normalize_address(to_raw)
                .ok_or_else(|| bad(format!("to_addr `{to_raw}` is not a 20-byte hex string")))?
        };
        let value_wei = parse_num(field(&row, 3), "value_wei", line)?;
        let gas_used: u64 = parse_num(field(&row, 4), "gas_used", line)?;
        let gas_price_wei = parse_num(field(&row, 5), "gas_price_wei", line)?;
        let timestamp: u64 = parse_num(field(&row, 6), "timestamp", line)?;
        let block_number = parse_num(field(&row, 7), "block_number", line)?;
        let status = match field(&row, 8) {
            "1" => TxStatus::Success,
            "0" => TxStatus::Failed,
            other => return Err(bad(format!("status `{other}` is not 0 or 1"))),
        };
        if gas_used == 0 {
            return Err(bad("gas_used must be positive".into()));
        }
        if timestamp == 0 {
            return Err(bad("timestamp must be positive".into()));
        }

        let tx_hash = tx_hash.to_ascii_lowercase();
        if !seen.insert(tx_hash.clone()) {
            return Err(TxError::DuplicateTxHash(tx_hash));
        }
        records.push(TransactionRecord {
            tx_hash,
            from_addr,
            to_addr,
            value_wei,
            gas_used,
            gas_price_wei,
            timestamp,
            block_number,
            status,
        });
    }
    Ok(TransactionSet { records })
}

/// Parses the label CSV into an address-ordered map.
pub fn parse_labels<R: Read>(input: R) -> Result<BTreeMap<String, Label>, TxError> {
    let text = read_all(input)?;
    let mut rdr = reader(&text);
    let mut rows = rdr.records();
    check_header(rows.next(), LABEL_HEADER)?;

    let mut labels = BTreeMap::new();
    for row in rows {
        let row = row.map_err(|e| TxError::Io(e.to_string()))?;
        let line = row.position().map(|p| p.line()).unwrap_or(0);
        if row.len() == 1 && field(&row, 0).is_empty() {
            continue;
        }
        if row.len() != 2 {
            return Err(TxError::MalformedRow {
                line,
                reason: format!("expected 2 fields, found {}", row.len()),
            });
        }
        let address = normalize_address(field(&row, 0)).ok_or_else(|| TxError::MalformedRow {
            line,
            reason: format!("address `{}` is not a 20-byte hex string", field(&row, 0)),
        })?;
        let label = Label::from_code(field(&row, 1)).ok_or_else(|| TxError::MalformedRow {
            line,
            reason: format!("label `{}` is not 0 or 1", field(&row, 1)),
        })?;
        if labels.insert(address.clone(), label).is_some() {
            return Err(TxError::DuplicateLabel(address));
        }
    }
    Ok(labels)
}

/// Groups outgoing transactions by labeled sender.
pub fn group_by_account(
    txs: &TransactionSet,
    labels: &BTreeMap<String, Label>,
) -> Result<Grouping, TxError> {
    let mut by_sender: BTreeMap<&str, Vec<TransactionRecord>> = BTreeMap::new();
    let mut dropped = 0usize;
    for tx in &txs.records {
        if labels.contains_key(&tx.from_addr) {
            by_sender.entry(&tx.from_addr).or_default().push(tx.clone());
        } else {
            dropped += 1;
        }
    }
    if dropped > 0 {
        log::warn!("dropped {dropped} transactions from unlabeled senders");
    }
    if by_sender.is_empty() {
        return Err(TxError::NoLabeledAccounts);
    }

    let mut accounts = Vec::with_capacity(by_sender.len());
    let mut kept = BTreeMap::new();
    for (address, mut transactions) in by_sender {
        transactions.sort_by(|a, b| {
            a.timestamp
                .cmp(&b.timestamp)
                .then_with(|| a.tx_hash.cmp(&b.tx_hash))
        });
        kept.insert(address.to_string(), labels[address]);
        accounts.push(AccountHistory {
            address: address.to_string(),
            transactions,
        });
    }
    let labels_without_transactions = labels.len() - kept.len();

    let set = LabeledAccountSet {
        accounts,
        labels: kept,
    };
    let (mal, norm) = set.class_counts();
    if mal == 0 {
        return Err(TxError::ClassMissing(Label::Malicious));
    }
    if norm == 0 {
        return Err(TxError::ClassMissing(Label::Normal));
    }
    Ok(Grouping {
        set,
        dropped_unlabeled: dropped,
        labels_without_transactions,
    })
}

/// Writes transactions in the exact CSV layout read by [`parse_transactions`].
pub fn write_transactions<W: Write>(out: &mut W, txs: &[TransactionRecord]) -> std::io::Result<()> {
    writeln!(out, "{TX_HEADER}")?;
    for tx in txs {
        writeln!(out, "{}", tx.csv_line())?;
    }
    Ok(())
}

/// Writes labels in the exact CSV layout read by [`parse_labels`].
pub fn write_labels<'a, W: Write>(
    out: &mut W,
    labels: impl IntoIterator<Item = (&'a String, &'a Label)>,
) -> std::io::Result<()> {
    writeln!(out, "{LABEL_HEADER}")?;
    for (addr, label) in labels {
        writeln!(out, "{},{}", addr, label.code())?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn hash(i: u32) -> String {
        format!("0x{:064x}", i)
    }

    fn addr(i: u32) -> String {
        format!("0x{:040x}", i)
    }

    fn row(h: u32, from: u32, ts: u64) -> String {
        format!("{},{},{},0,21000,1000000000,{ts},100,1", hash(h), addr(from), addr(999))
    }

    fn doc(rows: &[String]) -> String {
        let mut s = format!("{TX_HEADER}\n");
        for r in rows {
            s.push_str(r);
            s.push('\n');
        }
        s
    }

    #[test]
    fn header_only_is_empty_set() {
        let set = parse_transactions(doc(&[]).as_bytes()).unwrap();
        assert!(set.is_empty());
    }

    #[test]
    fn single_row_success() {
        let set = parse_transactions(doc(&[row(1, 1, 5)]).as_bytes()).unwrap();
        assert_eq!(set.len(), 1);
        assert_eq!(set.records[0].status, TxStatus::Success);
    }

    #[test]
    fn duplicate_hash_is_rejected() {
        let rows: Vec<_> = [1, 2, 3, 2, 5].iter().map(|&h| row(h, 1, 10)).collect();
        // oracle: set-membership scan for the first repeated hash
        let mut seen = HashSet::new();
        let dup = [1, 2, 3, 2, 5].into_iter().find(|h| !seen.insert(*h)).unwrap();
        match parse_transactions(doc(&rows).as_bytes()) {
            Err(TxError::DuplicateTxHash(h)) => assert_eq!(h, hash(dup)),
            other => panic!("expected duplicate error, got {other:?}"),
        }
    }

    #[test]
    fn malformed_row_reports_line() {
        let mut rows = vec![row(1, 1, 5)];
        rows.push(format!("{},{},,abc,21000,1,5,1,1", hash(2), addr(1)));
        match parse_transactions(doc(&rows).as_bytes()) {
            Err(TxError::MalformedRow { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn bad_header_and_zero_gas() {
        assert!(matches!(
            parse_transactions("a,b\n".as_bytes()),
            Err(TxError::BadHeader { .. })
        ));
        let r = format!("{},{},,0,0,1,5,1,1", hash(1), addr(1));
        assert!(matches!(
            parse_transactions(doc(&[r]).as_bytes()),
            Err(TxError::MalformedRow { .. })
        ));
    }

    fn labels(pairs: &[(u32, Label)]) -> BTreeMap<String, Label> {
        pairs.iter().map(|&(a, l)| (addr(a), l)).collect()
    }

    #[test]
    fn single_account_is_sorted() {
        let txs = parse_transactions(doc(&[row(1, 1, 30), row(2, 1, 10), row(3, 1, 20)]).as_bytes())
            .unwrap();
        let l = labels(&[(1, Label::Malicious), (2, Label::Normal)]);
        // class check needs both classes among accounts with transactions
        let err = group_by_account(&txs, &l).unwrap_err();
        assert!(matches!(err, TxError::ClassMissing(Label::Normal)));

        let mut rows = vec![row(1, 1, 30), row(2, 1, 10), row(3, 1, 20)];
        rows.push(row(4, 2, 1));
        let txs = parse_transactions(doc(&rows).as_bytes()).unwrap();
        let g = group_by_account(&txs, &l).unwrap();
        let h = &g.set.accounts[0];
        assert_eq!(h.transactions.len(), 3);
        let ts: Vec<_> = h.transactions.iter().map(|t| t.timestamp).collect();
        assert_eq!(ts, vec![10, 20, 30]);
    }

    #[test]
    fn interleaved_accounts_match_sort_then_partition() {
        let rows = vec![
            row(5, 2, 40),
            row(1, 1, 30),
            row(7, 2, 10),
            row(3, 1, 30),
            row(2, 1, 5),
            row(9, 3, 1),
        ];
        let txs = parse_transactions(doc(&rows).as_bytes()).unwrap();
        let l = labels(&[(1, Label::Malicious), (2, Label::Normal)]);
        let g = group_by_account(&txs, &l).unwrap();
        assert_eq!(g.dropped_unlabeled, 1);

        // oracle: sort everything, then partition by sender
        let mut all = txs.records.clone();
        all.sort_by(|a, b| (a.timestamp, &a.tx_hash).cmp(&(b.timestamp, &b.tx_hash)));
        for h in &g.set.accounts {
            let expect: Vec<_> = all.iter().filter(|t| t.from_addr == h.address).cloned().collect();
            assert_eq!(h.transactions, expect);
        }
        let total: usize = g.set.accounts.iter().map(|a| a.transactions.len()).sum();
        assert_eq!(total + g.dropped_unlabeled, txs.len());
    }

    #[test]
    fn no_matching_transactions() {
        let txs = parse_transactions(doc(&[row(1, 7, 30)]).as_bytes()).unwrap();
        let l = labels(&[(1, Label::Malicious), (2, Label::Normal)]);
        assert!(matches!(group_by_account(&txs, &l), Err(TxError::NoLabeledAccounts)));
    }

    #[test]
    fn labels_parse_and_reject_duplicates() {
        let text = format!("{LABEL_HEADER}\n{},1\n{},0\n", addr(1), addr(2));
        let l = parse_labels(text.as_bytes()).unwrap();
        assert_eq!(l[&addr(1)], Label::Malicious);
        let text = format!("{LABEL_HEADER}\n{},1\n{},0\n", addr(1), addr(1));
        assert!(matches!(parse_labels(text.as_bytes()), Err(TxError::DuplicateLabel(_))));
    }

    #[test]
    fn serialize_is_fixed_point() {
        let rows = vec![row(1, 1, 30), format!("{},{},,5,7,9,11,13,0", hash(2), addr(3))];
        let text = doc(&rows);
        let set = parse_transactions(text.as_bytes()).unwrap();
        let mut out = Vec::new();
        write_transactions(&mut out, &set.records).unwrap();
        assert_eq!(String::from_utf8(out).unwrap(), text);
    }
}
