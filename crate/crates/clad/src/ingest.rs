//! Dataset ingestion: labeled log loading, windowing, and splits.
//!
//! Raw corpora arrive as line-oriented byte files with one of two label
//! conventions: an inline first-token marker (`-` means normal, anything
//! else is an alert tag) or a separate session table (`key,label` CSV keyed
//! by an id embedded in each line). Entries become fixed windows through one
//! of three strategies — back-to-back sliding blocks, fixed-interval global
//! sampling, or session grouping — and a window is anomalous iff any of its
//! entries is. Splits are chronological by default, with the validation set
//! carved from the tail of the training pool so the test range stays
//! untouched.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::compressor::{LogEntry, LogWindow};
use crate::error::{Error, Result};

/// How entry labels are encoded alongside the raw log.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LabelAdapter {
    /// Each line starts with a marker token: `-` for normal, anything else
    /// for anomalous. The payload is everything after the first space.
    InlinePrefix,
    /// Lines are raw payloads; a separate `key,label` table maps the session
    /// id embedded in each line to its label.
    SessionTable,
}

/// Windowing strategy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Windowing {
    /// Consecutive non-overlapping blocks of `window_size` entries.
    Sliding,
    /// Blocks of `window_size` entries separated by a fixed skip, sized to
    /// yield `target_window_count` windows.
    FixedInterval,
    /// One window per distinct session id, entries in original order.
    Session,
}

/// Split strategy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SplitStrategy {
    /// Order windows by id; earliest windows train, latest test.
    Chronological,
    /// Seeded permutation, then the same cut points.
    Random,
}

/// Everything needed to turn one raw corpus into labeled window splits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub name: String,
    pub entry_file: PathBuf,
    #[serde(default)]
    pub label_file: Option<PathBuf>,
    pub label_adapter: LabelAdapter,
    pub windowing: Windowing,
    #[serde(default = "default_window_size")]
    pub window_size: usize,
    #[serde(default)]
    pub target_window_count: Option<usize>,
    /// Regex extracting the session id from a line (first match is the key).
    #[serde(default)]
    pub session_id_pattern: Option<String>,
    #[serde(default = "default_split")]
    pub split: SplitStrategy,
    /// Train share of the train/test cut, e.g. 0.8 for 8:2.
    #[serde(default = "default_train_fraction")]
    pub train_fraction: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_window_size() -> usize {
    100
}

fn default_split() -> SplitStrategy {
    SplitStrategy::Chronological
}

fn default_train_fraction() -> f64 {
    0.8
}

impl DatasetSpec {
    /// Check the parameter invariants that do not require touching files.
    pub fn validate(&self) -> Result<()> {
        if self.window_size < 1 {
            return Err(Error::Ingest("window_size must be ≥ 1".into()));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::Ingest(format!(
                "train_fraction must lie in (0,1), got {}",
                self.train_fraction
            )));
        }
        if self.windowing == Windowing::FixedInterval && self.target_window_count.is_none() {
            return Err(Error::Ingest(
                "fixed-interval windowing needs target_window_count".into(),
            ));
        }
        if self.windowing == Windowing::Session && self.session_id_pattern.is_none() {
            return Err(Error::Ingest("session windowing needs session_id_pattern".into()));
        }
        if self.label_adapter == LabelAdapter::SessionTable {
            if self.label_file.is_none() {
                return Err(Error::Ingest("session-table labels need label_file".into()));
            }
            if self.session_id_pattern.is_none() {
                return Err(Error::Ingest(
                    "session-table labels need session_id_pattern".into(),
                ));
            }
        }
        Ok(())
    }
}

/// A set of labeled windows plus its anomaly census.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabeledSequenceSet {
    pub windows: Vec<LogWindow>,
    pub anomaly_count: usize,
}

impl LabeledSequenceSet {
    /// Wrap windows, counting label-1 members.
    pub fn new(windows: Vec<LogWindow>) -> Self {
        let anomaly_count = windows.iter().filter(|w| w.label == 1).count();
        LabeledSequenceSet { windows, anomaly_count }
    }

    pub fn len(&self) -> usize {
        self.windows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.windows.is_empty()
    }
}

/// The three disjoint splits of a windowed corpus.
#[derive(Debug, Clone)]
pub struct SplitSets {
    pub train: LabeledSequenceSet,
    pub validation: LabeledSequenceSet,
    pub test: LabeledSequenceSet,
}

/// Load one labeled entry per input line, in file order.
pub fn load_labeled_entries(spec: &DatasetSpec) -> Result<Vec<(LogEntry, u8)>> {
    spec.validate()?;
    let lines = read_lines(&spec.entry_file)?;
    match spec.label_adapter {
        LabelAdapter::InlinePrefix => parse_inline_prefix(&lines),
        LabelAdapter::SessionTable => {
            let label_file = spec.label_file.as_ref().expect("validated above");
            let table = read_session_table(label_file)?;
            let pattern = compile_session_pattern(spec)?;
            lines
                .into_iter()
                .enumerate()
                .map(|(i, line)| {
                    let key = extract_key(&pattern, &line, i)?;
                    let Some(&label) = table.get(&key) else {
                        return Err(Error::Ingest(format!(
                            "line {}: session id {:?} not in label table",
                            i + 1,
                            String::from_utf8_lossy(&key)
                        )));
                    };
                    Ok((LogEntry::new(line, i as u64)?, label))
                })
                .collect()
        }
    }
}

/// Compile the dataset's session id pattern as a byte-level regex.
pub fn compile_session_pattern(spec: &DatasetSpec) -> Result<regex::bytes::Regex> {
    let pattern = spec
        .session_id_pattern
        .as_deref()
        .ok_or_else(|| Error::Ingest("session_id_pattern is not set".into()))?;
    regex::bytes::Regex::new(pattern)
        .map_err(|e| Error::Ingest(format!("bad session_id_pattern: {}", e)))
}

fn read_lines(path: &PathBuf) -> Result<Vec<Vec<u8>>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = BufReader::new(file);
    let mut lines = Vec::new();
    let mut buf = Vec::new();
    loop {
        buf.clear();
        let n = reader.read_until(b'\n', &mut buf).map_err(|e| Error::io(path, e))?;
        if n == 0 {
            break;
        }
        if buf.last() == Some(&b'\n') {
            buf.pop();
        }
        if buf.last() == Some(&b'\r') {
            buf.pop();
        }
        lines.push(buf.clone());
    }
    Ok(lines)
}

fn parse_inline_prefix(lines: &[Vec<u8>]) -> Result<Vec<(LogEntry, u8)>> {
    lines
        .iter()
        .enumerate()
        .map(|(i, line)| {
            if line.is_empty() {
                return Err(Error::Ingest(format!("line {}: empty, no label marker", i + 1)));
            }
            let (marker, payload) = match line.iter().position(|&b| b == b' ') {
                Some(pos) => (&line[..pos], &line[pos + 1..]),
                None => (&line[..], &[] as &[u8]),
            };
            let label = u8::from(marker != b"-");
            Ok((LogEntry::new(payload.to_vec(), i as u64)?, label))
        })
        .collect()
}

fn read_session_table(path: &PathBuf) -> Result<HashMap<Vec<u8>, u8>> {
    let lines = read_lines(path)?;
    let mut table = HashMap::new();
    for (i, line) in lines.iter().enumerate() {
        if line.is_empty() {
            continue;
        }
        let Some(comma) = line.iter().position(|&b| b == b',') else {
            return Err(Error::Ingest(format!(
                "{}: line {}: expected key,label",
                path.display(),
                i + 1
            )));
        };
        let key = line[..comma].to_vec();
        let value = &line[comma + 1..];
        let label = match value {
            b"0" | b"Normal" | b"normal" => 0,
            b"1" | b"Anomaly" | b"anomaly" => 1,
            _ if i == 0 => continue, // header row, e.g. "BlockId,Label"
            _ => {
                return Err(Error::Ingest(format!(
                    "{}: line {}: unknown label {:?}",
                    path.display(),
                    i + 1,
                    String::from_utf8_lossy(value)
                )))
            }
        };
        table.insert(key, label);
    }
    Ok(table)
}

fn extract_key(pattern: &regex::bytes::Regex, line: &[u8], index: usize) -> Result<Vec<u8>> {
    pattern
        .find(line)
        .map(|m| m.as_bytes().to_vec())
        .ok_or_else(|| {
            Error::Ingest(format!(
                "line {}: no session id matching /{}/",
                index + 1,
                pattern.as_str()
            ))
        })
}

fn make_window(id: u64, block: &[(LogEntry, u8)]) -> Result<LogWindow> {
    let label = label_window(block.iter().map(|(_, l)| *l));
    let entries = block.iter().map(|(e, _)| e.clone()).collect();
    LogWindow::new(id, entries, label)
}

/// A window is anomalous iff any of its entries is.
pub fn label_window(entry_labels: impl IntoIterator<Item = u8>) -> u8 {
    u8::from(entry_labels.into_iter().any(|l| l == 1))
}

/// Consecutive non-overlapping blocks of `w` entries; a trailing partial
/// block is discarded.
pub fn sliding_windows(entries: &[(LogEntry, u8)], w: usize) -> Result<LabeledSequenceSet> {
    if w < 1 {
        return Err(Error::Ingest("window size must be ≥ 1".into()));
    }
    let windows = entries
        .chunks_exact(w)
        .enumerate()
        .map(|(i, block)| make_window(i as u64, block))
        .collect::<Result<Vec<_>>>()?;
    Ok(LabeledSequenceSet::new(windows))
}

/// Collect a block of `w` entries, skip a fixed step, repeat until `target`
/// windows exist. The step is `floor((total − target·w) / target)`, spreading
/// the windows evenly over the corpus.
pub fn fixed_interval_windows(
    entries: &[(LogEntry, u8)],
    w: usize,
    target: usize,
) -> Result<LabeledSequenceSet> {
    if w < 1 {
        return Err(Error::Ingest("window size must be ≥ 1".into()));
    }
    if target < 1 {
        return Err(Error::Ingest("target window count must be ≥ 1".into()));
    }
    let total = entries.len();
    if target * w > total {
        return Err(Error::Ingest(format!(
            "cannot draw {} windows of {} from {} entries",
            target, w, total
        )));
    }
    let step = (total - target * w) / target;
    let windows = (0..target)
        .map(|i| {
            let start = i * (w + step);
            make_window(i as u64, &entries[start..start + w])
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(LabeledSequenceSet::new(windows))
}

/// One window per distinct session key, keyed by the pattern's first match
/// in each line; window ids follow first appearance.
pub fn session_windows(
    entries: &[(LogEntry, u8)],
    id_pattern: &regex::bytes::Regex,
) -> Result<LabeledSequenceSet> {
    let mut order: Vec<Vec<(LogEntry, u8)>> = Vec::new();
    let mut index: HashMap<Vec<u8>, usize> = HashMap::new();
    for (i, (entry, label)) in entries.iter().enumerate() {
        let key = extract_key(id_pattern, entry.payload(), i)?;
        let slot = *index.entry(key).or_insert_with(|| {
            order.push(Vec::new());
            order.len() - 1
        });
        order[slot].push((entry.clone(), *label));
    }
    let windows = order
        .iter()
        .enumerate()
        .map(|(i, block)| make_window(i as u64, block))
        .collect::<Result<Vec<_>>>()?;
    Ok(LabeledSequenceSet::new(windows))
}

/// Apply the dataset's windowing strategy to labeled entries.
pub fn window_entries(spec: &DatasetSpec, entries: &[(LogEntry, u8)]) -> Result<LabeledSequenceSet> {
    match spec.windowing {
        Windowing::Sliding => sliding_windows(entries, spec.window_size),
        Windowing::FixedInterval => {
            let target = spec
                .target_window_count
                .ok_or_else(|| Error::Ingest("fixed-interval needs target_window_count".into()))?;
            fixed_interval_windows(entries, spec.window_size, target)
        }
        Windowing::Session => {
            let pattern = compile_session_pattern(spec)?;
            session_windows(entries, &pattern)
        }
    }
}

/// Sizes of the train/validation/test cut for `n` windows at `train_fraction`.
///
/// Test takes `n − floor(f·n)` windows (the exact complement of the train
/// share); validation takes a tenth of the remaining pool, never less than
/// one window.
pub fn split_counts(n: usize, train_fraction: f64) -> (usize, usize, usize) {
    let test = n - (train_fraction * n as f64).floor() as usize;
    let pool = n - test;
    let val = (((pool as f64) * 0.1).floor() as usize).max(1);
    let train = pool.saturating_sub(val);
    (train, val, test)
}

/// Partition windows into train/validation/test.
///
/// Chronological ordering is by window id; the random strategy applies a
/// seeded permutation first and then the identical cut points, so equal seeds
/// give equal partitions.
pub fn split(set: &LabeledSequenceSet, spec: &DatasetSpec) -> Result<SplitSets> {
    let n = set.windows.len();
    if n < 5 {
        return Err(Error::Ingest(format!("need at least 5 windows to split, got {}", n)));
    }
    let mut ordered: Vec<LogWindow> = set.windows.clone();
    match spec.split {
        SplitStrategy::Chronological => ordered.sort_by_key(|w| w.window_id),
        SplitStrategy::Random => {
            ordered.sort_by_key(|w| w.window_id);
            let mut rng = ChaCha20Rng::seed_from_u64(spec.seed);
            ordered.shuffle(&mut rng);
        }
    }
    let (train_n, val_n, _test_n) = split_counts(n, spec.train_fraction);
    if train_n == 0 {
        return Err(Error::Ingest(format!(
            "split leaves no training windows (n={}, train_fraction={})",
            n, spec.train_fraction
        )));
    }
    let test = ordered.split_off(train_n + val_n);
    let validation = ordered.split_off(train_n);
    Ok(SplitSets {
        train: LabeledSequenceSet::new(ordered),
        validation: LabeledSequenceSet::new(validation),
        test: LabeledSequenceSet::new(test),
    })
}
