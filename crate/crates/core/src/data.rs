//! Interaction logs, preprocessing, train/evaluation splits and batching.
//!
//! Item ids inside a [`SequenceBatch`] are shifted by one so that 0 can mark
//! padding; everywhere else items are zero-based indices into the catalog.

use std::collections::HashMap;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Interaction {
    pub user: u32,
    pub item: u32,
    pub timestamp: i64,
}

/// Interactions plus dense user/item vocabularies assigned by first
/// appearance.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct InteractionLog {
    pub records: Vec<Interaction>,
    pub users: Vec<String>,
    pub items: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Tsv,
    Csv,
}

impl Format {
    fn separator(self) -> char {
        match self {
            Format::Tsv => '\t',
            Format::Csv => ',',
        }
    }
}

impl FromStr for Format {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tsv" => Ok(Format::Tsv),
            "csv" => Ok(Format::Csv),
            other => Err(Error::invalid("format", format!("expected tsv or csv, got {other:?}"))),
        }
    }
}

#[derive(Default)]
struct Vocab {
    ids: HashMap<String, u32>,
    names: Vec<String>,
}

impl Vocab {
    fn intern(&mut self, name: &str) -> u32 {
        if let Some(&id) = self.ids.get(name) {
            return id;
        }
        let id = self.names.len() as u32;
        self.ids.insert(name.to_owned(), id);
        self.names.push(name.to_owned());
        id
    }
}

impl InteractionLog {
    /// Builds a log from raw `(user, item, timestamp)` triples.
    pub fn from_triples<'a>(triples: impl IntoIterator<Item = (&'a str, &'a str, i64)>) -> Self {
        let mut users = Vocab::default();
        let mut items = Vocab::default();
        let records = triples
            .into_iter()
            .map(|(u, i, timestamp)| Interaction {
                user: users.intern(u),
                item: items.intern(i),
                timestamp,
            })
            .collect();
        Self {
            records,
            users: users.names,
            items: items.names,
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn n_users(&self) -> usize {
        self.users.len()
    }

    pub fn n_items(&self) -> usize {
        self.items.len()
    }

    pub fn stats(&self) -> DatasetStats {
        DatasetStats {
            users: self.n_users(),
            items: self.n_items(),
            interactions: self.len(),
        }
    }

    /// Per-user `(item, timestamp)` histories, sorted by timestamp with ties
    /// kept in input order.
    pub fn user_histories(&self) -> Vec<Vec<(u32, i64)>> {
        let mut hist = vec![Vec::new(); self.n_users()];
        for r in &self.records {
            hist[r.user as usize].push((r.item, r.timestamp));
        }
        for h in &mut hist {
            h.sort_by_key(|&(_, ts)| ts);
        }
        hist
    }

    /// Keeps records passing `keep` and re-compacts both vocabularies in
    /// first-appearance order.
    fn retain(&self, mut keep: impl FnMut(&Interaction) -> bool) -> Self {
        Self::from_triples(self.records.iter().filter(|r| keep(r)).map(|r| {
            (
                self.users[r.user as usize].as_str(),
                self.items[r.item as usize].as_str(),
                r.timestamp,
            )
        }))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DatasetStats {
    pub users: usize,
    pub items: usize,
    pub interactions: usize,
}

impl DatasetStats {
    /// `interactions / (users * items)`.
    pub fn density(&self) -> f64 {
        if self.users == 0 || self.items == 0 {
            return 0.0;
        }
        self.interactions as f64 / (self.users as f64 * self.items as f64)
    }
}

impl fmt::Display for DatasetStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "users={}", self.users)?;
        writeln!(f, "items={}", self.items)?;
        writeln!(f, "interactions={}", self.interactions)?;
        write!(f, "density={:.2}%", 100.0 * self.density())
    }
}

pub fn ingest(path: &Path, format: Format) -> Result<InteractionLog> {
    let file = File::open(path)?;
    ingest_reader(BufReader::new(file), format, &path.display().to_string())
}

/// Parses `user<sep>item<sep>timestamp` lines. Blank lines are skipped and
/// extra trailing columns ignored.
pub fn ingest_reader<R: BufRead>(reader: R, format: Format, name: &str) -> Result<InteractionLog> {
    let sep = format.separator();
    let parse_err = |line: usize, reason: String| Error::Parse {
        path: name.to_owned(),
        line,
        reason,
    };
    let mut rows: Vec<(String, String, i64)> = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line?;
        let line_no = n + 1;
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let mut cols = line.split(sep);
        let (Some(user), Some(item), Some(ts)) = (cols.next(), cols.next(), cols.next()) else {
            return Err(parse_err(line_no, "expected user, item and timestamp columns".into()));
        };
        let ts: i64 = ts
            .trim()
            .parse()
            .map_err(|_| parse_err(line_no, format!("unparseable timestamp {ts:?}")))?;
        if ts < 0 {
            return Err(parse_err(line_no, format!("negative timestamp {ts}")));
        }
        rows.push((user.to_owned(), item.to_owned(), ts));
    }
    Ok(InteractionLog::from_triples(
        rows.iter().map(|(u, i, t)| (u.as_str(), i.as_str(), *t)),
    ))
}

/// Drops items with fewer than `min_item_count` interactions, then users
/// with fewer than `min_user_count` of the remaining ones. One pass each, in
/// that order.
pub fn preprocess(log: &InteractionLog, min_item_count: usize, min_user_count: usize) -> Result<InteractionLog> {
    let mut item_counts = vec![0usize; log.n_items()];
    for r in &log.records {
        item_counts[r.item as usize] += 1;
    }
    let mut user_counts = vec![0usize; log.n_users()];
    for r in &log.records {
        if item_counts[r.item as usize] >= min_item_count {
            user_counts[r.user as usize] += 1;
        }
    }
    let out = log.retain(|r| {
        item_counts[r.item as usize] >= min_item_count && user_counts[r.user as usize] >= min_user_count
    });
    if out.is_empty() {
        return Err(Error::EmptyDataset(format!(
            "no interactions left with min_item_count = {min_item_count} and min_user_count = {min_user_count}; lower the thresholds"
        )));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UserSequence {
    pub user: u32,
    pub items: Vec<u32>,
    pub timestamps: Vec<i64>,
}

/// A held-out next item together with everything the user did before it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EvalCase {
    pub user: u32,
    pub prefix: Vec<u32>,
    pub prefix_timestamps: Vec<i64>,
    pub target: u32,
    pub target_timestamp: i64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitBundle {
    pub train: Vec<UserSequence>,
    /// Second-to-last interaction of every evaluation user.
    pub validation: Vec<EvalCase>,
    /// Last interaction of every evaluation user, same user order as
    /// `validation`.
    pub test: Vec<EvalCase>,
    /// Set for temporal splits only.
    pub threshold_ts: Option<i64>,
    pub users: Vec<String>,
    pub items: Vec<String>,
}

impl SplitBundle {
    pub fn n_items(&self) -> usize {
        self.items.len()
    }
}

fn holdout_cases(user: u32, history: &[(u32, i64)]) -> (EvalCase, EvalCase) {
    let n = history.len();
    let case = |end: usize| EvalCase {
        user,
        prefix: history[..end].iter().map(|h| h.0).collect(),
        prefix_timestamps: history[..end].iter().map(|h| h.1).collect(),
        target: history[end].0,
        target_timestamp: history[end].1,
    };
    (case(n - 2), case(n - 1))
}

fn to_sequence(user: u32, history: &[(u32, i64)]) -> UserSequence {
    UserSequence {
        user,
        items: history.iter().map(|h| h.0).collect(),
        timestamps: history.iter().map(|h| h.1).collect(),
    }
}

/// Nearest-rank quantile: the `ceil(q N)`-th smallest value.
pub fn nearest_rank_quantile(sorted: &[i64], q: f64) -> i64 {
    let n = sorted.len();
    let rank = ((q * n as f64) - 1e-9).ceil().clamp(1.0, n as f64) as usize;
    sorted[rank - 1]
}

/// Global-timestamp split. Users with any interaction after the
/// `quantile` timestamp become evaluation users and leave the training data
/// entirely; their last interaction is the test target and the one before it
/// the validation target. Evaluation users with fewer than 3 interactions are
/// dropped.
pub fn temporal_split(log: &InteractionLog, quantile: f64) -> Result<SplitBundle> {
    if !(quantile > 0.0 && quantile <= 1.0) {
        return Err(Error::invalid("quantile", "must lie in (0, 1]"));
    }
    if log.is_empty() {
        return Err(Error::EmptyDataset("log has no interactions".into()));
    }
    let mut ts: Vec<i64> = log.records.iter().map(|r| r.timestamp).collect();
    ts.sort_unstable();
    let threshold = nearest_rank_quantile(&ts, quantile);

    let mut bundle = SplitBundle {
        train: Vec::new(),
        validation: Vec::new(),
        test: Vec::new(),
        threshold_ts: Some(threshold),
        users: log.users.clone(),
        items: log.items.clone(),
    };
    for (user, history) in log.user_histories().into_iter().enumerate() {
        let user = user as u32;
        if history.iter().any(|&(_, t)| t > threshold) {
            if history.len() >= 3 {
                let (val, test) = holdout_cases(user, &history);
                bundle.validation.push(val);
                bundle.test.push(test);
            }
        } else if history.len() >= 2 {
            bundle.train.push(to_sequence(user, &history));
        }
    }
    if bundle.test.is_empty() {
        return Err(Error::NoTestUsers(format!(
            "no user with at least 3 interactions has activity after t = {threshold}"
        )));
    }
    Ok(bundle)
}

/// Per-user holdout of the last (test) and second-to-last (validation)
/// interactions. Users with fewer than 3 interactions stay in training only.
pub fn leave_one_out_split(log: &InteractionLog) -> Result<SplitBundle> {
    let mut bundle = SplitBundle {
        train: Vec::new(),
        validation: Vec::new(),
        test: Vec::new(),
        threshold_ts: None,
        users: log.users.clone(),
        items: log.items.clone(),
    };
    for (user, history) in log.user_histories().into_iter().enumerate() {
        let user = user as u32;
        let n = history.len();
        let train_len = if n >= 3 {
            let (val, test) = holdout_cases(user, &history);
            bundle.validation.push(val);
            bundle.test.push(test);
            n - 2
        } else {
            n
        };
        if train_len >= 2 {
            bundle.train.push(to_sequence(user, &history[..train_len]));
        }
    }
    if bundle.test.is_empty() {
        return Err(Error::NoTestUsers("no user has at least 3 interactions".into()));
    }
    Ok(bundle)
}

pub const SPLIT_FILE: &str = "split.tsv";
pub const ITEMS_FILE: &str = "items.tsv";
pub const STATS_FILE: &str = "stats.txt";

/// Writes `items.tsv` (`index\titem`) and `split.tsv`
/// (`split\tuser\titem\ttimestamp`, with `split` one of `train`, `prefix`,
/// `validation`, `test`).
pub fn write_manifest(bundle: &SplitBundle, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut items = BufWriter::new(File::create(dir.join(ITEMS_FILE))?);
    for (i, name) in bundle.items.iter().enumerate() {
        writeln!(items, "{i}\t{name}")?;
    }
    items.flush()?;

    let mut out = BufWriter::new(File::create(dir.join(SPLIT_FILE))?);
    let user = |u: u32| &bundle.users[u as usize];
    let item = |i: u32| &bundle.items[i as usize];
    for seq in &bundle.train {
        for (&i, &t) in seq.items.iter().zip(&seq.timestamps) {
            writeln!(out, "train\t{}\t{}\t{t}", user(seq.user), item(i))?;
        }
    }
    for (val, test) in bundle.validation.iter().zip(&bundle.test) {
        debug_assert_eq!(val.user, test.user);
        for (&i, &t) in val.prefix.iter().zip(&val.prefix_timestamps) {
            writeln!(out, "prefix\t{}\t{}\t{t}", user(val.user), item(i))?;
        }
        writeln!(out, "validation\t{}\t{}\t{}", user(val.user), item(val.target), val.target_timestamp)?;
        writeln!(out, "test\t{}\t{}\t{}", user(test.user), item(test.target), test.target_timestamp)?;
    }
    out.flush()?;
    Ok(())
}

/// Reads a directory written by [`write_manifest`].
pub fn read_manifest(dir: &Path) -> Result<SplitBundle> {
    let items_path = dir.join(ITEMS_FILE);
    let name = items_path.display().to_string();
    let mut items = Vec::new();
    let mut item_ids = HashMap::new();
    for (n, line) in BufReader::new(File::open(&items_path)?).lines().enumerate() {
        let line = line?;
        let Some((_, item)) = line.split_once('\t') else {
            return Err(Error::Parse { path: name.clone(), line: n + 1, reason: "expected index and item".into() });
        };
        item_ids.insert(item.to_owned(), items.len() as u32);
        items.push(item.to_owned());
    }

    let split_path = dir.join(SPLIT_FILE);
    let name = split_path.display().to_string();
    let mut users: Vec<String> = Vec::new();
    let mut user_ids: HashMap<String, u32> = HashMap::new();
    let mut train: Vec<UserSequence> = Vec::new();
    let mut train_index: HashMap<u32, usize> = HashMap::new();
    let mut bundle_val = Vec::new();
    let mut bundle_test = Vec::new();
    let mut pending: Option<(u32, Vec<(u32, i64)>)> = None;

    for (n, line) in BufReader::new(File::open(&split_path)?).lines().enumerate() {
        let line = line?;
        let err = |reason: String| Error::Parse { path: name.clone(), line: n + 1, reason };
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 4 {
            return Err(err(format!("expected 4 columns, got {}", cols.len())));
        }
        let uid = *user_ids.entry(cols[1].to_owned()).or_insert_with(|| {
            users.push(cols[1].to_owned());
            users.len() as u32 - 1
        });
        let iid = *item_ids.get(cols[2]).ok_or_else(|| err(format!("unknown item {:?}", cols[2])))?;
        let ts: i64 = cols[3].parse().map_err(|_| err(format!("bad timestamp {:?}", cols[3])))?;
        match cols[0] {
            "train" => {
                let idx = *train_index.entry(uid).or_insert_with(|| {
                    train.push(UserSequence { user: uid, items: Vec::new(), timestamps: Vec::new() });
                    train.len() - 1
                });
                train[idx].items.push(iid);
                train[idx].timestamps.push(ts);
            }
            "prefix" | "validation" => {
                let entry = pending.get_or_insert_with(|| (uid, Vec::new()));
                if entry.0 != uid {
                    return Err(err("evaluation user lines are interleaved".into()));
                }
                entry.1.push((iid, ts));
            }
            "test" => {
                let Some((pu, mut hist)) = pending.take() else {
                    return Err(err("test line without a validation line".into()));
                };
                if pu != uid || hist.len() < 2 {
                    return Err(err("test line does not follow its user's validation line".into()));
                }
                hist.push((iid, ts));
                let (v, t) = holdout_cases(uid, &hist);
                bundle_val.push(v);
                bundle_test.push(t);
            }
            other => return Err(err(format!("unknown split {other:?}"))),
        }
    }
    if pending.is_some() {
        return Err(Error::Parse { path: name, line: 0, reason: "truncated evaluation user at end of file".into() });
    }
    // threshold is the latest training timestamp for temporal splits; it is
    // not needed downstream, so it is not recovered.
    Ok(SplitBundle {
        train,
        validation: bundle_val,
        test: bundle_test,
        threshold_ts: None,
        users,
        items,
    })
}

/// A left-padded `s × l` window of item ids with next-item targets.
///
/// `items` and `targets` are one-based with 0 meaning padding / no target.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SequenceBatch {
    pub users: Vec<u32>,
    pub items: Array2<u32>,
    pub targets: Array2<u32>,
    pub valid_mask: Array2<bool>,
}

impl SequenceBatch {
    pub fn from_sequences(seqs: &[&UserSequence], max_len: usize) -> Self {
        let s = seqs.len();
        let mut items = Array2::zeros((s, max_len));
        let mut targets = Array2::zeros((s, max_len));
        let mut valid_mask = Array2::from_elem((s, max_len), false);
        for (u, seq) in seqs.iter().enumerate() {
            let window = &seq.items[seq.items.len().saturating_sub(max_len)..];
            let offset = max_len - window.len();
            for (k, &item) in window.iter().enumerate() {
                items[[u, offset + k]] = item + 1;
                if let Some(&next) = window.get(k + 1) {
                    targets[[u, offset + k]] = next + 1;
                    valid_mask[[u, offset + k]] = true;
                }
            }
        }
        Self {
            users: seqs.iter().map(|s| s.user).collect(),
            items,
            targets,
            valid_mask,
        }
    }

    pub fn batch_size(&self) -> usize {
        self.items.nrows()
    }

    pub fn max_len(&self) -> usize {
        self.items.ncols()
    }

    /// Zero-based targets in row-major order; masked positions hold 0.
    pub fn flat_targets(&self) -> Vec<usize> {
        self.targets.iter().map(|&t| t.saturating_sub(1) as usize).collect()
    }

    pub fn flat_mask(&self) -> Vec<bool> {
        self.valid_mask.iter().copied().collect()
    }

    pub fn n_valid(&self) -> usize {
        self.valid_mask.iter().filter(|&&v| v).count()
    }

    /// Unpadded items of row `u`, zero-based.
    pub fn unpadded_row(&self, u: usize) -> Vec<u32> {
        self.items.row(u).iter().filter(|&&i| i != 0).map(|&i| i - 1).collect()
    }
}

/// Training batches for one epoch: users shuffled by `(seed, epoch)`,
/// `batch_size` users per batch (the last one may be smaller).
pub struct BatchIter<'a> {
    train: &'a [UserSequence],
    order: Vec<usize>,
    pos: usize,
    batch_size: usize,
    max_len: usize,
}

impl Iterator for BatchIter<'_> {
    type Item = SequenceBatch;

    fn next(&mut self) -> Option<SequenceBatch> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let seqs: Vec<&UserSequence> = self.order[self.pos..end].iter().map(|&i| &self.train[i]).collect();
        self.pos = end;
        Some(SequenceBatch::from_sequences(&seqs, self.max_len))
    }
}

pub fn make_batches(
    train: &[UserSequence],
    batch_size: usize,
    max_len: usize,
    seed: u64,
    epoch: u64,
) -> Result<BatchIter<'_>> {
    if batch_size == 0 || max_len == 0 {
        return Err(Error::invalid("batch_size, max_len", "must be at least 1"));
    }
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    order.shuffle(&mut rng);
    Ok(BatchIter {
        train,
        order,
        pos: 0,
        batch_size,
        max_len,
    })
}
