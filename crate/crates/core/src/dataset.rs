//! Interaction ingest, k-core filtering and leave-one-out sequence splits.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Reserved item index used for left padding.
pub const PAD_ITEM: u32 = u32::MAX;

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RawInteraction {
    pub user: String,
    pub item: String,
    pub timestamp: i64,
}

impl RawInteraction {
    pub fn new(user: impl Into<String>, item: impl Into<String>, timestamp: i64) -> Self {
        Self {
            user: user.into(),
            item: item.into(),
            timestamp,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InteractionFormat {
    Csv,
    JsonLines,
}

impl InteractionFormat {
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("jsonl") | Some("json") => InteractionFormat::JsonLines,
            _ => InteractionFormat::Csv,
        }
    }
}

/// Reads `user,item,timestamp` records in file order, dropping exact
/// duplicate triples.
pub fn load_interactions(path: &Path, format: InteractionFormat) -> Result<Vec<RawInteraction>> {
    let records = match format {
        InteractionFormat::Csv => read_csv(path)?,
        InteractionFormat::JsonLines => read_json_lines(path)?,
    };
    if records.is_empty() {
        return Err(Error::EmptyDataset(format!("{} has no interactions", path.display())));
    }
    let mut seen = HashSet::with_capacity(records.len());
    Ok(records.into_iter().filter(|r| seen.insert(r.clone())).collect())
}

fn read_csv(path: &Path) -> Result<Vec<RawInteraction>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)?;
    let headers = reader.headers()?.clone();
    let column = |name: &str| {
        headers.iter().position(|h| h == name).ok_or_else(|| Error::Parse {
            line: 1,
            message: format!("missing required column `{name}`"),
        })
    };
    let (user_col, item_col, ts_col) = (column("user")?, column("item")?, column("timestamp")?);

    let mut out = Vec::new();
    for (i, row) in reader.records().enumerate() {
        // header is line 1
        let line = i + 2;
        let row = row.map_err(|e| Error::Parse { line, message: e.to_string() })?;
        let field = |col: usize, name: &str| -> Result<String> {
            match row.get(col) {
                Some(v) if !v.is_empty() => Ok(v.to_string()),
                _ => Err(Error::Parse { line, message: format!("missing `{name}`") }),
            }
        };
        let timestamp = field(ts_col, "timestamp")?;
        let timestamp = timestamp.parse::<i64>().map_err(|_| Error::Parse {
            line,
            message: format!("timestamp `{timestamp}` is not an integer"),
        })?;
        out.push(RawInteraction {
            user: field(user_col, "user")?,
            item: field(item_col, "item")?,
            timestamp,
        });
    }
    Ok(out)
}

fn read_json_lines(path: &Path) -> Result<Vec<RawInteraction>> {
    #[derive(Deserialize)]
    struct Row {
        user: serde_json::Value,
        item: serde_json::Value,
        timestamp: i64,
    }
    fn id(v: serde_json::Value) -> Option<String> {
        match v {
            serde_json::Value::String(s) => Some(s),
            serde_json::Value::Number(n) => Some(n.to_string()),
            _ => None,
        }
    }

    let reader = BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let row: Row = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        let (Some(user), Some(item)) = (id(row.user), id(row.item)) else {
            return Err(Error::Parse {
                line: line_no,
                message: "user and item must be strings or numbers".into(),
            });
        };
        out.push(RawInteraction { user, item, timestamp: row.timestamp });
    }
    Ok(out)
}

pub fn write_interactions_csv(path: &Path, records: &[RawInteraction]) -> Result<()> {
    let mut writer = csv::Writer::from_path(path)?;
    writer.write_record(["user", "item", "timestamp"])?;
    for r in records {
        writer.write_record([r.user.as_str(), r.item.as_str(), &r.timestamp.to_string()])?;
    }
    writer.flush()?;
    Ok(())
}

/// Iteratively drops users and items with fewer than `k` interactions until
/// nothing changes. Surviving records keep their input order.
pub fn apply_kcore(records: &[RawInteraction], k: usize) -> Result<Vec<RawInteraction>> {
    if k == 0 {
        return Err(Error::Argument("k-core threshold must be at least 1".into()));
    }
    let mut alive = vec![true; records.len()];
    loop {
        let mut user_counts: HashMap<&str, usize> = HashMap::new();
        let mut item_counts: HashMap<&str, usize> = HashMap::new();
        for (r, _) in records.iter().zip(&alive).filter(|(_, a)| **a) {
            *user_counts.entry(&r.user).or_default() += 1;
            *item_counts.entry(&r.item).or_default() += 1;
        }
        let mut changed = false;
        for (r, a) in records.iter().zip(alive.iter_mut()) {
            if *a && (user_counts[r.user.as_str()] < k || item_counts[r.item.as_str()] < k) {
                *a = false;
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }
    let kept: Vec<RawInteraction> = records
        .iter()
        .zip(&alive)
        .filter(|(_, a)| **a)
        .map(|(r, _)| r.clone())
        .collect();
    if kept.is_empty() {
        return Err(Error::EmptyDataset(format!("no interactions survive {k}-core filtering")));
    }
    Ok(kept)
}

/// Per-user chronological item sequences with dense indices.
///
/// The last item of every sequence is the test target, the one before it
/// the validation target, and everything earlier is training history.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SequenceDataset {
    pub users: Vec<String>,
    pub items: Vec<String>,
    pub sequences: Vec<Vec<u32>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub users: usize,
    pub items: usize,
    pub interactions: usize,
    pub avg_len: f64,
    pub sparsity: f64,
}

/// One next-item prediction instance.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Example {
    pub user: u32,
    pub history: Vec<u32>,
    pub target: u32,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

pub fn build_sequences(records: &[RawInteraction]) -> Result<SequenceDataset> {
    let mut user_index: HashMap<&str, usize> = HashMap::new();
    let mut item_index: HashMap<&str, u32> = HashMap::new();
    let mut users = Vec::new();
    let mut items = Vec::new();
    let mut events: Vec<Vec<(i64, usize, u32)>> = Vec::new();

    for (pos, r) in records.iter().enumerate() {
        let u = *user_index.entry(&r.user).or_insert_with(|| {
            users.push(r.user.clone());
            events.push(Vec::new());
            users.len() - 1
        });
        let i = *item_index.entry(&r.item).or_insert_with(|| {
            items.push(r.item.clone());
            (items.len() - 1) as u32
        });
        events[u].push((r.timestamp, pos, i));
    }
    if users.is_empty() {
        return Err(Error::EmptyDataset("no interactions to build sequences from".into()));
    }

    let mut sequences = Vec::with_capacity(users.len());
    for (u, mut ev) in events.into_iter().enumerate() {
        if ev.len() < 3 {
            return Err(Error::Split { user: users[u].clone(), count: ev.len() });
        }
        // (timestamp, input position) keeps ties in input order
        ev.sort_by_key(|&(t, pos, _)| (t, pos));
        sequences.push(ev.into_iter().map(|(_, _, i)| i).collect());
    }
    Ok(SequenceDataset { users, items, sequences })
}

impl SequenceDataset {
    pub fn num_users(&self) -> usize {
        self.users.len()
    }

    pub fn num_items(&self) -> usize {
        self.items.len()
    }

    pub fn num_interactions(&self) -> usize {
        self.sequences.iter().map(Vec::len).sum()
    }

    pub fn stats(&self) -> DatasetStats {
        let interactions = self.num_interactions();
        let cells = (self.num_users() * self.num_items()) as f64;
        DatasetStats {
            users: self.num_users(),
            items: self.num_items(),
            interactions,
            avg_len: interactions as f64 / self.num_users() as f64,
            sparsity: 1.0 - interactions as f64 / cells,
        }
    }

    pub fn train_sequence(&self, user: usize) -> &[u32] {
        let s = &self.sequences[user];
        &s[..s.len() - 2]
    }

    pub fn valid_target(&self, user: usize) -> u32 {
        let s = &self.sequences[user];
        s[s.len() - 2]
    }

    pub fn test_target(&self, user: usize) -> u32 {
        *self.sequences[user].last().unwrap()
    }

    /// Training instances: every prefix of the training sequence predicts
    /// its next item, histories cut to the most recent `max_len` items.
    pub fn train_examples(&self, max_len: usize) -> Vec<Example> {
        let mut out = Vec::new();
        for u in 0..self.num_users() {
            let seq = self.train_sequence(u);
            for t in 1..seq.len() {
                out.push(Example {
                    user: u as u32,
                    history: tail(&seq[..t], max_len).to_vec(),
                    target: seq[t],
                });
            }
        }
        out
    }

    pub fn eval_examples(&self, split: Split, max_len: usize) -> Vec<Example> {
        (0..self.num_users())
            .map(|u| {
                let s = &self.sequences[u];
                let (history, target) = match split {
                    Split::Valid => (&s[..s.len() - 2], s[s.len() - 2]),
                    Split::Test | Split::Train => (&s[..s.len() - 1], s[s.len() - 1]),
                };
                Example {
                    user: u as u32,
                    history: tail(history, max_len).to_vec(),
                    target,
                }
            })
            .collect()
    }

    /// Number of interactions per item.
    pub fn item_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_items()];
        for s in &self.sequences {
            for &i in s {
                counts[i as usize] += 1;
            }
        }
        counts
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_vec_pretty(&SplitFile::from(self))?)?;
        Ok(())
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        let file: SplitFile = serde_json::from_slice(&fs::read(path)?)?;
        Ok(file.into())
    }
}

fn tail(s: &[u32], n: usize) -> &[u32] {
    &s[s.len().saturating_sub(n)..]
}

/// On-disk split layout with explicit index maps.
#[derive(Serialize, Deserialize)]
struct SplitFile {
    user_index: Vec<String>,
    item_index: Vec<String>,
    stats: DatasetStats,
    users: Vec<UserSplit>,
}

#[derive(Serialize, Deserialize)]
struct UserSplit {
    user: u32,
    train: Vec<u32>,
    valid: u32,
    test: u32,
}

impl From<&SequenceDataset> for SplitFile {
    fn from(d: &SequenceDataset) -> Self {
        SplitFile {
            user_index: d.users.clone(),
            item_index: d.items.clone(),
            stats: d.stats(),
            users: (0..d.num_users())
                .map(|u| UserSplit {
                    user: u as u32,
                    train: d.train_sequence(u).to_vec(),
                    valid: d.valid_target(u),
                    test: d.test_target(u),
                })
                .collect(),
        }
    }
}

impl From<SplitFile> for SequenceDataset {
    fn from(f: SplitFile) -> Self {
        let sequences = f
            .users
            .into_iter()
            .map(|u| {
                let mut s = u.train;
                s.push(u.valid);
                s.push(u.test);
                s
            })
            .collect();
        SequenceDataset {
            users: f.user_index,
            items: f.item_index,
            sequences,
        }
    }
}

/// Keeps the most recent `max_len` items, left-padding with [`PAD_ITEM`].
pub fn truncate_pad(sequence: &[u32], max_len: usize) -> (Vec<u32>, Vec<bool>) {
    let kept = tail(sequence, max_len);
    let pad = max_len - kept.len();
    let mut items = vec![PAD_ITEM; pad];
    items.extend_from_slice(kept);
    let mut mask = vec![false; pad];
    mask.extend(std::iter::repeat_n(true, kept.len()));
    (items, mask)
}
