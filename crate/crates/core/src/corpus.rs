//! Timestamped multi-label corpora: loading, chronological splits, domain
//! windows and a synthetic drifting generator.

use std::borrow::Borrow;
use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::rng;

/// Integer period key (a year, or the index of a multi-year bucket).
pub type Period = i64;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub id: String,
    pub timestamp: Period,
    /// Token id to strictly positive count.
    pub token_counts: BTreeMap<usize, u32>,
    pub labels: BTreeSet<usize>,
}

impl Document {
    pub fn total_tokens(&self) -> u64 {
        self.token_counts.values().map(|&c| c as u64).sum()
    }
}

/// Bijective id <-> string map.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Vocabulary {
    names: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    pub fn from_names<I, S>(names: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut vocab = Vocabulary::default();
        for name in names {
            let name = name.into();
            if vocab.index.contains_key(&name) {
                return Err(Error::InvalidArgument(format!(
                    "vocabulary entry `{name}` appears twice"
                )));
            }
            vocab.intern(&name);
        }
        Ok(vocab)
    }

    /// Names `0..size` by their decimal id.
    pub fn numeric(size: usize) -> Self {
        let names: Vec<String> = (0..size).map(|i| i.to_string()).collect();
        let index = names.iter().cloned().zip(0..).collect();
        Vocabulary { names, index }
    }

    pub fn intern(&mut self, name: &str) -> usize {
        if let Some(&id) = self.index.get(name) {
            return id;
        }
        let id = self.names.len();
        self.names.push(name.to_string());
        self.index.insert(name.to_string(), id);
        id
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: usize) -> Option<&str> {
        self.names.get(id).map(String::as_str)
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }
}

/// An immutable, validated, chronologically sorted corpus.
#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    documents: Vec<Document>,
    vocabulary: Vocabulary,
    labels: Vocabulary,
    /// Number of calendar years covered by one period key.
    period_unit: u32,
}

impl Corpus {
    /// Validates and sorts `documents` (by timestamp, then id).
    pub fn new(
        mut documents: Vec<Document>,
        vocabulary: Vocabulary,
        labels: Vocabulary,
        period_unit: u32,
    ) -> Result<Self> {
        if documents.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        if period_unit == 0 {
            return Err(Error::InvalidArgument("period_unit must be >= 1".into()));
        }
        let mut seen = BTreeSet::new();
        for doc in &documents {
            if !seen.insert(doc.id.as_str()) {
                return Err(Error::DuplicateId(doc.id.clone()));
            }
            validate_document(doc, vocabulary.len(), labels.len())?;
        }
        documents.sort_by(|a, b| a.timestamp.cmp(&b.timestamp).then_with(|| a.id.cmp(&b.id)));
        Ok(Corpus {
            documents,
            vocabulary,
            labels,
            period_unit,
        })
    }

    pub fn documents(&self) -> &[Document] {
        &self.documents
    }

    pub fn vocabulary(&self) -> &Vocabulary {
        &self.vocabulary
    }

    pub fn labels(&self) -> &Vocabulary {
        &self.labels
    }

    pub fn vocab_size(&self) -> usize {
        self.vocabulary.len()
    }

    pub fn n_labels(&self) -> usize {
        self.labels.len()
    }

    pub fn period_unit(&self) -> u32 {
        self.period_unit
    }

    pub fn len(&self) -> usize {
        self.documents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.documents.is_empty()
    }

    /// Distinct populated periods, ascending.
    pub fn periods(&self) -> Vec<Period> {
        let mut out: Vec<Period> = self.documents.iter().map(|d| d.timestamp).collect();
        out.dedup();
        out
    }

    pub fn period_counts(&self) -> BTreeMap<Period, usize> {
        let mut counts = BTreeMap::new();
        for doc in &self.documents {
            *counts.entry(doc.timestamp).or_insert(0) += 1;
        }
        counts
    }

    /// Documents whose period is in `periods`, in corpus order.
    pub fn docs_in(&self, periods: &BTreeSet<Period>) -> Vec<&Document> {
        self.documents
            .iter()
            .filter(|d| periods.contains(&d.timestamp))
            .collect()
    }

    pub fn docs_at(&self, period: Period) -> Vec<&Document> {
        self.documents
            .iter()
            .filter(|d| d.timestamp == period)
            .collect()
    }

    /// Canonical JSONL serialization (integer token and label ids).
    pub fn write_jsonl<W: Write>(&self, mut out: W) -> Result<()> {
        for doc in &self.documents {
            let tokens: serde_json::Map<String, Value> = doc
                .token_counts
                .iter()
                .map(|(t, c)| (t.to_string(), Value::from(*c)))
                .collect();
            let record = serde_json::json!({
                "id": doc.id,
                "timestamp": doc.timestamp,
                "tokens": tokens,
                "labels": doc.labels.iter().collect::<Vec<_>>(),
            });
            serde_json::to_writer(&mut out, &record)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn to_jsonl_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_jsonl(&mut buf)
            .expect("writing to a Vec cannot fail");
        buf
    }

    /// Sidecar file pinning token and label names to their ids.
    pub fn sidecar(&self) -> Sidecar {
        Sidecar {
            tokens: Some(self.vocabulary.names().to_vec()),
            labels: Some(self.labels.names().to_vec()),
            period_unit: Some(self.period_unit),
        }
    }
}

fn validate_document(doc: &Document, vocab_size: usize, n_labels: usize) -> Result<()> {
    for (&token, &count) in &doc.token_counts {
        if count == 0 {
            return Err(Error::InvalidArgument(format!(
                "document `{}` has a zero count for token {token}",
                doc.id
            )));
        }
        if token >= vocab_size {
            return Err(Error::IdOutOfRange {
                kind: "token",
                id: token,
                size: vocab_size,
            });
        }
    }
    if let Some(&label) = doc.labels.iter().find(|&&l| l >= n_labels) {
        return Err(Error::IdOutOfRange {
            kind: "label",
            id: label,
            size: n_labels,
        });
    }
    Ok(())
}

/// Optional JSON file pinning id assignment on load.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    #[serde(default)]
    pub tokens: Option<Vec<String>>,
    #[serde(default)]
    pub labels: Option<Vec<String>>,
    #[serde(default)]
    pub period_unit: Option<u32>,
}

#[derive(Clone, Debug, Default)]
pub struct LoadOptions {
    /// Declared vocabulary size for integer token ids.
    pub vocab_size: Option<usize>,
    /// Declared label count for integer label ids.
    pub n_labels: Option<usize>,
    pub sidecar: Option<PathBuf>,
    /// Years per period key; falls back to the sidecar, then 1.
    pub period_unit: Option<u32>,
}

#[derive(Deserialize)]
struct RawRecord {
    id: String,
    timestamp: i64,
    tokens: serde_json::Map<String, Value>,
    #[serde(default)]
    labels: Vec<Value>,
}

/// Loads a JSONL corpus. Token keys are integer ids when every key in the
/// file is all-digit and no sidecar token list is given; otherwise they are
/// interned as strings. Labels may be integers or strings, but not both.
pub fn load_corpus(path: &Path, options: &LoadOptions) -> Result<Corpus> {
    let sidecar = match &options.sidecar {
        Some(p) => serde_json::from_reader(BufReader::new(File::open(p)?))?,
        None => Sidecar::default(),
    };
    let reader = BufReader::new(File::open(path)?);
    let malformed = |line: usize, message: String| Error::MalformedRecord {
        path: path.to_path_buf(),
        line,
        message,
    };

    let mut records = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: RawRecord =
            serde_json::from_str(&line).map_err(|e| malformed(line_no, e.to_string()))?;
        records.push((line_no, record));
    }
    if records.is_empty() {
        return Err(Error::EmptyCorpus);
    }

    let numeric_tokens = sidecar.tokens.is_none()
        && records.iter().all(|(_, r)| {
            r.tokens
                .keys()
                .all(|k| !k.is_empty() && k.bytes().all(|b| b.is_ascii_digit()))
        });
    let mut token_vocab = Vocabulary::from_names(sidecar.tokens.clone().unwrap_or_default())?;
    let mut label_vocab = Vocabulary::from_names(sidecar.labels.clone().unwrap_or_default())?;
    let mut label_mode: Option<bool> = None; // Some(true) = numeric
    let mut max_token = None;
    let mut max_label = None;

    let mut documents = Vec::with_capacity(records.len());
    let mut seen_ids = BTreeSet::new();
    for (line_no, record) in records {
        if !seen_ids.insert(record.id.clone()) {
            return Err(Error::DuplicateId(record.id));
        }
        let mut token_counts = BTreeMap::new();
        for (key, value) in &record.tokens {
            let count = value
                .as_u64()
                .filter(|&c| c > 0 && c <= u32::MAX as u64)
                .ok_or_else(|| {
                    malformed(
                        line_no,
                        format!("count for token `{key}` must be a positive integer, got {value}"),
                    )
                })? as u32;
            let token = if numeric_tokens {
                let id: usize = key
                    .parse()
                    .map_err(|_| malformed(line_no, format!("bad token id `{key}`")))?;
                max_token = max_token.max(Some(id));
                id
            } else {
                token_vocab.intern(key)
            };
            *token_counts.entry(token).or_insert(0) += count;
        }
        let mut labels = BTreeSet::new();
        for value in &record.labels {
            let (numeric, id) = match value {
                Value::Number(n) => {
                    let id = n.as_u64().ok_or_else(|| {
                        malformed(line_no, format!("bad label id {n}"))
                    })? as usize;
                    max_label = max_label.max(Some(id));
                    (true, id)
                }
                Value::String(s) => (false, label_vocab.intern(s)),
                other => {
                    return Err(malformed(line_no, format!("bad label {other}")));
                }
            };
            if *label_mode.get_or_insert(numeric) != numeric {
                return Err(malformed(
                    line_no,
                    "labels mix integer ids and strings".into(),
                ));
            }
            labels.insert(id);
        }
        documents.push(Document {
            id: record.id,
            timestamp: record.timestamp,
            token_counts,
            labels,
        });
    }

    if numeric_tokens {
        let size = match options.vocab_size {
            Some(size) => size,
            None => max_token.map_or(0, |m| m + 1),
        };
        token_vocab = Vocabulary::numeric(size);
    } else if let Some(size) = options.vocab_size {
        if token_vocab.len() > size {
            return Err(Error::IdOutOfRange {
                kind: "token",
                id: token_vocab.len() - 1,
                size,
            });
        }
    }
    if label_mode == Some(true) {
        let size = match (options.n_labels, sidecar.labels.as_ref()) {
            (Some(size), _) => size,
            (None, Some(names)) => names.len(),
            (None, None) => max_label.map_or(0, |m| m + 1),
        };
        if let Some(names) = &sidecar.labels {
            if names.len() == size {
                label_vocab = Vocabulary::from_names(names.clone())?;
            } else {
                label_vocab = Vocabulary::numeric(size);
            }
        } else {
            label_vocab = Vocabulary::numeric(size);
        }
    } else if let Some(size) = options.n_labels {
        if label_vocab.len() > size {
            return Err(Error::IdOutOfRange {
                kind: "label",
                id: label_vocab.len() - 1,
                size,
            });
        }
        // Pad so declared-but-unused labels still get a column.
        for i in label_vocab.len()..size {
            label_vocab.intern(&format!("label_{i}"));
        }
    }

    let period_unit = options.period_unit.or(sidecar.period_unit).unwrap_or(1);
    Corpus::new(documents, token_vocab, label_vocab, period_unit)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum SplitKind {
    EvalFix,
    EvalStreamStep { t: Period },
}

/// Period-level train/val/test assignment.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub train_periods: BTreeSet<Period>,
    pub val_periods: BTreeSet<Period>,
    pub test_periods: BTreeSet<Period>,
    pub kind: SplitKind,
}

impl SplitPlan {
    pub fn train_docs<'a>(&self, corpus: &'a Corpus) -> Vec<&'a Document> {
        corpus.docs_in(&self.train_periods)
    }

    pub fn val_docs<'a>(&self, corpus: &'a Corpus) -> Vec<&'a Document> {
        corpus.docs_in(&self.val_periods)
    }

    pub fn test_docs<'a>(&self, corpus: &'a Corpus) -> Vec<&'a Document> {
        corpus.docs_in(&self.test_periods)
    }
}

/// Fixed split: train on periods `< t1`, validate on `[t1, t2]`, test on `> t2`.
pub fn chronological_split(corpus: &Corpus, t1: Period, t2: Period) -> Result<SplitPlan> {
    if t1 >= t2 {
        return Err(Error::InvalidSplit(format!("t1 ({t1}) must be < t2 ({t2})")));
    }
    let periods = corpus.periods();
    let plan = SplitPlan {
        train_periods: periods.iter().copied().filter(|&p| p < t1).collect(),
        val_periods: periods
            .iter()
            .copied()
            .filter(|&p| p >= t1 && p <= t2)
            .collect(),
        test_periods: periods.iter().copied().filter(|&p| p > t2).collect(),
        kind: SplitKind::EvalFix,
    };
    for (name, set) in [
        ("train", &plan.train_periods),
        ("validation", &plan.val_periods),
        ("test", &plan.test_periods),
    ] {
        if set.is_empty() {
            return Err(Error::InvalidSplit(format!(
                "{name} bucket is empty for t1={t1}, t2={t2}"
            )));
        }
    }
    Ok(plan)
}

/// Streaming plans: for each populated period `t >= start` that has a
/// successor, train on `<= t`, validate on `t`, test on the next period.
pub fn stream_splits(corpus: &Corpus, start: Period) -> Result<Vec<SplitPlan>> {
    let periods = corpus.periods();
    let first = periods
        .iter()
        .position(|&p| p == start)
        .ok_or_else(|| Error::InvalidSplit(format!("start period {start} is not populated")))?;
    if first + 1 >= periods.len() {
        return Err(Error::InvalidSplit(format!(
            "start period {start} has no following period"
        )));
    }
    Ok(periods[first..]
        .windows(2)
        .map(|w| SplitPlan {
            train_periods: periods.iter().copied().filter(|&p| p <= w[0]).collect(),
            val_periods: BTreeSet::from([w[0]]),
            test_periods: BTreeSet::from([w[1]]),
            kind: SplitKind::EvalStreamStep { t: w[0] },
        })
        .collect())
}

/// Splits chronologically sorted documents into an Old half (the first
/// `ceil(n/2)`) and a Recent half (the rest).
pub fn halve_training<T: Borrow<Document>>(docs: &[T]) -> Result<(&[T], &[T])> {
    if docs.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "need at least 2 documents to halve, got {}",
            docs.len()
        )));
    }
    if docs
        .windows(2)
        .any(|w| w[0].borrow().timestamp > w[1].borrow().timestamp)
    {
        return Err(Error::InvalidArgument(
            "documents must be sorted by timestamp".into(),
        ));
    }
    Ok(docs.split_at(docs.len().div_ceil(2)))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DomainWindow {
    pub window_id: usize,
    pub periods: Vec<Period>,
}

/// All stride-1 windows of `len` consecutive entries of `periods`.
pub fn sliding_windows(periods: &[Period], len: usize) -> Result<Vec<DomainWindow>> {
    if len < 1 {
        return Err(Error::InvalidArgument("window length must be >= 1".into()));
    }
    if periods.len() < len {
        return Err(Error::InvalidArgument(format!(
            "{} periods cannot fill a window of length {len}",
            periods.len()
        )));
    }
    Ok(periods
        .windows(len)
        .enumerate()
        .map(|(window_id, w)| DomainWindow {
            window_id,
            periods: w.to_vec(),
        })
        .collect())
}

/// The documents of one training period (possibly several merged sparse
/// periods, keyed by the last of them).
#[derive(Clone, Debug, PartialEq)]
pub struct PeriodGroup {
    pub period: Period,
    pub docs: Vec<Document>,
}

/// Groups sorted documents by timestamp, merging any period with fewer than
/// `min_docs` documents into the next one. A sparse tail is merged backwards.
pub fn period_groups<T: Borrow<Document>>(docs: &[T], min_docs: usize) -> Vec<PeriodGroup> {
    let mut groups: Vec<PeriodGroup> = Vec::new();
    let mut pending: Vec<Document> = Vec::new();
    let mut i = 0;
    while i < docs.len() {
        let period = docs[i].borrow().timestamp;
        while i < docs.len() && docs[i].borrow().timestamp == period {
            pending.push(docs[i].borrow().clone());
            i += 1;
        }
        if pending.len() >= min_docs.max(1) {
            groups.push(PeriodGroup {
                period,
                docs: std::mem::take(&mut pending),
            });
        }
    }
    if !pending.is_empty() {
        match groups.last_mut() {
            Some(last) => last.docs.append(&mut pending),
            None => groups.push(PeriodGroup {
                period: pending.last().map(|d| d.timestamp).unwrap_or_default(),
                docs: pending,
            }),
        }
    }
    groups
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthParams {
    pub n_periods: usize,
    pub docs_per_period: usize,
    pub vocab_size: usize,
    pub n_labels: usize,
    pub drift_rate: f64,
    pub seed: u64,
}

impl Default for SynthParams {
    fn default() -> Self {
        SynthParams {
            n_periods: 10,
            docs_per_period: 200,
            vocab_size: 500,
            n_labels: 6,
            drift_rate: 0.8,
            seed: 0,
        }
    }
}

const TOPIC_SHARE: f64 = 0.6;
const SECOND_LABEL_PROB: f64 = 0.35;
const MIN_DOC_LEN: usize = 20;
const MAX_DOC_LEN: usize = 60;

/// Generates a corpus whose label-conditional token distributions move from
/// a start to an end distribution. Period `i` (0-based) of `n` mixes the end
/// distribution with weight `drift_rate * i / (n - 1)`.
pub fn synth_drift_corpus(params: &SynthParams) -> Result<Corpus> {
    let SynthParams {
        n_periods,
        docs_per_period,
        vocab_size,
        n_labels,
        drift_rate,
        seed,
    } = *params;
    if n_periods == 0 || docs_per_period == 0 || vocab_size == 0 || n_labels == 0 {
        return Err(Error::InvalidArgument(
            "synthetic corpus sizes must all be positive".into(),
        ));
    }
    if !(0.0..=1.0).contains(&drift_rate) {
        return Err(Error::InvalidArgument(format!(
            "drift_rate must lie in [0, 1], got {drift_rate}"
        )));
    }
    let mut rng = rng::seeded(seed);
    let topic_size = (vocab_size / (2 * n_labels)).max(1);

    let topic_weights = |rng: &mut rng::Rng| -> Result<Vec<WeightedIndex<f64>>> {
        let mut order: Vec<usize> = (0..vocab_size).collect();
        order.shuffle(rng);
        (0..n_labels)
            .map(|l| {
                let mut w = vec![0.0; vocab_size];
                for k in 0..topic_size {
                    w[order[(l * topic_size + k) % vocab_size]] = rng.gen_range(0.5..1.5);
                }
                WeightedIndex::new(&w).map_err(|e| Error::InvalidArgument(e.to_string()))
            })
            .collect()
    };
    let topics_start = topic_weights(&mut rng)?;
    let topics_end = topic_weights(&mut rng)?;

    let background = |rng: &mut rng::Rng| -> Result<WeightedIndex<f64>> {
        let mut order: Vec<usize> = (0..vocab_size).collect();
        order.shuffle(rng);
        let mut w = vec![0.0; vocab_size];
        for (rank, &token) in order.iter().enumerate() {
            w[token] = 1.0 / (rank as f64 + 1.0);
        }
        WeightedIndex::new(&w).map_err(|e| Error::InvalidArgument(e.to_string()))
    };
    let background_start = background(&mut rng)?;
    let background_end = background(&mut rng)?;

    let mut documents = Vec::with_capacity(n_periods * docs_per_period);
    for i in 0..n_periods {
        let end_weight = if n_periods > 1 {
            drift_rate * i as f64 / (n_periods - 1) as f64
        } else {
            0.0
        };
        let period = i as Period + 1;
        for j in 0..docs_per_period {
            let mut labels = BTreeSet::new();
            labels.insert(rng.gen_range(0..n_labels));
            if n_labels > 1 && rng.gen_bool(SECOND_LABEL_PROB) {
                while labels.len() < 2 {
                    labels.insert(rng.gen_range(0..n_labels));
                }
            }
            let label_list: Vec<usize> = labels.iter().copied().collect();
            let len = rng.gen_range(MIN_DOC_LEN..=MAX_DOC_LEN);
            let mut token_counts = BTreeMap::new();
            for _ in 0..len {
                let use_end = rng.gen_bool(end_weight);
                let token = if rng.gen_bool(TOPIC_SHARE) {
                    let label = *label_list.choose(&mut rng).expect("non-empty labels");
                    let topics = if use_end { &topics_end } else { &topics_start };
                    topics[label].sample(&mut rng)
                } else if use_end {
                    background_end.sample(&mut rng)
                } else {
                    background_start.sample(&mut rng)
                };
                *token_counts.entry(token).or_insert(0u32) += 1;
            }
            documents.push(Document {
                id: format!("p{period:04}-{j:06}"),
                timestamp: period,
                token_counts,
                labels,
            });
        }
    }
    let vocabulary = Vocabulary::from_names((0..vocab_size).map(|i| format!("w{i}")))?;
    let labels = Vocabulary::from_names((0..n_labels).map(|i| format!("L{i}")))?;
    Corpus::new(documents, vocabulary, labels, 1)
}
