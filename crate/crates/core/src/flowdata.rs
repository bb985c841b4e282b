//! Flow datasets: ingestion, synthetic generation, stratified splitting and
//! Dirichlet non-IID partitioning across clients.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::seed::{self, Stream};

/// One tokenized flow and its class index.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlowRecord {
    pub tokens: Vec<u32>,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    records: Vec<FlowRecord>,
    num_classes: usize,
    vocab_size: usize,
    label_names: Vec<String>,
}

impl Dataset {
    pub fn new(records: Vec<FlowRecord>, num_classes: usize, vocab_size: usize) -> Result<Self> {
        let names = (0..num_classes).map(|c| c.to_string()).collect();
        Self::with_label_names(records, vocab_size, names)
    }

    pub fn with_label_names(records: Vec<FlowRecord>, vocab_size: usize, label_names: Vec<String>) -> Result<Self> {
        let num_classes = label_names.len();
        if num_classes < 2 {
            return Err(Error::Validation(format!("need at least 2 classes, got {num_classes}")));
        }
        if vocab_size == 0 {
            return Err(Error::Validation("vocab_size must be positive".into()));
        }
        for (i, r) in records.iter().enumerate() {
            if r.tokens.is_empty() {
                return Err(Error::Validation(format!("record {i} has no tokens")));
            }
            if r.label >= num_classes {
                return Err(Error::Validation(format!("record {i} label {} >= {num_classes}", r.label)));
            }
            if let Some(t) = r.tokens.iter().find(|&&t| t as usize >= vocab_size) {
                return Err(Error::Validation(format!("record {i} token {t} >= vocab_size {vocab_size}")));
            }
        }
        Ok(Self {
            records,
            num_classes,
            vocab_size,
            label_names,
        })
    }

    /// Keeps class and vocabulary metadata, replaces the records.
    fn derive(&self, records: Vec<FlowRecord>) -> Self {
        Self {
            records,
            num_classes: self.num_classes,
            vocab_size: self.vocab_size,
            label_names: self.label_names.clone(),
        }
    }

    pub fn records(&self) -> &[FlowRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn label_names(&self) -> &[String] {
        &self.label_names
    }

    pub fn class_counts(&self) -> Vec<usize> {
        histogram(&self.records, self.num_classes)
    }

    /// Line-delimited JSON, one `{"tokens":[..],"label":"name"}` per record.
    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        for r in &self.records {
            let line = serde_json::json!({
                "tokens": r.tokens,
                "label": self.label_names[r.label],
            });
            writeln!(w, "{line}")?;
        }
        Ok(())
    }
}

fn histogram(records: &[FlowRecord], num_classes: usize) -> Vec<usize> {
    let mut h = vec![0; num_classes];
    for r in records {
        h[r.label] += 1;
    }
    h
}

/// A client's share of the training split.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientShard {
    pub client_id: usize,
    pub records: Vec<FlowRecord>,
    /// Positions of `records` in the partitioned dataset.
    pub indices: Vec<usize>,
    pub label_histogram: Vec<usize>,
}

impl ClientShard {
    pub fn new(client_id: usize, source: &Dataset, indices: Vec<usize>) -> Self {
        let records: Vec<FlowRecord> = indices.iter().map(|&i| source.records[i].clone()).collect();
        let label_histogram = histogram(&records, source.num_classes);
        Self {
            client_id,
            records,
            indices,
            label_histogram,
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

/// Field names for line-delimited ingestion.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestSchema {
    pub tokens_field: String,
    pub label_field: String,
    /// Declared vocabulary size; inferred as `1 + max token` when absent.
    pub vocab_size: Option<usize>,
}

impl Default for IngestSchema {
    fn default() -> Self {
        Self {
            tokens_field: "tokens".into(),
            label_field: "label".into(),
            vocab_size: None,
        }
    }
}

pub fn ingest_dataset(path: impl AsRef<Path>, schema: &IngestSchema) -> Result<Dataset> {
    let file = std::fs::File::open(path)?;
    parse_dataset(BufReader::new(file), schema)
}

/// Parses line-delimited JSON records. Labels (strings or integers) are mapped
/// to dense indices in first-seen order. Blank lines are skipped.
pub fn parse_dataset<R: BufRead>(reader: R, schema: &IngestSchema) -> Result<Dataset> {
    let mut records = Vec::new();
    let mut label_ids: HashMap<String, usize> = HashMap::new();
    let mut label_names = Vec::new();
    let mut max_token = 0u64;
    for (i, line) in reader.lines().enumerate() {
        let lineno = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse { line: lineno, message };
        let value: Value = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        let tokens_v = value
            .get(&schema.tokens_field)
            .and_then(Value::as_array)
            .ok_or_else(|| parse_err(format!("missing integer array `{}`", schema.tokens_field)))?;
        let mut tokens = Vec::with_capacity(tokens_v.len());
        for t in tokens_v {
            let t = t
                .as_i64()
                .ok_or_else(|| parse_err(format!("non-integer token {t}")))?;
            if t < 0 {
                return Err(Error::Validation(format!("line {lineno}: negative token {t}")));
            }
            let t = u32::try_from(t).map_err(|_| Error::Validation(format!("line {lineno}: token {t} too large")))?;
            if let Some(v) = schema.vocab_size {
                if t as usize >= v {
                    return Err(Error::Validation(format!(
                        "line {lineno}: token {t} >= declared vocab_size {v}"
                    )));
                }
            }
            max_token = max_token.max(t as u64);
            tokens.push(t);
        }
        if tokens.is_empty() {
            return Err(Error::Validation(format!("line {lineno}: empty token sequence")));
        }
        let label_key = match value.get(&schema.label_field) {
            Some(Value::String(s)) => s.clone(),
            Some(Value::Number(n)) if n.is_i64() || n.is_u64() => n.to_string(),
            _ => return Err(parse_err(format!("missing string or integer `{}`", schema.label_field))),
        };
        let next = label_ids.len();
        let label = *label_ids.entry(label_key.clone()).or_insert_with(|| {
            label_names.push(label_key);
            next
        });
        records.push(FlowRecord { tokens, label });
    }
    if records.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let vocab_size = schema.vocab_size.unwrap_or(max_token as usize + 1);
    Dataset::with_label_names(records, vocab_size, label_names)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub num_classes: usize,
    pub per_class: usize,
    pub vocab_size: usize,
    pub seq_len: usize,
    pub separation: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            num_classes: 6,
            per_class: 200,
            vocab_size: 64,
            seq_len: 32,
            separation: 0.9,
        }
    }
}

/// Synthetic flows. Class `c` owns a contiguous vocabulary band; each token
/// is drawn from that band with probability `separation`, otherwise
/// uniformly from the whole vocabulary.
pub fn synth_flows(spec: &SynthSpec, seed: u64) -> Result<Dataset> {
    let SynthSpec {
        num_classes,
        per_class,
        vocab_size,
        seq_len,
        separation,
    } = *spec;
    if num_classes < 2 {
        return Err(Error::config("classes", "need at least 2 classes"));
    }
    if per_class < 1 {
        return Err(Error::config("per_class", "need at least 1 record per class"));
    }
    if vocab_size < num_classes {
        return Err(Error::config(
            "vocab_size",
            format!("vocab_size {vocab_size} < num_classes {num_classes}"),
        ));
    }
    if seq_len < 1 {
        return Err(Error::config("seq_len", "sequences must be non-empty"));
    }
    if !(separation > 0.0 && separation <= 1.0) {
        return Err(Error::config("separation", "must lie in (0, 1]"));
    }
    let mut rng = seed::stream_rng(seed, Stream::Synth, 0, 0);
    let width = vocab_size / num_classes;
    let mut records = Vec::with_capacity(num_classes * per_class);
    for c in 0..num_classes {
        let lo = c * width;
        let hi = if c + 1 == num_classes { vocab_size } else { lo + width };
        for _ in 0..per_class {
            let tokens = (0..seq_len)
                .map(|_| {
                    if rng.random::<f64>() < separation {
                        rng.random_range(lo..hi) as u32
                    } else {
                        rng.random_range(0..vocab_size) as u32
                    }
                })
                .collect();
            records.push(FlowRecord { tokens, label: c });
        }
    }
    records.shuffle(&mut rng);
    let names = (0..num_classes).map(|c| format!("class{c}")).collect();
    Dataset::with_label_names(records, vocab_size, names)
}

/// Largest-remainder apportionment of `total` over `quotas` (which should sum
/// to `total`). Ties go to the lower index.
fn apportion(total: usize, quotas: &[f64]) -> Vec<usize> {
    let mut out: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let assigned: usize = out.iter().sum();
    let mut order: Vec<usize> = (0..quotas.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = quotas[a] - quotas[a].floor();
        let fb = quotas[b] - quotas[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &i in order.iter().cycle().take(total.saturating_sub(assigned)) {
        out[i] += 1;
    }
    out
}

/// Stratified train/validation/test split. Global validation and test sizes
/// are `round(n · ratio)`; train takes the remainder. Each split keeps the
/// input order.
pub fn split_dataset(ds: &Dataset, ratios: (f64, f64, f64), seed: u64) -> Result<(Dataset, Dataset, Dataset)> {
    let (rt, rv, rs) = ratios;
    if !(rt > 0.0 && rv > 0.0 && rs > 0.0) || ((rt + rv + rs) - 1.0).abs() > 1e-9 {
        return Err(Error::config("ratios", format!("must be positive and sum to 1, got {ratios:?}")));
    }
    let n = ds.len();
    if n < 10 {
        return Err(Error::Validation(format!("need at least 10 records to split, got {n}")));
    }
    let counts = ds.class_counts();
    if let Some((c, &k)) = counts.iter().enumerate().find(|(_, &k)| k < 3) {
        return Err(Error::Stratification(format!("class {c} has only {k} records, need 3")));
    }
    let n_val = (n as f64 * rv).round() as usize;
    let n_test = (n as f64 * rs).round() as usize;
    let quota = |target: usize| -> Vec<f64> { counts.iter().map(|&k| k as f64 * target as f64 / n as f64).collect() };
    let val_c = apportion(n_val, &quota(n_val));
    let test_c = apportion(n_test, &quota(n_test));

    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); ds.num_classes];
    for (i, r) in ds.records.iter().enumerate() {
        by_class[r.label].push(i);
    }
    let mut rng = seed::stream_rng(seed, Stream::Split, 0, 0);
    let mut assignment = vec![0u8; n];
    for (c, idx) in by_class.iter_mut().enumerate() {
        if val_c[c] + test_c[c] >= idx.len() {
            return Err(Error::Stratification(format!(
                "class {c} has {} records, too few for {} validation and {} test",
                idx.len(),
                val_c[c],
                test_c[c]
            )));
        }
        idx.shuffle(&mut rng);
        for &i in &idx[..val_c[c]] {
            assignment[i] = 1;
        }
        for &i in &idx[val_c[c]..val_c[c] + test_c[c]] {
            assignment[i] = 2;
        }
    }
    let pick = |which: u8| -> Vec<FlowRecord> {
        ds.records
            .iter()
            .zip(&assignment)
            .filter(|(_, &a)| a == which)
            .map(|(r, _)| r.clone())
            .collect()
    };
    Ok((ds.derive(pick(0)), ds.derive(pick(1)), ds.derive(pick(2))))
}

fn dirichlet<R: Rng + ?Sized>(k: usize, sigma: f64, rng: &mut R) -> Vec<f64> {
    let gamma = Gamma::new(sigma, 1.0).expect("sigma validated positive");
    loop {
        let draws: Vec<f64> = (0..k).map(|_| gamma.sample(rng)).collect();
        let sum: f64 = draws.iter().sum();
        if sum > 0.0 && sum.is_finite() {
            return draws.into_iter().map(|x| x / sum).collect();
        }
    }
}

const PARTITION_ATTEMPTS: usize = 100;

/// Splits `train` across `k` clients. Each class is spread by its own
/// Dirichlet(`sigma`) proportions with largest-remainder rounding. If some
/// client ends up empty, the allocation is redrawn (up to 100 attempts);
/// after that, each empty client takes one record from the largest shard.
pub fn dirichlet_partition(train: &Dataset, k: usize, sigma: f64, seed: u64) -> Result<Vec<ClientShard>> {
    if k == 0 {
        return Err(Error::config("clients", "need at least one client"));
    }
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::config("sigma", format!("must be positive, got {sigma}")));
    }
    if train.len() < k {
        return Err(Error::Partition(format!("{} records cannot cover {k} clients", train.len())));
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); train.num_classes];
    for (i, r) in train.records.iter().enumerate() {
        by_class[r.label].push(i);
    }
    if let Some(c) = by_class.iter().position(Vec::is_empty) {
        return Err(Error::Partition(format!("class {c} has no training records")));
    }
    let mut rng = seed::stream_rng(seed, Stream::Partition, 0, 0);
    for idx in by_class.iter_mut() {
        idx.shuffle(&mut rng);
    }

    let mut assigned: Vec<Vec<usize>> = Vec::new();
    for _ in 0..PARTITION_ATTEMPTS {
        assigned = vec![Vec::new(); k];
        for idx in &by_class {
            let props = dirichlet(k, sigma, &mut rng);
            let quotas: Vec<f64> = props.iter().map(|p| p * idx.len() as f64).collect();
            let sizes = apportion(idx.len(), &quotas);
            let mut offset = 0;
            for (client, &s) in sizes.iter().enumerate() {
                assigned[client].extend_from_slice(&idx[offset..offset + s]);
                offset += s;
            }
        }
        if assigned.iter().all(|a| !a.is_empty()) {
            break;
        }
    }
    while let Some(empty) = assigned.iter().position(Vec::is_empty) {
        let largest = (0..k)
            .max_by(|&a, &b| assigned[a].len().cmp(&assigned[b].len()).then(b.cmp(&a)))
            .expect("k >= 1");
        let moved = assigned[largest].pop().expect("largest shard non-empty");
        assigned[empty].push(moved);
    }
    Ok(assigned
        .into_iter()
        .enumerate()
        .map(|(client, mut idx)| {
            idx.sort_unstable();
            ClientShard::new(client, train, idx)
        })
        .collect())
}

/// Shannon entropy of the shard's label distribution, in bits.
pub fn label_entropy(shard: &ClientShard) -> Result<f64> {
    entropy_bits(&shard.label_histogram)
}

pub fn entropy_bits(histogram: &[usize]) -> Result<f64> {
    let total: usize = histogram.iter().sum();
    if total == 0 {
        return Err(Error::Domain("entropy of an empty shard".into()));
    }
    let h = histogram
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let q = c as f64 / total as f64;
            -q * q.log2()
        })
        .sum::<f64>();
    Ok(h.max(0.0))
}

/// Mean over clients of the largest single-label share.
pub fn label_skew(shards: &[ClientShard]) -> f64 {
    let shares: Vec<f64> = shards
        .iter()
        .filter(|s| !s.is_empty())
        .map(|s| *s.label_histogram.iter().max().unwrap() as f64 / s.len() as f64)
        .collect();
    shares.iter().sum::<f64>() / shares.len().max(1) as f64
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartitionManifestRecord {
    pub client_id: usize,
    pub record_indices: Vec<usize>,
}

pub fn write_partition_manifest<W: Write>(shards: &[ClientShard], mut w: W) -> Result<()> {
    for s in shards {
        let rec = PartitionManifestRecord {
            client_id: s.client_id,
            record_indices: s.indices.clone(),
        };
        writeln!(w, "{}", serde_json::to_string(&rec)?)?;
    }
    Ok(())
}
