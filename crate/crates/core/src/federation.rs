//! The federated round loop: sampling, LoRA-only local training, upload,
//! aggregation, merge, evaluation.

use std::time::Instant;

use indexmap::IndexMap;
use rand::seq::{index, SliceRandom};
use serde::{Deserialize, Serialize};

use crate::adaptive::{self, RankPolicy, ResourceManifestRecord, ResourceVector};
use crate::aggregate::{aggregate_head, AggregatedDelta, AggregationWeights, Strategy};
use crate::error::{Error, Result};
use crate::exec;
use crate::flowdata::{self, ClientShard, Dataset};
use crate::lora::{self, AdapterPayload, AdapterSet};
use crate::metrics::{ClassificationReport, ConfusionMatrix};
use crate::model::PartitionedModel;
use crate::nncore::network::names;
use crate::nncore::{checkpoint, loss_and_grads, Adam, AdamConfig, Matrix, ParamSet};
use crate::seed::{self, Stream};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FederationConfig {
    pub clients: usize,
    pub clients_per_round: usize,
    pub rounds: usize,
    pub local_epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub sigma: f64,
    pub rank_policy: RankPolicy,
    pub strategy: Strategy,
    pub seed: u64,
    /// Stop early once validation macro-F1 has not improved by `min_delta`
    /// for this many rounds. `None` runs all rounds.
    pub patience: Option<usize>,
    pub min_delta: f64,
}

impl Default for FederationConfig {
    fn default() -> Self {
        Self {
            clients: 10,
            clients_per_round: 8,
            rounds: 10,
            local_epochs: 1,
            learning_rate: 3e-4,
            batch_size: 32,
            sigma: 0.2,
            rank_policy: RankPolicy::preset("volume", 4, 64).expect("valid preset"),
            strategy: Strategy::Stacking,
            seed: 7,
            patience: None,
            min_delta: 1e-3,
        }
    }
}

impl FederationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.clients == 0 {
            return Err(Error::config("clients", "need at least one client"));
        }
        if self.clients_per_round == 0 || self.clients_per_round > self.clients {
            return Err(Error::config(
                "per_round",
                format!(
                    "clients per round must lie in [1, {}], got {}",
                    self.clients, self.clients_per_round
                ),
            ));
        }
        if self.rounds == 0 {
            return Err(Error::config("rounds", "need at least one round"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("lr", "learning rate must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "batch size must be positive"));
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(Error::config("sigma", "Dirichlet concentration must be positive"));
        }
        if self.patience == Some(0) {
            return Err(Error::config("patience", "patience must be positive"));
        }
        RankPolicy::new(
            self.rank_policy.alpha,
            self.rank_policy.beta,
            self.rank_policy.gamma,
            self.rank_policy.r_min,
            self.rank_policy.r_max,
        )?;
        Ok(())
    }
}

/// Uniform sample of `per_round` client ids without replacement, sorted.
/// Depends only on `(master_seed, round)`.
pub fn sample_clients(k: usize, per_round: usize, round: usize, master_seed: u64) -> Result<Vec<usize>> {
    if per_round > k {
        return Err(Error::config("per_round", format!("{per_round} clients per round exceeds {k} clients")));
    }
    let mut rng = seed::stream_rng(master_seed, Stream::Sampling, round as u64, 0);
    let mut ids = index::sample(&mut rng, k, per_round).into_vec();
    ids.sort_unstable();
    Ok(ids)
}

/// What a client sends back after local training.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientUpdate {
    pub client_id: usize,
    pub adapters: AdapterSet,
    /// Trained minus received head weight and bias.
    pub head_delta: (Matrix, Matrix),
    pub sample_count: usize,
    /// Mean batch loss per local epoch.
    pub loss_trace: Vec<f64>,
}

/// Local training on one client: fresh zero-start adapters of rank `rank` on
/// every classifier weight, trained together with the head. Base weights of
/// extractor and classifier stay frozen.
pub fn client_update(
    model: &PartitionedModel,
    shard: &ClientShard,
    rank: usize,
    config: &FederationConfig,
    round: usize,
) -> Result<ClientUpdate> {
    if shard.is_empty() {
        return Err(Error::Validation(format!("client {} has an empty shard", shard.client_id)));
    }
    let client = shard.client_id;
    let adapters = lora::init_adapter_set(
        &model.adapt_points(),
        rank,
        client,
        lora::adapter_seed(config.seed, client, round),
    )?;
    let received = model.to_params();
    let mut params = received.clone();
    adapters.install(&mut params);
    let arch = model.arch();
    let mut adam = Adam::new(AdamConfig::new(config.learning_rate), &params);
    let mut rng = seed::stream_rng(config.seed, Stream::Shuffle, client as u64, round as u64);
    let mut order: Vec<usize> = (0..shard.len()).collect();
    let mut loss_trace = Vec::with_capacity(config.local_epochs);

    for epoch in 0..config.local_epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0usize;
        for (b, chunk) in order.chunks(config.batch_size).enumerate() {
            let tokens: Vec<&[u32]> = chunk.iter().map(|&i| shard.records[i].tokens.as_slice()).collect();
            let labels: Vec<usize> = chunk.iter().map(|&i| shard.records[i].label).collect();
            let context = |e: Error| match e {
                Error::Numeric(m) => Error::Numeric(format!(
                    "round {round}, client {client}, epoch {epoch}, batch {b}: {m}"
                )),
                other => other,
            };
            let (loss, grads) = loss_and_grads(&params, &arch, &tokens, &labels).map_err(context)?;
            adam.step(&mut params, &grads)?;
            if !params.trainable_names().all(|n| params.get(n).is_some_and(Matrix::is_finite)) {
                return Err(context(Error::Numeric("parameters diverged".into())));
            }
            total += loss;
            batches += 1;
        }
        loss_trace.push(total / batches as f64);
    }

    if let Some(name) = params.frozen_changes(&received).into_iter().next() {
        return Err(Error::FreezeViolation(name));
    }
    let trained = adapters.extract(&params)?;
    let head = &model.classifier.head;
    let head_delta = (
        params.get(names::HEAD_WEIGHT).expect("present").sub(&head.weight)?,
        params.get(names::HEAD_BIAS).expect("present").sub(&head.bias)?,
    );
    Ok(ClientUpdate {
        client_id: client,
        adapters: trained,
        head_delta,
        sample_count: shard.len(),
        loss_trace,
    })
}

const EVAL_CHUNK: usize = 256;

/// Confusion matrix and scores of `model` on `dataset`.
pub fn evaluate(model: &PartitionedModel, dataset: &Dataset, parallel: bool) -> Result<(ConfusionMatrix, ClassificationReport)> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let chunks: Vec<&[flowdata::FlowRecord]> = dataset.records().chunks(EVAL_CHUNK).collect();
    let predicted = exec::map_ordered(&chunks, parallel, |chunk| {
        let batch: Vec<&[u32]> = chunk.iter().map(|r| r.tokens.as_slice()).collect();
        model.predict_batch(&batch)
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?
    .concat();
    let truth: Vec<usize> = dataset.records().iter().map(|r| r.label).collect();
    let cm = ConfusionMatrix::from_predictions(model.num_classes(), &truth, &predicted)?;
    let report = cm.report();
    Ok((cm, report))
}

/// True when `max_rounds` is reached, or when the best validation macro-F1
/// of the last `patience` rounds does not beat the best before them by more
/// than `min_delta`.
pub fn check_convergence(history: &[RoundMetrics], patience: Option<usize>, min_delta: f64, max_rounds: usize) -> bool {
    if history.len() >= max_rounds {
        return true;
    }
    let Some(patience) = patience else {
        return false;
    };
    if patience == 0 || history.len() <= patience {
        return false;
    }
    let split = history.len() - patience;
    let best_before = history[..split]
        .iter()
        .map(|m| m.val_macro_f1)
        .fold(f64::NEG_INFINITY, f64::max);
    let best_recent = history[split..]
        .iter()
        .map(|m| m.val_macro_f1)
        .fold(f64::NEG_INFINITY, f64::max);
    best_recent <= best_before + min_delta
}

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundMetrics {
    pub round: usize,
    pub strategy: Strategy,
    pub clients: Vec<usize>,
    pub ranks: Vec<usize>,
    pub acc: f64,
    pub macro_pr: f64,
    pub macro_rc: f64,
    pub macro_f1: f64,
    pub per_class_f1: Vec<f64>,
    pub val_macro_f1: f64,
    /// Frobenius norm of the aggregated delta per adapted matrix.
    pub delta_fro: IndexMap<String, f64>,
    pub confusion: ConfusionMatrix,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wall_ms: Option<u64>,
}

/// Server-side model: the transformed weights, never modified, plus the
/// running sum of merged classifier deltas and the current head.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalModel {
    pub base: PartitionedModel,
    pub merged: AggregatedDelta,
}

pub const MERGED_SUFFIX: &str = ".merged_delta";

impl GlobalModel {
    pub fn new(base: PartitionedModel) -> Self {
        let merged = base
            .adapt_points()
            .into_iter()
            .map(|p| (p.name, Matrix::zeros(p.rows, p.cols)))
            .collect();
        Self { base, merged }
    }

    /// The weights clients receive: every classifier weight with its merged
    /// delta folded in.
    pub fn effective(&self) -> Result<PartitionedModel> {
        let mut m = self.base.clone();
        for (target, delta) in &self.merged {
            let w = m
                .weight_mut(target)
                .ok_or_else(|| Error::Validation(format!("unknown target `{target}`")))?;
            *w = lora::merge_delta(w, delta)?;
        }
        Ok(m)
    }

    pub fn merge(&mut self, delta: &AggregatedDelta, head_delta: &(Matrix, Matrix)) -> Result<()> {
        for (target, d) in delta {
            let acc = self
                .merged
                .get_mut(target)
                .ok_or_else(|| Error::Validation(format!("unknown target `{target}`")))?;
            *acc = lora::merge_delta(acc, d)?;
        }
        let head = &mut self.base.classifier.head;
        head.weight = lora::merge_delta(&head.weight, &head_delta.0)?;
        head.bias = lora::merge_delta(&head.bias, &head_delta.1)?;
        Ok(())
    }

    /// Base tensors (frozen flags as during training), head, and
    /// `<target>.merged_delta` tensors.
    pub fn to_params(&self) -> ParamSet {
        let mut p = self.base.to_params();
        for (target, d) in &self.merged {
            p.insert(format!("{target}{MERGED_SUFFIX}"), d.clone(), true);
        }
        p
    }

    pub fn from_params(params: &ParamSet, depth: usize, split_point: usize) -> Result<Self> {
        let base = PartitionedModel::from_params(params, depth, split_point)?;
        let mut g = Self::new(base);
        for (target, acc) in g.merged.iter_mut() {
            let name = format!("{target}{MERGED_SUFFIX}");
            *acc = params
                .get(&name)
                .cloned()
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))?;
        }
        Ok(g)
    }
}

/// Encoded adapter payload plus the dense head delta.
type Upload = (Vec<u8>, (Matrix, Matrix));

/// A registered client.
#[derive(Debug, Clone)]
pub struct ClientState {
    pub shard: ClientShard,
    pub resources: ResourceVector,
    pub rank: usize,
}

pub struct Federation {
    pub config: FederationConfig,
    pub global: GlobalModel,
    pub clients: Vec<ClientState>,
    pub val: Dataset,
    pub test: Dataset,
    pub history: Vec<RoundMetrics>,
    workers: usize,
    record_wall_time: bool,
}

impl Federation {
    /// Partitions `train`, derives resource vectors (shard size, label
    /// entropy, `vram_gb[k % len]`) and fixes every client's rank.
    pub fn new(
        config: FederationConfig,
        model: PartitionedModel,
        train: &Dataset,
        val: Dataset,
        test: Dataset,
        vram_gb: &[f64],
    ) -> Result<Self> {
        config.validate()?;
        if vram_gb.is_empty() {
            return Err(Error::config("vram", "need at least one memory budget"));
        }
        if train.num_classes() != model.num_classes() || train.vocab_size() > model.vocab_size() {
            return Err(Error::config("model", "model does not match the dataset's classes or vocabulary"));
        }
        let shards = flowdata::dirichlet_partition(train, config.clients, config.sigma, config.seed)?;
        let resources = shards
            .iter()
            .map(|s| {
                ResourceVector::new(s.len(), flowdata::label_entropy(s)?, vram_gb[s.client_id % vram_gb.len()])
            })
            .collect::<Result<Vec<_>>>()?;
        let ranks = adaptive::assign_ranks(&resources, &config.rank_policy)?;
        let max_feasible = model.adapt_points().iter().map(|p| p.max_rank()).min().unwrap_or(0);
        if let Some(&r) = ranks.iter().find(|&&r| r > max_feasible) {
            return Err(Error::Rank(format!(
                "assigned rank {r} exceeds the smallest classifier dimension {max_feasible}; lower rmax"
            )));
        }
        if config.strategy == Strategy::Naive && ranks.iter().any(|&r| r != ranks[0]) {
            return Err(Error::RankMismatch(ranks));
        }
        let clients = shards
            .into_iter()
            .zip(resources)
            .zip(ranks)
            .map(|((shard, resources), rank)| ClientState { shard, resources, rank })
            .collect();
        Ok(Self {
            config,
            global: GlobalModel::new(model),
            clients,
            val,
            test,
            history: Vec::new(),
            workers: 1,
            record_wall_time: false,
        })
    }

    /// Worker threads for client training and evaluation. Never changes
    /// results.
    pub fn with_workers(mut self, workers: usize) -> Self {
        self.workers = workers.max(1);
        self
    }

    pub fn with_wall_time(mut self, on: bool) -> Self {
        self.record_wall_time = on;
        self
    }

    pub fn workers(&self) -> usize {
        self.workers
    }

    pub fn ranks(&self) -> Vec<usize> {
        self.clients.iter().map(|c| c.rank).collect()
    }

    pub fn resource_manifest(&self) -> Vec<ResourceManifestRecord> {
        self.clients
            .iter()
            .map(|c| ResourceManifestRecord {
                client_id: c.shard.client_id,
                data_volume: c.shard.len(),
                entropy_bits: c.resources.entropy_bits,
                vram_gb: c.resources.vram_gb,
            })
            .collect()
    }

    pub fn shards(&self) -> Vec<ClientShard> {
        self.clients.iter().map(|c| c.shard.clone()).collect()
    }

    fn parallel(&self) -> bool {
        self.workers > 1
    }

    pub fn evaluate_global(&self, dataset: &Dataset) -> Result<(ConfusionMatrix, ClassificationReport)> {
        let model = self.global.effective()?;
        exec::with_workers(self.workers, || evaluate(&model, dataset, self.parallel()))
    }

    /// Trains the sampled clients, aggregates once all uploads are in, merges
    /// and evaluates. Any client failure aborts the round before the merge.
    pub fn run_round(&mut self) -> Result<&RoundMetrics> {
        let round = self.history.len() + 1;
        let start = Instant::now();
        let sampled = sample_clients(self.config.clients, self.config.clients_per_round, round, self.config.seed)?;
        let broadcast = self.global.effective()?;
        let parallel = self.parallel();
        let config = &self.config;
        let clients = &self.clients;

        let uploads: Vec<Result<Upload>> = exec::with_workers(self.workers, || {
            exec::map_ordered(&sampled, parallel, |&id| {
                let c = &clients[id];
                let update = client_update(&broadcast, &c.shard, c.rank, config, round)?;
                let payload = AdapterPayload {
                    adapters: update.adapters,
                    sample_count: update.sample_count,
                };
                Ok((payload.encode()?, update.head_delta))
            })
        });
        let uploads = uploads.into_iter().collect::<Result<Vec<_>>>()?;

        let mut adapter_sets = Vec::with_capacity(uploads.len());
        let mut counts = Vec::with_capacity(uploads.len());
        let mut head_deltas = Vec::with_capacity(uploads.len());
        for (bytes, head_delta) in uploads {
            let payload = AdapterPayload::decode(&bytes)?;
            counts.push(payload.sample_count);
            adapter_sets.push(payload.adapters);
            head_deltas.push(head_delta);
        }
        let weights = AggregationWeights::from_counts(&counts)?;
        let delta = self.config.strategy.aggregate(&adapter_sets, &weights)?;
        let head_delta = aggregate_head(&head_deltas, &weights)?;
        if delta.values().any(|d| !d.is_finite()) {
            return Err(Error::Numeric(format!("round {round}: aggregated delta is not finite")));
        }
        self.global.merge(&delta, &head_delta)?;

        let (confusion, test) = self.evaluate_global(&self.test)?;
        let (_, val) = self.evaluate_global(&self.val)?;
        let metrics = RoundMetrics {
            round,
            strategy: self.config.strategy,
            ranks: sampled.iter().map(|&id| self.clients[id].rank).collect(),
            clients: sampled,
            acc: test.accuracy,
            macro_pr: test.macro_precision,
            macro_rc: test.macro_recall,
            macro_f1: test.macro_f1,
            per_class_f1: test.per_class_f1,
            val_macro_f1: val.macro_f1,
            delta_fro: delta.iter().map(|(t, d)| (t.clone(), d.frobenius())).collect(),
            confusion,
            wall_ms: self.record_wall_time.then(|| start.elapsed().as_millis() as u64),
        };
        self.history.push(metrics);
        Ok(self.history.last().expect("just pushed"))
    }

    pub fn converged(&self) -> bool {
        !self.history.is_empty()
            && check_convergence(&self.history, self.config.patience, self.config.min_delta, self.config.rounds)
    }

    /// Runs rounds until the convergence check fires.
    pub fn run(&mut self) -> Result<()> {
        while !self.converged() {
            self.run_round()?;
        }
        Ok(())
    }

    pub fn model_checkpoint(&self, manifest: &crate::model::ModelManifest) -> Result<Vec<u8>> {
        Ok(checkpoint::encode(&self.global.to_params(), &serde_json::to_string(manifest)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn metrics(f1s: &[f64]) -> Vec<RoundMetrics> {
        f1s.iter()
            .enumerate()
            .map(|(i, &f)| RoundMetrics {
                round: i + 1,
                strategy: Strategy::Stacking,
                clients: vec![],
                ranks: vec![],
                acc: 0.0,
                macro_pr: 0.0,
                macro_rc: 0.0,
                macro_f1: 0.0,
                per_class_f1: vec![],
                val_macro_f1: f,
                delta_fro: IndexMap::new(),
                confusion: ConfusionMatrix::new(2),
                wall_ms: None,
            })
            .collect()
    }

    #[test]
    fn convergence_rules() {
        assert!(!check_convergence(&metrics(&[0.5, 0.5]), Some(3), 0.001, 10));
        assert!(check_convergence(&metrics(&[0.5, 0.5, 0.5, 0.5]), Some(3), 0.001, 10));
        let rising: Vec<f64> = (0..9).map(|i| 0.1 * i as f64).collect();
        assert!(!check_convergence(&metrics(&rising), Some(3), 0.001, 10));
        assert!(check_convergence(&metrics(&[0.1; 10]), None, 0.001, 10));
        assert!(!check_convergence(&metrics(&[0.1; 9]), None, 0.001, 10));
    }

    #[test]
    fn sampling() {
        assert_eq!(sample_clients(10, 10, 3, 1).unwrap(), (0..10).collect::<Vec<_>>());
        assert_eq!(sample_clients(10, 3, 4, 9).unwrap(), sample_clients(10, 3, 4, 9).unwrap());
        let s = sample_clients(10, 3, 4, 9).unwrap();
        assert_eq!(s.len(), 3);
        assert!(s.windows(2).all(|w| w[0] < w[1]));
        assert!(matches!(sample_clients(10, 12, 1, 0), Err(Error::Config { .. })));
    }

    #[test]
    fn config_validation_names_field() {
        let cfg = FederationConfig {
            clients_per_round: 12,
            ..FederationConfig::default()
        };
        match cfg.validate() {
            Err(Error::Config { field, .. }) => assert_eq!(field, "per_round"),
            other => panic!("{other:?}"),
        }
    }
}
