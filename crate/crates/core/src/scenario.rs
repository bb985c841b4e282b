//! End-to-end experiments: data, transformation, partitioning, rank
//! assignment, the round loop, and the artifacts a run leaves behind.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::adaptive::RankPolicy;
use crate::aggregate::Strategy;
use crate::error::{Error, Result};
use crate::federation::{Federation, FederationConfig, RoundMetrics};
use crate::flowdata::{self, Dataset, IngestSchema, SynthSpec};
use crate::model::{self, BackboneConfig, LayerIndexSet, ModelManifest, PartitionedModel};
use crate::nncore::{checkpoint, ParamSet};

/// Memory budgets (GB) of the reference ten-client deployment.
pub const DEFAULT_VRAM_GB: [f64; 10] = [48.0, 48.0, 48.0, 48.0, 48.0, 24.0, 24.0, 24.0, 12.0, 12.0];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum DataSource {
    Synthetic(SynthSpec),
    File {
        path: PathBuf,
        #[serde(default)]
        schema: IngestSchema,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    /// Depth of the randomly initialized source backbone.
    pub source_depth: usize,
    /// Blocks retained by layer extraction, ascending.
    pub keep: Vec<usize>,
    /// Number of retained blocks that form the frozen extractor.
    pub split_point: usize,
    pub d_model: usize,
    pub hidden: usize,
    pub embedding_std: f64,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            source_depth: 8,
            keep: vec![0, 1, 2, 3, 4, 6, 7],
            split_point: 4,
            d_model: 128,
            hidden: 128,
            embedding_std: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub data: DataSource,
    /// Train, validation, test fractions.
    pub split: (f64, f64, f64),
    pub model: ModelSpec,
    pub federation: FederationConfig,
    /// Per-client memory budget in GB, reused cyclically when there are more
    /// clients than entries.
    pub vram_gb: Vec<f64>,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            data: DataSource::Synthetic(SynthSpec::default()),
            split: (0.8, 0.1, 0.1),
            model: ModelSpec::default(),
            federation: FederationConfig::default(),
            vram_gb: DEFAULT_VRAM_GB.to_vec(),
        }
    }
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        self.federation.validate()?;
        let (tr, va, te) = self.split;
        if [tr, va, te].iter().any(|&x| !(x >= 0.0 && x.is_finite())) || ((tr + va + te) - 1.0).abs() > 1e-9 {
            return Err(Error::config("split", "fractions must be non-negative and sum to 1"));
        }
        let m = &self.model;
        if m.d_model == 0 || m.hidden == 0 {
            return Err(Error::config("d_model", "model widths must be positive"));
        }
        if !(m.embedding_std > 0.0 && m.embedding_std.is_finite()) {
            return Err(Error::config("embedding_std", "must be positive"));
        }
        let index = LayerIndexSet::new(m.keep.clone(), m.source_depth).map_err(|e| Error::config("keep", e.to_string()))?;
        if m.split_point == 0 || m.split_point >= index.len() {
            return Err(Error::config(
                "split_point",
                format!("must lie strictly between 0 and the {} retained blocks", index.len()),
            ));
        }
        let widest = m.d_model.min(m.hidden);
        if self.federation.rank_policy.r_max > widest {
            return Err(Error::config(
                "rmax",
                format!("rank bound {} exceeds the classifier width {widest}", self.federation.rank_policy.r_max),
            ));
        }
        if self.vram_gb.is_empty() || self.vram_gb.iter().any(|&v| !(v > 0.0 && v.is_finite())) {
            return Err(Error::config("vram_gb", "need at least one positive budget"));
        }
        if let DataSource::Synthetic(s) = &self.data {
            if s.num_classes < 2 {
                return Err(Error::config("classes", "need at least two classes"));
            }
            if s.per_class == 0 || s.seq_len == 0 || s.vocab_size < s.num_classes {
                return Err(Error::config("synthetic", "per_class and seq_len must be positive; vocab must cover every class"));
            }
            if !(0.0..=1.0).contains(&s.separation) {
                return Err(Error::config("separation", "must lie in [0, 1]"));
            }
        }
        Ok(())
    }
}

/// Options that never change results.
#[derive(Debug, Clone, Copy, Default)]
pub struct RunOptions {
    pub workers: usize,
    pub record_wall_time: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub num_classes: usize,
    pub vocab_size: usize,
    pub label_names: Vec<String>,
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientSummary {
    pub client_id: usize,
    pub data_volume: usize,
    pub entropy_bits: f64,
    pub vram_gb: f64,
    pub rank: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config: ScenarioConfig,
    pub dataset: DatasetSummary,
    pub model: ModelManifest,
    pub source_params: usize,
    pub retained_params: usize,
    pub clients: Vec<ClientSummary>,
    pub label_skew: f64,
    pub initial_test_macro_f1: f64,
    pub final_metrics: RoundMetrics,
    pub rounds_run: usize,
    /// Round at which the run stopped, by patience or by the round limit.
    pub convergence_round: usize,
    pub stopped_early: bool,
}

/// Everything a finished run produced.
pub struct ScenarioOutput {
    pub report: RunReport,
    pub federation: Federation,
    /// Parameters right after transformation and splitting, before round 1.
    pub transformed: ParamSet,
    pub manifest: ModelManifest,
    pub train: Dataset,
}

impl ScenarioOutput {
    pub fn history(&self) -> &[RoundMetrics] {
        &self.federation.history
    }

    /// One JSON object per round, newline-terminated.
    pub fn metrics_log(&self) -> Result<String> {
        let mut out = String::new();
        for m in self.history() {
            out.push_str(&serde_json::to_string(m)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn model_checkpoint(&self) -> Result<Vec<u8>> {
        self.federation.model_checkpoint(&self.manifest)
    }

    pub fn transformed_checkpoint(&self) -> Result<Vec<u8>> {
        Ok(checkpoint::encode(&self.transformed, &serde_json::to_string(&self.manifest)?))
    }

    /// Writes `metrics.jsonl`, `report.json`, `model.ckpt`,
    /// `transformed.ckpt`, `partition.jsonl` and `resources.jsonl`.
    pub fn write_artifacts(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        fs::write(dir.join("metrics.jsonl"), self.metrics_log()?)?;
        let mut report = serde_json::to_string_pretty(&self.report)?;
        report.push('\n');
        fs::write(dir.join("report.json"), report)?;
        fs::write(dir.join("model.ckpt"), self.model_checkpoint()?)?;
        fs::write(dir.join("transformed.ckpt"), self.transformed_checkpoint()?)?;
        let shards = self.federation.shards();
        let mut w = BufWriter::new(fs::File::create(dir.join("partition.jsonl"))?);
        flowdata::write_partition_manifest(&shards, &mut w)?;
        w.flush()?;
        let mut w = BufWriter::new(fs::File::create(dir.join("resources.jsonl"))?);
        for rec in self.federation.resource_manifest() {
            serde_json::to_writer(&mut w, &rec)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        Ok(())
    }
}

fn load_data(config: &ScenarioConfig) -> Result<Dataset> {
    let seed = config.federation.seed;
    match &config.data {
        DataSource::Synthetic(spec) => flowdata::synth_flows(spec, seed),
        DataSource::File { path, schema } => flowdata::ingest_dataset(path, schema),
    }
}

/// Builds the transformed, split model for a dataset of the given shape.
pub fn build_model(spec: &ModelSpec, vocab_size: usize, num_classes: usize, seed: u64) -> Result<(PartitionedModel, ModelManifest, usize)> {
    let backbone = model::Backbone::random(
        &BackboneConfig {
            vocab_size,
            d_model: spec.d_model,
            hidden: spec.hidden,
            depth: spec.source_depth,
            embedding_std: spec.embedding_std,
        },
        seed,
    )?;
    let source_params = backbone.param_count();
    let index = LayerIndexSet::new(spec.keep.clone(), spec.source_depth)?;
    let compressed = model::layer_extract(&backbone, &index)?;
    let headed = model::attach_network_head(compressed, num_classes, seed)?;
    let partitioned = model::split(headed, spec.split_point)?;
    let manifest = ModelManifest {
        source_depth: spec.source_depth,
        index: spec.keep.clone(),
        split_point: spec.split_point,
        d_model: spec.d_model,
        hidden: spec.hidden,
        vocab_size,
        num_classes,
    };
    Ok((partitioned, manifest, source_params))
}

/// Restores the model served after a run from `model.ckpt` bytes.
pub fn load_model(bytes: &[u8]) -> Result<(PartitionedModel, ModelManifest)> {
    let (params, meta) = checkpoint::decode(bytes)?;
    let manifest: ModelManifest = serde_json::from_str(&meta)?;
    let global = crate::federation::GlobalModel::from_params(&params, manifest.index.len(), manifest.split_point)?;
    Ok((global.effective()?, manifest))
}

/// Set up a federation without running any round.
pub fn prepare(config: &ScenarioConfig, options: RunOptions) -> Result<(Federation, ParamSet, ModelManifest, Dataset, usize)> {
    config.validate()?;
    let seed = config.federation.seed;
    let data = load_data(config)?;
    let (train, val, test) = flowdata::split_dataset(&data, config.split, seed)?;
    let (model, manifest, source_params) = build_model(&config.model, data.vocab_size(), data.num_classes(), seed)?;
    let transformed = model.to_params();
    let fed = Federation::new(config.federation.clone(), model, &train, val, test, &config.vram_gb)?
        .with_workers(options.workers)
        .with_wall_time(options.record_wall_time);
    Ok((fed, transformed, manifest, train, source_params))
}

pub fn run(config: &ScenarioConfig, options: RunOptions) -> Result<ScenarioOutput> {
    let (mut fed, transformed, manifest, train, source_params) = prepare(config, options)?;
    let (_, initial) = fed.evaluate_global(&fed.test)?;
    fed.run()?;
    let final_metrics = fed.history.last().cloned().expect("at least one round");
    let rounds_run = fed.history.len();
    let clients = fed
        .clients
        .iter()
        .map(|c| ClientSummary {
            client_id: c.shard.client_id,
            data_volume: c.shard.len(),
            entropy_bits: c.resources.entropy_bits,
            vram_gb: c.resources.vram_gb,
            rank: c.rank,
        })
        .collect();
    let report = RunReport {
        config: config.clone(),
        dataset: DatasetSummary {
            num_classes: train.num_classes(),
            vocab_size: train.vocab_size(),
            label_names: train.label_names().to_vec(),
            train: train.len(),
            val: fed.val.len(),
            test: fed.test.len(),
        },
        model: manifest.clone(),
        source_params,
        retained_params: transformed.numel(),
        clients,
        label_skew: flowdata::label_skew(&fed.shards()),
        initial_test_macro_f1: initial.macro_f1,
        final_metrics,
        rounds_run,
        convergence_round: rounds_run,
        stopped_early: rounds_run < config.federation.rounds,
    };
    Ok(ScenarioOutput {
        report,
        federation: fed,
        transformed,
        manifest,
        train,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    Sigma,
    PerRound,
    Weights,
    Strategy,
}

impl std::str::FromStr for SweepAxis {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sigma" => Ok(Self::Sigma),
            "per_round" | "per-round" => Ok(Self::PerRound),
            "weights" => Ok(Self::Weights),
            "strategy" => Ok(Self::Strategy),
            other => Err(Error::config("axis", format!("unknown sweep axis `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepEntry {
    pub value: String,
    pub ranks: Vec<usize>,
    pub final_metrics: RoundMetrics,
    pub macro_f1_curve: Vec<f64>,
    pub acc_curve: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub axis: SweepAxis,
    pub base_config: ScenarioConfig,
    pub entries: Vec<SweepEntry>,
}

impl SweepReport {
    /// Plain-text table of final metrics per value.
    pub fn table(&self) -> String {
        let mut s = format!("{:<12} {:>8} {:>8} {:>8} {:>8}\n", "value", "acc", "pr", "rc", "f1");
        for e in &self.entries {
            let m = &e.final_metrics;
            s.push_str(&format!(
                "{:<12} {:>8.4} {:>8.4} {:>8.4} {:>8.4}\n",
                e.value, m.acc, m.macro_pr, m.macro_rc, m.macro_f1
            ));
        }
        s
    }
}

/// Applies one sweep value to a copy of `base`.
pub fn with_axis_value(base: &ScenarioConfig, axis: SweepAxis, value: &str) -> Result<ScenarioConfig> {
    let mut c = base.clone();
    let bad = |field: &str| Error::config(field, format!("cannot parse sweep value `{value}`"));
    match axis {
        SweepAxis::Sigma => c.federation.sigma = value.parse().map_err(|_| bad("sigma"))?,
        SweepAxis::PerRound => c.federation.clients_per_round = value.parse().map_err(|_| bad("per_round"))?,
        SweepAxis::Weights => {
            let p = &base.federation.rank_policy;
            c.federation.rank_policy = RankPolicy::preset(value, p.r_min, p.r_max)?;
        }
        SweepAxis::Strategy => c.federation.strategy = value.parse::<Strategy>()?,
    }
    Ok(c)
}

/// One run per value with shared seeds. Sigma sweeps are reported from the
/// least to the most skewed partition; other axes keep the given order.
pub fn sweep(base: &ScenarioConfig, axis: SweepAxis, values: &[String], options: RunOptions) -> Result<SweepReport> {
    if values.len() < 2 {
        return Err(Error::config("values", "a sweep needs at least two values"));
    }
    let mut configs = values
        .iter()
        .map(|v| Ok((v.clone(), with_axis_value(base, axis, v)?)))
        .collect::<Result<Vec<_>>>()?;
    for (_, c) in &configs {
        c.validate()?;
    }
    if axis == SweepAxis::Sigma {
        configs.sort_by(|a, b| b.1.federation.sigma.total_cmp(&a.1.federation.sigma));
    }
    let mut entries = Vec::with_capacity(configs.len());
    for (value, config) in configs {
        let out = run(&config, options)?;
        entries.push(SweepEntry {
            value,
            ranks: out.federation.ranks(),
            final_metrics: out.report.final_metrics.clone(),
            macro_f1_curve: out.history().iter().map(|m| m.macro_f1).collect(),
            acc_curve: out.history().iter().map(|m| m.acc).collect(),
        });
    }
    Ok(SweepReport {
        axis,
        base_config: base.clone(),
        entries,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid() {
        ScenarioConfig::default().validate().unwrap();
    }

    #[test]
    fn config_round_trips_through_json() {
        let c = ScenarioConfig::default();
        let text = serde_json::to_string(&c).unwrap();
        assert_eq!(serde_json::from_str::<ScenarioConfig>(&text).unwrap(), c);
    }

    #[test]
    fn invalid_split_point_names_field() {
        let mut c = ScenarioConfig::default();
        c.model.split_point = 7;
        match c.validate() {
            Err(Error::Config { field, .. }) => assert_eq!(field, "split_point"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn axis_values_apply() {
        let base = ScenarioConfig::default();
        assert_eq!(with_axis_value(&base, SweepAxis::Sigma, "0.05").unwrap().federation.sigma, 0.05);
        assert_eq!(
            with_axis_value(&base, SweepAxis::Strategy, "zeropad").unwrap().federation.strategy,
            Strategy::ZeroPad
        );
        assert!(with_axis_value(&base, SweepAxis::Weights, "nope").is_err());
        assert!(with_axis_value(&base, SweepAxis::PerRound, "x").is_err());
    }
}
