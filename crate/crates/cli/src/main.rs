//! `fedflow`: run and sweep federated LoRA experiments on flow datasets.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use fedflow::adaptive::RankPolicy;
use fedflow::aggregate::Strategy;
use fedflow::flowdata::{IngestSchema, SynthSpec};
use fedflow::model::LayerIndexSet;
use fedflow::scenario::{self, DataSource, RunOptions, ScenarioConfig, SweepAxis};

const EXIT_CONFIG: u8 = 2;
const EXIT_RUNTIME: u8 = 3;

#[derive(Parser)]
#[command(name = "fedflow", version, about = "Federated LoRA fine-tuning for traffic classification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one scenario and write metrics.jsonl, report.json and model.ckpt.
    Run(ScenarioArgs),
    /// Run one scenario per value along an axis and write sweep.json.
    Sweep {
        /// sigma | per_round | weights | strategy
        #[arg(long)]
        axis: String,
        /// Comma-separated values, e.g. 0.5,0.2,0.05
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
        #[command(flatten)]
        scenario: ScenarioArgs,
    },
}

#[derive(Args, Clone)]
struct ScenarioArgs {
    /// JSON scenario config, or a report.json whose config echo is reused.
    #[arg(long)]
    config: Option<PathBuf>,

    /// Line-delimited JSON flows with `tokens` and `label` fields.
    #[arg(long, conflicts_with = "synthetic")]
    dataset: Option<PathBuf>,
    /// Generate a synthetic flow dataset.
    #[arg(long)]
    synthetic: bool,
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long)]
    per_class: Option<usize>,
    #[arg(long)]
    vocab: Option<usize>,
    #[arg(long)]
    seq_len: Option<usize>,
    #[arg(long)]
    separation: Option<f64>,
    #[arg(long)]
    tokens_field: Option<String>,
    #[arg(long)]
    label_field: Option<String>,

    #[arg(long)]
    clients: Option<usize>,
    #[arg(long)]
    per_round: Option<usize>,
    #[arg(long)]
    rounds: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Dirichlet concentration of the label partition.
    #[arg(long)]
    sigma: Option<f64>,
    /// stacking | naive | zeropad | reference
    #[arg(long)]
    strategy: Option<String>,
    /// Stop after this many rounds without validation macro-F1 gain.
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    min_delta: Option<f64>,

    /// Rank weight preset: volume | balanced | compute
    #[arg(long)]
    weights: Option<String>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    rmin: Option<usize>,
    #[arg(long)]
    rmax: Option<usize>,
    /// Comma-separated per-client memory budgets in GB.
    #[arg(long, value_delimiter = ',')]
    vram: Option<Vec<f64>>,

    #[arg(long)]
    depth: Option<usize>,
    /// Retained block indices, e.g. 0-4,6,7
    #[arg(long)]
    keep: Option<String>,
    #[arg(long)]
    split_point: Option<usize>,
    #[arg(long)]
    d_model: Option<usize>,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    embedding_std: Option<f64>,

    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads; affects wall time only.
    #[arg(long, default_value_t = 1)]
    workers: usize,
    #[arg(long, default_value = "fedflow-out")]
    out: PathBuf,
    /// Add per-round wall time to the metrics log (makes it non-reproducible).
    #[arg(long)]
    record_wall_time: bool,
    #[arg(long)]
    quiet: bool,
}

/// Error tagged with the exit code it maps to.
struct Failure {
    code: u8,
    error: anyhow::Error,
}

fn config_failure(e: impl Into<anyhow::Error>) -> Failure {
    Failure {
        code: EXIT_CONFIG,
        error: e.into(),
    }
}

fn core_failure(e: fedflow::Error) -> Failure {
    Failure {
        code: if e.is_config() { EXIT_CONFIG } else { EXIT_RUNTIME },
        error: e.into(),
    }
}

fn load_config(path: &Path) -> anyhow::Result<ScenarioConfig> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let value: serde_json::Value = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    let config = match value.get("config").or_else(|| value.get("base_config")) {
        Some(echo) => echo.clone(),
        None => value,
    };
    serde_json::from_value(config).with_context(|| format!("reading scenario config from {}", path.display()))
}

impl ScenarioArgs {
    fn build(&self) -> Result<ScenarioConfig, Failure> {
        let mut c = match &self.config {
            Some(path) => load_config(path).map_err(config_failure)?,
            None => ScenarioConfig::default(),
        };

        if let Some(path) = &self.dataset {
            if !path.is_file() {
                return Err(config_failure(anyhow::anyhow!(
                    "configuration error in `dataset`: {} is not a readable file",
                    path.display()
                )));
            }
            let mut schema = IngestSchema::default();
            if let DataSource::File { schema: s, .. } = &c.data {
                schema = s.clone();
            }
            c.data = DataSource::File {
                path: path.clone(),
                schema,
            };
        } else if self.synthetic && !matches!(c.data, DataSource::Synthetic(_)) {
            c.data = DataSource::Synthetic(SynthSpec::default());
        }
        match &mut c.data {
            DataSource::Synthetic(s) => {
                set(&mut s.num_classes, self.classes);
                set(&mut s.per_class, self.per_class);
                set(&mut s.vocab_size, self.vocab);
                set(&mut s.seq_len, self.seq_len);
                set(&mut s.separation, self.separation);
            }
            DataSource::File { schema, .. } => {
                if self.classes.is_some() || self.per_class.is_some() || self.seq_len.is_some() || self.separation.is_some() {
                    return Err(config_failure(anyhow::anyhow!(
                        "configuration error in `classes`: synthetic options do not apply to --dataset"
                    )));
                }
                set(&mut schema.tokens_field, self.tokens_field.clone());
                set(&mut schema.label_field, self.label_field.clone());
                if self.vocab.is_some() {
                    schema.vocab_size = self.vocab;
                }
            }
        }

        let f = &mut c.federation;
        set(&mut f.clients, self.clients);
        set(&mut f.clients_per_round, self.per_round);
        set(&mut f.rounds, self.rounds);
        set(&mut f.local_epochs, self.epochs);
        set(&mut f.learning_rate, self.lr);
        set(&mut f.batch_size, self.batch_size);
        set(&mut f.sigma, self.sigma);
        set(&mut f.seed, self.seed);
        set(&mut f.min_delta, self.min_delta);
        if self.patience.is_some() {
            f.patience = self.patience;
        }
        if let Some(s) = &self.strategy {
            f.strategy = s.parse::<Strategy>().map_err(core_failure)?;
        }

        let p = f.rank_policy;
        let (r_min, r_max) = (self.rmin.unwrap_or(p.r_min), self.rmax.unwrap_or(p.r_max));
        let base = match &self.weights {
            Some(name) => RankPolicy::preset(name, r_min, r_max).map_err(core_failure)?,
            None => RankPolicy { r_min, r_max, ..p },
        };
        f.rank_policy = RankPolicy::new(
            self.alpha.unwrap_or(base.alpha),
            self.beta.unwrap_or(base.beta),
            self.gamma.unwrap_or(base.gamma),
            r_min,
            r_max,
        )
        .map_err(core_failure)?;
        set(&mut c.vram_gb, self.vram.clone());

        let m = &mut c.model;
        set(&mut m.d_model, self.d_model);
        set(&mut m.hidden, self.hidden);
        set(&mut m.embedding_std, self.embedding_std);
        set(&mut m.split_point, self.split_point);
        if let Some(depth) = self.depth {
            m.source_depth = depth;
            if self.keep.is_none() {
                m.keep = (0..depth).collect();
            }
        }
        if let Some(text) = &self.keep {
            m.keep = LayerIndexSet::parse(text, m.source_depth)
                .map_err(|e| config_failure(anyhow::anyhow!("configuration error in `keep`: {e}")))?
                .indices()
                .to_vec();
        }
        c.validate().map_err(core_failure)?;
        Ok(c)
    }

    fn options(&self) -> RunOptions {
        RunOptions {
            workers: self.workers,
            record_wall_time: self.record_wall_time,
        }
    }
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

fn run(args: &ScenarioArgs) -> Result<(), Failure> {
    let config = args.build()?;
    let output = scenario::run(&config, args.options()).map_err(core_failure)?;
    output.write_artifacts(&args.out).map_err(core_failure)?;
    if !args.quiet {
        for m in output.history() {
            println!(
                "round {:>3}  acc {:.4}  pr {:.4}  rc {:.4}  f1 {:.4}  val_f1 {:.4}",
                m.round, m.acc, m.macro_pr, m.macro_rc, m.macro_f1, m.val_macro_f1
            );
        }
        println!("ranks {:?}", output.federation.ranks());
        println!("artifacts written to {}", args.out.display());
    }
    Ok(())
}

fn sweep(axis: &str, values: &[String], args: &ScenarioArgs) -> Result<(), Failure> {
    let axis: SweepAxis = axis.parse().map_err(core_failure)?;
    let config = args.build()?;
    let report = scenario::sweep(&config, axis, values, args.options()).map_err(core_failure)?;
    std::fs::create_dir_all(&args.out).map_err(|e| core_failure(e.into()))?;
    let mut text = serde_json::to_string_pretty(&report).map_err(|e| core_failure(e.into()))?;
    text.push('\n');
    std::fs::write(args.out.join("sweep.json"), text).map_err(|e| core_failure(e.into()))?;
    if !args.quiet {
        print!("{}", report.table());
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run(args) => run(args),
        Command::Sweep { axis, values, scenario } => sweep(axis, values, scenario),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure { code, error }) => {
            eprintln!("error: {error:#}");
            ExitCode::from(code)
        }
    }
}
