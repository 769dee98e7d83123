use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use kgc_core::contrastive::LossConfig;
use kgc_core::encoder::EncoderConfig;
use kgc_core::{LossKind, NegativeSet, RerankConfig, TrainConfig};

#[derive(Debug, Parser)]
#[command(
    name = "kgc",
    version,
    about = "Train and evaluate a contrastive bi-encoder for knowledge graph completion",
    args_override_self = true
)]
pub struct Cli {
    /// Read `key = value` defaults from a file; flags on the command line win.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train the encoder and write a checkpoint plus a per-step log.
    Train(TrainArgs),
    /// Rank every test triple in both directions and print a JSON report.
    Evaluate(EvaluateArgs),
    /// Print the top-k answers for one query.
    Predict(PredictArgs),
    /// Write one `entity_id<TAB>vector` line per entity.
    ExportEmbeddings(ExportArgs),
    /// Train and evaluate once per value along one hyperparameter axis.
    Sweep(SweepArgs),
}

#[derive(Debug, Clone, Args)]
pub struct DataArgs {
    /// Training triples (`head<TAB>relation<TAB>tail`).
    #[arg(long, value_name = "FILE")]
    pub train: PathBuf,
    /// Validation triples.
    #[arg(long, value_name = "FILE")]
    pub valid: PathBuf,
    /// Test triples.
    #[arg(long, value_name = "FILE")]
    pub test: PathBuf,
    /// Entity descriptions (`id<TAB>name<TAB>description`).
    #[arg(long, value_name = "FILE")]
    pub entities: PathBuf,
    /// Relation descriptions (`id<TAB>name<TAB>description`).
    #[arg(long, value_name = "FILE")]
    pub relations: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct RunArgs {
    /// Seed for initialization, shuffling and dropout.
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    /// Worker threads; 1 gives bit-reproducible runs.
    #[arg(long, default_value_t = 1)]
    pub threads: usize,
}

#[derive(Debug, Clone, Args)]
pub struct ModelArgs {
    /// Hash buckets per embedding table (the last one is the separator).
    #[arg(long, default_value_t = kgc_core::encoder::DEFAULT_BUCKETS)]
    pub buckets: usize,
    /// Embedding dimension.
    #[arg(long, default_value_t = kgc_core::encoder::DEFAULT_DIM)]
    pub dim: usize,
    /// Tokens kept per text.
    #[arg(long, default_value_t = kgc_core::encoder::DEFAULT_MAX_TOKENS)]
    pub max_tokens: usize,
}

#[derive(Debug, Clone, Args)]
pub struct OptimArgs {
    #[arg(long, default_value_t = 10)]
    pub epochs: usize,
    #[arg(long, default_value_t = 256)]
    pub batch_size: usize,
    /// Peak learning rate.
    #[arg(long, default_value_t = 1e-2)]
    pub lr: f64,
    /// Linear warmup steps (clamped to the total step count).
    #[arg(long, default_value_t = 400)]
    pub warmup: usize,
    /// Global gradient-norm clip.
    #[arg(long, default_value_t = 10.0)]
    pub grad_clip: f64,
    #[arg(long, default_value_t = 1e-4)]
    pub weight_decay: f64,
    /// Token dropout during training.
    #[arg(long, default_value_t = 0.1)]
    pub dropout: f64,
    /// Loss: infonce, margin or margin_tau.
    #[arg(long, default_value = "infonce")]
    pub loss: LossKind,
    /// Additive margin on the positive score (InfoNCE).
    #[arg(long, default_value_t = 0.02)]
    pub margin: f64,
    /// Hinge margin of the margin and margin_tau losses.
    #[arg(long, default_value_t = 0.8)]
    pub hinge_margin: f64,
    /// Initial temperature (learnable).
    #[arg(long, default_value_t = 0.05)]
    pub temperature: f64,
    /// Fixed temperature of the margin_tau weighting.
    #[arg(long, default_value_t = 0.05)]
    pub margin_tau_temperature: f64,
    /// Lower clamp on the learnable temperature.
    #[arg(long, default_value_t = 1e-3)]
    pub temperature_floor: f64,
    /// Negative sources: comma-separated subset of ib, pb, sn.
    #[arg(long, default_value = "ib,pb,sn")]
    pub negatives: NegativeSet,
    /// Previous batches kept as pre-batch negatives.
    #[arg(long, default_value_t = 2)]
    pub pre_batches: usize,
    /// Weight on pre-batch scores.
    #[arg(long, default_value_t = 0.5)]
    pub pre_batch_weight: f64,
    /// Keep at most this many usable negatives per row [default: all].
    #[arg(long)]
    pub max_negatives: Option<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct RerankArgs {
    /// Boost candidates near the head in the training graph.
    #[arg(long)]
    pub rerank: bool,
    /// Score boost for neighbors.
    #[arg(long, default_value_t = kgc_core::ranking::DEFAULT_ALPHA)]
    pub alpha: f64,
    /// Neighborhood radius in hops.
    #[arg(long, default_value_t = kgc_core::ranking::DEFAULT_HOPS)]
    pub hops: usize,
}

impl RerankArgs {
    pub fn config(&self) -> Option<RerankConfig> {
        self.rerank.then_some(RerankConfig {
            alpha: self.alpha,
            hops: self.hops,
        })
    }
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub optim: OptimArgs,
    #[command(flatten)]
    pub run: RunArgs,
    /// Checkpoint to write.
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
    /// Training log [default: <out>.log].
    #[arg(long, value_name = "FILE")]
    pub log: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct EncoderSource {
    /// Trained checkpoint.
    #[arg(long, value_name = "FILE", required_unless_present = "embeddings", conflicts_with = "embeddings")]
    pub checkpoint: Option<PathBuf>,
    /// Precomputed unit entity vectors (`entity_id<TAB>v1 ... vd`) instead of a checkpoint.
    #[arg(long, value_name = "FILE", requires = "query_embeddings")]
    pub embeddings: Option<PathBuf>,
    /// Precomputed unit query vectors (`head_id<TAB>relation_id<TAB>v1 ... vd`).
    #[arg(long, value_name = "FILE")]
    pub query_embeddings: Option<PathBuf>,
    /// Expected checkpoint dimension; a mismatch is an error [default: from checkpoint].
    #[arg(long)]
    pub dim: Option<usize>,
    /// Expected checkpoint bucket count [default: from checkpoint].
    #[arg(long)]
    pub buckets: Option<usize>,
    /// Tokens kept per text.
    #[arg(long, default_value_t = kgc_core::encoder::DEFAULT_MAX_TOKENS)]
    pub max_tokens: usize,
}

#[derive(Debug, Clone, Args)]
pub struct EvaluateArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub source: EncoderSource,
    #[command(flatten)]
    pub rerank: RerankArgs,
    #[command(flatten)]
    pub run: RunArgs,
    /// Write the report here instead of standard output.
    #[arg(long, value_name = "FILE")]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum DirectionArg {
    /// `(entity, relation, ?)`
    Tail,
    /// `(?, relation, entity)`, answered as `(entity, relation⁻¹, ?)`
    Head,
}

#[derive(Debug, Clone, Args)]
pub struct PredictArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub source: EncoderSource,
    #[command(flatten)]
    pub rerank: RerankArgs,
    #[command(flatten)]
    pub run: RunArgs,
    /// Query entity id.
    #[arg(long)]
    pub entity: String,
    /// Query relation id.
    #[arg(long)]
    pub relation: String,
    /// Number of answers.
    #[arg(long, default_value_t = 10)]
    pub k: usize,
    /// Which side of the triple to predict.
    #[arg(long, value_enum, default_value_t = DirectionArg::Tail)]
    pub direction: DirectionArg,
}

#[derive(Debug, Clone, Args)]
pub struct ExportArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub source: EncoderSource,
    #[command(flatten)]
    pub run: RunArgs,
    /// Output file.
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SweepAxis {
    /// Usable negatives per row.
    NegativesCount,
    /// Loss function.
    LossKind,
    BatchSize,
    /// Additive InfoNCE margin.
    Margin,
}

#[derive(Debug, Clone, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub optim: OptimArgs,
    #[command(flatten)]
    pub rerank: RerankArgs,
    #[command(flatten)]
    pub run: RunArgs,
    /// Hyperparameter to vary.
    #[arg(long, value_enum)]
    pub axis: SweepAxis,
    /// Comma-separated values for the axis.
    #[arg(long, value_delimiter = ',', required = true)]
    pub values: Vec<String>,
    /// Directory for per-point reports and the summary.
    #[arg(long, value_name = "DIR")]
    pub out_dir: PathBuf,
}

impl TrainArgs {
    pub fn train_config(&self) -> TrainConfig {
        train_config(&self.model, &self.optim, &self.run)
    }
}

pub fn train_config(model: &ModelArgs, o: &OptimArgs, run: &RunArgs) -> TrainConfig {
    TrainConfig {
        batch_size: o.batch_size,
        epochs: o.epochs,
        peak_lr: o.lr,
        warmup_steps: o.warmup,
        grad_clip: o.grad_clip,
        weight_decay: o.weight_decay,
        dropout: o.dropout,
        loss_kind: o.loss,
        loss: LossConfig {
            gamma: o.margin,
            lambda: o.hinge_margin,
            pre_batch_weight: o.pre_batch_weight,
            tau_floor: o.temperature_floor,
        },
        margin_tau_temperature: o.margin_tau_temperature,
        init_temperature: o.temperature,
        negatives: o.negatives,
        pre_batches: o.pre_batches,
        max_negatives: o.max_negatives,
        encoder: EncoderConfig {
            buckets: model.buckets,
            dim: model.dim,
            max_tokens: model.max_tokens,
        },
        seed: run.seed,
        threads: run.threads,
    }
}
