use std::fmt;
use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use kgc_core::checkpoint::{self, CheckpointError};
use kgc_core::encoder::{EncoderError, PrecomputedEncoder, ReferenceEncoder};
use kgc_core::kg::KgError;
use kgc_core::ranking::{self, EvalError};
use kgc_core::trainer::{TrainError, Trainer};
use kgc_core::{load_graph, DatasetPaths, Encoder, EncoderParams64, KnowledgeGraph, LossKind, RerankConfig, TrainConfig};
use serde::Serialize;

use crate::args::{
    train_config, DataArgs, DirectionArg, EncoderSource, EvaluateArgs, ExportArgs, PredictArgs,
    RunArgs, SweepArgs, SweepAxis, TrainArgs,
};

#[derive(Debug)]
pub enum CliError {
    /// Bad input data or arguments.
    Data(String),
    /// Training diverged.
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Data(_) => 1,
            CliError::Numeric(_) => 2,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Data(m) | CliError::Numeric(m) => f.write_str(m),
        }
    }
}

macro_rules! data_error {
    ($($t:ty),*) => {$(
        impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                CliError::Data(e.to_string())
            }
        }
    )*};
}

data_error!(KgError, EncoderError, CheckpointError, EvalError, serde_json::Error);

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        if e.is_numeric() {
            CliError::Numeric(e.to_string())
        } else {
            CliError::Data(e.to_string())
        }
    }
}

fn io_error(path: &Path) -> impl FnOnce(io::Error) -> CliError + '_ {
    move |e| CliError::Data(format!("{}: {e}", path.display()))
}

type Result<T> = std::result::Result<T, CliError>;

fn load(data: &DataArgs) -> Result<KnowledgeGraph> {
    let g = load_graph(&DatasetPaths {
        train: data.train.clone(),
        valid: data.valid.clone(),
        test: data.test.clone(),
        entities: data.entities.clone(),
        relations: data.relations.clone(),
    })?;
    Ok(g.add_inverse_triples()?)
}

fn pool(run: &RunArgs) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(run.threads.max(1))
        .build()
        .map_err(|e| CliError::Data(e.to_string()))
}

enum LoadedEncoder {
    Checkpoint(EncoderParams64, usize),
    Precomputed(PrecomputedEncoder<f64>),
}

impl LoadedEncoder {
    fn open(src: &EncoderSource) -> Result<Self> {
        if let Some(path) = &src.checkpoint {
            let params = checkpoint::load::<f64>(path)
                .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
            if src.dim.is_some_and(|d| d != params.dim) || src.buckets.is_some_and(|b| b != params.buckets) {
                return Err(CliError::Data(format!(
                    "dimension mismatch: checkpoint {} is {}x{} but {}x{} was requested",
                    path.display(),
                    params.buckets,
                    params.dim,
                    src.buckets.unwrap_or(params.buckets),
                    src.dim.unwrap_or(params.dim),
                )));
            }
            return Ok(Self::Checkpoint(params, src.max_tokens));
        }
        let (Some(ents), Some(queries)) = (&src.embeddings, &src.query_embeddings) else {
            return Err(CliError::Data("either --checkpoint or --embeddings with --query-embeddings is required".into()));
        };
        let enc = PrecomputedEncoder::from_entity_file(ents)?.with_query_file(queries)?;
        if src.dim.is_some_and(|d| d != enc.dim()) {
            return Err(CliError::Data(format!(
                "dimension mismatch: embeddings are {}-dimensional but {} was requested",
                enc.dim(),
                src.dim.unwrap_or_default()
            )));
        }
        Ok(Self::Precomputed(enc))
    }

    fn with<R>(&self, f: impl FnOnce(&dyn Encoder<f64>) -> R) -> R {
        match self {
            Self::Checkpoint(p, max_tokens) => f(&ReferenceEncoder::new(p, *max_tokens)),
            Self::Precomputed(enc) => f(enc),
        }
    }
}

fn check_graph_fit(g: &KnowledgeGraph, enc: &LoadedEncoder) -> Result<()> {
    if let LoadedEncoder::Precomputed(p) = enc {
        for e in g.entities() {
            p.encode_entity(g, g.entity_id(&e.id)?)?;
        }
    }
    Ok(())
}

fn write_text(path: Option<&Path>, text: &str) -> Result<()> {
    match path {
        Some(p) => fs::write(p, text).map_err(io_error(p)),
        None => {
            let mut out = io::stdout().lock();
            out.write_all(text.as_bytes())
                .and_then(|_| out.flush())
                .map_err(|e| CliError::Data(e.to_string()))
        }
    }
}

pub fn train(args: &TrainArgs) -> Result<()> {
    let g = load(&args.data)?;
    let cfg = args.train_config();
    let params = train_model(&g, &cfg, Some(&log_path(args)))?;
    checkpoint::save(&params, &args.out).map_err(|e| CliError::Data(format!("{}: {e}", args.out.display())))?;
    Ok(())
}

fn log_path(args: &TrainArgs) -> PathBuf {
    args.log.clone().unwrap_or_else(|| {
        let mut p = args.out.clone().into_os_string();
        p.push(".log");
        p.into()
    })
}

/// Trains from a fresh initialization, appending one line per step to `log`.
fn train_model(g: &KnowledgeGraph, cfg: &TrainConfig, log: Option<&Path>) -> Result<EncoderParams64> {
    cfg.validate()?;
    let mut sink = match log {
        Some(p) => Some(BufWriter::new(fs::File::create(p).map_err(io_error(p))?)),
        None => None,
    };
    let mut trainer = Trainer::new(g, cfg.init_params::<f64>(), cfg.clone())?;
    let mut written = 0;
    for epoch in 0..cfg.epochs {
        let res = trainer.run_epoch(epoch);
        if let Some(w) = sink.as_mut() {
            for rec in &trainer.log()[written..] {
                writeln!(w, "{rec}").map_err(|e| CliError::Data(e.to_string()))?;
            }
            w.flush().map_err(|e| CliError::Data(e.to_string()))?;
        }
        written = trainer.log().len();
        res?;
    }
    Ok(trainer.into_params())
}

pub fn evaluate(args: &EvaluateArgs) -> Result<()> {
    let g = load(&args.data)?;
    let enc = LoadedEncoder::open(&args.source)?;
    check_graph_fit(&g, &enc)?;
    let rr = args.rerank.config();
    let result = pool(&args.run)?.install(|| enc.with(|e| ranking::run_evaluation(&g, &e, rr.as_ref())))?;
    let mut text = serde_json::to_string_pretty(&result.1.report())?;
    text.push('\n');
    write_text(args.output.as_deref(), &text)
}

pub fn predict(args: &PredictArgs) -> Result<()> {
    let g = load(&args.data)?;
    let head = g.entity_id(&args.entity)?;
    let mut relation = g.relation_id(&args.relation)?;
    if g.relation(relation).is_inverse {
        return Err(CliError::Data(format!("{}: expected a forward relation id", args.relation)));
    }
    if args.direction == DirectionArg::Head {
        relation = g.inverse_of(relation).expect("augmented graph");
    }
    if args.k == 0 {
        return Err(EvalError::ZeroK.into());
    }
    let enc = LoadedEncoder::open(&args.source)?;
    let rr = args.rerank.config();
    let top = pool(&args.run)?.install(|| {
        enc.with(|e| {
            let idx = ranking::build_index(&g, &e)?;
            ranking::predict_topk(&g, &idx, &e, head, relation, args.k, rr.as_ref())
        })
    })?;
    let mut text = String::new();
    for (i, p) in top.iter().enumerate() {
        text.push_str(&format!("{}\t{}\t{}\t{}\n", i + 1, g.entity(p.entity).id, p.score, p.known));
    }
    write_text(None, &text)
}

pub fn export_embeddings(args: &ExportArgs) -> Result<()> {
    let g = load(&args.data)?;
    let enc = LoadedEncoder::open(&args.source)?;
    let idx = pool(&args.run)?.install(|| enc.with(|e| ranking::build_index(&g, &e)))?;
    let file = fs::File::create(&args.out).map_err(io_error(&args.out))?;
    let mut w = BufWriter::new(file);
    for (e, row) in idx.ids.iter().zip(idx.matrix.outer_iter()) {
        let values: Vec<String> = row.iter().map(f64::to_string).collect();
        writeln!(w, "{}\t{}", g.entity(*e).id, values.join(" ")).map_err(io_error(&args.out))?;
    }
    w.flush().map_err(io_error(&args.out))
}

#[derive(Debug, Serialize)]
struct SweepRow {
    value: String,
    mrr: f64,
    hits1: f64,
    hits3: f64,
    hits10: f64,
}

fn sweep_point(base: &TrainConfig, axis: SweepAxis, value: &str) -> Result<TrainConfig> {
    let bad = |e: &dyn fmt::Display| CliError::Data(format!("invalid sweep value {value:?}: {e}"));
    let mut cfg = base.clone();
    match axis {
        SweepAxis::NegativesCount => cfg.max_negatives = Some(value.parse().map_err(|e| bad(&e))?),
        SweepAxis::LossKind => cfg.loss_kind = value.parse::<LossKind>().map_err(|e| bad(&e))?,
        SweepAxis::BatchSize => cfg.batch_size = value.parse().map_err(|e| bad(&e))?,
        SweepAxis::Margin => cfg.loss.gamma = value.parse().map_err(|e| bad(&e))?,
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn sweep(args: &SweepArgs) -> Result<()> {
    let g = load(&args.data)?;
    let base = train_config(&args.model, &args.optim, &args.run);
    let configs: Vec<TrainConfig> = args
        .values
        .iter()
        .map(|v| sweep_point(&base, args.axis, v.trim()))
        .collect::<Result<_>>()?;
    fs::create_dir_all(&args.out_dir).map_err(io_error(&args.out_dir))?;
    let rr: Option<RerankConfig> = args.rerank.config();
    let eval_pool = pool(&args.run)?;
    let mut rows = Vec::new();
    for (value, cfg) in args.values.iter().map(|v| v.trim()).zip(&configs) {
        let params = train_model(&g, cfg, None)?;
        let enc = ReferenceEncoder::new(&params, cfg.encoder.max_tokens);
        let (_, result) = eval_pool.install(|| ranking::run_evaluation(&g, &enc, rr.as_ref()))?;
        let report = result.report();
        let path = args.out_dir.join(format!("point-{}.json", value.replace(['/', '\\'], "_")));
        let mut text = serde_json::to_string_pretty(&report)?;
        text.push('\n');
        fs::write(&path, text).map_err(io_error(&path))?;
        rows.push(SweepRow {
            value: value.to_owned(),
            mrr: report.mrr,
            hits1: report.hits1,
            hits3: report.hits3,
            hits10: report.hits10,
        });
    }
    let mut table = String::from("value\tmrr\thits1\thits3\thits10\n");
    for r in &rows {
        table.push_str(&format!(
            "{}\t{:.4}\t{:.4}\t{:.4}\t{:.4}\n",
            r.value, r.mrr, r.hits1, r.hits3, r.hits10
        ));
    }
    let summary = args.out_dir.join("summary.tsv");
    fs::write(&summary, &table).map_err(io_error(&summary))?;
    let summary_json = args.out_dir.join("summary.json");
    let mut text = serde_json::to_string_pretty(&rows)?;
    text.push('\n');
    fs::write(&summary_json, text).map_err(io_error(&summary_json))?;
    write_text(None, &table)
}
