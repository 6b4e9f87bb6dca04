//! Command-line front end: `synth`, `embed`, `train`, `eval`, `ablate` and
//! `dump-features`.
//!
//! Settings come from an optional TOML file with one section per module
//! (`[data]`, `[model]`, `[training]`, `[embed]`, `[synth]`); flags override
//! file values. Every command that writes artifacts echoes the effective
//! configuration to `config.toml` in its output directory.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::data::{
    load_documents, synth_dataset, DataPaths, Dataset, IndicatorTransform, LabelSpec, SplitPart,
    SplitRatios, SynthConfig,
};
use crate::embed_client::{build_embedding_table, Backend, ProviderConfig};
use crate::error::{MsgcaError, Result};
use crate::evaluation::{accuracy, mcc, run_variant, stability_report, EvalReport};
use crate::model::{Model, ModelConfig, Variant};
use crate::training::{
    confusion, load_checkpoint, train, AdamConfig, BatchOrder, Checkpoint, EpochRecord, Precision,
    TrainConfig, TrainOptions,
};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Directory with `prices.csv`, `documents.jsonl`, `embeddings.jsonl`
    /// and `graph.tsv`.
    pub dir: Option<PathBuf>,
    pub labels: LabelSpec,
    pub transform: IndicatorTransform,
    pub split: SplitRatios,
}

/// Training settings other than the network shape.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_frac: f64,
    pub seed: u64,
    pub precision: Precision,
    pub grad_clip: Option<f64>,
    pub batch_order: BatchOrder,
    pub adam: AdamConfig,
    pub eval_batch: usize,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        TrainingConfig {
            epochs: t.epochs,
            batch_size: t.batch_size,
            lr: t.lr,
            warmup_frac: t.warmup_frac,
            seed: t.seed,
            precision: t.precision,
            grad_clip: t.grad_clip,
            batch_order: t.batch_order,
            adam: t.adam,
            eval_batch: t.eval_batch,
        }
    }
}

/// Everything a run reads from the config file.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataConfig,
    pub model: ModelConfig,
    pub training: TrainingConfig,
    pub embed: ProviderConfig,
    pub synth: SynthConfig,
}

impl RunConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<RunConfig> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| MsgcaError::io(path, e))?;
        toml::from_str(&text).map_err(|e| MsgcaError::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| MsgcaError::Format(e.to_string()))
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.training;
        TrainConfig {
            model: self.model.clone(),
            epochs: t.epochs,
            batch_size: t.batch_size,
            lr: t.lr,
            warmup_frac: t.warmup_frac,
            seed: t.seed,
            precision: t.precision,
            grad_clip: t.grad_clip,
            batch_order: t.batch_order,
            adam: t.adam,
            eval_batch: t.eval_batch,
        }
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "msgca",
    version,
    about = "Multimodal stock-movement prediction"
)]
pub struct Cli {
    /// TOML config file; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory (default: runs/<timestamp>).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Log filter, e.g. `info` or `msgca=debug`.
    #[arg(long, global = true, default_value = "info")]
    pub log: String,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic dataset with planted document signal.
    Synth(SynthArgs),
    /// Embed documents into embeddings.jsonl.
    Embed(EmbedArgs),
    /// Train a model, checkpointing every epoch.
    Train(TrainArgs),
    /// Evaluate a checkpoint's best weights on the test split.
    Eval(EvalArgs),
    /// Train several variants over several seeds and report test metrics.
    Ablate(AblateArgs),
    /// Write the fusion stability diagnostic for one stock.
    DumpFeatures(DumpArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub stocks: Option<usize>,
    #[arg(long)]
    pub days: Option<usize>,
    /// Document embedding width.
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub doc_signal: Option<f64>,
    #[arg(long)]
    pub missing_rate: Option<f64>,
    #[arg(long)]
    pub conflict_rate: Option<f64>,
    #[arg(long)]
    pub sectors: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EmbedArgs {
    /// documents.jsonl to embed.
    #[arg(long)]
    pub documents: PathBuf,
    /// Table to create or complete (default: <out>/embeddings.jsonl).
    #[arg(long)]
    pub table: Option<PathBuf>,
    #[arg(long, value_parser = parse_backend)]
    pub backend: Option<Backend>,
    /// Text cache for the file backend.
    #[arg(long)]
    pub cache: Option<PathBuf>,
    #[arg(long)]
    pub endpoint: Option<String>,
    /// Environment variable holding the bearer token.
    #[arg(long)]
    pub token_env: Option<String>,
    #[arg(long)]
    pub model: Option<String>,
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long)]
    pub max_batch: Option<usize>,
    #[arg(long)]
    pub max_parallel: Option<usize>,
}

#[derive(Debug, Args, Clone, Default)]
pub struct ModelArgs {
    /// Data directory (prices.csv, documents.jsonl, embeddings.jsonl, graph.tsv).
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub warmup_frac: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub grad_clip: Option<f64>,
    /// Hidden width d.
    #[arg(long)]
    pub d: Option<usize>,
    /// Window length.
    #[arg(long)]
    pub ws: Option<usize>,
    /// Cross-attention heads.
    #[arg(long)]
    pub heads: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: ModelArgs,
    #[arg(long, value_parser = parse_variant)]
    pub variant: Option<Variant>,
    /// Continue from the checkpoint in the output directory.
    #[arg(long)]
    pub resume: bool,
    /// Stop after this many epochs in total (resumable later).
    #[arg(long)]
    pub stop_after: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Data directory; defaults to the one recorded with the checkpoint.
    #[arg(long)]
    pub data: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub common: ModelArgs,
    /// Comma-separated variants (default: all six).
    #[arg(long, value_delimiter = ',', value_parser = parse_variant)]
    pub variants: Option<Vec<Variant>>,
    /// Comma-separated seeds.
    #[arg(long, value_delimiter = ',', default_value = "0,1,2,3,4")]
    pub seeds: Vec<u64>,
}

#[derive(Debug, Args)]
pub struct DumpArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Stock symbol; defaults to the first stock.
    #[arg(long)]
    pub symbol: Option<String>,
    /// Which split to draw windows from: train, valid or test.
    #[arg(long, default_value = "test", value_parser = parse_part)]
    pub part: SplitPart,
}

fn parse_variant(s: &str) -> std::result::Result<Variant, String> {
    s.parse::<Variant>().map_err(|e| e.to_string())
}

fn parse_backend(s: &str) -> std::result::Result<Backend, String> {
    match s {
        "file" => Ok(Backend::File),
        "http" => Ok(Backend::Http),
        _ => Err(format!("unknown backend {s:?} (expected file or http)")),
    }
}

fn parse_part(s: &str) -> std::result::Result<SplitPart, String> {
    match s {
        "train" => Ok(SplitPart::Train),
        "valid" => Ok(SplitPart::Valid),
        "test" => Ok(SplitPart::Test),
        _ => Err(format!(
            "unknown split part {s:?} (expected train, valid or test)"
        )),
    }
}

/// Parses `args` (program name first), runs the command, and returns the
/// process exit status.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(&cli.log))
        .format_timestamp(None)
        .try_init();
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn output_dir(cli: &Cli) -> Result<PathBuf> {
    let dir = match &cli.out {
        Some(d) => d.clone(),
        None => {
            PathBuf::from("runs").join(chrono::Local::now().format("%Y%m%d-%H%M%S").to_string())
        }
    };
    std::fs::create_dir_all(&dir).map_err(|e| MsgcaError::io(&dir, e))?;
    Ok(dir)
}

fn base_config(cli: &Cli) -> Result<RunConfig> {
    match &cli.config {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

fn echo_config(cfg: &RunConfig, dir: &Path) -> Result<()> {
    let path = dir.join("config.toml");
    std::fs::write(&path, cfg.to_toml()?).map_err(|e| MsgcaError::io(&path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text =
        serde_json::to_string_pretty(value).map_err(|e| MsgcaError::Format(e.to_string()))?;
    std::fs::write(path, text + "\n").map_err(|e| MsgcaError::io(path, e))
}

fn execute(cli: &Cli) -> Result<()> {
    let mut cfg = base_config(cli)?;
    match &cli.command {
        Command::Synth(a) => cmd_synth(cli, &mut cfg, a),
        Command::Embed(a) => cmd_embed(cli, &mut cfg, a),
        Command::Train(a) => cmd_train(cli, &mut cfg, a),
        Command::Eval(a) => cmd_eval(cli, a),
        Command::Ablate(a) => cmd_ablate(cli, &mut cfg, a),
        Command::DumpFeatures(a) => cmd_dump(cli, a),
    }
}

fn set<T>(slot: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *slot = v;
    }
}

fn cmd_synth(cli: &Cli, cfg: &mut RunConfig, a: &SynthArgs) -> Result<()> {
    let s = &mut cfg.synth;
    set(&mut s.n_stocks, a.stocks);
    set(&mut s.n_days, a.days);
    set(&mut s.dim, a.dim);
    set(&mut s.seed, a.seed);
    set(&mut s.doc_signal, a.doc_signal);
    set(&mut s.doc_missing_rate, a.missing_rate);
    set(&mut s.conflict_rate, a.conflict_rate);
    set(&mut s.n_sectors, a.sectors);
    let synth = synth_dataset(&cfg.synth)?;
    let dir = output_dir(cli)?;
    synth.write_dir(&dir)?;
    echo_config(cfg, &dir)?;
    log::info!("wrote synthetic dataset to {}", dir.display());
    Ok(())
}

fn cmd_embed(cli: &Cli, cfg: &mut RunConfig, a: &EmbedArgs) -> Result<()> {
    let e = &mut cfg.embed;
    set(&mut e.backend, a.backend);
    if a.cache.is_some() {
        e.cache = a.cache.clone();
    }
    if a.endpoint.is_some() {
        e.endpoint = a.endpoint.clone();
    }
    if a.token_env.is_some() {
        e.token_env = a.token_env.clone();
    }
    set(&mut e.model, a.model.clone());
    set(&mut e.dim, a.dim);
    set(&mut e.max_batch, a.max_batch);
    set(&mut e.max_parallel, a.max_parallel);
    cfg.embed.validate()?;
    let days = load_documents(&a.documents)?;
    let dir = output_dir(cli)?;
    let table_path = a
        .table
        .clone()
        .unwrap_or_else(|| dir.join("embeddings.jsonl"));
    let table = build_embedding_table(&days, &cfg.embed, &table_path)?;
    echo_config(cfg, &dir)?;
    log::info!("{} embedded days in {}", table.len(), table_path.display());
    Ok(())
}

fn apply_model_args(cfg: &mut RunConfig, a: &ModelArgs) {
    if a.data.is_some() {
        cfg.data.dir = a.data.clone();
    }
    let t = &mut cfg.training;
    set(&mut t.epochs, a.epochs);
    set(&mut t.batch_size, a.batch_size);
    set(&mut t.lr, a.lr);
    set(&mut t.warmup_frac, a.warmup_frac);
    set(&mut t.seed, a.seed);
    if a.grad_clip.is_some() {
        t.grad_clip = a.grad_clip;
    }
    set(&mut cfg.model.d, a.d);
    set(&mut cfg.model.ws, a.ws);
    set(&mut cfg.model.fusion.heads, a.heads);
}

/// Loads the dataset named in `cfg` and aligns `cfg.model.doc_dim` with the
/// embedding width found on disk.
fn load_dataset(cfg: &mut RunConfig) -> Result<Dataset> {
    let dir =
        cfg.data.dir.clone().ok_or_else(|| {
            MsgcaError::Config("no data directory (use --data or [data] dir)".into())
        })?;
    let ds = Dataset::load(
        &DataPaths::in_dir(&dir),
        cfg.data.labels,
        cfg.data.transform,
        cfg.model.ws,
        cfg.data.split,
    )?;
    if ds.panel.dim > 0 && ds.panel.dim != cfg.model.doc_dim {
        log::info!(
            "using document width {} found in {}",
            ds.panel.dim,
            dir.display()
        );
        cfg.model.doc_dim = ds.panel.dim;
    }
    Ok(ds)
}

/// Summary written next to a training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub epochs: usize,
    pub best_epoch: usize,
    pub best_valid_mcc: f64,
    pub test_acc: f64,
    pub test_mcc: f64,
    pub mean_seconds_per_epoch: f64,
    pub peak_mem_bytes: u64,
}

fn summarize(
    history: &[EpochRecord],
    ckpt: &Checkpoint,
    test_acc: f64,
    test_mcc: f64,
) -> TrainSummary {
    let n = history.len().max(1) as f64;
    TrainSummary {
        epochs: history.len(),
        best_epoch: ckpt.best.as_ref().map_or(0, |b| b.epoch),
        best_valid_mcc: ckpt.best.as_ref().map_or(0.0, |b| b.valid_mcc),
        test_acc,
        test_mcc,
        mean_seconds_per_epoch: history.iter().map(|r| r.seconds).sum::<f64>() / n,
        peak_mem_bytes: history.iter().map(|r| r.peak_mem_bytes).max().unwrap_or(0),
    }
}

fn cmd_train(cli: &Cli, cfg: &mut RunConfig, a: &TrainArgs) -> Result<()> {
    apply_model_args(cfg, &a.common);
    set(&mut cfg.model.variant, a.variant);
    let ds = load_dataset(cfg)?;
    let tc = cfg.train_config();
    tc.validate()?;
    let dir = output_dir(cli)?;
    echo_config(cfg, &dir)?;
    let ckpt_path = dir.join("checkpoint.ckpt");
    let resume = if a.resume {
        Some(load_checkpoint(&ckpt_path)?)
    } else {
        None
    };
    let history_csv = dir.join("history.csv");
    if resume.is_none() && history_csv.exists() {
        std::fs::remove_file(&history_csv).map_err(|e| MsgcaError::io(&history_csv, e))?;
    }
    let options = TrainOptions {
        checkpoint_dir: Some(dir.clone()),
        history_csv: Some(history_csv),
        stop_after_epoch: a.stop_after,
    };
    let out = train(&ds, &tc, &options, resume)?;
    let cm = confusion(
        &out.model.params,
        &tc.model,
        &ds,
        &ds.split.test,
        tc.eval_batch,
    )?;
    let summary = summarize(out.history(), &out.checkpoint, accuracy(&cm)?, mcc(&cm));
    write_json(&dir.join("metrics.json"), &summary)?;
    println!(
        "best epoch {} valid mcc {:.4}; test acc {:.4} mcc {:.4}",
        summary.best_epoch, summary.best_valid_mcc, summary.test_acc, summary.test_mcc
    );
    Ok(())
}

/// Checkpoint plus the run config saved beside it.
fn open_run(checkpoint: &Path, data: &Option<PathBuf>) -> Result<(RunConfig, Checkpoint, Dataset)> {
    let ckpt = load_checkpoint(checkpoint)?;
    let cfg_path = checkpoint
        .parent()
        .map(|p| p.join("config.toml"))
        .filter(|p| p.exists());
    let mut cfg = match cfg_path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if data.is_some() {
        cfg.data.dir = data.clone();
    }
    cfg.model = ckpt.config.model.clone();
    let ds = load_dataset(&mut cfg)?;
    if cfg.model != ckpt.config.model {
        return Err(MsgcaError::Config(format!(
            "data document width {} does not match the checkpoint's {}",
            cfg.model.doc_dim, ckpt.config.model.doc_dim
        )));
    }
    Ok((cfg, ckpt, ds))
}

#[derive(Serialize)]
struct EvalResult {
    samples: usize,
    test_acc: f64,
    test_mcc: f64,
}

fn cmd_eval(cli: &Cli, a: &EvalArgs) -> Result<()> {
    let (_, ckpt, ds) = open_run(&a.checkpoint, &a.data)?;
    let params = ckpt.best_params();
    let cm = confusion(
        &params,
        &ckpt.config.model,
        &ds,
        &ds.split.test,
        ckpt.config.eval_batch,
    )?;
    let res = EvalResult {
        samples: ds.split.test.len(),
        test_acc: accuracy(&cm)?,
        test_mcc: mcc(&cm),
    };
    let dir = match &cli.out {
        Some(_) => output_dir(cli)?,
        None => a
            .checkpoint
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_default(),
    };
    write_json(&dir.join("eval.json"), &res)?;
    println!(
        "test acc {:.6} mcc {:.6} ({} samples)",
        res.test_acc, res.test_mcc, res.samples
    );
    Ok(())
}

fn cmd_ablate(cli: &Cli, cfg: &mut RunConfig, a: &AblateArgs) -> Result<()> {
    apply_model_args(cfg, &a.common);
    let ds = load_dataset(cfg)?;
    let tc = cfg.train_config();
    tc.validate()?;
    let variants = a.variants.clone().unwrap_or_else(|| Variant::ALL.to_vec());
    let dir = output_dir(cli)?;
    echo_config(cfg, &dir)?;
    let mut report = EvalReport::default();
    for v in variants {
        report.variants.push(run_variant(v, &ds, &tc, &a.seeds)?);
    }
    let csv = dir.join("report.csv");
    let file = std::fs::File::create(&csv).map_err(|e| MsgcaError::io(&csv, e))?;
    report.write_csv(file)?;
    let json = dir.join("report.json");
    std::fs::write(&json, report.to_json()?).map_err(|e| MsgcaError::io(&json, e))?;
    for r in &report.variants {
        println!(
            "{}: acc {:.4} ± {:.4}  mcc {:.4} ± {:.4}",
            r.variant, r.acc_mean, r.acc_var, r.mcc_mean, r.mcc_var
        );
    }
    Ok(())
}

fn cmd_dump(cli: &Cli, a: &DumpArgs) -> Result<()> {
    let (_, ckpt, ds) = open_run(&a.checkpoint, &a.data)?;
    let stock = match &a.symbol {
        Some(s) => ds
            .panel
            .stocks
            .iter()
            .position(|f| &f.symbol == s)
            .ok_or_else(|| MsgcaError::Data(format!("unknown symbol {s}")))?,
        None => 0,
    };
    let windows: Vec<_> = ds
        .split
        .part(a.part)
        .iter()
        .filter(|w| w.stock == stock)
        .cloned()
        .collect();
    let model = Model {
        config: ckpt.config.model.clone(),
        params: ckpt.best_params(),
    };
    let rep = stability_report(&model, &ds, &windows, ckpt.config.eval_batch)?;
    let dir = match &cli.out {
        Some(_) => output_dir(cli)?,
        None => a
            .checkpoint
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_default(),
    };
    let path = dir.join("stability.csv");
    let file = std::fs::File::create(&path).map_err(|e| MsgcaError::io(&path, e))?;
    rep.write_csv(file)?;
    for s in &rep.series {
        println!(
            "stage {} {}: smoothness {:.6}",
            s.stage,
            s.kind.name(),
            s.smoothness
        );
    }
    Ok(())
}
