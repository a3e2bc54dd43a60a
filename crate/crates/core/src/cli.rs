//! Command-line front end: `synth`, `train`, `eval` and `interpret`.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::data::{
    generate_synthetic, load_dataset, normalize_signals, read_signal_spec, save_dataset, split_folds, Dataset,
    DatasetFiles, Fold, FoldSizes, FoldSplit, SyntheticConfig,
};
use crate::error::{Error, Result};
use crate::model::{Checkpoint, DeepDiffModel};
use crate::train::{
    abs_quantile, attention_records, evaluate, summarize_attention, train_with_observer, AttentionSummary, EvalReport,
    SplitMetrics, TrainConfig, DEFAULT_ATTENTION_THRESHOLD,
};

#[derive(Debug, Parser)]
#[command(name = "deepdiff", version, about = "Differential gene expression from histone modification signals")]
pub struct Cli {
    /// Seed for data generation, fold splits, initialization and dropout.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Directory receiving all output files.
    #[arg(long, global = true, default_value = ".")]
    pub out_dir: PathBuf,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a planted-signal synthetic dataset.
    Synth(SynthArgs),
    /// Train a model and keep the epoch with the best validation PCC.
    Train(TrainArgs),
    /// Recompute PCC of a checkpoint on one fold.
    Eval(EvalArgs),
    /// Export attention summaries for up/down-regulated genes.
    Interpret(InterpretArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 2000)]
    pub genes: usize,
    #[arg(long, default_value_t = 5)]
    pub marks: usize,
    #[arg(long, default_value_t = 200)]
    pub bins: usize,
    /// Standard deviation of the noise on the differential target.
    #[arg(long, default_value_t = 0.1)]
    pub noise: f64,
    /// Zero-based HM row carrying the signal.
    #[arg(long, default_value_t = 1)]
    pub planted_mark: usize,
    /// First bin of the planted window (zero-based, inclusive).
    #[arg(long, default_value_t = 95)]
    pub window_start: usize,
    /// Last bin of the planted window (inclusive).
    #[arg(long, default_value_t = 105)]
    pub window_end: usize,
    #[arg(long, default_value_t = 1.0)]
    pub coefficient: f64,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Directory holding signals_A.tsv, signals_B.tsv and expression.tsv.
    #[arg(long)]
    pub data: PathBuf,
    /// key=value file of training settings; flags take precedence.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// One of raw_d, raw_c, raw, aux, raw_aux, aux_siamese, raw_aux_siamese.
    #[arg(long)]
    pub variant: Option<String>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// sgd or adam.
    #[arg(long)]
    pub optimizer: Option<String>,
    #[arg(long)]
    pub dropout: Option<f64>,
    #[arg(long)]
    pub margin: Option<f64>,
    #[arg(long)]
    pub w_diff: Option<f64>,
    #[arg(long)]
    pub w_cellaux: Option<f64>,
    #[arg(long)]
    pub w_siamese: Option<f64>,
    /// linear or squared similar-pair penalty.
    #[arg(long)]
    pub contrastive: Option<String>,
    #[arg(long)]
    pub level1_hidden: Option<usize>,
    #[arg(long)]
    pub level2_hidden: Option<usize>,
    #[arg(long)]
    pub mlp_hidden: Option<usize>,
    /// none or log1p.
    #[arg(long)]
    pub normalization: Option<String>,
    /// Train the per-cell heads as median-split classifiers.
    #[arg(long)]
    pub classification_aux: bool,
    /// Early-stopping patience in epochs, or "none".
    #[arg(long)]
    pub patience: Option<String>,
    /// Global gradient-norm clipping threshold, or "none".
    #[arg(long)]
    pub clip_norm: Option<String>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Defaults to checkpoint.json in the output directory.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// train, valid or test.
    #[arg(long, default_value = "test")]
    pub fold: Fold,
}

#[derive(Debug, Args)]
pub struct InterpretArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, default_value = "test")]
    pub fold: Fold,
    /// |y_diff| cut-off defining the up/down-regulated sets.
    #[arg(long, default_value_t = DEFAULT_ATTENTION_THRESHOLD, conflicts_with = "quantile")]
    pub threshold: f64,
    /// Use this quantile of |y_diff| on the fold as the threshold instead.
    #[arg(long)]
    pub quantile: Option<f64>,
    /// Also write per-gene attention weights.
    #[arg(long)]
    pub dump_genes: bool,
}

pub fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    }
    fs::create_dir_all(&cli.out_dir)?;
    match &cli.command {
        Command::Synth(args) => cmd_synth(&cli, args),
        Command::Train(args) => cmd_train(&cli, args),
        Command::Eval(args) => cmd_eval(&cli, args),
        Command::Interpret(args) => cmd_interpret(&cli, args),
    }
}

fn cmd_synth(cli: &Cli, args: &SynthArgs) -> Result<()> {
    let cfg = SyntheticConfig {
        seed: cli.seed.unwrap_or(0),
        genes: args.genes,
        num_marks: args.marks,
        num_bins: args.bins,
        noise: args.noise,
        planted_mark: args.planted_mark,
        window: (args.window_start, args.window_end),
        coefficient: args.coefficient,
    };
    let dataset = generate_synthetic(&cfg)?;
    save_dataset(&dataset, &DatasetFiles::in_dir(&cli.out_dir))?;
    fs::write(cli.out_dir.join("manifest.txt"), cfg.to_manifest())?;
    log::info!("wrote {} genes to {}", dataset.len(), cli.out_dir.display());
    Ok(())
}

fn train_config(cli: &Cli, args: &TrainArgs) -> Result<TrainConfig> {
    let mut config = TrainConfig::default();
    if let Some(path) = &args.config {
        config.apply_file(&fs::read_to_string(path)?)?;
    }
    let overrides: [(&str, Option<String>); 19] = [
        ("seed", cli.seed.map(|v| v.to_string())),
        ("variant", args.variant.clone()),
        ("epochs", args.epochs.map(|v| v.to_string())),
        ("batch_size", args.batch_size.map(|v| v.to_string())),
        ("lr", args.lr.map(|v| v.to_string())),
        ("optimizer", args.optimizer.clone()),
        ("dropout", args.dropout.map(|v| v.to_string())),
        ("margin", args.margin.map(|v| v.to_string())),
        ("w_diff", args.w_diff.map(|v| v.to_string())),
        ("w_cellaux", args.w_cellaux.map(|v| v.to_string())),
        ("w_siamese", args.w_siamese.map(|v| v.to_string())),
        ("contrastive", args.contrastive.clone()),
        ("level1_hidden", args.level1_hidden.map(|v| v.to_string())),
        ("level2_hidden", args.level2_hidden.map(|v| v.to_string())),
        ("mlp_hidden", args.mlp_hidden.map(|v| v.to_string())),
        ("normalization", args.normalization.clone()),
        ("classification_aux", args.classification_aux.then(|| "true".to_string())),
        ("patience", args.patience.clone()),
        ("clip_norm", args.clip_norm.clone()),
    ];
    for (key, value) in overrides {
        if let Some(v) = value {
            config.set(key, &v)?;
        }
    }
    Ok(config)
}

/// Loads a dataset, inferring the signal layout from the file header.
fn load_dir(dir: &Path) -> Result<Dataset> {
    let files = DatasetFiles::in_dir(dir);
    let spec = read_signal_spec(&files.signals_a)?;
    load_dataset(&files, &spec)
}

fn folds_for(n: usize, seed: u64) -> Result<FoldSplit> {
    split_folds(n, seed, FoldSizes::proportional(n))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

#[derive(Serialize)]
struct TrainSummary<'a> {
    config: &'a TrainConfig,
    genes: usize,
    skipped: usize,
    report: &'a EvalReport,
}

fn cmd_train(cli: &Cli, args: &TrainArgs) -> Result<()> {
    let config = train_config(cli, args)?;
    let raw = load_dir(&args.data)?;
    let dataset = normalize_signals(&raw, config.normalization)?;
    let folds = folds_for(dataset.len(), config.seed)?;
    let model = config.build_model(&dataset.spec)?;
    log::info!(
        "training {} on {} genes ({} train / {} valid / {} test), {} parameters",
        config.variant.display_name(),
        dataset.len(),
        folds.train.len(),
        folds.valid.len(),
        folds.test.len(),
        model.store().num_values()
    );

    let mut metrics = fs::File::create(cli.out_dir.join("metrics.jsonl"))?;
    let mut write_err = None;
    let outcome = train_with_observer(model, &dataset, &folds, &config, |record| {
        let line = serde_json::to_string(record).map_err(Error::from).and_then(|l| {
            writeln!(metrics, "{l}")?;
            Ok(())
        });
        if let Err(e) = line {
            write_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = write_err {
        return Err(e);
    }
    outcome.checkpoint.save(&cli.out_dir.join("checkpoint.json"))?;
    write_json(
        &cli.out_dir.join("summary.json"),
        &TrainSummary {
            config: &config,
            genes: dataset.len(),
            skipped: dataset.skipped,
            report: &outcome.report,
        },
    )?;
    let r = &outcome.report;
    match &r.test {
        Some(t) => println!(
            "selected epoch {}: valid PCC {:.4}, test PCC {:.4}",
            r.selected_epoch, r.valid.pcc, t.pcc
        ),
        None => println!("selected epoch {}: valid PCC {:.4}", r.selected_epoch, r.valid.pcc),
    }
    Ok(())
}

/// Checkpoint, its training settings and the dataset prepared the same way.
fn load_for_inference(cli: &Cli, data: &Path, checkpoint: &Option<PathBuf>) -> Result<(DeepDiffModel, TrainConfig, Dataset)> {
    let path = checkpoint.clone().unwrap_or_else(|| cli.out_dir.join("checkpoint.json"));
    let ckpt = Checkpoint::load(&path)?;
    let config = ckpt
        .train
        .clone()
        .ok_or_else(|| Error::Checkpoint("checkpoint carries no training settings".into()))?;
    let files = DatasetFiles::in_dir(data);
    let spec = read_signal_spec(&files.signals_a)?;
    let m = &ckpt.model;
    if (spec.num_marks, spec.num_bins) != (m.num_marks, m.num_bins) {
        return Err(Error::SpecMismatch(format!(
            "checkpoint ({}) expects {} marks x {} bins, dataset has {} marks x {} bins",
            m.variant, m.num_marks, m.num_bins, spec.num_marks, spec.num_bins
        )));
    }
    let dataset = normalize_signals(&load_dataset(&files, &spec)?, config.normalization)?;
    let model = DeepDiffModel::from_checkpoint(&ckpt)?;
    Ok((model, config, dataset))
}

#[derive(Serialize)]
struct FoldReport<'a> {
    fold: Fold,
    variant: &'a str,
    metrics: &'a SplitMetrics,
}

fn cmd_eval(cli: &Cli, args: &EvalArgs) -> Result<()> {
    let (model, config, dataset) = load_for_inference(cli, &args.data, &args.checkpoint)?;
    let folds = folds_for(dataset.len(), config.seed)?;
    let eval = evaluate(&model, &dataset, folds.get(args.fold))?;
    let name = serde_json::to_value(args.fold)?;
    let name = name.as_str().unwrap_or("fold");
    write_json(
        &cli.out_dir.join(format!("eval_{name}.json")),
        &FoldReport {
            fold: args.fold,
            variant: model.variant().tag(),
            metrics: &eval.metrics,
        },
    )?;
    println!("{name} PCC {:.6} over {} genes", eval.metrics.pcc, eval.metrics.n);
    Ok(())
}

fn summary_table(summary: &AttentionSummary) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "# threshold={}", summary.threshold);
    for set in [&summary.up, &summary.down] {
        let _ = writeln!(out, "# {} count={}", set.set, set.count);
    }
    out.push_str("set\tmodule\tposition\tname\tmean_beta\n");
    for set in [&summary.up, &summary.down] {
        for (k, (name, beta)) in set.legend.iter().zip(&set.mean_beta).enumerate() {
            let _ = writeln!(out, "{}\t{}\t{}\t{}\t{}", set.set, set.module, k + 1, name, beta);
        }
    }
    out
}

fn join(values: &[f64]) -> String {
    values.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
}

fn cmd_interpret(cli: &Cli, args: &InterpretArgs) -> Result<()> {
    let (model, config, dataset) = load_for_inference(cli, &args.data, &args.checkpoint)?;
    let folds = folds_for(dataset.len(), config.seed)?;
    let indices = folds.get(args.fold);
    let y: Vec<f64> = indices.iter().map(|&i| dataset.samples[i].y_diff).collect();
    let threshold = match args.quantile {
        Some(q) => abs_quantile(&y, q)?,
        None => args.threshold,
    };
    let records = attention_records(&model, &dataset, indices)?;
    let summary = summarize_attention(&records, &y, threshold)?;
    fs::write(cli.out_dir.join("attention_summary.tsv"), summary_table(&summary))?;
    if args.dump_genes {
        let mut out = String::from("gene_id\tlevel\tmodule\trow\tname\tweights\n");
        for r in &records {
            for m in &r.level1 {
                for (j, (name, alpha)) in m.legend.iter().zip(&m.alpha).enumerate() {
                    let _ = writeln!(out, "{}\talpha\t{}\t{}\t{}\t{}", r.gene_id, m.module, j + 1, name, join(alpha));
                }
            }
            for m in &r.level2 {
                let _ = writeln!(out, "{}\tbeta\t{}\t0\t-\t{}", r.gene_id, m.module, join(&m.beta));
            }
        }
        fs::write(cli.out_dir.join("attention_genes.tsv"), out)?;
    }
    println!(
        "threshold {threshold}: {} up-regulated, {} down-regulated genes",
        summary.up.count, summary.down.count
    );
    Ok(())
}
