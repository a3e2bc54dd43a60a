//! Mini-batch training with validation-based model selection, Pearson
//! evaluation and attention aggregation over regulated gene sets.
//!
//! Each gene gets its own graph. Per-gene gradients are computed in parallel
//! and summed in batch order, so results do not depend on the thread count.

use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::ParamId;
use crate::data::{BinnedSignalSpec, Dataset, FoldSplit, Normalization};
use crate::error::{Error, Result};
use crate::losses::{sample_loss, ContrastiveForm, LossComponents, LossSettings, LossWeights};
use crate::model::{AttentionRecord, BinAttention, Checkpoint, DeepDiffModel, Mode, ModelConfig, Prediction, Variant};
use crate::optim::{clip_grad_norm, Optimizer, OptimizerKind};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub variant: Variant,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub lr: f64,
    pub optimizer: OptimizerKind,
    pub dropout: f64,
    /// Loss weights and the contrastive margin.
    pub weights: LossWeights,
    pub contrastive: ContrastiveForm,
    pub level1_hidden: usize,
    pub level2_hidden: usize,
    pub mlp_hidden: usize,
    pub normalization: Normalization,
    pub classification_aux: bool,
    /// Stop after this many epochs without a validation improvement.
    pub patience: Option<usize>,
    pub clip_norm: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            variant: Variant::RawD,
            epochs: 100,
            batch_size: 16,
            seed: 0,
            lr: 1e-3,
            optimizer: OptimizerKind::Adam,
            dropout: 0.5,
            weights: LossWeights::default(),
            contrastive: ContrastiveForm::Linear,
            level1_hidden: 32,
            level2_hidden: 16,
            mlp_hidden: 16,
            normalization: Normalization::None,
            classification_aux: false,
            patience: Some(15),
            clip_norm: None,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value {value:?} for {key}")))
}

fn parse_optional<T: FromStr>(key: &str, value: &str) -> Result<Option<T>> {
    if value == "none" {
        Ok(None)
    } else {
        parse(key, value).map(Some)
    }
}

impl TrainConfig {
    pub const KEYS: [&'static str; 19] = [
        "variant",
        "epochs",
        "batch_size",
        "seed",
        "lr",
        "optimizer",
        "dropout",
        "margin",
        "w_diff",
        "w_cellaux",
        "w_siamese",
        "contrastive",
        "level1_hidden",
        "level2_hidden",
        "mlp_hidden",
        "normalization",
        "classification_aux",
        "patience",
        "clip_norm",
    ];

    /// Sets one field from its `key=value` text form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        let text_err = |e: String| Error::Config(format!("{key}: {e}"));
        match key.trim() {
            "variant" => self.variant = value.parse()?,
            "epochs" => self.epochs = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "lr" => self.lr = parse(key, value)?,
            "optimizer" => self.optimizer = value.parse().map_err(text_err)?,
            "dropout" => self.dropout = parse(key, value)?,
            "margin" => self.weights.margin = parse(key, value)?,
            "w_diff" => self.weights.diff = parse(key, value)?,
            "w_cellaux" => self.weights.cell_aux = parse(key, value)?,
            "w_siamese" => self.weights.siamese = parse(key, value)?,
            "contrastive" => self.contrastive = value.parse().map_err(text_err)?,
            "level1_hidden" => self.level1_hidden = parse(key, value)?,
            "level2_hidden" => self.level2_hidden = parse(key, value)?,
            "mlp_hidden" => self.mlp_hidden = parse(key, value)?,
            "normalization" => self.normalization = value.parse().map_err(text_err)?,
            "classification_aux" => self.classification_aux = parse(key, value)?,
            "patience" => self.patience = parse_optional(key, value)?,
            "clip_norm" => self.clip_norm = parse_optional(key, value)?,
            other => {
                return Err(Error::Config(format!(
                    "unknown key {other:?}; expected one of {}",
                    Self::KEYS.join(", ")
                )))
            }
        }
        Ok(())
    }

    /// Applies a `key=value` file; blank lines and `#` comments are ignored.
    pub fn apply_file(&mut self, text: &str) -> Result<()> {
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value", i + 1)))?;
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn model_config(&self, spec: &BinnedSignalSpec) -> ModelConfig {
        ModelConfig {
            variant: self.variant,
            num_marks: spec.num_marks,
            num_bins: spec.num_bins,
            level1_hidden: self.level1_hidden,
            level2_hidden: self.level2_hidden,
            mlp_hidden: self.mlp_hidden,
            dropout: self.dropout,
            classification_aux: self.classification_aux,
            ..ModelConfig::new(self.variant, spec.num_marks, spec.num_bins)
        }
    }

    /// A freshly initialized model seeded from `seed`.
    pub fn build_model(&self, spec: &BinnedSignalSpec) -> Result<DeepDiffModel> {
        DeepDiffModel::new(self.model_config(spec), self.seed)
    }

    fn loss_settings(&self) -> LossSettings {
        LossSettings {
            weights: self.weights,
            contrastive: self.contrastive,
            classification_aux: self.classification_aux,
        }
    }
}

/// Pearson correlation coefficient (population form).
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::shape("pearson", &[x.len()], &[y.len()]));
    }
    if x.len() < 2 {
        return Err(Error::Degenerate(format!("pearson needs at least 2 points, got {}", x.len())));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::Degenerate("pearson input has zero variance".into()));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Pearson, with degenerate inputs scored as 0 so model selection can go on.
pub fn pearson_or_zero(x: &[f64], y: &[f64]) -> f64 {
    match pearson(x, y) {
        Ok(r) => r,
        Err(e) => {
            log::warn!("{e}; scoring as 0");
            0.0
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitMetrics {
    pub n: usize,
    pub pcc: f64,
    /// Per-cell PCC of the auxiliary heads (A, B).
    pub cell_pcc: Option<(f64, f64)>,
    pub mse: f64,
}

/// Predictions of one fold in fold order.
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub indices: Vec<usize>,
    pub predictions: Vec<Prediction>,
    pub metrics: SplitMetrics,
}

/// Eval-mode predictions over `indices`, fanned out across threads.
pub fn evaluate(model: &DeepDiffModel, dataset: &Dataset, indices: &[usize]) -> Result<Evaluation> {
    if indices.is_empty() {
        return Err(Error::Empty("evaluate"));
    }
    let predictions = indices
        .par_iter()
        .map(|&i| {
            let s = &dataset.samples[i];
            model.predict(&s.gene_id, &s.xa, &s.xb)
        })
        .collect::<Result<Vec<_>>>()?;
    let y_pred: Vec<f64> = predictions.iter().map(|p| p.y_diff).collect();
    let y_true: Vec<f64> = indices.iter().map(|&i| dataset.samples[i].y_diff).collect();
    let mse = y_pred.iter().zip(&y_true).map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / y_pred.len() as f64;
    let cell_pcc = if model.variant().has_cell_aux() {
        let classification = model.config().classification_aux;
        let target = |i: usize, a: bool| {
            let s = &dataset.samples[i];
            match (classification, a) {
                (true, true) => s.class_a as f64,
                (true, false) => s.class_b as f64,
                (false, true) => s.y_a,
                (false, false) => s.y_b,
            }
        };
        let mut pa = Vec::with_capacity(indices.len());
        let mut pb = Vec::with_capacity(indices.len());
        for p in &predictions {
            let (a, b) = p.aux()?;
            pa.push(a);
            pb.push(b);
        }
        let ta: Vec<f64> = indices.iter().map(|&i| target(i, true)).collect();
        let tb: Vec<f64> = indices.iter().map(|&i| target(i, false)).collect();
        Some((pearson_or_zero(&pa, &ta), pearson_or_zero(&pb, &tb)))
    } else {
        None
    };
    Ok(Evaluation {
        indices: indices.to_vec(),
        metrics: SplitMetrics {
            n: indices.len(),
            pcc: pearson_or_zero(&y_pred, &y_true),
            cell_pcc,
            mse,
        },
        predictions,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Sample-weighted mean of the total loss over the epoch.
    pub train_loss: f64,
    pub train_components: LossComponents,
    pub valid_pcc: f64,
    pub valid_cell_pcc: Option<(f64, f64)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub variant: Variant,
    /// Epoch whose parameters were retained (highest validation PCC).
    pub selected_epoch: usize,
    pub epochs_run: usize,
    pub train: SplitMetrics,
    pub valid: SplitMetrics,
    pub test: Option<SplitMetrics>,
    pub history: Vec<EpochRecord>,
}

pub struct TrainOutcome {
    /// The model restored to the selected epoch.
    pub model: DeepDiffModel,
    pub checkpoint: Checkpoint,
    pub report: EvalReport,
}

const SHUFFLE_STREAM: u64 = 0x5348_5546;
const DROPOUT_STREAM: u64 = 0x4452_4f50;

/// Independent generator keyed by the run seed and two counters.
fn derive_rng(seed: u64, a: u64, b: u64, stream: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    for (chunk, v) in key.chunks_exact_mut(8).zip([seed, a, b, stream]) {
        chunk.copy_from_slice(&v.to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}

struct GeneGrad {
    grads: Vec<(ParamId, Vec<f64>)>,
    total: f64,
    components: LossComponents,
}

fn gene_gradient(
    model: &DeepDiffModel,
    dataset: &Dataset,
    index: usize,
    settings: &LossSettings,
    rng: &mut ChaCha8Rng,
) -> Result<GeneGrad> {
    let sample = &dataset.samples[index];
    let mut g = model.graph();
    let out = model.forward(&mut g, &sample.xa, &sample.xb, Mode::Train(rng))?;
    let (loss, components) = sample_loss(&mut g, model.variant(), &out, sample, settings)?;
    let total = g.value(loss).item();
    g.backward(loss)?;
    let grads = g
        .param_grads()
        .map(|(id, grad)| (id, grad.to_vec()))
        .collect();
    Ok(GeneGrad {
        grads,
        total,
        components,
    })
}

fn add_components(acc: &mut LossComponents, c: &LossComponents) {
    acc.diff += c.diff;
    if let Some(v) = c.cell_aux {
        *acc.cell_aux.get_or_insert(0.0) += v;
    }
    if let Some(v) = c.siamese {
        *acc.siamese.get_or_insert(0.0) += v;
    }
}

fn scale_components(c: &LossComponents, f: f64) -> LossComponents {
    LossComponents {
        diff: c.diff * f,
        cell_aux: c.cell_aux.map(|v| v * f),
        siamese: c.siamese.map(|v| v * f),
    }
}

/// Runs one mini-batch: mean loss gradients, optional clipping, one optimizer
/// step. Returns the summed per-sample totals and components.
fn train_batch(
    model: &mut DeepDiffModel,
    dataset: &Dataset,
    batch: &[usize],
    optimizer: &mut Optimizer,
    config: &TrainConfig,
    epoch: usize,
    batch_index: usize,
) -> Result<(f64, LossComponents)> {
    let settings = config.loss_settings();
    let diverged = || Error::Diverged {
        epoch,
        batch: batch_index,
    };
    let results: Vec<Result<GeneGrad>> = {
        let model = &*model;
        batch
            .par_iter()
            .enumerate()
            .map(|(k, &i)| {
                let pos = (batch_index * config.batch_size + k) as u64;
                let mut rng = derive_rng(config.seed, epoch as u64, pos, DROPOUT_STREAM);
                gene_gradient(model, dataset, i, &settings, &mut rng)
            })
            .collect()
    };
    let store = model.store_mut();
    store.zero_grad();
    let mut total = 0.0;
    let mut comps = LossComponents::default();
    for r in results {
        let gg = r.map_err(|e| match e {
            Error::NonFinite { .. } => diverged(),
            other => other,
        })?;
        if !gg.total.is_finite() {
            return Err(diverged());
        }
        total += gg.total;
        add_components(&mut comps, &gg.components);
        for (id, grad) in &gg.grads {
            store.accumulate(*id, grad);
        }
    }
    store.scale_grads(1.0 / batch.len() as f64);
    if let Some(max) = config.clip_norm {
        clip_grad_norm(store, max);
    }
    optimizer.step(store)?;
    Ok((total, comps))
}

/// Trains `model` and returns it restored to the epoch with the best
/// validation PCC, plus that checkpoint and the full report.
pub fn train(model: DeepDiffModel, dataset: &Dataset, folds: &FoldSplit, config: &TrainConfig) -> Result<TrainOutcome> {
    train_with_observer(model, dataset, folds, config, |_| {})
}

/// As [`train`], calling `observer` after every epoch.
pub fn train_with_observer(
    mut model: DeepDiffModel,
    dataset: &Dataset,
    folds: &FoldSplit,
    config: &TrainConfig,
    mut observer: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    if folds.train.is_empty() {
        return Err(Error::Empty("train fold"));
    }
    if folds.valid.is_empty() {
        return Err(Error::Empty("validation fold"));
    }
    if config.epochs == 0 || config.batch_size == 0 {
        return Err(Error::Config("epochs and batch_size must be positive".into()));
    }
    if model.variant() != config.variant {
        return Err(Error::Config(format!(
            "model variant {} does not match configured {}",
            model.variant(),
            config.variant
        )));
    }
    // Per-cell targets are log expression levels far from zero; starting the
    // cell heads at the training mean keeps the first updates from going into
    // the offset.
    let n_train = folds.train.len() as f64;
    let (mean_a, mean_b) = folds.train.iter().fold((0.0, 0.0), |(a, b), &i| {
        let s = &dataset.samples[i];
        (a + s.y_a / n_train, b + s.y_b / n_train)
    });
    if model.set_cell_bias(mean_a, mean_b) {
        log::debug!("cell head bias set to {mean_a:.4} / {mean_b:.4}");
    }
    let mut optimizer = Optimizer::new(config.optimizer, config.lr);
    let mut history = Vec::with_capacity(config.epochs);
    let mut best: Option<(f64, usize, Checkpoint)> = None;

    for epoch in 0..config.epochs {
        let mut order = folds.train.clone();
        order.shuffle(&mut derive_rng(config.seed, epoch as u64, 0, SHUFFLE_STREAM));
        let mut total = 0.0;
        let mut comps = LossComponents::default();
        for (b, batch) in order.chunks(config.batch_size).enumerate() {
            let (t, c) = train_batch(&mut model, dataset, batch, &mut optimizer, config, epoch, b)?;
            total += t;
            add_components(&mut comps, &c);
        }
        let n = order.len() as f64;
        let valid = evaluate(&model, dataset, &folds.valid)?;
        let record = EpochRecord {
            epoch,
            train_loss: total / n,
            train_components: scale_components(&comps, 1.0 / n),
            valid_pcc: valid.metrics.pcc,
            valid_cell_pcc: valid.metrics.cell_pcc,
        };
        log::info!(
            "epoch {epoch}: train loss {:.6}, valid PCC {:.4}",
            record.train_loss,
            record.valid_pcc
        );
        observer(&record);
        let improved = best.as_ref().is_none_or(|(pcc, _, _)| record.valid_pcc > *pcc);
        if improved {
            let mut ckpt = model.to_checkpoint();
            ckpt.train = Some(config.clone());
            ckpt.epoch = Some(epoch);
            ckpt.optimizer = Some(optimizer.state());
            best = Some((record.valid_pcc, epoch, ckpt));
        }
        history.push(record);
        let best_epoch = best.as_ref().map(|b| b.1).unwrap_or(0);
        if let Some(p) = config.patience {
            if epoch - best_epoch >= p {
                log::info!("no validation improvement for {p} epochs, stopping");
                break;
            }
        }
    }

    let (_, selected_epoch, checkpoint) = best.expect("at least one epoch ran");
    let model = DeepDiffModel::from_checkpoint(&checkpoint)?;
    let train = evaluate(&model, dataset, &folds.train)?.metrics;
    let valid = evaluate(&model, dataset, &folds.valid)?.metrics;
    let test = if folds.test.is_empty() {
        None
    } else {
        Some(evaluate(&model, dataset, &folds.test)?.metrics)
    };
    let report = EvalReport {
        variant: config.variant,
        selected_epoch,
        epochs_run: history.len(),
        train,
        valid,
        test,
        history,
    };
    Ok(TrainOutcome {
        model,
        checkpoint,
        report,
    })
}

/// Attention of every gene in `indices`, in order.
pub fn attention_records(model: &DeepDiffModel, dataset: &Dataset, indices: &[usize]) -> Result<Vec<AttentionRecord>> {
    indices
        .par_iter()
        .map(|&i| {
            let s = &dataset.samples[i];
            model.extract_attention(&s.gene_id, &s.xa, &s.xb)
        })
        .collect()
}

/// Mean attention over one regulated gene set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SetSummary {
    pub set: String,
    pub count: usize,
    /// Level II module whose β is averaged.
    pub module: String,
    pub legend: Vec<String>,
    pub mean_beta: Vec<f64>,
    pub alpha_module: String,
    pub alpha_legend: Vec<String>,
    /// Mean α per input row of the main Level I module, one entry per bin.
    pub mean_alpha: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionSummary {
    pub threshold: f64,
    pub up: SetSummary,
    pub down: SetSummary,
}

pub const DEFAULT_ATTENTION_THRESHOLD: f64 = 8.0;

fn mean_rows<'a>(rows: impl Iterator<Item = &'a [f64]>, len: usize) -> Vec<f64> {
    let mut acc = vec![0.0; len];
    let mut n = 0usize;
    for r in rows {
        for (a, v) in acc.iter_mut().zip(r) {
            *a += v;
        }
        n += 1;
    }
    if n == 0 {
        return Vec::new();
    }
    acc.iter().map(|v| v / n as f64).collect()
}

fn summarize_set(name: &str, records: &[&AttentionRecord]) -> SetSummary {
    let Some(first) = records.first() else {
        return SetSummary {
            set: name.to_string(),
            count: 0,
            module: String::new(),
            legend: Vec::new(),
            mean_beta: Vec::new(),
            alpha_module: String::new(),
            alpha_legend: Vec::new(),
            mean_alpha: Vec::new(),
        };
    };
    let beta0 = first.main_beta();
    let mean_beta = mean_rows(records.iter().map(|r| r.main_beta().beta.as_slice()), beta0.beta.len());
    fn l1(r: &AttentionRecord) -> &BinAttention {
        let pos = r
            .level1
            .iter()
            .position(|m| m.module == "f1" || m.module == "f1_d")
            .unwrap_or(0);
        &r.level1[pos]
    }
    let alpha0 = l1(first);
    let mean_alpha = (0..alpha0.alpha.len())
        .map(|j| mean_rows(records.iter().map(|r| l1(r).alpha[j].as_slice()), alpha0.alpha[j].len()))
        .collect();
    SetSummary {
        set: name.to_string(),
        count: records.len(),
        module: beta0.module.clone(),
        legend: beta0.legend.clone(),
        mean_beta,
        alpha_module: alpha0.module.clone(),
        alpha_legend: alpha0.legend.clone(),
        mean_alpha,
    }
}

/// Groups records into up-regulated (`y_diff > threshold`) and
/// down-regulated (`y_diff < −threshold`) sets and averages their attention.
pub fn summarize_attention(records: &[AttentionRecord], y_diff: &[f64], threshold: f64) -> Result<AttentionSummary> {
    if records.len() != y_diff.len() {
        return Err(Error::shape("summarize_attention", &[records.len()], &[y_diff.len()]));
    }
    let up: Vec<&AttentionRecord> = records.iter().zip(y_diff).filter(|(_, y)| **y > threshold).map(|(r, _)| r).collect();
    let down: Vec<&AttentionRecord> = records.iter().zip(y_diff).filter(|(_, y)| **y < -threshold).map(|(r, _)| r).collect();
    Ok(AttentionSummary {
        threshold,
        up: summarize_set("up", &up),
        down: summarize_set("down", &down),
    })
}

pub fn attention_aggregate(
    model: &DeepDiffModel,
    dataset: &Dataset,
    indices: &[usize],
    threshold: f64,
) -> Result<AttentionSummary> {
    let records = attention_records(model, dataset, indices)?;
    let y: Vec<f64> = indices.iter().map(|&i| dataset.samples[i].y_diff).collect();
    summarize_attention(&records, &y, threshold)
}

/// The `q`-quantile of |values| (nearest rank).
pub fn abs_quantile(values: &[f64], q: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Empty("abs_quantile"));
    }
    if !(0.0..=1.0).contains(&q) {
        return Err(Error::invalid("abs_quantile", format!("quantile {q} outside [0, 1]")));
    }
    let mut abs: Vec<f64> = values.iter().map(|v| v.abs()).collect();
    abs.sort_by(f64::total_cmp);
    let rank = ((q * abs.len() as f64).ceil() as usize).clamp(1, abs.len());
    Ok(abs[rank - 1])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, split_folds, FoldSizes, GeneSample, SyntheticConfig};

    #[test]
    fn pearson_examples() {
        let x = [1.0, 2.0, 4.0, 7.0, -3.0];
        assert!((pearson(&x, &x).unwrap() - 1.0).abs() < 1e-15);
        let neg: Vec<f64> = x.iter().map(|v| -v).collect();
        assert!((pearson(&x, &neg).unwrap() + 1.0).abs() < 1e-15);
        let affine: Vec<f64> = x.iter().map(|v| 3.5 * v - 11.0).collect();
        assert!((pearson(&x, &affine).unwrap() - 1.0).abs() < 1e-12);
        assert!(matches!(pearson(&x, &[2.0; 5]), Err(Error::Degenerate(_))));
        assert!(pearson(&[1.0], &[1.0]).is_err());
        assert!(pearson(&x, &x[..3]).is_err());
        assert_eq!(pearson_or_zero(&x, &[2.0; 5]), 0.0);
    }

    #[test]
    fn abs_quantile_examples() {
        let v = [-5.0, 1.0, 2.0, -3.0, 4.0];
        assert_eq!(abs_quantile(&v, 1.0).unwrap(), 5.0);
        assert_eq!(abs_quantile(&v, 0.5).unwrap(), 3.0);
        assert_eq!(abs_quantile(&v, 0.0).unwrap(), 1.0);
        assert!(abs_quantile(&[], 0.5).is_err());
    }

    #[test]
    fn config_keys_round_trip() {
        let mut c = TrainConfig::default();
        c.apply_file("# comment\nvariant=aux_siamese\nlr=0.01\npatience=none\nmargin = 3\n\nclip_norm=5\n")
            .unwrap();
        assert_eq!(c.variant, Variant::AuxSiamese);
        assert_eq!(c.lr, 0.01);
        assert_eq!(c.patience, None);
        assert_eq!(c.weights.margin, 3.0);
        assert_eq!(c.clip_norm, Some(5.0));
        assert!(c.set("bogus", "1").is_err());
        assert!(c.set("variant", "raw+aux").is_err());
        assert!(c.set("epochs", "ten").is_err());
        let d = TrainConfig::default();
        assert_eq!((d.level1_hidden, d.level2_hidden, d.dropout, d.weights.margin), (32, 16, 0.5, 2.0));
    }

    fn tiny() -> (Dataset, FoldSplit, TrainConfig) {
        let data = generate_synthetic(&SyntheticConfig {
            genes: 40,
            num_marks: 2,
            num_bins: 6,
            window: (2, 3),
            planted_mark: 1,
            ..SyntheticConfig::default()
        })
        .unwrap();
        let folds = split_folds(40, 1, FoldSizes { train: 24, valid: 8, test: 8 }).unwrap();
        let config = TrainConfig {
            epochs: 3,
            batch_size: 8,
            level1_hidden: 3,
            level2_hidden: 2,
            mlp_hidden: 3,
            lr: 0.01,
            ..TrainConfig::default()
        };
        (data, folds, config)
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let (data, folds, mut config) = tiny();
        config.lr = 0.0;
        for variant in [Variant::RawD, Variant::AuxSiamese] {
            config.variant = variant;
            let model = config.build_model(&data.spec).unwrap();
            let mut expected = model.clone();
            let n = folds.train.len() as f64;
            let mean = |f: fn(&GeneSample) -> f64| folds.train.iter().map(|&i| f(&data.samples[i]) / n).sum::<f64>();
            expected.set_cell_bias(mean(|s| s.y_a), mean(|s| s.y_b));
            let out = train(model, &data, &folds, &config).unwrap();
            assert_eq!(out.checkpoint.params, expected.to_checkpoint().params);
            let pccs: Vec<f64> = out.report.history.iter().map(|r| r.valid_pcc).collect();
            assert!(pccs.windows(2).all(|w| w[0] == w[1]), "{pccs:?}");
        }
    }

    #[test]
    fn training_is_deterministic_across_thread_counts() {
        let (data, folds, config) = tiny();
        let run = |threads: usize| {
            let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
            pool.install(|| {
                let model = config.build_model(&data.spec).unwrap();
                train(model, &data, &folds, &config).unwrap()
            })
        };
        let (a, b) = (run(1), run(4));
        assert_eq!(a.report.history[0].train_loss, b.report.history[0].train_loss);
        assert_eq!(a.report, b.report);
        assert_eq!(a.checkpoint, b.checkpoint);
    }

    #[test]
    fn empty_folds_are_rejected() {
        let (data, mut folds, config) = tiny();
        folds.valid.clear();
        let model = config.build_model(&data.spec).unwrap();
        assert!(train(model, &data, &folds, &config).is_err());
    }

    #[test]
    fn attention_summary_means() {
        let (data, _, config) = tiny();
        let model = config.build_model(&data.spec).unwrap();
        let idx: Vec<usize> = (0..10).collect();
        let records = attention_records(&model, &data, &idx).unwrap();
        let y: Vec<f64> = idx.iter().map(|&i| data.samples[i].y_diff).collect();
        let single = [records[0].clone()];
        let s = summarize_attention(&single, &[10.0], 8.0).unwrap();
        assert_eq!(s.up.count, 1);
        assert_eq!(s.up.mean_beta, records[0].main_beta().beta);
        assert_eq!(s.down.count, 0);
        let s = summarize_attention(&records, &y, 0.0).unwrap();
        for set in [&s.up, &s.down] {
            if set.count > 0 {
                assert!((set.mean_beta.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            }
        }
        let s = summarize_attention(&records, &y, 1e9).unwrap();
        assert_eq!((s.up.count, s.down.count), (0, 0));
    }
}
