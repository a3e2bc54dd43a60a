//! Training objectives, as plain value functions and as graph nodes.

use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};
use crate::data::GeneSample;
use crate::error::{Error, Result};
use crate::model::{ForwardOutput, Variant};

/// Dissimilar pairs (S = 1) are the differentially expressed genes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SimilarityLabel {
    Similar,
    Dissimilar,
}

impl SimilarityLabel {
    pub fn s(self) -> f64 {
        match self {
            SimilarityLabel::Similar => 0.0,
            SimilarityLabel::Dissimilar => 1.0,
        }
    }
}

/// Threshold on |y_diff| above which a gene counts as differentially expressed.
pub const DIFFERENTIAL_THRESHOLD: f64 = 2.0;

/// How the similar-pair term penalizes the embedding distance.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ContrastiveForm {
    /// `½R`
    #[default]
    Linear,
    /// `½R²`
    Squared,
}

impl FromStr for ContrastiveForm {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "linear" => Ok(ContrastiveForm::Linear),
            "squared" => Ok(ContrastiveForm::Squared),
            other => Err(format!("unknown contrastive form {other:?} (linear, squared)")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub diff: f64,
    pub cell_aux: f64,
    pub siamese: f64,
    pub margin: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            diff: 1.0,
            cell_aux: 1.0,
            siamese: 1.0,
            margin: 2.0,
        }
    }
}

/// Loss terms of one sample or averaged over a batch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub diff: f64,
    pub cell_aux: Option<f64>,
    pub siamese: Option<f64>,
}

pub fn mse_loss(preds: &[f64], targets: &[f64]) -> Result<f64> {
    if preds.is_empty() {
        return Err(Error::Empty("mse_loss"));
    }
    if preds.len() != targets.len() {
        return Err(Error::shape("mse_loss", &[preds.len()], &[targets.len()]));
    }
    let sum: f64 = preds.iter().zip(targets).map(|(p, t)| (t - p) * (t - p)).sum();
    Ok(sum / preds.len() as f64)
}

pub fn cell_aux_loss(preds_a: &[f64], targets_a: &[f64], preds_b: &[f64], targets_b: &[f64]) -> Result<f64> {
    Ok(mse_loss(preds_a, targets_a)? + mse_loss(preds_b, targets_b)?)
}

pub fn similarity_label(y_diff: f64) -> Result<SimilarityLabel> {
    if !y_diff.is_finite() {
        return Err(Error::NonFinite { op: "similarity_label" });
    }
    Ok(if y_diff.abs() >= DIFFERENTIAL_THRESHOLD {
        SimilarityLabel::Dissimilar
    } else {
        SimilarityLabel::Similar
    })
}

pub fn siamese_distance(ea: &[f64], eb: &[f64]) -> Result<f64> {
    if ea.len() != eb.len() {
        return Err(Error::shape("siamese_distance", &[ea.len()], &[eb.len()]));
    }
    Ok(ea.iter().zip(eb).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt())
}

pub fn contrastive_loss(r: f64, label: SimilarityLabel, margin: f64, form: ContrastiveForm) -> Result<f64> {
    if !(r >= 0.0) {
        return Err(Error::invalid("contrastive_loss", format!("distance {r} is negative")));
    }
    if !(margin > 0.0) {
        return Err(Error::invalid("contrastive_loss", format!("margin {margin} must be positive")));
    }
    let s = label.s();
    let near = match form {
        ContrastiveForm::Linear => 0.5 * r,
        ContrastiveForm::Squared => 0.5 * r * r,
    };
    let gap = (margin - r).max(0.0);
    Ok((1.0 - s) * near + s * 0.5 * gap * gap)
}

/// Weighted sum of the terms the variant trains on.
pub fn total_loss(variant: Variant, c: &LossComponents, w: &LossWeights) -> Result<f64> {
    let mut total = w.diff * c.diff;
    if variant.has_cell_aux() {
        let aux = c
            .cell_aux
            .ok_or_else(|| Error::invalid("total_loss", format!("{variant} needs a cell-aux loss")))?;
        total += w.cell_aux * aux;
    }
    if variant.has_siamese() {
        let s = c
            .siamese
            .ok_or_else(|| Error::invalid("total_loss", format!("{variant} needs a siamese loss")))?;
        total += w.siamese * s;
    }
    Ok(total)
}

fn class_index(label: i8) -> Result<usize> {
    match label {
        -1 => Ok(0),
        1 => Ok(1),
        other => Err(Error::invalid("nll_classification_loss", format!("label {other} not in {{-1, 1}}"))),
    }
}

/// `−log softmax(logits)[class]`, with class index 0 for −1 and 1 for +1.
pub fn nll_classification_loss(logits: &[f64], label: i8) -> Result<f64> {
    if logits.len() != 2 {
        return Err(Error::shape("nll_classification_loss", &[2], &[logits.len()]));
    }
    let idx = class_index(label)?;
    let max = logits[0].max(logits[1]);
    let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    Ok(lse - logits[idx])
}

/// `(pred − target)²` for a single-output head.
pub fn squared_error_var(g: &mut Graph, pred: Var, target: f64) -> Result<Var> {
    let shape = g.shape(pred).to_vec();
    let n = g.value(pred).len();
    let t = g.constant(Tensor::new(shape, vec![target; n])?);
    let d = g.sub(pred, t)?;
    let sq = g.mul(d, d)?;
    g.sum(sq)
}

pub fn nll_var(g: &mut Graph, logits: Var, label: i8) -> Result<Var> {
    let idx = class_index(label)?;
    let ls = g.log_softmax(logits)?;
    let picked = g.slice(ls, idx, 1)?;
    let s = g.sum(picked)?;
    g.scale(s, -1.0)
}

pub fn contrastive_var(
    g: &mut Graph,
    ea: Var,
    eb: Var,
    label: SimilarityLabel,
    margin: f64,
    form: ContrastiveForm,
) -> Result<Var> {
    let d = g.sub(ea, eb)?;
    let r = g.norm(d)?;
    match label {
        SimilarityLabel::Similar => match form {
            ContrastiveForm::Linear => g.scale(r, 0.5),
            ContrastiveForm::Squared => {
                let r2 = g.mul(r, r)?;
                g.scale(r2, 0.5)
            }
        },
        SimilarityLabel::Dissimilar => {
            let neg = g.scale(r, -1.0)?;
            let gap = g.add_scalar(neg, margin)?;
            let gap = g.relu(gap)?;
            let sq = g.mul(gap, gap)?;
            g.scale(sq, 0.5)
        }
    }
}

/// Settings shared by every per-sample loss evaluation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossSettings {
    pub weights: LossWeights,
    pub contrastive: ContrastiveForm,
    pub classification_aux: bool,
}

/// Total loss of one sample on the graph plus its component values. Batch
/// losses are means of these.
pub fn sample_loss(
    g: &mut Graph,
    variant: Variant,
    out: &ForwardOutput,
    sample: &GeneSample,
    settings: &LossSettings,
) -> Result<(Var, LossComponents)> {
    let w = &settings.weights;
    let diff = squared_error_var(g, out.y_diff, sample.y_diff)?;
    let mut comps = LossComponents {
        diff: g.value(diff).item(),
        ..LossComponents::default()
    };
    let mut total = g.scale(diff, w.diff)?;
    if variant.has_cell_aux() {
        let (ya, yb) = out
            .y_a
            .zip(out.y_b)
            .ok_or_else(|| Error::invalid("sample_loss", "missing per-cell outputs"))?;
        let (la, lb) = if settings.classification_aux {
            (nll_var(g, ya, sample.class_a)?, nll_var(g, yb, sample.class_b)?)
        } else {
            (squared_error_var(g, ya, sample.y_a)?, squared_error_var(g, yb, sample.y_b)?)
        };
        let aux = g.add(la, lb)?;
        comps.cell_aux = Some(g.value(aux).item());
        let aux = g.scale(aux, w.cell_aux)?;
        total = g.add(total, aux)?;
    }
    if variant.has_siamese() {
        let (ea, eb) = out
            .siamese
            .ok_or_else(|| Error::invalid("sample_loss", "missing siamese embeddings"))?;
        let label = similarity_label(sample.y_diff)?;
        let s = contrastive_var(g, ea, eb, label, w.margin, settings.contrastive)?;
        comps.siamese = Some(g.value(s).item());
        let s = g.scale(s, w.siamese)?;
        total = g.add(total, s)?;
    }
    Ok((total, comps))
}
