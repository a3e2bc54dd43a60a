//! Binned histone-modification signal tables, expression targets, fold
//! splits and planted-signal synthetic datasets.
//!
//! Signal files are tab separated with a header `gene_id hm1_bin1 ... hmM_binT`
//! (HM-major, bin-minor) and one row per gene. Expression files carry an
//! optional `#unit=counts|rpkm|log` line, a header, then
//! `gene_id value_A value_B` rows.

use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::model::Variant;

/// Core marks in the fixed row order used everywhere.
pub const HM_NAMES: [&str; 5] = ["H3K4me3", "H3K4me1", "H3K36me3", "H3K9me3", "H3K27me3"];

/// Display name of HM row `k` out of `marks`; generic names unless the
/// standard five-mark layout is in use.
pub fn hm_name(k: usize, marks: usize) -> String {
    if marks == HM_NAMES.len() {
        HM_NAMES[k].to_string()
    } else {
        format!("hm{}", k + 1)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BinnedSignalSpec {
    pub num_marks: usize,
    pub num_bins: usize,
    pub bin_width: usize,
    /// Distance covered on each side of the TSS.
    pub flank: usize,
}

impl Default for BinnedSignalSpec {
    fn default() -> Self {
        Self {
            num_marks: 5,
            num_bins: 200,
            bin_width: 100,
            flank: 10_000,
        }
    }
}

impl BinnedSignalSpec {
    pub fn new(num_marks: usize, num_bins: usize) -> Self {
        Self {
            num_marks,
            num_bins,
            ..Self::default()
        }
    }

    pub fn column_names(&self) -> Vec<String> {
        let mut cols = Vec::with_capacity(self.num_marks * self.num_bins);
        for k in 1..=self.num_marks {
            for t in 1..=self.num_bins {
                cols.push(format!("hm{k}_bin{t}"));
            }
        }
        cols
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExpressionUnit {
    /// Raw read counts; targets are ln(count + 1).
    Counts,
    /// RPKM values; targets are ln(value + 1).
    Rpkm,
    /// Values are already log expression targets.
    Log,
}

impl ExpressionUnit {
    pub fn tag(self) -> &'static str {
        match self {
            ExpressionUnit::Counts => "counts",
            ExpressionUnit::Rpkm => "rpkm",
            ExpressionUnit::Log => "log",
        }
    }
}

impl FromStr for ExpressionUnit {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "counts" => Ok(ExpressionUnit::Counts),
            "rpkm" => Ok(ExpressionUnit::Rpkm),
            "log" => Ok(ExpressionUnit::Log),
            other => Err(format!("unknown unit {other:?}")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GeneSample {
    pub gene_id: String,
    /// `M × T` signal of cell type A.
    pub xa: Tensor,
    pub xb: Tensor,
    /// Expression values as read from the file, in the dataset's unit.
    pub expr_a: f64,
    pub expr_b: f64,
    pub y_a: f64,
    pub y_b: f64,
    pub y_diff: f64,
    /// +1 above the cell's median expression, else −1.
    pub class_a: i8,
    pub class_b: i8,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub spec: BinnedSignalSpec,
    pub unit: ExpressionUnit,
    pub samples: Vec<GeneSample>,
    /// Genes seen in some but not all input files.
    pub skipped: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// The three files making up one dataset.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetFiles {
    pub signals_a: PathBuf,
    pub signals_b: PathBuf,
    pub expression: PathBuf,
}

impl DatasetFiles {
    pub fn in_dir(dir: &Path) -> Self {
        Self {
            signals_a: dir.join("signals_A.tsv"),
            signals_b: dir.join("signals_B.tsv"),
            expression: dir.join("expression.tsv"),
        }
    }
}

/// ln(count + 1) for both cells and their difference.
pub fn compute_labels(count_a: f64, count_b: f64) -> Result<(f64, f64, f64)> {
    for c in [count_a, count_b] {
        if !(c >= 0.0) || !c.is_finite() {
            return Err(Error::invalid("compute_labels", format!("invalid count {c}")));
        }
    }
    let y_a = count_a.ln_1p();
    let y_b = count_b.ln_1p();
    Ok((y_a, y_b, y_a - y_b))
}

fn median(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Empty("median"));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    Ok(if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    })
}

/// +1 if `value` exceeds the median of `population`, otherwise −1.
pub fn binarize_expression(population: &[f64], value: f64) -> Result<i8> {
    let m = median(population).map_err(|_| Error::Empty("binarize_expression"))?;
    Ok(if value > m { 1 } else { -1 })
}

/// Stacked inputs for one variant.
#[derive(Clone, Debug, PartialEq)]
pub enum ModelInput {
    Stacked(Tensor),
    Pair(Tensor, Tensor),
    StackedAndPair(Tensor, Tensor, Tensor),
}

fn stack_rows(parts: &[&[f64]], rows: usize, cols: usize) -> Tensor {
    let data = parts.concat();
    Tensor::new(vec![rows, cols], data).expect("stacked shape")
}

pub fn build_input(variant: Variant, xa: &Tensor, xb: &Tensor) -> Result<ModelInput> {
    if xa.shape().len() != 2 || xa.shape() != xb.shape() {
        return Err(Error::shape("build_input", xa.shape(), xb.shape()));
    }
    let (m, t) = (xa.shape()[0], xa.shape()[1]);
    let diff: Vec<f64> = xa.data().iter().zip(xb.data()).map(|(a, b)| a - b).collect();
    let raw3 = || stack_rows(&[xa.data(), xb.data(), &diff], 3 * m, t);
    Ok(match variant {
        Variant::RawD => ModelInput::Stacked(Tensor::new(vec![m, t], diff.clone())?),
        Variant::RawC => ModelInput::Stacked(stack_rows(&[xa.data(), xb.data()], 2 * m, t)),
        Variant::Raw => ModelInput::Stacked(raw3()),
        Variant::Aux | Variant::AuxSiamese => ModelInput::Pair(xa.clone(), xb.clone()),
        Variant::RawAux | Variant::RawAuxSiamese => {
            ModelInput::StackedAndPair(raw3(), xa.clone(), xb.clone())
        }
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldSizes {
    pub train: usize,
    pub valid: usize,
    pub test: usize,
}

impl FoldSizes {
    /// 10000 / 2360 / 6100 genes.
    pub const REFERENCE: FoldSizes = FoldSizes {
        train: 10_000,
        valid: 2_360,
        test: 6_100,
    };

    /// The reference proportions scaled to `n` genes; test takes the remainder.
    pub fn proportional(n: usize) -> Self {
        let total = (Self::REFERENCE.train + Self::REFERENCE.valid + Self::REFERENCE.test) as u128;
        let train = (n as u128 * Self::REFERENCE.train as u128 / total) as usize;
        let valid = (n as u128 * Self::REFERENCE.valid as u128 / total) as usize;
        Self {
            train,
            valid,
            test: n - train - valid,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldSplit {
    pub train: Vec<usize>,
    pub valid: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Fold {
    Train,
    Valid,
    Test,
}

impl FromStr for Fold {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "train" => Ok(Fold::Train),
            "valid" | "validation" => Ok(Fold::Valid),
            "test" => Ok(Fold::Test),
            other => Err(format!("unknown fold {other:?} (train, valid, test)")),
        }
    }
}

impl FoldSplit {
    pub fn get(&self, fold: Fold) -> &[usize] {
        match fold {
            Fold::Train => &self.train,
            Fold::Valid => &self.valid,
            Fold::Test => &self.test,
        }
    }
}

/// Seeded shuffle of `0..n` followed by contiguous train/valid/test slices.
pub fn split_folds(n: usize, seed: u64, sizes: FoldSizes) -> Result<FoldSplit> {
    let needed = sizes.train + sizes.valid + sizes.test;
    if needed > n {
        return Err(Error::invalid(
            "split_folds",
            format!("fold sizes sum to {needed} but only {n} samples"),
        ));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let valid_end = sizes.train + sizes.valid;
    Ok(FoldSplit {
        train: order[..sizes.train].to_vec(),
        valid: order[sizes.train..valid_end].to_vec(),
        test: order[valid_end..needed].to_vec(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub seed: u64,
    pub genes: usize,
    pub num_marks: usize,
    pub num_bins: usize,
    /// Standard deviation σ of the noise on y_diff.
    pub noise: f64,
    pub planted_mark: usize,
    /// Inclusive bin range carrying the signal.
    pub window: (usize, usize),
    pub coefficient: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            genes: 2000,
            num_marks: 5,
            num_bins: 200,
            noise: 0.1,
            planted_mark: 1,
            window: (95, 105),
            coefficient: 1.0,
        }
    }
}

impl SyntheticConfig {
    pub fn to_manifest(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "seed={}", self.seed);
        let _ = writeln!(s, "genes={}", self.genes);
        let _ = writeln!(s, "num_marks={}", self.num_marks);
        let _ = writeln!(s, "num_bins={}", self.num_bins);
        let _ = writeln!(s, "noise={}", self.noise);
        let _ = writeln!(s, "planted_mark={}", self.planted_mark);
        let _ = writeln!(s, "window_start={}", self.window.0);
        let _ = writeln!(s, "window_end={}", self.window.1);
        let _ = writeln!(s, "coefficient={}", self.coefficient);
        s
    }

    pub fn from_manifest(text: &str) -> Result<Self> {
        let mut cfg = SyntheticConfig::default();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("manifest line {line:?}")))?;
            let bad = |_| Error::Config(format!("manifest value {line:?}"));
            match key.trim() {
                "seed" => cfg.seed = value.trim().parse().map_err(bad)?,
                "genes" => cfg.genes = value.trim().parse().map_err(bad)?,
                "num_marks" => cfg.num_marks = value.trim().parse().map_err(bad)?,
                "num_bins" => cfg.num_bins = value.trim().parse().map_err(bad)?,
                "planted_mark" => cfg.planted_mark = value.trim().parse().map_err(bad)?,
                "window_start" => cfg.window.0 = value.trim().parse().map_err(bad)?,
                "window_end" => cfg.window.1 = value.trim().parse().map_err(bad)?,
                "noise" => {
                    cfg.noise = value
                        .trim()
                        .parse()
                        .map_err(|_| Error::Config(format!("manifest value {line:?}")))?
                }
                "coefficient" => {
                    cfg.coefficient = value
                        .trim()
                        .parse()
                        .map_err(|_| Error::Config(format!("manifest value {line:?}")))?
                }
                other => return Err(Error::Config(format!("unknown manifest key {other:?}"))),
            }
        }
        Ok(cfg)
    }

    fn validate(&self) -> Result<()> {
        let (b0, b1) = self.window;
        if self.num_marks == 0 || self.num_bins == 0 {
            return Err(Error::invalid("generate_synthetic", "marks and bins must be positive"));
        }
        if b0 > b1 || b1 >= self.num_bins {
            return Err(Error::invalid(
                "generate_synthetic",
                format!("window [{b0}, {b1}] outside [0, {})", self.num_bins),
            ));
        }
        if self.planted_mark >= self.num_marks {
            return Err(Error::invalid(
                "generate_synthetic",
                format!("planted mark {} of {}", self.planted_mark, self.num_marks),
            ));
        }
        if !(self.noise >= 0.0) {
            return Err(Error::invalid("generate_synthetic", "noise must be nonnegative"));
        }
        Ok(())
    }

    /// Sum of one planted row over the window.
    pub fn window_sum(&self, x: &Tensor) -> f64 {
        let (b0, b1) = self.window;
        x.row(self.planted_mark)[b0..=b1].iter().sum()
    }
}

/// Signals are |N(0, 1)| per bin. Each cell's target is `c·Σ_window X[j*]`
/// plus N(0, σ²/2), and y_diff = y_A − y_B, so y_diff carries exactly
/// `c·Σ_window (Xᴬ − Xᴮ)[j*]` plus N(0, σ²) noise.
pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<Dataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let noise = Normal::new(0.0, cfg.noise / std::f64::consts::SQRT_2)
        .map_err(|e| Error::invalid("generate_synthetic", e.to_string()))?;
    let spec = BinnedSignalSpec::new(cfg.num_marks, cfg.num_bins);
    let cells = cfg.num_marks * cfg.num_bins;
    let width = (cfg.genes.max(1)).to_string().len();
    let mut samples = Vec::with_capacity(cfg.genes);
    for i in 0..cfg.genes {
        let mut draw = || -> Tensor {
            let data = (0..cells)
                .map(|_| {
                    let v: f64 = StandardNormal.sample(&mut rng);
                    v.abs()
                })
                .collect();
            Tensor::new(vec![cfg.num_marks, cfg.num_bins], data).expect("signal shape")
        };
        let xa = draw();
        let xb = draw();
        let y_a = cfg.coefficient * cfg.window_sum(&xa) + noise.sample(&mut rng);
        let y_b = cfg.coefficient * cfg.window_sum(&xb) + noise.sample(&mut rng);
        samples.push(GeneSample {
            gene_id: format!("gene{:0width$}", i + 1),
            xa,
            xb,
            expr_a: y_a,
            expr_b: y_b,
            y_a,
            y_b,
            y_diff: y_a - y_b,
            class_a: 0,
            class_b: 0,
        });
    }
    assign_classes(&mut samples)?;
    Ok(Dataset {
        spec,
        unit: ExpressionUnit::Log,
        samples,
        skipped: 0,
    })
}

fn assign_classes(samples: &mut [GeneSample]) -> Result<()> {
    if samples.is_empty() {
        return Ok(());
    }
    let pop_a: Vec<f64> = samples.iter().map(|s| s.expr_a).collect();
    let pop_b: Vec<f64> = samples.iter().map(|s| s.expr_b).collect();
    let (med_a, med_b) = (median(&pop_a)?, median(&pop_b)?);
    for s in samples {
        s.class_a = if s.expr_a > med_a { 1 } else { -1 };
        s.class_b = if s.expr_b > med_b { 1 } else { -1 };
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Normalization {
    #[default]
    None,
    Log1p,
}

impl FromStr for Normalization {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "none" => Ok(Normalization::None),
            "log1p" => Ok(Normalization::Log1p),
            other => Err(format!("unknown normalization {other:?} (none, log1p)")),
        }
    }
}

pub fn normalize_signals(dataset: &Dataset, mode: Normalization) -> Result<Dataset> {
    let mut out = dataset.clone();
    if mode == Normalization::None {
        return Ok(out);
    }
    for s in &mut out.samples {
        for x in [&mut s.xa, &mut s.xb] {
            for v in x.data_mut() {
                if *v < 0.0 {
                    return Err(Error::invalid(
                        "normalize_signals",
                        format!("negative signal {v} in gene {}", s.gene_id),
                    ));
                }
                *v = v.ln_1p();
            }
        }
    }
    Ok(out)
}

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.display().to_string(),
        line,
        msg: msg.into(),
    }
}

/// Infers `(M, T)` from a signal file header.
pub fn read_signal_spec(path: &Path) -> Result<BinnedSignalSpec> {
    let text = fs::read_to_string(path)?;
    let header = text.lines().next().ok_or_else(|| parse_err(path, 1, "missing header"))?;
    let mut marks = 0;
    let mut bins = 0;
    for col in header.split('\t').skip(1) {
        let parsed = col
            .strip_prefix("hm")
            .and_then(|r| r.split_once("_bin"))
            .and_then(|(k, t)| Some((k.parse::<usize>().ok()?, t.parse::<usize>().ok()?)));
        let (k, t) = parsed.ok_or_else(|| parse_err(path, 1, format!("bad column {col:?}")))?;
        marks = marks.max(k);
        bins = bins.max(t);
    }
    if marks == 0 || bins == 0 {
        return Err(parse_err(path, 1, "no signal columns"));
    }
    Ok(BinnedSignalSpec::new(marks, bins))
}

/// Rows of one signal file in file order.
pub fn read_signal_file(path: &Path, spec: &BinnedSignalSpec) -> Result<Vec<(String, Tensor)>> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines().enumerate();
    let expected: Vec<String> = std::iter::once("gene_id".to_string())
        .chain(spec.column_names())
        .collect();
    match lines.next() {
        Some((_, header)) => {
            let cols: Vec<&str> = header.split('\t').collect();
            if cols != expected {
                return Err(parse_err(
                    path,
                    1,
                    format!(
                        "header does not match {} marks x {} bins ({} columns, found {})",
                        spec.num_marks,
                        spec.num_bins,
                        expected.len(),
                        cols.len()
                    ),
                ));
            }
        }
        None => return Err(parse_err(path, 1, "missing header")),
    }
    let mut seen = HashSet::new();
    let mut rows = Vec::new();
    for (i, line) in lines {
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != expected.len() {
            return Err(parse_err(
                path,
                lineno,
                format!("expected {} fields, found {}", expected.len(), fields.len()),
            ));
        }
        let id = fields[0].to_string();
        if !seen.insert(id.clone()) {
            return Err(parse_err(path, lineno, format!("duplicate gene_id {id:?}")));
        }
        let mut data = Vec::with_capacity(fields.len() - 1);
        for f in &fields[1..] {
            let v: f64 = f
                .parse()
                .map_err(|_| parse_err(path, lineno, format!("non-numeric value {f:?}")))?;
            if !v.is_finite() || v < 0.0 {
                return Err(parse_err(path, lineno, format!("negative or non-finite value {f:?}")));
            }
            data.push(v);
        }
        rows.push((id, Tensor::new(vec![spec.num_marks, spec.num_bins], data)?));
    }
    Ok(rows)
}

/// Expression rows `(gene_id, value_A, value_B)` and their unit.
pub fn read_expression_file(path: &Path) -> Result<(ExpressionUnit, Vec<(String, f64, f64)>)> {
    let text = fs::read_to_string(path)?;
    let mut unit = ExpressionUnit::Counts;
    let mut rows = Vec::new();
    let mut seen = HashSet::new();
    let mut header_seen = false;
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix('#') {
            if let Some(u) = rest.trim().strip_prefix("unit=") {
                unit = u.trim().parse().map_err(|e: String| parse_err(path, lineno, e))?;
            }
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if !header_seen {
            header_seen = true;
            if fields.first() == Some(&"gene_id") {
                if fields.len() != 3 {
                    return Err(parse_err(path, lineno, "header needs 3 columns"));
                }
                continue;
            }
        }
        if fields.len() != 3 {
            return Err(parse_err(
                path,
                lineno,
                format!("expected 3 fields, found {}", fields.len()),
            ));
        }
        let mut values = [0.0f64; 2];
        for (slot, f) in values.iter_mut().zip(&fields[1..]) {
            *slot = f
                .parse()
                .map_err(|_| parse_err(path, lineno, format!("non-numeric value {f:?}")))?;
            if !slot.is_finite() || (unit != ExpressionUnit::Log && *slot < 0.0) {
                return Err(parse_err(path, lineno, format!("invalid expression value {f:?}")));
            }
        }
        let id = fields[0].to_string();
        if !seen.insert(id.clone()) {
            return Err(parse_err(path, lineno, format!("duplicate gene_id {id:?}")));
        }
        rows.push((id, values[0], values[1]));
    }
    Ok((unit, rows))
}

/// Joins the three files on gene_id, in expression-file order. Genes missing
/// from any file are skipped and counted.
pub fn load_dataset(files: &DatasetFiles, spec: &BinnedSignalSpec) -> Result<Dataset> {
    let sig_a = read_signal_file(&files.signals_a, spec)?;
    let sig_b = read_signal_file(&files.signals_b, spec)?;
    let (unit, expr) = read_expression_file(&files.expression)?;
    if expr.is_empty() {
        log::warn!("{}: no expression rows, dataset is empty", files.expression.display());
    }

    let all_ids: HashSet<&str> = sig_a
        .iter()
        .map(|(id, _)| id.as_str())
        .chain(sig_b.iter().map(|(id, _)| id.as_str()))
        .chain(expr.iter().map(|(id, _, _)| id.as_str()))
        .collect();
    let mut map_a: HashMap<String, Tensor> = sig_a.iter().cloned().collect();
    let mut map_b: HashMap<String, Tensor> = sig_b.iter().cloned().collect();

    let mut samples = Vec::with_capacity(expr.len());
    for (id, a, b) in &expr {
        let (Some(xa), Some(xb)) = (map_a.remove(id), map_b.remove(id)) else {
            continue;
        };
        let (y_a, y_b, y_diff) = match unit {
            ExpressionUnit::Log => (*a, *b, a - b),
            _ => compute_labels(*a, *b)?,
        };
        samples.push(GeneSample {
            gene_id: id.clone(),
            xa,
            xb,
            expr_a: *a,
            expr_b: *b,
            y_a,
            y_b,
            y_diff,
            class_a: 0,
            class_b: 0,
        });
    }
    assign_classes(&mut samples)?;
    let skipped = all_ids.len() - samples.len();
    if skipped > 0 {
        log::warn!("skipped {skipped} genes not present in all three files");
    }
    Ok(Dataset {
        spec: *spec,
        unit,
        samples,
        skipped,
    })
}

pub fn save_dataset(dataset: &Dataset, files: &DatasetFiles) -> Result<()> {
    let header: String = std::iter::once("gene_id".to_string())
        .chain(dataset.spec.column_names())
        .collect::<Vec<_>>()
        .join("\t");
    for (path, pick) in [
        (&files.signals_a, (|s: &GeneSample| &s.xa) as fn(&GeneSample) -> &Tensor),
        (&files.signals_b, |s: &GeneSample| &s.xb),
    ] {
        let mut out = String::with_capacity(dataset.len() * dataset.spec.num_marks * dataset.spec.num_bins * 20);
        out.push_str(&header);
        out.push('\n');
        for s in &dataset.samples {
            out.push_str(&s.gene_id);
            for v in pick(s).data() {
                let _ = write!(out, "\t{v}");
            }
            out.push('\n');
        }
        fs::write(path, out)?;
    }
    let mut out = format!("#unit={}\ngene_id\tvalue_A\tvalue_B\n", dataset.unit.tag());
    for s in &dataset.samples {
        let _ = writeln!(out, "{}\t{}\t{}", s.gene_id, s.expr_a, s.expr_b);
    }
    fs::write(&files.expression, out)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(path: &Path, text: &str) {
        fs::write(path, text).unwrap();
    }

    fn toy_files(dir: &Path) -> DatasetFiles {
        let files = DatasetFiles::in_dir(dir);
        let header = "gene_id\thm1_bin1\thm1_bin2\thm1_bin3\thm2_bin1\thm2_bin2\thm2_bin3\n";
        write(
            &files.signals_a,
            &format!("{header}g1\t0\t1\t2\t3\t4\t5\ng2\t0.5\t0.25\t0\t0\t0\t1e-3\ng3\t10\t9\t8\t7\t6\t5\n"),
        );
        write(
            &files.signals_b,
            &format!("{header}g1\t1\t1\t1\t1\t1\t1\ng2\t2\t2\t2\t2\t2\t2\ng3\t0\t0\t0\t0\t0\t0.125\n"),
        );
        write(
            &files.expression,
            "#unit=counts\ngene_id\tcount_A\tcount_B\ng1\t10\t0\ng2\t0\t0\ng3\t3\t7\n",
        );
        files
    }

    #[test]
    fn loads_toy_fixture_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let files = toy_files(dir.path());
        let spec = BinnedSignalSpec::new(2, 3);
        let ds = load_dataset(&files, &spec).unwrap();
        assert_eq!(ds.len(), 3);
        assert_eq!(ds.skipped, 0);
        assert_eq!(ds.unit, ExpressionUnit::Counts);
        let g2 = &ds.samples[1];
        assert_eq!(g2.gene_id, "g2");
        assert_eq!(g2.xa.data(), &[0.5, 0.25, 0.0, 0.0, 0.0, 1e-3]);
        assert_eq!(g2.xa.shape(), &[2, 3]);
        assert_eq!(ds.samples[2].xb.get(1, 2), 0.125);
        assert_eq!(ds.samples[0].y_a, 11f64.ln());
        assert_eq!(ds.samples[0].y_diff, 11f64.ln() - 0.0);
        assert_eq!(read_signal_spec(&files.signals_a).unwrap(), spec);
    }

    #[test]
    fn round_trip_is_value_identical() {
        let dir = tempfile::tempdir().unwrap();
        let files = toy_files(dir.path());
        let spec = BinnedSignalSpec::new(2, 3);
        let ds = load_dataset(&files, &spec).unwrap();
        let out = tempfile::tempdir().unwrap();
        let files2 = DatasetFiles::in_dir(out.path());
        save_dataset(&ds, &files2).unwrap();
        assert_eq!(load_dataset(&files2, &spec).unwrap(), ds);

        let synth = generate_synthetic(&SyntheticConfig {
            genes: 20,
            num_bins: 10,
            window: (2, 5),
            ..SyntheticConfig::default()
        })
        .unwrap();
        save_dataset(&synth, &files2).unwrap();
        let back = load_dataset(&files2, &synth.spec).unwrap();
        assert_eq!(back, synth);
    }

    #[test]
    fn partial_genes_are_skipped() {
        let dir = tempfile::tempdir().unwrap();
        let files = toy_files(dir.path());
        let mut a = fs::read_to_string(&files.signals_a).unwrap();
        a.push_str("only_a\t1\t1\t1\t1\t1\t1\n");
        write(&files.signals_a, &a);
        let ds = load_dataset(&files, &BinnedSignalSpec::new(2, 3)).unwrap();
        assert_eq!(ds.len(), 3);
        assert_eq!(ds.skipped, 1);
    }

    #[test]
    fn empty_expression_gives_empty_dataset() {
        let dir = tempfile::tempdir().unwrap();
        let files = toy_files(dir.path());
        write(&files.expression, "");
        let ds = load_dataset(&files, &BinnedSignalSpec::new(2, 3)).unwrap();
        assert!(ds.is_empty());
    }

    #[test]
    fn malformed_rows_report_file_and_line() {
        let dir = tempfile::tempdir().unwrap();
        let files = toy_files(dir.path());
        let spec = BinnedSignalSpec::new(2, 3);
        let header = "gene_id\thm1_bin1\thm1_bin2\thm1_bin3\thm2_bin1\thm2_bin2\thm2_bin3\n";
        for (body, needle) in [
            ("g1\t0\t1\t2\n", "expected 7 fields"),
            ("g1\t0\t1\t2\t3\t4\t-5\n", "negative"),
            ("g1\t0\t1\tx\t3\t4\t5\n", "non-numeric"),
            ("g1\t0\t1\t2\t3\t4\t5\ng1\t0\t1\t2\t3\t4\t5\n", "duplicate"),
        ] {
            write(&files.signals_a, &format!("{header}{body}"));
            let err = load_dataset(&files, &spec).unwrap_err();
            let msg = err.to_string();
            assert!(matches!(err, Error::Parse { .. }), "{msg}");
            assert!(msg.contains("signals_A.tsv:"), "{msg}");
            assert!(msg.contains(needle), "{msg}");
        }
        let wrong = BinnedSignalSpec::new(2, 4);
        toy_files(dir.path());
        assert!(load_dataset(&files, &wrong).is_err());
    }

    #[test]
    fn compute_labels_examples() {
        assert_eq!(compute_labels(0.0, 0.0).unwrap(), (0.0, 0.0, 0.0));
        assert_eq!(compute_labels(5.0, 5.0).unwrap().2, 0.0);
        let (a, b, d) = compute_labels(std::f64::consts::E - 1.0, 0.0).unwrap();
        assert!((a - 1.0).abs() < 1e-15 && b == 0.0 && (d - 1.0).abs() < 1e-15);
        assert!(compute_labels(-1.0, 0.0).is_err());
    }

    #[test]
    fn binarize_examples() {
        let pop = [1.0, 2.0, 3.0];
        assert_eq!(binarize_expression(&pop, 3.0).unwrap(), 1);
        assert_eq!(binarize_expression(&pop, 1.0).unwrap(), -1);
        assert_eq!(binarize_expression(&pop, 2.0).unwrap(), -1);
        assert!(binarize_expression(&[], 2.0).is_err());
    }

    #[test]
    fn build_input_variants() {
        let xa = Tensor::new(vec![5, 200], crate::testutil::uniform(1000, 1)).unwrap();
        let xb = Tensor::new(vec![5, 200], crate::testutil::uniform(1000, 2)).unwrap();
        let ModelInput::Stacked(d) = build_input(Variant::RawD, &xa, &xa).unwrap() else {
            panic!()
        };
        assert!(d.data().iter().all(|v| *v == 0.0));
        let ModelInput::Stacked(c) = build_input(Variant::RawC, &xa, &xb).unwrap() else {
            panic!()
        };
        assert_eq!(c.shape(), &[10, 200]);
        let ModelInput::Stacked(r) = build_input(Variant::Raw, &xa, &xb).unwrap() else {
            panic!()
        };
        assert_eq!(r.shape(), &[15, 200]);
        for j in 0..5 {
            for t in 0..200 {
                assert_eq!(r.get(10 + j, t), r.get(j, t) - r.get(5 + j, t));
            }
        }
        assert_eq!(
            build_input(Variant::Aux, &xa, &xb).unwrap(),
            ModelInput::Pair(xa.clone(), xb.clone())
        );
        let short = Tensor::zeros(&[5, 199]);
        assert!(build_input(Variant::Raw, &xa, &short).is_err());
    }

    #[test]
    fn fold_split_examples() {
        let s = split_folds(18_460, 0, FoldSizes::REFERENCE).unwrap();
        assert_eq!((s.train.len(), s.valid.len(), s.test.len()), (10_000, 2_360, 6_100));
        assert_eq!(FoldSizes::proportional(18_460), FoldSizes::REFERENCE);
        assert_eq!(split_folds(100, 3, FoldSizes::proportional(100)).unwrap(),
                   split_folds(100, 3, FoldSizes::proportional(100)).unwrap());
        let small = split_folds(10, 5, FoldSizes { train: 6, valid: 2, test: 2 }).unwrap();
        let mut all: Vec<usize> = [small.train, small.valid, small.test].concat();
        all.sort();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        assert!(split_folds(5, 0, FoldSizes { train: 4, valid: 1, test: 1 }).is_err());
    }

    #[test]
    fn synthetic_noiseless_labels_match_brute_force() {
        let cfg = SyntheticConfig {
            genes: 50,
            noise: 0.0,
            planted_mark: 1,
            window: (95, 105),
            coefficient: 1.0,
            ..SyntheticConfig::default()
        };
        let ds = generate_synthetic(&cfg).unwrap();
        for s in &ds.samples {
            let mut expect = 0.0;
            for t in 95..=105 {
                expect += s.xa.get(1, t) - s.xb.get(1, t);
            }
            assert!((s.y_diff - expect).abs() < 1e-12);
            assert!(s.xa.data().iter().chain(s.xb.data()).all(|v| *v >= 0.0));
        }
    }

    #[test]
    fn synthetic_is_seed_deterministic() {
        let cfg = SyntheticConfig {
            genes: 10,
            num_bins: 20,
            window: (3, 7),
            ..SyntheticConfig::default()
        };
        assert_eq!(generate_synthetic(&cfg).unwrap(), generate_synthetic(&cfg).unwrap());
        let other = SyntheticConfig { seed: 1, ..cfg.clone() };
        assert_ne!(generate_synthetic(&cfg).unwrap(), generate_synthetic(&other).unwrap());
        let bad = SyntheticConfig { window: (5, 20), ..cfg };
        assert!(generate_synthetic(&bad).is_err());
    }

    #[test]
    fn manifest_round_trip() {
        let cfg = SyntheticConfig {
            seed: 7,
            noise: 0.25,
            window: (20, 30),
            ..SyntheticConfig::default()
        };
        assert_eq!(SyntheticConfig::from_manifest(&cfg.to_manifest()).unwrap(), cfg);
    }

    #[test]
    fn normalization_modes() {
        let ds = generate_synthetic(&SyntheticConfig {
            genes: 3,
            num_bins: 8,
            window: (1, 2),
            ..SyntheticConfig::default()
        })
        .unwrap();
        assert_eq!(normalize_signals(&ds, Normalization::None).unwrap(), ds);
        let logged = normalize_signals(&ds, Normalization::Log1p).unwrap();
        for (a, b) in ds.samples.iter().zip(&logged.samples) {
            for (x, y) in a.xa.data().iter().zip(b.xa.data()) {
                assert!((y.exp_m1() - x).abs() < 1e-12);
            }
        }
        let mut zero = ds.clone();
        zero.samples[0].xa.data_mut()[0] = 0.0;
        assert_eq!(normalize_signals(&zero, Normalization::Log1p).unwrap().samples[0].xa.data()[0], 0.0);
        zero.samples[0].xa.data_mut()[0] = -1.0;
        assert!(normalize_signals(&zero, Normalization::Log1p).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn labels_antisymmetric(a in 0.0f64..1e6, b in 0.0f64..1e6) {
                let (_, _, d1) = compute_labels(a, b).unwrap();
                let (_, _, d2) = compute_labels(b, a).unwrap();
                prop_assert_eq!(d1, -d2);
            }

            #[test]
            fn split_is_partition(n in 0usize..500, seed in any::<u64>()) {
                let s = split_folds(n, seed, FoldSizes::proportional(n)).unwrap();
                let mut seen = vec![false; n];
                for &i in s.train.iter().chain(&s.valid).chain(&s.test) {
                    prop_assert!(i < n);
                    prop_assert!(!seen[i]);
                    seen[i] = true;
                }
                prop_assert!(seen.iter().all(|v| *v));
            }
        }
    }
}
