//! Level I / Level II embedding modules and the seven DeepDiff variants.
//!
//! Level I encodes each HM row with its own bidirectional LSTM and pools the
//! bins with a per-row attention context. Level II runs a second
//! bidirectional LSTM across the row summaries and pools those with an
//! HM-level context. Variants differ in which input matrices they stack,
//! how many towers they build and which heads they train.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{softmax_values, Graph, ParamStore, Tensor, Var};
use crate::data::{build_input, hm_name, ModelInput};
use crate::error::{Error, Result};
use crate::layers::{AttentionPool, BiLstm, Dropout, MlpHead};
use crate::optim::OptimizerState;
use crate::train::TrainConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    RawD,
    RawC,
    Raw,
    Aux,
    RawAux,
    AuxSiamese,
    RawAuxSiamese,
}

impl Variant {
    pub const ALL: [Variant; 7] = [
        Variant::RawD,
        Variant::RawC,
        Variant::Raw,
        Variant::Aux,
        Variant::RawAux,
        Variant::AuxSiamese,
        Variant::RawAuxSiamese,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            Variant::RawD => "raw_d",
            Variant::RawC => "raw_c",
            Variant::Raw => "raw",
            Variant::Aux => "aux",
            Variant::RawAux => "raw_aux",
            Variant::AuxSiamese => "aux_siamese",
            Variant::RawAuxSiamese => "raw_aux_siamese",
        }
    }

    pub fn display_name(self) -> &'static str {
        match self {
            Variant::RawD => "Raw:d",
            Variant::RawC => "Raw:c",
            Variant::Raw => "Raw",
            Variant::Aux => "Aux",
            Variant::RawAux => "Raw+Aux",
            Variant::AuxSiamese => "Aux+Siamese",
            Variant::RawAuxSiamese => "Raw+Aux+Siamese",
        }
    }

    /// Variants with per-cell towers and auxiliary heads.
    pub fn has_cell_aux(self) -> bool {
        !matches!(self, Variant::RawD | Variant::RawC | Variant::Raw)
    }

    pub fn has_siamese(self) -> bool {
        matches!(self, Variant::AuxSiamese | Variant::RawAuxSiamese)
    }

    /// Variants with a Level I module over the stacked `[Xᴬ; Xᴮ; Xᴬ−Xᴮ]` input.
    pub fn has_diff_tower(self) -> bool {
        matches!(self, Variant::RawAux | Variant::RawAuxSiamese)
    }

    /// Rows of the stacked input for single-matrix variants.
    pub fn stacked_rows(self, marks: usize) -> Option<usize> {
        match self {
            Variant::RawD => Some(marks),
            Variant::RawC => Some(2 * marks),
            Variant::Raw | Variant::RawAux | Variant::RawAuxSiamese => Some(3 * marks),
            Variant::Aux | Variant::AuxSiamese => None,
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.tag() == s)
            .ok_or_else(|| Error::UnknownVariant(s.to_string()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub variant: Variant,
    pub num_marks: usize,
    pub num_bins: usize,
    /// Hidden size D of each direction of the Level I LSTMs.
    pub level1_hidden: usize,
    /// Hidden size of each direction of the Level II LSTM.
    pub level2_hidden: usize,
    pub mlp_hidden: usize,
    pub dropout: f64,
    pub forget_bias: f64,
    /// Per-cell heads emit two logits instead of a regression value.
    pub classification_aux: bool,
}

impl ModelConfig {
    pub fn new(variant: Variant, num_marks: usize, num_bins: usize) -> Self {
        Self {
            variant,
            num_marks,
            num_bins,
            level1_hidden: 32,
            level2_hidden: 16,
            mlp_hidden: 16,
            dropout: 0.5,
            forget_bias: 1.0,
            classification_aux: false,
        }
    }

    fn validate(&self) -> Result<()> {
        let sizes = [
            ("num_marks", self.num_marks),
            ("num_bins", self.num_bins),
            ("level1_hidden", self.level1_hidden),
            ("level2_hidden", self.level2_hidden),
            ("mlp_hidden", self.mlp_hidden),
        ];
        for (name, v) in sizes {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        Dropout::new(self.dropout, false)?;
        Ok(())
    }
}

/// Forward-pass mode. Training mode draws dropout masks from the generator.
pub enum Mode<'r> {
    Eval,
    Train(&'r mut dyn RngCore),
}

/// Per-row bidirectional LSTMs, each followed by its own bin attention.
#[derive(Clone, Debug)]
pub struct LevelIEmbedding {
    pub rows: Vec<(BiLstm, AttentionPool)>,
}

pub struct LevelIOutput {
    /// One pooled vector of length 2D per row.
    pub summaries: Vec<Var>,
    /// Bin attention weights per row, length T each.
    pub alphas: Vec<Var>,
    /// BiLSTM outputs per row, `T × 2D`.
    pub embeddings: Vec<Var>,
}

impl LevelIEmbedding {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        rows: usize,
        hidden: usize,
        forget_bias: f64,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let rows = (0..rows)
            .map(|j| {
                let lstm = BiLstm::new(store, &format!("{prefix}.row{j}"), 1, hidden, forget_bias, rng);
                let pool = AttentionPool::new(store, &format!("{prefix}.row{j}"), 2 * hidden, rng);
                (lstm, pool)
            })
            .collect();
        Self { rows }
    }

    pub fn num_rows(&self) -> usize {
        self.rows.len()
    }

    pub fn output_size(&self) -> usize {
        2 * self.rows[0].0.hidden_size()
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<LevelIOutput> {
        let shape = g.shape(x).to_vec();
        if shape.len() != 2 || shape[0] != self.rows.len() {
            return Err(Error::shape("level1_forward", &[self.rows.len(), 0], &shape));
        }
        let bins = shape[1];
        if bins == 0 {
            return Err(Error::Empty("level1_forward"));
        }
        let mut out = LevelIOutput {
            summaries: Vec::with_capacity(self.rows.len()),
            alphas: Vec::with_capacity(self.rows.len()),
            embeddings: Vec::with_capacity(self.rows.len()),
        };
        for (j, (lstm, pool)) in self.rows.iter().enumerate() {
            let row = g.row(x, j)?;
            let seq = g.reshape(row, &[bins, 1])?;
            let h = lstm.forward(g, seq)?;
            let (summary, alpha) = pool.forward(g, h)?;
            out.summaries.push(summary);
            out.alphas.push(alpha);
            out.embeddings.push(h);
        }
        Ok(out)
    }
}

/// Bidirectional LSTM across the Level I summaries plus HM-level attention.
#[derive(Clone, Debug)]
pub struct LevelIIEmbedding {
    pub lstm: BiLstm,
    pub pool: AttentionPool,
}

pub struct LevelIIOutput {
    pub v: Var,
    pub beta: Var,
    /// BiLSTM outputs, one row per input summary.
    pub states: Var,
}

impl LevelIIEmbedding {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        input_size: usize,
        hidden: usize,
        forget_bias: f64,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Self {
            lstm: BiLstm::new(store, prefix, input_size, hidden, forget_bias, rng),
            pool: AttentionPool::new(store, prefix, 2 * hidden, rng),
        }
    }

    pub fn output_size(&self) -> usize {
        2 * self.lstm.hidden_size()
    }

    pub fn forward(&self, g: &mut Graph, summaries: &[Var]) -> Result<LevelIIOutput> {
        if summaries.is_empty() {
            return Err(Error::Empty("level2_forward"));
        }
        let seq = g.stack(summaries)?;
        let states = self.lstm.forward(g, seq)?;
        let (v, beta) = self.pool.forward(g, states)?;
        Ok(LevelIIOutput { v, beta, states })
    }
}

/// The single-matrix architecture: `mlp(f₂(f₁(X)))`.
#[derive(Clone, Debug)]
pub struct SingleMatrixNet {
    pub f1: LevelIEmbedding,
    pub f2: LevelIIEmbedding,
    pub head: MlpHead,
}

pub struct SingleMatrixOutput {
    pub y: Var,
    pub level1: LevelIOutput,
    pub level2: LevelIIOutput,
}

impl SingleMatrixNet {
    pub fn forward(
        &self,
        g: &mut Graph,
        x: Var,
        dropout: Dropout,
        rng: &mut dyn RngCore,
    ) -> Result<SingleMatrixOutput> {
        let level1 = self.f1.forward(g, x)?;
        let dropped = apply_dropout(g, &level1.summaries, dropout, rng)?;
        let level2 = self.f2.forward(g, &dropped)?;
        let v = dropout.apply(g, level2.v, rng)?;
        let y = self.head.forward(g, v)?;
        Ok(SingleMatrixOutput { y, level1, level2 })
    }
}

fn apply_dropout(
    g: &mut Graph,
    xs: &[Var],
    dropout: Dropout,
    rng: &mut dyn RngCore,
) -> Result<Vec<Var>> {
    xs.iter().map(|x| dropout.apply(g, *x, rng)).collect()
}

/// One cell type's Level I + Level II stack and its expression head.
#[derive(Clone, Debug)]
pub struct CellTower {
    pub f1: LevelIEmbedding,
    pub f2: LevelIIEmbedding,
    pub head: MlpHead,
}

#[derive(Clone, Debug)]
pub struct Towers {
    /// Level I and II over the stacked `[Xᴬ; Xᴮ; Xᴬ−Xᴮ]` input (Raw+Aux family).
    pub diff: Option<(LevelIEmbedding, LevelIIEmbedding)>,
    pub a: CellTower,
    pub b: CellTower,
    pub diff_head: MlpHead,
    pub tied: bool,
}

#[derive(Clone, Debug)]
pub enum Wiring {
    Single(SingleMatrixNet),
    Towers(Towers),
}

/// Result of one forward pass; all values live on the graph.
pub struct ForwardOutput {
    pub y_diff: Var,
    pub y_a: Option<Var>,
    pub y_b: Option<Var>,
    /// Concatenated Level I summaries of the A and B towers.
    pub siamese: Option<(Var, Var)>,
    pub level1: Vec<(String, Vec<String>, LevelIOutput)>,
    pub level2: Vec<(String, Vec<String>, LevelIIOutput)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BinAttention {
    pub module: String,
    pub legend: Vec<String>,
    pub alpha: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HmAttention {
    pub module: String,
    pub legend: Vec<String>,
    pub beta: Vec<f64>,
}

/// Bin-level (α) and HM-level (β) attention of one gene.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionRecord {
    pub gene_id: String,
    pub level1: Vec<BinAttention>,
    pub level2: Vec<HmAttention>,
}

impl AttentionRecord {
    fn from_output(g: &Graph, out: &ForwardOutput, gene_id: &str) -> Self {
        let level1 = out
            .level1
            .iter()
            .map(|(module, legend, l1)| BinAttention {
                module: module.clone(),
                legend: legend.clone(),
                alpha: l1.alphas.iter().map(|a| g.value(*a).data().to_vec()).collect(),
            })
            .collect();
        let level2 = out
            .level2
            .iter()
            .map(|(module, legend, l2)| HmAttention {
                module: module.clone(),
                legend: legend.clone(),
                beta: g.value(l2.beta).data().to_vec(),
            })
            .collect();
        Self {
            gene_id: gene_id.to_string(),
            level1,
            level2,
        }
    }

    /// Level II weights of the module producing the differential prediction.
    pub fn main_beta(&self) -> &HmAttention {
        self.level2
            .iter()
            .find(|m| m.module == "f2" || m.module == "f2_d")
            .unwrap_or(&self.level2[0])
    }
}

/// Eval-mode predictions for one gene.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub y_diff: f64,
    /// Per-cell outputs: regression values, or P(class = +1) in
    /// classification mode.
    pub cells: Option<(f64, f64)>,
    pub attention: AttentionRecord,
}

impl Prediction {
    pub fn aux(&self) -> Result<(f64, f64)> {
        self.cells.ok_or_else(|| {
            Error::invalid("prediction", "this variant has no per-cell auxiliary outputs")
        })
    }
}

#[derive(Clone, Debug)]
pub struct DeepDiffModel {
    config: ModelConfig,
    store: ParamStore,
    wiring: Wiring,
}

fn cell_legend(prefix: &str, marks: usize) -> Vec<String> {
    (0..marks)
        .map(|k| format!("{prefix}{}", hm_name(k, marks)))
        .collect()
}

fn stacked_legend(variant: Variant, marks: usize) -> Vec<String> {
    match variant {
        Variant::RawD => cell_legend("", marks),
        Variant::RawC => [cell_legend("A:", marks), cell_legend("B:", marks)].concat(),
        _ => [
            cell_legend("A:", marks),
            cell_legend("B:", marks),
            cell_legend("A-B:", marks),
        ]
        .concat(),
    }
}

impl DeepDiffModel {
    /// Builds a freshly initialized model; `seed` drives all initial weights.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let c = &config;
        let d2 = 2 * c.level1_hidden;
        let v_len = 2 * c.level2_hidden;
        let cell_out = if c.classification_aux { 2 } else { 1 };

        let wiring = if !c.variant.has_cell_aux() {
            let rows = c.variant.stacked_rows(c.num_marks).expect("raw variant");
            let f1 = LevelIEmbedding::new(&mut store, "f1", rows, c.level1_hidden, c.forget_bias, &mut rng);
            let f2 = LevelIIEmbedding::new(&mut store, "f2", d2, c.level2_hidden, c.forget_bias, &mut rng);
            let head = MlpHead::new(&mut store, "mlp", &[v_len, c.mlp_hidden, 1], &mut rng);
            Wiring::Single(SingleMatrixNet { f1, f2, head })
        } else {
            let tied = c.variant.has_siamese();
            let diff = if c.variant.has_diff_tower() {
                let f1 = LevelIEmbedding::new(
                    &mut store,
                    "f1_d",
                    3 * c.num_marks,
                    c.level1_hidden,
                    c.forget_bias,
                    &mut rng,
                );
                let f2 = LevelIIEmbedding::new(&mut store, "f2_d", d2, c.level2_hidden, c.forget_bias, &mut rng);
                Some((f1, f2))
            } else {
                None
            };
            let (f1_a, f1_b) = if tied {
                let shared = LevelIEmbedding::new(
                    &mut store,
                    "f1_shared",
                    c.num_marks,
                    c.level1_hidden,
                    c.forget_bias,
                    &mut rng,
                );
                (shared.clone(), shared)
            } else {
                let a = LevelIEmbedding::new(&mut store, "f1_a", c.num_marks, c.level1_hidden, c.forget_bias, &mut rng);
                let b = LevelIEmbedding::new(&mut store, "f1_b", c.num_marks, c.level1_hidden, c.forget_bias, &mut rng);
                (a, b)
            };
            let mut tower = |f1: LevelIEmbedding, name: &str, store: &mut ParamStore| CellTower {
                f1,
                f2: LevelIIEmbedding::new(store, &format!("f2_{name}"), d2, c.level2_hidden, c.forget_bias, &mut rng),
                head: MlpHead::new(store, &format!("head_{name}"), &[v_len, cell_out], &mut rng),
            };
            let a = tower(f1_a, "a", &mut store);
            let b = tower(f1_b, "b", &mut store);
            let head_in = if diff.is_some() { v_len } else { 2 * v_len };
            let diff_head = MlpHead::new(&mut store, "mlp", &[head_in, c.mlp_hidden, 1], &mut rng);
            Wiring::Towers(Towers {
                diff,
                a,
                b,
                diff_head,
                tied,
            })
        };
        Ok(Self {
            config,
            store,
            wiring,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn variant(&self) -> Variant {
        self.config.variant
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn wiring(&self) -> &Wiring {
        &self.wiring
    }

    /// Sets the output bias of the per-cell regression heads. Returns false when
    /// the variant has no regression cell heads.
    pub fn set_cell_bias(&mut self, a: f64, b: f64) -> bool {
        let Wiring::Towers(t) = &self.wiring else {
            return false;
        };
        if self.config.classification_aux {
            return false;
        }
        for (head, value) in [(&t.a.head, a), (&t.b.head, b)] {
            let bias = head.layers.last().expect("head has a layer").bias;
            self.store.get_mut(bias).tensor.data_mut().fill(value);
        }
        true
    }

    /// A fresh graph bound to this model's parameters.
    pub fn graph(&self) -> Graph<'_> {
        Graph::new(&self.store)
    }

    pub fn forward(&self, g: &mut Graph, xa: &Tensor, xb: &Tensor, mode: Mode) -> Result<ForwardOutput> {
        let expect = [self.config.num_marks, self.config.num_bins];
        for x in [xa, xb] {
            if x.shape() != expect {
                return Err(Error::shape("forward input", &expect, x.shape()));
            }
        }
        let mut no_rng = NoRng;
        let (training, rng): (bool, &mut dyn RngCore) = match mode {
            Mode::Eval => (false, &mut no_rng),
            Mode::Train(rng) => (true, rng),
        };
        let dropout = Dropout::new(self.config.dropout, training)?;
        let variant = self.config.variant;
        let marks = self.config.num_marks;
        let input = build_input(variant, xa, xb)?;

        match &self.wiring {
            Wiring::Single(net) => {
                let ModelInput::Stacked(x) = input else {
                    unreachable!("single-matrix variants stack their input")
                };
                let x = g.constant(x);
                let out = net.forward(g, x, dropout, rng)?;
                let legend = stacked_legend(variant, marks);
                Ok(ForwardOutput {
                    y_diff: out.y,
                    y_a: None,
                    y_b: None,
                    siamese: None,
                    level1: vec![("f1".into(), legend.clone(), out.level1)],
                    level2: vec![("f2".into(), legend, out.level2)],
                })
            }
            Wiring::Towers(t) => {
                let (stacked, xa, xb) = match input {
                    ModelInput::Pair(a, b) => (None, a, b),
                    ModelInput::StackedAndPair(s, a, b) => (Some(s), a, b),
                    ModelInput::Stacked(_) => unreachable!("tower variants keep the pair"),
                };
                let xa = g.constant(xa);
                let xb = g.constant(xb);
                let l1a = t.a.f1.forward(g, xa)?;
                let l1b = t.b.f1.forward(g, xb)?;
                let siamese = if variant.has_siamese() {
                    let ea = g.concat(&l1a.summaries, 0)?;
                    let eb = g.concat(&l1b.summaries, 0)?;
                    Some((ea, eb))
                } else {
                    None
                };
                let ha = apply_dropout(g, &l1a.summaries, dropout, rng)?;
                let hb = apply_dropout(g, &l1b.summaries, dropout, rng)?;
                let l2a = t.a.f2.forward(g, &ha)?;
                let l2b = t.b.f2.forward(g, &hb)?;
                let va = dropout.apply(g, l2a.v, rng)?;
                let vb = dropout.apply(g, l2b.v, rng)?;
                let y_a = t.a.head.forward(g, va)?;
                let y_b = t.b.head.forward(g, vb)?;

                let (a_name, b_name) = if t.tied {
                    ("f1_shared(A)", "f1_shared(B)")
                } else {
                    ("f1_a", "f1_b")
                };
                let cell_names = cell_legend("", marks);
                let mut level1 = Vec::new();
                let mut level2 = Vec::new();
                let y_diff = match (&t.diff, stacked) {
                    (Some((f1_d, f2_d)), Some(s)) => {
                        let s = g.constant(s);
                        let l1d = f1_d.forward(g, s)?;
                        let mut seq = apply_dropout(g, &l1d.summaries, dropout, rng)?;
                        seq.extend_from_slice(&ha);
                        seq.extend_from_slice(&hb);
                        let l2d = f2_d.forward(g, &seq)?;
                        let vd = dropout.apply(g, l2d.v, rng)?;
                        let y = t.diff_head.forward(g, vd)?;
                        let d_legend = stacked_legend(variant, marks);
                        let full = [
                            d_legend.clone(),
                            cell_legend("A:", marks),
                            cell_legend("B:", marks),
                        ]
                        .concat();
                        level1.push(("f1_d".to_string(), d_legend, l1d));
                        level2.push(("f2_d".to_string(), full, l2d));
                        y
                    }
                    (None, None) => {
                        let v = g.concat(&[va, vb], 0)?;
                        t.diff_head.forward(g, v)?
                    }
                    _ => unreachable!("diff tower and stacked input go together"),
                };
                level1.push((a_name.to_string(), cell_names.clone(), l1a));
                level1.push((b_name.to_string(), cell_names.clone(), l1b));
                level2.push(("f2_a".to_string(), cell_names.clone(), l2a));
                level2.push(("f2_b".to_string(), cell_names, l2b));
                Ok(ForwardOutput {
                    y_diff,
                    y_a: Some(y_a),
                    y_b: Some(y_b),
                    siamese,
                    level1,
                    level2,
                })
            }
        }
    }

    /// Eval-mode forward returning plain values.
    pub fn predict(&self, gene_id: &str, xa: &Tensor, xb: &Tensor) -> Result<Prediction> {
        let mut g = self.graph();
        let out = self.forward(&mut g, xa, xb, Mode::Eval)?;
        let y_diff = g.value(out.y_diff).item();
        let cell_value = |v: Var| {
            let data = g.value(v).data();
            if self.config.classification_aux {
                softmax_values(data)[1]
            } else {
                data[0]
            }
        };
        let cells = match (out.y_a, out.y_b) {
            (Some(a), Some(b)) => Some((cell_value(a), cell_value(b))),
            _ => None,
        };
        let attention = AttentionRecord::from_output(&g, &out, gene_id);
        Ok(Prediction {
            y_diff,
            cells,
            attention,
        })
    }

    pub fn extract_attention(&self, gene_id: &str, xa: &Tensor, xb: &Tensor) -> Result<AttentionRecord> {
        Ok(self.predict(gene_id, xa, xb)?.attention)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            model: self.config.clone(),
            train: None,
            epoch: None,
            params: self
                .store
                .iter()
                .map(|(_, p)| NamedTensor {
                    name: p.name.clone(),
                    shape: p.tensor.shape().to_vec(),
                    data: p.tensor.data().to_vec(),
                })
                .collect(),
            optimizer: None,
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        if ckpt.format != CHECKPOINT_FORMAT {
            return Err(Error::Checkpoint(format!("unsupported format {:?}", ckpt.format)));
        }
        let mut model = DeepDiffModel::new(ckpt.model.clone(), 0)?;
        if ckpt.params.len() != model.store.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameter tensors, found {}",
                model.store.len(),
                ckpt.params.len()
            )));
        }
        for p in &ckpt.params {
            model.store.load(&p.name, &p.shape, &p.data)?;
        }
        Ok(model)
    }
}

/// Dropout is disabled in eval mode, so the generator is never consulted.
struct NoRng;

impl RngCore for NoRng {
    fn next_u32(&mut self) -> u32 {
        unreachable!("eval mode draws no random numbers")
    }

    fn next_u64(&mut self) -> u64 {
        unreachable!("eval mode draws no random numbers")
    }

    fn fill_bytes(&mut self, _dst: &mut [u8]) {
        unreachable!("eval mode draws no random numbers")
    }
}

pub const CHECKPOINT_FORMAT: &str = "deepdiff-checkpoint/1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Self-describing JSON container: variant and hyperparameters, every named
/// parameter tensor and, optionally, optimizer state for resumption.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub model: ModelConfig,
    pub train: Option<TrainConfig>,
    pub epoch: Option<usize>,
    pub params: Vec<NamedTensor>,
    pub optimizer: Option<OptimizerState>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut bytes = serde_json::to_vec(self)?;
        bytes.push(b'\n');
        Ok(bytes)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        Ok(serde_json::from_slice(bytes)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
