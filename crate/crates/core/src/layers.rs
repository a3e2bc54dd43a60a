//! Neural building blocks recorded on a [`Graph`]: LSTM cells, bidirectional
//! LSTMs, attention pooling with a learned context vector, MLP heads and
//! dropout.

use rand::{Rng, RngCore};

use crate::autodiff::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::error::{Error, Result};

/// Uniform in [-1/sqrt(fan_in), 1/sqrt(fan_in)].
fn init_uniform(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("init shape")
}

/// LSTM cell with stacked gate parameters in the order input, forget,
/// candidate, output.
///
/// `w_ih` is `4D × n_in`, `w_hh` is `4D × D` and `bias` has length `4D`.
#[derive(Clone, Debug)]
pub struct LstmCell {
    pub input_size: usize,
    pub hidden_size: usize,
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub bias: ParamId,
}

impl LstmCell {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        input_size: usize,
        hidden_size: usize,
        forget_bias: f64,
        rng: &mut impl Rng,
    ) -> Self {
        let d = hidden_size;
        let w_ih = store.add(
            format!("{prefix}.w_ih"),
            init_uniform(&[4 * d, input_size], input_size, rng),
        );
        let w_hh = store.add(format!("{prefix}.w_hh"), init_uniform(&[4 * d, d], d, rng));
        let mut b = vec![0.0; 4 * d];
        b[d..2 * d].iter_mut().for_each(|v| *v = forget_bias);
        let bias = store.add(format!("{prefix}.bias"), Tensor::vector(b));
        Self {
            input_size,
            hidden_size,
            w_ih,
            w_hh,
            bias,
        }
    }

    /// One recurrence step from explicit previous states.
    pub fn step(&self, g: &mut Graph, x: Var, h_prev: Var, c_prev: Var) -> Result<(Var, Var)> {
        let d = self.hidden_size;
        if g.shape(x) != [self.input_size] {
            return Err(Error::shape("lstm_step input", &[self.input_size], g.shape(x)));
        }
        for state in [h_prev, c_prev] {
            if g.shape(state) != [d] {
                return Err(Error::shape("lstm_step state", &[d], g.shape(state)));
            }
        }
        let w_ih = g.param(self.w_ih);
        let proj = g.matmul(w_ih, x)?;
        self.step_projected(g, proj, Some((h_prev, c_prev)))
    }

    /// Step given the precomputed input projection `W_ih · x_t`. A missing
    /// previous state stands for the zero vectors.
    fn step_projected(
        &self,
        g: &mut Graph,
        proj: Var,
        prev: Option<(Var, Var)>,
    ) -> Result<(Var, Var)> {
        let d = self.hidden_size;
        let bias = g.param(self.bias);
        let mut gates = g.add(proj, bias)?;
        if let Some((h, _)) = prev {
            let w_hh = g.param(self.w_hh);
            let rec = g.matmul(w_hh, h)?;
            gates = g.add(gates, rec)?;
        }
        let i = g.slice(gates, 0, d)?;
        let i = g.sigmoid(i)?;
        let cand = g.slice(gates, 2 * d, d)?;
        let cand = g.tanh(cand)?;
        let o = g.slice(gates, 3 * d, d)?;
        let o = g.sigmoid(o)?;
        let mut c = g.mul(i, cand)?;
        if let Some((_, c_prev)) = prev {
            let f = g.slice(gates, d, d)?;
            let f = g.sigmoid(f)?;
            let kept = g.mul(f, c_prev)?;
            c = g.add(kept, c)?;
        }
        let tc = g.tanh(c)?;
        let h = g.mul(o, tc)?;
        Ok((h, c))
    }

    /// Runs the cell over every row of `seq` (`T × n_in`) from zero state.
    /// Row t of the `T × D` result is the hidden state at time t regardless of
    /// the direction of travel.
    pub fn run(&self, g: &mut Graph, seq: Var, reverse: bool) -> Result<Var> {
        let shape = g.shape(seq).to_vec();
        if shape.len() != 2 || shape[1] != self.input_size {
            return Err(Error::shape("lstm input", &[0, self.input_size], &shape));
        }
        if shape[0] == 0 {
            return Err(Error::Empty("lstm sequence"));
        }
        let w_ih = g.param(self.w_ih);
        let w_t = g.transpose(w_ih)?;
        let proj = g.matmul(seq, w_t)?;
        let w_hh = g.param(self.w_hh);
        let bias = g.param(self.bias);
        g.lstm(proj, w_hh, bias, reverse)
    }

    /// Same recurrence as [`LstmCell::run`] unrolled into elementary graph
    /// operations, one step at a time.
    pub fn run_unrolled(&self, g: &mut Graph, seq: Var, reverse: bool) -> Result<Var> {
        let shape = g.shape(seq).to_vec();
        if shape.len() != 2 || shape[1] != self.input_size {
            return Err(Error::shape("lstm input", &[0, self.input_size], &shape));
        }
        let steps = shape[0];
        if steps == 0 {
            return Err(Error::Empty("lstm sequence"));
        }
        let w_ih = g.param(self.w_ih);
        let w_t = g.transpose(w_ih)?;
        let proj = g.matmul(seq, w_t)?;
        let mut hidden = vec![None; steps];
        let mut state = None;
        for k in 0..steps {
            let t = if reverse { steps - 1 - k } else { k };
            let p = g.row(proj, t)?;
            let (h, c) = self.step_projected(g, p, state)?;
            hidden[t] = Some(h);
            state = Some((h, c));
        }
        let hidden: Vec<Var> = hidden.into_iter().map(|h| h.expect("every step visited")).collect();
        g.stack(&hidden)
    }
}

/// Two independent LSTM cells, one per direction.
#[derive(Clone, Debug)]
pub struct BiLstm {
    pub forward: LstmCell,
    pub backward: LstmCell,
}

impl BiLstm {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        input_size: usize,
        hidden_size: usize,
        forget_bias: f64,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            forward: LstmCell::new(
                store,
                &format!("{prefix}.fwd"),
                input_size,
                hidden_size,
                forget_bias,
                rng,
            ),
            backward: LstmCell::new(
                store,
                &format!("{prefix}.bwd"),
                input_size,
                hidden_size,
                forget_bias,
                rng,
            ),
        }
    }

    pub fn hidden_size(&self) -> usize {
        self.forward.hidden_size
    }

    /// Maps a `T × n_in` sequence to `T × 2D`; row t is `[fwd_t, bwd_t]`.
    pub fn forward(&self, g: &mut Graph, seq: Var) -> Result<Var> {
        let fwd = self.forward.run(g, seq, false)?;
        let bwd = self.backward.run(g, seq, true)?;
        g.concat(&[fwd, bwd], 1)
    }
}

/// Soft attention over the rows of an embedding matrix with one learned
/// context vector.
#[derive(Clone, Debug)]
pub struct AttentionPool {
    pub context: ParamId,
    pub dim: usize,
}

impl AttentionPool {
    pub fn new(store: &mut ParamStore, prefix: &str, dim: usize, rng: &mut impl Rng) -> Self {
        let context = store.add(format!("{prefix}.context"), init_uniform(&[dim], dim, rng));
        Self { context, dim }
    }

    /// Returns `(summary, weights)`: weights are the softmax of each row's dot
    /// product with the context, the summary is the weighted sum of rows.
    pub fn forward(&self, g: &mut Graph, embeddings: Var) -> Result<(Var, Var)> {
        let shape = g.shape(embeddings).to_vec();
        if shape.len() != 2 || shape[1] != self.dim {
            return Err(Error::shape("attention_pool", &[0, self.dim], &shape));
        }
        if shape[0] == 0 {
            return Err(Error::Empty("attention_pool"));
        }
        let ctx = g.param(self.context);
        let scores = g.matmul(embeddings, ctx)?;
        let weights = g.softmax(scores)?;
        let summary = g.matmul(weights, embeddings)?;
        Ok((summary, weights))
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_features: usize,
    pub out_features: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        in_features: usize,
        out_features: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let weight = store.add(
            format!("{prefix}.weight"),
            init_uniform(&[out_features, in_features], in_features, rng),
        );
        let bias = store.add(format!("{prefix}.bias"), Tensor::zeros(&[out_features]));
        Self {
            weight,
            bias,
            in_features,
            out_features,
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        if g.shape(x) != [self.in_features] {
            return Err(Error::shape("linear", &[self.in_features], g.shape(x)));
        }
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        let y = g.matmul(w, x)?;
        g.add(y, b)
    }
}

/// Affine layers with tanh between them; the last layer stays linear.
#[derive(Clone, Debug)]
pub struct MlpHead {
    pub layers: Vec<Linear>,
}

impl MlpHead {
    /// `sizes` lists the input width, any hidden widths, then the output width.
    pub fn new(store: &mut ParamStore, prefix: &str, sizes: &[usize], rng: &mut impl Rng) -> Self {
        assert!(sizes.len() >= 2, "an MLP needs input and output sizes");
        let layers = sizes
            .windows(2)
            .enumerate()
            .map(|(k, w)| Linear::new(store, &format!("{prefix}.layer{k}"), w[0], w[1], rng))
            .collect();
        Self { layers }
    }

    pub fn input_size(&self) -> usize {
        self.layers[0].in_features
    }

    pub fn output_size(&self) -> usize {
        self.layers.last().expect("nonempty").out_features
    }

    pub fn forward(&self, g: &mut Graph, input: Var) -> Result<Var> {
        let mut x = input;
        let last = self.layers.len() - 1;
        for (k, layer) in self.layers.iter().enumerate() {
            x = layer.forward(g, x)?;
            if k != last {
                x = g.tanh(x)?;
            }
        }
        Ok(x)
    }
}

/// Inverted dropout: survivors are scaled by 1/(1-p) in training mode.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Dropout {
    p: f64,
    training: bool,
}

impl Dropout {
    pub fn new(p: f64, training: bool) -> Result<Self> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::invalid("dropout", format!("probability {p} outside [0, 1)")));
        }
        Ok(Self { p, training })
    }

    pub fn p(&self) -> f64 {
        self.p
    }

    pub fn training(&self) -> bool {
        self.training
    }

    pub fn apply(&self, g: &mut Graph, x: Var, rng: &mut dyn RngCore) -> Result<Var> {
        if !self.training || self.p == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 - self.p;
        let scale = 1.0 / keep;
        let shape = g.shape(x).to_vec();
        let n: usize = shape.iter().product();
        let mask: Vec<f64> = (0..n)
            .map(|_| if rng.random::<f64>() < keep { scale } else { 0.0 })
            .collect();
        let mask = g.constant(Tensor::new(shape, mask)?);
        g.mul(x, mask)
    }
}
