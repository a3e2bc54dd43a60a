//! Reverse-mode differentiation over a linear tape of recorded operations.
//!
//! Every forward operation appends a node holding its output value and the
//! inputs it was computed from. Because inputs always exist before the node
//! that consumes them, the node order is already topological and `backward`
//! is a single reverse sweep.

use std::collections::HashMap;
use std::ops::{Deref, DerefMut};

use super::params::{ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum UnaryOp {
    Sigmoid,
    Tanh,
    Relu,
    Scale(f64),
    AddScalar(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Unary(UnaryOp, Var),
    Binary(BinaryOp, Var, Var),
    /// Operand dimensions after promoting 1-D operands: (p, q, r).
    MatMul(Var, Var, [usize; 3]),
    Transpose(Var),
    Reshape(Var),
    Softmax(Var),
    LogSoftmax(Var),
    Concat { inputs: Vec<Var>, axis: usize },
    Stack(Vec<Var>),
    Slice { input: Var, start: usize },
    Row { input: Var, index: usize },
    Sum(Var),
    Norm(Var),
    Lstm(Box<LstmCache>),
}

/// Inputs and saved activations of a fused LSTM sequence node.
#[derive(Clone, Debug)]
struct LstmCache {
    proj: Var,
    w_hh: Var,
    bias: Var,
    reverse: bool,
    /// Gate activations i, f, g, o per time step, `T × 4D`.
    gates: Vec<f64>,
    /// Cell states per time step, `T × D`.
    cells: Vec<f64>,
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Unary(UnaryOp::Sigmoid, _) => "sigmoid",
            Op::Unary(UnaryOp::Tanh, _) => "tanh",
            Op::Unary(UnaryOp::Relu, _) => "relu",
            Op::Unary(UnaryOp::Scale(_), _) => "scale",
            Op::Unary(UnaryOp::AddScalar(_), _) => "add_scalar",
            Op::Binary(BinaryOp::Add, ..) => "add",
            Op::Binary(BinaryOp::Sub, ..) => "sub",
            Op::Binary(BinaryOp::Mul, ..) => "mul",
            Op::MatMul(..) => "matmul",
            Op::Transpose(_) => "transpose",
            Op::Reshape(_) => "reshape",
            Op::Softmax(_) => "softmax",
            Op::LogSoftmax(_) => "log_softmax",
            Op::Concat { .. } => "concat",
            Op::Stack(_) => "stack",
            Op::Slice { .. } => "slice",
            Op::Row { .. } => "row",
            Op::Sum(_) => "sum",
            Op::Norm(_) => "norm",
            Op::Lstm(_) => "lstm",
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
    param: Option<ParamId>,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softmax_in_place(values: &mut [f64]) {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in values.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in values.iter_mut() {
        *v /= total;
    }
}

/// Numerically stable softmax of a slice.
pub fn softmax_values(scores: &[f64]) -> Vec<f64> {
    let mut out = scores.to_vec();
    softmax_in_place(&mut out);
    out
}

fn matmul_kernel(a: &[f64], b: &[f64], p: usize, q: usize, r: usize) -> Vec<f64> {
    let mut c = vec![0.0; p * r];
    if r == 1 {
        for i in 0..p {
            let row = &a[i * q..(i + 1) * q];
            c[i] = row.iter().zip(b).map(|(x, y)| x * y).sum();
        }
        return c;
    }
    for i in 0..p {
        let out = &mut c[i * r..(i + 1) * r];
        for j in 0..q {
            let aij = a[i * q + j];
            if aij == 0.0 {
                continue;
            }
            let brow = &b[j * r..(j + 1) * r];
            for (o, bv) in out.iter_mut().zip(brow) {
                *o += aij * bv;
            }
        }
    }
    c
}

/// Backpropagation through time for a fused LSTM node. Returns the
/// gradients of the projections, `W_hh` and the bias.
fn lstm_backward(cache: &LstmCache, hidden: &Tensor, w_hh: &Tensor, dh_out: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let [steps, d] = [hidden.shape()[0], hidden.shape()[1]];
    let g4 = 4 * d;
    let h = hidden.data();
    let w = w_hh.data();
    let mut dproj = vec![0.0; steps * g4];
    let mut dw = vec![0.0; g4 * d];
    let mut db = vec![0.0; g4];
    let mut dh_rec = vec![0.0; d];
    let mut dc_next = vec![0.0; d];
    let time = |k: usize| if cache.reverse { steps - 1 - k } else { k };
    for k in (0..steps).rev() {
        let t = time(k);
        let prev = (k > 0).then(|| time(k - 1));
        let act = &cache.gates[t * g4..(t + 1) * g4];
        let dz = &mut dproj[t * g4..(t + 1) * g4];
        for u in 0..d {
            let (i, f, cg, o) = (act[u], act[d + u], act[2 * d + u], act[3 * d + u]);
            let dh = dh_out[t * d + u] + dh_rec[u];
            let tc = cache.cells[t * d + u].tanh();
            let dc = dh * o * (1.0 - tc * tc) + dc_next[u];
            let c_prev = prev.map_or(0.0, |tp| cache.cells[tp * d + u]);
            dz[u] = dc * cg * i * (1.0 - i);
            dz[d + u] = dc * c_prev * f * (1.0 - f);
            dz[2 * d + u] = dc * i * (1.0 - cg * cg);
            dz[3 * d + u] = dh * tc * o * (1.0 - o);
            dc_next[u] = dc * f;
        }
        for (b, z) in db.iter_mut().zip(dz.iter()) {
            *b += z;
        }
        dh_rec.iter_mut().for_each(|v| *v = 0.0);
        if let Some(tp) = prev {
            let h_prev = &h[tp * d..(tp + 1) * d];
            for ((dwrow, wrow), z) in dw.chunks_exact_mut(d).zip(w.chunks_exact(d)).zip(dz.iter()) {
                for ((dwv, hv), (wv, r)) in dwrow.iter_mut().zip(h_prev).zip(wrow.iter().zip(dh_rec.iter_mut())) {
                    *dwv += z * hv;
                    *r += wv * z;
                }
            }
        }
    }
    (dproj, dw, db)
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient accumulated on a leaf that requires grad.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    /// Records an input or constant. Gradients are tracked iff the tensor
    /// requires grad.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        let needs_grad = tensor.requires_grad();
        self.nodes.push(Node {
            value: tensor,
            op: Op::Leaf,
            needs_grad,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, tensor: Tensor) -> Var {
        self.leaf(tensor.with_requires_grad(false))
    }

    fn param_leaf(&mut self, id: ParamId, tensor: &Tensor) -> Var {
        let mut value = Tensor::new(tensor.shape().to_vec(), tensor.data().to_vec())
            .expect("parameter tensor is well formed");
        value = value.with_requires_grad(true);
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: true,
            param: Some(id),
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, op: Op, shape: Vec<usize>, data: Vec<f64>, inputs: &[Var]) -> Result<Var> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: op.name() });
        }
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        let value = Tensor::new(shape, data)?;
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
            param: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn unary(&mut self, op: UnaryOp, x: Var) -> Result<Var> {
        let src = &self.nodes[x.0].value;
        let data: Vec<f64> = match op {
            UnaryOp::Sigmoid => src.data().iter().map(|&v| sigmoid(v)).collect(),
            UnaryOp::Tanh => src.data().iter().map(|v| v.tanh()).collect(),
            UnaryOp::Relu => src.data().iter().map(|v| v.max(0.0)).collect(),
            UnaryOp::Scale(s) => src.data().iter().map(|v| v * s).collect(),
            UnaryOp::AddScalar(s) => src.data().iter().map(|v| v + s).collect(),
        };
        let shape = src.shape().to_vec();
        self.push(Op::Unary(op, x), shape, data, &[x])
    }

    pub fn binary(&mut self, op: BinaryOp, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if va.shape() != vb.shape() {
            let name = Op::Binary(op, a, b).name();
            return Err(Error::shape(name, va.shape(), vb.shape()));
        }
        let f: fn(f64, f64) -> f64 = match op {
            BinaryOp::Add => |x, y| x + y,
            BinaryOp::Sub => |x, y| x - y,
            BinaryOp::Mul => |x, y| x * y,
        };
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let shape = va.shape().to_vec();
        self.push(Op::Binary(op, a, b), shape, data, &[a, b])
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryOp::Sigmoid, x)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryOp::Tanh, x)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryOp::Relu, x)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        self.unary(UnaryOp::Scale(s), x)
    }

    pub fn add_scalar(&mut self, x: Var, s: f64) -> Result<Var> {
        self.unary(UnaryOp::AddScalar(s), x)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Mul, a, b)
    }

    /// Matrix product. A 1-D left operand is treated as a row vector and a
    /// 1-D right operand as a column vector; promoted axes are dropped from
    /// the result.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let (p, q, a_vec) = match sa.as_slice() {
            [q] => (1, *q, true),
            [p, q] => (*p, *q, false),
            _ => return Err(Error::shape("matmul", &sa, &sb)),
        };
        let (q2, r, b_vec) = match sb.as_slice() {
            [q] => (*q, 1, true),
            [q, r] => (*q, *r, false),
            _ => return Err(Error::shape("matmul", &sa, &sb)),
        };
        if q != q2 {
            return Err(Error::shape("matmul", &sa, &sb));
        }
        let data = matmul_kernel(
            self.nodes[a.0].value.data(),
            self.nodes[b.0].value.data(),
            p,
            q,
            r,
        );
        let shape = match (a_vec, b_vec) {
            (true, true) => vec![],
            (true, false) => vec![r],
            (false, true) => vec![p],
            (false, false) => vec![p, r],
        };
        self.push(Op::MatMul(a, b, [p, q, r]), shape, data, &[a, b])
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let src = &self.nodes[x.0].value;
        let [p, q] = match *src.shape() {
            [p, q] => [p, q],
            _ => return Err(Error::invalid("transpose", "expects a 2-D tensor")),
        };
        let d = src.data();
        let mut data = vec![0.0; p * q];
        for i in 0..p {
            for j in 0..q {
                data[j * p + i] = d[i * q + j];
            }
        }
        self.push(Op::Transpose(x), vec![q, p], data, &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let src = &self.nodes[x.0].value;
        if shape.iter().product::<usize>() != src.len() {
            return Err(Error::shape("reshape", src.shape(), shape));
        }
        let data = src.data().to_vec();
        self.push(Op::Reshape(x), shape.to_vec(), data, &[x])
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let src = &self.nodes[x.0].value;
        if src.shape().len() != 1 {
            return Err(Error::invalid("softmax", "expects a 1-D tensor"));
        }
        if src.is_empty() {
            return Err(Error::Empty("softmax"));
        }
        let data = softmax_values(src.data());
        let shape = src.shape().to_vec();
        self.push(Op::Softmax(x), shape, data, &[x])
    }

    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let src = &self.nodes[x.0].value;
        if src.shape().len() != 1 {
            return Err(Error::invalid("log_softmax", "expects a 1-D tensor"));
        }
        if src.is_empty() {
            return Err(Error::Empty("log_softmax"));
        }
        let max = src.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + src.data().iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        let data = src.data().iter().map(|v| v - lse).collect();
        let shape = src.shape().to_vec();
        self.push(Op::LogSoftmax(x), shape, data, &[x])
    }

    /// Concatenates 1-D tensors end to end (axis 0), or 2-D tensors along
    /// rows (axis 0) or columns (axis 1).
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = *inputs.first().ok_or(Error::Empty("concat"))?;
        let rank = self.shape(first).len();
        if rank == 0 || rank > 2 || axis >= rank {
            return Err(Error::invalid("concat", format!("axis {axis} on rank {rank}")));
        }
        let base = self.shape(first).to_vec();
        for v in &inputs[1..] {
            let s = self.shape(*v);
            let compatible = s.len() == rank
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(k, (x, y))| k == axis || x == y);
            if !compatible {
                return Err(Error::shape("concat", &base, s));
            }
        }
        let (shape, data) = if rank == 1 || axis == 0 {
            let mut data = Vec::new();
            let mut along = 0;
            for v in inputs {
                let t = &self.nodes[v.0].value;
                along += t.shape()[0];
                data.extend_from_slice(t.data());
            }
            let mut shape = base.clone();
            shape[0] = along;
            (shape, data)
        } else {
            let rows = base[0];
            let widths: Vec<usize> = inputs.iter().map(|v| self.shape(*v)[1]).collect();
            let total: usize = widths.iter().sum();
            let mut data = Vec::with_capacity(rows * total);
            for i in 0..rows {
                for v in inputs {
                    data.extend_from_slice(self.nodes[v.0].value.row(i));
                }
            }
            (vec![rows, total], data)
        };
        self.push(
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            shape,
            data,
            inputs,
        )
    }

    /// Stacks equal-length 1-D tensors as the rows of a matrix.
    pub fn stack(&mut self, inputs: &[Var]) -> Result<Var> {
        let first = *inputs.first().ok_or(Error::Empty("stack"))?;
        let base = self.shape(first).to_vec();
        if base.len() != 1 {
            return Err(Error::invalid("stack", "expects 1-D tensors"));
        }
        let mut data = Vec::with_capacity(inputs.len() * base[0]);
        for v in inputs {
            let t = &self.nodes[v.0].value;
            if t.shape() != base.as_slice() {
                return Err(Error::shape("stack", &base, t.shape()));
            }
            data.extend_from_slice(t.data());
        }
        self.push(
            Op::Stack(inputs.to_vec()),
            vec![inputs.len(), base[0]],
            data,
            inputs,
        )
    }

    /// Contiguous range `[start, start + len)` of a 1-D tensor.
    pub fn slice(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let src = &self.nodes[x.0].value;
        if src.shape().len() != 1 || start + len > src.len() {
            return Err(Error::invalid(
                "slice",
                format!("range {start}..{} of shape {:?}", start + len, src.shape()),
            ));
        }
        let data = src.data()[start..start + len].to_vec();
        self.push(Op::Slice { input: x, start }, vec![len], data, &[x])
    }

    pub fn row(&mut self, x: Var, index: usize) -> Result<Var> {
        let src = &self.nodes[x.0].value;
        if src.shape().len() != 2 || index >= src.shape()[0] {
            return Err(Error::invalid(
                "row",
                format!("row {index} of shape {:?}", src.shape()),
            ));
        }
        let data = src.row(index).to_vec();
        let cols = src.shape()[1];
        self.push(Op::Row { input: x, index }, vec![cols], data, &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let total = self.nodes[x.0].value.data().iter().sum();
        self.push(Op::Sum(x), vec![], vec![total], &[x])
    }

    /// Euclidean norm. The gradient at the origin is taken as zero.
    pub fn norm(&mut self, x: Var) -> Result<Var> {
        let n = self.nodes[x.0]
            .value
            .data()
            .iter()
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt();
        self.push(Op::Norm(x), vec![], vec![n], &[x])
    }

    /// Runs a whole LSTM sequence as one node.
    ///
    /// `proj` (`T × 4D`) holds the input projections `W_ih·x_t`, `w_hh` is
    /// `4D × D` and `bias` has length `4D`; gates are stacked as input,
    /// forget, candidate, output. The state starts at zero and steps run
    /// from `t = 0` upwards, or downwards when `reverse` is set. The output
    /// is `T × D` with row `t` the hidden state at time `t`.
    pub fn lstm(&mut self, proj: Var, w_hh: Var, bias: Var, reverse: bool) -> Result<Var> {
        let (ps, ws, bs) = (self.shape(proj), self.shape(w_hh), self.shape(bias));
        let (steps, d) = match (ps, ws) {
            ([t, g4], [g4w, d]) if *g4 == 4 * d && g4w == g4 => (*t, *d),
            _ => return Err(Error::shape("lstm", ps, ws)),
        };
        if bs != [4 * d] {
            return Err(Error::shape("lstm bias", &[4 * d], bs));
        }
        if steps == 0 {
            return Err(Error::Empty("lstm sequence"));
        }
        let pv = self.nodes[proj.0].value.data();
        let wv = self.nodes[w_hh.0].value.data();
        let bv = self.nodes[bias.0].value.data();
        let g4 = 4 * d;
        // Column-major copy of W_hh so the recurrence is a sequence of axpys.
        let mut w_cols = vec![0.0; g4 * d];
        for (r, wrow) in wv.chunks_exact(d).enumerate() {
            for (j, w) in wrow.iter().enumerate() {
                w_cols[j * g4 + r] = *w;
            }
        }
        let mut hidden = vec![0.0; steps * d];
        let mut gates = vec![0.0; steps * g4];
        let mut cells = vec![0.0; steps * d];
        let mut z = vec![0.0; g4];
        let mut prev: Option<usize> = None;
        for k in 0..steps {
            let t = if reverse { steps - 1 - k } else { k };
            for (j, zj) in z.iter_mut().enumerate() {
                *zj = pv[t * g4 + j] + bv[j];
            }
            if let Some(tp) = prev {
                let h = &hidden[tp * d..(tp + 1) * d];
                for (hj, col) in h.iter().zip(w_cols.chunks_exact(g4)) {
                    for (zj, w) in z.iter_mut().zip(col) {
                        *zj += w * hj;
                    }
                }
            }
            let act = &mut gates[t * g4..(t + 1) * g4];
            for u in 0..d {
                act[u] = sigmoid(z[u]);
                act[d + u] = sigmoid(z[d + u]);
                act[2 * d + u] = z[2 * d + u].tanh();
                act[3 * d + u] = sigmoid(z[3 * d + u]);
            }
            for u in 0..d {
                let fresh = act[u] * act[2 * d + u];
                let c = match prev {
                    Some(tp) => act[d + u] * cells[tp * d + u] + fresh,
                    None => fresh,
                };
                cells[t * d + u] = c;
                hidden[t * d + u] = act[3 * d + u] * c.tanh();
            }
            prev = Some(t);
        }
        let cache = LstmCache {
            proj,
            w_hh,
            bias,
            reverse,
            gates,
            cells,
        };
        self.push(Op::Lstm(Box::new(cache)), vec![steps, d], hidden, &[proj, w_hh, bias])
    }

    /// Propagates d(loss)/d(node) back through the tape and adds the result
    /// into the grad buffer of every leaf that requires grad. Calling it twice
    /// accumulates twice.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.nodes[loss.0].value.is_scalar() {
            return Err(Error::invalid(
                "backward",
                format!("loss must be scalar, got shape {:?}", self.shape(loss)),
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            match &node.op {
                Op::Leaf => {
                    grads[i] = Some(g);
                }
                Op::Unary(op, x) => {
                    let out = node.value.data();
                    let src = self.nodes[x.0].value.data();
                    let dx: Vec<f64> = match op {
                        UnaryOp::Sigmoid => {
                            g.iter().zip(out).map(|(g, y)| g * y * (1.0 - y)).collect()
                        }
                        UnaryOp::Tanh => g.iter().zip(out).map(|(g, y)| g * (1.0 - y * y)).collect(),
                        UnaryOp::Relu => g
                            .iter()
                            .zip(src)
                            .map(|(g, x)| if *x > 0.0 { *g } else { 0.0 })
                            .collect(),
                        UnaryOp::Scale(s) => g.iter().map(|g| g * s).collect(),
                        UnaryOp::AddScalar(_) => g,
                    };
                    self.accumulate(&mut grads, *x, &dx);
                }
                Op::Binary(op, a, b) => {
                    let (a, b) = (*a, *b);
                    match op {
                        BinaryOp::Add => {
                            self.accumulate(&mut grads, a, &g);
                            self.accumulate(&mut grads, b, &g);
                        }
                        BinaryOp::Sub => {
                            self.accumulate(&mut grads, a, &g);
                            let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                            self.accumulate(&mut grads, b, &neg);
                        }
                        BinaryOp::Mul => {
                            let va = self.nodes[a.0].value.data();
                            let vb = self.nodes[b.0].value.data();
                            if self.nodes[a.0].needs_grad {
                                let da: Vec<f64> = g.iter().zip(vb).map(|(g, y)| g * y).collect();
                                self.accumulate(&mut grads, a, &da);
                            }
                            if self.nodes[b.0].needs_grad {
                                let db: Vec<f64> = g.iter().zip(va).map(|(g, x)| g * x).collect();
                                self.accumulate(&mut grads, b, &db);
                            }
                        }
                    }
                }
                Op::MatMul(a, b, [p, q, r]) => {
                    let (a, b, p, q, r) = (*a, *b, *p, *q, *r);
                    let va = self.nodes[a.0].value.data();
                    let vb = self.nodes[b.0].value.data();
                    if self.nodes[a.0].needs_grad {
                        // dA = dC · Bᵀ
                        let mut da = vec![0.0; p * q];
                        if r == 1 {
                            for (row, gi) in da.chunks_exact_mut(q).zip(g.iter()) {
                                for (d, bj) in row.iter_mut().zip(vb) {
                                    *d = gi * bj;
                                }
                            }
                        } else {
                            for i in 0..p {
                                let grow = &g[i * r..(i + 1) * r];
                                for j in 0..q {
                                    let brow = &vb[j * r..(j + 1) * r];
                                    da[i * q + j] = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
                                }
                            }
                        }
                        self.accumulate(&mut grads, a, &da);
                    }
                    if self.nodes[b.0].needs_grad {
                        // dB = Aᵀ · dC
                        let mut db = vec![0.0; q * r];
                        if r == 1 {
                            for (arow, gi) in va.chunks_exact(q).zip(g.iter()) {
                                for (d, aij) in db.iter_mut().zip(arow) {
                                    *d += aij * gi;
                                }
                            }
                        } else {
                            for i in 0..p {
                                let grow = &g[i * r..(i + 1) * r];
                                for j in 0..q {
                                    let aij = va[i * q + j];
                                    let out = &mut db[j * r..(j + 1) * r];
                                    for (o, gv) in out.iter_mut().zip(grow) {
                                        *o += aij * gv;
                                    }
                                }
                            }
                        }
                        self.accumulate(&mut grads, b, &db);
                    }
                }
                Op::Transpose(x) => {
                    let [q, p] = [node.value.shape()[0], node.value.shape()[1]];
                    // output is q×p, input p×q
                    let mut dx = vec![0.0; p * q];
                    for i in 0..p {
                        for j in 0..q {
                            dx[i * q + j] = g[j * p + i];
                        }
                    }
                    self.accumulate(&mut grads, *x, &dx);
                }
                Op::Reshape(x) => {
                    self.accumulate(&mut grads, *x, &g);
                }
                Op::Softmax(x) => {
                    let y = node.value.data();
                    let dot: f64 = g.iter().zip(y).map(|(g, y)| g * y).sum();
                    let dx: Vec<f64> = g.iter().zip(y).map(|(g, y)| y * (g - dot)).collect();
                    self.accumulate(&mut grads, *x, &dx);
                }
                Op::LogSoftmax(x) => {
                    let total: f64 = g.iter().sum();
                    let dx: Vec<f64> = g
                        .iter()
                        .zip(node.value.data())
                        .map(|(g, ly)| g - ly.exp() * total)
                        .collect();
                    self.accumulate(&mut grads, *x, &dx);
                }
                Op::Concat { inputs, axis } => {
                    if node.value.shape().len() == 1 || *axis == 0 {
                        let mut offset = 0;
                        for v in inputs {
                            let n = self.nodes[v.0].value.len();
                            self.accumulate(&mut grads, *v, &g[offset..offset + n]);
                            offset += n;
                        }
                    } else {
                        let rows = node.value.shape()[0];
                        let total = node.value.shape()[1];
                        let mut col = 0;
                        for v in inputs {
                            let w = self.nodes[v.0].value.shape()[1];
                            let mut dx = Vec::with_capacity(rows * w);
                            for i in 0..rows {
                                dx.extend_from_slice(&g[i * total + col..i * total + col + w]);
                            }
                            self.accumulate(&mut grads, *v, &dx);
                            col += w;
                        }
                    }
                }
                Op::Stack(inputs) => {
                    let w = node.value.shape()[1];
                    for (k, v) in inputs.iter().enumerate() {
                        self.accumulate(&mut grads, *v, &g[k * w..(k + 1) * w]);
                    }
                }
                Op::Slice { input, start } => {
                    self.accumulate_at(&mut grads, *input, *start, &g);
                }
                Op::Row { input, index } => {
                    self.accumulate_at(&mut grads, *input, index * g.len(), &g);
                }
                Op::Sum(x) => {
                    let n = self.nodes[x.0].value.len();
                    self.accumulate(&mut grads, *x, &vec![g[0]; n]);
                }
                Op::Norm(x) => {
                    let norm = node.value.item();
                    let src = self.nodes[x.0].value.data();
                    let dx: Vec<f64> = if norm > 0.0 {
                        src.iter().map(|v| g[0] * v / norm).collect()
                    } else {
                        vec![0.0; src.len()]
                    };
                    self.accumulate(&mut grads, *x, &dx);
                }
                Op::Lstm(cache) => {
                    let (dproj, dw, db) = lstm_backward(cache, &node.value, &self.nodes[cache.w_hh.0].value, &g);
                    self.accumulate(&mut grads, cache.proj, &dproj);
                    self.accumulate(&mut grads, cache.w_hh, &dw);
                    self.accumulate(&mut grads, cache.bias, &db);
                }
            }
        }

        for (i, g) in grads.into_iter().enumerate() {
            if let Some(g) = g {
                let node = &mut self.nodes[i];
                if matches!(node.op, Op::Leaf) && node.value.requires_grad() {
                    node.value.accumulate_grad(&g);
                }
            }
        }
        Ok(())
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: Var, delta: &[f64]) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => {
                for (e, d) in existing.iter_mut().zip(delta) {
                    *e += d;
                }
            }
            slot @ None => *slot = Some(delta.to_vec()),
        }
    }

    /// Adds `delta` into the gradient of `v` starting at flat `offset`.
    fn accumulate_at(&self, grads: &mut [Option<Vec<f64>>], v: Var, offset: usize, delta: &[f64]) {
        let node = &self.nodes[v.0];
        if !node.needs_grad {
            return;
        }
        let slot = grads[v.0].get_or_insert_with(|| vec![0.0; node.value.len()]);
        for (e, d) in slot[offset..offset + delta.len()].iter_mut().zip(delta) {
            *e += d;
        }
    }

    /// Gradients accumulated on parameter leaves, in tape order.
    pub fn param_grads(&self) -> impl Iterator<Item = (ParamId, &[f64])> {
        self.nodes.iter().filter_map(|n| match (n.param, n.value.grad()) {
            (Some(id), Some(g)) => Some((id, g)),
            _ => None,
        })
    }
}

/// A tape bound to a parameter store. Each parameter is copied onto the tape
/// once, the first time it is requested, so tied layers share one leaf.
pub struct Graph<'p> {
    tape: Tape,
    store: &'p ParamStore,
    bound: HashMap<ParamId, Var>,
}

impl<'p> Graph<'p> {
    pub fn new(store: &'p ParamStore) -> Self {
        Self {
            tape: Tape::new(),
            store,
            bound: HashMap::new(),
        }
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound.get(&id) {
            return *v;
        }
        let v = self.tape.param_leaf(id, &self.store.get(id).tensor);
        self.bound.insert(id, v);
        v
    }

    pub fn store(&self) -> &'p ParamStore {
        self.store
    }

    pub fn into_tape(self) -> Tape {
        self.tape
    }
}

impl Deref for Graph<'_> {
    type Target = Tape;

    fn deref(&self) -> &Tape {
        &self.tape
    }
}

impl DerefMut for Graph<'_> {
    fn deref_mut(&mut self) -> &mut Tape {
        &mut self.tape
    }
}
