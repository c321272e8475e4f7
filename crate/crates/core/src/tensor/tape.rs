// Wengert-style tape: every primitive appends one node holding its value and
// the ids of its inputs; `backward` walks the nodes once in reverse order.

use super::{sigmoid, ParamId, ParamStore, Tensor};
use crate::error::{dim_err, Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    Matmul(Var, Var),
    MatmulNt(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRowBias(Var, Var),
    BroadcastRows(Var),
    Affine { x: Var, scale: Vec<f64> },
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Exp(Var),
    SoftmaxRows(Var),
    GatherRows { x: Var, index: Vec<usize> },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    Conv1d { x: Var, w: Var, stride: usize, padding: usize },
    StandardizeCols { x: Var, inv_std: Vec<f64>, floored: Vec<bool> },
    MeanRows(Var),
    Sum(Var),
    WeightedSum { x: Var, weights: Vec<f64> },
    SmoothL1(Var),
    SoftBce { logits: Var, targets: Vec<f64>, live: Vec<bool> },
}

#[derive(Clone, Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    needs_grad: bool,
}

/// Floor applied to probabilities inside the soft cross-entropy.
pub const PROB_FLOOR: f64 = 1e-7;

/// Ordered record of executed primitives.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints of every tape node after [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    visited: usize,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    /// Number of nodes whose adjoint rule ran.
    pub fn visited(&self) -> usize {
        self.visited
    }
}

fn dims2(shape: &[usize]) -> Option<(usize, usize)> {
    match *shape {
        [r, c] => Some((r, c)),
        _ => None,
    }
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

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("tape nodes hold valid shapes")
    }

    fn dims(&self, v: Var, what: &str) -> Result<(usize, usize)> {
        dims2(self.shape(v))
            .ok_or_else(|| dim_err(format!("{what} expects a matrix, got {:?}", self.shape(v))))
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, needs_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node { shape, value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Records a constant.
    pub fn constant(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, false)
    }

    /// Records a leaf whose adjoint should be kept, for inspection.
    pub fn input(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, true)
    }

    /// Records a parameter; its adjoint is accumulated into the store.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let t = store.get(id);
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Param(id), t.requires_grad())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a, "matmul")?;
        let (k2, n) = self.dims(b, "matmul")?;
        if k != k2 {
            return Err(dim_err(format!("matmul of [{m}x{k}] and [{k2}x{n}]")));
        }
        let out = matmul_raw(self.value(a), self.value(b), m, k, n);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(vec![m, n], out, Op::Matmul(a, b), ng))
    }

    /// `a [m x k] * b^T` for `b [n x k]`; the layout of `[out x in]` weights.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a, "matmul_nt")?;
        let (n, k2) = self.dims(b, "matmul_nt")?;
        if k != k2 {
            return Err(dim_err(format!("matmul of [{m}x{k}] and transposed [{n}x{k2}]")));
        }
        let bt = transpose_raw(self.value(b), n, k);
        let out = matmul_raw(self.value(a), &bt, m, k, n);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(vec![m, n], out, Op::MatmulNt(a, b), ng))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.dims(a, "transpose")?;
        let out = transpose_raw(self.value(a), m, n);
        let ng = self.ng(a);
        Ok(self.push(vec![n, m], out, Op::Transpose(a), ng))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(a).len() || shape.contains(&0) {
            return Err(dim_err(format!("cannot reshape {:?} to {shape:?}", self.shape(a))));
        }
        let out = self.value(a).to_vec();
        let ng = self.ng(a);
        Ok(self.push(shape, out, Op::Reshape(a), ng))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(dim_err(format!(
                "{what} of {:?} and {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| f(*x, *y)).collect();
        let ng = self.ng(a) || self.ng(b);
        let shape = self.shape(a).to_vec();
        self.push(shape, out, op, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        Ok(self.zip_with(a, b, Op::Add(a, b), |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        Ok(self.zip_with(a, b, Op::Sub(a, b), |x, y| x - y))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        Ok(self.zip_with(a, b, Op::Mul(a, b), |x, y| x * y))
    }

    /// `x [T x d] + bias [d]`, the bias repeated over the temporal axis.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (t, d) = self.dims(x, "add_row_bias")?;
        if self.shape(bias) != [d] {
            return Err(dim_err(format!(
                "bias {:?} does not match rows of [{t}x{d}]",
                self.shape(bias)
            )));
        }
        let b = self.value(bias);
        let out = self
            .value(x)
            .chunks(d)
            .flat_map(|row| row.iter().zip(b).map(|(v, bb)| v + bb))
            .collect();
        let ng = self.ng(x) || self.ng(bias);
        Ok(self.push(vec![t, d], out, Op::AddRowBias(x, bias), ng))
    }

    /// Repeats a vector `[d]` into `rows` identical rows `[rows x d]`.
    pub fn broadcast_rows(&mut self, v: Var, rows: usize) -> Result<Var> {
        if self.shape(v).len() != 1 || rows == 0 {
            return Err(dim_err(format!("broadcast_rows expects a vector, got {:?}", self.shape(v))));
        }
        let d = self.shape(v)[0];
        let out = self.value(v).repeat(rows);
        let ng = self.ng(v);
        Ok(self.push(vec![rows, d], out, Op::BroadcastRows(v), ng))
    }

    /// Elementwise `scale * x + shift` with constant coefficients.
    pub fn affine(&mut self, x: Var, scale: Vec<f64>, shift: Vec<f64>) -> Result<Var> {
        let n = self.value(x).len();
        if scale.len() != n || shift.len() != n {
            return Err(dim_err(format!(
                "affine coefficients of length {}/{} for {n} values",
                scale.len(),
                shift.len()
            )));
        }
        let out = self
            .value(x)
            .iter()
            .zip(scale.iter().zip(&shift))
            .map(|(v, (a, b))| a * v + b)
            .collect();
        let ng = self.ng(x);
        let shape = self.shape(x).to_vec();
        Ok(self.push(shape, out, Op::Affine { x, scale }, ng))
    }

    /// `a * x + b` with scalar coefficients.
    pub fn scale_shift(&mut self, x: Var, a: f64, b: f64) -> Var {
        let n = self.value(x).len();
        self.affine(x, vec![a; n], vec![b; n]).expect("lengths match by construction")
    }

    fn unary(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let out = self.value(x).iter().map(|v| f(*v)).collect();
        let ng = self.ng(x);
        let shape = self.shape(x).to_vec();
        self.push(shape, out, op, ng)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Op::Relu(x), |v| v.max(0.0))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, Op::Tanh(x), f64::tanh)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Op::Sigmoid(x), sigmoid)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, Op::Exp(x), f64::exp)
    }

    /// Row-wise softmax of a matrix; a vector is treated as a single row.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let cols = match *self.shape(x) {
            [n] => n,
            [_, c] => c,
            ref s => return Err(dim_err(format!("softmax expects rank 1 or 2, got {s:?}"))),
        };
        let mut out = Vec::with_capacity(self.value(x).len());
        for row in self.value(x).chunks(cols) {
            out.extend(super::softmax(row)?);
        }
        let ng = self.ng(x);
        let shape = self.shape(x).to_vec();
        Ok(self.push(shape, out, Op::SoftmaxRows(x), ng))
    }

    /// Selects rows of a matrix (repetition allowed); adjoints scatter-add.
    pub fn gather_rows(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let (r, c) = self.dims(x, "gather_rows")?;
        if index.is_empty() {
            return Err(dim_err("gather_rows with an empty index"));
        }
        if let Some(bad) = index.iter().find(|&&i| i >= r) {
            return Err(dim_err(format!("row {bad} out of range for [{r}x{c}]")));
        }
        let src = self.value(x);
        let mut out = Vec::with_capacity(index.len() * c);
        for &i in index {
            out.extend_from_slice(&src[i * c..(i + 1) * c]);
        }
        let ng = self.ng(x);
        Ok(self.push(vec![index.len(), c], out, Op::GatherRows { x, index: index.to_vec() }, ng))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let index: Vec<usize> = (start..start + len).collect();
        self.gather_rows(x, &index)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| dim_err("concat of nothing"))?;
        let (_, c) = self.dims(first, "concat_rows")?;
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (r, c2) = self.dims(p, "concat_rows")?;
            if c2 != c {
                return Err(dim_err(format!("concat_rows of widths {c} and {c2}")));
            }
            rows += r;
            out.extend_from_slice(self.value(p));
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(vec![rows, c], out, Op::ConcatRows(parts.to_vec()), ng))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| dim_err("concat of nothing"))?;
        let (r, _) = self.dims(first, "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r2, c) = self.dims(p, "concat_cols")?;
            if r2 != r {
                return Err(dim_err(format!("concat_cols of heights {r} and {r2}")));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(r * total);
        for row in 0..r {
            for (&p, &c) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p)[row * c..(row + 1) * c]);
            }
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(vec![r, total], out, Op::ConcatCols(parts.to_vec()), ng))
    }

    /// Temporal convolution of `x [T x C_in]` with `w [k x C_in x C_out]`,
    /// zero padding on both ends. Output length is
    /// `floor((T + 2 * padding - k) / stride) + 1`.
    pub fn conv1d(&mut self, x: Var, w: Var, stride: usize, padding: usize) -> Result<Var> {
        let (t, cin) = self.dims(x, "conv1d")?;
        let (k, wcin, cout) = match *self.shape(w) {
            [k, a, b] => (k, a, b),
            ref s => return Err(dim_err(format!("conv1d filters must be [k x C_in x C_out], got {s:?}"))),
        };
        if wcin != cin {
            return Err(dim_err(format!("conv1d input has {cin} channels, filters expect {wcin}")));
        }
        if stride == 0 {
            return Err(dim_err("conv1d stride must be positive"));
        }
        let t_out = conv_out_len(t, k, stride, padding)
            .ok_or_else(|| dim_err(format!("kernel {k} larger than padded input {t}+2*{padding}")))?;
        let xv = self.value(x);
        let wv = self.value(w);
        let mut out = vec![0.0; t_out * cout];
        for to in 0..t_out {
            let orow = &mut out[to * cout..(to + 1) * cout];
            for j in 0..k {
                let Some(ti) = (to * stride + j).checked_sub(padding).filter(|&ti| ti < t) else {
                    continue;
                };
                let xrow = &xv[ti * cin..(ti + 1) * cin];
                for (c, &xval) in xrow.iter().enumerate() {
                    if xval == 0.0 {
                        continue;
                    }
                    let wrow = &wv[(j * cin + c) * cout..(j * cin + c + 1) * cout];
                    orow.iter_mut().zip(wrow).for_each(|(o, wv)| *o += xval * wv);
                }
            }
        }
        let ng = self.ng(x) || self.ng(w);
        Ok(self.push(vec![t_out, cout], out, Op::Conv1d { x, w, stride, padding }, ng))
    }

    /// Per-column standardization over the rows: `(x - mean) / max(std, eps)`
    /// using the population standard deviation.
    pub fn standardize_cols(&mut self, x: Var, eps: f64) -> Result<Var> {
        let (t, d) = self.dims(x, "standardize_cols")?;
        let (mean, std) = column_stats(self.value(x), t, d);
        let floored: Vec<bool> = std.iter().map(|&s| s < eps).collect();
        let inv_std: Vec<f64> = std.iter().map(|&s| 1.0 / s.max(eps)).collect();
        let out = self
            .value(x)
            .chunks(d)
            .flat_map(|row| (0..d).map(|c| (row[c] - mean[c]) * inv_std[c]).collect::<Vec<_>>())
            .collect();
        let ng = self.ng(x);
        Ok(self.push(vec![t, d], out, Op::StandardizeCols { x, inv_std, floored }, ng))
    }

    /// Mean over rows: `[r x c] -> [c]`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.dims(x, "mean_rows")?;
        let mut out = vec![0.0; c];
        for row in self.value(x).chunks(c) {
            out.iter_mut().zip(row).for_each(|(o, v)| *o += v);
        }
        out.iter_mut().for_each(|o| *o /= r as f64);
        let ng = self.ng(x);
        Ok(self.push(vec![c], out, Op::MeanRows(x), ng))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().sum();
        let ng = self.ng(x);
        self.push(vec![1], vec![s], Op::Sum(x), ng)
    }

    /// `sum_i weights[i] * x[i]` with constant weights.
    pub fn weighted_sum(&mut self, x: Var, weights: Vec<f64>) -> Result<Var> {
        if weights.len() != self.value(x).len() {
            return Err(dim_err(format!(
                "{} weights for {} values",
                weights.len(),
                self.value(x).len()
            )));
        }
        let s = self.value(x).iter().zip(&weights).map(|(v, w)| v * w).sum();
        let ng = self.ng(x);
        Ok(self.push(vec![1], vec![s], Op::WeightedSum { x, weights }, ng))
    }

    /// Elementwise smooth-L1: `0.5 x^2` for `|x| < 1`, else `|x| - 0.5`.
    pub fn smooth_l1(&mut self, x: Var) -> Var {
        self.unary(x, Op::SmoothL1(x), smooth_l1)
    }

    /// Elementwise soft-target binary cross-entropy on logits:
    /// `-(g ln p + (1 - g) ln(1 - p))` with `p = logistic(logit)` floored to
    /// `[1e-7, 1 - 1e-7]`.
    pub fn soft_bce(&mut self, logits: Var, targets: &[f64]) -> Result<Var> {
        let n = self.value(logits).len();
        if targets.len() != n {
            return Err(dim_err(format!("{} targets for {n} logits", targets.len())));
        }
        let mut out = Vec::with_capacity(n);
        let mut live = Vec::with_capacity(n);
        for (&o, &g) in self.value(logits).iter().zip(targets) {
            let p = sigmoid(o);
            let pc = p.clamp(PROB_FLOOR, 1.0 - PROB_FLOOR);
            live.push(pc == p);
            out.push(-(g * pc.ln() + (1.0 - g) * (1.0 - pc).ln()));
        }
        let ng = self.ng(logits);
        let shape = self.shape(logits).to_vec();
        Ok(self.push(shape, out, Op::SoftBce { logits, targets: targets.to_vec(), live }, ng))
    }

    /// Reverse sweep from a scalar. Parameter adjoints are accumulated into
    /// `store`; all node adjoints are returned.
    pub fn backward(&self, loss: Var, store: &mut ParamStore) -> Result<Gradients> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(dim_err(format!(
                "backward needs a scalar, got {:?}",
                self.nodes[loss.0].shape
            )));
        }
        if !self.nodes[loss.0].value[0].is_finite() {
            return Err(Error::Numeric("loss is not finite".into()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        let mut visited = 0;
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            visited += 1;
            self.adjoint(node, &g, &mut grads);
            if let Op::Param(id) = node.op {
                store.get_mut(id).accumulate_grad(&g);
            }
            grads[i] = Some(g);
        }
        Ok(Gradients { grads, visited })
    }

    fn adjoint(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let mut acc = |v: Var, contrib: Vec<f64>| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(a) => a.iter_mut().zip(&contrib).for_each(|(x, y)| *x += y),
                slot @ None => *slot = Some(contrib),
            }
        };
        let y = &node.value;
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::Matmul(a, b) => {
                let (m, k) = dims2(self.shape(*a)).unwrap();
                let n = self.shape(*b)[1];
                if self.ng(*a) {
                    let bt = transpose_raw(self.value(*b), k, n);
                    acc(*a, matmul_raw(g, &bt, m, n, k));
                }
                if self.ng(*b) {
                    let at = transpose_raw(self.value(*a), m, k);
                    acc(*b, matmul_raw(&at, g, k, m, n));
                }
            }
            Op::MatmulNt(a, b) => {
                let (m, k) = dims2(self.shape(*a)).unwrap();
                let n = self.shape(*b)[0];
                if self.ng(*a) {
                    acc(*a, matmul_raw(g, self.value(*b), m, n, k));
                }
                if self.ng(*b) {
                    let gt = transpose_raw(g, m, n);
                    acc(*b, matmul_raw(&gt, self.value(*a), n, m, k));
                }
            }
            Op::Transpose(a) => {
                let (m, n) = dims2(self.shape(*a)).unwrap();
                acc(*a, transpose_raw(g, n, m));
            }
            Op::Reshape(a) => acc(*a, g.to_vec()),
            Op::Add(a, b) => {
                acc(*a, g.to_vec());
                acc(*b, g.to_vec());
            }
            Op::Sub(a, b) => {
                acc(*a, g.to_vec());
                acc(*b, g.iter().map(|v| -v).collect());
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                acc(*a, g.iter().zip(bv).map(|(x, y)| x * y).collect());
                acc(*b, g.iter().zip(av).map(|(x, y)| x * y).collect());
            }
            Op::AddRowBias(x, b) => {
                acc(*x, g.to_vec());
                acc(*b, col_sums(g, self.shape(*b)[0]));
            }
            Op::BroadcastRows(v) => acc(*v, col_sums(g, self.shape(*v)[0])),
            Op::Affine { x, scale } => acc(*x, g.iter().zip(scale).map(|(a, b)| a * b).collect()),
            Op::Relu(x) => acc(*x, g.iter().zip(y).map(|(gv, yv)| if *yv > 0.0 { *gv } else { 0.0 }).collect()),
            Op::Tanh(x) => acc(*x, g.iter().zip(y).map(|(gv, yv)| gv * (1.0 - yv * yv)).collect()),
            Op::Sigmoid(x) => acc(*x, g.iter().zip(y).map(|(gv, yv)| gv * yv * (1.0 - yv)).collect()),
            Op::Exp(x) => acc(*x, g.iter().zip(y).map(|(gv, yv)| gv * yv).collect()),
            Op::SoftmaxRows(x) => {
                let cols = *node.shape.last().unwrap();
                let mut out = Vec::with_capacity(g.len());
                for (gr, yr) in g.chunks(cols).zip(y.chunks(cols)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    out.extend(gr.iter().zip(yr).map(|(gv, yv)| yv * (gv - dot)));
                }
                acc(*x, out);
            }
            Op::GatherRows { x, index } => {
                let (r, c) = dims2(self.shape(*x)).unwrap();
                let mut out = vec![0.0; r * c];
                for (k, &i) in index.iter().enumerate() {
                    out[i * c..(i + 1) * c]
                        .iter_mut()
                        .zip(&g[k * c..(k + 1) * c])
                        .for_each(|(o, v)| *o += v);
                }
                acc(*x, out);
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    acc(p, g[offset..offset + n].to_vec());
                    offset += n;
                }
            }
            Op::ConcatCols(parts) => {
                let total = node.shape[1];
                let mut col = 0;
                for &p in parts {
                    let (r, c) = dims2(self.shape(p)).unwrap();
                    let mut out = Vec::with_capacity(r * c);
                    for row in 0..r {
                        out.extend_from_slice(&g[row * total + col..row * total + col + c]);
                    }
                    acc(p, out);
                    col += c;
                }
            }
            Op::Conv1d { x, w, stride, padding } => {
                let (t, cin) = dims2(self.shape(*x)).unwrap();
                let (k, cout) = (self.shape(*w)[0], self.shape(*w)[2]);
                let t_out = node.shape[0];
                let (xv, wv) = (self.value(*x), self.value(*w));
                let mut gx = vec![0.0; xv.len()];
                let mut gw = vec![0.0; wv.len()];
                for to in 0..t_out {
                    let grow = &g[to * cout..(to + 1) * cout];
                    for j in 0..k {
                        let Some(ti) = (to * stride + j).checked_sub(*padding).filter(|&ti| ti < t) else {
                            continue;
                        };
                        for c in 0..cin {
                            let base = (j * cin + c) * cout;
                            let wrow = &wv[base..base + cout];
                            gx[ti * cin + c] += grow.iter().zip(wrow).map(|(a, b)| a * b).sum::<f64>();
                            let xval = xv[ti * cin + c];
                            gw[base..base + cout]
                                .iter_mut()
                                .zip(grow)
                                .for_each(|(o, gv)| *o += xval * gv);
                        }
                    }
                }
                acc(*x, gx);
                acc(*w, gw);
            }
            Op::StandardizeCols { x, inv_std, floored } => {
                let (t, d) = dims2(&node.shape).unwrap();
                let tf = t as f64;
                let mut mean_g = vec![0.0; d];
                let mut mean_gy = vec![0.0; d];
                for (gr, yr) in g.chunks(d).zip(y.chunks(d)) {
                    for c in 0..d {
                        mean_g[c] += gr[c] / tf;
                        mean_gy[c] += gr[c] * yr[c] / tf;
                    }
                }
                let mut out = Vec::with_capacity(g.len());
                for (gr, yr) in g.chunks(d).zip(y.chunks(d)) {
                    for c in 0..d {
                        let centered = gr[c] - mean_g[c];
                        // A floored deviation is a constant, so only the mean path remains.
                        let v = if floored[c] { centered } else { centered - yr[c] * mean_gy[c] };
                        out.push(v * inv_std[c]);
                    }
                }
                acc(*x, out);
            }
            Op::MeanRows(x) => {
                let r = self.shape(*x)[0];
                let scaled: Vec<f64> = g.iter().map(|v| v / r as f64).collect();
                acc(*x, scaled.repeat(r));
            }
            Op::Sum(x) => acc(*x, vec![g[0]; self.value(*x).len()]),
            Op::WeightedSum { x, weights } => acc(*x, weights.iter().map(|w| w * g[0]).collect()),
            Op::SmoothL1(x) => {
                let xv = self.value(*x);
                acc(
                    *x,
                    g.iter()
                        .zip(xv)
                        .map(|(gv, v)| gv * if v.abs() < 1.0 { *v } else { v.signum() })
                        .collect(),
                )
            }
            Op::SoftBce { logits, targets, live } => {
                let lv = self.value(*logits);
                let out = g
                    .iter()
                    .zip(lv)
                    .zip(targets.iter().zip(live))
                    .map(|((gv, o), (t, l))| if *l { gv * (sigmoid(*o) - t) } else { 0.0 })
                    .collect();
                acc(*logits, out);
            }
        }
    }
}

pub fn smooth_l1(x: f64) -> f64 {
    if x.abs() < 1.0 {
        0.5 * x * x
    } else {
        x.abs() - 0.5
    }
}

pub fn conv_out_len(t: usize, k: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = t + 2 * padding;
    (k >= 1 && k <= padded && stride > 0).then(|| (padded - k) / stride + 1)
}

pub fn column_stats(x: &[f64], t: usize, d: usize) -> (Vec<f64>, Vec<f64>) {
    let mut mean = vec![0.0; d];
    for row in x.chunks(d) {
        mean.iter_mut().zip(row).for_each(|(m, v)| *m += v);
    }
    mean.iter_mut().for_each(|m| *m /= t as f64);
    let mut var = vec![0.0; d];
    for row in x.chunks(d) {
        for c in 0..d {
            var[c] += (row[c] - mean[c]).powi(2);
        }
    }
    let std = var.into_iter().map(|v| (v / t as f64).sqrt()).collect();
    (mean, std)
}

fn col_sums(g: &[f64], d: usize) -> Vec<f64> {
    let mut out = vec![0.0; d];
    for row in g.chunks(d) {
        out.iter_mut().zip(row).for_each(|(o, v)| *o += v);
    }
    out
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            orow.iter_mut().zip(&b[p * n..(p + 1) * n]).for_each(|(o, bv)| *o += av * bv);
        }
    }
    out
}

fn transpose_raw(a: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
    out
}
