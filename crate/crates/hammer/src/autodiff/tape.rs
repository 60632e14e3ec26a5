//! Reverse-mode differentiation over dense f64 matrices.
//!
//! Forward evaluation is eager: every op computes its value when recorded.
//! `backward` walks the recorded nodes in reverse and accumulates gradients.
//! The op set is exactly what the model needs (linear maps, layer norm,
//! masked attention pieces, the loss algebra); it is not a general autodiff.

use std::collections::HashMap;

use super::params::{GradStore, Mat, ParamId, ParamStore};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TapeError {
    #[error("zero-norm row {row} cannot be normalized")]
    ZeroNorm { row: usize },
    #[error("attention row {row} has every key masked")]
    AllKeysMasked { row: usize },
    #[error("token id {id} out of range (vocab {vocab})")]
    IndexOutOfRange { id: usize, vocab: usize },
    #[error("temperature must be positive, got {0}")]
    NonPositiveTemperature(f64),
    #[error("{0}")]
    Invalid(String),
}

/// Handle to a value on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct T(usize);

enum Node {
    Leaf,
    MatMul { a: T, b: T, ta: bool, tb: bool },
    Add { a: T, b: T },
    Sub { a: T, b: T },
    Hadamard { a: T, b: T },
    Div { a: T, b: T },
    AddRowBroadcast { a: T, b: T },
    SubColBroadcast { a: T, b: T },
    MulColBroadcast { a: T, b: T },
    Scale { a: T, c: f64 },
    AddScalar { a: T },
    DivByScalar { a: T, s: T },
    Relu { a: T },
    Gelu { a: T },
    Sigmoid { a: T },
    Exp { a: T },
    Softplus { a: T },
    Abs { a: T },
    MaxConst { a: T, c: Mat },
    MinConst { a: T, c: Mat },
    Clamp01 { a: T },
    MaskedSoftmaxRows { a: T, valid: Vec<bool> },
    RowLogSumExp { a: T },
    RowSum { a: T },
    SumAll { a: T },
    GatherCols { a: T, idx: Vec<usize> },
    GatherRows { a: T, idx: Vec<usize> },
    ConcatRows { a: T, b: T },
    ConcatCols { a: T, b: T },
    SliceRows { a: T, start: usize },
    SliceCols { a: T, start: usize },
    LayerNormRows { a: T, gain: T, bias: T, eps: f64 },
    L2NormalizeRows { a: T },
}

pub struct Tape {
    vals: Vec<Mat>,
    nodes: Vec<Node>,
    grad_enabled: bool,
    param_nodes: HashMap<ParamId, T>,
    param_bindings: Vec<(usize, ParamId)>,
}

/// Per-node gradients produced by `Tape::backward`.
pub struct Grads {
    by_node: Vec<Option<Mat>>,
}

impl Grads {
    pub fn of(&self, t: T) -> Option<&Mat> {
        self.by_node[t.0].as_ref()
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Tape {
        Tape {
            vals: Vec::new(),
            nodes: Vec::new(),
            grad_enabled: true,
            param_nodes: HashMap::new(),
            param_bindings: Vec::new(),
        }
    }

    /// Tape that records values only; `backward` is unavailable. Used for
    /// momentum-twin and evaluation forwards so no gradient can exist.
    pub fn no_grad() -> Tape {
        Tape { grad_enabled: false, ..Tape::new() }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn value(&self, t: T) -> &Mat {
        &self.vals[t.0]
    }

    pub fn scalar_value(&self, t: T) -> f64 {
        let v = self.value(t);
        assert_eq!(v.len(), 1, "expected scalar tensor");
        v[[0, 0]]
    }

    fn push(&mut self, value: Mat, node: Node) -> T {
        self.vals.push(value);
        self.nodes.push(if self.grad_enabled { node } else { Node::Leaf });
        T(self.vals.len() - 1)
    }

    pub fn leaf(&mut self, value: Mat) -> T {
        self.push(value, Node::Leaf)
    }

    pub fn scalar(&mut self, v: f64) -> T {
        self.leaf(Mat::from_elem((1, 1), v))
    }

    pub fn row(&mut self, v: &[f64]) -> T {
        self.leaf(Mat::from_shape_vec((1, v.len()), v.to_vec()).expect("row shape"))
    }

    /// Bind a parameter as a leaf; repeated binds return the same node so the
    /// parameter's gradient accumulates across all of its uses.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> T {
        if let Some(&t) = self.param_nodes.get(&id) {
            return t;
        }
        let t = self.leaf(store.get(id).clone());
        self.param_nodes.insert(id, t);
        self.param_bindings.push((t.0, id));
        t
    }

    pub fn matmul(&mut self, a: T, b: T) -> T {
        self.mm_impl(a, b, false, false)
    }

    /// `a @ b^T`
    pub fn matmul_nt(&mut self, a: T, b: T) -> T {
        self.mm_impl(a, b, false, true)
    }

    /// `a^T @ b`
    pub fn matmul_tn(&mut self, a: T, b: T) -> T {
        self.mm_impl(a, b, true, false)
    }

    fn mm_impl(&mut self, a: T, b: T, ta: bool, tb: bool) -> T {
        let av = &self.vals[a.0];
        let bv = &self.vals[b.0];
        let out = match (ta, tb) {
            (false, false) => av.dot(bv),
            (false, true) => av.dot(&bv.t()),
            (true, false) => av.t().dot(bv),
            (true, true) => unreachable!("double-transposed matmul is never used"),
        };
        self.push(out, Node::MatMul { a, b, ta, tb })
    }

    pub fn add(&mut self, a: T, b: T) -> T {
        let out = &self.vals[a.0] + &self.vals[b.0];
        self.push(out, Node::Add { a, b })
    }

    pub fn sub(&mut self, a: T, b: T) -> T {
        let out = &self.vals[a.0] - &self.vals[b.0];
        self.push(out, Node::Sub { a, b })
    }

    pub fn mul(&mut self, a: T, b: T) -> T {
        let out = &self.vals[a.0] * &self.vals[b.0];
        self.push(out, Node::Hadamard { a, b })
    }

    pub fn div(&mut self, a: T, b: T) -> T {
        let out = &self.vals[a.0] / &self.vals[b.0];
        self.push(out, Node::Div { a, b })
    }

    /// `a (n x d) + b (1 x d)`, broadcast over rows.
    pub fn add_row(&mut self, a: T, b: T) -> T {
        let bv = self.vals[b.0].row(0).to_owned();
        let out = &self.vals[a.0] + &bv;
        self.push(out, Node::AddRowBroadcast { a, b })
    }

    /// `a (n x d) - b (n x 1)`, broadcast over columns.
    pub fn sub_col(&mut self, a: T, b: T) -> T {
        let bv = self.vals[b.0].column(0).to_owned().insert_axis(ndarray::Axis(1));
        let out = &self.vals[a.0] - &bv;
        self.push(out, Node::SubColBroadcast { a, b })
    }

    /// `a (n x d) * b (n x 1)`, broadcast over columns.
    pub fn mul_col(&mut self, a: T, b: T) -> T {
        let bv = self.vals[b.0].column(0).to_owned().insert_axis(ndarray::Axis(1));
        let out = &self.vals[a.0] * &bv;
        self.push(out, Node::MulColBroadcast { a, b })
    }

    pub fn scale(&mut self, a: T, c: f64) -> T {
        let out = self.vals[a.0].mapv(|v| v * c);
        self.push(out, Node::Scale { a, c })
    }

    pub fn add_scalar(&mut self, a: T, c: f64) -> T {
        let out = self.vals[a.0].mapv(|v| v + c);
        self.push(out, Node::AddScalar { a })
    }

    /// Elementwise `a / s` where `s` is a 1x1 tensor (learnable temperature).
    pub fn div_by_scalar(&mut self, a: T, s: T) -> T {
        let sv = self.scalar_value(s);
        let out = self.vals[a.0].mapv(|v| v / sv);
        self.push(out, Node::DivByScalar { a, s })
    }

    pub fn relu(&mut self, a: T) -> T {
        let out = self.vals[a.0].mapv(|v| v.max(0.0));
        self.push(out, Node::Relu { a })
    }

    pub fn gelu(&mut self, a: T) -> T {
        let out = self.vals[a.0].mapv(gelu_fwd);
        self.push(out, Node::Gelu { a })
    }

    pub fn sigmoid(&mut self, a: T) -> T {
        let out = self.vals[a.0].mapv(sigmoid_fwd);
        self.push(out, Node::Sigmoid { a })
    }

    pub fn exp(&mut self, a: T) -> T {
        let out = self.vals[a.0].mapv(f64::exp);
        self.push(out, Node::Exp { a })
    }

    /// Numerically stable `ln(1 + e^x)`.
    pub fn softplus(&mut self, a: T) -> T {
        let out = self.vals[a.0].mapv(|v| v.max(0.0) + (-v.abs()).exp().ln_1p());
        self.push(out, Node::Softplus { a })
    }

    pub fn abs(&mut self, a: T) -> T {
        let out = self.vals[a.0].mapv(f64::abs);
        self.push(out, Node::Abs { a })
    }

    pub fn max_const(&mut self, a: T, c: &Mat) -> T {
        let mut out = self.vals[a.0].clone();
        ndarray::Zip::from(&mut out).and(c).for_each(|o, &cv| *o = o.max(cv));
        self.push(out, Node::MaxConst { a, c: c.clone() })
    }

    pub fn min_const(&mut self, a: T, c: &Mat) -> T {
        let mut out = self.vals[a.0].clone();
        ndarray::Zip::from(&mut out).and(c).for_each(|o, &cv| *o = o.min(cv));
        self.push(out, Node::MinConst { a, c: c.clone() })
    }

    pub fn clamp01(&mut self, a: T) -> T {
        let out = self.vals[a.0].mapv(|v| v.clamp(0.0, 1.0));
        self.push(out, Node::Clamp01 { a })
    }

    /// Row softmax over the columns marked valid; invalid columns get weight
    /// zero. Errors if any row would normalize over an empty key set.
    pub fn masked_softmax_rows(&mut self, a: T, valid: &[bool]) -> Result<T, TapeError> {
        let av = &self.vals[a.0];
        assert_eq!(av.ncols(), valid.len(), "mask length must match key count");
        if !valid.iter().any(|&v| v) {
            return Err(TapeError::AllKeysMasked { row: 0 });
        }
        let mut out = Mat::zeros(av.raw_dim());
        for (r, row) in av.rows().into_iter().enumerate() {
            let m = row
                .iter()
                .zip(valid)
                .filter(|(_, &ok)| ok)
                .map(|(v, _)| *v)
                .fold(f64::NEG_INFINITY, f64::max);
            let mut denom = 0.0;
            for (c, v) in row.iter().enumerate() {
                if valid[c] {
                    let e = (v - m).exp();
                    out[[r, c]] = e;
                    denom += e;
                }
            }
            if denom == 0.0 {
                return Err(TapeError::AllKeysMasked { row: r });
            }
            for c in 0..row.len() {
                out[[r, c]] /= denom;
            }
        }
        Ok(self.push(out, Node::MaskedSoftmaxRows { a, valid: valid.to_vec() }))
    }

    pub fn softmax_rows(&mut self, a: T) -> T {
        let n = self.vals[a.0].ncols();
        self.masked_softmax_rows(a, &vec![true; n]).expect("unmasked softmax cannot fail")
    }

    /// `out[i] = ln sum_j exp(a[i,j])`, max-subtracted.
    pub fn row_logsumexp(&mut self, a: T) -> T {
        let av = &self.vals[a.0];
        let mut out = Mat::zeros((av.nrows(), 1));
        for (r, row) in av.rows().into_iter().enumerate() {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let s: f64 = row.iter().map(|v| (v - m).exp()).sum();
            out[[r, 0]] = m + s.ln();
        }
        self.push(out, Node::RowLogSumExp { a })
    }

    pub fn row_sum(&mut self, a: T) -> T {
        let av = &self.vals[a.0];
        let out = av
            .sum_axis(ndarray::Axis(1))
            .insert_axis(ndarray::Axis(1));
        self.push(out, Node::RowSum { a })
    }

    pub fn sum_all(&mut self, a: T) -> T {
        let s = self.vals[a.0].sum();
        self.push(Mat::from_elem((1, 1), s), Node::SumAll { a })
    }

    pub fn mean_all(&mut self, a: T) -> T {
        let n = self.vals[a.0].len() as f64;
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n)
    }

    /// `out[i] = a[i, idx[i]]` as an n x 1 column.
    pub fn gather_cols(&mut self, a: T, idx: &[usize]) -> T {
        let av = &self.vals[a.0];
        assert_eq!(av.nrows(), idx.len());
        let mut out = Mat::zeros((idx.len(), 1));
        for (r, &c) in idx.iter().enumerate() {
            out[[r, 0]] = av[[r, c]];
        }
        self.push(out, Node::GatherCols { a, idx: idx.to_vec() })
    }

    /// Row lookup (embedding gather); duplicate ids accumulate gradient.
    pub fn gather_rows(&mut self, a: T, idx: &[usize]) -> Result<T, TapeError> {
        let av = &self.vals[a.0];
        let vocab = av.nrows();
        let mut out = Mat::zeros((idx.len(), av.ncols()));
        for (r, &i) in idx.iter().enumerate() {
            if i >= vocab {
                return Err(TapeError::IndexOutOfRange { id: i, vocab });
            }
            out.row_mut(r).assign(&av.row(i));
        }
        Ok(self.push(out, Node::GatherRows { a, idx: idx.to_vec() }))
    }

    pub fn concat_rows(&mut self, a: T, b: T) -> T {
        let out = ndarray::concatenate(
            ndarray::Axis(0),
            &[self.vals[a.0].view(), self.vals[b.0].view()],
        )
        .expect("row concat shape");
        self.push(out, Node::ConcatRows { a, b })
    }

    pub fn concat_cols(&mut self, a: T, b: T) -> T {
        let out = ndarray::concatenate(
            ndarray::Axis(1),
            &[self.vals[a.0].view(), self.vals[b.0].view()],
        )
        .expect("col concat shape");
        self.push(out, Node::ConcatCols { a, b })
    }

    pub fn slice_rows(&mut self, a: T, start: usize, len: usize) -> T {
        let out = self.vals[a.0].slice(ndarray::s![start..start + len, ..]).to_owned();
        self.push(out, Node::SliceRows { a, start })
    }

    pub fn slice_cols(&mut self, a: T, start: usize, len: usize) -> T {
        let out = self.vals[a.0].slice(ndarray::s![.., start..start + len]).to_owned();
        self.push(out, Node::SliceCols { a, start })
    }

    pub fn layer_norm(&mut self, a: T, gain: T, bias: T, eps: f64) -> T {
        let av = &self.vals[a.0];
        let g = self.vals[gain.0].row(0).to_owned();
        let b = self.vals[bias.0].row(0).to_owned();
        let d = av.ncols() as f64;
        let mut out = Mat::zeros(av.raw_dim());
        for (r, row) in av.rows().into_iter().enumerate() {
            let mean = row.sum() / d;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
            let inv = 1.0 / (var + eps).sqrt();
            for c in 0..row.len() {
                out[[r, c]] = (row[c] - mean) * inv * g[c] + b[c];
            }
        }
        self.push(out, Node::LayerNormRows { a, gain, bias, eps })
    }

    pub fn l2_normalize_rows(&mut self, a: T) -> Result<T, TapeError> {
        let av = &self.vals[a.0];
        let mut out = av.clone();
        for (r, mut row) in out.rows_mut().into_iter().enumerate() {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm == 0.0 {
                return Err(TapeError::ZeroNorm { row: r });
            }
            row.mapv_inplace(|v| v / norm);
        }
        Ok(self.push(out, Node::L2NormalizeRows { a }))
    }

    /// Single-head scaled dot-product attention over raw vectors:
    /// `out[i] = sum_j softmax_j(<k_j, q_i> / sqrt(D)) v_j`, with masked keys
    /// excluded from the softmax. `D` is the width of the query/key vectors.
    pub fn attention(&mut self, q: T, k: T, v: T, key_valid: &[bool]) -> Result<T, TapeError> {
        let d = self.vals[q.0].ncols();
        assert_eq!(d, self.vals[k.0].ncols(), "query/key width mismatch");
        assert_eq!(self.vals[k.0].nrows(), self.vals[v.0].nrows(), "key/value count mismatch");
        assert_eq!(self.vals[k.0].nrows(), key_valid.len(), "mask length mismatch");
        let scores = self.matmul_nt(q, k);
        let scaled = self.scale(scores, 1.0 / (d as f64).sqrt());
        let weights = self.masked_softmax_rows(scaled, key_valid)?;
        Ok(self.matmul(weights, v))
    }

    /// Reverse pass from a scalar loss node. Consumers of each node are
    /// recorded later on the tape, so one reverse sweep is a valid
    /// topological order.
    pub fn backward(&self, loss: T) -> Grads {
        assert!(self.grad_enabled, "backward on a no-grad tape");
        assert_eq!(self.vals[loss.0].len(), 1, "loss must be scalar");
        let mut grads: Vec<Option<Mat>> = vec![None; self.vals.len()];
        grads[loss.0] = Some(Mat::from_elem((1, 1), 1.0));

        for idx in (0..self.nodes.len()).rev() {
            if matches!(self.nodes[idx], Node::Leaf) {
                continue;
            }
            let g = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            self.backward_node(idx, &g, &mut grads);
        }
        Grads { by_node: grads }
    }

    /// Add every bound parameter's gradient into `out`.
    pub fn accumulate_param_grads(&self, grads: &Grads, out: &mut GradStore) {
        for &(node, pid) in &self.param_bindings {
            if let Some(g) = grads.by_node[node].as_ref() {
                *out.get_mut(pid) += g;
            }
        }
    }

    fn backward_node(&self, idx: usize, g: &Mat, grads: &mut Vec<Option<Mat>>) {
        let acc = |grads: &mut Vec<Option<Mat>>, t: T, delta: Mat| {
            match &mut grads[t.0] {
                Some(existing) => *existing += &delta,
                slot @ None => *slot = Some(delta),
            }
        };
        match &self.nodes[idx] {
            Node::Leaf => {}
            Node::MatMul { a, b, ta, tb } => {
                let av = &self.vals[a.0];
                let bv = &self.vals[b.0];
                match (ta, tb) {
                    (false, false) => {
                        acc(grads, *a, g.dot(&bv.t()));
                        acc(grads, *b, av.t().dot(g));
                    }
                    (false, true) => {
                        // out = a b^T
                        acc(grads, *a, g.dot(bv));
                        acc(grads, *b, g.t().dot(av));
                    }
                    (true, false) => {
                        // out = a^T b
                        acc(grads, *a, bv.dot(&g.t()));
                        acc(grads, *b, av.dot(g));
                    }
                    (true, true) => unreachable!(),
                }
            }
            Node::Add { a, b } => {
                acc(grads, *a, g.clone());
                acc(grads, *b, g.clone());
            }
            Node::Sub { a, b } => {
                acc(grads, *a, g.clone());
                acc(grads, *b, -g);
            }
            Node::Hadamard { a, b } => {
                acc(grads, *a, g * &self.vals[b.0]);
                acc(grads, *b, g * &self.vals[a.0]);
            }
            Node::Div { a, b } => {
                let bv = &self.vals[b.0];
                acc(grads, *a, g / bv);
                let db = -(g * &self.vals[a.0]) / (bv * bv);
                acc(grads, *b, db);
            }
            Node::AddRowBroadcast { a, b } => {
                acc(grads, *a, g.clone());
                let db = g.sum_axis(ndarray::Axis(0)).insert_axis(ndarray::Axis(0));
                acc(grads, *b, db);
            }
            Node::SubColBroadcast { a, b } => {
                acc(grads, *a, g.clone());
                let db = -g.sum_axis(ndarray::Axis(1)).insert_axis(ndarray::Axis(1));
                acc(grads, *b, db);
            }
            Node::MulColBroadcast { a, b } => {
                let bv = self.vals[b.0].column(0).to_owned().insert_axis(ndarray::Axis(1));
                acc(grads, *a, g * &bv);
                let db = (g * &self.vals[a.0])
                    .sum_axis(ndarray::Axis(1))
                    .insert_axis(ndarray::Axis(1));
                acc(grads, *b, db);
            }
            Node::Scale { a, c } => acc(grads, *a, g * *c),
            Node::AddScalar { a } => acc(grads, *a, g.clone()),
            Node::DivByScalar { a, s } => {
                let sv = self.vals[s.0][[0, 0]];
                acc(grads, *a, g / sv);
                let ds = -(g * &self.vals[a.0]).sum() / (sv * sv);
                acc(grads, *s, Mat::from_elem((1, 1), ds));
            }
            Node::Relu { a } => {
                let mask = self.vals[a.0].mapv(|v| if v > 0.0 { 1.0 } else { 0.0 });
                acc(grads, *a, g * &mask);
            }
            Node::Gelu { a } => {
                let d = self.vals[a.0].mapv(gelu_grad);
                acc(grads, *a, g * &d);
            }
            Node::Sigmoid { a } => {
                let out = &self.vals[idx];
                acc(grads, *a, g * &(out * &out.mapv(|v| 1.0 - v)));
            }
            Node::Exp { a } => acc(grads, *a, g * &self.vals[idx]),
            Node::Softplus { a } => {
                let d = self.vals[a.0].mapv(sigmoid_fwd);
                acc(grads, *a, g * &d);
            }
            Node::Abs { a } => {
                let s = self.vals[a.0].mapv(|v| {
                    if v > 0.0 {
                        1.0
                    } else if v < 0.0 {
                        -1.0
                    } else {
                        0.0
                    }
                });
                acc(grads, *a, g * &s);
            }
            Node::MaxConst { a, c } => {
                let mut d = g.clone();
                ndarray::Zip::from(&mut d).and(&self.vals[a.0]).and(c).for_each(|dv, &av, &cv| {
                    if av < cv {
                        *dv = 0.0;
                    }
                });
                acc(grads, *a, d);
            }
            Node::MinConst { a, c } => {
                let mut d = g.clone();
                ndarray::Zip::from(&mut d).and(&self.vals[a.0]).and(c).for_each(|dv, &av, &cv| {
                    if av > cv {
                        *dv = 0.0;
                    }
                });
                acc(grads, *a, d);
            }
            Node::Clamp01 { a } => {
                let mut d = g.clone();
                ndarray::Zip::from(&mut d).and(&self.vals[a.0]).for_each(|dv, &av| {
                    if !(0.0..=1.0).contains(&av) {
                        *dv = 0.0;
                    }
                });
                acc(grads, *a, d);
            }
            Node::MaskedSoftmaxRows { a, valid } => {
                let out = &self.vals[idx];
                let mut da = Mat::zeros(out.raw_dim());
                for r in 0..out.nrows() {
                    let mut dot = 0.0;
                    for c in 0..out.ncols() {
                        if valid[c] {
                            dot += g[[r, c]] * out[[r, c]];
                        }
                    }
                    for c in 0..out.ncols() {
                        if valid[c] {
                            da[[r, c]] = out[[r, c]] * (g[[r, c]] - dot);
                        }
                    }
                }
                acc(grads, *a, da);
            }
            Node::RowLogSumExp { a } => {
                let av = &self.vals[a.0];
                let mut da = Mat::zeros(av.raw_dim());
                for (r, row) in av.rows().into_iter().enumerate() {
                    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let denom: f64 = row.iter().map(|v| (v - m).exp()).sum();
                    for c in 0..row.len() {
                        da[[r, c]] = g[[r, 0]] * (row[c] - m).exp() / denom;
                    }
                }
                acc(grads, *a, da);
            }
            Node::RowSum { a } => {
                let av = &self.vals[a.0];
                let mut da = Mat::zeros(av.raw_dim());
                for r in 0..av.nrows() {
                    for c in 0..av.ncols() {
                        da[[r, c]] = g[[r, 0]];
                    }
                }
                acc(grads, *a, da);
            }
            Node::SumAll { a } => {
                let da = Mat::from_elem(self.vals[a.0].raw_dim(), g[[0, 0]]);
                acc(grads, *a, da);
            }
            Node::GatherCols { a, idx: cols } => {
                let mut da = Mat::zeros(self.vals[a.0].raw_dim());
                for (r, &c) in cols.iter().enumerate() {
                    da[[r, c]] += g[[r, 0]];
                }
                acc(grads, *a, da);
            }
            Node::GatherRows { a, idx: rows } => {
                let mut da = Mat::zeros(self.vals[a.0].raw_dim());
                for (r, &i) in rows.iter().enumerate() {
                    let mut dst = da.row_mut(i);
                    dst += &g.row(r);
                }
                acc(grads, *a, da);
            }
            Node::ConcatRows { a, b } => {
                let na = self.vals[a.0].nrows();
                acc(grads, *a, g.slice(ndarray::s![..na, ..]).to_owned());
                acc(grads, *b, g.slice(ndarray::s![na.., ..]).to_owned());
            }
            Node::ConcatCols { a, b } => {
                let na = self.vals[a.0].ncols();
                acc(grads, *a, g.slice(ndarray::s![.., ..na]).to_owned());
                acc(grads, *b, g.slice(ndarray::s![.., na..]).to_owned());
            }
            Node::SliceRows { a, start } => {
                let mut da = Mat::zeros(self.vals[a.0].raw_dim());
                da.slice_mut(ndarray::s![*start..start + g.nrows(), ..]).assign(g);
                acc(grads, *a, da);
            }
            Node::SliceCols { a, start } => {
                let mut da = Mat::zeros(self.vals[a.0].raw_dim());
                da.slice_mut(ndarray::s![.., *start..start + g.ncols()]).assign(g);
                acc(grads, *a, da);
            }
            Node::LayerNormRows { a, gain, bias, eps } => {
                let av = &self.vals[a.0];
                let gv = self.vals[gain.0].row(0).to_owned();
                let d = av.ncols() as f64;
                let mut da = Mat::zeros(av.raw_dim());
                let mut dgain = Mat::zeros((1, av.ncols()));
                let mut dbias = Mat::zeros((1, av.ncols()));
                for (r, row) in av.rows().into_iter().enumerate() {
                    let mean = row.sum() / d;
                    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
                    let inv = 1.0 / (var + eps).sqrt();
                    let xhat: Vec<f64> = row.iter().map(|v| (v - mean) * inv).collect();
                    let gxhat: Vec<f64> =
                        (0..row.len()).map(|c| g[[r, c]] * gv[c]).collect();
                    let sum_gx: f64 = gxhat.iter().sum();
                    let sum_gx_xhat: f64 =
                        gxhat.iter().zip(&xhat).map(|(gx, xh)| gx * xh).sum();
                    for c in 0..row.len() {
                        da[[r, c]] =
                            inv / d * (d * gxhat[c] - sum_gx - xhat[c] * sum_gx_xhat);
                        dgain[[0, c]] += g[[r, c]] * xhat[c];
                        dbias[[0, c]] += g[[r, c]];
                    }
                }
                acc(grads, *a, da);
                acc(grads, *gain, dgain);
                acc(grads, *bias, dbias);
            }
            Node::L2NormalizeRows { a } => {
                let av = &self.vals[a.0];
                let out = &self.vals[idx];
                let mut da = Mat::zeros(av.raw_dim());
                for (r, row) in av.rows().into_iter().enumerate() {
                    let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                    let dot: f64 = (0..row.len()).map(|c| g[[r, c]] * out[[r, c]]).sum();
                    for c in 0..row.len() {
                        da[[r, c]] = (g[[r, c]] - out[[r, c]] * dot) / norm;
                    }
                }
                acc(grads, *a, da);
            }
        }
    }
}

fn sigmoid_fwd(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

const GELU_C1: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C2: f64 = 0.044715;

fn gelu_fwd(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C1 * (x + GELU_C2 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C1 * (x + GELU_C2 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C1 * (1.0 + 3.0 * GELU_C2 * x * x)
}
