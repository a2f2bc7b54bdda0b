//! The recording tape and its operator set.

use std::sync::Arc;

use ndarray::{concatenate, Array2, Axis};
use thiserror::Error;

use crate::sparse::CsrMatrix;

#[derive(Debug, Error)]
pub enum AutodiffError {
    #[error("non-finite value produced by `{op}`")]
    NonFinite { op: String },
    #[error("backward already ran on this tape")]
    BackwardTwice,
    #[error("backward target has shape {rows}x{cols}, expected 1x1")]
    NotScalar { rows: usize, cols: usize },
    #[error("closure is not deterministic: repeated evaluation changed the loss")]
    NonDeterministic,
    #[error("optimizer step without any accumulated gradient")]
    StepBeforeBackward,
    #[error("duplicate parameter name `{0}`")]
    DuplicateName(String),
}

/// Handle to a node on a [`Tape`]. Only valid for the tape that created it.
#[derive(Debug, Copy, Clone, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

#[derive(Clone)]
enum Op {
    Leaf,
    Matmul(Var, Var),
    /// a * b^T without materializing the transpose.
    MatmulNt(Var, Var),
    Spmm(Arc<CsrMatrix>, Var),
    /// Symmetric edge-weighted adjacency times dense: for each edge e=(i,j),
    /// out_i += mask_e * z_j and out_j += mask_e * z_i.
    AdjMaskMul { edges: Arc<Vec<(usize, usize)>>, mask: Var, dense: Var },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddScalar(Var),
    MulScalar(Var, f64),
    MulConst(Var, Arc<Array2<f64>>),
    /// out[i, j] = a[i, j] * col[i, 0]
    ScaleRows(Var, Var),
    /// out[i, j] = a[i, j] + col[i, 0]
    AddCol(Var, Var),
    /// out[i, j] = a[i, j] + row[0, j]
    AddRow(Var, Var),
    Relu(Var),
    LeakyRelu(Var, f64),
    /// Learnable 1x1 slope for the negative part.
    Prelu { x: Var, slope: Var },
    Sigmoid(Var),
    Softplus(Var),
    Log(Var),
    Exp(Var),
    Square(Var),
    Sqrt(Var),
    Recip(Var),
    Clamp(Var, f64, f64),
    /// Forward thresholds at 0.5 to {0, 1}; backward passes gradients through.
    HardGate(Var),
    RowNormalizeL2(Var, f64),
    ConcatCols(Var, Var),
    GatherRows(Var, Arc<Vec<usize>>),
    /// Per-row sum: (n, m) -> (n, 1).
    SumCols(Var),
    ReduceSum(Var),
    ReduceMean(Var),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Matmul(..) => "matmul",
            Op::MatmulNt(..) => "matmul_nt",
            Op::Spmm(..) => "spmm",
            Op::AdjMaskMul { .. } => "adj_mask_mul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddScalar(..) => "add_scalar",
            Op::MulScalar(..) => "mul_scalar",
            Op::MulConst(..) => "mul_const",
            Op::ScaleRows(..) => "scale_rows",
            Op::AddCol(..) => "add_col",
            Op::AddRow(..) => "add_row",
            Op::Relu(..) => "relu",
            Op::LeakyRelu(..) => "leaky_relu",
            Op::Prelu { .. } => "prelu",
            Op::Sigmoid(..) => "sigmoid",
            Op::Softplus(..) => "softplus",
            Op::Log(..) => "log",
            Op::Exp(..) => "exp",
            Op::Square(..) => "square",
            Op::Sqrt(..) => "sqrt",
            Op::Recip(..) => "recip",
            Op::Clamp(..) => "clamp",
            Op::HardGate(..) => "hard_gate",
            Op::RowNormalizeL2(..) => "row_normalize_l2",
            Op::ConcatCols(..) => "concat_cols",
            Op::GatherRows(..) => "gather_rows",
            Op::SumCols(..) => "sum_cols",
            Op::ReduceSum(..) => "reduce_sum",
            Op::ReduceMean(..) => "reduce_mean",
        }
    }
}

struct Node {
    value: Array2<f64>,
    grad: Option<Array2<f64>>,
    op: Op,
}

/// Append-only record of a forward computation.
///
/// A non-finite output (or a domain violation in `log`/`sqrt`/`recip`)
/// poisons the tape instead of panicking; [`Tape::poisoned`] reports the
/// first offending operation and [`Tape::backward`] refuses to run.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
    poison: Option<String>,
}

fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn stable_softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

impl Tape {
    #[must_use]
    pub fn new() -> Tape {
        Tape::default()
    }

    /// Number of recorded nodes.
    #[must_use]
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    #[must_use]
    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// First operation that produced a non-finite or out-of-domain value.
    #[must_use]
    pub fn poisoned(&self) -> Option<&str> {
        self.poison.as_deref()
    }

    /// Forward value of a node.
    #[must_use]
    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    #[must_use]
    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    /// Gradient of the backward target with respect to node `v`, if the
    /// backward sweep reached it.
    #[must_use]
    pub fn grad(&self, v: Var) -> Option<&Array2<f64>> {
        self.nodes[v.0].grad.as_ref()
    }

    fn push(&mut self, value: Array2<f64>, op: Op) -> Var {
        if self.poison.is_none() && !value.iter().all(|x| x.is_finite()) {
            self.poison = Some(op.name().to_string());
        }
        self.nodes.push(Node { value, grad: None, op });
        Var(self.nodes.len() - 1)
    }

    fn poison_domain(&mut self, op: &str, msg: &str) {
        if self.poison.is_none() {
            self.poison = Some(format!("{op}: {msg}"));
        }
    }

    /// Records a constant input.
    pub fn input(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (ar, ac) = self.shape(a);
        let (br, bc) = self.shape(b);
        assert_eq!(ac, br, "matmul: {ar}x{ac} * {br}x{bc}");
        let value = self.nodes[a.0].value.dot(&self.nodes[b.0].value);
        self.push(value, Op::Matmul(a, b))
    }

    /// `a * b^T`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let (ar, ac) = self.shape(a);
        let (br, bc) = self.shape(b);
        assert_eq!(ac, bc, "matmul_nt: {ar}x{ac} * ({br}x{bc})^T");
        let value = self.nodes[a.0].value.dot(&self.nodes[b.0].value.t());
        self.push(value, Op::MatmulNt(a, b))
    }

    /// Sparse-dense product with a constant sparse left operand.
    pub fn spmm(&mut self, s: &Arc<CsrMatrix>, b: Var) -> Var {
        let (br, _) = self.shape(b);
        assert_eq!(s.cols(), br, "spmm: sparse {}x{} * dense {br} rows", s.rows(), s.cols());
        let value = s.matmul_dense(&self.nodes[b.0].value);
        self.push(value, Op::Spmm(Arc::clone(s), b))
    }

    /// Symmetric masked adjacency times dense. `mask` is (num_edges, 1); each
    /// unordered edge contributes its weight in both directions. Gradients
    /// flow into both the mask and the dense operand.
    pub fn adj_mask_mul(&mut self, edges: &Arc<Vec<(usize, usize)>>, mask: Var, dense: Var) -> Var {
        let (mr, mc) = self.shape(mask);
        let (n, h) = self.shape(dense);
        assert_eq!((mr, mc), (edges.len(), 1), "adj_mask_mul: mask must be {}x1", edges.len());
        let mut out = Array2::<f64>::zeros((n, h));
        {
            let mask_v = &self.nodes[mask.0].value;
            let dense_v = &self.nodes[dense.0].value;
            for (e, &(i, j)) in edges.iter().enumerate() {
                debug_assert!(i < n && j < n);
                let w = mask_v[(e, 0)];
                for c in 0..h {
                    out[(i, c)] += w * dense_v[(j, c)];
                    out[(j, c)] += w * dense_v[(i, c)];
                }
            }
        }
        self.push(out, Op::AdjMaskMul { edges: Arc::clone(edges), mask, dense })
    }

    fn same_shape(&self, a: Var, b: Var, op: &str) {
        assert_eq!(self.shape(a), self.shape(b), "{op}: shape mismatch");
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "add");
        let value = &self.nodes[a.0].value + &self.nodes[b.0].value;
        self.push(value, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "sub");
        let value = &self.nodes[a.0].value - &self.nodes[b.0].value;
        self.push(value, Op::Sub(a, b))
    }

    /// Elementwise product of same-shape operands.
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "mul");
        let value = &self.nodes[a.0].value * &self.nodes[b.0].value;
        self.push(value, Op::Mul(a, b))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let value = self.nodes[a.0].value.mapv(|x| x + c);
        self.push(value, Op::AddScalar(a))
    }

    pub fn mul_scalar(&mut self, a: Var, c: f64) -> Var {
        let value = self.nodes[a.0].value.mapv(|x| x * c);
        self.push(value, Op::MulScalar(a, c))
    }

    /// Elementwise product with a constant matrix (e.g. a diagonal mask).
    pub fn mul_const(&mut self, a: Var, k: &Arc<Array2<f64>>) -> Var {
        assert_eq!(self.shape(a), k.dim(), "mul_const: shape mismatch");
        let value = &self.nodes[a.0].value * k.as_ref();
        self.push(value, Op::MulConst(a, Arc::clone(k)))
    }

    /// Scales row i of `a` by `col[i, 0]`.
    pub fn scale_rows(&mut self, a: Var, col: Var) -> Var {
        let (n, _) = self.shape(a);
        assert_eq!(self.shape(col), (n, 1), "scale_rows: column vector mismatch");
        let value = &self.nodes[a.0].value * &self.nodes[col.0].value;
        self.push(value, Op::ScaleRows(a, col))
    }

    /// Adds `col[i, 0]` to every entry of row i.
    pub fn add_col(&mut self, a: Var, col: Var) -> Var {
        let (n, _) = self.shape(a);
        assert_eq!(self.shape(col), (n, 1), "add_col: column vector mismatch");
        let value = &self.nodes[a.0].value + &self.nodes[col.0].value;
        self.push(value, Op::AddCol(a, col))
    }

    /// Adds `row[0, j]` to every entry of column j.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (_, m) = self.shape(a);
        assert_eq!(self.shape(row), (1, m), "add_row: row vector mismatch");
        let value = &self.nodes[a.0].value + &self.nodes[row.0].value;
        self.push(value, Op::AddRow(a, row))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.mapv(|x| x.max(0.0));
        self.push(value, Op::Relu(a))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let value = self.nodes[a.0].value.mapv(|x| if x > 0.0 { x } else { slope * x });
        self.push(value, Op::LeakyRelu(a, slope))
    }

    /// PReLU with a learnable 1x1 negative slope.
    pub fn prelu(&mut self, x: Var, slope: Var) -> Var {
        assert_eq!(self.shape(slope), (1, 1), "prelu: slope must be 1x1");
        let s = self.nodes[slope.0].value[(0, 0)];
        let value = self.nodes[x.0].value.mapv(|v| if v > 0.0 { v } else { s * v });
        self.push(value, Op::Prelu { x, slope })
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.mapv(stable_sigmoid);
        self.push(value, Op::Sigmoid(a))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.mapv(stable_softplus);
        self.push(value, Op::Softplus(a))
    }

    /// Natural log; inputs must be strictly positive.
    pub fn log(&mut self, a: Var) -> Var {
        if self.nodes[a.0].value.iter().any(|x| *x <= 0.0) {
            self.poison_domain("log", "non-positive input");
        }
        let value = self.nodes[a.0].value.mapv(f64::ln);
        self.push(value, Op::Log(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.mapv(f64::exp);
        self.push(value, Op::Exp(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.mapv(|x| x * x);
        self.push(value, Op::Square(a))
    }

    /// Square root; inputs must be strictly positive.
    pub fn sqrt(&mut self, a: Var) -> Var {
        if self.nodes[a.0].value.iter().any(|x| *x <= 0.0) {
            self.poison_domain("sqrt", "non-positive input");
        }
        let value = self.nodes[a.0].value.mapv(f64::sqrt);
        self.push(value, Op::Sqrt(a))
    }

    /// Elementwise reciprocal; inputs must be non-zero.
    pub fn recip(&mut self, a: Var) -> Var {
        if self.nodes[a.0].value.iter().any(|x| *x == 0.0) {
            self.poison_domain("recip", "zero input");
        }
        let value = self.nodes[a.0].value.mapv(|x| 1.0 / x);
        self.push(value, Op::Recip(a))
    }

    /// Clamp to [lo, hi]; gradient is 1 strictly inside, 0 at the rails.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        assert!(lo <= hi, "clamp: lo > hi");
        let value = self.nodes[a.0].value.mapv(|x| x.clamp(lo, hi));
        self.push(value, Op::Clamp(a, lo, hi))
    }

    /// Straight-through gate: forward is 1 where x >= 0.5 else 0, backward
    /// passes the incoming gradient through unchanged.
    pub fn hard_gate(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.mapv(|x| if x >= 0.5 { 1.0 } else { 0.0 });
        self.push(value, Op::HardGate(a))
    }

    /// L2-normalizes each row, with the norm floored at `floor`.
    pub fn row_normalize_l2(&mut self, a: Var, floor: f64) -> Var {
        assert!(floor > 0.0, "row_normalize_l2: floor must be positive");
        let av = &self.nodes[a.0].value;
        let mut value = av.clone();
        for mut row in value.rows_mut() {
            let n = row.iter().map(|x| x * x).sum::<f64>().sqrt().max(floor);
            row.mapv_inplace(|x| x / n);
        }
        self.push(value, Op::RowNormalizeL2(a, floor))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let (an, _) = self.shape(a);
        let (bn, _) = self.shape(b);
        assert_eq!(an, bn, "concat_cols: row count mismatch");
        let value = concatenate(
            Axis(1),
            &[self.nodes[a.0].value.view(), self.nodes[b.0].value.view()],
        )
        .expect("same row count");
        self.push(value, Op::ConcatCols(a, b))
    }

    /// out[k, :] = a[idx[k], :]; indices may repeat.
    pub fn gather_rows(&mut self, a: Var, idx: &Arc<Vec<usize>>) -> Var {
        let (n, m) = self.shape(a);
        for &i in idx.iter() {
            assert!(i < n, "gather_rows: index {i} out of range for {n} rows");
        }
        let av = &self.nodes[a.0].value;
        let value = Array2::from_shape_fn((idx.len(), m), |(k, j)| av[(idx[k], j)]);
        self.push(value, Op::GatherRows(a, Arc::clone(idx)))
    }

    /// Per-row sum: (n, m) -> (n, 1).
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.sum_axis(Axis(1)).insert_axis(Axis(1));
        self.push(value, Op::SumCols(a))
    }

    pub fn reduce_sum(&mut self, a: Var) -> Var {
        let value = Array2::from_elem((1, 1), self.nodes[a.0].value.sum());
        self.push(value, Op::ReduceSum(a))
    }

    pub fn reduce_mean(&mut self, a: Var) -> Var {
        let (n, m) = self.shape(a);
        assert!(n * m > 0, "reduce_mean: empty tensor");
        let value = Array2::from_elem((1, 1), self.nodes[a.0].value.sum() / (n * m) as f64);
        self.push(value, Op::ReduceMean(a))
    }

    /// Scalar forward value, for 1x1 nodes.
    #[must_use]
    pub fn scalar(&self, v: Var) -> f64 {
        let val = &self.nodes[v.0].value;
        assert_eq!(val.dim(), (1, 1), "scalar: node is not 1x1");
        val[(0, 0)]
    }

    /// Runs the single reverse sweep from a 1x1 target, filling gradients
    /// for every node that reaches it.
    pub fn backward(&mut self, target: Var) -> Result<(), AutodiffError> {
        if let Some(op) = &self.poison {
            return Err(AutodiffError::NonFinite { op: op.clone() });
        }
        if self.consumed {
            return Err(AutodiffError::BackwardTwice);
        }
        let (r, c) = self.shape(target);
        if (r, c) != (1, 1) {
            return Err(AutodiffError::NotScalar { rows: r, cols: c });
        }
        self.consumed = true;
        self.nodes[target.0].grad = Some(Array2::ones((1, 1)));
        for k in (0..=target.0).rev() {
            let op = self.nodes[k].op.clone();
            let Some(g) = self.nodes[k].grad.clone() else { continue };
            let deltas = self.backward_step(&op, &g, k);
            for (v, d) in deltas {
                if !d.iter().all(|x| x.is_finite()) {
                    return Err(AutodiffError::NonFinite { op: format!("backward {}", op.name()) });
                }
                match &mut self.nodes[v.0].grad {
                    Some(acc) => *acc += &d,
                    slot => *slot = Some(d),
                }
            }
        }
        Ok(())
    }

    /// Gradient contributions of node `k` to its parents.
    fn backward_step(&self, op: &Op, g: &Array2<f64>, k: usize) -> Vec<(Var, Array2<f64>)> {
        let val = |v: Var| &self.nodes[v.0].value;
        let y = &self.nodes[k].value;
        match op {
            Op::Leaf => vec![],
            Op::Matmul(a, b) => vec![(*a, g.dot(&val(*b).t())), (*b, val(*a).t().dot(g))],
            Op::MatmulNt(a, b) => vec![(*a, g.dot(val(*b))), (*b, g.t().dot(val(*a)))],
            Op::Spmm(s, b) => vec![(*b, s.transpose_matmul_dense(g))],
            Op::AdjMaskMul { edges, mask, dense } => {
                let mask_v = val(*mask);
                let dense_v = val(*dense);
                let h = dense_v.ncols();
                let mut dm = Array2::<f64>::zeros((edges.len(), 1));
                let mut dd = Array2::<f64>::zeros(dense_v.dim());
                for (e, &(i, j)) in edges.iter().enumerate() {
                    let w = mask_v[(e, 0)];
                    let mut acc = 0.0;
                    for c in 0..h {
                        acc += g[(i, c)] * dense_v[(j, c)] + g[(j, c)] * dense_v[(i, c)];
                        dd[(j, c)] += w * g[(i, c)];
                        dd[(i, c)] += w * g[(j, c)];
                    }
                    dm[(e, 0)] = acc;
                }
                vec![(*mask, dm), (*dense, dd)]
            }
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::Sub(a, b) => vec![(*a, g.clone()), (*b, -g)],
            Op::Mul(a, b) => vec![(*a, g * val(*b)), (*b, g * val(*a))],
            Op::AddScalar(a) => vec![(*a, g.clone())],
            Op::MulScalar(a, c) => vec![(*a, g * *c)],
            Op::MulConst(a, kmat) => vec![(*a, g * kmat.as_ref())],
            Op::ScaleRows(a, col) => {
                let da = g * val(*col);
                let dc = (g * val(*a)).sum_axis(Axis(1)).insert_axis(Axis(1));
                vec![(*a, da), (*col, dc)]
            }
            Op::AddCol(a, col) => {
                let dc = g.sum_axis(Axis(1)).insert_axis(Axis(1));
                vec![(*a, g.clone()), (*col, dc)]
            }
            Op::AddRow(a, row) => {
                let dr = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                vec![(*a, g.clone()), (*row, dr)]
            }
            Op::Relu(a) => {
                let mut d = g.clone();
                d.zip_mut_with(val(*a), |gi, xi| {
                    if *xi <= 0.0 {
                        *gi = 0.0;
                    }
                });
                vec![(*a, d)]
            }
            Op::LeakyRelu(a, s) => {
                let mut d = g.clone();
                d.zip_mut_with(val(*a), |gi, xi| {
                    if *xi <= 0.0 {
                        *gi *= s;
                    }
                });
                vec![(*a, d)]
            }
            Op::Prelu { x, slope } => {
                let s = val(*slope)[(0, 0)];
                let xv = val(*x);
                let mut dx = g.clone();
                dx.zip_mut_with(xv, |gi, xi| {
                    if *xi <= 0.0 {
                        *gi *= s;
                    }
                });
                let mut ds = 0.0;
                for (gi, xi) in g.iter().zip(xv.iter()) {
                    if *xi <= 0.0 {
                        ds += gi * xi;
                    }
                }
                vec![(*x, dx), (*slope, Array2::from_elem((1, 1), ds))]
            }
            Op::Sigmoid(a) => vec![(*a, g * &y.mapv(|v| v * (1.0 - v)))],
            Op::Softplus(a) => vec![(*a, g * &val(*a).mapv(stable_sigmoid))],
            Op::Log(a) => vec![(*a, g / val(*a))],
            Op::Exp(a) => vec![(*a, g * y)],
            Op::Square(a) => vec![(*a, g * &val(*a).mapv(|v| 2.0 * v))],
            Op::Sqrt(a) => vec![(*a, g * &y.mapv(|v| 0.5 / v))],
            Op::Recip(a) => vec![(*a, g * &y.mapv(|v| -v * v))],
            Op::Clamp(a, lo, hi) => {
                let mut d = g.clone();
                d.zip_mut_with(val(*a), |gi, xi| {
                    if *xi <= *lo || *xi >= *hi {
                        *gi = 0.0;
                    }
                });
                vec![(*a, d)]
            }
            Op::HardGate(a) => vec![(*a, g.clone())],
            Op::RowNormalizeL2(a, floor) => {
                let av = val(*a);
                let mut d = Array2::<f64>::zeros(av.dim());
                for i in 0..av.nrows() {
                    let norm = av.row(i).iter().map(|x| x * x).sum::<f64>().sqrt();
                    if norm > *floor {
                        let dot: f64 = g.row(i).iter().zip(y.row(i)).map(|(gi, yi)| gi * yi).sum();
                        for j in 0..av.ncols() {
                            d[(i, j)] = (g[(i, j)] - y[(i, j)] * dot) / norm;
                        }
                    } else {
                        for j in 0..av.ncols() {
                            d[(i, j)] = g[(i, j)] / floor;
                        }
                    }
                }
                vec![(*a, d)]
            }
            Op::ConcatCols(a, b) => {
                let ma = val(*a).ncols();
                let da = g.slice(ndarray::s![.., ..ma]).to_owned();
                let db = g.slice(ndarray::s![.., ma..]).to_owned();
                vec![(*a, da), (*b, db)]
            }
            Op::GatherRows(a, idx) => {
                let mut d = Array2::<f64>::zeros(val(*a).dim());
                for (k_row, &i) in idx.iter().enumerate() {
                    for j in 0..d.ncols() {
                        d[(i, j)] += g[(k_row, j)];
                    }
                }
                vec![(*a, d)]
            }
            Op::SumCols(a) => {
                let (n, m) = val(*a).dim();
                let d = Array2::from_shape_fn((n, m), |(i, _)| g[(i, 0)]);
                vec![(*a, d)]
            }
            Op::ReduceSum(a) => vec![(*a, Array2::from_elem(val(*a).dim(), g[(0, 0)]))],
            Op::ReduceMean(a) => {
                let (n, m) = val(*a).dim();
                vec![(*a, Array2::from_elem((n, m), g[(0, 0)] / (n * m) as f64))]
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_mat(rng: &mut ChaCha8Rng, n: usize, m: usize) -> Array2<f64> {
        Array2::from_shape_fn((n, m), |_| {
            // Bounded away from zero so kinked ops stay finite-difference
            // friendly.
            let v: f64 = rng.gen_range(0.05..1.0);
            if rng.gen_bool(0.5) {
                v
            } else {
                -v
            }
        })
    }

    fn rand_pos(rng: &mut ChaCha8Rng, n: usize, m: usize) -> Array2<f64> {
        Array2::from_shape_fn((n, m), |_| rng.gen_range(0.2..2.0))
    }

    /// Central finite differences of `f` at `x0`, one entry at a time.
    fn fd_grad(
        x0: &Array2<f64>,
        eps: f64,
        f: &dyn Fn(&Array2<f64>) -> f64,
    ) -> Array2<f64> {
        let mut g = Array2::<f64>::zeros(x0.dim());
        let mut x = x0.clone();
        for i in 0..x0.nrows() {
            for j in 0..x0.ncols() {
                let orig = x[(i, j)];
                x[(i, j)] = orig + eps;
                let fp = f(&x);
                x[(i, j)] = orig - eps;
                let fm = f(&x);
                x[(i, j)] = orig;
                g[(i, j)] = (fp - fm) / (2.0 * eps);
            }
        }
        g
    }

    fn max_rel_err(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
        a.iter()
            .zip(b.iter())
            .map(|(x, y)| (x - y).abs() / (x.abs() + y.abs()).max(1e-8))
            .fold(0.0, f64::max)
    }

    /// Checks one unary construction against finite differences on a loss
    /// that weights entries unevenly (so constant-gradient bugs surface).
    fn check_unary(
        build: &dyn Fn(&mut Tape, Var) -> Var,
        x0: &Array2<f64>,
        tol: f64,
    ) {
        let out_dim = {
            let mut probe = Tape::new();
            let v = probe.input(x0.clone());
            let out = build(&mut probe, v);
            probe.shape(out)
        };
        let weights = Array2::from_shape_fn(out_dim, |(i, j)| ((i * 7 + j * 3) % 5) as f64 - 1.5);
        let eval = |x: &Array2<f64>| -> f64 {
            let mut t = Tape::new();
            let v = t.input(x.clone());
            let out = build(&mut t, v);
            let w = t.input(weights.clone());
            let weighted = t.mul(out, w);
            let loss = t.reduce_sum(weighted);
            assert!(t.poisoned().is_none(), "poisoned: {:?}", t.poisoned());
            t.scalar(loss)
        };
        let mut t = Tape::new();
        let v = t.input(x0.clone());
        let out = build(&mut t, v);
        let w = t.input(weights.clone());
        let weighted = t.mul(out, w);
        let loss = t.reduce_sum(weighted);
        t.backward(loss).unwrap();
        let analytic = t.grad(v).unwrap().clone();
        let numeric = fd_grad(x0, 1e-5, &eval);
        let err = max_rel_err(&analytic, &numeric);
        assert!(err < tol, "unary op grad mismatch: {err}");
    }

    #[test]
    fn unary_ops_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let x = rand_mat(&mut rng, 4, 3);
        let xp = rand_pos(&mut rng, 4, 3);
        check_unary(&|t, v| t.relu(v), &x, 1e-6);
        check_unary(&|t, v| t.leaky_relu(v, 0.2), &x, 1e-6);
        check_unary(&|t, v| t.sigmoid(v), &x, 1e-6);
        check_unary(&|t, v| t.softplus(v), &x, 1e-6);
        check_unary(&|t, v| t.exp(v), &x, 1e-6);
        check_unary(&|t, v| t.square(v), &x, 1e-6);
        check_unary(&|t, v| t.add_scalar(v, 0.7), &x, 1e-6);
        check_unary(&|t, v| t.mul_scalar(v, -1.3), &x, 1e-6);
        check_unary(&|t, v| t.log(v), &xp, 1e-6);
        check_unary(&|t, v| t.sqrt(v), &xp, 1e-6);
        check_unary(&|t, v| t.recip(v), &xp, 1e-6);
        check_unary(&|t, v| t.row_normalize_l2(v, 1e-12), &x, 1e-5);
        check_unary(&|t, v| t.sum_cols(v), &x, 1e-6);
        // Clamp with rails outside the sampled range: identity with gradient.
        check_unary(&|t, v| t.clamp(v, -10.0, 10.0), &x, 1e-6);
    }

    #[test]
    fn binary_and_structural_ops_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a0 = rand_mat(&mut rng, 3, 4);
        let b0 = rand_mat(&mut rng, 4, 2);
        let idx = Arc::new(vec![0usize, 2, 2, 1]);
        let eval = |a: &Array2<f64>, b: &Array2<f64>| -> f64 {
            let mut t = Tape::new();
            let va = t.input(a.clone());
            let vb = t.input(b.clone());
            let prod = t.matmul(va, vb); // 3x2
            let gathered = t.gather_rows(prod, &idx); // 4x2
            let cat = t.concat_cols(gathered, vb); // 4x4
            let sq = t.square(cat);
            let loss = t.reduce_mean(sq);
            t.scalar(loss)
        };
        let mut t = Tape::new();
        let va = t.input(a0.clone());
        let vb = t.input(b0.clone());
        let prod = t.matmul(va, vb);
        let gathered = t.gather_rows(prod, &idx);
        let cat = t.concat_cols(gathered, vb);
        let sq = t.square(cat);
        let loss = t.reduce_mean(sq);
        t.backward(loss).unwrap();
        let ga = t.grad(va).unwrap().clone();
        let gb = t.grad(vb).unwrap().clone();
        let na = fd_grad(&a0, 1e-5, &|a| eval(a, &b0));
        let nb = fd_grad(&b0, 1e-5, &|b| eval(&a0, b));
        assert!(max_rel_err(&ga, &na) < 1e-6);
        assert!(max_rel_err(&gb, &nb) < 1e-6);
    }

    #[test]
    fn broadcast_ops_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a0 = rand_mat(&mut rng, 4, 3);
        let col0 = rand_mat(&mut rng, 4, 1);
        let row0 = rand_mat(&mut rng, 1, 3);
        let eval = |a: &Array2<f64>, c: &Array2<f64>, r: &Array2<f64>| -> f64 {
            let mut t = Tape::new();
            let va = t.input(a.clone());
            let vc = t.input(c.clone());
            let vr = t.input(r.clone());
            let s = t.scale_rows(va, vc);
            let s = t.add_col(s, vc);
            let s = t.add_row(s, vr);
            let sq = t.square(s);
            let loss = t.reduce_sum(sq);
            t.scalar(loss)
        };
        let mut t = Tape::new();
        let va = t.input(a0.clone());
        let vc = t.input(col0.clone());
        let vr = t.input(row0.clone());
        let s = t.scale_rows(va, vc);
        let s = t.add_col(s, vc);
        let s = t.add_row(s, vr);
        let sq = t.square(s);
        let loss = t.reduce_sum(sq);
        t.backward(loss).unwrap();
        for (v, x0, f) in [
            (va, &a0, Box::new(|x: &Array2<f64>| eval(x, &col0, &row0)) as Box<dyn Fn(&Array2<f64>) -> f64>),
            (vc, &col0, Box::new(|x: &Array2<f64>| eval(&a0, x, &row0))),
            (vr, &row0, Box::new(|x: &Array2<f64>| eval(&a0, &col0, x))),
        ] {
            let numeric = fd_grad(x0, 1e-5, f.as_ref());
            let err = max_rel_err(t.grad(v).unwrap(), &numeric);
            assert!(err < 1e-6, "broadcast grad mismatch: {err}");
        }
    }

    #[test]
    fn matmul_nt_and_mul_const_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a0 = rand_mat(&mut rng, 3, 4);
        let b0 = rand_mat(&mut rng, 5, 4);
        let k = Arc::new(rand_mat(&mut rng, 3, 5));
        let eval = |a: &Array2<f64>, b: &Array2<f64>| -> f64 {
            let mut t = Tape::new();
            let va = t.input(a.clone());
            let vb = t.input(b.clone());
            let p = t.matmul_nt(va, vb);
            let m = t.mul_const(p, &k);
            let loss = t.reduce_sum(m);
            t.scalar(loss)
        };
        let mut t = Tape::new();
        let va = t.input(a0.clone());
        let vb = t.input(b0.clone());
        let p = t.matmul_nt(va, vb);
        let m = t.mul_const(p, &k);
        let loss = t.reduce_sum(m);
        t.backward(loss).unwrap();
        assert!(max_rel_err(t.grad(va).unwrap(), &fd_grad(&a0, 1e-5, &|a| eval(a, &b0))) < 1e-6);
        assert!(max_rel_err(t.grad(vb).unwrap(), &fd_grad(&b0, 1e-5, &|b| eval(&a0, b))) < 1e-6);
    }

    #[test]
    fn prelu_gradients_cover_slope() {
        let x0 = array![[-1.0, 0.5], [2.0, -0.25]];
        let s0 = array![[0.3]];
        let eval = |x: &Array2<f64>, s: &Array2<f64>| -> f64 {
            let mut t = Tape::new();
            let vx = t.input(x.clone());
            let vs = t.input(s.clone());
            let y = t.prelu(vx, vs);
            let sq = t.square(y);
            let loss = t.reduce_sum(sq);
            t.scalar(loss)
        };
        let mut t = Tape::new();
        let vx = t.input(x0.clone());
        let vs = t.input(s0.clone());
        let y = t.prelu(vx, vs);
        let sq = t.square(y);
        let loss = t.reduce_sum(sq);
        t.backward(loss).unwrap();
        assert!(max_rel_err(t.grad(vx).unwrap(), &fd_grad(&x0, 1e-6, &|x| eval(x, &s0))) < 1e-6);
        assert!(max_rel_err(t.grad(vs).unwrap(), &fd_grad(&s0, 1e-6, &|s| eval(&x0, s))) < 1e-6);
    }

    #[test]
    fn spmm_matches_dense_and_its_gradient() {
        let s = Arc::new(CsrMatrix::from_triplets(
            3,
            3,
            &[(0, 0, 0.5), (0, 1, 0.25), (1, 0, 0.25), (2, 2, 1.0)],
        ));
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x0 = rand_mat(&mut rng, 3, 2);
        let eval = |x: &Array2<f64>| -> f64 {
            let mut t = Tape::new();
            let vx = t.input(x.clone());
            let y = t.spmm(&s, vx);
            let sq = t.square(y);
            let loss = t.reduce_sum(sq);
            t.scalar(loss)
        };
        let mut t = Tape::new();
        let vx = t.input(x0.clone());
        let y = t.spmm(&s, vx);
        assert_eq!(t.value(y), &s.to_dense().dot(&x0));
        let sq = t.square(y);
        let loss = t.reduce_sum(sq);
        t.backward(loss).unwrap();
        assert!(max_rel_err(t.grad(vx).unwrap(), &fd_grad(&x0, 1e-5, &eval)) < 1e-6);
    }

    #[test]
    fn adj_mask_mul_matches_dense_oracle_and_gradients() {
        // 4 nodes, edges (0,1), (1,2), (0,3).
        let edges = Arc::new(vec![(0usize, 1usize), (1, 2), (0, 3)]);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mask0 = rand_pos(&mut rng, 3, 1);
        let z0 = rand_mat(&mut rng, 4, 2);
        let dense_oracle = |mask: &Array2<f64>, z: &Array2<f64>| -> Array2<f64> {
            let mut w = Array2::<f64>::zeros((4, 4));
            for (e, &(i, j)) in edges.iter().enumerate() {
                w[(i, j)] = mask[(e, 0)];
                w[(j, i)] = mask[(e, 0)];
            }
            w.dot(z)
        };
        let eval = |mask: &Array2<f64>, z: &Array2<f64>| -> f64 {
            let mut t = Tape::new();
            let vm = t.input(mask.clone());
            let vz = t.input(z.clone());
            let y = t.adj_mask_mul(&edges, vm, vz);
            let sq = t.square(y);
            let loss = t.reduce_sum(sq);
            t.scalar(loss)
        };
        let mut t = Tape::new();
        let vm = t.input(mask0.clone());
        let vz = t.input(z0.clone());
        let y = t.adj_mask_mul(&edges, vm, vz);
        let want = dense_oracle(&mask0, &z0);
        let diff = (t.value(y) - &want).iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(diff < 1e-14, "forward differs from dense oracle: {diff}");
        let sq = t.square(y);
        let loss = t.reduce_sum(sq);
        t.backward(loss).unwrap();
        let gm = fd_grad(&mask0, 1e-5, &|m| eval(m, &z0));
        let gz = fd_grad(&z0, 1e-5, &|z| eval(&mask0, z));
        assert!(max_rel_err(t.grad(vm).unwrap(), &gm) < 1e-6);
        assert!(max_rel_err(t.grad(vz).unwrap(), &gz) < 1e-6);
    }

    #[test]
    fn hard_gate_is_binary_forward_identity_backward() {
        let mut t = Tape::new();
        let x = t.input(array![[0.2, 0.5, 0.9]]);
        let gate = t.hard_gate(x);
        assert_eq!(t.value(gate), &array![[0.0, 1.0, 1.0]]);
        let w = t.input(array![[2.0, 3.0, 5.0]]);
        let prod = t.mul(gate, w);
        let loss = t.reduce_sum(prod);
        t.backward(loss).unwrap();
        // Straight-through: gradient w.r.t. x is the weight, not zero.
        assert_eq!(t.grad(x).unwrap(), &array![[2.0, 3.0, 5.0]]);
    }

    #[test]
    fn analytic_gradients_are_exact_for_simple_losses() {
        let x0 = array![[1.0, -2.0], [3.0, 0.5]];
        let mut t = Tape::new();
        let x = t.input(x0.clone());
        let loss = t.reduce_sum(x);
        t.backward(loss).unwrap();
        assert_eq!(t.grad(x).unwrap(), &Array2::<f64>::ones((2, 2)));

        let mut t = Tape::new();
        let x = t.input(x0.clone());
        let sq = t.square(x);
        let loss = t.reduce_sum(sq);
        t.backward(loss).unwrap();
        assert_eq!(t.grad(x).unwrap(), &x0.mapv(|v| 2.0 * v));
    }

    #[test]
    fn backward_twice_is_an_error() {
        let mut t = Tape::new();
        let x = t.input(array![[1.0]]);
        let loss = t.reduce_sum(x);
        t.backward(loss).unwrap();
        assert!(matches!(t.backward(loss), Err(AutodiffError::BackwardTwice)));
    }

    #[test]
    fn backward_rejects_non_scalar_target() {
        let mut t = Tape::new();
        let x = t.input(array![[1.0, 2.0]]);
        assert!(matches!(t.backward(x), Err(AutodiffError::NotScalar { rows: 1, cols: 2 })));
    }

    #[test]
    fn domain_violation_poisons_the_tape() {
        let mut t = Tape::new();
        let x = t.input(array![[-1.0]]);
        let y = t.log(x);
        assert!(t.poisoned().unwrap().starts_with("log"));
        assert!(matches!(t.backward(y), Err(AutodiffError::NonFinite { .. })));
    }

    #[test]
    fn overflow_poisons_the_tape() {
        let mut t = Tape::new();
        let x = t.input(array![[800.0]]);
        let y = t.exp(x);
        let _ = y;
        assert_eq!(t.poisoned(), Some("exp"));
    }
}
