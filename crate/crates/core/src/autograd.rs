//! Reverse-mode differentiation over 2-D `f64` arrays.
//!
//! A [`Tape`] records operations eagerly and [`Tape::backward`] walks them in
//! reverse. Parameters live outside the tape in a [`ParamSet`] and are
//! referenced by index, so building a tape never copies weights.

use ndarray::{concatenate, s, Array2, ArrayView2, Axis, Zip};

pub type Mat = Array2<f64>;

/// Named trainable arrays.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet {
    names: Vec<String>,
    values: Vec<Mat>,
}

impl ParamSet {
    pub fn push(&mut self, name: impl Into<String>, value: Mat) -> usize {
        let name = name.into();
        assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.values.push(value);
        self.values.len() - 1
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn name(&self, i: usize) -> &str {
        &self.names[i]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn index(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn get(&self, i: usize) -> &Mat {
        &self.values[i]
    }

    pub fn get_mut(&mut self, i: usize) -> &mut Mat {
        &mut self.values[i]
    }

    pub fn values(&self) -> &[Mat] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Mat] {
        &mut self.values
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|m| m.iter().all(|x| x.is_finite()))
    }

    pub fn zeros_like(&self) -> Vec<Mat> {
        self.values.iter().map(|m| Mat::zeros(m.raw_dim())).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Const,
    Param(usize),
    Gather { table: Var, ids: Vec<usize> },
    Add(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    MatMul { a: Var, b: Var, trans_b: bool },
    Transpose(Var),
    Scale(Var, f64),
    MulConst(Var, Mat),
    AddConst(Var),
    Relu(Var),
    Tanh(Var),
    SoftmaxRows(Var),
    LayerNorm { x: Var, inv_std: Vec<f64> },
    SliceCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    MaxRows { x: Var, argmax: Vec<usize> },
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Mat },
    CosineLoss { a: Var, b: Var, y: f64, margin: f64 },
    WeightedSum(Vec<(Var, f64)>),
}

enum Value {
    Owned(Mat),
    Param(usize),
}

struct Node {
    op: Op,
    value: Value,
}

/// Smallest norm product used in cosine similarity.
pub const COSINE_EPS: f64 = 1e-8;

/// Cosine similarity with the norm product clamped at [`COSINE_EPS`].
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb).max(COSINE_EPS)
}

pub struct Tape<'p> {
    params: &'p ParamSet,
    nodes: Vec<Node>,
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamSet) -> Self {
        Self {
            params,
            nodes: Vec::with_capacity(512),
        }
    }

    fn push(&mut self, op: Op, value: Mat) -> Var {
        debug_assert!(value.iter().all(|x| !x.is_nan()), "NaN produced by {op:?}");
        self.nodes.push(Node {
            op,
            value: Value::Owned(value),
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Mat {
        match &self.nodes[v.0].value {
            Value::Owned(m) => m,
            Value::Param(i) => self.params.get(*i),
        }
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v)[[0, 0]]
    }

    pub fn constant(&mut self, value: Mat) -> Var {
        self.push(Op::Const, value)
    }

    pub fn param(&mut self, index: usize) -> Var {
        self.nodes.push(Node {
            op: Op::Param(index),
            value: Value::Param(index),
        });
        Var(self.nodes.len() - 1)
    }

    /// Rows of `table` selected by `ids`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Var {
        let t = self.value(table);
        let mut out = Mat::zeros((ids.len(), t.ncols()));
        for (r, &i) in ids.iter().enumerate() {
            out.row_mut(r).assign(&t.row(i));
        }
        self.push(Op::Gather { table, ids: ids.to_vec() }, out)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a) + self.value(b);
        self.push(Op::Add(a, b), out)
    }

    /// `a` (n×d) plus the single row `b` (1×d) on every row.
    pub fn add_row(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a) + self.value(b);
        self.push(Op::AddRow(a, b), out)
    }

    /// `a` (n×d) times the single row `b` (1×d) elementwise on every row.
    pub fn mul_row(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a) * self.value(b);
        self.push(Op::MulRow(a, b), out)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).dot(self.value(b));
        self.push(Op::MatMul { a, b, trans_b: false }, out)
    }

    /// `a · bᵀ`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).dot(&self.value(b).t());
        self.push(Op::MatMul { a, b, trans_b: true }, out)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).t().to_owned();
        self.push(Op::Transpose(a), out)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a) * c;
        self.push(Op::Scale(a, c), out)
    }

    /// Elementwise product with a constant array (dropout masks).
    pub fn mul_const(&mut self, a: Var, c: Mat) -> Var {
        let out = self.value(a) * &c;
        self.push(Op::MulConst(a, c), out)
    }

    /// Adds a constant array (attention masks); no gradient to the constant.
    pub fn add_const(&mut self, a: Var, c: &Mat) -> Var {
        let out = self.value(a) + c;
        self.push(Op::AddConst(a), out)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(|x| x.max(0.0));
        self.push(Op::Relu(a), out)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(f64::tanh);
        self.push(Op::Tanh(a), out)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let out = softmax_rows(self.value(a).view());
        self.push(Op::SoftmaxRows(a), out)
    }

    /// Normalizes each row to zero mean and unit variance.
    pub fn layer_norm(&mut self, x: Var, eps: f64) -> Var {
        let v = self.value(x);
        let d = v.ncols() as f64;
        let mut out = v.clone();
        let mut inv_std = Vec::with_capacity(v.nrows());
        for mut row in out.rows_mut() {
            let mean = row.sum() / d;
            row.mapv_inplace(|z| z - mean);
            let var = row.dot(&row) / d;
            let is = 1.0 / (var + eps).sqrt();
            row.mapv_inplace(|z| z * is);
            inv_std.push(is);
        }
        self.push(Op::LayerNorm { x, inv_std }, out)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let out = self.value(x).slice(s![.., start..start + len]).to_owned();
        self.push(Op::SliceCols { x, start }, out)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<ArrayView2<f64>> = parts.iter().map(|&p| self.value(p).view()).collect();
        let out = concatenate(Axis(1), &views).expect("row counts agree");
        self.push(Op::ConcatCols(parts.to_vec()), out)
    }

    /// Columnwise maximum over rows, as a 1×d row. Ties go to the first row.
    pub fn max_rows(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let mut out = Mat::from_elem((1, v.ncols()), f64::NEG_INFINITY);
        let mut argmax = vec![0; v.ncols()];
        for (i, row) in v.rows().into_iter().enumerate() {
            for (j, &z) in row.iter().enumerate() {
                if z > out[[0, j]] {
                    out[[0, j]] = z;
                    argmax[j] = i;
                }
            }
        }
        self.push(Op::MaxRows { x, argmax }, out)
    }

    /// Summed negative log-likelihood of `targets` under row softmaxes.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Var {
        let lv = self.value(logits);
        let probs = softmax_rows(lv.view());
        let nll: f64 = targets
            .iter()
            .enumerate()
            .map(|(i, &t)| {
                let row = lv.row(i);
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
                lse - row[t]
            })
            .sum();
        self.push(
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            Mat::from_elem((1, 1), nll),
        )
    }

    /// `1 - cos` for `y = 1`, `max(0, cos - margin)` for `y = -1`.
    pub fn cosine_loss(&mut self, a: Var, b: Var, y: f64, margin: f64) -> Var {
        let c = cosine(
            self.value(a).as_slice().expect("contiguous"),
            self.value(b).as_slice().expect("contiguous"),
        );
        let loss = if y > 0.0 { 1.0 - c } else { (c - margin).max(0.0) };
        self.push(Op::CosineLoss { a, b, y, margin }, Mat::from_elem((1, 1), loss))
    }

    /// `Σ wᵢ·xᵢ` over 1×1 scalars.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Var {
        let total: f64 = terms.iter().map(|&(v, w)| w * self.scalar(v)).sum();
        self.push(Op::WeightedSum(terms.to_vec()), Mat::from_elem((1, 1), total))
    }

    /// Gradients of the scalar `root` with respect to every parameter the
    /// tape touched, added onto `grads` (one array per parameter).
    pub fn backward(&self, root: Var, grads: &mut [Mat]) {
        let mut g: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        g[root.0] = Some(Mat::from_elem((1, 1), 1.0));

        fn acc(slot: &mut Option<Mat>, delta: Mat) {
            match slot {
                Some(m) => *m += &delta,
                None => *slot = Some(delta),
            }
        }

        for i in (0..=root.0).rev() {
            let Some(dy) = g[i].take() else { continue };
            match &self.nodes[i].op {
                Op::Const => {}
                Op::Param(p) => grads[*p] += &dy,
                Op::Gather { table, ids } => {
                    let t = self.value(*table);
                    let mut dt = Mat::zeros(t.raw_dim());
                    for (r, &id) in ids.iter().enumerate() {
                        let mut row = dt.row_mut(id);
                        row += &dy.row(r);
                    }
                    acc(&mut g[table.0], dt);
                }
                Op::Add(a, b) => {
                    acc(&mut g[a.0], dy.clone());
                    acc(&mut g[b.0], dy);
                }
                Op::AddRow(a, b) => {
                    acc(&mut g[b.0], dy.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    acc(&mut g[a.0], dy);
                }
                Op::MulRow(a, b) => {
                    let av = self.value(*a);
                    let bv = self.value(*b);
                    let db = (&dy * av).sum_axis(Axis(0)).insert_axis(Axis(0));
                    acc(&mut g[a.0], &dy * bv);
                    acc(&mut g[b.0], db);
                }
                Op::MatMul { a, b, trans_b } => {
                    let av = self.value(*a);
                    let bv = self.value(*b);
                    if *trans_b {
                        acc(&mut g[a.0], dy.dot(bv));
                        acc(&mut g[b.0], dy.t().dot(av));
                    } else {
                        acc(&mut g[a.0], dy.dot(&bv.t()));
                        acc(&mut g[b.0], av.t().dot(&dy));
                    }
                }
                Op::Transpose(a) => acc(&mut g[a.0], dy.t().to_owned()),
                Op::Scale(a, c) => acc(&mut g[a.0], dy * *c),
                Op::MulConst(a, c) => acc(&mut g[a.0], dy * c),
                Op::AddConst(a) => acc(&mut g[a.0], dy),
                Op::Relu(a) => {
                    let mut d = dy;
                    Zip::from(&mut d)
                        .and(self.value(*a))
                        .for_each(|d, &x| {
                            if x <= 0.0 {
                                *d = 0.0
                            }
                        });
                    acc(&mut g[a.0], d);
                }
                Op::Tanh(a) => {
                    let mut d = dy;
                    Zip::from(&mut d)
                        .and(self.value(Var(i)))
                        .for_each(|d, &y| *d *= 1.0 - y * y);
                    acc(&mut g[a.0], d);
                }
                Op::SoftmaxRows(a) => {
                    let y = self.value(Var(i));
                    let mut d = &dy * y;
                    for (mut row, yr) in d.rows_mut().into_iter().zip(y.rows()) {
                        let s = row.sum();
                        Zip::from(&mut row).and(&yr).for_each(|r, &yy| *r -= yy * s);
                    }
                    acc(&mut g[a.0], d);
                }
                Op::LayerNorm { x, inv_std } => {
                    let y = self.value(Var(i));
                    let n = y.ncols() as f64;
                    let mut dx = dy.clone();
                    for (r, (mut row, yr)) in dx.rows_mut().into_iter().zip(y.rows()).enumerate() {
                        let mean_dy = row.sum() / n;
                        let mean_dyy = row.dot(&yr) / n;
                        Zip::from(&mut row).and(&yr).for_each(|d, &yy| {
                            *d = inv_std[r] * (*d - mean_dy - yy * mean_dyy);
                        });
                    }
                    acc(&mut g[x.0], dx);
                }
                Op::SliceCols { x, start } => {
                    let xv = self.value(*x);
                    let mut d = Mat::zeros(xv.raw_dim());
                    d.slice_mut(s![.., *start..*start + dy.ncols()]).assign(&dy);
                    acc(&mut g[x.0], d);
                }
                Op::ConcatCols(parts) => {
                    let mut at = 0;
                    for p in parts {
                        let w = self.value(*p).ncols();
                        acc(&mut g[p.0], dy.slice(s![.., at..at + w]).to_owned());
                        at += w;
                    }
                }
                Op::MaxRows { x, argmax } => {
                    let xv = self.value(*x);
                    let mut d = Mat::zeros(xv.raw_dim());
                    for (j, &r) in argmax.iter().enumerate() {
                        d[[r, j]] = dy[[0, j]];
                    }
                    acc(&mut g[x.0], d);
                }
                Op::CrossEntropy { logits, targets, probs } => {
                    let mut d = probs.clone();
                    for (r, &t) in targets.iter().enumerate() {
                        d[[r, t]] -= 1.0;
                    }
                    acc(&mut g[logits.0], d * dy[[0, 0]]);
                }
                Op::CosineLoss { a, b, y, margin } => {
                    let av = self.value(*a);
                    let bv = self.value(*b);
                    let (da, db) = cosine_loss_grad(av, bv, *y, *margin);
                    acc(&mut g[a.0], da * dy[[0, 0]]);
                    acc(&mut g[b.0], db * dy[[0, 0]]);
                }
                Op::WeightedSum(terms) => {
                    for &(v, w) in terms {
                        acc(&mut g[v.0], Mat::from_elem((1, 1), w * dy[[0, 0]]));
                    }
                }
            }
        }
    }
}

pub fn softmax_rows(x: ArrayView2<f64>) -> Mat {
    let mut out = x.to_owned();
    for mut row in out.rows_mut() {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|z| (z - m).exp());
        let s = row.sum();
        row.mapv_inplace(|z| z / s);
    }
    out
}

/// Gradients of the cosine embedding loss. Zero on the flat side of the
/// hinge and at the kink itself.
fn cosine_loss_grad(a: &Mat, b: &Mat, y: f64, margin: f64) -> (Mat, Mat) {
    let dot = (a * b).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let denom = na * nb;
    if denom <= COSINE_EPS {
        // Clamped denominator: cos = dot / eps.
        let dl = if y > 0.0 {
            -1.0
        } else if dot / COSINE_EPS > margin {
            1.0
        } else {
            0.0
        };
        return (b * (dl / COSINE_EPS), a * (dl / COSINE_EPS));
    }
    let c = dot / denom;
    let dl_dc = if y > 0.0 {
        -1.0
    } else if c > margin {
        1.0
    } else {
        0.0
    };
    let da = (b / denom - a * (c / (na * na))) * dl_dc;
    let db = (a / denom - b * (c / (nb * nb))) * dl_dc;
    (da, db)
}
