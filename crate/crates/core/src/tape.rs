//! Minimal reverse-mode differentiation over [`Mat`] values.
//!
//! A [`Tape`] records every operation of one forward pass. Parameters enter
//! through [`Tape::param`], keyed by the address of the borrowed matrix, so a
//! tensor used in several places (a shared bias table, the embedding matrix
//! used by encoder and decoder) becomes a single leaf and its gradient
//! accumulates across uses.

use std::collections::HashMap;

use crate::tensor::{dot, Mat};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    /// `a · bᵀ`
    MatMulT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    RmsNorm {
        x: Var,
        gain: Var,
        bias: Var,
        inv_rms: Vec<f64>,
    },
    Softmax(Var),
    GatherRows {
        src: Var,
        idx: Vec<Option<usize>>,
    },
    SliceCols {
        src: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    TableBias {
        table: Var,
        buckets: Vec<Option<usize>>,
        column: usize,
    },
    AddScalarAt {
        a: Var,
        p: Var,
        index: usize,
    },
    BceMean {
        logits: Var,
        targets: Mat,
    },
    Sum(Vec<Var>),
}

struct Node {
    value: Mat,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<usize, Var>,
}

/// Gradients produced by [`Tape::backward`].
pub struct Grads {
    grads: Vec<Option<Mat>>,
    params: HashMap<usize, Var>,
}

impl Grads {
    /// Gradient of the loss with respect to a parameter registered on the
    /// tape, or `None` if the parameter never took part in the forward pass.
    pub fn param(&self, p: &Mat) -> Option<&Mat> {
        let v = self.params.get(&(p as *const Mat as usize))?;
        self.grads[v.0].as_ref()
    }

    pub fn var(&self, v: Var) -> Option<&Mat> {
        self.grads[v.0].as_ref()
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

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Mat, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn constant(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Registers a trainable tensor. Repeated calls with the same reference
    /// return the same variable.
    pub fn param(&mut self, p: &Mat) -> Var {
        let key = p as *const Mat as usize;
        if let Some(&v) = self.params.get(&key) {
            return v;
        }
        let v = self.push(p.clone(), Op::Leaf, true);
        self.params.insert(key, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::MatMul(a, b), rg)
    }

    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul_t(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::MatMulT(a, b), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut value = self.value(a).clone();
        value.add_assign(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Add(a, b), rg)
    }

    /// Adds a `1 × cols` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let r = self.value(row);
        assert_eq!((1, self.value(a).cols), r.shape(), "add_row shape");
        let mut value = self.value(a).clone();
        for i in 0..value.rows {
            for (x, b) in value.row_mut(i).iter_mut().zip(&r.data) {
                *x += b;
            }
        }
        let rg = self.rg(a) || self.rg(row);
        self.push(value, Op::AddRow(a, row), rg)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).map(|x| x * s);
        let rg = self.rg(a);
        self.push(value, Op::Scale(a, s), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.max(0.0));
        let rg = self.rg(a);
        self.push(value, Op::Relu(a), rg)
    }

    /// Row-wise RMS normalization: `x / sqrt(mean(x²) + eps) ⊙ gain + bias`.
    pub fn rms_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let (g, b) = (self.value(gain), self.value(bias));
        assert_eq!((1, xv.cols), g.shape(), "rms_norm gain shape");
        assert_eq!((1, xv.cols), b.shape(), "rms_norm bias shape");
        let mut value = Mat::zeros(xv.rows, xv.cols);
        let mut inv_rms = Vec::with_capacity(xv.rows);
        for i in 0..xv.rows {
            let row = xv.row(i);
            let inv = rms_inverse(row, eps);
            inv_rms.push(inv);
            for (k, o) in value.row_mut(i).iter_mut().enumerate() {
                *o = row[k] * inv * g.data[k] + b.data[k];
            }
        }
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        self.push(
            value,
            Op::RmsNorm {
                x,
                gain,
                bias,
                inv_rms,
            },
            rg,
        )
    }

    /// Row-wise softmax. `f64::NEG_INFINITY` entries act as masks; every row
    /// must keep at least one finite entry.
    pub fn softmax(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let mut value = av.clone();
        for i in 0..value.rows {
            softmax_in_place(value.row_mut(i));
        }
        let rg = self.rg(a);
        self.push(value, Op::Softmax(a), rg)
    }

    /// Output row `r` is `src[idx[r]]`, or zeros when `idx[r]` is `None`.
    pub fn gather_rows(&mut self, src: Var, idx: Vec<Option<usize>>) -> Var {
        let s = self.value(src);
        let mut value = Mat::zeros(idx.len(), s.cols);
        for (r, i) in idx.iter().enumerate() {
            if let Some(i) = *i {
                value.row_mut(r).copy_from_slice(s.row(i));
            }
        }
        let rg = self.rg(src);
        self.push(value, Op::GatherRows { src, idx }, rg)
    }

    pub fn slice_cols(&mut self, src: Var, start: usize, len: usize) -> Var {
        let s = self.value(src);
        assert!(start + len <= s.cols);
        let mut value = Mat::zeros(s.rows, len);
        for r in 0..s.rows {
            value
                .row_mut(r)
                .copy_from_slice(&s.row(r)[start..start + len]);
        }
        let rg = self.rg(src);
        self.push(value, Op::SliceCols { src, start }, rg)
    }

    pub fn concat_cols(&mut self, parts: Vec<Var>) -> Var {
        let rows = self.value(parts[0]).rows;
        let cols: usize = parts.iter().map(|&p| self.value(p).cols).sum();
        let mut value = Mat::zeros(rows, cols);
        let mut off = 0;
        for &p in &parts {
            let pv = self.value(p);
            assert_eq!(pv.rows, rows, "concat_cols rows");
            for r in 0..rows {
                value.row_mut(r)[off..off + pv.cols].copy_from_slice(pv.row(r));
            }
            off += pv.cols;
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(value, Op::ConcatCols(parts), rg)
    }

    pub fn concat_rows(&mut self, parts: Vec<Var>) -> Var {
        let cols = self.value(parts[0]).cols;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in &parts {
            let pv = self.value(p);
            assert_eq!(pv.cols, cols, "concat_rows cols");
            data.extend_from_slice(&pv.data);
            rows += pv.rows;
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(Mat::from_vec(rows, cols, data), Op::ConcatRows(parts), rg)
    }

    /// Builds an `n × n` matrix whose `(i, j)` entry is
    /// `table[buckets[i·n + j]][column]`, or 0 where the bucket is `None`.
    pub fn table_bias(&mut self, table: Var, buckets: Vec<Option<usize>>, n: usize, column: usize) -> Var {
        assert_eq!(buckets.len(), n * n);
        let t = self.value(table);
        let data = buckets
            .iter()
            .map(|b| b.map_or(0.0, |b| t.get(b, column)))
            .collect();
        let rg = self.rg(table);
        self.push(
            Mat::from_vec(n, n, data),
            Op::TableBias {
                table,
                buckets,
                column,
            },
            rg,
        )
    }

    /// Adds the scalar `p.data[index]` to every entry of `a`.
    pub fn add_scalar_at(&mut self, a: Var, p: Var, index: usize) -> Var {
        let s = self.value(p).data[index];
        let value = self.value(a).map(|x| x + s);
        let rg = self.rg(a) || self.rg(p);
        self.push(value, Op::AddScalarAt { a, p, index }, rg)
    }

    /// Mean binary cross-entropy of `sigmoid(logits)` against `targets`,
    /// in the overflow-free `softplus(z) − y·z` form.
    pub fn bce_mean(&mut self, logits: Var, targets: Mat) -> Var {
        let z = self.value(logits);
        assert_eq!(z.shape(), targets.shape(), "bce shape");
        let loss = bce_mean_value(&z.data, &targets.data);
        let rg = self.rg(logits);
        self.push(Mat::from_vec(1, 1, vec![loss]), Op::BceMean { logits, targets }, rg)
    }

    pub fn sum(&mut self, parts: Vec<Var>) -> Var {
        let first = self.value(parts[0]).shape();
        let mut value = Mat::zeros(first.0, first.1);
        for &p in &parts {
            value.add_assign(self.value(p));
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(value, Op::Sum(parts), rg)
    }

    /// Back-propagates from a `1 × 1` output.
    pub fn backward(&self, loss: Var) -> Grads {
        assert_eq!(self.value(loss).shape(), (1, 1), "backward needs a scalar");
        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Mat::filled(1, 1, 1.0));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let g = match &grads[idx] {
                Some(g) => g.clone(),
                None => continue,
            };
            let mut acc = |v: Var, m: Mat| {
                if !self.nodes[v.0].requires_grad {
                    return;
                }
                match &mut grads[v.0] {
                    Some(existing) => existing.add_assign(&m),
                    slot => *slot = Some(m),
                }
            };
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    if self.rg(*a) {
                        acc(*a, g.matmul_t(self.value(*b)));
                    }
                    if self.rg(*b) {
                        acc(*b, self.value(*a).t_matmul(&g));
                    }
                }
                Op::MatMulT(a, b) => {
                    if self.rg(*a) {
                        acc(*a, g.matmul(self.value(*b)));
                    }
                    if self.rg(*b) {
                        acc(*b, g.t_matmul(self.value(*a)));
                    }
                }
                Op::Add(a, b) => {
                    acc(*a, g.clone());
                    acc(*b, g);
                }
                Op::AddRow(a, row) => {
                    if self.rg(*row) {
                        let mut s = Mat::zeros(1, g.cols);
                        for i in 0..g.rows {
                            for (o, x) in s.data.iter_mut().zip(g.row(i)) {
                                *o += x;
                            }
                        }
                        acc(*row, s);
                    }
                    acc(*a, g);
                }
                Op::Scale(a, s) => acc(*a, g.map(|x| x * s)),
                Op::Relu(a) => {
                    let av = self.value(*a);
                    let mut d = g;
                    for (x, &v) in d.data.iter_mut().zip(&av.data) {
                        if v <= 0.0 {
                            *x = 0.0;
                        }
                    }
                    acc(*a, d);
                }
                Op::RmsNorm {
                    x,
                    gain,
                    bias,
                    inv_rms,
                } => {
                    let xv = self.value(*x);
                    let gv = self.value(*gain);
                    let cols = xv.cols;
                    let mut dgain = Mat::zeros(1, cols);
                    let mut dbias = Mat::zeros(1, cols);
                    let mut dx = Mat::zeros(xv.rows, cols);
                    for i in 0..xv.rows {
                        let inv = inv_rms[i];
                        let xr = xv.row(i);
                        let gr = g.row(i);
                        let mut proj = 0.0;
                        for k in 0..cols {
                            let n = xr[k] * inv;
                            dgain.data[k] += gr[k] * n;
                            dbias.data[k] += gr[k];
                            proj += gr[k] * gv.data[k] * n;
                        }
                        let mean = proj / cols as f64;
                        let dxr = dx.row_mut(i);
                        for k in 0..cols {
                            let n = xr[k] * inv;
                            dxr[k] = (gr[k] * gv.data[k] - n * mean) * inv;
                        }
                    }
                    acc(*gain, dgain);
                    acc(*bias, dbias);
                    acc(*x, dx);
                }
                Op::Softmax(a) => {
                    let y = &node.value;
                    let mut d = Mat::zeros(y.rows, y.cols);
                    for i in 0..y.rows {
                        let yr = y.row(i);
                        let gr = g.row(i);
                        let s = dot(yr, gr);
                        for (o, (&yv, &gv)) in d.row_mut(i).iter_mut().zip(yr.iter().zip(gr)) {
                            *o = yv * (gv - s);
                        }
                    }
                    acc(*a, d);
                }
                Op::GatherRows { src, idx } => {
                    let sv = self.value(*src);
                    let mut d = Mat::zeros(sv.rows, sv.cols);
                    for (r, i) in idx.iter().enumerate() {
                        if let Some(i) = *i {
                            for (o, x) in d.row_mut(i).iter_mut().zip(g.row(r)) {
                                *o += x;
                            }
                        }
                    }
                    acc(*src, d);
                }
                Op::SliceCols { src, start } => {
                    let sv = self.value(*src);
                    let mut d = Mat::zeros(sv.rows, sv.cols);
                    for r in 0..g.rows {
                        d.row_mut(r)[*start..*start + g.cols].copy_from_slice(g.row(r));
                    }
                    acc(*src, d);
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let cols = self.value(p).cols;
                        if self.rg(p) {
                            let mut d = Mat::zeros(g.rows, cols);
                            for r in 0..g.rows {
                                d.row_mut(r).copy_from_slice(&g.row(r)[off..off + cols]);
                            }
                            acc(p, d);
                        }
                        off += cols;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let rows = self.value(p).rows;
                        if self.rg(p) {
                            let d = Mat::from_vec(
                                rows,
                                g.cols,
                                g.data[off * g.cols..(off + rows) * g.cols].to_vec(),
                            );
                            acc(p, d);
                        }
                        off += rows;
                    }
                }
                Op::TableBias {
                    table,
                    buckets,
                    column,
                } => {
                    let tv = self.value(*table);
                    let mut d = Mat::zeros(tv.rows, tv.cols);
                    for (b, gv) in buckets.iter().zip(&g.data) {
                        if let Some(b) = *b {
                            d.data[b * tv.cols + column] += gv;
                        }
                    }
                    acc(*table, d);
                }
                Op::AddScalarAt { a, p, index } => {
                    if self.rg(*p) {
                        let pv = self.value(*p);
                        let mut d = Mat::zeros(pv.rows, pv.cols);
                        d.data[*index] = g.data.iter().sum();
                        acc(*p, d);
                    }
                    acc(*a, g);
                }
                Op::BceMean { logits, targets } => {
                    let z = self.value(*logits);
                    let scale = g.data[0] / z.data.len() as f64;
                    let data = z
                        .data
                        .iter()
                        .zip(&targets.data)
                        .map(|(&z, &y)| (sigmoid(z) - y) * scale)
                        .collect();
                    acc(*logits, Mat::from_vec(z.rows, z.cols, data));
                }
                Op::Sum(parts) => {
                    for &p in parts {
                        acc(p, g.clone());
                    }
                }
            }
        }
        Grads {
            grads,
            params: self.params.clone(),
        }
    }
}

pub fn rms_inverse(row: &[f64], eps: f64) -> f64 {
    let ms = row.iter().map(|x| x * x).sum::<f64>() / row.len() as f64;
    let r = (ms + eps).sqrt();
    if r > 0.0 {
        1.0 / r
    } else {
        0.0
    }
}

pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in row.iter_mut() {
        *x /= sum;
    }
}

#[inline]
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

#[inline]
/// `softplus(z) − y·z`, grouped so that saturated terms do not cancel.
fn bce_term(z: f64, y: f64) -> f64 {
    (z.max(0.0) - y * z) + (-z.abs()).exp().ln_1p()
}

pub fn bce_mean_value(logits: &[f64], targets: &[f64]) -> f64 {
    let total: f64 = logits
        .iter()
        .zip(targets)
        .map(|(&z, &y)| bce_term(z, y))
        .sum();
    total / logits.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Central-difference check of a scalar function of one parameter matrix.
    fn check(p: &Mat, f: impl Fn(&mut Tape, Var) -> Var) {
        let mut tape = Tape::new();
        let v = tape.param(p);
        let out = f(&mut tape, v);
        let grads = tape.backward(out);
        let analytic = grads.param(p).cloned().unwrap_or_else(|| Mat::zeros(p.rows, p.cols));
        let h = 1e-6;
        for i in 0..p.data.len() {
            let eval = |delta: f64| {
                let mut q = p.clone();
                q.data[i] += delta;
                let mut t = Tape::new();
                let v = t.param(&q);
                let o = f(&mut t, v);
                t.value(o).data[0]
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            let a = analytic.data[i];
            let err = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-6);
            assert!(err < 1e-5, "entry {i}: analytic {a} vs fd {fd}");
        }
    }

    fn rand_mat(r: usize, c: usize, seed: u64) -> Mat {
        Mat::randn(r, c, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    fn weighted_sum(t: &mut Tape, x: Var, seed: u64) -> Var {
        let (r, c) = t.value(x).shape();
        let w = t.constant(rand_mat(c, 1, seed));
        let y = t.matmul(x, w);
        let ones = t.constant(Mat::filled(1, r, 1.0));
        t.matmul(ones, y)
    }

    #[test]
    fn matmul_and_transpose_grads() {
        let p = rand_mat(3, 4, 1);
        let b = rand_mat(4, 2, 2);
        check(&p, |t, v| {
            let bv = t.constant(b.clone());
            let y = t.matmul(v, bv);
            weighted_sum(t, y, 3)
        });
        let c = rand_mat(5, 4, 4);
        check(&p, |t, v| {
            let cv = t.constant(c.clone());
            let y = t.matmul_t(cv, v);
            weighted_sum(t, y, 5)
        });
    }

    #[test]
    fn rms_norm_grads() {
        let x = rand_mat(3, 5, 6);
        let g = rand_mat(1, 5, 7);
        let b = rand_mat(1, 5, 8);
        check(&x, |t, v| {
            let (gv, bv) = (t.constant(g.clone()), t.constant(b.clone()));
            let y = t.rms_norm(v, gv, bv, 1e-6);
            weighted_sum(t, y, 9)
        });
        check(&g, |t, v| {
            let (xv, bv) = (t.constant(x.clone()), t.constant(b.clone()));
            let y = t.rms_norm(xv, v, bv, 1e-6);
            weighted_sum(t, y, 9)
        });
    }

    #[test]
    fn softmax_and_relu_grads() {
        let x = rand_mat(3, 4, 10);
        check(&x, |t, v| {
            let y = t.softmax(v);
            let z = t.relu(y);
            weighted_sum(t, z, 11)
        });
    }

    #[test]
    fn bce_grad_and_value() {
        let x = rand_mat(2, 3, 12);
        let y = Mat::from_vec(2, 3, vec![1.0, 0.0, 0.0, 0.0, 1.0, 1.0]);
        check(&x, |t, v| t.bce_mean(v, y.clone()));
        assert!((bce_mean_value(&[0.0], &[1.0]) - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn shared_param_accumulates() {
        let p = rand_mat(2, 2, 13);
        let mut tape = Tape::new();
        assert_eq!(tape.param(&p), tape.param(&p));
        check(&p, |t, v| {
            let y = t.matmul(v, v);
            weighted_sum(t, y, 14)
        });
    }

    #[test]
    fn table_bias_scatters_by_bucket() {
        let table = rand_mat(4, 2, 15);
        let buckets = vec![Some(0), Some(3), None, Some(3)];
        check(&table, |t, v| {
            let b = t.table_bias(v, buckets.clone(), 2, 1);
            weighted_sum(t, b, 16)
        });
    }

    #[test]
    fn masked_softmax_rows_ignore_neg_infinity() {
        let mut row = vec![0.0, f64::NEG_INFINITY, 0.0];
        softmax_in_place(&mut row);
        assert_eq!(row, vec![0.5, 0.0, 0.5]);
    }
}
