//! Reverse-mode differentiation over a per-example tape of [`Mat`] values.
//!
//! Each forward pass records its operations into a [`Graph`]; calling
//! [`Graph::backward`] on a scalar node produces gradients for every node
//! that (transitively) depends on a leaf created with `needs_grad = true`.

use crate::tensor::{gemm, Mat};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    Silu(Var),
    /// Row-wise normalisation; caches `1/sqrt(var + eps)` per row.
    LayerNorm(Var, Vec<f64>),
    Softmax(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    Gather(Var, Vec<usize>),
    MeanAll(Var),
    Reshape(Var),
    /// Division by the maximum entry; caches the arg-max position.
    DivByMax(Var, usize),
}

#[derive(Debug)]
struct Node {
    value: Mat,
    op: Op,
    needs_grad: bool,
}

const LN_EPS: f64 = 1e-6;

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients indexed by [`Var`]; `None` for nodes that need no gradient.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Mat>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Mat> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Mat> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    let u = C * (x + 0.044715 * x * x * x);
    let th = u.tanh();
    let du = C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Mat, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn leaf(&mut self, value: Mat, needs_grad: bool) -> Var {
        self.push(value, Op::Leaf, needs_grad)
    }

    pub fn constant(&mut self, value: Mat) -> Var {
        self.leaf(value, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::MatMul(a, b), ng)
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul_t(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::MatMulT(a, b), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::Sub(a, b), ng)
    }

    /// Adds the `1 x cols` row `b` to every row of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(vb.rows(), 1);
        assert_eq!(va.cols(), vb.cols());
        let mut v = va.clone();
        for r in 0..v.rows() {
            for (x, y) in v.row_mut(r).iter_mut().zip(vb.data()) {
                *x += y;
            }
        }
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::AddRow(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::Mul(a, b), ng)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).map(|x| x * s);
        let ng = self.ng(a);
        self.push(v, Op::Scale(a, s), ng)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(gelu);
        let ng = self.ng(a);
        self.push(v, Op::Gelu(a), ng)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x * sigmoid(x));
        let ng = self.ng(a);
        self.push(v, Op::Silu(a), ng)
    }

    /// Row-wise zero-mean unit-variance normalisation without affine terms.
    pub fn layer_norm(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let cols = x.cols() as f64;
        let mut out = Mat::zeros(x.rows(), x.cols());
        let mut rstds = Vec::with_capacity(x.rows());
        for r in 0..x.rows() {
            let row = x.row(r);
            let mean = row.iter().sum::<f64>() / cols;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols;
            let rstd = 1.0 / (var + LN_EPS).sqrt();
            for (o, v) in out.row_mut(r).iter_mut().zip(row) {
                *o = (v - mean) * rstd;
            }
            rstds.push(rstd);
        }
        let ng = self.ng(a);
        self.push(out, Op::LayerNorm(a, rstds), ng)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut v = self.value(a).clone();
        for r in 0..v.rows() {
            let row = v.row_mut(r);
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
        let ng = self.ng(a);
        self.push(v, Op::Softmax(a), ng)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let m = self.value(p);
            assert_eq!(m.cols(), cols, "concat_rows column mismatch");
            data.extend_from_slice(m.data());
            rows += m.rows();
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(
            Mat::from_vec(rows, cols, data),
            Op::ConcatRows(parts.to_vec()),
            ng,
        )
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows();
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Mat::zeros(rows, cols);
        let mut off = 0;
        for &p in parts {
            let m = self.value(p);
            assert_eq!(m.rows(), rows, "concat_cols row mismatch");
            for r in 0..rows {
                out.row_mut(r)[off..off + m.cols()].copy_from_slice(m.row(r));
            }
            off += m.cols();
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(out, Op::ConcatCols(parts.to_vec()), ng)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Var {
        let m = self.value(a);
        assert!(start <= end && end <= m.rows());
        let v = Mat::from_vec(
            end - start,
            m.cols(),
            m.data()[start * m.cols()..end * m.cols()].to_vec(),
        );
        let ng = self.ng(a);
        self.push(v, Op::SliceRows(a, start), ng)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let m = self.value(a);
        assert!(start <= end && end <= m.cols());
        let mut v = Mat::zeros(m.rows(), end - start);
        for r in 0..m.rows() {
            v.row_mut(r).copy_from_slice(&m.row(r)[start..end]);
        }
        let ng = self.ng(a);
        self.push(v, Op::SliceCols(a, start), ng)
    }

    /// Selects rows of `table` by index (an embedding lookup).
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Var {
        let t = self.value(table);
        let mut v = Mat::zeros(ids.len(), t.cols());
        for (r, &id) in ids.iter().enumerate() {
            v.row_mut(r).copy_from_slice(t.row(id));
        }
        let ng = self.ng(table);
        self.push(v, Op::Gather(table, ids.to_vec()), ng)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let m = self.value(a);
        let v = Mat::scalar(m.sum() / m.len() as f64);
        let ng = self.ng(a);
        self.push(v, Op::MeanAll(a), ng)
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let v = self.value(a).clone().reshaped(rows, cols);
        let ng = self.ng(a);
        self.push(v, Op::Reshape(a), ng)
    }

    /// Divides every entry by the largest entry (which must be positive).
    /// Non-finite input yields an all-NaN result.
    pub fn div_by_max(&mut self, a: Var) -> Var {
        let m = self.value(a);
        let (arg, max) =
            m.data()
                .iter()
                .copied()
                .enumerate()
                .fold(
                    (0, f64::NEG_INFINITY),
                    |acc, (i, x)| if x > acc.1 { (i, x) } else { acc },
                );
        let v = if m.is_finite() {
            assert!(max > 0.0, "div_by_max requires a positive maximum");
            m.map(|x| x / max)
        } else {
            m.map(|_| f64::NAN)
        };
        let ng = self.ng(a);
        self.push(v, Op::DivByMax(a, arg), ng)
    }

    /// Back-propagates from the scalar node `loss`.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).len(), 1, "backward expects a scalar");
        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Mat::scalar(1.0));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    if self.ng(*a) {
                        let bv = self.value(*b);
                        let mut ga = Mat::zeros(g.rows(), bv.rows());
                        gemm(1.0, &g, false, bv, true, 0.0, &mut ga);
                        accumulate(&mut grads, *a, ga);
                    }
                    if self.ng(*b) {
                        let av = self.value(*a);
                        let mut gb = Mat::zeros(av.cols(), g.cols());
                        gemm(1.0, av, true, &g, false, 0.0, &mut gb);
                        accumulate(&mut grads, *b, gb);
                    }
                }
                Op::MatMulT(a, b) => {
                    if self.ng(*a) {
                        let bv = self.value(*b);
                        let mut ga = Mat::zeros(g.rows(), bv.cols());
                        gemm(1.0, &g, false, bv, false, 0.0, &mut ga);
                        accumulate(&mut grads, *a, ga);
                    }
                    if self.ng(*b) {
                        let av = self.value(*a);
                        let mut gb = Mat::zeros(g.cols(), av.cols());
                        gemm(1.0, &g, true, av, false, 0.0, &mut gb);
                        accumulate(&mut grads, *b, gb);
                    }
                }
                Op::Add(a, b) => {
                    if self.ng(*a) {
                        accumulate(&mut grads, *a, g.clone());
                    }
                    if self.ng(*b) {
                        accumulate(&mut grads, *b, g);
                    }
                }
                Op::Sub(a, b) => {
                    if self.ng(*a) {
                        accumulate(&mut grads, *a, g.clone());
                    }
                    if self.ng(*b) {
                        accumulate(&mut grads, *b, g.map(|x| -x));
                    }
                }
                Op::AddRow(a, b) => {
                    if self.ng(*b) {
                        let mut gb = Mat::zeros(1, g.cols());
                        for r in 0..g.rows() {
                            for (s, x) in gb.data_mut().iter_mut().zip(g.row(r)) {
                                *s += x;
                            }
                        }
                        accumulate(&mut grads, *b, gb);
                    }
                    if self.ng(*a) {
                        accumulate(&mut grads, *a, g);
                    }
                }
                Op::Mul(a, b) => {
                    if self.ng(*a) {
                        accumulate(&mut grads, *a, g.zip_map(self.value(*b), |x, y| x * y));
                    }
                    if self.ng(*b) {
                        accumulate(&mut grads, *b, g.zip_map(self.value(*a), |x, y| x * y));
                    }
                }
                Op::Scale(a, s) => {
                    let s = *s;
                    accumulate(&mut grads, *a, g.map(|x| x * s));
                }
                Op::Gelu(a) => {
                    accumulate(
                        &mut grads,
                        *a,
                        g.zip_map(self.value(*a), |gy, x| gy * gelu_grad(x)),
                    );
                }
                Op::Silu(a) => {
                    let ga = g.zip_map(self.value(*a), |gy, x| {
                        let s = sigmoid(x);
                        gy * (s + x * s * (1.0 - s))
                    });
                    accumulate(&mut grads, *a, ga);
                }
                Op::LayerNorm(a, rstds) => {
                    let y = &node.value;
                    let n = y.cols() as f64;
                    let mut ga = Mat::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        let (gy, yr) = (g.row(r), y.row(r));
                        let mean_g = gy.iter().sum::<f64>() / n;
                        let mean_gy = gy.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / n;
                        for ((o, &gi), &yi) in ga.row_mut(r).iter_mut().zip(gy).zip(yr) {
                            *o = rstds[r] * (gi - mean_g - yi * mean_gy);
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::Softmax(a) => {
                    let y = &node.value;
                    let mut ga = Mat::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        let (gy, yr) = (g.row(r), y.row(r));
                        let dot: f64 = gy.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for ((o, &gi), &yi) in ga.row_mut(r).iter_mut().zip(gy).zip(yr) {
                            *o = yi * (gi - dot);
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::ConcatRows(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let (rows, cols) = self.value(p).shape();
                        if self.ng(p) {
                            let gp = Mat::from_vec(
                                rows,
                                cols,
                                g.data()[off * cols..(off + rows) * cols].to_vec(),
                            );
                            accumulate(&mut grads, p, gp);
                        }
                        off += rows;
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let (rows, cols) = self.value(p).shape();
                        if self.ng(p) {
                            let mut gp = Mat::zeros(rows, cols);
                            for r in 0..rows {
                                gp.row_mut(r).copy_from_slice(&g.row(r)[off..off + cols]);
                            }
                            accumulate(&mut grads, p, gp);
                        }
                        off += cols;
                    }
                }
                Op::SliceRows(a, start) => {
                    let (rows, cols) = self.value(*a).shape();
                    let mut ga = Mat::zeros(rows, cols);
                    ga.data_mut()[start * cols..start * cols + g.len()].copy_from_slice(g.data());
                    accumulate(&mut grads, *a, ga);
                }
                Op::SliceCols(a, start) => {
                    let (rows, cols) = self.value(*a).shape();
                    let mut ga = Mat::zeros(rows, cols);
                    for r in 0..rows {
                        ga.row_mut(r)[*start..*start + g.cols()].copy_from_slice(g.row(r));
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::Gather(table, ids) => {
                    let (rows, cols) = self.value(*table).shape();
                    let mut gt = Mat::zeros(rows, cols);
                    for (r, &id) in ids.iter().enumerate() {
                        for (o, x) in gt.row_mut(id).iter_mut().zip(g.row(r)) {
                            *o += x;
                        }
                    }
                    accumulate(&mut grads, *table, gt);
                }
                Op::MeanAll(a) => {
                    let (rows, cols) = self.value(*a).shape();
                    let gv = g.item() / (rows * cols) as f64;
                    accumulate(&mut grads, *a, Mat::filled(rows, cols, gv));
                }
                Op::Reshape(a) => {
                    let (rows, cols) = self.value(*a).shape();
                    accumulate(&mut grads, *a, g.reshaped(rows, cols));
                }
                Op::DivByMax(a, arg) => {
                    let x = self.value(*a);
                    let max = x.data()[*arg];
                    let mut ga = g.map(|gy| gy / max);
                    let dot: f64 = g.data().iter().zip(x.data()).map(|(gy, xv)| gy * xv).sum();
                    ga.data_mut()[*arg] -= dot / (max * max);
                    accumulate(&mut grads, *a, ga);
                }
            }
        }
        Gradients { grads }
    }
}

fn accumulate(grads: &mut [Option<Mat>], v: Var, g: Mat) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Mat {
        Mat::from_vec(
            rows,
            cols,
            (0..rows * cols)
                .map(|_| rng.random_range(-1.0..1.0))
                .collect(),
        )
    }

    /// Central-difference check of d(loss)/d(input) for a graph builder.
    fn check(build: impl Fn(&mut Graph, Var) -> Var, input: Mat) {
        let mut g = Graph::new();
        let x = g.leaf(input.clone(), true);
        let loss = build(&mut g, x);
        let grads = g.backward(loss);
        let analytic = grads.get(x).expect("gradient").clone();
        let h = 1e-6;
        for i in 0..input.len() {
            let eval = |delta: f64| {
                let mut m = input.clone();
                m.data_mut()[i] += delta;
                let mut g = Graph::new();
                let x = g.leaf(m, false);
                let l = build(&mut g, x);
                g.value(l).item()
            };
            let numeric = (eval(h) - eval(-h)) / (2.0 * h);
            let a = analytic.data()[i];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            assert!(err < 1e-5, "entry {i}: analytic {a} vs numeric {numeric}");
        }
    }

    #[test]
    fn elementwise_and_norm_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = random(&mut rng, 4, 5);
        let bias = random(&mut rng, 1, 4);
        check(
            |g, x| {
                let w = g.constant(w.clone());
                let b = g.constant(bias.clone());
                let y = g.matmul_t(x, w);
                let y = g.add_row(y, b);
                let y = g.layer_norm(y);
                let y = g.gelu(y);
                let z = g.silu(y);
                let p = g.mul(y, z);
                g.mean_all(p)
            },
            random(&mut rng, 3, 5),
        );
    }

    #[test]
    fn attention_like_composition() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let other = random(&mut rng, 6, 4);
        check(
            |g, x| {
                let o = g.constant(other.clone());
                let both = g.concat_rows(&[x, o]);
                let left = g.slice_cols(both, 0, 2);
                let right = g.slice_cols(both, 2, 4);
                let s = g.matmul_t(left, right);
                let s = g.scale(s, 0.7);
                let p = g.softmax_rows(s);
                let row = g.slice_rows(p, 1, 2);
                let row = g.slice_cols(row, 2, 9);
                let r = g.div_by_max(row);
                let back = g.concat_cols(&[left, right]);
                let sq = g.mul(back, back);
                let m1 = g.mean_all(sq);
                let tgt = g.constant(Mat::filled(1, 7, 0.5));
                let d = g.sub(r, tgt);
                let d2 = g.mul(d, d);
                let m2 = g.mean_all(d2);
                g.add(m1, m2)
            },
            random(&mut rng, 3, 4),
        );
    }

    #[test]
    fn gather_reshape_matmul() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let rhs = random(&mut rng, 3, 2);
        check(
            |g, table| {
                let rows = g.gather_rows(table, &[2, 0, 2]);
                let r = g.reshape(rows, 1, 9);
                let r = g.reshape(r, 3, 3);
                let k = g.constant(rhs.clone());
                let y = g.matmul(r, k);
                let y2 = g.mul(y, y);
                g.mean_all(y2)
            },
            random(&mut rng, 4, 3),
        );
    }

    #[test]
    fn div_by_max_propagates_nan() {
        let mut g = Graph::new();
        let x = g.leaf(Mat::from_vec(1, 3, vec![0.5, f64::NAN, 1.0]), true);
        let y = g.div_by_max(x);
        assert!(g.value(y).data().iter().all(|v| v.is_nan()));
        let loss = g.mean_all(y);
        let grads = g.backward(loss);
        assert!(grads.get(x).unwrap().data().iter().any(|v| v.is_nan()));
    }
}
