//! Minimal reverse-mode differentiable array engine.
//!
//! Arrays are dense row-major 2-D blocks of 64-bit reals; scalars are 1×1.
//! Operations append nodes to a [`Tape`]; [`Tape::backward`] replays the
//! tape in reverse topological order (which is simply reverse insertion
//! order) and accumulates exact gradients. A parameter that the loss never
//! touches has a gradient of exactly zero.
//!
//! The engine is deliberately small: no broadcasting beyond row-vector
//! addition, no views, no fusion. Everything is 64-bit so finite-difference
//! checks stay tight.

use libm::erf;

use crate::{Error, Result};

/// Dense row-major 2-D array of f64.
#[derive(Debug, Clone, PartialEq)]
pub struct Array {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Array {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Array {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape {
                op: "from_vec",
                lhs: format!("{rows}x{cols}"),
                rhs: format!("len {}", data.len()),
            });
        }
        Ok(Array { rows, cols, data })
    }

    pub fn scalar(v: f64) -> Self {
        Array {
            rows: 1,
            cols: 1,
            data: vec![v],
        }
    }

    pub fn row_vector(data: Vec<f64>) -> Self {
        Array {
            rows: 1,
            cols: data.len(),
            data,
        }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Array { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }
}

fn shape_str(r: usize, c: usize) -> String {
    format!("{r}x{c}")
}

/// Row-major GEMM: `out += A' · B'` where each operand is optionally
/// transposed. The caller zeroes `out` when accumulation is not wanted.
fn gemm_acc(
    a: &[f64],
    a_shape: (usize, usize),
    ta: bool,
    b: &[f64],
    b_shape: (usize, usize),
    tb: bool,
    out: &mut [f64],
) {
    let (m, k) = if ta { (a_shape.1, a_shape.0) } else { a_shape };
    let (kb, n) = if tb { (b_shape.1, b_shape.0) } else { b_shape };
    debug_assert_eq!(k, kb);
    debug_assert_eq!(out.len(), m * n);
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    let (rsa, csa) = if ta {
        (1, a_shape.1 as isize)
    } else {
        (a_shape.1 as isize, 1)
    };
    let (rsb, csb) = if tb {
        (1, b_shape.1 as isize)
    } else {
        (b_shape.1 as isize, 1)
    };
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            1.0,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Handle to a value recorded on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Matmul(Var, Var),
    Transpose(Var),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, eps: f64 },
    Gelu(Var),
    Lookup { table: Var, ids: Vec<usize> },
    SumAll(Var),
}

struct Node {
    op: Op,
    rows: usize,
    cols: usize,
    value: Vec<f64>,
}

/// Ordered record of primitive operations for reverse-mode
/// differentiation. A tape is confined to one logical thread; distinct
/// tapes may run in parallel.
pub struct Tape {
    nodes: Vec<Node>,
    gelu_grad_fault: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            gelu_grad_fault: false,
        }
    }

    /// Diagnostic switch that deliberately corrupts the gelu derivative.
    /// Exists so the finite-difference harness can prove it detects a
    /// broken gradient; never enable it outside that check.
    pub fn inject_gelu_grad_fault(&mut self, on: bool) {
        self.gelu_grad_fault = on;
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

    pub fn shape(&self, v: Var) -> (usize, usize) {
        (self.nodes[v.0].rows, self.nodes[v.0].cols)
    }

    /// Copy a var's value out as an [`Array`].
    pub fn array(&self, v: Var) -> Array {
        let n = &self.nodes[v.0];
        Array {
            rows: n.rows,
            cols: n.cols,
            data: n.value.clone(),
        }
    }

    fn push(&mut self, op: Op, rows: usize, cols: usize, value: Vec<f64>) -> Var {
        debug_assert_eq!(value.len(), rows * cols);
        debug_assert!(
            value.iter().all(|v| v.is_finite()),
            "non-finite value produced on tape"
        );
        self.nodes.push(Node {
            op,
            rows,
            cols,
            value,
        });
        Var(self.nodes.len() - 1)
    }

    /// Record an input leaf (constant or parameter; the distinction lives
    /// with the caller, which remembers which leaves to read gradients
    /// for).
    pub fn leaf(&mut self, a: Array) -> Var {
        self.push(Op::Leaf, a.rows, a.cols, a.data)
    }

    fn want(&self, v: Var, op: &'static str, rows: usize, cols: usize) -> Result<()> {
        let n = &self.nodes[v.0];
        if (n.rows, n.cols) != (rows, cols) {
            return Err(Error::Shape {
                op,
                lhs: shape_str(n.rows, n.cols),
                rhs: shape_str(rows, cols),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, c) = self.shape(a);
        self.want(b, "add", r, c)?;
        let value = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(x, y)| x + y)
            .collect();
        Ok(self.push(Op::Add(a, b), r, c, value))
    }

    /// `a + row` with the 1×n row broadcast over every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (r, c) = self.shape(a);
        self.want(row, "add_row", 1, c)?;
        let mut value = self.nodes[a.0].value.clone();
        for i in 0..r {
            for j in 0..c {
                value[i * c + j] += self.nodes[row.0].value[j];
            }
        }
        Ok(self.push(Op::AddRow(a, row), r, c, value))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, c) = self.shape(a);
        self.want(b, "mul", r, c)?;
        let value = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(x, y)| x * y)
            .collect();
        Ok(self.push(Op::Mul(a, b), r, c, value))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let (r, c) = self.shape(a);
        let value = self.nodes[a.0].value.iter().map(|x| x * k).collect();
        self.push(Op::Scale(a, k), r, c, value)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.shape(a);
        let (kb, n) = self.shape(b);
        if k != kb {
            return Err(Error::Shape {
                op: "matmul",
                lhs: shape_str(m, k),
                rhs: shape_str(kb, n),
            });
        }
        let mut value = vec![0.0; m * n];
        gemm_acc(
            &self.nodes[a.0].value,
            (m, k),
            false,
            &self.nodes[b.0].value,
            (kb, n),
            false,
            &mut value,
        );
        Ok(self.push(Op::Matmul(a, b), m, n, value))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let src = &self.nodes[a.0].value;
        let mut value = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                value[j * r + i] = src[i * c + j];
            }
        }
        self.push(Op::Transpose(a), c, r, value)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (r, c) = self.shape(a);
        if start > end || end > r {
            return Err(Error::Shape {
                op: "slice_rows",
                lhs: shape_str(r, c),
                rhs: format!("rows {start}..{end}"),
            });
        }
        let value = self.nodes[a.0].value[start * c..end * c].to_vec();
        Ok(self.push(Op::SliceRows(a, start), end - start, c, value))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (r, c) = self.shape(a);
        if start > end || end > c {
            return Err(Error::Shape {
                op: "slice_cols",
                lhs: shape_str(r, c),
                rhs: format!("cols {start}..{end}"),
            });
        }
        let w = end - start;
        let mut value = Vec::with_capacity(r * w);
        for i in 0..r {
            value.extend_from_slice(&self.nodes[a.0].value[i * c + start..i * c + end]);
        }
        Ok(self.push(Op::SliceCols(a, start), r, w, value))
    }

    /// Stack arrays vertically. Zero-row inputs are legal.
    pub fn concat_rows(&mut self, xs: &[Var]) -> Result<Var> {
        if xs.is_empty() {
            return Err(Error::EmptyInput("concat_rows of nothing"));
        }
        let c = self.shape(xs[0]).1;
        let mut rows = 0;
        let mut value = Vec::new();
        for &x in xs {
            let (r, cx) = self.shape(x);
            if cx != c {
                return Err(Error::Shape {
                    op: "concat_rows",
                    lhs: shape_str(rows, c),
                    rhs: shape_str(r, cx),
                });
            }
            rows += r;
            value.extend_from_slice(&self.nodes[x.0].value);
        }
        Ok(self.push(Op::ConcatRows(xs.to_vec()), rows, c, value))
    }

    /// Concatenate along the last (feature) dimension. Zero-column inputs
    /// are legal.
    pub fn concat_cols(&mut self, xs: &[Var]) -> Result<Var> {
        if xs.is_empty() {
            return Err(Error::EmptyInput("concat_cols of nothing"));
        }
        let r = self.shape(xs[0]).0;
        let mut total = 0;
        for &x in xs {
            let (rx, cx) = self.shape(x);
            if rx != r {
                return Err(Error::Shape {
                    op: "concat_cols",
                    lhs: shape_str(r, total),
                    rhs: shape_str(rx, cx),
                });
            }
            total += cx;
        }
        let mut value = Vec::with_capacity(r * total);
        for i in 0..r {
            for &x in xs {
                let w = self.shape(x).1;
                value.extend_from_slice(&self.nodes[x.0].value[i * w..(i + 1) * w]);
            }
        }
        Ok(self.push(Op::ConcatCols(xs.to_vec()), r, total, value))
    }

    /// Row-wise softmax with per-row max subtraction.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let mut value = self.nodes[a.0].value.clone();
        for i in 0..r {
            let row = &mut value[i * c..(i + 1) * c];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        self.push(Op::SoftmaxRows(a), r, c, value)
    }

    /// Row-wise log-softmax, the numerically stable path for cross-entropy.
    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let mut value = self.nodes[a.0].value.clone();
        for i in 0..r {
            let row = &mut value[i * c..(i + 1) * c];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
        self.push(Op::LogSoftmaxRows(a), r, c, value)
    }

    /// Normalize every row to zero mean and unit variance, then apply the
    /// 1×n gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (r, c) = self.shape(x);
        self.want(gain, "layer_norm", 1, c)?;
        self.want(bias, "layer_norm", 1, c)?;
        let mut value = vec![0.0; r * c];
        for i in 0..r {
            let row = &self.nodes[x.0].value[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for j in 0..c {
                let xhat = (row[j] - mean) * inv;
                value[i * c + j] = xhat * self.nodes[gain.0].value[j] + self.nodes[bias.0].value[j];
            }
        }
        Ok(self.push(Op::LayerNorm { x, gain, bias, eps }, r, c, value))
    }

    /// Exact Gaussian-CDF gelu.
    pub fn gelu(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let value = self.nodes[a.0]
            .value
            .iter()
            .map(|&x| x * gauss_cdf(x))
            .collect();
        self.push(Op::Gelu(a), r, c, value)
    }

    /// Gather rows of `table` by index.
    pub fn lookup(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (r, c) = self.shape(table);
        for &id in ids {
            if id >= r {
                return Err(Error::Contract(format!(
                    "lookup id {id} out of range for table with {r} rows"
                )));
            }
        }
        let mut value = Vec::with_capacity(ids.len() * c);
        for &id in ids {
            value.extend_from_slice(&self.nodes[table.0].value[id * c..(id + 1) * c]);
        }
        Ok(self.push(
            Op::Lookup {
                table,
                ids: ids.to_vec(),
            },
            ids.len(),
            c,
            value,
        ))
    }

    /// Sum of every element, as a 1×1 array.
    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.nodes[a.0].value.iter().sum();
        self.push(Op::SumAll(a), 1, 1, vec![s])
    }

    /// Reverse-mode sweep from a scalar loss. Nodes the loss does not reach
    /// keep gradient `None`, which reads back as exact zeros.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let n = &self.nodes[loss.0];
        if (n.rows, n.cols) != (1, 1) {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got {}",
                shape_str(n.rows, n.cols)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for id in (0..=loss.0).rev() {
            if grads[id].is_none() {
                continue;
            }
            if matches!(self.nodes[id].op, Op::Leaf) {
                continue; // keep the gradient for the caller
            }
            let g = grads[id].take().expect("checked above");
            let (rows, cols) = (self.nodes[id].rows, self.nodes[id].cols);
            match &self.nodes[id].op {
                Op::Leaf => unreachable!(),
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, &g);
                    accumulate(&mut grads, *b, &g);
                }
                Op::AddRow(a, row) => {
                    accumulate(&mut grads, *a, &g);
                    let mut gr = vec![0.0; cols];
                    for i in 0..rows {
                        for j in 0..cols {
                            gr[j] += g[i * cols + j];
                        }
                    }
                    accumulate(&mut grads, *row, &gr);
                }
                Op::Mul(a, b) => {
                    let ga: Vec<f64> = g
                        .iter()
                        .zip(&self.nodes[b.0].value)
                        .map(|(gv, bv)| gv * bv)
                        .collect();
                    let gb: Vec<f64> = g
                        .iter()
                        .zip(&self.nodes[a.0].value)
                        .map(|(gv, av)| gv * av)
                        .collect();
                    accumulate(&mut grads, *a, &ga);
                    accumulate(&mut grads, *b, &gb);
                }
                Op::Scale(a, k) => {
                    let ga: Vec<f64> = g.iter().map(|gv| gv * k).collect();
                    accumulate(&mut grads, *a, &ga);
                }
                Op::Matmul(a, b) => {
                    let (m, k) = (self.nodes[a.0].rows, self.nodes[a.0].cols);
                    let nn = self.nodes[b.0].cols;
                    // dA = G·Bᵀ, dB = Aᵀ·G
                    let mut ga = vec![0.0; m * k];
                    gemm_acc(&g, (m, nn), false, &self.nodes[b.0].value, (k, nn), true, &mut ga);
                    let mut gb = vec![0.0; k * nn];
                    gemm_acc(&self.nodes[a.0].value, (m, k), true, &g, (m, nn), false, &mut gb);
                    accumulate(&mut grads, *a, &ga);
                    accumulate(&mut grads, *b, &gb);
                }
                Op::Transpose(a) => {
                    let (ar, ac) = (self.nodes[a.0].rows, self.nodes[a.0].cols);
                    let mut ga = vec![0.0; ar * ac];
                    for i in 0..rows {
                        for j in 0..cols {
                            ga[j * ac + i] = g[i * cols + j];
                        }
                    }
                    accumulate(&mut grads, *a, &ga);
                }
                Op::SliceRows(a, start) => {
                    let (ar, ac) = (self.nodes[a.0].rows, self.nodes[a.0].cols);
                    let mut ga = vec![0.0; ar * ac];
                    ga[start * ac..start * ac + g.len()].copy_from_slice(&g);
                    accumulate(&mut grads, *a, &ga);
                }
                Op::SliceCols(a, start) => {
                    let (ar, ac) = (self.nodes[a.0].rows, self.nodes[a.0].cols);
                    let mut ga = vec![0.0; ar * ac];
                    for i in 0..rows {
                        ga[i * ac + start..i * ac + start + cols]
                            .copy_from_slice(&g[i * cols..(i + 1) * cols]);
                    }
                    accumulate(&mut grads, *a, &ga);
                }
                Op::ConcatRows(xs) => {
                    let mut offset = 0;
                    for &x in xs {
                        let len = self.nodes[x.0].value.len();
                        accumulate(&mut grads, x, &g[offset..offset + len]);
                        offset += len;
                    }
                }
                Op::ConcatCols(xs) => {
                    let mut col0 = 0;
                    for &x in xs {
                        let (xr, xc) = (self.nodes[x.0].rows, self.nodes[x.0].cols);
                        let mut gx = vec![0.0; xr * xc];
                        for i in 0..xr {
                            gx[i * xc..(i + 1) * xc]
                                .copy_from_slice(&g[i * cols + col0..i * cols + col0 + xc]);
                        }
                        accumulate(&mut grads, x, &gx);
                        col0 += xc;
                    }
                }
                Op::SoftmaxRows(a) => {
                    let y = &self.nodes[id].value;
                    let mut ga = vec![0.0; rows * cols];
                    for i in 0..rows {
                        let dot: f64 = (0..cols).map(|j| g[i * cols + j] * y[i * cols + j]).sum();
                        for j in 0..cols {
                            ga[i * cols + j] = y[i * cols + j] * (g[i * cols + j] - dot);
                        }
                    }
                    accumulate(&mut grads, *a, &ga);
                }
                Op::LogSoftmaxRows(a) => {
                    let y = &self.nodes[id].value;
                    let mut ga = vec![0.0; rows * cols];
                    for i in 0..rows {
                        let gsum: f64 = (0..cols).map(|j| g[i * cols + j]).sum();
                        for j in 0..cols {
                            ga[i * cols + j] = g[i * cols + j] - y[i * cols + j].exp() * gsum;
                        }
                    }
                    accumulate(&mut grads, *a, &ga);
                }
                Op::LayerNorm { x, gain, bias, eps } => {
                    let (r, c) = (rows, cols);
                    let xv = &self.nodes[x.0].value;
                    let gainv = &self.nodes[gain.0].value;
                    let mut gx = vec![0.0; r * c];
                    let mut ggain = vec![0.0; c];
                    let mut gbias = vec![0.0; c];
                    for i in 0..r {
                        let row = &xv[i * c..(i + 1) * c];
                        let mean = row.iter().sum::<f64>() / c as f64;
                        let var =
                            row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
                        let inv = 1.0 / (var + eps).sqrt();
                        let xhat: Vec<f64> = row.iter().map(|v| (v - mean) * inv).collect();
                        let ghat: Vec<f64> = (0..c).map(|j| g[i * c + j] * gainv[j]).collect();
                        let mean_g = ghat.iter().sum::<f64>() / c as f64;
                        let mean_gx =
                            ghat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                        for j in 0..c {
                            gx[i * c + j] = (ghat[j] - mean_g - xhat[j] * mean_gx) * inv;
                            ggain[j] += g[i * c + j] * xhat[j];
                            gbias[j] += g[i * c + j];
                        }
                    }
                    accumulate(&mut grads, *x, &gx);
                    accumulate(&mut grads, *gain, &ggain);
                    accumulate(&mut grads, *bias, &gbias);
                }
                Op::Gelu(a) => {
                    let fault = if self.gelu_grad_fault { 1.5 } else { 1.0 };
                    let ga: Vec<f64> = self.nodes[a.0]
                        .value
                        .iter()
                        .zip(&g)
                        .map(|(&x, gv)| gv * gelu_derivative(x) * fault)
                        .collect();
                    accumulate(&mut grads, *a, &ga);
                }
                Op::Lookup { table, ids } => {
                    let (tr, tc) = (self.nodes[table.0].rows, self.nodes[table.0].cols);
                    let mut gt = vec![0.0; tr * tc];
                    for (pos, &id) in ids.iter().enumerate() {
                        for j in 0..tc {
                            gt[id * tc + j] += g[pos * tc + j];
                        }
                    }
                    accumulate(&mut grads, *table, &gt);
                }
                Op::SumAll(a) => {
                    let (ar, ac) = (self.nodes[a.0].rows, self.nodes[a.0].cols);
                    let ga = vec![g[0]; ar * ac];
                    accumulate(&mut grads, *a, &ga);
                }
            }
        }
        Ok(Gradients { grads })
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, add: &[f64]) {
    match &mut grads[v.0] {
        Some(g) => {
            for (a, b) in g.iter_mut().zip(add) {
                *a += b;
            }
        }
        None => grads[v.0] = Some(add.to_vec()),
    }
}

fn gauss_cdf(x: f64) -> f64 {
    0.5 * (1.0 + erf(x / std::f64::consts::SQRT_2))
}

fn gauss_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

fn gelu_derivative(x: f64) -> f64 {
    gauss_cdf(x) + x * gauss_pdf(x)
}

/// Gradients produced by one backward sweep.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of `v`, or `None` when the loss never reached it.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    /// Dense gradient of `v`; exact zeros when unreachable.
    pub fn dense(&self, tape: &Tape, v: Var) -> Vec<f64> {
        match self.get(v) {
            Some(g) => g.to_vec(),
            None => vec![0.0; tape.value(v).len()],
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn rand_array(rng: &mut rand_chacha::ChaCha8Rng, r: usize, c: usize) -> Array {
        Array::from_fn(r, c, |_, _| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn matmul_identity() {
        let mut t = Tape::new();
        let eye = t.leaf(Array::from_fn(3, 3, |i, j| if i == j { 1.0 } else { 0.0 }));
        let a = t.leaf(Array::from_vec(3, 2, vec![1., 2., 3., 4., 5., 6.]).unwrap());
        let p = t.matmul(eye, a).unwrap();
        assert_eq!(t.value(p), t.value(a));
    }

    #[test]
    fn matmul_hand_arithmetic() {
        let mut t = Tape::new();
        let a = t.leaf(Array::from_vec(2, 2, vec![1., 2., 3., 4.]).unwrap());
        let b = t.leaf(Array::from_vec(2, 1, vec![5., 6.]).unwrap());
        let p = t.matmul(a, b).unwrap();
        assert_eq!(t.value(p), &[17., 39.]);
    }

    #[test]
    fn matmul_matches_naive_loop_oracle() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let a = rand_array(&mut rng, 7, 5);
        let b = rand_array(&mut rng, 5, 3);
        let mut want = vec![0.0; 7 * 3];
        for i in 0..7 {
            for j in 0..3 {
                for k in 0..5 {
                    want[i * 3 + j] += a.get(i, k) * b.get(k, j);
                }
            }
        }
        let mut t = Tape::new();
        let (va, vb) = (t.leaf(a), t.leaf(b));
        let p = t.matmul(va, vb).unwrap();
        for (x, y) in t.value(p).iter().zip(&want) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut t = Tape::new();
        let a = t.leaf(Array::zeros(2, 3));
        let b = t.leaf(Array::zeros(2, 3));
        match t.matmul(a, b) {
            Err(Error::Shape { lhs, rhs, .. }) => {
                assert_eq!(lhs, "2x3");
                assert_eq!(rhs, "2x3");
            }
            other => panic!("expected shape error, got {other:?}"),
        }
    }

    #[test]
    fn matmul_with_zero_dims() {
        let mut t = Tape::new();
        let a = t.leaf(Array::zeros(2, 0));
        let b = t.leaf(Array::zeros(0, 3));
        let p = t.matmul(a, b).unwrap();
        assert_eq!(t.shape(p), (2, 3));
        assert!(t.value(p).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn softmax_rows_basics() {
        let mut t = Tape::new();
        let a = t.leaf(Array::from_vec(2, 2, vec![0., 0., 1000., 0.]).unwrap());
        let s = t.softmax_rows(a);
        let v = t.value(s);
        assert!((v[0] - 0.5).abs() < 1e-12 && (v[1] - 0.5).abs() < 1e-12);
        assert!(v[2] > 1.0 - 1e-12 && v[3] < 1e-12);
        for i in 0..2 {
            let sum: f64 = v[i * 2..(i + 1) * 2].iter().sum();
            assert!((sum - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn softmax_matches_exp_sum_oracle() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let a = rand_array(&mut rng, 1, 6);
        let exps: Vec<f64> = a.as_slice().iter().map(|v| v.exp()).collect();
        let z: f64 = exps.iter().sum();
        let mut t = Tape::new();
        let va = t.leaf(a);
        let s = t.softmax_rows(va);
        for (got, want) in t.value(s).iter().zip(exps.iter().map(|e| e / z)) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one_at_large_magnitude() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(10);
        let a = Array::from_fn(4, 8, |_, _| rng.gen_range(-1e4..1e4));
        let mut t = Tape::new();
        let va = t.leaf(a);
        let s = t.softmax_rows(va);
        for i in 0..4 {
            let sum: f64 = t.value(s)[i * 8..(i + 1) * 8].iter().sum();
            assert!((sum - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn layer_norm_constant_row_zeroes_before_gain_bias() {
        let mut t = Tape::new();
        let x = t.leaf(Array::from_vec(1, 4, vec![3.0; 4]).unwrap());
        let gain = t.leaf(Array::from_vec(1, 4, vec![1.0; 4]).unwrap());
        let bias = t.leaf(Array::zeros(1, 4));
        let y = t.layer_norm(x, gain, bias, 1e-5).unwrap();
        for v in t.value(y) {
            assert!(v.abs() < 1e-9);
        }
    }

    #[test]
    fn gelu_at_zero_is_zero() {
        let mut t = Tape::new();
        let x = t.leaf(Array::scalar(0.0));
        let y = t.gelu(x);
        assert_eq!(t.value(y), &[0.0]);
    }

    #[test]
    fn lookup_repeats_rows() {
        let mut t = Tape::new();
        let table = t.leaf(Array::from_vec(3, 2, vec![0., 1., 2., 3., 4., 5.]).unwrap());
        let e = t.lookup(table, &[2, 2]).unwrap();
        assert_eq!(t.value(e), &[4., 5., 4., 5.]);
    }

    #[test]
    fn backward_square_at_three() {
        let mut t = Tape::new();
        let x = t.leaf(Array::scalar(3.0));
        let sq = t.mul(x, x).unwrap();
        let loss = t.sum_all(sq);
        let g = t.backward(loss).unwrap();
        assert_eq!(g.get(x).unwrap(), &[6.0]);
    }

    #[test]
    fn unreachable_parameter_has_exact_zero_gradient() {
        let mut t = Tape::new();
        let x = t.leaf(Array::scalar(3.0));
        let unused = t.leaf(Array::from_vec(1, 2, vec![1.0, 2.0]).unwrap());
        let sq = t.mul(x, x).unwrap();
        let loss = t.sum_all(sq);
        let g = t.backward(loss).unwrap();
        assert!(g.get(unused).is_none());
        assert_eq!(g.dense(&t, unused), vec![0.0, 0.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut t = Tape::new();
        let x = t.leaf(Array::zeros(2, 2));
        assert!(matches!(t.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn determinism_bit_identical() {
        let run = || {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
            let mut t = Tape::new();
            let a = t.leaf(rand_array(&mut rng, 5, 4));
            let b = t.leaf(rand_array(&mut rng, 4, 5));
            let m = t.matmul(a, b).unwrap();
            let s = t.softmax_rows(m);
            let l = t.sum_all(s);
            t.value(l).to_vec()
        };
        assert_eq!(run(), run());
    }

    /// Central finite differences on a composite graph touching every op.
    #[test]
    fn finite_difference_check_all_ops() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(17);
        let p0 = rand_array(&mut rng, 3, 4);
        let p1 = rand_array(&mut rng, 4, 4);
        let gain = rand_array(&mut rng, 1, 4);
        let bias = rand_array(&mut rng, 1, 4);
        let row = rand_array(&mut rng, 1, 4);
        let table = rand_array(&mut rng, 5, 4);

        type Params = [Array; 6];
        let eval = |p: &Params| -> (f64, Tape, Vec<Var>) {
            let mut t = Tape::new();
            let vars: Vec<Var> = p.iter().map(|a| t.leaf(a.clone())).collect();
            let [v0, v1, vg, vb, vr, vt] = vars[..] else { unreachable!() };
            let emb = t.lookup(vt, &[0, 2, 4]).unwrap();
            let h = t.matmul(v0, v1).unwrap();
            let h = t.add(h, emb).unwrap();
            let h = t.add_row(h, vr).unwrap();
            let h = t.layer_norm(h, vg, vb, 1e-5).unwrap();
            let h = t.gelu(h);
            let ht = t.transpose(h);
            let hh = t.matmul(h, ht).unwrap();
            let sm = t.softmax_rows(hh);
            let ls = t.log_softmax_rows(hh);
            let a = t.slice_rows(sm, 0, 2).unwrap();
            let b = t.slice_rows(ls, 1, 3).unwrap();
            let cat = t.concat_rows(&[a, b]).unwrap();
            let left = t.slice_cols(cat, 0, 2).unwrap();
            let right = t.slice_cols(cat, 1, 3).unwrap();
            let wide = t.concat_cols(&[left, right]).unwrap();
            let prod = t.mul(wide, wide).unwrap();
            let scaled = t.scale(prod, 0.3);
            let loss = t.sum_all(scaled);
            let l = t.value(loss)[0];
            (l, t, vars)
        };

        let params: Params = [p0, p1, gain, bias, row, table];
        let (_, tape, vars) = eval(&params);
        let loss_var = Var(tape.len() - 1);
        let grads = tape.backward(loss_var).unwrap();

        let h = 1e-5;
        for (pi, var) in vars.iter().enumerate() {
            let analytic = grads.dense(&tape, *var);
            for idx in 0..params[pi].len() {
                let mut plus = params.clone();
                plus[pi].as_mut_slice()[idx] += h;
                let (lp, _, _) = eval(&plus);
                let mut minus = params.clone();
                minus[pi].as_mut_slice()[idx] -= h;
                let (lm, _, _) = eval(&minus);
                let numeric = (lp - lm) / (2.0 * h);
                let a = analytic[idx];
                let rel = (a - numeric).abs() / 1f64.max(a.abs());
                assert!(
                    rel < 1e-4,
                    "param {pi} idx {idx}: analytic {a} vs numeric {numeric}"
                );
            }
        }
    }
}
