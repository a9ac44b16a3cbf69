//! Dense `f64` tensors and a Wengert-style tape for reverse-mode gradients.
//!
//! Values are plain row-major [`Tensor`]s. Differentiable computation goes
//! through a [`Tape`]: every primitive pushes a node holding its output and
//! whatever it needs for the backward sweep, and [`Tape::backward`] replays
//! the nodes in reverse. Gradient-tracking state (`requires_grad`, `grad`)
//! lives on the tape node, not on the tensor value.
//!
//! Only the primitives the encoder, the merge coefficients and the
//! intervention modules need are provided. Two-dimensional operations treat
//! a tensor as `rows × last_dim`.

use crate::error::{contract_err, dim_err, Error, Result};

/// Dense row-major tensor of `f64`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return dim_err(format!("shape {shape:?} has a zero extent"));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return dim_err(format!("shape {shape:?} needs {n} values, got {}", data.len()));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![],
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    /// Builds a matrix from nested rows. Panics on ragged input (test helper).
    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, |x| x.len());
        assert!(rows.iter().all(|x| x.len() == c), "ragged rows");
        Self {
            shape: vec![r, c],
            data: rows.iter().flat_map(|x| x.iter().copied()).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Extent of the last axis (1 for a scalar).
    pub fn last_dim(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    /// Number of rows when viewed as `rows × last_dim`.
    pub fn rows(&self) -> usize {
        self.numel() / self.last_dim()
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.numel() {
            return dim_err(format!("cannot reshape {:?} into {shape:?}", self.shape));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.last_dim();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Plain matrix product outside any tape.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = as_matrix(self)?;
        let (k2, n) = as_matrix(other)?;
        if k != k2 {
            return dim_err(format!(
                "matmul inner dimensions differ: {:?} x {:?}",
                self.shape, other.shape
            ));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, &self.data, false, &other.data, false, &mut out, 0.0);
        Tensor::new(vec![m, n], out)
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (r, c) = as_matrix(self)?;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Tensor::new(vec![c, r], out)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        same_shape(self, other, "zip_map")?;
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }
}

fn as_matrix(t: &Tensor) -> Result<(usize, usize)> {
    match t.shape.as_slice() {
        [r, c] => Ok((*r, *c)),
        s => dim_err(format!("expected a matrix, got shape {s:?}")),
    }
}

fn same_shape(a: &Tensor, b: &Tensor, op: &str) -> Result<()> {
    if a.shape != b.shape {
        return dim_err(format!("{op}: shapes differ: {:?} vs {:?}", a.shape, b.shape));
    }
    Ok(())
}

/// `c = op(a) · op(b) + beta · c` with `op(a)` of shape `m × k` and `op(b)`
/// of shape `k × n`; `ta`/`tb` mean the operand is stored transposed.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(m: usize, k: usize, n: usize, a: &[f64], ta: bool, b: &[f64], tb: bool, c: &mut [f64], beta: f64) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the slices have exactly the lengths implied by (m, k, n) and the
    // strides above address only elements inside them.
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
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    ScaleBy {
        x: Var,
        s: Var,
    },
    AddBias {
        x: Var,
        bias: Var,
    },
    AddTiled {
        x: Var,
        tile: Var,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Softmax(Var),
    LogSoftmax(Var),
    Gelu(Var),
    Relu(Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        batch: usize,
        heads: usize,
        probs: Vec<f64>,
    },
    GatherRows {
        x: Var,
        rows: Vec<usize>,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    ScatterAdd {
        base: Var,
        src: Var,
        rows: Vec<usize>,
        col: usize,
    },
    ConcatRows(Var, Var),
    Pick {
        x: Var,
        index: usize,
    },
    Sum(Var),
    L1Mean(Var, Var),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    BceWithLogits {
        logits: Var,
        targets: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Tensor>,
}

/// Ordered record of primitive applications.
///
/// Nodes are appended in evaluation order, so every input of node `n` has an
/// index below `n`. A tape is single-writer; independent forward passes use
/// independent tapes.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

fn softmax_rows(data: &[f64], cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    for (src, dst) in data.chunks_exact(cols).zip(out.chunks_exact_mut(cols)) {
        let mx = src.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for (d, &s) in dst.iter_mut().zip(src) {
            *d = (s - mx).exp();
            z += *d;
        }
        for d in dst.iter_mut() {
            *d /= z;
        }
    }
    out
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

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records an input. Gradients are accumulated only for leaves with
    /// `requires_grad` set.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last [`backward`](Self::backward) loss with respect to
    /// `v`. Every gradient-tracking leaf has one after a backward pass (zero
    /// when the loss does not depend on it).
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a · bᵀ`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = as_matrix(ta)?;
        let (br, bc) = as_matrix(tb)?;
        let (k2, n) = if trans_b { (bc, br) } else { (br, bc) };
        if k != k2 {
            return dim_err(format!(
                "matmul inner dimensions differ: {:?} x {:?}{}",
                ta.shape,
                tb.shape,
                if trans_b { "ᵀ" } else { "" }
            ));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, &ta.data, false, &tb.data, trans_b, &mut out, 0.0);
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push(value, Op::MatMul { a, b, trans_b }, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        Ok(self.push(value, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        Ok(self.push(value, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        Ok(self.push(value, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let value = self.value(x).map(|v| v * c);
        self.push(value, Op::Scale(x, c), &[x])
    }

    /// Multiplies `x` by the single-element tensor `s`.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).numel() != 1 {
            return dim_err(format!(
                "scale_by expects a scalar factor, got {:?}",
                self.value(s).shape
            ));
        }
        let c = self.value(s).item();
        let value = self.value(x).map(|v| v * c);
        Ok(self.push(value, Op::ScaleBy { x, s }, &[x, s]))
    }

    /// Adds a `[n]` vector to every row of a `[rows × n]` tensor.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(bias));
        let n = tx.last_dim();
        if tb.numel() != n {
            return dim_err(format!(
                "bias {:?} does not match last axis of {:?}",
                tb.shape, tx.shape
            ));
        }
        let mut value = tx.clone();
        for row in value.data.chunks_exact_mut(n) {
            for (r, b) in row.iter_mut().zip(&tb.data) {
                *r += b;
            }
        }
        Ok(self.push(value, Op::AddBias { x, bias }, &[x, bias]))
    }

    /// Adds `tile` (`[s × n]`) to each consecutive `s`-row block of `x`.
    pub fn add_tiled(&mut self, x: Var, tile: Var) -> Result<Var> {
        let (tx, tt) = (self.value(x), self.value(tile));
        if tx.last_dim() != tt.last_dim() || tx.numel() % tt.numel() != 0 {
            return dim_err(format!("cannot tile {:?} over {:?}", tt.shape, tx.shape));
        }
        let mut value = tx.clone();
        for chunk in value.data.chunks_exact_mut(tt.numel()) {
            for (v, t) in chunk.iter_mut().zip(&tt.data) {
                *v += t;
            }
        }
        Ok(self.push(value, Op::AddTiled { x, tile }, &[x, tile]))
    }

    /// Normalizes each row over the last axis, then applies `gamma·x̂ + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let tx = self.value(x);
        let k = tx.last_dim();
        if tx.shape.is_empty() || k < 2 {
            return dim_err(format!(
                "layer_norm needs a last axis of at least 2, got {:?}",
                tx.shape
            ));
        }
        let (tg, tb) = (self.value(gamma), self.value(beta));
        if tg.numel() != k || tb.numel() != k {
            return dim_err(format!(
                "layer_norm affine {:?}/{:?} does not match last axis {k}",
                tg.shape, tb.shape
            ));
        }
        let rows = tx.rows();
        let mut xhat = vec![0.0; tx.numel()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; tx.numel()];
        for r in 0..rows {
            let src = &tx.data[r * k..(r + 1) * k];
            let mean = src.iter().sum::<f64>() / k as f64;
            let var = src.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / k as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std[r] = inv;
            for c in 0..k {
                let h = (src[c] - mean) * inv;
                xhat[r * k + c] = h;
                out[r * k + c] = tg.data[c] * h + tb.data[c];
            }
        }
        let value = Tensor::new(tx.shape.clone(), out)?;
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            &[x, gamma, beta],
        ))
    }

    /// Softmax over the last axis, computed with max-subtraction.
    pub fn softmax(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let value = Tensor {
            shape: tx.shape.clone(),
            data: softmax_rows(&tx.data, tx.last_dim()),
        };
        self.push(value, Op::Softmax(x), &[x])
    }

    pub fn log_softmax(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let c = tx.last_dim();
        let mut out = tx.data.clone();
        for row in out.chunks_exact_mut(c) {
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
        let value = Tensor {
            shape: tx.shape.clone(),
            data: out,
        };
        self.push(value, Op::LogSoftmax(x), &[x])
    }

    /// GELU, tanh formulation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(gelu);
        self.push(value, Op::Gelu(x), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.max(0.0));
        self.push(value, Op::Relu(x), &[x])
    }

    /// Multi-head scaled dot-product self-attention.
    ///
    /// `q`, `k`, `v` are `[batch·seq × d]`; head `h` uses columns
    /// `h·d/heads .. (h+1)·d/heads` and each sample attends only within its
    /// own `seq` rows.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, batch: usize, heads: usize) -> Result<Var> {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        let (rows, d) = as_matrix(tq)?;
        if tk.shape != tq.shape || tv.shape != tq.shape {
            return dim_err(format!(
                "attention q/k/v shapes differ: {:?} {:?} {:?}",
                tq.shape, tk.shape, tv.shape
            ));
        }
        if batch == 0 || rows % batch != 0 || heads == 0 || d % heads != 0 {
            return dim_err(format!(
                "attention: {rows} rows / {d} cols not divisible by batch {batch} and heads {heads}"
            ));
        }
        let seq = rows / batch;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut probs = vec![0.0; batch * heads * seq * seq];
        let mut out = vec![0.0; rows * d];
        let mut scores = vec![0.0; seq];
        for b in 0..batch {
            for h in 0..heads {
                let p_off = (b * heads + h) * seq * seq;
                for i in 0..seq {
                    let qi = &tq.data[(b * seq + i) * d + h * dh..][..dh];
                    for (j, s) in scores.iter_mut().enumerate() {
                        let kj = &tk.data[(b * seq + j) * d + h * dh..][..dh];
                        *s = scale * qi.iter().zip(kj).map(|(x, y)| x * y).sum::<f64>();
                    }
                    let p = softmax_rows(&scores, seq);
                    let orow = &mut out[(b * seq + i) * d + h * dh..][..dh];
                    for (j, &pj) in p.iter().enumerate() {
                        let vj = &tv.data[(b * seq + j) * d + h * dh..][..dh];
                        for (o, x) in orow.iter_mut().zip(vj) {
                            *o += pj * x;
                        }
                    }
                    probs[p_off + i * seq..p_off + (i + 1) * seq].copy_from_slice(&p);
                }
            }
        }
        let value = Tensor::new(vec![rows, d], out)?;
        Ok(self.push(
            value,
            Op::Attention {
                q,
                k,
                v,
                batch,
                heads,
                probs,
            },
            &[q, k, v],
        ))
    }

    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let tx = self.value(x);
        let (r, c) = as_matrix(tx)?;
        if rows.is_empty() {
            return dim_err("gather_rows with no rows");
        }
        let mut out = Vec::with_capacity(rows.len() * c);
        for &i in rows {
            if i >= r {
                return dim_err(format!("row {i} out of range for {:?}", tx.shape));
            }
            out.extend_from_slice(&tx.data[i * c..(i + 1) * c]);
        }
        let value = Tensor::new(vec![rows.len(), c], out)?;
        Ok(self.push(value, Op::GatherRows { x, rows: rows.to_vec() }, &[x]))
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let tx = self.value(x);
        let (r, c) = as_matrix(tx)?;
        if start >= end || end > c {
            return dim_err(format!("column slice {start}..{end} invalid for {:?}", tx.shape));
        }
        let w = end - start;
        let mut out = Vec::with_capacity(r * w);
        for i in 0..r {
            out.extend_from_slice(&tx.data[i * c + start..i * c + end]);
        }
        let value = Tensor::new(vec![r, w], out)?;
        Ok(self.push(value, Op::SliceCols { x, start }, &[x]))
    }

    /// Copy of `base` with row `i` of `src` added into row `rows[i]`,
    /// columns `col .. col + src_cols`.
    pub fn scatter_add(&mut self, base: Var, src: Var, rows: &[usize], col: usize) -> Result<Var> {
        let (tb, ts) = (self.value(base), self.value(src));
        let (br, bc) = as_matrix(tb)?;
        let (sr, sc) = as_matrix(ts)?;
        if sr != rows.len() || col + sc > bc || rows.iter().any(|&i| i >= br) {
            return dim_err(format!(
                "scatter of {:?} at column {col} does not fit {:?}",
                ts.shape, tb.shape
            ));
        }
        let mut value = tb.clone();
        for (k, &i) in rows.iter().enumerate() {
            let dst = &mut value.data[i * bc + col..i * bc + col + sc];
            for (d, s) in dst.iter_mut().zip(&ts.data[k * sc..(k + 1) * sc]) {
                *d += s;
            }
        }
        Ok(self.push(
            value,
            Op::ScatterAdd {
                base,
                src,
                rows: rows.to_vec(),
                col,
            },
            &[base, src],
        ))
    }

    pub fn concat_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (ar, ac) = as_matrix(ta)?;
        let (br, bc) = as_matrix(tb)?;
        if ac != bc {
            return dim_err(format!("concat_rows column mismatch: {:?} vs {:?}", ta.shape, tb.shape));
        }
        let mut data = ta.data.clone();
        data.extend_from_slice(&tb.data);
        let value = Tensor::new(vec![ar + br, ac], data)?;
        Ok(self.push(value, Op::ConcatRows(a, b), &[a, b]))
    }

    /// Element `index` of the flattened tensor, as a scalar.
    pub fn pick(&mut self, x: Var, index: usize) -> Result<Var> {
        let tx = self.value(x);
        if index >= tx.numel() {
            return dim_err(format!("index {index} out of range for {:?}", tx.shape));
        }
        let value = Tensor::scalar(tx.data[index]);
        Ok(self.push(value, Op::Pick { x, index }, &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).data.iter().sum());
        self.push(value, Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Mean absolute difference. The subgradient at a zero difference is 0.
    pub fn l1_mean(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape(ta, tb, "l1_mean")?;
        let n = ta.numel() as f64;
        let s: f64 = ta.data.iter().zip(&tb.data).map(|(x, y)| (x - y).abs()).sum();
        Ok(self.push(Tensor::scalar(s / n), Op::L1Mean(a, b), &[a, b]))
    }

    /// Mean cross-entropy of row-wise logits against integer labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let tl = self.value(logits);
        let (n, c) = as_matrix(tl)?;
        if labels.len() != n || labels.iter().any(|&y| y >= c) {
            return dim_err(format!("{} labels do not fit logits {:?}", labels.len(), tl.shape));
        }
        let probs = softmax_rows(&tl.data, c);
        let loss = labels
            .iter()
            .enumerate()
            .map(|(i, &y)| -probs[i * c + y].max(f64::MIN_POSITIVE).ln())
            .sum::<f64>()
            / n as f64;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            &[logits],
        ))
    }

    /// Mean binary cross-entropy with logits against targets in `[0, 1]`.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[f64]) -> Result<Var> {
        let tl = self.value(logits);
        if targets.len() != tl.numel() {
            return dim_err(format!("{} targets for logits {:?}", targets.len(), tl.shape));
        }
        let loss = tl
            .data
            .iter()
            .zip(targets)
            .map(|(&x, &y)| x.max(0.0) - x * y + (-x.abs()).exp().ln_1p())
            .sum::<f64>()
            / targets.len() as f64;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::BceWithLogits {
                logits,
                targets: targets.to_vec(),
            },
            &[logits],
        ))
    }

    /// Reverse sweep from a scalar `loss`.
    ///
    /// Afterwards every gradient-tracking leaf holds `∂loss/∂leaf`; leaves the
    /// loss does not depend on hold zeros. Earlier gradients are discarded.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return contract_err(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape
            ));
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        if self.nodes[loss.0].requires_grad {
            self.nodes[loss.0].grad = Some(Tensor::full(&self.value(loss).shape, 1.0));
        }
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad || matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(g) = self.nodes[i].grad.take() else {
                continue;
            };
            self.propagate(i, &g)?;
        }
        for node in &mut self.nodes {
            if node.requires_grad && matches!(node.op, Op::Leaf) && node.grad.is_none() {
                node.grad = Some(Tensor::zeros(&node.value.shape));
            }
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, delta: Vec<f64>) {
        let node = &mut self.nodes[v.0];
        if !node.requires_grad {
            return;
        }
        debug_assert_eq!(delta.len(), node.value.numel());
        match &mut node.grad {
            Some(g) => {
                for (a, d) in g.data.iter_mut().zip(delta) {
                    *a += d;
                }
            }
            None => {
                node.grad = Some(Tensor {
                    shape: node.value.shape.clone(),
                    data: delta,
                })
            }
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&mut self, i: usize, g: &Tensor) -> Result<()> {
        // Temporarily take the op so saved buffers can be borrowed while the
        // input gradients are written.
        let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
        let gd = &g.data;
        match &op {
            Op::Leaf => {}
            Op::MatMul { a, b, trans_b } => {
                let (m, k) = as_matrix(self.value(*a))?;
                let n = g.shape[1];
                if self.wants(*a) {
                    // da = g · op(b)ᵀ
                    let mut da = vec![0.0; m * k];
                    let bd = &self.value(*b).data;
                    gemm(m, n, k, gd, false, bd, !*trans_b, &mut da, 0.0);
                    self.accumulate(*a, da);
                }
                if self.wants(*b) {
                    let ad = &self.value(*a).data;
                    let mut db = vec![0.0; k * n];
                    if *trans_b {
                        // b is n×k: db = gᵀ · a
                        gemm(n, m, k, gd, true, ad, false, &mut db, 0.0);
                    } else {
                        gemm(k, m, n, ad, true, gd, false, &mut db, 0.0);
                    }
                    self.accumulate(*b, db);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(*a, gd.clone());
                self.accumulate(*b, gd.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(*a, gd.clone());
                self.accumulate(*b, gd.iter().map(|v| -v).collect());
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    let bd = &self.value(*b).data;
                    let da = gd.iter().zip(bd).map(|(x, y)| x * y).collect();
                    self.accumulate(*a, da);
                }
                if self.wants(*b) {
                    let ad = &self.value(*a).data;
                    let db = gd.iter().zip(ad).map(|(x, y)| x * y).collect();
                    self.accumulate(*b, db);
                }
            }
            Op::Scale(x, c) => {
                self.accumulate(*x, gd.iter().map(|v| v * c).collect());
            }
            Op::ScaleBy { x, s } => {
                let c = self.value(*s).item();
                if self.wants(*s) {
                    let xd = &self.value(*x).data;
                    let ds: f64 = gd.iter().zip(xd).map(|(a, b)| a * b).sum();
                    self.accumulate(*s, vec![ds]);
                }
                self.accumulate(*x, gd.iter().map(|v| v * c).collect());
            }
            Op::AddBias { x, bias } => {
                if self.wants(*bias) {
                    let n = g.last_dim();
                    let mut db = vec![0.0; n];
                    for row in gd.chunks_exact(n) {
                        for (d, v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    self.accumulate(*bias, db);
                }
                self.accumulate(*x, gd.clone());
            }
            Op::AddTiled { x, tile } => {
                if self.wants(*tile) {
                    let tn = self.value(*tile).numel();
                    let mut dt = vec![0.0; tn];
                    for chunk in gd.chunks_exact(tn) {
                        for (d, v) in dt.iter_mut().zip(chunk) {
                            *d += v;
                        }
                    }
                    self.accumulate(*tile, dt);
                }
                self.accumulate(*x, gd.clone());
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let k = g.last_dim();
                let gamma_d = self.value(*gamma).data.clone();
                if self.wants(*gamma) || self.wants(*beta) {
                    let mut dg = vec![0.0; k];
                    let mut db = vec![0.0; k];
                    for (grow, hrow) in gd.chunks_exact(k).zip(xhat.chunks_exact(k)) {
                        for c in 0..k {
                            dg[c] += grow[c] * hrow[c];
                            db[c] += grow[c];
                        }
                    }
                    self.accumulate(*gamma, dg);
                    self.accumulate(*beta, db);
                }
                if self.wants(*x) {
                    let mut dx = vec![0.0; gd.len()];
                    let kf = k as f64;
                    for (r, inv) in inv_std.iter().enumerate() {
                        let grow = &gd[r * k..(r + 1) * k];
                        let hrow = &xhat[r * k..(r + 1) * k];
                        let mut sum_dh = 0.0;
                        let mut sum_dh_h = 0.0;
                        for c in 0..k {
                            let dh = grow[c] * gamma_d[c];
                            sum_dh += dh;
                            sum_dh_h += dh * hrow[c];
                        }
                        for c in 0..k {
                            let dh = grow[c] * gamma_d[c];
                            dx[r * k + c] = inv / kf * (kf * dh - sum_dh - hrow[c] * sum_dh_h);
                        }
                    }
                    self.accumulate(*x, dx);
                }
            }
            Op::Softmax(x) => {
                let y = &self.nodes[i].value;
                let c = y.last_dim();
                let mut dx = vec![0.0; gd.len()];
                for ((yrow, grow), drow) in y
                    .data
                    .chunks_exact(c)
                    .zip(gd.chunks_exact(c))
                    .zip(dx.chunks_exact_mut(c))
                {
                    let dot: f64 = yrow.iter().zip(grow).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        drow[j] = yrow[j] * (grow[j] - dot);
                    }
                }
                self.accumulate(*x, dx);
            }
            Op::LogSoftmax(x) => {
                let y = &self.nodes[i].value;
                let c = y.last_dim();
                let mut dx = vec![0.0; gd.len()];
                for ((yrow, grow), drow) in y
                    .data
                    .chunks_exact(c)
                    .zip(gd.chunks_exact(c))
                    .zip(dx.chunks_exact_mut(c))
                {
                    let s: f64 = grow.iter().sum();
                    for j in 0..c {
                        drow[j] = grow[j] - yrow[j].exp() * s;
                    }
                }
                self.accumulate(*x, dx);
            }
            Op::Gelu(x) => {
                let xd = &self.value(*x).data;
                let dx = gd.iter().zip(xd).map(|(g, &v)| g * gelu_grad(v)).collect();
                self.accumulate(*x, dx);
            }
            Op::Relu(x) => {
                let xd = &self.value(*x).data;
                let dx = gd
                    .iter()
                    .zip(xd)
                    .map(|(g, &v)| if v > 0.0 { *g } else { 0.0 })
                    .collect();
                self.accumulate(*x, dx);
            }
            Op::Attention {
                q,
                k,
                v,
                batch,
                heads,
                probs,
            } => {
                let (rows, d) = as_matrix(g)?;
                let (batch, heads) = (*batch, *heads);
                let seq = rows / batch;
                let dh = d / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let (tq, tk, tv) = (&self.value(*q).data, &self.value(*k).data, &self.value(*v).data);
                let mut dq = vec![0.0; rows * d];
                let mut dk = vec![0.0; rows * d];
                let mut dv = vec![0.0; rows * d];
                let mut dp = vec![0.0; seq];
                for b in 0..batch {
                    for h in 0..heads {
                        let p_off = (b * heads + h) * seq * seq;
                        let col = h * dh;
                        for i in 0..seq {
                            let gi = &gd[(b * seq + i) * d + col..][..dh];
                            let p = &probs[p_off + i * seq..p_off + (i + 1) * seq];
                            for j in 0..seq {
                                let vj = &tv[(b * seq + j) * d + col..][..dh];
                                dp[j] = gi.iter().zip(vj).map(|(x, y)| x * y).sum();
                                let dvj = &mut dv[(b * seq + j) * d + col..][..dh];
                                for (o, x) in dvj.iter_mut().zip(gi) {
                                    *o += p[j] * x;
                                }
                            }
                            let dot: f64 = p.iter().zip(&dp).map(|(a, b)| a * b).sum();
                            for j in 0..seq {
                                let ds = p[j] * (dp[j] - dot) * scale;
                                let kj = &tk[(b * seq + j) * d + col..][..dh];
                                let qi = &tq[(b * seq + i) * d + col..][..dh];
                                let dqi = &mut dq[(b * seq + i) * d + col..][..dh];
                                for (o, x) in dqi.iter_mut().zip(kj) {
                                    *o += ds * x;
                                }
                                let dkj = &mut dk[(b * seq + j) * d + col..][..dh];
                                for (o, x) in dkj.iter_mut().zip(qi) {
                                    *o += ds * x;
                                }
                            }
                        }
                    }
                }
                self.accumulate(*q, dq);
                self.accumulate(*k, dk);
                self.accumulate(*v, dv);
            }
            Op::GatherRows { x, rows } => {
                let tx = self.value(*x);
                let c = tx.last_dim();
                let mut dx = vec![0.0; tx.numel()];
                for (k, &r) in rows.iter().enumerate() {
                    for (d, s) in dx[r * c..(r + 1) * c].iter_mut().zip(&gd[k * c..(k + 1) * c]) {
                        *d += s;
                    }
                }
                self.accumulate(*x, dx);
            }
            Op::SliceCols { x, start } => {
                let tx = self.value(*x);
                let (r, c) = (tx.shape[0], tx.shape[1]);
                let w = g.shape[1];
                let mut dx = vec![0.0; r * c];
                for i in 0..r {
                    dx[i * c + start..i * c + start + w].copy_from_slice(&gd[i * w..(i + 1) * w]);
                }
                self.accumulate(*x, dx);
            }
            Op::ScatterAdd { base, src, rows, col } => {
                if self.wants(*src) {
                    let bc = g.shape[1];
                    let sc = self.value(*src).shape[1];
                    let mut ds = Vec::with_capacity(rows.len() * sc);
                    for &r in rows {
                        ds.extend_from_slice(&gd[r * bc + col..r * bc + col + sc]);
                    }
                    self.accumulate(*src, ds);
                }
                self.accumulate(*base, gd.clone());
            }
            Op::ConcatRows(a, b) => {
                let na = self.value(*a).numel();
                self.accumulate(*a, gd[..na].to_vec());
                self.accumulate(*b, gd[na..].to_vec());
            }
            Op::Pick { x, index } => {
                let mut dx = vec![0.0; self.value(*x).numel()];
                dx[*index] = gd[0];
                self.accumulate(*x, dx);
            }
            Op::Sum(x) => {
                let n = self.value(*x).numel();
                self.accumulate(*x, vec![gd[0]; n]);
            }
            Op::L1Mean(a, b) => {
                let (ad, bd) = (&self.value(*a).data, &self.value(*b).data);
                let scale = gd[0] / ad.len() as f64;
                let da: Vec<f64> = ad
                    .iter()
                    .zip(bd)
                    .map(|(x, y)| {
                        let diff = x - y;
                        if diff > 0.0 {
                            scale
                        } else if diff < 0.0 {
                            -scale
                        } else {
                            0.0
                        }
                    })
                    .collect();
                if self.wants(*b) {
                    self.accumulate(*b, da.iter().map(|v| -v).collect());
                }
                self.accumulate(*a, da);
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let n = labels.len();
                let c = probs.len() / n;
                let s = gd[0] / n as f64;
                let mut dl: Vec<f64> = probs.iter().map(|p| p * s).collect();
                for (r, &y) in labels.iter().enumerate() {
                    dl[r * c + y] -= s;
                }
                self.accumulate(*logits, dl);
            }
            Op::BceWithLogits { logits, targets } => {
                let s = gd[0] / targets.len() as f64;
                let xd = &self.value(*logits).data;
                let dl = xd
                    .iter()
                    .zip(targets)
                    .map(|(&x, &y)| (1.0 / (1.0 + (-x).exp()) - y) * s)
                    .collect();
                self.accumulate(*logits, dl);
            }
        }
        self.nodes[i].op = op;
        Ok(())
    }
}

/// Validates that a tensor computed from finite inputs stayed finite.
pub fn ensure_finite(t: &Tensor, what: &str) -> Result<()> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(Error::Evaluation(format!("{what} is not finite")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Central-difference check of `f` over every leaf in `inputs`.
    fn fd_check(inputs: &[Tensor], f: impl Fn(&mut Tape, &[Var]) -> Var) -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
        let out = f(&mut tape, &vars);
        tape.backward(out).unwrap();
        let eval = |ins: &[Tensor]| {
            let mut t = Tape::new();
            let vs: Vec<Var> = ins.iter().map(|x| t.leaf(x.clone(), false)).collect();
            let o = f(&mut t, &vs);
            t.value(o).item()
        };
        let h = 1e-6;
        let mut worst: f64 = 0.0;
        for (vi, inp) in inputs.iter().enumerate() {
            let analytic = tape.grad(vars[vi]).unwrap().clone();
            for c in 0..inp.numel() {
                let mut plus = inputs.to_vec();
                plus[vi].data_mut()[c] += h;
                let mut minus = inputs.to_vec();
                minus[vi].data_mut()[c] -= h;
                let num = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let a = analytic.data()[c];
                worst = worst.max((a - num).abs() / (a.abs() + num.abs() + 1e-12));
            }
        }
        worst
    }

    #[test]
    fn matmul_hand_cases() {
        let id = Tensor::from_rows(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let col = Tensor::from_rows(&[&[3.0], &[4.0]]);
        assert_eq!(id.matmul(&col).unwrap(), col);
        let row = Tensor::from_rows(&[&[1.0, 2.0]]);
        assert_eq!(row.matmul(&col).unwrap().data(), &[11.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 3]);
        let err = a.matmul(&b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("x [2, 3]"), "{err}");
        let mut tape = Tape::new();
        let (va, vb) = (tape.leaf(a, false), tape.leaf(b, false));
        assert!(matches!(tape.matmul(va, vb), Err(Error::Dimension(_))));
    }

    #[test]
    fn matmul_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = rand_tensor(&mut rng, &[3, 4]);
        let b = rand_tensor(&mut rng, &[4, 2]);
        let err = fd_check(&[a.clone(), b.clone()], |t, v| {
            let m = t.matmul(v[0], v[1]).unwrap();
            t.sum(m)
        });
        assert!(err < 1e-6, "{err}");
        let bt = b.transpose().unwrap();
        let err = fd_check(&[a, bt], |t, v| {
            let m = t.matmul_t(v[0], v[1]).unwrap();
            let sq = t.mul(m, m).unwrap();
            t.sum(sq)
        });
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn layer_norm_hand_cases() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![5.0; 4]), false);
        let g = tape.leaf(Tensor::vector(vec![1.0; 4]), false);
        let b = tape.leaf(Tensor::zeros(&[4]), false);
        let y = tape.layer_norm(x, g, b, 1e-5).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0; 4]);

        let x = tape.leaf(Tensor::vector(vec![1.0, -1.0]), false);
        let g = tape.leaf(Tensor::vector(vec![1.0; 2]), false);
        let b = tape.leaf(Tensor::zeros(&[2]), false);
        let y = tape.layer_norm(x, g, b, 1e-300).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, -1.0]);
    }

    #[test]
    fn layer_norm_rejects_short_axis() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0]), false);
        let g = tape.leaf(Tensor::vector(vec![1.0]), false);
        let b = tape.leaf(Tensor::vector(vec![0.0]), false);
        assert!(matches!(tape.layer_norm(x, g, b, 1e-5), Err(Error::Dimension(_))));
    }

    #[test]
    fn layer_norm_normalizes_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut tape = Tape::new();
        let x = tape.leaf(rand_tensor(&mut rng, &[5, 16]).map(|v| 10.0 * v + 3.0), false);
        let g = tape.leaf(Tensor::vector(vec![1.0; 16]), false);
        let b = tape.leaf(Tensor::zeros(&[16]), false);
        let y = tape.layer_norm(x, g, b, 1e-12).unwrap();
        for r in 0..5 {
            let row = tape.value(y).row(r);
            let mu = row.iter().sum::<f64>() / 16.0;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / 16.0;
            assert!(mu.abs() < 1e-10);
            assert!((var - 1.0).abs() < 1e-8);
        }
    }

    #[test]
    fn layer_norm_gradient_matches_finite_differences() {
        for seed in 0..10 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = rand_tensor(&mut rng, &[2, 8]);
            let g = rand_tensor(&mut rng, &[8]);
            let b = rand_tensor(&mut rng, &[8]);
            let w = rand_tensor(&mut rng, &[2, 8]);
            let err = fd_check(&[x, g, b, w], |t, v| {
                let y = t.layer_norm(v[0], v[1], v[2], 1e-5).unwrap();
                let p = t.mul(y, v[3]).unwrap();
                t.sum(p)
            });
            assert!(err < 1e-5, "seed {seed}: {err}");
        }
    }

    #[test]
    fn softmax_hand_cases() {
        let mut tape = Tape::new();
        for (input, expected) in [
            (vec![0.0, 0.0], vec![0.5, 0.5]),
            (vec![1000.0, 1000.0], vec![0.5, 0.5]),
            (
                vec![1f64.ln(), 2f64.ln(), 3f64.ln()],
                vec![1.0 / 6.0, 2.0 / 6.0, 3.0 / 6.0],
            ),
        ] {
            let x = tape.leaf(Tensor::vector(input), false);
            let y = tape.softmax(x);
            let got = tape.value(y);
            for (a, b) in got.data().iter().zip(&expected) {
                assert!((a - b).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut tape = Tape::new();
        let x = tape.leaf(rand_tensor(&mut rng, &[6, 9]).map(|v| 50.0 * v), false);
        let y = tape.softmax(x);
        for r in 0..6 {
            let s: f64 = tape.value(y).row(r).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
            assert!(tape.value(y).row(r).iter().all(|&p| p > 0.0 && p < 1.0));
        }
    }

    #[test]
    fn backward_quadratic_and_unreachable() {
        let mut tape = Tape::new();
        let w = tape.leaf(Tensor::vector(vec![1.0, 2.0, 3.0]), true);
        let u = tape.leaf(Tensor::vector(vec![4.0, 5.0]), true);
        let sq = tape.mul(w, w).unwrap();
        let loss = tape.sum(sq);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(w).unwrap().data(), &[2.0, 4.0, 6.0]);
        assert_eq!(tape.grad(u).unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let w = tape.leaf(Tensor::vector(vec![1.0, 2.0]), true);
        let y = tape.scale(w, 2.0);
        assert!(matches!(tape.backward(y), Err(Error::Contract(_))));
    }

    #[test]
    fn elementwise_and_structural_gradients() {
        for seed in 0..10 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let a = rand_tensor(&mut rng, &[4, 6]);
            let b = rand_tensor(&mut rng, &[4, 6]);
            let bias = rand_tensor(&mut rng, &[6]);
            let tile = rand_tensor(&mut rng, &[2, 6]);
            let s = rand_tensor(&mut rng, &[1]);
            let w = rand_tensor(&mut rng, &[3, 6]);
            let err = fd_check(&[a, b, bias, tile, s, w], |t, v| {
                let x = t.add(v[0], v[1]).unwrap();
                let x = t.sub(x, v[1]).unwrap();
                let x = t.mul(x, v[1]).unwrap();
                let x = t.add_bias(x, v[2]).unwrap();
                let x = t.add_tiled(x, v[3]).unwrap();
                let x = t.scale_by(x, v[4]).unwrap();
                let x = t.gelu(x);
                let g = t.gather_rows(x, &[3, 0, 3]).unwrap();
                let g = t.slice_cols(g, 1, 4).unwrap();
                let g = t.gelu(g);
                let x = t.scatter_add(x, g, &[1, 2, 2], 2).unwrap();
                let x = t.concat_rows(x, v[5]).unwrap();
                let x = t.scale(x, 0.7);
                let sm = t.softmax(x);
                let ls = t.log_softmax(x);
                let p = t.mul(sm, ls).unwrap();
                let e = t.sum(p);
                let k = t.pick(x, 5).unwrap();
                let e = t.add(e, k).unwrap();
                let m = t.mean(x);
                t.add(e, m).unwrap()
            });
            assert!(err < 1e-4, "seed {seed}: {err}");
        }
    }

    #[test]
    fn loss_primitive_gradients() {
        for seed in 0..10 {
            let mut rng = ChaCha8Rng::seed_from_u64(200 + seed);
            let a = rand_tensor(&mut rng, &[3, 5]);
            let b = rand_tensor(&mut rng, &[3, 5]);
            let err = fd_check(&[a.clone(), b], |t, v| t.l1_mean(v[0], v[1]).unwrap());
            assert!(err < 1e-6, "seed {seed}: {err}");
            let err = fd_check(&[a.clone()], |t, v| t.cross_entropy(v[0], &[0, 4, 2]).unwrap());
            assert!(err < 1e-6, "seed {seed}: {err}");
            let targets: Vec<f64> = (0..15).map(|i| (i % 2) as f64).collect();
            let err = fd_check(&[a.clone()], |t, v| t.bce_with_logits(v[0], &targets).unwrap());
            assert!(err < 1e-6, "seed {seed}: {err}");
            let err = fd_check(&[a.map(|x| x + 0.5 * x.signum())], |t, v| {
                let r = t.relu(v[0]);
                let s = t.mul(r, r).unwrap();
                t.sum(s)
            });
            assert!(err < 1e-6, "seed {seed}: {err}");
        }
    }

    #[test]
    fn l1_subgradient_is_zero_at_tie() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::vector(vec![1.0, 2.0]), true);
        let b = tape.leaf(Tensor::vector(vec![1.0, 0.0]), false);
        let l = tape.l1_mean(a, b).unwrap();
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(a).unwrap().data(), &[0.0, 0.5]);
    }

    #[test]
    fn attention_gradient_matches_finite_differences() {
        for seed in 0..10 {
            let mut rng = ChaCha8Rng::seed_from_u64(300 + seed);
            let q = rand_tensor(&mut rng, &[6, 4]);
            let k = rand_tensor(&mut rng, &[6, 4]);
            let v = rand_tensor(&mut rng, &[6, 4]);
            let w = rand_tensor(&mut rng, &[6, 4]);
            let err = fd_check(&[q, k, v, w], |t, x| {
                let o = t.attention(x[0], x[1], x[2], 2, 2).unwrap();
                let p = t.mul(o, x[3]).unwrap();
                t.sum(p)
            });
            assert!(err < 1e-5, "seed {seed}: {err}");
        }
    }

    #[test]
    fn attention_single_key_copies_value() {
        // seq of one token: attention weights are exactly 1.
        let mut tape = Tape::new();
        let q = tape.leaf(Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]), false);
        let v = tape.leaf(Tensor::from_rows(&[&[5.0, 6.0], &[7.0, 8.0]]), false);
        let o = tape.attention(q, q, v, 2, 1).unwrap();
        assert_eq!(tape.value(o).data(), &[5.0, 6.0, 7.0, 8.0]);
    }

    #[test]
    fn forward_is_deterministic() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            let mut tape = Tape::new();
            let x = tape.leaf(rand_tensor(&mut rng, &[8, 8]), false);
            let w = tape.leaf(rand_tensor(&mut rng, &[8, 8]), false);
            let y = tape.matmul(x, w).unwrap();
            let y = tape.attention(y, y, y, 2, 2).unwrap();
            tape.value(y).clone()
        };
        let (a, b) = (run(), run());
        assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}
