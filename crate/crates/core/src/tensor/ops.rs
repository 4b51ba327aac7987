use std::sync::Arc;

use super::{branch, Tensor};
use crate::error::{Error, Result};

/// Variance floor inside the layer-norm square root.
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Row normalization divides by `sqrt(|x|^2 + NORMALIZE_EPS^2)`, which equals
/// the L2 norm for any row that is not numerically zero and sends zero rows to
/// zero.
pub const NORMALIZE_EPS: f64 = 1e-12;

// GELU, tanh approximation: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3))).
const GELU_SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_CUBIC: f64 = 0.044_715;

/// Backward rule for a user-defined op: `(inputs, output, upstream grad)`
/// to one gradient buffer per input.
pub type BackwardFn = Arc<dyn Fn(&[Tensor], &Tensor, &[f64]) -> Vec<Vec<f64>> + Send + Sync>;

pub(crate) enum Op {
    MatMul,
    Transpose,
    Add,
    Sub,
    Mul,
    AddRow,
    Scale(f64),
    Relu,
    Gelu,
    Sigmoid,
    ClampMax(f64),
    SoftmaxRows,
    LayerNorm { xhat: Vec<f64>, inv_std: Vec<f64> },
    SliceCols { start: usize },
    ConcatShuffle,
    ConcatRows,
    ConcatCols,
    SelectRows(Vec<usize>),
    Reshape,
    SumAll,
    MeanAll,
    NormalizeRows { scale: Vec<f64> },
    DiagCrossEntropy { probs: Vec<f64> },
    /// `(output index, input index, weight)` routes of the pooled maxima.
    BlockPool { routes: Vec<(usize, usize, f64)> },
    /// `(negative index, positive index)` of every active hinge term.
    HardestHinge { active: Vec<(usize, usize)>, scale: f64 },
    Custom { name: String, backward: BackwardFn },
}

impl Op {
    pub(crate) fn name(&self) -> &str {
        match self {
            Op::MatMul => "matmul",
            Op::Transpose => "transpose",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::AddRow => "add_row",
            Op::Scale(_) => "scale",
            Op::Relu => "relu",
            Op::Gelu => "gelu",
            Op::Sigmoid => "sigmoid",
            Op::ClampMax(_) => "clamp_max",
            Op::SoftmaxRows => "softmax_rows",
            Op::LayerNorm { .. } => "layer_norm",
            Op::SliceCols { .. } => "clip_chunk",
            Op::ConcatShuffle => "concat_shuffle",
            Op::ConcatRows => "concat_rows",
            Op::ConcatCols => "concat_cols",
            Op::SelectRows(_) => "select_rows",
            Op::Reshape => "reshape",
            Op::SumAll => "sum",
            Op::MeanAll => "mean",
            Op::NormalizeRows { .. } => "normalize_rows",
            Op::DiagCrossEntropy { .. } => "diag_cross_entropy",
            Op::BlockPool { .. } => "block_pool",
            Op::HardestHinge { .. } => "hardest_hinge",
            Op::Custom { name, .. } => name,
        }
    }

    /// Gradient with respect to each input given the upstream gradient `g`.
    pub(crate) fn backward(&self, inputs: &[Tensor], out: &Tensor, g: &[f64]) -> Vec<Vec<f64>> {
        match self {
            Op::MatMul => {
                let (a, b) = (&inputs[0], &inputs[1]);
                let (m, k, n) = (a.rows(), a.cols(), b.cols());
                let mut ga = vec![0.0; m * k];
                let mut gb = vec![0.0; k * n];
                for i in 0..m {
                    for p in 0..k {
                        let mut acc = 0.0;
                        for j in 0..n {
                            acc += g[i * n + j] * b.data()[p * n + j];
                        }
                        ga[i * k + p] = acc;
                    }
                }
                for i in 0..m {
                    for p in 0..k {
                        let av = a.data()[i * k + p];
                        for j in 0..n {
                            gb[p * n + j] += av * g[i * n + j];
                        }
                    }
                }
                vec![ga, gb]
            }
            Op::Transpose => {
                let (r, c) = inputs[0].shape();
                let mut gx = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        gx[i * c + j] = g[j * r + i];
                    }
                }
                vec![gx]
            }
            Op::Add => vec![g.to_vec(), g.to_vec()],
            Op::Sub => vec![g.to_vec(), g.iter().map(|v| -v).collect()],
            Op::Mul => {
                let (a, b) = (inputs[0].data(), inputs[1].data());
                vec![
                    g.iter().zip(b).map(|(g, b)| g * b).collect(),
                    g.iter().zip(a).map(|(g, a)| g * a).collect(),
                ]
            }
            Op::AddRow => {
                let cols = inputs[1].cols();
                let mut gb = vec![0.0; cols];
                for (i, v) in g.iter().enumerate() {
                    gb[i % cols] += v;
                }
                vec![g.to_vec(), gb]
            }
            Op::Scale(s) => vec![g.iter().map(|v| v * s).collect()],
            Op::Relu => vec![g
                .iter()
                .zip(inputs[0].data())
                .map(|(g, x)| if *x > 0.0 { *g } else { 0.0 })
                .collect()],
            Op::Gelu => vec![g
                .iter()
                .zip(inputs[0].data())
                .map(|(g, &x)| g * gelu_grad(x))
                .collect()],
            Op::Sigmoid => vec![g
                .iter()
                .zip(out.data())
                .map(|(g, y)| g * y * (1.0 - y))
                .collect()],
            Op::ClampMax(hi) => vec![g
                .iter()
                .zip(inputs[0].data())
                .map(|(g, x)| if *x < *hi { *g } else { 0.0 })
                .collect()],
            Op::SoftmaxRows => {
                let cols = out.cols();
                let mut gx = vec![0.0; g.len()];
                for r in 0..out.rows() {
                    let y = &out.data()[r * cols..(r + 1) * cols];
                    let gr = &g[r * cols..(r + 1) * cols];
                    let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for c in 0..cols {
                        gx[r * cols + c] = y[c] * (gr[c] - dot);
                    }
                }
                vec![gx]
            }
            Op::LayerNorm { xhat, inv_std } => {
                let (rows, cols) = out.shape();
                let gain = inputs[1].data();
                let mut gx = vec![0.0; rows * cols];
                let mut ggain = vec![0.0; cols];
                let mut gbias = vec![0.0; cols];
                for r in 0..rows {
                    let off = r * cols;
                    let mut mean_d = 0.0;
                    let mut mean_dx = 0.0;
                    for c in 0..cols {
                        let gv = g[off + c];
                        ggain[c] += gv * xhat[off + c];
                        gbias[c] += gv;
                        let d = gv * gain[c];
                        mean_d += d;
                        mean_dx += d * xhat[off + c];
                    }
                    mean_d /= cols as f64;
                    mean_dx /= cols as f64;
                    for c in 0..cols {
                        let d = g[off + c] * gain[c];
                        gx[off + c] = inv_std[r] * (d - mean_d - xhat[off + c] * mean_dx);
                    }
                }
                vec![gx, ggain, gbias]
            }
            Op::SliceCols { start } => {
                let (rows, cols) = inputs[0].shape();
                let width = out.cols();
                let mut gx = vec![0.0; rows * cols];
                for r in 0..rows {
                    for c in 0..width {
                        gx[r * cols + start + c] = g[r * width + c];
                    }
                }
                vec![gx]
            }
            Op::ConcatShuffle => {
                let (rows, width) = inputs[0].shape();
                let mut ga = vec![0.0; rows * width];
                let mut gb = vec![0.0; rows * width];
                for r in 0..rows {
                    for j in 0..width {
                        ga[r * width + j] = g[r * 2 * width + 2 * j];
                        gb[r * width + j] = g[r * 2 * width + 2 * j + 1];
                    }
                }
                vec![ga, gb]
            }
            Op::ConcatRows => {
                let mut off = 0;
                inputs
                    .iter()
                    .map(|t| {
                        let part = g[off..off + t.len()].to_vec();
                        off += t.len();
                        part
                    })
                    .collect()
            }
            Op::ConcatCols => {
                let total = out.cols();
                let mut start = 0;
                inputs
                    .iter()
                    .map(|t| {
                        let w = t.cols();
                        let mut part = Vec::with_capacity(t.len());
                        for r in 0..t.rows() {
                            part.extend_from_slice(&g[r * total + start..r * total + start + w]);
                        }
                        start += w;
                        part
                    })
                    .collect()
            }
            Op::SelectRows(idx) => {
                let cols = out.cols();
                let mut gx = vec![0.0; inputs[0].len()];
                for (k, &r) in idx.iter().enumerate() {
                    for c in 0..cols {
                        gx[r * cols + c] += g[k * cols + c];
                    }
                }
                vec![gx]
            }
            Op::Reshape => vec![g.to_vec()],
            Op::SumAll => vec![vec![g[0]; inputs[0].len()]],
            Op::MeanAll => {
                let n = inputs[0].len() as f64;
                vec![vec![g[0] / n; inputs[0].len()]]
            }
            Op::NormalizeRows { scale } => {
                let cols = out.cols();
                let mut gx = vec![0.0; g.len()];
                for r in 0..out.rows() {
                    let y = &out.data()[r * cols..(r + 1) * cols];
                    let gr = &g[r * cols..(r + 1) * cols];
                    let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for c in 0..cols {
                        gx[r * cols + c] = (gr[c] - y[c] * dot) * scale[r];
                    }
                }
                vec![gx]
            }
            Op::DiagCrossEntropy { probs } => {
                let n = inputs[0].rows();
                let scale = g[0] / n as f64;
                let mut gx: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                for i in 0..n {
                    gx[i * n + i] -= scale;
                }
                vec![gx]
            }
            Op::BlockPool { routes } => {
                let mut gx = vec![0.0; inputs[0].len()];
                for &(o, i, w) in routes {
                    gx[i] += g[o] * w;
                }
                vec![gx]
            }
            Op::HardestHinge { active, scale } => {
                let mut gx = vec![0.0; inputs[0].len()];
                for &(neg, pos) in active {
                    gx[neg] += g[0] * scale;
                    gx[pos] -= g[0] * scale;
                }
                vec![gx]
            }
            Op::Custom { backward, .. } => backward(inputs, out, g),
        }
    }
}

fn gelu(x: f64) -> f64 {
    let u = GELU_SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x);
    let t = u.tanh();
    let du = GELU_SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_CUBIC * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

/// Logistic function, evaluated without overflow for large |x|.
pub(crate) fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tensor {
    fn unary(&self, op: Op, f: impl Fn(f64) -> f64) -> Tensor {
        let data = self.data().iter().map(|&v| f(v)).collect();
        Tensor::from_op(self.rows(), self.cols(), data, op, vec![self.clone()])
    }

    fn binary(&self, other: &Tensor, op: Op, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.same_shape(other, name)?;
        let data = self.data().iter().zip(other.data()).map(|(&a, &b)| f(a, b)).collect();
        Ok(Tensor::from_op(self.rows(), self.cols(), data, op, vec![self.clone(), other.clone()]))
    }

    /// Matrix product. Backward: `dA = G·Bᵀ`, `dB = Aᵀ·G`.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        if self.cols() != other.rows() {
            return Err(Error::Dimension {
                op: "matmul",
                lhs: self.shape(),
                rhs: other.shape(),
            });
        }
        let (m, k, n) = (self.rows(), self.cols(), other.cols());
        let (a, b) = (self.data(), other.data());
        let mut out = vec![0.0; m * n];
        if m > 0 && n > 0 && k > 0 {
            // SAFETY: both inputs are row-major `m×k` and `k×n` with lengths
            // checked at construction, and `out` holds exactly `m×n` values.
            unsafe {
                matrixmultiply::dgemm(
                    m,
                    k,
                    n,
                    1.0,
                    a.as_ptr(),
                    k as isize,
                    1,
                    b.as_ptr(),
                    n as isize,
                    1,
                    0.0,
                    out.as_mut_ptr(),
                    n as isize,
                    1,
                );
            }
        }
        Ok(Tensor::from_op(m, n, out, Op::MatMul, vec![self.clone(), other.clone()]))
    }

    pub fn transpose(&self) -> Tensor {
        let (r, c) = self.shape();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data()[i * c + j];
            }
        }
        Tensor::from_op(c, r, out, Op::Transpose, vec![self.clone()])
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, Op::Add, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, Op::Sub, "sub", |a, b| a - b)
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, Op::Mul, "mul", |a, b| a * b)
    }

    /// Adds a `1×cols` row vector to every row.
    pub fn add_row(&self, bias: &Tensor) -> Result<Tensor> {
        if bias.rows() != 1 || bias.cols() != self.cols() {
            return Err(Error::Dimension {
                op: "add_row",
                lhs: self.shape(),
                rhs: bias.shape(),
            });
        }
        let cols = self.cols();
        let data = self
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v + bias.data()[i % cols])
            .collect();
        Ok(Tensor::from_op(self.rows(), cols, data, Op::AddRow, vec![self.clone(), bias.clone()]))
    }

    pub fn scale(&self, s: f64) -> Tensor {
        self.unary(Op::Scale(s), |v| v * s)
    }

    pub fn relu(&self) -> Tensor {
        branch::note_mask("relu", self.data(), |v| v > 0.0);
        self.unary(Op::Relu, |v| v.max(0.0))
    }

    /// GELU activation, tanh approximation.
    pub fn gelu(&self) -> Tensor {
        self.unary(Op::Gelu, gelu)
    }

    /// Elementwise logistic `1 / (1 + e^{-x})`.
    pub fn sigmoid(&self) -> Tensor {
        self.unary(Op::Sigmoid, logistic)
    }

    /// Elementwise `min(x, hi)`.
    pub fn clamp_max(&self, hi: f64) -> Tensor {
        branch::note_mask("clamp_max", self.data(), |v| v < hi);
        self.unary(Op::ClampMax(hi), |v| v.min(hi))
    }

    /// Row-wise softmax, stabilized by subtracting each row's maximum.
    pub fn softmax_rows(&self) -> Result<Tensor> {
        let (rows, cols) = self.shape();
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            let x = self.row(r);
            if x.iter().any(|v| !v.is_finite()) {
                return Err(Error::numeric("softmax_rows", format!("non-finite row {r}")));
            }
            let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for c in 0..cols {
                let e = (x[c] - max).exp();
                out[r * cols + c] = e;
                total += e;
            }
            for v in &mut out[r * cols..(r + 1) * cols] {
                *v /= total;
            }
        }
        Ok(Tensor::from_op(rows, cols, out, Op::SoftmaxRows, vec![self.clone()]))
    }

    /// Per-row normalization to zero mean and unit variance followed by the
    /// affine map `gain ⊙ x̂ + bias`.
    pub fn layer_norm(&self, gain: &Tensor, bias: &Tensor) -> Result<Tensor> {
        let (rows, cols) = self.shape();
        if cols == 0 {
            return Err(Error::Dimension {
                op: "layer_norm",
                lhs: self.shape(),
                rhs: gain.shape(),
            });
        }
        for p in [gain, bias] {
            if p.shape() != (1, cols) {
                return Err(Error::Dimension {
                    op: "layer_norm",
                    lhs: self.shape(),
                    rhs: p.shape(),
                });
            }
        }
        let mut xhat = vec![0.0; rows * cols];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            let x = self.row(r);
            let mean = x.iter().sum::<f64>() / cols as f64;
            let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[r] = is;
            for c in 0..cols {
                let h = (x[c] - mean) * is;
                xhat[r * cols + c] = h;
                out[r * cols + c] = h * gain.data()[c] + bias.data()[c];
            }
        }
        Ok(Tensor::from_op(
            rows,
            cols,
            out,
            Op::LayerNorm { xhat, inv_std },
            vec![self.clone(), gain.clone(), bias.clone()],
        ))
    }

    /// Columns `[(i-1)·w, i·w)` with `w = cols / m`, for 1-based chunk `i`.
    pub fn clip_chunk(&self, i: usize, m: usize) -> Result<Tensor> {
        if m == 0 || self.cols() % m != 0 {
            return Err(Error::Config(format!(
                "chunk count {m} does not divide width {}",
                self.cols()
            )));
        }
        if i == 0 || i > m {
            return Err(Error::Config(format!("chunk index {i} outside 1..={m}")));
        }
        let width = self.cols() / m;
        let start = (i - 1) * width;
        self.slice_cols(start, width)
    }

    pub(crate) fn slice_cols(&self, start: usize, width: usize) -> Result<Tensor> {
        if start + width > self.cols() {
            return Err(Error::Dimension {
                op: "slice_cols",
                lhs: self.shape(),
                rhs: (start, width),
            });
        }
        let rows = self.rows();
        let mut out = Vec::with_capacity(rows * width);
        for r in 0..rows {
            out.extend_from_slice(&self.row(r)[start..start + width]);
        }
        Ok(Tensor::from_op(rows, width, out, Op::SliceCols { start }, vec![self.clone()]))
    }

    /// Concatenates `a` and `b` along columns and applies a group-2 channel
    /// shuffle: output column `2j` is `a[:, j]`, column `2j+1` is `b[:, j]`.
    pub fn concat_shuffle(&self, other: &Tensor) -> Result<Tensor> {
        self.same_shape(other, "concat_shuffle")?;
        let (rows, width) = self.shape();
        let mut out = vec![0.0; rows * 2 * width];
        for r in 0..rows {
            for j in 0..width {
                out[r * 2 * width + 2 * j] = self.data()[r * width + j];
                out[r * 2 * width + 2 * j + 1] = other.data()[r * width + j];
            }
        }
        Ok(Tensor::from_op(rows, 2 * width, out, Op::ConcatShuffle, vec![self.clone(), other.clone()]))
    }

    /// Inverse of [`Tensor::concat_shuffle`]: even columns, then odd columns.
    /// Untracked.
    pub fn unshuffle(&self) -> Result<(Tensor, Tensor)> {
        if self.cols() % 2 != 0 {
            return Err(Error::Config(format!("cannot unshuffle odd width {}", self.cols())));
        }
        let (rows, width) = (self.rows(), self.cols() / 2);
        let a = Tensor::from_fn(rows, width, |r, j| self.get(r, 2 * j));
        let b = Tensor::from_fn(rows, width, |r, j| self.get(r, 2 * j + 1));
        Ok((a, b))
    }

    /// Stacks tensors with equal column counts vertically.
    pub fn concat_rows(parts: &[Tensor]) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Validation("concat_rows of zero tensors".into()))?;
        let cols = first.cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            if p.cols() != cols {
                return Err(Error::Dimension {
                    op: "concat_rows",
                    lhs: first.shape(),
                    rhs: p.shape(),
                });
            }
            data.extend_from_slice(p.data());
            rows += p.rows();
        }
        Ok(Tensor::from_op(rows, cols, data, Op::ConcatRows, parts.to_vec()))
    }

    /// Joins tensors with equal row counts side by side.
    pub fn concat_cols(parts: &[Tensor]) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Validation("concat_cols of zero tensors".into()))?;
        let rows = first.rows();
        for p in parts {
            if p.rows() != rows {
                return Err(Error::Dimension {
                    op: "concat_cols",
                    lhs: first.shape(),
                    rhs: p.shape(),
                });
            }
        }
        let cols: usize = parts.iter().map(Tensor::cols).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for p in parts {
                data.extend_from_slice(p.row(r));
            }
        }
        Ok(Tensor::from_op(rows, cols, data, Op::ConcatCols, parts.to_vec()))
    }

    pub fn select_rows(&self, idx: &[usize]) -> Result<Tensor> {
        let cols = self.cols();
        let mut data = Vec::with_capacity(idx.len() * cols);
        for &r in idx {
            if r >= self.rows() {
                return Err(Error::Validation(format!(
                    "row index {r} out of range for {} rows",
                    self.rows()
                )));
            }
            data.extend_from_slice(self.row(r));
        }
        Ok(Tensor::from_op(idx.len(), cols, data, Op::SelectRows(idx.to_vec()), vec![self.clone()]))
    }

    /// Same row-major data viewed with a new shape.
    pub fn reshape(&self, rows: usize, cols: usize) -> Result<Tensor> {
        if rows * cols != self.len() {
            return Err(Error::Dimension {
                op: "reshape",
                lhs: self.shape(),
                rhs: (rows, cols),
            });
        }
        Ok(Tensor::from_op(rows, cols, self.data().to_vec(), Op::Reshape, vec![self.clone()]))
    }

    pub fn sum(&self) -> Tensor {
        let s = self.data().iter().sum();
        Tensor::from_op(1, 1, vec![s], Op::SumAll, vec![self.clone()])
    }

    pub fn mean(&self) -> Tensor {
        let s = self.data().iter().sum::<f64>() / self.len().max(1) as f64;
        Tensor::from_op(1, 1, vec![s], Op::MeanAll, vec![self.clone()])
    }

    /// Scales every row to unit L2 norm; numerically zero rows map to zero.
    pub fn normalize_rows(&self) -> Tensor {
        let (rows, cols) = self.shape();
        let mut out = vec![0.0; rows * cols];
        let mut scale = vec![0.0; rows];
        for r in 0..rows {
            let x = self.row(r);
            let sq: f64 = x.iter().map(|v| v * v).sum();
            let s = 1.0 / (sq + NORMALIZE_EPS * NORMALIZE_EPS).sqrt();
            scale[r] = s;
            for c in 0..cols {
                out[r * cols + c] = x[c] * s;
            }
        }
        Tensor::from_op(rows, cols, out, Op::NormalizeRows { scale }, vec![self.clone()])
    }

    /// Mean over rows of `-log softmax(row_i)[i]` for a square logit matrix,
    /// i.e. cross-entropy with the diagonal as target.
    pub fn diag_cross_entropy(&self) -> Result<Tensor> {
        let n = self.rows();
        if n == 0 || self.cols() != n {
            return Err(Error::Dimension {
                op: "diag_cross_entropy",
                lhs: self.shape(),
                rhs: (n, n),
            });
        }
        let mut probs = vec![0.0; n * n];
        let mut loss = 0.0;
        for i in 0..n {
            let x = self.row(i);
            if x.iter().any(|v| !v.is_finite()) {
                return Err(Error::numeric("diag_cross_entropy", format!("non-finite row {i}")));
            }
            let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let total: f64 = x.iter().map(|v| (v - max).exp()).sum();
            let lse = max + total.ln();
            loss += lse - x[i];
            for j in 0..n {
                probs[i * n + j] = (x[j] - lse).exp();
            }
        }
        loss /= n as f64;
        Ok(Tensor::from_op(1, 1, vec![loss], Op::DiagCrossEntropy { probs }, vec![self.clone()]))
    }

    /// Pools a matrix tiled into `row_blocks × col_blocks` blocks of
    /// `block_rows × block_cols`. Each output entry is the mean over valid
    /// columns of the block of the maximum over valid rows. Ties in the
    /// maximum go to the lowest row.
    pub fn block_max_mean_pool(
        &self,
        block_rows: usize,
        block_cols: usize,
        row_valid: &[bool],
        col_valid: &[bool],
    ) -> Result<Tensor> {
        let (rows, cols) = self.shape();
        if block_rows == 0
            || block_cols == 0
            || rows % block_rows != 0
            || cols % block_cols != 0
            || row_valid.len() != rows
            || col_valid.len() != cols
        {
            return Err(Error::Dimension {
                op: "block_max_mean_pool",
                lhs: self.shape(),
                rhs: (block_rows, block_cols),
            });
        }
        let (nb_r, nb_c) = (rows / block_rows, cols / block_cols);
        let mut out = vec![0.0; nb_r * nb_c];
        let mut routes = Vec::new();
        let mut winners = Vec::new();
        for k in 0..nb_r {
            let valid_rows: Vec<usize> = (k * block_rows..(k + 1) * block_rows)
                .filter(|&r| row_valid[r])
                .collect();
            for l in 0..nb_c {
                let valid_cols: Vec<usize> = (l * block_cols..(l + 1) * block_cols)
                    .filter(|&c| col_valid[c])
                    .collect();
                if valid_rows.is_empty() || valid_cols.is_empty() {
                    return Err(Error::Validation(format!(
                        "block ({k}, {l}) has no valid rows or columns to pool"
                    )));
                }
                let w = 1.0 / valid_cols.len() as f64;
                let mut acc = 0.0;
                for &c in &valid_cols {
                    let mut best = valid_rows[0];
                    for &r in &valid_rows[1..] {
                        if self.data()[r * cols + c] > self.data()[best * cols + c] {
                            best = r;
                        }
                    }
                    acc += self.data()[best * cols + c];
                    routes.push((k * nb_c + l, best * cols + c, w));
                    winners.push(best);
                }
                out[k * nb_c + l] = acc * w;
            }
        }
        branch::note("block_pool", &winners);
        Ok(Tensor::from_op(nb_r, nb_c, out, Op::BlockPool { routes }, vec![self.clone()]))
    }

    /// Hinge triplet loss with in-batch hardest negatives on a square
    /// similarity matrix whose diagonal holds the positives:
    /// mean over `k` of `[γ + max_{l≠k} S[k,l] − S[k,k]]₊ + [γ + max_{k'≠k} S[k',k] − S[k,k]]₊`.
    /// Ties in the hardest negative go to the lowest index.
    pub fn hardest_negative_hinge(&self, margin: f64) -> Result<Tensor> {
        let n = self.rows();
        if self.cols() != n || n < 2 {
            return Err(Error::Dimension {
                op: "hardest_negative_hinge",
                lhs: self.shape(),
                rhs: (n, n),
            });
        }
        let s = |r: usize, c: usize| self.data()[r * n + c];
        let mut active = Vec::new();
        let mut decisions = Vec::with_capacity(4 * n);
        let mut total = 0.0;
        for k in 0..n {
            let pos = s(k, k);
            let hard_l = (0..n).filter(|&l| l != k).fold(None, |best: Option<usize>, l| match best {
                Some(b) if s(k, b) >= s(k, l) => Some(b),
                _ => Some(l),
            });
            let hard_k = (0..n).filter(|&r| r != k).fold(None, |best: Option<usize>, r| match best {
                Some(b) if s(b, k) >= s(r, k) => Some(b),
                _ => Some(r),
            });
            let (hl, hk) = (hard_l.unwrap_or(0), hard_k.unwrap_or(0));
            let row_term = margin + s(k, hl) - pos;
            let col_term = margin + s(hk, k) - pos;
            decisions.extend([hl, hk, usize::from(row_term > 0.0), usize::from(col_term > 0.0)]);
            if row_term > 0.0 {
                total += row_term;
                active.push((k * n + hl, k * n + k));
            }
            if col_term > 0.0 {
                total += col_term;
                active.push((hk * n + k, k * n + k));
            }
        }
        branch::note("hardest_hinge", &decisions);
        let scale = 1.0 / n as f64;
        Ok(Tensor::from_op(
            1,
            1,
            vec![total * scale],
            Op::HardestHinge { active, scale },
            vec![self.clone()],
        ))
    }

    /// Records an op with caller-supplied output values and backward rule.
    /// Mostly useful for testing the differentiation machinery itself.
    pub fn custom(name: &str, inputs: &[Tensor], output: Tensor, backward: BackwardFn) -> Tensor {
        Tensor::from_op(
            output.rows(),
            output.cols(),
            output.data().to_vec(),
            Op::Custom {
                name: name.to_string(),
                backward,
            },
            inputs.to_vec(),
        )
    }
}
