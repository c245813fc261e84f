//! Dense row-major f64 tensors and the pure forward operations built on them.
//!
//! Every operation validates shapes and rejects non-finite results: a NaN or
//! Inf anywhere is a contract violation surfaced as [`NumericsError::NonFinite`],
//! never silently propagated.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum NumericsError {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("loss must be a scalar, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("invalid argument to {op}: {detail}")]
    InvalidArgument { op: &'static str, detail: String },
}

pub type Result<T, E = NumericsError> = std::result::Result<T, E>;

/// Dense tensor: row-major `data` with `shape` whose product equals `data.len()`.
///
/// Tensors are immutable once produced by an operation; all ops allocate
/// fresh outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(NumericsError::ShapeMismatch {
                op: "Tensor::new",
                detail: format!("shape {:?} implies {} elements, data has {}", shape, numel, data.len()),
            });
        }
        let t = Tensor { shape, data };
        t.ensure_finite("Tensor::new")?;
        Ok(t)
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor { shape, data: vec![0.0; numel] }
    }

    pub fn full(shape: Vec<usize>, value: f64) -> Self {
        let numel = shape.iter().product();
        Tensor { shape, data: vec![value; numel] }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor { shape: vec![1, 1], data: vec![value] }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            if row.len() != c {
                return Err(NumericsError::ShapeMismatch {
                    op: "from_rows",
                    detail: format!("ragged rows: expected {}, got {}", c, row.len()),
                });
            }
            data.extend_from_slice(row);
        }
        Tensor::new(vec![r, c], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Number of rows when viewed as a matrix (first dimension).
    pub fn rows(&self) -> usize {
        *self.shape.first().unwrap_or(&0)
    }

    /// Number of columns when viewed as a matrix (product of trailing dims).
    pub fn cols(&self) -> usize {
        if self.shape.len() <= 1 {
            if self.shape.is_empty() { 0 } else { 1 }
        } else {
            self.shape[1..].iter().product()
        }
    }

    pub fn is_matrix(&self) -> bool {
        self.shape.len() == 2
    }

    pub fn is_scalar(&self) -> bool {
        self.numel() == 1
    }

    pub fn scalar_value(&self) -> Result<f64> {
        if !self.is_scalar() {
            return Err(NumericsError::NonScalarLoss { shape: self.shape.clone() });
        }
        Ok(self.data[0])
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        debug_assert!(self.is_matrix());
        self.data[r * self.shape[1] + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn ensure_finite(&self, op: &'static str) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(NumericsError::NonFinite { op })
        }
    }

    fn same_shape(&self, other: &Tensor, op: &'static str) -> Result<()> {
        if self.shape != other.shape {
            return Err(NumericsError::ShapeMismatch {
                op,
                detail: format!("{:?} vs {:?}", self.shape, other.shape),
            });
        }
        Ok(())
    }

    fn map_unary(&self, op: &'static str, f: impl Fn(f64) -> f64) -> Result<Tensor> {
        let data: Vec<f64> = self.data.iter().map(|&x| f(x)).collect();
        let t = Tensor { shape: self.shape.clone(), data };
        t.ensure_finite(op)?;
        Ok(t)
    }

    fn zip_binary(&self, other: &Tensor, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.same_shape(other, op)?;
        let data: Vec<f64> = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        let t = Tensor { shape: self.shape.clone(), data };
        t.ensure_finite(op)?;
        Ok(t)
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_binary(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_binary(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_binary(other, "mul", |a, b| a * b)
    }

    pub fn max_elem(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_binary(other, "max_elem", f64::max)
    }

    /// `k * x + c` elementwise.
    pub fn affine(&self, k: f64, c: f64) -> Result<Tensor> {
        self.map_unary("affine", |x| k * x + c)
    }

    /// Broadcast-add a bias row `[1, C]` (or `[C]`) over every row of `[R, C]`.
    pub fn add_bias(&self, bias: &Tensor) -> Result<Tensor> {
        let c = self.cols();
        if bias.numel() != c {
            return Err(NumericsError::ShapeMismatch {
                op: "add_bias",
                detail: format!("bias has {} elements for {} columns", bias.numel(), c),
            });
        }
        let mut data = Vec::with_capacity(self.numel());
        for row in self.data.chunks_exact(c) {
            for (x, b) in row.iter().zip(&bias.data) {
                data.push(x + b);
            }
        }
        let t = Tensor { shape: self.shape.clone(), data };
        t.ensure_finite("add_bias")?;
        Ok(t)
    }

    pub fn sigmoid(&self) -> Result<Tensor> {
        self.map_unary("sigmoid", sigmoid)
    }

    pub fn softplus(&self) -> Result<Tensor> {
        self.map_unary("softplus", softplus)
    }

    pub fn gelu(&self) -> Result<Tensor> {
        self.map_unary("gelu", gelu)
    }

    pub fn powf_elem(&self, q: f64) -> Result<Tensor> {
        self.map_unary("powf", |x| x.powf(q))
    }

    pub fn transpose(&self) -> Result<Tensor> {
        if !self.is_matrix() {
            return Err(NumericsError::ShapeMismatch {
                op: "transpose",
                detail: format!("expected matrix, got {:?}", self.shape),
            });
        }
        let (r, c) = (self.shape[0], self.shape[1]);
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = self.data[i * c + j];
            }
        }
        Ok(Tensor { shape: vec![c, r], data })
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    /// Mean over groups of `group` consecutive rows: `[R, C] -> [R/group, C]`.
    pub fn row_group_mean(&self, group: usize) -> Result<Tensor> {
        let (r, c) = (self.rows(), self.cols());
        if group == 0 || r % group != 0 {
            return Err(NumericsError::InvalidArgument {
                op: "row_group_mean",
                detail: format!("{} rows not divisible by group {}", r, group),
            });
        }
        let out_rows = r / group;
        let inv = 1.0 / group as f64;
        let mut data = vec![0.0; out_rows * c];
        for g in 0..out_rows {
            for i in 0..group {
                let row = &self.data[(g * group + i) * c..(g * group + i + 1) * c];
                for (acc, x) in data[g * c..(g + 1) * c].iter_mut().zip(row) {
                    *acc += x;
                }
            }
        }
        for v in &mut data {
            *v *= inv;
        }
        let t = Tensor { shape: vec![out_rows, c], data };
        t.ensure_finite("row_group_mean")?;
        Ok(t)
    }

    /// Stack matrices vertically; all inputs must share a column count.
    pub fn concat_rows(parts: &[&Tensor]) -> Result<Tensor> {
        let c = parts
            .first()
            .ok_or(NumericsError::InvalidArgument { op: "concat_rows", detail: "empty input".into() })?
            .cols();
        let mut rows = 0;
        let mut data = Vec::new();
        for p in parts {
            if p.cols() != c {
                return Err(NumericsError::ShapeMismatch {
                    op: "concat_rows",
                    detail: format!("column mismatch: {} vs {}", p.cols(), c),
                });
            }
            rows += p.rows();
            data.extend_from_slice(&p.data);
        }
        Ok(Tensor { shape: vec![rows, c], data })
    }

    /// Stack matrices horizontally; all inputs must share a row count.
    pub fn concat_cols(parts: &[&Tensor]) -> Result<Tensor> {
        let r = parts
            .first()
            .ok_or(NumericsError::InvalidArgument { op: "concat_cols", detail: "empty input".into() })?
            .rows();
        let total_c: usize = parts.iter().map(|p| p.cols()).sum();
        let mut data = Vec::with_capacity(r * total_c);
        for i in 0..r {
            for p in parts {
                if p.rows() != r {
                    return Err(NumericsError::ShapeMismatch {
                        op: "concat_cols",
                        detail: format!("row mismatch: {} vs {}", p.rows(), r),
                    });
                }
                data.extend_from_slice(p.row(i));
            }
        }
        Ok(Tensor { shape: vec![r, total_c], data })
    }

    pub fn slice_rows(&self, r0: usize, r1: usize) -> Result<Tensor> {
        let (r, c) = (self.rows(), self.cols());
        if r0 > r1 || r1 > r {
            return Err(NumericsError::InvalidArgument {
                op: "slice_rows",
                detail: format!("range {}..{} out of {} rows", r0, r1, r),
            });
        }
        Ok(Tensor { shape: vec![r1 - r0, c], data: self.data[r0 * c..r1 * c].to_vec() })
    }

    pub fn slice_cols(&self, c0: usize, c1: usize) -> Result<Tensor> {
        let (r, c) = (self.rows(), self.cols());
        if c0 > c1 || c1 > c {
            return Err(NumericsError::InvalidArgument {
                op: "slice_cols",
                detail: format!("range {}..{} out of {} cols", c0, c1, c),
            });
        }
        let mut data = Vec::with_capacity(r * (c1 - c0));
        for i in 0..r {
            data.extend_from_slice(&self.data[i * c + c0..i * c + c1]);
        }
        Ok(Tensor { shape: vec![r, c1 - c0], data })
    }

    /// Gather elements at `(row, col)` positions into an `[n, 1]` column.
    pub fn gather(&self, positions: &[(usize, usize)]) -> Result<Tensor> {
        let (r, c) = (self.rows(), self.cols());
        let mut data = Vec::with_capacity(positions.len());
        for &(i, j) in positions {
            if i >= r || j >= c {
                return Err(NumericsError::InvalidArgument {
                    op: "gather",
                    detail: format!("position ({}, {}) out of {}x{}", i, j, r, c),
                });
            }
            data.push(self.data[i * c + j]);
        }
        Ok(Tensor { shape: vec![positions.len(), 1], data })
    }
}

/// Matrix product `[m, k] x [k, n] -> [m, n]`.
///
/// Inner loop runs over contiguous rows of `b` so the autovectorizer can
/// keep up; this is the single hottest routine in training.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if !a.is_matrix() || !b.is_matrix() || a.shape[1] != b.shape[0] {
        return Err(NumericsError::ShapeMismatch {
            op: "matmul",
            detail: format!("{:?} x {:?}", a.shape, b.shape),
        });
    }
    let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let a_row = &a.data[i * k..(i + 1) * k];
        let o_row = &mut out[i * n..(i + 1) * n];
        for (p, &a_ip) in a_row.iter().enumerate() {
            if a_ip == 0.0 {
                continue;
            }
            let b_row = &b.data[p * n..(p + 1) * n];
            for (o, &b_pj) in o_row.iter_mut().zip(b_row) {
                *o += a_ip * b_pj;
            }
        }
    }
    let t = Tensor { shape: vec![m, n], data: out };
    t.ensure_finite("matmul")?;
    Ok(t)
}

/// Row-wise softmax with max-subtraction; each output row sums to 1.
pub fn softmax_rows(x: &Tensor) -> Result<Tensor> {
    let c = x.cols();
    if c == 0 {
        return Err(NumericsError::InvalidArgument {
            op: "softmax_rows",
            detail: "need at least one column".into(),
        });
    }
    let mut data = Vec::with_capacity(x.numel());
    for row in x.data.chunks_exact(c) {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|&v| (v - m).exp()).collect();
        let z: f64 = exps.iter().sum();
        data.extend(exps.iter().map(|e| e / z));
    }
    let t = Tensor { shape: x.shape.clone(), data };
    t.ensure_finite("softmax_rows")?;
    Ok(t)
}

/// log(sum(exp(x))) over all elements, max-subtracted for stability.
pub fn logsumexp_all(x: &Tensor) -> Result<f64> {
    if x.numel() == 0 {
        return Err(NumericsError::InvalidArgument {
            op: "logsumexp_all",
            detail: "empty input".into(),
        });
    }
    let m = x.data.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let s: f64 = x.data.iter().map(|&v| (v - m).exp()).sum();
    Ok(m + s.ln())
}

/// Row-wise layer normalization with learnable per-column gain and bias.
pub fn layer_norm_rows(x: &Tensor, gain: &Tensor, bias: &Tensor, eps: f64) -> Result<Tensor> {
    let c = x.cols();
    if gain.numel() != c || bias.numel() != c {
        return Err(NumericsError::ShapeMismatch {
            op: "layer_norm_rows",
            detail: format!("gain/bias must have {} elements", c),
        });
    }
    let mut data = Vec::with_capacity(x.numel());
    for row in x.data.chunks_exact(c) {
        let mean = row.iter().sum::<f64>() / c as f64;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
        let inv = 1.0 / (var + eps).sqrt();
        for (j, &v) in row.iter().enumerate() {
            data.push((v - mean) * inv * gain.data[j] + bias.data[j]);
        }
    }
    let t = Tensor { shape: x.shape.clone(), data };
    t.ensure_finite("layer_norm_rows")?;
    Ok(t)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// softplus(z) = max(z, 0) + log1p(e^{-|z|}); stable for large |z|.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// tanh-approximated GELU; smooth everywhere so finite-difference checks hold.
pub fn gelu(x: f64) -> f64 {
    const K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (K * (x + 0.044715 * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    const K: f64 = 0.797_884_560_802_865_4;
    let inner = K * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    let d_inner = K * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * d_inner
}
