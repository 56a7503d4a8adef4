//! Small dense-tensor toolkit with hand-written backward passes.
//!
//! Only what the utility estimators need: row-major `f64` matrices, affine
//! layers, ReLU, masked softmax attention, layer normalization, Adam, a
//! finite-difference gradient checker and a text checkpoint format.

use std::fmt::Write as _;

use rand::seq::index::sample;

use crate::error::{shape_err, Error, Result};
use crate::rng;

/// Row-major matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor2 {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Tensor2 {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self { rows, cols, data: vec![value; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(n, n);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(shape_err("from_vec", format!("{} values for {rows}x{cols}", data.len())));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(shape_err("from_rows", "ragged rows"));
        }
        Ok(Self { rows: rows.len(), cols, data: rows.concat() })
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

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, value: f64) {
        self.data[i * self.cols + j] = value;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// `self * other`.
    pub fn matmul(&self, other: &Tensor2) -> Result<Tensor2> {
        if self.cols != other.rows {
            return Err(shape_err("matmul", format!("{:?} x {:?}", self.shape(), other.shape())));
        }
        let mut out = Tensor2::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for (k, &a) in self.row(i).iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                for (o, &b) in out_row.iter_mut().zip(other.row(k)) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// `self^T * other`.
    pub fn matmul_tn(&self, other: &Tensor2) -> Result<Tensor2> {
        if self.rows != other.rows {
            return Err(shape_err("matmul_tn", format!("{:?}^T x {:?}", self.shape(), other.shape())));
        }
        let mut out = Tensor2::zeros(self.cols, other.cols);
        for k in 0..self.rows {
            let b_row = other.row(k);
            for (i, &a) in self.row(k).iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                for (o, &b) in out.row_mut(i).iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// `self * other^T`.
    pub fn matmul_nt(&self, other: &Tensor2) -> Result<Tensor2> {
        if self.cols != other.cols {
            return Err(shape_err("matmul_nt", format!("{:?} x {:?}^T", self.shape(), other.shape())));
        }
        let mut out = Tensor2::zeros(self.rows, other.rows);
        for i in 0..self.rows {
            let a = self.row(i);
            for j in 0..other.rows {
                out.data[i * other.rows + j] = dot(a, other.row(j));
            }
        }
        Ok(out)
    }

    pub fn transpose(&self) -> Tensor2 {
        let mut out = Tensor2::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.get(i, j);
            }
        }
        out
    }

    pub fn add(&self, other: &Tensor2) -> Result<Tensor2> {
        let mut out = self.clone();
        out.add_assign(other)?;
        Ok(out)
    }

    pub fn add_assign(&mut self, other: &Tensor2) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(shape_err("add", format!("{:?} + {:?}", self.shape(), other.shape())));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn scale(&self, factor: f64) -> Tensor2 {
        self.map(|x| x * factor)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor2 {
        Tensor2 { rows: self.rows, cols: self.cols, data: self.data.iter().map(|&x| f(x)).collect() }
    }

    /// Add a `1 x cols` row to every row.
    pub fn add_row(&self, bias: &Tensor2) -> Result<Tensor2> {
        if bias.rows != 1 || bias.cols != self.cols {
            return Err(shape_err("add_row", format!("{:?} + row {:?}", self.shape(), bias.shape())));
        }
        let mut out = self.clone();
        for i in 0..out.rows {
            for (o, b) in out.row_mut(i).iter_mut().zip(&bias.data) {
                *o += b;
            }
        }
        Ok(out)
    }

    /// Column sums as a `1 x cols` row.
    pub fn sum_rows(&self) -> Tensor2 {
        let mut out = Tensor2::zeros(1, self.cols);
        for i in 0..self.rows {
            for (o, x) in out.data.iter_mut().zip(self.row(i)) {
                *o += x;
            }
        }
        out
    }

    /// Columns `start..start + len`.
    pub fn col_block(&self, start: usize, len: usize) -> Tensor2 {
        let mut out = Tensor2::zeros(self.rows, len);
        for i in 0..self.rows {
            out.row_mut(i).copy_from_slice(&self.row(i)[start..start + len]);
        }
        out
    }

    pub fn set_col_block(&mut self, start: usize, block: &Tensor2) {
        for i in 0..self.rows {
            self.row_mut(i)[start..start + block.cols].copy_from_slice(block.row(i));
        }
    }

    /// Horizontal concatenation.
    pub fn hcat(&self, other: &Tensor2) -> Result<Tensor2> {
        if self.rows != other.rows {
            return Err(shape_err("hcat", format!("{:?} | {:?}", self.shape(), other.shape())));
        }
        let mut out = Tensor2::zeros(self.rows, self.cols + other.cols);
        out.set_col_block(0, self);
        out.set_col_block(self.cols, other);
        Ok(out)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `x W + b`.
pub fn dense_forward(x: &Tensor2, w: &Tensor2, b: &Tensor2) -> Result<Tensor2> {
    x.matmul(w)?.add_row(b)
}

/// Gradients of a dense layer: `(dx, dW, db)`.
pub fn dense_backward(x: &Tensor2, w: &Tensor2, dy: &Tensor2) -> Result<(Tensor2, Tensor2, Tensor2)> {
    Ok((dy.matmul_nt(w)?, x.matmul_tn(dy)?, dy.sum_rows()))
}

pub fn relu(x: &Tensor2) -> Tensor2 {
    x.map(|v| v.max(0.0))
}

/// Gradient through ReLU given the pre-activation.
pub fn relu_backward(pre: &Tensor2, dy: &Tensor2) -> Tensor2 {
    let mut out = dy.clone();
    for (g, &p) in out.data.iter_mut().zip(&pre.data) {
        if p <= 0.0 {
            *g = 0.0;
        }
    }
    out
}

/// Boolean attention mask; `true` means the key is visible to the query.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    rows: usize,
    cols: usize,
    data: Vec<bool>,
}

impl Mask {
    pub fn new(rows: usize, cols: usize, value: bool) -> Self {
        Self { rows, cols, data: vec![value; rows * cols] }
    }

    pub fn from_rows(rows: &[Vec<bool>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(shape_err("mask", "ragged rows"));
        }
        Ok(Self { rows: rows.len(), cols, data: rows.concat() })
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn get(&self, i: usize, j: usize) -> bool {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, value: bool) {
        self.data[i * self.cols + j] = value;
    }
}

/// Row-wise softmax over visible entries. Hidden entries get weight 0; a row
/// with nothing visible is all zeros.
pub fn masked_softmax(scores: &Tensor2, mask: &Mask) -> Tensor2 {
    let mut out = Tensor2::zeros(scores.rows, scores.cols);
    for i in 0..scores.rows {
        let visible = || (0..scores.cols).filter(|&j| mask.get(i, j));
        let Some(max) = visible().map(|j| scores.get(i, j)).reduce(f64::max) else {
            continue;
        };
        let mut total = 0.0;
        for j in visible() {
            let e = (scores.get(i, j) - max).exp();
            out.set(i, j, e);
            total += e;
        }
        for x in out.row_mut(i) {
            *x /= total;
        }
    }
    out
}

/// Forward values kept for the attention backward pass.
#[derive(Clone, Debug)]
pub struct AttentionCache {
    pub weights: Tensor2,
    scale: f64,
}

/// Scaled dot-product attention `softmax(Q K^T / sqrt(d)) V` with masking.
pub fn attention(q: &Tensor2, k: &Tensor2, v: &Tensor2, mask: &Mask) -> Result<Tensor2> {
    Ok(attention_forward(q, k, v, mask)?.0)
}

pub fn attention_forward(q: &Tensor2, k: &Tensor2, v: &Tensor2, mask: &Mask) -> Result<(Tensor2, AttentionCache)> {
    let d = q.cols();
    if d == 0 {
        return Err(shape_err("attention", "key dimension is 0"));
    }
    if k.cols() != d || k.rows() != v.rows() || mask.shape() != (q.rows(), k.rows()) {
        return Err(shape_err(
            "attention",
            format!("Q {:?}, K {:?}, V {:?}, mask {:?}", q.shape(), k.shape(), v.shape(), mask.shape()),
        ));
    }
    let scale = 1.0 / (d as f64).sqrt();
    let scores = q.matmul_nt(k)?.scale(scale);
    let weights = masked_softmax(&scores, mask);
    let out = weights.matmul(v)?;
    Ok((out, AttentionCache { weights, scale }))
}

/// Gradients `(dQ, dK, dV)` of scaled dot-product attention.
pub fn attention_backward(
    q: &Tensor2,
    k: &Tensor2,
    v: &Tensor2,
    cache: &AttentionCache,
    dout: &Tensor2,
) -> Result<(Tensor2, Tensor2, Tensor2)> {
    let p = &cache.weights;
    let dv = p.matmul_tn(dout)?;
    let dp = dout.matmul_nt(v)?;
    let mut ds = Tensor2::zeros(p.rows(), p.cols());
    for i in 0..p.rows() {
        let inner = dot(p.row(i), dp.row(i));
        for j in 0..p.cols() {
            let pij = p.get(i, j);
            ds.set(i, j, pij * (dp.get(i, j) - inner) * cache.scale);
        }
    }
    Ok((ds.matmul(k)?, ds.matmul_tn(q)?, dv))
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct LayerNormCache {
    normalized: Tensor2,
    inv_std: Vec<f64>,
}

/// Per-row normalization followed by the affine map `gamma * x + beta`.
pub fn layer_norm(x: &Tensor2, gamma: &Tensor2, beta: &Tensor2) -> Result<(Tensor2, LayerNormCache)> {
    let d = x.cols();
    if gamma.shape() != (1, d) || beta.shape() != (1, d) {
        return Err(shape_err("layer_norm", format!("x {:?}, gamma {:?}, beta {:?}", x.shape(), gamma.shape(), beta.shape())));
    }
    let mut normalized = Tensor2::zeros(x.rows(), d);
    let mut inv_std = Vec::with_capacity(x.rows());
    let mut y = Tensor2::zeros(x.rows(), d);
    for i in 0..x.rows() {
        let row = x.row(i);
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
        let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        inv_std.push(is);
        for j in 0..d {
            let xh = (row[j] - mean) * is;
            normalized.set(i, j, xh);
            y.set(i, j, gamma.data[j] * xh + beta.data[j]);
        }
    }
    Ok((y, LayerNormCache { normalized, inv_std }))
}

/// Gradients `(dx, dgamma, dbeta)` of [`layer_norm`].
pub fn layer_norm_backward(cache: &LayerNormCache, gamma: &Tensor2, dy: &Tensor2) -> (Tensor2, Tensor2, Tensor2) {
    let (rows, d) = dy.shape();
    let mut dx = Tensor2::zeros(rows, d);
    let mut dgamma = Tensor2::zeros(1, d);
    let dbeta = dy.sum_rows();
    for i in 0..rows {
        let xh = cache.normalized.row(i);
        let g = dy.row(i);
        let dxh: Vec<f64> = g.iter().zip(&gamma.data).map(|(a, b)| a * b).collect();
        let mean_dxh = dxh.iter().sum::<f64>() / d as f64;
        let mean_dxh_xh = dot(&dxh, xh) / d as f64;
        for j in 0..d {
            dgamma.data[j] += g[j] * xh[j];
            dx.set(i, j, cache.inv_std[i] * (dxh[j] - mean_dxh - xh[j] * mean_dxh_xh));
        }
    }
    (dx, dgamma, dbeta)
}

/// Named parameter tensors in a fixed declaration order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ModelParams {
    names: Vec<String>,
    tensors: Vec<Tensor2>,
}

impl ModelParams {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor2) {
        let name = name.into();
        assert!(!self.names.contains(&name), "duplicate parameter `{name}`");
        self.names.push(name);
        self.tensors.push(tensor);
    }

    pub fn get(&self, name: &str) -> &Tensor2 {
        &self.tensors[self.index(name)]
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor2 {
        let i = self.index(name);
        &mut self.tensors[i]
    }

    pub fn contains(&self, name: &str) -> bool {
        self.names.iter().any(|n| n == name)
    }

    fn index(&self, name: &str) -> usize {
        self.names
            .iter()
            .position(|n| n == name)
            .unwrap_or_else(|| panic!("unknown parameter `{name}`"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor2)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    /// `(name, rows, cols)` per tensor.
    pub fn layout(&self) -> Vec<(String, usize, usize)> {
        self.iter().map(|(n, t)| (n.to_string(), t.rows(), t.cols())).collect()
    }

    pub fn flat_len(&self) -> usize {
        self.tensors.iter().map(|t| t.data.len()).sum()
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.tensors.iter().flat_map(|t| t.data.iter().copied()).collect()
    }

    pub fn unflatten(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.flat_len() {
            return Err(shape_err("unflatten", format!("{} values for {} parameters", flat.len(), self.flat_len())));
        }
        let mut offset = 0;
        for t in &mut self.tensors {
            let len = t.data.len();
            t.data.copy_from_slice(&flat[offset..offset + len]);
            offset += len;
        }
        Ok(())
    }

    /// Copy with every tensor zeroed; used as a gradient accumulator.
    pub fn zeros_like(&self) -> Self {
        Self {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(|t| Tensor2::zeros(t.rows, t.cols)).collect(),
        }
    }

    /// Add `grad` into the tensor called `name`.
    pub fn accumulate(&mut self, name: &str, grad: &Tensor2) -> Result<()> {
        self.get_mut(name).add_assign(grad)
    }
}

/// Adam optimizer over a flat parameter vector.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self::with_lr(len, 1e-3)
    }

    pub fn with_lr(len: usize, lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m: vec![0.0; len], v: vec![0.0; len] }
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }
}

/// One bias-corrected Adam update of `params` in place.
pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut AdamState) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(shape_err(
            "adam_step",
            format!("{} params, {} grads, {} moments", params.len(), grads.len(), state.m.len()),
        ));
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - state.beta1.powi(t);
    let c2 = 1.0 - state.beta2.powi(t);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g;
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * g * g;
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        params[i] -= state.lr * m_hat / (v_hat.sqrt() + state.eps);
    }
    Ok(())
}

/// Relative errors below this denominator are measured against it instead,
/// so vanishing gradients are compared in absolute terms.
pub const GRAD_CHECK_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter index with the largest error.
    pub worst_index: usize,
    pub checked: usize,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= self.tolerance
    }
}

/// Compare an analytic gradient with central differences of `f` at `theta`.
///
/// The step for coordinate `i` is `1e-5 * max(1, |theta_i|)`, retried at a
/// tenth of that when the first probe disagrees, since a ReLU kink inside the
/// wider interval spoils the central difference. With
/// `sample = Some((count, seed))` only `count` random coordinates are
/// checked.
pub fn grad_check(
    f: impl Fn(&[f64]) -> f64,
    theta: &[f64],
    analytic: &[f64],
    tolerance: f64,
    sample_spec: Option<(usize, u64)>,
) -> Result<GradCheckReport> {
    if theta.len() != analytic.len() {
        return Err(shape_err("grad_check", format!("{} params, {} gradient entries", theta.len(), analytic.len())));
    }
    let indices: Vec<usize> = match sample_spec {
        Some((count, seed)) if count < theta.len() => {
            let mut r = rng::rng_from(seed);
            let mut idx = sample(&mut r, theta.len(), count).into_vec();
            idx.sort_unstable();
            idx
        }
        _ => (0..theta.len()).collect(),
    };
    let mut probe = theta.to_vec();
    let mut report = GradCheckReport { max_rel_error: 0.0, worst_index: 0, checked: indices.len(), tolerance };
    for &i in &indices {
        let a = analytic[i];
        let mut err = f64::INFINITY;
        for h in [1e-5, 1e-6].map(|s| s * theta[i].abs().max(1.0)) {
            probe[i] = theta[i] + h;
            let up = f(&probe);
            probe[i] = theta[i] - h;
            let down = f(&probe);
            probe[i] = theta[i];
            let numeric = (up - down) / (2.0 * h);
            err = err.min((a - numeric).abs() / a.abs().max(numeric.abs()).max(GRAD_CHECK_FLOOR));
            if err <= tolerance {
                break;
            }
        }
        if !(err <= report.max_rel_error) {
            report.max_rel_error = err;
            report.worst_index = i;
        }
    }
    Ok(report)
}

const CHECKPOINT_MAGIC: &str = "linksched-checkpoint";
const CHECKPOINT_VERSION: u32 = 1;

/// Serialized parameters with an architecture id and free-form metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub arch: String,
    /// Ordered `key = value` pairs; keys must not contain whitespace.
    pub meta: Vec<(String, String)>,
    pub params: ModelParams,
}

impl Checkpoint {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        writeln!(s, "{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION}").unwrap();
        writeln!(s, "arch {}", self.arch).unwrap();
        for (k, v) in &self.meta {
            writeln!(s, "meta {k} {v}").unwrap();
        }
        for (name, rows, cols) in self.params.layout() {
            writeln!(s, "tensor {name} {rows} {cols}").unwrap();
        }
        writeln!(s, "flat {}", self.params.flat_len()).unwrap();
        for x in self.params.flatten() {
            // Debug formatting of f64 is the shortest exact round-trip form.
            writeln!(s, "{x:?}").unwrap();
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let bad = |msg: String| Error::Checkpoint(msg);
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| bad("empty file".into()))?;
        if header != format!("{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION}") {
            return Err(bad(format!("unsupported header `{header}`")));
        }
        let mut arch = None;
        let mut meta = Vec::new();
        let mut params = ModelParams::new();
        let flat_len = loop {
            let line = lines.next().ok_or_else(|| bad("missing `flat` line".into()))?;
            let mut parts = line.splitn(2, ' ');
            let key = parts.next().unwrap_or_default();
            let rest = parts.next().unwrap_or_default();
            match key {
                "arch" => arch = Some(rest.to_string()),
                "meta" => {
                    let (k, v) = rest.split_once(' ').unwrap_or((rest, ""));
                    meta.push((k.to_string(), v.to_string()));
                }
                "tensor" => {
                    let f: Vec<&str> = rest.split_whitespace().collect();
                    let [name, rows, cols] = f[..] else {
                        return Err(bad(format!("malformed tensor line `{line}`")));
                    };
                    let dim = |s: &str| s.parse::<usize>().map_err(|_| bad(format!("bad dimension in `{line}`")));
                    params.push(name, Tensor2::zeros(dim(rows)?, dim(cols)?));
                }
                "flat" => break rest.parse::<usize>().map_err(|_| bad(format!("bad flat length `{rest}`")))?,
                _ => return Err(bad(format!("unexpected line `{line}`"))),
            }
        };
        if flat_len != params.flat_len() {
            return Err(bad(format!("flat length {flat_len} disagrees with tensor layout {}", params.flat_len())));
        }
        let flat = lines
            .filter(|l| !l.trim().is_empty())
            .map(|l| l.trim().parse::<f64>().map_err(|_| bad(format!("bad value `{l}`"))))
            .collect::<Result<Vec<_>>>()?;
        params.unflatten(&flat).map_err(|e| bad(e.to_string()))?;
        let arch = arch.ok_or_else(|| bad("missing `arch` line".into()))?;
        Ok(Self { arch, meta, params })
    }

    pub fn meta_value(&self, key: &str) -> Option<&str> {
        self.meta.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng as _;

    fn random(rows: usize, cols: usize, seed: u64) -> Tensor2 {
        let mut r = rng::rng_from(seed);
        Tensor2::from_vec(rows, cols, (0..rows * cols).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn naive_matmul(a: &Tensor2, b: &Tensor2) -> Vec<f64> {
        let mut out = vec![0.0; a.rows() * b.cols()];
        for i in 0..a.rows() {
            for j in 0..b.cols() {
                for k in 0..a.cols() {
                    out[i * b.cols() + j] += a.get(i, k) * b.get(k, j);
                }
            }
        }
        out
    }

    /// Softmax written directly from the definition, one row at a time.
    fn softmax_oracle(scores: &[f64], visible: &[bool]) -> Vec<f64> {
        let exps: Vec<f64> = scores
            .iter()
            .zip(visible)
            .map(|(&s, &vis)| if vis { s.exp() } else { 0.0 })
            .collect();
        let total: f64 = exps.iter().sum();
        exps.iter().map(|e| if total > 0.0 { e / total } else { 0.0 }).collect()
    }

    #[test]
    fn dense_identity_and_scalar() {
        let x = random(3, 4, 1);
        let y = dense_forward(&x, &Tensor2::identity(4), &Tensor2::zeros(1, 4)).unwrap();
        assert_eq!(y, x);
        let one = |v| Tensor2::from_vec(1, 1, vec![v]).unwrap();
        assert_eq!(dense_forward(&one(2.0), &one(3.0), &one(1.0)).unwrap().data(), &[7.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let a = random(4, 3, 2);
        let b = random(3, 2, 3);
        let fast = a.matmul(&b).unwrap();
        for (x, y) in fast.data().iter().zip(naive_matmul(&a, &b)) {
            assert!((x - y).abs() < 1e-12);
        }
        let tn = a.transpose().matmul_tn(&b).unwrap();
        let nt = a.matmul_nt(&b.transpose()).unwrap();
        for ((x, y), z) in fast.data().iter().zip(tn.data()).zip(nt.data()) {
            assert!((x - y).abs() < 1e-12 && (x - z).abs() < 1e-12);
        }
        assert!(matches!(a.matmul(&a), Err(Error::Shape { .. })));
    }

    #[test]
    fn attention_single_key_returns_value() {
        let q = random(3, 2, 4);
        let k = random(1, 2, 5);
        let v = Tensor2::from_vec(1, 3, vec![1.0, -2.0, 0.5]).unwrap();
        let out = attention(&q, &k, &v, &Mask::new(3, 1, true)).unwrap();
        for i in 0..3 {
            assert_eq!(out.row(i), v.row(0));
        }
    }

    #[test]
    fn attention_identical_keys_average() {
        let q = random(2, 2, 6);
        let k = Tensor2::from_rows(&[vec![0.3, 0.7], vec![0.3, 0.7]]).unwrap();
        let v = Tensor2::from_rows(&[vec![1.0, 2.0], vec![3.0, 6.0]]).unwrap();
        let out = attention(&q, &k, &v, &Mask::new(2, 2, true)).unwrap();
        for i in 0..2 {
            assert!((out.get(i, 0) - 2.0).abs() < 1e-12 && (out.get(i, 1) - 4.0).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_matches_softmax_oracle() {
        let (q, k, v) = (random(3, 3, 7), random(3, 3, 8), random(3, 3, 9));
        let mask = Mask::from_rows(&[vec![true, false, true], vec![true, true, true], vec![false, false, false]]).unwrap();
        let out = attention(&q, &k, &v, &mask).unwrap();
        for i in 0..3 {
            let scores: Vec<f64> = (0..3).map(|j| dot(q.row(i), k.row(j)) / 3f64.sqrt()).collect();
            let vis: Vec<bool> = (0..3).map(|j| mask.get(i, j)).collect();
            let w = softmax_oracle(&scores, &vis);
            for c in 0..3 {
                let expect: f64 = (0..3).map(|j| w[j] * v.get(j, c)).sum();
                assert!((out.get(i, c) - expect).abs() < 1e-10);
            }
        }
        assert!(out.row(2).iter().all(|&x| x == 0.0));
    }

    #[test]
    fn attention_rejects_bad_shapes() {
        let q = random(2, 3, 1);
        assert!(attention(&q, &random(2, 2, 2), &random(2, 2, 3), &Mask::new(2, 2, true)).is_err());
        assert!(attention(&q, &q, &q, &Mask::new(2, 3, true)).is_err());
        let empty = Tensor2::zeros(2, 0);
        assert!(attention(&empty, &empty, &q, &Mask::new(2, 2, true)).is_err());
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let s = random(5, 7, 10).scale(20.0);
        let mut mask = Mask::new(5, 7, true);
        mask.set(0, 3, false);
        mask.set(2, 0, false);
        let p = masked_softmax(&s, &mask);
        for i in 0..5 {
            assert!((p.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        assert_eq!(p.get(0, 3), 0.0);
        assert_eq!(p.get(2, 0), 0.0);
    }

    // Each gradient test builds a scalar loss `sum(c * layer(...))` with a
    // fixed random projection `c`, so dL/dout = c.

    fn weighted_sum(out: &Tensor2, c: &Tensor2) -> f64 {
        dot(out.data(), c.data())
    }

    #[test]
    fn dense_relu_gradients() {
        let x = random(4, 3, 11);
        let w = random(3, 5, 12);
        let b = random(1, 5, 13);
        let c = random(4, 5, 14);
        let mut p = ModelParams::new();
        p.push("w", w);
        p.push("b", b);
        let loss = |p: &ModelParams| {
            let pre = dense_forward(&x, p.get("w"), p.get("b")).unwrap();
            weighted_sum(&relu(&pre), &c)
        };
        let pre = dense_forward(&x, p.get("w"), p.get("b")).unwrap();
        let (_, dw, db) = dense_backward(&x, p.get("w"), &relu_backward(&pre, &c)).unwrap();
        let analytic: Vec<f64> = dw.data().iter().chain(db.data()).copied().collect();
        let theta = p.flatten();
        let report = grad_check(
            |flat| {
                let mut q = p.clone();
                q.unflatten(flat).unwrap();
                loss(&q)
            },
            &theta,
            &analytic,
            1e-4,
            None,
        )
        .unwrap();
        assert!(report.passed(), "{report:?}");

        // Input gradient.
        let (dx, _, _) = dense_backward(&x, p.get("w"), &relu_backward(&pre, &c)).unwrap();
        let report = grad_check(
            |flat| {
                let xi = Tensor2::from_vec(4, 3, flat.to_vec()).unwrap();
                weighted_sum(&relu(&dense_forward(&xi, p.get("w"), p.get("b")).unwrap()), &c)
            },
            x.data(),
            dx.data(),
            1e-4,
            None,
        )
        .unwrap();
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn layer_norm_gradients() {
        let x = random(3, 6, 15);
        let gamma = random(1, 6, 16);
        let beta = random(1, 6, 17);
        let c = random(3, 6, 18);
        let (_, cache) = layer_norm(&x, &gamma, &beta).unwrap();
        let (dx, dg, db) = layer_norm_backward(&cache, &gamma, &c);
        let f = |x: &Tensor2, g: &Tensor2, b: &Tensor2| weighted_sum(&layer_norm(x, g, b).unwrap().0, &c);
        let rx = grad_check(|t| f(&Tensor2::from_vec(3, 6, t.to_vec()).unwrap(), &gamma, &beta), x.data(), dx.data(), 1e-4, None).unwrap();
        let rg = grad_check(|t| f(&x, &Tensor2::from_vec(1, 6, t.to_vec()).unwrap(), &beta), gamma.data(), dg.data(), 1e-4, None).unwrap();
        let rb = grad_check(|t| f(&x, &gamma, &Tensor2::from_vec(1, 6, t.to_vec()).unwrap()), beta.data(), db.data(), 1e-4, None).unwrap();
        for r in [rx, rg, rb] {
            assert!(r.passed(), "{r:?}");
        }
    }

    #[test]
    fn attention_gradients() {
        let (q, k, v) = (random(4, 3, 19), random(5, 3, 20), random(5, 2, 21));
        let c = random(4, 2, 22);
        let mut mask = Mask::new(4, 5, true);
        mask.set(0, 1, false);
        mask.set(1, 4, false);
        for j in 0..5 {
            mask.set(3, j, false);
        }
        let (_, cache) = attention_forward(&q, &k, &v, &mask).unwrap();
        let (dq, dk, dv) = attention_backward(&q, &k, &v, &cache, &c).unwrap();
        let f = |q: &Tensor2, k: &Tensor2, v: &Tensor2| weighted_sum(&attention(q, k, v, &mask).unwrap(), &c);
        let t = |r, c, s: &[f64]| Tensor2::from_vec(r, c, s.to_vec()).unwrap();
        let reports = [
            grad_check(|s| f(&t(4, 3, s), &k, &v), q.data(), dq.data(), 1e-4, None).unwrap(),
            grad_check(|s| f(&q, &t(5, 3, s), &v), k.data(), dk.data(), 1e-4, None).unwrap(),
            grad_check(|s| f(&q, &k, &t(5, 2, s)), v.data(), dv.data(), 1e-4, None).unwrap(),
        ];
        for r in reports {
            assert!(r.passed(), "{r:?}");
        }
    }

    #[test]
    fn grad_check_on_half_squared_norm() {
        let theta = vec![0.5, -2.0, 3.0, 1e-3];
        let report = grad_check(|t| 0.5 * dot(t, t), &theta, &theta, 1e-8, None).unwrap();
        assert!(report.passed(), "{report:?}");
        let wrong: Vec<f64> = theta.iter().map(|x| x * 1.01).collect();
        assert!(!grad_check(|t| 0.5 * dot(t, t), &theta, &wrong, 1e-4, None).unwrap().passed());
        let sampled = grad_check(|t| 0.5 * dot(t, t), &theta, &theta, 1e-8, Some((2, 9))).unwrap();
        assert_eq!(sampled.checked, 2);
    }

    #[test]
    fn grad_check_steps_around_a_nearby_kink() {
        // |x - 0.3| has its kink 2e-6 below theta, inside the wide probe.
        let f = |t: &[f64]| (t[0] - 0.3).abs();
        let theta = [0.3 + 2e-6];
        assert!(grad_check(f, &theta, &[1.0], 1e-6, None).unwrap().passed());
        assert!(!grad_check(f, &theta, &[-1.0], 1e-4, None).unwrap().passed());
    }

    #[test]
    fn adam_zero_gradient_is_a_no_op() {
        let mut p = vec![1.0, -2.0];
        let mut s = AdamState::new(2);
        adam_step(&mut p, &[0.0, 0.0], &mut s).unwrap();
        assert_eq!(p, vec![1.0, -2.0]);
        assert_eq!(s.step, 1);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        // m_hat = g and v_hat = g^2 after one step, so |delta| = lr * |g| / (|g| + eps).
        for g in [1e-3, 0.5, 40.0] {
            let mut p = vec![0.0];
            let mut s = AdamState::new(1);
            adam_step(&mut p, &[g], &mut s).unwrap();
            assert!((p[0] + 1e-3 * g / (g + 1e-8)).abs() < 1e-15);
        }
    }

    #[test]
    fn adam_two_step_trace() {
        // g = 2 twice. Step 1: m = 0.2, v = 0.004, m_hat = 2, v_hat = 4.
        // Step 2: m = 0.38, v = 0.007996, m_hat = 0.38/0.19 = 2, v_hat = 0.007996/0.001999 = 4.
        let mut p = vec![1.0];
        let mut s = AdamState::new(1);
        adam_step(&mut p, &[2.0], &mut s).unwrap();
        adam_step(&mut p, &[2.0], &mut s).unwrap();
        let expect = 1.0 - 2.0 * 1e-3 * 2.0 / (2.0 + 1e-8);
        assert!((p[0] - expect).abs() < 1e-14, "{}", p[0]);
        assert!(adam_step(&mut p, &[1.0, 2.0], &mut s).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut p = ModelParams::new();
        p.push("a.w", random(3, 2, 30));
        p.push("a.b", Tensor2::from_vec(1, 2, vec![0.1, -1e-300]).unwrap());
        let ck = Checkpoint { arch: "test".into(), meta: vec![("hidden_dim".into(), "16".into())], params: p };
        let text = ck.to_text();
        let back = Checkpoint::from_text(&text).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_text(), text);
        assert_eq!(back.meta_value("hidden_dim"), Some("16"));
        assert!(Checkpoint::from_text(&text.replace("flat 8", "flat 9")).is_err());
        assert!(Checkpoint::from_text("nope").is_err());
    }

    proptest! {
        #[test]
        fn flatten_round_trip(values in proptest::collection::vec(-1e6f64..1e6, 10)) {
            let mut p = ModelParams::new();
            p.push("x", Tensor2::zeros(2, 3));
            p.push("y", Tensor2::zeros(4, 1));
            p.unflatten(&values).unwrap();
            prop_assert_eq!(p.flatten(), values.clone());
            let mut q = p.zeros_like();
            q.unflatten(&p.flatten()).unwrap();
            prop_assert_eq!(q, p);
        }
    }
}
