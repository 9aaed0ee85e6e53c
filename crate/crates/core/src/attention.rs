//! Single-head self-attention over a set of feature vectors, with analytic
//! gradients, a learned positional embedding, the concatenation block, the
//! X-summed attention analysis and the training losses.
//!
//! Attention weights are stored with rows = queries: `A[i][k]` is the
//! weight of query `i` on key `k`.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor_io::{self, Tensor, TensorData};

/// Dense row-major f64 matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::DimensionMismatch(format!(
                "{} values for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let data = (0..rows * cols).map(|i| f(i / cols, i % cols)).collect();
        Self { rows, cols, data }
    }

    pub fn random(rows: usize, cols: usize, scale: f64, rng: &mut impl Rng) -> Self {
        Self::from_fn(rows, cols, |_, _| rng.random_range(-scale..scale))
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn(n, n, |i, j| if i == j { 1.0 } else { 0.0 })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::DimensionMismatch(format!(
                "cannot multiply {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.get(i, k);
                if a == 0.0 {
                    continue;
                }
                let src = other.row(k);
                let dst = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (d, &b) in dst.iter_mut().zip(src) {
                    *d += a * b;
                }
            }
        }
        Ok(out)
    }

    fn add(&self, other: &Matrix) -> Result<Matrix> {
        self.ensure_dims(other.rows, other.cols)?;
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect();
        Ok(Matrix { rows: self.rows, cols: self.cols, data })
    }

    fn scale(mut self, s: f64) -> Matrix {
        self.data.iter_mut().for_each(|v| *v *= s);
        self
    }

    /// `self · wᵀ + b` applied per row.
    fn affine(&self, w: &Matrix, b: &[f64]) -> Result<Matrix> {
        let mut out = self.matmul(&w.transpose())?;
        if b.len() != out.cols {
            return Err(Error::DimensionMismatch(format!("bias of {} for {} outputs", b.len(), out.cols)));
        }
        for r in 0..out.rows {
            for (v, bb) in out.data[r * out.cols..(r + 1) * out.cols].iter_mut().zip(b) {
                *v += bb;
            }
        }
        Ok(out)
    }

    fn column_sums(&self) -> Vec<f64> {
        let mut s = vec![0.0; self.cols];
        for r in 0..self.rows {
            for (acc, v) in s.iter_mut().zip(self.row(r)) {
                *acc += v;
            }
        }
        s
    }

    pub fn ensure_dims(&self, rows: usize, cols: usize) -> Result<()> {
        if self.rows != rows || self.cols != cols {
            return Err(Error::DimensionMismatch(format!(
                "expected {rows}x{cols}, found {}x{}",
                self.rows, self.cols
            )));
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionParams {
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub bq: Vec<f64>,
    pub bk: Vec<f64>,
    pub bv: Vec<f64>,
    pub wo: Matrix,
    pub bo: Vec<f64>,
    /// `N × d_in`; `None` disables the positional embedding.
    pub embedding: Option<Matrix>,
}

impl AttentionParams {
    /// Small uniform random parameters.
    pub fn random(n: usize, d_in: usize, d_k: usize, d_out: usize, with_embedding: bool, rng: &mut impl Rng) -> Self {
        let s = 0.5;
        let mut vec = |len: usize| (0..len).map(|_| rng.random_range(-s..s)).collect::<Vec<f64>>();
        let (bq, bk, bv, bo) = (vec(d_k), vec(d_k), vec(d_k), vec(d_out));
        Self {
            wq: Matrix::random(d_k, d_in, s, rng),
            wk: Matrix::random(d_k, d_in, s, rng),
            wv: Matrix::random(d_k, d_in, s, rng),
            bq,
            bk,
            bv,
            wo: Matrix::random(d_out, d_k, s, rng),
            bo,
            embedding: with_embedding.then(|| Matrix::random(n, d_in, 0.1, rng)),
        }
    }

    pub fn d_in(&self) -> usize {
        self.wq.cols()
    }

    pub fn d_k(&self) -> usize {
        self.wq.rows()
    }

    pub fn d_out(&self) -> usize {
        self.wo.rows()
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        let (d_in, d_k) = (self.d_in(), self.d_k());
        if d_k == 0 || n == 0 {
            return Err(Error::DimensionMismatch("d_k and N must be at least 1".into()));
        }
        self.wk.ensure_dims(d_k, d_in)?;
        self.wv.ensure_dims(d_k, d_in)?;
        self.wo.ensure_dims(self.d_out(), d_k)?;
        for (name, b, len) in [("b^q", &self.bq, d_k), ("b^k", &self.bk, d_k), ("b^v", &self.bv, d_k), ("b^o", &self.bo, self.d_out())] {
            if b.len() != len {
                return Err(Error::DimensionMismatch(format!("{name} has {} entries, expected {len}", b.len())));
            }
        }
        if let Some(e) = &self.embedding {
            e.ensure_dims(n, d_in)?;
        }
        let finite = [&self.wq, &self.wk, &self.wv, &self.wo].iter().all(|m| m.is_finite())
            && [&self.bq, &self.bk, &self.bv, &self.bo].iter().all(|b| b.iter().all(|v| v.is_finite()))
            && self.embedding.as_ref().is_none_or(Matrix::is_finite);
        if !finite {
            return Err(Error::NonFiniteInput);
        }
        Ok(())
    }

    /// Write one tensor per parameter plus a JSON manifest naming them.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut manifest = BTreeMap::new();
        let mut put = |role: &str, rows: usize, cols: usize, data: &[f64]| -> Result<()> {
            let file = format!("attn_{role}.mmt");
            let t = Tensor::new(vec![rows, cols], TensorData::F32(data.iter().map(|&v| v as f32).collect()))?;
            tensor_io::write_tensor(&dir.join(&file), &t)?;
            manifest.insert(role.to_string(), file);
            Ok(())
        };
        for (role, m) in [("wq", &self.wq), ("wk", &self.wk), ("wv", &self.wv), ("wo", &self.wo)] {
            put(role, m.rows(), m.cols(), m.data())?;
        }
        for (role, b) in [("bq", &self.bq), ("bk", &self.bk), ("bv", &self.bv), ("bo", &self.bo)] {
            put(role, 1, b.len(), b)?;
        }
        if let Some(e) = &self.embedding {
            put("embedding", e.rows(), e.cols(), e.data())?;
        }
        tensor_io::write_atomic(&dir.join("attention_params.json"), serde_json::to_string_pretty(&manifest)?.as_bytes())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest: BTreeMap<String, String> = tensor_io::load_json(&dir.join("attention_params.json"))?;
        let get = |role: &str| -> Result<Option<Matrix>> {
            let Some(file) = manifest.get(role) else { return Ok(None) };
            let t = tensor_io::read_tensor(&dir.join(file))?;
            let TensorData::F32(v) = t.data else {
                return Err(Error::CorruptFile(format!("{file}: expected f32 data")));
            };
            if t.dims.len() != 2 {
                return Err(Error::CorruptFile(format!("{file}: expected a matrix")));
            }
            Matrix::from_vec(t.dims[0], t.dims[1], v.into_iter().map(f64::from).collect()).map(Some)
        };
        let need = |role: &str| get(role)?.ok_or_else(|| Error::CorruptFile(format!("missing parameter {role}")));
        Ok(Self {
            wq: need("wq")?,
            wk: need("wk")?,
            wv: need("wv")?,
            bq: need("bq")?.data,
            bk: need("bk")?.data,
            bv: need("bv")?.data,
            wo: need("wo")?,
            bo: need("bo")?.data,
            embedding: get("embedding")?,
        })
    }
}

pub fn add_positional(features: &Matrix, embedding: &Matrix) -> Result<Matrix> {
    features.add(embedding)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionOutput {
    /// `N × d_out`
    pub output: Matrix,
    /// `N × N`, rows = queries.
    pub weights: Matrix,
}

struct Forward {
    x: Matrix,
    q: Matrix,
    k: Matrix,
    v: Matrix,
    a: Matrix,
    context: Matrix,
    output: Matrix,
}

fn softmax_rows(s: &mut Matrix) {
    for r in 0..s.rows {
        let row = &mut s.data[r * s.cols..(r + 1) * s.cols];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        row.iter_mut().for_each(|v| *v /= sum);
    }
}

fn forward(features: &Matrix, params: &AttentionParams) -> Result<Forward> {
    let n = features.rows();
    params.validate(n)?;
    features.ensure_dims(n, params.d_in())?;
    if !features.is_finite() {
        return Err(Error::NonFiniteInput);
    }
    let x = match &params.embedding {
        Some(e) => add_positional(features, e)?,
        None => features.clone(),
    };
    let q = x.affine(&params.wq, &params.bq)?;
    let k = x.affine(&params.wk, &params.bk)?;
    let v = x.affine(&params.wv, &params.bv)?;
    let mut a = q.matmul(&k.transpose())?.scale(1.0 / (params.d_k() as f64).sqrt());
    softmax_rows(&mut a);
    let context = a.matmul(&v)?;
    let output = context.affine(&params.wo, &params.bo)?;
    if !output.is_finite() {
        return Err(Error::NonFiniteInput);
    }
    Ok(Forward { x, q, k, v, a, context, output })
}

pub fn self_attention_forward(features: &Matrix, params: &AttentionParams) -> Result<AttentionOutput> {
    let f = forward(features, params)?;
    Ok(AttentionOutput { output: f.output, weights: f.a })
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionGrads {
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub bq: Vec<f64>,
    pub bk: Vec<f64>,
    pub bv: Vec<f64>,
    pub wo: Matrix,
    pub bo: Vec<f64>,
    pub embedding: Option<Matrix>,
    pub input: Matrix,
}

/// Gradients of `Σ upstream ⊙ output` with respect to every parameter and the input.
pub fn self_attention_backward(features: &Matrix, params: &AttentionParams, upstream: &Matrix) -> Result<AttentionGrads> {
    let f = forward(features, params)?;
    upstream.ensure_dims(f.output.rows(), f.output.cols())?;
    if !upstream.is_finite() {
        return Err(Error::NonFiniteInput);
    }
    let n = features.rows();
    let g = upstream;
    let wo = g.transpose().matmul(&f.context)?;
    let bo = g.column_sums();
    let d_context = g.matmul(&params.wo)?;
    let d_a = d_context.matmul(&f.v.transpose())?;
    let dv = f.a.transpose().matmul(&d_context)?;
    let mut ds = Matrix::zeros(n, n);
    for i in 0..n {
        let dot: f64 = d_a.row(i).iter().zip(f.a.row(i)).map(|(x, y)| x * y).sum();
        for k in 0..n {
            ds.set(i, k, f.a.get(i, k) * (d_a.get(i, k) - dot));
        }
    }
    let inv = 1.0 / (params.d_k() as f64).sqrt();
    let dq = ds.matmul(&f.k)?.scale(inv);
    let dk = ds.transpose().matmul(&f.q)?.scale(inv);
    let input = dq
        .matmul(&params.wq)?
        .add(&dk.matmul(&params.wk)?)?
        .add(&dv.matmul(&params.wv)?)?;
    Ok(AttentionGrads {
        wq: dq.transpose().matmul(&f.x)?,
        wk: dk.transpose().matmul(&f.x)?,
        wv: dv.transpose().matmul(&f.x)?,
        bq: dq.column_sums(),
        bk: dk.column_sums(),
        bv: dv.column_sums(),
        wo,
        bo,
        embedding: params.embedding.as_ref().map(|_| input.clone()),
        input,
    })
}

/// Attention followed by per-index concatenation `[h_i ; h_i^out]` and a shared affine map.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionBlock {
    pub attention: AttentionParams,
    /// `d_c × (d_in + d_out)`
    pub wc: Matrix,
    pub bc: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockGrads {
    pub attention: AttentionGrads,
    pub wc: Matrix,
    pub bc: Vec<f64>,
    pub input: Matrix,
}

impl AttentionBlock {
    pub fn random(n: usize, d_in: usize, d_k: usize, d_out: usize, d_c: usize, with_embedding: bool, rng: &mut impl Rng) -> Self {
        let attention = AttentionParams::random(n, d_in, d_k, d_out, with_embedding, rng);
        let wc = Matrix::random(d_c, d_in + d_out, 0.5, rng);
        let bc = (0..d_c).map(|_| rng.random_range(-0.5..0.5)).collect();
        Self { attention, wc, bc }
    }

    fn concat(features: &Matrix, out: &Matrix) -> Matrix {
        let (d_in, d_out) = (features.cols(), out.cols());
        Matrix::from_fn(features.rows(), d_in + d_out, |i, j| {
            if j < d_in {
                features.get(i, j)
            } else {
                out.get(i, j - d_in)
            }
        })
    }

    pub fn forward(&self, features: &Matrix) -> Result<(Matrix, AttentionOutput)> {
        let att = self_attention_forward(features, &self.attention)?;
        let z = Self::concat(features, &att.output);
        Ok((z.affine(&self.wc, &self.bc)?, att))
    }

    pub fn backward(&self, features: &Matrix, upstream: &Matrix) -> Result<BlockGrads> {
        let att = self_attention_forward(features, &self.attention)?;
        let z = Self::concat(features, &att.output);
        upstream.ensure_dims(features.rows(), self.wc.rows())?;
        let dz = upstream.matmul(&self.wc)?;
        let d_in = features.cols();
        let d_out_att = att.output.cols();
        let direct = Matrix::from_fn(features.rows(), d_in, |i, j| dz.get(i, j));
        let d_att = Matrix::from_fn(features.rows(), d_out_att, |i, j| dz.get(i, d_in + j));
        let attention = self_attention_backward(features, &self.attention, &d_att)?;
        Ok(BlockGrads {
            wc: upstream.transpose().matmul(&z)?,
            bc: upstream.column_sums(),
            input: direct.add(&attention.input)?,
            attention,
        })
    }
}

/// Sum query and key weights over X within each Y row, then normalize rows.
/// Index `i` maps to `(y, x) = (i / s_x, i % s_x)`.
pub fn attention_matrix_sum_x(a: &Matrix, s_y: usize, s_x: usize) -> Result<Matrix> {
    let n = s_y * s_x;
    a.ensure_dims(n, n)?;
    let mut m = Matrix::zeros(s_y, s_y);
    for i in 0..n {
        for k in 0..n {
            let (yi, yk) = (i / s_x, k / s_x);
            m.set(yi, yk, m.get(yi, yk) + a.get(i, k));
        }
    }
    for r in 0..s_y {
        let sum: f64 = m.row(r).iter().sum();
        if sum > 0.0 {
            for c in 0..s_y {
                m.set(r, c, m.get(r, c) / sum);
            }
        }
    }
    Ok(m)
}

fn selected<'a>(pred: &'a [f64], target: &'a [f64], mask: Option<&'a [bool]>) -> Result<(usize, impl Iterator<Item = (usize, f64)> + 'a)> {
    if pred.len() != target.len() || mask.is_some_and(|m| m.len() != pred.len()) {
        return Err(Error::DimensionMismatch("prediction, target and mask must have equal length".into()));
    }
    let count = mask.map_or(pred.len(), |m| m.iter().filter(|&&b| b).count());
    if count == 0 {
        return Err(Error::EmptyMask);
    }
    let it = (0..pred.len()).filter(move |&i| mask.is_none_or(|m| m[i])).map(move |i| (i, pred[i] - target[i]));
    Ok((count, it))
}

/// Mean squared error over the (masked) pixels.
pub fn loss_l2(pred: &[f64], target: &[f64], mask: Option<&[bool]>) -> Result<f64> {
    let (n, it) = selected(pred, target, mask)?;
    Ok(it.map(|(_, d)| d * d).sum::<f64>() / n as f64)
}

pub fn loss_l2_grad(pred: &[f64], target: &[f64], mask: Option<&[bool]>) -> Result<Vec<f64>> {
    let (n, it) = selected(pred, target, mask)?;
    let mut g = vec![0.0; pred.len()];
    for (i, d) in it {
        g[i] = 2.0 * d / n as f64;
    }
    Ok(g)
}

/// Mean absolute error over the (masked) pixels.
pub fn loss_l1(pred: &[f64], target: &[f64], mask: Option<&[bool]>) -> Result<f64> {
    let (n, it) = selected(pred, target, mask)?;
    Ok(it.map(|(_, d)| d.abs()).sum::<f64>() / n as f64)
}

/// Subgradient; zero where prediction equals target.
pub fn loss_l1_grad(pred: &[f64], target: &[f64], mask: Option<&[bool]>) -> Result<Vec<f64>> {
    let (n, it) = selected(pred, target, mask)?;
    let mut g = vec![0.0; pred.len()];
    for (i, d) in it {
        g[i] = if d == 0.0 { 0.0 } else { d.signum() / n as f64 };
    }
    Ok(g)
}

/// Probabilities below this are clamped before taking the log.
pub const CE_EPSILON: f64 = 1e-12;

fn check_ce(probs: &Matrix, targets: &[usize], weights: &[f64]) -> Result<()> {
    if probs.rows() != targets.len() || probs.cols() != weights.len() {
        return Err(Error::DimensionMismatch("probabilities, targets and class weights disagree".into()));
    }
    if probs.rows() == 0 {
        return Err(Error::EmptyMask);
    }
    if targets.iter().any(|&t| t >= weights.len()) || weights.iter().any(|&w| !(w >= 0.0 && w.is_finite())) {
        return Err(Error::InputRange);
    }
    for r in 0..probs.rows() {
        let row = probs.row(r);
        if row.iter().any(|&p| !(0.0..=1.0).contains(&p)) || (row.iter().sum::<f64>() - 1.0).abs() > 1e-6 {
            return Err(Error::InputRange);
        }
    }
    if targets.iter().map(|&t| weights[t]).sum::<f64>() <= 0.0 {
        return Err(Error::InputRange);
    }
    Ok(())
}

/// `Σ w[t]·(−ln max(p[t], ε)) / Σ w[t]` over pixels; unit weights give plain
/// mean cross-entropy.
pub fn loss_weighted_ce(probs: &Matrix, targets: &[usize], weights: &[f64]) -> Result<f64> {
    check_ce(probs, targets, weights)?;
    let mut num = 0.0;
    let mut den = 0.0;
    for (r, &t) in targets.iter().enumerate() {
        num += weights[t] * -probs.get(r, t).max(CE_EPSILON).ln();
        den += weights[t];
    }
    Ok(num / den)
}

/// Gradient with respect to the probabilities.
pub fn loss_weighted_ce_grad(probs: &Matrix, targets: &[usize], weights: &[f64]) -> Result<Matrix> {
    check_ce(probs, targets, weights)?;
    let den: f64 = targets.iter().map(|&t| weights[t]).sum();
    let mut g = Matrix::zeros(probs.rows(), probs.cols());
    for (r, &t) in targets.iter().enumerate() {
        let p = probs.get(r, t);
        if p > CE_EPSILON {
            g.set(r, t, -weights[t] / (p * den));
        }
    }
    Ok(g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Neumaier-compensated sum.
    fn csum(values: impl IntoIterator<Item = f64>) -> f64 {
        let (mut s, mut c) = (0.0f64, 0.0f64);
        for v in values {
            let t = s + v;
            c += if s.abs() >= v.abs() { (s - t) + v } else { (v - t) + s };
            s = t;
        }
        s + c
    }

    /// Brute-force evaluation following the definitions index by index.
    fn oracle(h: &Matrix, p: &AttentionParams) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
        let n = h.rows();
        let (d_in, d_k, d_out) = (p.d_in(), p.d_k(), p.d_out());
        let x = |i: usize, j: usize| h.get(i, j) + p.embedding.as_ref().map_or(0.0, |e| e.get(i, j));
        let proj = |w: &Matrix, b: &[f64], i: usize| -> Vec<f64> {
            (0..d_k).map(|r| csum((0..d_in).map(|c| w.get(r, c) * x(i, c)).chain([b[r]]))).collect()
        };
        let q: Vec<_> = (0..n).map(|i| proj(&p.wq, &p.bq, i)).collect();
        let k: Vec<_> = (0..n).map(|i| proj(&p.wk, &p.bk, i)).collect();
        let v: Vec<_> = (0..n).map(|i| proj(&p.wv, &p.bv, i)).collect();
        let mut a = vec![vec![0.0; n]; n];
        let mut out = vec![vec![0.0; d_out]; n];
        for i in 0..n {
            let logits: Vec<f64> = (0..n)
                .map(|kk| csum((0..d_k).map(|c| q[i][c] * k[kk][c])) / (d_k as f64).sqrt())
                .collect();
            let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
            let z = csum(e.iter().copied());
            for kk in 0..n {
                a[i][kk] = e[kk] / z;
            }
            let ctx: Vec<f64> = (0..d_k).map(|c| csum((0..n).map(|kk| a[i][kk] * v[kk][c]))).collect();
            for o in 0..d_out {
                out[i][o] = csum((0..d_k).map(|c| p.wo.get(o, c) * ctx[c]).chain([p.bo[o]]));
            }
        }
        (out, a)
    }

    fn setup(seed: u64, n: usize, d_in: usize, d_k: usize, d_out: usize, emb: bool) -> (Matrix, AttentionParams) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h = Matrix::random(n, d_in, 1.0, &mut rng);
        (h, AttentionParams::random(n, d_in, d_k, d_out, emb, &mut rng))
    }

    #[test]
    fn matches_oracle() {
        for seed in 0..5 {
            let (h, p) = setup(seed, 5, 4, 4, 4, seed % 2 == 0);
            let out = self_attention_forward(&h, &p).unwrap();
            let (o, a) = oracle(&h, &p);
            for i in 0..5 {
                for j in 0..4 {
                    let rel = (out.output.get(i, j) - o[i][j]).abs() / o[i][j].abs().max(1e-300);
                    assert!(rel < 1e-12 || (out.output.get(i, j) - o[i][j]).abs() < 1e-15, "{rel}");
                }
                for k in 0..5 {
                    assert!((out.weights.get(i, k) - a[i][k]).abs() <= 1e-12 * a[i][k]);
                }
            }
        }
    }

    #[test]
    fn singleton_and_uniform() {
        let (h, p) = setup(3, 1, 3, 2, 2, false);
        let out = self_attention_forward(&h, &p).unwrap();
        assert_eq!(out.weights.data(), &[1.0]);
        let v = h.affine(&p.wv, &p.bv).unwrap();
        let expect = v.affine(&p.wo, &p.bo).unwrap();
        assert!(out.output.max_abs_diff(&expect) < 1e-15);

        let (h, mut p) = setup(4, 6, 3, 2, 2, false);
        p.wq = Matrix::zeros(2, 3);
        p.bq = vec![0.0; 2];
        let out = self_attention_forward(&h, &p).unwrap();
        assert!(out.weights.data().iter().all(|&w| (w - 1.0 / 6.0).abs() < 1e-15));
        let v = h.affine(&p.wv, &p.bv).unwrap();
        let mean = Matrix::from_fn(1, 2, |_, c| (0..6).map(|i| v.get(i, c)).sum::<f64>() / 6.0);
        let expect = mean.affine(&p.wo, &p.bo).unwrap();
        for i in 0..6 {
            for c in 0..2 {
                assert!((out.output.get(i, c) - expect.get(0, c)).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn positional_embedding() {
        let h = Matrix::random(4, 3, 1.0, &mut ChaCha8Rng::seed_from_u64(1));
        let zero = Matrix::zeros(4, 3);
        assert_eq!(add_positional(&h, &zero).unwrap(), h);
        assert_eq!(add_positional(&zero, &h).unwrap(), h);
        assert!(add_positional(&h, &Matrix::zeros(3, 3)).is_err());
    }

    #[test]
    fn non_finite_rejected() {
        let (mut h, p) = setup(1, 3, 2, 2, 2, false);
        h.set(1, 1, f64::NAN);
        assert!(matches!(self_attention_forward(&h, &p), Err(Error::NonFiniteInput)));
    }

    #[test]
    fn scale_stability() {
        let (h, p) = setup(9, 8, 4, 4, 4, false);
        let big = h.clone().scale(1e3);
        let out = self_attention_forward(&big, &p).unwrap();
        assert!(out.output.is_finite());
    }

    #[test]
    fn bias_gradient_and_zero_upstream() {
        let (h, p) = setup(2, 5, 3, 2, 4, true);
        let g = Matrix::random(5, 4, 1.0, &mut ChaCha8Rng::seed_from_u64(8));
        let grads = self_attention_backward(&h, &p, &g).unwrap();
        for (c, v) in grads.bo.iter().enumerate() {
            assert!((v - (0..5).map(|i| g.get(i, c)).sum::<f64>()).abs() < 1e-15);
        }
        let zero = self_attention_backward(&h, &p, &Matrix::zeros(5, 4)).unwrap();
        assert!(zero.input.data().iter().chain(zero.wq.data()).chain(&zero.bo).all(|&v| v == 0.0));
    }

    #[test]
    fn sum_x_examples() {
        let uniform = Matrix::from_fn(6, 6, |_, _| 1.0 / 6.0);
        let m = attention_matrix_sum_x(&uniform, 3, 2).unwrap();
        assert!(m.data().iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-15));
        let a = Matrix::from_fn(3, 3, |i, k| if i == k { 0.5 } else { 0.25 });
        assert_eq!(attention_matrix_sum_x(&a, 3, 1).unwrap(), a);
        assert!(attention_matrix_sum_x(&a, 2, 2).is_err());
    }

    #[test]
    fn loss_examples() {
        let x = [0.5, -1.0, 2.0];
        assert_eq!(loss_l2(&x, &x, None).unwrap(), 0.0);
        assert_eq!(loss_l1(&x, &x, None).unwrap(), 0.0);
        assert_eq!(loss_l2(&[1.0, 3.0], &[0.0, 0.0], None).unwrap(), 5.0);
        assert_eq!(loss_l1(&[1.0, 3.0], &[0.0, 0.0], Some(&[false, true])).unwrap(), 3.0);
        assert!(matches!(loss_l1(&x, &x, Some(&[false; 3])), Err(Error::EmptyMask)));

        let uniform = Matrix::from_fn(3, 4, |_, _| 0.25);
        let ce = loss_weighted_ce(&uniform, &[0, 1, 3], &[1.0; 4]).unwrap();
        assert!((ce - 4f64.ln()).abs() < 1e-15);

        // two pixels: p = 0.5 on class 0, p = 0.25 on class 1
        let probs = Matrix::from_vec(2, 2, vec![0.5, 0.5, 0.75, 0.25]).unwrap();
        let (l0, l1) = (-(0.5f64).ln(), -(0.25f64).ln());
        let unit = loss_weighted_ce(&probs, &[0, 1], &[1.0, 1.0]).unwrap();
        assert!((unit - (l0 + l1) / 2.0).abs() < 1e-15);
        let doubled = loss_weighted_ce(&probs, &[0, 1], &[1.0, 2.0]).unwrap();
        assert!((doubled - (l0 + 2.0 * l1) / 3.0).abs() < 1e-15);

        let hard = Matrix::from_vec(1, 2, vec![1.0, 0.0]).unwrap();
        assert!((loss_weighted_ce(&hard, &[1], &[1.0, 1.0]).unwrap() + CE_EPSILON.ln()).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn rows_are_stochastic(seed in any::<u64>(), n in 1usize..12, d in 1usize..5, scale in 0.01f64..100.0) {
            let (h, p) = setup(seed, n, d, d, 2, seed % 2 == 1);
            let out = self_attention_forward(&h.scale(scale), &p).unwrap();
            for i in 0..n {
                let row = out.weights.row(i);
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
                prop_assert!(row.iter().all(|&w| (0.0..=1.0).contains(&w)));
            }
        }

        #[test]
        fn l2_nonnegative_and_l1_triangle(
            a in proptest::collection::vec(-5.0f64..5.0, 1..20),
            seed in any::<u64>(),
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let b: Vec<f64> = a.iter().map(|_| rng.random_range(-5.0..5.0)).collect();
            let c: Vec<f64> = a.iter().map(|_| rng.random_range(-5.0..5.0)).collect();
            prop_assert!(loss_l2(&a, &b, None).unwrap() >= 0.0);
            let ab = loss_l1(&a, &b, None).unwrap();
            let ac = loss_l1(&a, &c, None).unwrap();
            let cb = loss_l1(&c, &b, None).unwrap();
            prop_assert!(ab <= ac + cb + 1e-12);
        }
    }
}
