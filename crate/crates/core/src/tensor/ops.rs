use serde::{Deserialize, Serialize};

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

fn require_matrix<F: Scalar>(op: &'static str, t: &Tensor<F>) -> Result<(usize, usize)> {
    if t.shape().len() != 2 {
        return Err(Error::Dimension {
            op,
            left: t.shape().to_vec(),
            right: vec![],
        });
    }
    Ok((t.shape()[0], t.shape()[1]))
}

/// Dot product with eight independent partial sums. The summation order is
/// fixed, so results are reproducible bit for bit.
#[inline]
pub(crate) fn dot<F: Scalar>(a: &[F], b: &[F]) -> F {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [F::zero(); 8];
    let chunks = a.len() / 8;
    for c in 0..chunks {
        let (x, y) = (&a[c * 8..c * 8 + 8], &b[c * 8..c * 8 + 8]);
        for l in 0..8 {
            acc[l] = acc[l] + x[l] * y[l];
        }
    }
    let mut tail = F::zero();
    for i in chunks * 8..a.len() {
        tail = tail + a[i] * b[i];
    }
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7])) + tail
}

#[inline]
pub(crate) fn axpy<F: Scalar>(alpha: F, x: &[F], y: &mut [F]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi = *yi + alpha * xi;
    }
}

/// `a [m×k] · b [k×n]`.
pub fn matmul<F: Scalar>(a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
    let (m, k) = require_matrix("matmul", a)?;
    let (k2, n) = require_matrix("matmul", b)?;
    if k != k2 {
        return Err(Error::Dimension {
            op: "matmul",
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    let mut out = vec![F::zero(); m * n];
    let (ad, bd) = (a.data(), b.data());
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let s = ad[i * k + p];
            if s != F::zero() {
                axpy(s, &bd[p * n..(p + 1) * n], orow);
            }
        }
    }
    Tensor::from_vec(vec![m, n], out)
}

/// `a [m×k] · bᵀ` where `b` is `[n×k]`.
pub fn matmul_nt<F: Scalar>(a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
    let (m, k) = require_matrix("matmul_nt", a)?;
    let (n, k2) = require_matrix("matmul_nt", b)?;
    if k != k2 {
        return Err(Error::Dimension {
            op: "matmul_nt",
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    let mut out = Vec::with_capacity(m * n);
    for i in 0..m {
        let arow = a.row(i);
        out.extend((0..n).map(|j| dot(arow, b.row(j))));
    }
    Tensor::from_vec(vec![m, n], out)
}

/// `aᵀ · b` where `a` is `[k×m]` and `b` is `[k×n]`.
pub fn matmul_tn<F: Scalar>(a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
    let (k, m) = require_matrix("matmul_tn", a)?;
    let (k2, n) = require_matrix("matmul_tn", b)?;
    if k != k2 {
        return Err(Error::Dimension {
            op: "matmul_tn",
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    let mut out = vec![F::zero(); m * n];
    for p in 0..k {
        let (arow, brow) = (a.row(p), b.row(p));
        for i in 0..m {
            if arow[i] != F::zero() {
                axpy(arow[i], brow, &mut out[i * n..(i + 1) * n]);
            }
        }
    }
    Tensor::from_vec(vec![m, n], out)
}

pub(crate) fn softmax_slice<F: Scalar>(z: &[F], inv_tau: F, out: &mut [F]) {
    let max = z.iter().copied().fold(F::neg_infinity(), F::max);
    let mut total = F::zero();
    for (o, &x) in out.iter_mut().zip(z) {
        *o = ((x - max) * inv_tau).exp();
        total = total + *o;
    }
    let inv = total.recip();
    out.iter_mut().for_each(|o| *o = *o * inv);
}

/// Softmax of `z / tau` along the trailing axis.
pub fn softmax_temp<F: Scalar>(z: &Tensor<F>, tau: F) -> Result<Tensor<F>> {
    if !(tau > F::zero()) {
        return Err(Error::Parameter(format!(
            "softmax temperature must be positive, got {tau}"
        )));
    }
    let mut out = Tensor::zeros(z.shape());
    let inv_tau = tau.recip();
    for i in 0..z.rows() {
        softmax_slice(z.row(i), inv_tau, out.row_mut(i));
    }
    Ok(out)
}

/// Row-wise `log softmax(z)` at unit temperature.
pub fn log_softmax_rows<F: Scalar>(z: &Tensor<F>) -> Tensor<F> {
    let mut out = Tensor::zeros(z.shape());
    for i in 0..z.rows() {
        let row = z.row(i);
        let max = row.iter().copied().fold(F::neg_infinity(), F::max);
        let lse = row.iter().map(|&x| (x - max).exp()).sum::<F>().ln() + max;
        for (o, &x) in out.row_mut(i).iter_mut().zip(row) {
            *o = x - lse;
        }
    }
    out
}

/// Index of the largest entry in each row; ties resolve to the lowest index.
pub fn argmax_rows<F: Scalar>(t: &Tensor<F>) -> Vec<u32> {
    (0..t.rows())
        .map(|i| {
            let mut best = 0usize;
            let row = t.row(i);
            for (j, &x) in row.iter().enumerate() {
                if x > row[best] {
                    best = j;
                }
            }
            best as u32
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    /// Tanh approximation, as in GPT-2.
    Gelu,
    Silu,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

#[inline]
fn apply_activation<F: Scalar>(x: F, kind: Activation) -> F {
    match kind {
        Activation::Gelu => {
            let inner = F::of(GELU_C) * (x + F::of(GELU_A) * x * x * x);
            F::of(0.5) * x * (F::one() + inner.tanh())
        }
        Activation::Silu => x / (F::one() + (-x).exp()),
    }
}

#[inline]
fn activation_derivative<F: Scalar>(x: F, kind: Activation) -> F {
    match kind {
        Activation::Gelu => {
            let c = F::of(GELU_C);
            let a = F::of(GELU_A);
            let t = (c * (x + a * x * x * x)).tanh();
            let half = F::of(0.5);
            half * (F::one() + t)
                + half * x * (F::one() - t * t) * c * (F::one() + F::of(3.0) * a * x * x)
        }
        Activation::Silu => {
            let s = F::one() / (F::one() + (-x).exp());
            s * (F::one() + x * (F::one() - s))
        }
    }
}

pub fn activation<F: Scalar>(u: &Tensor<F>, kind: Activation) -> Tensor<F> {
    u.map(|x| apply_activation(x, kind))
}

/// Elementwise derivative of [`activation`] evaluated at `u`.
pub fn activation_grad<F: Scalar>(u: &Tensor<F>, kind: Activation) -> Tensor<F> {
    u.map(|x| activation_derivative(x, kind))
}

pub(crate) struct LayerNormStats<F> {
    pub normalized: Tensor<F>,
    pub inv_std: Vec<F>,
}

pub(crate) fn layer_norm_stats<F: Scalar>(
    u: &Tensor<F>,
    gain: &Tensor<F>,
    bias: &Tensor<F>,
    eps: F,
) -> Result<(Tensor<F>, LayerNormStats<F>)> {
    let d = u.cols();
    if gain.len() != d || bias.len() != d {
        return Err(Error::Dimension {
            op: "layer_norm",
            left: u.shape().to_vec(),
            right: gain.shape().to_vec(),
        });
    }
    if !(eps > F::zero()) {
        return Err(Error::Parameter(format!(
            "layer norm eps must be positive, got {eps}"
        )));
    }
    let inv_d = F::of(d as f64).recip();
    let mut out = Tensor::zeros(u.shape());
    let mut normalized = Tensor::zeros(u.shape());
    let mut inv_std = Vec::with_capacity(u.rows());
    for i in 0..u.rows() {
        let row = u.row(i);
        let mean = row.iter().copied().sum::<F>() * inv_d;
        let var = row.iter().map(|&x| (x - mean) * (x - mean)).sum::<F>() * inv_d;
        let rstd = (var + eps).sqrt().recip();
        inv_std.push(rstd);
        let nrow = normalized.row_mut(i);
        for j in 0..d {
            nrow[j] = (row[j] - mean) * rstd;
        }
        let orow = out.row_mut(i);
        for j in 0..d {
            orow[j] = nrow[j] * gain.data()[j] + bias.data()[j];
        }
    }
    Ok((
        out,
        LayerNormStats {
            normalized,
            inv_std,
        },
    ))
}

/// Per-row normalization to zero mean and unit variance followed by `gain ⊙ x + bias`.
pub fn layer_norm<F: Scalar>(
    u: &Tensor<F>,
    gain: &Tensor<F>,
    bias: &Tensor<F>,
    eps: F,
) -> Result<Tensor<F>> {
    layer_norm_stats(u, gain, bias, eps).map(|(out, _)| out)
}

/// Softmax weights saved from a causal attention forward, laid out
/// `[head][query][key]` with zeros above the diagonal.
#[derive(Debug, Clone)]
pub struct AttentionProbs<F> {
    pub n_heads: usize,
    pub seq_len: usize,
    pub probs: Vec<F>,
}

impl<F: Scalar> AttentionProbs<F> {
    pub fn get(&self, head: usize, query: usize, key: usize) -> F {
        self.probs[(head * self.seq_len + query) * self.seq_len + key]
    }
}

/// Multi-head causal attention over a packed `[n × 3d]` query/key/value matrix.
pub fn causal_attention<F: Scalar>(
    qkv: &Tensor<F>,
    n_heads: usize,
) -> Result<(Tensor<F>, AttentionProbs<F>)> {
    let (n, three_d) = require_matrix("causal_attention", qkv)?;
    if three_d % 3 != 0 || n_heads == 0 || (three_d / 3) % n_heads != 0 {
        return Err(Error::Dimension {
            op: "causal_attention",
            left: qkv.shape().to_vec(),
            right: vec![n_heads],
        });
    }
    let d = three_d / 3;
    let dh = d / n_heads;
    let scale = F::of(dh as f64).sqrt().recip();
    let mut out = Tensor::zeros(&[n, d]);
    let mut probs = vec![F::zero(); n_heads * n * n];
    let mut scores = vec![F::zero(); n];
    for h in 0..n_heads {
        let (qo, ko, vo) = (h * dh, d + h * dh, 2 * d + h * dh);
        for i in 0..n {
            let q = &qkv.row(i)[qo..qo + dh];
            for j in 0..=i {
                scores[j] = dot(q, &qkv.row(j)[ko..ko + dh]) * scale;
            }
            let p = &mut probs[(h * n + i) * n..(h * n + i) * n + i + 1];
            softmax_slice(&scores[..=i], F::one(), p);
            let orow = &mut out.row_mut(i)[qo..qo + dh];
            for j in 0..=i {
                axpy(p[j], &qkv.row(j)[vo..vo + dh], orow);
            }
        }
    }
    Ok((
        out,
        AttentionProbs {
            n_heads,
            seq_len: n,
            probs,
        },
    ))
}

pub fn add_bias<F: Scalar>(t: &mut Tensor<F>, bias: &Tensor<F>) {
    let c = t.cols();
    debug_assert_eq!(bias.len(), c);
    for i in 0..t.rows() {
        for (x, &b) in t.row_mut(i).iter_mut().zip(bias.data()) {
            *x = *x + b;
        }
    }
}

/// Full attention sublayer: packed projection, causal attention, output projection.
///
/// `w_qkv` is `[d × 3d]`, `w_out` is `[d × d]` (inputs multiply from the left).
pub fn causal_self_attention<F: Scalar>(
    x: &Tensor<F>,
    w_qkv: &Tensor<F>,
    b_qkv: &Tensor<F>,
    w_out: &Tensor<F>,
    b_out: &Tensor<F>,
    n_heads: usize,
    max_seq_len: usize,
) -> Result<Tensor<F>> {
    if x.rows() > max_seq_len {
        return Err(Error::Capacity {
            len: x.rows(),
            max: max_seq_len,
        });
    }
    let mut qkv = matmul(x, w_qkv)?;
    add_bias(&mut qkv, b_qkv);
    let (att, _) = causal_attention(&qkv, n_heads)?;
    let mut out = matmul(&att, w_out)?;
    add_bias(&mut out, b_out);
    Ok(out)
}
