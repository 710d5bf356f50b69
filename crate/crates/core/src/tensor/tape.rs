//! Reverse-mode gradients for the fixed transformer graph.
//!
//! A [`Tape`] records each primitive as it is evaluated. Model parameters are
//! borrowed, never copied and never given gradient storage; only the single
//! differentiation root (the relaxed input) and its descendants carry
//! gradients.

use super::ops::{self, axpy, causal_attention, dot, layer_norm_stats, LayerNormStats};
use super::{Activation, AttentionProbs, Scalar, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

enum Op<'w, F> {
    Root,
    Constant,
    Softmax {
        input: NodeId,
        tau: F,
    },
    MatMul {
        a: NodeId,
        b: NodeId,
    },
    /// `a · w`, or `a · wᵀ` when `transposed`.
    MatMulWeight {
        a: NodeId,
        w: &'w Tensor<F>,
        transposed: bool,
    },
    AddBias {
        a: NodeId,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    /// Adds the leading rows of a constant matrix (position embeddings).
    AddRows {
        a: NodeId,
    },
    /// Appends constant rows below `a`.
    ConcatRows {
        a: NodeId,
    },
    LayerNorm {
        a: NodeId,
        gain: &'w Tensor<F>,
        stats: LayerNormStats<F>,
    },
    Activation {
        a: NodeId,
        kind: Activation,
    },
    Attention {
        qkv: NodeId,
        probs: AttentionProbs<F>,
    },
    SumAll {
        a: NodeId,
    },
    /// Scalar with caller-supplied partial derivatives.
    Loss {
        parts: Vec<(NodeId, Tensor<F>)>,
    },
}

struct Node<'w, F> {
    op: Op<'w, F>,
    value: Tensor<F>,
    requires_grad: bool,
}

pub struct Tape<'w, F> {
    nodes: Vec<Node<'w, F>>,
    root: Option<NodeId>,
}

impl<'w, F: Scalar> Default for Tape<'w, F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'w, F: Scalar> Tape<'w, F> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            root: None,
        }
    }

    fn push(&mut self, op: Op<'w, F>, value: Tensor<F>, requires_grad: bool) -> NodeId {
        debug_assert!(value.is_finite(), "non-finite value recorded on tape");
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    pub fn value(&self, id: NodeId) -> &Tensor<F> {
        &self.nodes[id.0].value
    }

    pub fn root(&self) -> Option<NodeId> {
        self.root
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Marks `value` as the differentiation root. At most one root per tape.
    pub fn input(&mut self, value: Tensor<F>) -> Result<NodeId> {
        if self.root.is_some() {
            return Err(Error::Contract("tape already has a root".into()));
        }
        let id = self.push(Op::Root, value, true);
        self.root = Some(id);
        Ok(id)
    }

    pub fn constant(&mut self, value: Tensor<F>) -> NodeId {
        self.push(Op::Constant, value, false)
    }

    pub fn softmax(&mut self, input: NodeId, tau: F) -> Result<NodeId> {
        let value = ops::softmax_temp(self.value(input), tau)?;
        let rg = self.needs(input);
        Ok(self.push(Op::Softmax { input, tau }, value, rg))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = ops::matmul(self.value(a), self.value(b))?;
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(Op::MatMul { a, b }, value, rg))
    }

    pub fn matmul_weight(&mut self, a: NodeId, w: &'w Tensor<F>) -> Result<NodeId> {
        let value = ops::matmul(self.value(a), w)?;
        let rg = self.needs(a);
        Ok(self.push(
            Op::MatMulWeight {
                a,
                w,
                transposed: false,
            },
            value,
            rg,
        ))
    }

    pub fn matmul_weight_t(&mut self, a: NodeId, w: &'w Tensor<F>) -> Result<NodeId> {
        let value = ops::matmul_nt(self.value(a), w)?;
        let rg = self.needs(a);
        Ok(self.push(
            Op::MatMulWeight {
                a,
                w,
                transposed: true,
            },
            value,
            rg,
        ))
    }

    pub fn add_bias(&mut self, a: NodeId, bias: &'w Tensor<F>) -> Result<NodeId> {
        let mut value = self.value(a).clone();
        if bias.len() != value.cols() {
            return Err(Error::Dimension {
                op: "add_bias",
                left: value.shape().to_vec(),
                right: bias.shape().to_vec(),
            });
        }
        ops::add_bias(&mut value, bias);
        let rg = self.needs(a);
        Ok(self.push(Op::AddBias { a }, value, rg))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::Dimension {
                op: "add",
                left: self.value(a).shape().to_vec(),
                right: self.value(b).shape().to_vec(),
            });
        }
        let mut value = self.value(a).clone();
        value.add_assign(self.value(b));
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Add { a, b }, value, rg))
    }

    /// `a + rows[..a.rows()]`, for a constant table with at least as many rows.
    pub fn add_rows(&mut self, a: NodeId, rows: &'w Tensor<F>) -> Result<NodeId> {
        let (n, c) = (self.value(a).rows(), self.value(a).cols());
        if rows.cols() != c {
            return Err(Error::Dimension {
                op: "add_rows",
                left: self.value(a).shape().to_vec(),
                right: rows.shape().to_vec(),
            });
        }
        if rows.rows() < n {
            return Err(Error::Capacity {
                len: n,
                max: rows.rows(),
            });
        }
        let mut value = self.value(a).clone();
        for (x, &p) in value.data_mut().iter_mut().zip(&rows.data()[..n * c]) {
            *x = *x + p;
        }
        let rg = self.needs(a);
        Ok(self.push(Op::AddRows { a }, value, rg))
    }

    pub fn concat_rows(&mut self, a: NodeId, tail: &Tensor<F>) -> Result<NodeId> {
        let head = self.value(a);
        if tail.rows() > 0 && tail.cols() != head.cols() {
            return Err(Error::Dimension {
                op: "concat_rows",
                left: head.shape().to_vec(),
                right: tail.shape().to_vec(),
            });
        }
        let mut data = head.data().to_vec();
        data.extend_from_slice(tail.data());
        let value = Tensor::from_vec(vec![head.rows() + tail.rows(), head.cols()], data)?;
        let rg = self.needs(a);
        Ok(self.push(Op::ConcatRows { a }, value, rg))
    }

    pub fn layer_norm(
        &mut self,
        a: NodeId,
        gain: &'w Tensor<F>,
        bias: &'w Tensor<F>,
        eps: F,
    ) -> Result<NodeId> {
        let (value, stats) = layer_norm_stats(self.value(a), gain, bias, eps)?;
        let rg = self.needs(a);
        Ok(self.push(Op::LayerNorm { a, gain, stats }, value, rg))
    }

    pub fn activation(&mut self, a: NodeId, kind: Activation) -> NodeId {
        let value = ops::activation(self.value(a), kind);
        let rg = self.needs(a);
        self.push(Op::Activation { a, kind }, value, rg)
    }

    pub fn causal_attention(&mut self, qkv: NodeId, n_heads: usize) -> Result<NodeId> {
        let (value, probs) = causal_attention(self.value(qkv), n_heads)?;
        let rg = self.needs(qkv);
        Ok(self.push(Op::Attention { qkv, probs }, value, rg))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let value = Tensor::scalar(self.value(a).sum());
        let rg = self.needs(a);
        self.push(Op::SumAll { a }, value, rg)
    }

    /// Records a scalar whose partial derivatives with respect to earlier
    /// nodes were computed by the caller.
    pub fn loss(&mut self, value: F, parts: Vec<(NodeId, Tensor<F>)>) -> Result<NodeId> {
        for (id, g) in &parts {
            if self.value(*id).shape() != g.shape() {
                return Err(Error::Dimension {
                    op: "loss",
                    left: self.value(*id).shape().to_vec(),
                    right: g.shape().to_vec(),
                });
            }
        }
        let rg = parts.iter().any(|(id, _)| self.needs(*id));
        Ok(self.push(Op::Loss { parts }, Tensor::scalar(value), rg))
    }

    /// Gradient of the scalar node `loss` with respect to the tape root.
    ///
    /// Nodes are visited once each in reverse recording order, which is a
    /// reverse topological order because inputs are always recorded first.
    pub fn backward(&self, loss: NodeId) -> Result<Tensor<F>> {
        let root = self
            .root
            .ok_or_else(|| Error::Contract("tape has no differentiation root".into()))?;
        if !self.value(loss).is_scalar() {
            return Err(Error::Contract(format!(
                "loss must be scalar, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<F>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::filled(self.value(loss).shape(), F::one()));
        for idx in (root.0 + 1..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            self.propagate(node, g, &mut grads)?;
        }
        Ok(grads[root.0]
            .take()
            .unwrap_or_else(|| Tensor::zeros(self.value(root).shape())))
    }

    fn propagate(
        &self,
        node: &Node<'w, F>,
        g: Tensor<F>,
        grads: &mut [Option<Tensor<F>>],
    ) -> Result<()> {
        match &node.op {
            Op::Root | Op::Constant => {}
            Op::Softmax { input, tau } => {
                let y = &node.value;
                let inv_tau = tau.recip();
                let mut dz = Tensor::zeros(y.shape());
                for i in 0..y.rows() {
                    let (yr, gr) = (y.row(i), g.row(i));
                    let inner = dot(yr, gr);
                    for (o, (&yj, &gj)) in dz.row_mut(i).iter_mut().zip(yr.iter().zip(gr)) {
                        *o = inv_tau * yj * (gj - inner);
                    }
                }
                self.accumulate(grads, *input, dz);
            }
            Op::MatMul { a, b } => {
                if self.needs(*a) {
                    let da = ops::matmul_nt(&g, self.value(*b))?;
                    self.accumulate(grads, *a, da);
                }
                if self.needs(*b) {
                    let db = ops::matmul_tn(self.value(*a), &g)?;
                    self.accumulate(grads, *b, db);
                }
            }
            Op::MatMulWeight { a, w, transposed } => {
                let da = if *transposed {
                    ops::matmul(&g, w)?
                } else {
                    ops::matmul_nt(&g, w)?
                };
                self.accumulate(grads, *a, da);
            }
            Op::AddBias { a } | Op::AddRows { a } => self.accumulate(grads, *a, g),
            Op::Add { a, b } => {
                if self.needs(*b) {
                    self.accumulate(grads, *b, g.clone());
                }
                if self.needs(*a) {
                    self.accumulate(grads, *a, g);
                }
            }
            Op::ConcatRows { a } => {
                let n = self.value(*a).rows();
                self.accumulate(grads, *a, g.slice_rows(0, n));
            }
            Op::LayerNorm { a, gain, stats } => {
                let d = g.cols();
                let inv_d = F::of(d as f64).recip();
                let mut dx = Tensor::zeros(g.shape());
                let mut dxhat = vec![F::zero(); d];
                for i in 0..g.rows() {
                    let xhat = stats.normalized.row(i);
                    for (j, v) in dxhat.iter_mut().enumerate() {
                        *v = g.row(i)[j] * gain.data()[j];
                    }
                    let mean_d = dxhat.iter().copied().sum::<F>() * inv_d;
                    let mean_dx = dot(&dxhat, xhat) * inv_d;
                    let rstd = stats.inv_std[i];
                    for (j, o) in dx.row_mut(i).iter_mut().enumerate() {
                        *o = rstd * (dxhat[j] - mean_d - xhat[j] * mean_dx);
                    }
                }
                self.accumulate(grads, *a, dx);
            }
            Op::Activation { a, kind } => {
                let mut dx = ops::activation_grad(self.value(*a), *kind);
                for (d, &gi) in dx.data_mut().iter_mut().zip(g.data()) {
                    *d = *d * gi;
                }
                self.accumulate(grads, *a, dx);
            }
            Op::Attention { qkv, probs } => {
                let dqkv = attention_backward(self.value(*qkv), probs, &g);
                self.accumulate(grads, *qkv, dqkv);
            }
            Op::SumAll { a } => {
                let s = g.data()[0];
                self.accumulate(grads, *a, Tensor::filled(self.value(*a).shape(), s));
            }
            Op::Loss { parts } => {
                let s = g.data()[0];
                for (id, partial) in parts {
                    if self.needs(*id) {
                        let mut t = partial.clone();
                        t.scale(s);
                        self.accumulate(grads, *id, t);
                    }
                }
            }
        }
        Ok(())
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<F>>], id: NodeId, g: Tensor<F>) {
        match &mut grads[id.0] {
            Some(existing) => existing.add_assign(&g),
            slot => *slot = Some(g),
        }
    }
}

fn attention_backward<F: Scalar>(
    qkv: &Tensor<F>,
    probs: &AttentionProbs<F>,
    dout: &Tensor<F>,
) -> Tensor<F> {
    let n = qkv.rows();
    let d = qkv.cols() / 3;
    let dh = d / probs.n_heads;
    let scale = F::of(dh as f64).sqrt().recip();
    let mut dqkv = Tensor::zeros(qkv.shape());
    let mut dp = vec![F::zero(); n];
    for h in 0..probs.n_heads {
        let (qo, ko, vo) = (h * dh, d + h * dh, 2 * d + h * dh);
        for i in 0..n {
            let go = &dout.row(i)[qo..qo + dh];
            for j in 0..=i {
                let p = probs.get(h, i, j);
                dp[j] = dot(go, &qkv.row(j)[vo..vo + dh]);
                axpy(p, go, &mut dqkv.row_mut(j)[vo..vo + dh]);
            }
            let inner = (0..=i).map(|j| probs.get(h, i, j) * dp[j]).sum::<F>();
            for j in 0..=i {
                let ds = probs.get(h, i, j) * (dp[j] - inner) * scale;
                if ds == F::zero() {
                    continue;
                }
                let kj: Vec<F> = qkv.row(j)[ko..ko + dh].to_vec();
                axpy(ds, &kj, &mut dqkv.row_mut(i)[qo..qo + dh]);
                let qi: Vec<F> = qkv.row(i)[qo..qo + dh].to_vec();
                axpy(ds, &qi, &mut dqkv.row_mut(j)[ko..ko + dh]);
            }
        }
    }
    dqkv
}

/// Gradient of a recorded scalar loss with respect to the tape root.
pub fn input_gradient<F: Scalar>(tape: &Tape<'_, F>, loss: NodeId) -> Result<Tensor<F>> {
    tape.backward(loss)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], seed: u64, scale: f64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::from_vec(
            shape.to_vec(),
            (0..n).map(|_| rng.random_range(-scale..scale)).collect(),
        )
        .unwrap()
    }

    /// Central differences of `f` at `x`, step `h`.
    fn finite_difference(x: &Tensor<f64>, h: f64, f: impl Fn(&Tensor<f64>) -> f64) -> Vec<f64> {
        (0..x.len())
            .map(|i| {
                let mut plus = x.clone();
                plus.data_mut()[i] += h;
                let mut minus = x.clone();
                minus.data_mut()[i] -= h;
                (f(&plus) - f(&minus)) / (2.0 * h)
            })
            .collect()
    }

    fn assert_close(analytic: &Tensor<f64>, numeric: &[f64]) {
        for (i, (&a, &n)) in analytic.data().iter().zip(numeric).enumerate() {
            if a.abs() < 1e-8 && n.abs() < 1e-8 {
                continue;
            }
            let rel = (a - n).abs() / a.abs().max(n.abs());
            assert!(
                rel < 1e-4 || (a - n).abs() < 1e-9,
                "coord {i}: analytic {a} vs numeric {n}"
            );
        }
    }

    /// Weighted sum so every output coordinate gets a distinct upstream gradient.
    fn weighted(tape: &mut Tape<'_, f64>, out: NodeId, weights: &Tensor<f64>) -> NodeId {
        let v = tape.value(out);
        let value = v
            .data()
            .iter()
            .zip(weights.data())
            .map(|(a, b)| a * b)
            .sum();
        tape.loss(value, vec![(out, weights.clone())]).unwrap()
    }

    fn check(
        x: Tensor<f64>,
        out_shape_seed: u64,
        build: impl for<'a> Fn(&mut Tape<'a, f64>, NodeId) -> NodeId,
    ) {
        let mut probe = Tape::new();
        let r = probe.input(x.clone()).unwrap();
        let o = build(&mut probe, r);
        let weights = random(probe.value(o).shape(), out_shape_seed, 1.0);
        let loss = weighted(&mut probe, o, &weights);
        let analytic = input_gradient(&probe, loss).unwrap();
        let numeric = finite_difference(&x, 1e-5, |xp| {
            let mut t = Tape::new();
            let r = t.input(xp.clone()).unwrap();
            let o = build(&mut t, r);
            t.value(o)
                .data()
                .iter()
                .zip(weights.data())
                .map(|(a, b)| a * b)
                .sum()
        });
        assert_close(&analytic, &numeric);
    }

    #[test]
    fn sum_of_input_has_unit_gradient() {
        let mut tape = Tape::new();
        let z = tape.input(random(&[2, 3], 1, 1.0)).unwrap();
        let s = tape.sum(z);
        let g = input_gradient(&tape, s).unwrap();
        assert_eq!(g.data(), &[1.0; 6]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut tape = Tape::<f64>::new();
        let z = tape.input(Tensor::zeros(&[2, 2])).unwrap();
        assert!(matches!(input_gradient(&tape, z), Err(Error::Contract(_))));
    }

    #[test]
    fn softmax_backward() {
        check(random(&[2, 5], 2, 1.0), 3, |t, r| {
            t.softmax(r, 0.7).unwrap()
        });
    }

    #[test]
    fn matmul_backward_both_operands() {
        // root on both sides of the product
        check(random(&[3, 3], 4, 1.0), 6, |t, r| t.matmul(r, r).unwrap());
        check(random(&[4, 3], 7, 1.0), 8, |t, r| {
            let a = t.constant(random(&[2, 4], 9, 1.0));
            t.matmul(a, r).unwrap()
        });
    }

    static W34: std::sync::LazyLock<Tensor<f64>> =
        std::sync::LazyLock::new(|| random(&[3, 4], 10, 1.0));
    static GAIN: std::sync::LazyLock<Tensor<f64>> =
        std::sync::LazyLock::new(|| random(&[4], 11, 1.0));
    static BIAS: std::sync::LazyLock<Tensor<f64>> =
        std::sync::LazyLock::new(|| random(&[4], 12, 1.0));
    static QKV_W: std::sync::LazyLock<Tensor<f64>> =
        std::sync::LazyLock::new(|| random(&[4, 12], 13, 1.0));

    #[test]
    fn weight_products_backward() {
        check(random(&[2, 3], 14, 1.0), 15, |t, r| {
            t.matmul_weight(r, &W34).unwrap()
        });
        check(random(&[2, 4], 16, 1.0), 17, |t, r| {
            t.matmul_weight_t(r, &W34).unwrap()
        });
    }

    #[test]
    fn layer_norm_backward() {
        check(random(&[3, 4], 18, 1.0), 19, |t, r| {
            t.layer_norm(r, &GAIN, &BIAS, 1e-5).unwrap()
        });
    }

    #[test]
    fn activation_backward() {
        for kind in [Activation::Gelu, Activation::Silu] {
            check(random(&[2, 5], 20, 3.0), 21, move |t, r| {
                t.activation(r, kind)
            });
        }
    }

    #[test]
    fn attention_backward_matches_finite_differences() {
        check(random(&[4, 12], 22, 1.0), 23, |t, r| {
            t.causal_attention(r, 2).unwrap()
        });
        // through the projection, so queries/keys/values share the root
        check(random(&[3, 4], 24, 1.0), 25, |t, r| {
            let q = t.matmul_weight(r, &QKV_W).unwrap();
            t.causal_attention(q, 2).unwrap()
        });
    }

    #[test]
    fn residual_concat_and_rows_backward() {
        check(random(&[2, 4], 26, 1.0), 27, |t, r| {
            let tail = random(&[2, 4], 28, 1.0);
            let c = t.concat_rows(r, &tail).unwrap();
            let p = t.add_rows(c, &BIG_ROWS).unwrap();
            let b = t.add_bias(p, &BIAS).unwrap();
            let ln = t.layer_norm(b, &GAIN, &BIAS, 1e-5).unwrap();
            t.add(ln, b).unwrap()
        });
    }

    static BIG_ROWS: std::sync::LazyLock<Tensor<f64>> =
        std::sync::LazyLock::new(|| random(&[6, 4], 29, 1.0));

    #[test]
    fn backward_is_deterministic() {
        let mut tape = Tape::new();
        let r = tape.input(random(&[3, 4], 30, 1.0)).unwrap();
        let q = tape.matmul_weight(r, &QKV_W).unwrap();
        let a = tape.causal_attention(q, 2).unwrap();
        let s = tape.softmax(a, 0.3).unwrap();
        let l = tape.sum(s);
        let g1 = input_gradient(&tape, l).unwrap();
        let g2 = input_gradient(&tape, l).unwrap();
        assert_eq!(g1.data(), g2.data());
    }

    #[test]
    fn constants_do_not_require_grad() {
        let mut tape = Tape::<f64>::new();
        let r = tape.input(Tensor::zeros(&[1, 3])).unwrap();
        let c = tape.constant(Tensor::zeros(&[3, 3]));
        let cs = tape.sum(c);
        let rs = tape.sum(r);
        let both = tape.add(cs, rs).unwrap();
        let g = input_gradient(&tape, both).unwrap();
        assert_eq!(g.data(), &[1.0, 1.0, 1.0]);
    }
}
