//! A small frozen decoder-only transformer.
//!
//! The block layout follows GPT-2: learned absolute position embeddings, pre-layernorm
//! blocks with a packed query/key/value projection, and a final layernorm before
//! the output head. The input side accepts hard token ids, one-hot rows,
//! softmax-relaxed rows or dense embeddings, so the same weights serve every
//! search strategy.

mod checkpoint;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{
    self, argmax_rows, causal_attention, layer_norm, matmul, matmul_nt, Activation, NodeId, Scalar,
    Tape, Tensor,
};

pub use checkpoint::{load_checkpoint, read_checkpoint_dtype, save_checkpoint, MAGIC};

pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
    pub activation: Activation,
    pub layernorm_eps: f64,
    /// Output head reuses the token embedding matrix.
    pub tie_output: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 64,
            n_layers: 2,
            d_model: 32,
            n_heads: 4,
            d_ff: 128,
            max_seq_len: 32,
            activation: Activation::Gelu,
            layernorm_eps: 1e-5,
            tie_output: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let extents = [
            ("vocab_size", self.vocab_size),
            ("n_layers", self.n_layers),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("max_seq_len", self.max_seq_len),
        ];
        if let Some((name, _)) = extents.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.vocab_size > u32::MAX as usize {
            return Err(Error::Config("vocab_size exceeds u32 range".into()));
        }
        if !(self.layernorm_eps > 0.0) {
            return Err(Error::Config("layernorm_eps must be positive".into()));
        }
        Ok(())
    }

    /// Every parameter tensor by checkpoint name, with its shape, in storage order.
    pub fn tensor_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let (d, v, ff) = (self.d_model, self.vocab_size, self.d_ff);
        let mut out = vec![
            ("wte".to_string(), vec![d, v]),
            ("wpe".to_string(), vec![self.max_seq_len, d]),
        ];
        for l in 0..self.n_layers {
            let p = |s: &str| format!("h.{l}.{s}");
            out.extend([
                (p("ln_1.g"), vec![d]),
                (p("ln_1.b"), vec![d]),
                (p("attn.qkv.w"), vec![d, 3 * d]),
                (p("attn.qkv.b"), vec![3 * d]),
                (p("attn.proj.w"), vec![d, d]),
                (p("attn.proj.b"), vec![d]),
                (p("ln_2.g"), vec![d]),
                (p("ln_2.b"), vec![d]),
                (p("mlp.fc.w"), vec![d, ff]),
                (p("mlp.fc.b"), vec![ff]),
                (p("mlp.proj.w"), vec![ff, d]),
                (p("mlp.proj.b"), vec![d]),
            ]);
        }
        out.push(("ln_f.g".to_string(), vec![d]));
        out.push(("ln_f.b".to_string(), vec![d]));
        if !self.tie_output {
            out.push(("lm_head".to_string(), vec![v, d]));
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block<F> {
    pub ln1_gain: Tensor<F>,
    pub ln1_bias: Tensor<F>,
    /// `[d × 3d]`, columns ordered query | key | value.
    pub qkv_w: Tensor<F>,
    pub qkv_b: Tensor<F>,
    pub attn_proj_w: Tensor<F>,
    pub attn_proj_b: Tensor<F>,
    pub ln2_gain: Tensor<F>,
    pub ln2_bias: Tensor<F>,
    pub fc_w: Tensor<F>,
    pub fc_b: Tensor<F>,
    pub mlp_proj_w: Tensor<F>,
    pub mlp_proj_b: Tensor<F>,
}

/// Frozen parameters plus the configuration they were built for.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights<F> {
    pub config: ModelConfig,
    /// `[d_model × vocab]`: column `v` embeds token `v`.
    pub token_embedding: Tensor<F>,
    /// `[max_seq_len × d_model]`.
    pub position_embedding: Tensor<F>,
    pub blocks: Vec<Block<F>>,
    pub final_gain: Tensor<F>,
    pub final_bias: Tensor<F>,
    /// `[vocab × d_model]`; `None` when tied to the token embedding.
    pub output_head: Option<Tensor<F>>,
}

/// How the input positions enter the network.
#[derive(Debug, Clone)]
pub enum ModelInput<F> {
    /// Auxiliary variables `Z [n × V]`, passed through a temperature softmax.
    Relaxed { z: Tensor<F>, tau: F },
    /// One-hot (or any) distribution rows `[n × V]` used directly.
    Distribution(Tensor<F>),
    /// Dense embeddings `[n × d_model]`, bypassing the token embedding.
    Embeddings(Tensor<F>),
}

/// A recorded forward pass.
pub struct Forward<'w, F> {
    pub tape: Tape<'w, F>,
    /// Logits for every position, `[n_total × V]`.
    pub logits: NodeId,
    /// Distribution rows over the vocabulary at the input positions, when the
    /// input was a relaxed or explicit distribution.
    pub input_distribution: Option<NodeId>,
    pub n_input: usize,
}

impl<'w, F: Scalar> Forward<'w, F> {
    pub fn logits(&self) -> &Tensor<F> {
        self.tape.value(self.logits)
    }
}

impl<F: Scalar> ModelWeights<F> {
    pub fn vocab_size(&self) -> usize {
        self.config.vocab_size
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor<F>)> {
        let mut out = vec![
            ("wte".to_string(), &self.token_embedding),
            ("wpe".to_string(), &self.position_embedding),
        ];
        for (l, b) in self.blocks.iter().enumerate() {
            let p = |s: &str| format!("h.{l}.{s}");
            out.extend([
                (p("ln_1.g"), &b.ln1_gain),
                (p("ln_1.b"), &b.ln1_bias),
                (p("attn.qkv.w"), &b.qkv_w),
                (p("attn.qkv.b"), &b.qkv_b),
                (p("attn.proj.w"), &b.attn_proj_w),
                (p("attn.proj.b"), &b.attn_proj_b),
                (p("ln_2.g"), &b.ln2_gain),
                (p("ln_2.b"), &b.ln2_bias),
                (p("mlp.fc.w"), &b.fc_w),
                (p("mlp.fc.b"), &b.fc_b),
                (p("mlp.proj.w"), &b.mlp_proj_w),
                (p("mlp.proj.b"), &b.mlp_proj_b),
            ]);
        }
        out.push(("ln_f.g".to_string(), &self.final_gain));
        out.push(("ln_f.b".to_string(), &self.final_bias));
        if let Some(h) = &self.output_head {
            out.push(("lm_head".to_string(), h));
        }
        out
    }

    /// Assembles weights from tensors given in [`ModelConfig::tensor_shapes`] order.
    pub(crate) fn from_ordered(config: ModelConfig, tensors: Vec<Tensor<F>>) -> Result<Self> {
        let expected = config.tensor_shapes();
        if tensors.len() != expected.len() {
            return Err(Error::Contract(format!(
                "expected {} tensors, got {}",
                expected.len(),
                tensors.len()
            )));
        }
        for ((name, shape), t) in expected.iter().zip(&tensors) {
            if t.shape() != shape.as_slice() {
                return Err(Error::Contract(format!(
                    "{name}: shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
        }
        let mut it = tensors.into_iter();
        let mut next = || it.next().expect("length checked");
        let token_embedding = next();
        let position_embedding = next();
        let mut blocks = Vec::with_capacity(config.n_layers);
        for _ in 0..config.n_layers {
            blocks.push(Block {
                ln1_gain: next(),
                ln1_bias: next(),
                qkv_w: next(),
                qkv_b: next(),
                attn_proj_w: next(),
                attn_proj_b: next(),
                ln2_gain: next(),
                ln2_bias: next(),
                fc_w: next(),
                fc_b: next(),
                mlp_proj_w: next(),
                mlp_proj_b: next(),
            });
        }
        let final_gain = next();
        let final_bias = next();
        let output_head = (!config.tie_output).then(&mut next);
        Ok(Self {
            config,
            token_embedding,
            position_embedding,
            blocks,
            final_gain,
            final_bias,
            output_head,
        })
    }

    pub fn cast<G: Scalar>(&self) -> ModelWeights<G> {
        let tensors = self
            .named_tensors()
            .into_iter()
            .map(|(_, t)| t.cast())
            .collect();
        ModelWeights::from_ordered(self.config.clone(), tensors).expect("same layout")
    }

    fn check_capacity(&self, len: usize) -> Result<()> {
        if len > self.config.max_seq_len {
            return Err(Error::Capacity {
                len,
                max: self.config.max_seq_len,
            });
        }
        Ok(())
    }

    fn check_ids(&self, ids: &[u32]) -> Result<()> {
        if let Some(&bad) = ids.iter().find(|&&t| t as usize >= self.config.vocab_size) {
            return Err(Error::Contract(format!(
                "token id {bad} outside vocabulary of {}",
                self.config.vocab_size
            )));
        }
        Ok(())
    }

    /// Token embeddings (no positions), `[ids.len() × d_model]`.
    pub fn embed_tokens(&self, ids: &[u32]) -> Tensor<F> {
        let d = self.config.d_model;
        let v = self.config.vocab_size;
        let wte = self.token_embedding.data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            out.extend((0..d).map(|j| wte[j * v + id as usize]));
        }
        Tensor::from_vec(vec![ids.len(), d], out).expect("shape by construction")
    }

    /// Token embedding matrix as `[V × d_model]` rows, for nearest-neighbour lookups.
    pub fn embedding_rows(&self) -> Tensor<F> {
        self.token_embedding.transpose()
    }

    /// Plain forward pass over hard token ids; returns logits for every position.
    pub fn forward_tokens(&self, ids: &[u32]) -> Result<Tensor<F>> {
        if ids.is_empty() {
            return Err(Error::Contract("empty token sequence".into()));
        }
        self.check_capacity(ids.len())?;
        self.check_ids(ids)?;
        let cfg = &self.config;
        let eps = F::of(cfg.layernorm_eps);
        let mut x = self.embed_tokens(ids);
        let d = cfg.d_model;
        for (v, &p) in x
            .data_mut()
            .iter_mut()
            .zip(&self.position_embedding.data()[..ids.len() * d])
        {
            *v = *v + p;
        }
        for b in &self.blocks {
            let a = layer_norm(&x, &b.ln1_gain, &b.ln1_bias, eps)?;
            let mut qkv = matmul(&a, &b.qkv_w)?;
            tensor::add_bias(&mut qkv, &b.qkv_b);
            let (att, _) = causal_attention(&qkv, cfg.n_heads)?;
            let mut o = matmul(&att, &b.attn_proj_w)?;
            tensor::add_bias(&mut o, &b.attn_proj_b);
            x.add_assign(&o);
            let h = layer_norm(&x, &b.ln2_gain, &b.ln2_bias, eps)?;
            let mut h = matmul(&h, &b.fc_w)?;
            tensor::add_bias(&mut h, &b.fc_b);
            let h = tensor::activation(&h, cfg.activation);
            let mut h = matmul(&h, &b.mlp_proj_w)?;
            tensor::add_bias(&mut h, &b.mlp_proj_b);
            x.add_assign(&h);
        }
        let u = layer_norm(&x, &self.final_gain, &self.final_bias, eps)?;
        match &self.output_head {
            Some(head) => matmul_nt(&u, head),
            None => matmul(&u, &self.token_embedding),
        }
    }

    /// Records a forward pass whose input positions come from `input`, followed
    /// by the hard tokens `tail` (teacher-forced context).
    pub fn forward_recorded(&self, input: ModelInput<F>, tail: &[u32]) -> Result<Forward<'_, F>> {
        let cfg = &self.config;
        let (n, width) = match &input {
            ModelInput::Relaxed { z, .. } | ModelInput::Distribution(z) => (z.rows(), z.cols()),
            ModelInput::Embeddings(e) => (e.rows(), e.cols()),
        };
        let expected_width = match &input {
            ModelInput::Embeddings(_) => cfg.d_model,
            _ => cfg.vocab_size,
        };
        if width != expected_width {
            return Err(Error::Dimension {
                op: "forward_recorded",
                left: vec![n, width],
                right: vec![n, expected_width],
            });
        }
        self.check_capacity(n + tail.len())?;
        self.check_ids(tail)?;
        let eps = F::of(cfg.layernorm_eps);
        let mut tape = Tape::new();
        let (embedded, input_distribution) = match input {
            ModelInput::Relaxed { z, tau } => {
                let root = tape.input(z)?;
                let h = tape.softmax(root, tau)?;
                (tape.matmul_weight_t(h, &self.token_embedding)?, Some(h))
            }
            ModelInput::Distribution(h) => {
                let root = tape.input(h)?;
                (
                    tape.matmul_weight_t(root, &self.token_embedding)?,
                    Some(root),
                )
            }
            ModelInput::Embeddings(e) => (tape.input(e)?, None),
        };
        let mut x = if tail.is_empty() {
            embedded
        } else {
            tape.concat_rows(embedded, &self.embed_tokens(tail))?
        };
        x = tape.add_rows(x, &self.position_embedding)?;
        for b in &self.blocks {
            let a = tape.layer_norm(x, &b.ln1_gain, &b.ln1_bias, eps)?;
            let qkv = tape.matmul_weight(a, &b.qkv_w)?;
            let qkv = tape.add_bias(qkv, &b.qkv_b)?;
            let att = tape.causal_attention(qkv, cfg.n_heads)?;
            let o = tape.matmul_weight(att, &b.attn_proj_w)?;
            let o = tape.add_bias(o, &b.attn_proj_b)?;
            x = tape.add(x, o)?;
            let h = tape.layer_norm(x, &b.ln2_gain, &b.ln2_bias, eps)?;
            let h = tape.matmul_weight(h, &b.fc_w)?;
            let h = tape.add_bias(h, &b.fc_b)?;
            let h = tape.activation(h, cfg.activation);
            let h = tape.matmul_weight(h, &b.mlp_proj_w)?;
            let h = tape.add_bias(h, &b.mlp_proj_b)?;
            x = tape.add(x, h)?;
        }
        let u = tape.layer_norm(x, &self.final_gain, &self.final_bias, eps)?;
        let logits = match &self.output_head {
            Some(head) => tape.matmul_weight_t(u, head)?,
            None => tape.matmul_weight(u, &self.token_embedding)?,
        };
        Ok(Forward {
            tape,
            logits,
            input_distribution,
            n_input: n,
        })
    }

    /// Logits for relaxed input rows `z` at temperature `tau`, with `tail`
    /// appended as hard tokens. The tape is returned only when `record` is set.
    pub fn forward_relaxed(
        &self,
        z: &Tensor<F>,
        tau: F,
        tail: &[u32],
        record: bool,
    ) -> Result<(Tensor<F>, Option<Forward<'_, F>>)> {
        let fwd = self.forward_recorded(ModelInput::Relaxed { z: z.clone(), tau }, tail)?;
        let logits = fwd.logits().clone();
        Ok((logits, record.then_some(fwd)))
    }

    /// Greedy decoding of `m` tokens after `x`. Ties go to the lowest token id.
    pub fn generate_greedy(&self, x: &[u32], m: usize) -> Result<Vec<u32>> {
        if m == 0 {
            return Ok(Vec::new());
        }
        if x.is_empty() {
            return Err(Error::Contract(
                "cannot generate from an empty prompt".into(),
            ));
        }
        self.check_capacity(x.len() + m)?;
        let mut seq = x.to_vec();
        for _ in 0..m {
            let logits = self.forward_tokens(&seq)?;
            let last = logits.slice_rows(logits.rows() - 1, logits.rows());
            seq.push(argmax_rows(&last)[0]);
        }
        Ok(seq.split_off(x.len()))
    }
}

/// Seeded initialisation: matrices and embeddings from `Normal(0, 0.02)`,
/// layernorm gains one, all biases zero.
pub fn init_random<F: Scalar>(config: &ModelConfig, seed: u64) -> Result<ModelWeights<F>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, INIT_STD).expect("valid std");
    let tensors = config
        .tensor_shapes()
        .into_iter()
        .map(|(name, shape)| {
            let len: usize = shape.iter().product();
            let data: Vec<F> = if name.ends_with(".g") {
                vec![F::one(); len]
            } else if name.ends_with(".b") {
                vec![F::zero(); len]
            } else {
                (0..len).map(|_| F::of(normal.sample(&mut rng))).collect()
            };
            Tensor::from_vec(shape, data)
        })
        .collect::<Result<Vec<_>>>()?;
    ModelWeights::from_ordered(config.clone(), tensors)
}
