use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{adam_update, iteration_cap, AdamConfig, InversionResult, RunOptions, Tracer};
use crate::error::{Error, Result};
use crate::model::{ModelInput, ModelWeights};
use crate::objective::{
    evaluate_tokens, record_objective, ObjectiveSpec, TargetOutput, DEFAULT_EPS_TERM,
};
use crate::tensor::{input_gradient, Scalar, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmbedParams {
    pub t_max: usize,
    pub gamma: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps_adam: f64,
    pub eps_term: f64,
    /// Standard deviation of the initial embeddings.
    pub init_std: f64,
    pub seed: u64,
    pub max_forwards: Option<u64>,
}

impl Default for EmbedParams {
    fn default() -> Self {
        Self {
            t_max: 2000,
            gamma: 0.065,
            beta1: 0.9,
            beta2: 0.995,
            eps_adam: 1e-8,
            eps_term: DEFAULT_EPS_TERM,
            init_std: 1.0,
            seed: 0,
            max_forwards: None,
        }
    }
}

impl EmbedParams {
    pub fn validate(&self) -> Result<()> {
        let open01 = |x: f64| x > 0.0 && x < 1.0;
        if self.t_max == 0
            || !(self.gamma > 0.0)
            || !open01(self.beta1)
            || !open01(self.beta2)
            || !(self.eps_adam > 0.0)
            || !(self.eps_term > 0.0)
            || !(self.init_std >= 0.0)
        {
            return Err(Error::Parameter(format!(
                "invalid embedding search parameters {self:?}"
            )));
        }
        Ok(())
    }
}

/// Index of the nearest token embedding (Euclidean) for every row of `e`.
/// Ties go to the lowest token id.
pub fn nearest_tokens<F: Scalar>(weights: &ModelWeights<F>, e: &Tensor<F>) -> Vec<u32> {
    let table = weights.embedding_rows();
    (0..e.rows())
        .map(|i| {
            let row = e.row(i);
            let mut best = (F::infinity(), 0u32);
            for v in 0..table.rows() {
                let d: F = row
                    .iter()
                    .zip(table.row(v))
                    .map(|(&a, &b)| (a - b) * (a - b))
                    .sum();
                if d < best.0 {
                    best = (d, v as u32);
                }
            }
            best.1
        })
        .collect()
}

/// Adam (with bias correction) directly over the input embeddings. The
/// termination test and the answer use the nearest-token projection.
pub fn embedding_invert<F: Scalar>(
    weights: &ModelWeights<F>,
    target: &TargetOutput<F>,
    spec: &ObjectiveSpec,
    params: &EmbedParams,
    opts: &RunOptions<'_>,
) -> Result<InversionResult> {
    params.validate()?;
    spec.validate(target)?;
    target.validate(weights.vocab_size(), weights.config.max_seq_len)?;
    let d = weights.config.d_model;
    let n = target.n_input;
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let normal = Normal::new(0.0, params.init_std).expect("std validated");
    let mut e = Tensor::from_vec(
        vec![n, d],
        (0..n * d).map(|_| F::of(normal.sample(&mut rng))).collect(),
    )?;
    let (mut m, mut v) = (Tensor::zeros(&[n, d]), Tensor::zeros(&[n, d]));
    let adam = AdamConfig {
        lr: params.gamma,
        beta1: params.beta1,
        beta2: params.beta2,
        eps: params.eps_adam,
        bias_correction: true,
    };
    let eps_term = F::of(params.eps_term);
    let cap = iteration_cap(
        params.t_max,
        params.max_forwards.map(|b| b.saturating_sub(1)),
        2,
    );
    let mut tracer = Tracer::new(opts);
    let mut forwards = 0;
    let mut last_loss = f64::NAN;
    for t in 1..=cap {
        let mut fwd =
            weights.forward_recorded(ModelInput::Embeddings(e.clone()), target.teacher_tail())?;
        let (loss_node, loss) = record_objective(&mut fwd, target, spec)?;
        let x = nearest_tokens(weights, &e);
        let cand = evaluate_tokens(weights, &x, target, spec)?;
        forwards += 2;
        let done = cand < eps_term;
        last_loss = loss.to_f64().unwrap_or(f64::NAN);
        tracer.observe(
            t,
            loss.to_f64().unwrap_or(f64::NAN),
            cand.to_f64().unwrap_or(f64::NAN),
            &x,
            done,
        );
        if done {
            return Ok(InversionResult {
                x_star: x,
                success: true,
                iterations_used: t,
                forwards,
                final_loss: cand.to_f64().unwrap_or(f64::NAN),
                trace: tracer.points,
            });
        }
        let grad = input_gradient(&fwd.tape, loss_node)?;
        if !grad.is_finite() {
            return Err(Error::NonFiniteGradient { iteration: t });
        }
        adam_update(&adam, &mut e, &mut m, &mut v, &grad, t as u64);
    }
    let x = nearest_tokens(weights, &e);
    let cand = evaluate_tokens(weights, &x, target, spec)?;
    forwards += 1;
    let success = cand < eps_term;
    tracer.observe(cap, last_loss, cand.to_f64().unwrap_or(f64::NAN), &x, true);
    Ok(InversionResult {
        x_star: x,
        success,
        iterations_used: cap,
        forwards,
        final_loss: cand.to_f64().unwrap_or(f64::NAN),
        trace: tracer.points,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_random, ModelConfig};
    use crate::objective::{make_target, Knowledge};
    use rand::Rng;

    fn model() -> ModelWeights<f32> {
        let cfg = ModelConfig {
            vocab_size: 32,
            d_model: 16,
            n_heads: 2,
            d_ff: 32,
            max_seq_len: 8,
            ..ModelConfig::default()
        };
        init_random(&cfg, 12).unwrap()
    }

    #[test]
    fn exact_embeddings_project_back_with_zero_loss() {
        let w = model();
        let x = [4, 31, 0];
        let e = w.embed_tokens(&x);
        assert_eq!(nearest_tokens(&w, &e), x.to_vec());
        let target = make_target(&w, &x, 2, Knowledge::All).unwrap();
        let spec = ObjectiveSpec::for_target(&target);
        assert_eq!(
            evaluate_tokens(&w, &nearest_tokens(&w, &e), &target, &spec).unwrap(),
            0.0
        );
    }

    #[test]
    fn projection_matches_linear_scan() {
        let w = model();
        let table = w.embedding_rows();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let e = Tensor::from_vec(
            vec![5, 16],
            (0..80).map(|_| rng.random_range(-0.1f32..0.1)).collect(),
        )
        .unwrap();
        let got = nearest_tokens(&w, &e);
        for i in 0..5 {
            let dist = |v: usize| -> f64 {
                (0..16)
                    .map(|j| (e.get(i, j) as f64 - table.get(v, j) as f64).powi(2))
                    .sum()
            };
            let best = (0..32)
                .min_by(|&a, &b| dist(a).partial_cmp(&dist(b)).unwrap())
                .unwrap();
            assert_eq!(got[i], best as u32);
        }
    }

    #[test]
    fn deterministic_under_seed() {
        let w = model();
        let target = make_target(&w, &[7, 9], 1, Knowledge::All).unwrap();
        let spec = ObjectiveSpec::for_target(&target);
        let p = EmbedParams {
            t_max: 30,
            seed: 4,
            ..EmbedParams::default()
        };
        let a = embedding_invert(&w, &target, &spec, &p, &RunOptions::default()).unwrap();
        let b = embedding_invert(&w, &target, &spec, &p, &RunOptions::default()).unwrap();
        assert_eq!(a, b);
        if a.success {
            assert!(evaluate_tokens(&w, &a.x_star, &target, &spec).unwrap() < 1e-4);
        }
    }
}
