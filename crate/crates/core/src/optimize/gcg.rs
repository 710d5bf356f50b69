use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{InversionResult, RunOptions, Tracer};
use crate::error::{Error, Result};
use crate::model::{ModelInput, ModelWeights};
use crate::objective::{
    record_objective, score_tokens, ObjectiveSpec, TargetOutput, TokenScore, DEFAULT_EPS_TERM,
};
use crate::tensor::{input_gradient, Scalar, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GcgParams {
    pub t_max: usize,
    /// Candidate swaps drawn per iteration.
    pub c_max: usize,
    /// Size of the per-position substitution pool, taken from the gradient ranking.
    pub k_sub: usize,
    pub eps_term: f64,
    pub seed: u64,
    /// Score all candidates against the iteration's starting point and keep
    /// the best improving one, instead of accepting improvements as they come.
    pub batched: bool,
    pub max_forwards: Option<u64>,
}

impl Default for GcgParams {
    fn default() -> Self {
        Self {
            t_max: 700,
            c_max: 700,
            k_sub: 128,
            eps_term: DEFAULT_EPS_TERM,
            seed: 0,
            batched: false,
            max_forwards: None,
        }
    }
}

impl GcgParams {
    pub fn validate(&self) -> Result<()> {
        if self.t_max == 0 || self.c_max == 0 || self.k_sub == 0 || !(self.eps_term > 0.0) {
            return Err(Error::Parameter(format!("invalid GCG parameters {self:?}")));
        }
        Ok(())
    }
}

/// Token ids of one gradient row sorted ascending (most loss-decreasing first),
/// truncated to `k`. Ties go to the lower id.
fn substitution_pool<F: Scalar>(row: &[F], k: usize) -> Vec<u32> {
    let mut idx: Vec<u32> = (0..row.len() as u32).collect();
    idx.sort_by(|&a, &b| {
        row[a as usize]
            .partial_cmp(&row[b as usize])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    idx.truncate(k);
    idx
}

struct Budget {
    used: u64,
    max: Option<u64>,
}

impl Budget {
    fn take(&mut self) -> bool {
        if self.max.is_some_and(|m| self.used >= m) {
            return false;
        }
        self.used += 1;
        true
    }
}

/// Greedy coordinate gradient search over hard one-hot inputs, starting from
/// uniformly drawn tokens. Candidates are compared on the full objective
/// (fluency included); termination uses the main objective.
pub fn gcg_invert<F: Scalar>(
    weights: &ModelWeights<F>,
    target: &TargetOutput<F>,
    spec: &ObjectiveSpec,
    params: &GcgParams,
    opts: &RunOptions<'_>,
) -> Result<InversionResult> {
    params.validate()?;
    spec.validate(target)?;
    target.validate(weights.vocab_size(), weights.config.max_seq_len)?;
    let vocab = weights.vocab_size();
    let n = target.n_input;
    let k = params.k_sub.min(vocab);
    let eps_term = F::of(params.eps_term);
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut x: Vec<u32> = (0..n).map(|_| rng.random_range(0..vocab as u32)).collect();
    let mut budget = Budget {
        used: 0,
        max: params.max_forwards,
    };
    let mut tracer = Tracer::new(opts);
    let finish = |x: Vec<u32>, score: TokenScore<F>, t: usize, budget: &Budget, tracer: Tracer| {
        let main = score.main.to_f64().unwrap_or(f64::NAN);
        InversionResult {
            success: score.main < eps_term,
            x_star: x,
            iterations_used: t,
            forwards: budget.used,
            final_loss: main,
            trace: tracer.points,
        }
    };

    budget.take();
    let mut score = score_tokens(weights, &x, target, spec)?;
    if score.main < eps_term {
        return Ok(finish(x, score, 0, &budget, tracer));
    }
    for t in 1..=params.t_max {
        if !budget.take() {
            return Ok(finish(x, score, t - 1, &budget, tracer));
        }
        let mut fwd = weights.forward_recorded(
            ModelInput::Distribution(Tensor::one_hot(&x, vocab)),
            target.teacher_tail(),
        )?;
        let (loss_node, _) = record_objective(&mut fwd, target, spec)?;
        let grad = input_gradient(&fwd.tape, loss_node)?;
        drop(fwd);
        if !grad.is_finite() {
            return Err(Error::NonFiniteGradient { iteration: t });
        }
        let pools: Vec<Vec<u32>> = (0..n).map(|i| substitution_pool(grad.row(i), k)).collect();

        let start = x.clone();
        let mut best: Option<(Vec<u32>, TokenScore<F>)> = None;
        let mut exhausted = false;
        for _ in 0..params.c_max {
            let i = rng.random_range(0..n);
            let j = rng.random_range(0..k);
            let base = if params.batched { &start } else { &x };
            let tok = pools[i][j];
            if base[i] == tok {
                continue;
            }
            if !budget.take() {
                exhausted = true;
                break;
            }
            let mut cand = base.clone();
            cand[i] = tok;
            let s = score_tokens(weights, &cand, target, spec)?;
            if params.batched {
                if best.as_ref().is_none_or(|(_, b)| s.total < b.total) {
                    best = Some((cand, s));
                }
            } else if s.total < score.total {
                x = cand;
                score = s;
                if score.main < eps_term {
                    tracer.observe(t, tot(score), tot_main(score), &x, true);
                    return Ok(finish(x, score, t, &budget, tracer));
                }
            }
        }
        if let Some((cand, s)) = best {
            if s.total < score.total {
                x = cand;
                score = s;
            }
        }
        let done = score.main < eps_term;
        tracer.observe(
            t,
            tot(score),
            tot_main(score),
            &x,
            done || exhausted || t == params.t_max,
        );
        if done || exhausted {
            return Ok(finish(x, score, t, &budget, tracer));
        }
    }
    Ok(finish(x, score, params.t_max, &budget, tracer))
}

fn tot<F: Scalar>(s: TokenScore<F>) -> f64 {
    s.total.to_f64().unwrap_or(f64::NAN)
}

fn tot_main<F: Scalar>(s: TokenScore<F>) -> f64 {
    s.main.to_f64().unwrap_or(f64::NAN)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_random, ModelConfig};
    use crate::objective::{evaluate_tokens, make_target, Knowledge};

    fn model() -> ModelWeights<f32> {
        let cfg = ModelConfig {
            vocab_size: 32,
            d_model: 16,
            n_heads: 2,
            d_ff: 32,
            max_seq_len: 8,
            ..ModelConfig::default()
        };
        init_random(&cfg, 21).unwrap()
    }

    #[test]
    fn pool_is_ascending_gradient_order() {
        let row = [0.3f32, -1.0, 0.3, -0.2, 5.0];
        assert_eq!(substitution_pool(&row, 3), vec![1, 3, 0]);
        assert_eq!(substitution_pool(&row, 10).len(), 5);
    }

    #[test]
    fn loss_trajectory_never_increases() {
        let w = model();
        let target = make_target(&w, &[3, 9, 27], 1, Knowledge::Top(4)).unwrap();
        let spec = ObjectiveSpec::for_target(&target);
        for batched in [false, true] {
            let p = GcgParams {
                t_max: 15,
                c_max: 20,
                k_sub: 8,
                seed: 2,
                batched,
                ..GcgParams::default()
            };
            let opts = RunOptions {
                trace_every: 1,
                reference: None,
            };
            let res = gcg_invert(&w, &target, &spec, &p, &opts).unwrap();
            for pair in res.trace.windows(2) {
                assert!(pair[1].loss <= pair[0].loss, "{pair:?}");
            }
            assert_eq!(
                res.final_loss,
                evaluate_tokens(&w, &res.x_star, &target, &spec).unwrap() as f64
            );
        }
    }

    #[test]
    fn single_position_search_finds_brute_force_optimum() {
        let w = model();
        for tok in [0u32, 13, 31] {
            let target = make_target(&w, &[tok], 1, Knowledge::All).unwrap();
            let spec = ObjectiveSpec::for_target(&target);
            let p = GcgParams {
                t_max: 4,
                c_max: 32 * 4,
                k_sub: 32,
                seed: tok as u64,
                ..GcgParams::default()
            };
            let res = gcg_invert(&w, &target, &spec, &p, &RunOptions::default()).unwrap();
            let best = (0..32u32)
                .min_by(|&a, &b| {
                    let la = evaluate_tokens(&w, &[a], &target, &spec).unwrap();
                    let lb = evaluate_tokens(&w, &[b], &target, &spec).unwrap();
                    la.partial_cmp(&lb).unwrap()
                })
                .unwrap();
            assert!(res.success);
            assert_eq!(res.x_star, vec![best]);
        }
    }

    #[test]
    fn forward_budget_is_respected_and_runs_repeat() {
        let w = model();
        let target = make_target(&w, &[5, 6], 1, Knowledge::Top(2)).unwrap();
        let spec = ObjectiveSpec::for_target(&target);
        let p = GcgParams {
            max_forwards: Some(50),
            eps_term: 1e-30,
            seed: 8,
            ..GcgParams::default()
        };
        let a = gcg_invert(&w, &target, &spec, &p, &RunOptions::default()).unwrap();
        assert_eq!(a.forwards, 50);
        assert_eq!(
            a,
            gcg_invert(&w, &target, &spec, &p, &RunOptions::default()).unwrap()
        );
    }
}
