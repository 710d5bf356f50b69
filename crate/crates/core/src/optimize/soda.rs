use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{adam_update, iteration_cap, AdamConfig, InversionResult, RunOptions, Tracer};
use crate::error::{Error, Result};
use crate::model::{ModelInput, ModelWeights};
use crate::objective::{
    discrete_candidate_loss, record_objective, ObjectiveSpec, TargetOutput, DEFAULT_EPS_TERM,
};
use crate::tensor::{input_gradient, Scalar, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SodaParams {
    pub t_max: usize,
    pub gamma: f64,
    pub beta1: f64,
    pub beta2: f64,
    /// Temperature of the input relaxation.
    pub tau: f64,
    /// Multiplier applied to `Z` after every update.
    pub lambda: f64,
    /// Moment reset period.
    pub t1: usize,
    /// Reinitialisation period.
    pub t2: usize,
    pub eps_adam: f64,
    pub eps_term: f64,
    /// Standard deviation of the `Z` redraw at reinitialisation.
    pub reinit_std: f64,
    pub seed: u64,
    /// Apply `lambda`; when off the decay multiplier is 1.
    pub decay: bool,
    /// Run the `t1`/`t2` reset schedule.
    pub resets: bool,
    /// Standard Adam bias correction. Off in the reference configuration.
    pub bias_correction: bool,
    /// Stop before exceeding this many model evaluations.
    pub max_forwards: Option<u64>,
}

impl Default for SodaParams {
    fn default() -> Self {
        Self {
            t_max: 2000,
            gamma: 0.065,
            beta1: 0.9,
            beta2: 0.995,
            tau: 0.05,
            lambda: 0.9,
            t1: 50,
            t2: 1500,
            eps_adam: 1e-8,
            eps_term: DEFAULT_EPS_TERM,
            reinit_std: 0.1,
            seed: 0,
            decay: true,
            resets: true,
            bias_correction: false,
            max_forwards: None,
        }
    }
}

impl SodaParams {
    /// Reference parameters with individual components switched off.
    pub fn ablation(decay: bool, resets: bool, no_bias: bool) -> Self {
        Self {
            decay,
            resets,
            bias_correction: !no_bias,
            ..Self::default()
        }
    }

    /// Short name of the variant, e.g. `soda` or `soda-no-decay-no-reset`.
    pub fn label(&self) -> String {
        let mut s = String::from("soda");
        if !self.decay {
            s.push_str("-no-decay");
        }
        if !self.resets {
            s.push_str("-no-reset");
        }
        if self.bias_correction {
            s.push_str("-bias");
        }
        s
    }

    pub fn validate(&self) -> Result<()> {
        let open01 = |x: f64| x > 0.0 && x < 1.0;
        let checks = [
            (self.t_max > 0, "t_max must be positive"),
            (self.gamma > 0.0, "gamma must be positive"),
            (open01(self.beta1), "beta1 must lie in (0, 1)"),
            (open01(self.beta2), "beta2 must lie in (0, 1)"),
            (self.tau > 0.0, "tau must be positive"),
            (
                self.lambda > 0.0 && self.lambda <= 1.0,
                "lambda must lie in (0, 1]",
            ),
            (
                self.t1 > 0 && self.t1 < self.t2,
                "reset periods need 0 < t1 < t2",
            ),
            (self.eps_adam > 0.0, "eps_adam must be positive"),
            (self.eps_term > 0.0, "eps_term must be positive"),
            (self.reinit_std >= 0.0, "reinit_std must be nonnegative"),
        ];
        match checks.iter().find(|(ok, _)| !ok) {
            Some((_, msg)) => Err(Error::Parameter((*msg).into())),
            None => Ok(()),
        }
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.gamma,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps_adam,
            bias_correction: self.bias_correction,
        }
    }
}

/// The auxiliary variables, Adam moments and step counter of one search.
#[derive(Debug, Clone)]
pub struct OptimizerState<F> {
    pub z: Tensor<F>,
    pub m: Tensor<F>,
    pub v: Tensor<F>,
    /// Iterations completed.
    pub t: usize,
    /// Moment updates since the moments were last zeroed.
    pub moment_steps: u64,
    rng: ChaCha8Rng,
}

impl<F: Scalar> OptimizerState<F> {
    /// `Z = m = v = 0` for `n` input positions over a vocabulary of `vocab`.
    pub fn new(n: usize, vocab: usize, seed: u64) -> Self {
        Self {
            z: Tensor::zeros(&[n, vocab]),
            m: Tensor::zeros(&[n, vocab]),
            v: Tensor::zeros(&[n, vocab]),
            t: 0,
            moment_steps: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    fn redraw(&mut self, std: f64) {
        let normal = Normal::new(0.0, std).expect("std validated");
        for x in self.z.data_mut() {
            *x = F::of(normal.sample(&mut self.rng));
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome<F> {
    /// Objective at the relaxed input before the update.
    pub loss: F,
    /// Main objective of the rounded candidate after the update.
    pub candidate_loss: F,
    pub candidate: Vec<u32>,
}

/// Moment update and step on `Z` for a gradient, followed by the decay.
pub fn soda_update<F: Scalar>(
    state: &mut OptimizerState<F>,
    grad: &Tensor<F>,
    params: &SodaParams,
) {
    state.moment_steps += 1;
    adam_update(
        &params.adam(),
        &mut state.z,
        &mut state.m,
        &mut state.v,
        grad,
        state.moment_steps,
    );
    if params.decay {
        state.z.scale(F::of(params.lambda));
    }
}

/// The reset schedule for the iteration `state.t`: moments are zeroed every
/// `t1` and `t2` iterations, and `Z` is redrawn every `t2`.
pub fn soda_resets<F: Scalar>(state: &mut OptimizerState<F>, params: &SodaParams) {
    if !params.resets {
        return;
    }
    let t = state.t;
    let full = t.is_multiple_of(params.t2);
    if full || t.is_multiple_of(params.t1) {
        state.m = Tensor::zeros(state.m.shape());
        state.v = Tensor::zeros(state.v.shape());
        state.moment_steps = 0;
    }
    if full {
        state.redraw(params.reinit_std);
    }
}

/// One iteration: relaxed forward, gradient, moment update, step without
/// bias correction (unless enabled), decay, discrete check, then resets.
///
/// Resets are skipped when the candidate passes the termination test, so a
/// solution found on a reset iteration is kept.
pub fn soda_step<F: Scalar>(
    state: &mut OptimizerState<F>,
    weights: &ModelWeights<F>,
    target: &TargetOutput<F>,
    spec: &ObjectiveSpec,
    params: &SodaParams,
) -> Result<StepOutcome<F>> {
    state.t += 1;
    let t = state.t;
    let mut fwd = weights.forward_recorded(
        ModelInput::Relaxed {
            z: state.z.clone(),
            tau: F::of(params.tau),
        },
        target.teacher_tail(),
    )?;
    let (loss_node, loss) = record_objective(&mut fwd, target, spec)?;
    let grad = input_gradient(&fwd.tape, loss_node)?;
    drop(fwd);
    if !grad.is_finite() || !loss.is_finite() {
        return Err(Error::NonFiniteGradient { iteration: t });
    }

    soda_update(state, &grad, params);

    let (candidate_loss, candidate) = discrete_candidate_loss(weights, &state.z, target, spec)?;
    if candidate_loss < F::of(params.eps_term) {
        return Ok(StepOutcome {
            loss,
            candidate_loss,
            candidate,
        });
    }

    soda_resets(state, params);
    Ok(StepOutcome {
        loss,
        candidate_loss,
        candidate,
    })
}

/// Runs [`soda_step`] until the rounded candidate passes the termination test
/// or the iteration (or forward) budget runs out. Each iteration costs two
/// model evaluations.
pub fn soda_invert<F: Scalar>(
    weights: &ModelWeights<F>,
    target: &TargetOutput<F>,
    spec: &ObjectiveSpec,
    params: &SodaParams,
    opts: &RunOptions<'_>,
) -> Result<InversionResult> {
    params.validate()?;
    spec.validate(target)?;
    target.validate(weights.vocab_size(), weights.config.max_seq_len)?;
    let cap = iteration_cap(params.t_max, params.max_forwards, 2);
    let mut state = OptimizerState::new(target.n_input, weights.vocab_size(), params.seed);
    let mut tracer = Tracer::new(opts);
    let mut forwards = 0;
    let mut last = None;
    for t in 1..=cap {
        let out = soda_step(&mut state, weights, target, spec, params)?;
        forwards += 2;
        let done = out.candidate_loss < F::of(params.eps_term);
        tracer.observe(
            t,
            out.loss.to_f64().unwrap_or(f64::NAN),
            out.candidate_loss.to_f64().unwrap_or(f64::NAN),
            &out.candidate,
            done || t == cap,
        );
        if done {
            return Ok(InversionResult {
                x_star: out.candidate,
                success: true,
                iterations_used: t,
                forwards,
                final_loss: out.candidate_loss.to_f64().unwrap_or(f64::NAN),
                trace: tracer.points,
            });
        }
        last = Some(out);
    }
    let (final_loss, x_star) = match last {
        Some(out) => (out.candidate_loss, out.candidate),
        None => {
            forwards += 1;
            discrete_candidate_loss(weights, &state.z, target, spec)?
        }
    };
    Ok(InversionResult {
        x_star,
        success: false,
        iterations_used: cap,
        forwards,
        final_loss: final_loss.to_f64().unwrap_or(f64::NAN),
        trace: tracer.points,
    })
}
