//! Search algorithms that look for an input reproducing a target output.
//!
//! * [`soda_invert`]: gradient search over a softmax relaxation of one-hot
//!   inputs, with an Adam variant that skips bias correction, multiplicative
//!   decay of the auxiliary variables, and periodic moment resets and
//!   reinitialisations.
//! * [`embedding_invert`]: plain Adam over dense input embeddings, projected
//!   to the nearest token embeddings.
//! * [`gcg_invert`]: greedy coordinate gradient, hill climbing over single
//!   token swaps drawn from the gradient ranking.
//!
//! Every algorithm declares success only after scoring the rounded token
//! candidate through the plain token path, so a success always replays.

mod adam;
mod embedding;
mod gcg;
mod soda;

use serde::{Deserialize, Serialize};

pub use adam::{adam_update, AdamConfig};
pub use embedding::{embedding_invert, nearest_tokens, EmbedParams};
pub use gcg::{gcg_invert, GcgParams};
pub use soda::{
    soda_invert, soda_resets, soda_step, soda_update, OptimizerState, SodaParams, StepOutcome,
};

/// One sample of an optimisation trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TracePoint {
    pub t: usize,
    /// Objective of the continuous (or current) iterate.
    pub loss: f64,
    /// Main objective of the rounded candidate.
    pub candidate_loss: f64,
    /// Whether the candidate has matched the reference input at any step so
    /// far; always false when no reference was supplied.
    pub exact_so_far: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InversionResult {
    pub x_star: Vec<u32>,
    pub success: bool,
    pub iterations_used: usize,
    /// Model evaluations, recorded or plain. Backward passes are not counted.
    pub forwards: u64,
    /// Main objective of `x_star`.
    pub final_loss: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub trace: Vec<TracePoint>,
}

/// Per-run options that do not change the search itself.
#[derive(Debug, Clone, Copy, Default)]
pub struct RunOptions<'a> {
    /// Record a trace point every this many iterations; 0 disables tracing.
    pub trace_every: usize,
    /// True input, used only to fill [`TracePoint::exact_so_far`].
    pub reference: Option<&'a [u32]>,
}

struct Tracer<'a> {
    opts: RunOptions<'a>,
    exact: bool,
    points: Vec<TracePoint>,
}

impl<'a> Tracer<'a> {
    fn new(opts: &RunOptions<'a>) -> Self {
        Self {
            opts: *opts,
            exact: false,
            points: Vec::new(),
        }
    }

    fn observe(&mut self, t: usize, loss: f64, candidate_loss: f64, candidate: &[u32], last: bool) {
        if let Some(r) = self.opts.reference {
            self.exact |= r == candidate;
        }
        let every = self.opts.trace_every;
        if every > 0 && (t.is_multiple_of(every) || last) {
            if self.points.last().is_some_and(|p| p.t == t) {
                return;
            }
            self.points.push(TracePoint {
                t,
                loss,
                candidate_loss,
                exact_so_far: self.exact,
            });
        }
    }
}

/// Number of whole iterations affordable under an optional forward budget.
fn iteration_cap(t_max: usize, max_forwards: Option<u64>, per_iteration: u64) -> usize {
    match max_forwards {
        Some(b) => t_max.min((b / per_iteration) as usize),
        None => t_max,
    }
}
