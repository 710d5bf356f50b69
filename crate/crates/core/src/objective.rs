//! Objectives comparing a candidate input's outputs with an observed target.
//!
//! Every objective is evaluated with teacher forcing: the candidate input is
//! followed by the target's own tokens `y_{<m}`, so output position `i` is
//! always conditioned on `x' y_{<i}` regardless of what the candidate would
//! have generated.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::model::{Forward, ModelWeights};
use crate::tensor::{argmax_rows, log_softmax_rows, softmax_temp, NodeId, Scalar, Tensor};

/// Termination threshold on the discrete candidate loss.
pub const DEFAULT_EPS_TERM: f64 = 1e-4;
/// Fluency weight used when the penalty is switched on without an explicit value.
pub const DEFAULT_FLUENCY_WEIGHT: f64 = 9e-3;

/// How many target logits per output position the attacker observes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Knowledge {
    /// Output tokens only.
    None,
    /// The `k` largest logits and their coordinates.
    Top(usize),
    /// The full logit vector.
    All,
}

impl Knowledge {
    /// Number of observed coordinates for a vocabulary of size `vocab`.
    pub fn count(self, vocab: usize) -> usize {
        match self {
            Knowledge::None => 0,
            Knowledge::Top(k) => k.min(vocab),
            Knowledge::All => vocab,
        }
    }
}

impl fmt::Display for Knowledge {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Knowledge::None => f.write_str("none"),
            Knowledge::Top(k) => write!(f, "{k}"),
            Knowledge::All => f.write_str("all"),
        }
    }
}

impl FromStr for Knowledge {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "none" | "text" => Ok(Knowledge::None),
            "all" => Ok(Knowledge::All),
            other => other
                .parse::<usize>()
                .ok()
                .filter(|&k| k > 0)
                .map(Knowledge::Top)
                .ok_or_else(|| {
                    Error::Parameter(format!(
                        "k must be none, all or a positive count, got {s:?}"
                    ))
                }),
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum KnowledgeRepr {
    Count(usize),
    Word(String),
}

impl Serialize for Knowledge {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Knowledge::Top(k) => KnowledgeRepr::Count(*k),
            other => KnowledgeRepr::Word(other.to_string()),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for Knowledge {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        match Option::<KnowledgeRepr>::deserialize(d)? {
            None => Ok(Knowledge::None),
            Some(KnowledgeRepr::Count(0)) => Err(serde::de::Error::custom("k must be positive")),
            Some(KnowledgeRepr::Count(k)) => Ok(Knowledge::Top(k)),
            Some(KnowledgeRepr::Word(w)) => w.parse().map_err(serde::de::Error::custom),
        }
    }
}

/// Everything the inverter is allowed to see about one hidden input.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetOutput<F> {
    pub y: Vec<u32>,
    pub n_input: usize,
    pub k: Knowledge,
    /// Per output position, the observed `(coordinate, logit)` pairs in
    /// descending logit order. `None` when only text is observed.
    pub logits: Option<Vec<Vec<(u32, F)>>>,
}

/// On-disk form of a [`TargetOutput`], one JSON object per line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetRecord {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<u64>,
    pub y: Vec<u32>,
    pub n_input: usize,
    pub k: Knowledge,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub logits: Option<Vec<Vec<(u32, f64)>>>,
}

impl<F: Scalar> TargetOutput<F> {
    pub fn m(&self) -> usize {
        self.y.len()
    }

    /// Tokens appended after the candidate input: `y` without its last token.
    pub fn teacher_tail(&self) -> &[u32] {
        &self.y[..self.y.len().saturating_sub(1)]
    }

    pub fn to_record(&self, id: Option<u64>) -> TargetRecord {
        TargetRecord {
            id,
            y: self.y.clone(),
            n_input: self.n_input,
            k: self.k,
            logits: self.logits.as_ref().map(|rows| {
                rows.iter()
                    .map(|r| {
                        r.iter()
                            .map(|&(c, v)| (c, v.to_f64().unwrap_or(f64::NAN)))
                            .collect()
                    })
                    .collect()
            }),
        }
    }

    pub fn from_record(rec: &TargetRecord) -> Self {
        Self {
            y: rec.y.clone(),
            n_input: rec.n_input,
            k: rec.k,
            logits: rec.logits.as_ref().map(|rows| {
                rows.iter()
                    .map(|r| r.iter().map(|&(c, v)| (c, F::of(v))).collect())
                    .collect()
            }),
        }
    }

    /// Checks the target against a model's vocabulary and capacity.
    pub fn validate(&self, vocab: usize, max_seq_len: usize) -> Result<()> {
        if self.y.is_empty() || self.n_input == 0 {
            return Err(Error::Contract(
                "target needs at least one input and one output token".into(),
            ));
        }
        if self.n_input + self.y.len() - 1 > max_seq_len {
            return Err(Error::Capacity {
                len: self.n_input + self.y.len() - 1,
                max: max_seq_len,
            });
        }
        if let Some(&bad) = self.y.iter().find(|&&t| t as usize >= vocab) {
            return Err(Error::Contract(format!(
                "target token {bad} outside vocabulary of {vocab}"
            )));
        }
        if let Some(rows) = &self.logits {
            if rows.len() != self.y.len() {
                return Err(Error::Contract(format!(
                    "{} logit rows for {} output tokens",
                    rows.len(),
                    self.y.len()
                )));
            }
            for row in rows {
                if row.is_empty() {
                    return Err(Error::Contract("empty known-coordinate set".into()));
                }
                if row
                    .iter()
                    .any(|&(c, v)| c as usize >= vocab || !v.is_finite())
                {
                    return Err(Error::Contract(
                        "target logit coordinate or value invalid".into(),
                    ));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ObjectiveMode {
    Text,
    Logit,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveSpec {
    pub mode: ObjectiveMode,
    /// Weight of the fluency penalty; 0 disables it.
    #[serde(default)]
    pub fluency_weight: f64,
    /// Temperature of the output softmax used by the text objective.
    #[serde(default = "one")]
    pub output_tau: f64,
}

fn one() -> f64 {
    1.0
}

impl ObjectiveSpec {
    /// Logit objective when the target carries logits, text objective otherwise.
    pub fn for_target<F: Scalar>(target: &TargetOutput<F>) -> Self {
        Self {
            mode: if target.logits.is_some() {
                ObjectiveMode::Logit
            } else {
                ObjectiveMode::Text
            },
            fluency_weight: 0.0,
            output_tau: 1.0,
        }
    }

    pub fn with_fluency(mut self, weight: f64) -> Self {
        self.fluency_weight = weight;
        self
    }

    pub fn validate<F: Scalar>(&self, target: &TargetOutput<F>) -> Result<()> {
        if !(self.fluency_weight >= 0.0) {
            return Err(Error::Parameter(
                "fluency_weight must be nonnegative".into(),
            ));
        }
        if !(self.output_tau > 0.0) {
            return Err(Error::Parameter("output_tau must be positive".into()));
        }
        if self.mode == ObjectiveMode::Logit && target.logits.is_none() {
            return Err(Error::Contract(
                "logit objective needs target logits".into(),
            ));
        }
        Ok(())
    }
}

/// Greedy output of `x` plus the observed logits for knowledge level `k`.
pub fn make_target<F: Scalar>(
    weights: &ModelWeights<F>,
    x: &[u32],
    m: usize,
    k: Knowledge,
) -> Result<TargetOutput<F>> {
    if m == 0 {
        return Err(Error::Contract(
            "target needs at least one output token".into(),
        ));
    }
    let vocab = weights.vocab_size();
    if let Knowledge::Top(kk) = k {
        if kk == 0 || kk > vocab {
            return Err(Error::Parameter(format!("k={kk} outside 1..={vocab}")));
        }
    }
    let y = weights.generate_greedy(x, m)?;
    let logits = if k == Knowledge::None {
        None
    } else {
        let mut seq = x.to_vec();
        seq.extend_from_slice(&y[..m - 1]);
        let all = weights.forward_tokens(&seq)?;
        let keep = k.count(vocab);
        Some(
            (0..m)
                .map(|i| top_coordinates(all.row(x.len() - 1 + i), keep))
                .collect(),
        )
    };
    Ok(TargetOutput {
        y,
        n_input: x.len(),
        k,
        logits,
    })
}

/// The `keep` largest entries of `row`, descending, ties to the lower index.
fn top_coordinates<F: Scalar>(row: &[F], keep: usize) -> Vec<(u32, F)> {
    let mut idx: Vec<u32> = (0..row.len() as u32).collect();
    idx.sort_by(|&a, &b| {
        row[b as usize]
            .partial_cmp(&row[a as usize])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    idx.truncate(keep);
    idx.into_iter().map(|c| (c, row[c as usize])).collect()
}

/// Rows of a full-sequence logit matrix that predict the target tokens.
pub fn output_rows<F: Scalar>(all_logits: &Tensor<F>, n_input: usize, m: usize) -> Tensor<F> {
    all_logits.slice_rows(n_input - 1, n_input - 1 + m)
}

fn check_rows<F: Scalar>(t: &Tensor<F>, rows: usize, what: &str) -> Result<()> {
    if t.rows() != rows {
        return Err(Error::Contract(format!(
            "{what}: {} rows for {rows} output tokens",
            t.rows()
        )));
    }
    Ok(())
}

/// Sum over positions of `max_a p(a) - p(y_i)`.
pub fn phi_text<F: Scalar>(probs: &Tensor<F>, y: &[u32]) -> Result<F> {
    check_rows(probs, y.len(), "phi_text")?;
    Ok((0..y.len())
        .map(|i| {
            let row = probs.row(i);
            let best = row.iter().copied().fold(F::neg_infinity(), F::max);
            best - row[y[i] as usize]
        })
        .sum())
}

/// Sum over positions of the mean squared logit error on the known coordinates.
pub fn phi_logit<F: Scalar>(logits: &Tensor<F>, target: &TargetOutput<F>) -> Result<F> {
    let known = target
        .logits
        .as_ref()
        .ok_or_else(|| Error::Contract("phi_logit needs target logits".into()))?;
    check_rows(logits, known.len(), "phi_logit")?;
    Ok(known
        .iter()
        .enumerate()
        .map(|(i, coords)| {
            let row = logits.row(i);
            let sq: F = coords
                .iter()
                .map(|&(c, t)| {
                    let d = row[c as usize] - t;
                    d * d
                })
                .sum();
            sq / F::of(coords.len() as f64)
        })
        .sum())
}

/// Negative log-likelihood of the input rows under the model's own predictions.
///
/// `logits` are the model outputs at the input positions and `inputs` the
/// (possibly relaxed) one-hot rows; row `i` of `inputs` is scored against row
/// `i - 1` of `logits`. A single input row has no context and scores 0.
pub fn phi_fluent<F: Scalar>(logits: &Tensor<F>, inputs: &Tensor<F>) -> Result<F> {
    Ok(fluent_with_grad(logits, inputs, false)?.0)
}

fn fluent_with_grad<F: Scalar>(
    logits: &Tensor<F>,
    inputs: &Tensor<F>,
    want_grad: bool,
) -> Result<(F, Option<(Tensor<F>, Tensor<F>)>)> {
    let n = inputs.rows();
    if logits.rows() < n || logits.cols() != inputs.cols() {
        return Err(Error::Dimension {
            op: "phi_fluent",
            left: logits.shape().to_vec(),
            right: inputs.shape().to_vec(),
        });
    }
    let v = inputs.cols();
    let mut grads = want_grad.then(|| (Tensor::zeros(&[logits.rows(), v]), Tensor::zeros(&[n, v])));
    let mut total = F::zero();
    for i in 1..n {
        let pred = logits.slice_rows(i - 1, i);
        let ls = log_softmax_rows(&pred);
        let h = inputs.row(i);
        total = total - h.iter().zip(ls.data()).map(|(&a, &b)| a * b).sum::<F>();
        if let Some((gl, gh)) = grads.as_mut() {
            let mass: F = h.iter().copied().sum();
            for (j, g) in gl.row_mut(i - 1).iter_mut().enumerate() {
                *g = ls.data()[j].exp() * mass - h[j];
            }
            for (g, &l) in gh.row_mut(i).iter_mut().zip(ls.data()) {
                *g = -l;
            }
        }
    }
    Ok((total, grads))
}

/// Main objective on output-position logits `[m × V]`, with its gradient.
fn main_with_grad<F: Scalar>(
    out: &Tensor<F>,
    target: &TargetOutput<F>,
    spec: &ObjectiveSpec,
    want_grad: bool,
) -> Result<(F, Option<Tensor<F>>)> {
    match spec.mode {
        ObjectiveMode::Logit => {
            let value = phi_logit(out, target)?;
            let grad = want_grad.then(|| {
                let mut g = Tensor::zeros(out.shape());
                let known = target.logits.as_ref().expect("checked by phi_logit");
                for (i, coords) in known.iter().enumerate() {
                    let scale = F::of(2.0) / F::of(coords.len() as f64);
                    for &(c, t) in coords {
                        g.row_mut(i)[c as usize] = scale * (out.get(i, c as usize) - t);
                    }
                }
                g
            });
            Ok((value, grad))
        }
        ObjectiveMode::Text => {
            let tau = F::of(spec.output_tau);
            let probs = softmax_temp(out, tau)?;
            let value = phi_text(&probs, &target.y)?;
            let grad = want_grad.then(|| {
                let best = argmax_rows(&probs);
                let mut g = Tensor::zeros(out.shape());
                for (i, &y) in target.y.iter().enumerate() {
                    let p = probs.row(i);
                    let (a, y) = (best[i] as usize, y as usize);
                    let (pa, py) = (p[a], p[y]);
                    for (j, gj) in g.row_mut(i).iter_mut().enumerate() {
                        // d(p_a - p_y)/dr_j for a softmax at temperature tau
                        let mut d = (py - pa) * p[j];
                        if j == a {
                            d = d + pa;
                        }
                        if j == y {
                            d = d - py;
                        }
                        *gj = d / tau;
                    }
                }
                g
            });
            Ok((value, grad))
        }
    }
}

/// Main objective (no fluency term) on full-sequence logits.
pub fn main_objective<F: Scalar>(
    all_logits: &Tensor<F>,
    target: &TargetOutput<F>,
    spec: &ObjectiveSpec,
) -> Result<F> {
    let out = output_rows(all_logits, target.n_input, target.m());
    Ok(main_with_grad(&out, target, spec, false)?.0)
}

/// Appends the full objective to a recorded forward pass and returns the loss
/// node together with its value. The fluency term is included when its weight
/// is positive and the forward pass carries input distribution rows.
pub fn record_objective<F: Scalar>(
    fwd: &mut Forward<'_, F>,
    target: &TargetOutput<F>,
    spec: &ObjectiveSpec,
) -> Result<(NodeId, F)> {
    let n = fwd.n_input;
    if n != target.n_input {
        return Err(Error::Contract(format!(
            "candidate has {n} input rows, target expects {}",
            target.n_input
        )));
    }
    let all = fwd.tape.value(fwd.logits);
    let m = target.m();
    let out = output_rows(all, n, m);
    let (mut value, g_out) = main_with_grad(&out, target, spec, true)?;
    let mut g_logits = Tensor::zeros(all.shape());
    for (i, src) in g_out
        .expect("requested")
        .data()
        .chunks(all.cols())
        .enumerate()
    {
        g_logits.row_mut(n - 1 + i).copy_from_slice(src);
    }
    let mut parts = Vec::with_capacity(2);
    if spec.fluency_weight > 0.0 {
        if let Some(h) = fwd.input_distribution {
            let w = F::of(spec.fluency_weight);
            let (fl, grads) = fluent_with_grad(all, fwd.tape.value(h), true)?;
            let (gl, gh) = grads.expect("requested");
            value = value + w * fl;
            for (a, &b) in g_logits.data_mut().iter_mut().zip(gl.data()) {
                *a = *a + w * b;
            }
            parts.push((h, gh.map(|x| w * x)));
        }
    }
    parts.insert(0, (fwd.logits, g_logits));
    let loss = fwd.tape.loss(value, parts)?;
    Ok((loss, value))
}

/// Main objective of a hard candidate, through the plain token path.
pub fn evaluate_tokens<F: Scalar>(
    weights: &ModelWeights<F>,
    x: &[u32],
    target: &TargetOutput<F>,
    spec: &ObjectiveSpec,
) -> Result<F> {
    let plain = ObjectiveSpec {
        fluency_weight: 0.0,
        ..*spec
    };
    Ok(score_tokens(weights, x, target, &plain)?.main)
}

/// Objective values of a hard candidate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TokenScore<F> {
    /// Main objective alone; this is what the termination test compares.
    pub main: F,
    /// Main objective plus the weighted fluency penalty.
    pub total: F,
}

/// Scores a hard candidate through the plain token path, fluency included.
pub fn score_tokens<F: Scalar>(
    weights: &ModelWeights<F>,
    x: &[u32],
    target: &TargetOutput<F>,
    spec: &ObjectiveSpec,
) -> Result<TokenScore<F>> {
    if x.len() != target.n_input {
        return Err(Error::Contract(format!(
            "candidate of length {} for target input length {}",
            x.len(),
            target.n_input
        )));
    }
    let mut seq = x.to_vec();
    seq.extend_from_slice(target.teacher_tail());
    let all = weights.forward_tokens(&seq)?;
    let main = main_objective(&all, target, spec)?;
    let mut total = main;
    if spec.fluency_weight > 0.0 {
        let inputs = Tensor::one_hot(x, weights.vocab_size());
        total = total + F::of(spec.fluency_weight) * phi_fluent(&all, &inputs)?;
    }
    Ok(TokenScore { main, total })
}

/// Rounds `z` to its row-wise argmax tokens and scores them exactly.
pub fn discrete_candidate_loss<F: Scalar>(
    weights: &ModelWeights<F>,
    z: &Tensor<F>,
    target: &TargetOutput<F>,
    spec: &ObjectiveSpec,
) -> Result<(F, Vec<u32>)> {
    let x = argmax_rows(z);
    let loss = evaluate_tokens(weights, &x, target, spec)?;
    Ok((loss, x))
}
