use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::dataset::{check_vocabulary, DatasetRecord};
use super::metrics::{exact_match, partial_match, pii_match};
use super::report::{aggregate, MetricsReport};
use super::{read_jsonl, substream, write_jsonl};
use crate::error::{Error, Result};
use crate::model::{load_checkpoint, ModelWeights};
use crate::objective::{make_target, Knowledge, ObjectiveSpec, TargetOutput};
use crate::optimize::{
    embedding_invert, gcg_invert, soda_invert, EmbedParams, GcgParams, InversionResult, RunOptions,
    SodaParams,
};
use crate::tensor::{Dtype, Scalar};

/// Inversion algorithm and its parameters, tagged by `name` in JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "lowercase")]
pub enum Algorithm {
    Soda(SodaParams),
    Embed(EmbedParams),
    Gcg(GcgParams),
}

impl Default for Algorithm {
    fn default() -> Self {
        Algorithm::Soda(SodaParams::default())
    }
}

impl Algorithm {
    pub fn label(&self) -> String {
        match self {
            Algorithm::Soda(p) => p.label(),
            Algorithm::Embed(_) => "embed".into(),
            Algorithm::Gcg(p) if p.batched => "gcg-batched".into(),
            Algorithm::Gcg(_) => "gcg".into(),
        }
    }

    fn validate(&self) -> Result<()> {
        match self {
            Algorithm::Soda(p) => p.validate(),
            Algorithm::Embed(p) => p.validate(),
            Algorithm::Gcg(p) => p.validate(),
        }
    }

    /// Copy with the run seed and the campaign-level budgets applied.
    pub fn configured(&self, seed: u64, budget: Option<usize>, max_forwards: Option<u64>) -> Self {
        let mut a = self.clone();
        match &mut a {
            Algorithm::Soda(p) => {
                p.seed = seed;
                p.t_max = budget.unwrap_or(p.t_max);
                p.max_forwards = max_forwards.or(p.max_forwards);
            }
            Algorithm::Embed(p) => {
                p.seed = seed;
                p.t_max = budget.unwrap_or(p.t_max);
                p.max_forwards = max_forwards.or(p.max_forwards);
            }
            Algorithm::Gcg(p) => {
                p.seed = seed;
                p.t_max = budget.unwrap_or(p.t_max);
                p.max_forwards = max_forwards.or(p.max_forwards);
            }
        }
        a
    }

    pub fn run<F: Scalar>(
        &self,
        weights: &ModelWeights<F>,
        target: &TargetOutput<F>,
        spec: &ObjectiveSpec,
        opts: &RunOptions<'_>,
    ) -> Result<InversionResult> {
        match self {
            Algorithm::Soda(p) => soda_invert(weights, target, spec, p, opts),
            Algorithm::Embed(p) => embedding_invert(weights, target, spec, p, opts),
            Algorithm::Gcg(p) => gcg_invert(weights, target, spec, p, opts),
        }
    }
}

/// The objective block of a campaign. Every `(k, m)` pair is run for every record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ObjectiveGrid {
    pub k: Vec<Knowledge>,
    pub m: Vec<usize>,
    pub fluency_weight: f64,
    pub output_tau: f64,
}

impl ObjectiveGrid {
    /// Objective for one target: logit mode when logits were observed.
    pub fn spec_for<F: Scalar>(&self, target: &TargetOutput<F>) -> ObjectiveSpec {
        ObjectiveSpec {
            fluency_weight: self.fluency_weight,
            output_tau: self.output_tau,
            ..ObjectiveSpec::for_target(target)
        }
    }
}

impl Default for ObjectiveGrid {
    fn default() -> Self {
        Self {
            k: vec![Knowledge::All],
            m: vec![1],
            fluency_weight: 0.0,
            output_tau: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: PathBuf,
    pub dataset: PathBuf,
    #[serde(default)]
    pub algorithm: Algorithm,
    #[serde(default)]
    pub objective: ObjectiveGrid,
    /// Inclusive `[min, max]` filter on record length.
    #[serde(default)]
    pub lengths: Option<[usize; 2]>,
    /// Iteration budget; overrides the algorithm's `t_max`.
    #[serde(default)]
    pub budget: Option<usize>,
    /// Model evaluation budget per inversion.
    #[serde(default)]
    pub max_forwards: Option<u64>,
    #[serde(default)]
    pub seed: u64,
    /// Worker threads; 0 uses every core.
    #[serde(default)]
    pub parallelism: usize,
    /// Treat the input length as unknown and try `n = 1..=n_max`.
    #[serde(default)]
    pub length_sweep: Option<usize>,
    #[serde(default)]
    pub precision: Dtype,
}

impl ExperimentConfig {
    pub fn new(model: impl Into<PathBuf>, dataset: impl Into<PathBuf>) -> Self {
        Self {
            model: model.into(),
            dataset: dataset.into(),
            algorithm: Algorithm::default(),
            objective: ObjectiveGrid::default(),
            lengths: None,
            budget: None,
            max_forwards: None,
            seed: 0,
            parallelism: 0,
            length_sweep: None,
            precision: Dtype::F32,
        }
    }

    /// Reads a config file. Relative paths inside it are taken relative to
    /// the file's directory.
    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: Self =
            serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [&mut cfg.model, &mut cfg.dataset] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Config(msg.into()));
        if self.budget == Some(0) {
            return bad("budget must be positive");
        }
        if self.max_forwards == Some(0) {
            return bad("max_forwards must be positive");
        }
        if self.objective.k.is_empty() || self.objective.m.is_empty() {
            return bad("objective needs at least one k and one m");
        }
        if self.objective.m.contains(&0) {
            return bad("m must be positive");
        }
        if self.objective.k.contains(&Knowledge::Top(0)) {
            return bad("k must be positive");
        }
        if let Some([lo, hi]) = self.lengths {
            if lo == 0 || lo > hi {
                return bad("lengths must be [min, max] with 1 <= min <= max");
            }
        }
        if self.length_sweep == Some(0) {
            return bad("length_sweep needs n_max >= 1");
        }
        if !(self.objective.fluency_weight >= 0.0) || !(self.objective.output_tau > 0.0) {
            return bad("fluency_weight must be >= 0 and output_tau > 0");
        }
        self.algorithm.validate()
    }
}

/// Outcome of one (record, k, m) inversion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub record_id: u64,
    /// True input length.
    pub n: usize,
    pub k: Knowledge,
    pub m: usize,
    pub algorithm: String,
    /// Length of the last attempted input.
    pub n_attempted: usize,
    /// Length at which the sweep succeeded.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub predicted_n: Option<usize>,
    #[serde(default)]
    pub swept: bool,
    /// Summed over all sweep attempts.
    pub iterations: usize,
    pub forwards: u64,
    pub success: bool,
    pub exact: bool,
    pub partial: f64,
    #[serde(default)]
    pub length_mismatch: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pii: Option<f64>,
    /// `None` when the loss was not finite.
    pub final_loss: Option<f64>,
    pub x_star: Vec<u32>,
    /// Per-position hit flags over the common prefix of `x_star` and the input.
    pub position_match: Vec<bool>,
}

/// Wall time of one run. Kept apart from [`RunRecord`] so raw results stay
/// reproducible byte for byte.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub record_id: u64,
    pub k: Knowledge,
    pub m: usize,
    pub wall_ms: f64,
}

#[derive(Debug, Clone)]
pub struct Campaign {
    pub records: Vec<RunRecord>,
    pub timings: Vec<Timing>,
    pub report: MetricsReport,
}

fn knowledge_key(k: Knowledge) -> u64 {
    match k {
        Knowledge::None => 0,
        Knowledge::Top(k) => k as u64,
        Knowledge::All => u64::MAX,
    }
}

/// Search seed of one `(record, k, m)` job.
pub fn job_seed(seed: u64, id: u64, k: Knowledge, m: usize) -> u64 {
    let s = substream(seed, "search", id);
    substream(substream(s, "k", knowledge_key(k)), "m", m as u64)
}

/// Runs every selected record against every `(k, m)` cell.
///
/// Results are ordered by record id, then by the order of `k` and `m` in the
/// config, whatever the thread count.
pub fn run_campaign<F: Scalar>(
    weights: &ModelWeights<F>,
    dataset: &[DatasetRecord],
    cfg: &ExperimentConfig,
) -> Result<Campaign> {
    cfg.validate()?;
    check_vocabulary(dataset, weights.vocab_size())?;
    let mut selected: Vec<&DatasetRecord> = dataset
        .iter()
        .filter(|r| {
            cfg.lengths
                .is_none_or(|[lo, hi]| (lo..=hi).contains(&r.tokens.len()))
        })
        .collect();
    selected.sort_by_key(|r| r.id);

    let max_seq = weights.config.max_seq_len;
    let longest = selected.iter().map(|r| r.tokens.len()).max().unwrap_or(0);
    let longest = longest.max(cfg.length_sweep.unwrap_or(0));
    let max_m = cfg.objective.m.iter().copied().max().unwrap_or(1);
    if longest > 0 && longest + max_m - 1 > max_seq {
        return Err(Error::Config(format!(
            "input length {longest} with {max_m} output tokens exceeds the model context {max_seq}"
        )));
    }

    let mut jobs = Vec::new();
    for r in &selected {
        for &k in &cfg.objective.k {
            for &m in &cfg.objective.m {
                jobs.push((*r, k, m));
            }
        }
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.parallelism)
        .build()
        .map_err(|e| Error::Config(format!("cannot start worker pool: {e}")))?;
    let out: Vec<(RunRecord, Timing)> = pool.install(|| {
        jobs.par_iter()
            .map(|&(r, k, m)| run_job(weights, r, k, m, cfg))
            .collect::<Result<_>>()
    })?;
    let (records, timings): (Vec<_>, Vec<_>) = out.into_iter().unzip();
    let report = aggregate(&records, &timings)?;
    Ok(Campaign {
        records,
        timings,
        report,
    })
}

fn run_job<F: Scalar>(
    weights: &ModelWeights<F>,
    record: &DatasetRecord,
    k: Knowledge,
    m: usize,
    cfg: &ExperimentConfig,
) -> Result<(RunRecord, Timing)> {
    let start = Instant::now();
    let x = &record.tokens;
    let target = make_target(weights, x, m, k)?;
    let spec = cfg.objective.spec_for(&target);
    let seed = job_seed(cfg.seed, record.id, k, m);
    let algorithm = cfg.algorithm.label();

    let (result, iterations, forwards, n_attempted, predicted_n) = match cfg.length_sweep {
        None => {
            let alg = cfg.algorithm.configured(seed, cfg.budget, cfg.max_forwards);
            let res = alg.run(weights, &target, &spec, &RunOptions::default())?;
            let (it, fw) = (res.iterations_used, res.forwards);
            (res, it, fw, x.len(), None)
        }
        Some(n_max) => {
            let (mut iterations, mut forwards) = (0, 0);
            let mut last = None;
            for n in 1..=n_max {
                let alg = cfg.algorithm.configured(
                    substream(seed, "length", n as u64),
                    cfg.budget,
                    cfg.max_forwards,
                );
                let attempt = TargetOutput {
                    n_input: n,
                    ..target.clone()
                };
                let res = alg.run(weights, &attempt, &spec, &RunOptions::default())?;
                iterations += res.iterations_used;
                forwards += res.forwards;
                let hit = res.success;
                last = Some((res, n));
                if hit {
                    break;
                }
            }
            let (res, n) = last.expect("n_max >= 1");
            let predicted = res.success.then_some(n);
            (res, iterations, forwards, n, predicted)
        }
    };

    let partial = partial_match(&result.x_star, x);
    let run = RunRecord {
        record_id: record.id,
        n: x.len(),
        k,
        m,
        algorithm,
        n_attempted,
        predicted_n,
        swept: cfg.length_sweep.is_some(),
        iterations,
        forwards,
        success: result.success,
        exact: exact_match(&result.x_star, x),
        partial: partial.fraction,
        length_mismatch: partial.length_mismatch,
        pii: record
            .pii_mask
            .as_deref()
            .and_then(|mask| pii_match(&result.x_star, x, mask)),
        final_loss: result.final_loss.is_finite().then_some(result.final_loss),
        position_match: result.x_star.iter().zip(x).map(|(a, b)| a == b).collect(),
        x_star: result.x_star,
    };
    let timing = Timing {
        record_id: record.id,
        k,
        m,
        wall_ms: start.elapsed().as_secs_f64() * 1e3,
    };
    Ok((run, timing))
}

/// Loads the model and dataset named by `cfg` and runs the campaign in the
/// configured precision.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Campaign> {
    cfg.validate()?;
    if !cfg.model.exists() {
        return Err(Error::Config(format!(
            "model checkpoint {} not found",
            cfg.model.display()
        )));
    }
    if !cfg.dataset.exists() {
        return Err(Error::Config(format!(
            "dataset {} not found",
            cfg.dataset.display()
        )));
    }
    let dataset: Vec<DatasetRecord> = read_jsonl(&cfg.dataset)?;
    match cfg.precision {
        Dtype::F32 => run_campaign(&load_checkpoint::<f32>(&cfg.model)?, &dataset, cfg),
        Dtype::F64 => run_campaign(&load_checkpoint::<f64>(&cfg.model)?, &dataset, cfg),
    }
}

/// Writes `results.jsonl`, `timings.jsonl` and `summary.json` into `dir`.
pub fn write_campaign(dir: impl AsRef<Path>, campaign: &Campaign) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_jsonl(dir.join("results.jsonl"), &campaign.records)?;
    write_jsonl(dir.join("timings.jsonl"), &campaign.timings)?;
    let summary = dir.join("summary.json");
    let text = serde_json::to_string_pretty(&campaign.report)
        .map_err(|e| Error::json(summary.display().to_string(), e))?;
    fs::write(&summary, text + "\n").map_err(|e| Error::io(&summary, e))
}

/// Distinct `(k, m)` cells present in a set of results.
pub(crate) fn cells(records: &[RunRecord]) -> BTreeSet<(Knowledge, usize)> {
    records.iter().map(|r| (r.k, r.m)).collect()
}
