use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use lminv::harness::{
    emit_report, gen_random_dataset, job_seed, read_jsonl, run_experiment, write_campaign,
    write_jsonl, Algorithm, DatasetRecord, ExperimentConfig, ReportFormat, RunRecord, Timing,
};
use lminv::model::{init_random, load_checkpoint, save_checkpoint, ModelConfig};
use lminv::objective::{make_target, Knowledge, TargetOutput, TargetRecord};
use lminv::optimize::{EmbedParams, GcgParams, RunOptions, SodaParams};
use lminv::tensor::{Dtype, Scalar};

#[derive(Parser)]
#[command(
    name = "lminv",
    version,
    about = "Recover the exact input of a small transformer from its output"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a randomly initialised checkpoint.
    GenModel(GenModel),
    /// Write a dataset of uniform random token sequences as JSONL.
    GenData(GenData),
    /// Build inversion targets for every record and (k, m) setting.
    MakeTargets(MakeTargets),
    /// Invert one target, writing the search trace.
    Invert(Invert),
    /// Run a campaign from a config file.
    Run(Run),
    /// Re-aggregate raw results.
    Report(Report),
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Json,
    Markdown,
}

impl Format {
    fn core(self) -> ReportFormat {
        match self {
            Format::Csv => ReportFormat::Csv,
            Format::Json => ReportFormat::Json,
            Format::Markdown => ReportFormat::Markdown,
        }
    }

    fn extension(self) -> &'static str {
        match self {
            Format::Csv => "csv",
            Format::Json => "json",
            Format::Markdown => "md",
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Precision {
    F32,
    F64,
}

impl From<Precision> for Dtype {
    fn from(p: Precision) -> Self {
        match p {
            Precision::F32 => Dtype::F32,
            Precision::F64 => Dtype::F64,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum AlgorithmName {
    Soda,
    Embed,
    Gcg,
}

/// Reads a JSON object and lays it over the serialized `base`, so a config
/// file only needs the keys it changes.
fn overlay<T: Serialize + DeserializeOwned>(base: &T, path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let patch: serde_json::Value =
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    let mut value = serde_json::to_value(base)?;
    let (Some(obj), serde_json::Value::Object(patch)) = (value.as_object_mut(), patch) else {
        bail!("{} must hold a JSON object", path.display());
    };
    obj.extend(patch);
    serde_json::from_value(value).with_context(|| format!("invalid config {}", path.display()))
}

#[derive(clap::Args)]
struct GenModel {
    /// JSON model config; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    vocab_size: Option<usize>,
    #[arg(long)]
    n_layers: Option<usize>,
    #[arg(long)]
    d_model: Option<usize>,
    #[arg(long)]
    n_heads: Option<usize>,
    #[arg(long)]
    d_ff: Option<usize>,
    #[arg(long)]
    max_seq_len: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value = "f32")]
    precision: Precision,
    #[arg(long, short)]
    out: PathBuf,
}

fn gen_model(a: GenModel) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => overlay(&ModelConfig::default(), p)?,
        None => ModelConfig::default(),
    };
    let fields = [
        (a.vocab_size, &mut cfg.vocab_size),
        (a.n_layers, &mut cfg.n_layers),
        (a.d_model, &mut cfg.d_model),
        (a.n_heads, &mut cfg.n_heads),
        (a.d_ff, &mut cfg.d_ff),
        (a.max_seq_len, &mut cfg.max_seq_len),
    ];
    for (flag, field) in fields {
        if let Some(v) = flag {
            *field = v;
        }
    }
    match Dtype::from(a.precision) {
        Dtype::F32 => save_checkpoint(&init_random::<f32>(&cfg, a.seed)?, &a.out)?,
        Dtype::F64 => save_checkpoint(&init_random::<f64>(&cfg, a.seed)?, &a.out)?,
    }
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct DataConfig {
    vocab_size: Option<usize>,
    lengths: [usize; 2],
    per_length: usize,
    seed: u64,
}

#[derive(clap::Args)]
struct GenData {
    /// JSON with `vocab_size`, `lengths`, `per_length`, `seed`; flags override.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    vocab_size: Option<usize>,
    /// Take the vocabulary size from this checkpoint.
    #[arg(long, conflicts_with = "vocab_size")]
    model: Option<PathBuf>,
    #[arg(long)]
    min_len: Option<usize>,
    #[arg(long)]
    max_len: Option<usize>,
    #[arg(long)]
    per_length: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, short)]
    out: PathBuf,
}

fn gen_data(a: GenData) -> Result<()> {
    let base = DataConfig {
        vocab_size: None,
        lengths: [1, 10],
        per_length: 1000,
        seed: 0,
    };
    let mut cfg = match &a.config {
        Some(p) => overlay(&base, p)?,
        None => base,
    };
    cfg.vocab_size = a.vocab_size.or(cfg.vocab_size);
    if let Some(m) = &a.model {
        cfg.vocab_size = Some(load_checkpoint::<f64>(m)?.vocab_size());
    }
    cfg.lengths = [
        a.min_len.unwrap_or(cfg.lengths[0]),
        a.max_len.unwrap_or(cfg.lengths[1]),
    ];
    cfg.per_length = a.per_length.unwrap_or(cfg.per_length);
    cfg.seed = a.seed.unwrap_or(cfg.seed);
    let Some(vocab) = cfg.vocab_size else {
        bail!("need --vocab-size, --model or vocab_size in the config");
    };
    let data = gen_random_dataset(
        vocab,
        cfg.lengths[0]..=cfg.lengths[1],
        cfg.per_length,
        cfg.seed,
    )?;
    write_jsonl(&a.out, &data)?;
    Ok(())
}

#[derive(clap::Args)]
struct MakeTargets {
    /// Campaign config supplying model, dataset, k, m and precision.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Observed logits per position: `all`, `none` or a count. Repeatable.
    #[arg(long, value_delimiter = ',')]
    k: Vec<Knowledge>,
    /// Output tokens. Repeatable.
    #[arg(long, value_delimiter = ',')]
    m: Vec<usize>,
    #[arg(long, value_enum)]
    precision: Option<Precision>,
    #[arg(long, short)]
    out: PathBuf,
}

fn campaign_config(
    config: Option<&Path>,
    model: Option<PathBuf>,
    dataset: Option<PathBuf>,
) -> Result<ExperimentConfig> {
    let mut cfg = match config {
        Some(p) => ExperimentConfig::from_file(p)?,
        None => ExperimentConfig::new("", ""),
    };
    if let Some(m) = model {
        cfg.model = m;
    }
    if let Some(d) = dataset {
        cfg.dataset = d;
    }
    if cfg.model.as_os_str().is_empty() {
        bail!("no model given; pass --model or --config");
    }
    Ok(cfg)
}

fn make_targets(a: MakeTargets) -> Result<()> {
    let mut cfg = campaign_config(a.config.as_deref(), a.model, a.dataset)?;
    if !a.k.is_empty() {
        cfg.objective.k = a.k;
    }
    if !a.m.is_empty() {
        cfg.objective.m = a.m;
    }
    if let Some(p) = a.precision {
        cfg.precision = p.into();
    }
    cfg.validate()?;
    let data: Vec<DatasetRecord> = read_jsonl(&cfg.dataset)?;
    let targets = match cfg.precision {
        Dtype::F32 => build_targets::<f32>(&cfg, &data)?,
        Dtype::F64 => build_targets::<f64>(&cfg, &data)?,
    };
    write_jsonl(&a.out, &targets)?;
    Ok(())
}

fn build_targets<F: Scalar>(
    cfg: &ExperimentConfig,
    data: &[DatasetRecord],
) -> Result<Vec<TargetRecord>> {
    let weights = load_checkpoint::<F>(&cfg.model)?;
    lminv::harness::check_vocabulary(data, weights.vocab_size())?;
    let mut out = Vec::new();
    for r in data {
        for &k in &cfg.objective.k {
            for &m in &cfg.objective.m {
                out.push(make_target(&weights, &r.tokens, m, k)?.to_record(Some(r.id)));
            }
        }
    }
    Ok(out)
}

#[derive(clap::Args)]
struct Invert {
    /// Campaign config supplying the algorithm, objective and seed.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    targets: PathBuf,
    /// Target id; defaults to the first target in the file.
    #[arg(long)]
    id: Option<u64>,
    /// Dataset holding the true input, for the exact-so-far trace column.
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long, value_enum)]
    algorithm: Option<AlgorithmName>,
    #[arg(long)]
    budget: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum)]
    precision: Option<Precision>,
    #[arg(long, default_value_t = 10)]
    trace_every: usize,
    /// Trace destination; stdout when absent.
    #[arg(long)]
    trace: Option<PathBuf>,
}

fn invert(a: Invert) -> Result<()> {
    let mut cfg = campaign_config(a.config.as_deref(), a.model.clone(), a.dataset.clone())?;
    match a.algorithm {
        Some(AlgorithmName::Soda) if !matches!(cfg.algorithm, Algorithm::Soda(_)) => {
            cfg.algorithm = Algorithm::Soda(SodaParams::default())
        }
        Some(AlgorithmName::Embed) if !matches!(cfg.algorithm, Algorithm::Embed(_)) => {
            cfg.algorithm = Algorithm::Embed(EmbedParams::default())
        }
        Some(AlgorithmName::Gcg) if !matches!(cfg.algorithm, Algorithm::Gcg(_)) => {
            cfg.algorithm = Algorithm::Gcg(GcgParams::default())
        }
        _ => {}
    }
    cfg.budget = a.budget.or(cfg.budget);
    cfg.seed = a.seed.unwrap_or(cfg.seed);
    if let Some(p) = a.precision {
        cfg.precision = p.into();
    }
    cfg.validate()?;

    let targets: Vec<TargetRecord> = read_jsonl(&a.targets)?;
    let target = match a.id {
        Some(id) => targets.iter().find(|t| t.id == Some(id)),
        None => targets.first(),
    }
    .with_context(|| format!("no matching target in {}", a.targets.display()))?;
    let reference = match (&a.dataset, target.id) {
        (Some(path), Some(id)) => {
            let data: Vec<DatasetRecord> = read_jsonl(path)?;
            data.into_iter().find(|r| r.id == id).map(|r| r.tokens)
        }
        _ => None,
    };
    let opts = RunOptions {
        trace_every: a.trace_every,
        reference: reference.as_deref(),
    };
    let result = match cfg.precision {
        Dtype::F32 => invert_one::<f32>(&cfg, target, &opts)?,
        Dtype::F64 => invert_one::<f64>(&cfg, target, &opts)?,
    };
    match &a.trace {
        Some(p) => write_jsonl(p, &result.trace)?,
        None => {
            for point in &result.trace {
                println!("{}", serde_json::to_string(point)?);
            }
        }
    }
    let mut summary = result;
    summary.trace.clear();
    println!("{}", serde_json::to_string(&summary)?);
    Ok(())
}

fn invert_one<F: Scalar>(
    cfg: &ExperimentConfig,
    record: &TargetRecord,
    opts: &RunOptions<'_>,
) -> Result<lminv::optimize::InversionResult> {
    let weights = load_checkpoint::<F>(&cfg.model)?;
    let target = TargetOutput::<F>::from_record(record);
    let spec = cfg.objective.spec_for(&target);
    let seed = job_seed(cfg.seed, record.id.unwrap_or(0), record.k, record.y.len());
    let alg = cfg.algorithm.configured(seed, cfg.budget, cfg.max_forwards);
    Ok(alg.run(&weights, &target, &spec, opts)?)
}

#[derive(clap::Args)]
struct Run {
    #[arg(long)]
    config: PathBuf,
    /// Output directory.
    #[arg(long, short)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads; 0 uses every core.
    #[arg(long)]
    parallelism: Option<usize>,
    #[arg(long)]
    budget: Option<usize>,
    #[arg(long)]
    max_forwards: Option<u64>,
    /// Sweep input lengths 1..=N instead of using the true length.
    #[arg(long)]
    length_sweep: Option<usize>,
    #[arg(long, value_enum)]
    precision: Option<Precision>,
    /// Report formats written next to the raw results.
    #[arg(long, value_enum, value_delimiter = ',', default_values = ["csv", "markdown"])]
    format: Vec<Format>,
}

fn run(a: Run) -> Result<()> {
    let mut cfg = ExperimentConfig::from_file(&a.config)?;
    cfg.seed = a.seed.unwrap_or(cfg.seed);
    cfg.parallelism = a.parallelism.unwrap_or(cfg.parallelism);
    cfg.budget = a.budget.or(cfg.budget);
    cfg.max_forwards = a.max_forwards.or(cfg.max_forwards);
    cfg.length_sweep = a.length_sweep.or(cfg.length_sweep);
    if let Some(p) = a.precision {
        cfg.precision = p.into();
    }
    let campaign = run_experiment(&cfg)?;
    write_campaign(&a.out, &campaign)?;
    for f in &a.format {
        let path = a.out.join(format!("report.{}", f.extension()));
        let text = emit_report(&campaign.records, &campaign.timings, f.core())?;
        fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
    }
    let r = &campaign.report;
    if let Some(e) = r.exact {
        eprintln!(
            "{} runs, exact {:.1}% [{:.1}, {:.1}], {} forwards",
            r.runs, e.percent, e.low, e.high, r.total_forwards
        );
    } else {
        eprintln!("no records selected");
    }
    Ok(())
}

#[derive(clap::Args)]
struct Report {
    #[arg(long)]
    results: PathBuf,
    #[arg(long)]
    timings: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "markdown")]
    format: Format,
    /// Destination; stdout when absent.
    #[arg(long, short)]
    out: Option<PathBuf>,
}

fn report(a: Report) -> Result<()> {
    let records: Vec<RunRecord> = read_jsonl(&a.results)?;
    let timings: Vec<Timing> = match &a.timings {
        Some(p) => read_jsonl(p)?,
        None => Vec::new(),
    };
    let text = emit_report(&records, &timings, a.format.core())?;
    match &a.out {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display()))?,
        None => print!("{text}"),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let res = match cli.command {
        Command::GenModel(a) => gen_model(a),
        Command::GenData(a) => gen_data(a),
        Command::MakeTargets(a) => make_targets(a),
        Command::Invert(a) => invert(a),
        Command::Run(a) => run(a),
        Command::Report(a) => report(a),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", chain(&e));
            ExitCode::FAILURE
        }
    }
}

/// Error chain joined with `: `, skipping causes already spelled out by their parent.
fn chain(e: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in e.chain() {
        let text = cause.to_string();
        if !out.ends_with(&text) {
            if !out.is_empty() {
                out.push_str(": ");
            }
            out.push_str(&text);
        }
    }
    out
}
