use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::experiment::{cells, RunRecord, Timing};
use super::metrics::wilson_interval;
use crate::error::{Error, Result};
use crate::objective::Knowledge;

/// A proportion in percent with its 95% Wilson interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rate {
    pub successes: u64,
    pub trials: u64,
    pub percent: f64,
    pub low: f64,
    pub high: f64,
}

impl Rate {
    fn of(successes: u64, trials: u64) -> Result<Option<Self>> {
        if trials == 0 {
            return Ok(None);
        }
        let (lo, hi) = wilson_interval(successes, trials)?;
        Ok(Some(Self {
            successes,
            trials,
            percent: 100.0 * successes as f64 / trials as f64,
            low: 100.0 * lo,
            high: 100.0 * hi,
        }))
    }

    fn count<'a>(
        rows: impl IntoIterator<Item = &'a RunRecord>,
        hit: impl Fn(&RunRecord) -> bool,
    ) -> Result<Option<Self>> {
        let (mut s, mut n) = (0, 0);
        for r in rows {
            n += 1;
            s += hit(r) as u64;
        }
        Self::of(s, n)
    }

    fn cell(&self) -> String {
        format!("{:.1} ± {:.1}", self.percent, (self.high - self.low) / 2.0)
    }
}

/// Mean in percent with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanSe {
    pub mean: f64,
    pub se: f64,
    pub count: u64,
}

impl MeanSe {
    fn of(values: impl IntoIterator<Item = f64>) -> Option<Self> {
        let xs: Vec<f64> = values.into_iter().map(|v| 100.0 * v).collect();
        if xs.is_empty() {
            return None;
        }
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let se = if xs.len() < 2 {
            0.0
        } else {
            let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
            (var / n).sqrt()
        };
        Some(Self {
            mean,
            se,
            count: xs.len() as u64,
        })
    }

    fn cell(&self) -> String {
        format!("{:.1} ± {:.1}", self.mean, self.se)
    }
}

/// Successes whose answer differs from the true input.
///
/// With no successes at all the rate is 0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FalseDiscovery {
    pub false_positives: u64,
    pub discoveries: u64,
    pub percent: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LengthRow {
    pub n: usize,
    pub exact: Rate,
    pub partial: MeanSe,
    pub mean_iterations: f64,
    pub mean_forwards: f64,
    /// `min(first, last) - mean(middle)` positional hit rate in points, for
    /// `n >= 3`. Negative values mean the edges were not easier.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub edge_advantage: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PositionRow {
    pub n: usize,
    pub position: usize,
    pub hits: Rate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub k: Knowledge,
    pub m: usize,
    pub exact: Rate,
    pub partial: MeanSe,
    pub mean_forwards: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean_wall_ms: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlgorithmRow {
    pub algorithm: String,
    pub exact: Rate,
    pub partial: MeanSe,
    pub mean_forwards: f64,
}

/// Exact rate among inputs of length `n` after at most `t` iterations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub n: usize,
    pub t: usize,
    pub exact: Rate,
}

/// Count of swept runs with a given true and predicted length.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LengthCell {
    pub true_n: usize,
    pub predicted_n: Option<usize>,
    pub count: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub runs: u64,
    pub exact: Option<Rate>,
    pub partial: Option<MeanSe>,
    pub pii: Option<MeanSe>,
    pub success: Option<Rate>,
    pub false_discovery: FalseDiscovery,
    pub length_mismatches: u64,
    pub per_length: Vec<LengthRow>,
    pub per_position: Vec<PositionRow>,
    pub grid: Vec<GridCell>,
    pub per_algorithm: Vec<AlgorithmRow>,
    pub iteration_curve: Vec<CurvePoint>,
    pub length_matrix: Vec<LengthCell>,
    pub total_forwards: u64,
    pub total_iterations: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub total_wall_ms: Option<f64>,
}

fn mean(xs: impl IntoIterator<Item = f64>) -> f64 {
    let (s, n) = xs
        .into_iter()
        .fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

type Key = (u64, Knowledge, usize);

fn wall_index(timings: &[Timing]) -> HashMap<Key, f64> {
    timings
        .iter()
        .map(|t| ((t.record_id, t.k, t.m), t.wall_ms))
        .collect()
}

/// 1, 2, 5, 10, 20, 50, ... up to and including `max`.
fn checkpoints(max: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut scale = 1;
    'outer: loop {
        for f in [1, 2, 5] {
            let t = f * scale;
            if t >= max {
                break 'outer;
            }
            out.push(t);
        }
        scale *= 10;
    }
    if max > 0 {
        out.push(max);
    }
    out
}

pub fn aggregate(records: &[RunRecord], timings: &[Timing]) -> Result<MetricsReport> {
    let walls = wall_index(timings);
    let wall_of = |r: &RunRecord| walls.get(&(r.record_id, r.k, r.m)).copied();

    let successes: Vec<&RunRecord> = records.iter().filter(|r| r.success).collect();
    let fp = successes.iter().filter(|r| !r.exact).count() as u64;
    let false_discovery = FalseDiscovery {
        false_positives: fp,
        discoveries: successes.len() as u64,
        percent: if successes.is_empty() {
            0.0
        } else {
            100.0 * fp as f64 / successes.len() as f64
        },
    };

    let mut by_len: BTreeMap<usize, Vec<&RunRecord>> = BTreeMap::new();
    for r in records {
        by_len.entry(r.n).or_default().push(r);
    }

    let mut per_length = Vec::new();
    let mut per_position = Vec::new();
    let mut iteration_curve = Vec::new();
    for (&n, rows) in &by_len {
        let mut hit_rates = Vec::with_capacity(n);
        for p in 0..n {
            let hits = rows
                .iter()
                .filter(|r| r.position_match.get(p).copied().unwrap_or(false))
                .count() as u64;
            let rate = Rate::of(hits, rows.len() as u64)?.expect("nonempty group");
            hit_rates.push(rate.percent);
            per_position.push(PositionRow {
                n,
                position: p,
                hits: rate,
            });
        }
        let edge_advantage = (n >= 3).then(|| {
            hit_rates[0].min(hit_rates[n - 1]) - mean(hit_rates[1..n - 1].iter().copied())
        });
        per_length.push(LengthRow {
            n,
            exact: Rate::count(rows.iter().copied(), |r| r.exact)?.expect("nonempty group"),
            partial: MeanSe::of(rows.iter().map(|r| r.partial)).expect("nonempty group"),
            mean_iterations: mean(rows.iter().map(|r| r.iterations as f64)),
            mean_forwards: mean(rows.iter().map(|r| r.forwards as f64)),
            edge_advantage,
        });
        let max_t = rows.iter().map(|r| r.iterations).max().unwrap_or(0);
        for t in checkpoints(max_t) {
            let exact = Rate::count(rows.iter().copied(), |r| r.exact && r.iterations <= t)?
                .expect("nonempty group");
            iteration_curve.push(CurvePoint { n, t, exact });
        }
    }

    let mut grid = Vec::new();
    for (k, m) in cells(records) {
        let rows: Vec<&RunRecord> = records.iter().filter(|r| r.k == k && r.m == m).collect();
        let w: Vec<f64> = rows.iter().filter_map(|r| wall_of(r)).collect();
        grid.push(GridCell {
            k,
            m,
            exact: Rate::count(rows.iter().copied(), |r| r.exact)?.expect("nonempty cell"),
            partial: MeanSe::of(rows.iter().map(|r| r.partial)).expect("nonempty cell"),
            mean_forwards: mean(rows.iter().map(|r| r.forwards as f64)),
            mean_wall_ms: (!w.is_empty()).then(|| mean(w)),
        });
    }

    let mut by_alg: BTreeMap<&str, Vec<&RunRecord>> = BTreeMap::new();
    for r in records {
        by_alg.entry(&r.algorithm).or_default().push(r);
    }
    let per_algorithm = by_alg
        .into_iter()
        .map(|(name, rows)| {
            Ok(AlgorithmRow {
                algorithm: name.to_string(),
                exact: Rate::count(rows.iter().copied(), |r| r.exact)?.expect("nonempty group"),
                partial: MeanSe::of(rows.iter().map(|r| r.partial)).expect("nonempty group"),
                mean_forwards: mean(rows.iter().map(|r| r.forwards as f64)),
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let mut matrix: BTreeMap<(usize, Option<usize>), u64> = BTreeMap::new();
    for r in records.iter().filter(|r| r.swept) {
        *matrix.entry((r.n, r.predicted_n)).or_default() += 1;
    }

    let matched: Vec<f64> = records.iter().filter_map(wall_of).collect();
    Ok(MetricsReport {
        runs: records.len() as u64,
        exact: Rate::count(records, |r| r.exact)?,
        partial: MeanSe::of(records.iter().map(|r| r.partial)),
        pii: MeanSe::of(records.iter().filter_map(|r| r.pii)),
        success: Rate::count(records, |r| r.success)?,
        false_discovery,
        length_mismatches: records.iter().filter(|r| r.length_mismatch).count() as u64,
        per_length,
        per_position,
        grid,
        per_algorithm,
        iteration_curve,
        length_matrix: matrix
            .into_iter()
            .map(|((true_n, predicted_n), count)| LengthCell {
                true_n,
                predicted_n,
                count,
            })
            .collect(),
        total_forwards: records.iter().map(|r| r.forwards).sum(),
        total_iterations: records.iter().map(|r| r.iterations as u64).sum(),
        total_wall_ms: (!matched.is_empty()).then(|| matched.iter().sum()),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Json,
    Markdown,
}

impl FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(Self::Csv),
            "json" => Ok(Self::Json),
            "markdown" | "md" => Ok(Self::Markdown),
            other => Err(Error::Parameter(format!(
                "unknown report format {other:?}; expected csv, json or markdown"
            ))),
        }
    }
}

pub const CSV_COLUMNS: [&str; 13] = [
    "record_id",
    "n",
    "k",
    "m",
    "algorithm",
    "iterations",
    "forwards",
    "success",
    "exact",
    "partial",
    "pii",
    "final_loss",
    "wall_ms",
];

/// Renders raw results in the requested format.
pub fn emit_report(
    records: &[RunRecord],
    timings: &[Timing],
    format: ReportFormat,
) -> Result<String> {
    match format {
        ReportFormat::Csv => csv_report(records, timings),
        ReportFormat::Json => {
            let report = aggregate(records, timings)?;
            serde_json::to_string_pretty(&report)
                .map(|s| s + "\n")
                .map_err(|e| Error::json("report", e))
        }
        ReportFormat::Markdown => Ok(markdown(&aggregate(records, timings)?)),
    }
}

fn csv_report(records: &[RunRecord], timings: &[Timing]) -> Result<String> {
    let walls = wall_index(timings);
    let csv_err = |e: csv::Error| Error::Contract(format!("csv encoding failed: {e}"));
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_writer(Vec::new());
    w.write_record(CSV_COLUMNS).map_err(csv_err)?;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for r in records {
        w.write_record([
            r.record_id.to_string(),
            r.n.to_string(),
            r.k.to_string(),
            r.m.to_string(),
            r.algorithm.clone(),
            r.iterations.to_string(),
            r.forwards.to_string(),
            (r.success as u8).to_string(),
            (r.exact as u8).to_string(),
            r.partial.to_string(),
            opt(r.pii),
            opt(r.final_loss),
            opt(walls.get(&(r.record_id, r.k, r.m)).copied()),
        ])
        .map_err(csv_err)?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| Error::Contract(format!("csv encoding failed: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

fn markdown(r: &MetricsReport) -> String {
    let dash = || "-".to_string();
    let mut s = String::new();
    let _ = writeln!(s, "| metric | value |\n|---|---|");
    let _ = writeln!(s, "| runs | {} |", r.runs);
    let _ = writeln!(
        s,
        "| exact (%) | {} |",
        r.exact.map_or_else(dash, |x| x.cell())
    );
    let _ = writeln!(
        s,
        "| partial (%) | {} |",
        r.partial.map_or_else(dash, |x| x.cell())
    );
    let _ = writeln!(s, "| pii (%) | {} |", r.pii.map_or_else(dash, |x| x.cell()));
    let _ = writeln!(
        s,
        "| success (%) | {} |",
        r.success.map_or_else(dash, |x| x.cell())
    );
    let _ = writeln!(
        s,
        "| false discoveries | {} of {} |",
        r.false_discovery.false_positives, r.false_discovery.discoveries
    );
    let _ = writeln!(s, "| forwards | {} |", r.total_forwards);
    if let Some(ms) = r.total_wall_ms {
        let _ = writeln!(s, "| wall (s) | {:.1} |", ms / 1e3);
    }

    if !r.grid.is_empty() {
        let ms: Vec<usize> = {
            let mut v: Vec<usize> = r.grid.iter().map(|c| c.m).collect();
            v.sort_unstable();
            v.dedup();
            v
        };
        let mut ks: Vec<Knowledge> = r.grid.iter().map(|c| c.k).collect();
        ks.sort_unstable();
        ks.dedup();
        let _ = write!(s, "\n| k \\ m |");
        for m in &ms {
            let _ = write!(s, " {m} |");
        }
        let _ = write!(s, "\n|---|{}\n", "---|".repeat(ms.len()));
        for k in ks {
            let _ = write!(s, "| {k} |");
            for &m in &ms {
                let cell = r
                    .grid
                    .iter()
                    .find(|c| c.k == k && c.m == m)
                    .map_or_else(dash, |c| c.exact.cell());
                let _ = write!(s, " {cell} |");
            }
            s.push('\n');
        }
    }

    if !r.per_length.is_empty() {
        let _ = writeln!(
            s,
            "\n| n | exact (%) | partial (%) | iterations | forwards |\n|---|---|---|---|---|"
        );
        for row in &r.per_length {
            let _ = writeln!(
                s,
                "| {} | {} | {} | {:.1} | {:.1} |",
                row.n,
                row.exact.cell(),
                row.partial.cell(),
                row.mean_iterations,
                row.mean_forwards
            );
        }
    }

    if r.per_algorithm.len() > 1 {
        let _ = writeln!(
            s,
            "\n| algorithm | exact (%) | partial (%) | forwards |\n|---|---|---|---|"
        );
        for row in &r.per_algorithm {
            let _ = writeln!(
                s,
                "| {} | {} | {} | {:.1} |",
                row.algorithm,
                row.exact.cell(),
                row.partial.cell(),
                row.mean_forwards
            );
        }
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(
        id: u64,
        n: usize,
        k: Knowledge,
        m: usize,
        exact: bool,
        success: bool,
        partial: f64,
    ) -> RunRecord {
        RunRecord {
            record_id: id,
            n,
            k,
            m,
            algorithm: "soda".into(),
            n_attempted: n,
            predicted_n: None,
            swept: false,
            iterations: 10 * (id as usize + 1),
            forwards: 20 * (id + 1),
            success,
            exact,
            partial,
            length_mismatch: false,
            pii: None,
            final_loss: Some(0.5),
            x_star: vec![0; n],
            position_match: (0..n).map(|p| exact || p == 0).collect(),
        }
    }

    fn sample() -> Vec<RunRecord> {
        let mut v = Vec::new();
        for id in 0..12u64 {
            for (k, m) in [
                (Knowledge::All, 1),
                (Knowledge::Top(4), 1),
                (Knowledge::All, 2),
            ] {
                let exact = !(id + m as u64).is_multiple_of(3);
                v.push(row(
                    id,
                    1 + id as usize % 3,
                    k,
                    m,
                    exact,
                    exact || id == 5,
                    if exact { 1.0 } else { 0.25 },
                ));
            }
        }
        v
    }

    #[test]
    fn empty_results_give_header_only_csv() {
        let csv = emit_report(&[], &[], ReportFormat::Csv).unwrap();
        assert_eq!(csv, CSV_COLUMNS.join(",") + "\n");
        let md = emit_report(&[], &[], ReportFormat::Markdown).unwrap();
        assert!(md.contains("| runs | 0 |"));
        let json: MetricsReport =
            serde_json::from_str(&emit_report(&[], &[], ReportFormat::Json).unwrap()).unwrap();
        assert_eq!(json.exact, None);
    }

    #[test]
    fn summary_matches_hand_aggregation_of_the_csv() {
        let records = sample();
        let timings: Vec<Timing> = records
            .iter()
            .map(|r| Timing {
                record_id: r.record_id,
                k: r.k,
                m: r.m,
                wall_ms: 1.5,
            })
            .collect();
        let csv = emit_report(&records, &timings, ReportFormat::Csv).unwrap();
        let mut rd = csv::Reader::from_reader(csv.as_bytes());
        let header: Vec<String> = rd.headers().unwrap().iter().map(String::from).collect();
        assert_eq!(header, CSV_COLUMNS);
        let rows: Vec<csv::StringRecord> = rd.records().map(|r| r.unwrap()).collect();
        assert_eq!(rows.len(), records.len());
        let col = |name: &str| CSV_COLUMNS.iter().position(|c| *c == name).unwrap();
        let exact: f64 = rows
            .iter()
            .map(|r| r[col("exact")].parse::<f64>().unwrap())
            .sum::<f64>();
        let partial: f64 = rows
            .iter()
            .map(|r| r[col("partial")].parse::<f64>().unwrap())
            .sum::<f64>();
        let forwards: u64 = rows
            .iter()
            .map(|r| r[col("forwards")].parse::<u64>().unwrap())
            .sum();
        let wall: f64 = rows
            .iter()
            .map(|r| r[col("wall_ms")].parse::<f64>().unwrap())
            .sum();

        let rep: MetricsReport =
            serde_json::from_str(&emit_report(&records, &timings, ReportFormat::Json).unwrap())
                .unwrap();
        let n = rows.len() as f64;
        assert!((rep.exact.unwrap().percent - 100.0 * exact / n).abs() < 1e-9);
        assert!((rep.partial.unwrap().mean - 100.0 * partial / n).abs() < 1e-9);
        assert_eq!(rep.total_forwards, forwards);
        assert!((rep.total_wall_ms.unwrap() - wall).abs() < 1e-9);

        let all1: Vec<&csv::StringRecord> = rows
            .iter()
            .filter(|r| &r[col("k")] == "all" && &r[col("m")] == "1")
            .collect();
        let cell = rep
            .grid
            .iter()
            .find(|c| c.k == Knowledge::All && c.m == 1)
            .unwrap();
        let hits = all1.iter().filter(|r| &r[col("exact")] == "1").count() as u64;
        assert_eq!(
            (cell.exact.successes, cell.exact.trials),
            (hits, all1.len() as u64)
        );
    }

    #[test]
    fn grid_has_one_cell_per_setting_pair() {
        let rep = aggregate(&sample(), &[]).unwrap();
        assert_eq!(rep.grid.len(), 3);
        let md = markdown(&rep);
        // 2 k rows by 2 m columns, one pair missing
        assert!(md.contains("| k \\ m | 1 | 2 |"));
        assert_eq!(md.matches("| 4 |").count(), 1);
    }

    #[test]
    fn false_discovery_counts_inexact_successes() {
        let rep = aggregate(&sample(), &[]).unwrap();
        let fd = rep.false_discovery;
        assert_eq!(fd.false_positives, 2);
        assert!((fd.percent - 100.0 * 2.0 / fd.discoveries as f64).abs() < 1e-12);
        let none = aggregate(&[row(0, 1, Knowledge::All, 1, false, false, 0.0)], &[]).unwrap();
        assert_eq!(none.false_discovery.percent, 0.0);
    }

    #[test]
    fn rates_stay_in_range_and_bracket() {
        let rep = aggregate(&sample(), &[]).unwrap();
        let rates = rep
            .per_length
            .iter()
            .map(|r| r.exact)
            .chain(rep.grid.iter().map(|c| c.exact))
            .chain(rep.per_position.iter().map(|p| p.hits))
            .chain(rep.iteration_curve.iter().map(|p| p.exact));
        for r in rates {
            assert!(0.0 <= r.low && r.low <= r.percent && r.percent <= r.high && r.high <= 100.0);
        }
    }

    #[test]
    fn iteration_curve_is_cumulative() {
        let rep = aggregate(&sample(), &[]).unwrap();
        for n in 1..=3 {
            let pts: Vec<&CurvePoint> = rep.iteration_curve.iter().filter(|p| p.n == n).collect();
            assert!(pts
                .windows(2)
                .all(|w| w[0].t < w[1].t && w[0].exact.successes <= w[1].exact.successes));
            let last = pts.last().unwrap();
            let row = rep.per_length.iter().find(|r| r.n == n).unwrap();
            assert_eq!(last.exact.successes, row.exact.successes);
        }
        assert_eq!(checkpoints(120), vec![1, 2, 5, 10, 20, 50, 100, 120]);
        assert_eq!(checkpoints(1), vec![1]);
    }

    #[test]
    fn unknown_format_rejected() {
        assert_eq!(
            "md".parse::<ReportFormat>().unwrap(),
            ReportFormat::Markdown
        );
        assert!(matches!(
            "xml".parse::<ReportFormat>(),
            Err(Error::Parameter(_))
        ));
    }
}
