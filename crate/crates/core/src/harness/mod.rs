//! Datasets, campaigns, metrics and reports.

mod dataset;
mod experiment;
mod metrics;
mod report;

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};

pub use dataset::{check_vocabulary, gen_random_dataset, DatasetRecord};
pub use experiment::{
    job_seed, run_campaign, run_experiment, write_campaign, Algorithm, Campaign, ExperimentConfig,
    ObjectiveGrid, RunRecord, Timing,
};
pub use metrics::{exact_match, partial_match, pii_match, wilson_interval, PartialMatch, WILSON_Z};
pub use report::{
    aggregate, emit_report, AlgorithmRow, CurvePoint, FalseDiscovery, GridCell, LengthCell,
    LengthRow, MeanSe, MetricsReport, PositionRow, Rate, ReportFormat, CSV_COLUMNS,
};

/// Seed of a named random stream derived from a campaign seed.
///
/// Streams are independent of one another and of the order in which work is
/// scheduled, so any single record can be rerun in isolation.
pub fn substream(seed: u64, name: &str, index: u64) -> u64 {
    splitmix64(splitmix64(seed ^ fnv1a(name.as_bytes())) ^ index)
}

pub(crate) fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Writes one JSON document per line.
pub fn write_jsonl<T: Serialize>(path: impl AsRef<Path>, items: &[T]) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for item in items {
        serde_json::to_writer(&mut out, item)
            .map_err(|e| Error::json(path.display().to_string(), e))?;
        out.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

/// Reads one JSON document per non-blank line.
pub fn read_jsonl<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<Vec<T>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let item = serde_json::from_str(&line)
            .map_err(|e| Error::json(format!("{}:{}", path.display(), i + 1), e))?;
        out.push(item);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn substreams_differ_by_name_and_index() {
        let a = substream(1, "dataset", 0);
        assert_eq!(a, substream(1, "dataset", 0));
        assert_ne!(a, substream(1, "model", 0));
        assert_ne!(a, substream(1, "dataset", 1));
        assert_ne!(a, substream(2, "dataset", 0));
    }

    #[test]
    fn jsonl_reports_the_failing_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.jsonl");
        std::fs::write(&p, "[1]\n\n[2, 3]\nnope\n").unwrap();
        let err = read_jsonl::<Vec<u32>>(&p).unwrap_err();
        assert!(err.to_string().contains("x.jsonl:4"), "{err}");
    }
}
