use std::ops::RangeInclusive;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::substream;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub id: u64,
    pub tokens: Vec<u32>,
    /// Positions holding private information.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pii_mask: Option<Vec<usize>>,
}

/// Uniform i.i.d. token sequences, `per_length` of each length, ids in
/// generation order starting at 0.
pub fn gen_random_dataset(
    vocab_size: usize,
    lengths: RangeInclusive<usize>,
    per_length: usize,
    seed: u64,
) -> Result<Vec<DatasetRecord>> {
    if per_length == 0 {
        return Err(Error::Parameter("per_length must be positive".into()));
    }
    if vocab_size == 0 || *lengths.start() == 0 || lengths.is_empty() {
        return Err(Error::Parameter(format!(
            "need a nonempty vocabulary and lengths >= 1, got vocab {vocab_size}, lengths {lengths:?}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(substream(seed, "dataset", 0));
    let mut out = Vec::with_capacity(lengths.clone().count() * per_length);
    for n in lengths {
        for _ in 0..per_length {
            let tokens = (0..n)
                .map(|_| rng.random_range(0..vocab_size as u32))
                .collect();
            out.push(DatasetRecord {
                id: out.len() as u64,
                tokens,
                pii_mask: None,
            });
        }
    }
    Ok(out)
}

/// Rejects datasets with tokens outside the vocabulary, empty sequences,
/// out-of-range mask positions or duplicate ids.
pub fn check_vocabulary(records: &[DatasetRecord], vocab_size: usize) -> Result<()> {
    let mut ids: Vec<u64> = records.iter().map(|r| r.id).collect();
    ids.sort_unstable();
    if let Some(w) = ids.windows(2).find(|w| w[0] == w[1]) {
        return Err(Error::Config(format!("duplicate record id {}", w[0])));
    }
    for r in records {
        if r.tokens.is_empty() {
            return Err(Error::Config(format!("record {} has no tokens", r.id)));
        }
        if let Some(&bad) = r.tokens.iter().find(|&&t| t as usize >= vocab_size) {
            return Err(Error::Config(format!(
                "record {} holds token {bad}, model vocabulary is {vocab_size}",
                r.id
            )));
        }
        if let Some(mask) = &r.pii_mask {
            if mask.iter().any(|&p| p >= r.tokens.len()) {
                return Err(Error::Config(format!(
                    "record {} masks a position past its end",
                    r.id
                )));
            }
        }
    }
    Ok(())
}
