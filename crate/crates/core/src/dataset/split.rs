//! Question-level train/val/test assignment.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Ratios(pub [f64; 3]);

impl Default for Ratios {
    fn default() -> Self {
        Ratios([0.7, 0.15, 0.15])
    }
}

impl std::str::FromStr for Ratios {
    type Err = SplitError;

    fn from_str(s: &str) -> Result<Self, SplitError> {
        let parts: Vec<f64> = s
            .split(',')
            .map(|p| p.trim().parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|_| SplitError::Ratios(s.to_string()))?;
        let arr: [f64; 3] = parts.try_into().map_err(|_| SplitError::Ratios(s.to_string()))?;
        let r = Ratios(arr);
        r.validate()?;
        Ok(r)
    }
}

impl Ratios {
    pub fn validate(&self) -> Result<(), SplitError> {
        let ok = self.0.iter().all(|r| r.is_finite() && *r >= 0.0) && (self.0.iter().sum::<f64>() - 1.0).abs() < 1e-9;
        if ok {
            Ok(())
        } else {
            Err(SplitError::Ratios(format!("{:?}", self.0)))
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SplitError {
    #[error("split ratios must be three non-negative numbers summing to 1, got {0}")]
    Ratios(String),
    #[error("need at least 3 questions to split, found {0}")]
    TooFewQuestions(usize),
}

/// Sizes for `n` items: each share is floored, then the leftover items go one
/// at a time to test, val, train (skipping zero ratios), repeating as needed.
pub fn partition_sizes(n: usize, ratios: &Ratios) -> [usize; 3] {
    let mut sizes = ratios.0.map(|r| ((n as f64) * r + 1e-9).floor() as usize);
    let mut left = n - sizes.iter().sum::<usize>();
    let order: Vec<usize> = [2, 1, 0].into_iter().filter(|&i| ratios.0[i] > 0.0).collect();
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        sizes[i] += 1;
        left -= 1;
    }
    sizes
}

/// Shuffles the distinct question ids with `seed` and cuts them by
/// [`partition_sizes`].
pub fn split_questions<'a>(
    question_ids: impl IntoIterator<Item = &'a str>,
    ratios: &Ratios,
    seed: u64,
) -> Result<BTreeMap<String, Split>, SplitError> {
    ratios.validate()?;
    let unique: BTreeSet<&str> = question_ids.into_iter().collect();
    if unique.len() < 3 {
        return Err(SplitError::TooFewQuestions(unique.len()));
    }
    let mut ids: Vec<&str> = unique.into_iter().collect();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let [train, val, _] = partition_sizes(ids.len(), ratios);
    Ok(ids
        .into_iter()
        .enumerate()
        .map(|(i, q)| {
            let s = if i < train {
                Split::Train
            } else if i < train + val {
                Split::Val
            } else {
                Split::Test
            };
            (q.to_string(), s)
        })
        .collect())
}
