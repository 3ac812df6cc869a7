use std::ops::Range;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use super::DataError;
use crate::engine::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// Contiguous window ranges for each split.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Range<usize>,
    pub val: Range<usize>,
    pub test: Range<usize>,
}

impl Splits {
    pub fn range(&self, split: Split) -> Range<usize> {
        match split {
            Split::Train => self.train.clone(),
            Split::Val => self.val.clone(),
            Split::Test => self.test.clone(),
        }
    }

    pub fn assignment(&self, window: usize) -> Option<Split> {
        [Split::Train, Split::Val, Split::Test]
            .into_iter()
            .find(|&s| self.range(s).contains(&window))
    }

    pub fn total(&self) -> usize {
        self.train.len() + self.val.len() + self.test.len()
    }
}

/// Cuts `0..n_windows` into three contiguous blocks.
///
/// Validation and test sizes are `round(fraction * n)`; train takes the rest.
/// The seed only decides the order in which the three blocks are laid out
/// along the time axis.
pub fn split_windows(n_windows: usize, fractions: [f64; 3], seed: u64) -> Result<Splits, DataError> {
    if fractions.iter().any(|f| !(0.0..=1.0).contains(f)) {
        return Err(DataError::InvalidFractions(format!("{fractions:?} has entries outside [0, 1]")));
    }
    let total: f64 = fractions.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(DataError::InvalidFractions(format!("{fractions:?} sums to {total}")));
    }
    let val = (fractions[1] * n_windows as f64).round() as usize;
    let test = (fractions[2] * n_windows as f64).round() as usize;
    if val + test > n_windows {
        return Err(DataError::InvalidFractions("val and test exceed window count".into()));
    }
    let sizes = [n_windows - val - test, val, test];
    let mut order = [0usize, 1, 2];
    order.shuffle(&mut Rng::seed_from_u64(seed));
    let mut ranges = [0..0, 0..0, 0..0];
    let mut start = 0;
    for &which in &order {
        ranges[which] = start..start + sizes[which];
        start += sizes[which];
    }
    let [train, val, test] = ranges;
    Ok(Splits { train, val, test })
}
