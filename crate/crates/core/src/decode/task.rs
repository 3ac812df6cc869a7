//! Labelled downstream tasks over a fixed channel ensemble.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use super::DecodeError;
use crate::data::{ElectrodeLayout, EmbeddingStore, Splits};
use crate::encoding::TokenSpec;
use crate::engine::Rng;

/// Binary labels per window, the ensemble to decode from and the window
/// indices of each split.
#[derive(Debug, Clone)]
pub struct TaskDataset<'a> {
    pub store: &'a EmbeddingStore,
    pub layout: &'a ElectrodeLayout,
    pub labels: &'a [u8],
    /// Ordered channel ensemble.
    pub channels: Vec<usize>,
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl<'a> TaskDataset<'a> {
    pub fn new(
        store: &'a EmbeddingStore,
        layout: &'a ElectrodeLayout,
        labels: &'a [u8],
        channels: Vec<usize>,
        splits: &Splits,
    ) -> Result<Self, DecodeError> {
        if labels.len() != store.n_windows() {
            return Err(DecodeError::InvalidTask(format!(
                "{} labels for {} windows",
                labels.len(),
                store.n_windows()
            )));
        }
        if splits.total() != store.n_windows() {
            return Err(DecodeError::InvalidTask("splits do not cover the store".into()));
        }
        let task = TaskDataset {
            store,
            layout,
            labels,
            channels,
            train: splits.train.clone().collect(),
            val: splits.val.clone().collect(),
            test: splits.test.clone().collect(),
        };
        task.validate()?;
        Ok(task)
    }

    pub fn validate(&self) -> Result<(), DecodeError> {
        if self.channels.is_empty() {
            return Err(DecodeError::InvalidTask("empty channel ensemble".into()));
        }
        let n = self.store.n_channels();
        if let Some(&c) = self.channels.iter().find(|&&c| c >= n) {
            return Err(DecodeError::InvalidTask(format!("channel {c} out of range")));
        }
        let mut seen = vec![false; n];
        for &c in &self.channels {
            if std::mem::replace(&mut seen[c], true) {
                return Err(DecodeError::InvalidTask(format!("channel {c} repeated")));
            }
        }
        if self.labels.iter().any(|&y| y > 1) {
            return Err(DecodeError::NonBinaryLabels);
        }
        for (name, part) in [("train", &self.train), ("val", &self.val), ("test", &self.test)] {
            let pos = part.iter().filter(|&&w| self.labels[w] == 1).count();
            if pos == 0 || pos == part.len() {
                return Err(DecodeError::EmptyClass(name));
            }
        }
        Ok(())
    }

    /// Same task restricted to `channels`.
    pub fn with_channels(&self, channels: Vec<usize>) -> Result<Self, DecodeError> {
        let t = TaskDataset { channels, ..self.clone() };
        t.validate()?;
        Ok(t)
    }

    /// Keeps the first `n` training windows in time order.
    pub fn with_train_limit(&self, n: usize) -> Result<Self, DecodeError> {
        let t = TaskDataset {
            train: self.train[..n.min(self.train.len())].to_vec(),
            ..self.clone()
        };
        t.validate()?;
        Ok(t)
    }

    /// Keeps a seeded random `fraction` of the training windows.
    pub fn with_train_fraction(&self, fraction: f64, seed: u64) -> Result<Self, DecodeError> {
        if !(fraction > 0.0 && fraction <= 1.0) {
            return Err(DecodeError::InvalidTask(format!("train fraction {fraction} outside (0, 1]")));
        }
        let keep = ((self.train.len() as f64 * fraction).round() as usize).max(1);
        let mut train = self.train.clone();
        train.shuffle(&mut Rng::seed_from_u64(seed));
        train.truncate(keep);
        train.sort_unstable();
        let t = TaskDataset { train, ..self.clone() };
        t.validate()?;
        Ok(t)
    }

    /// Model input rows for `window`: every ensemble channel, membership 0.
    pub fn token_specs(&self, window: usize) -> Vec<TokenSpec> {
        let t = self.store.time_ms(window);
        self.channels.iter().map(|&c| TokenSpec::new(c, t, 0)).collect()
    }

    /// Concatenated channel embeddings of `window`, `d_emb * |S|` wide.
    pub fn concat_features(&self, window: usize) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.channels.len() * self.store.d_emb());
        for &c in &self.channels {
            out.extend(self.store.embedding(c, window).iter().map(|&x| x as f64));
        }
        out
    }

    pub fn labels_of(&self, windows: &[usize]) -> Vec<u8> {
        windows.iter().map(|&w| self.labels[w]).collect()
    }
}

/// Test-set metrics of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub roc_auc: f64,
    pub balanced_accuracy: f64,
    pub val_roc_auc: f64,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    /// Step at which the selected (best validation) weights were taken.
    pub best_step: u64,
    pub steps_to_convergence: u64,
    pub seed: u64,
}

impl EvalReport {
    pub const CSV_HEADER: &'static str =
        "roc_auc,balanced_accuracy,val_roc_auc,n_train,n_val,n_test,best_step,steps_to_convergence,seed";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.roc_auc,
            self.balanced_accuracy,
            self.val_roc_auc,
            self.n_train,
            self.n_val,
            self.n_test,
            self.best_step,
            self.steps_to_convergence,
            self.seed
        )
    }
}
