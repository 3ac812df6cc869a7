//! Loading the configured subject, from a synthetic spec or a manifest.

use std::path::Path;

use anyhow::Context as _;
use popt::data::{
    generate_synthetic, read_labels, read_store, split_windows, DatasetManifest, ElectrodeLayout, EmbeddingStore, Splits,
};
use popt::decode::TaskDataset;

use crate::config::RunConfig;
use crate::CliError;

pub struct Subject {
    pub store: EmbeddingStore,
    pub layout: ElectrodeLayout,
    /// One label per window; windows without a label are dropped from tasks.
    pub labels: Vec<u8>,
    pub labelled: Option<Vec<bool>>,
    pub pretrain_splits: Splits,
    pub task_splits: Splits,
    /// Planted coupling and block membership of synthetic subjects.
    pub truth: Option<(Vec<Vec<f64>>, Vec<usize>)>,
}

fn require(path: &Path) -> anyhow::Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::MissingFile(path.to_path_buf()).into())
    }
}

pub fn load(cfg: &RunConfig) -> anyhow::Result<Subject> {
    let d = &cfg.data;
    if let Some(spec) = &d.synthetic {
        let sc = spec.to_config()?;
        let ds = generate_synthetic(&sc).map_err(|e| CliError::Schema(e.to_string()))?;
        let n = ds.store.n_windows();
        let coupling = (0..ds.layout.len()).map(|i| ds.coupling.row(i).to_vec()).collect();
        return Ok(Subject {
            pretrain_splits: split_windows(n, d.pretrain_split, d.split_seed).map_err(schema)?,
            task_splits: split_windows(n, d.task_split, d.split_seed).map_err(schema)?,
            store: ds.store,
            layout: ds.layout,
            labels: ds.labels,
            labelled: None,
            truth: Some((coupling, ds.block_of)),
        });
    }
    let path = d.manifest.as_deref().expect("checked by RunConfig::check");
    require(path)?;
    let m = DatasetManifest::read(path)?;
    require(&m.store)?;
    require(&m.layout)?;
    let store = read_store(&m.store)?;
    let subject = m.layout.file_stem().and_then(|s| s.to_str()).unwrap_or("subject").to_string();
    let layout = ElectrodeLayout::read_csv(&m.layout, subject)?;
    if store.n_windows() != m.n_windows || store.n_channels() != layout.len() {
        return Err(CliError::Schema(format!("manifest {} does not match its store and layout", path.display())).into());
    }
    let n = store.n_windows();
    let (labels, labelled) = match &m.labels {
        Some(p) => {
            require(p)?;
            let table = read_labels(p, n)?;
            let mut labels = vec![0u8; n];
            let mut has = vec![false; n];
            for (&w, &l) in &table {
                labels[w] = l;
                has[w] = true;
            }
            (labels, Some(has))
        }
        None => (vec![0; n], Some(vec![false; n])),
    };
    let task_splits = match &m.splits {
        Some(s) => s.clone(),
        None => split_windows(n, d.task_split, d.split_seed).map_err(schema)?,
    };
    Ok(Subject {
        pretrain_splits: split_windows(n, d.pretrain_split, d.split_seed).map_err(schema)?,
        task_splits,
        store,
        layout,
        labels,
        labelled,
        truth: None,
    })
}

fn schema(e: impl std::fmt::Display) -> CliError {
    CliError::Schema(e.to_string())
}

impl Subject {
    /// The configured downstream task, before any training-set subsampling
    /// that depends on the seed.
    pub fn task(&self, cfg: &RunConfig) -> anyhow::Result<TaskDataset<'_>> {
        let channels = cfg.task.channels.clone().unwrap_or_else(|| (0..self.layout.len()).collect());
        if let Some(&bad) = channels.iter().find(|&&c| c >= self.layout.len()) {
            return Err(CliError::Schema(format!("task channel {bad} outside {} channels", self.layout.len())).into());
        }
        let splits = &self.task_splits;
        let mut task = TaskDataset {
            store: &self.store,
            layout: &self.layout,
            labels: &self.labels,
            channels,
            train: splits.train.clone().collect(),
            val: splits.val.clone().collect(),
            test: splits.test.clone().collect(),
        };
        if let Some(has) = &self.labelled {
            for part in [&mut task.train, &mut task.val, &mut task.test] {
                part.retain(|&w| has[w]);
            }
        }
        task.validate().context("building the task")?;
        Ok(task)
    }

    /// `task` with the configured labelled-training subsample for `seed`.
    pub fn task_for_seed(&self, cfg: &RunConfig, seed: u64) -> anyhow::Result<TaskDataset<'_>> {
        let task = self.task(cfg)?;
        let fraction = match (cfg.task.train_size, cfg.task.train_fraction) {
            (Some(n), _) => (n as f64 / task.train.len() as f64).min(1.0),
            (None, Some(f)) => f,
            (None, None) => return Ok(task),
        };
        Ok(task.with_train_fraction(fraction, seed)?)
    }
}
