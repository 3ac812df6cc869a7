//! Metric curves over ensemble size and labelled-data fraction.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::baseline::{train_baseline, BaselineConfig, BaselineKind};
use super::finetune::{finetune, FinetuneConfig, Init};
use super::task::{EvalReport, TaskDataset};
use super::DecodeError;
use crate::engine::Real;
use crate::model::{PopT, PopTConfig};

/// A decoder that can be trained from scratch for any seed.
#[derive(Debug, Clone)]
pub enum Decoder<'a, R> {
    PopT {
        /// Pretrained weights; `None` trains from random weights.
        pretrained: Option<&'a PopT<R>>,
        fresh: PopTConfig,
        config: FinetuneConfig,
    },
    Baseline { kind: BaselineKind, config: BaselineConfig },
}

impl<R: Real> Decoder<'_, R> {
    pub fn run(&self, task: &TaskDataset, seed: u64) -> Result<EvalReport, DecodeError> {
        match self {
            Decoder::PopT {
                pretrained,
                fresh,
                config,
            } => {
                let mut cfg = config.clone();
                cfg.control.seed = seed;
                let init = match pretrained {
                    Some(m) => Init::Pretrained(m),
                    None => Init::Fresh(fresh),
                };
                Ok(finetune(init, task, &cfg)?.1)
            }
            Decoder::Baseline { kind, config } => {
                let mut cfg = config.clone();
                cfg.control.seed = seed;
                Ok(train_baseline::<R>(*kind, task, &cfg)?.1)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub x: f64,
    pub seed: u64,
    pub report: EvalReport,
}

/// One run per `(size, seed)` on the nested prefixes `ranked[..size]`.
pub fn channel_scaling_sweep<R: Real>(
    decoder: &Decoder<R>,
    task: &TaskDataset,
    ranked: &[usize],
    sizes: &[usize],
    seeds: &[u64],
) -> Result<Vec<CurveRow>, DecodeError> {
    let mut rows = Vec::with_capacity(sizes.len() * seeds.len());
    for &size in sizes {
        if size == 0 || size > ranked.len() {
            return Err(DecodeError::InvalidConfig(format!("ensemble size {size} outside 1..={}", ranked.len())));
        }
        let sub = task.with_channels(ranked[..size].to_vec())?;
        for &seed in seeds {
            rows.push(CurveRow {
                x: size as f64,
                seed,
                report: decoder.run(&sub, seed)?,
            });
        }
    }
    Ok(rows)
}

/// One run per `(fraction, seed)` on a seeded subsample of the training set.
pub fn sample_efficiency_sweep<R: Real>(
    decoder: &Decoder<R>,
    task: &TaskDataset,
    fractions: &[f64],
    seeds: &[u64],
) -> Result<Vec<CurveRow>, DecodeError> {
    let mut rows = Vec::with_capacity(fractions.len() * seeds.len());
    for &f in fractions {
        for &seed in seeds {
            let sub = task.with_train_fraction(f, seed)?;
            rows.push(CurveRow {
                x: f,
                seed,
                report: decoder.run(&sub, seed)?,
            });
        }
    }
    Ok(rows)
}

pub fn write_curve_csv(path: &Path, x_name: &str, rows: &[CurveRow]) -> std::io::Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "{x_name},{}", EvalReport::CSV_HEADER)?;
    for r in rows {
        writeln!(f, "{},{}", r.x, r.report.csv_row())?;
    }
    f.flush()
}
