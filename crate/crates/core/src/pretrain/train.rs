//! The pretraining loop.

use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use super::loss::{pretrain_objective, LossFlags, PretrainLossReport};
use super::sampling::{apply_channel_swaps, blur_coordinates, randomize_labels, sample_ensemble_pair, PretrainExample, SizeRange, SwapMode};
use super::PretrainError;
use crate::data::{ElectrodeLayout, EmbeddingStore, Splits};
use crate::encoding::PositionMode;
use crate::engine::{lr_at, EngineError, Graph, Hyper, Optimizer, OptimizerKind, Real, Rng, ScheduleConfig};
use crate::model::{Checkpoint, ForwardOptions, ModelError, PopT, PopTConfig, RngState};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LrSchedule {
    #[default]
    Constant,
    /// Linear warmup then step decay, see [`ScheduleConfig::ramp_up`].
    RampUp,
}

/// Named ablations; each edits a [`PretrainConfig`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Ablation {
    NoChannelLoss,
    NoEnsembleLoss,
    NoPosition,
    ReconstructionOnly,
    GaussianBlur,
    SelfRandomize,
}

impl Ablation {
    pub fn apply(self, cfg: &mut PretrainConfig) {
        match self {
            Ablation::NoChannelLoss => cfg.losses.channel = false,
            Ablation::NoEnsembleLoss => cfg.losses.ensemble = false,
            Ablation::NoPosition => cfg.model.position = PositionMode::NoSpatial,
            Ablation::ReconstructionOnly => cfg.losses.reconstruction_only = true,
            Ablation::GaussianBlur => cfg.blur_sigma = 5.0,
            Ablation::SelfRandomize => cfg.swap_mode = SwapMode::SelfRandomize,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainConfig {
    pub model: PopTConfig,
    pub steps: u64,
    pub batch_size: usize,
    pub lr: f64,
    #[serde(default)]
    pub schedule: LrSchedule,
    pub eval_every: u64,
    pub val_examples: usize,
    pub sizes: SizeRange,
    pub swap_rate: f64,
    #[serde(default)]
    pub swap_mode: SwapMode,
    #[serde(default)]
    pub losses: LossFlags,
    /// Standard deviation of coordinate blur in mm; 0 disables it.
    #[serde(default)]
    pub blur_sigma: f64,
    /// Diagnostic: train on coin-flip labels.
    #[serde(default)]
    pub shuffle_labels: bool,
    pub seed: u64,
}

impl PretrainConfig {
    /// Desk profile: width 64, 2 layers, batch 64, 5,000 steps, validation
    /// every 100 steps.
    pub fn desk(d_emb: usize, num_channels: usize) -> Self {
        PretrainConfig {
            model: PopTConfig::desk(d_emb),
            steps: 5000,
            batch_size: 64,
            lr: 5e-4,
            schedule: LrSchedule::Constant,
            eval_every: 100,
            val_examples: 256,
            sizes: SizeRange {
                min: 1,
                max: (num_channels / 2).max(1),
            },
            swap_rate: 0.1,
            swap_mode: SwapMode::OtherChannel,
            losses: LossFlags::default(),
            blur_sigma: 0.0,
            shuffle_labels: false,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<(), PretrainError> {
        self.model.validate()?;
        let bad = |m: &str| Err(PretrainError::InvalidConfig(m.to_string()));
        if self.steps == 0 || self.batch_size == 0 || self.eval_every == 0 || self.val_examples == 0 {
            return bad("steps, batch_size, eval_every and val_examples must be positive");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("learning rate must be positive");
        }
        if !(self.blur_sigma >= 0.0 && self.blur_sigma.is_finite()) {
            return bad("blur_sigma must be a non-negative number");
        }
        if self.losses.reconstruction_only && self.swap_rate == 0.0 {
            return bad("reconstruction needs swapped tokens");
        }
        Ok(())
    }

    fn lr_at(&self, step: u64) -> f64 {
        match self.schedule {
            LrSchedule::Constant => self.lr,
            LrSchedule::RampUp => lr_at(step, &ScheduleConfig::ramp_up(self.steps), self.lr),
        }
    }
}

/// One subject's data for pretraining.
#[derive(Debug, Clone, Copy)]
pub struct PretrainData<'a> {
    pub store: &'a EmbeddingStore,
    pub layout: &'a ElectrodeLayout,
    pub splits: &'a Splits,
}

/// One row per validation pass. Train columns average the steps since the
/// previous row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: u64,
    pub l_n: f64,
    pub l_c: f64,
    pub l: f64,
    pub lr: f64,
    pub val_l: f64,
    pub val_acc_cls: f64,
    pub val_acc_tok: f64,
    pub val_l_n: f64,
    pub val_l_c: f64,
}

pub fn write_log_csv(path: &Path, rows: &[LogRow]) -> std::io::Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "step,l_n,l_c,l,lr,val_l,val_acc_cls,val_acc_tok,val_l_n,val_l_c")?;
    for r in rows {
        writeln!(
            f,
            "{},{},{},{},{},{},{},{},{},{}",
            r.step, r.l_n, r.l_c, r.l, r.lr, r.val_l, r.val_acc_cls, r.val_acc_tok, r.val_l_n, r.val_l_c
        )?;
    }
    f.flush()
}

#[derive(Debug, Clone)]
pub struct PretrainOutcome<R> {
    /// Weights at the best validation `L`.
    pub checkpoint: Checkpoint<R>,
    pub log: Vec<LogRow>,
    pub best_step: u64,
    pub best_val: PretrainLossReport,
}

/// Samples one example from `windows`, applying swaps and the configured
/// label and coordinate transforms.
pub fn sample_example(
    cfg: &PretrainConfig,
    store: &EmbeddingStore,
    windows: std::ops::Range<usize>,
    train: bool,
    rng: &mut Rng,
) -> Result<PretrainExample, PretrainError> {
    let ex = sample_ensemble_pair(store, windows.clone(), cfg.sizes, rng)?;
    let mut ex = apply_channel_swaps(&ex, store, windows, cfg.swap_rate, cfg.swap_mode, rng)?;
    if train && cfg.blur_sigma > 0.0 {
        blur_coordinates(&mut ex, cfg.blur_sigma, rng);
    }
    if cfg.shuffle_labels {
        randomize_labels(&mut ex, rng);
    }
    Ok(ex)
}

/// Fixed validation examples drawn from the validation split.
pub fn validation_examples(cfg: &PretrainConfig, data: PretrainData) -> Result<Vec<PretrainExample>, PretrainError> {
    let mut rng = Rng::seed_from_u64(cfg.seed ^ 0x5eed_0000_7a1d);
    (0..cfg.val_examples)
        .map(|_| sample_example(cfg, data.store, data.splits.val.clone(), false, &mut rng))
        .collect()
}

/// Eval-mode losses over `examples`, processed in chunks of `batch`.
pub fn evaluate<R: Real>(
    model: &PopT<R>,
    data: PretrainData,
    examples: &[PretrainExample],
    flags: LossFlags,
    batch: usize,
) -> Result<PretrainLossReport, PretrainError> {
    let mut rng = Rng::seed_from_u64(0);
    let mut total = PretrainLossReport::default();
    for chunk in examples.chunks(batch.max(1)) {
        let mut g = Graph::inference();
        let out = pretrain_objective(model, &mut g, data.store, data.layout, chunk, flags, ForwardOptions::eval(), &mut rng)?;
        let w = chunk.len() as f64 / examples.len() as f64;
        total.l_n += out.report.l_n * w;
        total.l_c += out.report.l_c * w;
        total.l += out.report.l * w;
        total.acc_cls += out.report.acc_cls * w;
        total.acc_tok += out.report.acc_tok * w;
    }
    Ok(total)
}

/// LAMB training with validation-based checkpoint selection.
pub fn run_pretraining<R: Real>(cfg: &PretrainConfig, data: PretrainData) -> Result<PretrainOutcome<R>, PretrainError> {
    cfg.validate()?;
    if data.store.d_emb() != cfg.model.d_emb {
        return Err(PretrainError::InvalidConfig(format!(
            "store d_emb {} differs from model d_emb {}",
            data.store.d_emb(),
            cfg.model.d_emb
        )));
    }
    let mut model = PopT::<R>::new(cfg.model.clone(), cfg.seed)?;
    let mut opt = Optimizer::new(OptimizerKind::Lamb, Hyper::lamb(), &model.params);
    let mut rng = Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let val = validation_examples(cfg, data)?;

    let mut best: Option<(PretrainLossReport, Checkpoint<R>)> = None;
    let mut log = Vec::new();
    let mut acc = PretrainLossReport::default();
    let mut since = 0u64;
    let mut last_good = Checkpoint::new(model.clone());
    for step in 1..=cfg.steps {
        let batch = (0..cfg.batch_size)
            .map(|_| sample_example(cfg, data.store, data.splits.train.clone(), true, &mut rng))
            .collect::<Result<Vec<_>, _>>()?;
        let mut g = Graph::new();
        let out = match pretrain_objective(&model, &mut g, data.store, data.layout, &batch, cfg.losses, ForwardOptions::train(), &mut rng) {
            Err(PretrainError::Model(ModelError::NonFinite(what))) => {
                return Err(diverged(step, what, last_good));
            }
            other => other?,
        };
        if !out.report.l.is_finite() {
            return Err(diverged(step, "loss".into(), last_good));
        }
        let grads = match g.backward(out.loss) {
            Ok(gr) => gr,
            Err(EngineError::NonFiniteGradient { op, .. }) => return Err(diverged(step, format!("gradient of {op}"), last_good)),
            Err(e) => return Err(e.into()),
        };
        let lr = cfg.lr_at(step);
        if let Err(e) = opt.step(&mut model.params, &grads, lr) {
            return Err(diverged(step, e.to_string(), last_good));
        }
        for (a, b) in [
            (&mut acc.l_n, out.report.l_n),
            (&mut acc.l_c, out.report.l_c),
            (&mut acc.l, out.report.l),
            (&mut acc.acc_cls, out.report.acc_cls),
            (&mut acc.acc_tok, out.report.acc_tok),
        ] {
            *a += b;
        }
        since += 1;

        if step % cfg.eval_every == 0 || step == cfg.steps {
            let v = match evaluate(&model, data, &val, cfg.losses, cfg.batch_size) {
                Err(PretrainError::Model(ModelError::NonFinite(what))) => {
                    return Err(diverged(step, format!("validation: {what}"), last_good));
                }
                other => other?,
            };
            if !v.l.is_finite() {
                return Err(diverged(step, "validation loss".into(), last_good));
            }
            let k = since as f64;
            log.push(LogRow {
                step,
                l_n: acc.l_n / k,
                l_c: acc.l_c / k,
                l: acc.l / k,
                lr,
                val_l: v.l,
                val_acc_cls: v.acc_cls,
                val_acc_tok: v.acc_tok,
                val_l_n: v.l_n,
                val_l_c: v.l_c,
            });
            log::debug!("step {step}: train L {:.4}, val L {:.4}", acc.l / k, v.l);
            acc = PretrainLossReport::default();
            since = 0;
            let snapshot = Checkpoint {
                model: model.clone(),
                optimizer: Some(opt.state.clone()),
                rng: Some(RngState::capture(&rng)),
                step,
            };
            if best.as_ref().is_none_or(|(b, _)| v.l < b.l) {
                best = Some((v, snapshot.clone()));
            }
            last_good = snapshot;
        }
    }
    let (best_val, checkpoint) = best.expect("at least one validation pass");
    Ok(PretrainOutcome {
        best_step: checkpoint.step,
        checkpoint,
        log,
        best_val,
    })
}

fn diverged<R: Real>(step: u64, what: String, last_good: Checkpoint<R>) -> PretrainError {
    PretrainError::Diverged {
        step,
        what,
        last_good: Box::new(last_good.cast()),
    }
}

impl<R: Real> Checkpoint<R> {
    /// Same checkpoint with values converted to `f64`.
    pub fn cast(&self) -> Checkpoint<f64> {
        Checkpoint {
            model: PopT::from_params(self.model.config.clone(), self.model.params.cast()).expect("same layout"),
            optimizer: self.optimizer.as_ref().map(|s| crate::engine::OptimizerState {
                m: s.m.iter().map(|t| t.cast()).collect(),
                v: s.v.iter().map(|t| t.cast()).collect(),
                t: s.t,
            }),
            rng: self.rng.clone(),
            step: self.step,
        }
    }
}

