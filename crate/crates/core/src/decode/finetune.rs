//! Supervised fine-tuning and frozen probing of PopT on a task.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::metrics::{balanced_accuracy, roc_auc, steps_to_convergence};
use super::task::{EvalReport, TaskDataset};
use super::DecodeError;
use crate::encoding::TokenMatrix;
use crate::engine::{lr_at, Graph, Hyper, Optimizer, OptimizerKind, Real, Rng, ScheduleConfig, Tensor};
use crate::model::{ForwardOptions, PopT, PopTConfig};
use crate::pretrain::LrSchedule;

/// Step budget and early stopping shared by all downstream trainers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainControl {
    pub steps: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    #[serde(default)]
    pub schedule: LrSchedule,
    pub eval_every: u64,
    /// Stop after this many validation passes without improvement.
    #[serde(default)]
    pub patience: Option<u64>,
    /// Tolerance for [`steps_to_convergence`] on the validation AUC log.
    pub convergence_tolerance: f64,
    pub seed: u64,
}

impl TrainControl {
    pub fn validate(&self) -> Result<(), DecodeError> {
        if self.steps == 0 || self.batch_size == 0 || self.eval_every == 0 {
            return Err(DecodeError::InvalidConfig("steps, batch_size and eval_every must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || !(self.weight_decay >= 0.0) {
            return Err(DecodeError::InvalidConfig("bad learning rate or weight decay".into()));
        }
        Ok(())
    }

    pub fn lr_at(&self, step: u64) -> f64 {
        match self.schedule {
            LrSchedule::Constant => self.lr,
            LrSchedule::RampUp => lr_at(step, &ScheduleConfig::ramp_up(self.steps), self.lr),
        }
    }

    fn hyper(&self) -> Hyper {
        Hyper {
            weight_decay: self.weight_decay,
            ..Hyper::adamw()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinetuneConfig {
    #[serde(flatten)]
    pub control: TrainControl,
    /// Learning-rate multiplier of every non-head weight; 0 freezes them.
    pub transformer_lr_scale: f64,
}

impl FinetuneConfig {
    /// AdamW at 5e-4, transformer weights at a tenth of that, batch 128,
    /// 2,000 steps under the ramp-up schedule.
    pub fn full_scale() -> Self {
        FinetuneConfig {
            control: TrainControl {
                steps: 2000,
                batch_size: 128,
                lr: 5e-4,
                weight_decay: 0.01,
                schedule: LrSchedule::RampUp,
                eval_every: 100,
                patience: None,
                convergence_tolerance: 0.01,
                seed: 0,
            },
            transformer_lr_scale: 0.1,
        }
    }

    /// Shorter run with early stopping.
    pub fn desk() -> Self {
        let mut c = Self::full_scale();
        c.control.steps = 600;
        c.control.batch_size = 64;
        c.control.eval_every = 25;
        c.control.patience = Some(8);
        c
    }
}

/// Starting weights for fine-tuning.
#[derive(Debug, Clone, Copy)]
pub enum Init<'a, R> {
    Pretrained(&'a PopT<R>),
    /// Random weights from this config (the non-pretrained model).
    Fresh(&'a PopTConfig),
}

fn batched_tokens<R: Real>(model: &PopT<R>, task: &TaskDataset, windows: &[usize]) -> Result<Vec<TokenMatrix<R>>, DecodeError> {
    windows
        .iter()
        .map(|&w| model.tokens(task.store, task.layout, &task.token_specs(w)).map_err(DecodeError::from))
        .collect()
}

/// Eval-mode task-head probabilities for `windows`.
pub fn predict_windows<R: Real>(model: &PopT<R>, task: &TaskDataset, windows: &[usize]) -> Result<Vec<f64>, DecodeError> {
    let mut out = Vec::with_capacity(windows.len());
    for chunk in windows.chunks(256) {
        let batch = batched_tokens(model, task, chunk)?;
        out.extend(model.predict(&batch, model.task_head)?.0);
    }
    Ok(out)
}

/// Eval-mode CLS outputs for `windows`, `[len, d]`.
pub fn cls_features<R: Real>(model: &PopT<R>, task: &TaskDataset, windows: &[usize]) -> Result<Tensor<R>, DecodeError> {
    let d = model.config.d;
    let mut data = Vec::with_capacity(windows.len() * d);
    let mut rng = Rng::seed_from_u64(0);
    for chunk in windows.chunks(256) {
        let batch = batched_tokens(model, task, chunk)?;
        let mut g = Graph::inference();
        let enc = model.encode(&mut g, &batch, ForwardOptions::eval(), &mut rng)?;
        let h = g.value(enc.hidden);
        for &r in &enc.cls_rows {
            data.extend_from_slice(h.row(r));
        }
    }
    Ok(Tensor::matrix(windows.len(), d, data))
}

/// Metrics of probabilities against labels, thresholding at 0.5.
pub fn score(probs: &[f64], labels: &[u8]) -> Result<(f64, f64), DecodeError> {
    let preds: Vec<u8> = probs.iter().map(|&p| u8::from(p >= 0.5)).collect();
    Ok((roc_auc(probs, labels)?, balanced_accuracy(&preds, labels)?))
}

/// Trains the task head on CLS (and, unless frozen, the encoder) with
/// AdamW; the weights with the best validation AUC are evaluated on test.
///
/// With `transformer_lr_scale == 0` the encoder is frozen: CLS outputs are
/// computed once in eval mode and only the head is trained on them.
pub fn finetune<R: Real>(init: Init<R>, task: &TaskDataset, cfg: &FinetuneConfig) -> Result<(PopT<R>, EvalReport), DecodeError> {
    let c = &cfg.control;
    c.validate()?;
    task.validate()?;
    if !(cfg.transformer_lr_scale >= 0.0) {
        return Err(DecodeError::InvalidConfig("transformer_lr_scale must be non-negative".into()));
    }
    let mut model = match init {
        Init::Pretrained(m) => m.clone(),
        Init::Fresh(config) => PopT::new(config.clone(), c.seed)?,
    };
    if model.config.d_emb != task.store.d_emb() {
        return Err(DecodeError::InvalidTask("model and store embedding widths differ".into()));
    }
    let mut rng = Rng::seed_from_u64(c.seed);
    let head = model.task_head;
    let dist = Normal::new(0.0, 0.02).expect("valid std");
    for x in model.params.get_mut(head.w).data_mut() {
        *x = R::from_f64(dist.sample(&mut rng));
    }
    model.params.get_mut(head.b).data_mut().fill(R::ZERO);

    let frozen = cfg.transformer_lr_scale == 0.0;
    let lr_scale: Vec<f64> = model
        .params
        .iter()
        .map(|(_, name, _)| {
            if name.starts_with("head.task.") {
                1.0
            } else if name.starts_with("head.") {
                0.0
            } else {
                cfg.transformer_lr_scale
            }
        })
        .collect();
    let mut opt = Optimizer::new(OptimizerKind::Adamw, c.hyper(), &model.params);
    opt.lr_scale = lr_scale;

    let features = if frozen {
        Some((cls_features(&model, task, &task.train)?, cls_features(&model, task, &task.val)?))
    } else {
        None
    };
    let train_labels = task.labels_of(&task.train);
    let val_labels = task.labels_of(&task.val);
    let head_val = |model: &PopT<R>| -> Result<Vec<f64>, DecodeError> {
        match &features {
            Some((_, fv)) => Ok(head_probs(model, fv)),
            None => predict_windows(model, task, &task.val),
        }
    };

    let mut best = (roc_auc(&head_val(&model)?, &val_labels)?, 0u64, model.clone());
    let mut log = vec![(0u64, best.0)];
    let mut stale = 0u64;
    let batch = c.batch_size.min(task.train.len());
    for step in 1..=c.steps {
        let idx = sample(&mut rng, task.train.len(), batch).into_vec();
        let targets: Vec<R> = idx.iter().map(|&i| R::from_f64(train_labels[i] as f64)).collect();
        let weights = vec![R::from_f64(1.0 / batch as f64); batch];
        let mut g = Graph::new();
        let logits = match &features {
            Some((ft, _)) => {
                let rows: Vec<R> = idx.iter().flat_map(|&i| ft.row(i).to_vec()).collect();
                let x = g.constant(Tensor::matrix(batch, model.config.d, rows));
                let w = g.param(head.w, model.params.get(head.w));
                let b = g.param(head.b, model.params.get(head.b));
                g.linear(x, w, b)
            }
            None => {
                let windows: Vec<usize> = idx.iter().map(|&i| task.train[i]).collect();
                let tokens = batched_tokens(&model, task, &windows)?;
                let enc = model.encode(&mut g, &tokens, ForwardOptions::train(), &mut rng)?;
                model.cls_logits(&mut g, &enc, head)
            }
        };
        let loss = g.bce_with_logits(logits, targets, weights);
        let grads = g.backward(loss)?;
        opt.step(&mut model.params, &grads, c.lr_at(step))?;

        if step % c.eval_every == 0 || step == c.steps {
            let auc = roc_auc(&head_val(&model)?, &val_labels)?;
            log.push((step, auc));
            if auc > best.0 {
                best = (auc, step, model.clone());
                stale = 0;
            } else {
                stale += 1;
                if c.patience.is_some_and(|p| stale >= p) {
                    break;
                }
            }
        }
    }
    let (val_auc, best_step, model) = best;
    let test_probs = match &features {
        Some(_) => head_probs(&model, &cls_features(&model, task, &task.test)?),
        None => predict_windows(&model, task, &task.test)?,
    };
    let (auc, bacc) = score(&test_probs, &task.labels_of(&task.test))?;
    let report = EvalReport {
        roc_auc: auc,
        balanced_accuracy: bacc,
        val_roc_auc: val_auc,
        n_train: task.train.len(),
        n_val: task.val.len(),
        n_test: task.test.len(),
        best_step,
        steps_to_convergence: steps_to_convergence(&log, c.convergence_tolerance),
        seed: c.seed,
    };
    Ok((model, report))
}

fn head_probs<R: Real>(model: &PopT<R>, features: &Tensor<R>) -> Vec<f64> {
    let (w, b) = model.head(model.task_head);
    (0..features.rows())
        .map(|r| crate::engine::ops::sigmoid(crate::model::cls_logit(features.row(r), w, b)).to_f64())
        .collect()
}

/// Fine-tuning with the encoder frozen: only the task head learns.
pub fn frozen_probe<R: Real>(init: Init<R>, task: &TaskDataset, cfg: &FinetuneConfig) -> Result<(PopT<R>, EvalReport), DecodeError> {
    let cfg = FinetuneConfig {
        transformer_lr_scale: 0.0,
        ..cfg.clone()
    };
    finetune(init, task, &cfg)
}
