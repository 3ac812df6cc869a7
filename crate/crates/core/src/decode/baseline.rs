//! Non-pretrained aggregation baselines on concatenated channel embeddings.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::finetune::{score, TrainControl};
use super::metrics::{roc_auc, steps_to_convergence};
use super::task::{EvalReport, TaskDataset};
use super::DecodeError;
use crate::engine::{Graph, Optimizer, OptimizerKind, ParamId, Params, Real, Rng, Tensor, Var};
use crate::pretrain::LrSchedule;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum BaselineKind {
    /// One affine map to a logit.
    Linear,
    /// `layers` GeLU layers of width `hidden`, then an affine output.
    DeepNn { hidden: usize, layers: usize },
}

impl BaselineKind {
    pub fn deep_nn() -> Self {
        BaselineKind::DeepNn { hidden: 512, layers: 5 }
    }

    /// Closed-form parameter count for `d_in` inputs.
    pub fn num_parameters(self, d_in: usize) -> usize {
        match self {
            BaselineKind::Linear => d_in + 1,
            BaselineKind::DeepNn { hidden: h, layers } => (d_in * h + h) + (layers - 1) * (h * h + h) + (h + 1),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaselineConfig {
    #[serde(flatten)]
    pub control: TrainControl,
}

impl BaselineConfig {
    /// AdamW at 1e-3, batch 256, 17,000 steps under the ramp-up schedule.
    pub fn full_scale() -> Self {
        BaselineConfig {
            control: TrainControl {
                steps: 17_000,
                batch_size: 256,
                lr: 1e-3,
                weight_decay: 0.01,
                schedule: LrSchedule::RampUp,
                eval_every: 500,
                patience: None,
                convergence_tolerance: 0.01,
                seed: 0,
            },
        }
    }

    /// Shorter run with early stopping.
    pub fn desk() -> Self {
        let mut c = Self::full_scale();
        c.control.steps = 2000;
        c.control.eval_every = 25;
        c.control.patience = Some(8);
        c
    }
}

/// A trained baseline and its fixed input width.
#[derive(Debug, Clone, PartialEq)]
pub struct BaselineModel<R> {
    pub kind: BaselineKind,
    pub d_in: usize,
    pub params: Params<R>,
    layers: Vec<(ParamId, ParamId)>,
}

impl<R: Real> BaselineModel<R> {
    pub fn new(kind: BaselineKind, d_in: usize, seed: u64) -> Result<Self, DecodeError> {
        let widths: Vec<usize> = match kind {
            BaselineKind::Linear => vec![d_in, 1],
            BaselineKind::DeepNn { hidden, layers } => {
                if hidden == 0 || layers == 0 {
                    return Err(DecodeError::InvalidConfig("deep baseline needs hidden layers".into()));
                }
                std::iter::once(d_in).chain(std::iter::repeat(hidden).take(layers)).chain([1]).collect()
            }
        };
        let mut rng = Rng::seed_from_u64(seed);
        let mut params = Params::new();
        let mut layers = Vec::new();
        for (i, pair) in widths.windows(2).enumerate() {
            let (a, b) = (pair[0], pair[1]);
            let std = (2.0 / (a + b) as f64).sqrt();
            let dist = Normal::new(0.0, std).expect("valid std");
            let w = Tensor::new(vec![a, b], (0..a * b).map(|_| R::from_f64(dist.sample(&mut rng))).collect());
            let w = params.add(format!("layer{i}.w"), w);
            let bias = params.add(format!("layer{i}.b"), Tensor::zeros(&[b]));
            layers.push((w, bias));
        }
        Ok(BaselineModel {
            kind,
            d_in,
            params,
            layers,
        })
    }

    fn logits(&self, g: &mut Graph<R>, x: Var) -> Var {
        let mut h = x;
        let last = self.layers.len() - 1;
        for (i, &(w, b)) in self.layers.iter().enumerate() {
            let (wv, bv) = (g.param(w, self.params.get(w)), g.param(b, self.params.get(b)));
            h = g.linear(h, wv, bv);
            if i < last {
                h = g.gelu(h);
            }
        }
        h
    }

    /// Probabilities for rows of `features`; the width must match `d_in`.
    pub fn predict(&self, features: &Tensor<R>) -> Result<Vec<f64>, DecodeError> {
        if features.cols() != self.d_in {
            return Err(DecodeError::VariableEnsemble {
                expected: self.d_in,
                found: features.cols(),
            });
        }
        let mut g = Graph::inference();
        let x = g.constant(features.clone());
        let z = self.logits(&mut g, x);
        Ok(g.value(z).data().iter().map(|&v| crate::engine::ops::sigmoid(v).to_f64()).collect())
    }
}

fn feature_matrix<R: Real>(task: &TaskDataset, windows: &[usize]) -> Tensor<R> {
    let d = task.channels.len() * task.store.d_emb();
    let data = windows.iter().flat_map(|&w| task.concat_features(w)).map(R::from_f64).collect();
    Tensor::matrix(windows.len(), d, data)
}

/// Trains a baseline of `kind` on the task's concatenated embeddings.
pub fn train_baseline<R: Real>(
    kind: BaselineKind,
    task: &TaskDataset,
    cfg: &BaselineConfig,
) -> Result<(BaselineModel<R>, EvalReport), DecodeError> {
    let c = &cfg.control;
    c.validate()?;
    task.validate()?;
    let train_x = feature_matrix::<R>(task, &task.train);
    let val_x = feature_matrix::<R>(task, &task.val);
    let d_in = train_x.cols();
    let mut model = BaselineModel::<R>::new(kind, d_in, c.seed)?;
    let hyper = crate::engine::Hyper {
        weight_decay: c.weight_decay,
        ..crate::engine::Hyper::adamw()
    };
    let mut opt = Optimizer::new(OptimizerKind::Adamw, hyper, &model.params);
    let mut rng = Rng::seed_from_u64(c.seed.wrapping_add(1));
    let train_y = task.labels_of(&task.train);
    let val_y = task.labels_of(&task.val);

    let mut best = (roc_auc(&model.predict(&val_x)?, &val_y)?, 0u64, model.clone());
    let mut log = vec![(0u64, best.0)];
    let mut stale = 0;
    let batch = c.batch_size.min(task.train.len());
    for step in 1..=c.steps {
        let idx = sample(&mut rng, task.train.len(), batch).into_vec();
        let rows: Vec<R> = idx.iter().flat_map(|&i| train_x.row(i).to_vec()).collect();
        let mut g = Graph::new();
        let x = g.constant(Tensor::matrix(batch, d_in, rows));
        let z = model.logits(&mut g, x);
        let targets = idx.iter().map(|&i| R::from_f64(train_y[i] as f64)).collect();
        let loss = g.bce_with_logits(z, targets, vec![R::from_f64(1.0 / batch as f64); batch]);
        let grads = g.backward(loss)?;
        opt.step(&mut model.params, &grads, c.lr_at(step))?;
        if step % c.eval_every == 0 || step == c.steps {
            let auc = roc_auc(&model.predict(&val_x)?, &val_y)?;
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
    let probs = model.predict(&feature_matrix::<R>(task, &task.test))?;
    let (auc, bacc) = score(&probs, &task.labels_of(&task.test))?;
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

pub fn linear_agg_baseline<R: Real>(task: &TaskDataset, cfg: &BaselineConfig) -> Result<(BaselineModel<R>, EvalReport), DecodeError> {
    train_baseline(BaselineKind::Linear, task, cfg)
}

pub fn deepnn_agg_baseline<R: Real>(task: &TaskDataset, cfg: &BaselineConfig) -> Result<(BaselineModel<R>, EvalReport), DecodeError> {
    train_baseline(BaselineKind::deep_nn(), task, cfg)
}

/// Channels ordered by the validation AUC of a single-channel linear
/// decoder, best first.
pub fn rank_channels<R: Real>(task: &TaskDataset, cfg: &BaselineConfig) -> Result<Vec<(usize, f64)>, DecodeError> {
    let mut ranked = Vec::with_capacity(task.channels.len());
    for &c in &task.channels {
        let single = task.with_channels(vec![c])?;
        let (_, report) = train_baseline::<R>(BaselineKind::Linear, &single, cfg)?;
        ranked.push((c, report.val_roc_auc));
    }
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    Ok(ranked)
}
