//! TOML run configuration. Every section is optional except `[data]`;
//! missing fields take the desk defaults below. Unknown keys are errors.

use std::path::PathBuf;

use popt::data::{LabelRule, SyntheticConfig, Threshold};
use popt::decode::{BaselineConfig, BaselineKind, FinetuneConfig, TrainControl};
use popt::encoding::PositionMode;
use popt::model::PopTConfig;
use popt::pretrain::{Ablation, LrSchedule, PretrainConfig, SizeRange};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    pub data: DataSection,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub pretrain: PretrainSection,
    #[serde(default)]
    pub finetune: FinetuneSection,
    #[serde(default)]
    pub baseline: BaselineSection,
    #[serde(default)]
    pub task: TaskSection,
    #[serde(default)]
    pub sweep: SweepSection,
    #[serde(default)]
    pub interpret: InterpretSection,
}

fn default_output() -> PathBuf {
    PathBuf::from("runs")
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

/// Exactly one of `synthetic` and `manifest`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub synthetic: Option<SyntheticSpec>,
    pub manifest: Option<PathBuf>,
    #[serde(default = "pretrain_split")]
    pub pretrain_split: [f64; 3],
    #[serde(default = "task_split")]
    pub task_split: [f64; 3],
    #[serde(default)]
    pub split_seed: u64,
}

fn pretrain_split() -> [f64; 3] {
    [0.89, 0.01, 0.10]
}

fn task_split() -> [f64; 3] {
    [0.8, 0.1, 0.1]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub num_channels: usize,
    pub d_emb: usize,
    pub k: usize,
    pub blocks: usize,
    pub shared_mixing: bool,
    pub rho: f64,
    pub sigma: f64,
    pub num_windows: usize,
    pub stride_ms: u32,
    pub label_component: usize,
    pub label_threshold: Threshold,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            num_channels: 16,
            d_emb: 32,
            k: 16,
            blocks: 2,
            shared_mixing: true,
            rho: 0.95,
            sigma: 0.3,
            num_windows: 20_000,
            stride_ms: 500,
            label_component: 0,
            label_threshold: Threshold::Median,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn to_config(&self) -> anyhow::Result<SyntheticConfig> {
        if self.blocks == 0 || self.k % self.blocks != 0 || self.num_channels < self.blocks {
            return Err(crate::CliError::Schema(format!(
                "k={} and {} channels cannot be split over {} blocks",
                self.k, self.num_channels, self.blocks
            ))
            .into());
        }
        let mut c = SyntheticConfig::blocks(self.num_channels, self.d_emb, self.k, self.blocks, self.seed);
        c.shared_mixing = self.shared_mixing;
        c.rho = self.rho;
        c.sigma = self.sigma;
        c.num_windows = self.num_windows;
        c.stride_ms = self.stride_ms;
        c.label = LabelRule {
            component: self.label_component,
            threshold: self.label_threshold,
        };
        Ok(c)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Profile {
    /// 2 layers, 4 heads, width 64.
    Desk,
    /// 6 layers, 8 heads, width 512.
    Full,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub profile: Profile,
    pub layers: Option<usize>,
    pub heads: Option<usize>,
    pub d: Option<usize>,
    pub dropout: Option<f64>,
    pub position: PositionMode,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            profile: Profile::Desk,
            layers: None,
            heads: None,
            d: None,
            dropout: None,
            position: PositionMode::Full,
        }
    }
}

impl ModelSection {
    pub fn resolve(&self, d_emb: usize) -> PopTConfig {
        let mut c = match self.profile {
            Profile::Desk => PopTConfig::desk(d_emb),
            Profile::Full => PopTConfig::default_profile(d_emb),
        };
        c.layers = self.layers.unwrap_or(c.layers);
        c.heads = self.heads.unwrap_or(c.heads);
        c.d = self.d.unwrap_or(c.d);
        c.dropout = self.dropout.unwrap_or(c.dropout);
        c.position = self.position;
        c
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainSection {
    pub steps: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub schedule: LrSchedule,
    pub eval_every: u64,
    pub val_examples: usize,
    pub swap_rate: f64,
    /// Ensemble size range; the upper end defaults to half the channels.
    pub min_size: usize,
    pub max_size: Option<usize>,
    pub ablations: Vec<Ablation>,
}

impl Default for PretrainSection {
    fn default() -> Self {
        PretrainSection {
            steps: 2000,
            batch_size: 64,
            lr: 3e-3,
            schedule: LrSchedule::Constant,
            eval_every: 100,
            val_examples: 256,
            swap_rate: 0.1,
            min_size: 1,
            max_size: None,
            ablations: Vec::new(),
        }
    }
}

impl PretrainSection {
    pub fn resolve(&self, model: PopTConfig, num_channels: usize, seed: u64) -> PretrainConfig {
        let mut c = PretrainConfig::desk(model.d_emb, num_channels);
        c.model = model;
        c.steps = self.steps;
        c.batch_size = self.batch_size;
        c.lr = self.lr;
        c.schedule = self.schedule;
        c.eval_every = self.eval_every;
        c.val_examples = self.val_examples;
        c.swap_rate = self.swap_rate;
        c.sizes = SizeRange {
            min: self.min_size,
            max: self.max_size.unwrap_or(c.sizes.max),
        };
        c.seed = seed;
        for a in &self.ablations {
            a.apply(&mut c);
        }
        c
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneSection {
    pub steps: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub schedule: LrSchedule,
    pub eval_every: u64,
    /// Validation passes without improvement before stopping; 0 never stops.
    pub patience: u64,
    pub convergence_tolerance: f64,
    pub transformer_lr_scale: f64,
    /// Head learning rate, steps and patience for `probe`.
    pub probe_lr: f64,
    pub probe_steps: u64,
    pub probe_patience: u64,
}

impl Default for FinetuneSection {
    fn default() -> Self {
        FinetuneSection {
            steps: 600,
            batch_size: 64,
            lr: 1e-3,
            weight_decay: 0.01,
            schedule: LrSchedule::RampUp,
            eval_every: 25,
            patience: 8,
            convergence_tolerance: 0.01,
            transformer_lr_scale: 0.1,
            probe_lr: 1e-2,
            probe_steps: 2000,
            probe_patience: 0,
        }
    }
}

impl FinetuneSection {
    pub fn resolve(&self, seed: u64) -> FinetuneConfig {
        FinetuneConfig {
            control: TrainControl {
                steps: self.steps,
                batch_size: self.batch_size,
                lr: self.lr,
                weight_decay: self.weight_decay,
                schedule: self.schedule,
                eval_every: self.eval_every,
                patience: (self.patience > 0).then_some(self.patience),
                convergence_tolerance: self.convergence_tolerance,
                seed,
            },
            transformer_lr_scale: self.transformer_lr_scale,
        }
    }

    pub fn resolve_probe(&self, seed: u64) -> FinetuneConfig {
        let mut c = self.resolve(seed);
        c.control.lr = self.probe_lr;
        c.control.steps = self.probe_steps;
        c.control.patience = (self.probe_patience > 0).then_some(self.probe_patience);
        c.transformer_lr_scale = 0.0;
        c
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BaselineName {
    Linear,
    DeepNn,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BaselineSection {
    pub kind: BaselineName,
    pub hidden: usize,
    pub layers: usize,
    pub steps: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub schedule: LrSchedule,
    pub eval_every: u64,
    /// As in `[finetune]`; 0 never stops.
    pub patience: u64,
    pub convergence_tolerance: f64,
}

impl Default for BaselineSection {
    fn default() -> Self {
        let d = BaselineConfig::desk().control;
        BaselineSection {
            kind: BaselineName::Linear,
            hidden: 512,
            layers: 5,
            steps: d.steps,
            batch_size: d.batch_size,
            lr: d.lr,
            weight_decay: d.weight_decay,
            schedule: d.schedule,
            eval_every: d.eval_every,
            patience: d.patience.unwrap_or(0),
            convergence_tolerance: d.convergence_tolerance,
        }
    }
}

impl BaselineSection {
    pub fn kind(&self, name: BaselineName) -> BaselineKind {
        match name {
            BaselineName::Linear => BaselineKind::Linear,
            BaselineName::DeepNn => BaselineKind::DeepNn {
                hidden: self.hidden,
                layers: self.layers,
            },
        }
    }

    pub fn resolve(&self, seed: u64) -> BaselineConfig {
        BaselineConfig {
            control: TrainControl {
                steps: self.steps,
                batch_size: self.batch_size,
                lr: self.lr,
                weight_decay: self.weight_decay,
                schedule: self.schedule,
                eval_every: self.eval_every,
                patience: (self.patience > 0).then_some(self.patience),
                convergence_tolerance: self.convergence_tolerance,
                seed,
            },
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskSection {
    /// Channel indices of the ensemble; all channels when absent.
    pub channels: Option<Vec<usize>>,
    /// Labelled training windows kept, as a count or a fraction; all when
    /// neither is given.
    pub train_size: Option<usize>,
    pub train_fraction: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SweepKind {
    Channels,
    Samples,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DecoderName {
    /// PopT from `--checkpoint`, or random weights without one.
    Popt,
    Linear,
    DeepNn,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSection {
    pub kind: SweepKind,
    pub decoder: DecoderName,
    pub sizes: Vec<usize>,
    /// Fractions of the task's training set (after `train_size`).
    pub fractions: Vec<f64>,
}

impl Default for SweepSection {
    fn default() -> Self {
        SweepSection {
            kind: SweepKind::Channels,
            decoder: DecoderName::Popt,
            sizes: vec![1, 4, 8, 16],
            fractions: vec![0.1, 0.5, 1.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InterpretSection {
    /// Test windows sampled, evenly spaced.
    pub n_samples: usize,
}

impl Default for InterpretSection {
    fn default() -> Self {
        InterpretSection { n_samples: 50 }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> anyhow::Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| crate::CliError::Schema(e.to_string()))?;
        cfg.check()?;
        Ok(cfg)
    }

    pub fn check(&self) -> anyhow::Result<()> {
        let schema = |m: &str| Err(crate::CliError::Schema(m.to_string()).into());
        match (&self.data.synthetic, &self.data.manifest) {
            (Some(_), Some(_)) | (None, None) => return schema("[data] needs exactly one of `synthetic` or `manifest`"),
            _ => {}
        }
        if self.seeds.is_empty() {
            return schema("`seeds` must not be empty");
        }
        if self.task.train_size.is_some() && self.task.train_fraction.is_some() {
            return schema("[task] takes `train_size` or `train_fraction`, not both");
        }
        Ok(())
    }

    /// Canonical TOML of the fully resolved config.
    pub fn resolved_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn hash_with(&self, extra: &str) -> String {
        let mut h = Sha256::new();
        h.update(self.resolved_toml().as_bytes());
        h.update(extra.as_bytes());
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}
