//! The PopT encoder: pre-norm transformer blocks over a CLS row plus one row
//! per channel, a linear head on the CLS output and one linear head shared by
//! all channel outputs.
//!
//! Batches are ragged. All examples are stacked into one row matrix; row-wise
//! layers run on the whole matrix and attention is confined to each
//! example's block of rows.

mod checkpoint;

use std::ops::Range;

use rand::SeedableRng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::encoding::{PositionMode, TokenMatrix};
use crate::engine::{Graph, Mode, ParamId, Params, Real, Rng, Tensor, Var};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointError, RngState, FORMAT_VERSION};

const LN_EPS: f64 = 1e-5;
const INIT_STD: f64 = 0.02;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("non-finite activation after {0}")]
    NonFinite(String),
    #[error("input mismatch: {0}")]
    InputMismatch(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PopTConfig {
    pub layers: usize,
    pub heads: usize,
    pub d: usize,
    pub dropout: f64,
    pub d_emb: usize,
    /// Which position sub-encodings the model is fed.
    #[serde(default)]
    pub position: PositionMode,
}

impl PopTConfig {
    /// 6 layers, 8 heads, width 512.
    pub fn default_profile(d_emb: usize) -> Self {
        PopTConfig {
            layers: 6,
            heads: 8,
            d: 512,
            dropout: 0.1,
            d_emb,
            position: PositionMode::Full,
        }
    }

    /// 2 layers, 4 heads, width 64.
    pub fn desk(d_emb: usize) -> Self {
        PopTConfig {
            layers: 2,
            heads: 4,
            d: 64,
            dropout: 0.1,
            d_emb,
            position: PositionMode::Full,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::InvalidConfig(m));
        if self.layers == 0 || self.heads == 0 || self.d == 0 || self.d_emb == 0 {
            return bad("layers, heads, d and d_emb must be positive".into());
        }
        if self.d % self.heads != 0 {
            return bad(format!("d = {} not divisible by {} heads", self.d, self.heads));
        }
        if self.d % 4 != 0 {
            return bad(format!("d = {} not divisible by 4", self.d));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        Ok(())
    }

    pub fn has_projection(&self) -> bool {
        self.d_emb != self.d
    }

    /// Closed-form parameter count.
    ///
    /// Per block: four `d x d` attention projections with biases, two
    /// LayerNorms and a `d -> 4d -> d` feed-forward, i.e. `12 d^2 + 13 d`.
    /// Outside the blocks: the optional input projection, the CLS vector, the
    /// final LayerNorm, CLS/token/task heads (`d + 1` each) and the
    /// reconstruction head (`d d_emb + d_emb`).
    pub fn num_parameters(&self) -> usize {
        let (d, e) = (self.d, self.d_emb);
        let proj = if self.has_projection() { e * d + d } else { 0 };
        proj + d + self.layers * (12 * d * d + 13 * d) + 2 * d + 3 * (d + 1) + (d * e + e)
    }
}

/// Weight and bias of an affine head.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HeadIds {
    pub w: ParamId,
    pub b: ParamId,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct LayerIds {
    ln1: HeadIds,
    q: HeadIds,
    k: HeadIds,
    v: HeadIds,
    o: HeadIds,
    ln2: HeadIds,
    ff1: HeadIds,
    ff2: HeadIds,
}

/// Forward-pass switches.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ForwardOptions {
    pub mode: Mode,
    /// Keep attention nodes so their probabilities can be read back.
    pub record_attention: bool,
    /// Diagnostic: every row attends only to itself.
    pub identity_attention: bool,
}

impl ForwardOptions {
    pub fn train() -> Self {
        ForwardOptions {
            mode: Mode::Train,
            record_attention: false,
            identity_attention: false,
        }
    }

    pub fn eval() -> Self {
        ForwardOptions {
            mode: Mode::Eval,
            ..Self::train()
        }
    }
}

/// Graph handles of an encoded batch.
#[derive(Debug, Clone)]
pub struct Encoded {
    /// `[T, d]` final hidden states of all rows.
    pub hidden: Var,
    /// Row of each example's CLS output.
    pub cls_rows: Vec<usize>,
    /// Rows of each example's channel outputs.
    pub token_rows: Vec<Range<usize>>,
    /// One attention node per layer when recorded.
    pub attention: Vec<Var>,
}

impl Encoded {
    pub fn flat_token_rows(&self) -> Vec<usize> {
        self.token_rows.iter().flat_map(|r| r.clone()).collect()
    }
}

/// Outputs of a single-example forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput<R> {
    pub y_cls: Vec<R>,
    pub y_tokens: Tensor<R>,
    /// `[layer][head]` attention matrices over `N + 1` rows (CLS first).
    pub attention: Option<Vec<Vec<Tensor<R>>>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PopT<R> {
    pub config: PopTConfig,
    pub params: Params<R>,
    proj: Option<HeadIds>,
    cls: ParamId,
    layers: Vec<LayerIds>,
    final_ln: HeadIds,
    pub cls_head: HeadIds,
    pub token_head: HeadIds,
    pub recon_head: HeadIds,
    pub task_head: HeadIds,
}

fn normal<R: Real>(shape: &[usize], rng: &mut Rng) -> Tensor<R> {
    let dist = Normal::new(0.0, INIT_STD).expect("valid std");
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| R::from_f64(dist.sample(rng))).collect())
}

impl<R: Real> PopT<R> {
    pub fn new(config: PopTConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = Rng::seed_from_u64(seed);
        let mut params = Params::new();
        let (d, e) = (config.d, config.d_emb);
        let linear = |p: &mut Params<R>, name: &str, i: usize, o: usize, rng: &mut Rng| HeadIds {
            w: p.add(format!("{name}.w"), normal(&[i, o], rng)),
            b: p.add(format!("{name}.b"), Tensor::zeros(&[o])),
        };
        let norm = |p: &mut Params<R>, name: &str| HeadIds {
            w: p.add(format!("{name}.g"), Tensor::full(&[d], R::ONE)),
            b: p.add(format!("{name}.b"), Tensor::zeros(&[d])),
        };
        let proj = config.has_projection().then(|| linear(&mut params, "input", e, d, &mut rng));
        let cls = params.add("cls", normal(&[1, d], &mut rng));
        let mut layers = Vec::with_capacity(config.layers);
        for l in 0..config.layers {
            let p = format!("layer{l}");
            layers.push(LayerIds {
                ln1: norm(&mut params, &format!("{p}.ln1")),
                q: linear(&mut params, &format!("{p}.attn.q"), d, d, &mut rng),
                k: linear(&mut params, &format!("{p}.attn.k"), d, d, &mut rng),
                v: linear(&mut params, &format!("{p}.attn.v"), d, d, &mut rng),
                o: linear(&mut params, &format!("{p}.attn.o"), d, d, &mut rng),
                ln2: norm(&mut params, &format!("{p}.ln2")),
                ff1: linear(&mut params, &format!("{p}.ffn.1"), d, 4 * d, &mut rng),
                ff2: linear(&mut params, &format!("{p}.ffn.2"), 4 * d, d, &mut rng),
            });
        }
        let final_ln = norm(&mut params, "final_ln");
        let cls_head = linear(&mut params, "head.cls", d, 1, &mut rng);
        let token_head = linear(&mut params, "head.token", d, 1, &mut rng);
        let recon_head = linear(&mut params, "head.recon", d, e, &mut rng);
        let task_head = linear(&mut params, "head.task", d, 1, &mut rng);
        Ok(PopT {
            config,
            params,
            proj,
            cls,
            layers,
            final_ln,
            cls_head,
            token_head,
            recon_head,
            task_head,
        })
    }

    /// Rebuilds a model around existing weights, checking names and shapes.
    pub fn from_params(config: PopTConfig, params: Params<R>) -> Result<Self, ModelError> {
        let mut model = PopT::new(config, 0)?;
        if params.len() != model.params.len() {
            return Err(ModelError::InputMismatch(format!(
                "expected {} tensors, got {}",
                model.params.len(),
                params.len()
            )));
        }
        for (id, name, t) in model.params.iter() {
            match params.by_name(name) {
                Some(p) if p.shape() == t.shape() && params.id(name) == Some(id) => {}
                _ => return Err(ModelError::InputMismatch(format!("tensor `{name}` missing or misshapen"))),
            }
        }
        model.params = params;
        Ok(model)
    }

    /// Ids of every parameter belonging to the encoder proper (input
    /// projection, CLS vector, blocks and final norm), excluding the heads.
    pub fn encoder_param_ids(&self) -> Vec<ParamId> {
        self.params
            .iter()
            .filter(|(_, name, _)| !name.starts_with("head."))
            .map(|(id, _, _)| id)
            .collect()
    }

    fn p(&self, g: &mut Graph<R>, id: ParamId) -> Var {
        g.param(id, self.params.get(id))
    }

    fn affine(&self, g: &mut Graph<R>, x: Var, h: HeadIds) -> Var {
        let (w, b) = (self.p(g, h.w), self.p(g, h.b));
        g.linear(x, w, b)
    }

    fn norm(&self, g: &mut Graph<R>, x: Var, h: HeadIds) -> Var {
        let (w, b) = (self.p(g, h.w), self.p(g, h.b));
        g.layer_norm(x, w, b, R::from_f64(LN_EPS))
    }

    fn check(g: &Graph<R>, v: Var, what: impl FnOnce() -> String) -> Result<(), ModelError> {
        if g.value(v).all_finite() {
            Ok(())
        } else {
            Err(ModelError::NonFinite(what()))
        }
    }

    /// Runs the encoder over a ragged batch.
    pub fn encode(
        &self,
        g: &mut Graph<R>,
        batch: &[TokenMatrix<R>],
        opts: ForwardOptions,
        rng: &mut Rng,
    ) -> Result<Encoded, ModelError> {
        let (d, e) = (self.config.d, self.config.d_emb);
        if batch.is_empty() {
            return Err(ModelError::InputMismatch("empty batch".into()));
        }
        let total: usize = batch.iter().map(|t| t.len()).sum();
        let mut emb = Vec::with_capacity(total * e);
        let mut pos = Vec::with_capacity(total * d);
        for t in batch {
            if t.embeddings.cols() != e || t.positions.cols() != d {
                return Err(ModelError::InputMismatch(format!(
                    "token matrix is [{}, {}] + [{}, {}], model expects d_emb {e}, d {d}",
                    t.embeddings.rows(),
                    t.embeddings.cols(),
                    t.positions.rows(),
                    t.positions.cols()
                )));
            }
            emb.extend_from_slice(t.embeddings.data());
            pos.extend_from_slice(t.positions.data());
        }
        let emb = g.constant(Tensor::matrix(total, e, emb));
        let pos = g.constant(Tensor::matrix(total, d, pos));
        let x = match self.proj {
            Some(h) => self.affine(g, emb, h),
            None => emb,
        };
        let x = g.add(x, pos);
        let cls = self.p(g, self.cls);
        let b = batch.len();
        let cls_rep = g.gather_rows(cls, vec![0; b]);
        let all = g.concat_rows(cls_rep, x);

        let mut order = Vec::with_capacity(total + b);
        let mut segments = Vec::with_capacity(b);
        let mut off = 0;
        for (i, t) in batch.iter().enumerate() {
            let start = order.len();
            order.push(i);
            order.extend(b + off..b + off + t.len());
            off += t.len();
            segments.push(start..order.len());
        }
        let mut h = g.gather_rows(all, order);

        let train = opts.mode == Mode::Train && self.config.dropout > 0.0;
        let p_drop = if train { self.config.dropout } else { 0.0 };
        let mut attention = Vec::new();
        for (l, ids) in self.layers.iter().enumerate() {
            let a = self.norm(g, h, ids.ln1);
            let v = self.affine(g, a, ids.v);
            let att = if opts.identity_attention {
                v
            } else {
                let q = self.affine(g, a, ids.q);
                let k = self.affine(g, a, ids.k);
                let att = g.segment_attention(q, k, v, self.config.heads, &segments, p_drop, rng);
                if opts.record_attention {
                    attention.push(att);
                }
                att
            };
            let mut o = self.affine(g, att, ids.o);
            if train {
                o = g.dropout(o, p_drop, rng);
            }
            h = g.add(h, o);
            Self::check(g, h, || format!("layer {l} attention"))?;

            let a = self.norm(g, h, ids.ln2);
            let f = self.affine(g, a, ids.ff1);
            let f = g.gelu(f);
            let mut f = self.affine(g, f, ids.ff2);
            if train {
                f = g.dropout(f, p_drop, rng);
            }
            h = g.add(h, f);
            Self::check(g, h, || format!("layer {l} feed-forward"))?;
        }
        let hidden = self.norm(g, h, self.final_ln);
        Self::check(g, hidden, || "final norm".into())?;
        Ok(Encoded {
            hidden,
            cls_rows: segments.iter().map(|s| s.start).collect(),
            token_rows: segments.iter().map(|s| s.start + 1..s.end).collect(),
            attention,
        })
    }

    /// `[B, 1]` logits of `head` applied to each example's CLS output.
    pub fn cls_logits(&self, g: &mut Graph<R>, enc: &Encoded, head: HeadIds) -> Var {
        let x = g.gather_rows(enc.hidden, enc.cls_rows.clone());
        self.affine(g, x, head)
    }

    /// `[N_total, 1]` logits of the shared token head, example-major.
    pub fn token_logits(&self, g: &mut Graph<R>, enc: &Encoded) -> Var {
        let x = g.gather_rows(enc.hidden, enc.flat_token_rows());
        self.affine(g, x, self.token_head)
    }

    /// `[N_total, d_emb]` reconstructions of the channel embeddings.
    pub fn reconstructions(&self, g: &mut Graph<R>, enc: &Encoded) -> Var {
        let x = g.gather_rows(enc.hidden, enc.flat_token_rows());
        self.affine(g, x, self.recon_head)
    }

    /// Evaluation helper for a single example.
    pub fn forward(&self, tokens: &TokenMatrix<R>, opts: ForwardOptions, rng: &mut Rng) -> Result<ForwardOutput<R>, ModelError> {
        let mut g = if opts.mode == Mode::Eval {
            Graph::inference()
        } else {
            Graph::new()
        };
        let enc = self.encode(&mut g, std::slice::from_ref(tokens), opts, rng)?;
        let hidden = g.value(enc.hidden);
        let y_cls = hidden.row(enc.cls_rows[0]).to_vec();
        let rows = enc.token_rows[0].clone();
        let y_tokens = Tensor::matrix(rows.len(), self.config.d, hidden.data()[rows.start * self.config.d..rows.end * self.config.d].to_vec());
        let attention = opts.record_attention.then(|| {
            enc.attention
                .iter()
                .map(|&a| g.attention_probs(a).expect("attention node").swap_remove(0))
                .collect()
        });
        Ok(ForwardOutput {
            y_cls,
            y_tokens,
            attention,
        })
    }

    /// Per-example sigmoid probabilities of `head` on CLS and of the token
    /// head on each channel row, in eval mode.
    pub fn predict(&self, batch: &[TokenMatrix<R>], head: HeadIds) -> Result<(Vec<f64>, Vec<Vec<f64>>), ModelError> {
        let mut g = Graph::inference();
        let mut rng = Rng::seed_from_u64(0);
        let enc = self.encode(&mut g, batch, ForwardOptions::eval(), &mut rng)?;
        let cls = self.cls_logits(&mut g, &enc, head);
        let tok = self.token_logits(&mut g, &enc);
        let sig = |z: &R| crate::engine::ops::sigmoid(*z).to_f64();
        let cls = g.value(cls).data().iter().map(sig).collect();
        let tok_all: Vec<f64> = g.value(tok).data().iter().map(sig).collect();
        let mut off = 0;
        let mut tokens = Vec::with_capacity(batch.len());
        for t in batch {
            tokens.push(tok_all[off..off + t.len()].to_vec());
            off += t.len();
        }
        Ok((cls, tokens))
    }

    /// Assembles token rows with this model's width and position mode.
    pub fn tokens(
        &self,
        store: &crate::data::EmbeddingStore,
        layout: &crate::data::ElectrodeLayout,
        specs: &[crate::encoding::TokenSpec],
    ) -> Result<TokenMatrix<R>, crate::encoding::EncodingError> {
        crate::encoding::assemble_tokens(store, layout, specs, self.config.d, self.config.position)
    }

    pub fn head(&self, h: HeadIds) -> (&Tensor<R>, &Tensor<R>) {
        (self.params.get(h.w), self.params.get(h.b))
    }

    /// Input projection as `(weight, bias)`, if the model has one.
    pub fn projection(&self) -> Option<(&Tensor<R>, &Tensor<R>)> {
        self.proj.map(|h| self.head(h))
    }

    pub fn cls_vector(&self) -> &Tensor<R> {
        self.params.get(self.cls)
    }
}

/// Affine head on a CLS output: `w^T y + b` with `w` of shape `[d, 1]`.
pub fn cls_logit<R: Real>(y_cls: &[R], w: &Tensor<R>, b: &Tensor<R>) -> R {
    assert_eq!(w.numel(), y_cls.len(), "head width mismatch");
    y_cls.iter().zip(w.data()).fold(b.data()[0], |acc, (&y, &wi)| acc + y * wi)
}

/// The shared token head applied to every row of `y_tokens`.
pub fn token_logits<R: Real>(y_tokens: &Tensor<R>, w: &Tensor<R>, b: &Tensor<R>) -> Vec<R> {
    (0..y_tokens.rows()).map(|r| cls_logit(y_tokens.row(r), w, b)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parameter_count_matches_closed_form() {
        for cfg in [PopTConfig::default_profile(768), PopTConfig::desk(64), PopTConfig::desk(32)] {
            let m = PopT::<f32>::new(cfg.clone(), 1).unwrap();
            assert_eq!(m.params.num_values(), cfg.num_parameters());
        }
        let n = PopTConfig::default_profile(768).num_parameters() as f64;
        assert!((n - 20e6).abs() / 20e6 < 0.1, "{n}");
    }

    #[test]
    fn config_validation() {
        let mut c = PopTConfig::desk(64);
        c.heads = 3;
        assert!(c.validate().is_err());
        c.heads = 2;
        c.d = 66;
        assert!(c.validate().is_err());
        assert!(PopTConfig::desk(64).validate().is_ok());
    }

    #[test]
    fn head_examples() {
        let y = [0.3f64, -1.2, 2.0];
        let zero = Tensor::<f64>::zeros(&[3, 1]);
        let b0 = Tensor::<f64>::zeros(&[1]);
        assert_eq!(cls_logit(&y, &zero, &b0), 0.0);
        assert_eq!(crate::engine::ops::sigmoid(cls_logit(&y, &zero, &b0)), 0.5);
        let e1 = Tensor::matrix(3, 1, vec![1.0, 0.0, 0.0]);
        assert_eq!(cls_logit(&y, &e1, &b0), 0.3);
        let w = Tensor::matrix(3, 1, vec![0.5, -0.25, 2.0]);
        let a = [1.0, 2.0, 3.0];
        let s: Vec<f64> = a.iter().zip(&y).map(|(p, q)| p + q).collect();
        let lhs = cls_logit(&s, &w, &b0);
        let rhs = cls_logit(&a, &w, &b0) + cls_logit(&y, &w, &b0);
        assert!((lhs - rhs).abs() < 1e-12);
        let toks = Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, 0.3, -1.2, 2.0]);
        assert_eq!(token_logits(&toks, &e1, &b0), vec![1.0, 0.3]);
    }
}
