//! LAMB and AdamW.
//!
//! Both keep bias-corrected Adam moments per parameter tensor. LAMB then
//! rescales each tensor's update by the trust ratio `||w|| / ||u||`, where
//! `u` already includes the weight-decay term; a zero norm on either side
//! gives ratio 1. AdamW applies decoupled decay `w *= 1 - lr * wd` and the
//! plain Adam update.

use serde::{Deserialize, Serialize};

use super::graph::Gradients;
use super::params::Params;
use super::real::Real;
use super::tensor::Tensor;
use super::EngineError;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Hyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Hyper {
    pub fn lamb() -> Self {
        Hyper {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-6,
            weight_decay: 0.0,
        }
    }

    pub fn adamw() -> Self {
        Hyper {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Per-parameter moments and the shared step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<R> {
    pub m: Vec<Tensor<R>>,
    pub v: Vec<Tensor<R>>,
    pub t: u64,
}

impl<R: Real> OptimizerState<R> {
    pub fn new(params: &Params<R>) -> Self {
        let zeros = |p: &Params<R>| p.iter().map(|(_, _, t)| Tensor::zeros(t.shape())).collect();
        OptimizerState {
            m: zeros(params),
            v: zeros(params),
            t: 0,
        }
    }
}

fn check_grads<R: Real>(params: &Params<R>, grads: &Gradients<R>) -> Result<(), EngineError> {
    for (id, g) in grads.iter() {
        assert_eq!(g.shape(), params.get(id).shape(), "gradient shape mismatch for `{}`", params.name(id));
        if !g.all_finite() {
            return Err(EngineError::NonFiniteParamGradient {
                param: params.name(id).to_string(),
            });
        }
    }
    Ok(())
}

/// Updates moments in place and returns the bias-corrected Adam direction.
fn adam_direction<R: Real>(
    m: &mut Tensor<R>,
    v: &mut Tensor<R>,
    g: &Tensor<R>,
    t: u64,
    hyper: &Hyper,
) -> Vec<f64> {
    let (b1, b2) = (hyper.beta1, hyper.beta2);
    let c1 = 1.0 - b1.powi(t as i32);
    let c2 = 1.0 - b2.powi(t as i32);
    let mut dir = Vec::with_capacity(g.numel());
    for ((mi, vi), &gi) in m.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
        let gf = gi.to_f64();
        let mf = b1 * mi.to_f64() + (1.0 - b1) * gf;
        let vf = b2 * vi.to_f64() + (1.0 - b2) * gf * gf;
        *mi = R::from_f64(mf);
        *vi = R::from_f64(vf);
        dir.push((mf / c1) / ((vf / c2).sqrt() + hyper.eps));
    }
    dir
}

/// One LAMB step with learning rate `lr` scaled per parameter by `lr_scale`
/// (empty slice means 1 everywhere). Parameters without a gradient are
/// left untouched.
pub fn lamb_step<R: Real>(
    params: &mut Params<R>,
    grads: &Gradients<R>,
    state: &mut OptimizerState<R>,
    hyper: &Hyper,
    lr: f64,
    lr_scale: &[f64],
) -> Result<(), EngineError> {
    check_grads(params, grads)?;
    state.t += 1;
    for (id, g) in grads.iter() {
        let mut u = adam_direction(&mut state.m[id], &mut state.v[id], g, state.t, hyper);
        let w = params.get_mut(id);
        for (ui, wi) in u.iter_mut().zip(w.data()) {
            *ui += hyper.weight_decay * wi.to_f64();
        }
        let w_norm = w.data().iter().map(|x| x.to_f64().powi(2)).sum::<f64>().sqrt();
        let u_norm = u.iter().map(|x| x * x).sum::<f64>().sqrt();
        let ratio = if w_norm == 0.0 || u_norm == 0.0 { 1.0 } else { w_norm / u_norm };
        let step = lr * lr_scale.get(id).copied().unwrap_or(1.0) * ratio;
        for (wi, ui) in w.data_mut().iter_mut().zip(&u) {
            *wi = R::from_f64(wi.to_f64() - step * ui);
        }
    }
    Ok(())
}

/// One AdamW step; see [`lamb_step`] for the argument conventions.
pub fn adamw_step<R: Real>(
    params: &mut Params<R>,
    grads: &Gradients<R>,
    state: &mut OptimizerState<R>,
    hyper: &Hyper,
    lr: f64,
    lr_scale: &[f64],
) -> Result<(), EngineError> {
    check_grads(params, grads)?;
    state.t += 1;
    for (id, g) in grads.iter() {
        let u = adam_direction(&mut state.m[id], &mut state.v[id], g, state.t, hyper);
        let step = lr * lr_scale.get(id).copied().unwrap_or(1.0);
        let decay = 1.0 - step * hyper.weight_decay;
        for (wi, ui) in params.get_mut(id).data_mut().iter_mut().zip(&u) {
            *wi = R::from_f64(wi.to_f64() * decay - step * ui);
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Lamb,
    Adamw,
}

/// Optimizer bundle: kind, hyperparameters, state and per-parameter lr scale.
#[derive(Debug, Clone)]
pub struct Optimizer<R> {
    pub kind: OptimizerKind,
    pub hyper: Hyper,
    pub state: OptimizerState<R>,
    pub lr_scale: Vec<f64>,
}

impl<R: Real> Optimizer<R> {
    pub fn new(kind: OptimizerKind, hyper: Hyper, params: &Params<R>) -> Self {
        Optimizer {
            kind,
            hyper,
            state: OptimizerState::new(params),
            lr_scale: vec![1.0; params.len()],
        }
    }

    pub fn step(&mut self, params: &mut Params<R>, grads: &Gradients<R>, lr: f64) -> Result<(), EngineError> {
        match self.kind {
            OptimizerKind::Lamb => lamb_step(params, grads, &mut self.state, &self.hyper, lr, &self.lr_scale),
            OptimizerKind::Adamw => adamw_step(params, grads, &mut self.state, &self.hyper, lr, &self.lr_scale),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::Graph;

    fn scalar_params(w: f64) -> Params<f64> {
        let mut p = Params::new();
        p.add("w", Tensor::scalar(w));
        p
    }

    fn grads_for(params: &Params<f64>, g: f64) -> Gradients<f64> {
        // d/dw of g * w is g
        let mut graph = Graph::new();
        let w = graph.param(0, params.get(0));
        let s = graph.scale(w, g);
        let l = graph.sum(s);
        graph.backward(l).unwrap()
    }

    /// Standalone single-step references written out longhand.
    fn lamb_reference(w: f64, g: f64, lr: f64, b1: f64, b2: f64, eps: f64, wd: f64) -> f64 {
        let m = (1.0 - b1) * g;
        let v = (1.0 - b2) * g * g;
        let m_hat = m / (1.0 - b1);
        let v_hat = v / (1.0 - b2);
        let u = m_hat / (v_hat.sqrt() + eps) + wd * w;
        let ratio = if w.abs() == 0.0 || u.abs() == 0.0 { 1.0 } else { w.abs() / u.abs() };
        w - lr * ratio * u
    }

    fn adamw_reference(w: f64, g: f64, lr: f64, b1: f64, b2: f64, eps: f64, wd: f64) -> f64 {
        let m_hat = ((1.0 - b1) * g) / (1.0 - b1);
        let v_hat = ((1.0 - b2) * g * g) / (1.0 - b2);
        w * (1.0 - lr * wd) - lr * m_hat / (v_hat.sqrt() + eps)
    }

    #[test]
    fn lamb_scalar_step_matches_reference() {
        let mut p = scalar_params(1.0);
        let g = grads_for(&p, 1.0);
        let mut st = OptimizerState::new(&p);
        lamb_step(&mut p, &g, &mut st, &Hyper::lamb(), 0.1, &[]).unwrap();
        let want = lamb_reference(1.0, 1.0, 0.1, 0.9, 0.999, 1e-6, 0.0);
        assert!((p.get(0).item() - want).abs() < 1e-9);
        assert_eq!(st.t, 1);
    }

    #[test]
    fn adamw_scalar_step_matches_reference() {
        let mut p = scalar_params(0.7);
        let g = grads_for(&p, -0.3);
        let mut st = OptimizerState::new(&p);
        let hyper = Hyper { weight_decay: 0.05, ..Hyper::adamw() };
        adamw_step(&mut p, &g, &mut st, &hyper, 0.01, &[]).unwrap();
        let want = adamw_reference(0.7, -0.3, 0.01, 0.9, 0.999, 1e-8, 0.05);
        assert!((p.get(0).item() - want).abs() < 1e-9);
    }

    #[test]
    fn zero_gradient_cases() {
        let mut p = scalar_params(2.0);
        let g = grads_for(&p, 0.0);
        let mut st = OptimizerState::new(&p);
        lamb_step(&mut p, &g, &mut st, &Hyper::lamb(), 0.1, &[]).unwrap();
        assert_eq!(p.get(0).item(), 2.0);

        let mut st = OptimizerState::new(&p);
        let hyper = Hyper { weight_decay: 0.0, ..Hyper::adamw() };
        adamw_step(&mut p, &g, &mut st, &hyper, 0.1, &[]).unwrap();
        assert_eq!(p.get(0).item(), 2.0);

        let mut st = OptimizerState::new(&p);
        let hyper = Hyper { weight_decay: 0.1, ..Hyper::adamw() };
        adamw_step(&mut p, &g, &mut st, &hyper, 0.5, &[]).unwrap();
        assert!((p.get(0).item() - 2.0 * (1.0 - 0.5 * 0.1)).abs() < 1e-15);
    }

    #[test]
    fn lamb_zero_weight_uses_unit_ratio() {
        let mut p = scalar_params(0.0);
        let g = grads_for(&p, 2.0);
        let mut st = OptimizerState::new(&p);
        lamb_step(&mut p, &g, &mut st, &Hyper::lamb(), 0.1, &[]).unwrap();
        let want = lamb_reference(0.0, 2.0, 0.1, 0.9, 0.999, 1e-6, 0.0);
        assert!((p.get(0).item() - want).abs() < 1e-12);
        assert!((p.get(0).item() + 0.1).abs() < 1e-6);
    }

    #[test]
    fn non_finite_gradient_aborts_without_update() {
        let mut p = scalar_params(1.0);
        let mut g = Gradients::default();
        g.accumulate(0, Tensor::scalar(f64::NAN));
        let mut st = OptimizerState::new(&p);
        let err = lamb_step(&mut p, &g, &mut st, &Hyper::lamb(), 0.1, &[]).unwrap_err();
        assert!(matches!(err, EngineError::NonFiniteParamGradient { .. }));
        assert_eq!(p.get(0).item(), 1.0);
        assert_eq!(st.t, 0);
    }

    #[test]
    fn step_counter_increments() {
        let mut p = scalar_params(1.0);
        let mut opt = Optimizer::new(OptimizerKind::Adamw, Hyper::adamw(), &p);
        for k in 1..=5 {
            let g = grads_for(&p, 0.5);
            opt.step(&mut p, &g, 1e-3).unwrap();
            assert_eq!(opt.state.t, k);
        }
    }
}
