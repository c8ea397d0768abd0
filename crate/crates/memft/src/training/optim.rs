//! SGD and AdamW.
//!
//! Sparse memory methods use plain SGD — no momentum, no weight decay — which
//! keeps the update local to the selected rows by construction. The dense
//! baselines use AdamW with decoupled weight decay. One [`Optimizer`] instance
//! carries its state across a whole run; for row-sparse updates the AdamW
//! moments are allocated lazily per (parameter, row) with the *global* step
//! count driving bias correction, which makes them behave exactly like dense
//! zero-initialized moments for a row whose gradients were zero until its
//! first selection.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::numerics::{ParamId, ParamStore, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum OptKind {
    #[serde(rename = "sgd")]
    Sgd,
    #[serde(rename = "adamw")]
    AdamW,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct OptimizerConfig {
    pub kind: OptKind,
    pub lr: f64,
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
}

fn default_beta1() -> f64 {
    0.9
}

fn default_beta2() -> f64 {
    0.999
}

fn default_eps() -> f64 {
    1e-8
}

impl OptimizerConfig {
    pub fn sgd(lr: f64) -> Self {
        OptimizerConfig {
            kind: OptKind::Sgd,
            lr,
            weight_decay: 0.0,
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
        }
    }

    pub fn adamw(lr: f64, weight_decay: f64) -> Self {
        OptimizerConfig {
            kind: OptKind::AdamW,
            lr,
            weight_decay,
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::Config(format!("learning rate {} must be positive", self.lr)));
        }
        if self.kind == OptKind::Sgd && self.weight_decay != 0.0 {
            // Plain SGD is deliberately plain; decay here is almost always a
            // mis-specified method arm.
            return Err(Error::Config("sgd does not support weight_decay".into()));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Config("weight_decay must be non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("betas must lie in [0, 1)".into()));
        }
        if !(self.eps > 0.0) {
            return Err(Error::Config("eps must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct Moments<F> {
    m: Vec<F>,
    v: Vec<F>,
}

impl<F: Scalar> Moments<F> {
    fn zeros(n: usize) -> Self {
        Moments { m: vec![F::zero(); n], v: vec![F::zero(); n] }
    }
}

/// Stateful optimizer. Each call to [`Optimizer::step_dense`] or
/// [`Optimizer::step_rows`] is one optimizer step (the shared step counter
/// advances once).
#[derive(Debug, Clone)]
pub struct Optimizer<F> {
    cfg: OptimizerConfig,
    step_count: u64,
    dense: BTreeMap<usize, Moments<F>>,
    rows: BTreeMap<(usize, u32), Moments<F>>,
}

impl<F: Scalar> Optimizer<F> {
    pub fn new(cfg: OptimizerConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Optimizer { cfg, step_count: 0, dense: BTreeMap::new(), rows: BTreeMap::new() })
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.cfg
    }

    pub fn lr(&self) -> f64 {
        self.cfg.lr
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// Apply one step to whole parameter tensors, from their current grads.
    pub fn step_dense(&mut self, store: &mut ParamStore<F>, params: &[ParamId]) {
        self.step_count += 1;
        let t = self.step_count;
        for &pid in params {
            match self.cfg.kind {
                OptKind::Sgd => {
                    let lr = F::from_f64(self.cfg.lr);
                    let p = store.get_mut(pid);
                    let (val, grad) = (&mut p.value, &p.grad);
                    for (w, &g) in val.data_mut().iter_mut().zip(grad.data()) {
                        *w = *w - lr * g;
                    }
                }
                OptKind::AdamW => {
                    let n = store.get(pid).value.numel();
                    let mom = self
                        .dense
                        .entry(pid.index())
                        .or_insert_with(|| Moments::zeros(n));
                    let p = store.get_mut(pid);
                    adamw_update(
                        &self.cfg,
                        t,
                        p.value.data_mut(),
                        p.grad.data(),
                        &mut mom.m,
                        &mut mom.v,
                    );
                }
            }
        }
    }

    /// Apply one step to selected rows of a single 2-D parameter. Rows outside
    /// `rows` are untouched — no update, no decay, no moment movement.
    pub fn step_rows(&mut self, store: &mut ParamStore<F>, param: ParamId, rows: &[u32]) {
        self.step_count += 1;
        let t = self.step_count;
        let (_, width) = store
            .get(param)
            .value
            .dims2()
            .expect("row-sparse updates need a 2-D parameter");
        for &r in rows {
            let lo = r as usize * width;
            match self.cfg.kind {
                OptKind::Sgd => {
                    let lr = F::from_f64(self.cfg.lr);
                    let p = store.get_mut(param);
                    let grad_row: Vec<F> = p.grad.data()[lo..lo + width].to_vec();
                    for (w, g) in p.value.data_mut()[lo..lo + width].iter_mut().zip(grad_row) {
                        *w = *w - lr * g;
                    }
                }
                OptKind::AdamW => {
                    let mom = self
                        .rows
                        .entry((param.index(), r))
                        .or_insert_with(|| Moments::zeros(width));
                    let p = store.get_mut(param);
                    let grad_row: Vec<F> = p.grad.data()[lo..lo + width].to_vec();
                    adamw_update(
                        &self.cfg,
                        t,
                        &mut p.value.data_mut()[lo..lo + width],
                        &grad_row,
                        &mut mom.m,
                        &mut mom.v,
                    );
                }
            }
        }
    }

    /// Whether a lazily allocated row state exists (for tests/inspection).
    pub fn has_row_state(&self, param: ParamId, row: u32) -> bool {
        self.rows.contains_key(&(param.index(), row))
    }
}

fn adamw_update<F: Scalar>(
    cfg: &OptimizerConfig,
    t: u64,
    w: &mut [F],
    g: &[F],
    m: &mut [F],
    v: &mut [F],
) {
    let b1 = F::from_f64(cfg.beta1);
    let b2 = F::from_f64(cfg.beta2);
    let one = F::one();
    let lr = F::from_f64(cfg.lr);
    let eps = F::from_f64(cfg.eps);
    let wd = F::from_f64(cfg.weight_decay);
    let bc1 = F::from_f64(1.0 - cfg.beta1.powi(t as i32));
    let bc2 = F::from_f64(1.0 - cfg.beta2.powi(t as i32));
    for i in 0..w.len() {
        m[i] = b1 * m[i] + (one - b1) * g[i];
        v[i] = b2 * v[i] + (one - b2) * g[i] * g[i];
        let mhat = m[i] / bc1;
        let vhat = v[i] / bc2;
        // Decoupled decay: the decay term never touches the moments.
        w[i] = w[i] - lr * (mhat / (vhat.sqrt() + eps)) - lr * wd * w[i];
    }
}
