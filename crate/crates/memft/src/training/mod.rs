//! Finetuning methods and their single-batch update steps.
//!
//! Every method runs the *same* forward and backward pass; they differ only in
//! which gradient entries survive masking and which parameters the optimizer
//! touches:
//!
//! - `sparse_memory`: TF-IDF-ranked top-t rows of the memory value table
//! - `memory_tf_only`: like `sparse_memory` but ranked by raw term frequency
//! - `memory_all`: every memory row accessed in the batch
//! - `full`: all base parameters
//! - `lora`: adapter factors only, base frozen
//!
//! Masking happens after the backward pass, so the forward computation and the
//! gradients flowing to the selected entries are bit-identical to the dense
//! path; we just zero everything else before the optimizer looks at it.

pub mod lora;
pub mod optim;

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::memory::count_batch_accesses;
use crate::model::{Batch, ForwardOpts, TransformerModel};
use crate::numerics::{ParamId, ParamStore, Scalar};
use crate::ranking::{
    select_top_t, tf_only_scores, tfidf_scores, BackgroundIndexStore, TrainableSet,
};

pub use lora::{lora_attach, LoraAdapters, LoraConfig, LoraEntry, LoraTarget};
pub use optim::{OptKind, Optimizer, OptimizerConfig};

// ── Method specification ──

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MethodKind {
    SparseMemory,
    MemoryTfOnly,
    MemoryAll,
    Full,
    Lora,
}

impl MethodKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            MethodKind::SparseMemory => "sparse_memory",
            MethodKind::MemoryTfOnly => "memory_tf_only",
            MethodKind::MemoryAll => "memory_all",
            MethodKind::Full => "full",
            MethodKind::Lora => "lora",
        }
    }

    /// Methods that train only rows of the memory value table.
    pub fn is_memory_method(&self) -> bool {
        matches!(self, MethodKind::SparseMemory | MethodKind::MemoryTfOnly | MethodKind::MemoryAll)
    }
}

impl fmt::Display for MethodKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MethodKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sparse_memory" => Ok(MethodKind::SparseMemory),
            "memory_tf_only" => Ok(MethodKind::MemoryTfOnly),
            "memory_all" => Ok(MethodKind::MemoryAll),
            "full" => Ok(MethodKind::Full),
            "lora" => Ok(MethodKind::Lora),
            other => Err(Error::Config(format!(
                "unknown method {other:?}; expected one of sparse_memory, memory_tf_only, \
                 memory_all, full, lora"
            ))),
        }
    }
}

/// A fully specified finetuning method: kind, its budget/adapter settings, and
/// the optimizer it runs under.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct MethodSpec {
    pub method: MethodKind,
    /// Row budget per step; required for `sparse_memory` and `memory_tf_only`.
    #[serde(default)]
    pub t: Option<usize>,
    pub optimizer: OptimizerConfig,
    /// Adapter settings; required for `lora`.
    #[serde(default)]
    pub lora: Option<LoraConfig>,
}

/// Starting-point hyperparameters for each method at desk scale. Memory
/// methods ride plain SGD at a high learning rate (they touch a handful of
/// rows); the dense baselines use AdamW with decoupled decay 0.1.
pub fn default_method_spec(kind: MethodKind) -> MethodSpec {
    let (t, optimizer, lora) = match kind {
        MethodKind::SparseMemory | MethodKind::MemoryTfOnly => {
            (Some(25), OptimizerConfig::sgd(0.5), None)
        }
        MethodKind::MemoryAll => (None, OptimizerConfig::sgd(0.5), None),
        MethodKind::Full => (None, OptimizerConfig::adamw(1e-3, 0.1), None),
        MethodKind::Lora => (
            None,
            OptimizerConfig::adamw(1e-2, 0.1),
            Some(LoraConfig { rank: 4, alpha: 8.0, target: LoraTarget::AllLinear }),
        ),
    };
    MethodSpec { method: kind, t, optimizer, lora }
}

impl MethodSpec {
    pub fn validate(&self) -> Result<()> {
        self.optimizer.validate()?;
        let needs_t = matches!(self.method, MethodKind::SparseMemory | MethodKind::MemoryTfOnly);
        match (needs_t, self.t) {
            (true, None) => {
                return Err(Error::Config(format!("method {} requires t", self.method)))
            }
            (true, Some(0)) => return Err(Error::Config("t must be at least 1".into())),
            (false, Some(_)) => {
                return Err(Error::Config(format!("method {} does not take t", self.method)))
            }
            _ => {}
        }
        match (self.method == MethodKind::Lora, &self.lora) {
            (true, None) => {
                return Err(Error::Config("method lora requires adapter settings".into()))
            }
            (false, Some(_)) => {
                return Err(Error::Config(format!(
                    "method {} does not take adapter settings",
                    self.method
                )))
            }
            (true, Some(cfg)) => cfg.validate()?,
            _ => {}
        }
        Ok(())
    }
}

/// One JSON record per training step.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct StepReport {
    pub step: u64,
    pub method: String,
    pub loss: f64,
    /// Rows for memory methods, scalars for `full` and `lora`.
    pub trainable: usize,
    pub lr: f64,
    /// L2 norm over the gradient entries that were actually applied.
    pub grad_norm: f64,
    /// The trained memory rows, ranked; absent for `full` and `lora`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trained_indices: Option<Vec<u32>>,
}

// ── Gradient masking ──

/// Zero every gradient except the selected rows of `param`.
pub fn restrict_grads_to_rows<F: Scalar>(
    store: &mut ParamStore<F>,
    param: ParamId,
    rows: &BTreeSet<u32>,
) {
    for id in store.param_ids() {
        if id != param {
            for g in store.get_mut(id).grad.data_mut() {
                *g = F::zero();
            }
        }
    }
    let p = store.get_mut(param);
    let (n_rows, width) = p.value.dims2().expect("row masking needs a 2-D parameter");
    let grad = p.grad.data_mut();
    for r in 0..n_rows {
        if !rows.contains(&(r as u32)) {
            for g in &mut grad[r * width..(r + 1) * width] {
                *g = F::zero();
            }
        }
    }
}

/// Zero every gradient except those of `keep`.
pub fn restrict_grads_to_params<F: Scalar>(store: &mut ParamStore<F>, keep: &[ParamId]) {
    let keep: BTreeSet<usize> = keep.iter().map(|id| id.index()).collect();
    for id in store.param_ids() {
        if !keep.contains(&id.index()) {
            for g in store.get_mut(id).grad.data_mut() {
                *g = F::zero();
            }
        }
    }
}

fn grad_norm_rows<F: Scalar>(store: &ParamStore<F>, param: ParamId, rows: &[u32]) -> f64 {
    let p = store.get(param);
    let (_, width) = p.value.dims2().expect("2-D parameter");
    let g = p.grad.data();
    let mut acc = 0.0f64;
    for &r in rows {
        for c in 0..width {
            let v = g[r as usize * width + c].to_f64();
            acc += v * v;
        }
    }
    acc.sqrt()
}

fn grad_norm_params<F: Scalar>(store: &ParamStore<F>, params: &[ParamId]) -> f64 {
    let mut acc = 0.0f64;
    for &id in params {
        for &v in store.get(id).grad.data() {
            let v = v.to_f64();
            acc += v * v;
        }
    }
    acc.sqrt()
}

fn scalar_count<F: Scalar>(store: &ParamStore<F>, params: &[ParamId]) -> usize {
    params.iter().map(|&id| store.get(id).value.numel()).sum()
}

/// Mark which tensors a method is allowed to train; purely informational, the
/// masking above is what enforces the freeze.
pub fn apply_trainable_flags<F: Scalar>(
    model: &mut TransformerModel<F>,
    method: MethodKind,
    adapters: Option<&LoraAdapters>,
) {
    let values = model.memory.values;
    let adapter_ids: BTreeSet<usize> = adapters
        .map(|a| a.param_ids().iter().map(|id| id.index()).collect())
        .unwrap_or_default();
    for id in model.store.param_ids() {
        let is_adapter = adapter_ids.contains(&id.index());
        let trainable = match method {
            m if m.is_memory_method() => id == values,
            MethodKind::Full => !is_adapter,
            MethodKind::Lora => is_adapter,
            _ => unreachable!(),
        };
        model.store.get_mut(id).trainable = trainable;
    }
}

// ── Update steps ──

enum RowScorer<'a> {
    TfIdf(&'a BackgroundIndexStore),
    TfOnly,
    All,
}

fn memory_row_step<F: Scalar>(
    model: &mut TransformerModel<F>,
    batch: &Batch,
    scorer: RowScorer,
    t: Option<usize>,
    opt: &mut Optimizer<F>,
    method: MethodKind,
) -> Result<StepReport> {
    let mut tape = crate::numerics::Tape::new();
    let opts = ForwardOpts { record_accesses: true, adapters: None };
    let (loss, record) = model.forward_loss(&mut tape, batch, &opts)?;
    let loss_value = tape.scalar_value(loss)?;
    let record = record.expect("record_accesses was set");
    let counts = count_batch_accesses(std::slice::from_ref(&record));
    if counts.is_empty() {
        return Err(Error::Config("batch accessed no memory rows".into()));
    }

    let set: TrainableSet = match scorer {
        RowScorer::TfIdf(background) => {
            let scores = tfidf_scores(&counts, background);
            select_top_t(&scores, t.expect("validated"))?
        }
        RowScorer::TfOnly => {
            let scores = tf_only_scores(&counts);
            select_top_t(&scores, t.expect("validated"))?
        }
        RowScorer::All => {
            let scores = tf_only_scores(&counts);
            select_top_t(&scores, counts.len())?
        }
    };

    model.store.zero_grads();
    tape.backward(loss, &mut model.store)?;
    let values = model.memory.values;
    restrict_grads_to_rows(&mut model.store, values, &set.as_set());
    let grad_norm = grad_norm_rows(&model.store, values, &set.indices);
    opt.step_rows(&mut model.store, values, &set.indices);

    Ok(StepReport {
        step: opt.step_count(),
        method: method.to_string(),
        loss: loss_value,
        trainable: set.len(),
        lr: opt.lr(),
        grad_norm,
        trained_indices: Some(set.indices),
    })
}

/// TF-IDF-ranked sparse update of the memory value table.
pub fn sparse_memory_step<F: Scalar>(
    model: &mut TransformerModel<F>,
    batch: &Batch,
    background: &BackgroundIndexStore,
    t: usize,
    opt: &mut Optimizer<F>,
) -> Result<StepReport> {
    memory_row_step(model, batch, RowScorer::TfIdf(background), Some(t), opt, MethodKind::SparseMemory)
}

/// Ablation: rank by raw in-batch frequency, no background discounting.
pub fn memory_tf_only_step<F: Scalar>(
    model: &mut TransformerModel<F>,
    batch: &Batch,
    t: usize,
    opt: &mut Optimizer<F>,
) -> Result<StepReport> {
    memory_row_step(model, batch, RowScorer::TfOnly, Some(t), opt, MethodKind::MemoryTfOnly)
}

/// Naive baseline: update every memory row the batch accessed.
pub fn memory_all_step<F: Scalar>(
    model: &mut TransformerModel<F>,
    batch: &Batch,
    opt: &mut Optimizer<F>,
) -> Result<StepReport> {
    memory_row_step(model, batch, RowScorer::All, None, opt, MethodKind::MemoryAll)
}

/// Dense update of every base parameter.
pub fn full_step<F: Scalar>(
    model: &mut TransformerModel<F>,
    batch: &Batch,
    opt: &mut Optimizer<F>,
) -> Result<StepReport> {
    let mut tape = crate::numerics::Tape::new();
    let (loss, _) = model.forward_loss(&mut tape, batch, &ForwardOpts::default())?;
    let loss_value = tape.scalar_value(loss)?;
    model.store.zero_grads();
    tape.backward(loss, &mut model.store)?;
    let params = model.base_param_ids();
    let grad_norm = grad_norm_params(&model.store, &params);
    opt.step_dense(&mut model.store, &params);
    Ok(StepReport {
        step: opt.step_count(),
        method: MethodKind::Full.to_string(),
        loss: loss_value,
        trainable: scalar_count(&model.store, &params),
        lr: opt.lr(),
        grad_norm,
        trained_indices: None,
    })
}

/// Update only the adapter factors; the base model stays frozen.
pub fn lora_step<F: Scalar>(
    model: &mut TransformerModel<F>,
    adapters: &LoraAdapters,
    batch: &Batch,
    opt: &mut Optimizer<F>,
) -> Result<StepReport> {
    let mut tape = crate::numerics::Tape::new();
    let opts = ForwardOpts { record_accesses: false, adapters: Some(adapters) };
    let (loss, _) = model.forward_loss(&mut tape, batch, &opts)?;
    let loss_value = tape.scalar_value(loss)?;
    model.store.zero_grads();
    tape.backward(loss, &mut model.store)?;
    let params = adapters.param_ids();
    restrict_grads_to_params(&mut model.store, &params);
    let grad_norm = grad_norm_params(&model.store, &params);
    opt.step_dense(&mut model.store, &params);
    Ok(StepReport {
        step: opt.step_count(),
        method: MethodKind::Lora.to_string(),
        loss: loss_value,
        trainable: scalar_count(&model.store, &params),
        lr: opt.lr(),
        grad_norm,
        trained_indices: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::tiny_config;
    use crate::ranking::build_background_store;

    fn tiny_model() -> TransformerModel<f32> {
        TransformerModel::new(tiny_config()).unwrap()
    }

    fn batch_a() -> Batch {
        Batch::new(
            vec![vec![5, 6, 7, 8, 9, 10], vec![11, 12, 13, 14, 15, 16]],
            vec![vec![true; 6]; 2],
            vec![vec![false; 6]; 2],
        )
        .unwrap()
    }

    fn batch_b() -> Batch {
        Batch::new(
            vec![vec![1, 2, 3, 4, 5, 6], vec![17, 18, 19, 20, 21, 22]],
            vec![vec![true; 6]; 2],
            vec![vec![false; 6]; 2],
        )
        .unwrap()
    }

    fn background(model: &TransformerModel<f32>) -> BackgroundIndexStore {
        build_background_store(model, &[batch_a(), batch_b()], "test").unwrap()
    }

    fn snapshot_bits(store: &ParamStore<f32>) -> Vec<(String, Vec<u32>)> {
        store
            .iter()
            .map(|(_, p)| (p.name.clone(), p.value.data().iter().map(|v| v.to_bits()).collect()))
            .collect()
    }

    #[test]
    fn spec_validation_matrix() {
        let sgd = OptimizerConfig::sgd(0.1);
        let adamw = OptimizerConfig::adamw(1e-3, 0.1);
        let ok = |m: MethodSpec| m.validate().unwrap();
        let bad = |m: MethodSpec| assert!(m.validate().is_err());

        ok(MethodSpec { method: MethodKind::SparseMemory, t: Some(10), optimizer: sgd.clone(), lora: None });
        bad(MethodSpec { method: MethodKind::SparseMemory, t: None, optimizer: sgd.clone(), lora: None });
        bad(MethodSpec { method: MethodKind::SparseMemory, t: Some(0), optimizer: sgd.clone(), lora: None });
        ok(MethodSpec { method: MethodKind::MemoryTfOnly, t: Some(5), optimizer: sgd.clone(), lora: None });
        ok(MethodSpec { method: MethodKind::MemoryAll, t: None, optimizer: sgd.clone(), lora: None });
        bad(MethodSpec { method: MethodKind::MemoryAll, t: Some(3), optimizer: sgd.clone(), lora: None });
        ok(MethodSpec { method: MethodKind::Full, t: None, optimizer: adamw.clone(), lora: None });
        bad(MethodSpec {
            method: MethodKind::Full,
            t: None,
            optimizer: adamw.clone(),
            lora: Some(LoraConfig::default()),
        });
        ok(MethodSpec {
            method: MethodKind::Lora,
            t: None,
            optimizer: adamw.clone(),
            lora: Some(LoraConfig::default()),
        });
        bad(MethodSpec { method: MethodKind::Lora, t: None, optimizer: adamw, lora: None });
    }

    #[test]
    fn method_kind_round_trips_through_strings() {
        for kind in [
            MethodKind::SparseMemory,
            MethodKind::MemoryTfOnly,
            MethodKind::MemoryAll,
            MethodKind::Full,
            MethodKind::Lora,
        ] {
            assert_eq!(kind.as_str().parse::<MethodKind>().unwrap(), kind);
            let json = serde_json::to_string(&kind).unwrap();
            assert_eq!(json, format!("\"{}\"", kind.as_str()));
        }
        assert!("spicy_memory".parse::<MethodKind>().is_err());
    }

    #[test]
    fn sparse_step_touches_only_selected_value_rows() {
        let mut model = tiny_model();
        let bg = background(&model);
        let before = snapshot_bits(&model.store);
        let mut opt = Optimizer::new(OptimizerConfig::sgd(0.5)).unwrap();
        let report = sparse_memory_step(&mut model, &batch_a(), &bg, 2, &mut opt).unwrap();

        assert_eq!(report.method, "sparse_memory");
        assert!(report.loss.is_finite());
        assert!(report.grad_norm > 0.0);
        let trained = report.trained_indices.clone().unwrap();
        assert!(trained.len() <= 2 && !trained.is_empty());
        assert_eq!(report.trainable, trained.len());

        let after = snapshot_bits(&model.store);
        let width = model.config.memory.value_dim;
        for ((name, a), (_, b)) in before.iter().zip(after.iter()) {
            if name == "mem.values" {
                for (i, (x, y)) in a.iter().zip(b.iter()).enumerate() {
                    let row = (i / width) as u32;
                    if trained.contains(&row) {
                        continue;
                    }
                    assert_eq!(x, y, "untrained row {row} must stay bit-identical");
                }
                // the selected rows must actually move
                for &row in &trained {
                    let lo = row as usize * width;
                    assert!(
                        a[lo..lo + width] != b[lo..lo + width],
                        "trained row {row} never moved"
                    );
                }
            } else {
                assert_eq!(a, b, "parameter {name} must stay frozen");
            }
        }
    }

    #[test]
    fn reported_loss_matches_unmodified_forward() {
        // The step's loss must come from the same forward as plain inference on
        // the pre-update parameters: masking happens after backward.
        let mut model = tiny_model();
        let bg = background(&model);
        let probe = model.batch_nll(&batch_a(), None).unwrap();
        let mut opt = Optimizer::new(OptimizerConfig::sgd(0.1)).unwrap();
        let report = sparse_memory_step(&mut model, &batch_a(), &bg, 3, &mut opt).unwrap();
        assert_eq!(report.loss.to_bits(), probe.to_bits());
    }

    #[test]
    fn sparse_with_big_t_equals_memory_all_under_sgd() {
        let mut a = tiny_model();
        let mut b = tiny_model();
        let bg = background(&a);
        let mut opt_a = Optimizer::new(OptimizerConfig::sgd(0.3)).unwrap();
        let mut opt_b = Optimizer::new(OptimizerConfig::sgd(0.3)).unwrap();
        // t larger than any possible access count: same set, same SGD result.
        let ra = sparse_memory_step(&mut a, &batch_a(), &bg, 10_000, &mut opt_a).unwrap();
        let rb = memory_all_step(&mut b, &batch_a(), &mut opt_b).unwrap();
        assert_eq!(ra.trainable, rb.trainable);
        assert_eq!(snapshot_bits(&a.store), snapshot_bits(&b.store));
    }

    #[test]
    fn full_step_learns_a_fixed_batch() {
        let mut model = tiny_model();
        let mut opt = Optimizer::new(OptimizerConfig::adamw(5e-3, 0.0)).unwrap();
        let batch = batch_a();
        let first = full_step(&mut model, &batch, &mut opt).unwrap().loss;
        let mut last = first;
        for _ in 0..199 {
            last = full_step(&mut model, &batch, &mut opt).unwrap().loss;
        }
        assert!(
            last < 0.1 * first,
            "overfitting one batch should collapse the loss: {first} -> {last}"
        );
    }

    #[test]
    fn lora_step_moves_only_adapters() {
        let mut model = tiny_model();
        let adapters = lora_attach(&mut model, &LoraConfig { rank: 2, ..Default::default() }, 9).unwrap();
        let base_before: Vec<(String, Vec<u32>)> = snapshot_bits(&model.store)
            .into_iter()
            .filter(|(n, _)| !n.starts_with("lora."))
            .collect();
        let mut opt = Optimizer::new(OptimizerConfig::adamw(1e-2, 0.0)).unwrap();
        let batch = batch_a();
        let first = lora_step(&mut model, &adapters, &batch, &mut opt).unwrap();
        assert_eq!(first.trainable, scalar_count(&model.store, &adapters.param_ids()));
        let mut last = first.loss;
        for _ in 0..49 {
            last = lora_step(&mut model, &adapters, &batch, &mut opt).unwrap().loss;
        }
        assert!(last < first.loss, "adapters should learn: {} -> {last}", first.loss);

        let base_after: Vec<(String, Vec<u32>)> = snapshot_bits(&model.store)
            .into_iter()
            .filter(|(n, _)| !n.starts_with("lora."))
            .collect();
        assert_eq!(base_before, base_after, "base weights must stay frozen");
    }

    #[test]
    fn trainable_flags_follow_method() {
        let mut model = tiny_model();
        apply_trainable_flags(&mut model, MethodKind::SparseMemory, None);
        for (id, p) in model.store.iter() {
            assert_eq!(p.trainable, id == model.memory.values, "{}", p.name);
        }
        let adapters = lora_attach(&mut model, &LoraConfig::default(), 1).unwrap();
        apply_trainable_flags(&mut model, MethodKind::Lora, Some(&adapters));
        for (_, p) in model.store.iter() {
            assert_eq!(p.trainable, p.name.starts_with("lora."), "{}", p.name);
        }
    }
}
