//! Low-rank adapters over the transformer's linear maps.
//!
//! Each adapted weight W ("in × out") gains a pair A ("in × r"), B ("r × out")
//! and the effective map becomes `x·W + (alpha/r)·(x·A)·B`. A is Gaussian, B is
//! zero, so attaching adapters leaves the initial forward pass unchanged. The
//! adapter tensors are registered in the model's own parameter store under
//! `lora.`-prefixed names; [`crate::model::TransformerModel::base_param_ids`]
//! filters them out, and the LoRA training step updates only them.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::model::TransformerModel;
use crate::numerics::{ParamId, Scalar, Tensor};
use crate::rng::{CounterRng, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LoraTarget {
    /// Every linear map: attention projections plus both FFN matrices.
    AllLinear,
    /// Only the four attention projections per block.
    AttentionOnly,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
    pub target: LoraTarget,
}

impl Default for LoraConfig {
    fn default() -> Self {
        LoraConfig { rank: 4, alpha: 8.0, target: LoraTarget::AllLinear }
    }
}

impl LoraConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rank == 0 {
            return Err(Error::Config("lora rank must be at least 1".into()));
        }
        if !(self.alpha > 0.0) {
            return Err(Error::Config("lora alpha must be positive".into()));
        }
        Ok(())
    }
}

/// One adapted weight: ids of its A/B factors and the `alpha/r` scale.
#[derive(Debug, Clone, Copy)]
pub struct LoraEntry {
    pub a: ParamId,
    pub b: ParamId,
    pub scale: f64,
}

/// Map from adapted base weights to their adapter factors.
#[derive(Debug, Clone)]
pub struct LoraAdapters {
    entries: BTreeMap<usize, LoraEntry>,
    config: LoraConfig,
}

impl LoraAdapters {
    pub fn entry_for(&self, target: ParamId) -> Option<&LoraEntry> {
        self.entries.get(&target.index())
    }

    pub fn config(&self) -> &LoraConfig {
        &self.config
    }

    pub fn num_adapted(&self) -> usize {
        self.entries.len()
    }

    /// All adapter parameter ids, in a stable order.
    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut out = Vec::with_capacity(self.entries.len() * 2);
        for e in self.entries.values() {
            out.push(e.a);
            out.push(e.b);
        }
        out
    }
}

fn is_target(name: &str, target: LoraTarget) -> bool {
    let attn = name.contains(".attn.w");
    let ffn = name.contains(".ffn.fc");
    match target {
        LoraTarget::AttentionOnly => attn,
        LoraTarget::AllLinear => attn || ffn,
    }
}

/// Register adapter tensors for every targeted weight and return the handle
/// map. A second attach on the same model fails on the duplicate `lora.` names.
pub fn lora_attach<F: Scalar>(
    model: &mut TransformerModel<F>,
    config: &LoraConfig,
    seed: u64,
) -> Result<LoraAdapters> {
    config.validate()?;
    let mut rng = CounterRng::from_stream(seed, Stream::LoraInit);
    let targets: Vec<(ParamId, String, usize, usize)> = model
        .store
        .iter()
        .filter(|(_, p)| is_target(&p.name, config.target))
        .map(|(id, p)| {
            let (rows, cols) = p.value.dims2().expect("linear weights are 2-D");
            (id, p.name.clone(), rows, cols)
        })
        .collect();
    if targets.is_empty() {
        return Err(Error::Config("lora target set matched no weights".into()));
    }
    let mut entries = BTreeMap::new();
    for (id, name, rows, cols) in targets {
        let r = config.rank;
        if r > rows.min(cols) {
            return Err(Error::Config(format!(
                "lora rank {r} exceeds min dimension of {name} ({rows}x{cols})"
            )));
        }
        // A gets the usual small Gaussian init; B starts at zero so the
        // adapter's initial contribution vanishes.
        let std = 0.02;
        let a_data: Vec<F> = (0..rows * r).map(|_| F::from_f64(rng.normal() * std)).collect();
        let a = model.store.add(&format!("lora.{name}.a"), Tensor::new(vec![rows, r], a_data)?)?;
        let b = model.store.add(&format!("lora.{name}.b"), Tensor::zeros(vec![r, cols]))?;
        entries.insert(
            id.index(),
            LoraEntry { a, b, scale: config.alpha / config.rank as f64 },
        );
    }
    Ok(LoraAdapters { entries, config: config.clone() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{tiny_config, Batch};

    fn tiny_batch() -> Batch {
        Batch::new(
            vec![vec![5, 6, 7, 8, 9, 10], vec![11, 12, 13, 14, 15, 16]],
            vec![vec![true; 6]; 2],
            vec![vec![false; 6]; 2],
        )
        .unwrap()
    }

    #[test]
    fn attach_registers_expected_matrices() {
        let cfg = tiny_config();
        let n_layers = cfg.n_layers;
        let mut model = TransformerModel::<f32>::new(cfg.clone()).unwrap();
        let adapters =
            lora_attach(&mut model, &LoraConfig { rank: 2, ..Default::default() }, 3).unwrap();
        // all_linear: 4 attention mats per block, 2 FFN mats per non-memory block
        let expect = 4 * n_layers + 2 * (n_layers - 1);
        assert_eq!(adapters.num_adapted(), expect);
        assert_eq!(adapters.param_ids().len(), 2 * expect);

        let mut model2 = TransformerModel::<f32>::new(cfg).unwrap();
        let attn_only = lora_attach(
            &mut model2,
            &LoraConfig { rank: 2, target: LoraTarget::AttentionOnly, ..Default::default() },
            3,
        )
        .unwrap();
        assert_eq!(attn_only.num_adapted(), 4 * n_layers);
    }

    #[test]
    fn adapter_params_are_excluded_from_base_ids() {
        let mut model = TransformerModel::<f32>::new(tiny_config()).unwrap();
        let before = model.base_param_ids();
        let adapters =
            lora_attach(&mut model, &LoraConfig { rank: 2, ..Default::default() }, 3).unwrap();
        let after = model.base_param_ids();
        assert_eq!(before.len(), after.len(), "base id set must not grow");
        let base: std::collections::BTreeSet<usize> =
            after.iter().map(|id| id.index()).collect();
        for id in adapters.param_ids() {
            assert!(!base.contains(&id.index()));
        }
    }

    #[test]
    fn zero_init_delta_keeps_loss_bit_identical() {
        let mut model = TransformerModel::<f32>::new(tiny_config()).unwrap();
        let batch = tiny_batch();
        let before = model.batch_nll(&batch, None).unwrap();
        let adapters =
            lora_attach(&mut model, &LoraConfig { rank: 2, ..Default::default() }, 3).unwrap();
        let after = model.batch_nll(&batch, Some(&adapters)).unwrap();
        assert_eq!(before.to_bits(), after.to_bits(), "B = 0 must not move the loss");
    }

    #[test]
    fn rank_too_large_is_rejected() {
        let mut model = TransformerModel::<f32>::new(tiny_config()).unwrap();
        let err = lora_attach(&mut model, &LoraConfig { rank: 4096, ..Default::default() }, 3);
        assert!(matches!(err, Err(Error::Config(_))));
    }

    #[test]
    fn double_attach_fails_on_duplicate_names() {
        let mut model = TransformerModel::<f32>::new(tiny_config()).unwrap();
        lora_attach(&mut model, &LoraConfig::default(), 3).unwrap();
        assert!(lora_attach(&mut model, &LoraConfig::default(), 4).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(LoraConfig { rank: 0, ..Default::default() }.validate().is_err());
        assert!(LoraConfig { alpha: 0.0, ..Default::default() }.validate().is_err());
        assert!(LoraConfig::default().validate().is_ok());
    }
}
