//! Checkpoint files: config, parameters, background store, and RNG state in
//! one checksummed binary blob.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic "MEMFTCKP" | version u32 | sha256(config json) 32B | n_sections u32
//! then per section:
//!   name_len u16 | name | payload_len u64 | payload | sha256(payload) 32B
//! ```
//!
//! Sections appear in a fixed order: `config` (the JSON [`RunConfig`]),
//! `params` (every tensor in registration order), `background`, `rng`. Loading
//! verifies the magic, version, and every checksum before returning anything,
//! so a truncated or bit-flipped file fails loudly instead of producing a
//! half-restored model.

use std::collections::BTreeSet;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::TransformerModel;
use crate::numerics::{Dtype, Scalar, Tensor};
use crate::ranking::BackgroundIndexStore;

use super::config::RunConfig;

const MAGIC: &[u8; 8] = b"MEMFTCKP";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub struct SavedParam {
    pub name: String,
    pub shape: Vec<usize>,
    /// Raw little-endian scalar bytes.
    pub data: Vec<u8>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub dtype: Dtype,
    pub params: Vec<SavedParam>,
    pub background: BackgroundIndexStore,
    /// Pretraining batch-order RNG (key, counter) at save time.
    pub rng_state: (u64, u64),
}

// ── Writing ──

fn push_section(out: &mut Vec<u8>, name: &str, payload: &[u8]) {
    out.extend_from_slice(&(name.len() as u16).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    out.extend_from_slice(payload);
    out.extend_from_slice(Sha256::digest(payload).as_slice());
}

fn params_payload<F: Scalar>(model: &TransformerModel<F>) -> Vec<u8> {
    let mut out = Vec::new();
    let n = model.store.len() as u32;
    out.extend_from_slice(&n.to_le_bytes());
    for (_, p) in model.store.iter() {
        out.extend_from_slice(&(p.name.len() as u16).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        out.push(F::DTYPE.tag());
        let shape = p.value.shape();
        out.push(shape.len() as u8);
        for &d in shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        let start = out.len();
        out.extend_from_slice(&0u64.to_le_bytes());
        let before = out.len();
        F::write_le(p.value.data(), &mut out);
        let len = (out.len() - before) as u64;
        out[start..start + 8].copy_from_slice(&len.to_le_bytes());
    }
    out
}

pub fn checkpoint_bytes<F: Scalar>(
    config: &RunConfig,
    model: &TransformerModel<F>,
    background: &BackgroundIndexStore,
    rng_state: (u64, u64),
) -> Result<Vec<u8>> {
    let config_json = serde_json::to_vec(config)?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(Sha256::digest(&config_json).as_slice());
    out.extend_from_slice(&4u32.to_le_bytes());
    push_section(&mut out, "config", &config_json);
    push_section(&mut out, "params", &params_payload(model));
    push_section(&mut out, "background", &background.to_bytes());
    let mut rng = Vec::with_capacity(16);
    rng.extend_from_slice(&rng_state.0.to_le_bytes());
    rng.extend_from_slice(&rng_state.1.to_le_bytes());
    push_section(&mut out, "rng", &rng);
    Ok(out)
}

pub fn save_checkpoint<F: Scalar>(
    path: &Path,
    config: &RunConfig,
    model: &TransformerModel<F>,
    background: &BackgroundIndexStore,
    rng_state: (u64, u64),
) -> Result<()> {
    let bytes = checkpoint_bytes(config, model, background, rng_state)?;
    std::fs::write(path, bytes)?;
    Ok(())
}

// ── Reading ──

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.at + n > self.bytes.len() {
            return Err(Error::Checkpoint(format!(
                "truncated checkpoint: wanted {n} bytes at offset {}, file has {}",
                self.at,
                self.bytes.len()
            )));
        }
        let s = &self.bytes[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self) -> Result<u64> {
        let b = self.take(8)?;
        Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }

    fn done(&self) -> bool {
        self.at == self.bytes.len()
    }
}

fn read_section<'a>(r: &mut Reader<'a>, expect: &str) -> Result<&'a [u8]> {
    let name_len = r.u16()? as usize;
    let name = std::str::from_utf8(r.take(name_len)?)
        .map_err(|_| Error::Checkpoint("section name is not UTF-8".into()))?;
    if name != expect {
        return Err(Error::Checkpoint(format!("expected section {expect:?}, found {name:?}")));
    }
    let len = r.u64()? as usize;
    let payload = r.take(len)?;
    let digest = r.take(32)?;
    if Sha256::digest(payload).as_slice() != digest {
        return Err(Error::Checkpoint(format!("section {expect:?} fails its checksum")));
    }
    Ok(payload)
}

pub fn parse_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { bytes, at: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Checkpoint("not a memft checkpoint (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "checkpoint format version {version} unsupported (expected {FORMAT_VERSION})"
        )));
    }
    let header_digest = r.take(32)?.to_vec();
    let n_sections = r.u32()?;
    if n_sections != 4 {
        return Err(Error::Checkpoint(format!("expected 4 sections, found {n_sections}")));
    }

    let config_json = read_section(&mut r, "config")?;
    if Sha256::digest(config_json).as_slice() != header_digest {
        return Err(Error::Checkpoint("header config digest does not match config".into()));
    }
    let config: RunConfig = serde_json::from_slice(config_json)?;

    let params_bytes = read_section(&mut r, "params")?;
    let (dtype, params) = parse_params(params_bytes)?;

    let background = BackgroundIndexStore::from_bytes(read_section(&mut r, "background")?)?;

    let rng_bytes = read_section(&mut r, "rng")?;
    if rng_bytes.len() != 16 {
        return Err(Error::Checkpoint("rng section must be 16 bytes".into()));
    }
    let key = u64::from_le_bytes(rng_bytes[..8].try_into().expect("8 bytes"));
    let counter = u64::from_le_bytes(rng_bytes[8..].try_into().expect("8 bytes"));

    if !r.done() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes after the last section",
            bytes.len() - r.at
        )));
    }
    Ok(Checkpoint { config, dtype, params, background, rng_state: (key, counter) })
}

fn parse_params(bytes: &[u8]) -> Result<(Dtype, Vec<SavedParam>)> {
    let mut r = Reader { bytes, at: 0 };
    let n = r.u32()? as usize;
    if n == 0 {
        return Err(Error::Checkpoint("checkpoint contains no parameters".into()));
    }
    let mut dtype: Option<Dtype> = None;
    let mut params = Vec::with_capacity(n);
    for _ in 0..n {
        let name_len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?
            .to_string();
        let tag = Dtype::from_tag(r.take(1)?[0])?;
        match dtype {
            None => dtype = Some(tag),
            Some(d) if d == tag => {}
            Some(d) => {
                return Err(Error::Checkpoint(format!(
                    "mixed dtypes in checkpoint: {d} and {tag}"
                )))
            }
        }
        let ndim = r.take(1)?[0] as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u32()? as usize);
        }
        let len = r.u64()? as usize;
        let data = r.take(len)?.to_vec();
        let numel: usize = shape.iter().product();
        let width = match tag {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        };
        if numel * width != len {
            return Err(Error::Checkpoint(format!(
                "parameter {name}: {len} bytes does not match shape {shape:?}"
            )));
        }
        params.push(SavedParam { name, shape, data });
    }
    if !r.done() {
        return Err(Error::Checkpoint("trailing bytes in params section".into()));
    }
    Ok((dtype.expect("n > 0"), params))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path)?;
    parse_checkpoint(&bytes)
}

impl Checkpoint {
    /// Rebuild the model: fresh architecture from the stored config, then every
    /// tensor restored by name. Missing, extra, or reshaped parameters fail.
    pub fn build_model<F: Scalar>(&self) -> Result<TransformerModel<F>> {
        if F::DTYPE != self.dtype {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds {} parameters, requested {}",
                self.dtype,
                F::DTYPE
            )));
        }
        let mut model = TransformerModel::<F>::new(self.config.model.clone())?;
        let mut restored: BTreeSet<String> = BTreeSet::new();
        for sp in &self.params {
            let id = model.store.id(&sp.name).ok_or_else(|| {
                Error::Checkpoint(format!("checkpoint parameter {:?} unknown to model", sp.name))
            })?;
            let current = model.store.get(id).value.shape().to_vec();
            if current != sp.shape {
                return Err(Error::Checkpoint(format!(
                    "parameter {:?} has shape {:?} in checkpoint, {:?} in model",
                    sp.name, sp.shape, current
                )));
            }
            let data = F::read_le(&sp.data)?;
            model.store.get_mut(id).value = Tensor::new(sp.shape.clone(), data)?;
            restored.insert(sp.name.clone());
        }
        if restored.len() != model.store.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint restores {} of {} model parameters",
                restored.len(),
                model.store.len()
            )));
        }
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{tiny_config, Batch};
    use crate::ranking::build_background_store;

    fn setup() -> (RunConfig, TransformerModel<f32>, BackgroundIndexStore) {
        let mut run = RunConfig::default();
        run.model = tiny_config();
        let model = TransformerModel::<f32>::new(run.model.clone()).unwrap();
        let batch = Batch::new(
            vec![vec![5, 6, 7, 8], vec![9, 10, 11, 12]],
            vec![vec![true; 4]; 2],
            vec![vec![false; 4]; 2],
        )
        .unwrap();
        let bg = build_background_store(&model, &[batch], "pretrain").unwrap();
        (run, model, bg)
    }

    #[test]
    fn round_trip_restores_bit_identical_state() {
        let (run, model, bg) = setup();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("base.ckpt");
        save_checkpoint(&path, &run, &model, &bg, (123, 456)).unwrap();

        let ck = load_checkpoint(&path).unwrap();
        assert_eq!(ck.config, run);
        assert_eq!(ck.dtype, Dtype::F32);
        assert_eq!(ck.rng_state, (123, 456));
        assert_eq!(ck.background.to_bytes(), bg.to_bytes());

        let rebuilt: TransformerModel<f32> = ck.build_model().unwrap();
        for ((_, a), (_, b)) in model.store.iter().zip(rebuilt.store.iter()) {
            assert_eq!(a.name, b.name);
            let ba: Vec<u32> = a.value.data().iter().map(|v| v.to_bits()).collect();
            let bb: Vec<u32> = b.value.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(ba, bb, "{}", a.name);
        }

        // save(load(x)) is byte-identical to save(x)
        let bytes1 = std::fs::read(&path).unwrap();
        let bytes2 =
            checkpoint_bytes(&ck.config, &rebuilt, &ck.background, ck.rng_state).unwrap();
        assert_eq!(bytes1, bytes2);
    }

    #[test]
    fn truncation_and_corruption_fail_loudly() {
        let (run, model, bg) = setup();
        let bytes = checkpoint_bytes(&run, &model, &bg, (0, 0)).unwrap();

        for cut in [3usize, 11, 40, 60, bytes.len() / 2, bytes.len() - 1] {
            let err = parse_checkpoint(&bytes[..cut]).unwrap_err();
            assert!(matches!(err, Error::Checkpoint(_)), "cut at {cut}: {err:?}");
        }

        // flip one payload byte deep inside the params section
        let mut bad = bytes.clone();
        let mid = bytes.len() / 2;
        bad[mid] ^= 0x40;
        assert!(parse_checkpoint(&bad).is_err());

        let mut wrong_magic = bytes.clone();
        wrong_magic[0] = b'X';
        assert!(parse_checkpoint(&wrong_magic).is_err());

        let mut trailing = bytes;
        trailing.push(0);
        assert!(parse_checkpoint(&trailing).is_err());
    }

    #[test]
    fn dtype_mismatch_is_rejected() {
        let (run, model, bg) = setup();
        let bytes = checkpoint_bytes(&run, &model, &bg, (0, 0)).unwrap();
        let ck = parse_checkpoint(&bytes).unwrap();
        assert!(matches!(ck.build_model::<f64>(), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn config_model_mismatch_is_rejected() {
        let (run, model, bg) = setup();
        let bytes = checkpoint_bytes(&run, &model, &bg, (0, 0)).unwrap();
        let mut ck = parse_checkpoint(&bytes).unwrap();
        // claim a different architecture than the params describe
        ck.config.model.d_model = 16;
        assert!(ck.build_model::<f32>().is_err());
    }
}
