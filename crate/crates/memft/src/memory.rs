//! Product-key memory layer.
//!
//! A memory layer holds N value rows addressed by two half-key tables of √N
//! rows each. A query `q ∈ R^d` is split in half; each half is scored against
//! its table, the top-k half-indices are kept, and the k×k candidate grid is
//! re-scored by the composite sum `score(i1·√N + i2) = K_a[i1]·q[..d/2] +
//! K_b[i2]·q[d/2..]`. The global top-k of the grid is exactly the top-k over
//! all N composite scores (each composite score is a sum of one score from
//! each half, so any global winner's halves must themselves be in the half
//! top-k). Selected scores go through a softmax and mix the corresponding
//! value rows; a silu gate computed from the layer input modulates the result:
//!
//!   out = (Σ_i softmax(s)_i · V[i]) ⊙ silu(x·W_in) · W_out
//!
//! Ties break toward the lower flat index at both stages, which keeps
//! selection deterministic and makes the two-stage search agree with brute
//! force even on tied scores (flat order is lexicographic in (i1, i2)).
//!
//! Every forward can record which value rows each non-padded position touched;
//! those access records feed the TF-IDF ranking that decides which rows a
//! sparse finetuning step is allowed to update.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};

use crate::error::{Error, Result};
use crate::numerics::{ParamId, ParamStore, Scalar, Tape, Tensor, ValueId};

// ── Config ──────────────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct MemoryConfig {
    /// Number of value rows N; must be a perfect square.
    pub mem_size: usize,
    /// Slots selected per query position per head.
    pub topk: usize,
    /// Independent query/key heads sharing one value table.
    pub n_heads: usize,
    /// Query/key dimension d; split in half across the two key tables.
    pub key_dim: usize,
    /// Width of each value row.
    pub value_dim: usize,
}

impl Default for MemoryConfig {
    fn default() -> Self {
        MemoryConfig {
            mem_size: 4096,
            topk: 8,
            n_heads: 2,
            key_dim: 32,
            value_dim: 64,
        }
    }
}

impl MemoryConfig {
    pub fn validate(&self) -> Result<()> {
        if self.mem_size == 0 || self.topk == 0 || self.n_heads == 0 || self.key_dim == 0 || self.value_dim == 0 {
            return Err(Error::Config("memory config fields must be positive".into()));
        }
        let sn = self.sqrt_n();
        if sn * sn != self.mem_size {
            return Err(Error::Config(format!(
                "mem_size {} is not a perfect square",
                self.mem_size
            )));
        }
        if self.key_dim % 2 != 0 {
            return Err(Error::Config(format!("key_dim {} must be even", self.key_dim)));
        }
        if self.topk > sn {
            return Err(Error::Config(format!(
                "topk {} exceeds sqrt(mem_size) {}",
                self.topk, sn
            )));
        }
        Ok(())
    }

    pub fn sqrt_n(&self) -> usize {
        (self.mem_size as f64).sqrt().round() as usize
    }
}

// ── Access records ──────────────────────────────────────────────────────────

/// The slots one (sequence, position, head) triple touched in a forward pass.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct AccessEntry {
    pub seq: usize,
    pub pos: usize,
    pub head: usize,
    /// Flat value-row indices in selection order (score desc, index asc).
    pub indices: Vec<u32>,
    /// Softmax weights aligned with `indices`; they sum to 1.
    pub weights: Vec<f64>,
}

/// All accesses of one batch forward pass. Padded positions are never recorded.
#[derive(Debug, Clone, Default, PartialEq, serde::Serialize)]
pub struct AccessRecord {
    pub topk: usize,
    pub entries: Vec<AccessEntry>,
}

impl AccessRecord {
    pub fn new(topk: usize) -> Self {
        AccessRecord { topk, entries: Vec::new() }
    }

    /// Distinct indices accessed anywhere in the batch.
    pub fn index_set(&self) -> BTreeSet<u32> {
        self.entries.iter().flat_map(|e| e.indices.iter().copied()).collect()
    }

    /// Distinct indices accessed by one sequence of the batch.
    pub fn index_set_for_seq(&self, seq: usize) -> BTreeSet<u32> {
        self.entries
            .iter()
            .filter(|e| e.seq == seq)
            .flat_map(|e| e.indices.iter().copied())
            .collect()
    }
}

/// Access frequencies accumulated over the forward passes of one batch.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct BatchAccessCounts {
    counts: BTreeMap<u32, u64>,
}

impl BatchAccessCounts {
    pub fn get(&self, index: u32) -> u64 {
        self.counts.get(&index).copied().unwrap_or(0)
    }

    pub fn total(&self) -> u64 {
        self.counts.values().sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (u32, u64)> + '_ {
        self.counts.iter().map(|(&i, &c)| (i, c))
    }

    pub fn len(&self) -> usize {
        self.counts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }

    pub fn indices(&self) -> impl Iterator<Item = u32> + '_ {
        self.counts.keys().copied()
    }
}

/// Tally how often each value row was accessed across `records` (typically the
/// single record of one batch forward). Each appearance of an index at some
/// (sequence, position, head) counts once.
pub fn count_batch_accesses(records: &[AccessRecord]) -> BatchAccessCounts {
    let mut counts = BTreeMap::new();
    for rec in records {
        for entry in &rec.entries {
            for &i in &entry.indices {
                *counts.entry(i).or_insert(0u64) += 1;
            }
        }
    }
    BatchAccessCounts { counts }
}

// ── Top-k selection ─────────────────────────────────────────────────────────

/// Order half/composite scores: descending score, ascending index on ties.
fn score_order<F: Scalar>(si: F, i: usize, sj: F, j: usize) -> Ordering {
    match sj.partial_cmp(&si) {
        Some(Ordering::Equal) | None => i.cmp(&j),
        Some(o) => o,
    }
}

fn top_k_half<F: Scalar>(scores: &[F], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_unstable_by(|&i, &j| score_order(scores[i], i, scores[j], j));
    idx.truncate(k);
    idx
}

/// Exact top-k of the N composite product-key scores for a single query.
///
/// Returns the selected flat indices (ordered score desc, flat asc) and their
/// composite scores. `query` has length `key_dim`; `keys_a`/`keys_b` are the
/// [√N × key_dim/2] half tables.
pub fn product_key_topk<F: Scalar>(
    query: &[F],
    keys_a: &Tensor<F>,
    keys_b: &Tensor<F>,
    k: usize,
) -> Result<(Vec<u32>, Vec<F>)> {
    let (sn, half) = keys_a.dims2()?;
    let (sn_b, half_b) = keys_b.dims2()?;
    if sn != sn_b || half != half_b || query.len() != 2 * half {
        return Err(Error::ShapeMismatch {
            op: "product_key_topk",
            lhs: vec![sn, half, query.len()],
            rhs: vec![sn_b, half_b],
        });
    }
    if k == 0 || k > sn {
        return Err(Error::Config(format!("topk {k} not in 1..=sqrt_n {sn}")));
    }

    let (qa, qb) = query.split_at(half);
    let mut sa = vec![F::zero(); sn];
    let mut sb = vec![F::zero(); sn];
    for i in 0..sn {
        let ra = keys_a.row(i);
        let rb = keys_b.row(i);
        let mut da = F::zero();
        let mut db = F::zero();
        for p in 0..half {
            da += ra[p] * qa[p];
            db += rb[p] * qb[p];
        }
        sa[i] = da;
        sb[i] = db;
    }

    let ta = top_k_half(&sa, k);
    let tb = top_k_half(&sb, k);

    // k² candidate grid, then global (score desc, flat asc) order.
    let mut cand: Vec<(usize, F)> = Vec::with_capacity(k * k);
    for &i1 in &ta {
        for &i2 in &tb {
            cand.push((i1 * sn + i2, sa[i1] + sb[i2]));
        }
    }
    cand.sort_unstable_by(|a, b| score_order(a.1, a.0, b.1, b.0));
    cand.truncate(k);

    let indices = cand.iter().map(|&(f, _)| f as u32).collect();
    let scores = cand.iter().map(|&(_, s)| s).collect();
    Ok((indices, scores))
}

// ── The layer ───────────────────────────────────────────────────────────────

/// One head's parameter handles.
#[derive(Debug, Clone)]
pub struct MemoryHeadParams {
    /// Query projection, [d_model × key_dim].
    pub query: ParamId,
    /// Half-key tables, [√N × key_dim/2] each.
    pub keys_a: ParamId,
    pub keys_b: ParamId,
}

/// Parameter handles of a memory layer inside some [`ParamStore`].
#[derive(Debug, Clone)]
pub struct MemoryLayerParams {
    pub config: MemoryConfig,
    pub heads: Vec<MemoryHeadParams>,
    /// The value table, [N × value_dim] — the only tensor sparse memory
    /// finetuning is allowed to touch.
    pub values: ParamId,
    /// Gate projections: in [d_model × value_dim], out [value_dim × d_model].
    pub gate_in: ParamId,
    pub gate_out: ParamId,
}

/// Run the memory layer on `x` ([T × d_model], already normed by the caller).
///
/// `pad` marks padding positions (length T); their accesses are excluded from
/// `record`, but their activations are still computed so shapes stay uniform.
/// When `record` is `Some`, one [`AccessEntry`] per (non-pad position × head)
/// is appended with `seq` as the sequence label. Recording reads values only
/// and never changes the arithmetic.
pub fn memory_forward<F: Scalar>(
    tape: &mut Tape<F>,
    store: &ParamStore<F>,
    params: &MemoryLayerParams,
    x: ValueId,
    pad: &[bool],
    seq: usize,
    mut record: Option<&mut AccessRecord>,
) -> Result<ValueId> {
    let cfg = &params.config;
    let (t_rows, _d_model) = tape.value(x).dims2()?;
    if pad.len() != t_rows {
        return Err(Error::ShapeMismatch {
            op: "memory_forward",
            lhs: vec![t_rows],
            rhs: vec![pad.len()],
        });
    }
    let k = cfg.topk;

    let values_id = tape.param(store, params.values);
    let gate_in = tape.param(store, params.gate_in);
    let gate_out = tape.param(store, params.gate_out);

    let mut y_sum: Option<ValueId> = None;
    for (h, head) in params.heads.iter().enumerate() {
        let wq = tape.param(store, head.query);
        let q = tape.matmul(x, wq)?; // [T × key_dim]

        // Hard selection reads plain values; gradients only flow through the
        // composite scores of the selected slots.
        let keys_a_val = store.value(head.keys_a);
        let keys_b_val = store.value(head.keys_b);
        let mut flat = Vec::with_capacity(t_rows * k);
        for t in 0..t_rows {
            let (idx, _) = product_key_topk(tape.value(q).row(t), keys_a_val, keys_b_val, k)?;
            flat.extend(idx);
        }

        let ka = tape.param(store, head.keys_a);
        let kb = tape.param(store, head.keys_b);
        let sel = tape.memory_scores(q, ka, kb, &flat, k)?;
        let w = tape.softmax_rows(sel)?;

        if let Some(rec) = record.as_deref_mut() {
            let wv = tape.value(w);
            for t in 0..t_rows {
                if pad[t] {
                    continue;
                }
                rec.entries.push(AccessEntry {
                    seq,
                    pos: t,
                    head: h,
                    indices: flat[t * k..(t + 1) * k].to_vec(),
                    weights: wv.row(t).iter().map(|&v| v.to_f64()).collect(),
                });
            }
        }

        let y_h = tape.memory_mix(values_id, w, &flat)?; // [T × value_dim]
        y_sum = Some(match y_sum {
            None => y_h,
            Some(acc) => tape.add(acc, y_h)?,
        });
    }
    let y = y_sum.expect("n_heads >= 1 enforced by config validation");

    let gate_pre = tape.matmul(x, gate_in)?;
    let gate = tape.silu(gate_pre);
    let gated = tape.mul(y, gate)?;
    tape.matmul(gated, gate_out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::CounterRng;

    fn rand_tensor(rng: &mut CounterRng, shape: Vec<usize>, scale: f64) -> Tensor<f64> {
        let n: usize = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.normal() * scale).collect()).unwrap()
    }

    /// Independent oracle: score all N slots, order (score desc, flat asc).
    fn brute_force_topk(
        query: &[f64],
        keys_a: &Tensor<f64>,
        keys_b: &Tensor<f64>,
        k: usize,
    ) -> Vec<u32> {
        let (sn, half) = keys_a.dims2().unwrap();
        let (qa, qb) = query.split_at(half);
        let mut scored: Vec<(u32, f64)> = (0..sn * sn)
            .map(|f| {
                let (i1, i2) = (f / sn, f % sn);
                let s: f64 = keys_a.row(i1).iter().zip(qa).map(|(a, b)| a * b).sum::<f64>()
                    + keys_b.row(i2).iter().zip(qb).map(|(a, b)| a * b).sum::<f64>();
                (f as u32, s)
            })
            .collect();
        scored.sort_by(|x, y| y.1.partial_cmp(&x.1).unwrap().then(x.0.cmp(&y.0)));
        scored.truncate(k);
        scored.into_iter().map(|(f, _)| f).collect()
    }

    #[test]
    fn config_validation() {
        assert!(MemoryConfig::default().validate().is_ok());
        let mut c = MemoryConfig::default();
        c.mem_size = 4095; // not a square
        assert!(c.validate().is_err());
        let mut c = MemoryConfig::default();
        c.topk = 65; // > sqrt(4096)
        assert!(c.validate().is_err());
        let mut c = MemoryConfig::default();
        c.key_dim = 31;
        assert!(c.validate().is_err());
        let mut c = MemoryConfig::default();
        c.mem_size = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn topk_matches_brute_force_on_random_instances() {
        let mut rng = CounterRng::new(21, 1);
        let sn = 8;
        let half = 4;
        for case in 0..200 {
            let ka = rand_tensor(&mut rng, vec![sn, half], 1.0);
            let kb = rand_tensor(&mut rng, vec![sn, half], 1.0);
            let q: Vec<f64> = (0..2 * half).map(|_| rng.normal()).collect();
            for &k in &[1usize, 3, 8] {
                let (got, scores) = product_key_topk(&q, &ka, &kb, k).unwrap();
                let want = brute_force_topk(&q, &ka, &kb, k);
                assert_eq!(got, want, "case {case} k {k}");
                for w in scores.windows(2) {
                    assert!(w[0] >= w[1], "scores must be non-increasing");
                }
            }
        }
    }

    #[test]
    fn topk_ties_break_toward_lower_flat_index() {
        // All keys identical → all N composite scores equal → winners must be
        // flat indices 0..k in order.
        let sn = 4;
        let half = 2;
        let ka = Tensor::new(vec![sn, half], vec![0.5; sn * half]).unwrap();
        let kb = Tensor::new(vec![sn, half], vec![-0.25; sn * half]).unwrap();
        let q = vec![1.0, 2.0, 3.0, 4.0];
        let (got, _) = product_key_topk(&q, &ka, &kb, 3).unwrap();
        assert_eq!(got, vec![0, 1, 2]);
        assert_eq!(got, brute_force_topk(&q, &ka, &kb, 3));
    }

    #[test]
    fn topk_partial_ties_match_brute_force() {
        // Duplicate key rows create tied blocks without making everything equal.
        let mut rng = CounterRng::new(22, 1);
        let sn = 6;
        let half = 3;
        for case in 0..100 {
            let mut ka = rand_tensor(&mut rng, vec![sn, half], 1.0);
            let mut kb = rand_tensor(&mut rng, vec![sn, half], 1.0);
            // Force rows {0,3} of ka and {1,4} of kb identical.
            for p in 0..half {
                let a0 = ka.at2(0, p);
                ka.data_mut()[3 * half + p] = a0;
                let b1 = kb.at2(1, p);
                kb.data_mut()[4 * half + p] = b1;
            }
            let q: Vec<f64> = (0..2 * half).map(|_| rng.normal()).collect();
            for &k in &[2usize, 4, 6] {
                let (got, _) = product_key_topk(&q, &ka, &kb, k).unwrap();
                assert_eq!(got, brute_force_topk(&q, &ka, &kb, k), "case {case} k {k}");
            }
        }
    }

    #[test]
    fn topk_rejects_bad_k() {
        let ka = Tensor::<f64>::zeros(vec![4, 2]);
        let kb = Tensor::<f64>::zeros(vec![4, 2]);
        let q = vec![0.0; 4];
        assert!(product_key_topk(&q, &ka, &kb, 0).is_err());
        assert!(product_key_topk(&q, &ka, &kb, 5).is_err());
    }

    #[test]
    fn count_batch_accesses_tallies_every_slot_mention() {
        let rec = AccessRecord {
            topk: 2,
            entries: vec![
                AccessEntry { seq: 0, pos: 0, head: 0, indices: vec![5, 9], weights: vec![0.6, 0.4] },
                AccessEntry { seq: 0, pos: 1, head: 0, indices: vec![9, 2], weights: vec![0.7, 0.3] },
                AccessEntry { seq: 1, pos: 0, head: 1, indices: vec![9, 5], weights: vec![0.5, 0.5] },
            ],
        };
        let counts = count_batch_accesses(&[rec.clone()]);
        assert_eq!(counts.get(9), 3);
        assert_eq!(counts.get(5), 2);
        assert_eq!(counts.get(2), 1);
        assert_eq!(counts.get(1234), 0);
        assert_eq!(counts.total(), 6);
        assert_eq!(rec.index_set_for_seq(1), [5u32, 9].into_iter().collect());
    }

    // ── layer-level tests need a small parameter set ────────────────────────

    fn tiny_layer(rng: &mut CounterRng) -> (ParamStore<f64>, MemoryLayerParams) {
        let cfg = MemoryConfig { mem_size: 16, topk: 3, n_heads: 2, key_dim: 6, value_dim: 5 };
        cfg.validate().unwrap();
        let d_model = 7;
        let sn = cfg.sqrt_n();
        let mut store = ParamStore::new();
        let mut heads = Vec::new();
        for h in 0..cfg.n_heads {
            heads.push(MemoryHeadParams {
                query: store
                    .add(&format!("mem.head{h}.query"), rand_tensor(rng, vec![d_model, cfg.key_dim], 0.4))
                    .unwrap(),
                keys_a: store
                    .add(&format!("mem.head{h}.keys_a"), rand_tensor(rng, vec![sn, cfg.key_dim / 2], 0.5))
                    .unwrap(),
                keys_b: store
                    .add(&format!("mem.head{h}.keys_b"), rand_tensor(rng, vec![sn, cfg.key_dim / 2], 0.5))
                    .unwrap(),
            });
        }
        let values = store.add("mem.values", rand_tensor(rng, vec![cfg.mem_size, cfg.value_dim], 0.3)).unwrap();
        let gate_in = store.add("mem.gate_in", rand_tensor(rng, vec![d_model, cfg.value_dim], 0.4)).unwrap();
        let gate_out = store.add("mem.gate_out", rand_tensor(rng, vec![cfg.value_dim, d_model], 0.4)).unwrap();
        let params = MemoryLayerParams { config: cfg, heads, values, gate_in, gate_out };
        (store, params)
    }

    #[test]
    fn forward_shape_records_and_pad_exclusion() {
        let mut rng = CounterRng::new(23, 1);
        let (store, params) = tiny_layer(&mut rng);
        let x = rand_tensor(&mut rng, vec![4, 7], 1.0);
        let pad = vec![false, false, true, true];

        let mut tape = Tape::new();
        let ix = tape.constant(x);
        let mut rec = AccessRecord::new(params.config.topk);
        let out = memory_forward(&mut tape, &store, &params, ix, &pad, 3, Some(&mut rec)).unwrap();
        assert_eq!(tape.value(out).shape(), &[4, 7]);

        // 2 non-pad positions × 2 heads
        assert_eq!(rec.entries.len(), 4);
        for e in &rec.entries {
            assert_eq!(e.seq, 3);
            assert!(e.pos < 2, "padded positions must not be recorded");
            assert_eq!(e.indices.len(), 3);
            let s: f64 = e.weights.iter().sum();
            assert!((s - 1.0).abs() < 1e-12, "weights sum {s}");
        }
    }

    #[test]
    fn recording_does_not_change_the_output() {
        let mut rng = CounterRng::new(24, 1);
        let (store, params) = tiny_layer(&mut rng);
        let x = rand_tensor(&mut rng, vec![3, 7], 1.0);
        let pad = vec![false; 3];

        let mut t1 = Tape::new();
        let ix1 = t1.constant(x.clone());
        let o1 = memory_forward(&mut t1, &store, &params, ix1, &pad, 0, None).unwrap();

        let mut t2 = Tape::new();
        let ix2 = t2.constant(x);
        let mut rec = AccessRecord::new(params.config.topk);
        let o2 = memory_forward(&mut t2, &store, &params, ix2, &pad, 0, Some(&mut rec)).unwrap();

        let a: Vec<u64> = t1.value(o1).data().iter().map(|v| v.to_bits()).collect();
        let b: Vec<u64> = t2.value(o2).data().iter().map(|v| v.to_bits()).collect();
        assert_eq!(a, b);
        assert!(!rec.entries.is_empty());
    }

    #[test]
    fn layer_gradients_check_against_finite_differences() {
        use crate::numerics::finite_diff_check;
        let mut rng = CounterRng::new(25, 1);
        let (mut store, params) = tiny_layer(&mut rng);
        let x = rand_tensor(&mut rng, vec![3, 7], 1.0);
        let pad = vec![false; 3];
        let all: Vec<ParamId> = store.param_ids();
        let reports = finite_diff_check(
            &mut store,
            &all,
            |tape, store| {
                let ix = tape.constant(x.clone());
                let out = memory_forward(tape, store, &params, ix, &pad, 0, None)?;
                let sq = tape.mul(out, out)?;
                Ok(tape.sum_all(sq))
            },
            1e-4,
            40,
            9,
        )
        .unwrap();
        for r in &reports {
            assert!(
                r.max_rel_err < 1e-6,
                "{} rel err {}",
                r.parameter,
                r.max_rel_err
            );
        }
    }
}
