//! TF-IDF ranking of accessed memory slots.
//!
//! Sparse memory finetuning only updates value rows that are *specific* to the
//! current batch: frequently accessed here, rarely accessed on generic data.
//! The background side is a frozen [`BackgroundIndexStore`] — per-slot document
//! frequencies counted over B held-out background batches — built once after
//! pretraining and carried in checkpoints. Per batch,
//!
//!   score(i) = c(i)/Σ_j c(j) · ln((B + 1) / (df(i) + 1))
//!
//! with natural log and +1 smoothing on both sides of the fraction, so slots
//! unseen in the background data still get a finite, large idf. The top-t
//! scored slots become the [`TrainableSet`] for that step, ordered score
//! descending with index-ascending tie breaks — fully deterministic.

use std::collections::{BTreeMap, BTreeSet};

use crate::error::{Error, Result};
use crate::memory::BatchAccessCounts;
use crate::model::{Batch, TransformerModel};
use crate::numerics::Scalar;

// ── Background store ────────────────────────────────────────────────────────

/// Frozen per-slot document frequencies over a background corpus.
///
/// Immutable by construction: build it once with [`build_background_store`] (or
/// deserialize it) and it never changes afterwards.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BackgroundIndexStore {
    doc_freq: BTreeMap<u32, u32>,
    num_batches: u32,
    corpus_label: String,
}

impl BackgroundIndexStore {
    pub fn from_batch_counts(per_batch: &[BatchAccessCounts], corpus_label: &str) -> Self {
        let mut doc_freq: BTreeMap<u32, u32> = BTreeMap::new();
        for counts in per_batch {
            for idx in counts.indices() {
                // Document frequency: in how many batches the slot appears at
                // all, not how often.
                *doc_freq.entry(idx).or_insert(0) += 1;
            }
        }
        BackgroundIndexStore {
            doc_freq,
            num_batches: per_batch.len() as u32,
            corpus_label: corpus_label.to_string(),
        }
    }

    pub fn doc_freq(&self, index: u32) -> u32 {
        self.doc_freq.get(&index).copied().unwrap_or(0)
    }

    pub fn num_batches(&self) -> u32 {
        self.num_batches
    }

    pub fn corpus_label(&self) -> &str {
        &self.corpus_label
    }

    pub fn num_tracked(&self) -> usize {
        self.doc_freq.len()
    }

    /// Deterministic byte encoding (sorted by index) for checkpoints.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&self.num_batches.to_le_bytes());
        let label = self.corpus_label.as_bytes();
        out.extend_from_slice(&(label.len() as u32).to_le_bytes());
        out.extend_from_slice(label);
        out.extend_from_slice(&(self.doc_freq.len() as u32).to_le_bytes());
        for (&idx, &df) in &self.doc_freq {
            out.extend_from_slice(&idx.to_le_bytes());
            out.extend_from_slice(&df.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let err = |m: &str| Error::Checkpoint(format!("background store: {m}"));
        let mut off = 0usize;
        let mut take = |n: usize| -> Result<&[u8]> {
            if off + n > bytes.len() {
                return Err(err("truncated"));
            }
            let s = &bytes[off..off + n];
            off += n;
            Ok(s)
        };
        let num_batches = u32::from_le_bytes(take(4)?.try_into().unwrap());
        let label_len = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        let corpus_label = String::from_utf8(take(label_len)?.to_vec())
            .map_err(|_| err("label not utf-8"))?;
        let n = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        let mut doc_freq = BTreeMap::new();
        for _ in 0..n {
            let idx = u32::from_le_bytes(take(4)?.try_into().unwrap());
            let df = u32::from_le_bytes(take(4)?.try_into().unwrap());
            doc_freq.insert(idx, df);
        }
        if off != bytes.len() {
            return Err(err("trailing bytes"));
        }
        Ok(BackgroundIndexStore { doc_freq, num_batches, corpus_label })
    }
}

/// Run the model over `batches` (forward only, accesses recorded) and freeze
/// the per-slot document frequencies.
pub fn build_background_store<F: Scalar>(
    model: &TransformerModel<F>,
    batches: &[Batch],
    corpus_label: &str,
) -> Result<BackgroundIndexStore> {
    if batches.is_empty() {
        return Err(Error::Config("background store needs at least one batch".into()));
    }
    let mut per_batch = Vec::with_capacity(batches.len());
    for batch in batches {
        let record = model.batch_access_record(batch)?;
        per_batch.push(crate::memory::count_batch_accesses(&[record]));
    }
    Ok(BackgroundIndexStore::from_batch_counts(&per_batch, corpus_label))
}

// ── Scores ──────────────────────────────────────────────────────────────────

/// TF-IDF score for every slot accessed in the batch.
pub fn tfidf_scores(
    counts: &BatchAccessCounts,
    store: &BackgroundIndexStore,
) -> BTreeMap<u32, f64> {
    let total = counts.total();
    if total == 0 {
        return BTreeMap::new();
    }
    let b = store.num_batches() as f64;
    counts
        .iter()
        .map(|(idx, c)| {
            let tf = c as f64 / total as f64;
            let idf = ((b + 1.0) / (store.doc_freq(idx) as f64 + 1.0)).ln();
            (idx, tf * idf)
        })
        .collect()
}

/// Term-frequency-only ablation: same tf numerator, no background discounting.
pub fn tf_only_scores(counts: &BatchAccessCounts) -> BTreeMap<u32, f64> {
    let total = counts.total();
    if total == 0 {
        return BTreeMap::new();
    }
    counts
        .iter()
        .map(|(idx, c)| (idx, c as f64 / total as f64))
        .collect()
}

// ── Trainable set ───────────────────────────────────────────────────────────

/// The slots a sparse step may update, in (score desc, index asc) order.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct TrainableSet {
    pub indices: Vec<u32>,
    /// Scores aligned with `indices`.
    pub scores: Vec<f64>,
    /// The t that was asked for; `indices.len()` may be smaller when fewer
    /// slots were accessed at all.
    pub t_requested: usize,
}

impl TrainableSet {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn as_set(&self) -> BTreeSet<u32> {
        self.indices.iter().copied().collect()
    }
}

/// Keep the top `t` slots by score. Deterministic: score descending, then
/// index ascending. `t = 0` is a config error; if fewer than `t` slots have
/// scores, all of them are kept.
pub fn select_top_t(scores: &BTreeMap<u32, f64>, t: usize) -> Result<TrainableSet> {
    if t == 0 {
        return Err(Error::Config("trainable set size t must be positive".into()));
    }
    let mut pairs: Vec<(u32, f64)> = scores.iter().map(|(&i, &s)| (i, s)).collect();
    pairs.sort_by(|a, b| {
        b.1.partial_cmp(&a.1)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.0.cmp(&b.0))
    });
    pairs.truncate(t);
    Ok(TrainableSet {
        indices: pairs.iter().map(|&(i, _)| i).collect(),
        scores: pairs.iter().map(|&(_, s)| s).collect(),
        t_requested: t,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::memory::{count_batch_accesses, AccessEntry, AccessRecord};
    use proptest::prelude::*;

    fn counts_from(pairs: &[(u32, u64)]) -> BatchAccessCounts {
        // Build through the public path: expand into access entries.
        let entries = pairs
            .iter()
            .flat_map(|&(idx, c)| {
                (0..c).map(move |j| AccessEntry {
                    seq: 0,
                    pos: j as usize,
                    head: 0,
                    indices: vec![idx],
                    weights: vec![1.0],
                })
            })
            .collect();
        count_batch_accesses(&[AccessRecord { topk: 1, entries }])
    }

    fn store_with(dfs: &[(u32, u32)], b: u32) -> BackgroundIndexStore {
        // df(i) = number of batches containing i; emit one batch per df unit.
        let mut per_batch: Vec<BatchAccessCounts> = Vec::new();
        for batch_i in 0..b {
            let present: Vec<(u32, u64)> = dfs
                .iter()
                .filter(|&&(_, df)| batch_i < df)
                .map(|&(idx, _)| (idx, 1))
                .collect();
            per_batch.push(counts_from(&present));
        }
        BackgroundIndexStore::from_batch_counts(&per_batch, "test")
    }

    #[test]
    fn worked_example_point_one_times_ln_two() {
        // slot 7: 1 of 10 accesses, df 1 of B=3 ⇒ 0.1 · ln((3+1)/(1+1)) = 0.1·ln 2
        let counts = counts_from(&[(7, 1), (8, 9)]);
        let store = store_with(&[(7, 1)], 3);
        let scores = tfidf_scores(&counts, &store);
        let expect = 0.1 * std::f64::consts::LN_2;
        assert_eq!(scores[&7], expect, "must match 0.1·ln2 = {expect} exactly");
        assert!((scores[&7] - 0.069_314_718_055_994_53).abs() < 1e-15);
    }

    #[test]
    fn worked_example_three_slots() {
        let counts = counts_from(&[(7, 2), (3, 1), (9, 1)]); // total 4
        let store = store_with(&[(7, 2), (9, 1)], 3);
        let scores = tfidf_scores(&counts, &store);
        assert!((scores[&7] - 0.5 * (4.0f64 / 3.0).ln()).abs() < 1e-15);
        assert!((scores[&3] - 0.25 * 4.0f64.ln()).abs() < 1e-15);
        assert!((scores[&9] - 0.25 * 2.0f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn background_frequency_strictly_lowers_score() {
        let counts = counts_from(&[(1, 3), (2, 3)]);
        let store = store_with(&[(1, 5), (2, 1)], 10);
        let scores = tfidf_scores(&counts, &store);
        assert!(
            scores[&1] < scores[&2],
            "equal tf but higher df must score lower: {} vs {}",
            scores[&1],
            scores[&2]
        );
    }

    #[test]
    fn unseen_slot_gets_max_idf() {
        let counts = counts_from(&[(5, 1)]);
        let store = store_with(&[(9, 4)], 4);
        let scores = tfidf_scores(&counts, &store);
        assert!((scores[&5] - 1.0 * 5.0f64.ln()).abs() < 1e-15); // ln((4+1)/(0+1))
    }

    proptest! {
        #[test]
        fn tfidf_is_scale_invariant_in_counts(
            base in proptest::collection::vec((0u32..200, 1u64..20), 1..12),
            mult in 1u64..50,
        ) {
            // Duplicate slot ids collapse; that's fine for the property.
            let counts = counts_from(&base);
            let scaled: Vec<(u32, u64)> = base.iter().map(|&(i, c)| (i, c * mult)).collect();
            let counts_scaled = counts_from(&scaled);
            let store = store_with(&[(0, 2), (5, 1), (17, 3)], 6);
            let a = tfidf_scores(&counts, &store);
            let b = tfidf_scores(&counts_scaled, &store);
            prop_assert_eq!(a.len(), b.len());
            for (idx, s) in &a {
                // Bit-exact: the real-valued ratio is identical, f64 division
                // rounds identically.
                prop_assert_eq!(s.to_bits(), b[idx].to_bits());
            }
        }

        #[test]
        fn select_top_t_is_deterministic_and_sorted(
            pairs in proptest::collection::btree_map(0u32..500, -1.0f64..1.0, 1..40),
            t in 1usize..20,
        ) {
            let a = select_top_t(&pairs, t).unwrap();
            let b = select_top_t(&pairs, t).unwrap();
            prop_assert_eq!(&a, &b);
            prop_assert!(a.len() <= t);
            for w in 0..a.len().saturating_sub(1) {
                let (i0, s0) = (a.indices[w], a.scores[w]);
                let (i1, s1) = (a.indices[w + 1], a.scores[w + 1]);
                prop_assert!(s0 > s1 || (s0 == s1 && i0 < i1));
            }
        }
    }

    #[test]
    fn select_top_t_tie_breaks_toward_lower_index() {
        let scores: BTreeMap<u32, f64> = [(5, 0.3), (2, 0.3), (8, 0.5)].into_iter().collect();
        let set = select_top_t(&scores, 2).unwrap();
        assert_eq!(set.indices, vec![8, 2]);
        assert_eq!(set.t_requested, 2);
    }

    #[test]
    fn select_top_t_zero_is_config_error() {
        let scores: BTreeMap<u32, f64> = [(1, 0.5)].into_iter().collect();
        assert!(matches!(select_top_t(&scores, 0), Err(Error::Config(_))));
    }

    #[test]
    fn select_top_t_takes_all_when_fewer_accessed() {
        let scores: BTreeMap<u32, f64> = [(1, 0.5), (2, 0.1)].into_iter().collect();
        let set = select_top_t(&scores, 100).unwrap();
        assert_eq!(set.len(), 2);
        assert_eq!(set.t_requested, 100);
        assert_eq!(set.indices, vec![1, 2]);
    }

    #[test]
    fn tf_only_matches_plain_frequency() {
        let counts = counts_from(&[(4, 1), (6, 3)]);
        let scores = tf_only_scores(&counts);
        assert_eq!(scores[&4], 0.25);
        assert_eq!(scores[&6], 0.75);
        assert!(tf_only_scores(&counts_from(&[])).is_empty());
    }

    #[test]
    fn store_bytes_round_trip() {
        let store = store_with(&[(3, 2), (100, 1), (4095, 7)], 9);
        let bytes = store.to_bytes();
        let back = BackgroundIndexStore::from_bytes(&bytes).unwrap();
        assert_eq!(store, back);
        assert_eq!(back.doc_freq(3), 2);
        assert_eq!(back.doc_freq(4), 0);
        assert_eq!(back.num_batches(), 9);
        assert_eq!(back.corpus_label(), "test");

        // Truncation is detected, nothing partial comes back.
        let r = BackgroundIndexStore::from_bytes(&bytes[..bytes.len() - 3]);
        assert!(r.is_err());
    }

    #[test]
    fn doc_freq_counts_batches_not_occurrences() {
        // Slot 5 appears 10 times in one batch, once in another: df = 2.
        let b1 = counts_from(&[(5, 10)]);
        let b2 = counts_from(&[(5, 1), (6, 4)]);
        let b3 = counts_from(&[(6, 2)]);
        let store = BackgroundIndexStore::from_batch_counts(&[b1, b2, b3], "x");
        assert_eq!(store.doc_freq(5), 2);
        assert_eq!(store.doc_freq(6), 2);
        assert_eq!(store.num_batches(), 3);
    }
}
