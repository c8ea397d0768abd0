//! Pretraining and the continual-learning stream driver.
//!
//! The harness first pretrains a base model on packed batches (fact
//! statements, question rows, filler) until it answers held-out questions
//! about its own pretraining facts, then freezes a background index store
//! over fresh pretraining batches. A continual run clones that base, walks a
//! seeded permutation of unseen facts one at a time, applies one method's
//! update steps, and periodically measures:
//!
//! - target accuracy: exact-match QA over the streamed facts (learning)
//! - heldout accuracy: exact-match QA over pretraining facts (forgetting)
//! - heldout NLL: mean NLL on reserved filler rows (distribution drift)

use std::collections::BTreeSet;

use crate::error::{Error, Result};
use crate::model::{Batch, ModelConfig, TransformerModel};
use crate::numerics::Scalar;
use crate::ranking::{build_background_store, BackgroundIndexStore};
use crate::rng::{CounterRng, Stream};
use crate::training::{
    default_method_spec, full_step, lora_attach, lora_step, memory_all_step, memory_tf_only_step,
    sparse_memory_step, apply_trainable_flags, LoraAdapters, MethodKind, MethodSpec, Optimizer,
    OptimizerConfig, StepReport,
};

use super::data::{
    filler_eval_batch, paraphrase_batch, pretrain_batch, FactDataset, FactRecord, ANSWER_LEN,
};

// ── Pretraining ──

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    /// Batches frozen into the background index store after pretraining.
    pub background_batches: usize,
    /// Held-out QA accuracy the base must reach; pretraining stops early once
    /// it does and fails the run if it never does.
    pub target_acc: f64,
    pub eval_every: usize,
    /// How many pretraining facts to quiz per evaluation.
    pub eval_questions: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            steps: 4000,
            batch_size: 16,
            optimizer: OptimizerConfig::adamw(1.5e-3, 0.01),
            background_batches: 100,
            target_acc: 0.9,
            eval_every: 100,
            eval_questions: 200,
        }
    }
}

#[derive(Debug)]
pub struct PretrainOutcome<F> {
    pub model: TransformerModel<F>,
    pub background: BackgroundIndexStore,
    /// (step, held-out QA accuracy) at each evaluation.
    pub curve: Vec<(usize, f64)>,
    pub final_acc: f64,
    /// Batch-order RNG state when pretraining finished.
    pub rng_state: (u64, u64),
}

/// Exact-match QA accuracy: greedy-decode the answer tokens after each
/// question prompt and require every object token to match.
pub fn qa_accuracy<F: Scalar>(
    model: &TransformerModel<F>,
    facts: &[FactRecord],
    limit: usize,
    adapters: Option<&LoraAdapters>,
) -> Result<f64> {
    let n = limit.min(facts.len());
    if n == 0 {
        return Err(Error::Config("qa_accuracy over zero facts".into()));
    }
    let mut correct = 0usize;
    for f in &facts[..n] {
        let ans = model.greedy_answer(&f.question_prompt(), ANSWER_LEN, adapters)?;
        if ans == f.object {
            correct += 1;
        }
    }
    Ok(correct as f64 / n as f64)
}

/// Train a fresh model from `model_config` on packed batches until it clears
/// `target_acc` on its own facts, then freeze the background store.
pub fn pretrain_base<F: Scalar>(
    model_config: &ModelConfig,
    data: &FactDataset,
    cfg: &PretrainConfig,
) -> Result<PretrainOutcome<F>> {
    pretrain_base_with(model_config, data, cfg, |_, _| {})
}

/// `pretrain_base` with a progress hook invoked after each evaluation with
/// `(step, qa_accuracy)`; lets callers report on long runs.
pub fn pretrain_base_with<F: Scalar>(
    model_config: &ModelConfig,
    data: &FactDataset,
    cfg: &PretrainConfig,
    mut on_eval: impl FnMut(usize, f64),
) -> Result<PretrainOutcome<F>> {
    if data.layout.vocab_size != model_config.vocab_size {
        return Err(Error::Config(format!(
            "dataset vocab {} does not match model vocab {}",
            data.layout.vocab_size, model_config.vocab_size
        )));
    }
    if cfg.steps == 0 {
        return Err(Error::Config("pretraining needs at least one step".into()));
    }
    let mut model = TransformerModel::<F>::new(model_config.clone())?;
    let mut opt = Optimizer::new(cfg.optimizer.clone())?;
    let mut rng = CounterRng::from_stream(model_config.seed, Stream::PretrainOrder);
    let seq_len = model_config.max_seq_len;

    let mut curve = Vec::new();
    let mut best = 0.0f64;
    let mut reached = false;
    for step in 0..cfg.steps {
        let batch = pretrain_batch(data, &mut rng, cfg.batch_size, seq_len)?;
        full_step(&mut model, &batch, &mut opt)?;
        let last = step + 1 == cfg.steps;
        if (step + 1) % cfg.eval_every == 0 || last {
            let acc = qa_accuracy(&model, &data.pretrain_facts, cfg.eval_questions, None)?;
            curve.push((step + 1, acc));
            on_eval(step + 1, acc);
            best = best.max(acc);
            if acc >= cfg.target_acc {
                reached = true;
                break;
            }
        }
    }
    if !reached && best < cfg.target_acc {
        return Err(Error::TrainingFailure {
            target: cfg.target_acc,
            best,
            steps: opt.step_count() as usize,
            curve: curve.clone(),
        });
    }

    // Freeze document frequencies over fresh pretraining batches.
    let mut batches = Vec::with_capacity(cfg.background_batches);
    for _ in 0..cfg.background_batches {
        batches.push(pretrain_batch(data, &mut rng, cfg.batch_size, seq_len)?);
    }
    let background = build_background_store(&model, &batches, "pretrain")?;

    let final_acc = curve.last().map(|&(_, a)| a).unwrap_or(0.0);
    Ok(PretrainOutcome { model, background, curve, final_acc, rng_state: rng.state() })
}

// ── The continual stream ──

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct StreamConfig {
    pub seed: u64,
    pub method: MethodSpec,
    /// How many unseen facts to stream.
    pub n_facts: usize,
    pub batch_size: usize,
    /// Update steps per fact before moving on.
    pub steps_per_fact: usize,
    /// Evaluate every this many facts; 0 = endpoints only.
    pub eval_every: usize,
    /// Pretraining facts quizzed for the forgetting probe.
    pub heldout_questions: usize,
    /// Reserved filler rows for the NLL probe.
    pub nll_rows: usize,
}

impl Default for StreamConfig {
    fn default() -> Self {
        StreamConfig {
            seed: 0,
            method: default_method_spec(MethodKind::SparseMemory),
            n_facts: 200,
            batch_size: 8,
            steps_per_fact: 4,
            eval_every: 25,
            heldout_questions: 200,
            nll_rows: 32,
        }
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EvalReport {
    pub facts_seen: usize,
    /// Optimizer steps taken when this evaluation ran.
    pub step: u64,
    pub target_acc: f64,
    pub heldout_acc: f64,
    pub heldout_nll: f64,
}

#[derive(Debug, Clone)]
pub struct StreamOutcome {
    pub evals: Vec<EvalReport>,
    pub steps: Vec<StepReport>,
}

impl StreamOutcome {
    /// The pre-stream baseline evaluation.
    pub fn first(&self) -> &EvalReport {
        &self.evals[0]
    }

    pub fn last(&self) -> &EvalReport {
        self.evals.last().expect("stream always evaluates at both endpoints")
    }
}

/// Stream `cfg.n_facts` unseen facts through `model` with the configured
/// method, evaluating along the way. The model is updated in place.
/// The seeded fact subset a stream run with this config visits, in order.
pub fn stream_fact_order(data: &FactDataset, cfg: &StreamConfig) -> Vec<usize> {
    let mut order: Vec<usize> = (0..data.stream_facts.len()).collect();
    let mut rng = CounterRng::from_stream(cfg.seed, Stream::StreamOrder);
    rng.shuffle(&mut order);
    order.truncate(cfg.n_facts);
    order
}

/// Document frequencies taken from the stream's own fact batches instead of
/// the pretraining corpus. Ranking against this store asks "is this row
/// unusually active compared to the data being learned right now?", which
/// blunts the contrast the score is meant to isolate; it exists as an
/// ablation arm.
pub fn build_own_stream_background<F: Scalar>(
    model: &TransformerModel<F>,
    data: &FactDataset,
    cfg: &StreamConfig,
) -> Result<BackgroundIndexStore> {
    let seq_len = model.config.max_seq_len;
    let batches: Vec<Batch> = stream_fact_order(data, cfg)
        .iter()
        .map(|&i| paraphrase_batch(data, &data.stream_facts[i], cfg.batch_size, seq_len, 0))
        .collect::<Result<_>>()?;
    build_background_store(model, &batches, "own_stream")
}

pub fn run_continual_stream<F: Scalar>(
    model: &mut TransformerModel<F>,
    data: &FactDataset,
    background: &BackgroundIndexStore,
    cfg: &StreamConfig,
) -> Result<StreamOutcome> {
    cfg.method.validate()?;
    if cfg.n_facts == 0 || cfg.n_facts > data.stream_facts.len() {
        return Err(Error::Config(format!(
            "n_facts {} outside 1..={} available stream facts",
            cfg.n_facts,
            data.stream_facts.len()
        )));
    }
    if cfg.steps_per_fact == 0 {
        return Err(Error::Config("steps_per_fact must be positive".into()));
    }
    if data.layout.vocab_size != model.config.vocab_size {
        return Err(Error::Config("dataset vocab does not match model vocab".into()));
    }

    let adapters = match cfg.method.method {
        MethodKind::Lora => Some(lora_attach(
            model,
            cfg.method.lora.as_ref().expect("validated"),
            cfg.seed,
        )?),
        _ => None,
    };
    apply_trainable_flags(model, cfg.method.method, adapters.as_ref());

    // Seeded order over the stream facts.
    let targets: Vec<FactRecord> = stream_fact_order(data, cfg)
        .iter()
        .map(|&i| data.stream_facts[i].clone())
        .collect();

    let seq_len = model.config.max_seq_len;
    let nll_batch = filler_eval_batch(data, seq_len, cfg.nll_rows)?;
    let mut opt = Optimizer::new(cfg.method.optimizer.clone())?;

    let evaluate = |model: &TransformerModel<F>,
                    facts_seen: usize,
                    step: u64|
     -> Result<EvalReport> {
        Ok(EvalReport {
            facts_seen,
            step,
            target_acc: qa_accuracy(model, &targets, targets.len(), adapters.as_ref())?,
            heldout_acc: qa_accuracy(
                model,
                &data.pretrain_facts,
                cfg.heldout_questions,
                adapters.as_ref(),
            )?,
            heldout_nll: model.batch_nll(&nll_batch, adapters.as_ref())?,
        })
    };

    let mut evals = vec![evaluate(model, 0, 0)?];
    let mut steps = Vec::with_capacity(cfg.n_facts * cfg.steps_per_fact);
    for (i, fact) in targets.iter().enumerate() {
        for s in 0..cfg.steps_per_fact {
            let batch = paraphrase_batch(data, fact, cfg.batch_size, seq_len, s)?;
            let report = match cfg.method.method {
                MethodKind::SparseMemory => sparse_memory_step(
                    model,
                    &batch,
                    background,
                    cfg.method.t.expect("validated"),
                    &mut opt,
                )?,
                MethodKind::MemoryTfOnly => memory_tf_only_step(
                    model,
                    &batch,
                    cfg.method.t.expect("validated"),
                    &mut opt,
                )?,
                MethodKind::MemoryAll => memory_all_step(model, &batch, &mut opt)?,
                MethodKind::Full => full_step(model, &batch, &mut opt)?,
                MethodKind::Lora => {
                    lora_step(model, adapters.as_ref().expect("validated"), &batch, &mut opt)?
                }
            };
            steps.push(report);
        }
        let done = i + 1 == cfg.n_facts;
        if !done && cfg.eval_every > 0 && (i + 1) % cfg.eval_every == 0 {
            evals.push(evaluate(model, i + 1, opt.step_count())?);
        }
    }
    evals.push(evaluate(model, cfg.n_facts, opt.step_count())?);
    Ok(StreamOutcome { evals, steps })
}

// ── Core sets ──

/// Which memory rows one rendered sequence touches, and how many of the
/// fact-core rows each position hits.
#[derive(Debug, Clone, serde::Serialize)]
pub struct CoreSeqInfo {
    pub label: String,
    pub tokens: Vec<u32>,
    pub accessed: usize,
    pub core_hits_per_pos: Vec<usize>,
}

/// The fact's core memory rows: the intersection of the access sets of all its
/// paraphrases and its question form.
#[derive(Debug, Clone, serde::Serialize)]
pub struct CoreSetReport {
    pub fact_id: u32,
    pub core: Vec<u32>,
    pub sequences: Vec<CoreSeqInfo>,
}

pub fn compute_core_set<F: Scalar>(
    model: &TransformerModel<F>,
    data: &FactDataset,
    fact: &FactRecord,
) -> Result<CoreSetReport> {
    let mut renders: Vec<(String, Vec<u32>)> = (0..data.templates.len())
        .map(|v| (format!("paraphrase{v}"), fact.statement(&data.templates, v)))
        .collect();
    renders.push(("question".to_string(), fact.question_full()));

    let mut per_seq: Vec<(String, Vec<u32>, Vec<BTreeSet<u32>>)> = Vec::new();
    let mut core: Option<BTreeSet<u32>> = None;
    for (label, tokens) in renders.drain(..) {
        let len = tokens.len();
        let batch = Batch::new(
            vec![tokens.clone()],
            vec![vec![true; len]],
            vec![vec![false; len]],
        )?;
        let rec = model.batch_access_record(&batch)?;
        let mut by_pos: Vec<BTreeSet<u32>> = vec![BTreeSet::new(); len];
        for e in &rec.entries {
            for &i in &e.indices {
                by_pos[e.pos].insert(i);
            }
        }
        let seq_set: BTreeSet<u32> = by_pos.iter().flatten().copied().collect();
        core = Some(match core {
            None => seq_set.clone(),
            Some(c) => c.intersection(&seq_set).copied().collect(),
        });
        per_seq.push((label, tokens, by_pos));
    }
    let core = core.expect("at least the question sequence exists");

    let sequences = per_seq
        .into_iter()
        .map(|(label, tokens, by_pos)| CoreSeqInfo {
            label,
            tokens,
            accessed: by_pos.iter().flatten().collect::<BTreeSet<_>>().len(),
            core_hits_per_pos: by_pos
                .iter()
                .map(|s| s.intersection(&core).count())
                .collect(),
        })
        .collect();

    Ok(CoreSetReport { fact_id: fact.fact_id, core: core.into_iter().collect(), sequences })
}

// ── Sweeps ──

/// One method arm's final numbers, flattened for CSV. Failed runs carry their
/// error string and NaN metrics instead of crashing the sweep.
#[derive(Debug, Clone, serde::Serialize)]
pub struct SweepRow {
    pub label: String,
    pub method: String,
    pub lr: f64,
    pub t: Option<usize>,
    pub rank: Option<usize>,
    pub alpha: Option<f64>,
    pub final_target_acc: f64,
    pub baseline_heldout_acc: f64,
    pub final_heldout_acc: f64,
    pub heldout_drop: f64,
    pub baseline_heldout_nll: f64,
    pub final_heldout_nll: f64,
    pub nll_increase: f64,
    pub error: Option<String>,
}

impl SweepRow {
    pub fn failed(label: &str, spec: &MethodSpec, err: &Error) -> SweepRow {
        SweepRow {
            label: label.to_string(),
            method: spec.method.to_string(),
            lr: spec.optimizer.lr,
            t: spec.t,
            rank: spec.lora.as_ref().map(|l| l.rank),
            alpha: spec.lora.as_ref().map(|l| l.alpha),
            final_target_acc: f64::NAN,
            baseline_heldout_acc: f64::NAN,
            final_heldout_acc: f64::NAN,
            heldout_drop: f64::NAN,
            baseline_heldout_nll: f64::NAN,
            final_heldout_nll: f64::NAN,
            nll_increase: f64::NAN,
            error: Some(err.to_string()),
        }
    }

    pub fn from_outcome(label: &str, spec: &MethodSpec, outcome: &StreamOutcome) -> SweepRow {
        let first = outcome.first();
        let last = outcome.last();
        SweepRow {
            label: label.to_string(),
            method: spec.method.to_string(),
            lr: spec.optimizer.lr,
            t: spec.t,
            rank: spec.lora.as_ref().map(|l| l.rank),
            alpha: spec.lora.as_ref().map(|l| l.alpha),
            final_target_acc: last.target_acc,
            baseline_heldout_acc: first.heldout_acc,
            final_heldout_acc: last.heldout_acc,
            heldout_drop: first.heldout_acc - last.heldout_acc,
            baseline_heldout_nll: first.heldout_nll,
            final_heldout_nll: last.heldout_nll,
            nll_increase: last.heldout_nll - first.heldout_nll,
            error: None,
        }
    }
}

/// Run every grid arm from a clone of the same base model and collect the
/// learning-vs-forgetting frontier.
pub fn pareto_sweep<F: Scalar>(
    base: &TransformerModel<F>,
    data: &FactDataset,
    background: &BackgroundIndexStore,
    base_cfg: &StreamConfig,
    grid: &[(String, MethodSpec)],
) -> Vec<SweepRow> {
    let mut rows = Vec::with_capacity(grid.len());
    for (label, spec) in grid {
        let mut cfg = base_cfg.clone();
        cfg.method = spec.clone();
        let mut model = base.clone();
        match run_continual_stream(&mut model, data, background, &cfg) {
            Ok(outcome) => rows.push(SweepRow::from_outcome(label, spec, &outcome)),
            Err(err) => rows.push(SweepRow::failed(label, spec, &err)),
        }
    }
    rows
}
