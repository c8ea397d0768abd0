//! Synthetic fact universe for the continual-learning experiments.
//!
//! Facts are subject–relation–object triples over a partitioned vocabulary:
//! a subject is two entity tokens, a relation one token, an object two tokens.
//! Each fact can be rendered through several statement templates (paraphrases
//! that vary a short prefix but always end `s1 s2 r o1 o2 . <eot>`) and one
//! question form `<query> s1 s2 r <sep> o1 o2 <eot>`. The aligned tail keeps
//! the prediction task well-posed: the object is always conditioned on the
//! subject and relation immediately before it.
//!
//! A small Markov process over a reserved filler range provides unrelated
//! "general text"; held-out filler rows give the NLL probe used to measure
//! forgetting of the pretraining distribution.

use std::collections::{BTreeMap, BTreeSet};
use std::ops::Range;

use crate::error::{Error, Result};
use crate::model::Batch;
use crate::rng::{CounterRng, Stream};

// ── Vocabulary layout ──

pub const PAD: u32 = 0;
pub const EOT: u32 = 1;
pub const QUERY: u32 = 2;
pub const ANSWER_SEP: u32 = 3;
pub const PERIOD: u32 = 4;
/// Ids below this are reserved for special markers.
const N_SPECIAL: u32 = 8;

/// How a vocabulary of a given size is partitioned into token roles.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VocabLayout {
    pub vocab_size: usize,
    pub template_words: Range<u32>,
    pub relations: Range<u32>,
    pub entities: Range<u32>,
    pub objects: Range<u32>,
    pub filler: Range<u32>,
}

impl VocabLayout {
    pub fn for_vocab(vocab_size: usize) -> Result<Self> {
        let v = u32::try_from(vocab_size)
            .map_err(|_| Error::Config("vocab_size out of range".into()))?;
        if v <= N_SPECIAL {
            return Err(Error::Config(format!("vocab_size {v} leaves no room for words")));
        }
        let r = v - N_SPECIAL;
        let n_templates = r / 16;
        let n_relations = r / 8;
        let n_entities = 3 * r / 8;
        let n_objects = r / 4;
        let t0 = N_SPECIAL;
        let rel0 = t0 + n_templates;
        let e0 = rel0 + n_relations;
        let o0 = e0 + n_entities;
        let f0 = o0 + n_objects;
        let n_filler = v - f0;
        if n_templates < 4 || n_relations < 4 || n_entities < 8 || n_objects < 4 || n_filler < 4 {
            return Err(Error::Config(format!(
                "vocab_size {v} too small to partition into fact roles"
            )));
        }
        Ok(VocabLayout {
            vocab_size,
            template_words: t0..rel0,
            relations: rel0..e0,
            entities: e0..o0,
            objects: o0..f0,
            filler: f0..v,
        })
    }

    /// Head of the entity range: the pool pretraining facts draw subjects from.
    pub fn head_entities(&self) -> Range<u32> {
        self.entities.start..self.tail_entities().start
    }

    /// Tail third of the entity range: long-tail names that appear in filler
    /// mentions only, reserved as subjects for the streamed facts.
    pub fn tail_entities(&self) -> Range<u32> {
        let n = self.entities.end - self.entities.start;
        let n_tail = (n / 3).max(2);
        (self.entities.end - n_tail)..self.entities.end
    }

    fn pick(rng: &mut CounterRng, range: &Range<u32>) -> u32 {
        range.start + rng.below((range.end - range.start) as usize) as u32
    }
}

// ── Templates ──

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Piece {
    Tok(u32),
    Subject,
    Relation,
    Object,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Template {
    pub pieces: Vec<Piece>,
}

impl Template {
    pub fn render(&self, subject: &[u32], relation: u32, object: &[u32]) -> Vec<u32> {
        let mut out = Vec::with_capacity(self.pieces.len() + 4);
        for piece in &self.pieces {
            match piece {
                Piece::Tok(t) => out.push(*t),
                Piece::Subject => out.extend_from_slice(subject),
                Piece::Relation => out.push(relation),
                Piece::Object => out.extend_from_slice(object),
            }
        }
        out
    }
}

/// Build `n` distinct statement templates. Template 0 is the bare statement;
/// the rest prepend one or two template words. Every template ends with the
/// aligned tail `Subject Relation Object . <eot>`.
pub fn statement_templates(layout: &VocabLayout, n: usize) -> Result<Vec<Template>> {
    let words: Vec<u32> = layout.template_words.clone().collect();
    if n < 3 {
        return Err(Error::Config("need at least 3 statement templates".into()));
    }
    if n > words.len() + 1 {
        return Err(Error::Config(format!(
            "{n} templates need {} template words, vocab provides {}",
            n - 1,
            words.len()
        )));
    }
    let tail = [Piece::Subject, Piece::Relation, Piece::Object, Piece::Tok(PERIOD), Piece::Tok(EOT)];
    let mut out = Vec::with_capacity(n);
    for j in 0..n {
        let mut pieces = Vec::new();
        if j > 0 {
            pieces.push(Piece::Tok(words[j - 1]));
            if j % 2 == 0 {
                // every other template gets a second prefix word
                pieces.push(Piece::Tok(words[(j + words.len() / 2) % words.len()]));
            }
        }
        pieces.extend_from_slice(&tail);
        out.push(Template { pieces });
    }
    Ok(out)
}

// ── Facts ──

pub const ANSWER_LEN: usize = 2;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FactRecord {
    pub fact_id: u32,
    pub subject: [u32; 2],
    pub relation: u32,
    pub object: [u32; 2],
}

impl FactRecord {
    pub fn statement(&self, templates: &[Template], variant: usize) -> Vec<u32> {
        let t = &templates[variant % templates.len()];
        t.render(&self.subject, self.relation, &self.object)
    }

    /// `<query> s1 s2 r <sep>` — everything the model sees before answering.
    pub fn question_prompt(&self) -> Vec<u32> {
        vec![QUERY, self.subject[0], self.subject[1], self.relation, ANSWER_SEP]
    }

    /// The full supervised question row: prompt, object, end marker.
    pub fn question_full(&self) -> Vec<u32> {
        let mut out = self.question_prompt();
        out.extend_from_slice(&self.object);
        out.push(EOT);
        out
    }
}

// ── Dataset ──

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct DataConfig {
    pub seed: u64,
    pub n_pretrain_facts: usize,
    pub n_stream_facts: usize,
    pub n_templates: usize,
    pub n_filler_sentences: usize,
    /// Trailing filler sentences held out of pretraining for the NLL probe.
    pub filler_eval_rows: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            seed: 7,
            n_pretrain_facts: 400,
            n_stream_facts: 300,
            n_templates: 6,
            n_filler_sentences: 300,
            filler_eval_rows: 32,
        }
    }
}

#[derive(Debug, Clone)]
pub struct FactDataset {
    pub config: DataConfig,
    pub layout: VocabLayout,
    pub templates: Vec<Template>,
    pub pretrain_facts: Vec<FactRecord>,
    pub stream_facts: Vec<FactRecord>,
    filler: Vec<Vec<u32>>,
}

impl FactDataset {
    pub fn generate(config: &DataConfig, vocab_size: usize) -> Result<FactDataset> {
        let layout = VocabLayout::for_vocab(vocab_size)?;
        let templates = statement_templates(&layout, config.n_templates)?;
        if config.filler_eval_rows == 0 || config.filler_eval_rows >= config.n_filler_sentences {
            return Err(Error::Config(
                "filler_eval_rows must be positive and below n_filler_sentences".into(),
            ));
        }
        let mut rng = CounterRng::from_stream(config.seed, Stream::DataGen);

        // Split the entity range: the head slice carries most pretraining
        // facts; the tail third stays long-tail — one pretraining fact in
        // twenty plus occasional filler mentions, so the fact circuitry knows
        // those names without crowding them. Streamed facts always take tail
        // subjects: new claims about lightly-documented entities, like fresh
        // topics arriving in a news feed. Distinct (subject, relation) keys
        // guarantee every question has exactly one right answer.
        let head_entities = layout.head_entities();
        let tail_entities = layout.tail_entities();
        let n_facts = config.n_pretrain_facts + config.n_stream_facts;
        let mut seen: BTreeSet<(u32, u32, u32)> = BTreeSet::new();
        let mut facts = Vec::with_capacity(n_facts);
        let mut attempts = 0usize;
        while facts.len() < n_facts {
            attempts += 1;
            if attempts > 200 * n_facts {
                return Err(Error::Config(format!(
                    "could not sample {n_facts} distinct facts; vocabulary too small"
                )));
            }
            let pool = if facts.len() >= config.n_pretrain_facts {
                &tail_entities
            } else if rng.below(20) == 0 {
                &tail_entities
            } else {
                &head_entities
            };
            let s1 = VocabLayout::pick(&mut rng, pool);
            let s2 = VocabLayout::pick(&mut rng, pool);
            let r = VocabLayout::pick(&mut rng, &layout.relations);
            if !seen.insert((s1, s2, r)) {
                continue;
            }
            let o1 = VocabLayout::pick(&mut rng, &layout.objects);
            let o2 = VocabLayout::pick(&mut rng, &layout.objects);
            facts.push(FactRecord {
                fact_id: facts.len() as u32,
                subject: [s1, s2],
                relation: r,
                object: [o1, o2],
            });
        }
        let stream_facts = facts.split_off(config.n_pretrain_facts);

        // Filler: a sparse Markov chain (three successors per token) gives the
        // model some unrelated structure to learn and later forget.
        let successors: BTreeMap<u32, [u32; 3]> = layout
            .filler
            .clone()
            .map(|t| {
                let s = [
                    VocabLayout::pick(&mut rng, &layout.filler),
                    VocabLayout::pick(&mut rng, &layout.filler),
                    VocabLayout::pick(&mut rng, &layout.filler),
                ];
                (t, s)
            })
            .collect();
        let mut filler = Vec::with_capacity(config.n_filler_sentences);
        for _ in 0..config.n_filler_sentences {
            let len = 6 + rng.below(7);
            let mut tok = VocabLayout::pick(&mut rng, &layout.filler);
            let mut sent = Vec::with_capacity(len + 2);
            sent.push(tok);
            for _ in 1..len {
                tok = successors[&tok][rng.below(3)];
                sent.push(tok);
            }
            // A quarter of filler sentences name-drop a tail entity so its
            // embedding is trained even though no pretraining fact uses it.
            if rng.below(4) == 0 {
                let at = 1 + rng.below(sent.len() - 1);
                sent[at] = VocabLayout::pick(&mut rng, &tail_entities);
            }
            sent.push(PERIOD);
            sent.push(EOT);
            filler.push(sent);
        }

        Ok(FactDataset {
            config: config.clone(),
            layout,
            templates,
            pretrain_facts: facts,
            stream_facts,
            filler,
        })
    }

    pub fn filler_train(&self) -> &[Vec<u32>] {
        &self.filler[..self.filler.len() - self.config.filler_eval_rows]
    }

    pub fn filler_eval(&self) -> &[Vec<u32>] {
        &self.filler[self.filler.len() - self.config.filler_eval_rows..]
    }
}

// ── Batch builders ──

fn pad_row(mut tokens: Vec<u32>, seq_len: usize) -> Result<(Vec<u32>, Vec<bool>, Vec<bool>)> {
    if tokens.len() > seq_len {
        return Err(Error::SequenceTooLong { len: tokens.len(), max: seq_len });
    }
    let real = tokens.len();
    tokens.resize(seq_len, PAD);
    let mut loss = vec![false; seq_len];
    let mut pad = vec![true; seq_len];
    for p in 0..real {
        loss[p] = true;
        pad[p] = false;
    }
    Ok((tokens, loss, pad))
}

/// A batch of paraphrases of one fact: row i renders statement template
/// `(i + variant_offset) mod n_templates`, padded to `seq_len`.
pub fn paraphrase_batch(
    dataset: &FactDataset,
    fact: &FactRecord,
    batch_size: usize,
    seq_len: usize,
    variant_offset: usize,
) -> Result<Batch> {
    if batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    let mut tokens = Vec::with_capacity(batch_size);
    let mut loss = Vec::with_capacity(batch_size);
    let mut pad = Vec::with_capacity(batch_size);
    for i in 0..batch_size {
        let row = fact.statement(&dataset.templates, i + variant_offset);
        let (t, l, p) = pad_row(row, seq_len)?;
        tokens.push(t);
        loss.push(l);
        pad.push(p);
    }
    Batch::new(tokens, loss, pad)
}

/// A packed pretraining batch mixing fact statements, question rows, and
/// filler sentences. Draws are consumed from `rng`, so consecutive calls give
/// a reproducible batch sequence.
pub fn pretrain_batch(
    dataset: &FactDataset,
    rng: &mut CounterRng,
    batch_size: usize,
    seq_len: usize,
) -> Result<Batch> {
    if batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    let facts = &dataset.pretrain_facts;
    if facts.is_empty() {
        return Err(Error::Config("no pretraining facts".into()));
    }
    let filler = dataset.filler_train();
    let mut tokens = Vec::with_capacity(batch_size);
    let mut loss = Vec::with_capacity(batch_size);
    let mut pad = Vec::with_capacity(batch_size);
    for _ in 0..batch_size {
        let mut row: Vec<u32> = Vec::with_capacity(seq_len);
        // pack items until the row is (nearly) full
        for _ in 0..8 {
            if row.len() >= seq_len {
                break;
            }
            let roll = rng.below(100);
            let item = if roll < 40 {
                let f = &facts[rng.below(facts.len())];
                f.statement(&dataset.templates, rng.below(dataset.templates.len()))
            } else if roll < 75 {
                let f = &facts[rng.below(facts.len())];
                f.question_full()
            } else {
                filler[rng.below(filler.len())].clone()
            };
            if row.len() + item.len() > seq_len {
                break;
            }
            row.extend_from_slice(&item);
        }
        if row.is_empty() {
            return Err(Error::Config(format!(
                "seq_len {seq_len} cannot fit a single training item"
            )));
        }
        let (t, l, p) = pad_row(row, seq_len)?;
        tokens.push(t);
        loss.push(l);
        pad.push(p);
    }
    Batch::new(tokens, loss, pad)
}

/// The held-out filler rows as a fixed evaluation batch (no randomness).
pub fn filler_eval_batch(dataset: &FactDataset, seq_len: usize, rows: usize) -> Result<Batch> {
    let eval = dataset.filler_eval();
    if rows == 0 || rows > eval.len() {
        return Err(Error::Config(format!(
            "requested {rows} filler eval rows, dataset reserves {}",
            eval.len()
        )));
    }
    let mut tokens = Vec::with_capacity(rows);
    let mut loss = Vec::with_capacity(rows);
    let mut pad = Vec::with_capacity(rows);
    for sent in &eval[..rows] {
        let (t, l, p) = pad_row(sent.clone(), seq_len)?;
        tokens.push(t);
        loss.push(l);
        pad.push(p);
    }
    Batch::new(tokens, loss, pad)
}
