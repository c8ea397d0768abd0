//! The `memft` command line: pretrain a base model on the synthetic corpus,
//! stream unseen facts into it with one of the finetuning methods, sweep
//! method grids, run ranking/background ablations, inspect which memory rows a
//! fact lives in, and summarize metrics files.
//!
//! Every run resolves its configuration the same way: built-in defaults (or
//! the config embedded in a checkpoint), deep-merged with an optional
//! `--config` JSON file, then patched by repeated `--set key.path=value`
//! overrides. The resolved config is written next to the outputs so a run can
//! be reproduced from its directory alone.

use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};

use memft::harness::checkpoint::{load_checkpoint, save_checkpoint};
use memft::harness::config::{load_run_config, patch_config, RunConfig};
use memft::harness::data::{FactDataset, FactRecord};
use memft::harness::metrics::{fmt_f64, read_jsonl, sweep_csv, write_jsonl, CsvTable};
use memft::harness::stream::{
    build_own_stream_background, compute_core_set, pareto_sweep, pretrain_base_with,
    run_continual_stream, stream_fact_order, CoreSetReport, EvalReport, SweepRow,
};
use memft::training::{default_method_spec, MethodKind, MethodSpec};
use memft::Error;

type Model = memft::model::TransformerModel<f32>;

#[derive(Parser)]
#[command(name = "memft", version, about = "Sparse memory finetuning at desk scale")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Pretrain a base model on the synthetic corpus and write a checkpoint.
    Pretrain(PretrainArgs),
    /// Stream unseen facts into a pretrained model with one method.
    Stream(StreamArgs),
    /// Run a grid of methods over the same stream and tabulate the trade-offs.
    Sweep(SweepArgs),
    /// Ranking and background-store ablations, repeated across stream seeds.
    Ablate(AblateArgs),
    /// Core memory rows shared by every paraphrase of a fact.
    Coreset(CoresetArgs),
    /// Summarize stream metrics files into one table.
    Report(ReportArgs),
}

#[derive(Args)]
struct ConfigArgs {
    /// Partial JSON run config, deep-merged over the base config.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dotted-path override, e.g. --set stream.method.t=25 (repeatable).
    #[arg(long = "set", value_name = "PATH=VALUE")]
    set: Vec<String>,
}

fn main() -> anyhow::Result<()> {
    match Cli::parse().cmd {
        Cmd::Pretrain(args) => run_pretrain(args),
        Cmd::Stream(args) => run_stream(args),
        Cmd::Sweep(args) => run_sweep(args),
        Cmd::Ablate(args) => run_ablate(args),
        Cmd::Coreset(args) => run_coreset(args),
        Cmd::Report(args) => run_report(args),
    }
}

fn write_resolved_config(dir: &Path, run: &RunConfig) -> anyhow::Result<()> {
    let text = serde_json::to_string_pretty(run)?;
    std::fs::write(dir.join("run_config.json"), text + "\n")?;
    Ok(())
}

// ── pretrain ──

#[derive(Args)]
struct PretrainArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Model seed: initialization, batch order, and evaluation sampling.
    #[arg(long)]
    seed: u64,
    /// Output directory: base.ckpt, pretrain_curve.jsonl, run_config.json.
    #[arg(long)]
    out: PathBuf,
}

#[derive(serde::Serialize)]
struct CurvePoint {
    step: usize,
    qa_acc: f64,
}

fn write_curve(dir: &Path, curve: &[(usize, f64)]) -> anyhow::Result<()> {
    let points: Vec<CurvePoint> = curve
        .iter()
        .map(|&(step, qa_acc)| CurvePoint { step, qa_acc })
        .collect();
    write_jsonl(&dir.join("pretrain_curve.jsonl"), &points)?;
    Ok(())
}

fn run_pretrain(args: PretrainArgs) -> anyhow::Result<()> {
    let mut run = load_run_config(args.cfg.config.as_deref(), &args.cfg.set)?;
    run.model.seed = args.seed;
    std::fs::create_dir_all(&args.out)?;
    let data = FactDataset::generate(&run.data, run.model.vocab_size)?;
    println!(
        "data: {} pretrain facts, {} stream facts, vocab {}",
        data.pretrain_facts.len(),
        data.stream_facts.len(),
        run.model.vocab_size
    );
    let started = Instant::now();
    let progress = |step: usize, acc: f64| println!("step {step:5}: qa accuracy {acc:.3}");
    match pretrain_base_with::<f32>(&run.model, &data, &run.pretrain, progress) {
        Ok(outcome) => {
            write_curve(&args.out, &outcome.curve)?;
            write_resolved_config(&args.out, &run)?;
            let ckpt = args.out.join("base.ckpt");
            save_checkpoint(&ckpt, &run, &outcome.model, &outcome.background, outcome.rng_state)?;
            println!(
                "reached QA accuracy {:.3} in {:.1?}; checkpoint at {}",
                outcome.final_acc,
                started.elapsed(),
                ckpt.display()
            );
            Ok(())
        }
        Err(Error::TrainingFailure { target, best, steps, curve }) => {
            write_curve(&args.out, &curve)?;
            anyhow::bail!(
                "pretraining missed target accuracy {target}: best {best:.3} after {steps} steps \
                 (curve written to {})",
                args.out.join("pretrain_curve.jsonl").display()
            )
        }
        Err(e) => Err(e.into()),
    }
}

// ── stream ──

#[derive(Args)]
struct StreamArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Pretraining checkpoint to start from.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Stream seed: fact order and LoRA initialization.
    #[arg(long)]
    seed: u64,
    /// Output directory: metrics.jsonl, steps.jsonl, run_config.json.
    #[arg(long)]
    out: PathBuf,
    /// Switch to this method's default recipe before the flags below apply.
    #[arg(long)]
    method: Option<MethodKind>,
    /// Trainable memory value rows per step (memory methods only).
    #[arg(long)]
    t: Option<usize>,
    /// Learning rate.
    #[arg(long)]
    lr: Option<f64>,
    /// Update steps per streamed fact.
    #[arg(long)]
    steps_per_fact: Option<usize>,
    /// How many unseen facts to stream.
    #[arg(long)]
    facts: Option<usize>,
    /// LoRA rank (lora only).
    #[arg(long)]
    rank: Option<usize>,
    /// LoRA scale numerator (lora only).
    #[arg(long)]
    alpha: Option<f64>,
}

fn apply_stream_flags(run: &mut RunConfig, args: &StreamArgs) -> anyhow::Result<()> {
    run.stream.seed = args.seed;
    if let Some(kind) = args.method {
        run.stream.method = default_method_spec(kind);
    }
    if let Some(n) = args.facts {
        run.stream.n_facts = n;
    }
    if let Some(s) = args.steps_per_fact {
        run.stream.steps_per_fact = s;
    }
    let spec = &mut run.stream.method;
    if let Some(t) = args.t {
        spec.t = Some(t);
    }
    if let Some(lr) = args.lr {
        spec.optimizer.lr = lr;
    }
    if args.rank.is_some() || args.alpha.is_some() {
        let lora = spec
            .lora
            .as_mut()
            .ok_or_else(|| anyhow::anyhow!("--rank/--alpha only apply to --method lora"))?;
        if let Some(r) = args.rank {
            lora.rank = r;
        }
        if let Some(a) = args.alpha {
            lora.alpha = a;
        }
    }
    spec.validate()?;
    Ok(())
}

fn run_stream(args: StreamArgs) -> anyhow::Result<()> {
    let ck = load_checkpoint(&args.checkpoint)?;
    let mut run = patch_config(&ck.config, args.cfg.config.as_deref(), &args.cfg.set)?;
    apply_stream_flags(&mut run, &args)?;
    std::fs::create_dir_all(&args.out)?;
    let mut model: Model = ck.build_model()?;
    let data = FactDataset::generate(&run.data, run.model.vocab_size)?;
    let started = Instant::now();
    let outcome = run_continual_stream(&mut model, &data, &ck.background, &run.stream)?;
    write_jsonl(&args.out.join("metrics.jsonl"), &outcome.evals)?;
    write_jsonl(&args.out.join("steps.jsonl"), &outcome.steps)?;
    write_resolved_config(&args.out, &run)?;
    let first = outcome.first();
    let last = outcome.last();
    println!(
        "{}: streamed {} facts (seed {}) in {:.1?}",
        run.stream.method.method,
        run.stream.n_facts,
        run.stream.seed,
        started.elapsed()
    );
    println!("  target accuracy   {:.3}", last.target_acc);
    println!(
        "  heldout accuracy  {:.3} -> {:.3}  ({:+.3})",
        first.heldout_acc,
        last.heldout_acc,
        last.heldout_acc - first.heldout_acc
    );
    println!(
        "  filler NLL        {:.4} -> {:.4}  ({:+.4})",
        first.heldout_nll,
        last.heldout_nll,
        last.heldout_nll - first.heldout_nll
    );
    Ok(())
}

// ── sweep ──

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Pretraining checkpoint to start every arm from.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Stream seed shared by every arm (defaults to the config's).
    #[arg(long)]
    seed: Option<u64>,
    /// JSON grid file: [["label", {method spec}], ...]; omit for the built-in grid.
    #[arg(long)]
    grid: Option<PathBuf>,
    /// Output directory: sweep.csv, sweep.jsonl, run_config.json.
    #[arg(long)]
    out: PathBuf,
}

fn default_sweep_grid() -> Vec<(String, MethodSpec)> {
    let mut grid = Vec::new();
    for t in [5, 10, 25, 50, 100] {
        let mut spec = default_method_spec(MethodKind::SparseMemory);
        spec.t = Some(t);
        grid.push((format!("sparse_t{t}"), spec));
    }
    grid.push(("tf_only_t25".to_string(), default_method_spec(MethodKind::MemoryTfOnly)));
    grid.push(("memory_all".to_string(), default_method_spec(MethodKind::MemoryAll)));
    for lr in [3e-4, 1e-3] {
        let mut spec = default_method_spec(MethodKind::Full);
        spec.optimizer.lr = lr;
        grid.push((format!("full_lr{lr}"), spec));
    }
    for rank in [4, 16] {
        let mut spec = default_method_spec(MethodKind::Lora);
        let lora = spec.lora.as_mut().expect("lora spec");
        lora.rank = rank;
        lora.alpha = 2.0 * rank as f64;
        grid.push((format!("lora_r{rank}"), spec));
    }
    grid
}

fn print_sweep_row(row: &SweepRow, took: std::time::Duration) {
    match &row.error {
        Some(e) => println!("  {}: FAILED: {e}", row.label),
        None => println!(
            "  {}: target {:.3}, heldout {:.3} -> {:.3}, nll {:.4} -> {:.4}  ({:.1?})",
            row.label,
            row.final_target_acc,
            row.baseline_heldout_acc,
            row.final_heldout_acc,
            row.baseline_heldout_nll,
            row.final_heldout_nll,
            took
        ),
    }
}

fn run_sweep(args: SweepArgs) -> anyhow::Result<()> {
    let ck = load_checkpoint(&args.checkpoint)?;
    let mut run = patch_config(&ck.config, args.cfg.config.as_deref(), &args.cfg.set)?;
    if let Some(seed) = args.seed {
        run.stream.seed = seed;
    }
    let grid: Vec<(String, MethodSpec)> = match &args.grid {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .with_context(|| format!("reading grid {}", p.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing grid {}", p.display()))?
        }
        None => default_sweep_grid(),
    };
    for (label, spec) in &grid {
        spec.validate().with_context(|| format!("grid arm {label:?}"))?;
    }
    std::fs::create_dir_all(&args.out)?;
    let base: Model = ck.build_model()?;
    let data = FactDataset::generate(&run.data, run.model.vocab_size)?;
    println!(
        "sweeping {} arms over {} facts (seed {})",
        grid.len(),
        run.stream.n_facts,
        run.stream.seed
    );
    let mut rows = Vec::with_capacity(grid.len());
    for arm in &grid {
        let started = Instant::now();
        let row = pareto_sweep(&base, &data, &ck.background, &run.stream, std::slice::from_ref(arm))
            .pop()
            .expect("one row per arm");
        print_sweep_row(&row, started.elapsed());
        rows.push(row);
    }
    sweep_csv(&rows).write(&args.out.join("sweep.csv"))?;
    write_jsonl(&args.out.join("sweep.jsonl"), &rows)?;
    write_resolved_config(&args.out, &run)?;
    println!("wrote {}", args.out.join("sweep.csv").display());
    Ok(())
}

// ── ablate ──

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Pretraining checkpoint to start every arm from.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Stream seeds to repeat every arm over.
    #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
    seeds: Vec<u64>,
    /// Output directory: ablate.csv, run_config.json.
    #[arg(long)]
    out: PathBuf,
}

struct AblateRow {
    arm: &'static str,
    background: &'static str,
    seed: u64,
    row: SweepRow,
}

fn ablate_csv(rows: &[AblateRow]) -> CsvTable {
    let headers = [
        "arm",
        "background",
        "seed",
        "method",
        "t",
        "lr",
        "final_target_acc",
        "baseline_heldout_acc",
        "final_heldout_acc",
        "heldout_drop",
        "baseline_heldout_nll",
        "final_heldout_nll",
        "nll_increase",
        "error",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    let body = rows
        .iter()
        .map(|r| {
            vec![
                r.arm.to_string(),
                r.background.to_string(),
                r.seed.to_string(),
                r.row.method.clone(),
                r.row.t.map(|t| t.to_string()).unwrap_or_default(),
                fmt_f64(r.row.lr),
                fmt_f64(r.row.final_target_acc),
                fmt_f64(r.row.baseline_heldout_acc),
                fmt_f64(r.row.final_heldout_acc),
                fmt_f64(r.row.heldout_drop),
                fmt_f64(r.row.baseline_heldout_nll),
                fmt_f64(r.row.final_heldout_nll),
                fmt_f64(r.row.nll_increase),
                r.row.error.clone().unwrap_or_default(),
            ]
        })
        .collect();
    CsvTable { headers, rows: body }
}

fn run_ablate(args: AblateArgs) -> anyhow::Result<()> {
    let ck = load_checkpoint(&args.checkpoint)?;
    let run = patch_config(&ck.config, args.cfg.config.as_deref(), &args.cfg.set)?;
    std::fs::create_dir_all(&args.out)?;
    let base: Model = ck.build_model()?;
    let data = FactDataset::generate(&run.data, run.model.vocab_size)?;
    let mut rows: Vec<AblateRow> = Vec::new();

    let run_arm = |arm: &'static str,
                       background: &'static str,
                       seed: u64,
                       spec: MethodSpec,
                       store: &memft::ranking::BackgroundIndexStore,
                       rows: &mut Vec<AblateRow>| {
        let mut cfg = run.stream.clone();
        cfg.seed = seed;
        cfg.method = spec.clone();
        let label = format!("{arm}/{background}@seed{seed}");
        let started = Instant::now();
        let mut model = base.clone();
        let row = match run_continual_stream(&mut model, &data, store, &cfg) {
            Ok(outcome) => SweepRow::from_outcome(&label, &spec, &outcome),
            Err(err) => SweepRow::failed(&label, &spec, &err),
        };
        print_sweep_row(&row, started.elapsed());
        rows.push(AblateRow { arm, background, seed, row });
    };

    for &seed in &args.seeds {
        // Ranking ablation: TF-IDF vs TF-only vs every accessed row.
        run_arm(
            "tfidf",
            "pretrain",
            seed,
            default_method_spec(MethodKind::SparseMemory),
            &ck.background,
            &mut rows,
        );
        run_arm(
            "tf_only",
            "none",
            seed,
            default_method_spec(MethodKind::MemoryTfOnly),
            &ck.background,
            &mut rows,
        );
        run_arm(
            "all_accessed",
            "none",
            seed,
            default_method_spec(MethodKind::MemoryAll),
            &ck.background,
            &mut rows,
        );
        // Background ablation: document frequencies from the stream itself.
        let mut own_cfg = run.stream.clone();
        own_cfg.seed = seed;
        own_cfg.method = default_method_spec(MethodKind::SparseMemory);
        let own_store = build_own_stream_background(&base, &data, &own_cfg)?;
        run_arm(
            "tfidf",
            "own_stream",
            seed,
            default_method_spec(MethodKind::SparseMemory),
            &own_store,
            &mut rows,
        );
    }

    let table = ablate_csv(&rows);
    table.write(&args.out.join("ablate.csv"))?;
    write_resolved_config(&args.out, &run)?;

    // Per-seed verdicts for the two comparisons the ablation is about.
    let find = |arm: &str, background: &str, seed: u64| {
        rows.iter()
            .find(|r| r.arm == arm && r.background == background && r.seed == seed)
            .map(|r| &r.row)
    };
    let mut ranking_wins = 0usize;
    let mut background_wins = 0usize;
    for &seed in &args.seeds {
        if let (Some(tfidf), Some(tf_only)) = (find("tfidf", "pretrain", seed), find("tf_only", "none", seed)) {
            let win = tfidf.heldout_drop < tf_only.heldout_drop;
            ranking_wins += win as usize;
            println!(
                "seed {seed}: heldout drop tfidf {:.3} vs tf_only {:.3} -> {}",
                tfidf.heldout_drop,
                tf_only.heldout_drop,
                if win { "tfidf forgets less" } else { "tf_only forgets less" }
            );
        }
        if let (Some(pre), Some(own)) = (find("tfidf", "pretrain", seed), find("tfidf", "own_stream", seed)) {
            let win = pre.heldout_drop < own.heldout_drop;
            background_wins += win as usize;
            println!(
                "seed {seed}: heldout drop pretrain-bg {:.3} vs own-stream-bg {:.3} -> {}",
                pre.heldout_drop,
                own.heldout_drop,
                if win { "pretrain background forgets less" } else { "own-stream background forgets less" }
            );
        }
    }
    println!(
        "tfidf beats tf_only on forgetting in {ranking_wins}/{} seeds; \
         pretrain background beats own-stream in {background_wins}/{} seeds",
        args.seeds.len(),
        args.seeds.len()
    );
    println!("wrote {}", args.out.join("ablate.csv").display());
    Ok(())
}

// ── coreset ──

#[derive(Args)]
struct CoresetArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Pretraining checkpoint providing the model and config.
    #[arg(long)]
    checkpoint: PathBuf,
    /// How many facts from the stream order to inspect.
    #[arg(long, default_value_t = 5)]
    count: usize,
    /// Inspect one specific fact id instead.
    #[arg(long)]
    fact_id: Option<u32>,
    /// Output JSON file.
    #[arg(long)]
    out: PathBuf,
}

fn run_coreset(args: CoresetArgs) -> anyhow::Result<()> {
    let ck = load_checkpoint(&args.checkpoint)?;
    let run = patch_config(&ck.config, args.cfg.config.as_deref(), &args.cfg.set)?;
    let model: Model = ck.build_model()?;
    let data = FactDataset::generate(&run.data, run.model.vocab_size)?;
    let facts: Vec<&FactRecord> = match args.fact_id {
        Some(id) => {
            let fact = data
                .stream_facts
                .iter()
                .chain(data.pretrain_facts.iter())
                .find(|f| f.fact_id == id)
                .ok_or_else(|| anyhow::anyhow!("no fact with id {id}"))?;
            vec![fact]
        }
        None => stream_fact_order(&data, &run.stream)
            .iter()
            .take(args.count)
            .map(|&i| &data.stream_facts[i])
            .collect(),
    };
    let reports: Vec<CoreSetReport> = facts
        .iter()
        .map(|f| compute_core_set(&model, &data, f))
        .collect::<Result<_, _>>()?;
    if let Some(dir) = args.out.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    std::fs::write(&args.out, serde_json::to_string_pretty(&reports)? + "\n")?;
    for report in &reports {
        println!("fact {}: {} core rows {:?}", report.fact_id, report.core.len(), report.core);
        for seq in &report.sequences {
            let peak = seq.core_hits_per_pos.iter().max().copied().unwrap_or(0);
            println!(
                "  {}: {} rows accessed, up to {peak}/{} core rows hit at one position",
                seq.label,
                seq.accessed,
                report.core.len()
            );
        }
    }
    println!("wrote {}", args.out.display());
    Ok(())
}

// ── report ──

#[derive(Args)]
struct ReportArgs {
    /// metrics.jsonl files written by `memft stream`.
    #[arg(required = true)]
    inputs: Vec<PathBuf>,
    /// Also write the summary table as CSV.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn run_report(args: ReportArgs) -> anyhow::Result<()> {
    let headers = [
        "file",
        "evals",
        "facts",
        "final_target_acc",
        "baseline_heldout_acc",
        "final_heldout_acc",
        "heldout_drop",
        "baseline_heldout_nll",
        "final_heldout_nll",
        "nll_increase",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    let mut body = Vec::with_capacity(args.inputs.len());
    for path in &args.inputs {
        let evals: Vec<EvalReport> =
            read_jsonl(path).with_context(|| format!("reading {}", path.display()))?;
        let (first, last) = match (evals.first(), evals.last()) {
            (Some(f), Some(l)) => (f, l),
            _ => anyhow::bail!("{} has no eval records", path.display()),
        };
        body.push(vec![
            path.display().to_string(),
            evals.len().to_string(),
            last.facts_seen.to_string(),
            fmt_f64(last.target_acc),
            fmt_f64(first.heldout_acc),
            fmt_f64(last.heldout_acc),
            fmt_f64(first.heldout_acc - last.heldout_acc),
            fmt_f64(first.heldout_nll),
            fmt_f64(last.heldout_nll),
            fmt_f64(last.heldout_nll - first.heldout_nll),
        ]);
    }
    let table = CsvTable { headers, rows: body };
    print!("{}", table.render());
    if let Some(out) = &args.out {
        table.write(out)?;
        println!("wrote {}", out.display());
    }
    Ok(())
}
