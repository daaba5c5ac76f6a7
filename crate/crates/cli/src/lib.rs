//! Command-line front end: corpus segmentation, pretraining, fine-tuning,
//! gradient checks, probing and file inspection.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use segalm::checkpoint::{self, read_tensors, CONFIG_FILE, PARAMS_FILE};
use segalm::config::RunConfig;
use segalm::corpus::build_pretraining;
use segalm::embeddings::PositionScheme;
use segalm::example::{Example, Packer};
use segalm::example_file::{parse_examples, read_examples, write_examples};
use segalm::finetune::{
    evaluate_task, finetune, load_backbone, save_finetune, sweep, FinetuneConfig, TaskSet,
};
use segalm::gradcheck::toy_report;
use segalm::heads::FinetuneModel;
use segalm::mlm::{Trainer, MetricRecord};
use segalm::mlm::trainer::{load_pretrain, checkpoint_model_config};
use segalm::model::PretrainModel;
use segalm::probe::{collect, run_probe};
use segalm::tasks::load_task;
use segalm::tokenizer::Vocab;

pub const THREADS_ENV: &str = "SEGALM_THREADS";

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SchemeArg {
    Sega,
    Global,
    #[value(name = "global_ps")]
    GlobalPs,
}

impl From<SchemeArg> for PositionScheme {
    fn from(s: SchemeArg) -> Self {
        match s {
            SchemeArg::Sega => PositionScheme::Sega,
            SchemeArg::Global => PositionScheme::Global,
            SchemeArg::GlobalPs => PositionScheme::GlobalPs,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "segalm", version, about = "Segment-aware position embeddings for masked-LM pretraining and fine-tuning")]
pub struct Cli {
    /// TOML run configuration; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true, value_enum)]
    pub scheme: Option<SchemeArg>,
    /// Sequential reductions; results do not depend on the thread count either way.
    #[arg(long, global = true)]
    pub deterministic: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Tokenize, segment and pack a corpus into an example file.
    Segment {
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        vocab: Option<PathBuf>,
        /// Example file to write.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        max_len: Option<usize>,
    },
    /// Masked-LM pretraining.
    Pretrain {
        #[arg(long)]
        vocab: Option<PathBuf>,
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        examples: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        steps: Option<u64>,
        /// Continue from a checkpoint directory written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Fine-tune a pretrained checkpoint on a task file.
    Finetune {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        vocab: Option<PathBuf>,
        #[arg(long)]
        task: Option<PathBuf>,
        #[arg(long)]
        dev: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Sweep the `[grid]` configurations and keep the best on dev.
        #[arg(long)]
        sweep: bool,
    },
    /// Finite-difference gradient check of the toy model and its heads.
    Gradcheck {
        #[arg(long)]
        out: Option<PathBuf>,
        /// Scale the analytic gradient of this tensor by 1.5.
        #[arg(long)]
        fault: Option<String>,
    },
    /// Linear sentence-index probe on frozen final hidden states.
    Probe {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        vocab: Option<PathBuf>,
        #[arg(long)]
        examples: Option<PathBuf>,
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Dump an example file or checkpoint as JSON lines.
    Inspect {
        path: PathBuf,
        #[arg(long)]
        limit: Option<usize>,
    },
}

/// Installs the global worker pool, capped by `SEGALM_THREADS`.
pub fn init_threads() -> Result<()> {
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let n: usize = v
            .trim()
            .parse()
            .map_err(|_| anyhow!("{THREADS_ENV}={v:?} is not a thread count"))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()
            .context("building the worker pool")?;
    }
    Ok(())
}

/// Config file plus flag overrides. The second value records whether a
/// scheme was asked for explicitly.
fn resolve_config(cli: &Cli) -> Result<(RunConfig, bool)> {
    let (mut cfg, mut explicit) = match &cli.config {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
            let table: toml::Table = text.parse().with_context(|| format!("parsing {}", p.display()))?;
            (RunConfig::parse(&text, p)?, table.contains_key("scheme"))
        }
        None => (RunConfig::default(), false),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(s) = cli.scheme {
        cfg.scheme = s.into();
        explicit = true;
    }
    if cli.deterministic {
        cfg.deterministic = true;
    }
    Ok((cfg, explicit))
}

fn set(slot: &mut Option<PathBuf>, flag: &Option<PathBuf>) {
    if flag.is_some() {
        slot.clone_from(flag);
    }
}

fn need<'a>(p: &'a Option<PathBuf>, what: &str) -> Result<&'a PathBuf> {
    p.as_ref()
        .ok_or_else(|| anyhow!("missing {what}: pass --{what} or set paths.{what} in the config"))
}

fn load_vocab(p: &Option<PathBuf>) -> Result<Vocab> {
    let path = need(p, "vocab")?;
    Vocab::load(path).with_context(|| format!("loading vocab {}", path.display()))
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn write_snapshot(dir: &Path, cfg: &RunConfig) -> Result<()> {
    checkpoint::create_dir(dir)?;
    checkpoint::write_text(&dir.join(CONFIG_FILE), &cfg.snapshot())?;
    Ok(())
}

fn read_corpus(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading corpus {}", path.display()))
}

/// Examples from an example file when one is configured, otherwise from
/// segmenting the corpus.
fn pretraining_examples(cfg: &RunConfig, vocab: &Vocab) -> Result<Vec<Example>> {
    if let Some(p) = &cfg.paths.examples {
        if cfg.paths.corpus.is_none() || p.exists() {
            return read_examples(p, vocab.hash()).with_context(|| format!("reading examples {}", p.display()));
        }
    }
    let corpus = read_corpus(need(&cfg.paths.corpus, "corpus")?)?;
    Ok(build_pretraining(&corpus, vocab, &cfg.caps, cfg.model.max_len).0)
}

pub fn run(cli: Cli, out: &mut dyn Write) -> Result<()> {
    let (mut cfg, scheme_explicit) = resolve_config(&cli)?;
    match &cli.command {
        Command::Segment {
            corpus,
            vocab,
            out: dest,
            max_len,
        } => {
            set(&mut cfg.paths.corpus, corpus);
            set(&mut cfg.paths.vocab, vocab);
            set(&mut cfg.paths.examples, dest);
            if let Some(m) = max_len {
                cfg.model.max_len = *m;
            }
            let cfg = finish(cfg)?;
            cmd_segment(&cfg, out)
        }
        Command::Pretrain {
            vocab,
            corpus,
            examples,
            out: dir,
            steps,
            resume,
        } => {
            set(&mut cfg.paths.vocab, vocab);
            set(&mut cfg.paths.corpus, corpus);
            set(&mut cfg.paths.examples, examples);
            set(&mut cfg.paths.out_dir, dir);
            if let Some(s) = steps {
                cfg.trainer.total_steps = *s;
            }
            let cfg = finish(cfg)?;
            cmd_pretrain(&cfg, resume.as_deref(), out)
        }
        Command::Finetune {
            checkpoint,
            vocab,
            task,
            dev,
            out: dir,
            sweep,
        } => {
            set(&mut cfg.paths.checkpoint, checkpoint);
            set(&mut cfg.paths.vocab, vocab);
            set(&mut cfg.paths.task, task);
            set(&mut cfg.paths.dev_task, dev);
            set(&mut cfg.paths.out_dir, dir);
            cfg.finetune.sweep |= *sweep;
            let cfg = finish(cfg)?;
            cmd_finetune(&cfg, scheme_explicit, out)
        }
        Command::Gradcheck { out: dir, fault } => {
            set(&mut cfg.paths.out_dir, dir);
            let cfg = finish(cfg)?;
            cmd_gradcheck(&cfg, fault.as_deref(), out)
        }
        Command::Probe {
            checkpoint,
            vocab,
            examples,
            corpus,
            out: dir,
        } => {
            set(&mut cfg.paths.checkpoint, checkpoint);
            set(&mut cfg.paths.vocab, vocab);
            set(&mut cfg.paths.examples, examples);
            set(&mut cfg.paths.corpus, corpus);
            set(&mut cfg.paths.out_dir, dir);
            let cfg = finish(cfg)?;
            cmd_probe(&cfg, out)
        }
        Command::Inspect { path, limit } => cmd_inspect(path, *limit, out),
    }
}

fn finish(mut cfg: RunConfig) -> Result<RunConfig> {
    cfg.propagate();
    Ok(cfg.validated()?)
}

pub fn cmd_segment(cfg: &RunConfig, out: &mut dyn Write) -> Result<()> {
    let vocab = load_vocab(&cfg.paths.vocab)?;
    let corpus_path = need(&cfg.paths.corpus, "corpus")?;
    let dest = need(&cfg.paths.examples, "examples")?;
    let corpus = read_corpus(corpus_path)?;
    let (xs, stats) = build_pretraining(&corpus, &vocab, &cfg.caps, cfg.model.max_len);
    if xs.is_empty() {
        eprintln!("warning: {} produced no examples", corpus_path.display());
    }
    if let Some(parent) = dest.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    write_examples(dest, cfg.model.max_len, vocab.hash(), &xs)
        .with_context(|| format!("writing examples {}", dest.display()))?;
    let report = json!({
        "examples_path": dest,
        "vocab_hash": vocab.hash(),
        "max_len": cfg.model.max_len,
        "stats": stats,
    });
    if let Some(dir) = &cfg.paths.out_dir {
        write_snapshot(dir, cfg)?;
        write_json(&dir.join("segment_stats.json"), &report)?;
    }
    writeln!(out, "{}", serde_json::to_string(&report)?)?;
    Ok(())
}

pub fn cmd_pretrain(cfg: &RunConfig, resume: Option<&Path>, out: &mut dyn Write) -> Result<()> {
    let vocab = load_vocab(&cfg.paths.vocab)?;
    let dir = need(&cfg.paths.out_dir, "out_dir")?;
    let data = pretraining_examples(cfg, &vocab)?;
    let snapshot = cfg.snapshot();
    let mut trainer = match resume {
        Some(r) => {
            let t = Trainer::<f32>::resume(r, data, vocab.specials())
                .with_context(|| format!("resuming from {}", r.display()))?;
            if t.config.total_steps != cfg.trainer.total_steps {
                eprintln!(
                    "warning: resuming keeps the checkpoint's {} total steps",
                    t.config.total_steps
                );
            }
            t.with_snapshot(snapshot)
        }
        None => {
            let mcfg = cfg.model_config(&vocab);
            let mut model = PretrainModel::<f32>::init(mcfg, &mut ChaCha8Rng::seed_from_u64(cfg.seed));
            model.backbone.embeddings.layer_norm = cfg.model.layer_norm;
            Trainer::new(model, cfg.trainer, data, vocab.specials())?.with_snapshot(snapshot)
        }
    };
    write_snapshot(dir, cfg)?;
    let mut first: Option<MetricRecord> = None;
    let mut last: Option<MetricRecord> = None;
    let every = (cfg.trainer.total_steps / 20).max(1);
    let final_dir = trainer.run(dir, |r| {
        if first.is_none() {
            first = Some(r.clone());
        }
        if r.step % every == 0 {
            eprintln!("step {:>6}  lr {:.3e}  loss {:.4}  acc {:.3}", r.step, r.lr, r.loss, r.masked_acc);
        }
        last = Some(r.clone());
    })?;
    let report = json!({
        "final_checkpoint": final_dir,
        "steps": trainer.state.step,
        "first": first,
        "last": last,
    });
    writeln!(out, "{}", serde_json::to_string(&report)?)?;
    Ok(())
}

pub fn cmd_finetune(cfg: &RunConfig, scheme_explicit: bool, out: &mut dyn Write) -> Result<()> {
    let vocab = load_vocab(&cfg.paths.vocab)?;
    let ckpt = need(&cfg.paths.checkpoint, "checkpoint")?;
    let dir = need(&cfg.paths.out_dir, "out_dir")?;
    let requested = scheme_explicit.then_some(cfg.scheme);
    let (mcfg, backbone) = load_backbone::<f32>(ckpt, requested)?;
    let data = load_task(need(&cfg.paths.task, "task")?)?;
    let kind = data.infer_kind();
    let packer = Packer::new(vocab.specials(), mcfg.caps, cfg.model.max_len);
    let (set, mut dropped) = TaskSet::build(&data, &vocab, &packer, kind)?;
    let (train, dev) = match &cfg.paths.dev_task {
        Some(p) => {
            let (dev, d) = TaskSet::build(&load_task(p)?, &vocab, &packer, kind)?;
            dropped += d;
            (set, dev)
        }
        None => set.split(cfg.finetune.dev_fraction, cfg.seed),
    };
    if train.is_empty() {
        bail!("task file yields no training examples");
    }
    let base = FinetuneModel::new(
        mcfg,
        backbone,
        kind,
        vocab.specials(),
        &mut ChaCha8Rng::seed_from_u64(cfg.seed),
    );
    let train_xs = train.examples();
    let mut ft = cfg.finetune_config(kind);
    write_snapshot(dir, cfg)?;
    let mut grid_report = Vec::new();
    if cfg.finetune.sweep {
        let results = sweep(&base, &train_xs, &dev, &cfg.grid.configs(&ft))?;
        let best = results
            .iter()
            .max_by(|a, b| a.1.primary().total_cmp(&b.1.primary()))
            .map(|(c, _)| *c)
            .ok_or_else(|| anyhow!("empty grid"))?;
        grid_report = results
            .into_iter()
            .map(|(c, m)| json!({"lr": c.lr, "batch_size": c.batch_size, "epochs": c.epochs, "dev": m}))
            .collect();
        ft = FinetuneConfig { ..best };
    }
    let mut model = base;
    let epochs = finetune(&mut model, &train_xs, &ft, |r| {
        eprintln!("epoch {}  step {}  loss {:.4}", r.epoch, r.step, r.loss);
    })?;
    let report = json!({
        "task": kind,
        "config": ft,
        "dropped_records": dropped,
        "epochs": epochs,
        "train": evaluate_task(&model, &train)?,
        "dev": if dev.is_empty() { serde_json::Value::Null } else { serde_json::to_value(evaluate_task(&model, &dev)?)? },
        "grid": grid_report,
    });
    save_finetune(&dir.join("final"), &model, &cfg.snapshot())?;
    write_json(&dir.join("metrics.json"), &report)?;
    writeln!(out, "{}", serde_json::to_string(&report)?)?;
    Ok(())
}

pub fn cmd_gradcheck(cfg: &RunConfig, fault: Option<&str>, out: &mut dyn Write) -> Result<()> {
    let report = toy_report(cfg.scheme, cfg.seed, &cfg.gradcheck, fault);
    let value = serde_json::to_value(&report)?;
    if let Some(dir) = &cfg.paths.out_dir {
        write_snapshot(dir, cfg)?;
        write_json(&dir.join("gradcheck.json"), &value)?;
    }
    for g in &report.groups {
        writeln!(out, "{}", serde_json::to_string(g)?)?;
    }
    if !report.passed() {
        bail!(
            "gradient check failed (tolerance {:e}) for: {}",
            report.tolerance,
            report.failed_groups().join(", ")
        );
    }
    Ok(())
}

pub fn cmd_probe(cfg: &RunConfig, out: &mut dyn Write) -> Result<()> {
    let vocab = load_vocab(&cfg.paths.vocab)?;
    let ckpt = need(&cfg.paths.checkpoint, "checkpoint")?;
    let model = load_pretrain::<f32>(ckpt).with_context(|| format!("loading {}", ckpt.display()))?;
    if model.config.vocab_size != vocab.len() {
        bail!(
            "checkpoint has {} vocab entries, {} has {}",
            model.config.vocab_size,
            need(&cfg.paths.vocab, "vocab")?.display(),
            vocab.len()
        );
    }
    let xs = pretraining_examples(cfg, &vocab)?;
    let data = collect(&model.backbone, &xs, &vocab.specials(), model.config.sep_id)?;
    let report = run_probe(&data, &cfg.probe);
    let value = json!({
        "scheme": model.config.scheme,
        "accuracy": report.accuracy,
        "baseline": report.baseline,
        "margin": report.accuracy - report.baseline,
        "report": report,
    });
    if let Some(dir) = &cfg.paths.out_dir {
        write_snapshot(dir, cfg)?;
        write_json(&dir.join("probe.json"), &value)?;
    }
    writeln!(out, "{}", serde_json::to_string(&value)?)?;
    Ok(())
}

fn example_json(index: usize, ex: &Example) -> serde_json::Value {
    let n = ex.active_len();
    json!({
        "index": index,
        "kind": ex.kind,
        "labels": ex.labels,
        "len": n,
        "ids": &ex.ids[..n],
        "triples": (0..n).map(|i| [ex.p[i], ex.s[i], ex.t[i]]).collect::<Vec<_>>(),
    })
}

/// Example files print their header and one line per record; checkpoint
/// directories or parameter files print their metadata and tensor shapes.
pub fn cmd_inspect(path: &Path, limit: Option<usize>, out: &mut dyn Write) -> Result<()> {
    let params = if path.is_dir() { path.join(PARAMS_FILE) } else { path.to_path_buf() };
    let bytes = fs::read(&params).with_context(|| format!("reading {}", params.display()))?;
    if bytes.starts_with(b"SEGT") {
        let (meta, tensors) = read_tensors::<f64>(&params)?;
        writeln!(out, "{}", serde_json::to_string(&json!({"meta": meta}))?)?;
        for (name, m) in tensors.0.iter().take(limit.unwrap_or(usize::MAX)) {
            writeln!(out, "{}", serde_json::to_string(&json!({"tensor": name, "shape": [m.rows, m.cols]}))?)?;
        }
        if path.is_dir() {
            if let Ok((kind, _)) = checkpoint_model_config(path) {
                eprintln!("{} checkpoint", kind);
            }
        }
        return Ok(());
    }
    let (header, xs) = parse_examples(&bytes).with_context(|| format!("parsing {}", path.display()))?;
    writeln!(out, "{}", serde_json::to_string(&json!({"header": header}))?)?;
    for (i, ex) in xs.iter().enumerate().take(limit.unwrap_or(usize::MAX)) {
        writeln!(out, "{}", serde_json::to_string(&example_json(i, ex))?)?;
    }
    Ok(())
}
