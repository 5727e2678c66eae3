//! `lampret` command-line surface: dataset generation/ingestion, pretraining
//! with the five objectives, downstream fine-tuning, evaluation, and
//! checkpoint inspection.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use lampret_core::baselines::Modality;
use lampret_core::checkpoint::{
    acquire_lock, inspect, load_checkpoint, save_checkpoint, CheckpointError,
};
use lampret_core::config::{ConfigError, RunConfig};
use lampret_core::features::Vocab;
use lampret_core::ingest::{generate_synthetic, parse_html, read_all, write_dataset, CorpusSpec};
use lampret_core::layout::{sort_and_serialize, Document};
use lampret_core::nnet::{init_params, Adam, ParamStore};
use lampret_core::tasks::{
    build_image_suggestion, build_text_fill, TaskError, TEXT_FILL_K, TEXT_FILL_MARGIN_Y,
};
use lampret_core::train::{
    assemble_corpus, build_report, evaluate, finetune, pretrain_steps, split_docs, TaskInstances,
    TrainError,
};

pub const CORPUS_FILE: &str = "corpus.jsonl";
pub const VOCAB_FILE: &str = "vocab.txt";
pub const LOG_FILE: &str = "train_log.jsonl";

#[derive(Parser)]
#[command(name = "lampret", version, about = "layout-aware multimodal document pretraining")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// flat TOML config file
    #[arg(long)]
    config: Option<PathBuf>,
    /// override any config key, e.g. --set batch_size=4 (repeatable)
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// shorthand for --set aggregator=...
    #[arg(long)]
    aggregator: Option<String>,
    /// shorthand for --set modality=...
    #[arg(long)]
    modality: Option<String>,
    /// shorthand for --set seed=...
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus (plus vocabulary) and print its statistics
    Generate {
        /// TOML file holding the corpus spec
        #[arg(long)]
        spec: PathBuf,
        /// output directory for corpus.jsonl and vocab.txt
        #[arg(long)]
        out: PathBuf,
        /// vocabulary size budget
        #[arg(long, default_value_t = 1000)]
        vocab_size: usize,
    },
    /// Parse an HTML file into dataset records
    Ingest {
        /// input HTML file
        #[arg(long)]
        input: PathBuf,
        /// document id for the parsed page
        #[arg(long)]
        doc_id: String,
        /// output dataset file (JSONL, overwritten)
        #[arg(long)]
        out: PathBuf,
    },
    /// Pretrain with the five objectives
    Pretrain {
        #[command(flatten)]
        config: ConfigArgs,
        /// continue from the checkpoint in checkpoint_dir
        #[arg(long)]
        resume: bool,
    },
    /// Fine-tune on a downstream task
    Finetune {
        #[command(flatten)]
        config: ConfigArgs,
        /// text-fill | image-suggestion
        #[arg(long)]
        task: String,
        /// start from random parameters instead of the pretrain checkpoint
        #[arg(long)]
        from_scratch: bool,
        /// use the paper's Eq. 3 exactly as printed (inverted pair labels)
        #[arg(long)]
        eq3_as_printed: bool,
    },
    /// Evaluate a fine-tuned model; prints a JSON metric report
    Evaluate {
        #[command(flatten)]
        config: ConfigArgs,
        /// text-fill | image-suggestion
        #[arg(long)]
        task: String,
        #[arg(long)]
        eq3_as_printed: bool,
    },
    /// Summarize a checkpoint directory
    InspectCheckpoint {
        #[arg(long)]
        dir: PathBuf,
    },
}

#[derive(Debug)]
enum CliError {
    /// user/config mistakes → exit 2
    Validation(String),
    /// everything else → exit 1
    Runtime(String),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Validation(m) | CliError::Runtime(m) => f.write_str(m),
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Validation(e.to_string())
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        match e {
            CheckpointError::CheckpointMismatch { .. }
            | CheckpointError::MissingCheckpoint(_)
            | CheckpointError::Locked(_) => CliError::Validation(e.to_string()),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Task(TaskError::TextOnlyModality) | TrainError::EmptyTrainSplit => {
                CliError::Validation(e.to_string())
            }
            other => CliError::Runtime(other.to_string()),
        }
    }
}

fn runtime<E: std::fmt::Display>(e: E) -> CliError {
    CliError::Runtime(e.to_string())
}

fn main() -> ExitCode {
    env_logger::init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Validation(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(CliError::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}

fn resolve_config(args: &ConfigArgs) -> Result<RunConfig, CliError> {
    let mut overrides: Vec<(String, String)> = Vec::new();
    for s in &args.sets {
        let (k, v) = s
            .split_once('=')
            .ok_or_else(|| CliError::Validation(format!("--set expects KEY=VALUE, got {s:?}")))?;
        overrides.push((k.trim().to_string(), v.trim().to_string()));
    }
    if let Some(a) = &args.aggregator {
        overrides.push(("aggregator".into(), a.clone()));
    }
    if let Some(m) = &args.modality {
        overrides.push(("modality".into(), m.clone()));
    }
    if let Some(s) = args.seed {
        overrides.push(("seed".into(), s.to_string()));
    }
    Ok(RunConfig::resolve(args.config.as_deref(), &overrides)?)
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn cmd_generate(spec_path: &Path, out: &Path, vocab_size: usize) -> Result<(), CliError> {
    let text = std::fs::read_to_string(spec_path).map_err(runtime)?;
    let spec: CorpusSpec = toml::from_str(&text)
        .map_err(|e| CliError::Validation(format!("corpus spec: {e}")))?;
    spec.validate().map_err(CliError::Validation)?;
    let docs = generate_synthetic(&spec);
    std::fs::create_dir_all(out).map_err(runtime)?;
    let n = write_dataset(docs.iter(), &out.join(CORPUS_FILE)).map_err(runtime)?;

    let words: Vec<&str> = docs
        .iter()
        .flat_map(|d| d.blocks.iter().flat_map(|b| b.text.split_whitespace()))
        .collect();
    let vocab = Vocab::build_from_words(words, vocab_size);
    vocab.save(&out.join(VOCAB_FILE)).map_err(runtime)?;

    let blocks: Vec<f64> = docs.iter().map(|d| d.blocks.len() as f64).collect();
    let images: Vec<f64> = docs.iter().map(|d| d.image_count() as f64).collect();
    let (bm, bs) = mean_std(&blocks);
    let (im, is) = mean_std(&images);
    println!("wrote {n} documents to {}", out.join(CORPUS_FILE).display());
    println!("vocabulary: {} tokens", vocab.len());
    println!("blocks per document: mean {bm:.3} std {bs:.3}");
    println!("images per document: mean {im:.3} std {is:.3}");
    Ok(())
}

fn cmd_ingest(input: &Path, doc_id: &str, out: &Path) -> Result<(), CliError> {
    let bytes = std::fs::read(input).map_err(runtime)?;
    let outcome = parse_html(&bytes, doc_id)
        .map_err(|e| CliError::Validation(format!("parse {}: {e}", input.display())))?;
    for w in &outcome.warnings {
        eprintln!("warning: {w:?}");
    }
    if let Some(dir) = out.parent() {
        std::fs::create_dir_all(dir).map_err(runtime)?;
    }
    let n = write_dataset([&outcome.document], out).map_err(runtime)?;
    println!(
        "wrote {n} document(s), {} blocks, to {}",
        outcome.document.blocks.len(),
        out.display()
    );
    Ok(())
}

fn load_corpus(cfg: &RunConfig) -> Result<(Vec<Document>, Vocab), CliError> {
    let dir = Path::new(&cfg.data_dir);
    let docs = read_all(&dir.join(CORPUS_FILE))
        .map_err(|e| CliError::Validation(format!("dataset {}: {e}", dir.display())))?;
    let vocab = Vocab::load(&dir.join(VOCAB_FILE))
        .map_err(|e| CliError::Validation(format!("vocab {}: {e}", dir.display())))?;
    Ok((docs, vocab))
}

fn cmd_pretrain(cfg: &RunConfig, resume: bool) -> Result<(), CliError> {
    let (docs, vocab) = load_corpus(cfg)?;
    let modality = cfg.modality_kind()?;
    let (train_docs, _, _) = split_docs(docs);
    let train_seqs = assemble_corpus(&train_docs, &vocab, &cfg.limits(), modality)?;

    let ckpt_dir = Path::new(&cfg.checkpoint_dir);
    let _lock = acquire_lock(ckpt_dir)?;
    let canonical = cfg.canonical();
    let (mut store, mut adam, mut step) = if resume {
        let (manifest, store, adam) = load_checkpoint(ckpt_dir, Some(&canonical))?;
        let adam = adam.ok_or_else(|| {
            CliError::Validation("checkpoint has no optimizer state; cannot resume".into())
        })?;
        (store, adam, manifest.step)
    } else {
        let store: ParamStore<f32> = init_params(&cfg.model_config(), cfg.seed);
        let adam = Adam::new(&store);
        (store, adam, 0)
    };

    let log_path = ckpt_dir.join(LOG_FILE);
    use std::io::Write;
    let mut log = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&log_path)
        .map_err(runtime)?;
    while step < cfg.pretrain_steps {
        let to = (step + cfg.checkpoint_every).min(cfg.pretrain_steps);
        let logs = pretrain_steps(cfg, &train_seqs, &mut store, &mut adam, step, to)?;
        for entry in &logs {
            writeln!(log, "{}", serde_json::to_string(entry).map_err(runtime)?)
                .map_err(runtime)?;
            if entry.step % cfg.eval_every == 0 || entry.step + 1 == cfg.pretrain_steps {
                println!(
                    "step {:6}  total {:.4}  mlm {:.4} itm {:.4} bord {:.4} bmlm {:.4} imgfit {:.4}  lr {:.2e}",
                    entry.step, entry.total, entry.l_mlm, entry.l_itm, entry.l_bord,
                    entry.l_bmlm, entry.l_imgfit, entry.lr
                );
            }
        }
        step = to;
        save_checkpoint(ckpt_dir, &canonical, step, cfg.seed, &store, Some(&adam))?;
    }
    println!("pretraining finished at step {step}; checkpoint in {}", ckpt_dir.display());
    Ok(())
}

fn build_instances(
    cfg: &RunConfig,
    task: &str,
    docs: &[Document],
    pool: &[Document],
    rng: &mut ChaCha8Rng,
) -> Result<TaskInstances, CliError> {
    match task {
        "text-fill" => {
            let mut out = Vec::new();
            for doc in docs {
                let (sorted, _) = sort_and_serialize(doc).map_err(runtime)?;
                match build_text_fill(&sorted, TEXT_FILL_K, TEXT_FILL_MARGIN_Y, rng) {
                    Ok(i) => out.push(i),
                    Err(TaskError::Skip(_)) => continue,
                    Err(e) => return Err(runtime(e)),
                }
            }
            Ok(TaskInstances::TextFill(out))
        }
        "image-suggestion" => {
            if cfg.modality_kind()? == Modality::TextOnly {
                return Err(CliError::Validation(
                    "image-suggestion requires the multimodal modality".into(),
                ));
            }
            let eval_docs: Vec<Document> = docs
                .iter()
                .filter(|d| d.image_count() > 0)
                .map(|d| sort_and_serialize(d).map(|(s, _)| s))
                .collect::<Result<_, _>>()
                .map_err(runtime)?;
            build_image_suggestion(&eval_docs, pool, cfg.eval_pool_size, rng)
                .map(TaskInstances::ImageSuggest)
                .map_err(|e| match e {
                    TaskError::PoolTooSmall { .. } => CliError::Validation(e.to_string()),
                    other => runtime(other),
                })
        }
        other => Err(CliError::Validation(format!(
            "unknown task {other:?} (expected text-fill or image-suggestion)"
        ))),
    }
}

fn finetune_dir(cfg: &RunConfig, task: &str) -> PathBuf {
    Path::new(&cfg.checkpoint_dir).join(format!("finetune-{task}"))
}

fn cmd_finetune(
    cfg: &RunConfig,
    task: &str,
    from_scratch: bool,
    eq3_as_printed: bool,
) -> Result<(), CliError> {
    let (docs, vocab) = load_corpus(cfg)?;
    let (train_docs, _, _) = split_docs(docs);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x66696e65);
    let instances = build_instances(cfg, task, &train_docs, &train_docs, &mut rng)?;
    if instances.is_empty() {
        return Err(CliError::Validation("no fine-tuning instances constructed".into()));
    }

    let canonical = cfg.canonical();
    let mut store = if from_scratch {
        init_params(&cfg.model_config(), cfg.seed)
    } else {
        let (_, store, _) = load_checkpoint(Path::new(&cfg.checkpoint_dir), Some(&canonical))?;
        store
    };
    let mut adam = Adam::new(&store);
    let out_dir = finetune_dir(cfg, task);
    let _lock = acquire_lock(&out_dir)?;
    let losses = finetune(
        cfg,
        &instances,
        &vocab,
        &mut store,
        &mut adam,
        cfg.finetune_steps,
        eq3_as_printed,
    )?;
    save_checkpoint(&out_dir, &canonical, cfg.finetune_steps, cfg.seed, &store, Some(&adam))?;
    println!(
        "fine-tuned {task} on {} instances for {} steps (final loss {:.4}); checkpoint in {}",
        instances.len(),
        cfg.finetune_steps,
        losses.last().copied().unwrap_or(0.0),
        out_dir.display()
    );
    Ok(())
}

fn cmd_evaluate(cfg: &RunConfig, task: &str, eq3_as_printed: bool) -> Result<(), CliError> {
    let (docs, vocab) = load_corpus(cfg)?;
    let (train_docs, val_docs, test_docs) = split_docs(docs);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x6576616c);
    let val = build_instances(cfg, task, &val_docs, &train_docs, &mut rng)?;
    let test = build_instances(cfg, task, &test_docs, &train_docs, &mut rng)?;
    if test.is_empty() {
        return Err(CliError::Validation("no evaluation instances constructed".into()));
    }

    let canonical = cfg.canonical();
    let dir = finetune_dir(cfg, task);
    let dir = if dir.join("manifest.json").exists() {
        dir
    } else {
        PathBuf::from(&cfg.checkpoint_dir)
    };
    let (_, store, _) = load_checkpoint(&dir, Some(&canonical))?;

    let (_, val_d, val_g) = evaluate(cfg, &val, &vocab, &store, eq3_as_printed)?;
    let test_out = evaluate(cfg, &test, &vocab, &store, eq3_as_printed)?;
    let report = build_report(cfg, task, &test_out, &(val_d, val_g))?;
    println!("{}", serde_json::to_string_pretty(&report).map_err(runtime)?);
    Ok(())
}

fn run(command: Command) -> Result<(), CliError> {
    match command {
        Command::Generate { spec, out, vocab_size } => cmd_generate(&spec, &out, vocab_size),
        Command::Ingest { input, doc_id, out } => cmd_ingest(&input, &doc_id, &out),
        Command::Pretrain { config, resume } => {
            let cfg = resolve_config(&config)?;
            cmd_pretrain(&cfg, resume)
        }
        Command::Finetune { config, task, from_scratch, eq3_as_printed } => {
            let cfg = resolve_config(&config)?;
            cmd_finetune(&cfg, &task, from_scratch, eq3_as_printed)
        }
        Command::Evaluate { config, task, eq3_as_printed } => {
            let cfg = resolve_config(&config)?;
            cmd_evaluate(&cfg, &task, eq3_as_printed)
        }
        Command::InspectCheckpoint { dir } => {
            print!("{}", inspect(&dir)?);
            Ok(())
        }
    }
}
