use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use span_ner::corpus::{
    audit, corpus_stats, document_split, fix, load_corpus, read_documents, read_records, split_sentences_entity_safe,
    synth_corpus, write_corpus, write_records, Corpus, LoadOptions, Sentence, SplitRatios, SynthConfig,
};
use span_ner::decode::check_threshold;
use span_ner::model::Checkpoint;
use span_ner::tensor::Scalar;
use span_ner::train::{
    archive_precision, gradient_check, GradcheckConfig, ModelArchive, Precision, Predictor, TrainConfig, Trainer,
};
use span_ner::{Error, Result};

#[derive(Parser)]
#[command(name = "span-ner", version, about = "Nested named entity recognition over span grids")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// TOML file with training (or, for `gen`, generator) settings.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Corpus directory (train/dev/test.jsonl) or a single JSONL file.
    #[arg(long, global = true)]
    data: Option<PathBuf>,
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    threshold: Option<f64>,
    #[arg(long, global = true)]
    precision: Option<Precision>,
}

#[derive(Subcommand)]
enum Command {
    /// Split documents into sentences, repair annotations and split by document.
    Preprocess {
        #[arg(long, default_value_t = 0.8)]
        train: f64,
        #[arg(long, default_value_t = 0.1)]
        dev: f64,
        #[arg(long, default_value_t = 0.1)]
        test: f64,
    },
    /// Report conflicting and duplicate annotations; exits 1 if any are found.
    Audit {
        /// Write the repaired corpus to --out.
        #[arg(long)]
        fix: bool,
    },
    /// Per-split sentence and mention statistics as JSON.
    Stats,
    /// Generate a synthetic nested corpus.
    Gen {
        #[arg(long, default_value_t = 2000)]
        train: usize,
        #[arg(long, default_value_t = 200)]
        dev: usize,
        #[arg(long, default_value_t = 200)]
        test: usize,
    },
    Train {
        /// Continue from a checkpoint written with optimizer state.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Metrics of a checkpoint on one split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Decode sentences from --data and write scored entities as JSONL.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Finite-difference check of every model gradient.
    Gradcheck {
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
    },
}

fn require<'a>(p: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path> {
    p.as_deref().ok_or_else(|| Error::Config(format!("--{flag} is required")))
}

/// Writes a line to stdout; a closed pipe is not an error.
fn emit(line: &str) -> Result<()> {
    let mut out = std::io::stdout().lock();
    match writeln!(out, "{line}") {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(Error::Io {
            path: PathBuf::from("<stdout>"),
            source: e,
        }),
        _ => Ok(()),
    }
}

fn print_json<T: Serialize>(value: &T) -> Result<()> {
    emit(&serde_json::to_string_pretty(value).map_err(|e| Error::Format(e.to_string()))?)
}

fn train_config(g: &Global) -> Result<TrainConfig> {
    let mut cfg = match &g.config {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    };
    if let Some(s) = g.seed {
        cfg.seed = s;
    }
    if let Some(t) = g.threshold {
        cfg.threshold = t;
    }
    if let Some(p) = g.precision {
        cfg.precision = p;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn preprocess(g: &Global, ratios: SplitRatios) -> Result<()> {
    let docs = read_documents(require(&g.data, "data")?)?;
    let mut sentences: Vec<Sentence> = Vec::new();
    for (i, d) in docs.iter().enumerate() {
        let bounds = d.boundaries.clone().unwrap_or_else(|| d.punctuation_boundaries());
        let id = d.doc_id.clone().unwrap_or_else(|| format!("doc{i}"));
        sentences.extend(split_sentences_entity_safe(&d.tokens, &d.entities, &bounds, Some(&id)));
    }
    let before = audit(&sentences);
    let fixed = fix(&sentences);
    let corpus = document_split(fixed, ratios, g.seed.unwrap_or(0))?;
    for (name, split) in corpus.splits() {
        for (i, s) in split.iter().enumerate() {
            s.validate()
                .map_err(|e| Error::Validation(format!("{name} sentence {}: {e}", i + 1)))?;
        }
    }
    write_corpus(require(&g.out, "out")?, &corpus)?;
    log::info!(
        "{} documents, {} sentences, {} conflict groups and {} duplicates repaired",
        docs.len(),
        sentences.len(),
        before.conflicts.len(),
        before.duplicates.len()
    );
    print_json(&corpus_stats(&corpus))
}

fn read_unvalidated(path: &Path) -> Result<Corpus> {
    if path.is_dir() {
        let split = |name: &str| -> Result<Vec<Sentence>> {
            let p = path.join(format!("{name}.jsonl"));
            if p.exists() {
                read_records(&p)
            } else {
                Ok(Vec::new())
            }
        };
        Ok(Corpus::from_splits(split("train")?, split("dev")?, split("test")?))
    } else {
        Ok(Corpus::from_splits(read_records(path)?, Vec::new(), Vec::new()))
    }
}

fn audit_cmd(g: &Global, repair: bool) -> Result<bool> {
    let corpus = read_unvalidated(require(&g.data, "data")?)?;
    let mut reports = serde_json::Map::new();
    let mut clean = true;
    for (name, split) in corpus.splits() {
        let r = audit(split);
        clean &= r.is_clean();
        reports.insert(name.into(), serde_json::to_value(&r).expect("report serializes"));
    }
    print_json(&reports)?;
    if repair {
        let fixed = Corpus::from_splits(fix(&corpus.train), fix(&corpus.dev), fix(&corpus.test));
        write_corpus(require(&g.out, "out")?, &fixed)?;
    }
    Ok(clean)
}

fn gen(g: &Global, sizes: [usize; 3]) -> Result<()> {
    let mut cfg = match &g.config {
        Some(p) => SynthConfig::load(p)?,
        None => SynthConfig::default(),
    };
    if let Some(s) = g.seed {
        cfg.seed = s;
    }
    let corpus = synth_corpus(&cfg, sizes)?;
    write_corpus(require(&g.out, "out")?, &corpus)?;
    print_json(&corpus_stats(&corpus))
}

fn train<F: Scalar>(g: &Global, cfg: TrainConfig, resume: Option<&Path>) -> Result<()> {
    let corpus = load_corpus(require(&g.data, "data")?, &LoadOptions { max_len: Some(cfg.max_len) })?;
    let trainer = match resume {
        Some(p) => {
            let archive = ModelArchive::<F>::load(p)?;
            archive.check_compatible(&cfg)?;
            Trainer::resume(archive, &corpus)?
        }
        None => Trainer::<F>::new(cfg, &corpus)?,
    };
    let mut trainer = trainer.with_output(require(&g.out, "out")?)?;
    trainer.fit()?;
    let best = trainer.best_model();
    let predictor = Predictor {
        scorer: &best,
        vocab: &trainer.vocab,
        types: &trainer.types,
    };
    if !corpus.test.is_empty() {
        let c = &trainer.config;
        print_json(&predictor.evaluate(&corpus.test, c.threshold, c.label_mode, c.flatness)?)?;
    }
    Ok(())
}

fn load_archive<F: Scalar>(path: &Path, g: &Global) -> Result<ModelArchive<F>> {
    let archive = ModelArchive::<F>::load(path)?;
    if g.config.is_some() {
        archive.check_compatible(&train_config(g)?)?;
    }
    Ok(archive)
}

fn stored_precision(path: &Path) -> Result<Precision> {
    archive_precision(&Checkpoint::load(path)?)
}

fn eval<F: Scalar>(g: &Global, checkpoint: &Path, split: &str) -> Result<()> {
    let archive = load_archive::<F>(checkpoint, g)?;
    let corpus = load_corpus(require(&g.data, "data")?, &LoadOptions::default())?;
    let sentences = match split {
        "train" => &corpus.train,
        "dev" => &corpus.dev,
        "test" => &corpus.test,
        other => return Err(Error::Config(format!("unknown split {other:?}"))),
    };
    let (scorer, vocab, types) = (archive.scorer()?, archive.vocab(), archive.types());
    let t = &archive.header.train;
    let threshold = g.threshold.unwrap_or(t.threshold);
    let predictor = Predictor {
        scorer: &scorer,
        vocab: &vocab,
        types: &types,
    };
    print_json(&predictor.evaluate(sentences, threshold, t.label_mode, t.flatness)?)
}

fn predict<F: Scalar>(g: &Global, checkpoint: &Path) -> Result<()> {
    let archive = load_archive::<F>(checkpoint, g)?;
    let sentences = read_records(require(&g.data, "data")?)?;
    let (scorer, vocab, types) = (archive.scorer()?, archive.vocab(), archive.types());
    let t = &archive.header.train;
    let predictor = Predictor {
        scorer: &scorer,
        vocab: &vocab,
        types: &types,
    };
    let records = predictor.predict(&sentences, g.threshold.unwrap_or(t.threshold), t.label_mode)?;
    write_records(require(&g.out, "out")?, &records)
}

fn gradcheck(g: &Global, tolerance: f64) -> Result<bool> {
    let mut cfg = GradcheckConfig::default();
    if let Some(s) = g.seed {
        cfg.seed = s;
    }
    let started = std::time::Instant::now();
    let out = gradient_check(&cfg)?;
    for r in &out.reports {
        emit(&format!(
            "{:<20} array_rel {:.3e}  entry_rel {:.3e}  abs {:.3e}",
            r.name, r.array_rel_error, r.max_rel_error, r.max_abs_error
        ))?;
    }
    let worst = out.max_array_rel_error();
    emit(&format!(
        "min |pre-activation| {:.3e}; worst array_rel {worst:.3e}; {:.2?}",
        out.min_preactivation,
        started.elapsed()
    ))?;
    Ok(worst < tolerance)
}

fn with_precision<T>(p: Precision, f32_fn: impl FnOnce() -> Result<T>, f64_fn: impl FnOnce() -> Result<T>) -> Result<T> {
    match p {
        Precision::F32 => f32_fn(),
        Precision::F64 => f64_fn(),
    }
}

fn run(cli: Cli) -> Result<bool> {
    let g = &cli.global;
    if let Some(t) = g.threshold {
        check_threshold(t)?;
    }
    match cli.command {
        Command::Preprocess { train, dev, test } => preprocess(g, SplitRatios { train, dev, test })?,
        Command::Audit { fix } => return audit_cmd(g, fix),
        Command::Stats => {
            let corpus = load_corpus(require(&g.data, "data")?, &LoadOptions::default())?;
            print_json(&corpus_stats(&corpus))?;
        }
        Command::Gen { train, dev, test } => gen(g, [train, dev, test])?,
        Command::Train { resume } => {
            let cfg = match &resume {
                Some(p) if g.config.is_none() => ModelArchive::<f64>::load(p)?.header.train,
                _ => train_config(g)?,
            };
            let r = resume.as_deref();
            with_precision(cfg.precision, || train::<f32>(g, cfg.clone(), r), || train::<f64>(g, cfg.clone(), r))?
        }
        Command::Eval { checkpoint, split } => {
            let p = g.precision.map_or_else(|| stored_precision(&checkpoint), Ok)?;
            with_precision(p, || eval::<f32>(g, &checkpoint, &split), || eval::<f64>(g, &checkpoint, &split))?
        }
        Command::Predict { checkpoint } => {
            let p = g.precision.map_or_else(|| stored_precision(&checkpoint), Ok)?;
            with_precision(p, || predict::<f32>(g, &checkpoint), || predict::<f64>(g, &checkpoint))?
        }
        Command::Gradcheck { tolerance } => return gradcheck(g, tolerance),
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            log::error!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
