//! Command-line driver: `gen`, `train`, `infer`, `eval`, `report` and
//! `ingest`, all configured by one JSON file plus flag overrides.

mod config;

use std::ffi::OsString;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

pub use config::{parse_config, parse_config_str, ModelConfig, Paths, PipelineConfig};

use crate::error::{Error, Result};
use crate::recovery_eval::{read_records, success_rate, success_rates, threshold_report, write_records, GRID_STEPS};
use crate::seq2seq_model::{init_model, train, Profile, Seq2SeqModel};
use crate::synth_corpus::{gen_corpus, read_automata, read_jsonl, Corpus, SamplePair, AUTOMATA_FILE, TEST_FILE};
use crate::template_store::{LogSequence, TemplateStore};

pub const TRAIN_LOG_FILE: &str = "train_log.csv";
pub const RESULTS_FILE: &str = "results.jsonl";
pub const SUCCESS_FILE: &str = "success.json";
pub const THRESHOLD_CSV: &str = "threshold.csv";
pub const THRESHOLD_JSON: &str = "threshold.json";

/// Exit status for bad arguments or config.
pub const EXIT_USAGE: i32 = 2;
/// Exit status for any other failure.
pub const EXIT_FAILURE: i32 = 1;

#[derive(Parser, Debug)]
#[command(name = "log2cmd", version, about = "Estimate recovery commands from log-template sequences")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic corpus and automata.
    Gen(Common),
    /// Train a model on the corpus and write a checkpoint.
    Train(Common),
    /// Print k-best hypotheses for sources from a JSONL or raw log file.
    Infer(InferArgs),
    /// Decode the test split and replay each estimate on its automaton.
    Eval(Common),
    /// Build the reliability-threshold report from eval results.
    Report(Common),
    /// Map raw log lines to template IDs, growing the template store.
    Ingest(IngestArgs),
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// Pipeline config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Overrides the generation seed (gen) or the training seed (train).
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum)]
    profile: Option<ProfileArg>,
    /// Base directory for every relative path in the config.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct InferArgs {
    #[command(flatten)]
    common: Common,
    /// JSONL of sample pairs or log sequences.
    #[arg(long, conflicts_with = "raw", required_unless_present = "raw")]
    input: Option<PathBuf>,
    /// Raw log file, one line per event; forms a single source.
    #[arg(long)]
    raw: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct IngestArgs {
    #[command(flatten)]
    common: Common,
    /// Raw log file, one line per event.
    #[arg(long)]
    input: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ProfileArg {
    Desk,
    Paper,
}

impl From<ProfileArg> for Profile {
    fn from(p: ProfileArg) -> Self {
        match p {
            ProfileArg::Desk => Profile::Desk,
            ProfileArg::Paper => Profile::Paper,
        }
    }
}

/// Config with flag overrides applied and paths resolved.
fn load(common: &Common) -> Result<PipelineConfig> {
    if !common.config.is_file() {
        return Err(Error::Config(format!("config file {} not found", common.config.display())));
    }
    let mut cfg = parse_config(&common.config)?;
    if let Some(p) = common.profile {
        cfg.model.profile = Some(p.into());
    }
    if let Some(base) = &common.out {
        cfg.paths = cfg.paths.rebased(base);
    }
    Ok(cfg)
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn io_err(e: std::io::Error) -> Error {
    Error::io("<stdout>", e)
}

fn cmd_gen(c: &Common, out: &mut dyn Write) -> Result<()> {
    let mut cfg = load(c)?;
    if let Some(s) = c.seed {
        cfg.gen.seed = s;
    }
    let corpus = gen_corpus(&cfg.gen)?;
    corpus.write_dir(&cfg.paths.corpus_dir)?;
    writeln!(
        out,
        "wrote {} train, {} dev, {} test pairs to {}",
        corpus.train.len(),
        corpus.dev.len(),
        corpus.test.len(),
        cfg.paths.corpus_dir.display()
    )
    .map_err(io_err)
}

fn cmd_train(c: &Common, out: &mut dyn Write, err: &mut dyn Write) -> Result<()> {
    let cfg = load(c)?;
    let mut hyper = cfg.model.resolved();
    if let Some(s) = c.seed {
        hyper.seed = s;
    }
    let corpus = Corpus::read_dir(&cfg.paths.corpus_dir)?;
    let model = init_model(&corpus.train, hyper)?;
    let (model, report) = train(model, &corpus.train, &corpus.dev, |e| {
        let _ = writeln!(
            err,
            "epoch {:>3}  train {:.4}  dev {:.4}  {:.1}s",
            e.epoch, e.train_loss, e.dev_loss, e.elapsed_seconds
        );
    })?;
    model.save(&cfg.paths.checkpoint)?;
    create_dir(&cfg.paths.report_dir)?;
    report.write_csv(&cfg.paths.report_dir.join(TRAIN_LOG_FILE))?;
    writeln!(
        out,
        "best epoch {} (dev loss {:.4}); checkpoint {}",
        report.best_epoch,
        report.best_dev_loss,
        cfg.paths.checkpoint.display()
    )
    .map_err(io_err)
}

/// Reads sources from JSONL lines holding either a sample pair or a log
/// sequence.
fn read_sources(path: &Path) -> Result<Vec<LogSequence>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let ctx = || format!("{}:{}", path.display(), n + 1);
        let v: serde_json::Value = serde_json::from_str(&line).map_err(|e| Error::json(ctx(), e))?;
        let seq = if v.get("source").is_some() {
            serde_json::from_value::<SamplePair>(v).map(|p| p.log_sequence())
        } else {
            serde_json::from_value::<LogSequence>(v)
        };
        out.push(seq.map_err(|e| Error::json(ctx(), e))?);
    }
    Ok(out)
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text.lines().filter(|l| !l.trim().is_empty()).map(String::from).collect())
}

fn cmd_infer(a: &InferArgs, out: &mut dyn Write) -> Result<()> {
    let cfg = load(&a.common)?;
    let model = Seq2SeqModel::load(&cfg.paths.checkpoint)?;
    let sources = match (&a.input, &a.raw) {
        (Some(p), _) => read_sources(p)?,
        (None, Some(p)) => {
            let store = TemplateStore::load(&cfg.paths.template_store)?;
            vec![store.encode_frozen(&read_lines(p)?, &cfg.mask_rule_set()?)]
        }
        (None, None) => return Err(Error::Config("infer needs --input or --raw".into())),
    };
    let (beam, max_len) = (model.hyper.beam, model.hyper.max_decode_len);
    for (i, src) in sources.iter().enumerate() {
        writeln!(out, "# source {i}").map_err(io_err)?;
        for (rank, h) in model.beam_decode(src, beam, max_len)?.iter().enumerate() {
            writeln!(out, "{}\t{:.6}\t{}", rank + 1, h.reliability, h.tokens.join(" ")).map_err(io_err)?;
        }
    }
    Ok(())
}

fn cmd_eval(c: &Common, out: &mut dyn Write) -> Result<()> {
    let cfg = load(c)?;
    let model = Seq2SeqModel::load(&cfg.paths.checkpoint)?;
    let test = read_jsonl(&cfg.paths.corpus_dir.join(TEST_FILE))?;
    let automata = read_automata(&cfg.paths.corpus_dir.join(AUTOMATA_FILE))?;
    let (report, records) = success_rate(&model, &test, &automata, model.hyper.beam, model.hyper.max_decode_len)?;
    create_dir(&cfg.paths.report_dir)?;
    write_records(&cfg.paths.report_dir.join(RESULTS_FILE), &records)?;
    report.write_json(&cfg.paths.report_dir.join(SUCCESS_FILE))?;
    for g in &report.per_group {
        let name = g.group.map_or("all".to_string(), |g| g.to_string());
        writeln!(out, "{name}\t{}/{}\t{:.4}", g.accepted, g.total, g.rate).map_err(io_err)?;
    }
    let o = &report.overall;
    writeln!(out, "all\t{}/{}\t{:.4}", o.accepted, o.total, o.rate).map_err(io_err)
}

fn cmd_report(c: &Common, out: &mut dyn Write) -> Result<()> {
    let cfg = load(c)?;
    let records = read_records(&cfg.paths.report_dir.join(RESULTS_FILE))?;
    let rep = threshold_report(&records, GRID_STEPS)?;
    rep.write_csv(&cfg.paths.report_dir.join(THRESHOLD_CSV))?;
    rep.write_json(&cfg.paths.report_dir.join(THRESHOLD_JSON))?;
    let totals = success_rates(&records)?.overall;
    let first = &rep.rows[0];
    writeln!(
        out,
        "t=0: {} success, {} failure (of {})",
        first.n_success, first.n_failure, totals.total
    )
    .map_err(io_err)?;
    match rep.minimal_safe_threshold {
        Some(t) => writeln!(out, "minimal safe threshold: {t:.2}"),
        None => writeln!(out, "minimal safe threshold: absent"),
    }
    .map_err(io_err)
}

fn cmd_ingest(a: &IngestArgs, out: &mut dyn Write) -> Result<()> {
    let cfg = load(&a.common)?;
    let path = &cfg.paths.template_store;
    let mut store = if path.exists() { TemplateStore::load(path)? } else { TemplateStore::new() };
    let seq = store.encode_log(&read_lines(&a.input)?, &cfg.mask_rule_set()?);
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    store.save(path)?;
    let line = serde_json::to_string(&seq).map_err(|e| Error::json("log sequence", e))?;
    writeln!(out, "{line}").map_err(io_err)
}

fn is_usage(e: &Error) -> bool {
    matches!(e, Error::Config(_) | Error::OutOfRange { .. } | Error::Pattern { .. })
        || matches!(e, Error::Json { context, .. } if !context.contains(".jsonl"))
}

/// Runs one subcommand, writing results to `out` and diagnostics to `err`.
/// Returns the process exit status.
pub fn run_with<I, T>(argv: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let text = e.render().to_string();
            let _ = if e.use_stderr() { err.write_all(text.as_bytes()) } else { out.write_all(text.as_bytes()) };
            return code;
        }
    };
    let result = match &cli.command {
        Command::Gen(c) => cmd_gen(c, out),
        Command::Train(c) => cmd_train(c, out, err),
        Command::Infer(a) => cmd_infer(a, out),
        Command::Eval(c) => cmd_eval(c, out),
        Command::Report(c) => cmd_report(c, out),
        Command::Ingest(a) => cmd_ingest(a, out),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            if is_usage(&e) {
                EXIT_USAGE
            } else {
                EXIT_FAILURE
            }
        }
    }
}

pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    run_with(argv, &mut std::io::stdout().lock(), &mut std::io::stderr().lock())
}
