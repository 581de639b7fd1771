//! Command-line entry point: run the pipeline over a manifest, score a single
//! text, or rebuild reports from saved run records.
//!
//! Exit codes: 0 on success, 1 when any entry failed or a text could not be
//! scored, 2 on configuration or usage errors.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use visucraft::harness::{
    emit_report_named, load_manifest, load_records, run_suite, HarnessError, PipelineArm, RunConfig,
};
use visucraft::metrics::{score, MetricError, ReferenceCorpus};
use visucraft::{svi, BackendMode, ExtractorMode, GranularityLevel};

#[derive(Parser)]
#[command(name = "visucraft", version, about = "Image-guided creative text generation harness")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every manifest entry under the requested arms and levels.
    Run {
        #[arg(long)]
        manifest: PathBuf,
        /// Comma-separated: full, wo-extractor, wo-promptgen.
        #[arg(long, default_value = "full", value_delimiter = ',')]
        arm: Vec<String>,
        /// Comma-separated: L1, L2, L3.
        #[arg(long, default_value = "L3", value_delimiter = ',')]
        level: Vec<String>,
        #[arg(long)]
        backend: Option<String>,
        /// TOML run configuration.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        parallelism: Option<usize>,
    },
    /// Score one generated text and print the scores as JSON.
    Score {
        #[arg(long)]
        text: PathBuf,
        #[arg(long)]
        svi: PathBuf,
        #[arg(long)]
        instruction: String,
        /// Directory of reference .txt documents for the novelty term.
        #[arg(long)]
        corpus: Option<PathBuf>,
    },
    /// Aggregate saved run records into a report table.
    Report {
        #[arg(long)]
        records: PathBuf,
        #[arg(long, default_value = "table3")]
        shape: String,
        #[arg(long, value_enum, default_value_t = Format::Text)]
        format: Format,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Text,
    Csv,
    Json,
}

/// Marks a failure as a configuration or usage problem (exit code 2).
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run {
            manifest,
            arm,
            level,
            backend,
            config,
            out,
            seed,
            parallelism,
        } => cmd_run(&manifest, &arm, &level, backend.as_deref(), config.as_deref(), out, seed, parallelism),
        Command::Score {
            text,
            svi,
            instruction,
            corpus,
        } => cmd_score(&text, &svi, &instruction, corpus.as_deref()),
        Command::Report { records, shape, format } => cmd_report(&records, &shape, format),
    };
    match result {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code_for(&err))
        }
    }
}

fn exit_code_for(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<Usage>().is_some() {
        return 2;
    }
    if let Some(h) = err.downcast_ref::<HarnessError>() {
        return if h.is_config() { 2 } else { 1 };
    }
    if let Some(svi::SviError::Syntax { .. } | svi::SviError::Semantic(_)) = err.downcast_ref::<svi::SviError>() {
        return 2;
    }
    if let Some(MetricError::EmptyText) = err.downcast_ref::<MetricError>() {
        return 1;
    }
    if err.downcast_ref::<std::io::Error>().is_some() {
        return 2;
    }
    1
}

fn parse_list<T: FromStr<Err = String>>(items: &[String], what: &str) -> Result<Vec<T>> {
    let mut out = Vec::new();
    for item in items.iter().map(|s| s.trim()).filter(|s| !s.is_empty()) {
        out.push(T::from_str(item).map_err(|e| usage(format!("bad {what} {item:?}: {e}")))?);
    }
    if out.is_empty() {
        return Err(usage(format!("no {what} given")));
    }
    Ok(out)
}

#[allow(clippy::too_many_arguments)]
fn cmd_run(
    manifest: &Path,
    arms: &[String],
    levels: &[String],
    backend: Option<&str>,
    config: Option<&Path>,
    out: Option<PathBuf>,
    seed: Option<u64>,
    parallelism: Option<usize>,
) -> Result<ExitCode> {
    let arms: Vec<PipelineArm> = parse_list(arms, "arm")?;
    let levels: Vec<GranularityLevel> = parse_list(levels, "level")?;
    let mut cfg = match config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if cfg.extractor.mode == ExtractorMode::Fixture && cfg.extractor.fixture_dir.is_none() {
        let dir = manifest.parent().unwrap_or(Path::new(".")).join("fixtures");
        cfg.extractor.fixture_dir = Some(dir);
    }
    if let Some(mode) = backend {
        cfg.backend.mode = BackendMode::from_str(mode).map_err(usage)?;
    }
    if let Some(dir) = out {
        cfg.output_dir = dir;
    }
    if let Some(seed) = seed {
        cfg.seed = seed;
    }
    if let Some(n) = parallelism {
        cfg.parallelism = n;
    }
    let entries = load_manifest(manifest)?;
    let outcome = run_suite(&entries, &cfg, &arms, &levels)?;

    for record in &outcome.records {
        if let Some(err) = &record.error {
            eprintln!("{} [{} {}]: {err}", record.entry_id, record.arm, record.level.as_str());
        }
    }
    println!(
        "{} record(s), {} failed, written to {}",
        outcome.records.len(),
        outcome.failed(),
        cfg.output_dir.display()
    );
    for path in &outcome.report_paths {
        println!("report: {}", path.display());
    }
    Ok(if outcome.failed() > 0 { ExitCode::from(1) } else { ExitCode::SUCCESS })
}

fn cmd_score(text: &Path, svi_path: &Path, instruction: &str, corpus: Option<&Path>) -> Result<ExitCode> {
    let body = fs::read_to_string(text).with_context(|| format!("reading {}", text.display()))?;
    let doc_text = fs::read_to_string(svi_path).with_context(|| format!("reading {}", svi_path.display()))?;
    let doc = svi::parse(&doc_text).with_context(|| format!("parsing {}", svi_path.display()))?;
    let corpus = match corpus {
        Some(dir) => ReferenceCorpus::load_dir(dir).map_err(|e| usage(e.to_string()))?,
        None => ReferenceCorpus::default(),
    };
    let scores = score(&body, &doc, instruction, &corpus)?;
    println!("{}", serde_json::to_string(&scores)?);
    Ok(ExitCode::SUCCESS)
}

fn cmd_report(records: &Path, shape: &str, format: Format) -> Result<ExitCode> {
    let records = load_records(records)?;
    let table = emit_report_named(&records, shape)?;
    let body = match format {
        Format::Text => table.render_text(),
        Format::Csv => table.render_csv(),
        Format::Json => table.render_json(),
    };
    print!("{body}");
    if !body.ends_with('\n') {
        println!();
    }
    Ok(ExitCode::SUCCESS)
}
