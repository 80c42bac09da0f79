use std::io::{self, BufRead, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use polarity_core::categorize::categorize_surface;
use polarity_core::Family;
use polarity_harness::formats::{self, FormatError};
use polarity_harness::plot::{self, FigureKind, FigureSpec};
use polarity_harness::report::{self, ReportError};
use polarity_harness::shipped;
use polarity_harness::sweep::{self, CellStatus, Run, RunRecord, Store, SweepConfig, SweepError};

/// Measure NPI and depth-charge illusions in causal language models.
#[derive(Parser)]
#[command(name = "polarity", version)]
struct Cli {
    /// Run store directory [default: config `store_dir`, $POLARITY_STORE, ./runs]
    #[arg(long, global = true)]
    store: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Plan a sweep from a config file and run its unfinished cells.
    Run {
        #[arg(long)]
        config: PathBuf,
    },
    /// Run the PENDING and FAILED cells of an existing run.
    Resume { run_id: String },
    /// Show the status of every cell of a run.
    Status { run_id: String },
    /// Write items.tsv, summary.tsv and alignment.tsv for a run.
    Export {
        run_id: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Draw a scaling or training figure as SVG.
    Plot {
        run_id: String,
        #[arg(long)]
        kind: String,
        #[arg(long)]
        family: String,
        #[arg(long)]
        out: PathBuf,
        /// Model of a training figure, when the run has several.
        #[arg(long)]
        model: Option<String>,
    },
    /// Check or expand stimulus files.
    Stimuli {
        #[command(subcommand)]
        action: StimuliCommand,
    },
    /// Categorize continuation surfaces read from stdin, one per line.
    Categorize {
        #[arg(long)]
        family: String,
        /// Lexicon file [default: the shipped lexicon of the family]
        #[arg(long)]
        lexicon: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum StimuliCommand {
    /// Validate a frame file or an item file.
    Validate { path: PathBuf },
    /// Expand a frame file into one preamble per line.
    Export {
        path: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

enum Failure {
    Config(String),
    Data(String),
    Compute(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Config(_) => 2,
            Failure::Data(_) => 3,
            Failure::Compute(_) => 4,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Config(m) | Failure::Data(m) | Failure::Compute(m) => m,
        }
    }
}

impl From<SweepError> for Failure {
    fn from(e: SweepError) -> Self {
        let msg = e.to_string();
        match e {
            SweepError::Config { .. } | SweepError::Planning(_) | SweepError::ManifestConflict(_) => {
                Failure::Config(msg)
            }
            SweepError::Input(_) | SweepError::UnknownRun { .. } | SweepError::Corrupt { .. } => Failure::Data(msg),
            SweepError::UnknownCell(_) => Failure::Data(msg),
            SweepError::Io { .. } => Failure::Compute(msg),
        }
    }
}

impl From<ReportError> for Failure {
    fn from(e: ReportError) -> Self {
        let msg = e.to_string();
        match e {
            ReportError::Sweep(s) => s.into(),
            ReportError::Io { .. } | ReportError::Plot(_) => Failure::Compute(msg),
            _ => Failure::Data(msg),
        }
    }
}

impl From<FormatError> for Failure {
    fn from(e: FormatError) -> Self {
        match e {
            FormatError::Io { .. } => Failure::Config(e.to_string()),
            _ => Failure::Data(e.to_string()),
        }
    }
}

fn store_for(cli: Option<&Path>, config: Option<&SweepConfig>) -> Store {
    if let Some(p) = cli {
        return Store::new(p);
    }
    if let Some(p) = config.and_then(|c| c.store_dir.clone()) {
        return Store::new(p);
    }
    match std::env::var_os("POLARITY_STORE") {
        Some(p) => Store::new(PathBuf::from(p)),
        None => Store::new("runs"),
    }
}

fn report_cells(run: &Run, processed: &[RunRecord]) -> Result<(), Failure> {
    let statuses = run.statuses()?;
    let count = |s: CellStatus| statuses.iter().filter(|r| r.status == s).count();
    let executed = processed.len();
    println!("run-id: {}", run.run_id());
    println!(
        "{executed} {} executed; {} done, {} failed, {} pending",
        if executed == 1 { "cell" } else { "cells" },
        count(CellStatus::Done),
        count(CellStatus::Failed),
        count(CellStatus::Pending)
    );
    let failed: Vec<&RunRecord> = processed.iter().filter(|r| r.status == CellStatus::Failed).collect();
    for r in &failed {
        eprintln!(
            "FAILED {} @ {}: {}",
            r.model,
            r.checkpoint,
            r.error.as_deref().unwrap_or("unknown error")
        );
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Compute(format!(
            "{} of {executed} cells failed; the ledger is kept in {}",
            failed.len(),
            run.dir().display()
        )))
    }
}

fn parse_family(s: &str) -> Result<Family, Failure> {
    Family::parse(s).ok_or_else(|| Failure::Config(format!("unknown family `{s}` (expected npi or dc)")))
}

fn execute(cli: Cli) -> Result<(), Failure> {
    let store_arg = cli.store.as_deref();
    match cli.command {
        Command::Run { config } => {
            let cfg = SweepConfig::load(&config)?;
            let store = store_for(store_arg, Some(&cfg));
            let run = sweep::plan_sweep(&cfg, &store)?;
            let processed = run.resume()?;
            report_cells(&run, &processed)
        }
        Command::Resume { run_id } => {
            let run = store_for(store_arg, None).open(&run_id)?;
            let processed = run.resume()?;
            report_cells(&run, &processed)
        }
        Command::Status { run_id } => {
            let run = store_for(store_arg, None).open(&run_id)?;
            for r in run.verify()? {
                let status = match r.status {
                    CellStatus::Pending => "PENDING",
                    CellStatus::Done => "DONE",
                    CellStatus::Failed => "FAILED",
                };
                let detail = r.error.clone().unwrap_or_default();
                println!("{status}\t{}\t{}\t{detail}", r.model, r.checkpoint);
            }
            Ok(())
        }
        Command::Export { run_id, out } => {
            let run = store_for(store_arg, None).open(&run_id)?;
            let files = report::export(&run, &out)?;
            println!("{}", files.items.display());
            println!("{}", files.summary.display());
            if let Some(a) = files.alignment {
                println!("{}", a.display());
            }
            Ok(())
        }
        Command::Plot {
            run_id,
            kind,
            family,
            out,
            model,
        } => {
            let kind = FigureKind::parse(&kind)
                .ok_or_else(|| Failure::Config(format!("unknown figure kind `{kind}` (expected scaling or training)")))?;
            let spec = FigureSpec {
                kind,
                family: parse_family(&family)?,
                model,
            };
            let run = store_for(store_arg, None).open(&run_id)?;
            let path = plot::plot(&run, &spec, &out)?;
            println!("{}", path.display());
            Ok(())
        }
        Command::Stimuli { action } => match action {
            StimuliCommand::Validate { path } => {
                let text = formats::read_text(&path)?;
                let (set, layout) = formats::parse_stimuli(&text, &path)?;
                let what = match layout {
                    formats::StimulusLayout::Frames => "frame file",
                    formats::StimulusLayout::Items => "item file",
                };
                println!(
                    "ok: {what}, family {}, {} frames, {} items",
                    set.family,
                    set.frame_count,
                    set.items.len()
                );
                Ok(())
            }
            StimuliCommand::Export { path, out } => {
                let set = formats::load_stimuli(&path)?;
                std::fs::write(&out, formats::to_jsonl(&formats::item_records(&set)))
                    .map_err(|e| Failure::Compute(format!("{}: {e}", out.display())))?;
                println!("{} items written to {}", set.items.len(), out.display());
                Ok(())
            }
        },
        Command::Categorize { family, lexicon } => {
            let family = parse_family(&family)?;
            let lex = match lexicon {
                Some(p) => formats::load_lexicon(&p)?,
                None => shipped::lexicon(family),
            };
            if lex.family() != family {
                return Err(Failure::Config(format!(
                    "a {} lexicon cannot categorize {family} surfaces",
                    lex.family()
                )));
            }
            let stdout = io::stdout();
            let mut out = stdout.lock();
            let io_fail = |e: io::Error| Failure::Compute(e.to_string());
            writeln!(out, "surface\tcategory\tfired_rule").map_err(io_fail)?;
            for line in io::stdin().lock().lines() {
                let line = line.map_err(io_fail)?;
                let v = categorize_surface(&line, family, &lex);
                writeln!(out, "{line}\t{}\t{}", v.category.as_str(), v.fired_rule).map_err(io_fail)?;
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}
