//! `meg`: run pipeline stages, answer queries through the edit engine, and
//! compare evaluation reports across configurations.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use meg_cli::config::{ConfigError, ExperimentConfig};
use meg_cli::stages::{
    build_engine, load_report, reproduce, run_all, run_stage, PipelineError, Stage,
};
use meg_core::corpus::Corpus;
use meg_core::edit_engine::EditTrace;
use meg_core::evalkit::{ablation_report, render_text, to_csv, MetricsReport};
use serde::Serialize;

/// Environment variable that overrides the config's artifact directory.
/// The --artifacts flag overrides both.
const ARTIFACTS_ENV: &str = "MEG_ARTIFACTS";

#[derive(Parser)]
#[command(
    name = "meg",
    version,
    about = "Train a toy language model, then edit its facts with generated neuron weights"
)]
struct Cli {
    /// Experiment configuration file (JSON). Built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Artifact directory, overriding MEG_ARTIFACTS and the config file.
    #[arg(long, global = true)]
    artifacts: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic fact corpus.
    Corpus,
    /// Train the base language model on the corpus.
    Lm,
    /// Tune the text encoder on pseudo-fact paraphrase pairs.
    Encoder,
    /// Train the familiarity classifier on edit-query embeddings.
    #[command(name = "fn")]
    Familiarity,
    /// Collect one converged neuron weight vector per edit fact.
    Collect,
    /// Train the diffusion weight generator on the collected bank.
    Diff,
    /// Score reliability, generality, and locality for the edit engine.
    Eval,
    /// Run every stage in order; stages already up to date are skipped.
    All,
    /// Run the whole pipeline in a clean artifact directory and print the
    /// final report.
    Reproduce,
    /// Print the effective configuration as JSON, defaults filled in.
    Config,
    /// Answer queries through the assembled edit engine.
    Edit {
        #[command(subcommand)]
        command: EditCommand,
    },
    /// Compare evaluation reports across configurations. Deltas are
    /// measured against the first config; each config is read from its own
    /// artifact directory.
    Ablate {
        /// Configuration files, baseline first.
        #[arg(long, num_args = 1.., required = true)]
        configs: Vec<PathBuf>,
    },
}

#[derive(Subcommand)]
enum EditCommand {
    /// Route one query and print its trace as JSON.
    Respond {
        /// Query text; words outside the corpus vocabulary become <unk>.
        #[arg(long)]
        query: String,
    },
    /// Route one query per non-empty line of a file and write all traces
    /// as a JSON array.
    Batch {
        /// File with one query per line.
        #[arg(long = "in")]
        input: PathBuf,
        /// Destination for the JSON traces.
        #[arg(long = "out")]
        output: PathBuf,
    },
}

/// An [`EditTrace`] plus the decoded texts, for human consumption.
#[derive(Serialize)]
struct TraceView {
    query_text: String,
    response_text: String,
    #[serde(flatten)]
    trace: EditTrace,
}

fn trace_view(corpus: &Corpus, trace: EditTrace) -> TraceView {
    TraceView {
        query_text: corpus.tokenizer.decode(&trace.query),
        response_text: corpus.tokenizer.decode(&trace.response),
        trace,
    }
}

/// Prints a line to stdout; a closed pipe (say, `meg config | head`) ends
/// the process quietly instead of panicking.
fn emit(text: &str) {
    use std::io::Write;
    let mut out = std::io::stdout();
    let done = out.write_all(text.as_bytes()).and_then(|_| out.write_all(b"\n"));
    if done.is_err() {
        std::process::exit(0);
    }
}

fn load_config(path: Option<&Path>) -> Result<ExperimentConfig, PipelineError> {
    let cfg = match path {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    cfg.validate()?;
    Ok(cfg)
}

fn resolve_root(flag: Option<&Path>, cfg: &ExperimentConfig) -> PathBuf {
    if let Some(p) = flag {
        return p.to_path_buf();
    }
    if let Ok(p) = std::env::var(ARTIFACTS_ENV) {
        if !p.is_empty() {
            return PathBuf::from(p);
        }
    }
    cfg.artifacts.clone()
}

fn print_outcomes(outcomes: &[(Stage, meg_cli::stages::StageOutcome)]) {
    for (stage, outcome) in outcomes {
        emit(&format!("stage {:<8} {}", stage.name(), outcome.describe()));
    }
}

fn run(cli: Cli) -> Result<(), PipelineError> {
    let cfg = load_config(cli.config.as_deref())?;
    let root = resolve_root(cli.artifacts.as_deref(), &cfg);

    match cli.command {
        Command::Corpus => run_one(&cfg, &root, Stage::Corpus),
        Command::Lm => run_one(&cfg, &root, Stage::Lm),
        Command::Encoder => run_one(&cfg, &root, Stage::Encoder),
        Command::Familiarity => run_one(&cfg, &root, Stage::Familiarity),
        Command::Collect => run_one(&cfg, &root, Stage::Collect),
        Command::Diff => run_one(&cfg, &root, Stage::Diffusion),
        Command::Eval => {
            run_one(&cfg, &root, Stage::Eval)?;
            emit(&render_text(&load_report(&root)?));
            Ok(())
        }
        Command::All => {
            let outcomes = run_all(&cfg, &root)?;
            print_outcomes(&outcomes);
            emit(&render_text(&load_report(&root)?));
            Ok(())
        }
        Command::Reproduce => {
            let (outcomes, report) = reproduce(&cfg, &root)?;
            print_outcomes(&outcomes);
            emit(&render_text(&report));
            Ok(())
        }
        Command::Config => {
            emit(&serde_json::to_string_pretty(&cfg)?);
            Ok(())
        }
        Command::Edit { command } => run_edit(&cfg, &root, command),
        Command::Ablate { configs } => {
            if cli.artifacts.is_some() {
                return Err(ConfigError::Invalid(
                    "--artifacts cannot apply to ablate; each config names its own \
                     artifact directory"
                        .into(),
                )
                .into());
            }
            run_ablate(&configs)
        }
    }
}

fn run_one(cfg: &ExperimentConfig, root: &Path, stage: Stage) -> Result<(), PipelineError> {
    let outcome = run_stage(cfg, root, stage)?;
    emit(&format!("stage {:<8} {}", stage.name(), outcome.describe()));
    Ok(())
}

fn run_edit(
    cfg: &ExperimentConfig,
    root: &Path,
    command: EditCommand,
) -> Result<(), PipelineError> {
    let corpus = Corpus::load(&root.join(Stage::Corpus.name()))?;
    let engine = build_engine(cfg, root)?;
    match command {
        EditCommand::Respond { query } => {
            let tokens = corpus.tokenizer.encode(&query);
            let trace = engine.respond(&tokens)?;
            let view = trace_view(&corpus, trace);
            emit(&serde_json::to_string_pretty(&view)?);
        }
        EditCommand::Batch { input, output } => {
            let text = fs::read_to_string(&input)?;
            let lines: Vec<&str> =
                text.lines().map(str::trim).filter(|l| !l.is_empty()).collect();
            let encoded: Vec<Vec<u32>> =
                lines.iter().map(|l| corpus.tokenizer.encode(l)).collect();
            let refs: Vec<&[u32]> = encoded.iter().map(Vec::as_slice).collect();
            let traces = engine.respond_batch(&refs)?;
            let views: Vec<TraceView> =
                traces.into_iter().map(|t| trace_view(&corpus, t)).collect();
            let mut body = serde_json::to_string_pretty(&views)?;
            body.push('\n');
            fs::write(&output, body)?;
            let edited = views.iter().filter(|v| v.trace.routed_edited).count();
            emit(&format!(
                "wrote {} traces to {} ({} routed to the edited branch)",
                views.len(),
                output.display(),
                edited
            ));
        }
    }
    Ok(())
}

fn run_ablate(configs: &[PathBuf]) -> Result<(), PipelineError> {
    let mut reports = Vec::with_capacity(configs.len());
    for path in configs {
        let cfg = ExperimentConfig::load(path)?;
        cfg.validate()?;
        let root = resolve_root(None, &cfg);
        let mut report: MetricsReport = load_report(&root).map_err(|e| match e {
            PipelineError::MissingPrerequisite { .. } => PipelineError::Config(
                ConfigError::Invalid(format!(
                    "no evaluation report under {} for {}; run `meg all --config {}` first",
                    root.display(),
                    path.display(),
                    path.display()
                )),
            ),
            other => other,
        })?;
        report.config_id = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| path.display().to_string());
        reports.push(report);
    }
    let ablation = ablation_report(reports);
    emit(&to_csv(&ablation.reports));
    for delta in &ablation.deltas {
        emit(&format!(
            "{} vs {}: reliability_ag {:+.2} reliability_tf {:+.2} generality_ag {:+.2} \
             generality_tf {:+.2} locality_ag {:+.2} locality_tf {:+.2} score {:+.2}",
            delta.config_id,
            delta.baseline_id,
            delta.reliability_ag,
            delta.reliability_tf,
            delta.generality_ag,
            delta.generality_tf,
            delta.locality_ag,
            delta.locality_tf,
            delta.score
        ));
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(err.exit_code())
        }
    }
}
