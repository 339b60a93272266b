use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use biasaudit_core::cli::{
    augment_file, debias_embeddings, is_input_error, parse_pairs, read_embeddings, render_report, run_audit,
    write_embeddings, AuditSpec, ReportFormat,
};
use biasaudit_core::debias_ops::{CdaMode, CounterfactualLexicon};
use biasaudit_core::gradcheck::{run_suite, DEFAULT_TRIALS, KERNELS};
use biasaudit_core::interchange::{list_datasets, Catalog};
use biasaudit_core::Error;

const EXIT_USAGE: u8 = 1;
const EXIT_INPUT: u8 = 2;
const EXIT_FAILURE: u8 = 3;

#[derive(Parser)]
#[command(
    name = "biasaudit",
    version,
    about = "Bias metrics and debiasing over exported model outputs"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Json,
    Csv,
    Md,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    OneSided,
    TwoSided,
}

#[derive(Subcommand)]
enum Command {
    /// List dataset names, or the configs of one dataset.
    ListDatasets {
        #[arg(long)]
        catalog: Option<PathBuf>,
        #[arg(long)]
        dataset: Option<String>,
    },
    /// Run the metric requests of an audit spec and write a report.
    Audit {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "json")]
        format: Format,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Counterfactual data augmentation of a text corpus.
    Augment {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        pairs: PathBuf,
        #[arg(long, value_enum)]
        mode: Mode,
        #[arg(long, value_delimiter = ',')]
        columns: Option<Vec<String>>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Remove a bias subspace fitted on paired embeddings.
    DebiasEmbeddings {
        #[arg(long)]
        pairs_embeddings: PathBuf,
        #[arg(long)]
        components: usize,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        subspace_out: Option<PathBuf>,
    },
    /// Compare analytic loss gradients against finite differences.
    GradCheck {
        #[arg(long)]
        kernel: Option<String>,
        #[arg(long, default_value_t = DEFAULT_TRIALS)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn fail(code: u8, message: impl std::fmt::Display) -> ExitCode {
    eprintln!("biasaudit: {message}");
    ExitCode::from(code)
}

fn error_exit(e: &Error) -> ExitCode {
    let code = if is_input_error(e) { EXIT_INPUT } else { EXIT_FAILURE };
    fail(code, e)
}

fn write_output(path: &Path, bytes: &[u8]) -> Result<(), ExitCode> {
    std::fs::write(path, bytes).map_err(|e| fail(EXIT_FAILURE, format!("{}: {e}", path.display())))
}

fn default_catalog() -> Result<Catalog, Error> {
    let local = Path::new("datasets/catalog.json");
    if local.exists() {
        Catalog::load(local)
    } else {
        Ok(Catalog::reference())
    }
}

fn run(command: Command) -> Result<ExitCode, ExitCode> {
    match command {
        Command::ListDatasets { catalog, dataset } => {
            let catalog = match catalog {
                Some(path) => Catalog::load(path),
                None => default_catalog(),
            }
            .map_err(|e| error_exit(&e))?;
            match list_datasets(&catalog, dataset.as_deref()) {
                Ok(names) => names.iter().for_each(|n| println!("{n}")),
                Err(e @ Error::UnknownDataset(_)) => return Err(fail(EXIT_USAGE, e)),
                Err(e) => return Err(error_exit(&e)),
            }
        }
        Command::Audit {
            spec,
            out,
            format,
            seed,
        } => {
            let spec = AuditSpec::load(&spec).map_err(|e| fail(EXIT_INPUT, e))?;
            let report = run_audit(&spec, seed);
            let format = match format {
                Format::Json => ReportFormat::Json,
                Format::Csv => ReportFormat::Csv,
                Format::Md => ReportFormat::Md,
            };
            let bytes = render_report(&report, format).map_err(|e| error_exit(&e))?;
            write_output(&out, &bytes)?;
            for r in report.results.iter().filter(|r| r.error.is_some()) {
                eprintln!(
                    "biasaudit: request {} ({}) failed: {}",
                    r.request,
                    r.metric.name(),
                    r.error.as_deref().unwrap_or_default()
                );
            }
            if report.total_failure() {
                return Err(ExitCode::from(EXIT_FAILURE));
            }
        }
        Command::Augment {
            input,
            pairs,
            mode,
            columns,
            out,
        } => {
            let bytes = std::fs::read(&pairs).map_err(|e| fail(EXIT_INPUT, format!("{}: {e}", pairs.display())))?;
            let pairs = parse_pairs(&bytes).map_err(|e| error_exit(&e))?;
            let lexicon = CounterfactualLexicon::new(&pairs).map_err(|e| fail(EXIT_INPUT, e))?;
            let mode = match mode {
                Mode::OneSided => CdaMode::OneSided,
                Mode::TwoSided => CdaMode::TwoSided,
            };
            let augmented = augment_file(&input, &lexicon, mode, columns.as_deref()).map_err(|e| error_exit(&e))?;
            write_output(&out, &augmented)?;
        }
        Command::DebiasEmbeddings {
            pairs_embeddings,
            components,
            input,
            out,
            subspace_out,
        } => {
            let pairs = read_embeddings(&pairs_embeddings).map_err(|e| error_exit(&e))?;
            let inputs = read_embeddings(&input).map_err(|e| error_exit(&e))?;
            let (subspace, projected) = debias_embeddings(&pairs, components, inputs).map_err(|e| error_exit(&e))?;
            write_output(&out, &write_embeddings(projected).map_err(|e| error_exit(&e))?)?;
            if let Some(path) = subspace_out {
                let mut json = subspace.to_json().map_err(|e| error_exit(&e))?;
                json.push('\n');
                write_output(&path, json.as_bytes())?;
            }
        }
        Command::GradCheck { kernel, trials, seed } => {
            if let Some(k) = kernel.as_deref() {
                if !KERNELS.contains(&k) {
                    return Err(fail(
                        EXIT_USAGE,
                        format!("unknown kernel `{k}`; expected one of {}", KERNELS.join(", ")),
                    ));
                }
            }
            let reports = run_suite(kernel.as_deref(), trials, seed).map_err(|e| error_exit(&e))?;
            let mut all_passed = true;
            for r in &reports {
                all_passed &= r.passed();
                println!(
                    "{:<17} {} trials={} failures={} max_rel_error={:.3e}",
                    r.kernel,
                    if r.passed() { "PASS" } else { "FAIL" },
                    r.trials,
                    r.failures,
                    r.max_rel_error
                );
            }
            if !all_passed {
                return Err(ExitCode::from(EXIT_FAILURE));
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    run(cli.command).unwrap_or_else(|code| code)
}
