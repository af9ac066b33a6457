use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use true_cli::pipeline::{load_dataset, run_pipeline, PipelineError, RunOptions, Stage, StageStatus};
use true_cli::report::{build_report, render_text};
use true_cli::store::{to_json_bytes, write_atomic, ArtifactStore};
use true_cli::RunConfig;
use true_core::executor::{score_e3, E3Counts};
use true_core::failure::{shapley, CharacteristicTable, ImpactThresholds, ShapleyConfig};
use true_core::scalar::{format_rational, parse_rational, rational_to_f64};
use true_core::model::validate_spec;
use true_core::step_format::{lint_leaks, lint_warnings, parse_spec, Finding, Severity};
use true_core::whitebox::{eval_expr, Environment};

#[derive(Parser)]
#[command(name = "true", version, about = "Executable explanations, feasible-region DAGs and failure-mode attribution")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArg {
    /// Run configuration (TOML).
    #[arg(short, long, default_value = "true.toml")]
    config: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Text,
    Json,
    Csv,
}

#[derive(Subcommand)]
enum Command {
    /// Check an explanation spec against the step grammar.
    Lint {
        file: PathBuf,
        /// Dataset holding the problem, for value-leak checks.
        #[arg(long, requires = "id")]
        dataset: Option<PathBuf>,
        #[arg(long)]
        id: Option<String>,
    },
    /// Evaluate an arithmetic expression exactly.
    Calc {
        expr: String,
        /// Variable binding, `name=value`; repeatable.
        #[arg(long = "set", value_name = "NAME=VALUE")]
        sets: Vec<String>,
    },
    /// Explain every problem and execute the explanations blindly.
    Verify(ConfigArg),
    /// Score EA/OA/EC/ERR from the verify stage, or from explicit counts.
    E3 {
        #[command(flatten)]
        config: ConfigArg,
        /// `N,N_exec,N_orig,N_joint,N_rec`; skips the pipeline.
        #[arg(long)]
        counts: Option<String>,
    },
    /// Generate structure-preserving perturbation neighborhoods.
    Perturb(ConfigArg),
    /// Build the weighted feasible-region DAG per anchor.
    Dag(ConfigArg),
    /// Trajectory coverage against each DAG.
    Coverage(ConfigArg),
    /// Success-rate prediction with the DAG and the sampling baseline.
    Predict(ConfigArg),
    /// Discover failure modes and build characteristic tables.
    Failures(ConfigArg),
    /// Shapley attribution over failure modes, or over explicit v(S) values.
    Shapley {
        #[command(flatten)]
        config: ConfigArg,
        /// v(S) for every mask 0..2^K, comma separated; skips the pipeline.
        #[arg(long)]
        values: Option<String>,
    },
    /// Subsampling stability of the top-k failure modes.
    Stability(ConfigArg),
    /// Run the pipeline (all stages unless --stages is given).
    Run {
        #[command(flatten)]
        config: ConfigArg,
        /// Comma-separated stage names.
        #[arg(long, value_delimiter = ',')]
        stages: Vec<String>,
        /// Write every model answer to a replayable mock script.
        #[arg(long)]
        record_script: Option<PathBuf>,
    },
    /// Render the report from existing artifacts.
    Report {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long, value_enum, default_value = "text")]
        format: Format,
    },
}

/// 1 usage, 2 data, 3 provider.
struct Failure(u8, String);

impl From<PipelineError> for Failure {
    fn from(e: PipelineError) -> Self {
        Failure(e.exit_code() as u8, e.to_string())
    }
}

fn usage(msg: impl Into<String>) -> Failure {
    Failure(1, msg.into())
}

fn data(msg: impl Into<String>) -> Failure {
    Failure(2, msg.into())
}

fn load_config(path: &Path) -> Result<RunConfig, Failure> {
    RunConfig::load(path).map_err(|e| PipelineError::from(e).into())
}

fn run_stages(config: &Path, stages: &[Stage], record: Option<&Path>) -> Result<(), Failure> {
    let cfg = load_config(config)?;
    let summary = run_pipeline(&cfg, stages, &RunOptions { record: record.is_some() })?;
    for s in &summary.stages {
        let status = match s.status {
            StageStatus::Ran => "ran",
            StageStatus::Skipped => "skipped (inputs unchanged)",
        };
        println!("{:<13} {status}", s.stage.as_str());
    }
    if let (Some(path), Some(script)) = (record, &summary.recorded) {
        write_atomic(path, &to_json_bytes(script)).map_err(|e| data(e.to_string()))?;
        println!("recorded {} responses to {}", script.responses.len(), path.display());
    }
    println!("artifacts: {}", cfg.output_dir.display());
    Ok(())
}

fn lint(file: &Path, dataset: Option<&Path>, id: Option<&str>) -> Result<(), Failure> {
    let src = std::fs::read_to_string(file).map_err(|e| data(format!("{}: {e}", file.display())))?;
    let spec = match parse_spec(&src) {
        Ok(s) => s,
        Err(diags) => {
            for d in &diags {
                println!("{}:{d}", file.display());
            }
            return Err(data(format!("{} error(s)", diags.len())));
        }
    };
    let mut findings = lint_warnings(&spec);
    findings.extend(validate_spec(&spec).into_iter().map(|v| Finding {
        step: v.step.unwrap_or(0),
        message: format!("spec invariant `{}` violated", v.rule),
        code: v.rule,
        severity: Severity::Error,
    }));
    if let (Some(ds), Some(id)) = (dataset, id) {
        let problems = load_dataset(ds)?;
        let p = problems.iter().find(|p| p.id == id).ok_or_else(|| data(format!("no problem `{id}`")))?;
        findings.extend(lint_leaks(&spec, p));
    }
    findings.sort();
    for f in &findings {
        println!("{}:{f}", file.display());
    }
    let errors = findings.iter().filter(|f| f.severity == Severity::Error).count();
    if errors > 0 {
        return Err(data(format!("{errors} error(s)")));
    }
    println!("{}: ok ({} steps, {} warning(s))", file.display(), spec.steps.len(), findings.len());
    Ok(())
}

fn calc(expr: &str, sets: &[String]) -> Result<(), Failure> {
    let mut env = Environment::new();
    for s in sets {
        let (name, value) = s.split_once('=').ok_or_else(|| usage(format!("--set expects NAME=VALUE, got `{s}`")))?;
        let v = parse_rational(value.trim()).ok_or_else(|| usage(format!("`{value}` is not a number")))?;
        env.bind_number(name.trim(), v).map_err(|e| usage(e.to_string()))?;
    }
    let v = eval_expr(expr, &env).map_err(|e| data(e.to_string()))?;
    let approx = if v.exact { "" } else { " (approximate)" };
    println!("{}{approx}", format_rational(&v.value));
    if format_rational(&v.value).contains('/') {
        println!("~ {}", rational_to_f64(&v.value));
    }
    Ok(())
}

fn e3_counts(raw: &str) -> Result<(), Failure> {
    let parts: Vec<u64> = raw
        .split(',')
        .map(|x| x.trim().parse::<u64>().map_err(|_| usage(format!("`{x}` is not a count"))))
        .collect::<Result<_, _>>()?;
    let [n, exec, orig, joint, rec] = parts[..] else { return Err(usage("--counts needs five values")) };
    let c = E3Counts::new(n, exec, orig, joint, rec).map_err(|e| data(e.to_string()))?;
    let [ea, oa, ec, err] = score_e3::<f64>(&c).percents();
    println!("EA {ea}  OA {oa}  EC {ec}  ERR {err}");
    Ok(())
}

fn shapley_values(raw: &str) -> Result<(), Failure> {
    let values = raw
        .split(',')
        .map(|x| parse_rational(x.trim()).ok_or_else(|| usage(format!("`{x}` is not a number"))))
        .collect::<Result<Vec<_>, _>>()?;
    let k = values.len().trailing_zeros() as usize;
    if values.len() != 1 << k {
        return Err(usage(format!("{} values given; need 2^K", values.len())));
    }
    let table = CharacteristicTable::from_values(k, &values).map_err(|e| data(e.to_string()))?;
    let r = shapley(&table, &[], &ShapleyConfig::default(), &ImpactThresholds::default()).map_err(|e| data(e.to_string()))?;
    for a in &r.attributions {
        println!("{}  phi={:.6}  phi_v={:.6}  {}", a.id, a.phi, a.phi_v, a.impact.as_str());
    }
    println!("u(F) - u(empty) = {:.6}", r.total);
    Ok(())
}

fn report(config: &Path, format: Format) -> Result<(), Failure> {
    let cfg = load_config(config)?;
    run_pipeline(&cfg, &[Stage::Report], &RunOptions::default())?;
    let store = ArtifactStore::open(&cfg.output_dir).map_err(|e| data(e.to_string()))?;
    let names: Vec<&str> = Stage::ALL.iter().map(|s| s.as_str()).collect();
    store.verify_chain(&names).map_err(|e| data(e.to_string()))?;
    let r = build_report(&store).map_err(|e| data(e.to_string()))?;
    match format {
        Format::Text => print!("{}", render_text(&r)),
        Format::Json => print!("{}", String::from_utf8_lossy(&to_json_bytes(&r))),
        Format::Csv => {
            let Some(rows) = &r.stability else { return Err(data("no stability artifact; run the `stability` stage")) };
            for s in rows {
                println!("# cluster {}", s.cluster_id);
                print!("{}", s.csv);
            }
        }
    }
    Ok(())
}

fn dispatch(cmd: Command) -> Result<(), Failure> {
    match cmd {
        Command::Lint { file, dataset, id } => lint(&file, dataset.as_deref(), id.as_deref()),
        Command::Calc { expr, sets } => calc(&expr, &sets),
        Command::Verify(c) => run_stages(&c.config, &[Stage::Verify], None),
        Command::E3 { counts: Some(raw), .. } => e3_counts(&raw),
        Command::E3 { config, .. } => run_stages(&config.config, &[Stage::E3], None),
        Command::Perturb(c) => run_stages(&c.config, &[Stage::Neighborhood], None),
        Command::Dag(c) => run_stages(&c.config, &[Stage::Dag], None),
        Command::Coverage(c) => run_stages(&c.config, &[Stage::Coverage], None),
        Command::Predict(c) => run_stages(&c.config, &[Stage::Predict], None),
        Command::Failures(c) => run_stages(&c.config, &[Stage::Failures], None),
        Command::Shapley { values: Some(raw), .. } => shapley_values(&raw),
        Command::Shapley { config, .. } => run_stages(&config.config, &[Stage::Shapley], None),
        Command::Stability(c) => run_stages(&c.config, &[Stage::Stability], None),
        Command::Run { config, stages, record_script } => {
            let stages = stages
                .iter()
                .map(|s| Stage::parse(s.trim()).ok_or_else(|| usage(format!("unknown stage `{s}`"))))
                .collect::<Result<Vec<_>, _>>()?;
            run_stages(&config.config, &stages, record_script.as_deref())
        }
        Command::Report { config, format } => report(&config.config, format),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure(code, msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(code)
        }
    }
}
