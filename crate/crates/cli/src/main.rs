use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dynakey_core::dataset::{load_sequence, parse_trajectory, write_text_atomic, DatasetError, DEFAULT_MAX_DIFF};
use dynakey_core::eval::{evaluate, render_table, EvalError, EvalOptions, MetricReport};
use dynakey_core::pipeline::{format_records, format_static_set, summarize, PipelineParams};
use dynakey_core::sim::{export_scene, generate_scene, summarize as scene_summary, SceneConfig, SimError};
use dynakey_core::Pipeline;

#[derive(Parser)]
#[command(name = "dynakey", version, about = "Depth-aware static/dynamic keypoint classification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic scene and export it in TUM layout.
    Simulate {
        config: PathBuf,
        out_dir: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Classify every keypoint of a dataset directory.
    Classify(ClassifyArgs),
    /// ATE/RPE of an estimated trajectory against ground truth.
    Evaluate {
        estimated: PathBuf,
        ground_truth: PathBuf,
        #[arg(long)]
        baseline: Option<PathBuf>,
        #[arg(long, default_value_t = DEFAULT_MAX_DIFF)]
        max_diff: f64,
        #[arg(long)]
        with_scale: bool,
        /// Frame step for the relative pose error.
        #[arg(long, default_value_t = 1)]
        delta: usize,
        /// Row label; defaults to the estimated file stem.
        #[arg(long)]
        sequence: Option<String>,
        /// Print the JSON report instead of the table.
        #[arg(long)]
        json: bool,
        /// Also write the JSON report to this file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Tabulate JSON reports written by `evaluate`.
    Report { reports: Vec<PathBuf> },
}

#[derive(Args)]
struct ClassifyArgs {
    dataset: PathBuf,
    out_csv: PathBuf,
    /// TOML file with the full parameter set; flags below override it.
    #[arg(long)]
    params: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value_t = DEFAULT_MAX_DIFF)]
    max_diff: f64,
    #[arg(long)]
    no_oim: bool,
    /// Estimate F with RANSAC even when ground-truth poses exist.
    #[arg(long)]
    ignore_poses: bool,
    #[arg(long)]
    omega_uncertain: Option<f64>,
    #[arg(long)]
    omega_reliable: Option<f64>,
    #[arg(long)]
    rho: Option<f64>,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    decision_threshold: Option<f64>,
    #[arg(long)]
    ransac_iters: Option<usize>,
}

#[derive(Debug)]
enum CliError {
    Config(String),
    Io(String),
    Internal(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Io(_) => 3,
            CliError::Internal(_) => 4,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Config(m) | CliError::Io(m) | CliError::Internal(m) => m,
        }
    }
}

impl From<DatasetError> for CliError {
    fn from(e: DatasetError) -> Self {
        if e.is_io() {
            CliError::Io(e.to_string())
        } else {
            CliError::Config(e.to_string())
        }
    }
}

impl From<SimError> for CliError {
    fn from(e: SimError) -> Self {
        match e {
            SimError::InvalidConfig(m) => CliError::Config(format!("invalid scene config: {m}")),
            SimError::Io(e) => e.into(),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        CliError::Config(e.to_string())
    }
}

fn read_text(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

fn simulate(config: &Path, out_dir: &Path, seed: Option<u64>) -> Result<(), CliError> {
    let mut cfg = SceneConfig::from_toml_str(&read_text(config)?)
        .map_err(|e| CliError::Config(format!("{}: {e}", config.display())))?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let seq = generate_scene(&cfg)?;
    export_scene(&seq, out_dir)?;
    let s = scene_summary(&seq);
    println!(
        "frames {} keypoints {} dynamic fraction {:.4} -> {}",
        s.frames,
        s.keypoints,
        s.dynamic_fraction,
        out_dir.display()
    );
    Ok(())
}

fn resolve_params(args: &ClassifyArgs) -> Result<PipelineParams, CliError> {
    let mut p = match &args.params {
        Some(path) => PipelineParams::from_toml_str(&read_text(path)?)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?,
        None => PipelineParams::default(),
    };
    if let Some(s) = args.seed {
        p.seed = s;
    }
    if args.no_oim {
        p.use_oim = false;
    }
    if args.ignore_poses {
        p.use_poses = false;
    }
    if let Some(v) = args.omega_uncertain {
        p.classifier.omega_uncertain = v;
    }
    if let Some(v) = args.omega_reliable {
        p.classifier.omega_reliable = v;
    }
    if let Some(v) = args.rho {
        p.oim.rho = v;
    }
    if let Some(v) = args.epsilon {
        p.classifier.epsilon = v;
    }
    if let Some(v) = args.decision_threshold {
        p.classifier.decision_threshold = v;
    }
    if let Some(v) = args.ransac_iters {
        p.ransac.iterations = v;
    }
    p.validate().map_err(CliError::Config)?;
    if !(args.max_diff >= 0.0) {
        return Err(CliError::Config(format!("max-diff must be non-negative, got {}", args.max_diff)));
    }
    Ok(p)
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!("{stem}{suffix}"))
}

fn classify(args: &ClassifyArgs) -> Result<(), CliError> {
    let params = resolve_params(args)?;
    let seq = load_sequence(&args.dataset, args.max_diff)?;
    let pipeline = Pipeline::new(params).map_err(CliError::Internal)?;
    let results = pipeline.run(&seq);
    let summary = summarize(&seq, &results, &params);
    let json = serde_json::to_string_pretty(&summary).map_err(|e| CliError::Internal(e.to_string()))?;
    write_text_atomic(&args.out_csv, &format_records(&results))?;
    write_text_atomic(&sibling(&args.out_csv, ".static.csv"), &format_static_set(&results))?;
    write_text_atomic(&sibling(&args.out_csv, ".summary.json"), &(json + "\n"))?;
    let dynamic = summary.per_track.map(|s| s.dynamic);
    println!(
        "frames {} keypoints {} predicted dynamic {} oim flips {}{}",
        summary.frames,
        summary.keypoints,
        summary.predicted_dynamic,
        summary.oim_flips,
        match dynamic {
            Some(d) => format!(
                " | dynamic precision {} recall {} (per track)",
                d.precision.map_or("-".into(), |v| format!("{v:.3}")),
                d.recall.map_or("-".into(), |v| format!("{v:.3}"))
            ),
            None => String::new(),
        }
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn evaluate_cmd(
    estimated: &Path,
    ground_truth: &Path,
    baseline: Option<&Path>,
    opts: EvalOptions,
    sequence: Option<String>,
    json: bool,
    out: Option<&Path>,
) -> Result<(), CliError> {
    let est = parse_trajectory(estimated)?;
    let gt = parse_trajectory(ground_truth)?;
    let base = baseline.map(parse_trajectory).transpose()?;
    let name = sequence.unwrap_or_else(|| {
        estimated.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "sequence".into())
    });
    let report = evaluate(&name, &est, &gt, base.as_deref(), &opts)?;
    let doc = serde_json::to_string_pretty(&report).map_err(|e| CliError::Internal(e.to_string()))?;
    if let Some(path) = out {
        write_text_atomic(path, &format!("{doc}\n"))?;
    }
    if json {
        println!("{doc}");
    } else {
        print!("{}", render_table(&[report]));
    }
    Ok(())
}

fn report(paths: &[PathBuf]) -> Result<(), CliError> {
    if paths.is_empty() {
        return Err(CliError::Config("report needs at least one JSON file".into()));
    }
    let mut reports = Vec::with_capacity(paths.len());
    for p in paths {
        let r: MetricReport = serde_json::from_str(&read_text(p)?)
            .map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?;
        reports.push(r);
    }
    print!("{}", render_table(&reports));
    Ok(())
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Simulate { config, out_dir, seed } => simulate(&config, &out_dir, seed),
        Command::Classify(args) => classify(&args),
        Command::Evaluate { estimated, ground_truth, baseline, max_diff, with_scale, delta, sequence, json, out } => {
            if !(max_diff >= 0.0) || delta == 0 {
                return Err(CliError::Config("max-diff must be non-negative and delta positive".into()));
            }
            let opts = EvalOptions { max_diff, with_scale, delta };
            evaluate_cmd(&estimated, &ground_truth, baseline.as_deref(), opts, sequence, json, out.as_deref())
        }
        Command::Report { reports } => report(&reports),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("DYNAKEY_LOG", "warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::debug!("exiting with code {}", e.code());
            eprintln!("error: {}", e.message());
            ExitCode::from(e.code())
        }
    }
}
