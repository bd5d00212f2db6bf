//! `mtfad`: fit, select, simulate and evaluate mixtures of t-factor analyzers.
//!
//! Exit codes: 0 on success, 2 when a fit stopped at `max_iter` (outputs are
//! still written), 1 on any error including bad arguments.

use std::error::Error as StdError;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use mtfad::io::{self, RunManifest};
use mtfad::metrics::{ari, match_components, rel_distances};
use mtfad::simulate::{calibrate_overlap, estimate_overlap, gen_tmix, SimSpec};
use mtfad::{fit, select, Dataset, FitConfig, QMode};

type CliResult<T> = Result<T, Box<dyn StdError>>;

#[derive(Parser)]
#[command(name = "mtfad", version, about = "Robust clustering with mixtures of t-factor analyzers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit one (K, q) model.
    Fit(FitArgs),
    /// Choose (K, q) by BIC over a grid.
    Select(SelectArgs),
    /// Draw a synthetic data set.
    Simulate(SimulateArgs),
    /// Compare a fit with known labels and, optionally, known parameters.
    Eval(EvalArgs),
}

#[derive(Args)]
struct DataArgs {
    /// Input CSV with a header row.
    #[arg(long)]
    data: PathBuf,
    /// Column to exclude from the features, e.g. `label` in simulated files.
    #[arg(long)]
    label_column: Option<String>,
    /// JSON object with fit settings; omitted keys keep their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the seed in the config.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct FitArgs {
    #[command(flatten)]
    input: DataArgs,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    k: u64,
    /// A single q for every component, or one per component separated by commas.
    #[arg(long)]
    q: String,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SelectArgs {
    #[command(flatten)]
    input: DataArgs,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    k_max: u64,
    /// Let components have different numbers of factors.
    #[arg(long)]
    varied_q: bool,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    q_max: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long)]
    n: usize,
    #[arg(long)]
    p: usize,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    k: u64,
    /// Factors per component; a single value is repeated.
    #[arg(long, value_delimiter = ',', num_args = 1..)]
    q: Vec<usize>,
    /// Degrees of freedom per component; a single value is repeated.
    #[arg(long, value_delimiter = ',', num_args = 1..)]
    dof: Vec<f64>,
    /// Mixing weights; equal when omitted.
    #[arg(long, value_delimiter = ',', num_args = 1..)]
    weights: Option<Vec<f64>>,
    /// Target generalized overlap; the means are rescaled to reach it.
    #[arg(long)]
    overlap: Option<f64>,
    /// Monte Carlo draws for the overlap estimate.
    #[arg(long, default_value_t = 100_000)]
    mc: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output CSV.
    #[arg(long)]
    out: PathBuf,
    /// Where to write the true parameters as model JSON.
    #[arg(long)]
    truth_out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    /// Fitted model JSON.
    #[arg(long)]
    fitted: PathBuf,
    /// Assignments CSV written by `fit` or `select`.
    #[arg(long)]
    assignments: PathBuf,
    /// CSV holding the true labels.
    #[arg(long)]
    truth_labels: PathBuf,
    #[arg(long, default_value = "label")]
    truth_column: String,
    /// True parameters as model JSON.
    #[arg(long)]
    truth_model: Option<PathBuf>,
    /// Output JSON; defaults to `eval.json` beside the assignments.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    if let Err(e) = configure_threads() {
        eprintln!("error: {e}");
        return ExitCode::from(1);
    }
    let outcome = match cli.command {
        Command::Fit(a) => run_fit(a),
        Command::Select(a) => run_select(a),
        Command::Simulate(a) => run_simulate(a),
        Command::Eval(a) => run_eval(a),
    };
    match outcome {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

fn configure_threads() -> CliResult<()> {
    let Ok(raw) = std::env::var("MTFAD_THREADS") else {
        return Ok(());
    };
    let threads: usize = raw.trim().parse().map_err(|_| format!("MTFAD_THREADS must be a positive integer, got {raw:?}"))?;
    if threads == 0 {
        return Err("MTFAD_THREADS must be a positive integer, got 0".into());
    }
    rayon::ThreadPoolBuilder::new().num_threads(threads).build_global()?;
    Ok(())
}

fn load(input: &DataArgs, manifest_cmd: &str) -> CliResult<(Dataset, FitConfig, RunManifest)> {
    let mut config = match &input.config {
        Some(path) => serde_json::from_str::<FitConfig>(&fs::read_to_string(path)?)
            .map_err(|e| format!("{}: {e}", path.display()))?,
        None => FitConfig::default(),
    };
    if let Some(seed) = input.seed {
        config.seed = seed;
    }
    config.validate()?;
    let data = io::read_csv(&input.data, input.label_column.as_deref())?;
    let mut manifest = RunManifest::new(manifest_cmd, serde_json::to_value(&config)?, config.seed);
    manifest.add_input(&input.data)?;
    if let Some(path) = &input.config {
        manifest.add_input(path)?;
    }
    Ok((data, config, manifest))
}

fn parse_q(raw: &str, k: usize) -> CliResult<Vec<usize>> {
    let values = raw
        .split(',')
        .map(|s| s.trim().parse::<usize>().map_err(|_| format!("invalid q value {s:?}")))
        .collect::<Result<Vec<_>, _>>()?;
    match values.len() {
        1 => Ok(vec![values[0]; k]),
        m if m == k => Ok(values),
        m => Err(format!("--q lists {m} values but K = {k}").into()),
    }
}

fn broadcast<T: Copy>(name: &str, values: &[T], k: usize) -> CliResult<Vec<T>> {
    match values.len() {
        1 => Ok(vec![values[0]; k]),
        m if m == k => Ok(values.to_vec()),
        m => Err(format!("--{name} lists {m} values but K = {k}").into()),
    }
}

fn finish(manifest: &mut RunManifest, dir: &Path, outputs: &[PathBuf]) -> CliResult<()> {
    manifest.outputs = outputs.to_vec();
    manifest.write(&dir.join("manifest.json"))?;
    Ok(())
}

fn run_fit(args: FitArgs) -> CliResult<ExitCode> {
    let clock = Instant::now();
    let (data, config, mut manifest) = load(&args.input, "fit")?;
    manifest.timings.push(("read".into(), clock.elapsed().as_secs_f64()));
    let k = args.k as usize;
    let q_vec = parse_q(&args.q, k)?;

    let clock = Instant::now();
    let result = fit(&data, k, &q_vec, &config, None)?;
    manifest.timings.push(("fit".into(), clock.elapsed().as_secs_f64()));
    for w in &result.warnings {
        eprintln!("warning: {w}");
    }

    let clock = Instant::now();
    fs::create_dir_all(&args.out)?;
    let model_path = args.out.join("model.json");
    let assign_path = args.out.join("assignments.csv");
    io::write_model(&model_path, &result.model)?;
    io::write_assignments(&assign_path, &result)?;
    manifest.timings.push(("write".into(), clock.elapsed().as_secs_f64()));
    finish(&mut manifest, &args.out, &[model_path, assign_path])?;

    let m = &result.model;
    println!("loglik {:.6}  iterations {}  converged {}", m.loglik, m.iterations, m.converged);
    Ok(if m.converged { ExitCode::SUCCESS } else { ExitCode::from(2) })
}

fn run_select(args: SelectArgs) -> CliResult<ExitCode> {
    let clock = Instant::now();
    let (data, config, mut manifest) = load(&args.input, "select")?;
    manifest.timings.push(("read".into(), clock.elapsed().as_secs_f64()));
    let k_values: Vec<usize> = (1..=args.k_max as usize).collect();
    let mode = if args.varied_q { QMode::Varied } else { QMode::Uniform };

    let clock = Instant::now();
    let selection = select(&data, &k_values, mode, args.q_max.map(|q| q as usize), &config)?;
    manifest.timings.push(("select".into(), clock.elapsed().as_secs_f64()));
    let table = &selection.table;
    if let Some(q) = table.truncated_q_max {
        eprintln!("warning: q_max {q} exceeds the identifiability bound and was truncated");
    }
    for k in &table.greedy_k {
        eprintln!("warning: K = {k} used greedy search over q vectors");
    }

    let clock = Instant::now();
    fs::create_dir_all(&args.out)?;
    let table_path = args.out.join("selection.csv");
    let model_path = args.out.join("best_model.json");
    let assign_path = args.out.join("assignments.csv");
    io::atomic_write(&table_path, table.to_csv()?.as_bytes())?;
    io::write_model(&model_path, &selection.best.model)?;
    io::write_assignments(&assign_path, &selection.best)?;
    manifest.timings.push(("write".into(), clock.elapsed().as_secs_f64()));
    finish(&mut manifest, &args.out, &[table_path, model_path, assign_path])?;

    let best = table.best();
    let q: Vec<String> = best.q_vec.iter().map(usize::to_string).collect();
    println!("best K {}  q {}  bic {:.4}  loglik {:.6}", best.k, q.join(","), best.bic, best.loglik);
    Ok(if selection.best.model.converged { ExitCode::SUCCESS } else { ExitCode::from(2) })
}

fn run_simulate(args: SimulateArgs) -> CliResult<ExitCode> {
    let k = args.k as usize;
    let mut spec = SimSpec::new(args.n, args.p, broadcast("q", &args.q, k)?, broadcast("dof", &args.dof, k)?, args.seed);
    if let Some(w) = &args.weights {
        spec.weights = broadcast("weights", w, k)?;
    }
    spec.target_overlap = args.overlap;
    spec.validate()?;

    let mut timings = Vec::new();
    let clock = Instant::now();
    if spec.target_overlap.is_some() {
        spec = calibrate_overlap(&spec, args.mc)?;
        timings.push(("calibrate".to_string(), clock.elapsed().as_secs_f64()));
    }
    let clock = Instant::now();
    let (data, truth) = gen_tmix(&spec)?;
    timings.push(("generate".to_string(), clock.elapsed().as_secs_f64()));

    let mut outputs = vec![args.out.clone()];
    if let Some(parent) = args.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    io::write_dataset(&args.out, &data)?;
    if let Some(path) = &args.truth_out {
        io::write_model(path, &truth)?;
        outputs.push(path.clone());
    }
    let mut manifest = RunManifest::new("simulate", serde_json::to_value(&spec)?, spec.seed);
    manifest.outputs = outputs;
    manifest.timings = timings;
    manifest.write(&manifest_beside(&args.out))?;

    if k > 1 && args.overlap.is_none() {
        let omega = estimate_overlap(&truth, args.mc, spec.seed)?;
        println!("n {}  p {}  K {}  overlap {omega:.4e}", spec.n, spec.p, k);
    } else {
        println!("n {}  p {}  K {}  mean scale {:.6}", spec.n, spec.p, k, spec.mean_scale);
    }
    Ok(ExitCode::SUCCESS)
}

/// `data.csv` gets `data.manifest.json`.
fn manifest_beside(path: &Path) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!("{stem}.manifest.json"))
}

fn run_eval(args: EvalArgs) -> CliResult<ExitCode> {
    let fitted = io::read_model(&args.fitted)?;
    let assigned = io::read_labels(&args.assignments, None)?;
    let truth_labels = io::read_labels(&args.truth_labels, Some(&args.truth_column))?;
    let score = ari(&assigned, &truth_labels)?;
    let mut report = json!({ "ari": score });
    println!("ARI {score:.6}");

    if let Some(path) = &args.truth_model {
        let truth = io::read_model(path)?;
        let perm = match_components(&truth, &fitted)?;
        let d = rel_distances(&truth, &fitted, &perm)?;
        for (k, &j) in perm.iter().enumerate() {
            println!(
                "component {} -> fitted {}  d_mu {:.4e}  d_lambda {:.4e}  d_psi {:.4e}",
                k + 1,
                j + 1,
                d.d_mu[k],
                d.d_lambda[k],
                d.d_psi[k]
            );
        }
        report["matching"] = json!(perm.iter().map(|j| j + 1).collect::<Vec<_>>());
        report["distances"] = serde_json::to_value(&d)?;
    }

    let out = args.out.unwrap_or_else(|| args.assignments.with_file_name("eval.json"));
    let mut text = serde_json::to_string_pretty(&report)?;
    text.push('\n');
    io::atomic_write(&out, text.as_bytes())?;
    Ok(ExitCode::SUCCESS)
}
