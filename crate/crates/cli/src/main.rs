use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::json;
use whitney_core::experiment::{
    build_geometry, run_sweep, run_verification_suite, ExperimentConfig, Geometry, SuiteOptions, OUTPUT_DIR_ENV,
};
use whitney_core::interpolant::{extend, tree_problem};
use whitney_core::oracle::{grid_minimal_extension, restrict, sample_test_function};
use whitney_core::tree::minimize_tree;
use whitney_core::Error;

#[derive(Parser)]
#[command(name = "whitney", version, about = "Extension of data on a planar fractal set")]
struct Cli {
    /// JSON experiment configuration; flags override its fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Directory for output files.
    #[arg(long, global = true, env = OUTPUT_DIR_ENV)]
    output_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the point set E as JSON.
    BuildSet(Case),
    /// Write the CZ decomposition and its geometry report.
    Decompose(Case),
    /// Write the cluster tree with its ball system.
    DumpTree(Case),
    /// Solve the tree problem for seeded or given data.
    SolveTree(DataCase),
    /// Build the extension and write its pieces and measurements.
    Extend(ExtendArgs),
    /// Solve the grid minimal-extension problem.
    Oracle(DataCase),
    /// Run the verification suite over the configured sweep.
    Verify(SweepArgs),
    /// Run the boundedness sweep and write CSV and SVG reports.
    Sweep(SweepArgs),
}

#[derive(Args, Clone)]
struct Case {
    /// N = 1/ε.
    #[arg(long = "n")]
    inv_eps: Option<u64>,
    /// Depth L.
    #[arg(long = "l")]
    depth: Option<u32>,
}

#[derive(Args, Clone)]
struct DataCase {
    #[command(flatten)]
    case: Case,
    /// Exponent p in (1, 2]
    #[arg(long)]
    p: Option<f64>,
    /// Seed of the test function G; data is G restricted to E.
    #[arg(long)]
    seed: Option<u64>,
    /// JSON map from point index to value, used instead of a seed.
    #[arg(long)]
    values: Option<PathBuf>,
}

#[derive(Args, Clone)]
struct ExtendArgs {
    #[command(flatten)]
    data: DataCase,
    /// Also sample F on a K×K grid over Q0 into extension_grid.csv.
    #[arg(long)]
    grid: Option<usize>,
}

#[derive(Args, Clone)]
struct SweepArgs {
    /// Comma-separated exponents
    #[arg(long, value_delimiter = ',')]
    p: Vec<f64>,
    /// Comma-separated values of N
    #[arg(long = "n", value_delimiter = ',')]
    inv_eps: Vec<u64>,
    /// Comma-separated depths
    #[arg(long = "l", value_delimiter = ',')]
    depth: Vec<u32>,
    /// Number of seeds, starting at 0.
    #[arg(long)]
    seeds: Option<u64>,
    /// Skip the grid minimal-extension solves
    #[arg(long)]
    no_oracle: bool,
}

enum Failure {
    /// Exit code 2.
    Config(String),
    /// Exit code 1.
    Run(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::InvalidParams(_) | Error::Json(_) => Failure::Config(e.to_string()),
            _ => Failure::Run(e.to_string()),
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Run(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Config(msg)) => {
            eprintln!("config error: {msg}");
            ExitCode::from(2)
        }
    }
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig, Failure> {
    let mut config = match &cli.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| Failure::Config(format!("{}: {e}", path.display())))?;
            ExperimentConfig::from_json(&text)?
        }
        None => ExperimentConfig::default(),
    };
    if let Some(dir) = &cli.output_dir {
        config.output_dir = Some(dir.clone());
    }
    Ok(config)
}

fn apply_case(config: &mut ExperimentConfig, case: &Case) {
    if let Some(n) = case.inv_eps {
        config.inv_eps = vec![n];
    }
    if let Some(l) = case.depth {
        config.depth = vec![l];
    }
}

fn apply_sweep(config: &mut ExperimentConfig, args: &SweepArgs) {
    if !args.p.is_empty() {
        config.p = args.p.clone();
    }
    if !args.inv_eps.is_empty() {
        config.inv_eps = args.inv_eps.clone();
    }
    if !args.depth.is_empty() {
        config.depth = args.depth.clone();
    }
    if let Some(k) = args.seeds {
        config.seeds = (0..k).collect();
    }
    if args.no_oracle {
        config.run_oracle = false;
    }
}

/// First `(N, L)` of the configuration after overrides.
fn geometry(config: &ExperimentConfig) -> Result<Geometry, Failure> {
    Ok(build_geometry(
        config.inv_eps[0],
        config.depth[0],
        config.min_inv_eps,
        config.cluster,
    )?)
}

fn output_dir(config: &ExperimentConfig) -> Result<PathBuf, Failure> {
    let dir = config.resolved_output_dir();
    fs::create_dir_all(&dir).map_err(|e| Failure::Run(format!("{}: {e}", dir.display())))?;
    Ok(dir)
}

fn write_json(dir: &Path, name: &str, value: &impl Serialize) -> Result<(), Failure> {
    let path = dir.join(name);
    let text = serde_json::to_string_pretty(value).map_err(|e| Failure::Run(e.to_string()))?;
    fs::write(&path, text).map_err(|e| Failure::Run(format!("{}: {e}", path.display())))?;
    println!("wrote {}", path.display());
    Ok(())
}

/// Data on E with the `p` and seed it was made for.
fn data(config: &mut ExperimentConfig, args: &DataCase, g: &Geometry) -> Result<(Vec<f64>, f64), Failure> {
    apply_case(config, &args.case);
    let p = args.p.unwrap_or(config.p[0]);
    if !(p > 1.0 && p <= 2.0) {
        return Err(Failure::Config(format!("p = {p} outside (1, 2]")));
    }
    let f = match &args.values {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| Failure::Config(format!("{}: {e}", path.display())))?;
            let map: BTreeMap<String, f64> =
                serde_json::from_str(&text).map_err(|e| Failure::Config(format!("{}: {e}", path.display())))?;
            let mut f = vec![f64::NAN; g.set.len()];
            for (k, v) in map {
                let i: usize = k
                    .parse()
                    .map_err(|_| Failure::Config(format!("point index {k:?} is not an integer")))?;
                *f.get_mut(i)
                    .ok_or_else(|| Failure::Config(format!("point index {i} out of range")))? = v;
            }
            if let Some(i) = f.iter().position(|v| v.is_nan()) {
                return Err(Failure::Config(format!("no value for point {i}")));
            }
            f
        }
        None => {
            let seed = args.seed.unwrap_or(config.seeds[0]);
            restrict(&sample_test_function(seed, &config.test_function)?, &g.set)
        }
    };
    Ok((f, p))
}

fn run(cli: Cli) -> Result<(), Failure> {
    let mut config = load_config(&cli)?;
    match &cli.command {
        Command::BuildSet(case) => {
            apply_case(&mut config, case);
            let g = geometry(&config)?;
            write_json(&output_dir(&config)?, "set.json", &g.set.to_document())
        }
        Command::Decompose(case) => {
            apply_case(&mut config, case);
            let g = geometry(&config)?;
            let report = whitney_core::cz::verify_good_geometry(&g.decomp, 2000, 0);
            let dir = output_dir(&config)?;
            write_json(&dir, "decomposition.json", &g.decomp.to_document())?;
            write_json(&dir, "geometry_report.json", &report)?;
            if report.passed {
                Ok(())
            } else {
                Err(Failure::Run(report.failures.join("; ")))
            }
        }
        Command::DumpTree(case) => {
            apply_case(&mut config, case);
            let g = geometry(&config)?;
            write_json(&output_dir(&config)?, "tree.json", &g.tree.to_document())
        }
        Command::SolveTree(args) => {
            apply_case(&mut config, &args.case);
            let g = geometry(&config)?;
            let (f, p) = data(&mut config, args, &g)?;
            let problem = tree_problem(&f, &g.tree, &g.decomp, p)?;
            let solution = minimize_tree(&problem, config.tree_tolerance)?;
            write_json(
                &output_dir(&config)?,
                "tree_solution.json",
                &json!({ "problem": problem, "solution": solution }),
            )
        }
        Command::Extend(args) => {
            apply_case(&mut config, &args.data.case);
            let g = geometry(&config)?;
            let (f, p) = data(&mut config, &args.data, &g)?;
            let (ext, problem, solution) = extend(&f, &g.decomp, &g.tree, p, config.tree_tolerance)?;
            let norm = ext.seminorm(p, config.quadrature)?;
            let rhs = ext.patching_rhs(p);
            let edge = ext.eta_edge_vs_tree(&solution, &problem.weights, p)?;
            let dir = output_dir(&config)?;
            write_json(
                &dir,
                "extension.json",
                &json!({
                    "p": p,
                    "seminorm": norm,
                    "interpolation_error": ext.interpolation_error(&f),
                    "patching": rhs,
                    "edge_vs_tree": edge,
                    "tail": ext.tail_check(1000, 1e-3),
                    "extension": ext.to_document(),
                }),
            )?;
            if let Some(k) = args.grid {
                let path = dir.join("extension_grid.csv");
                let mut w = csv::Writer::from_path(&path).map_err(|e| Failure::Run(e.to_string()))?;
                w.write_record(["x", "y", "value"])
                    .map_err(|e| Failure::Run(e.to_string()))?;
                let k = k.max(2);
                for i in 0..k {
                    for j in 0..k {
                        let x = [
                            -4.0 + 8.0 * i as f64 / (k - 1) as f64,
                            -4.0 + 8.0 * j as f64 / (k - 1) as f64,
                        ];
                        w.write_record([x[0].to_string(), x[1].to_string(), ext.value(x).to_string()])
                            .map_err(|e| Failure::Run(e.to_string()))?;
                    }
                }
                w.flush().map_err(|e| Failure::Run(e.to_string()))?;
                println!("wrote {}", path.display());
            }
            Ok(())
        }
        Command::Oracle(args) => {
            apply_case(&mut config, &args.case);
            let g = geometry(&config)?;
            let (f, p) = data(&mut config, args, &g)?;
            let result = grid_minimal_extension(&f, &g.set, p, &config.oracle)?;
            let dir = output_dir(&config)?;
            write_json(
                &dir,
                "oracle.json",
                &json!({
                    "p": p,
                    "per_delta": result.grid.spec.per_delta,
                    "objective": result.objective,
                    "iterations": result.iterations,
                    "residual": result.residual,
                    "stage_objectives": result.stage_objectives,
                }),
            )?;
            let path = dir.join("oracle_grid.csv");
            let mut w = csv::Writer::from_path(&path).map_err(|e| Failure::Run(e.to_string()))?;
            w.write_record(["x", "y", "value", "constrained"])
                .map_err(|e| Failure::Run(e.to_string()))?;
            let mut fixed = vec![false; result.grid.values.len()];
            for &k in &result.grid.constrained {
                fixed[k] = true;
            }
            for (k, v) in result.grid.values.iter().enumerate() {
                let x = result.grid.spec.coords(k);
                w.write_record([
                    x[0].to_string(),
                    x[1].to_string(),
                    v.to_string(),
                    (fixed[k] as u8).to_string(),
                ])
                .map_err(|e| Failure::Run(e.to_string()))?;
            }
            w.flush().map_err(|e| Failure::Run(e.to_string()))?;
            println!("wrote {}", path.display());
            Ok(())
        }
        Command::Verify(args) => {
            apply_sweep(&mut config, args);
            let report = run_verification_suite(&config, &SuiteOptions::default())?;
            for c in &report.checks {
                let mark = if c.passed { "PASS" } else { "FAIL" };
                println!("{mark} N={} L={} {}: {}", c.inv_eps, c.depth, c.name, c.detail);
            }
            write_json(&output_dir(&config)?, "verification.json", &report)?;
            if report.passed() {
                Ok(())
            } else {
                Err(Failure::Run("verification failed".into()))
            }
        }
        Command::Sweep(args) => {
            apply_sweep(&mut config, args);
            let outcome = run_sweep(&config)?;
            let dir = config.resolved_output_dir();
            println!(
                "{} runs, {} skipped; results in {}",
                outcome.records.len(),
                outcome.skipped.len(),
                dir.display()
            );
            for s in &outcome.skipped {
                println!("skipped N={} L={}: {}", s.inv_eps, s.depth, s.reason);
            }
            Ok(())
        }
    }
}
