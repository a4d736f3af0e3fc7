//! Parameter sweeps, the boundedness experiment and the verification suite.
//!
//! Results go to a CSV that is byte-identical for a fixed configuration;
//! wall-clock timings go to a separate file.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::clustering::{build_cluster_tree, ClusterConfig, ClusterTree};
use crate::cz::{decompose, verify_good_geometry, CzDecomposition};
use crate::fractal_set::{build_fractal_set, validate_separation, FractalParams, FractalSet};
use crate::interpolant::{extend, seminorms, Extension, QuadConfig};
use crate::oracle::{
    discrete_seminorm, grid_minimal_extension, restrict, sample_test_function, AnalyticTestFunction, GridFunction,
    GridSpec, OracleConfig, TestFunctionConfig,
};
use crate::pou::{verify_pou, BumpSpec, PouCheckConfig};
use crate::tree::TreeSolution;
use crate::{Error, Result};

/// Environment variable naming the default output directory.
pub const OUTPUT_DIR_ENV: &str = "WHITNEY_OUTPUT_DIR";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub p: Vec<f64>,
    /// Values of `N = 1/ε`.
    pub inv_eps: Vec<u64>,
    /// Values of the depth `L`.
    pub depth: Vec<u32>,
    pub seeds: Vec<u64>,
    /// Validity threshold: `N` below it is skipped.
    pub min_inv_eps: u64,
    pub quadrature: QuadConfig,
    /// Grid oracle settings. Runs whose grid exceeds `max_side` at
    /// `per_delta` retry with `h = Δ`, and otherwise go without an oracle.
    pub oracle: OracleConfig,
    pub run_oracle: bool,
    pub cluster: ClusterConfig,
    pub test_function: TestFunctionConfig,
    pub tree_tolerance: f64,
    pub output_dir: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            p: vec![1.2, 1.5, 1.9],
            inv_eps: vec![4, 8],
            depth: vec![1, 2, 3],
            seeds: (0..5).collect(),
            min_inv_eps: 4,
            quadrature: QuadConfig::default(),
            oracle: OracleConfig {
                max_side: 129,
                ..OracleConfig::default()
            },
            run_oracle: true,
            cluster: ClusterConfig::relaxed(),
            test_function: TestFunctionConfig::default(),
            tree_tolerance: 1e-10,
            output_dir: None,
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let config: Self = serde_json::from_str(text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        if self.p.is_empty() || self.inv_eps.is_empty() || self.depth.is_empty() || self.seeds.is_empty() {
            return Err(Error::InvalidParams("empty sweep axis".into()));
        }
        if let Some(p) = self.p.iter().find(|p| !(**p > 1.0 && **p <= 2.0)) {
            return Err(Error::InvalidParams(format!("p = {p} outside (1, 2]")));
        }
        if self.quadrature.subcells == 0 || self.quadrature.nodes == 0 {
            return Err(Error::InvalidParams("empty quadrature".into()));
        }
        if !(self.tree_tolerance > 0.0) {
            return Err(Error::InvalidParams("tree tolerance must be positive".into()));
        }
        Ok(())
    }

    /// `output_dir`, else the environment variable, else `results`.
    pub fn resolved_output_dir(&self) -> PathBuf {
        self.output_dir
            .clone()
            .or_else(|| std::env::var_os(OUTPUT_DIR_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("results"))
    }
}

/// One `(p, N, L, seed)` run. Optional fields are empty when a stage
/// failed or was not run; `status` says which.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ExperimentRecord {
    pub p: f64,
    pub inv_eps: u64,
    pub depth: u32,
    pub seed: u64,
    pub squares: usize,
    pub points: usize,
    /// `‖F‖_{L^{2,p}(Q0)}`.
    pub f_norm: Option<f64>,
    /// `‖G‖_{L^{2,p}(R^2)}`.
    pub g_norm: f64,
    /// `‖F‖ / ‖G‖`; empty together with `exact` when both vanish.
    pub ratio: Option<f64>,
    pub exact: bool,
    pub refinement_error: Option<f64>,
    pub quadrature_flagged: bool,
    pub interpolation_error: Option<f64>,
    pub lq_sum: Option<f64>,
    pub eta_sum: Option<f64>,
    /// `‖F‖^p / (lq_sum + eta_sum)`.
    pub c_patch: Option<f64>,
    pub edge_sum: Option<f64>,
    pub tree_sum: Option<f64>,
    pub edge_tree_ratio: Option<f64>,
    pub tree_kkt_residual: Option<f64>,
    /// `Δ / h` of the oracle grid.
    pub oracle_per_delta: Option<u32>,
    /// Discrete minimal objective, and the same objective for `F` sampled
    /// on the grid.
    pub oracle_objective: Option<f64>,
    pub f_grid_objective: Option<f64>,
    /// `‖F‖ / max(oracle^(1/p), ‖G‖)`.
    pub reference_ratio: Option<f64>,
    pub status: String,
    #[serde(skip)]
    pub timings: Timings,
}

/// Wall-clock seconds. Set-up and seminorm time are shared by the runs of
/// one `(N, L)` and one `(p, N, L)` respectively.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Timings {
    pub setup: f64,
    pub extend: f64,
    pub seminorm: f64,
    pub checks: f64,
    pub oracle: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SkippedRun {
    pub p: Option<f64>,
    pub inv_eps: u64,
    pub depth: u32,
    pub reason: String,
}

#[derive(Clone, Debug, Default)]
pub struct SweepOutcome {
    pub records: Vec<ExperimentRecord>,
    pub skipped: Vec<SkippedRun>,
}

/// Everything that depends on `(N, L)` only.
pub struct Geometry {
    pub set: FractalSet,
    pub decomp: CzDecomposition,
    pub tree: ClusterTree,
    pub seconds: f64,
}

pub fn build_geometry(inv_eps: u64, depth: u32, min_inv_eps: u64, cluster: ClusterConfig) -> Result<Geometry> {
    let t = Instant::now();
    let set = build_fractal_set(FractalParams::with_threshold(inv_eps, depth, min_inv_eps)?);
    let decomp = decompose(&set)?;
    let tree = build_cluster_tree(&set, cluster)?;
    Ok(Geometry {
        set,
        decomp,
        tree,
        seconds: t.elapsed().as_secs_f64(),
    })
}

/// Samples `G`, extends `G|_E` and records `‖F‖ / ‖G‖` with the side
/// measurements for every `(p, N, L, seed)`. The same seed gives the same
/// `G` at every `(p, N, L)`. Failing runs are recorded with their error;
/// parameter combinations that cannot be built are skipped with a reason.
pub fn run_boundedness_experiment(config: &ExperimentConfig) -> Result<SweepOutcome> {
    config.validate()?;
    let gs: Vec<AnalyticTestFunction> = config
        .seeds
        .iter()
        .map(|&s| sample_test_function(s, &config.test_function))
        .collect::<Result<_>>()?;
    let mut out = SweepOutcome::default();
    for &n in &config.inv_eps {
        for &l in &config.depth {
            let geometry = match build_geometry(n, l, config.min_inv_eps, config.cluster) {
                Ok(g) => g,
                Err(e) => {
                    log::warn!("skipping N = {n}, L = {l}: {e}");
                    out.skipped.push(SkippedRun {
                        p: None,
                        inv_eps: n,
                        depth: l,
                        reason: e.to_string(),
                    });
                    continue;
                }
            };
            for &p in &config.p {
                let records = run_point(config, &geometry, p, &gs);
                out.records.extend(records);
            }
        }
    }
    out.records.sort_by(|a, b| {
        (a.p, a.inv_eps, a.depth, a.seed)
            .partial_cmp(&(b.p, b.inv_eps, b.depth, b.seed))
            .expect("finite parameters")
    });
    Ok(out)
}

/// All seeds at one `(p, N, L)`; seminorms are batched over the seeds.
pub fn run_point(
    config: &ExperimentConfig,
    geometry: &Geometry,
    p: f64,
    gs: &[AnalyticTestFunction],
) -> Vec<ExperimentRecord> {
    let Geometry { set, decomp, tree, .. } = geometry;
    let params = set.params();
    let fs: Vec<Vec<f64>> = gs.iter().map(|g| restrict(g, set)).collect();
    let mut records: Vec<ExperimentRecord> = config
        .seeds
        .iter()
        .zip(gs)
        .map(|(&seed, g)| ExperimentRecord {
            p,
            inv_eps: params.inv_eps(),
            depth: params.depth(),
            seed,
            squares: decomp.len(),
            points: set.len(),
            f_norm: None,
            g_norm: g.seminorm(p),
            ratio: None,
            exact: false,
            refinement_error: None,
            quadrature_flagged: false,
            interpolation_error: None,
            lq_sum: None,
            eta_sum: None,
            c_patch: None,
            edge_sum: None,
            tree_sum: None,
            edge_tree_ratio: None,
            tree_kkt_residual: None,
            oracle_per_delta: None,
            oracle_objective: None,
            f_grid_objective: None,
            reference_ratio: None,
            status: "ok".into(),
            timings: Timings {
                setup: geometry.seconds,
                ..Timings::default()
            },
        })
        .collect();

    let mut built: Vec<(usize, Extension, TreeSolution, Vec<f64>)> = Vec::new();
    for (i, f) in fs.iter().enumerate() {
        let t = Instant::now();
        match extend(f, decomp, tree, p, config.tree_tolerance) {
            Ok((ext, problem, solution)) => {
                records[i].tree_kkt_residual = Some(solution.kkt_residual);
                built.push((i, ext, solution, problem.weights));
            }
            Err(e) => records[i].status = format!("failed: {e}"),
        }
        records[i].timings.extend = t.elapsed().as_secs_f64();
    }

    let t = Instant::now();
    let exts: Vec<&Extension> = built.iter().map(|(_, e, _, _)| e).collect();
    let norms = seminorms(&exts, p, config.quadrature);
    let seminorm_seconds = t.elapsed().as_secs_f64();
    let norms = match norms {
        Ok(v) => v,
        Err(e) => {
            for (i, ..) in &built {
                records[*i].status = format!("failed: {e}");
            }
            return records;
        }
    };

    for ((i, ext, solution, weights), norm) in built.iter().zip(norms) {
        let r = &mut records[*i];
        r.timings.seminorm = seminorm_seconds;
        let t = Instant::now();
        r.f_norm = Some(norm.value);
        r.refinement_error = Some(norm.refinement_error);
        r.quadrature_flagged = norm.flagged;
        if r.g_norm > 0.0 {
            r.ratio = Some(norm.value / r.g_norm);
        } else if norm.value <= 1e-10 {
            r.exact = true;
        }
        r.interpolation_error = Some(ext.interpolation_error(&fs[*i]));
        let rhs = ext.patching_rhs(p);
        r.lq_sum = Some(rhs.lq_sum);
        r.eta_sum = Some(rhs.eta_sum);
        if rhs.total() > 0.0 {
            r.c_patch = Some(norm.pth_power() / rhs.total());
        }
        match ext.eta_edge_vs_tree(solution, weights, p) {
            Ok(et) => {
                r.edge_sum = Some(et.edge_sum);
                r.tree_sum = Some(et.tree_sum);
                r.edge_tree_ratio = (et.tree_sum > 0.0).then_some(et.ratio);
            }
            Err(e) => r.status = format!("failed: {e}"),
        }
        r.timings.checks = t.elapsed().as_secs_f64();
        if config.run_oracle {
            let t = Instant::now();
            run_oracle(config, set, &fs[*i], ext, p, r);
            r.timings.oracle = t.elapsed().as_secs_f64();
        }
    }
    records
}

fn run_oracle(
    config: &ExperimentConfig,
    set: &FractalSet,
    f: &[f64],
    ext: &Extension,
    p: f64,
    r: &mut ExperimentRecord,
) {
    let mut oracle = config.oracle;
    if GridSpec::new(set.params(), oracle.per_delta, oracle.max_side).is_err() {
        oracle.per_delta = 1;
        if GridSpec::new(set.params(), 1, oracle.max_side).is_err() {
            return;
        }
    }
    match grid_minimal_extension(f, set, p, &oracle) {
        Ok(result) => {
            r.oracle_per_delta = Some(oracle.per_delta);
            r.oracle_objective = Some(result.objective);
            if let Ok(fg) = GridFunction::with_data(result.grid.spec, set, f, |x| ext.value(x)) {
                r.f_grid_objective = Some(discrete_seminorm(&fg, p));
            }
            let reference = result.objective.powf(1.0 / p).max(r.g_norm);
            if let (Some(fnorm), true) = (r.f_norm, reference > 0.0) {
                r.reference_ratio = Some(fnorm / reference);
            }
        }
        Err(e) => r.status = format!("oracle failed: {e}"),
    }
}

pub fn write_records_csv(path: &Path, records: &[ExperimentRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in records {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_timings_csv(path: &Path, records: &[ExperimentRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "p", "inv_eps", "depth", "seed", "setup", "extend", "seminorm", "checks", "oracle",
    ])?;
    for r in records {
        let t = r.timings;
        let mut row = vec![
            r.p.to_string(),
            r.inv_eps.to_string(),
            r.depth.to_string(),
            r.seed.to_string(),
        ];
        row.extend(
            [t.setup, t.extend, t.seminorm, t.checks, t.oracle]
                .iter()
                .map(|v| format!("{v:.6}")),
        );
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_skipped_csv(path: &Path, skipped: &[SkippedRun]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for s in skipped {
        w.serialize(s)?;
    }
    w.flush()?;
    Ok(())
}

/// Runs the sweep and writes `records.csv`, `timings.csv`, `skipped.csv`
/// and `ratio_vs_depth.svg` into the output directory.
pub fn run_sweep(config: &ExperimentConfig) -> Result<SweepOutcome> {
    let dir = config.resolved_output_dir();
    std::fs::create_dir_all(&dir)?;
    let outcome = run_boundedness_experiment(config)?;
    write_records_csv(&dir.join("records.csv"), &outcome.records)?;
    write_timings_csv(&dir.join("timings.csv"), &outcome.records)?;
    write_skipped_csv(&dir.join("skipped.csv"), &outcome.skipped)?;
    std::fs::write(
        dir.join("ratio_vs_depth.svg"),
        crate::svg::ratio_vs_depth(&outcome.records),
    )?;
    Ok(outcome)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub inv_eps: u64,
    pub depth: u32,
    pub passed: bool,
    pub detail: String,
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct VerificationReport {
    pub checks: Vec<Check>,
}

impl VerificationReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &Check> {
        self.checks.iter().filter(|c| !c.passed)
    }
}

/// Knobs for the verification suite beyond the sweep axes.
#[derive(Clone, Copy, Debug)]
pub struct SuiteOptions {
    pub bump: BumpSpec,
    pub pou: PouCheckConfig,
    pub geometry_samples: usize,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        Self {
            bump: BumpSpec::default(),
            pou: PouCheckConfig {
                sample_budget: 100_000,
                ..PouCheckConfig::default()
            },
            geometry_samples: 2000,
        }
    }
}

/// Runs the module verifiers at every `(N, L)` of the sweep and the
/// extension checks at every `p` for the first seed.
pub fn run_verification_suite(config: &ExperimentConfig, options: &SuiteOptions) -> Result<VerificationReport> {
    config.validate()?;
    let mut report = VerificationReport::default();
    for &n in &config.inv_eps {
        for &l in &config.depth {
            let mut push = |name: &str, passed: bool, detail: String| {
                report.checks.push(Check {
                    name: name.into(),
                    inv_eps: n,
                    depth: l,
                    passed,
                    detail,
                })
            };
            let params = match FractalParams::with_threshold(n, l, config.min_inv_eps) {
                Ok(p) => p,
                Err(e) => {
                    push("fractal_set", false, e.to_string());
                    continue;
                }
            };
            let set = build_fractal_set(params);
            let v = validate_separation(&set);
            push("fractal_set", v.passed, v.failures.join("; "));
            let decomp = match decompose(&set) {
                Ok(d) => d,
                Err(e) => {
                    push("cz_decomposition", false, e.to_string());
                    continue;
                }
            };
            let g = verify_good_geometry(&decomp, options.geometry_samples, 0);
            push(
                "cz_decomposition",
                g.passed,
                format!(
                    "max side ratio {}, max neighbors {}, max cover {}; {}",
                    g.max_side_ratio,
                    g.max_neighbor_count,
                    g.max_cover_count,
                    g.failures.join("; ")
                ),
            );
            let pou = verify_pou(&decomp, &options.bump, &options.pou);
            push(
                "partition_of_unity",
                pou.passed,
                format!("defect {:.2e}; {}", pou.partition_defect, pou.failures.join("; ")),
            );
            let tree = match build_cluster_tree(&set, config.cluster) {
                Ok(t) => t,
                Err(e) => {
                    push("clustering", false, e.to_string());
                    continue;
                }
            };
            let s = tree.separation();
            // the extension only uses the B_C balls; B̂_C failures are fatal
            // only in strict mode, where the build above already failed
            let balls_ok = s.members_in_balls && s.balls_disjoint && s.balls_nested;
            let detail = if balls_ok && !s.failures.is_empty() {
                format!("B_C balls ok; unused B̂_C balls: {}", s.failures.join("; "))
            } else {
                s.failures.join("; ")
            };
            push("clustering", balls_ok, detail);
            let Some(&seed) = config.seeds.first() else { continue };
            let g = sample_test_function(seed, &config.test_function)?;
            let f = restrict(&g, &set);
            for &p in &config.p {
                let name = format!("extension p={p}");
                match extend(&f, &decomp, &tree, p, config.tree_tolerance) {
                    Ok((ext, problem, solution)) => {
                        let scale = 1.0 + f.iter().fold(0.0f64, |m, v| m.max(v.abs()));
                        let interp = ext.interpolation_error(&f);
                        let tail = ext.tail_check(200, 1e-3);
                        let edge = ext.eta_edge_vs_tree(&solution, &problem.weights, p);
                        let rhs = ext.patching_rhs(p);
                        let mut failures = Vec::new();
                        if interp > 1e-9 * scale {
                            failures.push(format!("interpolation error {interp:.2e}"));
                        }
                        if tail.max_value_error > 1e-8 || tail.max_gradient_error > 1e-8 {
                            failures.push(format!(
                                "tail mismatch {:.2e} / {:.2e}",
                                tail.max_value_error, tail.max_gradient_error
                            ));
                        }
                        if let Err(e) = &edge {
                            failures.push(e.to_string());
                        }
                        if !rhs.total().is_finite() {
                            failures.push("patching sums not finite".into());
                        }
                        push(&name, failures.is_empty(), failures.join("; "));
                    }
                    Err(e) => push(&name, false, e.to_string()),
                }
            }
        }
    }
    Ok(report)
}
