//! Weighted `l^p` seminorm on the cluster tree and its minimizer.
//!
//! Node values live in heap order (see [`crate::clustering`]). The edge
//! from a depth-`l` node to its parent carries weight `ν_l`; leaves are
//! fixed and the interior values minimize
//! `Σ_l ν_l Σ_{C ∈ C_l} |η_π(C) - η_C|^p`.

use serde::{Deserialize, Serialize};

use crate::clustering::depth_of;
use crate::fractal_set::{FractalParams, FractalSet};
use crate::{Error, Result};

/// `(f(x) - f(x1, 0)) / Δ` for every point `x` of `E2`, in `E2` order.
/// `f` is indexed like `E` (all of `E1`, then `E2`).
pub fn leaf_slopes(f: &[f64], set: &FractalSet) -> Result<Vec<f64>> {
    if f.len() != set.len() {
        return Err(Error::MissingData(format!(
            "{} values given for {} points",
            f.len(),
            set.len()
        )));
    }
    let inv_delta = set.params().inv_delta() as f64;
    Ok((0..set.e2_len())
        .map(|j| (f[set.e2_index(j)] - f[set.projection(j)]) * inv_delta)
        .collect())
}

/// `ν_l = ε^((l+1)(2-p))` for `l < L` and `ν_L = ε^(L(2-p))`, as a
/// vector indexed by `l - 1`.
pub fn level_weights_for(eps: f64, depth: u32, p: f64) -> Result<Vec<f64>> {
    if !(p > 1.0 && p <= 2.0) {
        return Err(Error::InvalidParams(format!("p = {p} outside (1, 2]")));
    }
    Ok((1..=depth)
        .map(|l| {
            let k = if l < depth { l + 1 } else { l };
            eps.powf(k as f64 * (2.0 - p))
        })
        .collect())
}

pub fn level_weights(params: &FractalParams, p: f64) -> Result<Vec<f64>> {
    level_weights_for(params.eps(), params.depth(), p)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TreeProblem {
    pub depth: u32,
    pub p: f64,
    /// `weights[l - 1]` sits on every edge between depths `l - 1` and `l`.
    pub weights: Vec<f64>,
    /// Values at the `2^depth` leaves, left to right.
    pub leaves: Vec<f64>,
}

#[derive(Clone, Debug, Serialize)]
pub struct TreeSolution {
    /// Values at every node in heap order.
    pub values: Vec<f64>,
    /// `values[v] - values[π(v)]` carried at full relative precision;
    /// entry 0 is unused.
    pub increments: Vec<f64>,
    pub objective: f64,
    pub kkt_residual: f64,
    pub iterations: usize,
}

impl TreeProblem {
    pub fn new(depth: u32, p: f64, weights: Vec<f64>, leaves: Vec<f64>) -> Result<Self> {
        let problem = Self {
            depth,
            p,
            weights,
            leaves,
        };
        problem.validate()?;
        Ok(problem)
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.depth > 24 {
            return Err(Error::InvalidParams(format!(
                "tree depth {} outside 1..=24",
                self.depth
            )));
        }
        if !(self.p > 1.0 && self.p <= 2.0) {
            return Err(Error::InvalidParams(format!("p = {} outside (1, 2]", self.p)));
        }
        if self.weights.len() != self.depth as usize || self.weights.iter().any(|w| !(*w > 0.0 && w.is_finite())) {
            return Err(Error::InvalidParams(format!(
                "need {} positive finite weights, got {:?}",
                self.depth, self.weights
            )));
        }
        if self.leaves.len() != 1 << self.depth || self.leaves.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParams(format!(
                "need {} finite leaf values, got {}",
                1usize << self.depth,
                self.leaves.len()
            )));
        }
        Ok(())
    }

    pub fn node_count(&self) -> usize {
        (1 << (self.depth + 1)) - 1
    }

    fn first_leaf(&self) -> usize {
        (1 << self.depth) - 1
    }

    fn edge_weight(&self, child: usize) -> f64 {
        self.weights[depth_of(child) as usize - 1]
    }

    fn spread(&self) -> f64 {
        let (lo, hi) = self
            .leaves
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
        hi - lo
    }

    /// Leaves in place, interior nodes from the exact `p = 2` minimizer.
    fn warm_start(&self) -> Vec<f64> {
        let n = self.node_count();
        let mut x = vec![0.0; n];
        x[self.first_leaf()..].copy_from_slice(&self.leaves);
        let c: Vec<f64> = (0..n).map(|v| if v == 0 { 0.0 } else { self.edge_weight(v) }).collect();
        solve_tree_system(self.depth, &c, &vec![0.0; n], &x)
    }
}

/// Solves the Dirichlet tree Laplacian system
/// `Σ_{u ~ v} c_uv (x_v - x_u) = b_v` at interior nodes with leaves held at
/// `fixed[leaf]`. `c[v]` is the weight of the edge from `v` to its parent.
/// Bottom-up elimination writes each interior value as `α_v + β_v x_π(v)`,
/// then a top-down pass resolves them.
fn solve_tree_system(depth: u32, c: &[f64], b: &[f64], fixed: &[f64]) -> Vec<f64> {
    let n = c.len();
    let first_leaf = (1usize << depth) - 1;
    let mut alpha = vec![0.0; n];
    let mut beta = vec![0.0; n];
    alpha[first_leaf..].copy_from_slice(&fixed[first_leaf..]);
    for v in (0..first_leaf).rev() {
        let (l, r) = (2 * v + 1, 2 * v + 2);
        let diag = c[v] + c[l] * (1.0 - beta[l]) + c[r] * (1.0 - beta[r]);
        alpha[v] = (b[v] + c[l] * alpha[l] + c[r] * alpha[r]) / diag;
        beta[v] = c[v] / diag;
    }
    let mut x = vec![0.0; n];
    x[0] = alpha[0];
    for v in 1..n {
        x[v] = alpha[v] + beta[v] * x[(v - 1) / 2];
    }
    x
}

pub fn tree_objective(values: &[f64], weights: &[f64], p: f64) -> f64 {
    (1..values.len())
        .map(|v| weights[depth_of(v) as usize - 1] * (values[(v - 1) / 2] - values[v]).abs().powf(p))
        .sum()
}

pub fn tree_seminorm(values: &[f64], weights: &[f64], p: f64) -> f64 {
    tree_objective(values, weights, p).powf(1.0 / p)
}

/// Gradient of the objective at interior nodes (zero at leaves).
fn gradient(problem: &TreeProblem, x: &[f64]) -> Vec<f64> {
    let increments: Vec<f64> = (0..x.len())
        .map(|v| if v == 0 { 0.0 } else { x[v] - x[(v - 1) / 2] })
        .collect();
    gradient_from_increments(problem, &increments)
}

fn gradient_from_increments(problem: &TreeProblem, d: &[f64]) -> Vec<f64> {
    gradient_at_exponent(problem, problem.p, d)
}

fn gradient_at_exponent(problem: &TreeProblem, p: f64, d: &[f64]) -> Vec<f64> {
    let mut g = vec![0.0; d.len()];
    for v in 1..d.len() {
        let t = problem.edge_weight(v) * p * d[v].signum() * d[v].abs().powf(p - 1.0);
        if v < problem.first_leaf() {
            g[v] += t;
        }
        g[(v - 1) / 2] -= t;
    }
    g
}

fn scaled_residual(problem: &TreeProblem, g: &[f64]) -> f64 {
    scaled_residual_at_exponent(problem, problem.p, g)
}

fn scaled_residual_at_exponent(problem: &TreeProblem, p: f64, g: &[f64]) -> f64 {
    let spread = problem.spread();
    if spread == 0.0 {
        return 0.0;
    }
    let s = spread.powf(p - 1.0) * p;
    (0..problem.first_leaf())
        .map(|v| {
            let mut w = 2.0 * problem.weights[depth_of(v) as usize];
            if v > 0 {
                w += problem.edge_weight(v);
            }
            g[v].abs() / (w * s)
        })
        .fold(0.0, f64::max)
}

/// Largest stationarity violation over interior nodes, each scaled by
/// `p · Σ_{edges at v} w · spread^(p-1)`, evaluated from node values.
pub fn kkt_residual(problem: &TreeProblem, x: &[f64]) -> f64 {
    scaled_residual(problem, &gradient(problem, x))
}

/// Same as [`kkt_residual`] from the edge increments `d[v] = η_v - η_π(v)`.
/// For `p` near 1 the minimizer has increments far below the resolution
/// of the node values, so this is the form the solver certifies.
pub fn kkt_residual_increments(problem: &TreeProblem, d: &[f64]) -> f64 {
    scaled_residual(problem, &gradient_from_increments(problem, d))
}

/// Objective from edge increments.
pub fn increment_objective(problem: &TreeProblem, d: &[f64]) -> f64 {
    (1..d.len())
        .map(|v| problem.edge_weight(v) * d[v].abs().powf(problem.p))
        .sum()
}

/// Edge flows `y_v` (on the edge above `v`) of the dual problem
/// `min Σ_e φ*_e(y_e) - Σ_leaves y_j t_j` over flows conserved at every
/// interior node, where `φ_e(d) = w_e |d|^p`. The primal increments are
/// `d_e = φ*_e'(y_e)`.
struct Dual<'a> {
    problem: &'a TreeProblem,
    p: f64,
    floor: f64,
}

/// Newton step: flow change `s`, increment corrections `c = s / k` and the
/// shift of the root value.
struct Step {
    flow: Vec<f64>,
    correction: Vec<f64>,
    root_shift: f64,
}

impl Dual<'_> {
    fn increment(&self, v: usize, y: f64) -> f64 {
        let p = self.p;
        let w = self.problem.edge_weight(v);
        y.signum() * (y.abs() / (p * w)).powf(1.0 / (p - 1.0))
    }

    fn increments(&self, y: &[f64]) -> Vec<f64> {
        (0..y.len())
            .map(|v| if v == 0 { 0.0 } else { self.increment(v, y[v]) })
            .collect()
    }

    /// `φ''(d)`, the reciprocal of `φ*''(y)`, with `|d|` floored.
    fn conductance(&self, v: usize, d: f64) -> f64 {
        let p = self.p;
        self.problem.edge_weight(v) * p * (p - 1.0) * d.abs().max(self.floor).powf(p - 2.0)
    }

    /// `t_j - (root + Σ_path d)` at every leaf: how far the increments miss
    /// the data.
    fn defects(&self, d: &[f64], root: f64) -> Vec<f64> {
        let first_leaf = self.problem.first_leaf();
        let mut pos = vec![0.0; d.len()];
        pos[0] = root;
        for v in 1..d.len() {
            pos[v] = pos[(v - 1) / 2] + d[v];
        }
        (first_leaf..d.len())
            .map(|v| self.problem.leaves[v - first_leaf] - pos[v])
            .collect()
    }

    /// Derivative of the dual objective along `step` at `y + t·step`.
    fn slope(&self, y: &[f64], step: &[f64], t: f64, root: f64) -> f64 {
        let trial: Vec<f64> = y.iter().zip(step).map(|(a, b)| a + t * b).collect();
        let r = self.defects(&self.increments(&trial), root);
        let first_leaf = self.problem.first_leaf();
        -r.iter().zip(&step[first_leaf..]).map(|(a, b)| a * b).sum::<f64>()
    }

    /// Step length along a descent direction. The dual is convex along the
    /// line, so the full step is kept whenever the slope there has not
    /// turned strongly positive; otherwise bisect on the slope.
    fn line_search(&self, y: &[f64], step: &[f64], slope0: f64, root: f64) -> f64 {
        if self.slope(y, step, 1.0, root) <= 0.5 * slope0.abs() {
            return 1.0;
        }
        let (mut lo, mut hi) = (0.0, 1.0);
        for _ in 0..60 {
            let mid = 0.5 * (lo + hi);
            let s = self.slope(y, step, mid, root);
            if s.abs() <= 0.5 * slope0.abs() {
                return mid;
            }
            if s < 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        lo
    }

    /// Newton step of the dual. Its multipliers are node potentials; they
    /// are carried as offsets `μ` from the positions implied by the current
    /// increments so that tiny increments keep their relative precision.
    /// The step also repairs the imbalance that rounding leaves at the root. Solved by a bottom-up series/parallel reduction of the tree
    /// and a top-down pass.
    fn newton(&self, y: &[f64], d: &[f64], defects: &[f64]) -> Step {
        let n = d.len();
        let first_leaf = self.problem.first_leaf();
        let k: Vec<f64> = (0..n)
            .map(|v| if v == 0 { 0.0 } else { self.conductance(v, d[v]) })
            .collect();
        // flow change above v is g[v] * (m[v] - μ_π(v)); keeping the
        // potential m separate avoids cancellation when g is huge
        let mut m = vec![0.0; n];
        let mut g = vec![0.0; n];
        let mut big_g = vec![0.0; n];
        g[first_leaf..].copy_from_slice(&k[first_leaf..]);
        m[first_leaf..].copy_from_slice(defects);
        for v in (0..first_leaf).rev() {
            let (l, r) = (2 * v + 1, 2 * v + 2);
            let imbalance = y[l] + y[r] - if v > 0 { y[v] } else { 0.0 };
            big_g[v] = g[l] + g[r];
            m[v] = (g[l] * m[l] + g[r] * m[r] + imbalance) / big_g[v];
            if v > 0 {
                g[v] = k[v] * big_g[v] / (k[v] + big_g[v]);
            }
        }
        // Top-down: the flow into the stiffer child comes from conservation,
        // the other one from its potential drop.
        let mut mu = vec![0.0; n];
        let mut flow = vec![0.0; n];
        let mut correction = vec![0.0; n];
        mu[0] = m[0];
        for v in 0..first_leaf {
            let (l, r) = (2 * v + 1, 2 * v + 2);
            let total = if v == 0 { 0.0 } else { flow[v] + y[v] } - y[l] - y[r];
            let (stiff, other) = if g[l] >= g[r] { (l, r) } else { (r, l) };
            flow[other] = g[other] * (m[other] - mu[v]);
            flow[stiff] = total - flow[other];
            for c in [l, r] {
                correction[c] = flow[c] / k[c];
                mu[c] = mu[v] + correction[c];
            }
        }
        Step {
            flow,
            correction,
            root_shift: mu[0],
        }
    }
}

fn values_from_increments(problem: &TreeProblem, root: f64, e: &[f64]) -> Vec<f64> {
    let first_leaf = problem.first_leaf();
    let mut x = vec![0.0; e.len()];
    x[0] = root;
    for v in 1..first_leaf {
        x[v] = x[(v - 1) / 2] + e[v];
    }
    x[first_leaf..].copy_from_slice(&problem.leaves);
    x
}

/// Interior flows as sums over their children, so conservation holds
/// exactly below the root.
fn conserve(y: &mut [f64], first_leaf: usize) {
    for v in (1..first_leaf).rev() {
        y[v] = y[2 * v + 1] + y[2 * v + 2];
    }
}

struct Stage {
    residual: f64,
    root: f64,
    increments: Vec<f64>,
    iterations: usize,
}

/// Damped Newton on the dual at one exponent, from conserved flows `y`.
/// Returns the best primal iterate seen.
fn newton_stage(dual: &Dual, y: &mut [f64], root: &mut f64, tol: f64, max_iter: usize) -> Stage {
    const STALL_LIMIT: usize = 30;
    let problem = dual.problem;
    let n = y.len();
    let first_leaf = problem.first_leaf();
    let mut stalled = 0;
    let mut best: Option<Stage> = None;
    let mut iterations = 0;
    loop {
        let d = dual.increments(y);
        let r = dual.defects(&d, *root);
        let step = dual.newton(y, &d, &r);
        let e: Vec<f64> = d.iter().zip(&step.correction).map(|(a, b)| a + b).collect();
        let residual = scaled_residual_at_exponent(problem, dual.p, &gradient_at_exponent(problem, dual.p, &e));
        if best.as_ref().is_none_or(|b| residual < b.residual) {
            best = Some(Stage {
                residual,
                root: *root + step.root_shift,
                increments: e,
                iterations,
            });
            stalled = 0;
        } else {
            stalled += 1;
        }
        if residual <= tol || stalled > STALL_LIMIT || iterations >= max_iter {
            break;
        }
        iterations += 1;
        let slope: f64 = -r.iter().zip(&step.flow[first_leaf..]).map(|(a, b)| a * b).sum::<f64>();
        // near the optimum the slope drowns in rounding; plain Newton steps
        // still make progress on the primal residual there
        let t = if slope < 0.0 {
            dual.line_search(y, &step.flow, slope, *root)
        } else {
            0.0
        };
        let t = if t > 0.0 { t } else { 1.0 };
        for v in first_leaf..n {
            y[v] += t * step.flow[v];
        }
        conserve(y, first_leaf);
        *root += step.root_shift;
    }
    let mut best = best.expect("at least one iterate");
    best.iterations = iterations;
    best
}

/// Exponents visited on the way from 2 down to `p`: `1/(p-1)` grows by at
/// most one per stage.
fn continuation(p: f64) -> Vec<f64> {
    let target = 1.0 / (p - 1.0);
    let stages = (target - 1.0).ceil().max(1.0) as usize;
    (1..=stages)
        .map(|k| {
            if k == stages {
                p
            } else {
                1.0 + 1.0 / (1.0 + (target - 1.0) * k as f64 / stages as f64)
            }
        })
        .collect()
}

/// Minimizer of the weighted tree objective with leaves held fixed.
///
/// Works on the dual: edge flows conserved at interior nodes. Starting
/// from the flows of the exact `p = 2` solution, damped Newton is run
/// along a continuation in the exponent down to `p`. Each iterate yields
/// primal increments (flow increments plus the Newton correction) that
/// match the leaves; the final stage stops once their scaled KKT residual
/// drops below `tol`.
pub fn minimize_tree(problem: &TreeProblem, tol: f64) -> Result<TreeSolution> {
    problem.validate()?;
    if !(tol > 0.0) {
        return Err(Error::InvalidParams(format!("tolerance {tol} must be positive")));
    }
    let n = problem.node_count();
    let spread = problem.spread();
    if spread == 0.0 {
        return Ok(TreeSolution {
            values: vec![problem.leaves[0]; n],
            increments: vec![0.0; n],
            objective: 0.0,
            kkt_residual: 0.0,
            iterations: 0,
        });
    }
    const MAX_ITER: usize = 1000;
    const STAGE_ITER: usize = 50;
    let x2 = problem.warm_start();
    let mut y: Vec<f64> = (0..n)
        .map(|v| {
            if v == 0 {
                0.0
            } else {
                2.0 * problem.edge_weight(v) * (x2[v] - x2[(v - 1) / 2])
            }
        })
        .collect();
    conserve(&mut y, problem.first_leaf());
    let mut root = x2[0];
    let mut prev = 2.0;
    let mut iterations = 0;
    let mut last = None;
    for q in continuation(problem.p) {
        // uniform rescaling keeps the flows conserved
        let scale = q / prev * spread.powf(q - prev);
        y.iter_mut().for_each(|f| *f *= scale);
        prev = q;
        let dual = Dual {
            problem,
            p: q,
            floor: 1e-100 * spread,
        };
        let last_stage = q == problem.p;
        let (stage_tol, cap) = if last_stage {
            (tol, MAX_ITER)
        } else {
            (tol.max(1e-6), STAGE_ITER)
        };
        let stage = newton_stage(&dual, &mut y, &mut root, stage_tol, cap);
        iterations += stage.iterations;
        last = Some(stage);
    }
    let stage = last.expect("at least one stage");
    let values = values_from_increments(problem, stage.root, &stage.increments);
    if stage.residual <= tol {
        return Ok(TreeSolution {
            objective: increment_objective(problem, &stage.increments),
            values,
            increments: stage.increments,
            kkt_residual: stage.residual,
            iterations,
        });
    }
    Err(Error::NonConvergence {
        iterations,
        residual: stage.residual,
        best: values,
    })
}
