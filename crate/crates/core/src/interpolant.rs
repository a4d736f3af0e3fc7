//! The patched extension `F = Σ θ_Q P_Q` with `P_Q = L_Q + η_Q x2`.
//!
//! `L_Q` interpolates `f` at the anchors `z_Q, w_Q` of `E1` and does not
//! depend on `x2`; `η_Q` is the tree value of the cluster assigned to `Q`.
//! Outside `Q0 = [-4,4)^2` the extension is the affine tail shared by all
//! boundary squares.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::clustering::{assign_all, depth_of, ClusterTree};
use crate::cz::CzDecomposition;
use crate::pou::{add_scaled, pou_eval, quotient, BumpSpec, Jet};
use crate::quadrature::GaussLegendre;
use crate::tree::{leaf_slopes, level_weights, minimize_tree, TreeProblem, TreeSolution};
use crate::{Error, Point, Result};

/// `a0 + a1·x1 + a2·x2`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AffinePolynomial {
    pub a0: f64,
    pub a1: f64,
    pub a2: f64,
}

impl AffinePolynomial {
    pub fn new(a0: f64, a1: f64, a2: f64) -> Self {
        Self { a0, a1, a2 }
    }

    pub fn eval(&self, x: Point) -> f64 {
        self.a0 + self.a1 * x[0] + self.a2 * x[1]
    }

    pub fn grad(&self) -> [f64; 2] {
        [self.a1, self.a2]
    }

    pub fn sub(&self, other: &Self) -> Self {
        Self::new(self.a0 - other.a0, self.a1 - other.a1, self.a2 - other.a2)
    }

    /// Largest `|self|` over the closed rectangle `[x0,x1] × [y0,y1]`.
    pub fn sup_on(&self, rect: [f64; 4]) -> f64 {
        let [x0, x1, y0, y1] = rect;
        [[x0, y0], [x1, y0], [x0, y1], [x1, y1]]
            .iter()
            .map(|c| self.eval(*c).abs())
            .fold(0.0, f64::max)
    }
}

/// The affine function of `x1` alone through `(z, fz)` and `(w, fw)`.
/// Both anchors must lie on the `x1`-axis.
pub fn fit_l(z: Point, fz: f64, w: Point, fw: f64) -> Result<AffinePolynomial> {
    if z[1] != 0.0 || w[1] != 0.0 {
        return Err(Error::InvalidParams(format!(
            "anchors {z:?}, {w:?} are not on the x1-axis"
        )));
    }
    if z[0] == w[0] {
        return Err(Error::InvalidParams(format!("coincident anchors at {z:?}")));
    }
    let a1 = (fz - fw) / (z[0] - w[0]);
    Ok(AffinePolynomial::new(fz - a1 * z[0], a1, 0.0))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Piece {
    pub l: AffinePolynomial,
    pub eta: f64,
    /// `C_Q` in heap order.
    pub cluster: usize,
}

impl Piece {
    /// `P_Q = L_Q + η_Q x2`.
    pub fn poly(&self) -> AffinePolynomial {
        AffinePolynomial::new(self.l.a0, self.l.a1, self.eta)
    }
}

#[derive(Clone, Debug)]
pub struct Extension<'a> {
    decomp: &'a CzDecomposition,
    bump: BumpSpec,
    pieces: Vec<Piece>,
    tail: Piece,
}

/// Builds `F` from data `f` on `E` (indexed like the set) and a solved
/// tree problem over the same set.
pub fn assemble<'a>(
    f: &[f64],
    decomp: &'a CzDecomposition,
    tree: &ClusterTree,
    solution: &TreeSolution,
) -> Result<Extension<'a>> {
    assemble_with(f, decomp, tree, solution, BumpSpec::default())
}

pub fn assemble_with<'a>(
    f: &[f64],
    decomp: &'a CzDecomposition,
    tree: &ClusterTree,
    solution: &TreeSolution,
    bump: BumpSpec,
) -> Result<Extension<'a>> {
    let set = decomp.set();
    if tree.params() != set.params() {
        return Err(Error::Inconsistent(
            "cluster tree and decomposition use different sets".into(),
        ));
    }
    if f.len() != set.len() {
        return Err(Error::MissingData(format!(
            "{} values given for {} points",
            f.len(),
            set.len()
        )));
    }
    if solution.values.len() != tree.len() {
        return Err(Error::Inconsistent(format!(
            "tree solution has {} nodes, cluster tree {}",
            solution.values.len(),
            tree.len()
        )));
    }
    let slopes = leaf_slopes(f, set)?;
    for (j, s) in slopes.iter().enumerate() {
        if solution.values[tree.leaf(j)] != *s {
            return Err(Error::Inconsistent(format!(
                "leaf {j} carries {} but the data give slope {s}",
                solution.values[tree.leaf(j)]
            )));
        }
    }
    let assignment = assign_all(decomp, tree);
    let pieces = (0..decomp.len())
        .map(|q| {
            let [z, w] = decomp.anchor_indices(q);
            let l = fit_l(set.point_f64(z), f[z], set.point_f64(w), f[w])?;
            let cluster = assignment[q];
            if cluster >= tree.len() {
                return Err(Error::Inconsistent(format!(
                    "square {q} assigned to unknown cluster {cluster}"
                )));
            }
            Ok(Piece {
                l,
                eta: solution.values[cluster],
                cluster,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut boundary = (0..decomp.len()).filter(|&q| decomp.is_boundary(q));
    let first = boundary
        .next()
        .ok_or_else(|| Error::Geometry("decomposition has no boundary square".into()))?;
    let tail = pieces[first];
    if let Some(q) = boundary.find(|&q| pieces[q] != tail) {
        return Err(Error::Inconsistent(format!(
            "boundary squares {first} and {q} carry different pieces"
        )));
    }
    Ok(Extension {
        decomp,
        bump,
        pieces,
        tail,
    })
}

/// Tree problem for data `f` at exponent `p`: leaf slopes and level weights.
pub fn tree_problem(f: &[f64], tree: &ClusterTree, decomp: &CzDecomposition, p: f64) -> Result<TreeProblem> {
    let set = decomp.set();
    TreeProblem::new(tree.depth(), p, level_weights(set.params(), p)?, leaf_slopes(f, set)?)
}

/// Slopes, tree minimization and assembly in one go.
pub fn extend<'a>(
    f: &[f64],
    decomp: &'a CzDecomposition,
    tree: &ClusterTree,
    p: f64,
    tol: f64,
) -> Result<(Extension<'a>, TreeProblem, TreeSolution)> {
    let problem = tree_problem(f, tree, decomp, p)?;
    let solution = minimize_tree(&problem, tol)?;
    let ext = assemble(f, decomp, tree, &solution)?;
    Ok((ext, problem, solution))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuadConfig {
    /// Pieces across the short side of each breakpoint cell; the long side
    /// gets proportionally fewer.
    pub subcells: usize,
    /// Gauss–Legendre nodes per axis on each cell.
    pub nodes: usize,
    /// Relative refinement error above which the estimate is flagged.
    pub tolerance: f64,
}

impl Default for QuadConfig {
    fn default() -> Self {
        Self {
            subcells: 4,
            nodes: 3,
            tolerance: 0.01,
        }
    }
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct SeminormEstimate {
    /// `‖F‖_{L^{2,p}(Q0)}`.
    pub value: f64,
    pub p: f64,
    pub config: QuadConfig,
    /// `|value - value with doubled subcells| / value` (0 when both vanish).
    pub refinement_error: f64,
    pub flagged: bool,
}

impl SeminormEstimate {
    /// `‖F‖^p`.
    pub fn pth_power(&self) -> f64 {
        self.value.powf(self.p)
    }
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct PatchingRhs {
    pub lq_sum: f64,
    pub eta_sum: f64,
}

impl PatchingRhs {
    pub fn total(&self) -> f64 {
        self.lq_sum + self.eta_sum
    }
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct EdgeTreeReport {
    /// `Σ_{Q↔Q'} |η_Q - η_Q'|^p δ_Q^(2-p)`.
    pub edge_sum: f64,
    /// `Σ_l ν_l Σ_{C ∈ C_l} |η_π(C) - η_C|^p`.
    pub tree_sum: f64,
    /// `edge_sum / tree_sum`, 0 when both vanish.
    pub ratio: f64,
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct TailReport {
    pub points: usize,
    pub inset: f64,
    pub max_value_error: f64,
    pub max_gradient_error: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct SquarePieceRecord {
    pub square: usize,
    pub corner: Point,
    pub side: f64,
    pub cluster: usize,
    pub a0: f64,
    pub a1: f64,
    pub eta: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct ExtensionDocument {
    pub inv_eps: u64,
    pub depth: u32,
    pub tail: AffinePolynomial,
    pub squares: Vec<SquarePieceRecord>,
}

impl<'a> Extension<'a> {
    pub fn decomp(&self) -> &'a CzDecomposition {
        self.decomp
    }

    pub fn pieces(&self) -> &[Piece] {
        &self.pieces
    }

    pub fn piece(&self, q: usize) -> &Piece {
        &self.pieces[q]
    }

    /// `L0 + η0 x2`, used outside `Q0`.
    pub fn tail(&self) -> AffinePolynomial {
        self.tail.poly()
    }

    /// Value, gradient and Hessian of `F` at `x`. Inside `Q0` the pieces are
    /// taken relative to the piece of the square containing `x`, so that
    /// `Σ θ_Q = 1` cancels exactly and only piece differences are weighted
    /// by bump derivatives.
    pub fn jet(&self, x: Point) -> Jet {
        let Some(home) = self.decomp.locate(x) else {
            let t = self.tail();
            return Jet {
                value: t.eval(x),
                grad: t.grad(),
                hess: [[0.0; 2]; 2],
            };
        };
        let base = self.pieces[home].poly();
        let pou = pou_eval(self.decomp, &self.bump, x).expect("x lies in Q0");
        let mut out = Jet {
            value: base.eval(x),
            grad: base.grad(),
            hess: [[0.0; 2]; 2],
        };
        for c in &pou.contributions {
            if c.square == home {
                continue;
            }
            let d = self.pieces[c.square].poly().sub(&base);
            let dv = d.eval(x);
            let dg = d.grad();
            let th = &c.theta;
            let mut term = Jet {
                value: th.value * dv,
                ..Jet::default()
            };
            for i in 0..2 {
                term.grad[i] = th.grad[i] * dv + th.value * dg[i];
                for k in 0..2 {
                    term.hess[i][k] = th.hess[i][k] * dv + th.grad[i] * dg[k] + th.grad[k] * dg[i];
                }
            }
            add_scaled(&mut out, &term, 1.0);
        }
        out
    }

    pub fn value(&self, x: Point) -> f64 {
        self.jet(x).value
    }

    /// `max_{x ∈ E} |F(x) - f(x)|`.
    pub fn interpolation_error(&self, f: &[f64]) -> f64 {
        let set = self.decomp.set();
        (0..set.len())
            .into_par_iter()
            .map(|i| (self.value(set.point_f64(i)) - f[i]).abs())
            .reduce(|| 0.0, f64::max)
    }

    /// `‖F‖_{L^{2,p}(Q0)}` with a refinement check at doubled subcells.
    pub fn seminorm(&self, p: f64, config: QuadConfig) -> Result<SeminormEstimate> {
        Ok(seminorms(&[self], p, config)?.remove(0))
    }

    /// Right side of the patching estimate over ordered touching pairs.
    pub fn patching_rhs(&self, p: f64) -> PatchingRhs {
        let parts: Vec<(f64, f64)> = (0..self.decomp.len())
            .into_par_iter()
            .map(|q| {
                let sq = self.decomp.square(q);
                let [x0, y0] = sq.corner();
                let s = sq.side();
                let rect = [x0, x0 + s, y0, y0 + s];
                let me = &self.pieces[q];
                let mut lq = 0.0;
                let mut eta = 0.0;
                for &n in self.decomp.neighbors(q) {
                    let other = &self.pieces[n as usize];
                    lq += me.l.sub(&other.l).sup_on(rect).powf(p);
                    eta += (me.eta - other.eta).abs().powf(p);
                }
                (lq * s.powf(2.0 - 2.0 * p), eta * s.powf(2.0 - p))
            })
            .collect();
        PatchingRhs {
            lq_sum: parts.iter().map(|t| t.0).sum(),
            eta_sum: parts.iter().map(|t| t.1).sum(),
        }
    }

    /// Compares the slope part of the patching sum with the tree seminorm
    /// of the solution it came from.
    pub fn eta_edge_vs_tree(&self, solution: &TreeSolution, weights: &[f64], p: f64) -> Result<EdgeTreeReport> {
        let edge_sum = self.patching_rhs(p).eta_sum;
        let tree_sum: f64 = (1..solution.increments.len())
            .map(|v| weights[depth_of(v) as usize - 1] * solution.increments[v].abs().powf(p))
            .sum();
        let ratio = if tree_sum > 0.0 {
            edge_sum / tree_sum
        } else if edge_sum == 0.0 {
            0.0
        } else {
            return Err(Error::Inconsistent(format!(
                "edge sum {edge_sum:e} positive while the tree seminorm vanishes"
            )));
        };
        Ok(EdgeTreeReport {
            edge_sum,
            tree_sum,
            ratio,
        })
    }

    /// Largest deviation of `F` and `∇F` from the tail on `count` points of
    /// the square ring at distance `inset` inside `∂Q0`.
    pub fn tail_check(&self, count: usize, inset: f64) -> TailReport {
        let t = self.tail();
        let side = 8.0 - 2.0 * inset;
        let (mut ev, mut eg) = (0.0f64, 0.0f64);
        for i in 0..count {
            let arc = 4.0 * side * (i as f64 + 0.5) / count as f64;
            let (edge, u) = ((arc / side) as usize % 4, arc % side);
            let lo = -4.0 + inset;
            let hi = 4.0 - inset;
            let x = match edge {
                0 => [lo + u, lo],
                1 => [hi, lo + u],
                2 => [hi - u, hi],
                _ => [lo, hi - u],
            };
            let j = self.jet(x);
            ev = ev.max((j.value - t.eval(x)).abs());
            let g = t.grad();
            eg = eg.max((j.grad[0] - g[0]).abs().max((j.grad[1] - g[1]).abs()));
        }
        TailReport {
            points: count,
            inset,
            max_value_error: ev,
            max_gradient_error: eg,
        }
    }

    /// Central-difference check of the gradient and Hessian at `count`
    /// seeded points of `[-4,4)^2`. Returns the largest relative error.
    /// Points whose stencil straddles a bump breakpoint (where `F` is only
    /// C²) are redrawn.
    pub fn finite_difference_error(&self, count: usize, seed: u64) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut worst = 0.0f64;
        let mut done = 0;
        while done < count {
            let x = [rng.gen_range(-3.9..3.9), rng.gen_range(-3.9..3.9)];
            let q = self.decomp.locate(x).expect("inside");
            let home = self.decomp.square(q);
            let h = 1e-5 * home.side();
            let near_break = self.decomp.neighbors(q).iter().any(|&n| {
                let nb = self.decomp.square(n as usize);
                (0..2).any(|axis| {
                    self.bump
                        .breakpoints(nb.corner()[axis], nb.side())
                        .iter()
                        .any(|b| (b - x[axis]).abs() < 3.0 * h)
                })
            });
            if near_break {
                continue;
            }
            done += 1;
            let j = self.jet(x);
            let scale_g = j.grad[0].abs().max(j.grad[1].abs()).max(1e-300);
            let hscale = j.hess.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs()));
            for i in 0..2 {
                // fourth-order central stencil
                let at = |t: f64| {
                    let mut y = x;
                    y[i] += t * h;
                    self.jet(y)
                };
                let (a, b, c, d) = (at(-2.0), at(-1.0), at(1.0), at(2.0));
                let diff = |u: f64, v: f64, w: f64, z: f64| (u - 8.0 * v + 8.0 * w - z) / (12.0 * h);
                let g = diff(a.value, b.value, c.value, d.value);
                worst = worst.max((g - j.grad[i]).abs() / scale_g);
                if hscale > 0.0 {
                    for k in 0..2 {
                        let dk = diff(a.grad[k], b.grad[k], c.grad[k], d.grad[k]);
                        worst = worst.max((dk - j.hess[i][k]).abs() / hscale);
                    }
                }
            }
        }
        worst
    }

    pub fn to_document(&self) -> ExtensionDocument {
        let params = self.decomp.set().params();
        ExtensionDocument {
            inv_eps: params.inv_eps(),
            depth: params.depth(),
            tail: self.tail(),
            squares: self
                .pieces
                .iter()
                .enumerate()
                .map(|(q, piece)| {
                    let sq = self.decomp.square(q);
                    SquarePieceRecord {
                        square: q,
                        corner: sq.corner(),
                        side: sq.side(),
                        cluster: piece.cluster,
                        a0: piece.l.a0,
                        a1: piece.l.a1,
                        eta: piece.eta,
                    }
                })
                .collect(),
        }
    }
}

/// Seminorms of several extensions over one decomposition, sharing the
/// partition of unity evaluations.
///
/// Each square is cut at every bump breakpoint inside it, so on each cell
/// the set of nonzero bumps is fixed and `F` is smooth. Each cell is split
/// into `k` pieces across its short side and proportionally many along the
/// long side, each carrying a tensor Gauss–Legendre rule; the refinement
/// error compares `k` with `2k`.
pub fn seminorms(exts: &[&Extension], p: f64, config: QuadConfig) -> Result<Vec<SeminormEstimate>> {
    check_quadrature(exts, p, config)?;
    if exts.is_empty() {
        return Ok(vec![]);
    }
    let m = exts.len();
    let parts = square_parts(exts, p, config);
    Ok((0..m)
        .map(|e| {
            let coarse: f64 = parts.iter().map(|v| v[e][0]).sum::<f64>().powf(1.0 / p);
            let fine: f64 = parts.iter().map(|v| v[e][1]).sum::<f64>().powf(1.0 / p);
            let refinement_error = if fine == 0.0 && coarse == 0.0 {
                0.0
            } else {
                (fine - coarse).abs() / fine.max(coarse)
            };
            let flagged = refinement_error > config.tolerance;
            if flagged {
                log::warn!(
                    "seminorm refinement error {refinement_error:.3e} above {}",
                    config.tolerance
                );
            }
            SeminormEstimate {
                value: coarse,
                p,
                config,
                refinement_error,
                flagged,
            }
        })
        .collect())
}

fn check_quadrature(exts: &[&Extension], p: f64, config: QuadConfig) -> Result<()> {
    if !(p > 1.0 && p <= 2.0) {
        return Err(Error::InvalidParams(format!("p = {p} outside (1, 2]")));
    }
    if config.subcells == 0 || config.nodes == 0 {
        return Err(Error::InvalidParams(format!("empty quadrature {config:?}")));
    }
    if let Some(first) = exts.first() {
        if exts
            .iter()
            .any(|e| !std::ptr::eq(e.decomp, first.decomp) || e.bump != first.bump)
        {
            return Err(Error::Inconsistent(
                "extensions differ in decomposition or bumps".into(),
            ));
        }
    }
    Ok(())
}

/// Per-square `[coarse, fine]` integrals of `|∇²F|^p`, square-major.
fn square_parts(exts: &[&Extension], p: f64, config: QuadConfig) -> Vec<Vec<[f64; 2]>> {
    let first = exts[0];
    let decomp = first.decomp;
    let rule = GaussLegendre::new(config.nodes);
    // squares sharing a neighbor layout share quadrature geometry
    let layouts: Vec<(Layout, Vec<usize>)> = (0..decomp.len()).into_par_iter().map(|q| layout(decomp, q)).collect();
    let mut index: HashMap<&Layout, usize> = HashMap::new();
    let mut unique: Vec<&Layout> = Vec::new();
    let template_of: Vec<usize> = layouts
        .iter()
        .map(|(key, _)| {
            *index.entry(key).or_insert_with(|| {
                unique.push(key);
                unique.len() - 1
            })
        })
        .collect();
    let templates: Vec<Template> = unique
        .par_iter()
        .map(|key| Template::build(key, first.bump, config.subcells, &rule))
        .collect();
    log::debug!("{} squares, {} layouts", decomp.len(), templates.len());
    (0..decomp.len())
        .into_par_iter()
        .map(|q| square_integrals(exts, q, &layouts[q].1, &templates[template_of[q]], p))
        .collect()
}

/// Contribution of each CZ square to `‖F‖^p` at the base resolution.
pub fn seminorm_density(ext: &Extension, p: f64, config: QuadConfig) -> Result<Vec<f64>> {
    check_quadrature(&[ext], p, config)?;
    Ok(square_parts(&[ext], p, config).into_iter().map(|v| v[0][0]).collect())
}

/// Neighbors other than the square itself, as corner offsets in units of
/// half the square's side and log2 of the side ratio, sorted.
type Layout = Vec<(i64, i64, i32)>;

fn layout(decomp: &CzDecomposition, q: usize) -> (Layout, Vec<usize>) {
    let sq = decomp.square(q);
    let [cx, cy] = sq.corner();
    let half = 0.5 * sq.side();
    let mut v: Vec<((i64, i64, i32), usize)> = decomp
        .neighbors(q)
        .iter()
        .map(|&n| n as usize)
        .filter(|&n| n != q)
        .map(|n| {
            let nb = decomp.square(n);
            let [nx, ny] = nb.corner();
            let ratio = (nb.side() / sq.side()).log2().round() as i32;
            (
                (
                    ((nx - cx) / half).round() as i64,
                    ((ny - cy) / half).round() as i64,
                    ratio,
                ),
                n,
            )
        })
        .collect();
    v.sort_unstable();
    v.into_iter().unzip()
}

/// Breakpoint cell of the unit square with the neighbors whose bumps reach
/// it, and per level the nodes `(u, v, weight)` with one θ jet per active
/// neighbor, all in unit coordinates.
struct Cell {
    active: Vec<usize>,
    nodes: [Vec<[f64; 3]>; 2],
    jets: [Vec<Jet>; 2],
}

struct Template {
    cells: Vec<Cell>,
}

impl Template {
    fn build(key: &Layout, bump: BumpSpec, k: usize, rule: &GaussLegendre) -> Self {
        let squares: Vec<(Point, f64)> = key
            .iter()
            .map(|&(dx, dy, r)| ([0.5 * dx as f64, 0.5 * dy as f64], 2f64.powi(r)))
            .collect();
        let cuts = |axis: usize| {
            let mut v = vec![0.0, 1.0];
            for (c, s) in &squares {
                v.extend(
                    bump.breakpoints(c[axis], *s)
                        .into_iter()
                        .filter(|b| *b > 0.0 && *b < 1.0),
                );
            }
            v.sort_by(f64::total_cmp);
            v.dedup_by(|a, b| (*a - *b).abs() <= 1e-14);
            v
        };
        let (xs, ys) = (cuts(0), cuts(1));
        let mut cells = Vec::new();
        for wx in xs.windows(2) {
            for wy in ys.windows(2) {
                let mid = [0.5 * (wx[0] + wx[1]), 0.5 * (wy[0] + wy[1])];
                let active: Vec<usize> = (0..squares.len())
                    .filter(|&i| bump.pre_bump_at(squares[i].0, squares[i].1, mid).value > 0.0)
                    .collect();
                if active.is_empty() {
                    continue;
                }
                let (lx, ly) = (wx[1] - wx[0], wy[1] - wy[0]);
                let short = lx.min(ly);
                let mut nodes: [Vec<[f64; 3]>; 2] = Default::default();
                let mut jets: [Vec<Jet>; 2] = Default::default();
                for (level, k) in [k, 2 * k].into_iter().enumerate() {
                    // k pieces across the short side, proportionally fewer along
                    // the long one where the integrand is smooth
                    let kx = ((k as f64 * short / lx).ceil() as usize).max(1);
                    let ky = ((k as f64 * short / ly).ceil() as usize).max(1);
                    let dx = lx / kx as f64;
                    let dy = ly / ky as f64;
                    for i in 0..kx {
                        for j in 0..ky {
                            let x0 = wx[0] + i as f64 * dx;
                            let y0 = wy[0] + j as f64 * dy;
                            for (x, wxn) in rule.mapped(x0, x0 + dx) {
                                for (y, wyn) in rule.mapped(y0, y0 + dy) {
                                    let pt = [x, y];
                                    // θ_n = φ_n / (φ_q + Σ φ_n), with φ_q = 1 on Q
                                    let mut total = bump.pre_bump_at([0.0, 0.0], 1.0, pt);
                                    let start = jets[level].len();
                                    for &a in &active {
                                        let jn = bump.pre_bump_at(squares[a].0, squares[a].1, pt);
                                        add_scaled(&mut total, &jn, 1.0);
                                        jets[level].push(jn);
                                    }
                                    for th in &mut jets[level][start..] {
                                        *th = quotient(th, &total);
                                    }
                                    nodes[level].push([x, y, wxn * wyn]);
                                }
                            }
                        }
                    }
                }
                cells.push(Cell { active, nodes, jets });
            }
        }
        Self { cells }
    }
}

/// `[coarse, fine]` integral of `|∇²F|^p` over square `q` for each extension.
fn square_integrals(exts: &[&Extension], q: usize, neighbors: &[usize], template: &Template, p: f64) -> Vec<[f64; 2]> {
    let m = exts.len();
    let mut out = vec![[0.0; 2]; m];
    let sq = exts[0].decomp.square(q);
    let corner = sq.corner();
    let s = sq.side();
    // P_n - P_q in unit coordinates of the square, extension-major
    let nn = neighbors.len();
    let mut b = Vec::with_capacity(m * nn);
    for e in exts {
        let base = e.pieces[q].poly();
        for &n in neighbors {
            let d = e.pieces[n].poly().sub(&base);
            b.push([d.eval(corner), d.a1 * s, d.a2 * s]);
        }
    }
    if b.iter().all(|d| *d == [0.0; 3]) {
        return out;
    }
    let mut cb = Vec::new();
    for cell in &template.cells {
        let na = cell.active.len();
        cb.clear();
        for e in 0..m {
            cb.extend(cell.active.iter().map(|&a| b[e * nn + a]));
        }
        if cb.iter().all(|d| *d == [0.0; 3]) {
            continue;
        }
        for level in 0..2 {
            for (node, th) in cell.nodes[level].iter().zip(cell.jets[level].chunks_exact(na)) {
                let [u, v, w] = *node;
                for (e, acc) in out.iter_mut().enumerate() {
                    let mut h = [0.0; 3];
                    for (t, d) in th.iter().zip(&cb[e * na..(e + 1) * na]) {
                        let dv = d[0] + d[1] * u + d[2] * v;
                        h[0] += t.hess[0][0] * dv + 2.0 * t.grad[0] * d[1];
                        h[1] += t.hess[0][1] * dv + t.grad[0] * d[2] + t.grad[1] * d[1];
                        h[2] += t.hess[1][1] * dv + 2.0 * t.grad[1] * d[2];
                    }
                    let m2 = h[0] * h[0] + 2.0 * h[1] * h[1] + h[2] * h[2];
                    if m2 > 0.0 {
                        acc[level] += w * m2.powf(0.5 * p);
                    }
                }
            }
        }
    }
    // unit-square Hessians carry a factor s², the area element s²
    let scale = s.powf(2.0 - 2.0 * p);
    for acc in &mut out {
        acc[0] *= scale;
        acc[1] *= scale;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clustering::{build_cluster_tree, ClusterConfig};
    use crate::cz::decompose;
    use crate::fractal_set::{build_fractal_set, FractalParams, FractalSet};

    fn setup(n: u64, l: u32) -> (CzDecomposition, ClusterTree) {
        let set = build_fractal_set(FractalParams::with_threshold(n, l, 4).unwrap());
        let d = decompose(&set).unwrap();
        let t = build_cluster_tree(&set, ClusterConfig::relaxed()).unwrap();
        (d, t)
    }

    fn sample(set: &FractalSet, g: impl Fn(Point) -> f64) -> Vec<f64> {
        (0..set.len()).map(|i| g(set.point_f64(i))).collect()
    }

    #[test]
    fn fit_l_examples() {
        let l = fit_l([0.0, 0.0], 0.0, [0.25, 0.0], 0.25).unwrap();
        assert_eq!(l, AffinePolynomial::new(0.0, 1.0, 0.0));
        let l = fit_l([-1.0, 0.0], 2.5, [1.0, 0.0], 2.5).unwrap();
        assert_eq!(l, AffinePolynomial::new(2.5, 0.0, 0.0));
        assert!(fit_l([0.5, 0.0], 1.0, [0.5, 0.0], 2.0).is_err());
        assert!(fit_l([0.5, 0.1], 1.0, [0.0, 0.0], 2.0).is_err());
    }

    #[test]
    fn sup_over_corners() {
        let a = AffinePolynomial::new(1.0, -2.0, 0.5);
        assert_eq!(a.sup_on([0.0, 1.0, 0.0, 2.0]), 2.0);
    }

    #[test]
    fn affine_data_reproduced() {
        let (d, t) = setup(4, 2);
        let g = AffinePolynomial::new(0.75, -1.5, 2.25);
        let f = sample(d.set(), |x| g.eval(x));
        let (ext, _, _) = extend(&f, &d, &t, 1.5, 1e-10).unwrap();
        for piece in ext.pieces() {
            assert!((piece.poly().sub(&g)).sup_on([-4.0, 4.0, -4.0, 4.0]) < 1e-12);
        }
        let j = ext.jet([0.3, 0.1]);
        assert!((j.value - g.eval([0.3, 0.1])).abs() < 1e-12);
        assert!(j.hess.iter().flatten().all(|v| v.abs() < 1e-8));
        let rhs = ext.patching_rhs(1.5);
        assert!(rhs.total() < 1e-20);
        assert!(ext.seminorm(1.5, QuadConfig::default()).unwrap().value < 1e-10);
    }

    #[test]
    fn vertical_coordinate_gives_unit_slopes() {
        let (d, t) = setup(4, 2);
        let f = sample(d.set(), |x| x[1]);
        let (ext, _, _) = extend(&f, &d, &t, 1.3, 1e-10).unwrap();
        assert!(ext
            .pieces()
            .iter()
            .all(|p| p.eta == 1.0 && p.l.a0 == 0.0 && p.l.a1 == 0.0));
        let rhs = ext.patching_rhs(1.3);
        assert_eq!(rhs.total(), 0.0);
    }

    #[test]
    fn spike_interpolated_and_tail_exact() {
        let (d, t) = setup(4, 2);
        let set = d.set();
        let mut f = vec![0.0; set.len()];
        f[set.e2_index(1)] = 1.0;
        let (ext, problem, sol) = extend(&f, &d, &t, 1.5, 1e-10).unwrap();
        assert!(ext.interpolation_error(&f) < 1e-12);
        let tail = ext.tail_check(400, 1e-3);
        assert!(
            tail.max_value_error < 1e-12 && tail.max_gradient_error < 1e-12,
            "{tail:?}"
        );
        let r = ext.eta_edge_vs_tree(&sol, &problem.weights, 1.5).unwrap();
        assert!(r.edge_sum > 0.0 && r.tree_sum > 0.0 && r.ratio.is_finite());
        let outside = ext.jet([5.0, -6.0]);
        assert_eq!(outside.value, ext.tail().eval([5.0, -6.0]));
    }

    #[test]
    fn derivatives_match_finite_differences() {
        let (d, t) = setup(4, 2);
        let f = sample(d.set(), |x| (3.0 * x[0]).sin() + x[1] * x[0] * 4.0);
        let (ext, _, _) = extend(&f, &d, &t, 1.5, 1e-10).unwrap();
        let err = ext.finite_difference_error(100, 7);
        assert!(err < 1e-6, "{err:e}");
    }

    #[test]
    fn seminorm_refines() {
        let (d, t) = setup(4, 1);
        let f = sample(d.set(), |x| (2.0 * x[0]).cos() + 5.0 * x[1] * x[1]);
        let (ext, _, _) = extend(&f, &d, &t, 1.5, 1e-10).unwrap();
        let s = ext.seminorm(1.5, QuadConfig::default()).unwrap();
        assert!(s.value > 0.0);
        assert!(s.refinement_error < 1e-2, "{s:?}");
        assert!(!s.flagged);
    }

    #[test]
    fn rejects_mismatched_solution() {
        let (d, t) = setup(4, 1);
        let f = vec![0.0; d.set().len()];
        let (_, _, mut sol) = extend(&f, &d, &t, 1.5, 1e-10).unwrap();
        sol.values[1] = 3.0;
        assert!(assemble(&f, &d, &t, &sol).is_err());
        assert!(assemble(&f[1..], &d, &t, &sol).is_err());
    }
}
