//! Binary cluster tree over `E2` and its ball system.
//!
//! Clusters are stored in heap order: the root (all of `E2`) is node 0 and
//! the children of `v` are `2v + 1` (next sign `-1`) and `2v + 2` (next sign
//! `+1`). Since `E2` is sorted left to right, the depth-`l` node with offset
//! `i` owns the contiguous block of `2^(L-l)` points starting at
//! `i·2^(L-l)`, and the leaves appear in `E2` order.
//!
//! Balls are centered at `(c_C, Δ/2)`. `B_C` has radius `A·ε^(l+1)` for
//! `l ≤ L-1` and `B̂_C` has radius `10^(M+1)` times that for
//! `1 ≤ l ≤ L-1`. Exact checks run in units of `Δ/(2q)` where `A = p/q`.

use num_bigint::BigInt;
use num_rational::Ratio;
use serde::{Deserialize, Serialize};

use crate::cz::{CzDecomposition, SquareType};
use crate::fractal_set::{FractalParams, FractalSet, Rational};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterConfig {
    /// `A` in `radius(B_C) = A·ε^(l+1)`.
    pub ball_scale: f64,
    /// `M` in `radius(B̂_C) = 10^(M+1)·radius(B_C)`.
    pub hat_exponent: u32,
    /// Fail the build when the `B̂` balls violate nesting or disjointness.
    /// When off, the violations are only reported.
    pub strict_hat_balls: bool,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        Self {
            ball_scale: 2.0,
            hat_exponent: 1,
            strict_hat_balls: true,
        }
    }
}

impl ClusterConfig {
    pub fn relaxed() -> Self {
        Self {
            strict_hat_balls: false,
            ..Self::default()
        }
    }

    fn scale(&self) -> Result<(i128, i128)> {
        let r = Ratio::<i64>::approximate_float(self.ball_scale)
            .filter(|r| *r.denom() <= 1000 && *r.numer() > 0)
            .ok_or_else(|| {
                Error::InvalidParams(format!(
                    "ball scale {} is not a positive ratio with denominator <= 1000",
                    self.ball_scale
                ))
            })?;
        Ok((*r.numer() as i128, *r.denom() as i128))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cluster {
    pub id: usize,
    pub depth: u32,
    pub prefix: Vec<i8>,
    /// Position in `E2` of the first member.
    pub first: usize,
    pub count: usize,
    /// `c_C = Σ_{k ≤ l} s_k ε^k` in units of `Δ`.
    pub center_units: i128,
}

impl Cluster {
    pub fn members(&self) -> std::ops::Range<usize> {
        self.first..self.first + self.count
    }
}

pub fn node_id(depth: u32, offset: usize) -> usize {
    (1usize << depth) - 1 + offset
}

pub fn depth_of(id: usize) -> u32 {
    usize::BITS - 1 - (id + 1).leading_zeros()
}

pub fn parent(id: usize) -> Option<usize> {
    (id > 0).then(|| (id - 1) / 2)
}

#[derive(Clone, Debug, Serialize)]
pub struct SeparationReport {
    /// `min dist(B_C, B_C') / ε^l` over same-depth pairs, per depth
    /// `0..L-1` (`None` where a depth has a single ball).
    pub ball_gaps: Vec<Option<f64>>,
    pub hat_gaps: Vec<Option<f64>>,
    /// `(radius(B_π) - |c_C - c_π| - radius(B_C)) / ε^l` per depth `1..L-1`.
    pub ball_nesting_margins: Vec<f64>,
    /// Same with `B̂_C` in place of `B_C`.
    pub hat_nesting_margins: Vec<f64>,
    pub members_in_balls: bool,
    pub balls_disjoint: bool,
    pub balls_nested: bool,
    pub hats_disjoint: bool,
    pub hats_nested: bool,
    pub passed: bool,
    pub failures: Vec<String>,
}

#[derive(Clone, Debug)]
pub struct ClusterTree {
    params: FractalParams,
    config: ClusterConfig,
    scale: (i128, i128),
    clusters: Vec<Cluster>,
    separation: SeparationReport,
}

pub fn build_cluster_tree(set: &FractalSet, config: ClusterConfig) -> Result<ClusterTree> {
    let params = *set.params();
    let depth = params.depth();
    let scale = config.scale()?;
    let n = params.inv_eps() as i128;
    let mut clusters = Vec::with_capacity((1 << (depth + 1)) - 1);
    for l in 0..=depth {
        let width = 1usize << (depth - l);
        for i in 0..(1usize << l) {
            let first = i * width;
            let prefix = set.e2()[first].signs[..l as usize].to_vec();
            let center_units = prefix
                .iter()
                .enumerate()
                .map(|(k, &s)| s as i128 * n.pow(depth - 1 - k as u32))
                .sum();
            clusters.push(Cluster {
                id: node_id(l, i),
                depth: l,
                prefix,
                first,
                count: width,
                center_units,
            });
        }
    }
    let mut tree = ClusterTree {
        params,
        config,
        scale,
        clusters,
        separation: SeparationReport {
            ball_gaps: vec![],
            hat_gaps: vec![],
            ball_nesting_margins: vec![],
            hat_nesting_margins: vec![],
            members_in_balls: true,
            balls_disjoint: true,
            balls_nested: true,
            hats_disjoint: true,
            hats_nested: true,
            passed: true,
            failures: vec![],
        },
    };
    tree.separation = tree.measure_separation(set);
    let s = &tree.separation;
    let hat_ok = s.hats_disjoint && s.hats_nested;
    if !(s.members_in_balls && s.balls_disjoint && s.balls_nested) || (config.strict_hat_balls && !hat_ok) {
        return Err(Error::Geometry(format!(
            "ball system infeasible for eps = 1/{}, A = {}, M = {}: {}",
            params.inv_eps(),
            config.ball_scale,
            config.hat_exponent,
            s.failures.join("; ")
        )));
    }
    Ok(tree)
}

impl ClusterTree {
    pub fn params(&self) -> &FractalParams {
        &self.params
    }

    pub fn config(&self) -> &ClusterConfig {
        &self.config
    }

    pub fn depth(&self) -> u32 {
        self.params.depth()
    }

    pub fn len(&self) -> usize {
        self.clusters.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn clusters(&self) -> &[Cluster] {
        &self.clusters
    }

    pub fn cluster(&self, id: usize) -> &Cluster {
        &self.clusters[id]
    }

    /// Node of the singleton cluster `{x}` for the `j`-th point of `E2`.
    pub fn leaf(&self, j: usize) -> usize {
        node_id(self.depth(), j)
    }

    pub fn children(&self, id: usize) -> Option<[usize; 2]> {
        (depth_of(id) < self.depth()).then(|| [2 * id + 1, 2 * id + 2])
    }

    pub fn separation(&self) -> &SeparationReport {
        &self.separation
    }

    /// Radius of `B_C` in units of `Δ/(2q)`; defined for `l ≤ L-1`.
    fn radius_units(&self, l: u32) -> i128 {
        let n = self.params.inv_eps() as i128;
        2 * self.scale.0 * n.pow(self.depth() - l - 1)
    }

    fn hat_radius_units(&self, l: u32) -> i128 {
        10i128.pow(self.config.hat_exponent + 1) * self.radius_units(l)
    }

    fn center_x_units(&self, id: usize) -> i128 {
        2 * self.scale.1 * self.clusters[id].center_units
    }

    pub fn ball_radius(&self, depth: u32) -> Option<f64> {
        (depth < self.depth()).then(|| self.config.ball_scale * self.params.eps_pow(depth + 1))
    }

    pub fn hat_radius(&self, depth: u32) -> Option<f64> {
        (depth >= 1 && depth < self.depth())
            .then(|| 10f64.powi(self.config.hat_exponent as i32 + 1) * self.ball_radius(depth).unwrap())
    }

    pub fn center(&self, id: usize) -> [f64; 2] {
        let d = self.params.delta_f64();
        [self.clusters[id].center_units as f64 * d, 0.5 * d]
    }

    pub fn center_exact(&self, id: usize) -> (Rational, Rational) {
        let inv = self.params.inv_delta();
        (
            Rational::new(self.clusters[id].center_units, inv),
            Rational::new(1, 2 * inv),
        )
    }

    fn measure_separation(&self, set: &FractalSet) -> SeparationReport {
        let depth = self.depth();
        let q = self.scale.1;
        let eps_units = |l: u32| 2 * q * (self.params.inv_eps() as i128).pow(depth - l);
        let mut failures = Vec::new();

        let mut members_in_balls = true;
        for c in &self.clusters {
            if c.depth == depth {
                continue;
            }
            let r = self.radius_units(c.depth);
            let cx = self.center_x_units(c.id);
            for j in [c.first, c.first + c.count - 1] {
                let dx = 2 * q * set.e2()[j].abscissa - cx;
                if dx * dx + q * q > r * r {
                    members_in_balls = false;
                }
            }
        }
        if !members_in_balls {
            failures.push("some cluster is not contained in its ball".into());
        }

        let gaps = |radius: &dyn Fn(u32) -> i128, from: u32| -> (Vec<Option<f64>>, bool) {
            let mut ok = true;
            let mut out = Vec::new();
            for l in 0..depth {
                if l < from || l == 0 {
                    out.push(None);
                    continue;
                }
                let r = radius(l);
                let mut min_gap = i128::MAX;
                for i in 0..(1usize << l) - 1 {
                    let a = self.center_x_units(node_id(l, i));
                    let b = self.center_x_units(node_id(l, i + 1));
                    min_gap = min_gap.min(b - a - 2 * r);
                }
                if min_gap <= 0 {
                    ok = false;
                }
                out.push(Some(min_gap as f64 / eps_units(l) as f64));
            }
            (out, ok)
        };
        let (ball_gaps, balls_disjoint) = gaps(&|l| self.radius_units(l), 0);
        let (hat_gaps, hats_disjoint) = gaps(&|l| self.hat_radius_units(l), 1);
        if !balls_disjoint {
            failures.push("same-depth balls B_C intersect".into());
        }
        if !hats_disjoint {
            failures.push("same-depth balls B̂_C intersect".into());
        }

        // Children sit at distance ε^l from the parent's center; the
        // margin is the same for every cluster of a given depth.
        let mut ball_nesting_margins = Vec::new();
        let mut hat_nesting_margins = Vec::new();
        for l in 1..depth {
            let offset = eps_units(l);
            let outer = self.radius_units(l - 1);
            ball_nesting_margins.push((outer - offset - self.radius_units(l)) as f64 / offset as f64);
            hat_nesting_margins.push((outer - offset - self.hat_radius_units(l)) as f64 / offset as f64);
        }
        let balls_nested = ball_nesting_margins.iter().all(|m| *m >= 0.0);
        let hats_nested = hat_nesting_margins.iter().all(|m| *m >= 0.0);
        if !balls_nested {
            failures.push("B_C not inside B_π(C)".into());
        }
        if !hats_nested {
            let needed = self.hat_threshold();
            failures.push(format!(
                "B̂_C not inside B_π(C); needs eps <= {:.6} (N >= {})",
                needed,
                (1.0 / needed).ceil()
            ));
        }
        SeparationReport {
            ball_gaps,
            hat_gaps,
            ball_nesting_margins,
            hat_nesting_margins,
            members_in_balls,
            balls_disjoint,
            balls_nested,
            hats_disjoint,
            hats_nested,
            passed: failures.is_empty(),
            failures,
        }
    }

    /// Largest `ε` for which `ε^l + 10^(M+1)·A·ε^(l+1) <= A·ε^l`.
    pub fn hat_threshold(&self) -> f64 {
        let a = self.config.ball_scale;
        let k = 10f64.powi(self.config.hat_exponent as i32 + 1);
        ((a - 1.0) / (k * a)).max(0.0)
    }

    /// Exact test `Q ⊂ B_C` for the closed square `q`.
    pub fn square_in_ball(&self, decomp: &CzDecomposition, q: usize, id: usize) -> bool {
        let l = self.clusters[id].depth;
        if l >= self.depth() {
            return false;
        }
        let sq = decomp.square(q);
        let [x0, y0] = sq.corner();
        let s = sq.side();
        let [cx, cy] = self.center(id);
        let r = self.ball_radius(l).unwrap();
        let dx = (x0 - cx).abs().max((x0 + s - cx).abs());
        let dy = (y0 - cy).abs().max((y0 + s - cy).abs());
        let d2 = dx * dx + dy * dy;
        let r2 = r * r;
        if d2 < r2 * (1.0 - 1e-9) {
            return true;
        }
        if d2 > r2 * (1.0 + 1e-9) {
            return false;
        }
        self.square_in_ball_exact(decomp, q, id)
    }

    fn square_in_ball_exact(&self, decomp: &CzDecomposition, q: usize, id: usize) -> bool {
        let lat = decomp.lattice();
        let rect = decomp.dilation(q, 1, 1);
        let (p, qd) = self.scale;
        let cx = self.clusters[id].center_units * lat.delta();
        let cy = lat.delta() / 2;
        let dx = (rect.x0 - cx).abs().max((rect.x1 - cx).abs());
        let dy = (rect.y0 - cy).abs().max((rect.y1 - cy).abs());
        let n = self.params.inv_eps() as i128;
        let radius = BigInt::from(p) * BigInt::from(n.pow(self.depth() - self.clusters[id].depth - 1) * lat.delta());
        let (dx, dy) = (BigInt::from(dx), BigInt::from(dy));
        let qd = BigInt::from(qd);
        &qd * &qd * (&dx * &dx + &dy * &dy) <= &radius * &radius
    }

    pub fn to_document(&self) -> TreeDocument {
        TreeDocument {
            inv_eps: self.params.inv_eps(),
            depth: self.depth(),
            config: self.config,
            nodes: self
                .clusters
                .iter()
                .map(|c| NodeRecord {
                    id: c.id,
                    depth: c.depth,
                    prefix: c.prefix.clone(),
                    first: c.first,
                    count: c.count,
                    center: self.center(c.id),
                    radius: self.ball_radius(c.depth),
                    hat_radius: self.hat_radius(c.depth),
                })
                .collect(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct NodeRecord {
    pub id: usize,
    pub depth: u32,
    pub prefix: Vec<i8>,
    pub first: usize,
    pub count: usize,
    pub center: [f64; 2],
    pub radius: Option<f64>,
    pub hat_radius: Option<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TreeDocument {
    pub inv_eps: u64,
    pub depth: u32,
    pub config: ClusterConfig,
    pub nodes: Vec<NodeRecord>,
}

/// `C_Q`: the whole of `E2` for boundary squares, `{x_Q}` for Type II, and
/// otherwise the deepest cluster whose ball contains `Q` (the root when
/// there is none). Balls nest along the tree and same-depth balls are
/// disjoint, so a walk from the root finds it.
pub fn assign_cluster(decomp: &CzDecomposition, tree: &ClusterTree, q: usize) -> usize {
    if decomp.is_boundary(q) {
        return 0;
    }
    if decomp.kind(q) == SquareType::II {
        return tree.leaf(decomp.x_point(q).expect("Type II square has x_Q"));
    }
    let mut current = 0;
    if !tree.square_in_ball(decomp, q, 0) {
        return 0;
    }
    while let Some(children) = tree.children(current) {
        match children.iter().find(|&&c| tree.square_in_ball(decomp, q, c)) {
            Some(&c) => current = c,
            None => break,
        }
    }
    current
}

pub fn assign_all(decomp: &CzDecomposition, tree: &ClusterTree) -> Vec<usize> {
    use rayon::prelude::*;
    (0..decomp.len())
        .into_par_iter()
        .map(|q| assign_cluster(decomp, tree, q))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cz::decompose;
    use crate::fractal_set::build_fractal_set;

    fn set(n: u64, l: u32) -> FractalSet {
        build_fractal_set(FractalParams::with_threshold(n, l, 4).unwrap())
    }

    #[test]
    fn heap_indexing() {
        assert_eq!(depth_of(0), 0);
        assert_eq!(depth_of(1), 1);
        assert_eq!(depth_of(2), 1);
        assert_eq!(depth_of(3), 2);
        assert_eq!(depth_of(6), 2);
        assert_eq!(depth_of(7), 3);
        assert_eq!(parent(5), Some(2));
        assert_eq!(parent(0), None);
        assert_eq!(node_id(2, 3), 6);
    }

    #[test]
    fn depth_one_shape() {
        let t = build_cluster_tree(&set(8, 1), ClusterConfig::default()).unwrap();
        assert_eq!(t.len(), 3);
        assert_eq!(t.cluster(0).count, 2);
        assert_eq!(t.cluster(1).prefix, vec![-1]);
        assert_eq!(t.cluster(2).prefix, vec![1]);
        assert_eq!(t.ball_radius(0), Some(0.25));
        assert_eq!(t.ball_radius(1), None);
        assert!(t.separation().passed);
    }

    #[test]
    fn hat_feasibility_thresholds() {
        // A = 2, M = 1 needs eps <= 1/200
        let err = build_cluster_tree(&set(8, 3), ClusterConfig::default()).unwrap_err();
        assert!(matches!(err, Error::Geometry(_)));
        let m0 = ClusterConfig {
            hat_exponent: 0,
            ..ClusterConfig::default()
        };
        assert!(build_cluster_tree(&set(8, 3), m0).is_err());
        assert!(build_cluster_tree(&set(64, 3), ClusterConfig::default()).is_err());
        // at exactly 1/200 sibling hats touch
        assert!(build_cluster_tree(&set(200, 3), ClusterConfig::default()).is_err());
        assert!(build_cluster_tree(&set(201, 3), ClusterConfig::default()).is_ok());
        assert!(build_cluster_tree(&set(21, 3), m0).is_ok());
        assert!(build_cluster_tree(&set(20, 3), m0).is_err());
        let relaxed = build_cluster_tree(&set(8, 3), ClusterConfig::relaxed()).unwrap();
        assert!(!relaxed.separation().hats_nested);
        assert!(relaxed.separation().balls_nested);
    }

    #[test]
    fn partition_per_depth_and_prefixes() {
        let s = set(4, 4);
        let t = build_cluster_tree(&s, ClusterConfig::relaxed()).unwrap();
        for l in 0..=4 {
            let mut covered = [0; 16];
            for c in t.clusters().iter().filter(|c| c.depth == l) {
                assert_eq!(c.count, 1 << (4 - l));
                for j in c.members() {
                    covered[j] += 1;
                    assert_eq!(s.e2()[j].signs[..l as usize], c.prefix[..]);
                }
                if let Some(p) = parent(c.id) {
                    assert_eq!(t.cluster(p).prefix[..], c.prefix[..l as usize - 1]);
                }
            }
            assert!(covered.iter().all(|&k| k == 1));
        }
    }

    #[test]
    fn assignment_matches_brute_force() {
        for (n, l) in [(4, 2), (4, 3), (8, 2)] {
            let s = set(n, l);
            let d = decompose(&s).unwrap();
            let t = build_cluster_tree(&s, ClusterConfig::relaxed()).unwrap();
            for q in 0..d.len() {
                let got = assign_cluster(&d, &t, q);
                let expected = if d.is_boundary(q) {
                    0
                } else if let Some(j) = d.x_point(q) {
                    t.leaf(j)
                } else {
                    (0..t.len())
                        .filter(|&c| t.cluster(c).depth < l && t.square_in_ball_exact(&d, q, c))
                        .max_by_key(|&c| t.cluster(c).depth)
                        .unwrap_or(0)
                };
                assert_eq!(got, expected, "square {:?}", d.square(q));
            }
        }
    }

    #[test]
    fn type_two_example() {
        let s = set(4, 2);
        let d = decompose(&s).unwrap();
        let t = build_cluster_tree(&s, ClusterConfig::relaxed()).unwrap();
        let q = d.locate([5.0 / 16.0, 1.0 / 16.0]).unwrap();
        let c = assign_cluster(&d, &t, q);
        assert_eq!(t.cluster(c).members(), 3..4);
    }
}
