//! Stopping-rule decomposition of `Q0 = [-4,4)^2` into dyadic squares.
//!
//! A square is bisected while its closed triple contains at least two points
//! of `E`. The leaves carry a touch graph (closed `1.1`-dilations meet), a
//! type (I: `1.1Q` holds a point of `E1`, II: a point of `E2`, III: neither),
//! a boundary flag (`1.1Q` reaches `∂Q0`) and two anchor points of `E1`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::fractal_set::{ExactPoint, FractalSet, Rational};
use crate::lattice::{Lattice, Rect};
use crate::{Error, Point, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct DyadicSquare {
    pub generation: u32,
    pub col: u64,
    pub row: u64,
}

impl DyadicSquare {
    pub const ROOT: Self = Self {
        generation: 0,
        col: 0,
        row: 0,
    };

    pub fn new(generation: u32, col: u64, row: u64) -> Self {
        assert!(generation < 62);
        assert!(col >> generation == 0 && row >> generation == 0, "square outside Q0");
        Self { generation, col, row }
    }

    pub fn side(&self) -> f64 {
        8.0 * 0.5f64.powi(self.generation as i32)
    }

    pub fn side_exact(&self) -> Rational {
        Rational::new(8, 1i128 << self.generation)
    }

    /// Lower-left corner; exact in floating point.
    pub fn corner(&self) -> Point {
        let s = self.side();
        [-4.0 + self.col as f64 * s, -4.0 + self.row as f64 * s]
    }

    pub fn corner_exact(&self) -> (Rational, Rational) {
        let s = self.side_exact();
        let four = Rational::from_integer(4);
        (
            s * Rational::from_integer(self.col as i128) - four,
            s * Rational::from_integer(self.row as i128) - four,
        )
    }

    pub fn center(&self) -> Point {
        let [a, b] = self.corner();
        let h = 0.5 * self.side();
        [a + h, b + h]
    }

    /// Half-open membership.
    pub fn contains(&self, x: Point) -> bool {
        let [a, b] = self.corner();
        let s = self.side();
        a <= x[0] && x[0] < a + s && b <= x[1] && x[1] < b + s
    }

    /// `[x0, x1, y0, y1]` of the closed dilation `cQ`, in floating point.
    pub fn dilated(&self, c: f64) -> [f64; 4] {
        let [m0, m1] = self.center();
        let h = 0.5 * c * self.side();
        [m0 - h, m0 + h, m1 - h, m1 + h]
    }

    pub fn children(&self) -> [Self; 4] {
        let g = self.generation + 1;
        let (c, r) = (2 * self.col, 2 * self.row);
        [
            Self::new(g, c, r),
            Self::new(g, c + 1, r),
            Self::new(g, c, r + 1),
            Self::new(g, c + 1, r + 1),
        ]
    }

    pub fn parent(&self) -> Option<Self> {
        (self.generation > 0).then(|| Self::new(self.generation - 1, self.col / 2, self.row / 2))
    }

    /// `1.1Q` on each axis as `[lo, hi]` in units of `side / 20` at a
    /// common generation `g >= self.generation`.
    fn dilation_at(&self, g: u32) -> ([i128; 2], [i128; 2]) {
        let scale = 1i128 << (g - self.generation);
        let axis = |i: u64| {
            let lo = i as i128 * 20 * scale;
            [lo - scale, lo + 21 * scale]
        };
        (axis(self.col), axis(self.row))
    }
}

/// Closed `1.1`-dilations meet. Exact.
pub fn touches(a: &DyadicSquare, b: &DyadicSquare) -> bool {
    let g = a.generation.max(b.generation);
    let (ax, ay) = a.dilation_at(g);
    let (bx, by) = b.dilation_at(g);
    ax[0] <= bx[1] && bx[0] <= ax[1] && ay[0] <= by[1] && by[0] <= ay[1]
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SquareType {
    I,
    II,
    III,
}

const NONE: u32 = u32::MAX;

#[derive(Clone, Copy, Debug)]
struct Node {
    square: DyadicSquare,
    first_child: u32,
    leaf: u32,
}

#[derive(Clone, Debug)]
pub struct CzDecomposition {
    set: FractalSet,
    lattice: Lattice,
    nodes: Vec<Node>,
    squares: Vec<DyadicSquare>,
    neighbor_start: Vec<usize>,
    neighbor_list: Vec<u32>,
    kinds: Vec<SquareType>,
    boundary: Vec<bool>,
    x_point: Vec<u32>,
    anchors: Vec<[usize; 2]>,
}

pub fn decompose(set: &FractalSet) -> Result<CzDecomposition> {
    let lattice = Lattice::new(set);
    let mut nodes = vec![Node {
        square: DyadicSquare::ROOT,
        first_child: NONE,
        leaf: NONE,
    }];
    let mut squares = Vec::new();
    let mut stack = vec![0usize];
    while let Some(i) = stack.pop() {
        let sq = nodes[i].square;
        if lattice.count(&rect(&lattice, &sq, 3, 1)) >= 2 {
            if sq.generation >= lattice.max_generation() {
                return Err(Error::Geometry(format!(
                    "generation bound {} exceeded",
                    lattice.max_generation()
                )));
            }
            let first = nodes.len();
            for child in sq.children() {
                nodes.push(Node {
                    square: child,
                    first_child: NONE,
                    leaf: NONE,
                });
            }
            nodes[i].first_child = first as u32;
            stack.extend((first..first + 4).rev());
        } else {
            nodes[i].leaf = squares.len() as u32;
            squares.push(sq);
        }
    }

    let mut decomp = CzDecomposition {
        set: set.clone(),
        lattice,
        nodes,
        squares,
        neighbor_start: Vec::new(),
        neighbor_list: Vec::new(),
        kinds: Vec::new(),
        boundary: Vec::new(),
        x_point: Vec::new(),
        anchors: Vec::new(),
    };
    decomp.build_neighbors();
    decomp.classify()?;
    decomp.anchors = (0..decomp.len())
        .map(|q| decomp.compute_anchors(q))
        .collect::<Result<_>>()?;
    Ok(decomp)
}

fn rect(lattice: &Lattice, sq: &DyadicSquare, num: i128, den: i128) -> Rect {
    let side = lattice.side(sq.generation);
    let cx = lattice.corner(sq.generation, sq.col);
    let cy = lattice.corner(sq.generation, sq.row);
    lattice.dilate(cx, cy, side, num, den)
}

impl CzDecomposition {
    pub fn set(&self) -> &FractalSet {
        &self.set
    }

    pub fn lattice(&self) -> &Lattice {
        &self.lattice
    }

    pub fn len(&self) -> usize {
        self.squares.len()
    }

    pub fn is_empty(&self) -> bool {
        self.squares.is_empty()
    }

    pub fn squares(&self) -> &[DyadicSquare] {
        &self.squares
    }

    pub fn square(&self, q: usize) -> &DyadicSquare {
        &self.squares[q]
    }

    /// Touching squares of `q`, including `q` itself, in increasing order.
    pub fn neighbors(&self, q: usize) -> &[u32] {
        &self.neighbor_list[self.neighbor_start[q]..self.neighbor_start[q + 1]]
    }

    pub fn kind(&self, q: usize) -> SquareType {
        self.kinds[q]
    }

    pub fn is_boundary(&self, q: usize) -> bool {
        self.boundary[q]
    }

    /// Position in `E2` of the point `x_Q` of a Type II square.
    pub fn x_point(&self, q: usize) -> Option<usize> {
        (self.x_point[q] != NONE).then_some(self.x_point[q] as usize)
    }

    /// Global indices in `E` of `(z_Q, w_Q)`.
    pub fn anchor_indices(&self, q: usize) -> [usize; 2] {
        self.anchors[q]
    }

    pub fn anchor_points(&self, q: usize) -> (ExactPoint, ExactPoint) {
        let [z, w] = self.anchors[q];
        (self.set.point(z), self.set.point(w))
    }

    /// Closed `num/den` dilation of square `q` in lattice units.
    pub fn dilation(&self, q: usize, num: i128, den: i128) -> Rect {
        rect(&self.lattice, &self.squares[q], num, den)
    }

    /// The square containing `x`, or `None` outside `Q0`.
    pub fn locate(&self, x: Point) -> Option<usize> {
        if !(-4.0..4.0).contains(&x[0]) || !(-4.0..4.0).contains(&x[1]) {
            return None;
        }
        let mut node = 0usize;
        loop {
            let n = &self.nodes[node];
            if n.leaf != NONE {
                return Some(n.leaf as usize);
            }
            let [mx, my] = n.square.center();
            let child = (x[0] >= mx) as usize + 2 * (x[1] >= my) as usize;
            node = n.first_child as usize + child;
        }
    }

    /// Leaves whose `1.1`-dilation meets that of `sq` (which need not be a
    /// leaf). A child's dilation lies inside its parent's, so subtrees whose
    /// root misses can be skipped.
    pub fn touching(&self, sq: &DyadicSquare) -> Vec<u32> {
        let mut out = Vec::new();
        let mut stack = vec![0usize];
        while let Some(i) = stack.pop() {
            let n = &self.nodes[i];
            if !touches(&n.square, sq) {
                continue;
            }
            if n.leaf != NONE {
                out.push(n.leaf);
            } else {
                let f = n.first_child as usize;
                stack.extend(f..f + 4);
            }
        }
        out.sort_unstable();
        out
    }

    fn build_neighbors(&mut self) {
        let lists: Vec<Vec<u32>> = self.squares.par_iter().map(|sq| self.touching(sq)).collect();
        let mut start = Vec::with_capacity(lists.len() + 1);
        let mut flat = Vec::new();
        start.push(0);
        for l in lists {
            flat.extend_from_slice(&l);
            start.push(flat.len());
        }
        self.neighbor_start = start;
        self.neighbor_list = flat;
    }

    fn classify(&mut self) -> Result<()> {
        let u = self.lattice.unit();
        let n = self.len();
        self.kinds = Vec::with_capacity(n);
        self.boundary = Vec::with_capacity(n);
        self.x_point = Vec::with_capacity(n);
        for q in 0..n {
            let r = self.dilation(q, 11, 10);
            let c1 = self.lattice.count_e1(&r);
            let e2 = self.lattice.e2_range(&r);
            if c1 > 0 && !e2.is_empty() || c1 + e2.len() > 1 {
                return Err(Error::Geometry(format!(
                    "1.1Q of square {:?} holds {} points of E1 and {} of E2",
                    self.squares[q],
                    c1,
                    e2.len()
                )));
            }
            let kind = if c1 == 1 {
                SquareType::I
            } else if e2.len() == 1 {
                SquareType::II
            } else {
                SquareType::III
            };
            let boundary = r.x0 <= -4 * u || r.x1 >= 4 * u || r.y0 <= -4 * u || r.y1 >= 4 * u;
            if boundary && kind != SquareType::III {
                return Err(Error::Geometry(format!(
                    "boundary square {:?} has type {kind:?}",
                    self.squares[q]
                )));
            }
            self.kinds.push(kind);
            self.boundary.push(boundary);
            self.x_point
                .push(if kind == SquareType::II { e2.start as u32 } else { NONE });
        }
        Ok(())
    }

    fn compute_anchors(&self, q: usize) -> Result<[usize; 2]> {
        let k_max = self.set.half_count();
        let index = |k: i128| self.set.e1_index(k).expect("abscissa in range");
        // right neighbor when it exists, otherwise left
        let pair = |k: i128| [index(k), index(if k < k_max { k + 1 } else { k - 1 })];
        if self.boundary[q] {
            return Ok([index(-k_max), index(k_max)]);
        }
        match self.kinds[q] {
            SquareType::I => {
                let (k, _) = self
                    .lattice
                    .e1_range(&self.dilation(q, 11, 10))
                    .expect("Type I square holds a point of E1");
                Ok(pair(k))
            }
            SquareType::II => Ok(pair(self.set.e2()[self.x_point[q] as usize].abscissa)),
            SquareType::III => match self.lattice.e1_range(&self.dilation(q, 50, 1)) {
                Some((lo, hi)) if lo < hi => Ok([index(lo), index(hi)]),
                _ => Err(Error::Geometry(format!(
                    "50Q of square {:?} holds fewer than two points of E1",
                    self.squares[q]
                ))),
            },
        }
    }

    /// Distance from the closed square `q` to `E1`.
    pub fn dist_to_e1(&self, q: usize) -> f64 {
        let r = self.dilation(q, 1, 1);
        let d = self.lattice.delta();
        let k = self.set.half_count();
        let dy = r.y0.max(-r.y1).max(0);
        let dx = match self.lattice.e1_range(&Rect { y0: 0, y1: 0, ..r }) {
            Some(_) => 0,
            None => {
                let left = crate::lattice::div_floor(r.x0, d).clamp(-k, k) * d;
                let right = crate::lattice::div_ceil(r.x1, d).clamp(-k, k) * d;
                let gap = |x: i128| (r.x0 - x).max(x - r.x1).max(0);
                gap(left).min(gap(right))
            }
        };
        self.lattice.to_f64(dx).hypot(self.lattice.to_f64(dy))
    }

    pub fn type_counts(&self) -> [usize; 3] {
        let mut c = [0; 3];
        for k in &self.kinds {
            c[*k as usize] += 1;
        }
        c
    }

    pub fn to_document(&self) -> CzDocument {
        let squares = (0..self.len())
            .map(|q| {
                let sq = self.squares[q];
                SquareRecord {
                    generation: sq.generation,
                    col: sq.col,
                    row: sq.row,
                    corner: sq.corner(),
                    side: sq.side(),
                    kind: self.kinds[q],
                    boundary: self.boundary[q],
                    x_point: self.x_point(q),
                    anchors: self.anchors[q],
                    neighbors: self.neighbors(q).to_vec(),
                }
            })
            .collect();
        CzDocument {
            inv_eps: self.set.params().inv_eps(),
            depth: self.set.params().depth(),
            squares,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SquareRecord {
    pub generation: u32,
    pub col: u64,
    pub row: u64,
    pub corner: Point,
    pub side: f64,
    pub kind: SquareType,
    pub boundary: bool,
    pub x_point: Option<usize>,
    pub anchors: [usize; 2],
    pub neighbors: Vec<u32>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CzDocument {
    pub inv_eps: u64,
    pub depth: u32,
    pub squares: Vec<SquareRecord>,
}

#[derive(Clone, Debug, Serialize)]
pub struct GeometryReport {
    pub square_count: usize,
    pub type_counts: [usize; 3],
    pub boundary_count: usize,
    pub min_generation: u32,
    pub max_generation: u32,
    /// Largest `δ_Q' / δ_Q` over touching pairs.
    pub max_side_ratio: f64,
    /// Largest number of touching squares, the square itself included.
    pub max_neighbor_count: usize,
    /// Largest `#{Q : x ∈ 1.1Q}` over corners, edge midpoints and centers.
    pub max_cover_count: usize,
    /// `min 9 δ_Q / Δ`; at least 1.
    pub min_side_over_ninth_delta: f64,
    pub max_points_in_dilation: usize,
    pub parents_split: bool,
    pub min_boundary_side: f64,
    /// Range of `δ_Q / Δ` over Type I and II squares.
    pub near_side_over_delta: [f64; 2],
    /// Range of `δ_Q / (Δ + dist(Q, E1))`.
    pub comparability: [f64; 2],
    /// Range of `|z_Q - w_Q| / δ_Q`.
    pub anchor_spread: [f64; 2],
    pub anchors_in_50q: bool,
    pub partition_ok: bool,
    pub passed: bool,
    pub failures: Vec<String>,
}

struct SquareStats {
    max_ratio: f64,
    neighbors: usize,
    cover: usize,
    ratio_ok: bool,
    points: usize,
    parent_split: bool,
    anchors_ok: bool,
    comparability: f64,
    spread: f64,
}

/// Measures every property the stopping rule is supposed to guarantee.
/// `sample_count` random points of `Q0` are located to check the partition.
pub fn verify_good_geometry(decomp: &CzDecomposition, sample_count: usize, seed: u64) -> GeometryReport {
    let lat = &decomp.lattice;
    let delta = lat.delta();
    let delta_f = decomp.set.params().delta_f64();
    let four = 4 * lat.unit();

    let stats: Vec<SquareStats> = (0..decomp.len())
        .into_par_iter()
        .map(|q| {
            let sq = decomp.squares[q];
            let nb = decomp.neighbors(q);
            let mut max_gap = 0i64;
            for &n in nb {
                let g = decomp.squares[n as usize].generation as i64;
                max_gap = max_gap.max((g - sq.generation as i64).abs());
            }
            let dil: Vec<Rect> = nb.iter().map(|&n| decomp.dilation(n as usize, 11, 10)).collect();
            let side = lat.side(sq.generation);
            let cx = lat.corner(sq.generation, sq.col);
            let cy = lat.corner(sq.generation, sq.row);
            let mut cover = 0;
            for i in 0..3 {
                for j in 0..3 {
                    let (x, y) = (cx + i * side / 2, cy + j * side / 2);
                    if x >= four || y >= four {
                        continue;
                    }
                    cover = cover.max(dil.iter().filter(|r| r.contains(x, y)).count());
                }
            }
            let parent_split = sq.parent().is_none_or(|p| lat.count(&rect(lat, &p, 3, 1)) >= 2);
            let r50 = decomp.dilation(q, 50, 1);
            let [z, w] = decomp.anchors[q];
            let (zx, _) = decomp.set.units(z);
            let (wx, _) = decomp.set.units(w);
            let anchors_ok =
                z != w && (decomp.boundary[q] || (r50.contains(zx * delta, 0) && r50.contains(wx * delta, 0)));
            let side_f = sq.side();
            SquareStats {
                max_ratio: 2f64.powi(max_gap as i32),
                neighbors: nb.len(),
                cover,
                ratio_ok: max_gap <= 1,
                points: lat.count(&decomp.dilation(q, 11, 10)),
                parent_split,
                anchors_ok,
                comparability: side_f / (delta_f + decomp.dist_to_e1(q)),
                spread: (zx - wx).abs() as f64 * delta_f / side_f,
            }
        })
        .collect();

    let mut failures = Vec::new();
    let max_side_ratio = stats.iter().map(|s| s.max_ratio).fold(1.0, f64::max);
    if !stats.iter().all(|s| s.ratio_ok) {
        failures.push(format!("touching side ratio {max_side_ratio} exceeds 2"));
    }
    let min_generation = decomp.squares.iter().map(|s| s.generation).min().unwrap_or(0);
    let max_generation = decomp.squares.iter().map(|s| s.generation).max().unwrap_or(0);
    let finest = lat.side(max_generation);
    if 9 * finest < delta {
        failures.push("some square is smaller than Δ/9".into());
    }
    let max_points = stats.iter().map(|s| s.points).max().unwrap_or(0);
    if max_points > 1 {
        failures.push(format!("#(1.1Q ∩ E) reaches {max_points}"));
    }
    let parents_split = stats.iter().all(|s| s.parent_split);
    if !parents_split {
        failures.push("a leaf's parent has fewer than two points in its triple".into());
    }
    let min_boundary_side = (0..decomp.len())
        .filter(|&q| decomp.boundary[q])
        .map(|q| decomp.squares[q].side())
        .fold(f64::INFINITY, f64::min);
    if min_boundary_side < 1.0 {
        failures.push(format!("boundary square of side {min_boundary_side}"));
    }
    let anchors_in_50q = stats.iter().all(|s| s.anchors_ok);
    if !anchors_in_50q {
        failures.push("anchor points outside 50Q or coincident".into());
    }

    let range = |it: &mut dyn Iterator<Item = f64>| {
        it.fold([f64::INFINITY, f64::NEG_INFINITY], |[lo, hi], v| [lo.min(v), hi.max(v)])
    };
    let near_side_over_delta = range(
        &mut (0..decomp.len())
            .filter(|&q| decomp.kinds[q] != SquareType::III)
            .map(|q| decomp.squares[q].side() / delta_f),
    );
    let comparability = range(&mut stats.iter().map(|s| s.comparability));
    let anchor_spread = range(&mut stats.iter().map(|s| s.spread));

    let partition_ok = check_partition(decomp, sample_count, seed);
    if !partition_ok {
        failures.push("squares do not partition Q0".into());
    }

    GeometryReport {
        square_count: decomp.len(),
        type_counts: decomp.type_counts(),
        boundary_count: decomp.boundary.iter().filter(|b| **b).count(),
        min_generation,
        max_generation,
        max_side_ratio,
        max_neighbor_count: stats.iter().map(|s| s.neighbors).max().unwrap_or(0),
        max_cover_count: stats.iter().map(|s| s.cover).max().unwrap_or(0),
        min_side_over_ninth_delta: 9.0
            * decomp.squares[0..]
                .iter()
                .map(|s| s.side())
                .fold(f64::INFINITY, f64::min)
            / delta_f,
        max_points_in_dilation: max_points,
        parents_split,
        min_boundary_side,
        near_side_over_delta,
        comparability,
        anchor_spread,
        anchors_in_50q,
        partition_ok,
        passed: failures.is_empty(),
        failures,
    }
}

/// Total area equals 64 and random points lie in exactly one square.
fn check_partition(decomp: &CzDecomposition, sample_count: usize, seed: u64) -> bool {
    let g = decomp.squares.iter().map(|s| s.generation).max().unwrap_or(0);
    let area: u128 = decomp.squares.iter().map(|s| 1u128 << (2 * (g - s.generation))).sum();
    if area != 1u128 << (2 * g) {
        return false;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..sample_count).all(|_| {
        let x = [rng.gen_range(-4.0..4.0), rng.gen_range(-4.0..4.0)];
        match decomp.locate(x) {
            Some(q) => {
                decomp.squares[q].contains(x)
                    && decomp
                        .neighbors(q)
                        .iter()
                        .filter(|&&n| decomp.squares[n as usize].contains(x))
                        .count()
                        == 1
            }
            None => false,
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fractal_set::{build_fractal_set, FractalParams};

    fn decomp(n: u64, l: u32) -> CzDecomposition {
        let set = build_fractal_set(FractalParams::with_threshold(n, l, 4).unwrap());
        decompose(&set).unwrap()
    }

    fn sq(g: u32, c: u64, r: u64) -> DyadicSquare {
        DyadicSquare::new(g, c, r)
    }

    #[test]
    fn touch_examples() {
        // generation 3 has side 1 and corners at integers starting from -4
        let a = sq(3, 4, 4); // [0,1)^2
        assert!(touches(&a, &sq(3, 5, 4)));
        assert!(!touches(&a, &sq(3, 6, 4)));
        assert!(touches(&a, &sq(3, 5, 5)));
        assert!(touches(&a, &a));
        assert!(touches(&sq(3, 5, 4), &a));
        // a small square at distance 0.04 from a unit square
        let small = sq(5, 20, 16);
        assert_eq!(small.corner(), [1.0, 0.0]);
        assert!(touches(&a, &small));
    }

    #[test]
    fn root_splits() {
        let d = decomp(4, 1);
        assert!(d.len() > 1);
        assert!(d.squares().iter().all(|s| s.generation > 0));
    }

    #[test]
    fn corner_square_is_boundary_type_three() {
        let d = decomp(4, 2);
        let q = d.locate([3.5, 3.5]).unwrap();
        assert_eq!(d.kind(q), SquareType::III);
        assert!(d.is_boundary(q));
        let (z, w) = d.anchor_points(q);
        assert_eq!(z.x, Rational::from_integer(-1));
        assert_eq!(w.x, Rational::from_integer(1));
    }

    #[test]
    fn origin_square_is_type_one() {
        let d = decomp(4, 2);
        let q = d.locate([0.0, 0.0]).unwrap();
        assert_eq!(d.kind(q), SquareType::I);
        let ratio = d.square(q).side() / d.set().params().delta_f64();
        assert!((1.0 / 9.0..=4.0).contains(&ratio), "{ratio}");
    }

    #[test]
    fn type_two_anchor_projection() {
        let d = decomp(4, 2);
        let target = d.set().e2_index(3); // (5/16, 1/16)
        let q = d.locate(d.set().point_f64(target)).unwrap();
        assert_eq!(d.kind(q), SquareType::II);
        assert_eq!(d.x_point(q), Some(3));
        let (z, w) = d.anchor_points(q);
        assert_eq!(
            z,
            ExactPoint {
                x: Rational::new(5, 16),
                y: Rational::from_integer(0)
            }
        );
        assert_eq!(w.x, Rational::new(3, 8));
    }

    #[test]
    fn right_edge_anchor_falls_back_left() {
        let d = decomp(4, 2);
        let q = d.locate([1.0, 0.0]).unwrap();
        assert_eq!(d.kind(q), SquareType::I);
        let (z, w) = d.anchor_points(q);
        assert_eq!(z.x, Rational::from_integer(1));
        assert_eq!(w.x, Rational::new(15, 16));
    }

    #[test]
    fn every_e2_point_has_type_two_square() {
        for (n, l) in [(4, 1), (4, 3), (8, 2)] {
            let d = decomp(n, l);
            assert!(d.type_counts()[1] >= 1 << l);
            let mut seen = vec![false; 1 << l];
            for q in 0..d.len() {
                if let Some(j) = d.x_point(q) {
                    seen[j] = true;
                }
            }
            assert!(seen.iter().all(|s| *s));
        }
    }

    #[test]
    fn geometry_passes() {
        let d = decomp(4, 2);
        let r = verify_good_geometry(&d, 2000, 1);
        assert!(r.passed, "{:?}", r.failures);
        assert!(r.max_side_ratio <= 2.0);
        assert!(r.min_side_over_ninth_delta >= 1.0);
    }

    #[test]
    fn neighbors_symmetric_and_reflexive() {
        let d = decomp(8, 2);
        for q in 0..d.len() {
            assert!(d.neighbors(q).contains(&(q as u32)));
            for &n in d.neighbors(q) {
                assert!(d.neighbors(n as usize).contains(&(q as u32)));
            }
        }
    }
}
