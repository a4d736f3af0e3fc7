//! The point set `E = E1 ∪ E2`.
//!
//! `E1` is the lattice `(ΔZ ∩ [-1,1]) × {0}` and `E2` the `2^L` points
//! `(Σ s_l ε^l, Δ)` indexed by sign vectors, with `ε = 1/N` and `Δ = ε^L`.
//! Every coordinate is an integer multiple of `Δ`, so points are stored as
//! integers in units of `Δ` and exposed as exact rationals with float shadows.

use num_rational::Ratio;
use serde::{Deserialize, Serialize};

use crate::{Error, Point, Result};

pub type Rational = Ratio<i128>;

/// Default lower bound on `N = 1/ε`.
pub const MIN_INV_EPS: u64 = 8;

/// Largest admissible `N^L`; keeps every downstream lattice inside `i128`.
const MAX_INV_DELTA: i128 = 1 << 40;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FractalParams {
    inv_eps: u64,
    depth: u32,
    min_inv_eps: u64,
}

impl FractalParams {
    pub fn new(inv_eps: u64, depth: u32) -> Result<Self> {
        Self::with_threshold(inv_eps, depth, MIN_INV_EPS)
    }

    /// Same as [`FractalParams::new`] with a custom lower bound on `N`.
    /// The bound itself must be at least 3 so that `ε < 1/2`.
    pub fn with_threshold(inv_eps: u64, depth: u32, min_inv_eps: u64) -> Result<Self> {
        if min_inv_eps < 3 {
            return Err(Error::InvalidParams(format!(
                "threshold N >= {min_inv_eps} admits eps >= 1/2"
            )));
        }
        if inv_eps < min_inv_eps {
            return Err(Error::InvalidParams(format!(
                "N = {inv_eps} is below the validity threshold N >= {min_inv_eps}"
            )));
        }
        if depth == 0 {
            return Err(Error::InvalidParams("depth L must be at least 1".into()));
        }
        let mut inv_delta: i128 = 1;
        for _ in 0..depth {
            inv_delta = inv_delta.saturating_mul(inv_eps as i128);
            if inv_delta > MAX_INV_DELTA {
                return Err(Error::InvalidParams(format!(
                    "N^L = {inv_eps}^{depth} exceeds the supported range 2^40"
                )));
            }
        }
        Ok(Self {
            inv_eps,
            depth,
            min_inv_eps,
        })
    }

    pub fn inv_eps(&self) -> u64 {
        self.inv_eps
    }

    pub fn depth(&self) -> u32 {
        self.depth
    }

    pub fn min_inv_eps(&self) -> u64 {
        self.min_inv_eps
    }

    pub fn eps(&self) -> f64 {
        1.0 / self.inv_eps as f64
    }

    pub fn eps_rational(&self) -> Rational {
        Rational::new(1, self.inv_eps as i128)
    }

    pub fn eps_max(&self) -> Rational {
        Rational::new(1, self.min_inv_eps as i128)
    }

    /// `1/Δ = N^L`.
    pub fn inv_delta(&self) -> i128 {
        (self.inv_eps as i128).pow(self.depth)
    }

    pub fn delta(&self) -> Rational {
        Rational::new(1, self.inv_delta())
    }

    pub fn delta_f64(&self) -> f64 {
        1.0 / self.inv_delta() as f64
    }

    /// `ε^k` as a float; exact whenever `N` is a power of two.
    pub fn eps_pow(&self, k: u32) -> f64 {
        1.0 / (self.inv_eps as f64).powi(k as i32)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ExactPoint {
    pub x: Rational,
    pub y: Rational,
}

impl ExactPoint {
    pub fn to_f64(&self) -> Point {
        [ratio_to_f64(&self.x), ratio_to_f64(&self.y)]
    }
}

pub fn ratio_to_f64(r: &Rational) -> f64 {
    *r.numer() as f64 / *r.denom() as f64
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct E2Point {
    pub signs: Vec<i8>,
    /// First coordinate in units of `Δ`.
    pub abscissa: i128,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PointKind {
    Lower,
    Upper,
}

/// `E`, indexed as `E1` (left to right) followed by `E2` (left to right).
#[derive(Clone, Debug)]
pub struct FractalSet {
    params: FractalParams,
    half_count: i128,
    e2: Vec<E2Point>,
}

pub fn build_fractal_set(params: FractalParams) -> FractalSet {
    let depth = params.depth() as usize;
    let count = 1usize << depth;
    let e2 = (0..count)
        .map(|j| {
            let signs = e2_signs(j, depth);
            let abscissa = signs_to_units(&signs, &params);
            E2Point { signs, abscissa }
        })
        .collect();
    FractalSet {
        params,
        half_count: params.inv_delta(),
        e2,
    }
}

/// Sign vector of the `j`-th point of `E2` in left-to-right order: the most
/// significant bit of `j` is `s_1`, a set bit meaning `+1`.
pub fn e2_signs(j: usize, depth: usize) -> Vec<i8> {
    (0..depth)
        .map(|l| if (j >> (depth - 1 - l)) & 1 == 1 { 1 } else { -1 })
        .collect()
}

fn signs_to_units(signs: &[i8], params: &FractalParams) -> i128 {
    let n = params.inv_eps() as i128;
    let depth = params.depth();
    signs
        .iter()
        .enumerate()
        .map(|(l, &s)| s as i128 * n.pow(depth - 1 - l as u32))
        .sum()
}

/// `(Σ s_l ε^l, Δ)` for a full-length sign vector.
pub fn signs_to_point(signs: &[i8], params: &FractalParams) -> Result<ExactPoint> {
    if signs.len() != params.depth() as usize {
        return Err(Error::InvalidParams(format!(
            "sign vector has length {}, expected {}",
            signs.len(),
            params.depth()
        )));
    }
    if signs.iter().any(|&s| s != 1 && s != -1) {
        return Err(Error::InvalidParams("sign entries must be +1 or -1".into()));
    }
    let inv_delta = params.inv_delta();
    Ok(ExactPoint {
        x: Rational::new(signs_to_units(signs, params), inv_delta),
        y: Rational::new(1, inv_delta),
    })
}

impl FractalSet {
    pub fn params(&self) -> &FractalParams {
        &self.params
    }

    /// `N^L`: the `E1` abscissae run over `-K..=K` in units of `Δ`.
    pub fn half_count(&self) -> i128 {
        self.half_count
    }

    pub fn e1_len(&self) -> usize {
        2 * self.half_count as usize + 1
    }

    pub fn e2_len(&self) -> usize {
        self.e2.len()
    }

    pub fn len(&self) -> usize {
        self.e1_len() + self.e2_len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn e2(&self) -> &[E2Point] {
        &self.e2
    }

    pub fn kind(&self, index: usize) -> PointKind {
        if index < self.e1_len() {
            PointKind::Lower
        } else {
            PointKind::Upper
        }
    }

    /// Global index of the `j`-th point of `E2`.
    pub fn e2_index(&self, j: usize) -> usize {
        self.e1_len() + j
    }

    /// Global index of the `E1` point with abscissa `k Δ`.
    pub fn e1_index(&self, k: i128) -> Option<usize> {
        (k.abs() <= self.half_count).then(|| (k + self.half_count) as usize)
    }

    /// Global index of the point of `E1` directly below the `j`-th `E2` point.
    pub fn projection(&self, j: usize) -> usize {
        self.e1_index(self.e2[j].abscissa).expect("E2 abscissae lie in [-1, 1]")
    }

    /// Coordinates in units of `Δ`.
    pub fn units(&self, index: usize) -> (i128, i128) {
        if index < self.e1_len() {
            (index as i128 - self.half_count, 0)
        } else {
            (self.e2[index - self.e1_len()].abscissa, 1)
        }
    }

    pub fn point(&self, index: usize) -> ExactPoint {
        let (x, y) = self.units(index);
        let inv_delta = self.params.inv_delta();
        ExactPoint {
            x: Rational::new(x, inv_delta),
            y: Rational::new(y, inv_delta),
        }
    }

    pub fn point_f64(&self, index: usize) -> Point {
        let (x, y) = self.units(index);
        let inv_delta = self.params.inv_delta() as f64;
        [x as f64 / inv_delta, y as f64 / inv_delta]
    }

    pub fn points_f64(&self) -> Vec<Point> {
        (0..self.len()).map(|i| self.point_f64(i)).collect()
    }

    pub fn to_document(&self) -> FractalSetDocument {
        let d = self.params.inv_delta() as i64;
        let ratio = |u: i128| {
            let r = Rational::new(u, d as i128);
            [*r.numer() as i64, *r.denom() as i64]
        };
        FractalSetDocument {
            inv_eps: self.params.inv_eps(),
            depth: self.params.depth(),
            delta: [1, d],
            e1: (0..self.e1_len()).map(|i| ratio(self.units(i).0)).collect(),
            e2: self.e2.iter().map(|p| ratio(p.abscissa)).collect(),
            e2_signs: self.e2.iter().map(|p| p.signs.clone()).collect(),
        }
    }

    /// Rebuilds the set from a document and checks that the listed points
    /// are the ones `(N, L)` generate.
    pub fn from_document(doc: &FractalSetDocument, min_inv_eps: u64) -> Result<Self> {
        let params = FractalParams::with_threshold(doc.inv_eps, doc.depth, min_inv_eps)?;
        let set = build_fractal_set(params);
        if set.to_document() != *doc {
            return Err(Error::Inconsistent(
                "document points do not match the (N, L) construction".into(),
            ));
        }
        Ok(set)
    }
}

/// Reproducible JSON form. Abscissae are `[num, den]` pairs; `E1` sits on
/// the line `x2 = 0` and `E2` on `x2 = Δ`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FractalSetDocument {
    pub inv_eps: u64,
    pub depth: u32,
    pub delta: [i64; 2],
    pub e1: Vec<[i64; 2]>,
    pub e2: Vec<[i64; 2]>,
    pub e2_signs: Vec<Vec<i8>>,
}

#[derive(Clone, Debug, Serialize)]
pub struct ValidationReport {
    /// Smallest pairwise distance, as a float.
    pub min_distance: f64,
    /// Smallest squared pairwise distance in units of `Δ²`.
    pub min_distance_sq_units: i128,
    /// Smallest gap between consecutive `E2` abscissae, in units of `Δ`.
    pub min_e2_gap_units: i128,
    pub projection_ok: bool,
    pub containment_ok: bool,
    pub shadow_ok: bool,
    pub ordering_ok: bool,
    pub separation_ok: bool,
    pub max_shadow_error: f64,
    pub passed: bool,
    pub failures: Vec<String>,
}

/// Checks separation `>= Δ`, the projection property, containment in
/// `[-1,1] × [0,Δ]`, left-to-right ordering of `E2` and the float shadows.
pub fn validate_separation(set: &FractalSet) -> ValidationReport {
    let k = set.half_count();
    let mut failures = Vec::new();

    let mut min_gap = i128::MAX;
    let mut ordering_ok = true;
    for w in set.e2().windows(2) {
        let gap = w[1].abscissa - w[0].abscissa;
        if gap <= 0 {
            ordering_ok = false;
        }
        min_gap = min_gap.min(gap);
    }
    if !ordering_ok {
        failures.push("E2 is not strictly increasing in its first coordinate".into());
    }

    // E1 neighbors are exactly Δ apart; E2 pairs sit on one line; a mixed
    // pair is closest for the E1 point nearest in abscissa.
    let mut min_sq: i128 = if set.e1_len() > 1 { 1 } else { i128::MAX };
    if min_gap != i128::MAX {
        min_sq = min_sq.min(min_gap * min_gap);
    }
    let mut projection_ok = true;
    let mut containment_ok = true;
    for p in set.e2() {
        if p.abscissa.abs() > k {
            containment_ok = false;
        }
        let nearest = p.abscissa.clamp(-k, k);
        let dx = p.abscissa - nearest;
        if dx != 0 {
            projection_ok = false;
        }
        min_sq = min_sq.min(dx * dx + 1);
    }
    if !projection_ok {
        failures.push("some E2 point has no E1 point directly below it".into());
    }
    if !containment_ok {
        failures.push("some point lies outside [-1,1] x [0,Δ]".into());
    }
    let separation_ok = min_sq >= 1;
    if !separation_ok {
        failures.push("pairwise separation below Δ".into());
    }

    let inv_delta = set.params().inv_delta();
    let mut max_shadow_error: f64 = 0.0;
    for i in 0..set.len() {
        let (ux, uy) = set.units(i);
        let p = set.point_f64(i);
        max_shadow_error = max_shadow_error
            .max(float_error(p[0], ux, inv_delta))
            .max(float_error(p[1], uy, inv_delta));
    }
    let shadow_ok = max_shadow_error <= 1e-15;
    if !shadow_ok {
        failures.push(format!("float shadow error {max_shadow_error:.3e}"));
    }

    let passed = failures.is_empty();
    ValidationReport {
        min_distance: (min_sq as f64).sqrt() / inv_delta as f64,
        min_distance_sq_units: min_sq,
        min_e2_gap_units: min_gap,
        projection_ok,
        containment_ok,
        shadow_ok,
        ordering_ok,
        separation_ok,
        max_shadow_error,
        passed,
        failures,
    }
}

/// `|x - num/den|` evaluated exactly and rounded once.
fn float_error(x: f64, num: i128, den: i128) -> f64 {
    if x == 0.0 {
        return (num as f64 / den as f64).abs();
    }
    let bits = x.to_bits();
    let sign: i128 = if bits >> 63 == 1 { -1 } else { 1 };
    let exp = ((bits >> 52) & 0x7ff) as i32;
    let frac = (bits & ((1u64 << 52) - 1)) as i128;
    let (mantissa, shift) = if exp == 0 {
        (frac, 1074)
    } else {
        (frac | (1 << 52), 1075 - exp)
    };
    // x = sign * mantissa * 2^-shift
    if !(0..=70).contains(&shift) {
        return (x - num as f64 / den as f64).abs();
    }
    let lhs = sign * mantissa * den;
    let rhs = num << shift;
    let diff = (lhs - rhs).abs() as f64;
    diff / (den as f64 * 2f64.powi(shift))
}
