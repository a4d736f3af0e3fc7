//! C² Whitney bumps and the partition of unity they normalize to.
//!
//! The pre-bump of a square is a tensor product of 1D profiles that rise
//! from 0 to 1 over a band of width `margin·δ_Q` just outside the square, so
//! it equals 1 on the closed square and vanishes outside `(1 + 2·margin)Q`.
//! With the default margin that support is exactly `1.1Q`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::cz::{CzDecomposition, DyadicSquare};
use crate::{Error, Point, Result};

pub const DEFAULT_MARGIN: f64 = 0.05;

/// Value, gradient and Hessian of a scalar function at a point.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Jet {
    pub value: f64,
    pub grad: [f64; 2],
    pub hess: [[f64; 2]; 2],
}

/// Quintic smoothstep `6t⁵ - 15t⁴ + 10t³`, clamped to `[0, 1]`, with its
/// first two derivatives.
pub fn smoothstep(t: f64) -> [f64; 3] {
    if t <= 0.0 {
        [0.0, 0.0, 0.0]
    } else if t >= 1.0 {
        [1.0, 0.0, 0.0]
    } else {
        let t2 = t * t;
        [
            t2 * t * (10.0 + t * (6.0 * t - 15.0)),
            30.0 * t2 * (t - 1.0) * (t - 1.0),
            60.0 * t * (t - 1.0) * (2.0 * t - 1.0),
        ]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct BumpSpec {
    /// Transition band width as a fraction of the square side.
    pub margin: f64,
}

impl Default for BumpSpec {
    fn default() -> Self {
        Self { margin: DEFAULT_MARGIN }
    }
}

impl BumpSpec {
    /// 1D profile over `[a, a + side]`: value and two derivatives.
    pub fn profile(&self, a: f64, side: f64, x: f64) -> [f64; 3] {
        let w = self.margin * side;
        let b = a + side;
        if x >= a && x <= b {
            return [1.0, 0.0, 0.0];
        }
        if x <= a - w || x >= b + w {
            return [0.0, 0.0, 0.0];
        }
        let inv = 1.0 / w;
        if x < a {
            let [s, d, dd] = smoothstep((x - (a - w)) * inv);
            [s, d * inv, dd * inv * inv]
        } else {
            let [s, d, dd] = smoothstep(((b + w) - x) * inv);
            [s, -d * inv, dd * inv * inv]
        }
    }

    /// Breakpoints of the profile over `[a, a + side]`.
    pub fn breakpoints(&self, a: f64, side: f64) -> [f64; 4] {
        let w = self.margin * side;
        [a - w, a, a + side, a + side + w]
    }

    pub fn pre_bump(&self, sq: &DyadicSquare, x: Point) -> Jet {
        self.pre_bump_at(sq.corner(), sq.side(), x)
    }

    /// Pre-bump of the square with lower-left `corner` and side `s`.
    pub fn pre_bump_at(&self, corner: Point, s: f64, x: Point) -> Jet {
        let [a, b] = corner;
        let p = self.profile(a, s, x[0]);
        if p[0] == 0.0 && p[1] == 0.0 && p[2] == 0.0 {
            return Jet::default();
        }
        let q = self.profile(b, s, x[1]);
        tensor(p, q)
    }
}

pub fn tensor(p: [f64; 3], q: [f64; 3]) -> Jet {
    Jet {
        value: p[0] * q[0],
        grad: [p[1] * q[0], p[0] * q[1]],
        hess: [[p[2] * q[0], p[1] * q[1]], [p[1] * q[1], p[0] * q[2]]],
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Contribution {
    pub square: usize,
    pub theta: Jet,
}

#[derive(Clone, Debug, Default)]
pub struct PouEvaluation {
    pub contributions: Vec<Contribution>,
}

impl PouEvaluation {
    pub fn get(&self, q: usize) -> Option<&Jet> {
        self.contributions.iter().find(|c| c.square == q).map(|c| &c.theta)
    }

    pub fn sum(&self) -> Jet {
        let mut s = Jet::default();
        for c in &self.contributions {
            add_scaled(&mut s, &c.theta, 1.0);
        }
        s
    }
}

pub(crate) fn add_scaled(acc: &mut Jet, j: &Jet, c: f64) {
    acc.value += c * j.value;
    for i in 0..2 {
        acc.grad[i] += c * j.grad[i];
        for k in 0..2 {
            acc.hess[i][k] += c * j.hess[i][k];
        }
    }
}

/// Non-zero pre-bumps at `x` with the index of the square containing `x`.
pub fn bumps_at(decomp: &CzDecomposition, spec: &BumpSpec, x: Point) -> Result<(usize, Vec<(usize, Jet)>)> {
    let home = decomp
        .locate(x)
        .ok_or_else(|| Error::InvalidParams(format!("point {x:?} lies outside Q0")))?;
    let bumps = decomp
        .neighbors(home)
        .iter()
        .filter_map(|&n| {
            let j = spec.pre_bump(decomp.square(n as usize), x);
            (j.value > 0.0).then_some((n as usize, j))
        })
        .collect();
    Ok((home, bumps))
}

/// `θ_Q = φ_Q / Σ φ` and its derivatives by the quotient rule.
pub fn pou_eval(decomp: &CzDecomposition, spec: &BumpSpec, x: Point) -> Result<PouEvaluation> {
    let (_, bumps) = bumps_at(decomp, spec, x)?;
    let mut total = Jet::default();
    for (_, j) in &bumps {
        add_scaled(&mut total, j, 1.0);
    }
    let contributions = bumps
        .iter()
        .map(|&(square, phi)| Contribution {
            square,
            theta: quotient(&phi, &total),
        })
        .collect();
    Ok(PouEvaluation { contributions })
}

/// Jet of `num / den`.
pub fn quotient(num: &Jet, den: &Jet) -> Jet {
    let inv = 1.0 / den.value;
    let v = num.value * inv;
    let g = [
        (num.grad[0] - v * den.grad[0]) * inv,
        (num.grad[1] - v * den.grad[1]) * inv,
    ];
    let mut h = [[0.0; 2]; 2];
    for i in 0..2 {
        for k in 0..2 {
            h[i][k] = (num.hess[i][k] - g[i] * den.grad[k] - g[k] * den.grad[i] - v * den.hess[i][k]) * inv;
        }
    }
    Jet {
        value: v,
        grad: g,
        hess: h,
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct PouReport {
    pub sampled_squares: usize,
    pub sampled_points: usize,
    /// `max |1 - Σ θ_Q|`.
    pub partition_defect: f64,
    /// `max |Σ ∂^α θ_Q| · δ^|α|` for `|α| = 1, 2`.
    pub derivative_sum_defect: [f64; 2],
    /// `max |∂^α θ_Q| · δ_Q^|α|` for `|α| = 0, 1, 2`.
    pub normalized_bounds: [f64; 3],
    pub max_overlap: usize,
    pub fd_points: usize,
    pub fd_max_rel_error: f64,
    pub support_violations: usize,
    pub range_violations: usize,
    pub passed: bool,
    pub failures: Vec<String>,
}

/// Offsets (fractions of the side) sampled along each axis of a square;
/// dense where neighboring transition bands reach in.
pub const SAMPLE_OFFSETS: [f64; 18] = [
    0.0, 0.005, 0.0125, 0.025, 0.0375, 0.05, 0.075, 0.1, 0.3, 0.5, 0.7, 0.9, 0.925, 0.95, 0.9625, 0.975, 0.9875, 0.995,
];

#[derive(Clone, Copy, Debug)]
pub struct PouCheckConfig {
    /// Upper bound on the number of grid sample points; squares are
    /// subsampled with a fixed stride when the decomposition is large.
    pub sample_budget: usize,
    /// Random finite-difference points per generation.
    pub fd_points_per_generation: usize,
    pub seed: u64,
}

impl Default for PouCheckConfig {
    fn default() -> Self {
        Self {
            sample_budget: 400_000,
            fd_points_per_generation: 100,
            seed: 7,
        }
    }
}

#[derive(Default)]
struct Partial {
    points: usize,
    defect: f64,
    sum_defect: [f64; 2],
    bounds: [f64; 3],
    overlap: usize,
    support: usize,
    range: usize,
}

impl Partial {
    fn merge(mut self, o: Partial) -> Partial {
        self.points += o.points;
        self.defect = self.defect.max(o.defect);
        for i in 0..2 {
            self.sum_defect[i] = self.sum_defect[i].max(o.sum_defect[i]);
        }
        for i in 0..3 {
            self.bounds[i] = self.bounds[i].max(o.bounds[i]);
        }
        self.overlap = self.overlap.max(o.overlap);
        self.support += o.support;
        self.range += o.range;
        self
    }
}

fn max_abs2(h: &[[f64; 2]; 2]) -> f64 {
    h[0][0].abs().max(h[0][1].abs()).max(h[1][1].abs()).max(h[1][0].abs())
}

pub fn verify_pou(decomp: &CzDecomposition, spec: &BumpSpec, cfg: &PouCheckConfig) -> PouReport {
    let per_square = SAMPLE_OFFSETS.len() * SAMPLE_OFFSETS.len();
    let wanted = (cfg.sample_budget / per_square).max(1);
    let stride = decomp.len().div_ceil(wanted).max(1);
    let sampled: Vec<usize> = (0..decomp.len()).step_by(stride).collect();

    let partial = sampled
        .par_iter()
        .map(|&q| {
            let mut acc = Partial::default();
            let sq = decomp.square(q);
            let [a, b] = sq.corner();
            let s = sq.side();
            for &ox in &SAMPLE_OFFSETS {
                for &oy in &SAMPLE_OFFSETS {
                    let x = [a + ox * s, b + oy * s];
                    let Ok(ev) = pou_eval(decomp, spec, x) else {
                        continue;
                    };
                    acc.points += 1;
                    let sum = ev.sum();
                    acc.defect = acc.defect.max((1.0 - sum.value).abs());
                    acc.sum_defect[0] = acc.sum_defect[0].max(sum.grad[0].abs().max(sum.grad[1].abs()) * s);
                    acc.sum_defect[1] = acc.sum_defect[1].max(max_abs2(&sum.hess) * s * s);
                    acc.overlap = acc.overlap.max(ev.contributions.len());
                    for c in &ev.contributions {
                        let d = decomp.square(c.square).side();
                        let t = &c.theta;
                        if !(0.0..=1.0 + 1e-15).contains(&t.value) {
                            acc.range += 1;
                        }
                        acc.bounds[0] = acc.bounds[0].max(t.value.abs());
                        acc.bounds[1] = acc.bounds[1].max(t.grad[0].abs().max(t.grad[1].abs()) * d);
                        acc.bounds[2] = acc.bounds[2].max(max_abs2(&t.hess) * d * d);
                    }
                }
            }
            // ring just outside 1.1Q
            let [x0, x1, y0, y1] = sq.dilated(1.1 + 1e-6);
            for i in 0..=16 {
                let t = i as f64 / 16.0;
                let along = [x0 + t * (x1 - x0), y0 + t * (y1 - y0)];
                for x in [[along[0], y0], [along[0], y1], [x0, along[1]], [x1, along[1]]] {
                    if spec.pre_bump(sq, x).value != 0.0 {
                        acc.support += 1;
                    }
                }
            }
            acc
        })
        .reduce(Partial::default, Partial::merge);

    let (fd_points, fd_err) = finite_difference_check(decomp, spec, cfg);

    let mut failures = Vec::new();
    if partial.defect >= 1e-10 {
        failures.push(format!("partition defect {:.3e}", partial.defect));
    }
    if partial.sum_defect.iter().any(|d| *d >= 1e-8) {
        failures.push(format!("derivative sums {:?}", partial.sum_defect));
    }
    if partial.support > 0 {
        failures.push(format!(
            "{} pre-bump samples outside 1.1Q are non-zero",
            partial.support
        ));
    }
    if partial.range > 0 {
        failures.push(format!("{} samples with θ outside [0, 1]", partial.range));
    }
    if fd_err >= 1e-6 {
        failures.push(format!("finite-difference mismatch {fd_err:.3e}"));
    }
    PouReport {
        sampled_squares: sampled.len(),
        sampled_points: partial.points,
        partition_defect: partial.defect,
        derivative_sum_defect: partial.sum_defect,
        normalized_bounds: partial.bounds,
        max_overlap: partial.overlap,
        fd_points,
        fd_max_rel_error: fd_err,
        support_violations: partial.support,
        range_violations: partial.range,
        passed: failures.is_empty(),
        failures,
    }
}

/// Fourth-order central differences of the analytic `θ_Q` (values for the
/// gradient, gradients for the Hessian), step `1e-5·δ` of the home square.
/// Errors are relative to `max(|analytic|, δ^-|α|)`. Points within three
/// steps of a band breakpoint, where the third derivative jumps, are
/// skipped and redrawn.
fn finite_difference_check(decomp: &CzDecomposition, spec: &BumpSpec, cfg: &PouCheckConfig) -> (usize, f64) {
    let mut by_generation: std::collections::BTreeMap<u32, Vec<usize>> = Default::default();
    for (q, sq) in decomp.squares().iter().enumerate() {
        by_generation.entry(sq.generation).or_default().push(q);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut points = Vec::new();
    for squares in by_generation.values() {
        let mut accepted = 0;
        let mut attempts = 0;
        while accepted < cfg.fd_points_per_generation && attempts < 100 * cfg.fd_points_per_generation {
            attempts += 1;
            let q = squares[rng.gen_range(0..squares.len())];
            let sq = decomp.square(q);
            let [a, b] = sq.corner();
            // half the points land in the outer tenth where bands overlap
            let mut off = || {
                if rng.gen_bool(0.5) {
                    let t = rng.gen_range(0.0..0.1);
                    if rng.gen_bool(0.5) {
                        t
                    } else {
                        1.0 - t
                    }
                } else {
                    rng.gen_range(0.0..1.0)
                }
            };
            let (ox, oy) = (off(), off());
            let x = [a + ox * sq.side(), b + oy * sq.side()];
            if near_breakpoint(decomp, spec, q, x, 3e-5 * sq.side()) {
                continue;
            }
            accepted += 1;
            points.push(x);
        }
    }
    let worst = points
        .par_iter()
        .map(|&x| fd_error_at(decomp, spec, x).unwrap_or(0.0))
        .reduce(|| 0.0, f64::max);
    (points.len(), worst)
}

fn near_breakpoint(decomp: &CzDecomposition, spec: &BumpSpec, home: usize, x: Point, tol: f64) -> bool {
    decomp.neighbors(home).iter().any(|&n| {
        let sq = decomp.square(n as usize);
        let c = sq.corner();
        (0..2).any(|i| {
            spec.breakpoints(c[i], sq.side())
                .iter()
                .any(|bp| (x[i] - bp).abs() < tol)
        })
    })
}

fn fd_error_at(decomp: &CzDecomposition, spec: &BumpSpec, x: Point) -> Result<f64> {
    let home = decomp.locate(x).expect("sample inside Q0");
    let delta = decomp.square(home).side();
    let h = 1e-5 * delta;
    let ev = pou_eval(decomp, spec, x)?;
    let shifted = |i: usize, t: f64| {
        let mut y = x;
        y[i] += t * h;
        pou_eval(decomp, spec, y)
    };
    let mut stencil = Vec::with_capacity(2);
    for i in 0..2 {
        stencil.push([shifted(i, -2.0)?, shifted(i, -1.0)?, shifted(i, 1.0)?, shifted(i, 2.0)?]);
    }
    let diff = |v: [f64; 4]| (v[0] - 8.0 * v[1] + 8.0 * v[2] - v[3]) / (12.0 * h);
    let mut worst: f64 = 0.0;
    for c in &ev.contributions {
        let q = c.square;
        let scale = decomp.square(q).side();
        for (i, st) in stencil.iter().enumerate() {
            let jets = st.each_ref().map(|e| e.get(q).copied().unwrap_or_default());
            let fd = diff(jets.map(|j| j.value));
            let an = c.theta.grad[i];
            worst = worst.max((fd - an).abs() / an.abs().max(1.0 / scale));
            for k in 0..2 {
                let fd = diff(jets.map(|j| j.grad[k]));
                let an = c.theta.hess[i][k];
                worst = worst.max((fd - an).abs() / an.abs().max(1.0 / (scale * scale)));
            }
        }
    }
    Ok(worst)
}
