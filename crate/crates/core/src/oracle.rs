//! Reference quantities: a grid-discretized minimal extension of `f` and
//! analytic test functions `G` with computable seminorm.
//!
//! The grid covers `[-4,4]^2` with spacing `h = Δ/m`, so every point of `E`
//! is a node. The discrete objective is
//! `Σ_nodes (D11² + 2 D12² + D22²)^(p/2) h²` with second differences on a
//! 3×3 block centered at the node, the block shifted inward at the border.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::fractal_set::{FractalParams, FractalSet};
use crate::interpolant::AffinePolynomial;
use crate::pou::Jet;
use crate::quadrature::{adaptive_rect, GaussLegendre};
use crate::{Error, Point, Result};

/// `A (1 - |x-c|²/R²)³` inside the disk, 0 outside. C² across the circle.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RadialBump {
    pub center: Point,
    pub radius: f64,
    pub amplitude: f64,
}

impl RadialBump {
    pub fn jet(&self, x: Point) -> Jet {
        let r2 = self.radius * self.radius;
        let d = [x[0] - self.center[0], x[1] - self.center[1]];
        let u = 1.0 - (d[0] * d[0] + d[1] * d[1]) / r2;
        if u <= 0.0 {
            return Jet::default();
        }
        let a = self.amplitude;
        let g = -6.0 * a * u * u / r2;
        let mut hess = [[0.0; 2]; 2];
        for i in 0..2 {
            for k in 0..2 {
                hess[i][k] = 24.0 * a * u * d[i] * d[k] / (r2 * r2);
            }
            hess[i][i] += g;
        }
        Jet {
            value: a * u * u * u,
            grad: [g * d[0], g * d[1]],
            hess,
        }
    }

    /// `‖b‖_{L^{2,p}}^p = 2π R^(2-2p) (6|A|)^p ∫_0^1 ((u² - 4s²u)² + u⁴)^(p/2) s ds`
    /// with `u = 1 - s²`: the Hessian of a radial function has eigenvalues
    /// `b''` and `b'/r`.
    pub fn seminorm_pow(&self, p: f64) -> f64 {
        let rule = GaussLegendre::new(20);
        let profile = |s: f64| {
            let u = 1.0 - s * s;
            let e1 = u * u - 4.0 * s * s * u;
            (e1 * e1 + u.powi(4)).powf(0.5 * p) * s
        };
        let mut integral = 0.0;
        for k in 0..16 {
            integral += rule.integrate(k as f64 / 16.0, (k + 1) as f64 / 16.0, profile);
        }
        2.0 * std::f64::consts::PI * self.radius.powf(2.0 - 2.0 * p) * (6.0 * self.amplitude.abs()).powf(p) * integral
    }

    fn overlaps(&self, other: &Self) -> bool {
        let d = (self.center[0] - other.center[0]).hypot(self.center[1] - other.center[1]);
        d < self.radius + other.radius
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnalyticTestFunction {
    pub affine: AffinePolynomial,
    pub bumps: Vec<RadialBump>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TestFunctionConfig {
    pub bump_count: usize,
    pub radius: [f64; 2],
    pub amplitude: [f64; 2],
    /// Bump centers are drawn from `[-cx, cx] × [-cy, cy]`.
    pub center_box: [f64; 2],
    /// Affine coefficients are drawn from `[-s, s]`.
    pub affine_scale: f64,
    /// Redraw overlapping bumps so that seminorms add up exactly.
    pub disjoint: bool,
}

impl Default for TestFunctionConfig {
    fn default() -> Self {
        Self {
            bump_count: 3,
            radius: [0.25, 0.8],
            amplitude: [-1.0, 1.0],
            center_box: [1.5, 0.6],
            affine_scale: 1.0,
            disjoint: true,
        }
    }
}

pub fn sample_test_function(seed: u64, config: &TestFunctionConfig) -> Result<AnalyticTestFunction> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = config.affine_scale;
    let affine = if s > 0.0 {
        AffinePolynomial::new(rng.gen_range(-s..=s), rng.gen_range(-s..=s), rng.gen_range(-s..=s))
    } else {
        AffinePolynomial::default()
    };
    let [cx, cy] = config.center_box;
    let mut bumps: Vec<RadialBump> = Vec::with_capacity(config.bump_count);
    let mut attempts = 0;
    while bumps.len() < config.bump_count {
        attempts += 1;
        if attempts > 10_000 {
            return Err(Error::InvalidParams(format!(
                "cannot place {} disjoint bumps",
                config.bump_count
            )));
        }
        let b = RadialBump {
            center: [rng.gen_range(-cx..=cx), rng.gen_range(-cy..=cy)],
            radius: rng.gen_range(config.radius[0]..=config.radius[1]),
            amplitude: rng.gen_range(config.amplitude[0]..=config.amplitude[1]),
        };
        let inside = b.center[0].abs() + b.radius < 4.0 && b.center[1].abs() + b.radius < 4.0;
        if inside && !(config.disjoint && bumps.iter().any(|o| o.overlaps(&b))) {
            bumps.push(b);
        }
    }
    Ok(AnalyticTestFunction { affine, bumps })
}

impl AnalyticTestFunction {
    pub fn affine(affine: AffinePolynomial) -> Self {
        Self { affine, bumps: vec![] }
    }

    pub fn jet(&self, x: Point) -> Jet {
        let mut j = Jet {
            value: self.affine.eval(x),
            grad: self.affine.grad(),
            hess: [[0.0; 2]; 2],
        };
        for b in &self.bumps {
            crate::pou::add_scaled(&mut j, &b.jet(x), 1.0);
        }
        j
    }

    pub fn value(&self, x: Point) -> f64 {
        self.jet(x).value
    }

    fn disjoint(&self) -> bool {
        self.bumps
            .iter()
            .enumerate()
            .all(|(i, a)| self.bumps[i + 1..].iter().all(|b| !a.overlaps(b)))
    }

    /// `‖G‖^p_{L^{2,p}(R^2)}`: a sum of radial integrals for disjoint bumps,
    /// adaptive 2D quadrature over the bumps' bounding box otherwise.
    pub fn seminorm_pow(&self, p: f64) -> f64 {
        if self.bumps.is_empty() {
            return 0.0;
        }
        if self.disjoint() {
            return self.bumps.iter().map(|b| b.seminorm_pow(p)).sum();
        }
        let mut bbox = [f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY];
        for b in &self.bumps {
            bbox[0] = bbox[0].min(b.center[0] - b.radius);
            bbox[1] = bbox[1].max(b.center[0] + b.radius);
            bbox[2] = bbox[2].min(b.center[1] - b.radius);
            bbox[3] = bbox[3].max(b.center[1] + b.radius);
        }
        let rough: f64 = self.bumps.iter().map(|b| b.seminorm_pow(p)).sum();
        let f = |x: f64, y: f64| hessian_pow(&self.jet([x, y]).hess, p);
        adaptive_rect(&GaussLegendre::new(6), bbox, 1e-10 * rough.max(1e-300), 12, &f)
    }

    pub fn seminorm(&self, p: f64) -> f64 {
        self.seminorm_pow(p).powf(1.0 / p)
    }
}

/// `(H11² + 2 H12² + H22²)^(p/2)`.
pub fn hessian_pow(h: &[[f64; 2]; 2], p: f64) -> f64 {
    (h[0][0] * h[0][0] + 2.0 * h[0][1] * h[0][1] + h[1][1] * h[1][1]).powf(0.5 * p)
}

/// `G` at every point of `E`, indexed like the set.
pub fn restrict(g: &AnalyticTestFunction, set: &FractalSet) -> Vec<f64> {
    (0..set.len()).map(|i| g.value(set.point_f64(i))).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridSpec {
    pub inv_delta: i128,
    /// `Δ / h`.
    pub per_delta: u32,
    /// Nodes per side.
    pub side: usize,
}

impl GridSpec {
    pub fn new(params: &FractalParams, per_delta: u32, max_side: usize) -> Result<Self> {
        if per_delta == 0 {
            return Err(Error::InvalidParams("grid spacing must divide Δ".into()));
        }
        let inv_delta = params.inv_delta();
        let cells = 8 * inv_delta * per_delta as i128;
        if cells + 1 > max_side as i128 {
            return Err(Error::InvalidParams(format!(
                "grid with h = Δ/{per_delta} needs {} nodes per side (cap {max_side})",
                cells + 1
            )));
        }
        Ok(Self {
            inv_delta,
            per_delta,
            side: cells as usize + 1,
        })
    }

    pub fn h(&self) -> f64 {
        1.0 / (self.inv_delta as f64 * self.per_delta as f64)
    }

    pub fn len(&self) -> usize {
        self.side * self.side
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn node(&self, i: usize, j: usize) -> usize {
        j * self.side + i
    }

    pub fn coords(&self, k: usize) -> Point {
        let h = self.h();
        [-4.0 + (k % self.side) as f64 * h, -4.0 + (k / self.side) as f64 * h]
    }

    /// Node carrying the point of `E` with coordinates `(x, y)` in units of Δ.
    pub fn node_of_units(&self, x: i128, y: i128) -> usize {
        let m = self.per_delta as i128;
        let off = 4 * self.inv_delta * m;
        self.node((x * m + off) as usize, (y * m + off) as usize)
    }

    /// Lower-left node of the 3×3 block used at node `k`.
    fn block_origin(&self, k: usize) -> (usize, usize) {
        let i = (k % self.side).clamp(1, self.side - 2);
        let j = (k / self.side).clamp(1, self.side - 2);
        (i - 1, j - 1)
    }

    fn block(&self, k: usize) -> [usize; 9] {
        let (i0, j0) = self.block_origin(k);
        let mut out = [0; 9];
        for dj in 0..3 {
            for di in 0..3 {
                out[3 * dj + di] = self.node(i0 + di, j0 + dj);
            }
        }
        out
    }
}

/// `(D11, D12, D22)·h²` as rows over the 3×3 block (index `3·dj + di`).
const STENCIL: [[f64; 9]; 3] = [
    [0.0, 0.0, 0.0, 1.0, -2.0, 1.0, 0.0, 0.0, 0.0],
    [0.25, 0.0, -0.25, 0.0, 0.0, 0.0, -0.25, 0.0, 0.25],
    [0.0, 1.0, 0.0, 0.0, -2.0, 0.0, 0.0, 1.0, 0.0],
];
const METRIC: [f64; 3] = [1.0, 2.0, 1.0];

#[derive(Clone, Debug, Serialize)]
pub struct GridFunction {
    pub spec: GridSpec,
    pub values: Vec<f64>,
    /// Nodes that coincide with points of `E`, sorted.
    pub constrained: Vec<usize>,
}

impl GridFunction {
    /// Grid function equal to `f` on the nodes of `E` and to `fill`
    /// elsewhere.
    pub fn with_data(spec: GridSpec, set: &FractalSet, f: &[f64], fill: impl Fn(Point) -> f64) -> Result<Self> {
        if f.len() != set.len() {
            return Err(Error::MissingData(format!(
                "{} values given for {} points",
                f.len(),
                set.len()
            )));
        }
        if spec.inv_delta != set.params().inv_delta() {
            return Err(Error::Inconsistent("grid and set have different Δ".into()));
        }
        let mut values: Vec<f64> = (0..spec.len()).map(|k| fill(spec.coords(k))).collect();
        let mut constrained = Vec::with_capacity(set.len());
        for (i, &fi) in f.iter().enumerate() {
            let (x, y) = set.units(i);
            let k = spec.node_of_units(x, y);
            values[k] = fi;
            constrained.push(k);
        }
        constrained.sort_unstable();
        Ok(Self {
            spec,
            values,
            constrained,
        })
    }

    fn differences(&self, k: usize) -> [f64; 3] {
        let inv_h2 = 1.0 / (self.spec.h() * self.spec.h());
        let block = self.spec.block(k);
        let mut v = [0.0; 3];
        for (r, row) in STENCIL.iter().enumerate() {
            v[r] = row.iter().zip(&block).map(|(c, &n)| c * self.values[n]).sum::<f64>() * inv_h2;
        }
        v
    }
}

/// `Σ_nodes (D11² + 2 D12² + D22²)^(p/2) h²`.
pub fn discrete_seminorm(g: &GridFunction, p: f64) -> f64 {
    smoothed_objective(g, p, 0.0)
}

fn smoothed_objective(g: &GridFunction, p: f64, mu: f64) -> f64 {
    let h2 = g.spec.h() * g.spec.h();
    let mu2 = mu * mu;
    (0..g.spec.len())
        .map(|k| {
            let v = g.differences(k);
            let s = METRIC[0] * v[0] * v[0] + METRIC[1] * v[1] * v[1] + METRIC[2] * v[2] * v[2] + mu2;
            if s > 0.0 {
                s.powf(0.5 * p)
            } else {
                0.0
            }
        })
        .sum::<f64>()
        * h2
}

/// Symmetric positive definite band matrix, lower half stored row-wise:
/// row `i` holds columns `i - b ..= i` at positions `0 ..= b`.
struct Band {
    n: usize,
    b: usize,
    data: Vec<f64>,
}

impl Band {
    fn zeros(n: usize, b: usize) -> Self {
        Self {
            n,
            b,
            data: vec![0.0; n * (b + 1)],
        }
    }

    fn add(&mut self, i: usize, j: usize, v: f64) {
        let (i, j) = if i >= j { (i, j) } else { (j, i) };
        debug_assert!(i - j <= self.b);
        self.data[i * (self.b + 1) + j + self.b - i] += v;
    }

    /// In-place Cholesky `A = L Lᵀ`.
    fn factor(&mut self) -> Result<()> {
        let w = self.b + 1;
        for i in 0..self.n {
            let lo = i.saturating_sub(self.b);
            for j in lo..=i {
                let k0 = lo.max(j.saturating_sub(self.b));
                let (head, row_i) = self.data.split_at_mut(i * w);
                let ri = &row_i[..w];
                let dot: f64 = if j == i {
                    ri[k0 + self.b - i..self.b].iter().map(|x| x * x).sum()
                } else {
                    let rj = &head[j * w..(j + 1) * w];
                    ri[k0 + self.b - i..j + self.b - i]
                        .iter()
                        .zip(&rj[k0 + self.b - j..self.b])
                        .map(|(a, b)| a * b)
                        .sum()
                };
                let pos = i * w + j + self.b - i;
                let s = self.data[pos] - dot;
                if j == i {
                    if !(s > 0.0) {
                        return Err(Error::Geometry(format!("band matrix not positive definite at row {i}")));
                    }
                    self.data[pos] = s.sqrt();
                } else {
                    self.data[pos] = s / self.data[j * w + self.b];
                }
            }
        }
        Ok(())
    }

    fn solve(&self, rhs: &mut [f64]) {
        let w = self.b + 1;
        for i in 0..self.n {
            let lo = i.saturating_sub(self.b);
            let row = &self.data[i * w..(i + 1) * w];
            let s: f64 = (lo..i).map(|k| row[k + self.b - i] * rhs[k]).sum();
            rhs[i] = (rhs[i] - s) / row[self.b];
        }
        for i in (0..self.n).rev() {
            rhs[i] /= self.data[i * w + self.b];
            let v = rhs[i];
            let lo = i.saturating_sub(self.b);
            let row = &self.data[i * w..(i + 1) * w];
            for k in lo..i {
                rhs[k] -= row[k + self.b - i] * v;
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleConfig {
    /// `Δ / h`.
    pub per_delta: u32,
    pub max_side: usize,
    /// Relative objective decrease that ends a continuation stage.
    pub tol: f64,
    pub max_iterations: usize,
    /// Continuation stages for `p < 2`.
    pub stages: usize,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self {
            per_delta: 2,
            max_side: 1025,
            tol: 1e-12,
            max_iterations: 400,
            stages: 4,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct OracleResult {
    pub grid: GridFunction,
    pub p: f64,
    /// Unsmoothed objective at the returned grid function.
    pub objective: f64,
    pub iterations: usize,
    /// Largest free-node gradient entry of the unsmoothed objective,
    /// relative to the largest entry of the p = 2 start.
    pub residual: f64,
    /// Unsmoothed objective after each stage.
    pub stage_objectives: Vec<f64>,
}

struct Newton<'a> {
    g: &'a GridFunction,
    free: Vec<bool>,
    p: f64,
    mu: f64,
}

impl Newton<'_> {
    /// Gradient and (optionally) Hessian of the smoothed objective.
    fn derivatives(&self, values: &[f64], hessian: bool) -> (Vec<f64>, Option<Band>) {
        let spec = &self.g.spec;
        let h = spec.h();
        let inv_h2 = 1.0 / (h * h);
        let n = spec.len();
        let mut grad = vec![0.0; n];
        let mut band = hessian.then(|| Band::zeros(n, 2 * spec.side + 2));
        let (p, mu2) = (self.p, self.mu * self.mu);
        for k in 0..n {
            let block = spec.block(k);
            let mut v = [0.0; 3];
            for r in 0..3 {
                v[r] = STENCIL[r].iter().zip(&block).map(|(c, &m)| c * values[m]).sum::<f64>() * inv_h2;
            }
            let mv = [METRIC[0] * v[0], METRIC[1] * v[1], METRIC[2] * v[2]];
            let s = v[0] * mv[0] + v[1] * mv[1] + v[2] * mv[2] + mu2;
            if s <= 0.0 && p < 2.0 {
                continue;
            }
            // φ = s^(p/2): ∇φ = p s^(p/2-1) M v
            let a = if p == 2.0 { 2.0 } else { p * s.powf(0.5 * p - 1.0) };
            // weight h² from the sum, 1/h² from each difference
            let cg: Vec<f64> = (0..9)
                .map(|c| (0..3).map(|r| STENCIL[r][c] * mv[r]).sum::<f64>() * a)
                .collect();
            for c in 0..9 {
                grad[block[c]] += cg[c];
            }
            if let Some(band) = band.as_mut() {
                // ∇²φ = p s^(p/2-1) M + p (p-2) s^(p/2-2) (Mv)(Mv)ᵀ, times 1/h²
                let bcoef = if p == 2.0 {
                    0.0
                } else {
                    p * (p - 2.0) * s.powf(0.5 * p - 2.0)
                };
                let cm: Vec<f64> = (0..9)
                    .map(|c| (0..3).map(|r| STENCIL[r][c] * mv[r]).sum::<f64>())
                    .collect();
                for c1 in 0..9 {
                    let n1 = block[c1];
                    if !self.free[n1] {
                        continue;
                    }
                    for c2 in 0..=c1 {
                        let n2 = block[c2];
                        if !self.free[n2] {
                            continue;
                        }
                        let mut hv = bcoef * cm[c1] * cm[c2];
                        for r in 0..3 {
                            hv += a * METRIC[r] * STENCIL[r][c1] * STENCIL[r][c2];
                        }
                        hv *= inv_h2;
                        band.add(n1, n2, hv);
                    }
                }
            }
        }
        for (k, gk) in grad.iter_mut().enumerate() {
            if !self.free[k] {
                *gk = 0.0;
            }
        }
        if let Some(band) = band.as_mut() {
            for k in 0..n {
                if !self.free[k] {
                    band.add(k, k, 1.0);
                }
            }
        }
        (grad, band)
    }

    fn objective(&self, values: &[f64]) -> f64 {
        let g = GridFunction {
            spec: self.g.spec,
            values: values.to_vec(),
            constrained: vec![],
        };
        smoothed_objective(&g, self.p, self.mu)
    }

    /// Damped Newton until the relative decrease drops below `tol`.
    fn run(&self, values: &mut Vec<f64>, tol: f64, max_iter: usize) -> Result<usize> {
        let mut f0 = self.objective(values);
        for it in 0..max_iter {
            let (grad, band) = self.derivatives(values, true);
            let mut band = band.expect("hessian requested");
            band.factor()?;
            let mut step: Vec<f64> = grad.iter().map(|g| -g).collect();
            band.solve(&mut step);
            let slope: f64 = grad.iter().zip(&step).map(|(g, s)| g * s).sum();
            if slope >= 0.0 {
                return Ok(it);
            }
            let mut t = 1.0;
            let mut accepted = None;
            for _ in 0..60 {
                let trial: Vec<f64> = values.iter().zip(&step).map(|(v, s)| v + t * s).collect();
                let f1 = self.objective(&trial);
                if f1 <= f0 + 1e-4 * t * slope {
                    accepted = Some((trial, f1));
                    break;
                }
                t *= 0.5;
            }
            let Some((trial, f1)) = accepted else {
                return Ok(it + 1);
            };
            *values = trial;
            let decrease = f0 - f1;
            f0 = f1;
            // Newton decrement is the reliable stop near the optimum
            if decrease <= tol * f1.abs() && -slope <= 2.0 * tol * f1.abs().max(1e-300) {
                return Ok(it + 1);
            }
            if -slope <= 1e-15 * f1.abs() {
                return Ok(it + 1);
            }
        }
        Err(Error::NonConvergence {
            iterations: max_iter,
            residual: f0,
            best: values.clone(),
        })
    }
}

/// Minimizes the discrete objective over grid functions equal to `f` on `E`.
pub fn grid_minimal_extension(f: &[f64], set: &FractalSet, p: f64, config: &OracleConfig) -> Result<OracleResult> {
    if !(p > 1.0 && p <= 2.0) {
        return Err(Error::InvalidParams(format!("p = {p} outside (1, 2]")));
    }
    let spec = GridSpec::new(set.params(), config.per_delta, config.max_side)?;
    let mut grid = GridFunction::with_data(spec, set, f, |_| 0.0)?;
    let mut free = vec![true; spec.len()];
    for &k in &grid.constrained {
        free[k] = false;
    }
    // p = 2 start: one exact Newton step on the quadratic, then a polish
    let quad = Newton {
        g: &grid,
        free: free.clone(),
        p: 2.0,
        mu: 0.0,
    };
    let mut values = grid.values.clone();
    let mut iterations = 0;
    for _ in 0..2 {
        let (grad, band) = quad.derivatives(&values, true);
        let mut band = band.expect("hessian requested");
        band.factor()?;
        let mut step: Vec<f64> = grad.iter().map(|g| -g).collect();
        band.solve(&mut step);
        values.iter_mut().zip(&step).for_each(|(v, s)| *v += s);
        iterations += 1;
    }
    let start_grad = quad.derivatives(&grid.values, false).0;
    let grad_scale = start_grad.iter().fold(0.0f64, |m, g| m.max(g.abs())).max(1e-300);
    let mut stage_objectives = Vec::new();
    grid.values = values.clone();
    // RMS second difference of the p = 2 solution; below the rounding level
    // of the data the minimizer is affine and there is nothing left to do
    let scale = (discrete_seminorm(&grid, 2.0) / (spec.len() as f64 * spec.h() * spec.h())).sqrt();
    let data_scale = f.iter().fold(0.0f64, |m, v| m.max(v.abs())) * spec.inv_delta as f64 * spec.inv_delta as f64;
    if p < 2.0 && scale > 1e-12 * data_scale {
        for stage in 0..config.stages.max(1) {
            let mu = scale * 10f64.powi(-2 * stage as i32);
            let newton = Newton {
                g: &grid,
                free: free.clone(),
                p,
                mu,
            };
            let last = stage + 1 == config.stages.max(1);
            let tol = if last { config.tol } else { config.tol.max(1e-8) };
            iterations += newton.run(&mut values, tol, config.max_iterations)?;
            grid.values = values.clone();
            stage_objectives.push(discrete_seminorm(&grid, p));
        }
    }
    grid.values = values;
    let objective = discrete_seminorm(&grid, p);
    if stage_objectives.is_empty() {
        stage_objectives.push(objective);
    }
    let exact = Newton {
        g: &grid,
        free,
        p,
        mu: 0.0,
    };
    let grad = exact.derivatives(&grid.values, false).0;
    let residual = grad.iter().fold(0.0f64, |m, g| m.max(g.abs())) / grad_scale;
    Ok(OracleResult {
        grid,
        p,
        objective,
        iterations,
        residual,
        stage_objectives,
    })
}

/// Smallest `objective(u + δ) - objective(u)` over `count` seeded feasible
/// perturbations `δ` (zero on `E`) of relative size `amplitude`.
pub fn perturbation_gap(result: &OracleResult, count: usize, amplitude: f64, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spec = result.grid.spec;
    let scale = result.grid.values.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1.0);
    let mut fixed = vec![false; spec.len()];
    for &k in &result.grid.constrained {
        fixed[k] = true;
    }
    let mut worst = f64::INFINITY;
    for _ in 0..count {
        // a smooth random bump so the perturbation is not just grid noise
        let c = [rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0)];
        let r = rng.gen_range(0.1..1.0);
        let a = amplitude * scale * rng.gen_range(-1.0..1.0);
        let noise = rng.gen_range(0.0..1.0) * amplitude * scale * 1e-3;
        let mut g = result.grid.clone();
        for k in 0..spec.len() {
            if fixed[k] {
                continue;
            }
            let x = spec.coords(k);
            let b = RadialBump {
                center: c,
                radius: r,
                amplitude: a,
            };
            g.values[k] += b.jet(x).value + noise * rng.gen_range(-1.0..1.0);
        }
        worst = worst.min(discrete_seminorm(&g, result.p) - result.objective);
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fractal_set::build_fractal_set;

    fn set(n: u64, l: u32) -> FractalSet {
        build_fractal_set(FractalParams::with_threshold(n, l, 4).unwrap())
    }

    #[test]
    fn bump_jet_matches_finite_differences() {
        let b = RadialBump {
            center: [0.2, -0.1],
            radius: 0.7,
            amplitude: 1.3,
        };
        let x = [0.5, 0.15];
        let j = b.jet(x);
        let h = 1e-5;
        for i in 0..2 {
            let mut xp = x;
            let mut xm = x;
            xp[i] += h;
            xm[i] -= h;
            let g = (b.jet(xp).value - b.jet(xm).value) / (2.0 * h);
            assert!((g - j.grad[i]).abs() < 1e-8);
            for k in 0..2 {
                let d = (b.jet(xp).grad[k] - b.jet(xm).grad[k]) / (2.0 * h);
                assert!((d - j.hess[i][k]).abs() < 1e-7);
            }
        }
        assert_eq!(b.jet([2.0, 2.0]), Jet::default());
    }

    #[test]
    fn radial_seminorm_matches_plane_quadrature() {
        let b = RadialBump {
            center: [0.3, 0.1],
            radius: 0.6,
            amplitude: -0.8,
        };
        for p in [1.2, 1.5, 2.0] {
            let f = |x: f64, y: f64| hessian_pow(&b.jet([x, y]).hess, p);
            let plane = adaptive_rect(&GaussLegendre::new(6), [-0.3, 0.9, -0.5, 0.7], 1e-11, 12, &f);
            let radial = b.seminorm_pow(p);
            assert!((plane - radial).abs() < 1e-7 * radial, "p={p}: {plane} vs {radial}");
        }
    }

    #[test]
    fn test_function_properties() {
        let zero = TestFunctionConfig {
            bump_count: 0,
            ..Default::default()
        };
        let g = sample_test_function(3, &zero).unwrap();
        assert_eq!(g.seminorm(1.5), 0.0);
        let one = TestFunctionConfig {
            bump_count: 1,
            ..Default::default()
        };
        let g = sample_test_function(5, &one).unwrap();
        let mut g3 = g.clone();
        g3.bumps[0].amplitude *= 3.0;
        assert!((g3.seminorm(1.5) - 3.0 * g.seminorm(1.5)).abs() < 1e-12 * g3.seminorm(1.5));
        let two = sample_test_function(9, &TestFunctionConfig::default()).unwrap();
        let parts: f64 = two.bumps.iter().map(|b| b.seminorm_pow(1.4)).sum();
        assert_eq!(two.seminorm_pow(1.4), parts);
        // the overlap path agrees with the radial sum on disjoint bumps
        let mut overlapping = two.clone();
        overlapping.bumps.push(RadialBump {
            center: [3.5, 3.5],
            radius: 0.1,
            amplitude: 0.0,
        });
        overlapping.bumps.push(RadialBump {
            center: [3.5, 3.45],
            radius: 0.1,
            amplitude: 0.0,
        });
        let quad = overlapping.seminorm_pow(1.4);
        assert!((quad - parts).abs() < 1e-6 * parts, "{quad} vs {parts}");
    }

    #[test]
    fn restrict_matches_pointwise() {
        let s = set(4, 2);
        for seed in [1, 2, 3] {
            let g = sample_test_function(seed, &TestFunctionConfig::default()).unwrap();
            let f = restrict(&g, &s);
            for i in (0..s.len()).step_by(7) {
                let x = s.point_f64(i);
                let direct = g.affine.eval(x) + g.bumps.iter().map(|b| b.jet(x).value).sum::<f64>();
                assert!((f[i] - direct).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn discrete_seminorm_examples() {
        let s = set(4, 1);
        let spec = GridSpec::new(s.params(), 1, 1025).unwrap();
        let f = vec![0.0; s.len()];
        let affine = GridFunction {
            spec,
            values: (0..spec.len())
                .map(|k| 1.0 + 2.0 * spec.coords(k)[0] - spec.coords(k)[1])
                .collect(),
            constrained: vec![],
        };
        assert!(discrete_seminorm(&affine, 1.5) < 1e-20);
        let quad = GridFunction {
            spec,
            values: (0..spec.len()).map(|k| spec.coords(k)[0].powi(2)).collect(),
            constrained: vec![],
        };
        let n = spec.side as f64;
        let expected = 4.0 * n * n * spec.h() * spec.h();
        assert!((discrete_seminorm(&quad, 2.0) - expected).abs() < 1e-9 * expected);
        let mut scaled = quad.clone();
        scaled.values.iter_mut().for_each(|v| *v *= -3.0);
        let r = discrete_seminorm(&scaled, 1.3) / discrete_seminorm(&quad, 1.3);
        assert!((r - 3f64.powf(1.3)).abs() < 1e-12);
        assert!(GridFunction::with_data(spec, &s, &f, |_| 0.0).is_ok());
        assert!(GridSpec::new(s.params(), 64, 1025).is_err());
    }

    #[test]
    fn band_cholesky_solves() {
        // pentadiagonal SPD system against a direct residual check
        let n = 40;
        let mut a = Band::zeros(n, 2);
        for i in 0..n {
            a.add(i, i, 6.0);
            if i >= 1 {
                a.add(i, i - 1, -2.0);
            }
            if i >= 2 {
                a.add(i, i - 2, 0.5);
            }
        }
        let dense = |i: usize, j: usize| match i.abs_diff(j) {
            0 => 6.0,
            1 => -2.0,
            2 => 0.5,
            _ => 0.0,
        };
        let rhs: Vec<f64> = (0..n).map(|i| (i as f64).sin()).collect();
        let mut x = rhs.clone();
        a.factor().unwrap();
        a.solve(&mut x);
        for i in 0..n {
            let r: f64 = (0..n).map(|j| dense(i, j) * x[j]).sum::<f64>() - rhs[i];
            assert!(r.abs() < 1e-13);
        }
    }

    #[test]
    fn affine_data_give_zero_minimum() {
        let s = set(4, 1);
        let g = AffinePolynomial::new(0.5, -1.0, 2.0);
        let f: Vec<f64> = (0..s.len()).map(|i| g.eval(s.point_f64(i))).collect();
        let r = grid_minimal_extension(&f, &s, 1.5, &OracleConfig::default()).unwrap();
        assert!(r.objective < 1e-16, "{}", r.objective);
        let spec = r.grid.spec;
        for k in (0..spec.len()).step_by(97) {
            assert!((r.grid.values[k] - g.eval(spec.coords(k))).abs() < 1e-9);
        }
    }
}
