//! Gauss–Legendre rules and tensor-product integration on rectangles.

/// Nodes and weights of the `n`-point Gauss–Legendre rule on `[-1, 1]`,
/// nodes increasing.
#[derive(Clone, Debug)]
pub struct GaussLegendre {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl GaussLegendre {
    pub fn new(n: usize) -> Self {
        assert!(n >= 1, "empty rule");
        let mut nodes = vec![0.0; n];
        let mut weights = vec![0.0; n];
        let m = n.div_ceil(2);
        for i in 0..m {
            // Tricomi initial guess, then Newton on P_n
            let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
            let mut dp = 0.0;
            for _ in 0..100 {
                let (p, d) = legendre(n, x);
                dp = d;
                let dx = p / d;
                x -= dx;
                if dx.abs() <= 1e-16 * x.abs().max(1.0) {
                    break;
                }
            }
            let (_, d) = legendre(n, x);
            if d != 0.0 {
                dp = d;
            }
            let w = 2.0 / ((1.0 - x * x) * dp * dp);
            nodes[i] = -x;
            nodes[n - 1 - i] = x;
            weights[i] = w;
            weights[n - 1 - i] = w;
        }
        if n % 2 == 1 {
            nodes[n / 2] = 0.0;
        }
        Self { nodes, weights }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Nodes and weights mapped to `[a, b]`.
    pub fn mapped(&self, a: f64, b: f64) -> impl Iterator<Item = (f64, f64)> + '_ {
        let h = 0.5 * (b - a);
        let c = 0.5 * (a + b);
        self.nodes
            .iter()
            .zip(&self.weights)
            .map(move |(x, w)| (c + h * x, h * w))
    }

    pub fn integrate(&self, a: f64, b: f64, mut f: impl FnMut(f64) -> f64) -> f64 {
        self.mapped(a, b).map(|(x, w)| w * f(x)).sum()
    }

    /// Tensor rule over `[x0, x1] × [y0, y1]`.
    pub fn integrate_rect(&self, rect: [f64; 4], mut f: impl FnMut(f64, f64) -> f64) -> f64 {
        let [x0, x1, y0, y1] = rect;
        let mut total = 0.0;
        for (x, wx) in self.mapped(x0, x1) {
            for (y, wy) in self.mapped(y0, y1) {
                total += wx * wy * f(x, y);
            }
        }
        total
    }
}

/// `P_n(x)` and `P_n'(x)` by the three-term recurrence.
fn legendre(n: usize, x: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = x;
    if n == 0 {
        return (1.0, 0.0);
    }
    for k in 2..=n {
        let k = k as f64;
        let p2 = ((2.0 * k - 1.0) * x * p1 - (k - 1.0) * p0) / k;
        p0 = p1;
        p1 = p2;
    }
    let d = n as f64 * (x * p1 - p0) / (x * x - 1.0);
    (p1, d)
}

/// Adaptive tensor Gauss–Legendre over a rectangle: a cell is accepted when
/// the rule on the cell and on its four quarters agree to `tol` (absolute,
/// scaled by the cell's share of the area).
pub fn adaptive_rect(
    rule: &GaussLegendre,
    rect: [f64; 4],
    tol: f64,
    max_depth: u32,
    f: &(impl Fn(f64, f64) -> f64 + Sync),
) -> f64 {
    let whole = rule.integrate_rect(rect, f);
    refine(rule, rect, whole, tol, max_depth, f)
}

fn refine(
    rule: &GaussLegendre,
    rect: [f64; 4],
    whole: f64,
    tol: f64,
    depth: u32,
    f: &(impl Fn(f64, f64) -> f64 + Sync),
) -> f64 {
    let quarters = split(rect);
    let parts: Vec<f64> = quarters.iter().map(|r| rule.integrate_rect(*r, f)).collect();
    let sum: f64 = parts.iter().sum();
    if depth == 0 || (sum - whole).abs() <= tol {
        return sum;
    }
    quarters
        .iter()
        .zip(parts)
        .map(|(r, part)| refine(rule, *r, part, 0.25 * tol, depth - 1, f))
        .sum()
}

fn split(r: [f64; 4]) -> [[f64; 4]; 4] {
    let [x0, x1, y0, y1] = r;
    let xm = 0.5 * (x0 + x1);
    let ym = 0.5 * (y0 + y1);
    [[x0, xm, y0, ym], [xm, x1, y0, ym], [x0, xm, ym, y1], [xm, x1, ym, y1]]
}
