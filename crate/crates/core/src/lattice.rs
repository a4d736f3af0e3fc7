//! Integer coordinates shared by every exact geometric test.
//!
//! One unit is `1/D` with `D = N^L · 5 · 2^G`, where `G` bounds the quadtree
//! generation. Points of `E`, dyadic square corners and the `c`-dilations
//! used by the decomposition (`c ∈ {1.1, 3, 9, 50, 250}`) are all integers in
//! these units, so containment tests reduce to `i128` comparisons.

use crate::fractal_set::FractalSet;

/// Closed axis-parallel rectangle in lattice units.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Rect {
    pub x0: i128,
    pub x1: i128,
    pub y0: i128,
    pub y1: i128,
}

impl Rect {
    pub fn contains(&self, x: i128, y: i128) -> bool {
        self.x0 <= x && x <= self.x1 && self.y0 <= y && y <= self.y1
    }

    pub fn intersects(&self, other: &Rect) -> bool {
        self.x0 <= other.x1 && other.x0 <= self.x1 && self.y0 <= other.y1 && other.y0 <= self.y1
    }
}

#[derive(Clone, Debug)]
pub struct Lattice {
    unit: i128,
    delta: i128,
    max_generation: u32,
    half_count: i128,
    /// `E2` abscissae in lattice units, increasing.
    e2: Vec<i128>,
}

impl Lattice {
    pub fn new(set: &FractalSet) -> Self {
        let inv_delta = set.params().inv_delta();
        // side 8·2^-g must stay above Δ/9 with room to spare
        let bound = 288 * inv_delta;
        let max_generation = 128 - (bound - 1).leading_zeros();
        let unit = inv_delta * 5 * (1i128 << max_generation);
        let delta = unit / inv_delta;
        let e2 = set.e2().iter().map(|p| p.abscissa * delta).collect();
        Self {
            unit,
            delta,
            max_generation,
            half_count: set.half_count(),
            e2,
        }
    }

    /// Lattice units per unit length.
    pub fn unit(&self) -> i128 {
        self.unit
    }

    /// `Δ` in lattice units.
    pub fn delta(&self) -> i128 {
        self.delta
    }

    /// Deepest admissible quadtree generation.
    pub fn max_generation(&self) -> u32 {
        self.max_generation
    }

    pub fn side(&self, generation: u32) -> i128 {
        assert!(
            generation <= self.max_generation,
            "generation {generation} out of range"
        );
        (8 * self.unit) >> generation
    }

    /// Lower corner coordinate of the `index`-th square along an axis.
    pub fn corner(&self, generation: u32, index: u64) -> i128 {
        -4 * self.unit + index as i128 * self.side(generation)
    }

    /// Closed dilation by `num/den` of the square with lower corner
    /// `(cx, cy)` and the given side.
    pub fn dilate(&self, cx: i128, cy: i128, side: i128, num: i128, den: i128) -> Rect {
        let half = num * side;
        assert_eq!(half % (2 * den), 0, "dilation leaves the lattice");
        let half = half / (2 * den);
        let mx = cx + side / 2;
        let my = cy + side / 2;
        Rect {
            x0: mx - half,
            x1: mx + half,
            y0: my - half,
            y1: my + half,
        }
    }

    pub fn to_f64(&self, u: i128) -> f64 {
        u as f64 / self.unit as f64
    }

    /// Indices `k` (abscissa `kΔ`) of the `E1` points inside `r`.
    pub fn e1_range(&self, r: &Rect) -> Option<(i128, i128)> {
        if !(r.y0 <= 0 && 0 <= r.y1) {
            return None;
        }
        let lo = div_ceil(r.x0, self.delta).max(-self.half_count);
        let hi = div_floor(r.x1, self.delta).min(self.half_count);
        (lo <= hi).then_some((lo, hi))
    }

    /// Positions in `E2` (left-to-right order) of the points inside `r`.
    pub fn e2_range(&self, r: &Rect) -> std::ops::Range<usize> {
        if !(r.y0 <= self.delta && self.delta <= r.y1) {
            return 0..0;
        }
        let lo = self.e2.partition_point(|&x| x < r.x0);
        let hi = self.e2.partition_point(|&x| x <= r.x1);
        lo..hi.max(lo)
    }

    pub fn count_e1(&self, r: &Rect) -> usize {
        self.e1_range(r).map_or(0, |(lo, hi)| (hi - lo + 1) as usize)
    }

    pub fn count_e2(&self, r: &Rect) -> usize {
        self.e2_range(r).len()
    }

    pub fn count(&self, r: &Rect) -> usize {
        self.count_e1(r) + self.count_e2(r)
    }

    /// Distance from the closed rectangle to the segment `[-1,1] × {0}`
    /// that carries `E1`, in lattice units (floating point).
    pub fn dist_to_e1_hull(&self, r: &Rect) -> f64 {
        let dx = (r.x0 - self.unit).max(-self.unit - r.x1).max(0);
        let dy = r.y0.max(-r.y1).max(0);
        (dx as f64).hypot(dy as f64)
    }
}

pub fn div_floor(a: i128, b: i128) -> i128 {
    let q = a / b;
    if (a % b != 0) && ((a < 0) != (b < 0)) {
        q - 1
    } else {
        q
    }
}

pub fn div_ceil(a: i128, b: i128) -> i128 {
    -div_floor(-a, b)
}
