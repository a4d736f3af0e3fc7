use nalgebra::{DMatrix, DVector};
use whitney_core::fractal_set::{build_fractal_set, FractalParams, FractalSet};

pub fn set(n: u64, l: u32) -> FractalSet {
    build_fractal_set(FractalParams::with_threshold(n, l, 4).unwrap())
}

/// Dense least-squares form of the p = 2 grid problem: rows of second
/// differences, clamped one node inward at the border.
pub fn dense_p2(set: &FractalSet, f: &[f64], per_delta: u32) -> (Vec<f64>, f64) {
    let inv_delta = set.params().inv_delta() as usize;
    let side = 8 * inv_delta * per_delta as usize + 1;
    let h = 8.0 / (side - 1) as f64;
    let n = side * side;
    let idx = |i: usize, j: usize| j * side + i;
    let mut rows: Vec<(f64, Vec<(usize, f64)>)> = Vec::new();
    for j in 0..side {
        for i in 0..side {
            let (ci, cj) = (i.clamp(1, side - 2), j.clamp(1, side - 2));
            let s = 1.0 / (h * h);
            rows.push((
                1.0,
                vec![(idx(ci - 1, cj), s), (idx(ci, cj), -2.0 * s), (idx(ci + 1, cj), s)],
            ));
            rows.push((
                1.0,
                vec![(idx(ci, cj - 1), s), (idx(ci, cj), -2.0 * s), (idx(ci, cj + 1), s)],
            ));
            let q = 0.25 * s;
            rows.push((
                2.0,
                vec![
                    (idx(ci - 1, cj - 1), q),
                    (idx(ci + 1, cj - 1), -q),
                    (idx(ci - 1, cj + 1), -q),
                    (idx(ci + 1, cj + 1), q),
                ],
            ));
        }
    }
    let mut fixed = vec![None; n];
    for (k, x) in set.points_f64().iter().enumerate() {
        let i = ((x[0] + 4.0) / h).round() as usize;
        let j = ((x[1] + 4.0) / h).round() as usize;
        fixed[idx(i, j)] = Some(f[k]);
    }
    let free: Vec<usize> = (0..n).filter(|&k| fixed[k].is_none()).collect();
    let mut pos = vec![usize::MAX; n];
    for (a, &k) in free.iter().enumerate() {
        pos[k] = a;
    }
    let m = free.len();
    let mut a = DMatrix::<f64>::zeros(m, m);
    let mut b = DVector::<f64>::zeros(m);
    for (w, row) in &rows {
        let c: f64 = row.iter().filter_map(|&(k, v)| fixed[k].map(|x| v * x)).sum();
        for &(k1, v1) in row {
            if pos[k1] == usize::MAX {
                continue;
            }
            b[pos[k1]] -= w * h * h * v1 * c;
            for &(k2, v2) in row {
                if pos[k2] != usize::MAX {
                    a[(pos[k1], pos[k2])] += w * h * h * v1 * v2;
                }
            }
        }
    }
    let sol = a.cholesky().expect("positive definite").solve(&b);
    let mut u: Vec<f64> = fixed.iter().map(|v| v.unwrap_or(0.0)).collect();
    for (a, &k) in free.iter().enumerate() {
        u[k] = sol[a];
    }
    let objective: f64 = rows
        .iter()
        .map(|(w, row)| {
            let d: f64 = row.iter().map(|&(k, v)| v * u[k]).sum();
            w * d * d
        })
        .sum::<f64>()
        * h
        * h;
    (u, objective)
}
