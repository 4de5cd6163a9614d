//! Extremal eigenvalues of symmetric operators.

use nalgebra::{DMatrix, SymmetricEigen};

/// Dense solve for small matrices; returns (λ_min, λ_max).
pub fn dense_extremes(n: usize, data: &[f64]) -> (f64, f64) {
    if n == 0 {
        return (0.0, 0.0);
    }
    let m = DMatrix::from_row_slice(n, n, data);
    let eig = SymmetricEigen::new(m).eigenvalues;
    let lo = eig.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = eig.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    (lo, hi)
}

/// Lanczos with full reorthogonalization, run until both Ritz extremes settle
/// to `rel_tol` of the spectral scale.
pub fn lanczos_extremes<F>(n: usize, matvec: F, rel_tol: f64, seed: u64) -> (f64, f64)
where
    F: Fn(&[f64], &mut [f64]),
{
    if n == 0 {
        return (0.0, 0.0);
    }
    let max_iter = n.min(600);
    // deterministic pseudo-random start vector
    let mut state = seed ^ 0x9E37_79B9_7F4A_7C15;
    let mut v: Vec<f64> = (0..n)
        .map(|_| {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            (state >> 11) as f64 / (1u64 << 53) as f64 - 0.5
        })
        .collect();
    normalize(&mut v);
    let mut basis: Vec<Vec<f64>> = vec![v.clone()];
    let mut alphas = Vec::new();
    let mut betas: Vec<f64> = Vec::new();
    let mut w = vec![0.0; n];
    let mut prev = (f64::NAN, f64::NAN);
    for it in 0..max_iter {
        matvec(&basis[it], &mut w);
        let a = dot(&w, &basis[it]);
        alphas.push(a);
        for q in &basis {
            let c = dot(&w, q);
            for (wi, qi) in w.iter_mut().zip(q) {
                *wi -= c * qi;
            }
        }
        let b = dot(&w, &w).sqrt();
        let k = alphas.len();
        let mut t = DMatrix::<f64>::zeros(k, k);
        for i in 0..k {
            t[(i, i)] = alphas[i];
            if i + 1 < k {
                t[(i, i + 1)] = betas[i];
                t[(i + 1, i)] = betas[i];
            }
        }
        let eig = SymmetricEigen::new(t).eigenvalues;
        let lo = eig.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = eig.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let scale = hi.abs().max(lo.abs()).max(1e-300);
        let settled = (lo - prev.0).abs() <= rel_tol * scale && (hi - prev.1).abs() <= rel_tol * scale;
        prev = (lo, hi);
        if b <= 1e-12 * scale || (settled && it >= 8) || k == max_iter {
            return (lo, hi);
        }
        betas.push(b);
        let next: Vec<f64> = w.iter().map(|x| x / b).collect();
        basis.push(next);
    }
    prev
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn normalize(v: &mut [f64]) {
    let s = dot(v, v).sqrt();
    for x in v.iter_mut() {
        *x /= s;
    }
}
