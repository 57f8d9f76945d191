//! Row-major dense kernels on plain slices.
//!
//! Everything in the model is small (d ≤ a few hundred), so these stay as
//! straight loops over contiguous rows and let the compiler vectorize the
//! inner dot products.

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `out = W x` for a `rows × cols` matrix.
pub fn matvec(w: &[f64], rows: usize, cols: usize, x: &[f64], out: &mut [f64]) {
    debug_assert_eq!(w.len(), rows * cols);
    debug_assert_eq!(x.len(), cols);
    debug_assert_eq!(out.len(), rows);
    for (o, row) in out.iter_mut().zip(w.chunks_exact(cols)) {
        *o = dot(row, x);
    }
}

/// `out += Wᵀ g` for a `rows × cols` matrix.
pub fn matvec_t_acc(w: &[f64], rows: usize, cols: usize, g: &[f64], out: &mut [f64]) {
    debug_assert_eq!(w.len(), rows * cols);
    debug_assert_eq!(g.len(), rows);
    debug_assert_eq!(out.len(), cols);
    for (&gi, row) in g.iter().zip(w.chunks_exact(cols)) {
        if gi == 0.0 {
            continue;
        }
        for (o, &wij) in out.iter_mut().zip(row) {
            *o += gi * wij;
        }
    }
}

/// `grad += scale · g xᵀ`, the weight gradient of `W x`.
pub fn add_outer(grad: &mut [f64], g: &[f64], x: &[f64], scale: f64) {
    let cols = x.len();
    debug_assert_eq!(grad.len(), g.len() * cols);
    for (&gi, row) in g.iter().zip(grad.chunks_exact_mut(cols)) {
        let s = gi * scale;
        if s == 0.0 {
            continue;
        }
        for (r, &xj) in row.iter_mut().zip(x) {
            *r += s * xj;
        }
    }
}

#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable `ln Σ exp(v_i)`.
pub fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + v.iter().map(|&x| (x - m).exp()).sum::<f64>().ln()
}

pub fn l2_norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matvec_and_transpose_agree_with_hand_values() {
        // [[1,2,3],[4,5,6]]
        let w = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let mut out = [0.0; 2];
        matvec(&w, 2, 3, &[1.0, 0.0, -1.0], &mut out);
        assert_eq!(out, [-2.0, -2.0]);
        let mut back = [0.0; 3];
        matvec_t_acc(&w, 2, 3, &[1.0, 1.0], &mut back);
        assert_eq!(back, [5.0, 7.0, 9.0]);
    }

    #[test]
    fn softplus_is_stable_at_extremes() {
        assert!((softplus(0.0) - std::f64::consts::LN_2).abs() < 1e-15);
        assert!((softplus(100.0) - 100.0).abs() < 1e-12);
        assert!(softplus(-800.0) >= 0.0);
        assert!(softplus(-40.0) > 0.0);
    }

    #[test]
    fn log_sum_exp_handles_large_values() {
        let v = [1000.0, 1000.0];
        assert!((log_sum_exp(&v) - (1000.0 + std::f64::consts::LN_2)).abs() < 1e-12);
    }
}
