//! Dense kernels shared by the forward and backward passes.
//!
//! All matrices are row-major slices. Loops run in a fixed order so results
//! are reproducible bit for bit.

/// `a[p×q] · b[q×r]`
pub fn matmul(a: &[f64], b: &[f64], p: usize, q: usize, r: usize) -> Vec<f64> {
    let mut out = vec![0.0; p * r];
    for i in 0..p {
        let out_row = &mut out[i * r..(i + 1) * r];
        for (l, &a_il) in a[i * q..(i + 1) * q].iter().enumerate() {
            let b_row = &b[l * r..(l + 1) * r];
            for (o, &b_lj) in out_row.iter_mut().zip(b_row) {
                *o += a_il * b_lj;
            }
        }
    }
    out
}

/// `a[p×n] · b[q×n]ᵀ`
pub fn matmul_transpose_b(a: &[f64], b: &[f64], p: usize, q: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; p * q];
    for i in 0..p {
        let a_row = &a[i * n..(i + 1) * n];
        for j in 0..q {
            out[i * q + j] = dot(a_row, &b[j * n..(j + 1) * n]);
        }
    }
    out
}

/// `a[q×p]ᵀ · b[q×r]`
pub fn matmul_transpose_a(a: &[f64], b: &[f64], q: usize, p: usize, r: usize) -> Vec<f64> {
    let mut out = vec![0.0; p * r];
    for l in 0..q {
        let b_row = &b[l * r..(l + 1) * r];
        for (i, &a_li) in a[l * p..(l + 1) * p].iter().enumerate() {
            let out_row = &mut out[i * r..(i + 1) * r];
            for (o, &b_lj) in out_row.iter_mut().zip(b_row) {
                *o += a_li * b_lj;
            }
        }
    }
    out
}

/// `x[batch×d_in] · w[d_in×d_out] + bias`, bias broadcast over rows.
pub fn affine(x: &[f64], w: &[f64], bias: &[f64], batch: usize, d_in: usize) -> Vec<f64> {
    let d_out = bias.len();
    let mut out = matmul(x, w, batch, d_in, d_out);
    for row in out.chunks_mut(d_out) {
        for (o, &b) in row.iter_mut().zip(bias) {
            *o += b;
        }
    }
    out
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `log Σ exp(x)` with max subtraction.
pub fn log_sum_exp(x: &[f64]) -> f64 {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    // Summing in sorted order makes the result independent of input order.
    let mut terms: Vec<f64> = x.iter().map(|&v| (v - max).exp()).collect();
    terms.sort_unstable_by(f64::total_cmp);
    max + terms.iter().sum::<f64>().ln()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
