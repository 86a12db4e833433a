//! Plain-`f64` numeric routines shared by the autodiff tape and the
//! inference engine, so both paths compute bit-identical values.

/// C[m,n] = A[m,k] @ B[k,n], accumulating into `beta * C`.
pub fn gemm(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64], beta: f64) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            n as isize,
            1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// C[m,n] = A[m,k] @ B[n,k]^T, accumulating into `beta * C`.
pub fn gemm_nt(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64], beta: f64) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            1,
            k as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// C[m,n] = A[k,m]^T @ B[k,n], accumulating into `beta * C`.
pub fn gemm_tn(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64], beta: f64) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            1,
            m as isize,
            b.as_ptr(),
            n as isize,
            1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// GELU, tanh approximation.
pub fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

/// d gelu / dx for the tanh approximation.
pub fn gelu_grad(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    let u = C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// log(1 + exp(x)), numerically stable.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// In-place row softmax over the first `len` entries.
pub fn softmax_row(row: &mut [f64], len: usize) {
    let m = row[..len].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row[..len].iter_mut() {
        *v = (*v - m).exp();
        sum += *v;
    }
    for v in row[..len].iter_mut() {
        *v /= sum;
    }
}

/// Layer norm over one row: y = gamma * (x - mean) / sqrt(var + eps) + beta.
/// Returns (mean, rstd) for the backward pass.
pub fn layer_norm_row(x: &[f64], gamma: &[f64], beta: &[f64], eps: f64, out: &mut [f64]) -> (f64, f64) {
    let d = x.len();
    let mean = x.iter().sum::<f64>() / d as f64;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
    let rstd = 1.0 / (var + eps).sqrt();
    for i in 0..d {
        out[i] = gamma[i] * (x[i] - mean) * rstd + beta[i];
    }
    (mean, rstd)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_identity() {
        let a = vec![1.0, 2.0, 3.0, 4.0];
        let eye = vec![1.0, 0.0, 0.0, 1.0];
        let mut c = vec![0.0; 4];
        gemm(2, 2, 2, &a, &eye, &mut c, 0.0);
        assert_eq!(c, a);
    }

    #[test]
    fn gemm_nt_matches_explicit_transpose() {
        let a = vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]; // 2x3
        let b = vec![1.0, 0.5, -1.0, 2.0, 0.0, 3.0]; // 2x3, used as B^T
        let mut c1 = vec![0.0; 4];
        gemm_nt(2, 3, 2, &a, &b, &mut c1, 0.0);
        let bt = vec![1.0, 2.0, 0.5, 0.0, -1.0, 3.0]; // 3x2
        let mut c2 = vec![0.0; 4];
        gemm(2, 3, 2, &a, &bt, &mut c2, 0.0);
        for (x, y) in c1.iter().zip(&c2) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_uniform_on_equal_logits() {
        let mut row = vec![1.7; 4];
        softmax_row(&mut row, 4);
        for v in &row {
            assert!((v - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn softplus_edges() {
        assert!((softplus(0.0) - std::f64::consts::LN_2).abs() < 1e-15);
        assert!(softplus(-40.0) < 1e-8);
        assert!((softplus(40.0) - 40.0).abs() < 1e-8);
    }
}
