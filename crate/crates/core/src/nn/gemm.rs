//! Row-major `C += A * B` with a register-blocked kernel.

const MR: usize = 4;
const NR: usize = 8;

/// `c[m x n] += a[m x k] * b[k x n]`.
pub(crate) fn gemm_acc(c: &mut [f64], a: &[f64], b: &[f64], m: usize, n: usize, k: usize) {
    assert!(c.len() >= m * n && a.len() >= m * k && b.len() >= k * n);
    #[cfg(target_arch = "x86_64")]
    {
        if std::is_x86_feature_detected!("avx2") && std::is_x86_feature_detected!("fma") {
            // SAFETY: the required CPU features were detected above.
            unsafe { gemm_avx2(c, a, b, m, n, k) };
            return;
        }
    }
    gemm_body(c, a, b, m, n, k);
}

/// `c[m x n] += a[m x k] * b[n x k]^T` (row-wise dot products).
pub(crate) fn gemm_nt(c: &mut [f64], a: &[f64], b: &[f64], m: usize, n: usize, k: usize) {
    assert!(c.len() >= m * n && a.len() >= m * k && b.len() >= n * k);
    #[cfg(target_arch = "x86_64")]
    {
        if std::is_x86_feature_detected!("avx2") && std::is_x86_feature_detected!("fma") {
            // SAFETY: the required CPU features were detected above.
            unsafe { gemm_nt_avx2(c, a, b, m, n, k) };
            return;
        }
    }
    gemm_nt_body(c, a, b, m, n, k);
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2,fma")]
unsafe fn gemm_nt_avx2(c: &mut [f64], a: &[f64], b: &[f64], m: usize, n: usize, k: usize) {
    gemm_nt_body(c, a, b, m, n, k);
}

const LANES: usize = 8;

#[inline(always)]
fn gemm_nt_body(c: &mut [f64], a: &[f64], b: &[f64], m: usize, n: usize, k: usize) {
    let kfull = k - k % LANES;
    for j in 0..n {
        let brow = &b[j * k..(j + 1) * k];
        let mut i = 0;
        while i + 2 <= m {
            let (a0, a1) = (&a[i * k..(i + 1) * k], &a[(i + 1) * k..(i + 2) * k]);
            let mut acc0 = [0.0f64; LANES];
            let mut acc1 = [0.0f64; LANES];
            let mut p = 0;
            while p < kfull {
                let bv: &[f64; LANES] = brow[p..p + LANES].try_into().unwrap();
                let x0: &[f64; LANES] = a0[p..p + LANES].try_into().unwrap();
                let x1: &[f64; LANES] = a1[p..p + LANES].try_into().unwrap();
                for l in 0..LANES {
                    acc0[l] = x0[l].mul_add(bv[l], acc0[l]);
                    acc1[l] = x1[l].mul_add(bv[l], acc1[l]);
                }
                p += LANES;
            }
            let mut s0: f64 = acc0.iter().sum();
            let mut s1: f64 = acc1.iter().sum();
            for p in kfull..k {
                s0 += a0[p] * brow[p];
                s1 += a1[p] * brow[p];
            }
            c[i * n + j] += s0;
            c[(i + 1) * n + j] += s1;
            i += 2;
        }
        if i < m {
            let a0 = &a[i * k..(i + 1) * k];
            c[i * n + j] += a0.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

/// Returns the `[n x m]` transpose of a row-major `[m x n]` matrix.
pub(crate) fn transpose(a: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
    out
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2,fma")]
unsafe fn gemm_avx2(c: &mut [f64], a: &[f64], b: &[f64], m: usize, n: usize, k: usize) {
    gemm_body(c, a, b, m, n, k);
}

#[inline(always)]
fn gemm_body(c: &mut [f64], a: &[f64], b: &[f64], m: usize, n: usize, k: usize) {
    let mfull = m - m % MR;
    let nfull = n - n % NR;
    let mut j = 0;
    while j < nfull {
        let mut i = 0;
        while i < mfull {
            let mut acc = [[0.0f64; NR]; MR];
            let (a0, a1, a2, a3) = (
                &a[i * k..(i + 1) * k],
                &a[(i + 1) * k..(i + 2) * k],
                &a[(i + 2) * k..(i + 3) * k],
                &a[(i + 3) * k..(i + 4) * k],
            );
            for p in 0..k {
                let brow: &[f64; NR] = b[p * n + j..p * n + j + NR].try_into().unwrap();
                let av = [a0[p], a1[p], a2[p], a3[p]];
                for r in 0..MR {
                    for q in 0..NR {
                        acc[r][q] = av[r].mul_add(brow[q], acc[r][q]);
                    }
                }
            }
            for r in 0..MR {
                let crow = &mut c[(i + r) * n + j..(i + r) * n + j + NR];
                for q in 0..NR {
                    crow[q] += acc[r][q];
                }
            }
            i += MR;
        }
        j += NR;
    }
    // ragged right edge
    if nfull < n {
        for i in 0..mfull {
            for p in 0..k {
                let av = a[i * k + p];
                let brow = &b[p * n + nfull..(p + 1) * n];
                for (o, bv) in c[i * n + nfull..(i + 1) * n].iter_mut().zip(brow) {
                    *o = av.mul_add(*bv, *o);
                }
            }
        }
    }
    // ragged bottom rows
    for i in mfull..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, bv) in c[i * n..(i + 1) * n].iter_mut().zip(brow) {
                *o = av.mul_add(*bv, *o);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matches_naive_product() {
        for &(m, n, k) in &[(1, 1, 1), (4, 8, 3), (5, 9, 7), (13, 21, 17), (3, 2, 40)] {
            let a: Vec<f64> = (0..m * k).map(|i| ((i * 37 % 11) as f64) - 5.0).collect();
            let b: Vec<f64> = (0..k * n).map(|i| ((i * 13 % 7) as f64) * 0.5 - 1.0).collect();
            let mut c = vec![1.0; m * n];
            gemm_acc(&mut c, &a, &b, m, n, k);
            for i in 0..m {
                for j in 0..n {
                    let want: f64 = 1.0 + (0..k).map(|p| a[i * k + p] * b[p * n + j]).sum::<f64>();
                    assert!((c[i * n + j] - want).abs() < 1e-9, "{m}x{n}x{k} at {i},{j}");
                }
            }
            let bt = transpose(&b, k, n);
            let mut c2 = vec![1.0; m * n];
            gemm_nt(&mut c2, &a, &bt, m, n, k);
            assert!(c.iter().zip(&c2).all(|(x, y)| (x - y).abs() < 1e-9));
            let t = transpose(&a, m, k);
            assert_eq!(transpose(&t, k, m), a);
        }
    }
}
