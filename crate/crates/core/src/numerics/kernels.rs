//! Dense f64 kernels used by the tape. All loops are single-threaded; the
//! inner dimension is laid out contiguously so the compiler can vectorize.

/// C[m,n] += A[m,k] * B[k,n]. Register-tiled 4x8 microkernel: a 4-row by
/// 8-column accumulator block stays in registers across the whole k loop.
pub fn matmul_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let m4 = m - m % 4;
    let n8 = n - n % 8;
    let mut i = 0;
    while i < m4 {
        let a0 = &a[i * k..(i + 1) * k];
        let a1 = &a[(i + 1) * k..(i + 2) * k];
        let a2 = &a[(i + 2) * k..(i + 3) * k];
        let a3 = &a[(i + 3) * k..(i + 4) * k];
        let mut j = 0;
        while j < n8 {
            let mut acc = [0.0f64; 32];
            for p in 0..k {
                let bp = &b[p * n + j..p * n + j + 8];
                let (v0, v1, v2, v3) = (a0[p], a1[p], a2[p], a3[p]);
                for l in 0..8 {
                    acc[l] = v0.mul_add(bp[l], acc[l]);
                    acc[8 + l] = v1.mul_add(bp[l], acc[8 + l]);
                    acc[16 + l] = v2.mul_add(bp[l], acc[16 + l]);
                    acc[24 + l] = v3.mul_add(bp[l], acc[24 + l]);
                }
            }
            for r in 0..4 {
                let c_row = &mut c[(i + r) * n + j..(i + r) * n + j + 8];
                for l in 0..8 {
                    c_row[l] += acc[r * 8 + l];
                }
            }
            j += 8;
        }
        // column remainder
        if j < n {
            for p in 0..k {
                let bp = &b[p * n..(p + 1) * n];
                let (v0, v1, v2, v3) = (a0[p], a1[p], a2[p], a3[p]);
                for l in j..n {
                    c[i * n + l] = v0.mul_add(bp[l], c[i * n + l]);
                    c[(i + 1) * n + l] = v1.mul_add(bp[l], c[(i + 1) * n + l]);
                    c[(i + 2) * n + l] = v2.mul_add(bp[l], c[(i + 2) * n + l]);
                    c[(i + 3) * n + l] = v3.mul_add(bp[l], c[(i + 3) * n + l]);
                }
            }
        }
        i += 4;
    }
    while i < m {
        let a_row = &a[i * k..(i + 1) * k];
        let c_row = &mut c[i * n..(i + 1) * n];
        for (p, &av) in a_row.iter().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            for j in 0..n {
                c_row[j] = av.mul_add(b_row[j], c_row[j]);
            }
        }
        i += 1;
    }
}

/// C[m,k] += A[m,n] * B^T where B is [k,n]. B is transposed into scratch
/// so the blocked kernel does the work (serial dot-product reductions do
/// not vectorize).
pub fn matmul_nt_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, n: usize, k: usize) {
    debug_assert_eq!(a.len(), m * n);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * k);
    let mut bt = vec![0.0; n * k];
    for p in 0..k {
        for j in 0..n {
            bt[j * k + p] = b[p * n + j];
        }
    }
    matmul_acc(a, &bt, c, m, n, k);
}

/// C[k,n] += A^T * B where A is [m,k] and B is [m,n]. Four A/B rows are
/// folded per pass so each C row is loaded and stored once per quad.
pub fn matmul_tn_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(c.len(), k * n);
    let m4 = m - m % 4;
    let mut i = 0;
    while i < m4 {
        let b0 = &b[i * n..(i + 1) * n];
        let b1 = &b[(i + 1) * n..(i + 2) * n];
        let b2 = &b[(i + 2) * n..(i + 3) * n];
        let b3 = &b[(i + 3) * n..(i + 4) * n];
        for p in 0..k {
            let a0 = a[i * k + p];
            let a1 = a[(i + 1) * k + p];
            let a2 = a[(i + 2) * k + p];
            let a3 = a[(i + 3) * k + p];
            let c_row = &mut c[p * n..(p + 1) * n];
            for j in 0..n {
                let mut v = c_row[j];
                v = a0.mul_add(b0[j], v);
                v = a1.mul_add(b1[j], v);
                v = a2.mul_add(b2[j], v);
                v = a3.mul_add(b3[j], v);
                c_row[j] = v;
            }
        }
        i += 4;
    }
    while i < m {
        let a_row = &a[i * k..(i + 1) * k];
        let b_row = &b[i * n..(i + 1) * n];
        for (p, &av) in a_row.iter().enumerate() {
            let c_row = &mut c[p * n..(p + 1) * n];
            for j in 0..n {
                c_row[j] = av.mul_add(b_row[j], c_row[j]);
            }
        }
        i += 1;
    }
}

/// Numerically stable softplus.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn mish(x: f64) -> f64 {
    x * softplus(x).tanh()
}

pub fn mish_deriv(x: f64) -> f64 {
    let t = softplus(x).tanh();
    t + x * (1.0 - t * t) * sigmoid(x)
}

const QUICK_GELU_K: f64 = 1.702;

/// Sigmoid-approximation GELU: x * sigmoid(1.702 x).
pub fn gelu(x: f64) -> f64 {
    x * sigmoid(QUICK_GELU_K * x)
}

pub fn gelu_deriv(x: f64) -> f64 {
    let s = sigmoid(QUICK_GELU_K * x);
    s + x * QUICK_GELU_K * s * (1.0 - s)
}

#[derive(Debug, Clone)]
pub struct Conv2dDims {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2dDims {
    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.pad - self.kh) / self.stride + 1
    }
    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.pad - self.kw) / self.stride + 1
    }
}

pub fn conv2d_forward(x: &[f64], w: &[f64], b: &[f64], d: &Conv2dDims, y: &mut [f64]) {
    let (oh, ow) = (d.out_h(), d.out_w());
    for co in 0..d.c_out {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = b[co];
                for ci in 0..d.c_in {
                    for ky in 0..d.kh {
                        let iy = (oy * d.stride + ky) as isize - d.pad as isize;
                        if iy < 0 || iy >= d.h as isize {
                            continue;
                        }
                        for kx in 0..d.kw {
                            let ix = (ox * d.stride + kx) as isize - d.pad as isize;
                            if ix < 0 || ix >= d.w as isize {
                                continue;
                            }
                            let wi = ((co * d.c_in + ci) * d.kh + ky) * d.kw + kx;
                            let xi = (ci * d.h + iy as usize) * d.w + ix as usize;
                            acc += w[wi] * x[xi];
                        }
                    }
                }
                y[(co * oh + oy) * ow + ox] = acc;
            }
        }
    }
}

pub fn conv2d_backward(
    x: &[f64],
    w: &[f64],
    dy: &[f64],
    d: &Conv2dDims,
    dx: &mut [f64],
    dw: &mut [f64],
    db: &mut [f64],
) {
    let (oh, ow) = (d.out_h(), d.out_w());
    for co in 0..d.c_out {
        for oy in 0..oh {
            for ox in 0..ow {
                let g = dy[(co * oh + oy) * ow + ox];
                db[co] += g;
                for ci in 0..d.c_in {
                    for ky in 0..d.kh {
                        let iy = (oy * d.stride + ky) as isize - d.pad as isize;
                        if iy < 0 || iy >= d.h as isize {
                            continue;
                        }
                        for kx in 0..d.kw {
                            let ix = (ox * d.stride + kx) as isize - d.pad as isize;
                            if ix < 0 || ix >= d.w as isize {
                                continue;
                            }
                            let wi = ((co * d.c_in + ci) * d.kh + ky) * d.kw + kx;
                            let xi = (ci * d.h + iy as usize) * d.w + ix as usize;
                            dw[wi] += g * x[xi];
                            dx[xi] += g * w[wi];
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_small() {
        // [1 2; 3 4] * [5 6; 7 8] = [19 22; 43 50]
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        let mut c = [0.0; 4];
        matmul_acc(&a, &b, &mut c, 2, 2, 2);
        assert_eq!(c, [19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn transposed_variants_agree_with_explicit_transpose() {
        let a = [1.0, -2.0, 0.5, 3.0, 4.0, -1.0]; // [2,3]
        let b = [2.0, 1.0, 0.0, -1.0, 1.0, 5.0]; // [2,3]
        // a * b^T -> [2,2]
        let mut c = [0.0; 4];
        matmul_nt_acc(&a, &b, &mut c, 2, 3, 2);
        let bt = [2.0, -1.0, 1.0, 1.0, 0.0, 5.0]; // [3,2]
        let mut want = [0.0; 4];
        matmul_acc(&a, &bt, &mut want, 2, 3, 2);
        assert_eq!(c, want);

        // a^T * b -> [3,3]
        let mut c2 = [0.0; 9];
        matmul_tn_acc(&a, &b, &mut c2, 2, 3, 3);
        let at = [1.0, 3.0, -2.0, 4.0, 0.5, -1.0]; // [3,2]
        let mut want2 = [0.0; 9];
        matmul_acc(&at, &b, &mut want2, 3, 2, 3);
        assert_eq!(c2, want2);
    }

    #[test]
    fn mish_values() {
        assert_eq!(mish(0.0), 0.0);
        assert!((mish(10.0) - 10.0).abs() < 1e-3);
        assert!((mish_deriv(0.0) - (2.0f64.ln()).tanh()).abs() < 1e-12);
    }
}
