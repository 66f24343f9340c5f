//! Dense kernels. Each output row depends only on the matching input row and
//! accumulates in a fixed order, so results are independent of batch size.

use super::Mat;
use ndarray::Array2;

fn rows(m: &Mat) -> &[f64] {
    m.as_slice().expect("matrices are kept in standard layout")
}

/// `a · b`.
pub fn matmul(a: &Mat, b: &Mat) -> Mat {
    let (n, k) = a.dim();
    let (k2, m) = b.dim();
    assert_eq!(k, k2, "matmul inner dimension mismatch: {k} vs {k2}");
    let a_s = rows(a);
    let b_s = rows(b);
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let out_row = &mut out[i * m..(i + 1) * m];
        let a_row = &a_s[i * k..(i + 1) * k];
        for (kk, &aik) in a_row.iter().enumerate() {
            if aik == 0.0 {
                continue;
            }
            let b_row = &b_s[kk * m..(kk + 1) * m];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += aik * bv;
            }
        }
    }
    Array2::from_shape_vec((n, m), out).unwrap()
}

/// `a · bᵀ`.
pub fn matmul_a_bt(a: &Mat, b: &Mat) -> Mat {
    let (n, k) = a.dim();
    let (m, k2) = b.dim();
    assert_eq!(k, k2, "matmul_a_bt inner dimension mismatch: {k} vs {k2}");
    let a_s = rows(a);
    let b_s = rows(b);
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let a_row = &a_s[i * k..(i + 1) * k];
        for j in 0..m {
            let b_row = &b_s[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for (x, y) in a_row.iter().zip(b_row) {
                acc += x * y;
            }
            out[i * m + j] = acc;
        }
    }
    Array2::from_shape_vec((n, m), out).unwrap()
}

/// `aᵀ · b`.
pub fn matmul_at_b(a: &Mat, b: &Mat) -> Mat {
    let (n, k) = a.dim();
    let (n2, m) = b.dim();
    assert_eq!(n, n2, "matmul_at_b outer dimension mismatch: {n} vs {n2}");
    let a_s = rows(a);
    let b_s = rows(b);
    let mut out = vec![0.0; k * m];
    for i in 0..n {
        let a_row = &a_s[i * k..(i + 1) * k];
        let b_row = &b_s[i * m..(i + 1) * m];
        for (kk, &aik) in a_row.iter().enumerate() {
            if aik == 0.0 {
                continue;
            }
            let out_row = &mut out[kk * m..(kk + 1) * m];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += aik * bv;
            }
        }
    }
    Array2::from_shape_vec((k, m), out).unwrap()
}
