use crate::error::{Error, Result};

/// `c[m×n] += a[m×k] · b[k×n]`, accumulating each entry in ascending `k`.
///
/// The per-entry summation order never depends on `m`, so computing a subset
/// of rows gives bitwise the same values as computing all of them.
pub(crate) fn matmul_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let c_row = &mut c[i * n..(i + 1) * n];
        for (p, &av) in a_row.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += av * bv;
            }
        }
    }
}

/// `c[m×n] += a[m×k] · b[n×k]ᵀ`.
pub(crate) fn matmul_bt_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            let mut s = 0.0;
            for (x, y) in a_row.iter().zip(b_row) {
                s += x * y;
            }
            c[i * n + j] += s;
        }
    }
}

/// `c[k×n] += a[m×k]ᵀ · b[m×n]`.
pub(crate) fn matmul_at_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let b_row = &b[i * n..(i + 1) * n];
        for (p, &av) in a_row.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let c_row = &mut c[p * n..(p + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += av * bv;
            }
        }
    }
}

struct Lu {
    n: usize,
    lu: Vec<f64>,
    perm: Vec<usize>,
    swaps: usize,
}

fn lu_decompose(a: &[f64], n: usize) -> Result<Lu> {
    if a.len() != n * n {
        return Err(Error::shape("lu", format!("expected {n}x{n} matrix")));
    }
    let mut lu = a.to_vec();
    let mut perm: Vec<usize> = (0..n).collect();
    let mut swaps = 0;
    for col in 0..n {
        let (pivot, max) = (col..n)
            .map(|r| (r, lu[r * n + col].abs()))
            .fold((col, -1.0), |acc, x| if x.1 > acc.1 { x } else { acc });
        if max == 0.0 {
            return Err(Error::domain("lu", "matrix is singular"));
        }
        if pivot != col {
            for j in 0..n {
                lu.swap(col * n + j, pivot * n + j);
            }
            perm.swap(col, pivot);
            swaps += 1;
        }
        let d = lu[col * n + col];
        for r in col + 1..n {
            let f = lu[r * n + col] / d;
            lu[r * n + col] = f;
            for j in col + 1..n {
                lu[r * n + j] -= f * lu[col * n + j];
            }
        }
    }
    Ok(Lu { n, lu, perm, swaps })
}

/// `(log|det A|, sign det A)` of a row-major `n×n` matrix via LU with partial pivoting.
pub fn log_abs_det(a: &[f64], n: usize) -> Result<(f64, f64)> {
    let Lu { n, lu, swaps, .. } = lu_decompose(a, n)?;
    let mut log = 0.0;
    let mut sign = if swaps % 2 == 0 { 1.0 } else { -1.0 };
    for i in 0..n {
        let d = lu[i * n + i];
        if d < 0.0 {
            sign = -sign;
        }
        log += d.abs().ln();
    }
    Ok((log, sign))
}

/// Inverse of a row-major `n×n` matrix.
pub fn lu_inverse(a: &[f64], n: usize) -> Result<Vec<f64>> {
    let Lu { n, lu, perm, .. } = lu_decompose(a, n)?;
    let mut inv = vec![0.0; n * n];
    let mut col = vec![0.0; n];
    for j in 0..n {
        // Solve A x = e_j, with P A = L U.
        for i in 0..n {
            col[i] = if perm[i] == j { 1.0 } else { 0.0 };
        }
        for i in 0..n {
            let mut s = col[i];
            for p in 0..i {
                s -= lu[i * n + p] * col[p];
            }
            col[i] = s;
        }
        for i in (0..n).rev() {
            let mut s = col[i];
            for p in i + 1..n {
                s -= lu[i * n + p] * col[p];
            }
            col[i] = s / lu[i * n + i];
        }
        for i in 0..n {
            inv[i * n + j] = col[i];
        }
    }
    Ok(inv)
}
