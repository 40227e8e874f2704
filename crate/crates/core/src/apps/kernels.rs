//! Dense leaf kernels on square row-major tiles of edge `n`.
//!
//! All factor tiles are lower triangular. Updates subtract, so a
//! right-looking factorization is a sequence of `potrf`, `trsm`, `syrk`
//! and `gemm` calls on tiles.

/// Unblocked Cholesky of `a` in place; the strict upper triangle is
/// zeroed. Returns the row of the first non-positive pivot.
pub fn potrf(a: &mut [f64], n: usize) -> Result<(), usize> {
    debug_assert_eq!(a.len(), n * n);
    for j in 0..n {
        let mut d = a[j * n + j];
        for m in 0..j {
            d -= a[j * n + m] * a[j * n + m];
        }
        if d <= 0.0 || !d.is_finite() {
            return Err(j);
        }
        let d = d.sqrt();
        a[j * n + j] = d;
        for i in j + 1..n {
            let mut s = a[i * n + j];
            for m in 0..j {
                s -= a[i * n + m] * a[j * n + m];
            }
            a[i * n + j] = s / d;
        }
        for c in j + 1..n {
            a[j * n + c] = 0.0;
        }
    }
    Ok(())
}

/// `b := b · l⁻ᵀ` for lower triangular `l`.
pub fn trsm(l: &[f64], b: &mut [f64], n: usize) {
    for r in 0..n {
        let row = &mut b[r * n..(r + 1) * n];
        for c in 0..n {
            let mut s = row[c];
            for m in 0..c {
                s -= row[m] * l[c * n + m];
            }
            row[c] = s / l[c * n + c];
        }
    }
}

/// Lower triangle of `c := c − a·aᵀ`.
pub fn syrk(a: &[f64], c: &mut [f64], n: usize) {
    for i in 0..n {
        let ai = &a[i * n..(i + 1) * n];
        for j in 0..=i {
            let aj = &a[j * n..(j + 1) * n];
            c[i * n + j] -= dot(ai, aj);
        }
    }
}

/// `c := c − a·bᵀ`.
pub fn gemm(a: &[f64], b: &[f64], c: &mut [f64], n: usize) {
    for i in 0..n {
        let ai = &a[i * n..(i + 1) * n];
        for j in 0..n {
            c[i * n + j] -= dot(ai, &b[j * n..(j + 1) * n]);
        }
    }
}

fn dot(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| a * b).sum()
}
