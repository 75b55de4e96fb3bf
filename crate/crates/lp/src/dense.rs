/// Inverts a dense row-major `m x m` matrix in place by Gauss-Jordan
/// elimination with partial pivoting. Returns `false` if a pivot falls below
/// `tol`, leaving `a` in an unspecified state.
pub(crate) fn invert_in_place(a: &mut [f64], m: usize, tol: f64) -> bool {
    debug_assert_eq!(a.len(), m * m);
    let mut inv = vec![0.0; m * m];
    for i in 0..m {
        inv[i * m + i] = 1.0;
    }
    for col in 0..m {
        let mut piv = col;
        let mut best = a[col * m + col].abs();
        for r in col + 1..m {
            let v = a[r * m + col].abs();
            if v > best {
                best = v;
                piv = r;
            }
        }
        if best < tol {
            return false;
        }
        if piv != col {
            for k in 0..m {
                a.swap(col * m + k, piv * m + k);
                inv.swap(col * m + k, piv * m + k);
            }
        }
        let d = 1.0 / a[col * m + col];
        for k in 0..m {
            a[col * m + k] *= d;
            inv[col * m + k] *= d;
        }
        for r in 0..m {
            if r == col {
                continue;
            }
            let f = a[r * m + col];
            if f == 0.0 {
                continue;
            }
            for k in 0..m {
                a[r * m + k] -= f * a[col * m + k];
                inv[r * m + k] -= f * inv[col * m + k];
            }
        }
    }
    a.copy_from_slice(&inv);
    true
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn inverts_permuted_matrix() {
        let mut a = vec![0.0, 2.0, 1.0, 1.0, 0.0, 0.0, 0.0, 1.0, 3.0];
        let orig = a.clone();
        assert!(invert_in_place(&mut a, 3, 1e-12));
        for i in 0..3 {
            for j in 0..3 {
                let v: f64 = (0..3).map(|k| orig[i * 3 + k] * a[k * 3 + j]).sum();
                let e = if i == j { 1.0 } else { 0.0 };
                assert!((v - e).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rejects_singular() {
        let mut a = vec![1.0, 2.0, 2.0, 4.0];
        assert!(!invert_in_place(&mut a, 2, 1e-12));
    }
}
