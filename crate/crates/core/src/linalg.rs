//! Dense SVD helpers. Singular values below 1e−10 times the largest are treated as zero.

use nalgebra::DMatrix;

pub const RANK_RTOL: f64 = 1e-10;

fn padded_svd(a: &DMatrix<f64>) -> nalgebra::SVD<f64, nalgebra::Dyn, nalgebra::Dyn> {
    // pad to at least as many rows as columns so V is square
    let (r, c) = a.shape();
    if r >= c {
        a.clone().svd(true, true)
    } else {
        let mut p = DMatrix::zeros(c, c);
        p.view_mut((0, 0), (r, c)).copy_from(a);
        p.svd(true, true)
    }
}

fn cutoff(sv: &nalgebra::DVector<f64>) -> f64 {
    RANK_RTOL * sv.iter().cloned().fold(0.0, f64::max)
}

pub fn rank(a: &DMatrix<f64>) -> usize {
    if a.nrows() == 0 || a.ncols() == 0 {
        return 0;
    }
    let sv = a.singular_values();
    let tol = cutoff(&sv);
    sv.iter().filter(|&&s| s > tol).count()
}

pub fn pinv(a: &DMatrix<f64>) -> DMatrix<f64> {
    if a.nrows() == 0 || a.ncols() == 0 {
        return DMatrix::zeros(a.ncols(), a.nrows());
    }
    let svd = a.clone().svd(true, true);
    let tol = cutoff(&svd.singular_values).max(f64::MIN_POSITIVE);
    svd.pseudo_inverse(tol).expect("svd computed with both factors")
}

/// Orthonormal basis of the null space, one column per vector.
pub fn null_space(a: &DMatrix<f64>) -> DMatrix<f64> {
    let c = a.ncols();
    if a.nrows() == 0 {
        return DMatrix::identity(c, c);
    }
    let svd = padded_svd(a);
    let tol = cutoff(&svd.singular_values);
    let vt = svd.v_t.expect("v_t requested");
    let cols: Vec<_> = (0..svd.singular_values.len())
        .filter(|&k| svd.singular_values[k] <= tol)
        .map(|k| vt.row(k).transpose())
        .collect();
    if cols.is_empty() {
        DMatrix::zeros(c, 0)
    } else {
        DMatrix::from_columns(&cols)
    }
}

/// Admissibility test for an arbitrary analysis operator: every active row
/// (1-indexed in `s`) must have a nonzero projection onto N(D_{-S}).
pub fn is_admissible_dense(d: &DMatrix<f64>, s: &[usize]) -> bool {
    let free: Vec<usize> = (0..d.nrows()).filter(|i| !s.contains(&(i + 1))).collect();
    let rows: Vec<_> = free.iter().map(|&i| d.row(i).into_owned()).collect();
    let basis = if rows.is_empty() {
        DMatrix::identity(d.ncols(), d.ncols())
    } else {
        null_space(&DMatrix::from_rows(&rows))
    };
    s.iter().all(|&i| {
        let row = d.row(i - 1);
        let coef = row * &basis;
        coef.norm() > 1e-9 * row.norm().max(1.0)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn moore_penrose_of_path_row() {
        let d = DMatrix::from_row_slice(1, 2, &[-1.0, 1.0]);
        let p = pinv(&d);
        assert!((p[(0, 0)] + 0.5).abs() < 1e-15 && (p[(1, 0)] - 0.5).abs() < 1e-15);
        assert_eq!(rank(&d), 1);
        let ns = null_space(&d);
        assert_eq!(ns.ncols(), 1);
        assert!((ns[(0, 0)] - ns[(1, 0)]).abs() < 1e-12);
    }
}
