//! Small dense helpers shared by the decimation code.
//!
//! Everything is generic over `T: ComplexField<RealField = f64>` so the same
//! code runs on the real physical operators and on complex random instances.

use nalgebra::{ComplexField, DMatrix, DVector};

/// Submatrix `m[rows, cols]`.
pub fn restrict<T: ComplexField>(m: &DMatrix<T>, rows: &[usize], cols: &[usize]) -> DMatrix<T> {
    DMatrix::from_fn(rows.len(), cols.len(), |i, j| m[(rows[i], cols[j])].clone())
}

pub fn restrict_vec<T: ComplexField>(v: &DVector<T>, idx: &[usize]) -> DVector<T> {
    DVector::from_fn(idx.len(), |i, _| v[idx[i]].clone())
}

/// `diag(d) * m`.
pub fn scale_rows<T: ComplexField<RealField = f64>>(m: &DMatrix<T>, d: &[f64]) -> DMatrix<T> {
    let mut out = m.clone();
    for (i, &s) in d.iter().enumerate() {
        let mut row = out.row_mut(i);
        row.scale_mut(s);
    }
    out
}

/// `m * diag(d)`.
pub fn scale_cols<T: ComplexField<RealField = f64>>(m: &DMatrix<T>, d: &[f64]) -> DMatrix<T> {
    let mut out = m.clone();
    for (j, &s) in d.iter().enumerate() {
        let mut col = out.column_mut(j);
        col.scale_mut(s);
    }
    out
}

pub fn diag_matrix<T: ComplexField<RealField = f64>>(d: &[f64]) -> DMatrix<T> {
    let mut out = DMatrix::<T>::zeros(d.len(), d.len());
    for (i, &x) in d.iter().enumerate() {
        out[(i, i)] = T::from_real(x);
    }
    out
}

pub fn max_abs<T: ComplexField<RealField = f64>>(m: &DMatrix<T>) -> f64 {
    m.iter().map(|x| x.clone().modulus()).fold(0.0, f64::max)
}

/// Largest singular value by power iteration on `M^H M`.
pub fn spectral_norm<T: ComplexField<RealField = f64>>(m: &DMatrix<T>) -> f64 {
    let n = m.ncols();
    if n == 0 || m.nrows() == 0 {
        return 0.0;
    }
    if n <= 64 && m.nrows() <= 64 {
        return m.clone().singular_values().max();
    }
    // deterministic start vector with no special alignment
    let mut x = DVector::<T>::from_fn(n, |i, _| T::from_real(1.0 + 0.37 * ((i * 7919) % 101) as f64 / 101.0));
    let mut est = 0.0;
    for _ in 0..200 {
        let nx = x.norm();
        if nx == 0.0 {
            return 0.0;
        }
        x.unscale_mut(nx);
        let y = m * &x;
        let z = m.adjoint() * &y;
        let new = z.norm().sqrt();
        x = z;
        if (new - est).abs() <= 1e-10 * new {
            return new;
        }
        est = new;
    }
    est
}

/// Smallest singular value. Exact SVD up to `exact_dim`, otherwise inverse
/// power iteration on `(M M^H)^{-1}` through one LU factorization.
pub fn sigma_min<T: ComplexField<RealField = f64>>(m: &DMatrix<T>, exact_dim: usize) -> f64 {
    let n = m.nrows();
    if n == 0 {
        return f64::INFINITY;
    }
    if n <= exact_dim {
        return m.clone().singular_values().min();
    }
    let lu = m.clone().lu();
    let lu_h = m.adjoint().lu();
    let mut x = DVector::<T>::from_fn(n, |i, _| T::from_real(1.0 + 0.29 * ((i * 104_729) % 97) as f64 / 97.0));
    let mut est = f64::INFINITY;
    for _ in 0..100 {
        let nx = x.norm();
        x.unscale_mut(nx);
        let y = match lu_h.solve(&x) {
            Some(y) => y,
            None => return 0.0,
        };
        let z = match lu.solve(&y) {
            Some(z) => z,
            None => return 0.0,
        };
        let nz = z.norm();
        if !nz.is_finite() || nz == 0.0 {
            return 0.0;
        }
        let new = 1.0 / nz.sqrt();
        x = z;
        if (new - est).abs() <= 1e-9 * new {
            return new;
        }
        est = new;
    }
    est
}

/// Lowest eigenpair of a Hermitian matrix.
pub fn lowest_eigenpair<T: ComplexField<RealField = f64>>(h: &DMatrix<T>) -> (f64, DVector<T>) {
    let eig = h.clone().symmetric_eigen();
    let (imin, _) = eig
        .eigenvalues
        .iter()
        .enumerate()
        .fold((0, f64::INFINITY), |acc, (i, &e)| if e < acc.1 { (i, e) } else { acc });
    let e = eig.eigenvalues[imin];
    let mut v = eig.eigenvectors.column(imin).into_owned();
    // the QR eigenvectors lose accuracy inside large degenerate clusters, so
    // polish with shifted inverse iteration
    let shift = e - 1e-10 * (1.0 + e.abs());
    let n = h.nrows();
    let lu = (h - DMatrix::<T>::identity(n, n) * T::from_real(shift)).lu();
    for _ in 0..2 {
        match lu.solve(&v) {
            Some(z) if z.norm().is_finite() && z.norm() > 0.0 => {
                let nz = z.norm();
                v = z.unscale(nz);
            }
            _ => break,
        }
    }
    (e, v)
}

/// Promote a real matrix.
pub fn to_scalar<T: ComplexField<RealField = f64>>(m: &DMatrix<f64>) -> DMatrix<T> {
    m.map(T::from_real)
}
