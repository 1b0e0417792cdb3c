//! Closed-form rigid (Kabsch) and affine least-squares fits.

use nalgebra::{DMatrix, DVector};

use super::{MatchedPair, RegistrationError};

const RANK_TOL: f64 = 1e-10;

fn dim(pairs: &[MatchedPair], idx: &[usize]) -> Result<usize, RegistrationError> {
    let d = idx.first().map(|&i| pairs[i].p_t.len()).ok_or(RegistrationError::TooFewPairs { need: 3, got: 0 })?;
    if idx.len() < d + 1 {
        return Err(RegistrationError::TooFewPairs { need: d + 1, got: idx.len() });
    }
    Ok(d)
}

fn centroid(pairs: &[MatchedPair], idx: &[usize], d: usize, tracker: bool) -> DVector<f64> {
    let mut c = DVector::zeros(d);
    for &i in idx {
        let p = if tracker { &pairs[i].p_t } else { &pairs[i].p_l };
        c += DVector::from_column_slice(p);
    }
    c / idx.len() as f64
}

/// Least-squares rotation and translation with `det(R) = +1`.
pub fn fit_rigid_svd(pairs: &[MatchedPair], train_idx: &[usize]) -> Result<(DMatrix<f64>, DVector<f64>), RegistrationError> {
    let d = dim(pairs, train_idx)?;
    let ct = centroid(pairs, train_idx, d, true);
    let cl = centroid(pairs, train_idx, d, false);
    let mut h = DMatrix::zeros(d, d);
    let mut cov = DMatrix::zeros(d, d);
    for &i in train_idx {
        let a = DVector::from_column_slice(&pairs[i].p_t) - &ct;
        let b = DVector::from_column_slice(&pairs[i].p_l) - &cl;
        h += &a * b.transpose();
        cov += &a * a.transpose();
    }
    let sv = cov.clone().svd(false, false).singular_values;
    if sv.min() <= RANK_TOL * sv.max().max(f64::MIN_POSITIVE) {
        return Err(RegistrationError::Degenerate);
    }
    let svd = h.svd(true, true);
    let u = svd.u.expect("requested");
    let v = svd.v_t.expect("requested").transpose();
    let mut s = DMatrix::identity(d, d);
    s[(d - 1, d - 1)] = (&v * u.transpose()).determinant().signum();
    let r = &v * s * u.transpose();
    let t = &cl - &r * &ct;
    Ok((r, t))
}

/// Ordinary least squares on homogeneous coordinates.
pub fn fit_affine(pairs: &[MatchedPair], train_idx: &[usize]) -> Result<(DMatrix<f64>, DVector<f64>), RegistrationError> {
    let d = dim(pairs, train_idx)?;
    let n = train_idx.len();
    let mut x = DMatrix::zeros(n, d + 1);
    let mut y = DMatrix::zeros(n, d);
    for (row, &i) in train_idx.iter().enumerate() {
        for k in 0..d {
            x[(row, k)] = pairs[i].p_t[k];
            y[(row, k)] = pairs[i].p_l[k];
        }
        x[(row, d)] = 1.0;
    }
    let svd = x.svd(true, true);
    let sv = &svd.singular_values;
    if sv.min() <= RANK_TOL * sv.max() {
        return Err(RegistrationError::Degenerate);
    }
    let beta = svd.solve(&y, 0.0).map_err(|_| RegistrationError::Degenerate)?;
    // beta is (d+1) x d: rows are input coefficients, last row the offset
    let a = beta.rows(0, d).transpose();
    let t = beta.row(d).transpose();
    Ok((a, t))
}
