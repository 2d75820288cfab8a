//! Dense linear-algebra kernels that nalgebra does not ship: complex Schur
//! based Sylvester/Lyapunov solvers, the matrix sign function and a few
//! symmetric-matrix helpers used by the certificate checks.

use nalgebra::{Complex, DMatrix, DVector, Schur, SymmetricEigen};

use crate::error::{Error, Result};

pub type C64 = Complex<f64>;

const SCHUR_MAX_ITER: usize = 10_000;

pub(crate) fn to_complex(m: &DMatrix<f64>) -> DMatrix<C64> {
    m.map(|v| C64::new(v, 0.0))
}

/// Complex Schur factorization `m = q t q*` with `t` upper triangular.
pub fn complex_schur(m: &DMatrix<f64>) -> Result<(DMatrix<C64>, DMatrix<C64>)> {
    if !m.is_square() {
        return Err(Error::dim("Schur factorization needs a square matrix"));
    }
    let n = m.nrows();
    if (0..n).all(|j| (j + 1..n).all(|i| m[(i, j)] == 0.0)) {
        // already triangular (the iteration stalls on e.g. the zero matrix)
        return Ok((DMatrix::identity(n, n), to_complex(m)));
    }
    if let Some(schur) = Schur::try_new(to_complex(m), f64::EPSILON, SCHUR_MAX_ITER) {
        return Ok(schur.unpack());
    }
    // retry on a shifted copy; the Schur vectors are shift invariant
    let sigma = 1.0 + m.norm();
    let shifted = to_complex(&(m + DMatrix::identity(n, n) * sigma));
    let (q, mut t) = Schur::try_new(shifted, f64::EPSILON, SCHUR_MAX_ITER)
        .ok_or_else(|| Error::Numerical("Schur iteration did not converge".into()))?
        .unpack();
    for i in 0..n {
        t[(i, i)] -= C64::new(sigma, 0.0);
    }
    Ok((q, t))
}

/// Eigenvalues of a real square matrix (via the Schur form, so defective
/// matrices are handled).
pub fn eigenvalues(m: &DMatrix<f64>) -> Result<Vec<C64>> {
    if m.nrows() == 0 {
        return Ok(Vec::new());
    }
    let (_, t) = complex_schur(m)?;
    Ok((0..t.nrows()).map(|i| t[(i, i)]).collect())
}

/// Solves `a x + x b = c` for real `x`.
pub fn solve_sylvester(a: &DMatrix<f64>, b: &DMatrix<f64>, c: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let (n, m) = (a.nrows(), b.nrows());
    if !a.is_square() || !b.is_square() || c.shape() != (n, m) {
        return Err(Error::dim("Sylvester equation operands"));
    }
    if n == 0 || m == 0 {
        return Ok(DMatrix::zeros(n, m));
    }
    let (ua, ta) = complex_schur(a)?;
    let (ub, tb) = complex_schur(b)?;
    let ct = ua.adjoint() * to_complex(c) * &ub;

    let scale = ta.norm() + tb.norm();
    let mut x = DMatrix::<C64>::zeros(n, m);
    for j in 0..m {
        let mut rhs: DVector<C64> = ct.column(j).into_owned();
        for k in 0..j {
            let coef = tb[(k, j)];
            if coef != C64::new(0.0, 0.0) {
                rhs -= x.column(k) * coef;
            }
        }
        let shift = tb[(j, j)];
        for i in (0..n).rev() {
            let mut acc = rhs[i];
            for l in (i + 1)..n {
                acc -= ta[(i, l)] * x[(l, j)];
            }
            let diag = ta[(i, i)] + shift;
            if diag.norm() <= 1e-14 * scale.max(1.0) {
                return Err(Error::Numerical(
                    "Sylvester operator is singular (a and -b share an eigenvalue)".into(),
                ));
            }
            x[(i, j)] = acc / diag;
        }
    }
    let x = ua * x * ub.adjoint();
    Ok(x.map(|v| v.re))
}

/// Solves the continuous Lyapunov equation `a x + x aᵀ + q = 0`; the result
/// is symmetrized.
pub fn solve_lyapunov(a: &DMatrix<f64>, q: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let x = solve_sylvester(a, &a.transpose(), &(-q))?;
    Ok(symmetrize(&x))
}

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

fn log_abs_det(m: &DMatrix<f64>) -> Option<f64> {
    let lu = m.clone().lu();
    let u = lu.u();
    let mut acc = 0.0;
    for i in 0..u.nrows() {
        let d = u[(i, i)].abs();
        if d == 0.0 || !d.is_finite() {
            return None;
        }
        acc += d.ln();
    }
    Some(acc)
}

/// Matrix sign function by the scaled Newton iteration.  Fails when `m` has
/// eigenvalues on (or numerically at) the imaginary axis.
pub fn matrix_sign(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = m.nrows();
    if !m.is_square() {
        return Err(Error::dim("matrix sign needs a square matrix"));
    }
    if n == 0 {
        return Ok(DMatrix::zeros(0, 0));
    }
    let mut z = m.clone();
    let mut scaling = true;
    for _ in 0..200 {
        let inv = z
            .clone()
            .try_inverse()
            .ok_or_else(|| Error::Numerical("sign iteration hit a singular matrix".into()))?;
        let c = if scaling {
            match (log_abs_det(&z), log_abs_det(&inv)) {
                (Some(lz), _) => (-lz / n as f64).exp(),
                _ => 1.0,
            }
        } else {
            1.0
        };
        let next = (&z * c + inv / c) * 0.5;
        let delta = (&next - &z).norm();
        let size = next.norm();
        z = next;
        if !size.is_finite() {
            return Err(Error::Numerical("sign iteration diverged".into()));
        }
        if delta <= 1e-2 * size {
            scaling = false;
        }
        if delta <= 1e-13 * size {
            return Ok(z);
        }
    }
    Err(Error::Numerical("sign iteration did not converge".into()))
}

/// Orthonormal rows spanning the left invariant subspace of `m` that belongs
/// to its eigenvalues with negative real part, i.e. `l` with `l m = m_s l`.
pub fn stable_left_subspace(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = m.nrows();
    let sign = matrix_sign(m)?;
    let proj = (DMatrix::identity(n, n) - sign) * 0.5;
    let svd = proj.svd(false, true);
    let vt = svd
        .v_t
        .ok_or_else(|| Error::Numerical("SVD of spectral projector failed".into()))?;
    let rows: Vec<usize> = (0..svd.singular_values.len())
        .filter(|&i| svd.singular_values[i] > 0.5)
        .collect();
    let mut l = DMatrix::zeros(rows.len(), n);
    for (k, &i) in rows.iter().enumerate() {
        l.row_mut(k).copy_from(&vt.row(i));
    }
    Ok(l)
}

/// Largest eigenvalue of a symmetric matrix (`-inf` for empty input).
pub fn max_eig_sym(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        return f64::NEG_INFINITY;
    }
    SymmetricEigen::new(symmetrize(m))
        .eigenvalues
        .iter()
        .cloned()
        .fold(f64::NEG_INFINITY, f64::max)
}

/// Smallest eigenvalue of a symmetric matrix (`+inf` for empty input).
pub fn min_eig_sym(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        return f64::INFINITY;
    }
    SymmetricEigen::new(symmetrize(m))
        .eigenvalues
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min)
}

/// Assembles a 2×2 block matrix; empty blocks are allowed.
pub fn block2(
    a11: &DMatrix<f64>,
    a12: &DMatrix<f64>,
    a21: &DMatrix<f64>,
    a22: &DMatrix<f64>,
) -> DMatrix<f64> {
    let (r1, c1) = (a11.nrows().max(a12.nrows()), a11.ncols().max(a21.ncols()));
    let (r2, c2) = (a21.nrows().max(a22.nrows()), a12.ncols().max(a22.ncols()));
    let mut m = DMatrix::zeros(r1 + r2, c1 + c2);
    if a11.len() > 0 {
        m.view_mut((0, 0), a11.shape()).copy_from(a11);
    }
    if a12.len() > 0 {
        m.view_mut((0, c1), a12.shape()).copy_from(a12);
    }
    if a21.len() > 0 {
        m.view_mut((r1, 0), a21.shape()).copy_from(a21);
    }
    if a22.len() > 0 {
        m.view_mut((r1, c1), a22.shape()).copy_from(a22);
    }
    m
}

pub fn hstack(blocks: &[&DMatrix<f64>]) -> DMatrix<f64> {
    let rows = blocks.iter().map(|b| b.nrows()).max().unwrap_or(0);
    let cols = blocks.iter().map(|b| b.ncols()).sum();
    let mut m = DMatrix::zeros(rows, cols);
    let mut c = 0;
    for b in blocks {
        if b.len() > 0 {
            m.view_mut((0, c), b.shape()).copy_from(*b);
        }
        c += b.ncols();
    }
    m
}

pub fn vstack(blocks: &[&DMatrix<f64>]) -> DMatrix<f64> {
    let cols = blocks.iter().map(|b| b.ncols()).max().unwrap_or(0);
    let rows = blocks.iter().map(|b| b.nrows()).sum();
    let mut m = DMatrix::zeros(rows, cols);
    let mut r = 0;
    for b in blocks {
        if b.len() > 0 {
            m.view_mut((r, 0), b.shape()).copy_from(*b);
        }
        r += b.nrows();
    }
    m
}

/// Real power of a symmetric positive definite matrix.
pub fn sym_pow(m: &DMatrix<f64>, p: f64) -> Result<DMatrix<f64>> {
    let e = symmetrize(m).symmetric_eigen();
    if e.eigenvalues.iter().any(|v| !(*v > 0.0)) {
        return Err(Error::InvalidArgument("matrix power needs a positive definite argument".into()));
    }
    let d = e.eigenvalues.map(|v| v.powf(p));
    Ok(&e.eigenvectors * DMatrix::from_diagonal(&d) * e.eigenvectors.transpose())
}

pub fn all_finite(m: &DMatrix<f64>) -> bool {
    m.iter().all(|v| v.is_finite())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> DMatrix<f64> {
        DMatrix::from_row_slice(3, 3, &[-1.0, 2.0, 0.0, -3.0, -1.0, 1.0, 0.5, 0.0, -4.0])
    }

    #[test]
    fn sylvester_residual_is_small() {
        let a = sample();
        let b = DMatrix::from_row_slice(2, 2, &[-2.0, 1.0, 0.0, -0.5]);
        let c = DMatrix::from_row_slice(3, 2, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let x = solve_sylvester(&a, &b, &c).unwrap();
        assert!((&a * &x + &x * &b - &c).norm() < 1e-12);
    }

    #[test]
    fn lyapunov_matches_scalar_closed_form() {
        let a = DMatrix::from_element(1, 1, -0.5);
        let q = DMatrix::from_element(1, 1, 1.0);
        let x = solve_lyapunov(&a, &q).unwrap();
        assert!((x[(0, 0)] - 1.0).abs() < 1e-14);
    }

    #[test]
    fn singular_sylvester_is_reported() {
        let a = DMatrix::from_element(1, 1, 1.0);
        let b = DMatrix::from_element(1, 1, -1.0);
        let c = DMatrix::from_element(1, 1, 1.0);
        assert!(solve_sylvester(&a, &b, &c).is_err());
    }

    #[test]
    fn schur_of_zero_and_defective_matrices() {
        assert!(eigenvalues(&DMatrix::zeros(3, 3)).unwrap().iter().all(|l| l.norm() == 0.0));
        let m = DMatrix::from_row_slice(3, 3, &[0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0]);
        let (q, t) = complex_schur(&m).unwrap();
        assert!((&q * &t * q.adjoint() - to_complex(&m)).norm() < 1e-12);
    }

    #[test]
    fn sign_function_splits_spectrum() {
        let m = DMatrix::from_row_slice(2, 2, &[-1.0, 5.0, 0.0, 2.0]);
        let s = matrix_sign(&m).unwrap();
        assert!((&s * &s - DMatrix::identity(2, 2)).norm() < 1e-12);
        let l = stable_left_subspace(&m).unwrap();
        assert_eq!(l.nrows(), 1);
        // l is a left eigenvector for the eigenvalue -1
        let lm = &l * &m;
        assert!((lm + &l).norm() < 1e-12);
    }
}
