//! Small dense complex linear-algebra helpers shared by the solvers.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use num_complex::Complex64;

pub type CMat = DMatrix<Complex64>;
pub type CVec = DVector<Complex64>;

/// Real part of `w^H Q w`. For Hermitian `Q` the imaginary part is rounding noise.
pub fn quad_form(q: &CMat, w: &CVec) -> f64 {
    let n = w.len();
    let mut acc = 0.0;
    for r in 0..n {
        let mut row = Complex64::new(0.0, 0.0);
        for c in 0..n {
            row += q[(r, c)] * w[c];
        }
        acc += (w[r].conj() * row).re;
    }
    acc
}

/// `Re{a^H Q b}`.
pub fn bilinear_re(a: &CVec, q: &CMat, b: &CVec) -> f64 {
    a.dotc(&(q * b)).re
}

/// Eigen-decomposition of a Hermitian matrix, eigenvalues sorted ascending.
pub fn hermitian_eigh(q: &CMat) -> (Vec<f64>, CMat) {
    let eig = SymmetricEigen::new(q.clone());
    let n = q.nrows();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let vals = order.iter().map(|&k| eig.eigenvalues[k]).collect();
    let mut vecs = CMat::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        vecs.set_column(dst, &eig.eigenvectors.column(src));
    }
    (vals, vecs)
}

pub fn lambda_max(q: &CMat) -> f64 {
    let (vals, _) = hermitian_eigh(q);
    vals.last().copied().unwrap_or(0.0)
}

pub fn lambda_min(q: &CMat) -> f64 {
    let (vals, _) = hermitian_eigh(q);
    vals.first().copied().unwrap_or(0.0)
}

/// Unit-norm eigenvector for the largest eigenvalue.
pub fn principal_eigvec(q: &CMat) -> CVec {
    let (_, vecs) = hermitian_eigh(q);
    let n = q.nrows();
    vecs.column(n - 1).into_owned()
}

/// Factor `F` with `F F^H = Q` built from the eigendecomposition.
/// Eigenvalues below `1e-14 * lambda_max` are rounding noise and set to zero,
/// so rank-deficient covariances give exactly rank-deficient factors.
pub fn psd_factor(q: &CMat) -> CMat {
    let (vals, mut vecs) = hermitian_eigh(q);
    let floor = 1e-14 * vals.last().copied().unwrap_or(0.0).max(0.0);
    for (k, v) in vals.iter().enumerate() {
        let s = if *v > floor { v.sqrt() } else { 0.0 };
        vecs.column_mut(k).scale_mut(s);
    }
    vecs
}

/// Hermitian PSD square root `U diag(sqrt(max(l, 0))) U^H`.
pub fn psd_sqrt(q: &CMat) -> CMat {
    let (vals, vecs) = hermitian_eigh(q);
    let n = q.nrows();
    let mut scaled = vecs.clone();
    for (k, v) in vals.iter().enumerate() {
        scaled.column_mut(k).scale_mut(v.max(0.0).sqrt());
    }
    let mut out = &scaled * vecs.adjoint();
    hermitize(&mut out);
    debug_assert_eq!(out.nrows(), n);
    out
}

/// Overwrite `m` with `(m + m^H) / 2`.
pub fn hermitize(m: &mut CMat) {
    let n = m.nrows();
    for r in 0..n {
        m[(r, r)] = Complex64::new(m[(r, r)].re, 0.0);
        for c in (r + 1)..n {
            let avg = (m[(r, c)] + m[(c, r)].conj()) * 0.5;
            m[(r, c)] = avg;
            m[(c, r)] = avg.conj();
        }
    }
}

/// Lower Cholesky factor of a Hermitian matrix, `None` unless every real
/// pivot is positive. nalgebra's complex factorization takes complex square
/// roots and so accepts indefinite input.
pub fn cholesky_pd(m: &CMat) -> Option<CMat> {
    let n = m.nrows();
    let mut l = CMat::zeros(n, n);
    for j in 0..n {
        let mut pivot = m[(j, j)].re;
        for k in 0..j {
            pivot -= l[(j, k)].norm_sqr();
        }
        if !(pivot > 0.0 && pivot.is_finite()) {
            return None;
        }
        let d = pivot.sqrt();
        l[(j, j)] = Complex64::new(d, 0.0);
        for r in (j + 1)..n {
            let mut acc = m[(r, j)];
            for k in 0..j {
                acc -= l[(r, k)] * l[(j, k)].conj();
            }
            l[(r, j)] = acc / d;
        }
    }
    Some(l)
}

/// Inverse of a Hermitian positive definite matrix from its Cholesky factor.
pub fn inverse_pd(m: &CMat) -> Option<CMat> {
    let l = cholesky_pd(m)?;
    let n = m.nrows();
    let linv = l.solve_lower_triangular(&CMat::identity(n, n))?;
    let mut inv = linv.adjoint() * linv;
    hermitize(&mut inv);
    Some(inv)
}

pub fn trace_re(m: &CMat) -> f64 {
    (0..m.nrows()).map(|k| m[(k, k)].re).sum()
}

/// `Re tr(A B)` for Hermitian `A`, `B`.
pub fn trace_product_re(a: &CMat, b: &CMat) -> f64 {
    let n = a.nrows();
    let mut acc = 0.0;
    for r in 0..n {
        for c in 0..n {
            acc += (a[(r, c)] * b[(c, r)]).re;
        }
    }
    acc
}

pub fn norm_sqr(w: &CVec) -> f64 {
    w.iter().map(|z| z.norm_sqr()).sum()
}

/// Scale `w` onto the ball `||w||^2 <= power` if it lies outside.
pub fn project_ball(w: &mut CVec, power: f64) {
    let n2 = norm_sqr(w);
    if n2 > power {
        let s = (power / n2).sqrt();
        w.scale_mut(s);
    }
}
